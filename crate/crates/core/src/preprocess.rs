//! Pre-processing and network input assembly.
//!
//! Time-domain acquisitions go through [`ingest`]: Butterworth low-pass,
//! Fourier transform, resampling to the window. Windowed spectra (synthetic
//! samples, or ingested scans) then go through [`assemble_input`]: B0
//! alignment, component extraction, per-row normalisation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array4, Axis};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::{self, ArchiveError, PayloadWriter};
use crate::datagen::Sample;
use crate::signal::{
    self, component_of, difference_spectrum, AcquisitionKind, Component, PpmWindow, SignalError, Spectrum, TimeSignal,
};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("cutoff fraction {0} must lie strictly between 0 and 1")]
    InvalidCutoff(f64),
    #[error("no peak in [{low_ppm}, {high_ppm}] ppm stands above 3x the median magnitude")]
    PeakNotFound { low_ppm: f64, high_ppm: f64 },
    #[error("acquisition `{0}` not available")]
    MissingAcquisition(AcquisitionKind),
    #[error("spectrum axis does not match the configured window")]
    WindowMismatch,
    #[error("invalid input configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
}

pub type Result<T, E = PreprocessError> = std::result::Result<T, E>;

/// First-order digital Butterworth low-pass (bilinear transform), cutoff as
/// a fraction of Nyquist.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstOrderLowPass {
    pub b0: f64,
    pub b1: f64,
    pub a1: f64,
}

impl FirstOrderLowPass {
    pub fn new(cutoff_fraction: f64) -> Result<Self> {
        if !(cutoff_fraction > 0.0 && cutoff_fraction < 1.0) {
            return Err(PreprocessError::InvalidCutoff(cutoff_fraction));
        }
        let k = (std::f64::consts::PI * cutoff_fraction / 2.0).tan();
        let g = k / (1.0 + k);
        Ok(Self { b0: g, b1: g, a1: (k - 1.0) / (k + 1.0) })
    }

    /// Squared magnitude response at `f` (fraction of Nyquist).
    pub fn power_response(&self, f: f64) -> f64 {
        let w = std::f64::consts::PI * f;
        let z = Complex64::from_polar(1.0, -w);
        let h = (self.b0 + self.b1 * z) / (1.0 + self.a1 * z);
        h.norm_sqr()
    }

    fn run(&self, x: &mut [f64]) {
        // Transposed direct form II, started at steady state for x[0].
        let Some(&first) = x.first() else { return };
        let mut z = first * (1.0 - self.b0);
        for v in x.iter_mut() {
            let y = self.b0 * *v + z;
            z = self.b1 * *v - self.a1 * y;
            *v = y;
        }
    }

    /// Forward-backward filtering with odd reflection at both ends.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n < 2 {
            return x.to_vec();
        }
        let pad = 6.min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        self.run(&mut ext);
        ext.reverse();
        self.run(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

/// Zero-phase low-pass of the real and imaginary channels separately.
pub fn butterworth_filter(t: &TimeSignal, cutoff_fraction: f64) -> Result<TimeSignal> {
    let f = FirstOrderLowPass::new(cutoff_fraction)?;
    let re: Vec<f64> = t.samples().iter().map(|v| v.re).collect();
    let im: Vec<f64> = t.samples().iter().map(|v| v.im).collect();
    let samples = f.filtfilt(&re).into_iter().zip(f.filtfilt(&im)).map(|(r, i)| Complex64::new(r, i)).collect();
    Ok(t.with_samples(samples)?)
}

/// Butterworth (if any), FFT, then resampling onto `window`. When both
/// edit acquisitions are given and no difference, the difference is added.
pub fn ingest(
    signals: &[(AcquisitionKind, TimeSignal)],
    window: &PpmWindow,
    cutoff_fraction: Option<f64>,
) -> Result<Vec<Spectrum>> {
    let mut out = Vec::with_capacity(3);
    for (kind, t) in signals {
        let t = match cutoff_fraction {
            Some(c) => butterworth_filter(t, c)?,
            None => t.clone(),
        };
        let full = signal::fft_to_spectrum(&t, *kind)?;
        out.push(signal::resample_to_window(&full, window, &t)?);
    }
    let find = |out: &[Spectrum], k| out.iter().position(|s: &Spectrum| s.acquisition() == k);
    if find(&out, AcquisitionKind::Difference).is_none() {
        if let (Some(on), Some(off)) = (find(&out, AcquisitionKind::EditOn), find(&out, AcquisitionKind::EditOff)) {
            let d = difference_spectrum(&out[on], &out[off])?;
            out.push(d);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct B0Options {
    pub search_low_ppm: f64,
    pub search_high_ppm: f64,
    pub reference_ppm: f64,
}

impl Default for B0Options {
    fn default() -> Self {
        Self { search_low_ppm: 1.8, search_high_ppm: 2.2, reference_ppm: 2.008 }
    }
}

fn find<'a>(spectra: &[&'a Spectrum], kind: AcquisitionKind) -> Option<&'a Spectrum> {
    spectra.iter().copied().find(|s| s.acquisition() == kind)
}

/// Bin shift that moves the NAA singlet onto the reference bin.
///
/// The edit-on acquisition lacks the NAA singlet while every other line
/// near 2 ppm appears in both, so the peak is located on `|off - on|` when
/// the edit-on (or difference) spectrum is available, and on the edit-off
/// magnitude otherwise.
pub fn b0_shift(spectra: &[&Spectrum], opts: &B0Options) -> Result<isize> {
    let off = find(spectra, AcquisitionKind::EditOff).ok_or(PreprocessError::MissingAcquisition(AcquisitionKind::EditOff))?;
    let axis = *off.axis();
    let range = axis.bins_within(opts.search_low_ppm, opts.search_high_ppm);
    let not_found = PreprocessError::PeakNotFound { low_ppm: opts.search_low_ppm, high_ppm: opts.search_high_ppm };
    let reference = axis.nearest_bin(opts.reference_ppm).ok_or_else(|| PreprocessError::InvalidConfig(format!(
        "reference {} ppm off the axis",
        opts.reference_ppm
    )))?;
    if range.is_empty() {
        return Err(not_found);
    }
    let profile: Vec<f64> = if let Some(on) = find(spectra, AcquisitionKind::EditOn) {
        range.clone().map(|i| (off.values()[i] - on.values()[i]).norm()).collect()
    } else if let Some(diff) = find(spectra, AcquisitionKind::Difference) {
        range.clone().map(|i| diff.values()[i].norm()).collect()
    } else {
        range.clone().map(|i| off.values()[i].norm()).collect()
    };
    let (arg, peak) = profile.iter().copied().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, v)| {
        if v > best.1 {
            (i, v)
        } else {
            best
        }
    });
    let mut sorted = profile.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    if !(peak > 3.0 * median) {
        return Err(not_found);
    }
    Ok(reference as isize - (range.start + arg) as isize)
}

/// Circularly shifts every spectrum by [`b0_shift`].
pub fn b0_correct(spectra: &[Spectrum], opts: &B0Options) -> Result<(Vec<Spectrum>, isize)> {
    let refs: Vec<&Spectrum> = spectra.iter().collect();
    let shift = b0_shift(&refs, opts)?;
    Ok((spectra.iter().map(|s| s.rotated(shift)).collect(), shift))
}

/// Mean-centres then max-abs scales each row; rows that end up all zero
/// are left as they are.
pub fn normalize(rows: &mut Array2<f64>) {
    for mut row in rows.axis_iter_mut(Axis(0)) {
        let mean = row.mean().unwrap_or(0.0);
        row.mapv_inplace(|v| v - mean);
        let max = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max > 0.0 {
            row.mapv_inplace(|v| v / max);
        }
    }
}

fn parse_list<T: FromStr<Err = String> + PartialEq + Copy>(text: &str, what: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let v = part.parse::<T>().map_err(PreprocessError::InvalidConfig)?;
        if out.contains(&v) {
            return Err(PreprocessError::InvalidConfig(format!("{what} `{part}` listed twice")));
        }
        out.push(v);
    }
    if out.is_empty() {
        return Err(PreprocessError::InvalidConfig(format!("no {what}s given")));
    }
    Ok(out)
}

/// Which spectra and components form the network input rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputConfig {
    pub acquisitions: Vec<AcquisitionKind>,
    pub components: Vec<Component>,
    pub window: PpmWindow,
    /// `None` disables B0 alignment.
    pub b0: Option<B0Options>,
    /// Low-pass cutoff for time-domain ingest; `None` disables it.
    pub butterworth_cutoff: Option<f64>,
}

impl Default for InputConfig {
    fn default() -> Self {
        Self {
            acquisitions: vec![AcquisitionKind::EditOff, AcquisitionKind::Difference],
            components: vec![Component::Magnitude],
            window: PpmWindow::default(),
            b0: Some(B0Options::default()),
            butterworth_cutoff: Some(0.25),
        }
    }
}

impl InputConfig {
    pub fn new(acquisitions: Vec<AcquisitionKind>, components: Vec<Component>) -> Result<Self> {
        let cfg = Self { acquisitions, components, ..Self::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    /// From CLI text such as `"off,diff"` and `"m"`.
    pub fn parse(acquisitions: &str, components: &str) -> Result<Self> {
        Self::new(parse_list(acquisitions, "acquisition")?, parse_list(components, "component")?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.acquisitions.is_empty() || self.components.is_empty() {
            return Err(PreprocessError::InvalidConfig("acquisitions and components must be non-empty".into()));
        }
        for (i, a) in self.acquisitions.iter().enumerate() {
            if self.acquisitions[..i].contains(a) {
                return Err(PreprocessError::InvalidConfig(format!("acquisition {a} repeated")));
            }
        }
        for (i, c) in self.components.iter().enumerate() {
            if self.components[..i].contains(c) {
                return Err(PreprocessError::InvalidConfig(format!("component {c} repeated")));
            }
        }
        if let Some(c) = self.butterworth_cutoff {
            FirstOrderLowPass::new(c)?;
        }
        self.window.validate()?;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.acquisitions.len() * self.components.len()
    }

    pub fn bins(&self) -> usize {
        self.window.bins
    }

    /// Row labels such as `off.m`, in tensor order.
    pub fn row_names(&self) -> Vec<String> {
        self.acquisitions
            .iter()
            .flat_map(|a| self.components.iter().map(move |c| format!("{}.{}", a.short_name(), c.short_name())))
            .collect()
    }
}

impl fmt::Display for InputConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a: Vec<&str> = self.acquisitions.iter().map(|a| a.short_name()).collect();
        let c: Vec<&str> = self.components.iter().map(|c| c.short_name()).collect();
        write!(f, "{{{}}}x{{{}}}", a.join(","), c.join(","))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputTensor {
    pub data: Array2<f64>,
    /// Applied B0 shift in bins; `None` when alignment was skipped.
    pub b0_shift: Option<isize>,
}

impl InputTensor {
    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn bins(&self) -> usize {
        self.data.ncols()
    }
}

/// B0-aligned component rows, mean-centred but not scaled. Skipped
/// alignment is reported through `b0_shift = None`.
pub fn assemble_unscaled(spectra: &[&Spectrum], cfg: &InputConfig) -> Result<InputTensor> {
    let window_axis = cfg.window.axis();
    let mut picked = Vec::with_capacity(cfg.acquisitions.len());
    for &kind in &cfg.acquisitions {
        let s = find(spectra, kind).ok_or(PreprocessError::MissingAcquisition(kind))?;
        if !s.axis().same_as(&window_axis) {
            return Err(PreprocessError::WindowMismatch);
        }
        picked.push(s);
    }
    let shift = match &cfg.b0 {
        None => None,
        Some(opts) => match b0_shift(spectra, opts) {
            Ok(s) => Some(s),
            Err(PreprocessError::PeakNotFound { .. }) => {
                log::debug!("B0 reference peak not found; alignment skipped");
                None
            }
            Err(e) => return Err(e),
        },
    };
    let bins = cfg.bins();
    let mut data = Array2::zeros((cfg.rows(), bins));
    let mut r = 0;
    for s in picked {
        let mut values: Vec<Complex64> = s.values().to_vec();
        if let Some(k) = shift {
            values.rotate_right(k.rem_euclid(bins as isize) as usize);
        }
        for &c in &cfg.components {
            let mut row = data.row_mut(r);
            for (dst, v) in row.iter_mut().zip(component_of(&values, c)) {
                *dst = v;
            }
            let mean = row.mean().unwrap_or(0.0);
            row.mapv_inplace(|v| v - mean);
            r += 1;
        }
    }
    Ok(InputTensor { data, b0_shift: shift })
}

/// Full input pipeline for windowed spectra.
pub fn assemble_spectra(spectra: &[&Spectrum], cfg: &InputConfig) -> Result<InputTensor> {
    let mut t = assemble_unscaled(spectra, cfg)?;
    normalize(&mut t.data);
    Ok(t)
}

pub fn assemble_input(sample: &Sample, cfg: &InputConfig) -> Result<InputTensor> {
    let s = &sample.spectra;
    assemble_spectra(&[&s.edit_off, &s.edit_on, &s.difference], cfg)
}

/// Inputs for many samples as an `(n, 1, rows, bins)` batch.
pub fn assemble_batch(samples: &[Sample], cfg: &InputConfig) -> Result<Array4<f64>> {
    cfg.validate()?;
    let tensors = samples.par_iter().map(|s| assemble_input(s, cfg)).collect::<Result<Vec<_>>>()?;
    Ok(stack(&tensors, cfg))
}

pub(crate) fn stack(tensors: &[InputTensor], cfg: &InputConfig) -> Array4<f64> {
    let mut out = Array4::zeros((tensors.len(), 1, cfg.rows(), cfg.bins()));
    for (mut dst, t) in out.outer_iter_mut().zip(tensors) {
        dst.index_axis_mut(Axis(0), 0).assign(&t.data);
    }
    out
}

pub const SCAN_MAGIC: &[u8; 8] = b"MRSSCAN1";
pub const SCAN_VERSION: u32 = 1;

/// A measured (or exported) set of time-domain acquisitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub name: String,
    pub signals: Vec<(AcquisitionKind, TimeSignal)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScanHeader {
    name: String,
    acquisitions: Vec<ScanAcquisition>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScanAcquisition {
    kind: AcquisitionKind,
    bandwidth_hz: f64,
    reference_frequency_mhz: f64,
    carrier_ppm: f64,
    samples: usize,
}

impl Scan {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = ScanHeader {
            name: self.name.clone(),
            acquisitions: self
                .signals
                .iter()
                .map(|(kind, t)| ScanAcquisition {
                    kind: *kind,
                    bandwidth_hz: t.bandwidth_hz(),
                    reference_frequency_mhz: t.reference_frequency_mhz(),
                    carrier_ppm: t.carrier_ppm(),
                    samples: t.len(),
                })
                .collect(),
        };
        let mut w = PayloadWriter::default();
        for (_, t) in &self.signals {
            w.complex(t.samples());
        }
        archive::encode(SCAN_MAGIC, SCAN_VERSION, &header, &w.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Scan> {
        let (h, mut p): (ScanHeader, _) = archive::decode(bytes, SCAN_MAGIC, SCAN_VERSION)?;
        let mut signals = Vec::with_capacity(h.acquisitions.len());
        for a in h.acquisitions {
            let samples = p.complex(a.samples)?;
            let t = TimeSignal::new(samples, a.bandwidth_hz, a.reference_frequency_mhz)?.with_carrier_ppm(a.carrier_ppm);
            signals.push((a.kind, t));
        }
        p.finish()?;
        Ok(Scan { name: h.name, signals })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(ArchiveError::from)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Scan> {
        Self::from_bytes(&std::fs::read(path).map_err(ArchiveError::from)?)
    }

    /// Windowed spectra ready for [`assemble_spectra`].
    pub fn spectra(&self, cfg: &InputConfig) -> Result<Vec<Spectrum>> {
        ingest(&self.signals, &cfg.window, cfg.butterworth_cutoff)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{build_basis, default_definitions, synthesize_fid, BasisSet, SynthesisParams};
    use crate::datagen::{synthesize_sample, ConcentrationVector};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;

    fn basis() -> &'static BasisSet {
        static B: OnceLock<BasisSet> = OnceLock::new();
        B.get_or_init(|| build_basis(&default_definitions(), &[1.0], &PpmWindow::default()).unwrap().remove(0))
    }

    fn mixture(c: &[(&str, f64)]) -> Sample {
        synthesize_sample(basis(), &ConcentrationVector::new(c.iter().map(|&(n, v)| (n, v))).unwrap(), 0.0, 0).unwrap()
    }

    fn t(samples: Vec<Complex64>) -> TimeSignal {
        TimeSignal::new(samples, 2000.0, 127.0).unwrap()
    }

    #[test]
    fn filtfilt_matches_reference_values() {
        // Forward-backward output for butter(1, 0.25) with odd padding of 6.
        let x = [1.0, -2.0, 3.5, 0.25, 4.0, -1.0, 2.0, 0.0, 1.5, -0.5, 3.0, 2.5];
        let expect = [
            0.9973580509044806,
            0.82047986461889,
            1.2197560628983959,
            1.5422006680271785,
            1.4853918888589899,
            1.1575978776970968,
            0.9603622232219108,
            0.9373963404856684,
            0.9661212786926525,
            1.2774403369967342,
            1.9221518865609082,
            2.5023719473418202,
        ];
        let f = FirstOrderLowPass::new(0.25).unwrap();
        for (y, e) in f.filtfilt(&x).iter().zip(expect) {
            assert!((y - e).abs() < 1e-12, "{y} vs {e}");
        }
    }

    #[test]
    fn dc_passes_unchanged() {
        let out = butterworth_filter(&t(vec![Complex64::new(0.7, -1.3); 300]), 0.25).unwrap();
        for v in out.samples() {
            assert!((v - Complex64::new(0.7, -1.3)).norm() < 1e-9);
        }
    }

    #[test]
    fn high_tone_attenuated() {
        let n = 4096;
        let tone: Vec<Complex64> =
            (0..n).map(|j| Complex64::from_polar(1.0, std::f64::consts::PI * 0.9 * j as f64)).collect();
        let out = butterworth_filter(&t(tone), 0.25).unwrap();
        // Away from the edges the output is the steady-state response.
        let mid = &out.samples()[n / 4..3 * n / 4];
        let amp = mid.iter().map(|v| v.norm()).sum::<f64>() / mid.len() as f64;
        let lp = FirstOrderLowPass::new(0.25).unwrap();
        // Forward-backward squares the magnitude response.
        let expected = lp.power_response(0.9);
        let analog = 1.0 / (1.0 + (0.9f64 / 0.25).powi(2));
        assert!(amp < 0.1 && analog < 0.1);
        assert!((amp - expected).abs() < 1e-6, "{amp} vs {expected}");
        let k = (std::f64::consts::PI * 0.9 / 2.0).tan() / (std::f64::consts::PI * 0.25 / 2.0).tan();
        assert!((expected - 1.0 / (1.0 + k * k)).abs() < 1e-12);
    }

    #[test]
    fn white_noise_loses_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<Complex64> = (0..2000).map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect();
        let var = |v: &[Complex64]| v.iter().map(|z| z.norm_sqr()).sum::<f64>() / v.len() as f64;
        let out = butterworth_filter(&t(x.clone()), 0.25).unwrap();
        assert!(var(out.samples()) < var(&x));
    }

    #[test]
    fn invalid_cutoff() {
        for c in [0.0, 1.0, -0.3, f64::NAN] {
            assert!(matches!(FirstOrderLowPass::new(c), Err(PreprocessError::InvalidCutoff(_))));
        }
    }

    #[test]
    fn normalize_examples() {
        let mut m = array![[2.0, -4.0, 2.0], [0.0, 0.0, 0.0], [1.0, 2.0, 6.0]];
        normalize(&mut m);
        assert_eq!(m.row(0).to_vec(), vec![0.5, -1.0, 0.5]);
        assert_eq!(m.row(1).to_vec(), vec![0.0, 0.0, 0.0]);
        assert!((m.row(2).iter().fold(0.0f64, |a, v| a.max(v.abs())) - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn normalized_rows_have_unit_peak(rows in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 2..40), 1..5)) {
            let w = rows.iter().map(Vec::len).min().unwrap();
            let mut m = Array2::from_shape_fn((rows.len(), w), |(i, j)| rows[i][j]);
            normalize(&mut m);
            for row in m.rows() {
                let max = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                prop_assert!(max == 0.0 || (max - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn input_shapes() {
        let s = mixture(&[("NAA", 0.5), ("GABA", 0.3)]);
        let cfg = InputConfig::parse("off,diff", "m").unwrap();
        assert_eq!(assemble_input(&s, &cfg).unwrap().data.dim(), (2, 2048));
        let cfg = InputConfig::parse("off,on,diff", "r,i,m").unwrap();
        assert_eq!(assemble_input(&s, &cfg).unwrap().data.dim(), (9, 2048));
        assert_eq!(cfg.row_names()[1], "off.i");
        let cfg = InputConfig::parse("off", "r").unwrap();
        let x = assemble_input(&s, &cfg).unwrap();
        assert_eq!(x.data.dim(), (1, 2048));
        assert_eq!(x.b0_shift, Some(0));
        assert!(InputConfig::parse("off,off", "m").is_err());
        assert!(InputConfig::parse("off", "x").is_err());
        assert!(InputConfig::parse("", "m").is_err());
    }

    #[test]
    fn missing_acquisition() {
        let s = mixture(&[("NAA", 1.0)]);
        let cfg = InputConfig::parse("off,diff", "m").unwrap();
        assert!(matches!(
            assemble_spectra(&[&s.spectra.edit_off], &cfg),
            Err(PreprocessError::MissingAcquisition(AcquisitionKind::Difference))
        ));
    }

    #[test]
    fn b0_recovers_shifts() {
        let s = mixture(&[("NAA", 0.2), ("Cr", 0.3), ("GABA", 0.1), ("Glu", 0.9), ("Gln", 0.5)]);
        let axis = basis().axis();
        let reference = axis.nearest_bin(2.008).unwrap();
        for dppm in [0.05, -0.05] {
            let k = (dppm / axis.step_ppm).round() as isize;
            let raw = [s.spectra.edit_off.rotated(k), s.spectra.edit_on.rotated(k), s.spectra.difference.rotated(k)];
            let (fixed, shift) = b0_correct(&raw, &B0Options::default()).unwrap();
            assert!((shift + k).abs() <= 1, "dppm {dppm}: shift {shift}, applied {k}");
            let r = axis.bins_within(1.8, 2.2);
            let peak = r
                .clone()
                .max_by(|&a, &b| {
                    let d = |i: usize| (fixed[0].values()[i] - fixed[1].values()[i]).norm();
                    d(a).total_cmp(&d(b))
                })
                .unwrap();
            assert!((peak as isize - reference as isize).abs() <= 1);
        }
    }

    #[test]
    fn b0_fixed_point_and_degenerate() {
        let s = mixture(&[("NAA", 0.4), ("Glu", 0.6)]);
        let raw = [s.spectra.edit_off.clone(), s.spectra.edit_on.clone()];
        let (fixed, shift) = b0_correct(&raw, &B0Options::default()).unwrap();
        assert_eq!(shift, 0);
        assert_eq!(fixed[0], raw[0]);

        let axis = basis().axis();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let flat: Vec<Complex64> =
            (0..axis.len).map(|_| Complex64::from_polar(1.0, rng.random::<f64>() * 6.283)).collect();
        let flat = Spectrum::new(flat, axis, AcquisitionKind::EditOff).unwrap();
        assert!(matches!(b0_correct(&[flat], &B0Options::default()), Err(PreprocessError::PeakNotFound { .. })));
    }

    #[test]
    fn b0_edit_off_only_fallback_and_scaling() {
        let s = mixture(&[("NAA", 1.0), ("Cr", 0.5)]);
        let off = s.spectra.edit_off.rotated(-20);
        let (_, shift) = b0_correct(&[off.clone()], &B0Options::default()).unwrap();
        assert_eq!(shift, 20);
        let (_, scaled_shift) = b0_correct(&[off.scaled(37.0)], &B0Options::default()).unwrap();
        assert_eq!(scaled_shift, shift);
    }

    #[test]
    fn magnitude_rows_phase_invariant() {
        let s = mixture(&[("NAA", 0.3), ("Cr", 0.2), ("GABA", 0.2), ("Glu", 0.2), ("Gln", 0.1)]);
        let cfg = InputConfig::parse("off,on,diff", "m").unwrap();
        let rot = Complex64::from_polar(1.0, 1.1);
        let turn = |x: &Spectrum| {
            Spectrum::new(x.values().iter().map(|v| v * rot).collect(), *x.axis(), x.acquisition()).unwrap()
        };
        let a = assemble_input(&s, &cfg).unwrap();
        let t = [turn(&s.spectra.edit_off), turn(&s.spectra.edit_on), turn(&s.spectra.difference)];
        let b = assemble_spectra(&[&t[0], &t[1], &t[2]], &cfg).unwrap();
        let diff = (&a.data - &b.data).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-9, "{diff}");
    }

    #[test]
    fn deterministic() {
        let s = mixture(&[("NAA", 0.3), ("GABA", 0.7)]);
        let cfg = InputConfig::parse("on,diff", "r,m").unwrap();
        assert_eq!(assemble_input(&s, &cfg).unwrap(), assemble_input(&s, &cfg).unwrap());
    }

    #[test]
    fn scan_ingest_matches_basis_without_filter() {
        let p = SynthesisParams::default();
        let naa = &default_definitions()[0];
        let signals: Vec<_> = [AcquisitionKind::EditOff, AcquisitionKind::EditOn]
            .into_iter()
            .map(|k| (k, synthesize_fid(naa, k, 1.0, &p).unwrap()))
            .collect();
        let scan = Scan { name: "naa".into(), signals };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.mrsscan");
        scan.save(&path).unwrap();
        let back = Scan::load(&path).unwrap();
        assert_eq!(back, scan);
        let cfg = InputConfig { butterworth_cutoff: None, ..InputConfig::default() };
        let spectra = back.spectra(&cfg).unwrap();
        assert_eq!(spectra.len(), 3);
        let x = assemble_spectra(&spectra.iter().collect::<Vec<_>>(), &cfg).unwrap();
        let y = assemble_input(&mixture(&[("NAA", 1.0)]), &cfg).unwrap();
        let diff = (&x.data - &y.data).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-9, "{diff}");
    }
}
