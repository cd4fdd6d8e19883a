//! Parametric metabolite line models and basis-set construction.
//!
//! Each metabolite is a sum of Lorentzian lines. A line carries one sign per
//! MEGA-PRESS acquisition: `0` removes it (a resonance saturated by the
//! editing pulse), `-1` inverts it (outer lines of an edited multiplet).

use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::{self, ArchiveError, PayloadWriter};
use crate::signal::{
    self, difference_spectrum, AcquisitionKind, PpmAxis, PpmWindow, SignalError, Spectrum, TimeSignal,
    DEFAULT_CARRIER_PPM, DEFAULT_REFERENCE_MHZ,
};

pub const BASIS_MAGIC: &[u8; 8] = b"MRSBASIS";
pub const BASIS_VERSION: u32 = 1;

/// Bundled definitions for NAA, Cr, GABA, Glu and Gln.
pub const DEFAULT_DEFINITIONS: &str = include_str!("../data/default_basis.json");

#[derive(Debug, Error)]
pub enum BasisError {
    #[error("metabolite `{0}` has no non-zero edit-off signal")]
    EmptyModel(String),
    #[error("linewidth must be positive, got {0} Hz")]
    InvalidLinewidth(f64),
    #[error("no linewidths given")]
    NoLinewidths,
    #[error("duplicate metabolite `{0}`")]
    DuplicateMetabolite(String),
    #[error("synthesis needs at least 512 samples, got {0}")]
    TooFewSamples(usize),
    #[error("definition parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("metabolite `{metabolite}` line {index}: field `{field}` = {value}: {reason}")]
    InvalidField { metabolite: String, index: usize, field: &'static str, value: String, reason: &'static str },
    #[error("invalid basis set: {0}")]
    Invalid(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
}

pub type Result<T, E = BasisError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralLine {
    #[serde(rename = "ppm")]
    pub center_ppm: f64,
    #[serde(rename = "amplitude")]
    pub relative_amplitude: f64,
    #[serde(rename = "on_sign")]
    pub edit_on_sign: i8,
    #[serde(rename = "off_sign")]
    pub edit_off_sign: i8,
}

impl SpectralLine {
    pub fn sign(&self, acquisition: AcquisitionKind) -> f64 {
        match acquisition {
            AcquisitionKind::EditOff => self.edit_off_sign as f64,
            AcquisitionKind::EditOn => self.edit_on_sign as f64,
            AcquisitionKind::Difference => (self.edit_on_sign - self.edit_off_sign) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaboliteModel {
    pub name: String,
    pub lines: Vec<SpectralLine>,
}

impl MetaboliteModel {
    pub fn validate(&self) -> Result<()> {
        let bad = |index, field, value: String, reason| BasisError::InvalidField {
            metabolite: self.name.clone(),
            index,
            field,
            value,
            reason,
        };
        if self.lines.is_empty() {
            return Err(BasisError::EmptyModel(self.name.clone()));
        }
        for (i, line) in self.lines.iter().enumerate() {
            if !(0.0..=8.0).contains(&line.center_ppm) {
                return Err(bad(i, "ppm", line.center_ppm.to_string(), "must lie in [0, 8] ppm"));
            }
            if !line.relative_amplitude.is_finite() {
                return Err(bad(i, "amplitude", line.relative_amplitude.to_string(), "must be finite"));
            }
            if !(-1..=1).contains(&line.edit_on_sign) {
                return Err(bad(i, "on_sign", line.edit_on_sign.to_string(), "must be -1, 0 or 1"));
            }
            if !(-1..=1).contains(&line.edit_off_sign) {
                return Err(bad(i, "off_sign", line.edit_off_sign.to_string(), "must be -1, 0 or 1"));
            }
        }
        Ok(())
    }

    /// Copy with amplitudes scaled so the largest has magnitude 1.
    pub fn normalized(&self) -> MetaboliteModel {
        let max = self.lines.iter().map(|l| l.relative_amplitude.abs()).fold(0.0, f64::max);
        let mut out = self.clone();
        if max > 0.0 {
            for line in &mut out.lines {
                line.relative_amplitude /= max;
            }
        }
        out
    }
}

/// Parses a JSON list of `{name, lines: [{ppm, amplitude, on_sign, off_sign}]}`.
pub fn parse_definitions(text: &str) -> Result<Vec<MetaboliteModel>> {
    let models: Vec<MetaboliteModel> = serde_json::from_str(text).map_err(|e| BasisError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    for m in &models {
        m.validate()?;
    }
    check_unique(&models)?;
    Ok(models)
}

pub fn default_definitions() -> Vec<MetaboliteModel> {
    parse_definitions(DEFAULT_DEFINITIONS).expect("bundled definitions are valid")
}

fn check_unique(models: &[MetaboliteModel]) -> Result<()> {
    for (i, m) in models.iter().enumerate() {
        if models[..i].iter().any(|o| o.name == m.name) {
            return Err(BasisError::DuplicateMetabolite(m.name.clone()));
        }
    }
    Ok(())
}

/// Acquisition grid used when simulating FIDs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisParams {
    pub samples: usize,
    pub bandwidth_hz: f64,
    pub reference_frequency_mhz: f64,
    pub carrier_ppm: f64,
}

impl Default for SynthesisParams {
    fn default() -> Self {
        Self {
            samples: 8192,
            bandwidth_hz: 2000.0,
            reference_frequency_mhz: DEFAULT_REFERENCE_MHZ,
            carrier_ppm: DEFAULT_CARRIER_PPM,
        }
    }
}

impl SynthesisParams {
    /// Peak height of the DTFT of a unit-amplitude singlet with this
    /// linewidth, `|sum_n r^n|` with `r = exp(-pi L / BW)`.
    pub fn singlet_peak(&self, linewidth_hz: f64) -> f64 {
        let r = (-std::f64::consts::PI * linewidth_hz / self.bandwidth_hz).exp();
        (1.0 - r.powi(self.samples as i32)) / (1.0 - r)
    }
}

/// Edit-off, edit-on and difference spectra on a shared axis.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionSpectra {
    pub edit_off: Spectrum,
    pub edit_on: Spectrum,
    pub difference: Spectrum,
}

impl AcquisitionSpectra {
    pub fn get(&self, kind: AcquisitionKind) -> &Spectrum {
        match kind {
            AcquisitionKind::EditOff => &self.edit_off,
            AcquisitionKind::EditOn => &self.edit_on,
            AcquisitionKind::Difference => &self.difference,
        }
    }
}

/// Time-domain FID of one acquisition of `model`, before any normalisation.
pub fn synthesize_fid(
    model: &MetaboliteModel,
    acquisition: AcquisitionKind,
    linewidth_hz: f64,
    params: &SynthesisParams,
) -> Result<TimeSignal> {
    if !(linewidth_hz > 0.0 && linewidth_hz.is_finite()) {
        return Err(BasisError::InvalidLinewidth(linewidth_hz));
    }
    if params.samples < 512 {
        return Err(BasisError::TooFewSamples(params.samples));
    }
    let dt = 1.0 / params.bandwidth_hz;
    let decay = -std::f64::consts::PI * linewidth_hz;
    let mut samples = vec![Complex64::new(0.0, 0.0); params.samples];
    for line in &model.lines {
        let amp = line.relative_amplitude * line.sign(acquisition);
        if amp == 0.0 {
            continue;
        }
        let f_hz = (params.carrier_ppm - line.center_ppm) * params.reference_frequency_mhz;
        for (n, s) in samples.iter_mut().enumerate() {
            let t = n as f64 * dt;
            *s += Complex64::from_polar(amp * (decay * t).exp(), 2.0 * std::f64::consts::PI * f_hz * t);
        }
    }
    Ok(TimeSignal::new(samples, params.bandwidth_hz, params.reference_frequency_mhz)?
        .with_carrier_ppm(params.carrier_ppm))
}

fn windowed(t: &TimeSignal, kind: AcquisitionKind, window: &PpmWindow) -> Result<Spectrum> {
    let full = signal::fft_to_spectrum(t, kind)?;
    Ok(signal::resample_to_window(&full, window, t)?)
}

/// Window spectra of `model` scaled so the edit-off magnitude peak is 1.
pub fn synthesize_metabolite(
    model: &MetaboliteModel,
    linewidth_hz: f64,
    window: &PpmWindow,
    params: &SynthesisParams,
) -> Result<AcquisitionSpectra> {
    model.validate()?;
    let off = windowed(&synthesize_fid(model, AcquisitionKind::EditOff, linewidth_hz, params)?, AcquisitionKind::EditOff, window)?;
    let on = windowed(&synthesize_fid(model, AcquisitionKind::EditOn, linewidth_hz, params)?, AcquisitionKind::EditOn, window)?;
    let peak = off.values().iter().map(|v| v.norm()).fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(BasisError::EmptyModel(model.name.clone()));
    }
    let edit_off = off.scaled(1.0 / peak);
    let edit_on = on.scaled(1.0 / peak);
    let difference = difference_spectrum(&edit_on, &edit_off)?;
    Ok(AcquisitionSpectra { edit_off, edit_on, difference })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisEntry {
    pub name: String,
    pub spectra: AcquisitionSpectra,
}

/// Normalised reference spectra for a set of metabolites at one linewidth.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    pub entries: Vec<BasisEntry>,
    pub linewidth_hz: f64,
    pub window: PpmWindow,
    pub source_tag: String,
    pub synthesis: SynthesisParams,
}

impl BasisSet {
    pub fn metabolites(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, name: &str) -> Option<&BasisEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn spectrum(&self, name: &str, kind: AcquisitionKind) -> Option<&Spectrum> {
        self.entry(name).map(|e| e.spectra.get(kind))
    }

    pub fn axis(&self) -> PpmAxis {
        self.window.axis()
    }

    /// Factor converting time-domain units (a unit-peak singlet has FID
    /// amplitude 1 at t = 0) into the normalised frequency-domain scale.
    pub fn noise_gain(&self) -> f64 {
        1.0 / self.synthesis.singlet_peak(self.linewidth_hz)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (header, payload) = self.encode_parts();
        archive::write_file(path, BASIS_MAGIC, BASIS_VERSION, &header, &payload)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (header, payload) = self.encode_parts();
        archive::encode(BASIS_MAGIC, BASIS_VERSION, &header, &payload)
    }

    fn encode_parts(&self) -> (BasisHeader, Vec<u8>) {
        let header = BasisHeader {
            source_tag: self.source_tag.clone(),
            linewidth_hz: self.linewidth_hz,
            window: self.window,
            synthesis: self.synthesis,
            axis: self.axis(),
            metabolites: self.metabolites(),
            acquisitions: AcquisitionKind::ALL.to_vec(),
        };
        let mut w = PayloadWriter::with_capacity(self.entries.len() * 3 * 2 * self.window.bins);
        for e in &self.entries {
            for kind in AcquisitionKind::ALL {
                w.complex(e.spectra.get(kind).values());
            }
        }
        (header, w.into_bytes())
    }

    pub fn load(path: &Path) -> Result<BasisSet> {
        let bytes = std::fs::read(path).map_err(ArchiveError::from)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<BasisSet> {
        let (header, mut payload): (BasisHeader, _) = archive::decode(bytes, BASIS_MAGIC, BASIS_VERSION)?;
        header.window.validate()?;
        let axis = header.axis;
        if axis.len != header.window.bins {
            return Err(ArchiveError::format(payload.offset(), "axis length differs from window bins").into());
        }
        let mut entries = Vec::with_capacity(header.metabolites.len());
        for name in &header.metabolites {
            let mut by_kind = Vec::with_capacity(header.acquisitions.len());
            for &kind in &header.acquisitions {
                let values = payload.complex(axis.len)?;
                by_kind.push((kind, Spectrum::new(values, axis, kind)?));
            }
            let take = |k: AcquisitionKind| {
                by_kind
                    .iter()
                    .find(|(kind, _)| *kind == k)
                    .map(|(_, s)| s.clone())
                    .ok_or_else(|| BasisError::Invalid(format!("`{name}` lacks the {k} spectrum")))
            };
            entries.push(BasisEntry {
                name: name.clone(),
                spectra: AcquisitionSpectra {
                    edit_off: take(AcquisitionKind::EditOff)?,
                    edit_on: take(AcquisitionKind::EditOn)?,
                    difference: take(AcquisitionKind::Difference)?,
                },
            });
        }
        payload.finish()?;
        Ok(BasisSet {
            entries,
            linewidth_hz: header.linewidth_hz,
            window: header.window,
            source_tag: header.source_tag,
            synthesis: header.synthesis,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BasisHeader {
    source_tag: String,
    linewidth_hz: f64,
    window: PpmWindow,
    synthesis: SynthesisParams,
    axis: PpmAxis,
    metabolites: Vec<String>,
    acquisitions: Vec<AcquisitionKind>,
}

pub const PARAMETRIC_TAG: &str = "parametric-v1";

/// One basis set per linewidth, sharing a single ppm axis.
pub fn build_basis(models: &[MetaboliteModel], linewidths_hz: &[f64], window: &PpmWindow) -> Result<Vec<BasisSet>> {
    build_basis_with(models, linewidths_hz, window, &SynthesisParams::default())
}

pub fn build_basis_with(
    models: &[MetaboliteModel],
    linewidths_hz: &[f64],
    window: &PpmWindow,
    params: &SynthesisParams,
) -> Result<Vec<BasisSet>> {
    if linewidths_hz.is_empty() {
        return Err(BasisError::NoLinewidths);
    }
    if let Some(&bad) = linewidths_hz.iter().find(|&&l| !(l > 0.0 && l.is_finite())) {
        return Err(BasisError::InvalidLinewidth(bad));
    }
    check_unique(models)?;
    linewidths_hz
        .iter()
        .map(|&lw| {
            let entries = models
                .iter()
                .map(|m| {
                    Ok(BasisEntry { name: m.name.clone(), spectra: synthesize_metabolite(m, lw, window, params)? })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(BasisSet {
                entries,
                linewidth_hz: lw,
                window: *window,
                source_tag: PARAMETRIC_TAG.to_string(),
                synthesis: *params,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn singlet(name: &str, ppm: f64, on: i8, off: i8) -> MetaboliteModel {
        MetaboliteModel {
            name: name.into(),
            lines: vec![SpectralLine { center_ppm: ppm, relative_amplitude: 1.0, edit_on_sign: on, edit_off_sign: off }],
        }
    }

    fn peak_bin(s: &Spectrum) -> usize {
        (0..s.len()).max_by(|&a, &b| s.values()[a].norm().total_cmp(&s.values()[b].norm())).unwrap()
    }

    #[test]
    fn naa_like_singlet_absent_from_edit_on() {
        let w = PpmWindow::default();
        let s = synthesize_metabolite(&singlet("NAA", 2.0, 0, 1), 1.0, &w, &SynthesisParams::default()).unwrap();
        let bin = w.axis().nearest_bin(2.0).unwrap();
        assert!(s.edit_on.values()[bin].norm() < 1e-12);
        assert!((w.axis().ppm(peak_bin(&s.edit_off)) - 2.0).abs() <= w.step_ppm());
    }

    #[test]
    fn cr_like_singlet_cancels_in_difference() {
        let w = PpmWindow::default();
        let s = synthesize_metabolite(&singlet("Cr", 3.0, 1, 1), 1.0, &w, &SynthesisParams::default()).unwrap();
        assert!(s.difference.values().iter().all(|v| v.norm() < 1e-12));
    }

    /// Width at half maximum by linear interpolation around the peak.
    fn fwhm(values: &[f64], step: f64) -> f64 {
        let peak = (0..values.len()).max_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap();
        let half = values[peak] / 2.0;
        let mut left = peak;
        while values[left] > half {
            left -= 1;
        }
        let mut right = peak;
        while values[right] > half {
            right += 1;
        }
        let l = left as f64 + (half - values[left]) / (values[left + 1] - values[left]);
        let r = right as f64 - (half - values[right]) / (values[right - 1] - values[right]);
        (r - l) * step
    }

    #[test]
    fn one_hertz_singlet_has_one_hertz_fwhm() {
        let params = SynthesisParams::default();
        // 0.1 ppm over 4096 bins: 0.0031 Hz per bin.
        let w = PpmWindow::new(2.05, 1.95, 4096).unwrap();
        let s = synthesize_metabolite(&singlet("s", 2.0, 1, 1), 1.0, &w, &params).unwrap();
        let step_hz = w.step_ppm() * params.reference_frequency_mhz;
        let real: Vec<f64> = s.edit_off.values().iter().map(|v| v.re).collect();
        let width = fwhm(&real, step_hz);
        assert!((0.9..=1.1).contains(&width), "absorption FWHM {width} Hz");
        // The magnitude of a complex Lorentzian is sqrt(3) wider.
        let mag: Vec<f64> = s.edit_off.values().iter().map(|v| v.norm()).collect();
        let width = fwhm(&mag, step_hz);
        assert!((width - 3f64.sqrt()).abs() < 0.02, "magnitude FWHM {width} Hz");
    }

    #[test]
    fn normalisation_and_difference_consistency() {
        let basis = build_basis(&default_definitions(), &[1.0], &PpmWindow::default()).unwrap();
        assert_eq!(basis.len(), 1);
        let b = &basis[0];
        assert_eq!(b.len(), 5);
        for e in &b.entries {
            let peak = e.spectra.edit_off.values().iter().map(|v| v.norm()).fold(0.0, f64::max);
            assert!((peak - 1.0).abs() < 1e-12, "{}", e.name);
            for ((d, on), off) in
                e.spectra.difference.values().iter().zip(e.spectra.edit_on.values()).zip(e.spectra.edit_off.values())
            {
                assert!((d - (on - off)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn amplitude_scale_cancels() {
        let w = PpmWindow::default();
        let p = SynthesisParams::default();
        let model = &default_definitions()[2];
        let mut scaled = model.clone();
        for l in &mut scaled.lines {
            l.relative_amplitude *= 7.5;
        }
        let a = synthesize_metabolite(model, 1.0, &w, &p).unwrap();
        let b = synthesize_metabolite(&scaled, 1.0, &w, &p).unwrap();
        for kind in AcquisitionKind::ALL {
            for (x, y) in a.get(kind).values().iter().zip(b.get(kind).values()) {
                assert!((x - y).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn wider_lines_have_lower_raw_peaks() {
        let p = SynthesisParams::default();
        let w = PpmWindow::default();
        let model = singlet("s", 3.0, 1, 1);
        let peaks: Vec<f64> = [0.75, 1.0, 1.25]
            .iter()
            .map(|&lw| {
                let t = synthesize_fid(&model, AcquisitionKind::EditOff, lw, &p).unwrap();
                let s = windowed(&t, AcquisitionKind::EditOff, &w).unwrap();
                s.values().iter().map(|v| v.norm()).fold(0.0, f64::max)
            })
            .collect();
        assert!(peaks[0] > peaks[1] && peaks[1] > peaks[2], "{peaks:?}");
        assert!((peaks[1] - p.singlet_peak(1.0)).abs() / peaks[1] < 1e-3);
    }

    #[test]
    fn three_linewidths_share_axis() {
        let sets = build_basis(&default_definitions(), &[0.75, 1.0, 1.25], &PpmWindow::default()).unwrap();
        assert_eq!(sets.len(), 3);
        assert!(sets.iter().all(|s| s.axis() == sets[0].axis()));
        assert!(sets.iter().all(|s| s.entries.iter().all(|e| e.spectra.edit_off.axis() == &sets[0].axis())));
    }

    #[test]
    fn precondition_errors() {
        let w = PpmWindow::default();
        assert!(matches!(build_basis(&default_definitions(), &[], &w), Err(BasisError::NoLinewidths)));
        assert!(matches!(
            build_basis(&default_definitions(), &[0.0], &w),
            Err(BasisError::InvalidLinewidth(_))
        ));
        let mut dup = default_definitions();
        dup.push(dup[0].clone());
        assert!(matches!(build_basis(&dup, &[1.0], &w), Err(BasisError::DuplicateMetabolite(n)) if n == "NAA"));
        let mut empty = singlet("z", 3.0, 1, 1);
        empty.lines[0].relative_amplitude = 0.0;
        assert!(matches!(
            synthesize_metabolite(&empty, 1.0, &w, &SynthesisParams::default()),
            Err(BasisError::EmptyModel(_))
        ));
    }

    #[test]
    fn bad_ppm_names_field() {
        let text = r#"[{"name": "X", "lines": [{"ppm": 9.5, "amplitude": 1.0, "on_sign": 1, "off_sign": 1}]}]"#;
        let err = parse_definitions(text).unwrap_err();
        assert!(matches!(err, BasisError::InvalidField { field: "ppm", .. }));
        assert!(err.to_string().contains("ppm"));
        let err = parse_definitions("[{\"name\": \"X\",\n \"lines\": [}]").unwrap_err();
        assert!(matches!(err, BasisError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn archive_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.mrsbasis");
        let mut basis = build_basis(&default_definitions(), &[1.0], &PpmWindow::default()).unwrap().remove(0);
        basis.entries[0].name = "Lactate (imported)".into();
        basis.save(&path).unwrap();
        let loaded = BasisSet::load(&path).unwrap();
        assert_eq!(loaded, basis);

        let bytes = std::fs::read(&path).unwrap();
        let truncated = &bytes[..bytes.len() / 2];
        assert!(matches!(
            BasisSet::from_bytes(truncated),
            Err(BasisError::Archive(ArchiveError::Format { .. }))
        ));
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(matches!(
            BasisSet::from_bytes(&wrong_version),
            Err(BasisError::Archive(ArchiveError::Version { found: 9, .. }))
        ));
    }
}
