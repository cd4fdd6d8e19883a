//! Spectral data types and the time/frequency transforms shared by every
//! other module.
//!
//! Frequency axes run in descending ppm, left to right. A time-domain
//! component oscillating at `f` Hz lands at `carrier_ppm - f / reference_mhz`.

pub mod fft;

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use self::fft::{Radix2, ZoomDft};

/// Spectrometer frequency of 1H at 3 T.
pub const DEFAULT_REFERENCE_MHZ: f64 = 127.0;
/// Water resonance, used as the 0 Hz position of the receiver.
pub const DEFAULT_CARRIER_PPM: f64 = 4.7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("invalid signal: {0}")]
    InvalidSignal(String),
    #[error("ppm axes do not match")]
    AxisMismatch,
    #[error("window [{high_ppm}, {low_ppm}] ppm lies outside the acquired bandwidth")]
    WindowOutOfRange { high_ppm: f64, low_ppm: f64 },
    #[error("invalid window: {0}")]
    InvalidWindow(String),
}

pub type Result<T, E = SignalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcquisitionKind {
    EditOff,
    EditOn,
    Difference,
}

impl AcquisitionKind {
    pub const ALL: [AcquisitionKind; 3] =
        [AcquisitionKind::EditOff, AcquisitionKind::EditOn, AcquisitionKind::Difference];

    pub fn short_name(self) -> &'static str {
        match self {
            AcquisitionKind::EditOff => "off",
            AcquisitionKind::EditOn => "on",
            AcquisitionKind::Difference => "diff",
        }
    }
}

impl fmt::Display for AcquisitionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for AcquisitionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "off" | "edit-off" | "edit_off" | "editoff" => Ok(AcquisitionKind::EditOff),
            "on" | "edit-on" | "edit_on" | "editon" => Ok(AcquisitionKind::EditOn),
            "diff" | "difference" => Ok(AcquisitionKind::Difference),
            other => Err(format!("unknown acquisition `{other}` (expected off, on or diff)")),
        }
    }
}

/// Which real-valued view of a complex spectrum to feed downstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Real,
    Imaginary,
    Magnitude,
}

impl Component {
    pub fn short_name(self) -> &'static str {
        match self {
            Component::Real => "r",
            Component::Imaginary => "i",
            Component::Magnitude => "m",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Component {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "r" | "real" | "re" => Ok(Component::Real),
            "i" | "imag" | "imaginary" | "im" => Ok(Component::Imaginary),
            "m" | "mag" | "magnitude" | "abs" => Ok(Component::Magnitude),
            other => Err(format!("unknown component `{other}` (expected r, i or m)")),
        }
    }
}

/// Complex free-induction decay sampled uniformly at `bandwidth_hz`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSignal {
    samples: Vec<Complex64>,
    bandwidth_hz: f64,
    reference_frequency_mhz: f64,
    carrier_ppm: f64,
}

impl TimeSignal {
    pub fn new(samples: Vec<Complex64>, bandwidth_hz: f64, reference_frequency_mhz: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(SignalError::InvalidSignal("no samples".into()));
        }
        if !(bandwidth_hz > 0.0 && bandwidth_hz.is_finite()) {
            return Err(SignalError::InvalidSignal(format!("bandwidth {bandwidth_hz} Hz")));
        }
        if !(reference_frequency_mhz > 0.0 && reference_frequency_mhz.is_finite()) {
            return Err(SignalError::InvalidSignal(format!(
                "reference frequency {reference_frequency_mhz} MHz"
            )));
        }
        Ok(Self { samples, bandwidth_hz, reference_frequency_mhz, carrier_ppm: DEFAULT_CARRIER_PPM })
    }

    pub fn with_carrier_ppm(mut self, carrier_ppm: f64) -> Self {
        self.carrier_ppm = carrier_ppm;
        self
    }

    pub fn samples(&self) -> &[Complex64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Complex64> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn bandwidth_hz(&self) -> f64 {
        self.bandwidth_hz
    }

    pub fn reference_frequency_mhz(&self) -> f64 {
        self.reference_frequency_mhz
    }

    pub fn carrier_ppm(&self) -> f64 {
        self.carrier_ppm
    }

    /// Same acquisition parameters, new samples.
    pub fn with_samples(&self, samples: Vec<Complex64>) -> Result<Self> {
        Ok(TimeSignal::new(samples, self.bandwidth_hz, self.reference_frequency_mhz)?
            .with_carrier_ppm(self.carrier_ppm))
    }
}

/// Uniform, strictly descending ppm axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpmAxis {
    /// ppm of the first (left-most) bin.
    pub start_ppm: f64,
    /// Positive bin spacing; bin `i` sits at `start_ppm - i * step_ppm`.
    pub step_ppm: f64,
    pub len: usize,
}

impl PpmAxis {
    pub fn new(start_ppm: f64, step_ppm: f64, len: usize) -> Result<Self> {
        if !(step_ppm > 0.0 && step_ppm.is_finite() && start_ppm.is_finite()) || len == 0 {
            return Err(SignalError::InvalidSignal(format!(
                "axis start={start_ppm} step={step_ppm} len={len}"
            )));
        }
        Ok(Self { start_ppm, step_ppm, len })
    }

    pub fn ppm(&self, i: usize) -> f64 {
        self.start_ppm - i as f64 * self.step_ppm
    }

    pub fn to_vec(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.ppm(i)).collect()
    }

    /// Fractional bin position of `ppm`.
    pub fn position(&self, ppm: f64) -> f64 {
        (self.start_ppm - ppm) / self.step_ppm
    }

    /// Nearest bin to `ppm`, if it falls on the axis.
    pub fn nearest_bin(&self, ppm: f64) -> Option<usize> {
        let p = self.position(ppm).round();
        (p >= 0.0 && (p as usize) < self.len).then_some(p as usize)
    }

    /// Half-open bin range whose centres lie in `[low_ppm, high_ppm]`.
    pub fn bins_within(&self, low_ppm: f64, high_ppm: f64) -> std::ops::Range<usize> {
        let first = self.position(high_ppm).ceil().max(0.0) as usize;
        let last = (self.position(low_ppm).floor() + 1.0).clamp(0.0, self.len as f64) as usize;
        first.min(last)..last
    }

    pub fn same_as(&self, other: &PpmAxis) -> bool {
        self.len == other.len
            && (self.step_ppm - other.step_ppm).abs() <= 1e-12 * self.step_ppm
            && (self.start_ppm - other.start_ppm).abs() <= 1e-9 * self.step_ppm
    }
}

/// The ppm range fed to the network, tiled by `bins` equal bins.
///
/// The first bin sits exactly at `high_ppm`; the last at `low_ppm + step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpmWindow {
    pub high_ppm: f64,
    pub low_ppm: f64,
    pub bins: usize,
}

impl Default for PpmWindow {
    fn default() -> Self {
        Self { high_ppm: 4.5, low_ppm: 1.5, bins: 2048 }
    }
}

impl PpmWindow {
    pub fn new(high_ppm: f64, low_ppm: f64, bins: usize) -> Result<Self> {
        let w = Self { high_ppm, low_ppm, bins };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.high_ppm > self.low_ppm) || self.bins == 0 || !self.high_ppm.is_finite() || !self.low_ppm.is_finite()
        {
            return Err(SignalError::InvalidWindow(format!(
                "high={} low={} bins={}",
                self.high_ppm, self.low_ppm, self.bins
            )));
        }
        Ok(())
    }

    pub fn step_ppm(&self) -> f64 {
        (self.high_ppm - self.low_ppm) / self.bins as f64
    }

    pub fn axis(&self) -> PpmAxis {
        PpmAxis { start_ppm: self.high_ppm, step_ppm: self.step_ppm(), len: self.bins }
    }
}

/// One acquisition's frequency-domain signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    values: Vec<Complex64>,
    axis: PpmAxis,
    acquisition: AcquisitionKind,
}

impl Spectrum {
    pub fn new(values: Vec<Complex64>, axis: PpmAxis, acquisition: AcquisitionKind) -> Result<Self> {
        if values.len() != axis.len {
            return Err(SignalError::InvalidSignal(format!(
                "{} values for an axis of {} bins",
                values.len(),
                axis.len
            )));
        }
        Ok(Self { values, axis, acquisition })
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }

    pub fn axis(&self) -> &PpmAxis {
        &self.axis
    }

    pub fn ppm_axis(&self) -> Vec<f64> {
        self.axis.to_vec()
    }

    pub fn acquisition(&self) -> AcquisitionKind {
        self.acquisition
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn with_acquisition(mut self, acquisition: AcquisitionKind) -> Self {
        self.acquisition = acquisition;
        self
    }

    pub fn scaled(&self, factor: f64) -> Spectrum {
        Spectrum {
            values: self.values.iter().map(|v| v * factor).collect(),
            axis: self.axis,
            acquisition: self.acquisition,
        }
    }

    /// Circular shift: value at bin `i` moves to bin `i + shift (mod n)`.
    pub fn rotated(&self, shift: isize) -> Spectrum {
        let mut values = self.values.clone();
        let n = values.len() as isize;
        let k = shift.rem_euclid(n) as usize;
        values.rotate_right(k);
        Spectrum { values, axis: self.axis, acquisition: self.acquisition }
    }
}

pub fn ppm_to_hz(shift_ppm: f64, reference_frequency_mhz: f64) -> f64 {
    shift_ppm * reference_frequency_mhz
}

/// Full-bandwidth spectrum of `t`, DC at `carrier_ppm`.
pub fn fft_to_spectrum(t: &TimeSignal, acquisition: AcquisitionKind) -> Result<Spectrum> {
    let n = t.len();
    if n < 2 {
        return Err(SignalError::InvalidSignal(format!("{n} samples; at least 2 required")));
    }
    let mut values = fft::fft(t.samples());
    // Bring the most negative frequency to index 0 so ppm descends.
    values.rotate_right(n / 2);
    let step_hz = t.bandwidth_hz() / n as f64;
    let step_ppm = step_hz / t.reference_frequency_mhz();
    let start_ppm = t.carrier_ppm() + (n / 2) as f64 * step_ppm;
    Spectrum::new(values, PpmAxis::new(start_ppm, step_ppm, n)?, acquisition)
}

/// Inverse of [`fft_to_spectrum`] for a full-bandwidth spectrum.
pub fn spectrum_to_signal(s: &Spectrum, reference_frequency_mhz: f64) -> Result<TimeSignal> {
    let n = s.len();
    if n < 2 {
        return Err(SignalError::InvalidSignal(format!("{n} bins; at least 2 required")));
    }
    let mut values = s.values().to_vec();
    values.rotate_left(n / 2);
    let axis = s.axis();
    let bandwidth_hz = axis.step_ppm * reference_frequency_mhz * n as f64;
    let carrier_ppm = axis.start_ppm - (n / 2) as f64 * axis.step_ppm;
    Ok(TimeSignal::new(fft::ifft(&values), bandwidth_hz, reference_frequency_mhz)?.with_carrier_ppm(carrier_ppm))
}

/// Reusable transform from an `n`-sample FID straight onto a window's bins.
///
/// Evaluating the DTFT of the FID on the window grid is equivalent to
/// zero-filling the FID until the native bin spacing equals the window's
/// and then trimming to the window.
#[derive(Debug, Clone)]
pub struct WindowTransform {
    zoom: ZoomDft,
    axis: PpmAxis,
}

impl WindowTransform {
    pub fn new(
        n: usize,
        bandwidth_hz: f64,
        reference_frequency_mhz: f64,
        carrier_ppm: f64,
        window: &PpmWindow,
    ) -> Result<Self> {
        window.validate()?;
        if n < 2 {
            return Err(SignalError::InvalidSignal(format!("{n} samples; at least 2 required")));
        }
        let axis = window.axis();
        let nyquist = bandwidth_hz / 2.0;
        let f_first = (carrier_ppm - axis.ppm(0)) * reference_frequency_mhz;
        let f_last = (carrier_ppm - axis.ppm(axis.len - 1)) * reference_frequency_mhz;
        if f_first.abs() > nyquist || f_last.abs() > nyquist {
            return Err(SignalError::WindowOutOfRange { high_ppm: window.high_ppm, low_ppm: window.low_ppm });
        }
        let f0 = f_first / bandwidth_hz;
        let df = axis.step_ppm * reference_frequency_mhz / bandwidth_hz;
        Ok(Self { zoom: ZoomDft::new(n, axis.len, f0, df), axis })
    }

    pub fn for_signal(t: &TimeSignal, window: &PpmWindow) -> Result<Self> {
        Self::new(t.len(), t.bandwidth_hz(), t.reference_frequency_mhz(), t.carrier_ppm(), window)
    }

    pub fn axis(&self) -> &PpmAxis {
        &self.axis
    }

    pub fn input_len(&self) -> usize {
        self.zoom.input_len()
    }

    pub fn apply(&self, samples: &[Complex64]) -> Vec<Complex64> {
        self.zoom.apply(samples)
    }

    pub fn spectrum(&self, samples: &[Complex64], acquisition: AcquisitionKind) -> Spectrum {
        Spectrum { values: self.apply(samples), axis: self.axis, acquisition }
    }
}

/// Puts `s` onto the window grid, using `original_time` for the zero-filled
/// transform. A spectrum already on the grid is returned unchanged.
pub fn resample_to_window(s: &Spectrum, w: &PpmWindow, original_time: &TimeSignal) -> Result<Spectrum> {
    w.validate()?;
    if s.axis().same_as(&w.axis()) {
        return Ok(s.clone());
    }
    let transform = WindowTransform::for_signal(original_time, w)?;
    Ok(transform.spectrum(original_time.samples(), s.acquisition()))
}

pub fn difference_spectrum(on: &Spectrum, off: &Spectrum) -> Result<Spectrum> {
    if on.len() != off.len() || !on.axis().same_as(off.axis()) {
        return Err(SignalError::AxisMismatch);
    }
    let values = on.values().iter().zip(off.values()).map(|(a, b)| a - b).collect();
    Ok(Spectrum { values, axis: *on.axis(), acquisition: AcquisitionKind::Difference })
}

pub fn extract_component(s: &Spectrum, kind: Component) -> Vec<f64> {
    component_of(s.values(), kind)
}

pub(crate) fn component_of(values: &[Complex64], kind: Component) -> Vec<f64> {
    match kind {
        Component::Real => values.iter().map(|v| v.re).collect(),
        Component::Imaginary => values.iter().map(|v| v.im).collect(),
        Component::Magnitude => values.iter().map(|v| v.norm()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn tone(n: usize, bandwidth: f64, f_hz: f64, lw: f64) -> TimeSignal {
        let samples = (0..n)
            .map(|j| {
                let t = j as f64 / bandwidth;
                Complex64::from_polar((-PI * lw * t).exp(), 2.0 * PI * f_hz * t)
            })
            .collect();
        TimeSignal::new(samples, bandwidth, DEFAULT_REFERENCE_MHZ).unwrap()
    }

    #[test]
    fn ppm_to_hz_examples() {
        assert_eq!(ppm_to_hz(1.0, 127.0), 127.0);
        assert_eq!(ppm_to_hz(0.0, 127.0), 0.0);
        assert_eq!(ppm_to_hz(2.0, 127.0), 254.0);
    }

    #[test]
    fn empty_signal_rejected() {
        assert!(matches!(TimeSignal::new(vec![], 2000.0, 127.0), Err(SignalError::InvalidSignal(_))));
        let one = TimeSignal::new(vec![Complex64::new(1.0, 0.0)], 2000.0, 127.0).unwrap();
        assert!(fft_to_spectrum(&one, AcquisitionKind::EditOff).is_err());
    }

    #[test]
    fn spectrum_axis_descends_and_places_tone() {
        // 3.0 ppm sits 1.7 ppm below the water carrier.
        let f = (DEFAULT_CARRIER_PPM - 3.0) * DEFAULT_REFERENCE_MHZ;
        let s = fft_to_spectrum(&tone(4096, 2000.0, f, 1.0), AcquisitionKind::EditOff).unwrap();
        let axis = s.ppm_axis();
        assert!(axis.windows(2).all(|w| w[0] > w[1]));
        let peak = (0..s.len()).max_by(|&a, &b| s.values()[a].norm().total_cmp(&s.values()[b].norm())).unwrap();
        assert!((axis[peak] - 3.0).abs() < s.axis().step_ppm);
    }

    #[test]
    fn full_spectrum_round_trip() {
        let t = tone(1000, 1250.0, 300.0, 2.0);
        let s = fft_to_spectrum(&t, AcquisitionKind::EditOn).unwrap();
        let back = spectrum_to_signal(&s, DEFAULT_REFERENCE_MHZ).unwrap();
        assert!((back.bandwidth_hz() - 1250.0).abs() < 1e-9);
        assert!((back.carrier_ppm() - DEFAULT_CARRIER_PPM).abs() < 1e-12);
        let err = back.samples().iter().zip(t.samples()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-10);
    }

    #[test]
    fn default_window_bin_width() {
        let w = PpmWindow::default();
        assert_eq!(w.bins, 2048);
        assert!((w.step_ppm() - 3.0 / 2048.0).abs() < 1e-15);
        assert!((w.step_ppm() - 0.00146).abs() < 1e-5);
    }

    #[test]
    fn bandwidths_share_window_grid() {
        let f = (DEFAULT_CARRIER_PPM - 2.0) * DEFAULT_REFERENCE_MHZ;
        let w = PpmWindow::default();
        let a = tone(4096, 2000.0, f, 1.0);
        let b = tone(2560, 1250.0, f, 1.0);
        let sa = resample_to_window(&fft_to_spectrum(&a, AcquisitionKind::EditOff).unwrap(), &w, &a).unwrap();
        let sb = resample_to_window(&fft_to_spectrum(&b, AcquisitionKind::EditOff).unwrap(), &w, &b).unwrap();
        assert_eq!(sa.len(), 2048);
        assert_eq!(sb.len(), 2048);
        let max_dev = sa.ppm_axis().iter().zip(sb.ppm_axis()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(max_dev < w.step_ppm());
        let peak = |s: &Spectrum| {
            (0..s.len()).max_by(|&i, &j| s.values()[i].norm().total_cmp(&s.values()[j].norm())).unwrap()
        };
        assert!((peak(&sa) as isize - peak(&sb) as isize).abs() <= 1);
    }

    #[test]
    fn window_transform_matches_zero_filled_fft() {
        // Window bins coincide with the bins of an 8192-point zero-filled FFT.
        let bandwidth = 1024.0;
        let n_fill = 8192;
        let step_hz = bandwidth / n_fill as f64;
        let step_ppm = step_hz / DEFAULT_REFERENCE_MHZ;
        let high = DEFAULT_CARRIER_PPM - 100.0 * step_ppm;
        let w = PpmWindow::new(high, high - 512.0 * step_ppm, 512).unwrap();
        let t = tone(2000, bandwidth, 150.0, 3.0);
        let windowed = resample_to_window(&fft_to_spectrum(&t, AcquisitionKind::EditOff).unwrap(), &w, &t).unwrap();
        let mut filled = t.samples().to_vec();
        filled.resize(n_fill, Complex64::new(0.0, 0.0));
        let full = fft_to_spectrum(&t.with_samples(filled).unwrap(), AcquisitionKind::EditOff).unwrap();
        let offset = full.axis().nearest_bin(high).unwrap();
        for i in 0..w.bins {
            assert!((windowed.values()[i] - full.values()[offset + i]).norm() < 1e-9);
        }
    }

    #[test]
    fn resample_is_noop_on_grid() {
        let t = tone(4096, 2000.0, 300.0, 1.0);
        let w = PpmWindow::default();
        let s = resample_to_window(&fft_to_spectrum(&t, AcquisitionKind::EditOff).unwrap(), &w, &t).unwrap();
        let again = resample_to_window(&s, &w, &t).unwrap();
        for (a, b) in s.values().iter().zip(again.values()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn window_outside_bandwidth() {
        let t = tone(512, 200.0, 10.0, 1.0);
        let s = fft_to_spectrum(&t, AcquisitionKind::EditOff).unwrap();
        assert!(matches!(
            resample_to_window(&s, &PpmWindow::default(), &t),
            Err(SignalError::WindowOutOfRange { .. })
        ));
    }

    fn singlet(values_at: usize, amp: f64, axis: PpmAxis, kind: AcquisitionKind) -> Spectrum {
        let mut v = vec![Complex64::new(0.0, 0.0); axis.len];
        v[values_at] = Complex64::new(amp, 0.0);
        Spectrum::new(v, axis, kind).unwrap()
    }

    #[test]
    fn difference_examples() {
        let axis = PpmWindow::default().axis();
        let cr = axis.nearest_bin(3.0).unwrap();
        let on = singlet(cr, 1.0, axis, AcquisitionKind::EditOn);
        let off = singlet(cr, 1.0, axis, AcquisitionKind::EditOff);
        let d = difference_spectrum(&on, &off).unwrap();
        assert_eq!(d.acquisition(), AcquisitionKind::Difference);
        assert!(d.values().iter().all(|v| v.norm() == 0.0));

        // Outer GABA line inverted between acquisitions doubles in the difference.
        let outer = axis.nearest_bin(3.06).unwrap();
        let on = singlet(outer, 0.5, axis, AcquisitionKind::EditOn);
        let off = singlet(outer, -0.5, axis, AcquisitionKind::EditOff);
        let d = difference_spectrum(&on, &off).unwrap();
        assert_eq!(d.values()[outer].re, 2.0 * on.values()[outer].re);
    }

    #[test]
    fn difference_rejects_mismatched_axes() {
        let a = singlet(0, 1.0, PpmWindow::default().axis(), AcquisitionKind::EditOn);
        let b = singlet(0, 1.0, PpmWindow::new(4.0, 1.0, 2048).unwrap().axis(), AcquisitionKind::EditOff);
        assert_eq!(difference_spectrum(&a, &b), Err(SignalError::AxisMismatch));
    }

    #[test]
    fn component_examples() {
        let s = Spectrum::new(
            vec![Complex64::new(3.0, 4.0)],
            PpmAxis::new(3.0, 0.1, 1).unwrap(),
            AcquisitionKind::EditOff,
        )
        .unwrap();
        assert_eq!(extract_component(&s, Component::Magnitude), vec![5.0]);
        assert_eq!(extract_component(&s, Component::Real), vec![3.0]);
        assert_eq!(extract_component(&s, Component::Imaginary), vec![4.0]);
    }

    fn complex_vec(len: usize) -> impl Strategy<Value = Vec<Complex64>> {
        prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0).prop_map(|(a, b)| Complex64::new(a, b)), len)
    }

    proptest! {
        #[test]
        fn parseval(x in complex_vec(64)) {
            let xf = fft::fft(&x);
            let time: f64 = x.iter().map(|v| v.norm_sqr()).sum();
            let freq: f64 = xf.iter().map(|v| v.norm_sqr()).sum::<f64>() / x.len() as f64;
            prop_assert!((time - freq).abs() <= 1e-9 * time.max(1e-300));
        }

        #[test]
        fn difference_plus_off_recovers_on(on in complex_vec(32), off in complex_vec(32)) {
            let axis = PpmAxis::new(4.0, 0.01, 32).unwrap();
            let on_s = Spectrum::new(on.clone(), axis, AcquisitionKind::EditOn).unwrap();
            let off_s = Spectrum::new(off.clone(), axis, AcquisitionKind::EditOff).unwrap();
            let d = difference_spectrum(&on_s, &off_s).unwrap();
            for ((dv, o), target) in d.values().iter().zip(&off).zip(&on) {
                let back = dv + o;
                // (a - b) + b is exact only up to one rounding of each op.
                let bound = 2.0 * f64::EPSILON * (target.re.abs().max(o.re.abs()) + target.im.abs().max(o.im.abs()));
                prop_assert!((back - target).norm() <= bound + f64::MIN_POSITIVE);
            }
        }

        #[test]
        fn magnitude_ignores_global_phase(x in complex_vec(48), phi in 0.0f64..(2.0 * std::f64::consts::PI)) {
            let axis = PpmAxis::new(4.0, 0.01, 48).unwrap();
            let rot = Complex64::from_polar(1.0, phi);
            let a = Spectrum::new(x.clone(), axis, AcquisitionKind::EditOff).unwrap();
            let b = Spectrum::new(x.iter().map(|v| v * rot).collect(), axis, AcquisitionKind::EditOff).unwrap();
            let ma = extract_component(&a, Component::Magnitude);
            let mb = extract_component(&b, Component::Magnitude);
            for (p, q) in ma.iter().zip(&mb) {
                prop_assert!((p - q).abs() < 1e-10);
            }
        }
    }
}
