//! Labelled synthetic datasets: Sobol-sampled mixtures of basis spectra with
//! optional time-domain Gaussian noise.

pub mod sobol;

use std::path::Path;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::{self, ArchiveError, PayloadWriter};
use crate::basis::{AcquisitionSpectra, BasisSet};
use crate::signal::{difference_spectrum, AcquisitionKind, PpmAxis, PpmWindow, SignalError, Spectrum, WindowTransform};

pub use self::sobol::{sobol_sequence, Sobol};

pub const DATASET_MAGIC: &[u8; 8] = b"MRSDATA1";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("Sobol dimension {0} not supported (1..=16)")]
    UnsupportedDimension(usize),
    #[error("unknown metabolite `{0}`")]
    UnknownMetabolite(String),
    #[error("concentration vector is all zero")]
    DegenerateSample,
    #[error("no basis sets given")]
    NoBasis,
    #[error("basis sets disagree: {0}")]
    BasisMismatch(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
}

pub type Result<T, E = DatagenError> = std::result::Result<T, E>;

/// Relative concentrations keyed by metabolite name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationVector {
    entries: Vec<(String, f64)>,
}

impl ConcentrationVector {
    pub fn new<S: Into<String>>(pairs: impl IntoIterator<Item = (S, f64)>) -> Result<Self> {
        let mut entries: Vec<(String, f64)> = Vec::new();
        for (name, v) in pairs {
            let name = name.into();
            if !(0.0..=1.0).contains(&v) {
                return Err(DatagenError::InvalidArgument(format!("concentration of {name} is {v}, outside [0, 1]")));
            }
            if entries.iter().any(|(n, _)| *n == name) {
                return Err(DatagenError::InvalidArgument(format!("`{name}` given twice")));
            }
            entries.push((name, v));
        }
        Ok(Self { entries })
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), *v))
    }

    /// Values in `order`; names not present read as 0.
    pub fn in_order(&self, order: &[String]) -> Result<Vec<f64>> {
        if let Some((name, _)) = self.entries.iter().find(|(n, _)| !order.contains(n)) {
            return Err(DatagenError::UnknownMetabolite(name.clone()));
        }
        Ok(order.iter().map(|m| self.get(m).unwrap_or(0.0)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (train, validation, test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub spectra: AcquisitionSpectra,
    /// Concentrations normalised to sum 1, in dataset metabolite order.
    pub label: Vec<f64>,
    /// The Sobol vector before normalisation.
    pub raw: Vec<f64>,
    pub noise_sigma: f64,
    /// Which of the dataset's basis sets produced this sample.
    pub basis_index: usize,
}

impl Sample {
    pub fn spectrum(&self, kind: AcquisitionKind) -> &Spectrum {
        self.spectra.get(kind)
    }
}

/// Generation parameters, stored with the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub count: usize,
    pub seed: u64,
    /// Fraction of samples that receive noise; exactly `floor(f * count)`.
    pub noisy_fraction: f64,
    /// Upper end of the per-sample noise level range `(0, max_sigma]`.
    pub max_sigma: f64,
    /// Overrides the random level for every noisy sample.
    pub fixed_sigma: Option<f64>,
    /// First Sobol index used. Index 0 is the origin.
    pub sobol_skip: u64,
}

impl DatasetSpec {
    pub fn new(count: usize, seed: u64) -> Self {
        Self { count, seed, noisy_fraction: 0.5, max_sigma: 0.25, fixed_sigma: None, sobol_skip: 1 }
    }

    pub fn noiseless(mut self) -> Self {
        self.noisy_fraction = 0.0;
        self
    }

    pub fn with_noisy_fraction(mut self, f: f64) -> Self {
        self.noisy_fraction = f;
        self
    }

    pub fn with_fixed_sigma(mut self, sigma: f64) -> Self {
        self.fixed_sigma = Some(sigma);
        self
    }

    pub fn with_sobol_skip(mut self, skip: u64) -> Self {
        self.sobol_skip = skip;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(DatagenError::InvalidArgument("count must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.noisy_fraction) {
            return Err(DatagenError::InvalidArgument(format!("noisy fraction {} outside [0, 1]", self.noisy_fraction)));
        }
        if !(self.max_sigma >= 0.0 && self.max_sigma.is_finite()) {
            return Err(DatagenError::InvalidArgument(format!("max sigma {}", self.max_sigma)));
        }
        if let Some(s) = self.fixed_sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(DatagenError::InvalidArgument(format!("noise sigma {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub metabolites: Vec<String>,
    pub window: PpmWindow,
    pub basis_tags: Vec<String>,
    pub linewidths_hz: Vec<f64>,
    pub spec: DatasetSpec,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.spec.seed
    }

    pub fn axis(&self) -> PpmAxis {
        self.window.axis()
    }

    pub fn labels(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.label.clone()).collect()
    }

    /// Moves the last `n` samples into a second dataset tagged `split`.
    pub fn split_off(&mut self, n: usize, split: Split) -> Dataset {
        let at = self.samples.len().saturating_sub(n);
        Dataset { samples: self.samples.split_off(at), split, ..self.clone_meta() }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            samples: Vec::new(),
            metabolites: self.metabolites.clone(),
            window: self.window,
            basis_tags: self.basis_tags.clone(),
            linewidths_hz: self.linewidths_hz.clone(),
            spec: self.spec,
            split: self.split,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(ArchiveError::from)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = DatasetHeader {
            count: self.samples.len(),
            window: self.window,
            axis: self.axis(),
            metabolites: self.metabolites.clone(),
            seed: self.spec.seed,
            basis_tags: self.basis_tags.clone(),
            linewidths_hz: self.linewidths_hz.clone(),
            split: self.split,
            spec: self.spec,
            acquisitions: AcquisitionKind::ALL.to_vec(),
        };
        let m = self.metabolites.len();
        let mut w = PayloadWriter::with_capacity(self.samples.len() * (2 * m + 2 + 6 * self.window.bins));
        for s in &self.samples {
            w.f64s(&s.label);
            w.f64s(&s.raw);
            w.f64(s.noise_sigma);
            w.f64(s.basis_index as f64);
            for kind in AcquisitionKind::ALL {
                w.complex(s.spectrum(kind).values());
            }
        }
        archive::encode(DATASET_MAGIC, DATASET_VERSION, &header, &w.into_bytes())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let bytes = std::fs::read(path).map_err(ArchiveError::from)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let (h, mut p): (DatasetHeader, _) = archive::decode(bytes, DATASET_MAGIC, DATASET_VERSION)?;
        h.window.validate()?;
        if h.acquisitions != AcquisitionKind::ALL {
            return Err(ArchiveError::format(p.offset(), "unexpected acquisition list").into());
        }
        let m = h.metabolites.len();
        let per_sample = (2 * m + 2 + 6 * h.axis.len) * 8;
        if per_sample * h.count != p.remaining() {
            return Err(ArchiveError::format(
                p.offset(),
                format!("header declares {} samples but payload holds {} bytes", h.count, p.remaining()),
            )
            .into());
        }
        let mut samples = Vec::with_capacity(h.count);
        for _ in 0..h.count {
            let label = p.f64s(m)?;
            let raw = p.f64s(m)?;
            let noise_sigma = p.f64()?;
            let at = p.offset();
            let bi = p.f64()?;
            if bi < 0.0 || bi.fract() != 0.0 || bi as usize >= h.basis_tags.len().max(1) {
                return Err(ArchiveError::format(at, format!("bad basis index {bi}")).into());
            }
            let mut read = |kind| -> Result<Spectrum> { Ok(Spectrum::new(p.complex(h.axis.len)?, h.axis, kind)?) };
            let spectra = AcquisitionSpectra {
                edit_off: read(AcquisitionKind::EditOff)?,
                edit_on: read(AcquisitionKind::EditOn)?,
                difference: read(AcquisitionKind::Difference)?,
            };
            samples.push(Sample { spectra, label, raw, noise_sigma, basis_index: bi as usize });
        }
        p.finish()?;
        Ok(Dataset {
            samples,
            metabolites: h.metabolites,
            window: h.window,
            basis_tags: h.basis_tags,
            linewidths_hz: h.linewidths_hz,
            spec: h.spec,
            split: h.split,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    count: usize,
    window: PpmWindow,
    axis: PpmAxis,
    metabolites: Vec<String>,
    seed: u64,
    basis_tags: Vec<String>,
    linewidths_hz: Vec<f64>,
    split: Split,
    spec: DatasetSpec,
    acquisitions: Vec<AcquisitionKind>,
}

/// Maps time-domain noise onto a basis set's window at the basis scale.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    transform: WindowTransform,
    gain: f64,
}

impl NoiseModel {
    pub fn for_basis(basis: &BasisSet) -> Result<Self> {
        let p = basis.synthesis;
        let transform =
            WindowTransform::new(p.samples, p.bandwidth_hz, p.reference_frequency_mhz, p.carrier_ppm, &basis.window)?;
        Ok(Self { transform, gain: basis.noise_gain() })
    }

    /// Window spectrum of complex white noise with per-part deviation `sigma`.
    pub fn draw(&self, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<Complex64> {
        let noise = gaussian_noise(self.transform.input_len(), sigma, rng);
        let mut out = self.transform.apply(&noise);
        for v in &mut out {
            *v *= self.gain;
        }
        out
    }
}

/// Box-Muller pairs: one pair per complex sample.
pub fn gaussian_noise(n: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<Complex64> {
    (0..n)
        .map(|_| {
            let u1: f64 = 1.0 - rng.random::<f64>();
            let u2: f64 = rng.random::<f64>();
            let r = (-2.0 * u1.ln()).sqrt() * sigma;
            let theta = 2.0 * std::f64::consts::PI * u2;
            Complex64::new(r * theta.cos(), r * theta.sin())
        })
        .collect()
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Normalised mixture of `basis` with concentrations `c`, plus noise.
pub fn synthesize_sample(basis: &BasisSet, c: &ConcentrationVector, noise_sigma: f64, rng_seed: u64) -> Result<Sample> {
    let raw = c.in_order(&basis.metabolites())?;
    let noise = if noise_sigma > 0.0 { Some(NoiseModel::for_basis(basis)?) } else { None };
    mix(basis, noise.as_ref(), &raw, noise_sigma, &mut sample_rng(rng_seed, 0), 0)
}

fn mix(
    basis: &BasisSet,
    noise: Option<&NoiseModel>,
    raw: &[f64],
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
    basis_index: usize,
) -> Result<Sample> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(DatagenError::InvalidArgument(format!("noise sigma {noise_sigma}")));
    }
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(DatagenError::DegenerateSample);
    }
    let combine = |kind: AcquisitionKind| -> Result<Spectrum> {
        let axis = basis.axis();
        let mut values = vec![Complex64::new(0.0, 0.0); axis.len];
        for (entry, &c) in basis.entries.iter().zip(raw) {
            for (v, b) in values.iter_mut().zip(entry.spectra.get(kind).values()) {
                *v += b * c;
            }
        }
        Ok(Spectrum::new(values, axis, kind)?)
    };
    let mut edit_off = combine(AcquisitionKind::EditOff)?;
    let mut edit_on = combine(AcquisitionKind::EditOn)?;
    let difference = if noise_sigma > 0.0 {
        let model = match noise {
            Some(m) => m,
            None => return Err(DatagenError::InvalidArgument("noise requested without a noise model".into())),
        };
        for s in [&mut edit_off, &mut edit_on] {
            for (v, n) in s.values_mut().iter_mut().zip(model.draw(noise_sigma, rng)) {
                *v += n;
            }
        }
        difference_spectrum(&edit_on, &edit_off)?
    } else {
        combine(AcquisitionKind::Difference)?
    };
    Ok(Sample {
        spectra: AcquisitionSpectra { edit_off, edit_on, difference },
        label: raw.iter().map(|v| v / total).collect(),
        raw: raw.to_vec(),
        noise_sigma,
        basis_index,
    })
}

fn check_compatible(bases: &[BasisSet]) -> Result<()> {
    let first = bases.first().ok_or(DatagenError::NoBasis)?;
    for b in &bases[1..] {
        if b.metabolites() != first.metabolites() {
            return Err(DatagenError::BasisMismatch("metabolite lists differ".into()));
        }
        if !b.axis().same_as(&first.axis()) {
            return Err(DatagenError::BasisMismatch("ppm axes differ".into()));
        }
    }
    if first.is_empty() {
        return Err(DatagenError::BasisMismatch("basis set has no metabolites".into()));
    }
    Ok(())
}

/// Builds `spec.count` samples split round-robin across `bases`.
pub fn generate_dataset(bases: &[BasisSet], spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    check_compatible(bases)?;
    let metabolites = bases[0].metabolites();

    let mut sobol = Sobol::new(metabolites.len())?;
    sobol.seek(spec.sobol_skip);
    let mut points = Vec::with_capacity(spec.count);
    while points.len() < spec.count {
        let p = sobol.next_point();
        if p.iter().sum::<f64>() > 0.0 {
            points.push(p);
        }
    }

    let mut order_rng = sample_rng(spec.seed, u64::MAX);
    let mut order: Vec<usize> = (0..spec.count).collect();
    order.shuffle(&mut order_rng);
    let noisy = (spec.noisy_fraction * spec.count as f64).floor() as usize;
    let mut sigmas = vec![0.0; spec.count];
    for &i in &order[..noisy] {
        sigmas[i] = spec.fixed_sigma.unwrap_or_else(|| spec.max_sigma * (1.0 - order_rng.random::<f64>()));
    }

    let noise_models = if sigmas.iter().any(|&s| s > 0.0) {
        bases.iter().map(|b| NoiseModel::for_basis(b).map(Some)).collect::<Result<Vec<_>>>()?
    } else {
        vec![None; bases.len()]
    };

    let samples = points
        .par_iter()
        .enumerate()
        .map(|(i, raw)| {
            let bi = i % bases.len();
            let mut rng = sample_rng(spec.seed, i as u64);
            mix(&bases[bi], noise_models[bi].as_ref(), raw, sigmas[i], &mut rng, bi)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Dataset {
        samples,
        metabolites,
        window: bases[0].window,
        basis_tags: bases.iter().map(|b| b.source_tag.clone()).collect(),
        linewidths_hz: bases.iter().map(|b| b.linewidth_hz).collect(),
        spec: *spec,
        split: Split::Train,
    })
}
