//! Non-negative least-squares basis fitting, a classical baseline for the
//! network operating on the same processed rows.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::BasisSet;
use crate::preprocess::{assemble_unscaled, InputConfig, PreprocessError};
use crate::signal::Spectrum;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("basis set is empty")]
    EmptyBasis,
    #[error("observation has {found} values, design matrix expects {expected}")]
    Shape { expected: usize, found: usize },
    #[error("active-set iteration did not converge in {iterations} iterations")]
    Convergence { iterations: usize, best: FitResult },
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

pub type Result<T, E = FitError> = std::result::Result<T, E>;

pub const DEFAULT_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Relative concentrations, summing to 1 unless all are zero.
    pub concentrations: Vec<(String, f64)>,
    /// Unnormalised coefficients in basis order.
    pub coefficients: Vec<f64>,
    /// `|y - A c|` for the unnormalised coefficients.
    pub residual_norm: f64,
    pub iterations: usize,
}

impl FitResult {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.concentrations.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn values(&self) -> Vec<f64> {
        self.concentrations.iter().map(|(_, v)| *v).collect()
    }
}

/// Solution of `min |A x - y|` subject to `x >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NnlsSolution {
    pub x: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Least squares on a subset of columns by Householder QR. Returns `None`
/// when the selected columns are numerically rank deficient.
fn lstsq_columns(a: &Array2<f64>, cols: &[usize], y: ArrayView1<f64>) -> Option<Vec<f64>> {
    let m = a.nrows();
    let k = cols.len();
    let mut r = a.select(Axis(1), cols);
    let mut b = y.to_owned();
    let scale = r.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    for j in 0..k {
        let norm = r.column(j).slice(ndarray::s![j..]).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= scale * 1e-13 {
            return None;
        }
        let alpha = if r[[j, j]] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (j..m).map(|i| r[[i, j]]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            for c in j..k {
                let dot: f64 = v.iter().enumerate().map(|(i, vi)| vi * r[[j + i, c]]).sum();
                let f = 2.0 * dot / vnorm2;
                for (i, vi) in v.iter().enumerate() {
                    r[[j + i, c]] -= f * vi;
                }
            }
            let dot: f64 = v.iter().enumerate().map(|(i, vi)| vi * b[j + i]).sum();
            let f = 2.0 * dot / vnorm2;
            for (i, vi) in v.iter().enumerate() {
                b[j + i] -= f * vi;
            }
        }
    }
    let mut z = vec![0.0; k];
    for j in (0..k).rev() {
        let s: f64 = ((j + 1)..k).map(|c| r[[j, c]] * z[c]).sum();
        z[j] = (b[j] - s) / r[[j, j]];
    }
    Some(z)
}

/// Lawson-Hanson active-set NNLS. `tolerance` is relative to `|A|_max |y|`.
pub fn nnls(a: &Array2<f64>, y: &[f64], tolerance: f64, max_iterations: usize) -> NnlsSolution {
    let n = a.ncols();
    let y = ArrayView1::from(y);
    let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs())) * y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tol = tolerance * scale.max(f64::MIN_POSITIVE);
    let mut x = Array1::<f64>::zeros(n);
    let mut passive = vec![false; n];
    let mut iterations = 0;
    let residual = |x: &Array1<f64>| &y - &a.dot(x);

    let mut converged = true;
    // Columns found dependent on the passive set are not reconsidered.
    let mut excluded = vec![false; n];
    loop {
        let w = a.t().dot(&residual(&x));
        let candidate =
            (0..n).filter(|&j| !passive[j] && !excluded[j] && w[j] > tol).max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(t) = candidate else { break };
        if iterations >= max_iterations {
            converged = false;
            break;
        }
        iterations += 1;
        passive[t] = true;
        loop {
            let cols: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let Some(z) = lstsq_columns(a, &cols, y) else {
                passive[t] = false;
                excluded[t] = true;
                break;
            };
            if z.iter().all(|&v| v > 0.0) {
                x.fill(0.0);
                for (&j, &v) in cols.iter().zip(&z) {
                    x[j] = v;
                }
                break;
            }
            // Step towards z until the first coordinate hits zero.
            let (mut alpha, mut blocking) = (f64::INFINITY, cols[0]);
            for (&j, &zj) in cols.iter().zip(&z) {
                if zj <= 0.0 {
                    let a_j = x[j] / (x[j] - zj);
                    if a_j < alpha {
                        alpha = a_j;
                        blocking = j;
                    }
                }
            }
            for (&j, &zj) in cols.iter().zip(&z) {
                x[j] += alpha * (zj - x[j]);
                if x[j] <= 0.0 {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
            x[blocking] = 0.0;
            passive[blocking] = false;
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    let residual_norm = residual(&x).iter().map(|v| v * v).sum::<f64>().sqrt();
    NnlsSolution { x: x.to_vec(), residual_norm, iterations, converged }
}

/// Design matrix of processed basis spectra, one column per metabolite.
#[derive(Debug, Clone)]
pub struct NnlsFitter {
    metabolites: Vec<String>,
    design: Array2<f64>,
    input: InputConfig,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl NnlsFitter {
    /// Columns are the basis spectra put through the unscaled input
    /// pipeline. The basis is already aligned, so B0 correction is skipped
    /// for the columns.
    pub fn new(basis: &BasisSet, cfg: &InputConfig) -> Result<Self> {
        if basis.is_empty() {
            return Err(FitError::EmptyBasis);
        }
        cfg.validate()?;
        let column_cfg = InputConfig { b0: None, ..cfg.clone() };
        let len = cfg.rows() * cfg.bins();
        let mut design = Array2::zeros((len, basis.len()));
        for (j, e) in basis.entries.iter().enumerate() {
            let s = &e.spectra;
            let t = assemble_unscaled(&[&s.edit_off, &s.edit_on, &s.difference], &column_cfg)?;
            design.column_mut(j).assign(&Array1::from_iter(t.data.iter().copied()));
        }
        Ok(Self {
            metabolites: basis.metabolites(),
            design,
            input: cfg.clone(),
            tolerance: DEFAULT_TOLERANCE,
            max_iterations: 10 * basis.len(),
        })
    }

    pub fn metabolites(&self) -> &[String] {
        &self.metabolites
    }

    pub fn input(&self) -> &InputConfig {
        &self.input
    }

    pub fn design(&self) -> &Array2<f64> {
        &self.design
    }

    /// Fits rows assembled by [`assemble_unscaled`] with this fitter's input
    /// configuration.
    pub fn fit(&self, observed: &Array2<f64>) -> Result<FitResult> {
        let expected = self.design.nrows();
        if observed.len() != expected {
            return Err(FitError::Shape { expected, found: observed.len() });
        }
        let y: Vec<f64> = observed.iter().copied().collect();
        let sol = nnls(&self.design, &y, self.tolerance, self.max_iterations);
        let total: f64 = sol.x.iter().sum();
        let concentrations = self
            .metabolites
            .iter()
            .zip(&sol.x)
            .map(|(n, &v)| (n.clone(), if total > 0.0 { v / total } else { v }))
            .collect();
        let result = FitResult { concentrations, coefficients: sol.x, residual_norm: sol.residual_norm, iterations: sol.iterations };
        if sol.converged {
            Ok(result)
        } else {
            Err(FitError::Convergence { iterations: sol.iterations, best: result })
        }
    }

    /// Assembles and fits windowed spectra.
    pub fn fit_spectra(&self, spectra: &[&Spectrum]) -> Result<FitResult> {
        let t = assemble_unscaled(spectra, &self.input)?;
        self.fit(&t.data)
    }
}

/// One-shot fit of `observed` (unscaled rows) against `basis`.
pub fn nnls_fit(observed: &Array2<f64>, basis: &BasisSet, cfg: &InputConfig) -> Result<FitResult> {
    NnlsFitter::new(basis, cfg)?.fit(observed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{build_basis, default_definitions};
    use crate::datagen::{synthesize_sample, ConcentrationVector};
    use crate::signal::{AcquisitionKind, Component, PpmWindow};
    use proptest::prelude::*;
    use std::sync::OnceLock;

    fn basis() -> &'static BasisSet {
        static B: OnceLock<BasisSet> = OnceLock::new();
        B.get_or_init(|| build_basis(&default_definitions(), &[1.0], &PpmWindow::default()).unwrap().remove(0))
    }

    fn linear_cfg() -> InputConfig {
        let cfg = InputConfig::new(
            vec![AcquisitionKind::EditOff, AcquisitionKind::Difference],
            vec![Component::Real, Component::Imaginary],
        )
        .unwrap();
        InputConfig { b0: None, ..cfg }
    }

    fn observe(fitter: &NnlsFitter, c: &[f64]) -> Array2<f64> {
        let names = fitter.metabolites();
        let cv = ConcentrationVector::new(names.iter().cloned().zip(c.iter().copied())).unwrap();
        let s = synthesize_sample(basis(), &cv, 0.0, 0).unwrap();
        let sp = &s.spectra;
        assemble_unscaled(&[&sp.edit_off, &sp.edit_on, &sp.difference], fitter.input()).unwrap().data
    }

    #[test]
    fn exact_recovery() {
        let fitter = NnlsFitter::new(basis(), &linear_cfg()).unwrap();
        let c = [0.3, 0.2, 0.1, 0.25, 0.15];
        let fit = fitter.fit(&observe(&fitter, &c)).unwrap();
        for (got, want) in fit.values().iter().zip(c) {
            assert!((got - want).abs() < 1e-6, "{:?}", fit.values());
        }
        assert!(fit.residual_norm < 1e-8, "{}", fit.residual_norm);
    }

    #[test]
    fn zero_observation() {
        let fitter = NnlsFitter::new(basis(), &linear_cfg()).unwrap();
        let y = Array2::zeros((fitter.input().rows(), fitter.input().bins()));
        let fit = fitter.fit(&y).unwrap();
        assert!(fit.values().iter().all(|&v| v == 0.0));
        assert_eq!(fit.residual_norm, 0.0);
    }

    #[test]
    fn single_metabolite_is_indicator() {
        let fitter = NnlsFitter::new(basis(), &linear_cfg()).unwrap();
        for j in 0..5 {
            let mut c = [0.0; 5];
            c[j] = 1.0;
            let fit = fitter.fit(&observe(&fitter, &c)).unwrap();
            for (i, v) in fit.values().iter().enumerate() {
                assert!((v - c[i]).abs() < 1e-6, "metabolite {j}: {:?}", fit.values());
            }
        }
    }

    #[test]
    fn shape_mismatch() {
        let fitter = NnlsFitter::new(basis(), &linear_cfg()).unwrap();
        assert!(matches!(fitter.fit(&Array2::zeros((1, 3))), Err(FitError::Shape { .. })));
    }

    #[test]
    fn handles_negative_unconstrained_solution() {
        // Unconstrained least squares gives x = (2, -1); NNLS clamps.
        let a = ndarray::array![[1.0, 1.0], [0.0, 1.0], [0.0, 0.0]];
        let sol = nnls(&a, &[1.0, -1.0, 0.0], 1e-10, 20);
        assert!(sol.converged);
        assert!((sol.x[0] - 1.0).abs() < 1e-12 && sol.x[1] == 0.0, "{:?}", sol.x);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn kkt_conditions(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = Array2::from_shape_fn((12, 5), |_| rng.random_range(-1.0..1.0));
            let y: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let sol = nnls(&a, &y, 1e-10, 50);
            prop_assert!(sol.converged);
            let x = Array1::from(sol.x.clone());
            let w = a.t().dot(&(&ArrayView1::from(&y[..]) - &a.dot(&x)));
            for j in 0..5 {
                prop_assert!(x[j] >= 0.0);
                if x[j] > 0.0 {
                    prop_assert!(w[j].abs() < 1e-9, "active gradient {}", w[j]);
                } else {
                    prop_assert!(w[j] < 1e-9, "inactive gradient {}", w[j]);
                }
            }
        }

        #[test]
        fn scale_equivariance(k in 0.01f64..100.0, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = Array2::from_shape_fn((10, 4), |_| rng.random_range(-1.0..1.0));
            let y: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ky: Vec<f64> = y.iter().map(|v| v * k).collect();
            let s1 = nnls(&a, &y, 1e-10, 40);
            let s2 = nnls(&a, &ky, 1e-10, 40);
            for (p, q) in s1.x.iter().zip(&s2.x) {
                prop_assert!((p * k - q).abs() < 1e-9 * (1.0 + q.abs()));
            }
        }
    }
}
