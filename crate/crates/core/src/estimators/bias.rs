//! Squared-bias and variance of stochastic estimators against the Hutchinson
//! oracle, sharing the outer samples and the Gaussian noise.
//!
//! For a fixed outer point the Langevin-MVL and DSM noise `Z` tends to the
//! Hutchinson probe in the small-step limit, so using the same `Z` in both
//! makes the per-draw difference small and the bias visible.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::Energy;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::targets::Target;
use crate::tensor::Tensor;

use super::{dsm_eval, mean_and_stderr, mvl_langevin_eval, oracles::hutchinson_eval, EstimatorKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasVarianceSpec {
    /// `(estimator, with_cv)` pairs.
    pub estimators: Vec<(EstimatorKind, bool)>,
    pub epsilons: Vec<f64>,
    /// Outer samples `K`.
    pub n_outer: usize,
    /// Noise draws per outer sample `M`.
    pub n_inner: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BiasVarianceRow {
    pub estimator: String,
    pub epsilon: f64,
    pub with_cv: bool,
    pub mean: f64,
    /// `(1/K) sum_k m_k^2` with `m_k` the inner mean of estimator minus oracle.
    pub sq_bias_ub: f64,
    /// Standard error of `m_k^2 - s_k^2 / M` across outer samples.
    pub sq_bias_stderr: f64,
    pub variance: f64,
    pub n_outer: usize,
    pub n_inner: usize,
    /// Part of `sq_bias_ub` explained by inner Monte Carlo noise alone,
    /// `(1/K) sum_k s_k^2 / M`.
    #[serde(skip)]
    pub mc_floor: f64,
}

impl BiasVarianceRow {
    pub const CSV_HEADER: [&'static str; 9] = [
        "estimator",
        "epsilon",
        "with_cv",
        "mean",
        "sq_bias_ub",
        "sq_bias_stderr",
        "variance",
        "n_outer",
        "n_inner",
    ];

    pub fn csv_fields(&self) -> Vec<String> {
        vec![
            self.estimator.clone(),
            format!("{:e}", self.epsilon),
            self.with_cv.to_string(),
            format!("{:.10e}", self.mean),
            format!("{:.10e}", self.sq_bias_ub),
            format!("{:.10e}", self.sq_bias_stderr),
            format!("{:.10e}", self.variance),
            self.n_outer.to_string(),
            self.n_inner.to_string(),
        ]
    }

    /// Noise-corrected squared bias `sq_bias_ub - mc_floor`.
    pub fn sq_bias(&self) -> f64 {
        self.sq_bias_ub - self.mc_floor
    }

    /// Whether the corrected squared bias is within `z` standard errors of 0.
    pub fn consistent_with_zero(&self, z: f64) -> bool {
        self.sq_bias() <= z * self.sq_bias_stderr
    }
}

struct Outer {
    /// Per (estimator, epsilon) cell: `(m_k, s_k^2, sum, sum of squares)`.
    cells: Vec<(f64, f64, f64, f64)>,
}

pub fn bias_variance_report<E: Energy + ?Sized>(
    spec: &BiasVarianceSpec,
    model: &E,
    target: &Target,
    stream: &mut RngStream,
) -> Result<Vec<BiasVarianceRow>> {
    if spec.n_outer < 2 || spec.n_inner < 2 {
        return Err(Error::InvalidArgument("bias report needs K, M >= 2".into()));
    }
    for &(k, _) in &spec.estimators {
        if !matches!(
            k,
            EstimatorKind::MvlLangevin | EstimatorKind::Dsm | EstimatorKind::ExactHutchinson
        ) {
            return Err(Error::Unsupported(format!("bias report for {}", k.name())));
        }
    }
    if spec.epsilons.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::InvalidArgument("epsilons must be positive".into()));
    }
    let d = target.manifold().dim();
    let m = spec.n_inner;
    let base = stream.split();
    let outers: Vec<Outer> = (0..spec.n_outer)
        .into_par_iter()
        .map(|k| {
            let mut s = base.derive(k as u64);
            let x0 = target.sample(1, &mut s)?;
            let x = Tensor::matrix(m, d, x0.values().repeat(m))?;
            let z = Tensor::matrix(m, d, s.normals(m * d))?;
            let oracle = hutchinson_eval(&x, model, std::slice::from_ref(&z), false)?
                .report
                .per_sample;
            let mut cells = Vec::new();
            for &(kind, cv) in &spec.estimators {
                for &eps in &spec.epsilons {
                    let est = match kind {
                        EstimatorKind::MvlLangevin => {
                            mvl_langevin_eval(&x, model, eps, cv, &z, false)?.report.per_sample
                        }
                        EstimatorKind::Dsm => dsm_eval(&x, model, eps, cv, &z, false)?.report.per_sample,
                        _ => oracle.iter().map(|h| 2.0 * h).collect(),
                    };
                    let diff: Vec<f64> = est.iter().zip(&oracle).map(|(e, h)| e - 2.0 * h).collect();
                    let (mk, se) = mean_and_stderr(&diff);
                    let sum: f64 = est.iter().sum();
                    let sq: f64 = est.iter().map(|v| v * v).sum();
                    // se^2 = s_k^2 / M
                    cells.push((mk, se * se * m as f64, sum, sq));
                }
            }
            Ok(Outer { cells })
        })
        .collect::<Result<_>>()?;

    let kk = spec.n_outer as f64;
    let total = kk * m as f64;
    let mut rows = Vec::new();
    let mut c = 0;
    for &(kind, cv) in &spec.estimators {
        for &eps in &spec.epsilons {
            let corrected: Vec<f64> = outers
                .iter()
                .map(|o| o.cells[c].0.powi(2) - o.cells[c].1 / m as f64)
                .collect();
            let ub = outers.iter().map(|o| o.cells[c].0.powi(2)).sum::<f64>() / kk;
            let floor = outers.iter().map(|o| o.cells[c].1 / m as f64).sum::<f64>() / kk;
            let (_, stderr) = mean_and_stderr(&corrected);
            let sum: f64 = outers.iter().map(|o| o.cells[c].2).sum();
            let sq: f64 = outers.iter().map(|o| o.cells[c].3).sum();
            let mean = sum / total;
            let variance = (sq - total * mean * mean) / (total - 1.0);
            rows.push(BiasVarianceRow {
                estimator: kind.name().to_string(),
                epsilon: eps,
                with_cv: cv,
                mean,
                sq_bias_ub: ub,
                sq_bias_stderr: stderr,
                variance,
                n_outer: spec.n_outer,
                n_inner: m,
                mc_floor: floor,
            });
            c += 1;
        }
    }
    Ok(rows)
}
