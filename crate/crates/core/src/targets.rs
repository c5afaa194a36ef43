//! Analytic ground-truth distributions: exact samplers, exact scores and
//! (normalized) log densities.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::energy::Energy;
use crate::error::{Error, Result};
use crate::manifold::{chart_at, coordinate_tangents, ChartPoint, Manifold};
use crate::rng::RngStream;
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const COSINE_NOISE_STD: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    /// Diagonal Gaussian.
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
    GaussianMixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        stds: Vec<Vec<f64>>,
    },
    /// `x1 ~ N(0, 2^2)`, `x2 = x1^2 / 4 + N(0, 1)`.
    Banana,
    /// `x1 ~ N(0, 2^2)`, `x2 = cos(2 x1) + N(0, 0.3^2)`.
    Cosine,
    /// Mixture of `exp(kappa cos(x - mu))` on the circle; `means` are angles.
    VonMisesMixture {
        weights: Vec<f64>,
        means: Vec<f64>,
        kappas: Vec<f64>,
    },
    /// Mixture of `exp(kappa mu . x)` on the 2-sphere; `means` are unit vectors.
    VmfMixture {
        weights: Vec<f64>,
        means: Vec<[f64; 3]>,
        kappas: Vec<f64>,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RejectionStats {
    pub proposals: u64,
    pub accepted: u64,
}

impl RejectionStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            1.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }
}

fn check_weights(w: &[f64], n: usize) -> Result<()> {
    if w.len() != n || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {n} components",
            w.len()
        )));
    }
    if w.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::InvalidArgument("mixture weights must be positive".into()));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!("mixture weights sum to {s}")));
    }
    Ok(())
}

/// `log I_0(kappa)`.
pub fn log_bessel_i0(kappa: f64) -> f64 {
    let k = kappa.abs();
    if k > 500.0 {
        return k - 0.5 * (2.0 * PI * k).ln() + (1.0 + 1.0 / (8.0 * k)).ln();
    }
    let q = 0.25 * k * k;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut m = 1.0;
    loop {
        term *= q / (m * m);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
        m += 1.0;
    }
    sum.ln()
}

/// Log normalizer of `exp(kappa mu . x)` on the 2-sphere.
pub fn log_vmf_s2_normalizer(kappa: f64) -> f64 {
    if kappa < 1e-12 {
        return -(4.0 * PI).ln();
    }
    let ln_sinh = kappa + (-(-2.0 * kappa).exp()).ln_1p() - 2f64.ln();
    kappa.ln() - (4.0 * PI).ln() - ln_sinh
}

/// Von Mises draw by Best-Fisher rejection from a wrapped-Cauchy envelope.
pub fn sample_von_mises(stream: &mut RngStream, mu: f64, kappa: f64, stats: &mut RejectionStats) -> f64 {
    if kappa < 1e-8 {
        stats.proposals += 1;
        stats.accepted += 1;
        return crate::manifold::wrap_angle(mu + PI * (2.0 * stream.uniform() - 1.0));
    }
    let tau = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * kappa);
    let r = (1.0 + rho * rho) / (2.0 * rho);
    loop {
        stats.proposals += 1;
        let u1 = stream.uniform();
        let u2 = stream.uniform_open();
        let u3 = stream.uniform();
        let z = (PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = kappa * (r - f);
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            stats.accepted += 1;
            let theta = if u3 > 0.5 {
                f.clamp(-1.0, 1.0).acos()
            } else {
                -f.clamp(-1.0, 1.0).acos()
            };
            return crate::manifold::wrap_angle(mu + theta);
        }
    }
}

/// vMF draw on the 2-sphere (Wood's inversion for the polar cosine).
pub fn sample_vmf_s2(stream: &mut RngStream, mu: [f64; 3], kappa: f64) -> [f64; 3] {
    let u = stream.uniform_open();
    let w = if kappa < 1e-8 {
        2.0 * u - 1.0
    } else {
        (1.0 + (u + (1.0 - u) * (-2.0 * kappa).exp()).ln() / kappa).clamp(-1.0, 1.0)
    };
    let phi = 2.0 * PI * stream.uniform();
    let s = (1.0 - w * w).max(0.0).sqrt();
    let frame = match chart_at(Manifold::Sphere, &mu) {
        Ok(cp) => cp.chart,
        Err(_) => unreachable!("vMF means are unit vectors"),
    };
    let r = match frame {
        crate::manifold::Chart::Rotation(r) => r,
        _ => unreachable!(),
    };
    let (a, b) = (s * phi.cos(), s * phi.sin());
    [
        w * r[0][0] + a * r[0][1] + b * r[0][2],
        w * r[1][0] + a * r[1][1] + b * r[1][2],
        w * r[2][0] + a * r[2][1] + b * r[2][2],
    ]
}

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Converts a 2-vector mean direction to an angle after normalizing it.
pub fn angle_of(v: [f64; 2]) -> f64 {
    v[1].atan2(v[0])
}

impl Target {
    pub fn gaussian(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() || std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument("gaussian needs matching positive stds".into()));
        }
        Ok(Target::Gaussian { mean, std })
    }

    pub fn gaussian_mixture(weights: Vec<f64>, means: Vec<Vec<f64>>, stds: Vec<Vec<f64>>) -> Result<Self> {
        check_weights(&weights, means.len())?;
        let d = means[0].len();
        if stds.len() != means.len()
            || means.iter().chain(&stds).any(|v| v.len() != d)
            || stds.iter().flatten().any(|&s| !(s > 0.0))
        {
            return Err(Error::InvalidArgument("inconsistent mixture components".into()));
        }
        Ok(Target::GaussianMixture { weights, means, stds })
    }

    pub fn von_mises_mixture(weights: Vec<f64>, means: Vec<f64>, kappas: Vec<f64>) -> Result<Self> {
        check_weights(&weights, means.len())?;
        if kappas.len() != means.len() || kappas.iter().any(|&k| k < 0.0) {
            return Err(Error::InvalidArgument(
                "von Mises needs one non-negative kappa per component".into(),
            ));
        }
        Ok(Target::VonMisesMixture { weights, means, kappas })
    }

    pub fn vmf_mixture(weights: Vec<f64>, means: Vec<[f64; 3]>, kappas: Vec<f64>) -> Result<Self> {
        check_weights(&weights, means.len())?;
        if kappas.len() != means.len() || kappas.iter().any(|&k| k < 0.0) {
            return Err(Error::InvalidArgument(
                "vMF needs one non-negative kappa per component".into(),
            ));
        }
        Ok(Target::VmfMixture {
            weights,
            means: means.into_iter().map(normalize3).collect(),
            kappas,
        })
    }

    /// `0.7 vM((0,1), sigma=2) + 0.3 vM((0.5,-0.5), sigma=3)` with
    /// `kappa = 1 / sigma^2`.
    pub fn circle_benchmark() -> Self {
        Self::von_mises_mixture(
            vec![0.7, 0.3],
            vec![angle_of([0.0, 1.0]), angle_of([0.5, -0.5])],
            vec![1.0 / 4.0, 1.0 / 9.0],
        )
        .expect("valid")
    }

    /// Four equal-weight vMF components at the vertices of a tetrahedron.
    pub fn tetrahedral_vmf(kappa: f64) -> Self {
        let s = 1.0 / 3f64.sqrt();
        Self::vmf_mixture(
            vec![0.25; 4],
            vec![[s, s, s], [s, -s, -s], [-s, s, -s], [-s, -s, s]],
            vec![kappa; 4],
        )
        .expect("valid")
    }

    pub fn uniform_circle() -> Self {
        Self::von_mises_mixture(vec![1.0], vec![0.0], vec![0.0]).expect("valid")
    }

    pub fn manifold(&self) -> Manifold {
        match self {
            Target::Gaussian { mean, .. } => Manifold::Euclidean(mean.len()),
            Target::GaussianMixture { means, .. } => Manifold::Euclidean(means[0].len()),
            Target::Banana | Target::Cosine => Manifold::Euclidean(2),
            Target::VonMisesMixture { .. } => Manifold::Circle,
            Target::VmfMixture { .. } => Manifold::Sphere,
        }
    }

    /// Draws `n` ambient points together with their mixture component labels.
    pub fn sample_labeled(&self, n: usize, stream: &mut RngStream) -> (Tensor, Vec<usize>, RejectionStats) {
        let d = self.manifold().ambient_dim();
        let mut out = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        let mut stats = RejectionStats::default();
        for _ in 0..n {
            match self {
                Target::Gaussian { mean, std } => {
                    labels.push(0);
                    for (m, s) in mean.iter().zip(std) {
                        out.push(m + s * stream.normal());
                    }
                }
                Target::GaussianMixture { weights, means, stds } => {
                    let k = stream.categorical(weights);
                    labels.push(k);
                    for (m, s) in means[k].iter().zip(&stds[k]) {
                        out.push(m + s * stream.normal());
                    }
                }
                Target::Banana => {
                    labels.push(0);
                    let x1 = 2.0 * stream.normal();
                    out.push(x1);
                    out.push(0.25 * x1 * x1 + stream.normal());
                }
                Target::Cosine => {
                    labels.push(0);
                    let x1 = 2.0 * stream.normal();
                    out.push(x1);
                    out.push((2.0 * x1).cos() + COSINE_NOISE_STD * stream.normal());
                }
                Target::VonMisesMixture { weights, means, kappas } => {
                    let k = stream.categorical(weights);
                    labels.push(k);
                    let a = sample_von_mises(stream, means[k], kappas[k], &mut stats);
                    out.push(a.cos());
                    out.push(a.sin());
                }
                Target::VmfMixture { weights, means, kappas } => {
                    let k = stream.categorical(weights);
                    labels.push(k);
                    out.extend(sample_vmf_s2(stream, means[k], kappas[k]));
                }
            }
        }
        (Tensor::matrix(n, d, out).expect("dims"), labels, stats)
    }

    /// `n` i.i.d. exact draws as ambient points (`n x ambient_dim`).
    pub fn sample(&self, n: usize, stream: &mut RngStream) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample size must be at least 1".into()));
        }
        Ok(self.sample_labeled(n, stream).0)
    }

    /// Per-component log terms (including log weights) at an ambient point,
    /// with their ambient gradients.
    fn component_terms(&self, x: &[f64]) -> Vec<(f64, Vec<f64>)> {
        match self {
            Target::Gaussian { mean, std } => vec![gauss_term(x, mean, std, 0.0)],
            Target::GaussianMixture { weights, means, stds } => weights
                .iter()
                .zip(means.iter().zip(stds))
                .map(|(w, (m, s))| gauss_term(x, m, s, w.ln()))
                .collect(),
            Target::Banana => {
                let (x1, x2) = (x[0], x[1]);
                let r = x2 - 0.25 * x1 * x1;
                let lp = -x1 * x1 / 8.0 - (2.0f64).ln() - 0.5 * LN_2PI - 0.5 * r * r - 0.5 * LN_2PI;
                vec![(lp, vec![-x1 / 4.0 + r * 0.5 * x1, -r])]
            }
            Target::Cosine => {
                let (x1, x2) = (x[0], x[1]);
                let v = COSINE_NOISE_STD * COSINE_NOISE_STD;
                let r = x2 - (2.0 * x1).cos();
                let lp = -x1 * x1 / 8.0
                    - (2.0f64).ln()
                    - 0.5 * LN_2PI
                    - 0.5 * r * r / v
                    - COSINE_NOISE_STD.ln()
                    - 0.5 * LN_2PI;
                vec![(lp, vec![-x1 / 4.0 - r * 2.0 * (2.0 * x1).sin() / v, -r / v])]
            }
            Target::VonMisesMixture { weights, means, kappas } => weights
                .iter()
                .zip(means.iter().zip(kappas))
                .map(|(w, (&mu, &k))| {
                    let (c, s) = (mu.cos(), mu.sin());
                    let lp = w.ln() - (2.0 * PI).ln() - log_bessel_i0(k) + k * (c * x[0] + s * x[1]);
                    (lp, vec![k * c, k * s])
                })
                .collect(),
            Target::VmfMixture { weights, means, kappas } => weights
                .iter()
                .zip(means.iter().zip(kappas))
                .map(|(w, (mu, &k))| {
                    let dot = mu[0] * x[0] + mu[1] * x[1] + mu[2] * x[2];
                    let lp = w.ln() + log_vmf_s2_normalizer(k) + k * dot;
                    (lp, vec![k * mu[0], k * mu[1], k * mu[2]])
                })
                .collect(),
        }
    }

    /// Normalized log density (w.r.t. Lebesgue or Hausdorff measure) at an
    /// ambient point.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let terms = self.component_terms(x);
        logsumexp(terms.iter().map(|t| t.0))
    }

    /// Log density up to an additive constant. Single-component families drop
    /// their normalizer (`kappa cos(x - mu)` for von Mises); mixtures keep
    /// the relative component constants.
    pub fn unnorm_log_density(&self, x: &[f64]) -> f64 {
        match self {
            Target::Gaussian { mean, std } => {
                -0.5 * x
                    .iter()
                    .zip(mean.iter().zip(std))
                    .map(|(x, (m, s))| ((x - m) / s).powi(2))
                    .sum::<f64>()
            }
            Target::VonMisesMixture { means, kappas, .. } if means.len() == 1 => {
                kappas[0] * (x[1].atan2(x[0]) - means[0]).cos()
            }
            Target::VmfMixture { means, kappas, .. } if means.len() == 1 => {
                kappas[0] * (means[0][0] * x[0] + means[0][1] * x[1] + means[0][2] * x[2])
            }
            _ => self.log_density(x),
        }
    }

    /// Gradient of the log density of the target's natural ambient extension.
    pub fn ambient_score(&self, x: &[f64]) -> Result<Vec<f64>> {
        let terms = self.component_terms(x);
        let lse = logsumexp(terms.iter().map(|t| t.0));
        if !lse.is_finite() {
            return Err(Error::ZeroDensity);
        }
        let mut g = vec![0.0; x.len()];
        for (lp, grad) in &terms {
            let r = (lp - lse).exp();
            for (gi, v) in g.iter_mut().zip(grad) {
                *gi += r * v;
            }
        }
        Ok(g)
    }

    /// Coordinate gradient of the log density at a chart point (Euclidean
    /// points use the identity chart).
    pub fn score(&self, y: &ChartPoint) -> Result<Vec<f64>> {
        let m = self.manifold();
        let x = crate::manifold::embed(m, y);
        let amb = self.ambient_score(&x)?;
        if m.is_euclidean() {
            return Ok(amb);
        }
        Ok(coordinate_tangents(m, y)
            .iter()
            .map(|t| t.iter().zip(&amb).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Scores for each row of a chart batch (`B x dim`).
    pub fn score_batch(&self, batch: &crate::manifold::ChartBatch) -> Result<Tensor> {
        let mut out = Vec::with_capacity(batch.coords.len());
        for i in 0..batch.len() {
            out.extend(self.score(&batch.point(i))?);
        }
        Tensor::matrix(batch.len(), batch.manifold.dim(), out)
    }

    /// `log integral of exp(unnorm_log_density)` by Hausdorff quadrature.
    pub fn log_normalizer_by_quadrature(&self, resolution: usize) -> Result<f64> {
        let m = self.manifold();
        let z = crate::manifold::hausdorff_quadrature(
            m,
            |y| self.unnorm_log_density(&crate::manifold::embed(m, y)).exp(),
            resolution,
        )?;
        Ok(z.ln())
    }
}

fn gauss_term(x: &[f64], mean: &[f64], std: &[f64], log_w: f64) -> (f64, Vec<f64>) {
    let mut lp = log_w;
    let mut grad = Vec::with_capacity(x.len());
    for ((xi, m), s) in x.iter().zip(mean).zip(std) {
        let z = (xi - m) / s;
        lp += -0.5 * z * z - s.ln() - 0.5 * LN_2PI;
        grad.push(-z / s);
    }
    (lp, grad)
}

pub(crate) fn logsumexp(it: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = it.collect();
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// The exact energy `-log p` of a target, usable wherever a model is expected.
impl Energy for Target {
    fn manifold(&self) -> Manifold {
        Target::manifold(self)
    }

    fn energy_graph(&self, g: &mut Graph, _params: &[Var], x: Var) -> Var {
        let (rows, _) = g.dims(x);
        let col = |g: &mut Graph, i: usize| g.slice_cols(x, i, 1);
        let gauss = |g: &mut Graph, mean: &[f64], std: &[f64], log_w: f64| -> Var {
            // log_w - sum 0.5 ((x - m)/s)^2 - sum log s - d/2 log 2 pi
            let mut acc: Option<Var> = None;
            let mut c = log_w;
            for (i, (m, s)) in mean.iter().zip(std).enumerate() {
                let xi = g.slice_cols(x, i, 1);
                let z = g.shift(xi, -m);
                let z = g.scale(z, 1.0 / s);
                let z2 = g.square(z);
                let t = g.scale(z2, -0.5);
                acc = Some(match acc {
                    None => t,
                    Some(a) => g.add(a, t),
                });
                c -= s.ln() + 0.5 * LN_2PI;
            }
            let a = acc.expect("non-empty mean");
            g.shift(a, c)
        };
        let log_p = match self {
            Target::Gaussian { mean, std } => gauss(g, mean, std, 0.0),
            Target::GaussianMixture { weights, means, stds } => {
                let terms: Vec<Var> = weights
                    .iter()
                    .zip(means.iter().zip(stds))
                    .map(|(w, (m, s))| gauss(g, m, s, w.ln()))
                    .collect();
                g.logsumexp_cols(&terms)
            }
            Target::Banana | Target::Cosine => {
                let x1 = col(g, 0);
                let x2 = col(g, 1);
                let x1sq = g.square(x1);
                let prior = g.scale(x1sq, -1.0 / 8.0);
                let (mean2, var2, c) = if matches!(self, Target::Banana) {
                    (g.scale(x1sq, 0.25), 1.0, -(2.0f64).ln() - LN_2PI)
                } else {
                    let two = g.scale(x1, 2.0);
                    let v = COSINE_NOISE_STD * COSINE_NOISE_STD;
                    (g.cos(two), v, -(2.0f64).ln() - LN_2PI - COSINE_NOISE_STD.ln())
                };
                let r = g.sub(x2, mean2);
                let r2 = g.square(r);
                let lik = g.scale(r2, -0.5 / var2);
                let s = g.add(prior, lik);
                g.shift(s, c)
            }
            Target::VonMisesMixture { weights, means, kappas } => {
                let terms: Vec<Var> = weights
                    .iter()
                    .zip(means.iter().zip(kappas))
                    .map(|(w, (&mu, &k))| {
                        let dir = g.constant(Tensor::column(vec![k * mu.cos(), k * mu.sin()]));
                        let t = g.matmul(x, dir);
                        g.shift(t, w.ln() - (2.0 * PI).ln() - log_bessel_i0(k))
                    })
                    .collect();
                g.logsumexp_cols(&terms)
            }
            Target::VmfMixture { weights, means, kappas } => {
                let terms: Vec<Var> = weights
                    .iter()
                    .zip(means.iter().zip(kappas))
                    .map(|(w, (mu, &k))| {
                        let dir = g.constant(Tensor::column(vec![k * mu[0], k * mu[1], k * mu[2]]));
                        let t = g.matmul(x, dir);
                        g.shift(t, w.ln() + log_vmf_s2_normalizer(k))
                    })
                    .collect();
                g.logsumexp_cols(&terms)
            }
        };
        debug_assert_eq!(g.dims(log_p), (rows, 1));
        g.neg(log_p)
    }
}
