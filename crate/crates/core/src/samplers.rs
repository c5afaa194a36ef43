//! One-step transition kernels: Langevin, Riemannian Langevin, SVGD and SPOS.
//!
//! `power` is the exponent `a` of the target `exp(-a E)`. Every kernel draws
//! its standard-normal driver as one `B x dim` block from the stream, so a
//! caller can replay the exact same noise.

use serde::{Deserialize, Serialize};

use crate::energy::{euclidean_batch, grad_energy, Energy};
use crate::error::{Error, Result};
use crate::manifold::{metric_noise_from_driver, riemannian_drift, wrap_angle, ChartBatch, Manifold, THETA_MIN};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct StepOutcome {
    /// New points, in the same charts as the input for manifold kernels.
    pub x_minus: Tensor,
    /// Standard-normal driver; `None` for deterministic kernels.
    pub noise_driver: Option<Tensor>,
    /// The stochastic term actually added (zero for SVGD).
    pub diffusion_increment: Tensor,
    pub escaped: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Fixed(f64),
    Median,
    /// `k == 0`: the kernel drops out of the dynamics entirely.
    Off,
}

/// RBF kernel `k(x, y) = exp(-|x - y|^2 / h)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub bandwidth: Bandwidth,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            bandwidth: Bandwidth::Median,
        }
    }
}

impl KernelConfig {
    pub fn fixed(h: f64) -> Result<Self> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::Bandwidth(format!("fixed bandwidth must be positive, got {h}")));
        }
        Ok(KernelConfig {
            bandwidth: Bandwidth::Fixed(h),
        })
    }

    /// Resolved bandwidth for this batch, or `None` when the kernel is off.
    pub fn resolve(&self, x: &Tensor) -> Result<Option<f64>> {
        match self.bandwidth {
            Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => Ok(Some(h)),
            Bandwidth::Fixed(h) => Err(Error::Bandwidth(format!("fixed bandwidth must be positive, got {h}"))),
            Bandwidth::Median => median_bandwidth(x).map(Some),
            Bandwidth::Off => Ok(None),
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `med^2 / log(B + 1)` with `med` the median pairwise distance.
pub fn median_bandwidth(x: &Tensor) -> Result<f64> {
    let b = x.rows();
    if b < 2 {
        return Err(Error::Bandwidth("median heuristic needs at least two points".into()));
    }
    let mut d = Vec::with_capacity(b * (b - 1) / 2);
    for i in 0..b {
        for j in i + 1..b {
            d.push(sq_dist(x.row_slice(i), x.row_slice(j)).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let med = if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    };
    if !(med > 0.0) {
        return Err(Error::Bandwidth("median pairwise distance is zero".into()));
    }
    Ok(med * med / ((b + 1) as f64).ln())
}

/// Kernel pieces of the SVGD direction, which depend on positions only:
/// the Gram matrix `K[j][i] = k(x_j, x_i)` and the repulsion
/// `(1/B) sum_j grad_{x_j} k(x_j, x_i)` for each `i`.
#[derive(Clone, Debug)]
pub struct KernelTerms {
    pub gram: Tensor,
    pub repulsion: Tensor,
}

pub fn kernel_terms(x: &Tensor, kcfg: &KernelConfig) -> Result<KernelTerms> {
    let (b, d) = x.dims();
    let Some(h) = kcfg.resolve(x)? else {
        return Ok(KernelTerms {
            gram: Tensor::zeros(b, b),
            repulsion: Tensor::zeros(b, d),
        });
    };
    let mut gram = vec![0.0; b * b];
    let mut rep = vec![0.0; b * d];
    for i in 0..b {
        let xi = x.row_slice(i);
        for j in 0..b {
            let xj = x.row_slice(j);
            let k = (-sq_dist(xi, xj) / h).exp();
            gram[j * b + i] = k;
            for c in 0..d {
                rep[i * d + c] += -2.0 * (xj[c] - xi[c]) / h * k;
            }
        }
    }
    rep.iter_mut().for_each(|v| *v /= b as f64);
    Ok(KernelTerms {
        gram: Tensor::matrix(b, b, gram)?,
        repulsion: Tensor::matrix(b, d, rep)?,
    })
}

fn checked_grad<E: Energy + ?Sized>(model: &E, batch: &ChartBatch) -> Result<Tensor> {
    let g = grad_energy(model, batch, None)?;
    if !g.is_finite() {
        return Err(Error::NonFinite("energy gradient".into()));
    }
    Ok(g)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {eps}")));
    }
    Ok(())
}

fn euclidean_only<E: Energy + ?Sized>(model: &E) -> Result<()> {
    if !model.manifold().is_euclidean() {
        return Err(Error::InvalidArgument("kernel needs a Euclidean model".into()));
    }
    Ok(())
}

/// `x- = x - eps a grad E(x) + sqrt(2 eps) Z`.
pub fn langevin_step<E: Energy + ?Sized>(
    x: &Tensor,
    model: &E,
    power: f64,
    eps: f64,
    stream: &mut RngStream,
) -> Result<StepOutcome> {
    let (b, d) = x.dims();
    let driver = Tensor::matrix(b, d, stream.normals(b * d))?;
    langevin_step_with_driver(x, model, power, eps, &driver)
}

pub fn langevin_step_with_driver<E: Energy + ?Sized>(
    x: &Tensor,
    model: &E,
    power: f64,
    eps: f64,
    driver: &Tensor,
) -> Result<StepOutcome> {
    euclidean_only(model)?;
    check_eps(eps)?;
    if driver.dims() != x.dims() {
        return Err(Error::shape("driver must match the batch".to_string()));
    }
    let grad = checked_grad(model, &euclidean_batch(x))?;
    let s = (2.0 * eps).sqrt();
    let incr = driver.scale(s);
    let x_minus = x
        .zip_map(&grad, |xi, gi| xi + eps * (-power * gi))?
        .zip_map(&incr, |a, b| a + b)?;
    Ok(StepOutcome {
        x_minus,
        noise_driver: Some(driver.clone()),
        diffusion_increment: incr,
        escaped: vec![false; x.rows()],
    })
}

/// Riemannian Langevin step in each point's own chart, targeting the
/// Hausdorff density `exp(-a E)`.
pub fn riemannian_langevin_step<E: Energy + ?Sized>(
    batch: &ChartBatch,
    model: &E,
    power: f64,
    eps: f64,
    stream: &mut RngStream,
) -> Result<StepOutcome> {
    let (b, k) = batch.coords.dims();
    let driver = Tensor::matrix(b, k, stream.normals(b * k))?;
    riemannian_langevin_step_with_driver(batch, model, power, eps, &driver)
}

pub fn riemannian_langevin_step_with_driver<E: Energy + ?Sized>(
    batch: &ChartBatch,
    model: &E,
    power: f64,
    eps: f64,
    driver: &Tensor,
) -> Result<StepOutcome> {
    check_eps(eps)?;
    let m = batch.manifold;
    if driver.dims() != batch.coords.dims() {
        return Err(Error::shape("driver must match the batch".to_string()));
    }
    let grad = checked_grad(model, batch)?;
    let (b, k) = batch.coords.dims();
    let s = (2.0 * eps).sqrt();
    let mut out = Vec::with_capacity(b * k);
    let mut incr = Vec::with_capacity(b * k);
    let mut escaped = vec![false; b];
    for i in 0..b {
        let y = batch.point(i);
        let glt: Vec<f64> = grad.row_slice(i).iter().map(|g| -power * g).collect();
        let drift = riemannian_drift(m, &y, &glt)?;
        let z = metric_noise_from_driver(m, &y, driver.row_slice(i))?;
        for c in 0..k {
            let inc = s * z[c];
            let mut v = y.coords[c] + eps * drift[c] + inc;
            if m == Manifold::Circle {
                v = wrap_angle(v);
            }
            out.push(v);
            incr.push(inc);
        }
        if m == Manifold::Sphere {
            let t = out[i * k];
            escaped[i] = !(THETA_MIN < t && t < std::f64::consts::PI - THETA_MIN);
        }
    }
    Ok(StepOutcome {
        x_minus: Tensor::matrix(b, k, out)?,
        noise_driver: Some(driver.clone()),
        diffusion_increment: Tensor::matrix(b, k, incr)?,
        escaped,
    })
}

/// `phi*(x_i) = (1/B) sum_j [-a grad E(x_j) k(x_j, x_i) + grad_{x_j} k(x_j, x_i)]`,
/// the V-form including `j = i`.
pub fn svgd_direction<E: Energy + ?Sized>(x: &Tensor, model: &E, power: f64, kcfg: &KernelConfig) -> Result<Tensor> {
    euclidean_only(model)?;
    if x.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let grad = checked_grad(model, &euclidean_batch(x))?;
    let kt = kernel_terms(x, kcfg)?;
    svgd_from_parts(&grad, &kt, power)
}

fn svgd_from_parts(grad: &Tensor, kt: &KernelTerms, power: f64) -> Result<Tensor> {
    let b = grad.rows() as f64;
    let drive = kt.gram.transpose().matmul(grad)?.scale(-power / b);
    drive.zip_map(&kt.repulsion, |a, r| a + r)
}

/// `x_i- = x_i + eps [phi*(x_i) - alpha a grad E(x_i)] + sqrt(2 alpha eps) Z_i`.
pub fn spos_step<E: Energy + ?Sized>(
    x: &Tensor,
    model: &E,
    power: f64,
    alpha: f64,
    eps: f64,
    kcfg: &KernelConfig,
    stream: &mut RngStream,
) -> Result<StepOutcome> {
    euclidean_only(model)?;
    check_eps(eps)?;
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be non-negative, got {alpha}"
        )));
    }
    let (b, d) = x.dims();
    let grad = checked_grad(model, &euclidean_batch(x))?;
    let kt = kernel_terms(x, kcfg)?;
    let phi = svgd_from_parts(&grad, &kt, power)?;
    let drift = phi.zip_map(&grad, |p, g| p - alpha * power * g)?;
    let (driver, incr) = if alpha > 0.0 {
        let z = Tensor::matrix(b, d, stream.normals(b * d))?;
        let inc = z.scale((2.0 * alpha * eps).sqrt());
        (Some(z), inc)
    } else {
        (None, Tensor::zeros(b, d))
    };
    let x_minus = x.zip_map(&drift, |xi, v| xi + eps * v)?.zip_map(&incr, |a, c| a + c)?;
    Ok(StepOutcome {
        x_minus,
        noise_driver: driver,
        diffusion_increment: incr,
        escaped: vec![false; b],
    })
}

/// Deterministic SVGD step `x + eps phi*(x)`.
pub fn svgd_step<E: Energy + ?Sized>(
    x: &Tensor,
    model: &E,
    power: f64,
    eps: f64,
    kcfg: &KernelConfig,
) -> Result<StepOutcome> {
    check_eps(eps)?;
    let phi = svgd_direction(x, model, power, kcfg)?;
    Ok(StepOutcome {
        x_minus: x.zip_map(&phi, |xi, v| xi + eps * v)?,
        noise_driver: None,
        diffusion_increment: Tensor::zeros(x.rows(), x.cols()),
        escaped: vec![false; x.rows()],
    })
}
