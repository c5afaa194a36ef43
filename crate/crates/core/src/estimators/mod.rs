//! Score-matching estimators built from one sampler step, plus the exact
//! oracles they are checked against.
//!
//! Every sampler-based estimator is written on a common scale: as `eps -> 0`
//! its mean tends to `2 E_p[1/2 |grad E|^2 - lap E]`, twice the classical
//! score-matching objective. The loss is a graph in the model parameters with
//! the noise driver held fixed, so training differentiates through `x-`.

mod bias;
mod oracles;

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::energy::{energy_at_coords, flatten, Energy};
use crate::error::{Error, Result};
use crate::manifold::{metric_eval, metric_noise_from_driver, riemannian_drift, ChartBatch, Manifold, THETA_MIN};
use crate::rng::RngStream;
use crate::samplers::{kernel_terms, langevin_step_with_driver, KernelConfig};
use crate::targets::Target;
use crate::tensor::Tensor;

pub use bias::{bias_variance_report, BiasVarianceRow, BiasVarianceSpec};
pub use oracles::{
    exact_sm_fd, exact_sm_hutchinson, exact_sm_hutchinson_with_probes, fisher_divergence_analytic, ksd_vstat,
    sm_reference_value, svgd_ksd_reference,
};

/// Rows per graph. Chunks are independent, so they run in parallel.
const CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    MvlLangevin,
    MvlRiemannian,
    MvlSvgd,
    MvlSpos,
    Dsm,
    Cd1,
    ExactHutchinson,
    ExactFd,
    FisherAnalytic,
    Ksd,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::MvlLangevin => "mvl_langevin",
            EstimatorKind::MvlRiemannian => "mvl_riemannian",
            EstimatorKind::MvlSvgd => "mvl_svgd",
            EstimatorKind::MvlSpos => "mvl_spos",
            EstimatorKind::Dsm => "dsm",
            EstimatorKind::Cd1 => "cd1",
            EstimatorKind::ExactHutchinson => "exact_hutchinson",
            EstimatorKind::ExactFd => "exact_fd",
            EstimatorKind::FisherAnalytic => "fisher_analytic",
            EstimatorKind::Ksd => "ksd",
        }
    }

    pub fn uses_step(self) -> bool {
        matches!(
            self,
            EstimatorKind::MvlLangevin
                | EstimatorKind::MvlRiemannian
                | EstimatorKind::MvlSvgd
                | EstimatorKind::MvlSpos
                | EstimatorKind::Dsm
                | EstimatorKind::Cd1
        )
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown estimator `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    pub epsilon: f64,
    pub with_cv: bool,
    pub kernel: KernelConfig,
    /// Langevin weight of SPOS.
    pub alpha: f64,
    /// Hutchinson probes; 0 uses coordinate probes (the exact Laplacian).
    pub probes: usize,
    /// Stencil of the finite-difference oracle.
    pub fd_step: f64,
    /// Flips the sign of the Riemannian loss (the literal printed form).
    pub reverse_sign: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            kind: EstimatorKind::MvlLangevin,
            epsilon: 1e-3,
            with_cv: true,
            kernel: KernelConfig::default(),
            alpha: 1.0,
            probes: 1,
            fd_step: 1e-4,
            reverse_sign: false,
        }
    }
}

impl EstimatorConfig {
    pub fn new(kind: EstimatorKind, epsilon: f64, with_cv: bool) -> Self {
        EstimatorConfig {
            kind,
            epsilon,
            with_cv,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.uses_step() && !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if self.kind == EstimatorKind::ExactFd && !(self.fd_step > 0.0) {
            return Err(Error::Config(format!("fd_step must be positive, got {}", self.fd_step)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorReport {
    pub value: f64,
    pub per_sample: Vec<f64>,
    pub std_err: f64,
    /// Mean of the control-variate term alone (0 without one).
    pub cv_contribution: f64,
    pub escaped_count: usize,
}

impl EstimatorReport {
    pub fn from_samples(per_sample: Vec<f64>, cv: Option<&[f64]>, escaped_count: usize) -> Self {
        let (value, std_err) = mean_and_stderr(&per_sample);
        let cv_contribution = cv.map_or(0.0, |c| c.iter().sum::<f64>() / c.len().max(1) as f64);
        EstimatorReport {
            value,
            per_sample,
            std_err,
            cv_contribution,
            escaped_count,
        }
    }

    /// Sample variance of the per-sample values.
    pub fn variance(&self) -> f64 {
        let n = self.per_sample.len();
        if n < 2 {
            return 0.0;
        }
        self.per_sample.iter().map(|v| (v - self.value).powi(2)).sum::<f64>() / (n - 1) as f64
    }
}

pub(crate) fn mean_and_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

/// A loss and, optionally, the gradient of its mean in the flat parameter
/// order of the model.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EstimatorReport,
    pub grad: Option<Vec<f64>>,
}

struct Built {
    per_sample: Var,
    cv: Option<Var>,
    escaped: usize,
}

struct Piece {
    per_sample: Vec<f64>,
    cv: Option<Vec<f64>>,
    escaped: usize,
    grad: Option<Vec<f64>>,
}

/// Builds one graph per chunk of rows and merges them in order.
fn run<E, F>(model: &E, n: usize, chunk: usize, want_grad: bool, build: F) -> Result<Evaluation>
where
    E: Energy + ?Sized,
    F: Fn(&mut Graph, &[Var], Range<usize>) -> Result<Built> + Sync,
{
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let starts: Vec<usize> = (0..n).step_by(chunk.max(1)).collect();
    let pieces: Vec<Piece> = starts
        .par_iter()
        .map(|&s| {
            let rows = s..(s + chunk).min(n);
            let mut g = Graph::new();
            let params = model.bind(&mut g);
            let b = build(&mut g, &params, rows)?;
            let per_sample = g.value(b.per_sample).values().to_vec();
            if per_sample.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("estimator value".into()));
            }
            let cv = b.cv.map(|c| g.value(c).values().to_vec());
            let grad = if want_grad {
                if params.is_empty() {
                    Some(Vec::new())
                } else {
                    let tot = g.sum(b.per_sample);
                    let tot = g.scale(tot, 1.0 / n as f64);
                    Some(flatten(&g.gradient_values(tot, &params)?))
                }
            } else {
                None
            };
            Ok(Piece {
                per_sample,
                cv,
                escaped: b.escaped,
                grad,
            })
        })
        .collect::<Result<_>>()?;

    let mut per_sample = Vec::with_capacity(n);
    let mut cv: Option<Vec<f64>> = None;
    let mut escaped = 0;
    let mut grad: Option<Vec<f64>> = None;
    for p in pieces {
        per_sample.extend(p.per_sample);
        if let Some(c) = p.cv {
            cv.get_or_insert_with(Vec::new).extend(c);
        }
        escaped += p.escaped;
        if let Some(gp) = p.grad {
            match &mut grad {
                None => grad = Some(gp),
                Some(acc) => acc.iter_mut().zip(gp).for_each(|(a, b)| *a += b),
            }
        }
    }
    if let Some(g) = &grad {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter gradient".into()));
        }
    }
    Ok(Evaluation {
        report: EstimatorReport::from_samples(per_sample, cv.as_deref(), escaped),
        grad,
    })
}

fn euclidean_model<E: Energy + ?Sized>(model: &E, x: &Tensor) -> Result<()> {
    let m = model.manifold();
    if !m.is_euclidean() || model.condition_width() > 0 {
        return Err(Error::InvalidArgument(format!(
            "estimator needs an unconditional Euclidean model, got {m:?}"
        )));
    }
    if x.cols() != m.dim() {
        return Err(Error::shape(format!(
            "batch has width {}, model needs {}",
            x.cols(),
            m.dim()
        )));
    }
    Ok(())
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {eps}")));
    }
    Ok(())
}

/// `grad_x E` as a graph, for a leaf `x`.
pub(crate) fn grad_graph<E: Energy + ?Sized>(g: &mut Graph, model: &E, params: &[Var], x: Var) -> Result<(Var, Var)> {
    let e = model.energy_graph(g, params, x);
    let tot = g.sum(e);
    let gr = g.gradient(tot, &[x])?.remove(0);
    Ok((e, gr))
}

fn draw(stream: &mut RngStream, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, stream.normals(rows * cols)).expect("dims")
}

// ---------------------------------------------------------------------------
// Langevin MVL

/// Per sample `(2/eps)(E(x) - E(x-))` with `x-` one Langevin step towards
/// `exp(-E/2)`; the control variate adds `2 sqrt(2/eps) <Z, grad E(x)>`.
pub fn mvl_langevin_loss<E: Energy + ?Sized>(
    x: &Tensor,
    model: &E,
    eps: f64,
    with_cv: bool,
    stream: &mut RngStream,
) -> Result<EstimatorReport> {
    let z = draw(stream, x.rows(), x.cols());
    Ok(mvl_langevin_eval(x, model, eps, with_cv, &z, false)?.report)
}

pub fn mvl_langevin_eval<E: Energy + ?Sized>(
    x: &Tensor,
    model: &E,
    eps: f64,
    with_cv: bool,
    driver: &Tensor,
    want_grad: bool,
) -> Result<Evaluation> {
    spos_eval_inner(x, model, None, 1.0, eps, with_cv, driver, want_grad)
}

// ---------------------------------------------------------------------------
// SVGD / SPOS MVL

/// SVGD-MVL: deterministic step, so no control variate.
pub fn mvl_svgd_loss<E: Energy + ?Sized>(
    x: &Tensor,
    model: &E,
    kcfg: &KernelConfig,
    eps: f64,
) -> Result<EstimatorReport> {
    Ok(mvl_svgd_eval(x, model, kcfg, eps, false)?.report)
}

pub fn mvl_svgd_eval<E: Energy + ?Sized>(
    x: &Tensor,
    model: &E,
    kcfg: &KernelConfig,
    eps: f64,
    want_grad: bool,
) -> Result<Evaluation> {
    let z = Tensor::zeros(x.rows(), x.cols());
    spos_eval_inner(x, model, Some(kcfg), 0.0, eps, false, &z, want_grad)
}

/// SPOS-MVL: `x- = x + eps[phi* - alpha grad E / 2] + sqrt(2 alpha eps) Z`;
/// the control variate adds `2 sqrt(2 alpha / eps) <Z, grad E(x)>`.
pub fn mvl_spos_loss<E: Energy + ?Sized>(
    x: &Tensor,
    model: &E,
    kcfg: &KernelConfig,
    alpha: f64,
    eps: f64,
    with_cv: bool,
    stream: &mut RngStream,
) -> Result<EstimatorReport> {
    let z = if alpha > 0.0 {
        draw(stream, x.rows(), x.cols())
    } else {
        Tensor::zeros(x.rows(), x.cols())
    };
    Ok(mvl_spos_eval(x, model, kcfg, alpha, eps, with_cv, &z, false)?.report)
}

#[allow(clippy::too_many_arguments)]
pub fn mvl_spos_eval<E: Energy + ?Sized>(
    x: &Tensor,
    model: &E,
    kcfg: &KernelConfig,
    alpha: f64,
    eps: f64,
    with_cv: bool,
    driver: &Tensor,
    want_grad: bool,
) -> Result<Evaluation> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be non-negative, got {alpha}"
        )));
    }
    spos_eval_inner(x, model, Some(kcfg), alpha, eps, with_cv, driver, want_grad)
}

/// Shared body of the Langevin, SVGD and SPOS losses. `kcfg = None` drops the
/// kernel part (plain Langevin with weight `alpha`).
#[allow(clippy::too_many_arguments)]
fn spos_eval_inner<E: Energy + ?Sized>(
    x: &Tensor,
    model: &E,
    kcfg: Option<&KernelConfig>,
    alpha: f64,
    eps: f64,
    with_cv: bool,
    driver: &Tensor,
    want_grad: bool,
) -> Result<Evaluation> {
    euclidean_model(model, x)?;
    check_eps(eps)?;
    if driver.dims() != x.dims() {
        return Err(Error::shape("driver must match the batch".to_string()));
    }
    let power = 0.5;
    let b = x.rows();
    let kernel = match kcfg {
        Some(k) => Some(kernel_terms(x, k)?),
        None => None,
    };
    // the kernel couples all rows, so keep them in one graph
    let chunk = if kernel.is_some() { b } else { CHUNK };
    let noise_scale = (2.0 * alpha * eps).sqrt();
    let with_cv = with_cv && alpha > 0.0;
    run(model, b, chunk, want_grad, |g, p, rows| {
        let xs = x.slice_rows(rows.start, rows.len());
        let zs = driver.slice_rows(rows.start, rows.len());
        let xv = g.leaf(xs);
        let (e0, gr) = grad_graph(g, model, p, xv)?;
        // velocity v with x- = x + eps v + noise
        let lang = g.scale(gr, -alpha * power);
        let v = match &kernel {
            Some(kt) => {
                let kt_t = g.constant(kt.gram.transpose());
                let drive = g.matmul(kt_t, gr);
                let drive = g.scale(drive, -power / b as f64);
                let rep = g.constant(kt.repulsion.clone());
                let phi = g.add(drive, rep);
                g.add(phi, lang)
            }
            None => lang,
        };
        let step = g.scale(v, eps);
        let mut xm = g.add(xv, step);
        if alpha > 0.0 {
            let inc = g.constant(zs.scale(noise_scale));
            xm = g.add(xm, inc);
        }
        let e1 = model.energy_graph(g, p, xm);
        let d = g.sub(e0, e1);
        let mut val = g.scale(d, 2.0 / eps);
        let mut cv = None;
        if with_cv {
            let zc = g.constant(zs);
            let dot = g.row_dot(zc, gr);
            let c = g.scale(dot, 2.0 * (2.0 * alpha / eps).sqrt());
            val = g.add(val, c);
            cv = Some(c);
        }
        Ok(Built {
            per_sample: val,
            cv,
            escaped: 0,
        })
    })
}

// ---------------------------------------------------------------------------
// Riemannian MVL

/// Riemannian MVL in each point's own chart: per sample
/// `(2/eps)(E(y) - E(y-)) + 2 sqrt(2/eps) dE(y) . z` with `z ~ N(0, G^-1)`.
/// A step that leaves the chart domain contributes `E(y-) = 0` and is counted.
pub fn mvl_riemannian_loss<E: Energy + ?Sized>(
    batch: &ChartBatch,
    model: &E,
    eps: f64,
    with_cv: bool,
    stream: &mut RngStream,
) -> Result<EstimatorReport> {
    let z = draw(stream, batch.len(), batch.manifold.dim());
    Ok(mvl_riemannian_eval(batch, None, model, eps, with_cv, &z, false)?.report)
}

/// Riemannian MVL with an optional conditioning input (one row per point).
/// On Euclidean space the metric is the identity and this is the Langevin
/// loss, which makes it the conditional Euclidean variant as well.
pub fn mvl_riemannian_eval<E: Energy + ?Sized>(
    batch: &ChartBatch,
    condition: Option<&Tensor>,
    model: &E,
    eps: f64,
    with_cv: bool,
    driver: &Tensor,
    want_grad: bool,
) -> Result<Evaluation> {
    check_eps(eps)?;
    let m = batch.manifold;
    if m != model.manifold() {
        return Err(Error::InvalidArgument(format!(
            "batch on {m:?}, model on {:?}",
            model.manifold()
        )));
    }
    match (condition, model.condition_width()) {
        (None, 0) => {}
        (Some(c), w) if w > 0 && c.cols() == w && c.rows() == batch.len() => {}
        _ => return Err(Error::shape("condition does not match the model".to_string())),
    }
    let (b, k) = batch.coords.dims();
    if driver.dims() != (b, k) {
        return Err(Error::shape("driver must match the batch".to_string()));
    }
    // metric pieces depend on the chart position only
    let mut ginv = Vec::with_capacity(b * k);
    let mut offset = Vec::with_capacity(b * k);
    let mut z = Vec::with_capacity(b * k);
    for i in 0..b {
        let y = batch.point(i);
        let me = metric_eval(m, &y)?;
        ginv.extend((0..k).map(|c| me.g_inv.get(c, c)));
        offset.extend(riemannian_drift(m, &y, &vec![0.0; k])?.into_iter().map(|v| eps * v));
        z.extend(metric_noise_from_driver(m, &y, driver.row_slice(i))?);
    }
    let ginv = Tensor::matrix(b, k, ginv)?;
    let offset = Tensor::matrix(b, k, offset)?;
    let z = Tensor::matrix(b, k, z)?;
    let power = 0.5;
    let s = (2.0 * eps).sqrt();
    run(model, b, CHUNK, want_grad, |g, p, rows| {
        let (r0, n) = (rows.start, rows.len());
        let charts = &batch.charts[rows.clone()];
        let yv = g.leaf(batch.coords.slice_rows(r0, n));
        let cond = condition.map(|c| g.constant(c.slice_rows(r0, n)));
        let e0 = energy_at_coords(g, model, p, charts, yv, cond);
        let tot = g.sum(e0);
        let gr = g.gradient(tot, &[yv])?.remove(0);
        let gi = g.constant(ginv.slice_rows(r0, n));
        let nat = g.mul(gi, gr);
        let step = g.scale(nat, -eps * power);
        let zs = z.slice_rows(r0, n);
        let fixed = g.constant(offset.slice_rows(r0, n).zip_map(&zs, |o, zz| o + s * zz)?);
        let ym = g.add(yv, step);
        let ym = g.add(ym, fixed);
        // escape test on the numeric step
        let mut mask = vec![1.0; n];
        let mut escaped = 0;
        if m == Manifold::Sphere {
            let vals = g.value(ym).clone();
            for (i, mk) in mask.iter_mut().enumerate() {
                let t = vals.get(i, 0);
                if !(THETA_MIN < t && t < std::f64::consts::PI - THETA_MIN) {
                    *mk = 0.0;
                    escaped += 1;
                }
            }
        }
        let e1 = energy_at_coords(g, model, p, charts, ym, cond);
        let e1 = if escaped > 0 {
            let mv = g.constant(Tensor::column(mask));
            g.mul(e1, mv)
        } else {
            e1
        };
        let d = g.sub(e0, e1);
        let mut val = g.scale(d, 2.0 / eps);
        let mut cv = None;
        if with_cv {
            let zc = g.constant(zs);
            let dot = g.row_dot(zc, gr);
            let c = g.scale(dot, 2.0 * (2.0 / eps).sqrt());
            val = g.add(val, c);
            cv = Some(c);
        }
        Ok(Built {
            per_sample: val,
            cv,
            escaped,
        })
    })
}

// ---------------------------------------------------------------------------
// DSM

/// Denoising score matching at noise variance `eps`, rescaled by `1/eps^2`.
///
/// The raw loss is `|sqrt(eps) Z - eps grad E(x + sqrt(eps) Z)|^2`. Its
/// parameter-free part `eps |Z|^2` is always removed; the control variate also
/// removes `-2 eps^{3/2} <Z, grad E(x)>`, whose mean is zero.
pub fn dsm_loss<E: Energy + ?Sized>(
    x: &Tensor,
    model: &E,
    eps: f64,
    with_cv: bool,
    stream: &mut RngStream,
) -> Result<EstimatorReport> {
    let z = draw(stream, x.rows(), x.cols());
    Ok(dsm_eval(x, model, eps, with_cv, &z, false)?.report)
}

pub fn dsm_eval<E: Energy + ?Sized>(
    x: &Tensor,
    model: &E,
    eps: f64,
    with_cv: bool,
    driver: &Tensor,
    want_grad: bool,
) -> Result<Evaluation> {
    euclidean_model(model, x)?;
    check_eps(eps)?;
    if driver.dims() != x.dims() {
        return Err(Error::shape("driver must match the batch".to_string()));
    }
    let se = eps.sqrt();
    run(model, x.rows(), CHUNK, want_grad, |g, p, rows| {
        let xs = x.slice_rows(rows.start, rows.len());
        let zs = driver.slice_rows(rows.start, rows.len());
        let noisy = g.leaf(xs.zip_map(&zs, |a, z| a + se * z)?);
        let (_, gn) = grad_graph(g, model, p, noisy)?;
        let sz = g.constant(zs.scale(se));
        let eg = g.scale(gn, eps);
        let r = g.sub(sz, eg);
        let raw = g.row_dot(r, r);
        // eps |Z|^2, computed exactly as in `raw`
        let zzc = g.row_dot(sz, sz);
        let base = g.sub(raw, zzc);
        let mut val = g.scale(base, 1.0 / (eps * eps));
        let mut cv = None;
        if with_cv {
            let xv = g.leaf(xs);
            let (_, g0) = grad_graph(g, model, p, xv)?;
            let zc = g.constant(zs);
            let dot = g.row_dot(zc, g0);
            // + 2 eps^{3/2} <Z, grad E(x)> / eps^2
            let c = g.scale(dot, 2.0 / se);
            val = g.add(val, c);
            cv = Some(c);
        }
        Ok(Built {
            per_sample: val,
            cv,
            escaped: 0,
        })
    })
}

// ---------------------------------------------------------------------------
// CD-1

/// Contrastive divergence with one Langevin step towards `exp(-E)`; `x-` is a
/// constant. Returns the parameter gradient
/// `(1/eps) mean[d_theta E(x) - d_theta E(x-)]`, plus with the control variate
/// `(1/eps) mean[sqrt(2 eps) d_theta <Z, grad E(x)>]`.
pub fn cd1_param_grad<E: Energy + ?Sized>(
    x: &Tensor,
    model: &E,
    eps: f64,
    with_cv: bool,
    stream: &mut RngStream,
) -> Result<Vec<f64>> {
    let z = draw(stream, x.rows(), x.cols());
    cd1_eval(x, model, eps, with_cv, &z)
}

pub fn cd1_eval<E: Energy + ?Sized>(
    x: &Tensor,
    model: &E,
    eps: f64,
    with_cv: bool,
    driver: &Tensor,
) -> Result<Vec<f64>> {
    euclidean_model(model, x)?;
    check_eps(eps)?;
    let neg = langevin_step_with_driver(x, model, 1.0, eps, driver)?.x_minus;
    let c = (2.0 * eps).sqrt() / eps;
    let ev = run(model, x.rows(), CHUNK, true, |g, p, rows| {
        let xs = x.slice_rows(rows.start, rows.len());
        let xc = g.leaf(xs);
        let nc = g.constant(neg.slice_rows(rows.start, rows.len()));
        let e0 = model.energy_graph(g, p, xc);
        let e1 = model.energy_graph(g, p, nc);
        let d = g.sub(e0, e1);
        let mut val = g.scale(d, 1.0 / eps);
        let mut cv = None;
        if with_cv {
            let tot = g.sum(e0);
            let gr = g.gradient(tot, &[xc])?.remove(0);
            let zc = g.constant(driver.slice_rows(rows.start, rows.len()));
            let dot = g.row_dot(zc, gr);
            let t = g.scale(dot, c);
            val = g.add(val, t);
            cv = Some(t);
        }
        Ok(Built {
            per_sample: val,
            cv,
            escaped: 0,
        })
    })?;
    Ok(ev.grad.expect("gradient requested"))
}

// ---------------------------------------------------------------------------
// dispatch

/// Inputs an estimator may need beyond the batch.
#[derive(Clone, Copy, Default)]
pub struct EvalContext<'a> {
    /// Conditioning rows for conditional models.
    pub condition: Option<&'a Tensor>,
    /// Analytic target for the oracles that need its score.
    pub target: Option<&'a Target>,
}

/// Evaluates the configured estimator on ambient points `x`. Manifold batches
/// are recentered so every point starts in its own chart.
pub fn evaluate<E: Energy + ?Sized>(
    cfg: &EstimatorConfig,
    model: &E,
    x: &Tensor,
    ctx: EvalContext<'_>,
    stream: &mut RngStream,
    want_grad: bool,
) -> Result<Evaluation> {
    cfg.validate()?;
    let (b, d) = x.dims();
    let no_grad = |report: EstimatorReport| -> Result<Evaluation> {
        if want_grad {
            return Err(Error::Unsupported(format!(
                "{} is not differentiable here",
                cfg.kind.name()
            )));
        }
        Ok(Evaluation { report, grad: None })
    };
    let need_target = || {
        ctx.target
            .ok_or_else(|| Error::InvalidArgument(format!("{} needs an analytic target", cfg.kind.name())))
    };
    match cfg.kind {
        EstimatorKind::MvlLangevin => {
            let z = draw(stream, b, d);
            mvl_langevin_eval(x, model, cfg.epsilon, cfg.with_cv, &z, want_grad)
        }
        EstimatorKind::MvlRiemannian => {
            let batch = ChartBatch::recentered(model.manifold(), x)?;
            let z = draw(stream, b, batch.manifold.dim());
            let mut ev = mvl_riemannian_eval(&batch, ctx.condition, model, cfg.epsilon, cfg.with_cv, &z, want_grad)?;
            if cfg.reverse_sign {
                ev.report.per_sample.iter_mut().for_each(|v| *v = -*v);
                ev.report.value = -ev.report.value;
                ev.report.cv_contribution = -ev.report.cv_contribution;
                if let Some(gr) = &mut ev.grad {
                    gr.iter_mut().for_each(|v| *v = -*v);
                }
            }
            Ok(ev)
        }
        EstimatorKind::MvlSvgd => mvl_svgd_eval(x, model, &cfg.kernel, cfg.epsilon, want_grad),
        EstimatorKind::MvlSpos => {
            let z = draw(stream, b, d);
            mvl_spos_eval(
                x,
                model,
                &cfg.kernel,
                cfg.alpha,
                cfg.epsilon,
                cfg.with_cv,
                &z,
                want_grad,
            )
        }
        EstimatorKind::Dsm => {
            let z = draw(stream, b, d);
            dsm_eval(x, model, cfg.epsilon, cfg.with_cv, &z, want_grad)
        }
        EstimatorKind::Cd1 => {
            let z = draw(stream, b, d);
            let grad = cd1_eval(x, model, cfg.epsilon, cfg.with_cv, &z)?;
            // the rule is a gradient, not a loss; report the exact objective
            // alongside so monitoring has a value
            let report = oracles::hutchinson_eval(x, model, &[], false)?.report;
            Ok(Evaluation {
                report,
                grad: Some(grad),
            })
        }
        EstimatorKind::ExactHutchinson => {
            let probes: Vec<Tensor> = (0..cfg.probes).map(|_| draw(stream, b, d)).collect();
            oracles::hutchinson_eval(x, model, &probes, want_grad)
        }
        EstimatorKind::ExactFd => no_grad(exact_sm_fd(x, model, cfg.fd_step)?),
        EstimatorKind::FisherAnalytic => no_grad(fisher_divergence_analytic(x, need_target()?, model)?),
        EstimatorKind::Ksd => {
            let v = ksd_vstat(x, need_target()?, model, &cfg.kernel)?;
            no_grad(EstimatorReport::from_samples(vec![v], None, 0))
        }
    }
}

#[cfg(test)]
mod tests;
