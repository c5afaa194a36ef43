//! Exact score-matching values used to validate the estimators.

use crate::energy::{grad_energy, Energy};
use crate::error::{Error, Result};
use crate::manifold::ChartBatch;
use crate::rng::RngStream;
use crate::samplers::{kernel_terms, KernelConfig};
use crate::targets::Target;
use crate::tensor::Tensor;

use super::{euclidean_model, grad_graph, run, Built, EstimatorReport, Evaluation, CHUNK};

/// Per sample `1/2 |grad E|^2 - mean_v v' H v` over Gaussian probes `v`.
pub fn exact_sm_hutchinson<E: Energy + ?Sized>(
    x: &Tensor,
    model: &E,
    probes: usize,
    stream: &mut RngStream,
) -> Result<EstimatorReport> {
    if probes == 0 {
        return Err(Error::InvalidArgument("need at least one probe".into()));
    }
    let vs: Vec<Tensor> = (0..probes)
        .map(|_| Tensor::matrix(x.rows(), x.cols(), stream.normals(x.len())).expect("dims"))
        .collect();
    Ok(hutchinson_eval(x, model, &vs, false)?.report)
}

/// Same as [`exact_sm_hutchinson`] with caller-supplied probe blocks.
pub fn exact_sm_hutchinson_with_probes<E: Energy + ?Sized>(
    x: &Tensor,
    model: &E,
    probes: &[Tensor],
    want_grad: bool,
) -> Result<Evaluation> {
    if probes.is_empty() {
        return Err(Error::InvalidArgument("need at least one probe".into()));
    }
    hutchinson_eval(x, model, probes, want_grad)
}

/// Hessian-vector products through nested autodiff. No probes means the
/// coordinate basis, i.e. the exact Laplacian.
pub(crate) fn hutchinson_eval<E: Energy + ?Sized>(
    x: &Tensor,
    model: &E,
    probes: &[Tensor],
    want_grad: bool,
) -> Result<Evaluation> {
    euclidean_model(model, x)?;
    let (b, d) = x.dims();
    if probes.iter().any(|p| p.dims() != (b, d)) {
        return Err(Error::shape("probe blocks must match the batch".to_string()));
    }
    run(model, b, CHUNK, want_grad, |g, p, rows| {
        let n = rows.len();
        let xv = g.leaf(x.slice_rows(rows.start, n));
        let (_, gr) = grad_graph(g, model, p, xv)?;
        let sq = g.row_dot(gr, gr);
        let half = g.scale(sq, 0.5);
        let blocks: Vec<Tensor> = if probes.is_empty() {
            (0..d)
                .map(|i| {
                    let mut t = Tensor::zeros(n, d);
                    (0..n).for_each(|r| t.set(r, i, 1.0));
                    t
                })
                .collect()
        } else {
            probes.iter().map(|v| v.slice_rows(rows.start, n)).collect()
        };
        let weight = if probes.is_empty() {
            1.0
        } else {
            1.0 / probes.len() as f64
        };
        let mut acc = None;
        for v in blocks {
            let vc = g.constant(v);
            let gv = g.row_dot(gr, vc);
            let s = g.sum(gv);
            let hv = g.gradient(s, &[xv])?.remove(0);
            let q = g.row_dot(hv, vc);
            acc = Some(match acc {
                None => q,
                Some(a) => g.add(a, q),
            });
        }
        let acc = acc.expect("at least one probe");
        let lap = g.scale(acc, weight);
        let val = g.sub(half, lap);
        Ok(Built {
            per_sample: val,
            cv: None,
            escaped: 0,
        })
    })
}

/// Per sample `1/2 |grad E|^2 - lap E` with the Laplacian from central
/// differences of the autodiff gradient.
pub fn exact_sm_fd<E: Energy + ?Sized>(x: &Tensor, model: &E, h: f64) -> Result<EstimatorReport> {
    euclidean_model(model, x)?;
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidArgument(format!("stencil must be positive, got {h}")));
    }
    let (b, d) = x.dims();
    let grad = |pts: &Tensor| grad_energy(model, &crate::energy::euclidean_batch(pts), None);
    let g0 = grad(x)?;
    let mut lap = vec![0.0; b];
    for i in 0..d {
        let shifted = |s: f64| {
            let mut t = x.clone();
            (0..b).for_each(|r| t.set(r, i, x.get(r, i) + s));
            t
        };
        let gp = grad(&shifted(h))?;
        let gm = grad(&shifted(-h))?;
        for (r, l) in lap.iter_mut().enumerate() {
            *l += (gp.get(r, i) - gm.get(r, i)) / (2.0 * h);
        }
    }
    let per: Vec<f64> = (0..b)
        .map(|r| 0.5 * g0.row_slice(r).iter().map(|v| v * v).sum::<f64>() - lap[r])
        .collect();
    if per.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("finite-difference oracle".into()));
    }
    Ok(EstimatorReport::from_samples(per, None, 0))
}

/// Target scores and model gradients at `x`, both in the recentered chart of
/// each point (the metric is the identity there).
fn scores_and_grads<E: Energy + ?Sized>(x: &Tensor, target: &Target, model: &E) -> Result<(Tensor, Tensor)> {
    let m = model.manifold();
    if m != target.manifold() {
        return Err(Error::InvalidArgument(format!(
            "target on {:?}, model on {m:?}",
            target.manifold()
        )));
    }
    let batch = ChartBatch::recentered(m, x)?;
    let s = target.score_batch(&batch)?;
    let ge = grad_energy(model, &batch, None)?;
    Ok((s, ge))
}

/// `1/2 mean |score_p + grad E|^2` on samples from `p`.
pub fn fisher_divergence_analytic<E: Energy + ?Sized>(
    x: &Tensor,
    target: &Target,
    model: &E,
) -> Result<EstimatorReport> {
    let (s, ge) = scores_and_grads(x, target, model)?;
    let per = (0..x.rows())
        .map(|r| {
            0.5 * s
                .row_slice(r)
                .iter()
                .zip(ge.row_slice(r))
                .map(|(a, b)| (a + b).powi(2))
                .sum::<f64>()
        })
        .collect();
    Ok(EstimatorReport::from_samples(per, None, 0))
}

/// `|grad E|^2 + 2 score_p . grad E` averaged over `n` fresh draws from `p`:
/// twice the score-matching objective, from first derivatives only.
pub fn sm_reference_value<E: Energy + ?Sized>(
    target: &Target,
    model: &E,
    n: usize,
    stream: &mut RngStream,
) -> Result<EstimatorReport> {
    let x = target.sample(n, stream)?;
    let (s, ge) = scores_and_grads(&x, target, model)?;
    let per = (0..n)
        .map(|r| {
            s.row_slice(r)
                .iter()
                .zip(ge.row_slice(r))
                .map(|(sp, g)| g * g + 2.0 * sp * g)
                .sum::<f64>()
        })
        .collect();
    Ok(EstimatorReport::from_samples(per, None, 0))
}

/// `(1/B^2) sum_ij delta_i' k(x_i, x_j) delta_j` with
/// `delta = grad log q - grad log p = -grad E - score_p`.
pub fn ksd_vstat<E: Energy + ?Sized>(x: &Tensor, target: &Target, model: &E, kcfg: &KernelConfig) -> Result<f64> {
    let (s, ge) = scores_and_grads(x, target, model)?;
    let delta = ge.zip_map(&s, |g, sp| -g - sp)?;
    quad_form(x, &delta, kcfg)
}

fn quad_form(x: &Tensor, v: &Tensor, kcfg: &KernelConfig) -> Result<f64> {
    let kt = kernel_terms(x, kcfg)?;
    let b = x.rows();
    let mut acc = 0.0;
    for i in 0..b {
        for j in 0..b {
            let dot: f64 = v.row_slice(i).iter().zip(v.row_slice(j)).map(|(a, c)| a * c).sum();
            acc += kt.gram.get(j, i) * dot;
        }
    }
    Ok(acc / (b * b) as f64)
}

/// Expected small-step SVGD-MVL value of a batch drawn from `p`, written with
/// kernel quadratic forms: off-diagonal pairs of `KSD(q) - KSD(uniform-score)`
/// (Stein's identity replaces the kernel-gradient term), plus the diagonal
/// `|grad E|^2 / B^2`. Needs a fixed bandwidth for Stein's identity to hold
/// pairwise.
pub fn svgd_ksd_reference<E: Energy + ?Sized>(
    x: &Tensor,
    target: &Target,
    model: &E,
    kcfg: &KernelConfig,
) -> Result<f64> {
    let (s, ge) = scores_and_grads(x, target, model)?;
    let kt = kernel_terms(x, kcfg)?;
    let b = x.rows();
    let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(u, v)| u * v).sum::<f64>();
    let delta = ge.zip_map(&s, |g, sp| g + sp)?;
    let mut acc = 0.0;
    for i in 0..b {
        for j in 0..b {
            if i == j {
                acc += dot(ge.row_slice(i), ge.row_slice(i));
            } else {
                let k = kt.gram.get(j, i);
                acc += k * (dot(delta.row_slice(i), delta.row_slice(j)) - dot(s.row_slice(i), s.row_slice(j)));
            }
        }
    }
    Ok(acc / (b * b) as f64)
}
