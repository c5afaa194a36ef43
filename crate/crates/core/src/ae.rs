//! Toy implicit VAE and KL-penalized WAE with a manifold latent space.
//!
//! The encoder is an [`ImplicitSampler`] conditioned on the data point. Its
//! entropy (VAE: conditional, WAE: aggregated) has no density, so its gradient
//! comes from a score model fitted with the MVL loss between AE updates.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::energy::{flatten, grad_energy, EnergyModel, Parameterization};
use crate::entropy::{ambient_score, ImplicitSampler};
use crate::error::{Error, Result};
use crate::estimators::{mvl_riemannian_eval, EstimatorConfig, EstimatorKind};
use crate::manifold::{ChartBatch, Manifold};
use crate::nn::{Activation, Architecture, MlpSpec};
use crate::rng::RngStream;
use crate::targets::{log_bessel_i0, Target};
use crate::tensor::Tensor;
use crate::trainer::{Optimizer, OptimizerKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AeMode {
    ImplicitVae,
    WaeKl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AEConfig {
    pub mode: AeMode,
    pub latent: Manifold,
    /// Prior on the latent space; only its score is used in training.
    pub prior: Target,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub score_hidden: Vec<usize>,
    pub activation: Activation,
    pub noise_width: usize,
    /// WAE penalty weight.
    pub lambda: f64,
    pub n_score_steps: usize,
    /// Step size and control variate of the score model's MVL loss.
    pub score_objective: EstimatorConfig,
    pub score_learning_rate: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Evaluate the fixed monitoring set every this many iterations.
    pub eval_every: usize,
    pub eval_size: usize,
    /// Concentration of the von Mises kernel smoothing the aggregated posterior.
    pub kde_kappa: f64,
}

impl Default for AEConfig {
    fn default() -> Self {
        AEConfig {
            mode: AeMode::ImplicitVae,
            latent: Manifold::Circle,
            prior: Target::uniform_circle(),
            encoder_hidden: vec![32, 32],
            decoder_hidden: vec![32, 32],
            score_hidden: vec![32, 32],
            activation: Activation::Swish,
            noise_width: 2,
            lambda: 1.0,
            n_score_steps: 3,
            score_objective: EstimatorConfig::new(EstimatorKind::MvlRiemannian, 1e-3, true),
            score_learning_rate: 1e-3,
            batch_size: 100,
            learning_rate: 1e-3,
            iterations: 1000,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            eval_every: 50,
            eval_size: 500,
            kde_kappa: 30.0,
        }
    }
}

impl AEConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.prior.manifold() != self.latent {
            return Err(Error::Config(format!(
                "prior lives on {:?}, latent space is {:?}",
                self.prior.manifold(),
                self.latent
            )));
        }
        if matches!(self.latent, Manifold::Sphere) {
            return Err(Error::Config(
                "the autoencoder supports circle or Euclidean latents".into(),
            ));
        }
        if self.score_objective.kind != EstimatorKind::MvlRiemannian {
            return Err(Error::Config("the score model is trained with mvl_riemannian".into()));
        }
        self.score_objective.validate()?;
        if self.batch_size == 0 || self.noise_width == 0 || self.eval_every == 0 || self.eval_size == 0 {
            return Err(Error::Config(
                "batch_size, noise_width, eval_every and eval_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.score_learning_rate > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.kde_kappa > 0.0) {
            return Err(Error::Config("kde_kappa must be positive".into()));
        }
        Ok(())
    }
}

/// Eight Gaussians of std 0.1 evenly placed on the radius-2 circle.
pub fn ring_mixture() -> Target {
    let means = (0..8)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / 8.0;
            vec![2.0 * a.cos(), 2.0 * a.sin()]
        })
        .collect();
    Target::gaussian_mixture(vec![0.125; 8], means, vec![vec![0.1, 0.1]; 8]).expect("valid mixture")
}

/// Score of the encoder's distribution at chart points, in recentered charts.
/// The second argument is the conditioning data row block (VAE) or `None`.
pub type ScoreFn<'a> = dyn Fn(&ChartBatch, Option<&Tensor>) -> Result<Tensor> + 'a;

/// `-grad E` of a score model, conditional when the model takes a condition.
pub fn model_score(model: &EnergyModel) -> impl Fn(&ChartBatch, Option<&Tensor>) -> Result<Tensor> + '_ {
    move |b: &ChartBatch, c: Option<&Tensor>| {
        let c = if model.cond_width > 0 { c } else { None };
        Ok(grad_energy(model, b, c)?.scale(-1.0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AeGrads {
    pub encoder: Vec<f64>,
    pub decoder: Vec<f64>,
    /// Minibatch mean of `|x - G(z)|^2`.
    pub recon: f64,
}

/// Shared surrogate: `recon_weight * mean |x - G(z)|^2 + w * mean <v_q - v_p, z>`
/// where `v_*` are pulled-back scores held fixed.
#[allow(clippy::too_many_arguments)]
fn surrogate_grads(
    x: &Tensor,
    noise: &Tensor,
    encoder: &ImplicitSampler,
    decoder: &MlpSpec,
    score: &ScoreFn<'_>,
    score_conditional: bool,
    prior: &Target,
    recon_weight: f64,
    penalty_weight: f64,
) -> Result<AeGrads> {
    let n = x.rows();
    if n == 0 || noise.rows() != n {
        return Err(Error::shape(format!("{n} data rows, {} noise rows", noise.rows())));
    }
    let z = encoder.push(noise, Some(x))?;
    let v = if penalty_weight != 0.0 {
        let batch = ChartBatch::recentered(encoder.manifold, &z)?;
        let sq = score(&batch, if score_conditional { Some(x) } else { None })?;
        let sp = prior.score_batch(&batch)?;
        let diff = sq.zip_map(&sp, |a, b| a - b)?;
        Some(ambient_score(&batch, &diff)?)
    } else {
        None
    };

    let mut g = Graph::new();
    let be = encoder.bind(&mut g);
    let bd = decoder.bind(&mut g);
    let nv = g.constant(noise.clone());
    let xv = g.constant(x.clone());
    let zv = encoder.pushforward_graph(&mut g, &be, nv, Some(xv));
    let xhat = decoder.forward_graph(&mut g, &bd, zv);
    let r = g.sub(xv, xhat);
    let rr = g.row_dot(r, r);
    let mse = g.mean(rr);
    let recon = g.value(mse).item();
    let mut obj = g.scale(mse, recon_weight);
    if let Some(v) = v {
        let vc = g.constant(v);
        let d = g.row_dot(zv, vc);
        let m = g.mean(d);
        let pen = g.scale(m, penalty_weight);
        obj = g.add(obj, pen);
    }
    let ge = flatten(&g.gradient_values(obj, &be.vars)?);
    let gd = flatten(&g.gradient_values(obj, &bd.vars)?);
    if !recon.is_finite() || ge.iter().chain(&gd).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("autoencoder gradient".into()));
    }
    Ok(AeGrads {
        encoder: ge,
        decoder: gd,
        recon,
    })
}

/// Gradient of the negative ELBO with unit-scale Gaussian decoder:
/// `E_q[1/2 |x - G(z)|^2 - log p(z)] - H[q(z|x)]`, the entropy part coming
/// from the conditional score.
pub fn elbo_surrogate_grad_with_noise(
    x: &Tensor,
    noise: &Tensor,
    encoder: &ImplicitSampler,
    decoder: &MlpSpec,
    score: &ScoreFn<'_>,
    prior: &Target,
) -> Result<AeGrads> {
    surrogate_grads(x, noise, encoder, decoder, score, true, prior, 0.5, 1.0)
}

pub fn elbo_surrogate_grad(
    x: &Tensor,
    encoder: &ImplicitSampler,
    decoder: &MlpSpec,
    score: &ScoreFn<'_>,
    prior: &Target,
    stream: &mut RngStream,
) -> Result<AeGrads> {
    let noise = encoder.draw_noise(x.rows(), Some(x), stream)?;
    elbo_surrogate_grad_with_noise(x, &noise, encoder, decoder, score, prior)
}

/// Gradient of `mean |x - G(z)|^2 + lambda KL(q_agg || p)`. With `lambda = 0`
/// the score is never queried.
#[allow(clippy::too_many_arguments)]
pub fn wae_loss_grad_with_noise(
    x: &Tensor,
    noise: &Tensor,
    encoder: &ImplicitSampler,
    decoder: &MlpSpec,
    score: &ScoreFn<'_>,
    prior: &Target,
    lambda: f64,
) -> Result<AeGrads> {
    surrogate_grads(x, noise, encoder, decoder, score, false, prior, 1.0, lambda)
}

pub fn wae_loss_grad(
    x: &Tensor,
    encoder: &ImplicitSampler,
    decoder: &MlpSpec,
    score: &ScoreFn<'_>,
    prior: &Target,
    lambda: f64,
    stream: &mut RngStream,
) -> Result<AeGrads> {
    let noise = encoder.draw_noise(x.rows(), Some(x), stream)?;
    wae_loss_grad_with_noise(x, &noise, encoder, decoder, score, prior, lambda)
}

/// Von Mises kernel density of circle points (ambient rows), as a closure in
/// the angle.
pub fn circle_kde(points: &Tensor, kappa: f64) -> impl Fn(f64) -> f64 {
    let angles: Vec<f64> = (0..points.rows())
        .map(|r| points.get(r, 1).atan2(points.get(r, 0)))
        .collect();
    let log_norm = (2.0 * PI).ln() + log_bessel_i0(kappa);
    move |a: f64| {
        let s: f64 = angles.iter().map(|m| (kappa * ((a - m).cos() - 1.0)).exp()).sum();
        s / angles.len() as f64 * (kappa - log_norm).exp()
    }
}

/// Entropy and `KL(q || prior)` of a circle density by midpoint quadrature.
pub fn circle_entropy_kl(q: impl Fn(f64) -> f64, prior: &Target, nodes: usize) -> (f64, f64) {
    let h = 2.0 * PI / nodes as f64;
    let (mut ent, mut kl) = (0.0, 0.0);
    for i in 0..nodes {
        let a = -PI + (i as f64 + 0.5) * h;
        let qa = q(a);
        if qa > 0.0 {
            let lq = qa.ln();
            ent -= h * qa * lq;
            kl += h * qa * (lq - prior.log_density(&[a.cos(), a.sin()]));
        }
    }
    (ent, kl)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AeEval {
    pub iteration: usize,
    /// `mean |x - G(z)|^2` on the monitoring set with fixed noise.
    pub recon: f64,
    /// Quadrature entropy of the smoothed aggregated posterior (circle latents).
    pub entropy: Option<f64>,
    pub kl: Option<f64>,
    /// Score-model MVL loss on monitoring encoder samples.
    pub score_loss: f64,
    /// Mean squared gap between the model score and the smoothed aggregated
    /// posterior's score (circle WAE only).
    pub fisher_gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AeHistory {
    /// Minibatch reconstruction error per iteration.
    pub recon: Vec<f64>,
    /// Monitoring evaluations, starting with iteration 0 (initialization).
    pub evals: Vec<AeEval>,
    /// AE updates made without a score refresh (n_score_steps = 0).
    pub stale_score_steps: usize,
}

impl AeHistory {
    pub const CSV_HEADER: [&'static str; 4] = ["iteration", "recon", "entropy_term", "kl_term"];

    /// One row per monitoring evaluation.
    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.10e}")).unwrap_or_default();
        self.evals
            .iter()
            .map(|e| {
                vec![
                    e.iteration.to_string(),
                    format!("{:.10e}", e.recon),
                    opt(e.entropy),
                    opt(e.kl),
                ]
            })
            .collect()
    }

    pub fn initial_recon(&self) -> f64 {
        self.evals.first().map_or(f64::NAN, |e| e.recon)
    }

    pub fn final_recon(&self) -> f64 {
        self.evals.last().map_or(f64::NAN, |e| e.recon)
    }
}

#[derive(Clone, Debug)]
pub struct AeRun {
    pub history: AeHistory,
    pub encoder: ImplicitSampler,
    pub decoder: MlpSpec,
    pub score_model: EnergyModel,
    /// Encoded monitoring set (ambient latent points) and the data it came from.
    pub latents: Tensor,
    pub monitor: Tensor,
}

/// Models for `cfg` on `data_dim`-dimensional data.
pub fn init_models(
    cfg: &AEConfig,
    data_dim: usize,
    stream: &mut RngStream,
) -> Result<(ImplicitSampler, MlpSpec, EnergyModel)> {
    let lat = cfg.latent.ambient_dim();
    let mut ew = vec![cfg.noise_width + data_dim];
    ew.extend(&cfg.encoder_hidden);
    ew.push(lat);
    let encoder = ImplicitSampler::init(
        Architecture::new(ew, cfg.activation, false)?,
        cfg.noise_width,
        data_dim,
        cfg.latent,
        stream,
    )?;
    let mut dw = vec![lat];
    dw.extend(&cfg.decoder_hidden);
    dw.push(data_dim);
    let decoder = MlpSpec::init(Architecture::new(dw, cfg.activation, false)?, stream);
    let cond = match cfg.mode {
        AeMode::ImplicitVae => data_dim,
        AeMode::WaeKl => 0,
    };
    let score = EnergyModel::init(
        Parameterization::RawMlp,
        cfg.latent,
        cond,
        &cfg.score_hidden,
        cfg.activation,
        false,
        stream,
    )?;
    Ok((encoder, decoder, score))
}

fn score_condition(mode: AeMode, x: &Tensor) -> Option<&Tensor> {
    match mode {
        AeMode::ImplicitVae => Some(x),
        AeMode::WaeKl => None,
    }
}

/// One MVL loss evaluation of the score model on encoder samples of `x`.
fn score_loss(
    cfg: &AEConfig,
    score: &EnergyModel,
    encoder: &ImplicitSampler,
    x: &Tensor,
    stream: &mut RngStream,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let noise = encoder.draw_noise(x.rows(), Some(x), stream)?;
    let z = encoder.push(&noise, Some(x))?;
    let batch = ChartBatch::recentered(cfg.latent, &z)?;
    let driver = Tensor::matrix(x.rows(), cfg.latent.dim(), stream.normals(x.rows() * cfg.latent.dim()))?;
    let ev = mvl_riemannian_eval(
        &batch,
        score_condition(cfg.mode, x),
        score,
        cfg.score_objective.epsilon,
        cfg.score_objective.with_cv,
        &driver,
        want_grad,
    )?;
    Ok((ev.report.value, ev.grad))
}

fn fisher_gap(cfg: &AEConfig, score: &EnergyModel, latents: &Tensor) -> Result<f64> {
    let q = circle_kde(latents, cfg.kde_kappa);
    let batch = ChartBatch::recentered(Manifold::Circle, latents)?;
    let model = grad_energy(score, &batch, None)?;
    let h = 1e-4;
    let mut s = 0.0;
    for r in 0..latents.rows() {
        let a = latents.get(r, 1).atan2(latents.get(r, 0));
        let kde_score = ((q(a + h)).ln() - (q(a - h)).ln()) / (2.0 * h);
        // recentered circle charts share the angle's orientation
        s += (-model.get(r, 0) - kde_score).powi(2);
    }
    Ok(s / latents.rows() as f64)
}

fn evaluate_monitor(
    cfg: &AEConfig,
    iteration: usize,
    encoder: &ImplicitSampler,
    decoder: &MlpSpec,
    score: &EnergyModel,
    monitor: &Tensor,
    monitor_stream: &RngStream,
) -> Result<(AeEval, Tensor)> {
    let mut s = monitor_stream.clone();
    let noise = encoder.draw_noise(monitor.rows(), Some(monitor), &mut s)?;
    let z = encoder.push(&noise, Some(monitor))?;
    let xhat = crate::nn::mlp_forward(decoder, &z)?;
    let recon = (0..monitor.rows())
        .map(|r| {
            monitor
                .row_slice(r)
                .iter()
                .zip(xhat.row_slice(r))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        / monitor.rows() as f64;
    let (entropy, kl) = if cfg.latent == Manifold::Circle {
        let (e, k) = circle_entropy_kl(circle_kde(&z, cfg.kde_kappa), &cfg.prior, 720);
        (Some(e), Some(k))
    } else {
        (None, None)
    };
    let (score_loss, _) = score_loss(cfg, score, encoder, monitor, &mut s, false)?;
    let fisher_gap = if cfg.latent == Manifold::Circle && cfg.mode == AeMode::WaeKl {
        Some(fisher_gap(cfg, score, &z)?)
    } else {
        None
    };
    if !recon.is_finite() || !score_loss.is_finite() {
        return Err(Error::Diverged {
            iteration,
            detail: format!("monitor recon {recon}, score loss {score_loss}"),
        });
    }
    Ok((
        AeEval {
            iteration,
            recon,
            entropy,
            kl,
            score_loss,
            fisher_gap,
        },
        z,
    ))
}

/// Alternates `n_score_steps` score-model updates with one autoencoder update.
/// Streams: `seed/0` data order, `seed/1` training noise, `seed/2` monitoring
/// noise, `seed/3` initialization.
pub fn train_ae(cfg: &AEConfig, dataset: &Tensor) -> Result<AeRun> {
    cfg.validate()?;
    if dataset.rows() == 0 {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let mut data_stream = RngStream::new(cfg.seed, 0);
    let mut noise_stream = RngStream::new(cfg.seed, 1);
    let monitor_stream = RngStream::new(cfg.seed, 2);
    let mut init_stream = RngStream::new(cfg.seed, 3);
    let (mut encoder, mut decoder, mut score) = init_models(cfg, dataset.cols(), &mut init_stream)?;

    let monitor = dataset.slice_rows(0, cfg.eval_size.min(dataset.rows()));
    let mut opt_e = Optimizer::new(cfg.optimizer);
    let mut opt_d = Optimizer::new(cfg.optimizer);
    let mut opt_s = Optimizer::new(cfg.optimizer);
    let mut history = AeHistory {
        recon: Vec::with_capacity(cfg.iterations),
        evals: Vec::new(),
        stale_score_steps: 0,
    };
    let (first, mut latents) = evaluate_monitor(cfg, 0, &encoder, &decoder, &score, &monitor, &monitor_stream)?;
    history.evals.push(first);

    let needs_score = match cfg.mode {
        AeMode::ImplicitVae => true,
        AeMode::WaeKl => cfg.lambda > 0.0,
    };
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for it in 1..=cfg.iterations {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..dataset.rows()).collect();
                data_stream.shuffle(&mut order);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let x = dataset.select_rows(&idx);

        if needs_score {
            if cfg.n_score_steps == 0 {
                history.stale_score_steps += 1;
            }
            for _ in 0..cfg.n_score_steps {
                let (v, g) = score_loss(cfg, &score, &encoder, &x, &mut noise_stream, true)?;
                let g = g.expect("gradient requested");
                if !v.is_finite() || g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Diverged {
                        iteration: it,
                        detail: format!("score model loss {v}"),
                    });
                }
                let mut p = score.net.params.clone();
                opt_s.step(&mut p, &g, cfg.score_learning_rate)?;
                score.net.params = p;
            }
        }

        let sf = model_score(&score);
        let grads = match cfg.mode {
            AeMode::ImplicitVae => elbo_surrogate_grad(&x, &encoder, &decoder, &sf, &cfg.prior, &mut noise_stream),
            AeMode::WaeKl => wae_loss_grad(&x, &encoder, &decoder, &sf, &cfg.prior, cfg.lambda, &mut noise_stream),
        }
        .map_err(|e| match e {
            Error::NonFinite(d) => Error::Diverged {
                iteration: it,
                detail: d,
            },
            other => other,
        })?;
        let mut pe = encoder.params().to_vec();
        opt_e.step(&mut pe, &grads.encoder, cfg.learning_rate)?;
        encoder.set_params(&pe);
        opt_d.step(&mut decoder.params, &grads.decoder, cfg.learning_rate)?;
        history.recon.push(grads.recon);

        if it % cfg.eval_every == 0 || it == cfg.iterations {
            let (ev, z) = evaluate_monitor(cfg, it, &encoder, &decoder, &score, &monitor, &monitor_stream)?;
            history.evals.push(ev);
            latents = z;
        }
    }
    Ok(AeRun {
        history,
        encoder,
        decoder,
        score_model: score,
        latents,
        monitor,
    })
}
