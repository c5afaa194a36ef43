//! Optimizers and the minibatch training loop for unconditional energy models.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::energy::{flatten, Energy};
use crate::error::{Error, Result};
use crate::estimators::{evaluate, EstimatorConfig, EstimatorKind, EvalContext};
use crate::rng::RngStream;
use crate::targets::Target;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RmspropState {
    pub accumulator: Vec<f64>,
}

/// `acc <- 0.9 acc + 0.1 g^2`, `p <- p - lr g / sqrt(acc + 1e-8)`.
pub fn rmsprop_step(state: &mut RmspropState, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(format!("{} params, {} grads", params.len(), grads.len())));
    }
    if state.accumulator.is_empty() {
        state.accumulator = vec![0.0; params.len()];
    }
    if state.accumulator.len() != params.len() {
        return Err(Error::shape(
            "optimizer state does not match the parameters".to_string(),
        ));
    }
    for ((p, g), a) in params.iter_mut().zip(grads).zip(&mut state.accumulator) {
        *a = 0.9 * *a + 0.1 * g * g;
        *p -= lr * g / (*a + 1e-8).sqrt();
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// Adam with `(0.9, 0.999, 1e-8)` and bias correction.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(format!("{} params, {} grads", params.len(), grads.len())));
    }
    if state.m.is_empty() {
        state.m = vec![0.0; params.len()];
        state.v = vec![0.0; params.len()];
    }
    if state.m.len() != params.len() {
        return Err(Error::shape(
            "optimizer state does not match the parameters".to_string(),
        ));
    }
    let (b1, b2) = (0.9f64, 0.999f64);
    state.t += 1;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        params[i] -= lr * (state.m[i] / c1) / ((state.v[i] / c2).sqrt() + 1e-8);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Rmsprop,
    Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Rmsprop(RmspropState),
    Adam(AdamState),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Rmsprop => Optimizer::Rmsprop(RmspropState::default()),
            OptimizerKind::Adam => Optimizer::Adam(AdamState::default()),
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        match self {
            Optimizer::Rmsprop(s) => rmsprop_step(s, params, grads, lr),
            Optimizer::Adam(s) => adam_step(s, params, grads, lr),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: EstimatorConfig,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Fraction of a fixed dataset held out for monitoring.
    pub heldout_fraction: f64,
    /// Heldout evaluations without improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    /// Weight of `mean(E(x)^2)` added to the objective.
    pub energy_l2_coefficient: f64,
    pub heldout_every: usize,
    /// Heldout set size when sampling from an analytic target.
    pub heldout_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: EstimatorConfig::default(),
            batch_size: 200,
            learning_rate: 4e-3,
            iterations: 400,
            optimizer: OptimizerKind::Rmsprop,
            seed: 0,
            heldout_fraction: 0.1,
            early_stop_patience: 0,
            energy_l2_coefficient: 0.0,
            heldout_every: 50,
            heldout_size: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::Config("heldout_fraction must be in [0, 1)".into()));
        }
        if self.heldout_every == 0 {
            return Err(Error::Config("heldout_every must be at least 1".into()));
        }
        if !(self.energy_l2_coefficient >= 0.0) {
            return Err(Error::Config("energy_l2_coefficient must be non-negative".into()));
        }
        Ok(())
    }

    /// The loss monitored on heldout data. Gradient-only and target-dependent
    /// objectives are monitored with the MVL loss at the same step size.
    pub fn heldout_objective(&self, on_manifold: bool) -> EstimatorConfig {
        match self.objective.kind {
            EstimatorKind::MvlLangevin
            | EstimatorKind::MvlRiemannian
            | EstimatorKind::MvlSpos
            | EstimatorKind::MvlSvgd
            | EstimatorKind::Dsm
            | EstimatorKind::ExactHutchinson => self.objective.clone(),
            _ => EstimatorConfig {
                kind: if on_manifold {
                    EstimatorKind::MvlRiemannian
                } else {
                    EstimatorKind::MvlLangevin
                },
                with_cv: true,
                ..self.objective.clone()
            },
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum DataSource<'a> {
    /// Fresh exact samples every iteration.
    Target(&'a Target),
    /// A fixed `N x ambient` dataset, shuffled per epoch.
    Dataset(&'a Tensor),
}

#[derive(Clone, Debug)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    /// `(iteration, loss)`, iterations counted from 1.
    pub heldout_loss: Vec<(usize, f64)>,
    pub wall_clock_secs: f64,
    pub final_params: Vec<f64>,
    /// Iteration whose parameters were restored, if early stopping was on.
    pub best_iteration: Option<usize>,
    pub stopped_early: bool,
}

/// Equality ignores wall-clock time.
impl PartialEq for TrainHistory {
    fn eq(&self, other: &Self) -> bool {
        self.train_loss == other.train_loss
            && self.heldout_loss == other.heldout_loss
            && self.final_params == other.final_params
            && self.best_iteration == other.best_iteration
            && self.stopped_early == other.stopped_early
    }
}

impl TrainHistory {
    /// Rows of `iteration, train_loss, heldout_loss` (blank when not evaluated).
    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        let mut held = self.heldout_loss.iter().peekable();
        self.train_loss
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let it = i + 1;
                let h = match held.peek() {
                    Some(&&(j, v)) if j == it => {
                        held.next();
                        format!("{v:.10e}")
                    }
                    _ => String::new(),
                };
                vec![it.to_string(), format!("{l:.10e}"), h]
            })
            .collect()
    }

    pub const CSV_HEADER: [&'static str; 3] = ["iteration", "train_loss", "heldout_loss"];

    pub fn moving_average(&self, window: usize, end: usize) -> f64 {
        let end = end.min(self.train_loss.len());
        let start = end.saturating_sub(window);
        let s = &self.train_loss[start..end];
        s.iter().sum::<f64>() / s.len().max(1) as f64
    }
}

/// `lambda mean(E(x)^2)` and its parameter gradient.
fn energy_penalty<E: Energy + ?Sized>(model: &E, x: &Tensor, lambda: f64) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let xv = g.constant(x.clone());
    let e = model.energy_graph(&mut g, &p, xv);
    let sq = g.square(e);
    let m = g.mean(sq);
    let pen = g.scale(m, lambda);
    let v = g.value(pen).item();
    if p.is_empty() {
        return Ok((v, Vec::new()));
    }
    Ok((v, flatten(&g.gradient_values(pen, &p)?)))
}

fn check_source<E: Energy + ?Sized>(model: &E, data: &DataSource<'_>) -> Result<()> {
    let m = model.manifold();
    let ok = match data {
        DataSource::Target(t) => t.manifold() == m,
        DataSource::Dataset(x) => x.cols() == m.ambient_dim() && x.rows() > 0,
    };
    if !ok || model.condition_width() > 0 {
        return Err(Error::InvalidArgument(format!(
            "data source does not fit a model on {m:?}"
        )));
    }
    Ok(())
}

/// Trains `model` in place and returns the run's history. With early
/// stopping, the best heldout parameters are restored at the end.
pub fn train_energy_model<E: Energy + ?Sized>(
    model: &mut E,
    data: DataSource<'_>,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    check_source(&*model, &data)?;
    let m = model.manifold();
    if (cfg.objective.kind == EstimatorKind::MvlRiemannian) == m.is_euclidean() {
        return Err(Error::InvalidArgument(format!(
            "objective {} does not fit a model on {m:?}",
            cfg.objective.kind.name()
        )));
    }
    let start = Instant::now();
    let mut data_stream = RngStream::new(cfg.seed, 0);
    let mut noise_stream = RngStream::new(cfg.seed, 1);
    let heldout_noise = RngStream::new(cfg.seed, 2);

    // heldout set and training pool
    let (train_pool, heldout) = match data {
        DataSource::Target(t) => (None, t.sample(cfg.heldout_size.max(2), &mut data_stream)?),
        DataSource::Dataset(x) => {
            let mut idx: Vec<usize> = (0..x.rows()).collect();
            data_stream.shuffle(&mut idx);
            let n_held = ((x.rows() as f64) * cfg.heldout_fraction).round() as usize;
            let n_held = n_held.min(x.rows() - 1);
            let held = if n_held > 0 {
                x.select_rows(&idx[..n_held])
            } else {
                x.select_rows(&idx)
            };
            (Some(x.select_rows(&idx[n_held..])), held)
        }
    };
    let held_cfg = cfg.heldout_objective(!m.is_euclidean());
    let target = match data {
        DataSource::Target(t) => Some(t),
        DataSource::Dataset(_) => None,
    };
    let ctx = EvalContext {
        condition: None,
        target,
    };
    let heldout_eval = |model: &E| -> Result<f64> {
        let mut s = heldout_noise.clone();
        Ok(evaluate(&held_cfg, model, &heldout, ctx, &mut s, false)?.report.value)
    };

    let mut opt = Optimizer::new(cfg.optimizer);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut history = TrainHistory {
        train_loss: Vec::with_capacity(cfg.iterations),
        heldout_loss: Vec::new(),
        wall_clock_secs: 0.0,
        final_params: Vec::new(),
        best_iteration: None,
        stopped_early: false,
    };
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut since_best = 0;

    for it in 1..=cfg.iterations {
        let batch = match &train_pool {
            None => target
                .expect("target source")
                .sample(cfg.batch_size, &mut data_stream)?,
            Some(pool) => {
                let mut rows = Vec::with_capacity(cfg.batch_size);
                while rows.len() < cfg.batch_size {
                    if cursor == order.len() {
                        order = (0..pool.rows()).collect();
                        data_stream.shuffle(&mut order);
                        cursor = 0;
                    }
                    rows.push(order[cursor]);
                    cursor += 1;
                }
                pool.select_rows(&rows)
            }
        };
        let ev = evaluate(&cfg.objective, &*model, &batch, ctx, &mut noise_stream, true)?;
        let mut loss = ev.report.value;
        let mut grad = ev.grad.expect("gradient requested");
        if cfg.energy_l2_coefficient > 0.0 {
            let (pen, pg) = energy_penalty(&*model, &batch, cfg.energy_l2_coefficient)?;
            loss += pen;
            grad.iter_mut().zip(pg).for_each(|(a, b)| *a += b);
        }
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                iteration: it,
                detail: format!("{} loss {loss}", cfg.objective.kind.name()),
            });
        }
        history.train_loss.push(loss);
        let mut params = model.params().to_vec();
        opt.step(&mut params, &grad, cfg.learning_rate)?;
        model.set_params(&params);
        model.refresh();

        if it % cfg.heldout_every == 0 || it == cfg.iterations {
            let h = heldout_eval(&*model)?;
            if !h.is_finite() {
                return Err(Error::Diverged {
                    iteration: it,
                    detail: "heldout loss".into(),
                });
            }
            history.heldout_loss.push((it, h));
            if cfg.early_stop_patience > 0 {
                match &best {
                    Some((b, _, _)) if h >= *b => since_best += 1,
                    _ => {
                        best = Some((h, it, model.params().to_vec()));
                        since_best = 0;
                    }
                }
                if since_best >= cfg.early_stop_patience {
                    history.stopped_early = it < cfg.iterations;
                    break;
                }
            }
        }
    }
    if let Some((_, it, p)) = best {
        model.set_params(&p);
        model.refresh();
        history.best_iteration = Some(it);
    }
    history.final_params = model.params().to_vec();
    history.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(history)
}
