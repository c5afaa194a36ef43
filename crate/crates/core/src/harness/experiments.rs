//! Experiment runners. Each returns tables/models; [`run_experiment`] also
//! writes them to the output directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde_json::json;

use crate::ae::{train_ae, AeHistory, AeRun};
use crate::energy::{energy, EnergyModel};
use crate::error::{Error, Result};
use crate::estimators::{
    bias_variance_report, exact_sm_fd, BiasVarianceRow, BiasVarianceSpec, EstimatorConfig, EstimatorKind,
};
use crate::manifold::{embed, quadrature_nodes, Manifold};
use crate::rng::RngStream;
use crate::targets::Target;
use crate::tensor::Tensor;
use crate::trainer::{train_energy_model, DataSource, TrainHistory};

use super::plot::{svg_plot, AxesSpec};
use super::table::{write_atomic, write_json, Cell, ResultTable};
use super::{ensure_writable, ExperimentConfig, ExperimentKind};

/// Stream id for model initialization, disjoint from the trainer's streams.
const INIT_STREAM: u64 = 100;

/// Builds the configured model and trains it on fresh target samples.
/// Zero iterations returns the untrained model.
pub fn train_model(cfg: &ExperimentConfig) -> Result<(EnergyModel, Option<TrainHistory>)> {
    let target = cfg.target();
    let mut model = cfg
        .model
        .build(target.manifold(), &mut RngStream::new(cfg.seed, INIT_STREAM))?;
    let tc = cfg.train_config();
    if tc.iterations == 0 {
        return Ok((model, None));
    }
    let h = train_energy_model(&mut model, DataSource::Target(&target), &tc)?;
    Ok((model, Some(h)))
}

fn bias_table(rows: &[BiasVarianceRow]) -> Result<ResultTable> {
    let mut cols: Vec<&str> = BiasVarianceRow::CSV_HEADER.to_vec();
    cols.push("series");
    let mut t = ResultTable::new(&cols)?;
    for r in rows {
        t.push(vec![
            r.estimator.as_str().into(),
            r.epsilon.into(),
            r.with_cv.into(),
            r.mean.into(),
            r.sq_bias_ub.into(),
            r.sq_bias_stderr.into(),
            r.variance.into(),
            r.n_outer.into(),
            r.n_inner.into(),
            format!("{}{}", r.estimator, if r.with_cv { "+cv" } else { "" }).into(),
        ])?;
    }
    Ok(t)
}

/// Bias/variance rows for every (estimator, epsilon, with_cv) of the grid on
/// `model`, or on a model trained per the config when none is given.
pub fn sweep_bias_variance(cfg: &ExperimentConfig, model: Option<&EnergyModel>) -> Result<(ResultTable, EnergyModel)> {
    let target = cfg.target();
    let model = match model {
        Some(m) => m.clone(),
        None => train_model(cfg)?.0,
    };
    let mut estimators = Vec::new();
    for &k in &cfg.grid.estimators {
        for &cv in &cfg.grid.with_cv {
            if k == EstimatorKind::ExactHutchinson && cv {
                continue;
            }
            estimators.push((k, cv));
        }
    }
    let spec = BiasVarianceSpec {
        estimators,
        epsilons: cfg.grid.epsilons.clone(),
        n_outer: cfg.sweep.n_outer,
        n_inner: cfg.sweep.n_inner,
    };
    let rows = bias_variance_report(&spec, &model, &target, &mut RngStream::new(cfg.seed, 200))?;
    Ok((bias_table(&rows)?, model))
}

#[derive(Clone, Debug)]
pub struct DensityGrid {
    pub table: ResultTable,
    pub log_normalizer: f64,
    pub manifold: Manifold,
}

impl DensityGrid {
    /// Quadrature of the emitted density.
    pub fn total_mass(&self) -> Result<f64> {
        let w = self.table.numbers("weight")?;
        let lp = self.table.numbers("log_density")?;
        Ok(w.iter().zip(&lp).map(|(w, l)| w * l.exp()).sum())
    }

    /// Adds `true_log_density` from `target` and returns the new table.
    pub fn with_truth(&self, target: &Target) -> Result<ResultTable> {
        if target.manifold() != self.manifold {
            return Err(Error::InvalidArgument("target lives on a different manifold".into()));
        }
        let mut cols = self.table.columns().to_vec();
        cols.push("true_log_density".into());
        let mut t = ResultTable::new(&cols)?;
        let pts = grid_points(self.manifold, &self.table)?;
        for (row, p) in self.table.rows().iter().zip(pts) {
            let mut r = row.clone();
            r.push(target.log_density(&p).into());
            t.push(r)?;
        }
        Ok(t)
    }

    /// `max |log p_model - log p_target|` over the nodes.
    pub fn max_abs_log_error(&self, target: &Target) -> Result<f64> {
        let t = self.with_truth(target)?;
        let a = t.numbers("log_density")?;
        let b = t.numbers("true_log_density")?;
        Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
    }

    /// Area-weighted correlation between the model energy and `-log p`.
    pub fn energy_correlation(&self, target: &Target) -> Result<f64> {
        let t = self.with_truth(target)?;
        let w = t.numbers("weight")?;
        let e = t.numbers("energy")?;
        let nl: Vec<f64> = t.numbers("true_log_density")?.iter().map(|v| -v).collect();
        Ok(weighted_corr(&w, &e, &nl))
    }
}

pub fn weighted_corr(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let sw: f64 = w.iter().sum();
    let ma = w.iter().zip(a).map(|(w, x)| w * x).sum::<f64>() / sw;
    let mb = w.iter().zip(b).map(|(w, x)| w * x).sum::<f64>() / sw;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..w.len() {
        let (da, db) = (a[i] - ma, b[i] - mb);
        sab += w[i] * da * db;
        saa += w[i] * da * da;
        sbb += w[i] * db * db;
    }
    sab / (saa * sbb).sqrt()
}

fn grid_points(m: Manifold, t: &ResultTable) -> Result<Vec<Vec<f64>>> {
    let theta = t.numbers("theta")?;
    Ok(match m {
        Manifold::Circle => theta.iter().map(|a| vec![a.cos(), a.sin()]).collect(),
        _ => {
            let phi = t.numbers("phi")?;
            theta
                .iter()
                .zip(&phi)
                .map(|(th, ph)| vec![th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()])
                .collect()
        }
    })
}

/// Energy on the quadrature grid, normalized against the Hausdorff measure.
/// Columns: `theta, [phi,] weight, energy, log_density`.
pub fn density_grid(model: &EnergyModel, resolution: usize) -> Result<DensityGrid> {
    let m = model.manifold;
    if m.is_euclidean() {
        return Err(Error::Unsupported("density grids need a circle or sphere model".into()));
    }
    let nodes = quadrature_nodes(m, resolution)?;
    let amb: Vec<f64> = nodes.iter().flat_map(|(y, _)| embed(m, y)).collect();
    let pts = Tensor::matrix(nodes.len(), m.ambient_dim(), amb)?;
    let e = energy(model, &pts)?;
    let terms: Vec<f64> = nodes.iter().zip(&e).map(|((_, w), e)| w.ln() - e).collect();
    let log_z = crate::targets::logsumexp(terms.iter().copied());
    if !log_z.is_finite() {
        return Err(Error::NonFinite("density normalizer".into()));
    }
    let cols: &[&str] = match m {
        Manifold::Circle => &["theta", "weight", "energy", "log_density"],
        _ => &["theta", "phi", "weight", "energy", "log_density"],
    };
    let mut table = ResultTable::new(cols)?;
    for ((y, w), e) in nodes.iter().zip(&e) {
        let mut row: Vec<Cell> = y.coords.iter().map(|&c| c.into()).collect();
        row.push((*w).into());
        row.push((*e).into());
        row.push((-e - log_z).into());
        table.push(row)?;
    }
    Ok(DensityGrid {
        table,
        log_normalizer: log_z,
        manifold: m,
    })
}

struct Cd1Run {
    method: &'static str,
    with_cv: bool,
    epsilon: Option<f64>,
    seed: usize,
}

/// Final exact score-matching loss of models trained with CD-1 (with and
/// without control variate), optionally Langevin-MVL, and the exact
/// objective, for every step size and seed. Runs execute in parallel and are
/// merged in grid order.
pub fn cd1_compare(cfg: &ExperimentConfig) -> Result<ResultTable> {
    let target = cfg.target();
    if !target.manifold().is_euclidean() {
        return Err(Error::Unsupported("CD-1 comparison runs on Euclidean targets".into()));
    }
    let eval_x = target.sample(cfg.cd1.eval_size, &mut RngStream::new(cfg.seed, 300))?;
    let mut runs = Vec::new();
    for seed in 0..cfg.cd1.seeds {
        runs.push(Cd1Run {
            method: "exact",
            with_cv: false,
            epsilon: None,
            seed,
        });
        for &eps in &cfg.grid.epsilons {
            let mut methods = vec!["cd1"];
            if cfg.cd1.include_mvl {
                methods.push("mvl_langevin");
            }
            for method in methods {
                for cv in [false, true] {
                    runs.push(Cd1Run {
                        method,
                        with_cv: cv,
                        epsilon: Some(eps),
                        seed,
                    });
                }
            }
        }
    }
    let losses: Vec<Result<f64>> = runs
        .par_iter()
        .map(|r| {
            let run_seed = cfg.seed.wrapping_add(r.seed as u64);
            let mut model = cfg
                .model
                .build(target.manifold(), &mut RngStream::new(run_seed, INIT_STREAM))?;
            let mut tc = cfg.train_config();
            tc.seed = run_seed;
            tc.objective = match r.method {
                "exact" => EstimatorConfig {
                    probes: 0,
                    ..EstimatorConfig::new(EstimatorKind::ExactHutchinson, 1e-3, false)
                },
                "cd1" => EstimatorConfig::new(EstimatorKind::Cd1, r.epsilon.unwrap_or(1e-3), r.with_cv),
                _ => EstimatorConfig::new(EstimatorKind::MvlLangevin, r.epsilon.unwrap_or(1e-3), r.with_cv),
            };
            match train_energy_model(&mut model, DataSource::Target(&target), &tc) {
                Ok(_) => Ok(exact_sm_fd(&eval_x, &model, cfg.cd1.fd_step)?.value),
                // a run that blows up is reported as an infinite loss
                Err(Error::Diverged { .. }) | Err(Error::NonFinite(_)) => Ok(f64::INFINITY),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut t = ResultTable::new(&["method", "with_cv", "epsilon", "seed", "final_loss"])?;
    for (r, l) in runs.iter().zip(losses) {
        t.push(vec![
            r.method.into(),
            r.with_cv.into(),
            r.epsilon.map_or(Cell::Text(String::new()), Cell::Num),
            r.seed.into(),
            l?.into(),
        ])?;
    }
    Ok(t)
}

/// Seed-averaged final loss per (method, with_cv, epsilon), first-appearance
/// order.
pub fn cd1_summary(table: &ResultTable) -> Result<ResultTable> {
    let m = table.strings("method")?;
    let cv = table.strings("with_cv")?;
    let eps = table.strings("epsilon")?;
    let loss = table.numbers("final_loss")?;
    let mut keys: Vec<(String, String, String)> = Vec::new();
    let mut acc: Vec<(f64, usize)> = Vec::new();
    for i in 0..loss.len() {
        let k = (m[i].clone(), cv[i].clone(), eps[i].clone());
        match keys.iter().position(|x| *x == k) {
            Some(j) => {
                acc[j].0 += loss[i];
                acc[j].1 += 1;
            }
            None => {
                keys.push(k);
                acc.push((loss[i], 1));
            }
        }
    }
    let mut t = ResultTable::new(&["method", "with_cv", "epsilon", "mean_final_loss", "runs"])?;
    for ((m, cv, e), (s, n)) in keys.into_iter().zip(acc) {
        let e = if e.is_empty() {
            Cell::Text(e)
        } else {
            Cell::Num(
                e.parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad epsilon `{e}`")))?,
            )
        };
        t.push(vec![m.into(), cv.into(), e, (s / n as f64).into(), n.into()])?;
    }
    Ok(t)
}

/// Trains the autoencoder demo on a freshly drawn dataset from the target.
pub fn demo_ae(cfg: &ExperimentConfig) -> Result<AeRun> {
    let data = cfg
        .target()
        .sample(cfg.dataset_size, &mut RngStream::new(cfg.seed, 400))?;
    train_ae(&cfg.ae_config(), &data)
}

fn history_table(h: &TrainHistory) -> Result<ResultTable> {
    let mut t = ResultTable::new(&TrainHistory::CSV_HEADER)?;
    for r in h.csv_rows() {
        t.push(r.into_iter().map(Cell::Text).collect())?;
    }
    Ok(t)
}

fn ae_history_table(h: &AeHistory) -> Result<ResultTable> {
    let mut t = ResultTable::new(&AeHistory::CSV_HEADER)?;
    for r in h.csv_rows() {
        t.push(r.into_iter().map(Cell::Text).collect())?;
    }
    Ok(t)
}

fn write_model(path: &Path, model: &EnergyModel) -> Result<()> {
    write_json(path, &model.to_json())
}

/// Runs `cfg` and writes its outputs into `out`. `model` replaces the trained
/// model where an experiment needs one. Returns the written paths.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, model: Option<&EnergyModel>) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    ensure_writable(out)?;
    let start = Instant::now();
    let mut written = Vec::new();
    let mut put = |name: &str| -> PathBuf {
        let p = out.join(name);
        written.push(p.clone());
        p
    };
    match cfg.kind {
        ExperimentKind::Train => {
            let (m, h) = train_model(cfg)?;
            write_model(&put("model.json"), &m)?;
            if let Some(h) = h {
                history_table(&h)?.write_csv(&put("history.csv"))?;
            }
        }
        ExperimentKind::SweepBiasVariance => {
            let (t, m) = sweep_bias_variance(cfg, model)?;
            t.write_csv(&put("bias_variance.csv"))?;
            write_model(&put("model.json"), &m)?;
            let mut ax = AxesSpec::new("epsilon", "variance");
            ax.series = Some("series".into());
            ax.x_log = true;
            ax.y_log = true;
            ax.title = "estimator variance".into();
            svg_plot(&t, &ax, &put("variance.svg"))?;
            let positive = t.filter(|r| matches!(r[4], Cell::Num(v) if v > 0.0));
            if !positive.is_empty() {
                ax.y = "sq_bias_ub".into();
                ax.title = "squared bias upper bound".into();
                svg_plot(&positive, &ax, &put("sq_bias.svg"))?;
            }
        }
        ExperimentKind::Density => {
            let m = match model {
                Some(m) => m.clone(),
                None => train_model(cfg)?.0,
            };
            let grid = density_grid(&m, cfg.density.resolution)?;
            let target = cfg.target();
            let table = if model.is_none() && target.manifold() == m.manifold {
                grid.with_truth(&target)?
            } else {
                grid.table.clone()
            };
            table.write_csv(&put("density.csv"))?;
            if m.manifold == Manifold::Circle {
                let mut ax = AxesSpec::new("theta", "log_density");
                ax.title = "learned log density".into();
                svg_plot(&table, &ax, &put("density.svg"))?;
            }
            if model.is_none() {
                write_model(&put("model.json"), &m)?;
            }
        }
        ExperimentKind::DemoAe => {
            let run = demo_ae(cfg)?;
            ae_history_table(&run.history)?.write_csv(&put("history.csv"))?;
            let mut lat = ResultTable::new(&["x0", "x1", "z0", "z1"])?;
            for r in 0..run.monitor.rows() {
                let mut row: Vec<Cell> = run.monitor.row_slice(r).iter().map(|&v| v.into()).collect();
                row.extend(run.latents.row_slice(r).iter().take(2).map(|&v| Cell::Num(v)));
                if row.len() == 3 {
                    row.push(Cell::Num(0.0));
                }
                lat.push(row)?;
            }
            lat.write_csv(&put("latents.csv"))?;
            let enc = json!({
                "net": run.encoder.net.to_json(),
                "noise_width": run.encoder.noise_width,
                "cond_width": run.encoder.cond_width,
                "manifold": run.encoder.manifold,
            });
            write_json(&put("encoder.json"), &enc)?;
            write_json(&put("decoder.json"), &run.decoder.to_json())?;
            write_model(&put("score_model.json"), &run.score_model)?;
        }
        ExperimentKind::Cd1Compare => {
            let t = cd1_compare(cfg)?;
            t.write_csv(&put("cd1_compare.csv"))?;
            cd1_summary(&t)?.write_csv(&put("cd1_summary.csv"))?;
        }
    }
    write_atomic(&put("config.toml"), cfg.to_toml_string()?.as_bytes())?;
    // wall-clock time is kept apart so the other outputs stay byte-reproducible
    write_json(
        &put("metadata.json"),
        &json!({
            "kind": cfg.kind.name(),
            "wall_clock_secs": start.elapsed().as_secs_f64(),
            "version": env!("CARGO_PKG_VERSION"),
        }),
    )?;
    Ok(written)
}
