//! Experiment configs (TOML), result tables, plots and the experiment runners
//! behind the command line.

pub mod experiments;
pub mod plot;
pub mod table;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ae::AEConfig;
use crate::energy::{EnergyModel, Parameterization};
use crate::error::{Error, Result};
use crate::estimators::EstimatorKind;
use crate::manifold::Manifold;
use crate::nn::Activation;
use crate::rng::RngStream;
use crate::targets::Target;
use crate::trainer::TrainConfig;

pub use experiments::{
    cd1_compare, cd1_summary, demo_ae, density_grid, run_experiment, sweep_bias_variance, train_model, DensityGrid,
};
pub use plot::{svg_plot, AxesSpec};
pub use table::{loglog_slope, write_atomic, Cell, ResultTable};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "MVL_OUTPUT_ROOT";

/// `$MVL_OUTPUT_ROOT`, or `results` in the working directory.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("results"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Train,
    SweepBiasVariance,
    Density,
    DemoAe,
    Cd1Compare,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Train => "train",
            ExperimentKind::SweepBiasVariance => "sweep_bias_variance",
            ExperimentKind::Density => "density",
            ExperimentKind::DemoAe => "demo_ae",
            ExperimentKind::Cd1Compare => "cd1_compare",
        }
    }

    pub fn default_target(self) -> Target {
        match self {
            ExperimentKind::Train | ExperimentKind::SweepBiasVariance => Target::Banana,
            ExperimentKind::Density => Target::circle_benchmark(),
            ExperimentKind::Cd1Compare => Target::Cosine,
            ExperimentKind::DemoAe => crate::ae::ring_mixture(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub parameterization: Parameterization,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub spectral_norm: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            parameterization: Parameterization::Contraction,
            hidden: vec![32, 32],
            activation: Activation::Swish,
            spectral_norm: true,
        }
    }
}

impl ModelSpec {
    pub fn build(&self, manifold: Manifold, stream: &mut RngStream) -> Result<EnergyModel> {
        EnergyModel::init(
            self.parameterization,
            manifold,
            0,
            &self.hidden,
            self.activation,
            self.spectral_norm,
            stream,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Step sizes, ascending.
    pub epsilons: Vec<f64>,
    pub estimators: Vec<EstimatorKind>,
    pub with_cv: Vec<bool>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            epsilons: (0..=6).map(|i| 10f64.powf(-5.0 + 0.5 * i as f64)).collect(),
            estimators: vec![EstimatorKind::MvlLangevin, EstimatorKind::Dsm],
            with_cv: vec![false, true],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub n_outer: usize,
    pub n_inner: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            n_outer: 50,
            n_inner: 5000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityConfig {
    /// Circle nodes, or sphere latitude bands (with twice as many longitudes).
    pub resolution: usize,
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig { resolution: 360 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Cd1Config {
    pub seeds: usize,
    /// Fixed target sample on which every run's final loss is measured.
    pub eval_size: usize,
    pub fd_step: f64,
    /// Also train Langevin-MVL models (with and without control variate).
    pub include_mvl: bool,
}

impl Default for Cd1Config {
    fn default() -> Self {
        Cd1Config {
            seeds: 3,
            eval_size: 5000,
            fd_step: 1e-4,
            include_mvl: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Seeds every stream of the run (overrides `train.seed` and `ae.seed`).
    pub seed: u64,
    /// Defaults to `$MVL_OUTPUT_ROOT/<kind>`.
    pub output_dir: Option<PathBuf>,
    /// Defaults depend on `kind`.
    pub target: Option<Target>,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub grid: GridConfig,
    pub sweep: SweepConfig,
    pub density: DensityConfig,
    pub cd1: Cd1Config,
    pub ae: AEConfig,
    /// Number of training points for the autoencoder demo.
    pub dataset_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: ExperimentKind::Train,
            seed: 0,
            output_dir: None,
            target: None,
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            grid: GridConfig::default(),
            sweep: SweepConfig::default(),
            density: DensityConfig::default(),
            cd1: Cd1Config::default(),
            ae: AEConfig::default(),
            dataset_size: 2000,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.grid.epsilons;
        if e.is_empty() || e.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config("grid.epsilons must be positive and finite".into()));
        }
        if e.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("grid.epsilons must be strictly ascending".into()));
        }
        if self.sweep.n_outer < 2 || self.sweep.n_inner < 2 {
            return Err(Error::Config(
                "sweep.n_outer and sweep.n_inner must be at least 2".into(),
            ));
        }
        if self.density.resolution == 0 || self.cd1.seeds == 0 || self.cd1.eval_size == 0 || self.dataset_size == 0 {
            return Err(Error::Config("sizes must be positive".into()));
        }
        self.train_config().validate()?;
        self.ae_config().validate()?;
        Ok(())
    }

    pub fn target(&self) -> Target {
        self.target.clone().unwrap_or_else(|| self.kind.default_target())
    }

    /// Training settings with the run seed; a Langevin objective on a
    /// manifold target is switched to its Riemannian form.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = self.seed;
        let on_manifold = !self.target().manifold().is_euclidean();
        if on_manifold && t.objective.kind == EstimatorKind::MvlLangevin {
            t.objective.kind = EstimatorKind::MvlRiemannian;
        }
        t
    }

    pub fn ae_config(&self) -> AEConfig {
        AEConfig {
            seed: self.seed,
            ..self.ae.clone()
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| output_root().join(self.kind.name()))
    }
}

/// Creates `dir` and checks that files can be created in it.
pub fn ensure_writable(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}
