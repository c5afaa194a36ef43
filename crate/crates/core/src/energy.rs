//! Unnormalized models `q(x) ~ exp(-E(x; theta))`.
//!
//! Everything that consumes an energy (samplers, estimators, the trainer)
//! works through the [`Energy`] trait so that learned networks and the exact
//! energies of analytic targets are interchangeable. Manifold energies are
//! functions of ambient coordinates; chart coordinates are mapped through
//! [`embed_graph`] first.

use serde_json::json;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::manifold::{embed_graph, Chart, ChartBatch, Manifold};
use crate::nn::{Activation, Architecture, MlpSpec};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub trait Energy: Send + Sync {
    fn manifold(&self) -> Manifold;

    /// Width of the conditioning input appended after the point (0 if none).
    fn condition_width(&self) -> usize {
        0
    }

    /// Flat parameter vector (empty for fixed energies).
    fn params(&self) -> &[f64] {
        &[]
    }

    fn set_params(&mut self, _params: &[f64]) {}

    /// Inserts the parameters as graph leaves, in flat order.
    fn bind(&self, _g: &mut Graph) -> Vec<Var> {
        Vec::new()
    }

    /// Per-row energies (`B x 1`) of ambient points `x` (`B x (ambient + cond)`).
    fn energy_graph(&self, g: &mut Graph, params: &[Var], x: Var) -> Var;

    /// Hook run once per optimizer step (spectral-norm power iteration).
    fn refresh(&mut self) {}
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// Scalar network head.
    RawMlp,
    /// `E(x) = x . psi(x)`.
    Contraction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyModel {
    pub parameterization: Parameterization,
    pub net: MlpSpec,
    pub manifold: Manifold,
    pub cond_width: usize,
}

impl EnergyModel {
    pub fn new(
        parameterization: Parameterization,
        net: MlpSpec,
        manifold: Manifold,
        cond_width: usize,
    ) -> Result<Self> {
        let point = manifold.ambient_dim();
        if net.arch.input_width() != point + cond_width {
            return Err(Error::shape(format!(
                "network input width {} != point width {point} + condition width {cond_width}",
                net.arch.input_width()
            )));
        }
        let want_out = match parameterization {
            Parameterization::RawMlp => 1,
            Parameterization::Contraction => point,
        };
        if net.arch.output_width() != want_out {
            return Err(Error::shape(format!(
                "{parameterization:?} needs output width {want_out}, network has {}",
                net.arch.output_width()
            )));
        }
        Ok(Self {
            parameterization,
            net,
            manifold,
            cond_width,
        })
    }

    /// Randomly initialized network with the given hidden widths.
    pub fn init(
        parameterization: Parameterization,
        manifold: Manifold,
        cond_width: usize,
        hidden: &[usize],
        activation: Activation,
        spectral_norm: bool,
        stream: &mut RngStream,
    ) -> Result<Self> {
        let point = manifold.ambient_dim();
        let mut widths = vec![point + cond_width];
        widths.extend_from_slice(hidden);
        widths.push(match parameterization {
            Parameterization::RawMlp => 1,
            Parameterization::Contraction => point,
        });
        let arch = Architecture::new(widths, activation, spectral_norm)?;
        Self::new(parameterization, MlpSpec::init(arch, stream), manifold, cond_width)
    }

    /// `E(x) = c * |x|^2 + b . x` as a contraction with a linear `psi`.
    pub fn quadratic(d: usize, c: f64, linear: &[f64]) -> Self {
        let arch = Architecture::new(vec![d, d], Activation::Identity, false).expect("valid");
        let mut net = MlpSpec::zeros(arch);
        net.set_weight(0, &Tensor::identity(d).scale(c));
        if !linear.is_empty() {
            net.set_bias(0, linear);
        }
        Self::new(Parameterization::Contraction, net, Manifold::Euclidean(d), 0).expect("consistent")
    }

    /// Reinterprets an ambient-input model as living on `m`.
    ///
    /// # Panics
    /// If `m`'s ambient dimension differs from the model's point width.
    pub fn on_manifold(mut self, m: Manifold) -> Self {
        assert_eq!(m.ambient_dim(), self.manifold.ambient_dim(), "ambient width mismatch");
        self.manifold = m;
        self
    }

    pub fn point_width(&self) -> usize {
        self.manifold.ambient_dim()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut v = self.net.to_json();
        v["parameterization"] = json!(self.parameterization);
        v["manifold"] = json!(self.manifold);
        v["cond_width"] = json!(self.cond_width);
        v
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let net = MlpSpec::from_json(v)?;
        let parameterization = serde_json::from_value(
            v.get("parameterization")
                .cloned()
                .ok_or_else(|| Error::Serde("missing parameterization".into()))?,
        )
        .map_err(|e| Error::Serde(e.to_string()))?;
        let manifold = serde_json::from_value(
            v.get("manifold")
                .cloned()
                .ok_or_else(|| Error::Serde("missing manifold".into()))?,
        )
        .map_err(|e| Error::Serde(e.to_string()))?;
        let cond_width = v.get("cond_width").and_then(|c| c.as_u64()).unwrap_or(0) as usize;
        Self::new(parameterization, net, manifold, cond_width)
    }
}

impl Energy for EnergyModel {
    fn manifold(&self) -> Manifold {
        self.manifold
    }

    fn condition_width(&self) -> usize {
        self.cond_width
    }

    fn params(&self) -> &[f64] {
        &self.net.params
    }

    fn set_params(&mut self, params: &[f64]) {
        self.net.params.copy_from_slice(params);
    }

    fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.net.bind(g).vars
    }

    fn energy_graph(&self, g: &mut Graph, params: &[Var], x: Var) -> Var {
        let bound = crate::nn::BoundMlp { vars: params.to_vec() };
        let out = self.net.forward_graph(g, &bound, x);
        match self.parameterization {
            Parameterization::RawMlp => out,
            Parameterization::Contraction => {
                let point = if self.cond_width == 0 {
                    x
                } else {
                    g.slice_cols(x, 0, self.point_width())
                };
                g.row_dot(point, out)
            }
        }
    }

    fn refresh(&mut self) {
        self.net.refresh_spectral_state(1);
    }
}

/// Energies at chart coordinates `coords` (`B x dim`), optionally conditioned.
pub fn energy_at_coords<E: Energy + ?Sized>(
    g: &mut Graph,
    model: &E,
    params: &[Var],
    charts: &[Chart],
    coords: Var,
    condition: Option<Var>,
) -> Var {
    let amb = embed_graph(g, model.manifold(), charts, coords);
    let input = match condition {
        Some(c) => g.concat_cols(&[amb, c]),
        None => amb,
    };
    model.energy_graph(g, params, input)
}

fn check_width<E: Energy + ?Sized>(model: &E, x: &Tensor, with_condition: bool) -> Result<()> {
    let want = model.manifold().ambient_dim() + if with_condition { model.condition_width() } else { 0 };
    if x.cols() != want {
        return Err(Error::shape(format!(
            "energy input has width {}, model expects {want}",
            x.cols()
        )));
    }
    Ok(())
}

/// Per-row energies of ambient points (`B x ambient`), as a `B`-vector.
pub fn energy<E: Energy + ?Sized>(model: &E, x: &Tensor) -> Result<Vec<f64>> {
    if model.condition_width() > 0 {
        return Err(Error::InvalidArgument(
            "conditional model needs a condition; use conditional_energy".into(),
        ));
    }
    check_width(model, x, false)?;
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let xv = g.constant(x.clone());
    let e = model.energy_graph(&mut g, &p, xv);
    Ok(g.value(e).values().to_vec())
}

/// `E(z | x)` for rows of `z` and matching rows of `condition`.
pub fn conditional_energy<E: Energy + ?Sized>(model: &E, z: &Tensor, condition: &Tensor) -> Result<Vec<f64>> {
    if model.condition_width() == 0 {
        return Err(Error::InvalidArgument("model has no conditioning input".into()));
    }
    if condition.cols() != model.condition_width() || z.rows() != condition.rows() {
        return Err(Error::shape(format!(
            "condition is {}x{}, expected {}x{}",
            condition.rows(),
            condition.cols(),
            z.rows(),
            model.condition_width()
        )));
    }
    check_width(model, z, false)?;
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let zv = g.constant(z.clone());
    let cv = g.constant(condition.clone());
    let input = g.concat_cols(&[zv, cv]);
    let e = model.energy_graph(&mut g, &p, input);
    Ok(g.value(e).values().to_vec())
}

/// Coordinate gradient `d_i E` at each chart point (`B x dim`). For Euclidean
/// models this is `grad_x E` at the rows of `batch.coords`.
pub fn grad_energy<E: Energy + ?Sized>(model: &E, batch: &ChartBatch, condition: Option<&Tensor>) -> Result<Tensor> {
    if batch.manifold != model.manifold() {
        return Err(Error::InvalidArgument(format!(
            "batch lives on {:?}, model on {:?}",
            batch.manifold,
            model.manifold()
        )));
    }
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let y = g.leaf(batch.coords.clone());
    let c = condition.map(|c| g.constant(c.clone()));
    let e = energy_at_coords(&mut g, model, &p, &batch.charts, y, c);
    let s = g.sum(e);
    Ok(g.gradient_values(s, &[y])?.remove(0))
}

/// Batch of Euclidean points viewed as identity-chart coordinates.
pub fn euclidean_batch(x: &Tensor) -> ChartBatch {
    ChartBatch {
        manifold: Manifold::Euclidean(x.cols()),
        charts: vec![Chart::Identity; x.rows()],
        coords: x.clone(),
    }
}

/// Flattens per-leaf gradients into the model's flat parameter order.
pub fn flatten(grads: &[Tensor]) -> Vec<f64> {
    grads.iter().flat_map(|t| t.values().iter().copied()).collect()
}
