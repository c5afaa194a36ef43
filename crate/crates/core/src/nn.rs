//! Small fully-connected networks evaluated on a [`Graph`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Swish,
    Softplus,
    Identity,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Swish => g.swish(x),
            Activation::Softplus => g.softplus(x),
            Activation::Identity => x,
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Swish => x / (1.0 + (-x).exp()),
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Activation::Identity => x,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "swish" => Ok(Activation::Swish),
            "softplus" => Ok(Activation::Softplus),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Layer widths, hidden activation and whether hidden layers are spectrally
/// normalized. The output layer is always affine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub spectral_norm: bool,
}

impl Architecture {
    pub fn new(widths: Vec<usize>, activation: Activation, spectral_norm: bool) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "architecture needs at least two positive widths, got {widths:?}"
            )));
        }
        Ok(Self {
            widths,
            activation,
            spectral_norm,
        })
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("non-empty")
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Offsets of (weight, bias) blocks for each layer in the flat vector.
    fn offsets(&self) -> Vec<(usize, usize)> {
        let mut off = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let wo = off;
                off += w[0] * w[1];
                let bo = off;
                off += w[1];
                (wo, bo)
            })
            .collect()
    }

    fn normalized(&self, layer: usize) -> bool {
        self.spectral_norm && layer + 1 < self.layers()
    }
}

/// Architecture plus its flat parameter vector and spectral-norm state.
///
/// Layer `l` stores its weight as a `widths[l] x widths[l+1]` row-major block
/// (inputs are row vectors) followed by its bias.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub arch: Architecture,
    pub params: Vec<f64>,
    /// Right singular-vector estimate per normalized layer (empty otherwise).
    pub sn_state: Vec<Vec<f64>>,
}

/// Parameter leaves of one network bound into a graph, in flat order.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub vars: Vec<Var>,
}

impl MlpSpec {
    pub fn new(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.param_count() {
            return Err(Error::shape(format!(
                "architecture {:?} implies {} parameters, got {}",
                arch.widths,
                arch.param_count(),
                params.len()
            )));
        }
        let sn_state = (0..arch.layers())
            .map(|l| {
                if arch.normalized(l) {
                    let n = arch.widths[l + 1];
                    vec![1.0 / (n as f64).sqrt(); n]
                } else {
                    Vec::new()
                }
            })
            .collect();
        Ok(Self { arch, params, sn_state })
    }

    pub fn zeros(arch: Architecture) -> Self {
        let n = arch.param_count();
        Self::new(arch, vec![0.0; n]).expect("count matches")
    }

    /// Gaussian weights with variance `1/fan_in`, zero biases.
    pub fn init(arch: Architecture, stream: &mut RngStream) -> Self {
        let mut params = vec![0.0; arch.param_count()];
        for (l, (wo, _)) in arch.offsets().into_iter().enumerate() {
            let (fan_in, fan_out) = (arch.widths[l], arch.widths[l + 1]);
            let s = 1.0 / (fan_in as f64).sqrt();
            for p in &mut params[wo..wo + fan_in * fan_out] {
                *p = s * stream.normal();
            }
        }
        let mut spec = Self::new(arch, params).expect("count matches");
        for state in spec.sn_state.iter_mut().filter(|s| !s.is_empty()) {
            let v = stream.normals(state.len());
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            *state = v.into_iter().map(|x| x / n).collect();
        }
        spec
    }

    pub fn weight(&self, layer: usize) -> Tensor {
        let (wo, _) = self.arch.offsets()[layer];
        let (r, c) = (self.arch.widths[layer], self.arch.widths[layer + 1]);
        Tensor::matrix(r, c, self.params[wo..wo + r * c].to_vec()).expect("dims")
    }

    pub fn set_weight(&mut self, layer: usize, w: &Tensor) {
        let (wo, _) = self.arch.offsets()[layer];
        self.params[wo..wo + w.len()].copy_from_slice(w.values());
    }

    pub fn set_bias(&mut self, layer: usize, b: &[f64]) {
        let (_, bo) = self.arch.offsets()[layer];
        self.params[bo..bo + b.len()].copy_from_slice(b);
    }

    pub fn bind(&self, g: &mut Graph) -> BoundMlp {
        let mut vars = Vec::with_capacity(2 * self.arch.layers());
        for (l, (wo, bo)) in self.arch.offsets().into_iter().enumerate() {
            let (r, c) = (self.arch.widths[l], self.arch.widths[l + 1]);
            vars.push(g.leaf(Tensor::matrix(r, c, self.params[wo..wo + r * c].to_vec()).expect("dims")));
            vars.push(g.leaf(Tensor::row(self.params[bo..bo + c].to_vec())));
        }
        BoundMlp { vars }
    }

    /// One power iteration per normalized layer, updating the persistent state.
    pub fn refresh_spectral_state(&mut self, iters: usize) {
        for l in 0..self.arch.layers() {
            if self.arch.normalized(l) {
                let w = self.weight(l);
                let mut state = std::mem::take(&mut self.sn_state[l]);
                let _ = spectral_normalize(&w, &mut state, iters);
                self.sn_state[l] = state;
            }
        }
    }

    /// Affine-then-activation composition on a `B x in` input; the last layer
    /// is affine only.
    pub fn forward_graph(&self, g: &mut Graph, bound: &BoundMlp, x: Var) -> Var {
        let mut h = x;
        let layers = self.arch.layers();
        for l in 0..layers {
            let mut w = bound.vars[2 * l];
            let b = bound.vars[2 * l + 1];
            if self.arch.normalized(l) {
                w = self.normalize_in_graph(g, w, l);
            }
            let z = g.matmul(h, w);
            let z = g.add(z, b);
            h = if l + 1 < layers {
                self.arch.activation.apply(g, z)
            } else {
                z
            };
        }
        h
    }

    /// `W / (a^T W b)` with the singular-vector pair held constant.
    fn normalize_in_graph(&self, g: &mut Graph, w: Var, layer: usize) -> Var {
        let wt = g.value(w).clone();
        let right = &self.sn_state[layer];
        let (left, _) = left_vector(&wt, right);
        if left.iter().all(|&v| v == 0.0) {
            return w;
        }
        let (r, c) = wt.dims();
        let mut outer = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                outer[i * c + j] = left[i] * right[j];
            }
        }
        let outer = g.constant(Tensor::matrix(r, c, outer).expect("dims"));
        let prod = g.mul(w, outer);
        let sigma = g.sum(prod);
        g.div(w, sigma)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "format_version": FORMAT_VERSION,
            "architecture": self.arch,
            "params": self.params.iter().map(|p| format!("{p:?}")).collect::<Vec<_>>(),
            "sn_state": self.sn_state.iter()
                .map(|s| s.iter().map(|p| format!("{p:?}")).collect::<Vec<_>>())
                .collect::<Vec<_>>(),
        })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let version = v
            .get("format_version")
            .and_then(|x| x.as_u64())
            .ok_or_else(|| Error::Serde("missing format_version".into()))?;
        if version != FORMAT_VERSION {
            return Err(Error::Serde(format!("unsupported format_version {version}")));
        }
        let arch: Architecture = serde_json::from_value(
            v.get("architecture")
                .cloned()
                .ok_or_else(|| Error::Serde("missing architecture".into()))?,
        )
        .map_err(|e| Error::Serde(e.to_string()))?;
        let params = parse_decimal_array(v.get("params").ok_or_else(|| Error::Serde("missing params".into()))?)?;
        let mut spec = MlpSpec::new(arch, params)?;
        if let Some(states) = v.get("sn_state").and_then(|s| s.as_array()) {
            for (slot, s) in spec.sn_state.iter_mut().zip(states) {
                let parsed = parse_decimal_array(s)?;
                if parsed.len() == slot.len() {
                    *slot = parsed;
                }
            }
        }
        Ok(spec)
    }
}

pub const FORMAT_VERSION: u64 = 1;

pub(crate) fn parse_decimal_array(v: &serde_json::Value) -> Result<Vec<f64>> {
    v.as_array()
        .ok_or_else(|| Error::Serde("expected an array of decimal strings".into()))?
        .iter()
        .map(|x| {
            x.as_str()
                .ok_or_else(|| Error::Serde("parameter is not a string".into()))?
                .parse::<f64>()
                .map_err(|e| Error::Serde(e.to_string()))
        })
        .collect()
}

/// Plain forward evaluation.
pub fn mlp_forward(spec: &MlpSpec, x: &Tensor) -> Result<Tensor> {
    if x.cols() != spec.arch.input_width() {
        return Err(Error::shape(format!(
            "input has width {}, network expects {}",
            x.cols(),
            spec.arch.input_width()
        )));
    }
    let mut g = Graph::new();
    let bound = spec.bind(&mut g);
    let xv = g.constant(x.clone());
    let y = spec.forward_graph(&mut g, &bound, xv);
    Ok(g.value(y).clone())
}

fn left_vector(w: &Tensor, right: &[f64]) -> (Vec<f64>, f64) {
    let (r, c) = w.dims();
    let mut a = vec![0.0; r];
    for i in 0..r {
        a[i] = (0..c).map(|j| w.get(i, j) * right[j]).sum();
    }
    let n = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        a.iter_mut().for_each(|v| *v /= n);
    }
    (a, n)
}

#[derive(Clone, Debug)]
pub struct SpectralNormalized {
    pub weight: Tensor,
    pub sigma: f64,
    pub degenerate: bool,
}

/// Divides `weight` by its top singular value estimated with `iters` power
/// iterations from the persistent right-vector `state`, which is updated.
pub fn spectral_normalize(weight: &Tensor, state: &mut Vec<f64>, iters: usize) -> SpectralNormalized {
    let (r, c) = weight.dims();
    if state.len() != c {
        *state = vec![1.0 / (c as f64).sqrt(); c];
    }
    let mut sigma = 0.0;
    for _ in 0..iters.max(1) {
        let (a, _) = left_vector(weight, state);
        let mut b = vec![0.0; c];
        for j in 0..c {
            b[j] = (0..r).map(|i| weight.get(i, j) * a[i]).sum();
        }
        let n = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        sigma = n;
        if n == 0.0 {
            break;
        }
        for (s, v) in state.iter_mut().zip(b) {
            *s = v / n;
        }
    }
    if sigma <= f64::MIN_POSITIVE || !sigma.is_finite() {
        return SpectralNormalized {
            weight: weight.clone(),
            sigma: 0.0,
            degenerate: true,
        };
    }
    SpectralNormalized {
        weight: weight.scale(1.0 / sigma),
        sigma,
        degenerate: false,
    }
}
