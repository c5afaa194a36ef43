//! Entropy gradients of implicit (pushforward) distributions from a score
//! function: `dH/dphi = -E[<score(f(e; phi)), df/dphi>]`.
//!
//! Manifold outputs are radial projections `u / |u|` of the network output,
//! and the score is given in each point's recentered chart, where the chart
//! tangents are orthonormal. The score is pulled back to an ambient tangent
//! vector and held constant while differentiating the pushforward.

use crate::autodiff::{Graph, Var};
use crate::energy::{flatten, grad_energy, Energy};
use crate::error::{Error, Result};
use crate::manifold::{coordinate_tangents, ChartBatch, Manifold};
use crate::nn::{Architecture, BoundMlp, MlpSpec};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Below this pre-projection norm a manifold draw is redrawn.
const MIN_PROJECTION_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ImplicitSampler {
    /// Maps `[noise, condition]` to an ambient point (before projection).
    pub net: MlpSpec,
    pub noise_width: usize,
    pub cond_width: usize,
    pub manifold: Manifold,
}

impl ImplicitSampler {
    pub fn new(net: MlpSpec, noise_width: usize, cond_width: usize, manifold: Manifold) -> Result<Self> {
        let arch = &net.arch;
        if arch.input_width() != noise_width + cond_width || arch.output_width() != manifold.ambient_dim() {
            return Err(Error::shape(format!(
                "sampler net {:?} does not map {noise_width}+{cond_width} inputs to {manifold:?}",
                arch.widths
            )));
        }
        Ok(ImplicitSampler {
            net,
            noise_width,
            cond_width,
            manifold,
        })
    }

    pub fn init(
        arch: Architecture,
        noise_width: usize,
        cond_width: usize,
        manifold: Manifold,
        stream: &mut RngStream,
    ) -> Result<Self> {
        Self::new(MlpSpec::init(arch, stream), noise_width, cond_width, manifold)
    }

    pub fn params(&self) -> &[f64] {
        &self.net.params
    }

    pub fn set_params(&mut self, p: &[f64]) {
        self.net.params.copy_from_slice(p);
    }

    pub fn bind(&self, g: &mut Graph) -> BoundMlp {
        self.net.bind(g)
    }

    /// `f(noise, condition; phi)` as a graph, projected onto the manifold.
    pub fn pushforward_graph(&self, g: &mut Graph, bound: &BoundMlp, noise: Var, condition: Option<Var>) -> Var {
        let input = match condition {
            Some(c) => g.concat_cols(&[noise, c]),
            None => noise,
        };
        let u = self.net.forward_graph(g, bound, input);
        if self.manifold.is_euclidean() {
            return u;
        }
        let sq = g.row_dot(u, u);
        let n = g.sqrt(sq);
        let inv = g.recip(n);
        g.mul(u, inv)
    }

    fn check_condition(&self, n: usize, condition: Option<&Tensor>) -> Result<()> {
        match (condition, self.cond_width) {
            (None, 0) => Ok(()),
            (Some(c), w) if w > 0 && c.dims() == (n, w) => Ok(()),
            _ => Err(Error::shape(format!(
                "sampler expects {} condition columns for {n} rows",
                self.cond_width
            ))),
        }
    }

    /// Noise for `n` draws. Manifold draws whose pre-projection output is
    /// (numerically) zero are redrawn.
    pub fn draw_noise(&self, n: usize, condition: Option<&Tensor>, stream: &mut RngStream) -> Result<Tensor> {
        self.check_condition(n, condition)?;
        let w = self.noise_width;
        let mut noise = Tensor::matrix(n, w, stream.normals(n * w))?;
        if self.manifold.is_euclidean() {
            return Ok(noise);
        }
        for _ in 0..100 {
            let u = self.raw_output(&noise, condition)?;
            let bad: Vec<usize> = (0..n)
                .filter(|&r| u.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt() < MIN_PROJECTION_NORM)
                .collect();
            if bad.is_empty() {
                return Ok(noise);
            }
            for r in bad {
                for c in 0..w {
                    noise.set(r, c, stream.normal());
                }
            }
        }
        Err(Error::NonFinite("pushforward output stuck at the origin".into()))
    }

    fn raw_output(&self, noise: &Tensor, condition: Option<&Tensor>) -> Result<Tensor> {
        let input = match condition {
            Some(c) => {
                let rows: Vec<Vec<f64>> = (0..noise.rows())
                    .map(|r| [noise.row_slice(r), c.row_slice(r)].concat())
                    .collect();
                Tensor::from_rows(&rows)?
            }
            None => noise.clone(),
        };
        crate::nn::mlp_forward(&self.net, &input)
    }

    /// Points `f(noise; phi)` for given noise.
    pub fn push(&self, noise: &Tensor, condition: Option<&Tensor>) -> Result<Tensor> {
        self.check_condition(noise.rows(), condition)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let nv = g.constant(noise.clone());
        let cv = condition.map(|c| g.constant(c.clone()));
        let z = self.pushforward_graph(&mut g, &b, nv, cv);
        Ok(g.value(z).clone())
    }
}

#[derive(Clone, Debug)]
pub struct Pushforward {
    /// Ambient points, `n x ambient_dim`.
    pub points: Tensor,
    /// The base draws, kept for reparameterized differentiation.
    pub noise: Tensor,
}

pub fn pushforward_sample(
    s: &ImplicitSampler,
    n: usize,
    condition: Option<&Tensor>,
    stream: &mut RngStream,
) -> Result<Pushforward> {
    let noise = s.draw_noise(n, condition, stream)?;
    let points = s.push(&noise, condition)?;
    Ok(Pushforward { points, noise })
}

/// Pulls chart scores (`n x dim`, recentered charts) back to ambient tangent
/// vectors (`n x ambient`).
pub fn ambient_score(batch: &ChartBatch, chart_score: &Tensor) -> Result<Tensor> {
    let (n, k) = batch.coords.dims();
    if chart_score.dims() != (n, k) {
        return Err(Error::shape(format!(
            "score is {:?}, expected {n}x{k}",
            chart_score.dims()
        )));
    }
    if batch.manifold.is_euclidean() {
        return Ok(chart_score.clone());
    }
    let a = batch.manifold.ambient_dim();
    let mut out = vec![0.0; n * a];
    for r in 0..n {
        let t = coordinate_tangents(batch.manifold, &batch.point(r));
        for (i, ti) in t.iter().enumerate() {
            for c in 0..a {
                out[r * a + c] += chart_score.get(r, i) * ti[c];
            }
        }
    }
    Tensor::matrix(n, a, out)
}

/// `sign * mean <v, f(noise; phi)>` differentiated in `phi`, with `v` the
/// pulled-back score held constant.
fn contracted_grad<F>(
    s: &ImplicitSampler,
    score_fn: F,
    sign: f64,
    n: usize,
    condition: Option<&Tensor>,
    stream: &mut RngStream,
) -> Result<Vec<f64>>
where
    F: Fn(&ChartBatch) -> Result<Tensor>,
{
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one draw".into()));
    }
    let pf = pushforward_sample(s, n, condition, stream)?;
    let batch = ChartBatch::recentered(s.manifold, &pf.points)?;
    let score = score_fn(&batch)?;
    let v = ambient_score(&batch, &score)?;
    let mut g = Graph::new();
    let b = s.bind(&mut g);
    let nv = g.constant(pf.noise);
    let cv = condition.map(|c| g.constant(c.clone()));
    let z = s.pushforward_graph(&mut g, &b, nv, cv);
    let vc = g.constant(v);
    let d = g.row_dot(z, vc);
    let tot = g.sum(d);
    let obj = g.scale(tot, sign / n as f64);
    let grad = flatten(&g.gradient_values(obj, &b.vars)?);
    if grad.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("entropy gradient".into()));
    }
    Ok(grad)
}

/// `dH/dphi` of the pushforward law, given its score in recentered charts.
pub fn entropy_grad<F>(
    s: &ImplicitSampler,
    score_fn: F,
    n: usize,
    condition: Option<&Tensor>,
    stream: &mut RngStream,
) -> Result<Vec<f64>>
where
    F: Fn(&ChartBatch) -> Result<Tensor>,
{
    contracted_grad(s, score_fn, -1.0, n, condition, stream)
}

/// `d/dphi E_q[log p(z)]` for a prior with an exact score.
pub fn cross_entropy_grad<F>(
    s: &ImplicitSampler,
    prior_score: F,
    n: usize,
    condition: Option<&Tensor>,
    stream: &mut RngStream,
) -> Result<Vec<f64>>
where
    F: Fn(&ChartBatch) -> Result<Tensor>,
{
    contracted_grad(s, prior_score, 1.0, n, condition, stream)
}

/// Score `-grad E` of an energy model, optionally conditioned on rows of
/// `condition` matching the batch.
pub fn energy_score<'a, E: Energy + ?Sized>(
    model: &'a E,
    condition: Option<&'a Tensor>,
) -> impl Fn(&ChartBatch) -> Result<Tensor> + 'a {
    move |b: &ChartBatch| Ok(grad_energy(model, b, condition)?.scale(-1.0))
}
