//! Charts, metrics and quadrature for Euclidean space, the circle and the
//! 2-sphere.
//!
//! Sphere points use polar coordinates `(theta, phi)` with
//! `embed = R * (sin t cos p, sin t sin p, cos t)` for the chart's rotation
//! `R`. [`chart_at`] recenters each point onto the equator of its own chart,
//! so every sample starts where the polar metric is the identity.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Polar angles closer than this to a pole are outside the chart domain.
pub const THETA_MIN: f64 = 1e-3;
const ON_MANIFOLD_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Manifold {
    Euclidean(usize),
    Circle,
    Sphere,
}

impl Manifold {
    /// Intrinsic dimension.
    pub fn dim(self) -> usize {
        match self {
            Manifold::Euclidean(d) => d,
            Manifold::Circle => 1,
            Manifold::Sphere => 2,
        }
    }

    pub fn ambient_dim(self) -> usize {
        match self {
            Manifold::Euclidean(d) => d,
            Manifold::Circle => 2,
            Manifold::Sphere => 3,
        }
    }

    pub fn is_euclidean(self) -> bool {
        matches!(self, Manifold::Euclidean(_))
    }
}

pub type Rotation = [[f64; 3]; 3];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Chart {
    Identity,
    /// Circle chart whose angle origin sits at `offset`.
    Angle(f64),
    /// Sphere chart rotated by `R` (columns are the chart's axes).
    Rotation(Rotation),
}

impl Chart {
    fn rotation(&self) -> Rotation {
        match self {
            Chart::Rotation(r) => *r,
            _ => [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    fn offset(&self) -> f64 {
        match self {
            Chart::Angle(o) => *o,
            _ => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChartPoint {
    pub chart: Chart,
    pub coords: Vec<f64>,
}

impl ChartPoint {
    pub fn new(chart: Chart, coords: Vec<f64>) -> Self {
        Self { chart, coords }
    }

    pub fn identity(coords: Vec<f64>) -> Self {
        Self::new(Chart::Identity, coords)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricEval {
    pub g: Tensor,
    pub g_inv: Tensor,
    pub log_det: f64,
    /// `d_j log|G|` per coordinate.
    pub grad_log_det: Vec<f64>,
    /// `d_j g^{ij}` per coordinate `i`.
    pub inv_metric_divergence: Vec<f64>,
}

/// Reduces an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

pub fn metric_eval(m: Manifold, y: &ChartPoint) -> Result<MetricEval> {
    match m {
        Manifold::Euclidean(d) => Ok(MetricEval {
            g: Tensor::identity(d),
            g_inv: Tensor::identity(d),
            log_det: 0.0,
            grad_log_det: vec![0.0; d],
            inv_metric_divergence: vec![0.0; d],
        }),
        Manifold::Circle => Ok(MetricEval {
            g: Tensor::identity(1),
            g_inv: Tensor::identity(1),
            log_det: 0.0,
            grad_log_det: vec![0.0],
            inv_metric_divergence: vec![0.0],
        }),
        Manifold::Sphere => {
            let theta = y.coords[0];
            if !(THETA_MIN < theta && theta < PI - THETA_MIN) {
                return Err(Error::ChartPole { theta });
            }
            let s = theta.sin();
            let s2 = s * s;
            Ok(MetricEval {
                g: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, s2]]).expect("2x2"),
                g_inv: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0 / s2]]).expect("2x2"),
                log_det: 2.0 * s.ln(),
                grad_log_det: vec![2.0 * theta.cos() / s, 0.0],
                // g^{theta theta} = 1 and g^{phi phi} depends on theta only
                inv_metric_divergence: vec![0.0, 0.0],
            })
        }
    }
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Rotation whose first column is `p`.
fn frame_at(p: [f64; 3]) -> Rotation {
    let k = (0..3)
        .min_by(|&i, &j| p[i].abs().total_cmp(&p[j].abs()))
        .expect("three axes");
    let mut e = [0.0; 3];
    e[k] = 1.0;
    let d = p[0] * e[0] + p[1] * e[1] + p[2] * e[2];
    let mut u = [e[0] - d * p[0], e[1] - d * p[1], e[2] - d * p[2]];
    let n = norm3(u);
    u.iter_mut().for_each(|x| *x /= n);
    let w = cross(p, u);
    [[p[0], u[0], w[0]], [p[1], u[1], w[1]], [p[2], u[2], w[2]]]
}

fn check_on_manifold(m: Manifold, p: &[f64]) -> Result<()> {
    if p.len() != m.ambient_dim() {
        return Err(Error::shape(format!(
            "point has {} coordinates, {m:?} needs {}",
            p.len(),
            m.ambient_dim()
        )));
    }
    if !m.is_euclidean() {
        let n = p.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > ON_MANIFOLD_TOL {
            return Err(Error::OffManifold {
                distance: (n - 1.0).abs(),
            });
        }
    }
    Ok(())
}

/// Chart centred at `p`. Circle points get the global angular chart.
pub fn chart_at(m: Manifold, p: &[f64]) -> Result<ChartPoint> {
    check_on_manifold(m, p)?;
    Ok(match m {
        Manifold::Euclidean(_) => ChartPoint::identity(p.to_vec()),
        Manifold::Circle => ChartPoint::identity(vec![p[1].atan2(p[0])]),
        Manifold::Sphere => {
            let n = norm3([p[0], p[1], p[2]]);
            let q = [p[0] / n, p[1] / n, p[2] / n];
            ChartPoint::new(Chart::Rotation(frame_at(q)), vec![PI / 2.0, 0.0])
        }
    })
}

/// Coordinates of ambient point `p` in an existing chart.
pub fn coords_in_chart(m: Manifold, chart: &Chart, p: &[f64]) -> Vec<f64> {
    match m {
        Manifold::Euclidean(_) => p.to_vec(),
        Manifold::Circle => vec![wrap_angle(p[1].atan2(p[0]) - chart.offset())],
        Manifold::Sphere => {
            let r = chart.rotation();
            let q: Vec<f64> = (0..3).map(|k| (0..3).map(|i| r[i][k] * p[i]).sum::<f64>()).collect();
            vec![q[2].clamp(-1.0, 1.0).acos(), q[1].atan2(q[0])]
        }
    }
}

pub fn embed(m: Manifold, y: &ChartPoint) -> Vec<f64> {
    match m {
        Manifold::Euclidean(_) => y.coords.clone(),
        Manifold::Circle => {
            let a = y.coords[0] + y.chart.offset();
            vec![a.cos(), a.sin()]
        }
        Manifold::Sphere => {
            let (t, p) = (y.coords[0], y.coords[1]);
            let e = [t.sin() * p.cos(), t.sin() * p.sin(), t.cos()];
            let r = y.chart.rotation();
            (0..3)
                .map(|i| r[i][0] * e[0] + r[i][1] * e[1] + r[i][2] * e[2])
                .collect()
        }
    }
}

/// Tangent vectors `d embed / d y_i` at `y`, one per coordinate.
pub fn coordinate_tangents(m: Manifold, y: &ChartPoint) -> Vec<Vec<f64>> {
    match m {
        Manifold::Euclidean(d) => (0..d)
            .map(|i| {
                let mut e = vec![0.0; d];
                e[i] = 1.0;
                e
            })
            .collect(),
        Manifold::Circle => {
            let a = y.coords[0] + y.chart.offset();
            vec![vec![-a.sin(), a.cos()]]
        }
        Manifold::Sphere => {
            let (t, p) = (y.coords[0], y.coords[1]);
            let dt = [t.cos() * p.cos(), t.cos() * p.sin(), -t.sin()];
            let dp = [-t.sin() * p.sin(), t.sin() * p.cos(), 0.0];
            let r = y.chart.rotation();
            let rot = |v: [f64; 3]| -> Vec<f64> {
                (0..3)
                    .map(|i| r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2])
                    .collect()
            };
            vec![rot(dt), rot(dp)]
        }
    }
}

/// Drift of Riemannian Langevin dynamics in chart coordinates:
/// `V^i = g^{ij} (grad_log_target_j + 1/2 d_j log|G|) + d_j g^{ij}`.
///
/// `grad_log_target` is the coordinate gradient of the target's log density
/// with respect to the Hausdorff measure (already multiplied by any power the
/// caller targets). The log-determinant term converts it to a density with
/// respect to coordinate Lebesgue measure, which is what makes the diffusion
/// leave the Hausdorff-density target invariant.
pub fn riemannian_drift(m: Manifold, y: &ChartPoint, grad_log_target: &[f64]) -> Result<Vec<f64>> {
    let me = metric_eval(m, y)?;
    let k = m.dim();
    if grad_log_target.len() != k {
        return Err(Error::shape(format!(
            "drift needs {k} components, got {}",
            grad_log_target.len()
        )));
    }
    let inner: Vec<f64> = (0..k).map(|j| grad_log_target[j] + 0.5 * me.grad_log_det[j]).collect();
    Ok((0..k)
        .map(|i| (0..k).map(|j| me.g_inv.get(i, j) * inner[j]).sum::<f64>() + me.inv_metric_divergence[i])
        .collect())
}

/// `G^{-1/2} * driver` for the diagonal metrics used here.
pub fn metric_noise_from_driver(m: Manifold, y: &ChartPoint, driver: &[f64]) -> Result<Vec<f64>> {
    let me = metric_eval(m, y)?;
    Ok(driver
        .iter()
        .enumerate()
        .map(|(i, z)| z * me.g_inv.get(i, i).sqrt())
        .collect())
}

/// Draws `z ~ N(0, G^{-1}(y))`; returns `(z, standard_normal_driver)`.
pub fn metric_noise(m: Manifold, y: &ChartPoint, stream: &mut RngStream) -> Result<(Vec<f64>, Vec<f64>)> {
    metric_eval(m, y)?;
    let driver = stream.normals(m.dim());
    let z = metric_noise_from_driver(m, y, &driver)?;
    Ok((z, driver))
}

/// Quadrature nodes in the identity chart with Hausdorff weights.
///
/// Circle: `resolution` equispaced nodes on `[-pi, pi)` (periodic trapezoid).
/// Sphere: `resolution` latitude bands by `2 * resolution` longitudes; nodes
/// at band midpoints, each weighted by its band's exact area share so the rule
/// integrates constants exactly and is second order for smooth integrands.
pub fn quadrature_nodes(m: Manifold, resolution: usize) -> Result<Vec<(ChartPoint, f64)>> {
    if resolution == 0 {
        return Err(Error::InvalidArgument("resolution must be positive".into()));
    }
    match m {
        Manifold::Euclidean(_) => Err(Error::Unsupported(
            "Hausdorff quadrature on unbounded Euclidean space".into(),
        )),
        Manifold::Circle => {
            let h = 2.0 * PI / resolution as f64;
            Ok((0..resolution)
                .map(|i| (ChartPoint::identity(vec![-PI + h * i as f64]), h))
                .collect())
        }
        Manifold::Sphere => {
            let nt = resolution;
            let np = 2 * resolution;
            let dt = PI / nt as f64;
            let dp = 2.0 * PI / np as f64;
            let mut out = Vec::with_capacity(nt * np);
            for i in 0..nt {
                let t0 = dt * i as f64;
                let t1 = t0 + dt;
                let band = t0.cos() - t1.cos();
                let tm = t0 + 0.5 * dt;
                for j in 0..np {
                    let p = -PI + dp * (j as f64 + 0.5);
                    out.push((ChartPoint::identity(vec![tm, p]), band * dp));
                }
            }
            Ok(out)
        }
    }
}

/// `integral of f dHausdorff` over the circle or sphere.
pub fn hausdorff_quadrature(m: Manifold, f: impl Fn(&ChartPoint) -> f64, resolution: usize) -> Result<f64> {
    Ok(quadrature_nodes(m, resolution)?.iter().map(|(y, w)| w * f(y)).sum())
}

/// A batch of chart points, one chart per row.
#[derive(Clone, Debug)]
pub struct ChartBatch {
    pub manifold: Manifold,
    pub charts: Vec<Chart>,
    /// `B x dim` chart coordinates.
    pub coords: Tensor,
}

impl ChartBatch {
    /// Recentered charts for each row of an ambient `B x ambient_dim` tensor.
    pub fn recentered(m: Manifold, ambient: &Tensor) -> Result<Self> {
        if ambient.cols() != m.ambient_dim() {
            return Err(Error::shape(format!(
                "ambient batch has width {}, {m:?} needs {}",
                ambient.cols(),
                m.ambient_dim()
            )));
        }
        let mut charts = Vec::with_capacity(ambient.rows());
        let mut coords = Vec::with_capacity(ambient.rows() * m.dim());
        for r in 0..ambient.rows() {
            let cp = chart_at(m, ambient.row_slice(r))?;
            charts.push(cp.chart);
            coords.extend(cp.coords);
        }
        Ok(Self {
            manifold: m,
            charts,
            coords: Tensor::matrix(ambient.rows(), m.dim(), coords)?,
        })
    }

    pub fn len(&self) -> usize {
        self.charts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.charts.is_empty()
    }

    pub fn point(&self, i: usize) -> ChartPoint {
        ChartPoint::new(self.charts[i], self.coords.row_slice(i).to_vec())
    }

    pub fn with_coords(&self, coords: Tensor) -> Self {
        Self {
            manifold: self.manifold,
            charts: self.charts.clone(),
            coords,
        }
    }

    pub fn ambient(&self) -> Tensor {
        let rows: Vec<Vec<f64>> = (0..self.len()).map(|i| embed(self.manifold, &self.point(i))).collect();
        Tensor::from_rows(&rows).expect("uniform width")
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            manifold: self.manifold,
            charts: idx.iter().map(|&i| self.charts[i]).collect(),
            coords: self.coords.select_rows(idx),
        }
    }
}

/// Graph version of [`embed`] for a batch: `B x dim -> B x ambient_dim`.
pub fn embed_graph(g: &mut Graph, m: Manifold, charts: &[Chart], coords: Var) -> Var {
    match m {
        Manifold::Euclidean(_) => coords,
        Manifold::Circle => {
            let offsets: Vec<f64> = charts.iter().map(Chart::offset).collect();
            let a = if offsets.iter().all(|&o| o == 0.0) {
                coords
            } else {
                let o = g.constant(Tensor::column(offsets));
                g.add(coords, o)
            };
            let c = g.cos(a);
            let s = g.sin(a);
            g.concat_cols(&[c, s])
        }
        Manifold::Sphere => {
            let t = g.slice_cols(coords, 0, 1);
            let p = g.slice_cols(coords, 1, 1);
            let st = g.sin(t);
            let ct = g.cos(t);
            let cp = g.cos(p);
            let sp = g.sin(p);
            let e = [g.mul(st, cp), g.mul(st, sp), ct];
            let rots: Vec<Rotation> = charts.iter().map(Chart::rotation).collect();
            let mut cols = Vec::with_capacity(3);
            for i in 0..3 {
                let mut acc: Option<Var> = None;
                for (k, &ek) in e.iter().enumerate() {
                    let coef: Vec<f64> = rots.iter().map(|r| r[i][k]).collect();
                    if coef.iter().all(|&c| c == 0.0) {
                        continue;
                    }
                    let term = if coef.iter().all(|&c| c == 1.0) {
                        ek
                    } else {
                        let cv = g.constant(Tensor::column(coef));
                        g.mul(ek, cv)
                    };
                    acc = Some(match acc {
                        None => term,
                        Some(a) => g.add(a, term),
                    });
                }
                let col = match acc {
                    Some(a) => a,
                    None => g.constant(Tensor::zeros(charts.len(), 1)),
                };
                cols.push(col);
            }
            g.concat_cols(&cols)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn circle_metric_is_flat() {
        let me = metric_eval(Manifold::Circle, &ChartPoint::identity(vec![1.3])).unwrap();
        assert_eq!(me.g, Tensor::identity(1));
        assert_eq!(me.log_det, 0.0);
    }

    #[test]
    fn sphere_metric_values() {
        let eq = metric_eval(Manifold::Sphere, &ChartPoint::identity(vec![PI / 2.0, 0.3])).unwrap();
        assert!(close(eq.g.get(1, 1), 1.0, 1e-15));
        assert_eq!(eq.inv_metric_divergence, vec![0.0, 0.0]);
        let m = metric_eval(Manifold::Sphere, &ChartPoint::identity(vec![PI / 3.0, 0.0])).unwrap();
        assert!(close(m.g.get(1, 1), 0.75, 1e-14));
        let prod = m.g.matmul(&m.g_inv).unwrap();
        for (a, b) in prod.values().iter().zip(Tensor::identity(2).values()) {
            assert!(close(*a, *b, 1e-10));
        }
        assert!(matches!(
            metric_eval(Manifold::Sphere, &ChartPoint::identity(vec![1e-4, 0.0])),
            Err(Error::ChartPole { .. })
        ));
        let e = metric_eval(Manifold::Euclidean(3), &ChartPoint::identity(vec![0.0; 3])).unwrap();
        assert_eq!(e.log_det, 0.0);
        assert_eq!(e.g, Tensor::identity(3));
    }

    #[test]
    fn log_det_gradient_matches_finite_difference() {
        for &t in &[0.4, 1.0, PI / 3.0, 2.5] {
            let me = metric_eval(Manifold::Sphere, &ChartPoint::identity(vec![t, 0.1])).unwrap();
            let h = 1e-6;
            let ld = |t: f64| {
                metric_eval(Manifold::Sphere, &ChartPoint::identity(vec![t, 0.1]))
                    .unwrap()
                    .log_det
            };
            let fd = (ld(t + h) - ld(t - h)) / (2.0 * h);
            assert!(close(me.grad_log_det[0], fd, 1e-6));
            // d_j g^{ij}: g^{theta theta} is constant, g^{phi phi} has no phi dependence
            let ginv_pp = |p: f64| {
                metric_eval(Manifold::Sphere, &ChartPoint::identity(vec![t, p]))
                    .unwrap()
                    .g_inv
                    .get(1, 1)
            };
            assert!(close((ginv_pp(0.1 + h) - ginv_pp(0.1 - h)) / (2.0 * h), 0.0, 1e-6));
        }
    }

    #[test]
    fn charts_and_embedding() {
        let cp = chart_at(Manifold::Circle, &[0.0, 1.0]).unwrap();
        assert!(close(cp.coords[0], PI / 2.0, 1e-15));
        let e = embed(Manifold::Circle, &ChartPoint::identity(vec![PI]));
        assert!(close(e[0], -1.0, 1e-15) && close(e[1], 0.0, 1e-15));
        assert_eq!(
            embed(Manifold::Sphere, &ChartPoint::identity(vec![PI / 2.0, 0.0])),
            vec![1.0, 0.0, 6.123233995736766e-17]
        );
        let p = [0.36, 0.48, 0.8];
        let cp = chart_at(Manifold::Sphere, &p).unwrap();
        assert_eq!(cp.coords, vec![PI / 2.0, 0.0]);
        assert_eq!(
            chart_at(Manifold::Euclidean(2), &[3.0, 4.0]).unwrap().coords,
            vec![3.0, 4.0]
        );
        assert!(matches!(
            chart_at(Manifold::Sphere, &[1.0, 0.1, 0.0]),
            Err(Error::OffManifold { .. })
        ));
    }

    #[test]
    fn sphere_round_trip() {
        let mut s = RngStream::new(4, 4);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let v = s.normals(3);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let p: Vec<f64> = v.iter().map(|x| x / n).collect();
            let back = embed(Manifold::Sphere, &chart_at(Manifold::Sphere, &p).unwrap());
            for (a, b) in back.iter().zip(&p) {
                worst = worst.max((a - b).abs());
            }
            // chart coordinates of a nearby point agree with the chart's own embedding
            let cp = chart_at(Manifold::Sphere, &p).unwrap();
            let y = ChartPoint::new(cp.chart, vec![1.2, -0.4]);
            let amb = embed(Manifold::Sphere, &y);
            let c = coords_in_chart(Manifold::Sphere, &cp.chart, &amb);
            assert!(close(c[0], 1.2, 1e-10) && close(c[1], -0.4, 1e-10));
        }
        assert!(worst <= 1e-10, "worst {worst}");
    }

    #[test]
    fn drift_values() {
        assert_eq!(
            riemannian_drift(Manifold::Circle, &ChartPoint::identity(vec![0.2]), &[0.7]).unwrap(),
            vec![0.7]
        );
        let v = riemannian_drift(
            Manifold::Sphere,
            &ChartPoint::identity(vec![PI / 2.0, 0.0]),
            &[0.0, 0.0],
        )
        .unwrap();
        assert!(v.iter().all(|x| x.abs() < 1e-15));
        let v = riemannian_drift(
            Manifold::Sphere,
            &ChartPoint::identity(vec![PI / 3.0, 0.0]),
            &[0.0, 0.0],
        )
        .unwrap();
        // +cot(pi/3): the uniform law on the sphere has coordinate density sin(theta)
        assert!(close(v[0], 1.0 / 3f64.sqrt(), 1e-12), "{v:?}");
        assert_eq!(v[1], 0.0);
    }

    #[test]
    fn metric_noise_covariance() {
        let mut s = RngStream::new(8, 1);
        let (z, d) = metric_noise(Manifold::Sphere, &ChartPoint::identity(vec![PI / 2.0, 0.0]), &mut s).unwrap();
        assert_eq!(z, d);
        let y = ChartPoint::identity(vec![PI / 3.0, 0.0]);
        let n = 100_000;
        let (mut s00, mut s11, mut s01) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let (z, _) = metric_noise(Manifold::Sphere, &y, &mut s).unwrap();
            s00 += z[0] * z[0];
            s11 += z[1] * z[1];
            s01 += z[0] * z[1];
        }
        let nf = n as f64;
        assert!((s00 / nf - 1.0).abs() < 0.02);
        assert!((s11 / nf / (4.0 / 3.0) - 1.0).abs() < 0.02);
        assert!((s01 / nf).abs() < 0.02);
    }

    #[test]
    fn quadrature_values() {
        let c = hausdorff_quadrature(Manifold::Circle, |_| 1.0, 64).unwrap();
        assert!(close(c, 2.0 * PI, 1e-10));
        let c2 = hausdorff_quadrature(Manifold::Circle, |y| y.coords[0].cos().powi(2), 64).unwrap();
        assert!(close(c2, PI, 1e-10));
        let s = hausdorff_quadrature(Manifold::Sphere, |_| 1.0, 200).unwrap();
        assert!(close(s, 4.0 * PI, 1e-6));
        assert!(matches!(
            hausdorff_quadrature(Manifold::Euclidean(2), |_| 1.0, 10),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn sphere_quadrature_is_second_order() {
        // integral of cos^2(theta) over S^2 is 4 pi / 3
        let f = |y: &ChartPoint| y.coords[0].cos().powi(2) + 0.3 * (y.coords[0].sin() * y.coords[1].cos());
        let exact = 4.0 * PI / 3.0;
        let e1 = (hausdorff_quadrature(Manifold::Sphere, f, 20).unwrap() - exact).abs();
        let e2 = (hausdorff_quadrature(Manifold::Sphere, f, 40).unwrap() - exact).abs();
        assert!(e1 / e2 >= 4.0 * 0.95, "{e1} {e2}");
    }

    #[test]
    fn embed_graph_matches_embed() {
        let mut s = RngStream::new(2, 2);
        let mut rows = Vec::new();
        for _ in 0..5 {
            let v = s.normals(3);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            rows.push(v.iter().map(|x| x / n).collect::<Vec<_>>());
        }
        let amb = Tensor::from_rows(&rows).unwrap();
        let mut batch = ChartBatch::recentered(Manifold::Sphere, &amb).unwrap();
        batch.coords = batch.coords.map(|c| c + 0.05);
        let mut g = Graph::new();
        let y = g.leaf(batch.coords.clone());
        let e = embed_graph(&mut g, Manifold::Sphere, &batch.charts, y);
        let direct = batch.ambient();
        for (a, b) in g.value(e).values().iter().zip(direct.values()) {
            assert!(close(*a, *b, 1e-14));
        }
        let circ = ChartBatch {
            manifold: Manifold::Circle,
            charts: vec![Chart::Angle(0.4), Chart::Identity],
            coords: Tensor::column(vec![0.1, 2.0]),
        };
        let mut g = Graph::new();
        let y = g.leaf(circ.coords.clone());
        let e = embed_graph(&mut g, Manifold::Circle, &circ.charts, y);
        for (a, b) in g.value(e).values().iter().zip(circ.ambient().values()) {
            assert!(close(*a, *b, 1e-15));
        }
    }
}
