use super::*;
use crate::energy::{EnergyModel, Parameterization};
use crate::manifold::Chart;
use crate::nn::Activation;
use crate::rng::gaussian_sample;

fn half_norm(d: usize) -> EnergyModel {
    EnergyModel::quadratic(d, 0.5, &vec![0.0; d])
}

fn random_mlp(d: usize, seed: u64) -> EnergyModel {
    EnergyModel::init(
        Parameterization::RawMlp,
        Manifold::Euclidean(d),
        0,
        &[16, 16],
        Activation::Swish,
        false,
        &mut RngStream::new(seed, 9),
    )
    .unwrap()
}

fn within(report: &EstimatorReport, want: f64, tol: f64) {
    assert!(
        (report.value - want).abs() <= tol,
        "{} vs {want} (se {})",
        report.value,
        report.std_err
    );
}

#[test]
fn gaussian_closed_form() {
    let mut s = RngStream::new(1, 0);
    let x = gaussian_sample(&mut s, &[100_000, 2]);
    let m = half_norm(2);
    within(&mvl_langevin_loss(&x, &m, 1e-3, true, &mut s).unwrap(), -2.0, 0.05);
    within(&dsm_loss(&x, &m, 1e-3, true, &mut s).unwrap(), -2.0, 0.05);
}

#[test]
fn wide_data_narrow_model() {
    // p = N(0, 4), q ~ exp(-x^2/2): 2 E_p[x^2/2 - 1] = 2
    let mut s = RngStream::new(2, 0);
    let x = gaussian_sample(&mut s, &[100_000, 1]).scale(2.0);
    let m = half_norm(1);
    let r = mvl_langevin_loss(&x, &m, 1e-3, true, &mut s).unwrap();
    assert!((r.value - 2.0).abs() < 4.0 * r.std_err + 0.01, "{}", r.value);
    let t = Target::gaussian(vec![0.0], vec![2.0]).unwrap();
    within(&fisher_divergence_analytic(&x, &t, &m).unwrap(), 1.125, 0.02);
    within(&sm_reference_value(&t, &m, 100_000, &mut s).unwrap(), 2.0, 0.05);
    let same = Target::gaussian(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
    within(
        &sm_reference_value(&same, &half_norm(2), 100_000, &mut s).unwrap(),
        -2.0,
        0.05,
    );
}

#[test]
fn constant_energy_gives_zero() {
    let m = EnergyModel::quadratic(2, 0.0, &[0.0, 0.0]);
    let mut s = RngStream::new(3, 0);
    let x = gaussian_sample(&mut s, &[50, 2]);
    for r in [
        mvl_langevin_loss(&x, &m, 1e-2, true, &mut s).unwrap(),
        mvl_langevin_loss(&x, &m, 1e-2, false, &mut s).unwrap(),
        dsm_loss(&x, &m, 1e-2, true, &mut s).unwrap(),
        mvl_svgd_loss(&x, &m, &KernelConfig::default(), 1e-2).unwrap(),
    ] {
        assert!(r.per_sample.iter().all(|v| *v == 0.0));
    }
    // E = x.(Wx + b) at W = 0, b = 0: the bias gradient cancels exactly, the
    // weight gradient is that of -lap E = -2 tr W
    let g = cd1_param_grad(&x, &m, 1e-2, true, &mut s).unwrap();
    assert!(g[4].abs() < 1e-10 && g[5].abs() < 1e-10, "{g:?}");
    assert!((g[0] + 2.0).abs() < 0.8 && g[1].abs() < 0.8, "{g:?}");
}

#[test]
fn small_step_limit_single_point() {
    // x = (1, 0), Z = (0, 1), E = |x|^2/2: |grad E|^2 - 2 Z'HZ = -1
    let x = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
    let z = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
    let ev = mvl_langevin_eval(&x, &half_norm(2), 1e-8, true, &z, false).unwrap();
    assert!((ev.report.value + 1.0).abs() < 1e-4, "{}", ev.report.value);
    let ev = dsm_eval(&x, &half_norm(2), 1e-8, true, &z, false).unwrap();
    assert!((ev.report.value + 1.0).abs() < 1e-4, "{}", ev.report.value);
}

#[test]
fn loss_gradient_matches_parameter_differences() {
    let mut s = RngStream::new(4, 0);
    let mut m = random_mlp(2, 4);
    let x = gaussian_sample(&mut s, &[40, 2]);
    let z = gaussian_sample(&mut s, &[40, 2]);
    let eps = 1e-2;
    type Eval = fn(&Tensor, &EnergyModel, f64, bool, &Tensor, bool) -> Result<Evaluation>;
    let evals: [Eval; 2] = [mvl_langevin_eval, dsm_eval];
    for f in evals {
        let ev = f(&x, &m, eps, true, &z, true).unwrap();
        let grad = ev.grad.unwrap();
        let p0 = m.params().to_vec();
        for &i in &[0usize, 7, 20, p0.len() - 1] {
            let h = 1e-5;
            let mut p = p0.clone();
            p[i] += h;
            m.set_params(&p);
            let up = f(&x, &m, eps, true, &z, false).unwrap().report.value;
            p[i] -= 2.0 * h;
            m.set_params(&p);
            let dn = f(&x, &m, eps, true, &z, false).unwrap().report.value;
            m.set_params(&p0);
            let fd = (up - dn) / (2.0 * h);
            let err = (grad[i] - fd).abs() / fd.abs().max(1e-3);
            assert!(err < 1e-4, "param {i}: {} vs {fd}", grad[i]);
        }
    }
}

#[test]
fn dsm_control_variate_variance_gap() {
    let mut s = RngStream::new(5, 0);
    let m = random_mlp(2, 5);
    let x = gaussian_sample(&mut s, &[4000, 2]);
    let z = gaussian_sample(&mut s, &[4000, 2]);
    let with = dsm_eval(&x, &m, 1e-5, true, &z, false).unwrap().report;
    let without = dsm_eval(&x, &m, 1e-5, false, &z, false).unwrap().report;
    assert!(without.variance() >= 100.0 * with.variance());
    // the control variate does not move the mean
    let se = (with.std_err.powi(2) + without.std_err.powi(2)).sqrt();
    assert!((with.value - without.value).abs() < 3.0 * se);
}

#[test]
fn cd1_location_family() {
    // E = (x + b)^2 / 2 with p = N(0, 1): d_b J = E_p[x] + b = b
    let b = -1.0;
    let m = EnergyModel::quadratic(1, 0.5, &[b]);
    let mut s = RngStream::new(6, 0);
    let x = gaussian_sample(&mut s, &[200_000, 1]);
    let g = cd1_param_grad(&x, &m, 1e-3, true, &mut s).unwrap();
    // flat order: weight (1x1), then bias
    assert!((g[1] - b).abs() < 0.02, "{g:?}");
}

#[test]
fn hutchinson_examples() {
    let x = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
    let exact = hutchinson_eval_exact(&x, &half_norm(2));
    assert!((exact + 1.0).abs() < 1e-14);
    let lin = EnergyModel::quadratic(2, 0.0, &[3.0, -1.0]);
    let mut s = RngStream::new(7, 0);
    let r = exact_sm_hutchinson(&x, &lin, 5, &mut s).unwrap();
    assert!((r.value - 5.0).abs() < 1e-14);
    assert!(exact_sm_hutchinson(&x, &lin, 0, &mut s).is_err());
}

fn hutchinson_eval_exact(x: &Tensor, m: &EnergyModel) -> f64 {
    oracles::hutchinson_eval(x, m, &[], false).unwrap().report.value
}

#[test]
fn finite_difference_oracle() {
    let x = Tensor::matrix(3, 3, vec![0.1, 0.2, 0.3, 1.0, -1.0, 0.5, 2.0, 0.0, -0.7]).unwrap();
    let q = half_norm(3);
    let r = exact_sm_fd(&x, &q, 1e-4).unwrap();
    for (i, v) in r.per_sample.iter().enumerate() {
        let half: f64 = 0.5 * x.row_slice(i).iter().map(|a| a * a).sum::<f64>();
        assert!((v - (half - 3.0)).abs() < 1e-6);
    }
    assert!(exact_sm_fd(&x, &q, 0.0).is_err());
    let m = random_mlp(3, 8);
    let fd = exact_sm_fd(&x, &m, 1e-4).unwrap();
    let ex = oracles::hutchinson_eval(&x, &m, &[], false).unwrap().report;
    for (a, b) in fd.per_sample.iter().zip(&ex.per_sample) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn ksd_properties() {
    let t = Target::gaussian(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
    let mut s = RngStream::new(9, 0);
    let x = t.sample(200, &mut s).unwrap();
    let k = KernelConfig::default();
    assert!(ksd_vstat(&x, &t, &t, &k).unwrap().abs() < 1e-20);
    let v = ksd_vstat(&x, &t, &random_mlp(2, 9), &k).unwrap();
    assert!(v > 0.0);
    let one = x.slice_rows(0, 1);
    let fixed = KernelConfig::fixed(1.0).unwrap();
    let m = random_mlp(2, 9);
    let g = crate::energy::grad_energy(&m, &crate::energy::euclidean_batch(&one), None).unwrap();
    let delta: f64 = g.values().iter().zip(one.values()).map(|(a, b)| (-a + b).powi(2)).sum();
    assert!((ksd_vstat(&one, &t, &m, &fixed).unwrap() - delta).abs() < 1e-12);
}

/// A Euclidean model on the angle that evaluates a circle model at
/// `(cos a, sin a)`.
struct OnAngle<'a>(&'a EnergyModel);

impl Energy for OnAngle<'_> {
    fn manifold(&self) -> Manifold {
        Manifold::Euclidean(1)
    }
    fn params(&self) -> &[f64] {
        self.0.params()
    }
    fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.0.bind(g)
    }
    fn energy_graph(&self, g: &mut Graph, params: &[Var], x: Var) -> Var {
        let c = g.cos(x);
        let s = g.sin(x);
        let amb = g.concat_cols(&[c, s]);
        self.0.energy_graph(g, params, amb)
    }
}

fn circle_mlp(seed: u64) -> EnergyModel {
    EnergyModel::init(
        Parameterization::RawMlp,
        Manifold::Circle,
        0,
        &[16],
        Activation::Tanh,
        false,
        &mut RngStream::new(seed, 3),
    )
    .unwrap()
}

#[test]
fn circle_loss_is_flat_langevin_on_angles() {
    let m = circle_mlp(10);
    let mut s = RngStream::new(10, 0);
    let x = Target::circle_benchmark().sample(64, &mut s).unwrap();
    let batch = ChartBatch::recentered(Manifold::Circle, &x).unwrap();
    let z = gaussian_sample(&mut s, &[64, 1]);
    let r = mvl_riemannian_eval(&batch, None, &m, 1e-2, true, &z, false)
        .unwrap()
        .report;
    let e = mvl_langevin_eval(&batch.coords, &OnAngle(&m), 1e-2, true, &z, false)
        .unwrap()
        .report;
    for (a, b) in r.per_sample.iter().zip(&e.per_sample) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
    // recentering the circle chart changes nothing
    let shifted = ChartBatch {
        manifold: Manifold::Circle,
        charts: vec![Chart::Angle(0.9); 64],
        coords: batch.coords.map(|a| crate::manifold::wrap_angle(a - 0.9)),
    };
    let r2 = mvl_riemannian_eval(&shifted, None, &m, 1e-2, true, &z, false)
        .unwrap()
        .report;
    for (a, b) in r.per_sample.iter().zip(&r2.per_sample) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
    assert_eq!(r.escaped_count, 0);
}

#[test]
fn uniform_zero_energy_sphere() {
    let m = EnergyModel::quadratic(3, 0.0, &[0.0; 3]).on_manifold(Manifold::Sphere);
    let mut s = RngStream::new(11, 0);
    let x = Target::tetrahedral_vmf(0.0).sample(100, &mut s).unwrap();
    let b = ChartBatch::recentered(Manifold::Sphere, &x).unwrap();
    let r = mvl_riemannian_loss(&b, &m, 1e-2, true, &mut s).unwrap();
    assert!(r.per_sample.iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn riemannian_gradient_matches_differences() {
    let mut m = circle_mlp(12);
    let mut s = RngStream::new(12, 0);
    let x = Target::circle_benchmark().sample(30, &mut s).unwrap();
    let b = ChartBatch::recentered(Manifold::Circle, &x).unwrap();
    let z = gaussian_sample(&mut s, &[30, 1]);
    let grad = mvl_riemannian_eval(&b, None, &m, 1e-2, true, &z, true)
        .unwrap()
        .grad
        .unwrap();
    let p0 = m.params().to_vec();
    for i in [0, 5, p0.len() - 1] {
        let h = 1e-5;
        let mut p = p0.clone();
        p[i] += h;
        m.set_params(&p);
        let up = mvl_riemannian_eval(&b, None, &m, 1e-2, true, &z, false)
            .unwrap()
            .report
            .value;
        p[i] -= 2.0 * h;
        m.set_params(&p);
        let dn = mvl_riemannian_eval(&b, None, &m, 1e-2, true, &z, false)
            .unwrap()
            .report
            .value;
        m.set_params(&p0);
        let fd = (up - dn) / (2.0 * h);
        assert!((grad[i] - fd).abs() / fd.abs().max(1e-3) < 1e-4, "{} vs {fd}", grad[i]);
    }
}

#[test]
fn spos_degenerations() {
    let m = random_mlp(2, 13);
    let mut s = RngStream::new(13, 0);
    let x = gaussian_sample(&mut s, &[20, 2]);
    let z = gaussian_sample(&mut s, &[20, 2]);
    let k = KernelConfig::fixed(1.5).unwrap();
    let a0 = mvl_spos_eval(&x, &m, &k, 0.0, 1e-2, true, &z, false).unwrap().report;
    let sv = mvl_svgd_loss(&x, &m, &k, 1e-2).unwrap();
    for (a, b) in a0.per_sample.iter().zip(&sv.per_sample) {
        assert!((a - b).abs() < 1e-12);
    }
    let off = KernelConfig {
        bandwidth: crate::samplers::Bandwidth::Off,
    };
    let sp = mvl_spos_eval(&x, &m, &off, 1.0, 1e-2, true, &z, false).unwrap().report;
    let lg = mvl_langevin_eval(&x, &m, 1e-2, true, &z, false).unwrap().report;
    for (a, b) in sp.per_sample.iter().zip(&lg.per_sample) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn svgd_single_particle_limit() {
    let m = random_mlp(2, 14);
    let x = Tensor::matrix(1, 2, vec![0.3, -0.8]).unwrap();
    let r = mvl_svgd_loss(&x, &m, &KernelConfig::fixed(1.0).unwrap(), 1e-7).unwrap();
    let g = crate::energy::grad_energy(&m, &crate::energy::euclidean_batch(&x), None).unwrap();
    let want: f64 = g.values().iter().map(|v| v * v).sum();
    assert!((r.value - want).abs() < 1e-5 * want.max(1.0), "{} vs {want}", r.value);
}

#[test]
fn bias_report_self_comparison_and_shape() {
    let t = Target::gaussian(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
    let spec = BiasVarianceSpec {
        estimators: vec![
            (EstimatorKind::ExactHutchinson, false),
            (EstimatorKind::MvlLangevin, true),
        ],
        epsilons: vec![1e-3, 1e-2],
        n_outer: 8,
        n_inner: 200,
    };
    let mut s = RngStream::new(15, 0);
    let rows = bias_variance_report(&spec, &half_norm(2), &t, &mut s).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].sq_bias_ub, 0.0);
    assert!(rows
        .iter()
        .all(|r| r.consistent_with_zero(2.0) || r.estimator == "mvl_langevin"));
    let again = bias_variance_report(&spec, &half_norm(2), &t, &mut RngStream::new(15, 0)).unwrap();
    assert_eq!(rows, again);
    let bad = BiasVarianceSpec { n_outer: 1, ..spec };
    assert!(bias_variance_report(&bad, &half_norm(2), &t, &mut s).is_err());
}

#[test]
fn evaluate_dispatch() {
    let m = random_mlp(2, 16);
    let t = Target::Banana;
    let mut s = RngStream::new(16, 0);
    let x = t.sample(100, &mut s).unwrap();
    let ctx = EvalContext {
        condition: None,
        target: Some(&t),
    };
    for kind in [
        EstimatorKind::MvlLangevin,
        EstimatorKind::MvlSvgd,
        EstimatorKind::MvlSpos,
        EstimatorKind::Dsm,
        EstimatorKind::Cd1,
        EstimatorKind::ExactHutchinson,
    ] {
        let cfg = EstimatorConfig::new(kind, 1e-2, true);
        let ev = evaluate(&cfg, &m, &x, ctx, &mut s, true).unwrap();
        assert_eq!(ev.grad.unwrap().len(), m.params().len(), "{kind:?}");
    }
    for kind in [
        EstimatorKind::ExactFd,
        EstimatorKind::FisherAnalytic,
        EstimatorKind::Ksd,
    ] {
        let cfg = EstimatorConfig::new(kind, 1e-2, true);
        assert!(evaluate(&cfg, &m, &x, ctx, &mut s, false).is_ok());
        assert!(evaluate(&cfg, &m, &x, ctx, &mut s, true).is_err());
    }
    let bad = EstimatorConfig::new(EstimatorKind::MvlLangevin, 0.0, true);
    assert!(matches!(
        evaluate(&bad, &m, &x, ctx, &mut s, false),
        Err(Error::Config(_))
    ));
    assert_eq!("dsm".parse::<EstimatorKind>().unwrap(), EstimatorKind::Dsm);
}

#[test]
fn chunked_evaluation_is_deterministic() {
    let m = random_mlp(2, 17);
    let x = Target::Banana.sample(1000, &mut RngStream::new(17, 0)).unwrap();
    let a = mvl_langevin_loss(&x, &m, 1e-3, true, &mut RngStream::new(1, 1)).unwrap();
    let b = mvl_langevin_loss(&x, &m, 1e-3, true, &mut RngStream::new(1, 1)).unwrap();
    assert_eq!(a, b);
    // the first chunk alone reproduces its own rows
    let first = x.slice_rows(0, 10);
    let z = Tensor::matrix(1000, 2, RngStream::new(1, 1).normals(2000)).unwrap();
    let c = mvl_langevin_eval(&first, &m, 1e-3, true, &z.slice_rows(0, 10), false).unwrap();
    assert_eq!(&a.per_sample[..10], &c.report.per_sample[..]);
}
