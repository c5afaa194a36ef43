use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mvl_core::energy::{EnergyModel, Parameterization};
use mvl_core::estimators::{dsm_eval, exact_sm_hutchinson, mvl_langevin_eval, mvl_riemannian_eval, mvl_svgd_eval};
use mvl_core::manifold::{ChartBatch, Manifold};
use mvl_core::nn::Activation;
use mvl_core::samplers::KernelConfig;
use mvl_core::targets::Target;
use mvl_core::{RngStream, Tensor};

fn model(m: Manifold, st: &mut RngStream) -> EnergyModel {
    EnergyModel::init(
        Parameterization::Contraction,
        m,
        0,
        &[32, 32],
        Activation::Swish,
        true,
        st,
    )
    .unwrap()
}

fn euclidean(c: &mut Criterion) {
    let mut st = RngStream::new(0, 0);
    let m = model(Manifold::Euclidean(2), &mut st);
    let mut g = c.benchmark_group("euclidean_b200");
    let x = Target::Banana.sample(200, &mut st).unwrap();
    let z = Tensor::matrix(200, 2, st.normals(400)).unwrap();
    for grad in [false, true] {
        g.bench_with_input(BenchmarkId::new("mvl_langevin_cv", grad), &grad, |b, &w| {
            b.iter(|| mvl_langevin_eval(&x, &m, 1e-3, true, &z, w).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("dsm_cv", grad), &grad, |b, &w| {
            b.iter(|| dsm_eval(&x, &m, 1e-3, true, &z, w).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("mvl_svgd", grad), &grad, |b, &w| {
            b.iter(|| mvl_svgd_eval(&x, &m, &KernelConfig::default(), 1e-3, w).unwrap())
        });
    }
    g.bench_function("hutchinson_1probe", |b| {
        b.iter(|| exact_sm_hutchinson(&x, &m, 1, &mut RngStream::new(1, 0)).unwrap())
    });
    g.finish();
}

fn riemannian(c: &mut Criterion) {
    let mut st = RngStream::new(0, 1);
    let mut g = c.benchmark_group("riemannian_b200");
    for (name, m, t) in [
        ("circle", Manifold::Circle, Target::circle_benchmark()),
        ("sphere", Manifold::Sphere, Target::tetrahedral_vmf(10.0)),
    ] {
        let model = model(m, &mut st);
        let x = t.sample(200, &mut st).unwrap();
        let batch = ChartBatch::recentered(m, &x).unwrap();
        let z = Tensor::matrix(200, m.dim(), st.normals(200 * m.dim())).unwrap();
        g.bench_function(name, |b| {
            b.iter(|| mvl_riemannian_eval(&batch, None, &model, 1e-3, true, &z, true).unwrap())
        });
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20).measurement_time(Duration::from_secs(3)).warm_up_time(Duration::from_secs(1));
    targets = euclidean, riemannian
}
criterion_main!(benches);
