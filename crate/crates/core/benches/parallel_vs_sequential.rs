//! Parallel versus sequential execution of the two hot paths: an SAA
//! objective gradient over field samples and a randomized eigensolve.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cloak_core::config::RunConfig;
use cloak_core::exec::Execution;
use cloak_core::optimizer::{Objective, Variant};
use cloak_core::runs::{Setup, Stream};
use cloak_core::sensitivity::taylor::TaylorPoint;

fn setup() -> Setup {
    let cfg = RunConfig::from_toml_with_overrides(
        "",
        &["geometry.mesh_size=0.25".into(), "physics.directions=[[1.0,0.0],[0.0,1.0]]".into()],
    )
    .unwrap();
    Setup::new(&cfg).unwrap()
}

fn bench(c: &mut Criterion) {
    let s = setup();
    let tau = s.zero_design();
    let samples = s.draw_samples(8, Stream::Saa);
    let cfg = s.config.newton();
    let mut group = c.benchmark_group("execution");
    group.sample_size(10);
    for exec in [Execution::Parallel, Execution::Sequential] {
        let name = format!("{exec:?}");
        group.bench_with_input(BenchmarkId::new("saa_gradient", &name), &exec, |b, &exec| {
            b.iter(|| {
                let obj = Objective::new(&s.problem, &s.measure, Variant::Saa { samples: samples.clone() }, &cfg, exec).unwrap();
                let mut eval = obj.evaluate(&tau).unwrap();
                obj.gradient(&mut eval).unwrap()
            })
        });
        let mut settings = s.taylor_settings();
        settings.rank = 10;
        group.bench_with_input(BenchmarkId::new("taylor_expansion", &name), &exec, |b, &exec| {
            b.iter(|| TaylorPoint::new(&s.problem, &s.measure, tau.clone(), &settings, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
