//! Parallel and sequential execution must produce bit-identical runs.

use cloak_core::config::RunConfig;
use cloak_core::runs::{self, Setup};

fn run(parallel: bool, kind: &str) -> (Vec<f64>, String) {
    let overrides: Vec<String> = [
        "geometry.mesh_size=0.5",
        "physics.k0=3.0",
        "physics.directions=[[1.0,0.0],[0.0,1.0]]",
        "variant.samples=3",
        "variant.rank=3",
        "variant.oversampling=3",
        "newton.max_newton=2",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([format!("execution.parallel={parallel}"), format!("variant.kind={kind}")])
    .collect();
    let cfg = RunConfig::from_toml_with_overrides("", &overrides).unwrap();
    let setup = Setup::new(&cfg).unwrap();
    let r = runs::run_optimize(&setup, &setup.zero_design(), None).unwrap();
    (r.tau, r.trace.to_csv())
}

#[test]
fn optimization_is_independent_of_execution_mode() {
    for kind in ["deterministic", "saa", "taylor"] {
        let (a, ta) = run(true, kind);
        let (b, tb) = run(false, kind);
        assert_eq!(a, b, "{kind}");
        assert_eq!(ta, tb, "{kind}");
    }
}
