//! Budgeted hierarchical search on a 1-D multi-resolution problem: shallow
//! tree cells are cheap and coarse, deep cells expensive and precise. The
//! run prints each selection with its depth, cost, and the recommendation.

use iqbo::acquisition::MaxValueMethod;
use iqbo::cmp::fit_cmo;
use iqbo::envs::{EnvKind, EnvSpec, Environment};
use iqbo::kernel::KernelSpec;
use iqbo::tree::{run_cmets, CmetsParams, CostSchedule};

fn main() {
    let mut spec = EnvSpec::new(EnvKind::MultiresTree);
    spec.dim = 1;
    spec.tau2 = 0.01;
    let max_depth = 5;
    spec.max_depth = max_depth;
    let schedule = CostSchedule::defaults(max_depth);
    let env = Environment::new(spec)
        .unwrap()
        .with_schedule(schedule.clone());

    let d1 = env.generate_d1(60, 1e-3 / 60.0, 11).unwrap();
    let kernel = KernelSpec::isotropic(1, 0.2, 1.0e4).unwrap();
    let cmo = fit_cmo(&d1, &kernel, &kernel).unwrap();

    let params = CmetsParams {
        budget: 25.0,
        max_depth,
        schedule,
        max_value_count: 10,
        max_value_method: MaxValueMethod::Gumbel,
        x_grid: (0..=100).map(|i| vec![i as f64 / 100.0]).collect(),
        prior_mean: -50.0,
    };
    let trace = run_cmets(&params, &env, &cmo, 0).unwrap();

    println!(
        "{:>4} {:>5} {:>8} {:>8} {:>9} {:>9}",
        "iter", "depth", "a", "cost", "x_rec", "regret"
    );
    for r in &trace.records {
        println!(
            "{:>4} {:>5} {:>8.4} {:>8.2} {:>9.4} {:>9.4}",
            r.iteration, r.depth, r.a[0], r.cumulative_cost, r.x_recommend[0], r.simple_regret
        );
    }
    println!(
        "stopped: {:?}; final recommendation x = {:.4}",
        trace.status, trace.x_recommend[0]
    );
}
