//! Small end-to-end experiment on the linearly transformed Branin task:
//! two policies, two seeds, shortened horizon, results written to a temp
//! directory and the summary printed.

use iqbo::envs::{EnvKind, EnvSpec};
use iqbo::runner::{emit, run_experiment, ExperimentConfig, Mode, RunnerPolicy};

fn main() {
    let mut cfg = ExperimentConfig::new(EnvSpec::new(EnvKind::BraninLt));
    cfg.experiment_id = "branin-demo".to_string();
    cfg.mode = Mode::Fixed { iterations: 25 };
    cfg.seeds = vec![0, 1];
    cfg.policies = vec![RunnerPolicy::Cmes, RunnerPolicy::Random];
    cfg.d1_size = 200;
    cfg.model_noise_sd = Some(30.0);

    let artifact = run_experiment(&cfg).unwrap();
    let dir = std::env::temp_dir().join("branin-demo");
    let files = emit(&artifact, &dir).unwrap();
    for f in &files {
        println!("wrote {}", f.display());
    }

    println!(
        "oracle optimum {:.4} at {:?}",
        artifact.optimum_value, artifact.optimum_x
    );
    println!("{:>8} {:>5} {:>12} {:>12}", "policy", "iter", "mean simple", "mean instant");
    for row in artifact.summary.iter().filter(|r| r.axis_value as usize % 5 == 0) {
        println!(
            "{:>8} {:>5} {:>12.4} {:>12.4}",
            row.policy, row.axis_value as usize, row.mean_simple, row.mean_instant
        );
    }
}
