//! One acquisition round: sample optimum values from the current posterior
//! on f, score a query grid with the max-value entropy criterion, and show
//! which query wins.

use iqbo::acquisition::{
    cmes_score, sample_max_values, GridPosterior, MaxValueMethod,
};
use iqbo::cmp::{aggregate_posterior, decondition, fit_cmo, QueryLog};
use iqbo::envs::{EnvKind, EnvSpec, Environment};
use iqbo::kernel::KernelSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut spec = EnvSpec::new(EnvKind::Custom1d);
    spec.tau2 = 0.01;
    spec.obs_noise_sd = 0.05;
    let env = Environment::new(spec).unwrap();

    let d1 = env.generate_d1(60, 1e-3 / 60.0, 3).unwrap();
    let kernel = KernelSpec::isotropic(1, 0.2, 0.25).unwrap();
    let cmo = fit_cmo(&d1, &kernel, &kernel).unwrap();

    // a few observations away from the peak at x = 0.7
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut log = QueryLog::new();
    for a in [0.1, 0.3, 0.95] {
        let z = env.observe(&[a], None, &mut rng).unwrap();
        log.push(vec![a], z, env.noise_var(None)).unwrap();
    }

    let x_grid: Vec<Vec<f64>> = (0..=50).map(|i| vec![i as f64 / 50.0]).collect();
    let post_f = decondition(&cmo, &log, 0.0).unwrap();
    let maxes = sample_max_values(
        &post_f as &dyn GridPosterior,
        &x_grid,
        10,
        MaxValueMethod::Gumbel,
        42,
    )
    .unwrap();
    println!(
        "sampled optimum values: {:?}",
        maxes
            .values
            .iter()
            .map(|v| (v * 1e3).round() / 1e3)
            .collect::<Vec<_>>()
    );

    let post_g = aggregate_posterior(&cmo, &log, 0.0).unwrap();
    let mut best = (0.0, f64::NEG_INFINITY);
    println!("{:>6} {:>9}", "a", "score");
    for i in 0..=20 {
        let a = i as f64 / 20.0;
        let s = cmes_score(&[a], &post_g, &maxes).score;
        if s > best.1 {
            best = (a, s);
        }
        println!("{a:>6.2} {s:>9.4}");
    }
    println!("selected query: a = {:.2}", best.0);
}
