//! Deconditioning in action: observe only noisy local averages of a 1-D
//! function, then recover a posterior on the function itself.
//!
//! Queries live in the same interval as the inputs, but each observation is
//! f averaged over a Gaussian neighborhood of the query. The conditional
//! mean operator is fit from a matched dataset of (input, query) pairs, and
//! aggregate observations are pushed through it to update beliefs about f.

use iqbo::cmp::{decondition, fit_cmo, QueryLog};
use iqbo::envs::{EnvKind, EnvSpec, Environment};
use iqbo::kernel::KernelSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut spec = EnvSpec::new(EnvKind::Custom1d);
    spec.tau2 = 0.01;
    spec.obs_noise_sd = 0.05;
    let env = Environment::new(spec).unwrap();

    let d1 = env.generate_d1(60, 1e-3 / 60.0, 7).unwrap();
    let kernel = KernelSpec::isotropic(1, 0.2, 0.25).unwrap();
    let cmo = fit_cmo(&d1, &kernel, &kernel).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut log = QueryLog::new();
    for i in 0..12 {
        let a = vec![(2 * i + 1) as f64 / 24.0];
        let z = env.observe(&a, None, &mut rng).unwrap();
        log.push(a, z, env.noise_var(None)).unwrap();
    }

    let post = decondition(&cmo, &log, 0.0).unwrap();
    println!("{:>6} {:>9} {:>9} {:>9}", "x", "f(x)", "mean", "sd");
    for i in 0..=20 {
        let x = i as f64 / 20.0;
        println!(
            "{x:>6.2} {:>9.4} {:>9.4} {:>9.4}",
            env.f(&[x]).unwrap(),
            post.mean_at(&[x]),
            post.sd_at(&[x])
        );
    }
}
