//! Indirect-query bandit: each query is a mixing policy over arms and the
//! feedback is the policy's expected reward plus noise. The exact
//! finite-dimensional aggregate posterior concentrates on the best arm's
//! reward after a handful of pulls.

use iqbo::envs::{bandit_posterior, BanditSpec, EnvKind, EnvSpec, Environment};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let rewards = vec![1.0, 0.2, -0.5];
    let spec = {
        let mut s = EnvSpec::new(EnvKind::Bandit);
        s.obs_noise_sd = 0.1;
        s
    };
    let bandit = BanditSpec::with_rbf_policies(rewards.clone(), 0.1, 0.15).unwrap();
    let env = Environment::bandit(spec, bandit).unwrap();

    let policy = env.bandit_spec().unwrap().policy();
    let prior = bandit_posterior(&[0.0, 0.0, 0.0], &DMatrix::identity(3, 3), policy).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut queries = Vec::new();
    let mut zs = Vec::new();
    let mut noise = Vec::new();
    println!("{:>6} {:>9} {:>9} {:>9}", "a", "z", "mean(a)", "sd(a)");
    for i in 0..10 {
        // sweep queries across the policy simplex parameterization
        let a = vec![(i as f64 + 0.5) / 10.0];
        let z = env.observe(&a, None, &mut rng).unwrap();
        queries.push(a.clone());
        zs.push(z);
        noise.push(env.noise_var(None));
        let post = prior.condition(&queries, &zs, &noise).unwrap();
        println!(
            "{:>6.2} {z:>9.4} {:>9.4} {:>9.4}",
            a[0],
            post.mean_at(&a),
            post.var_at(&a).sqrt()
        );
    }

    let post = prior.condition(&queries, &zs, &noise).unwrap();
    // query concentrated on the best arm (centered at 1/6 for 3 arms)
    let best = [1.0 / 6.0];
    println!(
        "estimated best-arm reward {:.3} (truth {:.3})",
        post.mean_at(&best),
        env.true_g(&best, None).unwrap()
    );
}
