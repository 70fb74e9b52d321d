//! Plain GP regression on a 1-D function: fit, predict, and print the
//! posterior band on a small grid.

use iqbo::kernel::{gp_regress, KernelSpec};

fn main() {
    let f = |x: f64| (3.0 * x).sin() * (1.0 - x);
    let xs: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 / 7.0]).collect();
    let ys: Vec<f64> = xs.iter().map(|x| f(x[0])).collect();

    let kernel = KernelSpec::isotropic(1, 0.2, 1.0).unwrap();
    let post = gp_regress(&kernel, &xs, &ys, 1e-6).unwrap();

    println!("{:>6} {:>9} {:>9} {:>9}", "x", "truth", "mean", "sd");
    for i in 0..=20 {
        let x = i as f64 / 20.0;
        println!(
            "{x:>6.2} {:>9.4} {:>9.4} {:>9.4}",
            f(x),
            post.mean_at(&[x]),
            post.sd_at(&[x])
        );
    }
}
