//! First-order convergence of the Euler integrator on v(x, t) = c·t.

use primeflow::sampler::euler_exactness_check;

fn main() -> primeflow::Result<()> {
    let slope = 2.0;
    let mut prev: Option<f64> = None;
    println!("{:>6} {:>12} {:>8}", "steps", "error", "ratio");
    for steps in [10, 20, 40, 80, 160, 320] {
        let err = euler_exactness_check(steps, slope)?;
        let ratio = prev.map_or(String::new(), |p| format!("{:.6}", p / err));
        println!("{steps:>6} {err:>12.3e} {ratio:>8}");
        prev = Some(err);
    }
    // left-endpoint Euler undershoots by exactly c / (2n)
    println!("predicted at 100 steps: {:.6}", slope / 200.0);
    Ok(())
}
