//! Entropic optimal transport between two point clouds: balanced and
//! unbalanced plans, and minibatch pairing for flow matching.

use ndarray::{Array2, Axis};
use primeflow::flow::{couple_ot, sinkhorn, sq_euclidean, OtConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> primeflow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let src = Array2::from_shape_simple_fn((6, 2), || rng.sample::<f64, _>(StandardNormal));
    let mut dst = Array2::from_shape_simple_fn((6, 2), || rng.sample::<f64, _>(StandardNormal));
    dst.column_mut(0).mapv_inplace(|v| v + 3.0);

    let mut cost = sq_euclidean(&src, &dst);
    cost /= cost.mean().unwrap();
    let w = vec![1.0 / 6.0; 6];
    for (label, tau) in [("balanced", 1.0), ("unbalanced τ=0.95", 0.95)] {
        let sol = sinkhorn(&cost, &w, &w, 0.05, tau, tau, 10_000, 1e-9)?;
        println!(
            "{label}: {} iterations, mass {:.4}, cost {:.4}",
            sol.iterations,
            sol.plan.sum(),
            sol.transport_cost(&cost)
        );
        println!("  row sums {:.4}", sol.plan.sum_axis(Axis(1)));
    }

    let cfg = OtConfig { num_samples_per_condition: 6, ..OtConfig::default() };
    let pairs = couple_ot(&src, &dst, &cfg, &mut rng)?;
    for (a, b) in pairs.x0.rows().into_iter().zip(pairs.x1.rows()) {
        println!("({:+.2}, {:+.2}) -> ({:+.2}, {:+.2})", a[0], a[1], b[0], b[1]);
    }
    Ok(())
}
