//! Scores the linear additive baseline on the bundled benchmark and shows
//! the per-condition metric table.

use primeflow::benchmark;
use primeflow::metrics::{evaluate, EvalOptions, LinearAdditive};

fn main() -> primeflow::Result<()> {
    let ds = benchmark::dataset(0)?;
    let conditions = ds.test_conditions();
    let la = LinearAdditive::fit(&ds)?;
    let samples = la.sample_dataset(&conditions, 200, 0)?;
    let opts = EvalOptions { k: 10, ..EvalOptions::default() };
    let report = evaluate(&samples, &ds, &opts, "linear_additive")?;
    print!("{}", report.to_csv()?);
    for (metric, mean) in report.summary() {
        println!("mean {metric:<20} {mean:.4}");
    }
    Ok(())
}
