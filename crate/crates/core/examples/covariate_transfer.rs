//! The full benchmark for one architecture: train on the bundled dataset,
//! sample every held-out condition and compare with the linear additive
//! baseline.
//!
//! `cargo run --release --example covariate_transfer -- [unet|mlp|fm_pca] [seed]`

use primeflow::benchmark::{self, BenchmarkOptions};
use primeflow::models::ModelKind;

fn main() -> primeflow::Result<()> {
    let mut args = std::env::args().skip(1);
    let kind = match args.next().as_deref() {
        None | Some("unet") => ModelKind::Unet,
        Some("mlp") => ModelKind::Mlp,
        Some("fm_pca") => ModelKind::FmPca,
        Some(other) => return Err(primeflow::Error::Config(format!("unknown model `{other}`"))),
    };
    let seed: u64 = args.next().map_or(Ok(0), |s| s.parse()).map_err(|e| primeflow::Error::Config(format!("{e}")))?;

    let ds = benchmark::dataset(0)?;
    let run = benchmark::run(&ds, &benchmark::train_config(kind), &BenchmarkOptions::default(), seed)?;
    println!(
        "{} seed {seed}: trained {} steps in {:.0}s, sampled in {:.0}s",
        kind.name(),
        run.losses.len(),
        run.train_seconds,
        run.sample_seconds
    );
    println!("{:<10} {:>8} {:>8} {:>8} {:>8}", "condition", "model", "additive", "control", "recall");
    for (c, ctrl) in &run.control_mmd {
        println!(
            "{:<10} {:>8.4} {:>8.4} {:>8.4} {:>8.2}",
            c.key(),
            run.report.value(c, "mmd_gex").unwrap_or(f64::NAN),
            run.baseline.value(c, "mmd_gex").unwrap_or(f64::NAN),
            ctrl,
            run.report.value(c, "deg_recall").unwrap_or(f64::NAN),
        );
    }
    println!(
        "mean mmd {:.4} (control {:.4}), wins {}/{}, recall {:.3}, ranks {:.3}/{:.3}",
        run.mean_mmd(),
        run.mean_control_mmd(),
        run.wins_over_baseline(),
        run.control_mmd.len(),
        run.mean_recall(),
        run.mean_rank_mmd(),
        run.mean_rank_recall()
    );
    Ok(())
}
