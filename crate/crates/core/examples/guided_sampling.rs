//! Classifier-free guidance: how the guidance weight moves generated cells
//! relative to the conditional and unconditional fields.

use ndarray::Axis;
use primeflow::data::{split_covariate_transfer, synth_generate, Split, SynthConfig};
use primeflow::flow::{build_model, train, TrainConfig};
use primeflow::metrics::{mmd_rbf, Bandwidth};
use primeflow::models::ModelKind;
use primeflow::sampler::{euler_sample, SamplerConfig, Source};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> primeflow::Result<()> {
    let names = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
    let mut gen = SynthConfig::new(12, names("c", 2), names("p", 4));
    gen.cells_per_condition = 150;
    gen.effect_scale = 1.5;
    let ds = split_covariate_transfer(&synth_generate(&gen, 3)?, 0.5, 3)?;

    let mut cfg = TrainConfig::new(ModelKind::Mlp);
    cfg.hidden_dim = 64;
    cfg.learning_rate = 2e-3;
    cfg.batch_size = 64;
    cfg.epochs = 30;
    let mut model = build_model(&cfg, &ds, 0)?;
    train(&mut model, &ds, &cfg, 1)?;

    let cond = ds.test_conditions()[0].clone();
    let truth = ds.cells_of(&cond, Some(Split::Test));
    let ctrl = ds.controls_of(cond.covariate())?;
    println!("condition {} ({} true cells)", cond.key(), truth.nrows());
    println!("{:>6} {:>10} {:>12}", "w", "mmd", "mean shift");
    for w in [0.0, 0.5, 1.0, 1.5, 2.0, 3.0] {
        let sc = SamplerConfig { cfg_weight: w, num_samples: 200, steps: 50, source: Source::Gaussian, ..SamplerConfig::default() };
        // same seed for every weight, so all runs start from the same noise
        let x = euler_sample(&model, &cond, &sc, None, &mut ChaCha8Rng::seed_from_u64(4))?;
        let shift = (&x.mean_axis(Axis(0)).unwrap() - &ctrl.mean_axis(Axis(0)).unwrap()).mapv(f64::abs).sum();
        println!("{w:>6.1} {:>10.4} {shift:>12.3}", mmd_rbf(&x, &truth, Bandwidth::Median)?);
    }
    Ok(())
}
