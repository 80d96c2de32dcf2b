//! Trains an MLP velocity field on a small synthetic dataset, saves the
//! checkpoint and reloads it.

use primeflow::data::{split_covariate_transfer, synth_generate, SynthConfig};
use primeflow::flow::{build_model, train, TrainConfig};
use primeflow::models::{FlowModel, ModelKind};

fn main() -> primeflow::Result<()> {
    let covs = vec!["liver".to_string(), "lung".to_string()];
    let perts: Vec<String> = ["KRAS", "TP53", "MYC", "EGFR"].iter().map(|s| s.to_string()).collect();
    let mut gen = SynthConfig::new(16, covs, perts);
    gen.cells_per_condition = 200;
    let ds = split_covariate_transfer(&synth_generate(&gen, 7)?, 0.5, 7)?;

    let mut cfg = TrainConfig::new(ModelKind::Mlp);
    cfg.hidden_dim = 64;
    cfg.learning_rate = 2e-3;
    cfg.batch_size = 64;
    cfg.epochs = 20;
    let mut model = build_model(&cfg, &ds, 0)?;
    let trainer = train(&mut model, &ds, &cfg, 1)?;

    let losses = &trainer.losses;
    let every = (losses.len() / 10).max(1);
    for (i, chunk) in losses.chunks(every).enumerate() {
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        println!("steps {:>4}..{:<4} loss {mean:.4}", i * every, i * every + chunk.len());
    }

    let dir = std::env::temp_dir().join("primeflow-train-example");
    model.save(&dir, serde_json::json!({ "steps": trainer.steps() }))?;
    let (back, extra) = FlowModel::load(&dir)?;
    assert_eq!(back, model);
    println!("saved and reloaded {} ({extra})", dir.display());
    Ok(())
}
