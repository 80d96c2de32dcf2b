use ndarray::Array2;
use primeflow::data::{split_covariate_transfer, synth_generate, SynthConfig};
use primeflow::flow::{build_model, TrainConfig};
use primeflow::models::ModelKind;
use primeflow::sampler::{euler_integrate, euler_sample, sample_dataset, Guidance, SamplerConfig, Source, VelocityField};
use primeflow::Result;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `v = sin(x)·k + ⟨c, 1⟩ − t`, coupling state, condition and time.
struct Mixed {
    dim: usize,
    k: f64,
}

impl VelocityField for Mixed {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, x: &[f64], c: &[f64], t: &[f64]) -> Result<Vec<f64>> {
        let cw = c.len() / t.len();
        Ok(x.iter()
            .enumerate()
            .map(|(i, xi)| {
                let row = i / self.dim;
                let shift: f64 = c[row * cw..(row + 1) * cw].iter().sum();
                xi.sin() * self.k + shift - t[row]
            })
            .collect())
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn guidance_weights_one_and_zero_reduce_exactly(
        rows in 1usize..40,
        dim in 1usize..4,
        k in -2.0..2.0f64,
        start in prop::collection::vec(-3.0..3.0f64, 160),
        cond in prop::collection::vec(-1.0..1.0f64, 3),
        steps in 1usize..30,
    ) {
        let field = Mixed { dim, k };
        let x0 = Array2::from_shape_fn((rows, dim), |(i, j)| start[(i * dim + j) % start.len()]);
        let null = vec![0.0, 0.0, 1.0];
        let run = |g| euler_integrate(&field, x0.clone(), &cond, &null, g, steps).unwrap();
        let only = run(Guidance::ConditionalOnly);
        let w1 = run(Guidance::Cfg(1.0));
        prop_assert!(only.iter().zip(&w1).all(|(a, b)| a.to_bits() == b.to_bits()));
        let w0 = run(Guidance::Cfg(0.0));
        let uncond = euler_integrate(&field, x0.clone(), &null, &null, Guidance::ConditionalOnly, steps).unwrap();
        prop_assert!(uncond.iter().zip(&w0).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn sampling_is_a_function_of_the_seed() {
    let mut cfg = SynthConfig::new(6, vec!["a".into(), "b".into()], vec!["w".into(), "x".into(), "y".into(), "z".into()]);
    cfg.cells_per_condition = 10;
    let ds = split_covariate_transfer(&synth_generate(&cfg, 1).unwrap(), 0.5, 1).unwrap();
    let mut tc = TrainConfig::new(ModelKind::Mlp);
    tc.hidden_dim = 8;
    let model = build_model(&tc, &ds, 2).unwrap();
    let conditions = ds.test_conditions();
    for source in [Source::Gaussian, Source::ControlCells] {
        let sc = SamplerConfig { steps: 5, num_samples: 21, cfg_weight: 1.7, source, ..SamplerConfig::default() };
        let a = sample_dataset(&model, &conditions, &sc, Some(&ds), 4).unwrap();
        let b = sample_dataset(&model, &conditions, &sc, Some(&ds), 4).unwrap();
        assert_eq!(a, b);
        let c = sample_dataset(&model, &conditions, &sc, Some(&ds), 5).unwrap();
        assert_ne!(a.cells(), c.cells());
    }
}

#[test]
fn control_source_requires_controls() {
    let mut cfg = SynthConfig::new(4, vec!["a".into(), "b".into()], vec!["x".into(), "y".into()]);
    cfg.cells_per_condition = 5;
    let ds = split_covariate_transfer(&synth_generate(&cfg, 0).unwrap(), 0.5, 0).unwrap();
    let model = build_model(&TrainConfig::new(ModelKind::Mlp), &ds, 0).unwrap();
    let sc = SamplerConfig { source: Source::ControlCells, num_samples: 3, ..SamplerConfig::default() };
    let c = &ds.test_conditions()[0];
    let err = euler_sample(&model, c, &sc, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert!(err.to_string().contains("control"), "{err}");
}
