use numcore::{grad_check_strided, Graph, ParameterSet, Tensor};
use primeflow::models::{Architecture, MlpConfig, UnetConfig, VelocityNet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const M: usize = 5;
const C: usize = 4;

fn unet(conv_resample: bool, use_scale_shift_norm: bool) -> Architecture {
    Architecture::Unet(UnetConfig {
        hidden_dim: 8,
        channel_mult: vec![1, 2],
        num_res_blocks: 1,
        attention_resolutions: vec![2],
        num_heads: 2,
        conv_resample,
        use_scale_shift_norm,
        dropout: 0.1,
        n_layers_gene_expression: 2,
        n_layers_conditions: 2,
        n_layers_time: 2,
        gene_encoding_dim: 4,
        time_encoding_dim: 4,
    })
}

fn mlp() -> Architecture {
    let mut cfg = MlpConfig::new(12);
    cfg.time_encoding_dim = 6;
    cfg.dropout = 0.1;
    Architecture::Mlp(cfg)
}

fn archs() -> Vec<(&'static str, Architecture)> {
    vec![
        ("unet", unet(true, true)),
        ("unet-offset", unet(true, false)),
        ("unet-nearest", unet(false, true)),
        ("mlp", mlp()),
    ]
}

fn inputs(batch: usize, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..batch * M).map(|_| rng.gen_range(0.0..3.0)).collect();
    let mut c = vec![0.0; batch * C];
    for b in 0..batch {
        c[b * C + rng.gen_range(0..C - 1)] = 1.0;
    }
    let t = (0..batch).map(|_| rng.gen_range(0.0..1.0)).collect();
    (x, c, t)
}

/// Replaces the zero-initialized output layer so gradients reach every
/// parameter.
fn wake(net: &mut VelocityNet, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = net
        .params
        .names()
        .filter(|n| n.starts_with("mlp.out") || n.starts_with("unet.out.conv"))
        .map(String::from)
        .collect();
    for n in names {
        let t = net.params.get(&n).unwrap();
        let data = (0..t.numel()).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let shape = t.shape().to_vec();
        net.params.insert(n, Tensor::new(shape, data).unwrap());
    }
}

#[test]
fn zero_output_at_init() {
    for (name, arch) in archs() {
        let net = VelocityNet::new(arch, M, C, 3).unwrap();
        let (x, c, t) = inputs(4, 1);
        let v = net.predict(&x, &c, &t).unwrap();
        assert_eq!(v.len(), 4 * M, "{name}");
        assert!(v.iter().all(|&a| a == 0.0), "{name}");
    }
}

#[test]
fn batch_order_is_irrelevant() {
    for (name, arch) in archs() {
        let mut net = VelocityNet::new(arch, M, C, 3).unwrap();
        wake(&mut net, 4);
        let (x, c, t) = inputs(3, 2);
        let v = net.predict(&x, &c, &t).unwrap();
        let perm = [2, 0, 1];
        let gather = |v: &[f64], w: usize| perm.iter().flat_map(|&i| v[i * w..(i + 1) * w].to_vec()).collect::<Vec<_>>();
        let vp = net.predict(&gather(&x, M), &gather(&c, C), &gather(&t, 1)).unwrap();
        for (a, b) in gather(&v, M).iter().zip(&vp) {
            assert!((a - b).abs() < 1e-12, "{name}");
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    for (name, arch) in archs() {
        let mut net = VelocityNet::new(arch, M, C, 7).unwrap();
        wake(&mut net, 8);
        let (x, c, t) = inputs(2, 5);
        let mut all = net.params.clone();
        all.insert("input.x", Tensor::new(vec![2, M], x).unwrap());
        let err = grad_check_strided(
            |g, b| {
                let xv = b.get("input.x")?;
                let cv = g.constant(&[2, C], c.clone())?;
                let tv = g.constant(&[2], t.clone())?;
                let out = net
                    .forward(g, b, xv, cv, tv, None)
                    .map_err(|e| numcore::Error::Evaluation(e.to_string()))?;
                let sq = g.mul(out, out)?;
                g.mean(sq)
            },
            &all,
            1e-5,
            16,
        )
        .unwrap();
        assert!(err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn every_parameter_receives_gradient() {
    for (name, arch) in archs() {
        let mut net = VelocityNet::new(arch, M, C, 9).unwrap();
        wake(&mut net, 10);
        let (x, c, t) = inputs(3, 6);
        let mut g = Graph::new();
        let b = g.bind(&net.params).unwrap();
        let xv = g.constant(&[3, M], x).unwrap();
        let cv = g.constant(&[3, C], c).unwrap();
        let tv = g.constant(&[3], t).unwrap();
        let out = net.forward(&mut g, &b, xv, cv, tv, None).unwrap();
        let target = g.constant(&[3, M], vec![1.0; 3 * M]).unwrap();
        let loss = g.mse(out, target).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut params: ParameterSet = net.params.clone();
        params.zero_grad();
        b.accumulate(&grads, &mut params).unwrap();
        for (pname, p) in params.iter() {
            let gsum: f64 = p.grad().unwrap().iter().map(|v| v.abs()).sum();
            assert!(gsum > 0.0, "{name}: `{pname}` has no gradient");
        }
    }
}

#[test]
fn null_condition_ignores_the_original() {
    for (name, arch) in archs() {
        let mut net = VelocityNet::new(arch, M, C, 11).unwrap();
        wake(&mut net, 12);
        let (x, _, t) = inputs(2, 7);
        let null = [0.0, 0.0, 0.0, 1.0];
        let c: Vec<f64> = null.iter().chain(&null).copied().collect();
        let a = net.predict(&x, &c, &t).unwrap();
        let b = net.predict(&x, &c, &t).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn dropout_is_keyed_to_the_rng() {
    let mut net = VelocityNet::new(unet(true, true), M, C, 1).unwrap();
    wake(&mut net, 2);
    let (x, c, t) = inputs(2, 3);
    let run = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let b = g.bind(&net.params).unwrap();
        let xv = g.constant(&[2, M], x.clone()).unwrap();
        let cv = g.constant(&[2, C], c.clone()).unwrap();
        let tv = g.constant(&[2], t.clone()).unwrap();
        let out = net.forward(&mut g, &b, xv, cv, tv, Some(&mut rng)).unwrap();
        g.value(out).to_vec()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
    assert_ne!(run(5), net.predict(&x, &c, &t).unwrap());
}

#[test]
fn shape_mismatch_is_a_dimension_error() {
    let net = VelocityNet::new(mlp(), M, C, 0).unwrap();
    let err = net.predict(&[0.0; M + 1], &[0.0; C], &[0.5]).unwrap_err();
    assert!(matches!(err, primeflow::Error::Dimension(_)), "{err}");
}

#[test]
fn same_seed_same_parameters() {
    for (_, arch) in archs() {
        let a = VelocityNet::new(arch.clone(), M, C, 21).unwrap();
        let b = VelocityNet::new(arch, M, C, 21).unwrap();
        assert_eq!(a, b);
    }
}
