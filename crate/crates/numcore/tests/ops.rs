use numcore::{
    grad_check, linear, self_attention, AttentionWeights, Bindings, Graph, ParameterSet, Result,
    Tensor, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Sum of `y` weighted by fixed pseudo-random coefficients, so that
/// shift-invariant ops (softmax, normalization) still have informative
/// gradients.
fn probe(g: &mut Graph, y: Var) -> Result<Var> {
    let n = g.value(y).len();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 + 13) % 101) as f64 / 50.0 - 1.0).collect();
    let w = g.constant(g.shape(y).to_vec().as_slice(), w)?;
    let prod = g.mul(y, w)?;
    g.sum(prod)
}

type OpFn = fn(&mut Graph, &Bindings) -> Result<Var>;

fn params(seed: u64, entries: &[(&str, &[usize])]) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParameterSet::new();
    for (name, shape) in entries {
        p.insert(*name, random(&mut rng, shape));
    }
    p
}

fn check_op(name: &str, entries: &[(&str, &[usize])], f: OpFn) {
    for seed in 0..20 {
        let p = params(seed, entries);
        let err = grad_check(
            |g, b| {
                let y = f(g, b)?;
                probe(g, y)
            },
            &p,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{name}: seed {seed} rel err {err}");
    }
}

#[test]
fn every_op_passes_finite_differences() {
    check_op("add", &[("a", &[2, 3]), ("b", &[2, 3])], |g, b| {
        g.add(b.get("a")?, b.get("b")?)
    });
    check_op("sub", &[("a", &[2, 3]), ("b", &[2, 3])], |g, b| {
        g.sub(b.get("a")?, b.get("b")?)
    });
    check_op("mul", &[("a", &[2, 3]), ("b", &[2, 3])], |g, b| {
        g.mul(b.get("a")?, b.get("b")?)
    });
    check_op("scale", &[("a", &[4])], |g, b| g.scale(b.get("a")?, -2.5));
    check_op("add_suffix", &[("a", &[2, 3, 4]), ("b", &[4])], |g, b| {
        g.add_suffix(b.get("a")?, b.get("b")?)
    });
    check_op("add_prefix", &[("a", &[2, 3, 4]), ("b", &[2, 3])], |g, b| {
        g.add_prefix(b.get("a")?, b.get("b")?)
    });
    check_op("mul_prefix", &[("a", &[2, 3, 4]), ("b", &[2, 3])], |g, b| {
        g.mul_prefix(b.get("a")?, b.get("b")?)
    });
    check_op("add_axis", &[("a", &[2, 3, 4]), ("b", &[3])], |g, b| {
        g.add_axis(b.get("a")?, b.get("b")?, 1)
    });
    check_op("matmul", &[("a", &[3, 4]), ("b", &[4, 2])], |g, b| {
        g.matmul(b.get("a")?, b.get("b")?)
    });
    check_op("batch_matmul", &[("a", &[2, 3, 4]), ("b", &[2, 4, 2])], |g, b| {
        g.batch_matmul(b.get("a")?, b.get("b")?)
    });
    check_op("permute", &[("a", &[2, 3, 4])], |g, b| g.permute(b.get("a")?, &[2, 0, 1]));
    check_op("reshape", &[("a", &[2, 6])], |g, b| g.reshape(b.get("a")?, &[3, 4]));
    check_op("silu", &[("a", &[7])], |g, b| g.silu(b.get("a")?));
    check_op("softmax", &[("a", &[3, 5])], |g, b| g.softmax(b.get("a")?));
    check_op("mean", &[("a", &[3, 5])], |g, b| {
        let m = g.mean(b.get("a")?)?;
        g.mul(m, m)
    });
    check_op("conv1d", &[("x", &[2, 3, 7]), ("w", &[4, 3, 3])], |g, b| {
        g.conv1d(b.get("x")?, b.get("w")?, 1, 1)
    });
    check_op("conv1d_stride2", &[("x", &[2, 3, 8]), ("w", &[2, 3, 3])], |g, b| {
        g.conv1d(b.get("x")?, b.get("w")?, 2, 1)
    });
    check_op(
        "group_norm",
        &[("x", &[2, 4, 5]), ("gamma", &[4]), ("beta", &[4])],
        |g, b| g.group_norm(b.get("x")?, b.get("gamma")?, b.get("beta")?, 2),
    );
    check_op("concat", &[("a", &[2, 3, 2]), ("b", &[2, 1, 2])], |g, b| {
        g.concat(&[b.get("a")?, b.get("b")?], 1)
    });
    check_op("narrow", &[("a", &[2, 5, 3])], |g, b| g.narrow(b.get("a")?, 1, 1, 3));
    check_op("pad_end", &[("a", &[2, 3, 3])], |g, b| g.pad_end(b.get("a")?, 2, 2));
    check_op("upsample2", &[("a", &[2, 3])], |g, b| g.upsample2(b.get("a")?));
    check_op("sinusoidal", &[("a", &[2, 3])], |g, b| g.sinusoidal(b.get("a")?, 6, 100.0));
    check_op("mask_mul", &[("a", &[4])], |g, b| {
        g.mask_mul(b.get("a")?, vec![0.0, 2.0, 2.0, 0.0])
    });
    check_op("linear", &[("x", &[2, 3, 4]), ("w", &[4, 5]), ("b", &[5])], |g, b| {
        linear(g, b.get("x")?, b.get("w")?, Some(b.get("b")?))
    });
}

fn attention_params(seed: u64, d: usize, len: usize) -> ParameterSet {
    params(
        seed,
        &[
            ("x", &[len, d]),
            ("w_qkv", &[d, 3 * d]),
            ("b_qkv", &[3 * d]),
            ("w_out", &[d, d]),
            ("b_out", &[d]),
        ],
    )
}

fn attention(g: &mut Graph, b: &Bindings, heads: usize) -> Result<Var> {
    let w = AttentionWeights {
        w_qkv: b.get("w_qkv")?,
        b_qkv: b.get("b_qkv")?,
        w_out: b.get("w_out")?,
        b_out: b.get("b_out")?,
    };
    self_attention(g, b.get("x")?, heads, w)
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let i = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let m = g.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = g.matmul(i, m).unwrap();
    assert_eq!(g.value(y), &[1.0, 2.0, 3.0, 4.0]);

    let a = g.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
    let b = g.constant(&[2, 1], vec![3.0, 4.0]).unwrap();
    let y = g.matmul(a, b).unwrap();
    assert_eq!(g.value(y), &[11.0]);

    let err = g.matmul(a, a).unwrap_err().to_string();
    assert!(err.contains("[1, 2]"), "{err}");
}

#[test]
fn matmul_gradient_tight() {
    for seed in 0..5 {
        let p = params(seed, &[("a", &[3, 3]), ("b", &[3, 3])]);
        let err = grad_check(
            |g, b| {
                let y = g.matmul(b.get("a")?, b.get("b")?)?;
                g.sum(y)
            },
            &p,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}

#[test]
fn conv1d_examples() {
    let mut g = Graph::new();
    let x = g.constant(&[1, 5], vec![0.3, -1.0, 2.0, 4.5, 0.0]).unwrap();
    let id = g.constant(&[1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap();
    let y = g.conv1d(x, id, 1, 1).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let x = g.constant(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    let ones = g.constant(&[1, 1, 3], vec![1.0; 3]).unwrap();
    let y = g.conv1d(x, ones, 1, 1).unwrap();
    assert_eq!(g.value(y), &[3.0, 6.0, 5.0]);

    // length' = floor((L + 2·pad − k)/stride) + 1
    let x = g.constant(&[2, 7], vec![0.0; 14]).unwrap();
    let w = g.constant(&[3, 2, 3], vec![0.0; 18]).unwrap();
    let y = g.conv1d(x, w, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[3, 4]);

    let tiny = g.constant(&[2, 1], vec![0.0; 2]).unwrap();
    assert!(g.conv1d(tiny, w, 1, 0).is_err());
}

#[test]
fn conv1d_gradient_tight() {
    for seed in 0..5 {
        let p = params(seed, &[("x", &[3, 6]), ("w", &[2, 3, 3])]);
        let err = grad_check(
            |g, b| {
                let y = g.conv1d(b.get("x")?, b.get("w")?, 1, 1)?;
                probe(g, y)
            },
            &p,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}

#[test]
fn attention_singleton_is_value_projection() {
    let d = 4;
    let mut p = attention_params(3, d, 1);
    // Identity output projection, zero bias: the result is exactly the value projection.
    let mut eye = vec![0.0; d * d];
    (0..d).for_each(|i| eye[i * d + i] = 1.0);
    p.insert("w_out", Tensor::new(vec![d, d], eye).unwrap());
    p.insert("b_out", Tensor::zeros(&[d]));
    let mut g = Graph::new();
    let b = g.bind(&p).unwrap();
    let y = attention(&mut g, &b, 2).unwrap();

    let x = p.get("x").unwrap().data();
    let w = p.get("w_qkv").unwrap().data();
    let bias = p.get("b_qkv").unwrap().data();
    for j in 0..d {
        let v: f64 = (0..d).map(|i| x[i] * w[i * 3 * d + 2 * d + j]).sum::<f64>() + bias[2 * d + j];
        assert!((g.value(y)[j] - v).abs() < 1e-12);
    }
}

#[test]
fn attention_is_permutation_equivariant() {
    let (d, len) = (4, 5);
    let p = attention_params(11, d, len);
    let perm = [3usize, 0, 4, 1, 2];
    let mut q = p.clone();
    let x = p.get("x").unwrap().data();
    let shuffled: Vec<f64> = perm.iter().flat_map(|&r| x[r * d..(r + 1) * d].to_vec()).collect();
    q.insert("x", Tensor::new(vec![len, d], shuffled).unwrap());

    let mut g = Graph::new();
    let b = g.bind(&p).unwrap();
    let y = attention(&mut g, &b, 2).unwrap();
    let mut h = Graph::new();
    let c = h.bind(&q).unwrap();
    let z = attention(&mut h, &c, 2).unwrap();
    for (row, &src) in perm.iter().enumerate() {
        for j in 0..d {
            let a = g.value(y)[src * d + j];
            let b = h.value(z)[row * d + j];
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_gradient() {
    for seed in 0..20 {
        let p = attention_params(seed, 4, 3);
        let err = grad_check(
            |g, b| {
                let y = attention(g, b, 2)?;
                probe(g, y)
            },
            &p,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn attention_rejects_bad_heads() {
    let p = attention_params(0, 4, 3);
    let mut g = Graph::new();
    let b = g.bind(&p).unwrap();
    let err = attention(&mut g, &b, 3).unwrap_err();
    assert!(matches!(err, numcore::Error::Config(_)));
}

#[test]
fn silu_values_and_slope() {
    let mut g = Graph::new();
    let x = g.leaf(&[2], vec![0.0, 1.0], true).unwrap();
    let y = g.silu(x).unwrap();
    assert_eq!(g.value(y)[0], 0.0);
    let expected = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((g.value(y)[1] - expected).abs() < 1e-15);
    assert!((g.value(y)[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
    let picked = g.narrow(y, 0, 0, 1).unwrap();
    let s = g.sum(picked).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap()[0], 0.5);
}

#[test]
fn non_finite_values_are_rejected() {
    let mut g = Graph::new();
    let x = g.constant(&[1], vec![1e300]).unwrap();
    assert!(g.scale(x, 1e300).is_err());
}

fn run_block(seed: u64) -> Vec<u64> {
    let p = params(seed, &[("x", &[2, 8, 6]), ("w", &[8, 8, 3]), ("gamma", &[8]), ("beta", &[8])]);
    let mut g = Graph::new();
    let b = g.bind(&p).unwrap();
    let h = g.conv1d(b.get("x").unwrap(), b.get("w").unwrap(), 1, 1).unwrap();
    let h = g
        .group_norm(h, b.get("gamma").unwrap(), b.get("beta").unwrap(), 8)
        .unwrap();
    let h = g.silu(h).unwrap();
    let s = probe(&mut g, h).unwrap();
    let grads = g.backward(s).unwrap();
    let mut bits: Vec<u64> = g.value(h).iter().map(|v| v.to_bits()).collect();
    bits.extend(grads.get(b.get("w").unwrap()).unwrap().iter().map(|v| v.to_bits()));
    bits
}

#[test]
fn forward_and_backward_are_bitwise_deterministic() {
    assert_eq!(run_block(5), run_block(5));
}

proptest! {
    #[test]
    fn conv_output_length(len in 3usize..40, pad in 0usize..3, stride in 1usize..=2) {
        let mut g = Graph::new();
        let x = g.constant(&[1, len], vec![1.0; len]).unwrap();
        let w = g.constant(&[1, 1, 3], vec![1.0; 3]).unwrap();
        let y = g.conv1d(x, w, stride, pad).unwrap();
        prop_assert_eq!(g.shape(y)[1], (len + 2 * pad - 3) / stride + 1);
    }

    #[test]
    fn pad_then_narrow_is_identity(rows in 1usize..5, cols in 1usize..9, extra in 0usize..5) {
        let data: Vec<f64> = (0..rows * cols).map(|i| i as f64 * 0.37 - 1.0).collect();
        let mut g = Graph::new();
        let x = g.constant(&[rows, cols], data.clone()).unwrap();
        let p = g.pad_end(x, 1, extra).unwrap();
        let back = g.narrow(p, 1, 0, cols).unwrap();
        prop_assert_eq!(g.value(back), data.as_slice());
    }
}
