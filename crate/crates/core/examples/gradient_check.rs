//! Checks reverse-mode gradients of the flow matching loss against central
//! finite differences for both velocity architectures.

use ndarray::Array2;
use numcore::{grad_check, grad_check_strided};
use primeflow::flow::{cfm_loss, sample_path_point, Interpolation, TrainConfig};
use primeflow::models::{Architecture, MlpConfig, ModelKind, VelocityNet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> primeflow::Result<()> {
    let (m, c, n) = (6, 3, 4);
    let mut unet = TrainConfig::new(ModelKind::Unet);
    unet.hidden_dim = 8;
    unet.channel_mult = vec![1, 2];
    unet.attention_resolutions = vec![2];
    unet.num_heads = 2;
    unet.gene_encoding_dim = 4;
    let archs = [("mlp", Architecture::Mlp(MlpConfig::new(8))), ("unet", unet.architecture())];

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x0 = Array2::from_shape_simple_fn((n, m), || rng.gen_range(-1.0..1.0));
    let x1 = Array2::from_shape_simple_fn((n, m), || rng.gen_range(0.0..3.0));
    let t = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let batch = sample_path_point(x0, x1, t, 0.05, Interpolation::Trigonometric, &mut rng)?;
    let mut cond = vec![0.0; n * c];
    for i in 0..n {
        cond[i * c + i % c] = 1.0;
    }

    for (name, arch) in archs {
        let mut net = VelocityNet::new(arch, m, c, 0)?;
        // the output layer starts at zero; perturb everything so all paths carry gradient
        for (_, p) in net.params.iter_mut() {
            p.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
        }
        let params = net.params.clone();
        let loss = |g: &mut numcore::Graph, b: &numcore::Bindings| {
            cfm_loss(&net, g, b, &batch, &cond, None).map_err(|e| numcore::Error::Evaluation(e.to_string()))
        };
        let err = if params.num_scalars() < 2000 {
            grad_check(loss, &params, 1e-5)?
        } else {
            grad_check_strided(loss, &params, 1e-5, 8)?
        };
        println!("{name}: {} parameters, max relative error {err:.2e}", params.num_scalars());
    }
    Ok(())
}
