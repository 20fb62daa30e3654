//! Times one training step of the network at a few widths.

use std::time::Instant;

use aufed::nn::{update_running_stats, AfrPriors, Batch, Fwd, MerNet, Mode, ModelConfig};
use aufed::priors::{PriorConfig, PriorPack};
use aufed::{Graph, Sgd, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> aufed::Result<()> {
    if std::env::var("F32").is_ok() {
        return run::<f32>();
    }
    run::<f64>()
}

fn run<T: aufed::Scalar>() -> aufed::Result<()> {
    let prior = PriorConfig::standard();
    let pack = PriorPack::uniform(prior.adjacency()?.0, prior.catalog.regions())?;
    let priors = AfrPriors::from_pack(&pack);
    let variants = [
        ("desk", ModelConfig { lfe_channels: [4, 8], sse_ffn: 75, afe_hidden: Some(16), gat_width: 16, inception_branch: 4, of_side: 16, ..Default::default() }),
        ("desk-s32", ModelConfig { lfe_channels: [4, 8], sse_ffn: 75, afe_hidden: Some(16), gat_width: 16, inception_branch: 4, of_side: 32, ..Default::default() }),
        ("mid", ModelConfig { lfe_channels: [8, 16], sse_ffn: 150, afe_hidden: Some(32), gat_width: 32, inception_branch: 8, of_side: 32, ..Default::default() }),
    ];
    let b: usize = std::env::var("B").ok().and_then(|v| v.parse().ok()).unwrap_or(16);
    for (name, cfg) in variants {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (net, mut state) = MerNet::new::<T, _>(&cfg, &prior.catalog, &mut rng)?;
        let batch = Batch {
            rois: Tensor::randn(&[b, 65, 3, 5, 5], 1.0, &mut rng),
            flow: Tensor::randn(&[b, 3, cfg.of_side, cfg.of_side], 1.0, &mut rng),
            aus: vec![T::zero(); b * 12],
            labels: vec![0; b],
        };
        let mut opt = Sgd::new(T::cst(0.01), T::cst(0.9))?;
        let t0 = Instant::now();
        let steps = std::env::var("STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(5);
        for _ in 0..steps {
            let mut g = Graph::new();
            let snapshot = state.buffers.clone();
            let mut f = Fwd::new(&mut g, &state.params, &snapshot, Mode::Train);
            let out = net.forward(&mut f, &batch, &priors, 0.5)?;
            let nodes = f.into_bn_nodes();
            state.params.zero_grad();
            g.backward(out.loss, &mut state.params)?;
            update_running_stats(&mut state.buffers, &g, &nodes)?;
            opt.step(&mut state.params)?;
        }
        let per = t0.elapsed().as_secs_f64() / (steps * b) as f64;
        println!("{name}: {} params, {:.2} ms/sample", state.params.numel(), per * 1e3);
    }
    Ok(())
}
