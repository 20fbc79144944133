//! Compare the hand-written backward pass against central differences on
//! a few adapter and context coordinates.

use diffusion_iqa::config::RunConfig;
use diffusion_iqa::model::{build_toy_bundle, CONTEXT_PARAM};
use diffusion_iqa::schedule::{seeded_rng, Latent};

fn main() -> diffusion_iqa::Result<()> {
    let mut bundle = build_toy_bundle(&RunConfig::default())?;
    // Nonzero B so that A has a gradient as well.
    for block in &mut bundle.readout.blocks {
        block.key.lora.b.fill(0.5);
        block.value.lora.b.fill(-0.5);
    }
    let mut rng = seeded_rng(0);
    let z0 = Latent::standard_normal(bundle.latent_shape(), &mut rng);
    let draws = bundle.draw_inference(bundle.chain, &mut rng)?;
    let (_, grads) = bundle.score_grad_at(&z0, &draws, bundle.chain)?;

    let h = 1e-4;
    for (name, idx) in [
        ("block.0.k.lora_B", [3, 1]),
        ("block.0.k.lora_A", [2, 7]),
        ("block.0.v.lora_B", [5, 0]),
        ("block.1.k.lora_A", [0, 4]),
        (CONTEXT_PARAM, [2, 9]),
    ] {
        let f = |delta: f64| -> diffusion_iqa::Result<f64> {
            let mut b = bundle.clone();
            b.param_mut(name).expect("known parameter")[idx] += delta;
            Ok(b.score_latent_at(&z0, &draws, b.chain)?.score)
        };
        let numeric = (f(h)? - f(-h)?) / (2.0 * h);
        let analytic = grads[name][idx];
        println!("{name:<18} {idx:?}  analytic {analytic:+.6e}  numeric {numeric:+.6e}");
    }
    Ok(())
}
