//! Per-timestep pooled scores under both prompts, and which text tokens
//! the image attends to.

use diffusion_iqa::config::RunConfig;
use diffusion_iqa::data::{generate_synthetic_dataset, preprocess, Distortion, SynthOptions};
use diffusion_iqa::model::build_toy_bundle;
use diffusion_iqa::prompt::Polarity;
use diffusion_iqa::schedule::seeded_rng;

fn main() -> diffusion_iqa::Result<()> {
    let root = std::env::temp_dir().join("diqa-breakdown");
    let data = generate_synthetic_dataset(&SynthOptions::new(10, Distortion::GaussianBlur, 4), &root)?;
    let bundle = build_toy_bundle(&RunConfig::default())?;

    for r in [&data.records[0], &data.records[9]] {
        let img = preprocess(&data.resolve(r), bundle.image_size)?;
        let b = bundle.score_breakdown(&img, bundle.chain, &mut seeded_rng(0))?;
        println!("{} (mos {:.1}): score {:.6}", r.image_id, r.mos, b.score);
        for t in &b.timesteps {
            println!("  t={:>3}  g+ {:.6}  g- {:.6}", t.t, t.g_pos, t.g_neg.unwrap_or(f64::NAN));
        }
        let ctx = bundle.prompt.context_len();
        let attr = bundle.prompt.attribute(Polarity::Positive).len();
        let mass = |range: std::ops::Range<usize>| b.mean_attention[range].iter().sum::<f64>();
        println!(
            "  attention mass: context {:.3}, attribute {:.3}, markers {:.3}",
            mass(0..ctx),
            mass(ctx..ctx + attr),
            mass(ctx + attr..b.mean_attention.len())
        );
    }
    Ok(())
}
