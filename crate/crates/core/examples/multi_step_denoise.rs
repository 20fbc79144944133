//! Tap the attention after 1, 3 or 5 deterministic denoising steps and
//! compare how well each ranks a small blur ladder.

use diffusion_iqa::config::RunConfig;
use diffusion_iqa::data::{generate_synthetic_dataset, preprocess, Distortion, SynthOptions};
use diffusion_iqa::metrics::srcc;
use diffusion_iqa::model::{build_toy_bundle, multi_step_score};
use diffusion_iqa::schedule::seeded_rng;

fn main() -> diffusion_iqa::Result<()> {
    let root = std::env::temp_dir().join("diqa-multistep");
    let data = generate_synthetic_dataset(&SynthOptions::new(40, Distortion::GaussianBlur, 2), &root)?;
    let bundle = build_toy_bundle(&RunConfig::default())?;
    let images = data
        .records
        .iter()
        .map(|r| preprocess(&data.resolve(r), bundle.image_size))
        .collect::<diffusion_iqa::Result<Vec<_>>>()?;
    let mos: Vec<f64> = data.records.iter().map(|r| r.mos).collect();

    for steps in [1, 3, 5] {
        let scores = images
            .iter()
            .map(|img| multi_step_score(img, &bundle, steps, 20, &mut seeded_rng(0)))
            .collect::<diffusion_iqa::Result<Vec<_>>>()?;
        println!("{steps} step(s): zero-shot srcc {:.4}", srcc(&scores, &mos)?);
    }
    Ok(())
}
