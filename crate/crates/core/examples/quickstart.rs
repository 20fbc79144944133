//! Score one image with an untrained toy model.
//!
//! ```text
//! cargo run --release --example quickstart [path/to/image.png]
//! ```
//!
//! Without an argument a synthetic test image is rendered first.

use diffusion_iqa::config::RunConfig;
use diffusion_iqa::data::{generate_synthetic_dataset, preprocess, Distortion, SynthOptions};
use diffusion_iqa::model::{build_toy_bundle, score_image};
use diffusion_iqa::schedule::seeded_rng;

fn main() -> diffusion_iqa::Result<()> {
    let cfg = RunConfig::default();
    let bundle = build_toy_bundle(&cfg)?;

    let scratch = std::env::temp_dir().join("diqa-quickstart");
    let path = match std::env::args().nth(1) {
        Some(p) => p.into(),
        None => {
            let m = generate_synthetic_dataset(&SynthOptions::new(10, Distortion::GaussianBlur, 0), &scratch)?;
            m.resolve(&m.records[4])
        }
    };

    let image = preprocess(&path, bundle.image_size)?;
    let score = score_image(&image, &bundle, &mut seeded_rng(cfg.seed))?;
    println!("{}: {score:.6}", path.display());
    // Untrained, every score sits near the uniform-attention baseline.
    println!("uniform-attention baseline: {:.6}", bundle.uniform_baseline());
    Ok(())
}
