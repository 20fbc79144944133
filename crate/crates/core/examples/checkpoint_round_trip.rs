//! Save a briefly trained model, load it back and confirm the scores are
//! bit-identical.

use diffusion_iqa::checkpoint::{load_checkpoint, save_checkpoint, sidecar_path};
use diffusion_iqa::config::RunConfig;
use diffusion_iqa::data::{generate_synthetic_dataset, preprocess, Distortion, Split, SynthOptions};
use diffusion_iqa::model::{build_toy_bundle, score_image};
use diffusion_iqa::schedule::seeded_rng;
use diffusion_iqa::train::{load_samples, train_samples, TrainOptions};

fn main() -> diffusion_iqa::Result<()> {
    let root = std::env::temp_dir().join("diqa-checkpoint");
    let data = generate_synthetic_dataset(&SynthOptions::new(60, Distortion::GaussianBlur, 3), &root.join("data"))?;
    let cfg = RunConfig::default();

    let bundle = build_toy_bundle(&cfg)?;
    let samples = load_samples(&bundle, &data.split(Split::Train))?;
    let opts = TrainOptions {
        max_steps: Some(2),
        ..TrainOptions::default()
    };
    let trained = train_samples(bundle, &samples, &cfg, &opts)?.bundle;

    let path = root.join("model.safetensors");
    save_checkpoint(&trained, &path)?;
    println!("tensors: {}", path.display());
    println!("config:  {}", sidecar_path(&path).display());
    let loaded = load_checkpoint(&path)?;

    for r in data.records.iter().take(5) {
        let img = preprocess(&data.resolve(r), cfg.image_size)?;
        let a = score_image(&img, &trained, &mut seeded_rng(1))?;
        let b = score_image(&img, &loaded, &mut seeded_rng(1))?;
        println!("{}  {a:.9}  {b:.9}  identical: {}", r.image_id, a.to_bits() == b.to_bits());
    }
    Ok(())
}
