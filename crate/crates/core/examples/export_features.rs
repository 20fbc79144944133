//! Export per-image attention vectors for downstream analysis (t-SNE,
//! linear probes) and print a few of them.

use diffusion_iqa::config::RunConfig;
use diffusion_iqa::data::{generate_synthetic_dataset, Distortion, SynthOptions};
use diffusion_iqa::eval::export_features;
use diffusion_iqa::model::build_toy_bundle;

fn main() -> diffusion_iqa::Result<()> {
    let root = std::env::temp_dir().join("diqa-features");
    let data = generate_synthetic_dataset(&SynthOptions::new(20, Distortion::Blocking, 1), &root.join("data"))?;
    let bundle = build_toy_bundle(&RunConfig::default())?;
    let path = root.join("features.jsonl");
    let records = export_features(&bundle, &data, &path, 0)?;
    println!("{} records, {} features each -> {}", records.len(), records[0].features.len(), path.display());
    for r in records.iter().take(4) {
        let head: Vec<String> = r.features.iter().take(5).map(|v| format!("{v:.4}")).collect();
        println!("{} mos {:>5.1}  g+ {:.5}  features [{} ...]", r.image_id, r.mos, r.g_pos[0], head.join(", "));
    }
    Ok(())
}
