//! Write a synthetic distortion ladder and summarise it.
//!
//! ```text
//! cargo run --release --example synth_dataset -- out/synth 200 additive_noise
//! ```

use std::collections::BTreeMap;
use std::path::PathBuf;

use diffusion_iqa::data::{generate_synthetic_dataset, Distortion, SynthOptions};

fn main() -> diffusion_iqa::Result<()> {
    let mut args = std::env::args().skip(1);
    let out: PathBuf = args.next().unwrap_or_else(|| "out/synth".into()).into();
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(100);
    let distortion: Distortion = args.next().as_deref().unwrap_or("gaussian_blur").parse()?;

    let manifest = generate_synthetic_dataset(&SynthOptions::new(n, distortion, 7), &out)?;

    let mut per_split: BTreeMap<String, usize> = BTreeMap::new();
    let mut per_mos: BTreeMap<i64, usize> = BTreeMap::new();
    for r in &manifest.records {
        *per_split.entry(r.split.to_string()).or_default() += 1;
        *per_mos.entry(r.mos.round() as i64).or_default() += 1;
    }
    println!("{} images in {}", manifest.len(), out.display());
    println!("splits: {per_split:?}");
    println!("images per opinion score: {per_mos:?}");
    Ok(())
}
