//! Run one named ablation grid and write its table, JSONL and plot.
//!
//! ```text
//! cargo run --release --example ablation_grid -- fig6 [n_images]
//! ```
//!
//! Grids: table2, fig5, table3, table4, table5, table9, table10, fig6,
//! table7. Cells that train identically are trained once.

use diffusion_iqa::ablation::{render_table, run_ablation, write_results, AblationSpec};
use diffusion_iqa::config::RunConfig;
use diffusion_iqa::data::{generate_synthetic_dataset, Distortion, Split, SynthOptions};

fn main() -> diffusion_iqa::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let grid = args.next().unwrap_or_else(|| "fig6".into());
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);

    let root = std::env::temp_dir().join("diqa-ablation");
    let data = generate_synthetic_dataset(&SynthOptions::new(n, Distortion::GaussianBlur, 7), &root.join("data"))?;
    let spec = AblationSpec::named(&grid)?;
    let results = run_ablation(&RunConfig::default(), &spec, &data.split(Split::Train), &data.split(Split::Test))?;

    print!("{}", render_table(&spec, &results));
    for p in write_results(&root.join("results"), &spec, &results)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}
