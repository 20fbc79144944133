//! Named grids of config overrides, run as train-then-evaluate cells.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::build_bundle;
use crate::config::RunConfig;
use crate::data::Manifest;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::model::ModelBundle;
use crate::train::{fit_target, load_samples, train_samples, ParameterPartition, TrainOptions};

/// Keys that only change evaluation; cells differing only here share one
/// trained model.
const EVAL_ONLY_KEYS: &[&str] = &["eval_timestep_count", "eval_timestep_spacing"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

impl AblationCell {
    pub fn new(name: &str, overrides: &[(&str, &str)]) -> Self {
        Self {
            name: name.to_string(),
            overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub name: String,
    pub cells: Vec<AblationCell>,
    /// Config key swept along the x axis when the grid is plotted.
    pub sweep_key: Option<String>,
}

pub const GRID_NAMES: &[&str] = &[
    "table2", "fig5", "table3", "table4", "table5", "table9", "table10", "fig6", "table7",
];

fn prompt_grid(name: &str, pos: &str, neg: &str) -> AblationSpec {
    let cells = [
        ("trainable single", "single", "false"),
        ("trainable antonym", "antonym", "false"),
        ("fixed single", "single", "true"),
        ("fixed antonym", "antonym", "true"),
    ]
    .into_iter()
    .map(|(cell, mode, fixed)| {
        AblationCell::new(
            cell,
            &[("pos_attribute", pos), ("neg_attribute", neg), ("prompt_mode", mode), ("fixed_prompts", fixed)],
        )
    })
    .collect();
    AblationSpec {
        name: name.to_string(),
        cells,
        sweep_key: None,
    }
}

impl AblationSpec {
    pub fn empty(name: &str) -> Self {
        Self {
            name: name.to_string(),
            cells: Vec::new(),
            sweep_key: None,
        }
    }

    /// The built-in grids, see [`GRID_NAMES`].
    pub fn named(grid: &str) -> Result<Self> {
        let spec = |cells: Vec<AblationCell>, sweep: Option<&str>| AblationSpec {
            name: grid.to_string(),
            cells,
            sweep_key: sweep.map(str::to_string),
        };
        let sweep = |key: &str, values: &[&str], label: &dyn Fn(&str) -> String| -> Vec<AblationCell> {
            values.iter().map(|v| AblationCell::new(&label(v), &[(key, v)])).collect()
        };
        Ok(match grid {
            "table2" => spec(
                vec![
                    AblationCell::new("zero-shot", &[("freeze_cross_attention", "true"), ("fixed_prompts", "true")]),
                    AblationCell::new("prompt tuning only", &[("freeze_cross_attention", "true")]),
                    AblationCell::new("cross-attention only", &[("fixed_prompts", "true")]),
                    AblationCell::new("without lse", &[("mean_pool_instead_of_lse", "true")]),
                    AblationCell::new("full", &[]),
                ],
                None,
            ),
            "fig5" => spec(
                sweep(
                    "train_timestep_range",
                    &["0,100", "100,200", "200,300", "400,500", "600,700", "900,1000"],
                    &|v| format!("t in ({}]", v.replace(',', ", ")),
                ),
                Some("train_timestep_range"),
            ),
            "table3" => spec(sweep("image_size", &["256", "512"], &|v| format!("{v}px")), Some("image_size")),
            "table4" => spec(
                sweep("denoise_steps", &["1", "3", "5"], &|v| format!("{v} step(s)")),
                Some("denoise_steps"),
            ),
            "table5" => prompt_grid(grid, "Good Photo.", "Bad Photo."),
            "table9" => prompt_grid(grid, "High Quality.", "Low Quality."),
            "table10" => prompt_grid(grid, "High Definition.", "Low Definition."),
            "fig6" => spec(
                sweep("eval_timestep_count", &["1", "2", "4", "8"], &|v| format!("K={v}")),
                Some("eval_timestep_count"),
            ),
            "table7" => spec(
                [
                    ("K, V", "false", "true", "true"),
                    ("K only", "false", "true", "false"),
                    ("V only", "false", "false", "true"),
                    ("Q, K, V", "true", "true", "true"),
                ]
                .into_iter()
                .map(|(name, q, k, v)| {
                    AblationCell::new(
                        name,
                        &[("train_query_weights", q), ("train_key_weights", k), ("train_value_weights", v)],
                    )
                })
                .collect(),
                None,
            ),
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation grid `{other}` (known: {})",
                    GRID_NAMES.join(", ")
                )))
            }
        })
    }

    /// Every override key must be a known config key.
    pub fn validate(&self) -> Result<()> {
        for cell in &self.cells {
            for (k, _) in &cell.overrides {
                if !RunConfig::has_key(k) {
                    return Err(Error::Config(format!("cell `{}` overrides unknown key `{k}`", cell.name)));
                }
            }
        }
        Ok(())
    }

    pub fn cell_config(&self, base: &RunConfig, cell: &AblationCell) -> Result<RunConfig> {
        let mut cfg = base.clone();
        for (k, v) in &cell.overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell_name: String,
    pub train_db: String,
    pub test_db: String,
    pub srcc: Option<f64>,
    pub plcc: Option<f64>,
    pub runtime_s: f64,
    /// Why the cell produced no correlation, if it did not.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(skip)]
    pub report: Option<EvalReport>,
}

fn train_key(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    let base = RunConfig::default();
    for k in EVAL_ONLY_KEYS {
        c.set(k, &base.get(k).expect("known key")).expect("valid default");
    }
    c.to_text()
}

/// Trains `cfg`'s bundle on `train` (skipped when nothing is trainable).
pub fn train_cell(cfg: &RunConfig, train: &Manifest) -> Result<ModelBundle> {
    let bundle = build_bundle(cfg)?;
    if train.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let samples = load_samples(&bundle, train)?;
    if ParameterPartition::from_config(&bundle, cfg).is_empty() {
        let mut bundle = bundle;
        bundle.target = fit_target(&bundle, &samples, cfg);
        return Ok(bundle);
    }
    Ok(train_samples(bundle, &samples, cfg, &TrainOptions::default())?.bundle)
}

/// Trained bundles keyed by their training-relevant configuration, so
/// cells (and grids) that train identically train once.
#[derive(Default)]
pub struct TrainCache {
    bundles: HashMap<String, ModelBundle>,
}

impl TrainCache {
    pub fn len(&self) -> usize {
        self.bundles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bundles.is_empty()
    }
}

/// Trains and evaluates every cell. A failing cell is recorded with its
/// error and does not stop the grid. An empty spec runs the base config.
pub fn run_ablation(base: &RunConfig, spec: &AblationSpec, train: &Manifest, test: &Manifest) -> Result<Vec<CellResult>> {
    run_ablation_cached(base, spec, train, test, &mut TrainCache::default())
}

/// [`run_ablation`] reusing models from `cache`. Callers must keep the
/// train manifest fixed for the lifetime of the cache.
pub fn run_ablation_cached(
    base: &RunConfig,
    spec: &AblationSpec,
    train: &Manifest,
    test: &Manifest,
    cache: &mut TrainCache,
) -> Result<Vec<CellResult>> {
    spec.validate()?;
    let cells = if spec.cells.is_empty() {
        vec![AblationCell::new("base", &[])]
    } else {
        spec.cells.clone()
    };
    let trained = &mut cache.bundles;
    let mut out = Vec::with_capacity(cells.len());
    for cell in &cells {
        let start = Instant::now();
        let outcome = (|| -> Result<EvalReport> {
            let cfg = spec.cell_config(base, cell)?;
            let key = train_key(&cfg);
            let bundle = match trained.get(&key) {
                Some(b) => b.clone(),
                None => {
                    let b = train_cell(&cfg, train)?;
                    trained.insert(key, b.clone());
                    b
                }
            };
            let mut bundle = bundle;
            bundle.policy = crate::model::policy_from_config(&cfg, &bundle.schedule)?;
            bundle.config = cfg.clone();
            evaluate(&bundle, test, cfg.seed)
        })();
        let runtime_s = start.elapsed().as_secs_f64();
        let result = match outcome {
            Ok(report) => CellResult {
                cell_name: cell.name.clone(),
                train_db: train.dataset.clone(),
                test_db: test.dataset.clone(),
                srcc: report.srcc,
                plcc: report.plcc,
                runtime_s,
                note: report.degenerate.clone(),
                report: Some(report),
            },
            Err(e) => {
                log::warn!("cell `{}` failed: {e}", cell.name);
                CellResult {
                    cell_name: cell.name.clone(),
                    train_db: train.dataset.clone(),
                    test_db: test.dataset.clone(),
                    srcc: None,
                    plcc: None,
                    runtime_s,
                    note: Some(e.to_string()),
                    report: None,
                }
            }
        };
        log::info!(
            "{} / {}: srcc {:?} ({:.1}s)",
            spec.name,
            result.cell_name,
            result.srcc,
            result.runtime_s
        );
        out.push(result);
    }
    Ok(out)
}

fn fmt_corr(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

/// Plain-text comparison table.
pub fn render_table(spec: &AblationSpec, results: &[CellResult]) -> String {
    let width = results.iter().map(|r| r.cell_name.len()).max().unwrap_or(4).max(4);
    let mut s = String::new();
    let _ = writeln!(s, "{}", spec.name);
    let _ = writeln!(s, "{:<width$}  {:>8}  {:>8}  {:>9}  note", "cell", "srcc", "plcc", "time (s)");
    let _ = writeln!(s, "{}", "-".repeat(width + 34));
    for r in results {
        let _ = writeln!(
            s,
            "{:<width$}  {:>8}  {:>8}  {:>9.1}  {}",
            r.cell_name,
            fmt_corr(r.srcc),
            fmt_corr(r.plcc),
            r.runtime_s,
            r.note.as_deref().unwrap_or("")
        );
    }
    s
}

/// SRCC per cell as a polyline, cells evenly spaced along x.
pub fn render_svg(spec: &AblationSpec, results: &[CellResult]) -> String {
    let (w, h, pad) = (480.0, 300.0, 48.0);
    let n = results.len().max(1);
    let x = |i: usize| pad + (w - 2.0 * pad) * if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v.clamp(-1.0, 1.0) + 1.0) / 2.0;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{} (SRCC)</text>\n\
         <line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>\n",
        w / 2.0,
        spec.name,
        h - pad,
        w - pad,
        h - pad,
        h - pad
    );
    for tick in [-1.0, -0.5, 0.0, 0.5, 1.0] {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{tick:.1}</text>",
            pad - 6.0,
            y(tick) + 4.0
        );
    }
    let points: Vec<String> = results
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.srcc.map(|v| format!("{:.1},{:.1}", x(i), y(v))))
        .collect();
    let _ = writeln!(
        s,
        "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{}\"/>",
        points.join(" ")
    );
    for (i, r) in results.iter().enumerate() {
        if let Some(v) = r.srcc {
            let _ = writeln!(s, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"steelblue\"/>", x(i), y(v));
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            x(i),
            h - pad + 16.0,
            r.cell_name.replace('&', "&amp;").replace('<', "&lt;")
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `<grid>.jsonl`, `<grid>.txt` and, for sweeps, `<grid>.svg`.
pub fn write_results(dir: &Path, spec: &AblationSpec, results: &[CellResult]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut jsonl = String::new();
    for r in results {
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
    }
    let mut files = vec![
        (dir.join(format!("{}.jsonl", spec.name)), jsonl),
        (dir.join(format!("{}.txt", spec.name)), render_table(spec, results)),
    ];
    if spec.sweep_key.is_some() {
        files.push((dir.join(format!("{}.svg", spec.name)), render_svg(spec, results)));
    }
    for (path, text) in files {
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
