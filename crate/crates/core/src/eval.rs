//! Dataset evaluation and attention-feature export.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::effective_config;
use crate::data::{preprocess, Manifest, Split};
use crate::error::{Error, Result};
use crate::metrics::{plcc, srcc};
use crate::model::{ModelBundle, ScoreBreakdown};
use crate::schedule::{derive_seed, seeded_rng};

const EVAL_STREAM: u64 = 0xe7a1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image_id: String,
    pub mos: f64,
    pub predicted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalFailure {
    pub image_id: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub records: Vec<EvalRecord>,
    /// `None` when the correlation is undefined; see `degenerate`.
    pub srcc: Option<f64>,
    pub plcc: Option<f64>,
    pub degenerate: Option<String>,
    pub failures: Vec<EvalFailure>,
    pub config: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn predictions(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.predicted).collect()
    }

    pub fn mos(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mos).collect()
    }

    /// PLCC after mapping predictions through `fit(predictions, mos)`.
    /// Raw correlations are the reported numbers; this is an optional
    /// extra for comparisons that expect a fitted mapping first.
    pub fn fitted_plcc(&self, fit: impl Fn(&[f64], &[f64]) -> Vec<f64>) -> Option<f64> {
        let mos = self.mos();
        let fitted = fit(&self.predictions(), &mos);
        plcc(&fitted, &mos).ok()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Least-squares monotone non-decreasing fit of `mos` on the ordering of
/// `pred` (pool adjacent violators). Usable with
/// [`EvalReport::fitted_plcc`].
pub fn isotonic_fit(pred: &[f64], mos: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| pred[a].total_cmp(&pred[b]));
    // Blocks of (sum, count), merged while they violate monotonicity.
    let mut blocks: Vec<(f64, usize)> = Vec::new();
    for &i in &order {
        blocks.push((mos[i], 1));
        while blocks.len() > 1 {
            let (s1, n1) = blocks[blocks.len() - 1];
            let (s0, n0) = blocks[blocks.len() - 2];
            if s0 / n0 as f64 <= s1 / n1 as f64 {
                break;
            }
            blocks.pop();
            *blocks.last_mut().expect("len > 1") = (s0 + s1, n0 + n1);
        }
    }
    let mut out = vec![0.0; pred.len()];
    let mut k = 0;
    for (s, n) in blocks {
        for &i in &order[k..k + n] {
            out[i] = s / n as f64;
        }
        k += n;
    }
    out
}

fn score_all(bundle: &ModelBundle, manifest: &Manifest, seed: u64) -> Vec<Result<ScoreBreakdown>> {
    manifest
        .records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let img = preprocess(&manifest.resolve(r), bundle.image_size)?;
            let mut rng = seeded_rng(derive_seed(seed ^ EVAL_STREAM, i as u64));
            bundle.score_breakdown(&img, bundle.chain, &mut rng)
        })
        .collect()
}

/// Scores every image with `K` timesteps each. Per-image failures are
/// logged and listed in the report; only a total failure is an error.
pub fn evaluate(bundle: &ModelBundle, manifest: &Manifest, seed: u64) -> Result<EvalReport> {
    if manifest.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let mut records = Vec::with_capacity(manifest.len());
    let mut failures = Vec::new();
    for (r, res) in manifest.records.iter().zip(score_all(bundle, manifest, seed)) {
        match res {
            Ok(b) => records.push(EvalRecord {
                image_id: r.image_id.clone(),
                mos: r.mos,
                predicted: b.score,
            }),
            Err(e) => {
                log::warn!("skipping `{}`: {e}", r.image_id);
                failures.push(EvalFailure {
                    image_id: r.image_id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    if records.is_empty() {
        return Err(Error::AllFailed);
    }
    let pred: Vec<f64> = records.iter().map(|r| r.predicted).collect();
    let mos: Vec<f64> = records.iter().map(|r| r.mos).collect();
    let (s, p, degenerate) = match (srcc(&pred, &mos), plcc(&pred, &mos)) {
        (Ok(s), Ok(p)) => (Some(s), Some(p), None),
        (Err(e), _) | (_, Err(e)) => (None, None, Some(e.to_string())),
    };
    Ok(EvalReport {
        dataset: manifest.dataset.clone(),
        records,
        srcc: s,
        plcc: p,
        degenerate,
        failures,
        config: effective_config(bundle).entries(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub image_id: String,
    pub split: Split,
    pub mos: f64,
    /// Attention averaged over blocks, timesteps and visual tokens under
    /// the positive prompt; length `M`.
    pub features: Vec<f64>,
    /// Pooled score per timestep under the positive prompt.
    pub g_pos: Vec<f64>,
    /// Same under the negative prompt; empty in single-prompt mode.
    pub g_neg: Vec<f64>,
}

/// Writes one JSON feature record per image to `path` and returns them.
pub fn export_features(bundle: &ModelBundle, manifest: &Manifest, path: &Path, seed: u64) -> Result<Vec<FeatureRecord>> {
    let mut out = Vec::with_capacity(manifest.len());
    for (r, res) in manifest.records.iter().zip(score_all(bundle, manifest, seed)) {
        let b = res?;
        out.push(FeatureRecord {
            image_id: r.image_id.clone(),
            split: r.split,
            mos: r.mos,
            features: b.mean_attention,
            g_pos: b.timesteps.iter().map(|t| t.g_pos).collect(),
            g_neg: b.timesteps.iter().filter_map(|t| t.g_neg).collect(),
        });
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for rec in &out {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(out)
}
