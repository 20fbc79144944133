//! Regression of the pooled attention score onto opinion scores.
//!
//! Each sample draws one timestep from the training range and one noise
//! latent; gradients are accumulated over a batch and applied with Adam to
//! the trainable partition only.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Manifest;
use crate::error::{Error, Result};
use crate::model::{ModelBundle, ParamGrads, ParamId, TargetMap};
use crate::readout::Projection;
use crate::schedule::{derive_seed, sample_timestep, seeded_rng, Latent};

/// Seed stream for per-sample training draws.
const TRAIN_STREAM: u64 = 0x7a41;
/// Seed stream for the epoch shuffles.
const SHUFFLE_STREAM: u64 = 0x5f0f;

/// `(predicted - target)^2`.
pub fn mse_loss(predicted: f64, target: f64) -> f64 {
    let d = predicted - target;
    d * d
}

pub fn batch_mse(predicted: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(predicted.len(), targets.len());
    if predicted.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(targets).map(|(p, t)| mse_loss(*p, *t)).sum::<f64>() / predicted.len() as f64
}

/// Which named parameters the optimiser may touch. Everything else in
/// [`ModelBundle::named_parameters`] is frozen.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterPartition {
    pub trainable: Vec<String>,
}

impl ParameterPartition {
    pub fn from_config(bundle: &ModelBundle, cfg: &RunConfig) -> Self {
        let prompt_trains = cfg.prompt_trainable && !cfg.fixed_prompts && bundle.prompt.trainable;
        let trainable = bundle
            .trainable_names()
            .into_iter()
            .filter(|name| match ParamId::parse(name) {
                Some(ParamId::Context) => prompt_trains,
                Some(ParamId::Lora { projection, .. }) => {
                    !cfg.freeze_cross_attention
                        && match projection {
                            Projection::Query => cfg.train_query_weights,
                            Projection::Key => cfg.train_key_weights,
                            Projection::Value => cfg.train_value_weights,
                        }
                }
                None => false,
            })
            .collect();
        Self { trainable }
    }

    pub fn is_empty(&self) -> bool {
        self.trainable.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.trainable.iter().any(|n| n == name)
    }

    /// Copies of every frozen parameter, for bit-identity checks.
    pub fn frozen_snapshot(&self, bundle: &ModelBundle) -> BTreeMap<String, Array2<f64>> {
        let mut all = bundle.named_parameters();
        all.retain(|name, _| !self.contains(name));
        all
    }
}

/// Adam with optional L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    m: ParamGrads,
    v: ParamGrads,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Updates the parameters named in `partition` in place.
    pub fn step(&mut self, bundle: &mut ModelBundle, grads: &ParamGrads, partition: &ParameterPartition, lr: f64) {
        self.step += 1;
        let bias1 = 1.0 - self.beta1.powi(self.step);
        let bias2 = 1.0 - self.beta2.powi(self.step);
        for name in &partition.trainable {
            let Some(g) = grads.get(name) else { continue };
            let param = bundle.param_mut(name).expect("partition names are bundle parameters");
            let m = self.m.entry(name.clone()).or_insert_with(|| Array2::zeros(g.raw_dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Array2::zeros(g.raw_dim()));
            ndarray::Zip::from(param).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g + self.weight_decay * *p;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / bias1) / ((*v / bias2).sqrt() + self.eps);
            });
        }
    }
}

/// One training example with its latent precomputed (the codec is frozen).
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub id: String,
    pub latent: Latent,
    pub mos: f64,
}

/// Preprocesses and encodes every record of `manifest`, in order.
pub fn load_samples(bundle: &ModelBundle, manifest: &Manifest) -> Result<Vec<TrainSample>> {
    manifest
        .records
        .par_iter()
        .map(|r| {
            let img = crate::data::preprocess(&manifest.resolve(r), bundle.image_size)?;
            Ok(TrainSample {
                id: r.image_id.clone(),
                latent: bundle.encode_image(&img)?,
                mos: r.mos,
            })
        })
        .collect()
}

/// Target map fitted on the training scores.
pub fn fit_target(bundle: &ModelBundle, samples: &[TrainSample], cfg: &RunConfig) -> TargetMap {
    let lo = samples.iter().map(|s| s.mos).fold(f64::INFINITY, f64::min);
    let hi = samples.iter().map(|s| s.mos).fold(f64::NEG_INFINITY, f64::max);
    TargetMap {
        mos_min: lo,
        mos_max: hi,
        offset: cfg.target_offset.unwrap_or_else(|| bundle.uniform_baseline()),
        span: cfg.target_span,
    }
}

/// A sample together with its training draw.
#[derive(Clone, Debug)]
pub struct Draw<'a> {
    pub sample: &'a TrainSample,
    pub t: usize,
    pub eps: Latent,
}

/// The draw of sample `index` in `epoch`; independent of batch layout and
/// thread scheduling.
pub fn training_draw<'a>(bundle: &ModelBundle, cfg: &RunConfig, sample: &'a TrainSample, index: usize, epoch: usize) -> Result<Draw<'a>> {
    let policy = bundle.policy.for_chain(bundle.chain.steps, bundle.chain.delta)?;
    let mut rng = seeded_rng(derive_seed(derive_seed(cfg.seed ^ TRAIN_STREAM, epoch as u64), index as u64));
    let t = sample_timestep(&policy, &mut rng);
    let eps = Latent::standard_normal(bundle.latent_shape(), &mut rng);
    Ok(Draw { sample, t, eps })
}

/// Per-sample predictions, batch mean loss and its gradient.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub scores: Vec<f64>,
    pub loss: f64,
    pub grads: ParamGrads,
}

/// Mean-squared loss over `draws` and its gradient, accumulated sample by
/// sample in input order.
pub fn batch_gradient(bundle: &ModelBundle, draws: &[Draw<'_>]) -> Result<BatchGradient> {
    let per_sample: Vec<Result<(f64, ParamGrads)>> = draws
        .par_iter()
        .map(|d| bundle.score_grad_at(&d.sample.latent, &[(d.t, d.eps.clone())], bundle.chain))
        .collect();
    let n = draws.len().max(1) as f64;
    let mut grads = bundle.zero_grads();
    let mut scores = Vec::with_capacity(draws.len());
    let mut loss = 0.0;
    for (d, r) in draws.iter().zip(per_sample) {
        let (score, g) = r?;
        let target = bundle.target.target(d.sample.mos);
        loss += mse_loss(score, target) / n;
        let w = 2.0 * (score - target) / n;
        for (name, acc) in grads.iter_mut() {
            acc.scaled_add(w, &g[name]);
        }
        scores.push(score);
    }
    Ok(BatchGradient { scores, loss, grads })
}

/// Batch loss without gradients, for partitions with nothing to train.
fn batch_scores(bundle: &ModelBundle, draws: &[Draw<'_>]) -> Result<Vec<f64>> {
    draws
        .par_iter()
        .map(|d| {
            bundle
                .score_latent_at(&d.sample.latent, &[(d.t, d.eps.clone())], bundle.chain)
                .map(|b| b.score)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Extra controls, mostly for tests.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Verify after every update that frozen parameters are bit-identical.
    pub check_frozen: bool,
    /// Stop after this many optimiser updates.
    pub max_steps: Option<usize>,
    /// Keep the bundle's current target map instead of fitting one.
    pub keep_target: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub history: Vec<EpochLoss>,
    pub steps: usize,
    pub partition: ParameterPartition,
}

/// Trains on every record of `manifest` (callers select the split).
pub fn train(bundle: ModelBundle, manifest: &Manifest, cfg: &RunConfig) -> Result<TrainOutcome> {
    if manifest.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let samples = load_samples(&bundle, manifest)?;
    train_samples(bundle, &samples, cfg, &TrainOptions::default())
}

pub fn train_samples(
    mut bundle: ModelBundle,
    samples: &[TrainSample],
    cfg: &RunConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::EmptyManifest);
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if !opts.keep_target {
        bundle.target = fit_target(&bundle, samples, cfg);
    }
    let partition = ParameterPartition::from_config(&bundle, cfg);
    let frozen = opts.check_frozen.then(|| partition.frozen_snapshot(&bundle));
    let mut adam = Adam::new(cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut steps = 0usize;
    let mut lr = cfg.learning_rate;
    let mut order: Vec<usize> = (0..samples.len()).collect();

    'epochs: for epoch in 1..=cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut seeded_rng(derive_seed(cfg.seed ^ SHUFFLE_STREAM, epoch as u64)));
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let draws = chunk
                .iter()
                .map(|&i| training_draw(&bundle, cfg, &samples[i], i, epoch))
                .collect::<Result<Vec<_>>>()?;
            let (scores, grads) = if partition.is_empty() {
                (batch_scores(&bundle, &draws)?, None)
            } else {
                let bg = batch_gradient(&bundle, &draws)?;
                (bg.scores, Some(bg.grads))
            };
            for (d, s) in draws.iter().zip(&scores) {
                let l = mse_loss(*s, bundle.target.target(d.sample.mos));
                if !l.is_finite() {
                    return Err(Error::NanLoss {
                        sample: d.sample.id.clone(),
                        epoch,
                    });
                }
                epoch_loss += l;
            }
            seen += draws.len();
            if let Some(grads) = grads {
                adam.step(&mut bundle, &grads, &partition, lr);
                steps += 1;
                if let Some(frozen) = &frozen {
                    assert_frozen(&bundle, frozen);
                }
            }
            if opts.max_steps.is_some_and(|m| steps >= m) {
                history.push(EpochLoss {
                    epoch,
                    mean_loss: epoch_loss / seen as f64,
                });
                break 'epochs;
            }
        }
        let mean_loss = epoch_loss / seen as f64;
        log::info!("epoch {epoch}: mean loss {mean_loss:.4e}");
        history.push(EpochLoss { epoch, mean_loss });
        lr *= cfg.lr_decay;
    }
    Ok(TrainOutcome {
        bundle,
        history,
        steps,
        partition,
    })
}

fn assert_frozen(bundle: &ModelBundle, frozen: &BTreeMap<String, Array2<f64>>) {
    let now = bundle.named_parameters();
    for (name, before) in frozen {
        let after = &now[name];
        let same = before.shape() == after.shape()
            && before.iter().zip(after.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "frozen parameter `{name}` changed during training");
    }
}

/// One `{epoch, mean_loss}` JSON object per line.
pub fn write_loss_history(path: &Path, history: &[EpochLoss]) -> Result<()> {
    let mut text = String::new();
    for h in history {
        text.push_str(&serde_json::to_string(h)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
