//! The model bundle and the scoring pipeline:
//! encode, noise, denoise under each prompt, pool the attention maps, and
//! average over prompts and timesteps.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::{denoise_step, DenoiserBackbone, ImageArray, LatentCodec, ToyBackbone, ToyConfig};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::prompt::{build_prompt_pair, encode_prompt, Polarity, PromptPair, TextEncoder};
use crate::readout::{quality_grad, quality_with_pooling, AttentionMap, Pooling, Projection};
use crate::schedule::{
    derive_seed, forward_noise, inference_timesteps, multi_step_timesteps, Latent, NoiseSchedule, SeededRng,
    TimestepPolicy,
};

/// Named gradients, keyed like checkpoint entries.
pub type ParamGrads = BTreeMap<String, Array2<f64>>;

pub const CONTEXT_PARAM: &str = "context.tokens";

/// Which factor of an adapter a parameter name refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoraFactor {
    B,
    A,
}

/// Parsed trainable-parameter name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamId {
    Lora {
        block: usize,
        projection: Projection,
        factor: LoraFactor,
    },
    Context,
}

impl ParamId {
    pub fn name(&self) -> String {
        match self {
            ParamId::Context => CONTEXT_PARAM.to_string(),
            ParamId::Lora {
                block,
                projection,
                factor,
            } => format!(
                "block.{block}.{}.{}",
                projection.tag(),
                match factor {
                    LoraFactor::B => "lora_B",
                    LoraFactor::A => "lora_A",
                }
            ),
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        if name == CONTEXT_PARAM {
            return Some(ParamId::Context);
        }
        let mut parts = name.split('.');
        if parts.next()? != "block" {
            return None;
        }
        let block = parts.next()?.parse().ok()?;
        let projection = match parts.next()? {
            "q" => Projection::Query,
            "k" => Projection::Key,
            "v" => Projection::Value,
            _ => return None,
        };
        let factor = match parts.next()? {
            "lora_B" => LoraFactor::B,
            "lora_A" => LoraFactor::A,
            _ => return None,
        };
        if parts.next().is_some() {
            return None;
        }
        Some(ParamId::Lora {
            block,
            projection,
            factor,
        })
    }
}

/// Depth of the deterministic denoising chain before the tapped pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiseChain {
    pub steps: usize,
    pub delta: usize,
}

impl Default for DenoiseChain {
    fn default() -> Self {
        Self { steps: 1, delta: 20 }
    }
}

/// Affine map from raw opinion scores to the regression target.
///
/// Opinion scores are min-max normalised over the training manifest, then
/// placed at `offset + span * normalised`. The offset defaults to the score
/// of perfectly uniform attention so the target lives in the same units as
/// the pooled prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetMap {
    pub mos_min: f64,
    pub mos_max: f64,
    pub offset: f64,
    pub span: f64,
}

impl TargetMap {
    pub fn normalise(&self, mos: f64) -> f64 {
        let range = self.mos_max - self.mos_min;
        if range > 0.0 {
            (mos - self.mos_min) / range
        } else {
            0.0
        }
    }

    pub fn target(&self, mos: f64) -> f64 {
        self.offset + self.span * self.normalise(mos)
    }
}

impl Default for TargetMap {
    fn default() -> Self {
        Self {
            mos_min: 0.0,
            mos_max: 1.0,
            offset: 0.0,
            span: 1.0,
        }
    }
}

/// Everything needed to score an image.
#[derive(Clone)]
pub struct ModelBundle {
    pub codec: Arc<dyn LatentCodec>,
    pub backbone: Arc<dyn DenoiserBackbone>,
    pub readout: crate::readout::CrossAttentionReadout,
    pub prompt: PromptPair,
    pub encoder: TextEncoder,
    pub schedule: NoiseSchedule,
    pub policy: TimestepPolicy,
    pub chain: DenoiseChain,
    pub target: TargetMap,
    pub image_size: usize,
    /// Blocks whose maps enter the pooled score; `None` taps all.
    pub tapped: Option<Vec<usize>>,
    /// Configuration the bundle was built from.
    pub config: RunConfig,
}

impl std::fmt::Debug for ModelBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelBundle")
            .field("backbone", &self.backbone.kind())
            .field("blocks", &self.backbone.block_specs().len())
            .field("image_size", &self.image_size)
            .field("policy", &self.policy)
            .finish_non_exhaustive()
    }
}

/// Predictions at one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct TimestepScore {
    /// Timestep whose backbone pass was tapped.
    pub t: usize,
    pub g_pos: f64,
    pub g_neg: Option<f64>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreBreakdown {
    pub score: f64,
    pub timesteps: Vec<TimestepScore>,
    /// Attention averaged over blocks, tapped timesteps and visual tokens
    /// under the positive prompt; one entry per text token.
    pub mean_attention: Vec<f64>,
}

impl ModelBundle {
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        self.backbone.latent_shape()
    }

    pub fn encode_image(&self, image: &ImageArray) -> Result<Latent> {
        self.codec.encode(image)
    }

    pub fn text_embeddings(&self) -> Result<Vec<(Polarity, Array2<f64>)>> {
        self.prompt
            .polarities()
            .iter()
            .map(|&p| Ok((p, encode_prompt(&self.prompt, p, &self.encoder)?)))
            .collect()
    }

    /// Score of perfectly uniform attention: `mean_i ln(N_i)/lambda + 1/M`
    /// under log-sum-exp pooling, `1/M` under mean pooling.
    pub fn uniform_baseline(&self) -> f64 {
        let pols = self.prompt.polarities();
        let inv_m = pols
            .iter()
            .map(|&p| 1.0 / self.prompt.text_len(p) as f64)
            .sum::<f64>()
            / pols.len() as f64;
        match self.readout.pooling {
            Pooling::Mean => inv_m,
            Pooling::LogSumExp => {
                let log_ns: Vec<f64> = self
                    .backbone
                    .block_specs()
                    .iter()
                    .filter(|s| self.is_tapped(s.index))
                    .map(|s| (s.tokens as f64).ln())
                    .collect();
                let log_n = log_ns.iter().sum::<f64>() / log_ns.len().max(1) as f64;
                log_n / self.readout.lambda + inv_m
            }
        }
    }

    fn is_tapped(&self, block: usize) -> bool {
        self.tapped.as_ref().is_none_or(|t| t.contains(&block))
    }

    fn pool(&self, maps: &[AttentionMap]) -> Result<f64> {
        match &self.tapped {
            None => quality_with_pooling(maps, self.readout.pooling, self.readout.lambda),
            Some(_) => {
                let kept: Vec<AttentionMap> = maps.iter().filter(|m| self.is_tapped(m.block)).cloned().collect();
                quality_with_pooling(&kept, self.readout.pooling, self.readout.lambda)
            }
        }
    }

    /// Gradient of [`Self::pool`] w.r.t. every block's map; untapped blocks
    /// get zeros.
    fn pool_grad(&self, maps: &[AttentionMap]) -> Result<Vec<Array2<f64>>> {
        let kept: Vec<AttentionMap> = maps.iter().filter(|m| self.is_tapped(m.block)).cloned().collect();
        let mut kept_grads = quality_grad(&kept, self.readout.pooling, self.readout.lambda)?.into_iter();
        Ok(maps
            .iter()
            .map(|m| {
                if self.is_tapped(m.block) {
                    kept_grads.next().expect("one per kept map")
                } else {
                    Array2::zeros(m.values.raw_dim())
                }
            })
            .collect())
    }

    /// Runs the chain from `t_start` under `text` and returns the tapped pass.
    fn tapped_pass(
        &self,
        z0: &Latent,
        t_start: usize,
        eps: &Latent,
        text: &Array2<f64>,
        chain: DenoiseChain,
    ) -> Result<(usize, Latent, crate::backbone::BackboneOutput)> {
        let ts = multi_step_timesteps(t_start, chain.steps, chain.delta)?;
        let mut z = forward_noise(z0, t_start, eps, &self.schedule)?;
        for pair in ts.windows(2) {
            z = denoise_step(&z, pair[0], pair[1], self.backbone.as_ref(), text, &self.readout, &self.schedule)?;
        }
        let t_tap = *ts.last().expect("steps >= 1");
        let out = self.backbone.forward(&z, t_tap, text, &self.readout)?;
        Ok((t_tap, z, out))
    }

    /// Scores a latent at explicit `(t_start, eps)` draws.
    pub fn score_latent_at(
        &self,
        z0: &Latent,
        draws: &[(usize, Latent)],
        chain: DenoiseChain,
    ) -> Result<ScoreBreakdown> {
        if draws.is_empty() {
            return Err(Error::Config("at least one timestep is required".into()));
        }
        let texts = self.text_embeddings()?;
        let m = self.prompt.text_len(Polarity::Positive);
        let mut mean_attention = vec![0.0; m];
        let mut taps = 0usize;
        let mut timesteps = Vec::with_capacity(draws.len());
        for (t, eps) in draws {
            let mut g = Vec::with_capacity(texts.len());
            let mut t_tap = *t;
            for (pol, text) in &texts {
                let (tt, _, out) = self.tapped_pass(z0, *t, eps, text, chain)?;
                t_tap = tt;
                if *pol == Polarity::Positive {
                    for map in &out.maps {
                        for (acc, col) in mean_attention.iter_mut().zip(map.values.columns()) {
                            *acc += col.mean().unwrap_or(0.0);
                        }
                        taps += 1;
                    }
                }
                g.push(self.pool(&out.maps)?);
            }
            let score = g.iter().sum::<f64>() / g.len() as f64;
            timesteps.push(TimestepScore {
                t: t_tap,
                g_pos: g[0],
                g_neg: g.get(1).copied(),
                score,
            });
        }
        for v in &mut mean_attention {
            *v /= taps.max(1) as f64;
        }
        let score = timesteps.iter().map(|s| s.score).sum::<f64>() / timesteps.len() as f64;
        Ok(ScoreBreakdown {
            score,
            timesteps,
            mean_attention,
        })
    }

    /// Draws the inference timesteps and one fresh noise latent per timestep.
    pub fn draw_inference(&self, chain: DenoiseChain, rng: &mut SeededRng) -> Result<Vec<(usize, Latent)>> {
        let policy = self.policy.for_chain(chain.steps, chain.delta)?;
        let shape = self.latent_shape();
        Ok(inference_timesteps(&policy, rng)
            .into_iter()
            .map(|t| (t, Latent::standard_normal(shape, rng)))
            .collect())
    }

    pub fn score_breakdown(&self, image: &ImageArray, chain: DenoiseChain, rng: &mut SeededRng) -> Result<ScoreBreakdown> {
        let z0 = self.encode_image(image)?;
        let draws = self.draw_inference(chain, rng)?;
        self.score_latent_at(&z0, &draws, chain)
    }

    /// Gradient of the mean score over `draws` w.r.t. every LoRA factor and
    /// the shared context. Earlier steps of a multi-step chain are treated
    /// as constants; only the tapped pass is differentiated.
    pub fn score_grad_at(
        &self,
        z0: &Latent,
        draws: &[(usize, Latent)],
        chain: DenoiseChain,
    ) -> Result<(f64, ParamGrads)> {
        if draws.is_empty() {
            return Err(Error::Config("at least one timestep is required".into()));
        }
        let texts = self.text_embeddings()?;
        let weight = 1.0 / (texts.len() * draws.len()) as f64;
        let mut grads = self.zero_grads();
        let mut total = 0.0;
        for (t, eps) in draws {
            for (_, text) in &texts {
                let (_, _, out) = self.tapped_pass(z0, *t, eps, text, chain)?;
                total += self.pool(&out.maps)? * weight;
                let map_grads: Vec<Array2<f64>> = self
                    .pool_grad(&out.maps)?
                    .into_iter()
                    .map(|g| g * weight)
                    .collect();
                let (proj_grads, d_text) = self.backbone.backward(&out, text, &self.readout, &map_grads)?;
                for (i, pg) in proj_grads.iter().enumerate() {
                    let block = &self.readout.blocks[i];
                    for (projection, dw) in [
                        (Projection::Query, &pg.query),
                        (Projection::Key, &pg.key),
                        (Projection::Value, &pg.value),
                    ] {
                        let (db, da) = block.projection(projection).lora.factor_grads(dw);
                        for (factor, g) in [(LoraFactor::B, db), (LoraFactor::A, da)] {
                            let name = ParamId::Lora {
                                block: i,
                                projection,
                                factor,
                            }
                            .name();
                            *grads.get_mut(&name).expect("zero_grads covers all") += &g;
                        }
                    }
                }
                *grads.get_mut(CONTEXT_PARAM).expect("context") += &self.encoder.context_grad(&self.prompt, &d_text);
            }
        }
        Ok((total, grads))
    }

    /// Every differentiable parameter, by name.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.readout.num_blocks() {
            for projection in Projection::ALL {
                for factor in [LoraFactor::B, LoraFactor::A] {
                    names.push(
                        ParamId::Lora {
                            block: i,
                            projection,
                            factor,
                        }
                        .name(),
                    );
                }
            }
        }
        names.push(CONTEXT_PARAM.to_string());
        names
    }

    pub fn zero_grads(&self) -> ParamGrads {
        self.trainable_names()
            .into_iter()
            .map(|n| {
                let shape = self.param(&n).expect("known name").raw_dim();
                (n, Array2::zeros(shape))
            })
            .collect()
    }

    /// Every weight of the bundle by name: readout projections and
    /// adapters, context, backbone, codec and text encoder.
    pub fn named_parameters(&self) -> BTreeMap<String, Array2<f64>> {
        let mut out = BTreeMap::new();
        for (i, block) in self.readout.blocks.iter().enumerate() {
            for projection in Projection::ALL {
                let p = block.projection(projection);
                let tag = projection.tag();
                out.insert(format!("block.{i}.{tag}.base"), p.base.clone());
                out.insert(format!("block.{i}.{tag}.lora_B"), p.lora.b.clone());
                out.insert(format!("block.{i}.{tag}.lora_A"), p.lora.a.clone());
            }
        }
        out.insert(CONTEXT_PARAM.to_string(), self.prompt.context.clone());
        out.extend(self.backbone.export_parameters());
        out.extend(self.codec.export_parameters());
        out.insert("encoder.token_table".into(), self.encoder.token_table.clone());
        out.insert("encoder.positions".into(), self.encoder.positions.clone());
        out.insert("encoder.projection".into(), self.encoder.projection.clone());
        out.insert("encoder.gain".into(), Array2::from_elem((1, 1), self.encoder.gain));
        out
    }

    pub fn param(&self, name: &str) -> Option<&Array2<f64>> {
        match ParamId::parse(name)? {
            ParamId::Context => Some(&self.prompt.context),
            ParamId::Lora {
                block,
                projection,
                factor,
            } => {
                let lora = &self.readout.blocks.get(block)?.projection(projection).lora;
                Some(match factor {
                    LoraFactor::B => &lora.b,
                    LoraFactor::A => &lora.a,
                })
            }
        }
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        match ParamId::parse(name)? {
            ParamId::Context => Some(&mut self.prompt.context),
            ParamId::Lora {
                block,
                projection,
                factor,
            } => {
                let lora = &mut self.readout.blocks.get_mut(block)?.projection_mut(projection).lora;
                Some(match factor {
                    LoraFactor::B => &mut lora.b,
                    LoraFactor::A => &mut lora.a,
                })
            }
        }
    }
}

/// Builds the desk-scale bundle described by `cfg`. Every random component
/// draws from its own stream derived from `cfg.seed`.
pub fn build_toy_bundle(cfg: &RunConfig) -> Result<ModelBundle> {
    cfg.validate()?;
    let (backbone, codec) = ToyBackbone::new(toy_config(cfg))?;
    let pooling = if cfg.mean_pool_instead_of_lse {
        Pooling::Mean
    } else {
        Pooling::LogSumExp
    };
    let readout = backbone.init_readout(cfg.lambda, cfg.lora_rank, cfg.lora_scale, pooling, derive_seed(cfg.seed, 2))?;
    let encoder = TextEncoder::toy(cfg.text_width, cfg.context_length + 16, derive_seed(cfg.seed, 3));
    let mut prompt = build_prompt_pair(
        &encoder.vocab,
        &cfg.pos_attribute,
        &cfg.neg_attribute,
        cfg.context_length,
        cfg.text_width,
        derive_seed(cfg.seed, 4),
    )?;
    prompt.mode = cfg.prompt_mode;
    prompt.trainable = cfg.prompt_trainable && !cfg.fixed_prompts;
    let schedule = NoiseSchedule::linear(cfg.total_timesteps, cfg.beta_start, cfg.beta_end)?;
    let bundle = ModelBundle {
        codec: Arc::new(codec),
        backbone: Arc::new(backbone),
        readout,
        prompt,
        encoder,
        policy: policy_from_config(cfg, &schedule)?,
        schedule,
        chain: DenoiseChain {
            steps: cfg.denoise_steps,
            delta: cfg.denoise_delta,
        },
        target: TargetMap::default(),
        image_size: cfg.image_size,
        tapped: cfg.tapped_blocks.clone(),
        config: cfg.clone(),
    };
    Ok(bundle)
}

pub fn toy_config(cfg: &RunConfig) -> ToyConfig {
    ToyConfig {
        image_size: cfg.image_size,
        latent_channels: cfg.latent_channels,
        patch: cfg.patch,
        base_width: cfg.base_width,
        num_blocks: cfg.num_blocks,
        text_width: cfg.text_width,
        attention_width: cfg.attention_width,
        detail_scale: cfg.detail_scale,
        seed: derive_seed(cfg.seed, 1),
    }
}

pub fn policy_from_config(cfg: &RunConfig, schedule: &NoiseSchedule) -> Result<TimestepPolicy> {
    let (lo, hi) = cfg.train_timestep_range;
    let policy = TimestepPolicy::uniform(lo, hi, cfg.eval_timestep_count)?.with_spacing(cfg.eval_timestep_spacing);
    policy.validate(schedule.total_timesteps())?;
    Ok(policy)
}

/// Mean over the inference timesteps of the antonym-averaged pooled
/// attention, with a single tapped pass per timestep.
pub fn score_image(image: &ImageArray, bundle: &ModelBundle, rng: &mut SeededRng) -> Result<f64> {
    Ok(bundle.score_breakdown(image, DenoiseChain::default(), rng)?.score)
}

/// Like [`score_image`], but each timestep first runs `steps - 1`
/// deterministic reverse steps spaced `delta` apart and taps the last pass.
pub fn multi_step_score(
    image: &ImageArray,
    bundle: &ModelBundle,
    steps: usize,
    delta: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    Ok(bundle
        .score_breakdown(image, DenoiseChain { steps, delta }, rng)?
        .score)
}
