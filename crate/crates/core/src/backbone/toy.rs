use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{check_latent, BackboneOutput, BlockSpec, BlockTape, DenoiserBackbone, PatchCodec, ProjectionGrads};
use crate::error::{Error, Result};
use crate::readout::{
    attention_map, project_qkv, softmax_rows_backward, AdaptedProjection, CrossAttentionReadout, LoraAdapter,
    Pooling, ReadoutBlock,
};
use crate::schedule::{seeded_rng, Latent, SeededRng};

/// Shape of the desk-scale denoiser.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub image_size: usize,
    pub latent_channels: usize,
    /// Codec downsampling factor `f`.
    pub patch: usize,
    /// Feature width of the first block; doubles at each deeper block.
    pub base_width: usize,
    pub num_blocks: usize,
    pub text_width: usize,
    pub attention_width: usize,
    /// Gain of the codec's detail channels.
    pub detail_scale: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            latent_channels: 4,
            patch: 8,
            base_width: 32,
            num_blocks: 2,
            text_width: 64,
            attention_width: 64,
            detail_scale: 4.0,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_blocks == 0 {
            return bad("toy backbone needs at least one cross-attention block".into());
        }
        if self.latent_channels == 0 || self.base_width == 0 || self.text_width == 0 || self.attention_width == 0 {
            return bad("toy widths must be positive".into());
        }
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return bad(format!("image size {} not divisible by patch {}", self.image_size, self.patch));
        }
        let side = self.image_size / self.patch;
        let factor = 1usize << (self.num_blocks - 1);
        if !side.is_multiple_of(factor) || side / factor == 0 {
            return bad(format!("latent side {side} cannot be halved {} times", self.num_blocks - 1));
        }
        Ok(())
    }

    pub fn latent_side(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn block_specs(&self) -> Vec<BlockSpec> {
        let side = self.latent_side();
        (0..self.num_blocks)
            .map(|i| {
                let s = side >> i;
                BlockSpec {
                    index: i,
                    tokens: s * s,
                    height: s,
                    width: s,
                    feature_width: self.base_width << i,
                    attention_width: self.attention_width,
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ToyBlock {
    /// `d_eps x c_in`
    w_in: Array2<f64>,
    bias: Array1<f64>,
    /// `d_eps x d`, maps the attention output back onto the features.
    w_o: Array2<f64>,
}

/// Small encoder-decoder denoiser with one cross-attention block per
/// resolution. Block `i` works on a `(side/2^i)^2` token grid; deeper blocks
/// read a 2x2 average pool of the previous block's output and the decoder
/// sums nearest-upsampled deeper outputs back into the first block.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyBackbone {
    config: ToyConfig,
    specs: Vec<BlockSpec>,
    blocks: Vec<ToyBlock>,
    /// `up[i]`: `d_eps_i x d_eps_{i+1}`
    up: Vec<Array2<f64>>,
    /// `C x d_eps_0`
    w_out: Array2<f64>,
}

fn gaussian(shape: (usize, usize), std: f64, rng: &mut SeededRng) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || std * rng.sample::<f64, _>(StandardNormal))
}

impl ToyBackbone {
    /// Builds the denoiser and its codec, both seeded from `config.seed`.
    pub fn new(config: ToyConfig) -> Result<(Self, PatchCodec)> {
        config.validate()?;
        let specs = config.block_specs();
        let mut rng = seeded_rng(config.seed);
        let mut blocks = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let c_in = if i == 0 {
                config.latent_channels
            } else {
                specs[i - 1].feature_width
            };
            let d_eps = spec.feature_width;
            blocks.push(ToyBlock {
                w_in: gaussian((d_eps, c_in), 1.0 / (c_in as f64).sqrt(), &mut rng),
                bias: Array1::from_shape_simple_fn(d_eps, || 0.1 * rng.sample::<f64, _>(StandardNormal)),
                w_o: gaussian((d_eps, config.attention_width), 0.5 / (config.attention_width as f64).sqrt(), &mut rng),
            });
        }
        let up = (0..specs.len().saturating_sub(1))
            .map(|i| {
                let wide = specs[i + 1].feature_width;
                gaussian((specs[i].feature_width, wide), 1.0 / (wide as f64).sqrt(), &mut rng)
            })
            .collect();
        let w_out = gaussian(
            (config.latent_channels, specs[0].feature_width),
            1.0 / (specs[0].feature_width as f64).sqrt(),
            &mut rng,
        );
        let codec = PatchCodec::new(config.latent_channels, config.patch, config.detail_scale, config.seed ^ 0xC0DEC)?;
        Ok((
            Self {
                config,
                specs,
                blocks,
                up,
                w_out,
            },
            codec,
        ))
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    /// Frozen base projections with zero-initialised adapters of `rank`.
    pub fn init_readout(
        &self,
        lambda: f64,
        rank: usize,
        lora_scale: f64,
        pooling: Pooling,
        seed: u64,
    ) -> Result<CrossAttentionReadout> {
        let mut rng = seeded_rng(seed);
        let d = self.config.attention_width;
        let d_tau = self.config.text_width;
        let mut blocks = Vec::with_capacity(self.specs.len());
        for spec in &self.specs {
            let proj = |d_in: usize, rng: &mut SeededRng| -> Result<AdaptedProjection> {
                Ok(AdaptedProjection {
                    base: gaussian((d, d_in), 1.0 / (d_in as f64).sqrt(), rng),
                    lora: LoraAdapter::zero_init(d, d_in, rank, lora_scale, rng)?,
                })
            };
            blocks.push(ReadoutBlock {
                query: proj(spec.feature_width, &mut rng)?,
                key: proj(d_tau, &mut rng)?,
                value: proj(d_tau, &mut rng)?,
            });
        }
        CrossAttentionReadout::new(blocks, lambda, pooling)
    }

    /// Rebuilds a backbone from exported parameters.
    pub fn from_parameters(config: ToyConfig, params: &BTreeMap<String, Array2<f64>>) -> Result<Self> {
        let (mut model, _) = Self::new(config)?;
        let get = |name: String| -> Result<Array2<f64>> {
            params.get(&name).cloned().ok_or(Error::MissingKey(name))
        };
        for (i, block) in model.blocks.iter_mut().enumerate() {
            let w_in = get(format!("backbone.block.{i}.w_in"))?;
            let bias = get(format!("backbone.block.{i}.bias"))?;
            let w_o = get(format!("backbone.block.{i}.w_o"))?;
            expect_dim(&w_in, block.w_in.dim(), "w_in")?;
            expect_dim(&bias, (1, block.bias.len()), "bias")?;
            expect_dim(&w_o, block.w_o.dim(), "w_o")?;
            block.w_in = w_in;
            block.bias = bias.row(0).to_owned();
            block.w_o = w_o;
        }
        for (i, up) in model.up.iter_mut().enumerate() {
            let w = get(format!("backbone.up.{i}"))?;
            expect_dim(&w, up.dim(), "up")?;
            *up = w;
        }
        let w_out = get("backbone.out".into())?;
        expect_dim(&w_out, model.w_out.dim(), "out")?;
        model.w_out = w_out;
        Ok(model)
    }

    fn check_readout(&self, readout: &CrossAttentionReadout, text: &Array2<f64>) -> Result<()> {
        if readout.num_blocks() != self.specs.len() {
            return Err(Error::TopologyMismatch(format!(
                "readout has {} blocks, backbone has {}",
                readout.num_blocks(),
                self.specs.len()
            )));
        }
        if text.ncols() != self.config.text_width {
            return Err(Error::shape(format!("text width {}", self.config.text_width), text.ncols()));
        }
        for (spec, block) in self.specs.iter().zip(&readout.blocks) {
            if block.query.d_in() != spec.feature_width || block.width() != spec.attention_width {
                return Err(Error::TopologyMismatch(format!("readout block {} shape", spec.index)));
            }
        }
        Ok(())
    }
}

fn expect_dim(a: &Array2<f64>, want: (usize, usize), what: &str) -> Result<()> {
    if a.dim() != want {
        return Err(Error::CorruptCheckpoint(format!("{what}: expected {want:?}, got {:?}", a.dim())));
    }
    Ok(())
}

/// Sinusoidal timestep embedding, scaled down so it shifts rather than
/// dominates the pre-activations.
fn time_embedding(t: usize, width: usize) -> Array1<f64> {
    let half = width / 2;
    let mut out = Array1::zeros(width);
    for j in 0..half {
        let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
        out[2 * j] = 0.1 * (t as f64 * freq).sin();
        out[2 * j + 1] = 0.1 * (t as f64 * freq).cos();
    }
    out
}

/// 2x2 average pool of row-major tokens on a `side x side` grid.
fn pool2(tokens: &Array2<f64>, side: usize) -> Array2<f64> {
    let half = side / 2;
    let mut out = Array2::zeros((half * half, tokens.ncols()));
    for y in 0..side {
        for x in 0..side {
            let mut dst = out.row_mut((y / 2) * half + x / 2);
            dst.scaled_add(0.25, &tokens.row(y * side + x));
        }
    }
    out
}

/// Adjoint of [`pool2`].
fn pool2_backward(grad: &Array2<f64>, side: usize) -> Array2<f64> {
    let half = side / 2;
    let mut out = Array2::zeros((side * side, grad.ncols()));
    for y in 0..side {
        for x in 0..side {
            out.row_mut(y * side + x)
                .assign(&(&grad.row((y / 2) * half + x / 2) * 0.25));
        }
    }
    out
}

/// Nearest-neighbour 2x upsample from a `side x side` grid.
fn upsample2(tokens: &Array2<f64>, side: usize) -> Array2<f64> {
    let big = side * 2;
    let mut out = Array2::zeros((big * big, tokens.ncols()));
    for y in 0..big {
        for x in 0..big {
            out.row_mut(y * big + x).assign(&tokens.row((y / 2) * side + x / 2));
        }
    }
    out
}

impl DenoiserBackbone for ToyBackbone {
    fn kind(&self) -> &str {
        "toy"
    }

    fn block_specs(&self) -> &[BlockSpec] {
        &self.specs
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        let side = self.config.latent_side();
        (self.config.latent_channels, side, side)
    }

    fn forward(
        &self,
        z_t: &Latent,
        t: usize,
        text: &Array2<f64>,
        readout: &CrossAttentionReadout,
    ) -> Result<BackboneOutput> {
        check_latent(z_t, self.latent_shape())?;
        self.check_readout(readout, text)?;
        let mut x = z_t.to_tokens();
        let mut outputs: Vec<Array2<f64>> = Vec::with_capacity(self.specs.len());
        let mut tape = Vec::with_capacity(self.specs.len());
        let mut maps = Vec::with_capacity(self.specs.len());
        for (i, (spec, block)) in self.specs.iter().zip(&self.blocks).enumerate() {
            if i > 0 {
                x = pool2(&outputs[i - 1], self.specs[i - 1].height);
            }
            let mut pre = x.dot(&block.w_in.t());
            pre += &block.bias;
            pre += &time_embedding(t, spec.feature_width);
            let phi = pre.mapv(f64::tanh);
            let (q, k, v) = project_qkv(&phi, text, &readout.blocks[i])?;
            let map = attention_map(i, &q, &k)?;
            let attended = map.values.dot(&v);
            let h = &phi + &attended.dot(&block.w_o.t());
            outputs.push(h);
            maps.push(map);
            tape.push(BlockTape {
                input: x.clone(),
                features: phi,
                q,
                k,
                v,
            });
        }
        let mut dec = outputs.pop().expect("at least one block");
        for i in (0..outputs.len()).rev() {
            let up = upsample2(&dec, self.specs[i + 1].height).dot(&self.up[i].t());
            dec = &outputs[i] + &up;
        }
        let side = self.config.latent_side();
        let eps = Latent::from_tokens(&dec.dot(&self.w_out.t()), side, side)?;
        Ok(BackboneOutput {
            predicted_noise: eps,
            maps,
            tape,
        })
    }

    fn backward(
        &self,
        output: &BackboneOutput,
        text: &Array2<f64>,
        readout: &CrossAttentionReadout,
        map_grads: &[Array2<f64>],
    ) -> Result<(Vec<ProjectionGrads>, Array2<f64>)> {
        let s = self.specs.len();
        if map_grads.len() != s || output.tape.len() != s {
            return Err(Error::TopologyMismatch(format!(
                "expected {s} map gradients, got {}",
                map_grads.len()
            )));
        }
        let mut d_text = Array2::zeros(text.raw_dim());
        let mut grads: Vec<Option<ProjectionGrads>> = vec![None; s];
        let mut d_out: Array2<f64> = Array2::zeros((self.specs[s - 1].tokens, self.specs[s - 1].feature_width));
        for i in (0..s).rev() {
            let tape = &output.tape[i];
            let map = &output.maps[i].values;
            let block = &self.blocks[i];
            let rb = &readout.blocks[i];
            let scale = 1.0 / (tape.q.ncols() as f64).sqrt();

            let d_attended = d_out.dot(&block.w_o);
            let d_map = &map_grads[i] + &d_attended.dot(&tape.v.t());
            let d_v = map.t().dot(&d_attended);
            let d_logits = softmax_rows_backward(map, &d_map);
            let d_q = d_logits.dot(&tape.k) * scale;
            let d_k = d_logits.t().dot(&tape.q) * scale;

            let w_q = rb.query.effective();
            let w_k = rb.key.effective();
            let w_v = rb.value.effective();
            d_text += &d_k.dot(&w_k);
            d_text += &d_v.dot(&w_v);
            grads[i] = Some(ProjectionGrads {
                query: d_q.t().dot(&tape.features),
                key: d_k.t().dot(text),
                value: d_v.t().dot(text),
            });

            if i > 0 {
                let d_phi = &d_out + &d_q.dot(&w_q);
                let d_pre = d_phi * &tape.features.mapv(|p| 1.0 - p * p);
                let d_in = d_pre.dot(&block.w_in);
                d_out = pool2_backward(&d_in, self.specs[i - 1].height);
            }
        }
        Ok((grads.into_iter().map(|g| g.expect("filled")).collect(), d_text))
    }

    fn export_parameters(&self) -> Vec<(String, Array2<f64>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("backbone.block.{i}.w_in"), b.w_in.clone()));
            out.push((format!("backbone.block.{i}.bias"), b.bias.clone().insert_axis(Axis(0))));
            out.push((format!("backbone.block.{i}.w_o"), b.w_o.clone()));
        }
        for (i, u) in self.up.iter().enumerate() {
            out.push((format!("backbone.up.{i}"), u.clone()));
        }
        out.push(("backbone.out".into(), self.w_out.clone()));
        out
    }
}
