//! Latent codec and denoiser interfaces, the desk-scale toy implementation
//! and the deterministic reverse step.

mod codec;
mod toy;

pub use codec::PatchCodec;
pub use toy::{ToyBackbone, ToyConfig};

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::readout::{AttentionMap, CrossAttentionReadout};
use crate::schedule::{Latent, NoiseSchedule};

/// `H x W x 3` image with values in `[0, 1]`.
pub type ImageArray = Array3<f64>;

/// Topology of one cross-attention block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub index: usize,
    /// Visual token count `N`, the flattened spatial extent.
    pub tokens: usize,
    pub height: usize,
    pub width: usize,
    /// Visual feature width `d_eps`.
    pub feature_width: usize,
    /// Attention width `d`.
    pub attention_width: usize,
}

/// Maps images to latents.
pub trait LatentCodec: Send + Sync {
    /// `(channels, height, width)` of the latent for a square input of side
    /// `image_size`.
    fn latent_shape(&self, image_size: usize) -> (usize, usize, usize);

    fn encode(&self, image: &ImageArray) -> Result<Latent>;

    fn can_decode(&self) -> bool {
        false
    }

    fn decode(&self, _latent: &Latent) -> Option<ImageArray> {
        None
    }

    fn export_parameters(&self) -> Vec<(String, Array2<f64>)>;
}

/// Per-block intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BlockTape {
    /// Block input tokens.
    pub input: Array2<f64>,
    /// `phi_i`, `N x d_eps`.
    pub features: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct BackboneOutput {
    pub predicted_noise: Latent,
    pub maps: Vec<AttentionMap>,
    pub tape: Vec<BlockTape>,
}

impl BackboneOutput {
    /// Visual features `phi_1 .. phi_S`.
    pub fn features(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.tape.iter().map(|b| &b.features)
    }
}

/// Gradients w.r.t. the effective (base + adapter) projection weights of
/// one block, ordered query, key, value.
#[derive(Clone, Debug)]
pub struct ProjectionGrads {
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
}

/// The noise-prediction network `eps_theta`.
pub trait DenoiserBackbone: Send + Sync {
    fn kind(&self) -> &str;

    fn block_specs(&self) -> &[BlockSpec];

    fn latent_shape(&self) -> (usize, usize, usize);

    /// Predicts the injected noise and taps every cross-attention block
    /// through `readout`.
    fn forward(
        &self,
        z_t: &Latent,
        t: usize,
        text: &Array2<f64>,
        readout: &CrossAttentionReadout,
    ) -> Result<BackboneOutput>;

    /// Back-propagates gradients on the attention maps to the effective
    /// projection weights and to the text embeddings.
    fn backward(
        &self,
        output: &BackboneOutput,
        text: &Array2<f64>,
        readout: &CrossAttentionReadout,
        map_grads: &[Array2<f64>],
    ) -> Result<(Vec<ProjectionGrads>, Array2<f64>)>;

    fn export_parameters(&self) -> Vec<(String, Array2<f64>)>;
}

/// Deterministic reverse step from `t` to `t_next` using the backbone's
/// noise estimate.
pub fn denoise_step(
    z_t: &Latent,
    t: usize,
    t_next: usize,
    backbone: &dyn DenoiserBackbone,
    text: &Array2<f64>,
    readout: &CrossAttentionReadout,
    schedule: &NoiseSchedule,
) -> Result<Latent> {
    if t_next >= t {
        return Err(Error::TimestepOrder { t, t_next });
    }
    schedule.check_timestep(t_next)?;
    let out = backbone.forward(z_t, t, text, readout)?;
    reverse_from_estimate(z_t, t, t_next, &out.predicted_noise, schedule)
}

/// `x0 = (z_t - sqrt(1-abar_t) eps) / sqrt(abar_t)`, then re-noised to
/// `t_next` with the same `eps`.
pub fn reverse_from_estimate(
    z_t: &Latent,
    t: usize,
    t_next: usize,
    eps_hat: &Latent,
    schedule: &NoiseSchedule,
) -> Result<Latent> {
    let abar_t = schedule.alpha_bar(t)?;
    let abar_next = schedule.alpha_bar(t_next)?;
    let x0 = z_t.axpby(1.0 / abar_t.sqrt(), eps_hat, -(1.0 - abar_t).sqrt() / abar_t.sqrt())?;
    x0.axpby(abar_next.sqrt(), eps_hat, (1.0 - abar_next).sqrt())
}

pub(crate) fn check_latent(z: &Latent, expected: (usize, usize, usize)) -> Result<()> {
    if z.shape() != expected {
        return Err(Error::shape(format!("{expected:?}"), format!("{:?}", z.shape())));
    }
    Ok(())
}
