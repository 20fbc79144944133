//! Cross-attention readout: LoRA-adapted query/key/value projections,
//! row-stochastic attention maps and log-sum-exp pooling into a scalar
//! quality prediction.
//!
//! An [`AttentionMap`] is `N x M` (visual tokens by text tokens) and every
//! row sums to one. Pooling runs down each text-token column, so a column
//! does not sum to one; with entries in `[0, 1]` the log-sum-exp of a column
//! sits between its maximum and `max + ln(N)/lambda`.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::SeededRng;

/// Low-rank update `scale * B * A` of a frozen `d_out x d_in` weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    /// `d_out x r`
    pub b: Array2<f64>,
    /// `r x d_in`
    pub a: Array2<f64>,
    pub scale: f64,
}

impl LoraAdapter {
    /// Zero `B` and Gaussian `A`, so the adapter starts as a no-op.
    pub fn zero_init(d_out: usize, d_in: usize, rank: usize, scale: f64, rng: &mut SeededRng) -> Result<Self> {
        if rank == 0 || rank >= d_out.min(d_in) {
            return Err(Error::Config(format!(
                "lora rank {rank} must satisfy 0 < r < min({d_out}, {d_in})"
            )));
        }
        let std = 1.0 / (d_in as f64).sqrt();
        let a = Array2::from_shape_simple_fn((rank, d_in), || std * rng.sample::<f64, _>(StandardNormal));
        Ok(Self {
            b: Array2::zeros((d_out, rank)),
            a,
            scale,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn delta(&self) -> Array2<f64> {
        self.b.dot(&self.a) * self.scale
    }

    /// Maps a gradient on the effective weight to `(dB, dA)`.
    pub fn factor_grads(&self, d_weight: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let db = d_weight.dot(&self.a.t()) * self.scale;
        let da = self.b.t().dot(d_weight) * self.scale;
        (db, da)
    }
}

/// Frozen base weight plus LoRA adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedProjection {
    /// `d_out x d_in`
    pub base: Array2<f64>,
    pub lora: LoraAdapter,
}

impl AdaptedProjection {
    pub fn effective(&self) -> Array2<f64> {
        &self.base + &self.lora.delta()
    }

    pub fn d_out(&self) -> usize {
        self.base.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.base.ncols()
    }

    /// `x * W'^T` for row-major token matrices.
    pub fn apply(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.d_in() {
            return Err(Error::shape(
                format!("{} input features", self.d_in()),
                x.ncols(),
            ));
        }
        Ok(x.dot(&self.effective().t()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Projection {
    Query,
    Key,
    Value,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Query, Projection::Key, Projection::Value];

    pub fn tag(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Key => "k",
            Projection::Value => "v",
        }
    }
}

/// Projections of one cross-attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct ReadoutBlock {
    /// `d x d_eps`
    pub query: AdaptedProjection,
    /// `d x d_tau`
    pub key: AdaptedProjection,
    /// `d x d_tau`
    pub value: AdaptedProjection,
}

impl ReadoutBlock {
    pub fn projection(&self, which: Projection) -> &AdaptedProjection {
        match which {
            Projection::Query => &self.query,
            Projection::Key => &self.key,
            Projection::Value => &self.value,
        }
    }

    pub fn projection_mut(&mut self, which: Projection) -> &mut AdaptedProjection {
        match which {
            Projection::Query => &mut self.query,
            Projection::Key => &mut self.key,
            Projection::Value => &mut self.value,
        }
    }

    pub fn width(&self) -> usize {
        self.query.d_out()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    LogSumExp,
    /// Ablation: plain mean over visual tokens.
    Mean,
}

/// The readout object passed into the backbone forward; holds one
/// [`ReadoutBlock`] per tapped cross-attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttentionReadout {
    pub blocks: Vec<ReadoutBlock>,
    pub lambda: f64,
    pub pooling: Pooling,
}

impl CrossAttentionReadout {
    pub fn new(blocks: Vec<ReadoutBlock>, lambda: f64, pooling: Pooling) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be > 0, got {lambda}")));
        }
        if blocks.is_empty() {
            return Err(Error::Config("readout needs at least one block".into()));
        }
        Ok(Self {
            blocks,
            lambda,
            pooling,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Resets every adapter's `B` to zero.
    pub fn zero_adapters(&mut self) {
        for block in &mut self.blocks {
            for p in Projection::ALL {
                block.projection_mut(p).lora.b.fill(0.0);
            }
        }
    }
}

/// `N x M` attention map of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub block: usize,
    pub values: Array2<f64>,
}

impl AttentionMap {
    pub fn num_visual(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_text(&self) -> usize {
        self.values.ncols()
    }
}

/// `Q = phi W_Q'^T`, `K = E W_K'^T`, `V = E W_V'^T`.
pub fn project_qkv(
    phi: &Array2<f64>,
    text_emb: &Array2<f64>,
    block: &ReadoutBlock,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    let q = block.query.apply(phi)?;
    let k = block.key.apply(text_emb)?;
    let v = block.value.apply(text_emb)?;
    Ok((q, k, v))
}

/// Row-wise softmax of `Q K^T / sqrt(d)` with `d = Q.ncols()`.
pub fn attention_map(block: usize, q: &Array2<f64>, k: &Array2<f64>) -> Result<AttentionMap> {
    if q.ncols() != k.ncols() {
        return Err(Error::shape(
            format!("key width {}", q.ncols()),
            k.ncols(),
        ));
    }
    let d = q.ncols() as f64;
    let mut logits = q.dot(&k.t()) / d.sqrt();
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    Ok(AttentionMap {
        block,
        values: logits,
    })
}

/// Gradient of a loss w.r.t. the softmax logits given its gradient w.r.t.
/// the row-stochastic output.
pub fn softmax_rows_backward(probs: &Array2<f64>, d_probs: &Array2<f64>) -> Array2<f64> {
    let mut out = probs * d_probs;
    let dots = out.sum_axis(Axis(1));
    for (mut row, (p, dot)) in out
        .rows_mut()
        .into_iter()
        .zip(probs.rows().into_iter().zip(dots.iter()))
    {
        row.zip_mut_with(&p, |o, &pv| *o -= pv * dot);
    }
    out
}

/// `(1/lambda) * ln(sum_n exp(lambda * a_n))`, evaluated with a max shift.
pub fn lse_pool_column(column: ArrayView1<f64>, lambda: f64) -> f64 {
    let max = column.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let sum: f64 = column.iter().map(|&v| (lambda * (v - max)).exp()).sum();
    max + sum.ln() / lambda
}

fn pool_column(column: ArrayView1<f64>, pooling: Pooling, lambda: f64) -> f64 {
    match pooling {
        Pooling::LogSumExp => lse_pool_column(column, lambda),
        Pooling::Mean => column.mean().unwrap_or(0.0),
    }
}

fn check_maps(maps: &[AttentionMap]) -> Result<usize> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Config("no attention maps to pool".into()))?;
    let m = first.num_text();
    if let Some(bad) = maps.iter().find(|a| a.num_text() != m) {
        return Err(Error::InconsistentTokens(m, bad.num_text()));
    }
    Ok(m)
}

/// Mean over blocks of the mean over text tokens of the LSE-pooled column.
pub fn quality_from_maps(maps: &[AttentionMap], lambda: f64) -> Result<f64> {
    quality_with_pooling(maps, Pooling::LogSumExp, lambda)
}

pub fn quality_with_pooling(maps: &[AttentionMap], pooling: Pooling, lambda: f64) -> Result<f64> {
    check_maps(maps)?;
    let total: f64 = maps
        .iter()
        .map(|a| {
            a.values
                .columns()
                .into_iter()
                .map(|c| pool_column(c, pooling, lambda))
                .sum::<f64>()
                / a.num_text() as f64
        })
        .sum();
    Ok(total / maps.len() as f64)
}

/// Gradient of [`quality_with_pooling`] w.r.t. each map's entries.
pub fn quality_grad(maps: &[AttentionMap], pooling: Pooling, lambda: f64) -> Result<Vec<Array2<f64>>> {
    check_maps(maps)?;
    let s = maps.len() as f64;
    Ok(maps
        .iter()
        .map(|a| {
            let (n, m) = a.values.dim();
            let norm = 1.0 / (s * m as f64);
            match pooling {
                Pooling::Mean => Array2::from_elem((n, m), norm / n as f64),
                Pooling::LogSumExp => {
                    let mut g = Array2::zeros((n, m));
                    for (col, mut out) in a.values.columns().into_iter().zip(g.columns_mut()) {
                        let max = col.fold(f64::NEG_INFINITY, |mx, &v| mx.max(v));
                        let w: Array1<f64> = col.mapv(|v| (lambda * (v - max)).exp());
                        let sum = w.sum();
                        out.assign(&(w * (norm / sum)));
                    }
                    g
                }
            }
        })
        .collect())
}
