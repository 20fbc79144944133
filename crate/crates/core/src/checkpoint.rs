//! Checkpoints and the pretrained-backbone adapter seam.
//!
//! A checkpoint is a safetensors archive of every named parameter as F64
//! (`block.{i}.{q|k|v}.{base|lora_B|lora_A}`, `context.tokens`,
//! `backbone.*`, `codec.*`, `encoder.*`) plus a sidecar `<path>.config`
//! holding the run configuration and the fitted target map as `key = value`
//! text.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::backbone::{DenoiserBackbone, LatentCodec, PatchCodec, ToyBackbone};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{build_toy_bundle, toy_config, ModelBundle, ParamId, TargetMap};
use crate::readout::{Pooling, Projection};
use crate::schedule::TimestepMode;

pub const FORMAT_VERSION: u32 = 1;
const META_PREFIX: &str = "checkpoint.";

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config");
    PathBuf::from(s)
}

/// The bundle's configuration with the fields that can be changed after
/// construction brought up to date.
pub fn effective_config(bundle: &ModelBundle) -> RunConfig {
    let mut cfg = bundle.config.clone();
    cfg.denoise_steps = bundle.chain.steps;
    cfg.denoise_delta = bundle.chain.delta;
    cfg.tapped_blocks = bundle.tapped.clone();
    cfg.lambda = bundle.readout.lambda;
    cfg.mean_pool_instead_of_lse = bundle.readout.pooling == Pooling::Mean;
    cfg.prompt_mode = bundle.prompt.mode;
    if bundle.policy.mode == TimestepMode::UniformRange {
        cfg.train_timestep_range = (bundle.policy.lo, bundle.policy.hi);
    }
    cfg.eval_timestep_count = bundle.policy.count;
    cfg.eval_timestep_spacing = bundle.policy.spacing;
    cfg
}

fn sidecar_text(bundle: &ModelBundle) -> String {
    let t = &bundle.target;
    let mut text = format!(
        "{META_PREFIX}format_version = {FORMAT_VERSION}\n\
         {META_PREFIX}backbone = {}\n\
         {META_PREFIX}target.mos_min = {}\n\
         {META_PREFIX}target.mos_max = {}\n\
         {META_PREFIX}target.offset = {}\n\
         {META_PREFIX}target.span = {}\n",
        bundle.backbone.kind(),
        t.mos_min,
        t.mos_max,
        t.offset,
        t.span
    );
    text.push_str(&effective_config(bundle).to_text());
    text
}

pub fn save_checkpoint(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let params = bundle.named_parameters();
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = params
        .iter()
        .map(|(name, a)| {
            let data: Vec<u8> = a.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.clone(), a.shape().to_vec(), data)
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, shape, data)| {
            TensorView::new(Dtype::F64, shape.clone(), data)
                .map(|v| (name.as_str(), v))
                .map_err(|e| Error::CorruptCheckpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = HashMap::from([("format_version".to_string(), FORMAT_VERSION.to_string())]);
    let archive = safetensors::serialize(views, &Some(meta)).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, archive).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    std::fs::write(&side, sidecar_text(bundle)).map_err(|e| Error::io(&side, e))
}

fn read_archive(path: &Path) -> Result<BTreeMap<String, Array2<f64>>> {
    if !path.is_file() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let version = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get("format_version"))
        .ok_or_else(|| Error::CorruptCheckpoint("archive has no format_version".into()))?;
    let version: u32 = version
        .parse()
        .map_err(|_| Error::CorruptCheckpoint(format!("bad format_version `{version}`")))?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F64 || view.shape().len() != 2 {
            return Err(Error::CorruptCheckpoint(format!("`{name}` is not a 2-D F64 tensor")));
        }
        let values: Vec<f64> = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let shape = (view.shape()[0], view.shape()[1]);
        let arr = Array2::from_shape_vec(shape, values).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        out.insert(name, arr);
    }
    Ok(out)
}

fn read_sidecar(path: &Path) -> Result<(RunConfig, TargetMap)> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let mut meta = BTreeMap::new();
    let mut rest = String::new();
    for line in text.lines() {
        match line.trim().strip_prefix(META_PREFIX).and_then(|l| l.split_once('=')) {
            Some((k, v)) => {
                meta.insert(k.trim().to_string(), v.trim().to_string());
            }
            None => {
                rest.push_str(line);
                rest.push('\n');
            }
        }
    }
    let field = |k: &str| -> Result<&String> {
        meta.get(k)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("sidecar lacks `{META_PREFIX}{k}`")))
    };
    let version: u32 = field("format_version")?
        .parse()
        .map_err(|_| Error::CorruptCheckpoint("bad format_version in sidecar".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let kind = field("backbone")?;
    if kind != "toy" {
        return Err(Error::UnsupportedBackbone(kind.clone()));
    }
    let num = |k: &str| -> Result<f64> {
        field(k)?
            .parse()
            .map_err(|_| Error::CorruptCheckpoint(format!("bad `{META_PREFIX}{k}`")))
    };
    let target = TargetMap {
        mos_min: num("target.mos_min")?,
        mos_max: num("target.mos_max")?,
        offset: num("target.offset")?,
        span: num("target.span")?,
    };
    let mut cfg = RunConfig::default();
    cfg.apply_text(&rest)?;
    Ok((cfg, target))
}

fn take(params: &BTreeMap<String, Array2<f64>>, name: &str, like: &Array2<f64>) -> Result<Array2<f64>> {
    let value = params.get(name).ok_or_else(|| Error::MissingKey(name.to_string()))?;
    if value.dim() != like.dim() {
        return Err(Error::CorruptCheckpoint(format!(
            "`{name}` has shape {:?}, expected {:?}",
            value.dim(),
            like.dim()
        )));
    }
    Ok(value.clone())
}

/// Rebuilds a bundle whose scores are bit-identical to the saved one.
pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    let params = read_archive(path)?;
    let (cfg, target) = read_sidecar(path)?;
    let mut bundle = build_toy_bundle(&cfg)?;
    bundle.target = target;

    let backbone = ToyBackbone::from_parameters(toy_config(&cfg), &params)?;
    bundle.backbone = Arc::new(backbone);
    let patterns = take(&params, "codec.patterns", &bundle.named_parameters()["codec.patterns"])?;
    bundle.codec = Arc::new(PatchCodec::from_patterns(cfg.patch, patterns)?);

    for i in 0..bundle.readout.num_blocks() {
        for projection in Projection::ALL {
            let name = format!("block.{i}.{}.base", projection.tag());
            let p = bundle.readout.blocks[i].projection_mut(projection);
            p.base = take(&params, &name, &p.base)?;
        }
    }
    for name in bundle.trainable_names() {
        debug_assert!(ParamId::parse(&name).is_some());
        let current = bundle.param(&name).expect("known").clone();
        *bundle.param_mut(&name).expect("known") = take(&params, &name, &current)?;
    }
    let enc = &mut bundle.encoder;
    enc.token_table = take(&params, "encoder.token_table", &enc.token_table)?;
    enc.positions = take(&params, "encoder.positions", &enc.positions)?;
    enc.projection = take(&params, "encoder.projection", &enc.projection)?;
    enc.gain = take(&params, "encoder.gain", &Array2::zeros((1, 1)))?[[0, 0]];
    Ok(bundle)
}

/// Where an external denoiser's weights live and what its cross-attention
/// blocks look like.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterDescriptor {
    pub kind: String,
    pub checkpoint: PathBuf,
    /// `(visual tokens N, feature width d_eps)` per block.
    pub blocks: Vec<(usize, usize)>,
}

impl AdapterDescriptor {
    pub fn from_config(cfg: &RunConfig) -> Result<Option<Self>> {
        let Some(checkpoint) = cfg.adapter_checkpoint.clone() else {
            return Ok(None);
        };
        let blocks = cfg
            .adapter_blocks
            .clone()
            .ok_or_else(|| Error::Config("adapter.checkpoint needs adapter.blocks".into()))?;
        Ok(Some(Self {
            kind: cfg.adapter_kind.clone(),
            checkpoint,
            blocks,
        }))
    }
}

/// Wraps an external backbone behind the crate's interfaces. Only the
/// toy kind is wired up; other kinds report [`Error::UnsupportedBackbone`].
pub fn attach_pretrained_adapter(
    descriptor: &AdapterDescriptor,
) -> Result<(Arc<dyn DenoiserBackbone>, Arc<dyn LatentCodec>)> {
    if descriptor.kind != "toy" {
        return Err(Error::UnsupportedBackbone(descriptor.kind.clone()));
    }
    let bundle = load_checkpoint(&descriptor.checkpoint)?;
    let specs = bundle.backbone.block_specs();
    let actual: Vec<(usize, usize)> = specs.iter().map(|s| (s.tokens, s.feature_width)).collect();
    if actual != descriptor.blocks {
        return Err(Error::TopologyMismatch(format!(
            "descriptor lists blocks {:?}, checkpoint has {:?}",
            descriptor.blocks, actual
        )));
    }
    Ok((bundle.backbone, bundle.codec))
}

/// Builds the bundle for `cfg`, swapping in an attached backbone when the
/// adapter stanza names one.
pub fn build_bundle(cfg: &RunConfig) -> Result<ModelBundle> {
    let mut bundle = build_toy_bundle(cfg)?;
    if let Some(desc) = AdapterDescriptor::from_config(cfg)? {
        let (backbone, codec) = attach_pretrained_adapter(&desc)?;
        if backbone.block_specs() != bundle.backbone.block_specs() {
            return Err(Error::TopologyMismatch(
                "attached backbone does not match the configured readout".into(),
            ));
        }
        bundle.backbone = backbone;
        bundle.codec = codec;
    }
    Ok(bundle)
}
