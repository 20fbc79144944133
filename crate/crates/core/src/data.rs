//! Dataset manifests, image preprocessing and the synthetic distortion
//! benchmark.
//!
//! A manifest is a UTF-8 CSV file with header `image_id,path,mos,split`,
//! optionally preceded by `# key=value` metadata lines (`dataset`,
//! `mos_min`, `mos_max`). Relative paths resolve against the manifest's
//! directory.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{Rgb, Rgb32FImage, RgbImage};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::ImageArray;
use crate::error::{Error, Result};
use crate::schedule::{derive_seed, seeded_rng, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub image_id: String,
    /// As written in the manifest; see [`Manifest::resolve`].
    pub path: String,
    pub mos: f64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub dataset: String,
    pub mos_min: f64,
    pub mos_max: f64,
    pub records: Vec<DatasetRecord>,
    /// Directory relative paths resolve against.
    pub root: PathBuf,
}

#[derive(Deserialize)]
struct Row {
    image_id: String,
    path: String,
    mos: String,
    split: String,
}

impl Manifest {
    /// Parses manifest text without touching the filesystem.
    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let parse_err = |line: u64, msg: String| Error::ManifestParse {
            path: source.to_path_buf(),
            line,
            msg,
        };
        let mut dataset = source
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        let (mut mos_min, mut mos_max) = (None, None);
        let mut body = String::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i as u64 + 1;
            if let Some(meta) = line.trim_start().strip_prefix('#') {
                if let Some((k, v)) = meta.split_once('=') {
                    let v = v.trim();
                    match k.trim() {
                        "dataset" => dataset = v.to_string(),
                        "mos_min" => mos_min = Some(v.parse().map_err(|_| parse_err(line_no, format!("bad mos_min `{v}`")))?),
                        "mos_max" => mos_max = Some(v.parse().map_err(|_| parse_err(line_no, format!("bad mos_max `{v}`")))?),
                        _ => {}
                    }
                }
                // Keep line numbering aligned for the CSV reader.
                body.push('\n');
                continue;
            }
            body.push_str(line);
            body.push('\n');
        }

        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(None)
            .from_reader(body.as_bytes());
        let csv_err = |e: csv::Error| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        };
        let headers = reader.headers().map_err(csv_err)?.clone();
        let mut records = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(csv_err)?;
            let line = rec.position().map_or(0, |p| p.line());
            let row: Row = rec.deserialize(Some(&headers)).map_err(|e| parse_err(line, e.to_string()))?;
            let mos: f64 = row
                .mos
                .parse()
                .ok()
                .filter(|m: &f64| m.is_finite())
                .ok_or_else(|| parse_err(line, format!("bad mos `{}`", row.mos)))?;
            let split = row.split.parse().map_err(|e| parse_err(line, e))?;
            records.push(DatasetRecord {
                image_id: row.image_id,
                path: row.path,
                mos,
                split,
            });
        }
        let lo = records.iter().map(|r| r.mos).fold(f64::INFINITY, f64::min);
        let hi = records.iter().map(|r| r.mos).fold(f64::NEG_INFINITY, f64::max);
        let manifest = Manifest {
            dataset,
            mos_min: mos_min.unwrap_or(if lo.is_finite() { lo } else { 0.0 }),
            mos_max: mos_max.unwrap_or(if hi.is_finite() { hi } else { 1.0 }),
            records,
            root: source.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    /// Unique ids and every score within the declared scale.
    pub fn validate(&self) -> Result<()> {
        if self.mos_min > self.mos_max {
            return Err(Error::ManifestInvalid(format!(
                "mos_min {} exceeds mos_max {}",
                self.mos_min, self.mos_max
            )));
        }
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.image_id.as_str()) {
                return Err(Error::ManifestInvalid(format!("duplicate image_id `{}`", r.image_id)));
            }
            if r.mos < self.mos_min || r.mos > self.mos_max {
                return Err(Error::ManifestInvalid(format!(
                    "mos {} of `{}` outside declared scale [{}, {}]",
                    r.mos, r.image_id, self.mos_min, self.mos_max
                )));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, record: &DatasetRecord) -> PathBuf {
        let p = Path::new(&record.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, which: Split) -> Manifest {
        self.filtered(|r| r.split == which)
    }

    pub fn filtered(&self, keep: impl Fn(&DatasetRecord) -> bool) -> Manifest {
        Manifest {
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            ..self.clone()
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_text(&self) -> Result<String> {
        let mut out = format!(
            "# dataset={}\n# mos_min={}\n# mos_max={}\n",
            self.dataset, self.mos_min, self.mos_max
        );
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["image_id", "path", "mos", "split"])
            .and_then(|_| {
                self.records.iter().try_for_each(|r| {
                    w.write_record([r.image_id.as_str(), r.path.as_str(), &r.mos.to_string(), r.split.as_str()])
                })
            })
            .map_err(|e| Error::ManifestInvalid(e.to_string()))?;
        let bytes = w.into_inner().map_err(|e| Error::ManifestInvalid(e.to_string()))?;
        out.push_str(&String::from_utf8(bytes).expect("csv writes utf-8"));
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }
}

/// Reads, parses and validates a manifest, and checks every image path
/// exists.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest = Manifest::parse(&text, path)?;
    for r in &manifest.records {
        if !manifest.resolve(r).is_file() {
            return Err(Error::ManifestInvalid(format!(
                "image `{}` not found at {}",
                r.image_id,
                manifest.resolve(r).display()
            )));
        }
    }
    Ok(manifest)
}

/// Decodes an image file as RGB in `[0, 1]` (8-bit sources divided by 255),
/// `H x W x 3`, without resizing.
pub fn load_image(path: &Path) -> Result<ImageArray> {
    let img = image::open(path)
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

/// Bilinear resize to `size x size`.
///
/// Pixel centres sit at half-integer coordinates: output pixel `i` samples
/// the source at `(i + 0.5) * in / out - 0.5`, clamped to the edge pixels.
/// Same-size input passes through unchanged. Aspect ratio is not preserved.
pub fn resize_bilinear(image: &ImageArray, size: usize) -> ImageArray {
    let (h, w, c) = image.dim();
    let coords = |n_in: usize| -> Vec<(usize, usize, f64)> {
        (0..size)
            .map(|i| {
                let s = ((i as f64 + 0.5) * n_in as f64 / size as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = coords(h);
    let xs = coords(w);
    Array3::from_shape_fn((size, size, c), |(y, x, k)| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = image[[y0, x0, k]] * (1.0 - fx) + image[[y0, x1, k]] * fx;
        let bottom = image[[y1, x0, k]] * (1.0 - fx) + image[[y1, x1, k]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Loads an image file and resizes it to the model resolution.
pub fn preprocess(path: &Path, size: usize) -> Result<ImageArray> {
    Ok(resize_bilinear(&load_image(path)?, size))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distortion {
    GaussianBlur,
    AdditiveNoise,
    Blocking,
}

impl Distortion {
    pub fn as_str(self) -> &'static str {
        match self {
            Distortion::GaussianBlur => "gaussian_blur",
            Distortion::AdditiveNoise => "additive_noise",
            Distortion::Blocking => "blocking",
        }
    }
}

impl FromStr for Distortion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_blur" | "blur" => Ok(Distortion::GaussianBlur),
            "additive_noise" | "noise" => Ok(Distortion::AdditiveNoise),
            "blocking" | "jpeg" => Ok(Distortion::Blocking),
            other => Err(Error::Config(format!("unknown distortion `{other}`"))),
        }
    }
}

/// Knobs of the synthetic benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub n: usize,
    pub distortion: Distortion,
    pub seed: u64,
    /// Side of the square images written.
    pub size: usize,
    /// Distortion levels `0..=max_level`; level `s` gets mos
    /// `100 * (1 - s / max_level)`.
    pub max_level: usize,
}

impl SynthOptions {
    pub fn new(n: usize, distortion: Distortion, seed: u64) -> Self {
        Self {
            n,
            distortion,
            seed,
            size: 128,
            max_level: 9,
        }
    }

    pub fn mos_for_level(&self, level: usize) -> f64 {
        100.0 * (1.0 - level as f64 / self.max_level as f64)
    }
}

/// Strength of the distortion at `level`: blur sigma in pixels, noise
/// standard deviation on the `[0, 1]` scale, or blend weight towards 8x8
/// block means.
pub fn distortion_strength(distortion: Distortion, level: usize, max_level: usize) -> f64 {
    let s = level as f64 / max_level as f64;
    match distortion {
        Distortion::GaussianBlur => 2.0 * s,
        Distortion::AdditiveNoise => 0.25 * s,
        Distortion::Blocking => s,
    }
}

/// Procedural content: a few oriented gratings over a smooth colour ramp,
/// with hard-edged discs and rectangles on top. Every image carries fine
/// detail, so sharpness is what separates the distortion levels.
pub fn render_content(size: usize, rng: &mut SeededRng) -> Rgb32FImage {
    let n = size as f32;
    let base: [f32; 3] = [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)];
    let ramp: [f32; 3] = [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)];
    let gratings: Vec<(f32, f32, f32, f32, [f32; 3])> = (0..3)
        .map(|_| {
            let theta = rng.gen_range(0.0..std::f32::consts::PI);
            let period = rng.gen_range(2.5..6.0);
            let phase = rng.gen_range(0.0..std::f32::consts::TAU);
            let amp = rng.gen_range(0.1..0.13);
            let tint = [rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0)];
            (theta, period, phase, amp, tint)
        })
        .collect();
    let mut img = Rgb32FImage::from_fn(size as u32, size as u32, |x, y| {
        let (xf, yf) = (x as f32, y as f32);
        let mut px = [0f32; 3];
        for c in 0..3 {
            px[c] = base[c] + ramp[c] * (xf + yf) / (2.0 * n);
        }
        for &(theta, period, phase, amp, tint) in &gratings {
            let u = xf * theta.cos() + yf * theta.sin();
            // Square-ish wave: hard transitions carry the high frequencies.
            let w = (std::f32::consts::TAU * u / period + phase).sin();
            let w = (3.0 * w).tanh();
            for c in 0..3 {
                px[c] += amp * tint[c] * w;
            }
        }
        Rgb(px)
    });
    let shapes = rng.gen_range(2..5);
    for _ in 0..shapes {
        let colour = Rgb([rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]);
        let cx = rng.gen_range(0.0..n);
        let cy = rng.gen_range(0.0..n);
        let r = rng.gen_range(0.05..0.14) * n;
        let disc = rng.gen_bool(0.5);
        for (x, y, p) in img.enumerate_pixels_mut() {
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            let inside = if disc {
                dx * dx + dy * dy <= r * r
            } else {
                dx.abs() <= r && dy.abs() <= 0.6 * r
            };
            if inside {
                *p = colour;
            }
        }
    }
    for p in img.pixels_mut() {
        for v in p.0.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    img
}

fn block_means(img: &Rgb32FImage, block: u32) -> Rgb32FImage {
    let (w, h) = img.dimensions();
    let mut out = img.clone();
    for by in (0..h).step_by(block as usize) {
        for bx in (0..w).step_by(block as usize) {
            let (ex, ey) = ((bx + block).min(w), (by + block).min(h));
            let mut sum = [0f32; 3];
            for y in by..ey {
                for x in bx..ex {
                    for c in 0..3 {
                        sum[c] += img.get_pixel(x, y)[c];
                    }
                }
            }
            let count = ((ex - bx) * (ey - by)) as f32;
            let mean = Rgb(sum.map(|s| s / count));
            for y in by..ey {
                for x in bx..ex {
                    out.put_pixel(x, y, mean);
                }
            }
        }
    }
    out
}

pub fn apply_distortion(img: &Rgb32FImage, distortion: Distortion, strength: f64, rng: &mut SeededRng) -> Rgb32FImage {
    if strength <= 0.0 {
        return img.clone();
    }
    let mut out = match distortion {
        Distortion::GaussianBlur => image::imageops::blur(img, strength as f32),
        Distortion::AdditiveNoise => {
            let normal = Normal::new(0.0, strength).expect("positive std");
            let mut out = img.clone();
            for p in out.pixels_mut() {
                for v in p.0.iter_mut() {
                    *v += normal.sample(rng) as f32;
                }
            }
            out
        }
        Distortion::Blocking => {
            let blocks = block_means(img, 8);
            let mut out = img.clone();
            let s = strength as f32;
            for (o, b) in out.pixels_mut().zip(blocks.pixels()) {
                for c in 0..3 {
                    o[c] = (1.0 - s) * o[c] + s * b[c];
                }
            }
            out
        }
    };
    for p in out.pixels_mut() {
        for v in p.0.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    out
}

fn to_rgb8(img: &Rgb32FImage) -> RgbImage {
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        Rgb(img.get_pixel(x, y).0.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
    })
}

/// Writes `n` seeded images to `out_dir/images` plus `out_dir/manifest.csv`.
///
/// Levels cycle `0, 1, ..., max_level` so every level is represented
/// equally; splits are 70/10/20 over a seeded shuffle.
pub fn generate_synthetic_dataset(opts: &SynthOptions, out_dir: &Path) -> Result<Manifest> {
    if opts.n < 10 {
        return Err(Error::Config(format!("synthetic dataset needs n >= 10, got {}", opts.n)));
    }
    if opts.max_level == 0 || opts.size < 8 {
        return Err(Error::Config("synthetic dataset needs max_level >= 1 and size >= 8".into()));
    }
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;

    let mut order: Vec<usize> = (0..opts.n).collect();
    order.shuffle(&mut seeded_rng(derive_seed(opts.seed, 0x5b11)));
    let n_train = opts.n * 7 / 10;
    let n_val = opts.n / 10;
    let mut splits = vec![Split::Test; opts.n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let mut records = Vec::with_capacity(opts.n);
    for i in 0..opts.n {
        let level = i % (opts.max_level + 1);
        let mut rng = seeded_rng(derive_seed(opts.seed, i as u64 + 1));
        let clean = render_content(opts.size, &mut rng);
        let strength = distortion_strength(opts.distortion, level, opts.max_level);
        let distorted = apply_distortion(&clean, opts.distortion, strength, &mut rng);
        let id = format!("img{i:05}");
        let rel = format!("images/{id}.png");
        let path = out_dir.join(&rel);
        to_rgb8(&distorted).save(&path).map_err(|e| Error::Decode {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        records.push(DatasetRecord {
            image_id: id,
            path: rel,
            mos: opts.mos_for_level(level),
            split: splits[i],
        });
    }
    let manifest = Manifest {
        dataset: format!("synthetic-{}", opts.distortion.as_str()),
        mos_min: 0.0,
        mos_max: 100.0,
        records,
        root: out_dir.to_path_buf(),
    };
    manifest.write(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
