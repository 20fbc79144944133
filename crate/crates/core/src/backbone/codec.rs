use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;

use super::{ImageArray, LatentCodec};
use crate::error::{Error, Result};
use crate::schedule::{seeded_rng, Latent, SeededRng};

/// Fixed patchifier: each `f x f x 3` patch is projected onto `C` patterns.
///
/// Channel 0 is twice the centred patch mean. The remaining channels use
/// zero-mean, high-passed random sign patterns shared by the three colour
/// planes, so they ignore the patch average and respond to fine detail
/// inside the patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchCodec {
    pub patch: usize,
    /// `C x (f*f*3)`, rows indexed by `(dy*f + dx)*3 + channel`.
    pub patterns: Array2<f64>,
}

impl PatchCodec {
    pub fn new(channels: usize, patch: usize, detail_scale: f64, seed: u64) -> Result<Self> {
        if channels == 0 || patch == 0 {
            return Err(Error::Config("codec needs channels >= 1 and patch >= 1".into()));
        }
        let width = patch * patch * 3;
        let mut rng = seeded_rng(seed);
        let mut patterns = Array2::zeros((channels, width));
        patterns.row_mut(0).fill(2.0 / width as f64);
        for c in 1..channels {
            let spatial = high_pass_signs(patch, &mut rng);
            let norm = detail_scale / (3.0 * spatial.iter().map(|v| v * v).sum::<f64>()).sqrt();
            let mut row = patterns.row_mut(c);
            for (j, v) in spatial.iter().enumerate() {
                for k in 0..3 {
                    row[j * 3 + k] = v * norm;
                }
            }
        }
        Ok(Self { patch, patterns })
    }

    pub fn from_patterns(patch: usize, patterns: Array2<f64>) -> Result<Self> {
        if patterns.ncols() != patch * patch * 3 {
            return Err(Error::shape(patch * patch * 3, patterns.ncols()));
        }
        Ok(Self { patch, patterns })
    }

    pub fn channels(&self) -> usize {
        self.patterns.nrows()
    }
}

/// Balanced random signs on an `f x f` grid minus their 3x3 local mean
/// (edge-clamped), then re-centred: a zero-mean pattern whose energy sits
/// at high spatial frequencies.
fn high_pass_signs(f: usize, rng: &mut SeededRng) -> Vec<f64> {
    let mut signs: Vec<f64> = (0..f * f).map(|j| if j % 2 == 0 { 1.0 } else { -1.0 }).collect();
    signs.shuffle(rng);
    let at = |y: isize, x: isize| signs[(y.clamp(0, f as isize - 1) as usize) * f + x.clamp(0, f as isize - 1) as usize];
    let mut out: Vec<f64> = (0..f * f)
        .map(|j| {
            let (y, x) = ((j / f) as isize, (j % f) as isize);
            let mut local = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    local += at(y + dy, x + dx);
                }
            }
            signs[j] - local / 9.0
        })
        .collect();
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    out.iter_mut().for_each(|v| *v -= mean);
    out
}

impl LatentCodec for PatchCodec {
    fn latent_shape(&self, image_size: usize) -> (usize, usize, usize) {
        let side = image_size / self.patch;
        (self.channels(), side, side)
    }

    fn encode(&self, image: &ImageArray) -> Result<Latent> {
        let (h, w, ch) = image.dim();
        let f = self.patch;
        if ch != 3 || h != w || h % f != 0 {
            return Err(Error::shape(
                format!("square HxWx3 image with side divisible by {f}"),
                format!("{h}x{w}x{ch}"),
            ));
        }
        let side = h / f;
        let c = self.channels();
        let mut out = Array3::zeros((c, side, side));
        let mut patch = vec![0.0; f * f * 3];
        for py in 0..side {
            for px in 0..side {
                for dy in 0..f {
                    for dx in 0..f {
                        for k in 0..3 {
                            patch[(dy * f + dx) * 3 + k] = image[[py * f + dy, px * f + dx, k]] - 0.5;
                        }
                    }
                }
                for cc in 0..c {
                    let row = self.patterns.row(cc);
                    out[[cc, py, px]] = row.iter().zip(&patch).map(|(a, b)| a * b).sum();
                }
            }
        }
        Latent::new(out)
    }

    fn export_parameters(&self) -> Vec<(String, Array2<f64>)> {
        vec![("codec.patterns".into(), self.patterns.clone())]
    }
}
