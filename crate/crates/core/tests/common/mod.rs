//! Shared by the integration tests and the acceptance harness: loop
//! oracles, property checks over concrete inputs, and small fixtures.
//!
//! Property checks return `Err(description)` instead of panicking so the
//! acceptance harness can count failures while proptest can shrink them.
#![allow(dead_code)]

use std::path::Path;

use diffusion_iqa::backbone::ImageArray;
use diffusion_iqa::config::RunConfig;
use diffusion_iqa::data::{apply_distortion, distortion_strength, generate_synthetic_dataset, render_content, Distortion, Manifest, SynthOptions};
use diffusion_iqa::metrics::{plcc, srcc};
use diffusion_iqa::model::{ModelBundle, CONTEXT_PARAM};
use diffusion_iqa::backbone::denoise_step;
use diffusion_iqa::prompt::{encode_prompt, Polarity};
use diffusion_iqa::readout::{
    attention_map, lse_pool_column, project_qkv, quality_from_maps, AdaptedProjection, AttentionMap, LoraAdapter, ReadoutBlock,
};
use diffusion_iqa::schedule::{forward_noise, seeded_rng, Latent, NoiseSchedule, SeededRng};
use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;

pub const ROW_SUM_TOL: f64 = 1e-5;
pub const SHIFT_TOL: f64 = 1e-9;
pub const MATMUL_TOL: f64 = 1e-6;
pub const SOFTMAX_TOL: f64 = 1e-6;
pub const LSE_TOL: f64 = 1e-9;
pub const POOL_TOL: f64 = 1e-9;
pub const CORR_TOL: f64 = 1e-12;
pub const LINEARITY_TOL: f64 = 1e-12;
pub const DENOISE_REL_TOL: f64 = 1e-6;
pub const COMPOSE_TOL: f64 = 1e-8;
pub const GRAD_REL_TOL: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-4;
/// Central differences of a score near 35 (the uniform-attention baseline
/// at lambda 0.14) carry roundoff of about `eps * 35 / h`, roughly 4e-11.
/// Relative error is taken against at least this magnitude so that
/// coordinates with near-zero gradient compare at an absolute 1e-10.
pub const GRAD_ABS_FLOOR: f64 = 1e-7;

// ---------------------------------------------------------------- fixtures

/// 32 px images, 8-wide everything: fast enough for per-test training.
pub fn tiny_config() -> RunConfig {
    RunConfig {
        image_size: 32,
        base_width: 8,
        text_width: 8,
        attention_width: 8,
        context_length: 4,
        epochs: 2,
        batch_size: 4,
        learning_rate: 1e-2,
        ..RunConfig::default()
    }
}

pub fn gaussian(rng: &mut SeededRng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || std * rng.sample::<f64, _>(StandardNormal))
}

pub fn uniform_vec(rng: &mut SeededRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Synthetic content at one distortion level, as an `H x W x 3` array.
pub fn synthetic_image(size: usize, level: usize, seed: u64) -> ImageArray {
    let mut rng = seeded_rng(seed);
    let clean = render_content(size, &mut rng);
    let strength = distortion_strength(Distortion::GaussianBlur, level, 9);
    let img = apply_distortion(&clean, Distortion::GaussianBlur, strength, &mut rng);
    Array3::from_shape_fn((size, size, 3), |(y, x, c)| img.get_pixel(x as u32, y as u32)[c] as f64)
}

pub fn write_dataset(dir: &Path, n: usize, size: usize, seed: u64) -> Manifest {
    let opts = SynthOptions {
        size,
        ..SynthOptions::new(n, Distortion::GaussianBlur, seed)
    };
    generate_synthetic_dataset(&opts, dir).expect("synthetic dataset")
}

/// Gives every adapter a nonzero `B` so `A` receives gradient too.
pub fn perturb_adapters(bundle: &mut ModelBundle, std: f64, seed: u64) {
    let mut rng = seeded_rng(seed);
    for block in &mut bundle.readout.blocks {
        for p in diffusion_iqa::readout::Projection::ALL {
            let b = &mut block.projection_mut(p).lora.b;
            *b = gaussian(&mut rng, b.nrows(), b.ncols(), std);
        }
    }
}

pub fn bits_equal(a: &Array2<f64>, b: &Array2<f64>) -> bool {
    a.shape() == b.shape() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

// ----------------------------------------------------------------- oracles

/// `x * w^T` by triple loop.
pub fn loop_matmul_t(x: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
    let (n, d_in) = x.dim();
    let d_out = w.nrows();
    let mut out = Array2::zeros((n, d_out));
    for i in 0..n {
        for j in 0..d_out {
            let mut s = 0.0;
            for k in 0..d_in {
                s += x[[i, k]] * w[[j, k]];
            }
            out[[i, j]] = s;
        }
    }
    out
}

/// `base + scale * b * a` by loops.
pub fn loop_effective(base: &Array2<f64>, b: &Array2<f64>, a: &Array2<f64>, scale: f64) -> Array2<f64> {
    let mut w = base.clone();
    for i in 0..w.nrows() {
        for j in 0..w.ncols() {
            let mut s = 0.0;
            for r in 0..b.ncols() {
                s += b[[i, r]] * a[[r, j]];
            }
            w[[i, j]] += scale * s;
        }
    }
    w
}

/// Scalar-loop row softmax of `q k^T / sqrt(d)`, no max shift.
pub fn loop_attention(q: &Array2<f64>, k: &Array2<f64>) -> Array2<f64> {
    let d = q.ncols() as f64;
    let mut out = Array2::zeros((q.nrows(), k.nrows()));
    for i in 0..q.nrows() {
        let mut denom = 0.0;
        for j in 0..k.nrows() {
            let mut dot = 0.0;
            for c in 0..q.ncols() {
                dot += q[[i, c]] * k[[j, c]];
            }
            let e = (dot / d.sqrt()).exp();
            out[[i, j]] = e;
            denom += e;
        }
        for j in 0..k.nrows() {
            out[[i, j]] /= denom;
        }
    }
    out
}

/// Direct `ln(sum exp(lambda a)) / lambda` with a compensated sum.
pub fn direct_lse(col: &[f64], lambda: f64) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &a in col {
        let term = (lambda * a).exp();
        let t = sum + term;
        comp += if sum.abs() >= term.abs() { (sum - t) + term } else { (term - t) + sum };
        sum = t;
    }
    (sum + comp).ln() / lambda
}

/// Mean over maps of the mean over columns of each column's LSE.
pub fn loop_quality(maps: &[Array2<f64>], lambda: f64) -> f64 {
    let mut total = 0.0;
    for a in maps {
        let mut per_map = 0.0;
        for m in 0..a.ncols() {
            let col: Vec<f64> = (0..a.nrows()).map(|n| a[[n, m]]).collect();
            per_map += direct_lse(&col, lambda);
        }
        total += per_map / a.ncols() as f64;
    }
    total / maps.len() as f64
}

/// Average rank by counting: `#less + (#equal + 1) / 2`.
pub fn brute_ranks(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| {
            let less = xs.iter().filter(|&&y| y < x).count() as f64;
            let equal = xs.iter().filter(|&&y| y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

/// Covariance over the product of standard deviations; NaN when either
/// side is constant.
pub fn formula_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx: f64 = x.iter().sum::<f64>() / n;
    let my: f64 = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n;
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n;
    if vx == 0.0 || vy == 0.0 {
        return f64::NAN;
    }
    cov / (vx * vy).sqrt()
}

pub fn brute_spearman(x: &[f64], y: &[f64]) -> f64 {
    formula_pearson(&brute_ranks(x), &brute_ranks(y))
}

/// Straight-line reverse step given the noise estimate.
pub fn straight_denoise(z_t: &[f64], eps_hat: &[f64], abar_t: f64, abar_next: f64) -> Vec<f64> {
    z_t.iter()
        .zip(eps_hat)
        .map(|(&z, &e)| {
            let x0 = (z - (1.0 - abar_t).sqrt() * e) / abar_t.sqrt();
            abar_next.sqrt() * x0 + (1.0 - abar_next).sqrt() * e
        })
        .collect()
}

// -------------------------------------------------------------- properties

pub type Check = Result<(), String>;

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn softmax_rows(q: &Array2<f64>, k: &Array2<f64>) -> Check {
    let map = attention_map(0, q, k).map_err(|e| e.to_string())?;
    for (i, row) in map.values.rows().into_iter().enumerate() {
        let s = row.sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(format!("row {i} sums to {s}"));
        }
        if let Some(v) = row.iter().find(|&&v| !(v > 0.0)) {
            return Err(format!("row {i} has non-positive entry {v}"));
        }
    }
    Ok(())
}

pub fn lse_bounds(col: &[f64], lambda: f64) -> Check {
    let v = lse_pool_column(Array1::from(col.to_vec()).view(), lambda);
    let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let upper = max + (col.len() as f64).ln() / lambda;
    // One ulp-scale slack for the rounding of `max + ln(sum)/lambda`.
    let slack = 1e-12 * upper.abs().max(1.0);
    if v < max - slack || v > upper + slack {
        return Err(format!("lse {v} outside [{max}, {upper}]"));
    }
    Ok(())
}

pub fn lse_shift(col: &[f64], lambda: f64, c: f64) -> Check {
    let base = lse_pool_column(Array1::from(col.to_vec()).view(), lambda);
    let shifted: Vec<f64> = col.iter().map(|a| a + c).collect();
    let moved = lse_pool_column(Array1::from(shifted).view(), lambda);
    let err = (moved - (base + c)).abs();
    if err > SHIFT_TOL {
        return Err(format!("shift by {c}: error {err:e}"));
    }
    Ok(())
}

pub fn lse_monotone(col: &[f64], lambda: f64, index: usize, bump: f64) -> Check {
    let before = lse_pool_column(Array1::from(col.to_vec()).view(), lambda);
    let mut raised = col.to_vec();
    raised[index] += bump;
    let after = lse_pool_column(Array1::from(raised).view(), lambda);
    if after < before {
        return Err(format!("raising entry {index} by {bump} lowered lse {before} -> {after}"));
    }
    Ok(())
}

/// `|lse - max|` shrinks as lambda goes 1, 10, 100.
pub fn lse_max_limit(col: &[f64]) -> Check {
    let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let gaps: Vec<f64> = [1.0, 10.0, 100.0]
        .iter()
        .map(|&l| (lse_pool_column(Array1::from(col.to_vec()).view(), l) - max).abs())
        .collect();
    if gaps.windows(2).all(|w| w[1] <= w[0]) {
        Ok(())
    } else {
        Err(format!("gaps {gaps:?} not decreasing"))
    }
}

pub fn alpha_bar_decreasing(total: usize, beta_start: f64, beta_end: f64) -> Check {
    let s = NoiseSchedule::linear(total, beta_start, beta_end).map_err(|e| e.to_string())?;
    let ab = s.alpha_bars();
    if let Some(i) = ab.windows(2).position(|w| w[1] >= w[0]) {
        return Err(format!("alpha_bar not decreasing at {i}: {} -> {}", ab[i], ab[i + 1]));
    }
    if ab.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
        return Err("alpha_bar outside (0, 1)".into());
    }
    Ok(())
}

/// `forward(z_a + z_b, eps_a + eps_b) = forward(z_a, eps_a) + forward(z_b, eps_b)`
/// and `forward(z, 0) = sqrt(abar) z` exactly.
pub fn forward_linearity(z_a: &Latent, z_b: &Latent, e_a: &Latent, e_b: &Latent, t: usize, s: &NoiseSchedule) -> Check {
    let sum = |a: &Latent, b: &Latent| a.axpby(1.0, b, 1.0).expect("same shape");
    let lhs = forward_noise(&sum(z_a, z_b), t, &sum(e_a, e_b), s).map_err(|e| e.to_string())?;
    let rhs = sum(
        &forward_noise(z_a, t, e_a, s).map_err(|e| e.to_string())?,
        &forward_noise(z_b, t, e_b, s).map_err(|e| e.to_string())?,
    );
    let err = lhs
        .values()
        .iter()
        .zip(rhs.values().iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if err > LINEARITY_TOL {
        return Err(format!("linearity error {err:e} at t={t}"));
    }
    let (c, h, w) = z_a.shape();
    let quiet = forward_noise(z_a, t, &Latent::zeros(c, h, w), s).map_err(|e| e.to_string())?;
    let scale = s.alpha_bar(t).map_err(|e| e.to_string())?.sqrt();
    if quiet.values().iter().zip(z_a.values().iter()).any(|(q, z)| *q != scale * z) {
        return Err(format!("eps = 0 is not sqrt(abar) z0 at t={t}"));
    }
    Ok(())
}

/// Every per-timestep score is the plain average of the two polarities.
pub fn antonym_average(bundle: &ModelBundle, image: &ImageArray, seed: u64) -> Check {
    let b = bundle
        .score_breakdown(image, bundle.chain, &mut seeded_rng(seed))
        .map_err(|e| e.to_string())?;
    for ts in &b.timesteps {
        let neg = ts.g_neg.ok_or("antonym mode must report g_neg")?;
        if ts.score != (ts.g_pos + neg) / 2.0 {
            return Err(format!("t={}: score {} != ({} + {neg}) / 2", ts.t, ts.score, ts.g_pos));
        }
    }
    let mean = b.timesteps.iter().map(|t| t.score).sum::<f64>() / b.timesteps.len() as f64;
    if (mean - b.score).abs() > 1e-12 * mean.abs().max(1.0) {
        return Err(format!("score {} is not the timestep mean {mean}", b.score));
    }
    Ok(())
}

pub fn srcc_monotone(pred: &[f64], mos: &[f64]) -> Check {
    let base = srcc(pred, mos).map_err(|e| e.to_string())?;
    let transforms: [(&str, fn(f64) -> f64); 3] = [
        ("cubic", |x| x * x * x + x),
        ("exp", |x| (x / 4.0).exp()),
        ("atan", |x| x.atan()),
    ];
    for (name, f) in transforms {
        let mapped: Vec<f64> = pred.iter().map(|&x| f(x)).collect();
        // A transform that merges two distinct floats is not strictly
        // increasing in floating point; skip it rather than blame srcc.
        if crate_ranks_differ(pred, &mapped) {
            continue;
        }
        let v = srcc(&mapped, mos).map_err(|e| e.to_string())?;
        if v != base {
            return Err(format!("{name}: srcc {v} != {base}"));
        }
    }
    Ok(())
}

fn crate_ranks_differ(a: &[f64], b: &[f64]) -> bool {
    brute_ranks(a) != brute_ranks(b)
}

pub fn plcc_affine(pred: &[f64], mos: &[f64], a: f64, b: f64) -> Check {
    let base = plcc(pred, mos).map_err(|e| e.to_string())?;
    let mapped: Vec<f64> = pred.iter().map(|x| a * x + b).collect();
    let v = plcc(&mapped, mos).map_err(|e| e.to_string())?;
    let err = (v - a.signum() * base).abs();
    if err > CORR_TOL {
        return Err(format!("a={a}, b={b}: error {err:e}"));
    }
    Ok(())
}

// ---------------------------------------------------------- gradient check

#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    /// Coordinates whose analytic and numeric gradients are both exactly 0.
    pub exact_zero: usize,
    /// Coordinates compared purely relatively (gradient above the floor).
    pub above_floor: usize,
    pub max_rel: f64,
    pub worst: String,
}

/// Central differences on `coords_per_tensor` random entries of every
/// LoRA factor and of the context, against `score_grad_at`.
pub fn gradient_check(bundle: &ModelBundle, z0: &Latent, draws: &[(usize, Latent)], coords_per_tensor: usize, seed: u64) -> GradCheck {
    let chain = bundle.chain;
    let (_, grads) = bundle.score_grad_at(z0, draws, chain).expect("analytic gradient");
    let mut rng = seeded_rng(seed);
    let mut names = bundle.trainable_names();
    if !names.iter().any(|n| n == CONTEXT_PARAM) {
        names.push(CONTEXT_PARAM.to_string());
    }
    let mut report = GradCheck {
        checked: 0,
        exact_zero: 0,
        above_floor: 0,
        max_rel: 0.0,
        worst: String::new(),
    };
    let eval = |b: &ModelBundle| b.score_latent_at(z0, draws, chain).expect("score").score;
    for name in names {
        let (rows, cols) = grads[&name].dim();
        for _ in 0..coords_per_tensor {
            let (r, c) = (rng.gen_range(0..rows), rng.gen_range(0..cols));
            let mut plus = bundle.clone();
            plus.param_mut(&name).expect("param")[[r, c]] += FD_STEP;
            let mut minus = bundle.clone();
            minus.param_mut(&name).expect("param")[[r, c]] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let analytic = grads[&name][[r, c]];
            if analytic == 0.0 && numeric == 0.0 {
                report.exact_zero += 1;
            }
            if analytic.abs() > GRAD_ABS_FLOOR {
                report.above_floor += 1;
            }
            let denom = analytic.abs().max(numeric.abs()).max(GRAD_ABS_FLOOR);
            let rel = (analytic - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel || report.worst.is_empty() {
                report.max_rel = rel.max(report.max_rel);
                report.worst = format!("{name}[{r},{c}] analytic {analytic:e} numeric {numeric:e}");
            }
        }
    }
    report
}

// --------------------------------------------------------- oracle checks

fn random_projection(rng: &mut SeededRng, d_out: usize, d_in: usize, rank: usize) -> AdaptedProjection {
    AdaptedProjection {
        base: gaussian(rng, d_out, d_in, 1.0),
        lora: LoraAdapter {
            b: gaussian(rng, d_out, rank, 0.5),
            a: gaussian(rng, rank, d_in, 0.5),
            scale: rng.gen_range(0.5..2.0),
        },
    }
}

fn within(label: &str, got: f64, want: f64, tol: f64) -> Check {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{label}: {got} vs {want} (|diff| {:e} > {tol:e})", (got - want).abs()))
    }
}

fn within_all(label: &str, got: &Array2<f64>, want: &Array2<f64>, tol: f64) -> Check {
    if got.shape() != want.shape() {
        return Err(format!("{label}: shape {:?} vs {:?}", got.shape(), want.shape()));
    }
    let d = max_abs_diff(got, want);
    if d <= tol {
        Ok(())
    } else {
        Err(format!("{label}: max |diff| {d:e} > {tol:e}"))
    }
}

pub fn oracle_qkv(seed: u64) -> Check {
    let mut rng = seeded_rng(seed);
    let (n, m, d_eps, d_tau, d) = (3, 5, 4, 6, 4);
    let block = ReadoutBlock {
        query: random_projection(&mut rng, d, d_eps, 2),
        key: random_projection(&mut rng, d, d_tau, 2),
        value: random_projection(&mut rng, d, d_tau, 2),
    };
    let phi = gaussian(&mut rng, n, d_eps, 1.0);
    let text = gaussian(&mut rng, m, d_tau, 1.0);
    let (q, k, v) = project_qkv(&phi, &text, &block).map_err(|e| e.to_string())?;
    let eff = |p: &AdaptedProjection| loop_effective(&p.base, &p.lora.b, &p.lora.a, p.lora.scale);
    within_all("Q", &q, &loop_matmul_t(&phi, &eff(&block.query)), MATMUL_TOL)?;
    within_all("K", &k, &loop_matmul_t(&text, &eff(&block.key)), MATMUL_TOL)?;
    within_all("V", &v, &loop_matmul_t(&text, &eff(&block.value)), MATMUL_TOL)
}

pub fn oracle_attention(seed: u64) -> Check {
    let mut rng = seeded_rng(seed);
    let q = gaussian(&mut rng, 5, 3, 1.5);
    let k = gaussian(&mut rng, 4, 3, 1.5);
    let map = attention_map(0, &q, &k).map_err(|e| e.to_string())?;
    within_all("attention", &map.values, &loop_attention(&q, &k), SOFTMAX_TOL)
}

pub fn oracle_lse(seed: u64) -> Check {
    let mut rng = seeded_rng(seed);
    let col = uniform_vec(&mut rng, 7, 0.0, 1.0);
    let got = lse_pool_column(Array1::from(col.clone()).view(), 0.14);
    within("lse", got, direct_lse(&col, 0.14), LSE_TOL)
}

/// Random row-stochastic maps over a random number of blocks.
pub fn oracle_pooling(seed: u64) -> Check {
    let mut rng = seeded_rng(seed);
    let blocks = rng.gen_range(1..4);
    let m = rng.gen_range(2..9);
    let lambda = if rng.gen_bool(0.5) { 0.14 } else { rng.gen_range(0.05..5.0) };
    let raw: Vec<Array2<f64>> = (0..blocks)
        .map(|_| {
            let n = rng.gen_range(1..30);
            let mut a = Array2::from_shape_simple_fn((n, m), || rng.gen_range(0.01..1.0));
            for mut row in a.rows_mut() {
                let s = row.sum();
                row.mapv_inplace(|v| v / s);
            }
            a
        })
        .collect();
    let maps: Vec<AttentionMap> = raw
        .iter()
        .enumerate()
        .map(|(i, a)| AttentionMap {
            block: i,
            values: a.clone(),
        })
        .collect();
    let got = quality_from_maps(&maps, lambda).map_err(|e| e.to_string())?;
    within("pooled quality", got, loop_quality(&raw, lambda), POOL_TOL)
}

/// `srcc` against the counting-rank oracle; both undefined on constant input.
pub fn oracle_srcc_pair(pred: &[f64], mos: &[f64]) -> Check {
    let want = brute_spearman(pred, mos);
    match srcc(pred, mos) {
        Ok(got) if want.is_finite() => within("srcc", got, want, CORR_TOL),
        Err(_) if !want.is_finite() => Ok(()),
        Ok(got) => Err(format!("srcc {got} on input the oracle finds undefined: {pred:?} {mos:?}")),
        Err(e) => Err(format!("srcc failed ({e}) where the oracle gives {want}: {pred:?} {mos:?}")),
    }
}

/// Every prediction vector of length `len` over `{0, 1, 2}` against a
/// fixed opinion vector with ties.
pub fn oracle_srcc_exhaustive(len: usize, seed: u64) -> Check {
    let mut rng = seeded_rng(seed);
    let mos: Vec<f64> = (0..len).map(|_| rng.gen_range(0..4) as f64).collect();
    let mut pred = vec![0.0; len];
    for code in 0..3usize.pow(len as u32) {
        let mut c = code;
        for p in pred.iter_mut() {
            *p = (c % 3) as f64;
            c /= 3;
        }
        oracle_srcc_pair(&pred, &mos)?;
    }
    Ok(())
}

pub fn oracle_plcc(seed: u64) -> Check {
    let mut rng = seeded_rng(seed);
    let x = uniform_vec(&mut rng, 10, -3.0, 3.0);
    let y = uniform_vec(&mut rng, 10, 0.0, 100.0);
    let got = plcc(&x, &y).map_err(|e| e.to_string())?;
    within("plcc", got, formula_pearson(&x, &y), CORR_TOL)
}

/// One reverse step through the toy backbone against the two formulas
/// written out by hand.
pub fn oracle_denoise(bundle: &ModelBundle, seed: u64) -> Check {
    let mut rng = seeded_rng(seed);
    let shape = bundle.latent_shape();
    let z_t = Latent::standard_normal(shape, &mut rng);
    let t = rng.gen_range(2..=1000);
    let t_next = rng.gen_range(1..t);
    let text = encode_prompt(&bundle.prompt, Polarity::Positive, &bundle.encoder).map_err(|e| e.to_string())?;
    let got = denoise_step(&z_t, t, t_next, bundle.backbone.as_ref(), &text, &bundle.readout, &bundle.schedule)
        .map_err(|e| e.to_string())?;
    let eps_hat = bundle
        .backbone
        .forward(&z_t, t, &text, &bundle.readout)
        .map_err(|e| e.to_string())?
        .predicted_noise;
    let ab = bundle.schedule.alpha_bars();
    let want = straight_denoise(
        z_t.values().as_slice().expect("standard layout"),
        eps_hat.values().as_slice().expect("standard layout"),
        ab[t - 1],
        ab[t_next - 1],
    );
    for (g, w) in got.values().iter().zip(&want) {
        if (g - w).abs() > DENOISE_REL_TOL * w.abs().max(1.0) {
            return Err(format!("denoise {t}->{t_next}: {g} vs {w}"));
        }
    }
    Ok(())
}

/// Two fixed timesteps scored by the library against the same pipeline
/// assembled from its parts.
pub fn oracle_composition(bundle: &ModelBundle, image: &ImageArray, seed: u64) -> Check {
    let mut rng = seeded_rng(seed);
    let z0 = bundle.encode_image(image).map_err(|e| e.to_string())?;
    let draws: Vec<(usize, Latent)> = [rng.gen_range(1..=100), rng.gen_range(1..=100)]
        .into_iter()
        .map(|t| (t, Latent::standard_normal(z0.shape(), &mut rng)))
        .collect();
    let got = bundle
        .score_latent_at(&z0, &draws, bundle.chain)
        .map_err(|e| e.to_string())?
        .score;
    let mut total = 0.0;
    for (t, eps) in &draws {
        let z_t = forward_noise(&z0, *t, eps, &bundle.schedule).map_err(|e| e.to_string())?;
        let mut g = 0.0;
        for pol in [Polarity::Positive, Polarity::Negative] {
            let text = encode_prompt(&bundle.prompt, pol, &bundle.encoder).map_err(|e| e.to_string())?;
            let out = bundle.backbone.forward(&z_t, *t, &text, &bundle.readout).map_err(|e| e.to_string())?;
            let raw: Vec<Array2<f64>> = out.maps.iter().map(|m| m.values.clone()).collect();
            g += loop_quality(&raw, bundle.readout.lambda) / 2.0;
        }
        total += g / draws.len() as f64;
    }
    within("composed score", got, total, COMPOSE_TOL)
}

// -------------------------------------------------------------- command line

/// One config file shared by every subcommand of the CLI walk-through.
pub const CLI_CONFIG: &str = "\
# small model so the walk-through finishes in seconds
image_size = 32
base_width = 8
text_width = 8
attention_width = 8
context_length = 4
epochs = 2
batch_size = 8
learning_rate = 0.001
";

pub struct CliRun {
    pub status: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn run_cli(args: &[&str]) -> CliRun {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_diffusion-iqa"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn binary");
    CliRun {
        status: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// Runs all six subcommands in `root` with one config file and returns
/// a named result per step.
pub fn cli_walkthrough(root: &Path) -> Vec<(&'static str, Check)> {
    let cfg = root.join("run.cfg");
    std::fs::write(&cfg, CLI_CONFIG).expect("write config");
    let cfg = cfg.to_string_lossy().into_owned();
    let data = root.join("data").to_string_lossy().into_owned();
    let out = root.join("out").to_string_lossy().into_owned();
    let manifest = format!("{data}/manifest.csv");
    let ckpt = format!("{out}/model.safetensors");
    let image = format!("{data}/images/img00003.png");
    let ok = |r: CliRun, expect: &dyn Fn(&CliRun) -> Check| -> Check {
        if r.status != 0 {
            return Err(format!("exit {}: {}", r.status, r.stderr.trim()));
        }
        expect(&r)
    };
    let file_exists = |p: String| -> Check {
        if Path::new(&p).is_file() {
            Ok(())
        } else {
            Err(format!("missing {p}"))
        }
    };
    let mut steps: Vec<(&'static str, Check)> = Vec::new();
    let synth = run_cli(&["synth-data", "--config", &cfg, "--out-dir", &data, "--n", "40", "--size", "32", "--seed", "5"]);
    steps.push(("synth-data", ok(synth, &|_| file_exists(manifest.clone()))));
    let train = run_cli(&["train", "--config", &cfg, "--out-dir", &out, "--manifest", &manifest]);
    steps.push(("train", ok(train, &|_| file_exists(ckpt.clone()).and(file_exists(format!("{out}/loss_history.jsonl"))))));
    let eval = run_cli(&["eval", "--config", &cfg, "--out-dir", &out, "--manifest", &manifest, "--checkpoint", &ckpt]);
    steps.push((
        "eval",
        ok(eval, &|_| {
            let text = std::fs::read_to_string(format!("{out}/eval_report.json")).map_err(|e| e.to_string())?;
            let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
            v["srcc"].as_f64().map(|_| ()).ok_or_else(|| "report has no srcc".to_string())
        }),
    ));
    let score = run_cli(&["score", "--config", &cfg, "--out-dir", &out, "--image", &image, "--checkpoint", &ckpt]);
    steps.push((
        "score",
        ok(score, &|r| {
            let tokens: Vec<&str> = r.stdout.split_whitespace().collect();
            match tokens.as_slice() {
                [one] if one.parse::<f64>().is_ok_and(f64::is_finite) => Ok(()),
                _ => Err(format!("stdout is not one real number: {:?}", r.stdout)),
            }
        }),
    ));
    let ablate = run_cli(&["ablate", "--config", &cfg, "--out-dir", &out, "--grid", "fig6", "--manifest", &manifest]);
    steps.push(("ablate", ok(ablate, &|_| file_exists(format!("{out}/ablation/fig6.jsonl")))));
    let export = run_cli(&["export-features", "--config", &cfg, "--out-dir", &out, "--manifest", &manifest, "--checkpoint", &ckpt]);
    steps.push((
        "export-features",
        ok(export, &|_| {
            let text = std::fs::read_to_string(format!("{out}/features.jsonl")).map_err(|e| e.to_string())?;
            let n = text.lines().count();
            if n == 40 {
                Ok(())
            } else {
                Err(format!("{n} feature records, expected 40"))
            }
        }),
    ));
    steps
}
