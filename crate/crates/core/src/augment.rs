//! Stochastic view augmentation for the contrastive task and quadrant
//! splitting / direction labeling for the relative-position task.
//!
//! Quadrant indices follow a fixed row-major grid convention,
//! `idx = 2*row + col`: 0 = top-left, 1 = top-right, 2 = bottom-left,
//! 3 = bottom-right. Direction labels encode the sign of
//! `grid(b) - grid(a)`.

use crate::error::{Error, Result};
use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Probability that the color-jitter group is applied at all, as in the
/// standard SimCLR recipe. Strengths of zero make it a no-op regardless.
const JITTER_APPLY_PROB: f64 = 0.8;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// Crop area as a fraction of the source image, sampled uniformly from
    /// this range. Crops are square.
    pub crop_scale_range: (f64, f64),
    pub flip_prob: f64,
    /// (brightness, contrast, saturation, hue) strengths.
    pub color_jitter_strengths: (f64, f64, f64, f64),
    pub grayscale_prob: f64,
    /// Side length of the emitted views.
    pub output_size: usize,
}

impl AugmentPolicy {
    /// SimCLR-style defaults at a given output resolution.
    pub fn simclr(output_size: usize) -> Self {
        AugmentPolicy {
            crop_scale_range: (0.2, 1.0),
            flip_prob: 0.5,
            color_jitter_strengths: (0.4, 0.4, 0.4, 0.1),
            grayscale_prob: 0.2,
            output_size,
        }
    }

    /// Deterministic pass-through at a given output resolution.
    pub fn identity(output_size: usize) -> Self {
        AugmentPolicy {
            crop_scale_range: (1.0, 1.0),
            flip_prob: 0.0,
            color_jitter_strengths: (0.0, 0.0, 0.0, 0.0),
            grayscale_prob: 0.0,
            output_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config(format!(
                "crop_scale_range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"
            )));
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("grayscale_prob", self.grayscale_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} {p} outside [0, 1]")));
            }
        }
        let (b, c, s, h) = self.color_jitter_strengths;
        if b < 0.0 || c < 0.0 || s < 0.0 || h < 0.0 {
            return Err(Error::config("color jitter strengths must be non-negative"));
        }
        if h > 0.5 {
            return Err(Error::config(format!("hue strength {h} above 0.5")));
        }
        if self.output_size == 0 {
            return Err(Error::config("output_size must be positive"));
        }
        Ok(())
    }
}

/// One relative-position training example: two distinct quadrant blocks of
/// the same image and the direction label of `b` relative to `a`.
#[derive(Debug, Clone)]
pub struct QuadrantSample {
    pub block_a: Array3<f64>,
    pub block_b: Array3<f64>,
    pub a_idx: usize,
    pub b_idx: usize,
    pub d: usize,
}

/// Two independent stochastic augmentations of `image` (`[c, k, k]`, values
/// in `[0, 1]`), each `[c, output_size, output_size]` clamped to `[0, 1]`.
pub fn make_views(
    image: &Array3<f64>,
    rng: &mut ChaCha8Rng,
    policy: &AugmentPolicy,
) -> Result<(Array3<f64>, Array3<f64>)> {
    policy.validate()?;
    let a = augment_once(image, rng, policy)?;
    let b = augment_once(image, rng, policy)?;
    Ok((a, b))
}

fn augment_once(
    image: &Array3<f64>,
    rng: &mut ChaCha8Rng,
    policy: &AugmentPolicy,
) -> Result<Array3<f64>> {
    let (c, h, w) = image.dim();
    if h != w {
        return Err(Error::shape(format!("expected square image, got {h}x{w}")));
    }
    let k = h;

    // square random resized crop
    let (lo, hi) = policy.crop_scale_range;
    let scale = lo + (hi - lo) * rng.gen::<f64>();
    let side = ((k as f64) * scale.sqrt()).round() as usize;
    if side == 0 {
        return Err(Error::invalid(format!("crop scale {scale} gives an empty window")));
    }
    let side = side.min(k);
    let oy = rng.gen_range(0..=(k - side));
    let ox = rng.gen_range(0..=(k - side));
    let crop = image
        .slice(ndarray::s![.., oy..oy + side, ox..ox + side])
        .to_owned();
    let mut out = resize_bilinear(&crop, policy.output_size, policy.output_size);

    if rng.gen::<f64>() < policy.flip_prob {
        out = flip_horizontal(&out);
    }

    if rng.gen::<f64>() < JITTER_APPLY_PROB {
        let (sb, sc, ss, sh) = policy.color_jitter_strengths;
        let fb = 1.0 + sb * (2.0 * rng.gen::<f64>() - 1.0);
        let fc = 1.0 + sc * (2.0 * rng.gen::<f64>() - 1.0);
        let fs = 1.0 + ss * (2.0 * rng.gen::<f64>() - 1.0);
        let fh = sh * (2.0 * rng.gen::<f64>() - 1.0);
        apply_brightness(&mut out, fb.max(0.0));
        apply_contrast(&mut out, fc.max(0.0));
        if c == 3 {
            apply_saturation(&mut out, fs.max(0.0));
            apply_hue(&mut out, fh);
        }
    }

    if rng.gen::<f64>() < policy.grayscale_prob && c == 3 {
        to_grayscale(&mut out);
    }

    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(out)
}

/// Bilinear resize with half-pixel centers (`align_corners = false`).
/// A same-size resize is an exact copy.
pub fn resize_bilinear(image: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = image.dim();
    let mut out = Array3::zeros((c, out_h, out_w));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for y in 0..out_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for x in 0..out_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let top = image[[ch, y0, x0]] * (1.0 - wx) + image[[ch, y0, x1]] * wx;
                let bot = image[[ch, y1, x0]] * (1.0 - wx) + image[[ch, y1, x1]] * wx;
                out[[ch, y, x]] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

fn flip_horizontal(image: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = image.dim();
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[ch, y, x]] = image[[ch, y, w - 1 - x]];
            }
        }
    }
    out
}

fn apply_brightness(image: &mut Array3<f64>, factor: f64) {
    if factor == 1.0 {
        return;
    }
    image.mapv_inplace(|v| v * factor);
}

fn apply_contrast(image: &mut Array3<f64>, factor: f64) {
    if factor == 1.0 {
        return;
    }
    let (c, h, w) = image.dim();
    let mean = if c == 3 {
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                acc += LUMA[0] * image[[0, y, x]]
                    + LUMA[1] * image[[1, y, x]]
                    + LUMA[2] * image[[2, y, x]];
            }
        }
        acc / (h * w) as f64
    } else {
        image.mean().unwrap_or(0.0)
    };
    image.mapv_inplace(|v| mean + factor * (v - mean));
}

fn apply_saturation(image: &mut Array3<f64>, factor: f64) {
    if factor == 1.0 {
        return;
    }
    let (_, h, w) = image.dim();
    for y in 0..h {
        for x in 0..w {
            let gray = LUMA[0] * image[[0, y, x]]
                + LUMA[1] * image[[1, y, x]]
                + LUMA[2] * image[[2, y, x]];
            for ch in 0..3 {
                image[[ch, y, x]] = gray + factor * (image[[ch, y, x]] - gray);
            }
        }
    }
}

fn apply_hue(image: &mut Array3<f64>, shift: f64) {
    if shift == 0.0 {
        return;
    }
    let (_, h, w) = image.dim();
    for y in 0..h {
        for x in 0..w {
            let r = image[[0, y, x]].clamp(0.0, 1.0);
            let g = image[[1, y, x]].clamp(0.0, 1.0);
            let b = image[[2, y, x]].clamp(0.0, 1.0);
            let (hu, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb((hu + shift).rem_euclid(1.0), s, v);
            image[[0, y, x]] = r2;
            image[[1, y, x]] = g2;
            image[[2, y, x]] = b2;
        }
    }
}

fn to_grayscale(image: &mut Array3<f64>) {
    let (_, h, w) = image.dim();
    for y in 0..h {
        for x in 0..w {
            let gray = LUMA[0] * image[[0, y, x]]
                + LUMA[1] * image[[1, y, x]]
                + LUMA[2] * image[[2, y, x]];
            for ch in 0..3 {
                image[[ch, y, x]] = gray;
            }
        }
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

/// Split a `[c, k, k]` image into its four quadrants in row-major order.
pub fn split_quadrants(image: &Array3<f64>) -> Result<[Array3<f64>; 4]> {
    let (_, h, w) = image.dim();
    if h != w {
        return Err(Error::shape(format!("expected square image, got {h}x{w}")));
    }
    if h % 2 != 0 {
        return Err(Error::invalid(format!("image size {h} is odd, cannot split into quadrants")));
    }
    let half = h / 2;
    let block = |row: usize, col: usize| {
        image
            .slice(ndarray::s![
                ..,
                row * half..(row + 1) * half,
                col * half..(col + 1) * half
            ])
            .to_owned()
    };
    Ok([block(0, 0), block(0, 1), block(1, 0), block(1, 1)])
}

/// Direction of quadrant `b_idx` relative to quadrant `a_idx`:
/// 0=left, 1=right, 2=upper, 3=lower, 4=upper-left, 5=upper-right,
/// 6=lower-left, 7=lower-right.
pub fn direction_label(a_idx: usize, b_idx: usize) -> Result<usize> {
    if a_idx > 3 || b_idx > 3 {
        return Err(Error::invalid(format!(
            "quadrant indices must be in 0..4, got ({a_idx}, {b_idx})"
        )));
    }
    if a_idx == b_idx {
        return Err(Error::invalid(format!("quadrant indices are equal ({a_idx})")));
    }
    let drow = (b_idx / 2) as i64 - (a_idx / 2) as i64;
    let dcol = (b_idx % 2) as i64 - (a_idx % 2) as i64;
    Ok(match (drow, dcol) {
        (0, -1) => 0,
        (0, 1) => 1,
        (-1, 0) => 2,
        (1, 0) => 3,
        (-1, -1) => 4,
        (-1, 1) => 5,
        (1, -1) => 6,
        (1, 1) => 7,
        _ => unreachable!("2x2 grid deltas are in {{-1,0,1}}"),
    })
}

/// All 12 ordered pairs of distinct quadrant indices, in a fixed order.
pub const ORDERED_PAIRS: [(usize, usize); 12] = [
    (0, 1),
    (0, 2),
    (0, 3),
    (1, 0),
    (1, 2),
    (1, 3),
    (2, 0),
    (2, 1),
    (2, 3),
    (3, 0),
    (3, 1),
    (3, 2),
];

/// Draw one relative-position sample: a uniform choice among the 12 ordered
/// quadrant pairs of `image`, with blocks taken from the raw (un-augmented)
/// image.
pub fn sample_rp_pair(image: &Array3<f64>, rng: &mut ChaCha8Rng) -> Result<QuadrantSample> {
    let blocks = split_quadrants(image)?;
    let (a_idx, b_idx) = ORDERED_PAIRS[rng.gen_range(0..ORDERED_PAIRS.len())];
    let d = direction_label(a_idx, b_idx)?;
    Ok(QuadrantSample {
        block_a: blocks[a_idx].clone(),
        block_b: blocks[b_idx].clone(),
        a_idx,
        b_idx,
        d,
    })
}
