//! Procedural synthetic data: a labeled shape corpus for desk-scale training
//! and a recording generator whose ground truth is known exactly.
//!
//! Corpus design: each class renders a distinct shape in a distinct color
//! over a field of random colored blobs. The shape is centered, so each
//! quadrant holds one corner of it, and each quadrant additionally carries a
//! small bright triangle whose orientation names the quadrant; fragment and
//! triangle orientation together are the relative-position cue. Everything
//! else is deliberately position-free: blob fields are drawn independently
//! per quadrant on a per-quadrant torus (no border thinning), each quadrant
//! gets an independent random color tint, triangle pixel counts match across
//! orientations, and there is no luminance ramp or other image-level
//! function of position. An untrained model must score at chance on the
//! relative-position task. Stripe and checker phases are drawn fresh per
//! image. Pixels are quantized to the 1/255 grid so container round-trips
//! are exact.

use super::{ImageSet, NeuralRecording, Region};
use crate::error::{Error, Result};
use crate::model::ActivationMatrix;
use crate::nn::gaussian;
use crate::util::{stream, tags};
use ndarray::{Array2, Array3, Array4};
use rand::Rng;

const PALETTE: [[f32; 3]; 12] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.80, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.50, 0.10],
    [0.50, 0.20, 0.90],
    [0.60, 0.90, 0.20],
    [0.90, 0.40, 0.60],
    [0.30, 0.60, 0.50],
    [0.70, 0.70, 0.95],
];

const SHAPE_ALPHA: f32 = 0.65;

struct Blob {
    cx: f32,
    cy: f32,
    r2: f32,
    color: [f32; 3],
    alpha: f32,
}

fn torus_delta(a: f32, b: f32, k: f32) -> f32 {
    let d = (a - b).abs();
    d.min(k - d)
}

struct Marker {
    x0: usize,
    y0: usize,
    size: usize,
    quadrant: usize,
}

impl Marker {
    fn covers(&self, x: usize, y: usize) -> bool {
        if x < self.x0 || y < self.y0 {
            return false;
        }
        let lx = x - self.x0;
        let ly = y - self.y0;
        let m = self.size;
        if lx >= m || ly >= m {
            return false;
        }
        // right triangle whose hypotenuse faces the image center
        match self.quadrant {
            0 => lx + ly >= m - 1,
            1 => ly >= lx,
            2 => lx >= ly,
            _ => lx + ly <= m - 1,
        }
    }
}

pub fn synth_image_set(
    seed: u64,
    count: usize,
    n_classes: usize,
    k: usize,
) -> Result<ImageSet> {
    if count == 0 {
        return Err(Error::invalid("count must be positive"));
    }
    if n_classes < 2 {
        return Err(Error::invalid(format!("need >= 2 classes, got {n_classes}")));
    }
    if k < 16 {
        return Err(Error::invalid(format!("image size {k} below minimum 16")));
    }
    if k % 2 != 0 {
        return Err(Error::invalid(format!(
            "image size {k} must be even for quadrant splitting"
        )));
    }

    let mut rng = stream(seed, &[tags::SYNTH_IMAGES]);
    let mut images = Array4::<f32>::zeros((count, 3, k, k));
    let mut labels = Vec::with_capacity(count);

    for i in 0..count {
        let label = i % n_classes;
        labels.push(label);

        let bg: [f32; 3] = [
            rng.gen_range(0.05..0.30),
            rng.gen_range(0.05..0.30),
            rng.gen_range(0.05..0.30),
        ];
        // blob fields are drawn per quadrant, on each quadrant's own torus:
        // contents of any two quadrants are then iid, so the feature
        // difference of a block pair has the same distribution for every
        // ordered pair and carries no relative-position signal on its own
        let half = (k / 2) as f32;
        let mut quadrant_blobs: [Vec<Blob>; 4] = Default::default();
        for q in quadrant_blobs.iter_mut() {
            let n_blobs = rng.gen_range(2..=4usize);
            *q = (0..n_blobs)
                .map(|_| Blob {
                    cx: rng.gen_range(0.0..half),
                    cy: rng.gen_range(0.0..half),
                    r2: {
                        let r = rng.gen_range(half / 6.0..half / 2.5);
                        r * r
                    },
                    color: [
                        rng.gen_range(0.1..0.95),
                        rng.gen_range(0.1..0.95),
                        rng.gen_range(0.1..0.95),
                    ],
                    alpha: rng.gen_range(0.4..0.85),
                })
                .collect();
        }
        // per-quadrant RGB tints, iid like the blobs: they dominate the
        // low-order statistics a fresh random readout sees, and they carry
        // no relative-position signal; a trained model learns past them
        let mut tints = [[0.0f32; 3]; 4];
        for t in tints.iter_mut() {
            for c in t.iter_mut() {
                *c = rng.gen_range(0.7..1.3);
            }
        }
        // one small triangular marker per quadrant, hypotenuse facing the
        // image center. Its position is uniform inside the quadrant and its
        // pixel counts match across orientations, so to low-order statistics
        // all quadrants look alike; the orientation itself is the crisp
        // relative-position cue a trained model can latch onto
        let msize = (k / 4).max(3);
        let markers: [Marker; 4] = std::array::from_fn(|q| Marker {
            x0: rng.gen_range(1..k / 2 - msize) + if q % 2 == 1 { k / 2 } else { 0 },
            y0: rng.gen_range(1..k / 2 - msize) + if q >= 2 { k / 2 } else { 0 },
            size: msize,
            quadrant: q,
        });
        // the pixel-grid center is (k-1)/2, not k/2: a half-pixel slip
        // here puts shape mass systematically in the lower-right half,
        // which is enough positional signal for random readouts to beat
        // chance on the relative-position task
        let cx = (k - 1) as f32 / 2.0;
        let cy = (k - 1) as f32 / 2.0;
        let radius = k as f32 * rng.gen_range(0.14..0.22);

        let kind = label % 6;
        let variant = (label / 6) as f32;
        let color = PALETTE[label % PALETTE.len()];
        let phase_x: f32 = rng.gen_range(0.0..k as f32);
        let phase_y: f32 = rng.gen_range(0.0..k as f32);

        for y in 0..k {
            for x in 0..k {
                let fx = x as f32;
                let fy = y as f32;
                let inside =
                    shape_mask(kind, variant, fx, fy, cx, cy, radius, k, phase_x, phase_y);
                let mut px = bg;
                let quad = usize::from(fx >= half) + 2 * usize::from(fy >= half);
                for blob in &quadrant_blobs[quad] {
                    // toroidal distance keeps per-pixel blob coverage exactly
                    // uniform; clipped blobs would thin out near the borders
                    // and the resulting profile is a positional cue
                    let dx = torus_delta(fx % half, blob.cx, half);
                    let dy = torus_delta(fy % half, blob.cy, half);
                    if dx * dx + dy * dy <= blob.r2 {
                        for c in 0..3 {
                            px[c] = (1.0 - blob.alpha) * px[c] + blob.alpha * blob.color[c];
                        }
                    }
                }
                let marked = markers[quad].covers(x, y);
                for c in 0..3 {
                    let mut v = px[c];
                    if inside {
                        v = (1.0 - SHAPE_ALPHA) * v + SHAPE_ALPHA * color[c];
                    }
                    v *= tints[quad][c];
                    if marked {
                        v = 0.95;
                    }
                    v += rng.gen_range(-0.02..0.02f32);
                    let q = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
                    images[[i, c, y, x]] = q;
                }
            }
        }
    }

    let class_names = (0..n_classes).map(|j| format!("class{j}")).collect();
    ImageSet::new(images, Some(labels), Some(class_names))
}

#[allow(clippy::too_many_arguments)]
fn shape_mask(
    kind: usize,
    variant: f32,
    x: f32,
    y: f32,
    cx: f32,
    cy: f32,
    r: f32,
    k: usize,
    phase_x: f32,
    phase_y: f32,
) -> bool {
    let dx = x - cx;
    let dy = y - cy;
    match kind {
        // filled disk
        0 => dx * dx + dy * dy <= r * r,
        // hollow square frame
        1 => {
            let m = dx.abs().max(dy.abs());
            m <= r && m >= 0.55 * r
        }
        // plus / cross
        2 => (dx.abs() <= 0.3 * r && dy.abs() <= r) || (dy.abs() <= 0.3 * r && dx.abs() <= r),
        // diamond; kinds 0-3 all have orientable corner fragments, so small
        // class counts keep the relative-position task fully decodable
        3 => dx.abs() + dy.abs() <= r,
        // horizontal stripes inside a square, phase randomized per image
        4 => {
            let w = ((k as f32 / 8.0) / (1.0 + variant)).max(2.0);
            dx.abs() <= r && dy.abs() <= r && (((y + phase_y) / w).floor() as i64) % 2 == 0
        }
        // checkerboard inside a square, phase randomized per image
        _ => {
            let cell = ((k as f32 / 6.0) / (1.0 + variant)).max(2.0);
            dx.abs() <= r
                && dy.abs() <= r
                && (((x + phase_x) / cell).floor() as i64
                    + ((y + phase_y) / cell).floor() as i64)
                    % 2
                    == 0
        }
    }
}

/// A generated recording together with the ground-truth readout that
/// produced it, for test introspection.
pub struct SynthRecording {
    pub recording: NeuralRecording,
    /// `[n_neurons, n_features]`: neuron responses are `acts . weightsᵀ`
    /// plus repetition noise.
    pub readout_weights: Array2<f64>,
}

/// Each synthetic neuron is a fixed random linear readout of `acts` plus
/// i.i.d. Gaussian noise drawn independently per repetition. `stimuli` must
/// be the image set the activations were recorded from.
pub fn synth_neural_recording(
    acts: &ActivationMatrix,
    stimuli: &ImageSet,
    region: Region,
    n_neurons: usize,
    noise_sd: f64,
    n_repetitions: usize,
    seed: u64,
) -> Result<SynthRecording> {
    if noise_sd < 0.0 {
        return Err(Error::invalid(format!("noise_sd {noise_sd} negative")));
    }
    if n_repetitions < 2 {
        return Err(Error::invalid(format!(
            "n_repetitions {n_repetitions} below 2"
        )));
    }
    if n_neurons == 0 {
        return Err(Error::invalid("n_neurons must be positive"));
    }
    let (n_stimuli, n_features) = acts.values.dim();
    if stimuli.count() != n_stimuli {
        return Err(Error::shape(format!(
            "{} stimuli for {n_stimuli} activation rows",
            stimuli.count()
        )));
    }

    let mut rng = stream(seed, &[tags::SYNTH_NEURONS]);
    let std = 1.0 / (n_features as f64).sqrt();
    let weights = gaussian(&mut rng, &[n_neurons, n_features], std)
        .into_dimensionality::<ndarray::Ix2>()
        .expect("2-D weights");
    let clean = acts.values.dot(&weights.t());

    let noise = if noise_sd > 0.0 {
        gaussian(&mut rng, &[n_stimuli, n_neurons, n_repetitions], noise_sd)
            .into_dimensionality::<ndarray::Ix3>()
            .expect("3-D noise")
    } else {
        Array3::zeros((n_stimuli, n_neurons, n_repetitions))
    };

    let mut responses = Array3::<f32>::zeros((n_stimuli, n_neurons, n_repetitions));
    for s in 0..n_stimuli {
        for n in 0..n_neurons {
            for r in 0..n_repetitions {
                responses[[s, n, r]] = (clean[[s, n]] + noise[[s, n, r]]) as f32;
            }
        }
    }

    let neuron_ids = (0..n_neurons).map(|n| format!("synth{n}")).collect();
    let recording = NeuralRecording::new(responses, stimuli.clone(), region, neuron_ids)?;
    Ok(SynthRecording { recording, readout_weights: weights })
}
