//! Neural-predictivity scoring: PLS-regress layer activations onto recorded
//! responses, correlate held-out predictions per neuron, correct by each
//! neuron's split-half noise ceiling, take the median over neurons per CV
//! split, and finally the max over layers.

use crate::data::{NeuralRecording, Region};
use crate::error::{Error, Result};
use crate::model::ActivationMatrix;
use crate::nn::gaussian;
use crate::util::{median, sample_std, shuffled_indices, stream, tags};
use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_PLS_COMPONENTS: usize = 25;
pub const DEFAULT_CEILING_ITERATIONS: usize = 30;

/// Feature widths above this are reduced by a seeded random projection
/// before regression.
pub const FEATURE_GUARD_LIMIT: usize = 4096;

const CEILING_FLOOR: f64 = 0.01;
const CORRECTED_MIN: f64 = -1.0;
const CORRECTED_MAX: f64 = 1.5;

/// Partial-least-squares regression model (NIPALS, PLS2 variant).
/// Predictions are affine in the centered inputs.
#[derive(Debug, Clone)]
pub struct PlsModel {
    /// Components actually extracted (may stop short on degenerate input).
    pub n_components: usize,
    pub x_mean: Array1<f64>,
    pub y_mean: Array1<f64>,
    /// [features, components]
    pub x_weights: Array2<f64>,
    /// [features, components]
    pub x_loadings: Array2<f64>,
    /// [targets, components]
    pub y_loadings: Array2<f64>,
    /// [features, targets]
    pub coefficients: Array2<f64>,
    /// Set when extraction stopped early on a norm underflow.
    pub degenerate: bool,
}

impl PlsModel {
    pub fn predict(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.x_mean.len() {
            return Err(Error::shape(format!(
                "model expects {} features, got {}",
                self.x_mean.len(),
                x.ncols()
            )));
        }
        let centered = x - &self.x_mean;
        Ok(centered.dot(&self.coefficients) + &self.y_mean)
    }
}

/// Solve `a x = b` for square `a` by Gaussian elimination with partial
/// pivoting. Returns None when `a` is singular to working precision.
fn solve_linear(a: &Array2<f64>, b: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    assert_eq!(n, b.nrows());
    let m = b.ncols();
    let mut aug = Array2::<f64>::zeros((n, n + m));
    aug.slice_mut(ndarray::s![.., ..n]).assign(a);
    aug.slice_mut(ndarray::s![.., n..]).assign(b);

    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if aug[[row, col]].abs() > aug[[pivot, col]].abs() {
                pivot = row;
            }
        }
        if aug[[pivot, col]].abs() < 1e-12 {
            return None;
        }
        if pivot != col {
            for j in 0..n + m {
                aug.swap([pivot, j], [col, j]);
            }
        }
        let diag = aug[[col, col]];
        for row in 0..n {
            if row == col {
                continue;
            }
            let factor = aug[[row, col]] / diag;
            if factor == 0.0 {
                continue;
            }
            for j in col..n + m {
                aug[[row, j]] -= factor * aug[[col, j]];
            }
        }
    }
    let mut x = Array2::<f64>::zeros((n, m));
    for row in 0..n {
        let diag = aug[[row, row]];
        for j in 0..m {
            x[[row, j]] = aug[[row, n + j]] / diag;
        }
    }
    Some(x)
}

/// Fit PLS by NIPALS: iteratively extract latent directions maximizing
/// X-Y covariance, deflate, and assemble regression coefficients.
pub fn fit_pls(x: &Array2<f64>, y: &Array2<f64>, n_components: usize) -> Result<PlsModel> {
    let samples = x.nrows();
    let features = x.ncols();
    let targets = y.ncols();
    if y.nrows() != samples {
        return Err(Error::shape(format!(
            "{samples} feature rows but {} response rows",
            y.nrows()
        )));
    }
    if samples < 2 || features == 0 || targets == 0 {
        return Err(Error::invalid("regression needs at least 2 samples and non-empty matrices"));
    }
    if n_components == 0 {
        return Err(Error::invalid("n_components must be at least 1"));
    }
    if n_components > samples - 1 || n_components > features {
        return Err(Error::invalid(format!(
            "n_components {n_components} exceeds min(samples-1, features) = {}",
            (samples - 1).min(features)
        )));
    }
    if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("non-finite values in regression inputs"));
    }

    let x_mean = x.mean_axis(Axis(0)).unwrap();
    let y_mean = y.mean_axis(Axis(0)).unwrap();
    let mut e = x - &x_mean;
    let mut f = y - &y_mean;
    let x_scale: f64 = e.iter().map(|v| v * v).sum::<f64>().max(1e-300);

    let mut w_cols: Vec<Array1<f64>> = Vec::new();
    let mut p_cols: Vec<Array1<f64>> = Vec::new();
    let mut q_cols: Vec<Array1<f64>> = Vec::new();
    let mut degenerate = false;

    for _ in 0..n_components {
        // start from the response column with the largest remaining energy
        let mut u_col = 0;
        let mut best = -1.0;
        for j in 0..targets {
            let ss: f64 = f.column(j).iter().map(|v| v * v).sum();
            if ss > best {
                best = ss;
                u_col = j;
            }
        }
        if best <= x_scale * 1e-28 {
            degenerate = true;
            break;
        }
        let mut u = f.column(u_col).to_owned();

        let mut w = Array1::<f64>::zeros(features);
        let mut t = Array1::<f64>::zeros(samples);
        let mut q = Array1::<f64>::zeros(targets);
        let mut underflow = false;
        let mut t_old: Option<Array1<f64>> = None;
        for _ in 0..1000 {
            w = e.t().dot(&u);
            let wn = w.dot(&w).sqrt();
            if wn < 1e-14 * x_scale.sqrt() {
                underflow = true;
                break;
            }
            w.mapv_inplace(|v| v / wn);
            t = e.dot(&w);
            let tt = t.dot(&t);
            if tt < 1e-28 * x_scale {
                underflow = true;
                break;
            }
            q = f.t().dot(&t);
            q.mapv_inplace(|v| v / tt);
            let qq = q.dot(&q);
            if qq == 0.0 {
                break;
            }
            u = f.dot(&q);
            u.mapv_inplace(|v| v / qq);
            if let Some(prev) = &t_old {
                let diff = (&t - prev).dot(&(&t - prev)).sqrt();
                if diff <= 1e-12 * t.dot(&t).sqrt() {
                    break;
                }
            }
            t_old = Some(t.clone());
        }
        if underflow {
            degenerate = true;
            break;
        }
        let tt = t.dot(&t);
        if tt < 1e-28 * x_scale {
            degenerate = true;
            break;
        }
        let p = e.t().dot(&t).mapv(|v| v / tt);

        // rank-one deflation of both blocks
        for i in 0..samples {
            for j in 0..features {
                e[[i, j]] -= t[i] * p[j];
            }
            for j in 0..targets {
                f[[i, j]] -= t[i] * q[j];
            }
        }
        w_cols.push(w);
        p_cols.push(p);
        q_cols.push(q);
    }

    let k = w_cols.len();
    let mut x_weights = Array2::<f64>::zeros((features, k));
    let mut x_loadings = Array2::<f64>::zeros((features, k));
    let mut y_loadings = Array2::<f64>::zeros((targets, k));
    for (c, ((w, p), q)) in w_cols.iter().zip(&p_cols).zip(&q_cols).enumerate() {
        x_weights.column_mut(c).assign(w);
        x_loadings.column_mut(c).assign(p);
        y_loadings.column_mut(c).assign(q);
    }

    let coefficients = if k == 0 {
        Array2::zeros((features, targets))
    } else {
        let ptw = x_loadings.t().dot(&x_weights);
        match solve_linear(&ptw, &y_loadings.t().to_owned()) {
            Some(sol) => x_weights.dot(&sol),
            None => {
                degenerate = true;
                Array2::zeros((features, targets))
            }
        }
    };

    Ok(PlsModel {
        n_components: k,
        x_mean,
        y_mean,
        x_weights,
        x_loadings,
        y_loadings,
        coefficients,
        degenerate,
    })
}

/// Pearson correlation plus a flag for zero-variance inputs (where the
/// coefficient is undefined and reported as the 0 sentinel).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub r: f64,
    pub degenerate: bool,
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<Correlation> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "correlation inputs of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 3 {
        return Err(Error::invalid("correlation needs at least 3 points"));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::data("non-finite values in correlation input"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    let mut sab = 0.0;
    for i in 0..a.len() {
        let da = a[i] - ma;
        let db = b[i] - mb;
        saa += da * da;
        sbb += db * db;
        sab += da * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(Correlation { r: 0.0, degenerate: true });
    }
    if a == b {
        return Ok(Correlation { r: 1.0, degenerate: false });
    }
    let r = (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0);
    Ok(Correlation { r, degenerate: false })
}

/// Raw split-half correlations, [n_neurons, n_iterations]: per iteration,
/// repetitions are randomly halved and the half-mean responses correlated
/// over stimuli.
pub fn split_half_correlations(
    recording: &NeuralRecording,
    n_iterations: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    if n_iterations == 0 {
        return Err(Error::invalid("need at least one split iteration"));
    }
    let reps = recording.n_repetitions();
    if reps < 2 {
        return Err(Error::data("split-half reliability needs at least 2 repetitions"));
    }
    let stimuli = recording.n_stimuli();
    if stimuli < 3 {
        return Err(Error::data("split-half reliability needs at least 3 stimuli"));
    }
    let neurons = recording.n_neurons();
    let responses = recording.responses_f64();

    let mut out = Array2::<f64>::zeros((neurons, n_iterations));
    let mut half_a = vec![0.0f64; stimuli];
    let mut half_b = vec![0.0f64; stimuli];
    for it in 0..n_iterations {
        let order = shuffled_indices(reps, rng);
        let (first, second) = order.split_at(reps / 2);
        for j in 0..neurons {
            for s in 0..stimuli {
                let mut suma = 0.0;
                for &r in first {
                    suma += responses[[s, j, r]];
                }
                half_a[s] = suma / first.len() as f64;
                let mut sumb = 0.0;
                for &r in second {
                    sumb += responses[[s, j, r]];
                }
                half_b[s] = sumb / second.len() as f64;
            }
            out[[j, it]] = pearson(&half_a, &half_b)?.r;
        }
    }
    Ok(out)
}

/// Per-neuron noise ceiling: median over random half-splits of the
/// Spearman-Brown-corrected split-half correlation, clamped to
/// (`CEILING_FLOOR`, 1].
pub fn noise_ceiling(
    recording: &NeuralRecording,
    n_iterations: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let raw = split_half_correlations(recording, n_iterations, rng)?;
    let mut ceilings = Vec::with_capacity(recording.n_neurons());
    for j in 0..recording.n_neurons() {
        let sb: Vec<f64> = raw.row(j).iter().map(|&r| 2.0 * r / (1.0 + r)).collect();
        ceilings.push(median(&sb).clamp(CEILING_FLOOR, 1.0));
    }
    Ok(ceilings)
}

/// Cross-validation layout for layer scoring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvSpec {
    pub n_splits: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for CvSpec {
    fn default() -> Self {
        CvSpec { n_splits: 10, train_fraction: 0.9, seed: 0 }
    }
}

impl CvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_splits == 0 {
            return Err(Error::config("n_splits must be at least 1"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config(format!(
                "train_fraction {} outside (0, 1)",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

/// Score distribution over CV splits: center is the median, spread the
/// standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    pub center: f64,
    pub spread: f64,
    pub per_split: Vec<f64>,
}

impl ScoreDistribution {
    pub fn from_splits(per_split: Vec<f64>) -> Result<ScoreDistribution> {
        if per_split.is_empty() {
            return Err(Error::invalid("no split scores"));
        }
        if per_split.iter().any(|v| !v.is_finite()) {
            return Err(Error::run("non-finite split score"));
        }
        Ok(ScoreDistribution {
            center: median(&per_split),
            spread: sample_std(&per_split),
            per_split,
        })
    }
}

/// Noise-corrected predictivity of one layer for one recording.
pub fn layer_score(
    acts: &ActivationMatrix,
    recording: &NeuralRecording,
    cv: &CvSpec,
    n_components: usize,
) -> Result<ScoreDistribution> {
    let mut ceil_rng = stream(cv.seed, &[tags::CEILING]);
    let ceilings = noise_ceiling(recording, DEFAULT_CEILING_ITERATIONS, &mut ceil_rng)?;
    layer_score_with_ceilings(acts, recording, cv, n_components, &ceilings)
}

/// As `layer_score` with precomputed per-neuron ceilings, so one recording's
/// ceilings can be shared across all scored layers.
pub fn layer_score_with_ceilings(
    acts: &ActivationMatrix,
    recording: &NeuralRecording,
    cv: &CvSpec,
    n_components: usize,
    ceilings: &[f64],
) -> Result<ScoreDistribution> {
    cv.validate()?;
    let stimuli = recording.n_stimuli();
    if acts.values.nrows() != stimuli {
        return Err(Error::shape(format!(
            "{} activation rows for {} stimuli",
            acts.values.nrows(),
            stimuli
        )));
    }
    if ceilings.len() != recording.n_neurons() {
        return Err(Error::shape(format!(
            "{} ceilings for {} neurons",
            ceilings.len(),
            recording.n_neurons()
        )));
    }
    if n_components == 0 {
        return Err(Error::invalid("n_components must be at least 1"));
    }

    let features = if acts.values.ncols() > FEATURE_GUARD_LIMIT {
        let mut rng = stream(cv.seed, &[tags::DIM_GUARD]);
        let proj = gaussian(
            &mut rng,
            &[acts.values.ncols(), FEATURE_GUARD_LIMIT],
            1.0 / (FEATURE_GUARD_LIMIT as f64).sqrt(),
        )
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
        acts.values.dot(&proj)
    } else {
        acts.values.clone()
    };

    let mean_responses = recording.mean_over_reps();
    let neurons = recording.n_neurons();

    let n_train = ((cv.train_fraction * stimuli as f64).round() as usize).clamp(1, stimuli - 1);
    let n_test = stimuli - n_train;
    if n_test < 3 {
        return Err(Error::data(format!(
            "{stimuli} stimuli leave only {n_test} held out at train_fraction {}; \
             correlation needs at least 3",
            cv.train_fraction
        )));
    }

    let mut per_split = Vec::with_capacity(cv.n_splits);
    for split in 0..cv.n_splits {
        let mut rng = stream(cv.seed, &[tags::CV_SPLIT, split as u64]);
        let order = shuffled_indices(stimuli, &mut rng);
        let (train_idx, test_idx) = order.split_at(n_train);

        let x_train = gather_rows(&features, train_idx);
        let y_train = gather_rows(&mean_responses, train_idx);
        let x_test = gather_rows(&features, test_idx);
        let y_test = gather_rows(&mean_responses, test_idx);

        let k = n_components.min(n_train - 1).min(features.ncols());
        let model = fit_pls(&x_train, &y_train, k)?;
        let pred = model.predict(&x_test)?;

        let mut corrected = Vec::with_capacity(neurons);
        for j in 0..neurons {
            let p: Vec<f64> = pred.column(j).to_vec();
            let t: Vec<f64> = y_test.column(j).to_vec();
            let r = pearson(&p, &t)?.r;
            corrected.push((r / ceilings[j]).clamp(CORRECTED_MIN, CORRECTED_MAX));
        }
        per_split.push(median(&corrected));
    }

    ScoreDistribution::from_splits(per_split)
}

fn gather_rows(m: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((idx.len(), m.ncols()));
    for (row, &i) in idx.iter().enumerate() {
        out.row_mut(row).assign(&m.row(i));
    }
    out
}

/// Per-layer scores for one region, plus the best layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScoreEntry {
    pub layer: String,
    pub score: ScoreDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrainScoreReport {
    pub region: Region,
    /// In registry (shallow-to-deep) order.
    pub per_layer: Vec<LayerScoreEntry>,
    pub best_layer: String,
    pub model_score: ScoreDistribution,
}

/// Reduce per-layer scores to the model score: the best layer's
/// distribution, ties going to the shallower layer.
pub fn model_score(
    region: Region,
    per_layer: Vec<LayerScoreEntry>,
) -> Result<BrainScoreReport> {
    if per_layer.is_empty() {
        return Err(Error::invalid("no layer scores to reduce"));
    }
    let mut best = 0;
    for (i, entry) in per_layer.iter().enumerate() {
        if entry.score.center > per_layer[best].score.center {
            best = i;
        }
    }
    Ok(BrainScoreReport {
        region,
        best_layer: per_layer[best].layer.clone(),
        model_score: per_layer[best].score.clone(),
        per_layer,
    })
}
