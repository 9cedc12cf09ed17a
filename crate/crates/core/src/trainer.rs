//! The dual-task training loop: per batch, build 2N augmented views and N
//! relative-position samples, forward through backbone and heads, and take
//! one SGD step on the combined objective.
//!
//! All stochastic choices derive from per-(seed, epoch, batch, purpose)
//! streams, so results are reproducible regardless of data-loading
//! interleaving. With alpha = 0 the RP branch is never built into the graph:
//! its loss is monitored through an eval-mode forward instead, which keeps
//! the run bit-equivalent to a build with the branch removed while still
//! logging `rpl_loss`.

use crate::augment::{make_views, resize_bilinear, sample_rp_pair, AugmentPolicy};
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::losses::{
    combined_loss, nt_xent_t, rp_loss, rp_loss_t, LossBreakdown, TemperatureMode,
};
use crate::model::{save_checkpoint, BackboneConfig, CheckpointMeta, HeadConfig, Model};
use crate::nn::{clip_global_grad_norm, Sgd};
use crate::tensor::{self, Tensor};
use crate::util::{mean, stream, tags};
use ndarray::{s, Array4};
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub alpha: f64,
    pub temperature: f64,
    #[serde(default)]
    pub temperature_mode: TemperatureMode,
    pub seed: u64,
    pub augment_policy: AugmentPolicy,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    /// Save a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Resize quadrant blocks from k/2 up to the encoder input size.
    #[serde(default = "default_true")]
    pub resize_rp_blocks: bool,
    /// Quadrant pairs drawn per image per step. The relative-position loss
    /// averages over them, cutting its gradient noise without changing the
    /// expected gradient; useful when few epochs must carry a small loss
    /// weight.
    #[serde(default = "default_one")]
    pub rp_samples_per_image: usize,
    /// Cosine learning-rate decay over epochs; constant lr when off.
    #[serde(default)]
    pub cosine_lr_schedule: bool,
    /// After two non-finite losses, skip those updates and clip gradients at
    /// `clip_threshold` from then on; a third non-finite loss still aborts.
    /// Off: the first non-finite loss aborts training.
    #[serde(default)]
    pub auto_clip_failsafe: bool,
    #[serde(default = "default_clip_threshold")]
    pub clip_threshold: f64,
}

fn default_true() -> bool {
    true
}

fn default_one() -> usize {
    1
}

fn default_clip_threshold() -> f64 {
    5.0
}

impl TrainConfig {
    /// Full-scale recipe: ResNet-18 on 96x96 inputs, SGD at the published
    /// settings.
    pub fn paper_preset() -> Self {
        TrainConfig {
            batch_size: 512,
            epochs: 500,
            learning_rate: 1.5,
            weight_decay: 1e-6,
            momentum: 0.9,
            alpha: 0.002,
            temperature: 0.5,
            temperature_mode: TemperatureMode::InsideExp,
            seed: 1,
            augment_policy: AugmentPolicy::simclr(96),
            backbone: BackboneConfig::resnet18(),
            head: HeadConfig::default(),
            checkpoint_every: 50,
            resize_rp_blocks: true,
            rp_samples_per_image: 1,
            cosine_lr_schedule: false,
            auto_clip_failsafe: false,
            clip_threshold: 5.0,
        }
    }

    /// Small recipe that trains in minutes on a CPU. Encoder input matches
    /// the quadrant block size of a 32x32 corpus so relative-position blocks
    /// skip resizing, and several quadrant pairs per image keep that loss's
    /// gradient usable despite the small weight and short schedule.
    pub fn desk_preset() -> Self {
        TrainConfig {
            batch_size: 128,
            epochs: 30,
            learning_rate: 0.5,
            weight_decay: 1e-6,
            momentum: 0.9,
            alpha: 0.01,
            temperature: 1.0,
            temperature_mode: TemperatureMode::InsideExp,
            seed: 1,
            augment_policy: AugmentPolicy::simclr(16),
            backbone: BackboneConfig::tiny_conv(48, 16),
            head: HeadConfig { projection_dim: 32, hidden_dim: 128 },
            checkpoint_every: 10,
            resize_rp_blocks: true,
            rp_samples_per_image: 4,
            cosine_lr_schedule: false,
            auto_clip_failsafe: false,
            clip_threshold: 5.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config(format!("batch_size {} below 2", self.batch_size)));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.alpha < 0.0 {
            return Err(Error::config(format!("alpha {} must be non-negative", self.alpha)));
        }
        if self.temperature <= 0.0 {
            return Err(Error::config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.clip_threshold <= 0.0 {
            return Err(Error::config("clip_threshold must be positive"));
        }
        if self.rp_samples_per_image == 0 {
            return Err(Error::config("rp_samples_per_image must be at least 1"));
        }
        self.augment_policy.validate()?;
        self.backbone.validate()?;
        self.head.validate()?;
        if self.augment_policy.output_size != self.backbone.input_size {
            return Err(Error::config(format!(
                "augment output_size {} does not match backbone input_size {}",
                self.augment_policy.output_size, self.backbone.input_size
            )));
        }
        Ok(())
    }
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    /// "step" for per-batch records, "epoch" for per-epoch means.
    pub kind: String,
    pub epoch: usize,
    pub step: u64,
    pub cl_loss: f64,
    pub rpl_loss: f64,
    pub total: f64,
    pub alpha: f64,
    /// Seconds since the Unix epoch at write time.
    pub timestamp: f64,
}

/// Artifacts of a completed training run.
#[derive(Debug, Clone)]
pub struct CheckpointSeries {
    /// Periodic checkpoints in epoch order (the final one included last).
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    /// Per-epoch mean losses, one entry per epoch.
    pub epoch_means: Vec<LossBreakdown>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    opt: Sgd,
    params: Vec<Tensor>,
    epoch: usize,
    batch_index: usize,
    global_step: u64,
    nonfinite_seen: usize,
    clip_active: bool,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let model = Model::new(config.backbone, config.head, config.seed)?;
        let opt = Sgd::new(config.learning_rate, config.momentum, config.weight_decay);
        let params = model.params().into_iter().map(|(_, p)| p).collect();
        Ok(Trainer {
            config,
            model,
            opt,
            params,
            epoch: 0,
            batch_index: 0,
            global_step: 0,
            nonfinite_seen: 0,
            clip_active: false,
        })
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn nonfinite_seen(&self) -> usize {
        self.nonfinite_seen
    }

    fn set_position(&mut self, epoch: usize, batch_index: usize) {
        self.epoch = epoch;
        self.batch_index = batch_index;
    }

    /// One optimizer update on the images at `indices`. Gradients reach the
    /// backbone from both branches, the projection head from the contrastive
    /// branch only, and the RP head from the RP branch only.
    pub fn step(&mut self, images: &ImageSet, indices: &[usize]) -> Result<LossBreakdown> {
        if indices.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let n = indices.len();
        if n < 2 {
            return Err(Error::invalid(format!(
                "contrastive batch needs at least 2 images, got {n}"
            )));
        }
        let policy = &self.config.augment_policy;
        let out = policy.output_size;
        let mut views_rng = stream(
            self.config.seed,
            &[tags::VIEWS, self.epoch as u64, self.batch_index as u64],
        );
        let mut rp_rng = stream(
            self.config.seed,
            &[tags::RP, self.epoch as u64, self.batch_index as u64],
        );

        let mut xcl = Array4::<f64>::zeros((2 * n, 3, out, out));
        for (i, &idx) in indices.iter().enumerate() {
            let img = images.image_f64(idx);
            let (v1, v2) = make_views(&img, &mut views_rng, policy)?;
            xcl.slice_mut(s![2 * i, .., .., ..]).assign(&v1);
            xcl.slice_mut(s![2 * i + 1, .., .., ..]).assign(&v2);
        }

        let block = images.size() / 2;
        let rp_size = if self.config.resize_rp_blocks {
            self.config.backbone.input_size
        } else {
            block
        };
        let rp_samples = self.config.rp_samples_per_image;
        let rows = n * rp_samples;
        let mut xa = Array4::<f64>::zeros((rows, 3, rp_size, rp_size));
        let mut xb = Array4::<f64>::zeros((rows, 3, rp_size, rp_size));
        let mut labels = Vec::with_capacity(rows);
        for (i, &idx) in indices.iter().enumerate() {
            let img = images.image_f64(idx);
            for j in 0..rp_samples {
                let samp = sample_rp_pair(&img, &mut rp_rng)?;
                let (ba, bb) = if rp_size == block {
                    (samp.block_a, samp.block_b)
                } else {
                    (
                        resize_bilinear(&samp.block_a, rp_size, rp_size),
                        resize_bilinear(&samp.block_b, rp_size, rp_size),
                    )
                };
                let row = i * rp_samples + j;
                xa.slice_mut(s![row, .., .., ..]).assign(&ba);
                xb.slice_mut(s![row, .., .., ..]).assign(&bb);
                labels.push(samp.d);
            }
        }

        self.opt.zero_grad(&self.params);

        let x = Tensor::constant(xcl.into_dyn());
        let feats = self.model.encode_t(&x, true);
        let proj = self.model.project_t(&feats)?;
        let cl_t = nt_xent_t(&proj, self.config.temperature, self.config.temperature_mode)?;
        let cl_val = cl_t.item();

        let (total_t, rpl_val) = if self.config.alpha > 0.0 {
            let ta = Tensor::constant(xa.into_dyn());
            let tb = Tensor::constant(xb.into_dyn());
            let fa = self.model.encode_t(&ta, true);
            let fb = self.model.encode_t(&tb, true);
            let probs = self.model.classify_rp_t(&fa, &fb)?;
            let rpl_t = rp_loss_t(&probs, &labels)?;
            let rpl_val = rpl_t.item();
            (
                tensor::add(&cl_t, &tensor::scale(&rpl_t, self.config.alpha)),
                rpl_val,
            )
        } else {
            let fa = self.model.encode(&xa)?;
            let fb = self.model.encode(&xb)?;
            let probs = self.model.classify_rp_features(&fa, &fb)?;
            (cl_t.clone(), rp_loss(&probs, &labels)?)
        };

        let total_val = total_t.item();
        if !total_val.is_finite() {
            self.nonfinite_seen += 1;
            if self.nonfinite_seen >= 2 {
                self.clip_active = true;
            }
            let head: Vec<usize> = indices.iter().take(4).copied().collect();
            return Err(Error::run(format!(
                "non-finite loss at epoch {} batch {} (step {}): cl={cl_val} rpl={rpl_val}, \
                 batch starts with indices {head:?}",
                self.epoch, self.batch_index, self.global_step
            )));
        }

        total_t.backward();
        if self.clip_active {
            clip_global_grad_norm(&self.params, self.config.clip_threshold);
        }
        self.opt.step(&self.params);
        self.global_step += 1;
        self.batch_index += 1;

        let breakdown = combined_loss(cl_val, rpl_val, self.config.alpha)?;
        debug_assert!(
            (breakdown.total - total_val).abs() < 1e-6,
            "graph total {total_val} disagrees with combined loss {}",
            breakdown.total
        );
        Ok(breakdown)
    }
}

fn cosine_lr(base: f64, epoch: usize, total_epochs: usize) -> f64 {
    let t = epoch as f64 / total_epochs as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

fn now_seconds() -> f64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Run the full loop, writing a JSON-lines log and checkpoints under
/// `out_dir`. Labels on `images`, if any, are ignored.
pub fn train(config: &TrainConfig, images: &ImageSet, out_dir: &Path) -> Result<CheckpointSeries> {
    config.validate()?;
    if images.count() < 2 {
        return Err(Error::data(format!(
            "need at least 2 images to train, got {}",
            images.count()
        )));
    }
    if images.size() % 2 != 0 {
        return Err(Error::data(format!(
            "image size {} is odd, quadrant splitting impossible",
            images.size()
        )));
    }
    if !config.resize_rp_blocks && images.size() / 2 < 8 {
        return Err(Error::config(format!(
            "unresized {}-pixel quadrant blocks are below the encoder minimum of 8",
            images.size() / 2
        )));
    }

    let ckpt_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)
        .map_err(|e| Error::run(format!("creating {}: {e}", ckpt_dir.display())))?;
    let log_path = out_dir.join("train_log.jsonl");
    let log_file = std::fs::File::create(&log_path)
        .map_err(|e| Error::run(format!("creating {}: {e}", log_path.display())))?;
    let mut log = std::io::BufWriter::new(log_file);

    let mut trainer = Trainer::new(config.clone())?;
    let mut checkpoints = Vec::new();
    let mut epoch_means = Vec::new();

    let config_value = serde_json::to_value(config)
        .map_err(|e| Error::run(format!("encoding config: {e}")))?;

    for epoch in 0..config.epochs {
        if config.cosine_lr_schedule {
            trainer.opt.lr = cosine_lr(config.learning_rate, epoch, config.epochs);
        }
        let mut order_rng = stream(config.seed, &[tags::SHUFFLE, epoch as u64]);
        let order = crate::util::shuffled_indices(images.count(), &mut order_rng);

        let mut cl_vals = Vec::new();
        let mut rpl_vals = Vec::new();
        let mut batch_index = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            trainer.set_position(epoch, batch_index);
            let breakdown = match trainer.step(images, chunk) {
                Ok(b) => b,
                Err(e) => {
                    if config.auto_clip_failsafe && trainer.nonfinite_seen <= 2 {
                        batch_index += 1;
                        continue;
                    }
                    return Err(e);
                }
            };
            batch_index += 1;
            cl_vals.push(breakdown.cl_loss);
            rpl_vals.push(breakdown.rpl_loss);
            write_record(&mut log, &log_path, "step", epoch, trainer.global_step, &breakdown)?;
        }
        if cl_vals.is_empty() {
            return Err(Error::run(format!("epoch {epoch} completed no batches")));
        }

        let epoch_mean = combined_loss(mean(&cl_vals), mean(&rpl_vals), config.alpha)?;
        epoch_means.push(epoch_mean);
        write_record(&mut log, &log_path, "epoch", epoch, trainer.global_step, &epoch_mean)?;
        log.flush()
            .map_err(|e| Error::run(format!("writing {}: {e}", log_path.display())))?;

        if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
            let path = ckpt_dir.join(format!("epoch_{:04}.ckpt", epoch + 1));
            let meta = CheckpointMeta {
                epoch: epoch + 1,
                step: trainer.global_step,
                extra: config_value.clone(),
            };
            save_checkpoint(&trainer.model, &meta, &path)?;
            checkpoints.push(path);
        }
    }

    let final_path = ckpt_dir.join("final.ckpt");
    let meta = CheckpointMeta {
        epoch: config.epochs,
        step: trainer.global_step,
        extra: config_value,
    };
    save_checkpoint(&trainer.model, &meta, &final_path)?;
    checkpoints.push(final_path.clone());

    Ok(CheckpointSeries {
        checkpoints,
        final_checkpoint: final_path,
        log_path,
        epoch_means,
    })
}

fn write_record(
    log: &mut std::io::BufWriter<std::fs::File>,
    log_path: &Path,
    kind: &str,
    epoch: usize,
    step: u64,
    b: &LossBreakdown,
) -> Result<()> {
    let record = LogRecord {
        kind: kind.to_string(),
        epoch,
        step,
        cl_loss: b.cl_loss,
        rpl_loss: b.rpl_loss,
        total: b.total,
        alpha: b.alpha,
        timestamp: now_seconds(),
    };
    let line = serde_json::to_string(&record)
        .map_err(|e| Error::run(format!("encoding log record: {e}")))?;
    writeln!(log, "{line}").map_err(|e| Error::run(format!("writing {}: {e}", log_path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_image_set;
    use crate::model::load_checkpoint;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs: 2,
            learning_rate: 0.05,
            weight_decay: 0.0,
            momentum: 0.9,
            alpha: 0.01,
            temperature: 0.5,
            temperature_mode: TemperatureMode::InsideExp,
            seed: 7,
            augment_policy: AugmentPolicy::simclr(16),
            backbone: BackboneConfig::tiny_conv(8, 16),
            head: HeadConfig { projection_dim: 8, hidden_dim: 16 },
            checkpoint_every: 0,
            resize_rp_blocks: true,
            rp_samples_per_image: 1,
            cosine_lr_schedule: false,
            auto_clip_failsafe: false,
            clip_threshold: 5.0,
        }
    }

    fn tiny_images() -> ImageSet {
        synth_image_set(3, 12, 2, 16).unwrap()
    }

    fn read_log(path: &Path) -> Vec<LogRecord> {
        std::fs::read_to_string(path)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }

    #[test]
    fn training_is_deterministic() {
        let images = tiny_images();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let s1 = train(&tiny_config(), &images, d1.path()).unwrap();
        let s2 = train(&tiny_config(), &images, d2.path()).unwrap();
        assert_eq!(s1.epoch_means, s2.epoch_means);
        let l1: Vec<(f64, f64, f64)> =
            read_log(&s1.log_path).iter().map(|r| (r.cl_loss, r.rpl_loss, r.total)).collect();
        let l2: Vec<(f64, f64, f64)> =
            read_log(&s2.log_path).iter().map(|r| (r.cl_loss, r.rpl_loss, r.total)).collect();
        assert_eq!(l1, l2);
    }

    #[test]
    fn alpha_zero_weights_ignore_rp_sample_count() {
        // the relative-position branch reads its own rng stream and adds no
        // gradient at alpha=0, so its sample count can only affect the
        // monitored loss values, never the trained weights
        let images = tiny_images();
        let mut digests = Vec::new();
        for rps in [1usize, 4] {
            let mut config = tiny_config();
            config.alpha = 0.0;
            config.rp_samples_per_image = rps;
            let dir = tempfile::tempdir().unwrap();
            let series = train(&config, &images, dir.path()).unwrap();
            let (model, _) = load_checkpoint(&series.final_checkpoint, None).unwrap();
            digests.push(model.state_digest());
        }
        assert_eq!(digests[0], digests[1]);
    }

    #[test]
    fn rp_sample_count_shapes_the_rp_batch() {
        let mut config = tiny_config();
        config.rp_samples_per_image = 3;
        let images = tiny_images();
        let mut trainer = Trainer::new(config).unwrap();
        let b = trainer.step(&images, &[0, 1, 2, 3]).unwrap();
        assert!(b.rpl_loss.is_finite());
        assert!(Trainer::new({
            let mut c = tiny_config();
            c.rp_samples_per_image = 0;
            c
        })
        .is_err());
    }

    #[test]
    fn alpha_zero_freezes_rp_head_but_logs_its_loss() {
        let mut config = tiny_config();
        config.alpha = 0.0;
        let images = tiny_images();
        let mut trainer = Trainer::new(config).unwrap();
        let h_before: Vec<_> = trainer
            .model
            .params()
            .into_iter()
            .filter(|(n, _)| n.starts_with("h."))
            .map(|(_, p)| p.to_array())
            .collect();
        let g_before: Vec<_> = trainer
            .model
            .params()
            .into_iter()
            .filter(|(n, _)| n.starts_with("g."))
            .map(|(_, p)| p.to_array())
            .collect();

        for step in 0..3 {
            trainer.set_position(0, step);
            let b = trainer.step(&images, &[0, 1, 2, 3]).unwrap();
            assert!(
                (b.rpl_loss - 8.0f64.ln()).abs() < 0.15,
                "monitored rp loss {} far from ln 8",
                b.rpl_loss
            );
            assert_eq!(b.total, b.cl_loss);
            for (name, p) in trainer.model.params() {
                if name.starts_with("h.") {
                    assert!(p.grad().is_none(), "{name} received a gradient at alpha=0");
                }
            }
        }

        let h_after: Vec<_> = trainer
            .model
            .params()
            .into_iter()
            .filter(|(n, _)| n.starts_with("h."))
            .map(|(_, p)| p.to_array())
            .collect();
        let g_after: Vec<_> = trainer
            .model
            .params()
            .into_iter()
            .filter(|(n, _)| n.starts_with("g."))
            .map(|(_, p)| p.to_array())
            .collect();
        assert_eq!(h_before, h_after, "rp head moved during alpha=0 training");
        assert_ne!(g_before, g_after, "projection head never moved");
    }

    #[test]
    fn alpha_positive_updates_rp_head() {
        let images = tiny_images();
        let mut trainer = Trainer::new(tiny_config()).unwrap();
        let before: Vec<_> = trainer
            .model
            .params()
            .into_iter()
            .filter(|(n, _)| n.starts_with("h."))
            .map(|(_, p)| p.to_array())
            .collect();
        trainer.step(&images, &[0, 1, 2, 3]).unwrap();
        let after: Vec<_> = trainer
            .model
            .params()
            .into_iter()
            .filter(|(n, _)| n.starts_with("h."))
            .map(|(_, p)| p.to_array())
            .collect();
        assert_ne!(before, after);
    }

    #[test]
    fn step_rejects_bad_batches() {
        let images = tiny_images();
        let mut trainer = Trainer::new(tiny_config()).unwrap();
        assert!(trainer.step(&images, &[]).is_err());
        assert!(trainer.step(&images, &[0]).is_err());
        trainer.model.drop_heads();
        assert!(trainer.step(&images, &[0, 1]).is_err());
    }

    #[test]
    fn successive_steps_change_parameters() {
        let images = tiny_images();
        let mut trainer = Trainer::new(tiny_config()).unwrap();
        let d0 = trainer.model.state_digest();
        trainer.step(&images, &[0, 1, 2, 3]).unwrap();
        let d1 = trainer.model.state_digest();
        trainer.step(&images, &[4, 5, 6, 7]).unwrap();
        let d2 = trainer.model.state_digest();
        assert_ne!(d0, d1);
        assert_ne!(d1, d2);
        assert_eq!(trainer.global_step(), 2);
    }

    #[test]
    fn step_breakdown_satisfies_combination_invariant() {
        let images = tiny_images();
        let mut trainer = Trainer::new(tiny_config()).unwrap();
        let b = trainer.step(&images, &[0, 1, 2, 3]).unwrap();
        assert_eq!(b.total, b.cl_loss + b.alpha * b.rpl_loss);
        assert!(b.cl_loss.is_finite() && b.rpl_loss.is_finite());
    }

    #[test]
    fn checkpoint_series_and_log_layout() {
        let mut config = tiny_config();
        config.epochs = 4;
        config.checkpoint_every = 2;
        let images = tiny_images();
        let dir = tempfile::tempdir().unwrap();
        let series = train(&config, &images, dir.path()).unwrap();

        assert_eq!(series.epoch_means.len(), 4);
        assert_eq!(series.checkpoints.len(), 3);
        assert!(series.checkpoints[0].ends_with("epoch_0002.ckpt"));
        assert!(series.checkpoints[1].ends_with("epoch_0004.ckpt"));
        assert_eq!(series.final_checkpoint, series.checkpoints[2]);

        let (model, meta) = load_checkpoint(&series.final_checkpoint, None).unwrap();
        assert_eq!(meta.epoch, 4);
        assert!(model.has_rp_head() && model.has_projection_head());
        let stored: TrainConfig = serde_json::from_value(meta.extra).unwrap();
        assert_eq!(stored, config);

        let records = read_log(&series.log_path);
        let steps = records.iter().filter(|r| r.kind == "step").count();
        let epochs = records.iter().filter(|r| r.kind == "epoch").count();
        assert_eq!(epochs, 4);
        assert_eq!(steps, 4 * 3);
        for r in &records {
            assert!(r.total.is_finite());
        }
    }

    #[test]
    fn nonfinite_loss_aborts_with_diagnostics() {
        let mut config = tiny_config();
        config.temperature = 1e-4;
        let images = tiny_images();
        let dir = tempfile::tempdir().unwrap();
        let err = train(&config, &images, dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("non-finite"), "unhelpful abort message: {msg}");
        assert!(msg.contains("epoch 0"), "missing position info: {msg}");
    }

    #[test]
    fn failsafe_survives_two_bad_steps_then_aborts() {
        let mut config = tiny_config();
        config.temperature = 1e-4;
        config.auto_clip_failsafe = true;
        let images = tiny_images();
        let dir = tempfile::tempdir().unwrap();
        // every step is non-finite at this temperature: two are skipped,
        // the third aborts even with clipping active
        let err = train(&config, &images, dir.path()).unwrap_err();
        assert!(err.to_string().contains("non-finite"));
    }

    #[test]
    fn cosine_schedule_decays_to_zero() {
        assert_eq!(cosine_lr(0.5, 0, 10), 0.5);
        let mid = cosine_lr(0.5, 5, 10);
        assert!((mid - 0.25).abs() < 1e-12, "{mid}");
        let end = cosine_lr(0.5, 10, 10);
        assert!(end.abs() < 1e-12);
    }

    #[test]
    fn config_validation_catches_mismatches() {
        let mut c = tiny_config();
        c.augment_policy.output_size = 20;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.batch_size = 1;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.momentum = 1.0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.alpha = -0.1;
        assert!(c.validate().is_err());
        assert!(TrainConfig::paper_preset().validate().is_ok());
        assert!(TrainConfig::desk_preset().validate().is_ok());
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = tiny_config();
        let text = serde_json::to_string_pretty(&c).unwrap();
        let back: TrainConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(c, back);
    }
}
