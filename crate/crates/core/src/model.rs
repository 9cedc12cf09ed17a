//! The trainable model: a convolutional backbone `f` with named internal
//! layers, a projection head `g` for the contrastive task, and a
//! relative-position classifier head `h`, plus a versioned checkpoint format.
//!
//! Layer taps are the final (post-activation) output of each named block.
//! Activation recording always runs in eval mode and flattens feature maps
//! row-major as `[channel, row, col]`.

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Mlp};
use crate::tensor::{self, Tensor};
use crate::util::{stream, tags};
use crate::data::ImageSet;
use ndarray::{Array2, Array4, ArrayD, Axis, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

/// Number of relative-position classes (the 8 neighbor directions).
pub const RP_CLASSES: usize = 8;

/// Std of the RP head's output layer at init. Chance-level behavior of the
/// untrained head does not depend on this scale (argmax is scale-invariant),
/// but the gradient the backbone receives from the relative-position loss is
/// proportional to it, so a small value would stall that pathway early in
/// training when the loss weight is small.
const RP_HEAD_OUTPUT_STD: f64 = 0.3;

const ENCODE_CHUNK: usize = 256;

/// Activations of one named layer for an ordered stimulus set.
/// `values` is `[n_stimuli, n_features]` with feature maps flattened
/// row-major.
#[derive(Debug, Clone)]
pub struct ActivationMatrix {
    pub layer_name: String,
    pub values: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Resnet18,
    TinyConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub architecture: Architecture,
    /// Output feature dimension `n`; stage widths are `n/8, n/4, n/2, n`.
    pub feature_dim: usize,
    /// Expected input resolution, recorded for wiring checks downstream.
    pub input_size: usize,
}

impl BackboneConfig {
    pub fn resnet18() -> Self {
        BackboneConfig { architecture: Architecture::Resnet18, feature_dim: 512, input_size: 96 }
    }

    pub fn tiny_conv(feature_dim: usize, input_size: usize) -> Self {
        BackboneConfig { architecture: Architecture::TinyConv, feature_dim, input_size }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 8 || self.feature_dim % 8 != 0 {
            return Err(Error::config(format!(
                "feature_dim {} must be a positive multiple of 8",
                self.feature_dim
            )));
        }
        if self.architecture == Architecture::Resnet18 && self.feature_dim < 64 {
            return Err(Error::config(format!(
                "resnet18 needs feature_dim >= 64, got {}",
                self.feature_dim
            )));
        }
        if self.input_size < 8 {
            return Err(Error::config(format!("input_size {} below minimum 8", self.input_size)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Contrastive projection output dimension `m`.
    pub projection_dim: usize,
    /// Hidden width shared by both heads.
    pub hidden_dim: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { projection_dim: 128, hidden_dim: 512 }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.projection_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::config("head dimensions must be positive"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Backbones
// ---------------------------------------------------------------------------

struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn new(
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        ConvBn { conv: Conv2d::new(rng, in_ch, out_ch, k, stride, pad), bn: BatchNorm2d::new(out_ch) }
    }

    fn forward(&self, x: &Tensor, training: bool) -> Tensor {
        self.bn.forward(&self.conv.forward(x), training)
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.conv.params(&format!("{prefix}.conv"), out);
        self.bn.params(&format!("{prefix}.bn"), out);
    }
}

struct BasicBlock {
    main1: ConvBn,
    main2: ConvBn,
    down: Option<ConvBn>,
}

impl BasicBlock {
    fn new(rng: &mut ChaCha8Rng, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        let down = (stride != 1 || in_ch != out_ch)
            .then(|| ConvBn::new(rng, in_ch, out_ch, 1, stride, 0));
        BasicBlock {
            main1: ConvBn::new(rng, in_ch, out_ch, 3, stride, 1),
            main2: ConvBn::new(rng, out_ch, out_ch, 3, 1, 1),
            down,
        }
    }

    fn forward(&self, x: &Tensor, training: bool) -> Tensor {
        let y = tensor::relu(&self.main1.forward(x, training));
        let y = self.main2.forward(&y, training);
        let shortcut = match &self.down {
            Some(d) => d.forward(x, training),
            None => x.clone(),
        };
        tensor::relu(&tensor::add(&y, &shortcut))
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.main1.params(&format!("{prefix}.main1"), out);
        self.main2.params(&format!("{prefix}.main2"), out);
        if let Some(d) = &self.down {
            d.params(&format!("{prefix}.down"), out);
        }
    }
}

enum Backbone {
    /// Four conv-bn-relu stages with strides 1,2,2,2 and global average
    /// pooling; taps `stage1..stage4`.
    Tiny { stages: Vec<ConvBn> },
    /// ResNet-18 with a 3x3 stride-1 stem and no max-pool, suited to small
    /// inputs; taps `stem` and `layer{1..4}.{0,1}`.
    Resnet { stem: ConvBn, groups: Vec<Vec<BasicBlock>> },
}

impl Backbone {
    fn new(cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Self {
        let n = cfg.feature_dim;
        match cfg.architecture {
            Architecture::TinyConv => {
                let widths = [n / 8, n / 4, n / 2, n];
                let strides = [1, 2, 2, 2];
                let mut stages = Vec::with_capacity(4);
                let mut in_ch = 3;
                for i in 0..4 {
                    stages.push(ConvBn::new(rng, in_ch, widths[i], 3, strides[i], 1));
                    in_ch = widths[i];
                }
                Backbone::Tiny { stages }
            }
            Architecture::Resnet18 => {
                let base = n / 8;
                let stem = ConvBn::new(rng, 3, base, 3, 1, 1);
                let mut groups = Vec::with_capacity(4);
                let mut in_ch = base;
                for (gi, mult) in [1usize, 2, 4, 8].iter().enumerate() {
                    let out_ch = base * mult;
                    let stride = if gi == 0 { 1 } else { 2 };
                    let blocks = vec![
                        BasicBlock::new(rng, in_ch, out_ch, stride),
                        BasicBlock::new(rng, out_ch, out_ch, 1),
                    ];
                    groups.push(blocks);
                    in_ch = out_ch;
                }
                Backbone::Resnet { stem, groups }
            }
        }
    }

    fn layer_names(&self) -> Vec<String> {
        match self {
            Backbone::Tiny { stages } => {
                (1..=stages.len()).map(|i| format!("stage{i}")).collect()
            }
            Backbone::Resnet { groups, .. } => {
                let mut names = vec!["stem".to_string()];
                for (gi, blocks) in groups.iter().enumerate() {
                    for bi in 0..blocks.len() {
                        names.push(format!("layer{}.{}", gi + 1, bi));
                    }
                }
                names
            }
        }
    }

    /// Forward to pooled features; when `taps` is given, every named layer's
    /// post-activation output is appended in depth order.
    fn forward(
        &self,
        x: &Tensor,
        training: bool,
        mut taps: Option<&mut Vec<(String, Tensor)>>,
    ) -> Tensor {
        // pixels arrive in [0,1]; map to [-1,1] so first-layer responses are
        // sign-diverse instead of brightness-dominated
        let x = tensor::scale(&tensor::add_scalar(x, -0.5), 2.0);
        let x = &x;
        let push = |name: String, t: &Tensor, taps: &mut Option<&mut Vec<(String, Tensor)>>| {
            if let Some(v) = taps.as_deref_mut() {
                v.push((name, t.clone()));
            }
        };
        let h = match self {
            Backbone::Tiny { stages } => {
                let mut h = x.clone();
                for (i, stage) in stages.iter().enumerate() {
                    h = tensor::relu(&stage.forward(&h, training));
                    push(format!("stage{}", i + 1), &h, &mut taps);
                }
                h
            }
            Backbone::Resnet { stem, groups } => {
                let mut h = tensor::relu(&stem.forward(x, training));
                push("stem".to_string(), &h, &mut taps);
                for (gi, blocks) in groups.iter().enumerate() {
                    for (bi, block) in blocks.iter().enumerate() {
                        h = block.forward(&h, training);
                        push(format!("layer{}.{}", gi + 1, bi), &h, &mut taps);
                    }
                }
                h
            }
        };
        tensor::global_avg_pool(&h)
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        match self {
            Backbone::Tiny { stages } => {
                for (i, stage) in stages.iter().enumerate() {
                    stage.params(&format!("{prefix}.stage{}", i + 1), out);
                }
            }
            Backbone::Resnet { stem, groups } => {
                stem.params(&format!("{prefix}.stem"), out);
                for (gi, blocks) in groups.iter().enumerate() {
                    for (bi, block) in blocks.iter().enumerate() {
                        block.params(&format!("{prefix}.layer{}.{}", gi + 1, bi), out);
                    }
                }
            }
        }
    }

    fn batch_norms<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a BatchNorm2d)>) {
        let mut add = |p: String, cb: &'a ConvBn| out.push((format!("{p}.bn"), &cb.bn));
        match self {
            Backbone::Tiny { stages } => {
                for (i, stage) in stages.iter().enumerate() {
                    add(format!("{prefix}.stage{}", i + 1), stage);
                }
            }
            Backbone::Resnet { stem, groups } => {
                add(format!("{prefix}.stem"), stem);
                for (gi, blocks) in groups.iter().enumerate() {
                    for (bi, block) in blocks.iter().enumerate() {
                        let bp = format!("{prefix}.layer{}.{}", gi + 1, bi);
                        add(format!("{bp}.main1"), &block.main1);
                        add(format!("{bp}.main2"), &block.main2);
                        if let Some(d) = &block.down {
                            add(format!("{bp}.down"), d);
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

pub struct Model {
    pub backbone_cfg: BackboneConfig,
    pub head_cfg: HeadConfig,
    pub init_seed: u64,
    backbone: Backbone,
    g: Option<Mlp>,
    h: Option<Mlp>,
}

impl Model {
    pub fn new(backbone_cfg: BackboneConfig, head_cfg: HeadConfig, seed: u64) -> Result<Model> {
        backbone_cfg.validate()?;
        head_cfg.validate()?;
        let mut rng = stream(seed, &[tags::INIT]);
        let backbone = Backbone::new(&backbone_cfg, &mut rng);
        let n = backbone_cfg.feature_dim;
        let g = Mlp::new(&mut rng, n, head_cfg.hidden_dim, head_cfg.projection_dim);
        let h = Mlp::new_pair_difference(
            &mut rng,
            n,
            head_cfg.hidden_dim,
            RP_CLASSES,
            RP_HEAD_OUTPUT_STD,
        );
        Ok(Model { backbone_cfg, head_cfg, init_seed: seed, backbone, g: Some(g), h: Some(h) })
    }

    /// Named internal layers available for activation recording, ordered from
    /// shallow to deep.
    pub fn layer_names(&self) -> Vec<String> {
        self.backbone.layer_names()
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone_cfg.feature_dim
    }

    pub fn has_projection_head(&self) -> bool {
        self.g.is_some()
    }

    pub fn has_rp_head(&self) -> bool {
        self.h.is_some()
    }

    /// Remove both heads, leaving the frozen feature extractor.
    pub fn drop_heads(&mut self) {
        self.g = None;
        self.h = None;
    }

    /// Graph-building forward to pooled features `[B, n]`.
    pub fn encode_t(&self, x: &Tensor, training: bool) -> Tensor {
        self.backbone.forward(x, training, None)
    }

    /// Like [`encode_t`](Self::encode_t) but also returns every named layer's
    /// activation tensor in depth order.
    pub fn encode_with_taps(&self, x: &Tensor, training: bool) -> (Tensor, Vec<(String, Tensor)>) {
        let mut taps = Vec::new();
        let feats = self.backbone.forward(x, training, Some(&mut taps));
        (feats, taps)
    }

    /// Projection-head forward `[B, n] -> [B, m]`.
    pub fn project_t(&self, feats: &Tensor) -> Result<Tensor> {
        let g = self
            .g
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no projection head"))?;
        Ok(g.forward(feats))
    }

    /// RP-head forward on two feature batches (block a first, block b
    /// second); rows are probabilities over the 8 directions.
    pub fn classify_rp_t(&self, feats_a: &Tensor, feats_b: &Tensor) -> Result<Tensor> {
        let h = self
            .h
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no relative-position head"))?;
        let joint = tensor::concat_cols(feats_a, feats_b);
        Ok(tensor::softmax_rows(&h.forward(&joint)))
    }

    /// Eval-mode features for a batch of images `[B, 3, k, k]`, chunked to
    /// bound memory. Output is `[B, feature_dim]`.
    pub fn encode(&self, images: &Array4<f64>) -> Result<Array2<f64>> {
        let (b, c, hh, ww) = images.dim();
        if c != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        if hh != ww || hh < 8 {
            return Err(Error::shape(format!("expected square input >= 8, got {hh}x{ww}")));
        }
        let mut out = Array2::zeros((b, self.feature_dim()));
        let mut start = 0;
        while start < b {
            let end = (start + ENCODE_CHUNK).min(b);
            let x = Tensor::constant(
                images.slice(ndarray::s![start..end, .., .., ..]).to_owned().into_dyn(),
            );
            let feats = self.encode_t(&x, false);
            let v = feats.value();
            for (i, row) in v.axis_iter(Axis(0)).enumerate() {
                for (j, &val) in row.iter().enumerate() {
                    out[[start + i, j]] = val;
                }
            }
            start = end;
        }
        Ok(out)
    }

    /// Eval-mode RP probabilities for pre-encoded block features.
    pub fn classify_rp_features(
        &self,
        feats_a: &Array2<f64>,
        feats_b: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        if feats_a.dim() != feats_b.dim() {
            return Err(Error::shape(format!(
                "feature batches disagree: {:?} vs {:?}",
                feats_a.dim(),
                feats_b.dim()
            )));
        }
        if feats_a.ncols() != self.feature_dim() {
            return Err(Error::shape(format!(
                "expected {} features, got {}",
                self.feature_dim(),
                feats_a.ncols()
            )));
        }
        let ta = Tensor::constant(feats_a.clone().into_dyn());
        let tb = Tensor::constant(feats_b.clone().into_dyn());
        let probs = self.classify_rp_t(&ta, &tb)?;
        let v = probs.to_array();
        Ok(v.into_dimensionality::<ndarray::Ix2>().expect("2-D probabilities"))
    }

    /// Eval-mode RP probabilities for two aligned batches of image blocks.
    pub fn classify_rp(
        &self,
        blocks_a: &Array4<f64>,
        blocks_b: &Array4<f64>,
    ) -> Result<Array2<f64>> {
        if blocks_a.dim() != blocks_b.dim() {
            return Err(Error::shape(format!(
                "block batches disagree: {:?} vs {:?}",
                blocks_a.dim(),
                blocks_b.dim()
            )));
        }
        let fa = self.encode(blocks_a)?;
        let fb = self.encode(blocks_b)?;
        self.classify_rp_features(&fa, &fb)
    }

    /// Eval-mode activations of the requested layers over an ordered stimulus
    /// set, computed in chunks. Results are keyed and ordered by the request.
    pub fn record_activations(
        &self,
        stimuli: &ImageSet,
        layers: &[String],
        chunk_size: usize,
    ) -> Result<Vec<ActivationMatrix>> {
        if chunk_size == 0 {
            return Err(Error::invalid("chunk_size must be positive"));
        }
        if layers.is_empty() {
            return Err(Error::invalid("no layers requested"));
        }
        let registry = self.layer_names();
        for name in layers {
            if !registry.iter().any(|r| r == name) {
                return Err(Error::invalid(format!(
                    "unknown layer '{}'; valid layers: {}",
                    name,
                    registry.join(", ")
                )));
            }
        }

        let count = stimuli.count();
        let mut outputs: Vec<Option<Array2<f64>>> = vec![None; layers.len()];
        let mut start = 0;
        while start < count {
            let end = (start + chunk_size).min(count);
            let idx: Vec<usize> = (start..end).collect();
            let x = Tensor::constant(stimuli.gather_f64(&idx).into_dyn());
            let (_, taps) = self.encode_with_taps(&x, false);
            let by_name: HashMap<&str, &Tensor> =
                taps.iter().map(|(n, t)| (n.as_str(), t)).collect();
            for (li, name) in layers.iter().enumerate() {
                let t = by_name[name.as_str()];
                let v = t.value();
                let flat_dim: usize = v.shape()[1..].iter().product();
                let out = outputs[li]
                    .get_or_insert_with(|| Array2::zeros((count, flat_dim)));
                let std = v.as_standard_layout();
                let flat = std.as_slice().expect("standard layout");
                for row in 0..(end - start) {
                    let src = &flat[row * flat_dim..(row + 1) * flat_dim];
                    out.row_mut(start + row)
                        .as_slice_mut()
                        .expect("row-major output")
                        .copy_from_slice(src);
                }
            }
            start = end;
        }

        Ok(layers
            .iter()
            .zip(outputs)
            .map(|(name, m)| ActivationMatrix {
                layer_name: name.clone(),
                values: m.expect("filled above"),
            })
            .collect())
    }

    /// All parameters as (name, tensor) pairs: backbone under `f.`, heads
    /// under `g.` and `h.`. Order is fixed and matches the checkpoint layout.
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.backbone.params("f", &mut out);
        if let Some(g) = &self.g {
            g.params("g", &mut out);
        }
        if let Some(h) = &self.h {
            h.params("h", &mut out);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    fn batch_norms(&self) -> Vec<(String, &BatchNorm2d)> {
        let mut out = Vec::new();
        self.backbone.batch_norms("f", &mut out);
        out
    }

    /// SHA-256 over all parameter and running-statistic bytes; changes iff
    /// the model state changes.
    pub fn state_digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, p) in self.params() {
            hasher.update(name.as_bytes());
            for &v in p.value().iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        for (name, bn) in self.batch_norms() {
            hasher.update(name.as_bytes());
            for &v in bn.running_mean.borrow().iter() {
                hasher.update(v.to_le_bytes());
            }
            for &v in bn.running_var.borrow().iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"VTLCKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub step: u64,
    /// Free-form context (e.g. the resolved training config).
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl Default for CheckpointMeta {
    fn default() -> Self {
        CheckpointMeta { epoch: 0, step: 0, extra: serde_json::Value::Null }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    backbone: BackboneConfig,
    head: HeadConfig,
    has_projection_head: bool,
    has_rp_head: bool,
    init_seed: u64,
    meta: CheckpointMeta,
}

pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        backbone: model.backbone_cfg,
        head: model.head_cfg,
        has_projection_head: model.has_projection_head(),
        has_rp_head: model.has_rp_head(),
        init_seed: model.init_seed,
        meta: meta.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::run(format!("encoding checkpoint header: {e}")))?;

    let file = std::fs::File::create(path)
        .map_err(|e| Error::run(format!("creating {}: {e}", path.display())))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e: std::io::Error| Error::run(format!("writing {}: {e}", path.display()));

    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&header_bytes).map_err(io)?;

    let params = model.params();
    let bns = model.batch_norms();
    let n_entries = params.len() + 2 * bns.len();
    w.write_all(&(n_entries as u64).to_le_bytes()).map_err(io)?;

    let write_entry = |w: &mut std::io::BufWriter<std::fs::File>,
                           name: &str,
                           shape: &[usize],
                           values: &mut dyn Iterator<Item = f64>|
     -> Result<()> {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&(shape.len() as u32).to_le_bytes()).map_err(io)?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        for v in values {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        Ok(())
    };

    for (name, p) in &params {
        let v = p.value();
        let std = v.as_standard_layout();
        write_entry(&mut w, name, &p.shape(), &mut std.iter().copied())?;
    }
    for (name, bn) in &bns {
        let rm = bn.running_mean.borrow();
        write_entry(
            &mut w,
            &format!("{name}.running_mean"),
            &[rm.len()],
            &mut rm.iter().copied(),
        )?;
        let rv = bn.running_var.borrow();
        write_entry(
            &mut w,
            &format!("{name}.running_var"),
            &[rv.len()],
            &mut rv.iter().copied(),
        )?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

/// Load a checkpoint, rebuilding the model it describes. When `expected`
/// configs are supplied, a mismatch with the stored configs is rejected.
pub fn load_checkpoint(
    path: &Path,
    expected: Option<(&BackboneConfig, &HeadConfig)>,
) -> Result<(Model, CheckpointMeta)> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("opening {}: {e}", path.display())))?;
    let mut r = std::io::BufReader::new(file);
    let io = |e: std::io::Error| Error::data(format!("reading {}: {e}", path.display()));

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::data(format!("{} is not a checkpoint file", path.display())));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf).map_err(io)?;
    let header_len = u64::from_le_bytes(u64buf) as usize;
    if header_len > 1 << 20 {
        return Err(Error::data("checkpoint header is implausibly large"));
    }
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(io)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::data(format!("decoding checkpoint header: {e}")))?;

    if let Some((bcfg, hcfg)) = expected {
        if header.backbone != *bcfg || header.head != *hcfg {
            return Err(Error::config(format!(
                "checkpoint architecture mismatch: stored {:?}/{:?}, expected {:?}/{:?}",
                header.backbone, header.head, bcfg, hcfg
            )));
        }
    }

    let mut model = Model::new(header.backbone, header.head, header.init_seed)?;
    if !header.has_projection_head {
        model.g = None;
    }
    if !header.has_rp_head {
        model.h = None;
    }

    let param_map: HashMap<String, Tensor> = model.params().into_iter().collect();
    let expected_entries = param_map.len() + 2 * model.batch_norms().len();

    r.read_exact(&mut u64buf).map_err(io)?;
    let n_entries = u64::from_le_bytes(u64buf) as usize;
    if n_entries != expected_entries {
        return Err(Error::data(format!(
            "checkpoint has {n_entries} entries, model needs {expected_entries}"
        )));
    }

    for _ in 0..n_entries {
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(io)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::data("checkpoint entry name is not UTF-8"))?;
        r.read_exact(&mut u32buf).map_err(io)?;
        let ndim = u32::from_le_bytes(u32buf) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            r.read_exact(&mut u64buf).map_err(io)?;
            shape.push(u64::from_le_bytes(u64buf) as usize);
        }
        let len: usize = shape.iter().product();
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut u64buf).map_err(io)?;
            values.push(f64::from_le_bytes(u64buf));
        }

        if let Some(tail) = name.strip_suffix(".running_mean") {
            set_bn_buffer(&model, tail, &name, &shape, values, true)?;
        } else if let Some(tail) = name.strip_suffix(".running_var") {
            set_bn_buffer(&model, tail, &name, &shape, values, false)?;
        } else {
            let p = param_map
                .get(&name)
                .ok_or_else(|| Error::data(format!("unknown checkpoint entry '{name}'")))?;
            if p.shape() != shape {
                return Err(Error::data(format!(
                    "checkpoint entry '{name}' has shape {shape:?}, model expects {:?}",
                    p.shape()
                )));
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&shape), values)
                .expect("shape/len agree");
            p.set_value(arr);
        }
    }

    let meta = header.meta;
    Ok((model, meta))
}

fn set_bn_buffer(
    model: &Model,
    bn_name: &str,
    entry_name: &str,
    shape: &[usize],
    values: Vec<f64>,
    is_mean: bool,
) -> Result<()> {
    let bns = model.batch_norms();
    let (_, bn) = bns
        .iter()
        .find(|(n, _)| n == bn_name)
        .ok_or_else(|| Error::data(format!("unknown checkpoint entry '{entry_name}'")))?;
    if shape != [bn.channels()] {
        return Err(Error::data(format!(
            "checkpoint entry '{entry_name}' has shape {shape:?}, model expects [{}]",
            bn.channels()
        )));
    }
    let arr = ndarray::Array1::from_vec(values);
    if is_mean {
        *bn.running_mean.borrow_mut() = arr;
    } else {
        *bn.running_var.borrow_mut() = arr;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_image_set;
    use ndarray::s;

    fn tiny_model(feature_dim: usize, input_size: usize) -> Model {
        let bcfg = BackboneConfig::tiny_conv(feature_dim, input_size);
        let hcfg = HeadConfig { projection_dim: 16, hidden_dim: 32 };
        Model::new(bcfg, hcfg, 42).unwrap()
    }

    #[test]
    fn tiny_conv_param_count_matches_hand_formula() {
        let model = Model::new(
            BackboneConfig::tiny_conv(64, 32),
            HeadConfig::default(),
            0,
        )
        .unwrap();
        let widths = [8usize, 16, 32, 64];
        let mut f = 0usize;
        let mut in_ch = 3;
        for w in widths {
            f += in_ch * w * 9 + 2 * w;
            in_ch = w;
        }
        let g = 64 * 512 + 512 + 512 * 128 + 128;
        let h = 128 * 512 + 512 + 512 * 8 + 8;
        assert_eq!(model.param_count(), f + g + h);
        assert_eq!(f + g + h, 193_744);
    }

    #[test]
    fn resnet18_param_count_matches_hand_formula() {
        let model =
            Model::new(BackboneConfig::resnet18(), HeadConfig::default(), 0).unwrap();
        let f: usize = model
            .params()
            .iter()
            .filter(|(n, _)| n.starts_with("f."))
            .map(|(_, p)| p.len())
            .sum();
        assert_eq!(f, 11_168_832);
        let g = 512 * 512 + 512 + 512 * 128 + 128;
        let h = 1024 * 512 + 512 + 512 * 8 + 8;
        assert_eq!(model.param_count(), 11_168_832 + g + h);
    }

    #[test]
    fn layer_registries_list_expected_names() {
        let tiny = tiny_model(16, 16);
        assert_eq!(tiny.layer_names(), ["stage1", "stage2", "stage3", "stage4"]);
        let bcfg = BackboneConfig { architecture: Architecture::Resnet18, feature_dim: 64, input_size: 16 };
        let resnet = Model::new(bcfg, HeadConfig { projection_dim: 8, hidden_dim: 8 }, 0).unwrap();
        assert_eq!(
            resnet.layer_names(),
            [
                "stem", "layer1.0", "layer1.1", "layer2.0", "layer2.1", "layer3.0",
                "layer3.1", "layer4.0", "layer4.1"
            ]
        );
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let model = tiny_model(16, 16);
        let set = synth_image_set(3, 5, 2, 16).unwrap();
        let imgs = set.gather_f64(&[0, 1, 2, 3, 4]);
        let a = model.encode(&imgs).unwrap();
        let b = model.encode(&imgs).unwrap();
        assert_eq!(a.dim(), (5, 16));
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn small_resnet_forward_works() {
        let bcfg = BackboneConfig { architecture: Architecture::Resnet18, feature_dim: 64, input_size: 16 };
        let model = Model::new(bcfg, HeadConfig { projection_dim: 8, hidden_dim: 8 }, 1).unwrap();
        let set = synth_image_set(5, 3, 2, 16).unwrap();
        let feats = model.encode(&set.gather_f64(&[0, 1, 2])).unwrap();
        assert_eq!(feats.dim(), (3, 64));
        let acts = model
            .record_activations(&set, &["layer2.0".into(), "stem".into()], 2)
            .unwrap();
        assert_eq!(acts[0].layer_name, "layer2.0");
        // stride-2 at group 2: 16 -> 16 (group1) -> 8; 16 channels
        assert_eq!(acts[0].values.dim(), (3, 16 * 8 * 8));
        assert_eq!(acts[1].values.dim(), (3, 8 * 16 * 16));
    }

    #[test]
    fn classify_rp_rows_are_probabilities() {
        let model = tiny_model(16, 16);
        let set = synth_image_set(7, 4, 2, 16).unwrap();
        let a = set.gather_f64(&[0, 1]);
        let b = set.gather_f64(&[2, 3]);
        let probs = model.classify_rp(&a, &b).unwrap();
        assert_eq!(probs.dim(), (2, RP_CLASSES));
        for row in probs.rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-9, "row sum {s}");
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn rp_head_starts_near_uniform() {
        let model = tiny_model(16, 16);
        let set = synth_image_set(8, 8, 2, 16).unwrap();
        let a = set.gather_f64(&[0, 1, 2, 3]);
        let b = set.gather_f64(&[4, 5, 6, 7]);
        let probs = model.classify_rp(&a, &b).unwrap();
        for &p in probs.iter() {
            assert!((p - 0.125).abs() < 0.05, "initial probability {p} far from uniform");
        }
    }

    #[test]
    fn dropped_heads_error_cleanly() {
        let mut model = tiny_model(16, 16);
        model.drop_heads();
        let f = Array2::zeros((2, 16));
        assert!(model.classify_rp_features(&f, &f).is_err());
        let t = Tensor::constant(ArrayD::zeros(IxDyn(&[2, 16])));
        assert!(model.project_t(&t).is_err());
    }

    #[test]
    fn record_activations_is_chunk_invariant() {
        let model = tiny_model(16, 16);
        let set = synth_image_set(9, 10, 2, 16).unwrap();
        let layers: Vec<String> = vec!["stage2".into(), "stage4".into()];
        let a = model.record_activations(&set, &layers, 3).unwrap();
        let b = model.record_activations(&set, &layers, 10).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.layer_name, y.layer_name);
            let diff = (&x.values - &y.values).mapv(f64::abs).iter().copied().fold(0.0, f64::max);
            assert!(diff < 1e-10, "chunking changed activations by {diff}");
        }
    }

    #[test]
    fn record_activations_rejects_unknown_layer() {
        let model = tiny_model(16, 16);
        let set = synth_image_set(9, 2, 2, 16).unwrap();
        let err = model
            .record_activations(&set, &["stage9".into()], 2)
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("stage9") && msg.contains("stage1"), "unhelpful error: {msg}");
    }

    #[test]
    fn record_activations_flattens_row_major() {
        // stage4 of a 16->2x2 map: feature index = c*4 + row*2 + col.
        let model = tiny_model(16, 16);
        let set = synth_image_set(9, 2, 2, 16).unwrap();
        let acts = model.record_activations(&set, &["stage4".into()], 2).unwrap();
        let x = Tensor::constant(set.gather_f64(&[0, 1]).into_dyn());
        let (_, taps) = model.encode_with_taps(&x, false);
        let raw = taps.iter().find(|(n, _)| n == "stage4").unwrap().1.value().to_owned();
        let (_, c, hh, ww) = (raw.shape()[0], raw.shape()[1], raw.shape()[2], raw.shape()[3]);
        for ch in 0..c {
            for row in 0..hh {
                for col in 0..ww {
                    let flat = ch * hh * ww + row * ww + col;
                    assert_eq!(acts[0].values[[0, flat]], raw[[0, ch, row, col]]);
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_eval_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model(16, 16);
        let set = synth_image_set(4, 6, 2, 16).unwrap();
        // push BN running stats off their init so the round trip covers them
        let x = Tensor::constant(set.gather_f64(&[0, 1, 2, 3]).into_dyn());
        let _ = model.encode_t(&x, true);

        let imgs = set.gather_f64(&[4, 5]);
        let before = model.encode(&imgs).unwrap();
        let meta = CheckpointMeta { epoch: 7, step: 123, extra: serde_json::json!({"k": 1}) };
        let path = dir.path().join("ck.bin");
        save_checkpoint(&model, &meta, &path).unwrap();

        let (loaded, meta2) = load_checkpoint(&path, None).unwrap();
        assert_eq!(meta2.epoch, 7);
        assert_eq!(meta2.step, 123);
        let after = loaded.encode(&imgs).unwrap();
        let diff = (&before - &after).mapv(f64::abs).iter().copied().fold(0.0, f64::max);
        assert!(diff < 1e-12, "round trip changed outputs by {diff}");
        assert_eq!(model.state_digest(), loaded.state_digest());
    }

    #[test]
    fn checkpoint_rejects_mismatched_architecture() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model(16, 16);
        let path = dir.path().join("ck.bin");
        save_checkpoint(&model, &CheckpointMeta::default(), &path).unwrap();

        let other = BackboneConfig::tiny_conv(32, 16);
        let hcfg = HeadConfig { projection_dim: 16, hidden_dim: 32 };
        let err = match load_checkpoint(&path, Some((&other, &hcfg))) {
            Err(e) => e,
            Ok(_) => panic!("mismatched configs were accepted"),
        };
        assert!(matches!(err, Error::Config { .. }), "wrong error kind: {err}");

        let ok = load_checkpoint(&path, Some((&model.backbone_cfg, &model.head_cfg)));
        assert!(ok.is_ok());
    }

    #[test]
    fn checkpoint_rejects_truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model(16, 16);
        let path = dir.path().join("ck.bin");
        save_checkpoint(&model, &CheckpointMeta::default(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        assert!(load_checkpoint(&path, None).is_err());
    }

    #[test]
    fn state_digest_tracks_parameter_changes() {
        let model = tiny_model(16, 16);
        let d1 = model.state_digest();
        let (_, p) = &model.params()[0];
        let mut v = p.to_array();
        v[[0, 0, 0, 0]] += 1.0;
        p.set_value(v);
        assert_ne!(d1, model.state_digest());
    }

    #[test]
    fn config_validation_rejects_bad_dims() {
        assert!(BackboneConfig::tiny_conv(12, 16).validate().is_err());
        assert!(BackboneConfig::tiny_conv(16, 4).validate().is_err());
        let bad = BackboneConfig { architecture: Architecture::Resnet18, feature_dim: 32, input_size: 96 };
        assert!(bad.validate().is_err());
        assert!(HeadConfig { projection_dim: 0, hidden_dim: 8 }.validate().is_err());
    }

    #[test]
    fn encode_rejects_bad_shapes() {
        let model = tiny_model(16, 16);
        let bad = Array4::<f64>::zeros((2, 1, 16, 16));
        assert!(model.encode(&bad).is_err());
        let tiny = Array4::<f64>::zeros((2, 3, 4, 4));
        assert!(model.encode(&tiny).is_err());
    }

    #[test]
    fn training_forward_updates_bn_eval_forward_does_not() {
        let model = tiny_model(16, 16);
        let set = synth_image_set(2, 4, 2, 16).unwrap();
        let d0 = model.state_digest();
        let _ = model.encode(&set.gather_f64(&[0, 1])).unwrap();
        assert_eq!(d0, model.state_digest());
        let x = Tensor::constant(set.gather_f64(&[0, 1]).into_dyn());
        let _ = model.encode_t(&x, true);
        assert_ne!(d0, model.state_digest());
    }

    #[test]
    fn gather_slice_matches_manual_copy() {
        let set = synth_image_set(1, 3, 2, 16).unwrap();
        let imgs = set.gather_f64(&[1, 2]);
        let direct = set.image_f64(1);
        assert_eq!(imgs.slice(s![0, .., .., ..]), direct.view());
    }
}
