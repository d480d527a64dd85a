//! The two classifier architectures and their checkpoints.
//!
//! The *baseline* scores a single 2-channel frame pair with a residual
//! encoder, global average pooling and a 1-unit sigmoid head. The *hybrid*
//! strips that head off, feeds every consecutive frame pair through the
//! encoder, aggregates the resulting feature maps over time with a
//! convolutional GRU, and scores the final hidden state with a fresh head.
//!
//! Two encoder variants exist: the full `resnet18` geometry (stages
//! 64-128-256-512, /32 downsample) and a `tiny` desk-scale variant (stages
//! 16-32-64, /8 downsample) that trains in minutes on a CPU. The resnet18
//! variant is still constructed shape-only in tests to pin down the
//! parameter budget of the temporal add-on.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nn::{BatchNorm2d, Conv2d, Init, Linear, Mode};
use crate::tensor::{
    read_parameter_container, write_parameter_container, Element, ParameterSet, Tensor,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("state mismatch: {0}")]
    State(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint container: {0}")]
    Container(#[from] crate::tensor::ContainerError),
    #[error("checkpoint metadata: {0}")]
    Meta(#[from] serde_json::Error),
}

// ── Configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderVariant {
    Resnet18,
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
}

impl EncoderConfig {
    pub fn resnet18() -> Self {
        EncoderConfig {
            variant: EncoderVariant::Resnet18,
            in_channels: 2,
            stage_channels: vec![64, 128, 256, 512],
            blocks_per_stage: 2,
        }
    }

    pub fn tiny() -> Self {
        EncoderConfig {
            variant: EncoderVariant::Tiny,
            in_channels: 2,
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: 1,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.in_channels == 0 {
            return Err(ModelError::Config("in_channels must be positive".into()));
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(ModelError::Config(format!(
                "stage channels must be positive: {:?}",
                self.stage_channels
            )));
        }
        if self.blocks_per_stage == 0 {
            return Err(ModelError::Config("blocks_per_stage must be positive".into()));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated non-empty")
    }

    /// Stride of the first block of stage `index`.
    fn stage_stride(&self, index: usize) -> usize {
        match self.variant {
            // Stem conv + maxpool already downsample ×4; stage 1 keeps extent.
            EncoderVariant::Resnet18 => {
                if index == 0 {
                    1
                } else {
                    2
                }
            }
            // Stride-1 stem; every stage halves, ×8 total over three stages.
            EncoderVariant::Tiny => 2,
        }
    }

    fn conv_extent(extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = extent + 2 * pad;
        if padded < k {
            return None;
        }
        Some((padded - k) / stride + 1)
    }

    /// Spatial extent of the encoder output for an `h × w` input. Errors if
    /// the feature map collapses below 2×2 anywhere.
    pub fn feature_extent(&self, h: usize, w: usize) -> Result<(usize, usize), ModelError> {
        let step = |label: &str, hw: (usize, usize), k, s, p| -> Result<(usize, usize), ModelError> {
            let collapse = || {
                ModelError::Config(format!(
                    "spatial extent collapses below 2x2 at {label} for input {h}x{w}"
                ))
            };
            let oh = Self::conv_extent(hw.0, k, s, p).ok_or_else(collapse)?;
            let ow = Self::conv_extent(hw.1, k, s, p).ok_or_else(collapse)?;
            if oh < 2 || ow < 2 {
                return Err(collapse());
            }
            Ok((oh, ow))
        };

        let mut hw = match self.variant {
            EncoderVariant::Resnet18 => {
                let s = step("stem conv", (h, w), 7, 2, 3)?;
                step("stem pool", s, 3, 2, 1)?
            }
            EncoderVariant::Tiny => step("stem conv", (h, w), 3, 1, 1)?,
        };
        for i in 0..self.stage_channels.len() {
            hw = step(&format!("stage {}", i + 1), hw, 3, self.stage_stride(i), 1)?;
        }
        Ok(hw)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGruConfig {
    pub input_channels: usize,
    pub hidden_channels: usize,
    pub kernel: usize,
}

impl ConvGruConfig {
    pub fn new(input_channels: usize, hidden_channels: usize, kernel: usize) -> Self {
        ConvGruConfig { input_channels, hidden_channels, kernel }
    }

    /// Default temporal head: 32 hidden channels, 3×3 gates. Against the
    /// full resnet18 baseline this lands the temporal add-on at ~4% of the
    /// baseline weights.
    pub fn default_for(encoder: &EncoderConfig) -> Self {
        Self::new(encoder.out_channels(), 32, 3)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden_channels == 0 {
            return Err(ModelError::Config(
                "hidden_channels = 0 is degenerate (the head would see no state)".into(),
            ));
        }
        if self.kernel % 2 == 0 {
            return Err(ModelError::Config(format!(
                "gate kernel must be odd to preserve extent, got {}",
                self.kernel
            )));
        }
        if self.input_channels == 0 {
            return Err(ModelError::Config("input_channels must be positive".into()));
        }
        Ok(())
    }
}

/// Architecture description stored in checkpoint metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum ArchConfig {
    Baseline { encoder: EncoderConfig },
    Hybrid { encoder: EncoderConfig, gru: ConvGruConfig },
}

// ── Encoder ──────────────────────────────────────────────────────────

struct BasicBlock<E: Element> {
    conv1: Conv2d<E>,
    bn1: BatchNorm2d<E>,
    conv2: Conv2d<E>,
    bn2: BatchNorm2d<E>,
    down: Option<(Conv2d<E>, BatchNorm2d<E>)>,
}

impl<E: Element> BasicBlock<E> {
    fn new(init: &Init, path: &str, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        let conv1 = Conv2d::new(init, &format!("{path}.conv1"), in_ch, out_ch, 3, stride, 1, false);
        let conv2 = Conv2d::new(init, &format!("{path}.conv2"), out_ch, out_ch, 3, 1, 1, false);
        let down = (stride != 1 || in_ch != out_ch).then(|| {
            (
                Conv2d::new(init, &format!("{path}.down.conv"), in_ch, out_ch, 1, stride, 0, false),
                BatchNorm2d::new(out_ch),
            )
        });
        BasicBlock { conv1, bn1: BatchNorm2d::new(out_ch), conv2, bn2: BatchNorm2d::new(out_ch), down }
    }

    fn forward(&self, x: &Tensor<E>, mode: Mode) -> Tensor<E> {
        let y = self.bn1.forward(&self.conv1.forward(x), mode).relu();
        let y = self.bn2.forward(&self.conv2.forward(&y), mode);
        let skip = match &self.down {
            Some((conv, bn)) => bn.forward(&conv.forward(x), mode),
            None => x.clone(),
        };
        y.add(&skip).relu()
    }

    fn register(&self, prefix: &str, params: &mut ParameterSet<E>) {
        self.conv1.register(&format!("{prefix}.conv1"), params);
        self.bn1.register(&format!("{prefix}.bn1"), params);
        self.conv2.register(&format!("{prefix}.conv2"), params);
        self.bn2.register(&format!("{prefix}.bn2"), params);
        if let Some((conv, bn)) = &self.down {
            conv.register(&format!("{prefix}.down.conv"), params);
            bn.register(&format!("{prefix}.down.bn"), params);
        }
    }

    fn bn_layers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a BatchNorm2d<E>)>) {
        out.push((format!("{prefix}.bn1"), &self.bn1));
        out.push((format!("{prefix}.bn2"), &self.bn2));
        if let Some((_, bn)) = &self.down {
            out.push((format!("{prefix}.down.bn"), bn));
        }
    }
}

pub struct Encoder<E: Element> {
    pub config: EncoderConfig,
    stem_conv: Conv2d<E>,
    stem_bn: BatchNorm2d<E>,
    stem_pool: bool,
    stages: Vec<Vec<BasicBlock<E>>>,
}

impl<E: Element> Encoder<E> {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let init = Init { seed };
        let stem_ch = config.stage_channels[0];
        let (stem_conv, stem_pool) = match config.variant {
            EncoderVariant::Resnet18 => (
                Conv2d::new(&init, "encoder.stem.conv", config.in_channels, stem_ch, 7, 2, 3, false),
                true,
            ),
            EncoderVariant::Tiny => (
                Conv2d::new(&init, "encoder.stem.conv", config.in_channels, stem_ch, 3, 1, 1, false),
                false,
            ),
        };
        let stem_bn = BatchNorm2d::new(stem_ch);

        let mut stages = Vec::new();
        let mut in_ch = stem_ch;
        for (i, &out_ch) in config.stage_channels.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..config.blocks_per_stage {
                let stride = if b == 0 { config.stage_stride(i) } else { 1 };
                let path = format!("encoder.stage{}.block{}", i + 1, b);
                blocks.push(BasicBlock::new(&init, &path, in_ch, out_ch, stride));
                in_ch = out_ch;
            }
            stages.push(blocks);
        }
        Ok(Encoder { config, stem_conv, stem_bn, stem_pool, stages })
    }

    /// `[N, in_channels, H, W] -> [N, C_last, h, w]` raw feature maps; no
    /// probability semantics.
    pub fn forward(&self, x: &Tensor<E>, mode: Mode) -> Tensor<E> {
        let mut y = self.stem_bn.forward(&self.stem_conv.forward(x), mode).relu();
        if self.stem_pool {
            y = y.maxpool2d(3, 2, 1);
        }
        for stage in &self.stages {
            for block in stage {
                y = block.forward(&y, mode);
            }
        }
        y
    }

    pub fn out_channels(&self) -> usize {
        self.config.out_channels()
    }

    pub fn params(&self) -> ParameterSet<E> {
        let mut params = ParameterSet::new();
        self.stem_conv.register("encoder.stem.conv", &mut params);
        self.stem_bn.register("encoder.stem.bn", &mut params);
        for (i, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                block.register(&format!("encoder.stage{}.block{}", i + 1, b), &mut params);
            }
        }
        params
    }

    fn bn_layers(&self) -> Vec<(String, &BatchNorm2d<E>)> {
        let mut out: Vec<(String, &BatchNorm2d<E>)> =
            vec![("encoder.stem.bn".to_string(), &self.stem_bn)];
        for (i, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                block.bn_layers(&format!("encoder.stage{}.block{}", i + 1, b), &mut out);
            }
        }
        out
    }
}

// ── Baseline ─────────────────────────────────────────────────────────

/// Frame-pair classifier: encoder → global average pool → linear → sigmoid.
pub struct Baseline<E: Element> {
    pub encoder: Encoder<E>,
    pub head: Linear<E>,
}

/// Build the frame-pair baseline with seeded initialization.
pub fn build_baseline<E: Element>(
    config: &EncoderConfig,
    seed: u64,
) -> Result<Baseline<E>, ModelError> {
    let encoder = Encoder::new(config.clone(), seed)?;
    let head = Linear::new(&Init { seed }, "head", config.out_channels(), 1);
    Ok(Baseline { encoder, head })
}

/// Detach the encoder from a baseline, dropping its classification head.
///
/// Ownership moves: the returned encoder aliases the baseline's parameter
/// tensors (no copies, so later fine-tuning updates are visible through any
/// retained handles), and the baseline is consumed, which makes stripping
/// twice unrepresentable.
pub fn strip_head<E: Element>(baseline: Baseline<E>) -> Encoder<E> {
    baseline.encoder
}

impl<E: Element> Baseline<E> {
    /// `[N, 2, H, W] -> [N, 1]` probabilities in (0,1).
    pub fn forward(&self, pairs: &Tensor<E>, mode: Mode) -> Tensor<E> {
        assert_eq!(
            pairs.shape()[1],
            self.encoder.config.in_channels,
            "baseline: expected {} input channels, got shape {:?}",
            self.encoder.config.in_channels,
            pairs.shape()
        );
        let features = self.encoder.forward(pairs, mode);
        self.head.forward(&features.global_avg_pool()).sigmoid()
    }

    /// Deterministic eval-mode score of one `[2, H, W]` frame pair.
    pub fn score_pair(&self, pair: &Tensor<E>) -> E {
        let (c, h, w) = match pair.shape() {
            [c, h, w] => (*c, *h, *w),
            s => panic!("score_pair: expected [2,H,W], got {s:?}"),
        };
        let batched = Tensor::from_vec(pair.to_vec(), &[1, c, h, w]);
        self.forward(&batched, Mode::Eval).item()
    }

    pub fn params(&self) -> ParameterSet<E> {
        let mut params = self.encoder.params();
        let mut head = ParameterSet::new();
        self.head.register("head", &mut head);
        params.extend(head);
        params
    }

    pub fn state_dict(&self) -> StateDict {
        state_dict_of(&self.params(), &self.encoder.bn_layers())
    }

    pub fn load_state(&self, dict: &StateDict) -> Result<(), ModelError> {
        load_state_into(dict, &self.params(), &self.encoder.bn_layers())
    }
}

// ── ConvGRU ──────────────────────────────────────────────────────────

/// Gated recurrent unit whose gate transforms are 2-D convolutions.
///
/// With update gate `z`, reset gate `r` and candidate `c`:
///
/// ```text
/// z  = σ(Wz∗x + Uz∗h + bz)
/// r  = σ(Wr∗x + Ur∗h + br)
/// c  = tanh(Wc∗x + Uc∗(r⊙h) + bc)
/// h' = (1−z)⊙h + z⊙c
/// ```
pub struct ConvGru<E: Element> {
    pub config: ConvGruConfig,
    xz: Conv2d<E>,
    hz: Conv2d<E>,
    xr: Conv2d<E>,
    hr: Conv2d<E>,
    xc: Conv2d<E>,
    hc: Conv2d<E>,
}

impl<E: Element> ConvGru<E> {
    pub fn new(config: ConvGruConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let init = Init { seed };
        let pad = (config.kernel - 1) / 2;
        let conv = |name: &str, in_ch: usize, bias: bool| {
            Conv2d::new(
                &init,
                &format!("gru.{name}"),
                in_ch,
                config.hidden_channels,
                config.kernel,
                1,
                pad,
                bias,
            )
        };
        Ok(ConvGru {
            xz: conv("xz", config.input_channels, true),
            hz: conv("hz", config.hidden_channels, false),
            xr: conv("xr", config.input_channels, true),
            hr: conv("hr", config.hidden_channels, false),
            xc: conv("xc", config.input_channels, true),
            hc: conv("hc", config.hidden_channels, false),
            config,
        })
    }

    /// One recurrence step; `x` and `h` must share spatial extent.
    pub fn step(&self, x: &Tensor<E>, h: &Tensor<E>) -> Tensor<E> {
        assert_eq!(
            (x.shape()[2], x.shape()[3]),
            (h.shape()[2], h.shape()[3]),
            "convgru: spatial extents differ: input {:?} vs hidden {:?}",
            x.shape(),
            h.shape()
        );
        let (z, _, c) = self.gates(x, h);
        z.affine(-E::one(), E::one()).mul(h).add(&z.mul(&c))
    }

    /// Gate activations `(z, r, c)` for one step.
    pub fn gates(&self, x: &Tensor<E>, h: &Tensor<E>) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
        let z = self.xz.forward(x).add(&self.hz.forward(h)).sigmoid();
        let r = self.xr.forward(x).add(&self.hr.forward(h)).sigmoid();
        let c = self.xc.forward(x).add(&self.hc.forward(&r.mul(h))).tanh_act();
        (z, r, c)
    }

    pub fn params(&self) -> ParameterSet<E> {
        let mut params = ParameterSet::new();
        self.xz.register("gru.xz", &mut params);
        self.hz.register("gru.hz", &mut params);
        self.xr.register("gru.xr", &mut params);
        self.hr.register("gru.hr", &mut params);
        self.xc.register("gru.xc", &mut params);
        self.hc.register("gru.hc", &mut params);
        params
    }
}

// ── Hybrid ───────────────────────────────────────────────────────────

/// Encoder + ConvGRU sequence classifier.
pub struct Hybrid<E: Element> {
    pub encoder: Encoder<E>,
    pub gru: ConvGru<E>,
    pub head: Linear<E>,
    encoder_pair_evals: Cell<u64>,
    gru_steps: Cell<u64>,
}

/// Assemble a hybrid around an (optionally pretrained) encoder; the ConvGRU
/// and head are freshly seeded.
pub fn build_hybrid<E: Element>(
    encoder: Encoder<E>,
    gru_config: &ConvGruConfig,
    seed: u64,
) -> Result<Hybrid<E>, ModelError> {
    if gru_config.input_channels != encoder.out_channels() {
        return Err(ModelError::Config(format!(
            "gru input channels {} do not match encoder output {}",
            gru_config.input_channels,
            encoder.out_channels()
        )));
    }
    let gru = ConvGru::new(gru_config.clone(), seed)?;
    let head = Linear::new(&Init { seed }, "head", gru_config.hidden_channels, 1);
    Ok(Hybrid { encoder, gru, head, encoder_pair_evals: Cell::new(0), gru_steps: Cell::new(0) })
}

impl<E: Element> Hybrid<E> {
    /// Score one series of `T ≥ 2` frames: consecutive frame pairs are
    /// encoded as 2-channel inputs, aggregated by exactly `T − 1` ConvGRU
    /// steps from a zero hidden state, and the final state is pooled and
    /// scored. Output lies strictly in (0,1).
    pub fn forward_series(&self, frames: &Tensor<E>, mode: Mode) -> Tensor<E> {
        let t = match frames.shape() {
            [t, _, _] => *t,
            s => panic!("forward_series: expected [T,H,W] frames, got {s:?}"),
        };
        assert!(t >= 2, "forward_series: need at least 2 frames, got {t}");

        let pairs = consecutive_pairs(frames);
        let features = self.encoder.forward(&pairs, mode);
        self.encoder_pair_evals.set(self.encoder_pair_evals.get() + (t as u64 - 1));

        let fshape = features.shape().to_vec();
        let mut state = Tensor::zeros(&[1, self.gru.config.hidden_channels, fshape[2], fshape[3]]);
        for step in 0..t - 1 {
            let x_t = features.slice_batch(step);
            state = self.gru.step(&x_t, &state);
            self.gru_steps.set(self.gru_steps.get() + 1);
        }
        self.head.forward(&state.global_avg_pool()).sigmoid()
    }

    /// Deterministic eval-mode probability for one series.
    pub fn score_series(&self, frames: &Tensor<E>) -> E {
        self.forward_series(frames, Mode::Eval).item()
    }

    /// `(encoder pair evaluations, recurrence steps)` since construction.
    pub fn counters(&self) -> (u64, u64) {
        (self.encoder_pair_evals.get(), self.gru_steps.get())
    }

    /// Parameters of the temporal add-on (ConvGRU gates + head).
    pub fn temporal_params(&self) -> ParameterSet<E> {
        let mut params = self.gru.params();
        let mut head = ParameterSet::new();
        self.head.register("head", &mut head);
        params.extend(head);
        params
    }

    pub fn params(&self) -> ParameterSet<E> {
        let mut params = self.encoder.params();
        params.extend(self.temporal_params());
        params
    }

    pub fn state_dict(&self) -> StateDict {
        state_dict_of(&self.params(), &self.encoder.bn_layers())
    }

    pub fn load_state(&self, dict: &StateDict) -> Result<(), ModelError> {
        load_state_into(dict, &self.params(), &self.encoder.bn_layers())
    }
}

/// `[T,H,W] -> [T-1, 2, H, W]`: channel 0 is frame t, channel 1 frame t+1.
pub fn consecutive_pairs<E: Element>(frames: &Tensor<E>) -> Tensor<E> {
    let (t, h, w) = match frames.shape() {
        [t, h, w] => (*t, *h, *w),
        s => panic!("consecutive_pairs: expected [T,H,W], got {s:?}"),
    };
    assert!(t >= 2, "consecutive_pairs: need at least 2 frames");
    let data = frames.data();
    let hw = h * w;
    let mut out = Vec::with_capacity((t - 1) * 2 * hw);
    for step in 0..t - 1 {
        out.extend_from_slice(&data[step * hw..(step + 1) * hw]);
        out.extend_from_slice(&data[(step + 1) * hw..(step + 2) * hw]);
    }
    Tensor::from_vec(out, &[t - 1, 2, h, w])
}

/// `[T,H,W] + (i,j) -> [2,H,W]` frame pair.
pub fn frame_pair<E: Element>(frames: &Tensor<E>, i: usize, j: usize) -> Tensor<E> {
    let (t, h, w) = match frames.shape() {
        [t, h, w] => (*t, *h, *w),
        s => panic!("frame_pair: expected [T,H,W], got {s:?}"),
    };
    assert!(i < t && j < t, "frame_pair: indices ({i},{j}) out of range for T={t}");
    let data = frames.data();
    let hw = h * w;
    let mut out = Vec::with_capacity(2 * hw);
    out.extend_from_slice(&data[i * hw..(i + 1) * hw]);
    out.extend_from_slice(&data[j * hw..(j + 1) * hw]);
    Tensor::from_vec(out, &[2, h, w])
}

/// Weight budget of the temporal add-on relative to the full baseline:
/// `count(gru + head) / count(baseline)`.
pub fn param_ratio<E: Element>(baseline: &Baseline<E>, hybrid: &Hybrid<E>) -> f64 {
    hybrid.temporal_params().count_params() as f64 / baseline.params().count_params() as f64
}

// ── State dictionaries and checkpoints ───────────────────────────────

/// Plain-data snapshot of one tensor (checkpoint precision: f32).
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Plain-data snapshot of model parameters and buffers. Unlike live models
/// it is `Send`, so fold workers can exchange checkpoints freely.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StateDict {
    entries: BTreeMap<String, TensorData>,
}

impl StateDict {
    pub fn insert(&mut self, path: impl Into<String>, data: TensorData) {
        let path = path.into();
        assert!(
            self.entries.insert(path.clone(), data).is_none(),
            "duplicate state path {path}"
        );
    }

    pub fn get(&self, path: &str) -> Option<&TensorData> {
        self.entries.get(path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorData)> {
        self.entries.iter()
    }

    /// Entries whose path starts with `prefix`, keeping full paths.
    pub fn subset(&self, prefix: &str) -> StateDict {
        StateDict {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// SHA-256 over paths, shapes and value bits.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (path, data) in &self.entries {
            hasher.update(path.as_bytes());
            hasher.update([0u8]);
            for &extent in &data.shape {
                hasher.update((extent as u32).to_le_bytes());
            }
            for &v in &data.values {
                hasher.update(v.to_le_bytes());
            }
        }
        crate::tensor::hex_string(&hasher.finalize())
    }

    fn to_parameter_set(&self) -> ParameterSet<f32> {
        let mut set = ParameterSet::new();
        for (path, data) in &self.entries {
            set.insert(path.clone(), Tensor::from_vec(data.values.clone(), &data.shape));
        }
        set
    }

    fn from_parameter_set<E: Element>(set: &ParameterSet<E>) -> StateDict {
        let mut dict = StateDict::default();
        for (path, tensor) in set.iter() {
            dict.insert(
                path.clone(),
                TensorData {
                    shape: tensor.shape().to_vec(),
                    values: tensor.data().iter().map(|&v| Element::to_f32(v)).collect(),
                },
            );
        }
        dict
    }
}

fn state_dict_of<E: Element>(
    params: &ParameterSet<E>,
    bn_layers: &[(String, &BatchNorm2d<E>)],
) -> StateDict {
    let mut dict = StateDict::from_parameter_set(params);
    for (prefix, bn) in bn_layers {
        for (name, values) in bn.buffers() {
            dict.insert(
                format!("{prefix}.{name}"),
                TensorData {
                    shape: vec![values.len()],
                    values: values.iter().map(|&v| Element::to_f32(v)).collect(),
                },
            );
        }
    }
    dict
}

fn load_state_into<E: Element>(
    dict: &StateDict,
    params: &ParameterSet<E>,
    bn_layers: &[(String, &BatchNorm2d<E>)],
) -> Result<(), ModelError> {
    let mut expected: Vec<String> = params.paths().cloned().collect();
    for (prefix, _) in bn_layers {
        expected.push(format!("{prefix}.running_mean"));
        expected.push(format!("{prefix}.running_var"));
    }
    let missing: Vec<&String> =
        expected.iter().filter(|path| dict.get(path).is_none()).collect();
    if !missing.is_empty() {
        return Err(ModelError::State(format!("missing entries: {missing:?}")));
    }
    if dict.len() != expected.len() {
        let expected_set: std::collections::BTreeSet<&String> = expected.iter().collect();
        let extra: Vec<&String> =
            dict.iter().map(|(k, _)| k).filter(|k| !expected_set.contains(k)).collect();
        return Err(ModelError::State(format!("unexpected entries: {extra:?}")));
    }

    for (path, tensor) in params.iter() {
        let data = dict.get(path).expect("checked above");
        if data.shape != tensor.shape() {
            return Err(ModelError::State(format!(
                "shape mismatch at {path}: checkpoint {:?} vs model {:?}",
                data.shape,
                tensor.shape()
            )));
        }
        let values: Vec<E> = data.values.iter().map(|&v| E::from_f32(v)).collect();
        tensor.set_data(&values);
    }
    for (prefix, bn) in bn_layers {
        let mean = dict.get(&format!("{prefix}.running_mean")).expect("checked above");
        let var = dict.get(&format!("{prefix}.running_var")).expect("checked above");
        let mean: Vec<E> = mean.values.iter().map(|&v| E::from_f32(v)).collect();
        let var: Vec<E> = var.values.iter().map(|&v| E::from_f32(v)).collect();
        bn.load_buffers(&mean, &var);
    }
    Ok(())
}

/// Checkpoint provenance, written as a JSON sidecar next to the container.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: ArchConfig,
    pub seed: u64,
    pub train_config_hash: String,
    pub fold: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub state: StateDict,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    /// Write `checkpoint.cgt` (parameter container) and `metadata.json`
    /// into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        fs::create_dir_all(dir)?;
        write_parameter_container(&self.state.to_parameter_set(), &dir.join("checkpoint.cgt"))?;
        let json = serde_json::to_string_pretty(&self.meta)?;
        fs::write(dir.join("metadata.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Checkpoint, ModelError> {
        let set = read_parameter_container::<f32>(&dir.join("checkpoint.cgt"))?;
        let meta: CheckpointMeta =
            serde_json::from_str(&fs::read_to_string(dir.join("metadata.json"))?)?;
        Ok(Checkpoint { state: StateDict::from_parameter_set(&set), meta })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn tiny_encoder_feature_geometry() {
        let cfg = EncoderConfig::tiny();
        assert_eq!(cfg.feature_extent(64, 48).unwrap(), (8, 6));
        let encoder = Encoder::<f32>::new(cfg, 1).unwrap();
        let x = Tensor::zeros(&[1, 2, 64, 48]);
        let y = encoder.forward(&x, Mode::Train);
        assert_eq!(y.shape(), &[1, 64, 8, 6]);
    }

    #[test]
    fn resnet18_feature_geometry() {
        let cfg = EncoderConfig::resnet18();
        // Clinical frame geometry: 256×192 downsampled ×32.
        assert_eq!(cfg.feature_extent(256, 192).unwrap(), (8, 6));
    }

    #[test]
    fn collapsed_extent_is_a_config_error() {
        let cfg = EncoderConfig::tiny();
        assert!(matches!(cfg.feature_extent(8, 8), Err(ModelError::Config(_))));
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let cfg = EncoderConfig::tiny();
        let a = build_baseline::<f32>(&cfg, 7).unwrap();
        let b = build_baseline::<f32>(&cfg, 7).unwrap();
        assert_eq!(a.state_dict().content_hash(), b.state_dict().content_hash());
        let c = build_baseline::<f32>(&cfg, 8).unwrap();
        assert_ne!(a.state_dict().content_hash(), c.state_dict().content_hash());
    }

    #[test]
    fn strip_head_drops_exactly_the_head() {
        let cfg = EncoderConfig::tiny();
        let baseline = build_baseline::<f32>(&cfg, 7).unwrap();
        let total = baseline.params().count_params();
        let c_last = cfg.out_channels();
        let encoder = strip_head(baseline);
        assert_eq!(encoder.params().count_params(), total - (c_last + 1));
    }

    #[test]
    fn strip_and_reattach_reproduces_baseline_bitwise() {
        let cfg = EncoderConfig::tiny();
        let baseline = build_baseline::<f32>(&cfg, 3).unwrap();
        let mut rng = crate::rng::stream(5, "input");
        let x = Tensor::from_vec(
            (0..2 * 2 * 24 * 24).map(|_| rng.gen_range(0.0f32..1.0)).collect(),
            &[2, 2, 24, 24],
        );
        let _ = baseline.forward(&x, Mode::Train); // initialize running stats
        let before: Vec<u32> =
            baseline.forward(&x, Mode::Eval).to_vec().iter().map(|v| v.to_bits()).collect();

        let head = Linear { weight: baseline.head.weight.clone(), bias: baseline.head.bias.clone() };
        let encoder = strip_head(baseline);
        let reattached = Baseline { encoder, head };
        let after: Vec<u32> =
            reattached.forward(&x, Mode::Eval).to_vec().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn convgru_zero_parameters_halve_the_state() {
        let cfg = ConvGruConfig::new(4, 3, 3);
        let gru = ConvGru::<f64>::new(cfg, 1).unwrap();
        for (_, p) in gru.params().iter() {
            p.set_data(&vec![0.0; p.numel()]);
        }
        let x = Tensor::from_vec((0..4 * 25).map(|i| i as f64 * 0.1).collect(), &[1, 4, 5, 5]);
        let h = Tensor::from_vec((0..3 * 25).map(|i| (i as f64).sin()).collect(), &[1, 3, 5, 5]);
        let next = gru.step(&x, &h);
        let expected: Vec<f64> = h.to_vec().iter().map(|v| 0.5 * v).collect();
        assert_eq!(next.to_vec(), expected, "0.5 scaling is exact in binary floating point");

        let zero_h = Tensor::zeros(&[1, 3, 5, 5]);
        assert_eq!(gru.step(&x, &zero_h).to_vec(), vec![0.0; 3 * 25]);
    }

    #[test]
    fn convgru_gates_are_bounded() {
        let cfg = ConvGruConfig::new(4, 3, 3);
        let gru = ConvGru::<f64>::new(cfg, 99).unwrap();
        let mut rng = crate::rng::stream(5, "gate.input");
        use rand::Rng;
        let x = Tensor::from_vec((0..4 * 16).map(|_| rng.gen_range(-3.0..3.0)).collect(), &[1, 4, 4, 4]);
        let h = Tensor::from_vec((0..3 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[1, 3, 4, 4]);
        let (z, r, c) = gru.gates(&x, &h);
        assert!(z.to_vec().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(r.to_vec().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(c.to_vec().iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn convgru_converges_on_repeated_input() {
        // Repeated identical inputs drive h toward a fixed point; the step
        // distance must shrink monotonically after burn-in.
        let cfg = ConvGruConfig::new(2, 3, 3);
        let gru = ConvGru::<f64>::new(cfg, 42).unwrap();
        let mut rng = crate::rng::stream(42, "fixed.input");
        use rand::Rng;
        let x = Tensor::from_vec((0..2 * 36).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[1, 2, 6, 6]);
        let mut h = Tensor::zeros(&[1, 3, 6, 6]);
        let mut distances = Vec::new();
        for _ in 0..100 {
            let next = gru.step(&x, &h);
            let d: f64 = next
                .to_vec()
                .iter()
                .zip(h.to_vec())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            distances.push(d);
            h = next;
        }
        let burn_in = 10;
        for w in distances[burn_in..].windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "distance increased: {} -> {}", w[0], w[1]);
        }
        assert!(distances[99] < distances[burn_in] * 0.5, "no contraction visible");
    }

    #[test]
    fn hybrid_two_frames_with_zero_temporal_weights() {
        let enc_cfg = EncoderConfig::tiny();
        let encoder = Encoder::<f32>::new(enc_cfg.clone(), 11).unwrap();
        let gru_cfg = ConvGruConfig::new(64, 8, 3);
        let hybrid = build_hybrid(encoder, &gru_cfg, 11).unwrap();
        for (_, p) in hybrid.temporal_params().iter() {
            p.set_data(&vec![0.0; p.numel()]);
        }
        hybrid.head.bias.set_data(&[0.25]);
        let frames = Tensor::from_vec(vec![0.3; 2 * 32 * 32], &[2, 32, 32]);
        // One step from zero state with zero gru weights keeps h = 0, so the
        // score is sigmoid(head bias).
        let p = hybrid.forward_series(&frames, Mode::Train).item();
        let expected = 1.0 / (1.0 + (-0.25f32).exp());
        assert!((p - expected).abs() < 1e-7, "{p} vs {expected}");
        assert_eq!(hybrid.counters(), (1, 1));
    }

    #[test]
    fn hybrid_performs_exactly_t_minus_1_steps() {
        let enc_cfg = EncoderConfig::tiny();
        let encoder = Encoder::<f32>::new(enc_cfg.clone(), 2).unwrap();
        let hybrid = build_hybrid(encoder, &ConvGruConfig::new(64, 4, 3), 2).unwrap();
        let t = 7;
        let frames = Tensor::from_vec(vec![0.5; t * 24 * 24], &[t, 24, 24]);
        let p = hybrid.forward_series(&frames, Mode::Train).item();
        assert!(p > 0.0 && p < 1.0);
        assert_eq!(hybrid.counters(), ((t as u64) - 1, (t as u64) - 1));
    }

    #[test]
    fn hybrid_rejects_single_frame() {
        let encoder = Encoder::<f32>::new(EncoderConfig::tiny(), 2).unwrap();
        let hybrid = build_hybrid(encoder, &ConvGruConfig::new(64, 4, 3), 2).unwrap();
        let frames = Tensor::from_vec(vec![0.5; 16 * 16], &[1, 16, 16]);
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            hybrid.forward_series(&frames, Mode::Train)
        }));
        assert!(result.is_err());
    }

    #[test]
    fn degenerate_gru_config_is_rejected() {
        assert!(ConvGruConfig::new(64, 0, 3).validate().is_err());
        assert!(ConvGruConfig::new(64, 8, 4).validate().is_err());
        assert!(ConvGruConfig::new(64, 8, 3).validate().is_ok());
    }

    #[test]
    fn state_dict_round_trips_through_checkpoint_files() {
        let dir = tempfile::tempdir().unwrap();
        let baseline = build_baseline::<f32>(&EncoderConfig::tiny(), 13).unwrap();
        // Touch running stats so buffers are non-trivial.
        let x = Tensor::from_vec(vec![0.1; 2 * 2 * 16 * 16], &[2, 2, 16, 16]);
        let _ = baseline.forward(&x, Mode::Train);

        let checkpoint = Checkpoint {
            state: baseline.state_dict(),
            meta: CheckpointMeta {
                arch: ArchConfig::Baseline { encoder: EncoderConfig::tiny() },
                seed: 13,
                train_config_hash: "deadbeef".into(),
                fold: 2,
            },
        };
        checkpoint.save(dir.path()).unwrap();
        let loaded = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(loaded.state.content_hash(), checkpoint.state.content_hash());
        assert_eq!(loaded.meta.fold, 2);

        let restored = build_baseline::<f32>(&EncoderConfig::tiny(), 999).unwrap();
        restored.load_state(&loaded.state).unwrap();
        assert_eq!(restored.state_dict().content_hash(), checkpoint.state.content_hash());
    }

    #[test]
    fn load_state_rejects_missing_and_extra_entries() {
        let baseline = build_baseline::<f32>(&EncoderConfig::tiny(), 13).unwrap();
        let mut dict = baseline.state_dict();
        assert!(baseline.load_state(&StateDict::default()).is_err());
        dict.insert("bogus.weight", TensorData { shape: vec![1], values: vec![0.0] });
        assert!(matches!(baseline.load_state(&dict), Err(ModelError::State(_))));
    }
}
