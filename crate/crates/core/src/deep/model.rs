//! Model structure for the end-to-end path: per-stream framewise encoder,
//! shared node projection, pyramid weight bundles, optional multi-pyramid
//! reduction stack, batch-norm + linear + softmax head, and the two-stream
//! fusion weights.
//!
//! Parameters are plain `ndarray` fields; a canonical tensor table drives
//! flattening (for the optimizer and the gradient checker) and the binary
//! checkpoint container.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Activation, BatchNorm, Dense, DenseGrad};
use crate::error::{Error, Result};
use crate::pyramid::Stream;
use crate::simplex;

/// Aggregation variant of the pyramid output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggVariant {
    Concat,
    Average,
}

/// Framewise encoder shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderKind {
    /// Frames pass through unchanged (use when features come from a real
    /// backbone).
    Identity,
    /// Single affine layer, no nonlinearity.
    Linear,
    /// Two affine layers with a nonlinearity after each.
    TwoLayer { activation: Activation },
}

/// Which streams the loss (and the optimizer) touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamMode {
    Motion,
    Appearance,
    Joint,
}

impl StreamMode {
    pub fn trains(self, stream: Stream) -> bool {
        matches!(
            (self, stream),
            (StreamMode::Joint, _)
                | (StreamMode::Motion, Stream::Motion)
                | (StreamMode::Appearance, Stream::Appearance)
        )
    }
}

/// Everything needed to rebuild the network shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub classes: usize,
    pub depth: usize,
    pub pyramids: usize,
    pub variant: AggVariant,
    pub encoder: EncoderKind,
    pub d_in_motion: usize,
    pub d_in_appearance: usize,
    pub d_enc: usize,
    pub node_dim: usize,
    /// Output width of the multi-pyramid reduction stack.
    pub reduce_target: usize,
    pub stream_mode: StreamMode,
}

/// Trainable-parameter ceiling: the optimizer keeps several flat copies of
/// the model, so much beyond this the process outgrows ordinary workstation
/// memory. Reached only by stacking several wide pyramids at full depth.
pub const MAX_TRAINABLE_PARAMS: usize = 50_000_000;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if self.depth == 0 || self.pyramids == 0 {
            return Err(Error::invalid("depth and pyramid count must be >= 1"));
        }
        if self.d_in_motion == 0 || self.d_in_appearance == 0 {
            return Err(Error::invalid("input dimensions must be >= 1"));
        }
        if self.node_dim == 0 || self.reduce_target == 0 {
            return Err(Error::invalid("node_dim and reduce_target must be >= 1"));
        }
        match self.encoder {
            EncoderKind::Identity => {}
            _ if self.d_enc == 0 => {
                return Err(Error::invalid("d_enc must be >= 1 for a learned encoder"))
            }
            _ => {}
        }
        let params = self.trainable_param_estimate();
        if params > MAX_TRAINABLE_PARAMS {
            return Err(Error::invalid(format!(
                "model would have {params} trainable parameters (limit {MAX_TRAINABLE_PARAMS}); \
                 reduce pyramids, node_dim or depth — the multi-pyramid reduction stack's first \
                 layer dominates"
            )));
        }
        Ok(())
    }

    /// Trainable parameter count of the model this config builds.
    pub fn trainable_param_estimate(&self) -> usize {
        let mut total = 2; // fusion
        for d_in in [self.d_in_motion, self.d_in_appearance] {
            let enc_out = self.encoder_out(d_in);
            total += match self.encoder {
                EncoderKind::Identity => 0,
                EncoderKind::Linear => self.d_enc * d_in + self.d_enc,
                EncoderKind::TwoLayer { .. } => {
                    self.d_enc * d_in + self.d_enc + self.d_enc * self.d_enc + self.d_enc
                }
            };
            total += self.node_dim * enc_out + self.node_dim;
            total += self.pyramids * self.node_count();
            if self.pyramids > 1 {
                let plan = build_multi_pyramid_head(
                    self.pyramids,
                    self.node_dim,
                    self.depth,
                    self.variant,
                    self.reduce_target,
                );
                let mut width = plan.input_width;
                for &next in &plan.hidden_widths {
                    total += next * width + next + 2 * next;
                    width = next;
                }
                total += plan.output_width * width + plan.output_width;
            }
            let head_in = self.head_input_width();
            total += 2 * head_in + self.classes * head_in + self.classes;
        }
        total
    }

    pub fn node_count(&self) -> usize {
        (1usize << self.depth) - 1
    }

    pub fn encoder_out(&self, d_in: usize) -> usize {
        match self.encoder {
            EncoderKind::Identity => d_in,
            _ => self.d_enc,
        }
    }

    /// Width of one pyramid's aggregated output.
    pub fn agg_width(&self) -> usize {
        match self.variant {
            AggVariant::Concat => self.node_count() * self.node_dim,
            AggVariant::Average => self.node_dim,
        }
    }

    /// Width entering the head batch-norm.
    pub fn head_input_width(&self) -> usize {
        if self.pyramids == 1 {
            self.agg_width()
        } else {
            self.reduce_target
        }
    }
}

/// Width plan of the multi-pyramid reduction stack: repeated halving
/// (FC+ReLU+BatchNorm) while the width exceeds the target, then one final FC
/// onto the target width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReductionPlan {
    pub input_width: usize,
    pub hidden_widths: Vec<usize>,
    pub output_width: usize,
}

/// Reduction widths for `pyramids` stacked pyramid outputs.
pub fn build_multi_pyramid_head(
    pyramids: usize,
    node_dim: usize,
    depth: usize,
    variant: AggVariant,
    target: usize,
) -> ReductionPlan {
    let node_count = (1usize << depth) - 1;
    let per_pyramid = match variant {
        AggVariant::Concat => node_count * node_dim,
        AggVariant::Average => node_dim,
    };
    let input_width = per_pyramid * pyramids;
    let mut hidden_widths = Vec::new();
    let mut width = input_width;
    while width > target {
        width = width.div_ceil(2);
        hidden_widths.push(width);
    }
    ReductionPlan {
        input_width,
        hidden_widths,
        output_width: target,
    }
}

/// One halving stage of the reduction stack: FC, then ReLU, then batch norm.
#[derive(Debug, Clone)]
pub struct ReductionLayer {
    pub fc: Dense,
    pub bn: BatchNorm,
}

#[derive(Debug, Clone)]
pub struct ReductionStack {
    pub layers: Vec<ReductionLayer>,
    pub final_fc: Dense,
}

impl ReductionStack {
    fn build(plan: &ReductionPlan, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::new();
        let mut width = plan.input_width;
        for &next in &plan.hidden_widths {
            layers.push(ReductionLayer {
                fc: Dense::xavier(next, width, rng),
                bn: BatchNorm::new(next),
            });
            width = next;
        }
        ReductionStack {
            layers,
            final_fc: Dense::xavier(plan.output_width, width, rng),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub dense: Dense,
    pub act: Activation,
}

/// Framewise feature map applied independently to every frame row.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
}

/// Per-layer activations kept for the backward pass: `acts[0]` is the input,
/// `acts[i + 1]` the output of layer `i`.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    pub acts: Vec<Array2<f64>>,
}

impl Encoder {
    pub fn build(kind: EncoderKind, d_in: usize, d_enc: usize, rng: &mut ChaCha8Rng) -> Self {
        let layers = match kind {
            EncoderKind::Identity => Vec::new(),
            EncoderKind::Linear => vec![EncoderLayer {
                dense: Dense::xavier(d_enc, d_in, rng),
                act: Activation::Identity,
            }],
            EncoderKind::TwoLayer { activation } => vec![
                EncoderLayer {
                    dense: Dense::xavier(d_enc, d_in, rng),
                    act: activation,
                },
                EncoderLayer {
                    dense: Dense::xavier(d_enc, d_enc, rng),
                    act: activation,
                },
            ],
        };
        Encoder { layers }
    }

    pub fn forward(&self, frames: ArrayView2<'_, f64>) -> EncoderCache {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(frames.to_owned());
        for layer in &self.layers {
            let mut out = layer.dense.forward(acts.last().unwrap().view());
            layer.act.apply_inplace(&mut out);
            acts.push(out);
        }
        EncoderCache { acts }
    }

    /// Gradients of every layer given the gradient at the encoder output;
    /// returns the gradient at the raw frame input.
    pub fn backward(
        &self,
        cache: &EncoderCache,
        grad_out: Array2<f64>,
        grads: &mut [DenseGrad],
    ) -> Array2<f64> {
        assert_eq!(grads.len(), self.layers.len());
        let mut grad = grad_out;
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let output = &cache.acts[idx + 1];
            // through the activation, from cached outputs
            let mut pre = grad;
            pre.zip_mut_with(output, |g, &y| *g *= layer.act.grad_from_output(y));
            grad = layer.dense.backward(cache.acts[idx].view(), pre.view(), &mut grads[idx]);
        }
        grad
    }

    pub fn zero_grads(&self) -> Vec<DenseGrad> {
        self.layers.iter().map(|l| l.dense.zero_grad()).collect()
    }
}

/// One stream's full parameter set.
#[derive(Debug, Clone)]
pub struct StreamModel {
    pub stream: Stream,
    pub encoder: Encoder,
    pub proj: Dense,
    /// P free weight bundles, each of length `node_count`; the simplex
    /// weights are their softmax.
    pub pyramid_free: Vec<Array1<f64>>,
    pub reduction: Option<ReductionStack>,
    pub head_bn: BatchNorm,
    pub head_fc: Dense,
}

impl StreamModel {
    fn build(config: &ModelConfig, stream: Stream, rng: &mut ChaCha8Rng) -> Self {
        let d_in = match stream {
            Stream::Motion => config.d_in_motion,
            Stream::Appearance => config.d_in_appearance,
        };
        let encoder = Encoder::build(config.encoder, d_in, config.d_enc, rng);
        let proj = Dense::xavier(config.node_dim, config.encoder_out(d_in), rng);
        let pyramid_free = (0..config.pyramids)
            .map(|_| Array1::zeros(config.node_count()))
            .collect();
        let reduction = if config.pyramids > 1 {
            let plan = build_multi_pyramid_head(
                config.pyramids,
                config.node_dim,
                config.depth,
                config.variant,
                config.reduce_target,
            );
            Some(ReductionStack::build(&plan, rng))
        } else {
            None
        };
        let head_in = config.head_input_width();
        StreamModel {
            stream,
            encoder,
            proj,
            pyramid_free,
            reduction,
            head_bn: BatchNorm::new(head_in),
            head_fc: Dense::xavier(config.classes, head_in, rng),
        }
    }

    /// Normalized weights of pyramid `p`.
    pub fn pyramid_weights(&self, p: usize) -> Array1<f64> {
        simplex::normalize(self.pyramid_free[p].view()).expect("finite free weights")
    }
}

/// The full two-stream network.
#[derive(Debug, Clone)]
pub struct DeepModel {
    pub config: ModelConfig,
    pub motion: StreamModel,
    pub appearance: StreamModel,
    /// Free fusion parameters, softmaxed to `(w_motion, w_appearance)`.
    pub fusion_free: Array1<f64>,
}

/// Optimizer grouping of a parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Motion,
    Appearance,
    Fusion,
}

/// One named trainable block in the canonical flat layout.
#[derive(Debug, Clone)]
pub struct BlockSpec {
    pub name: String,
    pub len: usize,
    pub offset: usize,
    /// Whether l2 weight decay applies (free simplex parameters are exempt).
    pub decay: bool,
    pub group: ParamGroup,
}

enum TensorRef<'a> {
    A1(&'a Array1<f64>),
    A2(&'a Array2<f64>),
}

enum TensorMut<'a> {
    A1(&'a mut Array1<f64>),
    A2(&'a mut Array2<f64>),
}

impl TensorRef<'_> {
    fn len(&self) -> usize {
        match self {
            TensorRef::A1(a) => a.len(),
            TensorRef::A2(a) => a.len(),
        }
    }

    fn dims(&self) -> Vec<u64> {
        match self {
            TensorRef::A1(a) => vec![a.len() as u64],
            TensorRef::A2(a) => vec![a.nrows() as u64, a.ncols() as u64],
        }
    }

    fn values(&self) -> Vec<f64> {
        match self {
            TensorRef::A1(a) => a.to_vec(),
            TensorRef::A2(a) => a.iter().copied().collect(),
        }
    }
}

/// Tensor metadata: trainable blocks carry decay/group flags; running
/// batch-norm statistics are state, saved in checkpoints but never updated
/// by the optimizer.
struct TensorEntry<'a> {
    name: String,
    trainable: bool,
    decay: bool,
    group: ParamGroup,
    tensor: TensorRef<'a>,
}

struct TensorEntryMut<'a> {
    name: String,
    trainable: bool,
    tensor: TensorMut<'a>,
}

fn stream_entries<'a>(prefix: &str, group: ParamGroup, s: &'a StreamModel) -> Vec<TensorEntry<'a>> {
    let mut out = Vec::new();
    let mut push = |name: String, decay: bool, tensor: TensorRef<'a>| {
        out.push(TensorEntry {
            name,
            trainable: true,
            decay,
            group,
            tensor,
        });
    };
    for (i, layer) in s.encoder.layers.iter().enumerate() {
        push(format!("{prefix}.encoder.{i}.w"), true, TensorRef::A2(&layer.dense.w));
        push(format!("{prefix}.encoder.{i}.b"), true, TensorRef::A1(&layer.dense.b));
    }
    push(format!("{prefix}.proj.w"), true, TensorRef::A2(&s.proj.w));
    push(format!("{prefix}.proj.b"), true, TensorRef::A1(&s.proj.b));
    for (p, free) in s.pyramid_free.iter().enumerate() {
        push(format!("{prefix}.pyramid.{p}.free"), false, TensorRef::A1(free));
    }
    if let Some(red) = &s.reduction {
        for (i, layer) in red.layers.iter().enumerate() {
            push(format!("{prefix}.reduce.{i}.fc.w"), true, TensorRef::A2(&layer.fc.w));
            push(format!("{prefix}.reduce.{i}.fc.b"), true, TensorRef::A1(&layer.fc.b));
            push(format!("{prefix}.reduce.{i}.bn.gamma"), true, TensorRef::A1(&layer.bn.gamma));
            push(format!("{prefix}.reduce.{i}.bn.beta"), true, TensorRef::A1(&layer.bn.beta));
        }
        push(format!("{prefix}.reduce.final.w"), true, TensorRef::A2(&red.final_fc.w));
        push(format!("{prefix}.reduce.final.b"), true, TensorRef::A1(&red.final_fc.b));
    }
    push(format!("{prefix}.head.bn.gamma"), true, TensorRef::A1(&s.head_bn.gamma));
    push(format!("{prefix}.head.bn.beta"), true, TensorRef::A1(&s.head_bn.beta));
    push(format!("{prefix}.head.fc.w"), true, TensorRef::A2(&s.head_fc.w));
    push(format!("{prefix}.head.fc.b"), true, TensorRef::A1(&s.head_fc.b));
    // running statistics: checkpointed, not trained
    let mut push_state = |name: String, tensor: TensorRef<'a>| {
        out.push(TensorEntry {
            name,
            trainable: false,
            decay: false,
            group,
            tensor,
        });
    };
    if let Some(red) = &s.reduction {
        for (i, layer) in red.layers.iter().enumerate() {
            push_state(format!("{prefix}.reduce.{i}.bn.running_mean"), TensorRef::A1(&layer.bn.running_mean));
            push_state(format!("{prefix}.reduce.{i}.bn.running_var"), TensorRef::A1(&layer.bn.running_var));
        }
    }
    push_state(format!("{prefix}.head.bn.running_mean"), TensorRef::A1(&s.head_bn.running_mean));
    push_state(format!("{prefix}.head.bn.running_var"), TensorRef::A1(&s.head_bn.running_var));
    out
}

fn stream_entries_mut<'a>(prefix: &str, s: &'a mut StreamModel) -> Vec<TensorEntryMut<'a>> {
    let mut out = Vec::new();
    for (i, layer) in s.encoder.layers.iter_mut().enumerate() {
        out.push(TensorEntryMut {
            name: format!("{prefix}.encoder.{i}.w"),
            trainable: true,
            tensor: TensorMut::A2(&mut layer.dense.w),
        });
        out.push(TensorEntryMut {
            name: format!("{prefix}.encoder.{i}.b"),
            trainable: true,
            tensor: TensorMut::A1(&mut layer.dense.b),
        });
    }
    out.push(TensorEntryMut {
        name: format!("{prefix}.proj.w"),
        trainable: true,
        tensor: TensorMut::A2(&mut s.proj.w),
    });
    out.push(TensorEntryMut {
        name: format!("{prefix}.proj.b"),
        trainable: true,
        tensor: TensorMut::A1(&mut s.proj.b),
    });
    for (p, free) in s.pyramid_free.iter_mut().enumerate() {
        out.push(TensorEntryMut {
            name: format!("{prefix}.pyramid.{p}.free"),
            trainable: true,
            tensor: TensorMut::A1(free),
        });
    }
    if let Some(red) = &mut s.reduction {
        // running statistics interleave with the trainables here; only the
        // relative order of trainable entries matters for the flat layout
        for (i, layer) in red.layers.iter_mut().enumerate() {
            out.push(TensorEntryMut {
                name: format!("{prefix}.reduce.{i}.fc.w"),
                trainable: true,
                tensor: TensorMut::A2(&mut layer.fc.w),
            });
            out.push(TensorEntryMut {
                name: format!("{prefix}.reduce.{i}.fc.b"),
                trainable: true,
                tensor: TensorMut::A1(&mut layer.fc.b),
            });
            out.push(TensorEntryMut {
                name: format!("{prefix}.reduce.{i}.bn.gamma"),
                trainable: true,
                tensor: TensorMut::A1(&mut layer.bn.gamma),
            });
            out.push(TensorEntryMut {
                name: format!("{prefix}.reduce.{i}.bn.beta"),
                trainable: true,
                tensor: TensorMut::A1(&mut layer.bn.beta),
            });
            out.push(TensorEntryMut {
                name: format!("{prefix}.reduce.{i}.bn.running_mean"),
                trainable: false,
                tensor: TensorMut::A1(&mut layer.bn.running_mean),
            });
            out.push(TensorEntryMut {
                name: format!("{prefix}.reduce.{i}.bn.running_var"),
                trainable: false,
                tensor: TensorMut::A1(&mut layer.bn.running_var),
            });
        }
        out.push(TensorEntryMut {
            name: format!("{prefix}.reduce.final.w"),
            trainable: true,
            tensor: TensorMut::A2(&mut red.final_fc.w),
        });
        out.push(TensorEntryMut {
            name: format!("{prefix}.reduce.final.b"),
            trainable: true,
            tensor: TensorMut::A1(&mut red.final_fc.b),
        });
    }
    out.push(TensorEntryMut {
        name: format!("{prefix}.head.bn.gamma"),
        trainable: true,
        tensor: TensorMut::A1(&mut s.head_bn.gamma),
    });
    out.push(TensorEntryMut {
        name: format!("{prefix}.head.bn.beta"),
        trainable: true,
        tensor: TensorMut::A1(&mut s.head_bn.beta),
    });
    out.push(TensorEntryMut {
        name: format!("{prefix}.head.fc.w"),
        trainable: true,
        tensor: TensorMut::A2(&mut s.head_fc.w),
    });
    out.push(TensorEntryMut {
        name: format!("{prefix}.head.fc.b"),
        trainable: true,
        tensor: TensorMut::A1(&mut s.head_fc.b),
    });
    out.push(TensorEntryMut {
        name: format!("{prefix}.head.bn.running_mean"),
        trainable: false,
        tensor: TensorMut::A1(&mut s.head_bn.running_mean),
    });
    out.push(TensorEntryMut {
        name: format!("{prefix}.head.bn.running_var"),
        trainable: false,
        tensor: TensorMut::A1(&mut s.head_bn.running_var),
    });
    out
}

const CHECKPOINT_MAGIC: [u8; 4] = *b"PYRA";
const CHECKPOINT_VERSION: u32 = 1;

impl DeepModel {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let motion = StreamModel::build(config, Stream::Motion, &mut rng);
        let appearance = StreamModel::build(config, Stream::Appearance, &mut rng);
        Ok(DeepModel {
            config: config.clone(),
            motion,
            appearance,
            fusion_free: Array1::zeros(2),
        })
    }

    pub fn stream(&self, stream: Stream) -> &StreamModel {
        match stream {
            Stream::Motion => &self.motion,
            Stream::Appearance => &self.appearance,
        }
    }

    /// Fusion weights `(w_motion, w_appearance)`.
    pub fn fusion_weights(&self) -> Array1<f64> {
        simplex::normalize(self.fusion_free.view()).expect("finite fusion weights")
    }

    fn entries(&self) -> Vec<TensorEntry<'_>> {
        let mut out = stream_entries("motion", ParamGroup::Motion, &self.motion);
        out.extend(stream_entries("appearance", ParamGroup::Appearance, &self.appearance));
        out.push(TensorEntry {
            name: "fusion.free".into(),
            trainable: true,
            decay: false,
            group: ParamGroup::Fusion,
            tensor: TensorRef::A1(&self.fusion_free),
        });
        out
    }

    fn entries_mut(&mut self) -> Vec<TensorEntryMut<'_>> {
        let mut out = stream_entries_mut("motion", &mut self.motion);
        out.extend(stream_entries_mut("appearance", &mut self.appearance));
        out.push(TensorEntryMut {
            name: "fusion.free".into(),
            trainable: true,
            tensor: TensorMut::A1(&mut self.fusion_free),
        });
        out
    }

    /// Canonical trainable layout: names, flat offsets, decay flags, groups.
    pub fn params_spec(&self) -> Vec<BlockSpec> {
        let mut specs = Vec::new();
        let mut offset = 0;
        for e in self.entries().into_iter().filter(|e| e.trainable) {
            let len = e.tensor.len();
            specs.push(BlockSpec {
                name: e.name,
                len,
                offset,
                decay: e.decay,
                group: e.group,
            });
            offset += len;
        }
        specs
    }

    pub fn param_count(&self) -> usize {
        self.entries()
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    /// All trainable parameters in canonical order.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for e in self.entries().into_iter().filter(|e| e.trainable) {
            out.extend(e.tensor.values());
        }
        out
    }

    /// Write a flat vector (canonical order) back into the model.
    pub fn load_params(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.param_count();
        if flat.len() != expected {
            return Err(Error::invalid(format!(
                "parameter vector has {} entries, model needs {expected}",
                flat.len()
            )));
        }
        let mut cursor = 0;
        for e in self.entries_mut().into_iter().filter(|e| e.trainable) {
            match e.tensor {
                TensorMut::A1(a) => {
                    let len = a.len();
                    for (dst, src) in a.iter_mut().zip(&flat[cursor..cursor + len]) {
                        *dst = *src;
                    }
                    cursor += len;
                }
                TensorMut::A2(a) => {
                    let len = a.len();
                    for (dst, src) in a.iter_mut().zip(&flat[cursor..cursor + len]) {
                        *dst = *src;
                    }
                    cursor += len;
                }
            }
        }
        Ok(())
    }

    /// True if every parameter and running statistic is finite.
    pub fn all_finite(&self) -> bool {
        self.entries()
            .iter()
            .all(|e| e.tensor.values().iter().all(|v| v.is_finite()))
    }

    /// Binary checkpoint: magic, version, config JSON, then named f64
    /// tensors (little-endian) with shape headers.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        let config = serde_json::to_vec(&self.config)?;
        w.write_u32::<LittleEndian>(config.len() as u32)?;
        w.write_all(&config)?;
        let entries = self.entries();
        w.write_u32::<LittleEndian>(entries.len() as u32)?;
        for e in entries {
            let name = e.name.as_bytes();
            w.write_u16::<LittleEndian>(name.len() as u16)?;
            w.write_all(name)?;
            let dims = e.tensor.dims();
            w.write_u8(dims.len() as u8)?;
            for d in &dims {
                w.write_u64::<LittleEndian>(*d)?;
            }
            for v in e.tensor.values() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let fmt = |offset: u64, reason: String| Error::Format {
            path: path.to_path_buf(),
            offset,
            reason,
        };
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| fmt(0, "file too short for magic".into()))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(fmt(0, format!("bad magic {magic:?}")));
        }
        let version = r
            .read_u32::<LittleEndian>()
            .map_err(|_| fmt(4, "truncated version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(fmt(4, format!("unsupported checkpoint version {version}")));
        }
        let config_len = r
            .read_u32::<LittleEndian>()
            .map_err(|_| fmt(8, "truncated config length".into()))? as usize;
        let mut config_bytes = vec![0u8; config_len];
        r.read_exact(&mut config_bytes)
            .map_err(|_| fmt(12, "truncated config".into()))?;
        let config: ModelConfig = serde_json::from_slice(&config_bytes)?;
        let mut model = DeepModel::init(&config, 0)?;

        let count = r
            .read_u32::<LittleEndian>()
            .map_err(|_| fmt(0, "truncated tensor count".into()))? as usize;
        let mut loaded: std::collections::HashMap<String, Vec<f64>> =
            std::collections::HashMap::new();
        for _ in 0..count {
            let name_len = r
                .read_u16::<LittleEndian>()
                .map_err(|_| fmt(0, "truncated tensor name length".into()))?
                as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)
                .map_err(|_| fmt(0, "truncated tensor name".into()))?;
            let name = String::from_utf8(name)
                .map_err(|_| fmt(0, "tensor name is not utf-8".into()))?;
            let ndim = r
                .read_u8()
                .map_err(|_| fmt(0, format!("{name}: truncated rank")))?;
            let mut len = 1usize;
            for _ in 0..ndim {
                len = len
                    .saturating_mul(r.read_u64::<LittleEndian>().map_err(|_| {
                        fmt(0, format!("{name}: truncated shape"))
                    })? as usize);
            }
            let mut values = vec![0f64; len];
            r.read_f64_into::<LittleEndian>(&mut values)
                .map_err(|_| fmt(0, format!("{name}: truncated payload")))?;
            loaded.insert(name, values);
        }

        for e in model.entries_mut() {
            let values = loaded.remove(&e.name).ok_or_else(|| {
                Error::data(format!("checkpoint is missing tensor {}", e.name))
            })?;
            let write = |dst: &mut [f64]| -> Result<()> {
                if dst.len() != values.len() {
                    return Err(Error::data(format!(
                        "tensor {} has {} values, model expects {}",
                        e.name,
                        values.len(),
                        dst.len()
                    )));
                }
                dst.copy_from_slice(&values);
                Ok(())
            };
            match e.tensor {
                TensorMut::A1(a) => write(a.as_slice_mut().expect("contiguous"))?,
                TensorMut::A2(a) => write(a.as_slice_mut().expect("contiguous"))?,
            }
        }
        if let Some(extra) = loaded.keys().next() {
            return Err(Error::data(format!("checkpoint has unknown tensor {extra}")));
        }
        Ok(model)
    }
}
