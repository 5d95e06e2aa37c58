//! Per-stream forward and backward passes.
//!
//! A training batch flows as: framewise encoder -> per-node mean descriptors
//! (over the scheduled frames, when an epoch schedule is active) -> shared
//! linear projection -> weighted aggregation per pyramid bundle -> optional
//! multi-pyramid reduction stack -> batch norm -> linear -> softmax.
//!
//! Every backward is hand-derived. Node means make the frame gradient a
//! membership-weighted redistribution: each frame of a node receives the
//! node's upstream gradient divided by the node population, and empty nodes
//! are transparent to both passes.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::layers::{softmax_backward_row, softmax_rows, BnCache, BnGrad, DenseGrad};
use super::model::{AggVariant, DeepModel, Encoder, EncoderCache, ModelConfig, StreamModel};
use crate::error::{Error, Result};
use crate::pyramid::{build_partition, node_descriptors, pool_backward, MembershipTable};
use crate::simplex;

/// One video's slice of a training batch: full frame features plus the
/// subset of frames this epoch touches (`None` = all frames).
pub struct BatchVideo<'a> {
    pub features: ArrayView2<'a, f64>,
    pub selected: Option<&'a [usize]>,
}

/// Per-video forward state up to the head input.
pub struct VideoForward {
    pub encoder: EncoderCache,
    pub table: MembershipTable,
    pub node_desc: Array2<f64>,
    /// Projected node descriptors; rows of empty nodes are zero.
    pub projected: Array2<f64>,
    /// Concatenation of the P aggregated pyramid outputs.
    pub head_in: Array1<f64>,
}

/// Forward state of the reduction stack for one batch.
pub struct ReductionForward {
    /// Input to each halving layer.
    pub inputs: Vec<Array2<f64>>,
    /// ReLU outputs per halving layer (input to that layer's batch norm).
    pub relu_outs: Vec<Array2<f64>>,
    pub bn_caches: Vec<BnCache>,
    /// Input to the final projection.
    pub final_in: Array2<f64>,
}

/// Full forward state of one stream over a batch.
pub struct StreamBatchForward {
    pub videos: Vec<VideoForward>,
    /// Normalized weights per pyramid bundle at forward time.
    pub pyramid_weights: Vec<Array1<f64>>,
    pub reduction: Option<ReductionForward>,
    /// Rows entering the head batch norm.
    pub head_bn_in: Array2<f64>,
    pub head_bn_cache: BnCache,
    /// Rows entering the head classifier.
    pub head_fc_in: Array2<f64>,
    pub probs: Array2<f64>,
}

/// Gradient accumulators mirroring [`StreamModel`].
pub struct StreamGrad {
    pub encoder: Vec<DenseGrad>,
    pub proj: DenseGrad,
    /// Gradients with respect to the *normalized* pyramid weights; pulled
    /// back through the softmax when the flat gradient is assembled.
    pub pyramid_dweights: Vec<Array1<f64>>,
    pub reduction: Option<(Vec<(DenseGrad, BnGrad)>, DenseGrad)>,
    pub head_bn: BnGrad,
    pub head_fc: DenseGrad,
}

impl StreamGrad {
    pub fn zeros(sm: &StreamModel) -> Self {
        StreamGrad {
            encoder: sm.encoder.zero_grads(),
            proj: sm.proj.zero_grad(),
            pyramid_dweights: sm
                .pyramid_free
                .iter()
                .map(|f| Array1::zeros(f.len()))
                .collect(),
            reduction: sm.reduction.as_ref().map(|red| {
                (
                    red.layers
                        .iter()
                        .map(|l| (l.fc.zero_grad(), l.bn.zero_grad()))
                        .collect(),
                    red.final_fc.zero_grad(),
                )
            }),
            head_bn: sm.head_bn.zero_grad(),
            head_fc: sm.head_fc.zero_grad(),
        }
    }

    /// Flat gradient in the stream's canonical block order. `free` holds the
    /// stream's pyramid free parameters, needed to pull the weight gradients
    /// through the softmax.
    pub fn flatten(&self, free: &[Array1<f64>]) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.encoder {
            out.extend(g.w.iter());
            out.extend(g.b.iter());
        }
        out.extend(self.proj.w.iter());
        out.extend(self.proj.b.iter());
        for (dw, f) in self.pyramid_dweights.iter().zip(free.iter()) {
            let weights = simplex::normalize(f.view()).expect("finite free weights");
            let dfree = simplex::backprop_through_simplex(dw.view(), weights.view())
                .expect("matching lengths");
            out.extend(dfree.iter());
        }
        if let Some((layers, final_fc)) = &self.reduction {
            for (fc, bn) in layers {
                out.extend(fc.w.iter());
                out.extend(fc.b.iter());
                out.extend(bn.gamma.iter());
                out.extend(bn.beta.iter());
            }
            out.extend(final_fc.w.iter());
            out.extend(final_fc.b.iter());
        }
        out.extend(self.head_bn.gamma.iter());
        out.extend(self.head_bn.beta.iter());
        out.extend(self.head_fc.w.iter());
        out.extend(self.head_fc.b.iter());
        out
    }
}

/// Full-model gradient; streams not touched by the loss stay `None` and
/// flatten to zeros.
pub struct ModelGrad {
    pub motion: Option<StreamGrad>,
    pub appearance: Option<StreamGrad>,
    /// Gradient with respect to the normalized fusion weights.
    pub fusion_dweights: Option<Array1<f64>>,
}

impl ModelGrad {
    pub fn to_flat(&self, model: &DeepModel) -> Vec<f64> {
        let mut out = Vec::with_capacity(model.param_count());
        for (stream_grad, stream_model) in [
            (&self.motion, &model.motion),
            (&self.appearance, &model.appearance),
        ] {
            match stream_grad {
                Some(g) => out.extend(g.flatten(&stream_model.pyramid_free)),
                None => {
                    let len: usize = stream_len(stream_model);
                    out.extend(std::iter::repeat_n(0.0, len));
                }
            }
        }
        match &self.fusion_dweights {
            Some(dw) => {
                let weights = model.fusion_weights();
                let dfree = simplex::backprop_through_simplex(dw.view(), weights.view())
                    .expect("matching lengths");
                out.extend(dfree.iter());
            }
            None => out.extend([0.0, 0.0]),
        }
        out
    }
}

fn stream_len(sm: &StreamModel) -> usize {
    let mut len = 0;
    for l in &sm.encoder.layers {
        len += l.dense.w.len() + l.dense.b.len();
    }
    len += sm.proj.w.len() + sm.proj.b.len();
    len += sm.pyramid_free.iter().map(|f| f.len()).sum::<usize>();
    if let Some(red) = &sm.reduction {
        for l in &red.layers {
            len += l.fc.w.len() + l.fc.b.len() + l.bn.gamma.len() + l.bn.beta.len();
        }
        len += red.final_fc.w.len() + red.final_fc.b.len();
    }
    len += sm.head_bn.gamma.len() + sm.head_bn.beta.len();
    len += sm.head_fc.w.len() + sm.head_fc.b.len();
    len
}

/// Encoder -> descriptors -> projection -> aggregation for one video.
pub fn forward_video(
    sm: &StreamModel,
    config: &ModelConfig,
    features: ArrayView2<'_, f64>,
    selected: Option<&[usize]>,
    pyramid_weights: &[Array1<f64>],
) -> Result<VideoForward> {
    let frames = features.nrows();
    if frames == 0 {
        return Err(Error::invalid("video has no frames"));
    }
    let full_table = build_partition(frames, config.depth)?;
    let (table, encoder_input) = match selected {
        Some(idx) => {
            if idx.is_empty() {
                return Err(Error::invalid("schedule selected no frames"));
            }
            let table = full_table.restrict(idx)?;
            let mut gathered = Array2::zeros((idx.len(), features.ncols()));
            for (pos, &t) in idx.iter().enumerate() {
                gathered.row_mut(pos).assign(&features.row(t));
            }
            (table, gathered)
        }
        None => (full_table, features.to_owned()),
    };
    let encoder = sm.encoder.forward(encoder_input.view());
    let node_desc = node_descriptors(encoder.acts.last().unwrap().view(), &table)?;
    let mut projected = sm.proj.forward(node_desc.view());
    for a in 0..table.node_count() {
        if table.is_node_empty(a) {
            projected.row_mut(a).fill(0.0);
        }
    }
    let node_dim = config.node_dim;
    let mut head_in = Array1::zeros(config.agg_width() * config.pyramids);
    for (p, weights) in pyramid_weights.iter().enumerate() {
        let offset = p * config.agg_width();
        match config.variant {
            AggVariant::Concat => {
                for a in 0..table.node_count() {
                    let start = offset + a * node_dim;
                    let mut block = head_in.slice_mut(s![start..start + node_dim]);
                    block.assign(&projected.row(a));
                    block *= weights[a];
                }
            }
            AggVariant::Average => {
                let mut block = head_in.slice_mut(s![offset..offset + node_dim]);
                for a in 0..table.node_count() {
                    block.scaled_add(weights[a], &projected.row(a));
                }
            }
        }
    }
    Ok(VideoForward {
        encoder,
        table,
        node_desc,
        projected,
        head_in,
    })
}

/// Training forward over a batch; batch-norm layers use batch statistics and
/// update their running averages.
pub fn forward_stream_train(
    sm: &mut StreamModel,
    config: &ModelConfig,
    batch: &[BatchVideo<'_>],
) -> Result<StreamBatchForward> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let pyramid_weights: Vec<Array1<f64>> = (0..config.pyramids)
        .map(|p| sm.pyramid_weights(p))
        .collect();
    let mut videos = Vec::with_capacity(batch.len());
    for video in batch {
        videos.push(forward_video(
            sm,
            config,
            video.features,
            video.selected,
            &pyramid_weights,
        )?);
    }
    let width = config.agg_width() * config.pyramids;
    let mut stacked = Array2::zeros((videos.len(), width));
    for (i, v) in videos.iter().enumerate() {
        stacked.row_mut(i).assign(&v.head_in);
    }

    let (reduction, head_bn_in) = match &mut sm.reduction {
        Some(red) => {
            let mut inputs = Vec::with_capacity(red.layers.len());
            let mut relu_outs = Vec::with_capacity(red.layers.len());
            let mut bn_caches = Vec::with_capacity(red.layers.len());
            let mut current = stacked;
            for layer in &mut red.layers {
                inputs.push(current.clone());
                let mut u = layer.fc.forward(current.view());
                u.mapv_inplace(|v| v.max(0.0));
                let (out, cache) = layer.bn.forward_train(u.view());
                relu_outs.push(u);
                bn_caches.push(cache);
                current = out;
            }
            let final_in = current;
            let out = red.final_fc.forward(final_in.view());
            (
                Some(ReductionForward {
                    inputs,
                    relu_outs,
                    bn_caches,
                    final_in,
                }),
                out,
            )
        }
        None => (None, stacked),
    };

    let (head_fc_in, head_bn_cache) = sm.head_bn.forward_train(head_bn_in.view());
    let logits = sm.head_fc.forward(head_fc_in.view());
    let probs = softmax_rows(logits.view());
    Ok(StreamBatchForward {
        videos,
        pyramid_weights,
        reduction,
        head_bn_in,
        head_bn_cache,
        head_fc_in,
        probs,
    })
}

/// Inference forward for one video using running batch-norm statistics.
pub fn forward_stream_eval(
    sm: &StreamModel,
    config: &ModelConfig,
    features: ArrayView2<'_, f64>,
) -> Result<Array1<f64>> {
    let pyramid_weights: Vec<Array1<f64>> = (0..config.pyramids)
        .map(|p| sm.pyramid_weights(p))
        .collect();
    let video = forward_video(sm, config, features, None, &pyramid_weights)?;
    let mut current = video
        .head_in
        .into_shape_with_order((1, config.agg_width() * config.pyramids))
        .expect("row vector");
    if let Some(red) = &sm.reduction {
        for layer in &red.layers {
            let mut u = layer.fc.forward(current.view());
            u.mapv_inplace(|v| v.max(0.0));
            current = layer.bn.forward_eval(u.view());
        }
        current = red.final_fc.forward(current.view());
    }
    let h = sm.head_bn.forward_eval(current.view());
    let logits = sm.head_fc.forward(h.view());
    Ok(softmax_rows(logits.view()).row(0).to_owned())
}

/// Distribute per-node gradients onto the frames that built each node mean.
pub fn node_grads_to_frames(
    grad_nodes: ArrayView2<'_, f64>,
    table: &MembershipTable,
) -> Array2<f64> {
    let mut grad_frames = Array2::zeros((table.frames(), grad_nodes.ncols()));
    for a in 0..table.node_count() {
        pool_backward(grad_nodes.row(a), table.range(a), &mut grad_frames);
    }
    grad_frames
}

/// Membership-weighted encoder gradient: routes node-descriptor gradients to
/// member frames (dividing by node population) and chains them through the
/// framewise encoder. Returns one gradient per encoder layer.
pub fn assemble_param_gradient(
    encoder: &Encoder,
    cache: &EncoderCache,
    table: &MembershipTable,
    grad_nodes: ArrayView2<'_, f64>,
) -> Vec<DenseGrad> {
    let mut grads = encoder.zero_grads();
    let grad_frames = node_grads_to_frames(grad_nodes, table);
    encoder.backward(cache, grad_frames, &mut grads);
    grads
}

/// Backward through one stream given the gradient of the loss with respect
/// to the stream's probability rows.
pub fn backward_stream(
    sm: &StreamModel,
    config: &ModelConfig,
    fwd: &StreamBatchForward,
    grad_probs: ArrayView2<'_, f64>,
) -> StreamGrad {
    let mut grad = StreamGrad::zeros(sm);
    let batch = fwd.probs.nrows();
    let classes = fwd.probs.ncols();

    // softmax
    let mut dlogits = Array2::zeros((batch, classes));
    for i in 0..batch {
        let mut row = vec![0.0; classes];
        softmax_backward_row(
            fwd.probs.row(i).as_slice().unwrap(),
            grad_probs.row(i).as_slice().unwrap(),
            &mut row,
        );
        dlogits.row_mut(i).assign(&Array1::from(row));
    }

    // head classifier and batch norm
    let dh = sm
        .head_fc
        .backward(fwd.head_fc_in.view(), dlogits.view(), &mut grad.head_fc);
    let mut dx = sm
        .head_bn
        .backward(&fwd.head_bn_cache, dh.view(), &mut grad.head_bn);

    // reduction stack
    if let (Some(red), Some(red_fwd), Some((layer_grads, final_grad))) = (
        sm.reduction.as_ref(),
        fwd.reduction.as_ref(),
        grad.reduction.as_mut(),
    ) {
        dx = red
            .final_fc
            .backward(red_fwd.final_in.view(), dx.view(), final_grad);
        for idx in (0..red.layers.len()).rev() {
            let layer = &red.layers[idx];
            let (fc_grad, bn_grad) = &mut layer_grads[idx];
            let mut du = layer
                .bn
                .backward(&red_fwd.bn_caches[idx], dx.view(), bn_grad);
            // relu mask from cached outputs
            du.zip_mut_with(&red_fwd.relu_outs[idx], |g, &y| {
                if y <= 0.0 {
                    *g = 0.0;
                }
            });
            dx = layer
                .fc
                .backward(red_fwd.inputs[idx].view(), du.view(), fc_grad);
        }
    }

    // aggregation, projection, pooling, encoder — per video
    let node_dim = config.node_dim;
    for (i, video) in fwd.videos.iter().enumerate() {
        let dz = dx.row(i);
        let node_count = video.table.node_count();
        let mut dproj = Array2::zeros((node_count, node_dim));
        for (p, weights) in fwd.pyramid_weights.iter().enumerate() {
            let offset = p * config.agg_width();
            match config.variant {
                AggVariant::Concat => {
                    for a in 0..node_count {
                        let start = offset + a * node_dim;
                        let dblock = dz.slice(s![start..start + node_dim]);
                        grad.pyramid_dweights[p][a] += dblock.dot(&video.projected.row(a));
                        dproj.row_mut(a).scaled_add(weights[a], &dblock);
                    }
                }
                AggVariant::Average => {
                    let dblock = dz.slice(s![offset..offset + node_dim]);
                    for a in 0..node_count {
                        grad.pyramid_dweights[p][a] += dblock.dot(&video.projected.row(a));
                        dproj.row_mut(a).scaled_add(weights[a], &dblock);
                    }
                }
            }
        }
        // empty nodes were zeroed in the forward; no gradient flows through
        for a in 0..node_count {
            if video.table.is_node_empty(a) {
                dproj.row_mut(a).fill(0.0);
            }
        }
        let dnodes = sm
            .proj
            .backward(video.node_desc.view(), dproj.view(), &mut grad.proj);
        let grad_frames = node_grads_to_frames(dnodes.view(), &video.table);
        sm.encoder
            .backward(&video.encoder, grad_frames, &mut grad.encoder);
    }
    grad
}

/// Mean of each video's per-frame features after encoding — used by tests as
/// an independent route to the depth-1 descriptor.
pub fn encoded_global_mean(
    sm: &StreamModel,
    features: ArrayView2<'_, f64>,
) -> Array1<f64> {
    let cache = sm.encoder.forward(features);
    cache
        .acts
        .last()
        .unwrap()
        .mean_axis(Axis(0))
        .expect("at least one frame")
}
