//! Binary temporal hierarchy over variable-length frame sequences.
//!
//! A pyramid of depth `D` covers a sequence of `T` frames with `2^D - 1`
//! nodes: level `l` (1-based, root at level 1) splits the time axis into
//! `2^(l-1)` near-equal contiguous intervals. Each node pools its interval
//! by arithmetic mean, and the per-node descriptors are combined into a
//! single vector either by weighted concatenation or by weighted averaging.
//!
//! All functions here are pure; nothing is cached or shared.

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Which of the two feature pipelines a sequence belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Appearance,
    Motion,
}

impl Stream {
    pub const BOTH: [Stream; 2] = [Stream::Motion, Stream::Appearance];

    pub fn tag(self) -> &'static str {
        match self {
            Stream::Appearance => "appearance",
            Stream::Motion => "motion",
        }
    }
}

/// One video's per-frame feature matrix for a single stream.
///
/// Row `t` of `features` is the frame-`t` feature vector; `T >= 1` and all
/// entries are finite.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub video_id: String,
    pub stream: Stream,
    pub features: Array2<f64>,
    pub label: usize,
}

impl FrameSequence {
    pub fn new(
        video_id: impl Into<String>,
        stream: Stream,
        features: Array2<f64>,
        label: usize,
    ) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::invalid("frame sequence must have at least one frame"));
        }
        if features.ncols() == 0 {
            return Err(Error::invalid("frame features must have dimension >= 1"));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("frame features contain non-finite values"));
        }
        Ok(FrameSequence {
            video_id: video_id.into(),
            stream,
            features,
            label,
        })
    }

    /// Number of frames `T`.
    pub fn frames(&self) -> usize {
        self.features.nrows()
    }

    /// Feature dimension `d`.
    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Node address in the hierarchy: `level` in `1..=depth`, `pos` in
/// `1..=2^(level-1)`, both 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId {
    pub level: usize,
    pub pos: usize,
}

/// Shape of a full binary temporal pyramid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PyramidSpec {
    depth: usize,
}

impl PyramidSpec {
    pub fn new(depth: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::invalid("pyramid depth must be >= 1"));
        }
        if depth > 24 {
            return Err(Error::invalid("pyramid depth > 24 is not supported"));
        }
        Ok(PyramidSpec { depth })
    }

    pub fn depth(self) -> usize {
        self.depth
    }

    /// Total node count `2^depth - 1`.
    pub fn node_count(self) -> usize {
        (1usize << self.depth) - 1
    }

    /// Number of nodes at `level`: `2^(level-1)`.
    pub fn level_width(level: usize) -> usize {
        1usize << (level - 1)
    }

    /// Flat index of a node in breadth-first order:
    /// (1,1), (1,2), (2,2), (1,3), (2,3), (3,3), (4,3), ...
    pub fn flat_index(self, node: NodeId) -> usize {
        debug_assert!(node.level >= 1 && node.level <= self.depth);
        debug_assert!(node.pos >= 1 && node.pos <= Self::level_width(node.level));
        (1usize << (node.level - 1)) - 1 + (node.pos - 1)
    }

    /// Inverse of [`flat_index`](Self::flat_index).
    pub fn node_at(self, flat: usize) -> NodeId {
        debug_assert!(flat < self.node_count());
        let level = usize::BITS as usize - (flat + 1).leading_zeros() as usize;
        let pos = flat + 1 - (1usize << (level - 1)) + 1;
        NodeId { level, pos }
    }

    /// All nodes in breadth-first order.
    pub fn nodes(self) -> impl Iterator<Item = NodeId> {
        (1..=self.depth).flat_map(|level| {
            (1..=Self::level_width(level)).map(move |pos| NodeId { level, pos })
        })
    }
}

/// Frame-to-node assignment for one sequence length.
///
/// Node `(k, l)` owns the contiguous frame range
/// `ceil((k-1)*T / 2^(l-1)) .. ceil(k*T / 2^(l-1))`, i.e. frame `t` belongs
/// to `(k, l)` iff `floor(t * 2^(l-1) / T) == k - 1`. Within every level the
/// nonempty ranges partition `0..T`; nodes go empty once a level has more
/// intervals than frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MembershipTable {
    spec: PyramidSpec,
    frames: usize,
    ranges: Vec<Range<usize>>,
}

/// Assign `frames` frame indices to the nodes of a depth-`depth` pyramid.
pub fn build_partition(frames: usize, depth: usize) -> Result<MembershipTable> {
    if frames == 0 {
        return Err(Error::invalid("cannot partition an empty sequence"));
    }
    let spec = PyramidSpec::new(depth)?;
    let mut ranges = Vec::with_capacity(spec.node_count());
    for node in spec.nodes() {
        let width = PyramidSpec::level_width(node.level);
        let start = ((node.pos - 1) * frames).div_ceil(width);
        let end = (node.pos * frames).div_ceil(width);
        ranges.push(start..end);
    }
    Ok(MembershipTable { spec, frames, ranges })
}

impl MembershipTable {
    pub fn spec(&self) -> PyramidSpec {
        self.spec
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn node_count(&self) -> usize {
        self.ranges.len()
    }

    /// Frame range owned by the node with the given flat index.
    pub fn range(&self, flat: usize) -> Range<usize> {
        self.ranges[flat].clone()
    }

    pub fn node_range(&self, node: NodeId) -> Range<usize> {
        self.range(self.spec.flat_index(node))
    }

    pub fn node_size(&self, flat: usize) -> usize {
        self.ranges[flat].len()
    }

    pub fn is_node_empty(&self, flat: usize) -> bool {
        self.ranges[flat].is_empty()
    }

    /// Flat indices of the nodes containing frame `t`, one per level.
    pub fn nodes_of_frame(&self, t: usize) -> Vec<usize> {
        assert!(t < self.frames);
        (1..=self.spec.depth())
            .map(|level| {
                let width = PyramidSpec::level_width(level);
                let pos = t * width / self.frames + 1;
                self.spec.flat_index(NodeId { level, pos })
            })
            .collect()
    }

    /// Re-index the table onto a sorted subset of frames.
    ///
    /// `selected` holds strictly increasing original frame indices; the
    /// returned table addresses *positions* in `selected` (0..selected.len())
    /// and keeps each node's members exactly those selected frames that fell
    /// inside its original range. Used by the epoch frame scheduler, where
    /// node means are recomputed over the scheduled frames only.
    pub fn restrict(&self, selected: &[usize]) -> Result<MembershipTable> {
        if selected.is_empty() {
            return Err(Error::invalid("cannot restrict to an empty frame subset"));
        }
        if selected.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("selected frames must be strictly increasing"));
        }
        if *selected.last().unwrap() >= self.frames {
            return Err(Error::invalid("selected frame index out of range"));
        }
        let ranges = self
            .ranges
            .iter()
            .map(|r| {
                let start = selected.partition_point(|&t| t < r.start);
                let end = selected.partition_point(|&t| t < r.end);
                start..end
            })
            .collect();
        Ok(MembershipTable {
            spec: self.spec,
            frames: selected.len(),
            ranges,
        })
    }
}

/// Per-node mean descriptors: row `a` is the mean of the frames owned by the
/// node with flat index `a`; empty nodes get the zero vector.
pub fn node_descriptors(features: ArrayView2<'_, f64>, mt: &MembershipTable) -> Result<Array2<f64>> {
    if features.nrows() != mt.frames() {
        return Err(Error::invalid(format!(
            "membership table built for {} frames, features have {}",
            mt.frames(),
            features.nrows()
        )));
    }
    let dim = features.ncols();
    let mut out = Array2::zeros((mt.node_count(), dim));
    for flat in 0..mt.node_count() {
        let range = mt.range(flat);
        if range.is_empty() {
            continue;
        }
        let size = range.len() as f64;
        let mut row = out.row_mut(flat);
        for t in range {
            row += &(features.row(t).mapv(|v| v / size));
        }
    }
    Ok(out)
}

fn check_weights(descriptors: ArrayView2<'_, f64>, weights: ArrayView1<'_, f64>) -> Result<()> {
    if weights.len() != descriptors.nrows() {
        return Err(Error::invalid(format!(
            "{} weights for {} nodes",
            weights.len(),
            descriptors.nrows()
        )));
    }
    Ok(())
}

/// Weighted concatenation: output block `a` equals `weights[a] * descriptor[a]`,
/// blocks in breadth-first node order. Output length `node_count * d`.
pub fn aggregate_concat(
    descriptors: ArrayView2<'_, f64>,
    weights: ArrayView1<'_, f64>,
) -> Result<Array1<f64>> {
    check_weights(descriptors, weights)?;
    let dim = descriptors.ncols();
    let mut out = Array1::zeros(descriptors.nrows() * dim);
    for (a, w) in weights.iter().enumerate() {
        let mut block = out.slice_mut(ndarray::s![a * dim..(a + 1) * dim]);
        block.assign(&descriptors.row(a));
        block *= *w;
    }
    Ok(out)
}

/// Weighted averaging: the convex combination `sum_a weights[a] * descriptor[a]`.
/// Output length `d`.
pub fn aggregate_average(
    descriptors: ArrayView2<'_, f64>,
    weights: ArrayView1<'_, f64>,
) -> Result<Array1<f64>> {
    check_weights(descriptors, weights)?;
    let mut out = Array1::zeros(descriptors.ncols());
    for (a, w) in weights.iter().enumerate() {
        out.scaled_add(*w, &descriptors.row(a));
    }
    Ok(out)
}

/// Backward of mean pooling for one node: every member frame receives
/// `grad_node / |node|`, accumulated into `grad_frames`. Empty nodes are a
/// no-op.
pub fn pool_backward(
    grad_node: ArrayView1<'_, f64>,
    range: Range<usize>,
    grad_frames: &mut Array2<f64>,
) {
    if range.is_empty() {
        return;
    }
    let scale = 1.0 / range.len() as f64;
    for t in range {
        grad_frames.row_mut(t).scaled_add(scale, &grad_node);
    }
}
