//! Operator graphs made of convolutions, ReLUs and channel concatenations.
//!
//! A chain is a small DAG whose node 0 is the input; the last node is the
//! output. Besides whole-image evaluation it knows, for any output region,
//! which region of every intermediate is needed to reproduce that output
//! exactly.

use super::OffloadError;
use crate::tensor::{
    concat, concat_region, conv2d_region, relu, relu_region, ConvWeights, Rect, Shape, Tensor,
    TensorError, View,
};

pub type NodeId = usize;

#[derive(Clone, Debug)]
pub enum Op {
    Input,
    Conv(ConvWeights),
    Relu,
    Concat,
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    channels: usize,
}

#[derive(Clone, Debug)]
pub struct OpChain {
    nodes: Vec<Node>,
}

/// Half-open signed interval, for back-projection before clipping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Span {
    lo: i64,
    hi: i64,
}

impl Span {
    fn union(self, o: Span) -> Span {
        Span {
            lo: self.lo.min(o.lo),
            hi: self.hi.max(o.hi),
        }
    }

    fn clip(self, extent: usize) -> Span {
        Span {
            lo: self.lo.max(0),
            hi: self.hi.min(extent as i64),
        }
    }

    fn len(self) -> usize {
        (self.hi - self.lo).max(0) as usize
    }

    /// Inputs read by a kernel of size `k`, stride `s`, padding `p` over
    /// these outputs.
    fn back_project(self, k: usize, s: usize, p: usize) -> Span {
        let (k, s, p) = (k as i64, s as i64, p as i64);
        Span {
            lo: self.lo * s - p,
            hi: (self.hi - 1) * s - p + k,
        }
    }
}

type Region = (Span, Span);

impl OpChain {
    pub fn new(in_channels: usize) -> Self {
        Self {
            nodes: vec![Node {
                op: Op::Input,
                inputs: vec![],
                channels: in_channels,
            }],
        }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn output(&self) -> NodeId {
        self.nodes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() == 1
    }

    pub fn in_channels(&self) -> usize {
        self.nodes[0].channels
    }

    pub fn out_channels(&self) -> usize {
        self.nodes[self.output()].channels
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.nodes[id].channels
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id].op
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id].inputs
    }

    pub fn conv(&mut self, x: NodeId, weights: ConvWeights) -> Result<NodeId, OffloadError> {
        self.check_id(x)?;
        let have = self.nodes[x].channels;
        if weights.in_channels() != have {
            return Err(TensorError::ShapeMismatch {
                op: "chain conv",
                expected: format!("{} input channels", weights.in_channels()),
                found: format!("node {x} with {have} channels"),
            }
            .into());
        }
        let channels = weights.out_channels();
        Ok(self.push(Op::Conv(weights), vec![x], channels))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, OffloadError> {
        self.check_id(x)?;
        let c = self.nodes[x].channels;
        Ok(self.push(Op::Relu, vec![x], c))
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId, OffloadError> {
        if xs.is_empty() {
            return Err(OffloadError::InvalidChain("concat of nothing".into()));
        }
        let mut c = 0;
        for &x in xs {
            self.check_id(x)?;
            c += self.nodes[x].channels;
        }
        Ok(self.push(Op::Concat, xs.to_vec(), c))
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, channels: usize) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            channels,
        });
        self.nodes.len() - 1
    }

    fn check_id(&self, x: NodeId) -> Result<(), OffloadError> {
        if x < self.nodes.len() {
            Ok(())
        } else {
            Err(OffloadError::InvalidChain(format!("unknown node {x}")))
        }
    }

    pub fn is_stride_one(&self) -> bool {
        self.nodes.iter().all(|n| match &n.op {
            Op::Conv(w) => w.stride() == 1,
            _ => true,
        })
    }

    /// Radius in pixels of the input neighbourhood any output depends on:
    /// `(k - 1) / 2` summed along a path, maximised over parallel branches.
    /// Only defined for stride-1, "same"-padded chains.
    pub fn receptive_field_radius(&self) -> Result<usize, OffloadError> {
        let mut radius = vec![0usize; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate().skip(1) {
            let upstream = node.inputs.iter().map(|&j| radius[j]).max().unwrap_or(0);
            radius[i] = upstream
                + match &node.op {
                    Op::Conv(w) => conv_radius(w)?,
                    _ => 0,
                };
        }
        Ok(radius[self.output()])
    }

    /// Spatial size of every node for an input of `h x w`.
    pub fn spatial_sizes(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>, OffloadError> {
        let mut sizes = Vec::with_capacity(self.nodes.len());
        sizes.push((h, w));
        for node in &self.nodes[1..] {
            let first = sizes[node.inputs[0]];
            let size = match &node.op {
                Op::Conv(wt) => wt.output_size(first.0, first.1)?,
                Op::Relu | Op::Input => first,
                Op::Concat => {
                    if let Some(&j) = node.inputs.iter().find(|&&j| sizes[j] != first) {
                        return Err(TensorError::ShapeMismatch {
                            op: "chain concat",
                            expected: format!("{}x{}", first.0, first.1),
                            found: format!("{}x{}", sizes[j].0, sizes[j].1),
                        }
                        .into());
                    }
                    first
                }
            };
            sizes.push(size);
        }
        Ok(sizes)
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize), OffloadError> {
        Ok(self.spatial_sizes(h, w)?[self.output()])
    }

    /// Whole-image evaluation with the same kernels the tiled executor uses.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, OffloadError> {
        let s = x.shape();
        if s.c != self.in_channels() {
            return Err(TensorError::ShapeMismatch {
                op: "chain forward",
                expected: format!("{} input channels", self.in_channels()),
                found: format!("{s}"),
            }
            .into());
        }
        let sizes = self.spatial_sizes(s.h, s.w)?;
        let last_use = self.last_use();
        let mut values: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        values[0] = Some(x.clone());
        for i in 1..self.nodes.len() {
            let node = &self.nodes[i];
            let arg = |j: NodeId| values[j].as_ref().expect("computed before use");
            let out = match &node.op {
                Op::Conv(w) => {
                    let (oh, ow) = sizes[i];
                    conv2d_region(View::whole(arg(node.inputs[0])), w, Rect::full(oh, ow))?
                }
                Op::Relu => relu(arg(node.inputs[0])),
                Op::Concat => {
                    let parts: Vec<&Tensor> = node.inputs.iter().map(|&j| arg(j)).collect();
                    concat(&parts, crate::tensor::Axis::Channel)?
                }
                Op::Input => unreachable!("only node 0 is an input"),
            };
            for &j in &node.inputs {
                if last_use[j] == i {
                    values[j] = None;
                }
            }
            values[i] = Some(out);
        }
        Ok(values.pop().flatten().expect("output computed"))
    }

    /// Evaluates node `i` over `rect` from inputs placed at `inputs`.
    pub(crate) fn eval_region(
        &self,
        i: NodeId,
        inputs: &[View<'_>],
        rect: Rect,
    ) -> Result<Tensor, OffloadError> {
        Ok(match &self.nodes[i].op {
            Op::Conv(w) => conv2d_region(inputs[0], w, rect)?,
            Op::Relu => relu_region(inputs[0], rect)?,
            Op::Concat => concat_region(inputs, rect)?,
            Op::Input => unreachable!("the input is staged, not evaluated"),
        })
    }

    /// Index of the last node that reads each node (the output reads itself).
    pub fn last_use(&self) -> Vec<NodeId> {
        let mut last = (0..self.nodes.len()).collect::<Vec<_>>();
        for (i, node) in self.nodes.iter().enumerate() {
            for &j in &node.inputs {
                last[j] = last[j].max(i);
            }
        }
        last
    }

    fn regions(&self, core: Region, sizes: Option<&[(usize, usize)]>) -> Vec<Region> {
        let n = self.nodes.len();
        let mut need: Vec<Option<Region>> = vec![None; n];
        need[n - 1] = Some(core);
        for i in (1..n).rev() {
            let Some((mut ys, mut xs)) = need[i] else {
                continue;
            };
            if let Some(sizes) = sizes {
                ys = ys.clip(sizes[i].0);
                xs = xs.clip(sizes[i].1);
                need[i] = Some((ys, xs));
            }
            let node = &self.nodes[i];
            let upstream = match &node.op {
                Op::Conv(w) => {
                    let (kh, kw) = w.kernel_size();
                    (
                        ys.back_project(kh, w.stride(), w.padding()),
                        xs.back_project(kw, w.stride(), w.padding()),
                    )
                }
                _ => (ys, xs),
            };
            for &j in &node.inputs {
                need[j] = Some(match need[j] {
                    Some((a, b)) => (a.union(upstream.0), b.union(upstream.1)),
                    None => upstream,
                });
            }
        }
        if let (Some(sizes), Some((ys, xs))) = (sizes, need[0]) {
            need[0] = Some((ys.clip(sizes[0].0), xs.clip(sizes[0].1)));
        }
        need.into_iter()
            .map(|r| r.expect("every node reaches the output"))
            .collect()
    }

    /// Region of every node needed to compute the outputs in `core`, clipped
    /// to each node's image. `sizes` comes from [`Self::spatial_sizes`].
    pub fn needed_rects(&self, core: Rect, sizes: &[(usize, usize)]) -> Vec<Rect> {
        let span = |a: usize, len: usize| Span {
            lo: a as i64,
            hi: (a + len) as i64,
        };
        self.regions((span(core.y, core.h), span(core.x, core.w)), Some(sizes))
            .into_iter()
            .map(|(ys, xs)| Rect::new(ys.lo as usize, xs.lo as usize, ys.len(), xs.len()))
            .collect()
    }

    /// Unclipped per-node region sizes for a `core_h x core_w` output tile.
    /// An upper bound on the clipped sizes of any tile of that size.
    pub fn interior_sizes(&self, core_h: usize, core_w: usize) -> Vec<(usize, usize)> {
        let span = |len: usize| Span {
            lo: 0,
            hi: len as i64,
        };
        self.regions((span(core_h), span(core_w)), None)
            .into_iter()
            .map(|(ys, xs)| (ys.len(), xs.len()))
            .collect()
    }

    /// Peak device bytes the tiled executor holds for one tile of
    /// `core_h x core_w` outputs: the staged input region plus every
    /// intermediate alive at once, freed after its last reader.
    pub fn tile_bytes(&self, batch: usize, core_h: usize, core_w: usize) -> usize {
        let sizes = self.interior_sizes(core_h, core_w);
        let bytes = |i: NodeId| {
            Shape::new(batch, self.nodes[i].channels, sizes[i].0, sizes[i].1).bytes()
        };
        self.simulate_peak(bytes)
    }

    /// Peak of the executor's allocation pattern given per-node byte sizes.
    pub(crate) fn simulate_peak(&self, bytes: impl Fn(NodeId) -> usize) -> usize {
        let last_use = self.last_use();
        let mut live = bytes(0);
        let mut peak = live;
        for i in 1..self.nodes.len() {
            live += bytes(i);
            peak = peak.max(live);
            for &j in dedup(&self.nodes[i].inputs).iter() {
                if last_use[j] == i {
                    live -= bytes(j);
                }
            }
        }
        peak
    }
}

pub(crate) fn dedup(ids: &[NodeId]) -> Vec<NodeId> {
    let mut v = ids.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

fn conv_radius(w: &ConvWeights) -> Result<usize, OffloadError> {
    let (kh, kw) = w.kernel_size();
    if w.stride() != 1 {
        return Err(OffloadError::StridedChain);
    }
    if kh != kw || w.padding() != (kh - 1) / 2 {
        return Err(OffloadError::InvalidChain(format!(
            "receptive field needs square same-padded kernels, got {kh}x{kw} with padding {}",
            w.padding()
        )));
    }
    Ok((kh - 1) / 2)
}

/// Receptive-field radius of a serial chain of convolutions.
pub fn receptive_field_radius(chain: &[ConvWeights]) -> Result<usize, OffloadError> {
    chain.iter().map(conv_radius).sum()
}
