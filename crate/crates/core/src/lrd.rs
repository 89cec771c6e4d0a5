//! Long-range dependency block.
//!
//! ```text
//! f_in ─ 1x1 reduce ─ ReLU ─┬───────────────────────────────────────┐
//!                           └ 5x5 ─ f5 ─┬ dw7  ─ 1x1 ─ f7           │
//!                                       ├ dw15 ─ 1x1 ─ f15          │
//!                                       └ dw31 ─ 1x1 ─ f31          │
//!        concat(reduced, f5, f7, f15, f31) ─ 1x1 fuse ─ 1x1 expand ─ out
//! ```
//!
//! All convolutions are stride 1 with "same" zero padding, so the block is
//! shape preserving and its receptive-field radius is `2 + 15 = 17`.

use thiserror::Error;

use crate::offload::{OffloadError, OpChain};
use crate::tensor::{seeded_init, ConvWeights, InitScheme, Shape, SplitMix64, Tensor, TensorError};

/// Kernel sizes of the three parallel depthwise branches.
pub const BRANCH_KERNELS: [usize; 3] = [7, 15, 31];
pub const SERIAL_KERNEL: usize = 5;

#[derive(Debug, Error)]
pub enum LrdError {
    #[error("invalid LRD parameters: {0}")]
    InvalidParams(String),
    #[error("LRD input has {found} channels, expected {expected}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Offload(#[from] OffloadError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Depthwise `k x k` convolution followed by a pointwise 1x1 mix, with no
/// activation in between.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparableConv {
    pub depthwise: ConvWeights,
    pub pointwise: ConvWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LrdParams {
    /// 1x1, C -> k.
    pub reduce: ConvWeights,
    /// 5x5, k -> k.
    pub conv5: ConvWeights,
    /// Branches in [`BRANCH_KERNELS`] order.
    pub branches: [SeparableConv; 3],
    /// 1x1 over the 5k-channel concat, -> k.
    pub fuse: ConvWeights,
    /// 1x1, k -> d.
    pub expand: ConvWeights,
}

fn seeded_conv(
    seed: u64,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    groups: usize,
) -> ConvWeights {
    let kernel = seeded_init(
        Shape::new(cout, cin / groups, k, k),
        InitScheme::UniformFanIn,
        SplitMix64::derive(seed, name),
    );
    ConvWeights::same(kernel, vec![0.0; cout], groups).expect("valid seeded shape")
}

impl LrdParams {
    /// Uniform fan-in weights, zero biases.
    pub fn seeded(in_channels: usize, k: usize, d: usize, seed: u64) -> Self {
        let branch = |ks: usize| SeparableConv {
            depthwise: seeded_conv(seed, &format!("lrd.dw{ks}"), k, k, ks, k),
            pointwise: seeded_conv(seed, &format!("lrd.pw{ks}"), k, k, 1, 1),
        };
        Self {
            reduce: seeded_conv(seed, "lrd.reduce", k, in_channels, 1, 1),
            conv5: seeded_conv(seed, "lrd.conv5", k, k, SERIAL_KERNEL, 1),
            branches: BRANCH_KERNELS.map(branch),
            fuse: seeded_conv(seed, "lrd.fuse", k, 5 * k, 1, 1),
            expand: seeded_conv(seed, "lrd.expand", d, k, 1, 1),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.reduce.in_channels()
    }

    /// Reduced width `k`.
    pub fn k(&self) -> usize {
        self.reduce.out_channels()
    }

    /// Output width `d`.
    pub fn d(&self) -> usize {
        self.expand.out_channels()
    }

    pub fn branch_mut(&mut self, kernel: usize) -> Option<&mut SeparableConv> {
        let i = BRANCH_KERNELS.iter().position(|&k| k == kernel)?;
        Some(&mut self.branches[i])
    }

    /// Zeroes one depthwise branch (kernel and bias) for ablations.
    pub fn zero_branch(&mut self, kernel: usize) {
        if let Some(b) = self.branch_mut(kernel) {
            b.depthwise.kernel_mut().data_mut().fill(0.0);
            b.depthwise.bias_mut().fill(0.0);
        }
    }

    pub fn validate(&self) -> Result<(), LrdError> {
        let k = self.k();
        let bad = |m: String| Err(LrdError::InvalidParams(m));
        let is_same = |w: &ConvWeights, size: usize| {
            w.kernel_size() == (size, size) && w.stride() == 1 && w.padding() == (size - 1) / 2
        };
        if !is_same(&self.reduce, 1) {
            return bad("reduce must be a stride-1 1x1 convolution".into());
        }
        if !is_same(&self.conv5, SERIAL_KERNEL)
            || self.conv5.in_channels() != k
            || self.conv5.out_channels() != k
        {
            return bad(format!("conv5 must be a same-padded 5x5 {k}->{k} convolution"));
        }
        for (b, &ks) in self.branches.iter().zip(&BRANCH_KERNELS) {
            if !is_same(&b.depthwise, ks)
                || !b.depthwise.is_depthwise()
                || b.depthwise.out_channels() != k
            {
                return bad(format!("branch {ks} must be a same-padded {ks}x{ks} depthwise conv over {k} channels"));
            }
            if !is_same(&b.pointwise, 1)
                || b.pointwise.in_channels() != k
                || b.pointwise.out_channels() != k
            {
                return bad(format!("branch {ks} pointwise must be 1x1 {k}->{k}"));
            }
        }
        if !is_same(&self.fuse, 1) || self.fuse.in_channels() != 5 * k || self.fuse.out_channels() != k
        {
            return bad(format!("fuse must be 1x1 {}->{k}", 5 * k));
        }
        if !is_same(&self.expand, 1) || self.expand.in_channels() != k {
            return bad(format!("expand must be 1x1 from {k} channels"));
        }
        Ok(())
    }

    fn append_lrdu(&self, g: &mut OpChain, reduced: usize) -> Result<usize, LrdError> {
        let f5 = g.conv(reduced, self.conv5.clone())?;
        let mut parts = vec![reduced, f5];
        for b in &self.branches {
            let dw = g.conv(f5, b.depthwise.clone())?;
            parts.push(g.conv(dw, b.pointwise.clone())?);
        }
        let cat = g.concat(&parts)?;
        Ok(g.conv(cat, self.fuse.clone())?)
    }

    /// The unit alone: k channels in, k channels out.
    pub fn lrdu_chain(&self) -> Result<OpChain, LrdError> {
        self.validate()?;
        let mut g = OpChain::new(self.k());
        self.append_lrdu(&mut g, 0)?;
        Ok(g)
    }

    /// The whole block: C channels in, d channels out.
    pub fn lrd_chain(&self) -> Result<OpChain, LrdError> {
        self.validate()?;
        let mut g = OpChain::new(self.in_channels());
        let r = g.conv(0, self.reduce.clone())?;
        let r = g.relu(r)?;
        let fused = self.append_lrdu(&mut g, r)?;
        g.conv(fused, self.expand.clone())?;
        Ok(g)
    }
}

pub fn lrdu_forward(f_reduced: &Tensor, params: &LrdParams) -> Result<Tensor, LrdError> {
    let c = f_reduced.shape().c;
    if c != params.k() {
        return Err(LrdError::ChannelMismatch {
            expected: params.k(),
            found: c,
        });
    }
    Ok(params.lrdu_chain()?.forward(f_reduced)?)
}

pub fn lrd_forward(f_in: &Tensor, params: &LrdParams) -> Result<Tensor, LrdError> {
    let c = f_in.shape().c;
    if c != params.in_channels() {
        return Err(LrdError::ChannelMismatch {
            expected: params.in_channels(),
            found: c,
        });
    }
    Ok(params.lrd_chain()?.forward(f_in)?)
}

/// Empirical receptive field of the block at one output pixel.
///
/// For every input pixel `p`, adds `+1` to all channels of `base` at `p`,
/// reruns the whole block and records the largest absolute change over
/// output channels at `probe` (y, x). Returns a `(1, 1, h, w)` map. Costs one
/// full forward pass per pixel.
pub fn influence_probe(
    params: &LrdParams,
    base: &Tensor,
    probe: (usize, usize),
) -> Result<Tensor, LrdError> {
    let s = base.shape();
    if s.n != 1 || probe.0 >= s.h || probe.1 >= s.w {
        return Err(LrdError::InvalidParams(format!(
            "probe {probe:?} must lie inside a single image of {s}"
        )));
    }
    let chain = params.lrd_chain()?;
    let reference = chain.forward(base)?;
    let d = reference.shape().c;
    let mut map = Tensor::zeros(Shape::new(1, 1, s.h, s.w));
    let mut input = base.clone();
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..s.c {
                input.set(0, c, y, x, base.at(0, c, y, x) + 1.0);
            }
            let out = chain.forward(&input)?;
            let change = (0..d)
                .map(|c| (out.at(0, c, probe.0, probe.1) - reference.at(0, c, probe.0, probe.1)).abs())
                .fold(0.0f32, f32::max);
            map.set(0, 0, y, x, change);
            for c in 0..s.c {
                input.set(0, c, y, x, base.at(0, c, y, x));
            }
        }
    }
    Ok(map)
}

/// Largest Chebyshev distance from `probe` at which `map` is nonzero.
pub fn influence_radius(map: &Tensor, probe: (usize, usize)) -> Option<usize> {
    let s = map.shape();
    let mut radius = None;
    for y in 0..s.h {
        for x in 0..s.w {
            if map.at(0, 0, y, x) != 0.0 {
                let d = y.abs_diff(probe.0).max(x.abs_diff(probe.1));
                radius = Some(radius.map_or(d, |r: usize| r.max(d)));
            }
        }
    }
    radius
}
