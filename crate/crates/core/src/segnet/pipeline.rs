use std::time::Instant;

use super::{NetworkConfig, NetworkParams, SegnetError};
use crate::bae::LabelMask;
use crate::ecr::{ecr_forward_with_region, region_size};
use crate::offload::{
    execute_tiled, plan_tiles, ChainCost, DeviceArena, MemoryStats, OffloadError, OpChain,
    TensorHandle, TileCost,
};
use crate::tensor::{bilinear_resize_rows, Shape, Tensor};

#[derive(Clone, Debug)]
pub struct SegmentationOutput {
    /// Full-resolution class ids.
    pub class_map: LabelMask,
    /// Main head logits on the stride-8 grid.
    pub seg_logits: Tensor,
    /// Auxiliary head logits on the stride-8 grid.
    pub aux_logits: Tensor,
    /// Number of feature pixels refined by attention.
    pub hard_pixels: usize,
    pub stats: MemoryStats,
}

/// Plans and runs one chain over a host tensor, returning a host tensor.
pub fn run_stage(
    chain: &OpChain,
    input: &TensorHandle,
    arena: &mut DeviceArena,
) -> Result<TensorHandle, SegnetError> {
    let s = input.shape();
    let (oh, ow) = chain.output_size(s.h, s.w)?;
    let cost = ChainCost { chain, batch: s.n };
    let plan = plan_tiles(oh, ow, &cost, arena.budget())?;
    Ok(execute_tiled(chain, input, &plan, arena)?)
}

/// Stride-8 features of `image`, computed tile by tile under the arena
/// budget.
pub fn backbone_forward(
    image: Tensor,
    params: &NetworkParams,
    arena: &mut DeviceArena,
) -> Result<Tensor, SegnetError> {
    let chain = params.backbone_chain()?;
    let input = arena.register(image);
    let out = run_stage(&chain, &input, arena)?;
    arena.free(input)?;
    Ok(arena.take(out)?)
}

/// Device bytes held while the attention stage runs on an `h x w` feature
/// grid: features and aux logits, scratch for margins, the pixel ordering,
/// the flattened features and the three projections, plus the result.
pub fn ecr_bytes(config: &NetworkConfig, h: usize, w: usize) -> Result<usize, SegnetError> {
    let n = h * w;
    let r = region_size(config.a, n)?;
    let (d, c, da) = (config.d, config.num_classes, config.attn_dim);
    let floats = n * d          // features
        + n * c                 // aux logits
        + n                     // margins
        + n * d                 // flattened features
        + n * da                // keys
        + n * d                 // values
        + r * (da + 2 * d)      // queries, gathered rows, update
        + da * d                // context
        + n * d; // result
    Ok(floats * 4 + n * std::mem::size_of::<usize>())
}

/// Smallest arena budget with which [`holistic_forward`] can process an
/// `height x width` image.
pub fn minimal_budget(
    config: &NetworkConfig,
    params: &NetworkParams,
    height: usize,
    width: usize,
) -> Result<usize, SegnetError> {
    let backbone = params.backbone_chain()?;
    let (fh, fw) = backbone.output_size(height, width)?;
    let one_tile = |chain: &OpChain| ChainCost { chain, batch: 1 }.tile_bytes(1, 1);
    let lrd = params.lrd_chain()?;
    let head = NetworkParams::head_chain(&params.seg_head)?;
    let aux = NetworkParams::head_chain(&params.aux_head)?;
    let upsample = Shape::new(1, config.num_classes, fh, fw).bytes()
        + Shape::new(1, config.num_classes, 1, width).bytes();
    Ok([
        one_tile(&backbone),
        one_tile(&lrd),
        one_tile(&aux),
        one_tile(&head),
        ecr_bytes(config, fh, fw)?,
        upsample,
    ]
    .into_iter()
    .max()
    .expect("non-empty"))
}

fn ecr_stage(
    config: &NetworkConfig,
    params: &NetworkParams,
    features: TensorHandle,
    aux: &TensorHandle,
    arena: &mut DeviceArena,
) -> Result<(TensorHandle, usize), SegnetError> {
    let started = Instant::now();
    let s = features.shape();
    let out_bytes = s.bytes();
    let pinned_bytes = out_bytes + aux.shape().bytes();
    let scratch_bytes = ecr_bytes(config, s.h, s.w)? - pinned_bytes - out_bytes;
    for h in [&features, aux] {
        arena.swap_in(h)?;
        arena.pin(h)?;
    }
    let scratch = arena.reserve(scratch_bytes)?;
    let out = arena.reserve(out_bytes)?;
    let result = ecr_forward_with_region(
        arena.get(&features)?,
        arena.get(aux)?,
        config.a,
        &params.attention,
    );
    arena.release(scratch);
    let (enhanced, region) = match result {
        Ok(v) => v,
        Err(e) => {
            arena.release(out);
            return Err(e.into());
        }
    };
    let enhanced = arena.fill(out, enhanced);
    arena.unpin(aux)?;
    arena.swap_out(aux)?;
    arena.unpin(&features)?;
    arena.free(features)?;
    arena.add_wall_time(started.elapsed());
    Ok((enhanced, region.len()))
}

/// Upsamples the logits to `height x width` band by band and takes the
/// per-pixel argmax, lowest class id on ties.
fn upsample_argmax(
    seg: &TensorHandle,
    height: usize,
    width: usize,
    arena: &mut DeviceArena,
) -> Result<LabelMask, SegnetError> {
    let started = Instant::now();
    let classes = seg.shape().c;
    arena.swap_in(seg)?;
    arena.pin(seg)?;
    let row_bytes = Shape::new(1, classes, 1, width).bytes();
    let room = arena.budget() - arena.resident_bytes();
    if room < row_bytes {
        return Err(OffloadError::OutOfBudget {
            requested: row_bytes,
            budget: arena.budget(),
            resident: arena.resident_bytes(),
        }
        .into());
    }
    let band = (room / row_bytes).clamp(1, height.max(1));
    let mut labels = vec![0u8; height * width];
    let mut y0 = 0;
    while y0 < height {
        let y1 = (y0 + band).min(height);
        let r = arena.reserve((y1 - y0) * row_bytes)?;
        let up = bilinear_resize_rows(arena.get(seg)?, height, width, y0, y1)?;
        let plane = (y1 - y0) * width;
        for p in 0..plane {
            let mut best = 0;
            let mut best_v = up.data()[p];
            for c in 1..classes {
                let v = up.data()[c * plane + p];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            labels[y0 * width + p] = best as u8;
        }
        arena.release(r);
        y0 = y1;
    }
    arena.unpin(seg)?;
    arena.add_wall_time(started.elapsed());
    Ok(LabelMask::new(height, width, labels)?)
}

/// Backbone, LRD, auxiliary head, hard-region attention, main head, then
/// upsampling to full resolution and argmax, all under
/// `config.arena_budget`.
pub fn holistic_forward(
    image: Tensor,
    config: &NetworkConfig,
    params: &NetworkParams,
) -> Result<SegmentationOutput, SegnetError> {
    config.validate()?;
    let s = image.shape();
    if s.n != 1 || s.c != config.in_bands || s.h == 0 || s.w == 0 {
        return Err(SegnetError::Config(format!(
            "expected a single non-empty {}-band image, got {s}",
            config.in_bands
        )));
    }
    let budget = config.arena_budget;
    let minimal = minimal_budget(config, params, s.h, s.w)?;
    if budget < minimal {
        return Err(OffloadError::InfeasibleBudget { budget, minimal }.into());
    }
    let mut arena = DeviceArena::new(budget);

    let input = arena.register(image);
    let features = run_stage(&params.backbone_chain()?, &input, &mut arena)?;
    arena.free(input)?;

    let lrd = run_stage(&params.lrd_chain()?, &features, &mut arena)?;
    arena.free(features)?;

    let aux = run_stage(&NetworkParams::head_chain(&params.aux_head)?, &lrd, &mut arena)?;
    let (enhanced, hard_pixels) = ecr_stage(config, params, lrd, &aux, &mut arena)?;

    let seg = run_stage(&NetworkParams::head_chain(&params.seg_head)?, &enhanced, &mut arena)?;
    arena.free(enhanced)?;

    let class_map = upsample_argmax(&seg, s.h, s.w, &mut arena)?;
    let stats = arena.stats();
    Ok(SegmentationOutput {
        class_map,
        seg_logits: arena.take(seg)?,
        aux_logits: arena.take(aux)?,
        hard_pixels,
        stats,
    })
}
