use std::time::Instant;

use super::chain::dedup;
use super::{DeviceArena, OffloadError, OpChain, TensorHandle, TilePlan};
use crate::tensor::{Shape, Tensor, View};

/// Runs `chain` over the image behind `input`, one plan tile at a time.
///
/// For every tile the needed region of each node is derived from the core
/// by back-projection; the input region is staged to the device, nodes are
/// evaluated in order with the same region kernels as whole-image evaluation,
/// and the core of the output is written back to a host-resident result.
/// Output equals [`OpChain::forward`] bit for bit.
///
/// Exceeding the arena budget mid-tile is a planning defect and panics.
pub fn execute_tiled(
    chain: &OpChain,
    input: &TensorHandle,
    plan: &TilePlan,
    arena: &mut DeviceArena,
) -> Result<TensorHandle, OffloadError> {
    let started = Instant::now();
    let s = input.shape();
    if s.c != chain.in_channels() {
        return Err(crate::tensor::TensorError::ShapeMismatch {
            op: "execute_tiled",
            expected: format!("{} input channels", chain.in_channels()),
            found: format!("{s}"),
        }
        .into());
    }
    let sizes = chain.spatial_sizes(s.h, s.w)?;
    let out_id = chain.output();
    let (oh, ow) = sizes[out_id];
    if (plan.height, plan.width) != (oh, ow) {
        return Err(OffloadError::PlanMismatch(format!(
            "plan covers {}x{} but the chain produces {oh}x{ow}",
            plan.height, plan.width
        )));
    }
    if let (Some(halo), Ok(rf)) = (plan.halo, chain.receptive_field_radius()) {
        if halo != rf {
            return Err(OffloadError::PlanMismatch(format!(
                "plan halo {halo} differs from the chain's receptive field {rf}"
            )));
        }
    }
    plan.validate()?;

    // The whole input is only ever read through staged regions.
    if !arena.is_pinned(input)? {
        arena.swap_out(input)?;
    }
    let output = arena.register(Tensor::zeros(Shape::new(s.n, chain.out_channels(), oh, ow)));
    let last_use = chain.last_use();

    for core in &plan.tiles {
        let rects = chain.needed_rects(*core, &sizes);
        let mut live: Vec<Option<TensorHandle>> = vec![None; chain.len()];
        live[0] = Some(
            arena
                .stage_region(input, rects[0])
                .unwrap_or_else(|e| panic!("staging tile input {}: {e}", rects[0])),
        );
        for i in 1..chain.len() {
            let args = dedup(chain.inputs(i));
            for &j in &args {
                let h = live[j].as_ref().expect("inputs are computed first");
                arena
                    .swap_in(h)
                    .unwrap_or_else(|e| panic!("tile working set exceeds the budget: {e}"));
                arena.pin(h)?;
            }
            let bytes = Shape::new(s.n, chain.channels(i), rects[i].h, rects[i].w).bytes();
            let reservation = arena
                .reserve(bytes)
                .unwrap_or_else(|e| panic!("tile working set exceeds the budget: {e}"));
            let value = {
                let views = chain
                    .inputs(i)
                    .iter()
                    .map(|&j| {
                        let h = live[j].as_ref().expect("live input");
                        Ok(View::placed(arena.get(h)?, rects[j], sizes[j]))
                    })
                    .collect::<Result<Vec<_>, OffloadError>>()?;
                chain.eval_region(i, &views, rects[i])
            };
            let value = match value {
                Ok(v) => v,
                Err(e) => {
                    arena.release(reservation);
                    return Err(e);
                }
            };
            live[i] = Some(arena.fill(reservation, value));
            for &j in &args {
                let h = live[j].take().expect("live input");
                if last_use[j] == i {
                    arena.free(h)?;
                } else {
                    arena.unpin(&h)?;
                    live[j] = Some(h);
                }
            }
        }
        let result = live[out_id].take().expect("output computed");
        arena.write_back(&output, &result, *core)?;
        arena.free(result)?;
        arena.record_tile();
    }
    arena.add_wall_time(started.elapsed());
    Ok(output)
}
