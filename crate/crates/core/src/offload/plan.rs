use super::{OffloadError, OpChain};
use crate::tensor::{Rect, Shape};

/// Per-tile device cost model used by the planner.
pub trait TileCost {
    /// Halo width when the cost belongs to a stride-1 chain.
    fn halo(&self) -> Option<usize>;

    /// Upper bound on device bytes needed to produce a `core_h x core_w`
    /// block of outputs.
    fn tile_bytes(&self, core_h: usize, core_w: usize) -> usize;
}

/// Cost of a chain of `channels`-wide stride-1 layers with receptive-field
/// radius `rf`: input tile with halo, output tile and one intermediate the
/// size of the input tile.
#[derive(Clone, Copy, Debug)]
pub struct UniformChainCost {
    pub rf: usize,
    pub channels: usize,
}

impl TileCost for UniformChainCost {
    fn halo(&self) -> Option<usize> {
        Some(self.rf)
    }

    fn tile_bytes(&self, core_h: usize, core_w: usize) -> usize {
        let padded = Shape::new(1, self.channels, core_h + 2 * self.rf, core_w + 2 * self.rf);
        let core = Shape::new(1, self.channels, core_h, core_w);
        2 * padded.bytes() + core.bytes()
    }
}

/// Exact cost of running an [`OpChain`] on batch-`batch` input with the tiled
/// executor.
#[derive(Clone, Copy, Debug)]
pub struct ChainCost<'a> {
    pub chain: &'a OpChain,
    pub batch: usize,
}

impl TileCost for ChainCost<'_> {
    fn halo(&self) -> Option<usize> {
        self.chain.receptive_field_radius().ok()
    }

    fn tile_bytes(&self, core_h: usize, core_w: usize) -> usize {
        self.chain.tile_bytes(self.batch, core_h, core_w)
    }
}

/// Partition of an `height x width` output grid into core rectangles, in
/// row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilePlan {
    pub height: usize,
    pub width: usize,
    /// Extra input pixels each core needs on every side (stride-1 chains).
    /// Strided chains derive their input regions by back-projection instead.
    pub halo: Option<usize>,
    pub tiles: Vec<Rect>,
}

impl TilePlan {
    pub fn single(height: usize, width: usize, halo: Option<usize>) -> Self {
        Self {
            height,
            width,
            halo,
            tiles: vec![Rect::full(height, width)],
        }
    }

    /// Row-major grid of `core_h x core_w` cores; the last row and column
    /// take the remainder.
    pub fn grid(
        height: usize,
        width: usize,
        halo: Option<usize>,
        core_h: usize,
        core_w: usize,
    ) -> Self {
        let core_h = core_h.clamp(1, height.max(1));
        let core_w = core_w.clamp(1, width.max(1));
        let mut tiles = Vec::new();
        for y in (0..height).step_by(core_h) {
            for x in (0..width).step_by(core_w) {
                tiles.push(Rect::new(y, x, core_h.min(height - y), core_w.min(width - x)));
            }
        }
        Self {
            height,
            width,
            halo,
            tiles,
        }
    }

    /// `ny x nx` cores of nearly equal size (differing by at most one pixel,
    /// larger ones first).
    pub fn balanced(height: usize, width: usize, halo: Option<usize>, ny: usize, nx: usize) -> Self {
        let rows = split(height, ny);
        let cols = split(width, nx);
        let mut tiles = Vec::with_capacity(rows.len() * cols.len());
        for &(y, h) in &rows {
            for &(x, w) in &cols {
                tiles.push(Rect::new(y, x, h, w));
            }
        }
        Self {
            height,
            width,
            halo,
            tiles,
        }
    }

    /// A tile's core grown by the halo on every side, before clipping, as
    /// `(top, left, height, width)` with possibly negative origin.
    pub fn padded(&self, core: &Rect) -> (i64, i64, usize, usize) {
        let halo = self.halo.unwrap_or(0);
        (
            core.y as i64 - halo as i64,
            core.x as i64 - halo as i64,
            core.h + 2 * halo,
            core.w + 2 * halo,
        )
    }

    /// The padded tile clipped to the image.
    pub fn halo_rect(&self, core: &Rect) -> Rect {
        let halo = self.halo.unwrap_or(0);
        let y = core.y.saturating_sub(halo);
        let x = core.x.saturating_sub(halo);
        let bottom = (core.bottom() + halo).min(self.height);
        let right = (core.right() + halo).min(self.width);
        Rect::new(y, x, bottom - y, right - x)
    }

    /// Cores must be non-empty, inside the grid, pairwise disjoint and cover
    /// it exactly.
    pub fn validate(&self) -> Result<(), OffloadError> {
        let bounds = Rect::full(self.height, self.width);
        let mut area = 0usize;
        for (i, t) in self.tiles.iter().enumerate() {
            if t.is_empty() || !bounds.contains(t) {
                return Err(OffloadError::PlanMismatch(format!(
                    "tile {t} is empty or outside {}x{}",
                    self.height, self.width
                )));
            }
            if let Some(o) = self.tiles[..i].iter().find(|o| o.intersects(t)) {
                return Err(OffloadError::PlanMismatch(format!(
                    "tiles {o} and {t} overlap"
                )));
            }
            area += t.area();
        }
        if area != bounds.area() {
            return Err(OffloadError::PlanMismatch(format!(
                "tiles cover {area} of {} pixels",
                bounds.area()
            )));
        }
        Ok(())
    }
}

fn split(len: usize, parts: usize) -> Vec<(usize, usize)> {
    let parts = parts.clamp(1, len.max(1));
    let (base, extra) = (len / parts, len % parts);
    let mut at = 0;
    (0..parts)
        .map(|i| {
            let size = base + usize::from(i < extra);
            let r = (at, size);
            at += size;
            r
        })
        .collect()
}

/// Largest `v` in `[lo, hi]` with `fits(v)`, assuming `fits` is monotone
/// decreasing and `fits(lo)` holds.
fn largest(lo: usize, hi: usize, fits: impl Fn(usize) -> bool) -> usize {
    let (mut lo, mut hi) = (lo, hi);
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    lo
}

/// Plans the largest square-ish cores whose working set fits `budget`.
///
/// The side of a square core is maximised first; if that spans a whole image
/// dimension the other side grows as far as the budget allows. The image is
/// then cut into that many rows and columns of nearly equal size.
pub fn plan_tiles(
    height: usize,
    width: usize,
    cost: &dyn TileCost,
    budget: usize,
) -> Result<TilePlan, OffloadError> {
    let halo = cost.halo();
    if height == 0 || width == 0 {
        return Err(OffloadError::PlanMismatch(format!(
            "cannot tile an empty {height}x{width} grid"
        )));
    }
    let minimal = cost.tile_bytes(1, 1);
    if minimal > budget {
        return Err(OffloadError::InfeasibleBudget { budget, minimal });
    }
    let fits = |h: usize, w: usize| cost.tile_bytes(h, w) <= budget;
    if fits(height, width) {
        return Ok(TilePlan::single(height, width, halo));
    }
    let side = largest(1, height.max(width), |s| fits(s.min(height), s.min(width)));
    let mut core_h = side.min(height);
    let mut core_w = side.min(width);
    if core_h == height {
        core_w = largest(core_w, width, |w| fits(height, w));
    } else if core_w == width {
        core_h = largest(core_h, height, |h| fits(h, width));
    }
    Ok(TilePlan::balanced(
        height,
        width,
        halo,
        height.div_ceil(core_h),
        width.div_ceil(core_w),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn degenerate_single_tile() {
        let cost = UniformChainCost { rf: 0, channels: 4 };
        let plan = plan_tiles(64, 48, &cost, cost.tile_bytes(64, 48)).unwrap();
        assert_eq!(plan.tiles, vec![Rect::full(64, 48)]);
    }

    #[test]
    fn fixed_core_grid_padding() {
        let plan = TilePlan::grid(100, 100, Some(17), 50, 50);
        assert_eq!(plan.tiles.len(), 4);
        for t in &plan.tiles {
            let (_, _, h, w) = plan.padded(t);
            assert_eq!((h, w), (84, 84));
        }
        assert_eq!(plan.halo_rect(&plan.tiles[0]), Rect::new(0, 0, 67, 67));
        assert_eq!(plan.halo_rect(&plan.tiles[3]), Rect::new(33, 33, 67, 67));
        plan.validate().unwrap();
    }

    #[test]
    fn infeasible_budget_reports_minimum() {
        let cost = UniformChainCost { rf: 17, channels: 16 };
        let minimal = cost.tile_bytes(1, 1);
        match plan_tiles(1000, 1000, &cost, minimal - 1) {
            Err(OffloadError::InfeasibleBudget { minimal: m, .. }) => assert_eq!(m, minimal),
            other => panic!("{other:?}"),
        }
        assert!(plan_tiles(1000, 1000, &cost, minimal).is_ok());
    }

    #[test]
    fn validate_rejects_overlap_and_gaps() {
        let mut plan = TilePlan::grid(10, 10, None, 5, 5);
        plan.tiles[1] = Rect::new(0, 4, 5, 6);
        assert!(plan.validate().is_err());
        let mut plan = TilePlan::grid(10, 10, None, 5, 5);
        plan.tiles.pop();
        assert!(plan.validate().is_err());
    }

    proptest! {
        #[test]
        fn plans_partition_and_fit(
            h in 1usize..400,
            w in 1usize..400,
            rf in 0usize..20,
            channels in 1usize..8,
            slack in 0usize..2_000_000,
        ) {
            let cost = UniformChainCost { rf, channels };
            let budget = cost.tile_bytes(1, 1) + slack;
            let plan = plan_tiles(h, w, &cost, budget).unwrap();
            plan.validate().unwrap();
            let area: usize = plan.tiles.iter().map(|t| t.area()).sum();
            prop_assert_eq!(area, h * w);
            for t in &plan.tiles {
                prop_assert!(cost.tile_bytes(t.h, t.w) <= budget);
            }
        }
    }
}
