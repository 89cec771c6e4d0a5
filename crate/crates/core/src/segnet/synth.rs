use crate::bae::LabelMask;
use crate::tensor::{Shape, SplitMix64, Tensor};

/// Side of the grid cell holding one Voronoi site.
pub const CELL: usize = 48;

fn unit(seed: u64, i: u64) -> f32 {
    (SplitMix64::at(seed, i) >> 40) as f32 / (1u64 << 24) as f32
}

/// Deterministic image and mask pair.
///
/// The mask is a Voronoi partition with one jittered site per
/// `CELL x CELL` block, each site carrying a random class. The image gives
/// every class a base colour per band in `[0.1, 0.9]` plus uniform noise of
/// amplitude 0.1.
pub fn synth(height: usize, width: usize, bands: usize, classes: usize, seed: u64) -> (Tensor, LabelMask) {
    assert!((1..=255).contains(&classes), "classes must be in 1..=255");
    let ny = height.div_ceil(CELL).max(1);
    let nx = width.div_ceil(CELL).max(1);
    let site_seed = SplitMix64::derive(seed, "synth.sites");
    let class_seed = SplitMix64::derive(seed, "synth.classes");
    let sites: Vec<(i64, i64)> = (0..ny * nx)
        .map(|i| {
            let (cy, cx) = (i / nx, i % nx);
            let jy = SplitMix64::at(site_seed, 2 * i as u64) % CELL as u64;
            let jx = SplitMix64::at(site_seed, 2 * i as u64 + 1) % CELL as u64;
            ((cy * CELL) as i64 + jy as i64, (cx * CELL) as i64 + jx as i64)
        })
        .collect();
    let site_class: Vec<u8> = (0..ny * nx)
        .map(|i| (SplitMix64::at(class_seed, i as u64) % classes as u64) as u8)
        .collect();

    let mask = LabelMask::from_fn(height, width, |y, x| {
        let (cy, cx) = (y / CELL, x / CELL);
        let mut best = (i64::MAX, 0usize);
        for sy in cy.saturating_sub(1)..(cy + 2).min(ny) {
            for sx in cx.saturating_sub(1)..(cx + 2).min(nx) {
                let i = sy * nx + sx;
                let (py, px) = sites[i];
                let d = (py - y as i64).pow(2) + (px - x as i64).pow(2);
                if d < best.0 {
                    best = (d, i);
                }
            }
        }
        site_class[best.1]
    });

    let color_seed = SplitMix64::derive(seed, "synth.colors");
    let noise_seed = SplitMix64::derive(seed, "synth.noise");
    let plane = height * width;
    let mut image = Tensor::zeros(Shape::new(1, bands, height, width));
    for b in 0..bands {
        let base: Vec<f32> = (0..classes)
            .map(|c| 0.1 + 0.8 * unit(color_seed, (c * bands + b) as u64))
            .collect();
        let dst = image.plane_mut(0, b);
        for (p, v) in dst.iter_mut().enumerate() {
            let noise = 0.2 * unit(noise_seed, (b * plane + p) as u64) - 0.1;
            *v = base[usize::from(mask.labels[p])] + noise;
        }
    }
    (image, mask)
}
