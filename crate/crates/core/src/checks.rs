//! Verification suite behind the `check` subcommand and the acceptance
//! tests. Each check compares the implementation with an independent
//! reference (sorting, brute-force loops, f64 recomputation, finite
//! differences) on generated instances.

use std::path::Path;
use std::time::Instant;

use serde_json::Value;

use crate::bae::{boundary_weights, ce_gradient, weighted_ce, LabelMask, IGNORE_ID};
use crate::ecr::{
    efficient_attention_counted, gather, generic_attention_counted, relative_error, region_size,
    select_hard_region, AttentionMode, AttentionParams, HardRegion,
};
use crate::lrd::{influence_probe, influence_radius, LrdParams};
use crate::offload::{execute_tiled, plan_tiles, ChainCost, DeviceArena, OpChain, TileCost};
use crate::segnet::{
    holistic_forward, synth, write_outputs, NetworkConfig, NetworkParams, CLASS_MAP_FILE,
    STATS_FILE,
};
use crate::tensor::{seeded_init, ConvWeights, InitScheme, Shape, SplitMix64, Tensor};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: {} ({:.1}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> CheckResult {
    let started = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    CheckResult {
        name,
        passed,
        detail,
        seconds: started.elapsed().as_secs_f64(),
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Network used for the large-image and determinism runs: default depth and
/// hyperparameters, narrow layers.
pub fn compact_config() -> NetworkConfig {
    NetworkConfig {
        num_classes: 6,
        backbone_channels: vec![16, 32, 32],
        d: 16,
        k: 16,
        attn_dim: 16,
        ..NetworkConfig::default()
    }
}

fn random_conv(rng: &mut SplitMix64, cout: usize, cin: usize, k: usize, stride: usize) -> ConvWeights {
    let kernel = seeded_init(Shape::new(cout, cin, k, k), InitScheme::UniformFanIn, rng.next_u64());
    let bias = seeded_init(Shape::new(1, 1, 1, cout), InitScheme::UniformFanIn, rng.next_u64());
    ConvWeights::new(kernel, bias.into_data(), stride, (k - 1) / 2, 1).expect("valid shape")
}

fn random_lrd(rng: &mut SplitMix64, cin: usize, k: usize, d: usize) -> LrdParams {
    let mut p = LrdParams::seeded(cin, k, d, rng.next_u64());
    // Nonzero biases everywhere so every path is exercised.
    for w in [&mut p.reduce, &mut p.conv5, &mut p.fuse, &mut p.expand]
        .into_iter()
        .chain(p.branches.iter_mut().flat_map(|b| [&mut b.depthwise, &mut b.pointwise]))
    {
        for b in w.bias_mut() {
            *b = (rng.next_f32() - 0.5) * 0.2;
        }
    }
    p
}

/// Tiled execution of the LRD unit and of the first backbone stage equals
/// whole-image execution bit for bit, on `cases` random shapes and budgets.
pub fn tiled_equals_monolithic(cases: usize, seed: u64) -> CheckResult {
    timed("tiled_equals_monolithic", || {
        let mut rng = SplitMix64::new(SplitMix64::derive(seed, "check.tiling"));
        let mut tiles = 0u64;
        for case in 0..cases {
            let lrdu = case % 2 == 0;
            let h = 1 + rng.next_below(48) as usize;
            let w = 1 + rng.next_below(48) as usize;
            let n = 1 + rng.next_below(2) as usize;
            let chain = if lrdu {
                let k = 1 + rng.next_below(3) as usize;
                random_lrd(&mut rng, k, k, k).lrdu_chain().map_err(|e| e.to_string())?
            } else {
                let cin = 3 + rng.next_below(2) as usize;
                let cout = 1 + rng.next_below(8) as usize;
                let mut g = OpChain::new(cin);
                let x = g.conv(0, random_conv(&mut rng, cout, cin, 3, 2)).map_err(|e| e.to_string())?;
                g.relu(x).map_err(|e| e.to_string())?;
                g
            };
            let (oh, ow) = chain.output_size(h, w).map_err(|e| e.to_string())?;
            let cost = ChainCost { chain: &chain, batch: n };
            // Budget for a random core of at least 4x4 (or the whole grid).
            let ch = (4 + rng.next_below(oh as u64) as usize).min(oh);
            let cw = (4 + rng.next_below(ow as u64) as usize).min(ow);
            let budget = cost.tile_bytes(ch, cw);
            let x = seeded_init(Shape::new(n, chain.in_channels(), h, w), InitScheme::UniformFanIn, rng.next_u64());
            let mono = chain.forward(&x).map_err(|e| e.to_string())?;
            let plan = plan_tiles(oh, ow, &cost, budget).map_err(|e| e.to_string())?;
            let mut arena = DeviceArena::new(budget);
            let input = arena.register(x);
            let out = execute_tiled(&chain, &input, &plan, &mut arena).map_err(|e| e.to_string())?;
            let tiled = arena.get(&out).map_err(|e| e.to_string())?;
            let stats = arena.stats();
            ensure(tiled.bit_eq(&mono), || {
                format!(
                    "case {case} ({}, {h}x{w}, batch {n}, {} tiles) differs by {}",
                    if lrdu { "lrdu" } else { "backbone stage 1" },
                    plan.tiles.len(),
                    tiled.max_abs_diff(&mono)
                )
            })?;
            ensure(stats.peak_resident <= budget, || {
                format!("case {case}: peak {} over budget {budget}", stats.peak_resident)
            })?;
            tiles += stats.tiles_executed;
        }
        Ok(format!("{cases} cases bit-identical, {tiles} tiles total"))
    })
}

/// Stats of one pipeline run on a synthetic `size x size` 4-band image.
pub fn budget_safety(size: usize, budget: usize, seed: u64) -> CheckResult {
    timed("budget_safety", || {
        let config = NetworkConfig {
            arena_budget: budget,
            seed,
            ..compact_config()
        };
        let params = NetworkParams::seeded(&config);
        let backbone = params.backbone_chain().map_err(|e| e.to_string())?;
        let (fh, fw) = backbone.output_size(size, size).map_err(|e| e.to_string())?;
        let whole = ChainCost { chain: &backbone, batch: 1 }.tile_bytes(fh, fw);
        let (image, _) = synth(size, size, config.in_bands, config.num_classes, seed);
        let out = holistic_forward(image, &config, &params).map_err(|e| e.to_string())?;
        let s = out.stats;
        let detail = format!(
            "{size}x{size}x4 image, budget {budget}: peak {}, swap_in {}, swap_out {}, tiles {} (untiled backbone would need {whole})",
            s.peak_resident, s.swap_in_count, s.swap_out_count, s.tiles_executed
        );
        ensure(s.peak_resident <= budget && s.swap_out_count >= 1, || detail.clone())?;
        Ok(detail)
    })
}

/// Linear efficient attention equals the explicit-score reference, and its
/// multiply count doubles with the pixel count.
pub fn attention_equivalence(cases: usize, seed: u64) -> CheckResult {
    timed("attention_equivalence", || {
        let mut rng = SplitMix64::new(SplitMix64::derive(seed, "check.attention"));
        let mut worst = 0.0f32;
        for case in 0..cases {
            let h = 1 + rng.next_below(16) as usize;
            let w = 1 + rng.next_below(256 / h as u64) as usize;
            let n = h * w;
            let d = 1 + rng.next_below(16) as usize;
            let da = 1 + rng.next_below(32) as usize;
            let dv = 1 + rng.next_below(16) as usize;
            let r = (1 + rng.next_below(32) as usize).min(n);
            let f = seeded_init(Shape::new(1, d, h, w), InitScheme::UniformFanIn, rng.next_u64());
            let mut indices: Vec<usize> = (0..n).collect();
            for i in 0..r {
                let j = i + rng.next_below((n - i) as u64) as usize;
                indices.swap(i, j);
            }
            indices.truncate(r);
            indices.sort_unstable();
            let region = HardRegion {
                margins: vec![0.0; r],
                indices,
            };
            let hard = gather(&f, &region).map_err(|e| e.to_string())?;
            let p = AttentionParams::seeded(d, da, dv, AttentionMode::Linear, rng.next_u64());
            let (e, _) = efficient_attention_counted(&f, &hard, &p).map_err(|e| e.to_string())?;
            let (g, _) = generic_attention_counted(&f, &hard, &p).map_err(|e| e.to_string())?;
            let err = relative_error(&e, &g);
            worst = worst.max(err);
            ensure(err <= 1e-4, || {
                format!("case {case} (N={n}, |R|={r}, d_attn={da}): relative error {err:e}")
            })?;
        }

        let counts = |n_side: usize, r: usize| -> Result<(u64, u64), String> {
            let p = AttentionParams::seeded(16, 16, 16, AttentionMode::Linear, 1);
            let f = seeded_init(Shape::new(1, 16, n_side, 16), InitScheme::UniformFanIn, 2);
            let region = HardRegion {
                indices: (0..r).collect(),
                margins: vec![0.0; r],
            };
            let hard = gather(&f, &region).map_err(|e| e.to_string())?;
            let (_, e) = efficient_attention_counted(&f, &hard, &p).map_err(|e| e.to_string())?;
            let (_, g) = generic_attention_counted(&f, &hard, &p).map_err(|e| e.to_string())?;
            Ok((e.0, g.0))
        };
        // N = 128 -> 256, region fixed at 8 pixels and proportional (a = 10).
        let (e1, g1) = counts(8, 8)?;
        let (e2, g2) = counts(16, 8)?;
        let fixed = e2 as f64 / e1 as f64;
        let (p1, q1) = counts(8, region_size(10.0, 128).map_err(|e| e.to_string())?)?;
        let (p2, q2) = counts(16, region_size(10.0, 256).map_err(|e| e.to_string())?)?;
        let proportional = p2 as f64 / p1 as f64;
        let generic = (g2 as f64 / g1 as f64, q2 as f64 / q1 as f64);
        let detail = format!(
            "{cases} cases, worst relative error {worst:.2e}; efficient multiply ratio on N doubling {fixed:.3} (|R| fixed), {proportional:.3} (|R| = 10% of N); generic {:.3} and {:.3}", generic.0, generic.1
        );
        ensure((fixed - 2.0).abs() <= 0.1 && (proportional - 2.0).abs() <= 0.1, || detail.clone())?;
        Ok(detail)
    })
}

fn sort_oracle(values: &[f32], m: usize) -> Vec<usize> {
    let mut all: Vec<(f32, usize)> = values.iter().copied().zip(0..).collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite").then(a.1.cmp(&b.1)));
    let mut picked: Vec<usize> = all[..m].iter().map(|&(_, i)| i).collect();
    picked.sort_unstable();
    picked
}

fn oracle_size(a: f64, n: usize) -> usize {
    // Exact rational ceil(a * n / 100) for a with at most two decimals.
    let hundredths = (a * 100.0).round() as u128;
    (hundredths * n as u128).div_ceil(10_000) as usize
}

/// Hard-region selection equals an exhaustive sort, with ties, and the
/// region size is exact for the sweep percentages.
pub fn hard_region_oracle(cases: usize, seed: u64) -> CheckResult {
    timed("hard_region_oracle", || {
        let mut rng = SplitMix64::new(SplitMix64::derive(seed, "check.region"));
        let sweep = [1.25, 2.5, 5.0, 10.0, 20.0];
        let run = |values: &[f32], h: usize, w: usize, a: f64| -> Result<(), String> {
            let t = Tensor::new(Shape::new(1, 1, h, w), values.to_vec()).map_err(|e| e.to_string())?;
            let r = select_hard_region(&t, a).map_err(|e| e.to_string())?;
            let m = oracle_size(a, values.len());
            ensure(r.len() == m, || format!("a={a}, N={}: |R|={} expected {m}", values.len(), r.len()))?;
            ensure(r.indices == sort_oracle(values, m), || {
                format!("a={a}, N={}: selection differs from sort oracle", values.len())
            })
        };
        for case in 0..cases {
            let h = 1 + rng.next_below(24) as usize;
            let w = 1 + rng.next_below(24) as usize;
            // Few distinct levels so ties are frequent.
            let levels = 1 + rng.next_below(8);
            let values: Vec<f32> = (0..h * w).map(|_| rng.next_below(levels) as f32 * 0.5).collect();
            let a = if case % 2 == 0 {
                sweep[case / 2 % sweep.len()]
            } else {
                0.01 + rng.next_f64() * 99.99
            };
            run(&values, h, w, a)?;
        }
        // Tie fixtures.
        run(&[0.0; 64], 8, 8, 10.0)?;
        run(&[1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0], 2, 4, 25.0)?;
        run(&[5.0, 1.0, 3.0, 2.0], 1, 4, 25.0)?;
        let mut ramp: Vec<f32> = (0..100).map(|i| (i % 10) as f32).collect();
        ramp.reverse();
        run(&ramp, 10, 10, 5.0)?;
        for &a in &sweep {
            for n in [1usize, 7, 64, 100, 400, 4096, 262_144] {
                let m = region_size(a, n).map_err(|e| e.to_string())?;
                ensure(m == oracle_size(a, n), || format!("a={a}, N={n}: size {m}"))?;
            }
        }
        Ok(format!("{cases} fuzzed maps and 4 tie fixtures match; sizes exact for a in {sweep:?}"))
    })
}

/// Measured influence radius of the LRD block against the analytic value.
pub fn receptive_field(seed: u64) -> CheckResult {
    timed("receptive_field", || {
        let mut rng = SplitMix64::new(SplitMix64::derive(seed, "check.rf"));
        let side: usize = 37;
        let probe: (usize, usize) = (18, 18);
        let ring = |map: &Tensor, r: usize| {
            let mut max = 0.0f32;
            for y in 0..side {
                for x in 0..side {
                    if y.abs_diff(probe.0).max(x.abs_diff(probe.1)) == r {
                        max = max.max(map.at(0, 0, y, x));
                    }
                }
            }
            max
        };
        let mut notes = Vec::new();
        for (i, (cin, k)) in [(1, 2), (2, 2), (1, 3)].into_iter().enumerate() {
            let mut p = random_lrd(&mut rng, cin, k, 2);
            let analytic = p.lrd_chain().and_then(|g| Ok(g.receptive_field_radius()?)).map_err(|e| e.to_string())?;
            ensure(analytic == 17, || format!("config {i}: analytic radius {analytic}"))?;
            let base = Tensor::zeros(Shape::new(1, cin, side, side));
            let map = influence_probe(&p, &base, probe).map_err(|e| e.to_string())?;
            let (at17, at18) = (ring(&map, 17), ring(&map, 18));
            ensure(at17 > 0.0 && at18 == 0.0, || {
                format!("config {i}: influence {at17:e} at distance 17, {at18:e} at 18")
            })?;
            let full = influence_radius(&map, probe);
            if i == 0 {
                p.zero_branch(31);
                let ablated = influence_probe(&p, &base, probe).map_err(|e| e.to_string())?;
                let (at9, at10) = (ring(&ablated, 9), ring(&ablated, 10));
                ensure(at9 > 0.0 && at10 == 0.0, || {
                    format!("ablated: influence {at9:e} at distance 9, {at10:e} at 10")
                })?;
                ensure(influence_radius(&ablated, probe) < full, || "ablation did not shrink".into())?;
                notes.push("ablated radius 9".to_string());
            }
            notes.push(format!("config {i} radius {}", full.unwrap_or(0)));
        }
        Ok(notes.join(", "))
    })
}

/// Brute-force boundary band of a vertical step at column `c` for the 5x5
/// pair: the window `x - 2 ..= x + 2` straddles the step.
fn step_band(c: usize, x: usize) -> bool {
    x + 2 >= c && x < c + 2
}

pub fn bae_correctness() -> CheckResult {
    timed("bae_correctness", || {
        let (h, w, c) = (12, 24, 11);
        let mask = LabelMask::from_fn(h, w, |_, x| u8::from(x >= c));
        let weights = boundary_weights(&mask, 5).map_err(|e| e.to_string())?;
        for y in 0..h {
            for x in 0..w {
                let expected = if step_band(c, x) { 2.0 } else { 1.0 };
                ensure(weights.weights[y * w + x] == expected, || {
                    format!("half-plane weight at ({y}, {x}) is {}", weights.weights[y * w + x])
                })?;
            }
        }
        let flat = LabelMask::from_fn(h, w, |_, _| 7);
        let ones = boundary_weights(&flat, 5).map_err(|e| e.to_string())?;
        ensure(ones.weights.iter().all(|&v| v == 1.0), || "constant mask is not all ones".into())?;
        let mut errs = Vec::new();
        for classes in [2usize, 24] {
            let mut rng = SplitMix64::new(classes as u64);
            let m = LabelMask::from_fn(16, 16, |_, _| rng.next_below(classes as u64) as u8);
            let wm = boundary_weights(&m, 5).map_err(|e| e.to_string())?;
            let logits = Tensor::full(Shape::new(1, classes, 16, 16), -3.25);
            let loss = weighted_ce(&logits, &m, &wm).map_err(|e| e.to_string())?;
            let err = (loss - (classes as f64).ln()).abs();
            ensure(err <= 1e-6, || format!("C={classes}: loss {loss} vs ln C"))?;
            errs.push(format!("C={classes} error {err:.1e}"));
        }
        Ok(format!("band columns {}..={} weighted 2; constant mask all 1; {}", c - 2, c + 1, errs.join(", ")))
    })
}

/// f64 reference loss over f64 logits.
fn reference_loss(logits: &[f64], classes: usize, mask: &LabelMask, weights: &[f32]) -> f64 {
    let n = mask.labels.len();
    let (mut num, mut den) = (0.0, 0.0);
    for p in 0..n {
        let y = mask.labels[p];
        if y == IGNORE_ID {
            continue;
        }
        let z: f64 = (0..classes).map(|c| logits[c * n + p].exp()).sum();
        let wp = f64::from(weights[p]);
        num += wp * (z.ln() - logits[usize::from(y) * n + p]);
        den += wp;
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

pub fn gradient_check(cases: usize, seed: u64) -> CheckResult {
    timed("gradient_check", || {
        let mut rng = SplitMix64::new(SplitMix64::derive(seed, "check.gradient"));
        let eps = 1e-3;
        let mut worst = 0.0f64;
        let (mut boundary_px, mut ignored_px) = (0usize, 0usize);
        for case in 0..cases {
            let h = 3 + rng.next_below(6) as usize;
            let w = 3 + rng.next_below(6) as usize;
            let classes = 2 + rng.next_below(5) as usize;
            // Two regions split by a random column, plus scattered ignore
            // pixels, so both weight levels and exclusion are exercised.
            let split = 1 + rng.next_below(w as u64 - 1) as usize;
            let (left, right) = (0u8, 1 + rng.next_below(classes as u64 - 1) as u8);
            let mask = LabelMask::from_fn(h, w, |_, x| {
                if rng.next_below(6) == 0 {
                    IGNORE_ID
                } else if x < split {
                    left
                } else {
                    right
                }
            });
            let wm = boundary_weights(&mask, 5).map_err(|e| e.to_string())?;
            boundary_px += wm.weights.iter().filter(|&&v| v == 2.0).count();
            ignored_px += mask.labels.iter().filter(|&&l| l == IGNORE_ID).count();
            let mut logits = seeded_init(Shape::new(1, classes, h, w), InitScheme::UniformFanIn, rng.next_u64());
            logits.data_mut().iter_mut().for_each(|v| *v *= 6.0);
            let grad = ce_gradient(&logits, &mask, &wm).map_err(|e| e.to_string())?;
            let base: Vec<f64> = logits.data().iter().map(|&v| f64::from(v)).collect();
            for i in 0..base.len() {
                let mut x = base.clone();
                x[i] = base[i] + eps;
                let plus = reference_loss(&x, classes, &mask, &wm.weights);
                x[i] = base[i] - eps;
                let minus = reference_loss(&x, classes, &mask, &wm.weights);
                let fd = (plus - minus) / (2.0 * eps);
                let err = (f64::from(grad.data()[i]) - fd).abs();
                worst = worst.max(err);
                ensure(err <= 1e-4, || format!("case {case}, logit {i}: analytic {} vs fd {fd}", grad.data()[i]))?;
            }
        }
        ensure(boundary_px > 0 && ignored_px > 0, || "fixtures lack boundary or ignore pixels".into())?;
        Ok(format!(
            "{cases} cases, worst abs error {worst:.1e} ({boundary_px} boundary, {ignored_px} ignored pixels)"
        ))
    })
}

/// Stats JSON with the timing field removed.
pub fn stats_without_time(json: &str) -> Result<Value, String> {
    let mut v: Value = serde_json::from_str(json).map_err(|e| e.to_string())?;
    v.as_object_mut()
        .ok_or("stats is not an object")?
        .remove("wall_seconds")
        .ok_or("stats lacks wall_seconds")?;
    Ok(v)
}

/// Compares two run directories: class maps byte for byte, stats JSON with
/// timing removed.
pub fn compare_runs(a: &Path, b: &Path) -> Result<String, String> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
    let (ma, mb) = (read(&a.join(CLASS_MAP_FILE))?, read(&b.join(CLASS_MAP_FILE))?);
    ensure(ma == mb, || "class maps differ".into())?;
    let text = |p: &Path| String::from_utf8(read(p)?).map_err(|e| e.to_string());
    let (sa, sb) = (
        stats_without_time(&text(&a.join(STATS_FILE))?)?,
        stats_without_time(&text(&b.join(STATS_FILE))?)?,
    );
    ensure(sa == sb, || format!("stats differ: {sa} vs {sb}"))?;
    Ok(format!("{} byte class maps identical, stats {sa}", ma.len()))
}

/// Two pipeline runs with identical inputs write identical artifacts.
pub fn determinism(size: usize, budget: usize, seed: u64, scratch: &Path) -> CheckResult {
    timed("determinism", || {
        let config = NetworkConfig {
            arena_budget: budget,
            seed,
            ..compact_config()
        };
        let mut dirs = Vec::new();
        for run in 0..2 {
            let params = NetworkParams::seeded(&config);
            let (image, _) = synth(size, size, config.in_bands, config.num_classes, seed);
            let out = holistic_forward(image, &config, &params).map_err(|e| e.to_string())?;
            let dir = scratch.join(format!("run{run}"));
            write_outputs(&out, &dir).map_err(|e| e.to_string())?;
            dirs.push(dir);
        }
        compare_runs(&dirs[0], &dirs[1])
    })
}

pub const LARGE_SIZE: usize = 4096;
pub const LARGE_BUDGET: usize = 256 << 20;

/// Every check, in order; `report` sees each result as soon as it is known.
pub fn run_all(seed: u64, scratch: &Path, mut report: impl FnMut(&CheckResult)) -> Vec<CheckResult> {
    let checks: Vec<Box<dyn FnOnce() -> CheckResult>> = vec![
        Box::new(move || tiled_equals_monolithic(60, seed)),
        Box::new(move || budget_safety(LARGE_SIZE, LARGE_BUDGET, seed)),
        Box::new(move || attention_equivalence(120, seed)),
        Box::new(move || hard_region_oracle(120, seed)),
        Box::new(move || receptive_field(seed)),
        Box::new(bae_correctness),
        Box::new(move || gradient_check(60, seed)),
        Box::new(move || determinism(1024, 8 << 20, seed, scratch)),
    ];
    checks
        .into_iter()
        .map(|c| {
            let r = c();
            report(&r);
            r
        })
        .collect()
}
