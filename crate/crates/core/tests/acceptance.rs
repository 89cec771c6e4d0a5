//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use holoseg::checks::{self, CheckResult, LARGE_BUDGET, LARGE_SIZE};
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_holoseg");
const SEED: u64 = 0;

fn cli(args: &[&str]) -> Result<std::process::Output, String> {
    Command::new(BIN)
        .args(args)
        .env_remove(holoseg::offload::BUDGET_ENV)
        .output()
        .map_err(|e| e.to_string())
}

fn cli_ok(args: &[&str]) -> Result<String, String> {
    let out = cli(args)?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "`holoseg {}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
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

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// `run` on a synthetic 4096x4096x4 image under a 256 MiB arena.
fn large_run(dir: &Path, out: &str) -> Result<Value, String> {
    let stats = cli_ok(&[
        "run",
        "--config",
        path(&dir.join("config.json")),
        "--budget",
        &LARGE_BUDGET.to_string(),
        "--seed",
        &SEED.to_string(),
        "--image",
        path(&dir.join("data/image.raster")),
        "--out",
        path(&dir.join(out)),
    ])?;
    serde_json::from_str(&stats).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temp dir");
    let dir = dir.path();
    let mut results = Vec::new();
    let mut report = |r: CheckResult| {
        println!("{r}");
        results.push(r.passed);
    };

    report(checks::tiled_equals_monolithic(60, SEED));

    std::fs::write(
        dir.join("config.json"),
        serde_json::to_string(&checks::compact_config()).expect("config json"),
    )
    .expect("write config");
    report(timed("budget_safety_cli", || {
        let size = LARGE_SIZE.to_string();
        cli_ok(&[
            "synth", "--height", &size, "--width", &size, "--bands", "4", "--classes", "6",
            "--seed", "0", "--out", path(&dir.join("data")),
        ])?;
        let stats = large_run(dir, "run_a")?;
        let peak = stats["peak_resident_bytes"].as_u64().ok_or("no peak")?;
        let swap_out = stats["swap_out"].as_u64().ok_or("no swap_out")?;
        let detail = format!("{LARGE_SIZE}x{LARGE_SIZE}x4 run, budget {LARGE_BUDGET}: {stats}");
        if peak <= LARGE_BUDGET as u64 && swap_out >= 1 {
            Ok(detail)
        } else {
            Err(detail)
        }
    }));

    report(checks::attention_equivalence(120, SEED));
    report(checks::hard_region_oracle(120, SEED));
    report(checks::receptive_field(SEED));
    report(checks::bae_correctness());
    report(checks::gradient_check(60, SEED));

    report(timed("determinism_cli", || {
        if !dir.join("run_a").exists() {
            return Err("first run missing".into());
        }
        large_run(dir, "run_b")?;
        checks::compare_runs(&dir.join("run_a"), &dir.join("run_b"))
    }));

    report(timed("check_subcommand", || {
        let out = cli(&["check"])?;
        let stdout = String::from_utf8_lossy(&out.stdout);
        let summary = stdout.lines().last().unwrap_or("").to_string();
        if out.status.success() {
            Ok(format!("exit 0, {summary}"))
        } else {
            Err(format!("exit {:?}: {stdout}", out.status.code()))
        }
    }));

    let failed = results.iter().filter(|&&p| !p).count();
    println!("acceptance: {} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
