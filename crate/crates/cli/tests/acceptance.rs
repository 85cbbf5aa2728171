//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 8 and 10 train the desk preset through the `usdc` binary (twice for
//! criterion 10) and take most of the run time. Set `USDC_ACCEPTANCE_SKIP_TRAINING=1`
//! to report them as SKIP instead.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use usdc_core::harness::{eval_threads, evaluate, RunState, TaskSelect};
use usdc_core::oracle;
use usdc_core::pipeline::Variant;

struct Outcome {
    passed: bool,
    detail: String,
}

fn pass_if(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn within(elapsed: Duration, budget: Duration) -> bool {
    elapsed <= budget
}

fn qp_vs_grid() -> anyhow::Result<Outcome> {
    let r = oracle::qp_oracle_suite(500, 101)?;
    let ok = r.passed(1e-3, 1e-6) && within(r.elapsed, Duration::from_secs(10));
    Ok(pass_if(
        ok,
        format!(
            "{} instances ({} modified), max objective gap {:.2e} (≤ 1e-3), max KKT residual {:.2e} (< 1e-6), {:.2?} (≤ 10 s)",
            r.instances, r.modified, r.max_objective_gap, r.max_kkt, r.elapsed
        ),
    ))
}

fn barrier_derivatives() -> anyhow::Result<Outcome> {
    let r = oracle::ttcbf_fd_suite(1000, 102, 1e-4);
    Ok(pass_if(
        r.passed(1e-3),
        format!(
            "{} poses, max relative error h' {:.2e}, h'' coefficients {:.2e} (< 1e-3)",
            r.poses, r.max_rel_h_dot, r.max_rel_h_ddot
        ),
    ))
}

fn gradients() -> anyhow::Result<Outcome> {
    let t = Instant::now();
    let checks = oracle::gradient_checks(103, 1e-4, 1e-6)?;
    let elapsed = t.elapsed();
    let worst = checks.iter().map(|c| c.max_rel).fold(0.0, f64::max);
    let worst_entry = checks.iter().map(|c| c.worst_entry).fold(0.0, f64::max);
    let names: Vec<String> = checks
        .iter()
        .map(|c| format!("{}/{:?}={:.1e}", c.network, c.encoder, c.max_rel))
        .collect();
    Ok(pass_if(
        worst < 1e-4 && within(elapsed, Duration::from_secs(60)),
        format!(
            "worst network-wise relative error {worst:.2e} (< 1e-4) in {elapsed:.2?} (≤ 60 s): {}; worst single entry {worst_entry:.1e}",
            names.join(", ")
        ),
    ))
}

fn cvar() -> anyhow::Result<Outcome> {
    let r = oracle::cvar_suite(10_000, 104)?;
    Ok(pass_if(
        r.passed(),
        format!(
            "{} draws, |cvar(q,1) − mean| ≤ {:.1e} (≤ 1e-12), β=0.25 tail mismatches {}",
            r.draws, r.max_mean_gap, r.tail_mismatches
        ),
    ))
}

fn uncertainty() -> anyhow::Result<Outcome> {
    let r = oracle::uncertainty_suite(100_000, 105)?;
    Ok(pass_if(
        r.passed(),
        format!(
            "cloned-ensemble σ_EU = {:.1e}, softmax weight-sum error {:.1e} (≤ 1e-12), σ_JU outside [min, max] in {} of {} draws",
            r.cloned_sigma_eu, r.max_weight_sum_error, r.joint_out_of_range, r.draws
        ),
    ))
}

fn forward_invariance() -> anyhow::Result<Outcome> {
    let r = oracle::forward_invariance_suite(1000, 60, 106)?;
    let ok = r.passed() && within(r.elapsed, Duration::from_secs(120));
    Ok(pass_if(
        ok,
        format!(
            "{} rollouts, {} fully feasible: min h_veh {:.3} ≥ {:.3}; {:.2?} (≤ 2 min); {} rollouts needed a relaxed QP ({} at the first step), min h over all {:.3}",
            r.rollouts,
            r.rollouts - r.relaxed_rollouts,
            r.min_h,
            r.bound,
            r.elapsed,
            r.relaxed_rollouts,
            r.relaxed_at_start,
            r.min_h_all
        ),
    ))
}

fn row_count() -> anyhow::Result<Outcome> {
    let (got, want) = oracle::row_count_check(5, 4, 107)?;
    Ok(pass_if(got == want, format!("{got} rows for N=5, M=4 (expected 3N+M = {want})")))
}

fn train_desk(out: &Path) -> anyhow::Result<Duration> {
    let t = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_usdc"))
        .args(["train", "--preset", "desk", "--seed", "7", "--out"])
        .arg(out)
        .status()?;
    anyhow::ensure!(status.success(), "usdc train exited with {status}");
    Ok(t.elapsed())
}

fn ablation(run: &Path, train_time: Duration) -> anyhow::Result<Outcome> {
    let t = Instant::now();
    let state = RunState::load(&run.join("final.bin"))?;
    let seed = state.config.eval_seed;
    let threads = eval_threads();
    let mut s = Vec::new();
    for v in [Variant::Usdc, Variant::NoCbf, Variant::DirCbf] {
        s.push(evaluate(&state, v, TaskSelect::Mixed, 100, seed, threads)?.summary);
    }
    let total = train_time + t.elapsed();
    let (usdc, no_cbf, dir) = (&s[0], &s[1], &s[2]);
    let ok = usdc.cr < no_cbf.cr && dir.fr > usdc.fr && within(total, Duration::from_secs(3600));
    Ok(pass_if(
        ok,
        format!(
            "CR usdc {:.0}% < no-cbf {:.0}%; FR dir-cbf {:.0}% > usdc {:.0}%; SR usdc/no-cbf/dir-cbf {:.0}/{:.0}/{:.0}%; training + evaluation {:.1?} (≤ 60 min)",
            usdc.cr, no_cbf.cr, dir.fr, usdc.fr, usdc.sr, no_cbf.sr, dir.sr, total
        ),
    ))
}

fn reduction() -> anyhow::Result<Outcome> {
    let r = oracle::reduction_suite(109, 5)?;
    Ok(pass_if(
        r.max_diff <= 1e-10,
        format!("max parameter difference {:.1e} over {} steps (≤ 1e-10)", r.max_diff, r.steps),
    ))
}

fn determinism(a: &Path, b: &Path) -> anyhow::Result<Outcome> {
    let mut diffs = Vec::new();
    let mut compared = 0;
    for entry in std::fs::read_dir(a)? {
        let name = entry?.file_name();
        let x = std::fs::read(a.join(&name))?;
        let y = std::fs::read(b.join(&name)).unwrap_or_default();
        compared += 1;
        if x != y {
            diffs.push(name.to_string_lossy().into_owned());
        }
    }
    let has_log = a.join("train_log.csv").exists() && a.join("final.bin").exists();
    Ok(pass_if(
        diffs.is_empty() && has_log,
        if diffs.is_empty() {
            format!("{compared} files byte-identical across two runs (train_log.csv, final.bin, config.json)")
        } else {
            format!("differing files: {}", diffs.join(", "))
        },
    ))
}

fn report(n: usize, name: &str, r: anyhow::Result<Outcome>) -> bool {
    match r {
        Ok(o) => {
            println!("{} [{n}] {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
            o.passed
        }
        Err(e) => {
            println!("FAIL [{n}] {name}: error: {e:#}");
            false
        }
    }
}

fn main() {
    let skip_training = std::env::var("USDC_ACCEPTANCE_SKIP_TRAINING").is_ok_and(|v| v == "1");
    let mut ok = true;
    ok &= report(1, "filter QP against grid search", qp_vs_grid());
    ok &= report(2, "barrier derivatives against rollouts", barrier_derivatives());
    ok &= report(3, "network gradients against finite differences", gradients());
    ok &= report(4, "CVaR identities", cvar());
    ok &= report(5, "uncertainty identities", uncertainty());
    ok &= report(6, "forward invariance of the filtered system", forward_invariance());
    ok &= report(7, "constraint row count", row_count());

    let dirs = if skip_training {
        None
    } else {
        let a = tempfile::tempdir().expect("temp dir");
        let b = tempfile::tempdir().expect("temp dir");
        let first = train_desk(a.path());
        Some((a, b, first))
    };

    match &dirs {
        None => println!("SKIP [8] desk ablation"),
        Some((a, _, first)) => {
            let r = match first {
                Ok(t) => ablation(a.path(), *t),
                Err(e) => Err(anyhow::anyhow!("{e:#}")),
            };
            ok &= report(8, "desk ablation", r);
        }
    }

    ok &= report(9, "single-critic reduction", reduction());

    match &dirs {
        None => println!("SKIP [10] training determinism"),
        Some((a, b, first)) => {
            let r = match first {
                Ok(_) => train_desk(b.path()).and_then(|_| determinism(a.path(), b.path())),
                Err(e) => Err(anyhow::anyhow!("{e:#}")),
            };
            ok &= report(10, "training determinism", r);
        }
    }

    if !ok {
        std::process::exit(1);
    }
}
