use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use usdc_core::env::map::Task;
use usdc_core::harness::{
    episodes_csv, eval_threads, evaluate, read_trace, render, trace_episode, train, write_trace, Preset, RunConfig,
    RunState, TaskSelect,
};
use usdc_core::oracle;
use usdc_core::pipeline::Variant;

#[derive(Parser)]
#[command(name = "usdc", version, about = "Uncertainty-aware safe driving at an unsignalized intersection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent and write the log, checkpoints and resolved config.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write per-episode and summary CSVs.
    Eval(EvalArgs),
    /// Record one evaluation episode as line-delimited JSON.
    Trace(TraceArgs),
    /// Turn a trace into SVG frames.
    Render(RenderArgs),
    /// Run the reference checks and print one line per suite.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Base preset.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// JSON file layered over the preset; only the keys it contains change.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let preset: Preset = self.preset.parse()?;
        let mut value = serde_json::to_value(RunConfig::preset(preset))?;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let overlay: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            merge(&mut value, overlay);
        }
        let mut cfg = RunConfig::from_json(&value.to_string())?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(v) = &self.variant {
            cfg.variant = v.parse()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Overrides the number of environment steps.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the variant the checkpoint was trained with.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, default_value = "mixed")]
    task: String,
    /// Defaults to the checkpoint's configured count.
    #[arg(long)]
    episodes: Option<usize>,
    /// Defaults to the checkpoint's evaluation seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs/eval")]
    out: PathBuf,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, default_value = "lt")]
    task: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file.
    #[arg(long, default_value = "trace.jsonl")]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Render every k-th record.
    #[arg(long, default_value_t = 1)]
    every: usize,
    #[arg(long, default_value = "frames")]
    out: PathBuf,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 2024)]
    seed: u64,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Trace(a) => cmd_trace(a),
        Command::Render(a) => cmd_render(a),
        Command::Selftest(a) => cmd_selftest(a),
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.config.resolve()?;
    if let Some(steps) = a.steps {
        cfg.total_steps = steps;
    }
    fs::create_dir_all(&a.out)?;
    let t = Instant::now();
    let out = train(cfg, Some(&a.out))?;
    println!(
        "trained {} env steps, {} episodes, {} updates in {:.1?}",
        out.state.env_steps,
        out.episodes,
        out.state.agent.updates,
        t.elapsed()
    );
    if let Some(ck) = out.checkpoint {
        println!("checkpoint {}", ck.display());
    }
    Ok(())
}

fn load_state(path: &Path) -> Result<RunState> {
    RunState::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn variant_or(state: &RunState, v: &Option<String>) -> Result<Variant> {
    Ok(match v {
        Some(s) => s.parse()?,
        None => state.config.variant,
    })
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let state = load_state(&a.checkpoint)?;
    let variant = variant_or(&state, &a.variant)?;
    let tasks: TaskSelect = a.task.parse()?;
    let episodes = a.episodes.unwrap_or(state.config.eval_episodes);
    let seed = a.seed.unwrap_or(state.config.eval_seed);
    let out = evaluate(&state, variant, tasks, episodes, seed, eval_threads())?;
    fs::create_dir_all(&a.out)?;
    let stem = format!("{}_{}", variant.name(), tasks);
    fs::write(a.out.join(format!("{stem}_episodes.csv")), episodes_csv(&out.rows))?;
    fs::write(a.out.join(format!("{stem}_summary.csv")), out.summary.csv())?;
    let s = &out.summary;
    println!(
        "{} {} episodes={} SR={:.1}% FR={:.1}% CR={:.1}% AER={:.2}±{:.2} AEV={:.2}±{:.2}",
        variant.name(),
        tasks,
        s.episodes,
        s.sr,
        s.fr,
        s.cr,
        s.aer_mean,
        s.aer_std,
        s.aev_mean,
        s.aev_std
    );
    Ok(())
}

fn cmd_trace(a: TraceArgs) -> Result<()> {
    let state = load_state(&a.checkpoint)?;
    let variant = variant_or(&state, &a.variant)?;
    let task: Task = match a.task.parse::<TaskSelect>()? {
        TaskSelect::Mixed => bail!("trace needs a single task: lt, gs or rt"),
        t => t.for_episode(0),
    };
    let (header, records, m) = trace_episode(&state, variant, task, a.seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_trace(fs::File::create(&a.out)?, &header, &records)?;
    println!("{:?} after {} steps, reward {:.2}; {} records", m.outcome, m.steps, m.reward, records.len());
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let file = fs::File::open(&a.trace).with_context(|| format!("opening {}", a.trace.display()))?;
    let (header, records) = read_trace(BufReader::new(file))?;
    let frames = render(&header, &records, a.every);
    fs::create_dir_all(&a.out)?;
    for (i, svg) in frames.iter().enumerate() {
        fs::write(a.out.join(format!("frame_{i:05}.svg")), svg)?;
    }
    println!("{} frames in {}", frames.len(), a.out.display());
    Ok(())
}

fn line(name: &str, ok: bool, detail: String) -> bool {
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn cmd_selftest(a: SelftestArgs) -> Result<()> {
    let s = a.seed;
    let mut all = true;

    let r = oracle::qp_oracle_suite(500, s)?;
    all &= line(
        "qp-vs-grid",
        r.passed(1e-3, 1e-6),
        format!("gap {:.2e}, kkt {:.2e}, {:.1?}", r.max_objective_gap, r.max_kkt, r.elapsed),
    );

    let r = oracle::ttcbf_fd_suite(1000, s + 1, 1e-4);
    all &= line(
        "barrier-derivatives",
        r.passed(1e-3),
        format!("h' {:.2e}, h'' {:.2e}", r.max_rel_h_dot, r.max_rel_h_ddot),
    );

    let t = Instant::now();
    let checks = oracle::gradient_checks(s + 2, 1e-4, 1e-6)?;
    let worst = checks.iter().map(|c| c.max_rel).fold(0.0, f64::max);
    all &= line("gradients", worst < 1e-4, format!("worst {worst:.2e} over {} tensors, {:.1?}", checks.len(), t.elapsed()));

    let r = oracle::cvar_suite(10_000, s + 3)?;
    all &= line(
        "cvar",
        r.passed(),
        format!("mean gap {:.1e}, tail mismatches {}", r.max_mean_gap, r.tail_mismatches),
    );

    let r = oracle::uncertainty_suite(100_000, s + 4)?;
    all &= line(
        "uncertainty",
        r.passed(),
        format!(
            "cloned σ_EU {:.1e}, weight sum err {:.1e}, σ_JU out of range {}",
            r.cloned_sigma_eu, r.max_weight_sum_error, r.joint_out_of_range
        ),
    );

    let r = oracle::forward_invariance_suite(1000, 60, s + 5)?;
    all &= line(
        "forward-invariance",
        r.passed(),
        format!(
            "min h {:.3} ≥ {:.3}; {} of {} rollouts relaxed",
            r.min_h, r.bound, r.relaxed_rollouts, r.rollouts
        ),
    );

    let (got, want) = oracle::row_count_check(5, 4, s + 6)?;
    all &= line("row-count", got == want, format!("{got} rows, expected {want}"));

    let r = oracle::reduction_suite(s + 7, 5)?;
    all &= line("single-critic-reduction", r.max_diff <= 1e-10, format!("max diff {:.1e}", r.max_diff));

    if !all {
        bail!("self-test failed");
    }
    Ok(())
}
