use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, TaskSelect};
use super::trace::{TraceHeader, TraceRecord, VehicleSnap, TRACE_SCHEMA, TRACE_VERSION};
use crate::distrl::agent::{Agent, TrainReport};
use crate::distrl::replay::Transition;
use crate::env::map::Task;
use crate::env::{Env, Outcome, EGO_ID};
use crate::error::{Error, Result};
use crate::nn::checkpoint::Checkpoint;
use crate::pipeline::{Counters, DecisionLoop};
use crate::safety::FilterStatus;
use crate::uncertainty::{SigmaBuffer, UncertaintyEstimator};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub task: Task,
    pub seed: u64,
    pub outcome: Outcome,
    pub reward: f64,
    pub mean_speed: f64,
    pub steps: usize,
    /// Steps on which the executed command differs from the policy's.
    pub interventions: usize,
}

/// Percentages and mean ± std over a set of episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub episodes: usize,
    pub sr: f64,
    pub fr: f64,
    pub cr: f64,
    pub aer_mean: f64,
    pub aer_std: f64,
    pub aev_mean: f64,
    pub aev_std: f64,
}

impl Summary {
    pub fn of(rows: &[EpisodeMetrics]) -> Self {
        let n = rows.len().max(1) as f64;
        let pct = |o: Outcome| 100.0 * rows.iter().filter(|r| r.outcome == o).count() as f64 / n;
        let rewards: Vec<f64> = rows.iter().map(|r| r.reward).collect();
        let speeds: Vec<f64> = rows.iter().map(|r| r.mean_speed).collect();
        let (aer_mean, aer_std) = crate::uncertainty::mean_std(&rewards);
        let (aev_mean, aev_std) = crate::uncertainty::mean_std(&speeds);
        Self {
            episodes: rows.len(),
            sr: pct(Outcome::Success),
            fr: pct(Outcome::Frozen),
            cr: pct(Outcome::Collision),
            aer_mean,
            aer_std,
            aev_mean,
            aev_std,
        }
    }

    pub fn csv(&self) -> String {
        format!(
            "episodes,sr,fr,cr,aer_mean,aer_std,aev_mean,aev_std\n{},{},{},{},{},{},{},{}\n",
            self.episodes, self.sr, self.fr, self.cr, self.aer_mean, self.aer_std, self.aev_mean, self.aev_std
        )
    }
}

pub fn episodes_csv(rows: &[EpisodeMetrics]) -> String {
    let mut s = String::from("episode,task,seed,outcome,reward,mean_speed,steps,interventions\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.episode,
            r.task.name(),
            r.seed,
            outcome_name(r.outcome),
            r.reward,
            r.mean_speed,
            r.steps,
            r.interventions
        );
    }
    s
}

fn outcome_name(o: Outcome) -> &'static str {
    match o {
        Outcome::Success => "success",
        Outcome::Collision => "collision",
        Outcome::Frozen => "frozen",
    }
}

/// Seed of evaluation episode `i`.
pub fn episode_seed(base: u64, i: usize) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (i as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Runs one episode to termination with a deterministic actor.
pub fn run_episode(
    agent: &mut Agent,
    dl: &mut DecisionLoop,
    env: &mut Env,
    episode: usize,
    seed: u64,
    task: Task,
    mut trace: Option<&mut Vec<TraceRecord>>,
) -> Result<EpisodeMetrics> {
    let mut obs = env.reset(seed, Some(task))?;
    dl.attach(env);
    let mut reward = 0.0;
    let mut speed = 0.0;
    let mut steps = 0;
    let mut interventions = 0;
    loop {
        let ego = VehicleSnap::of(EGO_ID, &env.ego);
        let svs: Vec<VehicleSnap> = env.svs.iter().map(|s| VehicleSnap::of(s.id, &s.state)).collect();
        let d = dl.decide(agent, env, &obs, true)?;
        let out = env.step(d.u)?;
        steps += 1;
        reward += out.reward.total;
        speed += env.ego.v;
        if d.u != d.u_rl {
            interventions += 1;
        }
        if let Some(t) = trace.as_deref_mut() {
            let f = d.filter.as_ref();
            t.push(TraceRecord {
                step: steps - 1,
                ego,
                svs,
                u_rl: d.u_rl,
                u_cbf: f.map(|f| f.u),
                u: d.u,
                chosen: d.chosen,
                uncertainty: d.uncertainty,
                filter_status: f.map(|f| f.status),
                active: f.map(|f| f.active.clone()).unwrap_or_default(),
                qp_iterations: f.map_or(0, |f| f.iterations),
                max_residual: f.map_or(0.0, |f| f.max_residual),
                vote_fraction: d.arbitration.as_ref().map(|a| a.vote_fraction),
                reward: out.reward,
                events: out.info.events,
                outcome: out.outcome(),
            });
        }
        if let Some(outcome) = out.outcome() {
            return Ok(EpisodeMetrics {
                episode,
                task,
                seed,
                outcome,
                reward,
                mean_speed: speed / steps as f64,
                steps,
                interventions,
            });
        }
        obs = out.observation;
    }
}

pub fn trace_header(cfg: &RunConfig, env: &Env, task: Task, seed: u64) -> TraceHeader {
    TraceHeader {
        schema: TRACE_SCHEMA.into(),
        version: TRACE_VERSION,
        variant: cfg.variant,
        task,
        seed,
        map: env.config.map,
        vehicle: env.config.vehicle,
        policy_hz: env.config.policy_hz,
    }
}

/// A trained run as stored on disk.
#[derive(Clone, Debug)]
pub struct RunState {
    pub config: RunConfig,
    pub agent: Agent,
    pub estimator: UncertaintyEstimator,
    pub env_steps: u64,
}

fn put_buffer(ck: &mut Checkpoint, name: &str, b: &SigmaBuffer) {
    ck.put_tensor(format!("uncertainty.{name}"), &[b.len()], &b.values());
    ck.put_words(format!("uncertainty.{name}.meta"), &[b.capacity() as u64, b.pushed()]);
}

fn get_buffer(ck: &Checkpoint, name: &str) -> Result<SigmaBuffer> {
    let (_, v) = ck.tensor(&format!("uncertainty.{name}"))?;
    let meta = ck.words(&format!("uncertainty.{name}.meta"))?;
    if meta.len() != 2 {
        return Err(Error::Checkpoint(format!("uncertainty.{name}.meta malformed")));
    }
    SigmaBuffer::restore(meta[0] as usize, v, meta[1])
}

impl RunState {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let agent = Agent::new(config.agent_config(), config.env.layout(), config.seed, config.planned_updates())?;
        Ok(Self {
            estimator: UncertaintyEstimator::new(config.uncertainty_buffer),
            agent,
            config,
            env_steps: 0,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.put_text("run.config", &serde_json::to_string(&self.config).expect("config serializes"));
        ck.put_words("run.env_steps", &[self.env_steps]);
        self.agent.save(&mut ck);
        put_buffer(&mut ck, "au", &self.estimator.au);
        put_buffer(&mut ck, "eu", &self.estimator.eu);
        put_buffer(&mut ck, "ju", &self.estimator.ju);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = RunConfig::from_json(ck.text("run.config")?)?;
        let mut s = Self::new(config)?;
        s.agent.load(ck)?;
        s.estimator = UncertaintyEstimator {
            au: get_buffer(ck, "au")?,
            eu: get_buffer(ck, "eu")?,
            ju: get_buffer(ck, "ju")?,
        };
        s.env_steps = ck.words("run.env_steps")?.first().copied().unwrap_or(0);
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub state: RunState,
    pub log: String,
    pub counters: Counters,
    pub episodes: usize,
    pub checkpoint: Option<PathBuf>,
}

pub const TRAIN_LOG_HEADER: &str =
    "episode,env_step,task,outcome,steps,return,mean_speed,updates,critic_loss,actor_loss,alpha,interventions\n";

/// Full training loop. With `out` set, writes `train_log.csv`, periodic
/// `checkpoint_<step>.bin` files and `final.bin`.
pub fn train(config: RunConfig, out: Option<&Path>) -> Result<TrainOutput> {
    let mut state = RunState::new(config.clone())?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let mut env = Env::new(config.env.clone())?;
    let mut dl = DecisionLoop::new(config.variant, config.safety.clone(), &env, config.uncertainty_buffer);
    if !config.train_with_pipeline {
        dl.variant = crate::pipeline::Variant::NoCbf;
    }
    let mut replay = state.agent.new_replay();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(4);

    let mut log = String::from(TRAIN_LOG_HEADER);
    let mut episode = 0usize;
    let mut task = Task::ALL[rng.gen_range(0..3)];
    let mut obs = env.reset(rng.gen(), Some(task))?;
    dl.attach(&env);
    let (mut ep_return, mut ep_speed, mut ep_steps, mut ep_interventions) = (0.0, 0.0, 0usize, 0usize);
    let mut last = TrainReport::default();

    for step in 0..config.total_steps {
        let d = dl.decide(&mut state.agent, &env, &obs, false)?;
        let res = env.step(d.u)?;
        let mask = replay.draw_mask(&mut rng);
        replay.push(Transition {
            obs: std::mem::take(&mut obs),
            action: d.action,
            reward: res.reward.total,
            next_obs: res.observation.clone(),
            done: res.terminated,
            mask,
        })?;
        state.env_steps = step + 1;
        ep_return += res.reward.total;
        ep_speed += env.ego.v;
        ep_steps += 1;
        if d.u != d.u_rl {
            ep_interventions += 1;
        }

        if step >= config.warmup_steps && (step - config.warmup_steps) % config.update_every == 0 {
            match state.agent.train_step(&replay) {
                Ok(r) => last = r,
                Err(e) => {
                    if let Some(dir) = out {
                        let dump = format!(
                            "{{\"env_step\": {}, \"episode\": {}, \"error\": {:?}, \"last_report\": {}}}\n",
                            step,
                            episode,
                            e.to_string(),
                            serde_json::to_string(&last).unwrap_or_default()
                        );
                        fs::write(dir.join("diagnostic.json"), dump)?;
                        fs::write(dir.join("train_log.csv"), &log)?;
                    }
                    return Err(e);
                }
            }
        }

        if let Some(outcome) = res.outcome() {
            let critic = if last.critic_loss.is_empty() {
                0.0
            } else {
                last.critic_loss.iter().sum::<f64>() / last.critic_loss.len() as f64
            };
            let _ = writeln!(
                log,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                episode,
                step + 1,
                task.name(),
                outcome_name(outcome),
                ep_steps,
                ep_return,
                ep_speed / ep_steps as f64,
                state.agent.updates,
                critic,
                last.actor_loss,
                state.agent.alpha(),
                ep_interventions
            );
            episode += 1;
            task = Task::ALL[rng.gen_range(0..3)];
            obs = env.reset(rng.gen(), Some(task))?;
            dl.attach(&env);
            (ep_return, ep_speed, ep_steps, ep_interventions) = (0.0, 0.0, 0, 0);
        } else {
            obs = res.observation;
        }

        if let Some(dir) = out {
            if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
                state.estimator.clone_from(&dl.estimator);
                state.save(&dir.join(format!("checkpoint_{:08}.bin", step + 1)))?;
                fs::write(dir.join("train_log.csv"), &log)?;
            }
        }
    }

    state.estimator = dl.estimator.clone();
    let mut checkpoint = None;
    if let Some(dir) = out {
        let p = dir.join("final.bin");
        state.save(&p)?;
        fs::write(dir.join("train_log.csv"), &log)?;
        fs::write(dir.join("config.json"), config.to_json())?;
        checkpoint = Some(p);
    }
    Ok(TrainOutput {
        state,
        log,
        counters: dl.counters,
        episodes: episode,
        checkpoint,
    })
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub rows: Vec<EpisodeMetrics>,
    pub summary: Summary,
    pub counters: Counters,
}

/// Worker count from `USDC_THREADS`, else the available parallelism.
pub fn eval_threads() -> usize {
    std::env::var("USDC_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Evaluates `state` under `variant` on `episodes` episodes. Every episode starts
/// from the stored uncertainty buffers, so results do not depend on the worker count.
pub fn evaluate(
    state: &RunState,
    variant: crate::pipeline::Variant,
    tasks: TaskSelect,
    episodes: usize,
    seed: u64,
    threads: usize,
) -> Result<EvalOutput> {
    let env_cfg = state.config.eval_env();
    let template_env = Env::new(env_cfg.clone())?;
    let mut template = DecisionLoop::new(variant, state.config.safety.clone(), &template_env, state.config.uncertainty_buffer);
    template.estimator = state.estimator.clone();

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Result<(EpisodeMetrics, Counters)>>> = Mutex::new(Vec::with_capacity(episodes));
    let workers = threads.clamp(1, episodes.max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| {
                let mut env = template_env.clone();
                let mut agent = state.agent.clone();
                loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= episodes {
                        break;
                    }
                    let mut dl = template.clone();
                    let r = run_episode(&mut agent, &mut dl, &mut env, i, episode_seed(seed, i), tasks.for_episode(i), None)
                        .map(|m| (m, dl.counters));
                    results.lock().expect("results lock").push(r);
                }
            });
        }
    });
    let mut rows = Vec::with_capacity(episodes);
    let mut counters = Counters::default();
    for r in results.into_inner().expect("results lock") {
        let (m, c) = r?;
        counters.decisions += c.decisions;
        counters.uncertainty += c.uncertainty;
        counters.filter += c.filter;
        counters.arbitration += c.arbitration;
        rows.push(m);
    }
    rows.sort_by_key(|m| m.episode);
    let summary = Summary::of(&rows);
    Ok(EvalOutput { rows, summary, counters })
}

/// One traced evaluation episode.
pub fn trace_episode(
    state: &RunState,
    variant: crate::pipeline::Variant,
    task: Task,
    seed: u64,
) -> Result<(TraceHeader, Vec<TraceRecord>, EpisodeMetrics)> {
    let mut env = Env::new(state.config.eval_env())?;
    let mut dl = DecisionLoop::new(variant, state.config.safety.clone(), &env, state.config.uncertainty_buffer);
    dl.estimator = state.estimator.clone();
    let mut agent = state.agent.clone();
    let mut records = Vec::new();
    let m = run_episode(&mut agent, &mut dl, &mut env, 0, seed, task, Some(&mut records))?;
    let header = trace_header(&state.config, &env, task, seed);
    let header = TraceHeader { variant, ..header };
    Ok((header, records, m))
}

/// Share of filter calls that changed the command.
pub fn intervention_rate(records: &[TraceRecord]) -> f64 {
    let calls = records.iter().filter(|r| r.filter_status.is_some()).count();
    let modified = records
        .iter()
        .filter(|r| matches!(r.filter_status, Some(FilterStatus::Modified | FilterStatus::Relaxed)))
        .count();
    if calls == 0 {
        0.0
    } else {
        modified as f64 / calls as f64
    }
}
