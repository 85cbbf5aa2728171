//! Ensemble distributional soft actor-critic with CVaR actor objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::actor::{ActorNet, PolicySample};
use super::critic::{mix, Member, ACTION_DIM};
use super::quantile::{cvar_weights, member_loss, weighted};
use super::replay::{Batch, ReplayBuffer};
use crate::error::{Error, Result};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::{soft_update, AdamState, EncoderKind, LrSchedule, Matrix, ObsLayout, Param, Parameterized};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub gamma: f64,
    pub ensemble_size: usize,
    pub prior_scale: f64,
    pub mask_prob: f64,
    pub cvar_beta: f64,
    pub n_quantiles: usize,
    pub huber_kappa: f64,
    pub hidden: usize,
    pub encoder_layers: usize,
    pub head_layers: usize,
    pub encoder: EncoderKind,
    pub actor_lr: [f64; 2],
    pub critic_lr: [f64; 2],
    pub alpha_lr: f64,
    pub init_alpha: f64,
    /// Defaults to −dim(action).
    pub target_entropy: f64,
    pub polyak: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            ensemble_size: 5,
            prior_scale: 10.0,
            mask_prob: 0.9,
            cvar_beta: 0.25,
            n_quantiles: 32,
            huber_kappa: 1.0,
            hidden: 256,
            encoder_layers: 1,
            head_layers: 2,
            encoder: EncoderKind::Attention,
            actor_lr: [3e-4, 1e-5],
            critic_lr: [3e-3, 1e-4],
            alpha_lr: 3e-4,
            init_alpha: 0.2,
            target_entropy: -(ACTION_DIM as f64),
            polyak: 0.005,
            batch_size: 256,
            replay_capacity: 100_000,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.ensemble_size == 0 {
            return bad("ensemble_size must be at least 1".into());
        }
        if !(self.gamma >= 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if !(self.cvar_beta > 0.0 && self.cvar_beta <= 1.0) {
            return bad(format!("cvar_beta {} outside (0, 1]", self.cvar_beta));
        }
        if !(self.mask_prob > 0.0 && self.mask_prob <= 1.0) {
            return bad(format!("mask_prob {} outside (0, 1]", self.mask_prob));
        }
        if !(self.polyak > 0.0 && self.polyak <= 1.0) {
            return bad(format!("polyak {} outside (0, 1]", self.polyak));
        }
        if self.prior_scale < 0.0 || self.huber_kappa <= 0.0 || self.init_alpha <= 0.0 {
            return bad("prior_scale ≥ 0, huber_kappa > 0 and init_alpha > 0 required".into());
        }
        if self.n_quantiles == 0 || self.hidden == 0 || self.batch_size == 0 || self.replay_capacity == 0 {
            return bad("sizes must be positive".into());
        }
        Ok(())
    }
}

/// Exogenous noise of one update: target-policy noise at s′ and policy noise at s.
#[derive(Clone, Debug)]
pub struct StepNoise {
    pub next: Matrix,
    pub current: Matrix,
}

impl StepNoise {
    pub fn draw<R: Rng + ?Sized>(batch: usize, rng: &mut R) -> Self {
        let mut draw = || {
            let mut m = Matrix::zeros(batch, ACTION_DIM);
            for v in m.data_mut() {
                *v = rng.sample(StandardNormal);
            }
            m
        };
        let next = draw();
        let current = draw();
        Self { next, current }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub critic_loss: Vec<f64>,
    pub actor_loss: f64,
    pub alpha: f64,
    pub alpha_loss: f64,
    pub mean_log_prob: f64,
    pub skipped: bool,
}

#[derive(Clone, Debug)]
pub struct Agent {
    pub config: AgentConfig,
    pub members: Vec<Member>,
    pub actor: ActorNet,
    pub actor_target: ActorNet,
    pub actor_optim: AdamState,
    pub log_alpha: Param,
    pub alpha_optim: AdamState,
    pub rng: ChaCha8Rng,
    pub updates: u64,
    cvar_w: Vec<f64>,
}

impl Agent {
    /// `lr_steps` is the number of gradient steps over which learning rates decay.
    pub fn new(config: AgentConfig, layout: ObsLayout, seed: u64, lr_steps: u64) -> Result<Self> {
        config.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        init.set_stream(1);
        let mut prior_rng = ChaCha8Rng::seed_from_u64(seed);
        prior_rng.set_stream(2);
        let c = &config;
        let critic_lr = LrSchedule {
            start: c.critic_lr[0],
            end: c.critic_lr[1],
            steps: lr_steps,
        };
        let members = (0..c.ensemble_size)
            .map(|_| {
                Member::new(
                    c.encoder,
                    layout,
                    c.hidden,
                    c.encoder_layers,
                    c.head_layers,
                    c.n_quantiles,
                    critic_lr,
                    &mut init,
                    &mut prior_rng,
                )
            })
            .collect();
        let actor = ActorNet::new(c.encoder, layout, c.hidden, c.encoder_layers, c.head_layers, &mut init);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        Ok(Self {
            cvar_w: cvar_weights(c.n_quantiles, c.cvar_beta)?,
            members,
            actor_target: actor.clone(),
            actor,
            actor_optim: AdamState::new(LrSchedule {
                start: c.actor_lr[0],
                end: c.actor_lr[1],
                steps: lr_steps,
            }),
            log_alpha: Param::new(vec![1], vec![c.init_alpha.ln()]),
            alpha_optim: AdamState::new(LrSchedule::constant(c.alpha_lr)),
            rng,
            updates: 0,
            config,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.value[0].exp()
    }

    pub fn cvar_weights(&self) -> &[f64] {
        &self.cvar_w
    }

    pub fn new_replay(&self) -> ReplayBuffer {
        ReplayBuffer::new(self.config.replay_capacity, self.config.ensemble_size, self.config.mask_prob)
    }

    /// Squashed action for one observation; stochastic draws use the agent's RNG.
    pub fn act(&mut self, obs: &[f64], deterministic: bool) -> Result<[f64; ACTION_DIM]> {
        let raw = self.actor.forward(&Matrix::row_vector(obs))?;
        let a = if deterministic {
            ActorNet::deterministic(&raw)
        } else {
            let eps = StepNoise::draw(1, &mut self.rng).current;
            ActorNet::sample(&raw, &eps)?.action
        };
        Ok([a.get(0, 0), a.get(0, 1)])
    }

    /// Mixed online quantiles of every member for one observation and several actions:
    /// `out[n]` is `[actions.len(), N_q]`.
    pub fn member_quantiles(&self, obs: &[f64], actions: &[[f64; ACTION_DIM]]) -> Result<Vec<Matrix>> {
        let k = actions.len();
        let mut obs_m = Matrix::zeros(1, obs.len());
        obs_m.row_mut(0).copy_from_slice(obs);
        let mut act = Matrix::zeros(k, ACTION_DIM);
        for (i, a) in actions.iter().enumerate() {
            act.row_mut(i).copy_from_slice(a);
        }
        let rep = |f: &Matrix| {
            let mut m = Matrix::zeros(k, f.cols());
            for i in 0..k {
                m.row_mut(i).copy_from_slice(f.row(0));
            }
            m
        };
        self.members
            .iter()
            .map(|m| {
                let (fo, _) = m.online.features(&obs_m)?;
                let (fp, _) = m.prior.features(&obs_m)?;
                let (o, _) = m.online.head_forward(&rep(&fo), &act)?;
                let (p, _) = m.prior.head_forward(&rep(&fp), &act)?;
                Ok(mix(&o, &p, self.config.prior_scale))
            })
            .collect()
    }

    /// Samples a batch and noise from the agent's RNG, then updates.
    pub fn train_step(&mut self, replay: &ReplayBuffer) -> Result<TrainReport> {
        let b = self.config.batch_size;
        if replay.len() < b {
            return Ok(TrainReport {
                skipped: true,
                alpha: self.alpha(),
                ..TrainReport::default()
            });
        }
        let idx = replay.sample_indices(b, &mut self.rng);
        let batch = replay.batch(&idx)?;
        let noise = StepNoise::draw(b, &mut self.rng);
        self.train_on_batch(&batch, &noise)
    }

    /// One critic, actor and temperature update on a fixed batch and noise, followed by
    /// soft target updates. All gradients are taken at the pre-update parameters.
    pub fn train_on_batch(&mut self, batch: &Batch, noise: &StepNoise) -> Result<TrainReport> {
        let report = self.compute_gradients(batch, noise)?;
        self.apply_gradients();
        Ok(report)
    }

    /// Distributional TD targets `r + γ(1 − d)(Z̄ − α log π)` from the target networks.
    pub fn targets(&self, batch: &Batch, noise: &StepNoise) -> Result<Vec<Vec<f64>>> {
        let c = &self.config;
        let bsz = batch.len();
        let n = self.members.len();
        let alpha = self.alpha();
        let raw_next = self.actor_target.forward(&batch.next_obs)?;
        let next = ActorNet::sample(&raw_next, &noise.next)?;
        let mut zbar = Matrix::zeros(bsz, c.n_quantiles);
        for m in &self.members {
            let z = m.z_target(&batch.next_obs, &next.action, c.prior_scale)?;
            for (acc, v) in zbar.data_mut().iter_mut().zip(z.data()) {
                *acc += v / n as f64;
            }
        }
        Ok((0..bsz)
            .map(|b| {
                let cont = c.gamma * (1.0 - batch.done[b]);
                zbar.row(b)
                    .iter()
                    .map(|z| batch.reward[b] + cont * (z - alpha * next.log_prob[b]))
                    .collect()
            })
            .collect())
    }

    /// Per-member critic losses at the current parameters.
    pub fn critic_losses(&self, batch: &Batch, noise: &StepNoise) -> Result<Vec<f64>> {
        let targets = self.targets(batch, noise)?;
        let bsz = batch.len();
        self.members
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let z = m.z(&batch.obs, &batch.action, self.config.prior_scale)?;
                let pred: Vec<Vec<f64>> = (0..bsz).map(|b| z.row(b).to_vec()).collect();
                Ok(member_loss(&targets, &pred, &batch.mask[k], self.config.huber_kappa)?.0)
            })
            .collect()
    }

    /// `mean_b[α log π(a|s) − mean_n CVaR_β(Z_n(s, a))]` with `a` reparameterized by `noise.current`.
    pub fn actor_loss(&self, batch: &Batch, noise: &StepNoise) -> Result<f64> {
        let bsz = batch.len();
        let n = self.members.len() as f64;
        let raw = self.actor.forward(&batch.obs)?;
        let cur = ActorNet::sample(&raw, &noise.current)?;
        let mut total = cur.log_prob.iter().map(|lp| self.alpha() * lp).sum::<f64>();
        for m in &self.members {
            let z = m.z(&batch.obs, &cur.action, self.config.prior_scale)?;
            for b in 0..bsz {
                total -= weighted(z.row(b), &self.cvar_w) / n;
            }
        }
        Ok(total / bsz as f64)
    }

    /// `−log α · (mean log π + H̄)` with the policy sample held fixed.
    pub fn temperature_loss(&self, batch: &Batch, noise: &StepNoise) -> Result<f64> {
        let raw = self.actor.forward(&batch.obs)?;
        let cur = ActorNet::sample(&raw, &noise.current)?;
        let mean_lp = cur.log_prob.iter().sum::<f64>() / batch.len() as f64;
        Ok(-self.log_alpha.value[0] * (mean_lp + self.config.target_entropy))
    }

    /// Fills the gradients of every online critic, the actor and `log α` without
    /// changing any parameter.
    pub fn compute_gradients(&mut self, batch: &Batch, noise: &StepNoise) -> Result<TrainReport> {
        let c = self.config.clone();
        let bsz = batch.len();
        let n = self.members.len();
        let rho = c.prior_scale;
        let alpha = self.alpha();
        let n_q = c.n_quantiles;
        let targets = self.targets(batch, noise)?;

        let mut critic_loss = Vec::with_capacity(n);
        let mut cached = Vec::with_capacity(n);
        for (k, m) in self.members.iter_mut().enumerate() {
            m.online.zero_grad();
            let (fo, enc_tape) = m.online.features(&batch.obs)?;
            let (fp, _) = m.prior.features(&batch.obs)?;
            let (o, head_tape) = m.online.head_forward(&fo, &batch.action)?;
            let (p, _) = m.prior.head_forward(&fp, &batch.action)?;
            let z = mix(&o, &p, rho);
            let pred: Vec<Vec<f64>> = (0..bsz).map(|b| z.row(b).to_vec()).collect();
            let (loss, dz) = member_loss(&targets, &pred, &batch.mask[k], c.huber_kappa)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("critic {k} loss")));
            }
            critic_loss.push(loss);
            let mut d_o = Matrix::zeros(bsz, n_q);
            for b in 0..bsz {
                for j in 0..n_q {
                    d_o.set(b, j, dz[b][j] / (1.0 + rho));
                }
            }
            m.online.backward(&enc_tape, &head_tape, &d_o)?;
            cached.push((fo, fp));
        }

        // Actor gradient through the pre-update critics.
        self.actor.zero_grad();
        let (raw, actor_tape) = self.actor.forward_recorded(&batch.obs)?;
        let cur: PolicySample = ActorNet::sample(&raw, &noise.current)?;
        let mut d_action = Matrix::zeros(bsz, ACTION_DIM);
        let mut mean_cvar = vec![0.0; bsz];
        let mut dz = Matrix::zeros(bsz, n_q);
        for b in 0..bsz {
            for j in 0..n_q {
                dz.set(b, j, -self.cvar_w[j] / (bsz as f64 * n as f64));
            }
        }
        let mut dz_o = dz.clone();
        dz_o.data_mut().iter_mut().for_each(|v| *v /= 1.0 + rho);
        let mut dz_p = dz.clone();
        dz_p.data_mut().iter_mut().for_each(|v| *v *= rho / (1.0 + rho));
        for (m, (fo, fp)) in self.members.iter().zip(&cached) {
            let (o, to) = m.online.head_forward(fo, &cur.action)?;
            let (p, tp) = m.prior.head_forward(fp, &cur.action)?;
            let z = mix(&o, &p, rho);
            for b in 0..bsz {
                mean_cvar[b] += weighted(z.row(b), &self.cvar_w) / n as f64;
            }
            let ga = m.online.action_grad(&to, &dz_o)?;
            let gp = m.prior.action_grad(&tp, &dz_p)?;
            for ((d, x), y) in d_action.data_mut().iter_mut().zip(ga.data()).zip(gp.data()) {
                *d += x + y;
            }
        }
        let actor_loss = (0..bsz)
            .map(|b| alpha * cur.log_prob[b] - mean_cvar[b])
            .sum::<f64>()
            / bsz as f64;
        if !actor_loss.is_finite() {
            return Err(Error::NonFinite("actor loss".into()));
        }
        let d_logp = vec![alpha / bsz as f64; bsz];
        let d_raw = ActorNet::raw_grad(&cur, &d_action, &d_logp);
        self.actor.backward(&actor_tape, &d_raw)?;

        // Temperature on log α.
        let mean_lp = cur.log_prob.iter().sum::<f64>() / bsz as f64;
        let alpha_loss = -self.log_alpha.value[0] * (mean_lp + c.target_entropy);
        self.log_alpha.grad[0] = -(mean_lp + c.target_entropy);

        Ok(TrainReport {
            critic_loss,
            actor_loss,
            alpha,
            alpha_loss,
            mean_log_prob: mean_lp,
            skipped: false,
        })
    }

    /// Adam steps from the stored gradients, then soft target updates.
    pub fn apply_gradients(&mut self) {
        let polyak = self.config.polyak;
        for m in &mut self.members {
            m.optim.step_module(&mut m.online);
        }
        self.actor_optim.step_module(&mut self.actor);
        let g = [self.log_alpha.grad[0]];
        self.alpha_optim
            .update(&mut [self.log_alpha.value.as_mut_slice()], &[&g]);
        for m in &mut self.members {
            soft_update(&mut m.target, &m.online, polyak);
        }
        soft_update(&mut self.actor_target, &self.actor, polyak);
        self.updates += 1;
    }

    pub fn save(&self, ck: &mut Checkpoint) {
        put_params(ck, "actor", &self.actor);
        put_params(ck, "actor_target", &self.actor_target);
        put_adam(ck, "actor", &self.actor_optim);
        for (n, m) in self.members.iter().enumerate() {
            put_params(ck, &format!("critic{n}.online"), &m.online);
            put_params(ck, &format!("critic{n}.prior"), &m.prior);
            put_params(ck, &format!("critic{n}.target"), &m.target);
            put_adam(ck, &format!("critic{n}"), &m.optim);
        }
        ck.put_tensor("log_alpha", &[1], &self.log_alpha.value);
        put_adam(ck, "alpha", &self.alpha_optim);
        ck.put_words("agent.rng", &rng_words(&self.rng));
        ck.put_words("agent.updates", &[self.updates]);
    }

    pub fn load(&mut self, ck: &Checkpoint) -> Result<()> {
        get_params(ck, "actor", &mut self.actor)?;
        get_params(ck, "actor_target", &mut self.actor_target)?;
        get_adam(ck, "actor", &mut self.actor_optim)?;
        for (n, m) in self.members.iter_mut().enumerate() {
            get_params(ck, &format!("critic{n}.online"), &mut m.online)?;
            get_params(ck, &format!("critic{n}.prior"), &mut m.prior)?;
            get_params(ck, &format!("critic{n}.target"), &mut m.target)?;
            get_adam(ck, &format!("critic{n}"), &mut m.optim)?;
        }
        let (_, la) = ck.tensor("log_alpha")?;
        self.log_alpha.value.copy_from_slice(la);
        get_adam(ck, "alpha", &mut self.alpha_optim)?;
        self.rng = rng_from_words(ck.words("agent.rng")?)?;
        self.updates = ck.words("agent.updates")?.first().copied().unwrap_or(0);
        Ok(())
    }
}

pub fn put_params<M: Parameterized + ?Sized>(ck: &mut Checkpoint, prefix: &str, m: &M) {
    for (i, p) in m.params().iter().enumerate() {
        ck.put_tensor(format!("{prefix}.p{i}"), &p.shape, &p.value);
    }
}

pub fn get_params<M: Parameterized + ?Sized>(ck: &Checkpoint, prefix: &str, m: &mut M) -> Result<()> {
    for (i, p) in m.params_mut().into_iter().enumerate() {
        let name = format!("{prefix}.p{i}");
        let (shape, data) = ck.tensor(&name)?;
        if shape != p.shape.as_slice() {
            return Err(Error::Checkpoint(format!("{name}: shape {shape:?} != {:?}", p.shape)));
        }
        p.value.copy_from_slice(data);
    }
    Ok(())
}

fn put_adam(ck: &mut Checkpoint, prefix: &str, a: &AdamState) {
    ck.put_words(format!("adam.{prefix}.step"), &[a.step, a.m.len() as u64]);
    for (i, (m, v)) in a.m.iter().zip(&a.v).enumerate() {
        ck.put_tensor(format!("adam.{prefix}.m{i}"), &[m.len()], m);
        ck.put_tensor(format!("adam.{prefix}.v{i}"), &[v.len()], v);
    }
}

fn get_adam(ck: &Checkpoint, prefix: &str, a: &mut AdamState) -> Result<()> {
    let w = ck.words(&format!("adam.{prefix}.step"))?;
    if w.len() != 2 {
        return Err(Error::Checkpoint(format!("adam.{prefix}.step malformed")));
    }
    a.step = w[0];
    a.m.clear();
    a.v.clear();
    for i in 0..w[1] as usize {
        a.m.push(ck.tensor(&format!("adam.{prefix}.m{i}"))?.1.to_vec());
        a.v.push(ck.tensor(&format!("adam.{prefix}.v{i}"))?.1.to_vec());
    }
    Ok(())
}

/// ChaCha state as `[seed (4 words), stream, word_pos low, word_pos high]`.
pub fn rng_words(rng: &ChaCha8Rng) -> Vec<u64> {
    let seed = rng.get_seed();
    let mut w: Vec<u64> = seed
        .chunks(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    w.push(rng.get_stream());
    let pos = rng.get_word_pos();
    w.push(pos as u64);
    w.push((pos >> 64) as u64);
    w
}

pub fn rng_from_words(w: &[u64]) -> Result<ChaCha8Rng> {
    if w.len() != 7 {
        return Err(Error::Checkpoint("rng state must have 7 words".into()));
    }
    let mut seed = [0u8; 32];
    for (i, v) in w[..4].iter().enumerate() {
        seed[i * 8..(i + 1) * 8].copy_from_slice(&v.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(w[4]);
    rng.set_word_pos(w[5] as u128 | ((w[6] as u128) << 64));
    Ok(rng)
}
