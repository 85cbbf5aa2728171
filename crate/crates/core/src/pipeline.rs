//! One decision step: policy proposal, uncertainty, barrier filter and arbitration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::arbitration::{self, ArbitrationRecord, Choice};
use crate::distrl::actor::{from_command, to_command};
use crate::distrl::agent::{Agent, AgentConfig};
use crate::distrl::critic::ACTION_DIM;
use crate::dynamics::ControlCommand;
use crate::env::Env;
use crate::error::{Error, Result};
use crate::nn::EncoderKind;
use crate::safety::{assemble, FilterResult, FilterStatus, SafetyConfig, SafetyFilter};
use crate::uncertainty::{member_rows, UncertaintyEstimator, UncertaintySnapshot};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Usdc,
    NoCbf,
    DirCbf,
    Dsac,
    PureDsac,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Usdc, Variant::NoCbf, Variant::DirCbf, Variant::Dsac, Variant::PureDsac];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Usdc => "usdc",
            Variant::NoCbf => "no-cbf",
            Variant::DirCbf => "dir-cbf",
            Variant::Dsac => "dsac",
            Variant::PureDsac => "pure-dsac",
        }
    }

    pub fn uses_filter(self) -> bool {
        matches!(self, Variant::Usdc | Variant::DirCbf)
    }

    pub fn uses_arbitration(self) -> bool {
        self == Variant::Usdc
    }

    /// Single-critic baselines override the ensemble and risk settings.
    pub fn adjust(self, cfg: &mut AgentConfig) {
        match self {
            Variant::Dsac => {
                cfg.ensemble_size = 1;
                cfg.prior_scale = 0.0;
                cfg.cvar_beta = 1.0;
                cfg.encoder = EncoderKind::Attention;
            }
            Variant::PureDsac => {
                cfg.ensemble_size = 1;
                cfg.prior_scale = 0.0;
                cfg.cvar_beta = 1.0;
                cfg.encoder = EncoderKind::Flat;
            }
            _ => {}
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub decisions: u64,
    pub uncertainty: u64,
    pub filter: u64,
    pub arbitration: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub u_rl: ControlCommand,
    /// Executed command.
    pub u: ControlCommand,
    /// Executed command in the policy's squashed coordinates.
    pub action: [f64; ACTION_DIM],
    pub uncertainty: Option<UncertaintySnapshot>,
    pub filter: Option<FilterResult>,
    pub arbitration: Option<ArbitrationRecord>,
    pub chosen: Choice,
}

/// Decision state that persists across steps and episodes.
#[derive(Clone, Debug)]
pub struct DecisionLoop {
    pub variant: Variant,
    pub estimator: UncertaintyEstimator,
    pub filter: SafetyFilter,
    pub counters: Counters,
}

impl DecisionLoop {
    pub fn new(variant: Variant, safety: SafetyConfig, env: &Env, buffer: usize) -> Self {
        let dt = env.clock().policy_dt();
        Self {
            variant,
            estimator: UncertaintyEstimator::new(buffer),
            filter: SafetyFilter::new(safety, env.config.bounds, dt),
            counters: Counters::default(),
        }
    }

    /// Re-targets the filter at another environment clock and bounds.
    pub fn attach(&mut self, env: &Env) {
        self.filter.dt = env.clock().policy_dt();
        self.filter.bounds = env.config.bounds;
        self.filter.reset_warm_start();
    }

    pub fn decide(&mut self, agent: &mut Agent, env: &Env, obs: &[f64], deterministic: bool) -> Result<Decision> {
        self.counters.decisions += 1;
        let bounds = env.config.bounds;
        let a_rl = agent.act(obs, deterministic)?;
        let u_rl = to_command(&a_rl, &bounds);
        let ensemble = agent.members.len() >= 2;

        let mut q_rl = None;
        let uncertainty = if ensemble {
            self.counters.uncertainty += 1;
            let q = agent.member_quantiles(obs, &[a_rl])?;
            let snap = self.estimator.observe(&member_rows(&q, 0), agent.cvar_weights())?;
            q_rl = Some(q);
            Some(snap)
        } else {
            None
        };

        let mut decision = Decision {
            u_rl,
            u: u_rl,
            action: a_rl,
            uncertainty,
            filter: None,
            arbitration: None,
            chosen: Choice::Rl,
        };
        if !self.variant.uses_filter() {
            return Ok(decision);
        }

        self.counters.filter += 1;
        let cfg = &self.filter.config;
        let prox = env.proximity(cfg.n_points, cfg.m_points);
        let u_ju = uncertainty.map_or(0.0, |s| s.u_ju);
        let rows = assemble(&env.ego, &prox, &cfg.cbf, self.filter.dt, u_ju);
        let fr = self.filter.filter(u_rl, &rows)?;
        let u_cbf = fr.u;
        let unmodified = fr.status == FilterStatus::Unmodified;
        decision.filter = Some(fr);

        if !self.variant.uses_arbitration() || !ensemble {
            decision.u = u_cbf;
            decision.chosen = Choice::Cbf;
            decision.action = if unmodified { a_rl } else { from_command(u_cbf, &bounds) };
            return Ok(decision);
        }

        self.counters.arbitration += 1;
        let a_cbf = if unmodified { a_rl } else { from_command(u_cbf, &bounds) };
        let q_rl = q_rl.expect("ensemble quantiles");
        let q_cbf = if unmodified { q_rl.clone() } else { agent.member_quantiles(obs, &[a_cbf])? };
        let p = uncertainty.map_or(0.5, |s| s.percentile);
        let (u, rec) = arbitration::select(u_rl, u_cbf, &member_rows(&q_rl, 0), &member_rows(&q_cbf, 0), agent.cvar_weights(), p);
        decision.chosen = rec.chosen;
        decision.u = u;
        decision.action = match rec.chosen {
            Choice::Rl => a_rl,
            Choice::Cbf => a_cbf,
        };
        decision.arbitration = Some(rec);
        Ok(decision)
    }
}
