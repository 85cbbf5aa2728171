use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distrl::agent::AgentConfig;
use crate::env::map::Task;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::pipeline::Variant;
use crate::safety::SafetyConfig;
use crate::uncertainty::DEFAULT_CAPACITY;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::Config(format!("unknown preset {s:?}"))),
        }
    }
}

/// A fixed task or a round-robin over all three.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskSelect {
    Lt,
    Gs,
    Rt,
    Mixed,
}

impl TaskSelect {
    pub fn for_episode(self, i: usize) -> Task {
        match self {
            TaskSelect::Lt => Task::Lt,
            TaskSelect::Gs => Task::Gs,
            TaskSelect::Rt => Task::Rt,
            TaskSelect::Mixed => Task::ALL[i % 3],
        }
    }
}

impl FromStr for TaskSelect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lt" => Ok(TaskSelect::Lt),
            "gs" => Ok(TaskSelect::Gs),
            "rt" => Ok(TaskSelect::Rt),
            "mixed" => Ok(TaskSelect::Mixed),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

impl fmt::Display for TaskSelect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskSelect::Lt => "lt",
            TaskSelect::Gs => "gs",
            TaskSelect::Rt => "rt",
            TaskSelect::Mixed => "mixed",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub variant: Variant,
    pub seed: u64,
    pub agent: AgentConfig,
    /// Training environment; evaluation overrides the clock.
    pub env: EnvConfig,
    pub safety: SafetyConfig,
    /// Capacity of each uncertainty buffer.
    pub uncertainty_buffer: usize,
    pub total_steps: u64,
    /// Env steps collected before the first gradient step.
    pub warmup_steps: u64,
    /// Env steps per gradient step after warmup.
    pub update_every: u64,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: u64,
    /// Run the filter and arbitration while collecting data.
    pub train_with_pipeline: bool,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    pub eval_sim_hz: f64,
    pub eval_policy_hz: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Usdc,
            seed: 0,
            agent: AgentConfig::default(),
            env: EnvConfig::default(),
            safety: SafetyConfig::default(),
            uncertainty_buffer: DEFAULT_CAPACITY,
            total_steps: 1_000_000,
            warmup_steps: 2000,
            update_every: 1,
            checkpoint_every: 50_000,
            train_with_pipeline: true,
            eval_episodes: 200,
            eval_seed: 1_000_003,
            eval_sim_hz: 30.0,
            eval_policy_hz: 10.0,
        }
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::default(),
            Preset::Desk => {
                let mut c = Self::default();
                c.env.n_sv = 3;
                c.env.n_obs_sv = 3;
                c.env.map.approach_length = 40.0;
                c.agent.hidden = 32;
                c.agent.batch_size = 64;
                c.total_steps = 150_000;
                c.checkpoint_every = 0;
                c.eval_episodes = 100;
                c
            }
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.agent.validate()?;
        self.env.validate()?;
        self.safety.validate()?;
        self.eval_env().validate()?;
        if self.uncertainty_buffer == 0 || self.update_every == 0 {
            return Err(Error::Config("uncertainty_buffer and update_every must be positive".into()));
        }
        Ok(())
    }

    /// Agent settings after the variant's overrides.
    pub fn agent_config(&self) -> AgentConfig {
        let mut a = self.agent.clone();
        self.variant.adjust(&mut a);
        a
    }

    pub fn eval_env(&self) -> EnvConfig {
        EnvConfig {
            sim_hz: self.eval_sim_hz,
            policy_hz: self.eval_policy_hz,
            ..self.env.clone()
        }
    }

    /// Gradient steps a run will take, used for the learning-rate decay.
    pub fn planned_updates(&self) -> u64 {
        self.total_steps.saturating_sub(self.warmup_steps).div_ceil(self.update_every)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_reject_unknown_keys() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert!(RunConfig::from_json(r#"{"seeed": 3}"#).is_err());
        assert!(RunConfig::from_json(r#"{"agent": {"gamma": 2.0}}"#).is_err());
    }

    #[test]
    fn desk_preset_shrinks_scene() {
        let d = RunConfig::preset(Preset::Desk);
        d.validate().unwrap();
        assert_eq!(d.env.n_sv, 3);
        assert_eq!(d.env.map.approach_length, 40.0);
        assert_eq!(d.total_steps, 150_000);
        assert_eq!(d.agent.ensemble_size, 5);
    }
}
