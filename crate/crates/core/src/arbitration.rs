//! Ensemble vote between the policy command and the filtered command.

use serde::{Deserialize, Serialize};

use crate::distrl::quantile::weighted;
use crate::dynamics::ControlCommand;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    Rl,
    Cbf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArbitrationRecord {
    pub u_rl: ControlCommand,
    pub u_cbf: ControlCommand,
    /// `(CVaR at u_rl, CVaR at u_cbf)` per member.
    pub cvars: Vec<[f64; 2]>,
    pub vote_fraction: f64,
    pub percentile: f64,
    pub chosen: Choice,
}

/// Fraction of members whose CVaR at `u_rl` is at least their CVaR at `u_cbf`.
pub fn vote_fraction(cvars: &[[f64; 2]]) -> f64 {
    if cvars.is_empty() {
        return 0.0;
    }
    let votes = cvars.iter().filter(|c| c[0] >= c[1] - 1e-12).count();
    votes as f64 / cvars.len() as f64
}

/// Picks `u_rl` iff the vote fraction exceeds `p`. `rl_quantiles[n]` and
/// `cbf_quantiles[n]` are member `n`'s heads at each command.
pub fn select(
    u_rl: ControlCommand,
    u_cbf: ControlCommand,
    rl_quantiles: &[&[f64]],
    cbf_quantiles: &[&[f64]],
    cvar_w: &[f64],
    p: f64,
) -> (ControlCommand, ArbitrationRecord) {
    assert_eq!(rl_quantiles.len(), cbf_quantiles.len(), "one quantile set per member");
    let cvars: Vec<[f64; 2]> = rl_quantiles
        .iter()
        .zip(cbf_quantiles)
        .map(|(r, c)| [weighted(r, cvar_w), weighted(c, cvar_w)])
        .collect();
    let frac = vote_fraction(&cvars);
    let chosen = if frac > p { Choice::Rl } else { Choice::Cbf };
    let u = match chosen {
        Choice::Rl => u_rl,
        Choice::Cbf => u_cbf,
    };
    (
        u,
        ArbitrationRecord {
            u_rl,
            u_cbf,
            cvars,
            vote_fraction: frac,
            percentile: p,
            chosen,
        },
    )
}
