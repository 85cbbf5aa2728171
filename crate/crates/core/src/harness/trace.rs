//! Line-delimited JSON episode traces.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::arbitration::Choice;
use crate::dynamics::{ControlCommand, VehicleState};
use crate::env::map::{MapConfig, Task};
use crate::env::reward::RewardBreakdown;
use crate::env::{Events, Outcome, VehicleGeometry};
use crate::error::{Error, Result};
use crate::pipeline::Variant;
use crate::safety::FilterStatus;
use crate::uncertainty::UncertaintySnapshot;

pub const TRACE_SCHEMA: &str = "usdc-trace";
pub const TRACE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema: String,
    pub version: u32,
    pub variant: Variant,
    pub task: Task,
    pub seed: u64,
    pub map: MapConfig,
    pub vehicle: VehicleGeometry,
    pub policy_hz: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleSnap {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub phi: f64,
    pub length: f64,
    pub width: f64,
}

impl VehicleSnap {
    pub fn of(id: usize, s: &VehicleState) -> Self {
        Self {
            id,
            x: s.x,
            y: s.y,
            v: s.v,
            phi: s.phi,
            length: s.length,
            width: s.width,
        }
    }
}

/// One policy step: the world before the command, the decision, and its result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub ego: VehicleSnap,
    pub svs: Vec<VehicleSnap>,
    pub u_rl: ControlCommand,
    pub u_cbf: Option<ControlCommand>,
    pub u: ControlCommand,
    pub chosen: Choice,
    pub uncertainty: Option<UncertaintySnapshot>,
    pub filter_status: Option<FilterStatus>,
    pub active: Vec<usize>,
    pub qp_iterations: usize,
    pub max_residual: f64,
    pub vote_fraction: Option<f64>,
    pub reward: RewardBreakdown,
    pub events: Events,
    pub outcome: Option<Outcome>,
}

pub fn write_trace<W: Write>(mut w: W, header: &TraceHeader, records: &[TraceRecord]) -> Result<()> {
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace<R: BufRead>(r: R) -> Result<(TraceHeader, Vec<TraceRecord>)> {
    let mut lines = r.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Contract("empty trace".into()))??;
    let header: TraceHeader = serde_json::from_str(&first)?;
    if header.schema != TRACE_SCHEMA || header.version != TRACE_VERSION {
        return Err(Error::Contract(format!(
            "unsupported trace schema {} v{}",
            header.schema, header.version
        )));
    }
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok((header, records))
}
