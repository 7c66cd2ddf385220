//! Solver outcomes and their traces.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::Allocation;

/// One sample of a local-search run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub current: f64,
    pub best: f64,
    pub temperature: f64,
}

/// One sample of a training run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub soft_loss: f64,
    /// Best feasible hard energy so far, if any.
    pub best_energy: Option<f64>,
    pub feasible: bool,
    pub sinkhorn_iters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    /// `None` when no feasible allocation was found.
    pub best_energy: Option<f64>,
    pub best_allocation: Option<Allocation>,
    /// Step or epoch at which the best allocation was first seen.
    pub step_of_best: usize,
    pub feasible: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<TracePoint>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub epochs: Vec<EpochRecord>,
    pub wall_time_s: f64,
    /// Swaps drawn with a single species present, replaced by relocations.
    #[serde(default)]
    pub swap_fallbacks: usize,
}

impl SolveResult {
    /// Equality up to wall time.
    pub fn same_outcome(&self, other: &SolveResult) -> bool {
        self.best_energy == other.best_energy
            && self.best_allocation == other.best_allocation
            && self.step_of_best == other.step_of_best
            && self.trace == other.trace
            && self.epochs == other.epochs
    }

    /// Best energy, or `+∞` when nothing feasible was found.
    pub fn energy_or_inf(&self) -> f64 {
        self.best_energy.unwrap_or(f64::INFINITY)
    }
}

/// Lowest energy over feasible results; the earliest wins ties.
pub fn best_of(results: &[SolveResult]) -> Option<&SolveResult> {
    results
        .iter()
        .filter(|r| r.feasible && r.best_energy.is_some())
        .fold(None, |acc: Option<&SolveResult>, r| match acc {
            Some(b) if b.energy_or_inf() <= r.energy_or_inf() => Some(b),
            _ => Some(r),
        })
}

pub fn write_trace_csv<W: Write>(mut w: W, trace: &[TracePoint]) -> Result<()> {
    writeln!(w, "step,current_energy,best_energy,temperature")?;
    for t in trace {
        writeln!(w, "{},{:.10},{:.10},{:.6e}", t.step, t.current, t.best, t.temperature)?;
    }
    Ok(())
}

pub fn write_epoch_csv<W: Write>(mut w: W, epochs: &[EpochRecord]) -> Result<()> {
    writeln!(w, "epoch,soft_loss,best_energy,feasible,sinkhorn_iters")?;
    for r in epochs {
        let best = r.best_energy.map(|e| format!("{e:.10}")).unwrap_or_default();
        writeln!(w, "{},{:.10},{},{},{}", r.epoch, r.soft_loss, best, r.feasible as u8, r.sinkhorn_iters)?;
    }
    Ok(())
}
