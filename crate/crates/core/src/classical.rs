//! Greedy descent and simulated annealing over constraint-preserving moves.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::energy::{delta_replace, energy_hard, placement_energy, EnergySource, Move};
use crate::error::{Error, Result};
use crate::model::{counts_with_void, random_feasible, validate_allocation, Allocation};
use crate::par;
use crate::result::{SolveResult, TracePoint};

/// Mixture of relocations (atom to void) and cross-species swaps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoveStrategy {
    pub p_relocate: f64,
}

impl Default for MoveStrategy {
    fn default() -> Self {
        MoveStrategy { p_relocate: 1.0 }
    }
}

impl MoveStrategy {
    pub fn new(p_relocate: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_relocate) {
            return Err(Error::InvalidParameters(format!("p_relocate {p_relocate} outside [0, 1]")));
        }
        Ok(MoveStrategy { p_relocate })
    }
}

/// Sample count used to pick `T0` when it is not given.
pub const T0_SAMPLES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SAConfig {
    /// Initial temperature in eV; `None` picks the std of random-move ΔE.
    pub t0: Option<f64>,
    /// Floor temperature; `None` means `1e-3·T0`.
    pub t_min: Option<f64>,
    pub alpha: f64,
    pub sweep_factor: usize,
    pub max_iter: usize,
    pub n_shots: usize,
    pub strategy: MoveStrategy,
    pub trace_points: usize,
}

impl Default for SAConfig {
    fn default() -> Self {
        SAConfig {
            t0: None,
            t_min: None,
            alpha: 0.95,
            sweep_factor: 5,
            max_iter: 200_000,
            n_shots: 10,
            strategy: MoveStrategy::default(),
            trace_points: 1000,
        }
    }
}

impl SAConfig {
    fn validate(&self) -> Result<()> {
        MoveStrategy::new(self.strategy.p_relocate)?;
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParameters(format!("cooling factor {} outside (0, 1)", self.alpha)));
        }
        if self.sweep_factor == 0 {
            return Err(Error::InvalidParameters("sweep factor must be positive".into()));
        }
        if let Some(t) = self.t0 {
            if !(t > 0.0) {
                return Err(Error::InvalidTemperature(t));
            }
        }
        if let Some(t) = self.t_min {
            if !(t > 0.0) {
                return Err(Error::InvalidTemperature(t));
            }
        }
        if let (Some(t0), Some(tm)) = (self.t0, self.t_min) {
            if tm > t0 {
                return Err(Error::InvalidParameters(format!("T_min {tm} above T0 {t0}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GreedyConfig {
    pub max_iter: usize,
    pub n_shots: usize,
    pub strategy: MoveStrategy,
}

impl Default for GreedyConfig {
    fn default() -> Self {
        GreedyConfig { max_iter: 200_000, n_shots: 10, strategy: MoveStrategy::default() }
    }
}

/// Allocation with index lists for O(1) move proposals.
#[derive(Clone, Debug)]
pub struct MoveState {
    pub x: Allocation,
    occ: Vec<usize>,
    voids: Vec<usize>,
    /// position -> index in `occ` or `voids`
    slot: Vec<usize>,
    placements: Vec<(usize, usize)>,
    distinct_species: usize,
}

impl MoveState {
    pub fn new(x: Allocation) -> Self {
        let void = x.void();
        let mut occ = Vec::new();
        let mut voids = Vec::new();
        let mut slot = vec![0; x.n()];
        for (p, &t) in x.assign.iter().enumerate() {
            if t == void {
                slot[p] = voids.len();
                voids.push(p);
            } else {
                slot[p] = occ.len();
                occ.push(p);
            }
        }
        let placements = occ.iter().map(|&p| (p, x.assign[p])).collect();
        let distinct_species = x.species_counts()[..x.k].iter().filter(|&&c| c > 0).count();
        MoveState { x, occ, voids, slot, placements, distinct_species }
    }

    pub fn placements(&self) -> &[(usize, usize)] {
        &self.placements
    }

    /// Draws a constraint-preserving move. Returns whether a swap had to
    /// fall back to a relocation.
    pub fn propose<R: Rng + ?Sized>(&self, strategy: &MoveStrategy, rng: &mut R) -> Result<(Move, bool)> {
        let want_swap = strategy.p_relocate < 1.0 && !rng.random_bool(strategy.p_relocate);
        let mut fallback = false;
        if want_swap {
            if self.distinct_species >= 2 {
                loop {
                    let a = self.occ[rng.random_range(0..self.occ.len())];
                    let b = self.occ[rng.random_range(0..self.occ.len())];
                    if self.x.assign[a] != self.x.assign[b] {
                        return Ok((Move::Swap { a, b }, false));
                    }
                }
            }
            fallback = true;
        }
        if self.occ.is_empty() || self.voids.is_empty() {
            return Err(Error::NoValidMove("relocation needs an atom and a void position".into()));
        }
        let from = self.occ[rng.random_range(0..self.occ.len())];
        let to = self.voids[rng.random_range(0..self.voids.len())];
        Ok((Move::Relocate { from, to }, fallback))
    }

    pub fn delta<S: EnergySource + ?Sized>(&self, src: &S, mv: Move) -> f64 {
        match mv {
            Move::Relocate { from, to } => {
                let t = self.x.assign[from];
                delta_replace(src, &self.placements, &[(from, t)], &[(to, t)])
            }
            Move::Swap { a, b } => {
                let (ta, tb) = (self.x.assign[a], self.x.assign[b]);
                if ta == tb {
                    return 0.0;
                }
                delta_replace(src, &self.placements, &[(a, ta), (b, tb)], &[(a, tb), (b, ta)])
            }
        }
    }

    pub fn apply(&mut self, mv: Move) {
        match mv {
            Move::Relocate { from, to } => {
                let t = self.x.assign[from];
                let (io, iv) = (self.slot[from], self.slot[to]);
                self.occ[io] = to;
                self.voids[iv] = from;
                self.slot[to] = io;
                self.slot[from] = iv;
                self.placements[io] = (to, t);
                self.x.assign[to] = t;
                self.x.assign[from] = self.x.void();
            }
            Move::Swap { a, b } => {
                let (ta, tb) = (self.x.assign[a], self.x.assign[b]);
                self.x.assign[a] = tb;
                self.x.assign[b] = ta;
                self.placements[self.slot[a]] = (a, tb);
                self.placements[self.slot[b]] = (b, ta);
            }
        }
    }
}

/// Proposes a move on a plain allocation.
pub fn propose_move<R: Rng + ?Sized>(x: &Allocation, strategy: &MoveStrategy, rng: &mut R) -> Result<Move> {
    MoveState::new(x.clone()).propose(strategy, rng).map(|(m, _)| m)
}

/// Metropolis rule: downhill always, uphill with probability `exp(−ΔE/T)`.
pub fn metropolis_accept(e: f64, e_new: f64, t: f64, u: f64) -> Result<bool> {
    if !(t > 0.0) {
        return Err(Error::InvalidTemperature(t));
    }
    if e_new < e {
        return Ok(true);
    }
    Ok(u < (-(e_new - e) / t).exp())
}

fn check_instance<S: EnergySource + ?Sized>(src: &S, counts: &[usize]) -> Result<usize> {
    let n = src.n_positions();
    if counts.len() != src.n_species() {
        return Err(Error::DimensionMismatch { expected: src.n_species(), got: counts.len() });
    }
    counts_with_void(n, counts)?;
    Ok(n)
}

fn finish<S: EnergySource + ?Sized>(
    src: &S,
    counts: &[usize],
    best: Allocation,
    step_of_best: usize,
    trace: Vec<TracePoint>,
    start: Instant,
    swap_fallbacks: usize,
) -> Result<SolveResult> {
    let n = src.n_positions();
    let feasible = validate_allocation(&best, counts, n).is_ok();
    let best_energy = energy_hard(&best, src)?;
    Ok(SolveResult {
        best_energy: Some(best_energy),
        best_allocation: Some(best),
        step_of_best,
        feasible,
        trace,
        epochs: Vec::new(),
        wall_time_s: start.elapsed().as_secs_f64(),
        swap_fallbacks,
    })
}

/// Strict-descent local search from a random feasible start.
pub fn greedy_solve<S, R>(src: &S, counts: &[usize], max_iter: usize, strategy: &MoveStrategy, rng: &mut R) -> Result<SolveResult>
where
    S: EnergySource + ?Sized,
    R: Rng + ?Sized,
{
    let start = Instant::now();
    let n = check_instance(src, counts)?;
    MoveStrategy::new(strategy.p_relocate)?;
    let mut st = MoveState::new(random_feasible(n, counts, rng)?);
    let mut e = placement_energy(src, st.placements());
    let mut trace = vec![TracePoint { step: 0, current: e, best: e, temperature: 0.0 }];
    let mut step_of_best = 0;
    let mut fallbacks = 0;
    for step in 1..=max_iter {
        let (mv, fb) = st.propose(strategy, rng)?;
        fallbacks += fb as usize;
        let d = st.delta(src, mv);
        if d < 0.0 {
            st.apply(mv);
            e += d;
            step_of_best = step;
            trace.push(TracePoint { step, current: e, best: e, temperature: 0.0 });
        }
    }
    finish(src, counts, st.x, step_of_best, trace, start, fallbacks)
}

/// Standard deviation of ΔE over random proposals from `x` (not applied).
pub fn auto_temperature<S, R>(src: &S, x: &Allocation, strategy: &MoveStrategy, samples: usize, rng: &mut R) -> Result<f64>
where
    S: EnergySource + ?Sized,
    R: Rng + ?Sized,
{
    let st = MoveState::new(x.clone());
    let mut ds = Vec::with_capacity(samples);
    for _ in 0..samples {
        let (mv, _) = st.propose(strategy, rng)?;
        ds.push(st.delta(src, mv));
    }
    let m = ds.iter().sum::<f64>() / ds.len().max(1) as f64;
    let var = ds.iter().map(|d| (d - m).powi(2)).sum::<f64>() / ds.len().max(1) as f64;
    Ok(var.sqrt())
}

/// Metropolis walk with geometric cooling every `S·n` steps.
pub fn sa_solve<S, R>(src: &S, counts: &[usize], cfg: &SAConfig, rng: &mut R) -> Result<SolveResult>
where
    S: EnergySource + ?Sized,
    R: Rng + ?Sized,
{
    let start = Instant::now();
    let n = check_instance(src, counts)?;
    cfg.validate()?;
    let mut st = MoveState::new(random_feasible(n, counts, rng)?);
    let t0 = match cfg.t0 {
        Some(t) => t,
        None => {
            let s = auto_temperature(src, &st.x, &cfg.strategy, T0_SAMPLES, rng)?;
            // flat landscapes give zero spread; any positive value works there
            if s > 0.0 {
                s
            } else {
                1.0
            }
        }
    };
    let t_min = cfg.t_min.unwrap_or(1e-3 * t0).min(t0);
    let period = cfg.sweep_factor * n;
    let every = (cfg.max_iter / cfg.trace_points.max(1)).max(1);
    let mut t = t0;
    let mut e = placement_energy(src, st.placements());
    let mut best_e = e;
    let mut best = st.x.clone();
    let mut step_of_best = 0;
    let mut trace = vec![TracePoint { step: 0, current: e, best: e, temperature: t }];
    let mut fallbacks = 0;
    for step in 1..=cfg.max_iter {
        let (mv, fb) = st.propose(&cfg.strategy, rng)?;
        fallbacks += fb as usize;
        let d = st.delta(src, mv);
        let u: f64 = rng.random();
        if metropolis_accept(e, e + d, t, u)? {
            st.apply(mv);
            e += d;
            if e < best_e {
                best_e = e;
                best.clone_from(&st.x);
                step_of_best = step;
            }
        }
        if step % period == 0 {
            t = (t * cfg.alpha).max(t_min);
        }
        if step % every == 0 || step == cfg.max_iter {
            trace.push(TracePoint { step, current: e, best: best_e, temperature: t });
        }
    }
    finish(src, counts, best, step_of_best, trace, start, fallbacks)
}

/// Independent RNG stream for shot `i` of a run seeded with `seed`.
pub fn shot_rng(seed: u64, shot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(shot as u64);
    rng
}

/// Runs `n_shots` greedy searches in parallel.
pub fn greedy_shots<S: EnergySource + ?Sized>(src: &S, counts: &[usize], cfg: &GreedyConfig, seed: u64) -> Result<Vec<SolveResult>> {
    par::map_range(cfg.n_shots, |i| greedy_solve(src, counts, cfg.max_iter, &cfg.strategy, &mut shot_rng(seed, i)))
        .into_iter()
        .collect()
}

/// Runs `n_shots` annealing chains in parallel.
pub fn sa_shots<S: EnergySource + ?Sized>(src: &S, counts: &[usize], cfg: &SAConfig, seed: u64) -> Result<Vec<SolveResult>> {
    par::map_range(cfg.n_shots, |i| sa_solve(src, counts, cfg, &mut shot_rng(seed, i)))
        .into_iter()
        .collect()
}
