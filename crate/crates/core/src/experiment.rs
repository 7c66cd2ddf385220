//! Multi-shot experiment runs and their on-disk result bundles.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classical::{greedy_solve, sa_solve, GreedyConfig, SAConfig};
use crate::energy::{energy_hard, synth_q, EnergySource, ForceField, PairKernel, QTable, SynthDistribution, DENSE_LIMIT};
use crate::error::{Error, Result};
use crate::gnt::{gnt_train, GntConfig};
use crate::graphs::{
    attach_edge_features, complete_graph, gabber_galil_3d, graph_stats, margulis_3d, radius_cutoff_graph, CompGraph,
    GraphStats,
};
use crate::model::{build_grid, count_feasible, order_of_magnitude, write_xyz, AllocationRecord, Composition, PositionSet, SpeciesSet};
use crate::oracle::{brute_force_min, OracleOptions, DEFAULT_BUDGET};
use crate::par;
use crate::result::{best_of, write_epoch_csv, write_trace_csv, SolveResult};

/// Relative optimality gap `|E_g − E_f| / |E_g|`.
pub fn rog(e_ground: f64, e_found: f64) -> Result<f64> {
    if e_ground == 0.0 {
        return Err(Error::UndefinedGap);
    }
    Ok((e_ground - e_found).abs() / e_ground.abs())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RogRecord {
    pub e_ground: f64,
    pub e_found: f64,
    pub rog: f64,
}

impl RogRecord {
    pub fn new(e_ground: f64, e_found: f64) -> Result<Self> {
        Ok(RogRecord { e_ground, e_found, rog: rog(e_ground, e_found)? })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Greedy,
    Sa,
    Gnt,
    Brute,
}

impl SolverKind {
    pub fn label(self) -> &'static str {
        match self {
            SolverKind::Greedy => "greedy",
            SolverKind::Sa => "sa",
            SolverKind::Gnt => "gnt",
            SolverKind::Brute => "brute",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphChoice {
    Cutoff,
    Margulis3d,
    Gg3d,
    Complete,
}

impl GraphChoice {
    pub fn label(self) -> &'static str {
        match self {
            GraphChoice::Cutoff => "cutoff",
            GraphChoice::Margulis3d => "margulis3d",
            GraphChoice::Gg3d => "gg3d",
            GraphChoice::Complete => "complete",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphSpec {
    pub kind: GraphChoice,
    pub r_cut: f64,
    pub k_nn: usize,
}

impl Default for GraphSpec {
    fn default() -> Self {
        GraphSpec { kind: GraphChoice::Gg3d, r_cut: 4.0, k_nn: 16 }
    }
}

/// Where the energies come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum InstanceSpec {
    Composition { composition: PathBuf, forcefield: PathBuf },
    Synthetic { n: usize, counts: Vec<usize>, seed: u64, distribution: SynthDistribution },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub instance: InstanceSpec,
    #[serde(default)]
    pub ground_truth: Option<f64>,
    #[serde(default)]
    pub graph: GraphSpec,
    pub solver: SolverKind,
    /// One seed per shot.
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub greedy: GreedyConfig,
    #[serde(default)]
    pub sa: SAConfig,
    #[serde(default)]
    pub gnt: GntConfig,
    #[serde(default = "default_budget")]
    pub oracle_budget: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_budget() -> u64 {
    DEFAULT_BUDGET
}

impl ExperimentSpec {
    /// Reads a spec; relative instance paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut spec: ExperimentSpec = serde_json::from_str(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let InstanceSpec::Composition { composition, forcefield } = &mut spec.instance {
            for p in [composition, forcefield] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(spec)
    }

    /// Step budgets and shot counts of a run profile: local search with
    /// 10 shots of 200k (`Paper`) or 20k (`Test`) steps, the network with 5
    /// shots of 100k or 2k epochs. The first seed is kept as the base.
    pub fn apply_profile(&mut self, profile: Profile) {
        let (steps, epochs) = match profile {
            Profile::Paper => (200_000, 100_000),
            Profile::Test => (20_000, 2_000),
        };
        self.greedy.max_iter = steps;
        self.sa.max_iter = steps;
        self.gnt.epochs = epochs;
        let shots = match self.solver {
            SolverKind::Greedy | SolverKind::Sa => 10,
            SolverKind::Gnt => 5,
            SolverKind::Brute => 1,
        };
        self.set_shots(shots);
    }

    /// Consecutive seeds starting at the first one.
    pub fn set_shots(&mut self, shots: usize) {
        let base = self.seeds.first().copied().unwrap_or(0);
        self.seeds = (0..shots as u64).map(|i| base.wrapping_add(i)).collect();
    }

    fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if let InstanceSpec::Composition { composition, forcefield } = &self.instance {
            for p in [composition, forcefield] {
                if !p.exists() {
                    return Err(Error::Config(format!("missing file {}", p.display())));
                }
            }
        }
        Ok(())
    }
}

/// A loaded problem: energy source, stoichiometry and optional geometry.
pub struct Instance {
    pub source: Box<dyn EnergySource>,
    pub counts: Vec<usize>,
    pub positions: Option<PositionSet>,
    pub species: Option<SpeciesSet>,
    pub composition: Option<Composition>,
}

impl Instance {
    pub fn n(&self) -> usize {
        self.source.n_positions()
    }
}

/// Dense table when it fits, otherwise the displacement kernel.
pub fn energy_source(positions: &PositionSet, species: &SpeciesSet, ff: &ForceField) -> Result<Box<dyn EnergySource>> {
    let kernel = PairKernel::build(positions.g, &positions.cell, species, ff)?;
    if positions.len() * (species.k() + 1) <= DENSE_LIMIT {
        Ok(Box::new(QTable::from_source(&kernel, "forcefield")?))
    } else {
        Ok(Box::new(kernel))
    }
}

pub fn load_instance(spec: &InstanceSpec) -> Result<Instance> {
    match spec {
        InstanceSpec::Composition { composition, forcefield } => {
            let comp = Composition::load(composition)?;
            let ff = ForceField::load(forcefield)?;
            let positions = build_grid(&comp.grid_spec()?)?;
            let species = comp.species_set()?;
            let source = energy_source(&positions, &species, &ff)?;
            Ok(Instance {
                source,
                counts: species.counts.clone(),
                positions: Some(positions),
                species: Some(species),
                composition: Some(comp),
            })
        }
        InstanceSpec::Synthetic { n, counts, seed, distribution } => Ok(Instance {
            source: Box::new(synth_q(*n, counts.len(), *seed, *distribution)?),
            counts: counts.clone(),
            positions: None,
            species: None,
            composition: None,
        }),
    }
}

/// Builds the message-passing graph; geometric graphs need positions.
pub fn build_graph(spec: &GraphSpec, n: usize, positions: Option<&PositionSet>) -> Result<CompGraph> {
    let grid_side = || -> Result<usize> {
        let g = (n as f64).cbrt().round() as usize;
        if g * g * g != n {
            return Err(Error::Config(format!("{n} positions do not form a cubic grid")));
        }
        Ok(g)
    };
    match spec.kind {
        GraphChoice::Gg3d => gabber_galil_3d(grid_side()?),
        GraphChoice::Margulis3d => margulis_3d(grid_side()?),
        GraphChoice::Complete => complete_graph(n),
        GraphChoice::Cutoff => {
            let pos = positions.ok_or_else(|| Error::Config("cutoff graphs need grid geometry".into()))?;
            radius_cutoff_graph(pos, spec.r_cut, spec.k_nn)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotSummary {
    pub seed: u64,
    pub best_energy: Option<f64>,
    pub step_of_best: usize,
    pub feasible: bool,
    pub error: Option<String>,
}

/// Deterministic part of a run; wall times live in [`Timing`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub composition: Option<String>,
    pub solver: SolverKind,
    pub graph: Option<GraphChoice>,
    pub n_positions: usize,
    pub counts: Vec<usize>,
    pub space_size: String,
    pub space_size_log10: usize,
    pub ground_truth: Option<f64>,
    pub best_energy: Option<f64>,
    pub rog: Option<f64>,
    pub best_shot: Option<usize>,
    pub step_of_best: Option<usize>,
    pub feasible_shots: usize,
    pub shots: Vec<ShotSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_s: f64,
    pub shots_s: Vec<f64>,
}

pub struct Bundle {
    pub summary: Summary,
    pub timing: Timing,
    pub results: Vec<std::result::Result<SolveResult, String>>,
}

fn run_shot(spec: &ExperimentSpec, inst: &Instance, graph: Option<&CompGraph>, seed: u64) -> Result<SolveResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src = inst.source.as_ref();
    let r = match spec.solver {
        SolverKind::Greedy => greedy_solve(src, &inst.counts, spec.greedy.max_iter, &spec.greedy.strategy, &mut rng)?,
        SolverKind::Sa => sa_solve(src, &inst.counts, &spec.sa, &mut rng)?,
        SolverKind::Gnt => gnt_train(src, graph.expect("graph built for gnt"), &inst.counts, &spec.gnt, &mut rng)?,
        SolverKind::Brute => {
            let start = Instant::now();
            let o = brute_force_min(src, &inst.counts, &OracleOptions { budget: spec.oracle_budget })?;
            SolveResult {
                best_energy: Some(o.energy),
                best_allocation: Some(o.allocation),
                step_of_best: 0,
                feasible: true,
                trace: Vec::new(),
                epochs: Vec::new(),
                wall_time_s: start.elapsed().as_secs_f64(),
                swap_fallbacks: 0,
            }
        }
    };
    // every reported energy is recomputed from scratch
    let mut r = r;
    if let (Some(e), Some(x)) = (r.best_energy, &r.best_allocation) {
        let check = energy_hard(x, src)?;
        if (check - e).abs() > 1e-6 * e.abs().max(1.0) {
            return Err(Error::Numerical(format!("reported energy {e} but recomputed {check}")));
        }
        r.best_energy = Some(check);
    }
    Ok(r)
}

/// Runs every shot in parallel. Shot failures are recorded, not fatal.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Bundle> {
    spec.validate()?;
    let start = Instant::now();
    let inst = load_instance(&spec.instance)?;
    let n = inst.n();
    let graph = if spec.solver == SolverKind::Gnt {
        let g = build_graph(&spec.graph, n, inst.positions.as_ref())?;
        for w in &g.meta.warnings {
            log::warn!("{w}");
        }
        Some(attach_edge_features(g, inst.source.as_ref())?)
    } else {
        None
    };
    let results: Vec<std::result::Result<SolveResult, String>> =
        par::map_slice(&spec.seeds, |&s| run_shot(spec, &inst, graph.as_ref(), s).map_err(|e| e.to_string()));
    let size = count_feasible(n, &inst.counts)?;
    let ok: Vec<SolveResult> = results.iter().filter_map(|r| r.as_ref().ok().cloned()).collect();
    let best = best_of(&ok);
    let best_shot = best.and_then(|b| results.iter().position(|r| r.as_ref().ok() == Some(b)));
    let best_energy = best.and_then(|b| b.best_energy);
    let ground_truth = spec.ground_truth.or(if spec.solver == SolverKind::Brute { best_energy } else { None });
    let rog = match (ground_truth, best_energy) {
        (Some(g), Some(f)) => rog(g, f).ok(),
        _ => None,
    };
    let shots = spec
        .seeds
        .iter()
        .zip(&results)
        .map(|(&seed, r)| match r {
            Ok(r) => ShotSummary {
                seed,
                best_energy: r.best_energy,
                step_of_best: r.step_of_best,
                feasible: r.feasible,
                error: None,
            },
            Err(e) => ShotSummary { seed, best_energy: None, step_of_best: 0, feasible: false, error: Some(e.clone()) },
        })
        .collect();
    let summary = Summary {
        name: spec.name.clone(),
        composition: inst.composition.as_ref().map(|c| c.name.clone()),
        solver: spec.solver,
        graph: (spec.solver == SolverKind::Gnt).then_some(spec.graph.kind),
        n_positions: n,
        counts: inst.counts.clone(),
        space_size: size.to_string(),
        space_size_log10: order_of_magnitude(&size),
        ground_truth,
        best_energy,
        rog,
        best_shot,
        step_of_best: best.map(|b| b.step_of_best),
        feasible_shots: ok.iter().filter(|r| r.feasible).count(),
        shots,
    };
    let timing = Timing {
        total_s: start.elapsed().as_secs_f64(),
        shots_s: results.iter().map(|r| r.as_ref().map(|r| r.wall_time_s).unwrap_or(0.0)).collect(),
    };
    let bundle = Bundle { summary, timing, results };
    if let Some(out) = &spec.out {
        write_bundle(&bundle, &inst, out)?;
    }
    Ok(bundle)
}

/// `summary.json`, `timing.json`, per-shot traces, the best allocation and
/// plot-data CSVs.
pub fn write_bundle(bundle: &Bundle, inst: &Instance, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let s = &bundle.summary;
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(s)?)?;
    fs::write(out.join("timing.json"), serde_json::to_string_pretty(&bundle.timing)?)?;
    for (i, r) in bundle.results.iter().enumerate() {
        let Ok(r) = r else { continue };
        if !r.trace.is_empty() {
            write_trace_csv(fs::File::create(out.join(format!("shot{i}_trace.csv")))?, &r.trace)?;
        }
        if !r.epochs.is_empty() {
            write_epoch_csv(fs::File::create(out.join(format!("shot{i}_epochs.csv")))?, &r.epochs)?;
        }
    }
    if let Some(best) = s.best_shot.and_then(|i| bundle.results[i].as_ref().ok()) {
        if let Some(x) = &best.best_allocation {
            if let (Some(pos), Some(sp)) = (&inst.positions, &inst.species) {
                write_xyz(fs::File::create(out.join("best.xyz"))?, x, pos, sp, best.best_energy)?;
                let rec = AllocationRecord::new(x, sp, pos.g, best.best_energy);
                fs::write(out.join("best_allocation.json"), serde_json::to_string_pretty(&rec)?)?;
            } else {
                fs::write(out.join("best_allocation.json"), serde_json::to_string_pretty(x)?)?;
            }
        }
    }
    let label = s.graph.map(|g| g.label()).unwrap_or("");
    let mut f = fs::File::create(out.join("rog_vs_space.csv"))?;
    writeln!(f, "name,solver,graph,log10_space_size,rog")?;
    writeln!(f, "{},{},{},{},{}", s.name, s.solver.label(), label, s.space_size_log10, opt(s.rog))?;
    let mut f = fs::File::create(out.join("steps_to_best_vs_space.csv"))?;
    writeln!(f, "name,solver,graph,log10_space_size,step_of_best")?;
    writeln!(f, "{},{},{},{},{}", s.name, s.solver.label(), label, s.space_size_log10, opt(s.step_of_best))?;
    Ok(())
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn load_summary(path: impl AsRef<Path>) -> Result<Summary> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Rows per composition with an energy and a ROG column per solver, or per
/// graph for network runs (`by_graph`).
pub fn aggregate_table(summaries: &[Summary], by_graph: bool) -> String {
    let key = |s: &Summary| s.composition.clone().unwrap_or_else(|| s.name.clone());
    let column = |s: &Summary| {
        if by_graph {
            s.graph.map(|g| g.label().to_string()).unwrap_or_default()
        } else {
            s.solver.label().to_string()
        }
    };
    let mut columns: Vec<String> = Vec::new();
    let mut rows: BTreeMap<(usize, String), (Option<f64>, BTreeMap<String, (Option<f64>, Option<f64>)>)> =
        BTreeMap::new();
    for s in summaries {
        if by_graph && s.graph.is_none() {
            continue;
        }
        let c = column(s);
        if !columns.contains(&c) {
            columns.push(c.clone());
        }
        let row = rows.entry((s.space_size_log10, key(s))).or_insert((None, BTreeMap::new()));
        row.0 = row.0.or(s.ground_truth);
        let cell = row.1.entry(c).or_insert((None, None));
        if s.best_energy.is_some() && cell.0.is_none_or(|e| s.best_energy.unwrap() < e) {
            *cell = (s.best_energy, s.rog);
        }
    }
    let mut out = String::from("composition,log10_space_size,ground_truth");
    for c in &columns {
        out.push_str(&format!(",{c}_energy,{c}_rog"));
    }
    out.push('\n');
    for ((size, name), (gt, cells)) in rows {
        out.push_str(&format!("{name},{size},{}", opt(gt)));
        for c in &columns {
            let (e, r) = cells.get(c).copied().unwrap_or((None, None));
            out.push_str(&format!(",{},{}", opt(e), opt(r)));
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphReport {
    pub kind: GraphChoice,
    pub stats: GraphStats,
    pub warnings: Vec<String>,
    pub neighbors: BTreeMap<usize, Vec<usize>>,
}

/// Structural diagnostics plus the neighbor sets of the chosen nodes.
pub fn graph_report(spec: &GraphSpec, n: usize, positions: Option<&PositionSet>, nodes: &[usize]) -> Result<GraphReport> {
    let g = build_graph(spec, n, positions)?;
    let adj = g.adjacency();
    let neighbors = nodes.iter().filter(|&&u| u < n).map(|&u| (u, adj[u].clone())).collect();
    Ok(GraphReport { kind: spec.kind, stats: graph_stats(&g, true), warnings: g.meta.warnings.clone(), neighbors })
}
