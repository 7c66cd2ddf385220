//! Command-line front end: energy tables, graphs, solver runs, ROG and
//! report tables. Thread count follows `RAYON_NUM_THREADS`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use atomalloc::energy::{EnergySource, QTable};
use atomalloc::experiment::{
    aggregate_table, build_graph, graph_report, load_instance, load_summary, rog, ExperimentSpec, GraphChoice,
    Profile, SolverKind,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "atomalloc", version, about = "Atom allocation on periodic grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the dense energy table of an instance (binary and CSV).
    BuildQ(Common),
    /// Build the message-passing graph and write diagnostics.
    Graph {
        #[command(flatten)]
        common: Common,
        /// Nodes whose neighbor sets are dumped.
        #[arg(long, value_delimiter = ',')]
        nodes: Vec<usize>,
    },
    /// Run a multi-shot solver experiment.
    Solve(Common),
    /// Exhaustive minimum of an instance.
    Oracle(Common),
    /// Relative optimality gap of a found energy.
    Rog {
        #[arg(long, allow_hyphen_values = true)]
        ground: f64,
        #[arg(long, allow_hyphen_values = true)]
        found: f64,
    },
    /// Aggregate run summaries into solver and graph comparison tables.
    Report {
        /// Summary files or directories searched for `summary.json`.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated seeds, one per shot.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long, value_enum)]
    solver: Option<SolverArg>,
    #[arg(long, value_enum)]
    graph: Option<GraphArg>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Greedy,
    Sa,
    Gnt,
    Brute,
}

#[derive(Clone, Copy, ValueEnum)]
enum GraphArg {
    Cutoff,
    Margulis3d,
    Gg3d,
    Complete,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Paper,
    Test,
}

impl Common {
    /// Config file with flag overrides applied: profile first, then
    /// explicit seeds and shot counts.
    fn spec(&self) -> Result<ExperimentSpec> {
        let mut spec = ExperimentSpec::load(&self.config)
            .with_context(|| format!("reading config {}", self.config.display()))?;
        if let Some(s) = self.solver {
            spec.solver = match s {
                SolverArg::Greedy => SolverKind::Greedy,
                SolverArg::Sa => SolverKind::Sa,
                SolverArg::Gnt => SolverKind::Gnt,
                SolverArg::Brute => SolverKind::Brute,
            };
        }
        if let Some(g) = self.graph {
            spec.graph.kind = match g {
                GraphArg::Cutoff => GraphChoice::Cutoff,
                GraphArg::Margulis3d => GraphChoice::Margulis3d,
                GraphArg::Gg3d => GraphChoice::Gg3d,
                GraphArg::Complete => GraphChoice::Complete,
            };
        }
        if let Some(p) = self.profile {
            spec.apply_profile(match p {
                ProfileArg::Paper => Profile::Paper,
                ProfileArg::Test => Profile::Test,
            });
        }
        if !self.seed.is_empty() {
            spec.seeds = self.seed.clone();
        }
        if let Some(n) = self.shots {
            if !self.seed.is_empty() && self.seed.len() != n {
                bail!("{} seeds given for {n} shots", self.seed.len());
            }
            spec.set_shots(n);
        }
        if self.out.is_some() {
            spec.out = self.out.clone();
        }
        Ok(spec)
    }

    fn out_dir(&self, spec: &ExperimentSpec) -> Result<PathBuf> {
        let out = spec.out.clone().context("an output directory is required (--out)")?;
        fs::create_dir_all(&out)?;
        Ok(out)
    }
}

fn solve(spec: &ExperimentSpec) -> Result<()> {
    let bundle = atomalloc::experiment::run_experiment(spec)?;
    println!("{}", serde_json::to_string_pretty(&bundle.summary)?);
    for (i, s) in bundle.summary.shots.iter().enumerate() {
        if let Some(e) = &s.error {
            log::error!("shot {i} (seed {}) failed: {e}", s.seed);
        }
    }
    if bundle.summary.best_energy.is_none() {
        bail!("no shot produced an allocation");
    }
    Ok(())
}

fn find_summaries(path: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        entries.sort();
        for e in entries {
            if e.is_dir() || e.file_name().is_some_and(|n| n == "summary.json") {
                find_summaries(&e, found)?;
            }
        }
    } else {
        found.push(path.to_path_buf());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildQ(c) => {
            let spec = c.spec()?;
            let out = c.out_dir(&spec)?;
            let inst = load_instance(&spec.instance)?;
            let q = QTable::from_source(inst.source.as_ref(), &spec.name)?;
            q.write_binary(fs::File::create(out.join("q.bin"))?)?;
            q.write_csv(fs::File::create(out.join("q.csv"))?)?;
            let meta = serde_json::json!({
                "name": spec.name,
                "n_positions": q.n_positions(),
                "n_species": q.n_species(),
                "counts": inst.counts,
                "content_hash": q.content_hash(),
            });
            fs::write(out.join("q.json"), serde_json::to_string_pretty(&meta)?)?;
            println!("{}", serde_json::to_string_pretty(&meta)?);
        }
        Command::Graph { common: c, nodes } => {
            let spec = c.spec()?;
            let inst = load_instance(&spec.instance)?;
            let report = graph_report(&spec.graph, inst.n(), inst.positions.as_ref(), &nodes)?;
            for w in &report.warnings {
                log::warn!("{w}");
            }
            let text = serde_json::to_string_pretty(&report)?;
            if let Some(out) = &spec.out {
                fs::create_dir_all(out)?;
                fs::write(out.join("graph_report.json"), &text)?;
                let g = build_graph(&spec.graph, inst.n(), inst.positions.as_ref())?;
                g.write_edge_list(fs::File::create(out.join("edges.txt"))?)?;
            }
            println!("{text}");
        }
        Command::Solve(c) => solve(&c.spec()?)?,
        Command::Oracle(c) => {
            let mut spec = c.spec()?;
            spec.solver = SolverKind::Brute;
            spec.seeds.truncate(1);
            solve(&spec)?;
        }
        Command::Rog { ground, found } => {
            let r = rog(ground, found)?;
            println!("{}", serde_json::json!({ "e_ground": ground, "e_found": found, "rog": r }));
        }
        Command::Report { inputs, out } => {
            let mut paths = Vec::new();
            for p in &inputs {
                find_summaries(p, &mut paths)?;
            }
            let summaries =
                paths.iter().map(|p| load_summary(p).with_context(|| format!("reading {}", p.display()))).collect::<Result<Vec<_>>>()?;
            let solvers = aggregate_table(&summaries, false);
            let graphs = aggregate_table(&summaries, true);
            if let Some(out) = out {
                fs::create_dir_all(&out)?;
                fs::write(out.join("solvers.csv"), &solvers)?;
                fs::write(out.join("graphs.csv"), &graphs)?;
            }
            print!("{solvers}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
