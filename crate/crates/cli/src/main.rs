use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedalign::experiment::{self, ExperimentConfig, ExperimentError};
use fedalign::fedsplit::{federated_split, ShardStats, SplitError, SplitOptions};
use fedalign::relgraph::{GraphError, RelGraph};
use fedalign::synthetic::{generate, SyntheticSpec};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(name = "fedalign", version, about = "Federated RGCN training with basis alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (strategy, seed) pair of a config and write CSV summaries.
    Run {
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a Cartesian grid of overrides (`key = v1, v2` lines) over a config.
    Grid {
        config: PathBuf,
        grid: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Split a dataset directory (or `synthetic`) into client shards.
    Split {
        dataset: String,
        #[arg(long)]
        clients: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 6)]
        types_to_keep: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print entity/edge statistics of a split directory.
    Stats { split_dir: PathBuf },
}

/// An error paired with the exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        let code = if e.is_config() {
            EXIT_CONFIG
        } else if e.is_numeric() {
            EXIT_NUMERIC
        } else {
            EXIT_DATA
        };
        Self { code, msg: e.to_string() }
    }
}

impl From<GraphError> for Failure {
    fn from(e: GraphError) -> Self {
        Self {
            code: EXIT_DATA,
            msg: e.to_string(),
        }
    }
}

impl From<SplitError> for Failure {
    fn from(e: SplitError) -> Self {
        Self {
            code: EXIT_CONFIG,
            msg: e.to_string(),
        }
    }
}

fn data_err(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: EXIT_DATA,
        msg: format!("{}: {e}", path.display()),
    }
}

fn load_config(path: &Path, out: Option<PathBuf>) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure {
        code: EXIT_CONFIG,
        msg: format!("{}: {e}", path.display()),
    })?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(out) = out {
        cfg.output = out;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = load_config(&config, out)?;
            let summary = experiment::run_experiment(&cfg)?;
            print!("{}", summary.table());
            println!("outputs in {}", cfg.output.display());
        }
        Command::Grid { config, grid, out } => {
            let cfg = load_config(&config, out)?;
            let text = fs::read_to_string(&grid).map_err(|e| Failure {
                code: EXIT_CONFIG,
                msg: format!("{}: {e}", grid.display()),
            })?;
            let grid = experiment::parse_grid(&text)?;
            let result = experiment::grid_search(&cfg, &grid)?;
            for b in &result.best {
                let assignment: Vec<String> = b.assignment.iter().map(|(k, v)| format!("{k}={v}")).collect();
                println!("{}\t{:.4}\t{}", b.strategy, b.mean_acc, assignment.join(" "));
            }
        }
        Command::Split {
            dataset,
            clients,
            seed,
            types_to_keep,
            out,
        } => {
            let graph = if dataset == "synthetic" {
                generate(&SyntheticSpec::default(), 0)
            } else {
                RelGraph::load_dir(Path::new(&dataset))?.0
            };
            let data = federated_split(&graph, &SplitOptions::new(clients, types_to_keep, seed))?;
            data.write_dir(&out)?;
            let source = out.join("source.tsv");
            fs::write(&source, format!("entities\tedges\n{}\t{}\n", graph.num_nodes, graph.edges.len()))
                .map_err(|e| data_err(&source, e))?;
            print!("{}", data.stats.table());
        }
        Command::Stats { split_dir } => print!("{}", split_stats(&split_dir)?.table()),
    }
    Ok(())
}

/// Recompute shard statistics from the `client_*` directories written by
/// `split`; source totals come from `source.tsv` when present.
fn split_stats(dir: &Path) -> Result<ShardStats, Failure> {
    let mut clients: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| data_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("client_")))
        .collect();
    clients.sort();
    if clients.is_empty() {
        return Err(Failure {
            code: EXIT_DATA,
            msg: format!("{}: no client_* directories", dir.display()),
        });
    }
    let mut entities = Vec::new();
    let mut edges = Vec::new();
    for c in &clients {
        let (g, _) = RelGraph::load_dir(c)?;
        entities.push(g.num_nodes);
        edges.push(g.edges.len());
    }
    let (mut src_n, mut src_e) = (0, 0);
    let source = dir.join("source.tsv");
    if let Ok(text) = fs::read_to_string(&source) {
        let row = text.lines().nth(1).unwrap_or("");
        let mut it = row.split('\t').map(|s| s.trim().parse::<usize>());
        if let (Some(Ok(n)), Some(Ok(e))) = (it.next(), it.next()) {
            (src_n, src_e) = (n, e);
        }
    }
    Ok(ShardStats::from_counts(src_n, src_e, entities, edges))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
