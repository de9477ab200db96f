//! Experiment configuration, seeded multi-run execution and grid search.
//!
//! Configs are flat `key = value` text. Keys before any section header are
//! global; `[synthetic]` holds the generator spec and a section named after
//! a strategy (e.g. `[FedProx]`) overrides that strategy's hyperparameters.
//!
//! ```text
//! dataset = synthetic
//! strategies = FedAVG, FedAlign, FedAlign-L
//! seeds = 0, 1, 2
//! mu = 10
//!
//! [synthetic]
//! nodes = 600
//!
//! [FedAlign]
//! mu = 1
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::fedengine::{Aggregation, EngineError, Federation, StrategyConfig, StrategyKind, ROUND_CSV_HEADER};
use crate::fedsplit::{federated_split, mean_std, SplitError, SplitOptions};
use crate::ot::SinkhornConfig;
use crate::relgraph::{GraphError, NeighborIndex, RelGraph};
use crate::rgcn::Architecture;
use crate::synthetic::{generate, SyntheticSpec};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("config field `{field}`: {msg}")]
    Field { field: String, msg: String },
    #[error(transparent)]
    Data(#[from] GraphError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error("{strategy} seed {seed}: {source}")]
    Run {
        strategy: String,
        seed: u64,
        #[source]
        source: EngineError,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ExperimentError {
    fn field(field: &str, msg: impl Into<String>) -> Self {
        Self::Field {
            field: field.to_string(),
            msg: msg.into(),
        }
    }

    /// Configuration problems as opposed to data or numeric failures.
    pub fn is_config(&self) -> bool {
        matches!(self, Self::Parse { .. } | Self::Field { .. })
    }

    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Self::Run {
                source: EngineError::Numeric { .. },
                ..
            }
        )
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synthetic { spec: SyntheticSpec, seed: u64 },
    Dir(PathBuf),
}

/// Per-strategy hyperparameter overrides from a strategy section.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StrategyOverrides {
    pub mu: Option<f64>,
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    pub e_local: Option<usize>,
    pub e_global: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub n_clients: usize,
    pub types_to_keep: usize,
    pub shared_type_choice: bool,
    /// Display names, e.g. `FedAlign-L`.
    pub strategies: Vec<String>,
    pub overrides: BTreeMap<String, StrategyOverrides>,
    pub mu: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub num_bases: usize,
    pub d0: usize,
    pub layers: usize,
    pub e_local: usize,
    pub e_global: usize,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    pub aggregation: Aggregation,
    pub inverse_relations: bool,
    pub share_coeffs: bool,
    pub sinkhorn: SinkhornConfig,
    /// Fill the `ms` columns; off by default so outputs are reproducible
    /// byte for byte.
    pub record_wall_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::Synthetic {
                spec: SyntheticSpec::default(),
                seed: 0,
            },
            n_clients: 10,
            types_to_keep: 6,
            shared_type_choice: false,
            strategies: ["FedAVG", "FedProx", "FedAlign", "FedAVG-L", "FedProx-L", "FedAlign-L"]
                .map(String::from)
                .to_vec(),
            overrides: BTreeMap::new(),
            mu: 10.0,
            lambda: 10.0,
            alpha: 0.1,
            num_bases: 100,
            d0: 16,
            layers: 2,
            e_local: 5,
            e_global: 20,
            seeds: vec![0],
            output: PathBuf::from("fedalign-out"),
            aggregation: Aggregation::SizeWeighted,
            inverse_relations: true,
            share_coeffs: false,
            sinkhorn: SinkhornConfig::default(),
            record_wall_time: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| ExperimentError::field(key, format!("cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(ExperimentError::field(key, format!("expected true or false, got `{v}`"))),
    }
}

fn list(v: &str) -> Vec<&str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

fn canonical_strategy(name: &str) -> Option<String> {
    StrategyConfig::parse_name(name).map(|(k, l)| StrategyConfig::new(k, l).name())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| ExperimentError::Parse {
                    line: line_no,
                    msg: "unterminated section header".into(),
                })?;
                section = Some(name.trim().to_string());
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ExperimentError::Parse {
                line: line_no,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            cfg.set(section.as_deref(), k.trim(), v.trim()).map_err(|e| match e {
                ExperimentError::Field { field, msg } => ExperimentError::Parse {
                    line: line_no,
                    msg: format!("`{field}`: {msg}"),
                },
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Apply one `key = value` assignment. `section` is `None` for global
    /// keys, `synthetic`, or a strategy name.
    pub fn set(&mut self, section: Option<&str>, key: &str, v: &str) -> Result<()> {
        match section {
            None => self.set_global(key, v),
            Some("synthetic") => {
                let (spec, seed) = match &mut self.dataset {
                    DatasetSource::Synthetic { spec, seed } => (spec, seed),
                    DatasetSource::Dir(_) => {
                        self.dataset = DatasetSource::Synthetic {
                            spec: SyntheticSpec::default(),
                            seed: 0,
                        };
                        return self.set(section, key, v);
                    }
                };
                let f = format!("synthetic.{key}");
                match key {
                    "nodes" => spec.nodes = parse_num(&f, v)?,
                    "types" => spec.types = parse_num(&f, v)?,
                    "relations" => spec.relations = parse_num(&f, v)?,
                    "edge_density" => spec.edge_density = parse_num(&f, v)?,
                    "classes" => spec.classes = parse_num(&f, v)?,
                    "label_fraction" => spec.label_fraction = parse_num(&f, v)?,
                    "test_fraction" => spec.test_fraction = parse_num(&f, v)?,
                    "type_skew" => spec.type_skew = parse_num(&f, v)?,
                    "homophily" => spec.homophily = parse_num(&f, v)?,
                    "seed" => *seed = parse_num(&f, v)?,
                    _ => return Err(ExperimentError::field(&f, "unknown key")),
                }
                Ok(())
            }
            Some(name) => {
                let canon = canonical_strategy(name)
                    .ok_or_else(|| ExperimentError::field(name, "unknown section (not `synthetic` or a strategy name)"))?;
                let f = format!("{canon}.{key}");
                let o = self.overrides.entry(canon).or_default();
                match key {
                    "mu" => o.mu = Some(parse_num(&f, v)?),
                    "lambda" => o.lambda = Some(parse_num(&f, v)?),
                    "alpha" | "learning_rate" => o.alpha = Some(parse_num(&f, v)?),
                    "e_local" => o.e_local = Some(parse_num(&f, v)?),
                    "e_global" => o.e_global = Some(parse_num(&f, v)?),
                    _ => return Err(ExperimentError::field(&f, "unknown key")),
                }
                Ok(())
            }
        }
    }

    fn set_global(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "dataset" => {
                self.dataset = if v == "synthetic" {
                    match &self.dataset {
                        DatasetSource::Synthetic { .. } => self.dataset.clone(),
                        DatasetSource::Dir(_) => DatasetSource::Synthetic {
                            spec: SyntheticSpec::default(),
                            seed: 0,
                        },
                    }
                } else {
                    DatasetSource::Dir(PathBuf::from(v))
                }
            }
            "n_clients" => self.n_clients = parse_num(key, v)?,
            "types_to_keep" => self.types_to_keep = parse_num(key, v)?,
            "shared_type_choice" => self.shared_type_choice = parse_bool(key, v)?,
            "strategies" => {
                self.strategies = list(v)
                    .into_iter()
                    .map(|s| canonical_strategy(s).ok_or_else(|| ExperimentError::field(key, format!("unknown strategy `{s}`"))))
                    .collect::<Result<_>>()?
            }
            "mu" => self.mu = parse_num(key, v)?,
            "lambda" => self.lambda = parse_num(key, v)?,
            "alpha" | "learning_rate" => self.alpha = parse_num(key, v)?,
            "num_bases" => self.num_bases = parse_num(key, v)?,
            "d0" => self.d0 = parse_num(key, v)?,
            "layers" => self.layers = parse_num(key, v)?,
            "e_local" => self.e_local = parse_num(key, v)?,
            "e_global" => self.e_global = parse_num(key, v)?,
            "seeds" => self.seeds = list(v).into_iter().map(|s| parse_num(key, s)).collect::<Result<_>>()?,
            "output" => self.output = PathBuf::from(v),
            "aggregation" => {
                self.aggregation = Aggregation::parse(v)
                    .ok_or_else(|| ExperimentError::field(key, "expected size_weighted or inverse_size"))?
            }
            "inverse_relations" => self.inverse_relations = parse_bool(key, v)?,
            "share_coeffs" => self.share_coeffs = parse_bool(key, v)?,
            "sinkhorn_lambda" => self.sinkhorn.lambda = parse_num(key, v)?,
            "sinkhorn_max_iters" => self.sinkhorn.max_iters = parse_num(key, v)?,
            "sinkhorn_tol" => self.sinkhorn.tol = parse_num(key, v)?,
            "record_wall_time" => self.record_wall_time = parse_bool(key, v)?,
            _ => return Err(ExperimentError::field(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ExperimentError::field(name, "must be positive"))
            }
        };
        let non_negative = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ExperimentError::field(name, "must be non-negative"))
            }
        };
        if self.n_clients < 2 {
            return Err(ExperimentError::field("n_clients", "at least 2 clients are required"));
        }
        if self.types_to_keep == 0 {
            return Err(ExperimentError::field("types_to_keep", "must be positive"));
        }
        if self.strategies.is_empty() {
            return Err(ExperimentError::field("strategies", "at least one strategy is required"));
        }
        if self.seeds.is_empty() {
            return Err(ExperimentError::field("seeds", "at least one seed is required"));
        }
        non_negative("mu", self.mu)?;
        non_negative("lambda", self.lambda)?;
        positive("alpha", self.alpha)?;
        positive("sinkhorn_lambda", self.sinkhorn.lambda)?;
        positive("sinkhorn_tol", self.sinkhorn.tol)?;
        for (name, v) in [
            ("num_bases", self.num_bases),
            ("d0", self.d0),
            ("layers", self.layers),
            ("e_local", self.e_local),
            ("e_global", self.e_global),
            ("sinkhorn_max_iters", self.sinkhorn.max_iters),
        ] {
            if v == 0 {
                return Err(ExperimentError::field(name, "must be positive"));
            }
        }
        if let DatasetSource::Synthetic { spec, .. } = &self.dataset {
            spec.validate().map_err(|m| ExperimentError::field("synthetic", m))?;
        }
        for name in &self.strategies {
            self.strategy(name)?
                .validate()
                .map_err(|e| ExperimentError::field(name, e.to_string()))?;
        }
        Ok(())
    }

    /// Resolved hyperparameters for one strategy.
    pub fn strategy(&self, name: &str) -> Result<StrategyConfig> {
        let (kind, lipschitz) =
            StrategyConfig::parse_name(name).ok_or_else(|| ExperimentError::field("strategies", format!("unknown strategy `{name}`")))?;
        let o = self.overrides.get(&StrategyConfig::new(kind, lipschitz).name()).cloned().unwrap_or_default();
        let mut s = StrategyConfig::new(kind, lipschitz);
        s.mu = match kind {
            StrategyKind::FedAvg | StrategyKind::Separate => 0.0,
            _ => o.mu.unwrap_or(self.mu),
        };
        s.lambda = o.lambda.unwrap_or(self.lambda);
        s.learning_rate = o.alpha.unwrap_or(self.alpha);
        s.e_local = o.e_local.unwrap_or(self.e_local);
        s.e_global = o.e_global.unwrap_or(self.e_global);
        s.aggregation = self.aggregation;
        s.share_coeffs = self.share_coeffs;
        s.sinkhorn = self.sinkhorn;
        Ok(s)
    }

    /// Every setting written out explicitly; parsing the result gives back
    /// an equal config.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let join = |v: Vec<String>| v.join(", ");
        match &self.dataset {
            DatasetSource::Synthetic { .. } => s.push_str("dataset = synthetic\n"),
            DatasetSource::Dir(p) => {
                let _ = writeln!(s, "dataset = {}", p.display());
            }
        }
        let _ = writeln!(s, "n_clients = {}", self.n_clients);
        let _ = writeln!(s, "types_to_keep = {}", self.types_to_keep);
        let _ = writeln!(s, "shared_type_choice = {}", self.shared_type_choice);
        let _ = writeln!(s, "strategies = {}", self.strategies.join(", "));
        let _ = writeln!(s, "seeds = {}", join(self.seeds.iter().map(u64::to_string).collect()));
        let _ = writeln!(s, "num_bases = {}", self.num_bases);
        let _ = writeln!(s, "alpha = {:?}", self.alpha);
        let _ = writeln!(s, "mu = {:?}", self.mu);
        let _ = writeln!(s, "lambda = {:?}", self.lambda);
        let _ = writeln!(s, "e_local = {}", self.e_local);
        let _ = writeln!(s, "e_global = {}", self.e_global);
        let _ = writeln!(s, "d0 = {}", self.d0);
        let _ = writeln!(s, "layers = {}", self.layers);
        let _ = writeln!(s, "aggregation = {}", self.aggregation.name());
        let _ = writeln!(s, "inverse_relations = {}", self.inverse_relations);
        let _ = writeln!(s, "share_coeffs = {}", self.share_coeffs);
        let _ = writeln!(s, "sinkhorn_lambda = {:?}", self.sinkhorn.lambda);
        let _ = writeln!(s, "sinkhorn_max_iters = {}", self.sinkhorn.max_iters);
        let _ = writeln!(s, "sinkhorn_tol = {:?}", self.sinkhorn.tol);
        let _ = writeln!(s, "record_wall_time = {}", self.record_wall_time);
        let _ = writeln!(s, "output = {}", self.output.display());
        if let DatasetSource::Synthetic { spec, seed } = &self.dataset {
            s.push_str("\n[synthetic]\n");
            let _ = writeln!(s, "seed = {seed}");
            let _ = writeln!(s, "nodes = {}", spec.nodes);
            let _ = writeln!(s, "types = {}", spec.types);
            let _ = writeln!(s, "relations = {}", spec.relations);
            let _ = writeln!(s, "edge_density = {:?}", spec.edge_density);
            let _ = writeln!(s, "classes = {}", spec.classes);
            let _ = writeln!(s, "label_fraction = {:?}", spec.label_fraction);
            let _ = writeln!(s, "test_fraction = {:?}", spec.test_fraction);
            let _ = writeln!(s, "type_skew = {:?}", spec.type_skew);
            let _ = writeln!(s, "homophily = {:?}", spec.homophily);
        }
        for (name, o) in &self.overrides {
            let _ = writeln!(s, "\n[{name}]");
            if let Some(v) = o.mu {
                let _ = writeln!(s, "mu = {v:?}");
            }
            if let Some(v) = o.lambda {
                let _ = writeln!(s, "lambda = {v:?}");
            }
            if let Some(v) = o.alpha {
                let _ = writeln!(s, "alpha = {v:?}");
            }
            if let Some(v) = o.e_local {
                let _ = writeln!(s, "e_local = {v}");
            }
            if let Some(v) = o.e_global {
                let _ = writeln!(s, "e_global = {v}");
            }
        }
        s
    }

    pub fn load_graph(&self) -> Result<RelGraph> {
        match &self.dataset {
            DatasetSource::Synthetic { spec, seed } => Ok(generate(spec, *seed)),
            DatasetSource::Dir(dir) => Ok(RelGraph::load_dir(dir)?.0),
        }
    }
}

/// Outcome of one `(strategy, seed)` run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub strategy: String,
    pub seed: u64,
    pub final_acc: f64,
    pub best_acc: f64,
    pub rounds: usize,
    pub wall_ms: f64,
    /// The run's round log, header included.
    pub round_csv: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategySummary {
    pub strategy: String,
    pub runs: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub runs: Vec<RunResult>,
    pub strategies: Vec<StrategySummary>,
}

pub const SUMMARY_CSV_HEADER: &str = "strategy,seed,final_test_acc,best_test_acc,e_global,e_local,sinkhorn_max_iters,ms";

impl RunSummary {
    pub fn strategy(&self, name: &str) -> Option<&StrategySummary> {
        self.strategies.iter().find(|s| s.strategy == name)
    }

    fn summary_csv(&self, cfg: &ExperimentConfig) -> String {
        let mut s = format!("{SUMMARY_CSV_HEADER}\n");
        for r in &self.runs {
            let st = cfg.strategy(&r.strategy).expect("validated");
            let ms = if cfg.record_wall_time { format!("{:.1}", r.wall_ms) } else { String::new() };
            let _ = writeln!(
                s,
                "{},{},{:.10},{:.10},{},{},{},{ms}",
                r.strategy, r.seed, r.final_acc, r.best_acc, st.e_global, st.e_local, st.sinkhorn.max_iters
            );
        }
        s
    }

    fn strategies_csv(&self) -> String {
        let mut s = String::from("strategy,runs,mean_acc,std_acc\n");
        for st in &self.strategies {
            let _ = writeln!(s, "{},{},{:.10},{:.10}", st.strategy, st.runs, st.mean_acc, st.std_acc);
        }
        s
    }

    /// Accuracy table in the `SP / plain / -L` row layout.
    pub fn table(&self) -> String {
        let order = ["SP", "FedAVG", "FedProx", "FedAlign", "FedAVG-L", "FedProx-L", "FedAlign-L"];
        let mut s = String::from("| strategy | accuracy (mean ± std) | runs |\n|---|---|---|\n");
        let known = order.iter().filter_map(|n| self.strategy(n));
        let extra = self.strategies.iter().filter(|st| !order.contains(&st.strategy.as_str()));
        for st in known.chain(extra) {
            let _ = writeln!(
                s,
                "| {} | {:.2}% ± {:.2}% | {} |",
                st.strategy,
                100.0 * st.mean_acc,
                100.0 * st.std_acc,
                st.runs
            );
        }
        s
    }
}

/// Thread count from `FEDALIGN_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var("FEDALIGN_THREADS").ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Run `f` on a pool capped by `FEDALIGN_THREADS` (rayon's default otherwise).
pub fn with_thread_cap<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    match thread_cap() {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(e) => {
                log::warn!("cannot build a {n}-thread pool ({e}); using the global pool");
                f()
            }
        },
        None => f(),
    }
}

/// Train one strategy for one seed on an already loaded graph.
pub fn run_single(cfg: &ExperimentConfig, graph: &RelGraph, strategy: &str, seed: u64) -> Result<RunResult> {
    let started = Instant::now();
    let st = cfg.strategy(strategy)?;
    let mut opts = SplitOptions::new(cfg.n_clients, cfg.types_to_keep, seed);
    opts.shared_type_choice = cfg.shared_type_choice;
    let data = federated_split(graph, &opts)?;
    let probe = NeighborIndex::build(&data.shards[0].graph, cfg.inverse_relations);
    let arch = Architecture {
        d0: cfg.d0,
        layers: cfg.layers,
        num_bases: cfg.num_bases,
        num_relations: probe.num_relations(),
        num_classes: graph.num_classes,
    };
    let wrap = |source| ExperimentError::Run {
        strategy: strategy.to_string(),
        seed,
        source,
    };
    let mut fed = Federation::new(&data, &arch, st.clone(), seed, cfg.inverse_relations).map_err(wrap)?;
    let mut csv = format!("{ROUND_CSV_HEADER}\n");
    let mut final_acc = 0.0;
    let mut best_acc: f64 = 0.0;
    for _ in 0..st.e_global {
        let rec = fed.run_round().map_err(wrap)?;
        csv.push_str(&rec.csv_rows(strategy, seed, cfg.record_wall_time));
        final_acc = rec.test_acc;
        best_acc = best_acc.max(rec.test_acc);
    }
    let wall_ms = started.elapsed().as_secs_f64() * 1e3;
    log::info!("{strategy} seed {seed}: accuracy {final_acc:.4} in {:.1}s", wall_ms / 1e3);
    Ok(RunResult {
        strategy: strategy.to_string(),
        seed,
        final_acc,
        best_acc,
        rounds: st.e_global,
        wall_ms,
        round_csv: csv,
    })
}

fn summarize(runs: Vec<RunResult>, strategies: &[String]) -> RunSummary {
    let strategies = strategies
        .iter()
        .map(|name| {
            let accs: Vec<f64> = runs.iter().filter(|r| &r.strategy == name).map(|r| r.final_acc).collect();
            let (mean_acc, std_acc) = float_mean_std(&accs);
            StrategySummary {
                strategy: name.clone(),
                runs: accs.len(),
                mean_acc,
                std_acc,
            }
        })
        .collect();
    RunSummary { runs, strategies }
}

/// Population mean and standard deviation.
pub fn float_mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn write(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    fs::write(path, body).map_err(|source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Every `(strategy, seed)` pair, in parallel, without writing anything.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let graph = cfg.load_graph()?;
    let jobs: Vec<(&String, u64)> = cfg.strategies.iter().flat_map(|s| cfg.seeds.iter().map(move |&seed| (s, seed))).collect();
    let runs = with_thread_cap(|| {
        jobs.par_iter()
            .map(|&(s, seed)| run_single(cfg, &graph, s, seed))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(summarize(runs, &cfg.strategies))
}

fn file_stem(strategy: &str) -> String {
    strategy.replace(|c: char| !c.is_ascii_alphanumeric() && c != '-', "_")
}

/// Run everything and write, under `cfg.output`:
/// `effective.cfg`, `rounds/<strategy>_seed<seed>.csv`, `summary.csv`,
/// `strategies.csv` and `table.md`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let summary = execute(cfg)?;
    write_outputs(cfg, &summary)?;
    Ok(summary)
}

pub fn write_outputs(cfg: &ExperimentConfig, summary: &RunSummary) -> Result<()> {
    let out = &cfg.output;
    write(&out.join("effective.cfg"), &cfg.serialize())?;
    for r in &summary.runs {
        write(&out.join("rounds").join(format!("{}_seed{}.csv", file_stem(&r.strategy), r.seed)), &r.round_csv)?;
    }
    write(&out.join("summary.csv"), &summary.summary_csv(cfg))?;
    write(&out.join("strategies.csv"), &summary.strategies_csv())?;
    write(&out.join("table.md"), &summary.table())?;
    Ok(())
}

/// Parameter name → candidate values, in declaration order.
pub type Grid = Vec<(String, Vec<String>)>;

/// Parse `key = v1, v2, …` lines.
pub fn parse_grid(text: &str) -> Result<Grid> {
    let mut grid = Grid::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ExperimentError::Parse {
            line: i + 1,
            msg: format!("expected `key = v1, v2, ...`, got `{line}`"),
        })?;
        let values: Vec<String> = list(v).into_iter().map(String::from).collect();
        if values.is_empty() {
            return Err(ExperimentError::Parse {
                line: i + 1,
                msg: format!("no values for `{}`", k.trim()),
            });
        }
        grid.push((k.trim().to_string(), values));
    }
    if grid.is_empty() {
        return Err(ExperimentError::field("grid", "empty grid"));
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub index: usize,
    pub assignment: Vec<(String, String)>,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridBest {
    pub strategy: String,
    pub point: usize,
    pub assignment: Vec<(String, String)>,
    pub mean_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub points: Vec<GridPoint>,
    pub best: Vec<GridBest>,
}

/// Cartesian product of the grid values, first key varying slowest.
pub fn grid_points(grid: &Grid) -> Vec<Vec<(String, String)>> {
    let mut points = vec![Vec::new()];
    for (k, values) in grid {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((k.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points
}

/// Index of the best `(accuracy, μ, λ)` candidate: highest accuracy, then
/// lower μ, then lower λ, then the earliest.
pub fn pick_best(candidates: &[(f64, f64, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &(acc, mu, lambda)) in candidates.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => {
                let (a, m, l) = candidates[b];
                acc > a || (acc == a && (mu < m || (mu == m && lambda < l)))
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

/// Run the full product and pick, per strategy, the point with the best
/// mean accuracy; ties go to lower μ, then lower λ, then the earlier point.
/// Writes `grid.csv` and `grid_best.csv` under `cfg.output`.
pub fn grid_search(cfg: &ExperimentConfig, grid: &Grid) -> Result<GridResult> {
    if grid.is_empty() {
        return Err(ExperimentError::field("grid", "empty grid"));
    }
    let mut configs = Vec::new();
    for assignment in grid_points(grid) {
        let mut c = cfg.clone();
        for (k, v) in &assignment {
            match k.split_once('.') {
                Some((section, key)) => c.set(Some(section), key, v)?,
                None => c.set(None, k, v)?,
            }
        }
        c.validate()?;
        configs.push((assignment, c));
    }
    let mut points = Vec::with_capacity(configs.len());
    for (index, (assignment, c)) in configs.iter().enumerate() {
        let summary = execute(c)?;
        points.push(GridPoint {
            index,
            assignment: assignment.clone(),
            summary,
        });
    }

    let mut best = Vec::new();
    for name in &cfg.strategies {
        let candidates = points
            .iter()
            .zip(&configs)
            .map(|(p, (_, c))| {
                let st = c.strategy(name)?;
                let acc = p.summary.strategy(name).map(|s| s.mean_acc).unwrap_or(f64::NEG_INFINITY);
                Ok((acc, st.mu, st.lambda))
            })
            .collect::<Result<Vec<_>>>()?;
        let point = pick_best(&candidates).expect("grid has at least one point");
        best.push(GridBest {
            strategy: name.clone(),
            point,
            assignment: points[point].assignment.clone(),
            mean_acc: candidates[point].0,
        });
    }

    let keys: Vec<&str> = grid.iter().map(|(k, _)| k.as_str()).collect();
    let mut csv = format!("point,strategy,{},mean_acc,std_acc,runs\n", keys.join(","));
    for p in &points {
        let values: Vec<&str> = p.assignment.iter().map(|(_, v)| v.as_str()).collect();
        for st in &p.summary.strategies {
            let _ = writeln!(
                csv,
                "{},{},{},{:.10},{:.10},{}",
                p.index,
                st.strategy,
                values.join(","),
                st.mean_acc,
                st.std_acc,
                st.runs
            );
        }
    }
    let mut best_csv = format!("strategy,point,{},mean_acc\n", keys.join(","));
    for b in &best {
        let values: Vec<&str> = b.assignment.iter().map(|(_, v)| v.as_str()).collect();
        let _ = writeln!(best_csv, "{},{},{},{:.10}", b.strategy, b.point, values.join(","), b.mean_acc);
    }
    write(&cfg.output.join("grid.csv"), &csv)?;
    write(&cfg.output.join("grid_best.csv"), &best_csv)?;
    Ok(GridResult { points, best })
}

/// Entity/edge statistics line for a split directory's shards.
pub fn describe_counts(entities: &[usize], edges: &[usize]) -> String {
    let (em, es) = mean_std(entities);
    let (dm, ds) = mean_std(edges);
    format!("entities {em:.2} ± {es:.2}, edges {dm:.2} ± {ds:.2}")
}
