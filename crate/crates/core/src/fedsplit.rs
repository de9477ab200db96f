//! Synthesize an N-client federated dataset from one graph.
//!
//! Per shard: pick `types_to_keep` unlabeled node types, keep a uniformly
//! sized random subset of each (`U{0..=|type|}` nodes), then add one
//! disjoint slice of the shuffled training labels and every test node.
//! An edge survives in a shard iff both endpoints are present.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::relgraph::{GraphError, RelGraph, Triple};

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("need at least 2 clients, got {0}")]
    TooFewClients(usize),
    #[error("{clients} clients exceed the {train} training nodes")]
    TooManyClients { clients: usize, train: usize },
    #[error("graph has no unlabeled node types to sample from")]
    NoUnlabeledTypes,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitOptions {
    pub n_clients: usize,
    pub types_to_keep: usize,
    pub seed: u64,
    /// Draw the kept types once for all shards instead of once per shard.
    pub shared_type_choice: bool,
}

impl SplitOptions {
    pub fn new(n_clients: usize, types_to_keep: usize, seed: u64) -> Self {
        Self {
            n_clients,
            types_to_keep,
            seed,
            shared_type_choice: false,
        }
    }
}

/// One participant's private subgraph with local contiguous ids.
#[derive(Debug, Clone)]
pub struct ClientShard {
    pub graph: RelGraph,
    /// local id → global id (sorted ascending)
    pub to_global: Vec<usize>,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

impl ClientShard {
    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.graph.edges.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardStats {
    pub source_entities: usize,
    pub source_edges: usize,
    pub entities: Vec<usize>,
    pub edges: Vec<usize>,
    pub entity_mean: f64,
    pub entity_std: f64,
    pub edge_mean: f64,
    pub edge_std: f64,
}

impl ShardStats {
    pub fn from_counts(source_entities: usize, source_edges: usize, entities: Vec<usize>, edges: Vec<usize>) -> Self {
        let (entity_mean, entity_std) = mean_std(&entities);
        let (edge_mean, edge_std) = mean_std(&edges);
        Self {
            source_entities,
            source_edges,
            entities,
            edges,
            entity_mean,
            entity_std,
            edge_mean,
            edge_std,
        }
    }

    /// Fraction of the source edges kept by each shard.
    pub fn edge_retention(&self) -> Vec<f64> {
        self.edges.iter().map(|&e| e as f64 / self.source_edges.max(1) as f64).collect()
    }

    pub fn entity_cv(&self) -> f64 {
        self.entity_std / self.entity_mean
    }

    pub fn edge_cv(&self) -> f64 {
        self.edge_std / self.edge_mean
    }

    /// Per-shard rows followed by `mean ± std`, tab separated.
    pub fn table(&self) -> String {
        let mut s = String::from("shard\tentities\tedges\n");
        for (k, (n, e)) in self.entities.iter().zip(&self.edges).enumerate() {
            let _ = writeln!(s, "{k}\t{n}\t{e}");
        }
        let _ = writeln!(
            s,
            "each\t{:.2} ± {:.2}\t{:.2} ± {:.2}",
            self.entity_mean, self.entity_std, self.edge_mean, self.edge_std
        );
        let _ = writeln!(s, "source\t{}\t{}", self.source_entities, self.source_edges);
        s
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[usize]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone)]
pub struct FederatedDataset {
    pub shards: Vec<ClientShard>,
    pub stats: ShardStats,
}

impl FederatedDataset {
    /// Write one `client_XX` directory per shard in the relgraph TSV formats.
    pub fn write_dir(&self, dir: &Path) -> Result<(), GraphError> {
        for (k, shard) in self.shards.iter().enumerate() {
            shard.graph.write_dir(&dir.join(format!("client_{k:02}")))?;
        }
        Ok(())
    }
}

pub fn shard_stats(source: &RelGraph, shards: &[ClientShard]) -> ShardStats {
    ShardStats::from_counts(
        source.num_nodes,
        source.edges.len(),
        shards.iter().map(ClientShard::num_nodes).collect(),
        shards.iter().map(ClientShard::num_edges).collect(),
    )
}

pub fn federated_split(g: &RelGraph, opts: &SplitOptions) -> Result<FederatedDataset, SplitError> {
    let n = opts.n_clients;
    if n < 2 {
        return Err(SplitError::TooFewClients(n));
    }
    if n > g.train_ids.len() {
        return Err(SplitError::TooManyClients {
            clients: n,
            train: g.train_ids.len(),
        });
    }
    let mut by_type: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for node in 0..g.num_nodes {
        if !g.is_labeled(node) {
            by_type.entry(g.node_type[node]).or_default().push(node);
        }
    }
    let types: Vec<usize> = by_type.keys().copied().collect();
    if types.is_empty() {
        return Err(SplitError::NoUnlabeledTypes);
    }
    let keep = if opts.types_to_keep > types.len() {
        log::warn!(
            "types_to_keep = {} exceeds the {} unlabeled types; keeping all",
            opts.types_to_keep,
            types.len()
        );
        types.len()
    } else {
        opts.types_to_keep
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let draw_types = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let mut picked: Vec<usize> = index::sample(rng, types.len(), keep).into_iter().map(|i| types[i]).collect();
        picked.sort_unstable();
        picked
    };
    let shared = opts.shared_type_choice.then(|| draw_types(&mut rng));
    let mut members: Vec<BTreeSet<usize>> = Vec::with_capacity(n);
    for _ in 0..n {
        let picked = match &shared {
            Some(p) => p.clone(),
            None => draw_types(&mut rng),
        };
        let mut set = BTreeSet::new();
        for t in picked {
            let pool = &by_type[&t];
            let count = rng.gen_range(0..=pool.len());
            set.extend(index::sample(&mut rng, pool.len(), count).into_iter().map(|i| pool[i]));
        }
        members.push(set);
    }

    let mut train = g.train_ids.clone();
    train.shuffle(&mut rng);
    let (base, extra) = (train.len() / n, train.len() % n);
    let mut start = 0;
    let mut train_parts = Vec::with_capacity(n);
    for k in 0..n {
        let len = base + usize::from(k < extra);
        train_parts.push(train[start..start + len].to_vec());
        start += len;
    }

    let shards: Vec<ClientShard> = members
        .into_iter()
        .zip(train_parts)
        .map(|(mut set, part)| {
            set.extend(part.iter().copied());
            set.extend(g.test_ids.iter().copied());
            build_shard(g, set, &part)
        })
        .collect();
    let stats = shard_stats(g, &shards);
    Ok(FederatedDataset { shards, stats })
}

fn build_shard(g: &RelGraph, nodes: BTreeSet<usize>, train_part: &[usize]) -> ClientShard {
    let to_global: Vec<usize> = nodes.into_iter().collect();
    let mut to_local = vec![usize::MAX; g.num_nodes];
    for (l, &gid) in to_global.iter().enumerate() {
        to_local[gid] = l;
    }
    let edges: Vec<Triple> = g
        .edges
        .iter()
        .filter(|e| to_local[e.src] != usize::MAX && to_local[e.dst] != usize::MAX)
        .map(|e| Triple {
            src: to_local[e.src],
            rel: e.rel,
            dst: to_local[e.dst],
        })
        .collect();
    let mut train_ids: Vec<usize> = train_part.iter().map(|&gid| to_local[gid]).collect();
    train_ids.sort_unstable();
    let test_ids: Vec<usize> = g.test_ids.iter().map(|&gid| to_local[gid]).collect();
    let labels = train_ids
        .iter()
        .chain(&test_ids)
        .map(|&l| (l, g.labels[&to_global[l]]))
        .collect();
    let graph = RelGraph {
        num_nodes: to_global.len(),
        node_type: to_global.iter().map(|&gid| g.node_type[gid]).collect(),
        edges,
        num_relations: g.num_relations,
        labels,
        num_classes: g.num_classes,
        train_ids: train_ids.clone(),
        test_ids: test_ids.clone(),
        node_names: to_global.iter().map(|&gid| g.node_names[gid].clone()).collect(),
        relation_names: g.relation_names.clone(),
        type_names: g.type_names.clone(),
        class_names: g.class_names.clone(),
    };
    ClientShard {
        graph,
        to_global,
        train_ids,
        test_ids,
    }
}
