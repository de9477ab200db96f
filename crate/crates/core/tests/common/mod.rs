//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use fedalign::fedengine::{Federation, StrategyConfig};
use fedalign::fedsplit::{federated_split, ClientShard, FederatedDataset, SplitOptions};
use fedalign::numkernel::Tensor;
use fedalign::relgraph::{parse_triples, NeighborIndex, RelGraph, TripleFormat};
use fedalign::rgcn::{Architecture, GraphContext, RgcnParams};
use fedalign::synthetic::{generate, SyntheticSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seven nodes, two relations, four labelled training nodes in three classes.
pub const TINY_EDGES: &str = "a\tr0\tb\nb\tr1\tc\nc\tr0\ta\nd\tr1\ta\ne\tr0\td\nb\tr0\te\nf\tr1\tb\ng\tr0\tf\n";
pub const TINY_LABELS: &str = "a\tx\ttrain\nb\ty\ttrain\nc\tx\ttrain\nd\tz\ttrain\ng\ty\ttest\n";

pub struct Tiny {
    pub graph: RelGraph,
    pub shard: ClientShard,
    pub ctx: GraphContext,
    pub arch: Architecture,
}

/// The tiny fixture as a single whole-graph shard, without inverse relations.
pub fn tiny(num_bases: usize, d0: usize) -> Tiny {
    let (mut graph, _) = parse_triples(TINY_EDGES, TripleFormat::Tsv).unwrap();
    graph.attach_labels(TINY_LABELS).unwrap();
    let shard = whole_shard(&graph);
    let idx = NeighborIndex::build(&graph, false);
    let ctx = GraphContext::new(&shard, &idx);
    let arch = Architecture {
        d0,
        layers: 2,
        num_bases,
        num_relations: idx.num_relations(),
        num_classes: graph.num_classes,
    };
    Tiny { graph, shard, ctx, arch }
}

pub fn whole_shard(g: &RelGraph) -> ClientShard {
    ClientShard {
        to_global: (0..g.num_nodes).collect(),
        train_ids: g.train_ids.clone(),
        test_ids: g.test_ids.clone(),
        graph: g.clone(),
    }
}

pub fn params(arch: &Architecture, n: usize, seed: u64) -> RgcnParams {
    RgcnParams::init(n, arch, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn random_like(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn small_spec(nodes: usize) -> SyntheticSpec {
    SyntheticSpec {
        nodes,
        ..SyntheticSpec::default()
    }
}

pub fn split(graph: &RelGraph, n: usize, seed: u64) -> FederatedDataset {
    federated_split(graph, &SplitOptions::new(n, 6, seed)).unwrap()
}

/// A compact synthetic federation for engine tests.
pub fn federation(nodes: usize, n_clients: usize, cfg: StrategyConfig, seed: u64) -> Federation {
    let graph = generate(&small_spec(nodes), 0);
    let data = split(&graph, n_clients, seed);
    federation_from(&graph, &data, cfg, seed, 8)
}

pub fn federation_from(graph: &RelGraph, data: &FederatedDataset, cfg: StrategyConfig, seed: u64, num_bases: usize) -> Federation {
    let idx = NeighborIndex::build(&data.shards[0].graph, true);
    let arch = Architecture {
        d0: 8,
        layers: 2,
        num_bases,
        num_relations: idx.num_relations(),
        num_classes: graph.num_classes,
    };
    Federation::new(data, &arch, cfg, seed, true).unwrap()
}

/// Every way a split can break the partitioning rules, as messages.
pub fn split_violations(g: &RelGraph, data: &FederatedDataset) -> Vec<String> {
    use std::collections::{BTreeSet, HashSet};
    let mut out = Vec::new();
    let global_edges: HashSet<_> = g.edges.iter().map(|e| (e.src, e.rel, e.dst)).collect();
    let mut seen_train = BTreeSet::new();
    let sizes: Vec<usize> = data.shards.iter().map(|s| s.train_ids.len()).collect();
    if sizes.iter().max().unwrap() - sizes.iter().min().unwrap() > 1 {
        out.push(format!("train part sizes {sizes:?} differ by more than one"));
    }
    for (k, s) in data.shards.iter().enumerate() {
        let members: HashSet<usize> = s.to_global.iter().copied().collect();
        if members.len() != s.to_global.len() || s.to_global.len() != s.graph.num_nodes {
            out.push(format!("shard {k}: id map is not a bijection"));
        }
        for &t in &s.train_ids {
            let gid = s.to_global[t];
            if !seen_train.insert(gid) {
                out.push(format!("shard {k}: training node {gid} also in another shard"));
            }
            if s.graph.labels.get(&t) != g.labels.get(&gid) {
                out.push(format!("shard {k}: training label of {gid} differs"));
            }
        }
        let test: HashSet<usize> = s.test_ids.iter().map(|&l| s.to_global[l]).collect();
        if test != g.test_ids.iter().copied().collect() {
            out.push(format!("shard {k}: test set is not the full test set"));
        }
        for e in &s.graph.edges {
            let ge = (s.to_global[e.src], e.rel, s.to_global[e.dst]);
            if !global_edges.contains(&ge) {
                out.push(format!("shard {k}: edge {ge:?} not in the source graph"));
            }
        }
        let kept = g.edges.iter().filter(|e| members.contains(&e.src) && members.contains(&e.dst)).count();
        if kept != s.graph.edges.len() {
            out.push(format!("shard {k}: {} edges, but {kept} have both endpoints present", s.graph.edges.len()));
        }
        for &l in &s.test_ids {
            if s.train_ids.contains(&l) {
                out.push(format!("shard {k}: test node {} used for training", s.to_global[l]));
            }
        }
    }
    if seen_train != g.train_ids.iter().copied().collect() {
        out.push("training parts do not cover the training set".into());
    }
    out
}
