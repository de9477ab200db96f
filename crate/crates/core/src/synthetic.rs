//! Planted-signal typed graph generator.
//!
//! Every node gets a hidden community. Edges prefer to stay inside a
//! community, and their relation prefers one tied to the target's
//! community. Nodes of type 0 are the classification targets; a target's
//! class is the majority community among its neighbors, so the label is
//! recoverable from relational structure alone.

use std::collections::{BTreeMap, HashSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::relgraph::{RelGraph, Triple};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub nodes: usize,
    pub types: usize,
    pub relations: usize,
    /// Expected number of edges per node.
    pub edge_density: f64,
    pub classes: usize,
    /// Fraction of type-0 nodes that receive a label.
    pub label_fraction: f64,
    /// Fraction of labelled nodes placed in the test set.
    pub test_fraction: f64,
    /// Type `t` is drawn with weight `1 / (t + 1)^type_skew`; 0 is uniform.
    pub type_skew: f64,
    /// Probability that an edge stays inside its source's community.
    pub homophily: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            nodes: 600,
            types: 4,
            relations: 4,
            edge_density: 3.0,
            classes: 4,
            label_fraction: 1.0,
            test_fraction: 0.3,
            type_skew: 0.0,
            homophily: 0.8,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), String> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.nodes < 2 {
            return Err("synthetic.nodes must be at least 2".into());
        }
        if self.types == 0 || self.relations == 0 || self.classes < 2 {
            return Err("synthetic.types and synthetic.relations must be positive, synthetic.classes at least 2".into());
        }
        if !(self.edge_density > 0.0 && self.edge_density.is_finite()) {
            return Err("synthetic.edge_density must be positive".into());
        }
        if !unit(self.label_fraction) || !unit(self.test_fraction) || !unit(self.homophily) {
            return Err("synthetic fractions must lie in [0, 1]".into());
        }
        if !(self.type_skew >= 0.0 && self.type_skew.is_finite()) {
            return Err("synthetic.type_skew must be non-negative".into());
        }
        Ok(())
    }
}

pub fn generate(spec: &SyntheticSpec, seed: u64) -> RelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.nodes;
    let weights: Vec<f64> = (0..spec.types).map(|t| 1.0 / ((t + 1) as f64).powf(spec.type_skew)).collect();
    let type_dist = WeightedIndex::new(&weights).expect("positive type weights");
    let node_type: Vec<usize> = (0..n).map(|_| type_dist.sample(&mut rng)).collect();
    let community: Vec<usize> = (0..n).map(|_| rng.gen_range(0..spec.classes)).collect();
    let mut members = vec![Vec::new(); spec.classes];
    for (i, &c) in community.iter().enumerate() {
        members[c].push(i);
    }
    let rel_by_class: Vec<Vec<usize>> = (0..spec.classes)
        .map(|c| (0..spec.relations).filter(|r| r % spec.classes == c).collect())
        .collect();

    let target = (spec.edge_density * n as f64).round() as usize;
    let mut seen = HashSet::with_capacity(target);
    let mut edges = Vec::with_capacity(target);
    let mut attempts = 0;
    while edges.len() < target && attempts < target * 4 {
        attempts += 1;
        let src = rng.gen_range(0..n);
        let dst = if rng.gen_bool(spec.homophily) {
            *members[community[src]].choose(&mut rng).expect("source is a member")
        } else {
            rng.gen_range(0..n)
        };
        if dst == src {
            continue;
        }
        let tied = &rel_by_class[community[dst]];
        let rel = if !tied.is_empty() && rng.gen_bool(spec.homophily) {
            *tied.choose(&mut rng).expect("non-empty")
        } else {
            rng.gen_range(0..spec.relations)
        };
        let t = Triple { src, rel, dst };
        if seen.insert(t) {
            edges.push(t);
        }
    }

    let mut votes = vec![vec![0usize; spec.classes]; n];
    for e in &edges {
        votes[e.src][community[e.dst]] += 1;
        votes[e.dst][community[e.src]] += 1;
    }
    let mut targets: Vec<usize> = (0..n).filter(|&i| node_type[i] == 0).collect();
    targets.shuffle(&mut rng);
    let n_labeled = (spec.label_fraction * targets.len() as f64).round() as usize;
    let n_test = (spec.test_fraction * n_labeled as f64).round() as usize;
    let mut labels = BTreeMap::new();
    let mut train_ids = Vec::new();
    let mut test_ids = Vec::new();
    for (k, &i) in targets[..n_labeled].iter().enumerate() {
        labels.insert(i, majority(&votes[i], community[i]));
        if k < n_test {
            test_ids.push(i);
        } else {
            train_ids.push(i);
        }
    }
    train_ids.sort_unstable();
    test_ids.sort_unstable();

    RelGraph {
        num_nodes: n,
        node_type,
        edges,
        num_relations: spec.relations,
        labels,
        num_classes: spec.classes,
        train_ids,
        test_ids,
        node_names: (0..n).map(|i| format!("n{i}")).collect(),
        relation_names: (0..spec.relations).map(|r| format!("r{r}")).collect(),
        type_names: (0..spec.types).map(|t| format!("t{t}")).collect(),
        class_names: (0..spec.classes).map(|c| format!("c{c}")).collect(),
    }
}

/// Most frequent neighbor community; the node's own community wins ties it
/// takes part in, otherwise the lowest id.
fn majority(votes: &[usize], own: usize) -> usize {
    let best = *votes.iter().max().unwrap_or(&0);
    if best == 0 || votes[own] == best {
        return own;
    }
    votes.iter().position(|&v| v == best).unwrap_or(own)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_graph_is_valid_and_deterministic() {
        let spec = SyntheticSpec::default();
        let a = generate(&spec, 3);
        let b = generate(&spec, 3);
        a.validate().unwrap();
        assert_eq!(a.edges, b.edges);
        assert_eq!(a.labels, b.labels);
        assert!(!a.train_ids.is_empty() && !a.test_ids.is_empty());
        let expect = (spec.edge_density * spec.nodes as f64) as usize;
        assert!(a.edges.len() > expect * 9 / 10);
    }

    #[test]
    fn labels_sit_on_type_zero() {
        let g = generate(&SyntheticSpec::default(), 1);
        assert!(g.labels.keys().all(|&i| g.node_type[i] == 0));
    }

    #[test]
    fn majority_ties() {
        assert_eq!(majority(&[2, 2, 0], 1), 1);
        assert_eq!(majority(&[2, 2, 0], 2), 0);
        assert_eq!(majority(&[0, 0, 0], 2), 2);
    }
}
