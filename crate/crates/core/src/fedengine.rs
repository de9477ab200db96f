//! Simulated federation: broadcast, local SGD, aggregation, evaluation.
//!
//! Only the basis tensors travel between clients and server (plus the
//! relation coefficients when `share_coeffs` is on). Every round is
//! bulk-synchronous: all clients update from the same broadcast state, in
//! parallel, and the server folds their deltas in client-id order, so the
//! result does not depend on scheduling.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::fedsplit::{ClientShard, FederatedDataset};
use crate::numkernel::{Tape, Tensor};
use crate::ot::{self, SinkhornConfig};
use crate::relgraph::NeighborIndex;
use crate::rgcn::{self, Architecture, BoundParams, GraphContext, LossTerms, RgcnError, RgcnParams};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid strategy configuration: {0}")]
    Config(String),
    #[error("client {client}: {source}")]
    Client {
        client: usize,
        #[source]
        source: RgcnError,
    },
    #[error("client {client} diverged in round {round}: {detail}")]
    Numeric { client: usize, round: usize, detail: String },
    #[error("no test nodes in any shard")]
    NoTestNodes,
    #[error("aggregation: {0}")]
    Aggregation(String),
}

pub type Result<T> = std::result::Result<T, EngineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StrategyKind {
    FedAvg,
    FedProx,
    FedAlign,
    /// Every client trains alone; bases are merged only for evaluation.
    Separate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// `Σ_k (n_k / n) Δ_k`
    SizeWeighted,
    /// `(1/K) Σ_k Δ_k / n_k`
    InverseSize,
}

impl Aggregation {
    pub fn name(self) -> &'static str {
        match self {
            Self::SizeWeighted => "size_weighted",
            Self::InverseSize => "inverse_size",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "size_weighted" => Some(Self::SizeWeighted),
            "inverse_size" => Some(Self::InverseSize),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Adds the embedding-gradient penalty (the `-L` variants).
    pub lipschitz: bool,
    pub mu: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub e_local: usize,
    pub e_global: usize,
    pub aggregation: Aggregation,
    pub share_coeffs: bool,
    pub sinkhorn: SinkhornConfig,
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind, lipschitz: bool) -> Self {
        Self {
            kind,
            lipschitz,
            mu: if kind == StrategyKind::FedAvg || kind == StrategyKind::Separate { 0.0 } else { 10.0 },
            lambda: 10.0,
            learning_rate: 0.1,
            e_local: 5,
            e_global: 20,
            aggregation: Aggregation::SizeWeighted,
            share_coeffs: false,
            sinkhorn: SinkhornConfig::default(),
        }
    }

    /// Display name, e.g. `FedAlign-L`.
    pub fn name(&self) -> String {
        let base = match self.kind {
            StrategyKind::FedAvg => "FedAVG",
            StrategyKind::FedProx => "FedProx",
            StrategyKind::FedAlign => "FedAlign",
            StrategyKind::Separate => "SP",
        };
        if self.lipschitz {
            format!("{base}-L")
        } else {
            base.to_string()
        }
    }

    /// Inverse of [`name`](Self::name) (case-insensitive).
    pub fn parse_name(s: &str) -> Option<(StrategyKind, bool)> {
        let lower = s.trim().to_ascii_lowercase();
        let (base, l) = match lower.strip_suffix("-l") {
            Some(b) => (b, true),
            None => (lower.as_str(), false),
        };
        let kind = match base {
            "fedavg" => StrategyKind::FedAvg,
            "fedprox" => StrategyKind::FedProx,
            "fedalign" => StrategyKind::FedAlign,
            "sp" => StrategyKind::Separate,
            _ => return None,
        };
        Some((kind, l))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EngineError::Config(m.to_string()));
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return bad("mu must be a non-negative number");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be a non-negative number");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be a non-negative number");
        }
        if self.e_local == 0 || self.e_global == 0 {
            return bad("e_local and e_global must be positive");
        }
        if matches!(self.kind, StrategyKind::FedAvg | StrategyKind::Separate) && self.mu != 0.0 {
            return bad("FedAVG and SP take no mu");
        }
        if !(self.sinkhorn.lambda > 0.0 && self.sinkhorn.lambda.is_finite()) {
            return bad("sinkhorn_lambda must be positive");
        }
        Ok(())
    }

    /// Terms switched on for this strategy. Zero weights switch a term off
    /// entirely, so the degenerate settings coincide with FedAVG exactly.
    fn terms<'a>(&self, global: &'a [Tensor], peers: &'a [Vec<Tensor>], n_clients: usize) -> LossTerms<'a> {
        LossTerms {
            prox: (self.kind == StrategyKind::FedProx && self.mu > 0.0).then_some((self.mu, global)),
            align: (self.kind == StrategyKind::FedAlign && self.mu > 0.0 && !peers.is_empty())
                .then_some((self.mu, n_clients, peers)),
            penalty: (self.lipschitz && self.lambda > 0.0).then_some(self.lambda),
            sinkhorn: self.sinkhorn,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub params: RgcnParams,
    pub shard: ClientShard,
    pub ctx: GraphContext,
    /// Basis snapshots of every other client from the previous round.
    pub peer_bases: Vec<Vec<Tensor>>,
}

impl ClientState {
    pub fn new(id: usize, shard: ClientShard, inverse_relations: bool, arch: &Architecture, rng: &mut ChaCha8Rng) -> Self {
        let idx = NeighborIndex::build(&shard.graph, inverse_relations);
        let ctx = GraphContext::new(&shard, &idx);
        let params = RgcnParams::init(shard.num_nodes(), arch, rng);
        Self {
            id,
            params,
            shard,
            ctx,
            peer_bases: Vec::new(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.shard.num_nodes()
    }

    /// The exchanged tensors: bases, then coefficients when shared.
    pub fn shared(&self, share_coeffs: bool) -> Vec<Tensor> {
        let mut out = self.params.bases();
        if share_coeffs {
            out.extend(self.params.coeffs());
        }
        out
    }

    fn set_shared(&mut self, shared: &[Tensor]) -> std::result::Result<(), RgcnError> {
        let l = self.params.layers.len();
        self.params.set_bases(&shared[..l])?;
        for (layer, c) in self.params.layers.iter_mut().zip(&shared[l..]) {
            layer.coeff = c.clone();
        }
        Ok(())
    }

    fn with_shared(&self, shared: &[Tensor]) -> std::result::Result<RgcnParams, RgcnError> {
        let mut c = self.clone();
        c.set_shared(shared)?;
        Ok(c.params)
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub round: usize,
    pub global: Vec<Tensor>,
    /// Each client's bases as of the end of the previous round.
    pub snapshots: Vec<Vec<Tensor>>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub client_losses: Vec<f64>,
    pub test_acc: f64,
    pub ot_mean: f64,
    /// `None` when the mean gradient vanishes.
    pub b_hat: Option<f64>,
    pub wall_ms: f64,
}

pub const ROUND_CSV_HEADER: &str = "round,strategy,seed,client_id,train_loss,ot_mean,b_hat,test_acc,ms";

impl RoundRecord {
    /// One line per client plus a `client_id = -1` line with global metrics.
    /// `ms` is left empty unless `wall_time` is set, keeping the file a pure
    /// function of the inputs.
    pub fn csv_rows(&self, strategy: &str, seed: u64, wall_time: bool) -> String {
        let mut s = String::new();
        for (k, loss) in self.client_losses.iter().enumerate() {
            s.push_str(&format!("{},{strategy},{seed},{k},{loss:.10},,,,\n", self.round));
        }
        let mean = self.client_losses.iter().sum::<f64>() / self.client_losses.len().max(1) as f64;
        let b = self.b_hat.map(|b| format!("{b:.10}")).unwrap_or_default();
        let ms = if wall_time { format!("{:.1}", self.wall_ms) } else { String::new() };
        s.push_str(&format!(
            "{},{strategy},{seed},-1,{mean:.10},{:.10},{b},{:.10},{ms}\n",
            self.round, self.ot_mean, self.test_acc
        ));
        s
    }
}

/// Result of one client's local training.
#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub delta: Vec<Tensor>,
    /// Local objective before each SGD step.
    pub objectives: Vec<f64>,
    /// Classification loss before the last step.
    pub train_loss: f64,
}

/// Run `E_local` full-graph SGD steps starting from `start` (ignored for
/// separate training) and return the change in the shared tensors.
pub fn client_local_update(
    client: &mut ClientState,
    cfg: &StrategyConfig,
    start: &[Tensor],
    n_clients: usize,
    round: usize,
) -> Result<LocalUpdate> {
    let id = client.id;
    let wrap = |source| EngineError::Client { client: id, source };
    if cfg.kind != StrategyKind::Separate {
        client.set_shared(start).map_err(wrap)?;
    }
    let before = client.shared(cfg.share_coeffs);
    let global_bases = &before[..client.params.layers.len()];
    let peers = std::mem::take(&mut client.peer_bases);
    let terms = cfg.terms(global_bases, &peers, n_clients);
    let mut objectives = Vec::with_capacity(cfg.e_local);
    let mut train_loss = f64::NAN;
    for _ in 0..cfg.e_local {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &client.params);
        let loss = rgcn::local_loss(&mut tape, &bound, &client.ctx, &terms).map_err(wrap)?;
        let grads = tape
            .backward(loss.total, &bound.vars())
            .map_err(|e| wrap(RgcnError::Num(e)))?;
        let value = tape.value(loss.total).item();
        if !value.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(EngineError::Numeric {
                client: id,
                round,
                detail: format!("local objective {value}"),
            });
        }
        objectives.push(value);
        train_loss = loss.classification;
        for (p, g) in client.params.tensors_mut().into_iter().zip(&grads) {
            p.axpy(-cfg.learning_rate, g);
        }
    }
    client.peer_bases = peers;
    let after = client.shared(cfg.share_coeffs);
    let delta = after.iter().zip(&before).map(|(a, b)| a.sub(b)).collect();
    Ok(LocalUpdate {
        delta,
        objectives,
        train_loss,
    })
}

/// Combine client deltas. Clients are folded in the given order.
pub fn aggregate(deltas: &[Vec<Tensor>], node_counts: &[usize], mode: Aggregation) -> Result<Vec<Tensor>> {
    let first = deltas.first().ok_or_else(|| EngineError::Aggregation("no deltas".into()))?;
    if deltas.len() != node_counts.len() {
        return Err(EngineError::Aggregation("one node count per delta required".into()));
    }
    for d in deltas {
        if d.len() != first.len() || d.iter().zip(first).any(|(a, b)| a.shape() != b.shape()) {
            return Err(EngineError::Aggregation("delta shapes differ".into()));
        }
    }
    let total: usize = node_counts.iter().sum();
    let weights: Vec<f64> = match mode {
        Aggregation::SizeWeighted => {
            if total == 0 {
                return Err(EngineError::Aggregation("total node count is zero".into()));
            }
            node_counts.iter().map(|&n| n as f64 / total as f64).collect()
        }
        Aggregation::InverseSize => {
            if node_counts.contains(&0) {
                return Err(EngineError::Aggregation("a client has zero nodes".into()));
            }
            let k = deltas.len() as f64;
            node_counts.iter().map(|&n| 1.0 / (k * n as f64)).collect()
        }
    };
    let mut out: Vec<Tensor> = first.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for (d, w) in deltas.iter().zip(weights) {
        for (acc, t) in out.iter_mut().zip(d) {
            acc.axpy(w, t);
        }
    }
    Ok(out)
}

/// `sqrt(mean_k ‖g_k‖² / ‖ḡ‖²)`, computed as `sqrt(1 + mean_k ‖g_k − ḡ‖² / ‖ḡ‖²)`
/// so that identical gradients give exactly 1. `None` when `ḡ = 0`.
pub fn b_dissimilarity(grads: &[Vec<f64>]) -> Option<f64> {
    let k = grads.len();
    let dim = grads.first()?.len();
    let mut mean = vec![0.0; dim];
    for g in grads {
        for (m, v) in mean.iter_mut().zip(g) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= k as f64;
    }
    let denom: f64 = mean.iter().map(|m| m * m).sum();
    if denom == 0.0 || !denom.is_finite() {
        return None;
    }
    let spread: f64 = grads
        .iter()
        .map(|g| g.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum::<f64>()
        / k as f64;
    Some((1.0 + spread / denom).sqrt())
}

/// Basis gradient of a client's classification loss at the given shared point.
pub fn basis_gradient(client: &ClientState, shared: &[Tensor]) -> std::result::Result<Vec<f64>, RgcnError> {
    let params = client.with_shared(shared)?;
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &params);
    let f = rgcn::classification_loss(&mut tape, &bound, &client.ctx)?;
    let g = tape.backward(f, &bound.bases())?;
    Ok(g.into_iter().flat_map(Tensor::into_data).collect())
}

/// Mean over client pairs of the summed per-layer Sinkhorn distance.
pub fn mean_pairwise_ot(snapshots: &[Vec<Tensor>], cfg: &SinkhornConfig) -> f64 {
    let mut pairs = Vec::new();
    for a in 0..snapshots.len() {
        for b in a + 1..snapshots.len() {
            pairs.push((a, b));
        }
    }
    if pairs.is_empty() {
        return 0.0;
    }
    let dists: Vec<f64> = pairs
        .par_iter()
        .map(|&(a, b)| {
            snapshots[a]
                .iter()
                .zip(&snapshots[b])
                .map(|(x, y)| {
                    let rows = x.shape()[0];
                    ot::basis_distance(x.data(), y.data(), x.len() / rows, cfg).map(|r| r.cost).unwrap_or(f64::NAN)
                })
                .sum::<f64>()
        })
        .collect();
    dists.iter().sum::<f64>() / pairs.len() as f64
}

/// A server plus its clients, ready to run rounds.
#[derive(Debug, Clone)]
pub struct Federation {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub cfg: StrategyConfig,
}

impl Federation {
    /// Client `k` initializes from stream `k + 1` of the master seed; the
    /// global bases come from stream 0.
    pub fn new(
        data: &FederatedDataset,
        arch: &Architecture,
        cfg: StrategyConfig,
        seed: u64,
        inverse_relations: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let clients = data
            .shards
            .iter()
            .enumerate()
            .map(|(k, shard)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k as u64 + 1);
                ClientState::new(k, shard.clone(), inverse_relations, arch, &mut rng)
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let global = rgcn::init_bases(arch, &mut rng);
        Self::from_clients(clients, global, cfg, seed)
    }

    /// Assemble from prepared clients. `global` holds the bases; coefficients
    /// are appended from client 0 when they are shared.
    pub fn from_clients(mut clients: Vec<ClientState>, mut global: Vec<Tensor>, cfg: StrategyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if clients.is_empty() {
            return Err(EngineError::Config("no clients".into()));
        }
        if cfg.share_coeffs {
            global.extend(clients[0].params.coeffs());
        }
        for c in &mut clients {
            if cfg.kind != StrategyKind::Separate {
                c.set_shared(&global).map_err(|source| EngineError::Client { client: c.id, source })?;
            }
        }
        let snapshots = clients.iter().map(|c| c.params.bases()).collect();
        Ok(Self {
            server: ServerState {
                round: 0,
                global,
                snapshots,
                seed,
            },
            clients,
            cfg,
        })
    }

    fn node_counts(&self) -> Vec<usize> {
        self.clients.iter().map(ClientState::num_nodes).collect()
    }

    /// The shared tensors used for evaluation: the global state, or for
    /// separate training the size-weighted merge of the clients' own.
    pub fn evaluation_point(&self) -> Vec<Tensor> {
        if self.cfg.kind != StrategyKind::Separate {
            return self.server.global.clone();
        }
        let counts = self.node_counts();
        let total: usize = counts.iter().sum();
        let mut out: Vec<Tensor> = self.server.global.iter().map(|t| Tensor::zeros(t.shape())).collect();
        for (c, &n) in self.clients.iter().zip(&counts) {
            for (acc, t) in out.iter_mut().zip(c.shared(self.cfg.share_coeffs)) {
                acc.axpy(n as f64 / total as f64, &t);
            }
        }
        out
    }

    /// One bulk-synchronous round.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let started = Instant::now();
        let round = self.server.round + 1;
        let n = self.clients.len();
        let point = self.evaluation_point();
        for (k, c) in self.clients.iter_mut().enumerate() {
            c.peer_bases = (0..n).filter(|&j| j != k).map(|j| self.server.snapshots[j].clone()).collect();
        }
        let cfg = self.cfg.clone();
        let results: Vec<Result<(LocalUpdate, Vec<f64>)>> = self
            .clients
            .par_iter_mut()
            .map(|c| {
                let g = basis_gradient(c, &point).map_err(|source| EngineError::Client { client: c.id, source })?;
                let start = point.clone();
                let u = client_local_update(c, &cfg, &start, n, round)?;
                Ok((u, g))
            })
            .collect();
        let mut updates = Vec::with_capacity(n);
        let mut grads = Vec::with_capacity(n);
        for r in results {
            let (u, g) = r?;
            updates.push(u);
            grads.push(g);
        }
        if cfg.kind != StrategyKind::Separate {
            let deltas: Vec<Vec<Tensor>> = updates.iter().map(|u| u.delta.clone()).collect();
            let agg = aggregate(&deltas, &self.node_counts(), cfg.aggregation)?;
            for (g, d) in self.server.global.iter_mut().zip(&agg) {
                g.axpy(1.0, d);
            }
        }
        self.server.snapshots = self.clients.iter().map(|c| c.params.bases()).collect();
        self.server.round = round;
        let test_acc = self.evaluate()?;
        let ot_mean = mean_pairwise_ot(&self.server.snapshots, &cfg.sinkhorn);
        Ok(RoundRecord {
            round,
            client_losses: updates.iter().map(|u| u.train_loss).collect(),
            test_acc,
            ot_mean,
            b_hat: b_dissimilarity(&grads),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Accuracy over the union of the clients' test nodes, voting across
    /// the shards that hold each node. Client parameters are not modified.
    pub fn evaluate(&self) -> Result<f64> {
        let point = self.evaluation_point();
        let preds: Vec<Vec<usize>> = self
            .clients
            .par_iter()
            .map(|c| {
                let params = c.with_shared(&point)?;
                rgcn::predict(&params, &c.ctx)
            })
            .collect::<std::result::Result<_, _>>()
            .map_err(|source| EngineError::Client { client: 0, source })?;
        let inputs: Vec<(&ClientShard, Vec<usize>)> = self.clients.iter().map(|c| &c.shard).zip(preds).collect();
        majority_vote_accuracy(&inputs)
    }
}

/// Per global test node: majority over the shards' predictions (ties →
/// lowest class), compared with the true label.
pub fn majority_vote_accuracy(inputs: &[(&ClientShard, Vec<usize>)]) -> Result<f64> {
    let mut votes: BTreeMap<usize, (usize, BTreeMap<usize, usize>)> = BTreeMap::new();
    for (shard, pred) in inputs {
        for &local in &shard.test_ids {
            let gid = shard.to_global[local];
            let label = shard.graph.labels[&local];
            let entry = votes.entry(gid).or_insert_with(|| (label, BTreeMap::new()));
            *entry.1.entry(pred[local]).or_default() += 1;
        }
    }
    if votes.is_empty() {
        return Err(EngineError::NoTestNodes);
    }
    let correct = votes
        .values()
        .filter(|(label, tally)| {
            let mut best = (0, usize::MAX);
            for (&class, &count) in tally.iter() {
                if count > best.0 {
                    best = (count, class);
                }
            }
            best.1 == *label
        })
        .count();
    Ok(correct as f64 / votes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Vec<Tensor> {
        vec![Tensor::scalar(v)]
    }

    #[test]
    fn size_weighted_example() {
        let out = aggregate(&[scalar(0.0), scalar(4.0)], &[3, 1], Aggregation::SizeWeighted).unwrap();
        assert_eq!(out[0].item(), 1.0);
    }

    #[test]
    fn inverse_size_example() {
        let out = aggregate(&[scalar(2.0), scalar(4.0)], &[2, 2], Aggregation::InverseSize).unwrap();
        assert_eq!(out[0].item(), 1.5);
        assert!(aggregate(&[scalar(2.0)], &[0], Aggregation::InverseSize).is_err());
    }

    #[test]
    fn identical_deltas_are_reproduced() {
        let d = vec![Tensor::new(vec![2], vec![0.3, -1.7]).unwrap()];
        let out = aggregate(&[d.clone(), d.clone(), d.clone()], &[5, 1, 9], Aggregation::SizeWeighted).unwrap();
        for (a, b) in out[0].data().iter().zip(d[0].data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn b_hat_cases() {
        let g = vec![1.0, -2.0, 0.5];
        assert_eq!(b_dissimilarity(&[g.clone(), g.clone(), g.clone()]), Some(1.0));
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        assert_eq!(b_dissimilarity(&[g.clone(), neg]), None);
    }

    #[test]
    fn strategy_names_round_trip() {
        for kind in [StrategyKind::FedAvg, StrategyKind::FedProx, StrategyKind::FedAlign, StrategyKind::Separate] {
            for l in [false, true] {
                let name = StrategyConfig::new(kind, l).name();
                assert_eq!(StrategyConfig::parse_name(&name), Some((kind, l)));
            }
        }
        assert_eq!(StrategyConfig::parse_name("FedNope"), None);
    }

    #[test]
    fn fedavg_rejects_mu() {
        let mut c = StrategyConfig::new(StrategyKind::FedAvg, false);
        c.mu = 1.0;
        assert!(c.validate().is_err());
    }
}
