//! Relational graph convolution with basis-decomposed relation weights.
//!
//! Layer `l` holds `B` basis matrices `V_b` of shape `(d_out, d_in)`, a
//! coefficient matrix `a` of shape `(R, B)` and a self-connection `W_0`.
//! Relation weights are `W_r = Σ_b a_rb V_b` and a node update is
//!
//! ```text
//! h_i' = σ( Σ_r Σ_{j ∈ N_i^r} W_r h_j / c_{i,r} + W_0 h_i )
//! ```
//!
//! with σ = ReLU on hidden layers and the identity on the output layer.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::fedsplit::ClientShard;
use crate::numkernel::{BlockSparse, CeTarget, NumError, Tape, Tensor, Var};
use crate::ot::{self, OtError, SinkhornConfig};
use crate::relgraph::NeighborIndex;

#[derive(Debug, Error)]
pub enum RgcnError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Ot(#[from] OtError),
    #[error("shard has no training nodes")]
    EmptyTrainingSet,
    #[error("parameter shape mismatch in {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, RgcnError>;

/// Layer widths and basis count shared by every client.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Architecture {
    /// Embedding width, also used for every hidden layer.
    pub d0: usize,
    pub layers: usize,
    pub num_bases: usize,
    pub num_relations: usize,
    pub num_classes: usize,
}

impl Architecture {
    /// `(d_in, d_out)` per layer.
    pub fn dims(&self) -> Vec<(usize, usize)> {
        (0..self.layers)
            .map(|l| (self.d0, if l + 1 == self.layers { self.num_classes } else { self.d0 }))
            .collect()
    }

    pub fn basis_shapes(&self) -> Vec<[usize; 3]> {
        self.dims().into_iter().map(|(i, o)| [self.num_bases, o, i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `(B, d_out, d_in)`
    pub basis: Tensor,
    /// `(R, B)`
    pub coeff: Tensor,
    /// `(d_out, d_in)`
    pub self_weight: Tensor,
}

impl LayerParams {
    pub fn num_bases(&self) -> usize {
        self.basis.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.basis.shape()[1]
    }

    pub fn d_in(&self) -> usize {
        self.basis.shape()[2]
    }

    pub fn num_relations(&self) -> usize {
        self.coeff.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.basis.shape();
        if s.len() != 3
            || self.coeff.shape() != [self.coeff.rows(), s[0]]
            || self.self_weight.shape() != [s[1], s[2]]
        {
            return Err(RgcnError::Shape(format!(
                "layer: basis {:?}, coeff {:?}, w0 {:?}",
                s,
                self.coeff.shape(),
                self.self_weight.shape()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgcnParams {
    /// `(num_nodes, d0)`
    pub embeddings: Tensor,
    pub layers: Vec<LayerParams>,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()).expect("sized")
}

/// Basis tensors drawn with fan-in scaling, one per layer.
pub fn init_bases(arch: &Architecture, rng: &mut impl Rng) -> Vec<Tensor> {
    arch.basis_shapes()
        .into_iter()
        .map(|s| uniform(&s, 1.0 / (s[2] as f64).sqrt(), rng))
        .collect()
}

impl RgcnParams {
    /// Embeddings `U(±1/√d0)`; per layer: bases and `W_0` `U(±1/√d_in)`,
    /// coefficients `U(±1/√B)`.
    pub fn init(num_nodes: usize, arch: &Architecture, rng: &mut impl Rng) -> Self {
        let embeddings = uniform(&[num_nodes, arch.d0], 1.0 / (arch.d0 as f64).sqrt(), rng);
        let layers = arch
            .dims()
            .into_iter()
            .map(|(din, dout)| {
                let fan = 1.0 / (din as f64).sqrt();
                let basis = uniform(&[arch.num_bases, dout, din], fan, rng);
                let coeff = uniform(&[arch.num_relations, arch.num_bases], 1.0 / (arch.num_bases as f64).sqrt(), rng);
                let self_weight = uniform(&[dout, din], fan, rng);
                LayerParams {
                    basis,
                    coeff,
                    self_weight,
                }
            })
            .collect();
        Self { embeddings, layers }
    }

    pub fn validate(&self) -> Result<()> {
        let mut width = self.embeddings.cols();
        for (l, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            if layer.d_in() != width {
                return Err(RgcnError::Shape(format!("layer {l} expects width {} but receives {width}", layer.d_in())));
            }
            width = layer.d_out();
        }
        Ok(())
    }

    pub fn bases(&self) -> Vec<Tensor> {
        self.layers.iter().map(|l| l.basis.clone()).collect()
    }

    pub fn set_bases(&mut self, bases: &[Tensor]) -> Result<()> {
        if bases.len() != self.layers.len() {
            return Err(RgcnError::Shape(format!("{} basis tensors for {} layers", bases.len(), self.layers.len())));
        }
        for (layer, b) in self.layers.iter_mut().zip(bases) {
            if layer.basis.shape() != b.shape() {
                return Err(RgcnError::Shape(format!("basis {:?} vs {:?}", layer.basis.shape(), b.shape())));
            }
            layer.basis = b.clone();
        }
        Ok(())
    }

    pub fn coeffs(&self) -> Vec<Tensor> {
        self.layers.iter().map(|l| l.coeff.clone()).collect()
    }

    /// All tensors in a fixed order: embeddings, then per layer basis,
    /// coefficients, self-weight.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embeddings];
        for l in &self.layers {
            out.extend([&l.basis, &l.coeff, &l.self_weight]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embeddings];
        for l in &mut self.layers {
            out.extend([&mut l.basis, &mut l.coeff, &mut l.self_weight]);
        }
        out
    }

    /// Key → tensor map; each basis matrix is stored separately as
    /// `layer{l}.basis{b}`.
    pub fn to_checkpoint(&self) -> BTreeMap<String, Tensor> {
        let mut map = BTreeMap::new();
        map.insert("embeddings".to_string(), self.embeddings.clone());
        for (l, layer) in self.layers.iter().enumerate() {
            let (dout, din) = (layer.d_out(), layer.d_in());
            for b in 0..layer.num_bases() {
                let data = layer.basis.data()[b * dout * din..(b + 1) * dout * din].to_vec();
                map.insert(format!("layer{l}.basis{b}"), Tensor::new(vec![dout, din], data).expect("sized"));
            }
            map.insert(format!("layer{l}.coeff"), layer.coeff.clone());
            map.insert(format!("layer{l}.w0"), layer.self_weight.clone());
        }
        map
    }

    pub fn from_checkpoint(map: &BTreeMap<String, Tensor>) -> Result<Self> {
        let get = |k: &str| map.get(k).cloned().ok_or_else(|| RgcnError::Checkpoint(format!("missing key {k}")));
        let embeddings = get("embeddings")?;
        let mut layers = Vec::new();
        for l in 0.. {
            let Ok(coeff) = get(&format!("layer{l}.coeff")) else { break };
            let self_weight = get(&format!("layer{l}.w0"))?;
            let mut data = Vec::new();
            let mut nb = 0;
            while let Some(t) = map.get(&format!("layer{l}.basis{nb}")) {
                if t.shape() != self_weight.shape() {
                    return Err(RgcnError::Checkpoint(format!("layer{l}.basis{nb} has shape {:?}", t.shape())));
                }
                data.extend_from_slice(t.data());
                nb += 1;
            }
            let basis = Tensor::new(vec![nb, self_weight.rows(), self_weight.cols()], data)
                .map_err(|e| RgcnError::Checkpoint(e.to_string()))?;
            layers.push(LayerParams {
                basis,
                coeff,
                self_weight,
            });
        }
        let params = Self { embeddings, layers };
        params.validate()?;
        Ok(params)
    }

    /// Binary checkpoint: per entry a little-endian `u32` key length, the
    /// UTF-8 key, `u32` rank, `u64` dims, then `f64` values.
    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for (k, t) in self.to_checkpoint() {
            buf.extend((k.len() as u32).to_le_bytes());
            buf.extend(k.as_bytes());
            buf.extend((t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend(v.to_le_bytes());
            }
        }
        let io = |source| RgcnError::Io {
            path: path.display().to_string(),
            source,
        };
        std::fs::File::create(path).and_then(|mut f| f.write_all(&buf)).map_err(io)
    }

    pub fn read_checkpoint(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|source| RgcnError::Io {
                path: path.display().to_string(),
                source,
            })?;
        let mut pos = 0;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = buf.get(pos..pos + n).ok_or_else(|| RgcnError::Checkpoint("truncated".into()))?;
            pos += n;
            Ok(s)
        };
        let mut map = BTreeMap::new();
        while let Ok(len) = take(4) {
            let len = u32::from_le_bytes(len.try_into().unwrap()) as usize;
            let key = String::from_utf8(take(len)?.to_vec()).map_err(|e| RgcnError::Checkpoint(e.to_string()))?;
            let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
            }
            let t = Tensor::new(shape, data).map_err(|e| RgcnError::Checkpoint(e.to_string()))?;
            map.insert(key, t);
        }
        Self::from_checkpoint(&map)
    }
}

/// `W_r = Σ_b a_rb V_b` for every relation.
pub fn compose_relation_weights(layer: &LayerParams) -> Vec<Tensor> {
    let (b, dout, din) = (layer.num_bases(), layer.d_out(), layer.d_in());
    let flat = layer.basis.clone().reshaped(&[b, dout * din]).expect("sized");
    let all = layer.coeff.matmul(&flat);
    (0..layer.num_relations())
        .map(|r| Tensor::new(vec![dout, din], all.row(r).to_vec()).expect("sized"))
        .collect()
}

/// Per-shard constants: the message-passing operator and training targets.
#[derive(Debug, Clone)]
pub struct GraphContext {
    pub num_nodes: usize,
    pub num_relations: usize,
    pub messages: Arc<BlockSparse>,
    pub train: Arc<CeTarget>,
    pub test_ids: Vec<usize>,
}

impl GraphContext {
    pub fn new(shard: &ClientShard, idx: &NeighborIndex) -> Self {
        let g = &shard.graph;
        let n = idx.num_nodes();
        let labels = shard
            .train_ids
            .iter()
            .map(|i| *g.labels.get(i).expect("training nodes carry labels"))
            .collect();
        Self {
            num_nodes: n,
            num_relations: idx.num_relations(),
            messages: Arc::new(BlockSparse::new(n, n, idx.num_relations(), idx.message_entries())),
            train: Arc::new(CeTarget {
                rows: shard.train_ids.clone(),
                labels,
            }),
            test_ids: shard.test_ids.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub basis: Var,
    pub coeff: Var,
    pub self_weight: Var,
}

/// Parameters placed on a tape as leaves.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub embeddings: Var,
    pub layers: Vec<BoundLayer>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &RgcnParams) -> Self {
        let embeddings = tape.leaf(params.embeddings.clone());
        let layers = params
            .layers
            .iter()
            .map(|l| BoundLayer {
                basis: tape.leaf(l.basis.clone()),
                coeff: tape.leaf(l.coeff.clone()),
                self_weight: tape.leaf(l.self_weight.clone()),
            })
            .collect();
        Self { embeddings, layers }
    }

    /// Same order as [`RgcnParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.embeddings];
        for l in &self.layers {
            out.extend([l.basis, l.coeff, l.self_weight]);
        }
        out
    }

    pub fn bases(&self) -> Vec<Var> {
        self.layers.iter().map(|l| l.basis).collect()
    }
}

/// One relational convolution. Messages are formed by transforming every
/// node under all relations at once, `Z = H [W_1; …; W_R]ᵀ`, then gathering
/// the normalized in-neighbor blocks.
pub fn layer_forward(tape: &mut Tape, layer: &BoundLayer, messages: &Arc<BlockSparse>, h: Var, activate: bool) -> Result<Var> {
    let s = tape.shape(layer.basis).to_vec();
    if s.len() != 3 || tape.shape(h).len() != 2 || tape.shape(h)[1] != s[2] {
        return Err(RgcnError::Shape(format!("layer basis {:?} applied to input {:?}", s, tape.shape(h))));
    }
    let (b, dout, din) = (s[0], s[1], s[2]);
    let r = tape.shape(layer.coeff)[0];
    if r != messages.blocks() {
        return Err(RgcnError::Shape(format!("{r} relation coefficients for {} relations", messages.blocks())));
    }
    let flat = tape.reshape(layer.basis, &[b, dout * din])?;
    let all = tape.matmul(layer.coeff, flat)?;
    let stacked = tape.reshape(all, &[r * dout, din])?;
    let st = tape.transpose(stacked)?;
    let z = tape.matmul(h, st)?;
    let msg = tape.gather(z, messages.clone())?;
    let w0t = tape.transpose(layer.self_weight)?;
    let own = tape.matmul(h, w0t)?;
    let out = tape.add(msg, own)?;
    Ok(if activate { tape.relu(out)? } else { out })
}

/// Logits for every local node.
pub fn forward(tape: &mut Tape, params: &BoundParams, ctx: &GraphContext) -> Result<Var> {
    let mut h = params.embeddings;
    let last = params.layers.len().saturating_sub(1);
    for (l, layer) in params.layers.iter().enumerate() {
        h = layer_forward(tape, layer, &ctx.messages, h, l != last)?;
    }
    Ok(h)
}

/// Mean softmax cross-entropy over the training nodes.
pub fn classification_loss(tape: &mut Tape, params: &BoundParams, ctx: &GraphContext) -> Result<Var> {
    if ctx.train.rows.is_empty() {
        return Err(RgcnError::EmptyTrainingSet);
    }
    let logits = forward(tape, params, ctx)?;
    Ok(tape.softmax_cross_entropy(logits, ctx.train.clone())?)
}

/// `λ (‖∇_{H0} F‖₂ − 1)²`, differentiable with respect to the weights.
pub fn grad_penalty(tape: &mut Tape, params: &BoundParams, f: Var, lambda: f64) -> Result<Var> {
    let g = tape.grad(f, &[params.embeddings])?[0];
    let n = tape.l2_norm(g)?;
    let one = tape.leaf(Tensor::scalar(1.0));
    let d = tape.sub(n, one)?;
    let sq = tape.square(d)?;
    Ok(tape.scale(sq, lambda)?)
}

/// `(μ/N) Σ_j Σ_l OT(V^(l), V_j^(l))` and its gradient with respect to the
/// own basis of each layer. Peers are constants.
///
/// OT is the entropy-regularized Sinkhorn objective, for which the
/// plan-fixed gradient is exact; the plain transport cost is what
/// [`crate::fedengine::mean_pairwise_ot`] reports.
pub fn alignment_term(
    own: &[Tensor],
    peers: &[Vec<Tensor>],
    mu: f64,
    n_clients: usize,
    sinkhorn: &SinkhornConfig,
) -> Result<(f64, Vec<Tensor>)> {
    let scale = mu / n_clients.max(1) as f64;
    let mut total = 0.0;
    let mut grads: Vec<Tensor> = own.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for peer in peers {
        if peer.len() != own.len() {
            return Err(RgcnError::Shape(format!("peer has {} layers, expected {}", peer.len(), own.len())));
        }
        for (l, (a, b)) in own.iter().zip(peer).enumerate() {
            if a.shape() != b.shape() {
                return Err(OtError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()).into());
            }
            let rows = a.shape()[0];
            let d = ot::basis_distance(a.data(), b.data(), a.len() / rows, sinkhorn)?;
            total += d.objective;
            for (acc, v) in grads[l].data_mut().iter_mut().zip(d.grad) {
                *acc += v;
            }
        }
    }
    Ok((scale * total, grads.into_iter().map(|g| g.scale(scale)).collect()))
}

/// Optional terms added to the classification loss.
#[derive(Debug, Clone, Default)]
pub struct LossTerms<'a> {
    /// `(μ, w_t)`: proximal pull toward the broadcast bases.
    pub prox: Option<(f64, &'a [Tensor])>,
    /// `(μ, N, peer bases)`.
    pub align: Option<(f64, usize, &'a [Vec<Tensor>])>,
    /// Gradient-penalty weight.
    pub penalty: Option<f64>,
    pub sinkhorn: SinkhornConfig,
}

#[derive(Debug, Clone, Copy)]
pub struct LocalLoss {
    pub total: Var,
    pub classification: f64,
    pub prox: f64,
    pub align: f64,
    pub penalty: f64,
}

/// Classification loss plus whichever terms are switched on.
pub fn local_loss(tape: &mut Tape, params: &BoundParams, ctx: &GraphContext, terms: &LossTerms) -> Result<LocalLoss> {
    let f = classification_loss(tape, params, ctx)?;
    let mut out = LocalLoss {
        total: f,
        classification: tape.value(f).item(),
        prox: 0.0,
        align: 0.0,
        penalty: 0.0,
    };
    if let Some((mu, global)) = terms.prox {
        if global.len() != params.layers.len() {
            return Err(RgcnError::Shape("proximal reference has the wrong layer count".into()));
        }
        for (l, g) in params.layers.iter().zip(global) {
            let c = tape.leaf(g.clone());
            let d = tape.sub(l.basis, c)?;
            let sq = tape.square(d)?;
            let s = tape.sum(sq)?;
            let term = tape.scale(s, mu / 2.0)?;
            out.prox += tape.value(term).item();
            out.total = tape.add(out.total, term)?;
        }
    }
    if let Some((mu, n, peers)) = terms.align {
        let own: Vec<Tensor> = params.layers.iter().map(|l| tape.value(l.basis).clone()).collect();
        let (value, grads) = alignment_term(&own, peers, mu, n, &terms.sinkhorn)?;
        out.align = value;
        // the whole value rides on the first layer's node; the others carry 0
        for (l, (layer, g)) in params.layers.iter().zip(grads).enumerate() {
            let v = if l == 0 { value } else { 0.0 };
            let term = tape.frozen(layer.basis, v, g)?;
            out.total = tape.add(out.total, term)?;
        }
    }
    if let Some(lambda) = terms.penalty {
        let p = grad_penalty(tape, params, f, lambda)?;
        out.penalty = tape.value(p).item();
        out.total = tape.add(out.total, p)?;
    }
    Ok(out)
}

/// Predicted class per node (ties → lowest class id).
pub fn predict(params: &RgcnParams, ctx: &GraphContext) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let logits = forward(&mut tape, &bound, ctx)?;
    let z = tape.value(logits);
    Ok((0..z.rows())
        .map(|i| {
            let row = z.row(i);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}
