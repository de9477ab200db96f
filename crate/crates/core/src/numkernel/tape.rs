use std::sync::Arc;

use super::sparse::BlockSparse;
use super::tensor::Tensor;
use super::{NumError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
}

impl Var {
    pub fn id(self) -> usize {
        self.id
    }
}

/// Labelled rows for the fused softmax cross-entropy.
#[derive(Debug, Clone)]
pub struct CeTarget {
    pub rows: Vec<usize>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Matmul,
    Transpose,
    Reshape(Vec<usize>),
    Add,
    Sub,
    Scale(f64),
    Mul,
    /// tensor × 1-element var
    ScaleBy,
    /// 1-element var broadcast to a shape
    Broadcast(Vec<usize>),
    Relu,
    MaskMul(Arc<Tensor>),
    Square,
    Sum,
    Norm,
    NormVjp,
    SoftmaxCe(Arc<CeTarget>),
    CeGrad(Arc<CeTarget>),
    CeGradVjp(Arc<CeTarget>),
    Gather(Arc<BlockSparse>),
    Scatter(Arc<BlockSparse>),
    /// Value supplied from outside with a fixed gradient w.r.t. its input.
    Frozen(Arc<Tensor>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Scale(_) => "scale",
            Op::Mul => "mul",
            Op::ScaleBy => "scale_by",
            Op::Broadcast(_) => "broadcast",
            Op::Relu => "relu",
            Op::MaskMul(_) => "mask_mul",
            Op::Square => "square",
            Op::Sum => "sum",
            Op::Norm => "l2_norm",
            Op::NormVjp => "l2_norm_vjp",
            Op::SoftmaxCe(_) => "softmax_cross_entropy",
            Op::CeGrad(_) => "softmax_cross_entropy_grad",
            Op::CeGradVjp(_) => "softmax_cross_entropy_grad_vjp",
            Op::Gather(_) => "relational_gather",
            Op::Scatter(_) => "relational_scatter",
            Op::Frozen(_) => "frozen",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
}

/// Append-only record of eagerly evaluated operations.
///
/// Gradients produced by [`Tape::grad`] are themselves recorded, so they can
/// be differentiated again.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.id].value.shape()
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.id].op
    }

    pub fn inputs(&self, v: Var) -> &[usize] {
        &self.nodes[v.id].inputs
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor) -> Var {
        debug_assert!(inputs.iter().all(|&i| i < self.nodes.len()));
        let id = self.nodes.len();
        self.nodes.push(Node { op, inputs, value });
        Var { id }
    }

    /// Record a parameter or constant.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, Vec::new(), value)
    }

    /// Record `op` applied to `inputs`, computing its value eagerly.
    pub fn record(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let value = self.forward(&op, &ids)?;
        Ok(self.push(op, ids, value))
    }

    /// Recompute the value of a recorded node from its inputs' stored values.
    pub fn replay(&self, v: Var) -> Result<Tensor> {
        let node = &self.nodes[v.id];
        match node.op {
            Op::Leaf | Op::Frozen(_) => Ok(node.value.clone()),
            _ => self.forward(&node.op, &node.inputs),
        }
    }

    fn arity_check(op: &Op, n: usize) -> Result<()> {
        let want = match op {
            Op::Leaf => 0,
            Op::Matmul | Op::Add | Op::Sub | Op::Mul | Op::ScaleBy | Op::NormVjp | Op::CeGradVjp(_) => 2,
            _ => 1,
        };
        if n != want {
            return Err(NumError::Arity {
                op: op.name(),
                expected: want,
                got: n,
            });
        }
        Ok(())
    }

    fn forward(&self, op: &Op, ids: &[usize]) -> Result<Tensor> {
        Self::arity_check(op, ids.len())?;
        let val = |k: usize| &self.nodes[ids[k]].value;
        let mismatch = |a: &Tensor, b: &Tensor| NumError::ShapeMismatch {
            op: op.name(),
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        let out = match op {
            Op::Leaf => unreachable!("leaves are not recomputed"),
            Op::Matmul => {
                let (a, b) = (val(0), val(1));
                if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
                    return Err(mismatch(a, b));
                }
                a.matmul(b)
            }
            Op::Transpose => {
                let a = val(0);
                if a.shape().len() != 2 {
                    return Err(mismatch(a, a));
                }
                a.transpose()
            }
            Op::Reshape(shape) => val(0).clone().reshaped(shape)?,
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (val(0), val(1));
                if a.shape() != b.shape() {
                    return Err(mismatch(a, b));
                }
                match op {
                    Op::Add => a.add(b),
                    Op::Sub => a.sub(b),
                    _ => a.zip_map(b, |x, y| x * y),
                }
            }
            Op::Scale(c) => val(0).scale(*c),
            Op::ScaleBy => {
                let (a, s) = (val(0), val(1));
                if s.len() != 1 {
                    return Err(mismatch(a, s));
                }
                a.scale(s.item())
            }
            Op::Broadcast(shape) => {
                let s = val(0);
                if s.len() != 1 {
                    return Err(mismatch(s, s));
                }
                Tensor::full(shape, s.item())
            }
            Op::Relu => val(0).map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::MaskMul(mask) => {
                let a = val(0);
                if a.shape() != mask.shape() {
                    return Err(mismatch(a, mask));
                }
                a.zip_map(mask, |x, m| x * m)
            }
            Op::Square => val(0).map(|x| x * x),
            Op::Sum => Tensor::scalar(val(0).sum()),
            Op::Norm => Tensor::scalar(val(0).norm()),
            Op::NormVjp => {
                let (x, u) = (val(0), val(1));
                let n = x.norm();
                if n == 0.0 {
                    Tensor::zeros(x.shape())
                } else {
                    x.scale(u.item() / n)
                }
            }
            Op::SoftmaxCe(t) => {
                let z = self.check_logits(op, val(0), t)?;
                let mut total = 0.0;
                for (&row, &label) in t.rows.iter().zip(&t.labels) {
                    let zr = z.row(row);
                    total += log_sum_exp(zr) - zr[label];
                }
                Tensor::scalar(total / t.rows.len() as f64)
            }
            Op::CeGrad(t) => {
                let z = self.check_logits(op, val(0), t)?;
                let c = z.cols();
                let m = t.rows.len() as f64;
                let mut out = Tensor::zeros(z.shape());
                for (&row, &label) in t.rows.iter().zip(&t.labels) {
                    let p = softmax(z.row(row));
                    let o = &mut out.data_mut()[row * c..(row + 1) * c];
                    for k in 0..c {
                        o[k] = (p[k] - if k == label { 1.0 } else { 0.0 }) / m;
                    }
                }
                out
            }
            Op::CeGradVjp(t) => {
                let z = self.check_logits(op, val(0), t)?;
                let u = val(1);
                if u.shape() != z.shape() {
                    return Err(mismatch(z, u));
                }
                let c = z.cols();
                let m = t.rows.len() as f64;
                let mut out = Tensor::zeros(z.shape());
                for &row in &t.rows {
                    let p = softmax(z.row(row));
                    let ur = u.row(row);
                    let dot: f64 = p.iter().zip(ur).map(|(a, b)| a * b).sum();
                    let o = &mut out.data_mut()[row * c..(row + 1) * c];
                    for k in 0..c {
                        o[k] = p[k] * (ur[k] - dot) / m;
                    }
                }
                out
            }
            Op::Gather(sp) => {
                let z = val(0);
                let width = z.cols() / sp.blocks().max(1);
                if z.shape().len() != 2 || z.rows() != sp.n_src() || width * sp.blocks() != z.cols() {
                    return Err(mismatch(z, z));
                }
                Tensor::new(vec![sp.n_dst(), width], sp.gather(z.data(), width))?
            }
            Op::Scatter(sp) => {
                let g = val(0);
                if g.shape().len() != 2 || g.rows() != sp.n_dst() {
                    return Err(mismatch(g, g));
                }
                let width = g.cols();
                Tensor::new(vec![sp.n_src(), width * sp.blocks()], sp.scatter(g.data(), width))?
            }
            // value comes from outside; see `Tape::frozen`
            Op::Frozen(_) => return Err(NumError::Unsupported(op.name())),
        };
        Ok(out)
    }

    fn check_logits<'a>(&self, op: &Op, z: &'a Tensor, t: &CeTarget) -> Result<&'a Tensor> {
        if z.shape().len() != 2 || t.rows.is_empty() || t.rows.len() != t.labels.len() {
            return Err(NumError::EmptyTarget(op.name()));
        }
        let c = z.cols();
        if t.rows.iter().any(|&r| r >= z.rows()) || t.labels.iter().any(|&l| l >= c) {
            return Err(NumError::TargetOutOfRange { rows: z.rows(), classes: c });
        }
        Ok(z)
    }

    // ---- convenience constructors -------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Matmul, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Transpose, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.record(Op::Reshape(shape.to_vec()), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Op::Scale(c), &[a])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul, &[a, b])
    }

    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        self.record(Op::ScaleBy, &[a, s])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Relu, &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Square, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum, &[a])
    }

    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Norm, &[a])
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, target: Arc<CeTarget>) -> Result<Var> {
        self.record(Op::SoftmaxCe(target), &[logits])
    }

    pub fn gather(&mut self, z: Var, sp: Arc<BlockSparse>) -> Result<Var> {
        self.record(Op::Gather(sp), &[z])
    }

    /// Scalar node with externally computed `value` whose gradient with
    /// respect to `input` is the constant `grad`.
    pub fn frozen(&mut self, input: Var, value: f64, grad: Tensor) -> Result<Var> {
        if self.shape(input) != grad.shape() {
            return Err(NumError::ShapeMismatch {
                op: "frozen",
                lhs: self.shape(input).to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        Ok(self.push(Op::Frozen(Arc::new(grad)), vec![input.id], Tensor::scalar(value)))
    }

    // ---- reverse mode ---------------------------------------------------

    /// Gradients of the scalar `loss` with respect to each of `wrt`, recorded
    /// on the tape as differentiable variables.
    pub fn grad(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if self.nodes[loss.id].value.len() != 1 {
            return Err(NumError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let end = loss.id + 1;
        let mut reaches = vec![false; end];
        reaches[loss.id] = true;
        for id in (0..end).rev() {
            if reaches[id] {
                for &i in &self.nodes[id].inputs {
                    reaches[i] = true;
                }
            }
        }
        let mut depends = vec![false; end];
        for w in wrt {
            if w.id < end {
                depends[w.id] = true;
            }
        }
        for id in 0..end {
            if !depends[id] && self.nodes[id].inputs.iter().any(|&i| depends[i]) {
                depends[id] = true;
            }
        }
        let relevant: Vec<bool> = reaches.iter().zip(&depends).map(|(a, b)| *a && *b).collect();

        let mut adjoint: Vec<Option<Var>> = vec![None; end];
        if relevant[loss.id] {
            let one = Tensor::full(self.shape(loss), 1.0);
            adjoint[loss.id] = Some(self.leaf(one));
        }
        for id in (0..end).rev() {
            let Some(upstream) = adjoint[id] else { continue };
            let inputs = self.nodes[id].inputs.clone();
            for (k, &inp) in inputs.iter().enumerate() {
                if !relevant[inp] {
                    continue;
                }
                let contrib = self.vjp(id, k, upstream)?;
                adjoint[inp] = Some(match adjoint[inp] {
                    Some(prev) => self.add(prev, contrib)?,
                    None => contrib,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|w| match adjoint.get(w.id).copied().flatten() {
                Some(g) => g,
                None => {
                    let z = Tensor::zeros(self.shape(*w));
                    self.leaf(z)
                }
            })
            .collect())
    }

    /// [`grad`](Self::grad) evaluated to plain tensors.
    pub fn backward(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let g = self.grad(loss, wrt)?;
        Ok(g.into_iter().map(|v| self.value(v).clone()).collect())
    }

    fn vjp(&mut self, id: usize, k: usize, u: Var) -> Result<Var> {
        let op = self.nodes[id].op.clone();
        let inputs = self.nodes[id].inputs.clone();
        let x = |j: usize| Var { id: inputs[j] };
        match op {
            Op::Leaf => unreachable!("leaves have no inputs"),
            Op::Matmul => {
                if k == 0 {
                    let bt = self.transpose(x(1))?;
                    self.matmul(u, bt)
                } else {
                    let at = self.transpose(x(0))?;
                    self.matmul(at, u)
                }
            }
            Op::Transpose => self.transpose(u),
            Op::Reshape(_) => {
                let shape = self.shape(x(0)).to_vec();
                self.reshape(u, &shape)
            }
            Op::Add => Ok(u),
            Op::Sub => {
                if k == 0 {
                    Ok(u)
                } else {
                    self.scale(u, -1.0)
                }
            }
            Op::Scale(c) => self.scale(u, c),
            Op::Mul => self.mul(u, x(1 - k)),
            Op::ScaleBy => {
                if k == 0 {
                    self.scale_by(u, x(1))
                } else {
                    let p = self.mul(u, x(0))?;
                    self.sum(p)
                }
            }
            Op::Broadcast(_) => self.sum(u),
            Op::Sum => {
                let shape = self.shape(x(0)).to_vec();
                self.record(Op::Broadcast(shape), &[u])
            }
            Op::Relu => {
                // derivative at exactly 0 taken as 0
                let mask = self.value(x(0)).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                self.record(Op::MaskMul(Arc::new(mask)), &[u])
            }
            Op::MaskMul(mask) => self.record(Op::MaskMul(mask), &[u]),
            Op::Square => {
                let p = self.mul(u, x(0))?;
                self.scale(p, 2.0)
            }
            Op::Norm => self.record(Op::NormVjp, &[x(0), u]),
            Op::SoftmaxCe(t) => {
                let g = self.record(Op::CeGrad(t), &[x(0)])?;
                self.scale_by(g, u)
            }
            Op::CeGrad(t) => self.record(Op::CeGradVjp(t), &[x(0), u]),
            Op::Gather(sp) => self.record(Op::Scatter(sp), &[u]),
            Op::Scatter(sp) => self.record(Op::Gather(sp), &[u]),
            Op::Frozen(g) => {
                let c = self.leaf((*g).clone());
                self.scale_by(c, u)
            }
            Op::NormVjp | Op::CeGradVjp(_) => Err(NumError::NotTwiceDifferentiable(op.name())),
        }
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
