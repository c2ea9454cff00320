//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Forward ops execute eagerly through the kernels in [`crate::kernels`] and
//! record just enough to replay the chain rule in exact reverse order. A tape
//! is single-threaded and consumed by [`GradTape::backward`]; independent
//! tapes may run in parallel.

use crate::error::{FicsError, Result};
use crate::kernels::{
    self, col2im_add, im2col, log_softmax_row, matmul_acc, matmul_nt_acc, matmul_tn_acc, ConvGeom,
};
use crate::tensor::Tensor;

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[cfg(test)]
impl Var {
    /// Construct a raw handle; only for white-box tests.
    pub(crate) fn test_handle(i: usize) -> Var {
        Var(i)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// a[m,k] * b[k,n]
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    /// x[rows, n] + bias[n], broadcast over rows
    AddBias { x: Var, b: Var },
    Relu { x: Var },
    LeakyRelu { x: Var, slope: f32 },
    Tanh { x: Var },
    Softplus { x: Var },
    Neg { x: Var },
    Scale { x: Var, c: f32 },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    /// [rows, wa] ++ [rows, wb] -> [rows, wa+wb]
    ConcatCols { a: Var, b: Var, wa: usize, wb: usize },
    /// table[k, e] gathered at per-row indices -> [rows, e]
    Embed { table: Var, indices: Vec<usize> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Deconv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Reshape { x: Var },
    SumAll { x: Var },
    MeanAll { x: Var },
    /// -log softmax(logits)[target], one value per row
    CrossEntropy { logits: Var, targets: Vec<usize> },
    /// sum over wrong targets y' != y of -log softmax(logits)[y'], per row
    WrongTargetsCe { logits: Var, targets: Vec<usize> },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f32>,
    /// Op-specific stash reused by backward (e.g. log-probs for the CE ops).
    aux: Vec<f32>,
    trainable: bool,
    needs_grad: bool,
}

#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Maximum magnitude a logit may reach before exponentiation.
pub const LOGIT_CLAMP: f32 = 30.0;

impl GradTape {
    pub fn new() -> Self {
        GradTape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f32>, aux: Vec<f32>) -> Var {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by {op:?}"
        );
        let needs_grad = match &op {
            Op::Leaf => false, // set by leaf()
            _ => self.op_inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { op, shape, data, aux, trainable: false, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Matmul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } | Op::ConcatCols { a, b, .. } => {
                vec![*a, *b]
            }
            Op::AddBias { x, b } => vec![*x, *b],
            Op::Relu { x }
            | Op::LeakyRelu { x, .. }
            | Op::Tanh { x }
            | Op::Softplus { x }
            | Op::Neg { x }
            | Op::Scale { x, .. }
            | Op::Reshape { x }
            | Op::SumAll { x }
            | Op::MeanAll { x } => vec![*x],
            Op::Embed { table, .. } => vec![*table],
            Op::Conv2d { x, w, b, .. } | Op::Deconv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::CrossEntropy { logits, .. } | Op::WrongTargetsCe { logits, .. } => vec![*logits],
        }
    }

    /// Register a tensor as a leaf, controlling trainability explicitly.
    pub fn leaf(&mut self, t: &Tensor, trainable: bool) -> Var {
        let v = self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), vec![]);
        self.nodes[v.0].trainable = trainable;
        self.nodes[v.0].needs_grad = trainable;
        v
    }

    /// Register a tensor using its own `requires_grad` flag.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.leaf(t, t.requires_grad())
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
    }

    /// Value of a 1-element node, checked finite.
    pub fn scalar(&self, v: Var) -> Result<f32> {
        let n = &self.nodes[v.0];
        assert_eq!(n.data.len(), 1, "scalar() on shape {:?}", n.shape);
        let val = n.data[0];
        if !val.is_finite() {
            return Err(FicsError::NonFinite { what: "loss value".into() });
        }
        Ok(val)
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        assert_eq!(sa.len(), 2, "matmul lhs must be 2-d, got {sa:?}");
        assert_eq!(sb.len(), 2, "matmul rhs must be 2-d, got {sb:?}");
        let (m, k) = (sa[0], sa[1]);
        assert_eq!(k, sb[0], "matmul inner dims {sa:?} x {sb:?}");
        let n = sb[1];
        let mut out = vec![0.0; m * n];
        matmul_acc(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut out, m, k, n);
        self.push(Op::Matmul { a, b, m, k, n }, vec![m, n], out, vec![])
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let n = *self.nodes[x.0].shape.last().expect("add_bias on scalar");
        assert_eq!(self.nodes[b.0].data.len(), n, "bias length mismatch");
        let rows = self.nodes[x.0].data.len() / n;
        let mut out = self.nodes[x.0].data.clone();
        for r in 0..rows {
            for (o, &bv) in out[r * n..(r + 1) * n].iter_mut().zip(&self.nodes[b.0].data) {
                *o += bv;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::AddBias { x, b }, shape, out, vec![])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f32> = self.nodes[x.0].data.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Relu { x }, shape, out, vec![])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let out: Vec<f32> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::LeakyRelu { x, slope }, shape, out, vec![])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out: Vec<f32> = self.nodes[x.0].data.iter().map(|&v| v.tanh()).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Tanh { x }, shape, out, vec![])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out: Vec<f32> = self.nodes[x.0].data.iter().map(|&v| kernels::softplus(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Softplus { x }, shape, out, vec![])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let out: Vec<f32> = self.nodes[x.0].data.iter().map(|&v| -v).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Neg { x }, shape, out, vec![])
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let out: Vec<f32> = self.nodes[x.0].data.iter().map(|&v| c * v).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Scale { x, c }, shape, out, vec![])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.nodes[a.0].shape, self.nodes[b.0].shape, "add shape mismatch");
        let out: Vec<f32> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Add { a, b }, shape, out, vec![])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.nodes[a.0].shape, self.nodes[b.0].shape, "mul shape mismatch");
        let out: Vec<f32> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Mul { a, b }, shape, out, vec![])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        assert_eq!(sa.len(), 2, "concat lhs must be 2-d");
        assert_eq!(sb.len(), 2, "concat rhs must be 2-d");
        assert_eq!(sa[0], sb[0], "concat row mismatch");
        let (rows, wa, wb) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(rows * (wa + wb));
        for r in 0..rows {
            out.extend_from_slice(&self.nodes[a.0].data[r * wa..(r + 1) * wa]);
            out.extend_from_slice(&self.nodes[b.0].data[r * wb..(r + 1) * wb]);
        }
        self.push(Op::ConcatCols { a, b, wa, wb }, vec![rows, wa + wb], out, vec![])
    }

    pub fn embed(&mut self, table: Var, indices: &[usize]) -> Var {
        let st = &self.nodes[table.0].shape;
        assert_eq!(st.len(), 2, "embedding table must be 2-d");
        let (k, e) = (st[0], st[1]);
        let mut out = Vec::with_capacity(indices.len() * e);
        for &i in indices {
            assert!(i < k, "class index {i} out of range ({k} classes)");
            out.extend_from_slice(&self.nodes[table.0].data[i * e..(i + 1) * e]);
        }
        self.push(
            Op::Embed { table, indices: indices.to_vec() },
            vec![indices.len(), e],
            out,
            vec![],
        )
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let sx = &self.nodes[x.0].shape;
        assert_eq!(sx.len(), 4, "conv2d input must be [b,c,h,w]");
        assert_eq!(&sx[1..], &[geom.cin, geom.h_in, geom.w_in], "conv2d input geometry");
        assert_eq!(self.nodes[w.0].data.len(), geom.cout * geom.patch_len(), "conv2d weight size");
        assert_eq!(self.nodes[b.0].data.len(), geom.cout, "conv2d bias size");
        let batch = sx[0];
        let hw = geom.h_out * geom.w_out;
        let ckk = geom.patch_len();
        let mut out = vec![0.0; batch * geom.cout * hw];
        let mut col = vec![0.0; ckk * hw];
        let in_len = geom.cin * geom.h_in * geom.w_in;
        for s in 0..batch {
            im2col(
                &self.nodes[x.0].data[s * in_len..(s + 1) * in_len],
                geom.cin, geom.h_in, geom.w_in, geom.k, geom.stride, geom.pad,
                geom.h_out, geom.w_out, &mut col,
            );
            let dst = &mut out[s * geom.cout * hw..(s + 1) * geom.cout * hw];
            matmul_acc(&self.nodes[w.0].data, &col, dst, geom.cout, ckk, hw);
            for c in 0..geom.cout {
                let bias = self.nodes[b.0].data[c];
                for o in dst[c * hw..(c + 1) * hw].iter_mut() {
                    *o += bias;
                }
            }
        }
        self.push(
            Op::Conv2d { x, w, b, geom },
            vec![batch, geom.cout, geom.h_out, geom.w_out],
            out,
            vec![],
        )
    }

    pub fn deconv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let sx = &self.nodes[x.0].shape;
        assert_eq!(sx.len(), 4, "deconv2d input must be [b,c,h,w]");
        assert_eq!(&sx[1..], &[geom.cin, geom.h_in, geom.w_in], "deconv2d input geometry");
        let cokk = geom.cout * geom.k * geom.k;
        assert_eq!(self.nodes[w.0].data.len(), geom.cin * cokk, "deconv2d weight size");
        assert_eq!(self.nodes[b.0].data.len(), geom.cout, "deconv2d bias size");
        let batch = sx[0];
        let hw_in = geom.h_in * geom.w_in;
        let out_len = geom.cout * geom.h_out * geom.w_out;
        let in_len = geom.cin * hw_in;
        let mut out = vec![0.0; batch * out_len];
        let mut col = vec![0.0; cokk * hw_in];
        for s in 0..batch {
            col.fill(0.0);
            matmul_tn_acc(
                &self.nodes[w.0].data,
                &self.nodes[x.0].data[s * in_len..(s + 1) * in_len],
                &mut col,
                geom.cin, cokk, hw_in,
            );
            let dst = &mut out[s * out_len..(s + 1) * out_len];
            col2im_add(
                &col, geom.cout, geom.h_out, geom.w_out, geom.k, geom.stride, geom.pad,
                geom.h_in, geom.w_in, dst,
            );
            let hw_out = geom.h_out * geom.w_out;
            for c in 0..geom.cout {
                let bias = self.nodes[b.0].data[c];
                for o in dst[c * hw_out..(c + 1) * hw_out].iter_mut() {
                    *o += bias;
                }
            }
        }
        self.push(
            Op::Deconv2d { x, w, b, geom },
            vec![batch, geom.cout, geom.h_out, geom.w_out],
            out,
            vec![],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.nodes[x.0].data.len(), "reshape numel mismatch");
        let data = self.nodes[x.0].data.clone();
        self.push(Op::Reshape { x }, shape, data, vec![])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].data.iter().map(|&v| v as f64).sum();
        self.push(Op::SumAll { x }, vec![1], vec![s as f32], vec![])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].data.len();
        assert!(n > 0, "mean of empty tensor");
        let s: f64 = self.nodes[x.0].data.iter().map(|&v| v as f64).sum();
        self.push(Op::MeanAll { x }, vec![1], vec![(s / n as f64) as f32], vec![])
    }

    /// Per-row -log softmax(logits)[target]. Logits are clamped to
    /// ±[`LOGIT_CLAMP`] before exponentiation.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (rows, k, aux) = self.ce_logprobs(logits, targets);
        let out: Vec<f32> = targets.iter().enumerate().map(|(r, &t)| -aux[r * k + t]).collect();
        self.push(
            Op::CrossEntropy { logits, targets: targets.to_vec() },
            vec![rows],
            out,
            aux,
        )
    }

    /// Per-row sum over wrong targets: sum_{y' != y} -log softmax(logits)[y'].
    pub fn wrong_targets_ce(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (rows, k, aux) = self.ce_logprobs(logits, targets);
        let out: Vec<f32> = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| {
                let row = &aux[r * k..(r + 1) * k];
                let total: f64 = row.iter().map(|&v| v as f64).sum();
                (-(total - row[t] as f64)) as f32
            })
            .collect();
        self.push(
            Op::WrongTargetsCe { logits, targets: targets.to_vec() },
            vec![rows],
            out,
            aux,
        )
    }

    fn ce_logprobs(&mut self, logits: Var, targets: &[usize]) -> (usize, usize, Vec<f32>) {
        let s = &self.nodes[logits.0].shape;
        assert_eq!(s.len(), 2, "cross entropy expects [rows, k] logits");
        let (rows, k) = (s[0], s[1]);
        assert!(k >= 2, "cross entropy needs at least 2 classes");
        assert_eq!(targets.len(), rows, "one target per row");
        for (&t, r) in targets.iter().zip(0..) {
            assert!(t < k, "target {t} out of range for {k} classes (row {r})");
        }
        assert!(
            self.nodes[logits.0].data.iter().all(|v| v.is_finite()),
            "non-finite logits"
        );
        let mut aux = vec![0.0f32; rows * k];
        for r in 0..rows {
            log_softmax_row(
                &self.nodes[logits.0].data[r * k..(r + 1) * k],
                &mut aux[r * k..(r + 1) * k],
            );
        }
        (rows, k, aux)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Run the chain rule from `loss` back to every trainable leaf,
    /// consuming the tape. `loss` must be a finite scalar that depends on at
    /// least one trainable leaf.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes;
        assert_eq!(nodes[loss.0].data.len(), 1, "backward from non-scalar loss");
        if !nodes[loss.0].data[0].is_finite() {
            return Err(FicsError::NonFinite { what: "loss".into() });
        }
        if !nodes[loss.0].needs_grad {
            return Err(FicsError::DetachedGraph);
        }

        let n = nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        fn acc<'g>(grads: &'g mut [Option<Vec<f32>>], v: Var, len: usize) -> &'g mut [f32] {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..n).rev() {
            if !nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {
                    // Final gradient; put it back for extraction.
                    grads[i] = Some(g);
                }
                Op::Matmul { a, b, m, k, n: nn } => {
                    if nodes[a.0].needs_grad {
                        let da = acc(&mut grads, *a, m * k);
                        matmul_nt_acc(&g, &nodes[b.0].data, da, *m, *nn, *k);
                    }
                    if nodes[b.0].needs_grad {
                        let db = acc(&mut grads, *b, k * nn);
                        matmul_tn_acc(&nodes[a.0].data, &g, db, *m, *k, *nn);
                    }
                }
                Op::AddBias { x, b } => {
                    let nb = nodes[b.0].data.len();
                    if nodes[x.0].needs_grad {
                        let dx = acc(&mut grads, *x, g.len());
                        for (d, &gv) in dx.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    }
                    if nodes[b.0].needs_grad {
                        let db = acc(&mut grads, *b, nb);
                        for row in g.chunks_exact(nb) {
                            for (d, &gv) in db.iter_mut().zip(row) {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::Relu { x } => {
                    let dx = acc(&mut grads, *x, g.len());
                    for ((d, &gv), &xv) in dx.iter_mut().zip(&g).zip(&nodes[x.0].data) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let dx = acc(&mut grads, *x, g.len());
                    for ((d, &gv), &xv) in dx.iter_mut().zip(&g).zip(&nodes[x.0].data) {
                        *d += if xv > 0.0 { gv } else { slope * gv };
                    }
                }
                Op::Tanh { x } => {
                    let dx = acc(&mut grads, *x, g.len());
                    for ((d, &gv), &tv) in dx.iter_mut().zip(&g).zip(&node.data) {
                        *d += gv * (1.0 - tv * tv);
                    }
                }
                Op::Softplus { x } => {
                    let dx = acc(&mut grads, *x, g.len());
                    for ((d, &gv), &xv) in dx.iter_mut().zip(&g).zip(&nodes[x.0].data) {
                        *d += gv * kernels::sigmoid(xv);
                    }
                }
                Op::Neg { x } => {
                    let dx = acc(&mut grads, *x, g.len());
                    for (d, &gv) in dx.iter_mut().zip(&g) {
                        *d -= gv;
                    }
                }
                Op::Scale { x, c } => {
                    let dx = acc(&mut grads, *x, g.len());
                    for (d, &gv) in dx.iter_mut().zip(&g) {
                        *d += c * gv;
                    }
                }
                Op::Add { a, b } => {
                    for v in [a, b] {
                        if nodes[v.0].needs_grad {
                            let d = acc(&mut grads, *v, g.len());
                            for (dd, &gv) in d.iter_mut().zip(&g) {
                                *dd += gv;
                            }
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if nodes[a.0].needs_grad {
                        let da = acc(&mut grads, *a, g.len());
                        for ((d, &gv), &bv) in da.iter_mut().zip(&g).zip(&nodes[b.0].data) {
                            *d += gv * bv;
                        }
                    }
                    if nodes[b.0].needs_grad {
                        let db = acc(&mut grads, *b, g.len());
                        for ((d, &gv), &av) in db.iter_mut().zip(&g).zip(&nodes[a.0].data) {
                            *d += gv * av;
                        }
                    }
                }
                Op::ConcatCols { a, b, wa, wb } => {
                    let rows = node.shape[0];
                    if nodes[a.0].needs_grad {
                        let da = acc(&mut grads, *a, rows * wa);
                        for r in 0..rows {
                            let src = &g[r * (wa + wb)..r * (wa + wb) + wa];
                            for (d, &gv) in da[r * wa..(r + 1) * wa].iter_mut().zip(src) {
                                *d += gv;
                            }
                        }
                    }
                    if nodes[b.0].needs_grad {
                        let db = acc(&mut grads, *b, rows * wb);
                        for r in 0..rows {
                            let src = &g[r * (wa + wb) + wa..(r + 1) * (wa + wb)];
                            for (d, &gv) in db[r * wb..(r + 1) * wb].iter_mut().zip(src) {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::Embed { table, indices } => {
                    let e = node.shape[1];
                    let dt = acc(&mut grads, *table, nodes[table.0].data.len());
                    for (r, &idx) in indices.iter().enumerate() {
                        for (d, &gv) in dt[idx * e..(idx + 1) * e].iter_mut().zip(&g[r * e..(r + 1) * e]) {
                            *d += gv;
                        }
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let batch = node.shape[0];
                    let hw = geom.h_out * geom.w_out;
                    let ckk = geom.patch_len();
                    let in_len = geom.cin * geom.h_in * geom.w_in;
                    let out_len = geom.cout * hw;
                    let mut col = vec![0.0; ckk * hw];
                    let mut dcol = vec![0.0; ckk * hw];
                    let need_x = nodes[x.0].needs_grad;
                    let need_w = nodes[w.0].needs_grad;
                    let need_b = nodes[b.0].needs_grad;
                    let mut dw = vec![0.0; nodes[w.0].data.len()];
                    let mut db = vec![0.0; geom.cout];
                    let mut dx = vec![0.0; if need_x { batch * in_len } else { 0 }];
                    for s in 0..batch {
                        let gs = &g[s * out_len..(s + 1) * out_len];
                        if need_b {
                            for c in 0..geom.cout {
                                let mut acc64 = 0.0f64;
                                for &gv in &gs[c * hw..(c + 1) * hw] {
                                    acc64 += gv as f64;
                                }
                                db[c] += acc64 as f32;
                            }
                        }
                        if need_w {
                            im2col(
                                &nodes[x.0].data[s * in_len..(s + 1) * in_len],
                                geom.cin, geom.h_in, geom.w_in, geom.k, geom.stride, geom.pad,
                                geom.h_out, geom.w_out, &mut col,
                            );
                            matmul_nt_acc(gs, &col, &mut dw, geom.cout, hw, ckk);
                        }
                        if need_x {
                            dcol.fill(0.0);
                            matmul_tn_acc(&nodes[w.0].data, gs, &mut dcol, geom.cout, ckk, hw);
                            col2im_add(
                                &dcol, geom.cin, geom.h_in, geom.w_in, geom.k, geom.stride,
                                geom.pad, geom.h_out, geom.w_out,
                                &mut dx[s * in_len..(s + 1) * in_len],
                            );
                        }
                    }
                    if need_x {
                        let d = acc(&mut grads, *x, batch * in_len);
                        for (dd, &v) in d.iter_mut().zip(&dx) {
                            *dd += v;
                        }
                    }
                    if need_w {
                        let d = acc(&mut grads, *w, dw.len());
                        for (dd, &v) in d.iter_mut().zip(&dw) {
                            *dd += v;
                        }
                    }
                    if need_b {
                        let d = acc(&mut grads, *b, geom.cout);
                        for (dd, &v) in d.iter_mut().zip(&db) {
                            *dd += v;
                        }
                    }
                }
                Op::Deconv2d { x, w, b, geom } => {
                    let batch = node.shape[0];
                    let hw_in = geom.h_in * geom.w_in;
                    let hw_out = geom.h_out * geom.w_out;
                    let cokk = geom.cout * geom.k * geom.k;
                    let in_len = geom.cin * hw_in;
                    let out_len = geom.cout * hw_out;
                    let mut gcol = vec![0.0; cokk * hw_in];
                    let need_x = nodes[x.0].needs_grad;
                    let need_w = nodes[w.0].needs_grad;
                    let need_b = nodes[b.0].needs_grad;
                    let mut dw = vec![0.0; nodes[w.0].data.len()];
                    let mut db = vec![0.0; geom.cout];
                    let mut dx = vec![0.0; if need_x { batch * in_len } else { 0 }];
                    for s in 0..batch {
                        let gs = &g[s * out_len..(s + 1) * out_len];
                        if need_b {
                            for c in 0..geom.cout {
                                let mut acc64 = 0.0f64;
                                for &gv in &gs[c * hw_out..(c + 1) * hw_out] {
                                    acc64 += gv as f64;
                                }
                                db[c] += acc64 as f32;
                            }
                        }
                        if need_x || need_w {
                            im2col(
                                gs, geom.cout, geom.h_out, geom.w_out, geom.k, geom.stride,
                                geom.pad, geom.h_in, geom.w_in, &mut gcol,
                            );
                        }
                        if need_x {
                            matmul_acc(
                                &nodes[w.0].data, &gcol,
                                &mut dx[s * in_len..(s + 1) * in_len],
                                geom.cin, cokk, hw_in,
                            );
                        }
                        if need_w {
                            matmul_nt_acc(
                                &nodes[x.0].data[s * in_len..(s + 1) * in_len],
                                &gcol, &mut dw, geom.cin, hw_in, cokk,
                            );
                        }
                    }
                    if need_x {
                        let d = acc(&mut grads, *x, batch * in_len);
                        for (dd, &v) in d.iter_mut().zip(&dx) {
                            *dd += v;
                        }
                    }
                    if need_w {
                        let d = acc(&mut grads, *w, dw.len());
                        for (dd, &v) in d.iter_mut().zip(&dw) {
                            *dd += v;
                        }
                    }
                    if need_b {
                        let d = acc(&mut grads, *b, geom.cout);
                        for (dd, &v) in d.iter_mut().zip(&db) {
                            *dd += v;
                        }
                    }
                }
                Op::Reshape { x } => {
                    let dx = acc(&mut grads, *x, g.len());
                    for (d, &gv) in dx.iter_mut().zip(&g) {
                        *d += gv;
                    }
                }
                Op::SumAll { x } => {
                    let len = nodes[x.0].data.len();
                    let dx = acc(&mut grads, *x, len);
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
                Op::MeanAll { x } => {
                    let len = nodes[x.0].data.len();
                    let gv = (g[0] as f64 / len as f64) as f32;
                    let dx = acc(&mut grads, *x, len);
                    for d in dx.iter_mut() {
                        *d += gv;
                    }
                }
                Op::CrossEntropy { logits, targets } => {
                    let k = nodes[logits.0].shape[1];
                    let dl = acc(&mut grads, *logits, targets.len() * k);
                    for (r, &t) in targets.iter().enumerate() {
                        let gr = g[r];
                        let lp = &node.aux[r * k..(r + 1) * k];
                        let lrow = &nodes[logits.0].data[r * k..(r + 1) * k];
                        for j in 0..k {
                            if lrow[j].abs() > LOGIT_CLAMP {
                                continue; // clamped entry: zero local gradient
                            }
                            let p = lp[j].exp();
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dl[r * k + j] += gr * (p - onehot);
                        }
                    }
                }
                Op::WrongTargetsCe { logits, targets } => {
                    let k = nodes[logits.0].shape[1];
                    let dl = acc(&mut grads, *logits, targets.len() * k);
                    for (r, &t) in targets.iter().enumerate() {
                        let gr = g[r];
                        let lp = &node.aux[r * k..(r + 1) * k];
                        let lrow = &nodes[logits.0].data[r * k..(r + 1) * k];
                        for j in 0..k {
                            if lrow[j].abs() > LOGIT_CLAMP {
                                continue;
                            }
                            let p = lp[j].exp();
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dl[r * k + j] += gr * ((k as f32 - 1.0) * p - 1.0 + onehot);
                        }
                    }
                }
            }
        }

        let shapes = nodes.iter().map(|n| n.shape.clone()).collect();
        let trainable = nodes.iter().map(|n| n.trainable).collect();
        Ok(Gradients { grads, shapes, trainable })
    }
}

/// Gradients for the leaves of a consumed tape.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
    trainable: Vec<bool>,
}

impl Gradients {
    /// Gradient of a trainable leaf. A leaf untouched by the loss gets an
    /// exactly-zero gradient.
    pub fn take(&mut self, v: Var) -> Tensor {
        assert!(self.trainable[v.0], "gradient requested for non-trainable node");
        let shape = self.shapes[v.0].clone();
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(shape, g),
            None => Tensor::zeros(shape),
        }
    }

    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }
}
