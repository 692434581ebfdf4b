//! Layer-level reverse-mode differentiation over dense row-major matrices.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_points(points: &[Vec3]) -> Self {
        Self::from_vec(points.len(), 3, points.iter().flatten().copied().collect())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_points(&self) -> Vec<Vec3> {
        assert_eq!(self.cols, 3);
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
    }

    fn add_assign(&mut self, other: &Matrix) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Softplus,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Softplus => {
                if x > 30.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            }
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => 1.0 / (1.0 + (-x).exp()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Candidate lists in CSR form: row `i` owns `cand[start[i]..start[i + 1]]`.
#[derive(Debug, Clone)]
pub struct Candidates {
    pub start: Vec<usize>,
    pub cand: Vec<usize>,
}

impl Candidates {
    pub fn from_lists(lists: impl IntoIterator<Item = Vec<usize>>) -> Self {
        let mut start = vec![0];
        let mut cand = Vec::new();
        for l in lists {
            cand.extend(l);
            start.push(cand.len());
        }
        Self { start, cand }
    }

    pub fn rows(&self) -> usize {
        self.start.len() - 1
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.cand[self.start[i]..self.start[i + 1]]
    }
}

/// Inputs of the fused soft-correspondence layer.
///
/// For query `i` with position `p_i` and candidate `j` with position `f_j`:
/// `d = (f_j - p_i) / scale`, `u = act(ah_i + bg_j + d·D)`,
/// `e = u·v - beta |d|²`. Weights are a softmax of `e` over candidates, or,
/// with `dustbin`, `t_j exp(e_j) / (exp(dust) + Σ t exp(e))` where
/// `t = (1 - |d|²)²` on the unit ball. The output row is `[Σ w u, Σ w d]`.
#[derive(Debug, Clone, Copy)]
pub struct CorrelateInputs {
    pub ah: NodeId,
    pub bg: NodeId,
    pub pos: NodeId,
    pub d: NodeId,
    pub v: NodeId,
    pub beta: NodeId,
    pub dust: Option<NodeId>,
}

#[derive(Debug)]
struct CorrelateData {
    inputs: CorrelateInputs,
    targets: Arc<Vec<Vec3>>,
    cand: Candidates,
    scale: f64,
    act: Activation,
    // per candidate pair
    pre: Vec<f64>,
    w: Vec<f64>,
    // E / Z on the dustbin path, needed for the taper gradient
    unnorm: Vec<f64>,
    // per query, dustbin weight
    w_dust: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param { offset: usize },
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Act(NodeId, Activation),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Gather(NodeId, Vec<usize>),
    MaxPool { x: NodeId, arg: Vec<usize> },
    MeanPool { x: NodeId, k: usize },
    Concat(Vec<NodeId>),
    Slice { x: NodeId, start: usize },
    Sparse { x: NodeId, weights: Arc<Vec<Vec<(usize, f64)>>> },
    Project { x: NodeId, basis: Arc<Matrix> },
    Correlate(Box<CorrelateData>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Records a forward pass over a flat parameter vector.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    n_params: usize,
    consumed: bool,
}

impl Tape {
    pub fn new(n_params: usize) -> Self {
        Self {
            nodes: Vec::new(),
            n_params,
            consumed: false,
        }
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// A `rows x cols` view of `params[offset..]`.
    pub fn param(&mut self, params: &[f64], offset: usize, rows: usize, cols: usize) -> NodeId {
        assert!(offset + rows * cols <= self.n_params);
        let value = Matrix::from_vec(rows, cols, params[offset..offset + rows * cols].to_vec());
        self.push(value, Op::Param { offset })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, w) = (self.value(a), self.value(b));
        assert_eq!(x.cols, w.rows, "matmul shapes");
        let mut out = Matrix::zeros(x.rows, w.cols);
        for i in 0..x.rows {
            let xr = x.row(i);
            let or = &mut out.data[i * w.cols..(i + 1) * w.cols];
            for (k, &xv) in xr.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (o, &wv) in or.iter_mut().zip(w.row(k)) {
                    *o += xv * wv;
                }
            }
        }
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let bias = self.value(b);
        assert_eq!(bias.rows * bias.cols, self.value(x).cols, "bias width");
        let bias = bias.data.clone();
        let mut out = self.value(x).clone();
        for row in out.data.chunks_exact_mut(bias.len()) {
            for (o, b) in row.iter_mut().zip(&bias) {
                *o += b;
            }
        }
        self.push(out, Op::AddBias(x, b))
    }

    pub fn act(&mut self, x: NodeId, act: Activation) -> NodeId {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v = act.apply(*v);
        }
        self.push(out, Op::Act(x, act))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        assert_eq!((out.rows, out.cols), (self.value(b).rows, self.value(b).cols), "add shapes");
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v *= s;
        }
        self.push(out, Op::Scale(x, s))
    }

    pub fn gather(&mut self, x: NodeId, rows: Vec<usize>) -> NodeId {
        let src = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * src.cols);
        for &r in &rows {
            data.extend_from_slice(src.row(r));
        }
        let out = Matrix::from_vec(rows.len(), src.cols, data);
        self.push(out, Op::Gather(x, rows))
    }

    /// Column-wise max over consecutive groups of `k` rows.
    pub fn max_pool(&mut self, x: NodeId, k: usize) -> NodeId {
        let src = self.value(x);
        assert!(k > 0 && src.rows.is_multiple_of(k), "max_pool group size");
        let n = src.rows / k;
        let mut out = Matrix::zeros(n, src.cols);
        let mut arg = vec![0usize; n * src.cols];
        for g in 0..n {
            for c in 0..src.cols {
                let mut best = g * k;
                for r in g * k + 1..(g + 1) * k {
                    if src.data[r * src.cols + c] > src.data[best * src.cols + c] {
                        best = r;
                    }
                }
                arg[g * src.cols + c] = best;
                out.data[g * src.cols + c] = src.data[best * src.cols + c];
            }
        }
        self.push(out, Op::MaxPool { x, arg })
    }

    /// Column-wise mean over consecutive groups of `k` rows.
    pub fn mean_pool(&mut self, x: NodeId, k: usize) -> NodeId {
        let src = self.value(x);
        assert!(k > 0 && src.rows.is_multiple_of(k), "mean_pool group size");
        let n = src.rows / k;
        let mut out = Matrix::zeros(n, src.cols);
        for g in 0..n {
            for r in g * k..(g + 1) * k {
                for (o, v) in out.row_mut(g).iter_mut().zip(src.row(r)) {
                    *o += v;
                }
            }
        }
        let inv = 1.0 / k as f64;
        for v in &mut out.data {
            *v *= inv;
        }
        self.push(out, Op::MeanPool { x, k })
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows, rows, "concat rows");
            for i in 0..rows {
                out.data[i * cols + off..i * cols + off + m.cols].copy_from_slice(m.row(i));
            }
            off += m.cols;
        }
        self.push(out, Op::Concat(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let src = self.value(x);
        assert!(start < end && end <= src.cols, "slice range");
        let mut data = Vec::with_capacity(src.rows * (end - start));
        for i in 0..src.rows {
            data.extend_from_slice(&src.row(i)[start..end]);
        }
        let out = Matrix::from_vec(src.rows, end - start, data);
        self.push(out, Op::Slice { x, start })
    }

    /// `y_i = Σ_j w_ij x_j` for a fixed sparse row-stochastic or arbitrary matrix.
    pub fn sparse(&mut self, x: NodeId, weights: Arc<Vec<Vec<(usize, f64)>>>) -> NodeId {
        let src = self.value(x);
        let mut out = Matrix::zeros(weights.len(), src.cols);
        for (i, row) in weights.iter().enumerate() {
            let cols = src.cols;
            for &(j, w) in row {
                for c in 0..cols {
                    out.data[i * cols + c] += w * src.data[j * cols + c];
                }
            }
        }
        self.push(out, Op::Sparse { x, weights })
    }

    /// `Q Qᵀ x` for a fixed matrix `Q` with orthonormal columns.
    pub fn project(&mut self, x: NodeId, basis: Arc<Matrix>) -> NodeId {
        let out = project(&basis, self.value(x));
        self.push(out, Op::Project { x, basis })
    }

    #[allow(clippy::needless_range_loop)]
    pub fn correlate(
        &mut self,
        inputs: CorrelateInputs,
        targets: Arc<Vec<Vec3>>,
        cand: Candidates,
        scale: f64,
        act: Activation,
    ) -> NodeId {
        let ah = self.value(inputs.ah);
        let bg = self.value(inputs.bg);
        let pos = self.value(inputs.pos);
        let dmat = self.value(inputs.d);
        let v = &self.value(inputs.v).data;
        let beta = self.value(inputs.beta).data[0];
        let dust = inputs.dust.map(|d| self.value(d).data[0]);
        let c = ah.cols;
        assert_eq!(cand.rows(), ah.rows, "candidate rows");
        assert_eq!((pos.rows, pos.cols), (ah.rows, 3));
        assert_eq!((dmat.rows, dmat.cols), (3, c));
        assert_eq!(v.len(), c);

        let n_pairs = cand.cand.len();
        let mut pre = vec![0.0; n_pairs * c];
        let mut w = vec![0.0; n_pairs];
        let mut unnorm = vec![0.0; if dust.is_some() { n_pairs } else { 0 }];
        let mut w_dust = vec![0.0; if dust.is_some() { ah.rows } else { 0 }];
        let mut out = Matrix::zeros(ah.rows, c + 3);
        let inv = 1.0 / scale;
        let mut e = Vec::new();
        let mut taper = Vec::new();
        for i in 0..ah.rows {
            let p = pos.row(i);
            let range = cand.start[i]..cand.start[i + 1];
            e.clear();
            taper.clear();
            for (slot, &j) in range.clone().zip(cand.row(i)) {
                let f = targets[j];
                let d = [(f[0] - p[0]) * inv, (f[1] - p[1]) * inv, (f[2] - p[2]) * inv];
                let q = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                let pr = &mut pre[slot * c..(slot + 1) * c];
                let (ar, br) = (ah.row(i), bg.row(j));
                let mut s = 0.0;
                for k in 0..c {
                    let z = ar[k] + br[k] + d[0] * dmat.data[k] + d[1] * dmat.data[c + k] + d[2] * dmat.data[2 * c + k];
                    pr[k] = z;
                    s += act.apply(z) * v[k];
                }
                e.push(s - beta * q);
                taper.push(if q < 1.0 { (1.0 - q) * (1.0 - q) } else { 0.0 });
            }
            let mut m = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out.data[i * (c + 3)..(i + 1) * (c + 3)];
            match dust {
                None => {
                    if e.is_empty() {
                        continue;
                    }
                    let mut z = 0.0;
                    for (slot, &ev) in range.clone().zip(&e) {
                        w[slot] = (ev - m).exp();
                        z += w[slot];
                    }
                    for slot in range.clone() {
                        w[slot] /= z;
                    }
                }
                Some(dv) => {
                    m = m.max(dv);
                    let ed = (dv - m).exp();
                    let mut z = ed;
                    for (k, slot) in range.clone().enumerate() {
                        unnorm[slot] = (e[k] - m).exp();
                        z += taper[k] * unnorm[slot];
                    }
                    for (k, slot) in range.clone().enumerate() {
                        unnorm[slot] /= z;
                        w[slot] = taper[k] * unnorm[slot];
                    }
                    w_dust[i] = ed / z;
                }
            }
            for (slot, &j) in range.zip(cand.row(i)) {
                let wv = w[slot];
                if wv == 0.0 {
                    continue;
                }
                let pr = &pre[slot * c..(slot + 1) * c];
                for k in 0..c {
                    orow[k] += wv * act.apply(pr[k]);
                }
                let f = targets[j];
                for a in 0..3 {
                    orow[c + a] += wv * (f[a] - p[a]) * inv;
                }
            }
        }
        let data = CorrelateData {
            inputs,
            targets,
            cand,
            scale,
            act,
            pre,
            w,
            unnorm,
            w_dust,
        };
        self.push(out, Op::Correlate(Box::new(data)))
    }

    /// Hash of every discrete branch taken in the forward pass (activation
    /// signs of ReLU and argmax choices of max-pooling). Two evaluations with
    /// equal signatures lie on the same smooth piece of the network.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Act(x, Activation::Relu) => {
                    for v in &self.nodes[x.0].value.data {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool { arg, .. } => arg.hash(&mut h),
                Op::Correlate(d) if d.act == Activation::Relu => {
                    for v in &d.pre {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse pass from output cotangents; returns `∂loss/∂params`.
    pub fn backward(&mut self, seeds: &[(NodeId, Matrix)]) -> Result<Vec<f64>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            let v = &self.nodes[id.0].value;
            if (g.rows, g.cols) != (v.rows, v.cols) {
                return Err(Error::LengthMismatch {
                    what: "backward seed",
                    expected: v.rows * v.cols,
                    got: g.rows * g.cols,
                });
            }
            accumulate(&mut grads, *id, g);
        }
        let mut out = vec![0.0; self.n_params];
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param { offset } => {
                    for (o, v) in out[*offset..*offset + g.data.len()].iter_mut().zip(&g.data) {
                        *o += v;
                    }
                }
                Op::MatMul(a, b) => {
                    let (x, w) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    if needs_grad(&self.nodes, *a) {
                        // gx = g wᵀ
                        let mut gx = Matrix::zeros(x.rows, x.cols);
                        for i in 0..x.rows {
                            let gr = g.row(i);
                            for k in 0..x.cols {
                                gx.data[i * x.cols + k] = gr.iter().zip(w.row(k)).map(|(p, q)| p * q).sum();
                            }
                        }
                        accumulate(&mut grads, *a, &gx);
                    }
                    if needs_grad(&self.nodes, *b) {
                        // gw = xᵀ g
                        let mut gw = Matrix::zeros(w.rows, w.cols);
                        for i in 0..x.rows {
                            let gr = g.row(i);
                            for (k, &xv) in x.row(i).iter().enumerate() {
                                if xv == 0.0 {
                                    continue;
                                }
                                for (o, &gv) in gw.row_mut(k).iter_mut().zip(gr) {
                                    *o += xv * gv;
                                }
                            }
                        }
                        accumulate(&mut grads, *b, &gw);
                    }
                }
                Op::AddBias(x, b) => {
                    let bv = &self.nodes[b.0].value;
                    let mut gb = Matrix::zeros(bv.rows, bv.cols);
                    for row in g.data.chunks_exact(gb.data.len()) {
                        for (o, v) in gb.data.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *b, &gb);
                    accumulate_owned(&mut grads, *x, g);
                }
                Op::Act(x, act) => {
                    let pre = &self.nodes[x.0].value;
                    let mut gx = g;
                    for (gv, &p) in gx.data.iter_mut().zip(&pre.data) {
                        *gv *= act.derivative(p);
                    }
                    accumulate_owned(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate_owned(&mut grads, *b, g);
                }
                Op::Scale(x, s) => {
                    let mut gx = g;
                    for v in &mut gx.data {
                        *v *= s;
                    }
                    accumulate_owned(&mut grads, *x, gx);
                }
                Op::Gather(x, rows) => {
                    if needs_grad(&self.nodes, *x) {
                        let src = &self.nodes[x.0].value;
                        let mut gx = Matrix::zeros(src.rows, src.cols);
                        for (i, &r) in rows.iter().enumerate() {
                            for (o, v) in gx.row_mut(r).iter_mut().zip(g.row(i)) {
                                *o += v;
                            }
                        }
                        accumulate_owned(&mut grads, *x, gx);
                    }
                }
                Op::MaxPool { x, arg, .. } => {
                    if needs_grad(&self.nodes, *x) {
                        let src = &self.nodes[x.0].value;
                        let mut gx = Matrix::zeros(src.rows, src.cols);
                        let cols = src.cols;
                        for (slot, &r) in arg.iter().enumerate() {
                            gx.data[r * cols + slot % cols] += g.data[slot];
                        }
                        accumulate_owned(&mut grads, *x, gx);
                    }
                }
                Op::MeanPool { x, k } => {
                    if needs_grad(&self.nodes, *x) {
                        let src = &self.nodes[x.0].value;
                        let mut gx = Matrix::zeros(src.rows, src.cols);
                        let inv = 1.0 / *k as f64;
                        for r in 0..src.rows {
                            for (o, v) in gx.row_mut(r).iter_mut().zip(g.row(r / k)) {
                                *o = v * inv;
                            }
                        }
                        accumulate_owned(&mut grads, *x, gx);
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let m = &self.nodes[p.0].value;
                        if needs_grad(&self.nodes, *p) {
                            let mut gp = Matrix::zeros(m.rows, m.cols);
                            for i in 0..m.rows {
                                gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + m.cols]);
                            }
                            accumulate_owned(&mut grads, *p, gp);
                        }
                        off += m.cols;
                    }
                }
                Op::Slice { x, start } => {
                    if needs_grad(&self.nodes, *x) {
                        let src = &self.nodes[x.0].value;
                        let mut gx = Matrix::zeros(src.rows, src.cols);
                        for i in 0..src.rows {
                            gx.row_mut(i)[*start..*start + g.cols].copy_from_slice(g.row(i));
                        }
                        accumulate_owned(&mut grads, *x, gx);
                    }
                }
                Op::Sparse { x, weights } => {
                    if needs_grad(&self.nodes, *x) {
                        let src = &self.nodes[x.0].value;
                        let mut gx = Matrix::zeros(src.rows, src.cols);
                        let cols = src.cols;
                        for (i, row) in weights.iter().enumerate() {
                            for &(j, w) in row {
                                for c in 0..cols {
                                    gx.data[j * cols + c] += w * g.data[i * cols + c];
                                }
                            }
                        }
                        accumulate_owned(&mut grads, *x, gx);
                    }
                }
                Op::Project { x, basis } => {
                    if needs_grad(&self.nodes, *x) {
                        let gx = project(basis, &g);
                        accumulate_owned(&mut grads, *x, gx);
                    }
                }
                Op::Correlate(d) => self.correlate_backward(d, &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn correlate_backward(&self, d: &CorrelateData, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let inp = d.inputs;
        let ah = &self.nodes[inp.ah.0].value;
        let pos = &self.nodes[inp.pos.0].value;
        let dmat = &self.nodes[inp.d.0].value;
        let v = &self.nodes[inp.v.0].value.data;
        let beta = self.nodes[inp.beta.0].value.data[0];
        let c = ah.cols;
        let n_targets = self.nodes[inp.bg.0].value.rows;
        let inv = 1.0 / d.scale;
        let act = d.act;

        let mut g_ah = Matrix::zeros(ah.rows, c);
        let mut g_bg = Matrix::zeros(n_targets, c);
        let mut g_pos = Matrix::zeros(pos.rows, 3);
        let mut g_d = Matrix::zeros(3, c);
        let mut g_v = vec![0.0; c];
        let mut g_beta = 0.0;
        let mut g_dust = 0.0;
        let mut gw = Vec::new();
        let mut gpre = vec![0.0; c];
        let mut u = vec![0.0; c];
        for i in 0..ah.rows {
            let range = d.cand.start[i]..d.cand.start[i + 1];
            if range.is_empty() {
                continue;
            }
            let p = pos.row(i);
            let gr = g.row(i);
            let (ga, gf) = (&gr[..c], &gr[c..c + 3]);
            gw.clear();
            let mut s = 0.0;
            for (slot, &j) in range.clone().zip(d.cand.row(i)) {
                let f = d.targets[j];
                let pr = &d.pre[slot * c..(slot + 1) * c];
                let mut val = 0.0;
                for k in 0..c {
                    val += ga[k] * act.apply(pr[k]);
                }
                for a in 0..3 {
                    val += gf[a] * (f[a] - p[a]) * inv;
                }
                gw.push(val);
                s += val * d.w[slot];
            }
            if inp.dust.is_some() {
                g_dust -= d.w_dust[i] * s;
            }
            let mut gp = [0.0; 3];
            for (n, (slot, &j)) in range.zip(d.cand.row(i)).enumerate() {
                let f = d.targets[j];
                let dv = [(f[0] - p[0]) * inv, (f[1] - p[1]) * inv, (f[2] - p[2]) * inv];
                let q = dv[0] * dv[0] + dv[1] * dv[1] + dv[2] * dv[2];
                let w = d.w[slot];
                let ge = w * (gw[n] - s);
                let mut gdelta = [w * gf[0], w * gf[1], w * gf[2]];
                for a in 0..3 {
                    gdelta[a] -= 2.0 * beta * ge * dv[a];
                }
                g_beta -= ge * q;
                if inp.dust.is_some() && q < 1.0 {
                    let gt = d.unnorm[slot] * (gw[n] - s);
                    let coef = -4.0 * (1.0 - q) * gt;
                    for a in 0..3 {
                        gdelta[a] += coef * dv[a];
                    }
                }
                if w == 0.0 && ge == 0.0 {
                    for a in 0..3 {
                        gp[a] -= gdelta[a] * inv;
                    }
                    continue;
                }
                let pr = &d.pre[slot * c..(slot + 1) * c];
                for k in 0..c {
                    u[k] = act.apply(pr[k]);
                    let gu = w * ga[k] + ge * v[k];
                    g_v[k] += ge * u[k];
                    gpre[k] = gu * act.derivative(pr[k]);
                }
                let ga_row = g_ah.row_mut(i);
                for k in 0..c {
                    ga_row[k] += gpre[k];
                }
                let gb_row = g_bg.row_mut(j);
                for k in 0..c {
                    gb_row[k] += gpre[k];
                }
                for a in 0..3 {
                    let drow = &dmat.data[a * c..(a + 1) * c];
                    let gdrow = &mut g_d.data[a * c..(a + 1) * c];
                    let mut acc = 0.0;
                    for k in 0..c {
                        gdrow[k] += dv[a] * gpre[k];
                        acc += drow[k] * gpre[k];
                    }
                    gdelta[a] += acc;
                }
                for a in 0..3 {
                    gp[a] -= gdelta[a] * inv;
                }
            }
            g_pos.row_mut(i).copy_from_slice(&gp);
        }
        accumulate_owned(grads, inp.ah, g_ah);
        accumulate_owned(grads, inp.bg, g_bg);
        if needs_grad(&self.nodes, inp.pos) {
            accumulate_owned(grads, inp.pos, g_pos);
        }
        accumulate_owned(grads, inp.d, g_d);
        accumulate_owned(grads, inp.v, Matrix::from_vec(v.len(), 1, g_v));
        accumulate_owned(grads, inp.beta, Matrix::from_vec(1, 1, vec![g_beta]));
        if let Some(dn) = inp.dust {
            accumulate_owned(grads, dn, Matrix::from_vec(1, 1, vec![g_dust]));
        }
    }
}

fn project(basis: &Matrix, x: &Matrix) -> Matrix {
    assert_eq!(basis.rows, x.rows, "projection rows");
    let r = basis.cols;
    // c = Qᵀ x  (r x cols)
    let mut coef = vec![0.0; r * x.cols];
    for i in 0..x.rows {
        for a in 0..r {
            let q = basis.data[i * r + a];
            for c in 0..x.cols {
                coef[a * x.cols + c] += q * x.data[i * x.cols + c];
            }
        }
    }
    let mut out = Matrix::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        for a in 0..r {
            let q = basis.data[i * r + a];
            for c in 0..x.cols {
                out.data[i * x.cols + c] += q * coef[a * x.cols + c];
            }
        }
    }
    out
}

// Leaves never need gradient storage.
fn needs_grad(nodes: &[Node], id: NodeId) -> bool {
    !matches!(nodes[id.0].op, Op::Leaf)
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: &Matrix) {
    match &mut grads[id.0] {
        Some(m) => m.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

fn accumulate_owned(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id.0] {
        Some(m) => m.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
