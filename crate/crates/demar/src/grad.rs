//! Reverse-mode automatic differentiation over dense f64 blocks.
//!
//! A [`Tape`] is a flat arena of nodes recorded during the forward pass and
//! replayed in reverse for backpropagation. Node ids are topologically
//! ordered by construction, so [`Tape::backward`] is a single reverse sweep
//! that visits each node exactly once. A tape is single-threaded; distinct
//! tapes (one per ensemble member, say) may live on distinct threads.
//!
//! The op set is exactly what the networks here need: matrix products,
//! broadcast adds, ELU/ReLU/|x|/x², per-row reductions, gathers/slices and
//! full-mean losses. Gradients accumulate additively; running backward twice
//! without [`Tape::zero_grad`] doubles every gradient.

use crate::error::{Error, Result};
use crate::mat::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// a[r×c] + row[1×c], broadcast over rows.
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// a[r×c] * col[r×1], broadcast over columns.
    MulCol(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Elu(NodeId, f64),
    Abs(NodeId),
    Square(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize),
    /// One column index per row; output is r×1.
    GatherCols(NodeId, Vec<usize>),
    RowSum(NodeId),
    /// Per-row argmin/argmax recorded at forward time; ties take the lowest
    /// index so backward routing is deterministic.
    RowMin(NodeId, Vec<usize>),
    RowMax(NodeId, Vec<usize>),
    MeanAll(NodeId),
    SumAll(NodeId),
}

struct Node {
    value: Mat,
    grad: Option<Mat>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> NodeId {
        let grad = requires_grad.then(|| Mat::zeros(value.rows(), value.cols()));
        self.nodes.push(Node { value, grad, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    /// Gradient of the node; all-zeros until backward reaches it.
    pub fn grad(&self, id: NodeId) -> Option<&Mat> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.fill(0.0);
            }
        }
    }

    // ---- graph construction ------------------------------------------------

    /// Differentiable input (parameter values are copied onto the tape).
    pub fn leaf(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input; backward never flows into it.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != br {
            return Err(Error::shape("matmul", format!("{ar}x{ac} @ {br}x{bc}")));
        }
        let mut out = Mat::zeros(ar, bc);
        matmul_acc(&mut out, self.value(a), self.value(b));
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Matmul(a, b), req))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(Error::shape("add", format!("{:?} vs {:?}", sa, sb)));
        }
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Add(a, b), req))
    }

    /// a + row, broadcasting the 1×c row over every row of a.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.value(a).shape();
        let (rr, rc) = self.value(row).shape();
        if rr != 1 || rc != ac {
            return Err(Error::shape("add_row", format!("{ar}x{ac} + {rr}x{rc}")));
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..ar {
            for (o, &x) in out.row_slice_mut(i).iter_mut().zip(&r) {
                *o += x;
            }
        }
        let req = self.requires(a) || self.requires(row);
        Ok(self.push(out, Op::AddRow(a, row), req))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(Error::shape("sub", format!("{:?} vs {:?}", sa, sb)));
        }
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Sub(a, b), req))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", sa, sb)));
        }
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Mul(a, b), req))
    }

    /// a * col, broadcasting the r×1 column over every column of a.
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.value(a).shape();
        let (cr, cc) = self.value(col).shape();
        if cc != 1 || cr != ar {
            return Err(Error::shape("mul_col", format!("{ar}x{ac} * {cr}x{cc}")));
        }
        let mut out = self.value(a).clone();
        let c = self.value(col).data().to_vec();
        for i in 0..ar {
            let v = c[i];
            for o in out.row_slice_mut(i) {
                *o *= v;
            }
        }
        let req = self.requires(a) || self.requires(col);
        Ok(self.push(out, Op::MulCol(a, col), req))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a).map(|x| c * x);
        let req = self.requires(a);
        self.push(out, Op::Scale(a, c), req)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let req = self.requires(a);
        self.push(out, Op::Relu(a), req)
    }

    /// Exponential linear unit: x for x > 0, alpha·(eˣ − 1) otherwise.
    pub fn elu(&mut self, a: NodeId, alpha: f64) -> NodeId {
        debug_assert!(alpha > 0.0);
        let out = self.value(a).map(|x| elu_scalar(x, alpha));
        let req = self.requires(a);
        self.push(out, Op::Elu(a, alpha), req)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f64::abs);
        let req = self.requires(a);
        self.push(out, Op::Abs(a), req)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| x * x);
        let req = self.requires(a);
        self.push(out, Op::Square(a), req)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs".to_string()));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.value(p).shape();
            if r != rows {
                return Err(Error::shape("concat_cols", format!("{rows} rows vs {r} rows")));
            }
            cols += c;
        }
        let mut out = Mat::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row_slice(i);
                out.row_slice_mut(i)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), req))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.value(a).shape();
        if start + len > cols {
            return Err(Error::shape("slice_cols", format!("[{start}, {}) of {rows}x{cols}", start + len)));
        }
        let mut out = Mat::zeros(rows, len);
        for i in 0..rows {
            out.row_slice_mut(i).copy_from_slice(&self.value(a).row_slice(i)[start..start + len]);
        }
        let req = self.requires(a);
        Ok(self.push(out, Op::SliceCols(a, start), req))
    }

    /// Select one entry per row: out[i] = a[i, idx[i]].
    pub fn gather_cols(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.value(a).shape();
        if idx.len() != rows || idx.iter().any(|&j| j >= cols) {
            return Err(Error::shape("gather_cols", format!("{} indices into {rows}x{cols}", idx.len())));
        }
        let data: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| self.value(a).at(i, j)).collect();
        let req = self.requires(a);
        Ok(self.push(Mat::col(data), Op::GatherCols(a, idx.to_vec()), req))
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let rows = self.value(a).rows();
        let data: Vec<f64> = (0..rows).map(|i| self.value(a).row_slice(i).iter().sum()).collect();
        let req = self.requires(a);
        self.push(Mat::col(data), Op::RowSum(a), req)
    }

    pub fn row_min(&mut self, a: NodeId) -> NodeId {
        let (vals, args) = row_extreme(self.value(a), |x, best| x < best);
        let req = self.requires(a);
        self.push(Mat::col(vals), Op::RowMin(a, args), req)
    }

    pub fn row_max(&mut self, a: NodeId) -> NodeId {
        let (vals, args) = row_extreme(self.value(a), |x, best| x > best);
        let req = self.requires(a);
        self.push(Mat::col(vals), Op::RowMax(a, args), req)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        let req = self.requires(a);
        self.push(Mat::scalar(s / n), Op::MeanAll(a), req)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        let req = self.requires(a);
        self.push(Mat::scalar(s), Op::SumAll(a), req)
    }

    // ---- backward ----------------------------------------------------------

    /// Backpropagate from a scalar root. The sweep runs on a transient flow
    /// table so intermediate gradients are not double-counted; the resulting
    /// flow is then added into each node's persistent gradient, making
    /// repeated backward calls accumulate additively.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.value(root).is_scalar() {
            let (r, c) = self.value(root).shape();
            return Err(Error::shape("backward", format!("root must be 1x1, got {r}x{c}")));
        }
        if !self.requires(root) {
            return Ok(());
        }
        let mut flow: Vec<Option<Mat>> = (0..=root.0).map(|_| None).collect();
        flow[root.0] = Some(Mat::scalar(1.0));
        for i in (0..=root.0).rev() {
            let g = match flow[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.push_flow(i, &g, &mut flow);
            if let Some(pg) = self.nodes[i].grad.as_mut() {
                for (o, &s) in pg.data_mut().iter_mut().zip(g.data()) {
                    *o += s;
                }
            }
        }
        Ok(())
    }

    /// Slot in the flow table for a parent, lazily allocated; None when the
    /// parent does not require grad.
    fn slot<'f>(&self, flow: &'f mut [Option<Mat>], p: NodeId) -> Option<&'f mut Mat> {
        if !self.requires(p) {
            return None;
        }
        let (r, c) = self.value(p).shape();
        Some(flow[p.0].get_or_insert_with(|| Mat::zeros(r, c)))
    }

    fn acc_slot(&self, flow: &mut [Option<Mat>], p: NodeId, src: &[f64]) {
        if let Some(g) = self.slot(flow, p) {
            for (o, &s) in g.data_mut().iter_mut().zip(src) {
                *o += s;
            }
        }
    }

    fn push_flow(&self, i: usize, grad: &Mat, flow: &mut [Option<Mat>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if let Some(ga) = self.slot(flow, *a) {
                    matmul_nt_acc(ga, grad, &self.nodes[b.0].value);
                }
                if let Some(gb) = self.slot(flow, *b) {
                    matmul_tn_acc(gb, &self.nodes[a.0].value, grad);
                }
            }
            Op::Add(a, b) => {
                self.acc_slot(flow, *a, grad.data());
                self.acc_slot(flow, *b, grad.data());
            }
            Op::AddRow(a, row) => {
                self.acc_slot(flow, *a, grad.data());
                if let Some(gr) = self.slot(flow, *row) {
                    let cols = gr.cols();
                    for (k, &g) in grad.data().iter().enumerate() {
                        let j = k % cols;
                        let v = gr.at(0, j);
                        gr.set(0, j, v + g);
                    }
                }
            }
            Op::Sub(a, b) => {
                self.acc_slot(flow, *a, grad.data());
                if let Some(gb) = self.slot(flow, *b) {
                    for (o, &g) in gb.data_mut().iter_mut().zip(grad.data()) {
                        *o -= g;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.requires(*a) {
                    let scaled: Vec<f64> =
                        grad.data().iter().zip(self.nodes[b.0].value.data()).map(|(&g, &y)| g * y).collect();
                    self.acc_slot(flow, *a, &scaled);
                }
                if self.requires(*b) {
                    let scaled: Vec<f64> =
                        grad.data().iter().zip(self.nodes[a.0].value.data()).map(|(&g, &x)| g * x).collect();
                    self.acc_slot(flow, *b, &scaled);
                }
            }
            Op::MulCol(a, col) => {
                let (rows, cols) = grad.shape();
                if self.requires(*a) {
                    let cv = &self.nodes[col.0].value;
                    let mut scaled = Mat::zeros(rows, cols);
                    for i in 0..rows {
                        let v = cv.at(i, 0);
                        for (o, &g) in scaled.row_slice_mut(i).iter_mut().zip(grad.row_slice(i)) {
                            *o = g * v;
                        }
                    }
                    self.acc_slot(flow, *a, scaled.data());
                }
                if self.requires(*col) {
                    let av = &self.nodes[a.0].value;
                    let mut scaled = vec![0.0; rows];
                    for (i, s) in scaled.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for j in 0..cols {
                            acc += grad.at(i, j) * av.at(i, j);
                        }
                        *s = acc;
                    }
                    self.acc_slot(flow, *col, &scaled);
                }
            }
            Op::Scale(a, c) => {
                let scaled: Vec<f64> = grad.data().iter().map(|&g| g * c).collect();
                self.acc_slot(flow, *a, &scaled);
            }
            Op::Relu(a) => {
                let mask: Vec<f64> = self.nodes[a.0]
                    .value
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                self.acc_slot(flow, *a, &mask);
            }
            Op::Elu(a, alpha) => {
                // d/dx = 1 for x > 0, alpha*e^x (= output + alpha) otherwise.
                let out = &self.nodes[i].value;
                let scaled: Vec<f64> = self.nodes[a.0]
                    .value
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(grad.data())
                    .map(|((&x, &o), &g)| if x > 0.0 { g } else { g * (o + alpha) })
                    .collect();
                self.acc_slot(flow, *a, &scaled);
            }
            Op::Abs(a) => {
                let scaled: Vec<f64> = self.nodes[a.0]
                    .value
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&x, &g)| g * sign(x))
                    .collect();
                self.acc_slot(flow, *a, &scaled);
            }
            Op::Square(a) => {
                let scaled: Vec<f64> = self.nodes[a.0]
                    .value
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&x, &g)| 2.0 * x * g)
                    .collect();
                self.acc_slot(flow, *a, &scaled);
            }
            Op::ConcatCols(parts) => {
                let rows = grad.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    if let Some(gp) = self.slot(flow, p) {
                        for i in 0..rows {
                            for (o, &g) in gp.row_slice_mut(i).iter_mut().zip(&grad.row_slice(i)[off..off + w]) {
                                *o += g;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                if let Some(ga) = self.slot(flow, *a) {
                    for i in 0..grad.rows() {
                        for (j, &g) in grad.row_slice(i).iter().enumerate() {
                            let v = ga.at(i, start + j);
                            ga.set(i, start + j, v + g);
                        }
                    }
                }
            }
            Op::GatherCols(a, idx) => {
                if let Some(ga) = self.slot(flow, *a) {
                    for (i, &j) in idx.iter().enumerate() {
                        let v = ga.at(i, j);
                        ga.set(i, j, v + grad.at(i, 0));
                    }
                }
            }
            Op::RowSum(a) => {
                if let Some(ga) = self.slot(flow, *a) {
                    for i in 0..grad.rows() {
                        let g = grad.at(i, 0);
                        for o in ga.row_slice_mut(i) {
                            *o += g;
                        }
                    }
                }
            }
            Op::RowMin(a, args) | Op::RowMax(a, args) => {
                if let Some(ga) = self.slot(flow, *a) {
                    for (i, &j) in args.iter().enumerate() {
                        let v = ga.at(i, j);
                        ga.set(i, j, v + grad.at(i, 0));
                    }
                }
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                let g = grad.at(0, 0) / n;
                if let Some(ga) = self.slot(flow, *a) {
                    for o in ga.data_mut() {
                        *o += g;
                    }
                }
            }
            Op::SumAll(a) => {
                let g = grad.at(0, 0);
                if let Some(ga) = self.slot(flow, *a) {
                    for o in ga.data_mut() {
                        *o += g;
                    }
                }
            }
        }
    }
}

#[inline]
pub fn elu_scalar(x: f64, alpha: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        alpha * (x.exp() - 1.0)
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip_map(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    Mat::from_vec(
        a.rows(),
        a.cols(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn row_extreme(m: &Mat, better: impl Fn(f64, f64) -> bool) -> (Vec<f64>, Vec<usize>) {
    let mut vals = Vec::with_capacity(m.rows());
    let mut args = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let row = m.row_slice(i);
        let mut best = row[0];
        let mut arg = 0;
        for (j, &x) in row.iter().enumerate().skip(1) {
            if better(x, best) {
                best = x;
                arg = j;
            }
        }
        vals.push(best);
        args.push(arg);
    }
    (vals, args)
}

/// A named trainable parameter: a value block plus a persistent gradient
/// slot that tape backward passes are harvested into.
#[derive(Clone, Debug)]
pub struct ParamBlock {
    pub id: String,
    pub value: Mat,
    pub grad: Mat,
}

impl ParamBlock {
    pub fn new(id: impl Into<String>, value: Mat) -> Self {
        let grad = Mat::zeros(value.rows(), value.cols());
        ParamBlock { id: id.into(), value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

pub struct FdReport {
    pub max_rel_err: f64,
    pub passed: bool,
    pub entries_checked: usize,
}

/// Central-difference check of tape gradients: builds the graph once for the
/// analytic gradients, then perturbs every parameter entry by ±h and compares
/// (f(p+h) − f(p−h)) / 2h entrywise. Relative error uses an absolute floor of
/// 1e-8 so near-zero gradients do not blow the quotient up.
pub fn finite_diff_check<F>(params: &mut [ParamBlock], f: F, h: f64, tol: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    assert!(h > 0.0);
    let eval = |params: &[ParamBlock]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = params.iter().map(|p| tape.constant(p.value.clone())).collect();
        let root = f(&mut tape, &leaves)?;
        let v = tape.value(root).scalar_value();
        if !v.is_finite() {
            return Err(Error::NonFinite("finite_diff_check objective".to_string()));
        }
        Ok(v)
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let leaves: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.value.clone())).collect();
    let root = f(&mut tape, &leaves)?;
    if !tape.value(root).scalar_value().is_finite() {
        return Err(Error::NonFinite("finite_diff_check objective".to_string()));
    }
    tape.backward(root)?;
    let analytic: Vec<Mat> = leaves
        .iter()
        .map(|&l| tape.grad(l).cloned().expect("leaf requires grad"))
        .collect();

    let mut max_rel = 0.0f64;
    let mut checked = 0;
    for pi in 0..params.len() {
        for j in 0..params[pi].value.len() {
            let orig = params[pi].value.data()[j];
            params[pi].value.data_mut()[j] = orig + h;
            let fp = eval(params)?;
            params[pi].value.data_mut()[j] = orig - h;
            let fm = eval(params)?;
            params[pi].value.data_mut()[j] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let ad = analytic[pi].data()[j];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    Ok(FdReport { max_rel_err: max_rel, passed: max_rel <= tol, entries_checked: checked })
}
