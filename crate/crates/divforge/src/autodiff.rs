//! Reverse-mode automatic differentiation over dense double-precision
//! tensors.
//!
//! Everything is a row-major 2-d matrix: scalars are 1x1, column vectors
//! n x 1. A [`Tape`] records each primitive operation together with its
//! parents; [`Tape::backward`] replays the record once in reverse, summing
//! gradient contributions into every leaf that was registered with
//! `requires_grad`. Tapes are single-threaded and live for one forward/
//! backward pair.
//!
//! Elementwise binary ops require equal shapes, except that either operand
//! may be a 1x1 scalar; there is no other broadcasting.

use crate::{Error, Result};

/// Slope of the negative branch of leaky-relu.
pub const LEAKY_RELU_SLOPE: f64 = 0.01;

/// Dense matrix value: shape, flat row-major data, and (after a backward
/// pass) an optional gradient buffer of identical shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            });
        }
        Ok(Tensor { rows, cols, data, requires_grad: false, grad: None })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v], requires_grad: false, grad: None }
    }

    /// Column vector.
    pub fn column(data: Vec<f64>) -> Self {
        Tensor { rows: data.len(), cols: 1, data, requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// New tensor holding the given rows, in order.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor { rows: idx.len(), cols: self.cols, data, requires_grad: false, grad: None }
    }

    /// Stack `self` above `other` (column counts must match).
    pub fn vstack(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.cols {
            return Err(Error::Shape {
                op: "vstack",
                detail: format!("{}x{} over {}x{}", self.rows, self.cols, other.rows, other.cols),
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Tensor {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Put `self` left of `other` (row counts must match).
    pub fn hstack(&self, other: &Tensor) -> Result<Tensor> {
        if self.rows != other.rows {
            return Err(Error::Shape {
                op: "hstack",
                detail: format!("{}x{} beside {}x{}", self.rows, self.cols, other.rows, other.cols),
            });
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(Tensor { rows: self.rows, cols, data, requires_grad: false, grad: None })
    }
}

/// Handle to a value on a [`Tape`].
pub type VarId = usize;

/// Which axis a `concat` joins along.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    ScalarMul(VarId, f64),
    Recip(VarId),
    Matmul(VarId, VarId),
    Sum(VarId),
    Mean(VarId),
    Log(VarId),
    Exp(VarId),
    Square(VarId),
    Sigmoid(VarId),
    LogSigmoid(VarId),
    Relu(VarId),
    LeakyRelu(VarId),
    Transpose(VarId),
    Concat(VarId, VarId, Axis),
    SliceRows(VarId, usize),
    Reshape(VarId),
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    needs_grad: bool,
}

/// Numerically stable sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable log-sigmoid, `-softplus(-x)`; safe for |x| well past 30.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Ordered record of primitive operations with parent references and
/// backward rules. Nodes are appended in topological order, so one reverse
/// sweep visits each exactly once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a leaf value. Gradients accumulate into it only when the
    /// tensor had `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor) -> VarId {
        self.push(Op::Leaf, t.rows, t.cols, t.data.clone(), t.requires_grad)
    }

    /// Leaf from raw parts, avoiding a `Tensor` allocation.
    pub fn leaf_from(&mut self, rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool) -> VarId {
        self.push(Op::Leaf, rows, cols, data, requires_grad)
    }

    pub fn dims(&self, id: VarId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    pub fn value(&self, id: VarId) -> &[f64] {
        &self.nodes[id].data
    }

    /// Value of a 1x1 node.
    pub fn scalar_value(&self, id: VarId) -> f64 {
        debug_assert_eq!(self.nodes[id].data.len(), 1);
        self.nodes[id].data[0]
    }

    /// Gradient accumulated at `id`, if any flowed there.
    pub fn grad(&self, id: VarId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, data: Vec<f64>, needs_grad: bool) -> VarId {
        self.nodes.push(Node { op, rows, cols, data, needs_grad });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id].needs_grad
    }

    fn shape_err(&self, op: &'static str, a: VarId, b: VarId) -> Error {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        Error::Shape { op, detail: format!("{ar}x{ac} vs {br}x{bc}") }
    }

    // ---- elementwise binary ops (equal shapes or one 1x1 scalar) ----

    fn binary_shape(&self, op: &'static str, a: VarId, b: VarId) -> Result<(usize, usize)> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        if (ar, ac) == (br, bc) {
            Ok((ar, ac))
        } else if (ar, ac) == (1, 1) {
            Ok((br, bc))
        } else if (br, bc) == (1, 1) {
            Ok((ar, ac))
        } else {
            Err(self.shape_err(op, a, b))
        }
    }

    fn elementwise(&mut self, op: Op, a: VarId, b: VarId, f: impl Fn(f64, f64) -> f64, name: &'static str) -> Result<VarId> {
        let (rows, cols) = self.binary_shape(name, a, b)?;
        let (ad, bd) = (&self.nodes[a].data, &self.nodes[b].data);
        let n = rows * cols;
        let data = if ad.len() == 1 && n != 1 {
            bd.iter().map(|&y| f(ad[0], y)).collect()
        } else if bd.len() == 1 && n != 1 {
            ad.iter().map(|&x| f(x, bd[0])).collect()
        } else {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(op, rows, cols, data, ng))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.elementwise(Op::Add(a, b), a, b, |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.elementwise(Op::Sub(a, b), a, b, |x, y| x - y, "sub")
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.elementwise(Op::Mul(a, b), a, b, |x, y| x * y, "mul")
    }

    // ---- unary ops ----

    fn unary(&mut self, op: Op, a: VarId, f: impl Fn(f64) -> f64) -> VarId {
        let (rows, cols) = self.dims(a);
        let data = self.nodes[a].data.iter().map(|&x| f(x)).collect();
        let ng = self.needs(a);
        self.push(op, rows, cols, data, ng)
    }

    pub fn scalar_mul(&mut self, a: VarId, c: f64) -> VarId {
        self.unary(Op::ScalarMul(a, c), a, |x| c * x)
    }

    pub fn recip(&mut self, a: VarId) -> VarId {
        self.unary(Op::Recip(a), a, |x| 1.0 / x)
    }

    pub fn log(&mut self, a: VarId) -> VarId {
        self.unary(Op::Log(a), a, f64::ln)
    }

    pub fn exp(&mut self, a: VarId) -> VarId {
        self.unary(Op::Exp(a), a, f64::exp)
    }

    pub fn square(&mut self, a: VarId) -> VarId {
        self.unary(Op::Square(a), a, |x| x * x)
    }

    pub fn sigmoid_op(&mut self, a: VarId) -> VarId {
        self.unary(Op::Sigmoid(a), a, sigmoid)
    }

    pub fn log_sigmoid_op(&mut self, a: VarId) -> VarId {
        self.unary(Op::LogSigmoid(a), a, log_sigmoid)
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        self.unary(Op::Relu(a), a, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, a: VarId) -> VarId {
        self.unary(Op::LeakyRelu(a), a, |x| if x > 0.0 { x } else { LEAKY_RELU_SLOPE * x })
    }

    // ---- structural ops ----

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, ka) = self.dims(a);
        let (kb, n) = self.dims(b);
        if ka != kb {
            return Err(self.shape_err("matmul", a, b));
        }
        let data = crate::mat::matmul(&self.nodes[a].data, &self.nodes[b].data, m, ka, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a, b), m, n, data, ng))
    }

    pub fn sum(&mut self, a: VarId) -> VarId {
        let s: f64 = self.nodes[a].data.iter().sum();
        let ng = self.needs(a);
        self.push(Op::Sum(a), 1, 1, vec![s], ng)
    }

    pub fn mean(&mut self, a: VarId) -> VarId {
        let n = self.nodes[a].data.len();
        let s: f64 = self.nodes[a].data.iter().sum();
        let ng = self.needs(a);
        self.push(Op::Mean(a), 1, 1, vec![s / n as f64], ng)
    }

    pub fn transpose(&mut self, a: VarId) -> VarId {
        let (r, c) = self.dims(a);
        let data = crate::mat::transpose(&self.nodes[a].data, r, c);
        let ng = self.needs(a);
        self.push(Op::Transpose(a), c, r, data, ng)
    }

    pub fn concat(&mut self, a: VarId, b: VarId, axis: Axis) -> Result<VarId> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        match axis {
            Axis::Rows => {
                if ac != bc {
                    return Err(self.shape_err("concat rows", a, b));
                }
                let mut data = self.nodes[a].data.clone();
                data.extend_from_slice(&self.nodes[b].data);
                let ng = self.needs(a) || self.needs(b);
                Ok(self.push(Op::Concat(a, b, axis), ar + br, ac, data, ng))
            }
            Axis::Cols => {
                if ar != br {
                    return Err(self.shape_err("concat cols", a, b));
                }
                let cols = ac + bc;
                let mut data = Vec::with_capacity(ar * cols);
                for i in 0..ar {
                    data.extend_from_slice(&self.nodes[a].data[i * ac..(i + 1) * ac]);
                    data.extend_from_slice(&self.nodes[b].data[i * bc..(i + 1) * bc]);
                }
                let ng = self.needs(a) || self.needs(b);
                Ok(self.push(Op::Concat(a, b, axis), ar, cols, data, ng))
            }
        }
    }

    pub fn slice_rows(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId> {
        let (r, c) = self.dims(a);
        if start + len > r || len == 0 {
            return Err(Error::Shape {
                op: "slice_rows",
                detail: format!("rows {start}..{} of a {r}x{c} matrix", start + len),
            });
        }
        let data = self.nodes[a].data[start * c..(start + len) * c].to_vec();
        let ng = self.needs(a);
        Ok(self.push(Op::SliceRows(a, start), len, c, data, ng))
    }

    pub fn reshape(&mut self, a: VarId, rows: usize, cols: usize) -> Result<VarId> {
        let (r, c) = self.dims(a);
        if rows * cols != r * c {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{r}x{c} to {rows}x{cols}"),
            });
        }
        let data = self.nodes[a].data.clone();
        let ng = self.needs(a);
        Ok(self.push(Op::Reshape(a), rows, cols, data, ng))
    }

    // ---- backward ----

    fn accumulate(&mut self, id: VarId, contrib: &[f64]) {
        match &mut self.grads[id] {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => self.grads[id] = Some(contrib.to_vec()),
        }
    }

    /// Accumulate into a binary operand, reducing to a scalar when the
    /// operand was broadcast.
    fn accumulate_binary(&mut self, id: VarId, contrib: Vec<f64>) {
        let n = self.nodes[id].data.len();
        if n == 1 && contrib.len() != 1 {
            let s: f64 = contrib.iter().sum();
            self.accumulate(id, &[s]);
        } else {
            self.accumulate(id, &contrib);
        }
    }

    /// Run the reverse sweep from a scalar root. Every `requires_grad` leaf
    /// that the root depends on ends up with d(root)/d(leaf) in
    /// [`Tape::grad`]; gradients from multiple uses accumulate additively.
    pub fn backward(&mut self, root: VarId) -> Result<()> {
        let (r, c) = self.dims(root);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarRoot { rows: r, cols: c });
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[root] = Some(vec![1.0]);

        for i in (0..=root).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dout) = self.grads[i].clone() else { continue };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if self.needs(a) {
                        self.accumulate_binary(a, dout.clone());
                    }
                    if self.needs(b) {
                        self.accumulate_binary(b, dout);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(a) {
                        self.accumulate_binary(a, dout.clone());
                    }
                    if self.needs(b) {
                        self.accumulate_binary(b, dout.iter().map(|d| -d).collect());
                    }
                }
                Op::Mul(a, b) => {
                    let broadcast = |vals: &[f64], n: usize, j: usize| -> f64 {
                        if vals.len() == 1 && n != 1 {
                            vals[0]
                        } else {
                            vals[j]
                        }
                    };
                    let n = dout.len();
                    if self.needs(a) {
                        let bvals = &self.nodes[b].data;
                        let contrib: Vec<f64> =
                            (0..n).map(|j| dout[j] * broadcast(bvals, n, j)).collect();
                        self.accumulate_binary(a, contrib);
                    }
                    if self.needs(b) {
                        let avals = &self.nodes[a].data;
                        let contrib: Vec<f64> =
                            (0..n).map(|j| dout[j] * broadcast(avals, n, j)).collect();
                        self.accumulate_binary(b, contrib);
                    }
                }
                Op::ScalarMul(a, cst) => {
                    if self.needs(a) {
                        self.accumulate(a, &dout.iter().map(|d| cst * d).collect::<Vec<_>>());
                    }
                }
                Op::Recip(a) => {
                    if self.needs(a) {
                        let y = &self.nodes[i].data;
                        let contrib: Vec<f64> =
                            dout.iter().zip(y).map(|(d, yi)| -d * yi * yi).collect();
                        self.accumulate(a, &contrib);
                    }
                }
                Op::Matmul(a, b) => {
                    let (m, k) = self.dims(a);
                    let (_, n) = self.dims(b);
                    if self.needs(a) {
                        let da = crate::mat::matmul_nt(&dout, &self.nodes[b].data, m, n, k);
                        self.accumulate(a, &da);
                    }
                    if self.needs(b) {
                        let db = crate::mat::matmul_tn(&self.nodes[a].data, &dout, m, k, n);
                        self.accumulate(b, &db);
                    }
                }
                Op::Sum(a) => {
                    if self.needs(a) {
                        let n = self.nodes[a].data.len();
                        self.accumulate(a, &vec![dout[0]; n]);
                    }
                }
                Op::Mean(a) => {
                    if self.needs(a) {
                        let n = self.nodes[a].data.len();
                        self.accumulate(a, &vec![dout[0] / n as f64; n]);
                    }
                }
                Op::Log(a) => {
                    if self.needs(a) {
                        let x = &self.nodes[a].data;
                        let contrib: Vec<f64> = dout.iter().zip(x).map(|(d, xi)| d / xi).collect();
                        self.accumulate(a, &contrib);
                    }
                }
                Op::Exp(a) => {
                    if self.needs(a) {
                        let y = &self.nodes[i].data;
                        let contrib: Vec<f64> = dout.iter().zip(y).map(|(d, yi)| d * yi).collect();
                        self.accumulate(a, &contrib);
                    }
                }
                Op::Square(a) => {
                    if self.needs(a) {
                        let x = &self.nodes[a].data;
                        let contrib: Vec<f64> =
                            dout.iter().zip(x).map(|(d, xi)| 2.0 * d * xi).collect();
                        self.accumulate(a, &contrib);
                    }
                }
                Op::Sigmoid(a) => {
                    if self.needs(a) {
                        let y = &self.nodes[i].data;
                        let contrib: Vec<f64> =
                            dout.iter().zip(y).map(|(d, s)| d * s * (1.0 - s)).collect();
                        self.accumulate(a, &contrib);
                    }
                }
                Op::LogSigmoid(a) => {
                    // d/dx log sigmoid = sigmoid(-x), always in (0, 1)
                    if self.needs(a) {
                        let x = &self.nodes[a].data;
                        let contrib: Vec<f64> =
                            dout.iter().zip(x).map(|(d, xi)| d * sigmoid(-xi)).collect();
                        self.accumulate(a, &contrib);
                    }
                }
                Op::Relu(a) => {
                    // subgradient at 0 is 0
                    if self.needs(a) {
                        let x = &self.nodes[a].data;
                        let contrib: Vec<f64> = dout
                            .iter()
                            .zip(x)
                            .map(|(d, xi)| if *xi > 0.0 { *d } else { 0.0 })
                            .collect();
                        self.accumulate(a, &contrib);
                    }
                }
                Op::LeakyRelu(a) => {
                    // subgradient at 0 is 0, as for relu
                    if self.needs(a) {
                        let x = &self.nodes[a].data;
                        let contrib: Vec<f64> = dout
                            .iter()
                            .zip(x)
                            .map(|(d, xi)| {
                                if *xi > 0.0 {
                                    *d
                                } else if *xi < 0.0 {
                                    LEAKY_RELU_SLOPE * d
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        self.accumulate(a, &contrib);
                    }
                }
                Op::Transpose(a) => {
                    if self.needs(a) {
                        let (or, oc) = self.dims(i);
                        let da = crate::mat::transpose(&dout, or, oc);
                        self.accumulate(a, &da);
                    }
                }
                Op::Concat(a, b, axis) => {
                    let (ar, ac) = self.dims(a);
                    let (br, bc) = self.dims(b);
                    match axis {
                        Axis::Rows => {
                            if self.needs(a) {
                                self.accumulate(a, &dout[..ar * ac]);
                            }
                            if self.needs(b) {
                                self.accumulate(b, &dout[ar * ac..]);
                            }
                        }
                        Axis::Cols => {
                            let cols = ac + bc;
                            if self.needs(a) {
                                let mut da = Vec::with_capacity(ar * ac);
                                for r in 0..ar {
                                    da.extend_from_slice(&dout[r * cols..r * cols + ac]);
                                }
                                self.accumulate(a, &da);
                            }
                            if self.needs(b) {
                                let mut db = Vec::with_capacity(br * bc);
                                for r in 0..br {
                                    db.extend_from_slice(&dout[r * cols + ac..(r + 1) * cols]);
                                }
                                self.accumulate(b, &db);
                            }
                        }
                    }
                }
                Op::SliceRows(a, start) => {
                    if self.needs(a) {
                        let (ar, ac) = self.dims(a);
                        let mut da = vec![0.0; ar * ac];
                        da[start * ac..start * ac + dout.len()].copy_from_slice(&dout);
                        self.accumulate(a, &da);
                    }
                }
                Op::Reshape(a) => {
                    if self.needs(a) {
                        self.accumulate(a, &dout);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Max relative disagreement between analytic gradients and central finite
/// differences of `f` at `point`:
/// `max_i |analytic_i - fd_i| / (|analytic_i| + 1e-12)`.
///
/// `f` must build a scalar from the single input var and be a pure function
/// of the tape values it is given.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, VarId) -> Result<VarId>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut tape = Tape::new();
    let mut p = point.clone();
    p.requires_grad = true;
    let x = tape.leaf(&p);
    let root = f(&mut tape, x)?;
    tape.backward(root)?;
    let analytic = tape
        .grad(x)
        .ok_or(Error::NonFiniteGradCheck { coordinate: 0 })?
        .to_vec();

    let eval = |coord: usize, v: f64| -> Result<f64> {
        let mut t = Tape::new();
        let mut q = point.clone();
        q.requires_grad = false;
        q.data[coord] = v;
        let id = t.leaf(&q);
        let r = f(&mut t, id)?;
        Ok(t.scalar_value(r))
    };

    let mut max_rel: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let fp = eval(i, point.data[i] + step)?;
        let fm = eval(i, point.data[i] - step)?;
        let fd = (fp - fm) / (2.0 * step);
        if !fd.is_finite() || !a.is_finite() {
            return Err(Error::NonFiniteGradCheck { coordinate: i });
        }
        max_rel = max_rel.max((a - fd).abs() / (a.abs() + 1e-12));
    }
    Ok(max_rel)
}
