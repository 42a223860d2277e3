//! Reverse-mode differentiation over a linear tape of matrix primitives.
//!
//! A `Tape` records every executed primitive in topological order; `backward`
//! replays it in reverse, accumulating gradients for every node. Parameters
//! enter as gradient-tracked leaves, constants (graph operators, data) as
//! plain leaves. One tape is single-threaded; independent tapes may run on
//! separate threads.
//!
//! ReLU uses subgradient 0 at the kink. No broadcasting beyond the row-vector
//! bias add.

use ndarray::{s, Array2, Axis};

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(TensorId, TensorId),
    Transpose(TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Hadamard(TensorId, TensorId),
    /// Matrix plus a 1xC row vector added to every row (bias).
    AddRowVec(TensorId, TensorId),
    Scale(TensorId, f64),
    Relu(TensorId),
    Sigmoid(TensorId),
    /// Sum of all entries -> 1x1.
    Sum(TensorId),
    /// Trace of a square matrix -> 1x1.
    Trace(TensorId),
    Reshape(TensorId),
    ConcatRows(Vec<TensorId>),
    ConcatCols(Vec<TensorId>),
    /// Mean squared difference over all entries -> 1x1.
    Mse(TensorId, TensorId),
    /// Sum of absolute values -> 1x1.
    L1Norm(TensorId),
    /// Sum of squared entries -> 1x1.
    SqFrobenius(TensorId),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Execution record: ordered primitives plus their values.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by `Tape::backward`.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient w.r.t. the given node. Zero tensor when the node is
    /// unreachable from the loss.
    pub fn get(&self, id: TensorId, shape: (usize, usize)) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => Tensor::from_array_unchecked(g.clone()),
            None => Tensor::zeros(shape.0, shape.1),
        }
    }

    pub fn get_opt(&self, id: TensorId) -> Option<Tensor> {
        self.grads[id.0]
            .as_ref()
            .map(|g| Tensor::from_array_unchecked(g.clone()))
    }
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

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Array2<f64>, name: &'static str) -> Result<TensorId> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            op,
            value: Tensor::from_array_unchecked(value),
        });
        Ok(TensorId(self.nodes.len() - 1))
    }

    /// Insert a constant leaf (no gradient tracked).
    pub fn constant(&mut self, t: Tensor) -> TensorId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Insert a parameter leaf (gradient tracked).
    pub fn param(&mut self, t: Tensor) -> TensorId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                left: (ar, ac),
                right: (br, bc),
            });
        }
        let v = self.nodes[a.0].value.array().dot(self.nodes[b.0].value.array());
        self.push(Op::MatMul(a, b), v, "matmul")
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let v = self.nodes[a.0].value.array().t().to_owned();
        self.push(Op::Transpose(a), v, "transpose")
    }

    fn elementwise_check(
        &self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(CoreError::ShapeMismatch {
                op,
                left: self.shape(a),
                right: self.shape(b),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_check("add", a, b)?;
        let v = self.nodes[a.0].value.array() + self.nodes[b.0].value.array();
        self.push(Op::Add(a, b), v, "add")
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_check("sub", a, b)?;
        let v = self.nodes[a.0].value.array() - self.nodes[b.0].value.array();
        self.push(Op::Sub(a, b), v, "sub")
    }

    pub fn hadamard(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_check("hadamard", a, b)?;
        let v = self.nodes[a.0].value.array() * self.nodes[b.0].value.array();
        self.push(Op::Hadamard(a, b), v, "hadamard")
    }

    /// `a` is RxC, `bias` is 1xC; bias is added to every row of `a`.
    pub fn add_row_vec(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (_, ac) = self.shape(a);
        let (br, bc) = self.shape(bias);
        if br != 1 || bc != ac {
            return Err(CoreError::ShapeMismatch {
                op: "add-row-vec",
                left: self.shape(a),
                right: (br, bc),
            });
        }
        let bias_row = self.nodes[bias.0].value.array().row(0).to_owned();
        let v = self.nodes[a.0].value.array() + &bias_row;
        self.push(Op::AddRowVec(a, bias), v, "add-row-vec")
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let v = self.nodes[a.0].value.array() * c;
        self.push(Op::Scale(a, c), v, "scale")
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let v = self.nodes[a.0].value.array().mapv(|x| x.max(0.0));
        self.push(Op::Relu(a), v, "relu")
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        let v = self.nodes[a.0].value.array().mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(Op::Sigmoid(a), v, "sigmoid")
    }

    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.nodes[a.0].value.array().sum();
        self.push(Op::Sum(a), Array2::from_elem((1, 1), s), "sum")
    }

    pub fn trace(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        if r != c {
            return Err(CoreError::ShapeMismatch {
                op: "trace",
                left: (r, c),
                right: (c, r),
            });
        }
        let t = self.nodes[a.0].value.array().diag().sum();
        self.push(Op::Trace(a), Array2::from_elem((1, 1), t), "trace")
    }

    /// Row-major reshape; used for `vec(Z)` row-vectorization.
    pub fn reshape(&mut self, a: TensorId, rows: usize, cols: usize) -> Result<TensorId> {
        let (ar, ac) = self.shape(a);
        if ar * ac != rows * cols {
            return Err(CoreError::ShapeMismatch {
                op: "reshape",
                left: (ar, ac),
                right: (rows, cols),
            });
        }
        let flat: Vec<f64> = self.nodes[a.0].value.array().iter().copied().collect();
        let v = Array2::from_shape_vec((rows, cols), flat).expect("checked size");
        self.push(Op::Reshape(a), v, "reshape")
    }

    /// Stack row-wise; all inputs must share a column count.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        let cols = self.shape(parts[0]).1;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != cols {
                return Err(CoreError::ShapeMismatch {
                    op: "concat-rows",
                    left: (total, cols),
                    right: (r, c),
                });
            }
            total += r;
        }
        let mut v = Array2::zeros((total, cols));
        let mut at = 0;
        for &p in parts {
            let a = self.nodes[p.0].value.array();
            v.slice_mut(s![at..at + a.nrows(), ..]).assign(a);
            at += a.nrows();
        }
        self.push(Op::ConcatRows(parts.to_vec()), v, "concat-rows")
    }

    /// Stack column-wise; all inputs must share a row count.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        let rows = self.shape(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(CoreError::ShapeMismatch {
                    op: "concat-cols",
                    left: (rows, total),
                    right: (r, c),
                });
            }
            total += c;
        }
        let mut v = Array2::zeros((rows, total));
        let mut at = 0;
        for &p in parts {
            let a = self.nodes[p.0].value.array();
            v.slice_mut(s![.., at..at + a.ncols()]).assign(a);
            at += a.ncols();
        }
        self.push(Op::ConcatCols(parts.to_vec()), v, "concat-cols")
    }

    pub fn mse(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId> {
        self.elementwise_check("mse", pred, target)?;
        let d = self.nodes[pred.0].value.array() - self.nodes[target.0].value.array();
        let n = d.len() as f64;
        let v = d.mapv(|x| x * x).sum() / n;
        self.push(Op::Mse(pred, target), Array2::from_elem((1, 1), v), "mse")
    }

    pub fn l1_norm(&mut self, a: TensorId) -> Result<TensorId> {
        let v = self.nodes[a.0].value.array().mapv(f64::abs).sum();
        self.push(Op::L1Norm(a), Array2::from_elem((1, 1), v), "l1-norm")
    }

    pub fn sq_frobenius(&mut self, a: TensorId) -> Result<TensorId> {
        let v = self.nodes[a.0].value.array().mapv(|x| x * x).sum();
        self.push(Op::SqFrobenius(a), Array2::from_elem((1, 1), v), "sq-frobenius")
    }

    /// Reverse pass from a scalar loss. The gradient of the loss w.r.t.
    /// itself is 1; unreachable nodes keep a `None` (zero) gradient.
    pub fn backward(&mut self, loss: TensorId) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(CoreError::ShapeMismatch {
                op: "backward",
                left: self.shape(loss),
                right: (1, 1),
            });
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].clone() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf { .. } => continue,
                Op::MatMul(a, b) => {
                    let av = self.nodes[a.0].value.array();
                    let bv = self.nodes[b.0].value.array();
                    let ga = g.dot(&bv.t());
                    let gb = av.t().dot(&g);
                    accumulate(&mut grads, a.0, ga);
                    accumulate(&mut grads, b.0, gb);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, a.0, g.t().to_owned());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a.0, g.clone());
                    accumulate(&mut grads, b.0, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, a.0, g.clone());
                    accumulate(&mut grads, b.0, -g);
                }
                Op::Hadamard(a, b) => {
                    let ga = &g * self.nodes[b.0].value.array();
                    let gb = &g * self.nodes[a.0].value.array();
                    accumulate(&mut grads, a.0, ga);
                    accumulate(&mut grads, b.0, gb);
                }
                Op::AddRowVec(a, bias) => {
                    let gbias = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, a.0, g);
                    accumulate(&mut grads, bias.0, gbias);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, a.0, &g * *c);
                }
                Op::Relu(a) => {
                    let mask = self.nodes[a.0]
                        .value
                        .array()
                        .mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, a.0, &g * &mask);
                }
                Op::Sigmoid(a) => {
                    let y = self.nodes[i].value.array();
                    let dy = y * &(1.0 - y);
                    accumulate(&mut grads, a.0, &g * &dy);
                }
                Op::Sum(a) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    accumulate(&mut grads, a.0, Array2::from_elem((r, c), g[[0, 0]]));
                }
                Op::Trace(a) => {
                    let n = self.nodes[a.0].value.rows();
                    accumulate(&mut grads, a.0, Array2::eye(n) * g[[0, 0]]);
                }
                Op::Reshape(a) => {
                    let (ar, ac) = self.nodes[a.0].value.shape();
                    let flat: Vec<f64> = g.iter().copied().collect();
                    let ga = Array2::from_shape_vec((ar, ac), flat).expect("same size");
                    accumulate(&mut grads, a.0, ga);
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut at = 0;
                    for p in parts {
                        let r = self.nodes[p.0].value.rows();
                        let gp = g.slice(s![at..at + r, ..]).to_owned();
                        accumulate(&mut grads, p.0, gp);
                        at += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut at = 0;
                    for p in parts {
                        let c = self.nodes[p.0].value.cols();
                        let gp = g.slice(s![.., at..at + c]).to_owned();
                        accumulate(&mut grads, p.0, gp);
                        at += c;
                    }
                }
                Op::Mse(a, b) => {
                    let d = self.nodes[a.0].value.array() - self.nodes[b.0].value.array();
                    let n = d.len() as f64;
                    let ga = &d * (2.0 * g[[0, 0]] / n);
                    accumulate(&mut grads, b.0, -&ga);
                    accumulate(&mut grads, a.0, ga);
                }
                Op::L1Norm(a) => {
                    let sg = self.nodes[a.0]
                        .value
                        .array()
                        .mapv(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 });
                    accumulate(&mut grads, a.0, &sg * g[[0, 0]]);
                }
                Op::SqFrobenius(a) => {
                    let ga = self.nodes[a.0].value.array() * (2.0 * g[[0, 0]]);
                    accumulate(&mut grads, a.0, ga);
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Values feeding each ReLU on the tape; used for kink-free sampling.
    pub fn relu_input_min_abs(&self) -> f64 {
        let mut min_abs = f64::INFINITY;
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                for &v in self.nodes[a.0].value.array() {
                    min_abs = min_abs.min(v.abs());
                }
            }
        }
        min_abs
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], idx: usize, g: Array2<f64>) {
    match &mut grads[idx] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Relative error between the analytic gradient of `f` at `point` and a
/// central finite difference: ||analytic - fd||_F / max(||analytic||_F,
/// ||fd||_F, 1e-12). The norm ratio keeps near-zero entries from being
/// swamped by finite-difference roundoff. `f` must rebuild its tape from
/// the given parameter value.
pub fn gradient_check<F>(point: &Tensor, eps: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    assert!(eps > 0.0);
    let (_, analytic) = f(point)?;
    let mut diff_sq = 0.0_f64;
    let mut an_sq = 0.0_f64;
    let mut cd_sq = 0.0_f64;
    let mut p = point.clone();
    for i in 0..point.rows() {
        for j in 0..point.cols() {
            let orig = p.get(i, j);
            p.set(i, j, orig + eps);
            let (up, _) = f(&p)?;
            p.set(i, j, orig - eps);
            let (down, _) = f(&p)?;
            p.set(i, j, orig);
            if !up.is_finite() || !down.is_finite() {
                return Err(CoreError::NonFinite {
                    op: "gradient-check",
                });
            }
            let cd = (up - down) / (2.0 * eps);
            let an = analytic.get(i, j);
            diff_sq += (an - cd) * (an - cd);
            an_sq += an * an;
            cd_sq += cd * cd;
        }
    }
    Ok(diff_sq.sqrt() / an_sq.sqrt().max(cd_sq.sqrt()).max(1e-12))
}
