//! Wengert-list tape for reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so every parent index is smaller
//! than its child's and a single reverse sweep is a valid topological order.
//! A graph supports exactly one backward pass.

use crate::error::AutodiffError;
use crate::tensor::{matmul, matmul_at, matmul_bt, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Sqrt(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Min(Var, f64),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    SliceRows(Var, usize),
    SoftmaxRows(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        /// Train mode differentiates through the batch statistics.
        batch_stats: bool,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-column statistics of a batch seen by a train-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n - 1) variance, the estimate fed into running statistics.
    pub var_unbiased: Vec<f64>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| like.zeros_like())
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Graph {
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
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that gradients are tracked for (parameters, or inputs under test).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that gradients are not tracked for.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(shape_err("matmul", av, bv));
        }
        let out = matmul(av, bv);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Adds the single row `b[1,n]` to every row of `a[m,n]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(shape_err("add_row", av, bv));
        }
        let n = av.cols();
        let mut out = av.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[i % n];
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::AddRow(a, b), rg))
    }

    /// Scales row `i` of `a[m,n]` by `b[i,0]`.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.cols() != 1 || bv.rows() != av.rows() {
            return Err(shape_err("mul_col", av, bv));
        }
        let n = av.cols();
        let mut out = av.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o *= bv.data()[i / n];
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MulCol(a, b), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(shape_err(name, av, bv));
        }
        let out = av.zip(bv, f);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Offset(a), |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Elementwise `min(a, c)`; the gradient is zero where `a > c`.
    pub fn min_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Min(a, c), |x| x.min(c))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: f64 = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Sums each row: `[m,n] -> [m,1]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.rows();
        let out: Vec<f64> = (0..m).map(|i| v.row_slice(i).iter().sum()).collect();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(m, 1, out), Op::RowSum(a), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(shape_err("concat_cols", av, bv));
        }
        let (m, p, q) = (av.rows(), av.cols(), bv.cols());
        let mut out = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            out.extend_from_slice(av.row_slice(i));
            out.extend_from_slice(bv.row_slice(i));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(m, p + q, out), Op::ConcatCols(a, b), rg))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(shape_err("concat_rows", av, bv));
        }
        let mut out = av.data().to_vec();
        out.extend_from_slice(bv.data());
        let t = Tensor::from_parts(av.rows() + bv.rows(), av.cols(), out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::ConcatRows(a, b), rg))
    }

    /// Rows `start..start + len` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        if len == 0 || start + len > av.rows() {
            return Err(AutodiffError::Shape {
                op: "slice_rows",
                lhs: av.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let n = av.cols();
        let t = Tensor::from_parts(len, n, av.data()[start * n..(start + len) * n].to_vec());
        let rg = self.rg(a);
        Ok(self.push(t, Op::SliceRows(a, start), rg))
    }

    /// Softmax over each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (m, n) = (v.rows(), v.cols());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = v.row_slice(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|&x| (x - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            out.extend(e.into_iter().map(|x| x / s));
        }
        let rg = self.rg(a);
        self.push(Tensor::from_parts(m, n, out), Op::SoftmaxRows(a), rg)
    }

    /// Batch normalization using the statistics of this batch.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats), AutodiffError> {
        let xv = self.value(x);
        let (m, d) = (xv.rows(), xv.cols());
        self.check_affine(xv, gamma, beta)?;
        if m < 2 {
            return Err(AutodiffError::DegenerateBatch(m));
        }
        let mut mean = vec![0.0; d];
        for i in 0..m {
            for (mu, v) in mean.iter_mut().zip(xv.row_slice(i)) {
                *mu += v;
            }
        }
        mean.iter_mut().for_each(|mu| *mu /= m as f64);
        let mut ss = vec![0.0; d];
        for i in 0..m {
            for ((s, v), mu) in ss.iter_mut().zip(xv.row_slice(i)).zip(&mean) {
                *s += (v - mu) * (v - mu);
            }
        }
        let inv_std: Vec<f64> = ss
            .iter()
            .map(|s| 1.0 / (s / m as f64 + eps).sqrt())
            .collect();
        let var_unbiased = ss.iter().map(|s| s / (m - 1) as f64).collect();
        let (out, xhat) = self.affine_normalize(x, gamma, beta, &mean, &inv_std);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
            rg,
        );
        Ok((v, BatchStats { mean, var_unbiased }))
    }

    /// Batch normalization with frozen statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        self.check_affine(xv, gamma, beta)?;
        if running_mean.len() != xv.cols() || running_var.len() != xv.cols() {
            return Err(AutodiffError::Shape {
                op: "batch_norm_eval",
                lhs: xv.shape().to_vec(),
                rhs: vec![running_mean.len(), running_var.len()],
            });
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, xhat) = self.affine_normalize(x, gamma, beta, running_mean, &inv_std);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
            rg,
        ))
    }

    fn check_affine(&self, xv: &Tensor, gamma: Var, beta: Var) -> Result<(), AutodiffError> {
        for p in [gamma, beta] {
            let pv = self.value(p);
            if pv.rows() != 1 || pv.cols() != xv.cols() {
                return Err(shape_err("batch_norm", xv, pv));
            }
        }
        Ok(())
    }

    fn affine_normalize(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
    ) -> (Tensor, Tensor) {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let d = xv.cols();
        let xhat: Vec<f64> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(k, v)| (v - mean[k % d]) * inv_std[k % d])
            .collect();
        let out = xhat
            .iter()
            .enumerate()
            .map(|(k, h)| h * g[k % d] + b[k % d])
            .collect();
        (
            Tensor::from_parts(xv.rows(), d, out),
            Tensor::from_parts(xv.rows(), d, xhat),
        )
    }

    /// Reverse sweep from a scalar `loss`. Callable once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, AutodiffError> {
        if self.backward_done {
            return Err(AutodiffError::BackwardTwice);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_parts(1, 1, vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let contributions = self.vjp(&node.op, &node.value, &g);
            for (parent, pg) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn vjp(&self, op: &Op, out: &Tensor, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let ga = matmul_bt(g, val(*b));
                let gb = matmul_at(val(*a), g);
                vec![(*a, ga), (*b, gb)]
            }
            Op::AddRow(a, b) => {
                let n = g.cols();
                let mut gb = vec![0.0; n];
                for (k, v) in g.data().iter().enumerate() {
                    gb[k % n] += v;
                }
                vec![(*a, g.clone()), (*b, Tensor::from_parts(1, n, gb))]
            }
            Op::MulCol(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let n = av.cols();
                let mut ga = g.clone();
                let mut gb = vec![0.0; av.rows()];
                for (k, gv) in ga.data_mut().iter_mut().enumerate() {
                    gb[k / n] += *gv * av.data()[k];
                    *gv *= bv.data()[k / n];
                }
                vec![(*a, ga), (*b, Tensor::from_parts(av.rows(), 1, gb))]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (*a, g.zip(val(*b), |gv, bv| gv * bv)),
                (*b, g.zip(val(*a), |gv, av| gv * av)),
            ],
            Op::Div(a, b) => {
                let bv = val(*b);
                let ga = g.zip(bv, |gv, bv| gv / bv);
                let gb = g.zip(out, |gv, o| gv * o).zip(bv, |t, bv| -t / bv);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, c) => vec![(*a, g.map(|x| x * c))],
            Op::Offset(a) => vec![(*a, g.clone())],
            Op::Relu(a) => vec![(*a, g.zip(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }))],
            Op::Sigmoid(a) => vec![(*a, g.zip(out, |gv, s| gv * s * (1.0 - s)))],
            Op::Log(a) => vec![(*a, g.zip(val(*a), |gv, x| gv / x))],
            Op::Exp(a) => vec![(*a, g.zip(out, |gv, e| gv * e))],
            Op::Sqrt(a) => vec![(*a, g.zip(out, |gv, s| gv * 0.5 / s))],
            Op::Square(a) => vec![(*a, g.zip(val(*a), |gv, x| 2.0 * gv * x))],
            Op::Clamp(a, lo, hi) => vec![(
                *a,
                g.zip(val(*a), |gv, x| if x >= *lo && x <= *hi { gv } else { 0.0 }),
            )],
            Op::Min(a, c) => vec![(*a, g.zip(val(*a), |gv, x| if x <= *c { gv } else { 0.0 }))],
            Op::Sum(a) => {
                let gv = g.item();
                vec![(*a, val(*a).map(|_| gv))]
            }
            Op::Mean(a) => {
                let av = val(*a);
                let gv = g.item() / av.numel() as f64;
                vec![(*a, av.map(|_| gv))]
            }
            Op::RowSum(a) => {
                let av = val(*a);
                let n = av.cols();
                let data = (0..av.numel()).map(|k| g.data()[k / n]).collect();
                vec![(*a, Tensor::from_parts(av.rows(), n, data))]
            }
            Op::ConcatCols(a, b) => {
                let (p, q) = (val(*a).cols(), val(*b).cols());
                let m = g.rows();
                let mut ga = Vec::with_capacity(m * p);
                let mut gb = Vec::with_capacity(m * q);
                for i in 0..m {
                    let row = g.row_slice(i);
                    ga.extend_from_slice(&row[..p]);
                    gb.extend_from_slice(&row[p..]);
                }
                vec![
                    (*a, Tensor::from_parts(m, p, ga)),
                    (*b, Tensor::from_parts(m, q, gb)),
                ]
            }
            Op::ConcatRows(a, b) => {
                let (ma, n) = (val(*a).rows(), g.cols());
                let ga = g.data()[..ma * n].to_vec();
                let gb = g.data()[ma * n..].to_vec();
                vec![
                    (*a, Tensor::from_parts(ma, n, ga)),
                    (*b, Tensor::from_parts(g.rows() - ma, n, gb)),
                ]
            }
            Op::SliceRows(a, start) => {
                let av = val(*a);
                let n = av.cols();
                let mut ga = av.zeros_like();
                ga.data_mut()[start * n..start * n + g.numel()].copy_from_slice(g.data());
                vec![(*a, ga)]
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = (out.rows(), out.cols());
                let mut ga = Vec::with_capacity(m * n);
                for i in 0..m {
                    let (y, gy) = (out.row_slice(i), g.row_slice(i));
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    ga.extend(y.iter().zip(gy).map(|(yv, gv)| yv * (gv - dot)));
                }
                vec![(*a, Tensor::from_parts(m, n, ga))]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (m, d) = (g.rows(), g.cols());
                let gam = val(*gamma).data();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for (k, gv) in g.data().iter().enumerate() {
                    dgamma[k % d] += gv * xhat.data()[k];
                    dbeta[k % d] += gv;
                }
                let dx: Vec<f64> = if *batch_stats {
                    // dxhat_k = g_k * gamma; dx = inv_std / m * (m dxhat - Σ dxhat - xhat Σ dxhat·xhat)
                    let mut sum_dxhat = vec![0.0; d];
                    let mut sum_dxhat_xhat = vec![0.0; d];
                    for (k, gv) in g.data().iter().enumerate() {
                        let c = k % d;
                        let dxh = gv * gam[c];
                        sum_dxhat[c] += dxh;
                        sum_dxhat_xhat[c] += dxh * xhat.data()[k];
                    }
                    let mf = m as f64;
                    g.data()
                        .iter()
                        .enumerate()
                        .map(|(k, gv)| {
                            let c = k % d;
                            let dxh = gv * gam[c];
                            inv_std[c] / mf
                                * (mf * dxh - sum_dxhat[c] - xhat.data()[k] * sum_dxhat_xhat[c])
                        })
                        .collect()
                } else {
                    g.data()
                        .iter()
                        .enumerate()
                        .map(|(k, gv)| gv * gam[k % d] * inv_std[k % d])
                        .collect()
                };
                vec![
                    (*x, Tensor::from_parts(m, d, dx)),
                    (*gamma, Tensor::from_parts(1, d, dgamma)),
                    (*beta, Tensor::from_parts(1, d, dbeta)),
                ]
            }
        }
    }
}
