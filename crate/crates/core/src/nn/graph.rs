//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and returns gradients for all
//! parameters that took part in the computation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::gemm;
use super::{ParamId, ParamStore, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Clamp applied to predictions inside the binary divergence term.
pub const PROB_EPS: f64 = 1e-8;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    Lerp {
        gate: Var,
        a: Var,
        b: Var,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        lo: usize,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        lo: usize,
    },
    Reshape(Var),
    BroadcastRows(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Im2Col1d {
        x: Var,
        kernel: usize,
        dilation: usize,
        pad_left: usize,
    },
    Im2Col2d {
        x: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    SpecLoss {
        pred: Var,
        target: Tensor,
        row_mask: Option<Vec<bool>>,
        norm: f64,
    },
    WeightedSum {
        x: Var,
        weights: Tensor,
    },
}

struct Node {
    op: Op,
    value: Option<Tensor>,
    needs_grad: bool,
}

struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].as_ref()
    }

    pub fn node(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    pub fn into_params(self) -> Vec<Option<Tensor>> {
        self.params
    }
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
    dropout: Option<Dropout>,
}

impl<'p> Graph<'p> {
    /// Evaluation-mode graph: dropout disabled.
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
            dropout: None,
        }
    }

    /// Training-mode graph with inverted dropout at `rate`.
    pub fn training(params: &'p ParamStore, rate: f64, rng: ChaCha8Rng) -> Self {
        let mut g = Self::new(params);
        if rate > 0.0 {
            g.dropout = Some(Dropout { rate, rng });
        }
        g
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.get(*id),
            _ => self.nodes[v.0]
                .value
                .as_ref()
                .expect("non-parameter node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; gradients are not tracked through it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Some(t),
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is recorded by [`Graph::backward`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Some(t),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        assert_eq!(
            k,
            bv.rows(),
            "matmul inner dims {:?} x {:?}",
            av.shape(),
            bv.shape()
        );
        let n = bv.cols();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), (k, 1), bv.data(), (n, 1), &mut out, 0.0);
        self.push(
            Op::MatMul {
                a,
                b,
                trans_b: false,
            },
            Tensor::new(&[m, n], out),
            &[a, b],
        )
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        assert_eq!(
            k,
            bv.cols(),
            "matmul_t dims {:?} x {:?}^T",
            av.shape(),
            bv.shape()
        );
        let n = bv.rows();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), (k, 1), bv.data(), (1, k), &mut out, 0.0);
        self.push(
            Op::MatMul {
                a,
                b,
                trans_b: true,
            },
            Tensor::new(&[m, n], out),
            &[a, b],
        )
    }

    /// Adds a bias vector to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(bias);
        let n = xv.cols();
        assert_eq!(bv.len(), n, "bias length");
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.push(Op::AddBias { x, bias }, out, &[x, bias])
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(av.shape(), data);
        self.push(op, out, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(Op::Scale(x, s), out, &[x])
    }

    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), c.shape());
        let data = xv.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let out = Tensor::new(xv.shape(), data);
        self.push(Op::MulConst(x, c), out, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid(x), out, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(Op::Tanh(x), out, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), out, &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let n = out.cols();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push(Op::SoftmaxRows(x), out, &[x])
    }

    /// `gate * a + (1 - gate) * b`, element-wise.
    pub fn lerp(&mut self, gate: Var, a: Var, b: Var) -> Var {
        let (gv, av, bv) = (self.value(gate), self.value(a), self.value(b));
        assert_eq!(gv.shape(), av.shape());
        assert_eq!(gv.shape(), bv.shape());
        let data = gv
            .data()
            .iter()
            .zip(av.data().iter().zip(bv.data()))
            .map(|(&g, (&x, &y))| g * x + (1.0 - g) * y)
            .collect();
        let out = Tensor::new(gv.shape(), data);
        self.push(Op::Lerp { gate, a, b }, out, &[gate, a, b])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.value(p).rows(), rows, "concat_cols row mismatch");
                self.value(p).cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor::new(&[rows, total], data),
            parts,
        )
    }

    pub fn slice_cols(&mut self, x: Var, lo: usize, hi: usize) -> Var {
        let xv = self.value(x);
        assert!(lo < hi && hi <= xv.cols());
        let mut data = Vec::with_capacity(xv.rows() * (hi - lo));
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[lo..hi]);
        }
        let out = Tensor::new(&[xv.rows(), hi - lo], data);
        self.push(Op::SliceCols { x, lo }, out, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows col mismatch");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        self.push(
            Op::ConcatRows(parts.to_vec()),
            Tensor::new(&[rows, cols], data),
            parts,
        )
    }

    pub fn slice_rows(&mut self, x: Var, lo: usize, hi: usize) -> Var {
        let out = self.value(x).slice_rows(lo, hi);
        self.push(Op::SliceRows { x, lo }, out, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        self.push(Op::Reshape(x), out, &[x])
    }

    /// Repeats a single-row tensor `rows` times.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Var {
        let xv = self.value(x);
        let n = xv.len();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(xv.data());
        }
        let out = Tensor::new(&[rows, n], data);
        self.push(Op::BroadcastRows(x), out, &[x])
    }

    /// Row lookup (embedding).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let n = tv.cols();
        let mut data = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::new(&[ids.len(), n], data);
        self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            out,
            &[table],
        )
    }

    /// Unfolds a `T x C` sequence into `T x (kernel*C)` patches so a 1-D
    /// convolution becomes one matrix product. Positions outside the input
    /// read as zero; the output keeps the input length.
    pub fn im2col_1d(&mut self, x: Var, kernel: usize, dilation: usize, pad_left: usize) -> Var {
        let xv = self.value(x);
        let (t_len, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; t_len * kernel * c];
        for t in 0..t_len {
            for j in 0..kernel {
                let src = t as isize - pad_left as isize + (j * dilation) as isize;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                let dst = t * kernel * c + j * c;
                out[dst..dst + c].copy_from_slice(xv.row(src as usize));
            }
        }
        let out = Tensor::new(&[t_len, kernel * c], out);
        self.push(
            Op::Im2Col1d {
                x,
                kernel,
                dilation,
                pad_left,
            },
            out,
            &[x],
        )
    }

    /// Unfolds an `[H, W, C]` feature map into `(H'*W') x (k*k*C)` patches.
    pub fn im2col_2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let &[h, w, c] = xv.shape() else {
            panic!("im2col_2d expects [H, W, C], got {:?}", xv.shape());
        };
        let ho = conv_out_len(h, kernel, stride, pad);
        let wo = conv_out_len(w, kernel, stride, pad);
        let width = kernel * kernel * c;
        let mut out = vec![0.0; ho * wo * width];
        let src = xv.data();
        for i in 0..ho {
            for j in 0..wo {
                let row = (i * wo + j) * width;
                for ki in 0..kernel {
                    let y = (i * stride + ki) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kj in 0..kernel {
                        let xx = (j * stride + kj) as isize - pad as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let s = (y as usize * w + xx as usize) * c;
                        let d = row + (ki * kernel + kj) * c;
                        out[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
        let out = Tensor::new(&[ho * wo, width], out);
        self.push(
            Op::Im2Col2d {
                x,
                kernel,
                stride,
                pad,
            },
            out,
            &[x],
        )
    }

    /// Sum over unmasked rows of element-wise `|p - y| + KL(y || p)`, divided
    /// by `norm`. Returns a `1 x 1` node.
    pub fn spec_loss(
        &mut self,
        pred: Var,
        target: Tensor,
        row_mask: Option<Vec<bool>>,
        norm: f64,
    ) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "spec_loss shape mismatch");
        let cols = pv.cols();
        let mut total = 0.0;
        for (r, (prow, trow)) in pv
            .data()
            .chunks(cols)
            .zip(target.data().chunks(cols))
            .enumerate()
        {
            if row_mask.as_ref().is_some_and(|m| !m[r]) {
                continue;
            }
            for (&p, &y) in prow.iter().zip(trow) {
                total += spec_elem(p, y);
            }
        }
        let out = Tensor::scalar(total / norm);
        self.push(
            Op::SpecLoss {
                pred,
                target,
                row_mask,
                norm,
            },
            out,
            &[pred],
        )
    }

    /// `sum(x * weights)` as a `1 x 1` node.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), weights.len());
        let s = xv
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        self.push(Op::WeightedSum { x, weights }, Tensor::scalar(s), &[x])
    }

    /// Inverted dropout; identity in evaluation mode.
    pub fn dropout(&mut self, x: Var) -> Var {
        if self.dropout.is_none() {
            return x;
        }
        let shape = self.value(x).shape().to_vec();
        let n: usize = shape.iter().product();
        let d = self.dropout.as_mut().expect("checked above");
        let keep = 1.0 - d.rate;
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if d.rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        self.mul_const(x, Tensor::new(&shape, mask))
    }

    /// Which side of each non-differentiable point every element sits on:
    /// ReLU inputs against zero and loss predictions against their targets.
    /// Two evaluations with equal patterns lie on the same smooth piece.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => out.extend(self.value(*x).data().iter().map(|&v| v > 0.0)),
                Op::SpecLoss { pred, target, .. } => out.extend(
                    self.value(*pred)
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(p, y)| p > y),
                ),
                _ => {}
            }
        }
        out
    }

    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Tensor>> = (0..self.params.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(dy);
                continue;
            }
            self.backprop_node(node, &dy, &mut grads, &mut param_grads);
            grads[i] = Some(dy);
        }
        Gradients {
            params: param_grads,
            nodes: grads,
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(
        &self,
        node: &Node,
        dy: &Tensor,
        grads: &mut [Option<Tensor>],
        param_grads: &mut [Option<Tensor>],
    ) {
        let out = || node.value.as_ref().expect("value");
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => accumulate(&mut param_grads[id.0], dy.clone()),
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = dy.cols();
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    if *trans_b {
                        // b is n x k: da = dy * b
                        gemm(m, n, k, dy.data(), (n, 1), bv.data(), (k, 1), &mut da, 0.0);
                    } else {
                        // b is k x n: da = dy * b^T
                        gemm(m, n, k, dy.data(), (n, 1), bv.data(), (1, n), &mut da, 0.0);
                    }
                    add_grad(grads, *a, Tensor::new(&[m, k], da));
                }
                if self.wants(*b) {
                    if *trans_b {
                        // db (n x k) = dy^T * a
                        let mut db = vec![0.0; n * k];
                        gemm(n, m, k, dy.data(), (1, n), av.data(), (k, 1), &mut db, 0.0);
                        add_grad(grads, *b, Tensor::new(&[n, k], db));
                    } else {
                        // db (k x n) = a^T * dy
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, av.data(), (1, k), dy.data(), (n, 1), &mut db, 0.0);
                        add_grad(grads, *b, Tensor::new(&[k, n], db));
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if self.wants(*x) {
                    add_grad(grads, *x, dy.clone());
                }
                if self.wants(*bias) {
                    let n = dy.cols();
                    let mut db = vec![0.0; n];
                    for row in dy.data().chunks(n) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    add_grad(grads, *bias, Tensor::new(&shape, db));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    add_grad(grads, *a, dy.clone());
                }
                if self.wants(*b) {
                    add_grad(grads, *b, dy.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_grad(grads, *a, dy.clone());
                }
                if self.wants(*b) {
                    add_grad(grads, *b, dy.map(|g| -g));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    add_grad(grads, *a, hadamard(dy, self.value(*b)));
                }
                if self.wants(*b) {
                    add_grad(grads, *b, hadamard(dy, self.value(*a)));
                }
            }
            Op::Scale(x, s) => add_grad(grads, *x, dy.map(|g| g * s)),
            Op::MulConst(x, c) => add_grad(grads, *x, hadamard(dy, c)),
            Op::Sigmoid(x) => {
                let d = zip_map(dy, out(), |g, y| g * y * (1.0 - y));
                add_grad(grads, *x, d);
            }
            Op::Tanh(x) => {
                let d = zip_map(dy, out(), |g, y| g * (1.0 - y * y));
                add_grad(grads, *x, d);
            }
            Op::Relu(x) => {
                let d = zip_map(dy, out(), |g, y| if y > 0.0 { g } else { 0.0 });
                add_grad(grads, *x, d);
            }
            Op::SoftmaxRows(x) => {
                let y = out();
                let n = y.cols();
                let mut d = dy.clone();
                for (drow, yrow) in d.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(g, p)| g * p).sum();
                    for (g, p) in drow.iter_mut().zip(yrow) {
                        *g = p * (*g - dot);
                    }
                }
                add_grad(grads, *x, d);
            }
            Op::Lerp { gate, a, b } => {
                let (gv, av, bv) = (self.value(*gate), self.value(*a), self.value(*b));
                if self.wants(*gate) {
                    let d = Tensor::new(
                        dy.shape(),
                        dy.data()
                            .iter()
                            .zip(av.data().iter().zip(bv.data()))
                            .map(|(g, (x, y))| g * (x - y))
                            .collect(),
                    );
                    add_grad(grads, *gate, d);
                }
                if self.wants(*a) {
                    add_grad(grads, *a, hadamard(dy, gv));
                }
                if self.wants(*b) {
                    add_grad(grads, *b, zip_map(dy, gv, |g, s| g * (1.0 - s)));
                }
            }
            Op::ConcatCols(parts) => {
                let rows = dy.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&dy.row(r)[offset..offset + w]);
                        }
                        add_grad(grads, p, Tensor::new(&[rows, w], d));
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, lo } => {
                let xv = self.value(*x);
                let mut d = Tensor::zeros(xv.shape());
                let w = dy.cols();
                for r in 0..dy.rows() {
                    d.row_mut(r)[*lo..*lo + w].copy_from_slice(dy.row(r));
                }
                add_grad(grads, *x, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.wants(p) {
                        add_grad(grads, p, dy.slice_rows(offset, offset + r));
                    }
                    offset += r;
                }
            }
            Op::SliceRows { x, lo } => {
                let xv = self.value(*x);
                let mut d = Tensor::zeros(xv.shape());
                let c = xv.cols();
                d.data_mut()[lo * c..lo * c + dy.len()].copy_from_slice(dy.data());
                add_grad(grads, *x, d);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                add_grad(grads, *x, dy.clone().reshape(&shape));
            }
            Op::BroadcastRows(x) => {
                let shape = self.value(*x).shape().to_vec();
                let n = dy.cols();
                let mut d = vec![0.0; n];
                for row in dy.data().chunks(n) {
                    for (a, b) in d.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                add_grad(grads, *x, Tensor::new(&shape, d));
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let mut d = Tensor::zeros(tv.shape());
                for (r, &i) in ids.iter().enumerate() {
                    for (a, b) in d.row_mut(i).iter_mut().zip(dy.row(r)) {
                        *a += b;
                    }
                }
                add_grad(grads, *table, d);
            }
            Op::Im2Col1d {
                x,
                kernel,
                dilation,
                pad_left,
            } => {
                let xv = self.value(*x);
                let (t_len, c) = (xv.rows(), xv.cols());
                let mut d = Tensor::zeros(xv.shape());
                for t in 0..t_len {
                    for j in 0..*kernel {
                        let src = t as isize - *pad_left as isize + (j * dilation) as isize;
                        if src < 0 || src >= t_len as isize {
                            continue;
                        }
                        let off = t * kernel * c + j * c;
                        let drow = d.row_mut(src as usize);
                        for (a, b) in drow.iter_mut().zip(&dy.data()[off..off + c]) {
                            *a += b;
                        }
                    }
                }
                add_grad(grads, *x, d);
            }
            Op::Im2Col2d {
                x,
                kernel,
                stride,
                pad,
            } => {
                let xv = self.value(*x);
                let &[h, w, c] = xv.shape() else {
                    unreachable!()
                };
                let ho = conv_out_len(h, *kernel, *stride, *pad);
                let wo = conv_out_len(w, *kernel, *stride, *pad);
                let width = kernel * kernel * c;
                let mut d = vec![0.0; h * w * c];
                for i in 0..ho {
                    for j in 0..wo {
                        let row = (i * wo + j) * width;
                        for ki in 0..*kernel {
                            let y = (i * stride + ki) as isize - *pad as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for kj in 0..*kernel {
                                let xx = (j * stride + kj) as isize - *pad as isize;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                let s = (y as usize * w + xx as usize) * c;
                                let o = row + (ki * kernel + kj) * c;
                                for q in 0..c {
                                    d[s + q] += dy.data()[o + q];
                                }
                            }
                        }
                    }
                }
                add_grad(grads, *x, Tensor::new(&[h, w, c], d));
            }
            Op::SpecLoss {
                pred,
                target,
                row_mask,
                norm,
            } => {
                let pv = self.value(*pred);
                let cols = pv.cols();
                let scale = dy.data()[0] / norm;
                let mut d = Tensor::zeros(pv.shape());
                for (r, ((drow, prow), trow)) in d
                    .data_mut()
                    .chunks_mut(cols)
                    .zip(pv.data().chunks(cols))
                    .zip(target.data().chunks(cols))
                    .enumerate()
                {
                    if row_mask.as_ref().is_some_and(|m| !m[r]) {
                        continue;
                    }
                    for ((g, &p), &y) in drow.iter_mut().zip(prow).zip(trow) {
                        *g = scale * spec_elem_grad(p, y);
                    }
                }
                add_grad(grads, *pred, d);
            }
            Op::WeightedSum { x, weights } => {
                let g = dy.data()[0];
                let shape = self.value(*x).shape().to_vec();
                let d = Tensor::new(&shape, weights.data().iter().map(|w| w * g).collect());
                add_grad(grads, *x, d);
            }
        }
    }
}

pub(crate) fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad).saturating_sub(kernel) / stride + 1
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `x * ln(x / y)` with the `0 * ln 0 = 0` convention.
fn xlogx_over(x: f64, y: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * (x / y).ln()
    }
}

/// Per-element spectrogram loss: L1 plus binary KL divergence.
pub(crate) fn spec_elem(p: f64, y: f64) -> f64 {
    let q = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    (p - y).abs() + xlogx_over(y, q) + xlogx_over(1.0 - y, 1.0 - q)
}

fn spec_elem_grad(p: f64, y: f64) -> f64 {
    let l1 = if p > y {
        1.0
    } else if p < y {
        -1.0
    } else {
        0.0
    };
    let kl = if p > PROB_EPS && p < 1.0 - PROB_EPS {
        -y / p + (1.0 - y) / (1.0 - p)
    } else {
        0.0
    };
    l1 + kl
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn add_grad(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    accumulate(&mut grads[v.0], g);
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}
