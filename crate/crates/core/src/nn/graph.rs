//! Reverse-mode automatic differentiation over dense f64 matrices.
//!
//! Define-by-run tape: each operation computes its value eagerly and records
//! whatever the backward pass needs. Everything is rank 2 (rows x columns);
//! scalars are 1x1 matrices. Graphs built with [`Graph::inference`] skip the
//! backward bookkeeping (saved scan states, layer-norm caches) and cannot be
//! differentiated.

use ndarray::{s, Array2, Axis};
use std::sync::Arc;

/// Dense matrix type used throughout the network.
pub type Mat = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

/// Sigmoid outputs are clamped into [EPS, 1-EPS] so downstream open-interval
/// invariants hold even for saturating inputs.
const SIGMOID_CLAMP: f64 = 1e-15;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

enum Op {
    Leaf {
        param: Option<usize>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var, f64),
    /// x: R x C plus a 1 x C bias row broadcast over rows.
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    Silu(Var),
    Softplus(Var),
    Exp(Var),
    /// Softmax along axis 0: each column sums to one.
    SoftmaxCols(Var),
    /// Mean over axis 1: R x C -> R x 1.
    MeanCols(Var),
    SumAll(Var),
    MeanAll(Var),
    /// Max over axis 0 -> 1 x C; argmax stores the winning row per column.
    MaxRows {
        x: Var,
        argmax: Vec<usize>,
    },
    /// Max over axis 1 -> R x 1; argmax stores the winning column per row.
    MaxCols {
        x: Var,
        argmax: Vec<usize>,
    },
    /// (M*g) x C -> M x C, max over each consecutive group of g rows.
    MaxPoolGroups {
        x: Var,
        group: usize,
        argmax: Vec<usize>,
    },
    GatherRows {
        x: Var,
        idx: Arc<Vec<usize>>,
    },
    SliceCols {
        x: Var,
        start: usize,
        end: usize,
    },
    ConcatCols(Vec<Var>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    /// Depth-wise causal convolution; x: L x C, w: C x W, b: 1 x C.
    DwCausalConv {
        x: Var,
        w: Var,
        b: Var,
    },
    /// Selective SSM recurrence; see [`scan_forward`] for the layout.
    SelectiveScan {
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        x: Var,
        h: Mat,
        abar: Mat,
    },
    /// Row-wise scaling: x: R x C times w: R x 1.
    MulCol {
        x: Var,
        w: Var,
    },
    /// Scaling by a learnable 1 x 1 scalar.
    MulScalarVar {
        x: Var,
        s: Var,
    },
    /// Cross product of two 1 x 3 rows.
    Cross(Var, Var),
    /// Euclidean norm of a 1 x C row -> 1 x 1.
    VecNorm(Var),
    /// Row normalized to unit length.
    NormalizeRow(Var),
}

struct Node {
    value: Arc<Mat>,
    op: Op,
}

/// Gradients of every node after a call to [`Graph::backward`].
pub struct Backprop {
    grads: Vec<Option<Mat>>,
}

impl Backprop {
    pub fn grad(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Forward-only graph: skips backward caches (scan states, norm stats).
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    pub fn param_leaf(&mut self, value: Arc<Mat>, param_id: usize) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf {
                param: Some(param_id),
            },
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = {
            let (x, y) = (self.value(a), self.value(b));
            assert_eq!(x.dim(), y.dim(), "add: shape mismatch");
            x + y
        };
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = {
            let (x, y) = (self.value(a), self.value(b));
            assert_eq!(x.dim(), y.dim(), "sub: shape mismatch");
            x - y
        };
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = {
            let (x, y) = (self.value(a), self.value(b));
            assert_eq!(x.dim(), y.dim(), "mul: shape mismatch");
            x * y
        };
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x + c);
        self.push(v, Op::AddConst(a, c))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let v = {
            let (xv, bv) = (self.value(x), self.value(bias));
            assert_eq!(bv.nrows(), 1, "add_row: bias must be 1 x C");
            assert_eq!(xv.ncols(), bv.ncols(), "add_row: width mismatch");
            xv + bv
        };
        self.push(v, Op::AddRow(x, bias))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = {
            let (x, y) = (self.value(a), self.value(b));
            assert_eq!(x.ncols(), y.nrows(), "matmul: inner dim mismatch");
            x.dot(y)
        };
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// Sigmoid with outputs clamped to the open interval (0, 1).
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mapv(|x| sigmoid(x).clamp(SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn softmax_cols(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut col in v.axis_iter_mut(Axis(1)) {
            let m = col.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            col.mapv_inplace(|x| (x - m).exp());
            let s = col.sum();
            col.mapv_inplace(|x| x / s);
        }
        self.push(v, Op::SoftmaxCols(a))
    }

    pub fn mean_cols(&mut self, a: Var) -> Var {
        let v = {
            let x = self.value(a);
            let n = x.ncols() as f64;
            x.sum_axis(Axis(1)).insert_axis(Axis(1)).mapv(|s| s / n)
        };
        self.push(v, Op::MeanCols(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = {
            let x = self.value(a);
            Mat::from_elem((1, 1), x.sum() / (x.len() as f64))
        };
        self.push(v, Op::MeanAll(a))
    }

    pub fn max_rows(&mut self, a: Var) -> Var {
        let (v, argmax) = {
            let x = self.value(a);
            assert!(x.nrows() >= 1);
            let mut out = Mat::zeros((1, x.ncols()));
            let mut arg = vec![0usize; x.ncols()];
            for c in 0..x.ncols() {
                let mut best = f64::NEG_INFINITY;
                for r in 0..x.nrows() {
                    if x[[r, c]] > best {
                        best = x[[r, c]];
                        arg[c] = r;
                    }
                }
                out[[0, c]] = best;
            }
            (out, arg)
        };
        self.push(v, Op::MaxRows { x: a, argmax })
    }

    pub fn max_cols(&mut self, a: Var) -> Var {
        let (v, argmax) = {
            let x = self.value(a);
            assert!(x.ncols() >= 1);
            let mut out = Mat::zeros((x.nrows(), 1));
            let mut arg = vec![0usize; x.nrows()];
            for r in 0..x.nrows() {
                let mut best = f64::NEG_INFINITY;
                for c in 0..x.ncols() {
                    if x[[r, c]] > best {
                        best = x[[r, c]];
                        arg[r] = c;
                    }
                }
                out[[r, 0]] = best;
            }
            (out, arg)
        };
        self.push(v, Op::MaxCols { x: a, argmax })
    }

    /// Max over each consecutive group of `group` rows.
    pub fn max_pool_groups(&mut self, a: Var, group: usize) -> Var {
        let (v, argmax) = {
            let x = self.value(a);
            assert!(group >= 1 && x.nrows() % group == 0, "max_pool_groups: rows not divisible");
            let m = x.nrows() / group;
            let cols = x.ncols();
            let mut out = Mat::zeros((m, cols));
            let mut arg = vec![0usize; m * cols];
            for g in 0..m {
                for c in 0..cols {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_r = g * group;
                    for r in g * group..(g + 1) * group {
                        if x[[r, c]] > best {
                            best = x[[r, c]];
                            best_r = r;
                        }
                    }
                    out[[g, c]] = best;
                    arg[g * cols + c] = best_r;
                }
            }
            (out, arg)
        };
        self.push(v, Op::MaxPoolGroups { x: a, group, argmax })
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let v = {
            let x = self.value(a);
            let mut out = Mat::zeros((idx.len(), x.ncols()));
            for (r, &src) in idx.iter().enumerate() {
                out.row_mut(r).assign(&x.row(src));
            }
            out
        };
        self.push(v, Op::GatherRows { x: a, idx })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = {
            let x = self.value(a);
            assert!(start < end && end <= x.ncols(), "slice_cols: bad range");
            x.slice(s![.., start..end]).to_owned()
        };
        self.push(v, Op::SliceCols { x: a, start, end })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let v = {
            let rows = self.value(parts[0]).nrows();
            let total: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
            let mut out = Mat::zeros((rows, total));
            let mut off = 0;
            for p in parts {
                let x = self.value(*p);
                assert_eq!(x.nrows(), rows, "concat_cols: row mismatch");
                out.slice_mut(s![.., off..off + x.ncols()]).assign(x);
                off += x.ncols();
            }
            out
        };
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Per-row layer normalization with learnable gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (v, xhat, inv_std) = {
            let xv = self.value(x);
            let gv = self.value(gamma);
            let bv = self.value(beta);
            assert_eq!(gv.nrows(), 1);
            assert_eq!(bv.nrows(), 1);
            assert_eq!(gv.ncols(), xv.ncols());
            let d = xv.ncols() as f64;
            let mut xhat = xv.clone();
            let mut inv_std = Vec::with_capacity(xv.nrows());
            for mut row in xhat.axis_iter_mut(Axis(0)) {
                let mu = row.sum() / d;
                let var = row.fold(0.0, |acc, &v| acc + (v - mu) * (v - mu)) / d;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std.push(inv);
                row.mapv_inplace(|v| (v - mu) * inv);
            }
            let out = &xhat * gv + bv;
            if self.grad_enabled {
                (out, xhat, inv_std)
            } else {
                (out, Mat::zeros((0, 0)), Vec::new())
            }
        };
        self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Causal depth-wise convolution along rows: y[t,c] = b[c] + sum_j w[c,j] x[t-j,c].
    pub fn dw_causal_conv(&mut self, x: Var, w: Var, b: Var) -> Var {
        let v = {
            let xv = self.value(x);
            let wv = self.value(w);
            let bv = self.value(b);
            let (l, ch) = xv.dim();
            assert_eq!(wv.nrows(), ch, "dw_causal_conv: channel mismatch");
            assert_eq!(bv.ncols(), ch);
            let width = wv.ncols();
            let mut out = Mat::zeros((l, ch));
            for t in 0..l {
                for c in 0..ch {
                    let mut acc = bv[[0, c]];
                    for j in 0..width.min(t + 1) {
                        acc += wv[[c, j]] * xv[[t - j, c]];
                    }
                    out[[t, c]] = acc;
                }
            }
            out
        };
        self.push(v, Op::DwCausalConv { x, w, b })
    }

    /// Selective SSM scan. Shapes: delta L x D, a D x S (continuous-time,
    /// negative for stability), b L x S, c L x S, x L x D; output L x D.
    /// Discretization: abar = exp(delta * a), bbar = delta * b (zero-order
    /// hold on the transition, Euler on the input map).
    pub fn selective_scan(&mut self, delta: Var, a: Var, b: Var, c: Var, x: Var) -> Var {
        let (y, h, abar) = {
            let dv = self.value(delta);
            let av = self.value(a);
            let bv = self.value(b);
            let cv = self.value(c);
            let xv = self.value(x);
            let (l, d) = xv.dim();
            let s = av.ncols();
            assert_eq!(dv.dim(), (l, d), "selective_scan: delta shape");
            assert_eq!(av.nrows(), d, "selective_scan: a shape");
            assert_eq!(bv.dim(), (l, s), "selective_scan: b shape");
            assert_eq!(cv.dim(), (l, s), "selective_scan: c shape");
            scan_forward(dv, av, bv, cv, xv, self.grad_enabled)
        };
        self.push(
            y,
            Op::SelectiveScan {
                delta,
                a,
                b,
                c,
                x,
                h,
                abar,
            },
        )
    }

    pub fn mul_col(&mut self, x: Var, w: Var) -> Var {
        let v = {
            let (xv, wv) = (self.value(x), self.value(w));
            assert_eq!(wv.ncols(), 1, "mul_col: weights must be R x 1");
            assert_eq!(wv.nrows(), xv.nrows(), "mul_col: row mismatch");
            let mut out = xv.clone();
            for (mut row, wr) in out.axis_iter_mut(Axis(0)).zip(wv.column(0).iter()) {
                row.mapv_inplace(|v| v * wr);
            }
            out
        };
        self.push(v, Op::MulCol { x, w })
    }

    pub fn mul_scalar_var(&mut self, x: Var, scalar: Var) -> Var {
        let v = {
            let (xv, sv) = (self.value(x), self.value(scalar));
            assert_eq!(sv.dim(), (1, 1), "mul_scalar_var: scalar must be 1 x 1");
            xv.mapv(|v| v * sv[[0, 0]])
        };
        self.push(v, Op::MulScalarVar { x, s: scalar })
    }

    pub fn cross(&mut self, a: Var, b: Var) -> Var {
        let v = {
            let (x, y) = (self.value(a), self.value(b));
            assert_eq!(x.dim(), (1, 3), "cross: expects 1 x 3");
            assert_eq!(y.dim(), (1, 3), "cross: expects 1 x 3");
            cross_rows(x, y)
        };
        self.push(v, Op::Cross(a, b))
    }

    pub fn vec_norm(&mut self, a: Var) -> Var {
        let v = {
            let x = self.value(a);
            assert_eq!(x.nrows(), 1, "vec_norm: expects a row");
            Mat::from_elem((1, 1), x.iter().map(|v| v * v).sum::<f64>().sqrt())
        };
        self.push(v, Op::VecNorm(a))
    }

    pub fn normalize_row(&mut self, a: Var) -> Var {
        let v = {
            let x = self.value(a);
            assert_eq!(x.nrows(), 1, "normalize_row: expects a row");
            let n = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            x.mapv(|v| v / n)
        };
        self.push(v, Op::NormalizeRow(a))
    }

    /// Reverse-mode sweep from a 1 x 1 loss node.
    pub fn backward(&self, loss: Var) -> Backprop {
        assert!(
            self.grad_enabled,
            "backward called on an inference-only graph"
        );
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Backprop { grads }
    }

    /// Collect parameter gradients keyed by parameter id.
    pub fn param_grads(&self, bp: &Backprop, n_params: usize) -> Vec<Option<Mat>> {
        let mut out: Vec<Option<Mat>> = (0..n_params).map(|_| None).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(pid) } = node.op {
                if let Some(g) = &bp.grads[i] {
                    match &mut out[pid] {
                        Some(acc) => *acc += g,
                        slot => *slot = Some(g.clone()),
                    }
                }
            }
        }
        out
    }

    fn backprop_node(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        fn acc(grads: &mut [Option<Mat>], v: Var, delta: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot => *slot = Some(delta),
            }
        }

        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(grads, *a, g * bv);
                acc(grads, *b, g * av);
            }
            Op::Scale(a, c) => acc(grads, *a, g.mapv(|v| v * c)),
            Op::AddConst(a, _) => acc(grads, *a, g.clone()),
            Op::AddRow(x, bias) => {
                acc(grads, *x, g.clone());
                acc(grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(grads, *a, g.dot(&bv.t()));
                acc(grads, *b, av.t().dot(g));
            }
            Op::Transpose(a) => acc(grads, *a, g.t().to_owned()),
            Op::Relu(a) => {
                let xv = self.value(*a);
                let mut gx = g.clone();
                gx.zip_mut_with(xv, |gv, &x| {
                    if x <= 0.0 {
                        *gv = 0.0;
                    }
                });
                acc(grads, *a, gx);
            }
            Op::Sigmoid(a) => {
                let yv = self.value(Var(i));
                let mut gx = g.clone();
                gx.zip_mut_with(yv, |gv, &y| {
                    if y <= SIGMOID_CLAMP || y >= 1.0 - SIGMOID_CLAMP {
                        *gv = 0.0;
                    } else {
                        *gv *= y * (1.0 - y);
                    }
                });
                acc(grads, *a, gx);
            }
            Op::Silu(a) => {
                let xv = self.value(*a);
                let mut gx = g.clone();
                gx.zip_mut_with(xv, |gv, &x| {
                    let s = sigmoid(x);
                    *gv *= s * (1.0 + x * (1.0 - s));
                });
                acc(grads, *a, gx);
            }
            Op::Softplus(a) => {
                let xv = self.value(*a);
                let mut gx = g.clone();
                gx.zip_mut_with(xv, |gv, &x| *gv *= sigmoid(x));
                acc(grads, *a, gx);
            }
            Op::Exp(a) => {
                let yv = self.value(Var(i));
                acc(grads, *a, g * yv);
            }
            Op::SoftmaxCols(a) => {
                let yv = self.value(Var(i));
                let mut gx = Mat::zeros(g.dim());
                for c in 0..g.ncols() {
                    let dot: f64 = (0..g.nrows()).map(|r| g[[r, c]] * yv[[r, c]]).sum();
                    for r in 0..g.nrows() {
                        gx[[r, c]] = yv[[r, c]] * (g[[r, c]] - dot);
                    }
                }
                acc(grads, *a, gx);
            }
            Op::MeanCols(a) => {
                let xv = self.value(*a);
                let n = xv.ncols() as f64;
                let mut gx = Mat::zeros(xv.dim());
                for r in 0..xv.nrows() {
                    let gr = g[[r, 0]] / n;
                    for c in 0..xv.ncols() {
                        gx[[r, c]] = gr;
                    }
                }
                acc(grads, *a, gx);
            }
            Op::SumAll(a) => {
                let xv = self.value(*a);
                acc(grads, *a, Mat::from_elem(xv.dim(), g[[0, 0]]));
            }
            Op::MeanAll(a) => {
                let xv = self.value(*a);
                acc(grads, *a, Mat::from_elem(xv.dim(), g[[0, 0]] / xv.len() as f64));
            }
            Op::MaxRows { x, argmax } => {
                let xv = self.value(*x);
                let mut gx = Mat::zeros(xv.dim());
                for (c, &r) in argmax.iter().enumerate() {
                    gx[[r, c]] += g[[0, c]];
                }
                acc(grads, *x, gx);
            }
            Op::MaxCols { x, argmax } => {
                let xv = self.value(*x);
                let mut gx = Mat::zeros(xv.dim());
                for (r, &c) in argmax.iter().enumerate() {
                    gx[[r, c]] += g[[r, 0]];
                }
                acc(grads, *x, gx);
            }
            Op::MaxPoolGroups { x, argmax, .. } => {
                let xv = self.value(*x);
                let cols = xv.ncols();
                let mut gx = Mat::zeros(xv.dim());
                for m in 0..g.nrows() {
                    for c in 0..cols {
                        gx[[argmax[m * cols + c], c]] += g[[m, c]];
                    }
                }
                acc(grads, *x, gx);
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let mut gx = Mat::zeros(xv.dim());
                for (r, &src) in idx.iter().enumerate() {
                    let mut dst = gx.row_mut(src);
                    dst += &g.row(r);
                }
                acc(grads, *x, gx);
            }
            Op::SliceCols { x, start, end } => {
                let xv = self.value(*x);
                let mut gx = Mat::zeros(xv.dim());
                gx.slice_mut(s![.., *start..*end]).assign(g);
                acc(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    acc(grads, *p, g.slice(s![.., off..off + w]).to_owned());
                    off += w;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                let d = xhat.ncols() as f64;
                let mut gx = Mat::zeros(xhat.dim());
                let mut ggamma = Mat::zeros((1, xhat.ncols()));
                let mut gbeta = Mat::zeros((1, xhat.ncols()));
                for r in 0..xhat.nrows() {
                    let mut mean_t = 0.0;
                    let mut mean_tx = 0.0;
                    for c in 0..xhat.ncols() {
                        let t = g[[r, c]] * gv[[0, c]];
                        mean_t += t;
                        mean_tx += t * xhat[[r, c]];
                        ggamma[[0, c]] += g[[r, c]] * xhat[[r, c]];
                        gbeta[[0, c]] += g[[r, c]];
                    }
                    mean_t /= d;
                    mean_tx /= d;
                    let inv = inv_std[r];
                    for c in 0..xhat.ncols() {
                        let t = g[[r, c]] * gv[[0, c]];
                        gx[[r, c]] = inv * (t - mean_t - xhat[[r, c]] * mean_tx);
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *gamma, ggamma);
                acc(grads, *beta, gbeta);
            }
            Op::DwCausalConv { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (l, ch) = xv.dim();
                let width = wv.ncols();
                let mut gx = Mat::zeros((l, ch));
                let mut gw = Mat::zeros(wv.dim());
                let mut gb = Mat::zeros((1, ch));
                for t in 0..l {
                    for c in 0..ch {
                        let gv = g[[t, c]];
                        gb[[0, c]] += gv;
                        for j in 0..width.min(t + 1) {
                            gw[[c, j]] += gv * xv[[t - j, c]];
                            gx[[t - j, c]] += gv * wv[[c, j]];
                        }
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *w, gw);
                acc(grads, *b, gb);
            }
            Op::SelectiveScan {
                delta,
                a,
                b,
                c,
                x,
                h,
                abar,
            } => {
                let dv = self.value(*delta);
                let av = self.value(*a);
                let bv = self.value(*b);
                let cv = self.value(*c);
                let xv = self.value(*x);
                let (gd, ga, gb, gc, gx) = scan_backward(dv, av, bv, cv, xv, h, abar, g);
                acc(grads, *delta, gd);
                acc(grads, *a, ga);
                acc(grads, *b, gb);
                acc(grads, *c, gc);
                acc(grads, *x, gx);
            }
            Op::MulCol { x, w } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let mut gx = g.clone();
                for (mut row, wr) in gx.axis_iter_mut(Axis(0)).zip(wv.column(0).iter()) {
                    row.mapv_inplace(|v| v * wr);
                }
                let mut gw = Mat::zeros(wv.dim());
                for r in 0..xv.nrows() {
                    let mut s = 0.0;
                    for col in 0..xv.ncols() {
                        s += g[[r, col]] * xv[[r, col]];
                    }
                    gw[[r, 0]] = s;
                }
                acc(grads, *x, gx);
                acc(grads, *w, gw);
            }
            Op::MulScalarVar { x, s: sc } => {
                let xv = self.value(*x);
                let sv = self.value(*sc)[[0, 0]];
                acc(grads, *x, g.mapv(|v| v * sv));
                let gs = g
                    .iter()
                    .zip(xv.iter())
                    .map(|(gv, xv)| gv * xv)
                    .sum::<f64>();
                acc(grads, *sc, Mat::from_elem((1, 1), gs));
            }
            Op::Cross(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                // d(a x b)/da adjoint is b x g; for b it is g x a.
                acc(grads, *a, cross_rows(bv, g));
                acc(grads, *b, cross_rows(g, av));
            }
            Op::VecNorm(a) => {
                let xv = self.value(*a);
                let y = self.value(Var(i))[[0, 0]].max(1e-30);
                acc(grads, *a, xv.mapv(|v| v * g[[0, 0]] / y));
            }
            Op::NormalizeRow(a) => {
                let xv = self.value(*a);
                let yv = self.value(Var(i));
                let n = xv.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                let dot: f64 = g.iter().zip(yv.iter()).map(|(gv, y)| gv * y).sum();
                let mut gx = g.clone();
                gx.zip_mut_with(yv, |gv, &y| *gv = (*gv - y * dot) / n);
                acc(grads, *a, gx);
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

fn cross_rows(a: &Mat, b: &Mat) -> Mat {
    let (a1, a2, a3) = (a[[0, 0]], a[[0, 1]], a[[0, 2]]);
    let (b1, b2, b3) = (b[[0, 0]], b[[0, 1]], b[[0, 2]]);
    Mat::from_shape_vec(
        (1, 3),
        vec![a2 * b3 - a3 * b2, a3 * b1 - a1 * b3, a1 * b2 - a2 * b1],
    )
    .expect("static shape")
}

/// Shared selective-scan forward kernel. Returns (y, h states, abar) where the
/// state tensors are L x (D*S) row-major in (d, s); empty when `save` is false.
pub(crate) fn scan_forward(
    delta: &Mat,
    a: &Mat,
    b: &Mat,
    c: &Mat,
    x: &Mat,
    save: bool,
) -> (Mat, Mat, Mat) {
    let (l, d) = x.dim();
    let s = a.ncols();
    let mut y = Mat::zeros((l, d));
    let mut h = vec![0.0f64; d * s];
    let (mut h_save, mut abar_save) = if save {
        (Mat::zeros((l, d * s)), Mat::zeros((l, d * s)))
    } else {
        (Mat::zeros((0, 0)), Mat::zeros((0, 0)))
    };
    for t in 0..l {
        let brow = b.row(t);
        let crow = c.row(t);
        for di in 0..d {
            let dt = delta[[t, di]];
            let xv = x[[t, di]];
            let arow = a.row(di);
            let mut acc = 0.0;
            for si in 0..s {
                let ab = (dt * arow[si]).exp();
                let hv = ab * h[di * s + si] + dt * brow[si] * xv;
                h[di * s + si] = hv;
                acc += crow[si] * hv;
                if save {
                    h_save[[t, di * s + si]] = hv;
                    abar_save[[t, di * s + si]] = ab;
                }
            }
            y[[t, di]] = acc;
        }
    }
    (y, h_save, abar_save)
}

#[allow(clippy::too_many_arguments)]
fn scan_backward(
    delta: &Mat,
    a: &Mat,
    b: &Mat,
    c: &Mat,
    x: &Mat,
    h: &Mat,
    abar: &Mat,
    gy: &Mat,
) -> (Mat, Mat, Mat, Mat, Mat) {
    let (l, d) = x.dim();
    let s = a.ncols();
    assert_eq!(h.dim(), (l, d * s), "scan state missing (inference graph?)");
    let mut gdelta = Mat::zeros((l, d));
    let mut ga = Mat::zeros((d, s));
    let mut gb = Mat::zeros((l, s));
    let mut gc = Mat::zeros((l, s));
    let mut gx = Mat::zeros((l, d));
    let mut dh = vec![0.0f64; d * s];
    for t in (0..l).rev() {
        for di in 0..d {
            let dt = delta[[t, di]];
            let xv = x[[t, di]];
            let gyv = gy[[t, di]];
            let mut gdt = 0.0;
            let mut gxv = 0.0;
            for si in 0..s {
                let idx = di * s + si;
                let dhv = dh[idx] + gyv * c[[t, si]];
                gc[[t, si]] += gyv * h[[t, idx]];
                let hprev = if t > 0 { h[[t - 1, idx]] } else { 0.0 };
                let ab = abar[[t, idx]];
                gdt += dhv * (ab * a[[di, si]] * hprev + b[[t, si]] * xv);
                ga[[di, si]] += dhv * ab * dt * hprev;
                gb[[t, si]] += dhv * dt * xv;
                gxv += dhv * dt * b[[t, si]];
                dh[idx] = dhv * ab;
            }
            gdelta[[t, di]] = gdt;
            gx[[t, di]] = gxv;
        }
    }
    (gdelta, ga, gb, gc, gx)
}
