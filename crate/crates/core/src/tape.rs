//! Reverse-mode automatic differentiation over small dense `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Weight matrices are
//! never copied onto the tape: ops such as [`Tape::linear`] read them straight
//! out of the [`ParamStore`] and [`Tape::backward`] accumulates their gradients
//! into a [`Gradients`] buffer with the same layout.
//!
//! The tape is deliberately per-utterance. Batch losses are built by running
//! one tape per item and accumulating gradients, which keeps every op a plain
//! vector/matrix kernel.

use alloc::vec;
use alloc::vec::Vec;

use crate::params::{GroupMask, ParamId, ParamStore, Gradients};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    #[inline]
    fn idx(self) -> usize {
        self.0 as usize
    }

    /// Position on the tape; indexes the result of [`Tape::input_gradients`].
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Row-major shape, up to three axes. Vectors are `[n, 1, 1]`, matrices
/// `[rows, cols, 1]`, feature maps `[channels, height, width]`.
pub type Shape = [usize; 3];

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    ParamMasked(ParamId),
    Linear { w: ParamId, b: Option<ParamId>, x: Var },
    LinearRows { w: ParamId, b: Option<ParamId>, x: Var },
    MatVec { m: Var, x: Var },
    WeightedRows { w: Var, m: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { m: Var, v: Var },
    Affine { x: Var, scale: f64 },
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Elu(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    StackRows(Vec<Var>),
    Sum(Var),
    Softmax(Var),
    L2Normalize(Var),
    Conv2d { w: ParamId, b: ParamId, x: Var, stride: usize },
    MeanSpatial(Var),
    ConvToSeq(Var),
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    shape: Shape,
    op: Op,
}

/// Recorded forward computation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

#[inline]
fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        libm::expm1(x)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn numel(shape: Shape) -> usize {
    shape[0] * shape[1] * shape[2]
}

fn conv_out(n: usize, stride: usize) -> usize {
    (n + stride - 1) / stride
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(1024) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.idx()].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.idx()].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.idx()].value[0]
    }

    fn push(&mut self, value: Vec<f64>, shape: Shape, op: Op) -> Var {
        debug_assert_eq!(value.len(), numel(shape));
        let id = Var(self.nodes.len() as u32);
        self.nodes.push(Node { value, shape, op });
        id
    }

    /// Constant input with no gradient path.
    pub fn input(&mut self, value: Vec<f64>, shape: Shape) -> Var {
        assert_eq!(value.len(), numel(shape), "input length does not match shape");
        self.push(value, shape, Op::Input)
    }

    pub fn vector(&mut self, value: Vec<f64>) -> Var {
        let n = value.len();
        self.push(value, [n, 1, 1], Op::Input)
    }

    pub fn constant(&mut self, x: f64) -> Var {
        self.push(vec![x], [1, 1, 1], Op::Input)
    }

    /// Copies a parameter onto the tape. Meant for biases and small tensors.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let (value, shape) = (store.values(id).to_vec(), store.shape(id));
        self.push(value, shape, Op::Param(id))
    }

    /// Parameter multiplied elementwise by its registered mask.
    pub fn param_masked(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let mask = store.mask(id).expect("parameter has no mask");
        let value = store.values(id).iter().zip(mask).map(|(w, m)| w * m).collect();
        self.push(value, store.shape(id), Op::ParamMasked(id))
    }

    /// `W x + b` with `W` of shape `[out, in]` read from the store.
    pub fn linear(&mut self, store: &ParamStore, w: ParamId, b: Option<ParamId>, x: Var) -> Var {
        let [out, inp, _] = store.shape(w);
        let xv = self.value(x);
        assert_eq!(xv.len(), inp, "linear: input length {} vs weight cols {}", xv.len(), inp);
        let wv = store.values(w);
        let mut y: Vec<f64> = (0..out).map(|r| dot(&wv[r * inp..(r + 1) * inp], xv)).collect();
        if let Some(b) = b {
            for (yi, bi) in y.iter_mut().zip(store.values(b)) {
                *yi += bi;
            }
        }
        self.push(y, [out, 1, 1], Op::Linear { w, b, x })
    }

    /// Applies [`Tape::linear`] to every row of an `[L, in]` matrix.
    pub fn linear_rows(&mut self, store: &ParamStore, w: ParamId, b: Option<ParamId>, x: Var) -> Var {
        let [out, inp, _] = store.shape(w);
        let [rows, cols, _] = self.shape(x);
        assert_eq!(cols, inp, "linear_rows: width mismatch");
        let xv = self.value(x);
        let wv = store.values(w);
        let bv = b.map(|b| store.values(b));
        let mut y = vec![0.0; rows * out];
        for r in 0..rows {
            let xr = &xv[r * inp..(r + 1) * inp];
            for o in 0..out {
                y[r * out + o] = dot(&wv[o * inp..(o + 1) * inp], xr) + bv.map_or(0.0, |b| b[o]);
            }
        }
        self.push(y, [rows, out, 1], Op::LinearRows { w, b, x })
    }

    /// Matrix node `[r, c]` times vector node `[c]`.
    pub fn matvec(&mut self, m: Var, x: Var) -> Var {
        let [rows, cols, _] = self.shape(m);
        let (mv, xv) = (self.value(m), self.value(x));
        assert_eq!(xv.len(), cols, "matvec: width mismatch");
        let y = (0..rows).map(|r| dot(&mv[r * cols..(r + 1) * cols], xv)).collect();
        self.push(y, [rows, 1, 1], Op::MatVec { m, x })
    }

    /// `Σ_l w[l] · m[l, :]` for weights `[L]` and rows `[L, c]`.
    pub fn weighted_rows(&mut self, w: Var, m: Var) -> Var {
        let [rows, cols, _] = self.shape(m);
        let (wv, mv) = (self.value(w), self.value(m));
        assert_eq!(wv.len(), rows, "weighted_rows: weight count mismatch");
        let mut y = vec![0.0; cols];
        for r in 0..rows {
            axpy(wv[r], &mv[r * cols..(r + 1) * cols], &mut y);
        }
        self.push(y, [cols, 1, 1], Op::WeightedRows { w, m })
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "elementwise op on mismatched lengths");
        let y = av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.shape(a);
        self.push(y, shape, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds vector `v` to every row of matrix `m`.
    pub fn add_row(&mut self, m: Var, v: Var) -> Var {
        let shape = self.shape(m);
        let cols = shape[1];
        let vv = self.value(v);
        assert_eq!(vv.len(), cols, "add_row: width mismatch");
        let mut y = self.value(m).to_vec();
        for row in y.chunks_mut(cols) {
            for (yi, vi) in row.iter_mut().zip(vv) {
                *yi += vi;
            }
        }
        self.push(y, shape, Op::AddRow { m, v })
    }

    /// `scale · x + offset`.
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Var {
        let y = self.value(x).iter().map(|v| scale * v + offset).collect();
        let shape = self.shape(x);
        self.push(y, shape, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.affine(x, k, 0.0)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let y = self.value(x).iter().map(|v| f(*v)).collect();
        let shape = self.shape(x);
        self.push(y, shape, op)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, libm::tanh, Op::Tanh(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, libm::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, libm::log, Op::Ln(x))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, elu, Op::Elu(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut y = Vec::new();
        for &p in parts {
            y.extend_from_slice(self.value(p));
        }
        let n = y.len();
        self.push(y, [n, 1, 1], Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let y = self.value(x)[start..start + len].to_vec();
        self.push(y, [len, 1, 1], Op::Slice { x, start })
    }

    /// Stacks equal-length vectors into an `[L, c]` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "stack_rows needs at least one row");
        let cols = self.value(rows[0]).len();
        let mut y = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            let v = self.value(r);
            assert_eq!(v.len(), cols, "stack_rows: ragged rows");
            y.extend_from_slice(v);
        }
        self.push(y, [rows.len(), cols, 1], Op::StackRows(rows.to_vec()))
    }

    pub fn row(&mut self, m: Var, r: usize) -> Var {
        let cols = self.shape(m)[1];
        self.slice(m, r * cols, cols)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![s], [1, 1, 1], Op::Sum(x))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let max = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut y: Vec<f64> = xv.iter().map(|v| libm::exp(v - max)).collect();
        let z: f64 = y.iter().sum();
        y.iter_mut().for_each(|v| *v /= z);
        let shape = self.shape(x);
        self.push(y, shape, Op::Softmax(x))
    }

    /// `x / ‖x‖₂`; the input must be nonzero.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let norm = libm::sqrt(dot(xv, xv)).max(1e-12);
        let y = xv.iter().map(|v| v / norm).collect();
        let shape = self.shape(x);
        self.push(y, shape, Op::L2Normalize(x))
    }

    /// 3×3 convolution with zero padding 1 over a `[c_in, h, w]` feature map.
    /// Kernel `w` has shape `[c_out, c_in * 9, 1]`, bias `[c_out]`.
    pub fn conv2d(&mut self, store: &ParamStore, w: ParamId, b: ParamId, x: Var, stride: usize) -> Var {
        let [cin, h, wd] = self.shape(x);
        let [cout, k, _] = store.shape(w);
        assert_eq!(k, cin * 9, "conv2d: kernel expects {} input channels, got {}", k / 9, cin);
        let (ho, wo) = (conv_out(h, stride), conv_out(wd, stride));
        let xv = self.value(x);
        let wv = store.values(w);
        let bv = store.values(b);
        let mut y = vec![0.0; cout * ho * wo];
        for co in 0..cout {
            let out = &mut y[co * ho * wo..(co + 1) * ho * wo];
            out.iter_mut().for_each(|v| *v = bv[co]);
            for ci in 0..cin {
                let plane = &xv[ci * h * wd..(ci + 1) * h * wd];
                let kern = &wv[co * k + ci * 9..co * k + ci * 9 + 9];
                for oy in 0..ho {
                    for ky in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * wd..(iy as usize + 1) * wd];
                        let dst = &mut out[oy * wo..(oy + 1) * wo];
                        for kx in 0..3 {
                            let kv = kern[ky * 3 + kx];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * stride + kx) as isize - 1;
                                if ix >= 0 && ix < wd as isize {
                                    *d += kv * src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        self.push(y, [cout, ho, wo], Op::Conv2d { w, b, x, stride })
    }

    /// Average over the spatial axes of a `[c, h, w]` map.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let [c, h, w] = self.shape(x);
        let xv = self.value(x);
        let n = (h * w) as f64;
        let y = (0..c).map(|ci| xv[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>() / n).collect();
        self.push(y, [c, 1, 1], Op::MeanSpatial(x))
    }

    /// Reorders a `[c, h, w]` map into an `[h, c * w]` sequence over `h`.
    pub fn conv_to_seq(&mut self, x: Var) -> Var {
        let [c, h, w] = self.shape(x);
        let xv = self.value(x);
        let mut y = vec![0.0; c * h * w];
        for ci in 0..c {
            for t in 0..h {
                let src = &xv[(ci * h + t) * w..(ci * h + t + 1) * w];
                y[t * c * w + ci * w..t * c * w + (ci + 1) * w].copy_from_slice(src);
            }
        }
        self.push(y, [h, c * w, 1], Op::ConvToSeq(x))
    }

    /// Same values under a new shape with equal element count.
    pub fn reshape(&mut self, x: Var, shape: Shape) -> Var {
        assert_eq!(numel(shape), numel(self.shape(x)), "reshape must preserve element count");
        let y = self.value(x).to_vec();
        self.push(y, shape, Op::Reshape(x))
    }

    /// Backpropagates from scalar `root` seeded with `seed`.
    ///
    /// Parameter gradients are accumulated into `grads` for every parameter
    /// whose group is in `trainable`; other parameters still pass gradient
    /// through to their inputs but receive nothing themselves.
    pub fn backward(&self, root: Var, seed: f64, store: &ParamStore, grads: &mut Gradients, trainable: GroupMask) {
        self.adjoints(root, seed, store, Some((grads, trainable)));
    }

    /// Gradient of `root` with respect to every tape value, with no parameter
    /// accumulation. Mostly useful for tests and input sensitivities.
    pub fn input_gradients(&self, root: Var, store: &ParamStore) -> Vec<Vec<f64>> {
        self.adjoints(root, 1.0, store, None)
    }

    fn adjoints(
        &self,
        root: Var,
        seed: f64,
        store: &ParamStore,
        mut sink: Option<(&mut Gradients, GroupMask)>,
    ) -> Vec<Vec<f64>> {
        assert_eq!(self.nodes[root.idx()].value.len(), 1, "backward root must be a scalar");
        let n = root.idx() + 1;
        let mut adj: Vec<Vec<f64>> = vec![Vec::new(); n];
        adj[root.idx()] = vec![seed];

        for i in (0..n).rev() {
            if adj[i].is_empty() {
                continue;
            }
            let g = core::mem::take(&mut adj[i]);
            let node = &self.nodes[i];
            let acc = |adj: &mut Vec<Vec<f64>>, v: Var, f: &dyn Fn(&mut [f64])| {
                let slot = &mut adj[v.idx()];
                if slot.is_empty() {
                    *slot = vec![0.0; self.nodes[v.idx()].value.len()];
                }
                f(slot);
            };
            let mut pgrad = |id: ParamId, f: &dyn Fn(&mut [f64])| {
                if let Some((grads, mask)) = sink.as_mut() {
                    if mask.contains(store.group(id)) {
                        f(grads.values_mut(id));
                    }
                }
            };
            match &node.op {
                // inputs keep their adjoint for input_gradients
                Op::Input => adj[i] = g,
                Op::Param(id) => pgrad(*id, &|d| axpy(1.0, &g, d)),
                Op::ParamMasked(id) => {
                    let mask = store.mask(*id).expect("mask");
                    pgrad(*id, &|d| {
                        for ((di, gi), mi) in d.iter_mut().zip(&g).zip(mask) {
                            *di += gi * mi;
                        }
                    })
                }
                Op::Linear { w, b, x } => {
                    let [out, inp, _] = store.shape(*w);
                    let wv = store.values(*w);
                    acc(&mut adj, *x, &|dx| {
                        for r in 0..out {
                            axpy(g[r], &wv[r * inp..(r + 1) * inp], dx);
                        }
                    });
                    let xv = &self.nodes[x.idx()].value;
                    pgrad(*w, &|dw| {
                        for r in 0..out {
                            axpy(g[r], xv, &mut dw[r * inp..(r + 1) * inp]);
                        }
                    });
                    if let Some(b) = b {
                        pgrad(*b, &|db| axpy(1.0, &g, db));
                    }
                }
                Op::LinearRows { w, b, x } => {
                    let [out, inp, _] = store.shape(*w);
                    let rows = self.nodes[x.idx()].shape[0];
                    let wv = store.values(*w);
                    acc(&mut adj, *x, &|dx| {
                        for r in 0..rows {
                            let dxr = &mut dx[r * inp..(r + 1) * inp];
                            for o in 0..out {
                                axpy(g[r * out + o], &wv[o * inp..(o + 1) * inp], dxr);
                            }
                        }
                    });
                    let xv = &self.nodes[x.idx()].value;
                    pgrad(*w, &|dw| {
                        for r in 0..rows {
                            for o in 0..out {
                                axpy(g[r * out + o], &xv[r * inp..(r + 1) * inp], &mut dw[o * inp..(o + 1) * inp]);
                            }
                        }
                    });
                    if let Some(b) = b {
                        pgrad(*b, &|db| {
                            for r in 0..rows {
                                axpy(1.0, &g[r * out..(r + 1) * out], db);
                            }
                        });
                    }
                }
                Op::MatVec { m, x } => {
                    let [rows, cols, _] = self.nodes[m.idx()].shape;
                    let (mv, xv) = (&self.nodes[m.idx()].value, &self.nodes[x.idx()].value);
                    acc(&mut adj, *m, &|dm| {
                        for r in 0..rows {
                            axpy(g[r], xv, &mut dm[r * cols..(r + 1) * cols]);
                        }
                    });
                    acc(&mut adj, *x, &|dx| {
                        for r in 0..rows {
                            axpy(g[r], &mv[r * cols..(r + 1) * cols], dx);
                        }
                    });
                }
                Op::WeightedRows { w, m } => {
                    let [rows, cols, _] = self.nodes[m.idx()].shape;
                    let (wv, mv) = (&self.nodes[w.idx()].value, &self.nodes[m.idx()].value);
                    acc(&mut adj, *w, &|dw| {
                        for r in 0..rows {
                            dw[r] += dot(&g, &mv[r * cols..(r + 1) * cols]);
                        }
                    });
                    acc(&mut adj, *m, &|dm| {
                        for r in 0..rows {
                            axpy(wv[r], &g, &mut dm[r * cols..(r + 1) * cols]);
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, &|d| axpy(1.0, &g, d));
                    acc(&mut adj, *b, &|d| axpy(1.0, &g, d));
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *a, &|d| axpy(1.0, &g, d));
                    acc(&mut adj, *b, &|d| axpy(-1.0, &g, d));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.idx()].value, &self.nodes[b.idx()].value);
                    acc(&mut adj, *a, &|d| {
                        for ((di, gi), bi) in d.iter_mut().zip(&g).zip(bv) {
                            *di += gi * bi;
                        }
                    });
                    acc(&mut adj, *b, &|d| {
                        for ((di, gi), ai) in d.iter_mut().zip(&g).zip(av) {
                            *di += gi * ai;
                        }
                    });
                }
                Op::AddRow { m, v } => {
                    let cols = self.nodes[m.idx()].shape[1];
                    acc(&mut adj, *m, &|d| axpy(1.0, &g, d));
                    acc(&mut adj, *v, &|d| {
                        for row in g.chunks(cols) {
                            axpy(1.0, row, d);
                        }
                    });
                }
                Op::Affine { x, scale } => acc(&mut adj, *x, &|d| axpy(*scale, &g, d)),
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    acc(&mut adj, *x, &|d| {
                        for ((di, gi), yi) in d.iter_mut().zip(&g).zip(y) {
                            *di += gi * yi * (1.0 - yi);
                        }
                    });
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    acc(&mut adj, *x, &|d| {
                        for ((di, gi), yi) in d.iter_mut().zip(&g).zip(y) {
                            *di += gi * (1.0 - yi * yi);
                        }
                    });
                }
                Op::Softplus(x) => {
                    let xv = &self.nodes[x.idx()].value;
                    acc(&mut adj, *x, &|d| {
                        for ((di, gi), xi) in d.iter_mut().zip(&g).zip(xv) {
                            *di += gi * sigmoid(*xi);
                        }
                    });
                }
                Op::Exp(x) => {
                    let y = &node.value;
                    acc(&mut adj, *x, &|d| {
                        for ((di, gi), yi) in d.iter_mut().zip(&g).zip(y) {
                            *di += gi * yi;
                        }
                    });
                }
                Op::Ln(x) => {
                    let xv = &self.nodes[x.idx()].value;
                    acc(&mut adj, *x, &|d| {
                        for ((di, gi), xi) in d.iter_mut().zip(&g).zip(xv) {
                            *di += gi / xi;
                        }
                    });
                }
                Op::Elu(x) => {
                    let (xv, y) = (&self.nodes[x.idx()].value, &node.value);
                    acc(&mut adj, *x, &|d| {
                        for (((di, gi), xi), yi) in d.iter_mut().zip(&g).zip(xv).zip(y) {
                            *di += if *xi > 0.0 { *gi } else { gi * (yi + 1.0) };
                        }
                    });
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = &self.nodes[x.idx()].value;
                    acc(&mut adj, *x, &|d| {
                        for ((di, gi), xi) in d.iter_mut().zip(&g).zip(xv) {
                            if *xi >= *lo && *xi <= *hi {
                                *di += gi;
                            }
                        }
                    });
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.nodes[p.idx()].value.len();
                        acc(&mut adj, *p, &|d| axpy(1.0, &g[off..off + len], d));
                        off += len;
                    }
                }
                Op::Slice { x, start } => {
                    let len = g.len();
                    acc(&mut adj, *x, &|d| axpy(1.0, &g, &mut d[*start..*start + len]));
                }
                Op::StackRows(rows) => {
                    let cols = node.shape[1];
                    for (r, v) in rows.iter().enumerate() {
                        acc(&mut adj, *v, &|d| axpy(1.0, &g[r * cols..(r + 1) * cols], d));
                    }
                }
                Op::Sum(x) => acc(&mut adj, *x, &|d| d.iter_mut().for_each(|v| *v += g[0])),
                Op::Softmax(x) => {
                    let y = &node.value;
                    let gy = dot(&g, y);
                    acc(&mut adj, *x, &|d| {
                        for ((di, gi), yi) in d.iter_mut().zip(&g).zip(y) {
                            *di += yi * (gi - gy);
                        }
                    });
                }
                Op::L2Normalize(x) => {
                    let xv = &self.nodes[x.idx()].value;
                    let y = &node.value;
                    let norm = libm::sqrt(dot(xv, xv)).max(1e-12);
                    let gy = dot(&g, y);
                    acc(&mut adj, *x, &|d| {
                        for ((di, gi), yi) in d.iter_mut().zip(&g).zip(y) {
                            *di += (gi - yi * gy) / norm;
                        }
                    });
                }
                Op::Conv2d { w, b, x, stride } => {
                    let stride = *stride;
                    let [cin, h, wd] = self.nodes[x.idx()].shape;
                    let [cout, ho, wo] = node.shape;
                    let k = cin * 9;
                    let wv = store.values(*w);
                    let xv = &self.nodes[x.idx()].value;
                    acc(&mut adj, *x, &|dx| {
                        for co in 0..cout {
                            let go = &g[co * ho * wo..(co + 1) * ho * wo];
                            for ci in 0..cin {
                                let kern = &wv[co * k + ci * 9..co * k + ci * 9 + 9];
                                let plane = &mut dx[ci * h * wd..(ci + 1) * h * wd];
                                for oy in 0..ho {
                                    for ky in 0..3 {
                                        let iy = (oy * stride + ky) as isize - 1;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let dst = &mut plane[iy as usize * wd..(iy as usize + 1) * wd];
                                        let src = &go[oy * wo..(oy + 1) * wo];
                                        for kx in 0..3 {
                                            let kv = kern[ky * 3 + kx];
                                            for (ox, s) in src.iter().enumerate() {
                                                let ix = (ox * stride + kx) as isize - 1;
                                                if ix >= 0 && ix < wd as isize {
                                                    dst[ix as usize] += kv * s;
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                    pgrad(*w, &|dw| {
                        for co in 0..cout {
                            let go = &g[co * ho * wo..(co + 1) * ho * wo];
                            for ci in 0..cin {
                                let plane = &xv[ci * h * wd..(ci + 1) * h * wd];
                                let dk = &mut dw[co * k + ci * 9..co * k + ci * 9 + 9];
                                for oy in 0..ho {
                                    for ky in 0..3 {
                                        let iy = (oy * stride + ky) as isize - 1;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let src = &plane[iy as usize * wd..(iy as usize + 1) * wd];
                                        let gr = &go[oy * wo..(oy + 1) * wo];
                                        for kx in 0..3 {
                                            let mut s = 0.0;
                                            for (ox, gv) in gr.iter().enumerate() {
                                                let ix = (ox * stride + kx) as isize - 1;
                                                if ix >= 0 && ix < wd as isize {
                                                    s += gv * src[ix as usize];
                                                }
                                            }
                                            dk[ky * 3 + kx] += s;
                                        }
                                    }
                                }
                            }
                        }
                    });
                    pgrad(*b, &|db| {
                        for co in 0..cout {
                            db[co] += g[co * ho * wo..(co + 1) * ho * wo].iter().sum::<f64>();
                        }
                    });
                }
                Op::MeanSpatial(x) => {
                    let [c, h, w] = self.nodes[x.idx()].shape;
                    let n = (h * w) as f64;
                    acc(&mut adj, *x, &|d| {
                        for ci in 0..c {
                            d[ci * h * w..(ci + 1) * h * w].iter_mut().for_each(|v| *v += g[ci] / n);
                        }
                    });
                }
                Op::Reshape(x) => acc(&mut adj, *x, &|d| axpy(1.0, &g, d)),
                Op::ConvToSeq(x) => {
                    let [c, h, w] = self.nodes[x.idx()].shape;
                    acc(&mut adj, *x, &|d| {
                        for ci in 0..c {
                            for t in 0..h {
                                axpy(
                                    1.0,
                                    &g[t * c * w + ci * w..t * c * w + (ci + 1) * w],
                                    &mut d[(ci * h + t) * w..(ci * h + t + 1) * w],
                                );
                            }
                        }
                    });
                }
            }
        }
        adj
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Group, Init};
    use rand_chacha::ChaCha8Rng;
    use rand_core::SeedableRng;

    /// Central differences of `f` with respect to the tape input produced by
    /// `build` at coordinate `i`.
    fn input_fd(x0: &[f64], i: usize, f: &dyn Fn(&[f64]) -> f64) -> f64 {
        let h = 1e-6;
        let mut xp = x0.to_vec();
        let mut xm = x0.to_vec();
        xp[i] += h;
        xm[i] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    }

    fn check_input_grad(x0: Vec<f64>, shape: Shape, build: &dyn Fn(&mut Tape, Var) -> Var) {
        let store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.input(x0.clone(), shape);
        let y = build(&mut tape, x);
        let grads = tape.input_gradients(y, &store);
        let f = |v: &[f64]| {
            let mut t = Tape::new();
            let x = t.input(v.to_vec(), shape);
            let y = build(&mut t, x);
            t.scalar(y)
        };
        for i in 0..x0.len() {
            let num = input_fd(&x0, i, &f);
            let ana = grads[x.idx()].get(i).copied().unwrap_or(0.0);
            assert!((num - ana).abs() < 1e-6 * (1.0 + num.abs()), "coord {i}: analytic {ana} vs numeric {num}");
        }
    }

    fn ramp(n: usize) -> Vec<f64> {
        (0..n).map(|i| libm::sin(i as f64 * 0.7 + 0.3)).collect()
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        check_input_grad(ramp(5), [5, 1, 1], &|t, x| {
            let a = t.sigmoid(x);
            let b = t.tanh(x);
            let c = t.softplus(x);
            let d = t.elu(x);
            let e = t.exp(x);
            let s = t.mul(a, b);
            let s = t.add(s, c);
            let s = t.sub(s, d);
            let s = t.add(s, e);
            t.sum(s)
        });
        check_input_grad(vec![0.5, 1.5, 2.0], [3, 1, 1], &|t, x| {
            let l = t.ln(x);
            let n = t.l2_normalize(x);
            let m = t.mul(l, n);
            t.sum(m)
        });
    }

    #[test]
    fn softmax_and_attention_ops_match_finite_differences() {
        check_input_grad(ramp(12), [4, 3, 1], &|t, m| {
            let q = t.vector(vec![0.3, -0.2, 0.9]);
            let k = t.add_row(m, q);
            let k = t.tanh(k);
            let v = t.vector(vec![1.0, -1.0, 0.5]);
            let scores = t.matvec(k, v);
            let w = t.softmax(scores);
            let ctx = t.weighted_rows(w, m);
            let sq = t.mul(ctx, ctx);
            t.sum(sq)
        });
    }

    #[test]
    fn conv_and_reshape_ops_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = store.add("w", [3, 2 * 9, 1], Group::Decoder, Init::Uniform(0.5), &mut rng);
        let b = store.add("b", [3, 1, 1], Group::Decoder, Init::Uniform(0.5), &mut rng);
        let x0 = ramp(2 * 5 * 4);
        let build = |t: &mut Tape, x: Var| {
            let c = t.conv2d(&store, w, b, x, 2);
            let e = t.elu(c);
            let s = t.conv_to_seq(e);
            let m = t.mean_spatial(e);
            let ss = t.mul(s, s);
            let a = t.sum(ss);
            let bsum = t.sum(m);
            t.add(a, bsum)
        };
        let mut tape = Tape::new();
        let x = tape.input(x0.clone(), [2, 5, 4]);
        let y = build(&mut tape, x);
        let grads = tape.input_gradients(y, &store);
        let f = |v: &[f64]| {
            let mut t = Tape::new();
            let x = t.input(v.to_vec(), [2, 5, 4]);
            let y = build(&mut t, x);
            t.scalar(y)
        };
        for i in 0..x0.len() {
            let num = input_fd(&x0, i, &f);
            assert!((num - grads[x.idx()][i]).abs() < 1e-6, "coord {i}");
        }
        // kernel gradients
        let mut g = Gradients::zeros_like(&store);
        tape.backward(y, 1.0, &store, &mut g, GroupMask::ALL);
        for i in 0..store.values(w).len() {
            let mut sp = store.clone();
            sp.values_mut(w)[i] += 1e-6;
            let mut sm = store.clone();
            sm.values_mut(w)[i] -= 1e-6;
            let eval = |s: &ParamStore| {
                let mut t = Tape::new();
                let x = t.input(x0.clone(), [2, 5, 4]);
                let c = t.conv2d(s, w, b, x, 2);
                let e = t.elu(c);
                let q = t.conv_to_seq(e);
                let m = t.mean_spatial(e);
                let qq = t.mul(q, q);
                let a = t.sum(qq);
                let bs = t.sum(m);
                let y = t.add(a, bs);
                t.scalar(y)
            };
            let num = (eval(&sp) - eval(&sm)) / 2e-6;
            assert!((num - g.values(w)[i]).abs() < 1e-6 * (1.0 + num.abs()));
        }
    }

    #[test]
    fn frozen_groups_receive_no_gradient() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = store.add("w", [2, 3, 1], Group::Discriminator, Init::Uniform(1.0), &mut rng);
        let mut tape = Tape::new();
        let x = tape.vector(vec![1.0, 2.0, 3.0]);
        let y = tape.linear(&store, w, None, x);
        let s = tape.sum(y);
        let mut g = Gradients::zeros_like(&store);
        tape.backward(s, 1.0, &store, &mut g, GroupMask::GENERATOR);
        assert!(g.values(w).iter().all(|v| *v == 0.0));
        tape.backward(s, 1.0, &store, &mut g, GroupMask::ALL);
        assert_eq!(g.values(w), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let store = ParamStore::new();
        let mut t = Tape::new();
        let x = t.vector(vec![-1.0, 0.5, 2.0]);
        let c = t.clamp(x, 0.0, 1.0);
        let s = t.sum(c);
        let g = t.input_gradients(s, &store);
        assert_eq!(g[x.idx()], vec![0.0, 1.0, 0.0]);
    }
}
