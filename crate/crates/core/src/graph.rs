//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op eagerly (values are computed on insertion)
//! and [`Graph::backward`] walks the tape in reverse. Leaves are either
//! trainable (`param`) or constant; a node requires a gradient iff one of its
//! inputs does, so [`Graph::detach`] is a hard stop-gradient barrier.
//!
//! Activations use NHWC layout: images are `[B, H, W, C]`, matrices `[B, D]`.

use crate::tensor::{lit, Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_dim(&self, input: usize) -> usize {
        (input + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// How a batch-norm node normalizes its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormStats {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with externally supplied running statistics.
    Running,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, b_transposed: bool },
    AddBias { x: Var, bias: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softplus(Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Option<Vec<T>>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        stats: NormStats,
    },
    GlobalAvgPool(Var),
    L2Normalize { x: Var, norms: Vec<T> },
    RowDot(Var, Var),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    LogSumExpRows(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics produced by a batch-norm node in [`NormStats::Batch`] mode.
#[derive(Clone, Debug)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    /// Unbiased variance (Bessel-corrected), as used for running estimates.
    pub var_unbiased: Vec<T>,
}

/// Gradients of one scalar with respect to every node that required one.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when none flowed to it.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Constant leaf; no gradient ever flows into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Stop-gradient: a constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    /// `a [m,k] . b [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul shapes {sa:?} {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        self.push(
            Tensor::new([m, n], out),
            Op::MatMul {
                a,
                b,
                b_transposed: false,
            },
            rg,
        )
    }

    /// `a [m,k] . b[n,k]^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[1], "matmul_t shapes {sa:?} {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            1,
            k as isize,
            T::zero(),
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        self.push(
            Tensor::new([m, n], out),
            Op::MatMul {
                a,
                b,
                b_transposed: true,
            },
            rg,
        )
    }

    /// Adds a `[C]` bias to every row of `x [.., C]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let c = *self.shape(x).last().expect("add_bias on scalar");
        assert_eq!(self.shape(bias), &[c], "bias shape");
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o = *o + bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        self.push(out, Op::AddBias { x, bias }, rg)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.value(x).map(softplus);
        let rg = self.rg(&[x]);
        self.push(t, Op::Softplus(x), rg)
    }

    /// Bias-free convolution of `x [B,H,W,Cin]` with `w [k*k*Cin, Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "conv2d expects NHWC input");
        let (b, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let ws = self.shape(w);
        let patch = geom.kernel * geom.kernel * cin;
        assert_eq!(ws.len(), 2, "conv weight must be [k*k*cin, cout]");
        assert_eq!(ws[0], patch, "conv weight rows must equal k*k*cin");
        let cout = ws[1];
        let (oh, ow) = (geom.out_dim(h), geom.out_dim(wd));
        let cols = im2col(self.value(x).data(), b, h, wd, cin, geom);
        let m = b * oh * ow;
        let mut out = vec![T::zero(); m * cout];
        T::gemm(
            m,
            patch,
            cout,
            &cols,
            patch as isize,
            1,
            self.value(w).data(),
            cout as isize,
            1,
            T::zero(),
            &mut out,
        );
        let keep_cols = self.requires_grad(w);
        let rg = self.rg(&[x, w]);
        self.push(
            Tensor::new([b, oh, ow, cout], out),
            Op::Conv2d {
                x,
                w,
                geom,
                cols: keep_cols.then_some(cols),
            },
            rg,
        )
    }

    /// Batch normalization over every axis but the last.
    ///
    /// In [`NormStats::Batch`] mode the batch moments are returned so the
    /// caller can maintain running estimates; in [`NormStats::Running`] mode
    /// `running` must supply `(mean, var)`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> (Var, Option<BatchMoments<T>>) {
        let c = *self.shape(x).last().expect("batch_norm on scalar");
        assert_eq!(self.shape(gamma), &[c]);
        assert_eq!(self.shape(beta), &[c]);
        let xv = self.value(x).data();
        let m = xv.len() / c.max(1);
        let (mean, var, moments) = match stats {
            NormStats::Batch => {
                assert!(m > 0, "batch_norm over an empty batch");
                let mut mean = vec![T::zero(); c];
                for row in xv.chunks(c) {
                    for (a, &v) in mean.iter_mut().zip(row) {
                        *a = *a + v;
                    }
                }
                let inv_m = T::one() / lit::<T>(m as f64);
                mean.iter_mut().for_each(|a| *a = *a * inv_m);
                let mut var = vec![T::zero(); c];
                for row in xv.chunks(c) {
                    for ((a, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                        let d = v - mu;
                        *a = *a + d * d;
                    }
                }
                let unbiased = if m > 1 {
                    let s = lit::<T>(m as f64 / (m - 1) as f64);
                    var.iter().map(|&v| v * inv_m * s).collect()
                } else {
                    vec![T::zero(); c]
                };
                var.iter_mut().for_each(|a| *a = *a * inv_m);
                let moments = BatchMoments {
                    mean: mean.clone(),
                    var_unbiased: unbiased,
                };
                (mean, var, Some(moments))
            }
            NormStats::Running => {
                let (rm, rv) = running.expect("running statistics required");
                (rm.to_vec(), rv.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(c) {
            for j in 0..c {
                let xh = (row[j] - mean[j]) * inv_std[j];
                xhat.push(xh);
                out.push(g[j] * xh + bt[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            Tensor::new(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                stats,
            },
            rg,
        );
        (v, moments)
    }

    /// `[B,H,W,C] -> [B,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4);
        let (b, hw, c) = (s[0], s[1] * s[2], s[3]);
        let inv = T::one() / lit::<T>(hw as f64);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * c];
        for i in 0..b {
            let dst = &mut out[i * c..(i + 1) * c];
            for p in 0..hw {
                let src = &xv[(i * hw + p) * c..(i * hw + p + 1) * c];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = *d + v;
                }
            }
            dst.iter_mut().for_each(|d| *d = *d * inv);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new([b, c], out), Op::GlobalAvgPool(x), rg)
    }

    /// Row-wise `x / max(||x||, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        let d = s[1];
        let xv = self.value(x).data();
        let mut norms = Vec::with_capacity(s[0]);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(d.max(1)).take(s[0]) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(s, out), Op::L2Normalize { x, norms }, rg)
    }

    /// `[B,D] x [B,D] -> [B]` row-wise inner products.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2);
        assert_eq!(s.as_slice(), self.shape(b), "row_dot shape mismatch");
        let d = s[1];
        let out: Vec<T> = (0..s[0])
            .map(|i| {
                let ra = &self.value(a).data()[i * d..(i + 1) * d];
                let rb = &self.value(b).data()[i * d..(i + 1) * d];
                ra.iter().zip(rb).map(|(&x, &y)| x * y).sum()
            })
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new([s[0]], out), Op::RowDot(a, b), rg)
    }

    /// `[B,p] ++ [B,q] -> [B,p+q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[0] == sb[0], "concat_cols shapes");
        let (p, q) = (sa[1], sb[1]);
        let mut out = Vec::with_capacity(sa[0] * (p + q));
        for i in 0..sa[0] {
            out.extend_from_slice(&self.value(a).data()[i * p..(i + 1) * p]);
            out.extend_from_slice(&self.value(b).data()[i * q..(i + 1) * q]);
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new([sa[0], p + q], out), Op::ConcatCols(a, b), rg)
    }

    /// Concatenation along the leading dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let ts: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let t = Tensor::cat_rows(&ts);
        let rg = self.rg(parts);
        self.push(t, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Rows `start..end` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let idx: Vec<usize> = (start..end).collect();
        let t = self.value(x).select_rows(&idx);
        let rg = self.rg(&[x]);
        self.push(t, Op::SliceRows { x, start }, rg)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let t = self.value(x).select_rows(idx);
        let rg = self.rg(&[x]);
        self.push(
            t,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// `[B,K] -> [B]`, stable `log sum exp` per row.
    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        let k = s[1];
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(k.max(1))
            .take(s[0])
            .map(|row| {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln()
            })
            .collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::new([s[0]], out), Op::LogSumExpRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(t, Op::Sum(x), rg)
    }

    /// Mean over all elements; the mean of an empty tensor is zero.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.value(x).sum();
        let v = if n == 0 { T::zero() } else { s / lit::<T>(n as f64) };
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(v), Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape.to_vec());
        let rg = self.rg(&[x]);
        self.push(t, Op::Reshape(x), rg)
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        self.backward_with(loss, Tensor::full(self.shape(loss).to_vec(), T::one()))
    }

    /// Reverse pass seeded with an arbitrary cotangent for `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Grads<T> {
        assert_eq!(seed.shape(), self.shape(out), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[out.0].requires_grad {
            return Grads { grads };
        }
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_transposed } => {
                let (a, b) = (*a, *b);
                let av = self.value(a);
                let bv = self.value(b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = g.shape()[1];
                if self.requires_grad(a) {
                    // dA = G . B^T (or G . B when b is stored transposed)
                    let mut da = vec![T::zero(); m * k];
                    let (rsb, csb) = if *b_transposed {
                        (k as isize, 1)
                    } else {
                        (1, n as isize)
                    };
                    T::gemm(m, n, k, gd, n as isize, 1, bv.data(), rsb, csb, T::zero(), &mut da);
                    self.accum(grads, a, Tensor::new([m, k], da));
                }
                if self.requires_grad(b) {
                    if *b_transposed {
                        // dB [n,k] = G^T . A
                        let mut db = vec![T::zero(); n * k];
                        T::gemm(n, m, k, gd, 1, n as isize, av.data(), k as isize, 1, T::zero(), &mut db);
                        self.accum(grads, b, Tensor::new([n, k], db));
                    } else {
                        // dB [k,n] = A^T . G
                        let mut db = vec![T::zero(); k * n];
                        T::gemm(k, m, n, av.data(), 1, k as isize, gd, n as isize, 1, T::zero(), &mut db);
                        self.accum(grads, b, Tensor::new([k, n], db));
                    }
                }
            }
            Op::AddBias { x, bias } => {
                self.accum(grads, *x, g.clone());
                if self.requires_grad(*bias) {
                    let c = self.shape(*bias)[0];
                    let mut db = vec![T::zero(); c];
                    for row in gd.chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    self.accum(grads, *bias, Tensor::new([c], db));
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let d = gd.iter().zip(self.value(*b).data()).map(|(&x, &y)| x * y).collect();
                    self.accum(grads, *a, Tensor::new(g.shape().to_vec(), d));
                }
                if self.requires_grad(*b) {
                    let d = gd.iter().zip(self.value(*a).data()).map(|(&x, &y)| x * y).collect();
                    self.accum(grads, *b, Tensor::new(g.shape().to_vec(), d));
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accum(grads, *x, g.map(|v| v * c));
            }
            Op::Relu(x) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| if y > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accum(grads, *x, Tensor::new(g.shape().to_vec(), d));
            }
            Op::Softplus(x) => {
                let d = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &xv)| gv * sigmoid(xv))
                    .collect();
                self.accum(grads, *x, Tensor::new(g.shape().to_vec(), d));
            }
            Op::Conv2d { x, w, geom, cols } => {
                let xs = self.shape(*x).to_vec();
                let (b, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3]);
                let cout = self.shape(*w)[1];
                let patch = geom.kernel * geom.kernel * cin;
                let m = g.len() / cout.max(1);
                if self.requires_grad(*w) {
                    let cols = cols.as_ref().expect("conv cols retained for weight grad");
                    let mut dw = vec![T::zero(); patch * cout];
                    T::gemm(
                        patch,
                        m,
                        cout,
                        cols,
                        1,
                        patch as isize,
                        gd,
                        cout as isize,
                        1,
                        T::zero(),
                        &mut dw,
                    );
                    self.accum(grads, *w, Tensor::new([patch, cout], dw));
                }
                if self.requires_grad(*x) {
                    let mut dcols = vec![T::zero(); m * patch];
                    T::gemm(
                        m,
                        cout,
                        patch,
                        gd,
                        cout as isize,
                        1,
                        self.value(*w).data(),
                        1,
                        cout as isize,
                        T::zero(),
                        &mut dcols,
                    );
                    let dx = col2im(&dcols, b, h, wd, cin, *geom);
                    self.accum(grads, *x, Tensor::new(xs, dx));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                stats,
            } => {
                let c = inv_std.len();
                let m = gd.len() / c.max(1);
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (grow, xrow) in gd.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        sum_g[j] = sum_g[j] + grow[j];
                        sum_gx[j] = sum_gx[j] + grow[j] * xrow[j];
                    }
                }
                if self.requires_grad(*gamma) {
                    self.accum(grads, *gamma, Tensor::new([c], sum_gx.clone()));
                }
                if self.requires_grad(*beta) {
                    self.accum(grads, *beta, Tensor::new([c], sum_g.clone()));
                }
                if self.requires_grad(*x) {
                    let mut dx = Vec::with_capacity(gd.len());
                    match stats {
                        NormStats::Batch => {
                            let inv_m = T::one() / lit::<T>(m as f64);
                            for (grow, xrow) in gd.chunks(c).zip(xhat.chunks(c)) {
                                for j in 0..c {
                                    let k = gam[j] * inv_std[j];
                                    dx.push(
                                        k * (grow[j] - inv_m * sum_g[j] - xrow[j] * inv_m * sum_gx[j]),
                                    );
                                }
                            }
                        }
                        NormStats::Running => {
                            for grow in gd.chunks(c) {
                                for j in 0..c {
                                    dx.push(grow[j] * gam[j] * inv_std[j]);
                                }
                            }
                        }
                    }
                    self.accum(grads, *x, Tensor::new(g.shape().to_vec(), dx));
                }
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x).to_vec();
                let (b, hw, c) = (xs[0], xs[1] * xs[2], xs[3]);
                let inv = T::one() / lit::<T>(hw as f64);
                let mut dx = vec![T::zero(); b * hw * c];
                for i in 0..b {
                    let src = &gd[i * c..(i + 1) * c];
                    for p in 0..hw {
                        let dst = &mut dx[(i * hw + p) * c..(i * hw + p + 1) * c];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d = v * inv;
                        }
                    }
                }
                self.accum(grads, *x, Tensor::new(xs, dx));
            }
            Op::L2Normalize { x, norms } => {
                let d = g.shape()[1];
                let y = node.value.data();
                let mut dx = Vec::with_capacity(gd.len());
                for (i, &n) in norms.iter().enumerate() {
                    let yr = &y[i * d..(i + 1) * d];
                    let gr = &gd[i * d..(i + 1) * d];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| (gv - yv * dot) / n));
                }
                self.accum(grads, *x, Tensor::new(g.shape().to_vec(), dx));
            }
            Op::RowDot(a, b) => {
                let s = self.shape(*a).to_vec();
                let d = s[1];
                let scaled = |other: &Tensor<T>| {
                    let mut out = Vec::with_capacity(other.len());
                    for (i, &gv) in gd.iter().enumerate() {
                        out.extend(other.data()[i * d..(i + 1) * d].iter().map(|&v| v * gv));
                    }
                    Tensor::new(s.clone(), out)
                };
                if self.requires_grad(*a) {
                    let t = scaled(self.value(*b));
                    self.accum(grads, *a, t);
                }
                if self.requires_grad(*b) {
                    let t = scaled(self.value(*a));
                    self.accum(grads, *b, t);
                }
            }
            Op::ConcatCols(a, b) => {
                let (p, q) = (self.shape(*a)[1], self.shape(*b)[1]);
                let rows = g.shape()[0];
                let mut da = Vec::with_capacity(rows * p);
                let mut db = Vec::with_capacity(rows * q);
                for row in gd.chunks(p + q).take(rows) {
                    da.extend_from_slice(&row[..p]);
                    db.extend_from_slice(&row[p..]);
                }
                self.accum(grads, *a, Tensor::new([rows, p], da));
                self.accum(grads, *b, Tensor::new([rows, q], db));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let t = Tensor::new(self.shape(p).to_vec(), gd[offset..offset + n].to_vec());
                    offset += n;
                    self.accum(grads, p, t);
                }
            }
            Op::SliceRows { x, start } => {
                let xs = self.shape(*x).to_vec();
                let w = self.value(*x).row_len();
                let mut dx = vec![T::zero(); self.value(*x).len()];
                dx[start * w..start * w + gd.len()].copy_from_slice(gd);
                self.accum(grads, *x, Tensor::new(xs, dx));
            }
            Op::GatherRows { x, idx } => {
                let xs = self.shape(*x).to_vec();
                let w = self.value(*x).row_len();
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (r, &i) in idx.iter().enumerate() {
                    for (d, &v) in dx[i * w..(i + 1) * w].iter_mut().zip(&gd[r * w..(r + 1) * w]) {
                        *d = *d + v;
                    }
                }
                self.accum(grads, *x, Tensor::new(xs, dx));
            }
            Op::LogSumExpRows(x) => {
                let xs = self.shape(*x).to_vec();
                let k = xs[1];
                let xv = self.value(*x).data();
                let lse = node.value.data();
                let mut dx = Vec::with_capacity(xv.len());
                for (i, row) in xv.chunks(k.max(1)).take(xs[0]).enumerate() {
                    dx.extend(row.iter().map(|&v| gd[i] * (v - lse[i]).exp()));
                }
                self.accum(grads, *x, Tensor::new(xs, dx));
            }
            Op::Sum(x) => {
                let t = Tensor::full(self.shape(*x).to_vec(), gd[0]);
                self.accum(grads, *x, t);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1);
                let t = Tensor::full(self.shape(*x).to_vec(), gd[0] / lit::<T>(n as f64));
                self.accum(grads, *x, t);
            }
            Op::Reshape(x) => {
                let t = g.clone().reshape(self.shape(*x).to_vec());
                self.accum(grads, *x, t);
            }
        }
    }
}

pub fn softplus<T: Real>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn im2col<T: Real>(x: &[T], b: usize, h: usize, w: usize, cin: usize, geom: ConvGeom) -> Vec<T> {
    let (oh, ow) = (geom.out_dim(h), geom.out_dim(w));
    let k = geom.kernel;
    let patch = k * k * cin;
    let mut cols = vec![T::zero(); b * oh * ow * patch];
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((n * oh + oy) * ow + ox) * patch;
                for ky in 0..k {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((n * h + iy as usize) * w + ix as usize) * cin;
                        let dst = row + (ky * k + kx) * cin;
                        cols[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], b: usize, h: usize, w: usize, cin: usize, geom: ConvGeom) -> Vec<T> {
    let (oh, ow) = (geom.out_dim(h), geom.out_dim(w));
    let k = geom.kernel;
    let patch = k * k * cin;
    let mut x = vec![T::zero(); b * h * w * cin];
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((n * oh + oy) * ow + ox) * patch;
                for ky in 0..k {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((n * h + iy as usize) * w + ix as usize) * cin;
                        let src = row + (ky * k + kx) * cin;
                        for (d, &v) in x[dst..dst + cin].iter_mut().zip(&cols[src..src + cin]) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
    x
}
