//! Differentiable tensor operations.
//!
//! Every op pushes a node holding the forward value plus a closure that
//! scatters the incoming gradient to the op's parents. Binary elementwise
//! ops broadcast NumPy-style; their backward sums the gradient back down
//! to each parent's shape.

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, Array2, ArrayD, ArrayView2, Axis, IxDyn, Slice, Zip};

use crate::graph::{accum, Graph, TensorId};
use crate::Element;

/// NumPy-style broadcast result shape. Panics on incompatible shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "cannot broadcast shapes {a:?} and {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

fn bcast<F: Element>(a: &ArrayD<F>, shape: &[usize]) -> ArrayD<F> {
    if a.shape() == shape {
        a.clone()
    } else {
        a.broadcast(IxDyn(shape)).expect("broadcast").to_owned()
    }
}

/// Sum `g` down to `shape` (inverse of broadcasting).
pub fn reduce_to_shape<F: Element>(g: &ArrayD<F>, shape: &[usize]) -> ArrayD<F> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for i in 0..shape.len() {
        if out.shape()[i] != shape[i] {
            debug_assert_eq!(shape[i], 1);
            out = out.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    out
}

fn as_2d<F: Element>(a: &ArrayD<F>) -> ArrayView2<'_, F> {
    let d = *a.shape().last().expect("as_2d on 0-d array");
    let rows = a.len() / d.max(1);
    a.view()
        .into_shape_with_order((rows, d))
        .expect("as_2d: non-contiguous array")
}

impl<F: Element> Graph<F> {
    // ---- elementwise binary -------------------------------------------------

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(a, b, |x, y| x + y, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(a, b, |x, y| x - y, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(a, b, |x, y| x * y, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(a, b, |x, y| x / y, BinaryKind::Div)
    }

    fn binary(
        &mut self,
        a: TensorId,
        b: TensorId,
        f: fn(F, F) -> F,
        kind: BinaryKind,
    ) -> TensorId {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = broadcast_shapes(va.shape(), vb.shape());
        let (ba, bb) = (bcast(va, &shape), bcast(vb, &shape));
        let mut out = ba.clone();
        Zip::from(&mut out).and(&bb).for_each(|x, &y| *x = f(*x, y));
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        self.push(
            out,
            Some(Box::new(move |g, gout, grads| {
                let (da, db): (ArrayD<F>, ArrayD<F>) = match kind {
                    BinaryKind::Add => (gout.clone(), gout.clone()),
                    BinaryKind::Sub => (gout.clone(), gout.mapv(|x| -x)),
                    BinaryKind::Mul => {
                        let (va, vb) = (g.value(a), g.value(b));
                        (gout * &bcast(vb, gout.shape()), gout * &bcast(va, gout.shape()))
                    }
                    BinaryKind::Div => {
                        let (va, vb) = (g.value(a), g.value(b));
                        let (ba, bb) = (bcast(va, gout.shape()), bcast(vb, gout.shape()));
                        let da = gout / &bb;
                        let db = -(gout * &ba) / &(&bb * &bb);
                        (da, db)
                    }
                };
                accum(grads, a, reduce_to_shape(&da, &sa));
                accum(grads, b, reduce_to_shape(&db, &sb));
            })),
        )
    }

    /// Elementwise minimum of two same-shape tensors; ties send gradient to `a`.
    pub fn minimum(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.min_max(a, b, true)
    }

    /// Elementwise maximum of two same-shape tensors; ties send gradient to `a`.
    pub fn maximum(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.min_max(a, b, false)
    }

    fn min_max(&mut self, a: TensorId, b: TensorId, take_min: bool) -> TensorId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "minimum/maximum need equal shapes");
        let mut out = va.clone();
        Zip::from(&mut out).and(vb).for_each(|x, &y| {
            *x = if take_min { (*x).min(y) } else { (*x).max(y) }
        });
        self.push(
            out,
            Some(Box::new(move |g, gout, grads| {
                let (va, vb) = (g.value(a), g.value(b));
                let mut da = gout.clone();
                let mut db = gout.clone();
                Zip::from(&mut da).and(va).and(vb).for_each(|x, &p, &q| {
                    let a_wins = if take_min { p <= q } else { p >= q };
                    if !a_wins {
                        *x = F::zero();
                    }
                });
                Zip::from(&mut db).and(va).and(vb).for_each(|x, &p, &q| {
                    let a_wins = if take_min { p <= q } else { p >= q };
                    if a_wins {
                        *x = F::zero();
                    }
                });
                accum(grads, a, da);
                accum(grads, b, db);
            })),
        )
    }

    // ---- elementwise unary --------------------------------------------------

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        let out = self.value(a).mapv(|x| -x);
        self.push(
            out,
            Some(Box::new(move |_, gout, grads| {
                accum(grads, a, gout.mapv(|x| -x));
            })),
        )
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let k = F::from_f64(c);
        let out = self.value(a).mapv(|x| x * k);
        self.push(
            out,
            Some(Box::new(move |_, gout, grads| {
                accum(grads, a, gout.mapv(|x| x * k));
            })),
        )
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let k = F::from_f64(c);
        let out = self.value(a).mapv(|x| x + k);
        self.push(
            out,
            Some(Box::new(move |_, gout, grads| {
                accum(grads, a, gout.clone());
            })),
        )
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let out = self.value(a).mapv(|x| x.max(F::zero()));
        self.push(
            out,
            Some(Box::new(move |g, gout, grads| {
                let mut da = gout.clone();
                Zip::from(&mut da).and(g.value(a)).for_each(|x, &v| {
                    if v <= F::zero() {
                        *x = F::zero();
                    }
                });
                accum(grads, a, da);
            })),
        )
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let one = F::one();
        let out = self.value(a).mapv(|x| one / (one + (-x).exp()));
        let y = out.clone();
        self.push(
            out,
            Some(Box::new(move |_, gout, grads| {
                let mut da = gout.clone();
                Zip::from(&mut da).and(&y).for_each(|x, &v| *x = *x * v * (one - v));
                accum(grads, a, da);
            })),
        )
    }

    pub fn sqrt(&mut self, a: TensorId) -> TensorId {
        let out = self.value(a).mapv(|x| x.sqrt());
        let y = out.clone();
        let half = F::from_f64(0.5);
        self.push(
            out,
            Some(Box::new(move |_, gout, grads| {
                let mut da = gout.clone();
                Zip::from(&mut da).and(&y).for_each(|x, &v| *x = *x * half / v);
                accum(grads, a, da);
            })),
        )
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        let out = self.value(a).mapv(|x| x.abs());
        self.push(
            out,
            Some(Box::new(move |g, gout, grads| {
                let mut da = gout.clone();
                Zip::from(&mut da).and(g.value(a)).for_each(|x, &v| {
                    *x = if v > F::zero() {
                        *x
                    } else if v < F::zero() {
                        -*x
                    } else {
                        F::zero()
                    }
                });
                accum(grads, a, da);
            })),
        )
    }

    pub fn ln(&mut self, a: TensorId) -> TensorId {
        let out = self.value(a).mapv(|x| x.ln());
        self.push(
            out,
            Some(Box::new(move |g, gout, grads| {
                accum(grads, a, gout / g.value(a));
            })),
        )
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let out = self.value(a).mapv(|x| x.exp());
        let y = out.clone();
        self.push(
            out,
            Some(Box::new(move |_, gout, grads| {
                accum(grads, a, gout * &y);
            })),
        )
    }

    /// Clamp values into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> TensorId {
        let (lo, hi) = (F::from_f64(lo), F::from_f64(hi));
        let out = self.value(a).mapv(|x| x.max(lo).min(hi));
        self.push(
            out,
            Some(Box::new(move |g, gout, grads| {
                let mut da = gout.clone();
                Zip::from(&mut da).and(g.value(a)).for_each(|x, &v| {
                    if v < lo || v > hi {
                        *x = F::zero();
                    }
                });
                accum(grads, a, da);
            })),
        )
    }

    /// Identity forward; backward multiplies the gradient by `-lambda`.
    pub fn grad_reverse(&mut self, a: TensorId, lambda: f64) -> TensorId {
        let k = F::from_f64(-lambda);
        let out = self.value(a).clone();
        self.push(
            out,
            Some(Box::new(move |_, gout, grads| {
                accum(grads, a, gout.mapv(|x| x * k));
            })),
        )
    }

    // ---- matrix products ----------------------------------------------------

    /// 2-D matrix product: (m,k) x (k,n) -> (m,n).
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        assert_eq!(va.ndim(), 2, "matmul lhs must be 2-d");
        assert_eq!(vb.ndim(), 2, "matmul rhs must be 2-d");
        let a2 = va.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b2 = vb.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        assert_eq!(a2.ncols(), b2.nrows(), "matmul inner dims differ");
        let mut out = Array2::<F>::zeros((a2.nrows(), b2.ncols()));
        general_mat_mul(F::one(), &a2, &b2, F::zero(), &mut out);
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, gout, grads| {
                let a2 = g.value(a).view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let b2 = g.value(b).view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let g2 = gout.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let mut da = Array2::<F>::zeros((a2.nrows(), a2.ncols()));
                let mut db = Array2::<F>::zeros((b2.nrows(), b2.ncols()));
                general_mat_mul(F::one(), &g2, &b2.t(), F::zero(), &mut da);
                general_mat_mul(F::one(), &a2.t(), &g2, F::zero(), &mut db);
                accum(grads, a, da.into_dyn());
                accum(grads, b, db.into_dyn());
            })),
        )
    }

    /// Batched matrix product: (B,m,k) x (B,k,n) -> (B,m,n).
    pub fn bmm(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.ndim(), 3, "bmm lhs must be 3-d");
        assert_eq!(vb.ndim(), 3, "bmm rhs must be 3-d");
        let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let (bs2, k2, n) = (vb.shape()[0], vb.shape()[1], vb.shape()[2]);
        assert_eq!(bs, bs2, "bmm batch dims differ");
        assert_eq!(k, k2, "bmm inner dims differ");
        let mut out = ArrayD::<F>::zeros(IxDyn(&[bs, m, n]));
        for i in 0..bs {
            let ai = va.index_axis(Axis(0), i);
            let bi = vb.index_axis(Axis(0), i);
            let a2 = ai.into_dimensionality::<ndarray::Ix2>().unwrap();
            let b2 = bi.into_dimensionality::<ndarray::Ix2>().unwrap();
            let mut oi = out.index_axis_mut(Axis(0), i);
            let mut o2 = oi.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
            general_mat_mul(F::one(), &a2, &b2, F::zero(), &mut o2);
        }
        self.push(
            out,
            Some(Box::new(move |g, gout, grads| {
                let va = g.value(a);
                let vb = g.value(b);
                let mut da = ArrayD::<F>::zeros(va.raw_dim());
                let mut db = ArrayD::<F>::zeros(vb.raw_dim());
                for i in 0..va.shape()[0] {
                    let a2 = va.index_axis(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
                    let b2 = vb.index_axis(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
                    let g2 = gout.index_axis(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
                    {
                        let mut dai = da.index_axis_mut(Axis(0), i);
                        let mut d2 = dai.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
                        general_mat_mul(F::one(), &g2, &b2.t(), F::zero(), &mut d2);
                    }
                    {
                        let mut dbi = db.index_axis_mut(Axis(0), i);
                        let mut d2 = dbi.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
                        general_mat_mul(F::one(), &a2.t(), &g2, F::zero(), &mut d2);
                    }
                }
                accum(grads, a, da);
                accum(grads, b, db);
            })),
        )
    }

    // ---- shape manipulation ---------------------------------------------

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> TensorId {
        let v = self.value(a);
        let old = v.shape().to_vec();
        let out = v
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: incompatible shape");
        self.push(
            out,
            Some(Box::new(move |_, gout, grads| {
                let da = gout
                    .clone()
                    .into_shape_with_order(IxDyn(&old))
                    .expect("reshape backward");
                accum(grads, a, da);
            })),
        )
    }

    pub fn permute(&mut self, a: TensorId, axes: &[usize]) -> TensorId {
        let axes_v = axes.to_vec();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        let out = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(&axes_v))
            .as_standard_layout()
            .to_owned();
        self.push(
            out,
            Some(Box::new(move |_, gout, grads| {
                let da = gout
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned();
                accum(grads, a, da);
            })),
        )
    }

    pub fn concat(&mut self, axis: usize, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        let parts_v = parts.to_vec();
        let lens: Vec<usize> = parts.iter().map(|&p| self.value(p).shape()[axis]).collect();
        self.push(
            out,
            Some(Box::new(move |_, gout, grads| {
                let mut start = 0usize;
                for (&p, &len) in parts_v.iter().zip(&lens) {
                    let piece = gout
                        .slice_axis(Axis(axis), Slice::from(start..start + len))
                        .to_owned();
                    accum(grads, p, piece);
                    start += len;
                }
            })),
        )
    }

    /// Contiguous slice of `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: TensorId, axis: usize, start: usize, len: usize) -> TensorId {
        let out = self
            .value(a)
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.push(
            out,
            Some(Box::new(move |g, gout, grads| {
                let mut da = ArrayD::<F>::zeros(g.value(a).raw_dim());
                da.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(gout);
                accum(grads, a, da);
            })),
        )
    }

    /// Gather the given indices along `axis` (duplicates allowed).
    pub fn index_select(&mut self, a: TensorId, axis: usize, indices: &[usize]) -> TensorId {
        let out = self.value(a).select(Axis(axis), indices);
        let idx = indices.to_vec();
        self.push(
            out,
            Some(Box::new(move |g, gout, grads| {
                let mut da = ArrayD::<F>::zeros(g.value(a).raw_dim());
                for (i, &src) in idx.iter().enumerate() {
                    let gi = gout.index_axis(Axis(axis), i);
                    let mut slot = da.index_axis_mut(Axis(axis), src);
                    slot += &gi;
                }
                accum(grads, a, da);
            })),
        )
    }

    /// Stack `n` copies of `a` along a new leading axis.
    pub fn tile_batch(&mut self, a: TensorId, n: usize) -> TensorId {
        let v = self.value(a);
        let mut shape = vec![n];
        shape.extend_from_slice(v.shape());
        let out = v
            .view()
            .insert_axis(Axis(0))
            .broadcast(IxDyn(&shape))
            .unwrap()
            .to_owned();
        self.push(
            out,
            Some(Box::new(move |_, gout, grads| {
                accum(grads, a, gout.sum_axis(Axis(0)));
            })),
        )
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum_axis_op(&mut self, a: TensorId, axis: usize, keepdim: bool) -> TensorId {
        let v = self.value(a);
        let n = v.shape()[axis];
        let mut out = v.sum_axis(Axis(axis));
        if keepdim {
            out = out.insert_axis(Axis(axis));
        }
        let full = v.shape().to_vec();
        self.push(
            out,
            Some(Box::new(move |_, gout, grads| {
                let gk = if keepdim {
                    gout.clone()
                } else {
                    gout.clone().insert_axis(Axis(axis))
                };
                let da = gk.broadcast(IxDyn(&full)).unwrap().to_owned();
                accum(grads, a, da);
                let _ = n;
            })),
        )
    }

    pub fn mean_axis_op(&mut self, a: TensorId, axis: usize, keepdim: bool) -> TensorId {
        let n = self.value(a).shape()[axis];
        let s = self.sum_axis_op(a, axis, keepdim);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let total: F = self.value(a).iter().copied().sum();
        let out = ArrayD::from_elem(IxDyn(&[]), total);
        self.push(
            out,
            Some(Box::new(move |g, gout, grads| {
                let k = *gout.iter().next().unwrap();
                let da = ArrayD::from_elem(g.value(a).raw_dim(), k);
                accum(grads, a, da);
            })),
        )
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    // ---- fused neural-net ops ----------------------------------------------

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a);
        let mut out = v.clone();
        {
            let d = *v.shape().last().unwrap();
            let rows = v.len() / d;
            let mut o2 = out
                .view_mut()
                .into_shape_with_order((rows, d))
                .expect("softmax: non-contiguous");
            for mut row in o2.rows_mut() {
                let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
                row.mapv_inplace(|x| (x - mx).exp());
                let s: F = row.iter().copied().sum();
                row.mapv_inplace(|x| x / s);
            }
        }
        let y = out.clone();
        self.push(
            out,
            Some(Box::new(move |_, gout, grads| {
                // dx = y * (g - sum(g*y)) rowwise
                let d = *y.shape().last().unwrap();
                let rows = y.len() / d;
                let y2 = y.view().into_shape_with_order((rows, d)).unwrap();
                let g2 = gout.view().into_shape_with_order((rows, d)).unwrap();
                let mut da = ArrayD::<F>::zeros(y.raw_dim());
                {
                    let mut da2 = da.view_mut().into_shape_with_order((rows, d)).unwrap();
                    for r in 0..rows {
                        let yr = y2.row(r);
                        let gr = g2.row(r);
                        let dot: F = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                        let mut dr = da2.row_mut(r);
                        for j in 0..d {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                }
                accum(grads, a, da);
            })),
        )
    }

    /// Per-row softmax cross-entropy against integer class targets.
    /// `logits` is (N, C); returns the (N,) vector of losses.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, targets: &[usize]) -> TensorId {
        let v = self.value(logits);
        assert_eq!(v.ndim(), 2, "softmax_cross_entropy expects (N, C)");
        let (n, c) = (v.shape()[0], v.shape()[1]);
        assert_eq!(targets.len(), n);
        let v2 = as_2d(v);
        let mut probs = Array2::<F>::zeros((n, c));
        let mut losses = ArrayD::<F>::zeros(IxDyn(&[n]));
        for i in 0..n {
            let row = v2.row(i);
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut denom = F::zero();
            for j in 0..c {
                let e = (row[j] - mx).exp();
                probs[(i, j)] = e;
                denom = denom + e;
            }
            for j in 0..c {
                probs[(i, j)] = probs[(i, j)] / denom;
            }
            let t = targets[i];
            assert!(t < c, "target class out of range");
            losses[i] = -(probs[(i, t)].ln());
        }
        let tg = targets.to_vec();
        self.push(
            losses,
            Some(Box::new(move |_, gout, grads| {
                let mut da = probs.clone();
                for i in 0..n {
                    let gi = gout[i];
                    for j in 0..c {
                        let onehot = if j == tg[i] { F::one() } else { F::zero() };
                        da[(i, j)] = (da[(i, j)] - onehot) * gi;
                    }
                }
                accum(grads, logits, da.into_dyn());
            })),
        )
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> TensorId {
        let v = self.value(x);
        let d = *v.shape().last().unwrap();
        assert_eq!(self.value(gamma).len(), d);
        assert_eq!(self.value(beta).len(), d);
        let rows = v.len() / d;
        let epsf = F::from_f64(eps);
        let mut xhat = ArrayD::<F>::zeros(v.raw_dim());
        let mut inv_std = vec![F::zero(); rows];
        {
            let v2 = as_2d(v);
            let mut xh2 = xhat.view_mut().into_shape_with_order((rows, d)).unwrap();
            for r in 0..rows {
                let row = v2.row(r);
                let mean: F = row.iter().copied().sum::<F>() / F::from_f64(d as f64);
                let var: F = row
                    .iter()
                    .map(|&a| (a - mean) * (a - mean))
                    .sum::<F>()
                    / F::from_f64(d as f64);
                let istd = F::one() / (var + epsf).sqrt();
                inv_std[r] = istd;
                let mut out = xh2.row_mut(r);
                for j in 0..d {
                    out[j] = (row[j] - mean) * istd;
                }
            }
        }
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();
        let mut out = xhat.clone();
        {
            let mut o2 = out.view_mut().into_shape_with_order((rows, d)).unwrap();
            let g1 = gv.view().into_shape_with_order(d).unwrap();
            let b1 = bv.view().into_shape_with_order(d).unwrap();
            for r in 0..rows {
                let mut row = o2.row_mut(r);
                for j in 0..d {
                    row[j] = row[j] * g1[j] + b1[j];
                }
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, gout, grads| {
                let gv = g.value(gamma);
                let g1 = gv.view().into_shape_with_order(d).unwrap();
                let xh2 = xhat.view().into_shape_with_order((rows, d)).unwrap();
                let go2 = gout.view().into_shape_with_order((rows, d)).unwrap();
                let mut dgamma = ArrayD::<F>::zeros(g.value(gamma).raw_dim());
                let mut dbeta = ArrayD::<F>::zeros(g.value(beta).raw_dim());
                let mut dx = ArrayD::<F>::zeros(g.value(x).raw_dim());
                {
                    let dg1 = dgamma.view_mut().into_shape_with_order(d).unwrap();
                    let db1 = dbeta.view_mut().into_shape_with_order(d).unwrap();
                    let mut dg1 = dg1;
                    let mut db1 = db1;
                    let mut dx2 = dx.view_mut().into_shape_with_order((rows, d)).unwrap();
                    let dn = F::from_f64(d as f64);
                    for r in 0..rows {
                        let go = go2.row(r);
                        let xh = xh2.row(r);
                        let mut dxhat = vec![F::zero(); d];
                        for j in 0..d {
                            dg1[j] += go[j] * xh[j];
                            db1[j] += go[j];
                            dxhat[j] = go[j] * g1[j];
                        }
                        let mean_dxhat: F = dxhat.iter().copied().sum::<F>() / dn;
                        let mean_dxhat_xhat: F = dxhat
                            .iter()
                            .zip(xh.iter())
                            .map(|(&a, &b)| a * b)
                            .sum::<F>()
                            / dn;
                        let istd = inv_std[r];
                        let mut dxr = dx2.row_mut(r);
                        for j in 0..d {
                            dxr[j] = istd * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
                        }
                    }
                }
                accum(grads, x, dx);
                accum(grads, gamma, dgamma);
                accum(grads, beta, dbeta);
            })),
        )
    }

    /// `x (.., d) -> x @ w (d, o) + b (o)`, flattening leading axes.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> TensorId {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("linear on 0-d input");
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let o = self.shape(w)[1];
        let x2 = self.reshape(x, &[rows, d]);
        let y2 = self.matmul(x2, w);
        let y2 = self.add(y2, b);
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.push(o);
        self.reshape(y2, &out_shape)
    }
}

#[derive(Copy, Clone)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}
