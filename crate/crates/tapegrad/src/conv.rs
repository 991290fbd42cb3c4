//! 2-D convolution via im2col plus matrix products.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, Axis, IxDyn};

use crate::graph::{accum, Graph, TensorId};
use crate::Element;

/// Unfold (B,C,H,W) into (B, C*kh*kw, Ho*Wo) patches.
fn im2col<F: Element>(
    x: &ArrayD<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (ArrayD<F>, usize, usize) {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut cols = ArrayD::<F>::zeros(IxDyn(&[b, c * kh * kw, ho * wo]));
    let xs = x.as_slice().expect("im2col: non-contiguous input");
    let cs = cols.as_slice_mut().unwrap();
    for bi in 0..b {
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    let row_base = (bi * c * kh * kw + row) * ho * wo;
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_base = ((bi * c + ci) * h + iy as usize) * w;
                        let o_base = row_base + oy * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cs[o_base + ox] = xs[x_base + ix as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Fold (B, C*kh*kw, Ho*Wo) patch gradients back onto (B,C,H,W).
fn col2im<F: Element>(
    cols: &ArrayD<F>,
    shape: &[usize],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ArrayD<F> {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = ArrayD::<F>::zeros(IxDyn(shape));
    let os = out.as_slice_mut().unwrap();
    let cs = cols.as_slice().expect("col2im: non-contiguous input");
    for bi in 0..b {
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    let row_base = (bi * c * kh * kw + row) * ho * wo;
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_base = ((bi * c + ci) * h + iy as usize) * w;
                        let o_base = row_base + oy * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            os[x_base + ix as usize] += cs[o_base + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

impl<F: Element> Graph<F> {
    /// 2-D convolution: x (B,C,H,W), w (O,C,kh,kw), bias (O,) -> (B,O,Ho,Wo).
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
    ) -> TensorId {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.ndim(), 4, "conv2d input must be (B,C,H,W)");
        assert_eq!(wv.ndim(), 4, "conv2d kernel must be (O,C,kh,kw)");
        assert_eq!(xv.shape()[1], wv.shape()[1], "conv2d channel mismatch");
        let (b, o) = (xv.shape()[0], wv.shape()[0]);
        let (kh, kw) = (wv.shape()[2], wv.shape()[3]);
        let (cols, ho, wo) = im2col(xv, kh, kw, stride, pad);
        let ckk = wv.len() / o;
        let w2 = wv.view().into_shape_with_order((o, ckk)).unwrap();
        let bv = self.value(bias).clone();
        let mut out = ArrayD::<F>::zeros(IxDyn(&[b, o, ho, wo]));
        for bi in 0..b {
            let ci = cols.index_axis(Axis(0), bi);
            let c2 = ci.into_dimensionality::<ndarray::Ix2>().unwrap();
            let mut oi = out.index_axis_mut(Axis(0), bi);
            let mut o2 = oi
                .view_mut()
                .into_shape_with_order((o, ho * wo))
                .unwrap();
            general_mat_mul(F::one(), &w2, &c2, F::zero(), &mut o2);
        }
        // add bias per output channel
        {
            let b1 = bv.view().into_shape_with_order(o).unwrap();
            for bi in 0..b {
                for oc in 0..o {
                    let mut plane = out.index_axis_mut(Axis(0), bi);
                    let mut plane = plane.index_axis_mut(Axis(0), oc);
                    plane += b1[oc];
                }
            }
        }
        let x_shape = xv.shape().to_vec();
        let w_shape = wv.shape().to_vec();
        self.push(
            out,
            Some(Box::new(move |g, gout, grads| {
                let wv = g.value(w);
                let w2 = wv.view().into_shape_with_order((o, ckk)).unwrap();
                let mut dw = Array2::<F>::zeros((o, ckk));
                let mut dcols = ArrayD::<F>::zeros(cols.raw_dim());
                for bi in 0..b {
                    let g2 = gout
                        .index_axis(Axis(0), bi)
                        .into_shape_with_order((o, ho * wo))
                        .unwrap();
                    let c2 = cols
                        .index_axis(Axis(0), bi)
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap();
                    general_mat_mul(F::one(), &g2, &c2.t(), F::one(), &mut dw);
                    let mut di = dcols.index_axis_mut(Axis(0), bi);
                    let mut d2 = di.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
                    general_mat_mul(F::one(), &w2.t(), &g2, F::zero(), &mut d2);
                }
                let dx = col2im(&dcols, &x_shape, kh, kw, stride, pad);
                let mut db = ArrayD::<F>::zeros(IxDyn(&[o]));
                for bi in 0..b {
                    for oc in 0..o {
                        let s: F = gout
                            .index_axis(Axis(0), bi)
                            .index_axis(Axis(0), oc)
                            .iter()
                            .copied()
                            .sum();
                        db[[oc]] += s;
                    }
                }
                accum(grads, x, dx);
                accum(
                    grads,
                    w,
                    dw.into_dyn().into_shape_with_order(IxDyn(&w_shape)).unwrap(),
                );
                accum(grads, bias, db);
            })),
        )
    }
}
