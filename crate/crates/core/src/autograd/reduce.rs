use super::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// `(outer, len, inner)` split of `shape` around `axis`.
fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn sum_all(&self, a: &Var) -> Var {
        let shape = a.shape().to_vec();
        self.record(Tensor::scalar(a.value().sum()), &[a], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean_all(&self, a: &Var) -> Var {
        let n = a.value().numel() as f64;
        let s = self.sum_all(a);
        self.scale(&s, 1.0 / n)
    }

    /// Sum over `axis`, keeping it with length 1.
    pub fn sum_axis(&self, a: &Var, axis: usize) -> Result<Var> {
        if axis >= a.shape().len() {
            return Err(shape_err!("axis {axis} out of range for {:?}", a.shape()));
        }
        let in_shape = a.shape().to_vec();
        let (outer, len, inner) = split(&in_shape, axis);
        let mut out_shape = in_shape.clone();
        out_shape[axis] = 1;
        let mut out = Tensor::zeros(&out_shape);
        {
            let (x, o) = (a.value().data(), out.data_mut());
            for p in 0..outer {
                for l in 0..len {
                    let src = &x[(p * len + l) * inner..(p * len + l + 1) * inner];
                    let dst = &mut o[p * inner..(p + 1) * inner];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
        Ok(self.record(out, &[a], move |g, _| {
            let mut gx = Tensor::zeros(&in_shape);
            let (gd, gxd) = (g.data(), gx.data_mut());
            for p in 0..outer {
                for l in 0..len {
                    gxd[(p * len + l) * inner..(p * len + l + 1) * inner]
                        .copy_from_slice(&gd[p * inner..(p + 1) * inner]);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Max over `axis`, keeping it with length 1. The gradient flows to the
    /// first maximal element.
    pub fn max_axis(&self, a: &Var, axis: usize) -> Result<Var> {
        if axis >= a.shape().len() {
            return Err(shape_err!("axis {axis} out of range for {:?}", a.shape()));
        }
        let in_shape = a.shape().to_vec();
        let (outer, len, inner) = split(&in_shape, axis);
        let mut out_shape = in_shape.clone();
        out_shape[axis] = 1;
        let mut out = Tensor::full(&out_shape, f64::NEG_INFINITY);
        let mut arg = vec![0usize; outer * inner];
        {
            let (x, o) = (a.value().data(), out.data_mut());
            for p in 0..outer {
                for l in 0..len {
                    let base = (p * len + l) * inner;
                    for i in 0..inner {
                        let v = x[base + i];
                        if v > o[p * inner + i] {
                            o[p * inner + i] = v;
                            arg[p * inner + i] = base + i;
                        }
                    }
                }
            }
        }
        Ok(self.record(out, &[a], move |g, _| {
            let mut gx = Tensor::zeros(&in_shape);
            let gxd = gx.data_mut();
            for (k, &src) in arg.iter().enumerate() {
                gxd[src] += g.data()[k];
            }
            vec![Some(gx)]
        }))
    }
}
