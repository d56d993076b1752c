use super::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{strides, Tensor};

pub(crate) fn permute_tensor(x: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = x.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.numel();
    let mut out = vec![0.0; n];
    let r = out_shape.len();
    if n == 0 {
        return Tensor::new(&out_shape, out).expect("permute shape");
    }
    let xd = x.data();
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for o in out.iter_mut() {
        *o = xd[off];
        let mut d = r;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permute shape")
}

impl Graph {
    pub fn reshape(&self, a: &Var, shape: &[usize]) -> Result<Var> {
        let out = a.value().clone().reshape(shape)?;
        let in_shape = a.shape().to_vec();
        Ok(self.record(out, &[a], move |g, _| {
            vec![Some(g.clone().reshape(&in_shape).expect("reshape grad"))]
        }))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, a: &Var, perm: &[usize]) -> Result<Var> {
        let r = a.shape().len();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err!("bad permutation {:?} for rank {}", perm, r));
        }
        let out = permute_tensor(a.value(), perm);
        let mut inv = vec![0; r];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        Ok(self.record(out, &[a], move |g, _| vec![Some(permute_tensor(g, &inv))]))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let base = first.shape().to_vec();
        if axis >= base.len() {
            return Err(shape_err!("concat axis {axis} for {:?}", base));
        }
        let mut total = 0;
        for x in xs {
            let s = x.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err!("concat {:?} with {:?} on axis {axis}", base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let lens: Vec<usize> = xs.iter().map(|x| x.shape()[axis]).collect();
        let mut out = Tensor::zeros(&out_shape);
        {
            let od = out.data_mut();
            let mut off = 0;
            for (x, &l) in xs.iter().zip(&lens) {
                let xd = x.value().data();
                for p in 0..outer {
                    let dst = (p * total + off) * inner;
                    od[dst..dst + l * inner].copy_from_slice(&xd[p * l * inner..(p + 1) * l * inner]);
                }
                off += l;
            }
        }
        let shapes: Vec<Vec<usize>> = xs.iter().map(|x| x.shape().to_vec()).collect();
        let refs: Vec<&Var> = xs.iter().collect();
        Ok(self.record(out, &refs, move |g, needs| {
            let gd = g.data();
            let mut off = 0;
            let mut res = Vec::with_capacity(lens.len());
            for (k, &l) in lens.iter().enumerate() {
                if needs[k] {
                    let mut t = Tensor::zeros(&shapes[k]);
                    let td = t.data_mut();
                    for p in 0..outer {
                        let src = (p * total + off) * inner;
                        td[p * l * inner..(p + 1) * l * inner].copy_from_slice(&gd[src..src + l * inner]);
                    }
                    res.push(Some(t));
                } else {
                    res.push(None);
                }
                off += l;
            }
            res
        }))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice_axis(&self, a: &Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let in_shape = a.shape().to_vec();
        if axis >= in_shape.len() || start + len > in_shape[axis] {
            return Err(shape_err!(
                "slice {start}..{} of axis {axis} in {:?}",
                start + len,
                in_shape
            ));
        }
        let outer: usize = in_shape[..axis].iter().product();
        let inner: usize = in_shape[axis + 1..].iter().product();
        let full = in_shape[axis];
        let mut out_shape = in_shape.clone();
        out_shape[axis] = len;
        let mut out = Tensor::zeros(&out_shape);
        {
            let (xd, od) = (a.value().data(), out.data_mut());
            for p in 0..outer {
                let src = (p * full + start) * inner;
                od[p * len * inner..(p + 1) * len * inner].copy_from_slice(&xd[src..src + len * inner]);
            }
        }
        Ok(self.record(out, &[a], move |g, _| {
            let mut gx = Tensor::zeros(&in_shape);
            let (gd, gxd) = (g.data(), gx.data_mut());
            for p in 0..outer {
                let dst = (p * full + start) * inner;
                gxd[dst..dst + len * inner].copy_from_slice(&gd[p * len * inner..(p + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }
}
