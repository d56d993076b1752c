use super::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::linalg::gemm;
use crate::tensor::Tensor;

impl Graph {
    /// `y = x·wᵀ + b` over the last axis. `w` is `[out, in]`.
    pub fn linear(&self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let xs = x.shape().to_vec();
        let din = *xs.last().ok_or_else(|| shape_err!("linear on a scalar"))?;
        if w.shape().len() != 2 || w.shape()[1] != din {
            return Err(shape_err!("linear weight {:?} for input {:?}", w.shape(), xs));
        }
        let dout = w.shape()[0];
        if let Some(b) = b {
            if b.shape() != [dout] {
                return Err(shape_err!("linear bias {:?} for {dout} outputs", b.shape()));
            }
        }
        let rows = x.value().numel() / din;
        self.add_macs((rows * din * dout) as u64);
        let mut os = xs.clone();
        *os.last_mut().unwrap() = dout;
        let mut out = Tensor::zeros(&os);
        if !self.is_dry_run() {
            gemm(rows, din, dout, x.value().data(), false, w.value().data(), true, out.data_mut(), 0.0);
            if let Some(b) = b {
                for r in out.data_mut().chunks_mut(dout) {
                    for (v, bv) in r.iter_mut().zip(b.value().data()) {
                        *v += bv;
                    }
                }
            }
        }
        let (xv, wv) = (x.rc(), w.rc());
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        Ok(self.record(out, &parents, move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = Tensor::zeros(xv.shape());
                gemm(rows, dout, din, g.data(), false, wv.data(), false, gx.data_mut(), 0.0);
                gx
            });
            let gw = needs[1].then(|| {
                let mut gw = Tensor::zeros(wv.shape());
                gemm(dout, rows, din, g.data(), true, xv.data(), false, gw.data_mut(), 0.0);
                gw
            });
            let mut res = vec![gx, gw];
            if needs.len() == 3 {
                res.push(needs[2].then(|| {
                    let mut gb = vec![0.0; dout];
                    for r in g.data().chunks(dout) {
                        for (s, v) in gb.iter_mut().zip(r) {
                            *s += v;
                        }
                    }
                    Tensor::new(&[dout], gb).expect("bias grad")
                }));
            }
            res
        }))
    }

    /// Batched matrix product of `[B, M, K]` with `[B, K, N]`, or with
    /// `[B, N, K]` when `trans_b` is set.
    pub fn bmm(&self, a: &Var, b: &Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err!("bmm operands {:?} and {:?}", sa, sb));
        }
        let (bn, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(shape_err!("bmm inner dims {:?} and {:?} (trans_b={trans_b})", sa, sb));
        }
        self.add_macs((bn * m * k * n) as u64);
        let mut out = Tensor::zeros(&[bn, m, n]);
        if !self.is_dry_run() {
            for i in 0..bn {
                gemm(
                    m,
                    k,
                    n,
                    &a.value().data()[i * m * k..(i + 1) * m * k],
                    false,
                    &b.value().data()[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out.data_mut()[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let (av, bv) = (a.rc(), b.rc());
        Ok(self.record(out, &[a, b], move |g, needs| {
            let gd = g.data();
            let ga = needs[0].then(|| {
                let mut ga = Tensor::zeros(av.shape());
                for i in 0..bn {
                    // gA = G · Bᵀ  (B stored as [K,N], or [N,K] when transposed)
                    gemm(
                        m,
                        n,
                        k,
                        &gd[i * m * n..(i + 1) * m * n],
                        false,
                        &bv.data()[i * k * n..(i + 1) * k * n],
                        !trans_b,
                        &mut ga.data_mut()[i * m * k..(i + 1) * m * k],
                        0.0,
                    );
                }
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = Tensor::zeros(bv.shape());
                for i in 0..bn {
                    let ai = &av.data()[i * m * k..(i + 1) * m * k];
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    let dst = &mut gb.data_mut()[i * k * n..(i + 1) * k * n];
                    if trans_b {
                        gemm(n, m, k, gi, true, ai, false, dst, 0.0);
                    } else {
                        gemm(k, m, n, ai, true, gi, false, dst, 0.0);
                    }
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&self, x: &Var) -> Result<Var> {
        let d = *x.shape().last().ok_or_else(|| shape_err!("softmax on a scalar"))?;
        let mut out = x.value().clone();
        for r in out.data_mut().chunks_mut(d) {
            let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in r.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in r.iter_mut() {
                *v /= s;
            }
        }
        let y = std::rc::Rc::new(out.clone());
        Ok(self.record(out, &[x], move |g, _| {
            let mut gx = Tensor::zeros(y.shape());
            for ((gr, yr), dst) in g.data().chunks(d).zip(y.data().chunks(d)).zip(gx.data_mut().chunks_mut(d)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((o, gv), yv) in dst.iter_mut().zip(gr).zip(yr) {
                    *o = yv * (gv - dot);
                }
            }
            vec![Some(gx)]
        }))
    }
}
