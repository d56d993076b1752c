use super::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{strides, Tensor};

/// Numpy-style right-aligned broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("cannot broadcast {:?} with {:?}", a, b)),
        };
    }
    Ok(out)
}

/// Strides of `shape` seen through the broadcast `out` shape (0 on broadcast axes).
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    let r = out.len();
    let mut res = vec![0; r];
    for i in 0..shape.len() {
        let oi = r - shape.len() + i;
        if shape[i] != 1 {
            res[oi] = s[i];
        }
    }
    res
}

fn for_each_bcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    let r = out.len();
    if r == 0 {
        f(0, 0, 0);
        return;
    }
    let last = r - 1;
    let inner = out[last];
    let (ia, ib) = (sa[last], sb[last]);
    let mut idx = vec![0usize; r];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    while o < n {
        for j in 0..inner {
            f(o + j, oa + j * ia, ob + j * ib);
        }
        o += inner;
        // advance the outer odometer
        let mut d = last;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

#[derive(Clone, Copy)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

impl Graph {
    fn binary(&self, a: &Var, b: &Var, op: Bin) -> Result<Var> {
        let out_shape = broadcast_shape(a.shape(), b.shape())?;
        let sa = aligned_strides(a.shape(), &out_shape);
        let sb = aligned_strides(b.shape(), &out_shape);
        let (av, bv) = (a.rc(), b.rc());
        let mut out = Tensor::zeros(&out_shape);
        {
            let (ad, bd, od) = (av.data(), bv.data(), out.data_mut());
            if a.shape() == b.shape() {
                for i in 0..od.len() {
                    od[i] = apply(op, ad[i], bd[i]);
                }
            } else {
                for_each_bcast(&out_shape, &sa, &sb, |o, i, j| od[o] = apply(op, ad[i], bd[j]));
            }
        }
        Ok(self.record(out, &[a, b], move |g, needs| {
            let mut ga = needs[0].then(|| Tensor::zeros(av.shape()));
            let mut gb = needs[1].then(|| Tensor::zeros(bv.shape()));
            let (ad, bd, gd) = (av.data(), bv.data(), g.data());
            {
                let mut gam = ga.as_mut().map(|t| t.data_mut());
                let mut gbm = gb.as_mut().map(|t| t.data_mut());
                for_each_bcast(g.shape(), &sa, &sb, |o, i, j| {
                    let go = gd[o];
                    let (da, db) = match op {
                        Bin::Add => (go, go),
                        Bin::Sub => (go, -go),
                        Bin::Mul => (go * bd[j], go * ad[i]),
                        Bin::Div => (go / bd[j], -go * ad[i] / (bd[j] * bd[j])),
                    };
                    if let Some(x) = gam.as_mut() {
                        x[i] += da;
                    }
                    if let Some(x) = gbm.as_mut() {
                        x[j] += db;
                    }
                });
            }
            vec![ga, gb]
        }))
    }

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(a, b, Bin::Add)
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(a, b, Bin::Sub)
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(a, b, Bin::Mul)
    }

    pub fn div(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(a, b, Bin::Div)
    }

    /// Sum of equally broadcastable terms.
    pub fn add_all(&self, terms: &[Var]) -> Result<Var> {
        let (first, rest) = terms
            .split_first()
            .ok_or_else(|| shape_err!("add_all of no terms"))?;
        rest.iter().try_fold(first.clone(), |acc, t| self.add(&acc, t))
    }

    fn unary<F, D>(&self, a: &Var, f: F, df: D) -> Var
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + 'static,
    {
        let x = a.rc();
        let y = std::rc::Rc::new(x.map(f));
        let yc = std::rc::Rc::clone(&y);
        let out = (*y).clone();
        self.record(out, &[a], move |g, _| {
            let mut gx = Tensor::zeros(x.shape());
            for (((o, &gi), &xi), &yi) in gx
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(x.data())
                .zip(yc.data())
            {
                *o = gi * df(xi, yi);
            }
            vec![Some(gx)]
        })
    }

    pub fn scale(&self, a: &Var, s: f64) -> Var {
        self.unary(a, move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, a: &Var, s: f64) -> Var {
        self.unary(a, move |x| x + s, |_, _| 1.0)
    }

    pub fn sigmoid(&self, a: &Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn silu(&self, a: &Var) -> Var {
        self.unary(
            a,
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn exp(&self, a: &Var) -> Var {
        self.unary(a, f64::exp, |_, y| y)
    }

    pub fn log(&self, a: &Var) -> Var {
        self.unary(a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(&self, a: &Var) -> Var {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    /// `sqrt(x² + eps²)`, the Charbonnier penalty.
    pub fn charbonnier(&self, a: &Var, eps: f64) -> Var {
        let e2 = eps * eps;
        self.unary(a, move |x| (x * x + e2).sqrt(), |x, y| x / y)
    }

    /// `sqrt(a² + b²)` with a zero subgradient where both vanish.
    pub fn hypot(&self, a: &Var, b: &Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(shape_err!("hypot {:?} vs {:?}", a.shape(), b.shape()));
        }
        let (x, y) = (a.rc(), b.rc());
        let out = x.zip_map(&y, |p, q| (p * p + q * q).sqrt())?;
        let m = std::rc::Rc::new(out.clone());
        Ok(self.record(out, &[a, b], move |g, needs| {
            let grad_of = |src: &Tensor| {
                let mut t = Tensor::zeros(src.shape());
                for (((o, &gi), &si), &mi) in t
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(src.data())
                    .zip(m.data())
                {
                    *o = if mi > 0.0 { gi * si / mi } else { 0.0 };
                }
                t
            };
            vec![needs[0].then(|| grad_of(&x)), needs[1].then(|| grad_of(&y))]
        }))
    }

    /// Mean binary cross-entropy computed from logits:
    /// `max(z,0) − z·t + ln(1 + e^{−|z|})`, averaged over all elements.
    pub fn bce_with_logits(&self, z: &Var, target: &Tensor) -> Result<Var> {
        if z.shape() != target.shape() {
            return Err(shape_err!(
                "logits {:?} vs target {:?}",
                z.shape(),
                target.shape()
            ));
        }
        let zr = z.rc();
        let t = target.clone();
        let n = t.numel() as f64;
        let total: f64 = zr
            .data()
            .iter()
            .zip(t.data())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        Ok(self.record(Tensor::scalar(total / n), &[z], move |g, _| {
            let go = g.item() / n;
            let gz = zr.zip_map(&t, |z, y| go * (sigmoid(z) - y)).ok();
            vec![gz]
        }))
    }
}

fn apply(op: Bin, a: f64, b: f64) -> f64 {
    match op {
        Bin::Add => a + b,
        Bin::Sub => a - b,
        Bin::Mul => a * b,
        Bin::Div => a / b,
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
