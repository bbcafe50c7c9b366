use crate::error::{contract, Result};
use crate::graph::{Graph, Var};
use crate::ops::elementwise::sigmoid;
use crate::real::Real;
use crate::tensor::Tensor;

fn check<T: Real>(g: &Graph<T>, op: &'static str, x: Var, target: &Tensor<T>) -> Result<(usize, usize)> {
    let s = g.shape(x);
    if s.len() != 2 || s != target.shape() {
        return Err(contract(op, format!("logits {:?} vs target {:?}", s, target.shape())));
    }
    Ok((s[0], s[1]))
}

impl<T: Real> Graph<T> {
    /// Per-column mean binary cross-entropy between logits `[R, C]` and a
    /// constant target in `[0, 1]`. Output `[C]`.
    pub fn bce_logits_cols(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        let (rows, cols) = check(self, "bce_logits_cols", x, target)?;
        let xd = self.value(x).data();
        let td = target.data();
        let mut out = vec![T::zero(); cols];
        for (xr, tr) in xd.chunks(cols.max(1)).zip(td.chunks(cols.max(1))) {
            for ((o, &v), &t) in out.iter_mut().zip(xr).zip(tr) {
                *o += v.max(T::zero()) - v * t + (-v.abs()).exp().ln_1p();
            }
        }
        let inv = T::one() / T::lit(rows.max(1) as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        let out = Tensor::new(vec![cols], out)?;
        let td = td.to_vec();
        Ok(self.push(out, &[x], move |ctx| {
            let xd = ctx.inputs[0].data();
            let g: Vec<T> = xd
                .iter()
                .zip(&td)
                .enumerate()
                .map(|(i, (&v, &t))| ctx.grad[i % cols] * (sigmoid(v) - t) * inv)
                .collect();
            vec![Some(g)]
        }))
    }

    /// Per-column soft Dice loss `1 - (2 sum(p t) + s) / (sum p + sum t + s)`
    /// with `p = sigmoid(logits)`. Output `[C]`.
    pub fn dice_cols(&mut self, x: Var, target: &Tensor<T>, smooth: f64) -> Result<Var> {
        let (_, cols) = check(self, "dice_cols", x, target)?;
        let s = T::lit(smooth);
        let xd = self.value(x).data();
        let td = target.data();
        let mut inter = vec![T::zero(); cols];
        let mut psum = vec![T::zero(); cols];
        let mut tsum = vec![T::zero(); cols];
        for (xr, tr) in xd.chunks(cols.max(1)).zip(td.chunks(cols.max(1))) {
            for (c, (&v, &t)) in xr.iter().zip(tr).enumerate() {
                let p = sigmoid(v);
                inter[c] += p * t;
                psum[c] += p;
                tsum[c] += t;
            }
        }
        let two = T::lit(2.0);
        let num: Vec<T> = inter.iter().map(|&i| two * i + s).collect();
        let den: Vec<T> = psum.iter().zip(&tsum).map(|(&p, &t)| p + t + s).collect();
        let out: Vec<T> = num.iter().zip(&den).map(|(&n, &d)| T::one() - n / d).collect();
        let out = Tensor::new(vec![cols], out)?;
        let td = td.to_vec();
        Ok(self.push(out, &[x], move |ctx| {
            let xd = ctx.inputs[0].data();
            let g: Vec<T> = xd
                .iter()
                .zip(&td)
                .enumerate()
                .map(|(i, (&v, &t))| {
                    let c = i % cols;
                    let p = sigmoid(v);
                    let dp = -(two * t * den[c] - num[c]) / (den[c] * den[c]);
                    ctx.grad[c] * dp * p * (T::one() - p)
                })
                .collect();
            vec![Some(g)]
        }))
    }
}
