use crate::error::{contract, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Splits `shape` around `axis` into `(outer, dim, inner)`.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product())
}

fn softmax_backward<T: Real>(g: &[T], y: &[T], outer: usize, dim: usize, inner: usize) -> Vec<T> {
    let mut gx = vec![T::zero(); g.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * dim * inner + i;
            let mut dot = T::zero();
            for d in 0..dim {
                let j = base + d * inner;
                dot += g[j] * y[j];
            }
            for d in 0..dim {
                let j = base + d * inner;
                gx[j] = y[j] * (g[j] - dot);
            }
        }
    }
    gx
}

impl<T: Real> Graph<T> {
    /// Softmax along `axis`, stabilised by max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(contract("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, dim, inner) = around(&shape, axis);
        let x = self.value(a).data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * dim * inner + i;
                let mut mx = T::neg_infinity();
                for d in 0..dim {
                    mx = mx.max(x[base + d * inner]);
                }
                let mut s = T::zero();
                for d in 0..dim {
                    let e = (x[base + d * inner] - mx).exp();
                    y[base + d * inner] = e;
                    s += e;
                }
                for d in 0..dim {
                    y[base + d * inner] = y[base + d * inner] / s;
                }
            }
        }
        let out = Tensor::new(shape, y)?;
        Ok(self.push(out, &[a], move |ctx| {
            vec![Some(softmax_backward(ctx.grad, ctx.output.data(), outer, dim, inner))]
        }))
    }

    /// Softmax over the last axis restricted to `keep`, a row-major `[R, C]`
    /// mask over the last two axes that broadcasts across leading axes.
    /// Dropped positions get exactly zero weight; a row with nothing kept
    /// falls back to the unmasked softmax.
    pub fn masked_softmax(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(contract("masked_softmax", format!("expected rank >= 2, got {shape:?}")));
        }
        let (rows, cols) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if keep.len() != rows * cols {
            return Err(contract(
                "masked_softmax",
                format!("mask has {} entries, expected {rows}x{cols}", keep.len()),
            ));
        }
        let row_any: Vec<bool> = keep.chunks(cols.max(1)).map(|r| r.iter().any(|&k| k)).collect();
        let x = self.value(a).data();
        let mut y = vec![T::zero(); x.len()];
        for (ri, (xr, yr)) in x.chunks(cols.max(1)).zip(y.chunks_mut(cols.max(1))).enumerate() {
            let r = ri % rows.max(1);
            let km = &keep[r * cols..(r + 1) * cols];
            let use_mask = row_any[r];
            let mut mx = T::neg_infinity();
            for (c, &v) in xr.iter().enumerate() {
                if !use_mask || km[c] {
                    mx = mx.max(v);
                }
            }
            let mut s = T::zero();
            for (c, &v) in xr.iter().enumerate() {
                if !use_mask || km[c] {
                    let e = (v - mx).exp();
                    yr[c] = e;
                    s += e;
                }
            }
            for v in yr.iter_mut() {
                *v = *v / s;
            }
        }
        let out = Tensor::new(shape, y)?;
        let outer = x.len() / cols.max(1);
        Ok(self.push(out, &[a], move |ctx| {
            vec![Some(softmax_backward(ctx.grad, ctx.output.data(), outer, cols, 1))]
        }))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().ok_or_else(|| contract("log_softmax", "scalar input"))?;
        let x = self.value(a).data();
        let mut y = vec![T::zero(); x.len()];
        for (xr, yr) in x.chunks(cols.max(1)).zip(y.chunks_mut(cols.max(1))) {
            let mx = xr.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = mx + xr.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            for (o, &v) in yr.iter_mut().zip(xr) {
                *o = v - lse;
            }
        }
        let out = Tensor::new(shape, y)?;
        Ok(self.push(out, &[a], move |ctx| {
            let y = ctx.output.data();
            let mut gx = vec![T::zero(); y.len()];
            for ((gr, yr), gxr) in ctx.grad.chunks(cols.max(1)).zip(y.chunks(cols.max(1))).zip(gx.chunks_mut(cols.max(1))) {
                let gs: T = gr.iter().copied().sum();
                for ((o, &g), &lv) in gxr.iter_mut().zip(gr).zip(yr) {
                    *o = g - lv.exp() * gs;
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Zero-mean, unit-variance normalisation of each last-axis row.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().ok_or_else(|| contract("normalize_rows", "scalar input"))?;
        if cols == 0 {
            return Err(contract("normalize_rows", "empty rows"));
        }
        let n = T::lit(cols as f64);
        let eps = T::lit(eps);
        let x = self.value(a).data();
        let mut y = vec![T::zero(); x.len()];
        let mut inv_std = Vec::with_capacity(x.len() / cols);
        for (xr, yr) in x.chunks(cols).zip(y.chunks_mut(cols)) {
            let mean = xr.iter().copied().sum::<T>() / n;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            for (o, &v) in yr.iter_mut().zip(xr) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let out = Tensor::new(shape, y)?;
        Ok(self.push(out, &[a], move |ctx| {
            let y = ctx.output.data();
            let mut gx = vec![T::zero(); y.len()];
            for (r, ((gr, yr), gxr)) in ctx.grad.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)).enumerate() {
                let mg = gr.iter().copied().sum::<T>() / n;
                let mgy = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum::<T>() / n;
                for ((o, &g), &yv) in gxr.iter_mut().zip(gr).zip(yr) {
                    *o = inv_std[r] * (g - mg - yv * mgy);
                }
            }
            vec![Some(gx)]
        }))
    }
}
