//! Bilinear resizing and point sampling.
//!
//! Sample points use normalised `(x, y)` coordinates in `[0, 1]^2` where
//! pixel `(row i, col j)` of an `H x W` map has its centre at
//! `((j + 0.5) / W, (i + 0.5) / H)`. Points outside the pixel-centre range are
//! clamped to the border.

use crate::error::{contract, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Interpolation taps along one axis.
#[derive(Clone, Copy, Debug)]
struct AxisTap<T> {
    i0: usize,
    i1: usize,
    frac: T,
    /// False when the coordinate was clamped, so it carries no gradient.
    live: bool,
}

/// Resolves a normalised coordinate on an axis of `size` pixels. `replay`
/// carries a previously recorded `(cell, clamp)` decision.
fn axis_tap<T: Real>(u: T, size: usize, replay: Option<(i32, i32)>) -> (AxisTap<T>, [i32; 2]) {
    let hi = T::lit((size - 1) as f64);
    let raw = u * T::lit(size as f64) - T::lit(0.5);
    let clamp = match replay {
        Some((_, c)) => c,
        None if raw < T::zero() => -1,
        None if raw > hi => 1,
        None => 0,
    };
    let p = match clamp {
        -1 => T::zero(),
        1 => hi,
        _ => raw,
    };
    let max_cell = size.saturating_sub(2);
    let i0 = match replay {
        Some((cell, _)) => cell.max(0) as usize,
        None => (p.floor().to_f64().unwrap_or(0.0).max(0.0) as usize).min(max_cell),
    };
    let i1 = (i0 + 1).min(size - 1);
    let tap = AxisTap { i0, i1, frac: p - T::lit(i0 as f64), live: clamp == 0 };
    (tap, [i0 as i32, clamp])
}

#[derive(Clone, Copy, Debug)]
struct Bilinear<T> {
    x: AxisTap<T>,
    y: AxisTap<T>,
}

impl<T: Real> Bilinear<T> {
    fn resolve(u: T, v: T, w: usize, h: usize, replay: Option<&[i32]>) -> (Self, [i32; 4]) {
        let (x, dx) = axis_tap(u, w, replay.map(|r| (r[0], r[1])));
        let (y, dy) = axis_tap(v, h, replay.map(|r| (r[2], r[3])));
        (Self { x, y }, [dx[0], dx[1], dy[0], dy[1]])
    }

    #[inline]
    fn corners(&self, w: usize) -> [(usize, T); 4] {
        let (fx, fy) = (self.x.frac, self.y.frac);
        let one = T::one();
        [
            (self.y.i0 * w + self.x.i0, (one - fx) * (one - fy)),
            (self.y.i0 * w + self.x.i1, fx * (one - fy)),
            (self.y.i1 * w + self.x.i0, (one - fx) * fy),
            (self.y.i1 * w + self.x.i1, fx * fy),
        ]
    }

    /// Accumulates `scale * sample` of channels `[off, off + out.len())`.
    #[inline]
    fn sample_into(&self, data: &[T], w: usize, ctot: usize, off: usize, scale: T, out: &mut [T]) {
        for (pix, wt) in self.corners(w) {
            let k = scale * wt;
            let src = &data[pix * ctot + off..pix * ctot + off + out.len()];
            for (o, &v) in out.iter_mut().zip(src) {
                *o += k * v;
            }
        }
    }

    #[inline]
    fn scatter(&self, grad: &[T], w: usize, ctot: usize, off: usize, scale: T, dst: &mut [T]) {
        for (pix, wt) in self.corners(w) {
            let k = scale * wt;
            let d = &mut dst[pix * ctot + off..pix * ctot + off + grad.len()];
            for (o, &g) in d.iter_mut().zip(grad) {
                *o += k * g;
            }
        }
    }

    /// Gradient of `<grad, sample>` with respect to the normalised point.
    #[inline]
    fn point_grad(&self, data: &[T], w: usize, h: usize, ctot: usize, off: usize, grad: &[T]) -> (T, T) {
        let one = T::one();
        let (fx, fy) = (self.x.frac, self.y.frac);
        let at = |y: usize, x: usize, c: usize| data[(y * w + x) * ctot + off + c];
        let (mut gx, mut gy) = (T::zero(), T::zero());
        for (c, &g) in grad.iter().enumerate() {
            let (a, b) = (at(self.y.i0, self.x.i0, c), at(self.y.i0, self.x.i1, c));
            let (cc, d) = (at(self.y.i1, self.x.i0, c), at(self.y.i1, self.x.i1, c));
            gx += g * ((one - fy) * (b - a) + fy * (d - cc));
            gy += g * ((one - fx) * (cc - a) + fx * (d - b));
        }
        let gx = if self.x.live { gx * T::lit(w as f64) } else { T::zero() };
        let gy = if self.y.live { gy * T::lit(h as f64) } else { T::zero() };
        (gx, gy)
    }
}

/// Source taps of an align-corners=false resize along one axis.
fn resize_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

impl<T: Real> Graph<T> {
    /// Bilinear resize of an `[H, W, C]` map to `[out_h, out_w, C]`
    /// (half-pixel centres, edge clamping).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[0] == 0 || shape[1] == 0 || out_h == 0 || out_w == 0 {
            return Err(contract("resize_bilinear", format!("input {shape:?} to {out_h}x{out_w}")));
        }
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let ty = resize_taps(h, out_h);
        let tx = resize_taps(w, out_w);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); out_h * out_w * c];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let dst = &mut out[(oy * out_w + ox) * c..(oy * out_w + ox + 1) * c];
                for (pix, wt) in [
                    (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
                    (y0 * w + x1, fx * (1.0 - fy)),
                    (y1 * w + x0, (1.0 - fx) * fy),
                    (y1 * w + x1, fx * fy),
                ] {
                    let wt = T::lit(wt);
                    for (o, &v) in dst.iter_mut().zip(&src[pix * c..(pix + 1) * c]) {
                        *o += wt * v;
                    }
                }
            }
        }
        let out = Tensor::new(vec![out_h, out_w, c], out)?;
        Ok(self.push(out, &[x], move |ctx| {
            let mut g = vec![T::zero(); h * w * c];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let go = &ctx.grad[(oy * out_w + ox) * c..(oy * out_w + ox + 1) * c];
                    for (pix, wt) in [
                        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
                        (y0 * w + x1, fx * (1.0 - fy)),
                        (y1 * w + x0, (1.0 - fx) * fy),
                        (y1 * w + x1, fx * fy),
                    ] {
                        let wt = T::lit(wt);
                        for (acc, &v) in g[pix * c..(pix + 1) * c].iter_mut().zip(go) {
                            *acc += wt * v;
                        }
                    }
                }
            }
            vec![Some(g)]
        }))
    }

    /// Samples an `[H, W, C]` map at `[P, 2]` normalised `(x, y)` points.
    /// Differentiable in both the map and the points.
    pub fn bilinear_sample(&mut self, feature: Var, points: Var) -> Result<Var> {
        let fs = self.shape(feature).to_vec();
        let ps = self.shape(points).to_vec();
        if fs.len() != 3 || fs[0] == 0 || fs[1] == 0 || ps.len() != 2 || ps[1] != 2 {
            return Err(contract("bilinear_sample", format!("feature {fs:?}, points {ps:?}")));
        }
        let (h, w, c) = (fs[0], fs[1], fs[2]);
        let np = ps[0];
        let pts = self.value(points).data().to_vec();
        if pts.iter().any(|v| !v.is_finite()) {
            return Err(contract("bilinear_sample", "non-finite sample point"));
        }
        let decisions = self.branch(|| {
            pts.chunks(2).flat_map(|p| Bilinear::resolve(p[0], p[1], w, h, None).1).collect()
        })?;
        if decisions.len() != np * 4 {
            return Err(contract("bilinear_sample", "replayed decision length differs from point count"));
        }
        let taps: Vec<Bilinear<T>> = pts
            .chunks(2)
            .zip(decisions.chunks(4))
            .map(|(p, d)| Bilinear::resolve(p[0], p[1], w, h, Some(d)).0)
            .collect();
        let data = self.value(feature).data();
        let mut out = vec![T::zero(); np * c];
        for (tap, o) in taps.iter().zip(out.chunks_mut(c.max(1))) {
            tap.sample_into(data, w, c, 0, T::one(), o);
        }
        let out = Tensor::new(vec![np, c], out)?;
        Ok(self.push(out, &[feature, points], move |ctx| {
            let data = ctx.inputs[0].data();
            let gf = ctx.needs[0].then(|| {
                let mut gf = vec![T::zero(); h * w * c];
                for (tap, g) in taps.iter().zip(ctx.grad.chunks(c.max(1))) {
                    tap.scatter(g, w, c, 0, T::one(), &mut gf);
                }
                gf
            });
            let gp = ctx.needs[1].then(|| {
                let mut gp = Vec::with_capacity(np * 2);
                for (tap, g) in taps.iter().zip(ctx.grad.chunks(c.max(1))) {
                    let (gx, gy) = tap.point_grad(data, w, h, c, 0, g);
                    gp.push(gx);
                    gp.push(gy);
                }
                gp
            });
            vec![gf, gp]
        }))
    }

    /// Multi-level, multi-head deformable aggregation.
    ///
    /// `levels[l]` is `[H_l, W_l, heads * D]`, `locs` is
    /// `[Q, heads, L, K, 2]` normalised points and `weights` is
    /// `[Q, heads, L, K]`. Output `[Q, heads * D]` holds, per head,
    /// `sum_{l,k} weights * sample(levels[l] head slice, locs)`.
    pub fn deformable_sample(&mut self, levels: &[Var], locs: Var, weights: Var, heads: usize) -> Result<Var> {
        let nl = levels.len();
        let ls = self.shape(locs).to_vec();
        let ws = self.shape(weights).to_vec();
        if nl == 0 || heads == 0 || ls.len() != 5 || ls[1] != heads || ls[2] != nl || ls[4] != 2 || ws != ls[..4] {
            return Err(contract("deformable_sample", format!("{nl} levels, locs {ls:?}, weights {ws:?}, heads {heads}")));
        }
        let (q, k) = (ls[0], ls[3]);
        let ctot = self.shape(levels[0])[2];
        if ctot % heads != 0 {
            return Err(contract("deformable_sample", format!("{ctot} channels not divisible by {heads} heads")));
        }
        let d = ctot / heads;
        let mut dims = Vec::with_capacity(nl);
        for &lv in levels {
            let s = self.shape(lv);
            if s.len() != 3 || s[2] != ctot || s[0] == 0 || s[1] == 0 {
                return Err(contract("deformable_sample", format!("level shape {s:?} with {ctot} channels expected")));
            }
            dims.push((s[0], s[1]));
        }
        let pts = self.value(locs).data().to_vec();
        if pts.iter().any(|v| !v.is_finite()) {
            return Err(contract("deformable_sample", "non-finite sample point"));
        }
        // Point order: q, head, level, k.
        let level_of = move |i: usize| (i / k) % nl;
        let decisions = self.branch(|| {
            pts.chunks(2)
                .enumerate()
                .flat_map(|(i, p)| {
                    let (h, w) = dims[level_of(i)];
                    Bilinear::resolve(p[0], p[1], w, h, None).1
                })
                .collect()
        })?;
        if decisions.len() != q * heads * nl * k * 4 {
            return Err(contract("deformable_sample", "replayed decision length differs from point count"));
        }
        let taps: Vec<Bilinear<T>> = pts
            .chunks(2)
            .zip(decisions.chunks(4))
            .enumerate()
            .map(|(i, (p, dc))| {
                let (h, w) = dims[level_of(i)];
                Bilinear::resolve(p[0], p[1], w, h, Some(dc)).0
            })
            .collect();
        let wts = self.value(weights).data();
        let mut out = vec![T::zero(); q * ctot];
        for qi in 0..q {
            for m in 0..heads {
                let o = &mut out[qi * ctot + m * d..qi * ctot + (m + 1) * d];
                for l in 0..nl {
                    let data = self.value(levels[l]).data();
                    let (_, w) = dims[l];
                    for kk in 0..k {
                        let i = ((qi * heads + m) * nl + l) * k + kk;
                        taps[i].sample_into(data, w, ctot, m * d, wts[i], o);
                    }
                }
            }
        }
        let out = Tensor::new(vec![q, ctot], out)?;
        let mut inputs = levels.to_vec();
        inputs.push(locs);
        inputs.push(weights);
        Ok(self.push(out, &inputs, move |ctx| {
            let wts = ctx.inputs[nl + 1].data();
            let mut glevels: Vec<Option<Vec<T>>> = (0..nl)
                .map(|l| ctx.needs[l].then(|| vec![T::zero(); dims[l].0 * dims[l].1 * ctot]))
                .collect();
            let mut gloc = ctx.needs[nl].then(|| vec![T::zero(); q * heads * nl * k * 2]);
            let mut gw = ctx.needs[nl + 1].then(|| vec![T::zero(); q * heads * nl * k]);
            let mut buf = vec![T::zero(); d];
            for qi in 0..q {
                for m in 0..heads {
                    let go = &ctx.grad[qi * ctot + m * d..qi * ctot + (m + 1) * d];
                    for l in 0..nl {
                        let data = ctx.inputs[l].data();
                        let (h, w) = dims[l];
                        for kk in 0..k {
                            let i = ((qi * heads + m) * nl + l) * k + kk;
                            let tap = &taps[i];
                            if let Some(gl) = glevels[l].as_mut() {
                                tap.scatter(go, w, ctot, m * d, wts[i], gl);
                            }
                            if let Some(gw) = gw.as_mut() {
                                buf.iter_mut().for_each(|b| *b = T::zero());
                                tap.sample_into(data, w, ctot, m * d, T::one(), &mut buf);
                                gw[i] = buf.iter().zip(go).map(|(&s, &g)| s * g).sum();
                            }
                            if let Some(gloc) = gloc.as_mut() {
                                let (gx, gy) = tap.point_grad(data, w, h, ctot, m * d, go);
                                gloc[2 * i] = wts[i] * gx;
                                gloc[2 * i + 1] = wts[i] * gy;
                            }
                        }
                    }
                }
            }
            glevels.push(gloc);
            glevels.push(gw);
            glevels
        }))
    }
}
