use crate::error::{contract, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

fn same_shape<T: Real>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(contract(op, format!("shapes {:?} and {:?} differ", g.shape(a), g.shape(b))));
    }
    Ok(())
}

fn last_dim<T: Real>(g: &Graph<T>, op: &'static str, a: Var, row: Var) -> Result<usize> {
    let c = *g.shape(a).last().unwrap_or(&0);
    if g.shape(row) != [c] {
        return Err(contract(op, format!("expected row vector of length {c}, got {:?}", g.shape(row))));
    }
    Ok(c)
}

impl<T: Real> Graph<T> {
    fn unary<F, D>(&mut self, a: Var, f: F, df: D) -> Var
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + 'static,
    {
        let x = self.value(a);
        let out = x.map(f);
        self.push(out, &[a], move |ctx| {
            let x = ctx.inputs[0].data();
            let y = ctx.output.data();
            let gx = ctx.grad.iter().zip(x).zip(y).map(|((&g, &x), &y)| g * df(x, y)).collect();
            vec![Some(gx)]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, &[a, b], |ctx| vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, &[a, b], |ctx| vec![Some(ctx.grad.to_vec()), Some(ctx.grad.iter().map(|&g| -g).collect())]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, &[a, b], |ctx| {
            let (x, y) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let ga = ctx.needs[0].then(|| ctx.grad.iter().zip(y).map(|(&g, &y)| g * y).collect());
            let gb = ctx.needs[1].then(|| ctx.grad.iter().zip(x).map(|(&g, &x)| g * x).collect());
            vec![ga, gb]
        }))
    }

    /// `a + row`, broadcasting a length-`C` vector over the last axis.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let c = last_dim(self, "add_row", a, row)?;
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        if c > 0 {
            for chunk in out.data_mut().chunks_mut(c) {
                for (v, &b) in chunk.iter_mut().zip(&r) {
                    *v += b;
                }
            }
        }
        Ok(self.push(out, &[a, row], move |ctx| {
            let gb = ctx.needs[1].then(|| {
                let mut gb = vec![T::zero(); c];
                for chunk in ctx.grad.chunks(c.max(1)) {
                    for (acc, &g) in gb.iter_mut().zip(chunk) {
                        *acc += g;
                    }
                }
                gb
            });
            vec![Some(ctx.grad.to_vec()), gb]
        }))
    }

    /// `a * row`, broadcasting a length-`C` vector over the last axis.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let c = last_dim(self, "mul_row", a, row)?;
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        if c > 0 {
            for chunk in out.data_mut().chunks_mut(c) {
                for (v, &s) in chunk.iter_mut().zip(&r) {
                    *v *= s;
                }
            }
        }
        Ok(self.push(out, &[a, row], move |ctx| {
            let x = ctx.inputs[0].data();
            let s = ctx.inputs[1].data();
            let ga = ctx.needs[0].then(|| {
                let mut ga = ctx.grad.to_vec();
                for chunk in ga.chunks_mut(c.max(1)) {
                    for (v, &s) in chunk.iter_mut().zip(s) {
                        *v *= s;
                    }
                }
                ga
            });
            let gb = ctx.needs[1].then(|| {
                let mut gb = vec![T::zero(); c];
                for (gc, xc) in ctx.grad.chunks(c.max(1)).zip(x.chunks(c.max(1))) {
                    for ((acc, &g), &x) in gb.iter_mut().zip(gc).zip(xc) {
                        *acc += g * x;
                    }
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    /// `a * s` for a single-entry variable `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(contract("mul_scalar", format!("scale must have one entry, got {:?}", self.shape(s))));
        }
        let k = self.value(s).data()[0];
        let out = self.value(a).map(|x| x * k);
        Ok(self.push(out, &[a, s], |ctx| {
            let k = ctx.inputs[1].data()[0];
            let ga = ctx.needs[0].then(|| ctx.grad.iter().map(|&g| g * k).collect());
            let gs = ctx.needs[1].then(|| {
                vec![ctx.grad.iter().zip(ctx.inputs[0].data()).map(|(&g, &x)| g * x).sum()]
            });
            vec![ga, gs]
        }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let k = T::lit(factor);
        self.unary(a, move |x| x * k, move |_, _| k)
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        let c = T::lit(offset);
        self.unary(a, move |x| x + c, |_, _| T::one())
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, |_, _| -T::one())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (T::one() - y))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, gelu_grad)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), |_, y| y)
    }

    /// Clamps into `[lo, hi]`; entries at a bound pass no gradient. Which
    /// entries saturate is a recorded branch decision.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        let x = self.value(a).clone();
        let state = self.branch(|| {
            x.data().iter().map(|&v| if v < lo { -1 } else if v > hi { 1 } else { 0 }).collect()
        })?;
        if state.len() != x.numel() {
            return Err(contract("clamp", "replayed decision length differs from input"));
        }
        let data = x
            .data()
            .iter()
            .zip(&state)
            .map(|(&v, &s)| match s {
                -1 => lo,
                1 => hi,
                _ => v,
            })
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, &[a], move |ctx| {
            vec![Some(ctx.grad.iter().zip(&state).map(|(&g, &s)| if s == 0 { g } else { T::zero() }).collect())]
        }))
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<T: Real>(x: T) -> T {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T, _y: T) -> T {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::lit(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}
