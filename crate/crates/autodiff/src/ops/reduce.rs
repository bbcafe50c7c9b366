use crate::error::{contract, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

impl<T: Real> Graph<T> {
    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, &[a], move |ctx| vec![Some(vec![ctx.grad[0]; n])])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, average: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(contract("reduce_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let k = if average && dim > 0 { T::one() / T::lit(dim as f64) } else { T::one() };
        let src = self.value(a).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let row = &src[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        for v in data.iter_mut() {
            *v *= k;
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, &[a], move |ctx| {
            let mut g = vec![T::zero(); outer * dim * inner];
            for o in 0..outer {
                for d in 0..dim {
                    let dst = &mut g[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                    for (x, &v) in dst.iter_mut().zip(&ctx.grad[o * inner..(o + 1) * inner]) {
                        *x = v * k;
                    }
                }
            }
            vec![Some(g)]
        }))
    }

    /// `sum(a * c)` against a constant tensor of the same shape.
    pub fn dot_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(contract("dot_const", format!("shapes {:?} and {:?} differ", self.shape(a), c.shape())));
        }
        let s: T = self.value(a).data().iter().zip(c.data()).map(|(&x, &y)| x * y).sum();
        let cd = c.data().to_vec();
        Ok(self.push(Tensor::scalar(s), &[a], move |ctx| vec![Some(cd.iter().map(|&y| y * ctx.grad[0]).collect())]))
    }

    /// `sum_k w[k] * parts[k]` for same-shape parts and a weight vector of length `K`.
    pub fn weighted_sum(&mut self, parts: &[Var], weights: Var) -> Result<Var> {
        let k = parts.len();
        if k == 0 || self.shape(weights) != [k] {
            return Err(contract("weighted_sum", format!("{k} parts but weights of shape {:?}", self.shape(weights))));
        }
        let shape = self.shape(parts[0]).to_vec();
        if parts.iter().any(|&p| self.shape(p) != shape.as_slice()) {
            return Err(contract("weighted_sum", "parts differ in shape"));
        }
        let w = self.value(weights).data().to_vec();
        let mut data = vec![T::zero(); self.value(parts[0]).numel()];
        for (&p, &wk) in parts.iter().zip(&w) {
            for (acc, &v) in data.iter_mut().zip(self.value(p).data()) {
                *acc += wk * v;
            }
        }
        let out = Tensor::new(shape, data)?;
        let mut inputs = parts.to_vec();
        inputs.push(weights);
        Ok(self.push(out, &inputs, move |ctx| {
            let w = ctx.inputs[k].data();
            let mut grads: Vec<Option<Vec<T>>> = (0..k)
                .map(|i| ctx.needs[i].then(|| ctx.grad.iter().map(|&g| g * w[i]).collect()))
                .collect();
            let gw = ctx.needs[k].then(|| {
                (0..k).map(|i| ctx.grad.iter().zip(ctx.inputs[i].data()).map(|(&g, &v)| g * v).sum()).collect()
            });
            grads.push(gw);
            grads
        }))
    }
}
