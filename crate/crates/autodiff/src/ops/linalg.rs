use crate::error::{contract, Result};
use crate::graph::{Graph, Var};
use crate::real::{gemm, Real};
use crate::tensor::Tensor;

/// Logical dims of a possibly-transposed stored matrix.
fn dims(shape: &[usize], trans: bool) -> (usize, usize) {
    let (r, c) = (shape[0], shape[1]);
    if trans {
        (c, r)
    } else {
        (r, c)
    }
}

/// Gradients of `C = op(A) op(B)` for stored `A` (`m x k` logical) and `B`.
#[allow(clippy::too_many_arguments)]
fn matmul_grads<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    gc: &[T],
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let ga = need_a.then(|| {
        let mut ga = vec![T::zero(); m * k];
        if ta {
            // dA (k x m) = op(B) (k x n) * dC^T (n x m)
            gemm(k, n, m, b, tb, gc, true, &mut ga, T::zero());
        } else {
            // dA (m x k) = dC (m x n) * op(B)^T (n x k)
            gemm(m, n, k, gc, false, b, !tb, &mut ga, T::zero());
        }
        ga
    });
    let gb = need_b.then(|| {
        let mut gb = vec![T::zero(); k * n];
        if tb {
            // dB (n x k) = dC^T (n x m) * op(A) (m x k)
            gemm(n, m, k, gc, true, a, ta, &mut gb, T::zero());
        } else {
            // dB (k x n) = op(A)^T (k x m) * dC (m x n)
            gemm(k, m, n, a, !ta, gc, false, &mut gb, T::zero());
        }
        gb
    });
    (ga, gb)
}

impl<T: Real> Graph<T> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `op(a) @ op(b)` for 2-D operands, `op` transposing when the flag is set.
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(contract("matmul", format!("expected 2-D operands, got {sa:?} and {sb:?}")));
        }
        let (m, k) = dims(&sa, ta);
        let (k2, n) = dims(&sb, tb);
        if k != k2 {
            return Err(contract("matmul", format!("inner dims differ: {sa:?}{} x {sb:?}{}", if ta { "^T" } else { "" }, if tb { "^T" } else { "" })));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), ta, self.value(b).data(), tb, &mut out, T::zero());
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, &[a, b], move |ctx| {
            let (ga, gb) = matmul_grads(
                m,
                k,
                n,
                ctx.inputs[0].data(),
                ta,
                ctx.inputs[1].data(),
                tb,
                ctx.grad,
                ctx.needs[0],
                ctx.needs[1],
            );
            vec![ga, gb]
        }))
    }

    /// Batched product of 3-D operands `[B, ., .]` with per-operand transposes.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(contract("bmm", format!("expected [B,.,.] operands with equal batch, got {sa:?} and {sb:?}")));
        }
        let batch = sa[0];
        let (m, k) = dims(&sa[1..], ta);
        let (k2, n) = dims(&sb[1..], tb);
        if k != k2 {
            return Err(contract("bmm", format!("inner dims differ: {sa:?} x {sb:?}")));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    ta,
                    &bd[i * k * n..(i + 1) * k * n],
                    tb,
                    &mut out[i * m * n..(i + 1) * m * n],
                    T::zero(),
                );
            }
        }
        let out = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(out, &[a, b], move |ctx| {
            let (ad, bd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let mut ga = ctx.needs[0].then(|| vec![T::zero(); batch * m * k]);
            let mut gb = ctx.needs[1].then(|| vec![T::zero(); batch * k * n]);
            for i in 0..batch {
                let (pa, pb) = matmul_grads(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    ta,
                    &bd[i * k * n..(i + 1) * k * n],
                    tb,
                    &ctx.grad[i * m * n..(i + 1) * m * n],
                    ctx.needs[0],
                    ctx.needs[1],
                );
                if let (Some(ga), Some(pa)) = (ga.as_mut(), pa) {
                    ga[i * m * k..(i + 1) * m * k].copy_from_slice(&pa);
                }
                if let (Some(gb), Some(pb)) = (gb.as_mut(), pb) {
                    gb[i * k * n..(i + 1) * k * n].copy_from_slice(&pb);
                }
            }
            vec![ga, gb]
        }))
    }
}
