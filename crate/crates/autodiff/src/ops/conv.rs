use crate::error::{contract, Result};
use crate::graph::{Graph, Var};
use crate::real::{gemm, Real};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }

    /// Source pixel of output `(oy, ox)` at kernel tap `(ky, kx)`, if inside.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some(y as usize * self.w + x as usize)
        }
    }
}

fn im2col<T: Real>(x: &[T], g: &Geometry) -> Vec<T> {
    let p = g.patch();
    let mut cols = vec![T::zero(); g.ho * g.wo * p];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * p..(oy * g.wo + ox + 1) * p];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    if let Some(src) = g.source(oy, ox, ky, kx) {
                        let dst = (ky * g.k + kx) * g.cin;
                        row[dst..dst + g.cin].copy_from_slice(&x[src * g.cin..(src + 1) * g.cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &Geometry) -> Vec<T> {
    let p = g.patch();
    let mut x = vec![T::zero(); g.h * g.w * g.cin];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &cols[(oy * g.wo + ox) * p..(oy * g.wo + ox + 1) * p];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    if let Some(src) = g.source(oy, ox, ky, kx) {
                        let off = (ky * g.k + kx) * g.cin;
                        for (acc, &v) in x[src * g.cin..(src + 1) * g.cin].iter_mut().zip(&row[off..off + g.cin]) {
                            *acc += v;
                        }
                    }
                }
            }
        }
    }
    x
}

impl<T: Real> Graph<T> {
    /// 2-D convolution of an `[H, W, Cin]` map with a square kernel stored as
    /// `[k * k * Cin, Cout]` (tap-major, then input channel), zero padding.
    pub fn conv2d(&mut self, x: Var, weight: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 3 || ws.len() != 2 || k == 0 || stride == 0 {
            return Err(contract("conv2d", format!("input {xs:?}, weight {ws:?}, k={k}, stride={stride}")));
        }
        let (h, w, cin) = (xs[0], xs[1], xs[2]);
        if ws[0] != k * k * cin {
            return Err(contract("conv2d", format!("weight rows {} != {k}*{k}*{cin}", ws[0])));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(contract("conv2d", format!("kernel {k} larger than padded input {h}x{w}")));
        }
        let cout = ws[1];
        let geo = Geometry { h, w, cin, k, stride, pad, ho: (h + 2 * pad - k) / stride + 1, wo: (w + 2 * pad - k) / stride + 1 };
        let rows = geo.ho * geo.wo;
        let cols = im2col(self.value(x).data(), &geo);
        let mut out = vec![T::zero(); rows * cout];
        gemm(rows, geo.patch(), cout, &cols, false, self.value(weight).data(), false, &mut out, T::zero());
        let out = Tensor::new(vec![geo.ho, geo.wo, cout], out)?;
        Ok(self.push(out, &[x, weight], move |ctx| {
            let p = geo.patch();
            let gx = ctx.needs[0].then(|| {
                let mut dcols = vec![T::zero(); rows * p];
                gemm(rows, cout, p, ctx.grad, false, ctx.inputs[1].data(), true, &mut dcols, T::zero());
                col2im(&dcols, &geo)
            });
            let gw = ctx.needs[1].then(|| {
                let cols = im2col(ctx.inputs[0].data(), &geo);
                let mut dw = vec![T::zero(); p * cout];
                gemm(p, rows, cout, &cols, true, ctx.grad, false, &mut dw, T::zero());
                dw
            });
            vec![gx, gw]
        }))
    }
}
