//! Finite-difference checks for every op, on random inputs of at most 64
//! entries, over 20 seeds each.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::gradcheck::finite_difference_check;
use crate::graph::{Graph, Var};
use crate::param::ParamStore;
use crate::tensor::{numel, Tensor};
use crate::Result;

const SEEDS: u64 = 20;
const EPS: f64 = 1e-3;
const TOL: f64 = 1e-4;

fn random(rng: &mut StdRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let data = (0..numel(shape)).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Checks `build` against finite differences with inputs drawn from `[lo, hi)`.
/// The scalar checked is a random projection of the op output.
fn check_range<F>(name: &str, shapes: &[&[usize]], lo: f64, hi: f64, build: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    for seed in 0..SEEDS {
        let mut rng = StdRng::seed_from_u64(seed * 7919 + 1);
        let mut store = ParamStore::new();
        let ids: Vec<_> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                assert!(numel(s) <= 64, "{name}: input {i} too large");
                store.add(format!("in{i}"), random(&mut rng, s, lo, hi)).unwrap()
            })
            .collect();
        let forward = |store: &ParamStore<f64>, g: &mut Graph<f64>| -> Result<Var> {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(store, id)).collect();
            build(g, &vars)
        };
        let mut g = Graph::inference();
        let out = forward(&store, &mut g).unwrap();
        let proj = random(&mut rng, g.value(out).shape(), -1.0, 1.0);
        assert!(g.value(out).all_finite(), "{name}: non-finite output");
        let report = finite_difference_check(
            |s, g| {
                let y = forward(s, g)?;
                g.dot_const(y, &proj)
            },
            &store,
            &ids,
            EPS,
        )
        .unwrap();
        let worst: Vec<_> = report.failures(TOL).collect();
        assert!(worst.is_empty(), "{name} seed {seed}: {worst:#?}");
    }
}

fn check<F>(name: &str, shapes: &[&[usize]], build: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_range(name, shapes, -1.0, 1.0, build)
}

#[test]
fn elementwise_binary() {
    check("add", &[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]));
    check("sub", &[&[3, 4], &[3, 4]], |g, v| g.sub(v[0], v[1]));
    check("mul", &[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1]));
    check("add_row", &[&[2, 3, 4], &[4]], |g, v| g.add_row(v[0], v[1]));
    check("mul_row", &[&[5, 4], &[4]], |g, v| g.mul_row(v[0], v[1]));
    check("mul_scalar", &[&[5, 4], &[1]], |g, v| g.mul_scalar(v[0], v[1]));
}

#[test]
fn elementwise_unary() {
    check("scale", &[&[6]], |g, v| Ok(g.scale(v[0], -2.5)));
    check("add_scalar", &[&[6]], |g, v| Ok(g.add_scalar(v[0], 0.3)));
    check("neg", &[&[6]], |g, v| Ok(g.neg(v[0])));
    check_range("sigmoid", &[&[4, 4]], -4.0, 4.0, |g, v| Ok(g.sigmoid(v[0])));
    check_range("silu", &[&[4, 4]], -4.0, 4.0, |g, v| Ok(g.silu(v[0])));
    check_range("gelu", &[&[4, 4]], -4.0, 4.0, |g, v| Ok(g.gelu(v[0])));
    check_range("tanh", &[&[4, 4]], -3.0, 3.0, |g, v| Ok(g.tanh(v[0])));
    check("exp", &[&[4, 4]], |g, v| Ok(g.exp(v[0])));
    check_range("clamp", &[&[4, 4]], -3.0, 3.0, |g, v| g.clamp(v[0], -1.0, 1.5));
}

#[test]
fn linear_algebra() {
    check("matmul", &[&[3, 5], &[5, 4]], |g, v| g.matmul(v[0], v[1]));
    check("matmul_ta", &[&[5, 3], &[5, 4]], |g, v| g.matmul_ex(v[0], v[1], true, false));
    check("matmul_tb", &[&[3, 5], &[4, 5]], |g, v| g.matmul_ex(v[0], v[1], false, true));
    check("matmul_tab", &[&[5, 3], &[4, 5]], |g, v| g.matmul_ex(v[0], v[1], true, true));
    check("bmm", &[&[2, 3, 4], &[2, 4, 5]], |g, v| g.bmm(v[0], v[1], false, false));
    check("bmm_t", &[&[2, 4, 3], &[2, 5, 4]], |g, v| g.bmm(v[0], v[1], true, true));
}

#[test]
fn convolution() {
    check("conv3x3", &[&[4, 4, 2], &[18, 3]], |g, v| g.conv2d(v[0], v[1], 3, 1, 1));
    check("conv_stride2", &[&[5, 5, 2], &[18, 2]], |g, v| g.conv2d(v[0], v[1], 3, 2, 1));
    check("conv1x1", &[&[3, 4, 3], &[3, 5]], |g, v| g.conv2d(v[0], v[1], 1, 1, 0));
}

#[test]
fn shape_ops() {
    check("reshape", &[&[3, 4]], |g, v| g.reshape(v[0], &[2, 6]));
    check("permute", &[&[2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1]));
    check("transpose", &[&[3, 5]], |g, v| g.transpose(v[0]));
    check("concat0", &[&[2, 3], &[4, 3]], |g, v| g.concat(&[v[0], v[1]], 0));
    check("concat1", &[&[2, 3], &[2, 2], &[2, 1]], |g, v| g.concat(&[v[0], v[1], v[2]], 1));
    check("narrow", &[&[3, 6]], |g, v| g.narrow(v[0], 1, 2, 3));
    check("split", &[&[4, 5]], |g, v| {
        let parts = g.split(v[0], 1, &[2, 3])?;
        let a = g.scale(parts[0], 2.0);
        g.concat(&[parts[1], a], 1)
    });
    check("gather_rows", &[&[4, 3]], |g, v| g.gather_rows(v[0], &[2, 0, 2, 3]));
}

#[test]
fn reductions() {
    check("sum", &[&[3, 4]], |g, v| Ok(g.sum(v[0])));
    check("mean", &[&[3, 4]], |g, v| Ok(g.mean(v[0])));
    check("sum_axis", &[&[2, 3, 4]], |g, v| g.sum_axis(v[0], 1));
    check("mean_axis", &[&[2, 3, 4]], |g, v| g.mean_axis(v[0], 2));
    check("weighted_sum", &[&[3, 2], &[3, 2], &[2]], |g, v| g.weighted_sum(&[v[0], v[1]], v[2]));
}

#[test]
fn normalisation() {
    check_range("softmax_last", &[&[3, 4]], -3.0, 3.0, |g, v| g.softmax(v[0], 1));
    check_range("softmax_mid", &[&[2, 4, 3]], -3.0, 3.0, |g, v| g.softmax(v[0], 1));
    let keep = [true, false, true, true, false, false, false, false, true, true, true, false];
    check_range("masked_softmax", &[&[2, 3, 4]], -3.0, 3.0, move |g, v| g.masked_softmax(v[0], &keep));
    check_range("log_softmax", &[&[3, 5]], -3.0, 3.0, |g, v| g.log_softmax(v[0]));
    check("normalize_rows", &[&[3, 6]], |g, v| g.normalize_rows(v[0], 1e-5));
}

#[test]
fn sampling() {
    check("resize_up", &[&[2, 3, 2]], |g, v| g.resize_bilinear(v[0], 5, 6));
    check("resize_down", &[&[6, 4, 2]], |g, v| g.resize_bilinear(v[0], 3, 2));
    check("bilinear_feature", &[&[3, 4, 2]], |g, v| {
        let pts = g.constant(Tensor::from_f64([3, 2], &[0.3, 0.7, 0.05, 0.5, 0.9, 0.2]).unwrap());
        g.bilinear_sample(v[0], pts)
    });
    // Points range a little outside the unit square to exercise clamping.
    check_range("bilinear_points", &[&[6, 2]], -0.1, 1.1, |g, v| {
        let f = g.constant(Tensor::from_f64([3, 4, 2], &(0..24).map(|i| ((i * 7) % 11) as f64 * 0.1).collect::<Vec<_>>()).unwrap());
        let pts = g.reshape(v[0], &[6, 2])?;
        g.bilinear_sample(f, pts)
    });
    check_range("deformable", &[&[4, 4, 4], &[2, 2, 4], &[2, 2, 2, 2, 2], &[2, 2, 2, 2]], 0.05, 0.95, |g, v| {
        g.deformable_sample(&[v[0], v[1]], v[2], v[3], 2)
    });
}

#[test]
fn losses() {
    let mut rng = StdRng::seed_from_u64(3);
    let target = Tensor::new(vec![8, 3], (0..24).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect()).unwrap();
    let t = target.clone();
    check_range("bce", &[&[8, 3]], -4.0, 4.0, move |g, v| g.bce_logits_cols(v[0], &t));
    check_range("dice", &[&[8, 3]], -4.0, 4.0, move |g, v| g.dice_cols(v[0], &target, 1.0));
}
