mod common;

use common::lcg_tensor;
use proptest::prelude::*;
use twoshot::nn::ops::{concat_channels, conv2d_forward, maxpool2x2_forward, upconv2x2_forward};
use twoshot::nn::{grad_check, BnStats, GradCheckOptions, Mode, ParamStore, Tape, Tensor4, Var};
use twoshot::Result;

const LAYER_TOL: f64 = 1e-5;

fn probe(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape();
    tape.dot(out, lcg_tensor(shape, seed, -1.0, 1.0))
}

fn check<F>(store: &mut ParamStore<f64>, inputs: &[Tensor4<f64>], f: F) -> f64
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let report = grad_check(store, inputs, f, GradCheckOptions::default()).unwrap();
    assert!(report.checked > 0);
    assert!(report.passes(LAYER_TOL), "{report:?}");
    report.max_rel_error
}

#[test]
fn conv_gradients() {
    for k in [1, 3] {
        let mut store = ParamStore::new();
        let w = store.insert("w", lcg_tensor([3, 2, k, k], 1, -0.5, 0.5)).unwrap();
        let b = store.insert("b", lcg_tensor([3, 1, 1, 1], 2, -0.5, 0.5)).unwrap();
        let x = lcg_tensor([2, 2, 5, 4], 3, -1.0, 1.0);
        check(&mut store, &[x], |t, s, v| {
            let (wv, bv) = (t.param(s, w), t.param(s, b));
            let y = t.conv(v[0], wv, bv)?;
            probe(t, y, 4)
        });
    }
}

#[test]
fn relu_gradients_away_from_the_kink() {
    let mut store = ParamStore::new();
    // magnitudes at least 0.1 so the finite-difference step never crosses 0
    let x = Tensor4::from_fn([2, 2, 3, 3], |i| if i % 3 == 0 { -0.1 - 0.01 * i as f64 } else { 0.1 + 0.02 * i as f64 });
    let report = grad_check(
        &mut store,
        &[x],
        |t, _, v| {
            let y = t.relu(v[0]);
            probe(t, y, 5)
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert_eq!(report.skipped_kinks, 0);
    assert!(report.passes(LAYER_TOL), "{report:?}");
}

#[test]
fn maxpool_gradients_with_distinct_values() {
    let mut store = ParamStore::new();
    let x = Tensor4::from_fn([2, 2, 4, 6], |i| ((i * 37) % 96) as f64 * 0.01);
    check(&mut store, &[x], |t, _, v| {
        let y = t.maxpool2x2(v[0])?;
        probe(t, y, 6)
    });
}

#[test]
fn upconv_gradients() {
    let mut store = ParamStore::new();
    let w = store.insert("w", lcg_tensor([3, 2, 2, 2], 7, -0.5, 0.5)).unwrap();
    let b = store.insert("b", lcg_tensor([2, 1, 1, 1], 8, -0.5, 0.5)).unwrap();
    let x = lcg_tensor([2, 3, 3, 2], 9, -1.0, 1.0);
    check(&mut store, &[x], |t, s, v| {
        let (wv, bv) = (t.param(s, w), t.param(s, b));
        let y = t.upconv2x2(v[0], wv, bv)?;
        probe(t, y, 10)
    });
}

#[test]
fn concat_and_add_gradients() {
    let mut store = ParamStore::new();
    let a = lcg_tensor([2, 1, 3, 3], 11, -1.0, 1.0);
    let b = lcg_tensor([2, 2, 3, 3], 12, -1.0, 1.0);
    let c = lcg_tensor([2, 3, 3, 3], 13, -1.0, 1.0);
    check(&mut store, &[a, b, c], |t, _, v| {
        let y = t.concat(&[v[0], v[1]])?;
        let z = t.add(y, v[2])?;
        probe(t, z, 14)
    });
}

#[test]
fn batchnorm_gradients_in_both_modes() {
    for mode in [Mode::Train, Mode::Eval] {
        let mut store = ParamStore::new();
        let g = store.insert("g", lcg_tensor([3, 1, 1, 1], 15, 0.5, 1.5)).unwrap();
        let b = store.insert("b", lcg_tensor([3, 1, 1, 1], 16, -0.5, 0.5)).unwrap();
        let x = lcg_tensor([3, 3, 2, 3], 17, -2.0, 2.0);
        let stats = BnStats {
            running_mean: vec![0.1, -0.2, 0.3],
            running_var: vec![0.8, 1.2, 0.5],
        };
        check(&mut store, &[x], |t, s, v| {
            let mut st = stats.clone();
            let (gv, bv) = (t.param(s, g), t.param(s, b));
            let y = t.batchnorm(v[0], gv, bv, &mut st, mode)?;
            probe(t, y, 18)
        });
    }
}

#[test]
fn mse_gradients() {
    let mut store = ParamStore::new();
    let p = lcg_tensor([3, 1, 4, 4], 19, 0.0, 1.0);
    let q = lcg_tensor([3, 1, 4, 4], 20, 0.0, 1.0);
    check(&mut store, &[p, q], |t, _, v| t.mse_loss(v[0], v[1]));
}

#[test]
fn composed_block_gradients() {
    // conv -> BN -> ReLU -> pool -> upconv, with a loss on top
    let mut store = ParamStore::new();
    let w = store.insert("w", lcg_tensor([4, 1, 3, 3], 21, -0.5, 0.5)).unwrap();
    let cb = store.insert("cb", lcg_tensor([4, 1, 1, 1], 22, -0.1, 0.1)).unwrap();
    let g = store.insert("g", lcg_tensor([4, 1, 1, 1], 23, 0.5, 1.5)).unwrap();
    let be = store.insert("be", lcg_tensor([4, 1, 1, 1], 24, -0.1, 0.1)).unwrap();
    let uw = store.insert("uw", lcg_tensor([4, 1, 2, 2], 25, -0.5, 0.5)).unwrap();
    let ub = store.insert("ub", lcg_tensor([1, 1, 1, 1], 26, -0.1, 0.1)).unwrap();
    let x = lcg_tensor([2, 1, 6, 6], 27, 0.0, 1.0);
    let target = lcg_tensor([2, 1, 6, 6], 28, 0.0, 1.0);
    let report = grad_check(
        &mut store,
        &[x, target],
        |t, s, v| {
            let mut st = BnStats::new(4);
            let [w, cb, g, be, uw, ub] = [w, cb, g, be, uw, ub].map(|id| t.param(s, id));
            let y = t.conv(v[0], w, cb)?;
            let y = t.batchnorm(y, g, be, &mut st, Mode::Train)?;
            let y = t.relu(y);
            let y = t.maxpool2x2(y)?;
            let y = t.upconv2x2(y, uw, ub)?;
            t.mse_loss(y, v[1])
        },
        // the conv bias ahead of train-mode BN has an identically zero
        // gradient, so only roundoff is left to compare there
        GradCheckOptions {
            floor: 1e-5,
            ..GradCheckOptions::default()
        },
    )
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn forward_shape_laws(
        n in 1usize..3,
        cin in 1usize..4,
        cout in 1usize..4,
        h2 in 1usize..5,
        w2 in 1usize..5,
        k in prop::sample::select(vec![1usize, 3, 5]),
    ) {
        let (h, w) = (2 * h2, 2 * w2);
        let x = lcg_tensor([n, cin, h, w], 1, -1.0, 1.0);
        let conv = conv2d_forward(&x, &Tensor4::zeros([cout, cin, k, k]), &Tensor4::zeros([cout, 1, 1, 1])).unwrap();
        prop_assert_eq!(conv.shape(), [n, cout, h, w]);
        let (pooled, argmax) = maxpool2x2_forward(&x).unwrap();
        prop_assert_eq!(pooled.shape(), [n, cin, h2, w2]);
        prop_assert_eq!(argmax.len(), pooled.len());
        let up = upconv2x2_forward(&x, &Tensor4::zeros([cin, cout, 2, 2]), &Tensor4::zeros([cout, 1, 1, 1])).unwrap();
        prop_assert_eq!(up.shape(), [n, cout, 2 * h, 2 * w]);
        let cat = concat_channels(&[&x, &conv]).unwrap();
        prop_assert_eq!(cat.shape(), [n, cin + cout, h, w]);
    }

    #[test]
    fn odd_sizes_cannot_be_pooled(n in 1usize..3, h in 1usize..6, w in 1usize..6) {
        let x = Tensor4::<f64>::zeros([n, 1, 2 * h + 1, 2 * w]);
        prop_assert!(maxpool2x2_forward(&x).is_err());
    }
}
