use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{max_relative_error, numeric_gradient};
use super::*;
use crate::error::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_vec(r: &mut ChaCha8Rng, n: usize, a: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-a..a)).collect()
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn affine_identity_and_sum_cases() {
    let x = Tensor::<f64>::vector(vec![1.0, 2.0]);
    let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let b = Tensor::vector(vec![0.0, 0.0]);
    assert_eq!(affine(&x, &w, &b).unwrap().data(), &[1.0, 2.0]);

    let x = Tensor::<f64>::vector(vec![1.0, 1.0]);
    let w = Tensor::matrix(1, 2, vec![2.0, 3.0]).unwrap();
    let b = Tensor::vector(vec![-5.0]);
    assert_eq!(affine(&x, &w, &b).unwrap().data(), &[0.0]);
}

#[test]
fn affine_matches_naive_loop() {
    let mut r = rng(3);
    let wv = rand_vec(&mut r, 12, 1.0);
    let xv = rand_vec(&mut r, 4, 1.0);
    let bv = rand_vec(&mut r, 3, 1.0);
    let mut oracle = [0.0; 3];
    for i in 0..3 {
        oracle[i] = bv[i];
        for j in 0..4 {
            oracle[i] += wv[i * 4 + j] * xv[j];
        }
    }
    let y = affine(
        &Tensor::vector(xv),
        &Tensor::matrix(3, 4, wv).unwrap(),
        &Tensor::vector(bv),
    )
    .unwrap();
    for (a, b) in y.data().iter().zip(oracle) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn affine_shape_mismatch() {
    let x = Tensor::<f64>::vector(vec![1.0, 2.0, 3.0]);
    let w = Tensor::matrix(2, 2, vec![1.0; 4]).unwrap();
    let b = Tensor::vector(vec![0.0, 0.0]);
    assert!(matches!(affine(&x, &w, &b), Err(Error::Shape { .. })));
}

#[test]
fn softmax_cases() {
    let y = softmax(&Tensor::<f64>::vector(vec![0.0, 0.0, 0.0])).unwrap();
    for v in y.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let y = softmax(&Tensor::<f64>::vector(vec![1000.0, 0.0])).unwrap();
    assert!((y.data()[0] - 1.0).abs() < 1e-12 && y.data()[1] < 1e-300 + 1e-12);
    assert!(y.is_finite());

    let y = softmax(&Tensor::<f64>::vector(vec![1.0, 2.0, 3.0])).unwrap();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (k, v) in y.data().iter().enumerate() {
        assert!((v - ((k + 1) as f64).exp() / z).abs() < 1e-12);
    }
    assert!(matches!(
        softmax(&Tensor::<f64>::vector(vec![])),
        Err(Error::Empty(_))
    ));
}

#[test]
fn mse_cases() {
    let a = Tensor::<f64>::vector(vec![0.3, -1.0]);
    assert_eq!(mse(&a, &a).unwrap(), 0.0);
    let one = Tensor::<f64>::vector(vec![1.0, 1.0]);
    let zero = Tensor::<f64>::vector(vec![0.0, 0.0]);
    assert_eq!(mse(&one, &zero).unwrap(), 1.0);

    let mut r = rng(9);
    let (x, y) = (rand_vec(&mut r, 7, 2.0), rand_vec(&mut r, 7, 2.0));
    let oracle = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 7.0;
    let v = mse(&Tensor::vector(x), &Tensor::vector(y)).unwrap();
    assert!((v - oracle).abs() < 1e-14);
    assert!(mse(&one, &Tensor::vector(vec![1.0])).is_err());
}

#[test]
fn kl_cases() {
    let z = Tensor::<f64>::vector(vec![0.0, 0.0]);
    let o = Tensor::<f64>::vector(vec![1.0, 1.0]);
    assert_eq!(kl_gauss(&z, &o).unwrap(), 0.0);
    let v: f64 = kl_gauss(&Tensor::vector(vec![1.0]), &Tensor::vector(vec![1.0])).unwrap();
    assert!((v - 0.5).abs() < 1e-15);

    let (mu, s) = ([0.5f64, -0.5], [2.0f64, 0.5]);
    let oracle: f64 = 0.5
        * mu.iter()
            .zip(&s)
            .map(|(m, s)| m * m + s * s - (s * s).ln() - 1.0)
            .sum::<f64>();
    let v = kl_gauss(&Tensor::vector(mu.to_vec()), &Tensor::vector(s.to_vec())).unwrap();
    assert!((v - oracle).abs() < 1e-14);
    assert!(kl_gauss(&Tensor::vector(vec![0.0]), &Tensor::vector(vec![0.0])).is_err());
}

fn gru_layout(cell: &GruCell) -> Arc<SegmentLayout> {
    cell.declare(SegmentLayout::builder()).build().unwrap()
}

#[test]
fn gru_zero_weights_halves_state() {
    let cell = GruCell::new("g", 3, 4);
    let p = ParamVector::<f64>::zeros(gru_layout(&cell));
    let h = Tensor::vector(vec![0.2, -0.4, 0.8, 1.0]);
    let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
    let y = gru_cell(&cell, &h, &x, &p).unwrap();
    for (a, b) in y.data().iter().zip(h.data()) {
        assert!((a - 0.5 * b).abs() < 1e-15);
    }
}

#[test]
fn gru_saturated_update_gate_tracks_candidate() {
    let cell = GruCell::new("g", 2, 2);
    let mut p = ParamVector::<f64>::zeros(gru_layout(&cell));
    p.segment_mut("g.b_u").unwrap().fill(50.0);
    p.segment_mut("g.b_h").unwrap().copy_from_slice(&[0.3, -0.7]);
    let y = gru_cell(
        &cell,
        &Tensor::vector(vec![0.0, 0.0]),
        &Tensor::vector(vec![1.0, -1.0]),
        &p,
    )
    .unwrap();
    assert!((y.data()[0] - 0.3f64.tanh()).abs() < 1e-12);
    assert!((y.data()[1] - (-0.7f64).tanh()).abs() < 1e-12);
}

/// Scalar restatement of the update/reset/candidate equations.
fn gru_oracle(p: &ParamVector<f64>, h: &[f64], x: &[f64]) -> Vec<f64> {
    let nh = h.len();
    let cat = nh + x.len();
    let (wu, wr, wh) = (
        p.segment("g.w_u").unwrap(),
        p.segment("g.w_r").unwrap(),
        p.segment("g.w_h").unwrap(),
    );
    let (bu, br, bh) = (
        p.segment("g.b_u").unwrap(),
        p.segment("g.b_r").unwrap(),
        p.segment("g.b_h").unwrap(),
    );
    let hx: Vec<f64> = h.iter().chain(x).copied().collect();
    let mut u = vec![0.0; nh];
    let mut r = vec![0.0; nh];
    for i in 0..nh {
        let (mut su, mut sr) = (bu[i], br[i]);
        for j in 0..cat {
            su += wu[i * cat + j] * hx[j];
            sr += wr[i * cat + j] * hx[j];
        }
        u[i] = sig(su);
        r[i] = sig(sr);
    }
    let rhx: Vec<f64> = (0..nh).map(|i| r[i] * h[i]).chain(x.iter().copied()).collect();
    (0..nh)
        .map(|i| {
            let mut s = bh[i];
            for j in 0..cat {
                s += wh[i * cat + j] * rhx[j];
            }
            (1.0 - u[i]) * h[i] + u[i] * s.tanh()
        })
        .collect()
}

#[test]
fn gru_matches_scalar_oracle() {
    let cell = GruCell::new("g", 3, 4);
    let mut r = rng(11);
    let p = ParamVector::<f64>::glorot(gru_layout(&cell), &mut r);
    let mut p = p;
    for name in ["g.b_u", "g.b_r", "g.b_h"] {
        let v = rand_vec(&mut r, 4, 0.5);
        p.segment_mut(name).unwrap().copy_from_slice(&v);
    }
    let h = rand_vec(&mut r, 4, 0.9);
    let x = rand_vec(&mut r, 3, 1.5);
    let y = gru_cell(&cell, &Tensor::vector(h.clone()), &Tensor::vector(x.clone()), &p).unwrap();
    for (a, b) in y.data().iter().zip(gru_oracle(&p, &h, &x)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn gru_rejects_wrong_dims() {
    let cell = GruCell::new("g", 3, 4);
    let p = ParamVector::<f64>::zeros(gru_layout(&cell));
    let r = gru_cell(&cell, &Tensor::vector(vec![0.0; 3]), &Tensor::vector(vec![0.0; 3]), &p);
    assert!(matches!(r, Err(Error::Shape { .. })));
}

#[test]
fn affine_mse_gradient_matches_finite_difference() {
    let layout = SegmentLayout::builder()
        .push("w", &[2, 2])
        .push("b", &[2])
        .build()
        .unwrap();
    let mut r = rng(5);
    let mut p = ParamVector::<f64>::glorot(layout, &mut r);
    p.segment_mut("b").unwrap().copy_from_slice(&[0.1, -0.2]);
    let x = Tensor::vector(vec![0.7, -1.3]);
    let y = Tensor::vector(vec![0.2, 0.5]);
    let loss = |p: &ParamVector<f64>| -> (f64, Option<Gradients<f64>>, Binding) {
        let mut g = Graph::new();
        let b = g.bind(p);
        let xv = g.input(x.clone()).unwrap();
        let yv = g.input(y.clone()).unwrap();
        let w = g.param(b, "w").unwrap();
        let bb = g.param(b, "b").unwrap();
        let o = g.affine(xv, w, bb).unwrap();
        let l = g.mse(o, yv).unwrap();
        let v = g.value(l).item().unwrap();
        (v, Some(g.backward(l).unwrap()), b)
    };
    let (_, grads, b) = loss(&p);
    p.zero_grad();
    grads.unwrap().accumulate_into(b, &mut p).unwrap();
    let numeric = numeric_gradient(&p, 1e-6, |q| loss(q).0);
    assert!(max_relative_error(p.grads(), &numeric) < 1e-4);
}

#[test]
fn unused_segment_gets_zero_gradient() {
    let layout = SegmentLayout::builder()
        .push("used", &[3])
        .push("unused", &[2])
        .build()
        .unwrap();
    let p = ParamVector::<f64>::from_values(layout, vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
    let mut g = Graph::new();
    let b = g.bind(&p);
    let u = g.param(b, "used").unwrap();
    let s = g.square(u).unwrap();
    let l = g.sum(s).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(&grads.get(b)[..3], &[2.0, 4.0, 6.0]);
    assert_eq!(&grads.get(b)[3..], &[0.0, 0.0]);
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::vector(vec![1.0, 2.0])).unwrap();
    assert!(matches!(g.backward(x), Err(Error::Shape { .. })));
}

#[test]
fn non_finite_activation_is_an_error() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::vector(vec![-1.0])).unwrap();
    assert!(matches!(g.ln(x), Err(Error::NonFinite { .. })));
}

#[test]
fn gru_chain_gradient_matches_finite_difference() {
    let cell = GruCell::new("g", 3, 4);
    let mut r = rng(21);
    let mut p = ParamVector::<f64>::glorot(gru_layout(&cell), &mut r);
    for name in ["g.b_u", "g.b_r", "g.b_h"] {
        let v = rand_vec(&mut r, 4, 0.3);
        p.segment_mut(name).unwrap().copy_from_slice(&v);
    }
    let xs: Vec<Vec<f64>> = (0..5).map(|_| rand_vec(&mut r, 3, 1.0)).collect();
    let target = rand_vec(&mut r, 4, 0.5);
    let run = |p: &ParamVector<f64>, want_grad: bool| -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let b = g.bind(p);
        let mut h = g.input(Tensor::zeros(&[4])).unwrap();
        for x in &xs {
            let xv = g.input(Tensor::vector(x.clone())).unwrap();
            h = cell.step(&mut g, b, h, xv).unwrap();
        }
        let t = g.input(Tensor::vector(target.clone())).unwrap();
        let l = g.mse(h, t).unwrap();
        let v = g.value(l).item().unwrap();
        let grad = if want_grad {
            g.backward(l).unwrap().get(b).to_vec()
        } else {
            Vec::new()
        };
        (v, grad)
    };
    let (_, analytic) = run(&p, true);
    let numeric = numeric_gradient(&p, 1e-6, |q| run(q, false).0);
    let err = max_relative_error(&analytic, &numeric);
    assert!(err < 1e-4, "max rel err {err}");
    p.zero_grad();
}

#[test]
fn every_unary_and_structural_op_passes_gradcheck() {
    let layout = SegmentLayout::builder()
        .push("a", &[2, 3])
        .push("b", &[2, 3])
        .push("t", &[4, 3])
        .build()
        .unwrap();
    let mut r = rng(33);
    let vals = rand_vec(&mut r, layout.total(), 0.9);
    let p = ParamVector::<f64>::from_values(layout, vals).unwrap();
    let run = |p: &ParamVector<f64>, want: bool| -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let bd = g.bind(p);
        let a = g.param(bd, "a").unwrap();
        let b = g.param(bd, "b").unwrap();
        let t = g.param(bd, "t").unwrap();
        let s1 = g.sigmoid(a).unwrap();
        let s2 = g.tanh(b).unwrap();
        let s3 = g.softplus(a).unwrap();
        let e = g.exp(b).unwrap();
        let lg = g.ln(e).unwrap();
        let m = g.mul(s1, s2).unwrap();
        let mn = g.minimum(s3, lg).unwrap();
        let sub = g.sub(m, mn).unwrap();
        let sm = g.softmax(sub).unwrap();
        let rows = g.gather_rows(t, &[3, 0]).unwrap();
        let cat = g.concat(&[sm, rows]).unwrap();
        let sl = g.slice_last(cat, 1, 4).unwrap();
        let sq = g.square(sl).unwrap();
        let sr = g.sum_last(sq).unwrap();
        let sc = g.scale_shift(sr, 1.7, 0.3).unwrap();
        let mean = g.mean(sc).unwrap();
        let mu = g.slice_last(a, 0, 2).unwrap();
        let sig = g.slice_last(e, 0, 2).unwrap();
        let kl = g.kl_gauss(mu, sig).unwrap();
        let kl = g.scale(kl, 0.1).unwrap();
        let l = g.add(mean, kl).unwrap();
        let v = g.value(l).item().unwrap();
        let grad = if want {
            g.backward(l).unwrap().get(bd).to_vec()
        } else {
            Vec::new()
        };
        (v, grad)
    };
    let (_, analytic) = run(&p, true);
    let numeric = numeric_gradient(&p, 1e-6, |q| run(q, false).0);
    let err = max_relative_error(&analytic, &numeric);
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn adam_zero_grad_is_noop() {
    let layout = SegmentLayout::builder().push("w", &[3]).build().unwrap();
    let mut p = ParamVector::<f64>::from_values(layout, vec![1.0, -2.0, 3.0]).unwrap();
    let mut st = AdamState::for_params(&p);
    adam_update(&mut p, &mut st, 0.01).unwrap();
    assert_eq!(p.values(), &[1.0, -2.0, 3.0]);
}

#[test]
fn adam_first_step_moves_by_lr() {
    // m̂ = 1, v̂ = 1 after bias correction, so Δ = −lr/(1+ε).
    let layout = SegmentLayout::builder().push("w", &[1]).build().unwrap();
    let mut p = ParamVector::<f64>::from_values(layout, vec![0.5]).unwrap();
    p.grads_mut()[0] = 1.0;
    let mut st = AdamState::for_params(&p);
    adam_update(&mut p, &mut st, 0.01).unwrap();
    assert!((p.values()[0] - (0.5 - 0.01 / (1.0 + 1e-8))).abs() < 1e-15);
    assert_eq!(p.grads()[0], 1.0);
    assert_eq!(st.step_count(), 1);
}

#[test]
fn adam_converges_on_quadratic() {
    let layout = SegmentLayout::builder().push("w", &[1]).build().unwrap();
    let mut p = ParamVector::<f64>::from_values(layout, vec![1.0]).unwrap();
    let mut st = AdamState::for_params(&p);
    for _ in 0..100 {
        p.grads_mut()[0] = 2.0 * p.values()[0];
        adam_update(&mut p, &mut st, 0.1).unwrap();
    }
    assert!(p.values()[0].abs() < 0.1, "w = {}", p.values()[0]);
}

#[test]
fn adam_rejects_bad_lr() {
    let layout = SegmentLayout::builder().push("w", &[1]).build().unwrap();
    let mut p = ParamVector::<f64>::zeros(layout);
    let mut st = AdamState::for_params(&p);
    assert!(adam_update(&mut p, &mut st, 0.0).is_err());
    assert!(adam_update(&mut p, &mut st, -1.0).is_err());
}

#[test]
fn adam_filter_skips_frozen_segments() {
    let layout = SegmentLayout::builder()
        .push("frozen", &[2])
        .push("live", &[2])
        .build()
        .unwrap();
    let mut p = ParamVector::<f64>::from_values(layout, vec![1.0; 4]).unwrap();
    p.grads_mut().fill(1.0);
    let mut st = AdamState::for_params(&p);
    st.update_where(&mut p, 0.1, |n| n == "live").unwrap();
    assert_eq!(&p.values()[..2], &[1.0, 1.0]);
    assert!(p.values()[2] < 1.0);
}

#[test]
fn f32_path_compiles_and_agrees() {
    let y32 = softmax(&Tensor::<f32>::vector(vec![1.0, 2.0, 3.0])).unwrap();
    let y64 = softmax(&Tensor::<f64>::vector(vec![1.0, 2.0, 3.0])).unwrap();
    for (a, b) in y32.data().iter().zip(y64.data()) {
        assert!((*a as f64 - b).abs() < 1e-6);
    }
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_is_distribution(v in prop::collection::vec(-10.0f64..10.0, 1..12)) {
            let y = softmax(&Tensor::vector(v)).unwrap();
            let s: f64 = y.data().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(y.data().iter().all(|&p| p > 0.0 && p < 1.0 || y.len() == 1));
        }

        #[test]
        fn kl_nonnegative(mu in prop::collection::vec(-3.0f64..3.0, 1..6),
                          ls in prop::collection::vec(-2.0f64..2.0, 6)) {
            let sigma: Vec<f64> = ls.iter().take(mu.len()).map(|v| v.exp()).collect();
            let k = kl_gauss(&Tensor::vector(mu), &Tensor::vector(sigma)).unwrap();
            prop_assert!(k >= 0.0);
        }

        #[test]
        fn gru_output_bounded(seed in 0u64..1000,
                              h in prop::collection::vec(-3.0f64..3.0, 4),
                              x in prop::collection::vec(-5.0f64..5.0, 3)) {
            let cell = GruCell::new("g", 3, 4);
            let p = ParamVector::<f64>::glorot(gru_layout(&cell), &mut rng(seed));
            let bound = h.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            let y = gru_cell(&cell, &Tensor::vector(h), &Tensor::vector(x), &p).unwrap();
            prop_assert!(y.data().iter().all(|v| v.abs() <= bound + 1e-12));
        }
    }
}
