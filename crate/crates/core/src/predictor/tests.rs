use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::synthetic::{zipf_sequences, ZipfSequenceSpec};
use super::*;
use crate::nn::gradcheck::{max_relative_error, numeric_gradient};
use crate::nn::{ParamVector, Tensor};

fn micro() -> PredictorConfig {
    PredictorConfig {
        catalog: 4,
        locations: 3,
        time_buckets: 5,
        loc_embed: 2,
        time_embed: 2,
        context_dim: 1,
        enc_hidden: 4,
        latent: 3,
        dec_hidden: 4,
        rnn_hidden: 4,
        ..PredictorConfig::default()
    }
}

fn frame(x: [f64; 4], loc: usize, t: usize, c: f64) -> FeatureFrame {
    FeatureFrame {
        requests: x.to_vec(),
        location: loc,
        time_bucket: t,
        context: vec![c],
    }
}

fn random_params(m: &GruVae, seed: u64) -> ParamVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p: ParamVector<f64> = m.init_params(&mut rng);
    // Glorot leaves biases at zero; perturb everything so biases are exercised.
    for v in p.values_mut() {
        *v += 0.1 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
    }
    p
}

// Independent scalar re-implementation reading weights straight from segments.
struct Oracle<'a> {
    p: &'a ParamVector<f64>,
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

impl Oracle<'_> {
    fn seg(&self, n: &str) -> Vec<f64> {
        self.p.segment(n).unwrap().to_vec()
    }

    fn dense(&self, w: &str, b: &str, x: &[f64]) -> Vec<f64> {
        let w = self.seg(w);
        let b = self.seg(b);
        let n = x.len();
        (0..b.len())
            .map(|i| b[i] + (0..n).map(|j| w[i * n + j] * x[j]).sum::<f64>())
            .collect()
    }

    fn input(&self, f: &FeatureFrame, cfg: &PredictorConfig) -> Vec<f64> {
        let le = self.seg("emb.loc");
        let te = self.seg("emb.time");
        let mut h = f.requests.clone();
        h.extend_from_slice(&le[f.location * cfg.loc_embed..(f.location + 1) * cfg.loc_embed]);
        h.extend_from_slice(&te[f.time_bucket * cfg.time_embed..(f.time_bucket + 1) * cfg.time_embed]);
        h.extend_from_slice(&f.context);
        h
    }

    fn encode(&self, h: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hid: Vec<f64> = self.dense("enc.l0.w", "enc.l0.b", h).into_iter().map(f64::tanh).collect();
        let mu = self.dense("enc_mu.l0.w", "enc_mu.l0.b", &hid);
        let sigma = self
            .dense("enc_sigma.l0.w", "enc_sigma.l0.b", &hid)
            .into_iter()
            .map(softplus)
            .collect();
        (mu, sigma)
    }

    fn decode(&self, z: &[f64]) -> Vec<f64> {
        let hid: Vec<f64> = self.dense("dec.l0.w", "dec.l0.b", z).into_iter().map(f64::tanh).collect();
        self.dense("dec.l1.w", "dec.l1.b", &hid)
    }

    fn gru(&self, h: &[f64], x: &[f64]) -> Vec<f64> {
        let hx: Vec<f64> = h.iter().chain(x).copied().collect();
        let u: Vec<f64> = self.dense("rnn.w_u", "rnn.b_u", &hx).into_iter().map(sig).collect();
        let r: Vec<f64> = self.dense("rnn.w_r", "rnn.b_r", &hx).into_iter().map(sig).collect();
        let rhx: Vec<f64> = h.iter().zip(&r).map(|(a, b)| a * b).chain(x.iter().copied()).collect();
        let c: Vec<f64> = self.dense("rnn.w_h", "rnn.b_h", &rhx).into_iter().map(f64::tanh).collect();
        (0..h.len()).map(|i| (1.0 - u[i]) * h[i] + u[i] * c[i]).collect()
    }

    fn forecast(&self, frames: &[FeatureFrame], cfg: &PredictorConfig, eps: &[Vec<f64>]) -> Vec<f64> {
        let mut h = vec![0.0; cfg.rnn_hidden];
        for (f, e) in frames.iter().zip(eps) {
            let (mu, sigma) = self.encode(&self.input(f, cfg));
            let z: Vec<f64> = (0..mu.len()).map(|i| mu[i] + sigma[i] * e[i]).collect();
            h = self.gru(&h, &self.decode(&z));
        }
        let logits = self.dense("head.w", "head.b", &h);
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }
}

#[test]
fn build_input_dimension_is_sum_of_parts() {
    let m = GruVae::new(micro()).unwrap();
    let p = random_params(&m, 1);
    let h = m.build_input(&frame([1.0, 0.0, 2.0, 0.5], 1, 2, 0.3), &p).unwrap();
    assert_eq!(h.shape(), &[9]);
}

#[test]
fn zero_features_give_padded_embeddings() {
    let m = GruVae::new(micro()).unwrap();
    let p = random_params(&m, 2);
    let h = m.build_input(&frame([0.0; 4], 2, 4, 0.0), &p).unwrap();
    let le = p.segment("emb.loc").unwrap();
    let te = p.segment("emb.time").unwrap();
    let mut want = vec![0.0; 4];
    want.extend_from_slice(&le[4..6]);
    want.extend_from_slice(&te[8..10]);
    want.push(0.0);
    assert_eq!(h.data(), want.as_slice());
}

#[test]
fn location_change_only_touches_location_span() {
    let m = GruVae::new(micro()).unwrap();
    let p = random_params(&m, 3);
    let a = m.build_input(&frame([0.2, 0.3, 0.5, 0.0], 0, 1, 0.7), &p).unwrap();
    let b = m.build_input(&frame([0.2, 0.3, 0.5, 0.0], 2, 1, 0.7), &p).unwrap();
    for i in 0..9 {
        let differs = a.data()[i] != b.data()[i];
        assert_eq!(differs, (4..6).contains(&i), "index {i}");
    }
}

#[test]
fn build_input_rejects_bad_indices() {
    let m = GruVae::new(micro()).unwrap();
    let p = random_params(&m, 4);
    assert!(m.build_input(&frame([0.0; 4], 3, 0, 0.0), &p).is_err());
    assert!(m.build_input(&frame([0.0; 4], 0, 5, 0.0), &p).is_err());
    assert!(m.build_input(&frame([-1.0, 0.0, 0.0, 0.0], 0, 0, 0.0), &p).is_err());
}

#[test]
fn zero_weight_encoder_gives_ln2_sigma() {
    let m = GruVae::new(micro()).unwrap();
    let p: ParamVector<f64> = m.zero_params();
    let h = Tensor::vector(vec![0.3; 9]);
    let (mu, sigma) = m.vae_encode(&h, &p).unwrap();
    assert_eq!(mu.data(), &[0.0; 3]);
    for &s in sigma.data() {
        assert!((s - 2f64.ln()).abs() < 1e-15);
    }
    let x = m.vae_decode(&Tensor::vector(vec![1.0, 2.0, 3.0]), &p).unwrap();
    assert_eq!(x.data(), &[0.0; 4]);
}

#[test]
fn encode_decode_match_scalar_oracle() {
    let cfg = micro();
    let m = GruVae::new(cfg.clone()).unwrap();
    let p = random_params(&m, 5);
    let o = Oracle { p: &p };
    let h: Vec<f64> = (0..9).map(|i| (i as f64 * 0.37).sin()).collect();
    let (mu, sigma) = m.vae_encode(&Tensor::vector(h.clone()), &p).unwrap();
    let (omu, osig) = o.encode(&h);
    for i in 0..3 {
        assert!((mu.data()[i] - omu[i]).abs() < 1e-12);
        assert!((sigma.data()[i] - osig[i]).abs() < 1e-12);
        assert!(sigma.data()[i] > 0.0);
    }
    let z = vec![0.4, -1.2, 0.9];
    let x = m.vae_decode(&Tensor::vector(z.clone()), &p).unwrap();
    assert_eq!(x.shape(), &[4]);
    for (a, b) in x.data().iter().zip(o.decode(&z)) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(m.vae_decode(&Tensor::vector(vec![0.0; 2]), &p).is_err());
    assert!(m.vae_encode(&Tensor::vector(vec![0.0; 8]), &p).is_err());
}

#[test]
fn reparameterize_arithmetic() {
    let z = reparameterize(
        &Tensor::vector(vec![1.0, -1.0]),
        &Tensor::vector(vec![2.0, 0.5]),
        &Tensor::vector(vec![1.0, -1.0]),
    )
    .unwrap();
    assert_eq!(z.data(), &[3.0, -1.5]);
    let z0 = reparameterize(
        &Tensor::vector(vec![0.7, 0.1]),
        &Tensor::vector(vec![3.0, 3.0]),
        &Tensor::vector(vec![0.0, 0.0]),
    )
    .unwrap();
    assert_eq!(z0.data(), &[0.7, 0.1]);
    let zs = reparameterize(
        &Tensor::vector(vec![0.7]),
        &Tensor::vector(vec![1e-300]),
        &Tensor::vector(vec![5.0]),
    )
    .unwrap();
    assert_eq!(zs.data(), &[0.7]);
}

#[test]
fn vae_loss_composes() {
    let x = Tensor::vector(vec![0.1, 0.9]);
    let mu = Tensor::vector(vec![0.0, 0.0]);
    let one = Tensor::vector(vec![1.0, 1.0]);
    assert_eq!(vae_loss(&x, &x, &mu, &one, 1.0).unwrap(), 0.0);
    let xh = Tensor::vector(vec![0.3, 0.5]);
    let mse: f64 = (0.04 + 0.16) / 2.0;
    assert!((vae_loss(&x, &xh, &Tensor::vector(vec![1.0, 2.0]), &Tensor::vector(vec![2.0, 0.5]), 0.0).unwrap() - mse).abs() < 1e-15);
    // KL for μ=[1,2], σ=[2,0.5]: ½[(1+4−ln4−1) + (4+0.25−ln0.25−1)]
    let kl = 0.5 * ((1.0 + 4.0 - 4f64.ln() - 1.0) + (4.0 + 0.25 - 0.25f64.ln() - 1.0));
    let got = vae_loss(&x, &xh, &Tensor::vector(vec![1.0, 2.0]), &Tensor::vector(vec![2.0, 0.5]), 0.5).unwrap();
    assert!((got - (mse + 0.5 * kl)).abs() < 1e-12);
}

#[test]
fn zero_weights_forecast_uniform() {
    let m = GruVae::new(micro()).unwrap();
    let p: ParamVector<f64> = m.zero_params();
    let f = m
        .predict_popularity(&[frame([0.5, 0.5, 0.0, 0.0], 0, 0, 0.0)], &p, &mut Noise::zero(), 7)
        .unwrap();
    assert_eq!(f.slot, 7);
    for &v in &f.probs {
        assert!((v - 0.25).abs() < 1e-15);
    }
}

#[test]
fn empty_sequence_rejected() {
    let m = GruVae::new(micro()).unwrap();
    let p: ParamVector<f64> = m.zero_params();
    assert!(m.predict_popularity(&[], &p, &mut Noise::zero(), 0).is_err());
}

#[test]
fn three_frame_forecast_matches_scalar_pipeline() {
    let cfg = micro();
    let m = GruVae::new(cfg.clone()).unwrap();
    let p = random_params(&m, 6);
    let frames = vec![
        frame([0.1, 0.2, 0.3, 0.4], 0, 1, 0.5),
        frame([0.4, 0.0, 0.6, 0.0], 2, 2, -0.2),
        frame([0.25, 0.25, 0.25, 0.25], 1, 3, 0.9),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let got = m
        .predict_popularity(&frames, &p, &mut Noise::Sampled(&mut rng), 0)
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eps: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..3).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let want = Oracle { p: &p }.forecast(&frames, &cfg, &eps);
    for (a, b) in got.probs.iter().zip(&want) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
    assert!((got.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

fn micro_samples(n: usize, seed: u64) -> Vec<Sample> {
    zipf_sequences(&ZipfSequenceSpec {
        catalog: 4,
        window: 3,
        samples: n,
        locations: 3,
        time_buckets: 5,
        requests_per_slot: 10,
        shift_every: 2,
        seed,
        ..ZipfSequenceSpec::default()
    })
}

#[test]
fn joint_loss_mixes_components() {
    let m = GruVae::new(micro()).unwrap();
    let p = random_params(&m, 7);
    let data = micro_samples(3, 1);
    let batch: Vec<&Sample> = data.iter().collect();
    let l = |lam: f64| {
        m.joint_loss(&batch, &p, &mut Noise::zero(), lam, 1.0).unwrap()
    };
    let mid = l(0.5);
    assert!((l(1.0).total - mid.vae).abs() < 1e-15);
    assert!((l(0.0).total - mid.gru).abs() < 1e-15);
    assert!((mid.total - 0.5 * (mid.vae + mid.gru)).abs() < 1e-15);
    assert!(m.joint_loss(&batch, &p, &mut Noise::zero(), 1.5, 1.0).is_err());
    assert!(m.joint_loss(&batch, &p, &mut Noise::zero(), -0.1, 1.0).is_err());
}

#[test]
fn joint_loss_gradient_matches_finite_differences() {
    for input in [GruInput::Reconstruction, GruInput::Latent] {
        let cfg = PredictorConfig {
            gru_input: input,
            ..micro()
        };
        let m = GruVae::new(cfg).unwrap();
        let mut p = random_params(&m, 8);
        let data = micro_samples(2, 2);
        let batch: Vec<&Sample> = data.iter().collect();
        let eps_seed = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(eps_seed);
        p.zero_grad();
        m.accumulate_gradient(&batch, &mut p, &mut Noise::Sampled(&mut rng), 0.5, 1.0, 1.0)
            .unwrap();
        let analytic = p.grads().to_vec();
        let numeric = numeric_gradient(&p, 1e-6, |q| {
            let mut rng = ChaCha8Rng::seed_from_u64(eps_seed);
            m.joint_loss(&batch, q, &mut Noise::Sampled(&mut rng), 0.5, 1.0)
                .unwrap()
                .total
        });
        for seg in m.layout().segments() {
            let r = seg.range();
            let err = max_relative_error(&analytic[r.clone()], &numeric[r]);
            assert!(err < 1e-4, "{:?} segment {} rel err {err}", input, seg.name);
        }
    }
}

#[test]
fn batched_loss_equals_mean_of_single_losses() {
    let m = GruVae::new(micro()).unwrap();
    let p = random_params(&m, 9);
    let data = micro_samples(4, 3);
    let batch: Vec<&Sample> = data.iter().collect();
    let whole = m.joint_loss(&batch, &p, &mut Noise::zero(), 0.3, 0.7).unwrap();
    let mean: f64 = data
        .iter()
        .map(|s| m.joint_loss(&[s], &p, &mut Noise::zero(), 0.3, 0.7).unwrap().total)
        .sum::<f64>()
        / 4.0;
    assert!((whole.total - mean).abs() < 1e-12);
}

#[test]
fn recurrent_phase_freezes_vae_segments() {
    let m = GruVae::new(micro()).unwrap();
    let mut p = random_params(&m, 10);
    let before = p.clone();
    let data = micro_samples(16, 4);
    let sched = TrainSchedule {
        vae_epochs: 0,
        recurrent_epochs: 3,
        joint_epochs: 0,
        batch_size: 4,
        ..TrainSchedule::default()
    };
    train_predictor(&m, &mut p, &data, &sched).unwrap();
    let mut changed = false;
    for seg in m.layout().segments() {
        let a = before.segment(&seg.name).unwrap();
        let b = p.segment(&seg.name).unwrap();
        if GruVae::is_vae_segment(&seg.name) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", seg.name);
        } else {
            changed |= a != b;
        }
    }
    assert!(changed);
}

#[test]
fn training_is_deterministic_and_rejects_empty() {
    let m = GruVae::new(micro()).unwrap();
    let data = micro_samples(8, 5);
    let sched = TrainSchedule {
        vae_epochs: 1,
        recurrent_epochs: 1,
        joint_epochs: 1,
        batch_size: 3,
        ..TrainSchedule::default()
    };
    let run = || {
        let mut p = random_params(&m, 11);
        let r = train_predictor(&m, &mut p, &data, &sched).unwrap();
        (p, r)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a.values(), b.values());
    assert_eq!(ra, rb);
    let mut p = random_params(&m, 11);
    assert!(train_predictor(&m, &mut p, &[], &sched).is_err());
}

fn zipf_setup() -> (GruVae, Vec<Sample>) {
    let cfg = PredictorConfig {
        catalog: 20,
        locations: 1,
        time_buckets: 1,
        ..PredictorConfig::default()
    };
    let data = zipf_sequences(&ZipfSequenceSpec {
        catalog: 20,
        samples: 200,
        window: 5,
        seed: 21,
        ..ZipfSequenceSpec::default()
    });
    (GruVae::new(cfg).unwrap(), data)
}

#[test]
fn joint_loss_decreases_over_twenty_epochs() {
    let (m, data) = zipf_setup();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p: ParamVector<f64> = m.init_params(&mut rng);
    let sched = TrainSchedule {
        vae_epochs: 0,
        recurrent_epochs: 0,
        joint_epochs: 20,
        ..TrainSchedule::default()
    };
    let r = train_predictor(&m, &mut p, &data, &sched).unwrap();
    let joint: Vec<_> = r.phase(Phase::Joint).collect();
    assert!(joint[19].total < joint[0].total, "{} !< {}", joint[19].total, joint[0].total);
}

#[test]
fn learns_fixed_zipf_leader_without_sigma_collapse() {
    let (m, data) = zipf_setup();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut p: ParamVector<f64> = m.init_params(&mut rng);
    let r = train_predictor(&m, &mut p, &data, &TrainSchedule::default()).unwrap();
    assert!(r.last(Phase::Joint).unwrap().min_sigma > 1e-4);
    let test = zipf_sequences(&ZipfSequenceSpec {
        catalog: 20,
        samples: 100,
        window: 5,
        seed: 77,
        ..ZipfSequenceSpec::default()
    });
    let hits = test
        .iter()
        .filter(|s| {
            m.predict_popularity(&s.frames, &p, &mut Noise::zero(), 0)
                .unwrap()
                .argmax()
                == 0
        })
        .count();
    assert!(hits >= 90, "argmax correct on {hits}/100");
}

proptest::proptest! {
    #[test]
    fn forecast_is_distribution(seed in 0u64..1000, scale in 0.1f64..20.0) {
        let m = GruVae::new(micro()).unwrap();
        let mut p = random_params(&m, seed);
        for v in p.values_mut() {
            *v *= scale;
        }
        let f = m
            .predict_popularity(&[frame([0.1, 0.2, 0.3, 0.4], 1, 1, 0.0)], &p, &mut Noise::zero(), 0)
            .unwrap();
        proptest::prop_assert!((f.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        proptest::prop_assert!(f.probs.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
