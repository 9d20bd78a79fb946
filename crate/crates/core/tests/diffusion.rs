use histogen_core::backbone::{encode_conditions, Denoiser, ModelConfig};
use histogen_core::diffusion::*;
use histogen_core::encoders::{Encoders, SurrogateEncoderParams};
use histogen_core::io::{decode_tensors, encode_tensors, load_checkpoint, save_checkpoint};
use histogen_core::synthdata::gen_dataset;
use histogen_core::training::{train, TrainItem, TrainOptions};
use histogen_core::{Rng, Tensor};

const T: usize = 200;

fn schedule() -> NoiseSchedule {
    make_schedule(T, 1e-4, 0.03).unwrap()
}

#[test]
fn forward_process_preserves_unit_variance() {
    let s = schedule();
    for t in [0, T / 2, T - 1] {
        let mut rng = Rng::new(t as u64);
        let z0 = rng.normal_tensor(&[100_000]);
        let eps = rng.normal_tensor(&[100_000]);
        let z = q_sample(&z0, t, &eps, &s).unwrap();
        let n = z.len() as f64;
        let mean = z.sum() / n;
        let var = z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((0.96..=1.04).contains(&var), "t={t}: {var}");
    }
}

#[test]
fn signal_to_noise_strictly_decreases() {
    let s = schedule();
    for t in 1..T {
        assert!(s.snr(t) < s.snr(t - 1));
    }
    // the chain ends close to pure noise
    assert!(s.alpha_bar[T - 1] < 0.05);
}

#[test]
fn zero_predictor_loss_is_noise_power() {
    let enc = Encoders::new(SurrogateEncoderParams::default()).unwrap();
    let model = Denoiser::new(ModelConfig::default(), enc, 1).unwrap();
    let s = schedule();
    let mut rng = Rng::new(2);
    let items = gen_dataset(40, 5)
        .iter()
        .enumerate()
        .map(|(i, smp)| DiffusionItem {
            z0: model.encoders.encode_image(&smp.image).unwrap(),
            eps: rng.normal_tensor(&[4, 8, 8]),
            t: (i * 5) % T,
            cond: encode_conditions(&model.encoders, &smp.caption_ids, &smp.mask, &smp.image).unwrap(),
        })
        .collect::<Vec<_>>();
    let power = items.iter().flat_map(|it| it.eps.data().iter()).map(|e| e * e).sum::<f64>() / (40.0 * 256.0);
    let loss = denoise_loss(&DiffusionBatch { items }, &model, &s).unwrap();
    // the fresh head is zero, so the loss is exactly the mean noise power
    assert!((loss - power).abs() < 1e-12);
    assert!((loss - 1.0).abs() < 0.05, "{loss}");
}

#[test]
fn exact_noise_recovers_clean_latent_at_two_steps() {
    // with ε̂ = ε the posterior mean at t = 1 is closed-form; as β shrinks the
    // two-step chain lands closer to z0
    let mut rng = Rng::new(4);
    let z0 = rng.normal_tensor(&[64]);
    let mut last = f64::INFINITY;
    for scale in [1.0, 0.3, 0.1, 0.03] {
        let s = make_schedule(2, 0.05 * scale, 0.2 * scale).unwrap();
        let eps = Rng::new(5).normal_tensor(&[64]);
        let z1 = q_sample(&z0, 1, &eps, &s).unwrap();
        let mut r = Rng::new(6);
        let z_prev = ddpm_step(&z1, 1, &eps, &s, &mut r).unwrap();
        let coef = s.beta[1] / (1.0 - s.alpha_bar[1]).sqrt();
        let noise = Rng::new(6).normal_tensor(&[64]);
        for i in 0..64 {
            let mean = (z1.data()[i] - coef * eps.data()[i]) / s.alpha[1].sqrt();
            let want = mean + s.posterior_variance(1).sqrt() * noise.data()[i];
            assert!((z_prev.data()[i] - want).abs() < 1e-12);
        }
        let dist = z_prev.max_abs_diff(&z0);
        assert!(dist < last, "{dist} !< {last}");
        last = dist;
    }
}

fn toy_items(model: &Denoiser, n: usize) -> Vec<TrainItem> {
    gen_dataset(n, 9)
        .iter()
        .map(|s| TrainItem {
            z0: model.encoders.encode_image(&s.image).unwrap(),
            cond: encode_conditions(&model.encoders, &s.caption_ids, &s.mask, &s.image).unwrap(),
        })
        .collect()
}

#[test]
fn training_and_sampling_are_reproducible() {
    let run = || {
        let enc = Encoders::new(SurrogateEncoderParams::default()).unwrap();
        let mut model = Denoiser::new(ModelConfig::default(), enc, 3).unwrap();
        let data = toy_items(&model, 4);
        let opts = TrainOptions {
            steps: 5,
            batch_size: 2,
            ..TrainOptions::default()
        };
        let losses = train(&mut model, &data, &schedule(), &opts, |_, _| {}).unwrap();
        let conds: Vec<_> = data.iter().map(|d| d.cond.clone()).collect();
        let z = sample_batch(&model, &conds[..2], &schedule(), &Rng::new(1), &[4, 8, 8]).unwrap();
        (losses, encode_tensors(z.iter().map(|t| ("z", t))))
    };
    let (la, za) = run();
    let (lb, zb) = run();
    assert_eq!(la.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), lb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(za, zb);
}

#[test]
fn zero_steps_keep_initialization() {
    let enc = Encoders::new(SurrogateEncoderParams::default()).unwrap();
    let mut model = Denoiser::new(ModelConfig::default(), enc, 3).unwrap();
    let init = model.params.clone();
    let data = toy_items(&model, 2);
    let opts = TrainOptions {
        steps: 0,
        ..TrainOptions::default()
    };
    assert!(train(&mut model, &data, &schedule(), &opts, |_, _| {}).unwrap().is_empty());
    for ((_, a), (_, b)) in model.params.iter().zip(init.iter()) {
        assert_eq!(a.data(), b.data());
    }
    assert!(train(&mut model, &[], &schedule(), &opts, |_, _| {}).is_err());
}

#[test]
fn checkpoint_round_trip_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let enc = Encoders::new(SurrogateEncoderParams::default()).unwrap();
    let mut model = Denoiser::new(ModelConfig::default(), enc.clone(), 3).unwrap();
    let mut rng = Rng::new(1);
    for t in model.params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += 0.1 * rng.normal());
    }
    save_checkpoint(&path, &model.params).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let mut other = Denoiser::new(ModelConfig::default(), enc.clone(), 99).unwrap();
    load_checkpoint(&path, &mut other.params).unwrap();
    for ((na, a), (nb, b)) in model.params.iter().zip(other.params.iter()) {
        assert_eq!(na, nb);
        let want: Vec<f64> = a.data().iter().map(|v| *v as f32 as f64).collect();
        assert_eq!(b.data(), want.as_slice());
    }
    let again = dir.path().join("again.ckpt");
    save_checkpoint(&again, &other.params).unwrap();
    assert_eq!(std::fs::read(&again).unwrap(), bytes);

    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
    let mut fresh = Denoiser::new(ModelConfig::default(), enc, 5).unwrap();
    let before = fresh.params.clone();
    assert!(load_checkpoint(&cut, &mut fresh.params).is_err());
    for ((_, a), (_, b)) in fresh.params.iter().zip(before.iter()) {
        assert_eq!(a.data(), b.data());
    }
    assert!(decode_tensors(&bytes[..bytes.len() / 2]).is_err());
}

#[test]
fn checkpoint_for_other_architecture_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let enc = Encoders::new(SurrogateEncoderParams::default()).unwrap();
    let small = Denoiser::new(ModelConfig { depth: 1, ..ModelConfig::default() }, enc.clone(), 0).unwrap();
    save_checkpoint(&path, &small.params).unwrap();
    let mut big = Denoiser::new(ModelConfig::default(), enc, 0).unwrap();
    assert!(load_checkpoint(&path, &mut big.params).is_err());
    let t = Tensor::zeros(&[2]);
    std::fs::write(&path, encode_tensors([("nope", &t)])).unwrap();
    assert!(load_checkpoint(&path, &mut big.params).is_err());
}

#[test]
fn loss_matches_straight_line_reimplementation() {
    let enc = Encoders::new(SurrogateEncoderParams::default()).unwrap();
    let mut model = Denoiser::new(ModelConfig::default(), enc, 2).unwrap();
    let mut rng = Rng::new(3);
    for t in model.params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += 0.05 * rng.normal());
    }
    let s = schedule();
    let items: Vec<DiffusionItem> = toy_items(&model, 3)
        .into_iter()
        .enumerate()
        .map(|(i, it)| DiffusionItem {
            eps: rng.normal_tensor(&[4, 8, 8]),
            z0: it.z0,
            t: [0, 77, 199][i],
            cond: it.cond,
        })
        .collect();
    let mut total = 0.0;
    let mut count = 0.0;
    for it in &items {
        let a = s.alpha_bar[it.t];
        let z_t: Vec<f64> = it.z0.data().iter().zip(it.eps.data()).map(|(z, e)| a.sqrt() * z + (1.0 - a).sqrt() * e).collect();
        let z_t = Tensor::new(&[4, 8, 8], z_t).unwrap();
        let pred = model.predict_epsilon(&z_t, it.t, &it.cond).unwrap();
        for (p, e) in pred.data().iter().zip(it.eps.data()) {
            total += (p - e) * (p - e);
            count += 1.0;
        }
    }
    let loss = denoise_loss(&DiffusionBatch { items }, &model, &s).unwrap();
    assert!((loss - total / count).abs() < 1e-12, "{loss} vs {}", total / count);
}
