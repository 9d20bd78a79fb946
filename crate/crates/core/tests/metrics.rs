use histogen_core::metrics::*;
use histogen_core::synthdata::gen_dataset;
use histogen_core::{Rng, Tensor};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn oracle_frechet(a: &FeatureStats, b: &FeatureStats) -> f64 {
    let n = a.dim();
    let sa = DMatrix::from_row_slice(n, n, &a.sigma);
    let sb = DMatrix::from_row_slice(n, n, &b.sigma);
    let root = |m: &DMatrix<f64>| {
        let e = m.clone().symmetric_eigen();
        let d = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
        &e.eigenvectors * d * e.eigenvectors.transpose()
    };
    let ra = root(&sa);
    let inner = &ra * &sb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let mean = DVector::from_column_slice(&a.mu) - DVector::from_column_slice(&b.mu);
    mean.norm_squared() + sa.trace() + sb.trace() - 2.0 * root(&inner).trace()
}

fn random_stats(rng: &mut Rng, n: usize, g: usize, spread: f64) -> FeatureStats {
    let mix = rng.normal_tensor(&[g, g]);
    let feats: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let z = rng.normal_tensor(&[g]);
            (0..g)
                .map(|i| spread * (0..g).map(|j| mix.at2(i, j) * z.data()[j]).sum::<f64>() + 0.3)
                .collect()
        })
        .collect();
    FeatureStats::from_features(&feats).unwrap()
}

#[test]
fn frechet_matches_dense_oracle() {
    let mut rng = Rng::new(1);
    for g in [1, 3, 8, 16] {
        let a = random_stats(&mut rng, 64, g, 1.0);
        let b = random_stats(&mut rng, 80, g, 0.5);
        let ours = frechet_distance(&a, &b).unwrap();
        let want = oracle_frechet(&a, &b);
        assert!((ours - want).abs() < 1e-8 * (1.0 + want), "g={g}: {ours} vs {want}");
    }
}

#[test]
fn frechet_identities() {
    let imgs: Vec<Tensor> = gen_dataset(40, 3).into_iter().map(|s| s.image).collect();
    let s = feature_stats(&imgs).unwrap();
    assert!(frechet_distance(&s, &s).unwrap() < 1e-6);
    let one = |mu: f64, var: f64| FeatureStats {
        mu: vec![mu],
        sigma: vec![var],
        n: 2,
    };
    let d = frechet_distance(&one(0.0, 1.0), &one(1.0, 1.0)).unwrap();
    assert!((d - 1.0).abs() < 1e-9);
    // (μ1−μ2)² + (σ1−σ2)² in one dimension
    let d = frechet_distance(&one(0.5, 4.0), &one(-1.0, 1.0)).unwrap();
    assert!((d - (2.25 + 1.0)).abs() < 1e-12);
}

#[test]
fn dice_identities() {
    let mask = |bits: &[u8]| Tensor::new(&[2, 4], bits.iter().map(|&b| b as f64).collect()).unwrap();
    let a = mask(&[1, 1, 0, 0, 1, 1, 0, 0]);
    assert_eq!(dice(&a, &a).unwrap(), 1.0);
    assert_eq!(dice(&a, &mask(&[0, 0, 1, 1, 0, 0, 1, 1])).unwrap(), 0.0);
    assert_eq!(dice(&a, &mask(&[1, 0, 1, 0, 1, 0, 1, 0])).unwrap(), 0.5);
    assert!(dice(&a, &Tensor::zeros(&[4, 2])).is_err());
    assert!(dice(&a, &Tensor::full(&[2, 4], 0.5)).is_err());
}

#[test]
fn evaluate_run_on_real_data_is_near_perfect() {
    let data = gen_dataset(24, 8);
    let imgs: Vec<Tensor> = data.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<Tensor> = data.iter().map(|s| s.mask.clone()).collect();
    let r = evaluate_run(&imgs, &imgs, &masks).unwrap();
    assert!(r.fid < 1e-6);
    assert!((r.mean_cosine - 1.0).abs() < 1e-12);
    assert!(r.mean_dice > 0.9);
    assert_eq!((r.n_real, r.n_gen), (24, 24));
    assert!(evaluate_run(&imgs, &imgs, &masks[..3]).is_err());
}

proptest! {
    #[test]
    fn cosine_is_scale_invariant(
        u in prop::collection::vec(-10.0f64..10.0, 6),
        v in prop::collection::vec(-10.0f64..10.0, 6),
        a in 1e-3f64..1e3,
        b in 1e-3f64..1e3,
    ) {
        prop_assume!(u.iter().map(|x| x * x).sum::<f64>() > 1e-6);
        prop_assume!(v.iter().map(|x| x * x).sum::<f64>() > 1e-6);
        let base = cosine_similarity(&u, &v).unwrap();
        let su: Vec<f64> = u.iter().map(|x| a * x).collect();
        let sv: Vec<f64> = v.iter().map(|x| b * x).collect();
        prop_assert!((cosine_similarity(&su, &sv).unwrap() - base).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&base));
    }

    #[test]
    fn dice_is_symmetric_and_bounded(bits in prop::collection::vec(0u8..4, 32)) {
        let a = Tensor::new(&[32], bits.iter().map(|b| (b & 1) as f64).collect()).unwrap();
        let b = Tensor::new(&[32], bits.iter().map(|b| (b >> 1) as f64).collect()).unwrap();
        let d = dice(&a, &b).unwrap();
        prop_assert_eq!(d, dice(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
    }
}
