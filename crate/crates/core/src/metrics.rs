//! Fréchet distance on appearance features, embedding cosine similarity and
//! Dice mask agreement.

use serde::{Deserialize, Serialize};

use crate::encoders::visual_features;
use crate::error::{contract_err, shape_err, Error, Result};
use crate::numcore::Tensor;
use crate::synthdata::segment_oracle;

/// Gaussian summary of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mu: Vec<f64>,
    /// Row-major `g×g` unbiased covariance.
    pub sigma: Vec<f64>,
    pub n: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        if features.len() < 2 {
            return contract_err(format!(
                "feature statistics need at least 2 samples, got {}",
                features.len()
            ));
        }
        let g = features[0].len();
        if features.iter().any(|f| f.len() != g) {
            return shape_err("feature vectors differ in length");
        }
        let n = features.len();
        let mut mu = vec![0.0; g];
        for f in features {
            for (m, v) in mu.iter_mut().zip(f) {
                *m += v;
            }
        }
        mu.iter_mut().for_each(|m| *m /= n as f64);
        let mut sigma = vec![0.0; g * g];
        for f in features {
            for i in 0..g {
                let di = f[i] - mu[i];
                for j in i..g {
                    sigma[i * g + j] += di * (f[j] - mu[j]);
                }
            }
        }
        for i in 0..g {
            for j in i..g {
                let v = sigma[i * g + j] / (n - 1) as f64;
                sigma[i * g + j] = v;
                sigma[j * g + i] = v;
            }
        }
        Ok(Self { mu, sigma, n })
    }

    /// Pairwise (Chan et al.) merge of two summaries of disjoint sets.
    pub fn merge(&self, other: &FeatureStats) -> Result<FeatureStats> {
        let g = self.dim();
        if other.dim() != g {
            return shape_err(format!("cannot merge {g}-d and {}-d stats", other.dim()));
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let delta: Vec<f64> = other.mu.iter().zip(&self.mu).map(|(b, a)| b - a).collect();
        let mu = self
            .mu
            .iter()
            .zip(&delta)
            .map(|(a, d)| a + d * nb / n)
            .collect();
        let mut sigma = vec![0.0; g * g];
        for i in 0..g {
            for j in 0..g {
                let m2 = self.sigma[i * g + j] * (na - 1.0)
                    + other.sigma[i * g + j] * (nb - 1.0)
                    + delta[i] * delta[j] * na * nb / n;
                sigma[i * g + j] = m2 / (n - 1.0);
            }
        }
        Ok(FeatureStats {
            mu,
            sigma,
            n: self.n + other.n,
        })
    }
}

/// Appearance-feature statistics of an image set.
pub fn feature_stats(images: &[Tensor]) -> Result<FeatureStats> {
    if images.len() < 2 {
        return contract_err(format!(
            "feature statistics need at least 2 images, got {}",
            images.len()
        ));
    }
    let feats = images
        .iter()
        .map(visual_features)
        .collect::<Result<Vec<_>>>()?;
    FeatureStats::from_features(&feats)
}

/// Cyclic Jacobi eigendecomposition of a symmetric `n×n` matrix.
/// Returns eigenvalues and column eigenvectors (row-major `n×n`).
pub fn symmetric_eigen(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != n * n {
        return shape_err(format!("{} entries do not form a {n}×{n} matrix", a.len()));
    }
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            let eig = (0..n).map(|i| m[i * n + i]).collect();
            return Ok((eig, v));
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(Error::Numeric("Jacobi eigendecomposition did not converge".into()))
}

fn mat_mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let av = a[i * n + k];
            for j in 0..n {
                c[i * n + j] += av * b[k * n + j];
            }
        }
    }
    c
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues clamp to 0.
pub fn sqrt_psd(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let (eig, v) = symmetric_eigen(a, n)?;
    let mut out = vec![0.0; n * n];
    for k in 0..n {
        let s = eig[k].max(0.0).sqrt();
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] += v[i * n + k] * s * v[j * n + k];
            }
        }
    }
    Ok(out)
}

/// `‖μa−μb‖² + Tr(Σa + Σb − 2(Σa Σb)^½)`, clamped at zero.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    let n = a.dim();
    if b.dim() != n {
        return shape_err(format!("feature widths differ: {n} vs {}", b.dim()));
    }
    let mean_term: f64 = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y) * (x - y)).sum();
    let root_a = sqrt_psd(&a.sigma, n)?;
    let mut inner = mat_mul(&mat_mul(&root_a, &b.sigma, n), &root_a, n);
    // symmetrize against rounding
    for i in 0..n {
        for j in i + 1..n {
            let avg = 0.5 * (inner[i * n + j] + inner[j * n + i]);
            inner[i * n + j] = avg;
            inner[j * n + i] = avg;
        }
    }
    let (eig, _) = symmetric_eigen(&inner, n)?;
    let tr_sqrt: f64 = eig.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let tr_a: f64 = (0..n).map(|i| a.sigma[i * n + i]).sum();
    let tr_b: f64 = (0..n).map(|i| b.sigma[i * n + i]).sum();
    let d = mean_term + tr_a + tr_b - 2.0 * tr_sqrt;
    if d < -1e-6 {
        return Err(Error::Numeric(format!("Fréchet distance came out at {d}")));
    }
    Ok(d.max(0.0))
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return shape_err(format!("vector lengths differ: {} vs {}", u.len(), v.len()));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu <= 1e-12 || nv <= 1e-12 {
        return contract_err("cosine similarity of a zero vector");
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// `2|a∩b| / (|a|+|b|)`; two empty masks score 1.
pub fn dice(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return shape_err(format!(
            "mask shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let binary = |t: &Tensor| t.data().iter().all(|&v| v == 0.0 || v == 1.0);
    if !binary(a) || !binary(b) {
        return contract_err("dice needs binary masks");
    }
    let (mut inter, mut sa, mut sb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        inter += x * y;
        sa += x;
        sb += y;
    }
    if sa + sb == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter / (sa + sb))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fid: f64,
    pub mean_cosine: f64,
    pub mean_dice: f64,
    pub n_real: usize,
    pub n_gen: usize,
}

/// Scores a generated set against real images and the layouts it was
/// conditioned on. Cosine is paired per sample when the sets have equal size
/// and otherwise compares the two mean feature vectors.
pub fn evaluate_run(real: &[Tensor], generated: &[Tensor], layouts: &[Tensor]) -> Result<EvalReport> {
    use rayon::prelude::*;
    if layouts.len() != generated.len() {
        return contract_err(format!(
            "{} layouts for {} generated images",
            layouts.len(),
            generated.len()
        ));
    }
    let real_stats = feature_stats(real)?;
    let gen_stats = feature_stats(generated)?;
    let fid = frechet_distance(&real_stats, &gen_stats)?;

    let mean_cosine = if real.len() == generated.len() {
        let sims = real
            .par_iter()
            .zip(generated)
            .map(|(r, g)| cosine_similarity(&visual_features(r)?, &visual_features(g)?))
            .collect::<Result<Vec<_>>>()?;
        sims.iter().sum::<f64>() / sims.len() as f64
    } else {
        cosine_similarity(&real_stats.mu, &gen_stats.mu)?
    };

    let dices = generated
        .par_iter()
        .zip(layouts)
        .map(|(g, m)| dice(&segment_oracle(g)?, m))
        .collect::<Result<Vec<_>>>()?;
    let mean_dice = dices.iter().sum::<f64>() / dices.len().max(1) as f64;

    Ok(EvalReport {
        fid,
        mean_cosine,
        mean_dice,
        n_real: real.len(),
        n_gen: generated.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;

    fn stats_1d(mu: f64, var: f64) -> FeatureStats {
        FeatureStats {
            mu: vec![mu],
            sigma: vec![var],
            n: 10,
        }
    }

    #[test]
    fn frechet_closed_form_1d() {
        let d = frechet_distance(&stats_1d(0.0, 1.0), &stats_1d(1.0, 1.0)).unwrap();
        assert!((d - 1.0).abs() < 1e-9);
        // (μ1−μ2)² + (σ1−σ2)²
        let d = frechet_distance(&stats_1d(0.5, 4.0), &stats_1d(-0.5, 9.0)).unwrap();
        assert!((d - 2.0).abs() < 1e-9, "{d}");
    }

    #[test]
    fn frechet_self_is_zero() {
        let mut rng = Rng::new(5);
        let feats: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..6).map(|_| rng.normal()).collect())
            .collect();
        let s = FeatureStats::from_features(&feats).unwrap();
        assert!(frechet_distance(&s, &s).unwrap() < 1e-6);
    }

    #[test]
    fn stats_need_two_samples() {
        assert!(feature_stats(&[Tensor::zeros(&[3, 8, 8])]).is_err());
        let img = crate::synthdata::gen_sample(1).image;
        let s = feature_stats(&[img.clone(), img]).unwrap();
        assert!(s.sigma.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn merge_matches_pooled() {
        let mut rng = Rng::new(8);
        let feats: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..4).map(|_| rng.normal()).collect())
            .collect();
        let whole = FeatureStats::from_features(&feats).unwrap();
        let a = FeatureStats::from_features(&feats[..11]).unwrap();
        let b = FeatureStats::from_features(&feats[11..]).unwrap();
        let m = a.merge(&b).unwrap();
        for (x, y) in m.sigma.iter().zip(&whole.sigma) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in m.mu.iter().zip(&whole.mu) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn dice_cases() {
        let m = |v: &[f64]| Tensor::new(&[1, v.len()], v.to_vec()).unwrap();
        assert_eq!(dice(&m(&[1., 1., 0.]), &m(&[1., 1., 0.])).unwrap(), 1.0);
        assert_eq!(dice(&m(&[1., 0.]), &m(&[0., 1.])).unwrap(), 0.0);
        let a = m(&[1., 1., 1., 1., 0., 0.]);
        let b = m(&[0., 0., 1., 1., 1., 1.]);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&m(&[0., 0.]), &m(&[0., 0.])).unwrap(), 1.0);
        assert!(dice(&m(&[0.5, 0.]), &m(&[0., 0.])).is_err());
        assert!(dice(&m(&[0.]), &m(&[0., 0.])).is_err());
    }

    #[test]
    fn jacobi_reconstructs() {
        let a = [4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 1.0];
        let (eig, v) = symmetric_eigen(&a, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let r: f64 = (0..3).map(|k| v[i * 3 + k] * eig[k] * v[j * 3 + k]).sum();
                assert!((r - a[i * 3 + j]).abs() < 1e-12);
            }
        }
    }
}
