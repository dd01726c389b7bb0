//! Generation-quality metrics: Fréchet distance between feature Gaussians
//! and k-NN-manifold precision/recall.
//!
//! Features come from a fixed, seeded, randomly initialized convolutional
//! extractor (training-free and deterministic); absolute scores are only
//! comparable within one extractor seed. The FID trace term is stabilized
//! as `S1 . Sigma2 . S1` with `S1 = sqrt(Sigma1)`, which is symmetric PSD
//! and shares its square-root trace with `Sigma1 . Sigma2`.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{contract, numeric, Error, Result};
use crate::rng::derive_rng;
use crate::tensor::Tensor;

/// Sample mean and unbiased covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    mean: Vec<f64>,
    cov: Vec<f64>,
    dim: usize,
    n: usize,
}

impl FeatureStats {
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &[f64] {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

/// Sample mean and unbiased sample covariance; needs at least two rows.
pub fn feature_stats(rows: &[Vec<f64>]) -> Result<FeatureStats> {
    if rows.len() < 2 {
        return Err(contract(format!(
            "feature_stats needs n >= 2 samples, got {}",
            rows.len()
        )));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(contract("feature rows must be non-empty and equal length"));
    }
    let n = rows.len();
    let mut mean = vec![0.0f64; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0f64; d * d];
    for r in rows {
        for i in 0..d {
            let di = r[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += di * (r[j] - mean[j]);
            }
        }
    }
    for c in &mut cov {
        *c /= (n - 1) as f64;
    }
    Ok(FeatureStats {
        mean,
        cov,
        dim: d,
        n,
    })
}

/// Symmetric PSD square root: eigenvalues below `-1e-8` are an error,
/// small negatives clamp to zero, and `S . S` reconstructs the input to
/// `1e-8` relative Frobenius error.
pub fn matrix_sqrt_psd(m: &[f64], dim: usize) -> Result<Vec<f64>> {
    if m.len() != dim * dim {
        return Err(contract(format!(
            "matrix length {} does not match dim {dim}",
            m.len()
        )));
    }
    let scale = m.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for i in 0..dim {
        for j in (i + 1)..dim {
            if (m[i * dim + j] - m[j * dim + i]).abs() > 1e-8 * scale.max(1.0) {
                return Err(numeric(format!(
                    "matrix_sqrt_psd: asymmetry at ({i},{j}): {} vs {}",
                    m[i * dim + j],
                    m[j * dim + i]
                )));
            }
        }
    }
    // work on the symmetrized matrix
    let mut sym = vec![0.0f64; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            sym[i * dim + j] = 0.5 * (m[i * dim + j] + m[j * dim + i]);
        }
    }
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(dim, dim, &sym));
    let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_eig < -1e-8 * scale.max(1.0) {
        return Err(numeric(format!(
            "matrix_sqrt_psd: eigenvalue {min_eig} below PSD tolerance"
        )));
    }
    let sqrt_vals: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let q = &eig.eigenvectors;
    let mut out = vec![0.0f64; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            let mut acc = 0.0;
            for (k, sv) in sqrt_vals.iter().enumerate() {
                acc += q[(i, k)] * sv * q[(j, k)];
            }
            out[i * dim + j] = acc;
        }
    }
    // exact symmetry
    for i in 0..dim {
        for j in (i + 1)..dim {
            let v = 0.5 * (out[i * dim + j] + out[j * dim + i]);
            out[i * dim + j] = v;
            out[j * dim + i] = v;
        }
    }
    Ok(out)
}

fn trace(m: &[f64], dim: usize) -> f64 {
    (0..dim).map(|i| m[i * dim + i]).sum()
}

/// Fréchet distance between feature Gaussians:
/// `||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2})`.
///
/// Symmetric; exactly zero for identical stats after clamping.
pub fn fid(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim != b.dim {
        return Err(contract(format!(
            "fid dimension mismatch: {} vs {}",
            a.dim, b.dim
        )));
    }
    let d = a.dim;
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();

    let s1 = matrix_sqrt_psd(&a.cov, d)?;
    // inner = s1 . cov_b . s1 (symmetric PSD with the same sqrt-trace as
    // cov_a . cov_b)
    let mut tmp = vec![0.0f64; d * d];
    for i in 0..d {
        for k in 0..d {
            let v = s1[i * d + k];
            if v == 0.0 {
                continue;
            }
            for j in 0..d {
                tmp[i * d + j] += v * b.cov[k * d + j];
            }
        }
    }
    let mut inner = vec![0.0f64; d * d];
    for i in 0..d {
        for k in 0..d {
            let v = tmp[i * d + k];
            if v == 0.0 {
                continue;
            }
            for j in 0..d {
                inner[i * d + j] += v * s1[k * d + j];
            }
        }
    }
    let scale = inner.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, &symmetrized(&inner, d)));
    let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_eig < -1e-6 * scale.max(1.0) {
        return Err(numeric(format!(
            "fid: covariance product eigenvalue {min_eig} below PSD tolerance"
        )));
    }
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();

    let raw = mean_term + trace(&a.cov, d) + trace(&b.cov, d) - 2.0 * tr_sqrt;
    if raw < -1e-6 {
        return Err(numeric(format!("fid: negative distance {raw}")));
    }
    if raw < 1e-9 {
        return Ok(0.0);
    }
    Ok(raw)
}

fn symmetrized(m: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = 0.5 * (m[i * d + j] + m[j * d + i]);
        }
    }
    out
}

/// k-NN manifold precision/recall.
///
/// `manifold(X)` is the union of balls centered at each point with radius
/// the distance to its k-th nearest neighbor within `X` (self excluded).
/// Precision is the fraction of generated points inside `manifold(real)`,
/// recall the fraction of real points inside `manifold(generated)`.
pub fn precision_recall(
    real: &[Vec<f64>],
    generated: &[Vec<f64>],
    k: usize,
) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(contract("k must be >= 1"));
    }
    if real.len() <= k || generated.len() <= k {
        return Err(contract(format!(
            "need more than k={k} points per set, got {} real / {} generated",
            real.len(),
            generated.len()
        )));
    }
    let d = real[0].len();
    if real.iter().chain(generated.iter()).any(|r| r.len() != d) {
        return Err(contract("feature dimensions differ between points"));
    }
    let radii_real = knn_radii(real, k);
    let radii_gen = knn_radii(generated, k);
    let p = fraction_covered(generated, real, &radii_real);
    let r = fraction_covered(real, generated, &radii_gen);
    Ok((p, r))
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn knn_radii(points: &[Vec<f64>], k: usize) -> Vec<f64> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d2: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| dist2(p, q))
                .collect();
            d2.sort_by(|a, b| a.partial_cmp(b).unwrap());
            d2[k - 1]
        })
        .collect()
}

fn fraction_covered(queries: &[Vec<f64>], centers: &[Vec<f64>], radii2: &[f64]) -> f64 {
    let inside = queries
        .iter()
        .filter(|q| {
            centers
                .iter()
                .zip(radii2)
                .any(|(c, &r2)| dist2(q, c) <= r2)
        })
        .count();
    inside as f64 / queries.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorKind {
    /// Fixed seeded random convolutional network.
    FixedRandomConv,
    /// Features produced elsewhere and loaded from file; cannot map images.
    ExternalImport,
}

/// Deterministic image-to-feature map: same image, same feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    pub kind: ExtractorKind,
    pub seed: u64,
    pub dim: usize,
}

impl FeatureExtractor {
    pub fn fixed_random_conv(seed: u64, dim: usize) -> Self {
        Self {
            kind: ExtractorKind::FixedRandomConv,
            seed,
            dim,
        }
    }

    /// Three stride-2 conv blocks with tanh, then global average pooling to
    /// `dim` channels. Weights are drawn once from the seed.
    pub fn extract(&self, image: &Image) -> Result<Vec<f64>> {
        if self.kind == ExtractorKind::ExternalImport {
            return Err(contract(
                "external-import extractor provides features from files, not images",
            ));
        }
        if self.dim < 4 {
            return Err(contract("extractor dim must be >= 4"));
        }
        let chans = [image.channels, self.dim / 4, self.dim / 2, self.dim];
        let mut rng = derive_rng(self.seed, &[0xfea7]);
        let mut cur = image.data().to_vec();
        let mut size = image.width;
        let mut in_c = chans[0];
        for &out_c in &chans[1..] {
            let std = 1.0 / ((in_c * 9) as f64).sqrt();
            let w = Tensor::<f64>::randn(&[out_c, in_c, 3, 3], std, &mut rng);
            let b = Tensor::<f64>::randn(&[out_c], 0.05, &mut rng);
            let out_size = size.div_ceil(2);
            let mut next = vec![0.0f64; out_size * out_size * out_c];
            for oy in 0..out_size {
                for ox in 0..out_size {
                    for oc in 0..out_c {
                        let mut acc = b.data()[oc];
                        for ky in 0..3usize {
                            let iy = (2 * oy + ky) as isize - 1;
                            if iy < 0 || iy >= size as isize {
                                continue;
                            }
                            for kx in 0..3usize {
                                let ix = (2 * ox + kx) as isize - 1;
                                if ix < 0 || ix >= size as isize {
                                    continue;
                                }
                                let base = (iy as usize * size + ix as usize) * in_c;
                                for ic in 0..in_c {
                                    acc += w.at(&[oc, ic, ky, kx]) * cur[base + ic];
                                }
                            }
                        }
                        next[(oy * out_size + ox) * out_c + oc] = acc.tanh();
                    }
                }
            }
            cur = next;
            size = out_size;
            in_c = out_c;
        }
        // global average pool
        let cells = size * size;
        let mut feat = vec![0.0f64; self.dim];
        for cell in cur.chunks(self.dim) {
            for (f, v) in feat.iter_mut().zip(cell) {
                *f += v / cells as f64;
            }
        }
        Ok(feat)
    }

    /// Parallel extraction with deterministic output ordering.
    pub fn extract_batch(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        images
            .par_iter()
            .map(|img| self.extract(img))
            .collect::<Result<Vec<_>>>()
    }
}

/// External-import features: a JSON array of equal-length number arrays.
pub fn load_features_json(path: &std::path::Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)?;
    let rows: Vec<Vec<f64>> =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("features file: {e}")))?;
    if rows.is_empty() {
        return Err(Error::Data("features file holds no rows".into()));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Data("feature rows must be non-empty, equal length".into()));
    }
    Ok(rows)
}

pub fn save_features_json(path: &std::path::Path, rows: &[Vec<f64>]) -> Result<()> {
    let text = serde_json::to_string(rows).expect("feature rows serialize");
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SplitTag, SynthSpec};

    fn stats_1d(mu: f64, var: f64) -> FeatureStats {
        FeatureStats {
            mean: vec![mu],
            cov: vec![var],
            dim: 1,
            n: 2,
        }
    }

    #[test]
    fn stats_two_points() {
        let s = feature_stats(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(s.mean(), &[1.0, 0.0]);
        assert_eq!(s.cov(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn stats_identical_points_zero_cov() {
        let s = feature_stats(&vec![vec![1.0, 2.0]; 5]).unwrap();
        assert!(s.cov().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stats_match_two_pass_oracle() {
        let mut rng = derive_rng(3, &[1]);
        use rand::Rng;
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let s = feature_stats(&rows).unwrap();
        // straight-line two-pass oracle
        let n = rows.len() as f64;
        for j in 0..4 {
            let mu: f64 = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            assert!((s.mean()[j] - mu).abs() < 1e-12);
            for l in 0..4 {
                let mul: f64 = rows.iter().map(|r| r[l]).sum::<f64>() / n;
                let cov: f64 = rows
                    .iter()
                    .map(|r| (r[j] - mu) * (r[l] - mul))
                    .sum::<f64>()
                    / (n - 1.0);
                assert!((s.cov()[j * 4 + l] - cov).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stats_need_two_samples() {
        assert!(feature_stats(&[vec![1.0]]).is_err());
    }

    #[test]
    fn sqrt_identity_and_diagonal() {
        let id = matrix_sqrt_psd(&[1.0, 0.0, 0.0, 1.0], 2).unwrap();
        assert_eq!(id, vec![1.0, 0.0, 0.0, 1.0]);
        let s = matrix_sqrt_psd(&[4.0, 0.0, 0.0, 9.0], 2).unwrap();
        for (a, e) in s.iter().zip(&[2.0, 0.0, 0.0, 3.0]) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn sqrt_reconstructs_random_psd() {
        use rand::Rng;
        let d = 16usize;
        let mut rng = derive_rng(7, &[2]);
        let a: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // m = a^T a is PSD
        let mut m = vec![0.0f64; d * d];
        for i in 0..d {
            for j in 0..d {
                m[i * d + j] = (0..d).map(|k| a[k * d + i] * a[k * d + j]).sum();
            }
        }
        let s = matrix_sqrt_psd(&m, d).unwrap();
        let mut ss = vec![0.0f64; d * d];
        for i in 0..d {
            for j in 0..d {
                ss[i * d + j] = (0..d).map(|k| s[i * d + k] * s[k * d + j]).sum();
            }
        }
        let num: f64 = ss
            .iter()
            .zip(&m)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let den: f64 = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(num / den < 1e-8, "relative error {}", num / den);
    }

    #[test]
    fn sqrt_rejects_asymmetric_and_negative() {
        assert!(matrix_sqrt_psd(&[1.0, 0.5, 0.0, 1.0], 2).is_err());
        assert!(matrix_sqrt_psd(&[-1.0, 0.0, 0.0, 1.0], 2).is_err());
    }

    #[test]
    fn fid_identical_stats_is_exactly_zero() {
        let s = feature_stats(&[vec![0.0, 1.0], vec![1.0, 0.5], vec![2.0, -1.0]]).unwrap();
        assert_eq!(fid(&s, &s).unwrap(), 0.0);
    }

    #[test]
    fn fid_closed_form_one_dimensional() {
        // mean shift: (0,1) vs (1,1) -> 1
        assert!((fid(&stats_1d(0.0, 1.0), &stats_1d(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-9);
        // variance mismatch: (0,1) vs (0,4) -> (1-2)^2 = 1
        assert!((fid(&stats_1d(0.0, 1.0), &stats_1d(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-9);
        // combined: 1 + (1-3)^2 = 5
        assert!((fid(&stats_1d(0.0, 1.0), &stats_1d(1.0, 9.0)).unwrap() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn fid_is_symmetric() {
        use rand::Rng;
        let mut rng = derive_rng(9, &[3]);
        let rows_a: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let rows_b: Vec<Vec<f64>> = (0..25)
            .map(|_| (0..6).map(|_| rng.gen_range(-0.5..1.5)).collect())
            .collect();
        let a = feature_stats(&rows_a).unwrap();
        let b = feature_stats(&rows_b).unwrap();
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9, "{ab} vs {ba}");
        assert!(ab > 0.0);
    }

    #[test]
    fn fid_dimension_mismatch() {
        let a = stats_1d(0.0, 1.0);
        let b = feature_stats(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert!(fid(&a, &b).is_err());
    }

    #[test]
    fn pr_identical_sets_are_perfect() {
        let pts: Vec<Vec<f64>> = (0..10)
            .map(|i| vec![i as f64, (i * i) as f64 * 0.1])
            .collect();
        let (p, r) = precision_recall(&pts, &pts, 3).unwrap();
        assert_eq!((p, r), (1.0, 1.0));
    }

    #[test]
    fn pr_far_separated_sets_are_zero() {
        let a: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 * 0.01, 0.0]).collect();
        let b: Vec<Vec<f64>> = (0..8).map(|i| vec![1e6 + i as f64 * 0.01, 0.0]).collect();
        let (p, r) = precision_recall(&a, &b, 2).unwrap();
        assert_eq!((p, r), (0.0, 0.0));
    }

    #[test]
    fn pr_matches_bruteforce_oracle_on_random_instances() {
        use rand::Rng;
        for seed in 0..30u64 {
            let mut rng = derive_rng(seed, &[4]);
            let n = rng.gen_range(5..30);
            let m = rng.gen_range(5..30);
            let k = rng.gen_range(1..4.min(n.min(m)));
            let real: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let generated: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let (p, r) = precision_recall(&real, &generated, k).unwrap();

            // exhaustive O(n^2 m) oracle
            let radius = |pts: &[Vec<f64>], i: usize| -> f64 {
                let mut ds: Vec<f64> = (0..pts.len())
                    .filter(|&j| j != i)
                    .map(|j| dist2(&pts[i], &pts[j]))
                    .collect();
                ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
                ds[k - 1]
            };
            let mut inside_p = 0usize;
            for g in &generated {
                if (0..real.len()).any(|i| dist2(g, &real[i]) <= radius(&real, i)) {
                    inside_p += 1;
                }
            }
            let mut inside_r = 0usize;
            for x in &real {
                if (0..generated.len()).any(|i| dist2(x, &generated[i]) <= radius(&generated, i))
                {
                    inside_r += 1;
                }
            }
            assert_eq!(p, inside_p as f64 / m as f64, "seed {seed}");
            assert_eq!(r, inside_r as f64 / n as f64, "seed {seed}");
        }
    }

    #[test]
    fn pr_rejects_k_at_or_above_set_size() {
        let pts: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64]).collect();
        assert!(precision_recall(&pts, &pts, 4).is_err());
        assert!(precision_recall(&pts, &pts, 0).is_err());
    }

    #[test]
    fn extractor_is_deterministic_and_content_sensitive() {
        let data = synth_dataset(
            &SynthSpec {
                num_classes: 2,
                per_class: 2,
                size: 16,
                seed: 5,
                hue_shift: 0.0,
                hue_span: 360.0,
            },
            SplitTag::Train,
        )
        .unwrap();
        let ex = FeatureExtractor::fixed_random_conv(3, 64);
        let f1 = ex.extract(&data.items[0].image).unwrap();
        let f2 = ex.extract(&data.items[0].image).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1.len(), 64);
        let other = ex.extract(&data.items[2].image).unwrap();
        assert_ne!(f1, other);
        // different seed, different map
        let ex2 = FeatureExtractor::fixed_random_conv(4, 64);
        assert_ne!(ex2.extract(&data.items[0].image).unwrap(), f1);
    }

    #[test]
    fn external_import_cannot_map_images() {
        let ex = FeatureExtractor {
            kind: ExtractorKind::ExternalImport,
            seed: 0,
            dim: 64,
        };
        let img = Image::zeros(8, 8, 3);
        assert!(ex.extract(&img).is_err());
    }

    #[test]
    fn features_json_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("f.json");
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        save_features_json(&path, &rows).unwrap();
        assert_eq!(load_features_json(&path).unwrap(), rows);
    }
}
