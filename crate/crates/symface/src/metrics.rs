//! Evaluation metrics: Fréchet distance between Gaussian feature fits, a
//! feature-space perceptual distance with pluggable frozen extractors, plain
//! pixel error, and a mirror-based symmetry error over one organ's support.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use ndarray::{Array2, Array3, Array4};

use crate::autodiff::kernels::conv2d_raw;
use crate::error::{Error, Result};
use crate::toyfaces::{Part, Sample};

/// Frozen deterministic image -> feature-vector (and stage maps) extractor.
#[derive(Debug, Clone)]
pub enum FeatureExtractor {
    /// Raw pixels, flattened. One stage.
    FlattenPixels,
    /// A fixed random conv stack; global average pooled to `dims` values.
    RandomConv { seed: u64, dims: usize },
    /// Features precomputed elsewhere, one CSV row per sample.
    External { path: PathBuf },
}

struct RandomConvNet {
    weights: Vec<Array4<f32>>,
}

impl RandomConvNet {
    fn build(seed: u64, dims: usize) -> Self {
        let mut init = crate::params::Initializer::new(seed);
        let chans = [3usize, 8, 16, dims];
        let mut weights = Vec::new();
        for w in chans.windows(2) {
            let arr = init.kaiming_conv::<f32>(&[w[1], w[0], 3, 3]);
            weights.push(
                arr.into_dimensionality::<ndarray::Ix4>()
                    .expect("conv kernel rank"),
            );
        }
        RandomConvNet { weights }
    }

    /// Post-activation feature maps, shallow to deep, NCHW with N=1.
    fn stages(&self, image: &Array3<f32>) -> Result<Vec<Array4<f32>>> {
        let (h, w, _) = image.dim();
        let mut x = Array4::<f32>::zeros((1, 3, h, w));
        for r in 0..h {
            for c in 0..w {
                for k in 0..3 {
                    x[[0, k, r, c]] = image[[r, c, k]];
                }
            }
        }
        let mut out = Vec::with_capacity(self.weights.len());
        for w in &self.weights {
            let conv = conv2d_raw(&x, w, 2, 1)?;
            x = conv.mapv(|v| if v > 0.0 { v } else { 0.2 * v });
            out.push(x.clone());
        }
        Ok(out)
    }
}

impl FeatureExtractor {
    pub fn label(&self) -> String {
        match self {
            FeatureExtractor::FlattenPixels => "flatten_pixels".into(),
            FeatureExtractor::RandomConv { seed, dims } => format!("random_conv:{seed}:{dims}"),
            FeatureExtractor::External { path } => format!("external:{}", path.display()),
        }
    }

    /// One feature vector per image, stacked into rows.
    pub fn feature_matrix(&self, images: &[Array3<f32>]) -> Result<Array2<f64>> {
        match self {
            FeatureExtractor::FlattenPixels => {
                if images.is_empty() {
                    return Err(Error::Parameter("no images for feature extraction".into()));
                }
                let d = images[0].len();
                let mut out = Array2::<f64>::zeros((images.len(), d));
                for (i, img) in images.iter().enumerate() {
                    if img.len() != d {
                        return Err(Error::Shape("mixed image sizes".into()));
                    }
                    for (j, v) in img.iter().enumerate() {
                        out[[i, j]] = *v as f64;
                    }
                }
                Ok(out)
            }
            FeatureExtractor::RandomConv { seed, dims } => {
                if images.is_empty() {
                    return Err(Error::Parameter("no images for feature extraction".into()));
                }
                let net = RandomConvNet::build(*seed, *dims);
                let mut out = Array2::<f64>::zeros((images.len(), *dims));
                for (i, img) in images.iter().enumerate() {
                    let stages = net.stages(img)?;
                    let deep = stages.last().expect("stages");
                    let (_, c, h, w) = deep.dim();
                    for ch in 0..c {
                        let mut s = 0.0f64;
                        for r in 0..h {
                            for cc in 0..w {
                                s += deep[[0, ch, r, cc]] as f64;
                            }
                        }
                        out[[i, ch]] = s / (h * w) as f64;
                    }
                }
                Ok(out)
            }
            FeatureExtractor::External { path } => load_feature_csv(path),
        }
    }
}

/// One row per sample, comma-separated features.
pub fn load_feature_csv(path: &Path) -> Result<Array2<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Integrity(format!("feature csv line {}: `{t}`", ln + 1)))
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Integrity(format!(
                    "feature csv line {}: ragged row",
                    ln + 1
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Integrity("feature csv has no rows".into()));
    }
    let d = rows[0].len();
    let mut out = Array2::<f64>::zeros((rows.len(), d));
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out[[i, j]] = *v;
        }
    }
    Ok(out)
}

pub fn write_feature_csv(path: &Path, features: &Array2<f64>) -> Result<()> {
    let mut s = String::new();
    for row in features.rows() {
        let cols: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        s.push_str(&cols.join(","));
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path.to_path_buf(), e))
}

const COV_JITTER: f64 = 1e-6;
const EIG_NEG_TOL: f64 = -1e-6;

fn mean_and_cov(x: &Array2<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let (n, d) = x.dim();
    if n < 2 {
        return Err(Error::Parameter(format!(
            "need at least 2 samples for a covariance, got {n}"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite features".into()));
    }
    let mut mean = vec![0.0f64; d];
    for row in x.rows() {
        for (m, v) in mean.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for row in x.rows() {
        for i in 0..d {
            let ci = row[i] - mean[i];
            for j in i..d {
                let cj = row[j] - mean[j];
                cov[(i, j)] += ci * cj;
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    for i in 0..d {
        cov[(i, i)] += COV_JITTER;
    }
    Ok((mean, cov))
}

/// Principal square root of a symmetric PSD matrix via eigendecomposition.
/// Eigenvalues below -1e-6 are a numeric error; small negatives clamp to 0.
fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < EIG_NEG_TOL {
            return Err(Error::Numeric(format!(
                "matrix square root: eigenvalue {v} below tolerance"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = eig.eigenvectors;
    Ok(&q * DMatrix::from_diagonal(&vals) * q.transpose())
}

/// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}), the Gaussian-fit
/// Fréchet distance. Symmetric and >= 0 up to jitter.
pub fn frechet_distance(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim().1 != b.dim().1 {
        return Err(Error::Shape(format!(
            "feature dims {} vs {}",
            a.dim().1,
            b.dim().1
        )));
    }
    let (mu_a, cov_a) = mean_and_cov(a)?;
    let (mu_b, cov_b) = mean_and_cov(b)?;
    let sqrt_a = sqrtm_psd(&cov_a)?;
    let inner = &sqrt_a * &cov_b * &sqrt_a;
    let s = sqrtm_psd(&inner)?;
    let mean_term: f64 = mu_a
        .iter()
        .zip(mu_b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let trace = cov_a.trace() + cov_b.trace() - 2.0 * s.trace();
    Ok(mean_term + trace)
}

/// Mean squared distance between (optionally channel-normalized) extractor
/// stage features, averaged over stages. A pseudometric: zero on identical
/// inputs, symmetric.
pub fn perceptual_distance(
    extractor: &FeatureExtractor,
    x: &Array3<f32>,
    y: &Array3<f32>,
) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x.dim(), y.dim())));
    }
    match extractor {
        FeatureExtractor::FlattenPixels => {
            let mut s = 0.0f64;
            for (a, b) in x.iter().zip(y.iter()) {
                let d = (*a - *b) as f64;
                s += d * d;
            }
            Ok(s / x.len() as f64)
        }
        FeatureExtractor::RandomConv { seed, dims } => {
            let net = RandomConvNet::build(*seed, *dims);
            let sx = net.stages(x)?;
            let sy = net.stages(y)?;
            let mut total = 0.0f64;
            for (fa, fb) in sx.iter().zip(sy.iter()) {
                let na = normalize_channels(fa);
                let nb = normalize_channels(fb);
                let mut s = 0.0f64;
                for (a, b) in na.iter().zip(nb.iter()) {
                    let d = (*a - *b) as f64;
                    s += d * d;
                }
                total += s / na.len() as f64;
            }
            Ok(total / sx.len() as f64)
        }
        FeatureExtractor::External { .. } => Err(Error::Parameter(
            "external features cannot score image pairs; use precomputed matrices".into(),
        )),
    }
}

/// Unit-normalize feature vectors along the channel axis per position.
fn normalize_channels(f: &Array4<f32>) -> Array4<f32> {
    let (n, c, h, w) = f.dim();
    let mut out = f.clone();
    for ni in 0..n {
        for r in 0..h {
            for cc in 0..w {
                let mut norm = 0.0f32;
                for ch in 0..c {
                    norm += f[[ni, ch, r, cc]] * f[[ni, ch, r, cc]];
                }
                let norm = norm.sqrt().max(1e-10);
                for ch in 0..c {
                    out[[ni, ch, r, cc]] /= norm;
                }
            }
        }
    }
    out
}

/// Mean absolute difference between the organ and the reflection of its
/// twin, over the mirror-intersected support of that organ.
pub fn symmetry_error(sample: &Sample, inpainted: &Array3<f32>, organ: Part) -> Result<f64> {
    if inpainted.dim() != sample.image.dim() {
        return Err(Error::Shape(format!(
            "inpainted {:?} vs sample {:?}",
            inpainted.dim(),
            sample.image.dim()
        )));
    }
    let mask = sample.parts.mask(organ);
    let mid = sample.midline_x;
    let size = sample.size();
    let (mut has_left, mut has_right) = (false, false);
    for ((_, c), v) in mask.indexed_iter() {
        if *v == 1 {
            if c < mid {
                has_left = true;
            } else {
                has_right = true;
            }
        }
    }
    if !has_left || !has_right {
        return Err(Error::OrganNotFound {
            organ: organ.name().into(),
            side: if has_left { "right" } else { "left" }.into(),
        });
    }
    let mut total = 0.0f64;
    let mut n = 0usize;
    for r in 0..size {
        for c in mid..size {
            let rc = 2 * mid - 1 - c;
            if mask[[r, c]] == 1 && mask[[r, rc]] == 1 {
                for k in 0..3 {
                    total += (inpainted[[r, c, k]] - inpainted[[r, rc, k]]).abs() as f64;
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        return Ok(0.0);
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyfaces::generate_face;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian_features(n: usize, d: usize, shift: f64, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, d), || {
            rng.sample::<f64, _>(StandardNormal) + shift
        })
    }

    #[test]
    fn frechet_identity_and_symmetry() {
        let a = gaussian_features(200, 6, 0.0, 1);
        let d = frechet_distance(&a, &a).unwrap();
        assert!(d.abs() < 1e-6, "identical sets: {d}");
        let b = gaussian_features(180, 6, 0.5, 2);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9);
        assert!(ab > 0.0);
    }

    #[test]
    fn frechet_matches_gaussian_closed_form() {
        // N(0, I) vs N(shift, I): distance -> d * shift^2
        let d = 4usize;
        let shift = 0.8f64;
        let a = gaussian_features(4000, d, 0.0, 3);
        let b = gaussian_features(4000, d, shift, 4);
        let expect = d as f64 * shift * shift;
        let got = frechet_distance(&a, &b).unwrap();
        let rel = (got - expect).abs() / expect;
        assert!(rel < 0.05, "got {got}, expected {expect} (rel {rel})");
    }

    #[test]
    fn frechet_rejects_mismatched_dims_and_nonfinite() {
        let a = gaussian_features(50, 4, 0.0, 5);
        let b = gaussian_features(50, 5, 0.0, 6);
        assert!(matches!(frechet_distance(&a, &b), Err(Error::Shape(_))));
        let mut c = gaussian_features(50, 4, 0.0, 7);
        c[[0, 0]] = f64::NAN;
        assert!(matches!(frechet_distance(&a, &c), Err(Error::Numeric(_))));
    }

    #[test]
    fn perceptual_zero_on_identical_and_monotone_for_flatten() {
        let s = generate_face(1, 64, 0.0).unwrap();
        let ext = FeatureExtractor::FlattenPixels;
        assert_eq!(perceptual_distance(&ext, &s.image, &s.image).unwrap(), 0.0);

        // flatten-pixels distance must be monotone in pixel MSE
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut pairs: Vec<(f64, f64)> = Vec::new();
        for amp_step in 1..=5 {
            let amp = amp_step as f32 * 0.05;
            let mut other = s.image.clone();
            for v in other.iter_mut() {
                *v = (*v + rng.gen_range(-amp..amp)).clamp(0.0, 1.0);
            }
            let mse = other
                .iter()
                .zip(s.image.iter())
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                / other.len() as f64;
            let pd = perceptual_distance(&ext, &s.image, &other).unwrap();
            pairs.push((mse, pd));
        }
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in pairs.windows(2) {
            assert!(w[0].1 <= w[1].1, "not monotone: {pairs:?}");
        }
    }

    #[test]
    fn perceptual_conv_extractor_is_deterministic_and_symmetric() {
        let a = generate_face(2, 64, 0.0).unwrap();
        let b = generate_face(3, 64, 0.0).unwrap();
        let ext = FeatureExtractor::RandomConv { seed: 7, dims: 8 };
        let d1 = perceptual_distance(&ext, &a.image, &b.image).unwrap();
        let d2 = perceptual_distance(&ext, &b.image, &a.image).unwrap();
        assert_eq!(d1, d2);
        assert!(d1 > 0.0);
        assert_eq!(
            perceptual_distance(&ext, &a.image, &b.image).unwrap(),
            d1
        );
    }

    #[test]
    fn perceptual_conv_extractor_is_not_permutation_invariant() {
        // unlike plain pixel MSE, the conv extractor depends on layout:
        // applying the same pixel permutation to both images changes the
        // distance in general
        let a = generate_face(4, 64, 0.0).unwrap();
        let b = generate_face(5, 64, 0.0).unwrap();
        let ext = FeatureExtractor::RandomConv { seed: 7, dims: 8 };
        let base = perceptual_distance(&ext, &a.image, &b.image).unwrap();
        // permutation: swap the top and bottom halves
        let swap = |img: &Array3<f32>| {
            let (h, w, c) = img.dim();
            let mut out = img.clone();
            for r in 0..h {
                for cc in 0..w {
                    for k in 0..c {
                        out[[r, cc, k]] = img[[(r + h / 2) % h, cc, k]];
                    }
                }
            }
            out
        };
        let permuted = perceptual_distance(&ext, &swap(&a.image), &swap(&b.image)).unwrap();
        assert_ne!(base, permuted);

        // flatten_pixels IS invariant to any shared permutation
        let flat = FeatureExtractor::FlattenPixels;
        let f0 = perceptual_distance(&flat, &a.image, &b.image).unwrap();
        let f1 = perceptual_distance(&flat, &swap(&a.image), &swap(&b.image)).unwrap();
        assert!((f0 - f1).abs() < 1e-12);
    }

    #[test]
    fn symmetry_error_contracts() {
        let s = generate_face(6, 64, 0.0).unwrap();
        // perfectly symmetric image: zero
        assert_eq!(symmetry_error(&s, &s.image, Part::Eye).unwrap(), 0.0);

        // recolor the right eye by +0.5 (no clipping in this constructed
        // input): error is exactly 0.5 over the support
        let eye = s.parts.mask(Part::Eye);
        let mut inp = s.image.clone();
        for ((r, c), v) in eye.indexed_iter() {
            if *v == 1 && c >= s.midline_x {
                for k in 0..3 {
                    inp[[r, c, k]] = s.image[[r, c, k]] + 0.5;
                }
            }
        }
        let e = symmetry_error(&s, &inp, Part::Eye).unwrap();
        assert!((e - 0.5).abs() < 1e-6, "{e}");

        // background edits are invisible to the metric
        let mut bg = inp.clone();
        bg[[0, 0, 0]] = 1.0;
        assert_eq!(
            symmetry_error(&s, &bg, Part::Eye).unwrap(),
            e
        );

        // missing organ
        let degenerate = crate::toyfaces::generate_face_with(
            7,
            64,
            0.0,
            &crate::toyfaces::FaceOptions {
                omit: vec![Part::Ear],
            },
        )
        .unwrap();
        assert!(matches!(
            symmetry_error(&degenerate, &degenerate.image, Part::Ear),
            Err(Error::OrganNotFound { .. })
        ));
    }

    #[test]
    fn feature_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        let a = gaussian_features(10, 3, 0.2, 8);
        write_feature_csv(&path, &a).unwrap();
        let b = load_feature_csv(&path).unwrap();
        assert_eq!(a.dim(), b.dim());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        let ext = FeatureExtractor::External { path };
        let m = ext.feature_matrix(&[]).unwrap();
        assert_eq!(m.dim(), (10, 3));
    }
}
