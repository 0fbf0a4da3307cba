//! Fréchet distance between Gaussian fits of image features.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use tecswin_tensor::{Rng, Tensor};

use crate::error::{Error, Result};

pub const COV_SHRINKAGE: f64 = 1e-6;

/// Feature matrix with its Gaussian summary.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    pub extractor: String,
    /// Row-major `[n, dim]`; empty when built from statistics alone.
    pub features: Vec<f64>,
    pub n: usize,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FeatureSet {
    /// Mean and unbiased covariance plus `COV_SHRINKAGE * I`.
    pub fn from_features(extractor: &str, features: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || features.len() % dim != 0 || features.len() < 2 * dim {
            return Err(Error::Metric(format!(
                "need at least two rows of width {dim}, got {} values",
                features.len()
            )));
        }
        let n = features.len() / dim;
        let m = DMatrix::from_row_slice(n, dim, &features);
        let mean = DVector::from_iterator(dim, m.column_iter().map(|c| c.mean()));
        let centred = DMatrix::from_fn(n, dim, |i, j| m[(i, j)] - mean[j]);
        let mut cov = centred.transpose() * &centred / (n as f64 - 1.0);
        for i in 0..dim {
            cov[(i, i)] += COV_SHRINKAGE;
        }
        Ok(Self {
            extractor: extractor.to_string(),
            features,
            n,
            mean,
            cov,
        })
    }

    pub fn from_stats(extractor: &str, mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d || d == 0 {
            return Err(Error::Metric(format!("covariance of {} values for dim {d}", cov.len())));
        }
        Ok(Self {
            extractor: extractor.to_string(),
            features: Vec::new(),
            n: 0,
            mean: DVector::from_vec(mean),
            cov: DMatrix::from_row_slice(d, d, &cov),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let s = &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose();
    (s, eig.eigenvalues)
}

/// `|mu_a - mu_b|^2 + Tr(Ca + Cb - 2 (Ca Cb)^(1/2))`.
///
/// The trace term is taken from the eigenvalues of the symmetric
/// `Ca^(1/2) Cb Ca^(1/2)`, which shares them with `Ca Cb`.
pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Metric(format!("feature widths {} and {}", a.dim(), b.dim())));
    }
    let dmu = (&a.mean - &b.mean).norm_squared();
    let (sa, _) = sym_sqrt(&a.cov);
    let m = &sa * &b.cov * &sa;
    let (root, eig) = sym_sqrt(&m);
    let scale = m.norm().max(1e-300);
    let residual = (&root * &root - (&m + m.transpose()) * 0.5).norm() / scale;
    let most_negative = eig.iter().cloned().fold(0.0f64, f64::min);
    if !residual.is_finite() || residual > 1e-6 && most_negative.abs() > 1e-6 * scale {
        return Err(Error::MatrixSqrt { residual });
    }
    let tr_root: f64 = eig.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok(dmu + a.cov.trace() + b.cov.trace() - 2.0 * tr_root)
}

/// Maps a batch of images to one feature row each.
pub trait FeatureExtractor {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    /// `images: [N, H, W, 3]` -> row-major `[N, dim]`.
    fn extract(&self, images: &Tensor) -> Result<Vec<f64>>;
}

struct ConvLayer {
    cin: usize,
    cout: usize,
    /// `[3, 3, cin, cout]`
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl ConvLayer {
    fn new(cin: usize, cout: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / (9 * cin) as f32).sqrt();
        Self {
            cin,
            cout,
            weight: rng.normal_vec(9 * cin * cout, std),
            bias: rng.normal_vec(cout, 0.1),
        }
    }

    /// 3x3, stride 2, zero padding 1, ReLU; `x: [h, w, cin]`.
    fn forward(&self, x: &[f32], h: usize, w: usize) -> (Vec<f32>, usize, usize) {
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = vec![0.0f32; oh * ow * self.cout];
        for oy in 0..oh {
            for ox in 0..ow {
                let o = &mut out[(oy * ow + ox) * self.cout..(oy * ow + ox + 1) * self.cout];
                o.copy_from_slice(&self.bias);
                for ky in 0..3 {
                    let iy = (oy * 2 + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * 2 + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let px = &x[(iy as usize * w + ix as usize) * self.cin..][..self.cin];
                        let wk = &self.weight[(ky * 3 + kx) * self.cin * self.cout..];
                        for (ci, &v) in px.iter().enumerate() {
                            let row = &wk[ci * self.cout..(ci + 1) * self.cout];
                            for (acc, wv) in o.iter_mut().zip(row) {
                                *acc += v * wv;
                            }
                        }
                    }
                }
                o.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        (out, oh, ow)
    }
}

/// Frozen, seeded three-layer strided conv net with global average
/// pooling.
pub struct RandomConvFeatures {
    seed: u64,
    width: usize,
    layers: Vec<ConvLayer>,
}

impl RandomConvFeatures {
    pub fn new(seed: u64, width: usize) -> Self {
        let mut rng = Rng::new(seed);
        let layers = vec![
            ConvLayer::new(3, 32, &mut rng),
            ConvLayer::new(32, 64, &mut rng),
            ConvLayer::new(64, width, &mut rng),
        ];
        Self { seed, width, layers }
    }
}

impl Default for RandomConvFeatures {
    fn default() -> Self {
        Self::new(0, 64)
    }
}

impl FeatureExtractor for RandomConvFeatures {
    fn id(&self) -> String {
        format!("random-conv3-w{}-s{}", self.width, self.seed)
    }

    fn dim(&self) -> usize {
        self.width
    }

    fn extract(&self, images: &Tensor) -> Result<Vec<f64>> {
        let [_, h, w, 3] = *images.shape() else {
            return Err(Error::Metric(format!("expected [N,H,W,3], got {:?}", images.shape())));
        };
        let mut out = Vec::new();
        for img in images.data().chunks_exact(h * w * 3) {
            let (mut x, mut hh, mut ww) = (img.to_vec(), h, w);
            for l in &self.layers {
                (x, hh, ww) = l.forward(&x, hh, ww);
            }
            let pix = (hh * ww) as f64;
            for c in 0..self.width {
                out.push((0..hh * ww).map(|p| x[p * self.width + c] as f64).sum::<f64>() / pix);
            }
        }
        Ok(out)
    }
}

pub fn extract_features(images: &Tensor, extractor: &dyn FeatureExtractor) -> Result<FeatureSet> {
    FeatureSet::from_features(&extractor.id(), extractor.extract(images)?, extractor.dim())
}

/// Proxy FID between two image batches under `extractor`.
pub fn image_fid(real: &Tensor, fake: &Tensor, extractor: &dyn FeatureExtractor) -> Result<f64> {
    frechet_distance(&extract_features(real, extractor)?, &extract_features(fake, extractor)?)
}
