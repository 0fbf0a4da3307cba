//! Four-class synthetic coloured shapes and a feature-based classifier used
//! to judge whether generated samples match their prompt.

use tecswin_tensor::{Rng, Tensor};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [Self::Circle, Self::Square, Self::Triangle, Self::Cross];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    fn base_color(self) -> [f32; 3] {
        match self {
            Self::Circle => [0.95, -0.6, -0.6],
            Self::Square => [-0.6, 0.9, -0.6],
            Self::Triangle => [-0.5, -0.4, 0.95],
            Self::Cross => [0.95, 0.9, -0.7],
        }
    }

    pub fn prompt(self) -> &'static str {
        match self {
            Self::Circle => "a red circle",
            Self::Square => "a green square",
            Self::Triangle => "a blue triangle",
            Self::Cross => "a yellow cross",
        }
    }

    fn covers(self, dx: f32, dy: f32, r: f32) -> bool {
        match self {
            Self::Circle => dx * dx + dy * dy <= r * r,
            Self::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
            // apex up, base at +r
            Self::Triangle => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.55,
            Self::Cross => {
                (dx.abs() <= r * 0.3 && dy.abs() <= r) || (dy.abs() <= r * 0.3 && dx.abs() <= r)
            }
        }
    }
}

/// Renders one `[size, size, 3]` image in `[-1, 1]`.
pub fn render_shape(class: ShapeClass, size: usize, rng: &mut Rng) -> Vec<f32> {
    let s = size as f32;
    let r = s * (0.26 + 0.1 * rng.uniform() as f32);
    let margin = r + 0.5;
    let cx = margin + (s - 2.0 * margin).max(0.0) * rng.uniform() as f32;
    let cy = margin + (s - 2.0 * margin).max(0.0) * rng.uniform() as f32;
    let bg = -0.85 + 0.15 * rng.uniform() as f32;
    let mut color = class.base_color();
    for c in &mut color {
        *c = (*c + 0.1 * (rng.uniform() as f32 - 0.5)).clamp(-1.0, 1.0);
    }
    let mut img = vec![bg; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            if class.covers(dx, dy, r) {
                img[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&color);
            }
        }
    }
    img
}

/// Deterministic stream of labelled shape images.
#[derive(Clone, Debug)]
pub struct ShapesDataset {
    pub size: usize,
    rng: Rng,
}

impl ShapesDataset {
    pub fn new(size: usize, seed: u64) -> Self {
        Self {
            size,
            rng: Rng::new(seed),
        }
    }

    /// `[b, size, size, 3]` with balanced-in-expectation uniform labels.
    pub fn batch(&mut self, b: usize) -> Result<(Tensor, Vec<ShapeClass>)> {
        let mut data = Vec::with_capacity(b * self.size * self.size * 3);
        let mut labels = Vec::with_capacity(b);
        for _ in 0..b {
            let class = ShapeClass::ALL[self.rng.below(4)];
            data.extend(render_shape(class, self.size, &mut self.rng));
            labels.push(class);
        }
        Ok((Tensor::from_vec(data, &[b, self.size, self.size, 3])?, labels))
    }

    /// Exactly `per_class` images of each class, in class order.
    pub fn balanced(&mut self, per_class: usize) -> Result<(Tensor, Vec<ShapeClass>)> {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for class in ShapeClass::ALL {
            for _ in 0..per_class {
                data.extend(render_shape(class, self.size, &mut self.rng));
                labels.push(class);
            }
        }
        let n = labels.len();
        Ok((Tensor::from_vec(data, &[n, self.size, self.size, 3])?, labels))
    }
}

const FEATURES: usize = 6;

/// Foreground colour and geometry summary of one image: mean RGB of pixels
/// brighter than the image median, foreground fraction, and how much of the
/// foreground's bounding box it fills.
pub fn shape_features(img: &[f32], size: usize) -> [f64; FEATURES] {
    let lum: Vec<f32> = img.chunks_exact(3).map(|p| p.iter().sum::<f32>() / 3.0).collect();
    let mut sorted = lum.clone();
    sorted.sort_by(f32::total_cmp);
    let lo = sorted[sorted.len() / 10];
    let hi = sorted[sorted.len() - 1 - sorted.len() / 50];
    let thr = lo + 0.5 * (hi - lo);
    let mut rgb = [0.0f64; 3];
    let mut n = 0usize;
    let (mut x0, mut x1, mut y0, mut y1) = (size, 0, size, 0);
    for (i, &l) in lum.iter().enumerate() {
        if l > thr {
            for c in 0..3 {
                rgb[c] += img[i * 3 + c] as f64;
            }
            n += 1;
            let (y, x) = (i / size, i % size);
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if n == 0 {
        return [0.0; FEATURES];
    }
    let box_area = ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
    [
        rgb[0] / n as f64,
        rgb[1] / n as f64,
        rgb[2] / n as f64,
        n as f64 / lum.len() as f64,
        n as f64 / box_area,
        ((x1 - x0 + 1) as f64 / (y1 - y0 + 1) as f64).ln(),
    ]
}

/// Nearest-centroid classifier over [`shape_features`], standardised per
/// feature.
#[derive(Clone, Debug)]
pub struct ShapeClassifier {
    size: usize,
    mean: [f64; FEATURES],
    scale: [f64; FEATURES],
    centroids: Vec<[f64; FEATURES]>,
}

impl ShapeClassifier {
    pub fn fit(images: &Tensor, labels: &[ShapeClass]) -> Result<Self> {
        let [n, size, _, 3] = *images.shape() else {
            return Err(Error::Config(format!("expected [N,S,S,3], got {:?}", images.shape())));
        };
        if n != labels.len() || n == 0 {
            return Err(Error::Config("labels do not match images".into()));
        }
        let per = size * size * 3;
        let feats: Vec<[f64; FEATURES]> = images
            .data()
            .chunks_exact(per)
            .map(|img| shape_features(img, size))
            .collect();
        let mut mean = [0.0; FEATURES];
        let mut scale = [0.0; FEATURES];
        for f in &feats {
            for k in 0..FEATURES {
                mean[k] += f[k] / n as f64;
            }
        }
        for f in &feats {
            for k in 0..FEATURES {
                scale[k] += (f[k] - mean[k]).powi(2) / n as f64;
            }
        }
        scale.iter_mut().for_each(|s| *s = s.sqrt().max(1e-6));
        let mut centroids = vec![[0.0; FEATURES]; 4];
        let mut counts = [0usize; 4];
        for (f, l) in feats.iter().zip(labels) {
            counts[l.index()] += 1;
            for k in 0..FEATURES {
                centroids[l.index()][k] += (f[k] - mean[k]) / scale[k];
            }
        }
        for (c, &cnt) in centroids.iter_mut().zip(&counts) {
            if cnt == 0 {
                return Err(Error::Config("every class needs a training image".into()));
            }
            c.iter_mut().for_each(|v| *v /= cnt as f64);
        }
        Ok(Self {
            size,
            mean,
            scale,
            centroids,
        })
    }

    pub fn predict_one(&self, img: &[f32]) -> ShapeClass {
        let f = shape_features(img, self.size);
        let z: Vec<f64> = (0..FEATURES).map(|k| (f[k] - self.mean[k]) / self.scale[k]).collect();
        let dist = |c: &[f64; FEATURES]| -> f64 { c.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum() };
        let best = (0..4)
            .min_by(|&a, &b| dist(&self.centroids[a]).total_cmp(&dist(&self.centroids[b])))
            .unwrap();
        ShapeClass::ALL[best]
    }

    pub fn predict(&self, images: &Tensor) -> Vec<ShapeClass> {
        let per = self.size * self.size * 3;
        images.data().chunks_exact(per).map(|img| self.predict_one(img)).collect()
    }

    pub fn accuracy(&self, images: &Tensor, labels: &[ShapeClass]) -> f64 {
        let pred = self.predict(images);
        let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
        hits as f64 / labels.len().max(1) as f64
    }
}
