//! Synthetic Gaussian-blob classification data for the toy trainer. Each
//! class renders a bright blob at a class-specific position with per-sample
//! center jitter and pixel noise; everything is drawn from one seeded
//! ChaCha stream, so a seed fully determines the dataset.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::init::seeded_rng;
use crate::scalar::Element;
use crate::tensor::Tensor;

/// A fixed 80/20 split of single-channel images with integer labels.
#[derive(Clone, Debug)]
pub struct Dataset<T: Element> {
    /// [n_train, 1, res, res]
    pub train_images: Tensor<T>,
    pub train_labels: Vec<usize>,
    /// [n_test, 1, res, res]
    pub test_images: Tensor<T>,
    pub test_labels: Vec<usize>,
    pub classes: usize,
    pub resolution: usize,
}

impl<T: Element> Dataset<T> {
    pub fn train_len(&self) -> usize {
        self.train_labels.len()
    }

    pub fn test_len(&self) -> usize {
        self.test_labels.len()
    }

    /// One image as a [1, 1, res, res] batch.
    pub fn train_image(&self, i: usize) -> Tensor<T> {
        slice_image(&self.train_images, i)
    }

    pub fn test_image(&self, i: usize) -> Tensor<T> {
        slice_image(&self.test_images, i)
    }
}

fn slice_image<T: Element>(images: &Tensor<T>, i: usize) -> Tensor<T> {
    let (res_h, res_w) = (images.dims()[2], images.dims()[3]);
    let plane = res_h * res_w;
    let mut out = Tensor::zeros(&[1, 1, res_h, res_w]);
    out.data_mut()
        .copy_from_slice(&images.data()[i * plane..(i + 1) * plane]);
    out
}

/// Blob centers on a circle around the image midpoint, one per class.
fn class_center(k: usize, classes: usize, res: usize) -> (f64, f64) {
    let angle = std::f64::consts::FRAC_PI_4 + 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
    let r = 0.2 * res as f64;
    let mid = 0.5 * res as f64;
    (mid + r * angle.cos(), mid + r * angle.sin())
}

/// Deterministic class-conditional blob images, balanced over classes, split
/// 80/20 per class into train and test.
pub fn make_synthetic_dataset<T: Element>(
    n: usize,
    classes: usize,
    resolution: usize,
    seed: u64,
) -> Result<Dataset<T>> {
    if classes == 0 || resolution == 0 || n == 0 {
        return Err(Error::InvalidConfig(format!(
            "dataset wants positive n, classes and resolution, got {n}/{classes}/{resolution}"
        )));
    }
    if n % classes != 0 {
        return Err(Error::InvalidConfig(format!(
            "n {n} must be divisible by {classes} classes to stay balanced"
        )));
    }
    let per_class = n / classes;
    let test_per_class = per_class / 5;
    let train_per_class = per_class - test_per_class;
    let res = resolution;
    let sigma = res as f64 / 8.0;
    let jitter = res as f64 / 16.0;
    let noise = 0.1;
    let mut rng = seeded_rng(seed);
    let jitter_dist = Normal::new(0.0, jitter).expect("finite jitter");
    let noise_dist = Normal::new(0.0, noise).expect("finite noise");

    // rendered per class in sample order, then dealt round-robin into the
    // split so batches mix classes even without shuffling
    let mut class_images: Vec<Vec<Vec<T>>> = Vec::with_capacity(classes);
    for k in 0..classes {
        let (cx, cy) = class_center(k, classes, res);
        let mut images = Vec::with_capacity(per_class);
        for _ in 0..per_class {
            let dx = jitter_dist.sample(&mut rng);
            let dy = jitter_dist.sample(&mut rng);
            let mut img = Vec::with_capacity(res * res);
            for y in 0..res {
                for x in 0..res {
                    let ddx = x as f64 - (cx + dx);
                    let ddy = y as f64 - (cy + dy);
                    let v = (-(ddx * ddx + ddy * ddy) / (2.0 * sigma * sigma)).exp()
                        + noise_dist.sample(&mut rng);
                    img.push(T::from_f64(v));
                }
            }
            images.push(img);
        }
        class_images.push(images);
    }

    let plane = res * res;
    let mut train_images = Tensor::zeros(&[classes * train_per_class, 1, res, res]);
    let mut train_labels = Vec::with_capacity(classes * train_per_class);
    let mut test_images = Tensor::zeros(&[classes * test_per_class, 1, res, res]);
    let mut test_labels = Vec::with_capacity(classes * test_per_class);
    for i in 0..train_per_class {
        for k in 0..classes {
            let at = train_labels.len();
            train_images.data_mut()[at * plane..(at + 1) * plane]
                .copy_from_slice(&class_images[k][i]);
            train_labels.push(k);
        }
    }
    for i in 0..test_per_class {
        for k in 0..classes {
            let at = test_labels.len();
            test_images.data_mut()[at * plane..(at + 1) * plane]
                .copy_from_slice(&class_images[k][train_per_class + i]);
            test_labels.push(k);
        }
    }
    Ok(Dataset {
        train_images,
        train_labels,
        test_images,
        test_labels,
        classes,
        resolution,
    })
}

/// Accuracy of a 1-nearest-centroid classifier fit on the train split; an
/// oracle baseline the learned network must at least approach.
pub fn nearest_centroid_accuracy<T: Element>(ds: &Dataset<T>) -> f64 {
    let plane = ds.resolution * ds.resolution;
    let mut centroids = vec![vec![0.0f64; plane]; ds.classes];
    let mut counts = vec![0usize; ds.classes];
    for (i, &label) in ds.train_labels.iter().enumerate() {
        let img = &ds.train_images.data()[i * plane..(i + 1) * plane];
        for (c, &v) in centroids[label].iter_mut().zip(img) {
            *c += v.to_f64();
        }
        counts[label] += 1;
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        for v in c.iter_mut() {
            *v /= n.max(1) as f64;
        }
    }
    let mut hits = 0usize;
    for (i, &label) in ds.test_labels.iter().enumerate() {
        let img = &ds.test_images.data()[i * plane..(i + 1) * plane];
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (k, c) in centroids.iter().enumerate() {
            let d: f64 = img
                .iter()
                .zip(c)
                .map(|(&v, &m)| {
                    let d = v.to_f64() - m;
                    d * d
                })
                .sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    hits as f64 / ds.test_labels.len().max(1) as f64
}
