//! Deterministic synthetic image classification data.
//!
//! Each class is an oriented sinusoidal grating with its own frequency,
//! orientation, phase and colour. Samples jitter phase and amplitude and add
//! Gaussian pixel noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub resolution: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            samples_per_class: 100,
            resolution: 32,
            seed: 7,
        }
    }
}

/// Images `[N, 3, R, R]` flattened, with labels in `0..classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub resolution: usize,
}

struct ClassPattern {
    freq: f64,
    dir: (f64, f64),
    phase: f64,
    colour: [f64; 3],
}

const NOISE_STD: f64 = 0.5;
const PHASE_JITTER: f64 = 0.3;

fn class_patterns(classes: usize, seed: u64) -> Vec<ClassPattern> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c1a5);
    (0..classes)
        .map(|c| {
            let theta = PI * c as f64 / classes as f64;
            ClassPattern {
                freq: 2.0 + (c % 3) as f64,
                dir: (theta.cos(), theta.sin()),
                phase: rng.random_range(0.0..2.0 * PI),
                colour: [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ],
            }
        })
        .collect()
}

/// `classes × samples_per_class` images; sample `i` has label `i % classes`.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.samples_per_class == 0 || spec.resolution == 0 {
        return Err(Error::invalid("synth_dataset", "classes, samples and resolution must be positive"));
    }
    let r = spec.resolution;
    let patterns = class_patterns(spec.classes, spec.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let n = spec.classes * spec.samples_per_class;
    let mut images = Vec::with_capacity(n * 3 * r * r);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.classes;
        let p = &patterns[c];
        let phase = p.phase + rng.random_range(-PHASE_JITTER..PHASE_JITTER);
        let amp = rng.random_range(0.8..1.2);
        for colour in p.colour {
            for y in 0..r {
                for x in 0..r {
                    let u = (x as f64 * p.dir.0 + y as f64 * p.dir.1) / r as f64;
                    let v = amp * colour * (2.0 * PI * p.freq * u + phase).sin() + 0.5 * colour;
                    images.push((v + noise.sample(&mut rng)) as f32);
                }
            }
        }
        labels.push(c);
    }
    Ok(Dataset {
        images,
        labels,
        classes: spec.classes,
        resolution: r,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        3 * self.resolution * self.resolution
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let l = self.image_len();
        &self.images[i * l..(i + 1) * l]
    }

    /// Stacks the given samples into `[B, 3, R, R]`, optionally mirrored
    /// and/or shifted by up to 4 pixels with zero fill.
    pub fn batch(&self, idx: &[usize], aug: Option<(&mut ChaCha8Rng, bool, bool)>) -> Result<(Tensor<f32>, Vec<usize>)> {
        let r = self.resolution;
        let mut out = Vec::with_capacity(idx.len() * self.image_len());
        let mut aug = aug;
        for &i in idx {
            let img = self.image(i);
            let (flip, dy, dx) = match aug.as_mut() {
                Some((rng, flip, crop)) => {
                    let f = *flip && rng.random_bool(0.5);
                    let (dy, dx) = if *crop {
                        (rng.random_range(-4i64..=4), rng.random_range(-4i64..=4))
                    } else {
                        (0, 0)
                    };
                    (f, dy, dx)
                }
                None => (false, 0, 0),
            };
            for ch in 0..3 {
                for y in 0..r as i64 {
                    for x in 0..r as i64 {
                        let sx = if flip { r as i64 - 1 - x } else { x } + dx;
                        let sy = y + dy;
                        let inside = (0..r as i64).contains(&sx) && (0..r as i64).contains(&sy);
                        out.push(if inside {
                            img[ch * r * r + sy as usize * r + sx as usize]
                        } else {
                            0.0
                        });
                    }
                }
            }
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::new(&[idx.len(), 3, r, r], out)?, labels))
    }

    /// Little-endian bytes of the images, for determinism checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b: Vec<u8> = self.images.iter().flat_map(|v| v.to_le_bytes()).collect();
        b.extend(self.labels.iter().flat_map(|&l| (l as u32).to_le_bytes()));
        b
    }
}

/// Accuracy of classifying `test` by the nearest per-class mean image of `train`.
pub fn nearest_centroid_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let l = train.image_len();
    let mut centroids = vec![vec![0.0f64; l]; train.classes];
    let mut counts = vec![0usize; train.classes];
    for i in 0..train.len() {
        let c = train.labels[i];
        counts[c] += 1;
        centroids[c].iter_mut().zip(train.image(i)).for_each(|(a, &v)| *a += v as f64);
    }
    for (cen, &n) in centroids.iter_mut().zip(&counts) {
        cen.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let correct = (0..test.len())
        .filter(|&i| {
            let img = test.image(i);
            let best = centroids
                .iter()
                .enumerate()
                .map(|(c, cen)| {
                    let d: f64 = cen.iter().zip(img).map(|(&a, &b)| (a - b as f64).powi(2)).sum();
                    (c, d)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(c, _)| c)
                .unwrap_or(0);
            best == test.labels[i]
        })
        .count();
    correct as f64 / test.len() as f64
}
