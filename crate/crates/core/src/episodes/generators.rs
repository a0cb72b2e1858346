//! Synthetic few-shot benchmarks.
//!
//! Generated values are rounded to `f32` precision so a dataset survives a
//! save/load round trip unchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ClassData, Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gaussian clusters seen through a fixed random nonlinearity.
///
/// Class means lie on the unit sphere of the first `signal_dim` latent
/// coordinates. Samples add isotropic noise of standard deviation `spread`
/// over all `input_dim` latent coordinates, so the remaining coordinates carry
/// nothing but noise. Every latent vector then passes through the same map
/// `x = R₂·tanh(gain·R₁·v)` with random rotations `R₁`, `R₂` drawn from
/// `nonlinearity_seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianConfig {
    pub classes: usize,
    pub input_dim: usize,
    pub signal_dim: usize,
    pub samples_per_class: usize,
    pub spread: f64,
    pub gain: f64,
    pub nonlinearity_seed: u64,
    pub seed: u64,
}

impl Default for GaussianConfig {
    fn default() -> Self {
        Self {
            classes: 1000,
            input_dim: 96,
            signal_dim: 8,
            samples_per_class: 40,
            spread: 0.22,
            gain: 2.5,
            nonlinearity_seed: 1,
            seed: 7,
        }
    }
}

/// Binary glyphs: a random template per class with i.i.d. pixel flips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlyphConfig {
    pub classes: usize,
    pub grid: usize,
    pub samples_per_class: usize,
    pub flip_noise: f64,
    pub seed: u64,
}

impl Default for GlyphConfig {
    fn default() -> Self {
        Self {
            classes: 100,
            grid: 8,
            samples_per_class: 20,
            flip_noise: 0.1,
            seed: 7,
        }
    }
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Random orthogonal `k×k` matrix by Gram–Schmidt on a Gaussian draw.
fn random_rotation(rng: &mut ChaCha8Rng, k: usize) -> Tensor {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    while rows.len() < k {
        let mut v: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        for r in &rows {
            let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            for (vi, ri) in v.iter_mut().zip(r) {
                *vi -= d * ri;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Tensor::from_rows(&rows)
}

fn unit_vector(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

pub fn gaussian_task_generator(cfg: &GaussianConfig) -> Result<Dataset> {
    if cfg.classes < 15 {
        return Err(Error::validation(format!(
            "gaussian generator needs at least 15 classes, got {}",
            cfg.classes
        )));
    }
    if cfg.signal_dim == 0 || cfg.signal_dim > cfg.input_dim || cfg.samples_per_class == 0 {
        return Err(Error::validation(format!(
            "invalid gaussian generator shape: signal_dim {} input_dim {} samples {}",
            cfg.signal_dim, cfg.input_dim, cfg.samples_per_class
        )));
    }
    if !(cfg.spread >= 0.0) || !cfg.gain.is_finite() {
        return Err(Error::validation("spread must be non-negative and gain finite"));
    }
    let m = cfg.input_dim;
    let mut map_rng = ChaCha8Rng::seed_from_u64(cfg.nonlinearity_seed);
    let r1 = random_rotation(&mut map_rng, m);
    let r2 = random_rotation(&mut map_rng, m);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut classes = Vec::with_capacity(cfg.classes);
    for id in 0..cfg.classes {
        let mut mean = unit_vector(&mut rng, cfg.signal_dim);
        mean.resize(m, 0.0);
        let count = cfg.samples_per_class;
        let latent: Vec<f64> = (0..count)
            .flat_map(|_| {
                mean.iter()
                    .map(|mu| mu + cfg.spread * rng.sample::<f64, _>(StandardNormal))
                    .collect::<Vec<_>>()
            })
            .collect();
        let latent = Tensor::matrix(count, m, latent)?;
        let hidden = latent
            .matmul(&r1.transpose())?
            .map(|v| (cfg.gain * v).tanh());
        let samples = hidden.matmul(&r2.transpose())?.map(round_f32);
        classes.push(ClassData {
            id: id as u32,
            split: Split::MetaTrain,
            samples,
        });
    }
    let mut ds = Dataset::new(m, classes)?;
    ds.names = (0..cfg.classes as u32)
        .map(|id| (id, format!("gaussian-{id:04}")))
        .collect();
    Ok(ds)
}

pub fn glyph_task_generator(cfg: &GlyphConfig) -> Result<Dataset> {
    if cfg.grid < 8 {
        return Err(Error::validation(format!("grid size must be at least 8, got {}", cfg.grid)));
    }
    if !(0.0..0.5).contains(&cfg.flip_noise) {
        return Err(Error::validation(format!(
            "flip noise must lie in [0, 0.5), got {}",
            cfg.flip_noise
        )));
    }
    if cfg.classes == 0 || cfg.samples_per_class == 0 {
        return Err(Error::validation("glyph generator needs classes and samples"));
    }
    let pixels = cfg.grid * cfg.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut classes = Vec::with_capacity(cfg.classes);
    for id in 0..cfg.classes {
        let template: Vec<bool> = (0..pixels).map(|_| rng.random_bool(0.5)).collect();
        let mut data = Vec::with_capacity(cfg.samples_per_class * pixels);
        for _ in 0..cfg.samples_per_class {
            for &bit in &template {
                let flip = cfg.flip_noise > 0.0 && rng.random_bool(cfg.flip_noise);
                data.push(if bit != flip { 1.0 } else { 0.0 });
            }
        }
        classes.push(ClassData {
            id: id as u32,
            split: Split::MetaTrain,
            samples: Tensor::matrix(cfg.samples_per_class, pixels, data)?,
        });
    }
    let mut ds = Dataset::new(pixels, classes)?;
    ds.names = (0..cfg.classes as u32)
        .map(|id| (id, format!("glyph-{id:04}")))
        .collect();
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotations_are_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = random_rotation(&mut rng, 12);
        let rrt = r.matmul(&r.transpose()).unwrap();
        let err = rrt.zip_map(&Tensor::eye(12), |a, b| a - b).max_abs();
        assert!(err < 1e-12);
    }

    #[test]
    fn zero_spread_collapses_classes() {
        let cfg = GaussianConfig {
            spread: 0.0,
            classes: 15,
            ..GaussianConfig::default()
        };
        let ds = gaussian_task_generator(&cfg).unwrap();
        for c in ds.classes() {
            let first = c.samples.row_slice(0).to_vec();
            for i in 1..c.samples.rows() {
                assert_eq!(c.samples.row_slice(i), &first[..]);
            }
        }
    }

    #[test]
    fn generators_reject_bad_configs() {
        let few = GaussianConfig {
            classes: 14,
            ..GaussianConfig::default()
        };
        assert!(gaussian_task_generator(&few).is_err());
        let small = GlyphConfig {
            grid: 7,
            ..GlyphConfig::default()
        };
        assert!(glyph_task_generator(&small).is_err());
        let noisy = GlyphConfig {
            flip_noise: 0.5,
            ..GlyphConfig::default()
        };
        assert!(glyph_task_generator(&noisy).is_err());
    }

    #[test]
    fn noiseless_glyphs_match_template() {
        let cfg = GlyphConfig {
            flip_noise: 0.0,
            classes: 4,
            ..GlyphConfig::default()
        };
        let ds = glyph_task_generator(&cfg).unwrap();
        for c in ds.classes() {
            for i in 1..c.samples.rows() {
                assert_eq!(c.samples.row_slice(i), c.samples.row_slice(0));
            }
        }
    }
}
