//! Few-shot episodes over class-labelled datasets.
//!
//! A [`Dataset`] holds every class with its samples and the split the class
//! belongs to. Episodes are drawn within one split: `N` classes without
//! replacement, then `K + Q` samples per class without replacement, the
//! first `K` forming the support set and the rest the query set.

mod epds;
mod generators;

pub use epds::{
    decode as decode_dataset, encode as encode_dataset, load_dataset, save_dataset, sidecar_path,
    write_atomic,
};
pub use generators::{gaussian_task_generator, glyph_task_generator, GaussianConfig, GlyphConfig};

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    MetaTrain,
    MetaVal,
    MetaTest,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::MetaTrain, Split::MetaVal, Split::MetaTest];

    pub fn code(self) -> u8 {
        match self {
            Split::MetaTrain => 0,
            Split::MetaVal => 1,
            Split::MetaTest => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::MetaTrain => "train",
            Split::MetaVal => "val",
            Split::MetaTest => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" | "meta-train" => Ok(Split::MetaTrain),
            "val" | "meta-val" => Ok(Split::MetaVal),
            "test" | "meta-test" => Ok(Split::MetaTest),
            other => Err(Error::validation(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassData {
    pub id: u32,
    pub split: Split,
    /// `count × m`, one sample per row.
    pub samples: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    input_dim: usize,
    classes: Vec<ClassData>,
    /// Optional human-readable class names, keyed by class id.
    pub names: BTreeMap<u32, String>,
}

impl Dataset {
    pub fn new(input_dim: usize, classes: Vec<ClassData>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::validation("input dimension must be positive"));
        }
        let mut seen = BTreeSet::new();
        for c in &classes {
            if !seen.insert(c.id) {
                return Err(Error::validation(format!("duplicate class id {}", c.id)));
            }
            if c.samples.ndim() != 2 || c.samples.cols() != input_dim {
                return Err(Error::Dimension {
                    op: "dataset",
                    lhs: vec![c.samples.rows(), input_dim],
                    rhs: c.samples.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            input_dim,
            classes,
            names: BTreeMap::new(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn classes(&self) -> &[ClassData] {
        &self.classes
    }

    /// Positions (into [`Dataset::classes`]) of the classes in `split`.
    pub fn split_classes(&self, split: Split) -> Vec<usize> {
        (0..self.classes.len())
            .filter(|&i| self.classes[i].split == split)
            .collect()
    }

    pub fn split_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for c in &self.classes {
            counts[c.split.code() as usize] += 1;
        }
        counts
    }

    pub fn min_samples(&self, split: Split) -> usize {
        self.classes
            .iter()
            .filter(|c| c.split == split)
            .map(|c| c.samples.rows())
            .min()
            .unwrap_or(0)
    }

    /// Checks that `split` can host episodes of `spec`.
    pub fn check_spec(&self, split: Split, spec: &EpisodeSpec) -> Result<()> {
        spec.validate()?;
        let have = self.split_classes(split).len();
        if have < spec.ways {
            return Err(Error::validation(format!(
                "{split} split has {have} classes but episodes need {} ways",
                spec.ways
            )));
        }
        let need = spec.samples_per_class();
        let min = self.min_samples(split);
        if min < need {
            return Err(Error::validation(format!(
                "{split} split has a class with {min} samples but episodes need {need}"
            )));
        }
        Ok(())
    }
}

/// Reassigns every class to a split by a seeded shuffle.
///
/// Split sizes are `round(f·C)` for meta-train and meta-val, with the rest in
/// meta-test. Every split must end up with at least `min_ways` classes.
pub fn make_splits(
    dataset: &Dataset,
    fractions: [f64; 3],
    seed: u64,
    min_ways: usize,
) -> Result<Dataset> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::validation(format!(
            "split fractions must be non-negative and sum to 1, got {fractions:?}"
        )));
    }
    let total = dataset.classes.len();
    let train = ((fractions[0] * total as f64).round() as usize).min(total);
    let val = ((fractions[1] * total as f64).round() as usize).min(total - train);
    let sizes = [train, val, total - train - val];
    if sizes.iter().any(|&s| s < min_ways) {
        return Err(Error::validation(format!(
            "{total} classes give split sizes {sizes:?}; each split needs at least {min_ways}"
        )));
    }
    let mut order: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..total).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut out = dataset.clone();
    for (rank, &pos) in order.iter().enumerate() {
        out.classes[pos].split = if rank < sizes[0] {
            Split::MetaTrain
        } else if rank < sizes[0] + sizes[1] {
            Split::MetaVal
        } else {
            Split::MetaTest
        };
    }
    Ok(out)
}

/// Shape of an episode: `N` ways, `K` shots and `Q` queries per class.
///
/// With `random_shots` set to `(k_min, k_max)`, `K` is drawn uniformly per
/// episode and `Q = S/N − K`, keeping the batch size `S = N·(K + Q)` fixed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_shots: Option<(usize, usize)>,
}

impl EpisodeSpec {
    pub fn new(ways: usize, shots: usize, queries: usize) -> Self {
        Self {
            ways,
            shots,
            queries,
            random_shots: None,
        }
    }

    /// Random-shot spec with fixed batch size `batch`.
    pub fn random_shots(ways: usize, k_min: usize, k_max: usize, batch: usize) -> Result<Self> {
        if ways == 0 || batch % ways != 0 {
            return Err(Error::validation(format!(
                "batch size {batch} is not a multiple of {ways} ways"
            )));
        }
        let spec = Self {
            ways,
            shots: k_min,
            queries: batch / ways - k_min,
            random_shots: Some((k_min, k_max)),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn batch_size(&self) -> usize {
        self.ways * (self.shots + self.queries)
    }

    /// Samples needed from each class: `K + Q`, constant under random shots.
    pub fn samples_per_class(&self) -> usize {
        self.shots + self.queries
    }

    pub fn validate(&self) -> Result<()> {
        if self.ways < 2 {
            return Err(Error::validation(format!("ways must be at least 2, got {}", self.ways)));
        }
        if self.shots == 0 || self.queries == 0 {
            return Err(Error::validation(format!(
                "shots and queries must be positive, got K={} Q={}",
                self.shots, self.queries
            )));
        }
        if let Some((lo, hi)) = self.random_shots {
            let per_class = self.samples_per_class();
            if lo == 0 || lo > hi || hi >= per_class {
                return Err(Error::validation(format!(
                    "random shots range {lo}..={hi} must be non-empty, positive and leave a query (S/N = {per_class})"
                )));
            }
        }
        Ok(())
    }

    /// `(K, Q)` for one episode.
    pub fn draw_shots<R: Rng>(&self, rng: &mut R) -> (usize, usize) {
        match self.random_shots {
            None => (self.shots, self.queries),
            Some((lo, hi)) => {
                let k = rng.random_range(lo..=hi);
                (k, self.samples_per_class() - k)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// `N·K × m`, class-major.
    pub support: Tensor,
    /// `N·K × N` one-hot.
    pub support_labels: Tensor,
    /// `N·Q × m`, class-major.
    pub query: Tensor,
    /// `N·Q × N` one-hot.
    pub query_labels: Tensor,
    /// Source class ids; label `c` refers to `classes[c]`.
    pub classes: Vec<u32>,
    pub shots: usize,
    pub queries: usize,
    pub seed: u64,
    pub index: u64,
}

impl Episode {
    pub fn ways(&self) -> usize {
        self.classes.len()
    }

    /// Episode-local class of every query row.
    pub fn query_targets(&self) -> Vec<usize> {
        self.query_labels.argmax_rows()
    }
}

/// Generator for episode `index` of the stream identified by `seed`.
///
/// Each index selects an independent ChaCha stream, so episodes can be drawn
/// in any order or on any thread and still match.
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn sample_episode(
    dataset: &Dataset,
    split: Split,
    spec: &EpisodeSpec,
    seed: u64,
    index: u64,
) -> Result<Episode> {
    dataset.check_spec(split, spec)?;
    let mut rng = episode_rng(seed, index);
    let (k, q) = spec.draw_shots(&mut rng);
    let pool = dataset.split_classes(split);
    let n = spec.ways;
    let m = dataset.input_dim();

    let chosen: Vec<usize> = sample_indices(&mut rng, pool.len(), n)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    let mut support = Vec::with_capacity(n * k * m);
    let mut query = Vec::with_capacity(n * q * m);
    let mut support_labels = Tensor::zeros(&[n * k, n]);
    let mut query_labels = Tensor::zeros(&[n * q, n]);
    for (c, &pos) in chosen.iter().enumerate() {
        let samples = &dataset.classes[pos].samples;
        let picks = sample_indices(&mut rng, samples.rows(), k + q).into_vec();
        for (j, &row) in picks.iter().enumerate() {
            if j < k {
                support.extend_from_slice(samples.row_slice(row));
                support_labels.set(c * k + j, c, 1.0);
            } else {
                query.extend_from_slice(samples.row_slice(row));
                query_labels.set(c * q + j - k, c, 1.0);
            }
        }
    }
    Ok(Episode {
        support: Tensor::matrix(n * k, m, support)?,
        support_labels,
        query: Tensor::matrix(n * q, m, query)?,
        query_labels,
        classes: chosen.iter().map(|&p| dataset.classes[p].id).collect(),
        shots: k,
        queries: q,
        seed,
        index,
    })
}
