//! The outer meta-learning loop and everything around it.
//!
//! A [`Model`] pairs the embedding parameters `ω` with the solver
//! hyper-parameters `ρ`. [`episode_loss`] embeds an episode, fits the head on
//! the support set and scores the query set; its loss back-propagates into
//! both. [`meta_train`] drives Adam over sampled episodes with periodic
//! meta-validation, and [`evaluate`] reports mean accuracy with a 95%
//! confidence interval.

mod adam;
mod checkpoint;
pub mod heads;
mod metrics;
mod train;
mod transfer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use heads::{centroid_head, unrolled_gd_head, HeadKind, HeadSettings};
pub use metrics::{parse_metrics, MetricsRecord, MetricsWriter, METRICS_HEADER};
pub use train::{
    evaluate, learning_rate, meta_train, EvalReport, NoopObserver, TrainObserver, TrainOutcome,
    TrainState,
};
pub use transfer::{pretrain_transfer_baseline, TransferReport};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::{self, BoundEmbedding, EmbeddingConfig, EmbeddingParams};
use crate::episodes::{Episode, EpisodeSpec};
use crate::error::{Error, Result};
use crate::solvers::{BoundHyperparams, SolverHyperparams};
use crate::tensor::{grad_check, Gradients, Graph, NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopMetric {
    Loss,
    Accuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    pub widths: Vec<usize>,
    pub dropout: Vec<f64>,
    pub concat_last_two: bool,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        Self {
            widths: vec![64, 64],
            dropout: Vec::new(),
            concat_last_two: true,
        }
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub head: HeadKind,
    /// IRLS steps for the logistic heads, inner steps for unrolled-gd.
    pub steps: usize,
    pub inner_lr: f64,
    pub embedding: EmbeddingSection,
    /// Defaults to the evaluation spec with twice the ways (binary heads
    /// keep two).
    pub train_spec: Option<EpisodeSpec>,
    pub eval_spec: EpisodeSpec,
    /// Defaults to the evaluation spec.
    pub val_spec: Option<EpisodeSpec>,
    pub lr: f64,
    pub adam: AdamConfig,
    pub lr_decay: f64,
    pub decay_period: u64,
    pub patience: u64,
    pub min_improvement: f64,
    pub early_stop: StopMetric,
    pub eval_period: u64,
    pub val_episodes: usize,
    pub max_episodes: u64,
    pub learn_lambda: bool,
    pub learn_alpha: bool,
    pub learn_beta: bool,
    pub diag_lambda: bool,
    pub lambda_init: f64,
    pub alpha_init: f64,
    pub beta_init: f64,
    pub grad_clip: Option<f64>,
    pub naive_cap_bytes: Option<usize>,
    /// Episode stream seed.
    pub seed: u64,
    /// Parameter initialisation seed.
    pub init_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            head: HeadKind::R2d2,
            steps: 5,
            inner_lr: 0.01,
            embedding: EmbeddingSection::default(),
            train_spec: None,
            eval_spec: EpisodeSpec::new(5, 1, 15),
            val_spec: None,
            lr: 0.005,
            adam: AdamConfig::default(),
            lr_decay: 0.5,
            decay_period: 2000,
            patience: 20_000,
            min_improvement: 1e-4,
            early_stop: StopMetric::Loss,
            eval_period: 500,
            val_episodes: 600,
            max_episodes: 30_000,
            learn_lambda: true,
            learn_alpha: true,
            learn_beta: true,
            diag_lambda: false,
            lambda_init: 1.0,
            alpha_init: 1.0,
            beta_init: 0.0,
            grad_clip: None,
            naive_cap_bytes: None,
            seed: 0,
            init_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn train_spec(&self) -> EpisodeSpec {
        let factor = if self.head.is_binary() { 1 } else { 2 };
        self.train_spec.clone().unwrap_or_else(|| EpisodeSpec {
            ways: factor * self.eval_spec.ways,
            ..self.eval_spec.clone()
        })
    }

    pub fn val_spec(&self) -> EpisodeSpec {
        self.val_spec.clone().unwrap_or_else(|| self.eval_spec.clone())
    }

    pub fn head_settings(&self) -> HeadSettings {
        HeadSettings {
            kind: self.head,
            steps: self.steps,
            inner_lr: self.inner_lr,
            naive_cap_bytes: self.naive_cap_bytes,
        }
    }

    pub fn embedding_config(&self, input_dim: usize) -> EmbeddingConfig {
        EmbeddingConfig {
            input_dim,
            widths: self.embedding.widths.clone(),
            dropout: self.embedding.dropout.clone(),
            concat_last_two: self.embedding.concat_last_two,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::validation(format!("{field}: {why}")));
        if !(self.lr > 0.0) {
            return bad("lr", format!("must be positive, got {}", self.lr));
        }
        if self.patience == 0 {
            return bad("patience", "must be positive".into());
        }
        if self.steps == 0 {
            return bad("steps", "must be at least 1".into());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay", format!("must lie in (0, 1], got {}", self.lr_decay));
        }
        if self.decay_period == 0 || self.eval_period == 0 {
            return bad("eval_period", "periods must be positive".into());
        }
        if self.val_episodes < 2 {
            return bad("val_episodes", "need at least 2 episodes".into());
        }
        if !(self.lambda_init > 0.0) {
            return bad("lambda_init", format!("must be positive, got {}", self.lambda_init));
        }
        if self.diag_lambda && self.head != HeadKind::R2d2 {
            return bad("diag_lambda", format!("only the r2d2 head supports it, head is {}", self.head));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip", format!("must be positive, got {c}"));
            }
        }
        for (name, spec) in [
            ("train_spec", self.train_spec()),
            ("eval_spec", self.eval_spec.clone()),
            ("val_spec", self.val_spec()),
        ] {
            spec.validate()
                .map_err(|e| Error::validation(format!("{name}: {e}")))?;
            self.head
                .check_ways(spec.ways)
                .map_err(|e| Error::validation(format!("{name}: {e}")))?;
        }
        self.embedding_config(1).validate()
    }

    /// Hash of the canonical JSON form (sorted keys, no whitespace).
    pub fn hash(&self) -> u64 {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("value serializes")
    }

    pub fn initial_hyperparams(&self) -> SolverHyperparams {
        let mut hp = SolverHyperparams::new(self.lambda_init, self.alpha_init, self.beta_init);
        if self.diag_lambda {
            let e = self.embedding_config(1).output_dim();
            hp = SolverHyperparams::with_lambda_vector(e, self.lambda_init, self.alpha_init, self.beta_init);
        }
        hp.learn_lambda = self.learn_lambda && self.head.uses_lambda();
        hp.learn_alpha = self.learn_alpha && self.head.is_calibrated();
        hp.learn_beta = self.learn_beta && self.head.is_calibrated();
        hp
    }
}

/// Embedding `ω` and solver hyper-parameters `ρ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub embed: EmbeddingParams,
    pub hp: SolverHyperparams,
}

/// Graph handles for a bound [`Model`].
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub embed: BoundEmbedding,
    pub hp: BoundHyperparams,
}

impl BoundModel {
    /// Leaf ids in [`Model::tensors`] order.
    pub fn ids(&self) -> Vec<NodeId> {
        let mut ids = Vec::new();
        for (w, b) in self.embed.weights.iter().zip(&self.embed.biases) {
            ids.push(*w);
            ids.push(*b);
        }
        ids.extend([self.hp.lambda_raw, self.hp.alpha, self.hp.beta]);
        ids
    }
}

impl Model {
    pub fn init(config: &TrainConfig, input_dim: usize) -> Result<Self> {
        Ok(Self {
            embed: embed::init_params(&config.embedding_config(input_dim), config.init_seed)?,
            hp: config.initial_hyperparams(),
        })
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.embed.named().into_iter().map(|(n, _)| n).collect();
        names.extend(["solver.lambda_raw", "solver.alpha", "solver.beta"].map(String::from));
        names
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = self.embed.named().into_iter().map(|(_, t)| t.clone()).collect();
        out.push(self.hp.lambda_raw.clone());
        out.push(Tensor::scalar(self.hp.alpha));
        out.push(Tensor::scalar(self.hp.beta));
        out
    }

    /// Inverse of [`Model::tensors`].
    pub fn set_tensors(&mut self, tensors: &[Tensor]) -> Result<()> {
        let expected = 2 * self.embed.layers() + 3;
        if tensors.len() != expected {
            return Err(Error::validation(format!(
                "expected {expected} parameter tensors, got {}",
                tensors.len()
            )));
        }
        for (k, (_, slot)) in self.embed.named_mut().into_iter().enumerate() {
            if slot.shape() != tensors[k].shape() {
                return Err(Error::Dimension {
                    op: "set_tensors",
                    lhs: slot.shape().to_vec(),
                    rhs: tensors[k].shape().to_vec(),
                });
            }
            *slot = tensors[k].clone();
        }
        let k = expected - 3;
        self.hp.lambda_raw = tensors[k].clone();
        self.hp.alpha = tensors[k + 1].item();
        self.hp.beta = tensors[k + 2].item();
        Ok(())
    }

    /// Which tensors the outer loop updates, in [`Model::tensors`] order.
    pub fn learnable_mask(&self, train_embedding: bool) -> Vec<bool> {
        let mut mask = vec![train_embedding; 2 * self.embed.layers()];
        mask.extend([self.hp.learn_lambda, self.hp.learn_alpha, self.hp.learn_beta]);
        mask
    }

    pub fn bind(&self, g: &mut Graph, train_embedding: bool) -> BoundModel {
        BoundModel {
            embed: self.embed.bind(g, train_embedding),
            hp: self.hp.bind(g),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.embed.output_dim()
    }
}

/// Loss node and query accuracy of one episode.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeResult {
    pub loss: NodeId,
    pub accuracy: f64,
    pub logits: NodeId,
}

/// Builds the episode graph: embed support and query, fit the head on the
/// support set, score the query set.
pub fn episode_loss(
    g: &mut Graph,
    model: &Model,
    bound: &BoundModel,
    episode: &Episode,
    settings: &HeadSettings,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<EpisodeResult> {
    let xs_in = g.constant(episode.support.clone());
    let xq_in = g.constant(episode.query.clone());
    let xs = embed::forward(g, &model.embed, &bound.embed, xs_in, dropout_rng.as_deref_mut())?;
    let xq = embed::forward(g, &model.embed, &bound.embed, xq_in, dropout_rng)?;
    let out = heads::head_logits(g, settings, &bound.hp, xs, &episode.support_labels, xq)?;
    let (loss, accuracy) = heads::score(g, out, &episode.query_labels)?;
    if !g.value(loss).item().is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite episode loss (episode {})",
            episode.index
        )));
    }
    Ok(EpisodeResult {
        loss,
        accuracy,
        logits: out.logits,
    })
}

/// Loss and accuracy without gradients or dropout.
pub fn episode_score(model: &Model, episode: &Episode, settings: &HeadSettings) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let mut frozen = model.clone();
    frozen.hp.learn_lambda = false;
    frozen.hp.learn_alpha = false;
    frozen.hp.learn_beta = false;
    let bound = frozen.bind(&mut g, false);
    let r = episode_loss(&mut g, &frozen, &bound, episode, settings, None)?;
    Ok((g.value(r.loss).item(), r.accuracy))
}

/// Loss, accuracy and per-tensor gradients (zeros for untouched tensors).
pub fn episode_gradients(
    model: &Model,
    episode: &Episode,
    settings: &HeadSettings,
    train_embedding: bool,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, train_embedding);
    let r = episode_loss(&mut g, model, &bound, episode, settings, dropout_rng)?;
    let grads: Gradients = g.backward(r.loss)?;
    let tensors = model.tensors();
    let out = bound
        .ids()
        .iter()
        .zip(&tensors)
        .map(|(&id, t)| grads.wrt(id, t))
        .collect();
    Ok((g.value(r.loss).item(), r.accuracy, out))
}

/// Largest finite-difference relative error of the episode-loss gradient
/// for each parameter group: `omega` (embedding), `lambda_raw`, `alpha`,
/// `beta`. Dropout is off. `fault` breaks a backward rule on purpose.
pub fn episode_grad_check(
    model: &Model,
    episode: &Episode,
    settings: &HeadSettings,
    eps: f64,
    fault: bool,
) -> Result<Vec<(&'static str, f64)>> {
    let leaves = model.tensors();
    let layers = model.embed.layers();
    let report = grad_check(
        |g, ids| {
            if fault {
                g.inject_backward_fault();
            }
            let bound = BoundModel {
                embed: BoundEmbedding {
                    weights: (0..layers).map(|i| ids[2 * i]).collect(),
                    biases: (0..layers).map(|i| ids[2 * i + 1]).collect(),
                },
                hp: BoundHyperparams {
                    lambda_raw: ids[2 * layers],
                    lambda: g.softplus(ids[2 * layers]),
                    alpha: ids[2 * layers + 1],
                    beta: ids[2 * layers + 2],
                },
            };
            Ok(episode_loss(g, model, &bound, episode, settings, None)?.loss)
        },
        &leaves,
        eps,
    )?;
    let omega = report.per_leaf[..2 * layers].iter().fold(0.0f64, |a, &b| a.max(b));
    Ok(vec![
        ("omega", omega),
        ("lambda_raw", report.per_leaf[2 * layers]),
        ("alpha", report.per_leaf[2 * layers + 1]),
        ("beta", report.per_leaf[2 * layers + 2]),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_stable() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.train_spec().ways, 10);
        assert_eq!(c.val_spec(), c.eval_spec);
        assert_eq!(c.hash(), TrainConfig::default().hash());
        let mut d = c.clone();
        d.seed = 1;
        assert_ne!(c.hash(), d.hash());
        let binary = TrainConfig {
            head: HeadKind::LrD2,
            eval_spec: EpisodeSpec::new(2, 1, 15),
            ..TrainConfig::default()
        };
        binary.validate().unwrap();
        assert_eq!(binary.train_spec().ways, 2);
    }

    #[test]
    fn config_errors_name_the_field() {
        let mut c = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("lr"));
        c.lr = 0.005;
        c.head = HeadKind::LrD2;
        assert!(c.validate().unwrap_err().to_string().contains("lr-d2"));
        c.head = HeadKind::LrD2Ova;
        c.validate().unwrap();
        c.diag_lambda = true;
        assert!(c.validate().unwrap_err().to_string().contains("diag_lambda"));
    }

    #[test]
    fn model_tensor_round_trip() {
        let c = TrainConfig::default();
        let mut m = Model::init(&c, 7).unwrap();
        let mut ts = m.tensors();
        assert_eq!(ts.len(), m.names().len());
        ts.last_mut().unwrap().data_mut()[0] = 0.25;
        m.set_tensors(&ts).unwrap();
        assert_eq!(m.hp.beta, 0.25);
        assert_eq!(m.tensors(), ts);
    }
}
