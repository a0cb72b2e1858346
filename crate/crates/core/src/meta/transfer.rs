//! Pretrain-then-adapt baseline: train the embedding as an ordinary
//! classifier over all meta-train classes, then freeze it and put the ridge
//! head on top.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    adam_step, evaluate, learning_rate, AdamState, EvalReport, HeadKind, Model, TrainConfig,
};
use crate::embed::{self, init_params};
use crate::episodes::{episode_rng, Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    /// Stage-one accuracy on meta-train samples.
    pub stage1_accuracy: f64,
    /// `1 / number of meta-train classes`.
    pub chance: f64,
    pub eval: EvalReport,
}

const PRETRAIN_STREAM: u64 = 0x7072_6574_7261_696e;

/// Runs both stages and evaluates the frozen embedding on `eval_split`.
///
/// Stage one takes `steps` Adam steps on mini-batches of `batch` samples.
/// The baseline is rejected unless stage-one accuracy reaches five times
/// chance.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_transfer_baseline(
    config: &TrainConfig,
    dataset: &Dataset,
    steps: u64,
    batch: usize,
    eval_split: Split,
    eval_episodes: usize,
    eval_seed: u64,
    threads: usize,
) -> Result<TransferReport> {
    config.validate()?;
    let classes = dataset.split_classes(Split::MetaTrain);
    if classes.len() < 2 || batch == 0 {
        return Err(Error::validation("pretraining needs two meta-train classes and a batch"));
    }
    let pool: Vec<(usize, usize)> = classes
        .iter()
        .enumerate()
        .flat_map(|(label, &pos)| {
            (0..dataset.classes()[pos].samples.rows()).map(move |row| (label, row))
        })
        .collect();
    let c = classes.len();
    let embed_cfg = config.embedding_config(dataset.input_dim());
    let mut phi = init_params(&embed_cfg, config.init_seed)?;
    let e = phi.output_dim();
    let a = (6.0 / (e + c) as f64).sqrt();
    let mut init_rng = episode_rng(config.init_seed ^ PRETRAIN_STREAM, u64::MAX);
    let mut head_w =
        Tensor::matrix(e, c, (0..e * c).map(|_| init_rng.random_range(-a..a)).collect())?;
    let mut head_b = Tensor::zeros(&[1, c]);

    let gather = |picks: &[(usize, usize)]| -> Result<(Tensor, Tensor)> {
        let m = dataset.input_dim();
        let mut x = Vec::with_capacity(picks.len() * m);
        let mut y = Tensor::zeros(&[picks.len(), c]);
        for (i, &(label, row)) in picks.iter().enumerate() {
            x.extend_from_slice(dataset.classes()[classes[label]].samples.row_slice(row));
            y.set(i, label, 1.0);
        }
        Ok((Tensor::matrix(picks.len(), m, x)?, y))
    };

    let mut names: Vec<String> = phi.named().into_iter().map(|(n, _)| n).collect();
    names.extend(["head.w".to_string(), "head.b".to_string()]);
    let mut params: Vec<Tensor> = phi.named().into_iter().map(|(_, t)| t.clone()).collect();
    params.extend([head_w.clone(), head_b.clone()]);
    let mut adam = AdamState::new(&params);

    for step in 0..steps {
        let mut rng = episode_rng(config.seed ^ PRETRAIN_STREAM, step);
        let picks: Vec<(usize, usize)> = (0..batch)
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect();
        let (x, y) = gather(&picks)?;
        let mut g = Graph::new();
        let bound = phi.bind(&mut g, true);
        let w = g.param(head_w.clone());
        let b = g.param(head_b.clone());
        let xin = g.constant(x);
        let feats = embed::forward(&mut g, &phi, &bound, xin, Some(&mut rng))?;
        let z = g.matmul(feats, w)?;
        let logits = g.add(z, b)?;
        let loss = g.softmax_cross_entropy(logits, &y)?;
        let grads = g.backward(loss)?;
        let mut ids = Vec::new();
        for (wi, bi) in bound.weights.iter().zip(&bound.biases) {
            ids.push(*wi);
            ids.push(*bi);
        }
        ids.extend([w, b]);
        let grads: Vec<Tensor> = ids.iter().zip(&params).map(|(&id, p)| grads.wrt(id, p)).collect();
        adam_step(&mut params, &names, &grads, &mut adam, learning_rate(config, step), &config.adam)?;
        for (k, (_, slot)) in phi.named_mut().into_iter().enumerate() {
            *slot = params[k].clone();
        }
        head_w = params[params.len() - 2].clone();
        head_b = params[params.len() - 1].clone();
    }

    let check: Vec<(usize, usize)> = {
        let mut rng = episode_rng(config.seed ^ PRETRAIN_STREAM, u64::MAX);
        (0..pool.len().min(4000))
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect()
    };
    let (x, y) = gather(&check)?;
    let mut logits = embed::embed(&phi, &x)?.matmul(&head_w)?;
    for i in 0..logits.rows() {
        for k in 0..c {
            let v = logits.get(i, k) + head_b.data()[k];
            logits.set(i, k, v);
        }
    }
    let correct = logits
        .argmax_rows()
        .into_iter()
        .enumerate()
        .filter(|&(i, k)| y.get(i, k) == 1.0)
        .count();
    let stage1_accuracy = correct as f64 / check.len() as f64;
    let chance = 1.0 / c as f64;
    if stage1_accuracy < 5.0 * chance {
        return Err(Error::Numerical(format!(
            "pretraining reached {stage1_accuracy:.3} accuracy, below five times chance ({:.3})",
            5.0 * chance
        )));
    }

    let mut hp_cfg = config.clone();
    hp_cfg.head = HeadKind::R2d2;
    hp_cfg.diag_lambda = false;
    let model = Model {
        embed: phi,
        hp: hp_cfg.initial_hyperparams(),
    };
    let eval = evaluate(
        &model,
        dataset,
        eval_split,
        &config.eval_spec,
        &hp_cfg.head_settings(),
        eval_episodes,
        eval_seed,
        threads,
    )?;
    Ok(TransferReport {
        stage1_accuracy,
        chance,
        eval,
    })
}
