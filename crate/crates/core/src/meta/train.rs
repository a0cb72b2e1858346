use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{
    adam_step, episode_gradients, episode_score, AdamState, HeadSettings, MetricsRecord, Model,
    StopMetric, TrainConfig,
};
use crate::episodes::{episode_rng, sample_episode, Dataset, EpisodeSpec, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const DROPOUT_STREAM: u64 = 0x6472_6f70_6f75_7421;
const VALIDATION_STREAM: u64 = 0x7661_6c69_6461_7465;

/// `lr₀ · decay^⌊completed / period⌋`.
pub fn learning_rate(config: &TrainConfig, completed: u64) -> f64 {
    config.lr * config.lr_decay.powi((completed / config.decay_period) as i32)
}

/// Mean query accuracy over `episodes` episodes with its 95% interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean: f64,
    pub ci95: f64,
    pub mean_loss: f64,
    pub episodes: usize,
    pub spec: EpisodeSpec,
    #[serde(skip)]
    pub accuracies: Vec<f64>,
}

impl EvalReport {
    pub fn interval(&self) -> (f64, f64) {
        (self.mean - self.ci95, self.mean + self.ci95)
    }

    /// Whether the two 95% intervals are disjoint.
    pub fn separated_from(&self, other: &EvalReport) -> bool {
        let (a_lo, a_hi) = self.interval();
        let (b_lo, b_hi) = other.interval();
        a_lo > b_hi || b_lo > a_hi
    }
}

/// Scores `episodes` episodes of `split` without dropout.
///
/// Episode `i` is drawn from stream `(seed, i)`. Work is spread over
/// `threads` workers and reduced in episode order, so the report does not
/// depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    split: Split,
    spec: &EpisodeSpec,
    settings: &HeadSettings,
    episodes: usize,
    seed: u64,
    threads: usize,
) -> Result<EvalReport> {
    if episodes < 2 {
        return Err(Error::validation("evaluation needs at least 2 episodes"));
    }
    dataset.check_spec(split, spec)?;
    settings.kind.check_ways(spec.ways)?;
    let run = |i: usize| -> Result<(f64, f64)> {
        let ep = sample_episode(dataset, split, spec, seed, i as u64)?;
        episode_score(model, &ep, settings)
    };
    let workers = threads.clamp(1, episodes);
    let results: Vec<Result<(f64, f64)>> = if workers == 1 {
        (0..episodes).map(run).collect()
    } else {
        let mut slots: Vec<Option<Result<(f64, f64)>>> = (0..episodes).map(|_| None).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let run = &run;
                    s.spawn(move || {
                        (w..episodes)
                            .step_by(workers)
                            .map(|i| (i, run(i)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("evaluation worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|r| r.expect("every episode scored")).collect()
    };
    let mut losses = Vec::with_capacity(episodes);
    let mut accuracies = Vec::with_capacity(episodes);
    for r in results {
        let (l, a) = r?;
        losses.push(l);
        accuracies.push(a);
    }
    let m = episodes as f64;
    let mean = accuracies.iter().sum::<f64>() / m;
    let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (m - 1.0);
    Ok(EvalReport {
        mean,
        ci95: 1.96 * var.sqrt() / m.sqrt(),
        mean_loss: losses.iter().sum::<f64>() / m,
        episodes,
        spec: spec.clone(),
        accuracies,
    })
}

/// Resumable training state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    /// Completed training episodes.
    pub episode: u64,
    /// Best meta-validation score so far, lower is better.
    pub best_metric: f64,
    /// Episode at which `best_metric` was reached.
    pub best_episode: u64,
    pub best_model: Model,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        Self {
            adam: AdamState::new(&model.tensors()),
            best_model: model.clone(),
            model,
            episode: 0,
            best_metric: f64::INFINITY,
            best_episode: 0,
        }
    }
}

/// Receives the metrics stream and periodic state snapshots.
pub trait TrainObserver {
    fn record(&mut self, _record: &MetricsRecord) -> Result<()> {
        Ok(())
    }

    /// Called after each meta-validation round.
    fn checkpoint(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

impl<F: FnMut(&MetricsRecord)> TrainObserver for F {
    fn record(&mut self, record: &MetricsRecord) -> Result<()> {
        self(record);
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub stopped_early: bool,
}

/// Runs (or continues) meta-training until `max_episodes`, early stopping,
/// or `stop_after` completed episodes, whichever comes first.
pub fn meta_train(
    config: &TrainConfig,
    dataset: &Dataset,
    resume: Option<TrainState>,
    stop_after: Option<u64>,
    threads: usize,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_spec = config.train_spec();
    let val_spec = config.val_spec();
    dataset.check_spec(Split::MetaTrain, &train_spec)?;
    dataset.check_spec(Split::MetaVal, &val_spec)?;
    let settings = config.head_settings();

    let mut state = match resume {
        Some(s) => s,
        None => TrainState::new(Model::init(config, dataset.input_dim())?),
    };
    if state.model.embed.config.input_dim != dataset.input_dim() {
        return Err(Error::validation(format!(
            "model expects inputs of size {} but the dataset has {}",
            state.model.embed.config.input_dim,
            dataset.input_dim()
        )));
    }
    let names = state.model.names();
    let mask = state.model.learnable_mask(true);
    let limit = stop_after.map_or(config.max_episodes, |s| s.min(config.max_episodes));
    let start = Instant::now();
    let mut stopped_early = false;

    while state.episode < limit {
        let index = state.episode;
        let lr = learning_rate(config, index);
        let episode = sample_episode(dataset, Split::MetaTrain, &train_spec, config.seed, index)?;
        let mut dropout = episode_rng(config.seed ^ DROPOUT_STREAM, index);
        let (loss, accuracy, mut grads) =
            episode_gradients(&state.model, &episode, &settings, true, Some(&mut dropout))?;
        for (g, &learn) in grads.iter_mut().zip(&mask) {
            if !learn {
                *g = Tensor::zeros(g.shape());
            }
        }
        if let Some(clip) = config.grad_clip {
            let norm = grads.iter().map(|g| g.frobenius().powi(2)).sum::<f64>().sqrt();
            if norm > clip {
                grads = grads.iter().map(|g| g.scale(clip / norm)).collect();
            }
        }
        let mut params = state.model.tensors();
        adam_step(&mut params, &names, &grads, &mut state.adam, lr, &config.adam)?;
        state.model.set_tensors(&params)?;
        state.episode += 1;

        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        observer.record(&MetricsRecord::new(
            state.episode,
            Split::MetaTrain,
            loss,
            accuracy,
            &state.model,
            lr,
            wall_ms,
        ))?;

        if state.episode % config.eval_period == 0 {
            let report = evaluate(
                &state.model,
                dataset,
                Split::MetaVal,
                &val_spec,
                &settings,
                config.val_episodes,
                config.seed ^ VALIDATION_STREAM,
                threads,
            )?;
            let wall_ms = start.elapsed().as_secs_f64() * 1e3;
            observer.record(&MetricsRecord::new(
                state.episode,
                Split::MetaVal,
                report.mean_loss,
                report.mean,
                &state.model,
                lr,
                wall_ms,
            ))?;
            let metric = match config.early_stop {
                StopMetric::Loss => report.mean_loss,
                StopMetric::Accuracy => -report.mean,
            };
            if metric < state.best_metric - config.min_improvement {
                state.best_metric = metric;
                state.best_episode = state.episode;
                state.best_model = state.model.clone();
            }
            observer.checkpoint(&state)?;
            if state.episode - state.best_episode >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }
    if !state.best_metric.is_finite() {
        state.best_model = state.model.clone();
    }
    Ok(TrainOutcome {
        state,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_halves_every_period() {
        let c = TrainConfig::default();
        assert_eq!(learning_rate(&c, 0), 0.005);
        assert_eq!(learning_rate(&c, 1999), 0.005);
        assert_eq!(learning_rate(&c, 2000), 0.0025);
        assert_eq!(learning_rate(&c, 4000), 0.00125);
        assert_eq!(c.patience, 20_000);
    }

    #[test]
    fn separation_test() {
        let r = |mean, ci95| EvalReport {
            mean,
            ci95,
            mean_loss: 0.0,
            episodes: 2,
            spec: EpisodeSpec::new(2, 1, 1),
            accuracies: Vec::new(),
        };
        assert!(r(0.8, 0.01).separated_from(&r(0.7, 0.01)));
        assert!(!r(0.8, 0.06).separated_from(&r(0.7, 0.05)));
    }
}
