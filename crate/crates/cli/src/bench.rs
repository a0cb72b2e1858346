//! Wall-clock benchmarks: ridge routes against embedding size, per-episode
//! head cost, and meta-test accuracy against base-learner steps.

use std::fmt::Write as _;
use std::time::Instant;

use metasolve::embed::embed;
use metasolve::episodes::{sample_episode, Dataset, Episode, EpisodeSpec, Split};
use metasolve::meta::heads::{head_logits, score};
use metasolve::meta::{
    episode_gradients, evaluate, meta_train, HeadKind, Model, NoopObserver, TrainConfig,
};
use metasolve::solvers::{ridge_fit_naive, ridge_fit_woodbury};
use metasolve::tensor::{Graph, Tensor};
use metasolve::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Timing {
    pub warmup: usize,
    pub repeats: usize,
}

impl Default for Timing {
    fn default() -> Self {
        Self {
            warmup: 2,
            repeats: 5,
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Median seconds per call of `f` after `timing.warmup` untimed calls.
pub fn time_median(timing: Timing, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..timing.warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(timing.repeats);
    for _ in 0..timing.repeats.max(1) {
        let start = Instant::now();
        f()?;
        samples.push(start.elapsed().as_secs_f64());
    }
    Ok(median(&samples))
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// `128, 256, …, 8192`.
pub fn default_dims() -> Vec<usize> {
    (7..=13).map(|p| 1usize << p).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RidgeRow {
    pub e: usize,
    pub n: usize,
    pub o: usize,
    pub naive_ms: f64,
    pub woodbury_ms: f64,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

/// Times the forward ridge solve on random `n×e` inputs for each `e`.
/// Gradients are not built; both routes see the same inputs.
pub fn woodbury_vs_naive(
    dims: &[usize],
    n: usize,
    o: usize,
    lambda: f64,
    timing: Timing,
    seed: u64,
) -> Result<Vec<RidgeRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(dims.len());
    for &e in dims {
        let x = gaussian(&mut rng, n, e);
        let y = gaussian(&mut rng, n, o);
        let solve = |naive: bool| {
            let mut g = Graph::new();
            let xn = g.constant(x.clone());
            let yn = g.constant(y.clone());
            let l = g.constant(Tensor::scalar(lambda));
            let w = if naive {
                ridge_fit_naive(&mut g, xn, yn, l, Some(usize::MAX))?
            } else {
                ridge_fit_woodbury(&mut g, xn, yn, l)?
            };
            std::hint::black_box(g.value(w.weights));
            Ok(())
        };
        let naive = time_median(timing, || solve(true))?;
        let woodbury = time_median(timing, || solve(false))?;
        rows.push(RidgeRow {
            e,
            n,
            o,
            naive_ms: naive * 1e3,
            woodbury_ms: woodbury * 1e3,
        });
    }
    Ok(rows)
}

pub fn ridge_csv(rows: &[RidgeRow]) -> String {
    let mut out = String::from("e,n,o,naive_ms,woodbury_ms\n");
    for r in rows {
        writeln!(out, "{},{},{},{:.6},{:.6}", r.e, r.n, r.o, r.naive_ms, r.woodbury_ms).unwrap();
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadRow {
    pub head: HeadKind,
    pub steps: Option<usize>,
    /// Head fit, query loss and backward pass on fixed embeddings.
    pub head_us: f64,
    /// The whole training step: embedding, head and backward pass.
    pub episode_us: f64,
}

/// The compared heads: lr-d2-ova at one IRLS iteration against
/// unrolled-gd at five steps.
pub fn default_head_set() -> Vec<(HeadKind, Option<usize>)> {
    vec![
        (HeadKind::Centroid, None),
        (HeadKind::R2d2, None),
        (HeadKind::LrD2Ova, Some(1)),
        (HeadKind::UnrolledGd, Some(5)),
    ]
}

struct Embedded {
    xs: Tensor,
    xq: Tensor,
    episode: Episode,
}

/// Per-episode cost of each head on `spec` episodes from the meta-train
/// split, at the model size given by `base`.
///
/// Heads take turns on every episode, starting from a different head each
/// time, so that drift in machine speed and cache state affect them alike. A round covers `batch` episodes; the first `timing.warmup`
/// rounds are discarded and the median over the remaining `timing.repeats`
/// rounds is reported.
pub fn head_costs(
    dataset: &Dataset,
    base: &TrainConfig,
    spec: &EpisodeSpec,
    heads: &[(HeadKind, Option<usize>)],
    timing: Timing,
    batch: usize,
    seed: u64,
) -> Result<Vec<HeadRow>> {
    let model = Model::init(base, dataset.input_dim())?;
    let episodes: Vec<Embedded> = (0..batch.max(1) as u64)
        .map(|i| {
            let episode = sample_episode(dataset, Split::MetaTrain, spec, seed, i)?;
            Ok(Embedded {
                xs: embed(&model.embed, &episode.support)?,
                xq: embed(&model.embed, &episode.query)?,
                episode,
            })
        })
        .collect::<Result<_>>()?;
    let configs: Vec<TrainConfig> = heads
        .iter()
        .map(|&(head, steps)| TrainConfig {
            head,
            steps: steps.unwrap_or(base.steps),
            ..base.clone()
        })
        .collect();
    let prepared: Vec<_> = configs
        .iter()
        .map(|c| {
            let mut m = model.clone();
            m.hp = c.initial_hyperparams();
            (c.head_settings(), m)
        })
        .collect();
    let mut head_samples = vec![Vec::new(); heads.len()];
    let mut episode_samples = vec![Vec::new(); heads.len()];
    for round in 0..timing.warmup + timing.repeats.max(1) {
        let mut head_time = vec![0.0; heads.len()];
        let mut episode_time = vec![0.0; heads.len()];
        for (i, ep) in episodes.iter().enumerate() {
            let order = (0..heads.len()).map(|k| (i + k) % heads.len());
            for h in order.clone() {
                let (settings, model) = &prepared[h];
                let start = Instant::now();
                let mut g = Graph::new();
                let bound = model.hp.bind(&mut g);
                let xs = g.param(ep.xs.clone());
                let xq = g.param(ep.xq.clone());
                let out = head_logits(&mut g, settings, &bound, xs, &ep.episode.support_labels, xq)?;
                let (loss, _) = score(&mut g, out, &ep.episode.query_labels)?;
                std::hint::black_box(g.backward(loss)?);
                head_time[h] += start.elapsed().as_secs_f64();
            }
            for h in order {
                let (settings, model) = &prepared[h];
                let start = Instant::now();
                std::hint::black_box(episode_gradients(model, &ep.episode, settings, true, None)?);
                episode_time[h] += start.elapsed().as_secs_f64();
            }
        }
        if round >= timing.warmup {
            for h in 0..heads.len() {
                head_samples[h].push(head_time[h] * 1e6 / episodes.len() as f64);
                episode_samples[h].push(episode_time[h] * 1e6 / episodes.len() as f64);
            }
        }
    }
    Ok(heads
        .iter()
        .enumerate()
        .map(|(h, &(head, steps))| HeadRow {
            head,
            steps,
            head_us: median(&head_samples[h]),
            episode_us: median(&episode_samples[h]),
        })
        .collect())
}

pub fn heads_csv(rows: &[HeadRow]) -> String {
    let mut out = String::from("head,steps,head_us,episode_us\n");
    for r in rows {
        let steps = r.steps.map(|s| s.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{:.3},{:.3}", r.head, steps, r.head_us, r.episode_us).unwrap();
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepsRow {
    pub head: HeadKind,
    pub steps: usize,
    pub accuracy: f64,
    pub ci95: f64,
    pub episodes: usize,
}

/// Binary 1-shot episodes with a short training budget.
pub fn binary_config() -> TrainConfig {
    TrainConfig {
        head: HeadKind::LrD2,
        eval_spec: EpisodeSpec::new(2, 1, 15),
        max_episodes: 3000,
        ..TrainConfig::default()
    }
}

/// `1, 2, 5, 10`.
pub fn default_steps() -> Vec<usize> {
    vec![1, 2, 5, 10]
}

/// Meta-trains lr-d2 and unrolled-gd at each step count (the same count
/// at training and test time) and scores the best model on meta-test.
pub fn steps_sweep(
    dataset: &Dataset,
    base: &TrainConfig,
    steps: &[usize],
    eval_episodes: usize,
    eval_seed: u64,
    threads: usize,
) -> Result<Vec<StepsRow>> {
    let mut rows = Vec::with_capacity(2 * steps.len());
    for &t in steps {
        for head in [HeadKind::LrD2, HeadKind::UnrolledGd] {
            let config = TrainConfig {
                head,
                steps: t,
                ..base.clone()
            };
            let outcome = meta_train(&config, dataset, None, None, threads, &mut NoopObserver)?;
            let report = evaluate(
                &outcome.state.best_model,
                dataset,
                Split::MetaTest,
                &config.eval_spec,
                &config.head_settings(),
                eval_episodes,
                eval_seed,
                threads,
            )?;
            rows.push(StepsRow {
                head,
                steps: t,
                accuracy: report.mean,
                ci95: report.ci95,
                episodes: eval_episodes,
            });
        }
    }
    Ok(rows)
}

pub fn steps_csv(rows: &[StepsRow]) -> String {
    let mut out = String::from("head,steps,accuracy,ci95,episodes\n");
    for r in rows {
        writeln!(out, "{},{},{:.6},{:.6},{}", r.head, r.steps, r.accuracy, r.ci95, r.episodes).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0].iter().map(|&x: &f64| (x, 3.0 * x.powf(2.5))).collect();
        assert!((log_log_slope(&pts) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn dims_span_the_sweep() {
        assert_eq!(default_dims(), vec![128, 256, 512, 1024, 2048, 4096, 8192]);
    }
}
