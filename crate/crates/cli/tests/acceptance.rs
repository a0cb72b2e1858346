//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.
//!
//! Tests share one lock so that timings never overlap with training runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use metasolve::episodes::{
    gaussian_task_generator, make_splits, sample_episode, Dataset, EpisodeSpec, GaussianConfig,
    Split,
};
use metasolve::meta::{
    episode_grad_check, evaluate, meta_train, parse_metrics, pretrain_transfer_baseline,
    EvalReport, HeadKind, Model, NoopObserver, TrainConfig,
};
use metasolve::solvers::{irls_fit, ridge_fit_diag, ridge_fit_naive, ridge_fit_woodbury};
use metasolve::tensor::{Graph, Tensor};
use metasolve_cli::bench::{self, Timing};
use metasolve_cli::{gradcheck_fixture, load_config, DEFAULT_SPLITS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: &str, pass: bool, detail: String) {
    println!("{id}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{id} failed: {detail}");
}

const EVAL_EPISODES: usize = 2000;
const EVAL_SEED: u64 = 11;

fn repo_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn benchmark() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| {
        let raw = gaussian_task_generator(&GaussianConfig::default()).unwrap();
        make_splits(&raw, DEFAULT_SPLITS, 0, 5).unwrap()
    })
}

fn r2d2_config() -> TrainConfig {
    load_config(&repo_path("configs/r2d2_gaussian.toml")).unwrap()
}

fn meta_test(model: &Model, config: &TrainConfig) -> EvalReport {
    evaluate(
        model,
        benchmark(),
        Split::MetaTest,
        &config.eval_spec,
        &config.head_settings(),
        EVAL_EPISODES,
        EVAL_SEED,
        1,
    )
    .unwrap()
}

fn train_and_test(config: &TrainConfig) -> (EvalReport, f64) {
    let start = Instant::now();
    let outcome = meta_train(config, benchmark(), None, None, 1, &mut NoopObserver).unwrap();
    let secs = start.elapsed().as_secs_f64();
    (meta_test(&outcome.state.best_model, config), secs)
}

/// The meta-trained model from the shipped config, shared by two tests.
fn trained_r2d2() -> &'static (EvalReport, f64) {
    static RUN: OnceLock<(EvalReport, f64)> = OnceLock::new();
    RUN.get_or_init(|| train_and_test(&r2d2_config()))
}

fn fmt(r: &EvalReport) -> String {
    format!("{:.4}±{:.4}", r.mean, r.ci95)
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..=hi.ln())).exp()
}

struct RidgeInstance {
    x: Tensor,
    y: Tensor,
    lambda: f64,
}

fn ridge_instances() -> Vec<RidgeInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    (0..100)
        .map(|_| {
            let n = rng.random_range(2..=25);
            let e = log_uniform(&mut rng, 16.0, 4096.0).round() as usize;
            let o = rng.random_range(2..=20);
            let lambda = log_uniform(&mut rng, 1e-3, 1e2);
            RidgeInstance {
                x: randn(&mut rng, n, e),
                y: randn(&mut rng, n, o),
                lambda,
            }
        })
        .collect()
}

enum Route {
    Naive,
    Woodbury,
    Diag,
}

fn ridge(inst: &RidgeInstance, route: Route) -> Tensor {
    let mut g = Graph::new();
    let x = g.constant(inst.x.clone());
    let y = g.constant(inst.y.clone());
    let w = match route {
        Route::Naive => {
            let l = g.constant(Tensor::scalar(inst.lambda));
            ridge_fit_naive(&mut g, x, y, l, Some(usize::MAX)).unwrap()
        }
        Route::Woodbury => {
            let l = g.constant(Tensor::scalar(inst.lambda));
            ridge_fit_woodbury(&mut g, x, y, l).unwrap()
        }
        Route::Diag => {
            let l = g.constant(Tensor::full(&[1, inst.x.cols()], inst.lambda));
            ridge_fit_diag(&mut g, x, y, l).unwrap()
        }
    };
    g.value(w.weights).clone()
}

fn rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.zip_map(b, |p, q| p - q).frobenius() / b.frobenius()
}

#[test]
fn woodbury_matches_naive() {
    let _guard = serial();
    let start = Instant::now();
    let worst = ridge_instances()
        .iter()
        .map(|inst| rel_diff(&ridge(inst, Route::Woodbury), &ridge(inst, Route::Naive)))
        .fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    report(
        "woodbury-identity",
        worst < 1e-8 && secs < 30.0,
        format!("max rel. Frobenius diff {worst:.2e} (< 1e-8) over 100 instances in {secs:.1}s (< 30s)"),
    );
}

#[test]
fn diag_route_reduces_to_scalar() {
    let _guard = serial();
    let worst = ridge_instances()
        .iter()
        .map(|inst| rel_diff(&ridge(inst, Route::Diag), &ridge(inst, Route::Woodbury)))
        .fold(0.0, f64::max);
    report("diag-lambda", worst < 1e-10, format!("max rel. diff constant diag(λ) vs scalar {worst:.2e} (< 1e-10)"));
}

#[test]
fn episode_loss_gradients() {
    let _guard = serial();
    let start = Instant::now();
    let mut worst = Vec::new();
    for (head, steps) in [(HeadKind::R2d2, 1), (HeadKind::LrD2, 1), (HeadKind::LrD2, 3), (HeadKind::LrD2, 5)] {
        let (model, episode, config) = gradcheck_fixture(head, steps, 0).unwrap();
        let groups = episode_grad_check(&model, &episode, &config.head_settings(), 1e-6, false).unwrap();
        let max = groups.iter().map(|g| g.1).fold(0.0, f64::max);
        let label = if head == HeadKind::R2d2 { "r2d2".to_string() } else { format!("lr-d2 T={steps}") };
        worst.push((label, max));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.iter().all(|w| w.1 < 1e-4) && secs < 120.0;
    let detail: Vec<String> = worst.iter().map(|(l, m)| format!("{l} {m:.1e}")).collect();
    report("differentiability", pass, format!("max rel. err over ω, λ-raw, α, β: {} (< 1e-4) in {secs:.1}s", detail.join(", ")));
}

fn logistic_grad(x: &Tensor, y: &[f64], w: &[f64], lambda: f64) -> Vec<f64> {
    let mut grad: Vec<f64> = w.iter().map(|v| lambda * v).collect();
    for (i, &yi) in y.iter().enumerate() {
        let xi = x.row_slice(i);
        let m: f64 = xi.iter().zip(w).map(|(a, b)| a * b).sum();
        let coef = -yi / (1.0 + (yi * m).exp());
        for (gj, xj) in grad.iter_mut().zip(xi) {
            *gj += coef * xj;
        }
    }
    grad
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Gradient descent with step `1/L`, `L = σ_max(X)²/4 + λ`, run to a
/// gradient norm of 1e-12.
fn gd_oracle(x: &Tensor, y: &[f64], lambda: f64) -> Vec<f64> {
    let xtx = x.transpose().matmul(x).unwrap();
    let mut v = vec![1.0; x.cols()];
    let mut sigma2 = 0.0;
    for _ in 0..200 {
        let t = xtx.matmul(&Tensor::column(&v)).unwrap();
        sigma2 = t.frobenius() / Tensor::column(&v).frobenius();
        v = t.scale(1.0 / t.frobenius()).into_data();
    }
    let step = 1.0 / (1.01 * sigma2 / 4.0 + lambda);
    let mut w = vec![0.0; x.cols()];
    for _ in 0..5_000_000 {
        let g = logistic_grad(x, y, &w, lambda);
        if inf_norm(&g) < 1e-12 {
            break;
        }
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= step * gi;
        }
    }
    w
}

#[test]
fn irls_reaches_the_logistic_optimum() {
    let _guard = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut max_dw, mut max_grad) = (0.0_f64, 0.0_f64);
    for _ in 0..50 {
        let n = rng.random_range(2..=20);
        let e = rng.random_range(1..=64);
        let lambda = log_uniform(&mut rng, 0.1, 10.0);
        let x = randn(&mut rng, n, e);
        let mut y: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        y[0] = 1.0;
        y[1] = -1.0;
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let l = g.constant(Tensor::scalar(lambda));
        let head = irls_fit(&mut g, xn, &Tensor::column(&y), l, 10).unwrap();
        let w = g.value(head.weights).data().to_vec();
        let oracle = gd_oracle(&x, &y, lambda);
        let dw: Vec<f64> = w.iter().zip(&oracle).map(|(a, b)| a - b).collect();
        max_dw = max_dw.max(inf_norm(&dw));
        max_grad = max_grad.max(inf_norm(&logistic_grad(&x, &y, &w, lambda)));
    }
    report(
        "irls-optimality",
        max_dw < 1e-3 && max_grad < 1e-6,
        format!("over 50 instances: max ‖Δw‖∞ {max_dw:.2e} (< 1e-3), max ‖∇‖∞ at IRLS T=10 {max_grad:.2e} (< 1e-6)"),
    );
}

#[test]
fn efficiency_ordering() {
    let _guard = serial();
    let timing = Timing { warmup: 2, repeats: 5 };
    let rows = bench::woodbury_vs_naive(&bench::default_dims(), 5, 5, 1.0, timing, 0).unwrap();
    for r in &rows {
        println!("  e={:<5} naive {:>10.4} ms  woodbury {:>8.4} ms", r.e, r.naive_ms, r.woodbury_ms);
    }
    let tail: Vec<_> = rows.iter().filter(|r| r.e >= 512).collect();
    let naive = bench::log_log_slope(&tail.iter().map(|r| (r.e as f64, r.naive_ms)).collect::<Vec<_>>());
    let wood = bench::log_log_slope(&tail.iter().map(|r| (r.e as f64, r.woodbury_ms)).collect::<Vec<_>>());
    let below = tail.iter().all(|r| r.woodbury_ms <= r.naive_ms);

    let config = r2d2_config();
    let heads = bench::head_costs(
        benchmark(),
        &config,
        &config.eval_spec,
        &bench::default_head_set(),
        Timing { warmup: 2, repeats: 11 },
        200,
        0,
    )
    .unwrap();
    let us: Vec<f64> = heads.iter().map(|h| h.head_us).collect();
    for h in &heads {
        println!("  {:<12} head {:>7.1} µs  episode {:>7.1} µs", h.head.as_str(), h.head_us, h.episode_us);
    }
    let ordered = us[0] <= us[1] && us[1] < us[2] && us[2] <= us[3];
    report(
        "efficiency",
        naive >= 2.0 && wood <= 1.3 && below && ordered,
        format!(
            "slopes over e=512..8192: naive {naive:.2} (≥ 2), woodbury {wood:.2} (≤ 1.3); woodbury ≤ naive: {below}; \
             centroid {:.1} ≤ r2d2 {:.1} < lr-d2-ova(T=1) {:.1} ≤ unrolled-gd(5) {:.1} µs: {ordered}",
            us[0], us[1], us[2], us[3]
        ),
    );
}

fn raw_nearest_centroid(ds: &Dataset) -> f64 {
    let spec = EpisodeSpec::new(5, 1, 15);
    let mut correct = 0usize;
    let mut total = 0usize;
    for i in 0..EVAL_EPISODES as u64 {
        let ep = sample_episode(ds, Split::MetaTest, &spec, EVAL_SEED, i).unwrap();
        let targets = ep.query_targets();
        for (q, &t) in targets.iter().enumerate() {
            let xq = ep.query.row_slice(q);
            let best = (0..ep.ways())
                .map(|c| {
                    let xs = ep.support.row_slice(c);
                    let d: f64 = xq.iter().zip(xs).map(|(a, b)| (a - b).powi(2)).sum();
                    (c, d)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            correct += usize::from(best == t);
            total += 1;
        }
    }
    correct as f64 / total as f64
}

#[derive(serde::Deserialize)]
struct Pilot {
    meta_trained: f64,
    frozen_random: f64,
    transfer: f64,
    tolerance: f64,
}

#[test]
fn meta_learning_beats_baselines() {
    let _guard = serial();
    let config = r2d2_config();
    let raw = raw_nearest_centroid(benchmark());
    let (trained, secs) = trained_r2d2();
    let frozen = meta_test(&Model::init(&config, benchmark().input_dim()).unwrap(), &config);

    let mut selected = (0, f64::NEG_INFINITY);
    for steps in [100, 300, 1000, 3000] {
        let val = pretrain_transfer_baseline(&config, benchmark(), steps, 64, Split::MetaVal, 600, 5, 1).unwrap();
        println!("  transfer {steps:>4} steps: stage-1 acc {:.3}, meta-val {:.4}", val.stage1_accuracy, val.eval.mean);
        if val.eval.mean > selected.1 {
            selected = (steps, val.eval.mean);
        }
    }
    let transfer = pretrain_transfer_baseline(
        &config,
        benchmark(),
        selected.0,
        64,
        Split::MetaTest,
        EVAL_EPISODES,
        EVAL_SEED,
        1,
    )
    .unwrap()
    .eval;

    let pilot: Pilot = serde_json::from_str(include_str!("fixtures/gaussian_pilot.json")).unwrap();
    let drift = [
        (trained.mean - pilot.meta_trained).abs(),
        (frozen.mean - pilot.frozen_random).abs(),
        (transfer.mean - pilot.transfer).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);

    let calibrated = (0.55..=0.70).contains(&raw);
    let a = trained.mean - frozen.mean >= 0.10 && trained.separated_from(&frozen);
    let b = trained.mean > transfer.mean && trained.separated_from(&transfer);
    report(
        "meta-learning",
        calibrated && a && b && *secs < 600.0 && drift <= pilot.tolerance,
        format!(
            "raw nearest-centroid {raw:.4} (55-70%); meta-trained {} in {secs:.0}s (< 600s) vs frozen {} (≥ +0.10, disjoint: {a}) \
             vs transfer@{} {} (disjoint: {b}); max drift from pilot fixture {drift:.4} (≤ {})",
            fmt(trained),
            fmt(&frozen),
            selected.0,
            fmt(&transfer),
            pilot.tolerance
        ),
    );
}

#[test]
fn irls_steps_not_inferior_to_gradient_steps() {
    let _guard = serial();
    let base = bench::binary_config();
    let rows = bench::steps_sweep(benchmark(), &base, &bench::default_steps(), EVAL_EPISODES, EVAL_SEED, 1).unwrap();
    let mut verdicts = Vec::new();
    let mut pass = true;
    for t in bench::default_steps() {
        let lr = rows.iter().find(|r| r.steps == t && r.head == HeadKind::LrD2).unwrap();
        let gd = rows.iter().find(|r| r.steps == t && r.head == HeadKind::UnrolledGd).unwrap();
        let not_inferior = lr.accuracy + lr.ci95 >= gd.accuracy - gd.ci95;
        if t >= 5 {
            pass &= not_inferior;
        }
        verdicts.push(format!(
            "T={t}: lr-d2 {:.4}±{:.4} vs gd {:.4}±{:.4}",
            lr.accuracy, lr.ci95, gd.accuracy, gd.ci95
        ));
    }
    report("steps-sweep", pass, format!("2-way 1-shot, M={EVAL_EPISODES}; {} (checked at T=5, 10)", verdicts.join("; ")));
}

#[test]
fn calibration_scale_matters_lambda_does_not() {
    let _guard = serial();
    let base = r2d2_config();
    let (learnable, _) = trained_r2d2();
    let (alpha_frozen, _) = train_and_test(&TrainConfig {
        learn_alpha: false,
        ..base.clone()
    });
    let (lambda_frozen, _) = train_and_test(&TrainConfig {
        learn_lambda: false,
        ..base.clone()
    });
    let alpha_ok = learnable.mean > alpha_frozen.mean && learnable.separated_from(&alpha_frozen);
    let width = 2.0 * learnable.ci95;
    let delta = (learnable.mean - lambda_frozen.mean).abs();
    report(
        "calibration",
        alpha_ok && delta < width,
        format!(
            "learnable {} vs α frozen at 1 {} (disjoint, lower: {alpha_ok}); λ frozen {} changes accuracy by {delta:.4} (< CI width {width:.4}: {})",
            fmt(learnable),
            fmt(&alpha_frozen),
            fmt(&lambda_frozen),
            delta < width
        ),
    );
}

fn metasolve(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_metasolve"))
        .args(args)
        .env("METASOLVE_THREADS", "1")
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn metrics(run: &Path) -> Vec<String> {
    let text = fs::read_to_string(run.join("metrics.csv")).unwrap();
    parse_metrics(&text).unwrap().iter().map(|r| r.without_time()).collect()
}

#[test]
fn reproducible_runs_and_resume() {
    let _guard = serial();
    let dir = tempfile::tempdir().unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = dir.path().join("gaussian.epds");
    metasolve(&["gen-data", "--generator", "gaussian", "--out", &s(&data)]);
    let config = s(&repo_path("configs/r2d2_gaussian.toml"));
    let train = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["train".to_string(), "--config".into(), config.clone(), "--dataset".into(), s(&data)];
        args.extend(["--out".into(), s(&out), "--max-episodes".into(), "1200".into()]);
        args.extend(extra.iter().map(|a| a.to_string()));
        metasolve(&args.iter().map(String::as_str).collect::<Vec<_>>());
        out
    };
    let a = train("a", &[]);
    let b = train("b", &[]);
    let identical = metrics(&a) == metrics(&b);
    let c = train("c", &["--stop-after", "700"]);
    train("c", &["--resume"]);
    let resumed = metrics(&a) == metrics(&c);
    let continued = metrics(&c).iter().filter(|r| r.split(',').next().unwrap().parse::<u64>().unwrap() > 700).count();
    report(
        "reproducibility",
        identical && resumed && continued >= 100,
        format!(
            "repeat run bit-identical (excluding wall_ms): {identical}; resume at 700 matches unbroken run over {continued} further rows: {resumed}"
        ),
    );
}
