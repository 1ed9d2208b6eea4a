//! Acceptance suite: one PASS/FAIL line per criterion, then a non-zero exit
//! if any failed.
//!
//! Runs without the libtest harness so the lines always reach the console.

use std::time::Instant;

use odocorr::autodiff::{Tape, Tensor};
use odocorr::cli_io::{self, Checkpoint, RunConfig, TrainMode};
use odocorr::metrics::{m_ate, segment_error, segment_errors};
use odocorr::network::{ModelSpec, ModelState, Variant};
use odocorr::se2::{accumulate, arc_increment, boxplus, relative_between};
use odocorr::simulator::{generate, NoiseModel, RobotParams, ScenarioScript};
use odocorr::training::{make_labels, train_batch, train_online, Normalizer, OnlineTrainer, TrainConfig};
use odocorr::{wrap_angle, Pose2D, RelativePose, ScenarioKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Check = Result<Outcome, odocorr::Error>;

fn sim(kind: ScenarioKind, seconds: f64, seed: u64, noise: &NoiseModel) -> odocorr::TrajectoryLog {
    let noise = NoiseModel { seed, ..*noise };
    generate(
        &ScenarioScript::new(kind, seconds, seed),
        &RobotParams::default(),
        &noise,
    )
    .unwrap()
}

// ------------------------------------------------------------------ 1

fn gradients() -> Check {
    const EPS: f64 = 1e-3;
    const DRAWS: usize = 120;
    let start = Instant::now();
    let spec = ModelSpec::default();
    let mut model = ModelState::<f64>::build(&spec, 21)?;
    model.set_training(false);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    // the head starts at zero, which would hide every upstream gradient
    for v in model.param_mut("head.weight").unwrap().data_mut() {
        *v = rng.random_range(-0.05..0.05);
    }
    let log = sim(ScenarioKind::C, 4.0, 3, &NoiseModel::default());
    let samples = make_labels(&log, spec.window_len)?;
    let batch: Vec<_> = samples.iter().step_by(17).take(4).collect();
    let norm = Normalizer::fit(log.measurements());
    let windows: Vec<_> = batch.iter().map(|s| &s.window).collect();
    let input = model.encode(&windows, &norm)?;
    let target = Tensor::<f64>::from_f64(
        &[batch.len(), 3],
        &batch.iter().flat_map(|s| s.label.as_array()).collect::<Vec<_>>(),
    )?;
    let loss = |m: &mut ModelState<f64>| -> odocorr::Result<f64> {
        let mut tape = Tape::new();
        let rec = m.record(&mut tape, input.clone())?;
        let l = tape.mae(rec.output, &target)?;
        Ok(tape.value(l).data()[0])
    };

    let mut tape = Tape::new();
    let rec = model.record(&mut tape, input.clone())?;
    let l = tape.mae(rec.output, &target)?;
    let grads = tape.backward(l)?;
    let analytic: Vec<Tensor<f64>> = rec.params.iter().map(|&p| grads.get(p).unwrap().clone()).collect();

    // A draw whose +-eps interval straddles a ReLU or |.| kink has no valid
    // central difference; it shows up as disagreeing one-sided slopes and
    // is replaced by a fresh draw.
    let base = loss(&mut model)?;
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    let (mut valid, mut skipped) = (0, 0);
    while valid < DRAWS && skipped < 10 * DRAWS {
        let i = rng.random_range(0..analytic.len());
        let j = rng.random_range(0..analytic[i].len());
        let original = model.params()[i].data()[j];
        model.params_mut()[i].data_mut()[j] = original + EPS;
        let plus = loss(&mut model)?;
        model.params_mut()[i].data_mut()[j] = original - EPS;
        let minus = loss(&mut model)?;
        model.params_mut()[i].data_mut()[j] = original;
        let (forward, backward) = ((plus - base) / EPS, (base - minus) / EPS);
        if (forward - backward).abs() > 1e-3 * forward.abs().max(backward.abs()) + 1e-12 {
            skipped += 1;
            continue;
        }
        valid += 1;
        let numeric = (plus - minus) / (2.0 * EPS);
        let a = analytic[i].data()[j];
        let scale = a.abs().max(numeric.abs());
        let err = if scale == 0.0 {
            0.0
        } else {
            (a - numeric).abs() / scale.max(1e-12)
        };
        if err > worst {
            worst = err;
            worst_at = format!("{}[{j}] ({a:.3e} vs {numeric:.3e})", model.names()[i]);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(outcome(
        valid >= 100 && worst < 1e-2 && secs < 60.0,
        format!(
            "max relative error {worst:.2e} at {worst_at} over {valid} draws ({skipped} straddled a kink), eps {EPS}, {secs:.1} s"
        ),
    ))
}

// ------------------------------------------------------------------ 2

fn shapes() -> Check {
    let spec = ModelSpec::default();
    let expected: Vec<Vec<usize>> = vec![vec![10, 8, 64], vec![5, 8, 64], vec![3, 8, 64], vec![1536], vec![3]];
    let mut model = ModelState::<f32>::build(&spec, 0)?;
    let log = sim(ScenarioKind::A, 2.0, 1, &NoiseModel::default());
    let samples = make_labels(&log, 10)?;
    let mut tape = Tape::new();
    let input = model.encode(&[&samples[0].window, &samples[1].window], &Normalizer::identity())?;
    let rec = model.record(&mut tape, input)?;
    let traced = rec.trace == expected && spec.expected_trace() == expected;
    let rejected = [
        ModelSpec {
            ratio: 5,
            ..spec.clone()
        },
        ModelSpec {
            window_len: 3,
            ..spec.clone()
        },
        ModelSpec {
            rrm_count: 4,
            ..spec.clone()
        },
        ModelSpec {
            output_dim: 2,
            ..spec.clone()
        },
    ]
    .iter()
    .all(|s| ModelState::<f32>::build(s, 0).is_err());
    Ok(outcome(
        traced && rejected,
        format!("trace {:?}, invalid specs rejected: {rejected}", rec.trace),
    ))
}

// ------------------------------------------------------------------ 3

fn se2_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let mut pose = || {
            Pose2D::new(
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
                rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            )
        };
        let (a, b) = (pose(), pose());
        let back = boxplus(&a, &relative_between(&a, &b));
        worst = worst
            .max((back.x - b.x).abs())
            .max((back.y - b.y).abs())
            .max(wrap_angle(back.theta - b.theta).abs());
    }
    let robot = RobotParams::default();
    let mut drift: f64 = 0.0;
    for (k, kind) in [ScenarioKind::A, ScenarioKind::B, ScenarioKind::C, ScenarioKind::Random]
        .into_iter()
        .enumerate()
    {
        let log = sim(kind, 60.0, k as u64, &NoiseModel::noiseless());
        let deltas: Vec<RelativePose> = log.measurements()[1..]
            .iter()
            .map(|m| {
                let (v, w) = robot.wheel_twist(m.v_l, m.v_r);
                arc_increment(v, w, log.dt())
            })
            .collect();
        let poses = accumulate(&log.gt_poses()[0], &deltas);
        let err = poses
            .iter()
            .zip(&log.gt_poses()[1..])
            .map(|(p, g)| p.distance(g))
            .fold(0.0, f64::max);
        drift = drift.max(err / (log.len() as f64 / 1000.0));
    }
    Ok(outcome(
        worst < 1e-12 && drift < 1e-9,
        format!("inverse error {worst:.1e} over 1e4 pairs; accumulate drift {drift:.1e} m per 1000 samples"),
    ))
}

// ------------------------------------------------------------------ 4

/// Homogeneous 3x3 transform, an implementation independent of `se2`.
type Mat = [[f64; 3]; 3];

fn to_mat(p: &Pose2D) -> Mat {
    let (s, c) = p.theta.sin_cos();
    [[c, -s, p.x], [s, c, p.y], [0.0, 0.0, 1.0]]
}

fn mat_mul(a: &Mat, b: &Mat) -> Mat {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn mat_inv(a: &Mat) -> Mat {
    // rigid inverse: [R^T, -R^T t]
    let (c, s) = (a[0][0], a[1][0]);
    let (x, y) = (a[0][2], a[1][2]);
    [[c, s, -(c * x + s * y)], [-s, c, s * x - c * y], [0.0, 0.0, 1.0]]
}

fn pop_mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

fn brute_force(est: &[Pose2D], gt: &[Pose2D], length: f64) -> [f64; 8] {
    let pos: Vec<f64> = est.iter().zip(gt).map(|(e, g)| (e.x - g.x).hypot(e.y - g.y)).collect();
    let head: Vec<f64> = est
        .iter()
        .zip(gt)
        .map(|(e, g)| {
            let d = (e.theta - g.theta).rem_euclid(std::f64::consts::TAU);
            d.min(std::f64::consts::TAU - d)
        })
        .collect();
    let (mut se_pos, mut se_head) = (Vec::new(), Vec::new());
    for i in 0..gt.len() {
        let mut arc = 0.0;
        let mut end = None;
        for j in i + 1..gt.len() {
            arc += (gt[j].x - gt[j - 1].x).hypot(gt[j].y - gt[j - 1].y);
            if arc > length {
                end = Some(j);
                break;
            }
        }
        let Some(j) = end else { break };
        let rel = mat_mul(&mat_inv(&to_mat(&est[i])), &to_mat(&est[j]));
        let anchored = mat_mul(&to_mat(&gt[i]), &rel);
        let target = to_mat(&gt[j]);
        se_pos.push((anchored[0][2] - target[0][2]).hypot(anchored[1][2] - target[1][2]));
        // angle of R_target^T R_anchored
        let (c, s) = (
            target[0][0] * anchored[0][0] + target[1][0] * anchored[1][0],
            target[0][0] * anchored[1][0] - target[1][0] * anchored[0][0],
        );
        se_head.push(s.atan2(c).abs());
    }
    let (a, b) = pop_mean_std(&pos);
    let (c, d) = pop_mean_std(&head);
    let (e, f) = pop_mean_std(&se_pos);
    let (g, h) = pop_mean_std(&se_head);
    [a, b, c, d, e, f, g, h]
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let mut gt = vec![Pose2D::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-3.0..3.0),
        )];
        for _ in 1..100 {
            let p = gt.last().unwrap();
            let d = RelativePose::new(
                rng.random_range(0.0..0.1),
                rng.random_range(-0.02..0.02),
                rng.random_range(-0.3..0.3),
            );
            gt.push(boxplus(p, &d));
        }
        let est: Vec<Pose2D> = gt
            .iter()
            .map(|p| {
                Pose2D::new(
                    p.x + rng.random_range(-0.3..0.3),
                    p.y + rng.random_range(-0.3..0.3),
                    p.theta + rng.random_range(-4.0..4.0),
                )
            })
            .collect();
        let m = m_ate(&est, &gt)?;
        let s = segment_error(&est, &gt, 1.0, 1)?;
        let ours = [
            m.position.mean,
            m.position.std,
            m.heading.mean,
            m.heading.std,
            s.position.mean,
            s.position.std,
            s.heading.mean,
            s.heading.std,
        ];
        let oracle = brute_force(&est, &gt, 1.0);
        for (a, b) in ours.iter().zip(oracle) {
            worst = worst.max((a - b).abs());
        }
    }

    // analytic cases on a straight line of 334 poses spaced 0.03 m
    let line: Vec<Pose2D> = (0..334).map(|i| Pose2D::new(0.03 * i as f64, 0.0, 0.0)).collect();
    let mut analytic: f64 = 0.0;
    let shifted: Vec<Pose2D> = line
        .iter()
        .map(|p| Pose2D::new(p.x + 0.3, p.y - 0.4, p.theta))
        .collect();
    let m = m_ate(&shifted, &line)?;
    let s = segment_error(&shifted, &line, 1.0, 1)?;
    analytic = analytic
        .max((m.position.mean - 0.5).abs())
        .max(m.heading.mean)
        .max(s.position.mean);
    let eps = 1e-2f64;
    let biased: Vec<Pose2D> = line.iter().map(|p| Pose2D::new(p.x, p.y, p.theta + eps)).collect();
    let m = m_ate(&biased, &line)?;
    let (se_pos, se_head) = segment_errors(&biased, &line, 1.0, 1)?;
    // every segment ends 34 samples (1.02 m) past its start
    let chord = 2.0 * 1.02 * (eps / 2.0).sin();
    analytic = analytic
        .max((m.heading.mean - eps).abs())
        .max(m.position.mean)
        .max(se_pos.iter().map(|e| (e - chord).abs()).fold(0.0, f64::max))
        .max(se_head.iter().copied().fold(0.0, f64::max));
    Ok(outcome(
        worst < 1e-9 && analytic < 1e-6,
        format!("brute-force deviation {worst:.1e} over 50 trajectories of 100 poses; analytic cases {analytic:.1e}"),
    ))
}

// ------------------------------------------------------------------ 5

fn online_contract() -> Check {
    let spec = ModelSpec::default();
    let cfg = TrainConfig::default();
    let log = sim(ScenarioKind::Random, 12.0, 5, &NoiseModel::default());
    let samples = make_labels(&log, spec.window_len)?;
    let mut counts_ok = true;
    let mut counts = Vec::new();
    for n in [0, 1, 31, 32, 33, 64, 95, 96, 100, 290] {
        let mut trainer = OnlineTrainer::new(ModelState::<f32>::build(&spec, 1)?, &cfg)?;
        for s in samples.iter().take(n).cloned() {
            trainer.push(s)?;
        }
        counts_ok &= trainer.updates() == n / 32;
        counts.push(format!("{n}->{}", trainer.updates()));
    }

    let batch = samples[..32].to_vec();
    let same = TrainConfig {
        lr_batch: 7e-5,
        lr_online: 7e-5,
        epochs: 1,
        shuffle: false,
        validation_fraction: 0.0,
        seed: 9,
        ..cfg
    };
    let mut a = ModelState::<f32>::build(&spec, 8)?;
    let mut b = ModelState::<f32>::build(&spec, 8)?;
    train_batch(&mut a, &batch, &same)?;
    train_online(&mut b, batch, &same)?;
    let identical = a
        .params()
        .iter()
        .zip(b.params())
        .all(|(x, y)| x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    let moved = a.params() != ModelState::<f32>::build(&spec, 8)?.params();
    Ok(outcome(
        counts_ok && identical && moved,
        format!(
            "updates {}; single-batch parameters bit-identical: {identical}",
            counts.join(" ")
        ),
    ))
}

// -------------------------------------------------------------- 6 and 7

struct Benchmark {
    ekf: (f64, f64),
    online: (f64, f64),
    batch: (f64, f64),
    ffnn: (f64, f64),
    seconds: f64,
    tests: usize,
}

/// Default configuration except for the batch epoch budget.
fn benchmark_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.epochs = 8;
    cfg
}

fn run_benchmark() -> Result<Benchmark, odocorr::Error> {
    let start = Instant::now();
    let cfg = benchmark_config();
    let logs = cli_io::simulate_logs(&cfg)?;
    let (online, _) = cli_io::train_model(&cfg, TrainMode::Online, Variant::Remnet2d, &logs)?;
    let (batch, _) = cli_io::train_model(&cfg, TrainMode::Batch, Variant::Remnet2d, &logs)?;
    let (ffnn, _) = cli_io::train_model(&cfg, TrainMode::Batch, Variant::Ffnn, &logs)?;
    let estimators = cli_io::standard_estimators(&cfg, Some(&online), Some(&batch), Some(&ffnn));
    let eval = cli_io::evaluate(&estimators, &logs, &cfg.metrics)?;
    print!("{}", eval.to_text());
    let overall = |method: &str| {
        let r = eval.row(method, "Overall").expect("row present");
        (r.m_ate.position.mean, r.m_ate.heading.mean)
    };
    Ok(Benchmark {
        ekf: overall("EKF"),
        online: overall("Online"),
        batch: overall("Batch"),
        ffnn: overall("FFNN"),
        seconds: start.elapsed().as_secs_f64(),
        tests: logs.iter().filter(|l| l.meta().kind != ScenarioKind::Random).count(),
    })
}

fn improvement(bench: &Benchmark) -> Outcome {
    let pos = 1.0 - bench.online.0 / bench.ekf.0;
    let head = 1.0 - bench.online.1 / bench.ekf.1;
    outcome(
        pos >= 0.30 && head >= 0.40 && bench.seconds < 900.0 && bench.tests >= 10,
        format!(
            "online vs EKF: position {:.3} vs {:.3} m ({:.1}% better), heading {:.3} vs {:.3} rad ({:.1}% better); {} test logs; {:.0} s",
            bench.online.0,
            bench.ekf.0,
            100.0 * pos,
            bench.online.1,
            bench.ekf.1,
            100.0 * head,
            bench.tests,
            bench.seconds
        ),
    )
}

fn ordering(bench: &Benchmark) -> Outcome {
    let batch_first = bench.batch.0 <= bench.online.0;
    let beat_ffnn = bench.batch.1 < bench.ffnn.1 && bench.online.1 < bench.ffnn.1;
    outcome(
        batch_first && beat_ffnn,
        format!(
            "position batch {:.3} vs online {:.3} m; heading batch {:.3}, online {:.3}, FFNN {:.3} rad",
            bench.batch.0, bench.online.0, bench.batch.1, bench.online.1, bench.ffnn.1
        ),
    )
}

// ------------------------------------------------------------------ 8

fn latency() -> Check {
    let spec = ModelSpec::default();
    let log = sim(ScenarioKind::Random, 20.0, 8, &NoiseModel::default());
    let ckpt = Checkpoint {
        model: ModelState::build(&spec, 0)?,
        normalizer: Normalizer::fit(log.measurements()),
    };
    let report = cli_io::cmd_bench(&ckpt, 100, 32)?;
    let target = if report.inference_mean_ms < 10.0 {
        "met"
    } else {
        "missed"
    };
    Ok(outcome(
        report.iterations == 100
            && report.inference_mean_ms < 40.0
            && report.train_step_mean_ms < 200.0
            && report.deterministic,
        format!(
            "inference mean {:.3} ms (median {:.3}, p99 {:.3}; 10 ms target {target}), train step {:.1} ms over {} runs",
            report.inference_mean_ms,
            report.inference_median_ms,
            report.inference_p99_ms,
            report.train_step_mean_ms,
            report.iterations
        ),
    ))
}

// ------------------------------------------------------------------ 9

fn robustness() -> Check {
    let noisy = NoiseModel::default().scaled(10.0);
    let spec = ModelSpec::default();
    let mut samples = Vec::new();
    for seed in 0..3 {
        samples.extend(make_labels(
            &sim(ScenarioKind::C, 140.0, 900 + seed, &noisy),
            spec.window_len,
        )?);
    }
    samples.truncate(10_000);
    let n = samples.len();
    let mut model = ModelState::<f32>::build(&spec, 9)?;
    let out = train_online(&mut model, samples, &TrainConfig::default())?;
    let finite_losses = out.losses.iter().all(|l| l.is_finite());
    Ok(outcome(
        n == 10_000 && model.is_finite() && finite_losses,
        format!(
            "{n} samples at 10x noise, {} updates, parameters finite: {}, losses finite: {finite_losses}",
            out.updates(),
            model.is_finite()
        ),
    ))
}

fn report(id: usize, name: &str, result: Check) -> bool {
    let o = result.unwrap_or_else(|e| outcome(false, format!("error: {e}")));
    println!(
        "criterion {id} {name}: {} ({})",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
    o.pass
}

fn main() {
    // `cargo test` passes libtest flags; a name filter selects criteria by number
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: usize| filter.is_empty() || filter.contains(&id);
    let mut all = true;
    if wanted(1) {
        all &= report(1, "gradient check", gradients());
    }
    if wanted(2) {
        all &= report(2, "shape contract", shapes());
    }
    if wanted(3) {
        all &= report(3, "SE(2) suite", se2_suite());
    }
    if wanted(4) {
        all &= report(4, "metric oracles", metric_oracles());
    }
    if wanted(5) {
        all &= report(5, "online trainer contract", online_contract());
    }
    if wanted(6) || wanted(7) {
        match run_benchmark() {
            Ok(bench) => {
                if wanted(6) {
                    all &= report(6, "improvement over EKF", Ok(improvement(&bench)));
                }
                if wanted(7) {
                    all &= report(7, "batch/online/FFNN ordering", Ok(ordering(&bench)));
                }
            }
            Err(e) => {
                for (id, name) in [(6, "improvement over EKF"), (7, "batch/online/FFNN ordering")] {
                    if wanted(id) {
                        all &= report(id, name, Ok(outcome(false, format!("error: {e}"))));
                    }
                }
            }
        }
    }
    if wanted(8) {
        all &= report(8, "latency budget", latency());
    }
    if wanted(9) {
        all &= report(9, "robustness at 10x noise", robustness());
    }
    if !all {
        std::process::exit(1);
    }
}
