//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use blockcs::check::{run_gradient_suite, SuiteOptions};
use blockcs::data::ImageRecord;
use blockcs::eval::{blockiness_index, evaluate_models, psnr};
use blockcs::kernels::reference::{conv2d_naive, convtranspose2d_naive};
use blockcs::kernels::{conv2d_forward, convtranspose2d_forward, random_tensor, ConvSpec};
use blockcs::model::{AnyModel, BaselineModel, CsModel, FullModel, Method, ModelConfig};
use blockcs::train::{loss_csv, train, Checkpoint, TrainConfig, Trainer};
use blockcs::Tensor;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let scale = a.max_abs().max(b.max_abs()).max(1e-12);
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() / scale).fold(0.0, f64::max)
}

fn pick(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    lo + (rng.next_u64() % (hi - lo + 1) as u64) as usize
}

fn kernel_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let cases = 256;
    for case in 0..cases {
        let n = pick(&mut rng, 1, 3);
        let cin = pick(&mut rng, 1, 8);
        let cout = pick(&mut rng, 1, 8);
        let k = pick(&mut rng, 1, 8);
        let s = pick(&mut rng, 1, 8);
        let bias = rng.next_u64() & 1 == 1;
        // Forward conv with padding; input extents between k and 8.
        let pad = pick(&mut rng, 0, (k - 1).min(2));
        let h = pick(&mut rng, k.saturating_sub(2 * pad).max(1), 8);
        let w = pick(&mut rng, k.saturating_sub(2 * pad).max(1), 8);
        let spec = ConvSpec::square(cin, cout, k, s, pad, bias).map_err(|e| e.to_string())?;
        let x = random_tensor::<f64>([n, cin, h, w], &mut rng);
        let wt = random_tensor::<f64>([cout, cin, k, k], &mut rng);
        let b = random_tensor::<f64>([1, cout, 1, 1], &mut rng);
        let b = bias.then_some(&b);
        let fast = conv2d_forward(&x, &wt, b, &spec).map_err(|e| format!("case {case}: {e}"))?;
        let slow = conv2d_naive(&x, &wt, b, &spec).map_err(|e| format!("case {case}: {e}"))?;
        ensure(fast.shape() == slow.shape(), || format!("case {case}: conv shape mismatch"))?;
        worst = worst.max(rel_err(&fast, &slow));

        let hin = pick(&mut rng, 1, 8);
        let win = pick(&mut rng, 1, 8);
        let tspec = ConvSpec::square(cin, cout, k, s, 0, bias).map_err(|e| e.to_string())?;
        let x = random_tensor::<f64>([n, cin, hin, win], &mut rng);
        let wt = random_tensor::<f64>([cin, cout, k, k], &mut rng);
        let fast = convtranspose2d_forward(&x, &wt, b, &tspec).map_err(|e| format!("case {case}: {e}"))?;
        let slow = convtranspose2d_naive(&x, &wt, b, &tspec).map_err(|e| format!("case {case}: {e}"))?;
        ensure(fast.shape() == slow.shape(), || format!("case {case}: transposed shape mismatch"))?;
        worst = worst.max(rel_err(&fast, &slow));
    }
    ensure(worst < 1e-5, || format!("max relative error {worst:.3e}"))?;
    Ok(format!("{} shapes per op, max relative error {worst:.3e}", cases))
}

fn gradient_suite() -> Outcome {
    let checks = run_gradient_suite(&SuiteOptions::default(), 1e-5).map_err(|e| e.to_string())?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.op).collect();
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    ensure(failed.is_empty(), || format!("failed: {}", failed.join(",")))?;
    Ok(format!("{} ops, max relative error {worst:.3e}", checks.len()))
}

fn perturb(image: &Tensor<f64>, y: usize, x: usize, delta: f64) -> Tensor<f64> {
    let mut out = image.clone();
    out.set(0, 0, y, x, image.at(0, 0, y, x) + delta);
    out
}

fn structural_invariants() -> Outcome {
    let err = |e: blockcs::Error| e.to_string();
    let mut min_coupling = f64::INFINITY;
    for seed in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig::new(4, 0.25, 4, 1).map_err(err)?;
        let image = random_tensor::<f64>([1, 1, 12, 12], &mut rng);
        let (by, bx) = (seed as usize % 3, (seed as usize / 3) % 3);
        let moved = perturb(&image, by * 4 + 2, bx * 4 + 1, 0.8);
        let inside = |y: usize, x: usize| (y / 4, x / 4) == (by, bx);

        let full = FullModel::<f64>::init(cfg, seed).map_err(err)?;
        let a = full.measurement.measure(&image).map_err(err)?;
        let b = full.measurement.measure(&moved).map_err(err)?;
        for m in 0..a.channels() {
            for y in 0..3 {
                for x in 0..3 {
                    ensure((y, x) == (by, bx) || a.at(0, m, y, x) == b.at(0, m, y, x), || {
                        format!("measurement of block ({y},{x}) changed")
                    })?;
                }
            }
        }

        let base = BaselineModel::<f64>::init(cfg, seed).map_err(err)?;
        let a = base.reconstruct(&image).map_err(err)?;
        let b = base.reconstruct(&moved).map_err(err)?;
        for y in 0..12 {
            for x in 0..12 {
                ensure(inside(y, x) || a.at(0, 0, y, x) == b.at(0, 0, y, x), || {
                    format!("baseline pixel ({y},{x}) changed")
                })?;
            }
        }

        let a = full.reconstruct(&image).map_err(err)?;
        let b = full.reconstruct(&moved).map_err(err)?;
        let mut outside = 0.0f64;
        for y in 0..12 {
            for x in 0..12 {
                if !inside(y, x) {
                    outside = outside.max((a.at(0, 0, y, x) - b.at(0, 0, y, x)).abs());
                }
            }
        }
        min_coupling = min_coupling.min(outside);

        let mut zeroed = full.clone();
        let mut skipped = full.net.clone();
        skipped.blocks.remove(0);
        let block = &mut zeroed.net.blocks[0];
        block.conv1_weight = Tensor::zeros(block.conv1_weight.shape());
        block.conv2_weight = Tensor::zeros(block.conv2_weight.shape());
        let meas = random_tensor::<f64>([1, cfg.measurements(), 2, 3], &mut rng);
        ensure(
            zeroed.net.reconstruct(&meas).map_err(err)? == skipped.reconstruct(&meas).map_err(err)?,
            || "zeroed residual block is not the identity".into(),
        )?;
    }
    ensure(min_coupling > 1e-8, || format!("cross-block coupling {min_coupling:.3e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (cin, cout, k, s) = (pick(&mut rng, 1, 4), pick(&mut rng, 1, 4), pick(&mut rng, 1, 4), pick(&mut rng, 1, 4));
        let (ho, wo) = (pick(&mut rng, 1, 4), pick(&mut rng, 1, 4));
        let (h, w) = ((ho - 1) * s + k, (wo - 1) * s + k);
        let spec = ConvSpec::square(cin, cout, k, s, 0, false).map_err(err)?;
        let tspec = ConvSpec::square(cout, cin, k, s, 0, false).map_err(err)?;
        let x = random_tensor::<f64>([1, cin, h, w], &mut rng);
        let y = random_tensor::<f64>([1, cout, ho, wo], &mut rng);
        let wc = random_tensor::<f64>([cout, cin, k, k], &mut rng);
        let lhs = conv2d_forward(&x, &wc, None, &spec).map_err(err)?.dot(&y).map_err(err)?;
        let rhs = x.dot(&convtranspose2d_forward(&y, &wc, None, &tspec).map_err(err)?).map_err(err)?;
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12));
    }
    ensure(worst < 1e-5, || format!("adjointness error {worst:.3e}"))?;
    Ok(format!("min cross-block coupling {min_coupling:.3e}, adjointness error {worst:.3e}"))
}

// Desk-scale experiment settings.
const DESK_TRAIN: u64 = 96;
const DESK_TEST: u64 = 6;
const DESK_TRAIN_SIZE: usize = 96;
const DESK_TEST_SIZE: usize = 64;

fn desk_config(rate: f64) -> TrainConfig {
    TrainConfig {
        model: ModelConfig::new(8, rate, 8, 1).unwrap(),
        lr: 1e-3,
        epochs: 200,
        batch_size: 2,
        crop_size: 64,
        seed: 7,
        log_every: 0,
        ..TrainConfig::default()
    }
}

fn desk_experiment() -> Outcome {
    let train_set: Arc<Vec<ImageRecord>> =
        Arc::new((0..DESK_TRAIN).map(|i| common::leaves_record(i, DESK_TRAIN_SIZE)).collect());
    let test_set: Vec<ImageRecord> =
        (0..DESK_TEST).map(|i| common::leaves_record(1000 + i, DESK_TEST_SIZE)).collect();
    let mut summary = Vec::new();
    let mut problems = Vec::new();
    let mut full_psnr = Vec::new();
    for rate in [0.04, 0.25] {
        let mut models = Vec::new();
        for method in [Method::Full, Method::Baseline] {
            let start = Instant::now();
            let out = train(desk_config(rate), method, train_set.clone()).map_err(|e| e.to_string())?;
            let secs = start.elapsed().as_secs_f64();
            if secs > 900.0 {
                problems.push(format!("{method} at {rate} took {secs:.0}s"));
            }
            models.push(out.checkpoint.to_model().map_err(|e| e.to_string())?);
        }
        let refs: Vec<&AnyModel<f32>> = models.iter().collect();
        let report = evaluate_models(&refs, &test_set).map_err(|e| e.to_string())?;
        let full = report.mean(rate, Method::Full).ok_or("missing full mean")?;
        let base = report.mean(rate, Method::Baseline).ok_or("missing baseline mean")?;
        summary.push(format!(
            "{}%: PSNR {:.2}/{:.2} dB, BI {:.3}/{:.3}",
            rate * 100.0,
            full.psnr_db,
            base.psnr_db,
            full.blockiness,
            base.blockiness
        ));
        if full.psnr_db <= base.psnr_db {
            problems.push(format!("PSNR full {:.2} <= baseline {:.2} at {rate}", full.psnr_db, base.psnr_db));
        }
        if rate == 0.04 && !(base.blockiness >= 1.05 && full.blockiness < base.blockiness) {
            problems.push(format!("BI full {:.3}, baseline {:.3} at {rate}", full.blockiness, base.blockiness));
        }
        full_psnr.push(full.psnr_db);
    }
    if full_psnr[1] <= full_psnr[0] {
        problems.push(format!("full PSNR not increasing with rate: {:.2} -> {:.2}", full_psnr[0], full_psnr[1]));
    }
    let detail = format!("(full/baseline) {}", summary.join("; "));
    if problems.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}; {detail}", problems.join("; ")))
    }
}

fn overfit() -> Outcome {
    let data = Arc::new(vec![common::scene_record(77, 16, 16)]);
    let cfg = TrainConfig {
        model: ModelConfig::new(4, 0.25, 8, 1).unwrap(),
        lr: 3e-3,
        epochs: 200,
        batch_size: 1,
        crop_size: 16,
        seed: 0,
        log_every: 0,
        ..TrainConfig::default()
    };
    let out = train(cfg, Method::Full, data).map_err(|e| e.to_string())?;
    let first = out.history[0].loss;
    let best = out.history.iter().map(|r| r.loss).fold(f32::INFINITY, f32::min);
    ensure(out.history.len() == 200, || format!("{} steps", out.history.len()))?;
    ensure(best < 0.01 * first, || format!("initial {first}, best {best}"))?;
    Ok(format!("loss {first:.3} -> {best:.5} in 200 steps ({:.3}%)", 100.0 * best / first))
}

fn determinism() -> Outcome {
    let err = |e: blockcs::Error| e.to_string();
    let data: Arc<Vec<ImageRecord>> = Arc::new((0..5).map(|s| common::scene_record(s, 20, 20)).collect());
    let cfg = TrainConfig {
        model: ModelConfig::new(4, 0.25, 4, 1).unwrap(),
        lr: 1e-3,
        epochs: 4,
        batch_size: 2,
        crop_size: 12,
        seed: 11,
        log_every: 0,
        ..TrainConfig::default()
    };
    for method in [Method::Full, Method::Baseline] {
        let a = train(cfg.clone(), method, data.clone()).map_err(err)?;
        let b = train(cfg.clone(), method, data.clone()).map_err(err)?;
        ensure(loss_csv(&a.history) == loss_csv(&b.history), || format!("{method}: loss CSVs differ"))?;

        let mut first = Trainer::new(cfg.clone(), method, data.clone()).map_err(err)?;
        let mut got = first.run(5).map_err(err)?;
        let bytes = first.checkpoint().encode();
        let mut second = Trainer::resume(cfg.clone(), Checkpoint::decode(&bytes).map_err(err)?, data.clone()).map_err(err)?;
        got.extend(second.run_to_end().map_err(err)?);
        ensure(got == a.history, || format!("{method}: resumed history differs"))?;
        ensure(second.checkpoint().encode() == a.checkpoint.encode(), || {
            format!("{method}: resumed checkpoint differs")
        })?;

        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let (p1, p2) = (dir.path().join("a.bcs"), dir.path().join("b.bcs"));
        a.checkpoint.save(&p1).map_err(err)?;
        Checkpoint::load(&p1).map_err(err)?.save(&p2).map_err(err)?;
        let (b1, b2) = (std::fs::read(&p1).map_err(|e| e.to_string())?, std::fs::read(&p2).map_err(|e| e.to_string())?);
        ensure(b1 == b2, || format!("{method}: checkpoint round trip changed bytes"))?;
    }
    Ok("loss CSVs, resume and checkpoint round trip bit-identical for both methods".into())
}

fn level_image(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
    Tensor::from_fn([1, 1, h, w], |[_, _, y, x]| blockcs::data::normalize(f(y, x)))
}

fn metrics() -> Outcome {
    let err = |e: blockcs::Error| e.to_string();
    let a = level_image(16, 16, |y, x| ((y * 16 + x) % 255) as f64);
    let b = level_image(16, 16, |y, x| ((y * 16 + x) % 255) as f64 + 1.0);
    let db = psnr(&a, &b).map_err(err)?;
    let exact = 10.0 * 65025f64.log10();
    ensure((db - exact).abs() < 1e-6 && (db - 48.13).abs() < 0.005, || format!("PSNR {db}"))?;
    let constant = blockiness_index(&level_image(16, 16, |_, _| 90.0), 8).map_err(err)?;
    ensure(constant == 1.0, || format!("constant BI {constant}"))?;
    let tiles = blockiness_index(&level_image(16, 24, |y, x| (30 * (y / 8) + 70 * (x / 8)) as f64), 8).map_err(err)?;
    ensure(tiles == f64::INFINITY, || format!("tiled BI {tiles}"))?;
    let ramp = blockiness_index(&level_image(16, 16, |_, x| 5.0 * x as f64), 8).map_err(err)?;
    ensure((ramp - 1.0).abs() < 1e-12, || format!("ramp BI {ramp}"))?;
    Ok(format!("PSNR {db:.6} dB, BI constant {constant}, tiles {tiles}, ramp {ramp}"))
}

fn footer() -> Outcome {
    let report = evaluate_models(&[], &[common::scene_record(0, 8, 8)]).map_err(|e| e.to_string())?;
    let md = report.to_markdown();
    let label = "Published reference values (not reproduced by this run)";
    let start = md.find(label).ok_or("footer label missing")?;
    let tail = &md[start..];
    for v in ["22.12 dB", "25.97 dB", "28.94 dB", "33.57 dB", "1.8 dB"] {
        ensure(tail.contains(v), || format!("{v} missing"))?;
    }
    Ok("22.12/25.97/28.94/33.57 dB and 1.8 dB margin listed as references".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("kernel oracle equivalence", kernel_oracles),
        ("gradient suite", gradient_suite),
        ("structural invariants", structural_invariants),
        ("desk-scale experiment", desk_experiment),
        ("overfit sanity", overfit),
        ("determinism and persistence", determinism),
        ("metric correctness", metrics),
        ("reference numbers in report footer", footer),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {}. {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failures += 1;
                println!("FAIL {}. {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} of {} criteria failed", criteria.len());
        ExitCode::FAILURE
    }
}
