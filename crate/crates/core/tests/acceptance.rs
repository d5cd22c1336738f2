//! The acceptance suite. Prints one `PASS`/`FAIL` line per criterion and
//! exits non-zero if any fails.
//!
//! Pass criterion numbers as arguments to run a subset:
//! `cargo test --test acceptance -- 7 8`.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use avcc_core::avt;
use avcc_core::ccm;
use avcc_core::groundtruth::{make_gt_density, make_gt_patch_counts, mae_rmse, Annotation, PatchGrid};
use avcc_core::harness::gradcheck::{run_suite, toy_check_config, TOLERANCE};
use avcc_core::harness::train::{CHECKPOINT_FILE, LOG_FILE};
use avcc_core::harness::{gen_dataset, load_model, occlusion_sweep, train, Checkpoint, Config, Dataset, SynthConfig};
use avcc_core::model::{Geometry, Model, ModelConfig, Targets};
use avcc_core::nn::Ctx;
use avcc_core::rng::{rng_for, Rng};
use avcc_core::tensor::{Tape, Tensor};

/// The toy training recipe shared with the command line.
const TOY_RECIPE: &str = include_str!("../../../configs/toy.cfg");

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn randn(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

fn uniform(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random::<f64>())
}

fn recipe(data: &Path, out: &Path) -> Result<Config, String> {
    let mut cfg = Config::from_text(TOY_RECIPE).map_err(err)?;
    cfg.data = Some(data.to_path_buf());
    cfg.out = out.to_path_buf();
    Ok(cfg)
}

fn load(cfg: &Config, dir: &Path) -> Result<Dataset, String> {
    let m = cfg.model();
    let (w, h) = m.geometry.size();
    Dataset::load(dir, w, h, &m.grid(), m.uses_audio()).map_err(err)
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let checks = run_suite(&toy_check_config(), 0).map_err(err)?;
    let worst = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let checked: usize = checks.iter().map(|c| c.checked).sum();
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.module.as_str()).collect();
    check(
        failed.is_empty() && secs < 600.0,
        format!("{checked} entries, max rel err {worst:.2e} (< {TOLERANCE:.0e}), {secs:.0}s, failing: {failed:?}"),
    )
}

fn shape_contract() -> Outcome {
    let mut seen = Vec::new();
    for (geometry, p) in [(Geometry::Full, 64), (Geometry::LowRes, 16)] {
        let cfg = ModelConfig::new(geometry);
        let (model, store) = Model::build(&cfg, 0).map_err(err)?;
        let (w, h) = geometry.size();
        let mut rng = rng_for(2, "shapes");
        let tape = Tape::no_grad();
        let mut ctx = Ctx::new(&tape, &store, false, 0);
        let fwd = model
            .forward(&mut ctx, &uniform(&mut rng, &[1, 3, h, w]), Some(&randn(&mut rng, &[1, 64, 96], 1.0)))
            .map_err(err)?;
        let out = fwd.avt.as_ref().ok_or("no transformer output")?;
        let pir = out.pir.as_ref().ok_or("no PIR")?.shape().to_vec();
        let pce = out.pce.as_ref().ok_or("no PCE")?.shape().to_vec();
        let ok = fwd.v.shape() == [1, p, 144]
            && cfg.z() == 144
            && pir == [1, p]
            && pce == [1, p]
            && fwd.density.shape() == [1, h, w];
        seen.push(format!(
            "{w}x{h}: V {:?} PIR {pir:?} PCE {pce:?} DM {:?}",
            fwd.v.shape(),
            fwd.density.shape()
        ));
        if !ok {
            return Err(seen.join("; "));
        }
    }
    Ok(seen.join("; "))
}

fn stochasticity() -> Outcome {
    let mut rng = rng_for(3, "stochasticity");
    let builds = [ModelConfig::new(Geometry::Toy), {
        let mut c = ModelConfig::new(Geometry::Toy);
        c.flags.cc_v = true;
        c
    }];
    let models = builds
        .iter()
        .map(|c| Model::build(c, 3))
        .collect::<avcc_core::Result<Vec<_>>>()
        .map_err(err)?;
    let (mut matrices, mut rows, mut worst) = (0usize, 0usize, 0.0f64);
    for i in 0..100 {
        let (model, store) = &models[i % 2];
        // Magnitudes from 1e-2 to 1e3 so the logits span saturation.
        let scale = 10f64.powf(rng.random_range(-2.0..3.0));
        let image = randn(&mut rng, &[2, 3, 36, 64], scale);
        let lms = randn(&mut rng, &[2, 64, 96], scale);
        let tape = Tape::no_grad();
        let mut ctx = Ctx::new(&tape, store, i % 4 < 2, i as u64);
        let fwd = model.forward(&mut ctx, &image, Some(&lms)).map_err(err)?;
        for att in &fwd.attention {
            let cols = *att.shape().last().ok_or("empty attention shape")?;
            for row in att.data().chunks(cols) {
                if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(format!("input {i}: attention entry outside [0, 1]"));
                }
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                rows += 1;
            }
            matrices += 1;
        }
    }
    check(
        worst <= 1e-6,
        format!("{matrices} matrices, {rows} rows over 100 inputs, max |row sum - 1| = {worst:.1e}"),
    )
}

fn distribution(rng: &mut Rng, p: usize, zeros: bool) -> Vec<f64> {
    let w: Vec<f64> = (0..p)
        .map(|_| if zeros && rng.random_bool(0.3) { 0.0 } else { rng.random::<f64>() + 0.01 })
        .collect();
    let s: f64 = w.iter().sum();
    if s == 0.0 {
        return vec![1.0 / p as f64; p];
    }
    w.iter().map(|v| v / s).collect()
}

fn loss_identities() -> Outcome {
    let mut rng = rng_for(4, "losses");
    let tape = Tape::no_grad();
    let (mut pir_zero, mut pir_min, mut pce_zero, mut pce_scale, mut dm_err) = (0.0f64, f64::INFINITY, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let p = rng.random_range(2..=64);
        let gt = distribution(&mut rng, p, true);
        let other = distribution(&mut rng, p, false);
        let gt_t = Tensor::new([1, p], gt.clone()).map_err(err)?;
        let same = avt::loss_pir(&tape.constant(gt_t.clone()), &gt_t).map_err(err)?.item();
        let diff = avt::loss_pir(&tape.constant(Tensor::new([1, p], other).map_err(err)?), &gt_t).map_err(err)?.item();
        pir_zero = pir_zero.max(same.abs());
        pir_min = pir_min.min(diff);

        let counts = Tensor::from_fn(vec![2, p], |_| f64::from(rng.random_range(0..20u32)) + 1.0);
        let est = Tensor::from_fn(vec![2, p], |_| rng.random_range(0.0..25.0));
        let (at_gt, _) = avt::loss_pce(&tape.constant(counts.clone()), &counts).map_err(err)?;
        pce_zero = pce_zero.max(at_gt.item().abs());
        let (base, _) = avt::loss_pce(&tape.constant(est.clone()), &counts).map_err(err)?;
        let k = 10f64.powf(rng.random_range(-3.0..3.0));
        let (scaled, _) = avt::loss_pce(&tape.constant(est.map(|v| v * k)), &counts.map(|v| v * k)).map_err(err)?;
        pce_scale = pce_scale.max(((scaled.item() - base.item()) / base.item()).abs());
    }
    for _ in 0..20 {
        let (n, h, w) = (2, 36, 64);
        let dm = randn(&mut rng, &[n, h, w], 0.05);
        let gt = uniform(&mut rng, &[n, h, w]).map(|v| 0.05 * v);
        let mut naive = 0.0;
        for s in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let d = dm.at(&[s, y, x]) - gt.at(&[s, y, x]);
                    naive += d * d;
                }
            }
        }
        naive /= n as f64;
        let l = ccm::loss_dm(&tape.constant(dm), &gt).map_err(err)?.item();
        dm_err = dm_err.max((l - naive).abs());
    }

    let (model, store) = Model::build(&ModelConfig::new(Geometry::Toy), 4).map_err(err)?;
    let mut ctx = Ctx::new(&tape, &store, true, 4);
    let image = uniform(&mut rng, &[2, 3, 36, 64]);
    let fwd = model.forward(&mut ctx, &image, Some(&randn(&mut rng, &[2, 64, 96], 1.0))).map_err(err)?;
    let targets = Targets {
        density: uniform(&mut rng, &[2, 36, 64]).map(|v| 0.01 * v),
        patch_counts: Tensor::new([2, 4], vec![3.0, 0.0, 5.0, 1.0, 2.0, 2.0, 0.0, 7.0]).map_err(err)?,
    };
    let out = model.loss(&fwd, &targets).map_err(err)?;
    let r = &out.report;
    let (pir, pce) = (r.pir.ok_or("PIR term missing")?, r.pce.ok_or("PCE term missing")?);
    let exact = r.total == pir + pce + r.dm && out.total.item() == r.total;

    check(
        pir_zero < 1e-12 && pir_min > 0.0 && pce_zero == 0.0 && pce_scale < 1e-12 && dm_err < 1e-8 && exact,
        format!(
            "PIR at gt {pir_zero:.1e}, min off-gt {pir_min:.2e}; PCE at gt {pce_zero:.1e}, scale drift {pce_scale:.1e}; \
             DM vs loop {dm_err:.1e}; total exact: {exact}"
        ),
    )
}

fn mass_conservation() -> Outcome {
    let mut rng = rng_for(5, "mass");
    let (mut worst, mut border) = (0.0f64, 0usize);
    for i in 0..1000 {
        let (w, h) = if i % 2 == 0 { (64, 36) } else { (rng.random_range(4..120), rng.random_range(4..80)) };
        let n = rng.random_range(0..60);
        let mut points: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)))
            .collect();
        // Corners and edges, where most of the kernel falls outside.
        let (xm, ym) = (w as f64 - 1e-9, h as f64 - 1e-9);
        for p in [(0.0, 0.0), (xm, ym), (0.0, ym), (xm, 0.0), (rng.random_range(0.0..xm), 0.0), (0.0, rng.random_range(0.0..ym))] {
            if rng.random_bool(0.5) {
                points.push(p);
            }
        }
        border += points.iter().filter(|(x, y)| *x < 7.0 || *y < 7.0 || *x > w as f64 - 8.0 || *y > h as f64 - 8.0).count();
        let ann = Annotation::new(points);
        let count: f64 = make_gt_density(&ann, w, h).map_err(err)?.values.iter().sum();
        worst = worst.max((count - ann.len() as f64).abs());
        let (gw, gh) = [(1, 1), (2, 2), (4, 4), (8, 8)][i % 4];
        let gw = if w % gw == 0 { gw } else { 1 };
        let gh = if h % gh == 0 { gh } else { 1 };
        let grid = PatchGrid::new(w, h, gw, gh).map_err(err)?;
        let patch_total: f64 = make_gt_patch_counts(&ann, &grid).iter().sum();
        if patch_total != ann.len() as f64 {
            return Err(format!("annotation {i}: patch counts sum to {patch_total}, expected {}", ann.len()));
        }
    }
    check(worst < 1e-4, format!("1000 annotations ({border} heads near a border), max |count - heads| = {worst:.1e}"))
}

fn metric_oracle() -> Outcome {
    let mut rng = rng_for(6, "metrics");
    for i in 0..1000 {
        let n = rng.random_range(1..=100);
        let scale = 10f64.powf(rng.random_range(-2.0..3.0));
        let est: Vec<f64> = (0..n).map(|_| scale * rng.random::<f64>()).collect();
        let truth: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..1000u32))).collect();
        let (mae, rmse) = mae_rmse(&est, &truth).map_err(err)?;
        let mut abs = 0.0;
        let mut sq = 0.0;
        for k in 0..n {
            let d = est[k] - truth[k];
            abs += d.abs();
            sq += d * d;
        }
        let (o_mae, o_rmse) = (abs / n as f64, (sq / n as f64).sqrt());
        if mae != o_mae || rmse != o_rmse || rmse < mae {
            return Err(format!("vector {i}: ({mae}, {rmse}) vs oracle ({o_mae}, {o_rmse})"));
        }
    }
    Ok("1000 vectors identical to the oracle, RMSE >= MAE throughout".into())
}

fn block_means(values: &[f64], block: usize) -> Vec<f64> {
    values.chunks(block).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

fn training_descent() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(err)?;
    let (data, out) = (dir.path().join("data"), dir.path().join("run"));
    gen_dataset(&SynthConfig::toy(64, 70), &data).map_err(err)?;
    let mut cfg = recipe(&data, &out)?;
    cfg.epochs = 200;
    // Descent is measured from the standard batchnorm initialization.
    cfg.head_gain = Config::default().head_gain;
    let res = train(&cfg).map_err(err)?;
    let loss: Vec<f64> = res.metrics.iter().map(|m| m.total).collect();
    let mae: Vec<f64> = res.metrics.iter().map(|m| m.val_mae).collect();
    let drop = 1.0 - loss[loss.len() - 1] / loss[0];
    let blocks = block_means(&mae, 50);
    let decreasing = blocks.windows(2).all(|w| w[1] < w[0]);
    let secs = start.elapsed().as_secs_f64();
    check(
        drop >= 0.5 && decreasing && secs < 1800.0,
        format!(
            "loss {:.4} -> {:.4} ({:.1}% drop), MAE per 50 epochs {:?}, {secs:.0}s",
            loss[0],
            loss[loss.len() - 1],
            100.0 * drop,
            blocks.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>()
        ),
    )
}

fn audio_claim() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(err)?;
    let (data, test) = (dir.path().join("train"), dir.path().join("test"));
    gen_dataset(&SynthConfig::toy(256, 80), &data).map_err(err)?;
    gen_dataset(&SynthConfig::toy(64, 81), &test).map_err(err)?;
    let rates = [0.0, 0.5, 1.0];
    let mut maes = Vec::new();
    for cc_v in [false, true] {
        let out = dir.path().join(if cc_v { "cc_v" } else { "cc_av" });
        let mut cfg = recipe(&data, &out)?;
        cfg.flags.cc_v = cc_v;
        cfg.val_data = Some(test.clone());
        train(&cfg).map_err(err)?;
        let ck = Checkpoint::load(&out.join(CHECKPOINT_FILE)).map_err(err)?;
        let (stored, model, store) = load_model(&ck, Some(&cfg)).map_err(err)?;
        let set = load(&stored, &test)?;
        let sweep = occlusion_sweep(&model, &store, &set, &rates, 81, 1).map_err(err)?;
        maes.push(sweep.iter().map(|r| r.mae).collect::<Vec<_>>());
    }
    let (av, v) = (&maes[0], &maes[1]);
    let (jump_av, jump_v) = (av[2] - av[0], v[2] - v[0]);
    check(
        av[2] < v[2] && jump_v > jump_av,
        format!(
            "MAE at OR 0/0.5/1: CC-AV {:.2}/{:.2}/{:.2}, CC-V {:.2}/{:.2}/{:.2}; jump CC-AV {jump_av:.2}, CC-V {jump_v:.2}; {:.0}s",
            av[0],
            av[1],
            av[2],
            v[0],
            v[1],
            v[2],
            start.elapsed().as_secs_f64()
        ),
    )
}

const ABLATIONS: [&str; 7] =
    ["no_aux_loss", "no_pir", "no_pce", "no_avt", "no_ccm", "no_audio_in_fusion", "single_branch"];

fn ablation_harness() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let data = dir.path().join("data");
    gen_dataset(&SynthConfig::toy(8, 90), &data).map_err(err)?;
    let mut runs: Vec<(String, String)> = Vec::new();
    for flag in ABLATIONS {
        let mut cfg = recipe(&data, &dir.path().join(flag))?;
        cfg.epochs = 1;
        *cfg.flags.get_mut(flag).ok_or("unknown flag")? = true;
        let res = train(&cfg).map_err(|e| format!("{flag}: {e}"))?;
        let log = std::fs::read_to_string(&res.log).map_err(err)?;
        let line = log.lines().last().unwrap_or("").to_string();
        if res.metrics.len() != 1 {
            return Err(format!("{flag}: {} metric lines", res.metrics.len()));
        }
        runs.push((res.header, line));
    }
    let distinct = |f: &dyn Fn(&(String, String)) -> &String| {
        runs.iter().enumerate().filter(|(i, a)| runs[i + 1..].iter().all(|b| f(a) != f(b))).count()
    };
    let formulas: std::collections::BTreeSet<String> =
        runs.iter().filter_map(|(h, _)| h.lines().nth(1).map(str::to_string)).collect();
    // With audio the co-attention weights are uniform, so the density never
    // sees the transformer output: dropping the transformer and dropping its
    // losses train the same density path. Only the headers must differ.
    let headers = distinct(&|r| &r.0);
    check(
        headers == runs.len(),
        format!(
            "7 configurations trained; {headers} distinct headers, {} loss formulas, {} distinct loss lines",
            formulas.len(),
            distinct(&|r| &r.1)
        ),
    )
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let data = dir.path().join("data");
    gen_dataset(&SynthConfig::toy(16, 100), &data).map_err(err)?;
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let mut cfg = recipe(&data, &out)?;
        cfg.epochs = 3;
        cfg.threads = 1;
        cfg.seed = 7;
        train(&cfg).map_err(err)?;
        let ck = Checkpoint::load(&out.join(CHECKPOINT_FILE)).map_err(err)?;
        let (stored, model, store) = load_model(&ck, None).map_err(err)?;
        let report = avcc_core::harness::evaluate(&model, &store, &load(&stored, &data)?, None, 7, 1).map_err(err)?;
        let read = |f: &str| std::fs::read(out.join(f)).map_err(err);
        files.push((read(LOG_FILE)?, read(CHECKPOINT_FILE)?, report.to_text()));
    }
    check(
        files[0] == files[1],
        format!("3-epoch runs: log {} B, checkpoint {} B, evaluation report identical", files[0].0.len(), files[0].1.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient oracle", gradient_oracle),
        ("shape contract", shape_contract),
        ("stochasticity", stochasticity),
        ("loss identities", loss_identities),
        ("mass conservation", mass_conservation),
        ("metric oracle", metric_oracle),
        ("training descent", training_descent),
        ("directional audio claim", audio_claim),
        ("ablation harness", ablation_harness),
        ("reproducibility", reproducibility),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        match run() {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
