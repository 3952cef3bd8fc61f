//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs every criterion by default; pass criterion numbers to run a subset,
//! e.g. `cargo test -p lginr-core --test acceptance -- 4 6`.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use lginr_core::edit::{self, MirrorMode};
use lginr_core::partition::{auto_partition, compute_num_groups, plan_local_only, PlanRequest};
use lginr_core::tensors::{uniform, Matrix};
use lginr_core::{fit, metrics, reconstruct, store};
use lginr_core::{
    Bounds, CropMask, Error, MergeKind, Model, ModelSpec, PartitionGrid, Rng, Signal, TrainConfig,
};
use rand::Rng as _;

const SEEDS: u64 = 5;
const NEEDED: usize = 4;

type Check = fn() -> Result<String, String>;

fn main() {
    let wanted: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(u32, &str, Check); 10] = [
        (1, "parameter counts", c1_param_counts),
        (2, "crop proportionality and bit-exactness", c2_crop),
        (3, "gradient correctness", c3_gradients),
        (4, "desk-scale LGS vs SPP", c4_lgs_vs_spp),
        (5, "audio LGS vs SPP", c5_audio),
        (6, "merge ablation", c6_merge),
        (7, "extension ordering", c7_extension),
        (8, "auto-partitioning budget", c8_planner),
        (9, "serialization", c9_serialization),
        (10, "degenerate grids", c10_degenerate),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_text(&p))));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail} [{secs:.0}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {detail} [{secs:.0}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn panic_text(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_default()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T>(r: lginr_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// Signals ---------------------------------------------------------------

fn hash(x: u64) -> f64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ((z ^ (z >> 31)) >> 11) as f64 / (1u64 << 53) as f64
}

/// Synthetic desk scene: wall, wood grain, monitor, book stack, mug and a
/// sheet of text, plus light noise.
fn desk(h: usize, w: usize) -> Signal {
    let mut v = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let y = r as f64 / (h - 1) as f64;
            let x = c as f64 / (w - 1) as f64;
            let mut s = if y < 0.45 {
                0.55 + 0.15 * x
            } else {
                0.3 + 0.08 * (60.0 * y + 6.0 * (9.0 * x).sin()).sin()
            };
            if (0.1..0.45).contains(&x) && (0.12..0.4).contains(&y) {
                s = 0.1 + 0.05 * (140.0 * y).sin();
            }
            if (0.6..0.85).contains(&x) && (0.35..0.55).contains(&y) {
                s = 0.75 - 0.3 * (((y - 0.35) * 40.0).floor() % 2.0);
            }
            let d2 = (x - 0.5).powi(2) + (y - 0.7).powi(2);
            if d2.sqrt() < 0.07 {
                s = 0.9 - 2.0 * d2;
            }
            if (0.15..0.4).contains(&x) && (0.6..0.9).contains(&y) {
                let line = (y * 128.0) as usize % 4 == 0 && (x * 97.0).sin() > -0.3;
                s = if line { 0.2 } else { 0.95 };
            }
            s += 0.04 * (hash((r * w + c) as u64) - 0.5);
            v.push((2.0 * s - 1.0).clamp(-1.0, 1.0) as f32);
        }
    }
    Signal::new(vec![h, w], 1, v).unwrap()
}

/// One second at 16 kHz: rising chirp, silence, falling decaying chirp,
/// silence.
fn chirp_clip() -> Signal {
    use std::f64::consts::PI;
    let (n, f_lo, f_hi) = (16000, 100.0, 800.0);
    let v = (0..n)
        .map(|i| {
            let t = i as f64 / 16000.0;
            let s = if t < 0.3 {
                0.6 * (2.0 * PI * (f_lo * t + (f_hi - f_lo) * t * t / 0.6)).sin()
            } else if (0.45..0.8).contains(&t) {
                let u = t - 0.45;
                let phase = 2.0 * PI * (f_hi * u - (f_hi - 150.0) * u * u / 0.7);
                0.5 * (1.0 - u / 0.7) * phase.sin()
            } else {
                0.0
            };
            s as f32
        })
        .collect();
    Signal::new(vec![n], 1, v).unwrap()
}

fn config(iters: usize, lr: f32, seed: u64) -> TrainConfig {
    TrainConfig {
        iters,
        lr,
        seed,
        log_every: iters.max(1),
        ..TrainConfig::default()
    }
}

/// Trains from a fresh initialization and returns the final PSNR.
fn train_psnr(spec: &ModelSpec, signal: &Signal, iters: usize, lr: f32, seed: u64) -> f64 {
    let mut model = Model::init(spec.clone(), &mut Rng::new(seed)).unwrap();
    fit(&mut model, signal, &config(iters, lr, seed), None).unwrap();
    psnr_of(&model, signal)
}

fn psnr_of(model: &Model, signal: &Signal) -> f64 {
    let (rec, _) = reconstruct(model, signal.resolution(), 0.0).unwrap();
    metrics::psnr(&rec, signal).unwrap()
}

fn wins(a: &[f64], b: &[f64], margin: f64) -> usize {
    a.iter().zip(b).filter(|(x, y)| **x >= **y + margin).count()
}

fn list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ")
}

// Criterion 1 -----------------------------------------------------------

fn c1_param_counts() -> Result<String, String> {
    let unit = |f: Vec<usize>| PartitionGrid::unit(f).unwrap();
    let rows: Vec<(&str, ModelSpec, usize, Option<(usize, usize)>)> = vec![
        ("siren image", ok(ModelSpec::siren(2, 1, 256, 5))?, 198_401, None),
        ("spp image", ok(ModelSpec::spp(2, 1, 15, 5, unit(vec![16, 16])))?, 199_936, None),
        (
            "lgs image",
            ok(ModelSpec::lgs(2, 1, 14, 84, 5, unit(vec![16, 16])))?,
            198_930,
            Some((175_872, 23_058)),
        ),
        ("siren audio", ok(ModelSpec::siren(1, 1, 256, 5))?, 198_145, None),
        ("spp audio", ok(ModelSpec::spp(1, 1, 45, 5, unit(vec![32])))?, 203_072, None),
        (
            "lgs audio",
            ok(ModelSpec::lgs(1, 1, 42, 72, 5, unit(vec![32])))?,
            198_182,
            Some((177_440, 20_742)),
        ),
    ];
    for (name, spec, want, split) in &rows {
        let model = ok(Model::init(spec.clone(), &mut Rng::new(0)))?;
        let got = model.param_count();
        ensure(got == *want && model.params().len() == got, || {
            format!("{name}: {got} parameters, expected {want}")
        })?;
        if let Some((local, shared)) = split {
            let b = model.breakdown();
            ensure(b.local_weights() == *local && b.global_weights() == *shared, || {
                format!(
                    "{name}: split {}/{}, expected {local}/{shared}",
                    b.local_weights(),
                    b.global_weights()
                )
            })?;
        }
    }
    Ok(format!("{} configurations exact", rows.len()))
}

// Criterion 2 -----------------------------------------------------------

fn c2_crop() -> Result<String, String> {
    let signal = desk(128, 128);
    let spec = ok(ModelSpec::lgs(2, 1, 14, 84, 5, PartitionGrid::unit(vec![16, 16]).unwrap()))?;
    let mut model = ok(Model::init(spec, &mut Rng::new(7)))?;
    ok(fit(&mut model, &signal, &config(40, 5e-4, 7), None))?;
    let (full, _) = ok(reconstruct(&model, &[128, 128], 0.0))?;
    let bytes = ok(store::to_bytes(&model))?;
    let ids = ok(model.locate_all(&signal.coords()))?;

    let mut rng = Rng::new(99);
    let mut counts = Vec::new();
    for k in [0usize, 1, 16, 64, 128, 200, 255] {
        let drop: Vec<usize> = rand::seq::index::sample(&mut rng, 256, k).into_vec();
        let cropped = ok(edit::crop(&model, &drop))?;
        let want = 198_930 - 687 * k;
        ensure(cropped.param_count() == want, || {
            format!("k={k}: {} parameters, expected {want}", cropped.param_count())
        })?;
        ensure(cropped.param_count() + 687 * k == 198_930 && want >= 23_058, || {
            "intercept differs from 23058".into()
        })?;
        let spliced = ok(store::crop_bytes(&bytes, &drop))?;
        ensure(spliced == ok(store::to_bytes(&cropped))?, || format!("k={k}: file splice differs"))?;
        ensure(spliced.len() == bytes.len() - 4 * 687 * k, || format!("k={k}: file size"))?;

        let (after, dropped) = ok(reconstruct(&cropped, &[128, 128], 0.0))?;
        let mut kept = 0;
        for (p, &id) in ids.iter().enumerate() {
            if !drop.contains(&id) {
                kept += 1;
                ensure(after.values()[p].to_bits() == full.values()[p].to_bits(), || {
                    format!("k={k}: kept sample {p} changed")
                })?;
            }
        }
        ensure(kept + dropped == 128 * 128, || format!("k={k}: sample accounting"))?;
        counts.push(cropped.param_count());
    }
    Ok(format!(
        "params {:?} follow 198930-687k; kept reconstructions bitwise equal",
        counts
    ))
}

// Criterion 3 -----------------------------------------------------------

fn c3_gradients() -> Result<String, String> {
    const EPS: f64 = 1e-5;
    let mut worst = 0.0f64;
    let mut total = 0;
    for merge in [MergeKind::ConcatFc, MergeKind::FcAdd] {
        let spec = ok(ModelSpec::lgs(2, 1, 3, 4, 3, PartitionGrid::unit(vec![2, 2]).unwrap()))?.with_merge(merge);
        let mut rng = Rng::new(21);
        let model = ok(Model::init(spec, &mut rng))?.cast::<f64>();
        let coords = ok(uniform::<f64>(&mut rng, -1.0, 1.0, 32, 2))?;
        let targets = ok(uniform::<f64>(&mut rng, -1.0, 1.0, 32, 1))?;
        let ids = ok(model.locate_all(&coords))?;
        let loss = |m: &Model<f64>| -> f64 {
            let y = m.forward(&coords, &ids).unwrap();
            y.as_slice().iter().zip(targets.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                / y.len() as f64
        };
        let (grads, _) = ok(model.backward(&coords, &ids, &targets))?;
        let analytic: Vec<f64> = grads.groups().iter().flat_map(|(_, s)| s.to_vec()).collect();
        let mut i = 0;
        for g in 0..model.params().groups().len() {
            for j in 0..model.params().groups()[g].1.len() {
                let mut plus = model.clone();
                plus.params_mut().groups_mut()[g].1[j] += EPS;
                let mut minus = model.clone();
                minus.params_mut().groups_mut()[g].1[j] -= EPS;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * EPS);
                let a = analytic[i];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                ensure(rel < 1e-4, || format!("{merge:?} parameter {i}: {a} vs {fd}"))?;
                worst = worst.max(rel);
                i += 1;
            }
        }
        total += i;
    }
    Ok(format!("{total} parameters over both merges, worst relative error {worst:.1e}"))
}

// Criteria 4 and 6 ------------------------------------------------------

const DESK_ITERS: usize = 1000;
const IMAGE_LR: f32 = 5e-4;

fn desk_signal() -> &'static Signal {
    static S: OnceLock<Signal> = OnceLock::new();
    S.get_or_init(|| desk(128, 128))
}

/// LGS at a 20k budget with 16×16-sample partitions, i.e. factors (8, 8).
fn desk_lgs(merge: MergeKind) -> ModelSpec {
    let plan = auto_partition(&PlanRequest {
        target_total_params: 20_000,
        target_global_ratio: 0.11,
        target_partition_size: &[16, 16],
        signal_resolution: &[128, 128],
        depth: 5,
        out_dim: 1,
        merge,
    })
    .unwrap();
    assert_eq!(plan.factors, [8, 8]);
    ModelSpec::lgs(
        2,
        1,
        plan.local_hidden_dim,
        plan.global_hidden_dim,
        5,
        PartitionGrid::unit(plan.factors).unwrap(),
    )
    .unwrap()
    .with_merge(merge)
}

fn desk_concat_runs() -> &'static Vec<f64> {
    static R: OnceLock<Vec<f64>> = OnceLock::new();
    R.get_or_init(|| {
        let spec = desk_lgs(MergeKind::ConcatFc);
        (0..SEEDS)
            .map(|s| train_psnr(&spec, desk_signal(), DESK_ITERS, IMAGE_LR, s))
            .collect()
    })
}

fn c4_lgs_vs_spp() -> Result<String, String> {
    let plan = ok(plan_local_only(20_000, &[16, 16], &[128, 128], 5, 1))?;
    let spp = ok(ModelSpec::spp(2, 1, plan.local_hidden_dim, 5, PartitionGrid::unit(plan.factors).unwrap()))?;
    let lgs_spec = desk_lgs(MergeKind::ConcatFc);
    let lgs = desk_concat_runs();
    let spp_runs: Vec<f64> = (0..SEEDS)
        .map(|s| train_psnr(&spp, desk_signal(), DESK_ITERS, IMAGE_LR, s))
        .collect();
    let n = wins(lgs, &spp_runs, 0.5);
    let detail = format!(
        "LGS {} params [{}] dB vs SPP {} params [{}] dB; {n}/{SEEDS} seeds ahead by >= 0.5 dB",
        lgs_spec.param_count(),
        list(lgs),
        spp.param_count(),
        list(&spp_runs)
    );
    ensure(n >= NEEDED, || detail.clone())?;
    Ok(detail)
}

fn c6_merge() -> Result<String, String> {
    let add = desk_lgs(MergeKind::FcAdd);
    let concat = desk_concat_runs();
    let add_runs: Vec<f64> = (0..SEEDS)
        .map(|s| train_psnr(&add, desk_signal(), DESK_ITERS, IMAGE_LR, s))
        .collect();
    let n = wins(concat, &add_runs, 0.0);
    let detail = format!(
        "concat_fc [{}] dB vs fc_add {} params [{}] dB; {n}/{SEEDS} seeds concat_fc >= fc_add",
        list(concat),
        add.param_count(),
        list(&add_runs)
    );
    ensure(n >= NEEDED, || detail.clone())?;
    Ok(detail)
}

// Criterion 5 -----------------------------------------------------------

fn c5_audio() -> Result<String, String> {
    let clip = chirp_clip();
    let (size, res) = ([500usize], [16_000usize]);
    let plan = ok(auto_partition(&PlanRequest {
        target_total_params: 20_000,
        target_global_ratio: 0.11,
        target_partition_size: &size,
        signal_resolution: &res,
        depth: 5,
        out_dim: 1,
        merge: MergeKind::ConcatFc,
    }))?;
    ensure(plan.factors == [32], || format!("factors {:?}", plan.factors))?;
    let grid = || PartitionGrid::unit(vec![32]).unwrap();
    let lgs = ok(ModelSpec::lgs(1, 1, plan.local_hidden_dim, plan.global_hidden_dim, 5, grid()))?;
    let sp = ok(plan_local_only(20_000, &size, &res, 5, 1))?;
    let spp = ok(ModelSpec::spp(1, 1, sp.local_hidden_dim, 5, grid()))?;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for s in 0..SEEDS {
        a.push(train_psnr(&lgs, &clip, 1000, 1e-4, s));
        b.push(train_psnr(&spp, &clip, 1000, 1e-4, s));
    }
    let n = a.iter().zip(&b).filter(|(x, y)| x > y).count();
    let detail = format!(
        "LGS {} params [{}] dB vs SPP {} params [{}] dB; LGS ahead on {n}/{SEEDS}",
        lgs.param_count(),
        list(&a),
        spp.param_count(),
        list(&b)
    );
    ensure(n >= NEEDED, || detail.clone())?;
    Ok(detail)
}

// Criterion 7 -----------------------------------------------------------

const PRETRAIN_ITERS: usize = 500;
const FINETUNE_ITERS: usize = 300;

fn c7_extension() -> Result<String, String> {
    let full = desk_signal();
    let left = ok(full.window(&[0, 0], &[128, 64]))?;
    let plan = ok(auto_partition(&PlanRequest {
        target_total_params: 10_000,
        target_global_ratio: 0.11,
        target_partition_size: &[16, 16],
        signal_resolution: &[128, 64],
        depth: 5,
        out_dim: 1,
        merge: MergeKind::ConcatFc,
    }))?;
    let lgs = |factors: Vec<usize>| {
        ModelSpec::lgs(2, 1, plan.local_hidden_dim, plan.global_hidden_dim, 5, PartitionGrid::unit(factors).unwrap())
            .unwrap()
    };
    // Largest SIREN within the half budget.
    let h = (1..200)
        .take_while(|&h| ModelSpec::siren(2, 1, h, 5).unwrap().param_count() <= plan.predicted_total_params)
        .last()
        .unwrap();
    let siren = ok(ModelSpec::siren(2, 1, h, 5))?;

    let mse = |m: &Model| {
        let (rec, _) = reconstruct(m, full.resolution(), 0.0).unwrap();
        metrics::mse(&rec, full).unwrap()
    };
    let mut lines = Vec::new();
    let mut good = 0;
    for s in 0..SEEDS {
        let mut half = ok(Model::init(lgs(plan.factors.clone()), &mut Rng::new(s)))?;
        ok(fit(&mut half, &left, &config(PRETRAIN_ITERS, IMAGE_LR, s), None))?;
        let mut grown = ok(edit::extend(&half, &[8, 8], None, MirrorMode::Reflect))?.model;
        ok(fit(&mut grown, full, &config(FINETUNE_ITERS, IMAGE_LR, s), None))?;

        let mut scratch = ok(Model::init(lgs(vec![8, 8]), &mut Rng::new(s)))?;
        ensure(scratch.param_count() == grown.param_count(), || "budgets differ".into())?;
        ok(fit(&mut scratch, full, &config(FINETUNE_ITERS, IMAGE_LR, s), None))?;

        let mut small = ok(Model::init(siren.clone(), &mut Rng::new(s)))?;
        ok(fit(&mut small, &left, &config(PRETRAIN_ITERS, IMAGE_LR, s), None))?;
        ok(fit(&mut small, full, &config(FINETUNE_ITERS, IMAGE_LR, s), None))?;

        let (e, a, b) = (mse(&grown), mse(&scratch), mse(&small));
        if e < a && e < b {
            good += 1;
        }
        lines.push(format!("{e:.2e}/{a:.2e}/{b:.2e}"));
    }
    let detail = format!(
        "full-image MSE extended/scratch/siren per seed [{}] with {} LGS and {} SIREN params; extension best on {good}/{SEEDS}",
        lines.join(" "),
        lgs(vec![8, 8]).param_count(),
        siren.param_count()
    );
    ensure(good >= NEEDED, || detail.clone())?;
    Ok(detail)
}

// Criterion 8 -----------------------------------------------------------

fn c8_planner() -> Result<String, String> {
    let mut seen = Vec::new();
    for res in [[512usize, 512], [339, 510]] {
        for target in [50_000usize, 100_000, 200_000] {
            let plan = ok(auto_partition(&PlanRequest {
                target_total_params: target,
                target_global_ratio: 0.11,
                target_partition_size: &[32, 32],
                signal_resolution: &res,
                depth: 5,
                out_dim: 1,
                merge: MergeKind::ConcatFc,
            }))?;
            let want: Vec<usize> = res.iter().map(|r| r.div_ceil(32)).collect();
            ensure(plan.factors == want && ok(compute_num_groups(&res, &[32, 32]))? == want, || {
                format!("{res:?}: factors {:?}", plan.factors)
            })?;
            let spec = ok(ModelSpec::lgs(
                2,
                1,
                plan.local_hidden_dim,
                plan.global_hidden_dim,
                5,
                PartitionGrid::unit(plan.factors.clone()).unwrap(),
            ))?;
            let count = spec.param_count();
            let err = (count as f64 - target as f64).abs() / target as f64;
            ensure(count == plan.predicted_total_params && err <= 0.01, || {
                format!("{res:?} target {target}: {count} parameters ({:.2}% off)", 100.0 * err)
            })?;
            seen.push(format!("{}x{}/{}k:{count}", res[0], res[1], target / 1000));
        }
    }
    Ok(seen.join(" "))
}

// Criterion 9 -----------------------------------------------------------

fn random_model(rng: &mut Rng) -> Model {
    let n = rng.random_range(1..=3usize);
    let m = rng.random_range(1..=3usize);
    let depth = rng.random_range(2..=5usize);
    let h_l = rng.random_range(1..=7usize);
    let kind = rng.random_range(0..3u32);
    let factors: Vec<usize> = (0..n).map(|_| rng.random_range(1..=4usize)).collect();
    let min: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..0.0)).collect();
    let max: Vec<f64> = min.iter().map(|lo| lo + rng.random_range(0.5..4.0)).collect();
    let grid = PartitionGrid::new(Bounds::new(min, max).unwrap(), factors).unwrap();
    let spec = match kind {
        0 => ModelSpec::siren(n, m, h_l, depth).unwrap(),
        1 => ModelSpec::spp(n, m, h_l, depth, grid).unwrap(),
        _ => {
            let merge = if rng.random_bool(0.5) { MergeKind::ConcatFc } else { MergeKind::FcAdd };
            ModelSpec::lgs(n, m, h_l, rng.random_range(1..=6usize), depth, grid)
                .unwrap()
                .with_merge(merge)
                .with_merge_unit_frequency(rng.random_bool(0.3))
        }
    };
    let spec = spec.with_omega(rng.random_range(1.0..60.0f32)).unwrap();
    let model = Model::init(spec, &mut Rng::new(rng.random())).unwrap();
    let k = model.mask().len();
    if k > 1 && rng.random_bool(0.5) {
        let count = rng.random_range(1..k);
        let drop = rand::seq::index::sample(rng, k, count).into_vec();
        edit::crop(&model, &drop).unwrap()
    } else {
        model
    }
}

fn c9_serialization() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = Rng::new(2024);
    let mut dropped = 0;
    for i in 0..20 {
        let model = random_model(&mut rng);
        let a = dir.path().join(format!("{i}.lginr"));
        let b = dir.path().join(format!("{i}b.lginr"));
        ok(store::save(&model, &a))?;
        let loaded = ok(store::load(&a))?;
        ensure(loaded == model, || format!("model {i}: load differs from saved"))?;
        ok(store::save(&loaded, &b))?;
        let (ba, bb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        ensure(ba == bb, || format!("model {i}: save-load-save bytes differ"))?;
        ensure(ba.len() == ok(store::read_header(&ba))?.header_len + 4 * model.param_count(), || {
            format!("model {i}: file size")
        })?;

        // Single-partition models are cropped by the empty set.
        let kept: Vec<usize> = model.mask().kept_indices().collect();
        let count = rng.random_range(0..kept.len());
        let drop: Vec<usize> = rand::seq::index::sample(&mut rng, kept.len(), count)
            .into_iter()
            .map(|j| kept[j])
            .collect();
        let c = dir.path().join(format!("{i}c.lginr"));
        ok(store::crop_file(&a, &drop, &c))?;
        let via_model = ok(store::to_bytes(&ok(edit::crop(&ok(store::load(&a))?, &drop))?))?;
        ensure(std::fs::read(&c).unwrap() == via_model, || {
            format!("model {i}: crop_file differs from save(crop(load))")
        })?;
        dropped += drop.len();
    }
    Ok(format!(
        "20 random models round-trip bitwise; crop_file matches save(crop(load)) on all 20 ({dropped} partitions dropped)"
    ))
}

// Criterion 10 ----------------------------------------------------------

fn c10_degenerate() -> Result<String, String> {
    let signal = desk(48, 48);
    let spec = ok(ModelSpec::lgs(2, 1, 10, 16, 4, PartitionGrid::unit(vec![1, 1]).unwrap()))?;
    let mut model = ok(Model::init(spec.clone(), &mut Rng::new(3)))?;
    let b = model.breakdown();
    ensure(b.partitions == 1 && model.param_count() == b.global_weights() + b.per_partition, || {
        "single-partition accounting".into()
    })?;
    let history = ok(fit(&mut model, &signal, &config(200, IMAGE_LR, 3), None))?;
    let (first, last) = (history[0].psnr, history.last().unwrap().psnr);
    ensure(last.is_finite() && last > first, || format!("PSNR {first:.2} -> {last:.2}"))?;

    // Every coordinate lands in the single partition.
    let ids = ok(model.locate_all(&signal.coords()))?;
    ensure(ids.iter().all(|&k| k == 0), || "locate".into())?;
    let bytes = ok(store::to_bytes(&model))?;
    ensure(ok(store::from_bytes(&bytes))? == model, || "round trip".into())?;
    ensure(matches!(edit::crop(&model, &[0]), Err(Error::EmptyModel)), || {
        "cropping the only partition must fail".into()
    })?;
    ensure(matches!(CropMask::from_bits(vec![false]), Err(Error::EmptyModel)), || "mask".into())?;
    let grown = ok(edit::extend(&model, &[1, 2], None, MirrorMode::Reflect))?.model;
    let probe = ok(Matrix::from_vec(3, 2, vec![-1.0, -1.0, 0.0, 0.3, 1.0, 1.0]))?;
    let before = ok(model.predict(&probe))?;
    let after = ok(grown.predict(&probe))?;
    ensure(before.as_slice() == after.as_slice(), || "extend changed the old region".into())?;

    // More partitions than samples: partitions without samples are refused.
    let tiny = desk(16, 16);
    let over = ok(ModelSpec::lgs(2, 1, 4, 4, 3, PartitionGrid::unit(vec![32, 32]).unwrap()))?;
    let mut over = ok(Model::init(over, &mut Rng::new(1)))?;
    let err = match fit(&mut over, &tiny, &config(5, IMAGE_LR, 1), None) {
        Err(e) => e.to_string(),
        Ok(_) => return Err("32x32 partitions on a 16x16 image trained without error".into()),
    };
    let mut frac = TrainConfig { sample_fraction: 0.5, ..config(5, IMAGE_LR, 1) };
    ensure(fit(&mut over, &tiny, &frac, None).is_err(), || "sampled fit accepted empty partitions".into())?;
    frac.sample_fraction = 0.01;
    let small = ok(Model::init(ok(ModelSpec::spp(2, 1, 4, 3, PartitionGrid::unit(vec![8, 8]).unwrap()))?, &mut Rng::new(1)))?;
    ensure(fit(&mut small.clone(), &tiny, &frac, None).is_err(), || "zero samples per partition accepted".into())?;
    Ok(format!(
        "factors (1,1) trains {first:.2} -> {last:.2} dB with invariants intact; over-partitioning refused ({err})"
    ))
}
