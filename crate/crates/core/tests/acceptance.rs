//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.
//!
//! The training criteria (9, 10) run a reduced-budget sweep by default. Set
//! `LBT_ACCEPTANCE_BUDGET=full` for the full default schedule and
//! `LBT_ACCEPTANCE_OUT=<dir>` to keep the sweep's run directories.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lbt_core::boxgeom::{encode_deltas, hflip_box, mirror_delta, nms};
use lbt_core::data::{generate_dataset, Dataset, ShapesConfig};
use lbt_core::detector::DetectorParams;
use lbt_core::eval::{average_precision, evaluate_detections};
use lbt_core::experiment::{run_sweep, Method, SweepResult, SweepSpec};
use lbt_core::losses::{
    consistency_loc_grad, consistency_loc_loss, cross_entropy, cross_entropy_grad, focal_loss, focal_loss_grad,
    smooth_l1, smooth_l1_grad, softmax, softmax_backward,
};
use lbt_core::pseudolabel::{filter_candidates, generate_pseudo_labels};
use lbt_core::trainer::{burn_in_step, ema_update, train, TrainConfig, TrainOptions, TrainState};
use lbt_core::{Annotation, ArchConfig, BBox, DeltaVector, Detection};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_box(r: &mut ChaCha8Rng, extent: f64) -> BBox {
    let x = r.random_range(0.0..extent * 0.7);
    let y = r.random_range(0.0..extent * 0.7);
    let w = r.random_range(2.0..extent * 0.3);
    let h = r.random_range(2.0..extent * 0.3);
    BBox::new(x, y, x + w, y + h).unwrap()
}

fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if inter == 0.0 {
        0.0
    } else {
        inter / union
    }
}

// ---------------------------------------------------------------- 1

fn oracle_nms(dets: &[Detection], thr: f64, classwise: bool) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..dets.len()).collect();
    let mut keep = Vec::new();
    while !remaining.is_empty() {
        let best = *remaining
            .iter()
            .max_by(|&&i, &&j| dets[i].score.total_cmp(&dets[j].score).then(j.cmp(&i)))
            .unwrap();
        keep.push(best);
        remaining.retain(|&j| {
            j != best
                && !((!classwise || dets[j].class_id == dets[best].class_id)
                    && ref_iou(&dets[best].bbox, &dets[j].bbox) >= thr)
        });
    }
    keep
}

fn criterion_nms() -> Outcome {
    let mut r = rng(1);
    let start = Instant::now();
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = r.random_range(0..=25);
        let dets: Vec<Detection> = (0..n)
            .map(|_| Detection::new(random_box(&mut r, 60.0), r.random_range(0..3), r.random()))
            .collect();
        let thr = [0.3, 0.5, 0.7][r.random_range(0..3)];
        let classwise = r.random_bool(0.5);
        let mut got = nms(&dets, thr, classwise);
        let mut want = oracle_nms(&dets, thr, classwise);
        got.sort_unstable();
        want.sort_unstable();
        mismatches += (got != want) as usize;
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        mismatches == 0 && secs < 5.0,
        format!("200 instances (n <= 25), {mismatches} keep-set mismatches, {secs:.3} s (limit 5 s)"),
    )
}

// ---------------------------------------------------------------- 2

/// Reference evaluator: pooled greedy matching, then for every recall level
/// the best precision among all prefixes reaching it.
fn reference_ap(dets: &[Vec<Detection>], gts: &[Vec<Annotation>], class: usize, thr: f64) -> f64 {
    let n_gt: usize = gts.iter().map(|g| g.iter().filter(|a| a.class_id == class).count()).sum();
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for (ds, gs) in dets.iter().zip(gts) {
        let mut mine: Vec<&Detection> = ds.iter().filter(|d| d.class_id == class).collect();
        mine.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut used = vec![false; gs.len()];
        for d in mine {
            let mut best = None;
            let mut best_iou = thr;
            for (g, a) in gs.iter().enumerate() {
                if used[g] || a.class_id != class {
                    continue;
                }
                let v = ref_iou(&d.bbox, &a.bbox);
                if v >= best_iou && best.is_none_or(|_| v > best_iou) {
                    best = Some(g);
                    best_iou = v;
                }
            }
            if let Some(g) = best {
                used[g] = true;
            }
            scored.push((d.score, best.is_some()));
        }
    }
    if n_gt == 0 {
        return if scored.is_empty() { 1.0 } else { 0.0 };
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut total = 0.0;
    for level in 0..=100 {
        let mut best: f64 = 0.0;
        let mut tp = 0;
        for (k, &(_, hit)) in scored.iter().enumerate() {
            tp += hit as usize;
            if tp as f64 / n_gt as f64 >= level as f64 / 100.0 - 1e-12 {
                best = best.max(tp as f64 / (k + 1) as f64);
            }
        }
        total += best;
    }
    total / 101.0
}

fn criterion_ap() -> Outcome {
    let mut r = rng(2);
    let names: Vec<String> = (0..3).map(|c| format!("c{c}")).collect();
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let images = r.random_range(1..5);
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for _ in 0..images {
            let g: Vec<Annotation> = (0..r.random_range(0..5))
                .map(|_| Annotation::new(random_box(&mut r, 40.0), r.random_range(0..3)))
                .collect();
            let mut d = Vec::new();
            for a in g.iter().filter(|_| r.random_bool(0.8)).collect::<Vec<_>>() {
                let s = r.random_range(-4.0..4.0);
                let b = BBox::new(a.bbox.x1 + s, a.bbox.y1, a.bbox.x2 + s, a.bbox.y2).unwrap();
                d.push(Detection::new(b, a.class_id, r.random()));
            }
            for _ in 0..r.random_range(0..4) {
                d.push(Detection::new(random_box(&mut r, 40.0), r.random_range(0..3), r.random()));
            }
            gts.push(g);
            dets.push(d);
        }
        if gts.iter().all(|g| g.is_empty()) {
            gts[0].push(Annotation::new(random_box(&mut r, 40.0), 0));
        }
        let rep = evaluate_detections(&dets, &gts, &names).map_err(|e| e.to_string())?;
        let scored: Vec<usize> = (0..3)
            .filter(|&c| gts.iter().flatten().any(|a| a.class_id == c))
            .collect();
        for (t, thr) in rep.iou_thresholds.iter().enumerate() {
            for &c in &scored {
                worst = worst.max((rep.per_class[c].ap[t] - reference_ap(&dets, &gts, c, *thr)).abs());
            }
        }
        let ap50: f64 = scored.iter().map(|&c| reference_ap(&dets, &gts, c, 0.5)).sum::<f64>() / scored.len() as f64;
        worst = worst.max((rep.ap50 - ap50).abs());
    }
    let hand = average_precision(&[true, false, true], 2);
    let want = (51.0 + 50.0 * (2.0 / 3.0)) / 101.0;
    check(
        worst <= 1e-6 && hand == want,
        format!("50 fixtures, max |AP - reference| = {worst:.2e} (tol 1e-6); hand case {hand} vs {want}"),
    )
}

// ---------------------------------------------------------------- 3

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-5;
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn deltas_of(x: &[f64]) -> Vec<DeltaVector> {
    x.chunks(4).map(|c| DeltaVector::new(c[0], c[1], c[2], c[3])).collect()
}

fn criterion_gradients() -> Outcome {
    let mut r = rng(3);
    let mut worst = [0.0f64; 4];
    for _ in 0..50 {
        // Classification losses through the softmax, as the heads use them.
        let k = r.random_range(2..6);
        let z: Vec<f64> = (0..k).map(|_| r.random_range(-3.0..3.0)).collect();
        let t = r.random_range(0..k);
        let gamma = r.random_range(0.5..3.0);
        let p = softmax(&z);
        let a = softmax_backward(&p, &focal_loss_grad(&p, t, gamma));
        let n = numeric_grad(&z, |z| focal_loss(&softmax(z), t, gamma));
        worst[0] = worst[0].max(rel_err(&a, &n));
        let a = softmax_backward(&p, &cross_entropy_grad(&p, t));
        let n = numeric_grad(&z, |z| cross_entropy(&softmax(z), t));
        worst[1] = worst[1].max(rel_err(&a, &n));

        // Smooth-L1, residuals kept clear of the quadratic/linear switch.
        let beta = r.random_range(0.1..1.0);
        let target = DeltaVector::from_array(std::array::from_fn(|_| r.random_range(-1.0..1.0)));
        let pred: [f64; 4] = std::array::from_fn(|i| {
            let tv = target.to_array()[i];
            loop {
                let v: f64 = r.random_range(-2.0..2.0);
                let d = (v - tv).abs();
                if (d - beta).abs() > 1e-3 && d > 1e-3 {
                    break v;
                }
            }
        });
        let a = smooth_l1_grad(&DeltaVector::from_array(pred), &target, beta).to_array();
        let n = numeric_grad(&pred, |p| smooth_l1(&DeltaVector::new(p[0], p[1], p[2], p[3]), &target, beta));
        worst[2] = worst[2].max(rel_err(&a, &n));

        // Consistency localization over both delta lists.
        let m = r.random_range(1..7);
        let mut mask: Vec<bool> = (0..m).map(|_| r.random_bool(0.7)).collect();
        mask[r.random_range(0..m)] = true;
        let x: Vec<f64> = (0..8 * m).map(|_| r.random_range(-1.0..1.0)).collect();
        let (orig, flip) = x.split_at(4 * m);
        let (go, gf) = consistency_loc_grad(&deltas_of(orig), &deltas_of(flip), &mask).unwrap();
        let a: Vec<f64> = go.iter().chain(&gf).flat_map(|d| d.to_array()).collect();
        let n = numeric_grad(&x, |x| {
            let (o, f) = x.split_at(4 * m);
            consistency_loc_loss(&deltas_of(o), &deltas_of(f), &mask).unwrap()
        });
        worst[3] = worst[3].max(rel_err(&a, &n));
    }
    check(
        worst.iter().all(|&w| w < 1e-4),
        format!(
            "50 points each, max relative error focal {:.1e}, cross-entropy {:.1e}, smooth-L1 {:.1e}, con_loc {:.1e} (tol 1e-4, h 1e-5)",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_flip() -> Outcome {
    let mut r = rng(4);
    let width = 96.0;
    let mut worst: f64 = 0.0;
    let mut origs = Vec::new();
    let mut flips = Vec::new();
    for _ in 0..100 {
        let a = random_box(&mut r, width);
        let t = random_box(&mut r, width);
        let lhs = encode_deltas(&hflip_box(&a, width), &hflip_box(&t, width));
        let rhs = mirror_delta(&encode_deltas(&a, &t));
        for (x, y) in lhs.to_array().iter().zip(rhs.to_array()) {
            worst = worst.max((x - y).abs());
        }
        let d = encode_deltas(&a, &t);
        origs.push(d);
        flips.push(mirror_delta(&d));
    }
    let mask = vec![true; origs.len()];
    let zero = consistency_loc_loss(&origs, &flips, &mask).unwrap();
    let mut positive = 0;
    for i in 0..100 {
        let mut bent = flips.clone();
        let c = i % 4;
        let mut arr = bent[i].to_array();
        arr[c] += r.random_range(0.01..0.5) * if r.random_bool(0.5) { 1.0 } else { -1.0 };
        bent[i] = DeltaVector::from_array(arr);
        positive += (consistency_loc_loss(&origs, &bent, &mask).unwrap() > 0.0) as usize;
    }
    check(
        worst <= 1e-9 && zero == 0.0 && positive == 100,
        format!(
            "100 pairs, max equivariance error {worst:.1e} (tol 1e-9); con_loc = {zero} on mirrored inputs, > 0 on {positive}/100 perturbed"
        ),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_ema() -> Outcome {
    let arch = ArchConfig::default();
    let t0 = DetectorParams::init(&arch, 51).unwrap();
    let s = DetectorParams::init(&arch, 52).unwrap();
    let alpha: f64 = 0.99;
    let mut t = t0.clone();
    for _ in 0..10 {
        ema_update(&mut t, &s, alpha).unwrap();
    }
    let a10 = alpha.powi(10);
    // Parameters are stored in f32: one rounding per step, ten steps.
    let mut worst_ulps: f64 = 0.0;
    for ((tk, ti), sv) in t.tensors.iter().zip(&t0.tensors).zip(&s.tensors) {
        for ((&got, &init), &st) in tk.data.iter().zip(&ti.data).zip(&sv.data) {
            let want = a10 * (init as f64 - st as f64) + st as f64;
            let scale = want.abs().max(init.abs() as f64).max(1e-3) * f32::EPSILON as f64;
            worst_ulps = worst_ulps.max((got as f64 - want).abs() / scale);
        }
    }
    let mut copy = t0.clone();
    ema_update(&mut copy, &s, 0.0).unwrap();
    check(
        worst_ulps <= 10.0 && copy == s,
        format!(
            "{} parameters, 10 steps at alpha 0.99: max error {worst_ulps:.2} f32 eps (tol 10); alpha 0 copy exact: {}",
            t.num_scalars(),
            copy == s
        ),
    )
}

// ---------------------------------------------------------------- 6

fn criterion_order() -> Outcome {
    let a = BBox::new(0.0, 0.0, 100.0, 10.0).unwrap();
    let b = BBox::new(20.0, 0.0, 100.0, 10.0).unwrap();
    let overlap = ref_iou(&a, &b);
    let cands = [Detection::new(a, 1, 0.65), Detection::new(b, 1, 0.6)];
    let nms_first = filter_candidates(&cands, 0.7, 0.5);
    // Threshold first, then NMS, for comparison.
    let kept: Vec<Detection> = cands.iter().copied().filter(|d| d.score >= 0.7).collect();
    let thr_first: Vec<Detection> = nms(&kept, 0.5, true).into_iter().map(|i| kept[i]).collect();
    check(
        (overlap - 0.8).abs() < 1e-12 && nms_first.is_empty(),
        format!(
            "scores {{0.65, 0.6}}, IoU {overlap}, delta 0.7: NMS-then-threshold keeps {}; threshold-then-NMS keeps {} (both orders agree here)",
            nms_first.len(),
            thr_first.len()
        ),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_delta_monotone(ds: &Dataset) -> Outcome {
    // Teachers fit to a small pool are confident on it, so the sets under
    // comparison are not trivially empty.
    let pool = &ds.train[..12];
    let cfg = TrainConfig {
        batch_labeled: 4,
        disable_con_loc: true,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&cfg.arch, 70).map_err(|e| e.to_string())?;
    let mut teachers = Vec::new();
    let mut r = rng(7);
    for step in 1..=400 {
        let batch: Vec<_> = pool.choose_multiple(&mut r, 4).collect();
        burn_in_step(&mut state, &cfg, &batch).map_err(|e| e.to_string())?;
        if step > 300 && step % 5 == 0 {
            teachers.push(state.student.clone());
        }
    }
    let mut violations = 0;
    let mut sizes = [0usize; 3];
    for teacher in &teachers {
        let img = pool.choose(&mut r).unwrap();
        let sets: Vec<Vec<Detection>> = [0.9, 0.7, 0.5]
            .iter()
            .map(|&d| generate_pseudo_labels(teacher, &img.pixels, &img.image_id, d, 0.5, 0).unwrap().labels)
            .collect();
        for (i, s) in sets.iter().enumerate() {
            sizes[i] += s.len();
        }
        for w in sets.windows(2) {
            violations += w[0].iter().filter(|d| !w[1].contains(d)).count();
        }
    }
    check(
        violations == 0 && teachers.len() == 20 && sizes[2] > 0,
        format!(
            "{} teacher/image pairs, {violations} inclusion violations; labels at delta 0.9/0.7/0.5: {}/{}/{}",
            teachers.len(),
            sizes[0],
            sizes[1],
            sizes[2]
        ),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_overfit(ds: &Dataset) -> Outcome {
    let cfg = TrainConfig {
        batch_labeled: 1,
        disable_con_loc: true,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&cfg.arch, 80).map_err(|e| e.to_string())?;
    let image = ds.train.iter().find(|a| a.annotations.len() >= 2).unwrap_or(&ds.train[0]);
    let batch = [image];
    let mut first = None;
    let mut last = 0.0;
    let mut all_finite = true;
    for _ in 0..=200 {
        let loss = burn_in_step(&mut state, &cfg, &batch).map_err(|e| e.to_string())?;
        all_finite &= loss.is_finite();
        last = loss.supervised().total();
        first.get_or_insert(last);
    }
    let first = first.unwrap();
    check(
        all_finite && last < 0.25 * first,
        format!(
            "one image, 200 steps: supervised total {first:.4} -> {last:.4} ({:.1}% of initial, limit 25%), finite throughout: {all_finite}",
            100.0 * last / first
        ),
    )
}

// ---------------------------------------------------------------- 9, 10

fn sweep_config() -> TrainConfig {
    let full = std::env::var("LBT_ACCEPTANCE_BUDGET").is_ok_and(|v| v == "full");
    let base = TrainConfig::default();
    let (burn_in, total) = if full {
        (base.burn_in_iterations, base.total_iterations)
    } else {
        (600, 2400)
    };
    TrainConfig {
        burn_in_iterations: burn_in,
        total_iterations: total,
        eval_interval: total,
        checkpoint_interval: total,
        log_interval: 100,
        dump_pseudo_labels: false,
        ..base
    }
}

fn run_directional_sweep(ds: &Dataset) -> Result<SweepResult, String> {
    let spec = SweepSpec {
        fractions: vec![0.05],
        methods: Method::ALL.to_vec(),
        seeds: vec![1, 2, 3],
        base: sweep_config(),
    };
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = match std::env::var_os("LBT_ACCEPTANCE_OUT") {
        Some(dir) => Path::new(&dir).to_path_buf(),
        None => tmp.path().to_path_buf(),
    };
    let start = Instant::now();
    let result = run_sweep(&spec, ds, &out, 1).map_err(|e| e.to_string())?;
    println!("sweep: {} runs in {:.0} s", result.runs.len(), start.elapsed().as_secs_f64());
    print!("{}", lbt_core::experiment::summary_table(&result.summary));
    Ok(result)
}

fn mean_ap50(sweep: &SweepResult, m: Method) -> f64 {
    let row = sweep.summary.iter().find(|r| r.method == m).unwrap();
    row.ap50_mean
}

fn criterion_directional(sweep: &SweepResult) -> Outcome {
    let sup = mean_ap50(sweep, Method::SupervisedOnly);
    let con = mean_ap50(sweep, Method::BurnInPlusConloc);
    let full = mean_ap50(sweep, Method::FullLowerBiased);
    let cfg = sweep_config();
    check(
        full - sup >= 0.03 && con >= sup,
        format!(
            "5% labels, 3 seeds, {}+{} iterations: AP50 supervised_only {:.2}, burn_in_plus_conloc {:.2}, full_lower_biased {:.2} (gap {:+.2}, need >= +3)",
            cfg.burn_in_iterations,
            cfg.total_iterations - cfg.burn_in_iterations,
            100.0 * sup,
            100.0 * con,
            100.0 * full,
            100.0 * (full - sup)
        ),
    )
}

fn criterion_teacher_vs_student(sweep: &SweepResult) -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    for run in sweep.runs.iter().filter(|r| r.method == Method::FullLowerBiased) {
        let teacher = run.teacher.map_or(f64::NAN, |t| t.map);
        let ok = teacher >= run.student.map - 0.005;
        wins += ok as usize;
        parts.push(format!("seed {}: {:.2} vs {:.2}", run.seed, 100.0 * teacher, 100.0 * run.student.map));
    }
    check(
        wins >= 2,
        format!("teacher mAP >= student mAP - 0.5 in {wins}/3 seeds ({})", parts.join(", ")),
    )
}

// ---------------------------------------------------------------- 11

fn criterion_reproducible() -> Outcome {
    let shapes = ShapesConfig {
        n_train: 60,
        n_test: 8,
        image_size: 64,
        min_object_size: 12,
        max_object_size: 28,
        max_objects: 3,
        ..ShapesConfig::default()
    };
    let ds = generate_dataset(&shapes, 110).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        seed: 11,
        labeled_fraction: 0.2,
        burn_in_iterations: 6,
        total_iterations: 16,
        batch_labeled: 2,
        batch_unlabeled: 2,
        delta: 0.4,
        log_interval: 1,
        eval_interval: 8,
        checkpoint_interval: 4,
        arch: ArchConfig {
            image_size: 64,
            backbone_channels: vec![8, 12, 12],
            backbone_strides: vec![2, 2, 2],
            rpn_channels: 12,
            anchor_sizes: vec![14.0, 24.0],
            anchor_ratios: vec![1.0],
            roi_pool_size: 2,
            roi_hidden: 24,
            rpn_pre_nms_top_n: 80,
            rpn_post_nms_top_n: 24,
            ..ArchConfig::default()
        },
        ..TrainConfig::default()
    };
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let run = |dir: &Path, opts: TrainOptions| train(&cfg, &ds, dir, &opts).map_err(|e| e.to_string());
    run(dirs[0].path(), TrainOptions::default())?;
    run(dirs[1].path(), TrainOptions::default())?;
    run(
        dirs[2].path(),
        TrainOptions {
            resume: false,
            stop_after: Some(10),
        },
    )?;
    run(
        dirs[2].path(),
        TrainOptions {
            resume: true,
            stop_after: None,
        },
    )?;
    let read = |i: usize, f: &str| std::fs::read(dirs[i].path().join(f)).unwrap_or_default();
    let metrics = read(0, "metrics.jsonl");
    let same_twice = !metrics.is_empty() && metrics == read(1, "metrics.jsonl");
    let same_resumed = metrics == read(2, "metrics.jsonl");
    let ckpt = "checkpoints/iter_16";
    let weights_match = ["student.safetensors", "teacher.safetensors", "momentum.safetensors"]
        .iter()
        .all(|f| {
            let a = read(0, &format!("{ckpt}/{f}"));
            !a.is_empty() && a == read(2, &format!("{ckpt}/{f}"))
        });
    check(
        same_twice && same_resumed && weights_match,
        format!(
            "16 iterations: metrics.jsonl byte-identical across runs: {same_twice}; stopped at 10 and resumed, matches uninterrupted: metrics {same_resumed}, final weights {weights_match}"
        ),
    )
}

// ----------------------------------------------------------------

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; a name filter
    // that matches nothing here skips the suite.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }

    let mut failures = 0;
    let mut report = |id: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(&mut *f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id:>2} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failures += 1;
                println!("FAIL {id:>2} {name}: {detail} [{secs:.1}s]");
            }
        }
    };

    report(1, "nms-oracle", &mut criterion_nms);
    report(2, "ap-oracle", &mut criterion_ap);
    report(3, "gradient-checks", &mut criterion_gradients);
    report(4, "flip-equivariance", &mut criterion_flip);
    report(5, "ema-closed-form", &mut criterion_ema);
    report(6, "pseudo-label-order", &mut criterion_order);

    let ds = generate_dataset(&ShapesConfig::default(), 0).expect("dataset");
    report(7, "delta-monotonicity", &mut || criterion_delta_monotone(&ds));
    report(8, "overfit-one-image", &mut || criterion_overfit(&ds));

    let sweep = run_directional_sweep(&ds);
    report(9, "directional-sweep", &mut || criterion_directional(sweep.as_ref().map_err(Clone::clone)?));
    report(10, "teacher-vs-student", &mut || {
        criterion_teacher_vs_student(sweep.as_ref().map_err(Clone::clone)?)
    });
    report(11, "reproducibility", &mut criterion_reproducible);

    if failures > 0 {
        println!("acceptance: {failures} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
