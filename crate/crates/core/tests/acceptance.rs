//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each and exits non-zero if any criterion fails.
//!
//! Host-dependent parts (pipelined speed-up, training wall-clock budget)
//! are reported as not applicable when the machine has too few hardware
//! threads to make the measurement meaningful.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use image::RgbImage;
use rand::Rng;

use edgedet::augment::{
    enhanced_mosaic_mixup_report, rotated_box_from_corners, rotated_box_from_polygon, AffineParams, AugmentConfig,
};
use edgedet::data::{adapt_input_size, gen_shapes, BoxLabel, Sample, ShapesConfig};
use edgedet::geometry::BBox;
use edgedet::head::{head_forward, Detection, HeadConfig, HeadKind, HeadSpec, ModelConfig, ToyModel};
use edgedet::losses::check::run_loss_checks;
use edgedet::losses::{ciou_loss, giou_loss, hrl, lr_at, PredTargetBatch, TrainSchedule};
use edgedet::nn::init::{random_repconv, random_tensor};
use edgedet::nn::{activation, conv2d, Tensor};
use edgedet::pipeline::{bench_input_sizes, run_pipelined, run_sequential, PipelineConfig};
use edgedet::postprocess::{
    compute_ap, nms, nms_reference, postprocess_bench, EvalResult, ImageDetections, ImageGroundTruth,
    COCO_IOU_THRESHOLDS,
};
use edgedet::reparam::fuse_repconv;
use edgedet::rng::keyed;
use edgedet::train::{evaluate, train_toy, TrainConfig};

const SEED: u64 = 20_240_611;

enum Verdict {
    Pass,
    Fail,
}

struct Outcome {
    verdict: Verdict,
    detail: String,
}

fn check(ok: bool, detail: String) -> Outcome {
    Outcome { verdict: if ok { Verdict::Pass } else { Verdict::Fail }, detail }
}

fn hardware_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn time_median(reps: usize, mut f: impl FnMut()) -> f64 {
    median(
        (0..reps)
            .map(|_| {
                let t = Instant::now();
                f();
                t.elapsed().as_secs_f64()
            })
            .collect(),
    )
}

fn c1_loss_gradients() -> Outcome {
    let t = Instant::now();
    let rows = run_loss_checks(SEED, 100).expect("loss checks run");
    let secs = t.elapsed().as_secs_f64();
    for r in &rows {
        println!(
            "    {:<22} worst {:.3e} tol {:.0e} {}",
            r.name,
            r.worst,
            r.tolerance,
            if r.pass { "ok" } else { "FAIL" }
        );
    }
    let expected = ["hrl(r=0) == bce", "giou", "ciou", "l1"];
    let names_ok = expected.iter().all(|e| rows.iter().any(|r| r.name.contains(e)));
    let ok = names_ok && rows.iter().all(|r| r.pass && r.batches == 100) && secs < 60.0;
    check(ok, format!("{} checks over 100 batches each, {secs:.1}s", rows.len()))
}

fn c2_scalar_oracles() -> Outcome {
    let h = hrl(&PredTargetBatch::new(vec![0.9], vec![1.0], vec![1.0]).unwrap()).unwrap().loss;
    let g = giou_loss(&[0.0, 0.0, 1.0, 1.0], &[2.0, 2.0, 3.0, 3.0]).unwrap().loss;
    let c = ciou_loss(&[0.0, 0.0, 4.0, 4.0], &[1.0, 1.0, 3.0, 3.0]).unwrap().loss;
    let ok = (h - 0.0042144).abs() <= 1e-6 && (g - 16.0 / 9.0).abs() <= 1e-9 && (c - 0.75).abs() <= 1e-9;
    check(ok, format!("hrl {h:.7}, giou {g:.12}, ciou {c:.12}"))
}

fn c3_reparam() -> Outcome {
    let t = Instant::now();
    let mut rng = keyed(SEED, 3);
    let (mut block_diff, mut params_ok, mut ratios) = (0.0f32, true, Vec::new());
    for _ in 0..50 {
        let in_ch = rng.random_range(1..=12);
        let (out_ch, stride) = match rng.random_range(0..3) {
            0 => (in_ch, 1),
            1 => (rng.random_range(1..=12), 1),
            _ => (rng.random_range(1..=12), 2),
        };
        let block = random_repconv(&mut rng, in_ch, out_ch, stride);
        let (h, w) = (rng.random_range(6..=20), rng.random_range(6..=20));
        let x = random_tensor(&mut rng, [2, in_ch, h, w], -2.0, 2.0);
        let fused = fuse_repconv(&block).unwrap();
        let run_fused = || activation(&conv2d(&x, &fused).unwrap(), block.activation);
        block_diff = block_diff.max(block.forward(&x).unwrap().max_abs_diff(&run_fused()).unwrap());
        params_ok &= fused.param_count() < block.param_count();
        let tu = time_median(7, || drop(std::hint::black_box(block.forward(&x).unwrap())));
        let tf = time_median(7, || drop(std::hint::black_box(run_fused())));
        ratios.push(tf / tu);
    }
    let (mut head_diff, mut head_ratios) = (0.0f32, Vec::new());
    for _ in 0..20 {
        let in_channels: Vec<usize> = (0..3).map(|_| rng.random_range(4..=24)).collect();
        let cfg = HeadConfig {
            num_classes: rng.random_range(1..=6),
            head_channels: rng.random_range(4..=24),
            in_channels: in_channels.clone(),
            strides: vec![8, 16, 32],
            kind: HeadKind::Lite,
        };
        let head = HeadSpec::random(cfg, &mut rng).unwrap();
        let fused = head.fuse().unwrap();
        params_ok &= fused.param_count() < head.param_count();
        let side = 32 * rng.random_range(2..=4);
        let feats: Vec<Tensor> = in_channels
            .iter()
            .zip([8, 16, 32])
            .map(|(&c, s)| random_tensor(&mut rng, [1, c, side / s, side / s], -2.0, 2.0))
            .collect();
        let a = head_forward(&feats, &head).unwrap();
        let b = head_forward(&feats, &fused).unwrap();
        head_diff = head_diff.max(a.max_abs_diff(&b).unwrap());
        let tu = time_median(7, || drop(std::hint::black_box(head_forward(&feats, &head).unwrap())));
        let tf = time_median(7, || drop(std::hint::black_box(head_forward(&feats, &fused).unwrap())));
        head_ratios.push(tf / tu);
    }
    let (rb, rh) = (median(ratios), median(head_ratios));
    let secs = t.elapsed().as_secs_f64();
    let ok = block_diff < 1e-5 && head_diff < 1e-4 && params_ok && rb <= 1.0 && rh <= 1.0 && secs < 120.0;
    check(
        ok,
        format!(
            "block diff {block_diff:.2e}, head diff {head_diff:.2e}, fewer params {params_ok}, \
             median fused/unfused time {rb:.2} (block) {rh:.2} (head), {secs:.1}s"
        ),
    )
}

fn c4_postprocess_cost() -> Outcome {
    let one = postprocess_bench(8400, 1, 30, SEED).unwrap();
    let three = postprocess_bench(8400, 3, 30, SEED).unwrap();
    let ratio = three.median_ms / one.median_ms;
    check(
        ratio >= 1.8 && one.candidates == 8400 && three.candidates == 25200,
        format!("median {:.3} ms (1 anchor) vs {:.3} ms (3 anchors), ratio {ratio:.2}", one.median_ms, three.median_ms),
    )
}

fn random_dets(rng: &mut impl Rng, n: usize, classes: usize, extent: f32) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let (x, y) = (rng.random_range(0.0..extent), rng.random_range(0.0..extent));
            let (w, h) = (rng.random_range(2.0..extent / 4.0), rng.random_range(2.0..extent / 4.0));
            // Coarse scores force ties, which exercise the ordering rule.
            let score = (rng.random_range(1..=40) as f32) / 40.0;
            Detection { bbox: BBox::new(x, y, x + w, y + h), score, class_id: rng.random_range(0..classes) }
        })
        .collect()
}

fn same_ap(a: &EvalResult, b: &EvalResult) -> bool {
    let close = |x: f64, y: f64| (x.is_nan() && y.is_nan()) || (x - y).abs() <= 1e-12;
    a.ap_per_iou.len() == b.ap_per_iou.len()
        && a.ap_per_iou.iter().zip(&b.ap_per_iou).all(|(x, y)| x.0 == y.0 && close(x.1, y.1))
        && close(a.ap50, b.ap50)
        && close(a.ap50_95, b.ap50_95)
}

fn c5_nms_and_ap() -> Outcome {
    let mut rng = keyed(SEED, 5);
    let mut nms_ok = 0;
    for _ in 0..1000 {
        let n = rng.random_range(0..=300);
        let classes = rng.random_range(1..=4);
        let dets = random_dets(&mut rng, n, classes, 200.0);
        let thr = rng.random_range(0.05..0.95);
        if nms(&dets, thr) == nms_reference(&dets, thr) {
            nms_ok += 1;
        }
    }

    let gt = |b: BBox| vec![ImageGroundTruth { image_id: 0, labels: vec![BoxLabel::new(0, b)] }];
    let det = |b: BBox, score: f32| Detection { bbox: b, score, class_id: 0 };
    let one = |d: Vec<Detection>| vec![ImageDetections { image_id: 0, detections: d }];
    let truth = BBox::new(0.0, 0.0, 10.0, 10.0);
    let hit = BBox::new(0.0, 0.0, 10.0, 9.0);
    let miss = BBox::new(50.0, 50.0, 60.0, 60.0);
    let ap50 = |d: Vec<ImageDetections>, g: Vec<ImageGroundTruth>| compute_ap(&d, &g, &[0.5]).unwrap().ap50;
    let fixtures = [
        ap50(one(vec![det(hit, 1.0)]), gt(truth)),
        ap50(one(vec![]), gt(truth)),
        ap50(one(vec![det(hit, 0.9), det(miss, 0.8)]), gt(truth)),
        ap50(one(vec![det(miss, 0.9), det(hit, 0.8)]), gt(truth)),
    ];
    // FP first: precision is 0.5 from recall 0 up to 1, so 101 points of 0.5.
    let expected = [1.0, 0.0, 1.0, 0.5];
    let fixtures_ok = fixtures.iter().zip(expected).all(|(a, e)| (a - e).abs() < 1e-12);

    let mut scale_ok = 0;
    for i in 0..50 {
        let images = rng.random_range(1..=5);
        let gts: Vec<ImageGroundTruth> = (0..images)
            .map(|k| {
                let n = rng.random_range(1..=6);
                let labels = random_dets(&mut rng, n, 3, 120.0).into_iter().map(|d| BoxLabel::new(d.class_id, d.bbox));
                ImageGroundTruth { image_id: k, labels: labels.collect() }
            })
            .collect();
        let dets: Vec<ImageDetections> = gts
            .iter()
            .map(|g| {
                let mut d: Vec<Detection> = g
                    .labels
                    .iter()
                    .map(|l| {
                        let mut j = |v: f32| v + rng.random_range(-3.0..3.0);
                        let (x1, y1) = (j(l.bbox.x1), j(l.bbox.y1));
                        let b = BBox::new(x1, y1, j(l.bbox.x2).max(x1 + 1.0), j(l.bbox.y2).max(y1 + 1.0));
                        Detection { bbox: b, score: rng.random_range(0.05..1.0), class_id: l.class_id }
                    })
                    .collect();
                let extra = rng.random_range(0..4);
                d.extend(random_dets(&mut rng, extra, 3, 120.0));
                ImageDetections { image_id: g.image_id, detections: d }
            })
            .collect();
        let scaled_g: Vec<_> = gts
            .iter()
            .map(|g| ImageGroundTruth {
                image_id: g.image_id,
                labels: g.labels.iter().map(|l| BoxLabel::new(l.class_id, l.bbox.scale(2.0))).collect(),
            })
            .collect();
        let scaled_d: Vec<_> = dets
            .iter()
            .map(|d| ImageDetections {
                image_id: d.image_id,
                detections: d.detections.iter().map(|x| Detection { bbox: x.bbox.scale(2.0), ..*x }).collect(),
            })
            .collect();
        let a = compute_ap(&dets, &gts, &COCO_IOU_THRESHOLDS).unwrap();
        let b = compute_ap(&scaled_d, &scaled_g, &COCO_IOU_THRESHOLDS).unwrap();
        if same_ap(&a, &b) {
            scale_ok += 1;
        } else {
            println!("    scale mismatch on instance {i}: {} vs {}", a.ap50_95, b.ap50_95);
        }
    }
    check(
        nms_ok == 1000 && fixtures_ok && scale_ok == 50,
        format!("nms agrees {nms_ok}/1000, PR fixtures {fixtures:?}, 2x scale invariant {scale_ok}/50"),
    )
}

fn sparse_fixture(rng: &mut impl Rng, n: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let (w, h) = (rng.random_range(96..=320u32), rng.random_range(96..=320u32));
            let side = rng.random_range(8.0..(w.min(h) as f32 / 2.0));
            let x = rng.random_range(0.0..w as f32 - side);
            let y = rng.random_range(0.0..h as f32 - side);
            let bg = image::Rgb([rng.random(), rng.random(), rng.random()]);
            let fg = image::Rgb([rng.random(), rng.random(), rng.random()]);
            let inside = |px: u32, py: u32| {
                (px as f32) >= x && (px as f32) < x + side && (py as f32) >= y && (py as f32) < y + side
            };
            let image = RgbImage::from_fn(w, h, |px, py| if inside(px, py) { fg } else { bg });
            Sample::new(image, vec![BoxLabel::new(i % 3, BBox::new(x, y, x + side, y + side))], format!("s{i}"))
        })
        .collect()
}

fn random_polygon(rng: &mut impl Rng) -> Vec<[f32; 2]> {
    let (cx, cy) = (rng.random_range(20.0..300.0f32), rng.random_range(20.0..300.0f32));
    let n = rng.random_range(3..=12);
    let mut angles: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..std::f32::consts::TAU)).collect();
    angles.sort_by(f32::total_cmp);
    angles
        .iter()
        .map(|a| {
            let r = rng.random_range(3.0..40.0f32);
            [cx + r * a.cos(), cy + r * a.sin()]
        })
        .collect()
}

fn c6_augmentation() -> Outcome {
    let t = Instant::now();
    let mut rng = keyed(SEED, 6);
    let fixture = sparse_fixture(&mut rng, 60);
    let cfg = AugmentConfig::default();
    let (mut empty, mut consumed_ok, mut labels_in_ok) = (0, 0, 0);
    for draw in 0..1000u64 {
        let mut pick = || fixture[rng.random_range(0..fixture.len())].clone();
        let groups: Vec<Vec<Sample>> = (0..cfg.mosaic_groups).map(|_| (0..4).map(|_| pick()).collect()).collect();
        let last = pick();
        let (out, report) =
            enhanced_mosaic_mixup_report(&groups, &last, &cfg, (320, 320), &mut keyed(SEED, 6_000 + draw)).unwrap();
        empty += out.labels.is_empty() as usize;
        consumed_ok += (out.source_id.split('+').count() == 9) as usize;
        labels_in_ok += (report.labels_in == 9) as usize;
    }
    let mut contained = 0;
    for _ in 0..1000 {
        let poly = random_polygon(&mut rng);
        let params = AffineParams {
            rotation_deg: rng.random_range(-180.0..180.0),
            scale: rng.random_range(0.25..3.0),
            shear_deg: rng.random_range(-10.0..10.0),
            translate_frac: [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)],
            flip_lr: rng.random_bool(0.5),
        };
        let m = params.matrix((320, 320), (320, 320)).unwrap();
        let corner = rotated_box_from_corners(&BBox::bounding(&poly).unwrap(), &m);
        let tight = rotated_box_from_polygon(&poly, &m).unwrap();
        contained += corner.contains(&tight, 1e-6) as usize;
    }
    let secs = t.elapsed().as_secs_f64();
    check(
        empty == 0 && consumed_ok == 1000 && labels_in_ok == 1000 && contained == 1000 && secs < 120.0,
        format!(
            "empty outputs {empty}/1000, 9 sources consumed {consumed_ok}/1000, polygon box inside corner box \
             {contained}/1000, {secs:.1}s"
        ),
    )
}

fn small_model() -> edgedet::head::DetectorSpec {
    ToyModel::new(ModelConfig::new(3, 0.25), SEED).unwrap().to_spec().fuse().unwrap()
}

fn frames(n: usize, size: u32) -> Vec<RgbImage> {
    gen_shapes(&ShapesConfig { n_images: n, image_size: size, seed: SEED, ..Default::default() })
        .samples
        .into_iter()
        .map(|s| s.image)
        .collect()
}

fn c7_pipeline() -> Outcome {
    let t = Instant::now();
    let model = small_model();
    let frames = frames(200, 256);
    let cfg = PipelineConfig { input_size: (256, 256), workers_per_stage: 2, ..PipelineConfig::default() };
    let seq = run_sequential(&frames, &model, &cfg).unwrap();
    let pipe = run_pipelined(&frames, &model, &cfg).unwrap();
    let ordered = pipe.results.iter().enumerate().all(|(i, r)| r.seq == i as u64) && pipe.results.len() == 200;
    let identical = seq.error.is_none()
        && pipe.error.is_none()
        && seq.results.len() == pipe.results.len()
        && seq.results.iter().zip(&pipe.results).all(|(a, b)| {
            a.seq == b.seq
                && a.detections.len() == b.detections.len()
                && a.detections.iter().zip(&b.detections).all(|(x, y)| {
                    x.class_id == y.class_id
                        && x.score.to_bits() == y.score.to_bits()
                        && [x.bbox.x1, x.bbox.y1, x.bbox.x2, x.bbox.y2].map(f32::to_bits)
                            == [y.bbox.x1, y.bbox.y1, y.bbox.x2, y.bbox.y2].map(f32::to_bits)
                })
        });
    let threads = hardware_threads();
    let speed = if threads >= 4 {
        let load = PipelineConfig {
            input_size: (128, 128),
            stage_load: Duration::from_millis(4),
            workers_per_stage: 1,
            ..PipelineConfig::default()
        };
        let few = &frames[..100];
        let s = run_sequential(few, &model, &load).unwrap().stats.fps;
        let p = run_pipelined(few, &model, &load).unwrap().stats.fps;
        Some(p / s)
    } else {
        None
    };
    let secs = t.elapsed().as_secs_f64();
    let speed_text = match speed {
        Some(r) => format!("fps ratio {r:.2} (need >= 1.08)"),
        None => format!("fps ratio N/A on {threads} hardware thread(s), needs >= 4"),
    };
    check(
        ordered && identical && speed.is_none_or(|r| r >= 1.08) && secs < 180.0,
        format!("ordered {ordered}, bit-identical {identical} over 200 frames, {speed_text}, {secs:.1}s"),
    )
}

fn c8_input_sizes() -> Outcome {
    let adapted: Vec<(u32, u32)> =
        [(1, 1), (4, 3), (16, 9)].iter().map(|&r| adapt_input_size(r, 640).unwrap()).collect();
    let sizes_ok = adapted == [(640, 640), (640, 480), (640, 384)];
    let rows = bench_input_sizes(&small_model(), &adapted, &frames(12, 320)).unwrap();
    let mut by_pixels: Vec<_> = rows.iter().map(|r| (r.pixels, r.fps)).collect();
    by_pixels.sort_by_key(|r| r.0);
    let monotone = by_pixels.windows(2).all(|w| w[1].1 <= w[0].1);
    let fps: Vec<String> = rows.iter().map(|r| format!("{}x{} {:.1}", r.width, r.height, r.fps)).collect();
    check(sizes_ok && monotone, format!("sizes {adapted:?}, fps {}", fps.join(", ")))
}

fn c9_toy_training() -> Outcome {
    let t = Instant::now();
    let cfg = TrainConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let outcome = match train_toy(&cfg, Some(dir.path())) {
        Ok(o) => o,
        Err(e) => return check(false, format!("training failed: {e}")),
    };
    let minutes = t.elapsed().as_secs_f64() / 60.0;
    for h in &outcome.history {
        let ap = h.eval.map_or(String::new(), |e| format!(" ap50 {:.3}", e.ap50));
        println!("    epoch {:>2} stage {} loss {:.3}{ap}", h.epoch, h.stage.stage, h.loss.total);
    }
    let transitions: Vec<(usize, &str)> =
        outcome.history.iter().filter_map(|h| h.stage_transition.as_deref().map(|s| (h.epoch, s))).collect();
    let logged = transitions.len() == 3
        && transitions[0].0 == 0
        && transitions[1].0 == cfg.stage2_start_epoch
        && transitions[1].1.contains("cls/obj bce -> hrl")
        && transitions[2].0 == cfg.stage3_start_epoch
        && transitions[2].1.contains("iou giou -> ciou")
        && transitions[2].1.contains("regulation none -> l1");
    let finite = outcome.history.iter().all(|h| h.loss.is_finite());
    let mean_total =
        |hs: &[edgedet::train::EpochMetrics]| hs.iter().map(|h| h.loss.total).sum::<f64>() / hs.len() as f64;
    let n = outcome.history.len();
    let (early, late) = (mean_total(&outcome.history[..5.min(n)]), mean_total(&outcome.history[n.saturating_sub(5)..]));
    // Each epoch renders the same probe image through its input transform:
    // distinct hashes while augmenting, one hash once augmentation stops.
    let (aug, plain): (Vec<_>, Vec<_>) = outcome.history.iter().partition(|h| h.stage.augmentation_enabled);
    let hashes_ok = aug.windows(2).all(|w| w[0].input_hash != w[1].input_hash)
        && plain.windows(2).all(|w| w[0].input_hash == w[1].input_hash)
        && !plain.is_empty();
    let ap50 = outcome.final_eval.ap50;
    let val = gen_shapes(&cfg.val_shapes());
    let unfused =
        evaluate(&outcome.model.to_spec(), &val, cfg.eval_conf_thr, cfg.nms_thr, (cfg.image_size, cfg.image_size))
            .unwrap();
    let fuse_gap = (unfused.ap50 - ap50).abs().max((unfused.ap50_95 - outcome.final_eval.ap50_95).abs());
    let threads = hardware_threads();
    let budget = if threads >= 8 {
        format!("{minutes:.1} min (budget 45)")
    } else {
        format!("{minutes:.1} min, 45 min budget N/A on {threads} hardware thread(s), needs 8")
    };
    let ok = ap50 >= 0.70
        && logged
        && finite
        && early > late
        && hashes_ok
        && fuse_gap <= 0.001
        && (threads < 8 || minutes <= 45.0);
    check(
        ok,
        format!(
            "held-out AP50 {ap50:.3} (need >= 0.70), AP50:95 {:.3}, stage transitions logged {logged}, finite {finite}, \
             mean loss first/last 5 epochs {early:.3}/{late:.3}, input hashes track augmentation {hashes_ok}, \
             fused vs unfused gap {fuse_gap:.4}, {budget}",
            outcome.final_eval.ap50_95
        ),
    )
}

fn c10_lr_schedule() -> Outcome {
    let s = TrainSchedule::with_total(300);
    let max_ok = s.batch_size == 32 && (s.max_lr() - 0.005).abs() < 1e-15;
    let steps = 37;
    let zero = lr_at(0, 0, steps, &s) == 0.0;
    let mut worst = 0.0f64;
    for epoch in 0..s.warmup_epochs {
        for step in 0..steps {
            let expected = 0.005 * (epoch as f64 + step as f64 / steps as f64) / s.warmup_epochs as f64;
            worst = worst.max((lr_at(step, epoch, steps, &s) - expected).abs());
        }
    }
    let peak = (lr_at(0, s.warmup_epochs, steps, &s) - 0.005).abs() < 1e-15;
    let toy = TrainConfig::default().schedule();
    let toy_ok = (toy.max_lr() - 0.0025).abs() < 1e-15;
    check(
        max_ok && zero && worst < 1e-15 && peak && toy_ok,
        format!(
            "max lr {}, lr(0) {}, worst warm-up deviation {worst:.1e} over {} points, peak at warm-up end {peak}",
            s.max_lr(),
            lr_at(0, 0, steps, &s),
            steps * s.warmup_epochs
        ),
    )
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags such as --nocapture; a filter
    // argument limits the run to matching criteria, e.g. `-- c9`.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, &str, fn() -> Outcome); 10] = [
        ("c1", "loss correctness", c1_loss_gradients),
        ("c2", "scalar loss oracles", c2_scalar_oracles),
        ("c3", "re-parameterization", c3_reparam),
        ("c4", "post-processing cost", c4_postprocess_cost),
        ("c5", "nms and ap oracles", c5_nms_and_ap),
        ("c6", "augmentation guarantees", c6_augmentation),
        ("c7", "pipeline", c7_pipeline),
        ("c8", "input size adaptation", c8_input_sizes),
        ("c9", "toy training", c9_toy_training),
        ("c10", "lr schedule", c10_lr_schedule),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let o = run();
        let tag = match o.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                failed += 1;
                "FAIL"
            }
        };
        println!("{tag} criterion {:>2} {name}: {}", &id[1..], o.detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
