//! Command-line front end. [`dispatch`] parses arguments, runs one
//! subcommand and maps the outcome to an exit code.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use edgedet::augment::{enhanced_mosaic_mixup_report, AugmentConfig, MixupReport};
use edgedet::data::{adapt_input_size, gen_shapes, load_dataset_dir, save_dataset, Dataset, ShapesConfig};
use edgedet::geometry::BBox;
use edgedet::head::{build_toy_model, DetectorSpec};
use edgedet::io::{write_atomic, write_png};
use edgedet::losses::check::{format_table, run_loss_checks};
use edgedet::nn::Tensor;
use edgedet::pipeline::{bench_input_sizes, run_pipelined, run_sequential, PipelineConfig, PipelineReport};
use edgedet::postprocess::{coco_results_json, postprocess_bench, BenchReport, DEFAULT_NMS_THRESHOLD};
use edgedet::rng::{derive_seed, keyed};
use edgedet::train::{evaluate_with_detections, train_toy, TrainConfig, EVAL_CONF_THRESHOLD};
use edgedet::{Error, Result};
use image::{Rgb, RgbImage};
use rand::Rng;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "edgedet", version, about = "Toy anchor-free edge detector: data, training, fusion and benchmarks")]
struct Cli {
    /// Seed for every random decision.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory for all outputs.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write augmented previews with drawn boxes and label statistics.
    Augment(AugmentArgs),
    /// Generate a synthetic shapes dataset (PNG images + COCO JSON).
    GenData(GenDataArgs),
    /// Train the toy detector on synthetic shapes.
    TrainToy(TrainArgs),
    /// Evaluate a checkpoint with the fused model.
    Eval(EvalArgs),
    /// Fuse a checkpoint and report per-block output differences.
    Fuse(FuseArgs),
    /// Check every loss gradient against finite differences.
    LossCheck(LossCheckArgs),
    /// Time post-processing for 1 vs 3 candidates per cell.
    BenchPostprocess(BenchPostArgs),
    /// Compare sequential and pipelined end-to-end throughput.
    BenchPipeline(BenchPipelineArgs),
    /// Throughput at several network input sizes.
    BenchSizes(BenchSizesArgs),
}

#[derive(Args, Debug)]
struct AugmentArgs {
    /// Dataset directory written by gen-data; a synthetic set is generated when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of previews.
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 320)]
    size: u32,
    #[arg(long, default_value_t = 2)]
    mosaic_groups: usize,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 320)]
    image_size: u32,
    #[arg(long, default_value_t = 6)]
    max_objects: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    total_epochs: Option<usize>,
    #[arg(long)]
    stage2_start_epoch: Option<usize>,
    #[arg(long)]
    stage3_start_epoch: Option<usize>,
    #[arg(long)]
    train_images: Option<usize>,
    #[arg(long)]
    val_images: Option<usize>,
    #[arg(long)]
    width_mult: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_steps_per_epoch: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint (fused or not); defaults to <out-dir>/model.ckpt.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Dataset directory; defaults to the synthetic held-out split for --seed.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = EVAL_CONF_THRESHOLD)]
    conf_thr: f32,
    #[arg(long, default_value_t = DEFAULT_NMS_THRESHOLD)]
    nms_thr: f32,
    /// Network input, WxH.
    #[arg(long, default_value = "320x320", value_parser = parse_size)]
    size: (u32, u32),
}

#[derive(Args, Debug)]
struct FuseArgs {
    /// Unfused checkpoint; a freshly initialised model is used when omitted.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Defaults to <out-dir>/fused.ckpt.
    #[arg(long = "out")]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct LossCheckArgs {
    #[arg(long, default_value_t = 100)]
    batches: usize,
}

#[derive(Args, Debug)]
struct BenchPostArgs {
    #[arg(long, default_value_t = 8400)]
    cells: usize,
    #[arg(long, default_value_t = 30)]
    trials: usize,
}

#[derive(Args, Debug)]
struct BenchPipelineArgs {
    #[arg(long, default_value_t = 200)]
    frames: usize,
    /// Network input, WxH.
    #[arg(long, default_value = "320x320", value_parser = parse_size)]
    size: (u32, u32),
    #[arg(long, default_value_t = 4)]
    queue_capacity: usize,
    #[arg(long, default_value_t = 1)]
    workers_per_stage: usize,
    #[arg(long, value_enum, default_value_t = Mode::Both)]
    mode: Mode,
    /// Busy work added to every stage, in milliseconds.
    #[arg(long, default_value_t = 0.0)]
    stage_load_ms: f64,
    /// Checkpoint to run; a fused random-init model otherwise.
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum Mode {
    Seq,
    Pipe,
    Both,
}

#[derive(Args, Debug)]
struct BenchSizesArgs {
    /// Comma-separated WxH sizes; each must be a multiple of 32.
    #[arg(long, value_delimiter = ',', default_value = "640x640,640x480,640x384", value_parser = parse_size)]
    sizes: Vec<(u32, u32)>,
    /// Frame aspect ratios to adapt instead of explicit sizes, e.g. 16:9.
    #[arg(long, value_delimiter = ',', value_parser = parse_ratio, conflicts_with = "sizes")]
    ratios: Vec<(u32, u32)>,
    #[arg(long, default_value_t = 20)]
    frames: usize,
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

fn parse_pair(s: &str, sep: char) -> std::result::Result<(u32, u32), String> {
    let (a, b) = s.split_once(sep).ok_or_else(|| format!("expected A{sep}B, got `{s}`"))?;
    let num = |v: &str| v.trim().parse::<u32>().map_err(|e| format!("`{v}`: {e}"));
    Ok((num(a)?, num(b)?))
}

fn parse_size(s: &str) -> std::result::Result<(u32, u32), String> {
    parse_pair(&s.to_ascii_lowercase(), 'x')
}

fn parse_ratio(s: &str) -> std::result::Result<(u32, u32), String> {
    parse_pair(s, ':')
}

/// Runs the command line `argv` (including the program name) and returns
/// the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Some(n) = cli.threads {
        // Fails only if a pool already exists, e.g. in tests.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let out = cli.out_dir.as_path();
    match &cli.command {
        Command::Augment(a) => augment(cli.seed, out, a),
        Command::GenData(a) => gen_data(cli.seed, out, a),
        Command::TrainToy(a) => train(cli.seed, out, a),
        Command::Eval(a) => eval(cli.seed, out, a),
        Command::Fuse(a) => fuse(cli.seed, out, a),
        Command::LossCheck(a) => loss_check(cli.seed, out, a),
        Command::BenchPostprocess(a) => bench_postprocess(cli.seed, out, a),
        Command::BenchPipeline(a) => bench_pipeline(cli.seed, out, a),
        Command::BenchSizes(a) => bench_sizes(cli.seed, out, a),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(path, (text + "\n").as_bytes())
}

fn draw_box(img: &mut RgbImage, b: &BBox, color: [u8; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let clamp = |v: f32, hi: i64| (v.round() as i64).clamp(0, hi - 1);
    let (x1, y1, x2, y2) = (clamp(b.x1, w), clamp(b.y1, h), clamp(b.x2, w), clamp(b.y2, h));
    for x in x1..=x2 {
        img.put_pixel(x as u32, y1 as u32, Rgb(color));
        img.put_pixel(x as u32, y2 as u32, Rgb(color));
    }
    for y in y1..=y2 {
        img.put_pixel(x1 as u32, y as u32, Rgb(color));
        img.put_pixel(x2 as u32, y as u32, Rgb(color));
    }
}

fn augment(seed: u64, out: &Path, a: &AugmentArgs) -> Result<()> {
    let data = match &a.data {
        Some(dir) => load_dataset_dir(dir)?.0,
        None => gen_shapes(&ShapesConfig { n_images: 32, image_size: a.size, seed, ..Default::default() }),
    };
    if data.is_empty() {
        return Err(Error::invalid("data", "dataset has no images"));
    }
    let cfg = AugmentConfig { mosaic_groups: a.mosaic_groups, ..Default::default() };
    let aug_seed = derive_seed(seed, "augment-preview");
    let mut reports: Vec<MixupReport> = Vec::with_capacity(a.n);
    for i in 0..a.n {
        let mut rng = keyed(aug_seed, i as u64);
        let mut pick = || data.samples[rng.random_range(0..data.len())].clone();
        let groups: Vec<Vec<_>> = (0..cfg.mosaic_groups).map(|_| (0..4).map(|_| pick()).collect()).collect();
        let last = pick();
        let (mut sample, report) = enhanced_mosaic_mixup_report(&groups, &last, &cfg, (a.size, a.size), &mut rng)?;
        for l in &sample.labels.clone() {
            draw_box(&mut sample.image, &l.bbox, [255, 0, 255]);
        }
        write_png(&out.join(format!("augment_{i:04}.png")), &sample.image)?;
        reports.push(report);
    }
    let totals = serde_json::json!({
        "previews": a.n,
        "labels_in": reports.iter().map(|r| r.labels_in).sum::<usize>(),
        "labels_out": reports.iter().map(|r| r.labels_out).sum::<usize>(),
        "lost_in_geometry": reports.iter().map(|r| r.lost_in_geometry).sum::<usize>(),
        "dropped_too_small": reports.iter().map(|r| r.filter.too_small).sum::<usize>(),
        "dropped_mostly_hidden": reports.iter().map(|r| r.filter.mostly_hidden).sum::<usize>(),
        "per_preview": reports,
    });
    write_json(&out.join("augment_stats.json"), &totals)?;
    println!("wrote {} previews to {}", a.n, out.display());
    Ok(())
}

fn gen_data(seed: u64, out: &Path, a: &GenDataArgs) -> Result<()> {
    if a.n == 0 {
        return Err(Error::invalid("n", "must be positive"));
    }
    let cfg = ShapesConfig {
        n_images: a.n,
        image_size: a.image_size,
        max_objects: a.max_objects,
        seed,
        ..Default::default()
    };
    let data = gen_shapes(&cfg);
    save_dataset(&data, out)?;
    println!("wrote {} images with {} labels to {}", data.len(), data.label_count(), out.display());
    Ok(())
}

fn train(seed: u64, out: &Path, a: &TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig { seed, ..Default::default() },
    };
    macro_rules! apply {
        ($($field:ident),*) => { $( if let Some(v) = a.$field { cfg.$field = v; } )* };
    }
    apply!(total_epochs, stage2_start_epoch, stage3_start_epoch, train_images, val_images, width_mult, batch_size);
    if a.max_steps_per_epoch.is_some() {
        cfg.max_steps_per_epoch = a.max_steps_per_epoch;
    }
    cfg.validate()?;
    let outcome = train_toy(&cfg, Some(out))?;
    for h in &outcome.history {
        if let Some(t) = &h.stage_transition {
            println!("epoch {:>3}: {t}", h.epoch);
        }
    }
    let last = outcome.history.last().map(|h| h.loss.total).unwrap_or(f64::NAN);
    println!(
        "final loss {last:.4}; held-out AP50 {:.4}, AP50:95 {:.4}; outputs in {}",
        outcome.final_eval.ap50,
        outcome.final_eval.ap50_95,
        out.display()
    );
    write_json(&out.join("eval.json"), &outcome.final_eval)
}

fn eval(seed: u64, out: &Path, a: &EvalArgs) -> Result<()> {
    let ckpt = a.ckpt.clone().unwrap_or_else(|| out.join("model.ckpt"));
    let data: Dataset = match &a.data {
        Some(dir) => load_dataset_dir(dir)?.0,
        None => gen_shapes(&TrainConfig { seed, ..Default::default() }.val_shapes()),
    };
    let spec = DetectorSpec::load(&ckpt)?;
    let spec = if spec.is_fused() { spec } else { spec.fuse()? };
    let (result, dets) = evaluate_with_detections(&spec, &data, a.conf_thr, a.nms_thr, a.size)?;
    write_json(&out.join("eval.json"), &result)?;
    write_json(&out.join("detections.json"), &coco_results_json(&dets))?;
    println!("AP50 {:.4}  AP50:95 {:.4}  ({} images)", result.ap50, result.ap50_95, data.len());
    for c in &result.per_class {
        let name = data.class_names.get(c.class_id).map_or("?", String::as_str);
        println!("  {name:<10} gt {:>5}  AP50 {:.4}  AP50:95 {:.4}", c.num_gt, c.ap50, c.ap50_95);
    }
    Ok(())
}

fn fuse(seed: u64, out: &Path, a: &FuseArgs) -> Result<()> {
    let spec = match &a.input {
        Some(p) => DetectorSpec::load(p)?,
        None => build_toy_model(3, 0.5, seed)?.to_spec(),
    };
    if spec.is_fused() {
        return Err(Error::invalid("in", "checkpoint is already fused"));
    }
    let fused = spec.fuse()?;
    let mut rng = keyed(derive_seed(seed, "fuse-probe"), 0);
    let x = Tensor::from_fn([1, 3, 128, 128], |_| rng.random::<f32>());
    let diffs = spec.block_diffs(&fused, &x)?;
    let mut report = String::from("block     max_abs_diff\n");
    for (name, d) in &diffs {
        report += &format!("{name:<9} {d:.3e}\n");
    }
    report += &format!("params    {} -> {}\n", spec.param_count(), fused.param_count());
    let target = a.output.clone().unwrap_or_else(|| out.join("fused.ckpt"));
    fused.save(&target)?;
    let mut report_path = target.clone().into_os_string();
    report_path.push(".report.txt");
    write_atomic(Path::new(&report_path), report.as_bytes())?;
    print!("{report}");
    println!("wrote {}", target.display());
    Ok(())
}

fn loss_check(seed: u64, out: &Path, a: &LossCheckArgs) -> Result<()> {
    let rows = run_loss_checks(seed, a.batches)?;
    let table = format_table(&rows);
    print!("{table}");
    write_json(&out.join("loss_check.json"), &rows)?;
    if rows.iter().all(|r| r.pass) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{} loss check(s) failed", rows.iter().filter(|r| !r.pass).count())))
    }
}

fn bench_postprocess(seed: u64, out: &Path, a: &BenchPostArgs) -> Result<()> {
    let reports: Vec<BenchReport> =
        [1, 3].iter().map(|&k| postprocess_bench(a.cells, k, a.trials, seed)).collect::<Result<_>>()?;
    println!("{}", BenchReport::table_header());
    for r in &reports {
        println!("{}", r.table_row());
    }
    let ratio = reports[1].median_ms / reports[0].median_ms;
    println!("ratio (3 / 1 anchors): {ratio:.2}");
    write_json(&out.join("bench_postprocess.json"), &serde_json::json!({ "reports": reports, "ratio": ratio }))
}

fn load_or_init(ckpt: Option<&Path>, seed: u64) -> Result<DetectorSpec> {
    let spec = match ckpt {
        Some(p) => DetectorSpec::load(p)?,
        None => build_toy_model(3, 0.5, seed)?.to_spec(),
    };
    if spec.is_fused() {
        Ok(spec)
    } else {
        spec.fuse()
    }
}

fn bench_frames(n: usize, seed: u64) -> Vec<RgbImage> {
    let cfg = ShapesConfig { n_images: n, seed: derive_seed(seed, "bench-frames"), ..Default::default() };
    gen_shapes(&cfg).samples.into_iter().map(|s| s.image).collect()
}

fn bench_pipeline(seed: u64, out: &Path, a: &BenchPipelineArgs) -> Result<()> {
    let model = load_or_init(a.ckpt.as_deref(), seed)?;
    let cfg = PipelineConfig {
        input_size: a.size,
        queue_capacity: a.queue_capacity,
        workers_per_stage: a.workers_per_stage,
        stage_load: std::time::Duration::from_secs_f64(a.stage_load_ms.max(0.0) / 1e3),
        ..Default::default()
    };
    cfg.validate()?;
    let frames = bench_frames(a.frames, seed);
    let finish = |run: edgedet::pipeline::PipelineRun| match run.error {
        Some(e) => Err(e),
        None => Ok(run.stats),
    };
    let seq = if a.mode != Mode::Pipe { Some(finish(run_sequential(&frames, &model, &cfg)?)?) } else { None };
    let pipe = if a.mode != Mode::Seq { Some(finish(run_pipelined(&frames, &model, &cfg)?)?) } else { None };
    let report = PipelineReport::new(&cfg, seq, pipe);
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
    println!("{text}");
    write_atomic(&out.join("bench_pipeline.json"), (text + "\n").as_bytes())
}

fn bench_sizes(seed: u64, out: &Path, a: &BenchSizesArgs) -> Result<()> {
    let sizes = if a.ratios.is_empty() {
        a.sizes.clone()
    } else {
        a.ratios.iter().map(|&r| adapt_input_size(r, 640)).collect::<Result<_>>()?
    };
    let model = load_or_init(a.ckpt.as_deref(), seed)?;
    let rows = bench_input_sizes(&model, &sizes, &bench_frames(a.frames, seed))?;
    println!("{:>6} {:>6} {:>9} {:>8} {:>8}", "width", "height", "fps", "px_ratio", "fps_ratio");
    for r in &rows {
        println!("{:>6} {:>6} {:>9.2} {:>8.3} {:>8.3}", r.width, r.height, r.fps, r.pixel_ratio, r.fps_ratio);
    }
    write_json(&out.join("bench_sizes.json"), &rows)
}
