use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use gghl::assign::{assignment_stats, generate_heatmaps, AssignConfig, HISTOGRAM_BINS};
use gghl::decode::{decode_predictions, rotated_nms, DecodeConfig, ScoreMode};
use gghl::eval::{average_precision, ImageEval};
use gghl::io::dota::{format_detections, parse_detections, parse_dota, ClassList, ObbAnnotation};
use gghl::io::render::render_heatmap_png;
use gghl::io::tensor_file::{read_labels, read_predictions, write_labels};
use gghl::loss::{finite_diff_check, total_loss, LossConfig, Regression, Weighting};
use gghl::report::Report;
use gghl::synth::{random_label_set, random_predictions, random_scene};

#[derive(Parser)]
#[command(
    name = "gghl",
    version,
    about = "Oriented Gaussian label assignment, loss and evaluation tools"
)]
struct Cli {
    /// Worker threads; 0 uses every logical core.
    #[arg(long, global = true, env = "GGHL_THREADS", default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn DOTA annotation files into label tensor files.
    Encode {
        /// Annotation file or directory of `.txt` files.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        assign: AssignArgs,
    },
    /// Print the loss of a prediction file against a label file.
    Loss {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[command(flatten)]
        loss: LossArgs,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// Label file; random tensor sets are used when omitted.
        #[arg(long, requires = "predictions")]
        labels: Option<PathBuf>,
        #[arg(long, requires = "labels")]
        predictions: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of random tensor sets.
        #[arg(long, default_value_t = 10)]
        sets: usize,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[command(flatten)]
        loss: LossArgs,
    },
    /// Decode a prediction file into DOTA detection lines.
    Decode {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        classes: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        conf: f64,
        #[arg(long, default_value_t = 0.45)]
        nms: f64,
        /// Threshold objectness alone instead of objectness times class score.
        #[arg(long)]
        obj_only: bool,
        /// Write here instead of standard output.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Average precision of detections against ground truth.
    Eval {
        /// Detection file, or directory of files named like the ground truth.
        #[arg(long)]
        detections: PathBuf,
        /// Annotation file or directory.
        #[arg(long)]
        ground_truth: PathBuf,
        #[arg(long)]
        classes: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
    },
    /// Render the heatmaps of a label file as PNG images.
    Viz {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Time label generation on a synthetic scene.
    Bench {
        #[arg(long, default_value_t = 30)]
        objects: usize,
        #[arg(long, default_value_t = 500)]
        iterations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 15)]
        num_classes: usize,
        #[arg(long, default_value_t = 800)]
        img_size: u32,
    },
    /// Assignment statistics of annotation files.
    Stats {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        assign: AssignArgs,
    },
}

#[derive(Args)]
struct AssignArgs {
    /// Class list, one name per line.
    #[arg(long)]
    classes: PathBuf,
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [8u32, 16, 32])]
    strides: Vec<u32>,
    #[arg(long, default_value_t = 3.0)]
    tau: f64,
    #[arg(long, default_value_t = 0.3)]
    t_iou: f64,
    #[arg(long, default_value_t = 800)]
    img_size: u32,
}

impl AssignArgs {
    fn load(&self) -> Result<(ClassList, AssignConfig)> {
        let classes = with_path(ClassList::load(&self.classes), &self.classes)?;
        let cfg = AssignConfig {
            strides: [self.strides[0], self.strides[1], self.strides[2]],
            tau: self.tau,
            t_iou: self.t_iou,
            img_size: self.img_size,
            num_classes: classes.len(),
        };
        cfg.validate()?;
        Ok((classes, cfg))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RegressionArg {
    Giou,
    SquaredL,
}

#[derive(Args)]
struct LossArgs {
    #[arg(long, default_value_t = 2.0)]
    gamma: f64,
    #[arg(long, value_enum, default_value = "giou")]
    regression: RegressionArg,
    /// Use unit box and class weights.
    #[arg(long)]
    unit_weights: bool,
    /// Drop the area normalisation of positive cells.
    #[arg(long)]
    no_area_norm: bool,
    /// Divide the loss by the number of positive cells.
    #[arg(long)]
    normalize: bool,
}

impl LossArgs {
    fn config(&self) -> LossConfig {
        LossConfig {
            gamma: self.gamma,
            regression: match self.regression {
                RegressionArg::Giou => Regression::Giou,
                RegressionArg::SquaredL => Regression::SquaredL,
            },
            weighting: if self.unit_weights {
                Weighting::Unit
            } else {
                Weighting::Owam
            },
            area_norm: !self.no_area_norm,
            normalize_by_positives: self.normalize,
        }
    }
}

/// Annotation files under `path`: the file itself, or the directory's
/// `.txt` files sorted by name.
fn annotation_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .with_context(|| format!("{}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "txt"))
        .collect();
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn with_path<T, E>(r: std::result::Result<T, E>, path: &Path) -> Result<T>
where
    E: std::error::Error + Send + Sync + 'static,
{
    r.with_context(|| path.display().to_string())
}

fn load_annotations(path: &Path, classes: &ClassList) -> Result<Vec<ObbAnnotation>> {
    parse_dota(path, classes).with_context(|| path.display().to_string())
}

fn encode(input: &Path, output: &Path, args: &AssignArgs) -> Result<Report> {
    let (classes, cfg) = args.load()?;
    let files = annotation_files(input)?;
    fs::create_dir_all(output).with_context(|| output.display().to_string())?;
    let results: Vec<Result<(usize, usize, usize)>> = files
        .par_iter()
        .map(|f| {
            let anns = load_annotations(f, &classes)?;
            let labels = generate_heatmaps(&anns, &cfg).with_context(|| f.display().to_string())?;
            let dest = output.join(format!("{}.gghl", stem(f)));
            with_path(write_labels(&dest, &labels), &dest)?;
            let stats = assignment_stats(&labels, &anns);
            let positives = stats.per_scale.iter().map(|s| s.positives).sum();
            Ok((anns.len(), positives, stats.mismatch))
        })
        .collect();
    let mut report = Report::new();
    report.push("files", files.len());
    let (mut objects, mut positives, mut mismatch) = (0, 0, 0);
    for (f, r) in files.iter().zip(results) {
        let (o, p, m) = r?;
        objects += o;
        positives += p;
        mismatch += m;
        report.push(format!("file.{}.objects", stem(f)), o);
    }
    report
        .push("objects", objects)
        .push("positives", positives)
        .push("mismatch", mismatch);
    Ok(report)
}

fn push_loss(report: &mut Report, b: &gghl::loss::LossBreakdown) {
    report
        .push("obj_pos", b.obj_pos)
        .push("obj_neg", b.obj_neg)
        .push("obb", b.obb)
        .push("cls", b.cls)
        .push("total", b.total)
        .push("positives", b.positives);
    for (m, s) in b.per_scale.iter().enumerate() {
        report.push(format!("scale.{m}.total"), s.total());
    }
}

fn gradcheck(
    files: Option<(&Path, &Path)>,
    seed: u64,
    sets: usize,
    h: f64,
    tolerance: f64,
    cfg: &LossConfig,
) -> Result<(Report, bool)> {
    let inputs = match files {
        Some((l, p)) => vec![(with_path(read_labels(l), l)?, with_path(read_predictions(p), p)?)],
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..sets)
                .map(|_| {
                    let labels = random_label_set(&mut rng, &[(8, 16, 16), (16, 16, 16)], 3, 0.3);
                    let preds = random_predictions(&mut rng, &labels);
                    (labels, preds)
                })
                .collect()
        }
    };
    let reports = inputs
        .par_iter()
        .map(|(l, p)| finite_diff_check(l, p, cfg, h))
        .collect::<Result<Vec<_>, _>>()?;
    let max_rel = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let max_abs = reports.iter().map(|r| r.max_abs_error).fold(0.0, f64::max);
    let pass = max_rel <= tolerance;
    let mut report = Report::new();
    report
        .push("sets", reports.len())
        .push("h", h)
        .push("checked", reports.iter().map(|r| r.checked).sum::<usize>())
        .push("excluded", reports.iter().map(|r| r.excluded).sum::<usize>())
        .push("max_rel_error", max_rel)
        .push("max_abs_error", max_abs)
        .push("tolerance", tolerance)
        .push("status", if pass { "pass" } else { "fail" });
    Ok((report, pass))
}

fn decode(predictions: &Path, classes: &Path, conf: f64, nms: f64, obj_only: bool) -> Result<String> {
    if !(conf > 0.0 && conf < 1.0) {
        bail!("--conf must lie in (0, 1), got {conf}");
    }
    if !(nms > 0.0 && nms <= 1.0) {
        bail!("--nms must lie in (0, 1], got {nms}");
    }
    let classes = with_path(ClassList::load(classes), classes)?;
    let preds = read_predictions(predictions).with_context(|| predictions.display().to_string())?;
    if preds.num_classes != classes.len() {
        bail!(
            "prediction file has {} classes, class list has {}",
            preds.num_classes,
            classes.len()
        );
    }
    let cfg = DecodeConfig {
        conf,
        score_mode: if obj_only {
            ScoreMode::ObjOnly
        } else {
            ScoreMode::ObjTimesClass
        },
        ..DecodeConfig::default()
    };
    let dets = rotated_nms(&decode_predictions(&preds, &cfg), nms);
    Ok(format_detections(&dets, &classes))
}

fn eval(detections: &Path, ground_truth: &Path, classes: &Path, iou: f64) -> Result<Report> {
    if !(iou > 0.0 && iou <= 1.0) {
        bail!("--iou must lie in (0, 1], got {iou}");
    }
    let classes = with_path(ClassList::load(classes), classes)?;
    let gt_files = annotation_files(ground_truth)?;
    let mut pairs = Vec::with_capacity(gt_files.len());
    for g in &gt_files {
        let det_path = if detections.is_dir() {
            detections.join(g.file_name().ok_or_else(|| anyhow!("bad file name {}", g.display()))?)
        } else {
            detections.to_path_buf()
        };
        let dets = if det_path.exists() {
            parse_detections(&det_path, &classes).with_context(|| det_path.display().to_string())?
        } else {
            Vec::new()
        };
        pairs.push((dets, load_annotations(g, &classes)?));
    }
    let images: Vec<ImageEval> = pairs
        .iter()
        .map(|(d, g)| ImageEval {
            detections: d,
            ground_truth: g,
        })
        .collect();
    let r = average_precision(&images, classes.len(), iou);
    let mut report = Report::new();
    report.push("iou", iou).push("images", images.len());
    for c in &r.classes {
        let name = classes.name(c.class_id).unwrap_or("unknown");
        let key = if gghl::report::is_valid_key(name) {
            name.to_string()
        } else {
            c.class_id.to_string()
        };
        match c.ap {
            Some(ap) => report.push(format!("ap.{key}"), ap),
            None => report.push(format!("ap.{key}"), "none"),
        };
    }
    report
        .push("tp", r.tp())
        .push("fp", r.fp())
        .push("fn", r.fn_())
        .push("map", r.map.map_or("none".to_string(), |m| m.to_string()));
    Ok(report)
}

fn viz(labels: &Path, output: &Path) -> Result<Report> {
    let set = read_labels(labels).with_context(|| labels.display().to_string())?;
    fs::create_dir_all(output).with_context(|| output.display().to_string())?;
    let mut report = Report::new();
    for (m, s) in set.scales.iter().enumerate() {
        let path = output.join(format!("{}_s{}.png", stem(labels), s.stride));
        with_path(render_heatmap_png(&set, m, &path), &path)?;
        report.push(format!("png.{}", s.stride), path.display());
    }
    Ok(report)
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

fn bench(objects: usize, iterations: usize, seed: u64, num_classes: usize, img_size: u32) -> Result<Report> {
    if iterations == 0 {
        bail!("--iterations must be positive");
    }
    let cfg = AssignConfig {
        img_size,
        ..AssignConfig::new(num_classes)
    };
    cfg.validate()?;
    let scene = random_scene(&mut ChaCha8Rng::seed_from_u64(seed), &cfg, objects);
    let mut times = Vec::with_capacity(iterations);
    let mut positives = 0;
    for _ in 0..iterations {
        let start = Instant::now();
        let labels = generate_heatmaps(&scene, &cfg)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        positives = labels.scales.iter().map(|s| s.positive_count()).sum();
    }
    let total: f64 = times.iter().sum();
    times.sort_by(f64::total_cmp);
    let mut report = Report::new();
    report
        .push("objects", objects)
        .push("iterations", iterations)
        .push("positives", positives)
        .push("p50_ms", percentile(&times, 0.5))
        .push("p95_ms", percentile(&times, 0.95))
        .push("mean_ms", total / iterations as f64)
        .push("images_per_sec", iterations as f64 / (total / 1e3));
    Ok(report)
}

fn stats(input: &Path, args: &AssignArgs) -> Result<Report> {
    let (classes, cfg) = args.load()?;
    let files = annotation_files(input)?;
    let per_file = files
        .par_iter()
        .map(|f| -> Result<_> {
            let anns = load_annotations(f, &classes)?;
            let labels = generate_heatmaps(&anns, &cfg).with_context(|| f.display().to_string())?;
            Ok(assignment_stats(&labels, &anns))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut positives = [0usize; 3];
    let mut negatives = [0usize; 3];
    let mut hist = [0usize; HISTOGRAM_BINS];
    let (mut objects, mut mismatch) = (0, 0);
    let mut per_object = Vec::new();
    for s in &per_file {
        objects += s.per_object_positives.len();
        mismatch += s.mismatch;
        per_object.extend(s.per_object_positives.iter().map(usize::to_string));
        for (m, sc) in s.per_scale.iter().enumerate() {
            positives[m] += sc.positives;
            negatives[m] += sc.negatives;
        }
        for (h, v) in hist.iter_mut().zip(s.heat_histogram) {
            *h += v;
        }
    }
    let mut report = Report::new();
    report
        .push("files", files.len())
        .push("objects", objects)
        .push("mismatch", mismatch);
    for m in 0..3 {
        let stride = cfg.strides[m];
        report
            .push(format!("scale.{stride}.positives"), positives[m])
            .push(format!("scale.{stride}.negatives"), negatives[m])
            .push(
                format!("scale.{stride}.ratio"),
                positives[m] as f64 / negatives[m] as f64,
            );
    }
    for (i, v) in hist.iter().enumerate() {
        report.push(format!("heat_hist.{i}"), v);
    }
    report.push("object_positives", per_object.join(","));
    Ok(report)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Encode { input, output, assign } => print!("{}", encode(&input, &output, &assign)?),
        Command::Loss {
            labels,
            predictions,
            loss,
        } => {
            let l = read_labels(&labels).with_context(|| labels.display().to_string())?;
            let p = read_predictions(&predictions).with_context(|| predictions.display().to_string())?;
            let b = total_loss(&l, &p, &loss.config())?;
            let mut report = Report::new();
            push_loss(&mut report, &b);
            print!("{report}");
        }
        Command::Gradcheck {
            labels,
            predictions,
            seed,
            sets,
            h,
            tolerance,
            loss,
        } => {
            let files = labels.as_deref().zip(predictions.as_deref());
            let (report, pass) = gradcheck(files, seed, sets, h, tolerance, &loss.config())?;
            print!("{report}");
            if !pass {
                bail!("gradient check failed");
            }
        }
        Command::Decode {
            predictions,
            classes,
            conf,
            nms,
            obj_only,
            output,
        } => {
            let text = decode(&predictions, &classes, conf, nms, obj_only)?;
            match output {
                Some(p) => fs::write(&p, text).with_context(|| p.display().to_string())?,
                None => print!("{text}"),
            }
        }
        Command::Eval {
            detections,
            ground_truth,
            classes,
            iou,
        } => print!("{}", eval(&detections, &ground_truth, &classes, iou)?),
        Command::Viz { labels, output } => print!("{}", viz(&labels, &output)?),
        Command::Bench {
            objects,
            iterations,
            seed,
            num_classes,
            img_size,
        } => print!("{}", bench(objects, iterations, seed, num_classes, img_size)?),
        Command::Stats { input, assign } => print!("{}", stats(&input, &assign)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
