use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use frdet::analysis::{estimate_flops, sweep_squeeze_ratio};
use frdet::data::{
    draw_box, evaluate, generate_synthetic_dataset, image_to_tensor, load_dataset, read_kitti_labels, read_ppm,
    split_dataset, write_dataset, write_ppm, EvalImage, SynthSpec, DEFAULT_EVAL_IOU,
};
use frdet::network::{build_network, init_weights, parse_config, LayerGraph, NetworkConfig, Weights};
use frdet::postprocess::{format_detections, parse_detections, DecodeOptions, DEFAULT_CONF_THRESH, DEFAULT_NMS_THRESH};
use frdet::train::{predict, train_and_evaluate, TrainConfig};

const SCHEMA: u32 = 1;

/// Box colors for annotated images, indexed by class id (wrapping).
const CLASS_COLORS: [[u8; 3]; 8] = [
    [255, 64, 64],
    [64, 160, 255],
    [64, 220, 64],
    [255, 200, 0],
    [220, 64, 220],
    [0, 220, 220],
    [255, 128, 0],
    [255, 255, 255],
];

#[derive(Parser)]
#[command(name = "frdet", version, about = "FRDet detector: analysis, training, inference and evaluation")]
#[command(after_help = "Exit codes: 0 success, 1 usage error, 2 runtime error.\n\
FRDET_THREADS caps the number of worker threads.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter count, model size and BFLOPS of a network config
    Analyze(AnalyzeArgs),
    /// Model size and BFLOPS across squeeze exponents k
    Sweep(SweepArgs),
    /// Train on a dataset directory and evaluate on a held-out split
    Train(TrainArgs),
    /// Run a trained model on one PPM image
    Infer(InferArgs),
    /// AP per class and difficulty from detection and label directories
    Eval(EvalArgs),
    /// Write a synthetic two-class dataset (red rectangles, blue ellipses)
    GenData(GenDataArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Network config file
    #[arg(long)]
    config: PathBuf,
    /// Override the input resolution (multiple of 32)
    #[arg(long)]
    input_size: Option<usize>,
    /// Emit one JSON object instead of a table
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Network config file
    #[arg(long)]
    config: PathBuf,
    /// Smallest squeeze exponent
    #[arg(long, default_value_t = 1)]
    k_min: u32,
    /// Largest squeeze exponent
    #[arg(long, default_value_t = 7)]
    k_max: u32,
    /// CSV output path; the Markdown table goes to stdout
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Network config file
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory with images/ and labels/
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints, train_log.csv and eval.txt
    #[arg(long)]
    out: PathBuf,
    /// Training iterations
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    /// Seed for weight init, the train/val split and batch order
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Images per batch
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// SGD learning rate
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Fraction of images used for training; the rest is the validation split
    #[arg(long, default_value_t = 0.8)]
    split: f64,
    /// Rescale gradients whose global L2 norm exceeds this
    #[arg(long)]
    max_grad_norm: Option<f64>,
    /// Checkpoint interval in iterations (0 disables)
    #[arg(long, default_value_t = 500)]
    checkpoint_every: usize,
    /// Print losses to stderr every N iterations (0 disables)
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args)]
struct InferArgs {
    /// Network config file
    #[arg(long)]
    config: PathBuf,
    /// FRDW weights file
    #[arg(long)]
    weights: PathBuf,
    /// Binary PPM image of the network input size
    #[arg(long)]
    image: PathBuf,
    /// Minimum detection score
    #[arg(long, default_value_t = DEFAULT_CONF_THRESH)]
    conf: f64,
    /// NMS IoU threshold
    #[arg(long, default_value_t = DEFAULT_NMS_THRESH)]
    nms: f64,
    /// Score without the (1 - uncertainty) factor
    #[arg(long)]
    no_uncertainty: bool,
    /// Write a copy of the image with class-colored boxes
    #[arg(long)]
    annotate: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of <stem>.txt detection files
    #[arg(long)]
    detections: PathBuf,
    /// Directory of <stem>.txt KITTI label files
    #[arg(long)]
    labels: PathBuf,
    /// IoU needed for a match
    #[arg(long, default_value_t = DEFAULT_EVAL_IOU)]
    iou: f64,
    /// Comma-separated classes to evaluate (default: every labelled class)
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<String>>,
    /// Emit one JSON object instead of a table
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory (images/ and labels/ are created)
    #[arg(long)]
    out: PathBuf,
    /// Number of images
    #[arg(long, default_value_t = 250)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

type CliResult = Result<(), Failure>;

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn load_config(path: &Path) -> Result<NetworkConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn build(config: &NetworkConfig) -> Result<LayerGraph, Failure> {
    build_network(config).map_err(usage)
}

fn require_dir(path: &Path) -> CliResult {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{}: directory not found", path.display())))
    }
}

fn emit(text: &str) -> CliResult {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes()).and_then(|_| out.flush()).map_err(runtime)
}

fn emit_json(value: serde_json::Value) -> CliResult {
    let text = serde_json::to_string_pretty(&value).map_err(runtime)?;
    emit(&format!("{text}\n"))
}

fn analyze(args: AnalyzeArgs) -> CliResult {
    let mut config = load_config(&args.config)?;
    if let Some(size) = args.input_size {
        config.input_size = size;
    }
    let graph = build(&config)?;
    let report = estimate_flops(&graph, config.input_size).map_err(usage)?;
    if args.json {
        emit_json(json!({ "schema": SCHEMA, "config": config, "report": report }))
    } else {
        emit(&report.to_text())
    }
}

fn sweep(args: SweepArgs) -> CliResult {
    let config = load_config(&args.config)?;
    if args.k_min == 0 || args.k_min > args.k_max {
        return Err(usage(format!("need 1 <= k-min <= k-max, got {}..{}", args.k_min, args.k_max)));
    }
    let report = sweep_squeeze_ratio(&config, args.k_min..=args.k_max).map_err(runtime)?;
    std::fs::write(&args.out, report.to_csv()).map_err(|e| runtime(format!("{}: {e}", args.out.display())))?;
    emit(&report.to_markdown())
}

fn train(args: TrainArgs) -> CliResult {
    let config = load_config(&args.config)?;
    let graph = build(&config)?;
    for d in [args.data.clone(), args.data.join("images"), args.data.join("labels")] {
        require_dir(&d)?;
    }
    let samples = load_dataset(&args.data).map_err(runtime)?;
    let (train_set, val_set) = split_dataset(&samples, args.split, args.seed).map_err(usage)?;
    let train_config = TrainConfig {
        batch_size: args.batch_size,
        learning_rate: args.lr,
        iterations: args.iters,
        seed: args.seed,
        checkpoint_every: args.checkpoint_every,
        max_grad_norm: args.max_grad_norm,
        ..Default::default()
    };
    train_config.validate().map_err(usage)?;
    eprintln!(
        "training on {} images, validating on {}, {} iterations",
        train_set.len(),
        val_set.len(),
        args.iters
    );
    let log_every = args.log_every;
    let outcome = train_and_evaluate(
        &config,
        &graph,
        init_weights(&graph, args.seed),
        &train_set,
        &val_set,
        &train_config,
        Some(&args.out),
        |row| {
            if log_every > 0 && (row.iter == 1 || row.iter % log_every == 0) {
                let l = &row.loss;
                eprintln!(
                    "iter {} box {:.4} obj {:.4} cls {:.4} total {:.4}",
                    row.iter, l.box_loss, l.objectness, l.class, l.total
                );
            }
        },
    )
    .map_err(runtime)?;
    let mut summary = String::new();
    if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
        summary.push_str(&format!(
            "loss {:.4} -> {:.4} ({:.1}% of initial)\n",
            first.loss.total,
            last.loss.total,
            100.0 * last.loss.total / first.loss.total
        ));
    }
    if let Some(report) = &outcome.evaluation {
        summary.push_str(&report.to_text());
    }
    for f in &outcome.files {
        summary.push_str(&format!("wrote {}\n", f.display()));
    }
    emit(&summary)
}

fn infer(args: InferArgs) -> CliResult {
    let config = load_config(&args.config)?;
    let graph = build(&config)?;
    let weights = Weights::load(&graph, &args.weights).map_err(runtime)?;
    let mut image = read_ppm(&args.image).map_err(runtime)?;
    let size = config.input_size as u32;
    if image.width() != size || image.height() != size {
        return Err(runtime(format!(
            "{}: image is {}x{}, network expects {size}x{size}",
            args.image.display(),
            image.width(),
            image.height()
        )));
    }
    let opts = DecodeOptions {
        conf_thresh: args.conf,
        nms_thresh: args.nms,
        use_uncertainty: !args.no_uncertainty,
    };
    let dets = predict(&graph, &weights, &image_to_tensor(&image), &opts).map_err(runtime)?;
    if let Some(path) = &args.annotate {
        for d in &dets {
            draw_box(&mut image, d.bbox, CLASS_COLORS[d.class_id % CLASS_COLORS.len()], 2);
        }
        write_ppm(path, &image).map_err(runtime)?;
    }
    emit(&format_detections(&dets, &config.class_names))
}

fn txt_stems(dir: &Path) -> Result<BTreeSet<String>, Failure> {
    let entries = std::fs::read_dir(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    let mut stems = BTreeSet::new();
    for entry in entries {
        let path = entry.map_err(runtime)?.path();
        if path.extension().is_some_and(|e| e == "txt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.insert(stem.to_string());
            }
        }
    }
    Ok(stems)
}

fn eval(args: EvalArgs) -> CliResult {
    require_dir(&args.detections)?;
    require_dir(&args.labels)?;
    if !(args.iou > 0.0 && args.iou <= 1.0) {
        return Err(usage(format!("--iou must be in (0, 1], got {}", args.iou)));
    }
    let det_stems = txt_stems(&args.detections)?;
    let label_stems = txt_stems(&args.labels)?;
    if det_stems != label_stems {
        let mut msg = String::from("detection and label stems differ");
        for s in label_stems.difference(&det_stems) {
            msg.push_str(&format!("\n  no detections for {s}"));
        }
        for s in det_stems.difference(&label_stems) {
            msg.push_str(&format!("\n  no labels for {s}"));
        }
        return Err(runtime(msg));
    }
    let mut images = Vec::with_capacity(label_stems.len());
    for stem in &label_stems {
        let labels = read_kitti_labels(args.labels.join(format!("{stem}.txt"))).map_err(runtime)?;
        let path = args.detections.join(format!("{stem}.txt"));
        let text = std::fs::read_to_string(&path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        let detections = parse_detections(&text).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        images.push(EvalImage { detections, labels });
    }
    let classes = args.classes.unwrap_or_else(|| {
        let names: BTreeSet<String> = images
            .iter()
            .flat_map(|im| &im.labels)
            .filter(|l| !l.is_dont_care())
            .map(|l| l.class_name.clone())
            .collect();
        names.into_iter().collect()
    });
    let report = evaluate(&images, &classes, args.iou);
    if args.json {
        emit_json(json!({ "schema": SCHEMA, "report": report }))
    } else {
        emit(&report.to_text())
    }
}

fn gen_data(args: GenDataArgs) -> CliResult {
    let samples = generate_synthetic_dataset(&SynthSpec::default(), args.count, args.seed);
    write_dataset(&args.out, &samples).map_err(runtime)?;
    emit(&format!("wrote {} images to {}\n", samples.len(), args.out.display()))
}

fn configure_threads() -> CliResult {
    let Ok(value) = std::env::var("FRDET_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("FRDET_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(runtime)
}

fn run(cli: Cli) -> CliResult {
    configure_threads()?;
    match cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Sweep(a) => sweep(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::GenData(a) => gen_data(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
