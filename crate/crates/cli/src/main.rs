//! Command-line pipeline for shelf product recognition: synthesize shelf
//! scenes, train the descriptor embedder, build the reference database,
//! recognize products in scenes, and score the results.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use shelfscan_core::augment::AugmentConfig;
use shelfscan_core::detect::{
    clamp_proposals, gen_shelf, load_proposals, read_ground_truth, stub_detect,
    write_ground_truth, AnnotationMode, GtImage, RegionProposal, ShelfRef, ShelfScene, StubNoise,
};
use shelfscan_core::embedder::{train, EmbedderNet, TrainConfig};
use shelfscan_core::eval::{evaluate, write_pr_curve_csv, write_report_json, MatchProtocol};
use shelfscan_core::img::{crop, image_dims, load_png, save_png};
use shelfscan_core::refine::{
    refine_full, write_recognitions, QueryFeatures, Recognition, RecognitionStatus, RefineParams,
    Stages,
};
use shelfscan_core::store::{build, read_manifest, ManifestEntry, ReferenceDb};
use shelfscan_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "shelfscan",
    version,
    about = "Product recognition on store shelves",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the descriptor embedder on reference product images
    Train(TrainArgs),
    /// Embed reference images into a descriptor database
    BuildDb(BuildDbArgs),
    /// Recognize products inside a shelf scene
    Recognize(RecognizeArgs),
    /// Score recognitions against ground-truth annotations
    Evaluate(EvaluateArgs),
    /// Generate a synthetic shelf scene with ground truth
    GenShelf(GenShelfArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Reference manifest CSV with header product_id,category_id,image_path
    #[arg(long)]
    manifest: PathBuf,
    /// Output checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// JSON training configuration; individual flags below override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the effective merged configuration as JSON
    #[arg(long)]
    config_out: Option<PathBuf>,
    /// Ranking-loss margin
    #[arg(long)]
    alpha: Option<f64>,
    /// Learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Optimizer steps; 0 writes the freshly initialized network
    #[arg(long)]
    steps: Option<usize>,
    /// Triplets per step
    #[arg(long)]
    batch: Option<usize>,
    /// Seed for weight init, triplet sampling and augmentation
    #[arg(long)]
    seed: Option<u64>,
    /// Network input resolution
    #[arg(long)]
    input_size: Option<usize>,
    /// Descriptor dimensionality
    #[arg(long)]
    dim: Option<usize>,
    /// Write the per-step loss as CSV (step,loss)
    #[arg(long)]
    loss_log: Option<PathBuf>,
}

#[derive(Args)]
struct BuildDbArgs {
    /// Reference manifest CSV with header product_id,category_id,image_path
    #[arg(long)]
    manifest: PathBuf,
    /// Trained checkpoint to embed with
    #[arg(long)]
    weights: PathBuf,
    /// Output database path
    #[arg(long)]
    out: PathBuf,
    /// Network input resolution; must match the training input size
    #[arg(long, default_value_t = 64)]
    input_size: usize,
    /// Local-feature pooling window on the final feature map
    #[arg(long, default_value_t = 6)]
    local_kernel: usize,
    /// Local-feature pooling stride
    #[arg(long, default_value_t = 2)]
    local_stride: usize,
}

#[derive(Args)]
struct RecognizeArgs {
    /// Shelf scene PNG
    #[arg(long)]
    scene: PathBuf,
    /// Reference descriptor database
    #[arg(long)]
    db: PathBuf,
    /// Trained checkpoint to embed with
    #[arg(long)]
    weights: PathBuf,
    /// Network input resolution; must match the training input size
    #[arg(long, default_value_t = 64)]
    input_size: usize,
    /// Region proposals JSONL; omit to synthesize proposals from --gt
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Ground-truth JSONL used by the detector stand-in when --detections
    /// is not given (and for the per-combination reports of --ablation)
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Detector stand-in: box jitter as a fraction of box size
    #[arg(long, default_value_t = 0.0)]
    stub_jitter: f64,
    /// Detector stand-in: probability of dropping a true box
    #[arg(long, default_value_t = 0.0)]
    stub_drop: f64,
    /// Detector stand-in: spurious-box rate
    #[arg(long, default_value_t = 0.0)]
    stub_fp: f64,
    /// Seed for the detector stand-in
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Refinement stages: comma-separated subset of lf,mc,th ("" = raw 1-NN)
    #[arg(long, default_value = "")]
    stages: String,
    /// Candidates kept per proposal
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Distance-ratio acceptance threshold for the th stage
    #[arg(long, default_value_t = 0.9)]
    tau_d: f64,
    /// Minimum proposal confidence for a category vote in the mc stage
    #[arg(long, default_value_t = 0.1)]
    conf_mc: f32,
    /// Denominator guard of the local-feature match weight
    #[arg(long, default_value_t = 1e-6)]
    epsilon: f64,
    /// Local-feature pooling window; must match the database build
    #[arg(long, default_value_t = 6)]
    local_kernel: usize,
    /// Local-feature pooling stride; must match the database build
    #[arg(long, default_value_t = 2)]
    local_stride: usize,
    /// Output recognitions JSONL
    #[arg(long)]
    out: PathBuf,
    /// Write one recognitions file per stage combination (and, with --gt,
    /// one evaluation report each); --stages is ignored
    #[arg(long)]
    ablation: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Recognitions JSONL produced by `recognize`
    #[arg(long)]
    recognitions: PathBuf,
    /// Ground-truth JSONL produced by `gen-shelf`
    #[arg(long)]
    gt: PathBuf,
    /// Matching protocol: customer or management; defaults to the
    /// annotation mode recorded in the ground-truth file
    #[arg(long)]
    mode: Option<String>,
    /// Minimum IoU for a management-mode match
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Output report JSON
    #[arg(long)]
    out: PathBuf,
    /// Also write the pooled precision-recall curve as CSV
    #[arg(long)]
    curve_out: Option<PathBuf>,
}

#[derive(Args)]
struct GenShelfArgs {
    /// Reference manifest CSV with header product_id,category_id,image_path
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 3)]
    rows: usize,
    #[arg(long, default_value_t = 4)]
    cols: usize,
    /// Grid cell size in pixels; items cover 80% of a cell
    #[arg(long, default_value_t = 40)]
    cell: usize,
    /// Placement jitter as a fraction of the cell size (at most 0.1)
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    /// Appearance distortion preset: default or none
    #[arg(long, default_value = "default")]
    distort: String,
    /// JSON distortion configuration overriding the preset
    #[arg(long)]
    distort_config: Option<PathBuf>,
    /// Annotation mode: customer or management
    #[arg(long, default_value = "management")]
    mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output scene PNG
    #[arg(long)]
    out_image: PathBuf,
    /// Output ground-truth JSONL
    #[arg(long)]
    out_gt: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::BuildDb(args) => cmd_build_db(args),
        Command::Recognize(args) => cmd_recognize(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::GenShelf(args) => cmd_gen_shelf(args),
    };
    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

/// 2 for validation-class errors, 3 for I/O and file-format errors, 4 when
/// a requested metric is undefined on the inputs.
fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::MetricUndefined(_) => 4,
        _ => 2,
    }
}

/// Reads a manifest and resolves relative image paths against the
/// manifest's own directory.
fn load_manifest_resolved(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries = read_manifest(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    for entry in &mut entries {
        let image = Path::new(&entry.image_path);
        if image.is_relative() {
            entry.image_path = base.join(image).to_string_lossy().into_owned();
        }
    }
    Ok(entries)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string_lossy().into_owned())
}

/// Looks an image up by its full path first, then by its file name.
fn lookup_image<'a, T>(map: &'a BTreeMap<String, T>, path: &Path, name: &str) -> Option<&'a T> {
    map.get(path.to_string_lossy().as_ref()).or_else(|| map.get(name))
}

/// `reports/recs.jsonl` + `lf-mc` -> `reports/recs_lf-mc.jsonl`.
fn suffixed_path(base: &Path, suffix: &str) -> PathBuf {
    let stem = base
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match base.extension() {
        Some(ext) => format!("{stem}_{suffix}.{}", ext.to_string_lossy()),
        None => format!("{stem}_{suffix}"),
    };
    base.with_file_name(name)
}

fn effective_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| {
                Error::Config(format!("training config {}: {e}", path.display()))
            })?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = args.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.batch {
        cfg.batch = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.input_size {
        cfg.input_size = v;
    }
    if let Some(v) = args.dim {
        cfg.dim = v;
    }
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = effective_train_config(&args)?;
    cfg.validate()?;
    if let Some(path) = &args.config_out {
        let text = serde_json::to_string_pretty(&cfg)
            .map_err(|e| Error::Config(format!("serializing config: {e}")))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    }
    let entries = load_manifest_resolved(&args.manifest)?;
    let mut images = Vec::with_capacity(entries.len());
    for entry in &entries {
        images.push((entry.product_id.clone(), load_png(&entry.image_path)?));
    }
    let mut net = EmbedderNet::new(cfg.input_size, cfg.dim, cfg.seed)?;
    let losses = train(&mut net, &images, &cfg)?;
    net.save(&args.out)?;
    if let Some(path) = &args.loss_log {
        let mut text = String::from("step,loss\n");
        for (step, loss) in losses.iter().enumerate() {
            text.push_str(&format!("{},{loss}\n", step + 1));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    println!(
        "trained {} steps on {} products -> {}",
        losses.len(),
        images.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_build_db(args: BuildDbArgs) -> Result<()> {
    let net = EmbedderNet::load(&args.weights, args.input_size)?;
    let entries = load_manifest_resolved(&args.manifest)?;
    let db = build(&entries, &net, args.local_kernel, args.local_stride)?;
    db.save(&args.out)?;
    println!("embedded {} products -> {}", db.len(), args.out.display());
    Ok(())
}

fn cmd_recognize(args: RecognizeArgs) -> Result<()> {
    let stages: Stages = args.stages.parse()?;
    let params = RefineParams {
        epsilon: args.epsilon,
        tau_d: args.tau_d,
        conf_mc: args.conf_mc,
        k: args.k,
    };
    params.validate()?;
    let net = EmbedderNet::load(&args.weights, args.input_size)?;
    let db = ReferenceDb::load(&args.db)?;
    if let Some(dim) = db.dim() {
        if dim != net.descriptor_dim() {
            return Err(Error::Version(format!(
                "database descriptors have dimension {dim} but the checkpoint produces {}",
                net.descriptor_dim()
            )));
        }
    }
    let scene = load_png(&args.scene)?;
    let (width, height) = image_dims(&scene)?;
    let scene_name = file_name(&args.scene);

    // Ground truth is needed for the detector stand-in and for the
    // per-combination reports in ablation runs.
    let gt_image: Option<GtImage> = match &args.gt {
        Some(path) => {
            let all = read_ground_truth(path)?;
            Some(
                lookup_image(&all, &args.scene, &scene_name)
                    .cloned()
                    .ok_or_else(|| {
                        Error::Validation(format!(
                            "ground-truth file {} has no entries for image '{scene_name}'",
                            path.display()
                        ))
                    })?,
            )
        }
        None => None,
    };

    let proposals: Vec<RegionProposal> = if let Some(path) = &args.detections {
        let all = load_proposals(path)?;
        let found = lookup_image(&all, &args.scene, &scene_name).ok_or_else(|| {
            Error::Validation(format!(
                "detections file {} has no entries for image '{scene_name}'",
                path.display()
            ))
        })?;
        clamp_proposals(found.clone(), width, height)
    } else if let Some(gt) = &gt_image {
        let shelf = ShelfScene {
            image: scene.clone(),
            ground_truth: gt.boxes.clone(),
            mode: gt.mode,
        };
        let noise = StubNoise {
            jitter_frac: args.stub_jitter,
            drop_prob: args.stub_drop,
            fp_rate: args.stub_fp,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        clamp_proposals(stub_detect(&shelf, &noise, &mut rng)?, width, height)
    } else {
        return Err(Error::Validation(
            "recognize needs --detections or --gt (the detector stand-in)".into(),
        ));
    };

    let mut queries = Vec::with_capacity(proposals.len());
    let mut recognitions = Vec::with_capacity(proposals.len());
    for proposal in &proposals {
        let patch = crop(&scene, proposal.rect()?)?;
        let (descriptor, locals) = net.describe(&patch, args.local_kernel, args.local_stride)?;
        let candidates = db.knn(&descriptor, args.k, None)?;
        queries.push(QueryFeatures { descriptor, locals });
        recognitions.push(Recognition::new(proposal.clone(), candidates));
    }

    if args.ablation {
        for subset in Stages::all_subsets() {
            let label = subset.label().replace('+', "-");
            let (refined, _) =
                refine_full(recognitions.clone(), &queries, &db, &params, subset)?;
            let out = suffixed_path(&args.out, &label);
            write_recognitions(&out, &scene_name, &refined)?;
            if let Some(gt) = &gt_image {
                let mut recs = BTreeMap::new();
                recs.insert(scene_name.clone(), refined);
                let mut gts = BTreeMap::new();
                gts.insert(scene_name.clone(), gt.clone());
                let protocol = MatchProtocol { mode: gt.mode, iou_threshold: 0.5 };
                let (report, _) = evaluate(&recs, &gts, &protocol)?;
                let report_path =
                    suffixed_path(&args.out.with_extension("json"), &format!("{label}_report"));
                write_report_json(&report_path, &report)?;
                println!(
                    "stages {:<8} -> mAP {:.4} | PR {:.4} | mAMCA {:.4}",
                    subset.label(),
                    report.map,
                    report.pr,
                    report.mamca
                );
            } else {
                println!("stages {:<8} -> {}", subset.label(), out.display());
            }
        }
        return Ok(());
    }

    let (refined, summary) = refine_full(recognitions, &queries, &db, &params, stages)?;
    write_recognitions(&args.out, &scene_name, &refined)?;
    let accepted = refined
        .iter()
        .filter(|r| r.status == RecognitionStatus::Accepted)
        .count();
    println!(
        "{} proposals: {} accepted, {} rejected -> {}",
        refined.len(),
        accepted,
        summary.th_rejected,
        args.out.display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let recognitions = shelfscan_core::refine::read_recognitions(&args.recognitions)?;
    let ground_truth = read_ground_truth(&args.gt)?;
    let mode: AnnotationMode = match &args.mode {
        Some(text) => text.parse()?,
        None => ground_truth
            .values()
            .next()
            .map(|g| g.mode)
            .ok_or_else(|| {
                Error::MetricUndefined("the ground-truth file has no annotations".into())
            })?,
    };
    let protocol = MatchProtocol { mode, iou_threshold: args.iou };
    let (report, curve) = evaluate(&recognitions, &ground_truth, &protocol)?;
    write_report_json(&args.out, &report)?;
    if let Some(path) = &args.curve_out {
        write_pr_curve_csv(path, &curve)?;
    }
    println!(
        "mode {} | mAP {:.4} | PR {:.4} | mAMCA {:.4} -> {}",
        report.mode,
        report.map,
        report.pr,
        report.mamca,
        args.out.display()
    );
    Ok(())
}

fn cmd_gen_shelf(args: GenShelfArgs) -> Result<()> {
    let mode: AnnotationMode = args.mode.parse()?;
    let distortion: AugmentConfig = match (&args.distort_config, args.distort.as_str()) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| {
                Error::Config(format!("distortion config {}: {e}", path.display()))
            })?
        }
        (None, "default") => AugmentConfig::default(),
        (None, "none") => AugmentConfig::identity(),
        (None, other) => {
            return Err(Error::Validation(format!(
                "unknown distortion preset '{other}' (expected 'default' or 'none')"
            )))
        }
    };
    let entries = load_manifest_resolved(&args.manifest)?;
    let mut refs = Vec::with_capacity(entries.len());
    for entry in &entries {
        refs.push(ShelfRef {
            product_id: entry.product_id.clone(),
            category_id: entry.category_id.clone(),
            image: load_png(&entry.image_path)?,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let scene = gen_shelf(
        &refs,
        args.rows,
        args.cols,
        args.cell,
        &distortion,
        args.jitter,
        mode,
        &mut rng,
    )?;
    save_png(&scene.image, &args.out_image)?;
    write_ground_truth(&args.out_gt, &file_name(&args.out_image), &scene)?;
    println!(
        "{} annotated boxes -> {} / {}",
        scene.ground_truth.len(),
        args.out_image.display(),
        args.out_gt.display()
    );
    Ok(())
}
