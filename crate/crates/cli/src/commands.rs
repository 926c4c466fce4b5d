use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use rln_core::checkpoint;
use rln_core::config::RunConfig;
use rln_core::data::{
    augment_double, denormalize, load_manifest, load_samples, save_manifest, subject_split, AnnotationRecord, Landmarks,
    SplitSpec,
};
use rln_core::evaluation::{
    read_class_outputs, read_grader_annotations, read_predictions, stratified_report, write_class_outputs,
    write_curve_csv, write_grader_csv, write_predictions, write_report_csv, ClassOutput, Prediction,
    DEFAULT_THRESHOLDS,
};
use rln_core::gradcheck::{run_all, GradcheckOptions, TOLERANCE};
use rln_core::model::{build_model, Head, ModelConfig};
use rln_core::synth::generate_dataset;
use rln_core::trainer::{predict_outputs, train_with_progress};
use rln_core::{evaluation, Error, Result};

use super::{
    Command, EvalArgs, GradcheckArgs, GraderStatsArgs, ParamsArgs, PredictArgs, SplitArgs, SynthArgs, TrainArgs,
};

/// Curves run from 0 to this many disc radii.
const CURVE_MAX: f64 = 2.0;
const CURVE_STEP: f64 = 0.01;
const PREDICT_BATCH: usize = 16;

pub fn exit_code(e: &Error) -> u8 {
    match e {
        e if e.is_io() => 1,
        Error::Divergence { .. } => 3,
        _ => 2,
    }
}

pub fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::Params(a) => params(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::GraderStats(a) => grader_stats(a),
    }?;
    Ok(ExitCode::SUCCESS)
}

/// Provenance lines written at the top of every output file.
fn header(seed: Option<u64>) -> Vec<String> {
    let args: Vec<String> = std::env::args().collect();
    vec![
        format!("rln {}", env!("CARGO_PKG_VERSION")),
        format!("command: {}", args.join(" ")),
        format!("seed: {}", seed.map_or_else(|| "none".to_string(), |s| s.to_string())),
    ]
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(path) => RunConfig::load(path)?.synth,
        None => Default::default(),
    };
    config.count = a.count;
    config.seed = a.seed;
    config.mode = a.mode;
    config.gaze = a.gaze;
    (config.width, config.height) = a.size;
    let manifest = generate_dataset(&config, &a.out, &header(Some(a.seed)))?;
    println!("{}", manifest.display());
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let spec = SplitSpec { train: a.train, val: a.val, test: a.test, seed: a.seed };
    spec.validate()?;
    let records = load_manifest(&a.manifest)?;
    let split = subject_split(&records, &spec)?;

    fs::create_dir_all(&a.out)?;
    let src = fs::canonicalize(base_dir(&a.manifest).join("."))?;
    let same_dir = fs::canonicalize(&a.out)? == src;
    let relocate = |records: Vec<AnnotationRecord>| -> Vec<AnnotationRecord> {
        if same_dir {
            return records;
        }
        records
            .into_iter()
            .map(|r| AnnotationRecord { image_path: src.join(&r.image_path).display().to_string(), ..r })
            .collect()
    };
    let comments = header(Some(a.seed));
    for (name, set) in [("train", split.train), ("val", split.val), ("test", split.test)] {
        let path = a.out.join(format!("{name}.csv"));
        let n = set.len();
        save_manifest(&path, &relocate(set), &comments)?;
        println!("{}: {n} images", path.display());
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let config = RunConfig::load(&a.config)?;
    config.validate()?;
    let mut train_records = load_manifest(&a.train)?;
    if config.augment_flip {
        train_records = augment_double(&train_records);
    }
    let val_records = load_manifest(&a.val)?;
    let train_set = load_samples(&train_records, &base_dir(&a.train), config.downsample_factor)?;
    let val_set = load_samples(&val_records, &base_dir(&a.val), config.downsample_factor)?;

    let model = build_model::<f32>(&config.model, config.train.seed)?;
    eprintln!(
        "training {} parameters on {} images, validating on {}",
        model.count_params(),
        train_set.len(),
        val_set.len()
    );
    let (model, log) = train_with_progress(model, &train_set, &val_set, &config.train, |r| {
        let train = r.train_loss.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        eprintln!("epoch {:>3}  train {train}  val {:.6}  {:.1}s", r.epoch, r.val_loss, r.seconds);
    })?;

    checkpoint::save(&a.out, &model)?;
    let mut comments = header(Some(config.train.seed));
    comments.extend(config.header_lines());
    log.write_csv(create(&a.log)?, &comments, !a.no_wall_time)?;
    println!(
        "best epoch {} (val loss {:.6}), stopped by {}",
        log.best_epoch,
        log.best_val_loss(),
        log.stop
    );
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    if a.downsample == 0 {
        return Err(Error::Argument("--downsample must be at least 1".into()));
    }
    let model = checkpoint::load(&a.checkpoint)?;
    let records = load_manifest(&a.manifest)?;
    let samples = load_samples(&records, &base_dir(&a.manifest), a.downsample)?;
    let outputs = predict_outputs(&model, &samples, PREDICT_BATCH)?;
    let out = create(&a.out)?;
    let comments = header(None);
    match model.config().head {
        Head::Landmark4 => {
            let preds: Vec<Prediction> = samples
                .iter()
                .zip(&outputs)
                .map(|(s, o)| {
                    let v = [o[0], o[1], o[2], o[3]].map(f64::from);
                    Prediction { image_path: s.image_path.clone(), landmarks: denormalize(Landmarks::from_array(v), s.width()) }
                })
                .collect();
            write_predictions(out, &preds, &comments)?;
        }
        Head::Laterality1 => {
            let outs: Vec<ClassOutput> = samples
                .iter()
                .zip(&outputs)
                .map(|(s, o)| ClassOutput { image_path: s.image_path.clone(), p_right: f64::from(o[0]) })
                .collect();
            write_class_outputs(out, &outs, &comments)?;
        }
    }
    println!("{}: {} rows", a.out.display(), samples.len());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    if a.downsample == 0 {
        return Err(Error::Argument("--downsample must be at least 1".into()));
    }
    let preds = read_predictions(File::open(&a.pred)?)?;
    let k = a.downsample as f64;
    let truths: Vec<AnnotationRecord> = load_manifest(&a.truth)?
        .into_iter()
        .map(|r| AnnotationRecord { landmarks: r.landmarks.map(|v| v / k), ..r })
        .collect();
    let class_outputs = a
        .class_pred
        .as_ref()
        .map(|p| read_class_outputs(File::open(p)?))
        .transpose()?;

    let report = stratified_report(&preds, &truths, class_outputs.as_deref(), &DEFAULT_THRESHOLDS)?;
    let comments = header(None);
    write_report_csv(create(&a.report)?, &report, &comments)?;

    fs::create_dir_all(&a.curves)?;
    let distances = evaluation::normalized_distances(&preds, &truths)?;
    for landmark in [evaluation::Landmark::OpticDisc, evaluation::Landmark::Fovea] {
        let curve = evaluation::accuracy_curve_from_distances(distances.of(landmark), CURVE_MAX, CURVE_STEP)?;
        write_curve_csv(create(&a.curves.join(format!("{landmark}_curve.csv")))?, &curve, &comments)?;
    }

    for row in &report.rows {
        let label = |v: Option<String>| v.unwrap_or_else(|| "All".into());
        println!(
            "{:>3}/{:<3} od@1r {:>6.2}%  fovea@1r {:>6.2}%  laterality {:>6.2}%  ({} images)",
            label(row.modality.map(|m| m.to_string())),
            label(row.gaze.map(|g| g.to_string())),
            row.od.last().copied().unwrap_or(f64::NAN),
            row.fovea.last().copied().unwrap_or(f64::NAN),
            row.lat_inferred,
            row.images
        );
    }
    for note in &report.notes {
        eprintln!("note: {note}");
    }
    Ok(())
}

fn params(a: ParamsArgs) -> Result<()> {
    let model = match &a.config {
        Some(path) => RunConfig::load(path)?.model,
        None => ModelConfig::default(),
    };
    model.validate()?;
    println!("{}", rln_core::model::analytic_param_count(&model));
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let opts = GradcheckOptions { corrupt: a.corrupt_gradient };
    let seeds = a.seed..a.seed.saturating_add(a.seeds.max(1));
    let reports = run_all(seeds, opts)?;
    let mut failed = Vec::new();
    for r in &reports {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "{:<12} max_rel_error {:.3e}  checked {:>7}  skipped {:>4}  {verdict}",
            r.op, r.max_rel_error, r.checked, r.skipped
        );
        if !r.passed() {
            failed.push(r.op.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "gradient check above {TOLERANCE:e} for: {}",
            failed.join(", ")
        )))
    }
}

fn grader_stats(a: GraderStatsArgs) -> Result<()> {
    let annotations = read_grader_annotations(File::open(&a.graders)?)?;
    let truths = load_manifest(&a.truth)?;
    let stats = rln_core::evaluation::grader_stats(&annotations, &truths)?;
    write_grader_csv(create(&a.out)?, &stats, &header(None))?;
    println!("{}: {} graders", a.out.display(), stats.graders.len());
    Ok(())
}
