//! Subcommand implementations. Arguments are checked before anything is
//! written; every artifact gets a `.meta.json` sidecar.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use rayon::prelude::*;
use serde_json::json;
use sfanet_core::datapipe::{
    build_folds, categorize_manifest, cluster_fakes, embed_all, extract_crops, load_manifest, save_png,
    AttributePredictor, CategoryReport, ClusterAssignment, CropResult, DownsampleEmbedder, Embedder, EmotionGrouping,
    FileAttributePredictor, FileEmbedder, Manifest, StubAttributePredictor,
};
use sfanet_core::ensemble::{
    detect_parts, facecrop_score, final_pipeline_score, EnsembleConfig, FacePartsProvider, ImageScorer, LayoutProvider,
    MaskDirProvider, Prediction, PresenceCsvProvider,
};
use sfanet_core::heads::ModelBundle;
use sfanet_core::metrics::{
    best_threshold, calibrate as sweep, default_threshold_grid, evaluate as metrics, ScoredEntry, ScoredSet,
};
use sfanet_core::synthetic::{generate, write_corpus, SyntheticConfig};
use sfanet_core::trainsched::{make_schedule, run_sequential, RunOptions};
use sfanet_core::{Error, ImageSample, Label};

use crate::config::{AttributeSource, FacePartsSource, RunConfig};
use crate::output::{load_scores, read_meta, scores_to_csv, write_artifact, ArtifactMeta, ScoreRow};
use crate::{
    CalibrateArgs, CategorizeArgs, CliError, ClusterArgs, CropArgs, EvaluateArgs, IngestArgs, PredictArgs, PredictMode,
    ScheduleArgs, TrainArgs,
};

type CliResult = Result<(), CliError>;

pub struct Context {
    pub cfg: RunConfig,
    pub hash: String,
}

impl Context {
    pub fn new(cfg: RunConfig) -> Context {
        let hash = cfg.hash();
        Context { cfg, hash }
    }

    fn meta(&self, command: &str, details: serde_json::Value) -> ArtifactMeta {
        ArtifactMeta::new(command, &self.hash, details)
    }
}

fn required(arg: Option<PathBuf>, fallback: &Option<PathBuf>, flag: &str) -> Result<PathBuf, CliError> {
    arg.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Usage(format!("--{flag} is required (or set it in the config)")))
}

fn open(path: &Path, pixels: bool) -> Result<Manifest, Error> {
    let mut m = load_manifest(path)?;
    if pixels {
        m.load_pixels()?;
    }
    Ok(m)
}

fn absolute(path: &Path) -> Result<PathBuf, Error> {
    std::path::absolute(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parent(path: &Path) -> &Path {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
}

/// Re-roots a manifest for writing at `out`, keeping image paths resolvable.
fn relocate(m: &Manifest, out: &Path) -> Result<Manifest, Error> {
    let root = absolute(m.root())?;
    let target = absolute(parent(out))?;
    let samples = m
        .samples()
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.pixels = None;
            if root != target && s.path.is_relative() {
                s.path = root.join(&s.path);
            }
            s
        })
        .collect();
    Manifest::with_root(samples, target)
}

fn face_parts(cfg: &RunConfig) -> Result<Box<dyn FacePartsProvider>, Error> {
    let path = cfg.provider.face_parts_path.as_deref();
    Ok(match cfg.provider.face_parts {
        FacePartsSource::Stub => Box::new(LayoutProvider::full()),
        FacePartsSource::MaskDir => Box::new(MaskDirProvider::new(path.expect("validated"))),
        FacePartsSource::PresenceCsv => Box::new(PresenceCsvProvider::load(path.expect("validated"))?),
    })
}

fn attributes(cfg: &RunConfig) -> Result<Box<dyn AttributePredictor>, Error> {
    Ok(match cfg.provider.attributes {
        AttributeSource::Stub => Box::new(StubAttributePredictor),
        AttributeSource::File => Box::new(FileAttributePredictor::load(
            cfg.provider.attributes_path.as_deref().expect("validated"),
        )?),
    })
}

fn embedder(cfg: &RunConfig) -> Result<Box<dyn Embedder>, Error> {
    Ok(match &cfg.data.embeddings {
        Some(p) => Box::new(FileEmbedder::load(p)?),
        None => Box::new(DownsampleEmbedder::new(cfg.data.embedding_side)?),
    })
}

fn cluster_manifest(cfg: &RunConfig, manifest: &Manifest) -> Result<ClusterAssignment, Error> {
    let embedder = embedder(cfg)?;
    let embeddings = embed_all(embedder.as_ref(), manifest.with_label(Label::Fake))?;
    info!("embedded {} fakes with {}", embeddings.len(), embedder.name());
    cluster_fakes(&embeddings, cfg.data.k, cfg.data.seed)
}

fn load_model(path: &Path) -> Result<Arc<dyn ImageScorer>, Error> {
    Ok(Arc::new(ModelBundle::load(path)?))
}

/// Labels come from `--manifest`, else the manifest recorded with the
/// scores, else the config.
fn labeled_scores(ctx: &Context, scores: &Path, manifest: Option<PathBuf>) -> Result<(ScoredSet, PathBuf), CliError> {
    let recorded =
        read_meta(scores)?.and_then(|m| m.details.get("manifest").and_then(|v| v.as_str()).map(PathBuf::from));
    let source = manifest
        .or(recorded)
        .or_else(|| ctx.cfg.data.manifest.clone())
        .ok_or_else(|| CliError::Usage("no label source: pass --manifest".into()))?;
    let rows = load_scores(scores)?;
    let labels = load_manifest(&source)?;
    let mut entries = Vec::with_capacity(rows.len());
    let mut unlabeled = 0;
    for r in rows {
        let sample = labels
            .get(&r.id)
            .ok_or_else(|| Error::Consistency(format!("score id `{}` is not in {}", r.id, source.display())))?;
        match sample.label {
            Some(label) => entries.push(ScoredEntry {
                id: r.id,
                score: sfanet_core::Score::new(r.score_fused)?,
                label,
            }),
            None => unlabeled += 1,
        }
    }
    if unlabeled > 0 {
        warn!("{unlabeled} scored samples have no label and were skipped");
    }
    Ok((ScoredSet::new(entries)?, source))
}

pub fn ingest(ctx: &Context, args: IngestArgs) -> CliResult {
    if let Some(dir) = args.synthetic {
        let syn = SyntheticConfig {
            n_real: args.n_real,
            n_fake: args.n_fake,
            size: args.size,
            seed: ctx.cfg.data.seed,
            ..SyntheticConfig::default()
        };
        if syn.size == 0 || syn.n_real + syn.n_fake == 0 {
            return Err(CliError::Usage(
                "synthetic corpus needs a positive size and sample count".into(),
            ));
        }
        let samples = generate(&syn)?;
        let manifest = write_corpus(&samples, &dir)?;
        let out = dir.join("manifest.csv");
        write_artifact(
            &out,
            &manifest.to_csv()?,
            &ctx.meta("ingest", json!({ "synthetic": syn })),
        )?;
        let c = manifest.counts();
        println!(
            "wrote {} samples ({} real, {} fake) to {}",
            manifest.len(),
            c.real,
            c.fake,
            out.display()
        );
        println!("checksum {}", manifest.checksum());
        return Ok(());
    }
    let path = args.manifest.expect("required by clap");
    let manifest = open(&path, true)?;
    let c = manifest.counts();
    println!(
        "{} samples ({} real, {} fake, {} unlabeled), all images readable",
        manifest.len(),
        c.real,
        c.fake,
        c.unlabeled
    );
    println!("checksum {}", manifest.checksum());
    if let Some(out) = args.out {
        let canonical = relocate(&manifest, &out)?;
        let details = json!({ "source": absolute(&path)?, "checksum": manifest.checksum() });
        write_artifact(&out, &canonical.to_csv()?, &ctx.meta("ingest", details))?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

pub fn categorize(ctx: &Context, args: CategorizeArgs) -> CliResult {
    let path = required(args.manifest, &ctx.cfg.data.manifest, "manifest")?;
    let val_path = args.validation.or_else(|| ctx.cfg.data.validation.clone());
    if val_path.is_some() && args.validation_out.is_none() {
        return Err(CliError::Usage(
            "--validation-out is required with a validation manifest".into(),
        ));
    }
    let predictor = attributes(&ctx.cfg)?;
    let mut grouping = EmotionGrouping::default();
    for (raw, group) in &ctx.cfg.data.category_map {
        grouping.set(raw, *group);
    }
    let mut train = open(&path, true)?;
    categorize_manifest(predictor.as_ref(), &mut train, &grouping)?;
    let mut validation = match &val_path {
        Some(p) => Some(open(p, true)?),
        None => None,
    };
    if let Some(v) = validation.as_mut() {
        categorize_manifest(predictor.as_ref(), v, &grouping)?;
    }
    let report = CategoryReport::build(&train, validation.as_ref());
    println!(
        "{:<20} {:>10} {:>10} {:>10} {:>10}",
        "category", "train_real", "train_fake", "val_real", "val_fake"
    );
    for r in &report.rows {
        println!(
            "{:<20} {:>10} {:>10} {:>10} {:>10}",
            r.category.to_string(),
            r.train.real,
            r.train.fake,
            r.validation.real,
            r.validation.fake
        );
    }
    println!(
        "uncategorized: {} train, {} validation",
        report.uncategorized_train, report.uncategorized_validation
    );
    let details = json!({ "predictor": predictor.name(), "manifest": absolute(&path)? });
    write_artifact(
        &args.out,
        &relocate(&train, &args.out)?.to_csv()?,
        &ctx.meta("categorize", details.clone()),
    )?;
    if let (Some(v), Some(out)) = (&validation, &args.validation_out) {
        write_artifact(
            out,
            &relocate(v, out)?.to_csv()?,
            &ctx.meta("categorize", details.clone()),
        )?;
    }
    if let Some(out) = &args.report {
        write_artifact(out, &report.to_csv()?, &ctx.meta("categorize", details))?;
    }
    Ok(())
}

pub fn cluster(ctx: &Context, args: ClusterArgs) -> CliResult {
    let path = required(args.manifest, &ctx.cfg.data.manifest, "manifest")?;
    let manifest = open(&path, ctx.cfg.data.embeddings.is_none())?;
    let assignment = cluster_manifest(&ctx.cfg, &manifest)?;
    let details = json!({ "manifest": absolute(&path)?, "k": assignment.k, "seed": assignment.seed });
    write_artifact(
        &args.out_dir.join("clusters.json"),
        &serde_json::to_vec_pretty(&assignment).map_err(Error::from)?,
        &ctx.meta("cluster", details.clone()),
    )?;
    let mut csv = String::from("id,cluster\n");
    for (id, c) in &assignment.assignment {
        csv.push_str(&format!("{id},{c}\n"));
    }
    write_artifact(
        &args.out_dir.join("assignment.csv"),
        csv.as_bytes(),
        &ctx.meta("cluster", details),
    )?;
    for (i, n) in assignment.cluster_sizes().iter().enumerate() {
        println!("cluster {i}: {n} fakes");
    }
    println!(
        "objective {:.6} after {} iterations ({})",
        assignment.objective(),
        assignment.iterations,
        if assignment.converged {
            "converged"
        } else {
            "iteration cap"
        }
    );
    Ok(())
}

pub fn crop(ctx: &Context, args: CropArgs) -> CliResult {
    let path = required(args.manifest, &ctx.cfg.data.manifest, "manifest")?;
    let provider = face_parts(&ctx.cfg)?;
    let manifest = open(&path, true)?;
    let crops: Vec<(&ImageSample, CropResult)> = manifest
        .samples()
        .par_iter()
        .map(|s| {
            let report = detect_parts(provider.as_ref(), s);
            if let Some(e) = &report.error {
                warn!("{}: face parts unavailable: {e}", s.id);
            }
            extract_crops(s, &report).map(|c| (s, c))
        })
        .collect::<Result<_, Error>>()?;
    let mut table =
        String::from("id,kind,eyes_top,eyes_bottom,eyes_left,eyes_right,lips_top,lips_bottom,lips_left,lips_right\n");
    let mut parts: BTreeMap<&str, Vec<ImageSample>> = BTreeMap::new();
    for (s, c) in &crops {
        let mut add = |dir: &'static str, img: &image::RgbImage| -> Result<(), Error> {
            let rel = Path::new(dir).join(format!("{}.png", s.id));
            save_png(img, &args.out_dir.join(&rel))?;
            let mut row = ImageSample::new(s.id.clone(), rel);
            row.label = s.label;
            row.origin = s.origin.clone();
            row.category = s.category;
            parts.entry(dir).or_default().push(row);
            Ok(())
        };
        match c {
            CropResult::DualCrop {
                eyes,
                lips,
                eyes_box: e,
                lips_box: l,
            } => {
                add("eyes", eyes)?;
                add("lips", lips)?;
                table.push_str(&format!(
                    "{},dual_crop,{},{},{},{},{},{},{},{}\n",
                    s.id, e.top, e.bottom, e.left, e.right, l.top, l.bottom, l.left, l.right
                ));
            }
            CropResult::FullImage => {
                add("full", s.pixels()?)?;
                table.push_str(&format!("{},full_image,,,,,,,,\n", s.id));
            }
        }
    }
    let details = json!({ "manifest": absolute(&path)?, "provider": format!("{:?}", ctx.cfg.provider.face_parts) });
    for (dir, rows) in parts {
        let m = Manifest::with_root(rows, args.out_dir.clone())?;
        write_artifact(
            &args.out_dir.join(format!("{dir}.csv")),
            &m.to_csv()?,
            &ctx.meta("crop", details.clone()),
        )?;
        println!("{dir}: {} images", m.len());
    }
    write_artifact(
        &args.out_dir.join("crops.csv"),
        table.as_bytes(),
        &ctx.meta("crop", details),
    )?;
    Ok(())
}

pub fn train(ctx: &Context, args: TrainArgs) -> CliResult {
    let cfg = &ctx.cfg;
    let path = required(args.manifest, &cfg.data.manifest, "manifest")?;
    let val_path = args.validation.or_else(|| cfg.data.validation.clone());
    let mut model = match &args.init {
        Some(p) => {
            let m = ModelBundle::load(p)?;
            if m.kind() != cfg.model.name {
                return Err(CliError::Usage(format!(
                    "--init holds a {} model but the config trains {}",
                    m.kind(),
                    cfg.model.name
                )));
            }
            m
        }
        None => {
            let mut m = ModelBundle::new(cfg.model.model_config())?;
            m.init_weights(cfg.train.seed);
            m
        }
    };
    let manifest = open(&path, true)?;
    let validation = match &val_path {
        Some(p) => Some(open(p, true)?.into_samples()),
        None => None,
    };
    let assignment: ClusterAssignment = match &args.clusters {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|source| Error::Io {
                path: p.clone(),
                source,
            })?;
            serde_json::from_str(&text).map_err(Error::from)?
        }
        None => cluster_manifest(cfg, &manifest)?,
    };
    let folds = build_folds(&manifest, &assignment)?;
    let schedule = make_schedule(assignment.k, cfg.train.epochs_per_phase, cfg.train.finetune_epochs)?;
    let options = RunOptions {
        out_dir: Some(args.out_dir.clone()),
        validation,
        policy: cfg.policy(),
        resume: args.resume,
        halt_after: None,
        metadata: json!({ "run_config_hash": ctx.hash }),
    };
    info!(
        "training {} on {} samples, {} phases",
        model.name(),
        manifest.len(),
        schedule.phases.len()
    );
    let outcome = run_sequential(&mut model, &folds, &manifest, &schedule, &cfg.train, &options)?;
    for r in &outcome.records {
        let last = r.epochs.last();
        let val = last
            .and_then(|e| e.validation.as_ref())
            .map(|v| format!("  val loss {:.4} acc {:.4}", v.loss, v.report.accuracy))
            .unwrap_or_default();
        println!(
            "phase {:02} {:<8} loss {:.4}{val}",
            r.phase,
            r.dataset.to_string(),
            last.map_or(f64::NAN, |e| e.train_loss)
        );
    }
    let final_path = args.out_dir.join("final.ckpt");
    model.save_with(&final_path, json!({ "run_config_hash": ctx.hash }))?;
    let details = json!({ "manifest": absolute(&path)?, "model": model.name() });
    write_artifact(
        &args.out_dir.join("phases.json"),
        &serde_json::to_vec_pretty(&outcome.records).map_err(Error::from)?,
        &ctx.meta("train", details),
    )?;
    println!("wrote {}", final_path.display());
    Ok(())
}

pub fn predict(ctx: &Context, args: PredictArgs) -> CliResult {
    let path = required(args.manifest, &ctx.cfg.data.manifest, "manifest")?;
    let policy = ctx.cfg.policy();
    let need = |p: &Option<PathBuf>, flag: &str| {
        p.clone()
            .ok_or_else(|| CliError::Usage(format!("--{flag} is required in {:?} mode", args.mode).to_lowercase()))
    };
    let models = match args.mode {
        PredictMode::Ensemble => vec![
            need(&args.swinatten, "swinatten")?,
            need(&args.swinfusion, "swinfusion")?,
            need(&args.sfnet, "sfnet")?,
        ],
        PredictMode::Facecrop => vec![need(&args.eyes, "eyes")?, need(&args.lips, "lips")?],
    };
    let provider = face_parts(&ctx.cfg)?;
    let scorers = models.iter().map(|p| load_model(p)).collect::<Result<Vec<_>, _>>()?;
    let manifest = open(&path, true)?;
    let predictions: Vec<Prediction> = match args.mode {
        PredictMode::Ensemble => {
            let ens = EnsembleConfig::new(scorers[0].clone(), scorers[1].clone(), scorers[2].clone(), policy)?;
            manifest
                .samples()
                .par_iter()
                .map(|s| final_pipeline_score(&ens, provider.as_ref(), s))
                .collect::<Result<_, Error>>()?
        }
        PredictMode::Facecrop => manifest
            .samples()
            .par_iter()
            .map(|s| facecrop_score(scorers[0].as_ref(), scorers[1].as_ref(), provider.as_ref(), s, policy))
            .collect::<Result<_, Error>>()?,
    };
    let mut paths: BTreeMap<&str, usize> = BTreeMap::new();
    let mut real = 0;
    for p in &predictions {
        if let Some(e) = &p.parts_error {
            warn!("{}: face parts unavailable: {e}", p.id);
        }
        *paths.entry(p.path_taken.as_str()).or_default() += 1;
        real += usize::from(p.verdict == Label::Real);
    }
    let rows: Vec<ScoreRow> = predictions.iter().map(ScoreRow::from).collect();
    let details = json!({
        "manifest": absolute(&path)?,
        "mode": format!("{:?}", args.mode).to_lowercase(),
        "models": models.iter().map(|p| absolute(p)).collect::<Result<Vec<_>, _>>()?,
        "threshold": policy.threshold(),
    });
    write_artifact(&args.out, &scores_to_csv(&rows)?, &ctx.meta("predict", details))?;
    println!(
        "scored {} images: {} real, {} fake",
        rows.len(),
        real,
        rows.len() - real
    );
    for (p, n) in paths {
        println!("  {p}: {n}");
    }
    Ok(())
}

pub fn evaluate(ctx: &Context, args: EvaluateArgs) -> CliResult {
    let (set, source) = labeled_scores(ctx, &args.scores, args.manifest)?;
    let report = metrics(&set, ctx.cfg.policy(), ctx.cfg.eval.dcf);
    println!("{report}");
    println!(
        "n={} ({} real, {} fake)",
        set.len(),
        set.count(Label::Real),
        set.count(Label::Fake)
    );
    if let Some(out) = &args.out {
        let details = json!({ "scores": absolute(&args.scores)?, "labels": absolute(&source)? });
        write_artifact(
            out,
            &serde_json::to_vec_pretty(&report).map_err(Error::from)?,
            &ctx.meta("evaluate", details),
        )?;
    }
    Ok(())
}

pub fn calibrate(ctx: &Context, args: CalibrateArgs) -> CliResult {
    let thresholds = args.thresholds.clone().unwrap_or_else(default_threshold_grid);
    if thresholds.is_empty() || thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(CliError::Usage("thresholds must lie in [0, 1]".into()));
    }
    let (set, source) = labeled_scores(ctx, &args.scores, args.manifest)?;
    let rows = sweep(&set, &thresholds, ctx.cfg.eval.dcf)?;
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    println!(
        "{:>9} {:>5} {:>5} {:>5} {:>5} {:>8} {:>8} {:>8}",
        "threshold", "tp", "fp", "tn", "fn", "accuracy", "f1", "dcf"
    );
    for r in &rows {
        println!(
            "{:>9.4} {:>5} {:>5} {:>5} {:>5} {:>8.4} {:>8} {:>8}",
            r.threshold,
            r.tp,
            r.fp,
            r.tn,
            r.fn_,
            r.accuracy,
            opt(r.f1),
            opt(r.dcf)
        );
    }
    if let Some(eer) = rows.first().and_then(|r| r.eer) {
        println!("eer {eer:.4}");
    }
    if let Some(best) = best_threshold(&rows) {
        println!("best_threshold {:.4} (accuracy {:.4})", best.threshold, best.accuracy);
    }
    if let Some(out) = &args.out {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        for r in &rows {
            w.serialize(r).map_err(Error::from)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Consistency(e.to_string()))?;
        let details = json!({ "scores": absolute(&args.scores)?, "labels": absolute(&source)? });
        write_artifact(out, &bytes, &ctx.meta("calibrate", details))?;
    }
    Ok(())
}

pub fn schedule(ctx: &Context, args: ScheduleArgs) -> CliResult {
    let epochs = args.epochs.unwrap_or(ctx.cfg.train.epochs_per_phase);
    let finetune = args.finetune.unwrap_or(ctx.cfg.train.finetune_epochs);
    let schedule = make_schedule(ctx.cfg.data.k, epochs, finetune)
        .map_err(|e| CliError::Usage(format!("invalid schedule: {e}")))?;
    println!("{schedule}");
    match (&args.out, args.dry_run) {
        (Some(out), false) => {
            let bytes = serde_json::to_vec_pretty(&schedule).map_err(Error::from)?;
            write_artifact(out, &bytes, &ctx.meta("schedule", json!({})))?;
            println!("wrote {}", out.display());
        }
        (Some(_), true) => println!("dry run: nothing written"),
        _ => {}
    }
    Ok(())
}
