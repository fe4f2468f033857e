use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use umtl::arrays::{read_file, sha256_hex, ArrayFile};
use umtl::config::{Mode, RunConfig};
use umtl::corpus::{self, CorpusManifest, Image, WsiBag};
use umtl::eval::{predict_state, report, run_ablation_suite, AblationVariant, MetricReport, SlidePrediction};
use umtl::mutual::{
    iteration_dir, load_iteration, resume_mutual, run_mutual, save_iteration, CleanerKind, IterationState,
    MutualOptions, SavedIteration, CHECKPOINT_FILE, LABELS_FILE, METRICS_FILE,
};
use umtl::supervision::{finetune_subtype, split_bags, weak_from_state, SubtypeRun, WeakRun};
use umtl::{Mat, Result, UmtlError};

use crate::manifest::{RunManifest, Timings, CONFIG_FILE, SPLIT_FILE};
use crate::render;
use crate::settings::{corpus_manifest, load_config, output_dir};

fn json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| UmtlError::io(dir, e))
}

struct Corpus {
    path: PathBuf,
    manifest: CorpusManifest,
    bags: Vec<WsiBag>,
}

fn open_corpus(path: &Path) -> Result<Corpus> {
    let path = corpus_manifest(path)?;
    let manifest = corpus::read_manifest(&path)?;
    let bags = corpus::load_corpus(&path)?;
    Ok(Corpus { path, manifest, bags })
}

impl Corpus {
    /// Corpus patches must match the model input size.
    fn check(&self, cfg: &RunConfig) -> Result<()> {
        for b in &self.bags {
            if b.patch_size() != cfg.model.patch_size {
                return Err(UmtlError::config(
                    "model.patch_size",
                    format!("{} has {}-pixel patches", b.slide_id, b.patch_size()),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SplitRecord {
    seed: u64,
    test_fraction: f64,
    train: Vec<String>,
    test: Vec<String>,
}

fn split<'a>(bags: &'a [WsiBag], cfg: &RunConfig) -> (Vec<&'a WsiBag>, Vec<&'a WsiBag>, SplitRecord) {
    let refs: Vec<&WsiBag> = bags.iter().collect();
    let (tr, te) = split_bags(&refs, cfg.run.test_fraction, cfg.run.seed);
    let train: Vec<&WsiBag> = tr.iter().map(|&i| refs[i]).collect();
    let test: Vec<&WsiBag> = te.iter().map(|&i| refs[i]).collect();
    let record = SplitRecord {
        seed: cfg.run.seed,
        test_fraction: cfg.run.test_fraction,
        train: train.iter().map(|b| b.slide_id.clone()).collect(),
        test: test.iter().map(|b| b.slide_id.clone()).collect(),
    };
    (train, test, record)
}

fn select<'a>(bags: &'a [WsiBag], ids: &[String]) -> Result<Vec<&'a WsiBag>> {
    ids.iter()
        .map(|id| {
            bags.iter()
                .find(|b| &b.slide_id == id)
                .ok_or_else(|| UmtlError::Other(format!("slide {id} from the split is not in the corpus")))
        })
        .collect()
}

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Unsupervised => "unsupervised",
        Mode::Weak => "weak",
        Mode::Downstream => "downstream",
        Mode::Ablation => "ablation",
    }
}

/// Outcome printed as one line on stdout.
pub struct Done {
    pub dir: PathBuf,
    pub summary: String,
}

pub fn generate(config: Option<&Path>, sets: &[String], out: &str) -> Result<Done> {
    let cfg = load_config(config, sets)?;
    let dir = output_dir(out)?;
    let m = corpus::generate_corpus(&cfg.corpus, &dir)?;
    Ok(Done {
        dir,
        summary: format!("corpus {} with {} bags", m.corpus_id, m.bags.len()),
    })
}

fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| UmtlError::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data: Vec<f64> = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Image::new(h as usize, w as usize, Mat::from_vec((w * h) as usize, 3, data))
}

pub fn tile(config: Option<&Path>, sets: &[String], images: &[PathBuf], out: &str) -> Result<Done> {
    let cfg = load_config(config, sets)?;
    if images.is_empty() {
        return Err(UmtlError::config("image", "at least one image is required"));
    }
    let mut bags = Vec::with_capacity(images.len());
    for p in images {
        if !p.is_file() {
            return Err(UmtlError::MissingFile(p.clone()));
        }
        let id = p
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| UmtlError::config("image", format!("{} has no usable file name", p.display())))?;
        let img = read_image(p)?;
        bags.push(corpus::tile_image(&img, cfg.corpus.patch_size, cfg.thresholds.tissue, id)?);
    }
    let dir = output_dir(out)?;
    let m = corpus::write_corpus(&dir, &bags, None)?;
    let patches: usize = m.bags.iter().map(|b| b.num_patches).sum();
    Ok(Done {
        dir,
        summary: format!("{} slides tiled into {patches} patches", m.bags.len()),
    })
}

fn saved_entry(run_dir: &Path, t: usize) -> Result<SavedIteration> {
    let ck = iteration_dir(run_dir, t).join(CHECKPOINT_FILE);
    let rel = |f: &str| format!("iter_{t}/{f}");
    Ok(SavedIteration {
        iteration: t,
        checkpoint: rel(CHECKPOINT_FILE),
        checkpoint_sha256: sha256_hex(&read_file(&ck)?),
        labels: rel(LABELS_FILE),
        metrics: rel(METRICS_FILE),
    })
}

fn unsupervised(
    run_dir: &Path,
    train: &[&WsiBag],
    cfg: &RunConfig,
    resume: Option<usize>,
    manifest: &mut RunManifest,
    timings: &mut Timings,
) -> Result<IterationState> {
    let opts = MutualOptions::default();
    let mut saved = Vec::new();
    let mut sink = |s: &IterationState| -> Result<()> {
        saved.push(save_iteration(run_dir, s)?);
        Ok(())
    };
    let states = match resume {
        Some(t) => {
            if t == 0 || t > cfg.run.iterations {
                return Err(UmtlError::config("resume", format!("iteration {t} outside 1..={}", cfg.run.iterations)));
            }
            let from = load_iteration(run_dir, t, cfg, &opts)?;
            let earlier: Vec<SavedIteration> = (1..=t).map(|k| saved_entry(run_dir, k)).collect::<Result<_>>()?;
            let states = timings.time("mutual", || resume_mutual(train, cfg, &opts, from, &mut sink))?;
            manifest.iterations = earlier;
            states
        }
        None => timings.time("mutual", || run_mutual(train, cfg, &opts, &mut sink))?,
    };
    manifest.iterations.extend(saved);
    Ok(states.into_iter().last().expect("at least one iteration"))
}

fn weak_outputs(run: &WeakRun, run_dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    manifest.emit(run_dir, "weak/checkpoint.umtl", &run.state.model.checkpoint().to_bytes())?;
    manifest.emit(run_dir, "weak/inherited_labels.json", &json(&run.inherited)?)?;
    manifest.emit(run_dir, "weak/report.json", &json(&run.report)?)?;
    manifest.emit(run_dir, "weak/history.json", &json(&run.history)?)?;
    Ok(())
}

fn subtype_classes(bags: &[WsiBag], cfg: &RunConfig) -> usize {
    if cfg.corpus.num_subtypes >= 2 {
        return cfg.corpus.num_subtypes;
    }
    bags.iter().filter_map(|b| b.subtype_label).max().map_or(0, |k| k + 1)
}

fn subtype_outputs(run: &SubtypeRun, dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    let mut f = ArrayFile::new();
    f.set_meta("kind", "umtl-subtype");
    f.set_meta("frozen_digest", &run.report.frozen_digest);
    for (name, m) in run.store.iter() {
        f.push(name, m.clone());
    }
    manifest.emit(dir, "subtype/checkpoint.umtl", &f.to_bytes())?;
    manifest.emit(dir, "subtype/report.json", &json(&run.report)?)?;
    manifest.emit(dir, "subtype/history.json", &json(&run.history)?)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["slide_id".to_string(), "truth".into(), "subtype".into(), "positives".into()];
    header.extend((0..run.report.classes).map(|k| format!("score_{k}")));
    w.write_record(&header).map_err(csv_err)?;
    for p in &run.report.predictions {
        let mut row = vec![
            p.slide_id.clone(),
            p.truth.map(|v| v.to_string()).unwrap_or_default(),
            p.subtype.map(|v| v.to_string()).unwrap_or_default(),
            p.positives.to_string(),
        ];
        row.extend(p.scores.iter().map(|s| format!("{s:.6}")));
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| UmtlError::Other(format!("csv: {e}")))?;
    manifest.emit(dir, "subtype/predictions.csv", &bytes)
}

fn csv_err(e: csv::Error) -> UmtlError {
    UmtlError::Other(format!("csv: {e}"))
}

fn start_run(cfg: &RunConfig, command: &str, out: &str, corpus: &Corpus) -> Result<(PathBuf, RunManifest)> {
    let run_dir = output_dir(out)?;
    create_dir(&run_dir)?;
    let mut manifest = RunManifest::new(command, mode_name(cfg.run.mode), cfg.digest(), cfg.run.seed);
    manifest.corpus = Some(corpus.path.display().to_string());
    manifest.corpus_digest = Some(corpus.manifest.digest());
    let text = toml::to_string(cfg).map_err(|e| UmtlError::Other(format!("config encoding: {e}")))?;
    manifest.emit(&run_dir, CONFIG_FILE, text.as_bytes())?;
    Ok((run_dir, manifest))
}

pub fn train(config: Option<&Path>, sets: &[String], corpus_path: &Path, out: &str, resume: Option<usize>) -> Result<Done> {
    let cfg = load_config(config, sets)?;
    let corpus = open_corpus(corpus_path)?;
    corpus.check(&cfg)?;
    let (run_dir, mut manifest) = start_run(&cfg, "train", out, &corpus)?;
    if resume.is_some() {
        if let Ok(prev) = RunManifest::read(&run_dir) {
            if prev.config_digest != manifest.config_digest {
                return Err(UmtlError::config("resume", "run directory was produced with a different config"));
            }
        }
    }
    let (train, test, record) = split(&corpus.bags, &cfg);
    manifest.emit(&run_dir, SPLIT_FILE, &json(&record)?)?;
    let mut timings = Timings::default();
    let summary = match cfg.run.mode {
        Mode::Ablation => {
            if resume.is_some() {
                return Err(UmtlError::config("resume", "ablation runs cannot be resumed"));
            }
            let reports = timings.time("ablation", || run_ablation_suite(&train, &test, &cfg, &AblationVariant::ALL))?;
            ablation_outputs(&reports, &run_dir, &mut manifest)?;
            format!("ablation over {} variants", reports.len())
        }
        mode => {
            let last = unsupervised(&run_dir, &train, &cfg, resume, &mut manifest, &mut timings)?;
            match mode {
                Mode::Weak => {
                    let run = timings.time("weak", || weak_from_state(&last, &train, &test, &cfg, cfg.run.label_fraction))?;
                    weak_outputs(&run, &run_dir, &mut manifest)?;
                    format!("weak supervision at fraction {}", cfg.run.label_fraction)
                }
                Mode::Downstream => {
                    let classes = subtype_classes(&corpus.bags, &cfg);
                    let run = timings.time("subtype", || finetune_subtype(&last, &train, &test, &cfg, classes))?;
                    subtype_outputs(&run, &run_dir, &mut manifest)?;
                    format!("subtype fine-tuning with {classes} classes")
                }
                _ => format!("{} iterations", manifest.iterations.len()),
            }
        }
    };
    manifest.finish(&run_dir, &timings)?;
    Ok(Done { dir: run_dir, summary })
}

fn run_config(run_dir: &Path) -> Result<RunConfig> {
    let p = run_dir.join(CONFIG_FILE);
    let cfg = load_config(Some(&p), &[])?;
    Ok(cfg)
}

fn report_text(r: &MetricReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "variant       {}", r.variant);
    let _ = writeln!(s, "seed          {}", r.seed);
    let _ = writeln!(s, "config        {}", r.config_digest);
    if let Some(note) = &r.note {
        let _ = writeln!(s, "note          {note}");
    }
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    if let Some(m) = &r.instance {
        let _ = writeln!(
            s,
            "instance      n={} acc={:.4} f1={:.4} auc={}",
            m.count,
            m.accuracy,
            m.f1,
            fmt(m.auc)
        );
    }
    if let Some(m) = &r.slide {
        let _ = writeln!(s, "slide         n={} acc={:.4} f1={:.4} auc={}", m.count, m.accuracy, m.f1, fmt(m.auc));
    }
    let _ = writeln!(s, "froc          {}", fmt(r.froc));
    let _ = writeln!(s, "positives     instances={} slides={}", r.positive_instances, r.positive_slides);
    s
}

fn scores_csv(preds: &[SlidePrediction]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["slide_id", "row", "col", "loss", "phi", "label", "smoothed", "truth"])
        .map_err(csv_err)?;
    for p in preds {
        for i in 0..p.positions.len() {
            let truth = p.truths.as_ref().map(|t| t[i].to_string()).unwrap_or_default();
            w.write_record([
                p.slide_id.clone(),
                p.positions[i].0.to_string(),
                p.positions[i].1.to_string(),
                format!("{:.8}", p.losses[i]),
                format!("{:.8}", p.scores[i]),
                p.labels[i].to_string(),
                format!("{:.8}", p.smoothed[i]),
                truth,
            ])
            .map_err(csv_err)?;
        }
    }
    w.into_inner().map_err(|e| UmtlError::Other(format!("csv: {e}")))
}

pub fn evaluate(run: &str, corpus_override: Option<&Path>, iteration: Option<usize>) -> Result<Done> {
    let run_dir = output_dir(run)?;
    let run_manifest = RunManifest::read(&run_dir)?;
    let cfg = run_config(&run_dir)?;
    let corpus_path = match corpus_override {
        Some(p) => p.to_path_buf(),
        None => PathBuf::from(
            run_manifest
                .corpus
                .clone()
                .ok_or_else(|| UmtlError::config("corpus", "run manifest names no corpus"))?,
        ),
    };
    let corpus = open_corpus(&corpus_path)?;
    let record: SplitRecord = serde_json::from_slice(&read_file(&run_dir.join(SPLIT_FILE))?)?;
    let mut test = select(&corpus.bags, &record.test)?;
    if test.is_empty() {
        test = select(&corpus.bags, &record.train)?;
    }
    let t = iteration.unwrap_or_else(|| run_manifest.iterations.last().map_or(0, |i| i.iteration));
    if !run_manifest.iterations.iter().any(|i| i.iteration == t) {
        return Err(UmtlError::config("iteration", format!("run has no saved iteration {t}")));
    }
    let state = load_iteration(&run_dir, t, &cfg, &MutualOptions::default())?;
    let mut timings = Timings::default();
    let preds = timings.time("predict", || {
        predict_state(&state, &test, &cfg, Some(CleanerKind::Transformer), cfg.smoothing.rule)
    })?;
    let rep = report(&preds, &format!("UMTL iter {t}"), &cfg);
    let dir = run_dir.join("eval");
    create_dir(&dir)?;
    let mut manifest = RunManifest::new("evaluate", &run_manifest.mode, cfg.digest(), cfg.run.seed);
    manifest.corpus = Some(corpus.path.display().to_string());
    manifest.corpus_digest = Some(corpus.manifest.digest());
    manifest.emit(&dir, "report.json", &json(&rep)?)?;
    manifest.emit(&dir, "report.txt", report_text(&rep).as_bytes())?;
    manifest.emit(&dir, "scores.csv", &scores_csv(&preds)?)?;
    manifest.emit(&dir, "predictions.json", &json(&preds)?)?;
    for (p, b) in preds.iter().zip(&test) {
        let png = render::heatmap_png(p, b.grid_shape)?;
        manifest.emit(&dir, &format!("heatmaps/{}.png", p.slide_id), &png)?;
    }
    manifest.finish(&dir, &timings)?;
    let auc = rep.instance_auc().map_or("n/a".into(), |v| format!("{v:.4}"));
    let note = rep.note.clone().map(|n| format!(" ({n})")).unwrap_or_default();
    Ok(Done {
        dir,
        summary: format!("instance auc {auc}{note}"),
    })
}

fn ablation_outputs(reports: &[MetricReport], dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<10} {:>3} {:>5} {:>3} {:>4} {:>4} {:>9} {:>9} {:>8} {:>6}",
        "variant", "IC", "TPLG", "DL", "TLC", "ILS", "inst_auc", "slide_acc", "slide_f1", "froc"
    );
    let mark = |b: bool| if b { "x" } else { "-" };
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    let mut bars = Vec::new();
    for r in reports {
        let c = AblationVariant::parse(&r.variant).map(|v| v.components());
        let cols = c.map_or(["?"; 5], |c| {
            [
                mark(c.clustering),
                if c.autoencoder_generator { "ae" } else { mark(c.transformer_generator) },
                mark(c.discriminative),
                if c.perceptron_cleaner { "mlp" } else { mark(c.transformer_cleaner) },
                mark(c.smoothing),
            ]
        });
        let _ = writeln!(
            s,
            "{:<10} {:>3} {:>5} {:>3} {:>4} {:>4} {:>9} {:>9} {:>8} {:>6}",
            r.variant,
            cols[0],
            cols[1],
            cols[2],
            cols[3],
            cols[4],
            fmt(r.instance_auc()),
            fmt(r.slide_accuracy()),
            fmt(r.slide.as_ref().map(|m| m.f1)),
            fmt(r.froc)
        );
        bars.push((r.variant.clone(), r.instance_auc()));
    }
    for r in reports.iter().filter(|r| r.aborted()) {
        let _ = writeln!(s, "{}: {}", r.variant, r.note.as_deref().unwrap_or_default());
    }
    manifest.emit(dir, "ablation.json", &json(&reports)?)?;
    manifest.emit(dir, "ablation.txt", s.as_bytes())?;
    let svg = render::bar_chart_svg("Ablation", "instance AUC", &bars);
    manifest.emit(dir, "ablation.svg", svg.as_bytes())
}

pub fn ablate(config: Option<&Path>, sets: &[String], corpus_path: &Path, out: &str, variants: &[String]) -> Result<Done> {
    let cfg = load_config(config, sets)?;
    let corpus = open_corpus(corpus_path)?;
    corpus.check(&cfg)?;
    let chosen: Vec<AblationVariant> = if variants.is_empty() {
        AblationVariant::ALL.to_vec()
    } else {
        variants
            .iter()
            .map(|v| AblationVariant::parse(v).ok_or_else(|| UmtlError::config("variant", format!("unknown variant {v}"))))
            .collect::<Result<_>>()?
    };
    let (run_dir, mut manifest) = start_run(&cfg, "ablate", out, &corpus)?;
    let (train, test, record) = split(&corpus.bags, &cfg);
    manifest.emit(&run_dir, SPLIT_FILE, &json(&record)?)?;
    let mut timings = Timings::default();
    let reports = timings.time("ablation", || run_ablation_suite(&train, &test, &cfg, &chosen))?;
    ablation_outputs(&reports, &run_dir, &mut manifest)?;
    manifest.finish(&run_dir, &timings)?;
    Ok(Done {
        dir: run_dir,
        summary: format!("ablation over {} variants", reports.len()),
    })
}

#[derive(Serialize)]
struct CurvePoint<'a> {
    fraction: f64,
    labeled_slides: usize,
    retained_instances: Option<usize>,
    excluded_slides: Vec<String>,
    report: &'a MetricReport,
}

pub fn weak_curve(config: Option<&Path>, sets: &[String], corpus_path: &Path, out: &str, fractions: &[f64]) -> Result<Done> {
    let cfg = load_config(config, sets)?;
    let corpus = open_corpus(corpus_path)?;
    corpus.check(&cfg)?;
    for &f in fractions {
        if !(0.0..=1.0).contains(&f) {
            return Err(UmtlError::config("fractions", format!("{f} outside [0,1]")));
        }
    }
    let (run_dir, mut manifest) = start_run(&cfg, "weak-curve", out, &corpus)?;
    let (train, test, record) = split(&corpus.bags, &cfg);
    manifest.emit(&run_dir, SPLIT_FILE, &json(&record)?)?;
    let mut timings = Timings::default();
    let last = unsupervised(&run_dir, &train, &cfg, None, &mut manifest, &mut timings)?;
    let runs: Vec<WeakRun> = timings.time("weak", || {
        fractions.iter().map(|&f| weak_from_state(&last, &train, &test, &cfg, f)).collect()
    })?;
    let points: Vec<CurvePoint<'_>> = runs
        .iter()
        .map(|r| CurvePoint {
            fraction: r.fraction,
            labeled_slides: r.labeled.len(),
            retained_instances: r.inherited.as_ref().map(|i| i.retained_count()),
            excluded_slides: r.inherited.as_ref().map(|i| i.excluded.clone()).unwrap_or_default(),
            report: &r.report,
        })
        .collect();
    let mut text = format!("{:>8} {:>8} {:>9} {:>9}\n", "fraction", "slides", "inst_auc", "slide_acc");
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    for p in &points {
        let _ = writeln!(
            text,
            "{:>8.2} {:>8} {:>9} {:>9}",
            p.fraction,
            p.labeled_slides,
            fmt(p.report.instance_auc()),
            fmt(p.report.slide_accuracy())
        );
    }
    let line: Vec<(f64, f64)> = points
        .iter()
        .filter_map(|p| p.report.instance_auc().map(|a| (p.fraction, a)))
        .collect();
    manifest.emit(&run_dir, "curve.json", &json(&points)?)?;
    manifest.emit(&run_dir, "curve.txt", text.as_bytes())?;
    let svg = render::line_chart_svg("Weak supervision", "labelled slide fraction", "instance AUC", &line);
    manifest.emit(&run_dir, "curve.svg", svg.as_bytes())?;
    manifest.finish(&run_dir, &timings)?;
    Ok(Done {
        dir: run_dir,
        summary: format!("{} fractions", points.len()),
    })
}

pub fn subtype(config: Option<&Path>, sets: &[String], corpus_path: &Path, frozen_run: &str, out: &str) -> Result<Done> {
    let cfg = load_config(config, sets)?;
    let corpus = open_corpus(corpus_path)?;
    corpus.check(&cfg)?;
    let frozen_dir = output_dir(frozen_run)?;
    let frozen_manifest = RunManifest::read(&frozen_dir)?;
    let frozen_cfg = run_config(&frozen_dir)?;
    let last = frozen_manifest
        .iterations
        .last()
        .ok_or_else(|| UmtlError::config("run", format!("{frozen_run} has no saved iterations")))?;
    let ck_path = frozen_dir.join(&last.checkpoint);
    let frozen = load_iteration(&frozen_dir, last.iteration, &frozen_cfg, &MutualOptions::default())?;
    let classes = subtype_classes(&corpus.bags, &cfg);
    let (run_dir, mut manifest) = start_run(&cfg, "subtype", out, &corpus)?;
    let (train, test, record) = split(&corpus.bags, &cfg);
    manifest.emit(&run_dir, SPLIT_FILE, &json(&record)?)?;
    let mut timings = Timings::default();
    let run = timings.time("subtype", || finetune_subtype(&frozen, &train, &test, &cfg, classes))?;
    let after = sha256_hex(&read_file(&ck_path)?);
    if after != last.checkpoint_sha256 {
        return Err(UmtlError::DigestMismatch {
            path: ck_path,
            expected: last.checkpoint_sha256.clone(),
            found: after,
        });
    }
    subtype_outputs(&run, &run_dir, &mut manifest)?;
    manifest.finish(&run_dir, &timings)?;
    let acc = run.report.accuracy.map_or("n/a".into(), |v| format!("{v:.4}"));
    Ok(Done {
        dir: run_dir,
        summary: format!("subtype accuracy {acc} over {} slides", run.report.evaluated),
    })
}
