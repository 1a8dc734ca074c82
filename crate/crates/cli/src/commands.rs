use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use attend_core::affectmodel::{
    fnv1a64, load_weights, probs_to_intensities, probs_to_levels, save_weights, state_names, AffectModel, AffectiveState, AffectiveStateProbs,
    ModelCard, ARCHITECTURE,
};
use attend_core::analytics::{read_event_log, recommend, replay, report_json, AnalyticsConfig, LectureReport, SessionEvent, SessionMeta};
use attend_core::attnindex::{default_paper_weights, fit_weights, load_annotations, FitOutput, IndexConfig, IntensitySource};
use attend_core::datasetio::{generate_synthetic, to_training_set, Split, SyntheticSpec};
use attend_core::facegate::{detect_faces_with, gate_frame, load_cascade, Cascade, DetectParams, Gate};
use attend_core::par::Exec;
use attend_core::tensornet::{evaluate, sidecar_path, train, AdamConfig, LossSettings, TrainConfig};
use attend_service::frames::read_image;
use attend_service::hub::{EVENTS_FILE, REPORT_FILE};
use attend_service::{SessionRecord, ServiceConfig};
use serde_json::{json, Value};

use crate::store::{digest, read_split, write_dataset};
use crate::{
    Cli, CliError, Command, DetectArgs, DetectorArgs, EvaluateArgs, ExecArgs, FitIndexArgs, LossKind, PredictArgs, ReplayArgs, ReportArgs,
    ServeArgs, SourceKind, SynthArgs, TrainArgs,
};

/// Probability rows must sum to one within this tolerance.
const PROBS_TOLERANCE: f64 = 1e-4;

pub fn run(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::SynthData(a) => synth_data(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Evaluate(a) => evaluate_cmd(cli, a),
        Command::Detect(a) => detect(cli, a),
        Command::Predict(a) => predict(cli, a),
        Command::FitIndex(a) => fit_index(cli, a),
        Command::Serve(a) => serve(a),
        Command::Report(a) => report(cli, a),
        Command::Replay(a) => replay_cmd(cli, a),
    }
}

fn exec(a: &ExecArgs) -> Exec {
    if a.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("json value serializes")
}

fn synth_data(cli: &Cli, a: &SynthArgs) -> Result<String, CliError> {
    let mut spec = SyntheticSpec::new(a.train, a.val, a.test);
    spec.noise_std_dev = a.noise;
    spec.rng_seed = cli.seed;
    let ds = generate_synthetic(&spec).map_err(|e| CliError::Usage(e.to_string()))?;
    let files = write_dataset(&a.out, &ds, &spec)?;
    let digest = digest(&files)?;
    let counts: BTreeMap<String, usize> = Split::ALL
        .iter()
        .map(|&s| (s.dir_name().to_ascii_lowercase(), ds.split(s).len()))
        .collect();
    if cli.json {
        return Ok(pretty(&json!({
            "out": a.out,
            "digest": digest,
            "samples": counts,
            "engagement_levels": ds.level_counts(Split::Train)[AffectiveState::Engagement.index()],
            "files": files,
        })));
    }
    let mut out = format!("wrote {} files to {}\n", files.len(), a.out.display());
    for (split, n) in &counts {
        let _ = writeln!(out, "  {split:<10} {n} samples");
    }
    let _ = write!(out, "sha256 {digest}");
    Ok(out)
}

fn loss_settings(kind: LossKind, gamma: f64) -> LossSettings {
    match kind {
        LossKind::Focal => LossSettings {
            gamma,
            ..LossSettings::focal_default()
        },
        LossKind::CrossEntropy => LossSettings::cross_entropy(),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Result<String, CliError> {
    let cfg = TrainConfig {
        max_epochs: a.epochs,
        batch_size: a.batch_size,
        early_stop_patience: a.patience.min(a.epochs),
        min_delta: a.min_delta,
        stop_at_accuracy: a.stop_at_accuracy,
        rng_seed: cli.seed,
        loss: loss_settings(a.loss, a.gamma),
        adam: AdamConfig {
            learning_rate: a.lr,
            ..AdamConfig::default()
        },
        exec: exec(&a.exec),
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let train_set = to_training_set(&read_split(&a.data, Split::Train)?);
    let val_set = to_training_set(&read_split(&a.data, Split::Validation)?);
    let model = AffectModel::build(cli.seed);
    let (net, history) = train(model.net(), &train_set, &val_set, &cfg).map_err(CliError::data)?;
    let model = AffectModel::from_net(net).map_err(CliError::runtime)?;
    save_weights(&model, &a.out).map_err(CliError::runtime)?;
    let names = state_names();
    let history_path = with_suffix(&a.out, ".history.csv");
    std::fs::write(&history_path, history.to_csv(&names)).map_err(CliError::runtime)?;
    let best = &history.epochs[history.best_epoch - 1];
    let card = ModelCard {
        architecture: ARCHITECTURE.into(),
        seed: cli.seed,
        parameter_count: model.param_count(),
        training_config_digest: format!("{:016x}", fnv1a64(serde_json::to_string(&cfg).expect("config serializes").as_bytes())),
        best_epoch: history.best_epoch,
        validation_accuracy: names.iter().map(|n| n.to_string()).zip(best.head_accuracy.iter().copied()).collect(),
    };
    let card_path = with_suffix(&a.out, ".card.json");
    std::fs::write(&card_path, serde_json::to_string_pretty(&card).expect("card serializes")).map_err(CliError::runtime)?;
    if cli.json {
        return Ok(pretty(&json!({
            "weights": a.out,
            "manifest": sidecar_path(&a.out),
            "history": history_path,
            "card": card_path,
            "epochs_run": history.epochs.len(),
            "best_epoch": history.best_epoch,
            "stopped_early": history.stopped_early,
            "val_loss": best.val_loss,
            "val_accuracy": card.validation_accuracy,
        })));
    }
    let mut out = format!(
        "trained {} epochs (best {}, {}), weights {}\n",
        history.epochs.len(),
        history.best_epoch,
        if history.stopped_early { "stopped early" } else { "ran to completion" },
        a.out.display()
    );
    for (name, acc) in &card.validation_accuracy {
        let _ = writeln!(out, "  val {name:<12} {:6.2}%", acc * 100.0);
    }
    let _ = write!(out, "history {}", history_path.display());
    Ok(out)
}

fn evaluate_cmd(cli: &Cli, a: &EvaluateArgs) -> Result<String, CliError> {
    let split: Split = a.split.parse().map_err(CliError::Usage)?;
    let model = load_weights(&a.model).map_err(CliError::data)?;
    let data = to_training_set(&read_split(&a.data, split)?);
    let losses = LossSettings::cross_entropy().resolve(model.net(), &data).map_err(CliError::data)?;
    let eval = evaluate(model.net(), &data, &losses, exec(&a.exec)).map_err(CliError::data)?;
    let names = state_names();
    let minority: Vec<Option<f64>> = (0..names.len()).map(|h| eval.pooled_recall(h, &[0, 1])).collect();
    if cli.json {
        return Ok(pretty(&json!({
            "model": a.model,
            "split": split,
            "samples": data.len(),
            "mean_loss": eval.mean_loss,
            "accuracy": names.iter().zip(&eval.head_accuracy).map(|(n, a)| (n.to_string(), *a)).collect::<BTreeMap<_, _>>(),
            "minority_recall": names.iter().zip(&minority).map(|(n, r)| (n.to_string(), *r)).collect::<BTreeMap<_, _>>(),
            "confusion": eval.confusion,
        })));
    }
    let label = a.model.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let width = label.len().max(5);
    let mut out = format!("{:<width$}", "Model");
    for s in AffectiveState::ALL {
        let _ = write!(out, "  {:>11}", s.title());
    }
    let _ = write!(out, "\n{label:<width$}");
    for acc in &eval.head_accuracy {
        let _ = write!(out, "  {:>10.2}%", acc * 100.0);
    }
    let _ = write!(out, "\n{} samples ({}), mean loss {:.4}", data.len(), a.split, eval.mean_loss);
    Ok(out)
}

fn detect_params(d: &DetectorArgs) -> Result<DetectParams, CliError> {
    if d.scale_factor.is_nan() || d.scale_factor <= 1.0 || d.min_neighbors == 0 || d.min_size == 0 {
        return Err(CliError::Usage("scale factor must exceed 1; min neighbors and min size must be positive".into()));
    }
    Ok(DetectParams {
        scale_factor: d.scale_factor,
        min_neighbors: d.min_neighbors,
        min_size: (d.min_size, d.min_size),
        ..DetectParams::default()
    })
}

fn cascade(d: &DetectorArgs) -> Result<Cascade, CliError> {
    load_cascade(&d.cascade).map_err(|e| CliError::Data(format!("{}: {e}", d.cascade.display())))
}

fn detect(cli: &Cli, a: &DetectArgs) -> Result<String, CliError> {
    let params = detect_params(&a.detector)?;
    let c = cascade(&a.detector)?;
    let img = read_image(&a.image).map_err(|e| CliError::Data(format!("{}: {e}", a.image.display())))?;
    let boxes = detect_faces_with(&c, &img, &params, exec(&a.exec));
    if let Some(path) = &a.draw {
        let mut canvas = img.clone();
        for b in &boxes {
            canvas.draw_rect(b.x, b.y, b.w, b.h, 255);
        }
        canvas.write_pgm(path).map_err(CliError::runtime)?;
    }
    if cli.json {
        return Ok(pretty(&json!({ "image": a.image, "width": img.width(), "height": img.height(), "faces": boxes })));
    }
    let mut out = format!("{} face(s) in {} ({}x{})", boxes.len(), a.image.display(), img.width(), img.height());
    for b in &boxes {
        let _ = write!(out, "\n  x={} y={} w={} h={} neighbors={}", b.x, b.y, b.w, b.h, b.neighbor_count);
    }
    Ok(out)
}

fn read_probs(path: &Path) -> Result<AffectiveStateProbs, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let rows = value.get("probs").cloned().unwrap_or(value);
    let rows: [[f64; 4]; 4] = serde_json::from_value(rows).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    AffectiveStateProbs::with_tolerance(rows, PROBS_TOLERANCE).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn index_config(weights: Option<&Path>) -> Result<IndexConfig, CliError> {
    let Some(path) = weights else {
        return Ok(IndexConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let fit: FitOutput = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    IndexConfig::for_weights(fit.weights).map_err(CliError::data)
}

fn predict(cli: &Cli, a: &PredictArgs) -> Result<String, CliError> {
    let index = index_config(a.weights.as_deref())?;
    let probs = match (&a.probs, &a.image) {
        (Some(p), _) => Some(read_probs(p)?),
        (None, Some(img_path)) => {
            let model_path = a.model.as_ref().ok_or_else(|| CliError::Usage("--image needs --model".into()))?;
            let params = detect_params(&a.detector)?;
            let c = cascade(&a.detector)?;
            let model = load_weights(model_path).map_err(CliError::data)?;
            let img = read_image(img_path).map_err(|e| CliError::Data(format!("{}: {e}", img_path.display())))?;
            match gate_frame(&c, &img, &params) {
                Gate::Face { face, .. } => Some(model.predict(&face).map_err(CliError::runtime)?),
                Gate::Invalid => None,
            }
        }
        (None, None) => return Err(CliError::Usage("give --probs or --image".into())),
    };
    let Some(probs) = probs else {
        return Ok(if cli.json {
            pretty(&json!({ "invalid": true }))
        } else {
            "invalid frame: no face found".into()
        });
    };
    let levels = probs_to_levels(&probs);
    let intensities = probs_to_intensities(&probs);
    let raw = index.raw(&intensities);
    let norm = index.normalized(&intensities);
    if cli.json {
        return Ok(pretty(&json!({
            "invalid": false,
            "probs": probs,
            "levels": levels,
            "intensities": intensities,
            "index": raw,
            "normalized_index": norm,
        })));
    }
    let mut out = format!("{:<12} {:>6} {:>6} {:>6} {:>6}  level  intensity\n", "state", "p0", "p1", "p2", "p3");
    for s in AffectiveState::ALL {
        let row = probs.row(s);
        let _ = writeln!(
            out,
            "{:<12} {:>6.3} {:>6.3} {:>6.3} {:>6.3}  {:>5}  {:>9.3}",
            s.title(),
            row[0],
            row[1],
            row[2],
            row[3],
            levels.get(s),
            intensities.get(s)
        );
    }
    let _ = write!(out, "index {}\nnormalized {:.4}", format_index(raw), norm);
    Ok(out)
}

/// Shortest decimal within 1e-9 of the value, up to nine places.
fn format_index(v: f64) -> String {
    for places in 0..=9 {
        let s = format!("{v:.places$}");
        if (s.parse::<f64>().unwrap_or(f64::NAN) - v).abs() < 1e-9 {
            return s;
        }
    }
    v.to_string()
}

fn fit_index(cli: &Cli, a: &FitIndexArgs) -> Result<String, CliError> {
    let source = match a.source {
        SourceKind::GroundTruth => IntensitySource::GroundTruth,
        SourceKind::Predicted => IntensitySource::Predicted,
    };
    let records = load_annotations(&a.annotations, source).map_err(CliError::data)?;
    let (weights, report) = fit_weights(&records).map_err(CliError::data)?;
    let output = FitOutput { weights, report };
    if let Some(path) = &a.out {
        std::fs::write(path, serde_json::to_string_pretty(&output).expect("fit serializes")).map_err(CliError::runtime)?;
    }
    if cli.json {
        return Ok(serde_json::to_string_pretty(&output).expect("fit serializes"));
    }
    let mut out = format!("fitted on {} records\n", output.report.records);
    for (s, w) in AffectiveState::ALL.iter().zip(weights.as_array()) {
        let _ = writeln!(out, "  {:<12} {w:>9.4}   (default {:>7.3})", s.title(), default_paper_weights().as_array()[s.index()]);
    }
    let _ = write!(
        out,
        "R^2 {:.4}, residual norm {:.4}, condition {:.2}",
        output.report.r_squared, output.report.residual_norm, output.report.condition_number
    );
    Ok(out)
}

fn serve(a: &ServeArgs) -> Result<String, CliError> {
    let mut cfg = ServiceConfig::load(a.config.as_deref()).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(h) = &a.host {
        cfg.host = h.clone();
    }
    if let Some(p) = a.port {
        cfg.port = p;
    }
    if let Some(d) = &a.data_dir {
        cfg.data_dir = d.clone();
    }
    if let Some(m) = &a.model {
        cfg.model_path = Some(m.clone());
    }
    if let Some(c) = &a.cascade {
        cfg.cascade_path = Some(c.clone());
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let rt = tokio::runtime::Runtime::new().map_err(CliError::runtime)?;
    rt.block_on(attend_service::run(cfg)).map_err(CliError::runtime)?;
    Ok("service stopped".into())
}

/// Loads a report JSON file, or a session directory's report (replaying its log when absent).
fn load_report(path: &Path) -> Result<LectureReport, CliError> {
    let text = if path.is_dir() {
        let stored = path.join(REPORT_FILE);
        if stored.is_file() {
            std::fs::read_to_string(&stored).map_err(CliError::data)?
        } else {
            replay_path(path, &ReplayDefaults::default())?.0
        }
    } else {
        std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
    };
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn report(cli: &Cli, a: &ReportArgs) -> Result<String, CliError> {
    let reports = a.inputs.iter().map(|p| load_report(p)).collect::<Result<Vec<_>, _>>()?;
    let recs = recommend(&reports);
    let lectures: Vec<Value> = reports
        .iter()
        .map(|r| {
            let means: Vec<f64> = r.series.iter().filter_map(|s| s.mean_norm_index).collect();
            json!({
                "session_id": r.session.session_id,
                "title": r.session.title,
                "duration_ms": r.duration_ms(),
                "total_events": r.total_events,
                "learners": r.learners.len(),
                "mean_norm_index": (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64),
                "low_segments": r.low_segments.len(),
                "state_peaks": r.state_peaks.len(),
                "alerts": r.alerts.len(),
            })
        })
        .collect();
    if cli.json {
        return Ok(pretty(&json!({ "lectures": lectures, "recommendations": recs })));
    }
    let mut out = String::new();
    for l in &lectures {
        let mean = l["mean_norm_index"].as_f64().map_or("-".into(), |m| format!("{m:.3}"));
        let _ = writeln!(
            out,
            "{} {:?}: {} events, {} learners, mean index {mean}, {} low segment(s), {} peak(s), {} alert(s)",
            l["session_id"].as_str().unwrap_or_default(),
            l["title"].as_str().unwrap_or_default(),
            l["total_events"],
            l["learners"],
            l["low_segments"],
            l["state_peaks"],
            l["alerts"]
        );
    }
    if recs.is_empty() {
        out.push_str("no recommendations");
    } else {
        for r in &recs {
            let _ = write!(out, "\n* {} ({} lecture(s))", r.text, r.evidence.len());
        }
    }
    Ok(out.trim_start_matches('\n').to_string())
}

struct ReplayDefaults {
    title: String,
    created_at_ms: u64,
    threshold: f64,
}

impl Default for ReplayDefaults {
    fn default() -> Self {
        Self {
            title: String::new(),
            created_at_ms: 0,
            threshold: AnalyticsConfig::default().disengaged_threshold,
        }
    }
}

/// Replays a session directory or log file; returns the report JSON and the alert count.
fn replay_path(path: &Path, defaults: &ReplayDefaults) -> Result<(String, usize), CliError> {
    let (dir, log) = if path.is_dir() {
        (path.to_owned(), path.join(EVENTS_FILE))
    } else {
        (path.parent().map(Path::to_owned).unwrap_or_default(), path.to_owned())
    };
    let file = std::fs::File::open(&log).map_err(|e| CliError::Data(format!("{}: {e}", log.display())))?;
    let events = read_event_log(std::io::BufReader::new(file)).map_err(|e| CliError::Data(format!("{}: {e}", log.display())))?;
    let (meta, config) = match SessionRecord::load(&dir) {
        Ok(rec) => (rec.meta, rec.initial_config),
        Err(_) => {
            let session_id = events.first().map(SessionEvent::session_id).unwrap_or("session").to_owned();
            let config = AnalyticsConfig {
                disengaged_threshold: defaults.threshold,
                ..AnalyticsConfig::default()
            };
            config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let meta = SessionMeta {
                session_id,
                title: defaults.title.clone(),
                created_at_ms: defaults.created_at_ms,
            };
            (meta, config)
        }
    };
    let out = replay(&meta, config, &events).map_err(|e| CliError::Data(format!("{}: {e}", log.display())))?;
    Ok((report_json(&out.report), out.alerts.len()))
}

fn replay_cmd(cli: &Cli, a: &ReplayArgs) -> Result<String, CliError> {
    let defaults = ReplayDefaults {
        title: a.title.clone(),
        created_at_ms: a.created_at_ms,
        threshold: a.threshold,
    };
    let (report, alerts) = replay_path(&a.log, &defaults)?;
    let Some(out) = &a.out else {
        return Ok(report);
    };
    std::fs::write(out, &report).map_err(CliError::runtime)?;
    if cli.json {
        return Ok(pretty(&json!({ "report": out, "alerts": alerts, "bytes": report.len() })));
    }
    Ok(format!("replayed {} alert(s); report written to {}", alerts, out.display()))
}
