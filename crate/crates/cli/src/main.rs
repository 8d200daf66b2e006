use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mvrecon::aggregator::{flops_report, FlopsQuery, FlopsReport, ModelConfig};
use mvrecon::distill::DistillConfig;
use mvrecon::engine::{
    evaluate_point_error, load_checkpoint, save_checkpoint, train_toy, TrainConfig,
};
use mvrecon::geometry::normalize_scene;
use mvrecon::io::{list_bundles, load_bundle, read_json, save_bundle};
use mvrecon::metrics::{aggregate, evaluate, Alignment, EvalConfig, SequenceMetrics};
use mvrecon::quality::{
    extract_features, heuristic_gate, GateThresholds, GateVerdict, QualityConfig, QualityFeatures,
};
use mvrecon::synthetic::{make_synthetic, SceneKind, SyntheticSpec};
use mvrecon::{Bundle64, Model64};

#[derive(Parser)]
#[command(name = "mvrecon", version, about = "Multi-view reconstruction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene with exact cameras and depths.
    MakeSynthetic {
        /// plane, box-room, orbit or dynamic-translating-object.
        #[arg(long)]
        kind: SceneKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the kind's own frame count.
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        /// Normalized focal length (pixels per half image size).
        #[arg(long, default_value_t = 1.2)]
        focal: f64,
    },
    /// Analytic FLOP and activation-memory report of the trunk.
    Flops {
        #[arg(long, default_value_t = 24)]
        frames: usize,
        /// Image tokens per frame.
        #[arg(long, default_value_t = 672)]
        tokens: usize,
        #[arg(long, default_value_t = 24)]
        blocks: usize,
        /// Fraction of global layers replaced by register attention.
        #[arg(long, default_value_t = 0.25)]
        ratio: f64,
        #[arg(long, default_value_t = 64)]
        hidden: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 16)]
        registers: usize,
        #[arg(long, default_value_t = 4)]
        mlp_ratio: usize,
        #[arg(long, default_value_t = 16)]
        patch_size: usize,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        /// Also write `flops.json` and `flops.txt` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the model on a bundle and write its predictions as a bundle.
    DemoForward {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory; otherwise a fresh model is initialized.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Model config JSON for a fresh model; image size defaults to the data's.
        #[arg(long, conflicts_with = "checkpoint")]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a small set of bundles, supervised or by self-distillation.
    TrainToy {
        /// Training config JSON; missing fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// A bundle or a directory of bundles.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Self-distillation phase with an EMA teacher; heads stay frozen.
        #[arg(long)]
        ssl: bool,
        /// Start from this checkpoint instead of a fresh model.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pose AUC, depth and point metrics of predictions against ground truth.
    Eval {
        /// A predicted bundle or a directory of them.
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth bundles, matched to predictions by directory name.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value_t = AlignArg::MedianScale)]
        alignment: AlignArg,
        /// Comma-separated AUC thresholds in degrees.
        #[arg(long, value_delimiter = ',', default_values_t = [3.0, 5.0, 15.0, 30.0])]
        taus: Vec<f64>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        /// Also write `metrics.json` and `metrics.txt` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score sequences with the quality features and the heuristic gate.
    Filter {
        /// A bundle or a directory of bundles.
        #[arg(long)]
        data: PathBuf,
        /// Gate thresholds JSON; missing fields take their defaults.
        #[arg(long)]
        thresholds: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlignArg {
    None,
    MedianScale,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version.
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report_error("usage", &e.render().to_string());
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| c.downcast_ref::<mvrecon::Error>())
                .map_or("error", |m| m.kind());
            let mut message = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                // Library errors already embed their source in their message.
                if !message.contains(&cause) {
                    if !message.is_empty() {
                        message += ": ";
                    }
                    message += &cause;
                }
            }
            report_error(kind, &message);
            ExitCode::FAILURE
        }
    }
}

fn report_error(kind: &str, message: &str) {
    #[derive(Serialize)]
    struct ErrorReport<'a> {
        error: &'a str,
        message: &'a str,
    }
    let line = serde_json::to_string(&ErrorReport {
        error: kind,
        message: message.trim_end(),
    })
    .expect("plain strings serialize");
    eprintln!("{line}");
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::MakeSynthetic {
            kind,
            seed,
            out,
            frames,
            width,
            height,
            focal,
        } => {
            let spec = SyntheticSpec {
                kind,
                frames: frames.unwrap_or(kind.default_frames()),
                width,
                height,
                focal,
            };
            let bundle: Bundle64 = make_synthetic(&spec, seed)?;
            save_bundle(&bundle, &out).with_context(|| format!("writing {}", out.display()))?;
            #[derive(Serialize)]
            struct Summary {
                spec: SyntheticSpec,
                seed: u64,
                valid_depth_pixels: usize,
            }
            let valid = bundle.depths.iter().map(|d| d.valid_count()).sum();
            print_json(&Summary {
                spec,
                seed,
                valid_depth_pixels: valid,
            })
        }
        Command::Flops {
            frames,
            tokens,
            blocks,
            ratio,
            hidden,
            heads,
            registers,
            mlp_ratio,
            patch_size,
            format,
            out,
        } => {
            if !(0.0..=1.0).contains(&ratio) {
                bail!("--ratio must lie in [0, 1], got {ratio}");
            }
            let q = FlopsQuery {
                frames,
                image_tokens: tokens,
                blocks,
                hidden,
                heads,
                registers,
                ratio,
                mlp_ratio,
                patch_size,
            };
            let report = flops_report(&q);
            let json = to_json(&report)?;
            let table = flops_table(&report);
            if let Some(dir) = out {
                ensure_dir(&dir)?;
                write_file(&dir.join("flops.json"), &json)?;
                write_file(&dir.join("flops.txt"), &table)?;
            }
            match format {
                Format::Json => emit(&json),
                Format::Table => emit(&table),
            }
        }
        Command::DemoForward {
            data,
            checkpoint,
            config,
            seed,
            out,
        } => {
            let bundle: Bundle64 =
                load_bundle(&data).with_context(|| format!("reading {}", data.display()))?;
            let model: Model64 = match (checkpoint, config) {
                (Some(dir), _) => load_checkpoint(&dir)
                    .with_context(|| format!("loading checkpoint {}", dir.display()))?,
                (None, cfg) => {
                    let config = match cfg {
                        Some(path) => read_json::<ModelConfig>(&path)?,
                        None => ModelConfig {
                            width: bundle.width(),
                            height: bundle.height(),
                            ..ModelConfig::default()
                        },
                    };
                    Model64::init(config, seed)?
                }
            };
            let pred = model.predict(&bundle.images)?.to_bundle(&bundle.images);
            save_bundle(&pred, &out).with_context(|| format!("writing {}", out.display()))?;
            #[derive(Serialize)]
            struct Summary {
                frames: usize,
                width: usize,
                height: usize,
                mean_depth: f64,
                mean_confidence: f64,
            }
            let mean = |v: &[Vec<f64>]| {
                v.iter().flatten().sum::<f64>() / v.iter().map(Vec::len).sum::<usize>() as f64
            };
            let depths: Vec<Vec<f64>> = pred.depths.iter().map(|d| d.values.clone()).collect();
            let conf = pred.confidence.clone().unwrap_or_default();
            print_json(&Summary {
                frames: pred.num_frames(),
                width: pred.width(),
                height: pred.height(),
                mean_depth: mean(&depths),
                mean_confidence: if conf.is_empty() { 0.0 } else { mean(&conf) },
            })
        }
        Command::TrainToy {
            config,
            data,
            steps,
            seed,
            ssl,
            init,
            out,
        } => train(config, &data, steps, seed, ssl, init, &out),
        Command::Eval {
            pred,
            gt,
            alignment,
            taus,
            format,
            out,
        } => {
            let alignment = match alignment {
                AlignArg::None => Alignment::None,
                AlignArg::MedianScale => Alignment::MedianScale,
            };
            let cfg = EvalConfig { taus, alignment };
            let pairs = match_bundles(&pred, &gt)?;
            let mut sequences = Vec::new();
            for (name, p, g) in pairs {
                let pb: Bundle64 =
                    load_bundle(&p).with_context(|| format!("reading {}", p.display()))?;
                let gb: Bundle64 =
                    load_bundle(&g).with_context(|| format!("reading {}", g.display()))?;
                let metrics =
                    evaluate(&pb, &gb, &cfg).with_context(|| format!("evaluating {name}"))?;
                sequences.push(EvalRow { name, metrics });
            }
            let rows: Vec<SequenceMetrics> = sequences.iter().map(|r| r.metrics.clone()).collect();
            let report = EvalReport {
                aggregate: aggregate(&rows),
                sequences,
            };
            let json = to_json(&report)?;
            let table = eval_table(&report);
            if let Some(dir) = out {
                ensure_dir(&dir)?;
                write_file(&dir.join("metrics.json"), &json)?;
                write_file(&dir.join("metrics.txt"), &table)?;
            }
            match format {
                Format::Json => emit(&json),
                Format::Table => emit(&table),
            }
        }
        Command::Filter {
            data,
            thresholds,
            out,
        } => filter(&data, thresholds, &out),
    }
}

fn train(
    config: Option<PathBuf>,
    data: &Path,
    steps: Option<usize>,
    seed: Option<u64>,
    ssl: bool,
    init: Option<PathBuf>,
    out: &Path,
) -> Result<()> {
    let paths = list_bundles(data)?;
    if paths.is_empty() {
        bail!("no bundles under {}", data.display());
    }
    let dataset = paths
        .iter()
        .map(|p| load_bundle::<f64>(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let mut cfg = match &config {
        Some(path) => read_json::<TrainConfig>(path)?,
        None => {
            let (w, h) = (dataset[0].width(), dataset[0].height());
            TrainConfig {
                model: ModelConfig {
                    width: w,
                    height: h,
                    ..ModelConfig::default()
                },
                ..TrainConfig::default()
            }
        }
    };
    if let Some(s) = steps {
        cfg.steps = s;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if ssl && cfg.ssl.is_none() {
        cfg.ssl = Some(DistillConfig::default());
    }
    if !ssl {
        cfg.ssl = None;
    }
    let model = match &init {
        Some(dir) => {
            let m: Model64 = load_checkpoint(dir)
                .with_context(|| format!("loading checkpoint {}", dir.display()))?;
            if config.is_some() && m.config != cfg.model {
                bail!("checkpoint model config differs from the training config");
            }
            cfg.model = m.config.clone();
            m
        }
        None => Model64::init(cfg.model.clone(), cfg.seed)?,
    };

    // Point error on the first labeled bundle, before and after.
    let probe = dataset
        .iter()
        .find(|b| b.is_labeled())
        .map(normalize_scene)
        .transpose()?;
    let before = probe
        .as_ref()
        .map(|b| evaluate_point_error(&model, b))
        .transpose()?;

    ensure_dir(out)?;
    let log_path = out.join("log.jsonl");
    let mut log = std::io::BufWriter::new(
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    let mut write_err = None;
    let outcome = train_toy(model, &dataset, &cfg, |line| {
        if write_err.is_none() {
            let r = serde_json::to_string(line)
                .map_err(anyhow::Error::from)
                .and_then(|s| Ok(writeln!(log, "{s}")?));
            write_err = r.err();
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.context(format!("writing {}", log_path.display())));
    }
    log.flush()?;
    save_checkpoint(&outcome.model, &out.join("checkpoint"))?;
    write_file(&out.join("config.json"), &to_json(&cfg)?)?;
    let after = probe
        .as_ref()
        .map(|b| evaluate_point_error(&outcome.model, b))
        .transpose()?;

    #[derive(Serialize)]
    struct Summary {
        steps_run: usize,
        phase: &'static str,
        final_loss: Option<f64>,
        point_error_before: Option<f64>,
        point_error_after: Option<f64>,
        diverged: Option<mvrecon::engine::Divergence>,
    }
    let final_loss = outcome.log.last().map(|l| {
        l.loss
            .as_ref()
            .map(|b| b.total)
            .or(l.distill.as_ref().map(|d| d.total))
            .unwrap_or(f64::NAN)
    });
    let summary = Summary {
        steps_run: outcome.log.len(),
        phase: if cfg.ssl.is_some() {
            "distill"
        } else {
            "supervised"
        },
        final_loss,
        point_error_before: before,
        point_error_after: after,
        diverged: outcome.diverged.clone(),
    };
    let json = to_json(&summary)?;
    write_file(&out.join("summary.json"), &json)?;
    emit(&json)?;
    if let Some(d) = outcome.diverged {
        return Err(mvrecon::Error::Diverged {
            step: d.step,
            reason: d.reason,
        })
        .context("last good parameters were saved");
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    name: String,
    metrics: SequenceMetrics,
}

#[derive(Serialize)]
struct EvalReport {
    sequences: Vec<EvalRow>,
    aggregate: Option<SequenceMetrics>,
}

fn bundle_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "bundle".into())
}

/// Prediction/ground-truth pairs: a single bundle on each side pairs up
/// directly, otherwise bundles are matched by directory name.
fn match_bundles(pred: &Path, gt: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let (p, g) = (list_bundles(pred)?, list_bundles(gt)?);
    if p.is_empty() || g.is_empty() {
        bail!(
            "no bundles found under {} or {}",
            pred.display(),
            gt.display()
        );
    }
    if p.len() == 1 && g.len() == 1 {
        return Ok(vec![(bundle_name(&g[0]), p[0].clone(), g[0].clone())]);
    }
    let mut out = Vec::new();
    for gp in &g {
        let name = bundle_name(gp);
        let pp = p
            .iter()
            .find(|x| bundle_name(x) == name)
            .ok_or_else(|| anyhow!("no prediction for sequence `{name}`"))?;
        out.push((name, pp.clone(), gp.clone()));
    }
    Ok(out)
}

fn eval_table(report: &EvalReport) -> String {
    let taus: Vec<f64> = report
        .sequences
        .first()
        .map(|r| r.metrics.auc.iter().map(|a| a.tau).collect())
        .unwrap_or_default();
    let mut s = format!("{:<24}", "sequence");
    for t in &taus {
        s += &format!(" {:>9}", format!("AUC@{t}"));
    }
    s += &format!(" {:>9} {:>9} {:>9}\n", "AbsRel", "d<1.25%", "PointErr");
    let mut row = |name: &str, m: &SequenceMetrics| {
        s += &format!("{name:<24}");
        for a in &m.auc {
            s += &format!(" {:>9.3}", a.auc);
        }
        s += &format!(
            " {:>9.4} {:>9.3} {:>9.4}\n",
            m.abs_rel, m.delta_125, m.point_error
        );
    };
    for r in &report.sequences {
        row(&r.name, &r.metrics);
    }
    if let Some(a) = &report.aggregate {
        row("mean", a);
    }
    s
}

fn flops_table(r: &FlopsReport) -> String {
    let q = &r.query;
    let mut s = format!(
        "frames {} | image tokens/frame {} | blocks {} | hidden {} | registers {} | ratio {}\n",
        q.frames, q.image_tokens, q.blocks, q.hidden, q.registers, q.ratio
    );
    s += &format!(
        "{:<10} {:>6} {:>12} {:>18} {:>18}\n",
        "layer", "count", "tokens", "flops/layer", "act bytes/layer"
    );
    for l in &r.layers {
        s += &format!(
            "{:<10} {:>6} {:>12} {:>18} {:>18}\n",
            l.kind.name(),
            l.count,
            l.tokens,
            l.flops,
            l.activation_bytes
        );
    }
    s += &format!("patch embed flops {}\n", r.patch_embed_flops);
    s += &format!(
        "total flops {} | baseline {} | saving {:.2}%\n",
        r.total_flops,
        r.baseline_flops,
        100.0 * r.saving
    );
    s += &format!(
        "activation bytes {} | baseline {}\n",
        r.activation_bytes, r.baseline_activation_bytes
    );
    s += &format!("register layers {:?}\n", r.register_layers);
    s
}

#[derive(Serialize)]
struct SequenceReport {
    name: String,
    features: Option<QualityFeatures>,
    verdict: GateVerdict,
}

fn filter(data: &Path, thresholds: Option<PathBuf>, out: &Path) -> Result<()> {
    let t = match thresholds {
        Some(p) => read_json::<GateThresholds>(&p)?,
        None => GateThresholds::default(),
    };
    let paths = list_bundles(data)?;
    if paths.is_empty() {
        bail!("no bundles under {}", data.display());
    }
    ensure_dir(out)?;
    let qcfg = QualityConfig::default();
    let mut reports = Vec::new();
    for p in &paths {
        let name = bundle_name(p);
        let bundle: Bundle64 =
            load_bundle(p).with_context(|| format!("reading {}", p.display()))?;
        let report = match extract_features(&bundle, &qcfg) {
            Ok(f) => SequenceReport {
                name,
                verdict: heuristic_gate(&f, &t),
                features: Some(f),
            },
            Err(e) => SequenceReport {
                name,
                features: None,
                verdict: GateVerdict {
                    accept: false,
                    reasons: vec![format!("features unavailable: {e}")],
                },
            },
        };
        write_file(
            &out.join(format!("{}.json", report.name)),
            &to_json(&report)?,
        )?;
        reports.push(report);
    }

    let csv_path = out.join("summary.csv");
    let mut w = csv::Writer::from_path(&csv_path)
        .with_context(|| format!("creating {}", csv_path.display()))?;
    let feature_names = [
        "s_trans",
        "s_rot",
        "median_max_parallax",
        "linearity",
        "planarity",
        "scattering",
        "completeness",
        "noise_fraction",
        "registration_ratio",
        "fov_x",
        "fov_y",
        "distortion_ratio",
        "valid_depth_fraction",
    ];
    let mut header = vec!["sequence", "accept"];
    header.extend(feature_names);
    header.push("reasons");
    w.write_record(&header)?;
    for r in &reports {
        let mut rec = vec![r.name.clone(), r.verdict.accept.to_string()];
        match &r.features {
            Some(f) => {
                let v = serde_json::to_value(f)?;
                rec.extend(feature_names.iter().map(|k| v[k].to_string()));
            }
            None => rec.extend(feature_names.iter().map(|_| String::new())),
        }
        rec.push(r.verdict.reasons.join("; "));
        w.write_record(&rec)?;
    }
    w.flush()?;

    #[derive(Serialize)]
    struct Verdicts<'a> {
        name: &'a str,
        accept: bool,
        reasons: &'a [String],
    }
    #[derive(Serialize)]
    struct Summary<'a> {
        total: usize,
        accepted: usize,
        sequences: Vec<Verdicts<'a>>,
    }
    print_json(&Summary {
        total: reports.len(),
        accepted: reports.iter().filter(|r| r.verdict.accept).count(),
        sequences: reports
            .iter()
            .map(|r| Verdicts {
                name: &r.name,
                accept: r.verdict.accept,
                reasons: &r.verdict.reasons,
            })
            .collect(),
    })
}

fn to_json<S: Serialize>(value: &S) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}

fn print_json<S: Serialize>(value: &S) -> Result<()> {
    emit(&to_json(value)?)
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    let r = if text.ends_with('\n') {
        out.write_all(text.as_bytes())
    } else {
        writeln!(out, "{text}")
    };
    match r.and_then(|_| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut text = contents.to_string();
    if !text.ends_with('\n') {
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
