use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use certilabel::data_io::{self, Dataset};
use certilabel::losses::run_grad_check;
use certilabel::metrics::{coco_thresholds, pseudo_label_quality, QualityCurve};
use certilabel::pipeline::select_pseudo_labels;
use certilabel::{
    BceVariant, ClassBalanceState, EvalReport, ExperimentConfig, ExperimentReport, PseudoLabel, PseudoLabelSet,
};

const USAGE: u8 = 1;
const DATA: u8 = 2;
const INTERNAL: u8 = 3;

#[derive(Parser)]
#[command(name = "certilabel", version, about = "Certainty-aware pseudo-labeling toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; missing fields take defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// KEY=VALUE with a dotted or unique leaf key; repeatable, applied in order.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores); results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulated experiment and write its reports.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Number of scenes (overrides the config).
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Turn decoded detections (score = p, loc_quality = v) into pseudo labels.
    PseudoLabel {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        dataset: PathBuf,
        #[arg(long, value_name = "PATH")]
        detections: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Detections come from horizontally flipped images; map labels back.
        #[arg(long)]
        flipped: bool,
    },
    /// Score detections against dataset annotations.
    Evaluate {
        #[arg(long, value_name = "PATH")]
        dataset: PathBuf,
        #[arg(long, value_name = "PATH")]
        detections: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Compare analytic loss gradients with central differences.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [2usize, 8, 30])]
        k: Vec<usize>,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        /// Also check the positive-only BCE form.
        #[arg(long)]
        positive_only: bool,
    },
    /// Render a report.json into report.csv and quality_curve.csv.
    Report {
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

/// Error tagged with its exit status.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        let code = match error.chain().find_map(|c| c.downcast_ref::<certilabel::Error>()) {
            Some(certilabel::Error::Config(_) | certilabel::Error::InvalidParam { .. }) => USAGE,
            Some(_) => DATA,
            None => INTERNAL,
        };
        Failure { code, error }
    }
}

type Outcome = Result<(), Failure>;

fn load_config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let base = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

fn simulate(common: &Common, out: &Path, scenes: Option<usize>) -> Outcome {
    let mut cfg = load_config(common)?;
    if let Some(n) = scenes {
        cfg.scenes = n;
    }
    cfg.output.dir = Some(out.to_path_buf());
    let outcome = certilabel::run_experiment(&cfg)?;
    data_io::write_json(&cfg, out.join("config.json"))?;
    for v in &outcome.report.variants {
        println!(
            "{:<20} labels {:>7}  precision@0.5 {:.4}  precision@0.85 {:.4}  rare recall {}  AP {:.4}",
            v.variant.name(),
            v.pseudo_labels,
            v.precision_50,
            v.precision_85,
            v.rare_recall_50.map_or("n/a".into(), |r| format!("{r:.4}")),
            v.eval.ap_coco
        );
    }
    info!("wrote {}", out.display());
    Ok(())
}

/// Clip labels to the image, dropping any left empty, then undo the flip.
fn unflip(mut set: PseudoLabelSet, width: f64, height: f64) -> anyhow::Result<PseudoLabelSet> {
    set.labels.retain_mut(|l| match l.bbox.clip(width, height) {
        Ok(b) => {
            l.bbox = b;
            true
        }
        Err(_) => false,
    });
    Ok(set.hflip(width)?)
}

fn pseudo_label(common: &Common, dataset: &Path, detections: &Path, out: &Path, flipped: bool) -> Outcome {
    let cfg = load_config(common)?;
    let dataset = data_io::load_dataset(dataset)?;
    let records = data_io::load_detections(detections)?;
    let by_image = data_io::detections_by_image(&records, &dataset)?;
    let mut state = ClassBalanceState::new(dataset.num_classes());
    for dets in by_image.values() {
        state.accumulate(dets)?;
    }
    let params = cfg.pipeline;
    let tau = state.thresholds(&params.balance);
    let alpha = state.weights(&params.balance);
    let mut sets = Vec::with_capacity(dataset.images().len());
    for image in dataset.images() {
        let dets = by_image.get(&image.id).map_or(&[][..], Vec::as_slice);
        let set = select_pseudo_labels(image.id, dets, &tau, &alpha, &params)?;
        sets.push(if flipped { unflip(set, image.width, image.height)? } else { set });
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let ids: Vec<u64> = dataset.categories().iter().map(|c| c.id).collect();
    data_io::write_detections(&sets, &ids, out.join("pseudo_labels.json"))?;
    data_io::write_json(&state.snapshot(&params.balance), out.join("balance.json"))?;
    let n: usize = sets.iter().map(|s| s.labels.len()).sum();
    println!("{n} pseudo labels from {} detections over {} images", records.len(), sets.len());
    Ok(())
}

fn evaluate(dataset: &Path, detections: &Path, out: &Path) -> Outcome {
    let dataset: Dataset = data_io::load_dataset(dataset)?;
    let records = data_io::load_detections(detections)?;
    let preds = data_io::eval_detections(&records, &dataset)?;
    let by_image = data_io::detections_by_image(&records, &dataset)?;
    let sets: Vec<PseudoLabelSet> = dataset
        .images()
        .iter()
        .map(|img| PseudoLabelSet {
            image_id: img.id,
            labels: by_image
                .get(&img.id)
                .map(|ds| ds.iter().map(PseudoLabel::from_detection).collect())
                .unwrap_or_default(),
            alpha: Vec::new(),
            tau_used: Vec::new(),
        })
        .collect();
    let quality = pseudo_label_quality(&sets, &dataset.heldout(), &coco_thresholds())?;
    let report = EvalReport::from_detections(&preds, &dataset.ground_truths()).with_quality(quality);
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    data_io::write_json(&report, out.join("report.json"))?;
    data_io::write_csv_rows(&report.rows(), out.join("report.csv"))?;
    println!("AP {:.4}  AP50 {:.4}  AP75 {:.4}", report.ap_coco, report.ap50, report.ap75);
    Ok(())
}

fn grad_check(seed: u64, instances: usize, ks: &[usize], step: f64, tolerance: f64, positive_only: bool) -> Outcome {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Failure {
            code: USAGE,
            error: anyhow!("--k needs positive interval counts"),
        });
    }
    let mut variants = vec![BceVariant::Full];
    if positive_only {
        variants.push(BceVariant::PositiveOnly);
    }
    let mut worst = 0.0f64;
    for variant in variants {
        let r = run_grad_check(seed, instances, ks, variant, step)?;
        println!(
            "{variant:?}: {} instances, {} partials, max relative error {:.3e}, max absolute error {:.3e}",
            r.instances, r.entries, r.max_rel_error, r.max_abs_error
        );
        worst = worst.max(r.max_rel_error);
    }
    println!("max relative error {worst:.3e}");
    if worst < tolerance {
        Ok(())
    } else {
        Err(Failure {
            code: INTERNAL,
            error: anyhow!("max relative error {worst:.3e} exceeds {tolerance:e}"),
        })
    }
}

type CurveRow = (String, f64, f64, f64);

fn curve_rows(series: &str, q: &QualityCurve, rows: &mut Vec<CurveRow>) {
    for p in &q.points {
        rows.push((series.into(), p.iou_threshold, p.precision, p.recall));
    }
}

fn write_curve(rows: &[CurveRow], path: &Path) -> anyhow::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["series", "iou_threshold", "precision", "recall"])?;
    for (series, thr, precision, recall) in rows {
        w.write_record([series.clone(), format!("{thr:.2}"), precision.to_string(), recall.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn report(input: &Path, out: &Path) -> Outcome {
    let text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", input.display()))?;
    let (rows, curves) = if let Ok(r) = serde_json::from_value::<ExperimentReport>(value.clone()) {
        let mut curves = Vec::new();
        for v in &r.variants {
            if let Some(q) = &v.eval.quality {
                curve_rows(v.variant.name(), q, &mut curves);
            }
        }
        (r.rows(), curves)
    } else if let Ok(r) = serde_json::from_value::<EvalReport>(value) {
        let mut curves = Vec::new();
        if let Some(q) = &r.quality {
            curve_rows("detections", q, &mut curves);
        }
        (r.rows(), curves)
    } else {
        return Err(Failure {
            code: DATA,
            error: anyhow!("{}: not an experiment or evaluation report", input.display()),
        });
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    data_io::write_csv_rows(&rows, out.join("report.csv"))?;
    write_curve(&curves, &out.join("quality_curve.csv"))?;
    println!("{} report rows, {} curve points", rows.len(), curves.len());
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Simulate { common, out, scenes } => simulate(&common, &out, scenes),
        Command::PseudoLabel {
            common,
            dataset,
            detections,
            out,
            flipped,
        } => pseudo_label(&common, &dataset, &detections, &out, flipped),
        Command::Evaluate { dataset, detections, out } => evaluate(&dataset, &detections, &out),
        Command::GradCheck {
            seed,
            instances,
            k,
            step,
            tolerance,
            positive_only,
        } => grad_check(seed, instances, &k, step, tolerance, positive_only),
        Command::Report { input, out } => report(&input, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CERTILABEL_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
