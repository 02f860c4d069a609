//! Command line entry points.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pneunet_core::loss::{FocalLossParams, LossKind};
use pneunet_core::metrics::EvalReport;
use pneunet_core::model::ModelGraph;
use pneunet_core::pretrain::{pretrain, transfer};
use pneunet_core::synth::blob_samples;
use pneunet_core::train::{evaluate, split_indices, train, EpochRecord, TrainObserver};

use crate::checkpoint::{self, Metadata};
use crate::config::RunConfig;
use crate::dataset::{self, encode_pgm, scan_dataset, DiskSource, CLASSES};
use crate::error::{Error, Result};
use crate::infer::Predictor;
use crate::{plot, report, service};

#[derive(Debug, Parser)]
#[command(
    name = "pneunet",
    version,
    about = "Pneumonia classification from chest X-rays with Grad-CAM"
)]
pub struct Cli {
    /// Directory all artifacts are written to.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a backbone on the synthetic shapes task; writes backbone.pneu.
    Pretrain {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train the classifier on a dataset directory; writes model.pneu and history.csv.
    Train(TrainArgs),
    /// Score a split; writes report.json and roc.csv.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Classify one image; prints the JSON the service would return.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        threshold: Option<f32>,
        #[arg(long)]
        always_cam: bool,
    },
    /// Grad-CAM overlay for one image; writes overlay.png and heatmap.csv.
    Cam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Render history.csv and roc.csv as SVG charts.
    Plot {
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        roc: Option<PathBuf>,
    },
    /// Configuration helpers.
    Config {
        #[arg(long)]
        print_default: bool,
    },
    /// Write the synthetic blob dataset in the on-disk dataset layout.
    Synth {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value_t = 500)]
        train: usize,
        #[arg(long, default_value_t = 100)]
        test: usize,
        #[arg(long, default_value_t = 50)]
        val: usize,
        #[arg(long)]
        positive_fraction: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LossArg {
    Focal,
    Bce,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Backbone checkpoint from `pretrain`; it is loaded and frozen. Without
    /// it the whole network is trained from scratch.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    #[arg(long)]
    pub no_augment: bool,
    /// Validate on the dataset's val split instead of a share of train.
    #[arg(long)]
    pub val_split: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "PNEUNET_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    #[arg(long)]
    pub threshold: Option<f32>,
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

struct Progress {
    start: Instant,
    save: Option<(PathBuf, u64)>,
}

impl TrainObserver for Progress {
    fn elapsed_seconds(&mut self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn on_epoch_end(
        &mut self,
        r: &EpochRecord,
        model: &ModelGraph,
        improved: bool,
    ) -> pneunet_core::Result<()> {
        eprintln!(
            "epoch {:>3}  loss {:.4}  acc {:.4}  val_loss {:.4}  val_acc {:.4}{}",
            r.epoch,
            r.train_loss,
            r.train_acc,
            r.val_loss,
            r.val_acc,
            if improved { "  *" } else { "" }
        );
        if let (true, Some((path, seed))) = (improved, &self.save) {
            let meta = Metadata::now(r.epoch as u64, Some(r.val_loss), *seed);
            checkpoint::save(path, model, &meta)
                .map_err(|e| pneunet_core::Error::Source(e.to_string()))?;
        }
        Ok(())
    }
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

/// Printed to stdout by the commands that consume the run configuration.
/// `predict` does not, so its stdout stays a single JSON document.
fn echo(cfg: &RunConfig) {
    println!("{}", cfg.to_json());
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::NotFound(path.to_path_buf()))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let out = cli.out_dir.clone();
    match &cli.command {
        Command::Config { print_default } => {
            if !print_default {
                return Err(Error::Invalid("nothing to do; try --print-default".into()));
            }
            println!("{}", RunConfig::default().to_json());
            Ok(())
        }
        Command::Pretrain { epochs, samples } => {
            let mut cfg = effective_config(&cli)?;
            if let Some(e) = epochs {
                cfg.pretrain.train.max_epochs = *e;
            }
            if let Some(n) = samples {
                cfg.pretrain.samples = *n;
            }
            cfg.validate()?;
            echo(&cfg);
            let pc = cfg.pretrain_config();
            let mut progress = Progress {
                start: Instant::now(),
                save: None,
            };
            let outcome = pretrain(&pc, &mut progress)?;
            eprintln!(
                "pretraining accuracy on held-out shapes: {:.4}",
                outcome.test_accuracy
            );
            let meta = Metadata::now(
                outcome.fit.best_epoch as u64,
                Some(outcome.fit.best_val_loss),
                pc.train.seed,
            );
            checkpoint::save(&out.join("backbone.pneu"), &outcome.backbone, &meta)?;
            report::write_history(
                &out.join("pretrain_history.csv"),
                &outcome.fit.history.records,
            )?;
            Ok(())
        }
        Command::Train(args) => run_train(&cli, args),
        Command::Evaluate {
            data,
            checkpoint: ck,
            split,
        } => {
            require(data)?;
            let ck = checkpoint::load(ck)?;
            let index = scan_dataset(data)?;
            let source = DiskSource::new(index.split(split)?);
            let cfg = effective_config(&cli)?;
            echo(&cfg);
            let eval = evaluate(&ck.model, &source, cfg.train.batch_size, &cfg.train.loss)?;
            let (rep, curve) =
                EvalReport::compute(&eval.scores(), &eval.labels, ck.model.threshold() as f64)?;
            let predictions = source
                .entries
                .iter()
                .zip(&eval.outputs)
                .map(|(e, row)| report::SamplePrediction {
                    path: e
                        .path
                        .strip_prefix(data)
                        .unwrap_or(&e.path)
                        .display()
                        .to_string(),
                    label: e.label,
                    probability: row[0],
                })
                .collect();
            report::write_report(
                &out.join("report.json"),
                &report::ReportFile {
                    metrics: rep.clone(),
                    predictions,
                },
            )?;
            match curve {
                Some(c) => report::write_roc(&out.join("roc.csv"), &c)?,
                None => eprintln!("single-class split: ROC curve skipped"),
            }
            eprintln!(
                "n {}  accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}  auc {:.4}",
                rep.n, rep.accuracy, rep.precision, rep.recall, rep.f1, rep.auc
            );
            Ok(())
        }
        Command::Predict {
            checkpoint: ck,
            image,
            threshold,
            always_cam,
        } => {
            let predictor = Predictor::load(ck, None)?;
            let img = dataset::read_image(image)?;
            let result = predictor.predict_image(&img, *threshold, *always_cam)?;
            println!("{}", serde_json::to_string(&result)?);
            Ok(())
        }
        Command::Cam {
            checkpoint: ck,
            image,
        } => {
            let predictor = Predictor::load(ck, None)?;
            let img = dataset::read_image(image)?;
            let prepared = predictor.prepare(&img)?;
            let hm = predictor.heatmap(&prepared)?;
            write_file(
                &out.join("overlay.png"),
                &predictor.overlay_png(&prepared, &hm)?,
            )?;
            let mut csv = String::new();
            for row in hm.grid.chunks(hm.grid_w) {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
                csv.push_str(&cells.join(","));
                csv.push('\n');
            }
            write_file(&out.join("heatmap.csv"), csv.as_bytes())?;
            Ok(())
        }
        Command::Serve(args) => {
            let predictor = match &args.checkpoint {
                Some(p) => Some(std::sync::Arc::new(Predictor::load(p, args.threshold)?)),
                None => {
                    eprintln!("no checkpoint given: serving without a model");
                    None
                }
            };
            if let Some(dir) = &args.static_dir {
                require(dir)?;
            }
            let app = service::router(service::AppState { predictor }, args.static_dir.clone());
            let addr = std::net::SocketAddr::new(args.host, args.port);
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
            rt.block_on(service::serve(addr, app))
                .map_err(|e| Error::io(addr.to_string(), e))
        }
        Command::Plot { history, roc } => {
            let history = history.clone().unwrap_or_else(|| out.join("history.csv"));
            let roc = roc.clone().unwrap_or_else(|| out.join("roc.csv"));
            let mut wrote = false;
            if history.exists() {
                let rows = report::read_history(&history)?;
                let (loss, acc) = plot::history_charts(&rows);
                write_file(&out.join("loss.svg"), loss.as_bytes())?;
                write_file(&out.join("accuracy.svg"), acc.as_bytes())?;
                wrote = true;
            }
            if roc.exists() {
                let curve = report::read_roc(&roc)?;
                let pts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.fpr, p.tpr)).collect();
                let area = pneunet_core::metrics::auc(&curve);
                write_file(&out.join("roc.svg"), plot::roc_chart(&pts, area).as_bytes())?;
                wrote = true;
            }
            if !wrote {
                return Err(Error::NotFound(history));
            }
            Ok(())
        }
        Command::Synth {
            root,
            train,
            test,
            val,
            positive_fraction,
        } => {
            let mut cfg = effective_config(&cli)?;
            if let Some(f) = positive_fraction {
                cfg.synth.positive_fraction = *f;
            }
            cfg.synth.validate()?;
            echo(&cfg);
            let seed = cfg.train.seed;
            let mut quadrants = serde_json::Map::new();
            for (split, n, tag) in [("train", *train, 0), ("test", *test, 1), ("val", *val, 2)] {
                for class in CLASSES {
                    let dir = root.join(split).join(class);
                    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                }
                for (i, s) in blob_samples(n, &cfg.synth, seed, tag)?.iter().enumerate() {
                    let rel = format!("{split}/{}/{i:05}.pgm", CLASSES[s.label as usize]);
                    write_file(&root.join(&rel), &encode_pgm(&s.image)?)?;
                    if let Some(q) = s.quadrant {
                        quadrants.insert(rel, serde_json::to_value(q)?);
                    }
                }
            }
            write_file(
                &root.join("quadrants.json"),
                serde_json::to_string_pretty(&quadrants)?.as_bytes(),
            )?;
            Ok(())
        }
    }
}

fn run_train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let out = &cli.out_dir;
    require(&args.data)?;
    let mut cfg = effective_config(cli)?;
    if let Some(e) = args.epochs {
        cfg.train.max_epochs = e;
    }
    match args.loss {
        Some(LossArg::Bce) => cfg.train.loss = LossKind::Bce,
        Some(LossArg::Focal) if !matches!(cfg.train.loss, LossKind::Focal(_)) => {
            cfg.train.loss = LossKind::Focal(FocalLossParams::default())
        }
        _ => {}
    }
    if args.no_augment {
        cfg.train.augmentation = None;
    }
    cfg.validate()?;
    echo(&cfg);
    let index = scan_dataset(&args.data)?;
    let all = DiskSource::new(index.split("train")?);
    let (train_src, val_src) = if args.val_split {
        (all, DiskSource::new(index.split("val")?))
    } else {
        let (tr, va) = split_indices(
            all.entries.len(),
            cfg.train.validation_fraction,
            cfg.train.seed,
        );
        (all.select(&tr), all.select(&va))
    };
    let mut model = match &args.backbone {
        Some(path) => {
            let backbone = checkpoint::load(path)?.model;
            if backbone.config().input_shape != cfg.model.input_shape
                || backbone.config().backbone_preset != cfg.model.backbone_preset
                || backbone.config().batchnorm != cfg.model.batchnorm
            {
                return Err(Error::Invalid(
                    "backbone checkpoint was built for a different model config".into(),
                ));
            }
            transfer(&cfg.model, &backbone, cfg.train.seed)?
        }
        None => ModelGraph::build(&cfg.model, cfg.train.seed)?,
    };
    let ck_path = out.join("model.pneu");
    let mut progress = Progress {
        start: Instant::now(),
        save: Some((ck_path.clone(), cfg.train.seed)),
    };
    let outcome = train(&mut model, &train_src, &val_src, cfg.train, &mut progress)?;
    let meta = Metadata::now(
        outcome.best_epoch as u64,
        Some(outcome.best_val_loss),
        cfg.train.seed,
    );
    checkpoint::save(&ck_path, &model, &meta)?;
    report::write_history(&out.join("history.csv"), &outcome.history.records)?;
    eprintln!(
        "best epoch {} (val loss {:.6}){}",
        outcome.best_epoch,
        outcome.best_val_loss,
        if outcome.stopped_early {
            ", stopped early"
        } else {
            ""
        }
    );
    Ok(())
}
