use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use flarecast::attribution::{BaselineKind, BaselineSet};
use flarecast::catalog::{self, Catalog, Label, Timestamp};
use flarecast::evaluation::{self, SkillReport};
use flarecast::model::Model;
use flarecast::pipeline::dataset::{self, Dataset, PartitionCounts};
use flarecast::pipeline::explain::{self, ExplainMethod, ExplainOptions};
use flarecast::pipeline::fetch::{self, FetchSpec, FetchStatus, Fetcher};
use flarecast::pipeline::synth::{self, SynthSpec};
use flarecast::pipeline::{train, PipelineError, RunConfig};

type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Parser)]
#[command(name = "flarecast", version, about = "Full-disk flare forecasting and attribution pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in settings when no file is given: `paper` or `desk`.
    #[arg(long, default_value = "desk")]
    preset: String,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::preset(&self.preset)?,
        };
        cfg.apply_env();
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Download the magnetogram closest to each timestamp of a grid.
    Fetch {
        #[arg(long)]
        start: String,
        #[arg(long)]
        end: String,
        #[arg(long, default_value_t = 1)]
        cadence_hours: i64,
        #[arg(long)]
        cache_dir: PathBuf,
        /// Manifest to write (defaults to `<cache_dir>/manifest.csv`).
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 512)]
        size: usize,
        #[arg(long, default_value_t = 4.8)]
        image_scale: f64,
        #[arg(long, default_value = fetch::HELIOVIEWER_API)]
        base_url: String,
        /// Minimum milliseconds between requests.
        #[arg(long, default_value_t = 1000)]
        interval_ms: u64,
    },
    /// Label fetched images from a flare catalog.
    Label {
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a dataset manifest into training and validation manifests.
    Split {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 4)]
        validation_partition: u8,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train on all partitions except the validation one.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        image_dir: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Four-fold cross-validation over the tri-monthly partitions.
    Crossval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        image_dir: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Score a trained model on one partition.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        image_dir: Option<PathBuf>,
        /// Partition to score (defaults to the configured validation partition).
        #[arg(long)]
        fold: Option<u8>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Attribution map for one image.
    Explain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        weights: PathBuf,
        /// PNG or raster image.
        #[arg(long)]
        image: PathBuf,
        /// ggcam, ig, deepshap or occlusion.
        #[arg(long)]
        method: String,
        #[arg(long, default_value = "FL")]
        target: String,
        #[arg(long, default_value_t = 256)]
        steps: usize,
        /// Background images for deepshap (and the IG baseline); zero image if none.
        #[arg(long, num_args = 1..)]
        background: Vec<PathBuf>,
        #[arg(long, default_value_t = 8)]
        patch: usize,
        #[arg(long, default_value_t = 4)]
        stride: usize,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        stem: Option<String>,
    },
    /// Skill report from prediction records.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        records: Vec<PathBuf>,
        #[arg(long, default_value_t = evaluation::DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write a synthetic catalog, images and manifest.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "2014-01-01T00:00:00Z")]
        start: String,
        #[arg(long, default_value = "2014-12-31T23:00:00Z")]
        end: String,
        #[arg(long, default_value_t = 6)]
        cadence_hours: i64,
        #[arg(long, default_value_t = 120)]
        events: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn ts(s: &str) -> Result<Timestamp> {
    Ok(catalog::parse_timestamp(s)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(File::create(path)?, value)?;
    Ok(())
}

fn open_dataset(cfg: &RunConfig, dataset: Option<&PathBuf>, image_dir: Option<&PathBuf>) -> Result<Dataset> {
    let path = dataset.unwrap_or(&cfg.paths.dataset);
    let dir = image_dir.unwrap_or(&cfg.paths.image_dir);
    let mut ds = Dataset::on_disk(dataset::load_dataset(path)?, dir, cfg.input_size);
    let missing = ds.drop_missing();
    if !missing.is_empty() {
        log::warn!("{} images missing, e.g. {}", missing.len(), missing[0]);
        eprintln!("skipping {} samples with missing images", missing.len());
    }
    Ok(ds)
}

fn print_report(report: &SkillReport, table: &evaluation::SubgroupTable) {
    let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"));
    let c = report.confusion;
    println!("TP {} FP {} TN {} FN {}", c.tp, c.fp, c.tn, c.fn_);
    println!("TSS {}  HSS {}", fmt(report.tss), fmt(report.hss));
    print!("{}", table.render());
}

fn write_report(
    dir: &Path,
    records: &[evaluation::PredictionRecord],
    threshold: f64,
    config: Option<&RunConfig>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let report = SkillReport::from_records(records, threshold)?;
    let table = evaluation::subgroup_recall_table(records);
    let grid = evaluation::spatial_recall_grid(records)?;
    grid.write_csv(File::create(dir.join("grid.csv"))?)?;
    evaluation::write_records(File::create(dir.join("records.csv"))?, records)?;
    write_json(&dir.join("report.json"), &serde_json::json!({ "config": config, "report": report }))?;
    print_report(&report, &table);
    Ok(())
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Fetch { start, end, cadence_hours, cache_dir, manifest, size, image_scale, base_url, interval_ms } => {
            let grid = catalog::generate_timeline(ts(&start)?, ts(&end)?, chrono::Duration::hours(cadence_hours))?;
            let spec = FetchSpec {
                base_url,
                size,
                image_scale,
                min_interval: Duration::from_millis(interval_ms),
                ..FetchSpec::new(&cache_dir)
            };
            let mut fetcher = Fetcher::new(spec)?;
            let entries = fetcher.fetch_all(&grid);
            let out = manifest.unwrap_or_else(|| cache_dir.join("manifest.csv"));
            fetch::save_manifest(&out, &entries)?;
            let count = |s: FetchStatus| entries.iter().filter(|e| e.status == s).count();
            let missing = count(FetchStatus::Missing);
            println!(
                "requested {} fetched {} cached {} missing {} ({} requests)",
                entries.len(),
                count(FetchStatus::Fetched),
                count(FetchStatus::Cached),
                missing,
                fetcher.requests()
            );
            Ok(if !entries.is_empty() && missing == entries.len() { ExitCode::from(2) } else { ExitCode::SUCCESS })
        }
        Command::Label { catalog, manifest, out } => {
            let cat = Catalog::read_csv(BufReader::new(File::open(catalog)?))?;
            let entries = fetch::load_manifest(manifest)?;
            let samples = dataset::label_images(&cat, &entries);
            dataset::save_dataset(&out, &samples)?;
            println!("{}", PartitionCounts::of(&samples));
            Ok(ExitCode::SUCCESS)
        }
        Command::Split { dataset: path, validation_partition, out_dir } => {
            let samples = dataset::load_dataset(path)?;
            let (train_set, val_set) = dataset::split_fold(&samples, validation_partition);
            std::fs::create_dir_all(&out_dir)?;
            dataset::save_dataset(out_dir.join("train.csv"), &train_set)?;
            dataset::save_dataset(out_dir.join("val.csv"), &val_set)?;
            println!("{}", PartitionCounts::of(&samples));
            println!("train {} / validation {} (partition {validation_partition})", train_set.len(), val_set.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::Train { cfg, dataset, image_dir, out_dir } => {
            let cfg = cfg.load()?;
            let ds = open_dataset(&cfg, dataset.as_ref(), image_dir.as_ref())?;
            let (train_set, val_set) = ds.fold(cfg.validation_partition);
            let (model, history) = train::train(&cfg, &train_set, Some(&val_set))?;
            let out = out_dir.unwrap_or(cfg.paths.output_dir.clone());
            std::fs::create_dir_all(&out)?;
            model.save_weights(out.join("weights.bin"))?;
            write_json(&out.join("history.json"), &history)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            if let Some(last) = history.epochs.last() {
                println!("final loss {:.4} validation TSS {:?} HSS {:?}", last.loss, last.val_tss, last.val_hss);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Crossval { cfg, dataset, image_dir, out_dir } => {
            let cfg = cfg.load()?;
            let ds = open_dataset(&cfg, dataset.as_ref(), image_dir.as_ref())?;
            let cv = train::cross_validate(&cfg, &ds)?;
            let out = out_dir.unwrap_or(cfg.paths.output_dir.clone());
            std::fs::create_dir_all(&out)?;
            for f in &cv.folds {
                let dir = out.join(format!("fold{}", f.fold));
                std::fs::create_dir_all(&dir)?;
                evaluation::write_records(File::create(dir.join("records.csv"))?, &f.records)?;
                write_json(&dir.join("fold.json"), f)?;
                match (&f.report, &f.error) {
                    (Some(r), _) => println!("fold {}: TSS {:?} HSS {:?}", f.fold, r.tss, r.hss),
                    (None, Some(e)) => println!("fold {}: failed: {e}", f.fold),
                    _ => {}
                }
            }
            write_json(&out.join("summary.json"), &cv)?;
            println!("mean TSS {:?} mean HSS {:?}", cv.summary.mean_tss, cv.summary.mean_hss);
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate { cfg, weights, dataset, image_dir, fold, out_dir } => {
            let cfg = cfg.load()?;
            let model = Model::load_weights(cfg.architecture()?, weights)?;
            let ds = open_dataset(&cfg, dataset.as_ref(), image_dir.as_ref())?;
            let fold = fold.unwrap_or(cfg.validation_partition);
            let (_, val_set) = ds.fold(fold);
            let (records, _) = train::evaluate(&model, &val_set, cfg.threshold, fold, cfg.batch_size)?;
            write_report(&out_dir.unwrap_or(cfg.paths.output_dir.clone()), &records, cfg.threshold, Some(&cfg))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Explain { cfg, weights, image, method, target, steps, background, patch, stride, out_dir, stem } => {
            let cfg = cfg.load()?;
            let method: ExplainMethod = method.parse()?;
            let target: Label = target.parse()?;
            let model = Model::load_weights(cfg.architecture()?, weights)?;
            let img = dataset::load_image(&image, Some(cfg.input_size))?;
            let backgrounds = if background.is_empty() {
                None
            } else {
                let imgs = background
                    .iter()
                    .map(|p| dataset::load_image(p, Some(cfg.input_size)))
                    .collect::<Result<Vec<_>>>()?;
                Some(BaselineSet::new(imgs, BaselineKind::Provided)?)
            };
            let opts = ExplainOptions { steps, backgrounds, patch, stride, ..ExplainOptions::new(method, target) };
            let (values, log) = explain::explain(&model, &img, &opts)?;
            let stem = stem.unwrap_or_else(|| {
                let base = image.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
                format!(
                    "{base}_{}",
                    serde_json::to_value(method).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
                )
            });
            let files = explain::write_outputs(&out_dir, &stem, &img, &values, &log)?;
            println!("f(x) = {:.6}", log.f_input);
            for (i, c) in log.checks.iter().enumerate() {
                println!(
                    "reference {i}: delta {:.6e} residual {:.3e} tolerance {:.3e} {}",
                    c.delta,
                    c.residual,
                    c.tolerance,
                    if c.pass { "pass" } else { "FAIL" }
                );
            }
            println!("wrote {} {} {}", files.raster.display(), files.overlay.display(), files.log.display());
            Ok(if log.passed { ExitCode::SUCCESS } else { ExitCode::from(3) })
        }
        Command::Report { records, threshold, out_dir } => {
            let mut all = Vec::new();
            for p in &records {
                all.extend(evaluation::read_records(BufReader::new(File::open(p)?))?);
            }
            write_report(&out_dir, &all, threshold, None)?;
            let mut folds: Vec<u8> = all.iter().map(|r| r.fold).collect();
            folds.sort_unstable();
            folds.dedup();
            if folds.len() > 1 {
                let per_fold: Vec<_> = folds
                    .iter()
                    .map(|&f| {
                        let recs: Vec<_> = all.iter().filter(|r| r.fold == f).cloned().collect();
                        (f, evaluation::confusion(&recs))
                    })
                    .collect();
                let summary = evaluation::cross_validation_summary(&per_fold)?;
                write_json(&out_dir.join("crossval.json"), &summary)?;
                println!("mean TSS {:?} mean HSS {:?}", summary.mean_tss, summary.mean_hss);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth { out_dir, start, end, cadence_hours, events, size, seed } => {
            let spec = SynthSpec { size, ..SynthSpec::default() };
            let (cat, entries) = synth::write_archive(
                &out_dir,
                &spec,
                ts(&start)?,
                ts(&end)?,
                chrono::Duration::hours(cadence_hours),
                events,
                seed,
            )?;
            println!("{} events, {} images in {}", cat.len(), entries.len(), out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                PipelineError::Config(_) => ExitCode::from(1),
                e if e.is_property_violation() => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
