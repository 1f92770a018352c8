//! Command implementations behind the `mscgc` binary.
//!
//! Every command takes a fully resolved [`RunConfig`]. Commands that
//! produce results write them into a fresh timestamped directory under
//! `output.dir` together with the effective config and seed.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mscgc_core::data::checkpoint::model_from_checkpoint;
use mscgc_core::data::split::{split_dataset, DatasetSplit};
use mscgc_core::data::synth::gen_synthetic;
use mscgc_core::data::Dataset;
use mscgc_core::interpret;
use mscgc_core::metrics::MetricsReport;
use mscgc_core::model::{MscgcKanModel, Variant};
use mscgc_core::train::{evaluate, train_loop, LoopOptions, SplitSets, TrainOutcome};
use mscgc_core::verify::{run_gradcheck_suite, GradcheckReport};
use mscgc_core::{Error, Result};
use serde::Serialize;
use serde_json::{json, Value};

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_PARTIAL: i32 = 4;

/// Process exit status for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_numerical() || matches!(err, Error::UndefinedMetric(_)) {
        EXIT_NUMERICAL
    } else {
        EXIT_INPUT
    }
}

/// Creates `parent/<command>-<timestamp>`, adding a counter when that name
/// is taken. Existing directories are never reused.
pub fn create_run_dir(parent: &Path, command: &str) -> Result<PathBuf> {
    fs::create_dir_all(parent)?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S%.3f");
    for n in 0.. {
        let name = if n == 0 { format!("{command}-{stamp}") } else { format!("{command}-{stamp}-{n}") };
        let dir = parent.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!("counter exhausted")
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn echo_config(dir: &Path, cfg: &RunConfig, seed: u64) -> Result<()> {
    write_json(&dir.join("config.json"), &cfg.to_flat())?;
    fs::write(dir.join("seed.txt"), format!("{seed}\n"))?;
    Ok(())
}

fn write_metrics(dir: &Path, report: &MetricsReport) -> Result<()> {
    write_json(&dir.join("metrics.json"), &report.to_flat_json())?;
    fs::write(dir.join("metrics.csv"), format!("{}\n{}\n", report.csv_header(), report.csv_row()))?;
    Ok(())
}

pub struct LoadedData {
    pub dataset: Dataset,
    pub split: DatasetSplit,
    pub sets: SplitSets,
}

pub fn load_data(cfg: &RunConfig) -> Result<LoadedData> {
    let dataset = Dataset::load(&cfg.data.dir)?;
    let split = split_dataset(&dataset.meta, cfg.split.protocol, cfg.split.ratios)?;
    let sets = SplitSets {
        train: dataset.subset(&split.train)?,
        val: dataset.subset(&split.val)?,
        test: dataset.subset(&split.test)?,
    };
    Ok(LoadedData { dataset, split, sets })
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<Dataset> {
    cfg.synth.validate()?;
    let ds = gen_synthetic(&cfg.synth)?;
    ds.save(&cfg.data.dir)?;
    println!(
        "wrote {} samples of shape {:?} to {}",
        ds.len(),
        &ds.meta.shapes.samples[1..],
        cfg.data.dir.display()
    );
    Ok(ds)
}

pub struct TrainedRun {
    pub model: MscgcKanModel,
    pub outcome: TrainOutcome,
    pub config_hash: String,
}

/// Trains one model into `dir`: `best.ckpt`, `log.jsonl`, and test metrics.
pub fn train_into(cfg: &RunConfig, data: &LoadedData, variant: Variant, seed: u64, dir: &Path) -> Result<TrainedRun> {
    let model_cfg = cfg.model_config(&data.dataset.meta, variant, seed)?;
    let config_hash = model_cfg.hash();
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    let mut model = MscgcKanModel::new(model_cfg)?;
    let opts = LoopOptions { checkpoint: Some(dir.join("best.ckpt")), eval_batch: cfg.eval.batch };
    let result = train_loop(&mut model, &data.sets, &train_cfg, &opts);
    let outcome = result?;
    let mut log = fs::File::create(dir.join("log.jsonl"))?;
    for rec in &outcome.log {
        writeln!(log, "{}", serde_json::to_string(rec)?)?;
    }
    write_metrics(dir, &outcome.test)?;
    Ok(TrainedRun { model, outcome, config_hash })
}

pub fn cmd_train(cfg: &RunConfig) -> Result<(PathBuf, TrainedRun)> {
    let data = load_data(cfg)?;
    let dir = create_run_dir(&cfg.output.dir, "train")?;
    echo_config(&dir, cfg, cfg.train.seed)?;
    write_json(&dir.join("split.json"), &data.split)?;
    let run = train_into(cfg, &data, cfg.model.variant, cfg.train.seed, &dir)?;
    let t = &run.outcome.test;
    println!(
        "{}: best epoch {} test ba {:.4} kappa {} wf1 {:.4}",
        dir.display(),
        run.outcome.best_epoch,
        t.balanced_accuracy,
        t.kappa.map_or("undefined".into(), |k| format!("{k:.4}")),
        t.weighted_f1
    );
    Ok((dir, run))
}

fn checkpoint_path(path: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    path.clone().ok_or_else(|| Error::Config(format!("{key} is required")))
}

fn compatible_model(path: &Path, data: &LoadedData) -> Result<MscgcKanModel> {
    let (model, _) = model_from_checkpoint(path)?;
    let shape = &data.dataset.meta.shapes.samples;
    let c = &model.config;
    if shape[1..] != [c.channels, c.windows, c.raw_width] || data.dataset.meta.classes != c.classes {
        return Err(Error::Compatibility(format!(
            "checkpoint expects samples [C={}, S={}, P={}] with {} classes, dataset has {:?} with {}",
            c.channels,
            c.windows,
            c.raw_width,
            c.classes,
            &shape[1..],
            data.dataset.meta.classes
        )));
    }
    Ok(model)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<(PathBuf, MetricsReport)> {
    let ckpt = checkpoint_path(&cfg.eval.checkpoint, "eval.checkpoint")?;
    let data = load_data(cfg)?;
    let mut model = compatible_model(&ckpt, &data)?;
    let report = evaluate(&mut model, &data.sets.test.x, &data.sets.test.y, cfg.eval.batch)?;
    let dir = create_run_dir(&cfg.output.dir, "eval")?;
    echo_config(&dir, cfg, model.config.seed)?;
    write_metrics(&dir, &report)?;
    println!("{}: test ba {:.4} wf1 {:.4}", dir.display(), report.balanced_accuracy, report.weighted_f1);
    Ok((dir, report))
}

/// Aggregate of one ablation row over its seeds.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub config_hashes: Vec<String>,
    pub ba: Vec<f64>,
    pub kappa: Vec<Option<f64>>,
    pub wf1: Vec<f64>,
    /// Highest training-batch balanced accuracy per seed.
    pub max_train_ba: Vec<f64>,
    /// First epoch whose training balanced accuracy reached 0.90.
    pub epoch_to_train_ba_90: Vec<Option<usize>>,
    pub errors: Vec<String>,
}

pub fn mean_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

impl AblationRow {
    fn new(variant: Variant) -> Self {
        Self {
            label: variant.label().to_string(),
            variant,
            seeds: Vec::new(),
            config_hashes: Vec::new(),
            ba: Vec::new(),
            kappa: Vec::new(),
            wf1: Vec::new(),
            max_train_ba: Vec::new(),
            epoch_to_train_ba_90: Vec::new(),
            errors: Vec::new(),
        }
    }

    pub fn mean_ba(&self) -> Option<f64> {
        mean_std(&self.ba).map(|(m, _)| m)
    }

    fn csv_fields(&self) -> Vec<String> {
        let stat = |v: &[f64]| match mean_std(v) {
            Some((m, s)) => [m.to_string(), s.to_string()],
            None => [String::new(), String::new()],
        };
        let kappas: Vec<f64> = self.kappa.iter().flatten().copied().collect();
        let join = |it: Vec<String>| it.join(";");
        let mut out = vec![
            self.label.clone(),
            join(self.seeds.iter().map(|s| s.to_string()).collect()),
            join(self.config_hashes.clone()),
            self.ba.len().to_string(),
        ];
        out.extend(stat(&self.ba));
        out.extend(stat(&kappas));
        out.extend(stat(&self.wf1));
        out.push(join(self.errors.clone()));
        out
    }
}

pub const ABLATION_HEADER: [&str; 11] =
    ["model", "seeds", "config_hashes", "completed", "ba_mean", "ba_std", "kappa_mean", "kappa_std", "wf1_mean", "wf1_std", "errors"];

fn write_ablation(dir: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("ablation.csv")).map_err(csv_err)?;
    w.write_record(ABLATION_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.csv_fields()).map_err(csv_err)?;
    }
    w.flush()?;
    write_json(&dir.join("ablation.json"), &rows)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub struct AblationOutcome {
    pub dir: PathBuf,
    pub rows: Vec<AblationRow>,
}

impl AblationOutcome {
    pub fn complete(&self) -> bool {
        self.rows.iter().all(|r| r.errors.is_empty())
    }
}

/// Trains all four variants for every seed of `ablate.seeds`. Failed runs
/// are recorded in their row and do not stop the others.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblationOutcome> {
    let data = load_data(cfg)?;
    let dir = create_run_dir(&cfg.output.dir, "ablate")?;
    echo_config(&dir, cfg, cfg.ablate.seeds[0])?;
    fs::write(
        dir.join("seed.txt"),
        cfg.ablate.seeds.iter().map(|s| format!("{s}\n")).collect::<String>(),
    )?;
    let mut rows: Vec<AblationRow> = Vec::new();
    for variant in Variant::ALL {
        let mut row = AblationRow::new(variant);
        for &seed in &cfg.ablate.seeds {
            let sub = dir.join(format!("{variant:?}-seed{seed}").to_lowercase());
            fs::create_dir(&sub)?;
            row.seeds.push(seed);
            match train_into(cfg, &data, variant, seed, &sub) {
                Ok(run) => {
                    let t = &run.outcome.test;
                    log::info!("{} seed {seed}: test ba {:.4}", variant.label(), t.balanced_accuracy);
                    row.config_hashes.push(run.config_hash);
                    row.ba.push(t.balanced_accuracy);
                    row.kappa.push(t.kappa);
                    row.wf1.push(t.weighted_f1);
                    let log = &run.outcome.log;
                    row.max_train_ba.push(log.iter().map(|r| r.train_ba).fold(0.0, f64::max));
                    row.epoch_to_train_ba_90.push(log.iter().find(|r| r.train_ba >= 0.90).map(|r| r.epoch));
                }
                Err(e) => {
                    log::error!("{} seed {seed} failed: {e}", variant.label());
                    row.config_hashes.push(String::new());
                    row.errors.push(format!("seed {seed}: {e}"));
                }
            }
        }
        rows.push(row);
        write_ablation(&dir, &rows)?;
    }
    for r in &rows {
        match mean_std(&r.ba) {
            Some((m, s)) => println!("{:<28} ba {m:.4} ± {s:.4} over {} seeds", r.label, r.ba.len()),
            None => println!("{:<28} no completed runs", r.label),
        }
    }
    println!("{}", dir.display());
    Ok(AblationOutcome { dir, rows })
}

pub const INTERPRET_FILES: [&str; 5] = ["adjacency.csv", "hubs.csv", "saliency.csv", "kan_importance.csv", "activation.csv"];

pub struct InterpretOutcome {
    pub dir: PathBuf,
    pub summary: Value,
}

pub fn cmd_interpret(cfg: &RunConfig) -> Result<InterpretOutcome> {
    let ckpt = checkpoint_path(&cfg.interpret.checkpoint, "interpret.checkpoint")?;
    let data = load_data(cfg)?;
    let mut model = compatible_model(&ckpt, &data)?;
    let dir = create_run_dir(&cfg.output.dir, "interpret")?;
    echo_config(&dir, cfg, model.config.seed)?;
    let meta = &data.dataset.meta;
    let test = &data.sets.test;
    let mut summary = serde_json::Map::new();

    if model.block.is_some() {
        let hubs = interpret::export_adjacency(&model)?;
        interpret::write_hub_csvs(&dir, &hubs)?;
        if meta.communities.len() == model.config.channels {
            let (within, across) = interpret::community_contrast(&hubs.a_hat, &meta.communities)?;
            summary.insert("adjacency_within".into(), json!(within));
            summary.insert("adjacency_across".into(), json!(across));
        }
        summary.insert("hubs".into(), json!(hubs.ranking));
    } else {
        log::warn!("variant {} has no graph block; adjacency and hub files are empty", model.config.variant.label());
        fs::write(dir.join("adjacency.csv"), "")?;
        fs::write(dir.join("hubs.csv"), "rank,channel,strength\n")?;
    }

    let n = cfg.interpret.samples.min(test.len());
    let picked: Vec<usize> = (0..n).collect();
    let x = test.x.select(&picked)?;
    let targets: Vec<usize> = picked.iter().map(|&i| test.y[i]).collect();
    let maps = interpret::gradcam_temporal(&mut model, &x, &targets)?;
    let rows: Vec<usize> = picked.iter().map(|&i| test.index[i]).collect();
    interpret::write_saliency_csv(&dir.join("saliency.csv"), &rows, &maps)?;
    if meta.onsets.len() == meta.len() {
        let ratios: Vec<f64> = rows
            .iter()
            .zip(&maps)
            .filter_map(|(&r, m)| interpret::onset_mass_ratio(&m.temporal, meta.onsets[r], 1))
            .collect();
        if let Some((mean, _)) = mean_std(&ratios) {
            summary.insert("onset_mass_ratio".into(), json!(mean));
        }
    }

    if model.kan.is_some() {
        let imp = interpret::kan_basis_importance(&mut model, Some(&x))?;
        interpret::write_kan_files(&dir, &imp)?;
        summary.insert(
            "kan_importance".into(),
            imp.names.iter().zip(&imp.importance).map(|(k, v)| (k.clone(), json!(v))).collect(),
        );
    } else {
        log::warn!("variant {} has no KAN mapping; kan_importance.csv is empty", model.config.variant.label());
        fs::write(dir.join("kan_importance.csv"), "basis,importance\n")?;
    }

    let act = interpret::channel_activation(&mut model, &test.x, &test.y, cfg.eval.batch)?;
    interpret::write_activation_csv(&dir.join("activation.csv"), &act)?;

    let summary = Value::Object(summary);
    write_json(&dir.join("summary.json"), &summary)?;
    println!("{}", dir.display());
    Ok(InterpretOutcome { dir, summary })
}

/// Prints one line per check and returns the report; callers map a failed
/// report to [`EXIT_VERIFY_FAILED`].
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradcheckReport> {
    let report = run_gradcheck_suite(cfg.gradcheck.corrupt.as_deref())?;
    for r in &report.results {
        println!("{:<32} max_rel_error {:.3e} {}", r.name, r.max_rel_error, if r.passed() { "ok" } else { "FAIL" });
    }
    for r in report.failures() {
        eprintln!("gradient check failed for {} ({:.3e})", r.name, r.max_rel_error);
    }
    Ok(report)
}
