use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::json;
use wadenet::datapipe::{self, load_windows, split_stratified, DataConfig, Manifest, SynthSpec};
use wadenet::gradcheck::run_suite;
use wadenet::model::param_count;
use wadenet::rng::derived_seed;
use wadenet::tensor::OpKind;
use wadenet::trainer::{
    clip_votes, evaluate, evaluate_predictions, predict_windows, windows_in, Checkpoint,
};
use wadenet::{rng_from_seed, Error, Model, Trainer};

use crate::run_config::RunConfig;
use crate::{Command, EvalArgs, GradcheckArgs, ParamsArgs, PreprocessArgs, SynthArgs, TrainArgs};

/// Process exit codes.
pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;

/// Seed streams derived from the run seed.
const INIT_STREAM: u64 = 1;
const SPLIT_STREAM: u64 = 2;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            e if e.is_config() => EXIT_CONFIG,
            Error::Data(_) | Error::Decode(_) | Error::Io(_) | Error::Checkpoint(_) => EXIT_DATA,
            _ => EXIT_INTERNAL,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

type CliResult = Result<(), CliError>;

pub fn dispatch(command: Command) -> CliResult {
    match command {
        Command::Synth(a) => synth(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Params(a) => params(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

/// `out`, or `run-<unix seconds>-seed<seed>` in the working directory.
fn out_dir(out: Option<PathBuf>, seed: u64) -> Result<PathBuf, CliError> {
    let dir = out.unwrap_or_else(|| {
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        PathBuf::from(format!("run-{secs}-seed{seed}"))
    });
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn read_manifest(path: &Path) -> Result<Manifest, CliError> {
    if !path.is_file() {
        return Err(CliError::data(format!(
            "manifest {} does not exist",
            path.display()
        )));
    }
    Ok(Manifest::read(path)?)
}

/// Splits an unsplit manifest (seeded); a fully split one is kept.
fn ensure_split(manifest: Manifest, data: &DataConfig, seed: u64) -> Result<Manifest, CliError> {
    if manifest.is_split() {
        Ok(manifest)
    } else if manifest.is_unsplit() {
        Ok(split_stratified(
            &manifest,
            data.split_ratios,
            derived_seed(seed, SPLIT_STREAM),
        )?)
    } else {
        Err(CliError::data(
            "manifest assigns splits to some rows but not others",
        ))
    }
}

fn check_classes(manifest: &Manifest, classes: usize) -> CliResult {
    let found = manifest.vocabulary().len();
    if found != classes {
        return Err(CliError::config(format!(
            "model has {classes} classes but the manifest has {found} labels"
        )));
    }
    Ok(())
}

/// One line on stdout. A closed stdout (e.g. piped into `head`) is not an
/// error worth failing the command for.
fn print_line(line: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn print_json(value: &serde_json::Value) {
    print_line(&value.to_string());
}

fn synth(a: SynthArgs) -> CliResult {
    let spec = SynthSpec {
        classes: a.classes,
        clips_per_class: a.clips,
        clip_seconds: a.seconds,
        sample_rate: a.sample_rate,
        seed: a.seed,
        snr_db: a.snr_db,
        bands: None,
    };
    spec.class_bands()?;
    let dir = out_dir(a.out, a.seed)?;
    let manifest = datapipe::synth_dataset(&spec, &dir).map_err(|e| match e {
        Error::Io(io) => CliError::data(format!("writing corpus to {}: {io}", dir.display())),
        e => e.into(),
    })?;
    print_json(&json!({
        "clips": manifest.rows.len(),
        "classes": spec.classes,
        "manifest": dir.join("manifest.csv"),
    }));
    Ok(())
}

fn preprocess(a: PreprocessArgs) -> CliResult {
    let manifest = read_manifest(&a.manifest)?;
    let run = RunConfig::load(a.config.as_deref(), Some(manifest.vocabulary().len()))?;
    let window_len = a.window_len.unwrap_or(run.model.window_len);
    if window_len == 0 {
        return Err(CliError::config("window length must be positive"));
    }
    let manifest = ensure_split(manifest, &run.data, a.seed)?.with_absolute_paths()?;
    let windows = load_windows(&manifest, &run.data, window_len)?;
    let dir = out_dir(a.out, a.seed)?;
    let (cache, split_manifest) = (dir.join("windows.wdnw"), dir.join("manifest.csv"));
    datapipe::write_cache(&cache, window_len, &windows)?;
    manifest.write(&split_manifest)?;
    print_json(&json!({
        "clips": manifest.rows.len(),
        "windows": windows.len(),
        "window_len": window_len,
        "cache": cache,
        "manifest": split_manifest,
    }));
    Ok(())
}

fn train(a: TrainArgs) -> CliResult {
    let manifest = read_manifest(&a.manifest)?;
    let mut run = RunConfig::load(a.config.as_deref(), Some(manifest.vocabulary().len()))?;
    if let Some(seed) = a.seed {
        run.train.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        run.train.epochs = epochs;
    }
    if let Some(lr) = a.lr {
        run.train.lr0 = lr;
    }
    if let Some(b) = a.batch_size {
        run.train.batch_size = b;
    }
    run.train.validate()?;
    check_classes(&manifest, run.model.num_classes)?;
    let seed = run.train.seed;
    let manifest = ensure_split(manifest, &run.data, seed)?.with_absolute_paths()?;
    let dir = out_dir(a.out, seed)?;
    manifest.write(dir.join("manifest.csv"))?;
    fs::write(
        dir.join("run.json"),
        serde_json::to_string_pretty(&run).map_err(Error::from)?,
    )?;

    let data = load_windows(&manifest, &run.data, run.model.window_len)?;
    log::info!("{} windows from {} clips", data.len(), manifest.rows.len());
    let model = Model::<f32>::init(
        run.model.clone(),
        &mut rng_from_seed(derived_seed(seed, INIT_STREAM)),
    )?;
    let mut trainer = Trainer::new(model, run.train.clone())?;
    trainer.record_wall_clock(a.wall_clock);

    let mut sink = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
    let mut write_failure = None;
    trainer.fit(&data, |m| {
        let line = m.to_json_line();
        print_line(&line);
        match writeln!(sink, "{line}").and_then(|_| sink.flush()) {
            Ok(()) => ControlFlow::Continue(()),
            Err(e) => {
                write_failure = Some(e);
                ControlFlow::Break(())
            }
        }
    })?;
    if let Some(e) = write_failure {
        return Err(e.into());
    }
    trainer.checkpoint().save(dir.join("final.wdn"))?;
    if let Some(best) = trainer.best_checkpoint() {
        best.save(dir.join("best.wdn"))?;
    }
    log::info!("run written to {}", dir.display());
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let data_cfg = match &a.config {
        Some(path) => {
            let run = RunConfig::load(Some(path), None)?;
            if run.model != ckpt.model {
                return Err(CliError::config(format!(
                    "config {} does not describe the checkpoint's model",
                    path.display()
                )));
            }
            run.data
        }
        None => DataConfig::default(),
    };
    let manifest = read_manifest(&a.manifest)?;
    if !manifest.is_split() {
        return Err(CliError::data(
            "eval needs a split-annotated manifest (the one written by train or preprocess)",
        ));
    }
    check_classes(&manifest, ckpt.model.num_classes)?;
    let data = load_windows(&manifest, &data_cfg, ckpt.model.window_len)?;
    let windows = windows_in(&data, a.split.into());
    if windows.is_empty() {
        return Err(CliError::data(format!(
            "split {:?} has no windows",
            a.split
        )));
    }
    let model = ckpt.to_model::<f32>()?;
    let result = if a.clip_vote {
        let predicted = predict_windows(&model, &windows)?;
        let ids: Vec<usize> = windows.iter().map(|w| w.clip_id).collect();
        let truth: Vec<usize> = windows.iter().map(|w| w.label).collect();
        let classes = ckpt.model.num_classes;
        let (truth, predicted) = clip_votes(&ids, &truth, &predicted, classes);
        evaluate_predictions(&truth, &predicted, classes)
    } else {
        evaluate(&model, &windows)?
    };
    print_line(&serde_json::to_string(&result).map_err(Error::from)?);
    Ok(())
}

fn params(a: ParamsArgs) -> CliResult {
    let run = RunConfig::load(a.config.as_deref(), Some(a.classes))?;
    let report = param_count(&run.model)?;
    print_json(&json!({
        "kind": run.model.kind,
        "layers": report.rows,
        "total": report.total,
    }));
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CliResult {
    let fault = match a.inject_fault.as_deref() {
        None => None,
        Some(name) => Some(
            OpKind::from_name(name)
                .ok_or_else(|| CliError::config(format!("unknown op {name:?}")))?,
        ),
    };
    let report = run_suite(fault)?;
    for r in &report {
        print_json(&json!({
            "name": r.name,
            "max_rel_error": r.max_rel_error,
            "passed": r.passed(),
        }));
    }
    let failed: Vec<&str> = report
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError {
            code: EXIT_INTERNAL,
            message: format!("gradient check failed: {}", failed.join(", ")),
        })
    }
}
