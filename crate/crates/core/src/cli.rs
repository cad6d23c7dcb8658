//! The `tcnseg` command-line front end.
//!
//! ```text
//! tcnseg <command> [--config FILE] [--key value]...
//! ```
//!
//! Every command reads its settings from an optional `key=value` file and
//! then applies `--key value` (or `--key=value`) overrides. Exit codes: 0 on
//! success, 1 on a computational failure such as a failed gradient check, 2
//! on usage or validation errors.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{
    describe, key, required, synth_config, train_config, write_model_config, write_train_config, Key, ModelTemplate,
    Settings, MODEL_KEYS, SYNTH_KEYS, TRAIN_KEYS,
};
use crate::data::{
    check_dataset, estimate_filter_duration, load_dataset, load_features, load_manifest, load_sequence,
    save_manifest, save_sequence, split_k_fold, split_leave_one_group_out, Fold, LabeledSequence,
    ManifestEntry,
};
use crate::error::TcnError;
use crate::gradcheck::{default_shape_config, gradient_check, small_config, GradCheckOptions};
use crate::metrics::{evaluate, EvalReport, MAP_THRESHOLDS};
use crate::network::{ModelConfig, ProbabilitySequence, TcnModel};
use crate::serialize::{load_model, save_model};
use crate::synth::synth_generate;
use crate::training::{train_with, TrainConfig};

pub const MODEL_FILE: &str = "model.tcn";
pub const HISTORY_FILE: &str = "history.csv";
pub const CONFIG_ECHO_FILE: &str = "config.txt";
pub const EVAL_FILE: &str = "eval.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const LABELS_FILE: &str = "labels.csv";
pub const PROBS_FILE: &str = "probs.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const FOLDS_FILE: &str = "folds.csv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Engine(#[from] TcnError),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Engine(TcnError::NonFinite { .. }) => 1,
            CliError::Engine(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

const TRAIN_IO: &[Key] = &[
    required("manifest", "training manifest"),
    key("val_manifest", "none", "optional validation manifest scored after every epoch"),
    required("output_dir", "directory for model.tcn, history.csv and config.txt"),
];

const EVAL_IO: &[Key] = &[
    required("model_file", "trained model"),
    required("manifest", "manifest of labelled sequences"),
    key("output_dir", "none", "directory for eval.csv and summary.txt"),
];

const PREDICT_IO: &[Key] = &[
    required("model_file", "trained model"),
    required("input", "sequence CSV; the label column is optional"),
    required("output_dir", "directory for labels.csv and probs.csv"),
];

const GRADCHECK_KEYS: &[Key] = &[
    key("shape", "small", "small (L=2, F=[3,4], d=2) or default (F=[32,64,96], d=3)"),
    key("seed", "0", "seed for the random instance"),
    key("tolerance", "1e-4", "maximum relative error"),
    key("step", "1e-5", "central difference step"),
    key("seq_len", "8", "frames in the random instance"),
    key("fraction", "1", "fraction of each tensor's coordinates to check"),
];

const SYNTH_IO: &[Key] = &[required("output_dir", "directory for the sequences and manifest.txt")];

const CROSSVAL_IO: &[Key] = &[
    required("manifest", "manifest of all sequences"),
    required("output_dir", "directory for folds.csv, summary.txt and config.txt"),
    key("split", "logo", "logo (one fold per group) or kfold"),
    key("folds", "5", "number of folds for kfold"),
];

struct Command {
    name: &'static str,
    about: &'static str,
    keys: &'static [&'static [Key]],
    run: fn(&Settings, &mut dyn Write) -> CliResult<()>,
}

const COMMANDS: &[Command] = &[
    Command {
        name: "train",
        about: "train a model on a manifest",
        keys: &[TRAIN_IO, MODEL_KEYS, TRAIN_KEYS],
        run: cmd_train,
    },
    Command {
        name: "eval",
        about: "score a model on labelled sequences",
        keys: &[EVAL_IO],
        run: cmd_eval,
    },
    Command {
        name: "predict",
        about: "write per-frame labels and probabilities for one sequence",
        keys: &[PREDICT_IO],
        run: cmd_predict,
    },
    Command {
        name: "gradcheck",
        about: "compare analytic gradients against finite differences",
        keys: &[GRADCHECK_KEYS],
        run: cmd_gradcheck,
    },
    Command {
        name: "synth",
        about: "generate a synthetic dataset",
        keys: &[SYNTH_IO, SYNTH_KEYS],
        run: cmd_synth,
    },
    Command {
        name: "crossval",
        about: "train and evaluate one model per fold",
        keys: &[CROSSVAL_IO, MODEL_KEYS, TRAIN_KEYS],
        run: cmd_crossval,
    },
];

pub fn usage() -> String {
    let mut s = String::from("usage: tcnseg <command> [--config FILE] [--key value]...\n\ncommands:\n");
    for c in COMMANDS {
        let _ = writeln!(s, "  {:<10} {}", c.name, c.about);
    }
    s.push_str("\nrun `tcnseg <command> --help` for the keys a command accepts\n");
    s
}

fn command_help(c: &Command) -> String {
    let mut s = format!(
        "usage: tcnseg {} [--config FILE] [--key value]...\n\n{}\n\nkeys (in FILE as key=value, or as flags):\n",
        c.name, c.about
    );
    for group in c.keys {
        s.push_str(&describe(group));
    }
    s
}

enum Parsed<'a> {
    Help(String),
    Run(&'a Command, Settings),
}

fn parse_args(args: &[String]) -> CliResult<Parsed<'static>> {
    let Some(name) = args.first() else {
        return Err(CliError::Usage(usage()));
    };
    if name == "--help" || name == "-h" || name == "help" {
        return Ok(Parsed::Help(usage()));
    }
    let command = COMMANDS
        .iter()
        .find(|c| c.name == name)
        .ok_or_else(|| CliError::Usage(format!("unknown command `{name}`\n\n{}", usage())))?;

    let mut file: Option<PathBuf> = None;
    let mut overrides = Settings::new();
    let mut rest = args[1..].iter();
    while let Some(arg) = rest.next() {
        if arg == "--help" || arg == "-h" {
            return Ok(Parsed::Help(command_help(command)));
        }
        let flag = arg
            .strip_prefix("--")
            .ok_or_else(|| CliError::Usage(format!("expected --key, found `{arg}`")))?;
        let (k, v) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = rest
                    .next()
                    .ok_or_else(|| CliError::Usage(format!("missing value for --{flag}")))?;
                (flag.to_string(), v.clone())
            }
        };
        if k == "config" {
            file = Some(PathBuf::from(v));
        } else {
            overrides.set(k, v);
        }
    }

    let mut settings = match file {
        Some(path) => Settings::load(path)?,
        None => Settings::new(),
    };
    settings.merge(&overrides);
    settings.check_known(command.keys)?;
    for group in command.keys {
        settings.apply_defaults(group);
    }
    Ok(Parsed::Run(command, settings))
}

/// Runs one invocation (without the program name), writing normal output
/// to `out`.
pub fn run_with(args: &[String], out: &mut dyn Write) -> CliResult<()> {
    match parse_args(args)? {
        Parsed::Help(text) => {
            write_out(out, &text);
            Ok(())
        }
        Parsed::Run(command, settings) => (command.run)(&settings, out),
    }
}

/// Runs one invocation and returns the process exit code. Errors go to
/// standard error.
pub fn run(args: &[String]) -> i32 {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match run_with(args, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = out.flush();
            eprintln!("tcnseg: {e}");
            e.exit_code()
        }
    }
}

fn write_out(out: &mut dyn Write, text: &str) {
    // A closed stdout is not worth failing a finished computation over.
    let _ = out.write_all(text.as_bytes());
}

fn optional_path(s: &Settings, key: &str) -> Option<PathBuf> {
    s.get(key).filter(|v| !v.is_empty() && *v != "none").map(PathBuf::from)
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| TcnError::io(path, e).into())
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| TcnError::io(path, e).into())
}

/// Resolves `auto` model fields against a dataset. The filter duration comes
/// from `train` only, the class count and input width from everything.
fn resolve_model(template: &ModelTemplate, train: &[LabeledSequence], all: &[LabeledSequence]) -> CliResult<ModelConfig> {
    let (dim, max_label) = check_dataset(all, template.num_classes)?;
    let config = template.resolve(max_label, dim, || {
        let labels: Vec<_> = train.iter().map(|s| s.labels.clone()).collect();
        Ok(estimate_filter_duration(&labels, train[0].features.frame_period)?.frames)
    })?;
    Ok(config)
}

fn cmd_train(s: &Settings, out: &mut dyn Write) -> CliResult<()> {
    let manifest = s.path("manifest")?;
    let output_dir = s.path("output_dir")?;
    let val_manifest = optional_path(s, "val_manifest");
    let template = ModelTemplate::from_settings(s)?;
    let tc = train_config(s)?;

    let dataset = load_dataset(&manifest)?;
    let validation = val_manifest.as_ref().map(load_dataset).transpose()?;
    let mut everything = dataset.clone();
    if let Some(v) = &validation {
        everything.extend(v.iter().cloned());
    }
    let mc = resolve_model(&template, &dataset, &everything)?;
    let (params, history) = train_with(&dataset, validation.as_deref(), &mc, &tc, |_| {})?;
    let model = TcnModel::new(mc, params)?;

    let mut resolved = s.clone();
    write_model_config(&model.config, &mut resolved);
    write_train_config(&tc, &mut resolved);

    create_dir(&output_dir)?;
    write_file(&output_dir.join(HISTORY_FILE), &history.to_csv())?;
    write_file(&output_dir.join(CONFIG_ECHO_FILE), &resolved.to_text())?;
    // Written last and atomically, so a failed run never leaves a model.
    save_model(&model, output_dir.join(MODEL_FILE))?;

    let last = history.last().expect("epochs >= 1");
    write_out(
        out,
        &format!(
            "trained {} epochs on {} sequences: loss={} train_acc={}\nwrote {}\n",
            last.epoch,
            dataset.len(),
            last.loss,
            last.train_acc,
            output_dir.join(MODEL_FILE).display()
        ),
    );
    Ok(())
}

/// Per-sequence reports, named by file stem.
fn evaluate_sequences(model: &TcnModel, named: &[(String, LabeledSequence)]) -> CliResult<Vec<(String, EvalReport)>> {
    named
        .iter()
        .map(|(name, seq)| {
            let probs = model.predict_proba(&seq.features)?;
            Ok((name.clone(), evaluate(&probs, &seq.labels, &MAP_THRESHOLDS)?))
        })
        .collect()
}

fn report_csv(rows: &[(String, EvalReport)], mean: &EvalReport) -> String {
    let mut s = mean.csv_header();
    s.push('\n');
    for (name, r) in rows {
        s.push_str(&r.csv_row(name));
        s.push('\n');
    }
    s.push_str(&mean.csv_row("mean"));
    s.push('\n');
    s
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn cmd_eval(s: &Settings, out: &mut dyn Write) -> CliResult<()> {
    let model = load_model(s.path("model_file")?)?;
    let entries = load_manifest(s.path("manifest")?)?;
    let named = entries
        .iter()
        .map(|e| Ok((stem(&e.path), load_sequence(&e.path)?)))
        .collect::<crate::Result<Vec<_>>>()?;
    let sequences: Vec<LabeledSequence> = named.iter().map(|(_, q)| q.clone()).collect();
    let (dim, _) = check_dataset(&sequences, Some(model.config.num_classes))?;
    if dim != model.config.input_dim {
        return Err(TcnError::shape("eval feature dim", model.config.input_dim, dim).into());
    }

    let rows = evaluate_sequences(&model, &named)?;
    let reports: Vec<EvalReport> = rows.iter().map(|(_, r)| r.clone()).collect();
    let mean = EvalReport::mean(&reports)?;
    let csv = report_csv(&rows, &mean);
    let summary = format!("sequences={}\n{}", rows.len(), mean.to_key_value());
    if let Some(dir) = optional_path(s, "output_dir") {
        create_dir(&dir)?;
        write_file(&dir.join(EVAL_FILE), &csv)?;
        write_file(&dir.join(SUMMARY_FILE), &summary)?;
    }
    write_out(out, &csv);
    write_out(out, &summary);
    Ok(())
}

fn labels_csv(labels: &[usize]) -> String {
    let mut s = String::from("frame,label\n");
    for (t, l) in labels.iter().enumerate() {
        let _ = writeln!(s, "{t},{l}");
    }
    s
}

fn probs_csv(probs: &ProbabilitySequence) -> String {
    let c = probs.num_classes();
    let mut s = String::from("frame");
    for k in 1..=c {
        let _ = write!(s, ",prob_{k}");
    }
    s.push('\n');
    for t in 0..probs.len() {
        let _ = write!(s, "{t}");
        for k in 0..c {
            let _ = write!(s, ",{}", probs.probs.get(k, t));
        }
        s.push('\n');
    }
    s
}

fn cmd_predict(s: &Settings, out: &mut dyn Write) -> CliResult<()> {
    let model = load_model(s.path("model_file")?)?;
    let features = load_features(s.path("input")?)?;
    if features.feature_dim() != model.config.input_dim {
        return Err(TcnError::shape("predict feature dim", model.config.input_dim, features.feature_dim()).into());
    }
    let (probs, labels) = model.predict(&features)?;
    let dir = s.path("output_dir")?;
    create_dir(&dir)?;
    write_file(&dir.join(LABELS_FILE), &labels_csv(&labels.labels))?;
    write_file(&dir.join(PROBS_FILE), &probs_csv(&probs))?;
    write_out(
        out,
        &format!("predicted {} frames into {}\n", labels.len(), dir.display()),
    );
    Ok(())
}

fn cmd_gradcheck(s: &Settings, out: &mut dyn Write) -> CliResult<()> {
    let config = match s.require("shape")? {
        "small" => small_config(),
        "default" => default_shape_config(),
        other => return Err(CliError::Usage(format!("shape must be small or default, found `{other}`"))),
    };
    let opts = GradCheckOptions {
        seed: s.parsed("seed")?,
        tolerance: s.parsed("tolerance")?,
        step: s.parsed("step")?,
        seq_len: s.parsed("seq_len")?,
        fraction: s.parsed("fraction")?,
    };
    let report = gradient_check(&config, &opts)?;
    write_out(out, &format!("{report}\n"));
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "gradient check failed: max relative error {:.3e} exceeds {:.1e}",
            report.worst(),
            report.tolerance
        )))
    }
}

fn cmd_synth(s: &Settings, out: &mut dyn Write) -> CliResult<()> {
    let cfg = synth_config(s)?;
    let dir = s.path("output_dir")?;
    let dataset = synth_generate(&cfg)?;
    create_dir(&dir)?;
    let width = dataset.len().to_string().len().max(3);
    let mut entries = Vec::with_capacity(dataset.len());
    for (i, seq) in dataset.iter().enumerate() {
        let path = dir.join(format!("seq_{i:0width$}.csv"));
        save_sequence(seq, &path)?;
        entries.push(ManifestEntry {
            path,
            group: Some(seq.features.source_id.clone()),
        });
    }
    let manifest = dir.join(MANIFEST_FILE);
    save_manifest(&entries, &manifest)?;
    write_out(
        out,
        &format!("wrote {} sequences and {}\n", dataset.len(), manifest.display()),
    );
    Ok(())
}

/// Outcome of one cross-validation fold.
struct FoldResult {
    name: String,
    report: EvalReport,
}

fn run_fold(
    dataset: &[LabeledSequence],
    fold: &Fold,
    template: &ModelTemplate,
    tc: &TrainConfig,
    fold_index: usize,
) -> CliResult<FoldResult> {
    let train: Vec<LabeledSequence> = fold.train.iter().map(|&i| dataset[i].clone()).collect();
    let test: Vec<(String, LabeledSequence)> = fold
        .test
        .iter()
        .map(|&i| (format!("seq_{i}"), dataset[i].clone()))
        .collect();
    let mc = resolve_model(template, &train, dataset)?;
    let tc = TrainConfig {
        rng_seed: tc.rng_seed.wrapping_add(fold_index as u64),
        ..tc.clone()
    };
    let (params, _) = train_with(&train, None, &mc, &tc, |_| {})?;
    let model = TcnModel::new(mc, params)?;
    let rows = evaluate_sequences(&model, &test)?;
    let reports: Vec<EvalReport> = rows.into_iter().map(|(_, r)| r).collect();
    Ok(FoldResult {
        name: fold.name.clone(),
        report: EvalReport::mean(&reports)?,
    })
}

fn cmd_crossval(s: &Settings, out: &mut dyn Write) -> CliResult<()> {
    let manifest = s.path("manifest")?;
    let dir = s.path("output_dir")?;
    let template = ModelTemplate::from_settings(s)?;
    let tc = train_config(s)?;
    let dataset = load_dataset(&manifest)?;
    let folds = match s.require("split")? {
        "logo" => split_leave_one_group_out(&dataset)?,
        "kfold" => split_k_fold(dataset.len(), s.parsed("folds")?, tc.rng_seed)?,
        other => return Err(CliError::Usage(format!("split must be logo or kfold, found `{other}`"))),
    };

    let results = folds
        .iter()
        .enumerate()
        .map(|(i, fold)| run_fold(&dataset, fold, &template, &tc, i))
        .collect::<CliResult<Vec<_>>>()?;
    let reports: Vec<EvalReport> = results.iter().map(|r| r.report.clone()).collect();
    let mean = EvalReport::mean(&reports)?;
    let rows: Vec<(String, EvalReport)> = results.into_iter().map(|r| (r.name, r.report)).collect();
    let csv = report_csv(&rows, &mean);
    let summary = format!("folds={}\n{}", rows.len(), mean.to_key_value());

    create_dir(&dir)?;
    write_file(&dir.join(FOLDS_FILE), &csv)?;
    write_file(&dir.join(SUMMARY_FILE), &summary)?;
    write_file(&dir.join(CONFIG_ECHO_FILE), &s.to_text())?;
    write_out(out, &csv);
    write_out(out, &summary);
    Ok(())
}
