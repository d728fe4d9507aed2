//! `editlab` subcommands.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage or configuration error,
//! 3 failed precondition, 4 numeric failure, 5 I/O or file-format error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::editengine::{mbps_edit, write_delta_csv};
use crate::error::{Error, Result};
use crate::evalprof::{
    edit_and_evaluate, emit_report, eval_argmax, eval_prob_compare, profile_iteration, EditPlan, EditProtocol,
    MetricsRow, ProfileRow, Report,
};
use crate::factsynth::{batch_split, generate_corpus, EditCorpus};
use crate::metatrain::{write_log, Trainer, TrainerMode};
use crate::toylm::Pair;

use super::{
    compare_tables, load_state, prepare, save_state, scarcity_sweep, step_sweep, Checkpoint, ExperimentConfig, Prepared,
    Preset,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_PRECONDITION: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_IO: i32 = 5;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Input(_) => EXIT_USAGE,
        Error::Precondition(_) | Error::Capacity(_) => EXIT_PRECONDITION,
        Error::Numeric(_) | Error::Measurement(_) => EXIT_NUMERIC,
        Error::Io { .. } | Error::Format { .. } | Error::Version { .. } => EXIT_IO,
        Error::Shape(_) | Error::Contract(_) => EXIT_INTERNAL,
    }
}

#[derive(Parser, Debug)]
#[command(name = "editlab", version, about = "Meta-learned model editing on a toy language model")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Common {
    /// TOML experiment config; defaults to the chosen preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// paper, desk or trend.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Override any config key, e.g. `--set trainer.eta=0.1`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Run a single seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root (otherwise `$EDITLAB_OUT`, then `./runs`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate an edit corpus.
    GenData {
        #[arg(long)]
        n: Option<usize>,
        /// Output file (default `<run dir>/corpus.jsonl`).
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Fit the base model to the corpus.
    Pretrain {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Meta-train editing hypernetworks.
    Train {
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Pretrained base model checkpoint.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Continue a saved training state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Apply trained hypernetworks to the held-out batches.
    Edit {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        protocol: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a model, or a trained editor's edits, on the held-out samples.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Time the training phases of one or more trainer modes.
    Profile {
        #[arg(long, value_delimiter = ',', default_value = "smedit_batch,baseline_kl")]
        modes: Vec<String>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Backpropagation-step sweep and/or training-budget sweep over all seeds.
    Sweep {
        #[arg(long, value_delimiter = ',')]
        steps: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        iterations: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "smedit_batch,baseline_kl")]
        modes: Vec<String>,
    },
    /// Join metrics tables on (mode, S, seed).
    Compare {
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "argmax_exact")]
        style: String,
        #[arg(long)]
        file: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("editlab: {e}");
            exit_code(&e)
        }
    }
}

pub fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match (&common.config, &common.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            ExperimentConfig::from_toml(&text)?
        }
        (None, Some(p)) => ExperimentConfig::preset(p.parse()?),
        (None, None) => ExperimentConfig::preset(Preset::Desk),
    };
    if let (Some(_), Some(p)) = (&common.config, &common.preset) {
        config.preset = p.clone();
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        config.set(k.trim(), v.trim())?;
    }
    if let Some(s) = common.seed {
        config.seeds = vec![s];
    }
    if let Some(o) = &common.out {
        config.out_dir = o.to_string_lossy().into_owned();
    }
    Ok(config)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    println!("{}", path.display());
    Ok(())
}

fn run_dir(config: &ExperimentConfig, command: &str) -> PathBuf {
    config.out_root().join(command).join(config.run_id())
}

fn announce(paths: Vec<PathBuf>) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn prepared(config: &ExperimentConfig, data: Option<&Path>) -> Result<Prepared> {
    match data {
        None => prepare(config),
        Some(path) => {
            let corpus = EditCorpus::load(path)?;
            let mut p = prepare_model_only(config, &corpus)?;
            p.corpus = corpus;
            Ok(p)
        }
    }
}

fn prepare_model_only(config: &ExperimentConfig, corpus: &EditCorpus) -> Result<Prepared> {
    let mut model = crate::toylm::ToyModel::new(config.model.clone())?;
    let report = crate::toylm::pretrain(&mut model, &crate::factsynth::pretrain_corpus(corpus), &config.pretrain)?;
    let mut p = Prepared::from_parts(config, corpus.clone(), model)?;
    p.pretrain = Some(report);
    Ok(p)
}

fn with_corpus(config: &ExperimentConfig, data: Option<&Path>) -> Result<EditCorpus> {
    match data {
        Some(path) => EditCorpus::load(path),
        None => generate_corpus(&config.corpus),
    }
}

fn parse_modes(names: &[String]) -> Result<Vec<TrainerMode>> {
    names.iter().map(|m| m.parse()).collect()
}

fn execute(cli: &Cli) -> Result<()> {
    let mut config = resolve_config(&cli.common)?;
    match &cli.command {
        Command::GenData { n, file } => {
            if let Some(n) = n {
                config.corpus.n = *n;
            }
            let config = config.for_seed(config.seeds[0]);
            config.validate()?;
            let corpus = generate_corpus(&config.corpus)?;
            let path = file.clone().unwrap_or_else(|| run_dir(&config, "gen-data").join("corpus.jsonl"));
            corpus.save(&path)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Pretrain { data } => {
            let config = config.for_seed(config.seeds[0]);
            let prep = prepared(&config, data.as_deref())?;
            let dir = run_dir(&config, "pretrain");
            let ck = Checkpoint {
                config: config.clone(),
                model: prep.model.clone(),
                trainer: None,
            };
            save_state(&dir.join("model.ckpt"), &ck)?;
            println!("{}", dir.join("model.ckpt").display());
            write_file(&dir.join("config.toml"), &config.to_toml())?;
            let summary = serde_json::json!({
                "run_id": config.run_id(),
                "seed": config.seed(),
                "config_hash": config.hash(),
                "pretrain": prep.pretrain,
                "base_metrics": prep.base,
            });
            write_file(&dir.join("pretrain.json"), &serde_json::to_string_pretty(&summary).expect("json"))
        }
        Command::Train {
            mode,
            steps,
            iterations,
            data,
            model,
            resume,
        } => {
            let (mut config, base, state) = match resume {
                Some(path) => {
                    let ck = load_state(path)?;
                    let state = ck
                        .trainer
                        .ok_or_else(|| Error::config(format!("{} holds no training state", path.display())))?;
                    (ck.config, ck.model, Some(state))
                }
                None => {
                    let config = config.for_seed(config.seeds[0]);
                    let base = match model {
                        Some(path) => load_state(path)?.model,
                        None => prepared(&config, data.as_deref())?.model,
                    };
                    (config, base, None)
                }
            };
            if let Some(m) = mode {
                config.trainer.mode = m.parse()?;
            }
            if let Some(s) = steps {
                config.trainer.steps = *s;
            }
            if let Some(n) = iterations {
                config.trainer.iterations = *n;
            }
            config.validate()?;
            let corpus = with_corpus(&config, data.as_deref())?;
            let prep = Prepared::from_parts(&config, corpus, base)?;
            let mut trainer = match state {
                Some(mut s) => {
                    s.config.iterations = config.trainer.iterations;
                    Trainer::from_state(s, &prep.model, prep.train_split())?
                }
                None => Trainer::new(config.trainer.clone(), &prep.model, prep.train_split())?,
            };
            trainer.train()?;
            let dir = run_dir(&config, "train");
            let ck = Checkpoint {
                config: config.clone(),
                model: prep.model.clone(),
                trainer: Some(trainer.state()),
            };
            save_state(&dir.join("state.ckpt"), &ck)?;
            println!("{}", dir.join("state.ckpt").display());
            let mut log = Vec::new();
            write_log(&mut log, trainer.log()).map_err(|e| Error::io(&dir, e))?;
            write_file(&dir.join("train_log.jsonl"), &String::from_utf8(log).expect("utf-8"))?;
            write_file(&dir.join("config.toml"), &config.to_toml())?;
            if trainer.skipped_updates() > 0 {
                eprintln!("editlab: {} meta-updates skipped on non-finite gradients", trainer.skipped_updates());
            }
            Ok(())
        }
        Command::Edit { state, protocol, data } => {
            let ck = load_state(state)?;
            let mut config = ck.config.clone();
            if let Some(p) = protocol {
                config.eval.protocol = p.parse()?;
            }
            let ts = ck
                .trainer
                .ok_or_else(|| Error::config(format!("{} holds no trained hypernetworks", state.display())))?;
            let prep = Prepared::from_parts(&config, with_corpus(&config, data.as_deref())?, ck.model.clone())?;
            let editors = ts.editors;
            let plan = EditPlan {
                batch_size: config.eval.batch_size,
                steps: config.trainer.steps,
                aggregation: config.trainer.aggregation,
                protocol: config.eval.protocol,
            };
            let test = prep.test_split();
            let evaluation = edit_and_evaluate(&prep.model, editors.editors(), test, &plan)?;
            let dir = run_dir(&config, "edit");
            let mut deltas = String::from("batch,layer_id,step,frobenius_norm\n");
            let mut model = prep.model.clone();
            for (b, batch) in batch_split(test, plan.batch_size, test.len().div_ceil(plan.batch_size))?
                .into_iter()
                .enumerate()
            {
                if plan.protocol == EditProtocol::Batch {
                    model = prep.model.clone();
                }
                let pairs: Vec<&Pair> = batch.iter().map(|s| &s.edit).collect();
                let out = mbps_edit(&mut model, &pairs, editors.editors(), plan.steps, plan.aggregation)?;
                let mut buf = Vec::new();
                write_delta_csv(&mut buf, &out.deltas).map_err(|e| Error::io(&dir, e))?;
                for line in String::from_utf8(buf).expect("utf-8").lines().skip(1) {
                    deltas.push_str(&format!("{b},{line}\n"));
                }
            }
            write_file(&dir.join("deltas.csv"), &deltas)?;
            if plan.protocol == EditProtocol::Sequential {
                let edited = Checkpoint {
                    config: config.clone(),
                    model,
                    trainer: None,
                };
                save_state(&dir.join("edited.ckpt"), &edited)?;
                println!("{}", dir.join("edited.ckpt").display());
            }
            let rows = row_pair(&config, [evaluation.argmax, evaluation.prob]);
            announce(emit_report(&dir, &Report::new(rows, Vec::new(), Vec::new()))?);
            Ok(())
        }
        Command::Eval { model, data } => {
            let (config, prep, trainer) = match model {
                Some(path) => {
                    let ck = load_state(path)?;
                    let c = ck.config.clone();
                    let corpus = with_corpus(&c, data.as_deref())?;
                    let prep = Prepared::from_parts(&c, corpus, ck.model)?;
                    (c, prep, ck.trainer)
                }
                None => {
                    let c = config.for_seed(config.seeds[0]);
                    let prep = prepared(&c, data.as_deref())?;
                    (c, prep, None)
                }
            };
            let metrics = match trainer {
                Some(ts) => {
                    let plan = EditPlan {
                        batch_size: config.eval.batch_size,
                        steps: config.trainer.steps,
                        aggregation: config.trainer.aggregation,
                        protocol: config.eval.protocol,
                    };
                    let e = edit_and_evaluate(&prep.model, ts.editors.editors(), prep.test_split(), &plan)?;
                    [e.argmax, e.prob]
                }
                None => [
                    eval_argmax(&prep.model, prep.test_split())?,
                    eval_prob_compare(&prep.model, prep.test_split())?,
                ],
            };
            let dir = run_dir(&config, "eval");
            announce(emit_report(&dir, &Report::new(row_pair(&config, metrics), Vec::new(), Vec::new()))?);
            Ok(())
        }
        Command::Profile { modes, iterations } => {
            if let Some(n) = iterations {
                config.eval.profile_iterations = *n;
            }
            let config = config.for_seed(config.seeds[0]);
            let prep = prepare(&config)?;
            let mut rows = Vec::new();
            for mode in parse_modes(modes)? {
                let mut c = config.clone();
                c.trainer.mode = mode;
                c.validate()?;
                let mut t = Trainer::new(c.trainer.clone(), &prep.model, prep.train_split())?;
                let profile = profile_iteration(&mut t, c.eval.profile_iterations, c.eval.warmup)?;
                rows.push(ProfileRow {
                    run_id: c.run_id(),
                    profile,
                });
            }
            let dir = run_dir(&config, "profile");
            announce(emit_report(&dir, &Report::new(Vec::new(), rows, Vec::new()))?);
            Ok(())
        }
        Command::Sweep {
            steps,
            iterations,
            modes,
        } => {
            if steps.is_empty() && iterations.is_empty() {
                return Err(Error::config("sweep needs --steps and/or --iterations"));
            }
            config.validate()?;
            let mut rows = Vec::new();
            let mut failures = Vec::new();
            if !steps.is_empty() {
                let out = step_sweep(&config, steps)?;
                rows.extend(out.metrics_rows());
                failures.extend(out.failures);
            }
            if !iterations.is_empty() {
                let out = scarcity_sweep(&config, iterations, &parse_modes(modes)?)?;
                rows.extend(out.metrics_rows());
                failures.extend(out.failures);
            }
            let dir = config.out_root().join("sweep").join(&config.hash()[..12]);
            write_file(&dir.join("config.toml"), &config.to_toml())?;
            if !rows.is_empty() {
                announce(emit_report(&dir, &Report::new(rows, Vec::new(), Vec::new()))?);
            }
            if failures.is_empty() {
                return Ok(());
            }
            for (label, msg) in &failures {
                eprintln!("editlab: collapsed: {label}: {msg}");
            }
            Err(Error::numeric(format!("{} sweep configuration(s) collapsed", failures.len())))
        }
        Command::Compare { inputs, style, file } => {
            let tables = inputs
                .iter()
                .map(|p| {
                    fs::read_to_string(p)
                        .map(|t| (p.display().to_string(), t))
                        .map_err(|e| Error::io(p, e))
                })
                .collect::<Result<Vec<_>>>()?;
            let merged = compare_tables(&tables, style)?;
            match file {
                Some(path) => write_file(path, &merged),
                None => {
                    print!("{merged}");
                    Ok(())
                }
            }
        }
    }
}

fn row_pair(config: &ExperimentConfig, metrics: [crate::evalprof::EditMetrics; 2]) -> Vec<MetricsRow> {
    metrics
        .into_iter()
        .map(|m| MetricsRow {
            run_id: config.run_id(),
            mode: config.trainer.mode,
            steps: config.trainer.steps,
            seed: config.seed(),
            config_hash: config.hash(),
            metrics: m,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct_per_class() {
        let codes = [
            exit_code(&Error::config("x")),
            exit_code(&Error::Precondition("x".into())),
            exit_code(&Error::numeric("x")),
            exit_code(&Error::io("p", std::io::Error::other("x"))),
        ];
        assert_eq!(codes, [EXIT_USAGE, EXIT_PRECONDITION, EXIT_NUMERIC, EXIT_IO]);
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["editlab", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["editlab", "gen-data", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["editlab", "--help"]), EXIT_OK);
        assert_eq!(run(["editlab", "gen-data", "--set", "trainer.nope=1"]), EXIT_USAGE);
        assert_eq!(run(["editlab", "gen-data", "--preset", "giant"]), EXIT_USAGE);
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        let mut c = ExperimentConfig::preset(Preset::Trend);
        c.trainer.eta = 0.1;
        fs::write(&path, c.to_toml()).unwrap();
        let common = Common {
            config: Some(path),
            preset: None,
            set: vec!["trainer.eta=2.0".into()],
            seed: Some(7),
            out: Some(dir.path().into()),
        };
        let r = resolve_config(&common).unwrap();
        assert_eq!(r.trainer.eta, 2.0);
        assert_eq!(r.seeds, vec![7]);
        assert_eq!(r.corpus.n, 200);
        assert_eq!(r.out_root(), dir.path());
    }
}
