use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::evalprof::{check_base_specificity, edit_and_evaluate, EditEvaluation, EditMetrics, EditPlan, MetricsRow};
use crate::factsynth::{generate_corpus, pretrain_corpus, EditCorpus, EditSample};
use crate::metatrain::{LogRecord, Trainer, TrainerConfig, TrainerMode, TrainerState};
use crate::toylm::{pretrain, PretrainReport, ToyModel};

use super::ExperimentConfig;

/// Corpus and pretrained base model for one seed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub corpus: EditCorpus,
    pub model: ToyModel,
    pub pretrain: Option<PretrainReport>,
    pub base: EditMetrics,
}

impl Prepared {
    pub fn train_split(&self) -> &[EditSample] {
        &self.corpus.samples[..self.config.eval.n_train]
    }

    pub fn test_split(&self) -> &[EditSample] {
        &self.corpus.samples[self.config.eval.n_train..]
    }

    /// Uses an existing corpus and base model instead of generating them.
    pub fn from_parts(config: &ExperimentConfig, corpus: EditCorpus, model: ToyModel) -> Result<Self> {
        config.validate()?;
        if corpus.len() <= config.eval.n_train {
            return Err(Error::config(format!(
                "corpus has {} samples, eval.n_train is {}",
                corpus.len(),
                config.eval.n_train
            )));
        }
        if corpus.vocab_size != model.config().vocab_size {
            return Err(Error::config("corpus and model vocabularies differ"));
        }
        let base = check_base_specificity(&model, &corpus.samples, config.eval.specificity_floor)?;
        Ok(Prepared {
            config: config.clone(),
            corpus,
            model,
            pretrain: None,
            base,
        })
    }
}

/// Generates the corpus, pretrains the base model and checks that it knows
/// the unrelated facts. `config` must name a single seed.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    if config.seeds.len() != 1 {
        return Err(Error::config("prepare expects a single-seed config"));
    }
    let config = config.for_seed(config.seed());
    config.validate()?;
    let corpus = generate_corpus(&config.corpus)?;
    let mut model = ToyModel::new(config.model.clone())?;
    let report = pretrain(&mut model, &pretrain_corpus(&corpus), &config.pretrain)?;
    let mut prep = Prepared::from_parts(&config, corpus, model)?;
    prep.pretrain = Some(report);
    Ok(prep)
}

/// One meta-training run followed by editing of the held-out split.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub config: ExperimentConfig,
    pub run_id: String,
    pub evaluation: EditEvaluation,
    pub log: Vec<LogRecord>,
    pub state: TrainerState,
}

impl RunOutcome {
    pub fn mode(&self) -> TrainerMode {
        self.config.trainer.mode
    }

    pub fn steps(&self) -> usize {
        self.config.trainer.steps
    }

    /// One row per metric style.
    pub fn metrics_rows(&self) -> Vec<MetricsRow> {
        [self.evaluation.argmax, self.evaluation.prob]
            .into_iter()
            .map(|metrics| MetricsRow {
                run_id: self.run_id.clone(),
                mode: self.mode(),
                steps: self.steps(),
                seed: self.config.seed(),
                config_hash: self.config.hash(),
                metrics,
            })
            .collect()
    }
}

fn evaluate_trainer(prep: &Prepared, config: &ExperimentConfig, trainer: &Trainer) -> Result<RunOutcome> {
    let plan = EditPlan {
        batch_size: config.eval.batch_size,
        steps: config.trainer.steps,
        aggregation: config.trainer.aggregation,
        protocol: config.eval.protocol,
    };
    let evaluation = edit_and_evaluate(&prep.model, trainer.editors().editors(), prep.test_split(), &plan)?;
    Ok(RunOutcome {
        run_id: config.run_id(),
        config: config.clone(),
        evaluation,
        log: trainer.log().to_vec(),
        state: trainer.state(),
    })
}

/// Meta-trains with `trainer` settings on the prepared seed and evaluates.
pub fn run_prepared(prep: &Prepared, trainer: &TrainerConfig) -> Result<RunOutcome> {
    let mut config = prep.config.clone();
    config.trainer = TrainerConfig {
        seed: config.seed(),
        ..trainer.clone()
    };
    config.validate()?;
    let mut t = Trainer::new(config.trainer.clone(), &prep.model, prep.train_split())?;
    t.train()?;
    evaluate_trainer(prep, &config, &t)
}

/// Completed runs plus the configurations that collapsed numerically.
#[derive(Clone, Debug, Default)]
pub struct SweepOutcome {
    pub runs: Vec<RunOutcome>,
    pub failures: Vec<(String, String)>,
}

impl SweepOutcome {
    pub fn metrics_rows(&self) -> Vec<MetricsRow> {
        self.runs.iter().flat_map(RunOutcome::metrics_rows).collect()
    }

    fn absorb(&mut self, label: String, out: Result<RunOutcome>) -> Result<()> {
        match out {
            Ok(r) => self.runs.push(r),
            Err(Error::Numeric(msg)) => {
                log::warn!("{label}: {msg}");
                self.failures.push((label, msg));
            }
            Err(e) => return Err(e),
        }
        Ok(())
    }
}

/// Every step count for every seed, all other settings fixed.
pub fn step_sweep(config: &ExperimentConfig, steps: &[usize]) -> Result<SweepOutcome> {
    let mut out = SweepOutcome::default();
    for &seed in &config.seeds {
        let prep = prepare(&config.for_seed(seed))?;
        for &s in steps {
            let trainer = TrainerConfig {
                steps: s,
                ..config.trainer.clone()
            };
            out.absorb(format!("{} S={s} seed={seed}", trainer.mode), run_prepared(&prep, &trainer))?;
        }
    }
    Ok(out)
}

/// Evaluates each mode after each of the given (increasing) iteration counts.
/// Shorter budgets are prefixes of one run, so budgets differ only in data seen.
pub fn scarcity_sweep(config: &ExperimentConfig, iterations: &[usize], modes: &[TrainerMode]) -> Result<SweepOutcome> {
    if iterations.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("iteration budgets must be strictly increasing"));
    }
    let mut out = SweepOutcome::default();
    for &seed in &config.seeds {
        let prep = prepare(&config.for_seed(seed))?;
        for &mode in modes {
            let mut c = prep.config.clone();
            c.trainer.mode = mode;
            c.validate()?;
            let mut t = Trainer::new(c.trainer.clone(), &prep.model, prep.train_split())?;
            for &n in iterations {
                c.trainer.iterations = n;
                let label = format!("{mode} iterations={n} seed={seed}");
                let res = t.run(n - t.iteration()).and_then(|_| evaluate_trainer(&prep, &c, &t));
                if matches!(res, Err(Error::Numeric(_))) {
                    out.absorb(label, res)?;
                    break;
                }
                out.absorb(label, res)?;
            }
        }
    }
    Ok(out)
}

fn parse_csv(name: &str, text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::format(name, "empty file"))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .enumerate()
        .map(|(i, l)| {
            let cells: Vec<String> = l.split(',').map(str::to_string).collect();
            if cells.len() == header.len() {
                Ok(cells)
            } else {
                Err(Error::format(name, format!("row {} has {} cells, expected {}", i + 1, cells.len(), header.len())))
            }
        })
        .collect::<Result<_>>()?;
    Ok((header, rows))
}

/// Joins metrics tables on `(mode, S, seed)` for one metric style. Each input
/// contributes `eff`, `gen` and `spe` columns suffixed with its position.
pub fn compare_tables(inputs: &[(String, String)], style: &str) -> Result<String> {
    type Key = (String, usize, u64);
    let mut table: BTreeMap<Key, Vec<Option<[String; 3]>>> = BTreeMap::new();
    for (k, (name, text)) in inputs.iter().enumerate() {
        let (header, rows) = parse_csv(name, text)?;
        let col = |c: &str| {
            header
                .iter()
                .position(|h| h == c)
                .ok_or_else(|| Error::format(name.as_str(), format!("missing column '{c}'")))
        };
        let [mode, s, seed, eff, gen, spe, sty] = ["mode", "S", "seed", "eff", "gen", "spe", "style"].map(col);
        let (mode, s, seed, eff, gen, spe, sty) = (mode?, s?, seed?, eff?, gen?, spe?, sty?);
        for row in rows {
            if row[sty] != style {
                continue;
            }
            let num = |i: usize| row[i].parse().map_err(|_| Error::format(name.as_str(), format!("bad number '{}'", row[i])));
            let key = (row[mode].clone(), num(s)? as usize, num(seed)?);
            let slot = table.entry(key).or_insert_with(|| vec![None; inputs.len()]);
            slot[k] = Some([row[eff].clone(), row[gen].clone(), row[spe].clone()]);
        }
    }
    let mut out = String::from("mode,S,seed");
    for k in 0..inputs.len() {
        let _ = write!(out, ",eff_{k},gen_{k},spe_{k}");
    }
    out.push('\n');
    for ((mode, s, seed), cells) in &table {
        let _ = write!(out, "{mode},{s},{seed}");
        for c in cells {
            match c {
                Some([a, b, d]) => {
                    let _ = write!(out, ",{a},{b},{d}");
                }
                None => out.push_str(",,,"),
            }
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalprof::metrics_csv;
    use crate::harness::Preset;

    fn desk() -> ExperimentConfig {
        let mut c = ExperimentConfig::preset(Preset::Desk);
        c.trainer.iterations = 3;
        c
    }

    #[test]
    fn prepare_meets_the_specificity_floor() {
        let prep = prepare(&desk()).unwrap();
        assert!(prep.base.specificity >= 0.99);
        assert_eq!(prep.train_split().len(), 30);
        assert_eq!(prep.test_split().len(), 10);
        assert!(prepare(&ExperimentConfig { seeds: vec![1, 2], ..desk() }).is_err());
    }

    #[test]
    fn step_sweep_yields_a_row_pair_per_step() {
        let out = step_sweep(&desk(), &[1, 2]).unwrap();
        assert_eq!(out.runs.len(), 2);
        assert!(out.failures.is_empty());
        let rows = out.metrics_rows();
        assert_eq!(rows.len(), 4);
        assert_ne!(rows[0].run_id, rows[2].run_id);
    }

    #[test]
    fn scarcity_budgets_are_prefixes() {
        let c = desk();
        let out = scarcity_sweep(&c, &[2, 4], &[TrainerMode::SmeditBatch]).unwrap();
        assert_eq!(out.runs.len(), 2);
        let prep = prepare(&c).unwrap();
        let direct = run_prepared(&prep, &TrainerConfig { iterations: 4, ..c.trainer.clone() }).unwrap();
        assert_eq!(direct.evaluation, out.runs[1].evaluation);
        assert!(scarcity_sweep(&c, &[4, 2], &[TrainerMode::SmeditBatch]).is_err());
    }

    #[test]
    fn compare_joins_on_mode_steps_seed() {
        let out = step_sweep(&desk(), &[1]).unwrap();
        let a = metrics_csv(&out.metrics_rows());
        let b = "run_id,mode,S,eff,gen,spe,n,style,seed,config_hash\nx,smedit_batch,1,0.5,0.25,1,10,argmax_exact,0,h\ny,baseline_kl,1,0.1,0.2,0.3,10,argmax_exact,0,h\n";
        let merged = compare_tables(&[("a".into(), a), ("b".into(), b.into())], "argmax_exact").unwrap();
        let lines: Vec<&str> = merged.lines().collect();
        assert_eq!(lines[0], "mode,S,seed,eff_0,gen_0,spe_0,eff_1,gen_1,spe_1");
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "baseline_kl,1,0,,,,0.1,0.2,0.3");
        assert!(lines[2].starts_with("smedit_batch,1,0,") && lines[2].ends_with(",0.5,0.25,1"));
        assert!(compare_tables(&[("bad".into(), "mode,S\nx".into())], "argmax_exact").is_err());
    }
}
