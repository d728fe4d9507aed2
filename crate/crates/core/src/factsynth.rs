//! Synthetic fact-editing corpus.
//!
//! Facts are `(subject, relation) → object` triples over integer tokens. A
//! subject is a set of `subject_len` tokens, a relation has several surface
//! tokens (synonyms), and prompt templates place filler tokens around them.
//! Each edit sample rewrites one fact to a new object, carries paraphrased
//! prompts of the same fact, and unrelated facts built from a disjoint pool
//! of subject tokens.
//!
//! File format (line-delimited JSON): a header line
//! `{"schema":"editlab.corpus","version":1,...}` followed by one record per
//! sample with fields `edit`, `equivalents`, `unrelated`, `old_answer`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::SeededRng;
use crate::toylm::{Pair, Token};

pub const CORPUS_SCHEMA: &str = "editlab.corpus";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub vocab_size: usize,
    pub seed: u64,
    pub n_relations: usize,
    pub synonyms: usize,
    pub n_fillers: usize,
    pub n_objects: usize,
    pub subject_len: usize,
    /// Slot patterns: `S` subject tokens, `R` a relation synonym, `F` a filler.
    /// The first template is the canonical edit/unrelated prompt.
    pub templates: Vec<String>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n: 200,
            m: 2,
            p: 2,
            vocab_size: 64,
            seed: 0,
            n_relations: 2,
            synonyms: 3,
            n_fillers: 4,
            n_objects: 16,
            subject_len: 2,
            templates: vec!["S R".into(), "F S R".into(), "S F R".into(), "R S F".into()],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Subject,
    Relation,
    Filler,
}

fn parse_template(t: &str) -> Result<Vec<Slot>> {
    let slots = t
        .split_whitespace()
        .map(|s| match s {
            "S" => Ok(Slot::Subject),
            "R" => Ok(Slot::Relation),
            "F" => Ok(Slot::Filler),
            other => Err(Error::config(format!("unknown template slot '{other}' in '{t}'"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let count = |k| slots.iter().filter(|&&s| s == k).count();
    if count(Slot::Subject) != 1 || count(Slot::Relation) != 1 {
        return Err(Error::config(format!(
            "template '{t}' needs exactly one S and one R slot"
        )));
    }
    Ok(slots)
}

/// Token ranges of the vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabLayout {
    pub fillers: std::ops::Range<Token>,
    pub relations: std::ops::Range<Token>,
    pub objects: std::ops::Range<Token>,
    pub edit_subjects: std::ops::Range<Token>,
    pub unrelated_subjects: std::ops::Range<Token>,
}

fn choose(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let mut acc: usize = 1;
    for i in 0..k {
        acc = acc.saturating_mul(n - i) / (i + 1);
    }
    acc
}

impl VocabLayout {
    pub fn for_config(cfg: &CorpusConfig) -> Result<Self> {
        let fixed = cfg.n_fillers + cfg.n_relations * cfg.synonyms + cfg.n_objects;
        if cfg.n_objects < 2 {
            return Err(Error::config("need at least two objects so edits can change answers"));
        }
        if cfg.n_relations == 0 || cfg.synonyms == 0 || cfg.subject_len == 0 {
            return Err(Error::config("relations, synonyms and subject length must be positive"));
        }
        let subjects = cfg.vocab_size.checked_sub(fixed).ok_or_else(|| {
            Error::Capacity(format!(
                "vocabulary of {} cannot hold {fixed} filler/relation/object tokens",
                cfg.vocab_size
            ))
        })?;
        let per_subject = cfg.n_relations;
        let mut edit_tokens = cfg.subject_len;
        while choose(edit_tokens, cfg.subject_len) * per_subject < cfg.n {
            edit_tokens += 1;
            if edit_tokens > subjects {
                return Err(Error::Capacity(format!(
                    "vocabulary of {} cannot host {} distinct edit facts",
                    cfg.vocab_size, cfg.n
                )));
            }
        }
        if subjects < edit_tokens + cfg.subject_len {
            return Err(Error::Capacity(format!(
                "vocabulary of {} leaves no subject tokens for unrelated facts",
                cfg.vocab_size
            )));
        }
        let mut next = 0 as Token;
        let mut take = |k: usize| {
            let r = next..next + k as Token;
            next += k as Token;
            r
        };
        Ok(VocabLayout {
            fillers: take(cfg.n_fillers),
            relations: take(cfg.n_relations * cfg.synonyms),
            objects: take(cfg.n_objects),
            edit_subjects: take(edit_tokens),
            unrelated_subjects: take(subjects - edit_tokens),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditSample {
    pub edit: Pair,
    pub equivalents: Vec<Pair>,
    pub unrelated: Vec<Pair>,
    pub old_answer: Vec<Token>,
}

impl EditSample {
    /// The edit prompt paired with its pre-edit answer.
    pub fn old_pair(&self) -> Pair {
        Pair::new(self.edit.prompt.clone(), self.old_answer.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditCorpus {
    pub seed: u64,
    pub vocab_size: usize,
    pub config: CorpusConfig,
    pub samples: Vec<EditSample>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
    seed: u64,
    vocab_size: usize,
    config: CorpusConfig,
    samples: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Fact {
    subject: Vec<Token>,
    relation: usize,
}

struct Generator<'a> {
    cfg: &'a CorpusConfig,
    layout: VocabLayout,
    templates: Vec<Vec<Slot>>,
    rng: SeededRng,
}

impl Generator<'_> {
    fn prompt(&mut self, fact: &Fact, template: usize, synonym: usize, shuffle_subject: bool) -> Vec<Token> {
        let mut subject = fact.subject.clone();
        if shuffle_subject {
            self.rng.shuffle(&mut subject);
        }
        let slots = self.templates[template].clone();
        let mut out = Vec::new();
        for slot in slots {
            match slot {
                Slot::Subject => out.extend_from_slice(&subject),
                Slot::Relation => out.push(
                    self.layout.relations.start + (fact.relation * self.cfg.synonyms + synonym) as Token,
                ),
                Slot::Filler => {
                    let k = self.rng.below(self.layout.fillers.len());
                    out.push(self.layout.fillers.start + k as Token);
                }
            }
        }
        out
    }

    fn object(&mut self) -> Token {
        self.layout.objects.start + self.rng.below(self.layout.objects.len()) as Token
    }

    fn object_except(&mut self, old: Token) -> Token {
        let k = self.rng.below(self.layout.objects.len() - 1) as Token;
        let candidate = self.layout.objects.start + k;
        if candidate >= old {
            candidate + 1
        } else {
            candidate
        }
    }

    fn all_facts(&self, tokens: std::ops::Range<Token>) -> Vec<Fact> {
        let pool: Vec<Token> = tokens.collect();
        let mut subjects = Vec::new();
        combinations(&pool, self.cfg.subject_len, &mut Vec::new(), 0, &mut subjects);
        let mut facts = Vec::new();
        for s in subjects {
            for r in 0..self.cfg.n_relations {
                facts.push(Fact {
                    subject: s.clone(),
                    relation: r,
                });
            }
        }
        facts
    }
}

fn combinations(pool: &[Token], k: usize, cur: &mut Vec<Token>, start: usize, out: &mut Vec<Vec<Token>>) {
    if cur.len() == k {
        out.push(cur.clone());
        return;
    }
    for i in start..pool.len() {
        cur.push(pool[i]);
        combinations(pool, k, cur, i + 1, out);
        cur.pop();
    }
}

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<EditCorpus> {
    if cfg.n == 0 || cfg.m == 0 || cfg.p == 0 {
        return Err(Error::config("n, m and p must all be at least 1"));
    }
    if cfg.templates.is_empty() {
        return Err(Error::config("at least one prompt template is required"));
    }
    let templates = cfg
        .templates
        .iter()
        .map(|t| parse_template(t))
        .collect::<Result<Vec<_>>>()?;
    let layout = VocabLayout::for_config(cfg)?;
    let mut gen = Generator {
        cfg,
        layout: layout.clone(),
        templates,
        rng: SeededRng::derive(cfg.seed, 0xfac7),
    };

    let mut edit_facts = gen.all_facts(layout.edit_subjects.clone());
    gen.rng.shuffle(&mut edit_facts);
    edit_facts.truncate(cfg.n);

    let mut unrelated_facts = gen.all_facts(layout.unrelated_subjects.clone());
    gen.rng.shuffle(&mut unrelated_facts);
    let pool_size = unrelated_facts.len().min((cfg.n / 2).max(cfg.p).max(cfg.p * 4));
    if pool_size < cfg.p {
        return Err(Error::Capacity(format!(
            "only {} unrelated facts available, {} needed per sample",
            unrelated_facts.len(),
            cfg.p
        )));
    }
    unrelated_facts.truncate(pool_size);
    let unrelated: Vec<Pair> = unrelated_facts
        .iter()
        .map(|f| {
            let x = gen.prompt(f, 0, 0, false);
            let y = vec![gen.object()];
            Pair::new(x, y)
        })
        .collect();

    let n_templates = gen.templates.len();
    let mut samples = Vec::with_capacity(cfg.n);
    for fact in &edit_facts {
        let x = gen.prompt(fact, 0, 0, false);
        let old = gen.object();
        let new = gen.object_except(old);
        let mut equivalents = Vec::with_capacity(cfg.m);
        for i in 0..cfg.m {
            let template = if n_templates > 1 { 1 + i % (n_templates - 1) } else { 0 };
            let synonym = if cfg.synonyms > 1 { 1 + i % (cfg.synonyms - 1) } else { 0 };
            let xe = gen.prompt(fact, template, synonym, cfg.subject_len > 1);
            equivalents.push(Pair::new(xe, vec![new]));
        }
        let eligible: Vec<usize> = (0..unrelated.len())
            .filter(|&i| unrelated[i].answer[0] != new)
            .collect();
        if eligible.len() < cfg.p {
            return Err(Error::Capacity(
                "not enough unrelated facts whose answer differs from the edit target".into(),
            ));
        }
        let mut picks = eligible;
        gen.rng.shuffle(&mut picks);
        let chosen = picks[..cfg.p].iter().map(|&i| unrelated[i].clone()).collect();
        samples.push(EditSample {
            edit: Pair::new(x, vec![new]),
            equivalents,
            unrelated: chosen,
            old_answer: vec![old],
        });
    }

    Ok(EditCorpus {
        seed: cfg.seed,
        vocab_size: cfg.vocab_size,
        config: cfg.clone(),
        samples,
    })
}

impl EditCorpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// First `k` samples and the rest.
    pub fn split(&self, k: usize) -> Result<(&[EditSample], &[EditSample])> {
        if k > self.samples.len() {
            return Err(Error::Capacity(format!(
                "cannot split {} samples at {k}",
                self.samples.len()
            )));
        }
        Ok(self.samples.split_at(k))
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header = Header {
            schema: CORPUS_SCHEMA.into(),
            version: CORPUS_VERSION,
            seed: self.seed,
            vocab_size: self.vocab_size,
            config: self.config.clone(),
            samples: self.samples.len(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for s in &self.samples {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::format("corpus", "empty file"))?
            .map_err(|e| Error::format("corpus", e))?;
        let header: Header = serde_json::from_str(&first).map_err(|e| Error::format("corpus header", e))?;
        if header.schema != CORPUS_SCHEMA {
            return Err(Error::format("corpus", format!("unexpected schema '{}'", header.schema)));
        }
        if header.version != CORPUS_VERSION {
            return Err(Error::Version {
                what: "corpus".into(),
                found: header.version,
                expected: CORPUS_VERSION,
            });
        }
        let mut samples = Vec::with_capacity(header.samples);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::format("corpus", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let s: EditSample = serde_json::from_str(&line)
                .map_err(|e| Error::format("corpus", format!("record {}: {e}", i + 1)))?;
            samples.push(s);
        }
        if samples.len() != header.samples {
            return Err(Error::format(
                "corpus",
                format!("header announces {} samples, found {}", header.samples, samples.len()),
            ));
        }
        Ok(EditCorpus {
            seed: header.seed,
            vocab_size: header.vocab_size,
            config: header.config,
            samples,
        })
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        EditCorpus::read_jsonl(text.as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        EditCorpus::read_jsonl(std::io::BufReader::new(file))
    }
}

/// `n_seq` consecutive, disjoint batches of `batch_size` items in corpus order.
pub fn batch_split<T>(items: &[T], batch_size: usize, n_seq: usize) -> Result<Vec<&[T]>> {
    if batch_size == 0 || n_seq == 0 {
        return Err(Error::config("batch size and sequence length must be positive"));
    }
    let needed = batch_size
        .checked_mul(n_seq)
        .ok_or_else(|| Error::Capacity("batch request overflows".into()))?;
    if needed > items.len() {
        return Err(Error::Capacity(format!(
            "{n_seq} batches of {batch_size} need {needed} samples, corpus has {}",
            items.len()
        )));
    }
    Ok(items[..needed].chunks(batch_size).collect())
}

/// Every prompt the base model should answer with pre-edit knowledge: edit
/// prompts and their paraphrases with the old answer, unrelated prompts with
/// their ground truth. Duplicate prompts are kept once.
pub fn pretrain_corpus(corpus: &EditCorpus) -> Vec<Pair> {
    let mut seen: BTreeMap<Vec<Token>, Vec<Token>> = BTreeMap::new();
    let mut out = Vec::new();
    let mut push = |p: Pair| {
        if seen.insert(p.prompt.clone(), p.answer.clone()).is_none() {
            out.push(p);
        }
    };
    for s in &corpus.samples {
        push(s.old_pair());
        for e in &s.equivalents {
            push(Pair::new(e.prompt.clone(), s.old_answer.clone()));
        }
    }
    for s in &corpus.samples {
        for u in &s.unrelated {
            push(u.clone());
        }
    }
    out
}

/// Subject tokens of a prompt, i.e. tokens outside the filler/relation/object ranges.
pub fn subject_tokens(layout: &VocabLayout, prompt: &[Token]) -> BTreeSet<Token> {
    prompt
        .iter()
        .copied()
        .filter(|t| layout.edit_subjects.contains(t) || layout.unrelated_subjects.contains(t))
        .collect()
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn serialization_round_trips(n in 1usize..40, m in 1usize..4, p in 1usize..4, seed in any::<u64>()) {
            let c = generate_corpus(&CorpusConfig { n, m, p, seed, ..CorpusConfig::default() }).unwrap();
            prop_assert_eq!(EditCorpus::from_jsonl(&c.to_jsonl()).unwrap(), c);
        }

        #[test]
        fn edits_always_change_the_answer(n in 1usize..60, seed in any::<u64>()) {
            let c = generate_corpus(&CorpusConfig { n, seed, ..CorpusConfig::default() }).unwrap();
            for s in &c.samples {
                prop_assert_ne!(&s.edit.answer, &s.old_answer);
                prop_assert!(s.edit.answer.iter().all(|&t| (t as usize) < c.vocab_size));
            }
        }
    }
}
