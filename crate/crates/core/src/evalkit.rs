//! Attackers, pairwise accuracy and diversity metrics.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use crate::corpus::{Corpus, Dialogue, Split, TokenId, Utterance};
use crate::models::{Generator, TinyCondLM};
use crate::numerics::RngStream;
use crate::training::Judge;
use crate::{Error, Result};

/// Echoes one context turn, chosen uniformly, verbatim.
pub fn parrot_respond(dialogue: &Dialogue, rng: &mut RngStream) -> Utterance {
    rng.choose(&dialogue.context).clone()
}

pub type Triple<'a> = (&'a [Utterance], &'a Utterance, &'a Utterance);

/// Fraction of `(x, y_H, y_M)` triples where the human response scores
/// strictly higher. Ties count as failures.
pub fn pairwise_accuracy(judge: &dyn Judge, triples: &[Triple<'_>]) -> Result<f64> {
    if triples.is_empty() {
        return Err(Error::Data("pairwise accuracy of an empty set".into()));
    }
    let wins = triples.iter().filter(|(x, h, m)| judge.judge(x, h) > judge.judge(x, m)).count();
    Ok(wins as f64 / triples.len() as f64)
}

/// Thresholded alternative: mean of `[s(y_H) > t]` and `[s(y_M) < t]` over
/// triples, for judges whose output is a probability.
pub fn thresholded_accuracy(judge: &dyn Judge, triples: &[Triple<'_>], threshold: f64) -> Result<f64> {
    if triples.is_empty() {
        return Err(Error::Data("thresholded accuracy of an empty set".into()));
    }
    let hits: usize = triples
        .iter()
        .map(|(x, h, m)| (judge.judge(x, h) > threshold) as usize + (judge.judge(x, m) < threshold) as usize)
        .sum();
    Ok(hits as f64 / (2 * triples.len()) as f64)
}

/// `(distinct-1, distinct-2)`: unique n-grams over total n-grams across all
/// responses. Zero when there are no n-grams at all.
pub fn diversity_metrics(responses: &[Utterance]) -> (f64, f64) {
    (distinct_n(responses, 1), distinct_n(responses, 2))
}

pub fn distinct_n(responses: &[Utterance], n: usize) -> f64 {
    let mut seen: HashSet<&[TokenId]> = HashSet::new();
    let mut total = 0usize;
    for r in responses {
        for gram in r.tokens().windows(n) {
            seen.insert(gram);
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        seen.len() as f64 / total as f64
    }
}

/// Where an attacker's responses come from.
pub enum AttackerKind {
    /// A generator snapshot decoded at a fixed temperature
    /// (≤ 0.01 decodes greedily).
    Generator { model: TinyCondLM, temperature: f64 },
    Parrot,
    /// Precomputed responses keyed by dialogue id.
    External { responses: HashMap<String, Utterance> },
}

pub struct AttackerSpec {
    pub name: String,
    pub kind: AttackerKind,
}

impl AttackerSpec {
    pub fn parrot() -> Self {
        Self { name: "parrot".into(), kind: AttackerKind::Parrot }
    }

    pub fn generator(name: impl Into<String>, model: TinyCondLM, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("attacker temperature must be positive, got {temperature}")));
        }
        Ok(Self { name: name.into(), kind: AttackerKind::Generator { model, temperature } })
    }

    pub fn external(name: impl Into<String>, responses: HashMap<String, Utterance>) -> Self {
        Self { name: name.into(), kind: AttackerKind::External { responses } }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub attacker: String,
    pub n_eval: usize,
    pub accuracy: f64,
    pub distinct1: f64,
    pub distinct2: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn row(&self, attacker: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.attacker == attacker)
    }

    /// CSV with header `attacker,n_eval,accuracy,distinct1,distinct2`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        out.write_record(["attacker", "n_eval", "accuracy", "distinct1", "distinct2"])?;
        for r in &self.rows {
            out.write_record([
                r.attacker.clone(),
                r.n_eval.to_string(),
                format!("{:.6}", r.accuracy),
                format!("{:.6}", r.distinct1),
                format!("{:.6}", r.distinct2),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Responses of one attacker on the given dialogues, paired with the
/// dialogue index. External attackers skip ids they do not cover.
pub fn attacker_responses(
    attacker: &AttackerSpec,
    corpus: &Corpus,
    indices: &[usize],
    rng: &mut RngStream,
) -> Result<Vec<(usize, Utterance)>> {
    let mut out = Vec::with_capacity(indices.len());
    match &attacker.kind {
        AttackerKind::Generator { model, temperature } => {
            for &i in indices {
                out.push((i, model.sample_response(&corpus.dialogues()[i].context, *temperature, rng)));
            }
        }
        AttackerKind::Parrot => {
            for &i in indices {
                out.push((i, parrot_respond(&corpus.dialogues()[i], rng)));
            }
        }
        AttackerKind::External { responses } => {
            let mut missing = 0usize;
            for &i in indices {
                match responses.get(&corpus.dialogues()[i].id) {
                    Some(r) => out.push((i, r.clone())),
                    None => missing += 1,
                }
            }
            if missing > 0 {
                log::warn!("attacker {}: {missing} of {} eval ids missing, skipped", attacker.name, indices.len());
            }
            if out.len() * 2 < indices.len() {
                return Err(Error::Data(format!(
                    "external attacker {} covers {} of {} eval dialogues (< 50%)",
                    attacker.name,
                    out.len(),
                    indices.len()
                )));
            }
        }
    }
    Ok(out)
}

/// Accuracy and diversity of every attacker against `judge` on the eval
/// split. Attacker `k` draws from the `k`-th fork of `rng`, so rows do not
/// depend on each other.
pub fn evaluate_attackers(
    judge: &dyn Judge,
    corpus: &Corpus,
    attackers: &[AttackerSpec],
    rng: &RngStream,
) -> Result<EvalReport> {
    let eval = corpus.split_indices(Split::Eval);
    if eval.is_empty() {
        return Err(Error::Data("eval split is empty".into()));
    }
    let mut rows = Vec::with_capacity(attackers.len());
    for (k, attacker) in attackers.iter().enumerate() {
        let mut arng = rng.fork(k as u64);
        let responses = attacker_responses(attacker, corpus, &eval, &mut arng)?;
        let triples: Vec<Triple> = responses
            .iter()
            .map(|(i, r)| {
                let d = &corpus.dialogues()[*i];
                (&d.context[..], &d.human_response, r)
            })
            .collect();
        let accuracy = pairwise_accuracy(judge, &triples)?;
        let n_eval = triples.len();
        drop(triples);
        let just: Vec<Utterance> = responses.into_iter().map(|(_, r)| r).collect();
        let (distinct1, distinct2) = diversity_metrics(&just);
        rows.push(EvalRow { attacker: attacker.name.clone(), n_eval, accuracy, distinct1, distinct2 });
    }
    Ok(EvalReport { rows })
}
