//! Losses, scores and single training steps for both players.
//!
//! * pairwise discriminator loss `-Σ log σ(h(x, y_H) - h(x, y_M))`
//! * inference score `σ(h)`, and the HvM/HvR geometric-mean ensemble
//! * mean-baseline rewards and the REINFORCE loss for the generator
//! * one attack step (generator), one defense step (HvM), HvR pre-training

use crate::corpus::{Corpus, Split, Utterance};
use crate::game::AdversarialDataset;
use crate::models::{Generator, Scorer};
use crate::numerics::{sgd_step, sigmoid, softplus, Gradient, OptimizerState, RngStream};
use crate::{Error, Result};

/// The decoding temperatures attackers draw from.
pub const DEFAULT_TEMPERATURES: [f64; 4] = [0.3, 1.0, 10.0, 100.0];
/// Hypotheses per context.
pub const DEFAULT_ROLLOUT_SIZE: usize = 8;

/// Anything that assigns a response a real-valued score given a context.
/// Higher means "more human".
pub trait Judge {
    fn judge(&self, context: &[Utterance], response: &Utterance) -> f64;
}

impl<F: Fn(&[Utterance], &Utterance) -> f64> Judge for F {
    fn judge(&self, context: &[Utterance], response: &Utterance) -> f64 {
        self(context, response)
    }
}

/// `s = σ(h_HvM)`, or `sqrt(σ(h_HvM) · σ(h_HvR))` when an HvR scorer is
/// attached.
#[derive(Clone, Copy)]
pub struct EnsembleScorer<'a> {
    pub hvm: &'a dyn Scorer,
    pub hvr: Option<&'a dyn Scorer>,
}

impl<'a> EnsembleScorer<'a> {
    pub fn new(hvm: &'a dyn Scorer, hvr: Option<&'a dyn Scorer>) -> Self {
        Self { hvm, hvr }
    }

    pub fn hvm_only(hvm: &'a dyn Scorer) -> Self {
        Self { hvm, hvr: None }
    }

    pub fn score(&self, context: &[Utterance], response: &Utterance) -> f64 {
        let s_hvm = sigmoid(self.hvm.score_h(context, response));
        match self.hvr {
            None => s_hvm,
            Some(hvr) => ensemble_score(s_hvm, sigmoid(hvr.score_h(context, response))),
        }
    }
}

impl Judge for EnsembleScorer<'_> {
    fn judge(&self, context: &[Utterance], response: &Utterance) -> f64 {
        self.score(context, response)
    }
}

/// Geometric mean of the two scorer outputs.
pub fn ensemble_score(s_hvm: f64, s_hvr: f64) -> f64 {
    (s_hvm * s_hvr).sqrt()
}

/// One `(x, y_H, y_M)` triple.
#[derive(Debug, Clone, Copy)]
pub struct Pair<'a> {
    pub context: &'a [Utterance],
    pub human: &'a Utterance,
    pub machine: &'a Utterance,
}

/// Pairwise loss for a batch, summed over pairs, and its gradient with
/// respect to the scorer's parameters.
pub fn sl_loss_and_grad(scorer: &dyn Scorer, batch: &[Pair<'_>]) -> Result<(f64, Gradient)> {
    if batch.is_empty() {
        return Err(Error::Data("empty pair batch".into()));
    }
    let mut grad = Gradient::zeros(scorer.params().len());
    let mut loss = 0.0;
    for pair in batch {
        let h_h = scorer.score_h(pair.context, pair.human);
        let h_m = scorer.score_h(pair.context, pair.machine);
        if !h_h.is_finite() || !h_m.is_finite() {
            return Err(Error::NonFinite("scorer output"));
        }
        let margin = h_h - h_m;
        loss += softplus(-margin);
        // d/dmargin softplus(-margin) = -σ(-margin)
        let w = -sigmoid(-margin);
        scorer.score_h_grad(pair.context, pair.human, w, &mut grad);
        scorer.score_h_grad(pair.context, pair.machine, -w, &mut grad);
    }
    Ok((loss, grad))
}

/// Pairwise loss only (no gradient).
pub fn sl_loss(scorer: &dyn Scorer, batch: &[Pair<'_>]) -> f64 {
    batch
        .iter()
        .map(|p| softplus(-(scorer.score_h(p.context, p.human) - scorer.score_h(p.context, p.machine))))
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub response: Utterance,
    pub temperature: f64,
    pub log_prob: f64,
    pub score: f64,
}

/// `n` sampled hypotheses for one context, tagged with the generator
/// parameter version their log-probs were computed at.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutSet {
    pub context: Vec<Utterance>,
    pub hypotheses: Vec<Hypothesis>,
    pub param_version: u64,
}

/// `R(y_i) = s(y_i|x) - b(x)` with `b(x)` the mean score of the rollout.
pub fn rewards(rollout: &RolloutSet) -> Result<Vec<f64>> {
    let scores: Vec<f64> = rollout.hypotheses.iter().map(|h| h.score).collect();
    baseline_rewards(&scores)
}

pub fn baseline_rewards(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.len() < 2 {
        return Err(Error::Data(format!("baseline needs at least 2 hypotheses, got {}", scores.len())));
    }
    // s_i - mean(s) written as the mean of pairwise differences: equal
    // scores give exact zeros and two scores give exactly opposite rewards
    let n = scores.len() as f64;
    Ok(scores.iter().map(|&si| scores.iter().map(|&sj| si - sj).sum::<f64>() / n).collect())
}

/// REINFORCE loss `-Σ_i log P(y_i|x) R(y_i)` and its gradient with the
/// rewards held constant.
pub fn rl_loss_and_grad(gen: &dyn Generator, rollout: &RolloutSet) -> Result<(f64, Gradient)> {
    let r = rewards(rollout)?;
    rl_loss_and_grad_with_rewards(gen, rollout, &r)
}

/// As [`rl_loss_and_grad`] with caller-supplied rewards (e.g. `b ≡ 0`).
pub fn rl_loss_and_grad_with_rewards(gen: &dyn Generator, rollout: &RolloutSet, rewards: &[f64]) -> Result<(f64, Gradient)> {
    let current = gen.params().version();
    if rollout.param_version != current {
        return Err(Error::StaleRollout { rollout: rollout.param_version, current });
    }
    if rewards.len() != rollout.hypotheses.len() {
        return Err(Error::Shape { expected: rollout.hypotheses.len(), got: rewards.len() });
    }
    let mut grad = Gradient::zeros(gen.params().len());
    let mut loss = 0.0;
    for (h, &r) in rollout.hypotheses.iter().zip(rewards) {
        loss -= h.log_prob * r;
        if r != 0.0 {
            gen.log_prob_grad(&rollout.context, &h.response, -r, &mut grad);
        }
    }
    Ok((loss, grad))
}

/// Samples `n` hypotheses for `context`, each at a temperature drawn
/// uniformly from `temperatures`, and scores them with `judge`.
pub fn sample_rollout(
    gen: &dyn Generator,
    judge: &dyn Judge,
    context: &[Utterance],
    n: usize,
    temperatures: &[f64],
    rng: &mut RngStream,
) -> RolloutSet {
    let hypotheses = (0..n)
        .map(|_| {
            let temperature = *rng.choose(temperatures);
            let response = gen.sample_response(context, temperature, rng);
            let log_prob = gen.log_prob(context, &response);
            let score = judge.judge(context, &response);
            Hypothesis { response, temperature, log_prob, score }
        })
        .collect();
    RolloutSet { context: context.to_vec(), hypotheses, param_version: gen.params().version() }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackStepMetrics {
    pub mean_score: f64,
    pub loss: f64,
}

/// One policy-gradient minibatch: a rollout per context, rewards from
/// `judge`, gradient averaged over contexts, clipped, one SGD step.
pub fn attack_step(
    gen: &mut dyn Generator,
    judge: &dyn Judge,
    contexts: &[&[Utterance]],
    n: usize,
    temperatures: &[f64],
    rng: &mut RngStream,
    opt: &mut OptimizerState,
    clip_norm: f64,
) -> Result<AttackStepMetrics> {
    if n < 2 {
        return Err(Error::Config(format!("rollout size must be ≥ 2, got {n}")));
    }
    if contexts.is_empty() {
        return Err(Error::Data("attack step needs at least one context".into()));
    }
    if temperatures.is_empty() || temperatures.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::Config("temperatures must be a non-empty list of positive reals".into()));
    }
    let mut grad = Gradient::zeros(gen.params().len());
    let mut loss = 0.0;
    let mut score_sum = 0.0;
    let inv = 1.0 / contexts.len() as f64;
    for ctx in contexts {
        let rollout = sample_rollout(&*gen, judge, ctx, n, temperatures, rng);
        score_sum += rollout.hypotheses.iter().map(|h| h.score).sum::<f64>();
        let (l, g) = rl_loss_and_grad(&*gen, &rollout)?;
        loss += l * inv;
        grad.add_scaled(&g, inv);
    }
    grad.clip_global_norm(clip_norm);
    sgd_step(gen.params_mut(), &grad, opt)?;
    Ok(AttackStepMetrics { mean_score: score_sum / (contexts.len() * n) as f64, loss })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefenseStepMetrics {
    /// Mean pairwise loss over the batch, before the update.
    pub loss: f64,
    /// How many batch items came from each pool entry.
    pub source_counts: Vec<usize>,
}

/// Index of the pool entry and item for a uniform draw over the union.
pub fn draw_from_union(sizes: &[usize], rng: &mut RngStream) -> (usize, usize) {
    let total: usize = sizes.iter().sum();
    let mut k = rng.below(total);
    for (i, &s) in sizes.iter().enumerate() {
        if k < s {
            return (i, k);
        }
        k -= s;
    }
    unreachable!("draw beyond union")
}

/// One supervised step for the HvM scorer: each batch item pairs a machine
/// response drawn uniformly from the union of `pool` with the human response
/// of the same dialogue.
pub fn defense_step(
    hvm: &mut dyn Scorer,
    corpus: &Corpus,
    pool: &[&AdversarialDataset],
    batch_size: usize,
    rng: &mut RngStream,
    opt: &mut OptimizerState,
    clip_norm: f64,
) -> Result<DefenseStepMetrics> {
    let sizes: Vec<usize> = pool.iter().map(|d| d.items.len()).collect();
    if sizes.iter().sum::<usize>() == 0 {
        return Err(Error::Data("defense step needs a non-empty adversarial pool".into()));
    }
    let mut source_counts = vec![0; pool.len()];
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..batch_size.max(1) {
        let (src, k) = draw_from_union(&sizes, rng);
        source_counts[src] += 1;
        let item = &pool[src].items[k];
        let d = &corpus.dialogues()[item.dialogue];
        batch.push(Pair { context: &d.context, human: &d.human_response, machine: &item.response });
    }
    let (loss, mut grad) = sl_loss_and_grad(&*hvm, &batch)?;
    let inv = 1.0 / batch.len() as f64;
    grad.values.iter_mut().for_each(|g| *g *= inv);
    grad.clip_global_norm(clip_norm);
    sgd_step(hvm.params_mut(), &grad, opt)?;
    Ok(DefenseStepMetrics { loss: loss * inv, source_counts })
}

/// Pairs for HvR training: each train dialogue's human response against the
/// human response of a different, uniformly chosen train dialogue.
pub fn random_negative_batch<'a>(
    train: &'a Corpus,
    batch_size: usize,
    rng: &mut RngStream,
) -> Result<Vec<Pair<'a>>> {
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let d = &train.dialogues()[rng.below(train.len())];
        let neg = train.sample_random_response(&d.id, rng)?;
        batch.push(Pair { context: &d.context, human: &d.human_response, machine: neg });
    }
    Ok(batch)
}

/// Trains the human-vs-random scorer with the pairwise loss, negatives
/// retrieved at random from the train split. Returns the per-step mean loss.
pub fn hvr_pretrain(
    hvr: &mut dyn Scorer,
    corpus: &Corpus,
    steps: usize,
    batch_size: usize,
    opt: &mut OptimizerState,
    rng: &mut RngStream,
    clip_norm: f64,
) -> Result<Vec<f64>> {
    let train = corpus.subset(Split::Train);
    if train.len() < 2 {
        return Err(Error::Data("HvR pre-training needs at least 2 train dialogues".into()));
    }
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let batch = random_negative_batch(&train, batch_size.max(1), rng)?;
        let (loss, mut grad) = sl_loss_and_grad(&*hvr, &batch)?;
        let inv = 1.0 / batch.len() as f64;
        grad.values.iter_mut().for_each(|g| *g *= inv);
        grad.clip_global_norm(clip_norm);
        sgd_step(hvr.params_mut(), &grad, opt)?;
        trace.push(loss * inv);
    }
    Ok(trace)
}
