//! The iterative attack-defense game.
//!
//! Each turn starts with an attack phase (policy-gradient training of a
//! generator against the current discriminator, stopped when the
//! discriminator's validation accuracy drops below `c_low` or after `N_G`
//! steps), harvests the attacker's outputs as a new adversarial dataset, then
//! runs a defense phase (supervised training of HvM on the adversarial pool
//! until every pooled dataset is above `c_hi` or after `N_D` steps). The game
//! ends once the post-attack accuracy, minimised over the pool, stays above
//! `c_hi` for `m` consecutive turns.
//!
//! The state machine ([`attack_phase`], [`defense_phase`], [`run_game`]) is
//! generic over [`Arena`], which owns the players. [`TinyArena`] is the real
//! implementation on the reference models.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use crate::corpus::{Corpus, Split, Utterance};
use crate::evalkit::{pairwise_accuracy, Triple};
use crate::models::{mle_pretrain, Generator, Scorer, TinyCondLM, TinyScorer};
use crate::numerics::{OptimizerState, ParamVector, RngStream};
use crate::training::{attack_step, defense_step, hvr_pretrain, EnsembleScorer, Judge, DEFAULT_TEMPERATURES};
use crate::{Error, Result};

/// Game variant.
///
/// * `Att`: generator re-initialised every turn, defense on the whole pool,
///   HvM·HvR ensemble, temperature diversification.
/// * `Gan`: no re-initialisation, defense pool restricted to `{A(0), latest}`.
/// * `Nd`: like `Att` but HvM alone and a fixed decoding temperature of 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Att,
    Gan,
    Nd,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Att => "ATT",
            Mode::Gan => "GAN",
            Mode::Nd => "ND",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ATT" => Ok(Mode::Att),
            "GAN" => Ok(Mode::Gan),
            "ND" => Ok(Mode::Nd),
            other => Err(Error::Config(format!("unknown mode {other:?} (expected ATT, GAN or ND)"))),
        }
    }
}

impl Mode {
    pub fn reinitializes_generator(self) -> bool {
        !matches!(self, Mode::Gan)
    }

    pub fn uses_hvr(self) -> bool {
        !matches!(self, Mode::Nd)
    }

    /// Indices of the datasets the defender trains and checks on, given a
    /// pool of `pool_len` datasets.
    pub fn defense_pool(self, pool_len: usize) -> Vec<usize> {
        match self {
            Mode::Gan if pool_len > 1 => vec![0, pool_len - 1],
            _ => (0..pool_len).collect(),
        }
    }
}

/// Model sizes, optimiser settings and pre-training budgets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub dim: usize,
    pub hidden: usize,
    /// Learning rate of MLE pre-training.
    pub mle_lr: f64,
    /// Learning rate of attack steps.
    pub gen_lr: f64,
    pub gen_momentum: f64,
    pub disc_lr: f64,
    pub disc_momentum: f64,
    pub clip_norm: f64,
    pub mle_epochs: usize,
    pub mle_batch: usize,
    pub hvr_steps: usize,
    pub attack_batch: usize,
    pub defense_batch: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            dim: TinyCondLM::DEFAULT_DIM,
            hidden: TinyScorer::DEFAULT_HIDDEN,
            mle_lr: 0.05,
            gen_lr: 0.05,
            gen_momentum: 0.9,
            disc_lr: 0.05,
            disc_momentum: 0.9,
            clip_norm: 5.0,
            mle_epochs: 3,
            mle_batch: 16,
            hvr_steps: 20000,
            attack_batch: 8,
            defense_batch: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GameConfig {
    pub c_low: f64,
    pub c_hi: f64,
    pub n_g: usize,
    pub n_d: usize,
    pub m: usize,
    pub max_turns: usize,
    pub mode: Mode,
    pub n: usize,
    pub temperature_set: Vec<f64>,
    pub samples_per_attacker: usize,
    pub seed: u64,
    /// Steps between validation checks in both phases.
    pub eval_every: usize,
    /// Size of the fixed validation context set.
    pub valid_contexts: usize,
    /// Use the HvM·HvR ensemble as the attack reward (otherwise HvM alone).
    /// Ignored in ND mode, which never uses HvR.
    pub reward_ensemble: bool,
    pub training: TrainingConfig,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            c_low: 0.55,
            c_hi: 0.75,
            n_g: 500,
            n_d: 500,
            m: 5,
            max_turns: 64,
            mode: Mode::Att,
            n: 8,
            temperature_set: DEFAULT_TEMPERATURES.to_vec(),
            samples_per_attacker: 2000,
            seed: 0,
            eval_every: 25,
            valid_contexts: 200,
            reward_ensemble: true,
            training: TrainingConfig::default(),
        }
    }
}

impl GameConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0 < self.c_low && self.c_low < self.c_hi && self.c_hi < 1.0) {
            return bad(format!("need 0 < c_low < c_hi < 1, got c_low={} c_hi={}", self.c_low, self.c_hi));
        }
        if self.m < 1 {
            return bad("m must be ≥ 1".into());
        }
        if self.max_turns < self.m {
            return bad(format!("max_turns ({}) must be ≥ m ({})", self.max_turns, self.m));
        }
        if self.n < 2 {
            return bad("rollout size n must be ≥ 2".into());
        }
        if self.temperature_set.is_empty() || self.temperature_set.iter().any(|&t| !(t > 0.0)) {
            return bad("temperature_set must be non-empty and positive".into());
        }
        if self.samples_per_attacker == 0 || self.valid_contexts == 0 || self.eval_every == 0 {
            return bad("samples_per_attacker, valid_contexts and eval_every must be ≥ 1".into());
        }
        Ok(())
    }

    /// Decoding temperatures the attacker draws from in this mode.
    pub fn attack_temperatures(&self) -> Vec<f64> {
        match self.mode {
            Mode::Nd => vec![1.0],
            _ => self.temperature_set.clone(),
        }
    }
}

/// One harvested response.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialItem {
    /// Index of the dialogue in the corpus.
    pub dialogue: usize,
    pub response: Utterance,
    pub temperature: f64,
}

/// `A(t)`: responses from the turn-`t` attacker on train contexts (`items`,
/// used for defense) and on the fixed validation contexts (`valid_items`, used
/// for accuracy checks). The attacker snapshot is `TinyArena::attackers[turn]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialDataset {
    pub turn: usize,
    pub items: Vec<AdversarialItem>,
    pub valid_items: Vec<AdversarialItem>,
}

impl AdversarialDataset {
    pub fn responses(&self) -> Vec<Utterance> {
        self.items.iter().map(|i| i.response.clone()).collect()
    }
}

/// What the orchestrator needs from the players.
pub trait Arena {
    /// Put the attacker back to the pre-trained snapshot.
    fn reset_attacker(&mut self);
    /// Run `steps` attack steps; returns the mean attack loss.
    fn attack(&mut self, steps: usize) -> Result<f64>;
    /// Defender accuracy against fresh samples from the current attacker on
    /// the validation contexts.
    fn attacker_accuracy(&mut self) -> Result<f64>;
    /// Harvest the current attacker as `A(turn)` and append it to the pool.
    fn harvest(&mut self, turn: usize) -> Result<()>;
    fn pool_len(&self) -> usize;
    /// Run `steps` defense steps on the given pool entries; returns the mean
    /// defense loss.
    fn defend(&mut self, pool: &[usize], steps: usize) -> Result<f64>;
    /// Defender validation accuracy on each of the given pool entries.
    fn pool_accuracies(&mut self, pool: &[usize]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub steps: usize,
    pub loss: f64,
    /// Accuracy at each evaluation point.
    pub accuracy_trace: Vec<f64>,
}

/// Attack phase of turn `turn` (≥ 1): optional re-initialisation, attack
/// steps in blocks of `eval_every` until accuracy < `c_low` or `N_G` steps,
/// then harvest.
pub fn attack_phase<A: Arena + ?Sized>(arena: &mut A, cfg: &GameConfig, turn: usize) -> Result<AttackOutcome> {
    if cfg.mode.reinitializes_generator() {
        arena.reset_attacker();
    }
    let mut steps = 0;
    let mut loss_sum = 0.0;
    let mut accuracy_trace = Vec::new();
    while steps < cfg.n_g {
        let block = cfg.eval_every.min(cfg.n_g - steps);
        loss_sum += arena.attack(block)? * block as f64;
        steps += block;
        let acc = arena.attacker_accuracy()?;
        accuracy_trace.push(acc);
        if acc < cfg.c_low {
            break;
        }
    }
    arena.harvest(turn)?;
    Ok(AttackOutcome { steps, loss: if steps > 0 { loss_sum / steps as f64 } else { 0.0 }, accuracy_trace })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefenseOutcome {
    pub steps: usize,
    pub loss: f64,
    /// Pool entries trained and checked on.
    pub pool: Vec<usize>,
    /// Final accuracies on `pool`.
    pub accuracies: Vec<f64>,
}

fn min_of(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Defense phase: train on the mode's pool until the minimum accuracy over it
/// reaches `c_hi` or `N_D` steps, checking every `eval_every` steps.
pub fn defense_phase<A: Arena + ?Sized>(arena: &mut A, cfg: &GameConfig) -> Result<DefenseOutcome> {
    let pool = cfg.mode.defense_pool(arena.pool_len());
    let mut accuracies = arena.pool_accuracies(&pool)?;
    let mut steps = 0;
    let mut loss_sum = 0.0;
    while min_of(&accuracies) < cfg.c_hi && steps < cfg.n_d {
        let block = cfg.eval_every.min(cfg.n_d - steps);
        loss_sum += arena.defend(&pool, block)? * block as f64;
        steps += block;
        accuracies = arena.pool_accuracies(&pool)?;
    }
    Ok(DefenseOutcome { steps, loss: if steps > 0 { loss_sum / steps as f64 } else { 0.0 }, pool, accuracies })
}

/// One row of the game history.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnRecord {
    pub turn: usize,
    pub attack_steps: usize,
    pub defense_steps: usize,
    /// Accuracy on every pooled dataset right after the attack phase
    /// (including the freshly harvested one).
    pub post_attack_accuracies: Vec<f64>,
    pub post_attack_min: f64,
    /// Pool entries the defense phase used.
    pub defense_pool: Vec<usize>,
    /// Accuracy on every pooled dataset after the defense phase.
    pub post_defense_accuracies: Vec<f64>,
    pub attack_loss: f64,
    pub defense_loss: f64,
    pub wall_clock_secs: f64,
}

impl TurnRecord {
    pub const CSV_HEADER: [&'static str; 10] = [
        "turn",
        "attack_steps",
        "defense_steps",
        "min_acc",
        "post_attack_acc",
        "defense_pool",
        "post_defense_acc",
        "post_defense_min",
        "attack_loss",
        "defense_loss",
    ];

    /// CSV fields. List-valued columns are `;`-separated. Wall-clock time is
    /// left out so replays are byte-identical.
    pub fn csv_fields(&self) -> Vec<String> {
        let list = |v: &[f64]| v.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(";");
        vec![
            self.turn.to_string(),
            self.attack_steps.to_string(),
            self.defense_steps.to_string(),
            format!("{:.4}", self.post_attack_min),
            list(&self.post_attack_accuracies),
            self.defense_pool.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";"),
            list(&self.post_defense_accuracies),
            format!("{:.4}", min_of(&self.post_defense_accuracies)),
            format!("{:.6}", self.attack_loss),
            format!("{:.6}", self.defense_loss),
        ]
    }
}

pub fn write_turns_csv<W: Write>(records: &[TurnRecord], w: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    out.write_record(TurnRecord::CSV_HEADER)?;
    for r in records {
        out.write_record(r.csv_fields())?;
    }
    out.flush()?;
    Ok(())
}

/// Attack phase, post-attack measurement over the whole pool, defense phase.
pub fn play_turn<A: Arena + ?Sized>(arena: &mut A, cfg: &GameConfig, turn: usize) -> Result<TurnRecord> {
    let started = Instant::now();
    let attack = attack_phase(arena, cfg, turn)?;
    let everything: Vec<usize> = (0..arena.pool_len()).collect();
    let post_attack_accuracies = arena.pool_accuracies(&everything)?;
    let defense = defense_phase(arena, cfg)?;
    let post_defense_accuracies = arena.pool_accuracies(&everything)?;
    Ok(TurnRecord {
        turn,
        attack_steps: attack.steps,
        defense_steps: defense.steps,
        post_attack_min: min_of(&post_attack_accuracies),
        post_attack_accuracies,
        defense_pool: defense.pool,
        post_defense_accuracies,
        attack_loss: attack.loss,
        defense_loss: defense.loss,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GameOutcome {
    pub records: Vec<TurnRecord>,
    pub converged: bool,
}

/// Plays turns from 1 until the post-attack minimum accuracy has exceeded
/// `c_hi` for `m` consecutive turns, or `max_turns` is reached. `on_turn` sees
/// each record as soon as it is complete.
pub fn run_game<A: Arena + ?Sized>(
    arena: &mut A,
    cfg: &GameConfig,
    mut on_turn: impl FnMut(&TurnRecord) -> Result<()>,
) -> Result<GameOutcome> {
    cfg.validate()?;
    let mut records = Vec::new();
    let mut streak = 0;
    for turn in 1..=cfg.max_turns {
        let rec = play_turn(arena, cfg, turn)?;
        streak = if rec.post_attack_min > cfg.c_hi { streak + 1 } else { 0 };
        log::info!(
            "{} turn {turn}: attack {} steps, min acc {:.3}, defense {} steps",
            cfg.mode,
            rec.attack_steps,
            rec.post_attack_min,
            rec.defense_steps
        );
        on_turn(&rec)?;
        records.push(rec);
        if streak >= cfg.m {
            return Ok(GameOutcome { records, converged: true });
        }
    }
    Ok(GameOutcome { records, converged: false })
}

/// The players on the reference models.
#[derive(Debug, Clone)]
pub struct TinyArena {
    pub corpus: Corpus,
    pub cfg: GameConfig,
    pub theta_g0: TinyCondLM,
    pub theta_d0: TinyScorer,
    pub generator: TinyCondLM,
    pub hvm: TinyScorer,
    pub hvr: TinyScorer,
    /// `A(0..=t)`.
    pub pool: Vec<AdversarialDataset>,
    /// Attacker parameters that produced each pool entry.
    pub attackers: Vec<ParamVector>,
    /// Fingerprint of the generator at the start of every attack phase.
    pub attack_start_fingerprints: Vec<u64>,
    /// Cumulative number of defense batch items drawn from each pool entry.
    pub defense_draws: Vec<usize>,
    /// Accuracy of θ_D(0) on A(0) at the end of pre-training.
    pub pretrain_accuracy: f64,
    gen_opt: OptimizerState,
    hvm_opt: OptimizerState,
    train: Vec<usize>,
    valid: Vec<usize>,
    attack_rng: RngStream,
    eval_rng: RngStream,
    harvest_rng: RngStream,
    defense_rng: RngStream,
}

/// Minimum margin over chance θ_D(0) must reach on A(0).
pub const SEPARABILITY_MARGIN: f64 = 0.05;

impl TinyArena {
    /// Pre-trains every component: θ_G(0) by MLE, A(0) sampled from it at
    /// temperature 1, θ_D(0) by defense steps on `{A(0)}`, and HvR on random
    /// negatives. Nothing here depends on `cfg.mode`.
    pub fn pretrain(corpus: &Corpus, cfg: &GameConfig) -> Result<Self> {
        cfg.validate()?;
        let train = corpus.split_indices(Split::Train);
        let all_valid = corpus.split_indices(Split::Valid);
        if train.is_empty() || all_valid.is_empty() {
            return Err(Error::Data("corpus needs non-empty train and valid splits".into()));
        }
        let root = RngStream::new(cfg.seed).substream("pretrain");
        let t = &cfg.training;

        let mut init_rng = root.substream("init");
        let mut theta_g0 = TinyCondLM::for_corpus(corpus, t.dim, &mut init_rng);
        let mut hvm = TinyScorer::for_corpus(corpus, t.dim, t.hidden, &mut init_rng);
        let mut hvr = TinyScorer::for_corpus(corpus, t.dim, t.hidden, &mut init_rng);

        let mut opt = OptimizerState::new(t.mle_lr, t.gen_momentum, theta_g0.params().len())?;
        let mle = mle_pretrain(&mut theta_g0, corpus, t.mle_epochs, t.mle_batch, t.clip_norm, &mut opt, &mut root.substream("mle"))?;
        log::info!("MLE pre-training NLL/token trace: {:?}", mle.nll_per_token);

        let mut valid = all_valid;
        valid.truncate(cfg.valid_contexts);

        let gen_opt = OptimizerState::new(t.gen_lr, t.gen_momentum, theta_g0.params().len())?;
        let hvm_opt = OptimizerState::new(t.disc_lr, t.disc_momentum, hvm.params().len())?;

        let mut hvr_opt = OptimizerState::new(t.disc_lr, t.disc_momentum, hvr.params().len())?;
        hvr_pretrain(&mut hvr, corpus, t.hvr_steps, t.defense_batch, &mut hvr_opt, &mut root.substream("hvr"), t.clip_norm)?;

        let game = RngStream::new(cfg.seed).substream("game");
        let mut arena = TinyArena {
            corpus: corpus.clone(),
            cfg: cfg.clone(),
            generator: theta_g0.clone(),
            theta_g0,
            theta_d0: hvm.clone(),
            hvm: hvm.clone(),
            hvr,
            pool: Vec::new(),
            attackers: Vec::new(),
            attack_start_fingerprints: Vec::new(),
            defense_draws: Vec::new(),
            pretrain_accuracy: 0.0,
            gen_opt,
            hvm_opt,
            train,
            valid,
            attack_rng: game.substream("attack"),
            eval_rng: game.substream("eval"),
            harvest_rng: game.substream("harvest"),
            defense_rng: game.substream("defense"),
        };

        // A(0) at temperature 1, independent of the mode's temperature set
        let mut h_rng = root.substream("harvest");
        let a0 = arena.sample_dataset(0, &[1.0], &mut h_rng);
        arena.pool.push(a0);
        arena.attackers.push(arena.generator.params().clone());
        arena.defense_draws.push(0);

        // θ_D(0): HvM alone, checked every eval_every steps
        let mut d_rng = root.substream("hvm");
        let mut steps = 0;
        let mut acc = arena.hvm_only_accuracy(0)?;
        while acc < cfg.c_hi && steps < cfg.n_d {
            let block = cfg.eval_every.min(cfg.n_d - steps);
            for _ in 0..block {
                let pool = [&arena.pool[0]];
                defense_step(&mut hvm, corpus, &pool, t.defense_batch, &mut d_rng, &mut arena.hvm_opt, t.clip_norm)?;
            }
            steps += block;
            arena.hvm = hvm.clone();
            acc = arena.hvm_only_accuracy(0)?;
        }
        log::info!("θ_D(0) reached accuracy {acc:.3} on A(0) after {steps} steps");
        let required = 0.5 + SEPARABILITY_MARGIN;
        if acc < required {
            return Err(Error::InseparableCorpus { accuracy: acc, required });
        }
        arena.hvm = hvm.clone();
        arena.theta_d0 = hvm;
        arena.pretrain_accuracy = acc;
        arena.hvm_opt.reset();
        Ok(arena)
    }

    /// Same pre-trained players, configured for another game (mode, caps,
    /// thresholds). Game random streams restart from the new seed.
    pub fn with_config(&self, cfg: &GameConfig) -> Result<Self> {
        cfg.validate()?;
        let mut next = self.clone();
        next.cfg = cfg.clone();
        let t = &cfg.training;
        next.gen_opt = OptimizerState::new(t.gen_lr, t.gen_momentum, next.generator.params().len())?;
        next.hvm_opt = OptimizerState::new(t.disc_lr, t.disc_momentum, next.hvm.params().len())?;
        let game = RngStream::new(cfg.seed).substream("game");
        next.attack_rng = game.substream("attack");
        next.eval_rng = game.substream("eval");
        next.harvest_rng = game.substream("harvest");
        next.defense_rng = game.substream("defense");
        Ok(next)
    }

    pub fn mode(&self) -> Mode {
        self.cfg.mode
    }

    pub fn valid_indices(&self) -> &[usize] {
        &self.valid
    }

    /// The defender as used for accuracy: HvM·HvR in ATT/GAN, HvM in ND.
    pub fn defender(&self) -> EnsembleScorer<'_> {
        let hvr: Option<&dyn Scorer> = if self.cfg.mode.uses_hvr() { Some(&self.hvr) } else { None };
        EnsembleScorer::new(&self.hvm, hvr)
    }

    fn sample_dataset(&self, turn: usize, temperatures: &[f64], rng: &mut RngStream) -> AdversarialDataset {
        let sample = |i: usize, rng: &mut RngStream| {
            let temperature = *rng.choose(temperatures);
            let response = self.generator.sample_response(&self.corpus.dialogues()[i].context, temperature, rng);
            AdversarialItem { dialogue: i, response, temperature }
        };
        let items = (0..self.cfg.samples_per_attacker)
            .map(|_| {
                let i = *rng.choose(&self.train);
                sample(i, rng)
            })
            .collect();
        let valid_items = self.valid.iter().map(|&i| sample(i, rng)).collect();
        AdversarialDataset { turn, items, valid_items }
    }

    fn triples<'a>(&'a self, items: &'a [AdversarialItem]) -> Vec<Triple<'a>> {
        items
            .iter()
            .map(|it| {
                let d = &self.corpus.dialogues()[it.dialogue];
                (&d.context[..], &d.human_response, &it.response)
            })
            .collect()
    }

    fn hvm_only_accuracy(&self, dataset: usize) -> Result<f64> {
        pairwise_accuracy(&EnsembleScorer::hvm_only(&self.hvm), &self.triples(&self.pool[dataset].valid_items))
    }

    /// Defender accuracy against `judge`-agnostic items.
    pub fn accuracy_on(&self, judge: &dyn Judge, items: &[AdversarialItem]) -> Result<f64> {
        pairwise_accuracy(judge, &self.triples(items))
    }

    /// Pooled responses of datasets `A(0..=upto)`.
    pub fn pooled_responses(&self, upto: usize) -> Vec<Utterance> {
        self.pool.iter().take(upto + 1).flat_map(|d| d.items.iter().map(|i| i.response.clone())).collect()
    }

    pub fn attacker_model(&self, index: usize) -> TinyCondLM {
        let mut m = self.theta_g0.clone();
        *m.params_mut() = self.attackers[index].clone();
        m
    }
}

impl Arena for TinyArena {
    fn reset_attacker(&mut self) {
        self.generator = self.theta_g0.clone();
        self.gen_opt.reset();
    }

    fn attack(&mut self, steps: usize) -> Result<f64> {
        if self.attack_start_fingerprints.len() < self.pool.len() {
            self.attack_start_fingerprints.push(self.generator.params().fingerprint());
        }
        let hvm_version = self.hvm.params().version();
        let temps = self.cfg.attack_temperatures();
        let t = &self.cfg.training;
        let mut loss = 0.0;
        for _ in 0..steps {
            let contexts: Vec<&[Utterance]> = (0..t.attack_batch)
                .map(|_| &self.corpus.dialogues()[*self.attack_rng.choose(&self.train)].context[..])
                .collect();
            let judge = if self.cfg.mode.uses_hvr() && self.cfg.reward_ensemble {
                EnsembleScorer::new(&self.hvm, Some(&self.hvr))
            } else {
                EnsembleScorer::hvm_only(&self.hvm)
            };
            let m = attack_step(
                &mut self.generator,
                &judge,
                &contexts,
                self.cfg.n,
                &temps,
                &mut self.attack_rng,
                &mut self.gen_opt,
                t.clip_norm,
            )?;
            loss += m.loss;
        }
        if self.hvm.params().version() != hvm_version {
            return Err(Error::Data("discriminator parameters changed during an attack phase".into()));
        }
        Ok(if steps > 0 { loss / steps as f64 } else { 0.0 })
    }

    fn attacker_accuracy(&mut self) -> Result<f64> {
        let temps = self.cfg.attack_temperatures();
        let mut rng = self.eval_rng.clone();
        let items: Vec<AdversarialItem> = self
            .valid
            .iter()
            .map(|&i| {
                let temperature = *rng.choose(&temps);
                let response = self.generator.sample_response(&self.corpus.dialogues()[i].context, temperature, &mut rng);
                AdversarialItem { dialogue: i, response, temperature }
            })
            .collect();
        self.eval_rng = rng;
        self.accuracy_on(&self.defender(), &items)
    }

    fn harvest(&mut self, turn: usize) -> Result<()> {
        let temps = self.cfg.attack_temperatures();
        let mut rng = self.harvest_rng.clone();
        let dataset = self.sample_dataset(turn, &temps, &mut rng);
        self.harvest_rng = rng;
        self.pool.push(dataset);
        self.attackers.push(self.generator.params().clone());
        self.defense_draws.push(0);
        Ok(())
    }

    fn pool_len(&self) -> usize {
        self.pool.len()
    }

    fn defend(&mut self, pool: &[usize], steps: usize) -> Result<f64> {
        let gen_version = self.generator.params().version();
        let t = self.cfg.training.clone();
        let datasets: Vec<&AdversarialDataset> = pool.iter().map(|&i| &self.pool[i]).collect();
        let mut loss = 0.0;
        for _ in 0..steps {
            let m = defense_step(
                &mut self.hvm,
                &self.corpus,
                &datasets,
                t.defense_batch,
                &mut self.defense_rng,
                &mut self.hvm_opt,
                t.clip_norm,
            )?;
            for (k, c) in m.source_counts.iter().enumerate() {
                self.defense_draws[pool[k]] += c;
            }
            loss += m.loss;
        }
        if self.generator.params().version() != gen_version {
            return Err(Error::Data("generator parameters changed during a defense phase".into()));
        }
        Ok(if steps > 0 { loss / steps as f64 } else { 0.0 })
    }

    fn pool_accuracies(&mut self, pool: &[usize]) -> Result<Vec<f64>> {
        let judge = self.defender();
        pool.iter().map(|&i| self.accuracy_on(&judge, &self.pool[i].valid_items)).collect()
    }
}

/// Pre-trained players plus the game history.
#[derive(Debug, Clone)]
pub struct GameState {
    pub arena: TinyArena,
    pub records: Vec<TurnRecord>,
    pub converged: bool,
}

impl GameState {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_turns_csv(&self.records, w)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Post-attack minimum accuracy of the last turn played.
    pub fn final_min_accuracy(&self) -> Option<f64> {
        self.records.last().map(|r| r.post_attack_min)
    }
}

pub fn pretrain_all(corpus: &Corpus, cfg: &GameConfig) -> Result<TinyArena> {
    TinyArena::pretrain(corpus, cfg)
}

/// Plays a game from already pre-trained players.
pub fn play_from(arena: TinyArena, cfg: &GameConfig, on_turn: impl FnMut(&TurnRecord) -> Result<()>) -> Result<GameState> {
    let mut arena = arena.with_config(cfg)?;
    let outcome = run_game(&mut arena, cfg, on_turn)?;
    Ok(GameState { arena, records: outcome.records, converged: outcome.converged })
}

/// Pre-trains and plays a full game.
pub fn play_game(corpus: &Corpus, cfg: &GameConfig) -> Result<GameState> {
    let arena = pretrain_all(corpus, cfg)?;
    play_from(arena, cfg, |_| Ok(()))
}

/// The SL baseline: θ_D(0), never updated after pre-training.
pub fn run_baseline_sl(corpus: &Corpus, cfg: &GameConfig) -> Result<TinyScorer> {
    Ok(pretrain_all(corpus, cfg)?.theta_d0)
}

/// Outcome of a fresh attacker trained against a frozen defender.
#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    pub steps: usize,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub min_accuracy: f64,
    pub attacker: TinyCondLM,
}

/// Trains a fresh attacker from `theta_g0` against a frozen defender for at
/// most `budget` steps, stopping early once accuracy drops below `c_low`.
/// Accuracy is measured on the first `valid_contexts` validation dialogues
/// every `eval_every` steps with responses decoded from `temperatures`.
#[allow(clippy::too_many_arguments)]
pub fn attack_frozen_defender(
    corpus: &Corpus,
    theta_g0: &TinyCondLM,
    defender: &EnsembleScorer<'_>,
    budget: usize,
    temperatures: &[f64],
    cfg: &GameConfig,
    rng: &RngStream,
) -> Result<ProbeOutcome> {
    let train = corpus.split_indices(Split::Train);
    let mut valid = corpus.split_indices(Split::Valid);
    valid.truncate(cfg.valid_contexts);
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Data("corpus needs non-empty train and valid splits".into()));
    }
    let t = &cfg.training;
    let mut gen = theta_g0.clone();
    let mut opt = OptimizerState::new(t.gen_lr, t.gen_momentum, gen.params().len())?;
    let mut attack_rng = rng.substream("attack");
    let mut eval_rng = rng.substream("eval");
    let accuracy = |gen: &TinyCondLM, eval_rng: &mut RngStream| {
        let items: Vec<(usize, Utterance)> = valid
            .iter()
            .map(|&i| {
                let temperature = *eval_rng.choose(temperatures);
                (i, gen.sample_response(&corpus.dialogues()[i].context, temperature, eval_rng))
            })
            .collect();
        let triples: Vec<Triple> = items
            .iter()
            .map(|(i, r)| {
                let d = &corpus.dialogues()[*i];
                (&d.context[..], &d.human_response, r)
            })
            .collect();
        pairwise_accuracy(defender, &triples)
    };
    let initial_accuracy = accuracy(&gen, &mut eval_rng)?;
    let mut final_accuracy = initial_accuracy;
    let mut min_accuracy = initial_accuracy;
    let mut steps = 0;
    while steps < budget && final_accuracy >= cfg.c_low {
        let block = cfg.eval_every.min(budget - steps);
        for _ in 0..block {
            let contexts: Vec<&[Utterance]> =
                (0..t.attack_batch).map(|_| &corpus.dialogues()[*attack_rng.choose(&train)].context[..]).collect();
            attack_step(&mut gen, defender, &contexts, cfg.n, temperatures, &mut attack_rng, &mut opt, t.clip_norm)?;
        }
        steps += block;
        final_accuracy = accuracy(&gen, &mut eval_rng)?;
        min_accuracy = min_accuracy.min(final_accuracy);
    }
    Ok(ProbeOutcome { steps, initial_accuracy, final_accuracy, min_accuracy, attacker: gen })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SynthWorldSpec};

    /// Scripted arena: accuracies come from queues, calls are logged.
    #[derive(Default)]
    struct Scripted {
        attacker_acc: Vec<f64>,
        /// Accuracy every dataset reports after the attack phase of each turn.
        post_attack: Vec<f64>,
        /// Fixed accuracy reported during defense checks, if any.
        defense_acc: Option<f64>,
        attack_steps: usize,
        defense_steps: usize,
        resets: usize,
        pool: usize,
        defended_on: Vec<Vec<usize>>,
        turn: usize,
        in_defense: bool,
    }

    impl Arena for Scripted {
        fn reset_attacker(&mut self) {
            self.resets += 1;
        }
        fn attack(&mut self, steps: usize) -> Result<f64> {
            self.in_defense = false;
            self.attack_steps += steps;
            Ok(0.0)
        }
        fn attacker_accuracy(&mut self) -> Result<f64> {
            Ok(if self.attacker_acc.is_empty() { 0.9 } else { self.attacker_acc.remove(0) })
        }
        fn harvest(&mut self, turn: usize) -> Result<()> {
            self.turn = turn;
            self.pool += 1;
            self.in_defense = false;
            Ok(())
        }
        fn pool_len(&self) -> usize {
            self.pool
        }
        fn defend(&mut self, pool: &[usize], steps: usize) -> Result<f64> {
            self.in_defense = true;
            self.defense_steps += steps;
            self.defended_on.push(pool.to_vec());
            Ok(0.0)
        }
        fn pool_accuracies(&mut self, pool: &[usize]) -> Result<Vec<f64>> {
            let acc = match (self.in_defense, self.defense_acc) {
                (true, Some(a)) => a,
                _ => self.post_attack.get(self.turn.saturating_sub(1)).copied().unwrap_or(0.9),
            };
            Ok(vec![acc; pool.len()])
        }
    }

    fn cfg(mode: Mode) -> GameConfig {
        GameConfig { mode, n_g: 100, n_d: 60, eval_every: 25, ..GameConfig::default() }
    }

    #[test]
    fn attack_stops_at_first_low_evaluation() {
        let mut a = Scripted { attacker_acc: vec![0.4], ..Default::default() };
        let out = attack_phase(&mut a, &cfg(Mode::Att), 1).unwrap();
        assert_eq!(out.steps, 25);
        assert_eq!(out.accuracy_trace, vec![0.4]);
        assert_eq!(a.pool, 1);
    }

    #[test]
    fn attack_runs_to_cap_when_accuracy_holds() {
        let mut a = Scripted::default();
        let c = GameConfig { n_g: 110, ..cfg(Mode::Att) };
        let out = attack_phase(&mut a, &c, 1).unwrap();
        assert_eq!(out.steps, 110);
        assert_eq!(a.attack_steps, 110);
        assert_eq!(out.accuracy_trace.len(), 5);
    }

    #[test]
    fn defense_skips_when_already_above_threshold() {
        let mut a = Scripted { pool: 1, post_attack: vec![0.9], turn: 1, ..Default::default() };
        let out = defense_phase(&mut a, &cfg(Mode::Att)).unwrap();
        assert_eq!(out.steps, 0);
        assert_eq!(a.defense_steps, 0);
    }

    #[test]
    fn defense_runs_to_cap_when_stuck() {
        let mut a = Scripted { pool: 2, post_attack: vec![0.6], turn: 1, defense_acc: Some(0.6), ..Default::default() };
        let out = defense_phase(&mut a, &cfg(Mode::Att)).unwrap();
        assert_eq!(out.steps, 60);
        assert_eq!(a.defense_steps, 60);
        assert_eq!(out.pool, vec![0, 1]);
    }

    #[test]
    fn defense_stops_once_pool_recovers() {
        let mut a = Scripted { pool: 3, post_attack: vec![0.6], turn: 1, defense_acc: Some(0.8), ..Default::default() };
        let out = defense_phase(&mut a, &cfg(Mode::Att)).unwrap();
        assert_eq!(out.steps, 25);
    }

    #[test]
    fn gan_defends_on_first_and_latest_only() {
        let mut a = Scripted { pool: 3, post_attack: vec![0.6], turn: 1, defense_acc: Some(0.6), ..Default::default() };
        defense_phase(&mut a, &cfg(Mode::Gan)).unwrap();
        assert!(a.defended_on.iter().all(|p| p == &vec![0, 2]));
        assert_eq!(Mode::Gan.defense_pool(1), vec![0]);
        assert_eq!(Mode::Att.defense_pool(3), vec![0, 1, 2]);
        assert_eq!(Mode::Nd.defense_pool(3), vec![0, 1, 2]);
    }

    #[test]
    fn reset_only_outside_gan() {
        for (mode, expected) in [(Mode::Att, 1), (Mode::Nd, 1), (Mode::Gan, 0)] {
            let mut a = Scripted::default();
            attack_phase(&mut a, &cfg(mode), 1).unwrap();
            assert_eq!(a.resets, expected, "{mode}");
        }
    }

    #[test]
    fn converges_after_m_high_turns() {
        let mut a = Scripted { pool: 1, post_attack: vec![0.8; 10], ..Default::default() };
        let c = GameConfig { m: 5, c_hi: 0.75, ..cfg(Mode::Att) };
        let out = run_game(&mut a, &c, |_| Ok(())).unwrap();
        assert!(out.converged);
        assert_eq!(out.records.len(), 5);
    }

    #[test]
    fn convergence_needs_consecutive_turns() {
        let script: Vec<f64> = (0..20).map(|i| if i % 2 == 0 { 0.8 } else { 0.7 }).collect();
        let mut a = Scripted { pool: 1, post_attack: script, ..Default::default() };
        let c = GameConfig { m: 2, max_turns: 20, ..cfg(Mode::Att) };
        let out = run_game(&mut a, &c, |_| Ok(())).unwrap();
        assert!(!out.converged);
        assert_eq!(out.records.len(), 20);

        // a streak that starts late still fires exactly at its m-th turn
        let mut script = vec![0.7, 0.8, 0.5, 0.8, 0.8, 0.8];
        script.extend([0.1; 10]);
        let mut a = Scripted { pool: 1, post_attack: script, ..Default::default() };
        let c = GameConfig { m: 3, max_turns: 16, ..cfg(Mode::Att) };
        let out = run_game(&mut a, &c, |_| Ok(())).unwrap();
        assert!(out.converged);
        assert_eq!(out.records.len(), 6);
    }

    #[test]
    fn config_validation() {
        assert!(GameConfig::default().validate().is_ok());
        assert!(GameConfig { c_low: 0.8, c_hi: 0.75, ..Default::default() }.validate().is_err());
        assert!(GameConfig { m: 0, ..Default::default() }.validate().is_err());
        assert!(GameConfig { max_turns: 2, m: 3, ..Default::default() }.validate().is_err());
        assert!(GameConfig { temperature_set: vec![], ..Default::default() }.validate().is_err());
        assert_eq!("nd".parse::<Mode>().unwrap(), Mode::Nd);
        assert!("foo".parse::<Mode>().is_err());
    }

    fn small_world() -> (Corpus, GameConfig) {
        let corpus = generate_synthetic(&SynthWorldSpec { num_dialogues: 1500, seed: 21, ..Default::default() }).unwrap();
        let cfg = GameConfig {
            n_g: 50,
            n_d: 100,
            max_turns: 3,
            m: 2,
            samples_per_attacker: 300,
            valid_contexts: 100,
            seed: 21,
            training: TrainingConfig { mle_epochs: 2, hvr_steps: 200, ..TrainingConfig::default() },
            ..GameConfig::default()
        };
        (corpus, cfg)
    }

    #[test]
    fn pretraining_is_seeded_and_sized() {
        let (corpus, cfg) = small_world();
        let a = pretrain_all(&corpus, &cfg).unwrap();
        let b = pretrain_all(&corpus, &cfg).unwrap();
        assert_eq!(a.theta_d0.params().to_bytes(), b.theta_d0.params().to_bytes());
        assert_eq!(a.pool.len(), 1);
        assert_eq!(a.pool[0].items.len(), cfg.samples_per_attacker);
        assert_eq!(a.pool[0].valid_items.len(), a.valid_indices().len());
        assert!(a.pool[0].items.iter().all(|it| corpus.split_of(it.dialogue) == Split::Train));
        let sl = run_baseline_sl(&corpus, &cfg).unwrap();
        assert!(sl.params().bit_eq(a.theta_d0.params()));
    }

    #[test]
    fn att_resets_generator_each_turn_and_gan_does_not() {
        let (corpus, cfg) = small_world();
        let base = pretrain_all(&corpus, &cfg).unwrap();
        let g0 = base.theta_g0.params().fingerprint();

        let att = play_from(base.clone(), &GameConfig { mode: Mode::Att, m: 3, ..cfg.clone() }, |_| Ok(())).unwrap();
        assert_eq!(att.arena.attack_start_fingerprints.len(), att.records.len());
        assert!(att.arena.attack_start_fingerprints.iter().all(|&f| f == g0));

        let gan = play_from(base, &GameConfig { mode: Mode::Gan, m: 3, ..cfg }, |_| Ok(())).unwrap();
        let fp = &gan.arena.attack_start_fingerprints;
        assert_eq!(fp[0], g0);
        assert!(fp[1..].iter().all(|&f| f != g0));
    }

    #[test]
    fn gan_never_samples_intermediate_datasets() {
        let (corpus, cfg) = small_world();
        let base = pretrain_all(&corpus, &cfg).unwrap();
        // low c_low / high c_hi keep both phases busy
        let c = GameConfig { mode: Mode::Gan, c_hi: 0.99, c_low: 0.01, n_d: 25, m: 3, ..cfg };
        let mut arena = base.with_config(&c).unwrap();
        let mut draws_after_turn = Vec::new();
        for turn in 1..=3 {
            play_turn(&mut arena, &c, turn).unwrap();
            draws_after_turn.push(arena.defense_draws.clone());
        }
        // turn 2 defends on {A0, A2}, turn 3 on {A0, A3}: A1 stops being drawn
        assert!(draws_after_turn[0][1] > 0);
        assert_eq!(draws_after_turn[1][1], draws_after_turn[0][1]);
        assert_eq!(draws_after_turn[2][1], draws_after_turn[0][1]);
        assert_eq!(draws_after_turn[2][2], draws_after_turn[1][2]);
        assert!(draws_after_turn[2][3] > 0);
    }

    #[test]
    fn replay_is_byte_identical_and_pool_grows() {
        let (corpus, cfg) = small_world();
        let c = GameConfig { mode: Mode::Nd, m: 3, ..cfg };
        let run = || {
            let s = play_game(&corpus, &c).unwrap();
            let mut buf = Vec::new();
            s.write_csv(&mut buf).unwrap();
            (buf, s)
        };
        let (a, sa) = run();
        let (b, _) = run();
        assert_eq!(a, b);
        for (k, r) in sa.records.iter().enumerate() {
            assert_eq!(r.post_attack_accuracies.len(), k + 2);
        }
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("turn,attack_steps,defense_steps,min_acc"));
    }
}
