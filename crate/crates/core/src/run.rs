//! Run configuration, run directories and the command drivers behind the
//! `att` binary.
//!
//! Configuration is a flat `key=value` file; `#` starts a comment line.
//! Command-line overrides are applied on top with [`RunConfig::set`]. Every
//! key is listed in [`RunConfig::KEYS`] with its documentation and unknown
//! keys are rejected.
//!
//! Randomness flows from `seed` through named substreams: the synthetic world
//! uses `seed` directly, pre-training draws from `pretrain`, the game from
//! `game` and evaluation from `eval`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::corpus::{
    generate_synthetic, load_external_responses, load_jsonl_with, Corpus, SynthWorldSpec, Vocab, VocabPolicy,
};
use crate::evalkit::{evaluate_attackers, AttackerSpec, EvalReport, EvalRow};
use crate::game::{
    attack_frozen_defender, play_from, pretrain_all, GameConfig, Mode, TinyArena, TrainingConfig, TurnRecord,
};
use crate::models::{Generator, ModelManifest, ModelRole, Scorer, TinyCondLM, TinyScorer, GREEDY_TEMPERATURE};
use crate::numerics::RngStream;
use crate::training::EnsembleScorer;
use crate::{Error, Result};

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
plain_value!(u64, usize, f64, bool, String);

impl ConfigValue for Mode {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e: Error| e.to_string())
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for Vec<f64> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
            .collect()
    }
    fn render(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

macro_rules! run_config {
    ($( #[doc = $doc:literal] $field:ident : $ty:ty = $default:expr, )*) => {
        /// Every setting of a run. Paths left empty are unset.
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $( #[doc = $doc] pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl RunConfig {
            /// `(key, documentation)` for every setting, in display order.
            pub const KEYS: &'static [(&'static str, &'static str)] = &[
                $( (stringify!($field), $doc.trim_ascii()), )*
            ];

            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key {
                    $( stringify!($field) => {
                        self.$field = <$ty as ConfigValue>::parse_value(value)
                            .map_err(|e| Error::Config(format!("{key}={value}: {e}")))?;
                    } )*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $( stringify!($field) => Some(self.$field.render()), )*
                    _ => None,
                }
            }
        }
    };
}

run_config! {
    /// Root seed of every random stream.
    seed: u64 = 0,
    /// Output directory.
    out_dir: String = "run".into(),
    /// `synthetic` or the path of a JSONL corpus.
    corpus: String = "synthetic".into(),
    /// Vocabulary file for a JSONL corpus; empty builds one from the file.
    vocab: String = String::new(),
    /// Maximum utterance length in tokens.
    max_len: usize = 16,
    /// Synthetic world: number of dialogues.
    dialogues: usize = 5000,
    /// Synthetic world: number of topics.
    topics: usize = 20,
    /// Synthetic world: probability that the human response repeats the keyword.
    keyword_copy_prob: f64 = 0.9,
    /// Synthetic world: number of filler words.
    noise_vocab_size: usize = 80,
    /// Game mode: ATT, GAN or ND.
    mode: Mode = Mode::Att,
    /// Attack stops once accuracy falls below this.
    c_low: f64 = 0.55,
    /// Defense stops once every pooled dataset is at least this accurate.
    c_hi: f64 = 0.75,
    /// Maximum attack steps per turn.
    n_g: usize = 500,
    /// Maximum defense steps per turn (also caps discriminator pre-training).
    n_d: usize = 500,
    /// Consecutive high post-attack turns needed to converge.
    m: usize = 5,
    /// Hard cap on turns.
    max_turns: usize = 64,
    /// Rollout size per context.
    n: usize = 8,
    /// Attacker decoding temperatures (comma-separated).
    temperature_set: Vec<f64> = vec![0.3, 1.0, 10.0, 100.0],
    /// Responses harvested per attacker.
    samples_per_attacker: usize = 2000,
    /// Steps between validation checks.
    eval_every: usize = 25,
    /// Size of the fixed validation context set.
    valid_contexts: usize = 200,
    /// Reward the attacker with the HvM·HvR ensemble rather than HvM alone.
    reward_ensemble: bool = true,
    /// Embedding width of both models.
    dim: usize = 16,
    /// Hidden width of the scorers.
    hidden: usize = 32,
    /// Generator learning rate during MLE pre-training.
    mle_lr: f64 = 0.05,
    /// Generator learning rate during attacks.
    gen_lr: f64 = 0.05,
    /// Generator momentum.
    gen_momentum: f64 = 0.9,
    /// Scorer learning rate.
    disc_lr: f64 = 0.05,
    /// Scorer momentum.
    disc_momentum: f64 = 0.9,
    /// Global gradient norm clip.
    clip_norm: f64 = 5.0,
    /// Generator MLE pre-training epochs.
    mle_epochs: usize = 3,
    /// Generator MLE batch size.
    mle_batch: usize = 16,
    /// HvR pre-training steps.
    hvr_steps: usize = 20000,
    /// Contexts per attack step.
    attack_batch: usize = 8,
    /// Pairs per defense (and HvR) step.
    defense_batch: usize = 32,
    /// attack/eval: defender HvM checkpoint.
    defender: String = String::new(),
    /// attack/eval: HvR checkpoint; empty scores with HvM alone.
    hvr: String = String::new(),
    /// attack: generator checkpoint to start from.
    generator: String = String::new(),
    /// attack: step budget.
    budget: usize = 500,
    /// attack: decoding temperatures of the probe attacker.
    probe_temperatures: Vec<f64> = vec![1.0],
    /// eval: comma-separated attackers (`parrot`, `generator:<ckpt>@<T>`, `external:<jsonl>`).
    attackers: String = "parrot".into(),
}

impl RunConfig {
    /// Parses a config file over the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.merge_file(path)?;
        Ok(cfg)
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.merge_text(&text, path)
    }

    pub fn merge_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse { path: origin.to_path_buf(), line: i + 1, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            self.set(k.trim(), v).map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    /// `key=value` lines for every key; parses back to the same config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _) in Self::KEYS {
            let _ = writeln!(out, "{k}={}", self.get(k).expect("listed key"));
        }
        out
    }

    pub fn synth_spec(&self) -> SynthWorldSpec {
        SynthWorldSpec {
            num_topics: self.topics,
            num_dialogues: self.dialogues,
            keyword_copy_prob: self.keyword_copy_prob,
            noise_vocab_size: self.noise_vocab_size,
            seed: self.seed,
        }
    }

    pub fn game_config(&self) -> GameConfig {
        GameConfig {
            c_low: self.c_low,
            c_hi: self.c_hi,
            n_g: self.n_g,
            n_d: self.n_d,
            m: self.m,
            max_turns: self.max_turns,
            mode: self.mode,
            n: self.n,
            temperature_set: self.temperature_set.clone(),
            samples_per_attacker: self.samples_per_attacker,
            seed: self.seed,
            eval_every: self.eval_every,
            valid_contexts: self.valid_contexts,
            reward_ensemble: self.reward_ensemble,
            training: TrainingConfig {
                dim: self.dim,
                hidden: self.hidden,
                mle_lr: self.mle_lr,
                gen_lr: self.gen_lr,
                gen_momentum: self.gen_momentum,
                disc_lr: self.disc_lr,
                disc_momentum: self.disc_momentum,
                clip_norm: self.clip_norm,
                mle_epochs: self.mle_epochs,
                mle_batch: self.mle_batch,
                hvr_steps: self.hvr_steps,
                attack_batch: self.attack_batch,
                defense_batch: self.defense_batch,
            },
        }
    }

    /// The corpus this run works on.
    pub fn load_corpus(&self) -> Result<Corpus> {
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be ≥ 1".into()));
        }
        if self.corpus == "synthetic" {
            let c = generate_synthetic(&self.synth_spec())?;
            if c.max_len() == self.max_len {
                return Ok(c);
            }
            let dialogues = c.dialogues().to_vec();
            return Corpus::new(c.vocab().clone(), dialogues, self.max_len);
        }
        let policy = if self.vocab.is_empty() {
            VocabPolicy::Build
        } else {
            VocabPolicy::UseExisting(Vocab::load(Path::new(&self.vocab))?)
        };
        load_jsonl_with(Path::new(&self.corpus), policy, self.max_len)
    }

    pub fn eval_rng(&self) -> RngStream {
        RngStream::new(self.seed).substream("eval")
    }
}

/// Files of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Creates the directory if needed and checks it is writable.
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        let probe = root.join(".write-probe");
        File::create(&probe)?;
        std::fs::remove_file(&probe)?;
        Ok(Self { root })
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }
    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus.jsonl")
    }
    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.txt")
    }
    pub fn turns_csv(&self) -> PathBuf {
        self.root.join("turns.csv")
    }
    pub fn eval_csv(&self) -> PathBuf {
        self.root.join("eval.csv")
    }
    pub fn pretrain_csv(&self) -> PathBuf {
        self.root.join("pretrain.csv")
    }
    pub fn attack_csv(&self) -> PathBuf {
        self.root.join("attack.csv")
    }
    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.txt")
    }
    pub fn theta_g0(&self) -> PathBuf {
        self.root.join("theta_g0.ckpt")
    }
    pub fn theta_d0(&self) -> PathBuf {
        self.root.join("theta_d0.ckpt")
    }
    pub fn hvr(&self) -> PathBuf {
        self.root.join("hvr.ckpt")
    }
    pub fn final_hvm(&self) -> PathBuf {
        self.root.join("hvm_final.ckpt")
    }
    pub fn attacker(&self, turn: usize) -> PathBuf {
        self.root.join(format!("attacker_{turn:03}.ckpt"))
    }
    pub fn probe_attacker(&self) -> PathBuf {
        self.root.join("attacker.ckpt")
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        std::fs::write(self.config(), cfg.to_text())?;
        Ok(())
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(BufWriter::new(File::create(path)?)))
}

fn require_file(key: &str, value: &str) -> Result<PathBuf> {
    if value.is_empty() {
        return Err(Error::Config(format!("{key} is required")));
    }
    let path = PathBuf::from(value);
    if !path.is_file() {
        return Err(Error::Checkpoint { path, msg: "no such file".into() });
    }
    Ok(path)
}

fn save_pretrained(dir: &RunDir, arena: &TinyArena) -> Result<()> {
    let vocab = arena.corpus.vocab();
    vocab.save(&dir.vocab())?;
    arena.theta_g0.save(vocab, &dir.theta_g0())?;
    arena.theta_d0.save(ModelRole::HvM, vocab, &dir.theta_d0())?;
    arena.hvr.save(ModelRole::HvR, vocab, &dir.hvr())?;
    Ok(())
}

/// Writes `corpus.jsonl` and `vocab.txt` for the synthetic world.
pub fn cmd_gen_synth(cfg: &RunConfig) -> Result<RunDir> {
    let corpus = generate_synthetic(&cfg.synth_spec())?;
    let dir = RunDir::create(&cfg.out_dir)?;
    corpus.save_jsonl(&dir.corpus())?;
    corpus.vocab().save(&dir.vocab())?;
    Ok(dir)
}

/// Pre-trains θ_G(0), θ_D(0) and HvR and writes their checkpoints.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<(RunDir, TinyArena)> {
    let corpus = cfg.load_corpus()?;
    let dir = RunDir::create(&cfg.out_dir)?;
    dir.write_config(cfg)?;
    let arena = pretrain_all(&corpus, &cfg.game_config())?;
    save_pretrained(&dir, &arena)?;
    let mut w = csv_writer(&dir.pretrain_csv())?;
    w.write_record(["metric", "value"])?;
    w.write_record(["theta_d0_accuracy_a0".to_string(), format!("{:.6}", arena.pretrain_accuracy)])?;
    w.write_record(["a0_items".to_string(), arena.pool[0].items.len().to_string()])?;
    w.flush()?;
    Ok((dir, arena))
}

/// Result of [`cmd_play`].
#[derive(Debug, Clone)]
pub struct PlaySummary {
    pub dir: RunDir,
    pub converged: bool,
    pub turns: usize,
    pub final_min_accuracy: f64,
    pub report: EvalReport,
}

/// Pre-trains, plays the game, writes `turns.csv` (row by row), every
/// checkpoint and a final `eval.csv`.
pub fn cmd_play(cfg: &RunConfig) -> Result<PlaySummary> {
    let corpus = cfg.load_corpus()?;
    let dir = RunDir::create(&cfg.out_dir)?;
    dir.write_config(cfg)?;
    let game = cfg.game_config();
    let arena = pretrain_all(&corpus, &game)?;
    save_pretrained(&dir, &arena)?;

    let mut turns = csv_writer(&dir.turns_csv())?;
    turns.write_record(TurnRecord::CSV_HEADER)?;
    let state = play_from(arena, &game, |rec| {
        turns.write_record(rec.csv_fields())?;
        turns.flush()?;
        Ok(())
    })?;
    drop(turns);

    let a = &state.arena;
    let vocab = corpus.vocab();
    a.hvm.save(ModelRole::HvM, vocab, &dir.final_hvm())?;
    for t in 1..a.pool.len() {
        a.attacker_model(t).save(vocab, &dir.attacker(t))?;
    }

    // final report: fixed attackers plus the worst harvested one
    let mut attackers = vec![
        AttackerSpec::parrot(),
        AttackerSpec::generator("pretrained-greedy", a.theta_g0.clone(), GREEDY_TEMPERATURE)?,
        AttackerSpec::generator("pretrained-sampling", a.theta_g0.clone(), 1.0)?,
    ];
    for t in 1..a.pool.len() {
        attackers.push(AttackerSpec::generator(format!("adversarial-{t}"), a.attacker_model(t), 1.0)?);
    }
    let defender = a.defender();
    let full = evaluate_attackers(&defender, &corpus, &attackers, &cfg.eval_rng())?;
    let mut rows: Vec<EvalRow> = full.rows[..3].to_vec();
    if let Some(worst) = full.rows[3..].iter().min_by(|x, y| x.accuracy.total_cmp(&y.accuracy)) {
        rows.push(EvalRow { attacker: format!("adversarial-worst({})", worst.attacker), ..worst.clone() });
    }
    let report = EvalReport { rows };
    report.save_csv(&dir.eval_csv())?;

    let final_min_accuracy = state.final_min_accuracy().unwrap_or(f64::NAN);
    std::fs::write(
        dir.summary(),
        format!(
            "mode={}\nconverged={}\nturns={}\nfinal_min_acc={:.4}\n",
            game.mode,
            state.converged,
            state.records.len(),
            final_min_accuracy
        ),
    )?;
    Ok(PlaySummary { dir, converged: state.converged, turns: state.records.len(), final_min_accuracy, report })
}

struct Defender {
    hvm: TinyScorer,
    hvr: Option<TinyScorer>,
}

impl Defender {
    fn load(cfg: &RunConfig, vocab: &Vocab) -> Result<Self> {
        let hvm_path = require_file("defender", &cfg.defender)?;
        let (hvm, _) = TinyScorer::load(&hvm_path, vocab)?;
        let hvr = if cfg.hvr.is_empty() {
            None
        } else {
            let path = require_file("hvr", &cfg.hvr)?;
            Some(TinyScorer::load(&path, vocab)?.0)
        };
        Ok(Self { hvm, hvr })
    }

    fn judge(&self) -> EnsembleScorer<'_> {
        EnsembleScorer::new(&self.hvm, self.hvr.as_ref().map(|s| s as &dyn Scorer))
    }
}

/// Result of [`cmd_attack`].
#[derive(Debug, Clone)]
pub struct AttackSummary {
    pub dir: RunDir,
    pub steps: usize,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub min_accuracy: f64,
}

/// Trains a fresh attacker from the `generator` checkpoint against the frozen
/// `defender` (and optional `hvr`) for at most `budget` steps.
pub fn cmd_attack(cfg: &RunConfig) -> Result<AttackSummary> {
    let gen_path = require_file("generator", &cfg.generator)?;
    let defender_path = require_file("defender", &cfg.defender)?;
    let corpus = cfg.load_corpus()?;
    let vocab = corpus.vocab();
    ModelManifest::load(&defender_path)?.check_vocab(vocab, &defender_path)?;
    let theta_g0 = TinyCondLM::load(&gen_path, vocab)?;
    if theta_g0.max_len() != corpus.max_len() {
        return Err(Error::Config(format!(
            "generator max_len {} differs from corpus max_len {}",
            theta_g0.max_len(),
            corpus.max_len()
        )));
    }
    let defender = Defender::load(cfg, vocab)?;
    let dir = RunDir::create(&cfg.out_dir)?;
    dir.write_config(cfg)?;
    let rng = RngStream::new(cfg.seed).substream("game").substream("probe");
    let probe = attack_frozen_defender(
        &corpus,
        &theta_g0,
        &defender.judge(),
        cfg.budget,
        &cfg.probe_temperatures,
        &cfg.game_config(),
        &rng,
    )?;
    probe.attacker.save(vocab, &dir.probe_attacker())?;
    let mut w = csv_writer(&dir.attack_csv())?;
    w.write_record(["steps", "initial_accuracy", "final_accuracy", "min_accuracy"])?;
    w.write_record([
        probe.steps.to_string(),
        format!("{:.6}", probe.initial_accuracy),
        format!("{:.6}", probe.final_accuracy),
        format!("{:.6}", probe.min_accuracy),
    ])?;
    w.flush()?;
    Ok(AttackSummary {
        dir,
        steps: probe.steps,
        initial_accuracy: probe.initial_accuracy,
        final_accuracy: probe.final_accuracy,
        min_accuracy: probe.min_accuracy,
    })
}

/// Parses one attacker spec: `parrot`, `generator:<ckpt>@<T>` or
/// `external:<jsonl>`.
pub fn parse_attacker(spec: &str, corpus: &Corpus) -> Result<AttackerSpec> {
    let spec = spec.trim();
    if spec == "parrot" {
        return Ok(AttackerSpec::parrot());
    }
    if let Some(rest) = spec.strip_prefix("generator:") {
        let (path, t) = rest
            .rsplit_once('@')
            .ok_or_else(|| Error::Config(format!("generator attacker needs <ckpt>@<T>, got {spec:?}")))?;
        let temperature: f64 = t.parse().map_err(|e| Error::Config(format!("{spec:?}: temperature: {e}")))?;
        let path = require_file("generator attacker", path)?;
        let model = TinyCondLM::load(&path, corpus.vocab())?;
        // file name only, so reports do not depend on where the run lives
        let file = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        return AttackerSpec::generator(format!("generator:{file}@{t}"), model, temperature);
    }
    if let Some(path) = spec.strip_prefix("external:") {
        let (name, responses): (String, HashMap<_, _>) =
            load_external_responses(Path::new(path), corpus.vocab(), corpus.max_len())?;
        return Ok(AttackerSpec::external(name, responses));
    }
    Err(Error::Config(format!("unknown attacker {spec:?} (parrot, generator:<ckpt>@<T>, external:<jsonl>)")))
}

/// Evaluates the listed attackers against the defender on the eval split and
/// writes `eval.csv`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<(RunDir, EvalReport)> {
    let defender_path = require_file("defender", &cfg.defender)?;
    let corpus = cfg.load_corpus()?;
    ModelManifest::load(&defender_path)?.check_vocab(corpus.vocab(), &defender_path)?;
    let defender = Defender::load(cfg, corpus.vocab())?;
    let attackers = cfg
        .attackers
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_attacker(s, &corpus))
        .collect::<Result<Vec<_>>>()?;
    if attackers.is_empty() {
        return Err(Error::Config("attackers is empty".into()));
    }
    let dir = RunDir::create(&cfg.out_dir)?;
    dir.write_config(cfg)?;
    let report = evaluate_attackers(&defender.judge(), &corpus, &attackers, &cfg.eval_rng())?;
    report.save_csv(&dir.eval_csv())?;
    Ok((dir, report))
}
