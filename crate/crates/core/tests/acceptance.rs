//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criteria 5-7 play the full desk-scale game (5 seeds × 3 modes on the
//! default 5000-dialogue world) and take several minutes; they run only with
//! `--full` or `ATT_ACCEPTANCE_FULL=1` and are reported as SKIP otherwise.

use std::process::ExitCode;

use att_core::corpus::{generate_synthetic, Corpus, SynthWorldSpec, TokenId, Utterance};
use att_core::evalkit::{diversity_metrics, evaluate_attackers, AttackerSpec};
use att_core::game::{
    attack_frozen_defender, attack_phase, defense_phase, play_from, play_turn, pretrain_all, run_game, Arena,
    GameConfig, Mode, TrainingConfig,
};
use att_core::models::{Generator, Scorer, TinyCondLM, TinyScorer};
use att_core::numerics::{finite_diff_grad, relative_l2_error, Gradient, ParamVector, RngStream};
use att_core::run::{cmd_attack, cmd_eval, cmd_gen_synth, cmd_play, cmd_pretrain, RunConfig};
use att_core::training::{
    baseline_rewards, ensemble_score, random_negative_batch, rl_loss_and_grad, rl_loss_and_grad_with_rewards,
    sample_rollout, sl_loss, sl_loss_and_grad, EnsembleScorer, Pair,
};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn utt(t: &[TokenId]) -> Utterance {
    Utterance(t.to_vec())
}

fn random_utt(rng: &mut RngStream, vocab: usize, max_len: usize, min_len: usize) -> Utterance {
    let len = min_len + rng.below(max_len - min_len + 1);
    Utterance((0..len).map(|_| 2 + rng.below(vocab - 2) as TokenId).collect())
}

// ---------------------------------------------------------------- criterion 1

/// Scorer whose `h` is looked up from the response's first token.
struct TableScorer {
    params: ParamVector,
    table: Vec<f64>,
}

impl Scorer for TableScorer {
    fn params(&self) -> &ParamVector {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }
    fn score_h(&self, _: &[Utterance], y: &Utterance) -> f64 {
        self.table[y.tokens()[0] as usize]
    }
    fn score_h_grad(&self, c: &[Utterance], y: &Utterance, _: f64, _: &mut Gradient) -> f64 {
        self.score_h(c, y)
    }
}

fn formula_oracles() -> Verdict {
    let s = TableScorer { params: ParamVector::zeros(&[("w", 1)]), table: vec![1.0, 0.0] };
    let ctx = [utt(&[0])];
    let (h, m) = (utt(&[0]), utt(&[1]));
    let (loss, _) = sl_loss_and_grad(&s, &[Pair { context: &ctx, human: &h, machine: &m }]).unwrap();

    let r = baseline_rewards(&[0.8, 0.6]).unwrap();
    // 0.8, 0.6 and 0.1 are not representable; the rewards must be the
    // correctly rounded ±(0.8 - 0.6)/2 of the stored inputs
    let half = (0.8f64 - 0.6f64) / 2.0;
    let r_ok = r[0] == half && r[1] == -half && (r[0] - 0.1).abs() < 1e-16;

    let e = ensemble_score(0.25, 1.0);
    let e_err = (e - 0.5).abs();

    // 0.313262 is quoted to 6 places; the closed form is checked to 1e-9
    let closed = (loss - (1.0 + (-1.0f64).exp()).ln()).abs();
    verdict(
        closed < 1e-9 && (loss - 0.313262).abs() < 5e-7 && r_ok && e_err < 1e-12,
        format!("pairwise loss {loss:.9} (err {closed:.1e}); rewards ({:+.17}, {:+.17}); ensemble {e} (err {e_err:.1e})", r[0], r[1]),
    )
}

// ---------------------------------------------------------------- criterion 2

fn scorer_from(s: &TinyScorer, p: &[f64], v: usize, d: usize, h: usize, l: usize) -> TinyScorer {
    TinyScorer::from_params(ParamVector::from_parts(p.to_vec(), s.params().segments().to_vec()).unwrap(), v, d, h, l).unwrap()
}

fn gradient_suite() -> Verdict {
    let mut worst = [0.0f64; 3];
    for instance in 0..10u64 {
        let mut rng = RngStream::new(1000 + instance).substream("grad");
        let v = 6 + rng.below(10);
        let d = 2 + rng.below(3);
        let hid = 2 + rng.below(4);
        let l = 3 + rng.below(4);

        // pairwise SL loss
        let s = TinyScorer::new(v, d, hid, l, &mut rng);
        let n_pairs = 1 + rng.below(3);
        let data: Vec<(Vec<Utterance>, Utterance, Utterance)> = (0..n_pairs)
            .map(|_| {
                let ctx = (0..1 + rng.below(2)).map(|_| random_utt(&mut rng, v, l, 1)).collect();
                (ctx, random_utt(&mut rng, v, l, 0), random_utt(&mut rng, v, l, 0))
            })
            .collect();
        let batch: Vec<Pair> = data.iter().map(|(c, h, m)| Pair { context: c, human: h, machine: m }).collect();
        let (_, g) = sl_loss_and_grad(&s, &batch).unwrap();
        let fd = finite_diff_grad(|p| sl_loss(&scorer_from(&s, p, v, d, hid, l), &batch), s.params().values(), 1e-5).unwrap();
        worst[0] = worst[0].max(relative_l2_error(&g.values, &fd.values));

        // REINFORCE loss with the mean baseline
        let gen = TinyCondLM::new(v, d, l, &mut rng);
        let ctx = [random_utt(&mut rng, v, l, 1)];
        let judge = |_: &[Utterance], y: &Utterance| (y.len() as f64 / 4.0).min(1.0);
        let rollout = sample_rollout(&gen, &judge, &ctx, 4, &[1.0, 10.0], &mut rng);
        let rewards = baseline_rewards(&rollout.hypotheses.iter().map(|h| h.score).collect::<Vec<_>>()).unwrap();
        let (_, g) = rl_loss_and_grad(&gen, &rollout).unwrap();
        let fd = finite_diff_grad(
            |p| {
                let m = TinyCondLM::from_params(ParamVector::from_parts(p.to_vec(), gen.params().segments().to_vec()).unwrap(), v, d, l)
                    .unwrap();
                -rollout.hypotheses.iter().zip(&rewards).map(|(h, r)| m.log_prob(&ctx, &h.response) * r).sum::<f64>()
            },
            gen.params().values(),
            1e-5,
        )
        .unwrap();
        // an all-equal rollout has a zero gradient on both sides
        let e = if fd.l2_norm() == 0.0 { g.l2_norm() } else { relative_l2_error(&g.values, &fd.values) };
        worst[1] = worst[1].max(e);

        // HvR loss: true response against a randomly retrieved one
        let corpus = generate_synthetic(&SynthWorldSpec { num_dialogues: 60, num_topics: 3, noise_vocab_size: 6, seed: instance, ..Default::default() })
            .unwrap();
        let cv = corpus.vocab().len();
        let hvr = TinyScorer::new(cv, d, hid, corpus.max_len(), &mut rng);
        let train = corpus.subset(att_core::Split::Train);
        let batch = random_negative_batch(&train, 4, &mut rng).unwrap();
        let (_, g) = sl_loss_and_grad(&hvr, &batch).unwrap();
        let fd = finite_diff_grad(
            |p| sl_loss(&scorer_from(&hvr, p, cv, d, hid, corpus.max_len()), &batch),
            hvr.params().values(),
            1e-5,
        )
        .unwrap();
        worst[2] = worst[2].max(relative_l2_error(&g.values, &fd.values));
    }
    verdict(
        worst.iter().all(|&e| e < 1e-4),
        format!("worst relative L2 error over 10 instances: pairwise {:.2e}, REINFORCE {:.2e}, HvR {:.2e}", worst[0], worst[1], worst[2]),
    )
}

// ---------------------------------------------------------------- criterion 3

fn baseline_variance() -> Verdict {
    let corpus = generate_synthetic(&SynthWorldSpec { num_dialogues: 200, seed: 17, ..Default::default() }).unwrap();
    let mut init = RngStream::new(17).substream("variance");
    let gen = TinyCondLM::for_corpus(&corpus, 8, &mut init);
    let scorer = TinyScorer::for_corpus(&corpus, 8, 16, &mut init);
    let judge = EnsembleScorer::hvm_only(&scorer);
    let ctx = corpus.dialogues()[0].context.clone();

    let len = gen.params().len();
    let mut stats = [(vec![0.0; len], vec![0.0; len]), (vec![0.0; len], vec![0.0; len])];
    let rollouts = 200;
    for i in 0..rollouts {
        let mut rng = RngStream::new(17).substream("rollouts").fork(i);
        let rollout = sample_rollout(&gen, &judge, &ctx, 8, &[1.0], &mut rng);
        let raw: Vec<f64> = rollout.hypotheses.iter().map(|h| h.score).collect();
        let (_, with_b) = rl_loss_and_grad(&gen, &rollout).unwrap();
        let (_, no_b) = rl_loss_and_grad_with_rewards(&gen, &rollout, &raw).unwrap();
        for (k, g) in [with_b, no_b].iter().enumerate() {
            for (j, &x) in g.values.iter().enumerate() {
                stats[k].0[j] += x;
                stats[k].1[j] += x * x;
            }
        }
    }
    let n = rollouts as f64;
    let var = |(s, q): &(Vec<f64>, Vec<f64>)| s.iter().zip(q).map(|(s, q)| (q - s * s / n) / (n - 1.0)).sum::<f64>();
    let (vb, v0) = (var(&stats[0]), var(&stats[1]));
    verdict(vb <= v0, format!("summed gradient variance over {rollouts} rollouts: baseline {vb:.4e}, b=0 {v0:.4e}"))
}

// ---------------------------------------------------------------- criterion 4

/// Arena whose accuracies come from scripts; calls are logged.
#[derive(Default)]
struct Stub {
    attacker_acc: Vec<f64>,
    post_attack: Vec<f64>,
    defense_acc: Option<f64>,
    attack_steps: usize,
    defense_steps: usize,
    resets: usize,
    pool: usize,
    defended_on: Vec<Vec<usize>>,
    turn: usize,
    in_defense: bool,
}

impl Arena for Stub {
    fn reset_attacker(&mut self) {
        self.resets += 1;
    }
    fn attack(&mut self, steps: usize) -> att_core::Result<f64> {
        self.in_defense = false;
        self.attack_steps += steps;
        Ok(0.0)
    }
    fn attacker_accuracy(&mut self) -> att_core::Result<f64> {
        Ok(if self.attacker_acc.is_empty() { 0.9 } else { self.attacker_acc.remove(0) })
    }
    fn harvest(&mut self, turn: usize) -> att_core::Result<()> {
        self.turn = turn;
        self.pool += 1;
        self.in_defense = false;
        Ok(())
    }
    fn pool_len(&self) -> usize {
        self.pool
    }
    fn defend(&mut self, pool: &[usize], steps: usize) -> att_core::Result<f64> {
        self.in_defense = true;
        self.defense_steps += steps;
        self.defended_on.push(pool.to_vec());
        Ok(0.0)
    }
    fn pool_accuracies(&mut self, pool: &[usize]) -> att_core::Result<Vec<f64>> {
        let acc = match (self.in_defense, self.defense_acc) {
            (true, Some(a)) => a,
            _ => self.post_attack.get(self.turn.saturating_sub(1)).copied().unwrap_or(0.9),
        };
        Ok(vec![acc; pool.len()])
    }
}

fn stub_cfg(mode: Mode) -> GameConfig {
    GameConfig { mode, n_g: 110, n_d: 60, eval_every: 25, ..GameConfig::default() }
}

fn state_machine() -> Verdict {
    let mut failures = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            failures.push(what.to_string());
        }
    };

    // (a) attack phase
    let mut a = Stub { attacker_acc: vec![0.9, 0.5, 0.1], ..Default::default() };
    let out = attack_phase(&mut a, &stub_cfg(Mode::Att), 1).unwrap();
    check(out.steps == 50 && out.accuracy_trace == vec![0.9, 0.5] && a.pool == 1, "(a) early stop");
    let mut a = Stub::default();
    let out = attack_phase(&mut a, &stub_cfg(Mode::Att), 1).unwrap();
    check(out.steps == 110 && a.attack_steps == 110, "(a) N_G cap");

    // (b) defense phase
    let mut a = Stub { pool: 2, post_attack: vec![0.6], turn: 1, defense_acc: Some(0.8), ..Default::default() };
    let out = defense_phase(&mut a, &stub_cfg(Mode::Att)).unwrap();
    check(out.steps == 25, "(b) recovery stop");
    let mut a = Stub { pool: 2, post_attack: vec![0.6], turn: 1, defense_acc: Some(0.7), ..Default::default() };
    let out = defense_phase(&mut a, &stub_cfg(Mode::Att)).unwrap();
    check(out.steps == 60 && a.defense_steps == 60, "(b) N_D cap");

    // (c) convergence
    let script = vec![0.8, 0.7, 0.8, 0.8, 0.8, 0.8, 0.8, 0.1, 0.1];
    let mut a = Stub { pool: 1, post_attack: script, ..Default::default() };
    let c = GameConfig { m: 5, max_turns: 9, ..stub_cfg(Mode::Att) };
    let out = run_game(&mut a, &c, |_| Ok(())).unwrap();
    check(out.converged && out.records.len() == 7, "(c) m consecutive turns");
    let mut a = Stub { pool: 1, post_attack: vec![0.8, 0.8, 0.8, 0.8, 0.75, 0.8], ..Default::default() };
    let c = GameConfig { m: 5, max_turns: 6, ..stub_cfg(Mode::Att) };
    let out = run_game(&mut a, &c, |_| Ok(())).unwrap();
    check(!out.converged && out.records.len() == 6, "(c) accuracy equal to c_hi does not count");

    // (d) reset to θ_G(0) bit-exactly in ATT, never in GAN
    for (mode, expected) in [(Mode::Att, 1), (Mode::Gan, 0)] {
        let mut a = Stub::default();
        attack_phase(&mut a, &stub_cfg(mode), 1).unwrap();
        check(a.resets == expected, "(d) stub reset count");
    }
    let corpus = generate_synthetic(&SynthWorldSpec { num_dialogues: 1200, seed: 31, ..Default::default() }).unwrap();
    let cfg = GameConfig {
        n_g: 50,
        n_d: 50,
        m: 2,
        max_turns: 3,
        samples_per_attacker: 200,
        valid_contexts: 80,
        seed: 31,
        training: TrainingConfig { mle_epochs: 1, hvr_steps: 200, ..TrainingConfig::default() },
        ..GameConfig::default()
    };
    let base = pretrain_all(&corpus, &cfg).unwrap();
    let g0 = base.theta_g0.params().clone();
    for mode in [Mode::Att, Mode::Gan] {
        let c = GameConfig { mode, c_low: 0.01, ..cfg.clone() };
        let mut arena = base.with_config(&c).unwrap();
        let mut exact = Vec::new();
        for turn in 1..=3 {
            play_turn(&mut arena, &c, turn).unwrap();
            // the next attack phase starts from here in GAN; ATT resets first
            let mut probe = arena.clone();
            if mode.reinitializes_generator() {
                probe.reset_attacker();
            }
            exact.push(probe.generator.params().bit_eq(&g0));
        }
        match mode {
            Mode::Att => check(exact.iter().all(|&e| e), "(d) ATT reset is bit-exact"),
            _ => check(exact.iter().all(|&e| !e), "(d) GAN keeps its generator"),
        }
    }

    // (e) GAN defends on {A(0), latest}
    let mut a = Stub { pool: 4, post_attack: vec![0.6], turn: 1, defense_acc: Some(0.6), ..Default::default() };
    defense_phase(&mut a, &stub_cfg(Mode::Gan)).unwrap();
    check(!a.defended_on.is_empty() && a.defended_on.iter().all(|p| p == &vec![0, 3]), "(e) GAN pool");
    let c = GameConfig { mode: Mode::Gan, c_hi: 0.99, c_low: 0.01, n_d: 25, m: 3, ..cfg };
    let mut arena = base.with_config(&c).unwrap();
    let mut draws = Vec::new();
    for turn in 1..=3 {
        play_turn(&mut arena, &c, turn).unwrap();
        draws.push(arena.defense_draws.clone());
    }
    check(draws[1][1] == draws[0][1] && draws[2][2] == draws[1][2] && draws[2][3] > 0, "(e) GAN draws");

    verdict(failures.is_empty(), if failures.is_empty() { "(a)-(e) hold".to_string() } else { failures.join(", ") })
}

// ------------------------------------------------------------ criteria 5 to 7

struct SeedResult {
    seed: u64,
    finals: [f64; 3],
    converged: [bool; 3],
    turns: [usize; 3],
    gan_worst_turn: f64,
    sl_probe: f64,
    att_probe: f64,
    parrot: f64,
    d2_att: f64,
    d2_nd: f64,
}

fn play_seed(seed: u64) -> SeedResult {
    let corpus: Corpus = generate_synthetic(&SynthWorldSpec { seed, ..Default::default() }).unwrap();
    let cfg = GameConfig { seed, ..GameConfig::default() };
    let base = pretrain_all(&corpus, &cfg).unwrap();
    let probe_rng = RngStream::new(seed).substream("game").substream("probe");

    let mut finals = [0.0; 3];
    let mut converged = [false; 3];
    let mut turns = [0; 3];
    let mut pools = Vec::new();
    let mut gan_worst_turn = 1.0;
    let (mut att_probe, mut parrot) = (0.0, 0.0);
    for (k, mode) in [Mode::Att, Mode::Gan, Mode::Nd].into_iter().enumerate() {
        let c = GameConfig { mode, ..cfg.clone() };
        let state = play_from(base.clone(), &c, |_| Ok(())).unwrap();
        finals[k] = state.final_min_accuracy().unwrap();
        converged[k] = state.converged;
        turns[k] = state.records.len();
        if mode == Mode::Gan {
            gan_worst_turn = state.records.iter().map(|r| r.post_attack_min).fold(1.0, f64::min);
        }
        if mode == Mode::Att {
            let defender = state.arena.defender();
            att_probe = attack_frozen_defender(&corpus, &base.theta_g0, &defender, 500, &[1.0], &c, &probe_rng)
                .unwrap()
                .final_accuracy;
            parrot = evaluate_attackers(&defender, &corpus, &[AttackerSpec::parrot()], &corpus_eval_rng(seed)).unwrap().rows[0]
                .accuracy;
        }
        pools.push(state.arena.pool.iter().map(|d| d.responses()).collect::<Vec<_>>());
    }
    let sl = EnsembleScorer::new(&base.hvm, Some(&base.hvr));
    let sl_probe = attack_frozen_defender(&corpus, &base.theta_g0, &sl, 500, &[1.0], &cfg, &probe_rng).unwrap().final_accuracy;

    // distinct-2 of A(0..k) with k the shorter of the two games
    let k = pools[0].len().min(pools[2].len());
    let pooled = |p: &Vec<Vec<Utterance>>| p[..k].iter().flatten().cloned().collect::<Vec<_>>();
    let (_, d2_att) = diversity_metrics(&pooled(&pools[0]));
    let (_, d2_nd) = diversity_metrics(&pooled(&pools[2]));
    SeedResult { seed, finals, converged, turns, gan_worst_turn, sl_probe, att_probe, parrot, d2_att, d2_nd }
}

fn corpus_eval_rng(seed: u64) -> RngStream {
    RngStream::new(seed).substream("eval")
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn game_criteria(results: &[SeedResult]) -> [Verdict; 3] {
    let att_mean = mean(results.iter().map(|r| r.finals[0]));
    let gan_mean = mean(results.iter().map(|r| r.finals[1]));
    let nd_mean = mean(results.iter().map(|r| r.finals[2]));
    let att_all_converged = results.iter().all(|r| r.converged[0]);
    let gan_lower = results.iter().filter(|r| r.finals[1] < r.finals[0]).count();
    let gan_worst = results.iter().map(|r| r.gan_worst_turn).fold(1.0, f64::min);
    let c5 = verdict(
        att_all_converged && att_mean > 0.75 && gan_lower >= 4 && gan_worst < 0.5,
        format!(
            "ATT converged {}/5, mean final {att_mean:.3} (> 0.75); GAN mean final {gan_mean:.3}, below ATT in {gan_lower}/5 seeds (≥ 4); lowest GAN turn {gan_worst:.3} (< 0.5)",
            results.iter().filter(|r| r.converged[0]).count()
        ),
    );

    let sl = mean(results.iter().map(|r| r.sl_probe));
    let att = mean(results.iter().map(|r| r.att_probe));
    let parrot = mean(results.iter().map(|r| r.parrot));
    let c6 = verdict(
        sl < 0.55 && att >= 0.70 && parrot >= 0.90,
        format!("500-step probe vs SL {sl:.3} (< 0.55), vs ATT {att:.3} (≥ 0.70); ATT vs Parrot {parrot:.3} (≥ 0.90)"),
    );

    let nd_lower = results.iter().filter(|r| r.d2_nd < r.d2_att).count();
    let c7 = verdict(
        nd_lower >= 4 && nd_mean < att_mean,
        format!("ND distinct-2 below ATT in {nd_lower}/5 seeds (≥ 4); ND mean final {nd_mean:.3} vs ATT {att_mean:.3}"),
    );
    [c5, c6, c7]
}

// ---------------------------------------------------------------- criterion 8

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let mut cfg = RunConfig::default();
        for (k, v) in [
            ("seed", "12"),
            ("dialogues", "800"),
            ("hvr_steps", "1000"),
            ("mle_epochs", "1"),
            ("max_turns", "2"),
            ("m", "1"),
            ("n_g", "50"),
            ("n_d", "50"),
            ("samples_per_attacker", "150"),
            ("valid_contexts", "60"),
            ("budget", "50"),
        ] {
            cfg.set(k, v).unwrap();
        }
        let root = tmp.path().join(name);
        let s = |p: std::path::PathBuf| p.to_str().unwrap().to_string();
        cfg.out_dir = s(root.join("synth"));
        cmd_gen_synth(&cfg).unwrap();
        cfg.out_dir = s(root.join("pretrain"));
        cmd_pretrain(&cfg).unwrap();
        cfg.out_dir = s(root.join("play"));
        let play = cmd_play(&cfg).unwrap();

        let mut probe = cfg.clone();
        probe.corpus = s(root.join("synth/corpus.jsonl"));
        probe.vocab = s(root.join("synth/vocab.txt"));
        probe.generator = s(play.dir.theta_g0());
        probe.defender = s(play.dir.final_hvm());
        probe.hvr = s(play.dir.hvr());
        probe.out_dir = s(root.join("attack"));
        let attack = cmd_attack(&probe).unwrap();
        probe.attackers = format!("parrot,generator:{}@1", s(attack.dir.probe_attacker()));
        probe.out_dir = s(root.join("eval"));
        cmd_eval(&probe).unwrap();
        root
    };
    let (a, b) = (run("a"), run("b"));
    let files = ["synth/corpus.jsonl", "pretrain/pretrain.csv", "play/turns.csv", "play/eval.csv", "attack/attack.csv", "eval/eval.csv"];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(a.join(f)).unwrap() != std::fs::read(b.join(f)).unwrap())
        .collect();
    verdict(
        differing.is_empty(),
        if differing.is_empty() { format!("{} outputs byte-identical across reruns", files.len()) } else { format!("differ: {}", differing.join(", ")) },
    )
}

fn main() -> ExitCode {
    let full = std::env::args().any(|a| a == "--full") || std::env::var("ATT_ACCEPTANCE_FULL").is_ok_and(|v| v == "1");
    let mut lines: Vec<(u32, &str, Option<Verdict>)> = vec![
        (1, "formula oracles", Some(formula_oracles())),
        (2, "gradient suite", Some(gradient_suite())),
        (3, "baseline variance", Some(baseline_variance())),
        (4, "orchestrator state machine", Some(state_machine())),
    ];
    if full {
        let results: Vec<SeedResult> = (1..=5).map(play_seed).collect();
        for r in &results {
            println!(
                "  seed {}: turns ATT {} GAN {} ND {}; final ATT {:.3} GAN {:.3} ND {:.3}; GAN worst turn {:.3}; probes SL {:.3} ATT {:.3}; parrot {:.3}; distinct-2 ATT {:.3} ND {:.3}",
                r.seed, r.turns[0], r.turns[1], r.turns[2], r.finals[0], r.finals[1], r.finals[2], r.gan_worst_turn,
                r.sl_probe, r.att_probe, r.parrot, r.d2_att, r.d2_nd
            );
        }
        let [c5, c6, c7] = game_criteria(&results);
        lines.push((5, "game dynamics", Some(c5)));
        lines.push((6, "robustness", Some(c6)));
        lines.push((7, "diversity", Some(c7)));
    } else {
        for (k, name) in [(5, "game dynamics"), (6, "robustness"), (7, "diversity")] {
            lines.push((k, name, None));
        }
    }
    lines.push((8, "determinism", Some(determinism())));

    let mut failed = 0;
    for (k, name, v) in &lines {
        match v {
            Some(v) => {
                failed += usize::from(!v.pass);
                println!("criterion {k} {name}: {} ({})", if v.pass { "PASS" } else { "FAIL" }, v.detail);
            }
            None => println!("criterion {k} {name}: SKIP (run with --full)"),
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
