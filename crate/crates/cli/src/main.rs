//! `att`: command-line front end.
//!
//! Every subcommand accepts `--config <file>` plus one `--<key> <value>` flag
//! per configuration key; flags override the file. The fully resolved
//! configuration is printed before the command runs.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use att_core::run::{cmd_attack, cmd_eval, cmd_gen_synth, cmd_play, cmd_pretrain, RunConfig};
use clap::{Arg, ArgMatches, Command};

const COMMANDS: [(&str, &str); 5] = [
    ("gen-synth", "Generate the synthetic corpus (corpus.jsonl, vocab.txt)"),
    ("pretrain", "Pre-train the generator, HvM and HvR and write their checkpoints"),
    ("play", "Pre-train, play the attack-defense game and evaluate the result"),
    ("attack", "Train a fresh attacker against a frozen defender"),
    ("eval", "Evaluate attackers against a defender checkpoint"),
];

fn cli() -> Command {
    let mut root = Command::new("att")
        .about("Adversarial Turing Test at desk scale")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in COMMANDS {
        let mut sub = Command::new(name).about(about).arg(
            Arg::new("config").long("config").value_name("FILE").help("key=value configuration file"),
        );
        for (key, doc) in RunConfig::KEYS {
            sub = sub.arg(Arg::new(*key).long(*key).value_name("VALUE").help(*doc));
        }
        root = root.subcommand(sub);
    }
    root
}

fn resolve(m: &ArgMatches) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = m.get_one::<String>("config") {
        cfg.merge_file(&PathBuf::from(path)).with_context(|| format!("reading config {path}"))?;
    }
    for (key, _) in RunConfig::KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn run(name: &str, cfg: &RunConfig) -> anyhow::Result<()> {
    match name {
        "gen-synth" => {
            let dir = cmd_gen_synth(cfg)?;
            println!("wrote {} and {}", dir.corpus().display(), dir.vocab().display());
        }
        "pretrain" => {
            let (dir, arena) = cmd_pretrain(cfg)?;
            println!("theta_d0 accuracy on A(0): {:.4}", arena.pretrain_accuracy);
            println!("checkpoints in {}", dir.root.display());
        }
        "play" => {
            let s = cmd_play(cfg)?;
            println!("converged={} turns={} final_min_acc={:.4}", s.converged, s.turns, s.final_min_accuracy);
            for r in &s.report.rows {
                println!("eval {}: accuracy {:.4} distinct2 {:.4}", r.attacker, r.accuracy, r.distinct2);
            }
            println!("run directory {}", s.dir.root.display());
        }
        "attack" => {
            let s = cmd_attack(cfg)?;
            println!(
                "steps={} initial_acc={:.4} final_acc={:.4} min_acc={:.4}",
                s.steps, s.initial_accuracy, s.final_accuracy, s.min_accuracy
            );
            println!("attacker checkpoint {}", s.dir.probe_attacker().display());
        }
        "eval" => {
            let (dir, report) = cmd_eval(cfg)?;
            for r in &report.rows {
                println!("{}: n={} accuracy {:.4} distinct1 {:.4} distinct2 {:.4}", r.attacker, r.n_eval, r.accuracy, r.distinct1, r.distinct2);
            }
            println!("wrote {}", dir.eval_csv().display());
        }
        other => unreachable!("unknown subcommand {other}"),
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> ExitCode {
    match err.downcast_ref::<att_core::Error>() {
        Some(att_core::Error::Checkpoint { .. }) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let cfg = match resolve(sub) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    println!("# effective configuration");
    print!("{}", cfg.to_text());
    match run(name, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
