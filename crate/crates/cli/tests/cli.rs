use std::path::Path;
use std::process::{Command, Output};

fn att(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_att")).args(args).output().expect("spawn att")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &[&str] = &[
    "--dialogues", "800",
    "--hvr_steps", "2000",
    "--mle_epochs", "2",
    "--max_turns", "2",
    "--m", "1",
    "--n_g", "50",
    "--n_d", "50",
    "--samples_per_attacker", "200",
    "--valid_contexts", "60",
];

fn play(out: &Path) -> Output {
    let mut args = vec!["play", "--seed", "4", "--out_dir", out.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    att(&args)
}

#[test]
fn gen_synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let o = att(&["gen-synth", "--dialogues", "300", "--seed", "9", "--out_dir", dir.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["corpus.jsonl", "vocab.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn effective_config_is_printed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "# small world\ndialogues = 120\nseed = 3\n").unwrap();
    let out = tmp.path().join("out");
    let o = att(&["gen-synth", "--config", cfg.to_str().unwrap(), "--seed", "5", "--out_dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("# effective configuration"));
    assert!(text.contains("dialogues=120"), "{text}");
    assert!(text.contains("seed=5"), "flag must override file: {text}");
}

#[test]
fn zero_dialogues_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = att(&["gen-synth", "--dialogues", "0", "--out_dir", tmp.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("num_dialogues must be ≥ 1"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "seed = 1\nlearning_rate = 0.1\n").unwrap();
    let o = att(&["gen-synth", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_exits_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = att(&["gen-synth", "--dialogues", "200", "--out_dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let corpus = out.join("corpus.jsonl");
    let missing = tmp.path().join("nope.ckpt");
    let o = att(&[
        "eval",
        "--corpus", corpus.to_str().unwrap(),
        "--defender", missing.to_str().unwrap(),
        "--out_dir", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn play_then_attack_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let o = play(&a);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("eval parrot"));
    let o = play(&b);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["turns.csv", "eval.csv"] {
        let x = std::fs::read(a.join(f)).unwrap();
        assert!(!x.contains(&b'\r'));
        assert_eq!(x, std::fs::read(b.join(f)).unwrap(), "{f} differs between reruns");
    }

    let s = |p: &Path| p.to_str().unwrap().to_string();
    let corpus = s(&tmp.path().join("corpus.jsonl"));
    let vocab = s(&a.join("vocab.txt"));
    let o = att(&["gen-synth", "--dialogues", "800", "--seed", "4", "--out_dir", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let probe = tmp.path().join("probe");
    let o = att(&[
        "attack",
        "--corpus", &corpus,
        "--vocab", &vocab,
        "--generator", &s(&a.join("theta_g0.ckpt")),
        "--defender", &s(&a.join("theta_d0.ckpt")),
        "--budget", "50",
        "--out_dir", &s(&probe),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(probe.join("attack.csv").is_file());

    let attackers = format!("parrot,generator:{}@1", s(&probe.join("attacker.ckpt")));
    let o = att(&[
        "eval",
        "--corpus", &corpus,
        "--vocab", &vocab,
        "--defender", &s(&a.join("hvm_final.ckpt")),
        "--hvr", &s(&a.join("hvr.ckpt")),
        "--attackers", &attackers,
        "--out_dir", &s(&probe),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let eval = std::fs::read_to_string(probe.join("eval.csv")).unwrap();
    assert_eq!(eval.lines().count(), 3, "{eval}");
}
