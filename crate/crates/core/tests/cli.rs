//! The `mom` binary end to end.

mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::corpus_path;
use mom::analysis::read_trace_csv;
use mom::assembly::Policy;
use mom::config::MomConfig;
use mom::io::save_model;
use mom::model::{ModelSpec, MomModel};
use mom::routing::RouterKind;
use mom_tensor::DType;

fn mom(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mom")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    let text = format!(
        "preset = tiny\nmom = K2H2S\ncorpus = {}\nout_dir = out\nsteps = 12\nphase2_steps = 8\neval_every = 4\neval_windows = 8\n{extra}",
        corpus_path().display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn profile_reports_deltas_against_the_baseline() {
    let o = mom(&[
        "profile", "--dims", "gpt2-small", "--plan", "[1-1-4-1-4-1]", "--mom", "K3H1S", "--seq-len", "1024", "--baseline", "K1H4",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let config = text.lines().find(|l| l.starts_with("config   K3H1S")).unwrap();
    assert!(config.contains("TFLOPs 0.238 (-18.2%)"), "{config}");
    let baseline = text.lines().find(|l| l.starts_with("baseline K1H4")).unwrap();
    assert_eq!(baseline.matches("(+0.0%)").count(), 3, "{baseline}");
}

#[test]
fn profile_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("cost.csv");
    let o = mom(&[
        "profile", "--dims", "d=64,heads=4,d_ff=256,len=128,vocab=256", "--plan", "[1-4-1]", "--mom", "K2H2S", "--baseline", "K1H4",
        "--csv", csv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "config,params,flops,weight_bytes,act_bytes");
    assert_eq!(lines.len(), 3);
    assert!(lines[1..].iter().any(|l| l.starts_with("K2H2S,")));
}

#[test]
fn bad_arguments_exit_with_distinct_codes() {
    let o = mom(&["profile", "--dims", "tiny", "--plan", "[1-4-1]", "--mom", "K2X"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = mom(&["profile", "--plan", "[1-4-1]"]);
    assert_eq!(o.status.code(), Some(1));
    let o = mom(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(mom(&["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "learnign_rate = 3\n");
    let o = mom(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learnign_rate"), "{}", stderr(&o));
}

#[test]
fn phase_two_needs_a_phase_one_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = mom(&["train", "--config", cfg.to_str().unwrap(), "--phase", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--init-from"), "{}", stderr(&o));
}

#[test]
fn train_trace_analyze_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("out");

    let o = mom(&["train", "--config", cfg, "--phase", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("phase1: final val_loss="));
    let p1 = out.join("phase1.ckpt");
    let o = mom(&["train", "--config", cfg, "--phase", "2", "--init-from", p1.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(out.join("phase2.metrics.log")).unwrap();
    assert_eq!(log.lines().count(), 8);
    assert!(log.lines().next().unwrap().starts_with("step=1 phase=2 "));

    let input = dir.path().join("input.txt");
    std::fs::write(&input, "the quick brown fox jumps over the lazy dog and keeps running").unwrap();
    let trace = dir.path().join("trace.csv");
    let o = mom(&[
        "trace", "--ckpt", out.join("phase2.ckpt").to_str().unwrap(), "--input", input.to_str().unwrap(), "--out",
        trace.to_str().unwrap(), "--seq-len", "16",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let records = read_trace_csv(std::fs::File::open(&trace).unwrap()).unwrap();
    // 3 sequences of 16 tokens, 2 steps, 2 kinds.
    assert_eq!(records.len(), 3 * 16 * 2 * 2);
    assert!(records.iter().all(|r| r.selected.len() == 2));

    let o = mom(&["analyze", "--trace", trace.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("A: skip rate"));
    assert!(dir.path().join("transitions.csv").is_file());
    assert!(dir.path().join("loads.csv").is_file());
}

#[test]
fn vanilla_policy_trace_selects_modules_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let (c, _) = mom::config::ModelConfig::preset("tiny").unwrap();
    let spec = ModelSpec {
        config: c,
        plan: "[3]".parse().unwrap(),
        mom: MomConfig::new(1, 3, false),
        policy: Policy::Vanilla,
        router: RouterKind::Gru,
        dtype: DType::F32,
    };
    let ckpt = dir.path().join("v.ckpt");
    save_model(&MomModel::new(spec, 0).unwrap(), &ckpt, &[]).unwrap();
    let input = dir.path().join("in.txt");
    std::fs::write(&input, "abcdefgh").unwrap();
    let trace = dir.path().join("t.csv");
    let o = mom(&[
        "trace", "--ckpt", ckpt.to_str().unwrap(), "--input", input.to_str().unwrap(), "--out", trace.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let records = read_trace_csv(std::fs::File::open(&trace).unwrap()).unwrap();
    assert_eq!(records.len(), 8 * 3 * 2);
    assert!(records.iter().all(|r| r.selected == vec![r.step]));
}

#[test]
fn analyze_fixture_matches_hand_tally() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/trace_small.csv");
    let o = mom(&["analyze", "--trace", fixture.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("A: rows without support: 2"));
    assert!(stdout(&o).contains("A: skip rate 0.1667"));

    let text = std::fs::read_to_string(dir.path().join("transitions.csv")).unwrap();
    let prob = |from: usize, to: usize| -> f64 {
        let key = format!("A,{from},{to},");
        text.lines().find_map(|l| l.strip_prefix(&key)).unwrap().parse().unwrap()
    };
    // Token 0 goes 0 -> 1 -> SKIP, token 1 goes 0 -> 0 -> 1.
    let want = [[1.0 / 3.0, 2.0 / 3.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0]];
    for (i, row) in want.iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            assert!((prob(i, j) - p).abs() < 1e-12, "({i},{j})");
        }
    }
}

#[test]
fn analyze_rejects_an_empty_trace() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    let o = mom(&["analyze", "--trace", empty.to_str().unwrap()]);
    assert_ne!(o.status.code(), Some(0));
    let header_only = dir.path().join("header.csv");
    std::fs::write(&header_only, "seq,pos,chunk,step,kind,n_modules,selected,gates\n").unwrap();
    let o = mom(&["analyze", "--trace", header_only.to_str().unwrap()]);
    assert_ne!(o.status.code(), Some(0));
    assert!(!stderr(&o).is_empty());
}
