use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use clap::CommandFactory;
use maskedclip::cli::{Cli, RunManifest};
use maskedclip::evalkit::EvalRecord;
use maskedclip::trainer::read_log;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskedclip")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn gen(dir: &Path, name: &str, seed: &str) -> String {
    let path = dir.join(name).display().to_string();
    let out = run(&[
        "gen-data", "--paired", "48", "--unpaired", "48", "--classes", "4", "--size", "16x16", "--channels", "1",
        "--max-text-len", "8", "--seed", seed, "--out", &path,
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    path
}

fn pretrain(bundle: &str, out_dir: &Path, extra: &[&str]) -> Output {
    let dir = out_dir.display().to_string();
    let mut args = vec![
        "pretrain", "--bundle", bundle, "--out-dir", &dir, "--model", "tiny", "--paired-batch", "8",
        "--unpaired-batch", "8", "--quiet",
    ];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn gen_data_is_deterministic_and_validates_flags() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.mcdb", "7");
    let b = gen(dir.path(), "b.mcdb", "7");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let manifest: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.seed, 7);
    assert!(manifest.artifacts.values().all(|p| p.exists()));

    let out = run(&["gen-data", "--paired", "10", "--unpaired", "10", "--classes", "1", "--out", &a]);
    assert_eq!(code(&out), 2);
    let out = run(&["gen-data", "--paired", "100", "--unpaired", "200", "--classes", "4", "--seed", "7"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--out"));
    let out = run(&["gen-data", "--paired", "4", "--unpaired", "4", "--size", "10x16", "--out", &a]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn pretrain_writes_log_checkpoint_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = gen(dir.path(), "d.mcdb", "1");
    let run_dir = dir.path().join("run");
    let start = Instant::now();
    let out = pretrain(&bundle, &run_dir, &["--epochs", "1", "--variant", "mae_only"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(start.elapsed().as_secs() < 60);
    let log = read_log(&run_dir.join("train_log.csv")).unwrap();
    assert_eq!(log.len(), 6);
    assert!(log.iter().all(|r| r.losses.lg_clip == 0.0 && r.losses.mfd == 0.0));
    let manifest: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.config["train"]["mask_ratio"], 0.75);
    assert!(manifest.finished_unix.is_some());
    assert!(manifest.artifacts.values().all(|p| p.exists()));

    // same seed, same bytes
    let again = dir.path().join("again");
    pretrain(&bundle, &again, &["--epochs", "1", "--variant", "mae_only"]);
    for f in ["train_log.csv", "checkpoint.mclp"] {
        assert_eq!(std::fs::read(run_dir.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap());
    }
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = gen(dir.path(), "c.mcdb", "2");
    let cfg = dir.path().join("train.toml");
    std::fs::write(&cfg, "epochs = 2\nmask-ratio = 0.5\nvariant = \"clip_only\"\n").unwrap();
    let cfg = cfg.display().to_string();
    let run_dir = dir.path().join("run");
    let out = pretrain(&bundle, &run_dir, &["--config", &cfg, "--variant", "mae_only"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let manifest: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json")).unwrap()).unwrap();
    let train = &manifest.config["train"];
    assert_eq!(train["epochs"], 2);
    assert_eq!(train["mask_ratio"], 0.5);
    assert_eq!(train["variant"], "mae_only");
    assert_eq!(train["base_lr"], 1.5e-4);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "epoch = 2\n").unwrap();
    let out = pretrain(&bundle, &run_dir, &["--config", &bad.display().to_string()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn pretrain_reports_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = gen(dir.path(), "e.mcdb", "3");
    let out = pretrain(&bundle, dir.path(), &["--variant", "mae_plus"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("maskedclip"));
    let missing = dir.path().join("nope.mcdb").display().to_string();
    let out = pretrain(&missing, dir.path(), &["--epochs", "1"]);
    assert_eq!(code(&out), 3);
    let out = pretrain(&bundle, dir.path(), &["--epochs", "2", "--warmup-epochs", "2"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn eval_samples_label_fractions_and_writes_records() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = gen(dir.path(), "f.mcdb", "4");
    let run_dir = dir.path().join("run");
    assert_eq!(code(&pretrain(&bundle, &run_dir, &["--epochs", "1"])), 0);
    let ckpt = run_dir.join("checkpoint.mclp").display().to_string();
    let res = dir.path().join("r.json").display().to_string();
    let out = run(&["eval", "--checkpoint", &ckpt, "--bundle", &bundle, "--label-fraction", "0.1", "--out", &res]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rec: EvalRecord = serde_json::from_str(&std::fs::read_to_string(&res).unwrap()).unwrap();
    // 48 items, 12 per class: 4 held out per class, 32 training rows
    assert_eq!(rec.result.test_size, 16);
    assert_eq!(rec.result.train_size, 3);
    assert_eq!(rec.result.label_fraction, 0.1);

    let out = run(&["eval", "--checkpoint", &ckpt, "--bundle", &bundle, "--label-fraction", "1.1", "--out", &res]);
    assert_eq!(code(&out), 2);
    let out = run(&[
        "eval", "--checkpoint", &ckpt, "--bundle", &bundle, "--mode", "finetune", "--finetune-epochs", "2",
        "--out", &res,
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rec: EvalRecord = serde_json::from_str(&std::fs::read_to_string(&res).unwrap()).unwrap();
    assert_eq!(rec.mode, "finetune");
    assert_eq!(rec.result.train_size, 32);

    let other = gen(dir.path(), "g.mcdb", "5");
    let missing = dir.path().join("none.mclp").display().to_string();
    let out = run(&["eval", "--checkpoint", &missing, "--bundle", &other, "--out", &res]);
    assert_eq!(code(&out), 3);
}

#[test]
fn verification_commands_report_every_loss() {
    let out = run(&["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["mim", "i2t", "t2i", "lg_clip", "mfd", "total"] {
        assert!(text.lines().any(|l| l.starts_with(name) && l.ends_with("PASS")), "{text}");
    }
    let out = run(&["gradcheck", "--corrupt-gradient", "1.01"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8(out.stdout).unwrap().contains("FAIL"));

    let out = run(&["losscheck"]);
    assert_eq!(code(&out), 0);
    assert!(!String::from_utf8(out.stdout).unwrap().contains("FAIL"));
}

#[test]
fn every_subcommand_documents_its_flags() {
    let cli = Cli::command();
    for sub in cli.get_subcommands() {
        let name = sub.get_name();
        let out = run(&[name, "--help"]);
        assert_eq!(code(&out), 0);
        let help = String::from_utf8(out.stdout).unwrap();
        for arg in sub.get_arguments().filter(|a| !a.is_hide_set()) {
            if let Some(long) = arg.get_long() {
                assert!(help.contains(&format!("--{long}")), "{name} --help lacks --{long}");
            }
        }
    }
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["frobnicate"])), 2);
}
