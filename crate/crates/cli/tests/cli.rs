use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use noisemask::config::KEYS;
use noisemask::data::Dataset;
use noisemask::networks::{BackboneSpec, Checkpoint, ClassifierNet, ClassifierSpec};
use noisemask::Tensor;
use sha2::{Digest, Sha256};

const SUBCOMMANDS: [&str; 10] = [
    "gen-synth",
    "import-raw",
    "pretrain",
    "finetune",
    "train-baseline",
    "evaluate",
    "probe",
    "lowshot",
    "histograms",
    "gradcheck",
];

fn noisemask(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_noisemask"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn sha(path: &Path) -> String {
    format!("{:x}", Sha256::digest(fs::read(path).unwrap()))
}

const SMALL: &str = "data.bundle=d.nmds\n\
data.samples_per_class=8\n\
train.epochs=2\n\
train.finetune_epochs=1\n\
train.batch_size=16\n";

fn small_dataset(dir: &Path) {
    fs::write(dir.join("c.cfg"), SMALL).unwrap();
    ok(&noisemask(dir, &["gen-synth", "--config", "c.cfg", "--seed", "3", "--out", "d.nmds"]));
}

#[test]
fn gen_synth_twice_gives_identical_bundles() {
    let dir = tempfile::tempdir().unwrap();
    ok(&noisemask(dir.path(), &["gen-synth", "--seed", "0", "--out", "a.nmds"]));
    ok(&noisemask(dir.path(), &["gen-synth", "--seed", "0", "--out", "b.nmds"]));
    assert_eq!(sha(&dir.path().join("a.nmds")), sha(&dir.path().join("b.nmds")));
    assert!(dir.path().join("a.nmds.manifest").exists());
    assert!(dir.path().join("a.csv").exists());
    ok(&noisemask(dir.path(), &["gen-synth", "--seed", "1", "--out", "c.nmds"]));
    assert_ne!(sha(&dir.path().join("a.nmds")), sha(&dir.path().join("c.nmds")));
}

#[test]
fn pretrain_then_finetune_writes_history_with_header() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d);
    ok(&noisemask(d, &["pretrain", "--config", "c.cfg", "--out", "pre"]));
    for f in ["manifest.txt", "heated.nmck", "best.nmck", "history.csv", "validation.csv"] {
        assert!(d.join("pre").join(f).exists(), "missing {f}");
    }
    ok(&noisemask(d, &["finetune", "--config", "c.cfg", "--init", "pre/heated.nmck", "--out", "ft"]));
    let header = "epoch,split,loss,accuracy,macro_f1,lr_classifier,lr_policy,mask_mean,mask_std";
    for f in ["history.csv", "validation.csv"] {
        let text = fs::read_to_string(d.join("ft").join(f)).unwrap();
        assert_eq!(text.lines().next(), Some(header));
        assert_eq!(text.lines().count(), 2);
    }
    let heated = Checkpoint::load(&d.join("pre/heated.nmck")).unwrap();
    assert!(heated.policy.is_some() && heated.ema.is_some());
}

#[test]
fn manifest_as_config_reproduces_outputs_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d);
    ok(&noisemask(d, &["pretrain", "--config", "c.cfg", "--seed", "5", "--out", "r1"]));
    ok(&noisemask(d, &["pretrain", "--config", "r1/manifest.txt", "--out", "r2"]));
    for f in ["heated.nmck", "best.nmck", "history.csv", "validation.csv"] {
        assert_eq!(fs::read(d.join("r1").join(f)).unwrap(), fs::read(d.join("r2").join(f)).unwrap(), "{f}");
    }
    let manifest = fs::read_to_string(d.join("r1/manifest.txt")).unwrap();
    assert!(manifest.contains("train.seed=5\n"));
}

#[test]
fn evaluate_perfect_prediction_fixture_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let per_class = 20;
    let mut pixels = vec![0u8; per_class * 16];
    pixels.extend(vec![255u8; per_class * 16]);
    let labels: Vec<u16> = (0..2 * per_class).map(|i| (i / per_class) as u16).collect();
    let ds = Dataset::new(
        (1, 4, 4),
        2,
        pixels,
        labels.clone(),
        vec![0; 2 * per_class],
        labels.iter().map(|l| format!("c{l}")).collect(),
    )
    .unwrap();
    ds.save(&d.join("fixture.nmds")).unwrap();
    let spec = ClassifierSpec {
        backbone: BackboneSpec {
            in_channels: 1,
            image_h: 4,
            image_w: 4,
            blocks: vec![(1, 1)],
        },
        num_classes: 2,
    };
    let mut kernel = vec![0.0; 9];
    kernel[4] = 1.0;
    let params = vec![
        Tensor::new(vec![1, 1, 3, 3], kernel).unwrap(),
        Tensor::zeros(&[1]),
        Tensor::new(vec![1, 2], vec![-1.0, 1.0]).unwrap(),
        Tensor::new(vec![2], vec![0.1, 0.0]).unwrap(),
    ];
    let net = ClassifierNet::from_params(spec, params).unwrap();
    Checkpoint::classifier_only(net).save(&d.join("perfect.nmck")).unwrap();
    let out = noisemask(
        d,
        &[
            "evaluate",
            "--set",
            "data.bundle=fixture.nmds",
            "--set",
            "eval.split=test",
            "--init",
            "perfect.nmck",
            "--out",
            "ev",
        ],
    );
    ok(&out);
    let csv = fs::read_to_string(d.join("ev/metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("scope,class,precision,recall,f1,support,auroc,balanced_accuracy,accuracy")
    );
    let macro_row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(macro_row[0], "macro");
    assert_eq!(macro_row[4].parse::<f64>().unwrap(), 1.0);
    assert_eq!(macro_row[8].parse::<f64>().unwrap(), 1.0);
}

#[test]
fn help_of_every_subcommand_lists_every_key_with_default() {
    let dir = tempfile::tempdir().unwrap();
    for sub in SUBCOMMANDS {
        let out = noisemask(dir.path(), &[sub, "--help"]);
        ok(&out);
        let text = String::from_utf8(out.stdout).unwrap();
        for k in KEYS {
            assert!(text.contains(&format!("{}={}", k.key, k.default)), "{sub} --help misses {}", k.key);
        }
    }
}

#[test]
fn divergence_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d);
    let out = noisemask(
        d,
        &["pretrain", "--config", "c.cfg", "--set", "train.divergence_guard=0.001", "--out", "dv"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("divergence"));
    assert!(d.join("dv/manifest.txt").exists());
}

#[test]
fn config_and_io_errors_have_their_codes_and_name_the_culprit() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = noisemask(d, &["pretrain", "--set", "train.lr_clasifier=0.1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.lr_clasifier"));

    fs::write(d.join("bad.cfg"), "mask.blur_kernel=13\nmodel.depth=4\n").unwrap();
    let out = noisemask(d, &["gen-synth", "--config", "bad.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.depth"));

    let out = noisemask(d, &["evaluate", "--set", "data.bundle=nope.nmds", "--init", "x.nmck", "--out", "e"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.nmds"));

    let out = noisemask(d, &["no-such-command"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn probe_lowshot_and_histograms_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d);
    ok(&noisemask(d, &["pretrain", "--config", "c.cfg", "--out", "pre"]));
    let cfg = ["--config", "c.cfg", "--init", "pre/heated.nmck"];
    let run = |extra: &[&str]| {
        let mut args: Vec<&str> = extra[..1].to_vec();
        args.extend_from_slice(&cfg);
        args.extend_from_slice(&extra[1..]);
        ok(&noisemask(d, &args));
    };
    run(&["probe", "--set", "eval.probe_trials=2", "--set", "eval.probe_max_epochs=5", "--out", "pr"]);
    run(&["lowshot", "--set", "eval.lowshot_shots=1,2,4", "--set", "eval.lowshot_trials=3", "--out", "ls"]);
    run(&["histograms", "--out", "hi"]);
    run(&["histograms", "--mask", "uniform", "--out", "hu"]);
    assert!(fs::read_to_string(d.join("pr/probe.csv")).unwrap().contains("\nmean,"));
    let ls = fs::read_to_string(d.join("ls/lowshot.csv")).unwrap();
    assert_eq!(ls.lines().next(), Some("shot,trials,mean_macro_f1,ci95_half_width,min,max"));
    assert_eq!(ls.lines().count(), 4);
    let hist = fs::read_to_string(d.join("hi/histograms.csv")).unwrap();
    assert_eq!(
        hist.lines().next(),
        Some("image_id,bin_lo,bin_hi,count_original,count_masked,count_mask")
    );
    assert!(fs::read_to_string(d.join("hi/histogram_summary.txt")).unwrap().contains("dispersion_masked="));
}

#[test]
fn import_raw_round_trips_into_a_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let n = 12;
    fs::write(d.join("img.u8"), (0..n * 4).map(|i| (i * 5) as u8).collect::<Vec<u8>>()).unwrap();
    let mut csv = String::from("label,modality\n");
    for i in 0..n {
        csv.push_str(&format!("{},{}\n", i % 2, i % 3));
    }
    fs::write(d.join("labels.csv"), csv).unwrap();
    let sets = [
        "data.raw_images=img.u8",
        "data.raw_labels=labels.csv",
        "data.raw_height=2",
        "data.raw_width=2",
        "data.raw_classes=2",
    ];
    let mut args = vec!["import-raw", "--out", "raw.nmds"];
    for s in &sets {
        args.extend(["--set", s]);
    }
    ok(&noisemask(d, &args));
    let ds = Dataset::load(&d.join("raw.nmds")).unwrap();
    assert_eq!((ds.len(), ds.height(), ds.num_classes()), (n, 2, 2));
    assert_eq!(ds.modality(4), 1);
}

#[test]
fn gradcheck_writes_passing_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = noisemask(dir.path(), &["gradcheck", "--set", "eval.gradcheck_seeds=2", "--out", "gc"]);
    ok(&out);
    let csv = fs::read_to_string(dir.path().join("gc/gradcheck.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")), "{csv}");
}
