//! End-to-end tests of the `jmvae` binary: exit codes, output files, and the
//! documented determinism guarantees.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use jmvae_cli::pgm::read_pgm;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_jmvae"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn temp_root() -> PathBuf {
    let dir = std::env::temp_dir().join("jmvae_cli_tests");
    std::fs::create_dir_all(&dir).expect("temp dir");
    dir
}

const TOY_SELECTOR: &str =
    "toy:classes=3,dim=12,per_class=50,noise=0.05,seed=5,fraction=0.8,part=test";

fn write_train_config(path: &Path, variant: &str, alpha: f64, epochs: usize, out_dir: &Path) {
    let cfg = format!(
        "variant = {variant}\n\
         precision = f32\n\
         latent_dim = 2\n\
         enc_hidden = 16\n\
         shared_dim = 8\n\
         dec_hidden = 16\n\
         alpha = {alpha}\n\
         epochs = {epochs}\n\
         batch_size = 20\n\
         learning_rate = 0.003\n\
         warmup_epochs = 20\n\
         seed = 5\n\
         resample_binarization = true\n\
         eval_every = 0\n\
         dataset = toy\n\
         toy.classes = 3\n\
         toy.dim = 12\n\
         toy.per_class = 50\n\
         toy.noise = 0.05\n\
         toy.train_fraction = 0.8\n\
         out_dir = {}\n",
        out_dir.display()
    );
    std::fs::write(path, cfg).expect("config written");
}

/// Well-trained jmvae-kl checkpoint shared across tests.
fn trained_jmkl() -> &'static Path {
    static CKPT: OnceLock<PathBuf> = OnceLock::new();
    CKPT.get_or_init(|| {
        let dir = temp_root().join("fixture_jmkl");
        let cfg = temp_root().join("fixture_jmkl.cfg");
        write_train_config(&cfg, "jmvae-kl", 0.3, 60, &dir);
        let out = run(&["train", "--config", cfg.to_str().expect("utf8 path")]);
        assert!(out.status.success(), "fixture training failed: {out:?}");
        dir.join("final.jmck")
    })
}

/// Briefly-trained VAE checkpoint for variant-mismatch cases.
fn trained_vae() -> &'static Path {
    static CKPT: OnceLock<PathBuf> = OnceLock::new();
    CKPT.get_or_init(|| {
        let dir = temp_root().join("fixture_vae");
        let cfg = temp_root().join("fixture_vae.cfg");
        write_train_config(&cfg, "vae", 0.0, 3, &dir);
        let out = run(&["train", "--config", cfg.to_str().expect("utf8 path")]);
        assert!(out.status.success(), "vae fixture training failed: {out:?}");
        dir.join("final.jmck")
    })
}

#[test]
fn train_writes_metrics_checkpoints_and_frozen_config() {
    let dir = temp_root().join("train_outputs");
    let cfg = temp_root().join("train_outputs.cfg");
    let text = format!(
        "variant = jmvae-zero\nprecision = f32\nlatent_dim = 2\nenc_hidden = 8\n\
         shared_dim = 4\ndec_hidden = 8\nepochs = 6\nbatch_size = 20\n\
         learning_rate = 0.003\nwarmup_epochs = 3\nseed = 1\n\
         resample_binarization = true\neval_every = 2\ndataset = toy\n\
         toy.classes = 3\ntoy.dim = 12\ntoy.per_class = 20\ntoy.noise = 0.05\n\
         toy.train_fraction = 0.8\nout_dir = {}\n",
        dir.display()
    );
    std::fs::write(&cfg, text).expect("config written");
    let out = run(&["train", "--config", cfg.to_str().expect("utf8 path")]);
    assert!(out.status.success(), "{out:?}");

    let metrics = std::fs::read_to_string(dir.join("metrics.csv")).expect("metrics exist");
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next(),
        Some("epoch,beta,total,kl_prior,recon_x,recon_w,kl_sx,kl_sw,seconds")
    );
    assert_eq!(lines.count(), 6, "one row per epoch");

    assert!(dir.join("final.jmck").is_file());
    assert!(dir.join("config.resolved").is_file());
    // eval_every = 2 over 6 epochs -> checkpoints after epochs 2, 4, 6.
    for n in [2, 4, 6] {
        assert!(dir.join(format!("ckpt_epoch_{n:04}.jmck")).is_file());
    }
}

#[test]
fn train_with_missing_dataset_path_exits_2_without_outputs() {
    let dir = temp_root().join("train_missing_idx_out");
    let cfg = temp_root().join("train_missing_idx.cfg");
    let text = format!(
        "variant = vae\nlatent_dim = 2\nenc_hidden = 8\nshared_dim = 4\ndec_hidden = 8\n\
         epochs = 1\ndataset = idx\nidx.train_images = /nonexistent/images.idx\n\
         idx.train_labels = /nonexistent/labels.idx\nout_dir = {}\n",
        dir.display()
    );
    std::fs::write(&cfg, text).expect("config written");
    let out = run(&["train", "--config", cfg.to_str().expect("utf8 path")]);
    assert_eq!(out.status.code(), Some(2), "{out:?}");
    assert!(!dir.exists(), "no output files on config errors");
}

#[test]
fn train_rejects_unknown_config_keys() {
    let cfg = temp_root().join("unknown_key.cfg");
    std::fs::write(&cfg, "variant = vae\nlatent_dmi = 2\n").expect("config written");
    let out = run(&["train", "--config", cfg.to_str().expect("utf8 path")]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("unknown key"), "stderr: {stderr}");
}

#[test]
fn train_rejects_reserved_flags() {
    let dir = temp_root().join("reserved_out");
    let cfg = temp_root().join("reserved.cfg");
    let text = format!(
        "variant = vae\nlatent_dim = 2\nenc_hidden = 8\nshared_dim = 4\ndec_hidden = 8\n\
         epochs = 1\ndataset = toy\ngrad_clip = 1.0\nout_dir = {}\n",
        dir.display()
    );
    std::fs::write(&cfg, text).expect("config written");
    let out = run(&["train", "--config", cfg.to_str().expect("utf8 path")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_is_deterministic_per_seed() {
    let ckpt = trained_jmkl().to_str().expect("utf8 path").to_string();
    let run_eval = |out_dir: &Path| {
        let out = run(&[
            "eval",
            "--checkpoint",
            &ckpt,
            "--dataset",
            TOY_SELECTOR,
            "--target",
            "marginal-x",
            "--path",
            "single-x",
            "--k",
            "1",
            "--n-w",
            "50",
            "--seed",
            "11",
            "--out-dir",
            out_dir.to_str().expect("utf8 path"),
        ]);
        assert!(out.status.success(), "{out:?}");
        std::fs::read(out_dir.join("bounds.csv")).expect("csv written")
    };
    let a = run_eval(&temp_root().join("eval_a"));
    let b = run_eval(&temp_root().join("eval_b"));
    assert_eq!(a, b, "same seed must reproduce the report exactly");

    let text = String::from_utf8(a).expect("utf8 csv");
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("index,bound,k,target,path"));
    assert_eq!(lines.count(), 30, "one row per test record");
}

#[test]
fn eval_valid_and_invalid_specs_on_a_vae() {
    let ckpt = trained_vae().to_str().expect("utf8 path").to_string();
    // Marginal bound through the single encoder is the VAE's native bound.
    let out = run(&[
        "eval",
        "--checkpoint",
        &ckpt,
        "--dataset",
        TOY_SELECTOR,
        "--target",
        "marginal-x",
        "--path",
        "single-x",
        "--k",
        "4",
        "--out-dir",
        temp_root().join("eval_vae").to_str().expect("utf8 path"),
    ]);
    assert!(out.status.success(), "{out:?}");
    assert!(String::from_utf8_lossy(&out.stdout).contains("marginal-x bound"));

    // single-w has no encoder on a VAE.
    let out = run(&[
        "eval",
        "--checkpoint",
        &ckpt,
        "--dataset",
        TOY_SELECTOR,
        "--target",
        "marginal-x",
        "--path",
        "single-w",
        "--out-dir",
        temp_root().join("eval_vae_bad").to_str().expect("utf8 path"),
    ]);
    assert_eq!(out.status.code(), Some(2), "{out:?}");
}

#[test]
fn eval_rejects_incompatible_dataset() {
    let ckpt = trained_jmkl().to_str().expect("utf8 path").to_string();
    let out = run(&[
        "eval",
        "--checkpoint",
        &ckpt,
        "--dataset",
        "toy:classes=4,dim=16,per_class=10,seed=1,part=test",
        "--target",
        "joint",
        "--path",
        "multiple",
        "--out-dir",
        temp_root().join("eval_mismatch").to_str().expect("utf8 path"),
    ]);
    assert_eq!(out.status.code(), Some(2), "{out:?}");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("do not match"), "stderr: {stderr}");
}

#[test]
fn generate_prior_samples_are_deterministic_pgm_files() {
    let ckpt = trained_jmkl().to_str().expect("utf8 path").to_string();
    let gen = |dir: &Path| {
        let out = run(&[
            "generate",
            "--checkpoint",
            &ckpt,
            "--mode",
            "prior",
            "--count",
            "16",
            "--seed",
            "3",
            "--out-dir",
            dir.to_str().expect("utf8 path"),
        ]);
        assert!(out.status.success(), "{out:?}");
    };
    let dir_a = temp_root().join("gen_prior_a");
    let dir_b = temp_root().join("gen_prior_b");
    gen(&dir_a);
    gen(&dir_b);
    for i in 0..16 {
        let name = format!("sample_{i:03}.pgm");
        let a = std::fs::read(dir_a.join(&name)).expect("pgm written");
        let b = std::fs::read(dir_b.join(&name)).expect("pgm written");
        assert_eq!(a, b, "{name} must be identical across same-seed runs");
        // And it parses as a 12-pixel image.
        let (rows, cols, values) = read_pgm(&dir_a.join(&name)).expect("valid pgm");
        assert_eq!(rows * cols, 12);
        assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert!(dir_a.join("w_probs.csv").is_file(), "label probabilities written");
}

#[test]
fn generate_from_w_hits_the_conditioned_prototype() {
    let ckpt = trained_jmkl().to_str().expect("utf8 path").to_string();
    let protos: Vec<Vec<f64>> = jmvae::data::toy_prototypes(3, 12);
    let mut correct = 0;
    let mut total = 0;
    for class in 0..3usize {
        let dir = temp_root().join(format!("gen_from_w_{class}"));
        let out = run(&[
            "generate",
            "--checkpoint",
            &ckpt,
            "--mode",
            "from-w",
            "--class",
            &class.to_string(),
            "--count",
            "10",
            "--seed",
            "2",
            "--sample",
            "--zeta",
            "0.6",
            "--out-dir",
            dir.to_str().expect("utf8 path"),
        ]);
        assert!(out.status.success(), "{out:?}");
        for i in 0..10 {
            let (_, _, img) = read_pgm(&dir.join(format!("sample_{i:03}.pgm"))).expect("valid pgm");
            let best = (0..3)
                .min_by(|&a, &b| {
                    let da: f64 = img.iter().zip(&protos[a]).map(|(p, t)| (p - t) * (p - t)).sum();
                    let db: f64 = img.iter().zip(&protos[b]).map(|(p, t)| (p - t) * (p - t)).sum();
                    da.partial_cmp(&db).expect("finite")
                })
                .expect("three classes");
            if best == class {
                correct += 1;
            }
            total += 1;
        }
    }
    let accuracy = correct as f64 / total as f64;
    assert!(accuracy >= 0.9, "nearest-prototype accuracy {accuracy}");
}

#[test]
fn generate_from_w_on_a_vae_exits_2() {
    let ckpt = trained_vae().to_str().expect("utf8 path").to_string();
    let out = run(&[
        "generate",
        "--checkpoint",
        &ckpt,
        "--mode",
        "from-w",
        "--class",
        "0",
        "--out-dir",
        temp_root().join("gen_vae_bad").to_str().expect("utf8 path"),
    ]);
    assert_eq!(out.status.code(), Some(2), "{out:?}");
}

#[test]
fn generate_from_x_reconstructs_and_writes_label_probabilities() {
    let ckpt = trained_jmkl().to_str().expect("utf8 path").to_string();
    // Conditioning image: the class-1 prototype.
    let proto = jmvae::data::toy_prototypes(3, 12)[1].clone();
    let img_path = temp_root().join("probe.pgm");
    jmvae_cli::pgm::write_pgm(&img_path, 3, 4, &proto).expect("pgm written");

    let dir = temp_root().join("gen_from_x");
    let out = run(&[
        "generate",
        "--checkpoint",
        &ckpt,
        "--mode",
        "from-x",
        "--image",
        img_path.to_str().expect("utf8 path"),
        "--count",
        "1",
        "--out-dir",
        dir.to_str().expect("utf8 path"),
    ]);
    assert!(out.status.success(), "{out:?}");
    assert!(dir.join("sample_000.pgm").is_file());

    // The decoded label distribution puts most mass on class 1.
    let csv = std::fs::read_to_string(dir.join("w_probs.csv")).expect("csv written");
    let row = csv.lines().nth(1).expect("one sample row");
    let probs: Vec<f64> = row
        .split(',')
        .skip(1)
        .map(|v| v.parse().expect("number"))
        .collect();
    let best = probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
        .expect("three classes")
        .0;
    assert_eq!(best, 1, "label probabilities {probs:?}");
}

#[test]
fn latent_dump_rows_match_dataset_and_are_deterministic() {
    let ckpt = trained_jmkl().to_str().expect("utf8 path").to_string();
    let dump = |path: &Path| {
        let out = run(&[
            "latent-dump",
            "--checkpoint",
            &ckpt,
            "--dataset",
            TOY_SELECTOR,
            "--out",
            path.to_str().expect("utf8 path"),
        ]);
        assert!(out.status.success(), "{out:?}");
        std::fs::read(path).expect("csv written")
    };
    let a = dump(&temp_root().join("latents_a.csv"));
    let b = dump(&temp_root().join("latents_b.csv"));
    assert_eq!(a, b, "latent dump must be deterministic per checkpoint");

    let text = String::from_utf8(a).expect("utf8 csv");
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("label,z1,z2"));
    assert_eq!(lines.count(), 30, "row count equals the test-set size");
}

#[test]
fn bad_selector_strings_exit_2() {
    let ckpt = trained_jmkl().to_str().expect("utf8 path").to_string();
    for selector in ["csv:what=no", "toy:classes=banana", "toy:unknown_key=3"] {
        let out = run(&[
            "latent-dump",
            "--checkpoint",
            &ckpt,
            "--dataset",
            selector,
            "--out",
            temp_root().join("bad_sel.csv").to_str().expect("utf8 path"),
        ]);
        assert_eq!(out.status.code(), Some(2), "selector {selector:?}: {out:?}");
    }
}
