use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use deformer::data::{write_idx, IdxArray};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deformer")).current_dir(dir).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY_MODEL: &[&str] = &[
    "--set", "model.d_model=8",
    "--set", "model.n_heads=2",
    "--set", "model.d_ff=16",
    "--set", "model.n_layers=1",
    "--set", "model.mlp_widths=8",
    "--set", "model.embedding_dim=4",
];

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(TINY_MODEL);
    v
}

/// Random 4x4 images with a bright left half, so thresholding gives structured data.
fn write_images(path: &Path, n: usize, seed: u64, bright_left: bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<u8> = (0..n * 16)
        .map(|i| {
            let left = (i % 4) < 2;
            let p = if left == bright_left { 0.9 } else { 0.1 };
            if rng.gen::<f64>() < p { 200 } else { 10 }
        })
        .collect();
    std::fs::write(path, write_idx(&IdxArray::new(vec![n, 4, 4], data).unwrap())).unwrap();
}

#[test]
fn help_lists_keys_with_defaults_and_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["--help"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    for key in ["run.seed", "data.kind", "model.d_model", "model.dropout", "optimizer.lr", "optimizer.batch_size", "eval.orderings", "impute.mode", "ood.images"] {
        assert!(text.contains(key), "missing {key}");
    }
    assert!(text.contains("paper-images=1e-6 [paper-default]"));
    assert!(text.contains("desk=0.001 [desk-default]"));
    assert!(text.contains("paper-tabular=0.2 [paper-default]"));
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &[])), 1);
    assert_eq!(code(&run(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&run(dir.path(), &["train", "--bogus"])), 1);
    assert_eq!(code(&run(dir.path(), &["train", "--set", "no_equals_sign"])), 1);
}

#[test]
fn bad_value_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["train", "--set", "optimizer.lr=banana"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("optimizer.lr"), "{}", stderr(&o));
}

#[test]
fn unknown_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "optimizer.learning_rate = 0.1\n").unwrap();
    let o = run(dir.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("optimizer.learning_rate"));
    let o = run(dir.path(), &["eval", "--profile", "huge"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("run.profile"));
}

#[test]
fn missing_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["train", "--set", "data.train_images=nope.idx", "--set", "data.test_images=nope2.idx"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let o = run(dir.path(), &["eval", "--set", "data.kind=synthetic"]);
    assert_eq!(code(&o), 3, "missing checkpoint: {}", stderr(&o));
}

#[test]
fn unset_data_path_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["train"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("data.train_images"));
}

#[test]
fn diverging_training_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let args = with_tiny(&[
        "train",
        "--set", "data.kind=synthetic",
        "--set", "data.train_size=64",
        "--set", "data.validation_size=16",
        "--set", "data.test_size=16",
        "--set", "optimizer.lr=1e300",
        "--set", "optimizer.max_epochs=3",
    ]);
    let o = run(dir.path(), &args);
    assert_eq!(code(&o), 4, "{}{}", stdout(&o), stderr(&o));
}

#[test]
fn selftest_passes_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let o = run(dir.path(), &["selftest"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert!(started.elapsed() < Duration::from_secs(300));
    for name in ["mask_rule", "gradients", "normalization", "causality"] {
        assert!(stdout(&o).contains(name));
    }
}

fn read(path: PathBuf) -> Vec<u8> {
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn synthetic_pipeline_reproduces_from_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let base = with_tiny(&[
        "--set", "data.kind=synthetic",
        "--set", "data.features=3",
        "--set", "data.train_size=200",
        "--set", "data.validation_size=50",
        "--set", "data.test_size=20",
        "--set", "optimizer.max_epochs=2",
        "--set", "run.seed=5",
        "--set", "run.output_dir=a",
    ]);
    let mut train = vec!["train"];
    train.extend(&base);
    let o = run(dir.path(), &train);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = String::from_utf8(read(dir.path().join("a/train_log.csv"))).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,train_nll,val_nll,lr,seconds"));
    assert_eq!(log.lines().count(), 3);

    let mut eval = vec!["eval"];
    eval.extend(&base);
    let o = run(dir.path(), &eval);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("10 orderings"), "{}", stdout(&o));
    let csv = String::from_utf8(read(dir.path().join("a/eval.csv"))).unwrap();
    assert_eq!(csv.lines().next(), Some("sample_id,mean_nll,std_nll"));
    assert_eq!(csv.lines().count(), 21);

    let mut gen = vec!["generate"];
    gen.extend(&base);
    gen.extend(["--set", "generate.count=12"]);
    let o = run(dir.path(), &gen);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let nll = String::from_utf8(read(dir.path().join("a/samples/nll.csv"))).unwrap();
    let scores: Vec<f64> = nll.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(scores.len(), 12);
    assert!(scores.windows(2).all(|w| w[0] <= w[1]), "NLL CSV is sorted");
    assert_eq!(String::from_utf8(read(dir.path().join("a/samples/samples.csv"))).unwrap().lines().count(), 12);

    // Re-run training from the resolved config into a second directory.
    let resolved = String::from_utf8(read(dir.path().join("a/resolved_config"))).unwrap();
    assert!(resolved.contains("run.seed = 5"));
    assert!(resolved.contains("eval.orderings = 10"));
    std::fs::write(dir.path().join("again.cfg"), resolved.replace("run.output_dir = a", "run.output_dir = b")).unwrap();
    let o = run(dir.path(), &["train", "--config", "again.cfg"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read(dir.path().join("a/best.ckpt")), read(dir.path().join("b/best.ckpt")));
    assert_eq!(read(dir.path().join("a/last.ckpt")), read(dir.path().join("b/last.ckpt")));
    let o = run(dir.path(), &["eval", "--config", "again.cfg"]);
    assert_eq!(code(&o), 0);
    assert_eq!(read(dir.path().join("a/eval.csv")), read(dir.path().join("b/eval.csv")));
}

#[test]
fn image_pipeline_writes_pgms_and_summaries() {
    let dir = tempfile::tempdir().unwrap();
    write_images(&dir.path().join("train.idx"), 1300, 1, true);
    write_images(&dir.path().join("test.idx"), 30, 2, true);
    write_images(&dir.path().join("ood.idx"), 30, 3, false);
    let base = with_tiny(&[
        "--set", "data.train_images=train.idx",
        "--set", "data.test_images=test.idx",
        "--set", "data.train_limit=100",
        "--set", "optimizer.max_epochs=2",
        "--set", "eval.orderings=2",
        "--set", "run.output_dir=img",
    ]);
    for (cmd, extra) in [
        ("train", vec![]),
        ("generate", vec!["--set", "generate.count=5"]),
        ("impute", vec!["--set", "impute.count=3", "--set", "impute.missing=4"]),
        ("ood", vec!["--set", "ood.images=ood.idx"]),
    ] {
        let mut args = vec![cmd];
        args.extend(&base);
        args.extend(extra);
        let o = run(dir.path(), &args);
        assert_eq!(code(&o), 0, "{cmd}: {}", stderr(&o));
    }
    let out = dir.path().join("img");
    let pgms = |sub: &str, prefix: &str| {
        std::fs::read_dir(out.join(sub)).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with(prefix)).count()
    };
    assert_eq!(pgms("samples", "rank"), 5);
    assert_eq!(pgms("imputed", "filled"), 3);
    assert_eq!(pgms("imputed", "mask"), 3);
    let pgm = read(out.join("imputed/mask0000.pgm"));
    assert!(pgm.starts_with(b"P5\n4 4\n255\n"));
    assert_eq!(pgm[pgm.len() - 16..].iter().filter(|&&p| p == 255).count(), 4);
    for f in ["ood_in_distribution.csv", "ood_out_of_distribution.csv"] {
        let s = String::from_utf8(read(out.join(f))).unwrap();
        assert!(s.starts_with("dataset,count,mean,std"), "{s}");
    }
}
