//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use deformer::data::{
    binarize, load_mnist_split, preprocess_tabular, read_csv, read_idx_file, Binarization, Dataset, FeatureShape, SyntheticJoint, TabularPreset,
};
use deformer::inference::{
    default_threads, evaluate_dataset, generate, impute, ood_score, write_nll_csv, write_pgm, write_summary_csv, EvalEntry, FillMode, ImputationTask,
};
use deformer::model::{DeformerModel, FeatureValue, HeadKind, IdentityLayout, ModelConfig};
use deformer::selftest;
use deformer::training::{load_model, AdamConfig, Checkpoint, TrainConfig, Trainer};
use deformer::transformer::TransformerConfig;
use deformer::{seeds, Float};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::Config;
use crate::error::CliError;

pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

fn limit(data: Dataset, n: usize) -> Dataset {
    if n == 0 || n >= data.len() {
        data
    } else {
        data.range(0, n)
    }
}

fn binarization(cfg: &Config) -> Result<Binarization, CliError> {
    match cfg.get("data.binarization") {
        "threshold" => Ok(Binarization::Threshold(cfg.parse("data.threshold")?)),
        "stochastic" => Ok(Binarization::Stochastic { seed: cfg.parse("run.seed")? }),
        other => Err(CliError::config("data.binarization", format!("expected threshold or stochastic, got `{other}`"))),
    }
}

fn synthetic_joint(cfg: &Config, seed: u64) -> Result<SyntheticJoint, CliError> {
    match cfg.path("data.joint") {
        Some(path) => Ok(SyntheticJoint::from_text(&fs::read_to_string(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?)?),
        None => Ok(SyntheticJoint::random(cfg.parse("data.features")?, &mut seeds::substream(seed, seeds::DATA, 0))?),
    }
}

pub fn load_data(cfg: &Config) -> Result<Splits, CliError> {
    let seed: u64 = cfg.parse("run.seed")?;
    let splits = match cfg.get("data.kind") {
        "mnist" => {
            let split_seed = cfg.parse_opt("data.split_seed")?;
            let s = load_mnist_split(&cfg.required_path("data.train_images")?, &cfg.required_path("data.test_images")?, binarization(cfg)?, split_seed)?;
            Splits { train: s.train, validation: s.validation, test: s.test }
        }
        "tabular" => {
            let path = cfg.required_path("data.csv")?;
            let file = fs::File::open(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            let preset = match cfg.get("data.preset") {
                "power" => TabularPreset::power(),
                "plain" => TabularPreset::plain(),
                other => return Err(CliError::config("data.preset", format!("expected power or plain, got `{other}`"))),
            };
            let t = preprocess_tabular(&read_csv(file)?, &preset, &mut seeds::stream(seed, seeds::DATA))?;
            Splits { train: t.train, validation: t.validation, test: t.test }
        }
        "synthetic" => {
            let joint = synthetic_joint(cfg, seed)?;
            let mut rng = seeds::stream(seed, seeds::DATA);
            Splits {
                train: joint.sample_dataset(cfg.parse("data.train_size")?, &mut rng),
                validation: joint.sample_dataset(cfg.parse("data.validation_size")?, &mut rng),
                test: joint.sample_dataset(cfg.parse("data.test_size")?, &mut rng),
            }
        }
        other => return Err(CliError::config("data.kind", format!("expected mnist, tabular or synthetic, got `{other}`"))),
    };
    Ok(Splits {
        train: limit(splits.train, cfg.parse("data.train_limit")?),
        validation: splits.validation,
        test: limit(splits.test, cfg.parse("data.test_limit")?),
    })
}

pub fn model_config(cfg: &Config, shape: FeatureShape) -> Result<ModelConfig, CliError> {
    let layout = match shape {
        FeatureShape::Pixels { height, width } => IdentityLayout::Pixels { height, width },
        FeatureShape::Columns(count) => IdentityLayout::Columns { count, embedding_dim: cfg.parse("model.embedding_dim")? },
    };
    let head = match cfg.get("model.head") {
        "bernoulli" => HeadKind::Bernoulli,
        "categorical" => HeadKind::Categorical(cfg.parse("model.classes")?),
        "mixture" => HeadKind::GaussianMixture(cfg.parse("model.components")?),
        other => return Err(CliError::config("model.head", format!("expected bernoulli, categorical or mixture, got `{other}`"))),
    };
    let config = ModelConfig {
        layout,
        head,
        transformer: TransformerConfig {
            d_model: cfg.parse("model.d_model")?,
            n_heads: cfg.parse("model.n_heads")?,
            d_ff: cfg.parse("model.d_ff")?,
            n_layers: cfg.parse("model.n_layers")?,
            dropout_p: cfg.parse("model.dropout")?,
        },
        mlp_widths: cfg.list("model.mlp_widths")?,
    };
    config.validate().map_err(|e| CliError::config("model", e))?;
    Ok(config)
}

pub fn train_config(cfg: &Config) -> Result<TrainConfig, CliError> {
    let config = TrainConfig {
        batch_size: cfg.parse("optimizer.batch_size")?,
        max_epochs: cfg.parse("optimizer.max_epochs")?,
        patience: cfg.parse("optimizer.patience")?,
        adam: AdamConfig {
            lr: cfg.parse("optimizer.lr")?,
            beta1: cfg.parse("optimizer.beta1")?,
            beta2: cfg.parse("optimizer.beta2")?,
            eps: cfg.parse("optimizer.eps")?,
        },
        clip_norm: cfg.parse_opt("optimizer.clip_norm")?,
        seed: cfg.parse("run.seed")?,
    };
    config.validate().map_err(|e| CliError::config("optimizer", e))?;
    Ok(config)
}

fn threads(cfg: &Config) -> Result<usize, CliError> {
    let n: usize = cfg.parse("run.threads")?;
    Ok(if n == 0 { default_threads() } else { n })
}

fn checkpoint_path(cfg: &Config) -> PathBuf {
    cfg.path("eval.checkpoint").unwrap_or_else(|| cfg.output_dir().join("best.ckpt"))
}

fn load_trained(cfg: &Config) -> Result<DeformerModel, CliError> {
    let path = checkpoint_path(cfg);
    if !path.exists() {
        return Err(CliError::Data(format!("checkpoint {} not found; run `train` first or set eval.checkpoint", path.display())));
    }
    Ok(load_model(&path)?)
}

fn check_shape(model: &DeformerModel, data: &Dataset) -> Result<(), CliError> {
    if data.shape().matches(model.layout()) {
        Ok(())
    } else {
        Err(CliError::Data(format!("data shape {:?} does not match the model layout {:?}", data.shape(), model.layout())))
    }
}

pub fn train(cfg: &Config) -> Result<(), CliError> {
    let out = cfg.output_dir();
    let data = load_data(cfg)?;
    let train_cfg = train_config(cfg)?;
    let last = out.join("last.ckpt");
    let log = out.join("train_log.csv");
    let mut trainer = if cfg.parse::<bool>("train.resume")? && last.exists() {
        println!("resuming from {}", last.display());
        Trainer::from_checkpoint(&Checkpoint::load(&last)?)?
    } else {
        if log.exists() {
            fs::remove_file(&log)?;
        }
        let model = DeformerModel::new(model_config(cfg, data.train.shape())?, &mut seeds::stream(train_cfg.seed, seeds::INIT))?;
        Trainer::new(model, train_cfg)?
    };
    check_shape(trainer.model(), &data.train)?;
    println!(
        "training on {} samples, validating on {}, {} parameters",
        data.train.len(),
        data.validation.len(),
        trainer.model().params().tensors().iter().map(|t| t.numel()).sum::<usize>()
    );
    let reason = trainer.train(&data.train, &data.validation, Some(&log), Some(&out))?;
    for r in trainer.history() {
        println!("epoch {} train_nll {:.4} val_nll {:.4} lr {:e} {:.1}s", r.epoch, r.train_nll, r.val_nll, r.lr, r.seconds);
    }
    let best = trainer.schedule().best_validation;
    println!("stopped ({reason:?}) after epoch {}; best validation NLL {best:.4}", trainer.epoch());
    Ok(())
}

pub fn eval(cfg: &Config) -> Result<(), CliError> {
    let model = load_trained(cfg)?;
    let test = load_data(cfg)?.test;
    check_shape(&model, &test)?;
    let k: usize = cfg.parse("eval.orderings")?;
    let report = evaluate_dataset(&model, &test, k, cfg.parse("eval.seed")?, threads(cfg)?)?;
    let rows: Vec<(usize, EvalEntry)> = report.entries.iter().copied().enumerate().collect();
    let path = cfg.output_dir().join("eval.csv");
    write_nll_csv(&path, &rows)?;
    println!("mean NLL {:.4} nats over {} test samples and {k} orderings; per-sample results in {}", report.mean_nll(), test.len(), path.display());
    Ok(())
}

fn dataset_of(shape: FeatureShape, rows: &[Vec<FeatureValue>]) -> Result<Dataset, CliError> {
    let flat = rows.iter().flatten();
    Ok(match rows.first().and_then(|r| r.first()) {
        Some(FeatureValue::Continuous(_)) => Dataset::continuous(shape, flat.map(FeatureValue::as_float).collect())?,
        _ => Dataset::discrete(shape, flat.map(|v| v.as_float() as u8).collect())?,
    })
}

fn shape_of(layout: &IdentityLayout) -> FeatureShape {
    match *layout {
        IdentityLayout::Pixels { height, width } => FeatureShape::Pixels { height, width },
        IdentityLayout::Columns { count, .. } => FeatureShape::Columns(count),
    }
}

fn as_pixels(values: &[FeatureValue]) -> Vec<u8> {
    values.iter().map(|v| v.as_float() as u8).collect()
}

pub fn generate_cmd(cfg: &Config) -> Result<(), CliError> {
    let model = load_trained(cfg)?;
    let out = cfg.output_dir().join("samples");
    fs::create_dir_all(&out)?;
    let count: usize = cfg.parse("generate.count")?;
    let seed: u64 = cfg.parse("run.seed")?;
    let clamp: Option<Float> = cfg.parse_opt("generate.clamp")?;
    let samples = generate(&model, count, cfg.parse("generate.batch_size")?, clamp, &mut seeds::stream(seed, seeds::SAMPLING))?;
    let rows: Vec<Vec<FeatureValue>> = samples.iter().map(|g| g.values.clone()).collect();
    let shape = shape_of(model.layout());
    let report = evaluate_dataset(&model, &dataset_of(shape, &rows)?, cfg.parse("eval.orderings")?, cfg.parse("eval.seed")?, threads(cfg)?)?;
    let mut ranked: Vec<(usize, EvalEntry)> = report.entries.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| a.1.mean_nll.total_cmp(&b.1.mean_nll));
    match shape {
        FeatureShape::Pixels { height, width } => {
            for (rank, (id, _)) in ranked.iter().enumerate() {
                write_pgm(&out.join(format!("rank{rank:04}_sample{id:04}.pgm")), height, width, &as_pixels(&rows[*id]))?;
            }
        }
        FeatureShape::Columns(_) => {
            let mut body = String::new();
            for (id, row) in rows.iter().enumerate() {
                let cells: Vec<String> = row.iter().map(|v| v.as_float().to_string()).collect();
                body.push_str(&format!("{id},{}\n", cells.join(",")));
            }
            fs::write(out.join("samples.csv"), body)?;
        }
    }
    write_nll_csv(&out.join("nll.csv"), &ranked)?;
    println!("generated {count} samples in {}; NLL range {:.3} to {:.3}", out.display(), ranked[0].1.mean_nll, ranked[ranked.len() - 1].1.mean_nll);
    Ok(())
}

/// Canonical indices of the pixels removed from an image.
fn missing_pixels<R: Rng + ?Sized>(pattern: &str, height: usize, width: usize, missing: usize, rng: &mut R) -> Result<Vec<usize>, CliError> {
    let d = height * width;
    if missing == 0 || missing > d {
        return Err(CliError::config("impute.missing", format!("must be in 1..={d}")));
    }
    Ok(match pattern {
        "square" => {
            let side = (missing as f64).sqrt().round().max(1.0) as usize;
            if side > height || side > width {
                return Err(CliError::config("impute.missing", "square does not fit the image"));
            }
            let (r0, c0) = (rng.gen_range(0..=height - side), rng.gen_range(0..=width - side));
            (r0..r0 + side).flat_map(|r| (c0..c0 + side).map(move |c| r * width + c)).collect()
        }
        "random" => {
            let mut all: Vec<usize> = (0..d).collect();
            all.shuffle(rng);
            all.truncate(missing);
            all.sort_unstable();
            all
        }
        "bottom" => (d - missing..d).collect(),
        other => return Err(CliError::config("impute.pattern", format!("expected square, random or bottom, got `{other}`"))),
    })
}

pub fn impute_cmd(cfg: &Config) -> Result<(), CliError> {
    let model = load_trained(cfg)?;
    let IdentityLayout::Pixels { height, width } = *model.layout() else {
        return Err(CliError::config("data.kind", "impute writes images and needs an image model"));
    };
    let test = load_data(cfg)?.test;
    check_shape(&model, &test)?;
    let mode = match cfg.get("impute.mode") {
        "sample" => FillMode::Sample,
        "argmax" => FillMode::Argmax,
        other => return Err(CliError::config("impute.mode", format!("expected sample or argmax, got `{other}`"))),
    };
    let out = cfg.output_dir().join("imputed");
    fs::create_dir_all(&out)?;
    let count = cfg.parse::<usize>("impute.count")?.min(test.len());
    let missing: usize = cfg.parse("impute.missing")?;
    let pattern = cfg.get("impute.pattern");
    let mut rng = seeds::stream(cfg.parse("run.seed")?, seeds::SAMPLING);
    for i in 0..count {
        let original = test.row(i);
        let holes = missing_pixels(pattern, height, width, missing, &mut rng)?;
        let mut mask = vec![0u8; height * width];
        holes.iter().for_each(|&p| mask[p] = 1);
        let task = ImputationTask {
            observed: original.iter().enumerate().filter(|(p, _)| mask[*p] == 0).map(|(p, v)| (p, *v)).collect(),
            missing: holes,
            mode,
        };
        let filled = impute(&model, &task, &mut rng)?;
        write_pgm(&out.join(format!("original{i:04}.pgm")), height, width, &as_pixels(&original))?;
        write_pgm(&out.join(format!("mask{i:04}.pgm")), height, width, &mask)?;
        write_pgm(&out.join(format!("filled{i:04}.pgm")), height, width, &as_pixels(&filled.values))?;
    }
    println!("filled {count} images ({missing} {pattern} pixels each) in {}", out.display());
    Ok(())
}

fn load_ood(cfg: &Config, model: &DeformerModel) -> Result<Dataset, CliError> {
    let path = cfg.required_path("ood.images")?;
    let arr = read_idx_file(&path)?;
    let &[n, height, width] = arr.dims() else {
        return Err(CliError::Data(format!("{}: expected a rank-3 image file", path.display())));
    };
    let data = Dataset::discrete(FeatureShape::Pixels { height, width }, binarize(arr.data(), binarization(cfg)?))?;
    check_shape(model, &data)?;
    Ok(limit(data, cfg.parse::<usize>("ood.limit")?.min(n)))
}

pub fn ood(cfg: &Config) -> Result<(), CliError> {
    let model = load_trained(cfg)?;
    let test = load_data(cfg)?.test;
    check_shape(&model, &test)?;
    let ood_data = load_ood(cfg, &model)?;
    let report = ood_score(&model, &test, &ood_data, cfg.parse("eval.orderings")?, cfg.parse("eval.seed")?, threads(cfg)?)?;
    let out = cfg.output_dir();
    write_summary_csv(&out.join("ood_in_distribution.csv"), "in_distribution", &report.in_summary)?;
    write_summary_csv(&out.join("ood_out_of_distribution.csv"), "out_of_distribution", &report.out_summary)?;
    let (a, b) = (&report.in_summary, &report.out_summary);
    println!(
        "in-distribution mean NLL {:.3} (std {:.3}); out-of-distribution mean NLL {:.3} (std {:.3}); gap {:.3}",
        a.mean,
        a.std,
        b.mean,
        b.std,
        b.mean - a.mean
    );
    Ok(())
}

pub fn selftest_cmd(cfg: &Config) -> Result<(), CliError> {
    let results = selftest::run_all(cfg.parse("run.seed")?);
    let mut failed = Vec::new();
    for r in &results {
        println!("{:<28} {} {} ({:.1}s)", r.name, if r.passed { "ok  " } else { "FAIL" }, r.detail, r.seconds);
        if !r.passed {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Selftest(failed.join(", ")))
    }
}

/// Parses every typed key so bad values fail before any data is read.
pub fn validate(cfg: &Config) -> Result<(), CliError> {
    train_config(cfg)?;
    model_config(cfg, FeatureShape::Columns(1))?;
    binarization(cfg)?;
    cfg.parse_opt::<u64>("data.split_seed")?;
    cfg.parse_opt::<Float>("generate.clamp")?;
    cfg.parse::<bool>("train.resume")?;
    for key in [
        "run.threads",
        "data.train_limit",
        "data.test_limit",
        "data.features",
        "data.train_size",
        "data.validation_size",
        "data.test_size",
        "eval.orderings",
        "generate.count",
        "generate.batch_size",
        "impute.count",
        "impute.missing",
        "ood.limit",
    ] {
        cfg.parse::<usize>(key)?;
    }
    cfg.parse::<u64>("eval.seed")?;
    Ok(())
}

/// Writes the effective configuration before a command runs.
pub fn write_resolved(cfg: &Config, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("resolved_config"), cfg.to_text())?;
    Ok(())
}
