//! Flat `key = value` run configuration with named default profiles.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    PaperImages,
    PaperTabular,
}

impl Profile {
    pub const ALL: [Profile; 3] = [Profile::Desk, Profile::PaperImages, Profile::PaperTabular];

    pub fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::PaperImages => "paper-images",
            Profile::PaperTabular => "paper-tabular",
        }
    }
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Profile::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown profile `{s}` (expected desk, paper-images or paper-tabular)"))
    }
}

/// Where a default value comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    /// Matches the reference full-scale hyperparameters.
    Paper,
    /// Chosen for small single-machine runs.
    Desk,
}

impl Provenance {
    pub fn tag(self) -> &'static str {
        match self {
            Provenance::Paper => "paper-default",
            Provenance::Desk => "desk-default",
        }
    }
}

type DefaultValue = (&'static str, Provenance);

pub struct KeySpec {
    pub key: &'static str,
    pub help: &'static str,
    desk: DefaultValue,
    images: DefaultValue,
    tabular: DefaultValue,
}

impl KeySpec {
    pub fn default_for(&self, profile: Profile) -> DefaultValue {
        match profile {
            Profile::Desk => self.desk,
            Profile::PaperImages => self.images,
            Profile::PaperTabular => self.tabular,
        }
    }
}

const fn p(v: &'static str) -> DefaultValue {
    (v, Provenance::Paper)
}

const fn d(v: &'static str) -> DefaultValue {
    (v, Provenance::Desk)
}

const fn same(key: &'static str, help: &'static str, v: DefaultValue) -> KeySpec {
    KeySpec { key, help, desk: v, images: v, tabular: v }
}

const fn split(key: &'static str, help: &'static str, desk: DefaultValue, images: DefaultValue, tabular: DefaultValue) -> KeySpec {
    KeySpec { key, help, desk, images, tabular }
}

/// Every accepted key. `run.profile` is handled separately.
pub const KEYS: &[KeySpec] = &[
    same("run.output_dir", "directory for all artifacts", d("run")),
    same("run.seed", "master seed; data=1, ordering=2, init=3, dropout=4, sampling=5 streams derive from it", d("0")),
    same("run.threads", "evaluation worker threads (0 = available cores)", d("0")),
    split("data.kind", "mnist | tabular | synthetic", d("mnist"), p("mnist"), p("tabular")),
    same("data.train_images", "IDX image file with the training images", d("")),
    same("data.test_images", "IDX image file with the test images", d("")),
    same("data.binarization", "threshold | stochastic", d("threshold")),
    same("data.threshold", "pixel values >= this become 1", d("128")),
    same("data.split_seed", "seed choosing validation images; `none` holds out the last 1200", d("none")),
    same("data.train_limit", "use at most this many training samples (0 = all)", d("0")),
    same("data.test_limit", "use at most this many test samples (0 = all)", d("0")),
    split("data.csv", "CSV file for tabular data", d(""), d(""), d("")),
    split("data.preset", "power | plain", d("plain"), d("plain"), p("power")),
    same("data.joint", "synthetic joint text file; empty draws a random joint from the data seed", d("")),
    same("data.features", "feature count of a random synthetic joint", d("4")),
    same("data.train_size", "synthetic training samples", d("10000")),
    same("data.validation_size", "synthetic validation samples", d("1000")),
    same("data.test_size", "synthetic test samples", d("1000")),
    split("model.head", "bernoulli | categorical | mixture", d("bernoulli"), p("bernoulli"), p("mixture")),
    same("model.classes", "classes of a categorical head", d("2")),
    split("model.components", "mixture components J", d("10"), p("150"), p("150")),
    split("model.d_model", "Transformer width", d("64"), p("512"), p("512")),
    split("model.n_heads", "attention heads", d("4"), p("8"), p("8")),
    split("model.d_ff", "feed-forward width", d("256"), p("2048"), p("2048")),
    split("model.n_layers", "encoder layers", d("2"), p("6"), p("6")),
    split("model.dropout", "dropout probability", d("0.0"), p("0.0"), p("0.2")),
    split("model.mlp_widths", "identity/value MLP widths; the last equals model.d_model", d("32,64"), p("128,256,512"), p("128,256,512")),
    split("model.embedding_dim", "column identity embedding width", d("8"), p("20"), p("20")),
    split("optimizer.lr", "Adam learning rate", d("0.001"), p("1e-6"), p("1e-6")),
    same("optimizer.beta1", "Adam beta1", p("0.9")),
    same("optimizer.beta2", "Adam beta2", p("0.999")),
    same("optimizer.eps", "Adam epsilon", p("1e-9")),
    split("optimizer.batch_size", "samples per update", d("16"), p("1"), p("128")),
    split("optimizer.patience", "stale validation epochs before the learning-rate drop", d("5"), p("5"), p("20")),
    split("optimizer.max_epochs", "epoch limit", d("50"), d("1000"), d("1000")),
    same("optimizer.clip_norm", "gradient norm limit, or none", d("none")),
    same("train.resume", "continue from output_dir/last.ckpt when present", d("false")),
    same("eval.orderings", "random orderings K averaged per sample", p("10")),
    same("eval.seed", "ordering seed for evaluation", d("0")),
    same("eval.checkpoint", "model checkpoint; empty uses output_dir/best.ckpt", d("")),
    same("generate.count", "samples to generate", p("50")),
    same("generate.batch_size", "samples generated in parallel", d("10")),
    same("generate.clamp", "clamp continuous samples to +-this, or none", d("10")),
    same("impute.count", "test images to fill in", d("10")),
    same("impute.missing", "pixels removed per image", p("100")),
    same("impute.pattern", "square | random | bottom", d("square")),
    same("impute.mode", "sample | argmax", d("sample")),
    same("ood.images", "IDX image file with out-of-distribution images", d("")),
    same("ood.limit", "use at most this many out-of-distribution images (0 = all)", d("0")),
];

fn spec(key: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|s| s.key == key)
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_text(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| CliError::config(&format!("line {}", i + 1), format!("expected `key = value`, got `{line}`")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses a `--set key=value` argument.
pub fn parse_override(arg: &str) -> Result<(String, String), CliError> {
    let (k, v) = arg.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{arg}`")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// All effective values, keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub profile: Profile,
    values: BTreeMap<&'static str, String>,
}

impl Config {
    /// Applies `entries` in order over the profile defaults. A `run.profile` entry selects the profile.
    pub fn resolve(profile: Option<Profile>, entries: &[(String, String)]) -> Result<Self, CliError> {
        let mut chosen = profile;
        for (k, v) in entries {
            if k == "run.profile" {
                chosen = Some(v.parse().map_err(|e| CliError::config(k, e))?);
            }
        }
        let profile = chosen.unwrap_or(Profile::Desk);
        let mut values: BTreeMap<&'static str, String> = KEYS.iter().map(|s| (s.key, s.default_for(profile).0.to_string())).collect();
        for (k, v) in entries {
            if k == "run.profile" {
                continue;
            }
            let s = spec(k).ok_or_else(|| CliError::config(k, "unknown key"))?;
            values.insert(s.key, v.clone());
        }
        Ok(Self { profile, values })
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key);
        raw.parse().map_err(|e: T::Err| CliError::config(key, format!("cannot parse `{raw}`: {e}")))
    }

    /// `none` maps to `None`.
    pub fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if self.get(key) == "none" {
            Ok(None)
        } else {
            self.parse(key).map(Some)
        }
    }

    pub fn list(&self, key: &str) -> Result<Vec<usize>, CliError> {
        self.get(key)
            .split(',')
            .map(|s| s.trim().parse().map_err(|e| CliError::config(key, format!("cannot parse `{}`: {e}", self.get(key)))))
            .collect()
    }

    /// Empty maps to `None`.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn required_path(&self, key: &str) -> Result<PathBuf, CliError> {
        self.path(key).ok_or_else(|| CliError::config(key, "must be set"))
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(self.get("run.output_dir"))
    }

    /// Text that [`Config::resolve`] maps back to this configuration.
    pub fn to_text(&self) -> String {
        let mut out = format!("run.profile = {}\n", self.profile.name());
        for (k, v) in &self.values {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }
}

/// The key table shown by `--help`.
pub fn help_table() -> String {
    let mut out = String::from("Configuration keys (set in --config files or with --set key=value).\nEach default is tagged paper-default or desk-default; select a profile with --profile or run.profile.\n\n");
    writeln!(out, "  run.profile  desk | paper-images | paper-tabular (default desk)").unwrap();
    for s in KEYS {
        writeln!(out, "  {}  {}", s.key, s.help).unwrap();
        let defaults: Vec<String> = Profile::ALL
            .iter()
            .map(|&pr| {
                let (v, prov) = s.default_for(pr);
                let shown = if v.is_empty() { "\"\"" } else { v };
                format!("{}={shown} [{}]", pr.name(), prov.tag())
            })
            .collect();
        writeln!(out, "      {}", defaults.join("  ")).unwrap();
    }
    out
}
