//! Run configuration: a `key = value` file merged with command-line flags.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use advlab::attacks::DEFAULT_EPSILONS;
use clap::Args;

use crate::CliError;

/// Flags shared by every subcommand. Any flag that is given overrides the
/// corresponding config-file key.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// `key = value` config file
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Directory holding the MNIST training IDX files
    #[arg(long, global = true, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
    /// Directory receiving every output file
    #[arg(long, global = true, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Run seed; every random stream is derived from it
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Training epochs
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Mini-batch size for training and patch optimization
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// Softmax temperature (train: 1, distill: 100 unless set)
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    /// Comma-separated epsilon grid
    #[arg(long, global = true, value_name = "LIST")]
    pub epsilons: Option<String>,
    /// Comma-separated patch side lengths
    #[arg(long, global = true, value_name = "LIST")]
    pub patch_sizes: Option<String>,
    /// Class the adversarial patch pushes toward
    #[arg(long, global = true)]
    pub target_class: Option<usize>,
    /// Passes over the training set when optimizing a patch
    #[arg(long, global = true)]
    pub patch_epochs: Option<usize>,
    /// Use only the first N training examples after the split
    #[arg(long, global = true, value_name = "N")]
    pub train_limit: Option<usize>,
    /// Use only the first N holdout examples after the split
    #[arg(long, global = true, value_name = "N")]
    pub eval_limit: Option<usize>,
    /// Network checkpoint to attack (default: baseline.ckpt in the output dir)
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Unset means the subcommand's own default.
    pub temperature: Option<f64>,
    pub epsilons: Vec<f64>,
    pub patch_sizes: Vec<usize>,
    pub target_class: usize,
    pub patch_epochs: usize,
    pub train_limit: Option<usize>,
    pub eval_limit: Option<usize>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data/mnist"),
            out_dir: PathBuf::from("runs/default"),
            seed: 0,
            epochs: advlab::training::DEFAULT_EPOCHS,
            batch_size: advlab::training::DEFAULT_BATCH_SIZE,
            temperature: None,
            epsilons: DEFAULT_EPSILONS.to_vec(),
            patch_sizes: vec![6, 8, 10],
            target_class: 3,
            patch_epochs: 5,
            train_limit: None,
            eval_limit: None,
            checkpoint: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .trim()
        .parse()
        .map_err(|_| CliError::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

impl RunConfig {
    /// Config file (if any) over the defaults, then flags over both.
    pub fn resolve(flags: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match &flags.config {
            Some(path) => Self::from_file(path)?,
            None => Self::default(),
        };
        cfg.apply(flags)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_text(&text)
    }

    /// `key = value` lines; `#` starts a comment. Unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {}: expected `key = value`", n + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "seed" => self.seed = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "temperature" => self.temperature = Some(parse(key, value)?),
            "epsilons" => self.epsilons = parse_list(key, value)?,
            "patch_sizes" => self.patch_sizes = parse_list(key, value)?,
            "target_class" => self.target_class = parse(key, value)?,
            "patch_epochs" => self.patch_epochs = parse(key, value)?,
            "train_limit" => self.train_limit = Some(parse(key, value)?),
            "eval_limit" => self.eval_limit = Some(parse(key, value)?),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            _ => return Err(CliError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn apply(&mut self, flags: &Overrides) -> Result<(), CliError> {
        if let Some(v) = &flags.data_dir {
            self.data_dir = v.clone();
        }
        if let Some(v) = &flags.out_dir {
            self.out_dir = v.clone();
        }
        if let Some(v) = flags.seed {
            self.seed = v;
        }
        if let Some(v) = flags.epochs {
            self.epochs = v;
        }
        if let Some(v) = flags.batch_size {
            self.batch_size = v;
        }
        if let Some(v) = flags.temperature {
            self.temperature = Some(v);
        }
        if let Some(v) = &flags.epsilons {
            self.epsilons = parse_list("epsilons", v)?;
        }
        if let Some(v) = &flags.patch_sizes {
            self.patch_sizes = parse_list("patch_sizes", v)?;
        }
        if let Some(v) = flags.target_class {
            self.target_class = v;
        }
        if let Some(v) = flags.patch_epochs {
            self.patch_epochs = v;
        }
        if let Some(v) = flags.train_limit {
            self.train_limit = Some(v);
        }
        if let Some(v) = flags.eval_limit {
            self.eval_limit = Some(v);
        }
        if let Some(v) = &flags.checkpoint {
            self.checkpoint = Some(v.clone());
        }
        Ok(())
    }

    /// Range checks that do not depend on the subcommand.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if let Some(t) = self.temperature {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("temperature must be positive, got {t}"));
            }
        }
        if self.target_class >= advlab::network::NUM_CLASSES {
            return bad(format!("target_class {} outside 0..10", self.target_class));
        }
        if self.patch_sizes.is_empty() {
            return bad("patch_sizes is empty".into());
        }
        if self.epsilons.is_empty() {
            return bad("epsilons is empty".into());
        }
        if self.train_limit == Some(0) || self.eval_limit == Some(0) {
            return bad("limits must be at least 1".into());
        }
        Ok(())
    }

    /// The config as `key = value` lines, readable by [`RunConfig::from_text`].
    pub fn to_text(&self) -> String {
        let join = |v: Vec<String>| v.join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            writeln!(s, "{k} = {v}").expect("string write");
        };
        kv("data_dir", self.data_dir.display().to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("seed", self.seed.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        if let Some(t) = self.temperature {
            kv("temperature", t.to_string());
        }
        kv(
            "epsilons",
            join(self.epsilons.iter().map(f64::to_string).collect()),
        );
        kv(
            "patch_sizes",
            join(self.patch_sizes.iter().map(usize::to_string).collect()),
        );
        kv("target_class", self.target_class.to_string());
        kv("patch_epochs", self.patch_epochs.to_string());
        if let Some(n) = self.train_limit {
            kv("train_limit", n.to_string());
        }
        if let Some(n) = self.eval_limit {
            kv("eval_limit", n.to_string());
        }
        if let Some(p) = &self.checkpoint {
            kv("checkpoint", p.display().to_string());
        }
        s
    }
}
