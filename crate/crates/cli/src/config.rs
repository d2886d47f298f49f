//! Flat `key = value` run configuration.
//!
//! Every key is listed in [`KEYS`] with its default; a key without a default
//! must be given by the commands that read it. Unknown keys are rejected.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use convexlab_core::data::fetch::DEFAULT_MNIST_BASE_URL;
use convexlab_core::Error;

pub const DATA_DIR_ENV: &str = "CONVEXLAB_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "data/mnist";

pub struct KeySpec {
    pub key: &'static str,
    /// `None` marks a required key.
    pub default: Option<&'static str>,
    pub doc: &'static str,
}

const fn key(key: &'static str, default: &'static str, doc: &'static str) -> KeySpec {
    KeySpec {
        key,
        default: Some(default),
        doc,
    }
}

const fn required(key: &'static str, doc: &'static str) -> KeySpec {
    KeySpec {
        key,
        default: None,
        doc,
    }
}

pub const KEYS: &[KeySpec] = &[
    key("run_name", "run", "prefix of every output file"),
    key("seed", "1", "single source of all randomness"),
    key("out_dir", "runs", "directory for outputs"),
    key("data_dir", "auto", "MNIST directory; auto = $CONVEXLAB_DATA_DIR or data/mnist"),
    key("mnist_base_url", DEFAULT_MNIST_BASE_URL, "download location of the gzip IDX files"),
    key("dataset", "auto", "mnist | sine | peak | binary; auto = sine for scan, mnist otherwise"),
    key("train_count", "5000", "MNIST training subset size"),
    key("val_count", "1000", "MNIST validation subset size"),
    key("test_count", "1000", "MNIST test subset size"),
    key("synthetic_count", "20", "samples per synthetic split"),
    key("noise_sd", "0", "target noise of the synthetic regression sets"),
    key("margin", "0.2", "class margin of the synthetic binary set"),
    required("net", "layer widths, e.g. 784,128,10"),
    key("activation", "tanh", "hidden activation: sigmoid | tanh | relu"),
    key("output", "auto", "softmax-ce | sigmoid-binary-ce | identity-squared; auto follows the dataset"),
    required("strategy", "ce | nrae-fixed | scheduled | anrat"),
    key("lr", "0.1", "weight learning rate"),
    key("lambda_lr", "auto", "lambda learning rate; auto = 0.01 * lr"),
    key("epochs", "20", "training epochs"),
    key("batch_size", "100", "minibatch size"),
    key("lambda", "auto", "initial lambda; auto = 100 for scheduled, 10 otherwise"),
    key("p", "1", "lambda exponent p"),
    key("q", "1", "penalty exponent q"),
    key("a", "0.1", "penalty weight a"),
    key("decay", "0.8", "scheduled only: per-epoch lambda decay"),
    key("switch_cap", "500", "scheduled only: largest lambda^p * max loss for raw RAE"),
    key("stagnancy_window", "5", "epochs compared by the stagnancy detector"),
    key("stagnancy_min_rel", "1e-4", "relative improvement below which a window is stagnant"),
    key("grid_lr", "1,0.5,0.1", "grid search learning rates"),
    key("grid_a", "1,0.1,0.001", "grid search penalty weights"),
    key("lambdas", "1,2,4,8", "scan: ascending lambda values"),
    key("points", "200", "scan: sampled parameter vectors"),
    key("box_radius", "4", "scan: half-width of the sampling box"),
    key("fd_step", "1e-4", "scan: base Hessian finite-difference step"),
    key("nrae_fallback", "true", "scan: use NRAE where raw RAE would overflow"),
    key("configs", "100", "gradcheck: random configurations"),
    key("check_lambda", "random", "gradcheck: fixed lambda or random"),
    key("check_p", "random", "gradcheck: fixed p or random"),
    key("tolerance", "1e-5", "gradcheck: weight-gradient relative error bound"),
    key("lambda_tolerance", "1e-6", "gradcheck: lambda-gradient relative error bound"),
    required("model", "eval: model file to load"),
];

const SCHEDULED_ONLY: &[&str] = &["decay", "switch_cap"];

fn spec(key: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.key == key)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    explicit: BTreeSet<String>,
}

impl RunConfig {
    /// Parses config-file text; `origin` names the file in messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self, Error> {
        let mut config = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{origin}:{}: expected 'key = value', got '{line}'", n + 1))
            })?;
            let k = k.trim();
            if config.explicit.contains(k) {
                return Err(Error::Config(format!("{origin}:{}: duplicate key '{k}'", n + 1)));
            }
            config
                .set(k, v.trim())
                .map_err(|e| Error::Config(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Error> {
        if spec(key).is_none() {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
        if value.is_empty() {
            return Err(Error::Config(format!("key '{key}' has an empty value")));
        }
        self.values.insert(key.to_string(), value.to_string());
        self.explicit.insert(key.to_string());
        Ok(())
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Raw value, falling back to the default. Errors on required keys that
    /// were never set.
    pub fn raw(&self, key: &str) -> Result<&str, Error> {
        let spec = spec(key).unwrap_or_else(|| panic!("'{key}' is not a config key"));
        match (self.values.get(key), spec.default) {
            (Some(v), _) => Ok(v),
            (None, Some(d)) => Ok(d),
            (None, None) => Err(Error::Config(format!("missing required key '{key}'"))),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, Error>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key)?;
        raw.parse()
            .map_err(|e| Error::Config(format!("invalid value '{raw}' for '{key}': {e}")))
    }

    /// `None` when the key holds the given sentinel (`auto`, `random`).
    pub fn get_or<T: FromStr>(&self, key: &str, sentinel: &str) -> Result<Option<T>, Error>
    where
        T::Err: std::fmt::Display,
    {
        if self.raw(key)? == sentinel {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, Error>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key)?;
        raw.split(',')
            .map(|item| {
                let item = item.trim();
                item.parse()
                    .map_err(|e| Error::Config(format!("invalid entry '{item}' in '{key}': {e}")))
            })
            .collect()
    }

    pub fn data_dir(&self) -> Result<PathBuf, Error> {
        Ok(match self.raw("data_dir")? {
            "auto" => std::env::var_os(DATA_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR)),
            dir => PathBuf::from(dir),
        })
    }

    /// Cross-key checks that do not depend on the command.
    pub fn validate(&self) -> Result<(), Error> {
        let scheduled = self.raw("strategy").is_ok_and(|s| s == "scheduled");
        for key in SCHEDULED_ONLY {
            if self.is_explicit(key) && !scheduled {
                return Err(Error::Config(format!(
                    "key '{key}' only applies to strategy = scheduled"
                )));
            }
        }
        Ok(())
    }

    /// Every effective setting, one `key = value` per line. Reading this
    /// text back yields the same run. `data_dir` is written resolved so the
    /// echo does not depend on the environment.
    pub fn resolved_text(&self) -> String {
        let scheduled = self.raw("strategy").is_ok_and(|s| s == "scheduled");
        let mut out = String::new();
        for spec in KEYS {
            if SCHEDULED_ONLY.contains(&spec.key) && !scheduled {
                continue;
            }
            let value = match spec.key {
                "data_dir" => self.data_dir().map(|p| p.display().to_string()).ok(),
                k => self.raw(k).ok().map(str::to_string),
            };
            if let Some(v) = value {
                writeln!(out, "{} = {v}", spec.key).unwrap();
            }
        }
        out
    }
}
