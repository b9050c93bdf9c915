//! Run configuration files: `key = value` lines with `#` comments.
//!
//! Every key can also be set by the flag of the same name (underscores
//! become dashes); flags win over the file. Relative paths in a file are
//! resolved against the file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mdat_core::train::{ArchConfig, DiagnosticConfig, TrainConfig, Variant};
use mdat_core::{Error, Result};

pub const KEYS: &[&str] = &[
    "manifest",
    "out_dir",
    "variant",
    "alpha",
    "beta",
    "lr",
    "batch_size",
    "epochs",
    "seed",
    "eval_every",
    "msuda",
    "dev_fraction",
    "arch",
    "shared_hidden",
    "d_s",
    "specific_hidden",
    "d_p",
    "classifier_hidden",
    "keep_prob",
    "diagnostic",
    "folds",
    "workers",
];

const PATH_KEYS: &[&str] = &["manifest", "out_dir"];

/// Raw `key → value` pairs, validated against [`KEYS`].
pub fn parse_pairs(text: &str, source: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = |m: String| Error::Config(format!("{source}:{}: {m}", lineno + 1));
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| at(format!("expected `key = value`, got {line:?}")))?;
        let key = key.trim();
        if !KEYS.contains(&key) {
            return Err(at(format!("unknown key {key:?}")));
        }
        if out.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(at(format!("duplicate key {key:?}")));
        }
    }
    Ok(out)
}

/// Fully resolved settings shared by the training-related commands.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Domain name (or index) whose labels are withheld.
    pub msuda: Option<String>,
    pub folds: usize,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            manifest: None,
            out_dir: None,
            msuda: None,
            folds: 5,
            workers: 1,
        }
    }
}

fn typed<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn layer_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| typed(key, v.trim())).collect()
}

fn bool_value(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl RunConfig {
    /// Defaults, then the file (if any), then `overrides` from flags.
    pub fn build(file: Option<&Path>, overrides: &[(&'static str, Option<String>)]) -> Result<Self> {
        let mut values = BTreeMap::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let base = path.parent().unwrap_or(Path::new(""));
            for (k, v) in parse_pairs(&text, &path.display().to_string())? {
                let v = if PATH_KEYS.contains(&k.as_str()) {
                    base.join(&v).display().to_string()
                } else {
                    v
                };
                values.insert(k, v);
            }
        }
        for (k, v) in overrides {
            debug_assert!(KEYS.contains(k), "flag {k} has no config key");
            if let Some(v) = v {
                values.insert(k.to_string(), v.clone());
            }
        }
        Self::from_values(&values)
    }

    fn from_values(values: &BTreeMap<String, String>) -> Result<Self> {
        let mut rc = RunConfig::default();
        let t = &mut rc.train;
        // the preset goes first so individual layer keys can refine it
        if let Some(v) = values.get("arch") {
            t.arch = match v.as_str() {
                "standard" => ArchConfig::default(),
                "compact" => ArchConfig::compact(),
                _ => return Err(Error::Config(format!("arch: expected standard or compact, got {v:?}"))),
            };
        }
        for (k, v) in values {
            let (k, v) = (k.as_str(), v.as_str());
            match k {
                "manifest" => rc.manifest = Some(PathBuf::from(v)),
                "out_dir" => rc.out_dir = Some(PathBuf::from(v)),
                "variant" => t.variant = v.parse::<Variant>()?,
                "alpha" => t.alpha = typed(k, v)?,
                "beta" => t.beta = typed(k, v)?,
                "lr" => t.lr = typed(k, v)?,
                "batch_size" => t.batch_size = typed(k, v)?,
                "epochs" => t.epochs = typed(k, v)?,
                "seed" => t.seed = typed(k, v)?,
                "eval_every" => t.eval_every = typed(k, v)?,
                "msuda" => rc.msuda = Some(v.to_string()),
                "dev_fraction" => t.dev_fraction = typed(k, v)?,
                "arch" => {}
                "shared_hidden" => t.arch.shared_hidden = layer_list(k, v)?,
                "d_s" => t.arch.d_s = typed(k, v)?,
                "specific_hidden" => t.arch.specific_hidden = layer_list(k, v)?,
                "d_p" => t.arch.d_p = typed(k, v)?,
                "classifier_hidden" => t.arch.classifier_hidden = layer_list(k, v)?,
                "keep_prob" => t.arch.keep_prob = typed(k, v)?,
                "diagnostic" => t.diagnostic = bool_value(k, v)?.then(DiagnosticConfig::default),
                "folds" => rc.folds = typed(k, v)?,
                "workers" => rc.workers = typed(k, v)?,
                _ => return Err(Error::Config(format!("unknown key {k:?}"))),
            }
        }
        rc.train.validate()?;
        if rc.folds < 2 {
            return Err(Error::Config(format!("folds must be >= 2, got {}", rc.folds)));
        }
        Ok(rc)
    }

    pub fn require_manifest(&self) -> Result<&Path> {
        self.manifest
            .as_deref()
            .ok_or_else(|| Error::Usage("no corpus manifest (set `manifest` or pass --manifest)".into()))
    }

    pub fn require_out_dir(&self) -> Result<&Path> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| Error::Usage("no output directory (set `out_dir` or pass --out-dir)".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_standard_hyperparameters() {
        let rc = RunConfig::build(None, &[]).unwrap();
        assert_eq!(rc.train, TrainConfig::default());
        assert_eq!(rc.train.alpha, 0.5);
        assert_eq!(rc.train.beta, 4.0);
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        let err = parse_pairs("alpha = 1\ngamma = 2\n", "run.conf").unwrap_err();
        assert_eq!(err.kind(), "config");
        assert!(err.to_string().contains("run.conf:2"));
        assert!(parse_pairs("alpha = 1\nalpha = 2\n", "x").is_err());
        assert!(parse_pairs("alpha 1\n", "x").is_err());
    }

    #[test]
    fn flags_override_file_and_paths_resolve_against_it() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(
            &path,
            "# comment\narch = compact\nd_s = 12\nalpha = 1\nmanifest = data/manifest.txt\nshared_hidden = none\n",
        )
        .unwrap();
        let rc = RunConfig::build(Some(&path), &[("alpha", Some("2".into())), ("beta", None)]).unwrap();
        assert_eq!(rc.train.alpha, 2.0);
        assert_eq!(rc.train.arch.d_s, 12);
        assert_eq!(rc.train.arch.d_p, ArchConfig::compact().d_p);
        assert!(rc.train.arch.shared_hidden.is_empty());
        assert_eq!(rc.manifest.unwrap(), dir.path().join("data/manifest.txt"));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for (k, v) in [("beta", "0.5"), ("epochs", "-1"), ("variant", "gan"), ("folds", "1"), ("diagnostic", "maybe")] {
            let err = RunConfig::build(None, &[(k, Some(v.to_string()))]).unwrap_err();
            assert_eq!(err.kind(), "config", "{k} = {v}");
        }
    }
}
