//! The flat run configuration shared by `train` and `ablate`.
//!
//! Keys are the network (`net.*`), training (`train.*`, `loss.*`, `aug.*`),
//! data (`data.*`) and output (`out.*`) settings. A config file is read
//! first, then `--set key=value` overrides; unknown keys are rejected.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use focus_unet::config::{float_text, KeyValues};
use focus_unet::model::NetworkConfig;
use focus_unet::trainer::TrainConfig;
use focus_unet::{Error, Result};

pub const RESOLVED_FILE: &str = "resolved.cfg";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    /// One train/test split (or an explicit test directory).
    Single,
    /// k-fold cross validation over `data.dir`.
    KFold,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Single => "single",
            SplitKind::KFold => "kfold",
        }
    }
}

impl FromStr for SplitKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(SplitKind::Single),
            "kfold" => Ok(SplitKind::KFold),
            _ => Err(Error::config(
                "data.split",
                format!("expected single or kfold, got {s:?}"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Dataset with `images/` and `masks/` subdirectories.
    pub dir: Option<PathBuf>,
    /// Explicit test set for single-split runs; otherwise carved from `dir`.
    pub test_dir: Option<PathBuf>,
    pub split: SplitKind,
    pub folds: usize,
    pub test_fraction: f64,
    /// Share of each training partition held out for model selection.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            test_dir: None,
            split: SplitKind::Single,
            folds: 5,
            test_fraction: 0.2,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub net: NetworkConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            net: NetworkConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            out_dir: PathBuf::from("runs/focus-unet"),
        }
    }
}

const OWN_KEYS: [&str; 8] = [
    "data.dir",
    "data.test_dir",
    "data.split",
    "data.folds",
    "data.test_fraction",
    "data.val_fraction",
    "data.seed",
    "out.dir",
];

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

fn read_path(kv: &KeyValues, key: &str, target: &mut Option<PathBuf>) {
    if let Some(v) = kv.get(key) {
        *target = (!v.is_empty()).then(|| PathBuf::from(v));
    }
}

impl RunConfig {
    pub fn keys() -> Vec<&'static str> {
        let mut keys: Vec<&str> = NetworkConfig::KEYS.to_vec();
        keys.extend(TrainConfig::KEYS);
        keys.extend(OWN_KEYS);
        keys
    }

    /// Defaults, overridden by the config file and then by `overrides`.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut kv = match file {
            Some(path) => {
                if !path.is_file() {
                    return Err(Error::MissingFile(path.to_path_buf()));
                }
                KeyValues::parse(&std::fs::read_to_string(path)?)?
            }
            None => KeyValues::new(),
        };
        for o in overrides {
            kv.set_assignment(o)?;
        }
        Self::from_key_values(&kv)
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(&Self::keys())?;
        let mut cfg = RunConfig::default();
        cfg.net.apply(kv)?;
        cfg.train.apply(kv)?;
        let d = &mut cfg.data;
        read_path(kv, "data.dir", &mut d.dir);
        read_path(kv, "data.test_dir", &mut d.test_dir);
        kv.read("data.split", &mut d.split)?;
        kv.read("data.folds", &mut d.folds)?;
        kv.read("data.test_fraction", &mut d.test_fraction)?;
        kv.read("data.val_fraction", &mut d.val_fraction)?;
        kv.read("data.seed", &mut d.seed)?;
        if let Some(v) = kv.get("out.dir") {
            cfg.out_dir = PathBuf::from(v);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        let d = &self.data;
        if d.split == SplitKind::KFold && d.folds < 2 {
            return Err(Error::config("data.folds", "must be >= 2"));
        }
        if !(0.0 < d.test_fraction && d.test_fraction < 1.0) {
            return Err(Error::config("data.test_fraction", "must lie in (0, 1)"));
        }
        if !(0.0 < d.val_fraction && d.val_fraction < 1.0) {
            return Err(Error::config("data.val_fraction", "must lie in (0, 1)"));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::config("out.dir", "must not be empty"));
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = self.net.to_key_values();
        kv.merge(&self.train.to_key_values());
        let d = &self.data;
        kv.set("data.dir", path_text(&d.dir));
        kv.set("data.test_dir", path_text(&d.test_dir));
        kv.set("data.split", d.split.as_str());
        kv.set("data.folds", d.folds);
        kv.set("data.test_fraction", float_text(d.test_fraction));
        kv.set("data.val_fraction", float_text(d.val_fraction));
        kv.set("data.seed", d.seed);
        kv.set("out.dir", self.out_dir.display());
        kv
    }

    pub fn data_dir(&self) -> Result<&Path> {
        self.data
            .dir
            .as_deref()
            .ok_or_else(|| Error::config("data.dir", "no dataset given"))
    }

    /// Writes the complete configuration to `dir/resolved.cfg`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        write_resolved(dir, &self.to_key_values(), None)
    }
}

/// Writes `kv` (preceded by an optional comment line) to `dir/resolved.cfg`.
pub fn write_resolved(dir: &Path, kv: &KeyValues, comment: Option<&str>) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(RESOLVED_FILE);
    let mut text = String::new();
    if let Some(c) = comment {
        for line in c.lines() {
            text.push_str("# ");
            text.push_str(line);
            text.push('\n');
        }
    }
    text.push_str(&kv.to_text());
    std::fs::write(&path, text)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_roundtrips() {
        let sets = [
            "net.depth=3".to_string(),
            "data.dir=/tmp/x".to_string(),
            "train.lr0=0.05".to_string(),
            "data.split=kfold".to_string(),
        ];
        let cfg = RunConfig::load(None, &sets).unwrap();
        assert_eq!(cfg.net.depth, 3);
        assert_eq!(cfg.data.split, SplitKind::KFold);
        let back =
            RunConfig::from_key_values(&KeyValues::parse(&cfg.to_key_values().to_text()).unwrap())
                .unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_key_values().keys().count(), RunConfig::keys().len());
    }

    #[test]
    fn unknown_and_invalid_keys() {
        let err = RunConfig::load(None, &["net.colour=red".into()]).unwrap_err();
        assert!(matches!(err, Error::Config { field, .. } if field == "net.colour"));
        let err = RunConfig::load(None, &["train.momentum=1.5".into()]).unwrap_err();
        assert!(matches!(err, Error::Config { field, .. } if field == "train.momentum"));
        assert!(RunConfig::load(None, &["data.split=loo".into()]).is_err());
        assert!(RunConfig::load(Some(Path::new("/no/such/file")), &[]).is_err());
    }
}
