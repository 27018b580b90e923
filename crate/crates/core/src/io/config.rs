//! Plain-text `key=value` model configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Required keys:
//! `task`, `width`, `fusion`, `alpha`, `p`, `ca_reduction`, `seed`, and
//! `scale` when `task=sr`. Optional: `branch_menu`, `expansion`, `precision`,
//! `prelu`, `lr`, `batch_size`, `patch`, `train_count`. Anything else, or a
//! repeated key, is an error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{config_err, Error, Result};
use crate::loss::LossParams;
use crate::network::config::{format_menu, parse_menu};
use crate::network::{SyeNetConfig, Task};
use crate::tensor::DType;

const KEYS: [&str; 16] = [
    "task",
    "scale",
    "width",
    "fusion",
    "branch_menu",
    "expansion",
    "ca_reduction",
    "prelu",
    "precision",
    "alpha",
    "p",
    "seed",
    "lr",
    "batch_size",
    "patch",
    "train_count",
];

/// Training settings a config file may override.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TrainSettings {
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub patch: Option<usize>,
    pub train_count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigFile {
    pub model: SyeNetConfig,
    pub loss: LossParams,
    pub seed: u64,
    pub train: TrainSettings,
    /// Whether optional model keys were written explicitly; kept so that
    /// emitting reproduces the same key set.
    explicit: [bool; 4],
}

impl ConfigFile {
    pub fn new(model: SyeNetConfig, loss: LossParams, seed: u64) -> Self {
        ConfigFile { model, loss, seed, train: TrainSettings::default(), explicit: [true; 4] }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Config(format!("invalid value {raw:?} for {key}")))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => config_err(format!("invalid value {raw:?} for {key} (true or false)")),
    }
}

fn parse_precision(raw: &str) -> Result<DType> {
    match raw {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        _ => config_err(format!("invalid precision {raw:?} (f32 or f64)")),
    }
}

pub fn parse_config(text: &str) -> Result<ConfigFile> {
    let mut kv: BTreeMap<&str, &str> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return config_err(format!("line {}: unknown key {k:?}", i + 1));
        }
        if kv.insert(k, v).is_some() {
            return config_err(format!("line {}: duplicate key {k:?}", i + 1));
        }
    }
    let required = |k: &str| kv.get(k).copied().ok_or_else(|| Error::Config(format!("missing required key {k:?}")));

    let task = match required("task")? {
        "sr" => Task::sr(value("scale", required("scale")?)?)?,
        "isp" | "lle" if kv.contains_key("scale") => return config_err("scale applies to task=sr only"),
        "isp" => Task::Isp,
        "lle" => Task::Lle,
        other => return config_err(format!("unknown task {other:?} (sr, isp or lle)")),
    };
    let mut model = SyeNetConfig::new(task);
    model.width = value("width", required("width")?)?;
    model.fusion = value("fusion", required("fusion")?)?;
    model.ca_reduction = value("ca_reduction", required("ca_reduction")?)?;
    let mut explicit = [false; 4];
    if let Some(v) = kv.get("branch_menu") {
        model.branch_menu = parse_menu(v)?;
        explicit[0] = true;
    }
    if let Some(v) = kv.get("expansion") {
        model.expansion = value("expansion", v)?;
        explicit[1] = true;
    }
    if let Some(v) = kv.get("precision") {
        model.precision = parse_precision(v)?;
        explicit[2] = true;
    }
    if let Some(v) = kv.get("prelu") {
        model.prelu = parse_bool("prelu", v)?;
        explicit[3] = true;
    }
    model.validate()?;
    let loss = LossParams::new(value("alpha", required("alpha")?)?, value("p", required("p")?)?)?;
    let seed = value("seed", required("seed")?)?;
    let opt = |k: &str| kv.get(k).copied();
    let train = TrainSettings {
        lr: opt("lr").map(|v| value("lr", v)).transpose()?,
        batch_size: opt("batch_size").map(|v| value("batch_size", v)).transpose()?,
        patch: opt("patch").map(|v| value("patch", v)).transpose()?,
        train_count: opt("train_count").map(|v| value("train_count", v)).transpose()?,
    };
    if train.lr.is_some_and(|lr| !(lr > 0.0 && lr.is_finite())) {
        return config_err("lr must be positive and finite");
    }
    if train.batch_size == Some(0) || train.train_count == Some(0) {
        return config_err("batch_size and train_count must be positive");
    }
    Ok(ConfigFile { model, loss, seed, train, explicit })
}

pub fn emit_config(cfg: &ConfigFile) -> String {
    let m = &cfg.model;
    let mut s = String::new();
    let mut line = |k: &str, v: String| {
        let _ = writeln!(s, "{k}={v}");
    };
    line("task", m.task.name().into());
    if let Task::Sr { scale } = m.task {
        line("scale", scale.to_string());
    }
    line("width", m.width.to_string());
    line("fusion", m.fusion.to_string());
    if cfg.explicit[0] {
        line("branch_menu", format_menu(&m.branch_menu));
    }
    if cfg.explicit[1] {
        line("expansion", m.expansion.to_string());
    }
    line("ca_reduction", m.ca_reduction.to_string());
    if cfg.explicit[3] {
        line("prelu", m.prelu.to_string());
    }
    if cfg.explicit[2] {
        line("precision", m.precision.name().into());
    }
    line("alpha", cfg.loss.alpha.to_string());
    line("p", cfg.loss.p.to_string());
    line("seed", cfg.seed.to_string());
    if let Some(v) = cfg.train.lr {
        line("lr", v.to_string());
    }
    if let Some(v) = cfg.train.batch_size {
        line("batch_size", v.to_string());
    }
    if let Some(v) = cfg.train.patch {
        line("patch", v.to_string());
    }
    if let Some(v) = cfg.train.train_count {
        line("train_count", v.to_string());
    }
    s
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ConfigFile> {
    parse_config(&fs::read_to_string(path)?)
}

pub fn save_config(path: impl AsRef<Path>, cfg: &ConfigFile) -> Result<()> {
    fs::write(path, emit_config(cfg))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::FusionKind;

    const SR: &str = "task=sr\nscale=2\nwidth=8\nfusion=qcu\nalpha=1\np=1\nca_reduction=2\nseed=42\n";

    #[test]
    fn minimal_sr_config() {
        let c = parse_config(SR).unwrap();
        assert_eq!(c.model, SyeNetConfig::new(Task::Sr { scale: 2 }));
        assert_eq!(c.loss, LossParams::new(1.0, 1).unwrap());
        assert_eq!(c.seed, 42);
        assert_eq!(parse_config(&emit_config(&c)).unwrap(), c);
    }

    #[test]
    fn full_config_roundtrips() {
        let text = "# comment\ntask=isp\nwidth=12\nfusion=cat_conv\nbranch_menu=K,1+bn\nexpansion=3\n\
                    ca_reduction=3\nprelu=true\nprecision=f64\nalpha=0.25\np=2\nseed=7\nlr=0.003\n\
                    batch_size=8\npatch=48\ntrain_count=64\n";
        let c = parse_config(text).unwrap();
        assert_eq!(c.model.task, Task::Isp);
        assert_eq!(c.model.fusion, FusionKind::CatConv);
        assert_eq!(c.model.precision, DType::F64);
        assert!(c.model.prelu);
        assert_eq!(c.train.lr, Some(0.003));
        let emitted = emit_config(&c);
        assert_eq!(parse_config(&emitted).unwrap(), c);
        assert_eq!(emit_config(&parse_config(&emitted).unwrap()), emitted);
    }

    #[test]
    fn errors() {
        let with = |extra: &str| parse_config(&format!("{SR}{extra}"));
        assert!(with("colour=red\n").unwrap_err().to_string().contains("unknown key"));
        assert!(with("seed=3\n").unwrap_err().to_string().contains("duplicate"));
        assert!(with("no equals sign\n").is_err());
        assert!(parse_config(&SR.replace("seed=42\n", "")).unwrap_err().to_string().contains("seed"));
        assert!(parse_config(&SR.replace("scale=2\n", "")).is_err());
        assert!(parse_config(&SR.replace("task=sr", "task=lle")).is_err());
        assert!(parse_config(&SR.replace("width=8", "width=7")).is_err());
        assert!(parse_config(&SR.replace("p=1", "p=3")).is_err());
        assert!(parse_config(&SR.replace("fusion=qcu", "fusion=max")).is_err());
    }
}
