//! Flat `key=value` run configuration with dotted sections.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected by name. [`snapshot`] renders every key in sorted order, so the
//! hash of a snapshot does not depend on how the source file was ordered.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data_synth::SplitCounts;
use crate::error::{Error, Result};
use crate::model::Target;
use crate::optimizer::RetainMode;
use crate::persist::sha256_hex;
use crate::trainer::{ablate, default_beta, Component, DataSource, RunConfig};

pub const KEYS: &[&str] = &[
    "ablate.oasa",
    "ablate.scl",
    "ablate.us",
    "data.n_test_defective",
    "data.n_test_normal",
    "data.n_train",
    "data.objects",
    "data.path",
    "data.source",
    "loss.lambda0",
    "loss.lambda1",
    "loss.lambda2",
    "loss.scl_keep_ratio",
    "loss.scl_tail_start",
    "model.dec_blocks",
    "model.disc_channels",
    "model.enc_blocks",
    "model.feat_dim",
    "model.ffn_hidden",
    "model.image_size",
    "model.latent_channels",
    "model.n_max",
    "model.patch",
    "model.target",
    "optim.beta",
    "optim.kappa",
    "optim.lr",
    "optim.retain_mode",
    "run.batch_size",
    "run.epochs",
    "run.heatmaps",
    "run.out",
    "run.protocol",
    "run.seed",
    "train.jitter",
];

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(
                format!("line {}", n + 1),
                format!("expected key=value, got `{line}`"),
            )
        })?;
        let key = key.trim().to_string();
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::config(key, "key given more than once"));
        }
    }
    Ok(map)
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::config(
            key,
            format!("expected true or false, got `{value}`"),
        )),
    }
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "auto" || value.is_empty() {
        Ok(None)
    } else {
        num(key, value).map(Some)
    }
}

fn counts_mut(cfg: &mut RunConfig) -> &mut SplitCounts {
    if !matches!(cfg.data, DataSource::Synthetic { .. }) {
        cfg.data = DataSource::Synthetic {
            objects: None,
            counts: SplitCounts::default(),
        };
    }
    match &mut cfg.data {
        DataSource::Synthetic { counts, .. } => counts,
        DataSource::Mvtec { .. } => unreachable!(),
    }
}

fn set(cfg: &mut RunConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "run.protocol" => cfg.protocol = v.to_string(),
        "run.seed" => cfg.seed = num(key, v)?,
        "run.epochs" => cfg.epochs = num(key, v)?,
        "run.batch_size" => cfg.batch_size = num(key, v)?,
        "run.heatmaps" => cfg.heatmaps = boolean(key, v)?,
        "run.out" => cfg.out_dir = PathBuf::from(v),
        "data.n_train" => counts_mut(cfg).n_train = num(key, v)?,
        "data.n_test_normal" => counts_mut(cfg).n_test_normal = num(key, v)?,
        "data.n_test_defective" => counts_mut(cfg).n_test_defective = num(key, v)?,
        "data.objects" => {
            let n = optional(key, v)?;
            counts_mut(cfg);
            if let DataSource::Synthetic { objects, .. } = &mut cfg.data {
                *objects = n;
            }
        }
        // source and path are resolved together in `from_map`
        "data.source" | "data.path" => {}
        "model.image_size" => cfg.model.image_size = num(key, v)?,
        "model.patch" => cfg.model.patch = num(key, v)?,
        "model.feat_dim" => cfg.model.feat_dim = num(key, v)?,
        "model.target" => {
            cfg.model.target = match v {
                "features" => Target::Features,
                "pixels" => Target::Pixels,
                _ => {
                    return Err(Error::config(
                        key,
                        format!("expected features or pixels, got `{v}`"),
                    ))
                }
            }
        }
        "model.latent_channels" => cfg.model.latent_channels = num(key, v)?,
        "model.ffn_hidden" => cfg.model.ffn_hidden = num(key, v)?,
        "model.enc_blocks" => cfg.model.enc_blocks = num(key, v)?,
        "model.dec_blocks" => cfg.model.dec_blocks = num(key, v)?,
        "model.n_max" => cfg.model.n_max = num(key, v)?,
        "model.disc_channels" => {
            cfg.model.disc_channels = v
                .split(',')
                .map(|c| num(key, c.trim()))
                .collect::<Result<Vec<usize>>>()?
        }
        "loss.lambda0" => cfg.loss.lambda0 = num(key, v)?,
        "loss.lambda1" => cfg.loss.lambda1 = num(key, v)?,
        "loss.lambda2" => cfg.loss.lambda2 = num(key, v)?,
        "loss.scl_keep_ratio" => cfg.loss.scl_keep_ratio = num(key, v)?,
        "loss.scl_tail_start" => cfg.loss.scl_tail_start = optional(key, v)?,
        "optim.lr" => cfg.update.lr = num(key, v)?,
        "optim.beta" => cfg.update.beta = num(key, v)?,
        "optim.kappa" => cfg.update.kappa = num(key, v)?,
        "optim.retain_mode" => cfg.update.retain_mode = v.parse()?,
        "train.jitter" => cfg.jitter = num(key, v)?,
        "ablate.oasa" | "ablate.scl" | "ablate.us" => {
            boolean(key, v)?;
        }
        _ => return Err(Error::config(key, "unknown configuration key")),
    }
    Ok(())
}

/// Build a config from parsed pairs on top of the defaults. Ablation flags are
/// applied last so they win over explicit loss or optimizer values.
pub fn from_map(map: &BTreeMap<String, String>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (k, v) in map {
        set(&mut cfg, k, v)?;
    }
    if cfg.update.retain_mode == RetainMode::Literal && !map.contains_key("optim.beta") {
        cfg.update.beta = default_beta(RetainMode::Literal);
    }
    let source = map
        .get("data.source")
        .map(String::as_str)
        .unwrap_or("synthetic");
    match source {
        "synthetic" => {}
        "mvtec" => {
            let path = map
                .get("data.path")
                .filter(|p| !p.is_empty())
                .ok_or_else(|| Error::config("data.path", "required when data.source=mvtec"))?;
            cfg.data = DataSource::Mvtec {
                root: PathBuf::from(path),
            };
        }
        other => {
            return Err(Error::config(
                "data.source",
                format!("expected synthetic or mvtec, got `{other}`"),
            ))
        }
    }
    for c in Component::ALL {
        let key = format!("ablate.{c}");
        if let Some(v) = map.get(&key) {
            if boolean(&key, v)? {
                cfg = ablate(&cfg, c);
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse(text: &str) -> Result<RunConfig> {
    from_map(&parse_kv(text)?)
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), T::to_string)
}

/// Canonical sorted rendering of every key except the output location.
pub fn snapshot(cfg: &RunConfig) -> String {
    let mut m: BTreeMap<&str, String> = BTreeMap::new();
    m.insert("run.protocol", cfg.protocol.clone());
    m.insert("run.seed", cfg.seed.to_string());
    m.insert("run.epochs", cfg.epochs.to_string());
    m.insert("run.batch_size", cfg.batch_size.to_string());
    m.insert("run.heatmaps", cfg.heatmaps.to_string());
    match &cfg.data {
        DataSource::Synthetic { objects, counts } => {
            m.insert("data.source", "synthetic".into());
            m.insert("data.objects", opt(objects));
            m.insert("data.n_train", counts.n_train.to_string());
            m.insert("data.n_test_normal", counts.n_test_normal.to_string());
            m.insert("data.n_test_defective", counts.n_test_defective.to_string());
        }
        DataSource::Mvtec { root } => {
            m.insert("data.source", "mvtec".into());
            m.insert("data.path", root.display().to_string());
        }
    }
    let mc = &cfg.model;
    m.insert("model.image_size", mc.image_size.to_string());
    m.insert("model.patch", mc.patch.to_string());
    m.insert("model.feat_dim", mc.feat_dim.to_string());
    m.insert(
        "model.target",
        match mc.target {
            Target::Features => "features",
            Target::Pixels => "pixels",
        }
        .into(),
    );
    m.insert("model.latent_channels", mc.latent_channels.to_string());
    m.insert("model.ffn_hidden", mc.ffn_hidden.to_string());
    m.insert("model.enc_blocks", mc.enc_blocks.to_string());
    m.insert("model.dec_blocks", mc.dec_blocks.to_string());
    m.insert("model.n_max", mc.n_max.to_string());
    m.insert(
        "model.disc_channels",
        mc.disc_channels
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(","),
    );
    m.insert("loss.lambda0", cfg.loss.lambda0.to_string());
    m.insert("loss.lambda1", cfg.loss.lambda1.to_string());
    m.insert("loss.lambda2", cfg.loss.lambda2.to_string());
    m.insert("loss.scl_keep_ratio", cfg.loss.scl_keep_ratio.to_string());
    m.insert("loss.scl_tail_start", opt(&cfg.loss.scl_tail_start));
    m.insert("optim.lr", cfg.update.lr.to_string());
    m.insert("optim.beta", cfg.update.beta.to_string());
    m.insert("optim.kappa", cfg.update.kappa.to_string());
    m.insert("optim.retain_mode", cfg.update.retain_mode.to_string());
    m.insert("train.jitter", cfg.jitter.to_string());
    m.insert("ablate.oasa", cfg.ablation.oasa.to_string());
    m.insert("ablate.scl", cfg.ablation.scl.to_string());
    m.insert("ablate.us", cfg.ablation.us.to_string());
    m.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn config_hash(cfg: &RunConfig) -> String {
    sha256_hex(snapshot(cfg).as_bytes())
}
