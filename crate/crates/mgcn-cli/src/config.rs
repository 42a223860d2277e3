//! TOML run configuration: a `[synth]` table covering every generator field
//! and a `[train]` table covering every training field. Both sections are
//! optional and sparse; unset keys fall back to package defaults.

use anyhow::{bail, Context, Result};
use mgcn_core::{SynthConfig, TrainConfig};
use std::path::Path;

#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

/// Overlay `user` on top of `base`, table-wise.
fn merge(base: &mut toml::Value, user: &toml::Value) {
    match (base, user) {
        (toml::Value::Table(b), toml::Value::Table(u)) => {
            for (k, v) in u {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

fn section<T>(defaults: &T, table: Option<&toml::Value>, what: &str) -> Result<T>
where
    T: serde::Serialize + serde::de::DeserializeOwned,
{
    let mut merged =
        toml::Value::try_from(defaults).with_context(|| format!("encode {what} defaults"))?;
    if let Some(user) = table {
        if !user.is_table() {
            bail!("config section [{what}] must be a table");
        }
        merge(&mut merged, user);
    }
    merged
        .try_into()
        .with_context(|| format!("invalid [{what}] section"))
}

pub fn load_run_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let doc: toml::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("read config {}", p.display()))?;
            text.parse()
                .with_context(|| format!("parse config {}", p.display()))?
        }
        None => toml::Value::Table(Default::default()),
    };
    if let Some(table) = doc.as_table() {
        for key in table.keys() {
            if key != "synth" && key != "train" {
                bail!("unknown config section [{key}] (expected [synth] or [train])");
            }
        }
    }
    let mut synth: SynthConfig = section(&SynthConfig::default(), doc.get("synth"), "synth")?;
    let mut train: TrainConfig = section(&TrainConfig::default(), doc.get("train"), "train")?;
    if let Some(s) = seed {
        synth.seed = s;
        train.seed = s;
    }
    synth.validate().map_err(anyhow::Error::from)?;
    train.validate().map_err(anyhow::Error::from)?;
    Ok(RunConfig { synth, train })
}
