//! `key = value` run configuration.

use crate::error::{Error, Result};
use crate::network::SCALES;
use crate::trainer::TrainConfig;

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

/// Parses and validates a run configuration. Unset keys keep their defaults.
pub fn parse_run_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut seen = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
        if seen.contains(&key) {
            return Err(Error::Config(format!("line {}: duplicate key {key:?}", no + 1)));
        }
        seen.push(key);
        if cfg.arch.set(key, value)? {
            continue;
        }
        match key {
            "seed" => cfg.seed = parse(key, value)?,
            "lr" => cfg.lr = parse(key, value)?,
            "steps" => cfg.steps = parse(key, value)?,
            "batch_size" => cfg.batch_size = parse(key, value)?,
            "flip" => cfg.flip = parse(key, value)?,
            "height" => cfg.data.height = parse(key, value)?,
            "width" => cfg.data.width = parse(key, value)?,
            "train_scenes" => cfg.data.train_scenes = parse(key, value)?,
            "heldout_scenes" => cfg.data.heldout_scenes = parse(key, value)?,
            "sparse_count" => cfg.data.sparse_count = parse(key, value)?,
            "scale_weights" => {
                let w: Vec<f64> = value.split(',').map(|v| parse(key, v.trim())).collect::<Result<_>>()?;
                cfg.scale_weights = w
                    .try_into()
                    .map_err(|w: Vec<f64>| Error::Config(format!("scale_weights: expected {SCALES} values, got {}", w.len())))?;
            }
            _ => return Err(Error::Config(format!("line {}: unknown key {key:?}", no + 1))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Every setting, defaults included, in a form [`parse_run_config`] accepts.
pub fn echo_run_config(cfg: &TrainConfig) -> String {
    let w: Vec<String> = cfg.scale_weights.iter().map(f64::to_string).collect();
    format!(
        "{}seed = {}\nlr = {}\nsteps = {}\nbatch_size = {}\nflip = {}\nheight = {}\nwidth = {}\ntrain_scenes = {}\nheldout_scenes = {}\nsparse_count = {}\nscale_weights = {}\n",
        cfg.arch.to_kv(),
        cfg.seed,
        cfg.lr,
        cfg.steps,
        cfg.batch_size,
        cfg.flip,
        cfg.data.height,
        cfg.data.width,
        cfg.data.train_scenes,
        cfg.data.heldout_scenes,
        cfg.data.sparse_count,
        w.join(",")
    )
}
