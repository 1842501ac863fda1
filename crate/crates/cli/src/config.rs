//! Training config files: either a JSON object of scalars or flat
//! `key = value` lines (`#` starts a comment).

use std::collections::BTreeMap;
use std::path::Path;

use labelprompt::trainer::TrainConfig;

pub type Settings = BTreeMap<String, String>;

pub fn read_settings(path: &Path) -> Result<Settings, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    if text.trim_start().starts_with('{') {
        let value: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        return value
            .into_iter()
            .map(|(k, v)| match v {
                serde_json::Value::String(s) => Ok((k, s)),
                serde_json::Value::Number(_) | serde_json::Value::Bool(_) => Ok((k, v.to_string())),
                other => Err(format!("{}: {k} must be a scalar, got {other}", path.display())),
            })
            .collect();
    }
    let mut out = Settings::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("{}:{}: expected key = value", path.display(), i + 1))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("invalid value {value:?} for {key}"))
}

/// Applies one setting. Keys use the long flag names with `_` or `-`.
pub fn apply(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<(), String> {
    match key.replace('-', "_").as_str() {
        "k" => {
            let k: i64 = parse(key, value)?;
            if k <= 0 {
                return Err(format!("k must be positive, got {k}"));
            }
            cfg.k = Some(k as usize);
        }
        "seed" => cfg.seed = parse(key, value)?,
        "val_seed" => cfg.val_seed = parse(key, value)?,
        "epochs" => cfg.epochs = parse(key, value)?,
        "batch_size" => cfg.batch_size = parse(key, value)?,
        "lr" | "learning_rate" => cfg.learning_rate = parse(key, value)?,
        "gamma" => cfg.objective.gamma = parse(key, value)?,
        "alpha1" => cfg.objective.alpha1 = parse(key, value)?,
        "alpha2" => cfg.objective.alpha2 = parse(key, value)?,
        "proj_dim" => cfg.objective.proj_dim = Some(parse(key, value)?),
        "token_strategy" => cfg.token_strategy = value.parse()?,
        "exclude_no_relation" => cfg.eval_exclude_no_relation = parse(key, value)?,
        "layers" => cfg.encoder.n_layers = parse(key, value)?,
        "heads" => cfg.encoder.n_heads = parse(key, value)?,
        "d_model" => cfg.encoder.d_model = parse(key, value)?,
        "max_len" => cfg.encoder.max_len = parse(key, value)?,
        other => return Err(format!("unknown config key {other:?}")),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let flat = dir.path().join("a.cfg");
        std::fs::write(&flat, "# run\nk = 8\nlr=0.01\ntoken-strategy = mask\n").unwrap();
        let json = dir.path().join("a.json");
        std::fs::write(&json, r#"{"k": 8, "lr": 0.01, "token_strategy": "mask"}"#).unwrap();
        for path in [flat, json] {
            let mut cfg = TrainConfig::full_data();
            for (k, v) in read_settings(&path).unwrap() {
                apply(&mut cfg, &k, &v).unwrap();
            }
            assert_eq!(cfg.k, Some(8));
            assert_eq!(cfg.learning_rate, 0.01);
            assert_eq!(cfg.token_strategy, labelprompt::template::TokenStrategy::Mask);
        }
    }

    #[test]
    fn rejects_unknown_and_bad_k() {
        let mut cfg = TrainConfig::full_data();
        assert!(apply(&mut cfg, "colour", "red").is_err());
        assert!(apply(&mut cfg, "k", "0").is_err());
    }
}
