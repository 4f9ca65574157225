//! Loading the experiment config and applying `--set key=value` overrides.

use std::path::Path;

use afw_core::experiment::ExperimentConfig;
use anyhow::{anyhow, bail, Context, Result};
use toml::{Table, Value};

/// Parses `value` as a TOML literal; bare words become strings.
fn literal(value: &str) -> Value {
    match format!("v = {value}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => Value::String(value.to_string()),
    }
}

fn set(root: &mut Table, path: &str, value: Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields one key");
    let mut table = root;
    for k in parents {
        let entry = table.entry(k.to_string()).or_insert_with(|| Value::Table(Table::new()));
        table = entry.as_table_mut().ok_or_else(|| anyhow!("`{k}` in `{path}` is not a table"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Reads `file` (defaults when absent) and applies each `key=value`.
pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = match file {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let mut table: Table = text.parse().context("parsing config")?;
    for o in overrides {
        let Some((k, v)) = o.split_once('=') else {
            bail!("override `{o}` is not key=value");
        };
        set(&mut table, k.trim(), literal(v.trim()))?;
    }
    let cfg: ExperimentConfig = Value::Table(table).try_into().context("invalid config")?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_nested_values() {
        let cfg = load(None, &["train.max_steps=7".into(), "data.strength=0.3".into(), "name=quick".into(), "seeds=[4]".into()]).unwrap();
        assert_eq!(cfg.train.max_steps, 7);
        assert_eq!(cfg.data.strength, 0.3);
        assert_eq!(cfg.name, "quick");
        assert_eq!(cfg.seeds, vec![4]);
        assert_eq!(cfg.boost, ExperimentConfig::default().boost);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_syntax() {
        assert!(load(None, &["train.nope=1".into()]).is_err());
        assert!(load(None, &["train".into()]).is_err());
        assert!(load(None, &["seeds=[]".into()]).is_err());
    }
}
