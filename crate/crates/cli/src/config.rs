//! Flat TOML run configuration. Every key may also be given on the command
//! line as `--key value` (or `--key=value`); dashes in flag names map to
//! underscores. Flags win over the file.

use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use tabtoken_core::Error;

fn usage(field: impl Into<String>, msg: impl Into<String>) -> anyhow::Error {
    Error::Config { field: field.into(), msg: msg.into() }.into()
}

/// Parses a flag value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_owned())),
        Err(_) => toml::Value::String(raw.to_owned()),
    }
}

/// Turns `["--a", "1", "--b=x"]` into key/value pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, toml::Value)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            return Err(usage(arg.as_str(), "expected a --key flag"));
        };
        let (key, raw) = match flag.split_once('=') {
            Some((k, v)) => (k.to_owned(), v.to_owned()),
            None => {
                let v = it.next().ok_or_else(|| usage(flag, "flag needs a value"))?;
                (flag.to_owned(), v.clone())
            }
        };
        out.push((key.replace('-', "_"), parse_value(&raw)));
    }
    Ok(out)
}

fn field_of(msg: &str) -> String {
    msg.split('`').nth(1).unwrap_or("config").to_owned()
}

/// Merges the optional file and the overrides into `T`.
pub fn resolve<T: DeserializeOwned>(file: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            text.parse::<toml::Table>()
                .map_err(|e| usage("config", format!("{}: {}", path.display(), e.message())))?
        }
        None => toml::Table::new(),
    };
    for (k, v) in parse_overrides(overrides)? {
        table.insert(k, v);
    }
    if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
        return Err(usage(k.as_str(), "configuration is flat; nested tables are not allowed"));
    }
    T::deserialize(toml::Value::Table(table)).map_err(|e| {
        let msg = e.message().to_owned();
        usage(field_of(&msg), msg)
    })
}

/// Writes the resolved configuration to `dir/config.toml`.
pub fn write_resolved<T: Serialize>(dir: &Path, cfg: &T) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let text = toml::to_string(cfg).context("serializing resolved config")?;
    std::fs::write(dir.join("config.toml"), text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Deserialize, PartialEq)]
    #[serde(default, deny_unknown_fields)]
    struct Demo {
        lr: f64,
        epochs: usize,
        name: String,
        list: Vec<String>,
    }

    impl Default for Demo {
        fn default() -> Self {
            Demo { lr: 0.1, epochs: 1, name: "a".into(), list: vec![] }
        }
    }

    fn args(a: &[&str]) -> Vec<String> {
        a.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "lr = 0.5\nepochs = 3\n").unwrap();
        let d: Demo = resolve(Some(&path), &args(&["--epochs", "7", "--name=bare", "--list", "[\"x\"]"])).unwrap();
        assert_eq!(d, Demo { lr: 0.5, epochs: 7, name: "bare".into(), list: vec!["x".into()] });
    }

    #[test]
    fn unknown_or_mistyped_keys_name_the_field() {
        let err = resolve::<Demo>(None, &args(&["--bogus", "1"])).unwrap_err();
        match err.downcast_ref::<Error>() {
            Some(Error::Config { field, .. }) => assert_eq!(field, "bogus"),
            other => panic!("{other:?}"),
        }
        assert!(resolve::<Demo>(None, &args(&["--epochs", "many"])).is_err());
        assert!(resolve::<Demo>(None, &args(&["--epochs"])).is_err());
        assert!(resolve::<Demo>(None, &args(&["--max-epochs", "1"])).is_err());
    }
}
