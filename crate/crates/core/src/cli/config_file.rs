//! `--config` support: TOML keys become long flags of the chosen subcommand
//! unless the same flag already appears on the command line.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{ArgAction, CommandFactory};

use super::args::Cli;

#[derive(Debug)]
pub(crate) enum MergeError {
    /// Unreadable file.
    Io(PathBuf, std::io::Error),
    /// Bad TOML or a key with no matching flag.
    Usage(String),
}

fn flag_value(argv: &[String], flag: &str) -> Option<String> {
    let eq = format!("{flag}=");
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == flag {
            return it.next().cloned();
        }
        if let Some(v) = a.strip_prefix(&eq) {
            return Some(v.to_string());
        }
    }
    None
}

fn has_flag(argv: &[String], long: &str) -> bool {
    let flag = format!("--{long}");
    let eq = format!("{flag}=");
    argv.iter().any(|a| *a == flag || a.starts_with(&eq))
}

fn render(key: &str, value: &toml::Value) -> Result<String, MergeError> {
    match value {
        toml::Value::String(s) => Ok(s.clone()),
        toml::Value::Integer(i) => Ok(i.to_string()),
        toml::Value::Float(f) => Ok(f.to_string()),
        toml::Value::Boolean(b) => Ok(b.to_string()),
        toml::Value::Array(items) => items
            .iter()
            .map(|v| render(key, v))
            .collect::<Result<Vec<_>, _>>()
            .map(|v| v.join(",")),
        _ => Err(MergeError::Usage(format!(
            "config key {key:?} has an unsupported value"
        ))),
    }
}

pub(crate) fn merge(argv: Vec<OsString>) -> Result<Vec<OsString>, MergeError> {
    let strings: Vec<String> = argv
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    let Some(path) = flag_value(&strings, "--config") else {
        return Ok(argv);
    };
    let root = Cli::command();
    let mut sub_name = None;
    let mut skip = false;
    for a in strings.iter().skip(1) {
        if skip {
            skip = false;
            continue;
        }
        if a == "--config" || a == "--threads" {
            skip = true;
            continue;
        }
        if root.find_subcommand(a).is_some() {
            sub_name = Some(a.clone());
            break;
        }
    }
    let Some(sub_name) = sub_name else {
        return Ok(argv);
    };
    let sub = root.find_subcommand(&sub_name).expect("found above");

    let path = PathBuf::from(path);
    let text = fs::read_to_string(&path).map_err(|e| MergeError::Io(path.clone(), e))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| MergeError::Usage(format!("{}: {e}", path.display())))?;

    let known = |long: &str| {
        root.get_arguments()
            .chain(root.get_subcommands().flat_map(|s| s.get_arguments()))
            .any(|a| a.get_long() == Some(long))
    };
    let applies = |long: &str| {
        sub.get_arguments()
            .chain(root.get_arguments())
            .any(|a| a.get_long() == Some(long))
    };
    // top-level keys are shared by every subcommand; a [subcommand] section
    // overrides them
    let mut entries: Vec<(String, toml::Value)> = Vec::new();
    for (k, v) in &table {
        match v {
            toml::Value::Table(_) => {
                if root.find_subcommand(k).is_none() {
                    return Err(MergeError::Usage(format!("unknown config section [{k}]")));
                }
            }
            _ => {
                let long = k.replace('_', "-");
                if !known(&long) {
                    return Err(MergeError::Usage(format!("unknown config key {k:?}")));
                }
                if applies(&long) {
                    entries.push((k.clone(), v.clone()));
                }
            }
        }
    }
    if let Some(toml::Value::Table(section)) = table.get(&sub_name) {
        for (k, v) in section {
            entries.retain(|(key, _)| key != k);
            entries.push((k.clone(), v.clone()));
        }
    }

    let mut out = argv;
    for (key, value) in entries {
        let long = key.replace('_', "-");
        if long == "config" {
            return Err(MergeError::Usage(
                "a config file cannot name another config".into(),
            ));
        }
        let arg = sub
            .get_arguments()
            .chain(root.get_arguments())
            .find(|a| a.get_long() == Some(long.as_str()))
            .ok_or_else(|| {
                MergeError::Usage(format!("config key {key:?} is not a flag of {sub_name}"))
            })?;
        if has_flag(&strings, &long) {
            continue;
        }
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value {
                toml::Value::Boolean(true) => out.push(format!("--{long}").into()),
                toml::Value::Boolean(false) => {}
                _ => {
                    return Err(MergeError::Usage(format!(
                        "config key {key:?} must be a boolean"
                    )))
                }
            }
            continue;
        }
        out.push(format!("--{long}={}", render(&key, &value)?).into());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn no_config_is_untouched() {
        let argv = os(&["bin", "eval", "--test", "t"]);
        assert_eq!(merge(argv.clone()).unwrap(), argv);
    }

    #[test]
    fn file_fills_missing_flags_only() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        fs::write(
            &cfg,
            "k = 8\nlr = 0.001\nm = 5\nembeddings = \"e.vseb\"\n[train-sae]\nepochs = 3\n[eval]\nhead = \"x\"\n",
        )
        .unwrap();
        let argv = os(&[
            "bin",
            "--config",
            cfg.to_str().unwrap(),
            "train-sae",
            "--k",
            "16",
        ]);
        let merged: Vec<String> = merge(argv)
            .unwrap()
            .into_iter()
            .map(|s| s.into_string().unwrap())
            .collect();
        assert!(merged.contains(&"--lr=0.001".to_string()));
        assert!(merged.contains(&"--embeddings=e.vseb".to_string()));
        assert!(merged.contains(&"--epochs=3".to_string()));
        assert!(!merged.iter().any(|a| a == "--k=8"));
        assert!(!merged.iter().any(|a| a.starts_with("--head")));
    }

    #[test]
    fn unknown_key_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        fs::write(&cfg, "bogus = 1\n").unwrap();
        let argv = os(&["bin", "--config", cfg.to_str().unwrap(), "eval"]);
        assert!(matches!(merge(argv), Err(MergeError::Usage(_))));
        fs::write(&cfg, "[eval]\nepochs = 1\n").unwrap();
        let argv = os(&["bin", "--config", cfg.to_str().unwrap(), "eval"]);
        assert!(matches!(merge(argv), Err(MergeError::Usage(_))));
    }
}
