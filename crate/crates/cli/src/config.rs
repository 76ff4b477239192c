//! `--config FILE`: a JSON object whose keys are flag names. Keys may also be
//! grouped under a subcommand name. Values only fill flags that are absent
//! from the command line.

use std::ffi::OsString;

use anyhow::{bail, Context, Result};
use serde_json::{Map, Value};

fn config_path(argv: &[OsString]) -> Option<OsString> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(p.into());
        }
    }
    None
}

fn has_flag(argv: &[OsString], flag: &str) -> bool {
    argv.iter().any(|a| {
        let s = a.to_string_lossy();
        s == flag || s.starts_with(&format!("{flag}="))
    })
}

fn push_tokens(out: &mut Vec<OsString>, argv: &[OsString], key: &str, v: &Value) -> Result<()> {
    let flag = format!("--{}", key.replace('_', "-"));
    if has_flag(argv, &flag) {
        return Ok(());
    }
    match v {
        Value::Bool(true) => out.push(flag.into()),
        Value::Bool(false) | Value::Null => {}
        Value::Number(n) => out.extend([flag.into(), n.to_string().into()]),
        Value::String(s) => out.extend([flag.into(), s.into()]),
        _ => bail!("config key `{key}`: expected a scalar value"),
    }
    Ok(())
}

/// Returns `argv` with config-file values spliced in after the subcommand.
pub fn expand(argv: Vec<OsString>, subcommands: &[String]) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {}", path.to_string_lossy()))?;
    let obj: Map<String, Value> =
        serde_json::from_str(&text).with_context(|| format!("config {} is not a JSON object", path.to_string_lossy()))?;
    let Some(pos) = argv
        .iter()
        .position(|a| subcommands.iter().any(|s| a.to_string_lossy() == *s))
    else {
        return Ok(argv);
    };
    let sub = argv[pos].to_string_lossy().into_owned();
    let mut extra = Vec::new();
    for (k, v) in &obj {
        if subcommands.contains(k) {
            if *k == sub {
                let Value::Object(inner) = v else {
                    bail!("config section `{k}` must be an object");
                };
                for (ik, iv) in inner {
                    push_tokens(&mut extra, &argv, ik, iv)?;
                }
            }
        } else {
            push_tokens(&mut extra, &argv, k, v)?;
        }
    }
    let mut out = argv[..=pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}
