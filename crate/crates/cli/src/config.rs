//! `key = value` config files, spliced into argv ahead of the user's flags.
//!
//! Keys are the long flag names of the chosen subcommand (`omega_gps` and
//! `omega-gps` both work). Config values land right after the subcommand
//! name, so a flag repeated on the command line overrides them.

use std::ffi::OsString;
use std::path::Path;

use clap::Command;

use crate::error::{CliError, CliResult};

/// One `--flag [value]` group per line of `text`.
pub fn config_args(text: &str, path: &Path, sub: &Command) -> CliResult<Vec<OsString>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| CliError::Config {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err("expected `key = value`".into()))?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        if key == "config" {
            return Err(err("config files cannot include other config files".into()));
        }
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| err(format!("unknown key `{key}` for `{}`", sub.get_name())))?;
        if arg.get_action().takes_values() {
            out.push(format!("--{key}").into());
            out.push(value.into());
        } else {
            match value {
                "true" => out.push(format!("--{key}").into()),
                "false" => {}
                _ => return Err(err(format!("`{key}` is a switch; use true or false"))),
            }
        }
    }
    Ok(out)
}

/// `argv` with `extra` inserted after the first occurrence of `sub_name`.
pub fn splice(argv: &[OsString], sub_name: &str, extra: Vec<OsString>) -> CliResult<Vec<OsString>> {
    let at = argv
        .iter()
        .skip(1)
        .position(|a| a == sub_name)
        .ok_or_else(|| CliError::Usage(format!("subcommand `{sub_name}` not found in arguments")))?
        + 2;
    let mut out = argv[..at].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[at..]);
    Ok(out)
}
