//! Config files and the resolved-config log.
//!
//! A config file holds `key=value` lines whose keys are long flag names
//! (`eval-interval` or `eval_interval`). Its entries are spliced into the
//! argument list right after the subcommand, so anything given explicitly on
//! the command line comes later and wins.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use clap::{ArgMatches, Command};
use cpcx_core::model::parse_kv;

fn find_subcommand(argv: &[OsString], cmd: &Command) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let a = argv[i].to_string_lossy();
        if a == "--threads" {
            i += 2;
            continue;
        }
        if cmd.find_subcommand(a.as_ref()).is_some() {
            return Some(i);
        }
        i += 1;
    }
    None
}

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut found = None;
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            found = it.next().cloned();
        } else if let Some(v) = s.strip_prefix("--config=") {
            found = Some(v.into());
        }
    }
    found
}

/// Returns `argv` with the entries of the subcommand's `--config` file
/// inserted as flags. Unknown keys are usage errors.
pub fn inject(argv: Vec<OsString>, cmd: &Command) -> Result<Vec<OsString>, String> {
    let Some(at) = find_subcommand(&argv, cmd) else {
        return Ok(argv);
    };
    let Some(path) = config_path(&argv[at + 1..]) else {
        return Ok(argv);
    };
    let sub = cmd.find_subcommand(argv[at].to_string_lossy().as_ref()).expect("found above");
    let path = Path::new(&path);
    let text = fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let kv = parse_kv(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut extra: Vec<OsString> = Vec::new();
    for (key, value) in kv {
        let long = key.replace('_', "-");
        let arg = sub
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(long.as_str()) && long != "config" && long != "help")
            .ok_or_else(|| format!("unknown config key `{key}` in {}", path.display()))?;
        if arg.get_action().takes_values() {
            extra.push(format!("--{long}").into());
            extra.push(value.into());
        } else {
            match value.as_str() {
                "true" => extra.push(format!("--{long}").into()),
                "false" => {}
                other => return Err(format!("config key `{key}` expects true or false, got `{other}`")),
            }
        }
    }
    let mut out = argv[..=at].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[at + 1..]);
    Ok(out)
}

/// Every flag of the invoked subcommand with its final value, as
/// `key=value` lines that can be fed back through `--config`.
pub fn resolved(cmd: &Command, matches: &ArgMatches) -> String {
    let mut s = String::new();
    let Some((name, sub_matches)) = matches.subcommand() else {
        return s;
    };
    let sub = cmd.find_subcommand(name).expect("parsed subcommand exists");
    let _ = writeln!(s, "# cpcx {name}");
    if let Ok(Some(v)) = matches.try_get_raw("threads") {
        let _ = writeln!(s, "threads={}", join(v));
    }
    if let Ok(Some(v)) = sub_matches.try_get_raw("config") {
        let _ = writeln!(s, "# config file: {}", join(v));
    }
    for arg in sub.get_arguments() {
        let id = arg.get_id().as_str();
        let Some(long) = arg.get_long() else { continue };
        if matches!(id, "help" | "version" | "config" | "threads") {
            continue;
        }
        if let Ok(Some(v)) = sub_matches.try_get_raw(id) {
            let _ = writeln!(s, "{long}={}", join(v));
        }
    }
    s
}

fn join<'a>(v: impl Iterator<Item = &'a std::ffi::OsStr>) -> String {
    v.map(|x| x.to_string_lossy().into_owned()).collect::<Vec<_>>().join(",")
}
