//! `run.json`: the resolved command line of a run, and `--config` merging.

use std::path::Path;

use clap::{CommandFactory, FromArgMatches};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{Cli, Command};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFile {
    pub command: String,
    pub global: Value,
    pub args: Value,
}

pub enum ParseError {
    Clap(clap::Error),
    Config(String),
}

pub fn command_json(cmd: &Command) -> (String, Value) {
    let (name, v) = match cmd {
        Command::SynthData(a) => ("synth-data", serde_json::to_value(a)),
        Command::Split(a) => ("split", serde_json::to_value(a)),
        Command::Train(a) => ("train", serde_json::to_value(a)),
        Command::Calibrate(a) => ("calibrate", serde_json::to_value(a)),
        Command::BuildEngine(a) => ("build-engine", serde_json::to_value(a)),
        Command::Evaluate(a) => ("evaluate", serde_json::to_value(a)),
        Command::Bench(a) => ("bench", serde_json::to_value(a)),
        Command::Report(a) => ("report", serde_json::to_value(a)),
        Command::Ablate(a) => ("ablate", serde_json::to_value(a)),
    };
    (name.to_string(), v.expect("arguments serialize"))
}

pub fn run_file(cli: &Cli) -> RunFile {
    let (command, args) = command_json(&cli.command);
    RunFile {
        command,
        global: serde_json::to_value(&cli.global).expect("globals serialize"),
        args,
    }
}

const COMMANDS: [&str; 9] = [
    "synth-data",
    "split",
    "train",
    "calibrate",
    "build-engine",
    "evaluate",
    "bench",
    "report",
    "ablate",
];

fn config_path(argv: &[String]) -> Option<String> {
    argv.iter().enumerate().find_map(|(i, a)| {
        if a == "--config" {
            argv.get(i + 1).cloned()
        } else {
            a.strip_prefix("--config=").map(str::to_string)
        }
    })
}

fn given(argv: &[String], flag: &str) -> bool {
    argv.iter().any(|a| a == flag || a.starts_with(&format!("{flag}=")))
}

/// Append `--key value` for every recorded value whose flag is absent from `argv`.
fn append_missing(argv: &mut Vec<String>, values: &Value) {
    let Value::Object(map) = values else { return };
    let mut extra = Vec::new();
    for (k, v) in map {
        let flag = format!("--{}", k.replace('_', "-"));
        if given(argv, &flag) {
            continue;
        }
        let text = match v {
            Value::Null => continue,
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        extra.push(format!("{flag}={text}"));
    }
    argv.extend(extra);
}

fn load(path: &Path) -> Result<RunFile, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

/// Parse `argv`; with `--config run.json` the recorded values fill in every
/// flag not given explicitly, and the recorded command is used if none is named.
pub fn parse(argv: &[String]) -> Result<Cli, ParseError> {
    let mut argv = argv.to_vec();
    if let Some(path) = config_path(&argv) {
        let file = load(Path::new(&path)).map_err(ParseError::Config)?;
        match argv.iter().skip(1).find(|a| COMMANDS.contains(&a.as_str())) {
            Some(named) if *named != file.command => {
                return Err(ParseError::Config(format!(
                    "{path} records a '{}' run, not '{named}'",
                    file.command
                )))
            }
            Some(_) => {}
            None => argv.insert(1.min(argv.len()), file.command.clone()),
        }
        append_missing(&mut argv, &file.global);
        append_missing(&mut argv, &file.args);
    }
    let matches = Cli::command().try_get_matches_from(&argv).map_err(ParseError::Clap)?;
    Cli::from_arg_matches(&matches).map_err(ParseError::Clap)
}
