//! The `incoforge` command line. Every subcommand resolves its flags from
//! defaults, an optional `key = value` config file and the command line (in
//! increasing precedence) and records the result in a manifest next to its
//! output.

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

pub mod commands;
pub mod flags;
pub mod manifest;

use flags::RunConfig;

pub const CONFIG_ENV: &str = "INCOFORGE_CONFIG";

/// A problem with how the tool was invoked; exit status 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError {
    pub flag: String,
    pub message: String,
}

impl UsageError {
    pub fn new(flag: &str, message: impl Into<String>) -> Self {
        Self { flag: flag.to_string(), message: message.into() }
    }

    pub fn missing(name: &str) -> Self {
        Self::new(&format!("--{name}"), format!("missing required flag --{name}"))
    }
}

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (offending flag: {})", self.message, self.flag)
    }
}

impl std::error::Error for UsageError {}

/// Parses arguments, runs the subcommand and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match try_run(args) {
        Ok(()) => 0,
        Err(e) => {
            if let Some(u) = e.downcast_ref::<UsageError>() {
                eprintln!("error: {u}");
                eprintln!("Run with --help for usage.");
                return 2;
            }
            if let Some(c) = e.downcast_ref::<clap::Error>() {
                let _ = c.print();
                return c.exit_code();
            }
            let mut detail: Vec<String> = Vec::new();
            for c in e.chain().map(|c| c.to_string()) {
                // wrapped errors often repeat their source in their own message
                if !detail.last().is_some_and(|d| d.ends_with(&c)) {
                    detail.push(c);
                }
            }
            eprintln!("{}", serde_json::json!({ "error": "runtime", "detail": detail.join(": ") }));
            1
        }
    }
}

fn try_run<I, T>(args: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = flags::command().try_get_matches_from(args)?;
    let (name, sub_m) = matches.subcommand().expect("a subcommand is required");
    let config_path = sub_m
        .get_one::<String>("config")
        .map(PathBuf::from)
        .or_else(|| std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from));
    let file = match &config_path {
        Some(p) => flags::parse_config_file(p)?,
        None => Default::default(),
    };
    let sub = flags::find(name).expect("registered subcommand");
    let cfg = RunConfig::resolve(&sub, sub_m, &file)?;
    if name == "rerun" {
        let m = manifest::Manifest::read(&cfg.path("manifest")?)?;
        let replayed = RunConfig::from_values(&m.command, m.config.clone())?;
        if replayed.command == "rerun" {
            return Err(UsageError::new("--manifest", "a rerun manifest cannot be rerun").into());
        }
        return commands::dispatch(&replayed);
    }
    commands::dispatch(&cfg)
}
