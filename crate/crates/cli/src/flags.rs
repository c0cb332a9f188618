use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Value,
    Bool,
    /// One or more whitespace-separated values.
    List,
}

#[derive(Debug, Clone, Copy)]
pub struct Flag {
    pub name: &'static str,
    pub default: Option<&'static str>,
    pub help: &'static str,
    pub kind: Kind,
    /// Kept out of manifests and run files.
    pub secret: bool,
}

const fn v(name: &'static str, default: Option<&'static str>, help: &'static str) -> Flag {
    Flag { name, default, help, kind: Kind::Value, secret: false }
}

const fn b(name: &'static str, help: &'static str) -> Flag {
    Flag { name, default: Some("false"), help, kind: Kind::Bool, secret: false }
}

pub struct Sub {
    pub name: &'static str,
    pub about: &'static str,
    pub flags: Vec<Flag>,
}

fn provider_flags() -> Vec<Flag> {
    vec![
        v("provider", Some("mean-of-tokens"), "Sentence embedding provider: hash-projection, mean-of-tokens or precomputed"),
        v("embed-dim", Some("64"), "Sentence embedding dimension"),
        v("embed-seed", Some("0"), "Seed of the hashed embedding tables"),
        v("embed-table", None, "Precomputed embedding table (provider=precomputed)"),
        v("token-vectors", None, "Token vector table for mean-of-tokens and similarity"),
    ]
}

pub fn subcommands() -> Vec<Sub> {
    let mut train = vec![
        v("train", None, "Training instances (JSONL)"),
        v("dev", None, "Dev instances for per-epoch AUC"),
        v("output", None, "Checkpoint path to write"),
        v("input-mode", Some("sentence"), "Model input: sentence or token"),
        v("layers", Some("2"), "Encoder layers"),
        v("heads", Some("4"), "Attention heads"),
        v("d-model", Some("64"), "Model width"),
        v("d-ff", Some("256"), "Feed-forward width"),
        v("dropout", Some("0.1"), "Dropout rate"),
        v("max-positions", Some("0"), "Position table size (0 = 64 sentences or 512 tokens)"),
        v("epochs", Some("10"), "Training epochs"),
        v("batch-size", Some("16"), "Instances per batch"),
        v("lr", Some("0.001"), "Learning rate"),
        v("sm-weight", Some("1"), "Weight of the semantic-matching loss"),
        v("sm-sweep", None, "Comma-separated matching weights; trains one model per value"),
        v("optimizer", Some("adam"), "adam or sgd"),
        v("momentum", Some("0.9"), "SGD momentum"),
        v("weight-decay", Some("0"), "Decoupled weight decay"),
        v("grad-clip", Some("1"), "Global gradient-norm clip (0 disables)"),
        v("precision", Some("f32"), "Training precision: f32 or f64"),
        v("seed", Some("0"), "Global seed"),
        b("parallel", "Compute batch gradients on all threads (same result as serial)"),
        v("init-from", None, "Checkpoint to fine-tune from"),
        v("target-dev-auc", None, "Stop once dev AUC reaches this value"),
        v("vocab-min-count", Some("1"), "Minimum token count for the token-mode vocabulary"),
        v("vocab-size", Some("20000"), "Maximum token-mode vocabulary size"),
    ];
    train.extend(provider_flags());
    let mut export = vec![
        v("kind", Some("testset"), "What to export: testset, baseline or embeddings"),
        v("data-dir", None, "Annotation journal directory (testset, baseline)"),
        v("corpus", None, "Corpus whose sentences are embedded (embeddings)"),
        v("output", None, "Output path"),
        v("baseline-judges", Some("3"), "Baseline judgments required per kept candidate"),
    ];
    export.extend(provider_flags());
    vec![
        Sub {
            name: "ingest",
            about: "Segment raw prose into a narrative corpus (JSONL)",
            flags: vec![
                v("input", None, "Text file, or a directory of .txt files (one narrative each)"),
                v("output", None, "Corpus JSONL to write"),
                v("split", Some("paragraph"), "Narrative boundaries in a file: paragraph (blank lines) or line"),
                v("id-prefix", Some("n"), "Prefix of generated narrative ids"),
                v("min-sentences", Some("1"), "Drop narratives with fewer sentences"),
            ],
        },
        Sub {
            name: "index",
            about: "Build the BM25 sentence index cache for a corpus",
            flags: vec![
                v("corpus", None, "Corpus JSONL"),
                v("output", None, "Index cache to write"),
                b("stopwords", "Drop stopwords from index and queries"),
            ],
        },
        Sub {
            name: "forge",
            about: "Forge MSD or DSD instances from a corpus",
            flags: vec![
                v("corpus", None, "Corpus JSONL"),
                v("output", None, "Instances JSONL to write"),
                v("mode", Some("msd"), "msd (missing sentence) or dsd (discordant sentence)"),
                v("segment-len", Some("5"), "Sentences per segment"),
                v("corrupt-count", Some("1"), "Removed or replaced sentences per segment"),
                v("seed", Some("0"), "Global seed"),
                v("tau", Some("0.7"), "Confounders must have similarity below this"),
                v("top-k", Some("100"), "BM25 candidates searched per confounder"),
                v("bm25-k1", Some("1.2"), "BM25 k1"),
                v("bm25-b", Some("0.75"), "BM25 b"),
                b("stopwords", "Drop stopwords in the BM25 index"),
                v("index", None, "Index cache; built and written here when missing or stale"),
                v("embed-dim", Some("64"), "Token vector dimension for the similarity"),
                v("embed-seed", Some("0"), "Seed of the hashed token vectors"),
                v("token-vectors", None, "Token vector table for the similarity"),
                b("allow-boundary", "Allow removing the first or last sentence"),
                b("allow-adjacent", "Allow removing adjacent sentences"),
                b("allow-self-narrative", "Allow confounders from the source narrative"),
                b("constrain-replacements", "Apply the removal constraints to replacements"),
                v("pretrain-window", Some("0"), "Cut documents into windows of this many sentences (0 = one segment per narrative)"),
                v("pretrain-rate", Some("0.25"), "Corruption rate per window"),
                v("threads", Some("1"), "Worker threads (output order is unaffected)"),
            ],
        },
        Sub { name: "train", about: "Train a detector", flags: train },
        Sub {
            name: "predict",
            about: "Score every position of every instance",
            flags: vec![
                v("checkpoint", None, "Trained checkpoint"),
                v("input", None, "Instances JSONL"),
                v("output", None, "Predictions JSONL to write"),
            ],
        },
        Sub {
            name: "evaluate",
            about: "Classification and AUC for predictions, or generation metrics",
            flags: vec![
                v("preds", None, "Predictions JSONL"),
                v("generations", None, "Generations JSONL"),
                v("threshold", Some("0.5"), "Decision threshold"),
                b("by-position", "Also report AUC per position"),
                v("output", None, "Write the report here as well as to stdout"),
            ],
        },
        Sub {
            name: "generate",
            about: "Recover hidden sentences by retrieval decoding",
            flags: vec![
                v("checkpoint", None, "Trained checkpoint"),
                v("input", None, "Instances JSONL"),
                v("output", None, "Generations JSONL to write"),
                v("pool", None, "Extra corpus whose sentences join the candidate pool"),
                v("pool-size", Some("0"), "Cap on the pool (0 = no cap); hidden sentences are always kept"),
                v("seed", Some("0"), "Seed for pool subsampling"),
            ],
        },
        Sub {
            name: "bench",
            about: "Compare token-mode and sentence-mode forward cost",
            flags: vec![
                Flag { name: "grid", default: Some("N=2,4,8,16 L=10,20,40"), help: "Grid axes", kind: Kind::List, secret: false },
                v("layers", Some("2"), "Encoder layers"),
                v("heads", Some("4"), "Attention heads"),
                v("d-model", Some("64"), "Model width"),
                v("d-ff", Some("256"), "Feed-forward width"),
                v("embed-dim", Some("64"), "Sentence embedding dimension"),
                v("vocab-size", Some("1000"), "Token vocabulary size"),
                v("warmup", Some("1"), "Untimed forward passes"),
                v("repeats", Some("5"), "Timed forward passes (median reported)"),
                v("seed", Some("0"), "Global seed"),
                v("output", None, "Also write the table as CSV"),
            ],
        },
        Sub {
            name: "serve",
            about: "Run the annotation service",
            flags: vec![
                v("data-dir", None, "Journal and snapshot directory"),
                v("addr", Some("127.0.0.1:8080"), "Listen address (port 0 picks a free port)"),
                v("static", None, "Directory of UI assets served next to /api"),
                Flag { name: "admin-token", default: None, help: "Admin bearer token", kind: Kind::Value, secret: true },
                v("instances", None, "Instances JSONL to enqueue at startup"),
                v("selection", Some("all"), "Positions that become candidates: all or corrupted"),
                v("probes", None, "Instances JSONL used as screening probes"),
                v("probe-selection", Some("all"), "Positions of probe instances: all or corrupted"),
                v("n-judges", Some("4"), "Verification judges per candidate"),
                v("required-agree", Some("3"), "Agreeing judges needed to keep a candidate"),
                v("baseline-judges", Some("3"), "Baseline judges per kept candidate"),
                v("screening-threshold", Some("0.8"), "Fraction of probes a worker must get right"),
                v("snapshot-every", Some("100"), "Journal events between snapshots (0 disables)"),
            ],
        },
        Sub { name: "export", about: "Export the verified test set, human baseline or embedding table", flags: export },
        Sub {
            name: "rerun",
            about: "Re-run a stage from its manifest",
            flags: vec![v("manifest", None, "Manifest written by an earlier run")],
        },
    ]
}

pub fn find(name: &str) -> Option<Sub> {
    subcommands().into_iter().find(|s| s.name == name)
}

pub fn command() -> Command {
    let mut cmd = Command::new("incoforge")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Forge, train and evaluate narrative coherence benchmarks")
        .after_help(
            "Flags may also be set as `key = value` lines in the file given by --config or the \
             INCOFORGE_CONFIG environment variable. Command-line flags take precedence.",
        )
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("PATH")
                .help("Config file of key = value lines"),
        );
    for sub in subcommands() {
        let mut sc = Command::new(sub.name).about(sub.about);
        for f in &sub.flags {
            let mut arg = Arg::new(f.name).long(f.name).help(f.help);
            arg = match f.kind {
                Kind::Value => arg.value_name("VALUE").action(ArgAction::Set),
                Kind::Bool => arg
                    .value_name("BOOL")
                    .num_args(0..=1)
                    .require_equals(true)
                    .default_missing_value("true")
                    .value_parser(clap::builder::BoolishValueParser::new())
                    .action(ArgAction::Set),
                Kind::List => arg.value_name("VALUE").num_args(1..).action(ArgAction::Set),
            };
            if let Some(d) = f.default {
                arg = arg.default_value(d);
                if f.kind == Kind::List {
                    arg = arg.hide_default_value(true).help(format!("{} [default: {}]", f.help, d));
                }
            }
            sc = sc.arg(arg);
        }
        cmd = cmd.subcommand(sc);
    }
    cmd
}

/// Fully resolved flag values for one subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: String,
    pub values: BTreeMap<String, String>,
    secret: Vec<String>,
}

fn normalize_key(k: &str) -> String {
    k.trim().replace('_', "-")
}

/// Parses `key = value` lines; `#` starts a comment line.
pub fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>, UsageError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError::new("--config", format!("cannot read {}: {e}", path.display())))?;
    parse_config_text(&text).map_err(|(line, msg)| UsageError::new("--config", format!("{}:{line}: {msg}", path.display())))
}

pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>, (usize, String)> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, val) = line.split_once('=').ok_or((i + 1, format!("expected key = value, got {line:?}")))?;
        let key = normalize_key(k);
        if key.is_empty() {
            return Err((i + 1, "empty key".into()));
        }
        out.insert(key, val.trim().to_string());
    }
    Ok(out)
}

impl RunConfig {
    pub fn resolve(sub: &Sub, m: &ArgMatches, file: &BTreeMap<String, String>) -> Result<Self, UsageError> {
        let known: std::collections::HashSet<&str> =
            subcommands().iter().flat_map(|s| s.flags.iter().map(|f| f.name)).collect();
        if let Some(k) = file.keys().find(|k| k.as_str() != "command" && !known.contains(k.as_str())) {
            return Err(UsageError::new(&format!("--{k}"), format!("unknown config key {k:?}")));
        }
        let mut values = BTreeMap::new();
        for f in &sub.flags {
            let from_cli = m.value_source(f.name) == Some(ValueSource::CommandLine);
            let value = if from_cli {
                match f.kind {
                    Kind::Bool => m.get_one::<bool>(f.name).map(|b| b.to_string()),
                    _ => m
                        .get_raw(f.name)
                        .map(|vals| vals.map(|s| s.to_string_lossy().into_owned()).collect::<Vec<_>>().join(" ")),
                }
            } else if let Some(v) = file.get(f.name) {
                if f.kind == Kind::Bool {
                    Some(parse_bool(v).ok_or_else(|| UsageError::new(&format!("--{}", f.name), format!("not a boolean: {v:?}")))?.to_string())
                } else {
                    Some(v.clone())
                }
            } else {
                f.default.map(str::to_string)
            };
            if let Some(v) = value {
                values.insert(f.name.to_string(), v);
            }
        }
        let secret = sub.flags.iter().filter(|f| f.secret).map(|f| f.name.to_string()).collect();
        Ok(Self { command: sub.name.to_string(), values, secret })
    }

    pub fn from_values(command: &str, values: BTreeMap<String, String>) -> Result<Self, UsageError> {
        let sub = find(command).ok_or_else(|| UsageError::new("command", format!("unknown command {command:?}")))?;
        let secret = sub.flags.iter().filter(|f| f.secret).map(|f| f.name.to_string()).collect();
        Ok(Self { command: command.into(), values, secret })
    }

    pub fn raw(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(String::as_str).filter(|s| !s.is_empty())
    }

    pub fn get<T: FromStr>(&self, name: &str) -> Result<T, UsageError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(name).ok_or_else(|| UsageError::missing(name))?;
        raw.parse().map_err(|e| UsageError::new(&format!("--{name}"), format!("invalid value {raw:?}: {e}")))
    }

    pub fn opt<T: FromStr>(&self, name: &str) -> Result<Option<T>, UsageError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(name) {
            None => Ok(None),
            Some(_) => self.get(name).map(Some),
        }
    }

    pub fn path(&self, name: &str) -> Result<PathBuf, UsageError> {
        self.raw(name).map(PathBuf::from).ok_or_else(|| UsageError::missing(name))
    }

    pub fn opt_path(&self, name: &str) -> Option<PathBuf> {
        self.raw(name).map(PathBuf::from)
    }

    pub fn flag(&self, name: &str) -> Result<bool, UsageError> {
        match self.raw(name) {
            None => Ok(false),
            Some(v) => parse_bool(v).ok_or_else(|| UsageError::new(&format!("--{name}"), format!("not a boolean: {v:?}"))),
        }
    }

    /// Values that may be written to disk.
    pub fn public(&self) -> BTreeMap<String, String> {
        self.values.iter().filter(|(k, _)| !self.secret.contains(k)).map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// `key=value` lines sorted by key, starting with the command.
    pub fn canonical(&self) -> String {
        self.canonical_without(&[])
    }

    /// `canonical` with the named keys left out.
    pub fn canonical_without(&self, skip: &[&str]) -> String {
        let mut s = format!("command={}\n", self.command);
        for (k, v) in self.public().into_iter().filter(|(k, _)| !skip.contains(&k.as_str())) {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Some(true),
        "false" | "no" | "off" | "0" => Some(false),
        _ => None,
    }
}
