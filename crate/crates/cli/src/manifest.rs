//! `run.manifest`: a `key=value` record of one command invocation, complete
//! enough to re-execute it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::config::Config;

pub const FILE: &str = "run.manifest";

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// Named inputs such as `corpus`, `data`, `teacher.0`, `model`.
    pub inputs: Vec<(String, String)>,
    /// Free-form provenance, e.g. teacher checksums. Not used by replay.
    pub notes: Vec<(String, String)>,
    pub out: PathBuf,
    pub workers: usize,
    pub split: Option<String>,
    pub config: Config,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(command: &str, config: &Config, out: &Path, workers: usize) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            inputs: Vec::new(),
            notes: Vec::new(),
            out: out.to_path_buf(),
            workers,
            split: None,
            config: config.clone(),
            started_unix: now_unix(),
            finished_unix: 0,
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &str| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("command", &self.command);
        kv("version", &self.version);
        kv("seed", &self.seed.to_string());
        kv("out", &self.out.display().to_string());
        kv("workers", &self.workers.to_string());
        if let Some(split) = &self.split {
            kv("split", split);
        }
        for (k, v) in &self.inputs {
            kv(&format!("input.{k}"), v);
        }
        for (k, v) in &self.notes {
            kv(&format!("note.{k}"), v);
        }
        for (k, v) in self.config.entries() {
            kv(&format!("config.{k}"), &v);
        }
        kv("started_unix", &self.started_unix.to_string());
        kv("finished_unix", &self.finished_unix.to_string());
        s
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut m = RunManifest {
            command: String::new(),
            version: String::new(),
            seed: 0,
            inputs: Vec::new(),
            notes: Vec::new(),
            out: PathBuf::new(),
            workers: 0,
            split: None,
            config: Config::default(),
            started_unix: 0,
            finished_unix: 0,
        };
        let mut config = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value", i + 1))?;
            let num = |v: &str| v.parse::<u64>().map_err(|e| format!("line {}: {k}: {e}", i + 1));
            match k {
                "command" => m.command = v.to_string(),
                "version" => m.version = v.to_string(),
                "seed" => m.seed = num(v)?,
                "out" => m.out = PathBuf::from(v),
                "workers" => m.workers = num(v)? as usize,
                "split" => m.split = Some(v.to_string()),
                "started_unix" => m.started_unix = num(v)?,
                "finished_unix" => m.finished_unix = num(v)?,
                _ => {
                    if let Some(name) = k.strip_prefix("input.") {
                        m.inputs.push((name.to_string(), v.to_string()));
                    } else if let Some(name) = k.strip_prefix("note.") {
                        m.notes.push((name.to_string(), v.to_string()));
                    } else if let Some(name) = k.strip_prefix("config.") {
                        config.push((name, v));
                    } else {
                        return Err(format!("line {}: unknown key {k}", i + 1));
                    }
                }
            }
        }
        if m.command.is_empty() {
            return Err("manifest has no command".into());
        }
        m.config = Config::from_entries(config).map_err(|e| format!("manifest config: {e}"))?;
        Ok(m)
    }

    pub fn write(&mut self, dir: &Path) -> std::io::Result<()> {
        self.finished_unix = now_unix();
        std::fs::write(dir.join(FILE), self.render())
    }

    pub fn read(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}
