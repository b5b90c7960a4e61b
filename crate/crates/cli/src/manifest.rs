//! Per-run manifest and the exit-code carrying error type.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

pub mod exit {
    pub const FAILURE: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const DIVERGENCE: i32 = 3;
    pub const CHECKPOINT: i32 = 4;
    pub const EVAL_MISMATCH: i32 = 5;
    pub const EQUIVALENCE: i32 = 6;
}

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(exit::USAGE, message)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<motionpose::Error> for Failure {
    fn from(e: motionpose::Error) -> Self {
        let code = match e {
            motionpose::Error::Divergence { .. } => exit::DIVERGENCE,
            _ => exit::FAILURE,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::new(exit::FAILURE, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::new(exit::FAILURE, e.to_string())
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

/// Record of one command invocation. `argv` is enough to rerun it; the
/// remaining fields describe what happened.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    /// Arguments after the program name.
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// Output files relative to the output directory.
    pub artifacts: Vec<String>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn read(path: &Path) -> CmdResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
    }
}

/// Collects artifacts and timings while a command runs, then writes the
/// manifest into the output directory.
pub struct Run {
    out: PathBuf,
    manifest: RunManifest,
    phase: Option<(String, Instant)>,
}

impl Run {
    pub fn start(
        out: &Path,
        command: &str,
        argv: &[String],
        config: &impl Serialize,
        seed: Option<u64>,
    ) -> CmdResult<Self> {
        std::fs::create_dir_all(out)
            .map_err(|e| Failure::new(exit::FAILURE, format!("{}: {e}", out.display())))?;
        Ok(Self {
            out: out.to_path_buf(),
            manifest: RunManifest {
                version: env!("CARGO_PKG_VERSION").to_string(),
                command: command.to_string(),
                argv: argv.to_vec(),
                config: serde_json::to_value(config)?,
                seed,
                artifacts: Vec::new(),
                timings: BTreeMap::new(),
            },
            phase: None,
        })
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    pub fn artifact(&mut self, rel: impl Into<String>) {
        self.manifest.artifacts.push(rel.into());
    }

    /// Ends the current phase, if any, and starts timing `name`.
    pub fn phase(&mut self, name: &str) {
        self.end_phase();
        self.phase = Some((name.to_string(), Instant::now()));
    }

    fn end_phase(&mut self) {
        if let Some((name, t)) = self.phase.take() {
            self.manifest
                .timings
                .insert(name, t.elapsed().as_secs_f64());
        }
    }

    pub fn finish(mut self) -> CmdResult<RunManifest> {
        self.end_phase();
        let p = self.out.join(MANIFEST_FILE);
        std::fs::write(&p, serde_json::to_string_pretty(&self.manifest)?)
            .map_err(|e| Failure::new(exit::FAILURE, format!("{}: {e}", p.display())))?;
        Ok(self.manifest)
    }
}

/// `argv` with the value of `--out` replaced by `out`.
pub fn with_out(argv: &[String], out: &Path) -> CmdResult<Vec<String>> {
    let out = out.display().to_string();
    let mut args = argv.to_vec();
    for i in 0..args.len() {
        if args[i] == "--out" && i + 1 < args.len() {
            args[i + 1] = out;
            return Ok(args);
        }
        if args[i].starts_with("--out=") {
            args[i] = format!("--out={out}");
            return Ok(args);
        }
    }
    Err(Failure::usage("manifest command has no --out argument"))
}
