use std::fs;
use std::path::Path;

use ddcl::evaluation::{EvalConfig, Table};
use ddcl::model::ModelConfig;
use ddcl::Error;
use serde::{Deserialize, Serialize};

pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidInput(_) | Error::Unsupported(_) | Error::InvalidRatio { .. } => {
                Failure::validation(e.to_string())
            }
            _ => Failure::runtime(e.to_string()),
        }
    }
}

/// Attached to every artifact the tool writes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub config_hash: Option<String>,
    pub checkpoint_hash: Option<String>,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config_hash: Option<String>, checkpoint_hash: Option<String>, seed: u64) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash,
            checkpoint_hash,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub mode: String,
    pub arch: String,
    pub dim: usize,
    pub dir_dim: usize,
    pub dr: f64,
}

impl ModelSummary {
    pub fn of(model: &ModelConfig) -> Self {
        Self {
            mode: format!("{:?}", model.mode).to_lowercase(),
            arch: format!("{:?}", model.encoder.arch),
            dim: model.encoder.output_dim,
            dir_dim: model.encoder.dir_dim().unwrap_or(0),
            dr: model.encoder.dr,
        }
    }
}

/// JSON results document; `kind` names the producing command or protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultDoc {
    pub kind: String,
    pub provenance: Provenance,
    #[serde(default)]
    pub model: Option<ModelSummary>,
    #[serde(default)]
    pub eval: Option<EvalConfig>,
    #[serde(default)]
    pub table: Option<Table>,
    #[serde(default)]
    pub details: serde_json::Value,
}

pub fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Failure::from(Error::io(dir, e)))?;
    }
    fs::write(path, text).map_err(|e| Failure::from(Error::io(path, e)))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::runtime(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

/// Writes `<stem>.json` and, when the document has a table, `<stem>.csv`
/// whose leading comment lines carry the provenance.
pub fn write_result(dir: &Path, stem: &str, doc: &ResultDoc) -> Result<(), Failure> {
    write_json(&dir.join(format!("{stem}.json")), doc)?;
    if let Some(table) = &doc.table {
        let p = &doc.provenance;
        let mut csv = format!(
            "# {}\n# tool_version={} config_hash={} checkpoint_hash={} seed={}\n",
            table.title,
            p.tool_version,
            p.config_hash.as_deref().unwrap_or("-"),
            p.checkpoint_hash.as_deref().unwrap_or("-"),
            p.seed
        );
        for note in &table.notes {
            csv.push_str(&format!("# {note}\n"));
        }
        csv.push_str(&table.to_csv());
        write_text(&dir.join(format!("{stem}.csv")), &csv)?;
    }
    Ok(())
}
