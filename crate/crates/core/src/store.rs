//! On-disk formats.
//!
//! * `<name>.cdre`: little-endian header (`"CDRE"`, version `u32`, dim `u32`,
//!   count `u64`) followed by `count * dim` row-major binary32 values.
//! * `<name>.meta.jsonl`: one metadata object per payload row.
//! * `verdicts.jsonl`: one VQA verdict per line.
//! * `sweep.json`: array of knob configurations.
//! * `prompts.jsonl`: optional prompt embeddings, one per line.
//!
//! Readers never repair input; every invariant violation is an error.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    validate_table, ConfigId, EmbeddingRowMeta, EmbeddingTable, GroupId, KnobConfig, ModelError,
    PromptId, RecordId, Role, Verdict, VerdictLog,
};

pub const MAGIC: [u8; 4] = *b"CDRE";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("BadMagic: expected \"CDRE\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("VersionUnsupported: {0}")]
    VersionUnsupported(u32),
    #[error("ZeroDim: header declares dim 0")]
    ZeroDim,
    #[error("LengthMismatch: expected {expected} bytes, found {found}")]
    LengthMismatch { expected: u64, found: u64 },
    #[error("SidecarRowGap: row {row} is missing, repeated or out of range")]
    SidecarRowGap { row: u64 },
    #[error("MalformedJson: {path}:{line}: {message}")]
    MalformedJson {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("DuplicateVerdict: {0}")]
    DuplicateVerdict(String),
    #[error("DuplicateConfigId: `{0}`")]
    DuplicateConfigId(String),
    #[error("DuplicatePrompt: `{0}` appears twice in prompt embeddings")]
    DuplicatePrompt(String),
    #[error("{0}")]
    InvalidConfig(ModelError),
    #[error("invalid table: {0}")]
    InvalidTable(String),
}

impl StoreError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        StoreError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// True for faults of the environment rather than of the input data.
    pub fn is_io(&self) -> bool {
        matches!(self, StoreError::Io { .. })
    }
}

/// Payload and sidecar locations of one table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TablePaths {
    pub payload: PathBuf,
    pub sidecar: PathBuf,
}

impl TablePaths {
    /// `<prefix>.cdre` and `<prefix>.meta.jsonl`. A trailing `.cdre` on the
    /// prefix is ignored.
    pub fn from_prefix(prefix: impl AsRef<Path>) -> Self {
        let prefix = prefix.as_ref();
        let base = match prefix.extension() {
            Some(ext) if ext == "cdre" => prefix.with_extension(""),
            _ => prefix.to_path_buf(),
        };
        let mut payload = base.clone().into_os_string();
        payload.push(".cdre");
        let mut sidecar = base.into_os_string();
        sidecar.push(".meta.jsonl");
        Self {
            payload: payload.into(),
            sidecar: sidecar.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CdreHeader {
    pub version: u32,
    pub dim: u32,
    pub count: u64,
}

impl CdreHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&MAGIC);
        out[4..8].copy_from_slice(&self.version.to_le_bytes());
        out[8..12].copy_from_slice(&self.dim.to_le_bytes());
        out[12..20].copy_from_slice(&self.count.to_le_bytes());
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, StoreError> {
        if bytes.len() < 4 {
            return Err(StoreError::LengthMismatch {
                expected: HEADER_LEN as u64,
                found: bytes.len() as u64,
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(StoreError::BadMagic(magic));
        }
        if bytes.len() < HEADER_LEN {
            return Err(StoreError::LengthMismatch {
                expected: HEADER_LEN as u64,
                found: bytes.len() as u64,
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(StoreError::VersionUnsupported(version));
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if dim == 0 {
            return Err(StoreError::ZeroDim);
        }
        let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        Ok(Self {
            version,
            dim,
            count,
        })
    }

    pub fn payload_len(&self) -> Option<u64> {
        self.count
            .checked_mul(self.dim as u64)?
            .checked_mul(4)?
            .checked_add(HEADER_LEN as u64)
    }
}

/// One sidecar line. Field order here is the canonical key order on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SidecarRecord {
    pub row: u64,
    pub record_id: RecordId,
    pub prompt_id: PromptId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_id: Option<GroupId>,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_id: Option<ConfigId>,
}

/// Serializes the binary payload of a table.
pub fn encode_payload(table: &EmbeddingTable) -> Vec<u8> {
    let header = CdreHeader {
        version: VERSION,
        dim: table.dim as u32,
        count: table.rows.len() as u64,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + table.rows.len() * table.dim * 4);
    out.extend_from_slice(&header.to_bytes());
    for row in &table.rows {
        for v in &row.vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Serializes the JSONL sidecar of a table.
pub fn encode_sidecar(table: &EmbeddingTable) -> String {
    let mut out = String::new();
    for (i, row) in table.rows.iter().enumerate() {
        let rec = SidecarRecord {
            row: i as u64,
            record_id: row.meta.record_id.clone(),
            prompt_id: row.meta.prompt_id.clone(),
            group_id: row.meta.group_id.clone(),
            role: row.meta.role,
            config_id: row.meta.config_id.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("sidecar record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_table(table: &EmbeddingTable, paths: &TablePaths) -> Result<(), StoreError> {
    let report = validate_table(table);
    if !report.is_clean() {
        return Err(StoreError::InvalidTable(report.to_string()));
    }
    if table.dim > u32::MAX as usize {
        return Err(StoreError::InvalidTable(format!(
            "dim {} exceeds u32",
            table.dim
        )));
    }
    fs::write(&paths.payload, encode_payload(table)).map_err(|e| StoreError::io(&paths.payload, e))?;
    fs::write(&paths.sidecar, encode_sidecar(table)).map_err(|e| StoreError::io(&paths.sidecar, e))
}

/// Parses a payload and its sidecar into a table that passes
/// [`validate_table`].
pub fn decode_table(
    payload: &[u8],
    sidecar: &str,
    sidecar_path: &Path,
) -> Result<EmbeddingTable, StoreError> {
    let header = CdreHeader::parse(payload)?;
    let expected = header.payload_len().ok_or(StoreError::LengthMismatch {
        expected: u64::MAX,
        found: payload.len() as u64,
    })?;
    if expected != payload.len() as u64 {
        return Err(StoreError::LengthMismatch {
            expected,
            found: payload.len() as u64,
        });
    }

    let mut records: BTreeMap<u64, SidecarRecord> = BTreeMap::new();
    for (lineno, line) in sidecar.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SidecarRecord =
            serde_json::from_str(line).map_err(|e| StoreError::MalformedJson {
                path: sidecar_path.to_path_buf(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
        if rec.row >= header.count || records.contains_key(&rec.row) {
            return Err(StoreError::SidecarRowGap { row: rec.row });
        }
        records.insert(rec.row, rec);
    }
    if let Some(missing) = (0..header.count).find(|r| !records.contains_key(r)) {
        return Err(StoreError::SidecarRowGap { row: missing });
    }

    let dim = header.dim as usize;
    let mut table = EmbeddingTable::new(dim);
    let body = &payload[HEADER_LEN..];
    for (row, rec) in records.into_values().enumerate() {
        let start = row * dim * 4;
        let vector = body[start..start + dim * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        table.push(
            EmbeddingRowMeta {
                record_id: rec.record_id,
                prompt_id: rec.prompt_id,
                group_id: rec.group_id,
                role: rec.role,
                config_id: rec.config_id,
            },
            vector,
        );
    }
    let report = validate_table(&table);
    if !report.is_clean() {
        return Err(StoreError::InvalidTable(report.to_string()));
    }
    Ok(table)
}

pub fn read_table(paths: &TablePaths) -> Result<EmbeddingTable, StoreError> {
    let payload = fs::read(&paths.payload).map_err(|e| StoreError::io(&paths.payload, e))?;
    let sidecar =
        fs::read_to_string(&paths.sidecar).map_err(|e| StoreError::io(&paths.sidecar, e))?;
    decode_table(&payload, &sidecar, &paths.sidecar)
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<Vec<T>, StoreError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| StoreError::MalformedJson {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn to_jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(&item).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_verdicts(path: &Path, text: &str) -> Result<VerdictLog, StoreError> {
    let entries: Vec<Verdict> = parse_jsonl(path, text)?;
    VerdictLog::new(entries).map_err(|e| StoreError::DuplicateVerdict(e.to_string()))
}

pub fn read_verdicts(path: &Path) -> Result<VerdictLog, StoreError> {
    let text = fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
    parse_verdicts(path, &text)
}

pub fn write_verdicts(log: &VerdictLog, path: &Path) -> Result<(), StoreError> {
    fs::write(path, to_jsonl(log.entries())).map_err(|e| StoreError::io(path, e))
}

pub fn parse_sweep(path: &Path, text: &str) -> Result<Vec<KnobConfig>, StoreError> {
    let configs: Vec<KnobConfig> =
        serde_json::from_str(text).map_err(|e| StoreError::MalformedJson {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
    let mut seen = BTreeSet::new();
    for c in &configs {
        c.validate().map_err(StoreError::InvalidConfig)?;
        if !seen.insert(&c.config_id) {
            return Err(StoreError::DuplicateConfigId(c.config_id.to_string()));
        }
    }
    Ok(configs)
}

pub fn read_sweep(path: &Path) -> Result<Vec<KnobConfig>, StoreError> {
    let text = fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
    parse_sweep(path, &text)
}

pub fn write_sweep(configs: &[KnobConfig], path: &Path) -> Result<(), StoreError> {
    let mut text = serde_json::to_string_pretty(configs).expect("sweep serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| StoreError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptEmbeddingLine {
    prompt_id: PromptId,
    vector: Vec<f64>,
}

/// Prompt embeddings keyed by prompt, used by embedding-space consistency
/// and prompt-cosine filtering.
pub type PromptEmbeddings = BTreeMap<PromptId, Vec<f64>>;

pub fn read_prompt_embeddings(path: &Path) -> Result<PromptEmbeddings, StoreError> {
    let text = fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
    let lines: Vec<PromptEmbeddingLine> = parse_jsonl(path, &text)?;
    let mut out = BTreeMap::new();
    for l in lines {
        let id = l.prompt_id.to_string();
        if out.insert(l.prompt_id, l.vector).is_some() {
            return Err(StoreError::DuplicatePrompt(id));
        }
    }
    Ok(out)
}

pub fn write_prompt_embeddings(prompts: &PromptEmbeddings, path: &Path) -> Result<(), StoreError> {
    let text = to_jsonl(prompts.iter().map(|(p, v)| PromptEmbeddingLine {
        prompt_id: p.clone(),
        vector: v.clone(),
    }));
    fs::write(path, text).map_err(|e| StoreError::io(path, e))
}
