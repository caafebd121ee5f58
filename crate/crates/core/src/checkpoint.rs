//! Checkpoint containers and the MRGF on-disk format.
//!
//! A checkpoint is a named-tensor collection plus an architecture manifest
//! giving every tensor a role and a depth index; layer-granular merge methods
//! depend on the depth map. Serialization is canonical: equal checkpoints
//! produce byte-identical files.
//!
//! MRGF layout, little-endian throughout:
//!
//! ```text
//! magic   "MRGF"                        4 bytes
//! version u32 = 1                       4 bytes
//! hlen    u64                           8 bytes
//! header  UTF-8 JSON                    hlen bytes
//!         {manifest, kind, source_tag, tensor_order}
//! payload raw row-major f32 data        concatenated in tensor_order, no padding
//! ```
//!
//! Readers reject unknown versions. Writes go through a temp file and rename,
//! so an interrupted run never leaves a partial file at the target path.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MRGF";
pub const VERSION: u32 = 1;

/// Fixed prefix length: magic + version + header length.
const PREFIX: u64 = 16;

// ── Manifest ───────────────────────────────────────────────────────────────

/// What a tensor is to the architecture. Model checkpoints use the first six
/// roles; dataset containers reuse the format with `Inputs`/`Labels`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Weight,
    Bias,
    HeadWeight,
    HeadBias,
    LowrankA,
    LowrankB,
    Inputs,
    Labels,
}

impl Role {
    pub fn is_lowrank(self) -> bool {
        matches!(self, Role::LowrankA | Role::LowrankB)
    }

    pub fn is_weight_like(self) -> bool {
        matches!(self, Role::Weight | Role::HeadWeight)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::Weight => "weight",
            Role::Bias => "bias",
            Role::HeadWeight => "head_weight",
            Role::HeadBias => "head_bias",
            Role::LowrankA => "lowrank_a",
            Role::LowrankB => "lowrank_b",
            Role::Inputs => "inputs",
            Role::Labels => "labels",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
    pub depth: usize,
}

/// Ordered tensor directory plus the depth count. Entry order is canonical:
/// it fixes both payload order and the flattening order of granularity groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub layer_count: usize,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn entry(&self, name: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Entries that belong to the dense model (lowrank factors excluded).
    pub fn dense_entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| !e.role.is_lowrank())
    }

    /// Structural checks for a model manifest: unique names, a bias beside
    /// every weight at the same depth, and weight depths covering 1..=L.
    pub fn validate_model(&self) -> Result<()> {
        if self.layer_count == 0 {
            return Err(Error::validation("manifest layer_count must be positive"));
        }
        self.check_unique_names()?;
        for e in &self.entries {
            if e.depth == 0 || e.depth > self.layer_count {
                return Err(Error::validation(format!(
                    "tensor '{}' has depth {} outside 1..={}",
                    e.name, e.depth, self.layer_count
                )));
            }
            let want_rank = match e.role {
                Role::Weight | Role::HeadWeight | Role::LowrankA | Role::LowrankB => 2,
                Role::Bias | Role::HeadBias => 1,
                Role::Inputs | Role::Labels => {
                    return Err(Error::validation(format!(
                        "dataset role '{}' in a model manifest (tensor '{}')",
                        e.role, e.name
                    )))
                }
            };
            if e.shape.len() != want_rank {
                return Err(Error::validation(format!(
                    "tensor '{}' with role {} must be rank-{}, got shape {:?}",
                    e.name, e.role, want_rank, e.shape
                )));
            }
        }
        for e in &self.entries {
            let bias_role = match e.role {
                Role::Weight => Role::Bias,
                Role::HeadWeight => Role::HeadBias,
                _ => continue,
            };
            let has_bias = self
                .entries
                .iter()
                .any(|b| b.role == bias_role && b.depth == e.depth);
            if !has_bias {
                return Err(Error::validation(format!(
                    "weight '{}' at depth {} has no matching bias",
                    e.name, e.depth
                )));
            }
        }
        for depth in 1..=self.layer_count {
            let covered = self
                .entries
                .iter()
                .any(|e| e.role.is_weight_like() && e.depth == depth);
            if !covered {
                return Err(Error::validation(format!(
                    "no weight at depth {depth}; depths must cover 1..={}",
                    self.layer_count
                )));
            }
        }
        Ok(())
    }

    /// Structural checks for a dataset manifest.
    pub fn validate_dataset(&self) -> Result<()> {
        self.check_unique_names()?;
        for e in &self.entries {
            match e.role {
                Role::Inputs | Role::Labels => {}
                other => {
                    return Err(Error::validation(format!(
                        "model role '{other}' in a dataset manifest (tensor '{}')",
                        e.name
                    )))
                }
            }
        }
        Ok(())
    }

    fn check_unique_names(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::validation(format!(
                    "duplicate tensor name '{}'",
                    e.name
                )));
            }
        }
        Ok(())
    }
}

// ── Checkpoint ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Base,
    Expert,
    Merged,
    Joint,
}

impl CheckpointKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckpointKind::Base => "base",
            CheckpointKind::Expert => "expert",
            CheckpointKind::Merged => "merged",
            CheckpointKind::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "base" => Some(CheckpointKind::Base),
            "expert" => Some(CheckpointKind::Expert),
            "merged" => Some(CheckpointKind::Merged),
            "joint" => Some(CheckpointKind::Joint),
            _ => None,
        }
    }
}

/// A model: manifest, tensors, provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, Tensor>,
    pub kind: CheckpointKind,
    pub source_tag: String,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::validation(format!("missing tensor '{name}'")))
    }

    /// Full invariant check: manifest structure plus tensor/manifest agreement.
    pub fn validate(&self) -> Result<()> {
        self.manifest.validate_model()?;
        if self.tensors.len() != self.manifest.entries.len() {
            return Err(Error::validation(format!(
                "checkpoint holds {} tensors but the manifest lists {}",
                self.tensors.len(),
                self.manifest.entries.len()
            )));
        }
        for e in &self.manifest.entries {
            let t = self.tensor(&e.name)?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::validation(format!(
                    "tensor '{}' has shape {:?} but the manifest says {:?}",
                    e.name,
                    t.shape(),
                    e.shape
                )));
            }
        }
        Ok(())
    }
}

/// Passes iff every expert's dense manifest matches the base's exactly
/// (names, shapes, roles, depths). Lowrank factor entries are ignored so
/// that adapter-style experts remain mergeable against their dense base.
/// The first mismatching tensor is reported by name.
pub fn validate_compatible(base: &Checkpoint, experts: &[&Checkpoint]) -> Result<()> {
    let base_dense: Vec<&ManifestEntry> = base.manifest.dense_entries().collect();
    for expert in experts {
        let exp_dense: Vec<&ManifestEntry> = expert.manifest.dense_entries().collect();
        for (i, be) in base_dense.iter().enumerate() {
            match exp_dense.get(i) {
                None => {
                    return Err(Error::validation(format!(
                        "expert '{}' is missing tensor '{}'",
                        expert.source_tag, be.name
                    )))
                }
                Some(ee) if *ee != *be => {
                    return Err(Error::validation(format!(
                        "expert '{}' disagrees with base at tensor '{}'",
                        expert.source_tag, be.name
                    )))
                }
                Some(_) => {}
            }
        }
        if exp_dense.len() > base_dense.len() {
            return Err(Error::validation(format!(
                "expert '{}' has extra tensor '{}'",
                expert.source_tag,
                exp_dense[base_dense.len()].name
            )));
        }
        if expert.manifest.layer_count != base.manifest.layer_count {
            return Err(Error::validation(format!(
                "expert '{}' has layer_count {} but base has {}",
                expert.source_tag, expert.manifest.layer_count, base.manifest.layer_count
            )));
        }
    }
    Ok(())
}

// ── Container I/O ──────────────────────────────────────────────────────────

/// Raw MRGF contents; model and dataset loads both go through this.
#[derive(Debug, Clone)]
pub struct Container {
    pub manifest: Manifest,
    pub kind: String,
    pub source_tag: String,
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    manifest: Manifest,
    kind: String,
    source_tag: String,
    tensor_order: Vec<String>,
}

/// Serializes a container. Payload order follows the manifest entry order,
/// which makes the byte stream canonical for equal contents.
pub fn write_container(c: &Container, path: &Path) -> Result<()> {
    for e in &c.manifest.entries {
        let t = c
            .tensors
            .get(&e.name)
            .ok_or_else(|| Error::validation(format!("missing tensor '{}'", e.name)))?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::validation(format!(
                "tensor '{}' has shape {:?} but the manifest says {:?}",
                e.name,
                t.shape(),
                e.shape
            )));
        }
    }
    if c.tensors.len() != c.manifest.entries.len() {
        return Err(Error::validation(format!(
            "container holds {} tensors but the manifest lists {}",
            c.tensors.len(),
            c.manifest.entries.len()
        )));
    }

    let header = Header {
        manifest: c.manifest.clone(),
        kind: c.kind.clone(),
        source_tag: c.source_tag.clone(),
        tensor_order: c.manifest.entries.iter().map(|e| e.name.clone()).collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::validation(format!("header serialization failed: {e}")))?;

    let mut bytes = Vec::with_capacity(PREFIX as usize + header_json.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for e in &c.manifest.entries {
        for v in c.tensors[&e.name].data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }

    write_atomic(path, &bytes)
}

/// Writes bytes to a sibling temp file, then renames over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let display = path.display().to_string();
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&display, &e))?;
    if let Err(e) = f.write_all(bytes).and_then(|_| f.sync_all()) {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(&display, &e));
    }
    drop(f);
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(&display, &e)
    })
}

/// Parses an MRGF file, reporting the byte offset of any structural defect.
pub fn read_container(path: &Path) -> Result<Container> {
    let display = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(&display, &e))?;
    parse_container(&bytes)
}

pub fn parse_container(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 4 || &bytes[0..4] != MAGIC {
        return Err(Error::format("bad magic, expected \"MRGF\"", 0));
    }
    if bytes.len() < 8 {
        return Err(Error::format(
            "truncated before version field",
            bytes.len() as u64,
        ));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(
            format!("unsupported version {version}, expected {VERSION}"),
            4,
        ));
    }
    if bytes.len() < PREFIX as usize {
        return Err(Error::format(
            "truncated before header length",
            bytes.len() as u64,
        ));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header_end = PREFIX
        .checked_add(hlen)
        .ok_or_else(|| Error::format("header length overflows", 8))?;
    if (bytes.len() as u64) < header_end {
        return Err(Error::format(
            format!("truncated header: need {hlen} bytes"),
            bytes.len() as u64,
        ));
    }
    let header: Header = serde_json::from_slice(&bytes[PREFIX as usize..header_end as usize])
        .map_err(|e| Error::format(format!("header is not valid JSON: {e}"), PREFIX))?;

    // tensor_order must be exactly the manifest names.
    let manifest_names: Vec<&str> = header
        .manifest
        .entries
        .iter()
        .map(|e| e.name.as_str())
        .collect();
    let order_names: Vec<&str> = header.tensor_order.iter().map(|s| s.as_str()).collect();
    if manifest_names != order_names {
        return Err(Error::format(
            "tensor_order disagrees with manifest entries",
            PREFIX,
        ));
    }

    let expected_payload: u64 = header
        .manifest
        .entries
        .iter()
        .map(|e| 4 * e.shape.iter().product::<usize>() as u64)
        .sum();
    let actual_payload = bytes.len() as u64 - header_end;
    if actual_payload < expected_payload {
        return Err(Error::format(
            format!("payload truncated: expected {expected_payload} bytes, found {actual_payload}"),
            bytes.len() as u64,
        ));
    }
    if actual_payload > expected_payload {
        return Err(Error::format(
            format!(
                "payload length disagrees with manifest: expected {expected_payload} bytes, found {actual_payload}"
            ),
            header_end + expected_payload,
        ));
    }

    let mut tensors = BTreeMap::new();
    let mut cursor = header_end as usize;
    for e in &header.manifest.entries {
        let count: usize = e.shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            let at = cursor + 4 * i;
            data.push(f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()));
        }
        cursor += 4 * count;
        tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }

    Ok(Container {
        manifest: header.manifest,
        kind: header.kind,
        source_tag: header.source_tag,
        tensors,
    })
}

// ── Checkpoint-level wrappers ──────────────────────────────────────────────

/// Validates and writes a model checkpoint. No bytes are written if any
/// invariant fails.
pub fn write_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    c.validate()?;
    write_container(
        &Container {
            manifest: c.manifest.clone(),
            kind: c.kind.as_str().to_string(),
            source_tag: c.source_tag.clone(),
            tensors: c.tensors.clone(),
        },
        path,
    )
}

/// Reads and fully validates a model checkpoint.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let c = read_container(path)?;
    let kind = CheckpointKind::parse(&c.kind)
        .ok_or_else(|| Error::validation(format!("'{}' is not a model checkpoint kind", c.kind)))?;
    let ck = Checkpoint {
        manifest: c.manifest,
        tensors: c.tensors,
        kind,
        source_tag: c.source_tag,
    };
    ck.validate()?;
    Ok(ck)
}
