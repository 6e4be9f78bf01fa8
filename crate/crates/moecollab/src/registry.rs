//! Contribution management: versioned expert bundles on disk, compatibility
//! validation, and assembly of selected experts into a working model.
//!
//! A registry is a directory holding one shared encoder file, any number of
//! expert bundle files, and an `index.json`. All binary files share one
//! container layout:
//!
//! ```text
//! "MOEC" | format version u16 LE | manifest len u32 LE | manifest JSON
//!        | tensor count u16 LE
//!        | per tensor: name len u16 LE, name, rows u32 LE, cols u32 LE,
//!          rows*cols f64 LE values
//!        | CRC-32 (IEEE) over all preceding bytes, u32 LE
//! ```
//!
//! Index updates are atomic (write temp file, then rename), so a crash mid-
//! registration leaves the previous index intact.

use crate::encoder::{Encoder, EncoderConfig, TokenizerConfig};
use crate::error::{Error, Result};
use crate::expert::ExpertModule;
use crate::gating::GatingNetwork;
use crate::hash::{crc32, Fnv1a};
use crate::moe::MoEModel;
use crate::ndmath::{Param, Tensor2};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

const MAGIC: &[u8; 4] = b"MOEC";
const FORMAT_VERSION: u16 = 1;
const INDEX_FILE: &str = "index.json";
const ENCODER_FILE: &str = "encoder.moec";

/// Semantic version; ordering is numeric per component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Version(pub u64, pub u64, pub u64);

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.0, self.1, self.2)
    }
}

impl FromStr for Version {
    type Err = Error;

    fn from_str(s: &str) -> Result<Version> {
        let parts: Vec<&str> = s.split('.').collect();
        let bad = || Error::Validation(format!("version {s:?} is not MAJOR.MINOR.PATCH"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let mut nums = [0u64; 3];
        for (slot, part) in nums.iter_mut().zip(&parts) {
            if part.is_empty() || !part.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            *slot = part.parse().map_err(|_| bad())?;
        }
        Ok(Version(nums[0], nums[1], nums[2]))
    }
}

/// One reason a contribution cannot join a model. Violations are collected,
/// not short-circuited, so the caller sees every problem at once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Fingerprint {
        expert_id: String,
        expert: u64,
        model: u64,
    },
    HiddenDim {
        expert_id: String,
        expert_d: usize,
        model_d: usize,
    },
    LabelPrefix {
        expert_id: String,
        labels: Vec<String>,
        universe: Vec<String>,
    },
    GateArity {
        gate: usize,
        experts: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Fingerprint {
                expert_id,
                expert,
                model,
            } => write!(
                f,
                "expert {expert_id}: encoder fingerprint {expert:#018x} != model encoder {model:#018x}"
            ),
            Violation::HiddenDim {
                expert_id,
                expert_d,
                model_d,
            } => write!(
                f,
                "expert {expert_id}: hidden dim {expert_d} != model hidden dim {model_d}"
            ),
            Violation::LabelPrefix {
                expert_id,
                labels,
                universe,
            } => write!(
                f,
                "expert {expert_id}: labels {labels:?} are not a prefix of the label universe {universe:?}"
            ),
            Violation::GateArity { gate, experts } => write!(
                f,
                "gating network sized for {gate} experts but {experts} selected"
            ),
        }
    }
}

/// Metadata describing one contributed expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertManifest {
    pub expert_id: String,
    pub version: String,
    pub domain_tag: String,
    pub encoder_fingerprint: u64,
    pub hidden_dim: usize,
    pub adapter_dim: usize,
    pub num_classes: usize,
    pub label_names: Vec<String>,
    pub created_at: String,
    pub contributor: String,
}

/// Manifest plus the named parameter tensors, in serialization order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBundle {
    pub manifest: ExpertManifest,
    pub tensors: Vec<(String, Tensor2)>,
}

const EXPERT_TENSOR_NAMES: [&str; 6] = ["w_down", "b_down", "w_up", "b_up", "w_out", "b_out"];

fn expert_tensor_shapes(d: usize, k: usize, c: usize) -> [(usize, usize); 6] {
    [(d, k), (1, k), (k, d), (1, d), (d, c), (1, c)]
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

fn validate_bundle(bundle: &ExpertBundle) -> Result<()> {
    let m = &bundle.manifest;
    if !valid_id(&m.expert_id) {
        return Err(Error::Validation(format!(
            "expert id {:?} may only contain [A-Za-z0-9_-]",
            m.expert_id
        )));
    }
    Version::from_str(&m.version)?;
    if m.label_names.len() != m.num_classes {
        return Err(Error::Validation(format!(
            "{} label names for {} classes",
            m.label_names.len(),
            m.num_classes
        )));
    }
    let shapes = expert_tensor_shapes(m.hidden_dim, m.adapter_dim, m.num_classes);
    if bundle.tensors.len() != EXPERT_TENSOR_NAMES.len() {
        return Err(Error::Validation(format!(
            "expert bundle needs {} tensors, got {}",
            EXPERT_TENSOR_NAMES.len(),
            bundle.tensors.len()
        )));
    }
    for ((name, tensor), (want_name, want_shape)) in bundle
        .tensors
        .iter()
        .zip(EXPERT_TENSOR_NAMES.iter().zip(shapes))
    {
        if name != want_name {
            return Err(Error::Validation(format!(
                "unexpected tensor {name}, wanted {want_name}"
            )));
        }
        if tensor.shape() != want_shape {
            return Err(Error::TensorShapeMismatch {
                name: name.clone(),
                expected: want_shape,
                actual: tensor.shape(),
            });
        }
        if !tensor.is_finite() {
            return Err(Error::NonFinite("bundle tensor values"));
        }
    }
    Ok(())
}

/// Packs a trained expert into a bundle ready for registration.
pub fn bundle_from_expert(
    expert: &ExpertModule,
    encoder_fingerprint: u64,
    version: Version,
    contributor: &str,
    created_at: &str,
) -> ExpertBundle {
    ExpertBundle {
        manifest: ExpertManifest {
            expert_id: expert.id.clone(),
            version: version.to_string(),
            domain_tag: expert.domain_tag.clone(),
            encoder_fingerprint,
            hidden_dim: expert.hidden_dim(),
            adapter_dim: expert.adapter_dim(),
            num_classes: expert.num_classes(),
            label_names: expert.labels.clone(),
            created_at: created_at.to_string(),
            contributor: contributor.to_string(),
        },
        tensors: expert
            .named_params()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect(),
    }
}

/// Reconstructs the runnable expert from a validated bundle.
pub fn expert_from_bundle(bundle: &ExpertBundle) -> Result<ExpertModule> {
    validate_bundle(bundle)?;
    let m = &bundle.manifest;
    let t = |i: usize| Param::new(bundle.tensors[i].1.clone());
    Ok(ExpertModule {
        id: m.expert_id.clone(),
        domain_tag: m.domain_tag.clone(),
        labels: m.label_names.clone(),
        w_down: t(0),
        b_down: t(1),
        w_up: t(2),
        b_up: t(3),
        w_out: t(4),
        b_out: t(5),
    })
}

// ---------------------------------------------------------------------------
// container encoding

fn write_container(path: &Path, manifest_json: &[u8], tensors: &[(String, Tensor2)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(manifest_json);
    buf.extend_from_slice(&(tensors.len() as u16).to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, &buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Validation(format!(
                "container truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn read_container(path: &Path) -> Result<(Vec<u8>, Vec<(String, Tensor2)>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 {
        return Err(Error::ChecksumMismatch {
            stored: 0,
            computed: crc32(&bytes),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32(body);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    let mut cur = Cursor {
        bytes: body,
        pos: 0,
    };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            found: magic.try_into().unwrap(),
        });
    }
    let version = cur.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedFormatVersion(version));
    }
    let manifest_len = cur.u32()? as usize;
    let manifest = cur.take(manifest_len)?.to_vec();
    let count = cur.u16()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|e| Error::Validation(format!("tensor name not UTF-8: {e}")))?;
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let raw = cur.take(rows * cols * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor2::from_vec(rows, cols, data)));
    }
    if cur.pos != body.len() {
        return Err(Error::Validation(format!(
            "{} trailing bytes after last tensor",
            body.len() - cur.pos
        )));
    }
    Ok((manifest, tensors))
}

/// Writes an expert bundle in the container format. Deterministic: the same
/// bundle always produces identical bytes.
pub fn save_bundle(bundle: &ExpertBundle, path: &Path) -> Result<()> {
    validate_bundle(bundle)?;
    let manifest = serde_json::to_vec(&bundle.manifest)?;
    write_container(path, &manifest, &bundle.tensors)
}

/// Reads and fully validates an expert bundle (checksum, magic, manifest,
/// tensor shapes).
pub fn load_bundle(path: &Path) -> Result<ExpertBundle> {
    let (manifest_bytes, tensors) = read_container(path)?;
    let manifest: ExpertManifest = serde_json::from_slice(&manifest_bytes)?;
    let bundle = ExpertBundle { manifest, tensors };
    validate_bundle(&bundle)?;
    Ok(bundle)
}

// ---------------------------------------------------------------------------
// fingerprinting

/// FNV-1a over the encoder config and every parameter tensor. Identifies a
/// (configuration, weights) pair for compatibility checks; not a security
/// boundary.
pub fn encoder_fingerprint(encoder: &Encoder) -> u64 {
    let mut h = Fnv1a::new();
    h.update(&serde_json::to_vec(encoder.config()).expect("config is plain integers"));
    h.update_u32(encoder.vocab_size() as u32);
    for (name, t) in encoder.named_params() {
        h.update(name.as_bytes());
        h.update_u32(t.rows() as u32);
        h.update_u32(t.cols() as u32);
        for &v in t.data() {
            h.update_f64(v);
        }
    }
    h.finish()
}

/// Checks one manifest against a model's encoder fingerprint, hidden dim,
/// and label universe. Returns every violation found (empty means ok).
pub fn validate_compatibility(
    manifest: &ExpertManifest,
    model_encoder_fingerprint: u64,
    model_d: usize,
    model_label_universe: &[String],
) -> Vec<Violation> {
    let mut violations = Vec::new();
    if manifest.encoder_fingerprint != model_encoder_fingerprint {
        violations.push(Violation::Fingerprint {
            expert_id: manifest.expert_id.clone(),
            expert: manifest.encoder_fingerprint,
            model: model_encoder_fingerprint,
        });
    }
    if manifest.hidden_dim != model_d {
        violations.push(Violation::HiddenDim {
            expert_id: manifest.expert_id.clone(),
            expert_d: manifest.hidden_dim,
            model_d,
        });
    }
    let n = manifest.label_names.len().min(model_label_universe.len());
    if manifest.label_names.len() > model_label_universe.len()
        || manifest.label_names[..] != model_label_universe[..n]
    {
        violations.push(Violation::LabelPrefix {
            expert_id: manifest.expert_id.clone(),
            labels: manifest.label_names.clone(),
            universe: model_label_universe.to_vec(),
        });
    }
    violations
}

// ---------------------------------------------------------------------------
// the registry directory

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub expert_id: String,
    pub version: String,
    pub file: String,
    pub domain_tag: String,
    pub fingerprint: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegistryIndex {
    pub entries: Vec<IndexEntry>,
}

/// Handle to a registry directory; one shared encoder plus expert bundles.
#[derive(Debug)]
pub struct Registry {
    dir: PathBuf,
    index: RegistryIndex,
}

#[derive(Debug, Serialize, Deserialize)]
struct EncoderFileManifest {
    kind: String,
    tokenizer: TokenizerConfig,
    encoder: EncoderConfig,
    vocab_size: usize,
    fingerprint: u64,
    created_at: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct GateFileManifest {
    kind: String,
    hidden_dim: usize,
    num_experts: usize,
    expert_refs: Vec<String>,
    created_at: String,
}

impl Registry {
    /// Opens (creating if needed) a registry directory and loads its index.
    pub fn open(dir: &Path) -> Result<Registry> {
        fs::create_dir_all(dir)?;
        let index_path = dir.join(INDEX_FILE);
        let index = if index_path.exists() {
            serde_json::from_slice(&fs::read(&index_path)?)?
        } else {
            RegistryIndex::default()
        };
        Ok(Registry {
            dir: dir.to_path_buf(),
            index,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn index(&self) -> &RegistryIndex {
        &self.index
    }

    pub fn has_encoder(&self) -> bool {
        self.dir.join(ENCODER_FILE).exists()
    }

    /// Stores the shared encoder (with its tokenizer config) in the registry.
    pub fn save_encoder(
        &self,
        encoder: &Encoder,
        tokenizer: &TokenizerConfig,
        created_at: &str,
    ) -> Result<u64> {
        let fingerprint = encoder_fingerprint(encoder);
        let manifest = EncoderFileManifest {
            kind: "encoder".into(),
            tokenizer: tokenizer.clone(),
            encoder: encoder.config().clone(),
            vocab_size: encoder.vocab_size(),
            fingerprint,
            created_at: created_at.to_string(),
        };
        let tensors: Vec<(String, Tensor2)> = encoder
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        write_container(
            &self.dir.join(ENCODER_FILE),
            &serde_json::to_vec(&manifest)?,
            &tensors,
        )?;
        Ok(fingerprint)
    }

    /// Loads the shared encoder; errors if none was saved yet.
    pub fn load_encoder(&self) -> Result<(Encoder, TokenizerConfig, u64)> {
        let path = self.dir.join(ENCODER_FILE);
        if !path.exists() {
            return Err(Error::Validation(format!(
                "registry {} holds no shared encoder (run pretraining first)",
                self.dir.display()
            )));
        }
        let (manifest_bytes, tensors) = read_container(&path)?;
        let manifest: EncoderFileManifest = serde_json::from_slice(&manifest_bytes)?;
        let encoder = Encoder::from_named_params(manifest.encoder, manifest.vocab_size, &tensors)?;
        let fingerprint = encoder_fingerprint(&encoder);
        if fingerprint != manifest.fingerprint {
            return Err(Error::Validation(format!(
                "encoder fingerprint {:#018x} does not match its manifest ({:#018x})",
                fingerprint, manifest.fingerprint
            )));
        }
        Ok((encoder, manifest.tokenizer, fingerprint))
    }

    /// Saves a trained gating network alongside the experts it routes.
    pub fn save_gate(
        &self,
        path: &Path,
        gating: &GatingNetwork,
        expert_refs: &[String],
        created_at: &str,
    ) -> Result<()> {
        let manifest = GateFileManifest {
            kind: "gate".into(),
            hidden_dim: gating.hidden_dim(),
            num_experts: gating.num_experts(),
            expert_refs: expert_refs.to_vec(),
            created_at: created_at.to_string(),
        };
        let tensors = vec![
            ("w".to_string(), gating.w.value.clone()),
            ("b".to_string(), gating.b.value.clone()),
        ];
        write_container(path, &serde_json::to_vec(&manifest)?, &tensors)
    }

    pub fn load_gate(path: &Path) -> Result<GatingNetwork> {
        let (manifest_bytes, tensors) = read_container(path)?;
        let manifest: GateFileManifest = serde_json::from_slice(&manifest_bytes)?;
        if tensors.len() != 2 || tensors[0].0 != "w" || tensors[1].0 != "b" {
            return Err(Error::Validation("gate file must hold tensors w, b".into()));
        }
        let want_w = (manifest.hidden_dim, manifest.num_experts);
        if tensors[0].1.shape() != want_w {
            return Err(Error::TensorShapeMismatch {
                name: "w".into(),
                expected: want_w,
                actual: tensors[0].1.shape(),
            });
        }
        if tensors[1].1.shape() != (1, manifest.num_experts) {
            return Err(Error::TensorShapeMismatch {
                name: "b".into(),
                expected: (1, manifest.num_experts),
                actual: tensors[1].1.shape(),
            });
        }
        let mut gn = GatingNetwork::init(manifest.hidden_dim, manifest.num_experts)?;
        gn.w.value = tensors[0].1.clone();
        gn.b.value = tensors[1].1.clone();
        Ok(gn)
    }

    /// Validates a bundle against the shared encoder, stores it, and updates
    /// the index atomically. Duplicate (id, version) pairs are rejected.
    pub fn register_expert(&mut self, bundle: &ExpertBundle) -> Result<&RegistryIndex> {
        validate_bundle(bundle)?;
        let (_, _, fingerprint) = self.load_encoder()?;
        let m = &bundle.manifest;
        let violations =
            validate_compatibility(m, fingerprint, self.encoder_hidden_dim()?, &m.label_names);
        if !violations.is_empty() {
            return Err(Error::Incompatible { violations });
        }
        if self
            .index
            .entries
            .iter()
            .any(|e| e.expert_id == m.expert_id && e.version == m.version)
        {
            return Err(Error::DuplicateVersion {
                expert_id: m.expert_id.clone(),
                version: m.version.clone(),
            });
        }
        let file = format!("{}-{}.moec", m.expert_id, m.version);
        save_bundle(bundle, &self.dir.join(&file))?;
        self.index.entries.push(IndexEntry {
            expert_id: m.expert_id.clone(),
            version: m.version.clone(),
            file,
            domain_tag: m.domain_tag.clone(),
            fingerprint: m.encoder_fingerprint,
        });
        self.write_index()?;
        Ok(&self.index)
    }

    fn encoder_hidden_dim(&self) -> Result<usize> {
        // manifest-only read; cheaper than rebuilding the whole encoder
        let (manifest_bytes, _) = read_container(&self.dir.join(ENCODER_FILE))?;
        let manifest: EncoderFileManifest = serde_json::from_slice(&manifest_bytes)?;
        Ok(manifest.encoder.hidden_dim)
    }

    fn write_index(&self) -> Result<()> {
        let tmp = self.dir.join(format!("{INDEX_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(&self.index)?)?;
        fs::rename(&tmp, self.dir.join(INDEX_FILE))?;
        Ok(())
    }

    /// All registered versions of one expert, ascending.
    pub fn versions_of(&self, expert_id: &str) -> Vec<Version> {
        let mut versions: Vec<Version> = self
            .index
            .entries
            .iter()
            .filter(|e| e.expert_id == expert_id)
            .filter_map(|e| Version::from_str(&e.version).ok())
            .collect();
        versions.sort();
        versions
    }

    /// Resolves a selector to an index entry; `None` means latest.
    pub fn resolve(&self, expert_id: &str, version: Option<Version>) -> Result<&IndexEntry> {
        let missing = |v: String| Error::MissingExpert {
            expert_id: expert_id.to_string(),
            version: v,
        };
        match version {
            Some(v) => self
                .index
                .entries
                .iter()
                .find(|e| e.expert_id == expert_id && e.version == v.to_string())
                .ok_or_else(|| missing(v.to_string())),
            None => {
                let latest = self.versions_of(expert_id).pop();
                match latest {
                    Some(v) => self.resolve(expert_id, Some(v)),
                    None => Err(missing("latest".into())),
                }
            }
        }
    }

    pub fn load_registered(&self, expert_id: &str, version: Option<Version>) -> Result<ExpertBundle> {
        let entry = self.resolve(expert_id, version)?;
        load_bundle(&self.dir.join(&entry.file))
    }
}

/// `id` or `id@MAJOR.MINOR.PATCH`; bare ids select the latest version.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertSelector {
    pub id: String,
    pub version: Option<Version>,
}

impl fmt::Display for ExpertSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.version {
            Some(v) => write!(f, "{}@{}", self.id, v),
            None => write!(f, "{}", self.id),
        }
    }
}

impl FromStr for ExpertSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<ExpertSelector> {
        let (id, version) = match s.split_once('@') {
            Some((id, v)) => (id, Some(Version::from_str(v)?)),
            None => (s, None),
        };
        if !valid_id(id) {
            return Err(Error::Validation(format!(
                "expert id {id:?} may only contain [A-Za-z0-9_-]"
            )));
        }
        Ok(ExpertSelector {
            id: id.to_string(),
            version,
        })
    }
}

/// Where the assembled model's gate comes from.
#[derive(Debug, Clone)]
pub enum GatingSource {
    /// Zero-initialized (uniform routing); the usual state before gate
    /// training.
    Fresh,
    /// A gate file previously written by [`Registry::save_gate`].
    FromFile(PathBuf),
}

/// Loads the shared encoder and the selected experts, checks compatibility
/// across the whole selection, and builds the model.
pub fn assemble_moe(
    registry: &Registry,
    selectors: &[ExpertSelector],
    gating: &GatingSource,
) -> Result<MoEModel> {
    if selectors.is_empty() {
        return Err(Error::Validation("no experts selected".into()));
    }
    let (encoder, _, fingerprint) = registry.load_encoder()?;
    let mut bundles = Vec::with_capacity(selectors.len());
    for sel in selectors {
        bundles.push(registry.load_registered(&sel.id, sel.version)?);
    }
    let universe = bundles
        .iter()
        .map(|b| &b.manifest.label_names)
        .max_by_key(|l| l.len())
        .cloned()
        .unwrap_or_default();
    let mut violations = Vec::new();
    for b in &bundles {
        violations.extend(validate_compatibility(
            &b.manifest,
            fingerprint,
            encoder.hidden_dim(),
            &universe,
        ));
    }
    if !violations.is_empty() {
        return Err(Error::Incompatible { violations });
    }
    let experts = bundles
        .iter()
        .map(expert_from_bundle)
        .collect::<Result<Vec<ExpertModule>>>()?;
    let gn = match gating {
        GatingSource::Fresh => GatingNetwork::init(encoder.hidden_dim(), experts.len())?,
        GatingSource::FromFile(path) => {
            let gn = Registry::load_gate(path)?;
            let mut violations = Vec::new();
            if gn.num_experts() != experts.len() {
                violations.push(Violation::GateArity {
                    gate: gn.num_experts(),
                    experts: experts.len(),
                });
            }
            if gn.hidden_dim() != encoder.hidden_dim() {
                violations.push(Violation::HiddenDim {
                    expert_id: "<gating>".into(),
                    expert_d: gn.hidden_dim(),
                    model_d: encoder.hidden_dim(),
                });
            }
            if !violations.is_empty() {
                return Err(Error::Incompatible { violations });
            }
            gn
        }
    };
    MoEModel::new(encoder, experts, gn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert::init_expert;
    use crate::moe::moe_forward;
    use crate::encoder::TokenBatch;

    fn labels(c: usize) -> Vec<String> {
        (0..c).map(|i| format!("c{i}")).collect()
    }

    fn tiny_encoder(seed: u64) -> (Encoder, TokenizerConfig) {
        let tok = TokenizerConfig {
            vocab_size: 64,
            max_len: 6,
            lowercase: true,
        };
        let cfg = EncoderConfig {
            hidden_dim: 8,
            num_layers: 1,
            num_heads: 2,
            ff_dim: 12,
            max_len: 6,
        };
        (Encoder::init(cfg, tok.vocab_size, seed).unwrap(), tok)
    }

    fn sample_bundle(id: &str, version: &str, fingerprint: u64) -> ExpertBundle {
        let expert = init_expert(id, "news", labels(3), 8, 2, 11).unwrap();
        bundle_from_expert(
            &expert,
            fingerprint,
            Version::from_str(version).unwrap(),
            "tester",
            "2024-01-01T00:00:00Z",
        )
    }

    #[test]
    fn version_parse_and_order() {
        assert_eq!(Version::from_str("1.2.3").unwrap(), Version(1, 2, 3));
        assert!(Version::from_str("1.2").is_err());
        assert!(Version::from_str("1.2.3.4").is_err());
        assert!(Version::from_str("1.2.x").is_err());
        assert!(Version::from_str("").is_err());
        assert!(Version::from_str("1..3").is_err());
        assert!(Version(1, 0, 9) < Version(1, 0, 10));
        assert!(Version(1, 0, 10) < Version(1, 1, 0));
        assert_eq!(Version(2, 0, 1).to_string(), "2.0.1");
    }

    #[test]
    fn selector_parsing() {
        let s: ExpertSelector = "news@1.2.0".parse().unwrap();
        assert_eq!(s.id, "news");
        assert_eq!(s.version, Some(Version(1, 2, 0)));
        let bare: ExpertSelector = "legal-v2".parse().unwrap();
        assert_eq!(bare.version, None);
        assert!("bad id".parse::<ExpertSelector>().is_err());
        assert!("x@1".parse::<ExpertSelector>().is_err());
    }

    #[test]
    fn bundle_round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.moec");
        let bundle = sample_bundle("news", "1.0.0", 42);
        save_bundle(&bundle, &path).unwrap();
        let loaded = load_bundle(&path).unwrap();
        assert_eq!(bundle, loaded);
    }

    #[test]
    fn two_saves_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.moec");
        let b = dir.path().join("b.moec");
        let bundle = sample_bundle("news", "1.0.0", 42);
        save_bundle(&bundle, &a).unwrap();
        save_bundle(&bundle, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn truncated_file_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.moec");
        save_bundle(&sample_bundle("news", "1.0.0", 42), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            load_bundle(&path),
            Err(Error::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.moec");
        save_bundle(&sample_bundle("news", "1.0.0", 42), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_bundle(&path),
            Err(Error::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn wrong_magic_is_a_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.moec");
        save_bundle(&sample_bundle("news", "1.0.0", 42), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        let len = bytes.len();
        let crc = crc32(&bytes[..len - 4]);
        bytes[len - 4..].copy_from_slice(&crc.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_bundle(&path), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn future_format_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.moec");
        save_bundle(&sample_bundle("news", "1.0.0", 42), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4..6].copy_from_slice(&2u16.to_le_bytes());
        let len = bytes.len();
        let crc = crc32(&bytes[..len - 4]);
        bytes[len - 4..].copy_from_slice(&crc.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_bundle(&path),
            Err(Error::UnsupportedFormatVersion(2))
        ));
    }

    #[test]
    fn manifest_tensor_shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.moec");
        let mut bundle = sample_bundle("news", "1.0.0", 42);
        // lie about the adapter dim; tensors no longer match the manifest
        bundle.manifest.adapter_dim = 5;
        let manifest = serde_json::to_vec(&bundle.manifest).unwrap();
        write_container(&path, &manifest, &bundle.tensors).unwrap();
        assert!(matches!(
            load_bundle(&path),
            Err(Error::TensorShapeMismatch { .. })
        ));
    }

    #[test]
    fn compatibility_violations_are_collected() {
        let bundle = sample_bundle("news", "1.0.0", 42);
        let m = &bundle.manifest;
        assert!(validate_compatibility(m, 42, 8, &labels(3)).is_empty());
        // prefix rule: universe longer than the expert's labels is fine
        assert!(validate_compatibility(m, 42, 8, &labels(5)).is_empty());

        let vs = validate_compatibility(m, 43, 32, &labels(3));
        assert_eq!(vs.len(), 2);
        let text: String = vs.iter().map(|v| v.to_string()).collect();
        assert!(text.contains("8") && text.contains("32"));

        let vs = validate_compatibility(m, 42, 8, &["x".to_string(), "y".to_string(), "z".to_string()]);
        assert!(matches!(vs[..], [Violation::LabelPrefix { .. }]));
    }

    #[test]
    fn encoder_fingerprint_tracks_parameters() {
        let (enc, _) = tiny_encoder(3);
        let fp1 = encoder_fingerprint(&enc);
        assert_eq!(fp1, encoder_fingerprint(&enc));
        let (other, _) = tiny_encoder(4);
        assert_ne!(fp1, encoder_fingerprint(&other));
        let mut tweaked = enc.clone();
        tweaked.tok_emb.value.set(0, 0, 123.0);
        assert_ne!(fp1, encoder_fingerprint(&tweaked));
    }

    #[test]
    fn encoder_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let registry = Registry::open(dir.path()).unwrap();
        let (enc, tok) = tiny_encoder(5);
        let fp = registry.save_encoder(&enc, &tok, "2024-01-01T00:00:00Z").unwrap();
        let (loaded, tok2, fp2) = registry.load_encoder().unwrap();
        assert_eq!(fp, fp2);
        assert_eq!(tok, tok2);
        assert_eq!(enc.config(), loaded.config());
        for ((_, a), (_, b)) in enc.named_params().iter().zip(loaded.named_params()) {
            assert_eq!(**a, *b);
        }
    }

    #[test]
    fn registration_versioning_and_persistence() {
        let dir = tempfile::tempdir().unwrap();
        let mut registry = Registry::open(dir.path()).unwrap();
        let (enc, tok) = tiny_encoder(7);
        let fp = registry.save_encoder(&enc, &tok, "t").unwrap();

        registry.register_expert(&sample_bundle("news", "1.0.0", fp)).unwrap();
        registry.register_expert(&sample_bundle("news", "1.0.1", fp)).unwrap();
        assert_eq!(
            registry.versions_of("news"),
            vec![Version(1, 0, 0), Version(1, 0, 1)]
        );
        let latest = registry.resolve("news", None).unwrap();
        assert_eq!(latest.version, "1.0.1");

        // duplicate rejected
        assert!(matches!(
            registry.register_expert(&sample_bundle("news", "1.0.0", fp)),
            Err(Error::DuplicateVersion { .. })
        ));

        // survives a process restart
        let reopened = Registry::open(dir.path()).unwrap();
        assert_eq!(reopened.index(), registry.index());
        let bundle = reopened.load_registered("news", None).unwrap();
        assert_eq!(bundle.manifest.version, "1.0.1");
    }

    #[test]
    fn registration_rejects_fingerprint_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let mut registry = Registry::open(dir.path()).unwrap();
        let (enc, tok) = tiny_encoder(9);
        let fp = registry.save_encoder(&enc, &tok, "t").unwrap();
        match registry.register_expert(&sample_bundle("news", "1.0.0", fp ^ 1)) {
            Err(Error::Incompatible { violations }) => {
                assert!(matches!(violations[..], [Violation::Fingerprint { .. }]));
            }
            other => panic!("expected incompatibility, got {other:?}"),
        }
    }

    #[test]
    fn stale_index_temp_file_does_not_break_the_registry() {
        let dir = tempfile::tempdir().unwrap();
        let mut registry = Registry::open(dir.path()).unwrap();
        let (enc, tok) = tiny_encoder(13);
        let fp = registry.save_encoder(&enc, &tok, "t").unwrap();
        registry.register_expert(&sample_bundle("news", "1.0.0", fp)).unwrap();

        // simulate a crash between temp-write and rename
        fs::write(dir.path().join("index.json.tmp"), b"half-written garbage").unwrap();
        let reopened = Registry::open(dir.path()).unwrap();
        assert_eq!(reopened.index().entries.len(), 1);
        assert_eq!(reopened.resolve("news", None).unwrap().version, "1.0.0");

        // and the next registration still succeeds, replacing the temp file
        let mut reopened = reopened;
        reopened.register_expert(&sample_bundle("news", "1.0.1", fp)).unwrap();
        assert_eq!(reopened.versions_of("news").len(), 2);
    }

    #[test]
    fn assemble_selects_experts_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut registry = Registry::open(dir.path()).unwrap();
        let (enc, tok) = tiny_encoder(15);
        let fp = registry.save_encoder(&enc, &tok, "t").unwrap();
        for (i, id) in ["news", "legal", "med", "social"].iter().enumerate() {
            let expert = init_expert(id, id, labels(3), 8, 2, 20 + i as u64).unwrap();
            let bundle = bundle_from_expert(&expert, fp, Version(1, 0, 0), "t", "t");
            registry.register_expert(&bundle).unwrap();
        }
        let selectors: Vec<ExpertSelector> = ["legal", "news@1.0.0", "social", "med"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect();
        let model = assemble_moe(&registry, &selectors, &GatingSource::Fresh).unwrap();
        assert_eq!(model.gating.num_experts(), 4);
        let ids: Vec<&str> = model.experts.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, vec!["legal", "news", "social", "med"]);

        // determinism: assembling twice gives identical parameters
        let again = assemble_moe(&registry, &selectors, &GatingSource::Fresh).unwrap();
        for (a, b) in model.experts.iter().zip(&again.experts) {
            assert_eq!(a.w_down.value, b.w_down.value);
            assert_eq!(a.w_out.value, b.w_out.value);
        }
    }

    #[test]
    fn assemble_single_expert_matches_direct_forward() {
        let dir = tempfile::tempdir().unwrap();
        let mut registry = Registry::open(dir.path()).unwrap();
        let (enc, tok) = tiny_encoder(17);
        let fp = registry.save_encoder(&enc, &tok, "t").unwrap();
        let expert = init_expert("solo", "dom", labels(3), 8, 2, 31).unwrap();
        registry
            .register_expert(&bundle_from_expert(&expert, fp, Version(1, 0, 0), "t", "t"))
            .unwrap();
        let model = assemble_moe(
            &registry,
            &["solo".parse().unwrap()],
            &GatingSource::Fresh,
        )
        .unwrap();
        let batch = TokenBatch::from_texts(["some words here"], &tok).unwrap();
        let combined = moe_forward(&batch, &model).unwrap();
        let h = model.encoder.encode(&batch).unwrap();
        let direct = crate::expert::expert_forward(&h, &expert).unwrap();
        assert_eq!(combined.logits, direct.y);
    }

    #[test]
    fn assemble_rejects_missing_and_mismatched() {
        let dir = tempfile::tempdir().unwrap();
        let mut registry = Registry::open(dir.path()).unwrap();
        let (enc, tok) = tiny_encoder(19);
        let fp = registry.save_encoder(&enc, &tok, "t").unwrap();
        registry
            .register_expert(&sample_bundle("news", "1.0.0", fp))
            .unwrap();

        assert!(matches!(
            assemble_moe(&registry, &["ghost".parse().unwrap()], &GatingSource::Fresh),
            Err(Error::MissingExpert { .. })
        ));
        assert!(matches!(
            assemble_moe(
                &registry,
                &["news@9.9.9".parse().unwrap()],
                &GatingSource::Fresh
            ),
            Err(Error::MissingExpert { .. })
        ));

        // swap in a different encoder after registration: fingerprints no
        // longer match and assembly must refuse
        let (other, tok2) = tiny_encoder(20);
        registry.save_encoder(&other, &tok2, "t").unwrap();
        assert!(matches!(
            assemble_moe(&registry, &["news".parse().unwrap()], &GatingSource::Fresh),
            Err(Error::Incompatible { .. })
        ));
    }

    #[test]
    fn gate_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let registry = Registry::open(dir.path()).unwrap();
        let mut gn = GatingNetwork::init(8, 3).unwrap();
        gn.w.value.set(2, 1, 0.5);
        gn.b.value.set(0, 2, -0.25);
        let path = dir.path().join("gate.moec");
        registry
            .save_gate(&path, &gn, &["a@1.0.0".into(), "b@1.0.0".into(), "c@1.0.0".into()], "t")
            .unwrap();
        let loaded = Registry::load_gate(&path).unwrap();
        assert_eq!(loaded.w.value, gn.w.value);
        assert_eq!(loaded.b.value, gn.b.value);
    }
}
