//! Checkpoint and manifest I/O.
//!
//! Checkpoints use the safetensors container layout: an 8-byte little-endian
//! header length, a UTF-8 JSON header mapping tensor names to
//! `{dtype, shape, data_offsets}`, then the raw little-endian tensor bytes.
//! `F32` is read natively and `F16` is widened to `F32` on load. The model id
//! travels in `__metadata__.model_id`; files without it fall back to the file
//! stem.
//!
//! [`save_model`] writes the canonical encoding: tensors sorted by name, keys
//! sorted within each header entry, header padded with spaces to a multiple
//! of 8 bytes. Loading a canonical file and saving it again reproduces the
//! file byte for byte.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";
const MODEL_ID_KEY: &str = "model_id";
/// Headers larger than this are rejected before allocation.
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::DegenerateShape { name, shape });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::LengthMismatch {
                name,
                shape,
                len: data.len(),
            });
        }
        Ok(TensorRecord { name, shape, data })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Matrix view `[dim0, product(rest)]`; vectors become a single column.
    pub fn matrix_dims(&self) -> (usize, usize) {
        let rows = self.shape[0];
        (rows, self.data.len() / rows)
    }

    /// Same name and shape, new values.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        TensorRecord::new(self.name.clone(), self.shape.clone(), data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    model_id: String,
    tensors: Vec<TensorRecord>,
}

impl ModelWeights {
    /// Validates non-emptiness and unique names; tensor order is kept.
    pub fn new(model_id: impl Into<String>, tensors: Vec<TensorRecord>) -> Result<Self> {
        let model_id = model_id.into();
        if tensors.is_empty() {
            return Err(Error::EmptyModel(model_id));
        }
        let mut seen = HashSet::with_capacity(tensors.len());
        for t in &tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(Error::DuplicateTensor(t.name.clone()));
            }
        }
        Ok(ModelWeights { model_id, tensors })
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn set_model_id(&mut self, id: impl Into<String>) {
        self.model_id = id.into();
    }

    pub fn tensors(&self) -> &[TensorRecord] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [TensorRecord] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(TensorRecord::numel).sum()
    }

    /// Applies `f` to every tensor, keeping names and order.
    pub fn map_tensors<F>(&self, model_id: impl Into<String>, mut f: F) -> Result<Self>
    where
        F: FnMut(&TensorRecord) -> Result<Vec<f32>>,
    {
        let tensors = self
            .tensors
            .iter()
            .map(|t| f(t).and_then(|data| t.with_data(data)))
            .collect::<Result<Vec<_>>>()?;
        ModelWeights::new(model_id, tensors)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Accept NaN/Inf values instead of failing.
    pub permissive: bool,
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelWeights> {
    load_model_with(path, LoadOptions::default())
}

pub fn load_model_with(path: impl AsRef<Path>, opts: LoadOptions) -> Result<ModelWeights> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fallback_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_model(&bytes, &fallback_id, opts)
}

/// Decodes an in-memory checkpoint.
pub fn decode_model(bytes: &[u8], fallback_id: &str, opts: LoadOptions) -> Result<ModelWeights> {
    if bytes.len() < 8 {
        return Err(Error::MalformedHeader("file shorter than 8 bytes".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    if header_len > MAX_HEADER_LEN || header_len > (bytes.len() - 8) as u64 {
        return Err(Error::MalformedHeader(format!(
            "header length {header_len} exceeds file size {}",
            bytes.len()
        )));
    }
    let header_end = 8 + header_len as usize;
    let header: Map<String, Value> = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let payload = &bytes[header_end..];

    let mut model_id = fallback_id.to_string();
    let mut tensors = Vec::with_capacity(header.len());
    let mut extent = 0usize;
    let mut covered = 0usize;
    for (name, entry) in &header {
        if name == METADATA_KEY {
            if let Some(id) = entry.get(MODEL_ID_KEY).and_then(Value::as_str) {
                model_id = id.to_string();
            }
            continue;
        }
        let entry: HeaderEntry = serde_json::from_value(entry.clone())
            .map_err(|e| Error::MalformedHeader(format!("tensor `{name}`: {e}")))?;
        let width = match entry.dtype.as_str() {
            "F32" => 4,
            "F16" => 2,
            other => return Err(Error::UnsupportedDtype(other.to_string())),
        };
        let [start, end] = entry.data_offsets;
        if end < start {
            return Err(Error::MalformedHeader(format!(
                "tensor `{name}`: offsets [{start}, {end}] are reversed"
            )));
        }
        let numel: usize = entry.shape.iter().product();
        if entry.shape.is_empty() || numel == 0 {
            return Err(Error::DegenerateShape {
                name: name.clone(),
                shape: entry.shape,
            });
        }
        if end - start != numel * width {
            return Err(Error::MalformedHeader(format!(
                "tensor `{name}`: offsets span {} bytes, shape needs {}",
                end - start,
                numel * width
            )));
        }
        if end > payload.len() {
            return Err(Error::TruncatedData(format!(
                "tensor `{name}` ends at byte {end}, payload has {}",
                payload.len()
            )));
        }
        let raw = &payload[start..end];
        let data: Vec<f32> = if width == 4 {
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect()
        } else {
            raw.chunks_exact(2)
                .map(|c| half::f16::from_le_bytes(c.try_into().expect("2 bytes")).to_f32())
                .collect()
        };
        let record = TensorRecord::new(name.clone(), entry.shape, data)?;
        if !opts.permissive && !record.is_finite() {
            return Err(Error::NonFinite(name.clone()));
        }
        extent = extent.max(end);
        covered += end - start;
        tensors.push(record);
    }
    if extent != payload.len() || covered != payload.len() {
        return Err(Error::TruncatedData(format!(
            "header covers {covered} of {} payload bytes",
            payload.len()
        )));
    }
    // Duplicate keys collapse in a JSON map, so scan the raw header for them.
    check_duplicate_keys(&bytes[8..header_end])?;
    ModelWeights::new(model_id, tensors)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

fn check_duplicate_keys(header: &[u8]) -> Result<()> {
    // Top-level keys only: parse as a sequence of (key, raw value) pairs.
    struct Keys(Vec<String>);
    impl<'de> Deserialize<'de> for Keys {
        fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
            struct V;
            impl<'de> serde::de::Visitor<'de> for V {
                type Value = Keys;
                fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                    f.write_str("a JSON object")
                }
                fn visit_map<A: serde::de::MapAccess<'de>>(
                    self,
                    mut map: A,
                ) -> std::result::Result<Keys, A::Error> {
                    let mut keys = Vec::new();
                    while let Some(k) = map.next_key::<String>()? {
                        map.next_value::<serde::de::IgnoredAny>()?;
                        keys.push(k);
                    }
                    Ok(Keys(keys))
                }
            }
            d.deserialize_map(V)
        }
    }
    let Keys(keys) =
        serde_json::from_slice(header).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let mut seen = HashSet::with_capacity(keys.len());
    for k in keys {
        if !seen.insert(k.clone()) {
            return Err(Error::DuplicateTensor(k));
        }
    }
    Ok(())
}

/// Canonical encoding of a model (see module docs).
pub fn encode_model(m: &ModelWeights) -> Result<Vec<u8>> {
    if m.tensors.is_empty() {
        return Err(Error::EmptyModel(m.model_id.clone()));
    }
    let mut sorted: Vec<&TensorRecord> = m.tensors.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));

    let mut entries: BTreeMap<&str, Value> = BTreeMap::new();
    let mut metadata = Map::new();
    metadata.insert(MODEL_ID_KEY.into(), Value::String(m.model_id.clone()));
    entries.insert(METADATA_KEY, Value::Object(metadata));
    let mut offset = 0usize;
    for t in &sorted {
        if t.shape.is_empty() || t.shape.contains(&0) {
            return Err(Error::DegenerateShape {
                name: t.name.clone(),
                shape: t.shape.clone(),
            });
        }
        let end = offset + 4 * t.data.len();
        let mut e = Map::new();
        e.insert("data_offsets".into(), serde_json::json!([offset, end]));
        e.insert("dtype".into(), Value::String("F32".into()));
        e.insert("shape".into(), serde_json::json!(t.shape));
        entries.insert(&t.name, Value::Object(e));
        offset = end;
    }
    let mut header = serde_json::to_vec(&entries)?;
    while header.len() % 8 != 0 {
        header.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in sorted {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_model(m: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_model(m)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Training regime that produced a node from its parent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Stage {
    Generalization,
    Specialization,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Generalization => "generalization",
            Stage::Specialization => "specialization",
        }
    }

    pub fn flipped(self) -> Stage {
        match self {
            Stage::Generalization => Stage::Specialization,
            Stage::Specialization => Stage::Generalization,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generalization" => Ok(Stage::Generalization),
            "specialization" => Ok(Stage::Specialization),
            other => Err(Error::Manifest(format!("unknown stage label `{other}`"))),
        }
    }
}

impl TryFrom<String> for Stage {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Stage> for String {
    fn from(s: Stage) -> String {
        s.as_str().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum FineTuneKind {
    Full,
    Lora { rank: usize },
    Merge { parents: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestNode {
    pub model_id: String,
    pub parent_id: Option<String>,
    pub stage: Stage,
    pub kind: FineTuneKind,
    /// Optional declared tree label; when present it must agree with the
    /// components formed by the parent links.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree: Option<String>,
}

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// Ground-truth forest of a model population.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphManifest {
    pub format_version: u32,
    pub nodes: Vec<ManifestNode>,
}

impl GraphManifest {
    pub fn new(nodes: Vec<ManifestNode>) -> Result<Self> {
        let m = GraphManifest {
            format_version: MANIFEST_FORMAT_VERSION,
            nodes,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut index = HashMap::with_capacity(self.nodes.len());
        for (i, n) in self.nodes.iter().enumerate() {
            if index.insert(n.model_id.as_str(), i).is_some() {
                return Err(Error::Manifest(format!("duplicate model id `{}`", n.model_id)));
            }
        }
        for n in &self.nodes {
            if let Some(p) = &n.parent_id {
                if !index.contains_key(p.as_str()) {
                    return Err(Error::Manifest(format!(
                        "`{}` names unknown parent `{p}`",
                        n.model_id
                    )));
                }
                if p == &n.model_id {
                    return Err(Error::Manifest(format!("cycle through `{p}`")));
                }
            }
            if let FineTuneKind::Merge { parents } = &n.kind {
                if parents.len() != 2 {
                    return Err(Error::Manifest(format!(
                        "merge arity: `{}` lists {} parents, expected 2",
                        n.model_id,
                        parents.len()
                    )));
                }
                for p in parents {
                    if !index.contains_key(p.as_str()) {
                        return Err(Error::Manifest(format!(
                            "merge `{}` names unknown parent `{p}`",
                            n.model_id
                        )));
                    }
                }
            }
        }
        // Walk every chain; a chain longer than n revisits a node.
        for n in &self.nodes {
            let mut cur = n;
            let mut steps = 0;
            while let Some(p) = &cur.parent_id {
                steps += 1;
                if steps > self.nodes.len() {
                    return Err(Error::Manifest(format!("cycle through `{}`", n.model_id)));
                }
                cur = &self.nodes[index[p.as_str()]];
            }
        }
        // Declared trees must coincide with parent-link components.
        let mut declared: HashMap<&str, HashSet<String>> = HashMap::new();
        for n in &self.nodes {
            if let Some(t) = &n.tree {
                declared
                    .entry(t.as_str())
                    .or_default()
                    .insert(self.root_of(&n.model_id).expect("validated").to_string());
            }
        }
        for (t, roots) in declared {
            if roots.len() > 1 {
                return Err(Error::Manifest(format!(
                    "multiple roots in declared tree `{t}`: {roots:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&ManifestNode> {
        self.nodes.iter().find(|n| n.model_id == id)
    }

    pub fn parent_of(&self, id: &str) -> Option<&str> {
        self.get(id).and_then(|n| n.parent_id.as_deref())
    }

    pub fn root_of<'a>(&'a self, id: &'a str) -> Option<&'a str> {
        let mut cur = self.get(id)?;
        let mut steps = 0;
        while let Some(p) = &cur.parent_id {
            cur = self.get(p)?;
            steps += 1;
            if steps > self.nodes.len() {
                return None;
            }
        }
        Some(&cur.model_id)
    }

    /// Trees as lists of model ids in manifest order, ordered by root position.
    pub fn trees(&self) -> Vec<Vec<String>> {
        let mut order: Vec<&str> = Vec::new();
        let mut members: HashMap<&str, Vec<String>> = HashMap::new();
        for n in &self.nodes {
            let root = self.root_of(&n.model_id).unwrap_or(&n.model_id);
            if !members.contains_key(root) {
                order.push(root);
            }
            members.entry(root).or_default().push(n.model_id.clone());
        }
        order
            .into_iter()
            .map(|r| members.remove(r).unwrap_or_default())
            .collect()
    }

    /// Number of edges between two nodes of the same tree.
    pub fn edge_distance(&self, a: &str, b: &str) -> Option<usize> {
        let chain = |id: &str| -> Option<Vec<String>> {
            let mut out = vec![id.to_string()];
            let mut cur = self.get(id)?;
            while let Some(p) = &cur.parent_id {
                out.push(p.clone());
                cur = self.get(p)?;
            }
            Some(out)
        };
        let ca = chain(a)?;
        let cb = chain(b)?;
        for (i, x) in ca.iter().enumerate() {
            if let Some(j) = cb.iter().position(|y| y == x) {
                return Some(i + j);
            }
        }
        None
    }

    pub fn ids(&self) -> Vec<String> {
        self.nodes.iter().map(|n| n.model_id.clone()).collect()
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<GraphManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn parse_manifest(text: &str) -> Result<GraphManifest> {
    let m: GraphManifest = serde_json::from_str(text).map_err(|e| {
        let msg = e.to_string();
        if msg.contains("unknown stage") {
            Error::Manifest(msg)
        } else {
            Error::Manifest(format!("malformed manifest: {msg}"))
        }
    })?;
    if m.format_version != MANIFEST_FORMAT_VERSION {
        return Err(Error::Manifest(format!(
            "unsupported format_version {}",
            m.format_version
        )));
    }
    m.validate()?;
    Ok(m)
}

pub fn save_manifest(m: &GraphManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(m)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_tensor() -> ModelWeights {
        let t = TensorRecord::new("w", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        ModelWeights::new("m", vec![t]).unwrap()
    }

    fn raw_file(header: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    fn f32_bytes(v: &[f32]) -> Vec<u8> {
        v.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    #[test]
    fn single_tensor_round_trip() {
        let m = one_tensor();
        let bytes = encode_model(&m).unwrap();
        let back = decode_model(&bytes, "ignored", LoadOptions::default()).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_model(&back).unwrap(), bytes);
    }

    #[test]
    fn header_order_is_preserved() {
        let header = r#"{"b":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#;
        let bytes = raw_file(header, &f32_bytes(&[1.0, 2.0]));
        let m = decode_model(&bytes, "x", LoadOptions::default()).unwrap();
        let names: Vec<_> = m.tensors().iter().map(|t| t.name()).collect();
        assert_eq!(names, ["b", "a"]);
        assert_eq!(m.get("a").unwrap().data(), &[2.0]);
        assert_eq!(m.model_id(), "x");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let header = r#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#;
        let bytes = raw_file(header, &f32_bytes(&[1.0, 2.0, 3.0]));
        let err = decode_model(&bytes, "x", LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("truncated data"), "{err}");
    }

    #[test]
    fn trailing_payload_is_rejected() {
        let header = r#"{"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#;
        let bytes = raw_file(header, &f32_bytes(&[1.0, 2.0]));
        assert!(matches!(
            decode_model(&bytes, "x", LoadOptions::default()),
            Err(Error::TruncatedData(_))
        ));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let header = r#"{"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"w":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#;
        let bytes = raw_file(header, &f32_bytes(&[1.0, 2.0]));
        assert!(decode_model(&bytes, "x", LoadOptions::default()).is_err());
    }

    #[test]
    fn non_finite_only_in_permissive_mode() {
        let header = r#"{"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#;
        let bytes = raw_file(header, &f32_bytes(&[1.0, f32::NAN]));
        assert!(matches!(
            decode_model(&bytes, "x", LoadOptions::default()),
            Err(Error::NonFinite(_))
        ));
        let m = decode_model(&bytes, "x", LoadOptions { permissive: true }).unwrap();
        assert!(m.tensors()[0].data()[1].is_nan());
    }

    #[test]
    fn f16_is_widened() {
        let vals = [half::f16::from_f32(0.5), half::f16::from_f32(-2.0)];
        let payload: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        let header = r#"{"h":{"dtype":"F16","shape":[2],"data_offsets":[0,4]}}"#;
        let m = decode_model(&raw_file(header, &payload), "x", LoadOptions::default()).unwrap();
        assert_eq!(m.tensors()[0].data(), &[0.5, -2.0]);
    }

    #[test]
    fn other_dtypes_are_rejected() {
        let header = r#"{"h":{"dtype":"I64","shape":[1],"data_offsets":[0,8]}}"#;
        let bytes = raw_file(header, &[0u8; 8]);
        assert!(matches!(
            decode_model(&bytes, "x", LoadOptions::default()),
            Err(Error::UnsupportedDtype(_))
        ));
    }

    #[test]
    fn bad_header_length() {
        let mut bytes = 1000u64.to_le_bytes().to_vec();
        bytes.extend_from_slice(b"{}");
        assert!(matches!(
            decode_model(&bytes, "x", LoadOptions::default()),
            Err(Error::MalformedHeader(_))
        ));
        assert!(matches!(
            decode_model(&[1, 2], "x", LoadOptions::default()),
            Err(Error::MalformedHeader(_))
        ));
    }

    #[test]
    fn empty_model_and_degenerate_shape() {
        assert!(matches!(
            ModelWeights::new("e", vec![]),
            Err(Error::EmptyModel(_))
        ));
        let err = TensorRecord::new("z", vec![0], vec![]).unwrap_err();
        assert!(err.to_string().contains("degenerate shape"));
        assert!(TensorRecord::new("s", vec![], vec![1.0]).is_err());
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.safetensors");
        let m = one_tensor();
        save_model(&m, &p).unwrap();
        let back = load_model(&p).unwrap();
        assert_eq!(back, m);
        let again = dir.path().join("again.safetensors");
        save_model(&back, &again).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&again).unwrap());
    }

    fn node(id: &str, parent: Option<&str>) -> ManifestNode {
        ManifestNode {
            model_id: id.into(),
            parent_id: parent.map(Into::into),
            stage: Stage::Specialization,
            kind: FineTuneKind::Full,
            tree: None,
        }
    }

    #[test]
    fn gpc_manifest_has_one_root() {
        let m = GraphManifest::new(vec![
            node("g", None),
            node("p", Some("g")),
            node("c", Some("p")),
        ])
        .unwrap();
        assert_eq!(m.trees().len(), 1);
        assert_eq!(m.root_of("c"), Some("g"));
        assert_eq!(m.edge_distance("c", "g"), Some(2));
        let text = serde_json::to_string(&m).unwrap();
        assert_eq!(parse_manifest(&text).unwrap(), m);
    }

    #[test]
    fn manifest_cycle_is_rejected() {
        let err = GraphManifest::new(vec![node("a", Some("b")), node("b", Some("a"))]).unwrap_err();
        assert!(err.to_string().contains("cycle"), "{err}");
    }

    #[test]
    fn merge_arity_is_checked() {
        let mut merged = node("m", None);
        merged.kind = FineTuneKind::Merge {
            parents: vec!["a".into()],
        };
        let err = GraphManifest::new(vec![node("a", None), merged]).unwrap_err();
        assert!(err.to_string().contains("merge arity"), "{err}");
    }

    #[test]
    fn declared_tree_with_two_roots_is_rejected() {
        let mut a = node("a", None);
        let mut b = node("b", None);
        a.tree = Some("t".into());
        b.tree = Some("t".into());
        let err = GraphManifest::new(vec![a, b]).unwrap_err();
        assert!(err.to_string().contains("multiple roots"), "{err}");
    }

    #[test]
    fn unknown_stage_is_rejected() {
        let text = r#"{"format_version":1,"nodes":[{"model_id":"a","parent_id":null,"stage":"pretraining","kind":{"type":"full"}}]}"#;
        let err = parse_manifest(text).unwrap_err();
        assert!(err.to_string().contains("unknown stage"), "{err}");
    }
}
