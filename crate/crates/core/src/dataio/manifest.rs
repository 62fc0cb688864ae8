//! Clip manifests: a JSON array of clip entries. Relative file references
//! resolve against the directory containing the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::tensor_file::{read_tensor, DtypeCode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipManifestEntry {
    pub clip_id: String,
    pub duration_s: f64,
    /// `[T, D]` f32 facial features.
    pub face_path: String,
    /// `[T, C, D]` f32 motion context features (or `[T, D]` already flattened).
    pub motion_path: String,
    /// `[T]` i32 music codes.
    pub token_path: String,
    /// Optional `[T, H, W, 2]` f32 optical-flow fields.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_path: Option<String>,
    pub caption_id: u32,
    pub tempo_bpm: f64,
    pub beat_times_s: Vec<f64>,
}

const REQUIRED_FIELDS: &[&str] = &[
    "clip_id",
    "duration_s",
    "face_path",
    "motion_path",
    "token_path",
    "caption_id",
    "tempo_bpm",
    "beat_times_s",
];
const OPTIONAL_FIELDS: &[&str] = &["flow_path"];

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ClipManifestEntry>,
}

impl Manifest {
    pub fn resolve(&self, reference: &str) -> PathBuf {
        resolve(&self.root, reference)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn resolve(root: &Path, reference: &str) -> PathBuf {
    let p = Path::new(reference);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

impl ClipManifestEntry {
    /// Checks every invariant that does not touch the filesystem.
    pub fn validate_fields(&self) -> Result<()> {
        let fail = |field: &str, reason: String| Err(Error::validation(&self.clip_id, field, reason));
        if self.clip_id.trim().is_empty() {
            return fail("clip_id", "must be non-empty".into());
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return fail("duration_s", format!("must be > 0, got {}", self.duration_s));
        }
        if !(self.tempo_bpm.is_finite() && self.tempo_bpm > 0.0) {
            return fail("tempo_bpm", format!("must be > 0, got {}", self.tempo_bpm));
        }
        for (name, value) in [
            ("face_path", &self.face_path),
            ("motion_path", &self.motion_path),
            ("token_path", &self.token_path),
        ] {
            if value.is_empty() {
                return fail(name, "empty file reference".into());
            }
        }
        for (i, &t) in self.beat_times_s.iter().enumerate() {
            if !t.is_finite() || t < 0.0 || t > self.duration_s {
                return fail(
                    "beat_times_s",
                    format!("beat {i} at {t} s outside [0, {}]", self.duration_s),
                );
            }
            if i > 0 && t <= self.beat_times_s[i - 1] {
                return fail(
                    "beat_times_s",
                    format!("not strictly increasing at index {i} ({} then {t})", self.beat_times_s[i - 1]),
                );
            }
        }
        Ok(())
    }

    pub fn validate_files(&self, root: &Path) -> Result<()> {
        let mut checks = vec![
            ("face_path", &self.face_path, DtypeCode::F32, &[2usize][..]),
            ("motion_path", &self.motion_path, DtypeCode::F32, &[2, 3][..]),
            ("token_path", &self.token_path, DtypeCode::I32, &[1][..]),
        ];
        if let Some(flow) = &self.flow_path {
            checks.push(("flow_path", flow, DtypeCode::F32, &[4][..]));
        }
        for (field, reference, dtype, ranks) in checks {
            let path = resolve(root, reference);
            if !path.is_file() {
                return Err(Error::validation(
                    &self.clip_id,
                    field,
                    format!("dangling file reference {}", path.display()),
                ));
            }
            let tensor = read_tensor(&path)
                .map_err(|e| Error::validation(&self.clip_id, field, e.to_string()))?;
            if tensor.dtype() != dtype || !ranks.contains(&tensor.shape().len()) {
                return Err(Error::validation(
                    &self.clip_id,
                    field,
                    format!(
                        "expected {dtype:?} tensor of rank {ranks:?}, found {:?} with shape {:?}",
                        tensor.dtype(),
                        tensor.shape()
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Parses and fully validates a manifest, file references included.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let entries = parse_entries(&text)?;
    for entry in &entries {
        entry.validate_files(&root)?;
    }
    Ok(Manifest { root, entries })
}

/// Parses manifest text and checks field-level invariants (no file access).
pub fn parse_entries(text: &str) -> Result<Vec<ClipManifestEntry>> {
    let doc: Value = serde_json::from_str(text)?;
    let items = doc
        .as_array()
        .ok_or_else(|| Error::validation("<manifest>", "<root>", "expected a JSON array of clip entries"))?;
    let mut entries = Vec::with_capacity(items.len());
    for (index, item) in items.iter().enumerate() {
        let obj = item.as_object().ok_or_else(|| {
            Error::validation(format!("#{index}"), "<entry>", "entry is not an object")
        })?;
        let clip_id = obj
            .get("clip_id")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .unwrap_or_else(|| format!("#{index}"));
        for field in REQUIRED_FIELDS {
            if !obj.contains_key(*field) {
                return Err(Error::validation(&clip_id, *field, "missing field"));
            }
        }
        if let Some(unknown) = obj
            .keys()
            .find(|k| !REQUIRED_FIELDS.contains(&k.as_str()) && !OPTIONAL_FIELDS.contains(&k.as_str()))
        {
            return Err(Error::validation(&clip_id, unknown.as_str(), "unknown field"));
        }
        for (key, value) in obj {
            if let Err(e) = check_field_type(key, value) {
                return Err(Error::validation(&clip_id, key.as_str(), e));
            }
        }
        let entry: ClipManifestEntry = serde_json::from_value(item.clone())
            .map_err(|e| Error::validation(&clip_id, "<entry>", e.to_string()))?;
        entry.validate_fields()?;
        entries.push(entry);
    }
    Ok(entries)
}

fn check_field_type(key: &str, v: &Value) -> std::result::Result<(), String> {
    let ok = match key {
        "clip_id" | "face_path" | "motion_path" | "token_path" => v.is_string(),
        "flow_path" => v.is_string() || v.is_null(),
        "duration_s" | "tempo_bpm" => v.is_number(),
        "caption_id" => v.as_u64().is_some_and(|c| c <= u32::MAX as u64),
        "beat_times_s" => v.as_array().is_some_and(|a| a.iter().all(Value::is_number)),
        _ => true,
    };
    if ok {
        Ok(())
    } else {
        Err(format!("wrong type: {v}"))
    }
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ClipManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(entries)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::tensor_file::{write_tensor, TensorFile};

    fn fixture(dir: &Path) -> ClipManifestEntry {
        write_tensor(dir.join("f.expt"), &TensorFile::f32(vec![2, 3], vec![0.0; 6]).unwrap()).unwrap();
        write_tensor(dir.join("m.expt"), &TensorFile::f32(vec![2, 8, 3], vec![0.0; 48]).unwrap()).unwrap();
        write_tensor(dir.join("t.expt"), &TensorFile::i32(vec![5], vec![0, 1, 2, 3, 4]).unwrap()).unwrap();
        ClipManifestEntry {
            clip_id: "c0".into(),
            duration_s: 10.0,
            face_path: "f.expt".into(),
            motion_path: "m.expt".into(),
            token_path: "t.expt".into(),
            flow_path: None,
            caption_id: 1,
            tempo_bpm: 120.0,
            beat_times_s: vec![0.0, 0.5, 1.0],
        }
    }

    fn load_json(dir: &Path, json: &Value) -> Result<Manifest> {
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string(json).unwrap()).unwrap();
        load_manifest(&path)
    }

    #[test]
    fn empty_array_is_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = load_json(dir.path(), &serde_json::json!([])).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn valid_entry_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let entry = fixture(dir.path());
        let path = dir.path().join("manifest.json");
        write_manifest(&path, &[entry.clone(), ClipManifestEntry { clip_id: "c1".into(), ..entry.clone() }]).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0], entry);
        assert_eq!(m.entries[1].clip_id, "c1");
    }

    #[test]
    fn unsorted_beats_name_clip_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let mut entry = fixture(dir.path());
        entry.beat_times_s = vec![0.5, 0.4];
        let err = load_json(dir.path(), &serde_json::json!([entry])).unwrap_err();
        match err {
            Error::Validation { clip_id, field, .. } => {
                assert_eq!(clip_id, "c0");
                assert_eq!(field, "beat_times_s");
            }
            other => panic!("unexpected {other}"),
        }
    }

    /// One corruption per field; every one of them must be rejected and
    /// attributed to the right field.
    #[test]
    fn every_single_field_corruption_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let entry = fixture(dir.path());
        let base = serde_json::to_value(&entry).unwrap();
        let corruptions: Vec<(&str, Value)> = vec![
            ("clip_id", serde_json::json!("")),
            ("clip_id", serde_json::json!(5)),
            ("duration_s", serde_json::json!(0.0)),
            ("duration_s", serde_json::json!(-1.0)),
            ("duration_s", serde_json::json!(0.75)),
            ("face_path", serde_json::json!("missing.expt")),
            ("motion_path", serde_json::json!("missing.expt")),
            ("token_path", serde_json::json!("missing.expt")),
            ("token_path", serde_json::json!("f.expt")),
            ("face_path", serde_json::json!("t.expt")),
            ("caption_id", serde_json::json!(-1)),
            ("caption_id", serde_json::json!("one")),
            ("tempo_bpm", serde_json::json!(0.0)),
            ("tempo_bpm", serde_json::json!(-120.0)),
            ("beat_times_s", serde_json::json!([0.5, 0.4])),
            ("beat_times_s", serde_json::json!([0.5, 0.5])),
            ("beat_times_s", serde_json::json!([-0.1, 0.5])),
            ("beat_times_s", serde_json::json!([0.5, 11.0])),
            ("beat_times_s", serde_json::json!("0.5")),
        ];
        for (field, value) in corruptions {
            let mut doc = base.clone();
            doc[field] = value.clone();
            let err = load_json(dir.path(), &Value::Array(vec![doc]))
                .expect_err(&format!("corruption {field}={value} accepted"));
            let Error::Validation { field: named, .. } = &err else {
                panic!("{field}={value}: wrong error kind {err}");
            };
            // duration 0.75 violates beat range, which is reported on the beats
            if !(field == "duration_s" && value == serde_json::json!(0.75)) {
                assert_eq!(named, field, "{field}={value}: {err}");
            }
        }
        for field in REQUIRED_FIELDS {
            let mut doc = base.clone();
            doc.as_object_mut().unwrap().remove(*field);
            let err = load_json(dir.path(), &Value::Array(vec![doc])).unwrap_err();
            assert!(
                matches!(&err, Error::Validation { field: f, clip_id, .. } if f == field && (clip_id == "c0" || *field == "clip_id")),
                "{err}"
            );
        }
        let mut doc = base.clone();
        doc["tempo"] = serde_json::json!(1);
        assert!(matches!(
            load_json(dir.path(), &Value::Array(vec![doc])).unwrap_err(),
            Error::Validation { field, .. } if field == "tempo"
        ));
    }
}
