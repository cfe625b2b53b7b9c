//! Single-file named-array container.
//!
//! The container is a POSIX tar archive in which every array is stored as a
//! standard `.npy` member (`<name>.npy`) and a plain-text `metadata.txt` member
//! holds `key=value` lines. Python reads it with `tarfile` + `numpy.load`, so
//! externally extracted features can be dropped in with a few lines of glue.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array, ArrayBase, Data, Dimension};
use ndarray_npy::{ReadNpyExt, ReadableElement, WritableElement, WriteNpyExt};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

const METADATA_MEMBER: &str = "metadata.txt";

/// Ordered key-value metadata record.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Metadata(pub BTreeMap<String, String>);

impl Metadata {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format(key, "missing metadata key"))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::format(key, format!("cannot parse metadata value {raw:?}")))
    }

    /// Stores every top-level field of `value` as `prefix.field=<json>`.
    pub fn insert_struct<T: Serialize>(&mut self, prefix: &str, value: &T) {
        let value = serde_json::to_value(value).expect("metadata struct serializes");
        let object = value.as_object().expect("metadata struct is a JSON object");
        for (key, v) in object {
            self.set(&format!("{prefix}.{key}"), v);
        }
    }

    pub fn extract_struct<T: DeserializeOwned>(&self, prefix: &str) -> Result<T> {
        let mut object = serde_json::Map::new();
        let lead = format!("{prefix}.");
        for (key, raw) in &self.0 {
            if let Some(field) = key.strip_prefix(&lead) {
                let v: serde_json::Value = serde_json::from_str(raw)
                    .map_err(|_| Error::format(key.clone(), format!("unparseable value {raw:?}")))?;
                object.insert(field.to_string(), v);
            }
        }
        serde_json::from_value(serde_json::Value::Object(object))
            .map_err(|e| Error::format(prefix, e.to_string()))
    }

    fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.0 {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    fn from_text(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("metadata", format!("malformed line {line:?}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Metadata(map))
    }
}

/// Streams arrays into a new archive file.
pub struct ArchiveWriter {
    builder: tar::Builder<BufWriter<File>>,
}

impl ArchiveWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut builder = tar::Builder::new(BufWriter::new(file));
        builder.mode(tar::HeaderMode::Deterministic);
        Ok(Self { builder })
    }

    fn append(&mut self, member: &str, bytes: &[u8]) -> Result<()> {
        let mut header = tar::Header::new_gnu();
        header.set_size(bytes.len() as u64);
        header.set_mode(0o644);
        header.set_mtime(0);
        header.set_cksum();
        self.builder
            .append_data(&mut header, member, bytes)
            .map_err(|e| Error::io(member, e))
    }

    pub fn add_array<A, S, D>(&mut self, name: &str, array: &ArrayBase<S, D>) -> Result<()>
    where
        A: WritableElement,
        S: Data<Elem = A>,
        D: Dimension,
    {
        let mut bytes = Vec::new();
        array
            .write_npy(&mut bytes)
            .map_err(|e| Error::format(name, e.to_string()))?;
        self.append(&format!("{name}.npy"), &bytes)
    }

    pub fn add_metadata(&mut self, meta: &Metadata) -> Result<()> {
        self.append(METADATA_MEMBER, meta.to_text().as_bytes())
    }

    pub fn finish(self) -> Result<()> {
        let mut inner = self
            .builder
            .into_inner()
            .map_err(|e| Error::io("archive", e))?;
        inner.flush().map_err(|e| Error::io("archive", e))
    }
}

/// A fully loaded archive.
#[derive(Debug)]
pub struct Archive {
    members: BTreeMap<String, Vec<u8>>,
}

impl Archive {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut tar = tar::Archive::new(file);
        let mut members = BTreeMap::new();
        let entries = tar.entries().map_err(|e| Error::io(path, e))?;
        for entry in entries {
            let mut entry = entry.map_err(|e| Error::io(path, e))?;
            let name = entry
                .path()
                .map_err(|e| Error::io(path, e))?
                .to_string_lossy()
                .into_owned();
            let mut bytes = Vec::new();
            entry
                .read_to_end(&mut bytes)
                .map_err(|e| Error::io(path, e))?;
            members.insert(name, bytes);
        }
        Ok(Self { members })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.members.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.members.contains_key(&format!("{name}.npy"))
    }

    /// Reads array `name`, failing with a format error naming it when absent
    /// and a shape error when its rank differs from `D`.
    pub fn array<A, D>(&self, name: &str) -> Result<Array<A, D>>
    where
        A: ReadableElement,
        D: Dimension,
    {
        let bytes = self
            .members
            .get(&format!("{name}.npy"))
            .ok_or_else(|| Error::format(name, "array missing from archive"))?;
        Array::<A, D>::read_npy(bytes.as_slice()).map_err(|e| Error::format(name, e.to_string()))
    }

    pub fn metadata(&self) -> Result<Metadata> {
        let bytes = self
            .members
            .get(METADATA_MEMBER)
            .ok_or_else(|| Error::format("metadata", "metadata record missing"))?;
        let text = std::str::from_utf8(bytes)
            .map_err(|_| Error::format("metadata", "metadata is not UTF-8"))?;
        Metadata::from_text(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1, Array2, Ix1};

    #[test]
    fn arrays_and_metadata_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.tar");
        let a: Array2<f32> = array![[1.0, 2.5], [-3.0, 4.0]];
        let b: Array1<i32> = array![7, -1, 3];
        let mut meta = Metadata::new();
        meta.set("format", "test-v1");
        meta.set("answers", 10);

        let mut w = ArchiveWriter::create(&path).unwrap();
        w.add_array("a", &a).unwrap();
        w.add_array("b", &b).unwrap();
        w.add_metadata(&meta).unwrap();
        w.finish().unwrap();

        let r = Archive::open(&path).unwrap();
        assert_eq!(r.array::<f32, _>("a").unwrap(), a);
        assert_eq!(r.array::<i32, Ix1>("b").unwrap(), b);
        assert_eq!(r.metadata().unwrap(), meta);
        assert_eq!(r.metadata().unwrap().parse::<usize>("answers").unwrap(), 10);
    }

    #[test]
    fn missing_array_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.tar");
        let mut w = ArchiveWriter::create(&path).unwrap();
        w.add_metadata(&Metadata::new()).unwrap();
        w.finish().unwrap();
        let err = Archive::open(&path).unwrap().array::<f32, Ix1>("answers").unwrap_err();
        assert!(matches!(err, Error::Format { ref field, .. } if field == "answers"));
    }
}
