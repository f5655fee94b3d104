//! JSON-lines feature and caption files.
//!
//! Features, one record per image, objects score-descending:
//! `{"id": "...", "dim": 4, "objects": [[...], ...], "global": [...]}`
//!
//! Captions, any number per image:
//! `{"id": "...", "caption": "a dog and a cat"}`

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::ObjectSequence;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub id: String,
    pub dim: usize,
    pub objects: Vec<Vec<f64>>,
    pub global: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    pub caption: String,
}

impl FeatureRecord {
    pub fn from_sequence(id: impl Into<String>, seq: &ObjectSequence) -> Self {
        Self {
            id: id.into(),
            dim: seq.dim(),
            objects: seq.objects().to_vec(),
            global: seq.global().clone(),
        }
    }

    fn into_sequence(self) -> std::result::Result<(String, ObjectSequence), String> {
        if let Some(i) = self.objects.iter().position(|o| o.len() != self.dim) {
            return Err(format!(
                "object {i} has length {} but dim is {}",
                self.objects[i].len(),
                self.dim
            ));
        }
        if self.global.len() != self.dim {
            return Err(format!(
                "global has length {} but dim is {}",
                self.global.len(),
                self.dim
            ));
        }
        let seq = ObjectSequence::with_global(self.objects, self.global).map_err(|e| e.to_string())?;
        Ok((self.id, seq))
    }
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Record {
            index: out.len(),
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, &r)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// Reads a feature file, preserving record and object order.
pub fn load_features(path: &Path) -> Result<Vec<(String, ObjectSequence)>> {
    read_jsonl::<FeatureRecord>(path)?
        .into_iter()
        .enumerate()
        .map(|(index, r)| r.into_sequence().map_err(|message| Error::Record { index, message }))
        .collect()
}

pub fn write_features(path: &Path, records: &[(String, ObjectSequence)]) -> Result<()> {
    write_jsonl(
        path,
        records
            .iter()
            .map(|(id, seq)| FeatureRecord::from_sequence(id.clone(), seq)),
    )
}

pub fn load_captions(path: &Path) -> Result<Vec<CaptionRecord>> {
    read_jsonl(path)
}

pub fn write_captions(path: &Path, records: &[CaptionRecord]) -> Result<()> {
    write_jsonl(path, records)
}

/// A directory holding `features.jsonl` and `captions.jsonl`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Vec<(String, ObjectSequence)>,
    pub captions: Vec<CaptionRecord>,
}

impl Dataset {
    pub const FEATURES: &'static str = "features.jsonl";
    pub const CAPTIONS: &'static str = "captions.jsonl";

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_features(&dir.join(Self::FEATURES), &self.features)?;
        write_captions(&dir.join(Self::CAPTIONS), &self.captions)
    }

    /// `(id, objects, caption)` for every caption, in caption-file order.
    pub fn pairs(&self) -> Result<Vec<(&str, &ObjectSequence, &str)>> {
        let by_id: HashMap<&str, &ObjectSequence> = self.features.iter().map(|(id, s)| (id.as_str(), s)).collect();
        self.captions
            .iter()
            .enumerate()
            .map(|(index, c)| {
                let seq = by_id.get(c.id.as_str()).ok_or_else(|| Error::Record {
                    index,
                    message: format!("caption for unknown image `{}`", c.id),
                })?;
                Ok((c.id.as_str(), *seq, c.caption.as_str()))
            })
            .collect()
    }

    /// All captions per image id.
    pub fn references(&self) -> BTreeMap<String, Vec<String>> {
        let mut refs: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for c in &self.captions {
            refs.entry(c.id.clone()).or_default().push(c.caption.clone());
        }
        refs
    }
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    Ok(Dataset {
        features: load_features(&dir.join(Dataset::FEATURES))?,
        captions: load_captions(&dir.join(Dataset::CAPTIONS))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    #[test]
    fn empty_file_gives_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.jsonl");
        fs::write(&path, "").unwrap();
        assert!(load_features(&path).unwrap().is_empty());
    }

    #[test]
    fn one_record_with_two_objects() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.jsonl");
        fs::write(
            &path,
            r#"{"id":"img1","dim":4,"objects":[[1,2,3,4],[5,6,7,8]],"global":[0.5,0.5,0.5,0.5]}"#,
        )
        .unwrap();
        let recs = load_features(&path).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].0, "img1");
        assert_eq!(recs[0].1.len(), 3);
        assert_eq!(recs[0].1.features()[1], vec![5.0, 6.0, 7.0, 8.0]);
        assert_eq!(recs[0].1.global(), &vec![0.5; 4]);
    }

    #[test]
    fn malformed_records_report_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.jsonl");
        let good = r#"{"id":"a","dim":2,"objects":[],"global":[1,2]}"#;
        fs::write(
            &path,
            format!("{good}\n\n{good}\n{{\"id\":\"c\",\"dim\":2,\"objects\":[[1]],\"global\":[1,2]}}\n"),
        )
        .unwrap();
        match load_features(&path) {
            Err(Error::Record { index, .. }) => assert_eq!(index, 2),
            other => panic!("{other:?}"),
        }
        fs::write(&path, format!("{good}\nnot json\n")).unwrap();
        assert!(matches!(load_features(&path), Err(Error::Record { index: 1, .. })));
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_synthetic(&SyntheticSpec::default(), 25).unwrap();
        let dataset = Dataset {
            features: data.iter().map(|e| (e.id.clone(), e.objects.clone())).collect(),
            captions: data
                .iter()
                .map(|e| CaptionRecord {
                    id: e.id.clone(),
                    caption: e.caption.clone(),
                })
                .collect(),
        };
        dataset.save(dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, dataset);
        for ((_, a), (_, b)) in back.features.iter().zip(&dataset.features) {
            for (x, y) in a.features().iter().flatten().zip(b.features().iter().flatten()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(back.pairs().unwrap().len(), 25);
    }

    #[test]
    fn captions_for_unknown_images_are_rejected() {
        let d = Dataset {
            features: vec![],
            captions: vec![CaptionRecord {
                id: "x".into(),
                caption: "a dog".into(),
            }],
        };
        assert!(d.pairs().is_err());
    }
}
