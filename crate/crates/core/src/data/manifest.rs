//! Line-delimited JSON manifest and per-sample file layout.
//!
//! Each record's `path` is a stem relative to the manifest directory; the
//! sample lives in `<stem>_rgb.ppm`, `<stem>_nir.ppm`, `<stem>_tir.ppm` and
//! `<stem>_mask.pgm`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::netpbm;
use super::synth::Sample;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub path: String,
    pub id: usize,
    pub camera: usize,
    pub split: Split,
}

pub const SUFFIXES: [&str; 3] = ["_rgb.ppm", "_nir.ppm", "_tir.ppm"];
pub const MASK_SUFFIX: &str = "_mask.pgm";

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn save_sample(stem: &Path, sample: &Sample) -> Result<()> {
    for (img, suffix) in sample.images.iter().zip(SUFFIXES) {
        netpbm::save_ppm(&with_suffix(stem, suffix), img)?;
    }
    netpbm::save_mask(&with_suffix(stem, MASK_SUFFIX), &sample.fg_mask)
}

pub fn load_sample(stem: &Path, identity: usize, camera: usize) -> Result<Sample> {
    let [r, n, t] = SUFFIXES.map(|s| netpbm::load_ppm(&with_suffix(stem, s)));
    let images = [r?, n?, t?];
    let fg_mask = netpbm::load_mask(&with_suffix(stem, MASK_SUFFIX))?;
    if images.iter().any(|i| !i.same_extent(&images[0]))
        || (fg_mask.height(), fg_mask.width()) != (images[0].height(), images[0].width())
    {
        return Err(Error::dim(format!("{}: modality extents differ", stem.display())));
    }
    Ok(Sample {
        images,
        identity,
        camera,
        fg_mask,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory the record paths are relative to.
    pub root: PathBuf,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn new(root: PathBuf, records: Vec<Record>) -> Self {
        Manifest { root, records }
    }

    pub fn parse(root: PathBuf, text: &str) -> Result<Self> {
        let mut records = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let trimmed = line.trim();
            if !trimmed.is_empty() {
                let rec: Record = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
                    offset,
                    msg: format!("manifest record: {e}"),
                })?;
                records.push(rec);
            }
            offset += line.len();
        }
        Ok(Manifest { root, records })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Manifest::parse(root, &text)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serialises"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn load_record(&self, r: &Record) -> Result<Sample> {
        load_sample(&self.root.join(&r.path), r.id, r.camera)
    }

    /// Checks the retrieval protocol: query and gallery identities overlap
    /// and no training identity is held out.
    pub fn validate(&self) -> Result<()> {
        let ids = |s: Split| -> BTreeSet<usize> { self.split(s).iter().map(|r| r.id).collect() };
        let (train, query, gallery) = (ids(Split::Train), ids(Split::Query), ids(Split::Gallery));
        if query.is_disjoint(&gallery) {
            return Err(Error::config("query and gallery share no identity"));
        }
        if let Some(id) = train.iter().find(|i| query.contains(i) || gallery.contains(i)) {
            return Err(Error::config(format!("identity {id} is both trained on and held out")));
        }
        Ok(())
    }

    /// Record indices of a split grouped by identity.
    pub fn by_identity(&self, split: Split) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.split == split {
                out.entry(r.id).or_default().push(i);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let m = Manifest::new(
            PathBuf::from("x"),
            vec![
                Record { path: "a".into(), id: 0, camera: 1, split: Split::Train },
                Record { path: "b".into(), id: 4, camera: 0, split: Split::Query },
            ],
        );
        let text = m.to_jsonl();
        assert!(text.starts_with(r#"{"path":"a","id":0,"camera":1,"split":"train"}"#));
        assert_eq!(Manifest::parse(PathBuf::from("x"), &text).unwrap(), m);
    }

    #[test]
    fn bad_line_reports_offset() {
        let text = "{\"path\":\"a\",\"id\":0,\"camera\":0,\"split\":\"train\"}\n{oops}\n";
        match Manifest::parse(PathBuf::new(), text) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, text.find("{oops").unwrap()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn protocol_validation() {
        let rec = |id, split| Record { path: String::new(), id, camera: 0, split };
        let ok = Manifest::new(PathBuf::new(), vec![rec(0, Split::Train), rec(1, Split::Query), rec(1, Split::Gallery)]);
        assert!(ok.validate().is_ok());
        let leak = Manifest::new(PathBuf::new(), vec![rec(1, Split::Train), rec(1, Split::Query), rec(1, Split::Gallery)]);
        assert!(leak.validate().is_err());
        let disjoint = Manifest::new(PathBuf::new(), vec![rec(2, Split::Query), rec(1, Split::Gallery)]);
        assert!(disjoint.validate().is_err());
    }
}
