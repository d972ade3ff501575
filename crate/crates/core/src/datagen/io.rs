//! On-disk dataset: one directory per entry holding `video.ntv`, `masks.ntv`
//! and `meta.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetEntry, Relation, RelationSpec};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::mask::MaskSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab;

pub const FORMAT_VERSION: u32 = 1;

const MASK_NAMES: [&str; 6] = ["m_s1", "m_s2", "m_r", "latent_s1", "latent_s2", "latent_r"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub relation: String,
    pub prompt: Vec<usize>,
    pub spec: RelationSpec,
    pub format_version: u32,
}

fn entry_name(i: usize) -> String {
    format!("entry-{i:05}")
}

/// Writes `entries` under `dir`, creating it when missing.
pub fn write_dataset<S: Scalar>(entries: &[DatasetEntry<S>], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, e) in entries.iter().enumerate() {
        let sub = dir.join(entry_name(i));
        fs::create_dir_all(&sub).map_err(|err| Error::io(&sub, err))?;
        let mut video = Container::new();
        video.push_tensor("video", e.video.clone());
        video.write(&sub.join("video.ntv"))?;
        let m = &e.masks;
        let mut masks = Container::new();
        for (name, t) in MASK_NAMES.iter().zip([&m.m_s1, &m.m_s2, &m.m_r, &m.latent_s1, &m.latent_s2, &m.latent_r]) {
            masks.push_tensor(*name, t.clone());
        }
        masks.write(&sub.join("masks.ntv"))?;
        let meta = Meta { relation: e.relation.name().into(), prompt: e.prompt.clone(), spec: e.spec.clone(), format_version: FORMAT_VERSION };
        let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
        let path = sub.join("meta.json");
        fs::write(&path, json).map_err(|err| Error::io(&path, err))?;
    }
    Ok(())
}

/// Reads every entry directory under `dir` in name order. A directory with
/// no entries is an empty dataset.
pub fn read_dataset<S: Scalar>(dir: &Path) -> Result<Vec<DatasetEntry<S>>> {
    let listing = fs::read_dir(dir).map_err(|e| Error::dataset(dir.display().to_string(), e.to_string()))?;
    let mut subs = Vec::new();
    for item in listing {
        let item = item.map_err(|e| Error::dataset(dir.display().to_string(), e.to_string()))?;
        if item.path().is_dir() {
            subs.push(item.path());
        }
    }
    subs.sort();
    subs.iter().map(|p| read_entry(p)).collect()
}

fn read_entry<S: Scalar>(sub: &Path) -> Result<DatasetEntry<S>> {
    let name = sub.file_name().map_or_else(|| sub.display().to_string(), |n| n.to_string_lossy().into_owned());
    let fail = |what: &str, e: Error| Error::dataset(name.clone(), format!("{what}: {e}"));
    let invalid = |msg: String| Error::Validation(format!("{name}: {msg}"));

    let text = fs::read_to_string(sub.join("meta.json")).map_err(|e| fail("meta.json", Error::io(sub.join("meta.json"), e)))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::dataset(name.clone(), format!("meta.json: {e}")))?;
    let video = Container::<S>::read(&sub.join("video.ntv")).map_err(|e| fail("video.ntv", e))?;
    let masks = Container::<S>::read(&sub.join("masks.ntv")).map_err(|e| fail("masks.ntv", e))?;

    if meta.format_version != FORMAT_VERSION {
        return Err(invalid(format!("format_version {} is not {FORMAT_VERSION}", meta.format_version)));
    }
    let relation = Relation::parse(&meta.relation).map_err(|e| invalid(e.to_string()))?;
    if relation != meta.spec.relation {
        return Err(invalid(format!("relation `{relation}` disagrees with spec relation `{}`", meta.spec.relation)));
    }
    let decoded = vocab::decode(&meta.prompt).map_err(|e| invalid(e.to_string()))?;
    if decoded != meta.spec.prompt() {
        return Err(invalid(format!("prompt `{decoded}` does not match spec `{}`", meta.spec.prompt())));
    }
    let video = video.tensor("video").cloned().ok_or_else(|| invalid("video.ntv has no `video` tensor".into()))?;
    if masks.len() != MASK_NAMES.len() {
        return Err(invalid(format!("masks.ntv holds {} tensors, expected {}", masks.len(), MASK_NAMES.len())));
    }
    let get = |n: &str| -> Result<Tensor<S>> { masks.tensor(n).cloned().ok_or_else(|| invalid(format!("masks.ntv lacks `{n}`"))) };
    let set = MaskSet {
        m_s1: get("m_s1")?,
        m_s2: get("m_s2")?,
        m_r: get("m_r")?,
        latent_s1: get("latent_s1")?,
        latent_s2: get("latent_s2")?,
        latent_r: get("latent_r")?,
    };
    let vs = video.shape();
    if vs.len() != 4 || [&set.m_s1, &set.m_s2, &set.m_r].iter().any(|m| m.shape() != &vs[..3]) {
        return Err(invalid(format!("video {vs:?} and pixel masks {:?} disagree", set.m_s1.shape())));
    }
    Ok(DatasetEntry { video, masks: set, prompt: meta.prompt, relation, spec: meta.spec })
}

#[cfg(test)]
mod tests {
    use super::super::{gen_video, VideoShape};
    use super::*;

    fn entries(n: u64) -> Vec<DatasetEntry<f64>> {
        (0..n).map(|s| gen_video(&RelationSpec::sample(Relation::ALL[s as usize % 5], s).unwrap(), &VideoShape::default()).unwrap()).collect()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let e = entries(5);
        write_dataset(&e, dir.path()).unwrap();
        assert_eq!(read_dataset::<f64>(dir.path()).unwrap(), e);
        let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("entry-00000/meta.json")).unwrap()).unwrap();
        assert_eq!(meta["format_version"], 1);
        assert_eq!(meta["relation"], "approach");
    }

    #[test]
    fn empty_directory_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_dataset::<f64>(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn bad_entries_are_named() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&entries(2), dir.path()).unwrap();
        fs::remove_file(dir.path().join("entry-00001/video.ntv")).unwrap();
        match read_dataset::<f64>(dir.path()) {
            Err(Error::Dataset { entry, .. }) => assert_eq!(entry, "entry-00001"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn meta_mismatch_is_validation() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&entries(1), dir.path()).unwrap();
        let path = dir.path().join("entry-00000/meta.json");
        let text = fs::read_to_string(&path).unwrap().replacen("\"relation\": \"approach\"", "\"relation\": \"orbit\"", 1);
        fs::write(&path, text).unwrap();
        assert!(matches!(read_dataset::<f64>(dir.path()), Err(Error::Validation(_))));

        write_dataset(&entries(1), dir.path()).unwrap();
        let mut masks = Container::<f64>::read(&dir.path().join("entry-00000/masks.ntv")).unwrap();
        masks.push_tensor("extra", Tensor::zeros(&[1]));
        masks.write(&dir.path().join("entry-00000/masks.ntv")).unwrap();
        let err = read_dataset::<f64>(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)) && err.to_string().contains("7 tensors"), "{err}");
    }
}
