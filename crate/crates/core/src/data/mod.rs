//! Dataset ingestion: manifests of frame directories, frame selection and
//! preprocessing, subject-disjoint folds and the synthetic generator.

mod folds;
mod frames;
mod synth;

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use folds::{make_folds, FoldPlan, Split};
pub use frames::{
    list_frames, load_clip, load_png, preprocess_frame, sample_frames, CropBox, RawImage,
};
pub use synth::{synth_generate, SynthConfig};

/// Class label: 0 = posed, 1 = spontaneous.
pub type Label = u8;

pub const POSED: Label = 0;
pub const SPONTANEOUS: Label = 1;

/// One manifest row as it appears on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub subject_id: String,
    pub label: u8,
    pub frame_dir: PathBuf,
    pub source_fps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<[u32; 4]>,
}

/// A labeled video whose frame directory has been resolved and counted.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub subject_id: String,
    pub label: Label,
    pub frame_dir: PathBuf,
    pub source_fps: f64,
    pub crop: Option<CropBox>,
    pub frame_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassCounts {
    pub spontaneous: usize,
    pub posed: usize,
    pub subjects: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    samples: Vec<VideoSample>,
}

impl Manifest {
    pub fn new(samples: Vec<VideoSample>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Data(format!("duplicate video id `{}`", s.id)));
            }
            if s.label > 1 {
                return Err(Error::Data(format!("video `{}` has label {}, expected 0 or 1", s.id, s.label)));
            }
            if !(s.source_fps.is_finite() && s.source_fps > 0.0) {
                return Err(Error::Data(format!("video `{}` has invalid source_fps {}", s.id, s.source_fps)));
            }
        }
        Ok(Self { samples })
    }

    /// Reads and validates a JSON manifest. Relative frame directories are
    /// resolved against the manifest's own directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut samples = Vec::with_capacity(entries.len());
        for e in entries {
            if e.label > 1 {
                return Err(Error::Data(format!("video `{}` has label {}, expected 0 or 1", e.id, e.label)));
            }
            let dir = base.join(&e.frame_dir);
            if !dir.is_dir() {
                return Err(Error::Data(format!(
                    "video `{}`: frame_dir {} does not exist",
                    e.id,
                    dir.display()
                )));
            }
            let crop = e.crop.map(CropBox::from_array).transpose().map_err(|err| {
                Error::Data(format!("video `{}`: {err}", e.id))
            })?;
            let frame_count = list_frames(&dir)?.len();
            samples.push(VideoSample {
                id: e.id,
                subject_id: e.subject_id,
                label: e.label,
                frame_dir: dir,
                source_fps: e.source_fps,
                crop,
                frame_count,
            });
        }
        Self::new(samples)
    }

    /// Writes the manifest with frame directories relative to `path`'s
    /// directory where possible.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        let entries: Vec<ManifestEntry> = self
            .samples
            .iter()
            .map(|s| ManifestEntry {
                id: s.id.clone(),
                subject_id: s.subject_id.clone(),
                label: s.label,
                frame_dir: s.frame_dir.strip_prefix(base).unwrap_or(&s.frame_dir).to_path_buf(),
                source_fps: s.source_fps,
                crop: s.crop.map(CropBox::to_array),
            })
            .collect();
        let mut text = serde_json::to_string_pretty(&entries).expect("manifest entries serialize");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn samples(&self) -> &[VideoSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn counts(&self) -> ClassCounts {
        let spontaneous = self.samples.iter().filter(|s| s.label == SPONTANEOUS).count();
        ClassCounts {
            spontaneous,
            posed: self.samples.len() - spontaneous,
            subjects: self.subjects().len(),
        }
    }

    /// Distinct subject ids in sorted order.
    pub fn subjects(&self) -> Vec<String> {
        self.samples
            .iter()
            .map(|s| s.subject_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// A manifest of the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Manifest {
        Manifest {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Copy with replaced labels, e.g. for label-permutation controls.
    pub fn with_labels(&self, labels: &[Label]) -> Result<Manifest> {
        if labels.len() != self.samples.len() {
            return Err(Error::Argument(format!(
                "{} labels for {} samples",
                labels.len(),
                self.samples.len()
            )));
        }
        let samples = self
            .samples
            .iter()
            .zip(labels)
            .map(|(s, &label)| VideoSample { label, ..s.clone() })
            .collect();
        Manifest::new(samples)
    }

    /// Rejects manifests that cannot train a binary classifier.
    pub fn require_both_classes(&self) -> Result<()> {
        let c = self.counts();
        if c.spontaneous == 0 || c.posed == 0 {
            return Err(Error::Data(format!(
                "training data needs both classes, found {} spontaneous and {} posed",
                c.spontaneous, c.posed
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_manifest(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("manifest.json");
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn two_sample_manifest_counts() {
        let tmp = tempfile::tempdir().unwrap();
        fs::create_dir_all(tmp.path().join("a")).unwrap();
        fs::create_dir_all(tmp.path().join("b")).unwrap();
        let p = write_manifest(
            tmp.path(),
            r#"[{"id":"a","subject_id":"s1","label":0,"frame_dir":"a","source_fps":25},
                {"id":"b","subject_id":"s2","label":1,"frame_dir":"b","source_fps":25,"crop":[0,0,4,4]}]"#,
        );
        let m = Manifest::load(&p).unwrap();
        assert_eq!(
            m.counts(),
            ClassCounts {
                spontaneous: 1,
                posed: 1,
                subjects: 2
            }
        );
        assert!(m.samples()[1].crop.is_some());
    }

    #[test]
    fn duplicate_id_is_named() {
        let tmp = tempfile::tempdir().unwrap();
        fs::create_dir_all(tmp.path().join("a")).unwrap();
        let p = write_manifest(
            tmp.path(),
            r#"[{"id":"clip7","subject_id":"s1","label":0,"frame_dir":"a","source_fps":25},
                {"id":"clip7","subject_id":"s1","label":1,"frame_dir":"a","source_fps":25}]"#,
        );
        let err = Manifest::load(&p).unwrap_err().to_string();
        assert!(err.contains("clip7"), "{err}");
    }

    #[test]
    fn bad_label_and_missing_dir() {
        let tmp = tempfile::tempdir().unwrap();
        fs::create_dir_all(tmp.path().join("a")).unwrap();
        let p = write_manifest(
            tmp.path(),
            r#"[{"id":"x","subject_id":"s1","label":2,"frame_dir":"a","source_fps":25}]"#,
        );
        assert!(matches!(Manifest::load(&p), Err(Error::Data(_))));
        let p = write_manifest(
            tmp.path(),
            r#"[{"id":"x","subject_id":"s1","label":1,"frame_dir":"nope","source_fps":25}]"#,
        );
        let err = Manifest::load(&p).unwrap_err().to_string();
        assert!(err.contains("nope"), "{err}");
        let p = write_manifest(tmp.path(), r#"[{"id":"x"}]"#);
        assert!(matches!(Manifest::load(&p), Err(Error::Json { .. })));
    }

    #[test]
    fn benchmark_sized_manifest_counts() {
        // 597 spontaneous and 643 posed videos over shared frame directories.
        let tmp = tempfile::tempdir().unwrap();
        fs::create_dir_all(tmp.path().join("v")).unwrap();
        let entries: Vec<ManifestEntry> = (0..1240)
            .map(|i| ManifestEntry {
                id: format!("vid{i:04}"),
                subject_id: format!("s{:03}", i % 400),
                label: u8::from(i < 597),
                frame_dir: "v".into(),
                source_fps: 50.0,
                crop: None,
            })
            .collect();
        let p = write_manifest(tmp.path(), &serde_json::to_string(&entries).unwrap());
        let c = Manifest::load(&p).unwrap().counts();
        assert_eq!((c.spontaneous, c.posed, c.subjects), (597, 643, 400));
    }

    #[test]
    fn save_then_load_preserves_samples() {
        let tmp = tempfile::tempdir().unwrap();
        fs::create_dir_all(tmp.path().join("clips/a")).unwrap();
        let m = Manifest::new(vec![VideoSample {
            id: "a".into(),
            subject_id: "s".into(),
            label: 1,
            frame_dir: tmp.path().join("clips/a"),
            source_fps: 29.97,
            crop: Some(CropBox { x: 1, y: 2, width: 3, height: 4 }),
            frame_count: 0,
        }])
        .unwrap();
        let p = tmp.path().join("m.json");
        m.save(&p).unwrap();
        assert!(fs::read_to_string(&p).unwrap().contains("\"clips/a\""));
        assert_eq!(Manifest::load(&p).unwrap(), m);
    }
}
