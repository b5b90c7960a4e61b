//! On-disk dataset container.
//!
//! ```text
//! root/index.json
//! root/clips/<id>/f<k>.png   frame k of the clip (f0 is the reference)
//! root/clips/<id>/ann.json   annotation of f0: joint name -> [x, y]
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::scene::{render_clip, Clip, SceneConfig};
use crate::annotation::Annotation;
use crate::error::{Error, Result};
use crate::image_ops::Image;

pub const INDEX_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub split: Split,
    /// Frame numbers stored for this clip, parallel to `frames`.
    pub offsets: Vec<usize>,
    /// Paths relative to the dataset root.
    pub frames: Vec<String>,
    pub annotation: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexFile {
    pub version: u32,
    /// Default motion-feature frame offset.
    pub delta: usize,
    pub scene: SceneConfig,
    pub samples: Vec<SampleRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub record: SampleRecord,
    pub annotation: Annotation,
}

/// A validated dataset with annotations loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub delta: usize,
    pub scene: SceneConfig,
    pub samples: Vec<Sample>,
}

impl DatasetIndex {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples
            .iter()
            .filter(|s| s.record.split == split)
            .collect()
    }

    pub fn frame_path(&self, sample: &Sample, offset: usize) -> Result<PathBuf> {
        let i = sample
            .record
            .offsets
            .iter()
            .position(|&o| o == offset)
            .ok_or_else(|| {
                Error::invalid(format!("clip {} has no frame {offset}", sample.record.id))
            })?;
        Ok(self.root.join(&sample.record.frames[i]))
    }

    pub fn frame(&self, sample: &Sample, offset: usize) -> Result<Image> {
        let p = self.frame_path(sample, offset)?;
        Image::read_png(&p).map_err(|e| Error::Dataset {
            path: p,
            detail: e.to_string(),
        })
    }

    /// Reference frame and the frame `delta` later.
    pub fn frame_pair(&self, sample: &Sample, delta: usize) -> Result<(Image, Image)> {
        Ok((self.frame(sample, 0)?, self.frame(sample, delta)?))
    }
}

/// Yields `train + test` clips rendered at `offsets`; the first `train`
/// clips are the training split. Clips are rendered lazily.
pub fn generate_dataset<'a>(
    cfg: &'a SceneConfig,
    train: usize,
    test: usize,
    offsets: &'a [usize],
) -> impl Iterator<Item = Result<(Clip, Split)>> + 'a {
    (0..train + test).map(move |i| {
        let split = if i < train { Split::Train } else { Split::Test };
        render_clip(cfg, i, offsets).map(|c| (clip_checked(c), split))
    })
}

fn clip_checked(c: Clip) -> Clip {
    debug_assert_eq!(c.offsets.first(), Some(&0));
    c
}

fn dataset_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Writes clips and `index.json` under `root`. `delta` must be one of the
/// stored frame offsets.
pub fn write_dataset(
    clips: impl IntoIterator<Item = Result<(Clip, Split)>>,
    root: &Path,
    delta: usize,
    scene: &SceneConfig,
) -> Result<IndexFile> {
    fs::create_dir_all(root.join("clips")).map_err(|e| Error::io(root, e))?;
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for item in clips {
        let (clip, split) = item?;
        if !seen.insert(clip.id.clone()) {
            return Err(Error::invalid(format!("duplicate clip id {}", clip.id)));
        }
        if !clip.offsets.contains(&delta) {
            return Err(Error::invalid(format!(
                "clip {} lacks frame {delta}",
                clip.id
            )));
        }
        let rel = format!("clips/{}", clip.id);
        let dir = root.join(&rel);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut frames = Vec::new();
        for (k, img) in clip.offsets.iter().zip(&clip.frames) {
            let name = format!("{rel}/f{k}.png");
            img.write_png(&root.join(&name))?;
            frames.push(name);
        }
        let ann = format!("{rel}/ann.json");
        let ann_path = root.join(&ann);
        fs::write(
            &ann_path,
            serde_json::to_string_pretty(&clip.annotations[0])?,
        )
        .map_err(|e| Error::io(&ann_path, e))?;
        samples.push(SampleRecord {
            id: clip.id.clone(),
            split,
            offsets: clip.offsets.clone(),
            frames,
            annotation: ann,
        });
    }
    let index = IndexFile {
        version: INDEX_VERSION,
        delta,
        scene: scene.clone(),
        samples,
    };
    let p = root.join("index.json");
    fs::write(&p, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&p, e))?;
    Ok(index)
}

/// Loads and validates `root/index.json`: every referenced file exists,
/// annotations parse, ids are unique and `delta` is stored for every clip.
pub fn read_dataset(root: &Path) -> Result<DatasetIndex> {
    let p = root.join("index.json");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let index: IndexFile =
        serde_json::from_str(&text).map_err(|e| dataset_err(&p, e.to_string()))?;
    if index.version != INDEX_VERSION {
        return Err(Error::Version {
            found: index.version,
            expected: INDEX_VERSION,
        });
    }
    let mut seen = HashSet::new();
    let mut samples = Vec::with_capacity(index.samples.len());
    for rec in index.samples {
        if !seen.insert(rec.id.clone()) {
            return Err(dataset_err(&p, format!("clip id {} listed twice", rec.id)));
        }
        if rec.offsets.len() != rec.frames.len() || rec.offsets.first() != Some(&0) {
            return Err(dataset_err(
                &p,
                format!("clip {} has inconsistent frame offsets", rec.id),
            ));
        }
        if !rec.offsets.contains(&index.delta) {
            return Err(dataset_err(
                &p,
                format!("clip {} lacks frame {}", rec.id, index.delta),
            ));
        }
        for f in &rec.frames {
            let fp = root.join(f);
            if !fp.is_file() {
                return Err(dataset_err(&fp, "missing frame"));
            }
        }
        let ap = root.join(&rec.annotation);
        let text = fs::read_to_string(&ap).map_err(|e| dataset_err(&ap, e.to_string()))?;
        let annotation: Annotation =
            serde_json::from_str(&text).map_err(|e| dataset_err(&ap, e.to_string()))?;
        samples.push(Sample {
            record: rec,
            annotation,
        });
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        delta: index.delta,
        scene: index.scene,
        samples,
    })
}
