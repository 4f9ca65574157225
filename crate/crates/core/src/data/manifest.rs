//! Dataset index.
//!
//! One JSON object per line; blank lines and lines starting with `#` are
//! ignored:
//!
//! ```text
//! {"video_id":"v0001","label":"fake","split":"train","total_frames":300,
//!  "frames":[{"frame_index":0,"image":"frames/v0001/0000.png","boxes":[[44,40,40,40]]}, ...]}
//! ```
//!
//! `label` is `real` or `fake`, `split` is `train`, `val` or `test`. Boxes
//! are `[x, y, w, h]` in original-frame pixels with `w, h > 0`. Image paths
//! are relative to the manifest's directory unless absolute. Frame entries
//! need not cover every frame of the video, but their indices must be
//! strictly increasing and below `total_frames`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    /// 1.0 for fake, 0.0 for real.
    pub fn target(self) -> f64 {
        match self {
            Label::Real => 0.0,
            Label::Fake => 1.0,
        }
    }

    pub fn class_index(self) -> usize {
        self.target() as usize
    }

    pub fn is_fake(self) -> bool {
        self == Label::Fake
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| CoreError::data(format!("unknown split `{s}` (expected train, val or test)")))
    }
}

/// Axis-aligned box `(x, y, w, h)`, serialized as a 4-element array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox { x: v[0], y: v[1], w: v[2], h: v[3] }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }

    pub fn scaled(&self, factor: f64) -> BBox {
        BBox::new(self.x * factor, self.y * factor, self.w * factor, self.h * factor)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub frame_index: usize,
    pub image: String,
    #[serde(default)]
    pub boxes: Vec<BBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoRecord {
    pub video_id: String,
    pub label: Label,
    pub split: Split,
    pub total_frames: usize,
    pub frames: Vec<FrameEntry>,
}

impl VideoRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.video_id.is_empty() {
            return Err("empty video_id".into());
        }
        if self.total_frames == 0 {
            return Err("total_frames must be at least 1".into());
        }
        let mut prev: Option<usize> = None;
        for f in &self.frames {
            if f.frame_index >= self.total_frames {
                return Err(format!("frame_index {} is not below total_frames {}", f.frame_index, self.total_frames));
            }
            if prev.is_some_and(|p| f.frame_index <= p) {
                return Err(format!("frame_index {} out of order", f.frame_index));
            }
            if let Some(b) = f.boxes.iter().find(|b| !b.is_valid()) {
                return Err(format!("frame {}: invalid box {:?}", f.frame_index, <[f64; 4]>::from(*b)));
            }
            prev = Some(f.frame_index);
        }
        Ok(())
    }

    pub fn frame(&self, index: usize) -> Option<&FrameEntry> {
        self.frames.binary_search_by_key(&index, |f| f.frame_index).ok().map(|i| &self.frames[i])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    root: PathBuf,
    records: Vec<VideoRecord>,
    index: BTreeMap<String, usize>,
}

impl Manifest {
    /// Validates the records; `root` resolves relative image paths.
    pub fn new(root: impl Into<PathBuf>, records: Vec<VideoRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(CoreError::Manifest("empty manifest".into()));
        }
        let mut index = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            r.validate().map_err(|msg| CoreError::Manifest(format!("video `{}`: {msg}", r.video_id)))?;
            if index.insert(r.video_id.clone(), i).is_some() {
                return Err(CoreError::Manifest(format!("duplicate video_id `{}`", r.video_id)));
            }
        }
        Ok(Manifest { root: root.into(), records, index })
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let rec: VideoRecord = serde_json::from_str(t).map_err(|e| CoreError::ManifestRow { line: line_no, msg: e.to_string() })?;
            rec.validate().map_err(|msg| CoreError::ManifestRow { line: line_no, msg })?;
            if !seen.insert(rec.video_id.clone()) {
                return Err(CoreError::ManifestRow { line: line_no, msg: format!("duplicate video_id `{}`", rec.video_id) });
            }
            records.push(rec);
        }
        Manifest::new(root, records)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Manifest::parse(&text, root)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| CoreError::io(path, e))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[VideoRecord] {
        &self.records
    }

    pub fn get(&self, video_id: &str) -> Option<&VideoRecord> {
        self.index.get(video_id).map(|&i| &self.records[i])
    }

    pub fn split(&self, split: Split) -> Vec<&VideoRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// `(real, fake)` counts in a split.
    pub fn class_counts(&self, split: Split) -> (usize, usize) {
        self.records.iter().filter(|r| r.split == split).fold((0, 0), |(r, f), v| if v.label.is_fake() { (r, f + 1) } else { (r + 1, f) })
    }

    pub fn resolve(&self, image: &str) -> PathBuf {
        let p = Path::new(image);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}
