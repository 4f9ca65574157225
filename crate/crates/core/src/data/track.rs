//! Face tracks: the per-video sequence of cropped face patches.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use afw_tensor::{Real, Tensor};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::geometry::{crop_face, patches_to_tensor, sample_frames, Patch};
use super::manifest::{BBox, Label, Manifest, VideoRecord};
use super::provider::{load_image, FaceProvider};
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackConfig {
    /// Take one frame in every `stride`.
    pub stride: usize,
    /// Pixels added around each box before cropping.
    pub margin: f64,
    /// Side of the resized patch.
    pub patch_side: usize,
}

impl Default for TrackConfig {
    fn default() -> Self {
        TrackConfig { stride: 10, margin: 20.0, patch_side: 64 }
    }
}

impl TrackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.patch_side == 0 {
            return Err(CoreError::config("track stride and patch side must be positive"));
        }
        if !(self.margin >= 0.0) {
            return Err(CoreError::config("crop margin must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub frame_index: usize,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FacePatch {
    /// Frame the pixels were taken from.
    pub frame_index: usize,
    pub bbox: BBox,
    pub patch: Patch,
}

/// Face patches ordered by (frame index, box x). Several faces in one
/// frame share its index, so indices are non-decreasing.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceTrack {
    pub video_id: String,
    pub label: Label,
    pub faces: Vec<FacePatch>,
}

impl FaceTrack {
    pub fn len(&self) -> usize {
        self.faces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn frame_indices(&self) -> Vec<usize> {
        self.faces.iter().map(|f| f.frame_index).collect()
    }

    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        patches_to_tensor(self.faces.iter().map(|f| &f.patch))
    }

    pub fn flipped(&self) -> FaceTrack {
        FaceTrack { faces: self.faces.iter().map(|f| FacePatch { patch: f.patch.flipped(), ..f.clone() }).collect(), ..self.clone() }
    }
}

/// Boxes on the sampled frames, ordered by (frame index, x).
pub fn detect_faces(manifest: &Manifest, record: &VideoRecord, provider: &dyn FaceProvider, cfg: &TrackConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for idx in sample_frames(record.total_frames, cfg.stride) {
        let frame = record
            .frame(idx)
            .ok_or_else(|| CoreError::data(format!("video `{}` has no entry for sampled frame {idx}", record.video_id)))?;
        let mut boxes = provider.boxes(manifest, record, frame)?;
        boxes.sort_by(|a, b| a.x.total_cmp(&b.x));
        out.extend(boxes.into_iter().map(|bbox| Detection { frame_index: idx, bbox }));
    }
    Ok(out)
}

/// Frame actually read for a detection at `frame` shifted by `offset`:
/// clamped to the video, then moved back toward `frame` until an entry
/// exists in the manifest.
pub fn shifted_frame(record: &VideoRecord, frame: usize, offset: i64) -> usize {
    let last = record.total_frames as i64 - 1;
    let mut t = (frame as i64 + offset).clamp(0, last);
    let step = if t > frame as i64 { -1 } else { 1 };
    while t != frame as i64 && record.frame(t as usize).is_none() {
        t += step;
    }
    t as usize
}

/// Crops every detection from the frame `offset` away, reusing the box.
pub fn crop_track(
    manifest: &Manifest,
    record: &VideoRecord,
    detections: &[Detection],
    cfg: &TrackConfig,
    offset: i64,
) -> Result<FaceTrack> {
    cfg.validate()?;
    let mut frames: BTreeMap<usize, RgbImage> = BTreeMap::new();
    let mut faces = Vec::with_capacity(detections.len());
    for d in detections {
        let src = shifted_frame(record, d.frame_index, offset);
        let frame = match frames.entry(src) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => {
                let entry = record.frame(src).ok_or_else(|| CoreError::data(format!("video `{}` has no frame {src}", record.video_id)))?;
                e.insert(load_image(manifest, &entry.image)?)
            }
        };
        let patch = crop_face(frame, &d.bbox, cfg.margin, cfg.patch_side)?;
        faces.push(FacePatch { frame_index: src, bbox: d.bbox, patch });
    }
    Ok(FaceTrack { video_id: record.video_id.clone(), label: record.label, faces })
}

/// Detects faces on the sampled frames and crops them. The track is empty
/// when no face was found.
pub fn build_track(manifest: &Manifest, record: &VideoRecord, provider: &dyn FaceProvider, cfg: &TrackConfig) -> Result<FaceTrack> {
    let detections = detect_faces(manifest, record, provider, cfg)?;
    crop_track(manifest, record, &detections, cfg, 0)
}
