//! Where face boxes come from. The default reads them from the manifest;
//! an external detector can be plugged in through [`FaceDetector`].

use image::RgbImage;

use super::geometry::{downscale_for_detection, rescale_box};
use super::manifest::{BBox, FrameEntry, Manifest, VideoRecord};
use crate::error::{CoreError, Result};

pub trait FaceProvider {
    /// Boxes in original-frame pixels for one frame entry.
    fn boxes(&self, manifest: &Manifest, record: &VideoRecord, frame: &FrameEntry) -> Result<Vec<BBox>>;
}

/// Uses the boxes stored with each frame entry.
#[derive(Clone, Copy, Debug, Default)]
pub struct ManifestFaces;

impl FaceProvider for ManifestFaces {
    fn boxes(&self, _: &Manifest, _: &VideoRecord, frame: &FrameEntry) -> Result<Vec<BBox>> {
        Ok(frame.boxes.clone())
    }
}

pub trait FaceDetector {
    fn detect(&self, frame: &RgbImage) -> Result<Vec<BBox>>;
}

/// Runs a detector on a downscaled copy of each frame and maps its boxes
/// back to full resolution.
#[derive(Clone, Debug)]
pub struct DownscaledDetector<D> {
    pub detector: D,
    pub factor: u32,
}

impl<D: FaceDetector> FaceProvider for DownscaledDetector<D> {
    fn boxes(&self, manifest: &Manifest, _: &VideoRecord, frame: &FrameEntry) -> Result<Vec<BBox>> {
        let image = load_image(manifest, &frame.image)?;
        let small = downscale_for_detection(&image, self.factor)?;
        Ok(self.detector.detect(&small)?.iter().map(|b| rescale_box(b, self.factor)).collect())
    }
}

pub fn load_image(manifest: &Manifest, image: &str) -> Result<RgbImage> {
    let path = manifest.resolve(image);
    let img = image::open(&path).map_err(|source| match source {
        image::ImageError::IoError(e) => CoreError::io(&path, e),
        source => CoreError::Image { path: path.clone(), source },
    })?;
    Ok(img.into_rgb8())
}
