//! Dataset manifests, face-track construction and the synthetic generator.

pub mod generator;
pub mod geometry;
pub mod manifest;
pub mod provider;
pub mod sampler;
pub mod track;

pub use generator::{generate_synthetic_dataset, GeneratorConfig, NuisanceConfig, MANIFEST_FILE};
pub use geometry::{crop_face, downscale_for_detection, patches_to_tensor, rescale_box, sample_frames, Patch};
pub use manifest::{BBox, FrameEntry, Label, Manifest, Split, VideoRecord};
pub use provider::{DownscaledDetector, FaceDetector, FaceProvider, ManifestFaces};
pub use sampler::BalancedSampler;
pub use track::{build_track, crop_track, detect_faces, Detection, FacePatch, FaceTrack, TrackConfig};
