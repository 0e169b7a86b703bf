//! Synthetic multi-scanner slides with pixel-exact correspondences.
//!
//! A [`VirtualSlide`] holds one base image and its class mask. Every scanner
//! domain is a deterministic rendering of the same base image through a
//! [`ScannerProfile`], so the mask applies verbatim to all renderings.

mod image_io;
mod manifest;
mod normalize;
mod sampling;
mod scanner;
mod slide;

pub use image_io::{read_pgm, write_pgm, write_ppm};
pub use manifest::{Dataset, DatasetManifest, SlideEntry, SplitSpec, MANIFEST_VERSION};
pub use normalize::{normalize, zscore_stats, ZScoreStats};
pub use sampling::{
    extract_patch, patch_quotas, sample_locations, sample_patches, PatchLocation, PatchSample, SamplingConfig,
    SlideIndex,
};
pub use scanner::{render_domain, ScannerProfile};
pub use slide::{generate_slide, label_background, Grayscale, Mask, VirtualSlide, BACKGROUND_THRESHOLD};

/// Class ids used throughout the pipeline.
pub mod class {
    pub const BACKGROUND: u8 = 0;
    pub const TUMOR: u8 = 1;
    pub const NON_TUMOR: u8 = 2;
}

/// Derives an independent 64-bit seed from a parent seed and a stream tag.
pub fn derive_seed(parent: u64, tag: &str, index: u64) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
