use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model_spec::DEFAULT_FRAME_BUCKETS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aspect {
    Landscape,
    Portrait,
    Square,
}

impl fmt::Display for Aspect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aspect::Landscape => "landscape",
            Aspect::Portrait => "portrait",
            Aspect::Square => "square",
        })
    }
}

/// Clip shape as found in a manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clip {
    pub frames: u32,
    pub height: u32,
    pub width: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BucketConfig {
    /// Ascending frame buckets.
    pub frame_buckets: Vec<u32>,
    /// Canonical height/width ratio of each aspect bucket.
    pub landscape_ratio: f64,
    pub portrait_ratio: f64,
    pub square_ratio: f64,
}

impl Default for BucketConfig {
    fn default() -> Self {
        Self {
            frame_buckets: DEFAULT_FRAME_BUCKETS.to_vec(),
            landscape_ratio: 9.0 / 16.0,
            portrait_ratio: 16.0 / 9.0,
            square_ratio: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BucketError {
    #[error("clip has {frames} frames, shorter than the smallest bucket {smallest}")]
    TooShort { frames: u32, smallest: u32 },
    #[error("clip has zero height or width")]
    EmptyFrame,
}

/// Frame bucket (largest configured bucket not above the clip length) and the
/// aspect bucket whose canonical ratio is closest in log space.
pub fn bucketize(clip: Clip, cfg: &BucketConfig) -> Result<(u32, Aspect), BucketError> {
    if clip.height == 0 || clip.width == 0 {
        return Err(BucketError::EmptyFrame);
    }
    let frame_bucket = cfg
        .frame_buckets
        .iter()
        .copied()
        .filter(|&b| b <= clip.frames)
        .max()
        .ok_or(BucketError::TooShort {
            frames: clip.frames,
            smallest: cfg.frame_buckets.iter().copied().min().unwrap_or(0),
        })?;
    let ratio = (clip.height as f64 / clip.width as f64).ln();
    let candidates = [
        (Aspect::Landscape, cfg.landscape_ratio),
        (Aspect::Portrait, cfg.portrait_ratio),
        (Aspect::Square, cfg.square_ratio),
    ];
    let aspect = candidates
        .iter()
        .min_by(|a, b| {
            let da = (ratio - a.1.ln()).abs();
            let db = (ratio - b.1.ln()).abs();
            da.total_cmp(&db)
        })
        .map(|c| c.0)
        .expect("three candidates");
    Ok((frame_bucket, aspect))
}
