use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use super::lstsq;
use crate::model_spec::{BucketRequest, ResolutionBucket};

/// Candidate latent multipliers swept by [`calibrate`].
pub const K_RANGE: RangeInclusive<u32> = 2..=68;

const BUNDLED_TABLE: &str = include_str!("../../data/flops_table.json");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlopsRow {
    pub frames: u32,
    pub height: u32,
    pub width: u32,
    pub tflops: f64,
}

impl FlopsRow {
    pub fn request(&self) -> BucketRequest {
        BucketRequest::new(self.frames, self.height, self.width)
    }

    fn area_ratio(&self) -> f64 {
        (self.height as f64 * self.width as f64) / (256.0 * 256.0)
    }
}

/// Measured TFLOPs per sample for a set of resolutions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FlopsTable {
    pub rows: Vec<FlopsRow>,
}

impl FlopsTable {
    pub fn new(rows: Vec<FlopsRow>) -> Self {
        Self { rows }
    }

    /// The 7-row per-resolution table shipped in `data/flops_table.json`.
    pub fn bundled() -> Self {
        serde_json::from_str(BUNDLED_TABLE).expect("bundled FLOPs table parses")
    }

    pub fn get(&self, request: BucketRequest) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.request() == request)
            .map(|r| r.tflops)
    }

    /// Every entry positive; strictly increasing in frames at fixed resolution.
    pub fn validate(&self) -> Result<(), CalibrationError> {
        for r in &self.rows {
            if !(r.tflops > 0.0) || r.frames == 0 || r.height == 0 || r.width == 0 {
                return Err(CalibrationError::InvalidTable(format!(
                    "non-positive entry {}x{}x{} = {}",
                    r.frames, r.height, r.width, r.tflops
                )));
            }
        }
        for a in &self.rows {
            for b in &self.rows {
                if (a.height, a.width) == (b.height, b.width)
                    && a.frames < b.frames
                    && a.tflops >= b.tflops
                {
                    return Err(CalibrationError::InvalidTable(format!(
                        "TFLOPs not increasing with frames at {}x{}: {} frames -> {}, {} frames -> {}",
                        a.height, a.width, a.frames, a.tflops, b.frames, b.tflops
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Parameters of `F = c + a*r*f + b*(r*f)^2`.
///
/// `f` is the latent frame count and `r` the pixel area relative to 256x256.
/// Images carry one latent frame; a video bucket of `n * base_video_frames`
/// frames carries `n * latent_multiplier_k` latent frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostCoefficients {
    pub constant_c: f64,
    pub linear_a: f64,
    pub quad_b: f64,
    pub latent_multiplier_k: u32,
    #[serde(default = "default_base_frames")]
    pub base_video_frames: u32,
}

fn default_base_frames() -> u32 {
    68
}

impl CostCoefficients {
    pub fn predict(&self, latent_frames: u32, area_ratio: f64) -> f64 {
        sample_flops_raw(self, latent_frames as f64, area_ratio)
    }

    /// Prediction for a raw `(frames, height, width)` shape, using this
    /// fit's latent-frame rule.
    pub fn predict_request(&self, req: BucketRequest) -> Option<f64> {
        let f = latent_frames_for(req.frames, self.latent_multiplier_k, self.base_video_frames)?;
        let r = (req.height as f64 * req.width as f64) / 65536.0;
        Some(sample_flops_raw(self, f as f64, r))
    }
}

/// Latent frames of a `frames`-long bucket: 1 for images, `k` per base unit otherwise.
pub fn latent_frames_for(frames: u32, k: u32, base_video_frames: u32) -> Option<u32> {
    if frames == 1 {
        Some(1)
    } else if base_video_frames > 0 && frames % base_video_frames == 0 {
        Some(k * (frames / base_video_frames))
    } else {
        None
    }
}

pub fn sample_flops_raw(coeffs: &CostCoefficients, latent_frames: f64, area_ratio: f64) -> f64 {
    let x = area_ratio * latent_frames;
    coeffs.constant_c + coeffs.linear_a * x + coeffs.quad_b * x * x
}

/// TFLOPs for one sample of `bucket`.
pub fn sample_flops(coeffs: &CostCoefficients, bucket: &ResolutionBucket) -> f64 {
    sample_flops_raw(coeffs, bucket.latent_frames as f64, bucket.area_ratio())
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CalibrationError {
    #[error("invalid FLOPs table: {0}")]
    InvalidTable(String),
    #[error("calibration needs at least {needed} rows spanning 2 frame buckets, got {rows} rows over {buckets} buckets")]
    TooFewRows {
        needed: usize,
        rows: usize,
        buckets: usize,
    },
    #[error("row {frames} frames does not map onto base video bucket {base}")]
    UnmappedFrames { frames: u32, base: u32 },
    #[error("degenerate FLOPs table: design matrix is rank deficient{0}")]
    RankDeficient(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowResidual {
    pub frames: u32,
    pub height: u32,
    pub width: u32,
    pub measured: f64,
    pub predicted: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub coefficients: CostCoefficients,
    /// Residual sum of squares of the chosen fit, TFLOPs^2.
    pub rss: f64,
    pub max_rel_residual: f64,
    pub rows: Vec<RowResidual>,
    /// `(k, rss)` for every admissible candidate, ascending k.
    pub sweep: Vec<(u32, f64)>,
}

fn base_video_frames(table: &FlopsTable) -> Option<u32> {
    table.rows.iter().map(|r| r.frames).filter(|&f| f > 1).min()
}

/// Least-squares `(c, a, b)` for a fixed latent multiplier.
pub fn fit_coefficients(
    rows: &[FlopsRow],
    k: u32,
    base_video_frames: u32,
) -> Result<(CostCoefficients, f64), CalibrationError> {
    let mut design = Vec::with_capacity(rows.len());
    let mut y = Vec::with_capacity(rows.len());
    for row in rows {
        let f = latent_frames_for(row.frames, k, base_video_frames).ok_or(
            CalibrationError::UnmappedFrames {
                frames: row.frames,
                base: base_video_frames,
            },
        )?;
        let x = row.area_ratio() * f as f64;
        design.push([1.0, x, x * x]);
        y.push(row.tflops);
    }
    let (coef, rss) = lstsq::solve(&design, &y)
        .ok_or_else(|| CalibrationError::RankDeficient(format!(" at k={k}")))?;
    Ok((
        CostCoefficients {
            constant_c: coef[0],
            linear_a: coef[1],
            quad_b: coef[2],
            latent_multiplier_k: k,
            base_video_frames,
        },
        rss,
    ))
}

/// Sweeps every integer multiplier in [`K_RANGE`] and keeps the fit with
/// the smallest residual sum of squares among fits with non-negative
/// coefficients.
pub fn calibrate(table: &FlopsTable) -> Result<Calibration, CalibrationError> {
    table.validate()?;
    let mut buckets: Vec<u32> = table.rows.iter().map(|r| r.frames).collect();
    buckets.sort_unstable();
    buckets.dedup();
    if table.rows.len() < 4 || buckets.len() < 2 {
        return Err(CalibrationError::TooFewRows {
            needed: 4,
            rows: table.rows.len(),
            buckets: buckets.len(),
        });
    }
    let base = base_video_frames(table).ok_or_else(|| {
        CalibrationError::InvalidTable("table has no video rows".to_string())
    })?;

    let scale = table.rows.iter().fold(0.0f64, |m, r| m.max(r.tflops));
    let tol = -1e-9 * scale;
    let mut sweep = Vec::new();
    let mut best: Option<(CostCoefficients, f64)> = None;
    for k in K_RANGE {
        let (coeffs, rss) = match fit_coefficients(&table.rows, k, base) {
            Ok(fit) => fit,
            Err(CalibrationError::RankDeficient(_)) => continue,
            Err(e) => return Err(e),
        };
        if coeffs.constant_c < tol || coeffs.linear_a < tol || coeffs.quad_b < tol {
            continue;
        }
        sweep.push((k, rss));
        if best.as_ref().map_or(true, |(_, b)| rss < *b) {
            best = Some((coeffs, rss));
        }
    }
    let (mut coefficients, rss) = best.ok_or_else(|| CalibrationError::RankDeficient(String::new()))?;
    coefficients.constant_c = coefficients.constant_c.max(0.0);
    coefficients.linear_a = coefficients.linear_a.max(0.0);
    coefficients.quad_b = coefficients.quad_b.max(0.0);

    let rows: Vec<RowResidual> = table
        .rows
        .iter()
        .map(|r| {
            let predicted = coefficients
                .predict_request(r.request())
                .expect("rows validated during fit");
            RowResidual {
                frames: r.frames,
                height: r.height,
                width: r.width,
                measured: r.tflops,
                predicted,
                rel_error: (predicted - r.tflops).abs() / r.tflops,
            }
        })
        .collect();
    let max_rel_residual = rows.iter().fold(0.0f64, |m, r| m.max(r.rel_error));
    Ok(Calibration {
        coefficients,
        rss,
        max_rel_residual,
        rows,
        sweep,
    })
}
