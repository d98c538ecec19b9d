use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::bucket::{bucketize, Aspect, BucketConfig, Clip};
use super::coarse::batch_floor;
use super::pad::{greedy_pad, image_budget};
use super::BalanceError;
use crate::cost_model::{CostCoefficients, FlopsTable};
use crate::model_spec::BucketRequest;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalancerConfig {
    /// Target FLOPs per batch.
    pub f_target: f64,
    pub alpha: f64,
    /// Images added per cached video sample.
    pub beta: f64,
    /// Video batches cached before each padding round.
    pub cache_n: usize,
    pub image_flops: f64,
}

/// One line of a clip manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub frames: u32,
    pub height: u32,
    pub width: u32,
    pub source_url: String,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionPlan {
    pub resolution: BucketRequest,
    pub aspect: Aspect,
    pub tflops_per_sample: f64,
    pub batch_size: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedBatch {
    pub batch_id: usize,
    pub resolution: BucketRequest,
    pub clip_ids: Vec<String>,
    pub image_ids: Vec<String>,
    pub base_flops: f64,
    pub images_added: u64,
    pub final_flops: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub per_resolution: Vec<ResolutionPlan>,
    pub padded_batches: Vec<PlannedBatch>,
    /// Images the padding rounds asked for but the stream had not supplied yet.
    pub image_shortfall: u64,
    pub unused_image_ids: Vec<String>,
}

/// Streaming planner over manifest records.
///
/// Owns mutable cache state and is meant to live on a single thread.
pub struct Planner {
    cfg: BalancerConfig,
    buckets: BucketConfig,
    table: FlopsTable,
    coefficients: CostCoefficients,
    resolutions: BTreeMap<BucketRequest, ResolutionPlan>,
    open: BTreeMap<BucketRequest, Vec<String>>,
    cache: Vec<(BucketRequest, Vec<String>)>,
    images: VecDeque<String>,
    done: Vec<PlannedBatch>,
    shortfall: u64,
}

impl Planner {
    pub fn new(
        cfg: BalancerConfig,
        buckets: BucketConfig,
        table: FlopsTable,
        coefficients: CostCoefficients,
    ) -> Result<Self, BalanceError> {
        if !(cfg.alpha > 0.0) {
            return Err(BalanceError::BadAlpha(cfg.alpha));
        }
        if !(cfg.beta >= 0.0) {
            return Err(BalanceError::BadBeta(cfg.beta));
        }
        Ok(Self {
            cfg: BalancerConfig {
                cache_n: cfg.cache_n.max(1),
                ..cfg
            },
            buckets,
            table,
            coefficients,
            resolutions: BTreeMap::new(),
            open: BTreeMap::new(),
            cache: Vec::new(),
            images: VecDeque::new(),
            done: Vec::new(),
            shortfall: 0,
        })
    }

    /// Config whose target and image cost come from the table (or the fit
    /// where the table lacks a row).
    pub fn config_for_target(
        table: &FlopsTable,
        coefficients: &CostCoefficients,
        target: BucketRequest,
        alpha: f64,
        beta: f64,
        cache_n: usize,
    ) -> Result<BalancerConfig, BalanceError> {
        let lookup = |req: BucketRequest| {
            table
                .get(req)
                .or_else(|| coefficients.predict_request(req))
                .ok_or_else(|| BalanceError::MissingTarget(req.to_string()))
        };
        Ok(BalancerConfig {
            f_target: lookup(target)?,
            alpha,
            beta,
            cache_n,
            image_flops: lookup(BucketRequest::new(1, target.height, target.width))?,
        })
    }

    fn sample_tflops(&self, req: BucketRequest) -> Option<f64> {
        self.table
            .get(req)
            .or_else(|| self.coefficients.predict_request(req))
    }

    pub fn push(&mut self, record: &ManifestRecord) -> Result<(), BalanceError> {
        let bad = |reason: String| BalanceError::BadRecord {
            id: record.id.clone(),
            reason,
        };
        let clip = Clip {
            frames: record.frames,
            height: record.height,
            width: record.width,
        };
        let (frame_bucket, aspect) = bucketize(clip, &self.buckets).map_err(|e| bad(e.to_string()))?;
        if frame_bucket == 1 {
            self.images.push_back(record.id.clone());
            return Ok(());
        }
        let resolution = BucketRequest::new(frame_bucket, record.height, record.width);
        if !self.resolutions.contains_key(&resolution) {
            let tflops = self
                .sample_tflops(resolution)
                .ok_or_else(|| bad(format!("no FLOPs estimate for {resolution}")))?;
            let batch_size = batch_floor(self.cfg.f_target, self.cfg.alpha, tflops);
            if batch_size == 0 {
                return Err(BalanceError::AlphaTooLarge {
                    resolution: resolution.to_string(),
                    tflops,
                    target: self.cfg.f_target,
                    alpha: self.cfg.alpha,
                });
            }
            self.resolutions.insert(
                resolution,
                ResolutionPlan {
                    resolution,
                    aspect,
                    tflops_per_sample: tflops,
                    batch_size,
                },
            );
        }
        let batch_size = self.resolutions[&resolution].batch_size as usize;
        let open = self.open.entry(resolution).or_default();
        open.push(record.id.clone());
        if open.len() >= batch_size {
            let ids = std::mem::take(open);
            self.seal(resolution, ids);
        }
        Ok(())
    }

    fn seal(&mut self, resolution: BucketRequest, ids: Vec<String>) {
        self.cache.push((resolution, ids));
        if self.cache.len() >= self.cfg.cache_n {
            self.flush_cache();
        }
    }

    fn flush_cache(&mut self) {
        if self.cache.is_empty() {
            return;
        }
        let cached = std::mem::take(&mut self.cache);
        let bases: Vec<f64> = cached
            .iter()
            .map(|(res, ids)| self.resolutions[res].tflops_per_sample * ids.len() as f64)
            .collect();
        let counts: Vec<u64> = cached.iter().map(|(_, ids)| ids.len() as u64).collect();
        let wanted = image_budget(&counts, self.cfg.beta).expect("beta validated");
        let available = wanted.min(self.images.len() as u64);
        self.shortfall += wanted - available;
        let padded = greedy_pad(&bases, available, self.cfg.image_flops);

        let mut image_ids: Vec<Vec<String>> = vec![Vec::new(); cached.len()];
        for &batch in &padded.trace {
            let id = self.images.pop_front().expect("available images counted");
            image_ids[batch].push(id);
        }
        for (((resolution, clip_ids), pad), images) in
            cached.into_iter().zip(padded.batches).zip(image_ids)
        {
            self.done.push(PlannedBatch {
                batch_id: self.done.len(),
                resolution,
                clip_ids,
                image_ids: images,
                base_flops: pad.base_flops,
                images_added: pad.images_added,
                final_flops: pad.final_flops,
            });
        }
    }

    /// Seals partially filled batches, pads whatever is cached, returns the plan.
    pub fn finish(mut self) -> BatchPlan {
        let open = std::mem::take(&mut self.open);
        for (resolution, ids) in open {
            if !ids.is_empty() {
                self.cache.push((resolution, ids));
                if self.cache.len() >= self.cfg.cache_n {
                    self.flush_cache();
                }
            }
        }
        self.flush_cache();
        BatchPlan {
            per_resolution: self.resolutions.into_values().collect(),
            padded_batches: self.done,
            image_shortfall: self.shortfall,
            unused_image_ids: self.images.into_iter().collect(),
        }
    }
}
