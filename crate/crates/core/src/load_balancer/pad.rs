use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use super::BalanceError;

pub const BRUTE_FORCE_MAX_BATCHES: usize = 6;
pub const BRUTE_FORCE_MAX_IMAGES: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PaddedBatch {
    pub batch_id: usize,
    pub base_flops: f64,
    pub images_added: u64,
    pub final_flops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PadResult {
    pub batches: Vec<PaddedBatch>,
    /// Batch id receiving each image, in allocation order.
    pub trace: Vec<usize>,
}

impl PadResult {
    pub fn max_load(&self) -> f64 {
        self.batches.iter().fold(f64::NEG_INFINITY, |m, b| m.max(b.final_flops))
    }

    pub fn min_load(&self) -> f64 {
        self.batches.iter().fold(f64::INFINITY, |m, b| m.min(b.final_flops))
    }
}

/// Min-heap entry: lightest load first, lowest batch id on ties.
#[derive(PartialEq)]
struct Slot {
    load: f64,
    id: usize,
}

impl Eq for Slot {}

impl Ord for Slot {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .load
            .total_cmp(&self.load)
            .then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Slot {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn load(base: f64, images: u64, image_flops: f64) -> f64 {
    base + images as f64 * image_flops
}

/// Assigns `image_budget` images one at a time to the batch with the smallest
/// current FLOPs.
pub fn greedy_pad(bases: &[f64], image_budget: u64, image_flops: f64) -> PadResult {
    let mut counts = vec![0u64; bases.len()];
    let mut trace = Vec::with_capacity(image_budget as usize);
    if !bases.is_empty() {
        let mut heap: BinaryHeap<Slot> = bases
            .iter()
            .enumerate()
            .map(|(id, &load)| Slot { load, id })
            .collect();
        for _ in 0..image_budget {
            let slot = heap.pop().expect("non-empty heap");
            counts[slot.id] += 1;
            trace.push(slot.id);
            heap.push(Slot {
                load: load(bases[slot.id], counts[slot.id], image_flops),
                id: slot.id,
            });
        }
    }
    let batches = bases
        .iter()
        .zip(&counts)
        .enumerate()
        .map(|(batch_id, (&base_flops, &images_added))| PaddedBatch {
            batch_id,
            base_flops,
            images_added,
            final_flops: load(base_flops, images_added, image_flops),
        })
        .collect();
    PadResult { batches, trace }
}

/// `round_half_even(beta * total_videos)`.
pub fn image_budget(video_counts: &[u64], beta: f64) -> Result<u64, BalanceError> {
    if !(beta >= 0.0) {
        return Err(BalanceError::BadBeta(beta));
    }
    let total: u64 = video_counts.iter().sum();
    Ok((beta * total as f64).round_ties_even() as u64)
}

/// Exhaustive minimum of the maximum final load over every way to split the
/// images among the batches. Returns the optimum and one optimal allocation.
pub fn brute_force_pad(
    bases: &[f64],
    image_budget: u64,
    image_flops: f64,
) -> Result<(f64, Vec<u64>), BalanceError> {
    if bases.is_empty()
        || bases.len() > BRUTE_FORCE_MAX_BATCHES
        || image_budget > BRUTE_FORCE_MAX_IMAGES
    {
        return Err(BalanceError::TooLarge {
            batches: bases.len(),
            images: image_budget,
            max_batches: BRUTE_FORCE_MAX_BATCHES,
            max_images: BRUTE_FORCE_MAX_IMAGES,
        });
    }
    let mut alloc = vec![0u64; bases.len()];
    let mut best = (f64::INFINITY, alloc.clone());
    enumerate(bases, image_flops, 0, image_budget, &mut alloc, &mut best);
    Ok(best)
}

fn enumerate(
    bases: &[f64],
    image_flops: f64,
    idx: usize,
    remaining: u64,
    alloc: &mut Vec<u64>,
    best: &mut (f64, Vec<u64>),
) {
    if idx + 1 == bases.len() {
        alloc[idx] = remaining;
        let max = bases
            .iter()
            .zip(alloc.iter())
            .map(|(&b, &n)| load(b, n, image_flops))
            .fold(f64::NEG_INFINITY, f64::max);
        if max < best.0 {
            *best = (max, alloc.clone());
        }
        return;
    }
    for n in 0..=remaining {
        alloc[idx] = n;
        enumerate(bases, image_flops, idx + 1, remaining - n, alloc, best);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_trace() {
        let r = greedy_pad(&[1717.20, 1004.89, 509.31], 4, 44.99);
        assert_eq!(r.trace, vec![2, 2, 2, 2]);
        let finals: Vec<f64> = r.batches.iter().map(|b| b.final_flops).collect();
        assert_eq!(finals[0], 1717.20);
        assert_eq!(finals[1], 1004.89);
        assert!((finals[2] - 689.27).abs() < 1e-9);
        let (opt, _) = brute_force_pad(&[1717.20, 1004.89, 509.31], 4, 44.99).unwrap();
        assert_eq!(opt, 1717.20);
        assert_eq!(r.max_load(), opt);
    }

    #[test]
    fn zero_images_identity() {
        let r = greedy_pad(&[3.0, 1.0], 0, 5.0);
        assert!(r.trace.is_empty());
        assert_eq!(r.batches[0].final_flops, 3.0);
        assert_eq!(r.batches[1].final_flops, 1.0);
    }

    #[test]
    fn equal_bases_tie_break() {
        let r = greedy_pad(&[10.0, 10.0, 10.0], 3, 1.0);
        assert_eq!(r.trace, vec![0, 1, 2]);
        assert!(r.batches.iter().all(|b| b.images_added == 1));
    }

    #[test]
    fn brute_force_trivia() {
        let (opt, alloc) = brute_force_pad(&[5.0], 3, 1.0).unwrap();
        assert_eq!((opt, alloc), (8.0, vec![3]));
        let (opt, alloc) = brute_force_pad(&[5.0, 5.0], 2, 1.0).unwrap();
        assert_eq!(opt, 6.0);
        assert_eq!(alloc, vec![1, 1]);
        assert!(brute_force_pad(&[1.0; 7], 2, 1.0).is_err());
        assert!(brute_force_pad(&[1.0; 2], 11, 1.0).is_err());
    }

    #[test]
    fn budget_rounding() {
        assert_eq!(image_budget(&[10, 10, 10], 0.1).unwrap(), 3);
        assert_eq!(image_budget(&[30], 0.0).unwrap(), 0);
        assert_eq!(image_budget(&[25], 0.1).unwrap(), 2);
        assert_eq!(image_budget(&[35], 0.1).unwrap(), 4);
        assert!(image_budget(&[1], -0.5).is_err());
    }

    proptest! {
        #[test]
        fn greedy_within_one_image_of_optimum(
            bases in proptest::collection::vec(1.0f64..100.0, 1..=6),
            budget in 0u64..=10,
            img in 0.5f64..20.0,
        ) {
            let g = greedy_pad(&bases, budget, img);
            let (opt, _) = brute_force_pad(&bases, budget, img).unwrap();
            prop_assert!(g.max_load() <= opt + img + 1e-9);
            let total: u64 = g.batches.iter().map(|b| b.images_added).sum();
            prop_assert_eq!(total, budget);
            for b in &g.batches {
                prop_assert_eq!(b.final_flops, b.base_flops + b.images_added as f64 * img);
            }
        }

        #[test]
        fn greedy_never_widens_spread(
            bases in proptest::collection::vec(1.0f64..100.0, 2..=6),
            budget in 1u64..=10,
            img in 0.5f64..20.0,
        ) {
            let max = bases.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = bases.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assume!(min + img <= max);
            let g = greedy_pad(&bases, budget, img);
            prop_assert!(g.max_load() - g.min_load() <= max - min + 1e-9);
        }
    }
}
