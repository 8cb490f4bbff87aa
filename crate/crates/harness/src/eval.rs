//! Accuracy, mask statistics and mode-part alignment on a labelled set.
//!
//! Alignment asks whether each mode consistently looks at one part. Every
//! mode's mask argmax is mapped to image coordinates and counted as a hit on
//! part `p` when it lies within `radius` of that part's center. Modes are
//! then assigned one-to-one to parts so as to maximize hits, and the score is
//! the hit rate of that assignment. The baseline repeats the computation
//! with predictions paired to the centers of other images.

use pathfinding::prelude::{kuhn_munkres, Matrix};
use stra_core::losses::{cross_entropy, diversity_loss, mask_overlap};
use stra_core::network::Model;
use stra_core::{Rng, Tensor};

use crate::dataset::PartsDataset;
use crate::error::Result;
use crate::train::argmax_rows;

/// `(row, col)` in image pixels.
pub type Point = (f64, f64);

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub score: f64,
    /// Mean score over image-shuffled pairings.
    pub baseline: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub samples: usize,
    pub accuracy: f64,
    pub ce: f64,
    /// Diversity loss summed over mode blocks, averaged over samples.
    pub ld: f64,
    /// Of the first mode block; `None` without mode attention or with one mode.
    pub mask_overlap: Option<f64>,
    pub alignment: Option<Alignment>,
}

/// Rounds of image shuffling behind the alignment baseline.
pub const BASELINE_ROUNDS: usize = 32;

/// Default hit radius: half the diagonal of a part.
pub fn default_radius(part_size: usize) -> f64 {
    part_size as f64 / std::f64::consts::SQRT_2
}

/// Argmax of each mode's mask, per image, mapped to image coordinates.
/// Ties go to the first position in row-major order.
pub fn mode_positions(masks: &Tensor, image_size: usize) -> Vec<Vec<Point>> {
    let s = masks.shape();
    let (n, g, h, w) = (s[0], s[1], s[2], s[3]);
    let (sy, sx) = (image_size as f64 / h as f64, image_size as f64 / w as f64);
    let plane = h * w;
    (0..n)
        .map(|b| {
            (0..g)
                .map(|k| {
                    let m = &masks.data()[(b * g + k) * plane..][..plane];
                    let i = m
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                        .0;
                    (((i / w) as f64 + 0.5) * sy, ((i % w) as f64 + 0.5) * sx)
                })
                .collect()
        })
        .collect()
}

fn hits(preds: &[Vec<Point>], centers: &[Vec<Point>], radius: f64, pair: impl Fn(usize) -> usize) -> Vec<Vec<i64>> {
    let modes = preds.first().map_or(0, Vec::len);
    let parts = centers.first().map_or(0, Vec::len);
    let mut h = vec![vec![0i64; parts]; modes];
    for (b, c) in centers.iter().enumerate() {
        for (g, &(py, px)) in preds[pair(b)].iter().enumerate() {
            for (p, &(cy, cx)) in c.iter().enumerate() {
                if (py - cy).hypot(px - cx) <= radius {
                    h[g][p] += 1;
                }
            }
        }
    }
    h
}

/// Largest total of a one-to-one assignment between rows and columns.
fn best_assignment(h: &[Vec<i64>]) -> i64 {
    let (rows, cols) = (h.len(), h.first().map_or(0, Vec::len));
    if rows == 0 || cols == 0 {
        return 0;
    }
    let m = if rows <= cols {
        Matrix::from_rows(h.to_vec()).expect("rectangular")
    } else {
        Matrix::from_fn(cols, rows, |(i, j)| h[j][i])
    };
    kuhn_munkres(&m).0
}

fn score(preds: &[Vec<Point>], centers: &[Vec<Point>], radius: f64, pair: impl Fn(usize) -> usize) -> f64 {
    let modes = preds.first().map_or(0, Vec::len);
    let parts = centers.first().map_or(0, Vec::len);
    let denom = centers.len() * modes.min(parts);
    if denom == 0 {
        return 0.0;
    }
    best_assignment(&hits(preds, centers, radius, pair)) as f64 / denom as f64
}

/// Hit rate of the best fixed mode-to-part assignment.
pub fn mode_part_alignment(preds: &[Vec<Point>], centers: &[Vec<Point>], radius: f64) -> f64 {
    score(preds, centers, radius, |b| b)
}

/// Mean alignment when each image's predictions are scored against the
/// parts of a randomly chosen image: what position priors alone achieve.
pub fn permutation_baseline(preds: &[Vec<Point>], centers: &[Vec<Point>], radius: f64, rounds: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut total = 0.0;
    for _ in 0..rounds {
        let mut perm: Vec<usize> = (0..centers.len()).collect();
        rng.shuffle(&mut perm);
        total += score(preds, centers, radius, |b| perm[b]);
    }
    total / rounds as f64
}

/// Inference-mode metrics over `data` in batches of `batch`.
pub fn evaluate(model: &Model, data: &PartsDataset, batch: usize) -> Result<EvalMetrics> {
    evaluate_with_radius(model, data, batch, default_radius(data.part_size))
}

pub fn evaluate_with_radius(model: &Model, data: &PartsDataset, batch: usize, radius: f64) -> Result<EvalMetrics> {
    let n = data.len();
    let indices: Vec<usize> = (0..n).collect();
    let (mut correct, mut ce, mut ld, mut overlap) = (0usize, 0.0, 0.0, 0.0);
    let mut preds = Vec::with_capacity(n);
    let mut has_overlap = false;
    for chunk in indices.chunks(batch.max(1)) {
        let (x, labels) = data.batch(chunk);
        let cache = model.forward(&x, false)?;
        let weight = chunk.len() as f64;
        correct += argmax_rows(&cache.logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
        ce += cross_entropy(&cache.logits, &labels)?.0 * weight;
        let states = cache.mode_states();
        for st in &states {
            ld += diversity_loss(&st.masks)?.0 * weight;
        }
        if let Some(first) = states.first() {
            if first.masks.shape()[1] >= 2 {
                overlap += mask_overlap(&first.masks)? * weight;
                has_overlap = true;
            }
            preds.extend(mode_positions(&first.masks, data.size()));
        }
    }
    let nf = n as f64;
    let alignment = (!preds.is_empty()).then(|| Alignment {
        score: mode_part_alignment(&preds, &data.part_positions, radius),
        baseline: permutation_baseline(&preds, &data.part_positions, radius, BASELINE_ROUNDS, 0),
        radius,
    });
    Ok(EvalMetrics {
        samples: n,
        accuracy: correct as f64 / nf,
        ce: ce / nf,
        ld: ld / nf,
        mask_overlap: has_overlap.then_some(overlap / nf),
        alignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::dataset::{generate_parts_dataset, DataConfig, Split};
    use stra_core::network::build_network;

    fn centers() -> Vec<Vec<Point>> {
        let data = generate_parts_dataset(
            &DataConfig {
                test: 64,
                ..DataConfig::default()
            },
            Split::Test,
        )
        .unwrap();
        data.part_positions
    }

    #[test]
    fn perfect_masks_align_fully() {
        let c = centers();
        assert_eq!(mode_part_alignment(&c, &c, 1.0), 1.0);
        // Mode order does not matter.
        let swapped: Vec<Vec<Point>> = c.iter().map(|p| p.iter().rev().copied().collect()).collect();
        assert_eq!(mode_part_alignment(&swapped, &c, 1.0), 1.0);
        assert!(permutation_baseline(&c, &c, 1.0, 8, 1) < 0.5);
    }

    #[test]
    fn uniform_masks_sit_at_chance() {
        let c = centers();
        let masks = Tensor::full(vec![c.len(), 4, 16, 16], 1.0 / 256.0);
        let preds = mode_positions(&masks, 32);
        assert!(preds.iter().flatten().all(|&p| p == (1.0, 1.0)));
        let a = mode_part_alignment(&preds, &c, default_radius(6));
        assert_eq!(a, permutation_baseline(&preds, &c, default_radius(6), 8, 3));
    }

    #[test]
    fn positions_use_cell_centers() {
        let mut m = Tensor::zeros(vec![1, 2, 4, 4]);
        m.data_mut()[6] = 1.0;
        m.data_mut()[16 + 15] = 1.0;
        assert_eq!(mode_positions(&m, 32), vec![vec![(12.0, 20.0), (28.0, 28.0)]]);
    }

    #[test]
    fn more_modes_than_parts() {
        let c: Vec<Vec<Point>> = vec![vec![(1.0, 1.0)], vec![(5.0, 5.0)]];
        let p: Vec<Vec<Point>> = vec![vec![(9.0, 9.0), (1.0, 1.0)], vec![(9.0, 9.0), (5.0, 5.0)]];
        assert_eq!(mode_part_alignment(&p, &c, 0.5), 1.0);
    }

    #[test]
    fn untrained_accuracy_near_chance() {
        let mut cfg = RunConfig::default();
        cfg.data.test = 256;
        let model = build_network(&cfg.arch, &mut Rng::new(4)).unwrap();
        let data = generate_parts_dataset(&cfg.data, Split::Test).unwrap();
        let m = evaluate(&model, &data, 64).unwrap();
        assert_eq!(m.samples, 256);
        // An untrained net often predicts one class; balanced labels bound
        // the accuracy of any constant guess to exactly 1/4.
        assert!(m.accuracy > 0.25 - 0.12 && m.accuracy < 0.25 + 0.12, "{}", m.accuracy);
        assert!(m.mask_overlap.is_some() && m.alignment.is_some());
        assert!(m.ld >= 0.0 && m.ld <= 3.0);
    }
}
