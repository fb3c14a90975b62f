//! One-to-one assignment between proposal slots and ground-truth points.
//!
//! The assignment defines the positive set N (matched slots, location loss
//! support) and the proposal set M (all slots, classification loss support).
//! It is recomputed every training step because the cost depends on the
//! current predictions.

use ndarray::{Array2, Array4};

use crate::error::{Error, Result};
use crate::geometry::{encode_offsets, AnchorGrid, PointSet};
use crate::losses::ClassificationMap;

/// Pairwise slot-to-point costs, shape `(num_slots, num_gt)`.
///
/// Rows enumerate flattened slots in `(i, j, k)` order.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    pub costs: Array2<f64>,
}

/// An injective assignment of ground-truth points to slots.
#[derive(Debug, Clone, Default)]
pub struct Matching {
    /// `(slot_index, gt_index)` pairs, sorted by slot index.
    pub pairs: Vec<(usize, usize)>,
    /// All slots not in `pairs`, ascending.
    pub unmatched_slots: Vec<usize>,
}

impl Matching {
    /// The all-negative matching used when there is no ground truth.
    pub fn empty(num_slots: usize) -> Self {
        Self {
            pairs: Vec::new(),
            unmatched_slots: (0..num_slots).collect(),
        }
    }

    pub fn total_cost(&self, costs: &CostMatrix) -> f64 {
        self.pairs
            .iter()
            .map(|&(s, g)| costs.costs[[s, g]])
            .sum()
    }
}

/// `cost[slot, n] = dist_weight * ||p_slot - p_n||_2 - cls_pos[slot]`.
///
/// The distance term is in pixels, the confidence term dimensionless;
/// `dist_weight` balances the two.
pub fn build_cost_matrix(
    decoded_points: &Array4<f64>,
    cls_map: &ClassificationMap,
    gt: &PointSet,
    dist_weight: f64,
) -> Result<CostMatrix> {
    if gt.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    let dim = decoded_points.dim();
    if cls_map.probs.dim() != dim {
        return Err(Error::InvalidArgument(format!(
            "classification map shape {:?} does not match decoded points {:?}",
            cls_map.probs.dim(),
            dim
        )));
    }
    let (w, h, d, _) = dim;
    let num_slots = w * h * d;
    let mut costs = Array2::zeros((num_slots, gt.len()));
    let mut slot = 0;
    for i in 0..w {
        for j in 0..h {
            for k in 0..d {
                let px = decoded_points[[i, j, k, 0]];
                let py = decoded_points[[i, j, k, 1]];
                let pos = cls_map.probs[[i, j, k, 0]];
                for (n, p) in gt.points.iter().enumerate() {
                    let dist = ((px - p[0]).powi(2) + (py - p[1]).powi(2)).sqrt();
                    costs[[slot, n]] = dist_weight * dist - pos;
                }
                slot += 1;
            }
        }
    }
    Ok(CostMatrix { costs })
}

/// Minimum-cost injective assignment of every ground-truth point to a slot.
///
/// Shortest-augmenting-path formulation with row/column potentials, O(G^2 S).
/// Ties resolve deterministically toward the lowest slot index.
pub fn hungarian_assign(costs: &CostMatrix) -> Result<Matching> {
    let (num_slots, num_gt) = costs.costs.dim();
    if num_gt > num_slots {
        return Err(Error::InfeasibleAssignment { num_gt, num_slots });
    }
    if let Some(bad) = costs.costs.iter().find(|c| !c.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite cost {bad}")));
    }
    if num_gt == 0 {
        return Ok(Matching::empty(num_slots));
    }

    // 1-indexed potentials; column 0 is the virtual start of each path.
    let g = num_gt;
    let s = num_slots;
    let mut u = vec![0.0f64; g + 1];
    let mut v = vec![0.0f64; s + 1];
    let mut assigned_row = vec![0usize; s + 1]; // slot column -> gt row (1-indexed, 0 = free)
    let mut way = vec![0usize; s + 1];

    for row in 1..=g {
        assigned_row[0] = row;
        let mut j0 = 0usize;
        let mut min_to = vec![f64::INFINITY; s + 1];
        let mut used = vec![false; s + 1];
        loop {
            used[j0] = true;
            let i0 = assigned_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=s {
                if used[j] {
                    continue;
                }
                let cur = costs.costs[[j - 1, i0 - 1]] - u[i0] - v[j];
                if cur < min_to[j] {
                    min_to[j] = cur;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=s {
                if used[j] {
                    u[assigned_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if assigned_row[j0] == 0 {
                break;
            }
        }
        // Walk the augmenting path back, flipping assignments.
        while j0 != 0 {
            let j1 = way[j0];
            assigned_row[j0] = assigned_row[j1];
            j0 = j1;
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=s)
        .filter(|&j| assigned_row[j] != 0)
        .map(|j| (j - 1, assigned_row[j] - 1))
        .collect();
    pairs.sort_unstable();
    let mut matched = vec![false; s];
    for &(slot, _) in &pairs {
        matched[slot] = true;
    }
    let unmatched_slots = (0..s).filter(|&i| !matched[i]).collect();
    Ok(Matching {
        pairs,
        unmatched_slots,
    })
}

/// Location and classification targets induced by a matching.
///
/// `loc_targets[n]` is the offset target for `matching.pairs[n]`, clamped to
/// `[-1, 1]` (with a warning) when the matched point is not reachable from
/// the slot's cell. `cls_targets` is one-hot `(pos, neg)` per slot.
pub fn derive_targets(
    matching: &Matching,
    gt: &PointSet,
    grid: &AnchorGrid,
) -> Result<(Vec<[f64; 2]>, Array4<f64>)> {
    let mut cls_targets = Array4::zeros(grid.map_dim());
    for i in 0..grid.feat_w {
        for j in 0..grid.feat_h {
            for k in 0..grid.slots_per_cell {
                cls_targets[[i, j, k, 1]] = 1.0;
            }
        }
    }
    let mut loc_targets = Vec::with_capacity(matching.pairs.len());
    for &(slot, gt_idx) in &matching.pairs {
        let point = *gt.points.get(gt_idx).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "matching refers to gt index {gt_idx} but only {} points given",
                gt.len()
            ))
        })?;
        let (i, j, k) = grid.slot_cell(slot);
        let target = match encode_offsets(point, (i, j), grid) {
            Ok(t) => t,
            Err(Error::OutOfRange { .. }) => {
                let s = grid.stride as f64;
                let di = (point[0] / s - i as f64).clamp(-1.0, 1.0);
                let dj = (point[1] / s - j as f64).clamp(-1.0, 1.0);
                log::warn!(
                    "gt point ({}, {}) unreachable from cell ({i}, {j}); clamping offset target",
                    point[0],
                    point[1]
                );
                [di, dj]
            }
            Err(e) => return Err(e),
        };
        loc_targets.push(target);
        cls_targets[[i, j, k, 0]] = 1.0;
        cls_targets[[i, j, k, 1]] = 0.0;
    }
    Ok((loc_targets, cls_targets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_anchor_grid;
    use ndarray::Array4;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive minimum over all injective assignments of gt to slots.
    pub(crate) fn brute_force_min_cost(costs: &Array2<f64>) -> f64 {
        fn rec(costs: &Array2<f64>, gt_idx: usize, used: &mut Vec<bool>) -> f64 {
            if gt_idx == costs.dim().1 {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for slot in 0..costs.dim().0 {
                if used[slot] {
                    continue;
                }
                used[slot] = true;
                let c = costs[[slot, gt_idx]] + rec(costs, gt_idx + 1, used);
                used[slot] = false;
                best = best.min(c);
            }
            best
        }
        rec(costs, 0, &mut vec![false; costs.dim().0])
    }

    fn matrix(rows: Vec<Vec<f64>>) -> CostMatrix {
        let r = rows.len();
        let c = rows[0].len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        CostMatrix {
            costs: Array2::from_shape_vec((r, c), flat).unwrap(),
        }
    }

    #[test]
    fn hungarian_matches_worked_examples() {
        let m = hungarian_assign(&matrix(vec![vec![1.0, 2.0], vec![2.0, 1.0]])).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);

        let m = hungarian_assign(&matrix(vec![vec![5.0]])).unwrap();
        assert_eq!(m.pairs, vec![(0, 0)]);
        assert!(m.unmatched_slots.is_empty());
    }

    #[test]
    fn hungarian_prefers_lowest_slot_on_ties() {
        let m = hungarian_assign(&matrix(vec![vec![1.0], vec![1.0], vec![1.0]])).unwrap();
        assert_eq!(m.pairs, vec![(0, 0)]);
        assert_eq!(m.unmatched_slots, vec![1, 2]);
    }

    #[test]
    fn hungarian_rejects_more_gt_than_slots() {
        let res = hungarian_assign(&matrix(vec![vec![1.0, 2.0, 3.0]]));
        assert!(matches!(res, Err(Error::InfeasibleAssignment { .. })));
    }

    #[test]
    fn hungarian_total_cost_equals_brute_force_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..150 {
            let slots = rng.gen_range(1..=6);
            let gts = rng.gen_range(1..=slots);
            let costs = Array2::from_shape_fn((slots, gts), |_| rng.gen_range(0..50) as f64);
            let cm = CostMatrix {
                costs: costs.clone(),
            };
            let m = hungarian_assign(&cm).unwrap();
            assert_eq!(m.pairs.len(), gts);
            let expected = brute_force_min_cost(&costs);
            assert_eq!(m.total_cost(&cm), expected, "matrix {costs:?}");
        }
    }

    #[test]
    fn permuting_gt_order_preserves_cost_and_positive_slots() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let costs = Array2::from_shape_fn((6, 4), |_| rng.gen_range(0..100) as f64);
        let cm = CostMatrix {
            costs: costs.clone(),
        };
        let m = hungarian_assign(&cm).unwrap();

        // Reverse the gt columns.
        let permuted = Array2::from_shape_fn((6, 4), |(s, g)| costs[[s, 3 - g]]);
        let cm_p = CostMatrix { costs: permuted };
        let m_p = hungarian_assign(&cm_p).unwrap();

        assert_eq!(m.total_cost(&cm), m_p.total_cost(&cm_p));
        let slots: Vec<usize> = m.pairs.iter().map(|&(s, _)| s).collect();
        let slots_p: Vec<usize> = m_p.pairs.iter().map(|&(s, _)| s).collect();
        assert_eq!(slots, slots_p);
    }

    #[test]
    fn cost_matrix_matches_worked_examples() {
        let grid = build_anchor_grid(8, 8, 8, 1).unwrap();
        let decoded = Array4::zeros(grid.map_dim());
        let mut probs = Array4::zeros(grid.map_dim());
        probs[[0, 0, 0, 0]] = 0.5;
        probs[[0, 0, 0, 1]] = 0.5;
        let cls = ClassificationMap { probs };
        let gt = PointSet::new(vec![[3.0, 4.0]]).unwrap();
        let cm = build_cost_matrix(&decoded, &cls, &gt, 1.0).unwrap();
        assert_eq!(cm.costs[[0, 0]], 4.5);

        // Slot exactly on the gt point with full confidence.
        let mut probs = Array4::zeros(grid.map_dim());
        probs[[0, 0, 0, 0]] = 1.0;
        let cls = ClassificationMap { probs };
        let gt = PointSet::new(vec![[0.0, 0.0]]).unwrap();
        let cm = build_cost_matrix(&decoded, &cls, &gt, 1.0).unwrap();
        assert_eq!(cm.costs[[0, 0]], -1.0);
    }

    #[test]
    fn symmetric_layout_gives_symmetric_costs() {
        // Two slots at (0,0) and (8,0), two gts at the same spots, equal cls.
        let grid = build_anchor_grid(16, 8, 8, 1).unwrap();
        let mut decoded = Array4::zeros(grid.map_dim());
        decoded[[1, 0, 0, 0]] = 8.0;
        let mut probs = Array4::zeros(grid.map_dim());
        probs[[0, 0, 0, 0]] = 0.3;
        probs[[0, 0, 0, 1]] = 0.7;
        probs[[1, 0, 0, 0]] = 0.3;
        probs[[1, 0, 0, 1]] = 0.7;
        let cls = ClassificationMap { probs };
        let gt = PointSet::new(vec![[0.0, 0.0], [8.0, 0.0]]).unwrap();
        let cm = build_cost_matrix(&decoded, &cls, &gt, 1.0).unwrap();
        assert_eq!(cm.costs[[0, 0]], cm.costs[[1, 1]]);
        assert_eq!(cm.costs[[0, 1]], cm.costs[[1, 0]]);
    }

    #[test]
    fn empty_gt_signals_caller() {
        let grid = build_anchor_grid(8, 8, 8, 1).unwrap();
        let decoded = Array4::zeros(grid.map_dim());
        let cls = ClassificationMap {
            probs: Array4::zeros(grid.map_dim()),
        };
        let gt = PointSet::default();
        assert!(matches!(
            build_cost_matrix(&decoded, &cls, &gt, 1.0),
            Err(Error::EmptyGroundTruth)
        ));
    }

    #[test]
    fn derive_targets_labels_and_offsets() {
        let grid = build_anchor_grid(16, 8, 8, 2).unwrap();
        // gt on the corner of cell (1, 0): zero offset for slot (1,0,0).
        let gt = PointSet::new(vec![[8.0, 0.0]]).unwrap();
        let slot = grid.slot_index(1, 0, 0);
        let matching = Matching {
            pairs: vec![(slot, 0)],
            unmatched_slots: (0..grid.num_slots()).filter(|&s| s != slot).collect(),
        };
        let (loc, cls) = derive_targets(&matching, &gt, &grid).unwrap();
        assert_eq!(loc, vec![[0.0, 0.0]]);
        assert_eq!(cls[[1, 0, 0, 0]], 1.0);
        assert_eq!(cls[[1, 0, 0, 1]], 0.0);
        // Every other slot is negative.
        let positives: f64 = cls.index_axis(ndarray::Axis(3), 0).sum();
        assert_eq!(positives, 1.0);
    }

    #[test]
    fn derive_targets_empty_gt_all_negative() {
        let grid = build_anchor_grid(16, 16, 8, 1).unwrap();
        let matching = Matching::empty(grid.num_slots());
        let (loc, cls) = derive_targets(&matching, &PointSet::default(), &grid).unwrap();
        assert!(loc.is_empty());
        let negatives: f64 = cls.index_axis(ndarray::Axis(3), 1).sum();
        assert_eq!(negatives, grid.num_slots() as f64);
    }

    #[test]
    fn derive_targets_clamps_unreachable_points() {
        let grid = build_anchor_grid(32, 32, 8, 1).unwrap();
        let gt = PointSet::new(vec![[31.0, 31.0]]).unwrap();
        // Force a match to the far corner cell (0, 0).
        let matching = Matching {
            pairs: vec![(grid.slot_index(0, 0, 0), 0)],
            unmatched_slots: vec![],
        };
        let (loc, _) = derive_targets(&matching, &gt, &grid).unwrap();
        assert_eq!(loc, vec![[1.0, 1.0]]);
    }

    #[test]
    fn every_slot_is_positive_or_negative_exactly_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = build_anchor_grid(32, 32, 8, 2).unwrap();
        let decoded = Array4::zeros(grid.map_dim());
        let cls = ClassificationMap {
            probs: Array4::from_shape_fn(grid.map_dim(), |_| 0.5),
        };
        let points: Vec<[f64; 2]> = (0..10)
            .map(|_| [rng.gen_range(0.0..32.0), rng.gen_range(0.0..32.0)])
            .collect();
        let gt = PointSet::new(points).unwrap();
        let cm = build_cost_matrix(&decoded, &cls, &gt, 0.05).unwrap();
        let m = hungarian_assign(&cm).unwrap();
        assert_eq!(m.pairs.len(), gt.len());
        assert_eq!(m.pairs.len() + m.unmatched_slots.len(), grid.num_slots());
        let mut seen = vec![0u8; grid.num_slots()];
        for &(s, _) in &m.pairs {
            seen[s] += 1;
        }
        for &s in &m.unmatched_slots {
            seen[s] += 1;
        }
        assert!(seen.iter().all(|&c| c == 1));
    }
}
