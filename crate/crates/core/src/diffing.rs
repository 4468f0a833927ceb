//! Map comparison: extracts object instances from a semantic map, matches
//! them across phases by appearance, and emits the disagreements that form
//! the inferred rearrangement goal.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::geometry::Vec3;
use crate::semantic_map::SemanticMap;

/// A connected component of voxels sharing one argmax class.
#[derive(Debug, Clone)]
pub struct ObjectInstance {
    pub class_id: usize,
    /// Flat voxel indices, ascending.
    pub voxels: Vec<usize>,
    /// Mean voxel-center position in meters.
    pub centroid: Vec3,
    /// Bounding-box center of the voxel set on the ground plane (voxel-mean
    /// height). Less sensitive to one-sided surface coverage than the
    /// centroid, so the agent targets this when acting.
    pub footprint_center: Vec3,
    /// Mean of the map's accumulated color over the instance voxels.
    pub color: [f32; 3],
    /// Mean of the map's accumulated openness over the instance voxels.
    pub openness: f32,
    pub voxel_count: usize,
}

/// Labels connected same-class voxel components as object instances.
///
/// A voxel belongs to class `c` when `c` is the argmax of its (nonzero)
/// probability vector, ties to the lowest class id; components are connected
/// under 6-connectivity. Per class, the returned voxel sets are disjoint and
/// cover every nonzero voxel of that argmax class. Instances are ordered by
/// (class, smallest voxel index).
pub fn label_instances(map: &SemanticMap) -> Vec<ObjectInstance> {
    let grid = map.grid();
    let [nx, ny, nz] = grid.dims;
    let n = grid.num_voxels();
    // Argmax class per voxel; -1 for empty.
    let mut class_of: Vec<i32> = vec![-1; n];
    for flat in map.occupied_voxels() {
        let probs = map.probs_at(flat);
        let mut best = 0usize;
        let mut best_p = probs[0];
        for (c, &p) in probs.iter().enumerate().skip(1) {
            if p > best_p {
                best = c;
                best_p = p;
            }
        }
        if best_p > 0.0 {
            class_of[flat] = best as i32;
        }
    }

    let mut visited = vec![false; n];
    let mut instances = Vec::new();
    let strides = [(ny * nz) as isize, nz as isize, 1isize];
    let mut stack = Vec::new();
    for start in 0..n {
        if class_of[start] < 0 || visited[start] {
            continue;
        }
        let cls = class_of[start];
        let mut voxels = Vec::new();
        visited[start] = true;
        stack.push(start);
        while let Some(flat) = stack.pop() {
            voxels.push(flat);
            let idx = grid.unflat(flat);
            for (a, &stride) in strides.iter().enumerate() {
                let dim = [nx, ny, nz][a];
                if idx[a] > 0 {
                    let nb = (flat as isize - stride) as usize;
                    if !visited[nb] && class_of[nb] == cls {
                        visited[nb] = true;
                        stack.push(nb);
                    }
                }
                if idx[a] + 1 < dim {
                    let nb = (flat as isize + stride) as usize;
                    if !visited[nb] && class_of[nb] == cls {
                        visited[nb] = true;
                        stack.push(nb);
                    }
                }
            }
        }
        voxels.sort_unstable();
        let mut centroid = Vec3::zeros();
        let mut color = [0.0f64; 3];
        let mut open = 0.0f64;
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        for &v in &voxels {
            let idx = grid.unflat(v);
            for a in 0..3 {
                lo[a] = lo[a].min(idx[a]);
                hi[a] = hi[a].max(idx[a]);
            }
            centroid += grid.voxel_center(idx);
            let c = map.color_at(v);
            for ch in 0..3 {
                color[ch] += c[ch] as f64;
            }
            open += map.openness_at(v) as f64;
        }
        let k = voxels.len() as f64;
        let centroid = centroid / k;
        let footprint_center = Vec3::new(
            grid.origin.x + (lo[0] + hi[0] + 1) as f64 * 0.5 * grid.voxel_size,
            centroid.y,
            grid.origin.z + (lo[2] + hi[2] + 1) as f64 * 0.5 * grid.voxel_size,
        );
        instances.push(ObjectInstance {
            class_id: cls as usize,
            voxel_count: voxels.len(),
            voxels,
            centroid,
            footprint_center,
            color: [
                (color[0] / k) as f32,
                (color[1] / k) as f32,
                (color[2] / k) as f32,
            ],
            openness: (open / k) as f32,
        });
    }
    instances.sort_by_key(|inst| (inst.class_id, inst.voxels[0]));
    instances
}

/// Merges same-class instances whose bounding boxes come within
/// `max_gap_voxels` of each other. Far-range sightings paint patchy surface
/// coverage that flood fill splits into fragments; scene generation keeps
/// distinct objects further apart than the merge gap, so merging fragments
/// never bridges two real objects.
pub fn merge_nearby_instances(
    instances: Vec<ObjectInstance>,
    grid: &crate::geometry::GridSpec,
    max_gap_voxels: usize,
) -> Vec<ObjectInstance> {
    use std::collections::BTreeMap;
    let mut by_class: BTreeMap<usize, Vec<ObjectInstance>> = BTreeMap::new();
    for inst in instances {
        by_class.entry(inst.class_id).or_default().push(inst);
    }
    let mut out = Vec::new();
    for (_, group) in by_class {
        let n = group.len();
        let bboxes: Vec<([usize; 3], [usize; 3])> = group
            .iter()
            .map(|inst| {
                let mut lo = [usize::MAX; 3];
                let mut hi = [0usize; 3];
                for &v in &inst.voxels {
                    let idx = grid.unflat(v);
                    for a in 0..3 {
                        lo[a] = lo[a].min(idx[a]);
                        hi[a] = hi[a].max(idx[a]);
                    }
                }
                (lo, hi)
            })
            .collect();
        // Union-find over fragments whose boxes are within the gap.
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut Vec<usize>, i: usize) -> usize {
            if parent[i] != i {
                let r = find(parent, parent[i]);
                parent[i] = r;
            }
            parent[i]
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let close = (0..3).all(|a| {
                    let (lo_i, hi_i) = (bboxes[i].0[a], bboxes[i].1[a]);
                    let (lo_j, hi_j) = (bboxes[j].0[a], bboxes[j].1[a]);
                    let gap = if hi_i < lo_j {
                        lo_j - hi_i - 1
                    } else if hi_j < lo_i {
                        lo_i - hi_j - 1
                    } else {
                        0
                    };
                    gap <= max_gap_voxels
                });
                if close {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    if ri != rj {
                        parent[ri.max(rj)] = ri.min(rj);
                    }
                }
            }
        }
        let mut merged: BTreeMap<usize, Vec<&ObjectInstance>> = BTreeMap::new();
        for i in 0..n {
            let r = find(&mut parent, i);
            merged.entry(r).or_default().push(&group[i]);
        }
        for (_, parts) in merged {
            if parts.len() == 1 {
                out.push(parts[0].clone());
                continue;
            }
            let total: usize = parts.iter().map(|p| p.voxel_count).sum();
            let mut voxels = Vec::with_capacity(total);
            let mut centroid = Vec3::zeros();
            let mut color = [0.0f64; 3];
            let mut open = 0.0f64;
            let mut lo = [usize::MAX; 3];
            let mut hi = [0usize; 3];
            for p in &parts {
                voxels.extend_from_slice(&p.voxels);
                let w = p.voxel_count as f64;
                centroid += p.centroid * w;
                for ch in 0..3 {
                    color[ch] += p.color[ch] as f64 * w;
                }
                open += p.openness as f64 * w;
                for &v in &p.voxels {
                    let idx = grid.unflat(v);
                    for a in 0..3 {
                        lo[a] = lo[a].min(idx[a]);
                        hi[a] = hi[a].max(idx[a]);
                    }
                }
            }
            voxels.sort_unstable();
            let w = total as f64;
            let centroid = centroid / w;
            out.push(ObjectInstance {
                class_id: parts[0].class_id,
                voxel_count: total,
                voxels,
                centroid,
                footprint_center: Vec3::new(
                    grid.origin.x + (lo[0] + hi[0] + 1) as f64 * 0.5 * grid.voxel_size,
                    centroid.y,
                    grid.origin.z + (lo[2] + hi[2] + 1) as f64 * 0.5 * grid.voxel_size,
                ),
                color: [
                    (color[0] / w) as f32,
                    (color[1] / w) as f32,
                    (color[2] / w) as f32,
                ],
                openness: (open / w) as f32,
            });
        }
    }
    out.sort_by_key(|inst| (inst.class_id, inst.voxels[0]));
    out
}

/// Drops instances below a voxel-count floor (speck suppression for the
/// diffing pipeline; labeling itself is exact).
pub fn filter_small_instances(instances: Vec<ObjectInstance>, min_voxels: usize) -> Vec<ObjectInstance> {
    instances
        .into_iter()
        .filter(|i| i.voxel_count >= min_voxels)
        .collect()
}

/// A minimum-cost maximal matching.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row; `min(n, m)` of them.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Solves the rectangular assignment problem exactly.
///
/// Minimizes total cost over all matchings of size `min(n, m)` using the
/// potential-based shortest-augmenting-path form of the Hungarian algorithm.
/// Deterministic: rows are processed in order and ties resolve by column
/// scan order.
pub fn solve_assignment(cost: &[Vec<f64>]) -> Assignment {
    let n = cost.len();
    if n == 0 {
        return Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        };
    }
    let m = cost[0].len();
    debug_assert!(cost.iter().all(|row| row.len() == m));
    if m == 0 {
        return Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        };
    }
    if n > m {
        let transposed: Vec<Vec<f64>> = (0..m)
            .map(|j| (0..n).map(|i| cost[i][j]).collect())
            .collect();
        let mut flipped = solve_assignment(&transposed);
        for p in flipped.pairs.iter_mut() {
            *p = (p.1, p.0);
        }
        flipped.pairs.sort_unstable();
        return flipped;
    }

    // 1-indexed potentials with a virtual column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut matched_row = vec![0usize; m + 1]; // row matched to column j, 0 = none
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| matched_row[j] != 0)
        .map(|j| (matched_row[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(i, j)| cost[i][j]).sum();
    Assignment { pairs, total_cost }
}

/// A pair of instances matched across phases.
#[derive(Debug, Clone)]
pub struct MatchedPair {
    pub walkthrough: ObjectInstance,
    pub unshuffle: ObjectInstance,
    pub cost: f64,
}

#[derive(Debug, Clone, Default)]
pub struct MatchResult {
    pub pairs: Vec<MatchedPair>,
    /// Instances present only in the walkthrough map (candidate vanished
    /// objects); never rearranged, logged for failure analysis.
    pub unmatched_walkthrough: Vec<ObjectInstance>,
    /// Instances present only in the unshuffle map (candidate newly-appeared
    /// objects).
    pub unmatched_unshuffle: Vec<ObjectInstance>,
}

fn color_distance(a: [f32; 3], b: [f32; 3]) -> f64 {
    let mut s = 0.0f64;
    for ch in 0..3 {
        s += (a[ch] as f64 - b[ch] as f64).powi(2);
    }
    s.sqrt()
}

/// Matches instances per class by minimizing the total difference in average
/// color. Class-count mismatches come back unmatched.
pub fn match_instances(walkthrough: &[ObjectInstance], unshuffle: &[ObjectInstance]) -> MatchResult {
    let mut by_class: BTreeMap<usize, (Vec<&ObjectInstance>, Vec<&ObjectInstance>)> =
        BTreeMap::new();
    for inst in walkthrough {
        by_class.entry(inst.class_id).or_default().0.push(inst);
    }
    for inst in unshuffle {
        by_class.entry(inst.class_id).or_default().1.push(inst);
    }

    let mut result = MatchResult::default();
    for (_, (walk, unshuf)) in by_class {
        if walk.is_empty() {
            result
                .unmatched_unshuffle
                .extend(unshuf.iter().map(|&i| i.clone()));
            continue;
        }
        if unshuf.is_empty() {
            result
                .unmatched_walkthrough
                .extend(walk.iter().map(|&i| i.clone()));
            continue;
        }
        let cost: Vec<Vec<f64>> = walk
            .iter()
            .map(|w| {
                unshuf
                    .iter()
                    .map(|u| color_distance(w.color, u.color))
                    .collect()
            })
            .collect();
        let assignment = solve_assignment(&cost);
        let mut walk_used = vec![false; walk.len()];
        let mut unshuf_used = vec![false; unshuf.len()];
        for (i, j) in assignment.pairs {
            walk_used[i] = true;
            unshuf_used[j] = true;
            result.pairs.push(MatchedPair {
                walkthrough: walk[i].clone(),
                unshuffle: unshuf[j].clone(),
                cost: cost[i][j],
            });
        }
        for (i, used) in walk_used.iter().enumerate() {
            if !used {
                result.unmatched_walkthrough.push(walk[i].clone());
            }
        }
        for (j, used) in unshuf_used.iter().enumerate() {
            if !used {
                result.unmatched_unshuffle.push(unshuf[j].clone());
            }
        }
    }
    result
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DisagreementKind {
    /// Centroids differ by more than the distance threshold.
    Relocate,
    /// Centroids agree but the openness attribute differs.
    OpenClose,
}

/// A matched pair whose state differs between phases: the unit of
/// rearrangement work. For `Relocate`, `current` and `goal` are separated by
/// more than the distance threshold.
#[derive(Debug, Clone)]
pub struct Disagreement {
    pub class_id: usize,
    pub kind: DisagreementKind,
    /// Centroid in the unshuffle map (where the object is now).
    pub current: Vec3,
    /// Centroid in the walkthrough map (where the object belongs).
    pub goal: Vec3,
    /// Footprint-center estimates, used as action targets.
    pub current_footprint: Vec3,
    pub goal_footprint: Vec3,
    pub match_cost: f64,
    /// Unshuffle-instance voxels; lets the agent clear stale evidence after
    /// it picks the object up.
    pub current_voxels: Vec<usize>,
    /// Unshuffle-instance size, used for processing order.
    pub voxel_count: usize,
    /// Walkthrough-instance size, a proxy for how well the goal pose is
    /// observed.
    pub goal_voxel_count: usize,
    pub current_openness: f32,
    pub goal_openness: f32,
}

/// Emits disagreements from matched pairs.
///
/// A pair whose centroids are separated by more than `dist_threshold` meters
/// becomes a `Relocate` disagreement with the goal pose taken from the
/// walkthrough centroid. A pair within the threshold whose openness differs
/// by more than `openness_threshold` becomes an `OpenClose` disagreement.
pub fn detect_disagreements(
    pairs: &[MatchedPair],
    dist_threshold: f64,
    openness_threshold: f32,
) -> Vec<Disagreement> {
    assert!(dist_threshold > 0.0);
    let mut out = Vec::new();
    for pair in pairs {
        let dist = (pair.walkthrough.centroid - pair.unshuffle.centroid).norm();
        let kind = if dist > dist_threshold {
            DisagreementKind::Relocate
        } else if (pair.walkthrough.openness - pair.unshuffle.openness).abs() > openness_threshold {
            DisagreementKind::OpenClose
        } else {
            continue;
        };
        out.push(Disagreement {
            class_id: pair.unshuffle.class_id,
            kind,
            current: pair.unshuffle.centroid,
            goal: pair.walkthrough.centroid,
            current_footprint: pair.unshuffle.footprint_center,
            goal_footprint: pair.walkthrough.footprint_center,
            match_cost: pair.cost,
            current_voxels: pair.unshuffle.voxels.clone(),
            voxel_count: pair.unshuffle.voxel_count,
            goal_voxel_count: pair.walkthrough.voxel_count,
            current_openness: pair.unshuffle.openness,
            goal_openness: pair.walkthrough.openness,
        });
    }
    out
}

/// Convenience: 3D distance between two poses.
pub fn pose_distance(a: &Vec3, b: &Vec3) -> f64 {
    (Vector3::from(*a) - Vector3::from(*b)).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{EvidenceEntry, GridSpec, VoxelEvidence};
    use crate::semantic_map::Phase;

    fn map_with(
        dims: [usize; 3],
        num_classes: usize,
        voxels: &[(usize, u16, [f32; 3])],
    ) -> SemanticMap {
        let grid = GridSpec::new(dims, 0.05, Vec3::zeros(), num_classes);
        let mut map = SemanticMap::new(grid.clone(), 0.5, Phase::Walkthrough);
        let entries = voxels
            .iter()
            .map(|&(flat, cls, rgb)| EvidenceEntry {
                flat,
                probs: vec![(cls, 1.0)],
                rgb,
                openness: 0.0,
            })
            .collect();
        map.update(&VoxelEvidence {
            dims,
            num_classes,
            entries,
            dropped: 0,
        })
        .unwrap();
        map
    }

    #[test]
    fn separated_blobs_are_distinct_instances() {
        // Two class-2 voxels with a gap along z.
        let map = map_with([1, 1, 5], 4, &[(0, 2, [0.0; 3]), (2, 2, [0.0; 3])]);
        let insts = label_instances(&map);
        assert_eq!(insts.len(), 2);
        assert!(insts.iter().all(|i| i.class_id == 2));
    }

    #[test]
    fn l_shaped_blob_is_one_instance() {
        let grid_dims = [3, 1, 3];
        // L shape: (0,0,0), (1,0,0), (1,0,1) in a 3x1x3 grid.
        let flat = |x: usize, z: usize| x * 3 + z;
        let map = map_with(
            grid_dims,
            4,
            &[
                (flat(0, 0), 2, [0.0; 3]),
                (flat(1, 0), 2, [0.0; 3]),
                (flat(1, 1), 2, [0.0; 3]),
            ],
        );
        let insts = label_instances(&map);
        assert_eq!(insts.len(), 1);
        assert_eq!(insts[0].voxel_count, 3);
    }

    /// Independent flood-fill oracle over an explicit class grid.
    fn flood_fill_oracle(dims: [usize; 3], class_of: &[i32]) -> Vec<(i32, Vec<usize>)> {
        let [nx, ny, nz] = dims;
        let n = nx * ny * nz;
        let mut seen = vec![false; n];
        let mut comps = Vec::new();
        for s in 0..n {
            if seen[s] || class_of[s] < 0 {
                continue;
            }
            let cls = class_of[s];
            let mut comp = Vec::new();
            let mut frontier = vec![s];
            seen[s] = true;
            while let Some(f) = frontier.pop() {
                comp.push(f);
                let x = f / (ny * nz);
                let y = (f / nz) % ny;
                let z = f % nz;
                let mut push = |nb: usize| {
                    if !seen[nb] && class_of[nb] == cls {
                        seen[nb] = true;
                        frontier.push(nb);
                    }
                };
                if x > 0 {
                    push(f - ny * nz);
                }
                if x + 1 < nx {
                    push(f + ny * nz);
                }
                if y > 0 {
                    push(f - nz);
                }
                if y + 1 < ny {
                    push(f + nz);
                }
                if z > 0 {
                    push(f - 1);
                }
                if z + 1 < nz {
                    push(f + 1);
                }
            }
            comp.sort_unstable();
            comps.push((cls, comp));
        }
        comps.sort_by(|a, b| (a.0, a.1[0]).cmp(&(b.0, b.1[0])));
        comps
    }

    #[test]
    fn labeling_matches_flood_fill_oracle_on_random_grids() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let dims = [8, 8, 8];
            let mut voxels = Vec::new();
            let mut class_of = vec![-1i32; 512];
            for flat in 0..512 {
                if rng.random::<f64>() < 0.35 {
                    let cls = rng.random_range(0..3u16);
                    voxels.push((flat, cls, [0.0f32; 3]));
                    class_of[flat] = cls as i32;
                }
            }
            let map = map_with(dims, 3, &voxels);
            let insts = label_instances(&map);
            let oracle = flood_fill_oracle(dims, &class_of);
            assert_eq!(insts.len(), oracle.len());
            for (inst, (cls, comp)) in insts.iter().zip(&oracle) {
                assert_eq!(inst.class_id as i32, *cls);
                assert_eq!(&inst.voxels, comp);
            }
        }
    }

    #[test]
    fn labeling_partitions_nonzero_voxels() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let dims = [6, 6, 6];
        let mut voxels = Vec::new();
        for flat in 0..216 {
            if rng.random::<f64>() < 0.4 {
                voxels.push((flat, rng.random_range(0..4u16), [0.0f32; 3]));
            }
        }
        let map = map_with(dims, 4, &voxels);
        let insts = label_instances(&map);
        let mut covered = std::collections::HashSet::new();
        for inst in &insts {
            for &v in &inst.voxels {
                assert!(covered.insert(v), "voxel {v} in two instances");
            }
        }
        assert_eq!(covered.len(), voxels.len());
    }

    #[test]
    fn two_by_two_assignment() {
        let cost = vec![vec![1.0, 2.0], vec![3.0, 1.0]];
        let a = solve_assignment(&cost);
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 2.0);
    }

    #[test]
    fn diagonal_zero_matrix_picks_identity() {
        let n = 5;
        let cost: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 0.0 } else { 1.0 + (i + j) as f64 }).collect())
            .collect();
        let a = solve_assignment(&cost);
        assert_eq!(a.total_cost, 0.0);
        for (i, (r, c)) in a.pairs.iter().enumerate() {
            assert_eq!((*r, *c), (i, i));
        }
    }

    fn brute_force_cost(cost: &[Vec<f64>]) -> f64 {
        let n = cost.len();
        let m = cost[0].len();
        if n > m {
            let t: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| cost[i][j]).collect()).collect();
            return brute_force_cost(&t);
        }
        fn recurse(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == cost.len() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..cost[0].len() {
                if !used[j] {
                    used[j] = true;
                    let c = cost[row][j] + recurse(cost, row + 1, used);
                    used[j] = false;
                    best = best.min(c);
                }
            }
            best
        }
        recurse(cost, 0, &mut vec![false; m])
    }

    #[test]
    fn assignment_matches_brute_force_on_random_matrices() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(123);
        for _ in 0..60 {
            let n = rng.random_range(1..=5);
            let m = rng.random_range(1..=5);
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..m).map(|_| (rng.random::<f64>() * 20.0).round() / 2.0).collect())
                .collect();
            let a = solve_assignment(&cost);
            let bf = brute_force_cost(&cost);
            assert!(
                (a.total_cost - bf).abs() < 1e-9,
                "hungarian {} vs brute force {} on {cost:?}",
                a.total_cost,
                bf
            );
            assert_eq!(a.pairs.len(), n.min(m));
        }
    }

    fn inst(class_id: usize, centroid: Vec3, color: [f32; 3]) -> ObjectInstance {
        ObjectInstance {
            class_id,
            voxels: vec![0],
            centroid,
            footprint_center: centroid,
            color,
            openness: 0.0,
            voxel_count: 1,
        }
    }

    #[test]
    fn lone_instances_match_regardless_of_color() {
        let w = vec![inst(3, Vec3::new(0.0, 0.0, 0.0), [1.0, 0.0, 0.0])];
        let u = vec![inst(3, Vec3::new(1.0, 0.0, 0.0), [0.0, 0.0, 1.0])];
        let result = match_instances(&w, &u);
        assert_eq!(result.pairs.len(), 1);
        assert!(result.unmatched_walkthrough.is_empty());
        assert!(result.unmatched_unshuffle.is_empty());
    }

    #[test]
    fn color_matching_pairs_like_with_like() {
        let red = [0.9, 0.1, 0.1];
        let blue = [0.1, 0.1, 0.9];
        let w = vec![
            inst(3, Vec3::new(0.0, 0.0, 0.0), red),
            inst(3, Vec3::new(2.0, 0.0, 0.0), blue),
        ];
        // Positions swapped in the unshuffle phase.
        let u = vec![
            inst(3, Vec3::new(2.0, 0.0, 0.0), red),
            inst(3, Vec3::new(0.0, 0.0, 0.0), blue),
        ];
        let result = match_instances(&w, &u);
        assert_eq!(result.pairs.len(), 2);
        for pair in &result.pairs {
            assert_eq!(pair.walkthrough.color, pair.unshuffle.color);
        }
    }

    #[test]
    fn class_only_in_unshuffle_is_unmatched() {
        let w = vec![inst(3, Vec3::zeros(), [0.5; 3])];
        let u = vec![
            inst(3, Vec3::zeros(), [0.5; 3]),
            inst(7, Vec3::new(1.0, 0.0, 0.0), [0.2; 3]),
        ];
        let result = match_instances(&w, &u);
        assert_eq!(result.pairs.len(), 1);
        assert_eq!(result.unmatched_unshuffle.len(), 1);
        assert_eq!(result.unmatched_unshuffle[0].class_id, 7);
    }

    fn pair_at(dist: f64) -> MatchedPair {
        MatchedPair {
            walkthrough: inst(3, Vec3::new(0.0, 0.0, 0.0), [0.5; 3]),
            unshuffle: inst(3, Vec3::new(dist, 0.0, 0.0), [0.5; 3]),
            cost: 0.0,
        }
    }

    #[test]
    fn distance_at_threshold_is_not_a_disagreement() {
        let out = detect_disagreements(&[pair_at(0.04)], 0.05, 0.2);
        assert!(out.is_empty());
    }

    #[test]
    fn distance_beyond_threshold_is_a_disagreement() {
        let out = detect_disagreements(&[pair_at(0.06)], 0.05, 0.2);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].kind, DisagreementKind::Relocate);
        // Goal pose comes from the walkthrough map.
        assert_eq!(out[0].goal, Vec3::new(0.0, 0.0, 0.0));
        assert_eq!(out[0].current, Vec3::new(0.06, 0.0, 0.0));
    }

    #[test]
    fn identical_maps_produce_no_disagreements() {
        let map = map_with([4, 2, 4], 4, &[(1, 2, [0.3; 3]), (9, 3, [0.6; 3])]);
        let insts0 = label_instances(&map);
        let insts1 = label_instances(&map);
        let result = match_instances(&insts0, &insts1);
        let out = detect_disagreements(&result.pairs, 0.05, 0.2);
        assert!(out.is_empty());
    }

    #[test]
    fn openness_difference_at_same_position_is_openclose() {
        let mut w = inst(3, Vec3::zeros(), [0.5; 3]);
        w.openness = 1.0;
        let u = inst(3, Vec3::new(0.01, 0.0, 0.0), [0.5; 3]);
        let pair = MatchedPair {
            walkthrough: w,
            unshuffle: u,
            cost: 0.0,
        };
        let out = detect_disagreements(&[pair], 0.05, 0.2);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].kind, DisagreementKind::OpenClose);
        assert_eq!(out[0].goal_openness, 1.0);
    }

    #[test]
    fn swapping_maps_swaps_current_and_goal() {
        let w = vec![
            inst(3, Vec3::new(0.0, 0.0, 0.0), [0.9, 0.1, 0.1]),
            inst(3, Vec3::new(2.0, 0.0, 0.0), [0.1, 0.1, 0.9]),
        ];
        let u = vec![
            inst(3, Vec3::new(1.0, 0.0, 0.0), [0.9, 0.1, 0.1]),
            inst(3, Vec3::new(3.0, 0.0, 0.0), [0.1, 0.1, 0.9]),
        ];
        let fwd = detect_disagreements(&match_instances(&w, &u).pairs, 0.05, 0.2);
        let rev = detect_disagreements(&match_instances(&u, &w).pairs, 0.05, 0.2);
        assert_eq!(fwd.len(), rev.len());
        for f in &fwd {
            assert!(rev
                .iter()
                .any(|r| r.current == f.goal && r.goal == f.current && r.class_id == f.class_id));
        }
    }

    #[test]
    fn matching_is_class_preserving() {
        let w = vec![
            inst(3, Vec3::zeros(), [0.5; 3]),
            inst(4, Vec3::zeros(), [0.5; 3]),
        ];
        let u = vec![
            inst(4, Vec3::new(1.0, 0.0, 0.0), [0.5; 3]),
            inst(3, Vec3::new(1.0, 0.0, 0.0), [0.5; 3]),
        ];
        let result = match_instances(&w, &u);
        assert_eq!(result.pairs.len(), 2);
        for p in &result.pairs {
            assert_eq!(p.walkthrough.class_id, p.unshuffle.class_id);
        }
    }
}
