//! Traversability graph over ground-plane cells and shortest-path search.
//!
//! A navigation cell groups `cell_voxels` x `cell_voxels` map columns. A cell
//! is free iff no voxel inside its footprint is occupied between the floor
//! clearance layer and the agent height, and no occupied cell lies within the
//! inflation radius (Chebyshev distance on cells). Edges are 4-connected with
//! unit weight.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use thiserror::Error;

use crate::geometry::Vec3;
use crate::semantic_map::OccupancyGrid;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("cell {0:?} is not a free graph node")]
    NotANode([usize; 2]),
    #[error("goal {goal:?} unreachable from {start:?}")]
    Unreachable {
        start: [usize; 2],
        goal: [usize; 2],
    },
}

/// Parameters tying the nav grid to the voxel grid.
#[derive(Debug, Clone, Copy)]
pub struct NavParams {
    /// Map voxels per nav cell side.
    pub cell_voxels: usize,
    /// Lowest voxel layer checked for obstacles (skips the floor surface).
    pub min_layer: usize,
    /// Highest voxel layer checked, exclusive (agent height).
    pub max_layer: usize,
    /// Footprint inflation radius in cells.
    pub inflation: usize,
}

impl Default for NavParams {
    fn default() -> Self {
        Self {
            cell_voxels: 5,
            min_layer: 1,
            max_layer: 30,
            inflation: 1,
        }
    }
}

/// 4-connected grid graph of free ground-plane cells.
#[derive(Debug, Clone)]
pub struct NavGraph {
    pub cells: [usize; 2],
    /// World size of one cell in meters.
    pub cell_size: f64,
    /// World origin of cell (0, 0) on the ground plane (x, z).
    pub origin: [f64; 2],
    free: Vec<bool>,
    /// Cells directly containing obstacle voxels (before inflation).
    hard: Vec<bool>,
}

impl NavGraph {
    #[inline]
    pub fn index(&self, cell: [usize; 2]) -> usize {
        cell[0] * self.cells[1] + cell[1]
    }

    #[inline]
    pub fn is_free(&self, cell: [usize; 2]) -> bool {
        cell[0] < self.cells[0] && cell[1] < self.cells[1] && self.free[self.index(cell)]
    }

    pub fn num_free(&self) -> usize {
        self.free.iter().filter(|&&f| f).count()
    }

    pub fn free_cells(&self) -> impl Iterator<Item = [usize; 2]> + '_ {
        (0..self.cells[0]).flat_map(move |i| {
            (0..self.cells[1]).filter_map(move |k| {
                if self.free[i * self.cells[1] + k] {
                    Some([i, k])
                } else {
                    None
                }
            })
        })
    }

    /// Marks a cell blocked (used when a motion unexpectedly collides).
    pub fn block(&mut self, cell: [usize; 2]) {
        if cell[0] < self.cells[0] && cell[1] < self.cells[1] {
            let idx = self.index(cell);
            self.free[idx] = false;
        }
    }

    /// Forces a cell free; the agent's own cell is always a valid node.
    pub fn force_free(&mut self, cell: [usize; 2]) {
        if cell[0] < self.cells[0] && cell[1] < self.cells[1] {
            let idx = self.index(cell);
            self.free[idx] = true;
        }
    }

    /// Whether a cell directly contains obstacle voxels (inflation aside).
    pub fn is_hard_blocked(&self, cell: [usize; 2]) -> bool {
        cell[0] >= self.cells[0] || cell[1] >= self.cells[1] || self.hard[self.index(cell)]
    }

    /// A copy of this graph where inflation-only cells count as free. Used
    /// for close-quarters interaction approaches, where the footprint margin
    /// would otherwise seal off every cell in interaction range.
    pub fn soft_permissive(&self) -> NavGraph {
        let mut out = self.clone();
        for i in 0..out.free.len() {
            if !out.hard[i] {
                out.free[i] = true;
            }
        }
        out
    }

    /// Carves the shortest corridor of inflation-only cells from `start` to
    /// the nearest free cell and marks it free. An agent standing inside an
    /// inflated margin can always step back out; without this it would be
    /// walled in by its own map refinements.
    pub fn carve_escape(&mut self, start: [usize; 2]) {
        if !self.is_free(start) {
            return;
        }
        let has_free_neighbor = |g: &NavGraph, c: [usize; 2]| {
            g.neighbors(c).next().is_some()
        };
        if has_free_neighbor(self, start) {
            return;
        }
        // BFS through soft-blocked cells to the closest genuinely free cell.
        let n = self.cells[0] * self.cells[1];
        let mut parent = vec![usize::MAX; n];
        let mut seen = vec![false; n];
        let mut queue = std::collections::VecDeque::new();
        seen[self.index(start)] = true;
        queue.push_back(start);
        let mut exit = None;
        'bfs: while let Some(cell) = queue.pop_front() {
            const OFFSETS: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
            for (di, dk) in OFFSETS {
                let i = cell[0] as isize + di;
                let k = cell[1] as isize + dk;
                if i < 0 || k < 0 || i as usize >= self.cells[0] || k as usize >= self.cells[1] {
                    continue;
                }
                let nb = [i as usize, k as usize];
                let idx = self.index(nb);
                if seen[idx] {
                    continue;
                }
                seen[idx] = true;
                if self.free[idx] {
                    parent[idx] = self.index(cell);
                    exit = Some(nb);
                    break 'bfs;
                }
                if !self.hard[idx] {
                    parent[idx] = self.index(cell);
                    queue.push_back(nb);
                }
            }
        }
        if let Some(exit) = exit {
            let mut cur = self.index(exit);
            let start_idx = self.index(start);
            while cur != start_idx && cur != usize::MAX {
                self.free[cur] = true;
                cur = parent[cur];
            }
        }
    }

    /// Opens the shortest corridor of inflation-only cells from free space
    /// toward `target`, so conservatively inflated pockets stay workable.
    /// Returns whether any cell adjacent to the target region became free.
    pub fn carve_to(&mut self, target: [usize; 2]) -> bool {
        if target[0] >= self.cells[0] || target[1] >= self.cells[1] {
            return false;
        }
        let n = self.cells[0] * self.cells[1];
        let mut parent = vec![usize::MAX; n];
        let mut seen = vec![false; n];
        let mut queue = std::collections::VecDeque::new();
        let start_idx = self.index(target);
        seen[start_idx] = true;
        queue.push_back(target);
        // Seed the whole 8-neighborhood: a snugly wedged target may touch
        // hard cells on every 4-neighbor.
        for di in -1isize..=1 {
            for dk in -1isize..=1 {
                let i = target[0] as isize + di;
                let k = target[1] as isize + dk;
                if i < 0 || k < 0 || i as usize >= self.cells[0] || k as usize >= self.cells[1] {
                    continue;
                }
                let nb = [i as usize, k as usize];
                let idx = self.index(nb);
                if !seen[idx] && !self.hard[idx] && !self.free[idx] {
                    seen[idx] = true;
                    parent[idx] = start_idx;
                    queue.push_back(nb);
                }
            }
        }
        let mut exit: Option<[usize; 2]> = None;
        'bfs: while let Some(cell) = queue.pop_front() {
            const OFFSETS: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
            for (di, dk) in OFFSETS {
                let i = cell[0] as isize + di;
                let k = cell[1] as isize + dk;
                if i < 0 || k < 0 || i as usize >= self.cells[0] || k as usize >= self.cells[1] {
                    continue;
                }
                let nb = [i as usize, k as usize];
                let idx = self.index(nb);
                if seen[idx] {
                    continue;
                }
                seen[idx] = true;
                if self.free[idx] {
                    parent[idx] = self.index(cell);
                    exit = Some(nb);
                    break 'bfs;
                }
                if !self.hard[idx] {
                    parent[idx] = self.index(cell);
                    queue.push_back(nb);
                }
            }
        }
        match exit {
            Some(exit) => {
                let mut cur = parent[self.index(exit)];
                while cur != usize::MAX && cur != start_idx {
                    self.free[cur] = true;
                    cur = parent[cur];
                }
                true
            }
            None => false,
        }
    }

    /// Ground-plane world center of a cell.
    pub fn center(&self, cell: [usize; 2]) -> Vec3 {
        Vec3::new(
            self.origin[0] + (cell[0] as f64 + 0.5) * self.cell_size,
            0.0,
            self.origin[1] + (cell[1] as f64 + 0.5) * self.cell_size,
        )
    }

    /// Cell containing a ground-plane world position, clamped to bounds.
    pub fn cell_of(&self, x: f64, z: f64) -> [usize; 2] {
        let i = ((x - self.origin[0]) / self.cell_size).floor();
        let k = ((z - self.origin[1]) / self.cell_size).floor();
        [
            (i.max(0.0) as usize).min(self.cells[0] - 1),
            (k.max(0.0) as usize).min(self.cells[1] - 1),
        ]
    }

    /// Neighbors in fixed lexicographic order for deterministic ties.
    fn neighbors(&self, cell: [usize; 2]) -> impl Iterator<Item = [usize; 2]> + '_ {
        const OFFSETS: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
        OFFSETS.iter().filter_map(move |&(di, dk)| {
            let i = cell[0] as isize + di;
            let k = cell[1] as isize + dk;
            if i < 0 || k < 0 {
                return None;
            }
            let c = [i as usize, k as usize];
            if self.is_free(c) {
                Some(c)
            } else {
                None
            }
        })
    }
}

/// Builds the traversability graph from voxel occupancy.
///
/// The occupancy grid's vertical axis is `dims[1]`; cells tile the (x, z)
/// ground plane. `origin` and `voxel_size` describe the voxel grid the
/// occupancy came from.
pub fn build_nav_graph(
    occ: &OccupancyGrid,
    origin: [f64; 2],
    voxel_size: f64,
    params: &NavParams,
) -> NavGraph {
    let [nx, ny, nz] = occ.dims;
    let cv = params.cell_voxels;
    let cells = [nx / cv, nz / cv];
    let y0 = params.min_layer.min(ny);
    let y1 = params.max_layer.min(ny);

    // Pass 1: per-cell obstacle columns.
    let mut blocked = vec![false; cells[0] * cells[1]];
    for ci in 0..cells[0] {
        for ck in 0..cells[1] {
            'cell: for x in ci * cv..(ci + 1) * cv {
                for z in ck * cv..(ck + 1) * cv {
                    for y in y0..y1 {
                        if occ.data[(x * ny + y) * nz + z] {
                            blocked[ci * cells[1] + ck] = true;
                            break 'cell;
                        }
                    }
                }
            }
        }
    }

    // Pass 2: inflate by Chebyshev radius.
    let r = params.inflation as isize;
    let mut free = vec![true; cells[0] * cells[1]];
    for ci in 0..cells[0] {
        for ck in 0..cells[1] {
            'inflate: for di in -r..=r {
                for dk in -r..=r {
                    let i = ci as isize + di;
                    let k = ck as isize + dk;
                    if i < 0 || k < 0 || i >= cells[0] as isize || k >= cells[1] as isize {
                        continue;
                    }
                    if blocked[i as usize * cells[1] + k as usize] {
                        free[ci * cells[1] + ck] = false;
                        break 'inflate;
                    }
                }
            }
        }
    }

    NavGraph {
        cells,
        cell_size: voxel_size * cv as f64,
        origin,
        free,
        hard: blocked,
    }
}

/// Dijkstra shortest path over unit-weight edges. Ties are broken by the
/// lexicographic order of cell indices, so identical inputs always produce
/// the identical path.
pub fn shortest_path(
    graph: &NavGraph,
    start: [usize; 2],
    goal: [usize; 2],
) -> Result<Vec<[usize; 2]>, PlanError> {
    if !graph.is_free(start) {
        return Err(PlanError::NotANode(start));
    }
    if !graph.is_free(goal) {
        return Err(PlanError::NotANode(goal));
    }
    let n = graph.cells[0] * graph.cells[1];
    let mut dist = vec![u32::MAX; n];
    let mut parent = vec![usize::MAX; n];
    let mut heap: BinaryHeap<Reverse<(u32, usize)>> = BinaryHeap::new();
    let s = graph.index(start);
    dist[s] = 0;
    heap.push(Reverse((0, s)));
    while let Some(Reverse((d, node))) = heap.pop() {
        if d > dist[node] {
            continue;
        }
        if node == graph.index(goal) {
            break;
        }
        let cell = [node / graph.cells[1], node % graph.cells[1]];
        for nb in graph.neighbors(cell) {
            let ni = graph.index(nb);
            let nd = d + 1;
            if nd < dist[ni] || (nd == dist[ni] && node < parent[ni]) {
                dist[ni] = nd;
                parent[ni] = node;
                heap.push(Reverse((nd, ni)));
            }
        }
    }
    let g = graph.index(goal);
    if dist[g] == u32::MAX {
        return Err(PlanError::Unreachable { start, goal });
    }
    let mut path = Vec::with_capacity(dist[g] as usize + 1);
    let mut cur = g;
    loop {
        path.push([cur / graph.cells[1], cur % graph.cells[1]]);
        if cur == s {
            break;
        }
        cur = parent[cur];
    }
    path.reverse();
    Ok(path)
}

/// Cells reachable from `start`, as a boolean table indexed by `NavGraph::index`.
pub fn reachable_set(graph: &NavGraph, start: [usize; 2]) -> Vec<bool> {
    let mut seen = vec![false; graph.cells[0] * graph.cells[1]];
    if !graph.is_free(start) {
        return seen;
    }
    let mut queue = std::collections::VecDeque::new();
    seen[graph.index(start)] = true;
    queue.push_back(start);
    while let Some(cell) = queue.pop_front() {
        for nb in graph.neighbors(cell) {
            let i = graph.index(nb);
            if !seen[i] {
                seen[i] = true;
                queue.push_back(nb);
            }
        }
    }
    seen
}

/// Nearest reachable free cell to a ground-plane target, by squared world
/// distance with lexicographic tie-break. `None` when nothing is reachable.
pub fn nearest_reachable(
    graph: &NavGraph,
    reachable: &[bool],
    target_x: f64,
    target_z: f64,
) -> Option<[usize; 2]> {
    let mut best: Option<([usize; 2], f64)> = None;
    for cell in graph.free_cells() {
        if !reachable[graph.index(cell)] {
            continue;
        }
        let c = graph.center(cell);
        let d2 = (c.x - target_x).powi(2) + (c.z - target_z).powi(2);
        best = match best {
            None => Some((cell, d2)),
            Some((bc, bd)) if d2 < bd || (d2 == bd && cell < bc) => Some((cell, d2)),
            other => other,
        };
    }
    best.map(|(c, _)| c)
}
