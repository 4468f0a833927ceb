//! Semantic search: a Gaussian-mixture expert over object locations, a
//! convolutional policy trained by maximum likelihood against it, and
//! feasibility-filtered navigation-goal sampling with a uniform baseline.

mod net;
mod train;

pub use net::{
    backward, cross_entropy_and_grad, forward, forward_traced, softmax2, ConvLayer, LayerGrad,
    PolicyMeta, PolicyParams, HIDDEN_WIDTH, KERNEL, NUM_LAYERS,
};
pub use train::{
    load_dataset, loss_and_grad, train_policy, SearchDataset, SearchSample, TrainConfig,
    TrainReport,
};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

use crate::geometry::{GridSpec, Vec3};
use crate::planner::{nearest_reachable, reachable_set, NavGraph};
use crate::semantic_map::SemanticMap;

const POLICY_MAGIC: &[u8; 5] = b"SPOL1";
const POLICY_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("agent boxed in: no reachable free navigation column")]
    AgentBoxedIn,
    #[error("map depth/classes ({got_depth}, {got_classes}) do not match policy ({want_depth}, {want_classes})")]
    DimensionMismatch {
        want_depth: usize,
        want_classes: usize,
        got_depth: usize,
        got_classes: usize,
    },
    #[error("empty training dataset")]
    EmptyDataset,
    #[error("policy file error at offset {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Gaussian mixture over the locations of the objects the agent should
/// rearrange: one isotropic mode per object.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertDistribution {
    pub modes: Vec<Vec3>,
    pub sigma: f64,
}

impl ExpertDistribution {
    pub fn new(modes: Vec<Vec3>, sigma: f64) -> Self {
        assert!(!modes.is_empty(), "expert needs at least one mode");
        assert!(sigma > 0.0, "sigma must be positive");
        Self { modes, sigma }
    }
}

/// Mixture density at a point: `(1/K) * sum_k N(x; mu_k, sigma^2 I)` with the
/// isotropic 3D Gaussian.
pub fn expert_density(x: &Vec3, expert: &ExpertDistribution) -> f64 {
    let s2 = expert.sigma * expert.sigma;
    let norm = (std::f64::consts::TAU * s2).powf(-1.5);
    let mut sum = 0.0;
    for mu in &expert.modes {
        let d2 = (x - mu).norm_squared();
        sum += norm * (-d2 / (2.0 * s2)).exp();
    }
    sum / expert.modes.len() as f64
}

/// Discretizes the expert over ground-plane columns of `grid`.
///
/// Height is marginalized by evaluating each mode at its own height, so the
/// per-column score is `sum_k N((cx, mu_k.y, cz); mu_k, sigma^2 I)`; the
/// table is then normalized to sum to one.
pub fn discretize_expert(expert: &ExpertDistribution, grid: &GridSpec) -> Array2<f64> {
    let (nx, nz) = (grid.dims[0], grid.dims[2]);
    let mut table = Array2::zeros((nx, nz));
    for i in 0..nx {
        for k in 0..nz {
            let c = grid.column_center(i, k);
            let mut score = 0.0;
            for mu in &expert.modes {
                let probe = Vec3::new(c.x, mu.y, c.z);
                score += expert_density(&probe, &ExpertDistribution {
                    modes: vec![*mu],
                    sigma: expert.sigma,
                });
            }
            table[[i, k]] = score / expert.modes.len() as f64;
        }
    }
    let sum = table.sum();
    if sum > 0.0 {
        table.mapv_inplace(|v| v / sum);
    } else {
        table.fill(1.0 / (nx * nz) as f64);
    }
    table
}

/// Stacks a map's vertical and class axes into convolution channels:
/// channel `y * C + c` holds the class-`c` probabilities of voxel layer `y`.
pub fn map_input_tensor(map: &SemanticMap) -> Array3<f64> {
    let grid = map.grid();
    let [nx, ny, nz] = grid.dims;
    let c = grid.num_classes;
    let mut input = Array3::zeros((ny * c, nx, nz));
    for flat in map.occupied_voxels() {
        let [x, y, z] = grid.unflat(flat);
        let probs = map.probs_at(flat);
        for (cls, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                input[[y * c + cls, x, z]] = p;
            }
        }
    }
    input
}

/// Runs the policy network on a map, returning per-column logits `(nx, nz)`.
///
/// The map's vertical extent and class count must match the policy's
/// training dimensions; the ground-plane size is free because the network is
/// fully convolutional.
pub fn policy_forward(params: &PolicyParams, map: &SemanticMap) -> Result<Array2<f64>, SearchError> {
    let grid = map.grid();
    if grid.dims[1] != params.meta.map_depth || grid.num_classes != params.meta.num_classes {
        return Err(SearchError::DimensionMismatch {
            want_depth: params.meta.map_depth,
            want_classes: params.meta.num_classes,
            got_depth: grid.dims[1],
            got_classes: grid.num_classes,
        });
    }
    Ok(forward(params, &map_input_tensor(map)))
}

/// How mapping-phase navigation goals are chosen.
#[derive(Clone)]
pub enum SearchMode {
    /// Sample from the trained policy over pooled map columns.
    Trained(std::sync::Arc<PolicyParams>),
    /// Uniform over free navigation columns (the no-semantic-search baseline).
    Uniform,
    /// Oracle: cycle through the given ground-truth object locations.
    GroundTruth(Vec<Vec3>),
}

impl std::fmt::Debug for SearchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SearchMode::Trained(_) => write!(f, "Trained"),
            SearchMode::Uniform => write!(f, "Uniform"),
            SearchMode::GroundTruth(locs) => write!(f, "GroundTruth({} locations)", locs.len()),
        }
    }
}

const GOAL_SAMPLE_RETRIES: usize = 64;

/// Samples a feasible navigation goal.
///
/// Draws a column (from the policy, uniformly, or from the oracle list via
/// `goal_index`), rejects columns whose navigation cell is not free and
/// reachable from `agent_cell`, retries up to 64 times, then falls back to
/// the nearest reachable free cell to the last draw. Returns a world point
/// at ground height.
pub fn sample_goal(
    mode: &SearchMode,
    map: &SemanticMap,
    nav: &NavGraph,
    agent_cell: [usize; 2],
    goal_index: usize,
    rng: &mut impl Rng,
) -> Result<Vec3, SearchError> {
    let reachable = reachable_set(nav, agent_cell);
    let feasible = |cell: [usize; 2]| nav.is_free(cell) && reachable[nav.index(cell)];

    let mut last_target: Option<Vec3> = None;
    match mode {
        SearchMode::Uniform => {
            let free: Vec<[usize; 2]> = nav.free_cells().collect();
            if !free.is_empty() {
                for _ in 0..GOAL_SAMPLE_RETRIES {
                    let cell = free[rng.random_range(0..free.len())];
                    last_target = Some(nav.center(cell));
                    if feasible(cell) {
                        return Ok(nav.center(cell));
                    }
                }
            }
        }
        SearchMode::Trained(params) => {
            let pooled = if params.meta.pool_factor > 1 {
                map.mean_pooled(params.meta.pool_factor)
            } else {
                map.clone()
            };
            let logits = policy_forward(params, &pooled)?;
            let probs = softmax2(&logits);
            let grid = pooled.grid().clone();
            for _ in 0..GOAL_SAMPLE_RETRIES {
                let r: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = (grid.dims[0] - 1, grid.dims[2] - 1);
                'scan: for i in 0..grid.dims[0] {
                    for k in 0..grid.dims[2] {
                        acc += probs[[i, k]];
                        if r < acc {
                            chosen = (i, k);
                            break 'scan;
                        }
                    }
                }
                let center = grid.column_center(chosen.0, chosen.1);
                last_target = Some(center);
                let cell = nav.cell_of(center.x, center.z);
                if feasible(cell) {
                    return Ok(nav.center(cell));
                }
            }
        }
        SearchMode::GroundTruth(locations) => {
            if locations.is_empty() {
                // No oracle targets (nothing was shuffled): any reachable
                // column serves.
                last_target = Some(nav.center(agent_cell));
            } else {
                let target = locations[goal_index % locations.len()];
                let cycle = goal_index / locations.len();
                last_target = Some(target);
                let cell = nav.cell_of(target.x, target.z);
                if cycle == 0 && feasible(cell) {
                    return Ok(nav.center(cell));
                }
                // Revisits approach from rotating sides so occlusions from
                // one viewpoint do not persist.
                let mut ring: Vec<([usize; 2], f64, i64)> = nav
                    .free_cells()
                    .filter(|c| reachable[nav.index(*c)])
                    .filter_map(|c| {
                        let center = nav.center(c);
                        let dx = center.x - target.x;
                        let dz = center.z - target.z;
                        let d = (dx * dx + dz * dz).sqrt();
                        if d <= 1.6 {
                            let quad = dz.atan2(dx).div_euclid(std::f64::consts::FRAC_PI_2) as i64;
                            Some((c, d, quad.rem_euclid(4)))
                        } else {
                            None
                        }
                    })
                    .collect();
                ring.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
                let want_quad = (cycle as i64) % 4;
                if let Some((c, _, _)) = ring
                    .iter()
                    .find(|(_, _, q)| *q == want_quad)
                    .or_else(|| ring.first())
                {
                    return Ok(nav.center(*c));
                }
            }
        }
    }

    let target = last_target.unwrap_or_else(|| nav.center(agent_cell));
    nearest_reachable(nav, &reachable, target.x, target.z)
        .map(|cell| nav.center(cell))
        .ok_or(SearchError::AgentBoxedIn)
}

/// Writes a policy checkpoint: `SPOL1` header, architecture descriptor, then
/// f32 weight blobs in layer order (weights row-major, then biases).
pub fn save_policy(params: &PolicyParams, path: &Path) -> Result<(), SearchError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(POLICY_MAGIC)?;
    w.write_u16::<LittleEndian>(POLICY_VERSION)?;
    w.write_u32::<LittleEndian>(params.meta.pool_factor as u32)?;
    w.write_u32::<LittleEndian>(params.meta.map_depth as u32)?;
    w.write_u32::<LittleEndian>(params.meta.num_classes as u32)?;
    w.write_u32::<LittleEndian>(params.layers.len() as u32)?;
    for layer in &params.layers {
        w.write_u32::<LittleEndian>(layer.in_channels as u32)?;
        w.write_u32::<LittleEndian>(layer.out_channels as u32)?;
        w.write_u32::<LittleEndian>(KERNEL as u32)?;
    }
    for layer in &params.layers {
        for &v in layer.weight.iter() {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
        for &v in layer.bias.iter() {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_policy(path: &Path) -> Result<PolicyParams, SearchError> {
    let bytes = std::fs::read(path)?;
    let mut cursor = std::io::Cursor::new(&bytes);
    let err_at = |cursor: &std::io::Cursor<&Vec<u8>>, reason: String| SearchError::Format {
        offset: cursor.position(),
        reason,
    };

    let mut magic = [0u8; 5];
    std::io::Read::read_exact(&mut cursor, &mut magic)
        .map_err(|_| err_at(&cursor, "truncated magic".into()))?;
    if &magic != POLICY_MAGIC {
        return Err(SearchError::Format {
            offset: 0,
            reason: format!("bad magic {magic:?}"),
        });
    }
    let version = cursor
        .read_u16::<LittleEndian>()
        .map_err(|_| err_at(&cursor, "truncated version".into()))?;
    if version != POLICY_VERSION {
        return Err(SearchError::Format {
            offset: 5,
            reason: format!("unsupported version {version}"),
        });
    }
    let read_u32 = |cursor: &mut std::io::Cursor<&Vec<u8>>, what: &str| {
        cursor
            .read_u32::<LittleEndian>()
            .map_err(|_| SearchError::Format {
                offset: cursor.position(),
                reason: format!("truncated {what}"),
            })
    };
    let pool_factor = read_u32(&mut cursor, "pool factor")? as usize;
    let map_depth = read_u32(&mut cursor, "map depth")? as usize;
    let num_classes = read_u32(&mut cursor, "class count")? as usize;
    let num_layers = read_u32(&mut cursor, "layer count")? as usize;
    if num_layers == 0 || num_layers > 64 {
        return Err(SearchError::Format {
            offset: cursor.position(),
            reason: format!("implausible layer count {num_layers}"),
        });
    }
    let mut shapes = Vec::with_capacity(num_layers);
    for _ in 0..num_layers {
        let in_ch = read_u32(&mut cursor, "in channels")? as usize;
        let out_ch = read_u32(&mut cursor, "out channels")? as usize;
        let k = read_u32(&mut cursor, "kernel")? as usize;
        if k != KERNEL {
            return Err(SearchError::Format {
                offset: cursor.position(),
                reason: format!("unsupported kernel {k}"),
            });
        }
        shapes.push((in_ch, out_ch));
    }
    let mut layers = Vec::with_capacity(num_layers);
    for (in_ch, out_ch) in shapes {
        let mut weight = Array2::zeros((out_ch, in_ch * KERNEL * KERNEL));
        for v in weight.iter_mut() {
            *v = cursor
                .read_f32::<LittleEndian>()
                .map_err(|_| SearchError::Format {
                    offset: cursor.position(),
                    reason: "truncated weights".into(),
                })? as f64;
        }
        let mut bias = ndarray::Array1::zeros(out_ch);
        for v in bias.iter_mut() {
            *v = cursor
                .read_f32::<LittleEndian>()
                .map_err(|_| SearchError::Format {
                    offset: cursor.position(),
                    reason: "truncated biases".into(),
                })? as f64;
        }
        layers.push(ConvLayer {
            weight,
            bias,
            in_channels: in_ch,
            out_channels: out_ch,
        });
    }
    Ok(PolicyParams {
        layers,
        meta: PolicyMeta {
            pool_factor,
            map_depth,
            num_classes,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GridSpec;
    use crate::planner::{build_nav_graph, NavParams};
    use crate::semantic_map::{OccupancyGrid, Phase};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn density_peak_at_single_mode() {
        let expert = ExpertDistribution::new(vec![Vec3::new(1.0, 0.2, 3.0)], 0.75);
        let peak = expert_density(&Vec3::new(1.0, 0.2, 3.0), &expert);
        let expected = (std::f64::consts::TAU * 0.75 * 0.75).powf(-1.5);
        assert_relative_eq!(peak, expected, max_relative = 1e-12);
    }

    #[test]
    fn density_is_isotropic() {
        let expert = ExpertDistribution::new(vec![Vec3::new(0.0, 0.0, 0.0)], 0.5);
        let a = expert_density(&Vec3::new(0.3, 0.0, 0.0), &expert);
        let b = expert_density(&Vec3::new(0.0, -0.3, 0.0), &expert);
        let c = expert_density(&Vec3::new(0.0, 0.0, 0.3), &expert);
        assert_relative_eq!(a, b, max_relative = 1e-12);
        assert_relative_eq!(a, c, max_relative = 1e-12);
    }

    #[test]
    fn duplicate_modes_match_single_mode() {
        let mu = Vec3::new(0.4, 0.1, 0.9);
        let one = ExpertDistribution::new(vec![mu], 0.75);
        let two = ExpertDistribution::new(vec![mu, mu], 0.75);
        for probe in [Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.3, 0.5)] {
            assert_relative_eq!(
                expert_density(&probe, &one),
                expert_density(&probe, &two),
                max_relative = 1e-12
            );
        }
    }

    fn grid_8x8() -> GridSpec {
        GridSpec::new([8, 4, 8], 0.5, Vec3::zeros(), 3)
    }

    #[test]
    fn discretized_expert_peaks_at_mode_column() {
        let grid = grid_8x8();
        // Mode at the center of column (2, 5).
        let mode = grid.column_center(2, 5) + Vec3::new(0.0, 0.3, 0.0);
        let table = discretize_expert(&ExpertDistribution::new(vec![mode], 0.75), &grid);
        let mut best = (0, 0);
        let mut best_v = f64::MIN;
        for i in 0..8 {
            for k in 0..8 {
                if table[[i, k]] > best_v {
                    best_v = table[[i, k]];
                    best = (i, k);
                }
            }
        }
        assert_eq!(best, (2, 5));
        assert!((table.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn translated_modes_shift_the_table() {
        // Grid large enough that boundary truncation is negligible against
        // the comparison tolerance.
        let grid = GridSpec::new([20, 4, 20], 0.5, Vec3::zeros(), 3);
        let mode = grid.column_center(9, 10) + Vec3::new(0.0, 0.2, 0.0);
        let a = discretize_expert(&ExpertDistribution::new(vec![mode], 0.75), &grid);
        let shifted = mode + Vec3::new(grid.voxel_size, 0.0, 0.0);
        let b = discretize_expert(&ExpertDistribution::new(vec![shifted], 0.75), &grid);
        for i in 0..19 {
            for k in 0..20 {
                if a[[i, k]] < 1e-12 && b[[i + 1, k]] < 1e-12 {
                    continue;
                }
                assert_relative_eq!(a[[i, k]], b[[i + 1, k]], max_relative = 1e-6);
            }
        }
    }

    fn open_nav(cells: usize) -> NavGraph {
        let occ = OccupancyGrid {
            dims: [cells, 2, cells],
            data: vec![false; cells * 2 * cells],
        };
        build_nav_graph(
            &occ,
            [0.0, 0.0],
            0.25,
            &NavParams {
                cell_voxels: 1,
                min_layer: 1,
                max_layer: 2,
                inflation: 0,
            },
        )
    }

    #[test]
    fn uniform_sampling_is_uniform_over_free_columns() {
        let nav = open_nav(5);
        let grid = GridSpec::new([5, 2, 5], 0.25, Vec3::zeros(), 3);
        let map = SemanticMap::new(grid, 0.5, Phase::Walkthrough);
        let mut rng = ChaCha8Rng::seed_from_u64(1236);
        let mut counts = std::collections::HashMap::new();
        let n = 10_000;
        for _ in 0..n {
            let goal = sample_goal(&SearchMode::Uniform, &map, &nav, [0, 0], 0, &mut rng).unwrap();
            let cell = nav.cell_of(goal.x, goal.z);
            *counts.entry(cell).or_insert(0usize) += 1;
        }
        let k = 25.0;
        let mean = n as f64 / k;
        let sigma = (n as f64 * (1.0 / k) * (1.0 - 1.0 / k)).sqrt();
        for i in 0..5 {
            for kz in 0..5 {
                let c = *counts.get(&[i, kz]).unwrap_or(&0) as f64;
                assert!(
                    (c - mean).abs() <= 3.0 * sigma,
                    "cell ({i},{kz}) count {c} vs mean {mean} +- {sigma}"
                );
            }
        }
    }

    #[test]
    fn concentrated_mass_returns_that_column() {
        // A trained-mode policy whose softmax is concentrated: emulate by a
        // ground-truth mode pointing at one reachable column.
        let nav = open_nav(5);
        let grid = GridSpec::new([5, 2, 5], 0.25, Vec3::zeros(), 3);
        let map = SemanticMap::new(grid, 0.5, Phase::Walkthrough);
        let target = nav.center([3, 4]);
        let mode = SearchMode::GroundTruth(vec![target]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let goal = sample_goal(&mode, &map, &nav, [0, 0], 0, &mut rng).unwrap();
        assert_eq!(nav.cell_of(goal.x, goal.z), [3, 4]);
    }

    #[test]
    fn unreachable_mass_falls_back_to_nearest_reachable() {
        // Wall the right half off; target sits behind the wall.
        let mut nav = open_nav(7);
        for k in 0..7 {
            nav.block([3, k]);
        }
        let grid = GridSpec::new([7, 2, 7], 0.25, Vec3::zeros(), 3);
        let map = SemanticMap::new(grid, 0.5, Phase::Walkthrough);
        let target = nav.center([6, 3]);
        let mode = SearchMode::GroundTruth(vec![target]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let goal = sample_goal(&mode, &map, &nav, [0, 3], 0, &mut rng).unwrap();
        let cell = nav.cell_of(goal.x, goal.z);
        // Nearest reachable cell to the target is on the wall's near side.
        assert_eq!(cell, [2, 3]);
    }

    #[test]
    fn boxed_in_agent_is_an_error() {
        let mut nav = open_nav(3);
        for i in 0..3 {
            for k in 0..3 {
                nav.block([i, k]);
            }
        }
        let grid = GridSpec::new([3, 2, 3], 0.25, Vec3::zeros(), 3);
        let map = SemanticMap::new(grid, 0.5, Phase::Walkthrough);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out = sample_goal(&SearchMode::Uniform, &map, &nav, [1, 1], 0, &mut rng);
        assert!(matches!(out, Err(SearchError::AgentBoxedIn)));
    }

    #[test]
    fn checkpoint_round_trip_preserves_f32_weights() {
        let meta = PolicyMeta {
            pool_factor: 8,
            map_depth: 4,
            num_classes: 5,
        };
        let params = PolicyParams::init(meta, &mut ChaCha8Rng::seed_from_u64(9));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.spol");
        save_policy(&params, &path).unwrap();
        let loaded = load_policy(&path).unwrap();
        assert_eq!(loaded.meta, params.meta);
        assert_eq!(loaded.layers.len(), params.layers.len());
        for (a, b) in params.layers.iter().zip(&loaded.layers) {
            for (&x, &y) in a.weight.iter().zip(b.weight.iter()) {
                assert_eq!(x as f32, y as f32);
            }
        }
    }

    #[test]
    fn corrupt_checkpoint_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.spol");
        std::fs::write(&path, b"WRONG!!").unwrap();
        assert!(matches!(
            load_policy(&path),
            Err(SearchError::Format { .. })
        ));
    }
}
