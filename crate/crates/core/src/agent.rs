//! Episode orchestration: two semantic-search mapping phases, map diffing,
//! and deterministic pick-and-place resolution of the disagreements.
//!
//! A phase loop is observe -> perceive -> back-project -> voxelize -> update
//! map; whenever the current navigation goal is reached or absent, a new one
//! is sampled from the search policy and planned with the shortest-path
//! planner. The agent rotates a full turn at the start of a phase and at
//! every reached goal to widen coverage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use thiserror::Error;

use crate::diffing::{
    detect_disagreements, filter_small_instances, label_instances, match_instances,
    merge_nearby_instances, Disagreement, DisagreementKind,
};
use crate::geometry::{
    depth_to_pointcloud, transform_to_world, voxelize, CameraIntrinsics, GeometryError, GridSpec,
    Vec3,
};
use crate::perception::{filter_detections, simulate_detections, DetectorNoise, SegmentationFrame};
use crate::planner::{build_nav_graph, shortest_path, NavGraph, NavParams};
use crate::search_policy::{sample_goal, SearchError, SearchMode};
use crate::semantic_map::{MapError, Phase, SemanticMap};
use crate::simulator::{
    evaluate_metrics, Action, EpisodeSpec, Metrics, Observation, SimError, SimState,
    BACKGROUND_CLASSES, EYE_HEIGHT_M, NUM_CLASSES, OPENABLE_CLASSES,
};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Map(#[from] MapError),
}

/// Exploration budget for one mapping phase.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PhaseBudget {
    pub max_goals: usize,
    pub max_steps: usize,
}

impl Default for PhaseBudget {
    fn default() -> Self {
        Self {
            max_goals: 10,
            max_steps: 300,
        }
    }
}

#[derive(Debug, Clone)]
pub enum PerceptionMode {
    GroundTruth,
    Noisy(DetectorNoise),
}

/// Everything that parameterizes an episode run.
#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub epsilon: f64,
    pub confidence_threshold: f32,
    pub perception: PerceptionMode,
    pub search: SearchMode,
    pub mapping_budget: PhaseBudget,
    pub resolution_max_steps: usize,
    pub image_side: usize,
    pub voxel_size: f64,
    pub map_height_voxels: usize,
    pub nav: NavParams,
    pub disagreement_threshold: f64,
    pub openness_threshold: f32,
    pub min_instance_voxels: usize,
    pub max_depth_range: f64,
    pub max_diff_rounds: usize,
    /// Max distance between a frame detection's centroid and the targeted
    /// map position when resolving which object to pick.
    pub pick_match_tolerance: f64,
    /// After navigating to a relocation target, skip it when the freshly
    /// observed object position already agrees with the goal map within this
    /// distance; guards against acting on map estimation noise.
    pub verify_skip_threshold: f64,
    /// Minimum walkthrough-instance size before a relocation is acted on.
    pub action_min_goal_voxels: usize,
    /// Record a per-step trace in the episode result.
    pub trace_steps: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.5,
            confidence_threshold: 0.9,
            perception: PerceptionMode::GroundTruth,
            search: SearchMode::Uniform,
            mapping_budget: PhaseBudget::default(),
            resolution_max_steps: 400,
            image_side: 64,
            voxel_size: 0.05,
            map_height_voxels: 32,
            nav: NavParams::default(),
            disagreement_threshold: 0.05,
            openness_threshold: 0.2,
            min_instance_voxels: 2,
            max_depth_range: 10.0,
            max_diff_rounds: 4,
            pick_match_tolerance: 0.25,
            verify_skip_threshold: 0.16,
            action_min_goal_voxels: 4,
            trace_steps: false,
        }
    }
}

/// One per-step trace event for the episode JSONL log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEvent {
    pub phase: u8,
    pub step: u32,
    pub action: String,
    pub success: bool,
    pub reason: Option<String>,
    pub detections: usize,
    pub map_occupied: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GtShuffleRow {
    pub id: u32,
    pub class_id: usize,
    pub goal: [f64; 3],
    pub shuffled: [f64; 3],
    pub openness_change: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRow {
    pub round: usize,
    pub class_id: usize,
    pub kind: String,
    pub current: [f64; 3],
    pub goal: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PickRow {
    pub object_id: u32,
    pub class_id: usize,
    pub shuffled: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttemptRow {
    pub class_id: usize,
    pub kind: String,
    pub outcome: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct StepCounts {
    pub walkthrough: u32,
    pub unshuffle: u32,
    pub resolution: u32,
}

/// Serializable per-episode log row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub metrics: Metrics,
    pub gt_shuffles: Vec<GtShuffleRow>,
    pub predictions: Vec<PredictionRow>,
    pub picks: Vec<PickRow>,
    pub attempts: Vec<AttemptRow>,
    pub ran_out_of_time: bool,
    pub pending_disagreements: usize,
    pub steps: StepCounts,
    pub dropped_points: u64,
    pub errors: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<TraceEvent>>,
}

pub struct EpisodeResult {
    pub metrics: Metrics,
    pub record: EpisodeRecord,
    /// Scene at episode end, for analysis.
    pub final_scene: crate::simulator::Scene,
}

/// Simulator plus perception wiring and per-phase bookkeeping.
pub struct Env<'a> {
    sim: SimState,
    config: &'a AgentConfig,
    episode_seed: u64,
    phase: Phase,
    phase_steps: usize,
    global_step: u64,
    dropped_points: u64,
    last_obs: Option<(Observation, SegmentationFrame)>,
    trace: Vec<TraceEvent>,
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(salt)
        .rotate_left(17)
        .wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

impl<'a> Env<'a> {
    fn new(sim: SimState, config: &'a AgentConfig, episode_seed: u64, phase: Phase) -> Self {
        Self {
            sim,
            config,
            episode_seed,
            phase,
            phase_steps: 0,
            global_step: 0,
            dropped_points: 0,
            last_obs: None,
            trace: Vec::new(),
        }
    }

    fn perceive(&self, gt: &SegmentationFrame) -> SegmentationFrame {
        let frame = match &self.config.perception {
            PerceptionMode::GroundTruth => gt.clone(),
            PerceptionMode::Noisy(noise) => {
                let salt = ((self.phase as u64) << 32) | self.global_step;
                simulate_detections(gt, noise, mix_seed(self.episode_seed, salt))
            }
        };
        filter_detections(&frame, self.config.confidence_threshold)
    }

    fn observe_and_update(&mut self, map: &mut SemanticMap) -> Result<(), AgentError> {
        let obs = self.sim.observe();
        let frame = self.perceive(&obs.seg);
        let cloud = depth_to_pointcloud(
            &obs.depth,
            &frame,
            &obs.rgb,
            &self.sim.intr,
            self.config.max_depth_range,
        )?;
        let world = transform_to_world(&cloud, &obs.pose)?;
        let ev = voxelize(&world, map.grid())?;
        self.dropped_points += ev.dropped as u64;
        map.update(&ev)?;
        self.last_obs = Some((obs, frame));
        Ok(())
    }

    fn act(
        &mut self,
        action: Action,
        map: &mut SemanticMap,
    ) -> Result<crate::simulator::StepOutcome, AgentError> {
        let outcome = self.sim.step(&action)?;
        self.phase_steps += 1;
        self.global_step += 1;
        self.observe_and_update(map)?;
        if self.config.trace_steps {
            self.trace.push(TraceEvent {
                phase: self.phase as u8,
                step: self.phase_steps as u32,
                action: format!("{action:?}"),
                success: outcome.success,
                reason: outcome.reason.map(str::to_string),
                detections: self
                    .last_obs
                    .as_ref()
                    .map(|(_, f)| f.detections.len())
                    .unwrap_or(0),
                map_occupied: map.occupied_count(),
            });
        }
        Ok(outcome)
    }

    fn agent_xz(&self) -> (f64, f64) {
        (self.sim.position.x, self.sim.position.z)
    }

    /// Rotates toward the given quarter-turn heading (at most 2 actions).
    fn turn_to(&mut self, desired: u8, map: &mut SemanticMap) -> Result<(), AgentError> {
        let diff = (desired + 4 - self.sim.quarter_turns) % 4;
        let actions: &[Action] = match diff {
            0 => &[],
            1 => &[Action::RotateLeft],
            2 => &[Action::RotateLeft, Action::RotateLeft],
            _ => &[Action::RotateRight],
        };
        for a in actions {
            self.act(a.clone(), map)?;
        }
        Ok(())
    }

    /// Faces a world target: snaps yaw to the dominant axis and pitches the
    /// camera toward the target height.
    fn face_target(&mut self, target: &Vec3, map: &mut SemanticMap) -> Result<(), AgentError> {
        let dx = target.x - self.sim.position.x;
        let dz = target.z - self.sim.position.z;
        let desired = if dz.abs() >= dx.abs() {
            if dz >= 0.0 {
                0
            } else {
                2
            }
        } else if dx >= 0.0 {
            3
        } else {
            1
        };
        self.turn_to(desired, map)?;
        let horiz = (dx * dx + dz * dz).sqrt().max(0.2);
        let angle = (target.y - EYE_HEIGHT_M).atan2(horiz);
        let steps = (angle / (std::f64::consts::PI / 6.0)).round() as i64;
        let desired_pitch = steps.clamp(-2, 0) as i8;
        while self.sim.pitch_steps != desired_pitch {
            let action = if self.sim.pitch_steps > desired_pitch {
                Action::LookDown
            } else {
                Action::LookUp
            };
            if !self.act(action, map)?.success {
                break;
            }
        }
        Ok(())
    }
}

/// Heading that moves from `from` to the 4-adjacent cell `to`.
fn heading(from: [usize; 2], to: [usize; 2]) -> u8 {
    if to[1] > from[1] {
        0 // +z
    } else if to[1] < from[1] {
        2 // -z
    } else if to[0] > from[0] {
        3 // +x
    } else {
        1 // -x
    }
}

fn grid_for(room: &Vec3, config: &AgentConfig) -> GridSpec {
    let nx = (room.x / config.voxel_size).round() as usize;
    let nz = (room.z / config.voxel_size).round() as usize;
    GridSpec::new(
        [nx, config.map_height_voxels, nz],
        config.voxel_size,
        Vec3::zeros(),
        NUM_CLASSES,
    )
}

/// A 360-degree look-around at two downward pitches. The steep sweep covers
/// the floor ring right at the agent's feet, where small objects sit below
/// the shallow sweep's frustum.
fn scan(env: &mut Env, map: &mut SemanticMap) -> Result<(), AgentError> {
    while env.sim.pitch_steps > -1 {
        env.act(Action::LookDown, map)?;
    }
    for _ in 0..4 {
        env.act(Action::RotateLeft, map)?;
    }
    env.act(Action::LookDown, map)?;
    for _ in 0..4 {
        env.act(Action::RotateLeft, map)?;
    }
    env.act(Action::LookUp, map)?;
    Ok(())
}

struct NavContext {
    graph: NavGraph,
    agent_cell: [usize; 2],
}

fn rebuild_nav(env: &Env, map: &SemanticMap, blocked: &HashSet<[usize; 2]>) -> NavContext {
    let occ = map.occupancy_grid(None);
    let grid = map.grid();
    let mut graph = build_nav_graph(
        &occ,
        [grid.origin.x, grid.origin.z],
        grid.voxel_size,
        &env.config.nav,
    );
    for c in blocked {
        graph.block(*c);
    }
    let (x, z) = env.agent_xz();
    let agent_cell = graph.cell_of(x, z);
    graph.force_free(agent_cell);
    graph.carve_escape(agent_cell);
    NavContext { graph, agent_cell }
}

/// Follows a cell path, re-planning around surprise collisions. Returns
/// whether the final cell was reached.
fn follow_path(
    env: &mut Env,
    map: &mut SemanticMap,
    nav: &mut NavContext,
    blocked: &mut HashSet<[usize; 2]>,
    path: Vec<[usize; 2]>,
    max_steps: usize,
    step_cap: usize,
) -> Result<bool, AgentError> {
    let goal = *path.last().unwrap();
    let mut path = path;
    let mut idx = 1usize;
    let mut steps_this_goal = 0usize;
    loop {
        if idx >= path.len() {
            return Ok(true);
        }
        if env.phase_steps >= max_steps || steps_this_goal >= step_cap {
            return Ok(false);
        }
        let current = nav.graph.cell_of(env.agent_xz().0, env.agent_xz().1);
        let next = path[idx];
        env.turn_to(heading(current, next), map)?;
        steps_this_goal += 1;
        let outcome = env.act(Action::MoveAhead, map)?;
        if outcome.success {
            idx += 1;
            continue;
        }
        // Unexpected obstacle: remember it and re-plan.
        blocked.insert(next);
        nav.graph.block(next);
        let here = nav.graph.cell_of(env.agent_xz().0, env.agent_xz().1);
        nav.graph.force_free(here);
        match shortest_path(&nav.graph, here, goal) {
            Ok(new_path) => {
                path = new_path;
                idx = 1;
            }
            Err(_) => return Ok(false),
        }
    }
}

pub struct MappingStats {
    pub goals_sampled: usize,
    pub steps: usize,
}

/// Runs one mapping phase: initial scan, then semantic-search navigation
/// goals until the budget is exhausted.
pub fn run_mapping_phase(
    env: &mut Env,
    map: &mut SemanticMap,
    search: &SearchMode,
    budget: &PhaseBudget,
    rng: &mut ChaCha8Rng,
) -> Result<MappingStats, AgentError> {
    env.observe_and_update(map)?;
    scan(env, map)?;
    let mut blocked: HashSet<[usize; 2]> = HashSet::new();
    let mut goals = 0usize;
    while goals < budget.max_goals && env.phase_steps < budget.max_steps {
        let mut nav = rebuild_nav(env, map, &blocked);
        let goal = sample_goal(search, map, &nav.graph, nav.agent_cell, goals, rng)?;
        goals += 1;
        let goal_cell = nav.graph.cell_of(goal.x, goal.z);
        let Ok(path) = shortest_path(&nav.graph, nav.agent_cell, goal_cell) else {
            continue;
        };
        let cap = path.len() + 10;
        follow_path(env, map, &mut nav, &mut blocked, path, budget.max_steps, cap)?;
        if env.phase_steps >= budget.max_steps {
            break;
        }
        scan(env, map)?;
    }
    Ok(MappingStats {
        goals_sampled: goals,
        steps: env.phase_steps,
    })
}

fn quantize(v: f64) -> i64 {
    (v * 10.0).round() as i64
}

fn disagreement_signature(d: &Disagreement) -> (usize, u8, [i64; 3], [i64; 3]) {
    (
        d.class_id,
        match d.kind {
            DisagreementKind::Relocate => 0,
            DisagreementKind::OpenClose => 1,
        },
        [
            quantize(d.current.x),
            quantize(d.current.y),
            quantize(d.current.z),
        ],
        [quantize(d.goal.x), quantize(d.goal.y), quantize(d.goal.z)],
    )
}

fn compute_diff(m0: &SemanticMap, m1: &SemanticMap, config: &AgentConfig) -> Vec<Disagreement> {
    let keep_objects = |m: &SemanticMap, insts: Vec<crate::diffing::ObjectInstance>| {
        filter_small_instances(
            merge_nearby_instances(
                insts
                    .into_iter()
                    .filter(|i| i.class_id >= BACKGROUND_CLASSES)
                    .collect(),
                m.grid(),
                2,
            ),
            config.min_instance_voxels,
        )
    };
    let walk = keep_objects(m0, label_instances(m0));
    let unshuf = keep_objects(m1, label_instances(m1));
    let matched = match_instances(&walk, &unshuf);
    let mut diff = detect_disagreements(
        &matched.pairs,
        config.disagreement_threshold,
        config.openness_threshold,
    );
    // Only pickable classes can be relocated and only openable ones opened.
    diff.retain(|d| match d.kind {
        DisagreementKind::Relocate => crate::simulator::is_pickable_class(d.class_id),
        DisagreementKind::OpenClose => OPENABLE_CLASSES.contains(&d.class_id),
    });
    // Largest instances first: they are least likely to be spurious.
    diff.sort_by(|a, b| {
        b.voxel_count
            .cmp(&a.voxel_count)
            .then_with(|| a.class_id.cmp(&b.class_id))
            .then_with(|| quantize(a.current.x).cmp(&quantize(b.current.x)))
    });
    diff
}

/// World centroid of a detection mask, from depth back-projection.
fn detection_centroid(
    obs: &Observation,
    det_pixels: &[u32],
    intr: &CameraIntrinsics,
    max_range: f64,
) -> Option<Vec3> {
    let rot = obs.pose.rotation();
    let mut sum = Vec3::zeros();
    let mut n = 0usize;
    for &px in det_pixels {
        let u = (px as usize) % intr.width;
        let v = (px as usize) / intr.width;
        let d = obs.depth.at(u, v) as f64;
        if d <= 0.0 || !d.is_finite() || d > max_range {
            continue;
        }
        let cam = Vec3::new(
            (u as f64 - intr.cx) * d / intr.focal_px,
            -(v as f64 - intr.cy) * d / intr.focal_px,
            d,
        );
        sum += rot * cam + obs.pose.position;
        n += 1;
    }
    if n == 0 {
        None
    } else {
        Some(sum / n as f64)
    }
}

/// Finds the instance to interact with: the perceived detection of the
/// expected class whose mask centroid lies nearest the targeted position.
/// Returns the instance id and its freshly measured world centroid.
fn identify_target(
    env: &Env,
    target: &Vec3,
    class_id: usize,
    tolerance: f64,
) -> Option<(u32, Vec3)> {
    let (obs, frame) = env.last_obs.as_ref()?;
    let mut best: Option<(u32, Vec3, f64)> = None;
    for det in &frame.detections {
        if det.class_id != class_id {
            continue;
        }
        let Some(id) = det.instance_id else { continue };
        let Some(centroid) =
            detection_centroid(obs, &det.pixels, &env.sim.intr, env.config.max_depth_range)
        else {
            continue;
        };
        let dist = (centroid - target).norm();
        if dist <= tolerance && best.as_ref().map_or(true, |&(_, _, d)| dist < d) {
            best = Some((id, centroid, dist));
        }
    }
    best.map(|(id, c, _)| (id, c))
}

/// Free cells whose centers sit at interaction distance from a target,
/// ordered by preference (closest to 0.8 m, then lexicographic).
fn approach_candidates(nav: &NavGraph, reachable: &[bool], target: &Vec3) -> Vec<[usize; 2]> {
    let mut cells: Vec<([usize; 2], f64)> = nav
        .free_cells()
        .filter(|c| reachable[nav.index(*c)])
        .filter_map(|c| {
            let center = nav.center(c);
            let d = ((center.x - target.x).powi(2) + (center.z - target.z).powi(2)).sqrt();
            if (0.5..=1.42).contains(&d) {
                Some((c, (d - 0.8).abs()))
            } else {
                None
            }
        })
        .collect();
    cells.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    cells.into_iter().map(|(c, _)| c).collect()
}

enum AttemptOutcome {
    Resolved,
    ResolvedFallback,
    VerifiedInPlace,
    SkippedGoalUnderobserved,
    SkippedUnreachable,
    SkippedPickFailed,
    SkippedPlaceFailed,
    SkippedOpenFailed,
    OutOfTime,
}

impl AttemptOutcome {
    fn as_str(&self) -> &'static str {
        match self {
            AttemptOutcome::Resolved => "resolved",
            AttemptOutcome::ResolvedFallback => "resolved-fallback",
            AttemptOutcome::VerifiedInPlace => "verified-in-place",
            AttemptOutcome::SkippedGoalUnderobserved => "goal-underobserved",
            AttemptOutcome::SkippedUnreachable => "unreachable",
            AttemptOutcome::SkippedPickFailed => "pick-failed",
            AttemptOutcome::SkippedPlaceFailed => "place-failed",
            AttemptOutcome::SkippedOpenFailed => "open-failed",
            AttemptOutcome::OutOfTime => "out-of-time",
        }
    }
}

struct Resolver<'a, 'b> {
    env: &'a mut Env<'b>,
    m1: &'a mut SemanticMap,
    blocked: HashSet<[usize; 2]>,
    max_steps: usize,
    picks: Vec<PickRow>,
    shuffled_ids: HashSet<u32>,
    /// Compact failure breadcrumbs for the current disagreement.
    detail: String,
}

impl<'a, 'b> Resolver<'a, 'b> {
    fn steps_left(&self) -> bool {
        self.env.phase_steps < self.max_steps
    }

    /// Navigates to an approach cell for `target`, preferring the
    /// `attempt`-th candidate. Returns false when unreachable or out of steps.
    fn navigate_near(&mut self, target: &Vec3, attempt: usize) -> Result<bool, AgentError> {
        // Interaction approaches plan on the soft-permissive graph: cells in
        // an inflation margin are legal to stand in, and the margin would
        // otherwise seal off everything within interaction range of targets
        // near furniture.
        let mut nav = {
            let ctx = rebuild_nav(self.env, self.m1, &self.blocked);
            NavContext {
                graph: ctx.graph.soft_permissive(),
                agent_cell: ctx.agent_cell,
            }
        };
        nav.graph.force_free(nav.agent_cell);
        let mut reachable = crate::planner::reachable_set(&nav.graph, nav.agent_cell);
        // A hard-enclosed agent (its own placements can seal a pocket) gets
        // an emergency geometric graph; real obstacles re-assert themselves
        // through collision re-planning.
        if reachable.iter().filter(|&&r| r).count() < 4 {
            for i in 0..nav.graph.cells[0] {
                for k in 0..nav.graph.cells[1] {
                    if !self.blocked.contains(&[i, k]) {
                        nav.graph.force_free([i, k]);
                    }
                }
            }
            reachable = crate::planner::reachable_set(&nav.graph, nav.agent_cell);
        }
        let mut candidates = approach_candidates(&nav.graph, &reachable, target);
        if candidates.is_empty() {
            // Last resort: stand as close as the graph allows.
            match crate::planner::nearest_reachable(&nav.graph, &reachable, target.x, target.z) {
                Some(c) => candidates.push(c),
                None => return Ok(false),
            }
        }
        // Diversify viewpoints across attempts: later attempts prefer cells
        // on a different side of the target, so occlusions do not defeat
        // every retry.
        let cell = if attempt == 0 {
            candidates[0]
        } else {
            let bearing = |c: [usize; 2]| {
                let center = nav.graph.center(c);
                let quad = (center.z - target.z)
                    .atan2(center.x - target.x)
                    .div_euclid(std::f64::consts::FRAC_PI_2);
                quad as i64
            };
            let first = bearing(candidates[0]);
            candidates
                .iter()
                .copied()
                .find(|&c| (bearing(c) - first).rem_euclid(4) == attempt as i64)
                .unwrap_or(candidates[attempt.min(candidates.len() - 1)])
        };
        let Ok(path) = shortest_path(&nav.graph, nav.agent_cell, cell) else {
            return Ok(false);
        };
        // Collision re-planning in tight margins needs more slack than the
        // mapping-phase cap.
        let cap = path.len() + 20;
        let c = nav.graph.center(cell);
        let cd = ((c.x - target.x).powi(2) + (c.z - target.z).powi(2)).sqrt();
        self.detail.push_str(&format!(
            "nav[cell={cell:?} cd={cd:.2} plen={}]",
            path.len()
        ));
        let reached = follow_path(
            self.env,
            self.m1,
            &mut nav,
            &mut self.blocked,
            path,
            self.max_steps,
            cap,
        )?;
        if reached {
            return Ok(true);
        }
        // Wherever the walk ended, interaction range may already suffice.
        let (ax, az) = self.env.agent_xz();
        let d = ((target.x - ax).powi(2) + (target.z - az).powi(2)).sqrt();
        if (0.35..=1.42).contains(&d) {
            self.detail.push_str("~near");
            return Ok(true);
        }
        self.detail.push_str("!arrive");
        Ok(false)
    }

    fn resolve_relocate(&mut self, d: &Disagreement) -> Result<AttemptOutcome, AgentError> {
        if d.goal_voxel_count < self.env.config.action_min_goal_voxels {
            // The goal pose rests on too few walkthrough voxels to trust.
            return Ok(AttemptOutcome::SkippedGoalUnderobserved);
        }
        // Pick up the object at its current (unshuffle-map) position.
        let mut picked = None;
        for attempt in 0..3 {
            if !self.steps_left() {
                return Ok(AttemptOutcome::OutOfTime);
            }
            if !self.navigate_near(&d.current_footprint, attempt)? {
                self.detail.push('n');
                if attempt == 2 {
                    return Ok(AttemptOutcome::SkippedUnreachable);
                }
                continue;
            }
            self.env.face_target(&d.current_footprint, self.m1)?;
            let Some((id, observed)) = identify_target(
                self.env,
                &d.current_footprint,
                d.class_id,
                self.env.config.pick_match_tolerance,
            ) else {
                self.detail.push('i');
                continue;
            };
            // Fresh measurement: if the object as seen from here already
            // sits at the goal-map pose, the disagreement was estimation
            // noise on a static object.
            if (observed - d.goal_footprint).norm() <= self.env.config.verify_skip_threshold {
                return Ok(AttemptOutcome::VerifiedInPlace);
            }
            let outcome = self.env.act(Action::Pick(id), self.m1)?;
            if outcome.success {
                picked = Some(id);
                break;
            }
            let (ax, az) = self.env.agent_xz();
            let dt = ((d.current_footprint.x - ax).powi(2)
                + (d.current_footprint.z - az).powi(2))
            .sqrt();
            let dobs = ((observed.x - ax).powi(2) + (observed.z - az).powi(2)).sqrt();
            self.detail.push_str(&format!(
                "p[{} dt={dt:.2} dobs={dobs:.2}]",
                outcome.reason.unwrap_or("?")
            ));
        }
        let Some(id) = picked else {
            return Ok(AttemptOutcome::SkippedPickFailed);
        };
        self.picks.push(PickRow {
            object_id: id,
            class_id: d.class_id,
            shuffled: self.shuffled_ids.contains(&id),
        });
        // The object left this spot; drop its stale evidence.
        self.m1.clear_voxels(&d.current_voxels);

        // Transport to the walkthrough pose estimate, resting on the floor.
        let held_extent = self.env.sim.held.as_ref().expect("holding").extent;
        let place_target = Vec3::new(
            d.goal_footprint.x,
            held_extent.y / 2.0,
            d.goal_footprint.z,
        );
        for attempt in 0..3 {
            if !self.steps_left() {
                return Ok(AttemptOutcome::OutOfTime);
            }
            if !self.navigate_near(&d.goal_footprint, attempt)? {
                continue;
            }
            self.env.face_target(&place_target, self.m1)?;
            if self.env.act(Action::Place(place_target), self.m1)?.success {
                return Ok(AttemptOutcome::Resolved);
            }
            // Nudge around the exact estimate before giving up on this spot.
            for (ox, oz) in [(0.05, 0.0), (-0.05, 0.0), (0.0, 0.05), (0.0, -0.05)] {
                if !self.steps_left() {
                    return Ok(AttemptOutcome::OutOfTime);
                }
                let nudged = Vec3::new(place_target.x + ox, place_target.y, place_target.z + oz);
                if self.env.act(Action::Place(nudged), self.m1)?.success {
                    return Ok(AttemptOutcome::Resolved);
                }
            }
        }
        // Exact spot blocked: place as near the goal as possible so the
        // gripper frees up; a later diff round may retry.
        self.fallback_place(&place_target)
    }

    fn fallback_place(&mut self, ideal: &Vec3) -> Result<AttemptOutcome, AgentError> {
        let held_extent = self.env.sim.held.as_ref().expect("holding").extent;
        for radius in [0.2, 0.35, 0.5, 0.7] {
            for octant in 0..8 {
                if !self.steps_left() {
                    return Ok(AttemptOutcome::OutOfTime);
                }
                let angle = octant as f64 * std::f64::consts::FRAC_PI_4;
                let target = Vec3::new(
                    ideal.x + radius * angle.cos(),
                    held_extent.y / 2.0,
                    ideal.z + radius * angle.sin(),
                );
                let (ax, az) = self.env.agent_xz();
                if ((target.x - ax).powi(2) + (target.z - az).powi(2)).sqrt()
                    > crate::simulator::INTERACT_RANGE_M
                {
                    continue;
                }
                if self.env.act(Action::Place(target), self.m1)?.success {
                    return Ok(AttemptOutcome::ResolvedFallback);
                }
            }
        }
        // Last resort: drop wherever there is space near the agent.
        for radius in [0.5, 0.75, 1.0, 1.25] {
            for octant in 0..8 {
                if !self.steps_left() {
                    return Ok(AttemptOutcome::OutOfTime);
                }
                let angle = octant as f64 * std::f64::consts::FRAC_PI_4;
                let (ax, az) = self.env.agent_xz();
                let target = Vec3::new(
                    ax + radius * angle.cos(),
                    held_extent.y / 2.0,
                    az + radius * angle.sin(),
                );
                if self.env.act(Action::Place(target), self.m1)?.success {
                    return Ok(AttemptOutcome::SkippedPlaceFailed);
                }
            }
        }
        Ok(AttemptOutcome::SkippedPlaceFailed)
    }

    fn resolve_openclose(&mut self, d: &Disagreement) -> Result<AttemptOutcome, AgentError> {
        for attempt in 0..3 {
            if !self.steps_left() {
                return Ok(AttemptOutcome::OutOfTime);
            }
            if !self.navigate_near(&d.current_footprint, attempt)? {
                if attempt == 2 {
                    return Ok(AttemptOutcome::SkippedUnreachable);
                }
                continue;
            }
            self.env.face_target(&d.current_footprint, self.m1)?;
            let Some((id, _)) = identify_target(
                self.env,
                &d.current_footprint,
                d.class_id,
                self.env.config.pick_match_tolerance.max(0.8),
            ) else {
                continue;
            };
            let target_openness = if d.goal_openness > 0.5 { 1.0 } else { 0.0 };
            if self
                .env
                .act(Action::Open(id, target_openness), self.m1)?
                .success
            {
                return Ok(AttemptOutcome::Resolved);
            }
        }
        Ok(AttemptOutcome::SkippedOpenFailed)
    }
}

/// Result of one resolution pass.
pub struct ResolvePass {
    /// Disagreements actually processed (prefix of the input list).
    pub processed: usize,
    pub out_of_time: bool,
}

/// Resolves disagreements in descending instance-size order under a step
/// budget. Failures are logged outcomes, never errors.
pub fn resolve_disagreements(
    env: &mut Env,
    m1: &mut SemanticMap,
    disagreements: &[Disagreement],
    max_steps: usize,
    shuffled_ids: &HashSet<u32>,
    attempts: &mut Vec<AttemptRow>,
    picks: &mut Vec<PickRow>,
) -> Result<ResolvePass, AgentError> {
    let mut resolver = Resolver {
        env,
        m1,
        blocked: HashSet::new(),
        max_steps,
        picks: Vec::new(),
        shuffled_ids: shuffled_ids.clone(),
        detail: String::new(),
    };
    let mut out_of_time = false;
    let mut processed = 0usize;
    for d in disagreements {
        if !resolver.steps_left() {
            out_of_time = true;
            break;
        }
        processed += 1;
        resolver.detail.clear();
        let outcome = match d.kind {
            DisagreementKind::Relocate => resolver.resolve_relocate(d)?,
            DisagreementKind::OpenClose => resolver.resolve_openclose(d)?,
        };
        if matches!(outcome, AttemptOutcome::OutOfTime) {
            out_of_time = true;
        }
        attempts.push(AttemptRow {
            class_id: d.class_id,
            kind: format!("{:?}", d.kind),
            outcome: outcome.as_str().to_string(),
            detail: if resolver.detail.is_empty() {
                None
            } else {
                Some(resolver.detail.clone())
            },
        });
    }
    picks.extend(resolver.picks);
    Ok(ResolvePass {
        processed,
        out_of_time,
    })
}

fn phase_search_mode(config: &AgentConfig, spec: &EpisodeSpec, phase: Phase) -> SearchMode {
    match &config.search {
        SearchMode::GroundTruth(_) => {
            let locations = spec
                .shuffles
                .iter()
                .map(|s| match phase {
                    Phase::Walkthrough => s.goal_position,
                    Phase::Unshuffle => s.shuffled_position,
                })
                .collect();
            SearchMode::GroundTruth(locations)
        }
        other => other.clone(),
    }
}

/// Runs a full episode: walkthrough mapping, unshuffle mapping, repeated
/// diff-and-resolve rounds, and ground-truth scoring. Deterministic given
/// the episode spec and config.
pub fn run_episode(spec: &EpisodeSpec, config: &AgentConfig) -> EpisodeResult {
    let intr = CameraIntrinsics::square_fov90(config.image_side);
    let grid = grid_for(&spec.goal.room, config);
    let mut errors: Vec<String> = Vec::new();
    let mut trace: Vec<TraceEvent> = Vec::new();
    let mut steps = StepCounts::default();
    let mut dropped_points = 0u64;

    // Phase 0: observe the goal configuration.
    let mut m0 = SemanticMap::new(grid.clone(), config.epsilon, Phase::Walkthrough);
    {
        let sim = SimState::new(spec.goal.clone(), spec.spawn, intr.clone());
        let mut env = Env::new(sim, config, spec.seed, Phase::Walkthrough);
        let search = phase_search_mode(config, spec, Phase::Walkthrough);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0xA0));
        if let Err(e) =
            run_mapping_phase(&mut env, &mut m0, &search, &config.mapping_budget, &mut rng)
        {
            errors.push(format!("walkthrough: {e}"));
        }
        steps.walkthrough = env.phase_steps as u32;
        dropped_points += env.dropped_points;
        trace.append(&mut env.trace);
    }

    // Phase 1: map the shuffled scene, then resolve.
    let mut m1 = SemanticMap::new(grid, config.epsilon, Phase::Unshuffle);
    let sim = SimState::new(spec.shuffled.clone(), spec.spawn, intr);
    let mut env = Env::new(sim, config, spec.seed.wrapping_add(1), Phase::Unshuffle);
    let search = phase_search_mode(config, spec, Phase::Unshuffle);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0xA1));
    if let Err(e) = run_mapping_phase(&mut env, &mut m1, &search, &config.mapping_budget, &mut rng)
    {
        errors.push(format!("unshuffle: {e}"));
    }
    steps.unshuffle = env.phase_steps as u32;

    // Resolution rounds: diff, act, re-diff on the updated map.
    env.phase_steps = 0;
    let shuffled_ids: HashSet<u32> = spec.shuffles.iter().map(|s| s.id).collect();
    let mut attempted: HashSet<(usize, u8, [i64; 3], [i64; 3])> = HashSet::new();
    let mut predictions: Vec<PredictionRow> = Vec::new();
    let mut attempts: Vec<AttemptRow> = Vec::new();
    let mut picks: Vec<PickRow> = Vec::new();
    let mut ran_out_of_time = false;
    let mut pending_at_end = 0usize;
    let mut class_attempts: std::collections::HashMap<(usize, u8), usize> =
        std::collections::HashMap::new();
    for round in 0..config.max_diff_rounds {
        let diff = compute_diff(&m0, &m1, config);
        for d in &diff {
            predictions.push(PredictionRow {
                round,
                class_id: d.class_id,
                kind: format!("{:?}", d.kind),
                current: [d.current.x, d.current.y, d.current.z],
                goal: [d.goal.x, d.goal.y, d.goal.z],
            });
        }
        // Cap per-class retries so estimation flicker cannot consume the
        // whole budget on one object.
        let mut round_counts: std::collections::HashMap<(usize, u8), usize> =
            class_attempts.clone();
        let fresh: Vec<Disagreement> = diff
            .into_iter()
            .filter(|d| !attempted.contains(&disagreement_signature(d)))
            .filter(|d| {
                let key = (d.class_id, d.kind as u8);
                let n = round_counts.entry(key).or_insert(0);
                *n += 1;
                *n <= 3
            })
            .collect();
        if fresh.is_empty() {
            break;
        }
        if env.phase_steps >= config.resolution_max_steps {
            ran_out_of_time = true;
            pending_at_end = fresh.len();
            break;
        }
        match resolve_disagreements(
            &mut env,
            &mut m1,
            &fresh,
            config.resolution_max_steps,
            &shuffled_ids,
            &mut attempts,
            &mut picks,
        ) {
            Ok(pass) => {
                for d in fresh.iter().take(pass.processed) {
                    attempted.insert(disagreement_signature(d));
                    *class_attempts.entry((d.class_id, d.kind as u8)).or_insert(0) += 1;
                }
                if pass.out_of_time {
                    ran_out_of_time = true;
                    pending_at_end = fresh.len() - pass.processed;
                }
            }
            Err(e) => {
                errors.push(format!("resolution round {round}: {e}"));
                break;
            }
        }
    }
    let _ = env.sim.step(&Action::Done);
    steps.resolution = env.phase_steps as u32;
    dropped_points += env.dropped_points;
    trace.append(&mut env.trace);

    let metrics = evaluate_metrics(&env.sim.scene, env.sim.held.as_ref(), spec);
    let gt_shuffles = spec
        .shuffles
        .iter()
        .map(|s| GtShuffleRow {
            id: s.id,
            class_id: s.class_id,
            goal: [s.goal_position.x, s.goal_position.y, s.goal_position.z],
            shuffled: [
                s.shuffled_position.x,
                s.shuffled_position.y,
                s.shuffled_position.z,
            ],
            openness_change: (s.goal_openness - s.shuffled_openness).abs() > 0.2,
        })
        .collect();
    let record = EpisodeRecord {
        seed: spec.seed,
        metrics,
        gt_shuffles,
        predictions,
        picks,
        attempts,
        ran_out_of_time,
        pending_disagreements: pending_at_end,
        steps,
        dropped_points,
        errors,
        trace: if config.trace_steps { Some(trace) } else { None },
    };
    EpisodeResult {
        metrics,
        record,
        final_scene: env.sim.scene,
    }
}


/// Test-support: runs only the walkthrough mapping phase and returns the map.
#[doc(hidden)]
pub fn debug_run_walkthrough(spec: &EpisodeSpec, config: &AgentConfig) -> SemanticMap {
    let intr = CameraIntrinsics::square_fov90(config.image_side);
    let grid = grid_for(&spec.goal.room, config);
    let mut m0 = SemanticMap::new(grid, config.epsilon, Phase::Walkthrough);
    let sim = SimState::new(spec.goal.clone(), spec.spawn, intr);
    let mut env = Env::new(sim, config, spec.seed, Phase::Walkthrough);
    let search = phase_search_mode(config, spec, Phase::Walkthrough);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0xA0));
    let _ = run_mapping_phase(&mut env, &mut m0, &search, &config.mapping_budget, &mut rng);
    m0
}

/// Test-support: runs both mapping phases (no resolution) and returns the maps.
#[doc(hidden)]
pub fn debug_run_mapping(spec: &EpisodeSpec, config: &AgentConfig) -> (SemanticMap, SemanticMap) {
    let intr = CameraIntrinsics::square_fov90(config.image_side);
    let grid = grid_for(&spec.goal.room, config);
    let mut m0 = SemanticMap::new(grid.clone(), config.epsilon, Phase::Walkthrough);
    {
        let sim = SimState::new(spec.goal.clone(), spec.spawn, intr.clone());
        let mut env = Env::new(sim, config, spec.seed, Phase::Walkthrough);
        let search = phase_search_mode(config, spec, Phase::Walkthrough);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0xA0));
        let _ = run_mapping_phase(&mut env, &mut m0, &search, &config.mapping_budget, &mut rng);
    }
    let mut m1 = SemanticMap::new(grid, config.epsilon, Phase::Unshuffle);
    {
        let sim = SimState::new(spec.shuffled.clone(), spec.spawn, intr);
        let mut env = Env::new(sim, config, spec.seed.wrapping_add(1), Phase::Unshuffle);
        let search = phase_search_mode(config, spec, Phase::Unshuffle);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0xA1));
        let _ = run_mapping_phase(&mut env, &mut m1, &search, &config.mapping_budget, &mut rng);
    }
    (m0, m1)
}
