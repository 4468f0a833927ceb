//! Deterministic synthetic rooms: axis-aligned box objects inside a
//! rectangular room, discrete agent dynamics, raycast RGB-D rendering with
//! ground-truth segmentation, two-phase episode generation, and ground-truth
//! metric evaluation.

mod generate;
mod render;

pub use generate::{generate_episode, GenerationError, SimConfig};
pub use render::render_observation;

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, DepthImage, Pose, RgbImage, Vec3};
use crate::perception::SegmentationFrame;

/// Total number of semantic classes: floor, wall, then 20 object classes.
pub const NUM_CLASSES: usize = 22;
/// Leading "stuff" classes that are not objects.
pub const BACKGROUND_CLASSES: usize = 2;
pub const CLASS_FLOOR: usize = 0;
pub const CLASS_WALL: usize = 1;
/// First pickable class; classes 2..FIRST_PICKABLE_CLASS are furniture.
pub const FIRST_PICKABLE_CLASS: usize = 8;
/// Furniture classes with an articulated openness attribute.
pub const OPENABLE_CLASSES: std::ops::Range<usize> = 2..5;

pub const EYE_HEIGHT_M: f64 = 1.5;
pub const MOVE_STEP_M: f64 = 0.25;
pub const INTERACT_RANGE_M: f64 = 1.5;
pub const AGENT_RADIUS_M: f64 = 0.16;
pub const AGENT_HEIGHT_M: f64 = 1.7;
const PITCH_STEP_RAD: f64 = std::f64::consts::PI / 6.0;
const MAX_PITCH_STEPS: i8 = 2;

/// Human-readable class names, indexed by class id.
pub fn class_name(class_id: usize) -> &'static str {
    const NAMES: [&str; NUM_CLASSES] = [
        "floor", "wall", "cabinet", "dresser", "chest", "table", "sofa", "shelf", "book", "mug",
        "bowl", "laptop", "pillow", "crate", "plate", "bottle", "can", "toy", "lamp", "vase",
        "clock", "basket",
    ];
    NAMES.get(class_id).copied().unwrap_or("unknown")
}

/// Fixed, distinct base color per class.
pub fn class_base_color(class_id: usize) -> [f32; 3] {
    match class_id {
        CLASS_FLOOR => [0.78, 0.76, 0.72],
        CLASS_WALL => [0.58, 0.60, 0.63],
        _ => {
            // Spread object classes around the hue wheel at two lightness bands.
            let k = class_id - BACKGROUND_CLASSES;
            let hue = (k as f32 * 360.0 / 20.0 + if k % 2 == 0 { 0.0 } else { 9.0 }) % 360.0;
            let value = if k % 2 == 0 { 0.85 } else { 0.55 };
            hsv_to_rgb(hue, 0.85, value)
        }
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

pub fn is_pickable_class(class_id: usize) -> bool {
    class_id >= FIRST_PICKABLE_CLASS && class_id < NUM_CLASSES
}

/// Axis-aligned box object. `position` is the box center; objects rest on
/// the floor, so `position.y == extent.y / 2` at spawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    pub class_id: usize,
    pub color: [f32; 3],
    pub extent: Vec3,
    pub position: Vec3,
    pub openness: f32,
    pub pickable: bool,
}

impl SceneObject {
    pub fn aabb(&self) -> (Vec3, Vec3) {
        (self.position - self.extent / 2.0, self.position + self.extent / 2.0)
    }
}

fn aabbs_overlap(a: (Vec3, Vec3), b: (Vec3, Vec3), gap: f64) -> bool {
    (0..3).all(|i| a.0[i] - gap < b.1[i] && b.0[i] - gap < a.1[i])
}

/// A rectangular room and its objects. `room` holds the interior extents
/// (x-width, y-height, z-depth); walls sit at the coordinate extremes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scene {
    pub room: Vec3,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn object(&self, id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Whether a box of `extent` centered at `position` collides with an
    /// existing object (ignoring `ignore_id`) or pokes outside the room.
    pub fn placement_collides(
        &self,
        position: &Vec3,
        extent: &Vec3,
        gap: f64,
        ignore_id: Option<u32>,
    ) -> bool {
        let half = extent / 2.0;
        for i in 0..3 {
            if position[i] - half[i] < -1e-9 || position[i] + half[i] > self.room[i] + 1e-9 {
                return true;
            }
        }
        let candidate = (position - half, position + half);
        self.objects
            .iter()
            .filter(|o| Some(o.id) != ignore_id)
            .any(|o| aabbs_overlap(candidate, o.aabb(), gap))
    }
}

/// Which objects were shuffled between the goal and unshuffle scenes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShuffleRecord {
    pub id: u32,
    pub class_id: usize,
    pub goal_position: Vec3,
    pub shuffled_position: Vec3,
    pub goal_openness: f32,
    pub shuffled_openness: f32,
}

/// A full two-phase rearrangement task: the goal scene observed during the
/// walkthrough phase, the shuffled scene the agent must restore, and the
/// ground-truth shuffle set used only for evaluation and oracles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub goal: Scene,
    pub shuffled: Scene,
    pub shuffles: Vec<ShuffleRecord>,
    /// Deterministic agent spawn, collision-free in both scenes.
    pub spawn: Vec3,
    pub seed: u64,
}

/// One observation: pose plus rendered RGB, depth, and exact segmentation.
#[derive(Debug, Clone)]
pub struct Observation {
    pub pose: Pose,
    pub rgb: RgbImage,
    pub depth: DepthImage,
    pub seg: SegmentationFrame,
}

/// Discrete agent actions.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    MoveAhead,
    RotateLeft,
    RotateRight,
    LookUp,
    LookDown,
    Pick(u32),
    Place(Vec3),
    Open(u32, f32),
    Done,
}

/// Result of one action. Failures are outcomes, not errors.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub success: bool,
    pub reason: Option<&'static str>,
}

impl StepOutcome {
    fn ok() -> Self {
        Self {
            success: true,
            reason: None,
        }
    }

    fn fail(reason: &'static str) -> Self {
        Self {
            success: false,
            reason: Some(reason),
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("no such object id {0}")]
    NoSuchObject(u32),
    #[error("scene file error at line {line}: {reason}")]
    SceneFormat { line: usize, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Mutable episode state: the scene, the embodied agent, and the held object.
#[derive(Debug, Clone)]
pub struct SimState {
    pub scene: Scene,
    pub intr: CameraIntrinsics,
    /// Agent base position; `y` is always 0.
    pub position: Vec3,
    /// Quarter turns counterclockwise from +Z.
    pub quarter_turns: u8,
    /// Camera pitch in 30-degree steps, positive up.
    pub pitch_steps: i8,
    pub held: Option<SceneObject>,
    pub steps_taken: u32,
}

impl SimState {
    pub fn new(scene: Scene, spawn: Vec3, intr: CameraIntrinsics) -> Self {
        Self {
            scene,
            intr,
            position: Vec3::new(spawn.x, 0.0, spawn.z),
            quarter_turns: 0,
            pitch_steps: 0,
            held: None,
            steps_taken: 0,
        }
    }

    pub fn yaw(&self) -> f64 {
        self.quarter_turns as f64 * std::f64::consts::FRAC_PI_2
    }

    pub fn pitch(&self) -> f64 {
        self.pitch_steps as f64 * PITCH_STEP_RAD
    }

    /// Exact unit forward vector on the ground plane.
    pub fn forward(&self) -> Vec3 {
        match self.quarter_turns {
            0 => Vec3::new(0.0, 0.0, 1.0),
            1 => Vec3::new(-1.0, 0.0, 0.0),
            2 => Vec3::new(0.0, 0.0, -1.0),
            _ => Vec3::new(1.0, 0.0, 0.0),
        }
    }

    pub fn camera_pose(&self) -> Pose {
        Pose::new(
            Vec3::new(self.position.x, EYE_HEIGHT_M, self.position.z),
            self.yaw(),
            self.pitch(),
        )
    }

    /// Renders the current observation.
    pub fn observe(&self) -> Observation {
        render_observation(&self.scene, &self.camera_pose(), &self.intr)
    }

    fn agent_collides_at(&self, x: f64, z: f64) -> bool {
        let r = AGENT_RADIUS_M;
        if x < r || x > self.scene.room.x - r || z < r || z > self.scene.room.z - r {
            return true;
        }
        self.scene.objects.iter().any(|o| {
            let (lo, hi) = o.aabb();
            x > lo.x - r
                && x < hi.x + r
                && z > lo.z - r
                && z < hi.z + r
                && lo.y < AGENT_HEIGHT_M
                && hi.y > 0.0
        })
    }

    fn xy_distance(&self, p: &Vec3) -> f64 {
        ((self.position.x - p.x).powi(2) + (self.position.z - p.z).powi(2)).sqrt()
    }

    /// Whether an object has at least one visible pixel from the current pose.
    pub fn object_visible(&self, id: u32) -> bool {
        let obs = self.observe();
        obs.seg
            .detections
            .iter()
            .any(|d| d.instance_id == Some(id) && !d.pixels.is_empty())
    }

    /// Applies one action. Deterministic; motion failures leave the state
    /// unchanged apart from the step counter.
    pub fn step(&mut self, action: &Action) -> Result<StepOutcome, SimError> {
        self.steps_taken += 1;
        match action {
            Action::MoveAhead => {
                let target = self.position + self.forward() * MOVE_STEP_M;
                if self.agent_collides_at(target.x, target.z) {
                    Ok(StepOutcome::fail("collision"))
                } else {
                    self.position = target;
                    Ok(StepOutcome::ok())
                }
            }
            Action::RotateLeft => {
                self.quarter_turns = (self.quarter_turns + 1) % 4;
                Ok(StepOutcome::ok())
            }
            Action::RotateRight => {
                self.quarter_turns = (self.quarter_turns + 3) % 4;
                Ok(StepOutcome::ok())
            }
            Action::LookUp => {
                if self.pitch_steps >= MAX_PITCH_STEPS {
                    Ok(StepOutcome::fail("pitch limit"))
                } else {
                    self.pitch_steps += 1;
                    Ok(StepOutcome::ok())
                }
            }
            Action::LookDown => {
                if self.pitch_steps <= -MAX_PITCH_STEPS {
                    Ok(StepOutcome::fail("pitch limit"))
                } else {
                    self.pitch_steps -= 1;
                    Ok(StepOutcome::ok())
                }
            }
            Action::Pick(id) => {
                if self.held.is_some() {
                    return Ok(StepOutcome::fail("already holding"));
                }
                let Some(obj) = self.scene.object(*id) else {
                    return Err(SimError::NoSuchObject(*id));
                };
                if !obj.pickable {
                    return Ok(StepOutcome::fail("not pickable"));
                }
                if self.xy_distance(&obj.position) > INTERACT_RANGE_M {
                    return Ok(StepOutcome::fail("out of range"));
                }
                if !self.object_visible(*id) {
                    return Ok(StepOutcome::fail("not visible"));
                }
                let idx = self.scene.objects.iter().position(|o| o.id == *id).unwrap();
                self.held = Some(self.scene.objects.remove(idx));
                Ok(StepOutcome::ok())
            }
            Action::Place(target) => {
                let Some(held) = self.held.as_ref() else {
                    return Ok(StepOutcome::fail("not holding"));
                };
                if self.xy_distance(target) > INTERACT_RANGE_M {
                    return Ok(StepOutcome::fail("out of range"));
                }
                if self.scene.placement_collides(target, &held.extent, 0.0, None) {
                    return Ok(StepOutcome::fail("collision"));
                }
                let mut obj = self.held.take().unwrap();
                obj.position = *target;
                self.scene.objects.push(obj);
                Ok(StepOutcome::ok())
            }
            Action::Open(id, openness) => {
                let Some(obj) = self.scene.object(*id) else {
                    return Err(SimError::NoSuchObject(*id));
                };
                if self.xy_distance(&obj.position) > INTERACT_RANGE_M {
                    return Ok(StepOutcome::fail("out of range"));
                }
                if !self.object_visible(*id) {
                    return Ok(StepOutcome::fail("not visible"));
                }
                let obj = self.scene.objects.iter_mut().find(|o| o.id == *id).unwrap();
                obj.openness = openness.clamp(0.0, 1.0);
                Ok(StepOutcome::ok())
            }
            Action::Done => Ok(StepOutcome::ok()),
        }
    }
}

/// End-of-episode scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Percentage of initially misplaced objects restored; 0 for the whole
    /// task if any object ends newly misplaced.
    pub fixed_strict: f64,
    /// 100 iff every initially misplaced object is restored and none became
    /// newly misplaced, else 0.
    pub success: f64,
    pub num_newly_misplaced: u32,
    pub num_initially_misplaced: u32,
}

/// Whether an object's final state counts as misplaced relative to its goal.
pub fn is_misplaced(position: &Vec3, openness: f32, goal_position: &Vec3, goal_openness: f32) -> bool {
    (position - goal_position).norm() > 0.05 || (openness - goal_openness).abs() > 0.2
}

/// Scores a final scene against the episode's goal.
pub fn evaluate_metrics(final_scene: &Scene, held: Option<&SceneObject>, spec: &EpisodeSpec) -> Metrics {
    let shuffled_ids: std::collections::HashSet<u32> =
        spec.shuffles.iter().map(|s| s.id).collect();
    let mut fixed = 0u32;
    let mut newly = 0u32;
    for goal_obj in &spec.goal.objects {
        let misplaced = match final_scene.object(goal_obj.id) {
            Some(actual) => is_misplaced(
                &actual.position,
                actual.openness,
                &goal_obj.position,
                goal_obj.openness,
            ),
            // Still in the gripper (or vanished): not at its goal pose.
            None => {
                debug_assert!(held.is_some_and(|h| h.id == goal_obj.id));
                true
            }
        };
        if shuffled_ids.contains(&goal_obj.id) {
            if !misplaced {
                fixed += 1;
            }
        } else if misplaced {
            newly += 1;
        }
    }
    let initial = shuffled_ids.len() as u32;
    let fixed_strict = if newly > 0 {
        0.0
    } else if initial == 0 {
        100.0
    } else {
        100.0 * fixed as f64 / initial as f64
    };
    let success = if newly == 0 && fixed == initial { 100.0 } else { 0.0 };
    Metrics {
        fixed_strict,
        success,
        num_newly_misplaced: newly,
        num_initially_misplaced: initial,
    }
}

/// Writes a scene as structured text: a room line, then one object per line
/// (`id class color extent position openness`).
pub fn save_scene(scene: &Scene, path: &Path) -> Result<(), SimError> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "room {:.6} {:.6} {:.6}",
        scene.room.x, scene.room.y, scene.room.z
    )?;
    for o in &scene.objects {
        writeln!(
            out,
            "object {} {} {:.6},{:.6},{:.6} {:.6},{:.6},{:.6} {:.6},{:.6},{:.6} {:.6}",
            o.id,
            o.class_id,
            o.color[0],
            o.color[1],
            o.color[2],
            o.extent.x,
            o.extent.y,
            o.extent.z,
            o.position.x,
            o.position.y,
            o.position.z,
            o.openness
        )?;
    }
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<Scene, SimError> {
    let text = std::fs::read_to_string(path)?;
    let mut room = None;
    let mut objects = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let err = |reason: String| SimError::SceneFormat {
            line: lineno + 1,
            reason,
        };
        match fields[0] {
            "room" => {
                if fields.len() != 4 {
                    return Err(err("room needs 3 extents".into()));
                }
                let mut v = [0.0f64; 3];
                for (i, f) in fields[1..].iter().enumerate() {
                    v[i] = f.parse().map_err(|e| err(format!("bad extent: {e}")))?;
                }
                room = Some(Vec3::new(v[0], v[1], v[2]));
            }
            "object" => {
                if fields.len() != 7 {
                    return Err(err(format!("object needs 6 fields, got {}", fields.len() - 1)));
                }
                let id: u32 = fields[1].parse().map_err(|e| err(format!("bad id: {e}")))?;
                let class_id: usize =
                    fields[2].parse().map_err(|e| err(format!("bad class: {e}")))?;
                if class_id >= NUM_CLASSES {
                    return Err(err(format!("class {class_id} out of range")));
                }
                let triple = |s: &str, what: &str| -> Result<Vec3, SimError> {
                    let parts: Vec<&str> = s.split(',').collect();
                    if parts.len() != 3 {
                        return Err(err(format!("{what} needs 3 components")));
                    }
                    let mut v = [0.0f64; 3];
                    for (i, p) in parts.iter().enumerate() {
                        v[i] = p.parse().map_err(|e| err(format!("bad {what}: {e}")))?;
                    }
                    Ok(Vec3::new(v[0], v[1], v[2]))
                };
                let color_v = triple(fields[3], "color")?;
                let extent = triple(fields[4], "extent")?;
                let position = triple(fields[5], "position")?;
                let openness: f32 =
                    fields[6].parse().map_err(|e| err(format!("bad openness: {e}")))?;
                objects.push(SceneObject {
                    id,
                    class_id,
                    color: [color_v.x as f32, color_v.y as f32, color_v.z as f32],
                    extent,
                    position,
                    openness,
                    pickable: is_pickable_class(class_id),
                });
            }
            other => return Err(err(format!("unknown record '{other}'"))),
        }
    }
    Ok(Scene {
        room: room.ok_or(SimError::SceneFormat {
            line: 0,
            reason: "missing room line".into(),
        })?,
        objects,
    })
}
