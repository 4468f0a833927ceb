//! Two-phase visual room rearrangement: voxel semantic mapping from RGB-D
//! observations, semantic search for objects that moved, map diffing to
//! infer the rearrangement goal, and planned execution inside a synthetic
//! simulator, plus a batch evaluation harness.
//!
//! Pipeline per episode: the agent first walks the goal scene and builds the
//! walkthrough map, then walks the shuffled scene and builds the unshuffle
//! map, diffs the two maps into relocation/openness disagreements, and
//! resolves each disagreement with pick-and-place while re-mapping.

pub mod agent;
pub mod diffing;
pub mod geometry;
pub mod harness;
pub mod perception;
pub mod planner;
pub mod search_policy;
pub mod semantic_map;
pub mod simulator;

pub use geometry::{CameraIntrinsics, GridSpec, Pose, Vec3};
pub use semantic_map::{Phase, SemanticMap};
pub use simulator::{EpisodeSpec, Metrics, Scene, SimConfig};
