//! Per-pixel raycast rendering of RGB, depth, and exact segmentation.
//!
//! Rays are cast through integer pixel coordinates with an unnormalized
//! camera direction whose forward component is 1, so the ray parameter at
//! the hit equals the stored depth (forward distance, not ray length) and
//! back-projection through the geometry module inverts rendering exactly.

use crate::geometry::{CameraIntrinsics, DepthImage, Pose, RgbImage, Vec3};
use crate::perception::{Detection, SegmentationFrame};

use super::{Observation, Scene, BACKGROUND_CLASSES, CLASS_FLOOR, CLASS_WALL, NUM_CLASSES};

#[derive(Clone, Copy, PartialEq)]
enum Hit {
    None,
    Floor,
    Wall,
    Object(usize),
}

/// Renders an observation from `pose`. Deterministic; no lighting model,
/// every surface shows its flat color.
pub fn render_observation(scene: &Scene, pose: &Pose, intr: &CameraIntrinsics) -> Observation {
    let rot = pose.rotation();
    let origin = pose.position;
    let w = intr.width;
    let h = intr.height;

    let mut depth = DepthImage::new(w, h);
    let mut rgb = RgbImage::new(w, h);
    let mut hits = vec![Hit::None; w * h];

    let boxes: Vec<(Vec3, Vec3)> = scene.objects.iter().map(|o| o.aabb()).collect();
    let room = scene.room;

    for v in 0..h {
        for u in 0..w {
            let dir_cam = Vec3::new(
                (u as f64 - intr.cx) / intr.focal_px,
                -(v as f64 - intr.cy) / intr.focal_px,
                1.0,
            );
            let dir = rot * dir_cam;
            let mut best_t = f64::INFINITY;
            let mut best = Hit::None;

            // Room planes: floor, ceiling, four walls.
            for (axis, level, kind) in [
                (1usize, 0.0f64, Hit::Floor),
                (1, room.y, Hit::Wall),
                (0, 0.0, Hit::Wall),
                (0, room.x, Hit::Wall),
                (2, 0.0, Hit::Wall),
                (2, room.z, Hit::Wall),
            ] {
                let d = dir[axis];
                if d.abs() < 1e-12 {
                    continue;
                }
                let t = (level - origin[axis]) / d;
                if t <= 1e-9 || t >= best_t {
                    continue;
                }
                let p = origin + dir * t;
                let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
                if p[a] >= -1e-9 && p[a] <= room[a] + 1e-9 && p[b] >= -1e-9 && p[b] <= room[b] + 1e-9
                {
                    best_t = t;
                    best = kind;
                }
            }

            // Object boxes, slab test.
            for (i, (lo, hi)) in boxes.iter().enumerate() {
                let mut t_enter = 1e-9f64;
                let mut t_exit = best_t;
                let mut ok = true;
                for axis in 0..3 {
                    let d = dir[axis];
                    if d.abs() < 1e-12 {
                        if origin[axis] < lo[axis] || origin[axis] > hi[axis] {
                            ok = false;
                            break;
                        }
                        continue;
                    }
                    let inv = 1.0 / d;
                    let (t0, t1) = {
                        let a = (lo[axis] - origin[axis]) * inv;
                        let b = (hi[axis] - origin[axis]) * inv;
                        if a < b {
                            (a, b)
                        } else {
                            (b, a)
                        }
                    };
                    t_enter = t_enter.max(t0);
                    t_exit = t_exit.min(t1);
                    if t_enter > t_exit {
                        ok = false;
                        break;
                    }
                }
                if ok && t_enter < best_t {
                    best_t = t_enter;
                    best = Hit::Object(i);
                }
            }

            let px = v * w + u;
            if best_t.is_finite() {
                depth.data[px] = best_t as f32;
                hits[px] = best;
                rgb.data[px] = match best {
                    Hit::Floor => super::class_base_color(CLASS_FLOOR),
                    Hit::Wall => super::class_base_color(CLASS_WALL),
                    Hit::Object(i) => scene.objects[i].color,
                    Hit::None => [0.0; 3],
                };
            }
        }
    }

    // Group pixels into detections: floor, wall, then objects by scene order.
    let mut floor_px = Vec::new();
    let mut wall_px = Vec::new();
    let mut object_px: Vec<Vec<u32>> = vec![Vec::new(); scene.objects.len()];
    for (px, hit) in hits.iter().enumerate() {
        match hit {
            Hit::Floor => floor_px.push(px as u32),
            Hit::Wall => wall_px.push(px as u32),
            Hit::Object(i) => object_px[*i].push(px as u32),
            Hit::None => {}
        }
    }
    let mut detections = Vec::new();
    if !floor_px.is_empty() {
        detections.push(Detection {
            class_id: CLASS_FLOOR,
            instance_id: None,
            confidence: 1.0,
            pixels: floor_px,
            openness: 0.0,
        });
    }
    if !wall_px.is_empty() {
        detections.push(Detection {
            class_id: CLASS_WALL,
            instance_id: None,
            confidence: 1.0,
            pixels: wall_px,
            openness: 0.0,
        });
    }
    for (i, pixels) in object_px.into_iter().enumerate() {
        if pixels.is_empty() {
            continue;
        }
        let o = &scene.objects[i];
        detections.push(Detection {
            class_id: o.class_id,
            instance_id: Some(o.id),
            confidence: 1.0,
            pixels,
            openness: o.openness,
        });
    }

    Observation {
        pose: *pose,
        rgb,
        depth,
        seg: SegmentationFrame {
            width: w,
            height: h,
            num_classes: NUM_CLASSES,
            background_classes: BACKGROUND_CLASSES,
            detections,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{class_base_color, SceneObject};

    fn empty_room() -> Scene {
        Scene {
            room: Vec3::new(4.8, 2.4, 4.8),
            objects: Vec::new(),
        }
    }

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::square_fov90(64)
    }

    #[test]
    fn center_pixel_facing_wall_reads_wall_distance() {
        let scene = empty_room();
        // Stand 2 m from the far z wall, facing +z, level camera.
        let pose = Pose::new(Vec3::new(2.4, 1.5, 2.8), 0.0, 0.0);
        let obs = render_observation(&scene, &pose, &intr());
        let d = obs.depth.at(32, 32);
        assert!((d - 2.0).abs() < 1e-6, "depth {d}");
    }

    #[test]
    fn empty_frustum_sees_only_background_classes() {
        let scene = empty_room();
        let pose = Pose::new(Vec3::new(2.4, 1.5, 2.4), 0.0, 0.0);
        let obs = render_observation(&scene, &pose, &intr());
        assert!(!obs.seg.detections.is_empty());
        for det in &obs.seg.detections {
            assert!(det.class_id < BACKGROUND_CLASSES);
        }
        // Every pixel hits something in a closed room.
        assert!(obs.depth.data.iter().all(|&d| d > 0.0));
    }

    #[test]
    fn box_face_depth_matches_analytic_intersection() {
        let mut scene = empty_room();
        scene.objects.push(SceneObject {
            id: 0,
            class_id: 9,
            color: class_base_color(9),
            extent: Vec3::new(0.4, 0.4, 0.4),
            position: Vec3::new(2.4, 1.5, 3.6),
            openness: 0.0,
            pickable: true,
        });
        // Face +z from 1.2 m + half extent away from the box center.
        let pose = Pose::new(Vec3::new(2.4, 1.5, 2.0), 0.0, 0.0);
        let obs = render_observation(&scene, &pose, &intr());
        // Center ray hits the near face at z = 3.4 -> depth 1.4.
        let d = obs.depth.at(32, 32);
        assert!((d - 1.4).abs() < 1e-6, "depth {d}");
        let det = obs
            .seg
            .detections
            .iter()
            .find(|det| det.instance_id == Some(0))
            .expect("object detection present");
        assert_eq!(det.class_id, 9);
        assert_eq!(det.confidence, 1.0);
    }

    #[test]
    fn rendering_is_deterministic() {
        let mut scene = empty_room();
        scene.objects.push(SceneObject {
            id: 3,
            class_id: 12,
            color: [0.3, 0.6, 0.2],
            extent: Vec3::new(0.3, 0.5, 0.3),
            position: Vec3::new(1.0, 0.25, 1.0),
            openness: 0.0,
            pickable: true,
        });
        let pose = Pose::new(Vec3::new(2.4, 1.5, 2.4), 0.7, -0.3);
        let a = render_observation(&scene, &pose, &intr());
        let b = render_observation(&scene, &pose, &intr());
        assert_eq!(a.depth.data, b.depth.data);
        assert_eq!(a.rgb.data, b.rgb.data);
        assert_eq!(a.seg.detections.len(), b.seg.detections.len());
    }

    #[test]
    fn occlusion_prefers_nearer_box() {
        let mut scene = empty_room();
        for (id, z) in [(0u32, 3.0f64), (1, 4.0)] {
            scene.objects.push(SceneObject {
                id,
                class_id: 9,
                color: [0.5; 3],
                extent: Vec3::new(0.6, 0.6, 0.2),
                position: Vec3::new(2.4, 1.5, z),
                openness: 0.0,
                pickable: true,
            });
        }
        let pose = Pose::new(Vec3::new(2.4, 1.5, 1.0), 0.0, 0.0);
        let obs = render_observation(&scene, &pose, &intr());
        let hit = obs.seg.rasterize().at(32, 32).unwrap();
        let det = &obs.seg.detections[hit.detection as usize];
        assert_eq!(det.instance_id, Some(0));
        assert!((obs.depth.at(32, 32) - 1.9).abs() < 1e-6);
    }
}
