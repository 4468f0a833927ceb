//! Per-pixel semantic predictions: ground-truth segmentation frames from the
//! simulator, a parameterized noisy detector standing in for a learned
//! instance-segmentation model, and confidence filtering.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One detected instance: a class, a confidence score, and the pixel mask it
/// covers. Masks of distinct detections never overlap.
#[derive(Debug, Clone)]
pub struct Detection {
    pub class_id: usize,
    /// Simulator instance handle, when known. Survives class confusion.
    pub instance_id: Option<u32>,
    pub confidence: f32,
    /// Flat pixel indices (`v * width + u`).
    pub pixels: Vec<u32>,
    /// Openness attribute of the underlying object, in `[0, 1]`.
    pub openness: f32,
}

/// Per-pixel class probabilities for one frame, stored as a set of
/// detections. The probability vector of a pixel is `confidence` on the
/// covering detection's class and zero elsewhere, so per-pixel sums are at
/// most one.
#[derive(Debug, Clone)]
pub struct SegmentationFrame {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    /// Leading "stuff" classes (floor, wall) that the detector never
    /// corrupts; detections of these classes pass through noise untouched.
    pub background_classes: usize,
    pub detections: Vec<Detection>,
}

/// Dense per-pixel lookup derived from a frame.
pub struct PixelTable {
    width: usize,
    cells: Vec<Option<PixelHit>>,
}

#[derive(Debug, Clone, Copy)]
pub struct PixelHit {
    pub class_id: u16,
    pub confidence: f32,
    pub detection: u32,
    pub openness: f32,
}

impl PixelTable {
    #[inline]
    pub fn at(&self, u: usize, v: usize) -> Option<PixelHit> {
        self.cells[v * self.width + u]
    }
}

impl SegmentationFrame {
    pub fn empty(width: usize, height: usize, num_classes: usize, background: usize) -> Self {
        Self {
            width,
            height,
            num_classes,
            background_classes: background,
            detections: Vec::new(),
        }
    }

    pub fn rasterize(&self) -> PixelTable {
        let mut cells = vec![None; self.width * self.height];
        for (d_idx, det) in self.detections.iter().enumerate() {
            for &px in &det.pixels {
                cells[px as usize] = Some(PixelHit {
                    class_id: det.class_id as u16,
                    confidence: det.confidence,
                    detection: d_idx as u32,
                    openness: det.openness,
                });
            }
        }
        PixelTable {
            width: self.width,
            cells,
        }
    }
}

/// Beta-law parameters for sampled detection confidences. `beta == 0`
/// degenerates to a point mass at 1.0.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaParams {
    pub fn sample(&self, rng: &mut impl Rng) -> f32 {
        if self.beta <= 0.0 {
            return 1.0;
        }
        use rand_distr::Distribution;
        let dist = rand_distr::Beta::new(self.alpha, self.beta).expect("valid beta params");
        dist.sample(rng) as f32
    }
}

/// Error profile of the synthetic detector. Noise acts per detection, not
/// per pixel: whole instances are dropped, relabeled, or eroded.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DetectorNoise {
    pub miss_rate: f64,
    pub confusion_rate: f64,
    /// Confidence law for detections that keep their true class.
    pub true_conf: BetaParams,
    /// Confidence law for relabeled (corrupted) detections.
    pub false_conf: BetaParams,
    pub mask_erosion_px: usize,
}

impl DetectorNoise {
    /// Zero noise: output equals input with confidence 1.0 everywhere.
    pub fn none() -> Self {
        Self {
            miss_rate: 0.0,
            confusion_rate: 0.0,
            true_conf: BetaParams {
                alpha: 1.0,
                beta: 0.0,
            },
            false_conf: BetaParams {
                alpha: 1.0,
                beta: 0.0,
            },
            mask_erosion_px: 0,
        }
    }

    pub fn moderate() -> Self {
        Self {
            miss_rate: 0.10,
            confusion_rate: 0.05,
            true_conf: BetaParams {
                alpha: 14.0,
                beta: 1.0,
            },
            false_conf: BetaParams {
                alpha: 1.0,
                beta: 3.0,
            },
            mask_erosion_px: 1,
        }
    }

    pub fn heavy() -> Self {
        Self {
            miss_rate: 0.25,
            confusion_rate: 0.15,
            true_conf: BetaParams {
                alpha: 6.0,
                beta: 1.0,
            },
            false_conf: BetaParams {
                alpha: 1.0,
                beta: 1.5,
            },
            mask_erosion_px: 1,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.miss_rate == 0.0
            && self.confusion_rate == 0.0
            && self.mask_erosion_px == 0
            && self.true_conf.beta <= 0.0
    }
}

/// Named noise presets accepted by configs and the CLI.
pub fn noise_preset(name: &str) -> Option<DetectorNoise> {
    match name {
        "gt" => Some(DetectorNoise::none()),
        "moderate" => Some(DetectorNoise::moderate()),
        "heavy" => Some(DetectorNoise::heavy()),
        _ => None,
    }
}

/// Corrupts a ground-truth frame with the given noise profile.
///
/// Each foreground detection is independently dropped with `miss_rate`,
/// relabeled to a uniformly random wrong foreground class with
/// `confusion_rate`, eroded by `mask_erosion_px`, and assigned a confidence
/// drawn from the matching Beta law. Background (stuff) detections pass
/// through unchanged. Deterministic given the seed.
pub fn simulate_detections(
    gt: &SegmentationFrame,
    noise: &DetectorNoise,
    seed: u64,
) -> SegmentationFrame {
    if noise.is_zero() {
        return gt.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SegmentationFrame::empty(
        gt.width,
        gt.height,
        gt.num_classes,
        gt.background_classes,
    );
    let foreground_classes: Vec<usize> = (gt.background_classes..gt.num_classes).collect();
    for det in &gt.detections {
        if det.class_id < gt.background_classes {
            out.detections.push(det.clone());
            continue;
        }
        if rng.random::<f64>() < noise.miss_rate {
            continue;
        }
        let confused = rng.random::<f64>() < noise.confusion_rate;
        let class_id = if confused {
            let mut cls = det.class_id;
            if foreground_classes.len() > 1 {
                while cls == det.class_id {
                    cls = foreground_classes[rng.random_range(0..foreground_classes.len())];
                }
            }
            cls
        } else {
            det.class_id
        };
        let confidence = if confused {
            noise.false_conf.sample(&mut rng)
        } else {
            noise.true_conf.sample(&mut rng)
        };
        let pixels = erode_mask(&det.pixels, gt.width, gt.height, noise.mask_erosion_px);
        if pixels.is_empty() {
            continue;
        }
        out.detections.push(Detection {
            class_id,
            instance_id: det.instance_id,
            confidence,
            pixels,
            openness: det.openness,
        });
    }
    out
}

/// Removes detections with confidence strictly below `threshold`. Their
/// pixels revert to the zero probability vector.
pub fn filter_detections(frame: &SegmentationFrame, threshold: f32) -> SegmentationFrame {
    let mut out = frame.clone();
    out.detections.retain(|d| d.confidence >= threshold);
    out
}

/// Morphological erosion of a pixel set under 4-connectivity; image borders
/// count as outside the mask.
fn erode_mask(pixels: &[u32], width: usize, height: usize, rounds: usize) -> Vec<u32> {
    if rounds == 0 {
        return pixels.to_vec();
    }
    let mut current: std::collections::HashSet<u32> = pixels.iter().copied().collect();
    for _ in 0..rounds {
        let survivors: Vec<u32> = current
            .iter()
            .copied()
            .filter(|&px| {
                let u = (px as usize) % width;
                let v = (px as usize) / width;
                u > 0
                    && u + 1 < width
                    && v > 0
                    && v + 1 < height
                    && current.contains(&(px - 1))
                    && current.contains(&(px + 1))
                    && current.contains(&(px - width as u32))
                    && current.contains(&(px + width as u32))
            })
            .collect();
        current = survivors.into_iter().collect();
        if current.is_empty() {
            break;
        }
    }
    let mut out: Vec<u32> = current.into_iter().collect();
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame_with(dets: Vec<Detection>) -> SegmentationFrame {
        SegmentationFrame {
            width: 16,
            height: 16,
            num_classes: 8,
            background_classes: 2,
            detections: dets,
        }
    }

    fn block(x0: usize, y0: usize, side: usize) -> Vec<u32> {
        let mut px = Vec::new();
        for v in y0..y0 + side {
            for u in x0..x0 + side {
                px.push((v * 16 + u) as u32);
            }
        }
        px
    }

    fn det(class_id: usize, instance: u32, conf: f32, pixels: Vec<u32>) -> Detection {
        Detection {
            class_id,
            instance_id: Some(instance),
            confidence: conf,
            pixels,
            openness: 0.0,
        }
    }

    #[test]
    fn zero_noise_is_identity_with_unit_confidence() {
        let frame = frame_with(vec![
            det(3, 0, 1.0, block(1, 1, 4)),
            det(5, 1, 1.0, block(8, 8, 4)),
        ]);
        let out = simulate_detections(&frame, &DetectorNoise::none(), 7);
        assert_eq!(out.detections.len(), 2);
        for (a, b) in frame.detections.iter().zip(&out.detections) {
            assert_eq!(a.class_id, b.class_id);
            assert_eq!(a.pixels, b.pixels);
            assert_eq!(b.confidence, 1.0);
        }
    }

    #[test]
    fn full_miss_rate_empties_the_frame() {
        let frame = frame_with(vec![det(3, 0, 1.0, block(1, 1, 4))]);
        let mut noise = DetectorNoise::moderate();
        noise.miss_rate = 1.0;
        let out = simulate_detections(&frame, &noise, 7);
        assert!(out.detections.is_empty());
    }

    #[test]
    fn simulate_is_deterministic_given_seed() {
        let frame = frame_with(vec![
            det(3, 0, 1.0, block(1, 1, 5)),
            det(5, 1, 1.0, block(8, 8, 5)),
            det(6, 2, 1.0, block(8, 1, 5)),
        ]);
        let noise = DetectorNoise::heavy();
        let a = simulate_detections(&frame, &noise, 42);
        let b = simulate_detections(&frame, &noise, 42);
        assert_eq!(a.detections.len(), b.detections.len());
        for (x, y) in a.detections.iter().zip(&b.detections) {
            assert_eq!(x.class_id, y.class_id);
            assert_eq!(x.confidence, y.confidence);
            assert_eq!(x.pixels, y.pixels);
        }
    }

    #[test]
    fn background_detections_pass_through_noise() {
        let frame = frame_with(vec![det(0, 0, 1.0, block(0, 0, 8))]);
        let mut noise = DetectorNoise::heavy();
        noise.miss_rate = 1.0;
        let out = simulate_detections(&frame, &noise, 3);
        assert_eq!(out.detections.len(), 1);
        assert_eq!(out.detections[0].confidence, 1.0);
    }

    #[test]
    fn filter_drops_below_threshold() {
        let frame = frame_with(vec![
            det(3, 0, 0.85, block(1, 1, 4)),
            det(5, 1, 0.95, block(8, 8, 4)),
        ]);
        let out = filter_detections(&frame, 0.9);
        assert_eq!(out.detections.len(), 1);
        assert_eq!(out.detections[0].class_id, 5);
    }

    #[test]
    fn filter_at_zero_keeps_everything() {
        let frame = frame_with(vec![det(3, 0, 0.01, block(1, 1, 4))]);
        let out = filter_detections(&frame, 0.0);
        assert_eq!(out.detections.len(), 1);
    }

    #[test]
    fn filter_at_one_drops_sub_unit_confidences() {
        let frame = frame_with(vec![
            det(3, 0, 0.99, block(1, 1, 4)),
            det(5, 1, 0.5, block(8, 8, 4)),
        ]);
        let out = filter_detections(&frame, 1.0);
        assert!(out.detections.is_empty());
    }

    #[test]
    fn filter_is_monotone_in_threshold() {
        let frame = frame_with(vec![
            det(3, 0, 0.2, block(0, 0, 3)),
            det(4, 1, 0.5, block(4, 4, 3)),
            det(5, 2, 0.8, block(8, 8, 3)),
            det(6, 3, 0.95, block(12, 12, 3)),
        ]);
        let mut prev = usize::MAX;
        for t in [0.0f32, 0.1, 0.3, 0.6, 0.9, 1.0] {
            let n = filter_detections(&frame, t).detections.len();
            assert!(n <= prev);
            prev = n;
        }
    }

    #[test]
    fn erosion_shrinks_square_by_one_ring() {
        let px = block(4, 4, 5);
        let eroded = erode_mask(&px, 16, 16, 1);
        assert_eq!(eroded.len(), 9); // 5x5 -> 3x3
        let twice = erode_mask(&px, 16, 16, 2);
        assert_eq!(twice.len(), 1);
    }

    #[test]
    fn rasterize_reports_covering_detection() {
        let frame = frame_with(vec![det(3, 0, 0.7, block(1, 1, 2))]);
        let table = frame.rasterize();
        let hit = table.at(1, 1).unwrap();
        assert_eq!(hit.class_id, 3);
        assert_eq!(hit.confidence, 0.7);
        assert!(table.at(0, 0).is_none());
    }
}
