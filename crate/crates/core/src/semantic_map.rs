//! Voxel-based semantic maps: per-voxel class probability vectors updated by
//! an exponential moving average, plus auxiliary per-voxel color and openness
//! channels updated with the same rule, and the `SMAP1` on-disk format.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

use crate::geometry::{GridSpec, Vec3, VoxelEvidence};

const MAGIC: &[u8; 6] = b"SMAP1\0";
const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("evidence dims {got:?} do not match map dims {expected:?}")]
    DimensionMismatch {
        expected: [usize; 3],
        got: [usize; 3],
    },
    #[error("map format error at offset {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Which episode phase a map belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Walkthrough = 0,
    Unshuffle = 1,
}

impl Phase {
    pub fn from_u8(v: u8) -> Option<Phase> {
        match v {
            0 => Some(Phase::Walkthrough),
            1 => Some(Phase::Unshuffle),
            _ => None,
        }
    }
}

/// Binary occupancy over the voxel grid.
#[derive(Debug, Clone)]
pub struct OccupancyGrid {
    pub dims: [usize; 3],
    pub data: Vec<bool>,
}

/// Dense voxel map of per-class probabilities.
///
/// Invariants: every entry is nonnegative, per-voxel sums stay at most one
/// (no renormalization is ever applied), and a never-observed voxel is
/// exactly the zero vector.
///
/// A map has a single writer; `update` mutates in place under that rule.
#[derive(Debug, Clone)]
pub struct SemanticMap {
    grid: GridSpec,
    epsilon: f64,
    phase: Phase,
    /// `num_voxels * num_classes`, voxel-major.
    probs: Vec<f64>,
    /// Running mean of observed colors, `num_voxels * 3`.
    color: Vec<f32>,
    /// Running mean of observed openness attributes.
    openness: Vec<f32>,
    /// Observation counts backing the running means.
    color_samples: Vec<u32>,
    /// Exact cache of "any class probability > 0" per voxel.
    occupied: Vec<bool>,
    occupied_count: usize,
}

impl SemanticMap {
    pub fn new(grid: GridSpec, epsilon: f64, phase: Phase) -> Self {
        assert!(
            epsilon > 0.0 && epsilon < 1.0,
            "epsilon must lie in (0, 1), got {epsilon}"
        );
        let n = grid.num_voxels();
        let c = grid.num_classes;
        Self {
            grid,
            epsilon,
            phase,
            probs: vec![0.0; n * c],
            color: vec![0.0; n * 3],
            openness: vec![0.0; n],
            color_samples: vec![0; n],
            occupied: vec![false; n],
            occupied_count: 0,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    #[inline]
    pub fn probs_at(&self, flat: usize) -> &[f64] {
        let c = self.grid.num_classes;
        &self.probs[flat * c..(flat + 1) * c]
    }

    #[inline]
    pub fn color_at(&self, flat: usize) -> [f32; 3] {
        [
            self.color[flat * 3],
            self.color[flat * 3 + 1],
            self.color[flat * 3 + 2],
        ]
    }

    #[inline]
    pub fn openness_at(&self, flat: usize) -> f32 {
        self.openness[flat]
    }

    #[inline]
    pub fn is_occupied(&self, flat: usize) -> bool {
        self.occupied[flat]
    }

    /// Number of voxels with any positive class probability.
    pub fn occupied_count(&self) -> usize {
        self.occupied_count
    }

    /// Flat indices of all occupied voxels, ascending.
    pub fn occupied_voxels(&self) -> impl Iterator<Item = usize> + '_ {
        self.occupied
            .iter()
            .enumerate()
            .filter(|(_, &o)| o)
            .map(|(i, _)| i)
    }

    /// Applies the moving-average update.
    ///
    /// Per observed voxel `v`: `probs'[v] = probs[v] * eps + ev[v] * (1 - eps)`;
    /// voxels outside the evidence mask are untouched. The color and
    /// openness channels keep a plain running mean of their observations so
    /// an instance's appearance does not depend on how often it was seen.
    pub fn update(&mut self, ev: &VoxelEvidence) -> Result<(), MapError> {
        if ev.dims != self.grid.dims {
            return Err(MapError::DimensionMismatch {
                expected: self.grid.dims,
                got: ev.dims,
            });
        }
        let c = self.grid.num_classes;
        let eps = self.epsilon;
        let w = 1.0 - eps;
        for entry in &ev.entries {
            let base = entry.flat * c;
            let slice = &mut self.probs[base..base + c];
            for p in slice.iter_mut() {
                *p *= eps;
            }
            for &(cls, p) in &entry.probs {
                slice[cls as usize] += p as f64 * w;
            }
            let now = slice.iter().any(|&p| p > 0.0);
            let was = self.occupied[entry.flat];
            self.occupied[entry.flat] = now;
            match (was, now) {
                (false, true) => self.occupied_count += 1,
                (true, false) => self.occupied_count -= 1,
                _ => {}
            }

            let cb = entry.flat * 3;
            let n = self.color_samples[entry.flat] + 1;
            self.color_samples[entry.flat] = n;
            for ch in 0..3 {
                let old = self.color[cb + ch] as f64;
                self.color[cb + ch] = (old + (entry.rgb[ch] as f64 - old) / n as f64) as f32;
            }
            let old = self.openness[entry.flat] as f64;
            self.openness[entry.flat] = (old + (entry.openness as f64 - old) / n as f64) as f32;
        }
        Ok(())
    }

    /// Resets the given voxels to the never-observed state. Used when the
    /// agent knows it has physically removed an object from a region.
    pub fn clear_voxels(&mut self, voxels: &[usize]) {
        let c = self.grid.num_classes;
        for &flat in voxels {
            self.probs[flat * c..(flat + 1) * c].fill(0.0);
            self.color[flat * 3..flat * 3 + 3].fill(0.0);
            self.openness[flat] = 0.0;
            self.color_samples[flat] = 0;
            if self.occupied[flat] {
                self.occupied_count -= 1;
            }
            self.occupied[flat] = false;
        }
    }

    /// Marks a voxel occupied iff any (filtered) class probability is
    /// strictly positive.
    pub fn occupancy_grid(&self, class_filter: Option<&[usize]>) -> OccupancyGrid {
        let data = match class_filter {
            None => self.occupied.clone(),
            Some(classes) => {
                let c = self.grid.num_classes;
                (0..self.grid.num_voxels())
                    .map(|v| classes.iter().any(|&cls| self.probs[v * c + cls] > 0.0))
                    .collect()
            }
        };
        OccupancyGrid {
            dims: self.grid.dims,
            data,
        }
    }

    /// Mean-pools the map by an integer factor along all three axes,
    /// producing a coarser map over the same volume. Partial edge blocks
    /// average over the voxels they actually contain.
    pub fn mean_pooled(&self, factor: usize) -> SemanticMap {
        assert!(factor >= 1);
        let d = self.grid.dims;
        let nd = [d[0].div_ceil(factor), d[1].div_ceil(factor), d[2].div_ceil(factor)];
        let grid = GridSpec::new(
            nd,
            self.grid.voxel_size * factor as f64,
            self.grid.origin,
            self.grid.num_classes,
        );
        let mut out = SemanticMap::new(grid, self.epsilon, self.phase);
        let c = self.grid.num_classes;
        for bx in 0..nd[0] {
            for by in 0..nd[1] {
                for bz in 0..nd[2] {
                    let x1 = ((bx + 1) * factor).min(d[0]);
                    let y1 = ((by + 1) * factor).min(d[1]);
                    let z1 = ((bz + 1) * factor).min(d[2]);
                    let mut acc = vec![0.0f64; c];
                    let mut col = [0.0f64; 3];
                    let mut open = 0.0f64;
                    let mut n = 0usize;
                    for x in bx * factor..x1 {
                        for y in by * factor..y1 {
                            for z in bz * factor..z1 {
                                let flat = self.grid.flat([x, y, z]);
                                n += 1;
                                if !self.occupied[flat] {
                                    continue;
                                }
                                let base = flat * c;
                                for (a, &p) in acc.iter_mut().zip(&self.probs[base..base + c]) {
                                    *a += p;
                                }
                                for ch in 0..3 {
                                    col[ch] += self.color[flat * 3 + ch] as f64;
                                }
                                open += self.openness[flat] as f64;
                            }
                        }
                    }
                    let flat_out = out.grid.flat([bx, by, bz]);
                    let base = flat_out * c;
                    let mut any = false;
                    for (i, a) in acc.iter().enumerate() {
                        let v = a / n as f64;
                        out.probs[base + i] = v;
                        any |= v > 0.0;
                    }
                    for ch in 0..3 {
                        out.color[flat_out * 3 + ch] = (col[ch] / n as f64) as f32;
                    }
                    out.openness[flat_out] = (open / n as f64) as f32;
                    out.occupied[flat_out] = any;
                    if any {
                        out.occupied_count += 1;
                    }
                }
            }
        }
        out
    }

    /// Writes the map in the `SMAP1` sparse format. Probabilities are
    /// serialized at f32 precision, the precision of the wire format.
    pub fn save(&self, path: &Path) -> Result<(), MapError> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        w.write_all(MAGIC)?;
        w.write_u16::<LittleEndian>(FORMAT_VERSION)?;
        for dim in self.grid.dims {
            w.write_u32::<LittleEndian>(dim as u32)?;
        }
        w.write_u32::<LittleEndian>(self.grid.num_classes as u32)?;
        w.write_f64::<LittleEndian>(self.grid.voxel_size)?;
        for a in 0..3 {
            w.write_f64::<LittleEndian>(self.grid.origin[a])?;
        }
        w.write_f64::<LittleEndian>(self.epsilon)?;
        w.write_u8(self.phase as u8)?;
        let records: Vec<usize> = self.occupied_voxels().collect();
        w.write_u64::<LittleEndian>(records.len() as u64)?;
        let c = self.grid.num_classes;
        for flat in records {
            w.write_u64::<LittleEndian>(flat as u64)?;
            for &p in &self.probs[flat * c..(flat + 1) * c] {
                w.write_f32::<LittleEndian>(p as f32)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SemanticMap, MapError> {
        let bytes = std::fs::read(path)?;
        let mut r = OffsetReader {
            inner: &bytes[..],
            offset: 0,
        };

        let mut magic = [0u8; 6];
        r.read_exact_at(&mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(MapError::Format {
                offset: 0,
                reason: format!("bad magic {magic:?}"),
            });
        }
        let version = r.u16("version")?;
        if version != FORMAT_VERSION {
            return Err(MapError::Format {
                offset: 6,
                reason: format!("unsupported version {version}"),
            });
        }
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            *d = r.u32("grid dims")? as usize;
        }
        let num_classes = r.u32("class count")? as usize;
        let voxel_size = r.f64("voxel size")?;
        let mut origin = Vec3::zeros();
        for a in 0..3 {
            origin[a] = r.f64("origin")?;
        }
        let epsilon = r.f64("epsilon")?;
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(MapError::Format {
                offset: r.offset - 8,
                reason: format!("epsilon {epsilon} outside (0, 1)"),
            });
        }
        let phase_byte = r.u8("phase")?;
        let phase = Phase::from_u8(phase_byte).ok_or(MapError::Format {
            offset: r.offset - 1,
            reason: format!("invalid phase byte {phase_byte}"),
        })?;
        if dims.iter().any(|&d| d == 0) || num_classes == 0 || voxel_size <= 0.0 {
            return Err(MapError::Format {
                offset: 8,
                reason: format!("invalid grid {dims:?} x {num_classes} @ {voxel_size}"),
            });
        }

        let grid = GridSpec::new(dims, voxel_size, origin, num_classes);
        let mut map = SemanticMap::new(grid, epsilon, phase);
        let count = r.u64("record count")?;
        let num_voxels = map.grid.num_voxels();
        for _ in 0..count {
            let record_offset = r.offset;
            let flat = r.u64("voxel index")? as usize;
            if flat >= num_voxels {
                return Err(MapError::Format {
                    offset: record_offset,
                    reason: format!("voxel index {flat} out of range {num_voxels}"),
                });
            }
            let mut any = false;
            for i in 0..num_classes {
                let p = r.f32("probability")? as f64;
                map.probs[flat * num_classes + i] = p;
                any |= p > 0.0;
            }
            if any && !map.occupied[flat] {
                map.occupied_count += 1;
            }
            map.occupied[flat] = any;
        }
        if r.offset as usize != bytes.len() {
            return Err(MapError::Format {
                offset: r.offset,
                reason: format!("{} trailing bytes", bytes.len() - r.offset as usize),
            });
        }
        Ok(map)
    }
}

struct OffsetReader<'a> {
    inner: &'a [u8],
    offset: u64,
}

impl<'a> OffsetReader<'a> {
    fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<(), MapError> {
        let offset = self.offset;
        self.inner.read_exact(buf).map_err(|_| MapError::Format {
            offset,
            reason: format!("truncated while reading {what}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8, MapError> {
        let mut b = [0u8; 1];
        self.read_exact_at(&mut b, what)?;
        Ok(b[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, MapError> {
        let mut b = [0u8; 2];
        self.read_exact_at(&mut b, what)?;
        Ok((&b[..]).read_u16::<LittleEndian>().unwrap())
    }

    fn u32(&mut self, what: &str) -> Result<u32, MapError> {
        let mut b = [0u8; 4];
        self.read_exact_at(&mut b, what)?;
        Ok((&b[..]).read_u32::<LittleEndian>().unwrap())
    }

    fn u64(&mut self, what: &str) -> Result<u64, MapError> {
        let mut b = [0u8; 8];
        self.read_exact_at(&mut b, what)?;
        Ok((&b[..]).read_u64::<LittleEndian>().unwrap())
    }

    fn f32(&mut self, what: &str) -> Result<f32, MapError> {
        let mut b = [0u8; 4];
        self.read_exact_at(&mut b, what)?;
        Ok((&b[..]).read_f32::<LittleEndian>().unwrap())
    }

    fn f64(&mut self, what: &str) -> Result<f64, MapError> {
        let mut b = [0u8; 8];
        self.read_exact_at(&mut b, what)?;
        Ok((&b[..]).read_f64::<LittleEndian>().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{EvidenceEntry, GridSpec, VoxelEvidence};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_grid(c: usize) -> GridSpec {
        GridSpec::new([4, 4, 4], 0.05, Vec3::zeros(), c)
    }

    fn evidence(grid: &GridSpec, entries: Vec<EvidenceEntry>) -> VoxelEvidence {
        VoxelEvidence {
            dims: grid.dims,
            num_classes: grid.num_classes,
            entries,
            dropped: 0,
        }
    }

    fn one_hot_entry(flat: usize, class: u16) -> EvidenceEntry {
        EvidenceEntry {
            flat,
            probs: vec![(class, 1.0)],
            rgb: [0.2, 0.4, 0.6],
            openness: 0.0,
        }
    }

    #[test]
    fn first_observation_of_empty_voxel_is_half_onehot() {
        let grid = small_grid(6);
        let mut map = SemanticMap::new(grid.clone(), 0.5, Phase::Walkthrough);
        map.update(&evidence(&grid, vec![one_hot_entry(7, 3)])).unwrap();
        let p = map.probs_at(7);
        for (i, &v) in p.iter().enumerate() {
            if i == 3 {
                assert_eq!(v, 0.5);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn unmasked_voxels_are_untouched() {
        let grid = small_grid(6);
        let mut map = SemanticMap::new(grid.clone(), 0.5, Phase::Walkthrough);
        map.update(&evidence(&grid, vec![one_hot_entry(7, 3)])).unwrap();
        let before = map.probs_at(9).to_vec();
        map.update(&evidence(&grid, vec![one_hot_entry(7, 2)])).unwrap();
        assert_eq!(map.probs_at(9), &before[..]);
    }

    #[test]
    fn repeated_updates_converge_to_evidence_geometrically() {
        let grid = small_grid(6);
        let mut map = SemanticMap::new(grid.clone(), 0.5, Phase::Walkthrough);
        // Start far from the evidence.
        map.update(&evidence(&grid, vec![one_hot_entry(0, 1)])).unwrap();
        let ev = evidence(
            &grid,
            vec![EvidenceEntry {
                flat: 0,
                probs: vec![(2, 0.7), (4, 0.2)],
                rgb: [0.0; 3],
                openness: 0.0,
            }],
        );
        for _ in 0..20 {
            map.update(&ev).unwrap();
        }
        let p = map.probs_at(0);
        let target = [0.0, 0.0, 0.7, 0.0, 0.2, 0.0];
        let linf = p
            .iter()
            .zip(target.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(linf <= 0.5f64.powi(20) + 1e-12, "linf = {linf}");
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let grid = small_grid(6);
        let mut map = SemanticMap::new(grid, 0.5, Phase::Walkthrough);
        let other = GridSpec::new([2, 2, 2], 0.05, Vec3::zeros(), 6);
        let ev = evidence(&other, vec![]);
        assert!(matches!(
            map.update(&ev),
            Err(MapError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn monotone_forgetting_is_exactly_geometric() {
        let grid = small_grid(4);
        let mut map = SemanticMap::new(grid.clone(), 0.5, Phase::Walkthrough);
        map.update(&evidence(&grid, vec![one_hot_entry(5, 1)])).unwrap();
        let initial = map.probs_at(5)[1];
        let n = 13;
        for _ in 0..n {
            map.update(&evidence(&grid, vec![one_hot_entry(5, 2)])).unwrap();
        }
        // Halving is exact in binary floating point.
        assert_eq!(map.probs_at(5)[1], initial * 0.5f64.powi(n));
    }

    #[test]
    fn convex_update_preserves_subnormalized_sums() {
        let grid = GridSpec::new([10, 10, 10], 0.05, Vec3::zeros(), 5);
        let mut map = SemanticMap::new(grid.clone(), 0.5, Phase::Walkthrough);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for round in 0..10 {
            let entries: Vec<EvidenceEntry> = (0..1000)
                .map(|flat| {
                    let mut probs = Vec::new();
                    let mut budget = 1.0f32;
                    for cls in 0..5 {
                        if rng.random::<f32>() < 0.5 {
                            let p = rng.random::<f32>() * budget;
                            budget -= p;
                            if p > 0.0 {
                                probs.push((cls as u16, p));
                            }
                        }
                    }
                    EvidenceEntry {
                        flat,
                        probs,
                        rgb: [0.0; 3],
                        openness: 0.0,
                    }
                })
                .collect();
            map.update(&evidence(&grid, entries)).unwrap();
            for flat in 0..1000 {
                let sum: f64 = map.probs_at(flat).iter().sum();
                assert!(
                    (0.0..=1.0 + 1e-9).contains(&sum),
                    "round {round} voxel {flat} sum {sum}"
                );
            }
        }
    }

    #[test]
    fn occupancy_all_zero_map_is_free() {
        let map = SemanticMap::new(small_grid(4), 0.5, Phase::Walkthrough);
        let occ = map.occupancy_grid(None);
        assert!(occ.data.iter().all(|&o| !o));
    }

    #[test]
    fn occupancy_uses_strict_nonzero_rule() {
        let grid = small_grid(4);
        let mut map = SemanticMap::new(grid.clone(), 0.5, Phase::Walkthrough);
        map.update(&evidence(
            &grid,
            vec![EvidenceEntry {
                flat: 3,
                probs: vec![(2, 2e-6)],
                rgb: [0.0; 3],
                openness: 0.0,
            }],
        ))
        .unwrap();
        let occ = map.occupancy_grid(None);
        assert!(occ.data[3]);
        assert_eq!(occ.data.iter().filter(|&&o| o).count(), 1);
    }

    #[test]
    fn occupancy_class_filter_misses_other_classes() {
        let grid = small_grid(8);
        let mut map = SemanticMap::new(grid.clone(), 0.5, Phase::Walkthrough);
        map.update(&evidence(&grid, vec![one_hot_entry(3, 5)])).unwrap();
        let occ = map.occupancy_grid(Some(&[2]));
        assert!(occ.data.iter().all(|&o| !o));
        let occ5 = map.occupancy_grid(Some(&[5]));
        assert!(occ5.data[3]);
    }

    fn random_f32_map(seed: u64) -> SemanticMap {
        let grid = GridSpec::new([6, 5, 4], 0.05, Vec3::new(0.5, 0.0, -1.0), 7);
        let mut map = SemanticMap::new(grid.clone(), 0.5, Phase::Unshuffle);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries: Vec<EvidenceEntry> = Vec::new();
        for flat in 0..grid.num_voxels() {
            if rng.random::<f32>() < 0.3 {
                let cls = rng.random_range(0..7u16);
                entries.push(EvidenceEntry {
                    flat,
                    probs: vec![(cls, rng.random::<f32>())],
                    rgb: [0.0; 3],
                    openness: 0.0,
                });
            }
        }
        map.update(&evidence(&grid, entries)).unwrap();
        // One update of an empty map halves f32 evidence: still
        // f32-representable, like any map loaded from disk.
        map
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.smap");
        let map = random_f32_map(99);
        map.save(&path).unwrap();
        let loaded = SemanticMap::load(&path).unwrap();
        assert_eq!(map.grid(), loaded.grid());
        assert_eq!(map.epsilon(), loaded.epsilon());
        assert_eq!(map.phase(), loaded.phase());
        assert_eq!(map.probs, loaded.probs);
        assert_eq!(map.occupied, loaded.occupied);
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.smap");
        std::fs::write(&path, b"NOTMAP\x01\x00rest").unwrap();
        match SemanticMap::load(&path) {
            Err(MapError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_names_the_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.smap");
        let map = random_f32_map(5);
        map.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match SemanticMap::load(&path) {
            Err(MapError::Format { offset, reason }) => {
                assert!(offset > 0);
                assert!(reason.contains("truncated"), "{reason}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn empty_map_serializes_header_and_zero_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.smap");
        let map = SemanticMap::new(small_grid(4), 0.5, Phase::Walkthrough);
        map.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // magic + version + dims + C + voxel + origin + epsilon + phase + count
        assert_eq!(bytes.len(), 6 + 2 + 16 + 8 + 24 + 8 + 1 + 8);
        let loaded = SemanticMap::load(&path).unwrap();
        assert!(loaded.occupied_voxels().next().is_none());
    }

    #[test]
    fn mean_pooling_averages_blocks() {
        let grid = GridSpec::new([4, 2, 2], 0.1, Vec3::zeros(), 3);
        let mut map = SemanticMap::new(grid.clone(), 0.5, Phase::Walkthrough);
        map.update(&evidence(&grid, vec![one_hot_entry(0, 1)])).unwrap();
        let pooled = map.mean_pooled(2);
        assert_eq!(pooled.grid().dims, [2, 1, 1]);
        // One voxel of 8 in the block carries 0.5 on class 1.
        assert!((pooled.probs_at(0)[1] - 0.5 / 8.0).abs() < 1e-12);
        assert_eq!(pooled.probs_at(1)[1], 0.0);
        assert_eq!(pooled.grid().voxel_size, 0.2);
    }
}
