//! Maximum-likelihood training of the search policy against discretized
//! expert targets, with Adam and deterministic batching.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use super::net::{backward, cross_entropy_and_grad, forward_traced, LayerGrad, PolicyMeta, PolicyParams};
use super::{discretize_expert, map_input_tensor, ExpertDistribution, SearchError};
use crate::semantic_map::SemanticMap;

/// One training pair: a map snapshot and the episode's expert distribution.
pub struct SearchSample {
    pub map: SemanticMap,
    pub expert: ExpertDistribution,
}

pub struct SearchDataset {
    pub samples: Vec<SearchSample>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            batch_size: 8,
            epochs: 15,
            seed: 0,
        }
    }
}

pub struct TrainReport {
    pub params: PolicyParams,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// Loss and parameter gradients for a single (input, target) pair.
pub fn loss_and_grad(
    params: &PolicyParams,
    input: &Array3<f64>,
    target: &Array2<f64>,
) -> (f64, Vec<LayerGrad>) {
    let (logits, trace) = forward_traced(params, input);
    let (loss, dlogits) = cross_entropy_and_grad(&logits, target);
    let grads = backward(params, &trace, &dlogits);
    (loss, grads)
}

struct AdamState {
    m_w: Vec<Array2<f64>>,
    v_w: Vec<Array2<f64>>,
    m_b: Vec<Array1<f64>>,
    v_b: Vec<Array1<f64>>,
    t: u64,
}

impl AdamState {
    fn new(params: &PolicyParams) -> Self {
        Self {
            m_w: params.layers.iter().map(|l| Array2::zeros(l.weight.raw_dim())).collect(),
            v_w: params.layers.iter().map(|l| Array2::zeros(l.weight.raw_dim())).collect(),
            m_b: params.layers.iter().map(|l| Array1::zeros(l.bias.raw_dim())).collect(),
            v_b: params.layers.iter().map(|l| Array1::zeros(l.bias.raw_dim())).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut PolicyParams, grads: &[LayerGrad], lr: f64) {
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (i, layer) in params.layers.iter_mut().enumerate() {
            azip_adam(
                &mut self.m_w[i],
                &mut self.v_w[i],
                &mut layer.weight,
                &grads[i].weight,
                lr,
                bc1,
                bc2,
                BETA1,
                BETA2,
                EPS,
            );
            for j in 0..layer.bias.len() {
                let g = grads[i].bias[j];
                self.m_b[i][j] = BETA1 * self.m_b[i][j] + (1.0 - BETA1) * g;
                self.v_b[i][j] = BETA2 * self.v_b[i][j] + (1.0 - BETA2) * g * g;
                let mhat = self.m_b[i][j] / bc1;
                let vhat = self.v_b[i][j] / bc2;
                layer.bias[j] -= lr * mhat / (vhat.sqrt() + EPS);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn azip_adam(
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    w: &mut Array2<f64>,
    g: &Array2<f64>,
    lr: f64,
    bc1: f64,
    bc2: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    ndarray::Zip::from(m).and(v).and(w).and(g).for_each(|m, v, w, &g| {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *w -= lr * mhat / (vhat.sqrt() + eps);
    });
}

/// Trains the policy by minimizing cross-entropy between the softmax of the
/// network output and the discretized expert target of each sample.
///
/// Deterministic for a fixed config: initialization, shuffling, and the
/// per-batch gradient sum all follow the seed.
pub fn train_policy(dataset: &SearchDataset, config: &TrainConfig) -> Result<TrainReport, SearchError> {
    if dataset.samples.is_empty() {
        return Err(SearchError::EmptyDataset);
    }
    let first_grid = dataset.samples[0].map.grid();
    let meta = PolicyMeta {
        pool_factor: 1,
        map_depth: first_grid.dims[1],
        num_classes: first_grid.num_classes,
    };
    for s in &dataset.samples {
        let g = s.map.grid();
        if g.dims[1] != meta.map_depth || g.num_classes != meta.num_classes {
            return Err(SearchError::DimensionMismatch {
                want_depth: meta.map_depth,
                want_classes: meta.num_classes,
                got_depth: g.dims[1],
                got_classes: g.num_classes,
            });
        }
    }

    let pairs: Vec<(Array3<f64>, Array2<f64>)> = dataset
        .samples
        .par_iter()
        .map(|s| {
            (
                map_input_tensor(&s.map),
                discretize_expert(&s.expert, s.map.grid()),
            )
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = PolicyParams::init(meta, &mut rng);
    let mut adam = AdamState::new(&params);

    let initial_loss = {
        let total: f64 = pairs
            .par_iter()
            .map(|(input, target)| {
                let (logits, _) = forward_traced(&params, input);
                cross_entropy_and_grad(&logits, target).0
            })
            .sum();
        total / pairs.len() as f64
    };

    let n = pairs.len();
    let batch = config.batch_size.max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        // Fisher-Yates shuffle from the run rng.
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(batch) {
            let results: Vec<(f64, Vec<LayerGrad>)> = chunk
                .par_iter()
                .map(|&idx| loss_and_grad(&params, &pairs[idx].0, &pairs[idx].1))
                .collect();
            // Average gradients in fixed chunk order.
            let scale = 1.0 / results.len() as f64;
            let mut sum: Vec<LayerGrad> = results[0].1.clone();
            for (_, grads) in results.iter().skip(1) {
                for (acc, g) in sum.iter_mut().zip(grads) {
                    acc.weight += &g.weight;
                    acc.bias += &g.bias;
                }
            }
            for g in sum.iter_mut() {
                g.weight.mapv_inplace(|v| v * scale);
                g.bias.mapv_inplace(|v| v * scale);
            }
            adam.step(&mut params, &sum, config.learning_rate);
            epoch_loss += results.iter().map(|(l, _)| l).sum::<f64>();
            seen += results.len();
        }
        epoch_losses.push(epoch_loss / seen as f64);
    }

    Ok(TrainReport {
        final_loss: *epoch_losses.last().unwrap_or(&initial_loss),
        initial_loss,
        params,
        epoch_losses,
    })
}

/// Loads a dataset directory written by `collect-maps`: `map_NNNNN.smap`
/// paired with `expert_NNNNN.json`.
pub fn load_dataset(dir: &Path) -> Result<SearchDataset, SearchError> {
    let mut samples = Vec::new();
    let mut index = 0usize;
    loop {
        let map_path = dir.join(format!("map_{index:05}.smap"));
        let expert_path = dir.join(format!("expert_{index:05}.json"));
        if !map_path.exists() {
            break;
        }
        let map = SemanticMap::load(&map_path).map_err(|e| SearchError::Format {
            offset: 0,
            reason: format!("{}: {e}", map_path.display()),
        })?;
        let text = std::fs::read_to_string(&expert_path)?;
        let expert: ExpertDistribution =
            serde_json::from_str(&text).map_err(|e| SearchError::Format {
                offset: 0,
                reason: format!("{}: {e}", expert_path.display()),
            })?;
        samples.push(SearchSample { map, expert });
        index += 1;
    }
    if samples.is_empty() {
        return Err(SearchError::EmptyDataset);
    }
    Ok(SearchDataset { samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{EvidenceEntry, GridSpec, Vec3, VoxelEvidence};
    use crate::semantic_map::Phase;

    fn random_map(seed: u64, dims: [usize; 3], classes: usize) -> SemanticMap {
        let grid = GridSpec::new(dims, 0.5, Vec3::zeros(), classes);
        let mut map = SemanticMap::new(grid.clone(), 0.5, Phase::Walkthrough);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries: Vec<EvidenceEntry> = Vec::new();
        for flat in 0..grid.num_voxels() {
            if rng.random::<f64>() < 0.3 {
                entries.push(EvidenceEntry {
                    flat,
                    probs: vec![(rng.random_range(0..classes as u16), rng.random::<f32>())],
                    rgb: [0.0; 3],
                    openness: 0.0,
                });
            }
        }
        map.update(&VoxelEvidence {
            dims,
            num_classes: classes,
            entries,
            dropped: 0,
        })
        .unwrap();
        map
    }

    fn dataset(seeds: std::ops::Range<u64>) -> SearchDataset {
        let samples = seeds
            .map(|s| {
                let map = random_map(s, [10, 2, 10], 3);
                let mut rng = ChaCha8Rng::seed_from_u64(s + 1000);
                let modes = (0..2)
                    .map(|_| {
                        Vec3::new(
                            rng.random_range(0.5..4.5),
                            0.2,
                            rng.random_range(0.5..4.5),
                        )
                    })
                    .collect();
                SearchSample {
                    map,
                    expert: ExpertDistribution::new(modes, 0.75),
                }
            })
            .collect();
        SearchDataset { samples }
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let ds = SearchDataset { samples: vec![] };
        assert!(matches!(
            train_policy(&ds, &TrainConfig::default()),
            Err(SearchError::EmptyDataset)
        ));
    }

    #[test]
    fn first_epoch_does_not_increase_loss() {
        let ds = dataset(0..8);
        let config = TrainConfig {
            epochs: 2,
            seed: 5,
            ..TrainConfig::default()
        };
        let report = train_policy(&ds, &config).unwrap();
        assert!(
            report.epoch_losses[0] <= report.initial_loss + 1e-9,
            "epoch1 {} vs init {}",
            report.epoch_losses[0],
            report.initial_loss
        );
        assert!(report.final_loss <= report.initial_loss);
    }

    #[test]
    fn training_is_deterministic_for_a_seed() {
        let ds = dataset(0..6);
        let config = TrainConfig {
            epochs: 2,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = train_policy(&ds, &config).unwrap();
        let b = train_policy(&ds, &config).unwrap();
        assert_eq!(a.final_loss.to_bits(), b.final_loss.to_bits());
        for (la, lb) in a.params.layers.iter().zip(&b.params.layers) {
            for (&x, &y) in la.weight.iter().zip(lb.weight.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn single_sample_overfit_approaches_target_entropy() {
        let ds = dataset(42..43);
        let target = discretize_expert(&ds.samples[0].expert, ds.samples[0].map.grid());
        let entropy: f64 = -target
            .iter()
            .filter(|&&t| t > 0.0)
            .map(|&t| t * t.ln())
            .sum::<f64>();
        let config = TrainConfig {
            learning_rate: 0.01,
            batch_size: 1,
            epochs: 200,
            seed: 3,
        };
        let report = train_policy(&ds, &config).unwrap();
        assert!(
            report.final_loss - entropy <= 0.05,
            "final {} vs entropy {}",
            report.final_loss,
            entropy
        );
    }
}
