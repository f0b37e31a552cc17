//! Sliding-window samples and per-client datasets.
//!
//! A window of `T` consecutive samples over all `N` generators and `P`
//! parameters forms one `T × N × P` observation. Windows advance one sample
//! at a time, so a trajectory of `S` samples yields `S − T + 1` windows.
//! Features are stored raw (as `f32`); z-score statistics live alongside and
//! are applied when samples are fed to a model.

mod format;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{label_window, EventTiming, StabilityLabel, CLASS_COUNT};
use crate::sim::{Trajectory, PARAM_COUNT};

pub use format::{load, save, DATASET_MAGIC, DATASET_VERSION};

pub const WINDOW_LEN: usize = 5;
pub const DEFAULT_SPLIT: [f64; 3] = [0.70, 0.15, 0.15];

/// Dimensions of one observation: time × generator × parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleShape {
    pub time: usize,
    pub generators: usize,
    pub params: usize,
}

impl SampleShape {
    pub const IEEE39: SampleShape = SampleShape { time: WINDOW_LEN, generators: 10, params: PARAM_COUNT };

    pub fn len(&self) -> usize {
        self.time * self.generators * self.params
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSample {
    pub scenario_id: u32,
    pub window_start: u32,
    pub label: StabilityLabel,
    /// Raw features, row-major `[time][generator][parameter]`.
    pub features: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train = 0,
    Validation = 1,
    Test = 2,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn from_u8(v: u8) -> Result<Split> {
        match v {
            0 => Ok(Split::Train),
            1 => Ok(Split::Validation),
            2 => Ok(Split::Test),
            _ => Err(Error::parse(format!("unknown split tag {v}"))),
        }
    }
}

/// Per-parameter z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(params: usize) -> Self {
        NormStats { mean: vec![0.0; params], std: vec![1.0; params] }
    }
}

/// Labels every window of a trajectory. Window `k` covers samples `k..k+len`.
pub fn windowize(traj: &Trajectory, scenario_id: u32) -> Result<Vec<WindowSample>> {
    windowize_with(traj, scenario_id, WINDOW_LEN)
}

pub fn windowize_with(traj: &Trajectory, scenario_id: u32, len: usize) -> Result<Vec<WindowSample>> {
    if len == 0 || traj.steps < len {
        return Err(Error::invalid(format!(
            "trajectory of {} steps is shorter than the {len}-step window",
            traj.steps
        )));
    }
    let timing = EventTiming {
        steps: traj.steps,
        fault_on: traj.fault_on_index,
        fault_clear: traj.fault_clear_index,
        instability: traj.instability_index,
    };
    let row = traj.generators * PARAM_COUNT;
    (0..=traj.steps - len)
        .map(|k| {
            Ok(WindowSample {
                scenario_id,
                window_start: k as u32,
                label: label_window(k, len, &timing)?,
                features: traj.series[k * row..(k + len) * row].iter().map(|&v| v as f32).collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: u16,
    pub shape: SampleShape,
    pub samples: Vec<WindowSample>,
    /// Split of every assigned scenario.
    pub splits: BTreeMap<u32, Split>,
    pub stats: NormStats,
}

impl ClientDataset {
    pub fn new(client_id: u16, shape: SampleShape, samples: Vec<WindowSample>) -> Result<Self> {
        if let Some(bad) = samples.iter().find(|s| s.features.len() != shape.len()) {
            return Err(Error::Shape(format!(
                "sample of scenario {} has {} features, expected {}",
                bad.scenario_id,
                bad.features.len(),
                shape.len()
            )));
        }
        Ok(ClientDataset {
            client_id,
            shape,
            samples,
            splits: BTreeMap::new(),
            stats: NormStats::identity(shape.params),
        })
    }

    pub fn scenario_ids(&self) -> Vec<u32> {
        self.samples
            .iter()
            .map(|s| s.scenario_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn split_of(&self, sample: &WindowSample) -> Option<Split> {
        self.splits.get(&sample.scenario_id).copied()
    }

    /// Indices of all samples in `split`, in storage order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| self.split_of(s) == Some(split))
            .map(|(i, _)| i)
            .collect()
    }

    /// Per-class sample counts of a split (or of every sample).
    pub fn census(&self, split: Option<Split>) -> [usize; CLASS_COUNT] {
        let mut counts = [0; CLASS_COUNT];
        for s in &self.samples {
            if split.is_none() || self.split_of(s) == split {
                counts[s.label.index()] += 1;
            }
        }
        counts
    }

    /// Inverse-frequency class weights `n / (C · n_c)` over the training split.
    /// Classes absent from training get weight 0.
    pub fn class_weights(&self) -> [f64; CLASS_COUNT] {
        let counts = self.census(Some(Split::Train));
        let total: usize = counts.iter().sum();
        let mut w = [0.0; CLASS_COUNT];
        for (c, &n) in counts.iter().enumerate() {
            if n > 0 {
                w[c] = total as f64 / (CLASS_COUNT as f64 * n as f64);
            }
        }
        w
    }

    /// Writes the normalized features of sample `i` into `out`.
    pub fn normalized_into(&self, i: usize, out: &mut [f64]) {
        let p = self.shape.params;
        let feats = &self.samples[i].features;
        for (j, (o, &x)) in out.iter_mut().zip(feats).enumerate() {
            let c = j % p;
            *o = (x as f64 - self.stats.mean[c]) / self.stats.std[c];
        }
    }

    pub fn normalized(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.shape.len()];
        self.normalized_into(i, &mut out);
        out
    }

    /// Assigns scenarios to train/validation/test with a seeded shuffle.
    ///
    /// Validation and test receive `floor(n · f)` scenarios (at least one when
    /// their fraction is positive); training takes the remainder.
    pub fn split(mut self, fractions: [f64; 3], seed: u64) -> Result<Self> {
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
        }
        let mut ids = self.scenario_ids();
        let n = ids.len();
        let wanted = fractions.iter().filter(|&&f| f > 0.0).count();
        if n < wanted {
            return Err(Error::invalid(format!("{n} scenarios cannot fill {wanted} splits")));
        }
        let take = |f: f64| if f > 0.0 { ((n as f64 * f).floor() as usize).max(1) } else { 0 };
        let n_val = take(fractions[1]);
        let n_test = take(fractions[2]);
        if n_val + n_test > n || (fractions[0] > 0.0 && n_val + n_test == n) {
            return Err(Error::invalid(format!("{n} scenarios cannot fill {wanted} splits")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ids.shuffle(&mut rng);
        let n_train = n - n_val - n_test;
        self.splits = ids
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                let split = if i < n_train {
                    Split::Train
                } else if i < n_train + n_val {
                    Split::Validation
                } else {
                    Split::Test
                };
                (id, split)
            })
            .collect();
        Ok(self)
    }

    /// Computes z-score statistics per parameter from the training split.
    /// Channels with zero spread are only centred.
    pub fn normalize(mut self) -> Result<Self> {
        let train = self.indices(Split::Train);
        if train.is_empty() {
            return Err(Error::invalid("cannot normalize: training split is empty"));
        }
        let p = self.shape.params;
        let mut sum = vec![0.0; p];
        let mut count = 0usize;
        for &i in &train {
            for (j, &x) in self.samples[i].features.iter().enumerate() {
                sum[j % p] += x as f64;
            }
            count += self.shape.len() / p;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; p];
        for &i in &train {
            for (j, &x) in self.samples[i].features.iter().enumerate() {
                let d = x as f64 - mean[j % p];
                sq[j % p] += d * d;
            }
        }
        let std = sq
            .iter()
            .map(|s| {
                let sd = (s / count as f64).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        self.stats = NormStats { mean, std };
        Ok(self)
    }

    /// Union of several client datasets, e.g. for centralized training.
    /// Scenario ids are offset so they stay unique; with one input the
    /// dataset is returned unchanged apart from recomputed statistics.
    pub fn merge(datasets: &[ClientDataset]) -> Result<ClientDataset> {
        let first = datasets.first().ok_or_else(|| Error::invalid("nothing to merge"))?;
        let client_id = if datasets.len() == 1 { first.client_id } else { 0 };
        let mut merged = ClientDataset::new(client_id, first.shape, Vec::new())?;
        let mut offset = 0u32;
        for ds in datasets {
            if ds.shape != first.shape {
                return Err(Error::Shape("cannot merge datasets of different sample shapes".into()));
            }
            merged.samples.extend(ds.samples.iter().map(|s| WindowSample {
                scenario_id: s.scenario_id + offset,
                ..s.clone()
            }));
            merged.splits.extend(ds.splits.iter().map(|(&id, &sp)| (id + offset, sp)));
            offset += ds.scenario_ids().last().map_or(0, |m| m + 1);
        }
        merged.normalize()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_trajectory(steps: usize, instability: Option<usize>) -> Trajectory {
        let g = 10;
        let series = (0..steps * g * PARAM_COUNT).map(|i| i as f64 * 0.5).collect();
        Trajectory {
            steps,
            generators: g,
            series,
            fault_on_index: 60,
            fault_clear_index: 76,
            instability_index: instability,
            max_separation_deg: 0.0,
        }
    }

    fn toy_dataset(scenarios: u32) -> ClientDataset {
        let shape = SampleShape { time: 2, generators: 1, params: 2 };
        let samples = (0..scenarios)
            .flat_map(|s| {
                (0..3).map(move |k| WindowSample {
                    scenario_id: s,
                    window_start: k,
                    label: StabilityLabel::Stable,
                    features: vec![s as f32, 7.0, k as f32 + s as f32, 7.0],
                })
            })
            .collect();
        ClientDataset::new(1, shape, samples).unwrap()
    }

    #[test]
    fn window_count_and_slicing() {
        let traj = fake_trajectory(1200, None);
        let w = windowize(&traj, 0).unwrap();
        assert_eq!(w.len(), 1200 - 5 + 1);
        let expected: Vec<f32> = traj.series[..5 * 50].iter().map(|&v| v as f32).collect();
        assert_eq!(w[0].features, expected);
        // Consecutive windows share four rows.
        assert_eq!(w[0].features[50..], w[1].features[..200]);
    }

    #[test]
    fn short_trajectory_rejected() {
        assert!(windowize(&fake_trajectory(4, None), 0).is_err());
    }

    #[test]
    fn stable_census() {
        let w = windowize(&fake_trajectory(1200, None), 0).unwrap();
        let mut counts = [0; 5];
        for s in &w {
            counts[s.label.index()] += 1;
        }
        assert_eq!(counts, [1196 - 21, 5, 11, 5, 0]);
    }

    #[test]
    fn split_counts_and_determinism() {
        let ds = toy_dataset(20);
        let a = ds.clone().split(DEFAULT_SPLIT, 7).unwrap();
        let b = ds.clone().split(DEFAULT_SPLIT, 7).unwrap();
        let c = ds.split(DEFAULT_SPLIT, 8).unwrap();
        assert_eq!(a.splits, b.splits);
        for d in [&a, &c] {
            let count = |sp| d.splits.values().filter(|&&s| s == sp).count();
            assert_eq!((count(Split::Train), count(Split::Validation), count(Split::Test)), (14, 3, 3));
        }
    }

    #[test]
    fn split_rejects_too_few_scenarios() {
        assert!(toy_dataset(2).split(DEFAULT_SPLIT, 0).is_err());
        assert!(toy_dataset(3).split(DEFAULT_SPLIT, 0).is_ok());
        assert!(toy_dataset(5).split([0.5, 0.2, 0.2], 0).is_err());
    }

    #[test]
    fn normalization_uses_training_split_only() {
        let ds = toy_dataset(20).split(DEFAULT_SPLIT, 3).unwrap().normalize().unwrap();
        let train = ds.indices(Split::Train);
        let p = ds.shape.params;
        for c in 0..p {
            let vals: Vec<f64> = train
                .iter()
                .flat_map(|&i| ds.normalized(i).into_iter().skip(c).step_by(p))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-9, "channel {c} mean {mean}");
            if c == 1 {
                // Constant channel: centred to zero, std guard keeps it finite.
                assert!(vals.iter().all(|&v| v == 0.0));
                assert_eq!(ds.stats.std[1], 1.0);
            } else {
                let var = vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64;
                assert!((var.sqrt() - 1.0).abs() < 1e-6);
            }
        }
        let val = ds.indices(Split::Validation);
        let vmean: f64 = val.iter().map(|&i| ds.normalized(i)[0]).sum::<f64>() / val.len() as f64;
        assert!(vmean.abs() > 1e-6);
    }

    #[test]
    fn normalize_requires_training_split() {
        assert!(toy_dataset(4).normalize().is_err());
    }

    #[test]
    fn merge_single_is_identity() {
        let ds = toy_dataset(6).split(DEFAULT_SPLIT, 1).unwrap().normalize().unwrap();
        assert_eq!(ClientDataset::merge(std::slice::from_ref(&ds)).unwrap(), ds);
    }

    #[test]
    fn merge_keeps_scenarios_distinct() {
        let a = toy_dataset(6).split(DEFAULT_SPLIT, 1).unwrap();
        let b = toy_dataset(4).split(DEFAULT_SPLIT, 2).unwrap();
        let m = ClientDataset::merge(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(m.scenario_ids().len(), 10);
        assert_eq!(
            m.indices(Split::Train).len(),
            a.indices(Split::Train).len() + b.indices(Split::Train).len()
        );
    }

    #[test]
    fn class_weights_inverse_frequency() {
        let mut ds = toy_dataset(4).split([0.5, 0.25, 0.25], 0).unwrap();
        let train = ds.indices(Split::Train);
        ds.samples[train[0]].label = StabilityLabel::Unstable;
        let w = ds.class_weights();
        let n = train.len() as f64;
        assert!((w[0] - n / (5.0 * (n - 1.0))).abs() < 1e-12);
        assert!((w[4] - n / 5.0).abs() < 1e-12);
        assert_eq!(w[1], 0.0);
    }
}
