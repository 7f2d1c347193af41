//! Synthetic data and how it is split among miners.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Dataset, Record};
use crate::rng::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    /// Isotropic Gaussian clusters around random class centres.
    #[default]
    GaussianBlobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub generator: Generator,
    pub dim: usize,
    pub classes: usize,
    pub records: usize,
    pub sigma: f64,
    /// Standard deviation of each centre coordinate.
    pub center_scale: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            generator: Generator::GaussianBlobs,
            dim: 8,
            classes: 4,
            records: 2000,
            sigma: 1.0,
            center_scale: 1.0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.classes < 2 || self.records == 0 {
            return Err(Error::Config(
                "dataset needs dim >= 1, classes >= 2 and at least one record".into(),
            ));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::Config(format!("sigma must be non-negative, got {}", self.sigma)));
        }
        if !(self.center_scale.is_finite() && self.center_scale > 0.0) {
            return Err(Error::Config("center_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Labels cycle through the classes before shuffling, so class counts differ
/// by at most one.
pub fn synthetic_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng_from(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            (0..spec.dim)
                .map(|_| unit.sample(&mut rng) * spec.center_scale)
                .collect()
        })
        .collect();
    let mut records: Vec<Record> = (0..spec.records)
        .map(|i| {
            let label = i % spec.classes;
            let features = centers[label]
                .iter()
                .map(|c| c + spec.sigma * unit.sample(&mut rng))
                .collect();
            Record { features, label }
        })
        .collect();
    records.shuffle(&mut rng);
    Dataset::new(spec.dim, spec.classes, records)
}

/// Returns `(remaining, validation)` with `round(len * fraction)` records
/// held out for validation.
pub fn split_validation(data: Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "validation_fraction must be in (0, 1), got {fraction}"
        )));
    }
    let (dim, classes) = (data.dim(), data.classes());
    let mut records = data.into_records();
    let n = records.len();
    let held = ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    if held >= n {
        return Err(Error::Config("dataset too small for a validation split".into()));
    }
    records.shuffle(&mut rng_from(seed));
    let validation = records.split_off(n - held);
    Ok((
        Dataset::new(dim, classes, records)?,
        Dataset::new(dim, classes, validation)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Partition {
    Even,
    /// Miners at index `split` and above get `ratio` times the share of the
    /// ones below.
    Skewed { ratio: u64, split: usize },
    Custom { sizes: Vec<usize> },
}

impl Default for Partition {
    fn default() -> Self {
        Partition::Skewed { ratio: 4, split: 5 }
    }
}

/// Per-miner record counts. Proportional shares use the largest-remainder
/// method, ties to the lower index.
pub fn partition_sizes(partition: &Partition, total: usize, miners: usize) -> Result<Vec<usize>> {
    if miners == 0 {
        return Err(Error::Config("partition needs at least one miner".into()));
    }
    let weights: Vec<u64> = match partition {
        Partition::Even => vec![1; miners],
        Partition::Skewed { ratio, split } => {
            if *ratio == 0 || *split > miners {
                return Err(Error::Config(format!(
                    "skewed partition needs ratio >= 1 and split <= {miners}"
                )));
            }
            (0..miners).map(|i| if i < *split { 1 } else { *ratio }).collect()
        }
        Partition::Custom { sizes } => {
            if sizes.len() != miners {
                return Err(Error::Config(format!(
                    "custom partition lists {} sizes for {miners} miners",
                    sizes.len()
                )));
            }
            let sum: usize = sizes.iter().sum();
            if sum != total {
                return Err(Error::Config(format!(
                    "custom partition sizes sum to {sum}, dataset has {total}"
                )));
            }
            if sizes.contains(&0) {
                return Err(Error::Config("custom partition has an empty miner".into()));
            }
            return Ok(sizes.clone());
        }
    };
    if total < miners {
        return Err(Error::Config(format!("{miners} miners but only {total} records")));
    }
    let w_sum: u128 = weights.iter().map(|&w| w as u128).sum();
    let mut sizes: Vec<usize> = Vec::with_capacity(miners);
    let mut rems: Vec<(u128, usize)> = Vec::with_capacity(miners);
    for (i, &w) in weights.iter().enumerate() {
        let share = total as u128 * w as u128;
        sizes.push((share / w_sum) as usize);
        rems.push((share % w_sum, i));
    }
    let short = total - sizes.iter().sum::<usize>();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rems.iter().take(short) {
        sizes[i] += 1;
    }
    if sizes.contains(&0) {
        return Err(Error::Config(format!(
            "{total} records cannot give every one of {miners} miners a share"
        )));
    }
    Ok(sizes)
}

/// Seeded shuffle, class-interleaved ordering, then contiguous slices.
/// Interleaving spreads every class across every slice when counts allow.
pub fn partition_data(
    data: &Dataset,
    partition: &Partition,
    miners: usize,
    seed: u64,
) -> Result<Vec<Dataset>> {
    let sizes = partition_sizes(partition, data.len(), miners)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = rng_from(seed);
    order.shuffle(&mut rng);
    let records = data.records();
    let mut buckets: Vec<std::collections::VecDeque<usize>> =
        vec![Default::default(); data.classes()];
    for i in order {
        buckets[records[i].label].push_back(i);
    }
    // start the round-robin at a random class so class 0 is not favoured
    let offset = rng.random_range(0..data.classes());
    let mut interleaved = Vec::with_capacity(data.len());
    while interleaved.len() < data.len() {
        for c in 0..data.classes() {
            if let Some(i) = buckets[(c + offset) % data.classes()].pop_front() {
                interleaved.push(i);
            }
        }
    }
    let mut out = Vec::with_capacity(miners);
    let mut cursor = 0;
    for size in sizes {
        let slice = interleaved[cursor..cursor + size]
            .iter()
            .map(|&i| records[i].clone())
            .collect();
        out.push(Dataset::new(data.dim(), data.classes(), slice)?);
        cursor += size;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tagged(n: usize, classes: usize) -> Dataset {
        let records = (0..n)
            .map(|i| Record {
                features: vec![i as f64],
                label: i % classes,
            })
            .collect();
        Dataset::new(1, classes, records).unwrap()
    }

    #[test]
    fn skew_sizes() {
        let sizes = partition_sizes(&Partition::Skewed { ratio: 4, split: 5 }, 1000, 10).unwrap();
        assert_eq!(sizes, [vec![40; 5], vec![160; 5]].concat());
        let sizes = partition_sizes(&Partition::Skewed { ratio: 4, split: 5 }, 1600, 10).unwrap();
        assert_eq!(sizes, [vec![64; 5], vec![256; 5]].concat());
    }

    #[test]
    fn even_sizes() {
        assert_eq!(partition_sizes(&Partition::Even, 100, 10).unwrap(), vec![10; 10]);
        assert_eq!(partition_sizes(&Partition::Even, 7, 3).unwrap(), vec![3, 2, 2]);
    }

    #[test]
    fn too_many_miners() {
        assert!(partition_sizes(&Partition::Even, 3, 4).is_err());
        assert!(partition_data(&tagged(3, 2), &Partition::Even, 4, 0).is_err());
    }

    #[test]
    fn custom_must_sum() {
        let p = Partition::Custom { sizes: vec![3, 3] };
        assert!(partition_sizes(&p, 7, 2).is_err());
        assert_eq!(partition_sizes(&p, 6, 2).unwrap(), vec![3, 3]);
    }

    #[test]
    fn every_miner_sees_every_class() {
        let parts = partition_data(&tagged(1000, 4), &Partition::Skewed { ratio: 4, split: 5 }, 10, 3).unwrap();
        for p in parts {
            let mut seen = [false; 4];
            for r in p.records() {
                seen[r.label] = true;
            }
            assert!(seen.iter().all(|&s| s));
        }
    }

    #[test]
    fn generator_contract() {
        let spec = DatasetSpec {
            records: 2000,
            sigma: 0.5,
            ..DatasetSpec::default()
        };
        let a = synthetic_dataset(&spec, 9).unwrap();
        assert_eq!(a, synthetic_dataset(&spec, 9).unwrap());
        let mut counts = vec![0usize; spec.classes];
        for r in a.records() {
            counts[r.label] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{counts:?}");
    }

    #[test]
    fn zero_sigma_collapses_to_centres() {
        let spec = DatasetSpec {
            records: 40,
            sigma: 0.0,
            ..DatasetSpec::default()
        };
        let d = synthetic_dataset(&spec, 1).unwrap();
        let mut centres: Vec<Option<&Vec<f64>>> = vec![None; spec.classes];
        for r in d.records() {
            match centres[r.label] {
                Some(c) => assert_eq!(c, &r.features),
                None => centres[r.label] = Some(&r.features),
            }
        }
    }

    #[test]
    fn validation_split_sizes() {
        let (train, val) = split_validation(tagged(2000, 4), 0.2, 5).unwrap();
        assert_eq!((train.len(), val.len()), (1600, 400));
    }

    proptest! {
        #[test]
        fn partition_is_a_permutation(n in 50usize..300, miners in 1usize..10, ratio in 1u64..6, seed: u64) {
            let split = miners / 2;
            let data = tagged(n, 3);
            let parts = partition_data(&data, &Partition::Skewed { ratio, split }, miners, seed).unwrap();
            let mut ids: Vec<usize> = parts
                .iter()
                .flat_map(|p| p.records().iter().map(|r| r.features[0] as usize))
                .collect();
            prop_assert_eq!(ids.len(), n);
            ids.sort();
            prop_assert_eq!(ids, (0..n).collect::<Vec<_>>());
        }
    }
}
