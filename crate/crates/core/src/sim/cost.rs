//! Simulated durations for mining, predicting and voting.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ArchSpec;
use crate::Tick;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostParams {
    pub unit_time: f64,
    pub noise_fraction: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            unit_time: 1.0,
            noise_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    unit_time: f64,
    h_max: usize,
    noise_fraction: f64,
}

impl CostModel {
    pub fn new(unit_time: f64, h_max: usize, noise_fraction: f64) -> Result<Self> {
        if !(unit_time.is_finite() && unit_time > 0.0) {
            return Err(Error::Config(format!("unit_time must be positive, got {unit_time}")));
        }
        if h_max == 0 {
            return Err(Error::Config("h_max must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&noise_fraction) {
            return Err(Error::Config(format!(
                "noise_fraction must be in [0, 1), got {noise_fraction}"
            )));
        }
        Ok(Self {
            unit_time,
            h_max,
            noise_fraction,
        })
    }

    /// `h_max` is the widest layer of `arch`, input and output included.
    pub fn for_arch(params: &CostParams, arch: &ArchSpec) -> Result<Self> {
        Self::new(params.unit_time, arch.max_width(), params.noise_fraction)
    }

    pub fn h_max(&self) -> usize {
        self.h_max
    }

    pub fn noise_fraction(&self) -> f64 {
        self.noise_fraction
    }

    pub fn forward_work(&self, n_test: usize, dim: usize) -> f64 {
        self.unit_time * (n_test * dim * self.h_max) as f64
    }

    pub fn knn_work(&self, n_train: usize, n_test: usize, dim: usize) -> f64 {
        let log_term = (n_test.max(2) as f64).log2().ceil() as usize;
        self.unit_time * (n_test * n_train * dim + n_test * log_term) as f64
    }

    pub fn train_work(&self, n_train: usize, dim: usize, epochs: usize) -> f64 {
        self.unit_time * (3 * epochs * n_train * dim * self.h_max) as f64
    }

    /// Scoring every predictor's rows against the voter's labels.
    pub fn vote_work(&self, predictors: usize, records: usize, classes: usize) -> f64 {
        self.unit_time * (predictors * records * classes) as f64
    }

    /// Applies the miner's speed factor and bounded uniform noise, rounding
    /// to whole ticks (never below one).
    pub fn realize(&self, work: f64, compute_factor: f64, rng: &mut impl Rng) -> Tick {
        let noise = if self.noise_fraction > 0.0 {
            rng.random_range(-self.noise_fraction..=self.noise_fraction)
        } else {
            0.0
        };
        (work * compute_factor * (1.0 + noise)).round().max(1.0) as Tick
    }

    pub fn forward_cost(&self, n_test: usize, dim: usize, factor: f64, rng: &mut impl Rng) -> Tick {
        self.realize(self.forward_work(n_test, dim), factor, rng)
    }

    pub fn knn_cost(
        &self,
        n_train: usize,
        n_test: usize,
        dim: usize,
        factor: f64,
        rng: &mut impl Rng,
    ) -> Tick {
        self.realize(self.knn_work(n_train, n_test, dim), factor, rng)
    }

    pub fn train_cost(
        &self,
        n_train: usize,
        dim: usize,
        epochs: usize,
        factor: f64,
        rng: &mut impl Rng,
    ) -> Tick {
        self.realize(self.train_work(n_train, dim, epochs), factor, rng)
    }

    pub fn vote_cost(
        &self,
        predictors: usize,
        records: usize,
        classes: usize,
        factor: f64,
        rng: &mut impl Rng,
    ) -> Tick {
        self.realize(self.vote_work(predictors, records, classes), factor, rng)
    }
}
