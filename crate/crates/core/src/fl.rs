//! Federated aggregation, contribution-weighted rewards and model digests.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{ArchSpec, LayerParams, ModelParams};
use crate::MinerId;

/// Combines winner models into the next global model.
pub trait Aggregator {
    fn aggregate(&self, models: &[ModelParams]) -> Result<ModelParams>;
}

/// Unweighted elementwise mean.
#[derive(Debug, Default, Clone, Copy)]
pub struct FedAvg;

impl Aggregator for FedAvg {
    fn aggregate(&self, models: &[ModelParams]) -> Result<ModelParams> {
        fed_avg(models)
    }
}

fn ensure_same_arch(a: &ModelParams, b: &ModelParams) -> Result<()> {
    if a.arch() != b.arch() {
        return Err(Error::Aggregation(format!(
            "architecture mismatch: {:?} vs {:?}",
            a.arch().sizes(),
            b.arch().sizes()
        )));
    }
    Ok(())
}

pub fn fed_avg(models: &[ModelParams]) -> Result<ModelParams> {
    let first = models
        .first()
        .ok_or_else(|| Error::Aggregation("no models to aggregate".into()))?;
    for m in &models[1..] {
        ensure_same_arch(first, m)?;
    }
    let n = models.len() as f64;
    let mut out = ModelParams::zeros(first.arch());
    for (l, layer) in out.layers_mut().iter_mut().enumerate() {
        for (k, v) in layer.values_mut().enumerate() {
            let sum: f64 = models
                .iter()
                .map(|m| {
                    let src = &m.layers()[l];
                    if k < src.weights.len() {
                        src.weights[k]
                    } else {
                        src.biases[k - src.weights.len()]
                    }
                })
                .sum();
            *v = sum / n;
        }
    }
    Ok(out)
}

/// Mean over layers of the mean absolute parameter difference, where each
/// layer's mean runs over its weights and biases together.
pub fn compute_contribution(local: &ModelParams, reference: &ModelParams) -> Result<f64> {
    ensure_same_arch(local, reference)?;
    let layers = local.layers();
    let per_layer_sum: f64 = layers
        .iter()
        .zip(reference.layers())
        .map(|(a, b)| {
            let total: f64 = a.values().zip(b.values()).map(|(x, y)| (x - y).abs()).sum();
            total / a.len() as f64
        })
        .sum();
    Ok(per_layer_sum / layers.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinnerReward {
    pub miner: MinerId,
    pub contribution: f64,
    pub reward: f64,
}

/// Per-winner contributions and payouts for one block, sorted by miner id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardReport {
    pub per_winner: Vec<WinnerReward>,
    pub block_reward: f64,
}

impl RewardReport {
    pub fn get(&self, miner: MinerId) -> Option<&WinnerReward> {
        self.per_winner.iter().find(|w| w.miner == miner)
    }

    pub fn miners(&self) -> impl Iterator<Item = MinerId> + '_ {
        self.per_winner.iter().map(|w| w.miner)
    }

    pub fn total_paid(&self) -> f64 {
        self.per_winner.iter().map(|w| w.reward).sum()
    }
}

/// Splits `block_reward` in proportion to contributions; equal split when all
/// contributions are zero.
pub fn distribute_rewards(
    contributions: &[(MinerId, f64)],
    block_reward: f64,
) -> Result<RewardReport> {
    if contributions.is_empty() {
        return Err(Error::Domain("no winners to reward".into()));
    }
    if !(block_reward.is_finite() && block_reward >= 0.0) {
        return Err(Error::Domain(format!(
            "block reward must be non-negative, got {block_reward}"
        )));
    }
    if let Some((m, c)) = contributions
        .iter()
        .find(|(_, c)| !(c.is_finite() && *c >= 0.0))
    {
        return Err(Error::Domain(format!(
            "contribution of {m} is invalid: {c}"
        )));
    }
    let mut sorted = contributions.to_vec();
    sorted.sort_by_key(|(m, _)| *m);
    if sorted.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Domain("duplicate winner in contributions".into()));
    }

    let total: f64 = sorted.iter().map(|(_, c)| c).sum();
    let n = sorted.len() as f64;
    let per_winner = sorted
        .into_iter()
        .map(|(miner, contribution)| {
            let reward = if total > 0.0 {
                block_reward * contribution / total
            } else {
                block_reward / n
            };
            WinnerReward {
                miner,
                contribution,
                reward,
            }
        })
        .collect();
    Ok(RewardReport {
        per_winner,
        block_reward,
    })
}

/// Lowercase hex SHA-256 of a model's canonical bytes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelDigest(pub String);

impl ModelDigest {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for ModelDigest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Canonical byte layout:
///
/// ```text
/// u64 LE   number of layer sizes S
/// u64 LE   size[0] .. size[S-1]
/// per layer, in order:
///   f64 LE weights, row-major (out_dim rows of in_dim)
///   f64 LE biases (out_dim)
/// ```
pub fn canonical_bytes(model: &ModelParams) -> Vec<u8> {
    let sizes = model.arch().sizes();
    let mut out = Vec::with_capacity(8 * (1 + sizes.len() + model.arch().param_count()));
    out.extend_from_slice(&(sizes.len() as u64).to_le_bytes());
    for &s in sizes {
        out.extend_from_slice(&(s as u64).to_le_bytes());
    }
    for v in model.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn from_canonical_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let mut words = bytes.chunks_exact(8);
    if !words.remainder().is_empty() {
        return Err(Error::Domain("canonical model length is not a multiple of 8".into()));
    }
    let mut next_u64 = |what: &str| -> Result<u64> {
        words
            .next()
            .map(|w| u64::from_le_bytes(w.try_into().expect("8-byte chunk")))
            .ok_or_else(|| Error::Domain(format!("canonical model truncated reading {what}")))
    };
    let count = next_u64("size count")? as usize;
    if count > bytes.len() / 8 {
        return Err(Error::Domain("canonical model size count is implausible".into()));
    }
    let sizes = (0..count)
        .map(|_| next_u64("layer size").map(|s| s as usize))
        .collect::<Result<Vec<_>>>()?;
    let expected_params = sizes.windows(2).try_fold(0usize, |acc, w| {
        w[0].checked_mul(w[1])
            .and_then(|n| n.checked_add(w[1]))
            .and_then(|n| n.checked_add(acc))
    });
    if expected_params.and_then(|p| p.checked_add(1 + count)) != Some(bytes.len() / 8) {
        return Err(Error::Domain(
            "canonical model length does not match its architecture".into(),
        ));
    }
    let arch = ArchSpec::new(sizes)?;
    let mut layers = Vec::with_capacity(arch.num_layers());
    for dims in arch.sizes().windows(2) {
        let mut layer = LayerParams::zeros(dims[0], dims[1]);
        for v in layer.values_mut() {
            *v = f64::from_bits(next_u64("parameter")?);
        }
        layers.push(layer);
    }
    if next_u64("trailer").is_ok() {
        return Err(Error::Domain("trailing bytes after canonical model".into()));
    }
    ModelParams::from_layers(arch, layers)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_model(model: &ModelParams) -> ModelDigest {
    ModelDigest(sha256_hex(&canonical_bytes(model)))
}

pub fn verify_model(model: &ModelParams, claimed: &ModelDigest) -> bool {
    digest_model(model) == *claimed
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_model;
    use proptest::prelude::*;

    fn one_layer(weights: &[f64]) -> ModelParams {
        let arch = ArchSpec::new(vec![weights.len(), 1]).unwrap();
        let layer = LayerParams {
            in_dim: weights.len(),
            out_dim: 1,
            weights: weights.to_vec(),
            biases: vec![0.0],
        };
        ModelParams::from_layers(arch, vec![layer]).unwrap()
    }

    fn arch(sizes: &[usize]) -> ArchSpec {
        ArchSpec::new(sizes.to_vec()).unwrap()
    }

    #[test]
    fn fed_avg_is_arithmetic_mean() {
        let avg = fed_avg(&[one_layer(&[1.0, 3.0]), one_layer(&[3.0, 5.0])]).unwrap();
        assert_eq!(avg.layers()[0].weights, vec![2.0, 4.0]);
    }

    #[test]
    fn fed_avg_single_and_repeated() {
        let m = init_model(&arch(&[3, 5, 2]), 4);
        assert_eq!(fed_avg(&[m.clone()]).unwrap(), m);
        let avg = fed_avg(&vec![m.clone(); 5]).unwrap();
        for (a, b) in avg.values().zip(m.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fed_avg_errors() {
        assert!(matches!(fed_avg(&[]), Err(Error::Aggregation(_))));
        let a = init_model(&arch(&[3, 2]), 1);
        let b = init_model(&arch(&[3, 3]), 1);
        assert!(matches!(fed_avg(&[a, b]), Err(Error::Aggregation(_))));
    }

    #[test]
    fn contribution_worked_example() {
        // layer 1 holds [1, 2], layer 2 holds [3, 3]
        let a = ArchSpec::new(vec![1, 1, 1]).unwrap();
        let local = ModelParams::from_layers(
            a.clone(),
            vec![
                LayerParams {
                    in_dim: 1,
                    out_dim: 1,
                    weights: vec![1.0],
                    biases: vec![2.0],
                },
                LayerParams {
                    in_dim: 1,
                    out_dim: 1,
                    weights: vec![3.0],
                    biases: vec![3.0],
                },
            ],
        )
        .unwrap();
        let zero = ModelParams::zeros(&a);
        // (mean(1,2) + mean(3,3)) / 2 = (1.5 + 3) / 2
        assert!((compute_contribution(&local, &zero).unwrap() - 2.25).abs() < 1e-15);
        assert_eq!(compute_contribution(&local, &local).unwrap(), 0.0);
    }

    #[test]
    fn contribution_arch_mismatch() {
        let a = init_model(&arch(&[3, 2]), 1);
        let b = init_model(&arch(&[2, 3]), 1);
        assert!(matches!(
            compute_contribution(&a, &b),
            Err(Error::Aggregation(_))
        ));
    }

    #[test]
    fn rewards_proportional() {
        let r = distribute_rewards(&[(MinerId(1), 2.25), (MinerId(2), 0.75)], 100.0).unwrap();
        assert!((r.get(MinerId(1)).unwrap().reward - 75.0).abs() < 1e-12);
        assert!((r.get(MinerId(2)).unwrap().reward - 25.0).abs() < 1e-12);
        assert_eq!(r.get(MinerId(1)).unwrap().contribution, 2.25);
    }

    #[test]
    fn rewards_degenerate_and_single() {
        let r = distribute_rewards(
            &[(MinerId(1), 0.0), (MinerId(2), 0.0), (MinerId(3), 0.0)],
            99.0,
        )
        .unwrap();
        assert!(r.per_winner.iter().all(|w| (w.reward - 33.0).abs() < 1e-12));
        let r = distribute_rewards(&[(MinerId(4), 0.3)], 50.0).unwrap();
        assert_eq!(r.per_winner[0].reward, 50.0);
    }

    #[test]
    fn rewards_reject_negative() {
        assert!(matches!(
            distribute_rewards(&[(MinerId(1), -1.0)], 10.0),
            Err(Error::Domain(_))
        ));
        assert!(distribute_rewards(&[], 10.0).is_err());
    }

    #[test]
    fn digest_properties() {
        let m = init_model(&arch(&[4, 3, 2]), 5);
        let d = digest_model(&m);
        assert_eq!(d, digest_model(&m));
        assert_eq!(d.as_str().len(), 64);
        assert!(d.as_str().chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));

        let mut nudged = m.clone();
        nudged.layers_mut()[0].weights[0] += 1e-9;
        assert_ne!(digest_model(&nudged), d);

        // same values (all zero), different shapes
        let a = ModelParams::zeros(&arch(&[2, 3]));
        let b = ModelParams::zeros(&arch(&[3, 2]));
        assert_ne!(digest_model(&a), digest_model(&b));
    }

    #[test]
    fn verify_checks_identity_not_quality() {
        let m = init_model(&arch(&[4, 3, 2]), 5);
        let d = digest_model(&m);
        assert!(verify_model(&m, &d));
        let mut tampered = m.clone();
        tampered.layers_mut()[1].biases[0] = 1.0;
        assert!(!verify_model(&tampered, &d));
        let zero = ModelParams::zeros(m.arch());
        assert!(verify_model(&zero, &digest_model(&zero)));
    }

    #[test]
    fn canonical_layout_header() {
        let m = ModelParams::zeros(&arch(&[2, 1]));
        let bytes = canonical_bytes(&m);
        assert_eq!(bytes.len(), 8 * (1 + 2 + 3));
        assert_eq!(&bytes[0..8], &2u64.to_le_bytes());
        assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &1u64.to_le_bytes());
    }

    #[test]
    fn canonical_decode_rejects_garbage() {
        assert!(from_canonical_bytes(&[1, 2, 3]).is_err());
        let m = ModelParams::zeros(&arch(&[2, 1]));
        let mut bytes = canonical_bytes(&m);
        bytes.extend_from_slice(&0u64.to_le_bytes());
        assert!(from_canonical_bytes(&bytes).is_err());
        bytes.truncate(bytes.len() - 16);
        assert!(from_canonical_bytes(&bytes).is_err());
    }

    fn model_strategy() -> impl Strategy<Value = (ModelParams, ModelParams)> {
        (prop::collection::vec(1usize..5, 2..4), any::<u64>(), any::<u64>()).prop_map(
            |(sizes, s1, s2)| {
                let a = ArchSpec::new(sizes).unwrap();
                (init_model(&a, s1), init_model(&a, s2))
            },
        )
    }

    proptest! {
        #[test]
        fn contribution_symmetric((a, b) in model_strategy()) {
            let ab = compute_contribution(&a, &b).unwrap();
            let ba = compute_contribution(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab >= 0.0);
        }

        #[test]
        fn contribution_translation_invariant((a, b) in model_strategy(), c in -4.0f64..4.0) {
            let base = compute_contribution(&a, &b).unwrap();
            let mut a2 = a.clone();
            let mut b2 = b.clone();
            a2.map_in_place(|v| v + c);
            b2.map_in_place(|v| v + c);
            let shifted = compute_contribution(&a2, &b2).unwrap();
            prop_assert!((base - shifted).abs() < 1e-12);
        }

        #[test]
        fn canonical_round_trip((a, _b) in model_strategy()) {
            let decoded = from_canonical_bytes(&canonical_bytes(&a)).unwrap();
            prop_assert_eq!(digest_model(&decoded), digest_model(&a));
        }

        #[test]
        fn rewards_conserved(contribs in prop::collection::vec(0.0f64..10.0, 1..12), reward in 0.0f64..1e4) {
            let pairs: Vec<_> = contribs.iter().enumerate().map(|(i, &c)| (MinerId(i as u32 + 1), c)).collect();
            let report = distribute_rewards(&pairs, reward).unwrap();
            prop_assert!((report.total_paid() - reward).abs() <= 1e-9 * reward.max(1.0));
        }
    }
}
