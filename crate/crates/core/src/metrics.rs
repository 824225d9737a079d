//! Alignment between topic labels and attribute labels.
//!
//! `purity` sums over attribute classes and maximizes over topics:
//! `Purity(Omega, Lambda) = (1/N) * sum_k max_j |omega_k ∩ lambda_j|`.
//! That orientation is the transpose of conventional cluster purity;
//! [`purity_conventional`] computes the usual form for comparison.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

/// Per-utterance attribute labels and topic labels over the same key set.
#[derive(Debug, Clone)]
pub struct LabelPair {
    pub attrs: BTreeMap<String, String>,
    pub topics: BTreeMap<String, u32>,
}

impl LabelPair {
    pub fn new(attrs: BTreeMap<String, String>, topics: BTreeMap<String, u32>) -> Result<Self> {
        if attrs.is_empty() {
            return Err(Error::Input("label pair is empty".into()));
        }
        if attrs.len() != topics.len() || !attrs.keys().eq(topics.keys()) {
            return Err(Error::Input("attribute and topic key sets differ".into()));
        }
        Ok(LabelPair { attrs, topics })
    }

    fn contingency(&self) -> BTreeMap<&str, BTreeMap<u32, usize>> {
        let mut table: BTreeMap<&str, BTreeMap<u32, usize>> = BTreeMap::new();
        for (utt, attr) in &self.attrs {
            let topic = self.topics[utt];
            *table
                .entry(attr.as_str())
                .or_default()
                .entry(topic)
                .or_default() += 1;
        }
        table
    }
}

/// Purity with the attribute-major orientation described above.
pub fn purity(pairs: &LabelPair) -> f64 {
    let n = pairs.attrs.len() as f64;
    let hits: usize = pairs
        .contingency()
        .values()
        .map(|topics| topics.values().copied().max().unwrap_or(0))
        .sum();
    hits as f64 / n
}

/// Conventional cluster purity: sum over topics, max over attributes.
pub fn purity_conventional(pairs: &LabelPair) -> f64 {
    let n = pairs.attrs.len() as f64;
    let mut by_topic: BTreeMap<u32, BTreeMap<&str, usize>> = BTreeMap::new();
    for (utt, attr) in &pairs.attrs {
        *by_topic
            .entry(pairs.topics[utt])
            .or_default()
            .entry(attr.as_str())
            .or_default() += 1;
    }
    let hits: usize = by_topic
        .values()
        .map(|attrs| attrs.values().copied().max().unwrap_or(0))
        .sum();
    hits as f64 / n
}

/// Purity statistics when topics are assigned uniformly at random: sample
/// mean and (n-1) standard deviation over `trials` draws.
pub fn random_purity(
    class_sizes: &[usize],
    num_topics: usize,
    trials: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be >= 1".into()));
    }
    if num_topics == 0 {
        return Err(Error::InvalidParameter("topic count must be >= 1".into()));
    }
    if class_sizes.is_empty() || class_sizes.iter().sum::<usize>() == 0 {
        return Err(Error::Input("class sizes are empty".into()));
    }
    let n: usize = class_sizes.iter().sum();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(trials);
    for _ in 0..trials {
        // Count topic draws directly per class; equivalent to labeling each
        // utterance and intersecting.
        let mut hits = 0usize;
        for &size in class_sizes {
            let mut counts = vec![0usize; num_topics];
            for _ in 0..size {
                counts[rng.random_range(0..num_topics)] += 1;
            }
            hits += counts.iter().copied().max().unwrap_or(0);
        }
        values.push(hits as f64 / n as f64);
    }
    let mean = values.iter().sum::<f64>() / trials as f64;
    let var = if trials > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (trials - 1) as f64
    } else {
        0.0
    };
    Ok((mean, var.sqrt()))
}

/// Fraction of exactly matching predictions.
pub fn topic_accuracy(predictions: &[u32], labels: &[u32]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Input(format!(
            "prediction length {} does not match label length {}",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Input("empty prediction vectors".into()));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(attrs: &[(&str, &str)], topics: &[(&str, u32)]) -> LabelPair {
        LabelPair::new(
            attrs
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            topics.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn bijective_relabeling_is_perfect() {
        let p = pair(
            &[("u1", "a"), ("u2", "a"), ("u3", "b"), ("u4", "c")],
            &[("u1", 2), ("u2", 2), ("u3", 0), ("u4", 1)],
        );
        assert_eq!(purity(&p), 1.0);
    }

    #[test]
    fn hand_enumerated_half() {
        // Omega = {a,a,b,b}, Lambda = {0,1,0,1}: each attribute class hits
        // each topic once, so (1/4)*(1+1) = 0.5.
        let p = pair(
            &[("u1", "a"), ("u2", "a"), ("u3", "b"), ("u4", "b")],
            &[("u1", 0), ("u2", 1), ("u3", 0), ("u4", 1)],
        );
        assert_eq!(purity(&p), 0.5);
    }

    #[test]
    fn single_attribute_class_follows_largest_topic() {
        // Omega constant, Lambda = {0,0,1} -> max topic share 2/3.
        let p = pair(
            &[("u1", "a"), ("u2", "a"), ("u3", "a")],
            &[("u1", 0), ("u2", 0), ("u3", 1)],
        );
        assert!((purity(&p) - 2.0 / 3.0).abs() < 1e-15);
        // Constant Lambda over one class is exactly 1.
        let p = pair(&[("u1", "a"), ("u2", "a")], &[("u1", 3), ("u2", 3)]);
        assert_eq!(purity(&p), 1.0);
    }

    #[test]
    fn key_mismatch_rejected() {
        let attrs: BTreeMap<String, String> =
            [("u1".to_string(), "a".to_string())].into_iter().collect();
        let topics: BTreeMap<String, u32> = [("u2".to_string(), 0)].into_iter().collect();
        assert!(matches!(
            LabelPair::new(attrs, topics),
            Err(Error::Input(_))
        ));
    }

    /// Brute-force oracle: build both label vectors explicitly and count
    /// intersections set by set.
    fn brute_force_purity(attrs: &[String], topics: &[u32]) -> f64 {
        let classes: std::collections::BTreeSet<&String> = attrs.iter().collect();
        let topic_set: std::collections::BTreeSet<u32> = topics.iter().copied().collect();
        let mut total = 0usize;
        for class in classes {
            let best = topic_set
                .iter()
                .map(|&t| {
                    attrs
                        .iter()
                        .zip(topics)
                        .filter(|(a, &tt)| *a == class && tt == t)
                        .count()
                })
                .max()
                .unwrap_or(0);
            total += best;
        }
        total as f64 / attrs.len() as f64
    }

    #[test]
    fn purity_matches_brute_force_on_random_pairs() {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        for _case in 0..100 {
            let n = rng.random_range(1..=200);
            let n_classes = rng.random_range(1..=5usize);
            let k = rng.random_range(1..=6u32);
            let attrs: Vec<String> = (0..n)
                .map(|_| format!("c{}", rng.random_range(0..n_classes)))
                .collect();
            let topics: Vec<u32> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let p = LabelPair::new(
                attrs
                    .iter()
                    .enumerate()
                    .map(|(i, a)| (format!("u{i:04}"), a.clone()))
                    .collect(),
                topics
                    .iter()
                    .enumerate()
                    .map(|(i, &t)| (format!("u{i:04}"), t))
                    .collect(),
            )
            .unwrap();
            let expected = brute_force_purity(&attrs, &topics);
            assert_eq!(purity(&p), expected);
        }
    }

    #[test]
    fn purity_invariant_to_renaming() {
        let p = pair(
            &[
                ("u1", "a"),
                ("u2", "a"),
                ("u3", "b"),
                ("u4", "b"),
                ("u5", "b"),
            ],
            &[("u1", 0), ("u2", 1), ("u3", 1), ("u4", 1), ("u5", 0)],
        );
        let renamed = pair(
            &[
                ("u1", "x"),
                ("u2", "x"),
                ("u3", "y"),
                ("u4", "y"),
                ("u5", "y"),
            ],
            &[("u1", 7), ("u2", 3), ("u3", 3), ("u4", 3), ("u5", 7)],
        );
        assert_eq!(purity(&p), purity(&renamed));
        assert_eq!(purity_conventional(&p), purity_conventional(&renamed));
    }

    #[test]
    fn random_purity_single_topic_is_one() {
        let (mean, std) = random_purity(&[10, 20], 1, 25, 0).unwrap();
        assert_eq!(mean, 1.0);
        assert_eq!(std, 0.0);
    }

    /// Independent simulation: label every utterance explicitly and call the
    /// purity function, rather than counting per class.
    fn simulate_random_purity(
        class_sizes: &[usize],
        k: usize,
        trials: usize,
        seed: u64,
    ) -> (f64, f64) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let attrs: Vec<String> = class_sizes
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat_n(format!("c{c}"), n))
            .collect();
        let mut values = Vec::new();
        for _ in 0..trials {
            let topics: Vec<u32> = (0..attrs.len())
                .map(|_| rng.random_range(0..k) as u32)
                .collect();
            let p = LabelPair::new(
                attrs
                    .iter()
                    .enumerate()
                    .map(|(i, a)| (format!("u{i:05}"), a.clone()))
                    .collect(),
                topics
                    .iter()
                    .enumerate()
                    .map(|(i, &t)| (format!("u{i:05}"), t))
                    .collect(),
            )
            .unwrap();
            values.push(purity(&p));
        }
        let mean = values.iter().sum::<f64>() / trials as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (trials - 1) as f64;
        (mean, var.sqrt())
    }

    #[test]
    fn random_purity_matches_independent_simulation() {
        let sizes = [400usize, 400];
        let (mean, std) = random_purity(&sizes, 2, 100, 123).unwrap();
        let (sim_mean, sim_std) = simulate_random_purity(&sizes, 2, 100, 456);
        let se = (std * std / 100.0 + sim_std * sim_std / 100.0).sqrt();
        assert!(
            (mean - sim_mean).abs() <= 2.0 * se,
            "{mean} vs {sim_mean} (se {se})"
        );
        assert!((std - sim_std).abs() / sim_std < 0.5);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(topic_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(topic_accuracy(&[1, 2], &[3, 4]).unwrap(), 0.0);
        assert!(topic_accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn accuracy_matches_counting_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let a: Vec<u32> = (0..1000).map(|_| rng.random_range(0..5)).collect();
        let b: Vec<u32> = (0..1000).map(|_| rng.random_range(0..5)).collect();
        let mut count = 0usize;
        for i in 0..1000 {
            if a[i] == b[i] {
                count += 1;
            }
        }
        assert_eq!(topic_accuracy(&a, &b).unwrap(), count as f64 / 1000.0);
    }
}
