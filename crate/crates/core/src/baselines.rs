//! Scorer-free baselines: positional orderings and centroid proximity after
//! k-means over sentence embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{cosine_similarity, l2_normalize};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionalKind {
    Random,
    Ascending,
    Descending,
}

/// Ascending `[0, n)`, descending `(n, 0]`, or seeded uniform draws in `[0, 1)`.
pub fn positional_baseline(n: usize, kind: PositionalKind, seed: u64) -> Vec<f64> {
    match kind {
        PositionalKind::Ascending => (0..n).map(|i| i as f64).collect(),
        PositionalKind::Descending => (0..n).rev().map(|i| i as f64).collect(),
        PositionalKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| rng.random::<f64>()).collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterPolarity {
    /// Sentences near their centroid score high.
    Similarity,
    /// Sentences far from their centroid score high.
    Distance,
}

impl std::str::FromStr for ClusterPolarity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "similarity" => Ok(ClusterPolarity::Similarity),
            "distance" => Ok(ClusterPolarity::Distance),
            other => Err(format!("unknown cluster polarity `{other}` (similarity|distance)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub sentences_per_cluster: usize,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub seed: u64,
    pub polarity: ClusterPolarity,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            sentences_per_cluster: 10,
            max_iterations: 100,
            tolerance: 1e-6,
            seed: 0,
            polarity: ClusterPolarity::Similarity,
        }
    }
}

impl ClusterConfig {
    /// `ceil(n / sentences_per_cluster)`, at least 1 and at most `n`.
    pub fn clusters_for(&self, n: usize) -> usize {
        n.div_ceil(self.sentences_per_cluster.max(1)).clamp(1, n.max(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the assigned centroid after each
    /// assignment step.
    pub objective: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid, lowest index on ties.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding. When every remaining point coincides with a chosen
/// centre the next unchosen point in index order is taken.
pub fn kmeans_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                if u < w {
                    pick = Some(i);
                    break;
                }
                u -= w;
            }
            // Rounding can walk past the end; fall back to the last candidate.
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("total > 0"))
        } else {
            chosen.iter().position(|c| !c).expect("k <= n")
        };
        chosen[pick] = true;
        centroids.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[pick]));
        }
    }
    centroids
}

/// Lloyd iterations from the given centres until assignments stop changing
/// or no centre moves more than `tolerance`. Empty clusters keep their
/// previous centre.
pub fn lloyd(points: &[Vec<f64>], init: Vec<Vec<f64>>, max_iterations: usize, tolerance: f64) -> KMeans {
    let dim = points.first().map_or(0, Vec::len);
    let mut centroids = init;
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    let mut objective = vec![points
        .iter()
        .zip(&assignments)
        .map(|(p, &c)| sq_dist(p, &centroids[c]))
        .sum()];
    for _ in 0..max_iterations {
        let mut sums = vec![vec![0.0f64; dim]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (p, &c) in points.iter().zip(&assignments) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift = 0.0f64;
        for (c, centroid) in centroids.iter_mut().enumerate() {
            if counts[c] == 0 {
                continue;
            }
            let updated: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&updated, centroid).sqrt());
            *centroid = updated;
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        let changed = next != assignments;
        assignments = next;
        objective.push(
            points
                .iter()
                .zip(&assignments)
                .map(|(p, &c)| sq_dist(p, &centroids[c]))
                .sum(),
        );
        if !changed || shift <= tolerance {
            break;
        }
    }
    KMeans {
        centroids,
        assignments,
        objective,
    }
}

/// Seeded k-means over L2-normalised copies of `embeddings`.
pub fn kmeans(embeddings: &[Vec<f64>], config: &ClusterConfig) -> (Vec<Vec<f64>>, KMeans) {
    let points: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| {
            let mut v = e.clone();
            l2_normalize(&mut v);
            v
        })
        .collect();
    let k = config.clusters_for(points.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = kmeans_plus_plus(&points, k, &mut rng);
    let result = lloyd(&points, init, config.max_iterations, config.tolerance);
    (points, result)
}

/// Cosine similarity of every sentence to its assigned centroid (or cosine
/// distance under [`ClusterPolarity::Distance`]).
pub fn cluster_salience(embeddings: &[Vec<f64>], config: &ClusterConfig) -> Vec<f64> {
    if embeddings.is_empty() {
        return Vec::new();
    }
    let (points, km) = kmeans(embeddings, config);
    points
        .iter()
        .zip(&km.assignments)
        .map(|(p, &c)| {
            let sim = cosine_similarity(p, &km.centroids[c]).unwrap_or(0.0);
            match config.polarity {
                ClusterPolarity::Similarity => sim,
                ClusterPolarity::Distance => 1.0 - sim,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_cases() {
        assert_eq!(
            positional_baseline(3, PositionalKind::Ascending, 0),
            vec![0.0, 1.0, 2.0]
        );
        assert_eq!(
            positional_baseline(3, PositionalKind::Descending, 0),
            vec![2.0, 1.0, 0.0]
        );
        let a = positional_baseline(50, PositionalKind::Random, 9);
        assert_eq!(a, positional_baseline(50, PositionalKind::Random, 9));
        assert_ne!(a, positional_baseline(50, PositionalKind::Random, 10));
        assert!(a.iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn single_sentence_is_its_own_centroid() {
        let out = cluster_salience(&[vec![0.3, -0.4]], &ClusterConfig::default());
        assert_eq!(out.len(), 1);
        assert!((out[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_orthogonal_groups() {
        let mut e = vec![vec![1.0, 0.0]; 5];
        e.extend(vec![vec![0.0, 2.0]; 5]);
        let cfg = ClusterConfig {
            sentences_per_cluster: 5,
            ..ClusterConfig::default()
        };
        assert_eq!(cfg.clusters_for(10), 2);
        for seed in 0..10 {
            let out = cluster_salience(&e, &ClusterConfig { seed, ..cfg });
            assert!(out.iter().all(|s| (s - 1.0).abs() < 1e-12), "{out:?}");
        }
    }

    #[test]
    fn k_is_clamped() {
        let cfg = ClusterConfig {
            sentences_per_cluster: 1,
            ..ClusterConfig::default()
        };
        assert_eq!(cfg.clusters_for(3), 3);
        assert_eq!(ClusterConfig::default().clusters_for(0), 1);
        assert_eq!(ClusterConfig::default().clusters_for(21), 3);
    }

    #[test]
    fn distance_polarity_flips() {
        let e = vec![vec![1.0, 0.1], vec![1.0, -0.1], vec![0.9, 0.0]];
        let sim = cluster_salience(&e, &ClusterConfig::default());
        let dist = cluster_salience(
            &e,
            &ClusterConfig {
                polarity: ClusterPolarity::Distance,
                ..ClusterConfig::default()
            },
        );
        for (s, d) in sim.iter().zip(&dist) {
            assert!((s + d - 1.0).abs() < 1e-12);
        }
    }
}
