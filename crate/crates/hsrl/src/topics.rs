//! Golden topic derivation: k-means over feature vectors, one cluster per
//! topic. Fitting runs Lloyd's algorithm with k-means++ seeding; an emptied
//! cluster is re-seeded from the point farthest from its assigned centroid.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::Corpus;
use crate::diffcore::{NumArray, SeededRng};
use crate::{HsrlError, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TopicModel {
    pub k: usize,
    pub feature_dim: usize,
    /// K x d_v centroid matrix, row-major.
    pub centroids: Vec<f64>,
    /// Final sum of squared distances.
    pub inertia: f64,
}

impl TopicModel {
    pub fn centroid(&self, k: usize) -> &[f64] {
        &self.centroids[k * self.feature_dim..(k + 1) * self.feature_dim]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let model: TopicModel = serde_json::from_str(&text)?;
        if model.centroids.len() != model.k * model.feature_dim {
            return Err(HsrlError::Schema(format!(
                "topic model has {} centroid values; expected {}",
                model.centroids.len(),
                model.k * model.feature_dim
            )));
        }
        Ok(model)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fit K centroids with Lloyd's algorithm. Returns the model and the inertia
/// recorded after each assignment step (non-increasing by construction).
pub fn kmeans_fit(
    vectors: &[NumArray],
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<(TopicModel, Vec<f64>)> {
    if k < 2 {
        return Err(HsrlError::Config(format!("k must be at least 2, got {k}")));
    }
    let m = vectors.len();
    if m < k {
        return Err(HsrlError::Config(format!(
            "cannot fit {k} clusters from {m} vectors"
        )));
    }
    let dim = vectors[0].len();
    for v in vectors {
        if v.len() != dim {
            return Err(HsrlError::dimension(
                "kmeans_fit",
                format!("vectors of length {dim}"),
                format!("length {}", v.len()),
            ));
        }
    }

    let mut rng = SeededRng::new(seed);
    let mut centroids = kmeanspp_seed(vectors, k, dim, &mut rng);
    let mut assignment = vec![0usize; m];
    let mut inertia_trace = Vec::new();

    for _ in 0..max_iter.max(1) {
        // Assignment step.
        let mut inertia = 0.0;
        let mut changed = false;
        for (i, v) in vectors.iter().enumerate() {
            let (best, d) = nearest_centroid(&centroids, dim, v.values());
            inertia += d;
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        inertia_trace.push(inertia);
        if !changed && inertia_trace.len() > 1 {
            break;
        }

        // Update step.
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, v) in vectors.iter().enumerate() {
            let c = assignment[i];
            counts[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(v.values()) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed an empty cluster from the point farthest from its
                // current centroid.
                let far = farthest_point(vectors, &centroids, dim, &assignment);
                centroids[c * dim..(c + 1) * dim].copy_from_slice(vectors[far].values());
            } else {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(sums[c * dim..(c + 1) * dim].iter())
                {
                    *dst = s * inv;
                }
            }
        }
    }

    // Final assignment for the reported inertia.
    let mut inertia = 0.0;
    for v in vectors {
        let (_, d) = nearest_centroid(&centroids, dim, v.values());
        inertia += d;
    }
    inertia_trace.push(inertia);

    Ok((
        TopicModel {
            k,
            feature_dim: dim,
            centroids,
            inertia,
        },
        inertia_trace,
    ))
}

fn kmeanspp_seed(vectors: &[NumArray], k: usize, dim: usize, rng: &mut SeededRng) -> Vec<f64> {
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.below(vectors.len());
    centroids.extend_from_slice(vectors[first].values());

    let mut d2: Vec<f64> = vectors
        .iter()
        .map(|v| sq_dist(v.values(), vectors[first].values()))
        .collect();

    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let choice = if total <= 0.0 {
            // All remaining points coincide with chosen centroids.
            rng.below(vectors.len())
        } else {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = vectors.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                acc += w;
                if target < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.extend_from_slice(vectors[choice].values());
        for (i, v) in vectors.iter().enumerate() {
            let d = sq_dist(v.values(), vectors[choice].values());
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

fn nearest_centroid(centroids: &[f64], dim: usize, v: &[f64]) -> (usize, f64) {
    let k = centroids.len() / dim;
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for c in 0..k {
        let d = sq_dist(&centroids[c * dim..(c + 1) * dim], v);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

fn farthest_point(
    vectors: &[NumArray],
    centroids: &[f64],
    dim: usize,
    assignment: &[usize],
) -> usize {
    let mut far = 0;
    let mut far_d = -1.0;
    for (i, v) in vectors.iter().enumerate() {
        let c = assignment[i];
        let d = sq_dist(&centroids[c * dim..(c + 1) * dim], v.values());
        if d > far_d {
            far_d = d;
            far = i;
        }
    }
    far
}

/// Nearest centroid by squared Euclidean distance; ties break to the lowest
/// index.
pub fn assign_topic(model: &TopicModel, v: &NumArray) -> Result<usize> {
    if v.len() != model.feature_dim {
        return Err(HsrlError::dimension(
            "assign_topic",
            format!("vector of length {}", model.feature_dim),
            format!("length {}", v.len()),
        ));
    }
    Ok(nearest_centroid(&model.centroids, model.feature_dim, v.values()).0)
}

/// Fill every record's golden topics from the model. Idempotent.
pub fn golden_topic_sequences(model: &TopicModel, corpus: &mut Corpus) -> Result<()> {
    if corpus.feature_dim != model.feature_dim {
        return Err(HsrlError::dimension(
            "golden_topic_sequences",
            format!("corpus feature dim {}", model.feature_dim),
            format!("{}", corpus.feature_dim),
        ));
    }
    for r in &mut corpus.records {
        let mut topics = Vec::with_capacity(r.features.len());
        for f in &r.features {
            topics.push(assign_topic(model, f)?);
        }
        r.golden_topics = Some(topics);
    }
    Ok(())
}

/// Best agreement between two labelings under a permutation of the first
/// labeling's ids, as a fraction in [0, 1]. Exhaustive over permutations.
pub fn permutation_matched_agreement(k: usize, a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 1.0;
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0usize;
    permute(&mut perm, 0, &mut |p| {
        let matches = a.iter().zip(b).filter(|(&x, &y)| p[x] == y).count();
        best = best.max(matches);
    });
    best as f64 / a.len() as f64
}

fn permute(xs: &mut Vec<usize>, at: usize, visit: &mut impl FnMut(&[usize])) {
    if at == xs.len() {
        visit(xs);
        return;
    }
    for i in at..xs.len() {
        xs.swap(at, i);
        permute(xs, at + 1, visit);
        xs.swap(at, i);
    }
}
