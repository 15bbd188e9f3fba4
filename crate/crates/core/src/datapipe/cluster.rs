//! k-means over fake-sample embeddings and the fold construction built on it.

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Manifest;
use crate::error::{Error, Result};
use crate::types::{ImageSample, Label};

pub const DEFAULT_MAX_ITER: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub k: usize,
    pub seed: u64,
    /// Sample id → cluster index in `[0, k)`.
    pub assignment: BTreeMap<String, usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Objective after each assignment step.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl ClusterAssignment {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &c in self.assignment.values() {
            sizes[c] += 1;
        }
        sizes
    }

    pub fn members(&self, cluster: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &c)| c == cluster)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn objective(&self) -> f64 {
        self.objective_history.last().copied().unwrap_or(0.0)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, ties to the lower index.
fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn validate(embeddings: &[(String, Vec<f64>)], k: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    if embeddings.is_empty() {
        return Err(Error::invalid("no embeddings to cluster"));
    }
    if k > embeddings.len() {
        return Err(Error::config(format!(
            "k = {k} exceeds the {} samples",
            embeddings.len()
        )));
    }
    let dim = embeddings[0].1.len();
    if dim == 0 {
        return Err(Error::invalid("embeddings are empty vectors"));
    }
    let mut ids = HashSet::new();
    for (id, v) in embeddings {
        if v.len() != dim {
            return Err(Error::invalid(format!(
                "embedding `{id}` has dim {} (expected {dim})",
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("embedding `{id}` has non-finite values")));
        }
        if !ids.insert(id.as_str()) {
            return Err(Error::invalid(format!("duplicate embedding id `{id}`")));
        }
    }
    Ok(dim)
}

fn kmeans_pp(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].to_vec();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding. Deterministic for a fixed seed;
/// stops when assignments no longer change or after `max_iter` rounds.
pub fn cluster_fakes(embeddings: &[(String, Vec<f64>)], k: usize, seed: u64) -> Result<ClusterAssignment> {
    cluster_with(embeddings, k, seed, DEFAULT_MAX_ITER)
}

pub fn cluster_with(
    embeddings: &[(String, Vec<f64>)],
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<ClusterAssignment> {
    let dim = validate(embeddings, k)?;
    if max_iter == 0 {
        return Err(Error::config("max_iter must be at least 1"));
    }
    let points: Vec<&[f64]> = embeddings.iter().map(|(_, v)| v.as_slice()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(&points, k, &mut rng);
    let mut labels: Vec<usize> = vec![usize::MAX; points.len()];
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iter {
        iterations += 1;
        let mut changed = false;
        let mut objective = 0.0;
        let mut dists = Vec::with_capacity(points.len());
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest(p, &centroids);
            if labels[i] != j {
                labels[i] = j;
                changed = true;
            }
            objective += d;
            dists.push(d);
        }
        history.push(objective);

        // Re-seed empty clusters from the points farthest from their centroid.
        let mut sizes = vec![0usize; k];
        labels.iter().for_each(|&j| sizes[j] += 1);
        let mut reseeded = false;
        for (j, _) in sizes.clone().iter().enumerate().filter(|(_, &s)| s == 0) {
            let far = (0..points.len())
                .filter(|&i| sizes[labels[i]] > 1 && dists[i] > 0.0)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
            if let Some(i) = far {
                sizes[labels[i]] -= 1;
                sizes[j] += 1;
                labels[i] = j;
                dists[i] = 0.0;
                reseeded = true;
            }
        }
        if !changed && !reseeded {
            converged = true;
            break;
        }

        let mut sums = vec![vec![0.0; dim]; k];
        for (i, p) in points.iter().enumerate() {
            sums[labels[i]].iter_mut().zip(p.iter()).for_each(|(s, x)| *s += x);
        }
        for (j, s) in sums.into_iter().enumerate() {
            if sizes[j] > 0 {
                centroids[j] = s.into_iter().map(|v| v / sizes[j] as f64).collect();
            }
        }
    }
    if !converged {
        log::warn!("k-means stopped after {max_iter} iterations without converging");
    }

    Ok(ClusterAssignment {
        k,
        seed,
        assignment: embeddings.iter().map(|(id, _)| id.clone()).zip(labels).collect(),
        centroids,
        objective_history: history,
        iterations,
        converged,
    })
}

/// One sequential-training dataset: all reals plus one fake cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct Fold {
    pub index: usize,
    pub members: Vec<ImageSample>,
    pub real_count: usize,
    pub fake_count: usize,
}

impl Fold {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn fake_ids(&self) -> impl Iterator<Item = &str> {
        self.members
            .iter()
            .filter(|s| s.label == Some(Label::Fake))
            .map(|s| s.id.as_str())
    }
}

/// `k` folds in cluster-index order; member order follows the manifest.
pub fn build_folds(manifest: &Manifest, assignment: &ClusterAssignment) -> Result<Vec<Fold>> {
    let fakes: Vec<&ImageSample> = manifest.with_label(Label::Fake).collect();
    let fake_ids: HashSet<&str> = fakes.iter().map(|s| s.id.as_str()).collect();
    let assigned: HashSet<&str> = assignment.assignment.keys().map(String::as_str).collect();
    if fake_ids != assigned {
        let missing = fake_ids.difference(&assigned).count();
        let extra = assigned.difference(&fake_ids).count();
        return Err(Error::Consistency(format!(
            "cluster assignment does not cover the fake set ({missing} unassigned fakes, {extra} unknown ids)"
        )));
    }
    if let Some((id, c)) = assignment.assignment.iter().find(|(_, &c)| c >= assignment.k) {
        return Err(Error::Consistency(format!("`{id}` assigned to cluster {c} >= k")));
    }
    let reals: Vec<&ImageSample> = manifest.with_label(Label::Real).collect();
    Ok((0..assignment.k)
        .map(|i| {
            let mut members: Vec<ImageSample> = reals.iter().map(|&s| s.clone()).collect();
            let before = members.len();
            members.extend(
                fakes
                    .iter()
                    .filter(|s| assignment.assignment[&s.id] == i)
                    .map(|&s| s.clone()),
            );
            Fold {
                index: i,
                real_count: before,
                fake_count: members.len() - before,
                members,
            }
        })
        .collect())
}
