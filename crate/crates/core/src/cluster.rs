//! k-medoids under Euclidean or grid-geodesic latent distances, and
//! macro-F1 scoring after optimal cluster-to-class matching.

use std::fmt;
use std::fs;
use std::path::Path;

use autodiff::Tensor;
use pathfinding::prelude::{kuhn_munkres, Matrix};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{GridMetric, LatentGrid};
use crate::rng::{self, tag};
use crate::train::ModelBundle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    Euclidean,
    Geodesic,
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Euclidean => "euclidean",
            Self::Geodesic => "geodesic",
        })
    }
}

/// Symmetric `n × n` distances with zero diagonal, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub n: usize,
    pub data: Vec<f64>,
    pub kind: DistanceKind,
}

const CACHE_MAGIC: &[u8; 8] = b"RHVDIST1";

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Straight-line distances between the rows of `points` `(N, d)`.
    pub fn euclidean(points: &[f64], d: usize) -> Self {
        let n = points.len() / d;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..i {
                let s: f64 = (0..d)
                    .map(|k| (points[i * d + k] - points[j * d + k]).powi(2))
                    .sum();
                data[i * n + j] = s.sqrt();
                data[j * n + i] = s.sqrt();
            }
        }
        Self {
            n,
            data,
            kind: DistanceKind::Euclidean,
        }
    }

    /// Grid-geodesic distances: every point is snapped to its nearest node,
    /// Dijkstra runs from each node and the result is symmetrized.
    pub fn geodesic(metric: &GridMetric, points: &[f64]) -> Result<Self> {
        let n = points.len() / 2;
        let nodes: Vec<usize> = points
            .chunks(2)
            .map(|p| metric.grid.nearest(p))
            .collect::<Result<_>>()?;
        let rows: Vec<Vec<f64>> = nodes
            .par_iter()
            .map(|&s| {
                let dist = metric.distances_from_node(s);
                nodes.iter().map(|&t| dist[t]).collect()
            })
            .collect();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (rows[i][j] + rows[j][i]);
                data[i * n + j] = v;
                data[j * n + i] = v;
            }
        }
        Ok(Self {
            n,
            data,
            kind: DistanceKind::Geodesic,
        })
    }

    /// Binary cache: magic, `n` as `u64`, kind byte, then `n²` `f64`, all
    /// little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + 8 * self.data.len());
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&(self.n as u64).to_le_bytes());
        out.push(match self.kind {
            DistanceKind::Euclidean => 0,
            DistanceKind::Geodesic => 1,
        });
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("distance cache: {m}"));
        if bytes.len() < 17 || &bytes[..8] != CACHE_MAGIC {
            return Err(bad("bad header"));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let kind = match bytes[16] {
            0 => DistanceKind::Euclidean,
            1 => DistanceKind::Geodesic,
            k => return Err(bad(&format!("unknown kind {k}"))),
        };
        let body = &bytes[17..];
        if n.checked_mul(n).and_then(|m| m.checked_mul(8)) != Some(body.len()) {
            return Err(bad("length does not match n"));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self { n, data, kind })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Posterior means `μ_φ(x)` of every datum, `(N, d)`.
pub fn embed(bundle: &ModelBundle, data: &Dataset) -> Result<Tensor> {
    bundle.params.encode_means(&data.all())
}

/// Pairwise latent distances of `data` under `kind`. Geodesic distances use
/// a `res × res` grid around the embeddings.
pub fn pairwise_distances(bundle: &ModelBundle, data: &Dataset, kind: DistanceKind, res: usize) -> Result<DistanceMatrix> {
    let z = embed(bundle, data)?;
    let d = bundle.spec().latent_dim;
    match kind {
        DistanceKind::Euclidean => Ok(DistanceMatrix::euclidean(z.data(), d)),
        DistanceKind::Geodesic => {
            let field = bundle
                .field
                .as_ref()
                .ok_or_else(|| Error::Unsupported("geodesic distances need a frozen metric".into()))?;
            let metric = GridMetric::new(field, LatentGrid::around(z.data(), res)?)?;
            DistanceMatrix::geodesic(&metric, z.data())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMedoids {
    pub medoids: Vec<usize>,
    /// Index into `medoids` for every point.
    pub assignments: Vec<usize>,
    pub cost: f64,
    /// Cost after each assignment pass.
    pub cost_history: Vec<f64>,
}

fn assign(dist: &DistanceMatrix, medoids: &[usize]) -> (Vec<usize>, f64) {
    let mut cost = 0.0;
    let assignments = (0..dist.n)
        .map(|i| {
            let mut best = (f64::INFINITY, 0);
            for (c, &m) in medoids.iter().enumerate() {
                let v = dist.get(i, m);
                if v < best.0 {
                    best = (v, c);
                }
            }
            cost += best.0;
            best.1
        })
        .collect();
    (assignments, cost)
}

/// Farthest-point seeding from a random start, then alternating
/// assignment and within-cluster medoid updates.
pub fn k_medoids(dist: &DistanceMatrix, k: usize, seed: u64, max_iters: usize) -> Result<KMedoids> {
    let n = dist.n;
    if k == 0 || k > n {
        return Err(Error::Config(format!("cannot form {k} clusters from {n} points")));
    }
    let mut r = rng::stream(seed, tag::MEDOIDS, 0);
    let mut medoids = vec![r.random_range(0..n)];
    let mut near: Vec<f64> = (0..n).map(|i| dist.get(i, medoids[0])).collect();
    while medoids.len() < k {
        let mut best: Option<(f64, usize)> = None;
        for i in (0..n).filter(|i| !medoids.contains(i)) {
            if best.is_none_or(|(v, _)| near[i] > v) {
                best = Some((near[i], i));
            }
        }
        let m = best.expect("k <= n").1;
        medoids.push(m);
        for (i, v) in near.iter_mut().enumerate() {
            *v = v.min(dist.get(i, m));
        }
    }
    let (mut assignments, mut cost) = assign(dist, &medoids);
    let mut cost_history = vec![cost];
    for _ in 0..max_iters {
        let mut next = medoids.clone();
        for (c, slot) in next.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assignments[i] == c).collect();
            let mut best = (members.iter().map(|&i| dist.get(i, *slot)).sum::<f64>(), *slot);
            for &cand in &members {
                let s: f64 = members.iter().map(|&i| dist.get(i, cand)).sum();
                if s < best.0 || (s == best.0 && cand < best.1) {
                    best = (s, cand);
                }
            }
            *slot = best.1;
        }
        if next == medoids {
            break;
        }
        medoids = next;
        (assignments, cost) = assign(dist, &medoids);
        cost_history.push(cost);
    }
    Ok(KMedoids {
        medoids,
        assignments,
        cost,
        cost_history,
    })
}

fn best_permutation(score: &[Vec<f64>]) -> Vec<usize> {
    let k = score.len();
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = (f64::NEG_INFINITY, perm.clone());
    loop {
        let s: f64 = (0..k).map(|c| score[c][perm[c]]).sum();
        if s > best.0 {
            best = (s, perm.clone());
        }
        // next lexicographic permutation
        let Some(i) = (0..k.saturating_sub(1)).rev().find(|&i| perm[i] < perm[i + 1]) else {
            break;
        };
        let j = (i + 1..k).rev().find(|&j| perm[j] > perm[i]).expect("successor exists");
        perm.swap(i, j);
        perm[i + 1..].reverse();
    }
    best.1
}

/// Macro-averaged F1 over classes, ×100, under the cluster-to-class matching
/// that maximizes it (exhaustive search up to six classes, Hungarian
/// algorithm beyond).
pub fn f1_score(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    if assignments.len() != labels.len() || labels.is_empty() {
        return Err(Error::Data(format!(
            "{} assignments for {} labels",
            assignments.len(),
            labels.len()
        )));
    }
    let k = 1 + assignments.iter().chain(labels).copied().max().expect("non-empty");
    let mut counts = vec![vec![0usize; k]; k];
    let mut class_size = vec![0usize; k];
    let mut cluster_size = vec![0usize; k];
    for (&a, &l) in assignments.iter().zip(labels) {
        counts[l][a] += 1;
        class_size[l] += 1;
        cluster_size[a] += 1;
    }
    // F1 of class c against cluster a is 2·tp / (|c| + |a|).
    let f1: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            (0..k)
                .map(|a| match counts[c][a] {
                    0 => 0.0,
                    tp => 2.0 * tp as f64 / (class_size[c] + cluster_size[a]) as f64,
                })
                .collect()
        })
        .collect();
    let matching = if k <= 6 {
        best_permutation(&f1)
    } else {
        let scaled: Vec<Vec<i64>> = f1.iter().map(|r| r.iter().map(|v| (v * 1e12).round() as i64).collect()).collect();
        kuhn_munkres(&Matrix::from_rows(scaled).expect("square scores")).1
    };
    let present: Vec<usize> = (0..k).filter(|&c| class_size[c] > 0).collect();
    let total: f64 = present.iter().map(|&c| f1[c][matching[c]]).sum();
    Ok(100.0 * total / present.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterRow {
    pub seed: u64,
    pub euclidean: f64,
    pub geodesic: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterTable {
    pub rows: Vec<ClusterRow>,
    pub mean_euclidean: f64,
    pub mean_geodesic: f64,
}

impl ClusterTable {
    /// One row per seed and a final `mean` row.
    pub fn csv(&self) -> String {
        let mut s = String::from("seed,euclidean_macro_f1,geodesic_macro_f1\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.seed, r.euclidean, r.geodesic));
        }
        s.push_str(&format!("mean,{},{}\n", self.mean_euclidean, self.mean_geodesic));
        s
    }
}

/// k-medoids with `k` = number of classes for every seed under both
/// distances, scored by macro-F1.
pub fn cluster_table(
    euclidean: &DistanceMatrix,
    geodesic: &DistanceMatrix,
    labels: &[usize],
    seeds: &[u64],
    max_iters: usize,
) -> Result<ClusterTable> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one clustering seed is required".into()));
    }
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let rows = seeds
        .iter()
        .map(|&seed| {
            Ok(ClusterRow {
                seed,
                euclidean: f1_score(&k_medoids(euclidean, k, seed, max_iters)?.assignments, labels)?,
                geodesic: f1_score(&k_medoids(geodesic, k, seed, max_iters)?.assignments, labels)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let m = rows.len() as f64;
    Ok(ClusterTable {
        mean_euclidean: rows.iter().map(|r| r.euclidean).sum::<f64>() / m,
        mean_geodesic: rows.iter().map(|r| r.geodesic).sum::<f64>() / m,
        rows,
    })
}

pub fn clustering_experiment(
    bundle: &ModelBundle,
    data: &Dataset,
    seeds: &[u64],
    res: usize,
    max_iters: usize,
) -> Result<ClusterTable> {
    let e = pairwise_distances(bundle, data, DistanceKind::Euclidean, res)?;
    let g = pairwise_distances(bundle, data, DistanceKind::Geodesic, res)?;
    cluster_table(&e, &g, &data.labels, seeds, max_iters)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn euclidean_three_four_five() {
        let d = DistanceMatrix::euclidean(&[0.0, 0.0, 3.0, 4.0], 2);
        assert_eq!(d.get(0, 1), 5.0);
        assert_eq!(d.get(1, 0), 5.0);
        assert_eq!(d.get(1, 1), 0.0);
    }

    #[test]
    fn absorbing_cluster_scores_one_third() {
        let labels = [0, 0, 0, 1, 1, 1];
        let f1 = f1_score(&[0; 6], &labels).unwrap();
        assert!((f1 - 100.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn permutations_enumerated() {
        let score = vec![vec![0.0, 0.0, 0.5], vec![0.4, 0.0, 0.0], vec![0.0, 0.3, 0.0]];
        assert_eq!(best_permutation(&score), vec![2, 0, 1]);
    }

    #[test]
    fn hungarian_matches_relabeled_clusters() {
        let labels: Vec<usize> = (0..80).map(|i| i % 8).collect();
        let assign: Vec<usize> = labels.iter().map(|l| (l + 3) % 8).collect();
        assert_eq!(f1_score(&assign, &labels).unwrap(), 100.0);
    }

    #[test]
    fn cache_roundtrip() {
        let d = DistanceMatrix::euclidean(&[0.0, 1.0, 2.5, -1.0, 0.3, 0.3], 2);
        let b = d.to_bytes();
        assert_eq!(DistanceMatrix::from_bytes(&b).unwrap(), d);
        assert!(DistanceMatrix::from_bytes(&b[..b.len() - 1]).is_err());
    }
}
