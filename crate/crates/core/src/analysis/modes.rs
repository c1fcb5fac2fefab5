//! Mode discovery: PCA embedding, k-means clustering and per-mode misfits.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::PosteriorEnsemble;
use crate::error::{Error, Result};
use crate::geometry::Probe;
use crate::objective::amplitude_misfit;
use crate::physics::{DiffractionData, ForwardModel};

pub const DEFAULT_RESTARTS: usize = 10;
const MAX_LLOYD_ITERATIONS: usize = 300;

/// Principal-component scores of a sample matrix (rows are samples).
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub scores: Array2<f64>,
    /// Population variance along each component.
    pub variances: Vec<f64>,
}

/// Projects centered rows onto the top `components` principal axes.
///
/// Works through the `S x S` Gram matrix so the cost does not depend on the
/// feature dimension beyond one matrix product. Each axis is signed so that
/// its largest-magnitude score is positive.
pub fn pca(data: &Array2<f64>, components: usize) -> Result<Pca> {
    let s = data.nrows();
    if s == 0 {
        return Err(Error::InvalidConfig("PCA of an empty sample set".into()));
    }
    let mean = data.mean_axis(Axis(0)).expect("non-empty");
    let centered = data - &mean;
    let gram = centered.dot(&centered.t());
    let eig = SymmetricEigen::new(DMatrix::from_fn(s, s, |r, c| gram[[r, c]]));
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut scores = Array2::zeros((s, components));
    let mut variances = vec![0.0; components];
    for (k, &idx) in order.iter().take(components).enumerate() {
        let lambda = eig.eigenvalues[idx].max(0.0);
        variances[k] = lambda / s as f64;
        let root = lambda.sqrt();
        let col = eig.eigenvectors.column(idx);
        let mut lead = 0;
        for i in 0..s {
            if col[i].abs() > col[lead].abs() {
                lead = i;
            }
        }
        let sign = if col[lead] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..s {
            scores[[i, k]] = sign * col[i] * root;
        }
    }
    Ok(Pca { scores, variances })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// Zero-based labels, numbered by decreasing cluster size.
    pub labels: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.outer_iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn plus_plus_init(points: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let s = points.nrows();
    let mut centroids = Array2::zeros((k, points.ncols()));
    centroids.row_mut(0).assign(&points.row(rng.random_range(0..s)));
    let mut d2: Vec<f64> = points.outer_iter().map(|p| sq_dist(p, centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = s - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..s)
        };
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, p) in points.outer_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centroids.row(c)));
        }
    }
    centroids
}

fn lloyd(points: &Array2<f64>, mut centroids: Array2<f64>) -> (Vec<usize>, Array2<f64>, f64) {
    let (s, k) = (points.nrows(), centroids.nrows());
    let mut labels = vec![usize::MAX; s];
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let mut changed = false;
        for (i, p) in points.outer_iter().enumerate() {
            let (l, _) = nearest(p, &centroids);
            if labels[i] != l {
                labels[i] = l;
                changed = true;
            }
        }
        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; k];
        for (i, p) in points.outer_iter().enumerate() {
            sums.row_mut(labels[i]).scaled_add(1.0, &p);
            counts[labels[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            } else {
                // Re-seed an empty cluster at the point farthest from its centroid.
                let far = (0..s)
                    .max_by(|&a, &b| {
                        let da = sq_dist(points.row(a), centroids.row(labels[a]));
                        let db = sq_dist(points.row(b), centroids.row(labels[b]));
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("non-empty");
                centroids.row_mut(c).assign(&points.row(far));
                labels[far] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = points
        .outer_iter()
        .zip(&labels)
        .map(|(p, &l)| sq_dist(p, centroids.row(l)))
        .sum();
    (labels, centroids, inertia)
}

/// Relabels clusters by decreasing size, ties broken by first occurrence.
fn canonical_labels(labels: &[usize], centroids: &Array2<f64>) -> (Vec<usize>, Array2<f64>) {
    let k = centroids.nrows();
    let mut counts = vec![0usize; k];
    let mut first = vec![usize::MAX; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        first[l] = first[l].min(i);
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(first[a].cmp(&first[b])));
    let mut rank = vec![0; k];
    for (new, &old) in order.iter().enumerate() {
        rank[old] = new;
    }
    let relabeled = labels.iter().map(|&l| rank[l]).collect();
    let mut sorted = Array2::zeros(centroids.dim());
    for (new, &old) in order.iter().enumerate() {
        sorted.row_mut(new).assign(&centroids.row(old));
    }
    (relabeled, sorted)
}

/// k-means with k-means++ seeding; keeps the restart with the lowest inertia.
pub fn kmeans(points: &Array2<f64>, k: usize, restarts: usize, seed: u64) -> Result<KMeans> {
    let s = points.nrows();
    if k == 0 || k > s {
        return Err(Error::InvalidConfig(format!(
            "cannot form {k} clusters from {s} samples"
        )));
    }
    let mut best: Option<(Vec<usize>, Array2<f64>, f64)> = None;
    for r in 0..restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let init = plus_plus_init(points, k, &mut rng);
        let run = lloyd(points, init);
        if best.as_ref().is_none_or(|b| run.2 < b.2) {
            best = Some(run);
        }
    }
    let (labels, centroids, inertia) = best.expect("at least one restart");
    let (labels, centroids) = canonical_labels(&labels, &centroids);
    Ok(KMeans {
        labels,
        centroids,
        inertia,
    })
}

/// Mean silhouette coefficient; singleton clusters contribute 0.
pub fn silhouette(points: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let s = points.nrows();
    if labels.len() != s {
        return Err(Error::shape(&[s], &[labels.len()]));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::InvalidConfig("silhouette needs at least two clusters".into()));
    }
    let total: f64 = (0..s)
        .map(|i| {
            if sizes[labels[i]] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            for j in 0..s {
                if j != i {
                    sums[labels[j]] += sq_dist(points.row(i), points.row(j)).sqrt();
                }
            }
            let a = sums[labels[i]] / (sizes[labels[i]] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != labels[i] && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m > 0.0 {
                (b - a) / m
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / s as f64)
}

/// Picks the cluster count in `2..=k_max` with the highest silhouette.
pub fn select_k(points: &Array2<f64>, k_max: usize, restarts: usize, seed: u64) -> Result<(usize, f64)> {
    let mut best = None;
    for k in 2..=k_max.min(points.nrows()) {
        let fit = kmeans(points, k, restarts, seed)?;
        let score = silhouette(points, &fit.labels)?;
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((k, score));
        }
    }
    best.ok_or_else(|| Error::InvalidConfig("need k_max >= 2 and at least 2 samples".into()))
}

/// Two-dimensional embedding of an ensemble and its cluster labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeReport {
    /// `S x 2` principal-component scores.
    pub embedding: Array2<f64>,
    /// One-based cluster labels.
    pub labels: Vec<usize>,
    pub k: usize,
    pub explained_variance: Vec<f64>,
    pub inertia: f64,
}

/// PCA to two components, then k-means on the embedding.
pub fn embed_and_cluster(ensemble: &PosteriorEnsemble, k: usize, restarts: usize, seed: u64) -> Result<ModeReport> {
    if k == 0 || k > ensemble.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot form {k} clusters from {} samples",
            ensemble.len()
        )));
    }
    let data = ensemble.flattened();
    if k >= 2 && data.outer_iter().all(|row| row == data.row(0)) {
        return Err(Error::Degenerate(
            "all samples are identical; modes are undefined".into(),
        ));
    }
    let embedding = pca(&data, 2)?;
    let fit = kmeans(&embedding.scores, k, restarts, seed)?;
    Ok(ModeReport {
        embedding: embedding.scores,
        labels: fit.labels.iter().map(|l| l + 1).collect(),
        k,
        explained_variance: embedding.variances,
        inertia: fit.inertia,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeMisfits {
    pub label: usize,
    pub misfits: Vec<f64>,
    pub mean: f64,
    pub median: f64,
}

/// Amplitude misfit of every sample, grouped by label in ascending order.
pub fn mode_misfit_histogram(
    ensemble: &PosteriorEnsemble,
    labels: &[usize],
    data: &DiffractionData,
    probe: &Probe,
    sigma: f64,
) -> Result<Vec<ModeMisfits>> {
    if labels.len() != ensemble.len() {
        return Err(Error::shape(&[ensemble.len()], &[labels.len()]));
    }
    let forward = ForwardModel::new(data.geometry.clone(), probe.clone())?;
    let sqrt_data = data.patterns.mapv(f64::sqrt);
    let misfits = ensemble
        .samples()
        .par_iter()
        .map(|z| amplitude_misfit(z.view(), &forward, &sqrt_data, sigma))
        .collect::<Result<Vec<_>>>()?;
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (&l, m) in labels.iter().zip(misfits) {
        groups.entry(l).or_default().push(m);
    }
    Ok(groups
        .into_iter()
        .map(|(label, misfits)| {
            let mean = misfits.iter().sum::<f64>() / misfits.len() as f64;
            let mut sorted = misfits.clone();
            sorted.sort_by(f64::total_cmp);
            let mid = sorted.len() / 2;
            let median = if sorted.len() % 2 == 0 {
                0.5 * (sorted[mid - 1] + sorted[mid])
            } else {
                sorted[mid]
            };
            ModeMisfits {
                label,
                misfits,
                mean,
                median,
            }
        })
        .collect())
}
