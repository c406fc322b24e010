//! The global dictionary used as keys/values of cross-sample attention, and
//! the K-means (Lloyd with k-means++ seeding) routine that initializes it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MAX_ITERS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DictionarySource {
    KMeans,
    Random,
}

impl std::str::FromStr for DictionarySource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans" => Ok(Self::KMeans),
            "random" => Ok(Self::Random),
            other => Err(Error::Config(format!("unknown dictionary init {other:?} (kmeans|random)"))),
        }
    }
}

impl std::fmt::Display for DictionarySource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DictionarySource::KMeans => "kmeans",
            DictionarySource::Random => "random",
        })
    }
}

/// A `K×d` trainable matrix stored in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlobalDictionary {
    entries: ParamId,
    size: usize,
    dim: usize,
    source: DictionarySource,
}

impl GlobalDictionary {
    pub fn from_tensor(
        store: &mut ParamStore,
        name: &str,
        entries: Tensor,
        source: DictionarySource,
    ) -> Result<Self> {
        let (size, dim) = entries.require_matrix("GlobalDictionary")?;
        if size == 0 {
            return Err(Error::Config("dictionary needs at least one entry".into()));
        }
        let entries = store.add(name, entries)?;
        Ok(Self {
            entries,
            size,
            dim,
            source,
        })
    }

    /// Same storage, relabelled origin.
    pub fn with_source(mut self, source: DictionarySource) -> Self {
        self.source = source;
        self
    }

    pub fn entries(&self) -> ParamId {
        self.entries
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source(&self) -> DictionarySource {
        self.source
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub centroids: Tensor,
    pub labels: Vec<usize>,
    /// Sum of squared distances to the assigned centroids.
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid under squared Euclidean distance; ties go to the
/// lowest centroid index.
pub fn assign(points: &Tensor, centroids: &Tensor) -> Result<Vec<usize>> {
    let (_, d) = points.require_matrix("assign")?;
    let (k, d2) = centroids.require_matrix("assign")?;
    if d != d2 {
        return Err(Error::dim("assign", points.shape(), centroids.shape()));
    }
    if k == 0 {
        return Err(Error::Config("assign needs at least one centroid".into()));
    }
    Ok((0..points.rows())
        .map(|i| nearest(points.row(i), centroids).0)
        .collect())
}

fn nearest(p: &[f64], centroids: &Tensor) -> (usize, f64) {
    let mut best = (0, sq_dist(p, centroids.row(0)));
    for j in 1..centroids.rows() {
        let dj = sq_dist(p, centroids.row(j));
        if dj < best.1 {
            best = (j, dj);
        }
    }
    best
}

fn inertia_of(points: &Tensor, centroids: &Tensor, labels: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist(points.row(i), centroids.row(l)))
        .sum()
}

fn plus_plus_seeds(points: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let n = points.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // Every point already coincides with a seed.
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, dv) in dist.iter_mut().enumerate() {
            *dv = dv.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    points.gather_rows(&chosen).expect("seed indices in range")
}

/// Centroid update; empty clusters take the point currently farthest from
/// its centroid, which is then relabeled into the repaired cluster.
fn update_centroids(points: &Tensor, labels: &mut [usize], old: &Tensor) -> Tensor {
    let (k, d) = (old.rows(), old.cols());
    let mut sums = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, v) in sums[l * d..(l + 1) * d].iter_mut().zip(points.row(i)) {
            *s += v;
        }
    }
    let mut centroids = old.clone();
    for j in 0..k {
        if counts[j] > 0 {
            let inv = 1.0 / counts[j] as f64;
            for c in 0..d {
                centroids.set(j, c, sums[j * d + c] * inv);
            }
        }
    }
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        let far = (0..points.rows())
            .filter(|&i| counts[labels[i]] > 1)
            .map(|i| (i, sq_dist(points.row(i), centroids.row(labels[i]))))
            .fold(None::<(usize, f64)>, |best, (i, dv)| match best {
                Some((_, bd)) if bd >= dv => best,
                _ => Some((i, dv)),
            });
        let Some((i, _)) = far else { break };
        let from = labels[i];
        counts[from] -= 1;
        // Recompute the donor mean without the moved point.
        let inv = 1.0 / counts[from] as f64;
        for c in 0..d {
            sums[from * d + c] -= points.get(i, c);
            centroids.set(from, c, sums[from * d + c] * inv);
        }
        labels[i] = j;
        counts[j] = 1;
        for c in 0..d {
            sums[j * d + c] = points.get(i, c);
            centroids.set(j, c, points.get(i, c));
        }
    }
    centroids
}

/// Lloyd's algorithm seeded by k-means++ from `seed`. Stops after
/// `max_iters` assignment steps or once assignments stop changing.
pub fn kmeans(points: &Tensor, k: usize, max_iters: usize, seed: u64) -> Result<KMeansResult> {
    let (n, _) = points.require_matrix("kmeans")?;
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if n < k {
        return Err(Error::Config(format!("K-means needs N >= K, got N={n}, K={k}")));
    }
    if max_iters == 0 {
        return Err(Error::Config("max_iters must be at least 1".into()));
    }
    if !points.is_finite() {
        return Err(Error::Input("K-means input contains non-finite values".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seeds(points, k, &mut rng);
    let mut prev: Option<Vec<usize>> = None;
    let mut history = Vec::new();
    let mut converged = false;
    let mut labels = Vec::new();
    for _ in 0..max_iters {
        labels = assign(points, &centroids)?;
        history.push(inertia_of(points, &centroids, &labels));
        if prev.as_ref() == Some(&labels) {
            converged = true;
            break;
        }
        let mut updated = labels.clone();
        centroids = update_centroids(points, &mut updated, &centroids);
        prev = Some(labels.clone());
    }
    if !converged {
        labels = assign(points, &centroids)?;
        history.push(inertia_of(points, &centroids, &labels));
        converged = prev.as_ref() == Some(&labels);
    }
    Ok(KMeansResult {
        inertia: *history.last().expect("at least one step"),
        iterations: history.len(),
        centroids,
        labels,
        inertia_history: history,
        converged,
    })
}

/// K-means-initialized dictionary registered under `name`.
pub fn kmeans_init(
    store: &mut ParamStore,
    name: &str,
    points: &Tensor,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<(GlobalDictionary, KMeansResult)> {
    let result = kmeans(points, k, max_iters, seed)?;
    let dict = GlobalDictionary::from_tensor(store, name, result.centroids.clone(), DictionarySource::KMeans)?;
    Ok((dict, result))
}

/// Entries i.i.d. uniform in `[-scale, scale]`, deterministic per seed.
pub fn random_entries(k: usize, d: usize, scale: f64, seed: u64) -> Result<Tensor> {
    if k == 0 || d == 0 {
        return Err(Error::Config("dictionary dimensions must be positive".into()));
    }
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!("dictionary scale must be >= 0, got {scale}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Tensor::uniform(&[k, d], scale, &mut rng))
}

pub fn random_init(
    store: &mut ParamStore,
    name: &str,
    k: usize,
    d: usize,
    scale: f64,
    seed: u64,
) -> Result<GlobalDictionary> {
    let entries = random_entries(k, d, scale, seed)?;
    GlobalDictionary::from_tensor(store, name, entries, DictionarySource::Random)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn six_points() -> Tensor {
        Tensor::from_rows(&[
            [0.0, 0.0],
            [0.0, 1.0],
            [1.0, 0.0],
            [10.0, 10.0],
            [10.0, 11.0],
            [11.0, 10.0],
        ])
        .unwrap()
    }

    /// Brute force over every 2-partition of the six points.
    fn best_two_partition(points: &Tensor) -> f64 {
        let n = points.rows();
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << n) - 1 {
            let mut cost = 0.0;
            for side in [true, false] {
                let idx: Vec<usize> = (0..n).filter(|&i| ((mask >> i) & 1 == 1) == side).collect();
                let c = points.gather_rows(&idx).unwrap().mean_rows().unwrap();
                cost += idx.iter().map(|&i| sq_dist(points.row(i), c.row(0))).sum::<f64>();
            }
            best = best.min(cost);
        }
        best
    }

    #[test]
    fn six_point_example() {
        let pts = six_points();
        let oracle = best_two_partition(&pts);
        assert!((oracle - 8.0 / 3.0).abs() < 1e-12);
        let r = kmeans(&pts, 2, DEFAULT_MAX_ITERS, 0).unwrap();
        assert!((r.inertia - 8.0 / 3.0).abs() < 1e-12);
        let mut cents: Vec<Vec<f64>> = (0..2).map(|j| r.centroids.row(j).to_vec()).collect();
        cents.sort_by(|a, b| a[0].total_cmp(&b[0]));
        for (c, e) in cents.iter().zip([1.0 / 3.0, 31.0 / 3.0]) {
            assert!((c[0] - e).abs() < 1e-12 && (c[1] - e).abs() < 1e-12);
        }
        let labels = assign(&pts, &r.centroids).unwrap();
        let low = labels[0];
        assert!(labels[..3].iter().all(|&l| l == low));
        assert!(labels[3..].iter().all(|&l| l != low));
        assert!((r.centroids.get(low, 0) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn n_equals_k_is_exact() {
        let pts = Tensor::from_rows(&[[0.0, 1.0], [2.0, 3.0], [-1.0, 5.0], [4.0, 4.0]]).unwrap();
        let r = kmeans(&pts, 4, 10, 7).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut got: Vec<Vec<f64>> = (0..4).map(|j| r.centroids.row(j).to_vec()).collect();
        let mut want: Vec<Vec<f64>> = (0..4).map(|j| pts.row(j).to_vec()).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn identical_points_single_centroid() {
        let pts = Tensor::full(&[5, 3], 2.5);
        let r = kmeans(&pts, 1, 10, 1).unwrap();
        assert_eq!(r.centroids.row(0), &[2.5, 2.5, 2.5]);
    }

    #[test]
    fn errors() {
        let pts = six_points();
        assert!(matches!(kmeans(&pts, 7, 10, 0), Err(Error::Config(_))));
        assert!(matches!(kmeans(&pts, 0, 10, 0), Err(Error::Config(_))));
        let mut bad = pts.clone();
        bad.set(0, 0, f64::NAN);
        assert!(matches!(kmeans(&bad, 2, 10, 0), Err(Error::Input(_))));
        assert!(matches!(
            assign(&pts, &Tensor::zeros(&[2, 3])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn assign_tie_and_exact_hit() {
        let c = Tensor::from_rows(&[[0.0, 0.0], [2.0, 0.0]]).unwrap();
        let p = Tensor::from_rows(&[[1.0, 0.0], [2.0, 0.0]]).unwrap();
        assert_eq!(assign(&p, &c).unwrap(), vec![0, 1]);
    }

    #[test]
    fn random_init_determinism_and_zero_scale() {
        let a = random_entries(4, 3, 0.5, 11).unwrap();
        assert_eq!(a, random_entries(4, 3, 0.5, 11).unwrap());
        assert!(a.data().iter().all(|v| v.abs() <= 0.5));
        assert_eq!(random_entries(4, 3, 0.0, 11).unwrap(), Tensor::zeros(&[4, 3]));
        let mut store = ParamStore::new();
        let big = random_init(&mut store, "d", 500, 512, 0.1, 1).unwrap();
        assert_eq!((big.size(), big.dim()), (500, 512));
    }

    #[test]
    fn empty_cluster_repair_keeps_every_cluster_populated() {
        // Duplicated points force k-means++ to reuse locations.
        let pts = Tensor::from_rows(&[[0.0], [0.0], [0.0], [1.0], [5.0], [9.0]]).unwrap();
        for seed in 0..20 {
            let r = kmeans(&pts, 4, 50, seed).unwrap();
            for j in 0..4 {
                assert!(r.labels.contains(&j), "seed {seed}: cluster {j} empty");
            }
        }
    }
}
