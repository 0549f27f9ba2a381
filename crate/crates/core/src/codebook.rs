//! Visual dictionaries from k-means (Lloyd iterations, k-means++ seeding).
//!
//! Results are reproducible bit-for-bit: seeding uses a fixed ChaCha stream
//! per restart, assignment ties go to the lowest word index and centroid
//! sums are accumulated sequentially in point order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{DescriptorKind, FeatureMatrix, FeatureSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmeansConfig {
    pub max_iterations: usize,
    /// Stop once the relative objective decrease drops to this or below.
    pub tolerance: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        Self {
            max_iterations: 300,
            tolerance: 1e-6,
            restarts: 3,
            seed: 0,
        }
    }
}

impl KmeansConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || self.restarts == 0 || !(self.tolerance >= 0.0) {
            return Err(Error::InvalidParameter(
                "k-means needs max_iterations >= 1, restarts >= 1, tolerance >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of clustering raw points.
#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub dim: usize,
    /// `k x dim`, row-major.
    pub centroids: Vec<f64>,
    pub assignment: Vec<usize>,
    pub objective: f64,
    /// Objective after every assignment step, then after every transfer
    /// pass, of the winning restart.
    pub history: Vec<f64>,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest centroid, ties to the lowest index.
#[inline]
pub fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign_all(points: &[f64], centroids: &[f64], dim: usize) -> Vec<(usize, f64)> {
    points
        .par_chunks(dim)
        .with_min_len(64)
        .map(|p| nearest(p, centroids, dim))
        .collect()
}

fn restart_seed(seed: u64, restart: usize) -> u64 {
    seed ^ (restart as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// k-means++ seeding. Falls back to uniform choice among unpicked points
/// once every remaining point coincides with a chosen center.
fn seed_centroids(points: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let m = points.len() / dim;
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut picked = vec![false; m];
    let first = rng.gen_range(0..m);
    picked[first] = true;
    let mut centroids = point(first).to_vec();
    let mut d2: Vec<f64> = (0..m).map(|i| squared_distance(point(i), point(first))).collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    chosen = Some(i);
                    break;
                }
            }
            // rounding can leave `target` past the last increment
            chosen.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).expect("positive total"))
        } else {
            let free: Vec<usize> = (0..m).filter(|&i| !picked[i]).collect();
            free[rng.gen_range(0..free.len())]
        };
        picked[next] = true;
        centroids.extend_from_slice(point(next));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(squared_distance(point(i), point(next)));
        }
    }
    centroids
}

/// Recomputes centroids as means; an empty cluster is re-seeded with the
/// worst-quantized point not already used for re-seeding, which is then
/// moved to it.
fn update_centroids(points: &[f64], dim: usize, k: usize, labels: &mut [(usize, f64)], centroids: &mut [f64]) {
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (p, &(j, _)) in points.chunks_exact(dim).zip(labels.iter()) {
        counts[j] += 1;
        for (s, v) in sums[j * dim..(j + 1) * dim].iter_mut().zip(p) {
            *s += v;
        }
    }
    for j in 0..k {
        if counts[j] > 0 {
            let inv = counts[j] as f64;
            for (c, s) in centroids[j * dim..(j + 1) * dim].iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                *c = s / inv;
            }
        }
    }
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        // distances against the refreshed centroids
        let mut worst: Option<(usize, f64)> = None;
        for (i, p) in points.chunks_exact(dim).enumerate() {
            let owner = labels[i].0;
            if counts[owner] <= 1 {
                continue;
            }
            let d = squared_distance(p, &centroids[owner * dim..(owner + 1) * dim]);
            if worst.map_or(true, |(_, w)| d > w) {
                worst = Some((i, d));
            }
        }
        let Some((i, _)) = worst else { continue };
        let owner = labels[i].0;
        counts[owner] -= 1;
        counts[j] = 1;
        labels[i] = (j, 0.0);
        centroids[j * dim..(j + 1) * dim].copy_from_slice(&points[i * dim..(i + 1) * dim]);
    }
}

fn lloyd(points: &[f64], dim: usize, k: usize, cfg: &KmeansConfig, rng: &mut ChaCha8Rng) -> Clustering {
    let mut centroids = seed_centroids(points, dim, k, rng);
    let mut labels = assign_all(points, &centroids, dim);
    let mut objective: f64 = labels.iter().map(|l| l.1).sum();
    let mut history = vec![objective];
    for _ in 0..cfg.max_iterations {
        update_centroids(points, dim, k, &mut labels, &mut centroids);
        let next = assign_all(points, &centroids, dim);
        let changed = next.iter().zip(&labels).any(|(a, b)| a.0 != b.0);
        labels = next;
        let new_objective: f64 = labels.iter().map(|l| l.1).sum();
        history.push(new_objective);
        let decrease = objective - new_objective;
        objective = new_objective;
        if !changed || decrease <= cfg.tolerance * objective.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    let mut assignment: Vec<usize> = labels.into_iter().map(|l| l.0).collect();
    refine_transfers(points, dim, k, cfg.max_iterations, &mut assignment, &mut centroids, &mut history);
    Clustering {
        dim,
        centroids,
        objective: *history.last().expect("initial objective recorded"),
        assignment,
        history,
    }
}

/// Hartigan-style refinement: moves single points between clusters while
/// that lowers the objective, accounting for the shift of both means.
/// Leaves `centroids` as exact means of `assignment` and appends the
/// objective after every pass that moved a point.
fn refine_transfers(
    points: &[f64],
    dim: usize,
    k: usize,
    max_passes: usize,
    assignment: &mut [usize],
    centroids: &mut [f64],
    history: &mut Vec<f64>,
) {
    let recompute = |assignment: &[usize], centroids: &mut [f64]| -> Vec<usize> {
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (p, &j) in points.chunks_exact(dim).zip(assignment) {
            counts[j] += 1;
            for (s, v) in sums[j * dim..(j + 1) * dim].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in (0..k).filter(|&j| counts[j] > 0) {
            for (c, s) in centroids[j * dim..(j + 1) * dim].iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                *c = s / counts[j] as f64;
            }
        }
        counts
    };
    let objective = |assignment: &[usize], centroids: &[f64]| -> f64 {
        points
            .chunks_exact(dim)
            .zip(assignment)
            .map(|(p, &j)| squared_distance(p, &centroids[j * dim..(j + 1) * dim]))
            .sum()
    };
    let mut counts = recompute(assignment, centroids);
    let mut current = objective(assignment, centroids);
    for _ in 0..max_passes {
        let mut moved = false;
        for (i, p) in points.chunks_exact(dim).enumerate() {
            let a = assignment[i];
            if counts[a] <= 1 {
                continue;
            }
            let na = counts[a] as f64;
            let remove = na / (na - 1.0) * squared_distance(p, &centroids[a * dim..(a + 1) * dim]);
            let mut best: Option<(usize, f64)> = None;
            for b in (0..k).filter(|&b| b != a) {
                let nb = counts[b] as f64;
                let add = nb / (nb + 1.0) * squared_distance(p, &centroids[b * dim..(b + 1) * dim]);
                if best.map_or(true, |(_, v)| add < v) {
                    best = Some((b, add));
                }
            }
            let Some((b, add)) = best else { continue };
            // strict margin so rounding cannot make points oscillate
            if add >= remove * (1.0 - 1e-12) {
                continue;
            }
            let nb = counts[b] as f64;
            for d in 0..dim {
                let x = p[d];
                centroids[a * dim + d] = (na * centroids[a * dim + d] - x) / (na - 1.0);
                centroids[b * dim + d] = (nb * centroids[b * dim + d] + x) / (nb + 1.0);
            }
            counts[a] -= 1;
            counts[b] += 1;
            assignment[i] = b;
            moved = true;
        }
        if !moved {
            break;
        }
        counts = recompute(assignment, centroids);
        let next = objective(assignment, centroids);
        if next >= current {
            break;
        }
        current = next;
        history.push(current);
    }
    recompute(assignment, centroids);
    let exact = objective(assignment, centroids);
    if let Some(last) = history.last_mut() {
        // refresh the final entry only when it would not break monotonicity
        if exact <= *last {
            *last = exact;
        }
    }
}

/// Best-of-restarts k-means on `points` (row-major, `dim` values each).
pub fn kmeans_points(points: &[f64], dim: usize, k: usize, cfg: &KmeansConfig) -> Result<Clustering> {
    cfg.validate()?;
    if dim == 0 || k == 0 {
        return Err(Error::InvalidParameter("k-means needs k >= 1 and dim >= 1".into()));
    }
    if points.len() % dim != 0 {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: points.len() % dim,
        });
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let m = points.len() / dim;
    if m < k {
        return Err(Error::InsufficientFeatures {
            needed: k,
            available: m,
        });
    }
    let mut best: Option<Clustering> = None;
    for r in 0..cfg.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(restart_seed(cfg.seed, r));
        let run = lloyd(points, dim, k, cfg, &mut rng);
        if best.as_ref().map_or(true, |b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Cluster indices of pooled features.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment(pub Vec<usize>);

/// `k` visual words of one descriptor kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub kind: DescriptorKind,
    pub k: usize,
    pub dim: usize,
    /// `k x dim`, row-major.
    pub words: Vec<f64>,
    pub objective: f64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct CodebookFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    codebook: Codebook,
}

const CODEBOOK_FORMAT: &str = "retina-bow/codebook";
const CODEBOOK_VERSION: u32 = 1;

impl Codebook {
    pub fn word(&self, j: usize) -> &[f64] {
        &self.words[j * self.dim..(j + 1) * self.dim]
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(&CodebookFile {
            format: CODEBOOK_FORMAT.into(),
            version: CODEBOOK_VERSION,
            codebook: self.clone(),
        })?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let file: CodebookFile = serde_json::from_slice(bytes)?;
        if file.format != CODEBOOK_FORMAT || file.version != CODEBOOK_VERSION {
            return Err(Error::Format(format!("codebook {} v{}", file.format, file.version)));
        }
        let cb = file.codebook;
        if cb.dim != cb.kind.dim() || cb.words.len() != cb.k * cb.dim || cb.k == 0 {
            return Err(Error::Format("codebook shape does not match its kind".into()));
        }
        if cb.words.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(cb)
    }

    /// SHA-256 of the serialized codebook, hex encoded.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?)))
    }
}

/// k-means over the columns of `features`.
pub fn kmeans(features: &FeatureMatrix, k: usize, cfg: &KmeansConfig) -> Result<(Codebook, Assignment)> {
    let c = kmeans_points(features.as_slice(), features.dim(), k, cfg)?;
    Ok((
        Codebook {
            kind: features.kind(),
            k,
            dim: features.dim(),
            words: c.centroids,
            objective: c.objective,
            seed: cfg.seed,
        },
        Assignment(c.assignment),
    ))
}

/// Evenly spaced column indices when a matrix exceeds `cap`.
fn subsample_indices(count: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(cap) if count > cap => (0..cap).map(|i| i * count / cap).collect(),
        _ => (0..count).collect(),
    }
}

/// Pools all columns (optionally at most `per_image_cap` per image, evenly
/// spaced) in input order.
pub fn pool_features(train: &[&FeatureMatrix], kind: DescriptorKind, per_image_cap: Option<usize>) -> Result<FeatureMatrix> {
    let mut pool = FeatureMatrix::new(kind);
    for m in train {
        if m.kind() != kind {
            return Err(Error::KindMismatch {
                expected: kind,
                found: m.kind(),
            });
        }
        for i in subsample_indices(m.count(), per_image_cap) {
            pool.push_column(m.column(i));
        }
    }
    Ok(pool)
}

/// One codebook from the pooled descriptors of every training image.
pub fn build_single_dictionary(
    train: &[&FeatureMatrix],
    kind: DescriptorKind,
    k: usize,
    cfg: &KmeansConfig,
    per_image_cap: Option<usize>,
) -> Result<Codebook> {
    let pool = pool_features(train, kind, per_image_cap)?;
    if pool.count() < k {
        return Err(Error::InsufficientFeatures {
            needed: k,
            available: pool.count(),
        });
    }
    Ok(kmeans(&pool, k, cfg)?.0)
}

/// One independent codebook per kind, all with `k` words.
pub fn build_multiple_dictionaries(
    train: &[FeatureSet],
    kinds: &[DescriptorKind],
    k: usize,
    cfg: &KmeansConfig,
    per_image_cap: Option<usize>,
) -> Result<Vec<Codebook>> {
    kinds
        .iter()
        .map(|&kind| {
            let mats = train.iter().map(|s| s.require(kind)).collect::<Result<Vec<_>>>()?;
            build_single_dictionary(&mats, kind, k, cfg, per_image_cap)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(seed: u64, per: usize, centers: &[[f64; 2]], spread: f64) -> (Vec<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per {
                pts.push(center[0] + spread * (rng.gen::<f64>() - 0.5));
                pts.push(center[1] + spread * (rng.gen::<f64>() - 0.5));
                truth.push(c);
            }
        }
        (pts, truth)
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = KmeansConfig::default();
        assert!(matches!(
            kmeans_points(&[0.0, 1.0], 1, 3, &cfg),
            Err(Error::InsufficientFeatures { needed: 3, available: 2 })
        ));
        assert!(matches!(kmeans_points(&[0.0, f64::NAN], 1, 1, &cfg), Err(Error::NonFinite)));
        assert!(kmeans_points(&[0.0], 1, 0, &cfg).is_err());
        let bad = KmeansConfig { restarts: 0, ..cfg };
        assert!(kmeans_points(&[0.0], 1, 1, &bad).is_err());
    }

    #[test]
    fn k_equals_m_is_exact() {
        let pts = [0.0, 0.0, 1.0, 5.0, -2.0, 3.0, 4.0, 4.0];
        let c = kmeans_points(&pts, 2, 4, &KmeansConfig::default()).unwrap();
        assert_eq!(c.objective, 0.0);
        let mut a = c.assignment.clone();
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2, 3]);
    }

    #[test]
    fn duplicates_still_seed_k_words() {
        let pts = [1.0, 1.0, 1.0, 2.0];
        let c = kmeans_points(&pts, 1, 3, &KmeansConfig::default()).unwrap();
        assert_eq!(c.k(), 3);
        assert_eq!(c.objective, 0.0);
    }

    #[test]
    fn single_word_is_mean() {
        let (pts, _) = blobs(3, 20, &[[0.0, 0.0], [5.0, 1.0]], 2.0);
        let c = kmeans_points(&pts, 2, 1, &KmeansConfig::default()).unwrap();
        let m = pts.len() as f64 / 2.0;
        let mx = pts.iter().step_by(2).sum::<f64>() / m;
        let my = pts.iter().skip(1).step_by(2).sum::<f64>() / m;
        assert!((c.centroids[0] - mx).abs() < 1e-9 && (c.centroids[1] - my).abs() < 1e-9);
    }

    #[test]
    fn separated_blobs_recovered() {
        let (pts, truth) = blobs(5, 25, &[[0.0, 0.0], [50.0, 50.0]], 1.0);
        let c = kmeans_points(&pts, 2, 2, &KmeansConfig::default()).unwrap();
        let flip = c.assignment[0] != truth[0];
        for (a, t) in c.assignment.iter().zip(&truth) {
            assert_eq!(*a, if flip { 1 - t } else { *t });
        }
    }

    #[test]
    fn objective_is_monotone_and_converged_state_is_consistent() {
        let (pts, _) = blobs(9, 40, &[[0.0, 0.0], [3.0, 0.0], [1.0, 4.0], [6.0, 5.0]], 4.0);
        let cfg = KmeansConfig {
            tolerance: 0.0,
            ..KmeansConfig::default()
        };
        let c = kmeans_points(&pts, 2, 4, &cfg).unwrap();
        for w in c.history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        for (i, p) in pts.chunks_exact(2).enumerate() {
            assert_eq!(nearest(p, &c.centroids, 2).0, c.assignment[i]);
        }
        for j in 0..4 {
            let members: Vec<&[f64]> = pts.chunks_exact(2).enumerate().filter(|(i, _)| c.assignment[*i] == j).map(|(_, p)| p).collect();
            for d in 0..2 {
                let mean = members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64;
                assert!((c.centroid(j)[d] - mean).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let (pts, _) = blobs(1, 30, &[[0.0, 0.0], [2.0, 2.0], [4.0, 0.0]], 3.0);
        let cfg = KmeansConfig { seed: 42, ..KmeansConfig::default() };
        assert_eq!(kmeans_points(&pts, 2, 3, &cfg).unwrap(), kmeans_points(&pts, 2, 3, &cfg).unwrap());
    }

    fn hog_matrix(seed: u64, cols: usize) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..cols * 93).map(|_| rng.gen::<f64>()).collect();
        FeatureMatrix::from_columns(DescriptorKind::Hog, data).unwrap()
    }

    #[test]
    fn single_dictionary_pools_in_order() {
        let mats = [hog_matrix(1, 10), hog_matrix(2, 20), hog_matrix(3, 30)];
        let refs: Vec<&FeatureMatrix> = mats.iter().collect();
        let pool = pool_features(&refs, DescriptorKind::Hog, None).unwrap();
        assert_eq!(pool.count(), 60);
        assert_eq!(pool.column(10), mats[1].column(0));
        let capped = pool_features(&refs, DescriptorKind::Hog, Some(10)).unwrap();
        assert_eq!(capped.count(), 30);
        let cfg = KmeansConfig { seed: 7, ..KmeansConfig::default() };
        let a = build_single_dictionary(&refs, DescriptorKind::Hog, 5, &cfg, None).unwrap();
        assert_eq!(a.dim, 93);
        assert_eq!(a.words.len(), 5 * 93);
        assert_eq!(a, build_single_dictionary(&refs, DescriptorKind::Hog, 5, &cfg, None).unwrap());
        assert!(matches!(
            build_single_dictionary(&refs, DescriptorKind::Lbp, 5, &cfg, None),
            Err(Error::KindMismatch { .. })
        ));
        assert!(matches!(
            build_single_dictionary(&refs, DescriptorKind::Hog, 61, &cfg, None),
            Err(Error::InsufficientFeatures { .. })
        ));
    }

    #[test]
    fn codebook_json_round_trip_and_hash() {
        let mats = [hog_matrix(4, 12)];
        let refs: Vec<&FeatureMatrix> = mats.iter().collect();
        let cb = build_single_dictionary(&refs, DescriptorKind::Hog, 3, &KmeansConfig::default(), None).unwrap();
        let bytes = cb.to_json().unwrap();
        assert_eq!(Codebook::from_json(&bytes).unwrap(), cb);
        assert_eq!(cb.content_hash().unwrap().len(), 64);
        let mut bad: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        bad["k"] = 4.into();
        assert!(Codebook::from_json(&serde_json::to_vec(&bad).unwrap()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn objective_matches_assignment(seed in 0u64..1000, m in 1usize..60, dim in 1usize..5, k in 1usize..6) {
                prop_assume!(k <= m);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let pts: Vec<f64> = (0..m * dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let c = kmeans_points(&pts, dim, k, &KmeansConfig { seed, ..KmeansConfig::default() }).unwrap();
                prop_assert_eq!(c.k(), k);
                prop_assert!(c.history.windows(2).all(|w| w[1] <= w[0]));
                let sse: f64 = (0..m)
                    .map(|i| squared_distance(&pts[i * dim..(i + 1) * dim], c.centroid(c.assignment[i])))
                    .sum();
                prop_assert!((sse - c.objective).abs() <= 1e-9 * (1.0 + sse));
                prop_assert!(c.objective <= c.history[0] + 1e-12);
            }
        }
    }
}
