//! Soft-margin linear SVM: binary dual solver, one-vs-one multiclass
//! voting and cross-validated selection of C.
//!
//! The binary solver works on the dual
//! `min 1/2 a'Qa - sum(a)  s.t.  0 <= a_i <= C, sum(a_i y_i) = 0`
//! with `Q_ij = y_i y_j x_i'x_j`, updating two coordinates at a time
//! (second-order working-set selection) so the equality constraint holds
//! throughout.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Stop when the maximal KKT violation `m(a) - M(a)` falls below this.
    pub tolerance: f64,
    /// Relative primal-dual gap required on top of the violation test.
    pub gap_tolerance: f64,
    /// Budget in passes over the data (pair updates / n).
    pub max_epochs: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-3,
            gap_tolerance: 1e-3,
            max_epochs: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinarySvm {
    pub w: Vec<f64>,
    pub b: f64,
    pub c: f64,
}

impl BinarySvm {
    pub fn decision(&self, h: &[f64]) -> f64 {
        dot(&self.w, h) + self.b
    }
}

/// Dual solution with the diagnostics the tests inspect.
#[derive(Clone, Debug, PartialEq)]
pub struct DualSolution {
    pub svm: BinarySvm,
    pub alpha: Vec<f64>,
    pub primal: f64,
    pub dual: f64,
    pub max_violation: f64,
    pub iterations: usize,
}

impl DualSolution {
    pub fn gap(&self) -> f64 {
        self.primal - self.dual
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_data(x: &[Vec<f64>], n_labels: usize) -> Result<usize> {
    if x.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if x.len() != n_labels {
        return Err(Error::LengthMismatch(x.len(), n_labels));
    }
    let dim = x[0].len();
    for row in x {
        if row.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
    }
    Ok(dim)
}

/// Primal objective `1/2 |w|^2 + C sum(hinge)` at `(w, b)`.
pub fn primal_objective(x: &[Vec<f64>], y: &[f64], w: &[f64], b: f64, c: f64) -> f64 {
    let hinge: f64 = x.iter().zip(y).map(|(xi, yi)| (1.0 - yi * (dot(w, xi) + b)).max(0.0)).sum();
    0.5 * dot(w, w) + c * hinge
}

struct Solver<'a> {
    y: &'a [f64],
    gram: Vec<f64>,
    n: usize,
    c: f64,
    alpha: Vec<f64>,
    grad: Vec<f64>,
}

impl Solver<'_> {
    #[inline]
    fn k(&self, i: usize, j: usize) -> f64 {
        self.gram[i * self.n + j]
    }

    #[inline]
    fn in_up(&self, t: usize) -> bool {
        (self.y[t] > 0.0 && self.alpha[t] < self.c) || (self.y[t] < 0.0 && self.alpha[t] > 0.0)
    }

    #[inline]
    fn in_low(&self, t: usize) -> bool {
        (self.y[t] > 0.0 && self.alpha[t] > 0.0) || (self.y[t] < 0.0 && self.alpha[t] < self.c)
    }

    /// Working pair and the current violation `m - M`; ties to the lowest index.
    fn select(&self) -> (Option<(usize, usize)>, f64) {
        let mut i = None;
        let mut g_max = f64::NEG_INFINITY;
        for t in 0..self.n {
            if self.in_up(t) {
                let v = -self.y[t] * self.grad[t];
                if v > g_max {
                    g_max = v;
                    i = Some(t);
                }
            }
        }
        let mut g_min = f64::INFINITY;
        let mut j = None;
        let mut best = f64::INFINITY;
        for t in 0..self.n {
            if !self.in_low(t) {
                continue;
            }
            let v = -self.y[t] * self.grad[t];
            g_min = g_min.min(v);
            if let Some(i) = i {
                let b = g_max - v;
                if b > 0.0 {
                    let a = (self.k(i, i) + self.k(t, t) - 2.0 * self.k(i, t)).max(1e-12);
                    let score = -b * b / a;
                    if score < best {
                        best = score;
                        j = Some(t);
                    }
                }
            }
        }
        let violation = if i.is_some() && g_min.is_finite() { g_max - g_min } else { 0.0 };
        (i.zip(j), violation)
    }

    /// Analytic two-variable update, clipped to the box.
    fn update(&mut self, i: usize, j: usize) {
        let (yi, yj) = (self.y[i], self.y[j]);
        let quad = (self.k(i, i) + self.k(j, j) - 2.0 * self.k(i, j)).max(1e-12);
        let (old_i, old_j) = (self.alpha[i], self.alpha[j]);
        let c = self.c;
        if yi != yj {
            let delta = (-self.grad[i] - self.grad[j]) / quad;
            let diff = old_i - old_j;
            let (mut ai, mut aj) = (old_i + delta, old_j + delta);
            if diff > 0.0 {
                if aj < 0.0 {
                    aj = 0.0;
                    ai = diff;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = -diff;
            }
            if diff > 0.0 {
                if ai > c {
                    ai = c;
                    aj = c - diff;
                }
            } else if aj > c {
                aj = c;
                ai = c + diff;
            }
            self.alpha[i] = ai;
            self.alpha[j] = aj;
        } else {
            let delta = (self.grad[i] - self.grad[j]) / quad;
            let sum = old_i + old_j;
            let (mut ai, mut aj) = (old_i - delta, old_j + delta);
            if sum > c {
                if ai > c {
                    ai = c;
                    aj = sum - c;
                }
            } else if aj < 0.0 {
                aj = 0.0;
                ai = sum;
            }
            if sum > c {
                if aj > c {
                    aj = c;
                    ai = sum - c;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = sum;
            }
            self.alpha[i] = ai;
            self.alpha[j] = aj;
        }
        let (di, dj) = (self.alpha[i] - old_i, self.alpha[j] - old_j);
        for t in 0..self.n {
            self.grad[t] += self.y[t] * (yi * self.k(i, t) * di + yj * self.k(j, t) * dj);
        }
    }

    /// Bias from free support vectors, else the midpoint of the feasible range.
    fn bias(&self) -> f64 {
        let (mut sum, mut free) = (0.0, 0usize);
        let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
        for t in 0..self.n {
            let yg = self.y[t] * self.grad[t];
            if self.alpha[t] > 0.0 && self.alpha[t] < self.c {
                sum += yg;
                free += 1;
            } else if (self.alpha[t] >= self.c && self.y[t] < 0.0) || (self.alpha[t] <= 0.0 && self.y[t] > 0.0) {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        }
        let rho = if free > 0 {
            sum / free as f64
        } else if ub.is_finite() && lb.is_finite() {
            (ub + lb) / 2.0
        } else if ub.is_finite() {
            ub
        } else {
            lb
        };
        -rho
    }
}

/// Trains a binary machine on labels `y` in {-1, +1}.
pub fn solve_binary(x: &[Vec<f64>], y: &[f64], c: f64, cfg: &SolverConfig) -> Result<DualSolution> {
    let dim = check_data(x, y.len())?;
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::InvalidParameter(format!("C must be positive, got {c}")));
    }
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::InvalidParameter("binary labels must be +1 or -1".into()));
    }
    if !(y.contains(&1.0) && y.contains(&-1.0)) {
        return Err(Error::SingleClass);
    }
    let n = x.len();
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = dot(&x[i], &x[j]);
            gram[i * n + j] = v;
            gram[j * n + i] = v;
        }
    }
    let mut s = Solver {
        y,
        gram,
        n,
        c,
        alpha: vec![0.0; n],
        grad: vec![-1.0; n],
    };
    let budget = cfg.max_epochs.saturating_mul(n.max(1));
    let mut iterations = 0;
    let mut tol = cfg.tolerance;
    loop {
        let (pair, violation) = s.select();
        let converged = pair.is_none() || violation < tol;
        if converged || iterations >= budget {
            let sol = finish(&s, x, dim, violation, iterations);
            let gap_ok = sol.gap() <= cfg.gap_tolerance * (1.0 + sol.primal.abs());
            if gap_ok || iterations >= budget || pair.is_none() || tol < 1e-14 {
                if !gap_ok {
                    log::warn!("svm stopped with primal-dual gap {:.3e} (C={c})", sol.gap());
                }
                return Ok(sol);
            }
            // violation small but gap not: tighten and keep going
            tol /= 10.0;
            continue;
        }
        let (i, j) = pair.expect("checked above");
        s.update(i, j);
        iterations += 1;
    }
}

fn finish(s: &Solver<'_>, x: &[Vec<f64>], dim: usize, violation: f64, iterations: usize) -> DualSolution {
    let mut w = vec![0.0; dim];
    for (t, xt) in x.iter().enumerate() {
        let coef = s.alpha[t] * s.y[t];
        if coef != 0.0 {
            for (wk, v) in w.iter_mut().zip(xt) {
                *wk += coef * v;
            }
        }
    }
    let b = s.bias();
    let primal = primal_objective(x, s.y, &w, b, s.c);
    let dual = s.alpha.iter().sum::<f64>() - 0.5 * dot(&w, &w);
    DualSolution {
        svm: BinarySvm { w, b, c: s.c },
        alpha: s.alpha.clone(),
        primal,
        dual,
        max_violation: violation,
        iterations,
    }
}

pub fn train_binary(x: &[Vec<f64>], y: &[f64], c: f64) -> Result<BinarySvm> {
    Ok(solve_binary(x, y, c, &SolverConfig::default())?.svm)
}

pub fn predict_binary(m: &BinarySvm, h: &[f64]) -> Result<f64> {
    if h.len() != m.w.len() {
        return Err(Error::DimensionMismatch {
            expected: m.w.len(),
            found: h.len(),
        });
    }
    Ok(m.decision(h))
}

/// Machine separating `positive` (score > 0) from `negative`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMachine {
    pub positive: usize,
    pub negative: usize,
    pub svm: BinarySvm,
}

/// One-vs-one ensemble over integer class ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    /// Class ids present at training, ascending; this is the tie-break order.
    pub classes: Vec<usize>,
    pub class_names: Vec<String>,
    pub machines: Vec<PairMachine>,
    pub dim: usize,
    pub c: f64,
    /// Hashes of the codebooks the training histograms were built from.
    pub codebook_hashes: Vec<String>,
}

/// Per-pair scores and the resulting class.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub votes: Vec<usize>,
    pub pair_scores: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    model: SvmModel,
}

const MODEL_FORMAT: &str = "retina-bow/svm";
const MODEL_VERSION: u32 = 1;

impl SvmModel {
    pub fn predict_detailed(&self, h: &[f64]) -> Result<Prediction> {
        if h.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: h.len(),
            });
        }
        let pos = |c: usize| self.classes.iter().position(|&k| k == c).expect("machine classes are model classes");
        let mut votes = vec![0usize; self.classes.len()];
        let mut sums = vec![0.0; self.classes.len()];
        let mut pair_scores = Vec::with_capacity(self.machines.len());
        for m in &self.machines {
            let s = m.svm.decision(h);
            pair_scores.push(s);
            let (p, n) = (pos(m.positive), pos(m.negative));
            if s > 0.0 {
                votes[p] += 1;
            } else {
                votes[n] += 1;
            }
            sums[p] += s;
            sums[n] -= s;
        }
        let mut best = 0;
        for i in 1..self.classes.len() {
            if votes[i] > votes[best] || (votes[i] == votes[best] && sums[i] > sums[best]) {
                best = i;
            }
        }
        Ok(Prediction {
            class: self.classes[best],
            votes,
            pair_scores,
        })
    }

    pub fn predict(&self, h: &[f64]) -> Result<usize> {
        Ok(self.predict_detailed(h)?.class)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(&ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            model: self.clone(),
        })?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let file: ModelFile = serde_json::from_slice(bytes)?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(Error::Format(format!("model {} v{}", file.format, file.version)));
        }
        let m = file.model;
        let n = m.classes.len();
        if m.machines.len() != n * (n.saturating_sub(1)) / 2 || m.machines.iter().any(|p| p.svm.w.len() != m.dim) {
            return Err(Error::Format("model machines do not match its classes".into()));
        }
        Ok(m)
    }

    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?)))
    }
}

/// One machine per pair of classes present in `y`.
pub fn train_multiclass(x: &[Vec<f64>], y: &[usize], c: f64) -> Result<SvmModel> {
    let dim = check_data(x, y.len())?;
    let mut classes: Vec<usize> = y.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::SingleClass);
    }
    let pairs: Vec<(usize, usize)> = classes
        .iter()
        .enumerate()
        .flat_map(|(i, &a)| classes[i + 1..].iter().map(move |&b| (a, b)))
        .collect();
    let machines = pairs
        .par_iter()
        .map(|&(a, b)| {
            let (xs, ys): (Vec<Vec<f64>>, Vec<f64>) = x
                .iter()
                .zip(y)
                .filter(|(_, &l)| l == a || l == b)
                .map(|(xi, &l)| (xi.clone(), if l == a { 1.0 } else { -1.0 }))
                .unzip();
            Ok(PairMachine {
                positive: a,
                negative: b,
                svm: train_binary(&xs, &ys, c)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SvmModel {
        classes,
        class_names: Vec::new(),
        machines,
        dim,
        c,
        codebook_hashes: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub folds: usize,
    pub c_grid: Vec<f64>,
    pub stratified: bool,
    pub seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 10,
            c_grid: default_c_grid(),
            stratified: true,
            seed: 0,
        }
    }
}

/// `2^-5, 2^-3, ..., 2^15`.
pub fn default_c_grid() -> Vec<f64> {
    (-5..=15).step_by(2).map(|e| 2f64.powi(e)).collect()
}

/// Fold index for every sample. With stratification each class is shuffled
/// and dealt round-robin, continuing the deal across classes.
pub fn fold_assignment(y: &[usize], folds: usize, stratified: bool, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 folds, got {folds}")));
    }
    if y.len() < folds {
        return Err(Error::InsufficientFeatures {
            needed: folds,
            available: y.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0; y.len()];
    let groups: Vec<Vec<usize>> = if stratified {
        let mut classes: Vec<usize> = y.to_vec();
        classes.sort_unstable();
        classes.dedup();
        classes.iter().map(|&c| (0..y.len()).filter(|&i| y[i] == c).collect()).collect()
    } else {
        vec![(0..y.len()).collect()]
    };
    let mut next = 0;
    for mut g in groups {
        g.shuffle(&mut rng);
        for i in g {
            out[i] = next % folds;
            next += 1;
        }
    }
    Ok(out)
}

fn effective_folds(y: &[usize], cfg: &CvConfig) -> usize {
    if !cfg.stratified {
        return cfg.folds;
    }
    let mut classes: Vec<usize> = y.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let smallest = classes.iter().map(|&c| y.iter().filter(|&&l| l == c).count()).min().unwrap_or(0);
    if smallest < cfg.folds {
        smallest.max(2)
    } else {
        cfg.folds
    }
}

/// Mean per-fold accuracy (percent) at one `c`.
pub fn cross_validate(x: &[Vec<f64>], y: &[usize], c: f64, cfg: &CvConfig) -> Result<f64> {
    check_data(x, y.len())?;
    let folds = effective_folds(y, cfg);
    let assignment = fold_assignment(y, folds, cfg.stratified, cfg.seed)?;
    let accs = (0..folds)
        .into_par_iter()
        .map(|f| {
            let (mut tx, mut ty, mut vx, mut vy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for i in 0..y.len() {
                if assignment[i] == f {
                    vx.push(x[i].clone());
                    vy.push(y[i]);
                } else {
                    tx.push(x[i].clone());
                    ty.push(y[i]);
                }
            }
            if vy.is_empty() {
                return Ok(None);
            }
            let mut distinct = ty.clone();
            distinct.sort_unstable();
            distinct.dedup();
            let correct = if distinct.len() < 2 {
                vy.iter().filter(|&&l| l == distinct[0]).count()
            } else {
                let model = train_multiclass(&tx, &ty, c)?;
                let mut correct = 0;
                for (h, &l) in vx.iter().zip(&vy) {
                    if model.predict(h)? == l {
                        correct += 1;
                    }
                }
                correct
            };
            Ok(Some(100.0 * correct as f64 / vy.len() as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    let accs: Vec<f64> = accs.into_iter().flatten().collect();
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

/// CV accuracy for every grid value, in grid order.
pub fn cv_curve(x: &[Vec<f64>], y: &[usize], cfg: &CvConfig) -> Result<Vec<(f64, f64)>> {
    if cfg.c_grid.is_empty() {
        return Err(Error::Empty("C grid"));
    }
    let folds = effective_folds(y, cfg);
    if folds != cfg.folds {
        log::warn!("smallest class is too small for {} folds; using {folds}", cfg.folds);
    }
    cfg.c_grid.iter().map(|&c| Ok((c, cross_validate(x, y, c, cfg)?))).collect()
}

/// Grid value with the best CV accuracy; ties go to the smallest C.
pub fn grid_search_c(x: &[Vec<f64>], y: &[usize], cfg: &CvConfig) -> Result<f64> {
    Ok(best_c(&cv_curve(x, y, cfg)?))
}

pub fn best_c(curve: &[(f64, f64)]) -> f64 {
    let mut best = curve[0];
    for &(c, acc) in &curve[1..] {
        if acc > best.1 || (acc == best.1 && c < best.0) {
            best = (c, acc);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn blobs(seed: u64, n: usize, sep: f64, noise: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let l = if i % 2 == 0 { 1.0 } else { -1.0 };
            x.push(vec![l * sep + noise * (rng.gen::<f64>() - 0.5), noise * (rng.gen::<f64>() - 0.5)]);
            y.push(l);
        }
        (x, y)
    }

    #[test]
    fn two_point_analytic() {
        let x = vec![vec![0.0], vec![2.0]];
        let y = vec![-1.0, 1.0];
        let m = train_binary(&x, &y, 1e6).unwrap();
        assert!((m.w[0] - 1.0).abs() < 1e-6 && (m.b + 1.0).abs() < 1e-6);
        assert!((predict_binary(&m, &[2.0]).unwrap() - 1.0).abs() < 1e-6);
        assert!(predict_binary(&m, &[1.0]).unwrap().abs() < 1e-6);
        assert!(predict_binary(&m, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn input_errors() {
        let x = vec![vec![0.0], vec![1.0]];
        assert!(matches!(train_binary(&x, &[1.0, 1.0], 1.0), Err(Error::SingleClass)));
        assert!(train_binary(&x, &[1.0, -1.0], 0.0).is_err());
        assert!(train_binary(&[vec![f64::NAN], vec![1.0]], &[1.0, -1.0], 1.0).is_err());
        assert!(matches!(train_multiclass(&x, &[2, 2], 1.0), Err(Error::SingleClass)));
    }

    #[test]
    fn separable_has_no_slack() {
        let (x, y) = blobs(1, 40, 2.0, 1.0);
        let sol = solve_binary(&x, &y, 10.0, &SolverConfig::default()).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert!(yi * sol.svm.decision(xi) >= 1.0 - 1e-3);
        }
        assert!(sol.gap() < 1e-3 * (1.0 + sol.primal.abs()));
    }

    #[test]
    fn small_c_allows_slack_and_shrinks_w() {
        let (x, y) = blobs(2, 60, 0.3, 2.0);
        let small = train_binary(&x, &y, 0.01).unwrap();
        let large = train_binary(&x, &y, 100.0).unwrap();
        let slack = x.iter().zip(&y).filter(|(xi, yi)| *yi * small.decision(xi) < 1.0).count();
        assert!(slack > 0);
        assert!(dot(&small.w, &small.w) < dot(&large.w, &large.w));
    }

    #[test]
    fn dual_feasibility_and_gap() {
        for seed in 0..10 {
            let (x, y) = blobs(seed, 30, 0.5, 2.0);
            let c = 0.5 + seed as f64;
            let sol = solve_binary(&x, &y, c, &SolverConfig::default()).unwrap();
            assert!(sol.alpha.iter().all(|&a| (0.0..=c).contains(&a)));
            let eq: f64 = sol.alpha.iter().zip(&y).map(|(a, y)| a * y).sum();
            assert!(eq.abs() < 1e-6);
            assert!(sol.gap() < 1e-3 * (1.0 + sol.primal.abs()), "gap {}", sol.gap());
            assert!(sol.gap() > -1e-9);
        }
    }

    #[test]
    fn random_perturbations_do_not_improve_primal() {
        let (x, y) = blobs(11, 40, 0.4, 2.0);
        let c = 2.0;
        let m = train_binary(&x, &y, c).unwrap();
        let base = primal_objective(&x, &y, &m.w, m.b, c);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let w: Vec<f64> = m.w.iter().map(|v| v + 0.05 * (rng.gen::<f64>() - 0.5)).collect();
            let b = m.b + 0.05 * (rng.gen::<f64>() - 0.5);
            assert!(primal_objective(&x, &y, &w, b, c) >= base - 1e-3 * (1.0 + base));
        }
    }

    #[test]
    fn homogeneity_under_input_scaling() {
        let (x, y) = blobs(5, 30, 0.5, 2.0);
        let cfg = SolverConfig {
            tolerance: 1e-9,
            gap_tolerance: 1e-9,
            ..SolverConfig::default()
        };
        let a = solve_binary(&x, &y, 1.0, &cfg).unwrap().svm;
        let x2: Vec<Vec<f64>> = x.iter().map(|r| r.iter().map(|v| 2.0 * v).collect()).collect();
        let b = solve_binary(&x2, &y, 0.25, &cfg).unwrap().svm;
        for (wa, wb) in a.w.iter().zip(&b.w) {
            assert!((wa / 2.0 - wb).abs() < 1e-5, "{wa} {wb}");
        }
    }

    fn three_class(seed: u64, per: usize, spread: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = [[4.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 4.0]];
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..per * 3 {
            let c = i % 3;
            x.push(centers[c].iter().map(|v| v + spread * (rng.gen::<f64>() - 0.5)).collect());
            y.push(c);
        }
        (x, y)
    }

    #[test]
    fn multiclass_separable() {
        let (x, y) = three_class(1, 20, 1.0);
        let m = train_multiclass(&x, &y, 10.0).unwrap();
        assert_eq!(m.machines.len(), 3);
        for (h, &l) in x.iter().zip(&y) {
            assert_eq!(m.predict(h).unwrap(), l);
        }
        let bytes = m.to_json().unwrap();
        assert_eq!(SvmModel::from_json(&bytes).unwrap(), m);
        assert_eq!(bytes, train_multiclass(&x, &y, 10.0).unwrap().to_json().unwrap());
        let two: Vec<usize> = y.iter().map(|&l| l.min(1)).collect();
        let m2 = train_multiclass(&x, &two, 1.0).unwrap();
        assert_eq!(m2.machines.len(), 1);
        assert!(m2.predict(&x[0]).is_ok());
    }

    #[test]
    fn vote_ties_use_scores_then_order() {
        let machine = |p, n, b: f64| PairMachine {
            positive: p,
            negative: n,
            svm: BinarySvm {
                w: vec![0.0],
                b,
                c: 1.0,
            },
        };
        // cyclic votes 0>1, 1>2, 2>0: summed scores decide
        let m = SvmModel {
            classes: vec![0, 1, 2],
            class_names: vec![],
            machines: vec![machine(0, 1, 0.5), machine(0, 2, -0.2), machine(1, 2, 2.0)],
            dim: 1,
            c: 1.0,
            codebook_hashes: vec![],
        };
        let p = m.predict_detailed(&[0.0]).unwrap();
        assert_eq!(p.votes, vec![1, 1, 1]);
        assert_eq!(p.class, 1);
        let flat = SvmModel {
            machines: vec![machine(0, 1, 1.0), machine(0, 2, -1.0), machine(1, 2, 1.0)],
            ..m
        };
        // votes tie and scores tie: lowest class wins
        assert_eq!(flat.predict(&[0.0]).unwrap(), 0);
    }

    #[test]
    fn folds_partition() {
        let y = vec![0, 1, 0, 1];
        let f = fold_assignment(&y, 2, true, 0).unwrap();
        for fold in 0..2 {
            assert_eq!(f.iter().filter(|&&v| v == fold).count(), 2);
            let mut ls: Vec<usize> = (0..4).filter(|&i| f[i] == fold).map(|i| y[i]).collect();
            ls.sort_unstable();
            assert_eq!(ls, vec![0, 1]);
        }
        assert!(fold_assignment(&y, 1, true, 0).is_err());
    }

    #[test]
    fn cv_separable_and_chance() {
        let (x, y) = three_class(2, 20, 1.0);
        let cfg = CvConfig {
            c_grid: vec![1.0],
            ..CvConfig::default()
        };
        assert_eq!(cross_validate(&x, &y, 1.0, &cfg).unwrap(), 100.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut shuffled = y.clone();
        shuffled.shuffle(&mut rng);
        let noise: Vec<Vec<f64>> = (0..60).map(|_| (0..3).map(|_| rng.gen::<f64>()).collect()).collect();
        let acc = cross_validate(&noise, &shuffled, 1.0, &cfg).unwrap();
        assert!((acc - 100.0 / 3.0).abs() <= 15.0, "chance accuracy {acc}");
    }

    #[test]
    fn grid_search_ties_and_exhaustive_check() {
        let (x, y) = three_class(3, 12, 1.0);
        let single = CvConfig {
            c_grid: vec![3.0],
            ..CvConfig::default()
        };
        assert_eq!(grid_search_c(&x, &y, &single).unwrap(), 3.0);
        let sep = CvConfig {
            c_grid: vec![1000.0, 1.0, 0.001],
            ..CvConfig::default()
        };
        let curve = cv_curve(&x, &y, &sep).unwrap();
        let best = grid_search_c(&x, &y, &sep).unwrap();
        let top = curve.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let smallest = curve.iter().filter(|p| p.1 == top).map(|p| p.0).fold(f64::INFINITY, f64::min);
        assert_eq!(best, smallest);

        let (nx, ny) = three_class(4, 15, 7.0);
        let cfg = CvConfig::default();
        let best = grid_search_c(&nx, &ny, &cfg).unwrap();
        let top = cfg
            .c_grid
            .iter()
            .map(|&c| cross_validate(&nx, &ny, c, &cfg).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(cross_validate(&nx, &ny, best, &cfg).unwrap(), top);
    }

    #[test]
    fn default_grid() {
        let g = default_c_grid();
        assert_eq!(g.len(), 11);
        assert_eq!(g[0], 1.0 / 32.0);
        assert_eq!(g[10], 32768.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn dual_solution_is_feasible_and_tight(seed in 0u64..1000, n in 4usize..40, dim in 1usize..6, log_c in -4i32..6) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let c = 2f64.powi(log_c);
                let x: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
                let mut y: Vec<f64> = (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
                y[0] = 1.0;
                y[1] = -1.0;
                let s = solve_binary(&x, &y, c, &SolverConfig::default()).unwrap();
                prop_assert!(s.alpha.iter().all(|&a| (-1e-9..=c + 1e-9).contains(&a)));
                let balance: f64 = s.alpha.iter().zip(&y).map(|(a, y)| a * y).sum();
                prop_assert!(balance.abs() < 1e-6);
                prop_assert!(s.gap() >= -1e-9 * (1.0 + s.primal.abs()));
                prop_assert!(s.gap() < 1e-3 * (1.0 + s.primal.abs()));
                let p = primal_objective(&x, &y, &s.svm.w, s.svm.b, c);
                prop_assert!((p - s.primal).abs() <= 1e-9 * (1.0 + p.abs()));
            }
        }
    }
}
