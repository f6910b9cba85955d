use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::classifier::BowClassifier;
use crate::error::{Error, Result};
use crate::numcore::ops::{dot, sigmoid};
use crate::numcore::SeededRng;

pub const EXACT_RESIDUAL_TOL: f64 = 1e-10;
/// `‖h_t‖ / ‖v‖` beyond which the recursion is declared divergent.
pub const DIVERGENCE_RATIO: f64 = 1e6;

/// Pivot ratio below which the Hessian is treated as singular.
const SINGULAR_PIVOT_RATIO: f64 = 1e-13;

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Solves `H x = v` with the exact Hessian by Cholesky, with one round of
/// iterative refinement if the first residual is above tolerance.
pub fn exact_inverse_hvp(clf: &BowClassifier, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != clf.dim() {
        return Err(Error::shape("inverse hvp", format!("v has {} entries, model {}", v.len(), clf.dim())));
    }
    let h = clf.hessian();
    let chol = h.clone().cholesky().ok_or(Error::Singular { pivot: 0.0 })?;
    let l = chol.l_dirty();
    let diag: Vec<f64> = (0..l.nrows()).map(|i| l[(i, i)] * l[(i, i)]).collect();
    let max = diag.iter().copied().fold(0.0, f64::max);
    let min = diag.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > SINGULAR_PIVOT_RATIO * max) {
        return Err(Error::Singular { pivot: min });
    }

    let rhs = DVector::from_column_slice(v);
    let vnorm = rhs.norm();
    if vnorm == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let mut x = chol.solve(&rhs);
    let mut residual = (&h * &x - &rhs).norm() / vnorm;
    if residual > EXACT_RESIDUAL_TOL {
        let r = &rhs - &h * &x;
        x += chol.solve(&r);
        residual = (&h * &x - &rhs).norm() / vnorm;
    }
    if residual > EXACT_RESIDUAL_TOL {
        return Err(Error::Singular { pivot: min });
    }
    Ok(x.as_slice().to_vec())
}

/// What each recursion step uses as its Hessian estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum HvpSampler {
    /// `p(1−p) x xᵀ + λI` for one uniformly drawn training example.
    #[default]
    SingleExample,
    /// The full Hessian every step; deterministic, for checking the recursion.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HvpConfig {
    /// Independent estimates per selection run.
    pub repetitions: usize,
    /// Recursion steps per estimate.
    pub depth: usize,
    pub damping: f64,
    /// `None` picks a bound on the largest per-sample eigenvalue.
    pub scale: Option<f64>,
    /// Independent recursions averaged into one estimate.
    pub averages: usize,
    pub sample_size: usize,
    pub top_k: usize,
    pub sampler: HvpSampler,
}

impl Default for HvpConfig {
    fn default() -> Self {
        HvpConfig {
            repetitions: 1000,
            depth: 5000,
            damping: 0.0,
            scale: None,
            averages: 1,
            sample_size: 100,
            top_k: 100,
            sampler: HvpSampler::SingleExample,
        }
    }
}

impl HvpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.repetitions == 0 {
            return bad("repetitions must be >= 1");
        }
        if self.depth == 0 {
            return bad("depth must be >= 1");
        }
        if !(self.damping >= 0.0) {
            return bad("damping must be >= 0");
        }
        if matches!(self.scale, Some(s) if !(s > 0.0)) {
            return bad("scale must be > 0");
        }
        if self.averages == 0 {
            return bad("averages must be >= 1");
        }
        if self.top_k == 0 {
            return bad("top_k must be >= 1");
        }
        Ok(())
    }
}

/// Per-row curvature `p(1−p)` and squared norm, computed once.
struct Curvature {
    weight: Vec<f64>,
    sq_norm: Vec<f64>,
}

impl Curvature {
    fn new(clf: &BowClassifier) -> Self {
        let n = clf.data.len();
        let mut weight = Vec::with_capacity(n);
        let mut sq_norm = Vec::with_capacity(n);
        for r in &clf.data.rows {
            let p = sigmoid(dot(&clf.theta, r));
            weight.push(p * (1.0 - p));
            sq_norm.push(dot(r, r));
        }
        Curvature { weight, sq_norm }
    }
}

/// A scale that keeps every step's `(H_s + damping)/scale` below one.
pub fn auto_scale(clf: &BowClassifier, damping: f64, sampler: HvpSampler) -> f64 {
    let bound = match sampler {
        HvpSampler::SingleExample => {
            let c = Curvature::new(clf);
            c.weight
                .iter()
                .zip(&c.sq_norm)
                .map(|(w, s)| w * s)
                .fold(0.0, f64::max)
        }
        HvpSampler::Exact => {
            // Gershgorin bound on the data part.
            let h = clf.hessian();
            (0..h.nrows())
                .map(|i| h.row(i).iter().map(|x| x.abs()).sum::<f64>() - clf.lambda)
                .fold(0.0, f64::max)
        }
    };
    1.05 * (bound + clf.lambda + damping)
}

/// LiSSA estimate of `(H + damping·I)^{-1} v`:
/// `h_0 = v`, `h_{t+1} = v + (I − (H_s + damping·I)/scale) h_t`, returning
/// `h_T / scale`, averaged over `config.averages` independent recursions.
pub fn stochastic_hvp(
    clf: &BowClassifier,
    v: &[f64],
    config: &HvpConfig,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    config.validate()?;
    if v.len() != clf.dim() {
        return Err(Error::shape("stochastic hvp", format!("v has {} entries, model {}", v.len(), clf.dim())));
    }
    let vnorm = norm(v);
    if vnorm == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    if config.sampler == HvpSampler::SingleExample && clf.data.is_empty() {
        return Err(Error::Empty("classifier has no training rows to sample".into()));
    }
    let scale = config
        .scale
        .unwrap_or_else(|| auto_scale(clf, config.damping, config.sampler));
    let curv = Curvature::new(clf);
    let hessian = match config.sampler {
        HvpSampler::Exact => Some(clf.hessian()),
        HvpSampler::SingleExample => None,
    };
    let shrink = 1.0 - (clf.lambda + config.damping) / scale;

    let mut total = vec![0.0; v.len()];
    for _ in 0..config.averages {
        let mut h = v.to_vec();
        for step in 0..config.depth {
            match &hessian {
                Some(full) => {
                    let hv = full * DVector::from_column_slice(&h);
                    for ((hj, vj), hvj) in h.iter_mut().zip(v).zip(hv.iter()) {
                        *hj = vj + *hj - (hvj + config.damping * *hj) / scale;
                    }
                }
                None => {
                    let i = rng.below(clf.data.len());
                    let row = &clf.data.rows[i];
                    let c = curv.weight[i] * dot(row, &h) / scale;
                    for ((hj, vj), x) in h.iter_mut().zip(v).zip(row) {
                        *hj = vj + shrink * *hj - c * x;
                    }
                }
            }
            if step % 64 == 0 || step + 1 == config.depth {
                let ratio = norm(&h) / vnorm;
                if !ratio.is_finite() || ratio > DIVERGENCE_RATIO {
                    return Err(Error::HvpDiverged { step, ratio });
                }
            }
        }
        for (t, hj) in total.iter_mut().zip(&h) {
            *t += hj / scale;
        }
    }
    let k = config.averages as f64;
    Ok(total.into_iter().map(|x| x / k).collect())
}

pub fn relative_l2_error(estimate: &[f64], exact: &[f64]) -> f64 {
    let diff: Vec<f64> = estimate.iter().zip(exact).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(exact).max(f64::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::influence::classifier::LabeledData;

    fn zero_data(dim: usize, lambda: f64) -> BowClassifier {
        BowClassifier {
            features: Default::default(),
            theta: vec![0.0; dim],
            lambda,
            data: LabeledData::default(),
        }
    }

    #[test]
    fn identity_hessian_returns_v() {
        let clf = zero_data(4, 1.0);
        let v = vec![1.0, -2.0, 0.5, 3.0];
        assert_eq!(exact_inverse_hvp(&clf, &v).unwrap(), v);
    }

    #[test]
    fn two_feature_hand_inversion() {
        // theta = 0 so every p(1−p) = 1/4; rows (1,0) and (1,1).
        let data = LabeledData::new(vec![vec![1.0, 0.0], vec![1.0, 1.0]], vec![1.0, 0.0]).unwrap();
        let clf = BowClassifier {
            features: Default::default(),
            theta: vec![0.0, 0.0],
            lambda: 0.5,
            data,
        };
        // H = (1/2)(1/4)[[2,1],[1,1]] + 0.5 I = [[0.75, 0.125], [0.125, 0.625]]
        let (a, b, d) = (0.75, 0.125, 0.625);
        let det = a * d - b * b;
        let v = [1.0, 2.0];
        let expected = [(d * v[0] - b * v[1]) / det, (-b * v[0] + a * v[1]) / det];
        let got = exact_inverse_hvp(&clf, &v).unwrap();
        for (g, e) in got.iter().zip(expected) {
            assert!((g - e).abs() < 1e-14, "{g} vs {e}");
        }
    }

    #[test]
    fn singular_hessian_is_reported() {
        let data = LabeledData::new(vec![vec![1.0, 1.0], vec![1.0, 1.0]], vec![1.0, 0.0]).unwrap();
        let clf = BowClassifier {
            features: Default::default(),
            theta: vec![0.0, 0.0],
            lambda: 1e-20,
            data,
        };
        assert!(matches!(exact_inverse_hvp(&clf, &[1.0, 0.0]), Err(Error::Singular { .. })));
    }

    fn random_classifier(seed: u64, n: usize, dim: usize, lambda: f64) -> BowClassifier {
        let mut rng = SeededRng::new(seed, 0);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let mut r: Vec<f64> = (0..dim - 1).map(|_| rng.normal()).collect();
                r.push(1.0);
                r
            })
            .collect();
        let labels = (0..n).map(|_| if rng.unit() < 0.5 { 1.0 } else { 0.0 }).collect();
        BowClassifier::fit(LabeledData::new(rows, labels).unwrap(), lambda).unwrap()
    }

    #[test]
    fn exact_residual_is_tiny() {
        let clf = random_classifier(3, 40, 6, 0.05);
        let mut rng = SeededRng::new(4, 0);
        let v: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let x = exact_inverse_hvp(&clf, &v).unwrap();
        let hx = clf.hessian() * DVector::from_column_slice(&x);
        let r: f64 = hx.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(r / norm(&v) <= EXACT_RESIDUAL_TOL);
    }

    #[test]
    fn smallest_eigenvalue_at_least_lambda() {
        let clf = random_classifier(5, 30, 5, 0.2);
        let eig = clf.hessian().symmetric_eigen();
        let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(min >= 0.2 - 1e-12);
    }

    #[test]
    fn exact_sampler_converges_to_solve() {
        let clf = random_classifier(7, 50, 5, 0.1);
        let v = vec![0.3, -1.0, 2.0, 0.0, 1.0];
        let exact = exact_inverse_hvp(&clf, &v).unwrap();
        let cfg = HvpConfig {
            depth: 2000,
            sampler: HvpSampler::Exact,
            ..HvpConfig::default()
        };
        let est = stochastic_hvp(&clf, &v, &cfg, &mut SeededRng::new(0, 0)).unwrap();
        assert!(relative_l2_error(&est, &exact) < 1e-6);
    }

    #[test]
    fn zero_vector_maps_to_zero() {
        let clf = random_classifier(8, 20, 4, 0.1);
        let est = stochastic_hvp(&clf, &[0.0; 4], &HvpConfig::default(), &mut SeededRng::new(0, 0)).unwrap();
        assert_eq!(est, vec![0.0; 4]);
    }

    #[test]
    fn too_small_scale_diverges() {
        let clf = random_classifier(9, 20, 4, 0.1);
        let cfg = HvpConfig {
            scale: Some(0.01),
            depth: 500,
            ..HvpConfig::default()
        };
        let err = stochastic_hvp(&clf, &[1.0; 4], &cfg, &mut SeededRng::new(0, 0)).unwrap_err();
        assert!(matches!(err, Error::HvpDiverged { .. }));
        assert!(err.to_string().contains("scale"));
    }
}
