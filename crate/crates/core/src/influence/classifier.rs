use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numcore::ops::{dot, sigmoid};

/// Gradient-norm target for the Newton solve.
pub const OPTIMALITY_TOL: f64 = 1e-8;
const MAX_NEWTON_STEPS: usize = 100;

/// Bag-of-words feature index over utterance tokens.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureMap {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl FeatureMap {
    /// Features in first-seen order.
    pub fn build<'a, I, S>(utterances: I) -> Self
    where
        I: IntoIterator<Item = &'a S>,
        S: AsRef<[String]> + 'a + ?Sized,
    {
        let mut map = FeatureMap::default();
        for u in utterances {
            for tok in u.as_ref() {
                if !map.index.contains_key(tok) {
                    map.index.insert(tok.clone(), map.names.len());
                    map.names.push(tok.clone());
                }
            }
        }
        map
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    /// Token counts followed by a constant bias feature. Unknown tokens are ignored.
    pub fn featurize(&self, tokens: &[String]) -> Vec<f64> {
        let mut row = vec![0.0; self.len() + 1];
        for t in tokens {
            if let Some(&i) = self.index.get(t) {
                row[i] += 1.0;
            }
        }
        row[self.len()] = 1.0;
        row
    }
}

/// Dense design matrix with 0/1 labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledData {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
}

impl LabeledData {
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<f64>) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::shape(
                "labeled data",
                format!("{} rows vs {} labels", rows.len(), labels.len()),
            ));
        }
        if let Some(w) = rows.first().map(Vec::len) {
            if let Some(bad) = rows.iter().position(|r| r.len() != w) {
                return Err(Error::shape(
                    "labeled data",
                    format!("row {bad} has {} columns, expected {w}", rows[bad].len()),
                ));
            }
        }
        Ok(LabeledData { rows, labels })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// L2-regularized logistic regression. The bias is the last weight and is
/// regularized like the rest, so the Hessian is at least `λI`.
#[derive(Debug, Clone, PartialEq)]
pub struct BowClassifier {
    pub features: FeatureMap,
    pub theta: Vec<f64>,
    pub lambda: f64,
    pub data: LabeledData,
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn log_loss(theta: &[f64], row: &[f64], label: f64) -> f64 {
    let z = dot(theta, row);
    softplus(z) - label * z
}

/// `∇_θ` of the unregularized log loss of one example.
pub fn loss_gradient(theta: &[f64], row: &[f64], label: f64) -> Vec<f64> {
    let r = sigmoid(dot(theta, row)) - label;
    row.iter().map(|x| r * x).collect()
}

struct Objective<'a> {
    data: &'a LabeledData,
    weights: Option<&'a [f64]>,
    lambda: f64,
}

impl Objective<'_> {
    fn weight(&self, i: usize) -> f64 {
        self.weights.map_or(1.0, |w| w[i])
    }

    fn norm(&self) -> f64 {
        self.data.len().max(1) as f64
    }

    fn value(&self, theta: &[f64]) -> f64 {
        let data: f64 = (0..self.data.len())
            .map(|i| self.weight(i) * log_loss(theta, &self.data.rows[i], self.data.labels[i]))
            .sum();
        data / self.norm() + 0.5 * self.lambda * dot(theta, theta)
    }

    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let mut g: Vec<f64> = theta.iter().map(|t| self.lambda * t).collect();
        let n = self.norm();
        for i in 0..self.data.len() {
            let w = self.weight(i);
            if w == 0.0 {
                continue;
            }
            let r = w * (sigmoid(dot(theta, &self.data.rows[i])) - self.data.labels[i]) / n;
            for (gj, x) in g.iter_mut().zip(&self.data.rows[i]) {
                *gj += r * x;
            }
        }
        g
    }

    fn hessian(&self, theta: &[f64]) -> DMatrix<f64> {
        let dim = theta.len();
        let mut h = DMatrix::<f64>::identity(dim, dim) * self.lambda;
        let n = self.norm();
        for i in 0..self.data.len() {
            let w = self.weight(i);
            if w == 0.0 {
                continue;
            }
            let row = &self.data.rows[i];
            let p = sigmoid(dot(theta, row));
            let c = w * p * (1.0 - p) / n;
            let x = DVector::from_column_slice(row);
            h.ger(c, &x, &x, 1.0);
        }
        h
    }
}

/// Damped Newton with backtracking, to `‖∇J‖ ≤ OPTIMALITY_TOL`.
fn newton(obj: &Objective, mut theta: Vec<f64>) -> Result<Vec<f64>> {
    let mut grad = obj.gradient(&theta);
    let mut gnorm = dot(&grad, &grad).sqrt();
    let mut value = obj.value(&theta);
    for _ in 0..MAX_NEWTON_STEPS {
        if gnorm <= OPTIMALITY_TOL {
            return Ok(theta);
        }
        let h = obj.hessian(&theta);
        let chol = h.cholesky().ok_or(Error::Singular { pivot: 0.0 })?;
        let step = chol.solve(&DVector::from_column_slice(&grad));
        let decrement = dot(step.as_slice(), &grad);
        let mut t = 1.0;
        let mut next;
        loop {
            next = theta
                .iter()
                .zip(step.iter())
                .map(|(a, s)| a - t * s)
                .collect::<Vec<_>>();
            let v = obj.value(&next);
            if v <= value - 0.25 * t * decrement || t < 1e-10 {
                value = v;
                break;
            }
            t *= 0.5;
        }
        theta = next;
        grad = obj.gradient(&theta);
        gnorm = dot(&grad, &grad).sqrt();
    }
    if gnorm <= OPTIMALITY_TOL {
        return Ok(theta);
    }
    Err(Error::NotConverged {
        what: "logistic regression",
        iterations: MAX_NEWTON_STEPS,
        residual: gnorm,
    })
}

impl BowClassifier {
    /// Fits to an arbitrary dense problem (last column is taken as the bias).
    pub fn fit(data: LabeledData, lambda: f64) -> Result<Self> {
        Self::fit_weighted(data, lambda, None, None)
    }

    /// Per-example weights keep the `1/n` normalization of the unweighted
    /// objective, so a zero weight is exactly leave-one-out with everything
    /// else unchanged.
    pub fn fit_weighted(
        data: LabeledData,
        lambda: f64,
        weights: Option<&[f64]>,
        warm_start: Option<&[f64]>,
    ) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::Config(format!("L2 strength must be > 0, got {lambda}")));
        }
        if data.is_empty() {
            return Err(Error::Empty("classifier training data".into()));
        }
        if let Some(w) = weights {
            if w.len() != data.len() {
                return Err(Error::shape("example weights", format!("{} vs {}", w.len(), data.len())));
            }
        }
        let dim = data.rows[0].len();
        let init = warm_start.map_or_else(|| vec![0.0; dim], <[f64]>::to_vec);
        let theta = newton(
            &Objective {
                data: &data,
                weights,
                lambda,
            },
            init,
        )?;
        Ok(BowClassifier {
            features: FeatureMap::default(),
            theta,
            lambda,
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        sigmoid(dot(&self.theta, row))
    }

    pub fn accuracy(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let hits = self
            .data
            .rows
            .iter()
            .zip(&self.data.labels)
            .filter(|(r, &y)| (self.predict(r) >= 0.5) == (y >= 0.5))
            .count();
        hits as f64 / self.data.len() as f64
    }

    fn objective(&self) -> Objective<'_> {
        Objective {
            data: &self.data,
            weights: None,
            lambda: self.lambda,
        }
    }

    /// Gradient of the full regularized objective at `theta`.
    pub fn objective_gradient(&self) -> Vec<f64> {
        self.objective().gradient(&self.theta)
    }

    /// `(1/n) Σ p(1−p) x xᵀ + λI` at the fitted weights.
    pub fn hessian(&self) -> DMatrix<f64> {
        self.objective().hessian(&self.theta)
    }

    /// Mean unregularized log loss and its gradient over `(rows, labels)`.
    pub fn mean_loss(&self, theta: &[f64], rows: &[Vec<f64>], labels: &[f64]) -> f64 {
        let n = rows.len().max(1) as f64;
        rows.iter().zip(labels).map(|(r, &y)| log_loss(theta, r, y)).sum::<f64>() / n
    }

    pub fn mean_loss_gradient(&self, rows: &[Vec<f64>], labels: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        let n = rows.len().max(1) as f64;
        for (r, &y) in rows.iter().zip(labels) {
            for (gj, v) in g.iter_mut().zip(loss_gradient(&self.theta, r, y)) {
                *gj += v / n;
            }
        }
        g
    }
}

/// Domain classifier: `domain_a` utterances labeled 1, `domain_b` labeled 0.
pub fn train_classifier(
    domain_a: &[Vec<String>],
    domain_b: &[Vec<String>],
    lambda: f64,
) -> Result<BowClassifier> {
    if domain_a.is_empty() || domain_b.is_empty() {
        return Err(Error::Empty("both domains need at least one example".into()));
    }
    let features = FeatureMap::build(domain_a.iter().chain(domain_b));
    let mut rows = Vec::with_capacity(domain_a.len() + domain_b.len());
    let mut labels = Vec::with_capacity(rows.capacity());
    for u in domain_a {
        rows.push(features.featurize(u));
        labels.push(1.0);
    }
    for u in domain_b {
        rows.push(features.featurize(u));
        labels.push(0.0);
    }
    let mut clf = BowClassifier::fit(LabeledData::new(rows, labels)?, lambda)?;
    clf.features = features;
    Ok(clf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn utt(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn separable_toy_is_fit_exactly() {
        let a = vec![utt("aa aa"), utt("aa"), utt("aa x")];
        let b = vec![utt("bb"), utt("bb bb x"), utt("bb")];
        let clf = train_classifier(&a, &b, 1e-3).unwrap();
        assert_eq!(clf.accuracy(), 1.0);
        let g = clf.objective_gradient();
        assert!(dot(&g, &g).sqrt() <= OPTIMALITY_TOL);
    }

    #[test]
    fn heavy_regularization_shrinks_to_chance() {
        let a = vec![utt("aa"), utt("aa aa")];
        let b = vec![utt("bb")];
        let clf = train_classifier(&a, &b, 1e9).unwrap();
        assert!(clf.theta.iter().all(|t| t.abs() < 1e-8));
        for r in &clf.data.rows {
            assert!((clf.predict(r) - 0.5).abs() < 1e-8);
        }
    }

    #[test]
    fn empty_domain_is_an_error() {
        assert!(train_classifier(&[utt("aa")], &[], 1.0).is_err());
        assert!(train_classifier(&[], &[utt("aa")], 1.0).is_err());
    }

    #[test]
    fn nonpositive_lambda_is_rejected() {
        let data = LabeledData::new(vec![vec![1.0, 1.0]], vec![1.0]).unwrap();
        assert!(BowClassifier::fit(data.clone(), 0.0).is_err());
        assert!(BowClassifier::fit(data, -1.0).is_err());
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let data = LabeledData::new(
            vec![vec![1.0, 0.0, 1.0], vec![0.5, 2.0, 1.0], vec![0.0, 1.0, 1.0]],
            vec![1.0, 0.0, 1.0],
        )
        .unwrap();
        let obj = Objective {
            data: &data,
            weights: None,
            lambda: 0.1,
        };
        let theta = vec![0.3, -0.2, 0.1];
        let g = obj.gradient(&theta);
        let h = obj.hessian(&theta);
        let eps = 1e-6;
        for j in 0..3 {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[j] += eps;
            tm[j] -= eps;
            let num = (obj.value(&tp) - obj.value(&tm)) / (2.0 * eps);
            assert!((num - g[j]).abs() < 1e-8, "grad {j}");
            let gp = obj.gradient(&tp);
            let gm = obj.gradient(&tm);
            for i in 0..3 {
                let num = (gp[i] - gm[i]) / (2.0 * eps);
                assert!((num - h[(i, j)]).abs() < 1e-7, "hess {i},{j}");
            }
        }
    }

    #[test]
    fn featurize_counts_and_bias() {
        let fm = FeatureMap::build([utt("a b"), utt("b c")].iter());
        assert_eq!(fm.len(), 3);
        assert_eq!(fm.featurize(&utt("b b zz")), vec![0.0, 2.0, 0.0, 1.0]);
    }
}
