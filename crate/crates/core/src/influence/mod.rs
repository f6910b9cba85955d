//! Influence-based cross-domain example selection.
//!
//! A convex bag-of-words domain classifier stands in for the parser so the
//! inverse Hessian can be computed exactly and used to check the stochastic
//! estimator.

mod classifier;
mod hvp;
mod select;
mod sweep;

pub use classifier::{
    log_loss, loss_gradient, train_classifier, BowClassifier, FeatureMap, LabeledData,
    OPTIMALITY_TOL,
};
pub use hvp::{
    auto_scale, exact_inverse_hvp, relative_l2_error, stochastic_hvp, HvpConfig, HvpSampler,
    DIVERGENCE_RATIO, EXACT_RESIDUAL_TOL,
};
pub use select::{
    sample_by_counts, scores_to_jsonl, select_influential, HvpMethod, InfluenceScore, Selection,
    SelectionConfig,
};
pub use sweep::{augment_and_sweep, domain_affinity, sweep_csv, DomainGain, Metric, SweepPoint};

use crate::error::Result;
use crate::numcore::ops::dot;
use crate::numcore::SeededRng;

/// `H^{-1} ∇L(test)` by the requested method.
pub fn inverse_hvp_test(
    clf: &BowClassifier,
    test: &LabeledData,
    method: HvpMethod,
    config: &HvpConfig,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    let g = clf.mean_loss_gradient(&test.rows, &test.labels);
    match method {
        HvpMethod::Exact => exact_inverse_hvp(clf, &g),
        HvpMethod::Stochastic => stochastic_hvp(clf, &g, config, rng),
    }
}

/// `−∇L(test)ᵀ H^{-1} ∇ℓ(z)` given a precomputed `s_test = H^{-1} ∇L(test)`.
pub fn score_with(clf: &BowClassifier, s_test: &[f64], row: &[f64], label: f64) -> f64 {
    -dot(s_test, &loss_gradient(&clf.theta, row, label))
}

/// Up-weighting influence of `(row, label)` on the mean loss over `test`.
/// Positive means up-weighting the example would raise the test loss.
pub fn influence_score(
    clf: &BowClassifier,
    row: &[f64],
    label: f64,
    test: &LabeledData,
    method: HvpMethod,
    config: &HvpConfig,
    rng: &mut SeededRng,
) -> Result<f64> {
    let s = inverse_hvp_test(clf, test, method, config, rng)?;
    Ok(score_with(clf, &s, row, label))
}

/// Test-loss effect of each training example in `ids`: the loss at the
/// fitted weights minus the loss after refitting without it. The `1/n`
/// normalization is kept, so influence predicts this as `score / n`.
pub fn leave_one_out_effects(
    clf: &BowClassifier,
    test: &LabeledData,
    ids: &[usize],
) -> Result<Vec<f64>> {
    let base = clf.mean_loss(&clf.theta, &test.rows, &test.labels);
    let one = |&id: &usize| -> Result<f64> {
        let mut w = vec![1.0; clf.data.len()];
        w[id] = 0.0;
        let refit = BowClassifier::fit_weighted(clf.data.clone(), clf.lambda, Some(&w), Some(&clf.theta))?;
        Ok(base - clf.mean_loss(&refit.theta, &test.rows, &test.labels))
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        ids.par_iter().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        ids.iter().map(one).collect()
    }
}

/// Average ranks, ties sharing the mean of their positions.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &k in &order[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Spearman rank correlation (Pearson on tie-averaged ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman needs equal lengths");
    pearson(&ranks(a), &ranks(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![1.5, 0.0, 1.5]);
        // monotone transform leaves it unchanged
        let a = [0.3, -1.0, 2.0, 0.7];
        let b: Vec<f64> = a.iter().map(|x: &f64| x.exp()).collect();
        assert!((spearman(&a, &b) - 1.0).abs() < 1e-12);
    }

    fn utt(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn disjoint_features_have_no_influence() {
        let a = vec![utt("aa"), utt("aa aa")];
        let b = vec![utt("bb"), utt("bb cc")];
        let clf = train_classifier(&a, &b, 1e3).unwrap();
        // A test row touching only "aa" and a training row touching only "cc",
        // both without the bias column.
        let mut test_row = vec![0.0; clf.dim()];
        test_row[0] = 1.0;
        let mut z = vec![0.0; clf.dim()];
        z[2] = 1.0;
        let test = LabeledData::new(vec![test_row], vec![1.0]).unwrap();
        let s = influence_score(&clf, &z, 0.0, &test, HvpMethod::Exact, &HvpConfig::default(), &mut SeededRng::new(0, 0)).unwrap();
        assert!(s.abs() < 1e-9, "{s}");
    }

    #[test]
    fn self_influence_is_negative() {
        let a: Vec<_> = ["aa x", "aa y", "aa", "x y aa"].iter().map(|s| utt(s)).collect();
        let b: Vec<_> = ["bb y", "bb", "bb x", "x bb bb"].iter().map(|s| utt(s)).collect();
        let clf = train_classifier(&a, &b, 0.1).unwrap();
        for (row, &label) in clf.data.rows.iter().zip(&clf.data.labels) {
            let test = LabeledData::new(vec![row.clone()], vec![label]).unwrap();
            let s = influence_score(&clf, row, label, &test, HvpMethod::Exact, &HvpConfig::default(), &mut SeededRng::new(0, 0)).unwrap();
            assert!(s < 0.0);
        }
    }

    #[test]
    fn duplicates_score_identically() {
        let a = vec![utt("aa x"), utt("aa")];
        let b = vec![utt("bb x"), utt("bb x"), utt("bb")];
        let clf = train_classifier(&a, &b, 0.1).unwrap();
        let test = LabeledData::new(clf.data.rows[..2].to_vec(), vec![1.0, 1.0]).unwrap();
        let s = inverse_hvp_test(&clf, &test, HvpMethod::Exact, &HvpConfig::default(), &mut SeededRng::new(0, 0)).unwrap();
        let s2 = score_with(&clf, &s, &clf.data.rows[2], 0.0);
        let s3 = score_with(&clf, &s, &clf.data.rows[3], 0.0);
        assert_eq!(s2, s3);
    }
}
