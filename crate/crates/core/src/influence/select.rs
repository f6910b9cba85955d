use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::classifier::{train_classifier, LabeledData};
use super::hvp::{exact_inverse_hvp, stochastic_hvp, HvpConfig};
use super::score_with;
use crate::data::RawPair;
use crate::error::{Error, Result};
use crate::numcore::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum HvpMethod {
    Exact,
    #[default]
    Stochastic,
}

impl std::str::FromStr for HvpMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(HvpMethod::Exact),
            "stochastic" | "lissa" => Ok(HvpMethod::Stochastic),
            _ => Err(Error::Config(format!("unknown hvp method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub hvp: HvpConfig,
    pub method: HvpMethod,
    /// L2 strength of the domain classifier.
    pub lambda: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            hvp: HvpConfig::default(),
            method: HvpMethod::Stochastic,
            lambda: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceScore {
    /// Index into the source-domain list.
    pub id: usize,
    /// Mean score over repetitions.
    pub score: f64,
    /// Repetitions in which the example was in the top k.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub scores: Vec<InfluenceScore>,
    pub sampled: Vec<usize>,
    /// How many of `sampled` were drawn uniformly after the nonzero counts ran out.
    pub uniform_fill: usize,
}

/// Indices of the `k` largest scores; ties go to the lower index.
fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Draws `k` distinct ids with probability proportional to `counts`,
/// sequentially without replacement. When fewer than `k` ids have nonzero
/// counts the rest are drawn uniformly from the remaining ids.
pub fn sample_by_counts(counts: &[usize], k: usize, rng: &mut SeededRng) -> (Vec<usize>, usize) {
    let k = k.min(counts.len());
    let mut weighted: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] > 0).collect();
    let mut out = Vec::with_capacity(k);
    while out.len() < k && !weighted.is_empty() {
        let total: usize = weighted.iter().map(|&i| counts[i]).sum();
        let mut u = rng.below(total);
        let mut pick = weighted.len() - 1;
        for (pos, &i) in weighted.iter().enumerate() {
            if u < counts[i] {
                pick = pos;
                break;
            }
            u -= counts[i];
        }
        out.push(weighted.remove(pick));
    }
    let fill = k - out.len();
    if fill > 0 {
        log::warn!("only {} examples have nonzero counts; drawing {fill} uniformly", out.len());
        let mut rest: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] == 0).collect();
        rng.shuffle(&mut rest);
        out.extend(rest.into_iter().take(fill));
    }
    (out, fill)
}

/// Scores every source example against the target domain, counts top-k
/// membership over independent HVP repetitions, and samples by count.
pub fn select_influential(
    source: &[RawPair],
    target: &[RawPair],
    config: &SelectionConfig,
    rng: &SeededRng,
) -> Result<Selection> {
    config.hvp.validate()?;
    let tgt: Vec<Vec<String>> = target.iter().map(|p| p.source.clone()).collect();
    let src: Vec<Vec<String>> = source.iter().map(|p| p.source.clone()).collect();
    let clf = train_classifier(&tgt, &src, config.lambda)?;
    log::info!(
        "domain classifier: {} features, training accuracy {:.4}",
        clf.features.len(),
        clf.accuracy()
    );

    let n_tgt = tgt.len();
    let test = LabeledData::new(clf.data.rows[..n_tgt].to_vec(), vec![1.0; n_tgt])?;
    let g_test = clf.mean_loss_gradient(&test.rows, &test.labels);
    let candidates = &clf.data.rows[n_tgt..];
    let k = config.hvp.top_k.min(source.len());

    let score_all = |s: &[f64]| -> Vec<f64> {
        candidates.iter().map(|row| score_with(&clf, s, row, 0.0)).collect()
    };
    let reps = config.hvp.repetitions;
    let per_rep: Vec<Vec<f64>> = match config.method {
        HvpMethod::Exact => {
            let scores = score_all(&exact_inverse_hvp(&clf, &g_test)?);
            vec![scores; reps]
        }
        HvpMethod::Stochastic => {
            let hvp_rng = rng.fork(0);
            let one = |r: usize| -> Result<Vec<f64>> {
                let s = stochastic_hvp(&clf, &g_test, &config.hvp, &mut hvp_rng.fork(r as u64))?;
                Ok(score_all(&s))
            };
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                (0..reps).into_par_iter().map(one).collect::<Result<_>>()?
            }
            #[cfg(not(feature = "parallel"))]
            {
                (0..reps).map(one).collect::<Result<_>>()?
            }
        }
    };

    let mut counts = vec![0usize; source.len()];
    let mut sums = vec![0.0; source.len()];
    for scores in &per_rep {
        for id in top_k(scores, k) {
            counts[id] += 1;
        }
        for (s, v) in sums.iter_mut().zip(scores) {
            *s += v;
        }
    }
    let scores = (0..source.len())
        .map(|id| InfluenceScore {
            id,
            score: sums[id] / reps as f64,
            count: counts[id],
        })
        .collect();

    let mut sample_rng = rng.fork(1);
    let (sampled, uniform_fill) = sample_by_counts(&counts, config.hvp.sample_size, &mut sample_rng);
    Ok(Selection {
        scores,
        sampled,
        uniform_fill,
    })
}

pub fn scores_to_jsonl(scores: &[InfluenceScore]) -> Result<String> {
    let mut s = String::new();
    for sc in scores {
        let _ = writeln!(s, "{}", serde_json::to_string(sc)?);
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_breaks_ties_by_index() {
        assert_eq!(top_k(&[1.0, 3.0, 3.0, 2.0], 2), vec![1, 2]);
        assert_eq!(top_k(&[1.0], 5), vec![0]);
    }

    #[test]
    fn uniform_counts_sample_the_whole_set() {
        let counts = [0, 1, 1, 0, 1];
        let (s, fill) = sample_by_counts(&counts, 3, &mut SeededRng::new(1, 0));
        let mut s2 = s.clone();
        s2.sort();
        assert_eq!(s2, vec![1, 2, 4]);
        assert_eq!(fill, 0);
    }

    #[test]
    fn fill_is_uniform_over_zero_counts() {
        let counts = [0, 5, 0, 0];
        let (s, fill) = sample_by_counts(&counts, 3, &mut SeededRng::new(2, 0));
        assert_eq!(fill, 2);
        assert_eq!(s[0], 1);
        let mut sorted = s.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 3);
    }

    #[test]
    fn max_count_example_is_always_sampled() {
        // One example in the top k every time, others rarely.
        let mut counts = vec![3usize; 50];
        counts[17] = 1000;
        let base = SeededRng::new(11, 0);
        let mut hits = 0;
        for run in 0..200 {
            let (s, _) = sample_by_counts(&counts, 10, &mut base.fork(run));
            if s.contains(&17) {
                hits += 1;
            }
        }
        assert_eq!(hits, 200);
    }

    #[test]
    fn sampling_frequency_follows_counts() {
        let counts = [1usize, 3];
        let base = SeededRng::new(3, 0);
        let first_is_1 = (0..4000)
            .filter(|&r| sample_by_counts(&counts, 1, &mut base.fork(r)).0[0] == 1)
            .count();
        let p = first_is_1 as f64 / 4000.0;
        assert!((p - 0.75).abs() < 0.03, "{p}");
    }

    #[test]
    fn method_parsing() {
        assert_eq!("exact".parse::<HvpMethod>().unwrap(), HvpMethod::Exact);
        assert_eq!("stochastic".parse::<HvpMethod>().unwrap(), HvpMethod::Stochastic);
        assert!("x".parse::<HvpMethod>().is_err());
    }
}
