//! Browser demo: a small parser trained in the page, the stochastic
//! inverse-HVP converging to the exact solve, and influence scores against
//! leave-one-out retraining.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use logicache::data::{parse_pairs, Corpus, Preprocess, Provenance, RawPair};
use logicache::decoder::{resolve, Segment};
use logicache::influence::{
    exact_inverse_hvp, inverse_hvp_test, leave_one_out_effects, relative_l2_error, score_with,
    spearman, stochastic_hvp, BowClassifier, HvpConfig, HvpMethod,
};
use logicache::numcore::SeededRng;
use logicache::parser::Parser;
use logicache::synth::{calendar_pair, logistic_problem, logistic_split};
use logicache::training::{train_with, TrainConfig};

const GEOQUERY_SAMPLE: &str = include_str!("../../../data/geoquery/sample.tsv");

fn err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn corpus_pairs(name: &str, seed: u64) -> Result<Vec<RawPair>, JsError> {
    match name {
        "geoquery" => {
            let pre = Preprocess {
                debruijn: true,
                ..Preprocess::default()
            };
            Ok(pre.apply_all(&parse_pairs(GEOQUERY_SAMPLE, "sample.tsv").map_err(err)?))
        }
        "calendar" => {
            let mut rng = SeededRng::new(seed, 7);
            Ok((0..40).map(|_| calendar_pair(&mut rng)).collect())
        }
        other => Err(JsError::new(&format!("unknown corpus {other:?}"))),
    }
}

/// A parser trained in the page on one of the built-in corpora.
#[wasm_bindgen]
pub struct Explorer {
    parser: Parser,
    losses: Vec<f64>,
    utterances: Vec<String>,
}

#[wasm_bindgen]
impl Explorer {
    #[wasm_bindgen(constructor)]
    pub fn new(
        corpus: &str,
        cache_fn: &str,
        hidden: usize,
        epochs: usize,
        lr_decay: f64,
        seed: u32,
    ) -> Result<Explorer, JsError> {
        let seed = u64::from(seed);
        let pairs = corpus_pairs(corpus, seed)?;
        let corpus = Corpus::from_pairs(&pairs, Provenance::Other(corpus.into()));
        let mut cfg = TrainConfig::default();
        cfg.model.cache = cache_fn.parse().map_err(err)?;
        cfg.model.hidden = hidden;
        cfg.model.embed = hidden;
        cfg.epochs = epochs;
        cfg.lr_decay = lr_decay;
        cfg.seed = seed;
        let (parser, report) = train_with(&corpus, &cfg, None, |_| {}).map_err(err)?;
        Ok(Explorer {
            parser,
            losses: report.epoch_loss,
            utterances: pairs.iter().map(|p| p.source.join(" ")).collect(),
        })
    }

    /// Mean training loss per epoch.
    pub fn losses(&self) -> Vec<f64> {
        self.losses.clone()
    }

    /// Training utterances as a JSON array of strings.
    pub fn utterances(&self) -> String {
        json!(self.utterances).to_string()
    }

    /// Greedy decode with the full joint distribution at every step.
    ///
    /// Returns `{tokens, steps: [{token, segment, mass: {write, copy, cache},
    /// top: [{token, segment, p}]}]}`; the last step is the end-of-sequence
    /// decision unless the output was truncated.
    pub fn decode(&self, utterance: &str, top: usize) -> Result<String, JsError> {
        let source: Vec<String> = utterance.split_whitespace().map(String::from).collect();
        if source.is_empty() {
            return Err(JsError::new("empty utterance"));
        }
        let p = &self.parser;
        let decoded = p.decode(&source, 40).map_err(err)?;
        // Teacher forcing on the greedy output replays the decoder states.
        let replay = Corpus::with_vocab(
            &[RawPair {
                source: source.clone(),
                target: decoded.tokens.clone(),
                line: 0,
            }],
            &p.src_vocab,
            &p.tgt_vocab,
            Provenance::Other("demo".into()),
        );
        let dists = p.step_distributions(&replay.examples[0]).map_err(err)?;
        let steps: Vec<Value> = dists
            .iter()
            .enumerate()
            .map(|(j, d)| {
                let name = |s: Segment| resolve(s, &source, &p.src_vocab, &p.tgt_vocab).to_string();
                let mut order: Vec<usize> = (0..d.probs.len()).collect();
                order.sort_by(|&a, &b| d.probs[b].total_cmp(&d.probs[a]));
                let top: Vec<Value> = order
                    .iter()
                    .take(top)
                    .map(|&i| {
                        let s = d.layout.segment(i);
                        json!({"token": name(s), "segment": s.label(), "p": d.probs[i]})
                    })
                    .collect();
                let best = d.best();
                json!({
                    "token": if j < decoded.tokens.len() { decoded.tokens[j].clone() } else { name(best) },
                    "segment": best.label(),
                    "mass": {
                        "write": d.write().iter().sum::<f64>(),
                        "copy": d.copy().iter().sum::<f64>(),
                        "cache": d.cache().iter().sum::<f64>(),
                    },
                    "top": top,
                })
            })
            .collect();
        Ok(json!({"tokens": decoded.tokens, "truncated": decoded.truncated, "steps": steps}).to_string())
    }
}

/// Relative L2 error of the stochastic inverse-HVP against the exact solve
/// after each recursion depth in `depths`, on a random logistic problem.
#[wasm_bindgen]
pub fn hvp_curve(
    n: usize,
    features: usize,
    lambda: f64,
    depths: Vec<usize>,
    averages: usize,
    seed: u32,
) -> Result<String, JsError> {
    let seed = u64::from(seed);
    let data = logistic_problem(n, features, 0.1, seed).map_err(err)?;
    let clf = BowClassifier::fit(data, lambda).map_err(err)?;
    let mut rng = SeededRng::new(seed, 1);
    let v: Vec<f64> = (0..clf.dim()).map(|_| rng.normal()).collect();
    let exact = exact_inverse_hvp(&clf, &v).map_err(err)?;
    let streams = SeededRng::new(seed, 2);
    let mut errors = Vec::with_capacity(depths.len());
    for &depth in &depths {
        let cfg = HvpConfig {
            depth,
            ..HvpConfig::default()
        };
        // One stream per averaged recursion, reused at every depth, so a
        // deeper run extends the shallower one instead of redrawing it.
        let mut mean = vec![0.0; v.len()];
        for a in 0..averages.max(1) {
            let est = stochastic_hvp(&clf, &v, &cfg, &mut streams.fork(a as u64)).map_err(err)?;
            for (m, e) in mean.iter_mut().zip(est) {
                *m += e / averages.max(1) as f64;
            }
        }
        errors.push(relative_l2_error(&mean, &exact));
    }
    Ok(json!({"depths": depths, "errors": errors}).to_string())
}

/// Predicted (`score / n`) against actual leave-one-out test-loss changes.
#[wasm_bindgen]
pub fn influence_vs_loo(n: usize, features: usize, lambda: f64, seed: u32) -> Result<String, JsError> {
    let seed = u64::from(seed);
    let (train, test) = logistic_split(n, 40, features, 0.3, seed).map_err(err)?;
    let clf = BowClassifier::fit(train, lambda).map_err(err)?;
    let s = inverse_hvp_test(&clf, &test, HvpMethod::Exact, &HvpConfig::default(), &mut SeededRng::new(seed, 0))
        .map_err(err)?;
    let ids: Vec<usize> = (0..clf.data.len()).collect();
    let scores: Vec<f64> = ids
        .iter()
        .map(|&i| score_with(&clf, &s, &clf.data.rows[i], clf.data.labels[i]))
        .collect();
    let loo = leave_one_out_effects(&clf, &test, &ids).map_err(err)?;
    let points: Vec<[f64; 2]> = scores.iter().zip(&loo).map(|(s, l)| [s / n as f64, *l]).collect();
    Ok(json!({"points": points, "spearman": spearman(&scores, &loo)}).to_string())
}
