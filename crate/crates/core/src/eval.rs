//! Sequence and token accuracy, plus report files.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::parser::Parser;

fn check_lengths(predictions: usize, golds: usize) -> Result<()> {
    if predictions != golds {
        return Err(Error::shape(
            "accuracy",
            format!("{predictions} predictions vs {golds} golds"),
        ));
    }
    Ok(())
}

/// Fraction of exact whole-sequence matches. EOS is not part of either side.
pub fn sequence_accuracy<S: AsRef<[String]>>(predictions: &[S], golds: &[S]) -> Result<f64> {
    check_lengths(predictions.len(), golds.len())?;
    if golds.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| p.as_ref() == g.as_ref())
        .count();
    Ok(hits as f64 / golds.len() as f64)
}

/// Positions where the prediction agrees with gold, up to the shorter length.
pub fn positional_matches(pred: &[String], gold: &[String]) -> usize {
    pred.iter().zip(gold).filter(|(p, g)| p == g).count()
}

/// Positional matches summed over examples, divided by total gold length.
/// Extra predicted tokens are neither rewarded nor penalized.
pub fn token_accuracy<S: AsRef<[String]>>(predictions: &[S], golds: &[S]) -> Result<f64> {
    check_lengths(predictions.len(), golds.len())?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, g) in predictions.iter().zip(golds) {
        hit += positional_matches(p.as_ref(), g.as_ref());
        total += g.as_ref().len();
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(hit as f64 / total as f64)
}

pub fn config_hash(config_text: &str) -> String {
    let digest = Sha256::digest(config_text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub source: Vec<String>,
    pub gold: Vec<String>,
    pub predicted: Vec<String>,
    /// `write`, `copy` or `cache` per predicted token.
    pub trace: Vec<String>,
    pub exact: bool,
    pub token_matches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub seq_accuracy: f64,
    pub tok_accuracy: f64,
    pub corpus: String,
    pub config_hash: String,
    pub examples: Vec<ExampleRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub seq: f64,
    pub tok: f64,
    pub n: usize,
    pub config_hash: String,
}

impl MetricReport {
    pub fn from_records(
        examples: Vec<ExampleRecord>,
        corpus: impl Into<String>,
        config_hash: impl Into<String>,
    ) -> Result<Self> {
        let preds: Vec<&[String]> = examples.iter().map(|e| e.predicted.as_slice()).collect();
        let golds: Vec<&[String]> = examples.iter().map(|e| e.gold.as_slice()).collect();
        Ok(MetricReport {
            seq_accuracy: sequence_accuracy(&preds, &golds)?,
            tok_accuracy: token_accuracy(&preds, &golds)?,
            corpus: corpus.into(),
            config_hash: config_hash.into(),
            examples,
        })
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            seq: self.seq_accuracy,
            tok: self.tok_accuracy,
            n: self.examples.len(),
            config_hash: self.config_hash.clone(),
        }
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "corpus       {}", self.corpus);
        let _ = writeln!(s, "examples     {}", self.examples.len());
        let _ = writeln!(s, "seq accuracy {:.4}", self.seq_accuracy);
        let _ = writeln!(s, "tok accuracy {:.4}", self.tok_accuracy);
        let mut counts = [0usize; 3];
        for t in self.examples.iter().flat_map(|e| &e.trace) {
            match t.as_str() {
                "write" => counts[0] += 1,
                "copy" => counts[1] += 1,
                _ => counts[2] += 1,
            }
        }
        let _ = writeln!(
            s,
            "emitted      write {}  copy {}  cache {}",
            counts[0], counts[1], counts[2]
        );
        let _ = writeln!(s, "config hash  {}", self.config_hash);
        s
    }

    /// Columns: source, gold, predicted, trace (space-separated tokens each).
    pub fn predictions_tsv(&self) -> String {
        let mut s = String::from("source\tgold\tpredicted\ttrace\n");
        for e in &self.examples {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                e.source.join(" "),
                e.gold.join(" "),
                e.predicted.join(" "),
                e.trace.join(" ")
            );
        }
        s
    }
}

/// Writes `summary.txt`, `metrics.json`, `report.json` and `predictions.tsv`
/// into `dir`, creating it if needed.
pub fn emit_report(report: &MetricReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, body: String| {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))
    };
    write("summary.txt", report.summary())?;
    write("metrics.json", serde_json::to_string_pretty(&report.metrics())? + "\n")?;
    write("report.json", serde_json::to_string(report)?)?;
    write("predictions.tsv", report.predictions_tsv())?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<MetricReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn record_for(parser: &Parser, ex: &crate::data::Example, max_len: usize) -> Result<ExampleRecord> {
    let decoded = parser.decode(&ex.x_surface, max_len)?;
    let gold = ex.target_tokens().to_vec();
    Ok(ExampleRecord {
        exact: decoded.tokens == gold,
        token_matches: positional_matches(&decoded.tokens, &gold),
        trace: decoded.origins.iter().map(|o| o.label().to_string()).collect(),
        source: ex.x_surface.clone(),
        gold,
        predicted: decoded.tokens,
    })
}

/// Greedy-decodes every example of `corpus` and scores the output.
pub fn evaluate(
    parser: &Parser,
    corpus: &Corpus,
    max_len: usize,
    config_hash: &str,
) -> Result<MetricReport> {
    #[cfg(feature = "parallel")]
    let records: Result<Vec<_>> = {
        use rayon::prelude::*;
        corpus
            .examples
            .par_iter()
            .map(|ex| record_for(parser, ex, max_len))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let records: Result<Vec<_>> = corpus
        .examples
        .iter()
        .map(|ex| record_for(parser, ex, max_len))
        .collect();
    MetricReport::from_records(records?, corpus.provenance.to_string(), config_hash)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn identical_lists_score_one() {
        let g = vec![toks("a b c"), toks("d")];
        assert_eq!(sequence_accuracy(&g, &g).unwrap(), 1.0);
        assert_eq!(token_accuracy(&g, &g).unwrap(), 1.0);
    }

    #[test]
    fn empty_predictions_score_zero() {
        let g = vec![toks("a b"), toks("c")];
        let p = vec![vec![], vec![]];
        assert_eq!(sequence_accuracy(&p, &g).unwrap(), 0.0);
        assert_eq!(token_accuracy(&p, &g).unwrap(), 0.0);
    }

    #[test]
    fn two_of_four() {
        let g = vec![toks("a"), toks("b"), toks("c"), toks("d")];
        let p = vec![toks("a"), toks("x"), toks("c"), toks("y")];
        assert_eq!(sequence_accuracy(&p, &g).unwrap(), 0.5);
    }

    #[test]
    fn half_prefix_and_overlong() {
        let g = vec![toks("a b c d")];
        assert_eq!(token_accuracy(&[toks("a b")], &g).unwrap(), 0.5);
        assert_eq!(token_accuracy(&[toks("a b c d e f")], &g).unwrap(), 1.0);
        assert_eq!(sequence_accuracy(&[toks("a b c d e f")], &g).unwrap(), 0.0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let g = vec![toks("a")];
        assert!(sequence_accuracy(&[], &g).is_err());
        assert!(token_accuracy(&[], &g).is_err());
    }

    fn sample_report() -> MetricReport {
        let rec = ExampleRecord {
            source: toks("meetings on the date of my birthday"),
            gold: toks("( date birthday )"),
            predicted: toks("( date birthday )"),
            trace: toks("write cache copy write"),
            exact: true,
            token_matches: 4,
        };
        MetricReport::from_records(vec![rec], "overnight:calendar", config_hash("x = 1\n")).unwrap()
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let report = sample_report();
        emit_report(&report, dir.path()).unwrap();
        let tsv = std::fs::read_to_string(dir.path().join("predictions.tsv")).unwrap();
        let rows: Vec<&str> = tsv.lines().skip(1).collect();
        assert_eq!(rows.len(), 1);
        let trace: Vec<&str> = rows[0].split('\t').nth(3).unwrap().split(' ').collect();
        let pred: Vec<&str> = rows[0].split('\t').nth(2).unwrap().split(' ').collect();
        let date = pred.iter().position(|t| *t == "date").unwrap();
        assert_eq!(trace[date], "cache");

        let back = read_report(&dir.path().join("report.json")).unwrap();
        assert_eq!(back, report);

        let metrics: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap())
                .unwrap();
        let keys: Vec<&str> = metrics.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        assert_eq!(keys.len(), 4);
        for k in ["seq", "tok", "n", "config_hash"] {
            assert!(keys.contains(&k));
        }
        assert_eq!(metrics["n"], 1);
    }

    #[test]
    fn unwritable_path_errors() {
        let file = tempfile::NamedTempFile::new().unwrap();
        assert!(emit_report(&sample_report(), &file.path().join("sub")).is_err());
    }

    #[test]
    fn config_hash_is_stable() {
        assert_eq!(config_hash("a"), config_hash("a"));
        assert_ne!(config_hash("a"), config_hash("b"));
        assert_eq!(config_hash("").len(), 64);
    }

    fn seqs() -> impl Strategy<Value = Vec<(Vec<String>, Vec<String>)>> {
        let tok = prop::sample::select(vec!["a", "b", "c"]).prop_map(String::from);
        let seq = prop::collection::vec(tok, 0..5);
        prop::collection::vec((seq.clone(), seq), 1..8)
    }

    proptest! {
        #[test]
        fn metrics_are_permutation_invariant(pairs in seqs(), rot in 0usize..8) {
            let (p, g): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
            let mut rotated = pairs.clone();
            let k = rot % rotated.len();
            rotated.rotate_left(k);
            let (rp, rg): (Vec<_>, Vec<_>) = rotated.into_iter().unzip();
            prop_assert_eq!(sequence_accuracy(&p, &g).unwrap(), sequence_accuracy(&rp, &rg).unwrap());
            let a = token_accuracy(&p, &g).unwrap();
            let b = token_accuracy(&rp, &rg).unwrap();
            prop_assert!((a - b).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn self_match_is_perfect(pairs in seqs()) {
            let g: Vec<Vec<String>> = pairs.into_iter().map(|(_, g)| g).filter(|g| !g.is_empty()).collect();
            prop_assume!(!g.is_empty());
            prop_assert_eq!(token_accuracy(&g, &g).unwrap(), 1.0);
        }
    }
}
