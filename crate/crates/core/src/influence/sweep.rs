use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Provenance, RawPair};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricReport};
use crate::training::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Seq,
    Tok,
}

impl Metric {
    pub fn of(self, report: &MetricReport) -> f64 {
        match self {
            Metric::Seq => report.seq_accuracy,
            Metric::Tok => report.tok_accuracy,
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq" => Ok(Metric::Seq),
            "tok" => Ok(Metric::Tok),
            _ => Err(Error::Config(format!("unknown metric {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n: usize,
    pub seq: f64,
    pub tok: f64,
}

fn train_and_score(
    train_pairs: &[RawPair],
    test_pairs: &[RawPair],
    config: &TrainConfig,
    provenance: &Provenance,
) -> Result<MetricReport> {
    let train_corpus = Corpus::from_pairs(train_pairs, provenance.clone());
    let (parser, _) = train(&train_corpus, config)?;
    let test_corpus = Corpus::with_vocab(
        test_pairs,
        &train_corpus.src_vocab,
        &train_corpus.tgt_vocab,
        provenance.clone(),
    );
    evaluate(&parser, &test_corpus, config.max_len, "")
}

/// For each `n` in `steps`, trains on `target_train` plus the first `n`
/// selected pairs and scores on `target_test`. Steps beyond the selection
/// are clamped to its length.
pub fn augment_and_sweep(
    target_train: &[RawPair],
    target_test: &[RawPair],
    selected: &[RawPair],
    steps: &[usize],
    config: &TrainConfig,
    provenance: &Provenance,
) -> Result<Vec<SweepPoint>> {
    let one = |&n: &usize| -> Result<SweepPoint> {
        if n > selected.len() {
            log::warn!("step {n} exceeds the {} selected examples; using all", selected.len());
        }
        let mut pairs = target_train.to_vec();
        pairs.extend_from_slice(&selected[..n.min(selected.len())]);
        let r = train_and_score(&pairs, target_test, config, provenance)?;
        Ok(SweepPoint {
            n,
            seq: r.seq_accuracy,
            tok: r.tok_accuracy,
        })
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        steps.par_iter().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        steps.iter().map(one).collect()
    }
}

/// `n,seq,tok` with a header row.
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("n,seq,tok\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.n, p.seq, p.tok);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainGain {
    pub domain: String,
    pub score: f64,
    /// `score` minus the target-only baseline.
    pub gain: f64,
}

/// Trains on target-train plus each candidate domain in turn and ranks the
/// candidates by improvement over target-train alone.
pub fn domain_affinity(
    target_train: &[RawPair],
    target_test: &[RawPair],
    candidates: &[(String, Vec<RawPair>)],
    config: &TrainConfig,
    metric: Metric,
    provenance: &Provenance,
) -> Result<(f64, Vec<DomainGain>)> {
    let baseline = metric.of(&train_and_score(target_train, target_test, config, provenance)?);
    let mut gains = Vec::with_capacity(candidates.len());
    for (name, pairs) in candidates {
        let mut all = target_train.to_vec();
        all.extend_from_slice(pairs);
        let score = metric.of(&train_and_score(&all, target_test, config, provenance)?);
        log::info!("domain {name}: {score:.4} (baseline {baseline:.4})");
        gains.push(DomainGain {
            domain: name.clone(),
            score,
            gain: score - baseline,
        });
    }
    gains.sort_by(|a, b| b.gain.total_cmp(&a.gain).then_with(|| a.domain.cmp(&b.domain)));
    Ok((baseline, gains))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_one_row_per_step() {
        let pts = [
            SweepPoint { n: 0, seq: 0.5, tok: 0.75 },
            SweepPoint { n: 10, seq: 0.625, tok: 0.8 },
        ];
        let csv = sweep_csv(&pts);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines, vec!["n,seq,tok", "0,0.5,0.75", "10,0.625,0.8"]);
        assert!(lines.iter().all(|l| l.split(',').count() == 3));
    }

    #[test]
    fn metric_parsing() {
        assert_eq!("seq".parse::<Metric>().unwrap(), Metric::Seq);
        assert!("den".parse::<Metric>().is_err());
    }
}
