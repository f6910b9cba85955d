//! Generated data for tests, the acceptance suite and the demo.

use crate::data::RawPair;
use crate::error::Result;
use crate::influence::LabeledData;
use crate::numcore::ops::sigmoid;
use crate::numcore::SeededRng;

/// Sparse count features (each on with probability `density`) plus a bias
/// column, labeled by a logistic model with standard-normal weights.
pub fn logistic_problem(n: usize, features: usize, density: f64, seed: u64) -> Result<LabeledData> {
    Ok(logistic_split(n, 0, features, density, seed)?.0)
}

/// Train and test sets drawn from the same logistic model.
pub fn logistic_split(
    n_train: usize,
    n_test: usize,
    features: usize,
    density: f64,
    seed: u64,
) -> Result<(LabeledData, LabeledData)> {
    let mut rng = SeededRng::new(seed, 0);
    let truth: Vec<f64> = (0..=features).map(|_| rng.normal()).collect();
    let mut draw = |n: usize| {
        let mut rows = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let mut row: Vec<f64> = (0..features)
                .map(|_| if rng.unit() < density { 1.0 } else { 0.0 })
                .collect();
            row.push(1.0);
            let z: f64 = row.iter().zip(&truth).map(|(x, w)| x * w).sum();
            labels.push(if rng.unit() < sigmoid(z) { 1.0 } else { 0.0 });
            rows.push(row);
        }
        LabeledData::new(rows, labels)
    };
    let train = draw(n_train)?;
    let test = draw(n_test)?;
    Ok((train, test))
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn pair(src: String, tgt: String) -> RawPair {
    RawPair {
        source: toks(&src),
        target: toks(&tgt),
        line: 0,
    }
}

const PEOPLE: [&str; 12] = [
    "alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi", "ivan", "judy", "mallory",
    "oscar",
];
const DAYS: [&str; 7] = [
    "monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday",
];
const AUTHORS: [&str; 10] = [
    "knuth", "hopper", "turing", "lovelace", "dijkstra", "hoare", "liskov", "milner", "backus",
    "naur",
];
const VENUES: [&str; 6] = ["acl", "emnlp", "icml", "nips", "popl", "pldi"];

/// One utterance/logical-form pair from the calendar-style grammar.
pub fn calendar_pair(rng: &mut SeededRng) -> RawPair {
    let template = rng.below(3);
    calendar_template(template, rng)
}

/// Templates 0 and 1 filter on one field; template 2 combines both.
fn calendar_template(template: usize, rng: &mut SeededRng) -> RawPair {
    let p = PEOPLE[rng.below(PEOPLE.len())];
    let d = DAYS[rng.below(DAYS.len())];
    match template {
        0 => pair(
            format!("meetings with {p}"),
            format!("( call listValue ( filter meeting attendee = {p} ) )"),
        ),
        1 => pair(
            format!("meetings on {d}"),
            format!("( call listValue ( filter meeting date = {d} ) )"),
        ),
        _ => pair(
            format!("meetings with {p} on {d}"),
            format!("( call listValue ( filter ( filter meeting attendee = {p} ) date = {d} ) )"),
        ),
    }
}

/// A pair from an unrelated grammar with a disjoint utterance vocabulary.
pub fn publication_pair(rng: &mut SeededRng) -> RawPair {
    let a = AUTHORS[rng.below(AUTHORS.len())];
    let v = VENUES[rng.below(VENUES.len())];
    let year = 1990 + rng.below(30);
    match rng.below(3) {
        0 => pair(
            format!("articles written by {a}"),
            format!("( count ( article author {a} ) )"),
        ),
        1 => pair(
            format!("papers published in {v} {year}"),
            format!("( sum ( venue {v} year {year} ) )"),
        ),
        _ => pair(
            format!("{a} publications at {v}"),
            format!("( argmax ( article author {a} venue {v} ) )"),
        ),
    }
}

/// Target domain plus a source domain whose first half are calendar-style
/// pairs filed under the other domain and whose second half are unrelated.
#[derive(Debug, Clone)]
pub struct TwoDomain {
    pub target_train: Vec<RawPair>,
    pub target_test: Vec<RawPair>,
    pub source: Vec<RawPair>,
    /// `useful[i]` iff `source[i]` came from the target grammar.
    pub useful: Vec<bool>,
}

pub fn two_domain(
    target_train: usize,
    target_test: usize,
    source_each: usize,
    seed: u64,
) -> TwoDomain {
    let mut rng = SeededRng::new(seed, 0);
    let tt = (0..target_train).map(|_| calendar_pair(&mut rng)).collect();
    let te = (0..target_test).map(|_| calendar_pair(&mut rng)).collect();
    let mut source: Vec<(RawPair, bool)> = Vec::with_capacity(2 * source_each);
    for _ in 0..source_each {
        source.push((calendar_pair(&mut rng), true));
    }
    for _ in 0..source_each {
        source.push((publication_pair(&mut rng), false));
    }
    rng.shuffle(&mut source);
    let (source, useful) = source.into_iter().unzip();
    TwoDomain {
        target_train: tt,
        target_test: te,
        source,
        useful,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logistic_problem_shape() {
        let d = logistic_problem(30, 8, 0.2, 1).unwrap();
        assert_eq!(d.len(), 30);
        assert!(d.rows.iter().all(|r| r.len() == 9 && r[8] == 1.0));
        assert_eq!(d, logistic_problem(30, 8, 0.2, 1).unwrap());
    }

    #[test]
    fn two_domain_halves() {
        let td = two_domain(5, 7, 10, 3);
        assert_eq!(td.target_train.len(), 5);
        assert_eq!(td.target_test.len(), 7);
        assert_eq!(td.source.len(), 20);
        assert_eq!(td.useful.iter().filter(|&&u| u).count(), 10);
        for (p, &u) in td.source.iter().zip(&td.useful) {
            assert_eq!(p.source[0] == "meetings", u);
        }
    }
}
