//! Order-sensitive triplet accuracies, per-position accuracy, balanced
//! accuracy and per-position confusion matrices.
//!
//! The triplet metrics are generic over the label type, so they apply equally
//! to class ids and to symbol strings. Metrics never look at frame kinds;
//! filter the examples first.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::PhonemeInventory;
use crate::framing::{Position, Triplet};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("LengthMismatch: {preds} predictions for {truths} references")]
    LengthMismatch { preds: usize, truths: usize },
    #[error("Empty: no examples to score")]
    Empty,
    #[error("UnknownSymbol: {0:?} is not in the inventory")]
    UnknownSymbol(String),
    #[error("UnknownClass: class id {0} is outside the inventory")]
    UnknownClass(u32),
    #[error("ClassWithoutSupport: class {0:?} has no reference examples")]
    ClassWithoutSupport(String),
}

/// Exact positional match.
pub fn ordered_correct<T: PartialEq>(pred: &Triplet<T>, truth: &Triplet<T>) -> bool {
    pred == truth
}

fn subset<T: PartialEq>(a: &Triplet<T>, b: &Triplet<T>) -> bool {
    a.as_array().iter().all(|x| b.as_array().contains(x))
}

/// Same set of distinct symbols, ignoring order and multiplicity.
pub fn unordered_correct<T: PartialEq>(pred: &Triplet<T>, truth: &Triplet<T>) -> bool {
    subset(pred, truth) && subset(truth, pred)
}

/// Exact start and end; the centre may be either true edge label.
pub fn flexible_centre_correct<T: PartialEq>(pred: &Triplet<T>, truth: &Triplet<T>) -> bool {
    pred.start == truth.start
        && pred.end == truth.end
        && (pred.centre == truth.start || pred.centre == truth.end)
}

fn check<A, B>(preds: &[A], truths: &[B]) -> Result<(), MetricsError> {
    if preds.len() != truths.len() {
        return Err(MetricsError::LengthMismatch { preds: preds.len(), truths: truths.len() });
    }
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

fn fraction<T>(
    preds: &[Triplet<T>],
    truths: &[Triplet<T>],
    correct: impl Fn(&Triplet<T>, &Triplet<T>) -> bool,
) -> Result<f64, MetricsError> {
    check(preds, truths)?;
    let hits = preds.iter().zip(truths).filter(|(p, t)| correct(p, t)).count();
    Ok(hits as f64 / preds.len() as f64)
}

pub fn ordered_accuracy<T: PartialEq>(preds: &[Triplet<T>], truths: &[Triplet<T>]) -> Result<f64, MetricsError> {
    fraction(preds, truths, ordered_correct)
}

pub fn unordered_accuracy<T: PartialEq>(preds: &[Triplet<T>], truths: &[Triplet<T>]) -> Result<f64, MetricsError> {
    fraction(preds, truths, unordered_correct)
}

pub fn flexible_centre_accuracy<T: PartialEq>(
    preds: &[Triplet<T>],
    truths: &[Triplet<T>],
) -> Result<f64, MetricsError> {
    fraction(preds, truths, flexible_centre_correct)
}

pub fn position_accuracy<T: PartialEq>(
    preds: &[Triplet<T>],
    truths: &[Triplet<T>],
    position: Position,
) -> Result<f64, MetricsError> {
    fraction(preds, truths, |p, t| p.get(position) == t.get(position))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ordered: f64,
    pub unordered: f64,
    pub flexible_centre: f64,
    pub start_acc: f64,
    pub centre_acc: f64,
    pub end_acc: f64,
    pub n_examples: usize,
}

impl MetricsReport {
    pub fn compute<T: PartialEq>(preds: &[Triplet<T>], truths: &[Triplet<T>]) -> Result<Self, MetricsError> {
        Ok(Self {
            ordered: ordered_accuracy(preds, truths)?,
            unordered: unordered_accuracy(preds, truths)?,
            flexible_centre: flexible_centre_accuracy(preds, truths)?,
            start_acc: position_accuracy(preds, truths, Position::Start)?,
            centre_acc: position_accuracy(preds, truths, Position::Centre)?,
            end_acc: position_accuracy(preds, truths, Position::End)?,
            n_examples: preds.len(),
        })
    }

    pub fn position(&self, position: Position) -> f64 {
        match position {
            Position::Start => self.start_acc,
            Position::Centre => self.centre_acc,
            Position::End => self.end_acc,
        }
    }
}

/// Counts at one triplet position: rows are true classes, columns predicted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub position: Position,
    pub symbols: Vec<String>,
    /// Row-major `K × K`.
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn n_examples(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    /// Rows divided by their totals; rows without support stay zero.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                row.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect()
            })
            .collect()
    }

    /// CSV with a header row and a leading column of symbols.
    pub fn to_csv(&self, normalize: bool) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["true\\pred".to_string()];
        header.extend(self.symbols.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        let normalized = normalize.then(|| self.row_normalized());
        for (i, sym) in self.symbols.iter().enumerate() {
            let mut rec = vec![sym.clone()];
            match &normalized {
                Some(n) => rec.extend(n[i].iter().map(|v| format!("{v:.6}"))),
                None => rec.extend(self.counts[i].iter().map(u64::to_string)),
            }
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// Confusion matrix over class ids.
pub fn confusion_ids(
    preds: &[Triplet<u32>],
    truths: &[Triplet<u32>],
    position: Position,
    inventory: &PhonemeInventory,
) -> Result<ConfusionMatrix, MetricsError> {
    check(preds, truths)?;
    let k = inventory.len();
    let mut counts = vec![vec![0u64; k]; k];
    for (p, t) in preds.iter().zip(truths) {
        let (p, t) = (*p.get(position), *t.get(position));
        for c in [p, t] {
            if c as usize >= k {
                return Err(MetricsError::UnknownClass(c));
            }
        }
        counts[t as usize][p as usize] += 1;
    }
    Ok(ConfusionMatrix { position, symbols: inventory.symbols().to_vec(), counts })
}

fn to_ids(labels: &[Triplet<String>], inventory: &PhonemeInventory) -> Result<Vec<Triplet<u32>>, MetricsError> {
    labels
        .iter()
        .map(|t| {
            t.try_map(|s| {
                inventory.id_of(s).map(|i| i as u32).ok_or_else(|| MetricsError::UnknownSymbol(s.clone()))
            })
        })
        .collect()
}

/// Confusion matrix over symbol triplets.
pub fn confusion(
    preds: &[Triplet<String>],
    truths: &[Triplet<String>],
    position: Position,
    inventory: &PhonemeInventory,
) -> Result<ConfusionMatrix, MetricsError> {
    check(preds, truths)?;
    confusion_ids(&to_ids(preds, inventory)?, &to_ids(truths, inventory)?, position, inventory)
}

/// Mean per-class recall over every inventory class.
pub fn balanced_accuracy(preds: &[u32], truths: &[u32], inventory: &PhonemeInventory) -> Result<f64, MetricsError> {
    check(preds, truths)?;
    let k = inventory.len();
    let mut support = vec![0u64; k];
    let mut hits = vec![0u64; k];
    for (&p, &t) in preds.iter().zip(truths) {
        for c in [p, t] {
            if c as usize >= k {
                return Err(MetricsError::UnknownClass(c));
            }
        }
        support[t as usize] += 1;
        if p == t {
            hits[t as usize] += 1;
        }
    }
    let mut total = 0.0;
    for c in 0..k {
        if support[c] == 0 {
            return Err(MetricsError::ClassWithoutSupport(inventory.symbols()[c].clone()));
        }
        total += hits[c] as f64 / support[c] as f64;
    }
    Ok(total / k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::framing::TripletLabel;
    use proptest::prelude::*;

    fn t(s: &str) -> TripletLabel {
        TripletLabel::parse_underscored(s).unwrap()
    }

    fn all_triplets(alphabet: &[&str]) -> Vec<TripletLabel> {
        let mut out = Vec::new();
        for a in alphabet {
            for b in alphabet {
                for c in alphabet {
                    out.push(Triplet::new(a.to_string(), b.to_string(), c.to_string()));
                }
            }
        }
        out
    }

    fn accepted(truth: &str, rule: fn(&TripletLabel, &TripletLabel) -> bool) -> Vec<String> {
        let truth = t(truth);
        let mut v: Vec<String> =
            all_triplets(&["a", "p", "s"]).into_iter().filter(|p| rule(p, &truth)).map(|p| p.to_string()).collect();
        v.sort();
        v
    }

    #[test]
    fn correctness_table() {
        assert_eq!(accepted("a_p_p", ordered_correct), ["a_p_p"]);
        assert_eq!(accepted("a_p_p", flexible_centre_correct), ["a_a_p", "a_p_p"]);
        assert_eq!(
            accepted("a_p_p", unordered_correct),
            ["a_a_p", "a_p_a", "a_p_p", "p_a_a", "p_a_p", "p_p_a"]
        );
    }

    #[test]
    fn set_semantics() {
        assert!(unordered_correct(&t("a_a_a"), &t("a_a_a")));
        assert!(!unordered_correct(&t("a_a_p"), &t("a_a_a")));
        assert!(!unordered_correct(&t("p_p_p"), &t("a_p_p")));
        assert!(!flexible_centre_correct(&t("a_s_p"), &t("a_p_p")));
        assert!(flexible_centre_correct(&t("a_a_a"), &t("a_a_a")));
        assert!(!ordered_correct(&t("p_p_a"), &t("a_p_p")));
    }

    #[test]
    fn errors() {
        let a = vec![t("a_a_a")];
        assert_eq!(ordered_accuracy::<String>(&[], &[]), Err(MetricsError::Empty));
        assert!(matches!(ordered_accuracy(&a, &[]), Err(MetricsError::LengthMismatch { .. })));
    }

    #[test]
    fn report_fields() {
        let truths = vec![t("a_p_p"), t("a_a_a"), t("s_s_p"), t("a_p_s")];
        let preds = vec![t("a_p_p"), t("a_a_p"), t("s_p_p"), t("s_p_a")];
        let r = MetricsReport::compute(&preds, &truths).unwrap();
        assert_eq!(r.n_examples, 4);
        assert_eq!(r.ordered, 0.25);
        assert_eq!(r.flexible_centre, 0.5);
        assert_eq!(r.unordered, 0.75);
        assert_eq!(r.start_acc, 0.75);
        assert_eq!(r.centre_acc, 0.75);
        assert_eq!(r.end_acc, 0.5);
        let json = serde_json::to_value(r).unwrap();
        for key in ["ordered", "unordered", "flexible_centre", "start_acc", "centre_acc", "end_acc", "n_examples"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    fn inv(symbols: &[&str]) -> PhonemeInventory {
        PhonemeInventory::from_symbols(symbols.iter().copied())
    }

    #[test]
    fn confusion_counts() {
        let i = inv(&["a", "p"]);
        let m = confusion(&[t("a_a_a")], &[t("a_p_p")], Position::End, &i).unwrap();
        assert_eq!(m.counts, vec![vec![0, 0], vec![1, 0]]);
        let same = vec![t("a_p_p"), t("p_p_a")];
        let d = confusion(&same, &same, Position::Start, &i).unwrap();
        assert_eq!(d.counts, vec![vec![1, 0], vec![0, 1]]);
        assert!(matches!(
            confusion(&[t("a_x_a")], &[t("a_a_a")], Position::Start, &i),
            Err(MetricsError::UnknownSymbol(s)) if s == "x"
        ));
    }

    #[test]
    fn confusion_csv() {
        let i = inv(&["a", "p"]);
        let m = confusion(&[t("a_a_a"), t("p_a_a")], &[t("a_a_a"), t("a_a_a")], Position::Start, &i).unwrap();
        assert_eq!(m.to_csv(false), "true\\pred,a,p\na,1,1\np,0,0\n");
        assert_eq!(m.to_csv(true), "true\\pred,a,p\na,0.500000,0.500000\np,0.000000,0.000000\n");
    }

    #[test]
    fn balanced_accuracy_examples() {
        let i = inv(&["a", "p"]);
        assert_eq!(balanced_accuracy(&[0, 1, 1], &[0, 1, 1], &i).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&[0, 1, 0], &[0, 1, 1], &i).unwrap(), 0.75);
        let k4 = inv(&["a", "b", "c", "d"]);
        let truths = [0, 1, 2, 3, 0, 1, 2, 3];
        assert_eq!(balanced_accuracy(&[2; 8], &truths, &k4).unwrap(), 0.25);
        assert_eq!(
            balanced_accuracy(&[0], &[0], &i),
            Err(MetricsError::ClassWithoutSupport("p".into()))
        );
    }

    fn arb_triplet(k: u32) -> impl Strategy<Value = Triplet<u32>> {
        (0..k, 0..k, 0..k).prop_map(|(a, b, c)| Triplet::new(a, b, c))
    }

    proptest! {
        #[test]
        fn nesting_holds_without_two_border(
            pairs in prop::collection::vec((arb_triplet(4), arb_triplet(4)), 1..60)
        ) {
            for (p, truth) in &pairs {
                if crate::framing::classify_triplet(truth) == crate::framing::FrameKind::TwoBorder {
                    continue;
                }
                prop_assert!(!ordered_correct(p, truth) || flexible_centre_correct(p, truth));
                prop_assert!(!flexible_centre_correct(p, truth) || unordered_correct(p, truth));
            }
        }

        #[test]
        fn permutation_invariance(
            pairs in prop::collection::vec((arb_triplet(3), arb_triplet(3)), 1..40),
            seed in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let split = |v: &[(Triplet<u32>, Triplet<u32>)]| -> (Vec<_>, Vec<_>) { v.iter().cloned().unzip() };
            let (p1, t1) = split(&pairs);
            let (p2, t2) = split(&shuffled);
            prop_assert_eq!(MetricsReport::compute(&p1, &t1).unwrap(), MetricsReport::compute(&p2, &t2).unwrap());
        }

        #[test]
        fn confusion_margins(
            pairs in prop::collection::vec((arb_triplet(3), arb_triplet(3)), 1..40),
        ) {
            let i = inv(&["a", "b", "c"]);
            let (p, t): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            for pos in Position::ALL {
                let m = confusion_ids(&p, &t, pos, &i).unwrap();
                prop_assert_eq!(m.n_examples(), p.len() as u64);
                for c in 0..3 {
                    let col: u64 = m.counts.iter().map(|r| r[c]).sum();
                    let predicted = p.iter().filter(|x| *x.get(pos) == c as u32).count() as u64;
                    prop_assert_eq!(col, predicted);
                }
                let acc = position_accuracy(&p, &t, pos).unwrap();
                prop_assert!((m.trace() as f64 / p.len() as f64 - acc).abs() < 1e-15);
                for row in m.row_normalized() {
                    let s: f64 = row.iter().sum();
                    prop_assert!(s == 0.0 || (s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn random_predictions_are_near_chance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let k = 5u32;
        let n = 20_000;
        let mut draw = || Triplet::new(rng.random_range(0..k), rng.random_range(0..k), rng.random_range(0..k));
        let truths: Vec<_> = (0..n).map(|_| draw()).collect();
        let preds: Vec<_> = (0..n).map(|_| draw()).collect();
        let p = 1.0 / k as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        for pos in Position::ALL {
            let acc = position_accuracy(&preds, &truths, pos).unwrap();
            assert!((acc - p).abs() <= 3.0 * sigma, "{pos}: {acc}");
        }
    }
}
