//! Binary classification metrics. Class 1 (air bubbles) is the positive class.

use std::io::Write;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(self, other: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }

    pub fn record(&mut self, truth: usize, pred: usize) {
        match (truth, pred) {
            (1, 1) => self.tp += 1,
            (0, 1) => self.fp += 1,
            (1, 0) => self.fn_ += 1,
            _ => self.tn += 1,
        }
    }
}

pub fn confusion(y_true: &[usize], y_pred: &[usize]) -> Result<Confusion> {
    if y_true.len() != y_pred.len() {
        return Err(MetricsError::Contract(format!(
            "{} labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut c = Confusion::default();
    for (i, (&t, &p)) in y_true.iter().zip(y_pred).enumerate() {
        if t > 1 || p > 1 {
            return Err(MetricsError::Contract(format!(
                "sample {i}: labels must be 0 or 1, got truth {t}, prediction {p}"
            )));
        }
        c.record(t, p);
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
    pub confusion: Confusion,
}

/// `num / den`, or 0 when the denominator vanishes.
fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn scores(c: &Confusion) -> Result<MetricsReport> {
    if c.total() == 0 {
        return Err(MetricsError::Contract("empty confusion matrix".into()));
    }
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    Ok(MetricsReport {
        accuracy: (tp + tn) / c.total() as f64,
        precision,
        recall,
        f1: ratio(2.0 * precision * recall, precision + recall),
        mcc: ratio(tp * tn - fp * fn_, den).clamp(-1.0, 1.0),
        confusion: *c,
    })
}

pub const CSV_HEADER: &str = "split,epoch,accuracy,f1,mcc,tp,fp,fn,tn";

impl MetricsReport {
    pub fn csv_row(&self, split: &str, epoch: usize) -> String {
        let c = &self.confusion;
        format!(
            "{split},{epoch},{:.6},{:.6},{:.6},{},{},{},{}",
            self.accuracy, self.f1, self.mcc, c.tp, c.fp, c.fn_, c.tn
        )
    }
}

/// Writes a header followed by one row per `(split, epoch, report)`.
pub fn write_csv<'a>(
    out: &mut impl Write,
    rows: impl IntoIterator<Item = (&'a str, usize, &'a MetricsReport)>,
) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for (split, epoch, r) in rows {
        writeln!(out, "{}", r.csv_row(split, epoch))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> Confusion {
        Confusion { tp, fp, fn_, tn }
    }

    #[test]
    fn confusion_examples() {
        assert_eq!(confusion(&[1, 0, 1], &[1, 0, 1]).unwrap(), counts(2, 0, 0, 1));
        assert_eq!(confusion(&[1, 0], &[0, 1]).unwrap(), counts(0, 1, 1, 0));
        assert!(confusion(&[1, 0], &[1]).is_err());
        assert!(confusion(&[2], &[1]).is_err());
    }

    #[test]
    fn confusion_matches_tally() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let y: Vec<usize> = (0..10_000).map(|_| r.gen_range(0..2)).collect();
        let p: Vec<usize> = (0..10_000).map(|_| r.gen_range(0..2)).collect();
        let c = confusion(&y, &p).unwrap();
        let tally = |a, b| y.iter().zip(&p).filter(|&(&t, &q)| t == a && q == b).count() as u64;
        assert_eq!(c, counts(tally(1, 1), tally(0, 1), tally(1, 0), tally(0, 0)));
    }

    #[test]
    fn score_examples() {
        let perfect = scores(&confusion(&[1, 0, 1, 0], &[1, 0, 1, 0]).unwrap()).unwrap();
        assert_eq!((perfect.accuracy, perfect.f1, perfect.mcc), (1.0, 1.0, 1.0));
        let inverted = scores(&confusion(&[1, 0, 1, 0], &[0, 1, 0, 1]).unwrap()).unwrap();
        assert_eq!(inverted.mcc, -1.0);

        let r = scores(&counts(50, 5, 5, 40)).unwrap();
        assert_abs_diff_eq!(r.accuracy, 0.9, epsilon = 1e-4);
        assert_abs_diff_eq!(r.f1, 0.9091, epsilon = 1e-4);
        assert_abs_diff_eq!(r.mcc, 0.7980, epsilon = 1e-4);
        // independent: MCC = (TP·TN − FP·FN) / sqrt(55·55·45·45)
        assert_abs_diff_eq!(r.mcc, (2000.0 - 25.0) / (55.0 * 45.0), epsilon = 1e-12);

        assert!(scores(&Confusion::default()).is_err());
        let all_negative = scores(&counts(0, 0, 0, 7)).unwrap();
        assert_eq!((all_negative.f1, all_negative.mcc, all_negative.accuracy), (0.0, 0.0, 1.0));
    }

    #[test]
    fn csv_layout() {
        let r = scores(&counts(3, 1, 2, 4)).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, [("test", 7, &r)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        let fields: Vec<_> = lines[1].split(',').collect();
        assert_eq!(fields.len(), 9);
        assert_eq!(&fields[..2], &["test", "7"]);
        assert_eq!(&fields[5..], &["3", "1", "2", "4"]);
    }

    fn confusions() -> impl Strategy<Value = Confusion> {
        (0u64..500, 0u64..500, 0u64..500, 0u64..500)
            .prop_filter("nonempty", |c| c.0 + c.1 + c.2 + c.3 > 0)
            .prop_map(|(a, b, c, d)| counts(a, b, c, d))
    }

    proptest! {
        #[test]
        fn mcc_bounded_and_label_symmetric(c in confusions()) {
            let r = scores(&c).unwrap();
            prop_assert!((-1.0..=1.0).contains(&r.mcc));
            prop_assert!((0.0..=1.0).contains(&r.f1));
            let swapped = scores(&counts(c.tn, c.fn_, c.fp, c.tp)).unwrap();
            prop_assert!((r.mcc - swapped.mcc).abs() < 1e-12);
            prop_assert_eq!(r.f1 == 1.0, c.fp == 0 && c.fn_ == 0 && c.tp > 0);
        }

        #[test]
        fn self_agreement_is_perfect(y in proptest::collection::vec(0usize..2, 2..200)) {
            prop_assume!(y.contains(&0) && y.contains(&1));
            prop_assert_eq!(scores(&confusion(&y, &y).unwrap()).unwrap().accuracy, 1.0);
        }

        #[test]
        fn streaming_equals_one_shot(
            pairs in proptest::collection::vec((0usize..2, 0usize..2), 1..300),
            cut in 0usize..300
        ) {
            let (y, p): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let cut = cut.min(y.len());
            let merged = confusion(&y[..cut], &p[..cut]).unwrap()
                .merge(confusion(&y[cut..], &p[cut..]).unwrap());
            prop_assert_eq!(merged, confusion(&y, &p).unwrap());
        }
    }
}
