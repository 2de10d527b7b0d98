//! Group-fairness and performance metrics over binary predictions.
//!
//! All rates are reported in percent. A rate whose denominator is zero is an
//! error rather than a silent zero.

use std::fmt;

use crate::error::{Error, Result};

/// Confusion counts for one protected group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }

    fn add(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

/// Per-group rates as fractions in [0,1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rates {
    pub tpr: f64,
    pub fpr: f64,
}

impl Rates {
    pub fn tnr(&self) -> f64 {
        1.0 - self.fpr
    }

    pub fn fnr(&self) -> f64 {
        1.0 - self.tpr
    }

    /// Balanced accuracy of this group, as a fraction.
    pub fn balanced(&self) -> f64 {
        0.5 * (self.tpr + self.tnr())
    }
}

/// Confusion counts indexed by protected attribute value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GroupRates {
    pub groups: [Confusion; 2],
}

impl GroupRates {
    pub fn group(&self, a: u8) -> &Confusion {
        &self.groups[a as usize]
    }

    pub fn pooled(&self) -> Confusion {
        let mut c = self.groups[0];
        c.add(&self.groups[1]);
        c
    }

    /// TPR and FPR of group `a`.
    pub fn rates(&self, a: u8) -> Result<Rates> {
        let c = self.group(a);
        if c.positives() == 0 {
            return Err(Error::UndefinedRate {
                group: a,
                condition: "y=1",
            });
        }
        if c.negatives() == 0 {
            return Err(Error::UndefinedRate {
                group: a,
                condition: "y=0",
            });
        }
        Ok(Rates {
            tpr: c.tp as f64 / c.positives() as f64,
            fpr: c.fp as f64 / c.negatives() as f64,
        })
    }

    pub fn swapped(&self) -> Self {
        Self {
            groups: [self.groups[1], self.groups[0]],
        }
    }
}

fn check_binary(name: &str, v: &[u8]) -> Result<()> {
    match v.iter().position(|&x| x > 1) {
        Some(i) => Err(Error::Data(format!("{name}[{i}] = {} is not binary", v[i]))),
        None => Ok(()),
    }
}

/// Counts TP/FP/TN/FN per protected group.
pub fn tally(preds: &[u8], y: &[u8], a: &[u8]) -> Result<GroupRates> {
    if preds.len() != y.len() || y.len() != a.len() {
        return Err(Error::Data(format!(
            "length mismatch: {} predictions, {} labels, {} attributes",
            preds.len(),
            y.len(),
            a.len()
        )));
    }
    check_binary("pred", preds)?;
    check_binary("y", y)?;
    check_binary("a", a)?;
    let mut r = GroupRates::default();
    for ((&p, &t), &g) in preds.iter().zip(y).zip(a) {
        let c = &mut r.groups[g as usize];
        match (p, t) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 0) => c.tn += 1,
            _ => c.fn_ += 1,
        }
    }
    Ok(r)
}

/// Thresholds probabilities: `p >= threshold` predicts 1.
pub fn threshold(probs: &[f64], threshold: f64) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p >= threshold)).collect()
}

/// ½|TPR₁−TPR₀| + ½|FPR₁−FPR₀| in percent.
pub fn equalized_odds(r: &GroupRates) -> Result<f64> {
    let (r0, r1) = (r.rates(0)?, r.rates(1)?);
    Ok(eo_from_rates(r0, r1))
}

pub fn eo_from_rates(r0: Rates, r1: Rates) -> f64 {
    100.0 * (0.5 * (r1.tpr - r0.tpr).abs() + 0.5 * (r1.fpr - r0.fpr).abs())
}

/// Mean of TPR and TNR over both groups, in percent.
pub fn balanced_accuracy(r: &GroupRates) -> Result<f64> {
    let (r0, r1) = (r.rates(0)?, r.rates(1)?);
    Ok(ba_from_rates(r0, r1))
}

pub fn ba_from_rates(r0: Rates, r1: Rates) -> f64 {
    100.0 * 0.25 * (r0.tpr + r0.tnr() + r1.tpr + r1.tnr())
}

/// Balanced-accuracy gap between the groups.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaDifference {
    /// |BA₀ − BA₁| in percent.
    pub absolute: f64,
    /// BA₀ − BA₁ in percent.
    pub signed: f64,
}

pub fn balanced_accuracy_difference(r: &GroupRates) -> Result<BaDifference> {
    let (r0, r1) = (r.rates(0)?, r.rates(1)?);
    Ok(dba_from_rates(r0, r1))
}

pub fn dba_from_rates(r0: Rates, r1: Rates) -> BaDifference {
    let signed = 100.0 * (r0.balanced() - r1.balanced());
    BaDifference {
        absolute: signed.abs(),
        signed,
    }
}

/// (TP+TN)/total pooled over groups, in percent.
pub fn standard_accuracy(r: &GroupRates) -> Result<f64> {
    let c = r.pooled();
    if c.total() == 0 {
        return Err(Error::Data("accuracy of an empty prediction set".into()));
    }
    Ok(100.0 * (c.tp + c.tn) as f64 / c.total() as f64)
}

/// Non-interpolated average precision of `scores` for the positive set
/// `positive[i]`, in [0,1]. Tied scores enter the ranking together.
fn average_precision(scores: &[f64], positive: &[bool]) -> f64 {
    let total_pos = positive.iter().filter(|p| **p).count();
    if total_pos == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        let mut new_tp = 0;
        while k < order.len() && scores[order[k]] == s {
            new_tp += usize::from(positive[order[k]]);
            seen += 1;
            k += 1;
        }
        tp += new_tp;
        if new_tp > 0 {
            ap += (new_tp as f64 / total_pos as f64) * (tp as f64 / seen as f64);
        }
    }
    ap
}

/// Class-frequency weighted AP in percent: the AP of each class treated as
/// the positive (using `1 - score` for class 0), weighted by its share.
pub fn weighted_average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Data(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    check_binary("label", labels)?;
    if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Data(format!("score {bad} outside [0,1]")));
    }
    let n = labels.len() as f64;
    let n1 = labels.iter().filter(|&&l| l == 1).count();
    if n1 == 0 || n1 == labels.len() {
        log::warn!("weighted AP on a single-class set is degenerate");
    }
    let pos1: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
    let pos0: Vec<bool> = labels.iter().map(|&l| l == 0).collect();
    let inv: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
    let ap1 = average_precision(scores, &pos1);
    let ap0 = average_precision(&inv, &pos0);
    Ok(100.0 * (n1 as f64 / n * ap1 + (n - n1 as f64) / n * ap0))
}

/// EO, ΔBA, BA and accuracy for one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct FairnessReport {
    pub equalized_odds: f64,
    pub delta_ba: f64,
    pub delta_ba_signed: f64,
    pub balanced_acc: f64,
    pub std_acc: f64,
    pub group_ba: [f64; 2],
    pub rates: [Rates; 2],
    pub counts: GroupRates,
}

impl FairnessReport {
    pub fn from_counts(counts: GroupRates) -> Result<Self> {
        let r = [counts.rates(0)?, counts.rates(1)?];
        let d = dba_from_rates(r[0], r[1]);
        Ok(Self {
            equalized_odds: eo_from_rates(r[0], r[1]),
            delta_ba: d.absolute,
            delta_ba_signed: d.signed,
            balanced_acc: ba_from_rates(r[0], r[1]),
            std_acc: standard_accuracy(&counts)?,
            group_ba: [100.0 * r[0].balanced(), 100.0 * r[1].balanced()],
            rates: r,
            counts,
        })
    }

    pub fn from_probs(probs: &[f64], y: &[u8], a: &[u8], thresh: f64) -> Result<Self> {
        Self::from_counts(tally(&threshold(probs, thresh), y, a)?)
    }

    pub const CSV_HEADER: [&'static str; 14] = [
        "run_id", "eo", "delta_ba", "ba", "acc", "ba_a0", "ba_a1", "tpr_a0", "fpr_a0", "tpr_a1",
        "fpr_a1", "tnr_a0", "tnr_a1", "n",
    ];

    pub fn csv_row(&self, run_id: &str) -> Vec<String> {
        let mut row = vec![run_id.to_string()];
        row.extend(
            [
                self.equalized_odds,
                self.delta_ba,
                self.balanced_acc,
                self.std_acc,
                self.group_ba[0],
                self.group_ba[1],
                100.0 * self.rates[0].tpr,
                100.0 * self.rates[0].fpr,
                100.0 * self.rates[1].tpr,
                100.0 * self.rates[1].fpr,
                100.0 * self.rates[0].tnr(),
                100.0 * self.rates[1].tnr(),
            ]
            .iter()
            .map(|v| format!("{v:.4}")),
        );
        row.push(self.counts.pooled().total().to_string());
        row
    }
}

impl fmt::Display for FairnessReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>8}", "metric", "value")?;
        writeln!(f, "{:<10} {:>8.2}", "EO", self.equalized_odds)?;
        writeln!(f, "{:<10} {:>8.2}", "|dBA|", self.delta_ba)?;
        writeln!(f, "{:<10} {:>8.2}", "BA", self.balanced_acc)?;
        writeln!(f, "{:<10} {:>8.2}", "Acc", self.std_acc)?;
        for g in 0..2 {
            writeln!(
                f,
                "a={g}: TPR {:.2} FPR {:.2} BA {:.2}",
                100.0 * self.rates[g].tpr,
                100.0 * self.rates[g].fpr,
                self.group_ba[g]
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn r(tpr: f64, fpr: f64) -> Rates {
        Rates { tpr, fpr }
    }

    #[test]
    fn published_transformer_rates() {
        let (r0, r1) = (r(0.6776, 0.0294), r(0.9283, 0.0965));
        assert!((eo_from_rates(r0, r1) - 15.89).abs() < 0.01);
        assert!((ba_from_rates(r0, r1) - 87.00).abs() < 0.01);
        let d = dba_from_rates(r0, r1);
        assert!((d.absolute - 9.18).abs() < 0.01);
        assert!((100.0 * r0.balanced() - 82.41).abs() < 0.01);
        assert!((100.0 * r1.balanced() - 91.59).abs() < 0.01);
    }

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 0, 1, 1, 0];
        let a = [0, 0, 1, 1, 0, 1];
        let t = tally(&y, &y, &a).unwrap();
        for g in t.groups {
            assert_eq!((g.fp, g.fn_), (0, 0));
        }
        let rep = FairnessReport::from_counts(t).unwrap();
        assert_eq!(rep.balanced_acc, 100.0);
        assert_eq!(rep.std_acc, 100.0);
        assert_eq!(rep.equalized_odds, 0.0);
        let wrong: Vec<u8> = y.iter().map(|v| 1 - v).collect();
        assert_eq!(
            standard_accuracy(&tally(&wrong, &y, &a).unwrap()).unwrap(),
            0.0
        );
    }

    #[test]
    fn single_false_positive() {
        let t = tally(&[1], &[0], &[1]).unwrap();
        assert_eq!(
            t.groups[1],
            Confusion {
                fp: 1,
                ..Default::default()
            }
        );
        assert_eq!(t.groups[0], Confusion::default());
        assert!(matches!(
            equalized_odds(&t),
            Err(Error::UndefinedRate { group: 0, .. })
        ));
    }

    #[test]
    fn tally_rejects_bad_input() {
        assert!(tally(&[1, 0], &[1], &[0]).is_err());
        assert!(tally(&[2], &[1], &[0]).is_err());
    }

    #[test]
    fn tally_matches_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 200;
        let p: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let a: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let t = tally(&p, &y, &a).unwrap();
        for g in 0..2u8 {
            let count = |pp: u8, yy: u8| {
                (0..n)
                    .filter(|&i| a[i] == g && p[i] == pp && y[i] == yy)
                    .count() as u64
            };
            let c = t.group(g);
            assert_eq!(c.tp, count(1, 1));
            assert_eq!(c.fp, count(1, 0));
            assert_eq!(c.tn, count(0, 0));
            assert_eq!(c.fn_, count(0, 1));
        }
        let correct = (0..n).filter(|&i| p[i] == y[i]).count() as f64;
        let acc = standard_accuracy(&t).unwrap();
        assert!((acc - 100.0 * correct / n as f64).abs() < 1e-12);
    }

    #[test]
    fn equal_groups_are_fair() {
        let x = r(0.7, 0.2);
        assert_eq!(eo_from_rates(x, x), 0.0);
        assert_eq!(dba_from_rates(x, x).absolute, 0.0);
    }

    /// Brute-force PR curve: walk every distinct threshold from high to low
    /// and sum precision times recall increments.
    fn ap_oracle(scores: &[f64], pos: &[bool]) -> f64 {
        let mut th: Vec<f64> = scores.to_vec();
        th.sort_by(|a, b| b.total_cmp(a));
        th.dedup();
        let npos = pos.iter().filter(|p| **p).count() as f64;
        let mut prev_recall = 0.0;
        let mut ap = 0.0;
        for t in th {
            let sel: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
            let tp = sel.iter().filter(|&&i| pos[i]).count() as f64;
            let recall = tp / npos;
            let precision = tp / sel.len() as f64;
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        ap
    }

    #[test]
    fn weighted_ap_handmade_matches_oracle() {
        let pairs: [(f64, u8); 20] = [
            (0.95, 1),
            (0.91, 1),
            (0.88, 0),
            (0.80, 1),
            (0.80, 0),
            (0.72, 1),
            (0.66, 0),
            (0.61, 1),
            (0.55, 0),
            (0.55, 1),
            (0.50, 0),
            (0.44, 1),
            (0.39, 0),
            (0.31, 0),
            (0.30, 1),
            (0.22, 0),
            (0.15, 0),
            (0.10, 1),
            (0.05, 0),
            (0.01, 0),
        ];
        let s: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let l: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        let pos1: Vec<bool> = l.iter().map(|&v| v == 1).collect();
        let pos0: Vec<bool> = l.iter().map(|&v| v == 0).collect();
        let inv: Vec<f64> = s.iter().map(|v| 1.0 - v).collect();
        let w1 = 9.0 / 20.0;
        let expect = 100.0 * (w1 * ap_oracle(&s, &pos1) + (1.0 - w1) * ap_oracle(&inv, &pos0));
        let got = weighted_average_precision(&s, &l).unwrap();
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }

    #[test]
    fn weighted_ap_perfect_and_chance() {
        let s = [0.9, 0.8, 0.3, 0.1];
        let l = [1, 1, 0, 0];
        assert!((weighted_average_precision(&s, &l).unwrap() - 100.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let s: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let l: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let ap = weighted_average_precision(&s, &l).unwrap();
        assert!((ap - 50.0).abs() < 5.0, "{ap}");
    }

    #[test]
    fn weighted_ap_single_class_is_that_class() {
        let ap = weighted_average_precision(&[0.2, 0.7], &[1, 1]).unwrap();
        assert!((ap - 100.0).abs() < 1e-12);
        assert!(weighted_average_precision(&[1.5], &[1]).is_err());
    }

    fn rate() -> impl Strategy<Value = f64> {
        0.0..=1.0f64
    }

    proptest! {
        #[test]
        fn formulas_match_direct_evaluation(t0 in rate(), f0 in rate(), t1 in rate(), f1 in rate()) {
            let (r0, r1) = (r(t0, f0), r(t1, f1));
            let eo = eo_from_rates(r0, r1);
            prop_assert!((eo - 50.0 * ((t1 - t0).abs() + (f1 - f0).abs())).abs() < 1e-12);
            prop_assert!((0.0..=100.0).contains(&eo));
            let ba = ba_from_rates(r0, r1);
            prop_assert!((ba - 25.0 * (t0 + 1.0 - f0 + t1 + 1.0 - f1)).abs() < 1e-12);
            let d = dba_from_rates(r0, r1);
            // the BA difference reduces to half the TPR gap minus half the FPR gap
            let alt = 100.0 * (0.5 * (t1 - t0) - 0.5 * (f1 - f0)).abs();
            prop_assert!((d.absolute - alt).abs() < 1e-12);
            prop_assert!(d.absolute >= 0.0);
            prop_assert!((ba - 0.5 * 100.0 * (r0.balanced() + r1.balanced())).abs() < 1e-12);
        }

        #[test]
        fn group_relabeling_is_neutral(
            preds in proptest::collection::vec(0u8..2, 40),
            y in proptest::collection::vec(0u8..2, 40),
            a in proptest::collection::vec(0u8..2, 40),
        ) {
            let t = tally(&preds, &y, &a).unwrap();
            let flipped: Vec<u8> = a.iter().map(|v| 1 - v).collect();
            let u = tally(&preds, &y, &flipped).unwrap();
            prop_assert_eq!(u, t.swapped());
            if let (Ok(e1), Ok(e2)) = (equalized_odds(&t), equalized_odds(&u)) {
                prop_assert_eq!(e1, e2);
                let d1 = balanced_accuracy_difference(&t).unwrap();
                let d2 = balanced_accuracy_difference(&u).unwrap();
                prop_assert_eq!(d1.absolute, d2.absolute);
            }
        }
    }
}
