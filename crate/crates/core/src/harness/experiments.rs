//! Loss-weight sweeps, the protected-attribute scan and the ablation table.

use rayon::prelude::*;

use crate::baselines::MitigationStrategy;
use crate::debias::{AdversaryInput, AlignMode, DebiasConfig, QueryLossMode};
use crate::error::{Error, Result};
use crate::harness::config::{Method, RunConfig};
use crate::harness::train::{prepare_data, train_on, Prepared, RunRecord};
use crate::metrics::{equalized_odds, tally, threshold};

pub const DEFAULT_GRID: [f64; 4] = [0.0, 0.01, 0.1, 1.0];
pub const DEFAULT_BA_TOLERANCE: f64 = 1.0;

/// Trains every config on the same prepared data, in parallel, keeping
/// input order.
pub fn run_all(configs: &[RunConfig], prepared: &Prepared) -> Result<Vec<RunRecord>> {
    configs.par_iter().map(|c| train_on(c, prepared)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub alpha: f64,
    pub beta: f64,
    pub record: RunRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub baseline: RunRecord,
    /// Index into `points`, or `None` when the baseline itself is chosen.
    pub selected: Option<usize>,
    pub tolerance: f64,
}

impl SweepResult {
    pub fn rule(&self) -> String {
        selection_rule(self.tolerance)
    }

    pub fn selected_record(&self) -> &RunRecord {
        self.selected
            .map_or(&self.baseline, |i| &self.points[i].record)
    }
}

pub fn selection_rule(tol: f64) -> String {
    format!(
        "selection: minimize validation EO subject to validation BA >= baseline validation BA - {tol} points; ties keep grid order; baseline if no run qualifies"
    )
}

/// Applies the selection rule to `(val EO, val BA)` pairs.
pub fn select(candidates: &[(f64, f64)], baseline_ba: f64, tolerance: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &(eo, ba)) in candidates.iter().enumerate() {
        if ba + 1e-12 < baseline_ba - tolerance {
            continue;
        }
        if best.is_none_or(|(_, b)| eo < b) {
            best = Some((i, eo));
        }
    }
    best.map(|(i, _)| i)
}

fn with_weights(base: &RunConfig, alpha: f64, beta: f64) -> Result<RunConfig> {
    let mut c = base.clone();
    c.method = match &base.method {
        Method::Debias(d) => Method::Debias(DebiasConfig {
            alpha,
            beta,
            ..d.clone()
        }),
        Method::Baseline(
            s @ (MitigationStrategy::Mmd { .. }
            | MitigationStrategy::Dann { .. }
            | MitigationStrategy::LaftrEo { .. }),
        ) => {
            if beta != 0.0 {
                return Err(Error::Config(
                    "baseline sweeps take a single weight grid".into(),
                ));
            }
            Method::Baseline(s.with_gamma(alpha))
        }
        // a plain base sweeps the default debiasing weights
        Method::Baseline(MitigationStrategy::None) => {
            Method::Debias(DebiasConfig::tadet(alpha, beta))
        }
        Method::Baseline(s) => {
            return Err(Error::Config(format!(
                "{} has no loss weight to sweep",
                s.tag()
            )))
        }
    };
    Ok(c)
}

/// Cartesian sweep over `alpha_grid x beta_grid` (for baselines, the loss
/// weight over `alpha_grid` with `beta_grid = [0]`). A plain base config
/// sweeps default debiasing weights.
pub fn sweep(
    base: &RunConfig,
    alpha_grid: &[f64],
    beta_grid: &[f64],
    tolerance: f64,
) -> Result<SweepResult> {
    let prepared = prepare_data(base)?;
    sweep_on(base, alpha_grid, beta_grid, tolerance, &prepared)
}

pub fn sweep_on(
    base: &RunConfig,
    alpha_grid: &[f64],
    beta_grid: &[f64],
    tolerance: f64,
    prepared: &Prepared,
) -> Result<SweepResult> {
    if alpha_grid.is_empty() || beta_grid.is_empty() {
        return Err(Error::Config("sweep grids must be non-empty".into()));
    }
    let mut weights = Vec::new();
    for &a in alpha_grid {
        for &b in beta_grid {
            weights.push((a, b));
        }
    }
    let mut configs = weights
        .iter()
        .map(|&(a, b)| with_weights(base, a, b))
        .collect::<Result<Vec<_>>>()?;
    let baseline_pos = weights.iter().position(|&(a, b)| a == 0.0 && b == 0.0);
    if baseline_pos.is_none() {
        configs.push(base.clone().with_method(Method::plain()));
    }
    let mut records = run_all(&configs, prepared)?;
    let baseline = match baseline_pos {
        Some(i) => records[i].clone(),
        None => records.pop().expect("baseline run"),
    };
    let points: Vec<SweepPoint> = weights
        .into_iter()
        .zip(records)
        .map(|((alpha, beta), record)| SweepPoint {
            alpha,
            beta,
            record,
        })
        .collect();
    let cands: Vec<(f64, f64)> = points
        .iter()
        .map(|p| (p.record.val.equalized_odds, p.record.val.balanced_acc))
        .collect();
    let selected = select(&cands, baseline.val.balanced_acc, tolerance);
    Ok(SweepResult {
        points,
        baseline,
        selected,
        tolerance,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanEntry {
    pub attribute: String,
    /// `None` when a rate is undefined, e.g. the attribute copies the task label.
    pub eo: Option<f64>,
    pub degenerate: bool,
}

/// Trains one plain model on the task and ranks candidate protected
/// attributes by the test EO its predictions induce, highest first.
pub fn bias_scan(base: &RunConfig, candidates: &[String]) -> Result<(Vec<ScanEntry>, RunRecord)> {
    if candidates.is_empty() {
        return Err(Error::Config("no candidate attributes".into()));
    }
    let cfg = base.clone().with_method(Method::plain());
    let prepared = prepare_data(&cfg)?;
    for c in candidates {
        prepared.data.attributes.column(c)?;
    }
    let record = train_on(&cfg, &prepared)?;
    let test = prepared.data.subset(&prepared.split.test);
    let preds = threshold(&record.test_probs, cfg.threshold);
    let mut entries = Vec::with_capacity(candidates.len());
    for c in candidates {
        let col = test.attributes.column(c)?;
        let eo = equalized_odds(&tally(&preds, test.y(), col)?);
        entries.push(ScanEntry {
            attribute: c.clone(),
            degenerate: *c == test.task || col == test.y() || eo.is_err(),
            eo: eo.ok(),
        });
    }
    entries.sort_by(|x, y| match (x.eo, y.eo) {
        (Some(a), Some(b)) => b.total_cmp(&a),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    Ok((entries, record))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub index: usize,
    pub label: &'static str,
    pub config: RunConfig,
    pub record: RunRecord,
}

/// The nine adversary/query-loss configurations, in table order.
pub fn ablation_configs(base: &RunConfig, alpha: f64, beta: f64) -> Vec<(&'static str, RunConfig)> {
    let d = |input, mode, q, a: f64, b: f64| {
        let mut c = base.clone();
        let template = match &base.method {
            Method::Debias(d) => d.clone(),
            _ => DebiasConfig::tadet(0.0, 0.0),
        };
        c.method = Method::Debias(DebiasConfig {
            alpha: a,
            beta: b,
            adversary_input: input,
            adversarial_mode: mode,
            query_loss_mode: q,
            ..template
        });
        c
    };
    use AdversaryInput::*;
    use AlignMode::*;
    vec![
        (
            "baseline transformer",
            d(
                QueryClassToken,
                ClassSpecific,
                QueryLossMode::ClassSpecific,
                0.0,
                0.0,
            ),
        ),
        (
            "dann: penultimate, full",
            d(Penultimate, Full, QueryLossMode::Off, alpha, 0.0),
        ),
        (
            "penultimate, class-specific",
            d(Penultimate, ClassSpecific, QueryLossMode::Off, alpha, 0.0),
        ),
        (
            "full query, full",
            d(QueryFull, Full, QueryLossMode::Off, alpha, 0.0),
        ),
        (
            "full query, class-specific",
            d(QueryFull, ClassSpecific, QueryLossMode::Off, alpha, 0.0),
        ),
        (
            "query class token, full",
            d(QueryClassToken, Full, QueryLossMode::Off, alpha, 0.0),
        ),
        (
            "query class token, class-specific",
            d(
                QueryClassToken,
                ClassSpecific,
                QueryLossMode::Off,
                alpha,
                0.0,
            ),
        ),
        (
            "+ query loss, full",
            d(
                QueryClassToken,
                ClassSpecific,
                QueryLossMode::Full,
                alpha,
                beta,
            ),
        ),
        (
            "+ query loss, class-specific",
            d(
                QueryClassToken,
                ClassSpecific,
                QueryLossMode::ClassSpecific,
                alpha,
                beta,
            ),
        ),
    ]
}

pub fn ablation_matrix(base: &RunConfig, alpha: f64, beta: f64) -> Result<Vec<AblationRow>> {
    let prepared = prepare_data(base)?;
    let rows = ablation_configs(base, alpha, beta);
    let configs: Vec<RunConfig> = rows.iter().map(|(_, c)| c.clone()).collect();
    let records = run_all(&configs, &prepared)?;
    Ok(rows
        .into_iter()
        .zip(records)
        .enumerate()
        .map(|(i, ((label, config), record))| AblationRow {
            index: i + 1,
            label,
            config,
            record,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_rule_examples() {
        // baseline BA 90, tolerance 1: the run at BA 88 is excluded
        let c = [(10.0, 90.0), (4.0, 88.0), (6.0, 89.5), (6.0, 91.0)];
        assert_eq!(select(&c, 90.0, 1.0), Some(2));
        assert_eq!(select(&[(3.0, 70.0)], 90.0, 1.0), None);
        assert_eq!(select(&[], 90.0, 1.0), None);
    }

    #[test]
    fn ablation_rows_are_distinct_and_ordered() {
        let rows = ablation_configs(&RunConfig::desk(), 0.1, 0.01);
        assert_eq!(rows.len(), 9);
        for i in 0..9 {
            for j in i + 1..9 {
                assert_ne!(rows[i].1, rows[j].1, "rows {} and {}", i + 1, j + 1);
            }
        }
        let Method::Debias(last) = &rows[8].1.method else {
            panic!()
        };
        assert_eq!(*last, DebiasConfig::tadet(0.1, 0.01));
    }

    #[test]
    fn empty_grid_is_an_error() {
        let c = RunConfig::desk().with_method(Method::Debias(DebiasConfig::tadet(0.0, 0.0)));
        let p = Prepared {
            data: crate::data::generate(&crate::data::SyntheticSpec::desk(0.9, 0), 20).unwrap(),
            split: crate::data::SplitSet::standard(20, 0).unwrap(),
        };
        assert!(matches!(
            sweep_on(&c, &[], &[0.0], 1.0, &p),
            Err(Error::Config(_))
        ));
    }
}
