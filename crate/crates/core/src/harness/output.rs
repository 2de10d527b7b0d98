//! Run artifacts: config snapshot, loss logs, checkpoints, reports and the
//! shared results CSV.
//!
//! `results.csv` columns: `run_id, config_hash, method, alpha, beta, gamma,
//! seed, selected_epoch, degenerate`, then `eo, delta_ba, ba, acc, ba_a0,
//! ba_a1, tpr_a0, fpr_a0, tpr_a1, fpr_a1, tnr_a0, tnr_a1, n` on the test split.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use fairvit_autodiff::checkpoint;

use crate::error::Result;
use crate::harness::config::Method;
use crate::harness::experiments::{AblationRow, ScanEntry, SweepResult};
use crate::harness::train::RunRecord;
use crate::metrics::FairnessReport;

pub fn results_header() -> Vec<String> {
    let mut h: Vec<String> = [
        "run_id",
        "config_hash",
        "method",
        "alpha",
        "beta",
        "gamma",
        "seed",
        "selected_epoch",
        "degenerate",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend(
        FairnessReport::CSV_HEADER[1..]
            .iter()
            .map(|s| s.to_string()),
    );
    h
}

pub fn results_row(run_id: &str, r: &RunRecord) -> Vec<String> {
    let (alpha, beta, gamma) = match &r.config.method {
        Method::Debias(d) => (d.alpha, d.beta, 0.0),
        Method::Baseline(s) => (0.0, 0.0, s.gamma()),
    };
    let mut row = vec![
        run_id.to_string(),
        r.config_hash.clone(),
        r.config.method.tag().to_string(),
        alpha.to_string(),
        beta.to_string(),
        gamma.to_string(),
        r.config.seed.to_string(),
        r.selected_epoch.map_or(String::new(), |e| e.to_string()),
        r.degenerate.to_string(),
    ];
    row.extend(r.test.csv_row(run_id).into_iter().skip(1));
    row
}

pub fn write_results(path: &Path, rows: &[(String, &RunRecord)]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(results_header())?;
    for (id, r) in rows {
        w.write_record(results_row(id, r))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `config.txt`, `losses.csv`, `epochs.csv`, `checkpoint.bin`
/// (plus `aux_heads.bin` when present), `report.txt` and `results.csv`.
pub fn write_run(r: &RunRecord, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), r.config.to_text())?;
    let mut w = csv::Writer::from_path(dir.join("losses.csv"))?;
    w.write_record([
        "step",
        "epoch",
        "L_CE",
        "L_adv_disc",
        "L_adv_enc",
        "L_q",
        "L_mmd",
        "total",
    ])?;
    for b in &r.batches {
        w.write_record([
            b.step.to_string(),
            b.epoch.to_string(),
            format!("{:?}", b.ce),
            format!("{:?}", b.adv_disc),
            format!("{:?}", b.adv_enc),
            format!("{:?}", b.l_q),
            format!("{:?}", b.mmd),
            format!("{:?}", b.total),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("epochs.csv"))?;
    w.write_record(["epoch", "train_ce", "train_total", "val_ap"])?;
    for e in &r.epochs {
        w.write_record([
            e.epoch.to_string(),
            format!("{:?}", e.train_ce),
            format!("{:?}", e.train_total),
            format!("{:?}", e.val_ap),
        ])?;
    }
    w.flush()?;
    checkpoint::save(&r.checkpoint, dir.join("checkpoint.bin"))?;
    if !r.aux_heads.is_empty() {
        checkpoint::save(&r.aux_heads, dir.join("aux_heads.bin"))?;
    }
    fs::write(dir.join("report.txt"), run_report(r))?;
    write_results(&dir.join("results.csv"), &[(r.config_hash.clone(), r)])?;
    Ok(())
}

pub fn run_report(r: &RunRecord) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "run {} ({})", r.config_hash, r.config.method.tag());
    match r.selected_epoch {
        Some(e) => {
            let _ = writeln!(
                s,
                "selected epoch {e} (validation weighted AP {:.2})",
                r.val_ap
            );
        }
        None => {
            let _ = writeln!(
                s,
                "degenerate run: no training epochs, initialization metrics"
            );
        }
    }
    let _ = writeln!(s, "\nvalidation\n{}", r.val);
    let _ = writeln!(s, "test\n{}", r.test);
    s
}

pub fn sweep_report(res: &SweepResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{}", res.rule());
    let _ = writeln!(
        s,
        "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "alpha", "beta", "valEO", "valBA", "EO", "|dBA|", "BA", "Acc"
    );
    let line = |s: &mut String, a: String, b: String, r: &RunRecord, mark: &str| {
        let _ = writeln!(
            s,
            "{a:>8} {b:>8} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2}{mark}",
            r.val.equalized_odds,
            r.val.balanced_acc,
            r.test.equalized_odds,
            r.test.delta_ba,
            r.test.balanced_acc,
            r.test.std_acc
        );
    };
    for (i, p) in res.points.iter().enumerate() {
        let mark = if res.selected == Some(i) {
            "  <- selected"
        } else {
            ""
        };
        line(
            &mut s,
            p.alpha.to_string(),
            p.beta.to_string(),
            &p.record,
            mark,
        );
    }
    if !res.points.iter().any(|p| p.alpha == 0.0 && p.beta == 0.0) {
        let mark = if res.selected.is_none() {
            "  <- selected"
        } else {
            ""
        };
        line(&mut s, "base".into(), "base".into(), &res.baseline, mark);
    } else if res.selected.is_none() {
        let _ = writeln!(s, "no run met the rule; baseline selected");
    }
    s
}

pub fn ablation_report(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>2}  {:<36} {:>8} {:>8} {:>8} {:>8}",
        "#", "configuration", "EO", "|dBA|", "BA", "Acc"
    );
    for r in rows {
        let t = &r.record.test;
        let _ = writeln!(
            s,
            "{:>2}  {:<36} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
            r.index, r.label, t.equalized_odds, t.delta_ba, t.balanced_acc, t.std_acc
        );
    }
    s
}

pub fn scan_report(task: &str, entries: &[ScanEntry]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "task {task}: protected attributes by equalized odds");
    for (i, e) in entries.iter().enumerate() {
        let eo = e.eo.map_or("undefined".to_string(), |v| format!("{v:.2}"));
        let flag = if e.degenerate { "  (degenerate)" } else { "" };
        let _ = writeln!(s, "{:>2}. {:<20} {eo:>10}{flag}", i + 1, e.attribute);
    }
    s
}

/// `out_dir` from the config, else `$FAIRVIT_OUT`, else `./runs`.
pub fn output_root(cfg: &crate::harness::RunConfig) -> std::path::PathBuf {
    cfg.out_dir
        .clone()
        .or_else(|| std::env::var_os(crate::harness::OUT_ENV).map(Into::into))
        .unwrap_or_else(|| "runs".into())
}
