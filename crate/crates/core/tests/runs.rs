//! Whole-run properties: determinism, zero-weight reductions, sweep
//! selection and the output directory layout.

mod common;

use common::desk_seeded;
use fairvit::baselines::{Averaging, MitigationStrategy};
use fairvit::debias::DebiasConfig;
use fairvit::harness::{
    bias_scan, output, prepare_data, select, sweep_on, train, train_on, Method, RunConfig,
};
use fairvit_autodiff::checkpoint;

fn short(seed: u64) -> RunConfig {
    let mut c = desk_seeded(seed);
    c.set("epochs", "3").unwrap();
    c.set("data.n", "2000").unwrap();
    c
}

#[test]
fn same_config_same_record() {
    let c = short(4).with_method(Method::Debias(DebiasConfig::tadet(0.1, 0.1)));
    let a = train(&c).unwrap();
    let b = train(&c).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        checkpoint::to_bytes(&a.checkpoint),
        checkpoint::to_bytes(&b.checkpoint)
    );
}

#[test]
fn zero_weights_reproduce_the_plain_run() {
    let base = short(1);
    let p = prepare_data(&base).unwrap();
    let plain = train_on(&base.clone().with_method(Method::plain()), &p).unwrap();
    let plain_bytes = checkpoint::to_bytes(&plain.checkpoint);
    let zero_weight = [
        Method::Debias(DebiasConfig::tadet(0.0, 0.0)),
        Method::Debias(DebiasConfig::dann(0.0)),
        Method::Baseline(MitigationStrategy::Mmd { gamma: 0.0 }),
        Method::Baseline(MitigationStrategy::Dann { gamma: 0.0 }),
        Method::Baseline(MitigationStrategy::LaftrEo { gamma: 0.0 }),
    ];
    for m in zero_weight {
        let tag = m.tag();
        let r = train_on(&base.clone().with_method(m), &p).unwrap();
        assert_eq!(checkpoint::to_bytes(&r.checkpoint), plain_bytes, "{tag}");
        assert_eq!(r.test, plain.test, "{tag}");
        assert_eq!(r.test_probs, plain.test_probs, "{tag}");
    }
}

#[test]
fn domain_independent_leaves_the_task_head_untouched() {
    let base = short(2);
    let p = prepare_data(&base).unwrap();
    let plain0 = {
        let mut c = base.clone();
        c.epochs = 0;
        train_on(&c, &p).unwrap()
    };
    let di = train_on(
        &base.with_method(Method::Baseline(MitigationStrategy::DomainIndependent {
            averaging: Averaging::Logits,
        })),
        &p,
    )
    .unwrap();
    assert!(di.aux_heads.names().any(|n| n.starts_with("di.a0")));
    assert!(di.aux_heads.names().any(|n| n.starts_with("di.a1")));
    for (name, t) in di.checkpoint.iter() {
        if name.starts_with("head.") {
            assert_eq!(t, plain0.checkpoint.get(name).unwrap(), "{name}");
        }
    }
    assert_ne!(di.checkpoint.checksum(), plain0.checkpoint.checksum());
}

#[test]
fn training_bce_decreases_over_the_first_epochs() {
    let mut c = desk_seeded(0);
    c.set("epochs", "5").unwrap();
    let r = train(&c).unwrap();
    let ce: Vec<f64> = r.epochs.iter().map(|e| e.train_ce).collect();
    assert_eq!(ce.len(), 5);
    assert!(ce[1] < ce[0] && ce[2] < ce[1], "{ce:?}");
}

#[test]
fn sweep_selection_matches_external_rule() {
    let base = short(3).with_method(Method::Debias(DebiasConfig::tadet(0.0, 0.0)));
    let p = prepare_data(&base).unwrap();
    let only_base = sweep_on(&base, &[0.0], &[0.0], 1.0, &p).unwrap();
    assert_eq!(only_base.points.len(), 1);
    assert_eq!(only_base.selected_record(), &only_base.baseline);

    let r = sweep_on(&base, &[0.0, 0.5], &[0.0, 0.5], 1.0, &p).unwrap();
    assert_eq!(r.points.len(), 4);
    let base_ba = r.baseline.val.balanced_acc;
    let mut want: Option<(usize, f64)> = None;
    for (i, pt) in r.points.iter().enumerate() {
        let v = &pt.record.val;
        if v.balanced_acc >= base_ba - 1.0 && want.is_none_or(|(_, eo)| v.equalized_odds < eo) {
            want = Some((i, v.equalized_odds));
        }
    }
    assert_eq!(r.selected, want.map(|w| w.0));
    assert_eq!(
        r.selected,
        select(
            &r.points
                .iter()
                .map(|p| (p.record.val.equalized_odds, p.record.val.balanced_acc))
                .collect::<Vec<_>>(),
            base_ba,
            1.0
        )
    );
    assert!(output::sweep_report(&r).starts_with("selection: minimize validation EO"));
}

#[test]
fn scan_edge_cases() {
    let mut c = short(5);
    c.set("syn.independent", "true").unwrap();
    let (one, _) = bias_scan(&c, &["Spurious".to_string()]).unwrap();
    assert_eq!(one.len(), 1);
    let (with_task, _) = bias_scan(&c, &["Target".to_string(), "Independent".to_string()]).unwrap();
    let t = with_task.iter().find(|e| e.attribute == "Target").unwrap();
    assert!(t.degenerate);
    assert!(bias_scan(&c, &["Missing".to_string()]).is_err());
}

#[test]
fn run_directory_layout() {
    let c = short(6).with_method(Method::Debias(DebiasConfig::tadet(0.1, 0.1)));
    let r = train(&c).unwrap();
    assert_eq!(r.test_accesses, 1);
    let dir = tempfile::tempdir().unwrap();
    output::write_run(&r, dir.path()).unwrap();
    for f in [
        "config.txt",
        "losses.csv",
        "epochs.csv",
        "checkpoint.bin",
        "report.txt",
        "results.csv",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let cfg = RunConfig::from_file(&dir.path().join("config.txt")).unwrap();
    assert_eq!(cfg.hash(), r.config_hash);
    assert_eq!(
        checkpoint::load(dir.path().join("checkpoint.bin")).unwrap(),
        r.checkpoint
    );
    let losses = std::fs::read_to_string(dir.path().join("losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 1 + r.batches.len());
    assert!(losses.starts_with("step,epoch,L_CE,L_adv_disc,L_adv_enc,L_q,L_mmd,total"));
}
