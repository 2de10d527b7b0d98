//! Save/load and export/ingest round-trips.

mod common;

use fairvit::data::{
    export_dataset, generate, load_attribute_dataset, parse_attribute_reader, read_image_blob,
    write_attribute_file, AttributeTable, IngestOptions, SyntheticSpec,
};
use fairvit::harness::{output, RunConfig};
use fairvit::inspect::{attribute_gap, build_atlas, export_atlas, load_atlas_csv, Matrix};
use fairvit::vit::{VitConfig, VitModel};
use fairvit_autodiff::checkpoint;
use proptest::prelude::*;

#[test]
fn checkpoint_bytes_survive_save_and_load() {
    let m = VitModel::from_seed(VitConfig::desk(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    checkpoint::save(&m.params, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back, m.params);
    assert_eq!(std::fs::read(&path).unwrap(), checkpoint::to_bytes(&back));
}

#[test]
fn attribute_export_then_ingest_keeps_labels() {
    let spec = SyntheticSpec::desk(0.9, 11).with_independent();
    let d = generate(&spec, 100).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_dataset(&d, dir.path()).unwrap();
    let opts = IngestOptions {
        image_h: 8,
        image_w: 8,
        channels: 1,
        batch_size: 16,
    };
    let back = load_attribute_dataset(
        &dir.path().join("images"),
        &dir.path().join("list_attr.txt"),
        "Target",
        "Spurious",
        opts,
    )
    .unwrap();
    assert_eq!(back.len(), 100);
    assert_eq!(back.ids, d.ids);
    assert_eq!(back.y(), d.y());
    assert_eq!(back.a(), d.a());
    assert_eq!(back.attributes, d.attributes);
    // PNG stores 8-bit pixels
    for (p, q) in back.pixels().iter().zip(d.pixels()) {
        assert!((p - q).abs() <= 0.5 / 255.0 + 1e-12);
    }
    let (shape, px) =
        read_image_blob(std::fs::File::open(dir.path().join("images.bin")).unwrap()).unwrap();
    assert_eq!(shape, [100, 8, 8, 1]);
    assert_eq!(px, d.pixels());
}

#[test]
fn atlas_csv_reproduces_gaps_exactly() {
    let d = generate(&SyntheticSpec::desk(0.9, 5), 200).unwrap();
    let m = VitModel::from_seed(VitConfig::desk(), 9).unwrap();
    let atlas = build_atlas(&m, &d, 1, 64).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let summary = export_atlas(&atlas, dir.path()).unwrap();
    assert_eq!(summary.panels, 4 * 2 * 2 * 8);
    let back = load_atlas_csv(&dir.path().join("atlas.csv"), 1).unwrap();
    assert_eq!(back, atlas);
    for y in 0..2 {
        for mat in [Matrix::Query, Matrix::Key] {
            let g0 = attribute_gap(&atlas, y, mat).unwrap();
            let g1 = attribute_gap(&back, y, mat).unwrap();
            assert_eq!(g0.pooled.to_bits(), g1.pooled.to_bits());
            assert_eq!(g0.per_channel, g1.per_channel);
        }
    }
}

#[test]
fn config_text_round_trips() {
    let mut c = RunConfig::desk();
    for (k, v) in [
        ("method", "tadet"),
        ("debias.alpha", "0.1"),
        ("debias.beta", "0.01"),
        ("lr", "0.00025"),
        ("syn.independent", "true"),
        ("vit.activation", "relu"),
    ] {
        c.set(k, v).unwrap();
    }
    let back = RunConfig::parse(&c.to_text()).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.hash(), c.hash());
    assert_ne!(RunConfig::desk().hash(), c.hash());
}

#[test]
fn results_header_matches_row_width() {
    let h = output::results_header();
    assert_eq!(h.len(), 9 + 13);
    assert_eq!(h[0], "run_id");
    assert_eq!(h[9], "eo");
}

proptest! {
    #[test]
    fn attribute_file_round_trips(
        table in (1usize..5, 1usize..20).prop_flat_map(|(k, n)| {
            proptest::collection::vec(proptest::collection::vec(0u8..2, n), k)
        })
    ) {
        let n = table[0].len();
        let names: Vec<String> = (0..table.len()).map(|i| format!("Attr_{i}")).collect();
        let files: Vec<String> = (0..n).map(|i| format!("{i:06}.jpg")).collect();
        let t = AttributeTable { names: names.clone(), columns: table.clone() };
        let mut buf = Vec::new();
        write_attribute_file(&mut buf, &files, &t).unwrap();
        let parsed = parse_attribute_reader(&buf[..], "mem").unwrap();
        prop_assert_eq!(parsed.names, names);
        prop_assert_eq!(parsed.files, files);
        prop_assert_eq!(parsed.table.columns, table);
    }
}
