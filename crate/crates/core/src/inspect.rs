//! Dataset-averaged query and key activation maps per (y, a) cell, their
//! attribute gaps, and CSV/PGM export.
//!
//! Export layout under the target directory:
//! - `atlas.csv`: `y,a,count,matrix,head,channel,patch,value`, one row per
//!   stored value, written with round-trip float formatting.
//! - `panels/{matrix}_y{y}_a{a}_h{head}_c{channel}.csv`: `patch,value`.
//! - `panels/*.pgm`: binary graymap of the patch grid, min-max scaled per panel.
//! - `panels.csv`: `panel,y,a,matrix,head,channel,min,max,image`.
//! - `gaps.csv`: `y,matrix,head,channel,gap`; head and channel are `all`
//!   for the pooled row.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::vit::{CaptureSpec, VitModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Matrix {
    Query,
    Key,
}

impl Matrix {
    pub fn name(self) -> &'static str {
        match self {
            Matrix::Query => "query",
            Matrix::Key => "key",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "query" => Some(Matrix::Query),
            "key" => Some(Matrix::Key),
            _ => None,
        }
    }

    fn slot(self) -> usize {
        match self {
            Matrix::Query => 0,
            Matrix::Key => 1,
        }
    }
}

/// Running sum with Neumaier compensation.
#[derive(Debug, Clone, Copy, Default)]
struct Compensated {
    sum: f64,
    comp: f64,
}

impl Compensated {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Mean patch activations, stored `[M, N, D]` per cell and matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationAtlas {
    pub layer: usize,
    pub num_heads: usize,
    pub num_patches: usize,
    pub head_dim: usize,
    pub counts: [[usize; 2]; 2],
    /// `cells[y][a][matrix]`, `None` for a cell without samples.
    cells: [[[Option<Vec<f64>>; 2]; 2]; 2],
}

impl ActivationAtlas {
    pub fn empty(layer: usize, num_heads: usize, num_patches: usize, head_dim: usize) -> Self {
        Self {
            layer,
            num_heads,
            num_patches,
            head_dim,
            counts: [[0; 2]; 2],
            cells: Default::default(),
        }
    }

    /// Side of the square patch grid, if `N` is a perfect square.
    pub fn grid_side(&self) -> Option<usize> {
        let s = (self.num_patches as f64).sqrt().round() as usize;
        (s * s == self.num_patches).then_some(s)
    }

    pub fn is_missing(&self, y: u8, a: u8) -> bool {
        self.cells[y as usize][a as usize][0].is_none()
    }

    /// The full `[M, N, D]` mean of one cell.
    pub fn cell(&self, y: u8, a: u8, m: Matrix) -> Option<&[f64]> {
        self.cells[y as usize][a as usize][m.slot()].as_deref()
    }

    pub fn set_cell(&mut self, y: u8, a: u8, m: Matrix, values: Vec<f64>) -> Result<()> {
        let want = self.num_heads * self.num_patches * self.head_dim;
        if values.len() != want {
            return Err(Error::Data(format!(
                "cell has {} values, expected {want}",
                values.len()
            )));
        }
        self.cells[y as usize][a as usize][m.slot()] = Some(values);
        Ok(())
    }

    /// The N-vector of one (head, channel) panel.
    pub fn panel(&self, y: u8, a: u8, m: Matrix, head: usize, channel: usize) -> Option<Vec<f64>> {
        let cell = self.cell(y, a, m)?;
        let (n, d) = (self.num_patches, self.head_dim);
        Some((0..n).map(|p| cell[(head * n + p) * d + channel]).collect())
    }
}

/// Per (head, channel) gaps, indexed `head * D + channel`, and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeGap {
    pub per_channel: Vec<f64>,
    pub pooled: f64,
}

/// `||atlas[y,0] - atlas[y,1]||` over the patch axis per (head, channel).
pub fn attribute_gap(atlas: &ActivationAtlas, y: u8, m: Matrix) -> Result<AttributeGap> {
    let missing = |a: u8| Error::State(format!("gap undefined: cell y={y}, a={a} is missing"));
    let c0 = atlas.cell(y, 0, m).ok_or_else(|| missing(0))?;
    let c1 = atlas.cell(y, 1, m).ok_or_else(|| missing(1))?;
    let (h, n, d) = (atlas.num_heads, atlas.num_patches, atlas.head_dim);
    let mut per = Vec::with_capacity(h * d);
    for head in 0..h {
        for ch in 0..d {
            let s: f64 = (0..n)
                .map(|p| {
                    let i = (head * n + p) * d + ch;
                    (c0[i] - c1[i]).powi(2)
                })
                .sum();
            per.push(s.sqrt());
        }
    }
    let pooled = per.iter().sum::<f64>() / per.len() as f64;
    Ok(AttributeGap {
        per_channel: per,
        pooled,
    })
}

/// Averages patch-position Q and K of `layer` over each (y, a) cell of the
/// dataset, on a frozen model.
pub fn build_atlas(
    model: &VitModel,
    data: &Dataset,
    layer: usize,
    batch_size: usize,
) -> Result<ActivationAtlas> {
    let cfg = &model.cfg;
    if layer >= cfg.num_layers {
        return Err(Error::Range {
            what: "layer",
            index: layer,
            limit: cfg.num_layers,
        });
    }
    let (h, n, d, t) = (
        cfg.num_heads,
        cfg.num_patches(),
        cfg.head_dim,
        cfg.num_tokens(),
    );
    let size = h * n * d;
    let mut acc = vec![vec![vec![Compensated::default(); size]; 2]; 4];
    let mut counts = [[0usize; 2]; 2];
    let idx: Vec<usize> = (0..data.len()).collect();
    let spec = CaptureSpec::Layers(vec![layer]);
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk)?;
        let cap = model.capture(&batch.images, &spec)?;
        let acts = cap.layer(layer)?;
        for (s, (&yy, &aa)) in batch.y.iter().zip(&batch.a).enumerate() {
            let cell = 2 * yy as usize + aa as usize;
            counts[yy as usize][aa as usize] += 1;
            for (slot, src) in [&acts.query, &acts.key].into_iter().enumerate() {
                let dst = &mut acc[cell][slot];
                for head in 0..h {
                    let base = (s * h + head) * t * d;
                    let rows = &src.data()[base..base + n * d];
                    let off = head * n * d;
                    for (k, v) in rows.iter().enumerate() {
                        dst[off + k].add(*v);
                    }
                }
            }
        }
    }
    let mut atlas = ActivationAtlas::empty(layer, h, n, d);
    atlas.counts = counts;
    for yy in 0..2u8 {
        for aa in 0..2u8 {
            let c = counts[yy as usize][aa as usize];
            if c == 0 {
                continue;
            }
            for m in [Matrix::Query, Matrix::Key] {
                let sums = &acc[2 * yy as usize + aa as usize][m.slot()];
                atlas.set_cell(
                    yy,
                    aa,
                    m,
                    sums.iter().map(|s| s.value() / c as f64).collect(),
                )?;
            }
        }
    }
    Ok(atlas)
}

fn panel_name(y: u8, a: u8, m: Matrix, head: usize, ch: usize) -> String {
    format!("{}_y{y}_a{a}_h{head}_c{ch}", m.name())
}

/// Binary P5 graymap of `values` on a `side x side` grid, min-max scaled;
/// a constant panel renders as mid gray.
pub fn render_pgm(values: &[f64], side: usize) -> (Vec<u8>, f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if hi > lo {
            (255.0 * (v - lo) / (hi - lo)).round() as u8
        } else {
            128
        }
    }));
    (out, lo, hi)
}

/// Files written by [`export_atlas`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExportSummary {
    pub panels: usize,
    pub images: usize,
}

pub fn export_atlas(atlas: &ActivationAtlas, dir: &Path) -> Result<ExportSummary> {
    let panel_dir = dir.join("panels");
    fs::create_dir_all(&panel_dir)?;
    let side = atlas.grid_side();
    if side.is_none() {
        log::warn!(
            "{} patches do not form a square grid; writing CSV only",
            atlas.num_patches
        );
    }
    let mut long = csv::Writer::from_path(dir.join("atlas.csv"))?;
    long.write_record([
        "y", "a", "count", "matrix", "head", "channel", "patch", "value",
    ])?;
    let mut index = csv::Writer::from_path(dir.join("panels.csv"))?;
    index.write_record([
        "panel", "y", "a", "matrix", "head", "channel", "min", "max", "image",
    ])?;
    let mut summary = ExportSummary::default();
    for y in 0..2u8 {
        for a in 0..2u8 {
            if atlas.is_missing(y, a) {
                continue;
            }
            let count = atlas.counts[y as usize][a as usize].to_string();
            for m in [Matrix::Query, Matrix::Key] {
                for head in 0..atlas.num_heads {
                    for ch in 0..atlas.head_dim {
                        let vals = atlas.panel(y, a, m, head, ch).expect("present cell");
                        let name = panel_name(y, a, m, head, ch);
                        let mut pw = csv::Writer::from_path(panel_dir.join(format!("{name}.csv")))?;
                        pw.write_record(["patch", "value"])?;
                        for (p, v) in vals.iter().enumerate() {
                            let (ps, vs) = (p.to_string(), format!("{v:?}"));
                            pw.write_record([ps.as_str(), vs.as_str()])?;
                            long.write_record([
                                &y.to_string(),
                                &a.to_string(),
                                &count,
                                m.name(),
                                &head.to_string(),
                                &ch.to_string(),
                                &ps,
                                &vs,
                            ])?;
                        }
                        pw.flush()?;
                        summary.panels += 1;
                        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let image = match side {
                            Some(s) => {
                                let (bytes, _, _) = render_pgm(&vals, s);
                                let file = format!("{name}.pgm");
                                fs::write(panel_dir.join(&file), bytes)?;
                                summary.images += 1;
                                file
                            }
                            None => String::new(),
                        };
                        index.write_record([
                            name.as_str(),
                            &y.to_string(),
                            &a.to_string(),
                            m.name(),
                            &head.to_string(),
                            &ch.to_string(),
                            &format!("{lo:?}"),
                            &format!("{hi:?}"),
                            &image,
                        ])?;
                    }
                }
            }
        }
    }
    long.flush()?;
    index.flush()?;
    write_gaps(atlas, &dir.join("gaps.csv"))?;
    Ok(summary)
}

fn write_gaps(atlas: &ActivationAtlas, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "y,matrix,head,channel,gap")?;
    for y in 0..2u8 {
        for m in [Matrix::Query, Matrix::Key] {
            let Ok(gap) = attribute_gap(atlas, y, m) else {
                continue;
            };
            for (i, g) in gap.per_channel.iter().enumerate() {
                let (head, ch) = (i / atlas.head_dim, i % atlas.head_dim);
                writeln!(w, "{y},{},{head},{ch},{g:?}", m.name())?;
            }
            writeln!(w, "{y},{},all,all,{:?}", m.name(), gap.pooled)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Rebuilds an atlas from `atlas.csv`.
pub fn load_atlas_csv(path: &Path, layer: usize) -> Result<ActivationAtlas> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    let (mut heads, mut patches, mut chans) = (0, 0, 0);
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != 8 {
            return Err(perr(
                line,
                format!("expected 8 fields, found {}", rec.len()),
            ));
        }
        let num = |k: usize| -> Result<usize> {
            rec[k]
                .parse()
                .map_err(|_| perr(line, format!("bad integer {:?}", &rec[k])))
        };
        let (y, a, count) = (num(0)?, num(1)?, num(2)?);
        if y > 1 || a > 1 {
            return Err(perr(line, "cell labels must be 0 or 1".into()));
        }
        let m = Matrix::parse(&rec[3])
            .ok_or_else(|| perr(line, format!("bad matrix {:?}", &rec[3])))?;
        let (head, ch, patch) = (num(4)?, num(5)?, num(6)?);
        let v: f64 = rec[7]
            .parse()
            .map_err(|_| perr(line, format!("bad value {:?}", &rec[7])))?;
        heads = heads.max(head + 1);
        chans = chans.max(ch + 1);
        patches = patches.max(patch + 1);
        rows.push((y as u8, a as u8, count, m, head, ch, patch, v));
    }
    let mut atlas = ActivationAtlas::empty(layer, heads, patches, chans);
    let size = heads * patches * chans;
    let mut cells: [[[Option<Vec<f64>>; 2]; 2]; 2] = Default::default();
    for (y, a, count, m, head, ch, patch, v) in rows {
        atlas.counts[y as usize][a as usize] = count;
        let cell =
            cells[y as usize][a as usize][m.slot()].get_or_insert_with(|| vec![f64::NAN; size]);
        cell[(head * patches + patch) * chans + ch] = v;
    }
    for y in 0..2u8 {
        for a in 0..2u8 {
            for m in [Matrix::Query, Matrix::Key] {
                if let Some(c) = cells[y as usize][a as usize][m.slot()].take() {
                    if c.iter().any(|v| v.is_nan()) {
                        return Err(Error::Data(format!(
                            "cell y={y} a={a} {} is incomplete",
                            m.name()
                        )));
                    }
                    atlas.set_cell(y, a, m, c)?;
                }
            }
        }
    }
    Ok(atlas)
}
