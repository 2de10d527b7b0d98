//! Labeled image data: a synthetic generator with a tunable spurious
//! attribute, CelebA-style attribute files, splits and batching.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use fairvit_autodiff::Tensor;
use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Images `[B, H, W, C]` in [0,1] with task label `y` and protected `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub images: Tensor,
    pub y: Vec<u8>,
    pub a: Vec<u8>,
    pub ids: Vec<String>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn new(row: usize, col: usize, h: usize, w: usize) -> Self {
        Self { row, col, h, w }
    }

    fn overlaps(&self, o: &Rect) -> bool {
        self.row < o.row + o.h
            && o.row < self.row + self.h
            && self.col < o.col + o.w
            && o.col < self.col + self.w
    }

    fn contains(&self, r: usize, c: usize) -> bool {
        (self.row..self.row + self.h).contains(&r) && (self.col..self.col + self.w).contains(&c)
    }
}

/// A binary attribute drawn conditionally on `y` and stamped as a patch.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeSpec {
    pub name: String,
    /// P(attr=1 | y=1) = P(attr=0 | y=0).
    pub rho: f64,
    pub marker: Rect,
    pub contrast: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub p_y: f64,
    pub noise_sigma: f64,
    pub background: f64,
    pub task_name: String,
    pub y_marker: Rect,
    pub y_contrast: f64,
    /// Per-image intensity jitter shared by every pixel of the y-marker.
    pub y_jitter: f64,
    /// The first entry is the protected attribute.
    pub attributes: Vec<AttributeSpec>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::desk(0.9, 0)
    }
}

impl SyntheticSpec {
    /// 8x8 grayscale: a jittered center bar marks y=1 and a faint top-left
    /// square marks the protected attribute.
    pub fn desk(rho: f64, seed: u64) -> Self {
        Self {
            image_h: 8,
            image_w: 8,
            channels: 1,
            p_y: 0.5,
            noise_sigma: 0.1,
            background: 0.3,
            task_name: "Target".into(),
            y_marker: Rect::new(3, 1, 2, 6),
            y_contrast: 0.45,
            y_jitter: 0.15,
            attributes: vec![AttributeSpec {
                name: "Spurious".into(),
                rho,
                marker: Rect::new(0, 0, 2, 2),
                contrast: 0.25,
            }],
            seed,
        }
    }

    /// Desk layout plus an independent attribute in the top-right corner.
    pub fn with_independent(mut self) -> Self {
        self.attributes.push(AttributeSpec {
            name: "Independent".into(),
            rho: 0.5,
            marker: Rect::new(0, self.image_w - 2, 2, 2),
            contrast: 0.25,
        });
        self
    }

    pub fn rho(&self) -> f64 {
        self.attributes.first().map_or(0.5, |a| a.rho)
    }

    pub fn protected_name(&self) -> &str {
        &self.attributes[0].name
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} outside [0,1]")))
            }
        };
        prob("p_y", self.p_y)?;
        if self.image_h == 0 || self.image_w == 0 || self.channels == 0 {
            return Err(Error::Config("image extents must be positive".into()));
        }
        if self.attributes.is_empty() {
            return Err(Error::Config("at least one attribute is required".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.y_jitter >= 0.0) {
            return Err(Error::Config("noise levels must be >= 0".into()));
        }
        let mut markers = vec![("y", self.y_marker)];
        for a in &self.attributes {
            prob(&format!("{}.rho", a.name), a.rho)?;
            markers.push((a.name.as_str(), a.marker));
        }
        for (i, (n1, r1)) in markers.iter().enumerate() {
            if r1.h == 0
                || r1.w == 0
                || r1.row + r1.h > self.image_h
                || r1.col + r1.w > self.image_w
            {
                return Err(Error::Config(format!(
                    "marker {n1} {r1:?} outside the image"
                )));
            }
            for (n2, r2) in &markers[i + 1..] {
                if r1.overlaps(r2) {
                    return Err(Error::Config(format!("markers {n1} and {n2} overlap")));
                }
            }
        }
        let mut names: Vec<&str> = self.attributes.iter().map(|a| a.name.as_str()).collect();
        names.push(&self.task_name);
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("attribute names must be unique".into()));
        }
        Ok(())
    }
}

/// Named binary columns, one row per sample.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AttributeTable {
    pub names: Vec<String>,
    pub columns: Vec<Vec<u8>>,
}

impl AttributeTable {
    pub fn column(&self, name: &str) -> Result<&[u8]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
            .ok_or_else(|| Error::UnknownAttribute {
                name: name.into(),
                available: self.names.clone(),
            })
    }

    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            names: self.names.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| idx.iter().map(|&i| c[i]).collect())
                .collect(),
        }
    }
}

/// An in-memory image set with its attribute table and the chosen task and
/// protected columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub image_shape: [usize; 3],
    images: Arc<Vec<f64>>,
    pub ids: Vec<String>,
    pub attributes: AttributeTable,
    pub task: String,
    pub protected: String,
    y: Vec<u8>,
    a: Vec<u8>,
}

impl Dataset {
    pub fn new(
        image_shape: [usize; 3],
        images: Vec<f64>,
        ids: Vec<String>,
        attributes: AttributeTable,
        task: &str,
        protected: &str,
    ) -> Result<Self> {
        let per: usize = image_shape.iter().product();
        if per == 0 || images.len() != per * ids.len() || attributes.len() != ids.len() {
            return Err(Error::Data(format!(
                "{} pixel values, {} ids, {} attribute rows for image shape {image_shape:?}",
                images.len(),
                ids.len(),
                attributes.len()
            )));
        }
        let y = attributes.column(task)?.to_vec();
        let a = attributes.column(protected)?.to_vec();
        Ok(Self {
            image_shape,
            images: Arc::new(images),
            ids,
            attributes,
            task: task.into(),
            protected: protected.into(),
            y,
            a,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn y(&self) -> &[u8] {
        &self.y
    }

    pub fn a(&self) -> &[u8] {
        &self.a
    }

    pub fn pixels(&self) -> &[f64] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let per: usize = self.image_shape.iter().product();
        &self.images[i * per..(i + 1) * per]
    }

    /// Same images with another column as the protected attribute.
    pub fn with_protected(&self, name: &str) -> Result<Self> {
        let mut d = self.clone();
        d.a = self.attributes.column(name)?.to_vec();
        d.protected = name.into();
        Ok(d)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut images = Vec::with_capacity(idx.len() * self.image(0).len());
        for &i in idx {
            images.extend_from_slice(self.image(i));
        }
        Self {
            image_shape: self.image_shape,
            images: Arc::new(images),
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            attributes: self.attributes.subset(idx),
            task: self.task.clone(),
            protected: self.protected.clone(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            a: idx.iter().map(|&i| self.a[i]).collect(),
        }
    }

    pub fn batch(&self, idx: &[usize]) -> Result<LabeledBatch> {
        if idx.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let mut data = Vec::with_capacity(idx.len() * self.image(0).len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Range {
                    what: "sample",
                    index: i,
                    limit: self.len(),
                });
            }
            data.extend_from_slice(self.image(i));
        }
        let [h, w, c] = self.image_shape;
        Ok(LabeledBatch {
            images: Tensor::new(vec![idx.len(), h, w, c], data)?,
            y: idx.iter().map(|&i| self.y[i]).collect(),
            a: idx.iter().map(|&i| self.a[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
        })
    }

    pub fn all(&self) -> Result<LabeledBatch> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Sample counts `[y][a]`.
    pub fn cell_counts(&self) -> [[usize; 2]; 2] {
        cell_counts(&self.y, &self.a)
    }
}

pub fn cell_counts(y: &[u8], a: &[u8]) -> [[usize; 2]; 2] {
    let mut c = [[0; 2]; 2];
    for (&yy, &aa) in y.iter().zip(a) {
        c[yy as usize][aa as usize] += 1;
    }
    c
}

/// Draws `n` samples; a pure function of `spec` (including its seed).
pub fn generate(spec: &SyntheticSpec, n: usize) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("sample count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w, c) = (spec.image_h, spec.image_w, spec.channels);
    let mut images = Vec::with_capacity(n * h * w * c);
    let mut task = Vec::with_capacity(n);
    let mut cols = vec![Vec::with_capacity(n); spec.attributes.len()];
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    for _ in 0..n {
        let y = u8::from(rng.random::<f64>() < spec.p_y);
        let attrs: Vec<u8> = spec
            .attributes
            .iter()
            .map(|at| {
                let p1 = if y == 1 { at.rho } else { 1.0 - at.rho };
                u8::from(rng.random::<f64>() < p1)
            })
            .collect();
        let jitter = spec.y_jitter * normal(&mut rng);
        for r in 0..h {
            for col in 0..w {
                let mut base = spec.background;
                if spec.y_marker.contains(r, col) {
                    base += jitter + f64::from(y) * spec.y_contrast;
                }
                for (at, &v) in spec.attributes.iter().zip(&attrs) {
                    if at.marker.contains(r, col) {
                        base += f64::from(v) * at.contrast;
                    }
                }
                for _ in 0..c {
                    let px = base + spec.noise_sigma * normal(&mut rng);
                    images.push(px.clamp(0.0, 1.0));
                }
            }
        }
        task.push(y);
        for (col, v) in cols.iter_mut().zip(attrs) {
            col.push(v);
        }
    }
    let mut names = vec![spec.task_name.clone()];
    names.extend(spec.attributes.iter().map(|a| a.name.clone()));
    let mut columns = vec![task];
    columns.extend(cols);
    let ids = (0..n).map(|i| format!("{i:06}.png")).collect();
    Dataset::new(
        [h, w, c],
        images,
        ids,
        AttributeTable { names, columns },
        &spec.task_name,
        spec.protected_name(),
    )
}

/// Parsed attribute list: attribute names and, per row, a filename and one
/// {0,1} value per attribute (+1 maps to 1, -1 to 0).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeFile {
    pub names: Vec<String>,
    pub files: Vec<String>,
    pub table: AttributeTable,
}

pub fn parse_attribute_file(path: &Path) -> Result<AttributeFile> {
    let f = File::open(path)?;
    parse_attribute_reader(BufReader::new(f), &path.display().to_string())
}

pub fn parse_attribute_reader<R: BufRead>(reader: R, source: &str) -> Result<AttributeFile> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: source.into(),
        line,
        msg,
    };
    let mut lines = reader.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, l)) => Ok((i + 1, l?)),
            None => Err(perr(0, format!("missing {what}"))),
        }
    };
    let (ln, count_line) = next("sample count")?;
    let count: usize = count_line
        .trim()
        .parse()
        .map_err(|_| perr(ln, format!("bad sample count {count_line:?}")))?;
    let (_, header) = next("attribute names")?;
    let names: Vec<String> = header.split_whitespace().map(String::from).collect();
    if names.is_empty() {
        return Err(perr(2, "no attribute names".into()));
    }
    let mut files = Vec::with_capacity(count);
    let mut columns = vec![Vec::with_capacity(count); names.len()];
    for (i, line) in lines {
        let line = line?;
        let ln = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        let file = toks.next().expect("non-empty line");
        let vals: Vec<&str> = toks.collect();
        if vals.len() != names.len() {
            return Err(perr(
                ln,
                format!(
                    "expected {} attribute values, found {}",
                    names.len(),
                    vals.len()
                ),
            ));
        }
        for (col, tok) in columns.iter_mut().zip(vals) {
            col.push(match tok {
                "1" | "+1" => 1,
                "-1" => 0,
                other => return Err(perr(ln, format!("attribute value {other:?} is not +-1"))),
            });
        }
        files.push(file.to_string());
    }
    if files.len() != count {
        return Err(perr(
            1,
            format!("header declares {count} samples, found {}", files.len()),
        ));
    }
    Ok(AttributeFile {
        table: AttributeTable {
            names: names.clone(),
            columns,
        },
        names,
        files,
    })
}

pub fn write_attribute_file<W: Write>(
    mut out: W,
    files: &[String],
    table: &AttributeTable,
) -> Result<()> {
    writeln!(out, "{}", files.len())?;
    writeln!(out, "{}", table.names.join(" "))?;
    for (i, f) in files.iter().enumerate() {
        write!(out, "{f}")?;
        for col in &table.columns {
            write!(out, " {}", if col[i] == 1 { " 1" } else { "-1" })?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Target geometry for loaded images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestOptions {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub batch_size: usize,
}

/// Center-crops to the target aspect ratio, resizes, and scales to [0,1].
pub fn load_image(path: &Path, opts: &IngestOptions) -> Result<Vec<f64>> {
    let img = image::open(path)?;
    Ok(convert_image(img, opts))
}

fn convert_image(img: DynamicImage, opts: &IngestOptions) -> Vec<f64> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let target = opts.image_w as f64 / opts.image_h as f64;
    let (cw, ch) = if w / h > target {
        ((h * target).round().max(1.0), h)
    } else {
        (w, (w / target).round().max(1.0))
    };
    let x0 = ((w - cw) / 2.0).floor() as u32;
    let y0 = ((h - ch) / 2.0).floor() as u32;
    let img = img.crop_imm(x0, y0, cw as u32, ch as u32);
    let img = if img.width() as usize == opts.image_w && img.height() as usize == opts.image_h {
        img
    } else {
        img.resize_exact(
            opts.image_w as u32,
            opts.image_h as u32,
            FilterType::Triangle,
        )
    };
    let raw: Vec<u8> = match opts.channels {
        1 => img.to_luma8().into_raw(),
        _ => img.to_rgb8().into_raw(),
    };
    raw.into_iter().map(|v| f64::from(v) / 255.0).collect()
}

/// Streams batches of images listed in an attribute file.
pub struct AttributeStream {
    dir: PathBuf,
    file: AttributeFile,
    y: Vec<u8>,
    a: Vec<u8>,
    opts: IngestOptions,
    pos: usize,
}

impl AttributeStream {
    pub fn attribute_file(&self) -> &AttributeFile {
        &self.file
    }
}

impl Iterator for AttributeStream {
    type Item = Result<LabeledBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.file.files.len() {
            return None;
        }
        let end = (self.pos + self.opts.batch_size).min(self.file.files.len());
        let range = self.pos..end;
        self.pos = end;
        let load = || -> Result<LabeledBatch> {
            let mut data = Vec::new();
            for f in &self.file.files[range.clone()] {
                data.extend(load_image(&self.dir.join(f), &self.opts)?);
            }
            let o = &self.opts;
            Ok(LabeledBatch {
                images: Tensor::new(vec![range.len(), o.image_h, o.image_w, o.channels], data)?,
                y: self.y[range.clone()].to_vec(),
                a: self.a[range.clone()].to_vec(),
                ids: self.file.files[range.clone()].to_vec(),
            })
        };
        Some(load())
    }
}

/// Opens `attr_file` and checks both attribute names before any image is read.
pub fn ingest_attribute_file(
    image_dir: &Path,
    attr_file: &Path,
    task: &str,
    attr: &str,
    opts: IngestOptions,
) -> Result<AttributeStream> {
    if opts.batch_size == 0 || opts.image_h == 0 || opts.image_w == 0 {
        return Err(Error::Config(
            "ingest geometry and batch size must be positive".into(),
        ));
    }
    if opts.channels != 1 && opts.channels != 3 {
        return Err(Error::Config(format!(
            "{} channels unsupported",
            opts.channels
        )));
    }
    let file = parse_attribute_file(attr_file)?;
    let y = file.table.column(task)?.to_vec();
    let a = file.table.column(attr)?.to_vec();
    Ok(AttributeStream {
        dir: image_dir.to_path_buf(),
        file,
        y,
        a,
        opts,
        pos: 0,
    })
}

/// Loads every listed image into a [`Dataset`].
pub fn load_attribute_dataset(
    image_dir: &Path,
    attr_file: &Path,
    task: &str,
    attr: &str,
    opts: IngestOptions,
) -> Result<Dataset> {
    let stream = ingest_attribute_file(image_dir, attr_file, task, attr, opts)?;
    let file = stream.attribute_file().clone();
    let mut images = Vec::new();
    for b in stream {
        images.extend_from_slice(b?.images.data());
    }
    Dataset::new(
        [opts.image_h, opts.image_w, opts.channels],
        images,
        file.files,
        file.table,
        task,
        attr,
    )
}

pub const BLOB_MAGIC: &[u8; 8] = b"FAIRIMG1";

/// `FAIRIMG1`, u32 count/h/w/c, then f64 pixels, little-endian.
pub fn write_image_blob<W: Write>(mut out: W, d: &Dataset) -> Result<()> {
    out.write_all(BLOB_MAGIC)?;
    let [h, w, c] = d.image_shape;
    for v in [d.len(), h, w, c] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    for v in d.pixels() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Returns `(shape, pixels)` of an image blob.
pub fn read_image_blob<R: Read>(mut input: R) -> Result<([usize; 4], Vec<f64>)> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != BLOB_MAGIC {
        return Err(Error::Data("not an image blob".into()));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        let mut b = [0u8; 4];
        input.read_exact(&mut b)?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let n: usize = dims.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        input.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok((dims, out))
}

/// Writes `list_attr.txt`, one PNG per sample under `images/`, and
/// `images.bin` with the exact pixels.
pub fn export_dataset(d: &Dataset, dir: &Path) -> Result<()> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir)?;
    write_attribute_file(
        BufWriter::new(File::create(dir.join("list_attr.txt"))?),
        &d.ids,
        &d.attributes,
    )?;
    let [h, w, c] = d.image_shape;
    for i in 0..d.len() {
        let bytes: Vec<u8> = d
            .image(i)
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let path = img_dir.join(&d.ids[i]);
        match c {
            1 => GrayImage::from_raw(w as u32, h as u32, bytes)
                .expect("buffer size")
                .save(path)?,
            3 => RgbImage::from_raw(w as u32, h as u32, bytes)
                .expect("buffer size")
                .save(path)?,
            _ => return Err(Error::Config(format!("cannot write {c}-channel images"))),
        }
    }
    write_image_blob(BufWriter::new(File::create(dir.join("images.bin"))?), d)?;
    Ok(())
}

/// Train/validation/test index lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSet {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSet {
    /// Seeded permutation of `0..n` cut at the given train/val fractions.
    pub fn new(n: usize, seed: u64, train_frac: f64, val_frac: f64) -> Result<Self> {
        if !(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac <= 1.0) {
            return Err(Error::Config(format!(
                "split fractions {train_frac}/{val_frac} invalid"
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = (n as f64 * train_frac).round() as usize;
        let n_val = ((n as f64 * val_frac).round() as usize).min(n - n_train);
        let test = idx.split_off(n_train + n_val);
        let val = idx.split_off(n_train);
        Ok(Self {
            train: idx,
            val,
            test,
        })
    }

    pub fn standard(n: usize, seed: u64) -> Result<Self> {
        Self::new(n, seed, 0.8, 0.1)
    }
}

/// One epoch of mini-batches over `indices`.
///
/// With `stratify` and `batch_size >= 4`, each (y, a) cell is shuffled and
/// spread evenly over `ceil(n / batch_size)` batches; a cell smaller than the
/// batch count is cycled so every batch still holds one of its samples.
/// Otherwise the indices are shuffled and chunked.
pub fn stratified_batches(
    indices: &[usize],
    y: &[u8],
    a: &[u8],
    batch_size: usize,
    stratify: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if indices.is_empty() {
        return Ok(Vec::new());
    }
    if !stratify || batch_size < 4 {
        let mut idx = indices.to_vec();
        idx.shuffle(rng);
        return Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect());
    }
    let nb = indices.len().div_ceil(batch_size);
    let mut batches = vec![Vec::with_capacity(batch_size + 4); nb];
    for yv in 0..2u8 {
        for av in 0..2u8 {
            let mut cell: Vec<usize> = indices
                .iter()
                .copied()
                .filter(|&i| y[i] == yv && a[i] == av)
                .collect();
            if cell.is_empty() {
                continue;
            }
            cell.shuffle(rng);
            let nc = cell.len();
            if nc < nb {
                for (k, b) in batches.iter_mut().enumerate() {
                    b.push(cell[k % nc]);
                }
            } else {
                for (k, b) in batches.iter_mut().enumerate() {
                    let (lo, hi) = (k * nc / nb, (k + 1) * nc / nb);
                    b.extend_from_slice(&cell[lo..hi]);
                }
            }
        }
    }
    for b in &mut batches {
        b.shuffle(rng);
    }
    batches.shuffle(rng);
    Ok(batches)
}
