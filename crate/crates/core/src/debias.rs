//! Attribute adversaries on encoder activations and the query-activation
//! alignment loss.
//!
//! The adversary is trained by alternating updates: a discriminator step on
//! detached features, then an encoder step that maximizes the same BCE with
//! the adversary frozen.

use fairvit_autodiff::{Bindings, ParamStore, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::head::{head_prob, init_head};
use crate::vit::{Activation, ForwardPass, VitConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdversaryInput {
    /// Final-layer class-token features feeding the task head.
    Penultimate,
    /// All query activations of the target layer, flattened.
    QueryFull,
    /// Class-token slice of the target layer's queries.
    QueryClassToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignMode {
    /// One adversary over every sample.
    Full,
    /// One adversary per task label, each on its own y-subset.
    ClassSpecific,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryLossMode {
    Off,
    Full,
    ClassSpecific,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryNorm {
    /// L2 norm over the patch axis for each (head, channel).
    PatchL2,
    /// Sum of per-patch absolute differences for each (head, channel).
    ElementAbs,
}

impl AdversaryInput {
    pub fn name(self) -> &'static str {
        match self {
            AdversaryInput::Penultimate => "penultimate",
            AdversaryInput::QueryFull => "query_full",
            AdversaryInput::QueryClassToken => "query_class_token",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            AdversaryInput::Penultimate,
            AdversaryInput::QueryFull,
            AdversaryInput::QueryClassToken,
        ]
        .into_iter()
        .find(|v| v.name() == s)
    }

    /// Feature width seen by the adversary.
    pub fn dim(self, cfg: &VitConfig) -> usize {
        match self {
            AdversaryInput::Penultimate | AdversaryInput::QueryClassToken => cfg.embed_dim(),
            AdversaryInput::QueryFull => cfg.embed_dim() * cfg.num_tokens(),
        }
    }
}

impl AlignMode {
    pub fn name(self) -> &'static str {
        match self {
            AlignMode::Full => "full",
            AlignMode::ClassSpecific => "class_specific",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [AlignMode::Full, AlignMode::ClassSpecific]
            .into_iter()
            .find(|v| v.name() == s)
    }

    /// Parameter prefixes of the adversary heads.
    pub fn head_prefixes(self) -> &'static [&'static str] {
        match self {
            AlignMode::Full => &["adv.all"],
            AlignMode::ClassSpecific => &["adv.y0", "adv.y1"],
        }
    }
}

impl QueryLossMode {
    pub fn name(self) -> &'static str {
        match self {
            QueryLossMode::Off => "off",
            QueryLossMode::Full => "full",
            QueryLossMode::ClassSpecific => "class_specific",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            QueryLossMode::Off,
            QueryLossMode::Full,
            QueryLossMode::ClassSpecific,
        ]
        .into_iter()
        .find(|v| v.name() == s)
    }
}

impl QueryNorm {
    pub fn name(self) -> &'static str {
        match self {
            QueryNorm::PatchL2 => "patch_l2",
            QueryNorm::ElementAbs => "element_abs",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [QueryNorm::PatchL2, QueryNorm::ElementAbs]
            .into_iter()
            .find(|v| v.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DebiasConfig {
    pub alpha: f64,
    pub beta: f64,
    pub adversary_input: AdversaryInput,
    pub adversarial_mode: AlignMode,
    pub query_loss_mode: QueryLossMode,
    pub query_norm: QueryNorm,
    /// Encoder layer whose queries are used; `None` means the last.
    pub target_layer: Option<usize>,
}

impl Default for DebiasConfig {
    fn default() -> Self {
        Self::tadet(0.0, 0.0)
    }
}

impl DebiasConfig {
    /// Class-specific adversary on the query class token plus
    /// class-specific query alignment.
    pub fn tadet(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            adversary_input: AdversaryInput::QueryClassToken,
            adversarial_mode: AlignMode::ClassSpecific,
            query_loss_mode: QueryLossMode::ClassSpecific,
            query_norm: QueryNorm::PatchL2,
            target_layer: None,
        }
    }

    /// Single adversary on the penultimate features, no query loss.
    pub fn dann(alpha: f64) -> Self {
        Self {
            alpha,
            beta: 0.0,
            adversary_input: AdversaryInput::Penultimate,
            adversarial_mode: AlignMode::Full,
            query_loss_mode: QueryLossMode::Off,
            query_norm: QueryNorm::PatchL2,
            target_layer: None,
        }
    }

    pub fn validate(&self, vit: &VitConfig) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha {} must be >= 0", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta {} must be >= 0", self.beta)));
        }
        if let Some(l) = self.target_layer {
            if l >= vit.num_layers {
                return Err(Error::Range {
                    what: "target layer",
                    index: l,
                    limit: vit.num_layers,
                });
            }
        }
        Ok(())
    }

    pub fn layer(&self, vit: &VitConfig) -> usize {
        self.target_layer.unwrap_or(vit.num_layers - 1)
    }

    pub fn adversary_active(&self) -> bool {
        self.alpha > 0.0
    }

    pub fn query_loss_active(&self) -> bool {
        self.beta > 0.0 && self.query_loss_mode != QueryLossMode::Off
    }
}

/// Registers the adversary heads for `cfg` into `store`.
pub fn init_adversary(
    store: &mut ParamStore,
    cfg: &DebiasConfig,
    vit: &VitConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let dim = cfg.adversary_input.dim(vit);
    for prefix in cfg.adversarial_mode.head_prefixes() {
        init_head(store, prefix, dim, vit.head_hidden, rng)?;
    }
    Ok(())
}

/// The adversary's input features `[B, F]` for a forward pass.
pub fn adversary_features(
    tape: &mut Tape,
    pass: &ForwardPass,
    cfg: &DebiasConfig,
    vit: &VitConfig,
) -> Result<Var> {
    let layer = cfg.layer(vit);
    match cfg.adversary_input {
        AdversaryInput::Penultimate => Ok(pass.features),
        AdversaryInput::QueryClassToken => pass.query_class_token(tape, layer, vit),
        AdversaryInput::QueryFull => pass.query_full(tape, layer),
    }
}

fn indices_where(v: &[u8], value: u8) -> Vec<usize> {
    (0..v.len()).filter(|&i| v[i] == value).collect()
}

/// BCE of the adversary predicting `a` from `features` `[B, F]`.
///
/// In class-specific mode each head sees only its y-subset and the head
/// losses are weighted by subset size, so the result is a per-sample mean.
/// A head with an empty subset is skipped.
pub fn adversary_loss(
    tape: &mut Tape,
    adv: &Bindings,
    features: Var,
    y: &[u8],
    a: &[u8],
    mode: AlignMode,
    act: Activation,
) -> Result<Var> {
    let bsz = tape.shape(features)[0];
    if y.len() != bsz || a.len() != bsz {
        return Err(Error::Data(format!(
            "{} features, {} labels, {} attributes",
            bsz,
            y.len(),
            a.len()
        )));
    }
    let target: Vec<f64> = a.iter().map(|&v| f64::from(v)).collect();
    match mode {
        AlignMode::Full => {
            let p = head_prob(tape, adv, "adv.all", features, act)?;
            Ok(tape.bce(p, &target)?)
        }
        AlignMode::ClassSpecific => {
            let mut total: Option<Var> = None;
            for (yv, prefix) in [(0u8, "adv.y0"), (1u8, "adv.y1")] {
                let rows = indices_where(y, yv);
                if rows.is_empty() {
                    log::debug!("no y={yv} samples in batch; skipping {prefix}");
                    continue;
                }
                let sub = tape.select_rows(features, &rows)?;
                let p = head_prob(tape, adv, prefix, sub, act)?;
                let t: Vec<f64> = rows.iter().map(|&i| target[i]).collect();
                let l = tape.bce(p, &t)?;
                let l = tape.scale(l, rows.len() as f64 / bsz as f64)?;
                total = Some(match total {
                    Some(acc) => tape.add(acc, l)?,
                    None => l,
                });
            }
            total.ok_or_else(|| Error::Data("empty batch".into()))
        }
    }
}

/// Discriminator and encoder objectives on the same features.
///
/// The discriminator loss reads `features` through a detached copy so its
/// gradient never reaches the encoder. The encoder loss is the negated BCE
/// on the live features; the caller binds the adversary frozen for it.
pub fn adversarial_losses(
    tape: &mut Tape,
    adv: &Bindings,
    features: Var,
    y: &[u8],
    a: &[u8],
    mode: AlignMode,
    act: Activation,
) -> Result<(Var, Var)> {
    let detached = tape.detach(features);
    let disc = adversary_loss(tape, adv, detached, y, a, mode, act)?;
    let live = adversary_loss(tape, adv, features, y, a, mode, act)?;
    let enc = tape.neg(live)?;
    Ok((disc, enc))
}

/// Mean query activation of one (y, a) cell and its sample count.
#[derive(Debug, Clone, Copy)]
pub struct CellMean {
    pub mean: Var,
    pub count: usize,
}

/// `cells[y][a]`, `None` where the batch has no such sample.
#[derive(Debug, Clone, Copy)]
pub struct GroupMeans {
    pub cells: [[Option<CellMean>; 2]; 2],
}

impl GroupMeans {
    pub fn get(&self, y: u8, a: u8) -> Option<CellMean> {
        self.cells[y as usize][a as usize]
    }
}

/// Per-cell means of `q` `[B, M, N, D]` over the samples of each (y, a).
pub fn average_query_by_group(tape: &mut Tape, q: Var, y: &[u8], a: &[u8]) -> Result<GroupMeans> {
    let bsz = tape.shape(q)[0];
    if y.len() != bsz || a.len() != bsz {
        return Err(Error::Data(format!(
            "{} query rows, {} labels, {} attributes",
            bsz,
            y.len(),
            a.len()
        )));
    }
    let mut cells = [[None; 2]; 2];
    for yv in 0..2u8 {
        for av in 0..2u8 {
            let rows: Vec<usize> = (0..bsz).filter(|&i| y[i] == yv && a[i] == av).collect();
            if rows.is_empty() {
                continue;
            }
            let sub = tape.select_rows(q, &rows)?;
            let mean = tape.mean_axis0(sub)?;
            cells[yv as usize][av as usize] = Some(CellMean {
                mean,
                count: rows.len(),
            });
        }
    }
    Ok(GroupMeans { cells })
}

/// Count-weighted pooling of two cell means.
fn pool(tape: &mut Tape, a: Option<CellMean>, b: Option<CellMean>) -> Result<Option<CellMean>> {
    Ok(match (a, b) {
        (Some(x), Some(z)) => {
            let n = (x.count + z.count) as f64;
            let xs = tape.scale(x.mean, x.count as f64 / n)?;
            let zs = tape.scale(z.mean, z.count as f64 / n)?;
            Some(CellMean {
                mean: tape.add(xs, zs)?,
                count: x.count + z.count,
            })
        }
        (x, None) => x,
        (None, z) => z,
    })
}

/// Sum over (head, channel) of the distance between two `[M, N, D]` means.
fn cell_distance(tape: &mut Tape, m0: Var, m1: Var, norm: QueryNorm) -> Result<Var> {
    let diff = tape.sub(m0, m1)?;
    let per = match norm {
        QueryNorm::PatchL2 => {
            let t = tape.permute(diff, &[0, 2, 1])?;
            tape.l2_norm_last(t)?
        }
        QueryNorm::ElementAbs => tape.abs(diff)?,
    };
    Ok(tape.sum(per)?)
}

/// Alignment of average query activations across the protected attribute.
///
/// Class-specific: `1/(2MD) * sum_y sum_{m,d} ||Q[y,0][m,:,d] - Q[y,1][m,:,d]||`.
/// Full mode pools each attribute group over y first and applies the same
/// `1/(2MD)` scale. A y whose two cells are not both present contributes 0.
pub fn query_alignment_loss(
    tape: &mut Tape,
    groups: &GroupMeans,
    mode: QueryLossMode,
    norm: QueryNorm,
) -> Result<Var> {
    let pairs: Vec<(CellMean, CellMean)> = match mode {
        QueryLossMode::Off => Vec::new(),
        QueryLossMode::ClassSpecific => (0..2u8)
            .filter_map(|yv| match (groups.get(yv, 0), groups.get(yv, 1)) {
                (Some(c0), Some(c1)) => Some((c0, c1)),
                _ => {
                    log::debug!("query loss: y={yv} lacks one attribute group; term is 0");
                    None
                }
            })
            .collect(),
        QueryLossMode::Full => {
            let g0 = pool(tape, groups.get(0, 0), groups.get(1, 0))?;
            let g1 = pool(tape, groups.get(0, 1), groups.get(1, 1))?;
            match (g0, g1) {
                (Some(c0), Some(c1)) => vec![(c0, c1)],
                _ => Vec::new(),
            }
        }
    };
    if pairs.is_empty() {
        if groups.cells.iter().flatten().all(Option::is_none) {
            log::warn!("query loss: no populated (y, a) cell; loss is 0");
        }
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let shape = tape.shape(pairs[0].0.mean).to_vec();
    let (m, d) = (shape[0], shape[2]);
    let mut total: Option<Var> = None;
    for (c0, c1) in pairs {
        let dist = cell_distance(tape, c0.mean, c1.mean, norm)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, dist)?,
            None => dist,
        });
    }
    let total = total.expect("non-empty pairs");
    Ok(tape.scale(total, 1.0 / (2.0 * (m * d) as f64))?)
}

/// `task + alpha * adv_enc + beta * l_q`; zero-weight terms are left out of
/// the graph so a zero-weight run computes exactly the task loss.
pub fn total_loss(
    tape: &mut Tape,
    task: Var,
    adv_enc: Option<Var>,
    l_q: Option<Var>,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let mut total = task;
    if let Some(adv) = adv_enc.filter(|_| alpha != 0.0) {
        let w = tape.scale(adv, alpha)?;
        total = tape.add(total, w)?;
    }
    if let Some(q) = l_q.filter(|_| beta != 0.0) {
        let w = tape.scale(q, beta)?;
        total = tape.add(total, w)?;
    }
    Ok(total)
}
