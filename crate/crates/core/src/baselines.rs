//! Comparison mitigations sharing the encoder: penultimate mean alignment,
//! a penultimate attribute adversary, an equalized-odds adversary, and
//! per-group classifier heads with averaged decision scores.

use fairvit_autodiff::{Bindings, ParamStore, Tape, Var};
use rand_chacha::ChaCha8Rng;

use crate::debias::{adversarial_losses, AlignMode, DebiasConfig};
use crate::error::{Error, Result};
use crate::head::{head_logit, init_head};
use crate::vit::{Activation, VitConfig};

/// How the two per-group heads are combined at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Averaging {
    Logits,
    Probabilities,
}

impl Averaging {
    pub fn name(self) -> &'static str {
        match self {
            Averaging::Logits => "logits",
            Averaging::Probabilities => "probabilities",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Averaging::Logits, Averaging::Probabilities]
            .into_iter()
            .find(|v| v.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MitigationStrategy {
    None,
    Mmd { gamma: f64 },
    Dann { gamma: f64 },
    LaftrEo { gamma: f64 },
    DomainIndependent { averaging: Averaging },
}

pub const DI_PREFIXES: [&str; 2] = ["di.a0", "di.a1"];
pub const LAFTR_PREFIX: &str = "adv.all";

impl MitigationStrategy {
    pub fn tag(&self) -> &'static str {
        match self {
            MitigationStrategy::None => "none",
            MitigationStrategy::Mmd { .. } => "mmd_penultimate",
            MitigationStrategy::Dann { .. } => "dann",
            MitigationStrategy::LaftrEo { .. } => "laftr_eo",
            MitigationStrategy::DomainIndependent { .. } => "domain_independent",
        }
    }

    pub fn gamma(&self) -> f64 {
        match self {
            MitigationStrategy::Mmd { gamma }
            | MitigationStrategy::Dann { gamma }
            | MitigationStrategy::LaftrEo { gamma } => *gamma,
            _ => 0.0,
        }
    }

    pub fn with_gamma(&self, gamma: f64) -> Self {
        match self {
            MitigationStrategy::Mmd { .. } => MitigationStrategy::Mmd { gamma },
            MitigationStrategy::Dann { .. } => MitigationStrategy::Dann { gamma },
            MitigationStrategy::LaftrEo { .. } => MitigationStrategy::LaftrEo { gamma },
            other => other.clone(),
        }
    }

    /// The adversarial configuration a DANN run trains with.
    pub fn as_debias(&self) -> Option<DebiasConfig> {
        match self {
            MitigationStrategy::Dann { gamma } => Some(DebiasConfig::dann(*gamma)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.gamma();
        if !(g >= 0.0 && g.is_finite()) {
            return Err(Error::Config(format!("loss weight {g} must be >= 0")));
        }
        Ok(())
    }
}

/// Registers the auxiliary heads a strategy needs.
pub fn init_strategy_heads(
    store: &mut ParamStore,
    strategy: &MitigationStrategy,
    vit: &VitConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let e = vit.embed_dim();
    match strategy {
        MitigationStrategy::Dann { .. } | MitigationStrategy::LaftrEo { .. } => {
            init_head(store, LAFTR_PREFIX, e, vit.head_hidden, rng)
        }
        MitigationStrategy::DomainIndependent { .. } => {
            for p in DI_PREFIXES {
                init_head(store, p, e, vit.head_hidden, rng)?;
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

fn rows_where(v: &[u8], value: u8) -> Vec<usize> {
    (0..v.len()).filter(|&i| v[i] == value).collect()
}

/// `||mean(f | a=0) - mean(f | a=1)||` for features `[B, E]`; 0 when a
/// group is absent from the batch.
pub fn mmd_penultimate_loss(tape: &mut Tape, features: Var, a: &[u8]) -> Result<Var> {
    if tape.shape(features)[0] != a.len() {
        return Err(Error::Data("feature/attribute length mismatch".into()));
    }
    let (r0, r1) = (rows_where(a, 0), rows_where(a, 1));
    if r0.is_empty() || r1.is_empty() {
        log::warn!("mmd: batch holds a single attribute group; loss is 0");
        return Ok(tape.constant(fairvit_autodiff::Tensor::scalar(0.0)));
    }
    let g0 = tape.select_rows(features, &r0)?;
    let g0 = tape.mean_axis0(g0)?;
    let g1 = tape.select_rows(features, &r1)?;
    let g1 = tape.mean_axis0(g1)?;
    let d = tape.sub(g0, g1)?;
    Ok(tape.l2_norm_last(d)?)
}

/// Penultimate-feature adversary over all samples.
pub fn dann_losses(
    tape: &mut Tape,
    adv: &Bindings,
    features: Var,
    y: &[u8],
    a: &[u8],
    act: Activation,
) -> Result<(Var, Var)> {
    adversarial_losses(tape, adv, features, y, a, AlignMode::Full, act)
}

/// Mean over populated (y, a) cells of the cell-mean `|p - a|`, where `p`
/// is the adversary's attribute probability on `features`.
pub fn laftr_eo_objective(
    tape: &mut Tape,
    adv: &Bindings,
    features: Var,
    y: &[u8],
    a: &[u8],
    act: Activation,
) -> Result<Var> {
    let bsz = tape.shape(features)[0];
    if y.len() != bsz || a.len() != bsz {
        return Err(Error::Data("feature/label length mismatch".into()));
    }
    let z = head_logit(tape, adv, LAFTR_PREFIX, features, act)?;
    let p = tape.sigmoid(z)?;
    cell_abs_error(tape, p, y, a)
}

/// Mean over populated cells of the within-cell mean `|p - a|`.
pub fn cell_abs_error(tape: &mut Tape, p: Var, y: &[u8], a: &[u8]) -> Result<Var> {
    let mut terms = Vec::new();
    for yv in 0..2u8 {
        for av in 0..2u8 {
            let rows: Vec<usize> = (0..y.len()).filter(|&i| y[i] == yv && a[i] == av).collect();
            if rows.is_empty() {
                continue;
            }
            let sub = tape.select_rows(p, &rows)?;
            let shifted = tape.add_scalar(sub, -f64::from(av))?;
            let err = tape.abs(shifted)?;
            terms.push(tape.mean(err)?);
        }
    }
    let n = terms.len();
    let mut acc = *terms
        .first()
        .ok_or_else(|| Error::Data("empty batch".into()))?;
    for t in &terms[1..] {
        acc = tape.add(acc, *t)?;
    }
    Ok(tape.scale(acc, 1.0 / n as f64)?)
}

/// `(adversary objective on detached features, negated objective on live
/// features)`.
pub fn laftr_eo_losses(
    tape: &mut Tape,
    adv: &Bindings,
    features: Var,
    y: &[u8],
    a: &[u8],
    act: Activation,
) -> Result<(Var, Var)> {
    let detached = tape.detach(features);
    let disc = laftr_eo_objective(tape, adv, detached, y, a, act)?;
    let live = laftr_eo_objective(tape, adv, features, y, a, act)?;
    Ok((disc, tape.neg(live)?))
}

/// Task BCE with each sample routed through the head of its own group,
/// weighted by group size so the result is a per-sample mean.
pub fn domain_independent_loss(
    tape: &mut Tape,
    heads: &Bindings,
    features: Var,
    y: &[u8],
    a: &[u8],
    act: Activation,
) -> Result<Var> {
    let bsz = tape.shape(features)[0];
    if y.len() != bsz || a.len() != bsz {
        return Err(Error::Data("feature/label length mismatch".into()));
    }
    let mut total: Option<Var> = None;
    for (av, prefix) in DI_PREFIXES.iter().enumerate() {
        let rows = rows_where(a, av as u8);
        if rows.is_empty() {
            continue;
        }
        let sub = tape.select_rows(features, &rows)?;
        let z = head_logit(tape, heads, prefix, sub, act)?;
        let p = tape.sigmoid(z)?;
        let t: Vec<f64> = rows.iter().map(|&i| f64::from(y[i])).collect();
        let l = tape.bce(p, &t)?;
        let l = tape.scale(l, rows.len() as f64 / bsz as f64)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::Data("empty batch".into()))
}

/// Inference score `[B]` combining both group heads.
pub fn domain_independent_forward(
    tape: &mut Tape,
    heads: &Bindings,
    features: Var,
    averaging: Averaging,
    act: Activation,
) -> Result<Var> {
    let z0 = head_logit(tape, heads, DI_PREFIXES[0], features, act)?;
    let z1 = head_logit(tape, heads, DI_PREFIXES[1], features, act)?;
    match averaging {
        Averaging::Logits => {
            let s = tape.add(z0, z1)?;
            let s = tape.scale(s, 0.5)?;
            Ok(tape.sigmoid(s)?)
        }
        Averaging::Probabilities => {
            let p0 = tape.sigmoid(z0)?;
            let p1 = tape.sigmoid(z1)?;
            let s = tape.add(p0, p1)?;
            Ok(tape.scale(s, 0.5)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::normal_tensor;
    use fairvit_autodiff::Tensor;
    use rand::SeedableRng;

    fn val(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    #[test]
    fn mmd_three_four_five() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::new(vec![2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap());
        let l = mmd_penultimate_loss(&mut tape, f, &[0, 1]).unwrap();
        assert_eq!(val(&tape, l), 5.0);
        let same = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 1.0, 2.0]).unwrap());
        let l = mmd_penultimate_loss(&mut tape, same, &[1, 0]).unwrap();
        assert_eq!(val(&tape, l), 0.0);
        let l = mmd_penultimate_loss(&mut tape, f, &[1, 1]).unwrap();
        assert_eq!(val(&tape, l), 0.0);
    }

    #[test]
    fn mmd_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let f = tape.constant(normal_tensor(&mut rng, &[7, 3], 1.0));
        let a = [0, 1, 1, 0, 1, 0, 0];
        let b: Vec<u8> = a.iter().map(|v| 1 - v).collect();
        let l1 = mmd_penultimate_loss(&mut tape, f, &a).unwrap();
        let l2 = mmd_penultimate_loss(&mut tape, f, &b).unwrap();
        assert!((val(&tape, l1) - val(&tape, l2)).abs() < 1e-15);
    }

    #[test]
    fn laftr_cell_error_edge_cases() {
        let mut tape = Tape::new();
        let a = [0u8, 1, 1, 0];
        let y = [0u8, 0, 1, 1];
        let exact = tape.constant(Tensor::vector(vec![0.0, 1.0, 1.0, 0.0]));
        let e = cell_abs_error(&mut tape, exact, &y, &a).unwrap();
        assert_eq!(val(&tape, e), 0.0);
        let half = tape.constant(Tensor::vector(vec![0.5; 4]));
        let e = cell_abs_error(&mut tape, half, &y, &a).unwrap();
        assert_eq!(val(&tape, e), 0.5);
    }

    #[test]
    fn di_identical_heads_match_single_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        init_head(&mut store, "di.a0", 4, 3, &mut rng).unwrap();
        for (name, t) in store.clone().iter() {
            store
                .insert(name.replace("di.a0", "di.a1"), t.detached())
                .unwrap();
        }
        let mut tape = Tape::new();
        let b = store.bind_frozen(&mut tape);
        let f = tape.constant(normal_tensor(&mut rng, &[5, 4], 1.0));
        let z = head_logit(&mut tape, &b, "di.a0", f, Activation::Gelu).unwrap();
        let single = tape.sigmoid(z).unwrap();
        for mode in [Averaging::Logits, Averaging::Probabilities] {
            let p = domain_independent_forward(&mut tape, &b, f, mode, Activation::Gelu).unwrap();
            for (u, v) in tape.value(p).data().iter().zip(tape.value(single).data()) {
                assert!((u - v).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn di_opposite_logits_average_to_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        init_head(&mut store, "di.a0", 4, 3, &mut rng).unwrap();
        for (name, t) in store.clone().iter() {
            let mut t = t.detached();
            if name.starts_with("di.a0.fc2") {
                t.data_mut().iter_mut().for_each(|v| *v = -*v);
            }
            store.insert(name.replace("di.a0", "di.a1"), t).unwrap();
        }
        let mut tape = Tape::new();
        let b = store.bind_frozen(&mut tape);
        let f = tape.constant(normal_tensor(&mut rng, &[5, 4], 1.0));
        let p = domain_independent_forward(&mut tape, &b, f, Averaging::Logits, Activation::Gelu)
            .unwrap();
        assert!(tape.value(p).data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn di_loss_never_touches_other_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        for p in DI_PREFIXES {
            init_head(&mut store, p, 4, 3, &mut rng).unwrap();
        }
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let f = tape.constant(normal_tensor(&mut rng, &[4, 4], 1.0));
        let l = domain_independent_loss(&mut tape, &b, f, &[0, 1, 1, 0], &[1; 4], Activation::Gelu)
            .unwrap();
        tape.backward(l).unwrap();
        store.accumulate_grads(&tape, &b).unwrap();
        for (name, t) in store.iter() {
            let touched = t.grad().unwrap().iter().any(|g| *g != 0.0);
            assert_eq!(touched, name.starts_with("di.a1"), "{name}");
        }
    }

    #[test]
    fn dann_strategy_is_penultimate_full_adversary() {
        let d = MitigationStrategy::Dann { gamma: 0.1 }.as_debias().unwrap();
        assert_eq!(d, DebiasConfig::dann(0.1));
        assert!(MitigationStrategy::Mmd { gamma: -1.0 }.validate().is_err());
    }
}
