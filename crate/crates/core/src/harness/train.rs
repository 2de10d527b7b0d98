//! The training loop: alternating adversary and encoder steps, per-epoch
//! validation, best-epoch restore and a single test evaluation.

use fairvit_autodiff::{Adam, ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::{
    domain_independent_forward, domain_independent_loss, init_strategy_heads, laftr_eo_objective,
    mmd_penultimate_loss, MitigationStrategy,
};
use crate::data::{
    generate, load_attribute_dataset, stratified_batches, Dataset, IngestOptions, SplitSet,
};
use crate::debias::{
    adversary_features, adversary_loss, average_query_by_group, init_adversary,
    query_alignment_loss, total_loss, DebiasConfig,
};
use crate::error::{Error, Result};
use crate::harness::config::{DataSource, Method, RunConfig};
use crate::metrics::{weighted_average_precision, FairnessReport};
use crate::vit::{CaptureSpec, VitModel};

/// Independent random streams derived from the run seed.
pub mod stream {
    pub const MODEL: u64 = 0;
    pub const ADVERSARY: u64 = 1;
    pub const AUX_HEADS: u64 = 2;
    pub const BATCHES: u64 = 3;
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

const EVAL_CHUNK: usize = 256;

/// A dataset with its split.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub data: Dataset,
    pub split: SplitSet,
}

pub fn prepare_data(cfg: &RunConfig) -> Result<Prepared> {
    let data = match &cfg.data {
        DataSource::Synthetic { spec, n } => generate(spec, *n)?,
        DataSource::Files {
            image_dir,
            attr_file,
            task,
            attr,
        } => load_attribute_dataset(
            image_dir,
            attr_file,
            task,
            attr,
            IngestOptions {
                image_h: cfg.vit.image_h,
                image_w: cfg.vit.image_w,
                channels: cfg.vit.channels,
                batch_size: EVAL_CHUNK,
            },
        )?,
    };
    let split = SplitSet::new(data.len(), cfg.split_seed, cfg.train_frac, cfg.val_frac)?;
    Ok(Prepared { data, split })
}

/// Loss components of one encoder step; inactive terms are 0.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchLog {
    pub step: usize,
    pub epoch: usize,
    pub ce: f64,
    pub adv_disc: f64,
    pub adv_enc: f64,
    pub l_q: f64,
    pub mmd: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_ce: f64,
    pub train_total: f64,
    pub val_ap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config: RunConfig,
    pub config_hash: String,
    pub epochs: Vec<EpochLog>,
    pub batches: Vec<BatchLog>,
    /// Epoch (0-based) whose weights were restored; `None` without training.
    pub selected_epoch: Option<usize>,
    pub degenerate: bool,
    pub val_ap: f64,
    pub val: FairnessReport,
    pub test: FairnessReport,
    pub test_probs: Vec<f64>,
    /// Encoder and task head at the selected epoch.
    pub checkpoint: ParamStore,
    /// Per-group task heads (domain-independent runs only).
    pub aux_heads: ParamStore,
    pub test_accesses: usize,
}

impl RunRecord {
    pub fn model(&self) -> VitModel {
        VitModel {
            cfg: self.config.vit.clone(),
            params: self.checkpoint.clone(),
        }
    }
}

/// Probabilities for `idx`, combining per-group heads when present.
pub fn predict(
    model: &VitModel,
    aux: &ParamStore,
    method: &Method,
    data: &Dataset,
    idx: &[usize],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_CHUNK) {
        let batch = data.batch(chunk)?;
        let mut tape = Tape::new();
        let b = model.params.bind_frozen(&mut tape);
        let pass = model.forward(&mut tape, &b, &batch.images, &CaptureSpec::None)?;
        let probs = match method {
            Method::Baseline(MitigationStrategy::DomainIndependent { averaging }) => {
                let hb = aux.bind_frozen(&mut tape);
                domain_independent_forward(
                    &mut tape,
                    &hb,
                    pass.features,
                    *averaging,
                    model.cfg.activation,
                )?
            }
            _ => pass.probs,
        };
        out.extend_from_slice(tape.value(probs).data());
    }
    Ok(out)
}

fn labels(data: &Dataset, idx: &[usize]) -> (Vec<u8>, Vec<u8>) {
    (
        idx.iter().map(|&i| data.y()[i]).collect(),
        idx.iter().map(|&i| data.a()[i]).collect(),
    )
}

/// Training state for one run.
struct Trainer<'a> {
    cfg: &'a RunConfig,
    model: VitModel,
    adversary: ParamStore,
    aux: ParamStore,
    opt_model: Adam,
    opt_adv: Adam,
    opt_aux: Adam,
    step: usize,
}

enum AdvKind {
    None,
    Bce(DebiasConfig),
    Laftr,
}

impl<'a> Trainer<'a> {
    fn new(cfg: &'a RunConfig) -> Result<Self> {
        let model = VitModel::new(cfg.vit.clone(), &mut rng_for(cfg.seed, stream::MODEL))?;
        let mut adversary = ParamStore::new();
        let mut aux = ParamStore::new();
        match &cfg.method {
            Method::Debias(d) if d.adversary_active() => init_adversary(
                &mut adversary,
                d,
                &cfg.vit,
                &mut rng_for(cfg.seed, stream::ADVERSARY),
            )?,
            Method::Baseline(
                s @ (MitigationStrategy::Dann { .. } | MitigationStrategy::LaftrEo { .. }),
            ) if s.gamma() > 0.0 => init_strategy_heads(
                &mut adversary,
                s,
                &cfg.vit,
                &mut rng_for(cfg.seed, stream::ADVERSARY),
            )?,
            Method::Baseline(s @ MitigationStrategy::DomainIndependent { .. }) => {
                init_strategy_heads(
                    &mut aux,
                    s,
                    &cfg.vit,
                    &mut rng_for(cfg.seed, stream::AUX_HEADS),
                )?
            }
            _ => {}
        }
        Ok(Self {
            cfg,
            model,
            adversary,
            aux,
            opt_model: Adam::new(cfg.adam),
            opt_adv: Adam::new(cfg.adam),
            opt_aux: Adam::new(cfg.adam),
            step: 0,
        })
    }

    fn adv_kind(&self) -> AdvKind {
        match &self.cfg.method {
            Method::Baseline(MitigationStrategy::LaftrEo { gamma }) if *gamma > 0.0 => {
                AdvKind::Laftr
            }
            m => m.adversary().map_or(AdvKind::None, AdvKind::Bce),
        }
    }

    /// Adversary update on features of the frozen encoder.
    fn discriminator_step(&mut self, images: &Tensor, y: &[u8], a: &[u8]) -> Result<f64> {
        let kind = self.adv_kind();
        if matches!(kind, AdvKind::None) {
            return Ok(0.0);
        }
        let act = self.cfg.vit.activation;
        let before = self.model.params.checksum();
        let mut tape = Tape::new();
        let mb = self.model.params.bind_frozen(&mut tape);
        let pass = self
            .model
            .forward(&mut tape, &mb, images, &CaptureSpec::None)?;
        let ab = self.adversary.bind(&mut tape);
        let loss = match &kind {
            AdvKind::Bce(d) => {
                let f = adversary_features(&mut tape, &pass, d, &self.cfg.vit)?;
                let f = tape.detach(f);
                adversary_loss(&mut tape, &ab, f, y, a, d.adversarial_mode, act)?
            }
            AdvKind::Laftr => {
                let f = tape.detach(pass.features);
                laftr_eo_objective(&mut tape, &ab, f, y, a, act)?
            }
            AdvKind::None => unreachable!(),
        };
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                msg: "discriminator loss is not finite".into(),
            });
        }
        tape.backward(loss)?;
        self.adversary.accumulate_grads(&tape, &ab)?;
        self.opt_adv
            .step(&mut self.adversary)
            .map_err(|e| Error::Diverged {
                step: self.step,
                msg: e.to_string(),
            })?;
        if self.model.params.checksum() != before {
            return Err(Error::State(
                "discriminator step changed encoder parameters".into(),
            ));
        }
        Ok(value)
    }

    /// Encoder and task update on the joint objective.
    fn encoder_step(
        &mut self,
        images: &Tensor,
        y: &[u8],
        a: &[u8],
        log: &mut BatchLog,
    ) -> Result<()> {
        let cfg = self.cfg;
        let act = cfg.vit.activation;
        let adv_before = self.adversary.checksum();
        let mut tape = Tape::new();
        let mb = self.model.params.bind(&mut tape);
        let pass = self
            .model
            .forward(&mut tape, &mb, images, &CaptureSpec::None)?;
        let target: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
        let aux_b = self.aux.bind(&mut tape);
        let ce = match &cfg.method {
            Method::Baseline(MitigationStrategy::DomainIndependent { .. }) => {
                domain_independent_loss(&mut tape, &aux_b, pass.features, y, a, act)?
            }
            _ => tape.bce(pass.probs, &target)?,
        };
        let ab = self.adversary.bind_frozen(&mut tape);
        let (mut adv_enc, mut weight_adv) = (None, 0.0);
        let (mut l_q, mut weight_q) = (None, 0.0);
        match (&cfg.method, self.adv_kind()) {
            (_, AdvKind::Bce(d)) => {
                let f = adversary_features(&mut tape, &pass, &d, &cfg.vit)?;
                let l = adversary_loss(&mut tape, &ab, f, y, a, d.adversarial_mode, act)?;
                adv_enc = Some(tape.neg(l)?);
                weight_adv = d.alpha;
            }
            (Method::Baseline(MitigationStrategy::LaftrEo { gamma }), AdvKind::Laftr) => {
                let l = laftr_eo_objective(&mut tape, &ab, pass.features, y, a, act)?;
                adv_enc = Some(tape.neg(l)?);
                weight_adv = *gamma;
            }
            _ => {}
        }
        match &cfg.method {
            Method::Debias(d) if d.query_loss_active() => {
                let q = pass.query_patches(&mut tape, d.layer(&cfg.vit), &cfg.vit)?;
                let groups = average_query_by_group(&mut tape, q, y, a)?;
                l_q = Some(query_alignment_loss(
                    &mut tape,
                    &groups,
                    d.query_loss_mode,
                    d.query_norm,
                )?);
                weight_q = d.beta;
            }
            Method::Baseline(MitigationStrategy::Mmd { gamma }) if *gamma > 0.0 => {
                let m = mmd_penultimate_loss(&mut tape, pass.features, a)?;
                log.mmd = tape.value(m).item()?;
                l_q = Some(m);
                weight_q = *gamma;
            }
            _ => {}
        }
        let total = total_loss(&mut tape, ce, adv_enc, l_q, weight_adv, weight_q)?;
        log.ce = tape.value(ce).item()?;
        log.adv_enc = adv_enc.map_or(Ok(0.0), |v| tape.value(v).item())?;
        if !matches!(cfg.method, Method::Baseline(MitigationStrategy::Mmd { .. })) {
            log.l_q = l_q.map_or(Ok(0.0), |v| tape.value(v).item())?;
        }
        log.total = tape.value(total).item()?;
        if !log.total.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                msg: format!("total loss {}", log.total),
            });
        }
        tape.backward(total)?;
        self.model.params.accumulate_grads(&tape, &mb)?;
        self.aux.accumulate_grads(&tape, &aux_b)?;
        let diverged = |e: fairvit_autodiff::TensorError| Error::Diverged {
            step: self.step,
            msg: e.to_string(),
        };
        self.opt_model
            .step(&mut self.model.params)
            .map_err(diverged)?;
        self.opt_aux.step(&mut self.aux).map_err(diverged)?;
        if self.adversary.checksum() != adv_before {
            return Err(Error::State(
                "encoder step changed adversary parameters".into(),
            ));
        }
        Ok(())
    }
}

/// Trains on freshly prepared data.
pub fn train(cfg: &RunConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let prepared = prepare_data(cfg)?;
    train_on(cfg, &prepared)
}

/// Trains on an already prepared dataset and split.
pub fn train_on(cfg: &RunConfig, prepared: &Prepared) -> Result<RunRecord> {
    cfg.validate()?;
    if cfg.preset == "paper" {
        log::warn!("paper-scale encoder: expect very long CPU training times");
    }
    let (data, split) = (&prepared.data, &prepared.split);
    if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
        return Err(Error::Config(
            "train, validation and test splits must be non-empty".into(),
        ));
    }
    let mut t = Trainer::new(cfg)?;
    let mut batch_rng = rng_for(cfg.seed, stream::BATCHES);
    let (val_y, val_a) = labels(data, &split.val);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut batches = Vec::new();
    let mut best: Option<(f64, usize, ParamStore, ParamStore)> = None;

    for epoch in 0..cfg.epochs {
        let plan = stratified_batches(
            &split.train,
            data.y(),
            data.a(),
            cfg.batch_size,
            cfg.stratify,
            &mut batch_rng,
        )?;
        let (mut ce_sum, mut total_sum) = (0.0, 0.0);
        for idx in &plan {
            let batch = data.batch(idx)?;
            let mut log = BatchLog {
                step: t.step,
                epoch,
                ..Default::default()
            };
            for _ in 0..cfg.disc_steps {
                log.adv_disc = t.discriminator_step(&batch.images, &batch.y, &batch.a)?;
            }
            t.encoder_step(&batch.images, &batch.y, &batch.a, &mut log)?;
            ce_sum += log.ce;
            total_sum += log.total;
            batches.push(log);
            t.step += 1;
        }
        let probs = predict(&t.model, &t.aux, &cfg.method, data, &split.val)?;
        let ap = weighted_average_precision(&probs, &val_y)?;
        let n = plan.len().max(1) as f64;
        epochs.push(EpochLog {
            epoch,
            train_ce: ce_sum / n,
            train_total: total_sum / n,
            val_ap: ap,
        });
        log::info!("epoch {epoch}: train CE {:.4}, val AP {ap:.2}", ce_sum / n);
        if best.as_ref().is_none_or(|(b, ..)| ap > *b) {
            best = Some((ap, epoch, t.model.params.clone(), t.aux.clone()));
        }
    }

    let (selected_epoch, degenerate) = match best {
        Some((_, e, params, aux)) => {
            t.model.params = params;
            t.aux = aux;
            (Some(e), false)
        }
        None => {
            log::warn!("no training epochs: reporting initialization metrics");
            (None, true)
        }
    };
    let val_probs = predict(&t.model, &t.aux, &cfg.method, data, &split.val)?;
    let val_ap = weighted_average_precision(&val_probs, &val_y)?;
    let val = FairnessReport::from_probs(&val_probs, &val_y, &val_a, cfg.threshold)?;

    let mut test_accesses = 0;
    let test_probs = {
        test_accesses += 1;
        predict(&t.model, &t.aux, &cfg.method, data, &split.test)?
    };
    let (ty, ta) = labels(data, &split.test);
    let test = FairnessReport::from_probs(&test_probs, &ty, &ta, cfg.threshold)?;

    Ok(RunRecord {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        epochs,
        batches,
        selected_epoch,
        degenerate,
        val_ap,
        val,
        test,
        test_probs,
        checkpoint: t.model.params,
        aux_heads: t.aux,
        test_accesses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;

    fn small() -> RunConfig {
        let mut c = RunConfig::desk();
        c.epochs = 1;
        c.data = DataSource::Synthetic {
            spec: SyntheticSpec::desk(0.9, 1),
            n: 2000,
        };
        c
    }

    #[test]
    fn zero_epochs_is_degenerate() {
        let mut c = small();
        c.epochs = 0;
        let r = train(&c).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.selected_epoch, None);
        assert!(r.epochs.is_empty());
        assert_eq!(r.test_accesses, 1);
    }

    #[test]
    fn one_epoch_selects_it() {
        let r = train(&small()).unwrap();
        assert_eq!(r.selected_epoch, Some(0));
        assert_eq!(r.batches.len(), 1600usize.div_ceil(32));
        assert!(r.batches.iter().all(|b| b.adv_disc == 0.0 && b.l_q == 0.0));
    }

    #[test]
    fn streams_are_distinct() {
        use rand::Rng;
        let a: u64 = rng_for(0, stream::MODEL).random();
        let b: u64 = rng_for(0, stream::ADVERSARY).random();
        assert_ne!(a, b);
    }
}
