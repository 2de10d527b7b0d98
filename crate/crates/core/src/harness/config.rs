//! Run configuration and its flat `key = value` text form.
//!
//! A config file may start with `preset = desk` or `preset = paper`; every
//! later key overrides the preset. `#` starts a comment. The canonical text
//! written by [`RunConfig::to_text`] lists every key and parses back to an
//! equal config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fairvit_autodiff::AdamConfig;
use sha2::{Digest, Sha256};

use crate::baselines::{Averaging, MitigationStrategy};
use crate::data::SyntheticSpec;
use crate::debias::{AdversaryInput, AlignMode, DebiasConfig, QueryLossMode, QueryNorm};
use crate::error::{Error, Result};
use crate::vit::{Activation, VitConfig};

/// Which mitigation a run trains with.
#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    /// Adversary and query-alignment losses configured by [`DebiasConfig`].
    Debias(DebiasConfig),
    Baseline(MitigationStrategy),
}

impl Method {
    pub fn plain() -> Self {
        Method::Baseline(MitigationStrategy::None)
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Method::Debias(_) => "tadet",
            Method::Baseline(s) => s.tag(),
        }
    }

    /// The adversarial configuration in effect, if an adversary trains.
    pub fn adversary(&self) -> Option<DebiasConfig> {
        match self {
            Method::Debias(d) if d.adversary_active() => Some(d.clone()),
            Method::Baseline(s @ MitigationStrategy::Dann { gamma }) if *gamma > 0.0 => {
                s.as_debias()
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        spec: SyntheticSpec,
        n: usize,
    },
    Files {
        image_dir: PathBuf,
        attr_file: PathBuf,
        task: String,
        attr: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub vit: VitConfig,
    pub method: Method,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub stratify: bool,
    /// Discriminator steps per encoder step.
    pub disc_steps: usize,
    pub threshold: f64,
    pub seed: u64,
    pub data: DataSource,
    pub train_frac: f64,
    pub val_frac: f64,
    pub split_seed: u64,
    pub out_dir: Option<PathBuf>,
}

pub const DESK_LR: f64 = 1e-3;

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            preset: "desk".into(),
            vit: VitConfig::desk(),
            method: Method::plain(),
            adam: AdamConfig {
                lr: DESK_LR,
                ..AdamConfig::default()
            },
            epochs: 15,
            batch_size: 32,
            stratify: true,
            disc_steps: 1,
            threshold: 0.5,
            seed: 0,
            data: DataSource::Synthetic {
                spec: SyntheticSpec::desk(0.9, 0),
                n: 5000,
            },
            train_frac: 0.8,
            val_frac: 0.1,
            split_seed: 0,
            out_dir: None,
        }
    }

    /// Full-size encoder on attribute files.
    pub fn paper() -> Self {
        Self {
            preset: "paper".into(),
            vit: VitConfig::paper(),
            adam: AdamConfig::default(),
            epochs: 50,
            data: DataSource::Files {
                image_dir: PathBuf::from("img_align_celeba"),
                attr_file: PathBuf::from("list_attr_celeba.txt"),
                task: "Smiling".into(),
                attr: "High_Cheekbones".into(),
            },
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (desk, paper)"
            ))),
        }
    }

    pub fn with_method(mut self, m: Method) -> Self {
        self.method = m;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        match &self.method {
            Method::Debias(d) => d.validate(&self.vit)?,
            Method::Baseline(s) => s.validate()?,
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.disc_steps == 0 {
            return Err(Error::Config("disc_steps must be positive".into()));
        }
        if self.adam.lr.is_nan() || self.adam.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if let DataSource::Synthetic { spec, n } = &self.data {
            spec.validate()?;
            if *n == 0 {
                return Err(Error::Config("data.n must be positive".into()));
            }
            if [spec.image_h, spec.image_w, spec.channels] != self.vit.image_shape() {
                return Err(Error::Config(format!(
                    "synthetic images {}x{}x{} do not match the encoder input {:?}",
                    spec.image_h,
                    spec.image_w,
                    spec.channels,
                    self.vit.image_shape()
                )));
            }
        }
        Ok(())
    }

    /// Sets one key; see [`RunConfig::to_text`] for the key list.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("bad value {value:?} for {key}"));
        let f = || value.parse::<f64>().map_err(|_| bad());
        let u = || value.parse::<usize>().map_err(|_| bad());
        let u64_ = || value.parse::<u64>().map_err(|_| bad());
        let b = || match value {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(bad()),
        };
        match key {
            "preset" => {
                let out = self.out_dir.take();
                *self = Self::preset(value)?;
                self.out_dir = out;
            }
            "seed" => self.seed = u64_()?,
            "epochs" => self.epochs = u()?,
            "batch_size" => self.batch_size = u()?,
            "stratify" => self.stratify = b()?,
            "disc_steps" => self.disc_steps = u()?,
            "threshold" => self.threshold = f()?,
            "lr" => self.adam.lr = f()?,
            "beta1" => self.adam.beta1 = f()?,
            "beta2" => self.adam.beta2 = f()?,
            "eps" => self.adam.eps = f()?,
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "split.train" => self.train_frac = f()?,
            "split.val" => self.val_frac = f()?,
            "split.seed" => self.split_seed = u64_()?,
            "method" => {
                self.method = match value {
                    "tadet" => Method::Debias(match &self.method {
                        Method::Debias(d) => d.clone(),
                        _ => DebiasConfig::tadet(0.0, 0.0),
                    }),
                    "none" => Method::Baseline(MitigationStrategy::None),
                    "mmd" | "mmd_penultimate" => Method::Baseline(MitigationStrategy::Mmd {
                        gamma: self.gamma(),
                    }),
                    "dann" => Method::Baseline(MitigationStrategy::Dann {
                        gamma: self.gamma(),
                    }),
                    "laftr_eo" => Method::Baseline(MitigationStrategy::LaftrEo {
                        gamma: self.gamma(),
                    }),
                    "domain_independent" => {
                        Method::Baseline(MitigationStrategy::DomainIndependent {
                            averaging: Averaging::Logits,
                        })
                    }
                    _ => return Err(bad()),
                }
            }
            k if k.starts_with("vit.") => self.set_vit(&k[4..], value).map_err(|_| bad())?,
            k if k.starts_with("debias.") => {
                let Method::Debias(d) = &mut self.method else {
                    return Err(Error::Config(format!("{key} requires method = tadet")));
                };
                match &k[7..] {
                    "alpha" => d.alpha = f()?,
                    "beta" => d.beta = f()?,
                    "adversary_input" => {
                        d.adversary_input = AdversaryInput::parse(value).ok_or_else(bad)?
                    }
                    "adversarial_mode" => {
                        d.adversarial_mode = AlignMode::parse(value).ok_or_else(bad)?
                    }
                    "query_loss_mode" => {
                        d.query_loss_mode = QueryLossMode::parse(value).ok_or_else(bad)?
                    }
                    "query_norm" => d.query_norm = QueryNorm::parse(value).ok_or_else(bad)?,
                    "target_layer" => {
                        d.target_layer = if value == "last" { None } else { Some(u()?) }
                    }
                    _ => return Err(Error::Config(format!("unknown key {key}"))),
                }
            }
            "baseline.gamma" => {
                let Method::Baseline(s) = &mut self.method else {
                    return Err(Error::Config(format!("{key} requires a baseline method")));
                };
                *s = s.with_gamma(f()?);
            }
            "baseline.averaging" => match &mut self.method {
                Method::Baseline(MitigationStrategy::DomainIndependent { averaging }) => {
                    *averaging = Averaging::parse(value).ok_or_else(bad)?
                }
                _ => return Err(Error::Config(format!("{key} requires domain_independent"))),
            },
            "data.source" => {
                self.data = match value {
                    "synthetic" => DataSource::Synthetic {
                        spec: SyntheticSpec::desk(0.9, 0),
                        n: 5000,
                    },
                    "files" => DataSource::Files {
                        image_dir: PathBuf::new(),
                        attr_file: PathBuf::new(),
                        task: String::new(),
                        attr: String::new(),
                    },
                    _ => return Err(bad()),
                }
            }
            k if k.starts_with("syn.") || k == "data.n" => {
                let DataSource::Synthetic { spec, n } = &mut self.data else {
                    return Err(Error::Config(format!(
                        "{key} requires data.source = synthetic"
                    )));
                };
                match k {
                    "data.n" => *n = u()?,
                    "syn.rho" => spec.attributes[0].rho = f()?,
                    "syn.p_y" => spec.p_y = f()?,
                    "syn.noise_sigma" => spec.noise_sigma = f()?,
                    "syn.background" => spec.background = f()?,
                    "syn.y_contrast" => spec.y_contrast = f()?,
                    "syn.y_jitter" => spec.y_jitter = f()?,
                    "syn.a_contrast" => spec.attributes[0].contrast = f()?,
                    "syn.seed" => spec.seed = u64_()?,
                    "syn.independent" => {
                        let has = spec.attributes.len() > 1;
                        match (b()?, has) {
                            (true, false) => *spec = spec.clone().with_independent(),
                            (false, true) => spec.attributes.truncate(1),
                            _ => {}
                        }
                    }
                    _ => return Err(Error::Config(format!("unknown key {key}"))),
                }
            }
            k if k.starts_with("files.") => {
                let DataSource::Files {
                    image_dir,
                    attr_file,
                    task,
                    attr,
                } = &mut self.data
                else {
                    return Err(Error::Config(format!("{key} requires data.source = files")));
                };
                match &k[6..] {
                    "image_dir" => *image_dir = PathBuf::from(value),
                    "attr_file" => *attr_file = PathBuf::from(value),
                    "task" => *task = value.into(),
                    "attr" => *attr = value.into(),
                    _ => return Err(Error::Config(format!("unknown key {key}"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    fn gamma(&self) -> f64 {
        match &self.method {
            Method::Baseline(s) => s.gamma(),
            Method::Debias(d) => d.alpha,
        }
    }

    fn set_vit(&mut self, key: &str, value: &str) -> std::result::Result<(), ()> {
        let v = &mut self.vit;
        let u = || value.parse::<usize>().map_err(|_| ());
        match key {
            "image_h" => v.image_h = u()?,
            "image_w" => v.image_w = u()?,
            "channels" => v.channels = u()?,
            "patch_size" => v.patch_size = u()?,
            "num_layers" => v.num_layers = u()?,
            "num_heads" => v.num_heads = u()?,
            "head_dim" => v.head_dim = u()?,
            "mlp_hidden" => v.mlp_hidden = u()?,
            "head_hidden" => v.head_hidden = u()?,
            "share_key_value" => v.share_key_value = value.parse().map_err(|_| ())?,
            "attn_out_proj" => v.attn_out_proj = value.parse().map_err(|_| ())?,
            "activation" => v.activation = Activation::parse(value).ok_or(())?,
            _ => return Err(()),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: source.into(),
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                path: source.into(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::desk();
        c.apply_text(text, "<config>")?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut c = Self::desk();
        c.apply_text(&text, &path.display().to_string())?;
        Ok(c)
    }

    /// Every key in a fixed order; `out_dir` is omitted.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("preset", self.preset.clone());
        let v = &self.vit;
        for (k, x) in [
            ("vit.image_h", v.image_h),
            ("vit.image_w", v.image_w),
            ("vit.channels", v.channels),
            ("vit.patch_size", v.patch_size),
            ("vit.num_layers", v.num_layers),
            ("vit.num_heads", v.num_heads),
            ("vit.head_dim", v.head_dim),
            ("vit.mlp_hidden", v.mlp_hidden),
            ("vit.head_hidden", v.head_hidden),
        ] {
            kv(k, x.to_string());
        }
        kv("vit.share_key_value", v.share_key_value.to_string());
        kv("vit.attn_out_proj", v.attn_out_proj.to_string());
        kv("vit.activation", v.activation.name().into());
        kv("seed", self.seed.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("stratify", self.stratify.to_string());
        kv("disc_steps", self.disc_steps.to_string());
        kv("threshold", format!("{:?}", self.threshold));
        kv("lr", format!("{:?}", self.adam.lr));
        kv("beta1", format!("{:?}", self.adam.beta1));
        kv("beta2", format!("{:?}", self.adam.beta2));
        kv("eps", format!("{:?}", self.adam.eps));
        kv("split.train", format!("{:?}", self.train_frac));
        kv("split.val", format!("{:?}", self.val_frac));
        kv("split.seed", self.split_seed.to_string());
        kv("method", self.method.tag().into());
        match &self.method {
            Method::Debias(d) => {
                kv("debias.alpha", format!("{:?}", d.alpha));
                kv("debias.beta", format!("{:?}", d.beta));
                kv("debias.adversary_input", d.adversary_input.name().into());
                kv("debias.adversarial_mode", d.adversarial_mode.name().into());
                kv("debias.query_loss_mode", d.query_loss_mode.name().into());
                kv("debias.query_norm", d.query_norm.name().into());
                kv(
                    "debias.target_layer",
                    d.target_layer.map_or("last".into(), |l| l.to_string()),
                );
            }
            Method::Baseline(s) => {
                if matches!(
                    s,
                    MitigationStrategy::Mmd { .. }
                        | MitigationStrategy::Dann { .. }
                        | MitigationStrategy::LaftrEo { .. }
                ) {
                    kv("baseline.gamma", format!("{:?}", s.gamma()));
                }
                if let MitigationStrategy::DomainIndependent { averaging } = s {
                    kv("baseline.averaging", averaging.name().into());
                }
            }
        }
        match &self.data {
            DataSource::Synthetic { spec, n } => {
                kv("data.source", "synthetic".into());
                kv("data.n", n.to_string());
                kv("syn.rho", format!("{:?}", spec.attributes[0].rho));
                kv("syn.p_y", format!("{:?}", spec.p_y));
                kv("syn.noise_sigma", format!("{:?}", spec.noise_sigma));
                kv("syn.background", format!("{:?}", spec.background));
                kv("syn.y_contrast", format!("{:?}", spec.y_contrast));
                kv("syn.y_jitter", format!("{:?}", spec.y_jitter));
                kv(
                    "syn.a_contrast",
                    format!("{:?}", spec.attributes[0].contrast),
                );
                kv("syn.seed", spec.seed.to_string());
                kv("syn.independent", (spec.attributes.len() > 1).to_string());
            }
            DataSource::Files {
                image_dir,
                attr_file,
                task,
                attr,
            } => {
                kv("data.source", "files".into());
                kv("files.image_dir", image_dir.display().to_string());
                kv("files.attr_file", attr_file.display().to_string());
                kv("files.task", task.clone());
                kv("files.attr", attr.clone());
            }
        }
        s
    }

    /// First 16 hex digits of the SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        hex::encode(&digest[..8])
    }
}
