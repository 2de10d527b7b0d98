//! Visual transformer encoder with Query/Key/Value activation capture.
//!
//! Token layout: the `N` patch embeddings occupy positions `0..N` and the
//! learnable class token is appended at position `N`. Blocks are pre-norm:
//! `x + attn(ln1(x))`, then `x + mlp(ln2(x))`, and a final layernorm feeds
//! the class-token features to a two-layer task head.

use std::collections::BTreeMap;

use fairvit_autodiff::{Bindings, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::head::{head_logit, init_head, normal_tensor, INIT_STD};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(match self {
            Activation::Gelu => tape.gelu(x)?,
            Activation::Relu => tape.relu(x)?,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gelu" => Some(Activation::Gelu),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
    /// Key and value projections share weights and biases.
    pub share_key_value: bool,
    pub activation: Activation,
    /// Output projection after head concatenation; identity when false.
    pub attn_out_proj: bool,
    /// Hidden width of the two-layer task head.
    pub head_hidden: usize,
}

impl VitConfig {
    /// 8x8 grayscale, 4 patches, 2 layers, 2 heads of width 8.
    pub fn desk() -> Self {
        Self {
            image_h: 8,
            image_w: 8,
            channels: 1,
            patch_size: 4,
            num_layers: 2,
            num_heads: 2,
            head_dim: 8,
            mlp_hidden: 32,
            share_key_value: true,
            activation: Activation::Gelu,
            attn_out_proj: true,
            head_hidden: 16,
        }
    }

    /// 224x224 RGB, 196 patches of 16x16, 12 layers, 8 heads of width 64.
    pub fn paper() -> Self {
        Self {
            image_h: 224,
            image_w: 224,
            channels: 3,
            patch_size: 16,
            num_layers: 12,
            num_heads: 8,
            head_dim: 64,
            mlp_hidden: 2048,
            share_key_value: true,
            activation: Activation::Gelu,
            attn_out_proj: true,
            head_hidden: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("image_h", self.image_h),
            ("image_w", self.image_w),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("mlp_hidden", self.mlp_hidden),
            ("head_hidden", self.head_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.image_h.is_multiple_of(self.patch_size)
            || !self.image_w.is_multiple_of(self.patch_size)
        {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_h, self.image_w, self.patch_size
            )));
        }
        Ok(())
    }

    /// N, the number of patches.
    pub fn num_patches(&self) -> usize {
        (self.image_h / self.patch_size) * (self.image_w / self.patch_size)
    }

    /// N + 1 tokens including the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    /// Position of the class token in the sequence.
    pub fn class_index(&self) -> usize {
        self.num_patches()
    }

    pub fn embed_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_h, self.image_w, self.channels]
    }
}

/// Cuts an `[H,W,C]` image into `[N, p*p*C]`. Patches are in raster order
/// and each row is the row-major flattening of its patch.
pub fn patchify(image: &Tensor, cfg: &VitConfig) -> Result<Tensor> {
    let shape = cfg.image_shape();
    if image.shape() != shape {
        return Err(Error::Config(format!(
            "image shape {:?} does not match config {:?}",
            image.shape(),
            shape
        )));
    }
    let out = patchify_raw(image.data(), cfg);
    Ok(Tensor::new(vec![cfg.num_patches(), cfg.patch_dim()], out)?)
}

fn patchify_raw(img: &[f64], cfg: &VitConfig) -> Vec<f64> {
    let (w, c, p) = (cfg.image_w, cfg.channels, cfg.patch_size);
    let cols = w / p;
    let mut out = Vec::with_capacity(img.len());
    for patch in 0..cfg.num_patches() {
        let (pr, pc) = (patch / cols, patch % cols);
        for dy in 0..p {
            let row = pr * p + dy;
            let start = (row * w + pc * p) * c;
            out.extend_from_slice(&img[start..start + p * c]);
        }
    }
    out
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, cfg: &VitConfig) -> Result<Tensor> {
    if patches.shape() != [cfg.num_patches(), cfg.patch_dim()] {
        return Err(Error::Config(format!(
            "patch matrix shape {:?} does not match config",
            patches.shape()
        )));
    }
    let (w, c, p) = (cfg.image_w, cfg.channels, cfg.patch_size);
    let cols = w / p;
    let mut img = vec![0.0; cfg.image_h * w * c];
    for (patch, row_data) in patches.data().chunks(cfg.patch_dim()).enumerate() {
        let (pr, pc) = (patch / cols, patch % cols);
        for dy in 0..p {
            let start = ((pr * p + dy) * w + pc * p) * c;
            img[start..start + p * c].copy_from_slice(&row_data[dy * p * c..(dy + 1) * p * c]);
        }
    }
    Ok(Tensor::new(cfg.image_shape().to_vec(), img)?)
}

/// Which encoder layers to record.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum CaptureSpec {
    #[default]
    None,
    All,
    Layers(Vec<usize>),
}

impl CaptureSpec {
    fn wants(&self, layer: usize) -> bool {
        match self {
            CaptureSpec::None => false,
            CaptureSpec::All => true,
            CaptureSpec::Layers(ls) => ls.contains(&layer),
        }
    }
}

/// Detached activations of one layer, each `[B, M, N+1, D]`; `attn` is
/// `[B, M, N+1, N+1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivations {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    pub attn: Tensor,
}

/// Per-layer Q/K/V copies recorded during a forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActivationCapture {
    pub layers: BTreeMap<usize, LayerActivations>,
    pub num_patches: usize,
}

impl ActivationCapture {
    pub fn layer(&self, layer: usize) -> Result<&LayerActivations> {
        self.layers
            .get(&layer)
            .ok_or_else(|| Error::State(format!("layer {layer} was not captured")))
    }
}

/// `Q[:, :, class, :]` flattened to `[B, M*D]`.
pub fn extract_query_class_token(capture: &ActivationCapture, layer: usize) -> Result<Tensor> {
    let q = &capture.layer(layer)?.query;
    let [b, m, t, d] = dims4(q)?;
    let cls = capture.num_patches;
    let mut out = Vec::with_capacity(b * m * d);
    for s in 0..b {
        for h in 0..m {
            let base = ((s * m + h) * t + cls) * d;
            out.extend_from_slice(&q.data()[base..base + d]);
        }
    }
    Ok(Tensor::new(vec![b, m * d], out)?)
}

/// `Q[:, :, 0..N, :]`, shape `[B, M, N, D]` (class token excluded).
pub fn extract_query_patches(capture: &ActivationCapture, layer: usize) -> Result<Tensor> {
    let q = &capture.layer(layer)?.query;
    let [b, m, t, d] = dims4(q)?;
    let n = capture.num_patches;
    let mut out = Vec::with_capacity(b * m * n * d);
    for bm in 0..b * m {
        let base = bm * t * d;
        out.extend_from_slice(&q.data()[base..base + n * d]);
    }
    Ok(Tensor::new(vec![b, m, n, d], out)?)
}

fn dims4(t: &Tensor) -> Result<[usize; 4]> {
    t.shape()
        .try_into()
        .map_err(|_| Error::State(format!("expected rank-4 activations, got {:?}", t.shape())))
}

/// Graph handles of one layer's activations, each `[B, M, N+1, D]`.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub attn: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Pre-sigmoid task scores `[B]`.
    pub logits: Var,
    pub probs: Var,
    /// Final-layer class-token features `[B, E]` (the penultimate activations).
    pub features: Var,
    pub layers: Vec<LayerVars>,
    pub capture: ActivationCapture,
}

impl ForwardPass {
    /// Class-token query slice `[B, M*D]` of a layer, on the graph.
    pub fn query_class_token(&self, tape: &mut Tape, layer: usize, cfg: &VitConfig) -> Result<Var> {
        let q = self.layer_vars(layer)?.query;
        let b = tape.shape(q)[0];
        let c = tape.slice_axis(q, 2, cfg.class_index(), 1)?;
        Ok(tape.reshape(c, &[b, cfg.embed_dim()])?)
    }

    /// Patch-position queries `[B, M, N, D]` of a layer, on the graph.
    pub fn query_patches(&self, tape: &mut Tape, layer: usize, cfg: &VitConfig) -> Result<Var> {
        let q = self.layer_vars(layer)?.query;
        Ok(tape.slice_axis(q, 2, 0, cfg.num_patches())?)
    }

    /// All query activations flattened to `[B, M*(N+1)*D]`.
    pub fn query_full(&self, tape: &mut Tape, layer: usize) -> Result<Var> {
        let q = self.layer_vars(layer)?.query;
        let s = tape.shape(q).to_vec();
        Ok(tape.reshape(q, &[s[0], s[1] * s[2] * s[3]])?)
    }

    fn layer_vars(&self, layer: usize) -> Result<&LayerVars> {
        self.layers.get(layer).ok_or(Error::Range {
            what: "layer",
            index: layer,
            limit: self.layers.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitModel {
    pub cfg: VitConfig,
    pub params: ParamStore,
}

impl VitModel {
    /// Weights ~ N(0, 0.02^2), biases 0, layernorm gains 1.
    pub fn new(cfg: VitConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.embed_dim();
        let mut p = ParamStore::new();
        p.insert(
            "patch_embed.weight",
            normal_tensor(rng, &[cfg.patch_dim(), e], INIT_STD),
        )?;
        p.insert("patch_embed.bias", Tensor::zeros(&[e]))?;
        p.insert(
            "pos_embed",
            normal_tensor(rng, &[cfg.num_tokens(), e], INIT_STD),
        )?;
        p.insert("cls_token", normal_tensor(rng, &[e], INIT_STD))?;
        for l in 0..cfg.num_layers {
            let pre = format!("layers.{l}");
            p.insert(format!("{pre}.norm1.gain"), Tensor::full(&[e], 1.0))?;
            p.insert(format!("{pre}.norm1.bias"), Tensor::zeros(&[e]))?;
            let mut proj = vec!["query"];
            if cfg.share_key_value {
                proj.push("key_value");
            } else {
                proj.extend(["key", "value"]);
            }
            if cfg.attn_out_proj {
                proj.push("out");
            }
            for name in proj {
                p.insert(
                    format!("{pre}.attn.{name}.weight"),
                    normal_tensor(rng, &[e, e], INIT_STD),
                )?;
                p.insert(format!("{pre}.attn.{name}.bias"), Tensor::zeros(&[e]))?;
            }
            p.insert(format!("{pre}.norm2.gain"), Tensor::full(&[e], 1.0))?;
            p.insert(format!("{pre}.norm2.bias"), Tensor::zeros(&[e]))?;
            p.insert(
                format!("{pre}.mlp.fc1.weight"),
                normal_tensor(rng, &[e, cfg.mlp_hidden], INIT_STD),
            )?;
            p.insert(
                format!("{pre}.mlp.fc1.bias"),
                Tensor::zeros(&[cfg.mlp_hidden]),
            )?;
            p.insert(
                format!("{pre}.mlp.fc2.weight"),
                normal_tensor(rng, &[cfg.mlp_hidden, e], INIT_STD),
            )?;
            p.insert(format!("{pre}.mlp.fc2.bias"), Tensor::zeros(&[e]))?;
        }
        p.insert("norm.gain", Tensor::full(&[e], 1.0))?;
        p.insert("norm.bias", Tensor::zeros(&[e]))?;
        init_head(&mut p, "head", e, cfg.head_hidden, rng)?;
        Ok(Self { cfg, params: p })
    }

    pub fn from_seed(cfg: VitConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(cfg, &mut rng)
    }

    /// Runs the encoder and task head on `images` `[B, H, W, C]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        images: &Tensor,
        capture: &CaptureSpec,
    ) -> Result<ForwardPass> {
        let cfg = &self.cfg;
        if let CaptureSpec::Layers(ls) = capture {
            if let Some(&bad) = ls.iter().find(|&&l| l >= cfg.num_layers) {
                return Err(Error::Range {
                    what: "capture layer",
                    index: bad,
                    limit: cfg.num_layers,
                });
            }
        }
        let shape = images.shape();
        if shape.len() != 4 || shape[1..] != cfg.image_shape() {
            return Err(Error::Config(format!(
                "batch shape {shape:?} does not match image shape {:?}",
                cfg.image_shape()
            )));
        }
        let bsz = shape[0];
        let (n, t, e, m, d) = (
            cfg.num_patches(),
            cfg.num_tokens(),
            cfg.embed_dim(),
            cfg.num_heads,
            cfg.head_dim,
        );
        let per_image = cfg.image_h * cfg.image_w * cfg.channels;
        let mut patches = Vec::with_capacity(images.numel());
        for img in images.data().chunks(per_image) {
            patches.extend(patchify_raw(img, cfg));
        }
        let x = tape.constant(Tensor::new(vec![bsz, n, cfg.patch_dim()], patches)?);
        let emb = tape.linear(x, b.get("patch_embed.weight")?, b.get("patch_embed.bias")?)?;
        let cls = tape.repeat_leading(b.get("cls_token")?, bsz)?;
        let cls = tape.reshape(cls, &[bsz, 1, e])?;
        let h = tape.concat(&[emb, cls], 1)?;
        let mut h = tape.add_bias(h, b.get("pos_embed")?)?;

        let mut layers = Vec::with_capacity(cfg.num_layers);
        let mut captured = BTreeMap::new();
        let scale = 1.0 / (d as f64).sqrt();
        for l in 0..cfg.num_layers {
            let pre = format!("layers.{l}");
            let p = |name: &str| b.get(&format!("{pre}.{name}"));
            let x1 = tape.layernorm(h, p("norm1.gain")?, p("norm1.bias")?)?;
            let heads = |tape: &mut Tape, proj: &str| -> Result<Var> {
                let y = tape.linear(
                    x1,
                    b.get(&format!("{pre}.attn.{proj}.weight"))?,
                    b.get(&format!("{pre}.attn.{proj}.bias"))?,
                )?;
                let y = tape.reshape(y, &[bsz, t, m, d])?;
                Ok(tape.permute(y, &[0, 2, 1, 3])?)
            };
            let q = heads(tape, "query")?;
            let (k, v) = if cfg.share_key_value {
                let kv = heads(tape, "key_value")?;
                (kv, kv)
            } else {
                (heads(tape, "key")?, heads(tape, "value")?)
            };
            let qf = tape.reshape(q, &[bsz * m, t, d])?;
            let kf = tape.reshape(k, &[bsz * m, t, d])?;
            let vf = tape.reshape(v, &[bsz * m, t, d])?;
            let kt = tape.transpose_last2(kf)?;
            let scores = tape.bmm(qf, kt)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.softmax_last(scores)?;
            let o = tape.bmm(attn, vf)?;
            let o = tape.reshape(o, &[bsz, m, t, d])?;
            let o = tape.permute(o, &[0, 2, 1, 3])?;
            let mut o = tape.reshape(o, &[bsz, t, e])?;
            if cfg.attn_out_proj {
                o = tape.linear(o, p("attn.out.weight")?, p("attn.out.bias")?)?;
            }
            h = tape.add(h, o)?;

            let x2 = tape.layernorm(h, p("norm2.gain")?, p("norm2.bias")?)?;
            let f = tape.linear(x2, p("mlp.fc1.weight")?, p("mlp.fc1.bias")?)?;
            let f = cfg.activation.apply(tape, f)?;
            let f = tape.linear(f, p("mlp.fc2.weight")?, p("mlp.fc2.bias")?)?;
            h = tape.add(h, f)?;

            let attn4 = tape.reshape(attn, &[bsz, m, t, t])?;
            if capture.wants(l) {
                captured.insert(
                    l,
                    LayerActivations {
                        query: tape.value(q).detached(),
                        key: tape.value(k).detached(),
                        value: tape.value(v).detached(),
                        attn: tape.value(attn4).detached(),
                    },
                );
            }
            layers.push(LayerVars {
                query: q,
                key: k,
                value: v,
                attn: attn4,
            });
        }

        let hf = tape.layernorm(h, b.get("norm.gain")?, b.get("norm.bias")?)?;
        let feat = tape.slice_axis(hf, 1, cfg.class_index(), 1)?;
        let features = tape.reshape(feat, &[bsz, e])?;
        let logits = head_logit(tape, b, "head", features, cfg.activation)?;
        let probs = tape.sigmoid(logits)?;
        Ok(ForwardPass {
            logits,
            probs,
            features,
            layers,
            capture: ActivationCapture {
                layers: captured,
                num_patches: n,
            },
        })
    }

    /// Probabilities without gradient tracking.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = self.params.bind_frozen(&mut tape);
        let pass = self.forward(&mut tape, &b, images, &CaptureSpec::None)?;
        Ok(tape.value(pass.probs).data().to_vec())
    }

    /// Forward on a frozen copy with the requested layers captured.
    pub fn capture(&self, images: &Tensor, spec: &CaptureSpec) -> Result<ActivationCapture> {
        let mut tape = Tape::new();
        let b = self.params.bind_frozen(&mut tape);
        Ok(self.forward(&mut tape, &b, images, spec)?.capture)
    }
}
