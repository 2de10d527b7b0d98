//! Shared helpers: a tiny model for gradient checks and flat-loop loss
//! oracles written without the tape.

#![allow(dead_code)]

use fairvit::baselines::{cell_abs_error, laftr_eo_objective, mmd_penultimate_loss, LAFTR_PREFIX};
use fairvit::debias::{
    adversarial_losses, adversary_features, adversary_loss, average_query_by_group, init_adversary,
    query_alignment_loss, total_loss, AdversaryInput, AlignMode, DebiasConfig, QueryLossMode,
    QueryNorm,
};
use fairvit::harness::RunConfig;
use fairvit::head::init_head;
use fairvit::vit::{Activation, CaptureSpec, VitConfig, VitModel};
use fairvit_autodiff::gradcheck::{relative_error, FD_STEP};
use fairvit_autodiff::{Bindings, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// 4x4 grayscale, 2x2 patches, 2 layers, 2 heads of width 2.
pub fn tiny_vit(act: Activation) -> VitConfig {
    VitConfig {
        image_h: 4,
        image_w: 4,
        channels: 1,
        patch_size: 2,
        num_layers: 2,
        num_heads: 2,
        head_dim: 2,
        mlp_hidden: 4,
        share_key_value: true,
        activation: act,
        attn_out_proj: true,
        head_hidden: 3,
    }
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Replaces every parameter with N(0, 0.5^2) noise (gains around 1) so the
/// check exercises the nonlinear regime rather than the tiny-init one.
fn scalar(t: &Tape, v: Var) -> f64 {
    t.value(v).item().unwrap()
}

fn scramble(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let n = Normal::new(0.0, 0.5).unwrap();
    for (name, t) in store.iter_mut() {
        let gain = name.ends_with(".gamma") || name.ends_with(".gain");
        for v in t.data_mut() {
            *v = n.sample(rng) + if gain { 1.0 } else { 0.0 };
        }
    }
}

/// Six samples covering every (y, a) cell.
pub const GC_Y: [u8; 6] = [0, 0, 0, 1, 1, 1];
pub const GC_A: [u8; 6] = [0, 1, 0, 1, 0, 1];

/// Encoder objective of one training step: task BCE, negated adversary
/// BCE and the query alignment loss.
pub fn encoder_objective(
    tape: &mut Tape,
    model: &VitModel,
    mb: &Bindings,
    ab: &Bindings,
    d: &DebiasConfig,
    images: &Tensor,
) -> fairvit::Result<Var> {
    let vit = &model.cfg;
    let pass = model.forward(tape, mb, images, &CaptureSpec::None)?;
    let target: Vec<f64> = GC_Y.iter().map(|&v| f64::from(v)).collect();
    let ce = tape.bce(pass.probs, &target)?;
    let f = adversary_features(tape, &pass, d, vit)?;
    let (_, enc) = adversarial_losses(
        tape,
        ab,
        f,
        &GC_Y,
        &GC_A,
        d.adversarial_mode,
        vit.activation,
    )?;
    let q = pass.query_patches(tape, d.layer(vit), vit)?;
    let groups = average_query_by_group(tape, q, &GC_Y, &GC_A)?;
    let lq = query_alignment_loss(tape, &groups, d.query_loss_mode, d.query_norm)?;
    total_loss(tape, ce, Some(enc), Some(lq), d.alpha, d.beta)
}

/// Discriminator objective on features of the frozen encoder.
pub fn discriminator_objective(
    tape: &mut Tape,
    model: &VitModel,
    ab: &Bindings,
    d: &DebiasConfig,
    images: &Tensor,
) -> fairvit::Result<Var> {
    let mb = model.params.bind_frozen(tape);
    let pass = model.forward(tape, &mb, images, &CaptureSpec::None)?;
    let f = adversary_features(tape, &pass, d, &model.cfg)?;
    let f = tape.detach(f);
    adversary_loss(
        tape,
        ab,
        f,
        &GC_Y,
        &GC_A,
        d.adversarial_mode,
        model.cfg.activation,
    )
}

/// Largest relative error between tape gradients and central differences
/// over every element of `store`. `f` builds a scalar from the store's
/// bindings; anything else it needs it binds frozen itself.
pub fn store_check<F>(store: &ParamStore, f: F) -> (f64, String)
where
    F: Fn(&mut Tape, &Bindings) -> Var,
{
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let loss = f(&mut tape, &b);
    tape.backward(loss).unwrap();
    let eval = |w: &ParamStore| {
        let mut t = Tape::new();
        let b = w.bind_frozen(&mut t);
        let l = f(&mut t, &b);
        t.value(l).item().unwrap()
    };
    let mut work = store.clone();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut worst = (0.0, String::new());
    for name in &names {
        let analytic = match tape.grad(b.get(name).unwrap()) {
            Some(g) => g.to_vec(),
            None => vec![0.0; store.get(name).unwrap().numel()],
        };
        for (j, &an) in analytic.iter().enumerate() {
            let orig = work.get(name).unwrap().data()[j];
            work.get_mut(name).unwrap().data_mut()[j] = orig + FD_STEP;
            let plus = eval(&work);
            work.get_mut(name).unwrap().data_mut()[j] = orig - FD_STEP;
            let minus = eval(&work);
            work.get_mut(name).unwrap().data_mut()[j] = orig;
            let e = relative_error(an, (plus - minus) / (2.0 * FD_STEP));
            if e > worst.0 {
                worst = (e, format!("{name}[{j}]"));
            }
        }
    }
    worst
}

/// Encoder gradients (adversary frozen) and discriminator gradients
/// (encoder frozen) of the full tiny-ViT debiasing objective at one seed.
/// Returns the worst relative error and where it occurred.
pub fn full_model_check(seed: u64, d: &DebiasConfig, act: Activation) -> (f64, String) {
    let vit = tiny_vit(act);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = VitModel::new(vit.clone(), &mut rng).unwrap();
    scramble(&mut model.params, &mut rng);
    let mut adv = ParamStore::new();
    init_adversary(&mut adv, d, &vit, &mut rng).unwrap();
    scramble(&mut adv, &mut rng);
    let images = rand_tensor(&mut rng, &[6, 4, 4, 1], 0.0, 1.0);

    let enc = store_check(&model.params, |t, mb| {
        let ab = adv.bind_frozen(t);
        encoder_objective(t, &model, mb, &ab, d, &images).unwrap()
    });
    let disc = store_check(&adv, |t, ab| {
        discriminator_objective(t, &model, ab, d, &images).unwrap()
    });
    if enc.0 >= disc.0 {
        (enc.0, format!("encoder {}", enc.1))
    } else {
        (disc.0, format!("discriminator {}", disc.1))
    }
}

/// The debiasing variants the full-model check covers.
pub fn gradcheck_variants() -> Vec<(&'static str, DebiasConfig, Activation)> {
    let mut out = vec![
        (
            "tadet gelu",
            DebiasConfig::tadet(0.7, 1.3),
            Activation::Gelu,
        ),
        (
            "tadet relu",
            DebiasConfig::tadet(0.7, 1.3),
            Activation::Relu,
        ),
    ];
    let mut full = DebiasConfig::tadet(0.5, 0.9);
    full.adversarial_mode = AlignMode::Full;
    full.query_loss_mode = QueryLossMode::Full;
    full.adversary_input = AdversaryInput::QueryFull;
    out.push(("full query, full modes", full, Activation::Gelu));
    let mut pen = DebiasConfig::tadet(1.1, 0.4);
    pen.adversary_input = AdversaryInput::Penultimate;
    pen.query_norm = QueryNorm::ElementAbs;
    pen.target_layer = Some(0);
    out.push(("penultimate, element abs, layer 0", pen, Activation::Gelu));
    out
}

// ---- flat-loop oracles -------------------------------------------------

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn act_fn(act: Activation) -> fn(f64) -> f64 {
    match act {
        Activation::Gelu => gelu,
        Activation::Relu => |x| x.max(0.0),
    }
}

/// Two-layer head on one feature row, returning the probability.
pub fn oracle_head(store: &ParamStore, prefix: &str, x: &[f64], act: Activation) -> f64 {
    let w1 = store.get(&format!("{prefix}.fc1.weight")).unwrap();
    let b1 = store.get(&format!("{prefix}.fc1.bias")).unwrap();
    let w2 = store.get(&format!("{prefix}.fc2.weight")).unwrap();
    let b2 = store.get(&format!("{prefix}.fc2.bias")).unwrap();
    let (inp, hid) = (w1.shape()[0], w1.shape()[1]);
    let f = act_fn(act);
    let mut z = b2.data()[0];
    for h in 0..hid {
        let mut s = b1.data()[h];
        for (i, xi) in x.iter().enumerate().take(inp) {
            s += xi * w1.data()[i * hid + h];
        }
        z += f(s) * w2.data()[h];
    }
    1.0 / (1.0 + (-z).exp())
}

pub fn oracle_bce(p: f64, t: f64) -> f64 {
    let p = p.clamp(fairvit_autodiff::BCE_EPS, 1.0 - fairvit_autodiff::BCE_EPS);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// Class-specific adversary BCE: per-y-subset mean, weighted by subset size.
pub fn oracle_adversary_class_specific(
    store: &ParamStore,
    feats: &[Vec<f64>],
    y: &[u8],
    a: &[u8],
    act: Activation,
) -> f64 {
    let n = feats.len() as f64;
    let mut total = 0.0;
    for yv in 0..2u8 {
        let prefix = if yv == 0 { "adv.y0" } else { "adv.y1" };
        let mut sum = 0.0;
        let mut cnt = 0usize;
        for i in 0..feats.len() {
            if y[i] == yv {
                sum += oracle_bce(oracle_head(store, prefix, &feats[i], act), f64::from(a[i]));
                cnt += 1;
            }
        }
        if cnt > 0 {
            total += (sum / cnt as f64) * (cnt as f64 / n);
        }
    }
    total
}

/// `q[b][m][n][d]` flattened row-major.
pub struct Q4 {
    pub b: usize,
    pub m: usize,
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl Q4 {
    pub fn at(&self, b: usize, m: usize, n: usize, d: usize) -> f64 {
        self.data[((b * self.m + m) * self.n + n) * self.d + d]
    }
}

fn cell_mean(q: &Q4, keep: &dyn Fn(usize) -> bool) -> Option<Vec<f64>> {
    let rows: Vec<usize> = (0..q.b).filter(|&i| keep(i)).collect();
    if rows.is_empty() {
        return None;
    }
    let mut out = vec![0.0; q.m * q.n * q.d];
    for m in 0..q.m {
        for n in 0..q.n {
            for d in 0..q.d {
                let s: f64 = rows.iter().map(|&i| q.at(i, m, n, d)).sum();
                out[(m * q.n + n) * q.d + d] = s / rows.len() as f64;
            }
        }
    }
    Some(out)
}

fn oracle_distance(q: &Q4, c0: &[f64], c1: &[f64], norm: QueryNorm) -> f64 {
    let mut total = 0.0;
    for m in 0..q.m {
        for d in 0..q.d {
            match norm {
                QueryNorm::PatchL2 => {
                    let mut s = 0.0;
                    for n in 0..q.n {
                        let i = (m * q.n + n) * q.d + d;
                        s += (c0[i] - c1[i]).powi(2);
                    }
                    total += s.sqrt();
                }
                QueryNorm::ElementAbs => {
                    for n in 0..q.n {
                        let i = (m * q.n + n) * q.d + d;
                        total += (c0[i] - c1[i]).abs();
                    }
                }
            }
        }
    }
    total
}

/// Query alignment loss by direct summation.
pub fn oracle_query_loss(q: &Q4, y: &[u8], a: &[u8], mode: QueryLossMode, norm: QueryNorm) -> f64 {
    let scale = 1.0 / (2.0 * (q.m * q.d) as f64);
    match mode {
        QueryLossMode::Off => 0.0,
        QueryLossMode::ClassSpecific => {
            let mut total = 0.0;
            for yv in 0..2u8 {
                let c0 = cell_mean(q, &|i| y[i] == yv && a[i] == 0);
                let c1 = cell_mean(q, &|i| y[i] == yv && a[i] == 1);
                if let (Some(c0), Some(c1)) = (c0, c1) {
                    total += oracle_distance(q, &c0, &c1, norm);
                }
            }
            scale * total
        }
        QueryLossMode::Full => {
            let c0 = cell_mean(q, &|i| a[i] == 0);
            let c1 = cell_mean(q, &|i| a[i] == 1);
            match (c0, c1) {
                (Some(c0), Some(c1)) => scale * oracle_distance(q, &c0, &c1, norm),
                _ => 0.0,
            }
        }
    }
}

/// `||mean(f | a=0) - mean(f | a=1)||`.
pub fn oracle_mmd(feats: &[Vec<f64>], a: &[u8]) -> f64 {
    let e = feats[0].len();
    let mut m = [vec![0.0; e], vec![0.0; e]];
    let mut c = [0usize; 2];
    for (f, &g) in feats.iter().zip(a) {
        c[g as usize] += 1;
        for k in 0..e {
            m[g as usize][k] += f[k];
        }
    }
    if c[0] == 0 || c[1] == 0 {
        return 0.0;
    }
    (0..e)
        .map(|k| (m[0][k] / c[0] as f64 - m[1][k] / c[1] as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Mean over populated (y, a) cells of the within-cell mean `|p - a|`.
pub fn oracle_laftr(p: &[f64], y: &[u8], a: &[u8]) -> f64 {
    let mut cells = Vec::new();
    for yv in 0..2u8 {
        for av in 0..2u8 {
            let e: Vec<f64> = (0..p.len())
                .filter(|&i| y[i] == yv && a[i] == av)
                .map(|i| (p[i] - f64::from(av)).abs())
                .collect();
            if !e.is_empty() {
                cells.push(e.iter().sum::<f64>() / e.len() as f64);
            }
        }
    }
    cells.iter().sum::<f64>() / cells.len() as f64
}

pub fn rand_bits(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    (0..n).map(|_| u8::from(rng.random::<bool>())).collect()
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let w = t.shape()[1];
    t.data().chunks(w).map(<[f64]>::to_vec).collect()
}

/// Desk run config with every seed set to `seed`.
pub fn desk_seeded(seed: u64) -> RunConfig {
    let mut c = RunConfig::desk();
    for k in ["seed", "syn.seed", "split.seed"] {
        c.set(k, &seed.to_string()).unwrap();
    }
    c
}

// ---- oracle trials: max abs error over random inputs -------------------

/// Max abs error of the query alignment loss over `trials` inputs, all
/// modes and norms.
pub fn query_alignment_trials(trials: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, m, n, d) = (
            rng.random_range(1..9),
            rng.random_range(1..4),
            rng.random_range(1..6),
            rng.random_range(1..5),
        );
        let q = rand_tensor(&mut rng, &[b, m, n, d], -2.0, 2.0);
        let y = rand_bits(&mut rng, b);
        let a = rand_bits(&mut rng, b);
        let flat = Q4 {
            b,
            m,
            n,
            d,
            data: q.data().to_vec(),
        };
        for mode in [QueryLossMode::ClassSpecific, QueryLossMode::Full] {
            for norm in [QueryNorm::PatchL2, QueryNorm::ElementAbs] {
                let mut tape = Tape::new();
                let qv = tape.constant(q.clone());
                let g = average_query_by_group(&mut tape, qv, &y, &a).unwrap();
                let l = query_alignment_loss(&mut tape, &g, mode, norm).unwrap();
                let got = scalar(&tape, l);
                let want = oracle_query_loss(&flat, &y, &a, mode, norm);
                worst = worst.max((got - want).abs());
            }
        }
    }
    worst
}

pub fn mmd_trials(trials: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, e) = (rng.random_range(1..12), rng.random_range(1..7));
        let f = rand_tensor(&mut rng, &[b, e], -3.0, 3.0);
        let a = rand_bits(&mut rng, b);
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let l = mmd_penultimate_loss(&mut tape, fv, &a).unwrap();
        let (got, want) = (scalar(&tape, l), oracle_mmd(&rows(&f), &a));
        worst = worst.max((got - want).abs());
    }
    worst
}

pub fn laftr_trials(trials: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, e) = (rng.random_range(1..12), rng.random_range(1..6));
        let f = rand_tensor(&mut rng, &[b, e], -2.0, 2.0);
        let y = rand_bits(&mut rng, b);
        let a = rand_bits(&mut rng, b);
        let act = if seed % 2 == 0 {
            Activation::Gelu
        } else {
            Activation::Relu
        };
        let mut store = ParamStore::new();
        init_head(&mut store, LAFTR_PREFIX, e, 4, &mut rng).unwrap();
        for (_, t) in store.iter_mut() {
            for v in t.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let mut tape = Tape::new();
        let ab = store.bind_frozen(&mut tape);
        let fv = tape.constant(f.clone());
        let l = laftr_eo_objective(&mut tape, &ab, fv, &y, &a, act).unwrap();
        let p: Vec<f64> = rows(&f)
            .iter()
            .map(|r| oracle_head(&store, LAFTR_PREFIX, r, act))
            .collect();
        let (got, want) = (scalar(&tape, l), oracle_laftr(&p, &y, &a));
        let pv = tape.constant(Tensor::vector(p.clone()));
        let c = cell_abs_error(&mut tape, pv, &y, &a).unwrap();
        worst = worst
            .max((got - want).abs())
            .max((scalar(&tape, c) - want).abs());
    }
    worst
}

pub fn adversary_trials(trials: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vit = VitConfig {
            head_hidden: rng.random_range(1..6),
            ..VitConfig::desk()
        };
        let d = DebiasConfig::tadet(1.0, 0.0);
        let mut store = ParamStore::new();
        init_adversary(&mut store, &d, &vit, &mut rng).unwrap();
        for (_, t) in store.iter_mut() {
            for v in t.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        let b = rng.random_range(1..12);
        let f = rand_tensor(&mut rng, &[b, vit.embed_dim()], -2.0, 2.0);
        let y = rand_bits(&mut rng, b);
        let a = rand_bits(&mut rng, b);
        let act = if seed % 2 == 0 {
            Activation::Gelu
        } else {
            Activation::Relu
        };
        let mut tape = Tape::new();
        let ab = store.bind_frozen(&mut tape);
        let fv = tape.constant(f.clone());
        let l = adversary_loss(&mut tape, &ab, fv, &y, &a, AlignMode::ClassSpecific, act).unwrap();
        let (got, want) = (
            scalar(&tape, l),
            oracle_adversary_class_specific(&store, &rows(&f), &y, &a, act),
        );
        worst = worst.max((got - want).abs());
    }
    worst
}
