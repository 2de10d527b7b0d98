//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward function, so it shares
//! no code path with [`Tape::backward`].

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Relative error used by every gradient check:
/// `|analytic - numeric| / (max(|analytic|, |numeric|) + 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + 1e-6)
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

/// Compares reverse-mode gradients of a scalar-valued `f` with central
/// differences, for every element of every input.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| tape.grad(*v).expect("param leaf").to_vec())
        .collect();

    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.detached())).collect();
        let loss = f(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut worst = (0, 0);
    let mut max_rel_error = 0.0f64;
    let mut work: Vec<Tensor> = inputs.iter().map(Tensor::detached).collect();
    for (i, input) in inputs.iter().enumerate() {
        let mut num = Vec::with_capacity(input.numel());
        for (j, &an) in analytic[i].iter().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let n = (plus - minus) / (2.0 * h);
            let e = relative_error(an, n);
            if e > max_rel_error {
                max_rel_error = e;
                worst = (i, j);
            }
            num.push(n);
        }
        numeric.push(num);
    }
    Ok(GradCheck {
        max_rel_error,
        worst,
        analytic,
        numeric,
    })
}

/// Worst relative error of one op over all seeds.
#[derive(Debug, Clone)]
pub struct OpReport {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub worst_seed: u64,
}

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

/// Every differentiable op with the input shapes it is checked at.
pub fn op_catalog() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    fn s(shapes: &[&[usize]]) -> Vec<Vec<usize>> {
        shapes.iter().map(|x| x.to_vec()).collect()
    }
    vec![
        ("matmul", s(&[&[3, 4], &[4, 2]]), |t, v| {
            t.matmul(v[0], v[1])
        }),
        ("bmm", s(&[&[2, 3, 4], &[2, 4, 2]]), |t, v| {
            t.bmm(v[0], v[1])
        }),
        ("add", s(&[&[2, 3], &[2, 3]]), |t, v| t.add(v[0], v[1])),
        ("sub", s(&[&[2, 3], &[2, 3]]), |t, v| t.sub(v[0], v[1])),
        ("mul", s(&[&[2, 3], &[2, 3]]), |t, v| t.mul(v[0], v[1])),
        ("add_bias", s(&[&[2, 3, 4], &[3, 4]]), |t, v| {
            t.add_bias(v[0], v[1])
        }),
        ("scale", s(&[&[5]]), |t, v| t.scale(v[0], -0.7)),
        ("neg", s(&[&[5]]), |t, v| t.neg(v[0])),
        ("add_scalar", s(&[&[5]]), |t, v| t.add_scalar(v[0], 2.0)),
        ("gelu", s(&[&[3, 4]]), |t, v| t.gelu(v[0])),
        ("relu", s(&[&[3, 4]]), |t, v| t.relu(v[0])),
        ("sigmoid", s(&[&[3, 4]]), |t, v| t.sigmoid(v[0])),
        ("abs", s(&[&[3, 4]]), |t, v| t.abs(v[0])),
        ("softmax", s(&[&[6]]), |t, v| t.softmax_last(v[0])),
        ("softmax_rows", s(&[&[3, 5]]), |t, v| t.softmax_last(v[0])),
        ("layernorm", s(&[&[4, 6], &[6], &[6]]), |t, v| {
            t.layernorm(v[0], v[1], v[2])
        }),
        ("sum", s(&[&[3, 4]]), |t, v| t.sum(v[0])),
        ("mean", s(&[&[3, 4]]), |t, v| t.mean(v[0])),
        ("mean_axis0", s(&[&[5, 2, 3]]), |t, v| t.mean_axis0(v[0])),
        ("l2_norm", s(&[&[3, 4]]), |t, v| t.l2_norm_last(v[0])),
        ("reshape", s(&[&[2, 6]]), |t, v| t.reshape(v[0], &[3, 4])),
        ("transpose", s(&[&[2, 3, 4]]), |t, v| {
            t.transpose_last2(v[0])
        }),
        ("permute", s(&[&[2, 3, 4, 5]]), |t, v| {
            t.permute(v[0], &[0, 2, 1, 3])
        }),
        ("slice", s(&[&[2, 5, 3]]), |t, v| {
            t.slice_axis(v[0], 1, 1, 3)
        }),
        ("select_rows", s(&[&[4, 3]]), |t, v| {
            t.select_rows(v[0], &[3, 0, 3])
        }),
        ("concat", s(&[&[2, 2, 3], &[2, 1, 3]]), |t, v| {
            t.concat(&[v[0], v[1]], 1)
        }),
        ("repeat", s(&[&[2, 3]]), |t, v| t.repeat_leading(v[0], 4)),
        ("linear", s(&[&[2, 3, 4], &[4, 5], &[5]]), |t, v| {
            t.linear(v[0], v[1], v[2])
        }),
        ("bce", s(&[&[8]]), |t, v| {
            let p = t.sigmoid(v[0])?;
            t.bce(p, &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0])
        }),
        (
            "attention",
            s(&[&[2, 3, 4], &[2, 3, 4], &[2, 3, 4]]),
            |t, v| {
                // softmax(q k^T / sqrt(d)) v, two heads of width 4
                let kt = t.transpose_last2(v[1])?;
                let sc = t.bmm(v[0], kt)?;
                let sc = t.scale(sc, 0.5)?;
                let a = t.softmax_last(sc)?;
                t.bmm(a, v[2])
            },
        ),
    ]
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )
    .expect("shape matches data")
}

/// Checks every op in [`op_catalog`] on `seeds` random inputs. Non-scalar
/// outputs are contracted with fixed random weights so each output element
/// carries a distinct upstream gradient.
pub fn op_suite(seeds: u64) -> Result<Vec<OpReport>> {
    let mut out = Vec::new();
    for (name, shapes, f) in op_catalog() {
        let mut rep = OpReport {
            name,
            max_rel_error: 0.0,
            worst_seed: 0,
        };
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
            let gc = check(&inputs, FD_STEP, |t, v| {
                let y = f(t, v)?;
                if t.value(y).numel() == 1 {
                    return Ok(y);
                }
                let mut wr = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
                let w = rand_tensor(&mut wr, t.shape(y));
                let w = t.constant(w);
                let p = t.mul(y, w)?;
                t.sum(p)
            })?;
            if gc.max_rel_error > rep.max_rel_error {
                rep.max_rel_error = gc.max_rel_error;
                rep.worst_seed = seed;
            }
        }
        out.push(rep);
    }
    Ok(out)
}
