//! Central finite-difference checks of tape gradients.
//!
//! The error measure is `max_i |analytic_i - numeric_i| / (|numeric_i| + 1e-8)`.
//! `f` must be deterministic: a closure that draws fresh randomness on each
//! call makes the numeric side meaningless.

use std::sync::Arc;

use super::{AttnLayout, Graph, ParamStore, Real, Rng, RotaryTable, Tensor, Unary, Var};
use crate::error::{Error, Result};

const FLOOR: f64 = 1e-8;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + FLOOR)
}

fn eval<T: Real>(f: &impl Fn(&mut Graph<T>, Var) -> Result<Var>, x: Tensor<T>) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.leaf(x)?;
    let out = f(&mut g, v)?;
    Ok(g.value(out).item()?.as_f64())
}

/// Worst relative error between the tape gradient of `f` at `x` and a
/// central difference with step `h`.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::invalid(
            "numerics",
            "finite difference step must be positive",
        ));
    }
    let mut g = Graph::new();
    let v = g.leaf(x.clone())?;
    let out = f(&mut g, v)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .leaf(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += T::lit(h);
        let mut minus = x.clone();
        minus.data_mut()[i] -= T::lit(h);
        let numeric = (eval(&f, plus)? - eval(&f, minus)?) / (2.0 * h);
        worst = worst.max(rel_err(analytic.data()[i].as_f64(), numeric));
    }
    Ok(worst)
}

/// Like [`finite_diff_check`], over every trainable parameter of `store`.
pub fn finite_diff_check_params<T, F>(f: F, store: &ParamStore<T>, h: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::invalid(
            "numerics",
            "finite difference step must be positive",
        ));
    }
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?;
    let value = |s: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        Ok(g.value(out).item()?.as_f64())
    };

    let mut worst = 0.0f64;
    let mut probe = store.clone();
    for (id, p) in store.iter() {
        if p.frozen {
            continue;
        }
        for i in 0..p.value.numel() {
            let orig = p.value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + T::lit(h);
            let up = value(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig - T::lit(h);
            let down = value(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.param(id).map_or(0.0, |g| g.data()[i].as_f64());
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    Ok(worst)
}

/// Result of one entry of [`op_suite`].
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub max_rel_err: f64,
}

type Case = (
    &'static str,
    Vec<usize>,
    Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var>>,
);

/// `sum(y * w)` with a fixed pseudo-random `w`, so every output element
/// contributes with a distinct weight.
fn project(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::from_fn(&shape, |i| {
        ((i * 7919 % 97) as f64 / 97.0) - 0.45 + 0.01 * (n % 3) as f64
    });
    let w = g.constant(w)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn fixed(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), Rng::new(seed).normal_vec(n)).expect("shape matches data")
}

fn cases() -> Vec<Case> {
    let rot = Arc::new(RotaryTable::<f64>::from_angles(
        3,
        2,
        4,
        &[0.3, -1.1, 2.0, 0.4, -0.7, 1.9],
    ));
    let gqa = Arc::new(AttnLayout {
        segments: vec![(0, 2), (2, 3)],
        heads: 4,
        kv_heads: 2,
        head_dim: 3,
    });
    let (k5, v5, q5) = (fixed(&[5, 6], 11), fixed(&[5, 6], 12), fixed(&[5, 12], 13));
    let (ck, cx) = (fixed(&[3, 2, 3, 3], 14), fixed(&[2, 2, 4, 3], 15));
    let mut out: Vec<Case> = vec![
        (
            "add",
            vec![3, 4],
            Box::new(|g, x| {
                let c = g.constant(fixed(&[3, 4], 1))?;
                g.add(x, c)
            }),
        ),
        (
            "sub",
            vec![3, 4],
            Box::new(|g, x| {
                let c = g.constant(fixed(&[3, 4], 1))?;
                g.sub(c, x)
            }),
        ),
        (
            "mul",
            vec![3, 4],
            Box::new(|g, x| {
                let c = g.constant(fixed(&[3, 4], 2))?;
                g.mul(x, c)
            }),
        ),
        ("mul_self", vec![5], Box::new(|g, x| g.mul(x, x))),
        (
            "add_row",
            vec![4],
            Box::new(|g, x| {
                let c = g.constant(fixed(&[3, 4], 3))?;
                g.add_row(c, x)
            }),
        ),
        (
            "mul_row.x",
            vec![3, 4],
            Box::new(|g, x| {
                let r = g.constant(fixed(&[4], 4))?;
                g.mul_row(x, r)
            }),
        ),
        (
            "mul_row.row",
            vec![4],
            Box::new(|g, x| {
                let c = g.constant(fixed(&[3, 4], 3))?;
                g.mul_row(c, x)
            }),
        ),
        ("scale", vec![6], Box::new(|g, x| g.scale(x, -1.7))),
        ("add_scalar", vec![6], Box::new(|g, x| g.add_scalar(x, 0.3))),
        (
            "matmul.a",
            vec![3, 4],
            Box::new(|g, x| {
                let b = g.constant(fixed(&[4, 2], 5))?;
                g.matmul(x, b)
            }),
        ),
        (
            "matmul.b",
            vec![4, 2],
            Box::new(|g, x| {
                let a = g.constant(fixed(&[3, 4], 5))?;
                g.matmul(a, x)
            }),
        ),
        ("sum", vec![2, 3], Box::new(|g, x| g.sum(x))),
        ("mean", vec![2, 3], Box::new(|g, x| g.mean(x))),
        ("sum_rows", vec![3, 4], Box::new(|g, x| g.sum_rows(x))),
        (
            "segment_sum",
            vec![5, 2],
            Box::new(|g, x| g.segment_sum(x, Arc::new(vec![(0, 2), (2, 3)]))),
        ),
        (
            "gather_rows",
            vec![3, 2],
            Box::new(|g, x| g.gather_rows(x, Arc::new(vec![2, 0, 2, 1]))),
        ),
        (
            "concat_rows",
            vec![2, 3],
            Box::new(|g, x| {
                let c = g.constant(fixed(&[1, 3], 6))?;
                g.concat_rows(&[x, c, x])
            }),
        ),
        (
            "concat_cols",
            vec![3, 2],
            Box::new(|g, x| {
                let c = g.constant(fixed(&[3, 1], 6))?;
                g.concat_cols(&[c, x])
            }),
        ),
        (
            "slice_cols",
            vec![3, 5],
            Box::new(|g, x| g.slice_cols(x, 1, 3)),
        ),
        (
            "reshape",
            vec![2, 6],
            Box::new(|g, x| g.reshape(x, &[3, 4])),
        ),
        (
            "transpose_batched",
            vec![2, 3, 4],
            Box::new(|g, x| g.transpose_batched(x)),
        ),
        ("softmax", vec![3, 5], Box::new(|g, x| g.softmax(x))),
        (
            "rms_norm",
            vec![3, 4],
            Box::new(|g, x| g.rms_norm(x, None, 1e-6)),
        ),
        (
            "rms_norm.gain",
            vec![4],
            Box::new(|g, x| {
                let c = g.constant(fixed(&[3, 4], 7))?;
                g.rms_norm(c, Some(x), 1e-6)
            }),
        ),
        (
            "rotary",
            vec![3, 8],
            Box::new(move |g, x| g.rotary(x, rot.clone())),
        ),
        (
            "upsample2x",
            vec![1, 2, 2, 3],
            Box::new(|g, x| g.upsample2x(x)),
        ),
        (
            "conv2d.x",
            vec![2, 2, 4, 3],
            Box::new(move |g, x| {
                let w = g.constant(ck.clone())?;
                g.conv2d(x, w, None)
            }),
        ),
        (
            "conv2d.w",
            vec![3, 2, 3, 3],
            Box::new(move |g, x| {
                let c = g.constant(cx.clone())?;
                g.conv2d(c, x, None)
            }),
        ),
        (
            "conv2d.b",
            vec![3],
            Box::new(|g, x| {
                let c = g.constant(fixed(&[2, 2, 4, 3], 15))?;
                let w = g.constant(fixed(&[3, 2, 3, 3], 14))?;
                g.conv2d(c, w, Some(x))
            }),
        ),
    ];
    let l = gqa.clone();
    let (k, v) = (k5.clone(), v5.clone());
    out.push((
        "attention.q",
        vec![5, 12],
        Box::new(move |g, x| {
            let (kv, vv) = (g.constant(k.clone())?, g.constant(v.clone())?);
            g.attention(x, kv, vv, l.clone())
        }),
    ));
    let l = gqa.clone();
    let (q, v) = (q5.clone(), v5);
    out.push((
        "attention.k",
        vec![5, 6],
        Box::new(move |g, x| {
            let (qv, vv) = (g.constant(q.clone())?, g.constant(v.clone())?);
            g.attention(qv, x, vv, l.clone())
        }),
    ));
    let (q, k) = (q5, k5);
    out.push((
        "attention.v",
        vec![5, 6],
        Box::new(move |g, x| {
            let (qv, kv) = (g.constant(q.clone())?, g.constant(k.clone())?);
            g.attention(qv, kv, x, gqa.clone())
        }),
    ));
    for (name, u) in [
        ("silu", Unary::Silu),
        ("gelu", Unary::Gelu),
        ("sigmoid", Unary::Sigmoid),
        ("sin", Unary::Sin),
        ("tanh", Unary::Tanh),
        ("abs", Unary::Abs),
        ("square", Unary::Square),
        ("exp", Unary::Exp),
    ] {
        out.push((name, vec![7], Box::new(move |g, x| g.unary(x, u))));
    }
    out.push((
        "sqrt",
        vec![7],
        Box::new(|g, x| {
            let sq = g.square(x)?;
            let pos = g.add_scalar(sq, 0.5)?;
            g.unary(pos, Unary::Sqrt)
        }),
    ));
    out
}

/// Finite-difference check of every differentiable tape operation in `f64`,
/// each projected to a scalar with fixed distinct weights.
pub fn op_suite() -> Result<Vec<OpCheck>> {
    cases()
        .into_iter()
        .enumerate()
        .map(|(i, (op, shape, f))| {
            let x = fixed(&shape, 100 + i as u64);
            let max_rel_err = finite_diff_check(
                |g, x| {
                    let y = f(g, x)?;
                    project(g, y)
                },
                &x,
                1e-6,
            )?;
            Ok(OpCheck { op, max_rel_err })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::<f64>::new(vec![4], vec![0.3, -1.2, 2.0, 5.5]).unwrap();
        let err = finite_diff_check(|g, x| g.sum(x), &x, 1e-3).unwrap();
        assert!(err <= 1e-7, "{err}");
    }

    #[test]
    fn sum_of_sin() {
        let x = Tensor::<f64>::new(vec![2], vec![0.3, 0.7]).unwrap();
        let err = finite_diff_check(
            |g, x| {
                let s = g.unary(x, Unary::Sin)?;
                g.sum(s)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn every_op_passes() {
        let checks = op_suite().unwrap();
        assert!(checks.len() >= 35);
        for c in checks {
            assert!(c.max_rel_err <= 1e-3, "{}: {}", c.op, c.max_rel_err);
        }
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::<f64>::zeros(&[1]);
        assert!(finite_diff_check(|g, x| g.sum(x), &x, 0.0).is_err());
    }
}
