//! Central finite-difference verification of analytic gradients (64-bit only).

use rand::Rng;

use crate::autodiff::{Graph, Primitive, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::tensor::Tensor;

/// Differences below this are treated as absolute rather than relative.
const FLOOR: f64 = 1e-8;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(FLOOR)
}

/// Maximum over coordinates of `|analytic - numeric| / max(|analytic| + |numeric|, 1e-8)`.
///
/// `f` builds a scalar from the parameter leaf it is handed. Functions with
/// kinks (none among the primitives, but e.g. clamps built on top) must be
/// probed away from them.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let eval = |point: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(point.clone());
        let y = f(&mut g, v)?;
        let out = g.value(y).item();
        if !out.is_finite() {
            return Err(Error::NumericFault { op: "grad_check" });
        }
        Ok(out)
    };

    let mut g = Graph::new();
    let v = g.param(x.clone());
    let y = f(&mut g, v)?;
    let analytic = g.backward(y)?.wrt(v);

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// [`grad_check`] for a whole parameter set, over `coords` coordinates drawn
/// uniformly from all of its scalars. `f` receives the set bound on a fresh
/// graph and builds a scalar.
pub fn grad_check_params<F>(f: F, params: &ParamSet<f64>, coords: usize, eps: f64, rng: &mut impl Rng) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    let eval = |set: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let b = g.bind(set, false);
        let y = f(&mut g, &b)?;
        Ok(g.value(y).item())
    };
    let mut g = Graph::new();
    let b = g.bind(params, true);
    let y = f(&mut g, &b)?;
    let grads = b.grads(&g.backward(y)?);
    let ids: Vec<_> = params.ids().collect();
    let total = params.num_scalars();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let mut k = rng.random_range(0..total);
        let mut p = 0;
        while k >= params.get(ids[p]).len() {
            k -= params.get(ids[p]).len();
            p += 1;
        }
        let orig = probe.get(ids[p]).data()[k];
        probe.get_mut(ids[p]).data_mut()[k] = orig + eps;
        let up = eval(&probe)?;
        probe.get_mut(ids[p]).data_mut()[k] = orig - eps;
        let down = eval(&probe)?;
        probe.get_mut(ids[p]).data_mut()[k] = orig;
        worst = worst.max(rel_err(grads[p].data()[k], (up - down) / (2.0 * eps)));
    }
    Ok(worst)
}

/// Every primitive, with representative parameters, in declaration order.
pub fn primitives() -> Vec<Primitive<f64>> {
    vec![
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Scale(-1.7),
        Primitive::ScaleBy,
        Primitive::MatMul,
        Primitive::Transpose,
        Primitive::Reshape(vec![0]),
        Primitive::Concat(0),
        Primitive::Slice {
            axis: 0,
            start: 0,
            len: 0,
        },
        Primitive::Sum,
        Primitive::Mean,
        Primitive::SumAxis(0),
        Primitive::MeanAxis(0),
        Primitive::Expand { axis: 0, n: 0 },
        Primitive::Softmax,
        Primitive::LayerNorm,
        Primitive::Silu,
        Primitive::Sin,
        Primitive::Cos,
        Primitive::Sqrt,
        Primitive::Exp,
        Primitive::Log,
        Primitive::L2Normalize,
    ]
}

/// One randomized finite-difference check of `prim`: random shapes and
/// operands, the differentiated input in operand slot `slot`, reduced to a
/// scalar by a fixed random weighting. Placeholder extents in `prim` (such
/// as the `0`s from [`primitives`]) are replaced by random valid ones.
/// Returns the worst relative error.
pub fn check_primitive(prim: &Primitive<f64>, slot: usize, rng: &mut crate::rng::Rng) -> Result<f64> {
    let dim = |rng: &mut crate::rng::Rng| rng.random_range(1..=4usize);
    let shape: Vec<usize> = (0..rng.random_range(1..=3usize)).map(|_| dim(rng)).collect();
    let positive = matches!(prim, Primitive::Sqrt | Primitive::Log);
    let draw = |shape: &[usize], rng: &mut crate::rng::Rng| -> Tensor<f64> {
        let t: Tensor<f64> = Tensor::randn(shape.to_vec(), 1.0, rng);
        if positive {
            t.map(|x: f64| 0.5 + x.abs())
        } else {
            t
        }
    };
    let (prim, shapes): (Primitive<f64>, Vec<Vec<usize>>) = match prim {
        Primitive::Add | Primitive::Sub | Primitive::Mul => (prim.clone(), vec![shape.clone(), shape.clone()]),
        Primitive::ScaleBy => (prim.clone(), vec![shape.clone(), vec![1]]),
        Primitive::MatMul => {
            let (m, k, n, b) = (dim(rng), dim(rng), dim(rng), dim(rng));
            let shapes = match rng.random_range(0..4) {
                0 => vec![vec![m, k], vec![k, n]],
                1 => vec![vec![b, m, k], vec![b, k, n]],
                2 => vec![vec![b, m, k], vec![k, n]],
                _ => vec![vec![m, k], vec![b, k, n]],
            };
            (prim.clone(), shapes)
        }
        Primitive::Transpose => {
            let mut s = shape.clone();
            if s.len() < 2 {
                s.push(dim(rng));
            }
            (prim.clone(), vec![s])
        }
        Primitive::Reshape(_) => {
            let n: usize = shape.iter().product();
            (Primitive::Reshape(vec![n]), vec![shape.clone()])
        }
        Primitive::Concat(_) => {
            let axis = rng.random_range(0..shape.len());
            let mut other = shape.clone();
            other[axis] = dim(rng);
            (Primitive::Concat(axis), vec![shape.clone(), other])
        }
        Primitive::Slice { .. } => {
            let axis = rng.random_range(0..shape.len());
            let start = rng.random_range(0..shape[axis]);
            let len = rng.random_range(1..=shape[axis] - start);
            (Primitive::Slice { axis, start, len }, vec![shape.clone()])
        }
        Primitive::SumAxis(_) => (
            Primitive::SumAxis(rng.random_range(0..shape.len())),
            vec![shape.clone()],
        ),
        Primitive::MeanAxis(_) => (
            Primitive::MeanAxis(rng.random_range(0..shape.len())),
            vec![shape.clone()],
        ),
        Primitive::Expand { .. } => {
            let (axis, n) = (rng.random_range(0..=shape.len()), dim(rng));
            (Primitive::Expand { axis, n }, vec![shape.clone()])
        }
        Primitive::Softmax | Primitive::LayerNorm | Primitive::L2Normalize => {
            // Two-element layer norm is sign-valued and its true gradient is
            // pure epsilon, below finite-difference resolution.
            let mut s = shape.clone();
            *s.last_mut().expect("rank >= 1") += 2;
            (prim.clone(), vec![s])
        }
        _ => (prim.clone(), vec![shape.clone()]),
    };
    let slot = slot % shapes.len();
    let operands: Vec<Tensor<f64>> = shapes.iter().map(|s| draw(s, rng)).collect();
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = operands.iter().map(|t| g.constant(t.clone())).collect();
        let y = g.apply(&prim, &vars)?;
        g.shape(y).to_vec()
    };
    let weights: Tensor<f64> = Tensor::randn(out_shape, 1.0, rng);
    grad_check(
        |g, x| {
            let vars: Vec<Var> = operands
                .iter()
                .enumerate()
                .map(|(i, t)| if i == slot { x } else { g.constant(t.clone()) })
                .collect();
            let y = g.apply(&prim, &vars)?;
            let w = g.constant(weights.clone());
            let wy = g.mul(y, w)?;
            g.sum(wy)
        },
        &operands[slot],
        1e-6,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn every_primitive_passes_once() {
        let mut rng = rng_from_seed(11);
        for p in primitives() {
            for slot in 0..2 {
                let err = check_primitive(&p, slot, &mut rng).unwrap();
                assert!(err < 1e-4, "{}: {err}", p.name());
            }
        }
    }

    #[test]
    fn quadratic_form() {
        // f(x) = x^T A x with a fixed non-symmetric A.
        let a = Tensor::from_f64([3, 3], &[2., 1., 0., -1., 3., 0.5, 0., 0.25, 1.]).unwrap();
        let x = Tensor::from_f64([3, 1], &[0.3, -1.2, 2.0]).unwrap();
        let err = grad_check(
            |g, x| {
                let am = g.constant(a.clone());
                let ax = g.matmul(am, x)?;
                let prod = g.mul(x, ax)?;
                g.sum(prod)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }
}
