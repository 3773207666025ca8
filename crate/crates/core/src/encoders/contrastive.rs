use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-wise log-softmax of a `[N, M]` matrix. The row maximum is subtracted as
/// a constant, which leaves the value and gradient unchanged.
pub fn log_softmax_rows<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("log_softmax", format!("expected [N, M], got {shape:?}")));
    }
    let (n, m) = (shape[0], shape[1]);
    let v = g.value(x);
    let maxes: Vec<T> = v
        .data()
        .chunks(m)
        .flat_map(|row| {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            std::iter::repeat_n(mx, m)
        })
        .collect();
    let maxes = g.constant(Tensor::new(vec![n, m], maxes)?);
    let shifted = g.sub(x, maxes)?;
    let e = g.exp(shifted)?;
    let z = g.sum_axis(e, 1)?;
    let lse = g.log(z)?;
    let lse = g.expand(lse, 1, m)?;
    g.sub(shifted, lse)
}

/// Symmetric InfoNCE over matched rows of `a` and `b` (both `[N, d]`,
/// unit-norm) with logits `a b^T / tau`, `tau = exp(log_tau)`.
pub fn contrastive_loss<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, log_tau: Var) -> Result<Var> {
    let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
    if sa.len() != 2 || sa != sb {
        return Err(Error::shape("contrastive", format!("{sa:?} vs {sb:?}")));
    }
    let n = sa[0];
    if n < 2 {
        return Err(Error::invalid("contrastive loss needs at least two pairs"));
    }
    let bt = g.transpose(b)?;
    let sim = g.matmul(a, bt)?;
    let neg = g.scale(log_tau, -T::one())?;
    let inv_tau = g.exp(neg)?;
    let logits = g.scale_by(sim, inv_tau)?;
    let logits_t = g.transpose(logits)?;
    let eye = g.constant(Tensor::from_fn([n, n], |i| {
        if i / n == i % n {
            T::one()
        } else {
            T::zero()
        }
    }));
    let mut total = None;
    for l in [logits, logits_t] {
        let lp = log_softmax_rows(g, l)?;
        let diag = g.mul(lp, eye)?;
        let s = g.sum(diag)?;
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    let total = total.expect("two directions");
    g.scale(total, T::of(-0.5 / n as f64))
}

/// Plain evaluation of the same loss, computed independently in f64.
pub fn contrastive_loss_value<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, tau: f64) -> Result<f64> {
    if a.shape() != b.shape() || a.rank() != 2 {
        return Err(Error::shape(
            "contrastive",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let (n, d) = (a.shape()[0], a.shape()[1]);
    if n < 2 {
        return Err(Error::invalid("contrastive loss needs at least two pairs"));
    }
    let row =
        |t: &Tensor<T>, i: usize| -> Vec<f64> { t.data()[i * d..(i + 1) * d].iter().map(|x| x.as_f64()).collect() };
    let mut s = vec![vec![0.0; n]; n];
    for (i, si) in s.iter_mut().enumerate() {
        let ai = row(a, i);
        for (j, sij) in si.iter_mut().enumerate() {
            *sij = ai.iter().zip(row(b, j)).map(|(x, y)| x * y).sum::<f64>() / tau;
        }
    }
    let nll = |i: usize, it: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = it.collect();
        let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        lse - v[i]
    };
    let mut total = 0.0;
    for (i, row) in s.iter().enumerate() {
        total += nll(i, &mut row.iter().copied());
        total += nll(i, &mut s.iter().map(|r| r[i]));
    }
    Ok(total / (2.0 * n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut t = Tensor::randn([n, d], 1.0, &mut rng_from_seed(seed));
        for r in t.data_mut().chunks_mut(d) {
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter_mut().for_each(|x| *x /= norm);
        }
        t
    }

    fn graph_loss(a: &Tensor<f64>, b: &Tensor<f64>, tau: f64) -> Result<f64> {
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let lt = g.constant(Tensor::full([1], tau.ln()));
        let l = contrastive_loss(&mut g, va, vb, lt)?;
        Ok(g.value(l).item())
    }

    #[test]
    fn graph_matches_reference() {
        let (a, b) = (unit_rows(6, 5, 1), unit_rows(6, 5, 2));
        for tau in [0.07, 0.5, 2.0] {
            let got = graph_loss(&a, &b, tau).unwrap();
            let want = contrastive_loss_value(&a, &b, tau).unwrap();
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn identical_orthonormal_pairs_approach_zero() {
        let n = 4;
        let eye = Tensor::from_fn([n, n], |i| if i / n == i % n { 1.0 } else { 0.0 });
        assert!(graph_loss(&eye, &eye, 0.01).unwrap() < 1e-20);
        // Uniform similarity gives exactly ln N.
        let same = Tensor::from_fn([n, 2], |i| if i % 2 == 0 { 1.0 } else { 0.0 });
        assert!((graph_loss(&same, &same, 0.1).unwrap() - (n as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn single_pair_is_rejected() {
        let a = unit_rows(1, 3, 0);
        assert!(graph_loss(&a, &a, 0.1).is_err());
        assert!(contrastive_loss_value(&a, &a, 0.1).is_err());
    }
}
