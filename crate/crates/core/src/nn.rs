//! Small layers shared by the encoders, the denoiser and the probes.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{Bound, Init, ParamBuilder, ParamId};
use crate::scalar::Scalar;

/// `y = x W + b` over the last axis. `x` may have any rank >= 2.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, name: &str, d_in: usize, d_out: usize) -> Self {
        Self::with_init(pb, name, d_in, d_out, Init::FanIn(1.0))
    }

    pub fn zeroed<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, name: &str, d_in: usize, d_out: usize) -> Self {
        Self::with_init(pb, name, d_in, d_out, Init::Zeros)
    }

    pub fn with_init<T: Scalar, R: Rng>(
        pb: &mut ParamBuilder<'_, T, R>,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
    ) -> Self {
        pb.scope(name, |pb| Self {
            w: pb.param("w", &[d_in, d_out], init),
            b: pb.param("b", &[d_out], Init::Zeros),
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        let flat = if shape.len() == 2 {
            x
        } else {
            g.reshape(x, [rows, self.d_in])?
        };
        let y = g.matmul(flat, p.var(self.w))?;
        let b = g.expand(p.var(self.b), 0, rows)?;
        let y = g.add(y, b)?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().expect("rank >= 2") = self.d_out;
            g.reshape(y, out)
        }
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

/// Normalization over the last axis with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, name: &str, dim: usize) -> Self {
        pb.scope(name, |pb| Self {
            gain: pb.param("gain", &[dim], Init::Ones),
            shift: pb.param("shift", &[dim], Init::Zeros),
            dim,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        let flat = g.reshape(x, [rows, self.dim])?;
        let n = g.layer_norm(flat)?;
        let gain = g.expand(p.var(self.gain), 0, rows)?;
        let shift = g.expand(p.var(self.shift), 0, rows)?;
        let y = g.mul(n, gain)?;
        let y = g.add(y, shift)?;
        g.reshape(y, shape)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.gain, self.shift]
    }
}

/// Two linear layers with a SiLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng>(
        pb: &mut ParamBuilder<'_, T, R>,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
    ) -> Self {
        pb.scope(name, |pb| Self {
            fc1: Linear::new(pb, "fc1", d_in, hidden),
            fc2: Linear::new(pb, "fc2", hidden, d_out),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.silu(h)?;
        self.fc2.forward(g, p, h)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.fc1.ids().into_iter().chain(self.fc2.ids()).collect()
    }
}

/// Mean of `(a - b)^2` over all elements.
pub fn mse<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamSet;
    use crate::rng::rng_from_seed;
    use crate::tensor::Tensor;

    #[test]
    fn linear_handles_rank3_inputs() {
        let mut set = ParamSet::<f64>::new();
        let mut rng = rng_from_seed(0);
        let mut pb = ParamBuilder::random(&mut set, &mut rng);
        let lin = Linear::new(&mut pb, "l", 3, 2);
        let mut g = Graph::new();
        let p = g.bind(&set, false);
        let x = g.constant(Tensor::ones([4, 5, 3]));
        let y = lin.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(y), &[4, 5, 2]);
        // Every row sees the same input, so every row has the same output.
        let v = g.value(y).data();
        assert!(v.chunks(2).all(|r| r == &v[..2]));
    }

    #[test]
    fn layer_norm_starts_as_identity_normalization() {
        let mut set = ParamSet::<f64>::new();
        let mut rng = rng_from_seed(0);
        let mut pb = ParamBuilder::random(&mut set, &mut rng);
        let ln = LayerNorm::new(&mut pb, "ln", 4);
        let mut g = Graph::new();
        let p = g.bind(&set, false);
        let x = g.constant(Tensor::from_f64([1, 4], &[1., 2., 3., 4.]).unwrap());
        let y = ln.forward(&mut g, &p, x).unwrap();
        let v = g.value(y).data();
        assert!(v.iter().sum::<f64>().abs() < 1e-12);
    }
}
