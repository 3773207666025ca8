//! Named parameter storage and its binding into a [`Graph`].

use std::collections::HashMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named tensors.
///
/// A frozen set can still be evaluated but refuses optimizer updates.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
    frozen: bool,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
            frozen: false,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name `{name}`");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Digest over all names, shapes and values, in insertion order.
    pub fn digest(&self) -> String {
        self.digest_of(self.ids())
    }

    /// Digest over a subset of parameters, ignoring their names.
    pub fn digest_of(&self, ids: impl IntoIterator<Item = ParamId>) -> String {
        let mut h = Sha256::new();
        for id in ids {
            self.tensors[id.0].hash_into(&mut h);
        }
        hex::encode(h.finalize())
    }

    /// Overwrites every tensor from `(name, tensor)` pairs with identical names and shapes.
    pub fn load_named(&mut self, named: impl IntoIterator<Item = (String, Tensor<T>)>) -> Result<()> {
        let mut seen = vec![false; self.len()];
        for (name, t) in named {
            let id = self
                .find(&name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("unexpected tensor `{name}`")))?;
            if self.tensors[id.0].shape() != t.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    self.tensors[id.0].shape()
                )));
            }
            self.tensors[id.0] = t;
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::CheckpointMismatch(format!("missing tensor `{}`", self.names[i])));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
            frozen: self.frozen,
        }
    }
}

/// Parameters of one [`ParamSet`] placed on a [`Graph`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    trainable: bool,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Gradients aligned with the bound set; zero where detached.
    pub fn grads<T: Scalar>(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|&v| grads.wrt(v)).collect()
    }
}

impl<T: Scalar> Graph<T> {
    /// Places every tensor of `set` on the graph, as parameters when
    /// `trainable`, otherwise as constants.
    pub fn bind(&mut self, set: &ParamSet<T>, trainable: bool) -> Bound {
        let vars = set
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    self.param(t.clone())
                } else {
                    self.constant(t.clone())
                }
            })
            .collect();
        Bound { vars, trainable }
    }
}

/// How freshly declared parameters are filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation.
    Normal(f64),
    /// Normal with std `gain / sqrt(fan_in)`, fan-in being the first extent.
    FanIn(f64),
}

enum Source<'a, T, R> {
    Random(&'a mut R),
    Copy { from: &'a ParamSet<T>, prefix: String },
}

/// Declares parameters into a [`ParamSet`] under a name prefix, either with
/// fresh initial values or by copying identically named tensors from another set.
pub struct ParamBuilder<'a, T, R> {
    set: &'a mut ParamSet<T>,
    source: Source<'a, T, R>,
    prefix: String,
}

impl<'a, T: Scalar, R: Rng> ParamBuilder<'a, T, R> {
    pub fn random(set: &'a mut ParamSet<T>, rng: &'a mut R) -> Self {
        Self {
            set,
            source: Source::Random(rng),
            prefix: String::new(),
        }
    }

    /// Copies `from[src_prefix + name]` for every declared `name`.
    pub fn copying(set: &'a mut ParamSet<T>, from: &'a ParamSet<T>, src_prefix: &str) -> Self {
        Self {
            set,
            source: Source::Copy {
                from,
                prefix: src_prefix.to_string(),
            },
            prefix: String::new(),
        }
    }

    pub fn with_prefix(mut self, prefix: &str) -> Self {
        self.prefix = prefix.to_string();
        self
    }

    /// Runs `f` with `segment.` appended to the name prefix.
    pub fn scope<U>(&mut self, segment: &str, f: impl FnOnce(&mut Self) -> U) -> U {
        let saved = self.prefix.clone();
        self.prefix = format!("{saved}{segment}.");
        let out = f(self);
        self.prefix = saved;
        out
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let full = format!("{}{name}", self.prefix);
        let tensor = match &mut self.source {
            Source::Random(rng) => match init {
                Init::Zeros => Tensor::zeros(shape.to_vec()),
                Init::Ones => Tensor::ones(shape.to_vec()),
                Init::Normal(std) => Tensor::randn(shape.to_vec(), std, *rng),
                Init::FanIn(gain) => {
                    let fan_in = shape.first().copied().unwrap_or(1).max(1) as f64;
                    Tensor::randn(shape.to_vec(), gain / fan_in.sqrt(), *rng)
                }
            },
            Source::Copy { from, prefix } => {
                let src = format!("{prefix}{full}");
                let id = from.find(&src).unwrap_or_else(|| panic!("copy source lacks `{src}`"));
                let t = from.get(id).clone();
                assert_eq!(t.shape(), shape, "copy source `{src}` has wrong shape");
                t
            }
        };
        self.set.push(full, tensor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn copy_builder_reproduces_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = ParamSet::<f32>::new();
        let mut pb = ParamBuilder::random(&mut a, &mut rng).with_prefix("base.");
        let w = pb.scope("lin", |pb| pb.param("w", &[3, 2], Init::FanIn(1.0)));
        let mut b = ParamSet::<f32>::new();
        let mut pb = ParamBuilder::<f32, ChaCha8Rng>::copying(&mut b, &a, "base.").with_prefix("");
        let w2 = pb.scope("lin", |pb| pb.param("w", &[3, 2], Init::Zeros));
        assert_eq!(a.get(w), b.get(w2));
        assert_eq!(b.name(w2), "lin.w");
    }

    #[test]
    fn load_named_validates() {
        let mut s = ParamSet::<f64>::new();
        s.push("a", Tensor::zeros([2]));
        assert!(s.load_named([("a".to_string(), Tensor::zeros([3]))]).is_err());
        assert!(s.load_named([("b".to_string(), Tensor::zeros([2]))]).is_err());
        assert!(s.load_named(Vec::new()).is_err());
        s.load_named([("a".to_string(), Tensor::ones([2]))]).unwrap();
        assert_eq!(s.get(ParamId(0)).data(), &[1.0, 1.0]);
    }
}
