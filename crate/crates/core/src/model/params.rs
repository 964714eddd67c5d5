//! Named parameter storage and shape-only layouts.

use crate::error::{Error, Result};
use crate::freeze::Pattern;
use crate::tensor::{Float, Tensor};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Index of a tensor inside a [`ParamTree`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a freshly declared parameter is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Every trainable tensor of a model, addressed by a unique slash path.
/// Insertion order is the checkpoint manifest order.
#[derive(Clone, Debug, Default)]
pub struct ParamTree<F> {
    entries: Vec<(String, Tensor<F>)>,
    index: HashMap<String, usize>,
}

impl<F: Float> ParamTree<F> {
    pub fn new() -> Self {
        ParamTree {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor<F>) -> Result<ParamId> {
        let path = path.into();
        if self.index.contains_key(&path) {
            return Err(Error::State(format!("parameter `{path}` already exists")));
        }
        self.index.insert(path.clone(), self.entries.len());
        self.entries.push((path, tensor));
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, path: &str) -> Option<ParamId> {
        self.index.get(path).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].1
    }

    pub fn path(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn by_path(&self, path: &str) -> Option<&Tensor<F>> {
        self.id(path).map(|id| self.get(id))
    }

    pub fn by_path_mut(&mut self, path: &str) -> Option<&mut Tensor<F>> {
        self.id(path).map(|id| self.get_mut(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (p, t))| (ParamId(i), p.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &str, &mut Tensor<F>)> {
        self.entries
            .iter_mut()
            .enumerate()
            .map(|(i, (p, t))| (ParamId(i), p.as_str(), t))
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|(_, t)| t.zero_grad());
    }

    pub fn accumulate(&mut self, grads: ParamGrads<F>) -> Result<()> {
        for (id, g) in grads.0 {
            self.entries[id.0].1.accumulate_grad(&g)?;
        }
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout {
            entries: self
                .entries
                .iter()
                .map(|(p, t)| ParamInfo {
                    path: p.clone(),
                    shape: t.shape().to_vec(),
                    trainable: t.requires_grad(),
                })
                .collect(),
        }
    }
}

/// Gradients for a set of parameters, produced by one backward pass.
#[derive(Debug, Default)]
pub struct ParamGrads<F>(pub Vec<(ParamId, Vec<F>)>);

/// Path, shape and trainable flag of one parameter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub path: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

impl ParamInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Matrices only: what the `4 d^2`-style formulas count.
    pub fn is_matrix(&self) -> bool {
        self.shape.len() >= 2
    }
}

/// How [`ParamLayout::count`] treats vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountMode {
    /// Every scalar, weights and biases alike.
    All,
    /// Matrices only; biases and norm vectors are left out, reproducing the
    /// `k * d^2` approximations used to size model pieces.
    BiasFree,
}

/// Shape-only view of a model's parameters. Can be built for full-scale
/// configurations without allocating any storage.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub entries: Vec<ParamInfo>,
}

impl ParamLayout {
    pub fn total(&self) -> usize {
        self.entries.iter().map(ParamInfo::numel).sum()
    }

    pub fn count(&self, selector: &Pattern, mode: CountMode) -> usize {
        self.entries
            .iter()
            .filter(|e| selector.matches(&e.path))
            .filter(|e| mode == CountMode::All || e.is_matrix())
            .map(ParamInfo::numel)
            .sum()
    }

    pub fn count_trainable(&self, mode: CountMode) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .filter(|e| mode == CountMode::All || e.is_matrix())
            .map(ParamInfo::numel)
            .sum()
    }

    pub fn get(&self, path: &str) -> Option<&ParamInfo> {
        self.entries.iter().find(|e| e.path == path)
    }
}

/// Receives parameter declarations while a model structure is assembled.
///
/// The same construction code drives both real allocation and shape-only
/// layouts, so the two can never disagree about paths or shapes.
pub(crate) trait ParamSink {
    fn declare(&mut self, path: String, shape: Vec<usize>, init: Init) -> Result<ParamId>;
}

pub(crate) struct LayoutSink {
    pub layout: ParamLayout,
}

impl LayoutSink {
    pub fn new() -> Self {
        LayoutSink {
            layout: ParamLayout::default(),
        }
    }
}

impl ParamSink for LayoutSink {
    fn declare(&mut self, path: String, shape: Vec<usize>, _init: Init) -> Result<ParamId> {
        if self.layout.entries.iter().any(|e| e.path == path) {
            return Err(Error::State(format!("parameter `{path}` already exists")));
        }
        self.layout.entries.push(ParamInfo {
            path,
            shape,
            trainable: true,
        });
        Ok(ParamId(self.layout.entries.len() - 1))
    }
}

pub(crate) struct AllocSink<'a, F> {
    pub tree: &'a mut ParamTree<F>,
    pub rng: ChaCha8Rng,
}

impl<F: Float> ParamSink for AllocSink<'_, F> {
    fn declare(&mut self, path: String, shape: Vec<usize>, init: Init) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data: Vec<F> = match init {
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| F::of(dist.sample(&mut self.rng))).collect()
            }
            Init::Zeros => vec![F::zero(); n],
            Init::Ones => vec![F::one(); n],
        };
        let t = Tensor::new(shape, data)?.with_requires_grad(true);
        self.tree.insert(path, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_paths_rejected() {
        let mut tree = ParamTree::<f32>::new();
        tree.insert("a/weight", Tensor::zeros(vec![2])).unwrap();
        assert!(tree.insert("a/weight", Tensor::zeros(vec![2])).is_err());
        let mut sink = LayoutSink::new();
        sink.declare("x".into(), vec![1], Init::Zeros).unwrap();
        assert!(sink.declare("x".into(), vec![1], Init::Zeros).is_err());
    }

    #[test]
    fn count_modes() {
        let layout = ParamLayout {
            entries: vec![
                ParamInfo {
                    path: "enc/q/weight".into(),
                    shape: vec![4, 4],
                    trainable: true,
                },
                ParamInfo {
                    path: "enc/q/bias".into(),
                    shape: vec![4],
                    trainable: false,
                },
            ],
        };
        let all = Pattern::parse("**").unwrap();
        assert_eq!(layout.count(&all, CountMode::All), 20);
        assert_eq!(layout.count(&all, CountMode::BiasFree), 16);
        assert_eq!(layout.count(&Pattern::parse("dec/**").unwrap(), CountMode::All), 0);
        assert_eq!(layout.count_trainable(CountMode::All), 16);
    }
}
