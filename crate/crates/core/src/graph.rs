//! Reverse-mode automatic differentiation over a dynamically recorded graph.
//!
//! Every operation appends a node to the graph's arena, so node indices are
//! already a topological order: `backward` walks them once, in reverse.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Identity of the operation that produced a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpTag {
    Constant,
    Input,
    Param,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    AddScalar,
    MulScalar,
    PowScalar,
    Ln,
    Exp,
    Relu,
    Sigmoid,
    Clamp,
    Softmax,
    SumAll,
    MeanAll,
    SliceChannel,
    Concat,
    Conv2d,
    ConvTranspose2d,
    MaxPool2d,
    PoolSpatial,
    PoolChannel,
    Conv1dChannels,
    UpsampleNearest,
}

/// Inputs handed to an operation's vector-Jacobian product.
pub(crate) struct BackwardCtx<'a, T> {
    pub grad: &'a Tensor<T>,
    pub output: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    /// `needs[i]` is false when input `i` does not lead to any trainable leaf.
    pub needs: Vec<bool>,
}

pub(crate) trait Backward<T: Real> {
    /// One gradient per input, `None` where `needs` is false.
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>>;
}

struct Node<T: Real> {
    value: Tensor<T>,
    tag: OpTag,
    parents: Vec<Var>,
    backward: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
    param: Option<String>,
}

/// A named model parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Insertion-ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(name, "duplicate parameter name"));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            value,
            trainable: true,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<T>> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(Error::UnknownParameter(name.to_string())),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Gradients keyed by parameter, in the store's order.
#[derive(Clone, Debug)]
pub struct Gradients<T: Real> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Record of the branch decisions taken by piecewise operations (relu,
/// clamps, maxima). Two evaluations with different signatures straddle a
/// kink, so their difference quotient is not a derivative.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BranchSignature {
    pub hash: u64,
    /// Inputs sitting exactly on a kink (relu at 0, a clamp bound, tied maxima).
    pub kinks: usize,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub(crate) fn fnv_mix(hash: u64, value: u64) -> u64 {
    let mut h = hash;
    for b in value.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    param_vars: HashMap<String, Var>,
    branches: Option<BranchSignature>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_vars: HashMap::new(),
            branches: None,
        }
    }

    /// A graph that records a [`BranchSignature`] while ops execute.
    pub fn with_branch_tracking() -> Self {
        let mut g = Self::new();
        g.branches = Some(BranchSignature {
            hash: FNV_OFFSET,
            kinks: 0,
        });
        g
    }

    pub fn branch_signature(&self) -> Option<BranchSignature> {
        self.branches
    }

    pub(crate) fn tracking_branches(&self) -> bool {
        self.branches.is_some()
    }

    pub(crate) fn note_branches(&mut self, hash: u64, kinks: usize) {
        if let Some(sig) = &mut self.branches {
            sig.hash = fnv_mix(sig.hash, hash);
            sig.kinks += kinks;
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(
        &mut self,
        value: Tensor<T>,
        tag: OpTag,
        requires_grad: bool,
        param: Option<String>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            tag,
            parents: Vec::new(),
            backward: None,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, OpTag::Constant, false, None)
    }

    /// A differentiable leaf whose gradient can be read back with [`Graph::grad`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, OpTag::Input, true, None)
    }

    /// The leaf for a parameter. Repeated calls with the same name return the
    /// same node, so shared weights accumulate a single gradient.
    pub fn param(&mut self, p: &Parameter<T>) -> Var {
        if let Some(&v) = self.param_vars.get(&p.name) {
            return v;
        }
        let v = self.leaf(
            p.value.clone(),
            OpTag::Param,
            p.trainable,
            Some(p.name.clone()),
        );
        self.param_vars.insert(p.name.clone(), v);
        v
    }

    /// Looks `name` up in `store` and returns its leaf.
    pub fn param_named(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        Ok(self.param(store.get(name)?))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn tag(&self, v: Var) -> OpTag {
        self.nodes[v.0].tag
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn record(
        &mut self,
        tag: OpTag,
        value: Tensor<T>,
        parents: Vec<Var>,
        backward: impl Backward<T> + 'static,
    ) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite { op: tag });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward: Option<Box<dyn Backward<T>>> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.nodes.push(Node {
            value,
            tag,
            parents,
            backward,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Propagates gradients from a scalar-shaped `loss` to every node it
    /// depends on. Any previously computed gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NotScalar { shape });
        }
        let Graph { nodes, grads, .. } = self;
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        grads[loss.0] = Some(Tensor::ones(shape));

        for i in (0..=loss.0).rev() {
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let node = &nodes[i];
            if let Some(bw) = &node.backward {
                let ctx = BackwardCtx {
                    grad: &grad,
                    output: &node.value,
                    inputs: node.parents.iter().map(|p| &nodes[p.0].value).collect(),
                    needs: node
                        .parents
                        .iter()
                        .map(|p| nodes[p.0].requires_grad)
                        .collect(),
                };
                let parent_grads = bw.backward(&ctx)?;
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !nodes[p.0].requires_grad {
                        continue;
                    }
                    if cfg!(debug_assertions) && !pg.all_finite() {
                        return Err(Error::NonFinite { op: node.tag });
                    }
                    match &mut grads[p.0] {
                        Some(acc) => acc.add_assign(&pg)?,
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(grad);
        }
        Ok(())
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients for every parameter in `store`; parameters the loss does not
    /// reach get zeros.
    pub fn gradients(&self, store: &ParamStore<T>) -> Gradients<T> {
        let entries = store
            .iter()
            .map(|p| {
                let g = self
                    .param_vars
                    .get(&p.name)
                    .and_then(|v| self.grad(*v))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()));
                (p.name.clone(), g)
            })
            .collect();
        Gradients { entries }
    }

    /// `backward` followed by [`Graph::gradients`].
    pub fn backward_params(&mut self, loss: Var, store: &ParamStore<T>) -> Result<Gradients<T>> {
        self.backward(loss)?;
        Ok(self.gradients(store))
    }

    /// Name of the parameter behind a leaf, if any.
    pub fn param_name(&self, v: Var) -> Option<&str> {
        self.nodes[v.0].param.as_deref()
    }
}
