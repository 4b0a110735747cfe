//! Define-by-run reverse-mode differentiation over dense 2D tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with
//! a closure that maps the output gradient to input gradients. Nodes are
//! appended in evaluation order, which is already a topological order, so
//! [`Graph::backward`] walks the node list in reverse. Parameters live in a
//! [`ParamStore`] outside the graph and enter it through [`Graph::param`].
//!
//! Heavy operations (selective scan, edge aggregation, splat rendering,
//! nearest-neighbour losses) register hand-written backward rules via
//! [`Graph::custom`] rather than being unrolled into scalar nodes.

mod check;
mod ops;
mod optim;

pub use check::{finite_diff_check, FdReport};
pub use ops::LAYER_NORM_EPS;
pub(crate) use ops::{silu, silu_grad};
pub use optim::{Adam, AdamConfig};

use std::cell::RefCell;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data does not match shape");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(1, 1, vec![v])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// All parameters flattened in id order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.data.iter().copied()).collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.scalar_count());
        let mut at = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
    }
}

/// Handle to a node in a [`Graph`]. Carries its shape so callers need not
/// borrow the graph to inspect it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Var {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

pub type BackwardFn = Box<dyn Fn(&[f64], &mut GradSink)>;

struct Node {
    value: Rc<Tensor>,
    backward: Option<BackwardFn>,
    param: Option<ParamId>,
}

/// Accumulates input gradients during a backward step.
pub struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    sizes: &'a [usize],
}

impl GradSink<'_> {
    /// Mutable gradient buffer of `v`, zero-initialized on first access.
    pub fn slot(&mut self, v: Var) -> &mut [f64] {
        let size = self.sizes[v.id];
        self.grads[v.id].get_or_insert_with(|| vec![0.0; size])
    }

    pub fn add(&mut self, v: Var, g: &[f64]) {
        let slot = self.slot(v);
        debug_assert_eq!(slot.len(), g.len());
        for (s, x) in slot.iter_mut().zip(g) {
            *s += x;
        }
    }
}

/// Gradients of a scalar with respect to every parameter it touched.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.params().iter().map(|p| Some(vec![0.0; p.value.len()])).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Flattened in parameter id order; untouched parameters contribute zeros.
    pub fn flatten(&self, store: &ParamStore) -> Vec<f64> {
        let mut out = Vec::with_capacity(store.scalar_count());
        for (i, p) in store.params().iter().enumerate() {
            match self.grads.get(i).and_then(|g| g.as_ref()) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat(0.0).take(p.value.len())),
            }
        }
        out
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in self.grads.iter_mut().flatten() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
        norm
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()))
    }

    /// Elementwise sum, used to merge per-example gradients in a fixed order.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(b) = b {
                match a {
                    Some(a) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
                    None => *a = Some(b.clone()),
                }
            }
        }
    }
}

/// A discrete decision taken while building a graph: a sort order, a
/// neighbour table, a nearest-point assignment or the signs of an absolute
/// value. Gradients treat these as constants.
#[derive(Debug, Clone, PartialEq)]
pub enum Branch {
    Indices(Vec<usize>),
    Signs(Vec<f64>),
}

/// The decisions of one forward pass, in the order they were taken.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Branches(pub Vec<Branch>);

/// Recording tape.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    param_vars: RefCell<Vec<Option<Var>>>,
    record: bool,
    taken: RefCell<Vec<Branch>>,
    replay: Option<Vec<Branch>>,
    cursor: RefCell<usize>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            param_vars: RefCell::new(Vec::new()),
            record: true,
            taken: RefCell::new(Vec::new()),
            replay: None,
            cursor: RefCell::new(0),
        }
    }

    /// A recording graph that takes the given decisions instead of making
    /// its own, so that the function it evaluates is the smooth piece the
    /// recorded pass was on.
    pub fn replaying(branches: Branches) -> Self {
        Self {
            replay: Some(branches.0),
            ..Self::new()
        }
    }

    /// Decisions taken so far (empty for inference graphs).
    pub fn branches(&self) -> Branches {
        Branches(self.taken.borrow().clone())
    }

    fn branch(&self, decide: impl FnOnce() -> Result<Branch>) -> Result<Branch> {
        let b = match &self.replay {
            Some(list) => {
                let mut c = self.cursor.borrow_mut();
                let b = list.get(*c).cloned().ok_or_else(|| {
                    Error::Mode("replayed pass takes more decisions than were recorded".into())
                })?;
                *c += 1;
                b
            }
            None => decide()?,
        };
        if self.record {
            self.taken.borrow_mut().push(b.clone());
        }
        Ok(b)
    }

    /// An index decision of length `len`, made by `decide` unless replaying.
    pub fn choose_indices(&self, len: usize, decide: impl FnOnce() -> Result<Vec<usize>>) -> Result<Vec<usize>> {
        match self.branch(|| decide().map(Branch::Indices))? {
            Branch::Indices(v) if v.len() == len => Ok(v),
            _ => Err(Error::Mode("replayed decision does not match this operation".into())),
        }
    }

    /// A sign decision of length `len`, made by `decide` unless replaying.
    pub fn choose_signs(&self, len: usize, decide: impl FnOnce() -> Vec<f64>) -> Result<Vec<f64>> {
        match self.branch(|| Ok(Branch::Signs(decide())))? {
            Branch::Signs(v) if v.len() == len => Ok(v),
            _ => Err(Error::Mode("replayed decision does not match this operation".into())),
        }
    }

    /// A graph that evaluates forward values only; [`Graph::backward`] on it
    /// yields empty gradients.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push(&self, value: Tensor, backward: Option<BackwardFn>, param: Option<ParamId>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let var = Var {
            id: nodes.len(),
            rows: value.rows,
            cols: value.cols,
        };
        nodes.push(Node {
            value: Rc::new(value),
            backward: if self.record { backward } else { None },
            param,
        });
        var
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, None, None)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.borrow().get(id.0) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), None, Some(id));
        let mut pv = self.param_vars.borrow_mut();
        if pv.len() <= id.0 {
            pv.resize(id.0 + 1, None);
        }
        pv[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.id].value)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.id].value.data[0]
    }

    /// Registers an operation with a hand-written backward rule. The closure
    /// receives the output gradient and must add each input's gradient to
    /// the sink.
    pub fn custom(
        &self,
        value: Tensor,
        backward: impl Fn(&[f64], &mut GradSink) + 'static,
    ) -> Var {
        self.push(value, Some(Box::new(backward)), None)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let sizes: Vec<usize> = nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        let n_params = self.param_vars.borrow().len();
        let mut out = Gradients {
            grads: vec![None; n_params],
        };
        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Some(pid) = node.param {
                out.grads[pid.0] = Some(g);
                continue;
            }
            if let Some(bw) = &node.backward {
                let mut sink = GradSink {
                    grads: &mut grads[..i],
                    sizes: &sizes,
                };
                bw(&g, &mut sink);
            }
        }
        Ok(out)
    }
}
