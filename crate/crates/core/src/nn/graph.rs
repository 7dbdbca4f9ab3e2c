//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with a
//! closure that maps the output gradient to input gradients. Parameters are
//! bound from a [`ParamStore`] on first use, so each parameter appears as a
//! single leaf no matter how often a layer reads it.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Whether normalization layers use batch statistics (and schedule running
/// statistic updates) or their frozen running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct Graph<'s, T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    store: Option<&'s ParamStore<T>>,
    mode: Mode,
    grad_enabled: bool,
    bound: RefCell<HashMap<ParamId, usize>>,
    buffer_updates: RefCell<Vec<(ParamId, Tensor<T>)>>,
}

#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    pub(crate) g: &'g Graph<'g, T>,
    pub(crate) id: usize,
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode, grad_enabled: bool) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            store: Some(store),
            mode,
            grad_enabled,
            bound: RefCell::new(HashMap::new()),
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    /// Training graph: batch statistics, gradients recorded.
    pub fn train(store: &'s ParamStore<T>) -> Self {
        Self::new(store, Mode::Train, true)
    }

    /// Inference graph: running statistics, nothing recorded for backward.
    pub fn eval(store: &'s ParamStore<T>) -> Self {
        Self::new(store, Mode::Eval, false)
    }

    /// A graph with no parameter store, for free-standing tensor math.
    pub fn detached(grad_enabled: bool) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            store: None,
            mode: Mode::Eval,
            grad_enabled,
            bound: RefCell::new(HashMap::new()),
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn store(&self) -> Result<&'s ParamStore<T>> {
        self.store
            .ok_or_else(|| Error::State("graph has no parameter store".into()))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Input that does not require a gradient.
    pub fn constant<'g>(&'g self, t: Tensor<T>) -> Var<'g, T>
    where
        's: 'g,
    {
        let id = self.push_node(Node {
            value: Rc::new(t),
            parents: vec![],
            backward: None,
            requires_grad: false,
        });
        Var { g: self, id }
    }

    /// Input that gradients are tracked for (when the graph records them).
    pub fn variable<'g>(&'g self, t: Tensor<T>) -> Var<'g, T>
    where
        's: 'g,
    {
        let id = self.push_node(Node {
            value: Rc::new(t),
            parents: vec![],
            backward: None,
            requires_grad: self.grad_enabled,
        });
        Var { g: self, id }
    }

    /// Binds a stored parameter as a leaf (once per graph).
    pub fn param<'g>(&'g self, id: ParamId) -> Result<Var<'g, T>>
    where
        's: 'g,
    {
        if let Some(&node) = self.bound.borrow().get(&id) {
            return Ok(Var { g: self, id: node });
        }
        let store = self.store()?;
        let p = store.get(id);
        let node = self.push_node(Node {
            value: Rc::new(p.value.clone()),
            parents: vec![],
            backward: None,
            requires_grad: self.grad_enabled && p.trainable,
        });
        self.bound.borrow_mut().insert(id, node);
        Ok(Var { g: self, id: node })
    }

    /// Reads a non-trainable buffer (e.g. running statistics) by value.
    pub fn buffer(&self, id: ParamId) -> Result<Tensor<T>> {
        Ok(self.store()?.get(id).value.clone())
    }

    /// Schedules a buffer overwrite, applied by [`ParamStore::apply_buffer_updates`].
    pub fn update_buffer(&self, id: ParamId, value: Tensor<T>) {
        if self.mode == Mode::Train {
            self.buffer_updates.borrow_mut().push((id, value));
        }
    }

    pub fn take_buffer_updates(&self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates.borrow_mut())
    }

    pub(crate) fn record<'g>(
        &'g self,
        value: Tensor<T>,
        parents: &[Var<'g, T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'g, T>
    where
        's: 'g,
    {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = self.grad_enabled && {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        let id = self.push_node(Node {
            value: Rc::new(value),
            parents: if requires_grad { ids } else { vec![] },
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
        });
        Var { g: self, id }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Grads<T>> {
        let root = loss.id;
        let nodes = self.nodes.borrow();
        if nodes[root].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", nodes[root].value.shape()),
            ));
        }
        if !nodes[root].value.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(nodes[root].value.shape(), T::one()));
        for id in (0..=root).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if let Some(bw) = &node.backward {
                let needs: Vec<bool> = node
                    .parents
                    .iter()
                    .map(|&p| nodes[p].requires_grad)
                    .collect();
                let pgrads = bw(&gout, &needs);
                debug_assert_eq!(pgrads.len(), node.parents.len());
                for ((&p, pg), need) in node.parents.iter().zip(pgrads).zip(needs) {
                    let Some(pg) = pg else { continue };
                    if !need {
                        continue;
                    }
                    debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            // leaves keep their gradient
            if node.parents.is_empty() {
                grads[id] = Some(gout);
            }
        }
        let bound = self.bound.borrow().clone();
        Ok(Grads { by_node: grads, bound })
    }
}

pub struct Grads<T> {
    by_node: Vec<Option<Tensor<T>>>,
    bound: HashMap<ParamId, usize>,
}

impl<T: Real> Grads<T> {
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.by_node.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradients of every bound parameter that received one, ordered by id.
    pub fn params(&self) -> Vec<(ParamId, &Tensor<T>)> {
        let mut out: Vec<(ParamId, &Tensor<T>)> = self
            .bound
            .iter()
            .filter_map(|(&pid, &node)| self.by_node[node].as_ref().map(|g| (pid, g)))
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.bound
            .get(&id)
            .and_then(|&node| self.by_node[node].as_ref())
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.g.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.g.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn graph(&self) -> &'g Graph<'g, T> {
        self.g
    }

    pub fn requires_grad(&self) -> bool {
        self.g.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> T {
        self.value().item()
    }
}
