//! Parameterised layers on top of the tape.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use crate::autodiff::{multi_head_attention, Init, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// A tape bound to a parameter snapshot. Inside [`Graph::frozen`] every
/// parameter is read as a constant, so that pass contributes no gradient.
pub struct Graph<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    frozen: bool,
    frozen_params: HashMap<String, Var>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            frozen: false,
            frozen_params: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let value = self.store.get(name)?;
        if self.frozen {
            if let Some(&v) = self.frozen_params.get(name) {
                return Ok(v);
            }
            let v = self.tape.constant(value.clone());
            self.frozen_params.insert(name.to_string(), v);
            Ok(v)
        } else {
            Ok(self.tape.param(name, value))
        }
    }

    pub fn frozen<R>(&mut self, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        let prev = self.frozen;
        self.frozen = true;
        let out = f(self);
        self.frozen = prev;
        out
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

/// `y = x W + b` with `W: in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        store.init(
            &self.weight_name(),
            &[self.in_dim, self.out_dim],
            Init::TruncNormal,
        )?;
        store.init(&self.bias_name(), &[1, self.out_dim], Init::Zeros)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight_name())?;
        let b = g.param(&self.bias_name())?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        LayerNorm {
            name: name.into(),
            dim,
        }
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        store.init(&format!("{}.gain", self.name), &[1, self.dim], Init::Ones)?;
        store.init(&format!("{}.bias", self.name), &[1, self.dim], Init::Zeros)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(&format!("{}.gain", self.name))?;
        let bias = g.param(&format!("{}.bias", self.name))?;
        g.layer_norm(x, gain, bias)
    }
}

/// Multi-head attention with learned query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(name: &str, dim: usize, heads: usize) -> Self {
        Attention {
            q: Linear::new(format!("{name}.q"), dim, dim),
            k: Linear::new(format!("{name}.k"), dim, dim),
            v: Linear::new(format!("{name}.v"), dim, dim),
            out: Linear::new(format!("{name}.out"), dim, dim),
            heads,
        }
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        for l in [&self.q, &self.k, &self.v, &self.out] {
            l.register(store)?;
        }
        Ok(())
    }

    /// `queries` attend over `context`.
    pub fn forward(&self, g: &mut Graph, queries: Var, context: Var) -> Result<Var> {
        let q = self.q.forward(g, queries)?;
        let k = self.k.forward(g, context)?;
        let v = self.v.forward(g, context)?;
        let mixed = multi_head_attention(&mut g.tape, q, k, v, self.heads)?;
        self.out.forward(g, mixed)
    }
}

/// Sets a linear layer's weight and bias to zero.
pub fn zero_linear(store: &mut ParamStore, layer: &Linear) -> Result<()> {
    for name in [layer.weight_name(), layer.bias_name()] {
        let t = store.get_mut(&name)?;
        *t = Tensor::zeros(t.shape());
    }
    Ok(())
}
