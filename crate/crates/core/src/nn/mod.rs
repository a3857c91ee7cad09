//! Parameter storage and a tape-based reverse-mode autodiff graph over
//! `ndarray::Array4` tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Operations record
//! enough state for the backward sweep, which walks the tape in reverse and
//! accumulates gradients into every node that requires them. Batch-norm
//! running statistics are not written during the forward pass; they are
//! collected in [`Graph::buffer_updates`] so the caller can decide when (and
//! whether) to fold them into the store. That keeps repeated forward passes
//! side-effect free, which the finite-difference tests rely on.

pub mod kernels;

use std::collections::HashMap;

use ndarray::{Array1, Array4};

use crate::elem::{c, Elem};
use crate::error::{Error, Result};
use crate::util::DeterministicRng;

use kernels::BnCache;

/// Handle to one named tensor in a [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(usize);

struct ParamEntry<T: Elem> {
    name: String,
    value: Array4<T>,
    trainable: bool,
}

/// Flat collection of named parameters and persistent buffers.
///
/// Every tensor is stored as `Array4` so checkpoints can treat the store
/// uniformly; per-channel vectors use shape `(1, C, 1, 1)`. Registration
/// order is stable and defines the order of optimizer updates and
/// checkpoint serialization.
pub struct ParamStore<T: Elem> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

/// Parameter ids of a convolution layer. Convolutions that feed a
/// batch-norm layer are registered without a bias; it would be cancelled by
/// the mean subtraction and its gradient would vanish.
#[derive(Clone, Copy, Debug)]
pub struct ConvIds {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

/// Parameter and buffer ids of a batch-norm layer.
#[derive(Clone, Copy, Debug)]
pub struct BnIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl<T: Elem> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: Array4<T>, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.entries.len());
        self.index.insert(name.to_string(), id.0);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable,
        });
        Ok(id)
    }

    /// Register a conv weight with He-normal init (`std = sqrt(2 / fan_in)`,
    /// `fan_in = cin * k * k`) and, when requested, a zero bias.
    pub fn register_conv(
        &mut self,
        prefix: &str,
        cout: usize,
        cin: usize,
        k: usize,
        bias: bool,
        rng: &mut DeterministicRng,
    ) -> Result<ConvIds> {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let n = cout * cin * k * k;
        let data: Vec<T> = (0..n).map(|_| c::<T>(rng.normal() * std)).collect();
        let w = Array4::from_shape_vec((cout, cin, k, k), data).expect("conv weight shape");
        let w = self.register(&format!("{prefix}.weight"), w, true)?;
        let b = if bias {
            Some(self.register(
                &format!("{prefix}.bias"),
                Array4::zeros((1, cout, 1, 1)),
                true,
            )?)
        } else {
            None
        };
        Ok(ConvIds { w, b })
    }

    /// Register batch-norm affine params (gamma 1, beta 0) and running
    /// statistics (mean 0, var 1) for `cdim` channels.
    pub fn register_bn(&mut self, prefix: &str, cdim: usize) -> Result<BnIds> {
        let gamma = self.register(&format!("{prefix}.gamma"), Array4::ones((1, cdim, 1, 1)), true)?;
        let beta = self.register(&format!("{prefix}.beta"), Array4::zeros((1, cdim, 1, 1)), true)?;
        let mean = self.register(
            &format!("{prefix}.running_mean"),
            Array4::zeros((1, cdim, 1, 1)),
            false,
        )?;
        let var = self.register(
            &format!("{prefix}.running_var"),
            Array4::ones((1, cdim, 1, 1)),
            false,
        )?;
        Ok(BnIds {
            gamma,
            beta,
            mean,
            var,
        })
    }

    pub fn get(&self, id: ParamId) -> &Array4<T> {
        &self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Array4<T>) {
        assert_eq!(
            self.entries[id.0].value.dim(),
            value.dim(),
            "parameter {} shape changed",
            self.entries[id.0].name
        );
        self.entries[id.0].value = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// All ids in registration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Trainable ids in registration order.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].trainable)
            .map(ParamId)
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Whether a graph runs with batch statistics (Train) or running
/// statistics (Eval) in its batch-norm nodes.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// Index of a node on the tape.
pub type Var = usize;

enum Op<T: Elem> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
        groups: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: BnCache<T>,
    },
    Relu {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Div {
        a: Var,
        b: Var,
    },
    AddScalar {
        x: Var,
    },
    MulScalar {
        x: Var,
        s: T,
    },
    ConcatC {
        parts: Vec<Var>,
    },
    SliceC {
        x: Var,
        start: usize,
    },
    MeanAll {
        x: Var,
    },
    MaxPool2 {
        x: Var,
        arg: Vec<u32>,
    },
    ChannelAffine {
        x: Var,
        scale: Array1<T>,
    },
}

/// Reverse-mode tape. See module docs.
pub struct Graph<'a, T: Elem> {
    store: &'a ParamStore<T>,
    mode: Mode,
    ops: Vec<Op<T>>,
    values: Vec<Array4<T>>,
    requires: Vec<bool>,
    grads: Vec<Option<Array4<T>>>,
    param_vars: HashMap<ParamId, Var>,
    /// Deferred running-statistic writes `(buffer id, new value)` recorded by
    /// train-mode batch-norm nodes, in execution order.
    pub buffer_updates: Vec<(ParamId, Array4<T>)>,
}

impl<'a, T: Elem> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode) -> Self {
        Self {
            store,
            mode,
            ops: Vec::new(),
            values: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
            param_vars: HashMap::new(),
            buffer_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    fn push(&mut self, op: Op<T>, value: Array4<T>, requires: bool) -> Var {
        self.ops.push(op);
        self.values.push(value);
        self.requires.push(requires);
        self.grads.push(None);
        self.values.len() - 1
    }

    /// Bring a stored parameter onto the tape. Repeated calls for the same
    /// id return the same node so gradients from every use accumulate.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let requires = self.store.trainable(id);
        let v = self.push(Op::Leaf, self.store.get(id).clone(), requires);
        self.param_vars.insert(id, v);
        v
    }

    /// A fixed tensor that never receives a gradient.
    pub fn constant(&mut self, value: Array4<T>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// An external tensor; set `requires` to collect its gradient.
    pub fn input(&mut self, value: Array4<T>, requires: bool) -> Var {
        self.push(Op::Leaf, value, requires)
    }

    pub fn value(&self, v: Var) -> &Array4<T> {
        &self.values[v]
    }

    /// Gradient of the last `backward` target w.r.t. node `v`.
    pub fn grad(&self, v: Var) -> Option<&Array4<T>> {
        self.grads[v].as_ref()
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.param_vars.get(&id).copied()
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let bias = b.map(|b| &self.values[b]);
        let y = kernels::conv2d_forward(&self.values[x], &self.values[w], bias, pad, groups)?;
        let requires = self.requires[x]
            || self.requires[w]
            || b.map(|b| self.requires[b]).unwrap_or(false);
        Ok(self.push(Op::Conv { x, w, b, pad, groups }, y, requires))
    }

    /// Apply a registered convolution (stride 1, no grouping).
    pub fn apply_conv(&mut self, ids: ConvIds, x: Var, pad: usize) -> Result<Var> {
        let w = self.param(ids.w);
        let b = ids.b.map(|b| self.param(b));
        self.conv2d(x, w, b, pad, 1)
    }

    /// BN-normalize `x` using the layer's parameters. In train mode the
    /// refreshed running statistics are appended to `buffer_updates`.
    pub fn batch_norm(&mut self, x: Var, bn: &BnIds, eps: f64, momentum: f64) -> Result<Var> {
        let gamma = self.param(bn.gamma);
        let beta = self.param(bn.beta);
        let to_vec = |a: &Array4<T>| Array1::from_iter(a.iter().copied());
        let rm = to_vec(self.store.get(bn.mean));
        let rv = to_vec(self.store.get(bn.var));
        let training = self.mode == Mode::Train;
        let fwd = kernels::batch_norm_forward(
            &self.values[x],
            &self.values[gamma],
            &self.values[beta],
            &rm,
            &rv,
            c::<T>(eps),
            c::<T>(momentum),
            training,
        )?;
        if let Some((nm, nv)) = fwd.new_running {
            let cdim = nm.len();
            let wrap = |a: Array1<T>| {
                Array4::from_shape_vec((1, cdim, 1, 1), a.to_vec()).expect("running stat shape")
            };
            self.buffer_updates.push((bn.mean, wrap(nm)));
            self.buffer_updates.push((bn.var, wrap(nv)));
        }
        let requires = self.requires[x] || self.requires[gamma] || self.requires[beta];
        Ok(self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache: fwd.cache,
            },
            fwd.y,
            requires,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.values[x].mapv(|v| v.max(T::zero()));
        let requires = self.requires[x];
        self.push(Op::Relu { x }, y, requires)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.values[x].mapv(|v| v.tanh());
        let requires = self.requires[x];
        self.push(Op::Tanh { x }, y, requires)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.values[a].dim() != self.values[b].dim() {
            return Err(Error::Shape(format!(
                "{name} operands differ: {:?} vs {:?}",
                self.values[a].dim(),
                self.values[b].dim()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add")?;
        let y = &self.values[a] + &self.values[b];
        let requires = self.requires[a] || self.requires[b];
        Ok(self.push(Op::Add { a, b }, y, requires))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub")?;
        let y = &self.values[a] - &self.values[b];
        let requires = self.requires[a] || self.requires[b];
        Ok(self.push(Op::Sub { a, b }, y, requires))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul")?;
        let y = &self.values[a] * &self.values[b];
        let requires = self.requires[a] || self.requires[b];
        Ok(self.push(Op::Mul { a, b }, y, requires))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div")?;
        let y = &self.values[a] / &self.values[b];
        let requires = self.requires[a] || self.requires[b];
        Ok(self.push(Op::Div { a, b }, y, requires))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let sv = c::<T>(s);
        let y = self.values[x].mapv(|v| v + sv);
        let requires = self.requires[x];
        self.push(Op::AddScalar { x }, y, requires)
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Var {
        let sv = c::<T>(s);
        let y = self.values[x].mapv(|v| v * sv);
        let requires = self.requires[x];
        self.push(Op::MulScalar { x, s: sv }, y, requires)
    }

    /// Concatenate along the channel axis.
    pub fn concat_c(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let (n, _, h, w) = self.values[parts[0]].dim();
        let mut cdim = 0;
        for &p in parts {
            let d = self.values[p].dim();
            if (d.0, d.2, d.3) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "concat parts disagree outside channel axis: {:?} vs {:?}",
                    self.values[parts[0]].dim(),
                    d
                )));
            }
            cdim += d.1;
        }
        let mut y = Array4::<T>::zeros((n, cdim, h, w));
        let mut at = 0;
        for &p in parts {
            let pc = self.values[p].dim().1;
            y.slice_mut(ndarray::s![.., at..at + pc, .., ..])
                .assign(&self.values[p]);
            at += pc;
        }
        let requires = parts.iter().any(|&p| self.requires[p]);
        Ok(self.push(
            Op::ConcatC {
                parts: parts.to_vec(),
            },
            y,
            requires,
        ))
    }

    /// Take channels `start .. start + len`.
    pub fn slice_c(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (_, cdim, _, _) = self.values[x].dim();
        if start + len > cdim || len == 0 {
            return Err(Error::Shape(format!(
                "channel slice {start}..{} out of range for {cdim} channels",
                start + len
            )));
        }
        let y = self.values[x]
            .slice(ndarray::s![.., start..start + len, .., ..])
            .to_owned();
        let requires = self.requires[x];
        Ok(self.push(Op::SliceC { x, start }, y, requires))
    }

    /// Mean over every element, as a `(1,1,1,1)` tensor.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let count = c::<T>(self.values[x].len() as f64);
        let sum: T = self.values[x].iter().copied().sum();
        let y = Array4::from_elem((1, 1, 1, 1), sum / count);
        let requires = self.requires[x];
        self.push(Op::MeanAll { x }, y, requires)
    }

    pub fn maxpool2(&mut self, x: Var) -> Var {
        let (y, arg) = kernels::maxpool2_forward(&self.values[x]);
        let requires = self.requires[x];
        self.push(Op::MaxPool2 { x, arg }, y, requires)
    }

    /// Per-channel `y = x * scale + shift` with fixed coefficients.
    pub fn channel_affine(&mut self, x: Var, scale: Array1<T>, shift: Array1<T>) -> Result<Var> {
        let (_, cdim, _, _) = self.values[x].dim();
        if scale.len() != cdim || shift.len() != cdim {
            return Err(Error::Shape(format!(
                "channel affine expects {cdim} coefficients"
            )));
        }
        let mut y = self.values[x].clone();
        for ch in 0..cdim {
            let (s, t) = (scale[ch], shift[ch]);
            y.slice_mut(ndarray::s![.., ch, .., ..])
                .mapv_inplace(|v| v * s + t);
        }
        let requires = self.requires[x];
        Ok(self.push(Op::ChannelAffine { x, scale }, y, requires))
    }

    /// Scalar value of a `(1,1,1,1)` node.
    pub fn scalar(&self, v: Var) -> T {
        assert_eq!(self.values[v].len(), 1, "node is not a scalar");
        self.values[v][[0, 0, 0, 0]]
    }

    fn accumulate(grads: &mut [Option<Array4<T>>], requires: &[bool], v: Var, delta: Array4<T>) {
        if !requires[v] {
            return;
        }
        match &mut grads[v] {
            Some(g) => *g = &*g + &delta,
            slot => *slot = Some(delta),
        }
    }

    /// Reverse sweep from scalar node `out`, filling per-node gradients.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.values[out].len() != 1 {
            return Err(Error::Shape(
                "backward target must be a scalar node".into(),
            ));
        }
        if !self.requires[out] {
            return Err(Error::Config(
                "backward target does not depend on any gradient-tracked node".into(),
            ));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[out] = Some(Array4::ones((1, 1, 1, 1)));

        for i in (0..self.ops.len()).rev() {
            let g = match &self.grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            let req = &self.requires;
            match &self.ops[i] {
                Op::Leaf => {}
                Op::Conv { x, w, b, pad, groups } => {
                    let need_b = b.map(|b| req[b]).unwrap_or(false);
                    let grads_out = kernels::conv2d_backward(
                        &self.values[*x],
                        &self.values[*w],
                        &g,
                        *pad,
                        *groups,
                        req[*x],
                        req[*w],
                        need_b,
                    );
                    let (x, w, b) = (*x, *w, *b);
                    if let Some(gx) = grads_out.gx {
                        Self::accumulate(&mut self.grads, &self.requires, x, gx);
                    }
                    if let Some(gw) = grads_out.gw {
                        Self::accumulate(&mut self.grads, &self.requires, w, gw);
                    }
                    if let (Some(gb), Some(b)) = (grads_out.gb, b) {
                        Self::accumulate(&mut self.grads, &self.requires, b, gb);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let grads_out = kernels::batch_norm_backward(
                        cache,
                        &self.values[*gamma],
                        &g,
                        req[*x],
                        req[*gamma] || req[*beta],
                    );
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    if let Some(gx) = grads_out.gx {
                        Self::accumulate(&mut self.grads, &self.requires, x, gx);
                    }
                    if let Some(gg) = grads_out.ggamma {
                        Self::accumulate(&mut self.grads, &self.requires, gamma, gg);
                    }
                    if let Some(gb) = grads_out.gbeta {
                        Self::accumulate(&mut self.grads, &self.requires, beta, gb);
                    }
                }
                Op::Relu { x } => {
                    let mask = self.values[*x].mapv(|v| if v > T::zero() { T::one() } else { T::zero() });
                    let x = *x;
                    Self::accumulate(&mut self.grads, &self.requires, x, &g * &mask);
                }
                Op::Tanh { x } => {
                    let y = &self.values[i];
                    let dx = y.mapv(|t| T::one() - t * t);
                    let x = *x;
                    Self::accumulate(&mut self.grads, &self.requires, x, &g * &dx);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    Self::accumulate(&mut self.grads, &self.requires, a, g.clone());
                    Self::accumulate(&mut self.grads, &self.requires, b, g);
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    Self::accumulate(&mut self.grads, &self.requires, a, g.clone());
                    Self::accumulate(&mut self.grads, &self.requires, b, g.mapv(|v| -v));
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let ga = &g * &self.values[b];
                    let gb = &g * &self.values[a];
                    Self::accumulate(&mut self.grads, &self.requires, a, ga);
                    Self::accumulate(&mut self.grads, &self.requires, b, gb);
                }
                Op::Div { a, b } => {
                    let (a, b) = (*a, *b);
                    let ga = &g / &self.values[b];
                    let gb = {
                        let mut t = &g * &self.values[i];
                        t = &t / &self.values[b];
                        t.mapv(|v| -v)
                    };
                    Self::accumulate(&mut self.grads, &self.requires, a, ga);
                    Self::accumulate(&mut self.grads, &self.requires, b, gb);
                }
                Op::AddScalar { x } => {
                    let x = *x;
                    Self::accumulate(&mut self.grads, &self.requires, x, g);
                }
                Op::MulScalar { x, s } => {
                    let (x, s) = (*x, *s);
                    Self::accumulate(&mut self.grads, &self.requires, x, g.mapv(|v| v * s));
                }
                Op::ConcatC { parts } => {
                    let parts = parts.clone();
                    let mut at = 0;
                    for p in parts {
                        let pc = self.values[p].dim().1;
                        let gp = g.slice(ndarray::s![.., at..at + pc, .., ..]).to_owned();
                        at += pc;
                        Self::accumulate(&mut self.grads, &self.requires, p, gp);
                    }
                }
                Op::SliceC { x, start } => {
                    let (x, start) = (*x, *start);
                    let len = g.dim().1;
                    let mut gx = Array4::<T>::zeros(self.values[x].dim());
                    gx.slice_mut(ndarray::s![.., start..start + len, .., ..])
                        .assign(&g);
                    Self::accumulate(&mut self.grads, &self.requires, x, gx);
                }
                Op::MeanAll { x } => {
                    let x = *x;
                    let scale = g[[0, 0, 0, 0]] / c::<T>(self.values[x].len() as f64);
                    let gx = Array4::from_elem(self.values[x].dim(), scale);
                    Self::accumulate(&mut self.grads, &self.requires, x, gx);
                }
                Op::MaxPool2 { x, arg } => {
                    let x_dim = self.values[*x].dim();
                    let gx = kernels::maxpool2_backward(x_dim, arg, &g);
                    let x = *x;
                    Self::accumulate(&mut self.grads, &self.requires, x, gx);
                }
                Op::ChannelAffine { x, scale } => {
                    let mut gx = g.clone();
                    for ch in 0..scale.len() {
                        let s = scale[ch];
                        gx.slice_mut(ndarray::s![.., ch, .., ..])
                            .mapv_inplace(|v| v * s);
                    }
                    let x = *x;
                    Self::accumulate(&mut self.grads, &self.requires, x, gx);
                }
            }
        }
        Ok(())
    }

    /// Gradients of trainable parameters that appear on the tape, in store
    /// registration order. Parameters used in the graph but untouched by the
    /// backward target get zero gradients.
    pub fn param_grads(&self) -> Vec<(ParamId, Array4<T>)> {
        let mut out = Vec::new();
        for id in self.store.trainable_ids() {
            if let Some(&v) = self.param_vars.get(&id) {
                let g = match &self.grads[v] {
                    Some(g) => g.clone(),
                    None => Array4::zeros(self.values[v].dim()),
                };
                out.push((id, g));
            }
        }
        out
    }
}
