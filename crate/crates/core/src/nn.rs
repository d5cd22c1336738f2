//! Named parameters, forward contexts and the layer types built on them.
//!
//! A [`ParamStore`] owns every learnable tensor and every buffer (batch
//! normalization running statistics). A forward pass borrows the store
//! through a [`Ctx`], which binds each parameter onto the tape, carries the
//! train/eval mode and the dropout stream, and collects batch statistics
//! that are folded into the running buffers after the pass.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{rng_for, Rng};
use crate::tensor::gradcheck::{numeric_gradient, CheckSummary, STEP};
use crate::tensor::{BnStats, Gradients, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Param,
    Buffer,
}

impl ParamKind {
    pub fn tag(self) -> u8 {
        match self {
            ParamKind::Param => 0,
            ParamKind::Buffer => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ParamKind::Param),
            1 => Some(ParamKind::Buffer),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub name: String,
    pub kind: ParamKind,
    /// Whether L2 weight decay applies (conv and linear weights only).
    pub decay: bool,
    pub value: Tensor,
}

#[derive(Clone, Debug)]
pub struct ParamStore {
    seed: u64,
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore { seed, entries: Vec::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn push(&mut self, name: &str, kind: ParamKind, decay: bool, value: Tensor) -> ParamId {
        assert!(self.find(name).is_none(), "duplicate parameter name {name}");
        self.entries.push(Entry {
            name: name.to_string(),
            kind,
            decay,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Kaiming fan-in normal weight: std = sqrt(2 / fan_in), drawn from a
    /// stream keyed by the parameter name.
    pub fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        let mut rng = rng_for(self.seed, name);
        let value = Tensor::from_fn(shape.to_vec(), |_| std * rng.sample::<f64, _>(StandardNormal));
        self.push(name, ParamKind::Param, true, value)
    }

    pub fn bias(&mut self, name: &str, len: usize) -> ParamId {
        self.push(name, ParamKind::Param, false, Tensor::zeros([len]))
    }

    pub fn fixed(&mut self, name: &str, value: Tensor) -> ParamId {
        self.push(name, ParamKind::Param, false, value)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        self.push(name, ParamKind::Buffer, false, value)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &Entry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of learnable scalars.
    pub fn num_params(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Param)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Replaces a value after checking the shape against the live entry.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: model {:?}, file {:?}",
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    /// Folds batch statistics into running buffers:
    /// `running = m·running + (1 − m)·batch`.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            for (id, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
                let run = self.entries[id.0].value.data_mut();
                for (r, b) in run.iter_mut().zip(batch) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BnStats,
}

/// State for one forward pass.
pub struct Ctx<'t, 's> {
    pub tape: &'t Tape,
    store: &'s ParamStore,
    vars: Vec<Option<Var<'t>>>,
    train: bool,
    dropout: Rng,
    bn_updates: Vec<BnUpdate>,
}

impl<'t, 's> Ctx<'t, 's> {
    /// Binds every learnable parameter onto `tape`: tracked when the tape
    /// records, constant otherwise. `dropout_seed` fixes the dropout masks.
    pub fn new(tape: &'t Tape, store: &'s ParamStore, train: bool, dropout_seed: u64) -> Self {
        let vars = store
            .entries
            .iter()
            .map(|e| match e.kind {
                ParamKind::Param if tape.is_recording() => Some(tape.param(e.value.clone())),
                ParamKind::Param => Some(tape.constant(e.value.clone())),
                ParamKind::Buffer => None,
            })
            .collect();
        Ctx {
            tape,
            store,
            vars,
            train,
            dropout: rng_for(dropout_seed, "dropout"),
            bn_updates: Vec::new(),
        }
    }

    pub fn train(&self) -> bool {
        self.train
    }

    pub fn p(&self, id: ParamId) -> &Var<'t> {
        self.vars[id.0].as_ref().expect("learnable parameter")
    }

    pub fn buffer(&self, id: ParamId) -> &Tensor {
        self.store.get(id)
    }

    pub fn constant(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }

    pub fn dropout(&mut self, x: &Var<'t>, p: f64) -> Result<Var<'t>> {
        x.dropout(p, self.train, &mut self.dropout)
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    /// Gradient for every learnable parameter, zero where the loss does not
    /// depend on it. Indexed by [`ParamId`]; buffers map to `None`.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.vars
            .iter()
            .map(|v| v.as_ref().map(|v| grads.wrt_or_zero(v)))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let weight = store.weight(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], c_in * kernel * kernel);
        let bias = bias.then(|| store.bias(&format!("{name}.bias"), c_out));
        Conv2d {
            weight,
            bias,
            stride: (stride, stride),
            padding: (padding, padding),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let b = self.bias.map(|b| ctx.p(b));
        x.conv2d(ctx.p(self.weight), b, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.fixed(&format!("{name}.gamma"), Tensor::ones([channels])),
            beta: store.bias(&format!("{name}.beta"), channels),
            running_mean: store.buffer(&format!("{name}.running_mean"), Tensor::zeros([channels])),
            running_var: store.buffer(&format!("{name}.running_var"), Tensor::ones([channels])),
        }
    }

    /// Batch statistics in training mode (recorded for the running update),
    /// running statistics in evaluation mode.
    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let (gamma, beta) = (ctx.p(self.gamma), ctx.p(self.beta));
        if ctx.train {
            let (y, stats) = x.batchnorm(gamma, beta, BN_EPS, None)?;
            ctx.bn_updates.push(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                stats,
            });
            Ok(y)
        } else {
            let mean = ctx.store.get(self.running_mean).data();
            let var = ctx.store.get(self.running_var).data();
            Ok(x.batchnorm(gamma, beta, BN_EPS, Some((mean, var)))?.0)
        }
    }
}

/// Convolution followed by batch normalization and an optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub relu: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        relu: bool,
    ) -> Self {
        ConvBn {
            conv: Conv2d::new(store, &format!("{name}.conv"), c_in, c_out, kernel, stride, padding, false),
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_out),
            relu,
        }
    }

    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, &y)?;
        if self.relu {
            y.relu()
        } else {
            Ok(y)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: store.weight(&format!("{name}.weight"), &[d_out, d_in], d_in),
            bias: store.bias(&format!("{name}.bias"), d_out),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        x.linear(ctx.p(self.weight), Some(ctx.p(self.bias)))
    }
}

/// Compares tape gradients of a scalar loss with respect to the listed
/// parameters against central differences taken by perturbing the store.
/// `loss` builds the forward pass inside a fresh context each time, with the
/// same mode and dropout seed, so masks are identical across probes.
pub fn check_params<F>(store: &ParamStore, ids: &[ParamId], train: bool, seed: u64, loss: F) -> Result<CheckSummary>
where
    F: for<'t, 's> Fn(&mut Ctx<'t, 's>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let mut ctx = Ctx::new(&tape, store, train, seed);
    let out = loss(&mut ctx)?;
    let grads = tape.backward(&out)?;
    let analytic = ctx.param_grads(&grads);
    drop(ctx);

    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::no_grad();
        let mut ctx = Ctx::new(&tape, s, train, seed);
        Ok(loss(&mut ctx)?.item())
    };
    let mut probe = store.clone();
    let mut summary = CheckSummary::default();
    for &id in ids {
        let base = probe.get(id).clone();
        // A parameter the loss never reached has zero gradient.
        let a = analytic[id.0].clone().unwrap_or_else(|| Tensor::zeros(base.shape().to_vec()));
        let numeric = numeric_gradient(&base, STEP, |t| {
            *probe.get_mut(id) = t.clone();
            eval(&probe)
        })?;
        *probe.get_mut(id) = base;
        for (x, y) in a.data().iter().zip(numeric.data()) {
            summary.observe(*x, *y);
        }
    }
    Ok(summary)
}
