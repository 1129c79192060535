//! Feed-forward networks, parameter initialization, optimizers, and
//! bit-exact checkpoints.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, UniregError};
use crate::rng::Rng;
use crate::tape::{matmul_acc, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HiddenActivation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    None,
    Sigmoid,
    Tanh,
}

/// Architecture of a fully-connected network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    /// Input dim first, output dim last; at least two entries.
    pub layer_widths: Vec<usize>,
    pub hidden_activation: HiddenActivation,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(
        layer_widths: Vec<usize>,
        hidden_activation: HiddenActivation,
        output_activation: OutputActivation,
    ) -> Result<MlpSpec> {
        if layer_widths.len() < 2 {
            return Err(UniregError::Config(format!(
                "an MLP needs at least 2 layer widths, got {layer_widths:?}"
            )));
        }
        if layer_widths.iter().any(|&w| w == 0) {
            return Err(UniregError::Config(format!("zero layer width in {layer_widths:?}")));
        }
        Ok(MlpSpec { layer_widths, hidden_activation, output_activation })
    }

    /// The discriminator architecture: `[d_z, 100, 100, 1]`, relu hidden
    /// layers, sigmoid output strictly inside (0, 1).
    pub fn discriminator(d_z: usize) -> MlpSpec {
        MlpSpec {
            layer_widths: vec![d_z, 100, 100, 1],
            hidden_activation: HiddenActivation::Relu,
            output_activation: OutputActivation::Sigmoid,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().expect("validated non-empty")
    }

    pub fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }
}

/// Insertion-ordered collection of named trainable tensors.
#[derive(Default, Clone)]
pub struct ParameterStore {
    entries: Vec<(String, Tensor)>,
}

impl ParameterStore {
    pub fn new() -> ParameterStore {
        ParameterStore::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(UniregError::Contract(format!("duplicate parameter name '{name}'")));
        }
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| UniregError::Contract(format!("unknown parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }

    /// Bit-level copy of all parameter values, in store order.
    pub fn snapshot(&self) -> Vec<Vec<u64>> {
        self.entries
            .iter()
            .map(|(_, t)| t.with_values(|v| v.iter().map(|x| x.to_bits()).collect()))
            .collect()
    }

    /// True when current values equal `snapshot` bit for bit.
    pub fn matches_snapshot(&self, snapshot: &[Vec<u64>]) -> bool {
        self.entries.len() == snapshot.len()
            && self.entries.iter().zip(snapshot).all(|((_, t), snap)| {
                t.with_values(|v| {
                    v.len() == snap.len() && v.iter().zip(snap).all(|(x, s)| x.to_bits() == *s)
                })
            })
    }
}

/// Fan-scaled normal initialization: weight scale is `sqrt(2 / fan_in)` for
/// layers followed by relu and `sqrt(1 / fan_in)` otherwise; biases are zero.
/// Parameters are named `layer{i}.weight` / `layer{i}.bias`.
pub fn init_parameters(spec: &MlpSpec, seed: u64) -> ParameterStore {
    let mut store = ParameterStore::new();
    let mut rng = Rng::from_seed(seed);
    init_into(&mut store, "", spec, &mut rng).expect("fresh store has no name collisions");
    store
}

/// Initialize one MLP's parameters into a shared store under a name prefix.
pub fn init_into(store: &mut ParameterStore, prefix: &str, spec: &MlpSpec, rng: &mut Rng) -> Result<()> {
    for i in 0..spec.n_layers() {
        let fan_in = spec.layer_widths[i];
        let fan_out = spec.layer_widths[i + 1];
        let followed_by_relu =
            i + 1 < spec.n_layers() && spec.hidden_activation == HiddenActivation::Relu;
        let scale = if followed_by_relu {
            (2.0 / fan_in as f64).sqrt()
        } else {
            (1.0 / fan_in as f64).sqrt()
        };
        let weights: Vec<f64> = (0..fan_in * fan_out).map(|_| scale * rng.normal()).collect();
        store.insert(
            &format!("{prefix}layer{i}.weight"),
            Tensor::param(vec![fan_in, fan_out], weights)?,
        )?;
        store.insert(
            &format!("{prefix}layer{i}.bias"),
            Tensor::param(vec![fan_out], vec![0.0; fan_out])?,
        )?;
    }
    Ok(())
}

/// Whether an MLP's parameters enter a tape as trainable leaves or as
/// constants that block gradient flow into them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Trainable,
    Frozen,
}

/// A network bound to a name prefix inside a [`ParameterStore`].
#[derive(Debug, Clone)]
pub struct Mlp {
    pub spec: MlpSpec,
    prefix: String,
}

impl Mlp {
    /// Initialize fresh parameters for `spec` under `prefix` and return the handle.
    pub fn init(store: &mut ParameterStore, prefix: &str, spec: MlpSpec, rng: &mut Rng) -> Result<Mlp> {
        init_into(store, prefix, &spec, rng)?;
        Ok(Mlp { spec, prefix: prefix.to_string() })
    }

    /// Handle to parameters that already exist in a store (e.g. loaded from
    /// a checkpoint created by [`init_parameters`], whose prefix is empty).
    pub fn over(spec: MlpSpec, prefix: &str) -> Mlp {
        Mlp { spec, prefix: prefix.to_string() }
    }

    fn apply_hidden(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self.spec.hidden_activation {
            HiddenActivation::Relu => tape.relu(x),
            HiddenActivation::Tanh => tape.tanh(x),
        }
    }

    fn apply_output(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self.spec.output_activation {
            OutputActivation::None => Ok(x),
            OutputActivation::Sigmoid => tape.sigmoid(x),
            OutputActivation::Tanh => tape.tanh(x),
        }
    }

    /// Recorded forward pass over a `[batch x input_dim]` node.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var, role: ParamRole) -> Result<Var> {
        let got = tape.shape(x).to_vec();
        if got.len() != 2 || got[1] != self.spec.input_dim() {
            return Err(UniregError::Dimension(format!(
                "batch shape {got:?} does not match input width {}",
                self.spec.input_dim()
            )));
        }
        let mut h = x;
        for i in 0..self.spec.n_layers() {
            let w = store.get(&format!("{}layer{i}.weight", self.prefix))?;
            let b = store.get(&format!("{}layer{i}.bias", self.prefix))?;
            let (wv, bv) = match role {
                ParamRole::Trainable => (tape.leaf(w), tape.leaf(b)),
                ParamRole::Frozen => (tape.constant_from(w), tape.constant_from(b)),
            };
            h = tape.matmul(h, wv)?;
            h = tape.add_bias(h, bv)?;
            h = if i + 1 < self.spec.n_layers() {
                self.apply_hidden(tape, h)?
            } else {
                self.apply_output(tape, h)?
            };
        }
        Ok(h)
    }

    /// Tape-free forward pass for evaluation, chunked over rows; produces
    /// bit-identical values to the recorded forward pass.
    pub fn infer(&self, store: &ParameterStore, inputs: &[f64], n_rows: usize) -> Result<Vec<f64>> {
        let d_in = self.spec.input_dim();
        if inputs.len() != n_rows * d_in {
            return Err(UniregError::Dimension(format!(
                "{} values is not {n_rows} rows of width {d_in}",
                inputs.len()
            )));
        }
        let mut layers = Vec::with_capacity(self.spec.n_layers());
        for i in 0..self.spec.n_layers() {
            let w = store.get(&format!("{}layer{i}.weight", self.prefix))?;
            let b = store.get(&format!("{}layer{i}.bias", self.prefix))?;
            layers.push((w.values(), b.values()));
        }
        let mut out = Vec::with_capacity(n_rows * self.spec.output_dim());
        const CHUNK: usize = 4096;
        for start in (0..n_rows).step_by(CHUNK) {
            let rows = CHUNK.min(n_rows - start);
            let mut h = inputs[start * d_in..(start + rows) * d_in].to_vec();
            let mut width = d_in;
            for (i, (w, b)) in layers.iter().enumerate() {
                let next = self.spec.layer_widths[i + 1];
                let mut z = vec![0.0; rows * next];
                matmul_acc(&h, w, rows, width, next, &mut z);
                for r in 0..rows {
                    for j in 0..next {
                        z[r * next + j] += b[j];
                    }
                }
                let last = i + 1 == layers.len();
                apply_activation(&mut z, if last { Act::Output(self.spec.output_activation) } else { Act::Hidden(self.spec.hidden_activation) });
                h = z;
                width = next;
            }
            out.extend_from_slice(&h);
        }
        Ok(out)
    }
}

enum Act {
    Hidden(HiddenActivation),
    Output(OutputActivation),
}

fn apply_activation(values: &mut [f64], act: Act) {
    match act {
        Act::Hidden(HiddenActivation::Relu) => {
            for v in values {
                if *v <= 0.0 {
                    *v = 0.0;
                }
            }
        }
        Act::Hidden(HiddenActivation::Tanh) | Act::Output(OutputActivation::Tanh) => {
            for v in values {
                *v = v.tanh();
            }
        }
        Act::Output(OutputActivation::Sigmoid) => {
            for v in values {
                *v = if *v >= 0.0 { 1.0 / (1.0 + (-*v).exp()) } else { let e = v.exp(); e / (1.0 + e) };
            }
        }
        Act::Output(OutputActivation::None) => {}
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> AdamHyper {
        AdamHyper { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam optimizer state aligned with one parameter store.
pub struct AdamState {
    pub hyper: AdamHyper,
    t: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(hyper: AdamHyper, store: &ParameterStore) -> AdamState {
        let moments = store
            .iter()
            .map(|(_, t)| (vec![0.0; t.len()], vec![0.0; t.len()]))
            .collect();
        AdamState { hyper, t: 0, moments }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

/// One Adam update with bias correction. Gradients are left untouched;
/// the caller resets them.
pub fn adam_step(state: &mut AdamState, store: &ParameterStore) -> Result<()> {
    if state.moments.len() != store.len() {
        return Err(UniregError::Contract(format!(
            "optimizer tracks {} parameters, store has {}",
            state.moments.len(),
            store.len()
        )));
    }
    state.t += 1;
    let AdamHyper { lr, beta1, beta2, eps } = state.hyper;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for ((name, param), (m, v)) in store.iter().zip(&mut state.moments) {
        param.with_values_and_grad(|values, grad| -> Result<()> {
            let grad = grad.ok_or_else(|| {
                UniregError::Contract(format!("parameter '{name}' has no gradient"))
            })?;
            for i in 0..values.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            Ok(())
        })?;
    }
    Ok(())
}

/// Plain gradient descent: `w -= lr * grad`.
pub fn sgd_step(store: &ParameterStore, lr: f64) -> Result<()> {
    for (name, param) in store.iter() {
        param.with_values_and_grad(|values, grad| -> Result<()> {
            let grad = grad.ok_or_else(|| {
                UniregError::Contract(format!("parameter '{name}' has no gradient"))
            })?;
            for i in 0..values.len() {
                values[i] -= lr * grad[i];
            }
            Ok(())
        })?;
    }
    Ok(())
}

/// Either optimizer behind one interface.
pub enum Optimizer {
    Adam(AdamState),
    Sgd { lr: f64 },
}

impl Optimizer {
    pub fn adam(lr: f64, store: &ParameterStore) -> Optimizer {
        Optimizer::Adam(AdamState::new(AdamHyper::with_lr(lr), store))
    }

    pub fn sgd(lr: f64) -> Optimizer {
        Optimizer::Sgd { lr }
    }

    pub fn step(&mut self, store: &ParameterStore) -> Result<()> {
        match self {
            Optimizer::Adam(state) => adam_step(state, store),
            Optimizer::Sgd { lr } => sgd_step(store, *lr),
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"URGCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Write a parameter store to a binary checkpoint.
///
/// Layout (all integers and floats little-endian): the 8-byte magic
/// `URGCKPT\0`, format version (u32), entry count (u32), then per entry:
/// name length (u32), UTF-8 name, rank (u32), dims (u64 each), values
/// (f64 each). Round trips are bit-exact.
pub fn save_checkpoint(store: &ParameterStore, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, tensor) in store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let shape = tensor.shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in &shape {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        tensor.with_values(|values| {
            for v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        });
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(UniregError::Format(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("length checked")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("length checked")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("length checked")))
    }
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<ParameterStore> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(UniregError::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(UniregError::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| UniregError::Format("non-UTF8 parameter name".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            values.push(r.f64()?);
        }
        store.insert(&name, Tensor::param(shape, values)?)?;
    }
    if r.pos != bytes.len() {
        return Err(UniregError::Format(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - r.pos
        )));
    }
    Ok(store)
}
