//! Parameterized layers: ConvLSTM cell, residual units, the flow-feature
//! extractor, the external-factor encoder, and Xavier initialization.
//!
//! Parameter structs are generic over their leaf type `T`: they hold
//! [`Tensor`]s at rest and [`NodeId`]s once bound to a tape. `map` and
//! `visit` traverse fields in one fixed order per struct, which is what
//! keeps checkpoints, optimizer state and gradient extraction aligned.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Channel count of every convolutional feature map (flow features, ConvLSTM
/// hidden state, residual units).
pub const FEATURE_CHANNELS: usize = 16;
/// Channels of a raw flow map: inflow and outflow.
pub const FLOW_CHANNELS: usize = 2;
/// Channels of an embedded timestep: flow features plus external features.
pub const EMBED_CHANNELS: usize = 2 * FEATURE_CHANNELS;
/// Width of the first external-encoder layer.
pub const EXT_HIDDEN: usize = 256;

/// Deterministic stream of derived seeds (splitmix64).
pub struct SeedStream {
    state: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream { state: seed }
    }

    pub fn next_seed(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

/// Uniform draw from `[-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]`.
pub fn xavier_init(
    shape: impl Into<Vec<usize>>,
    fan_in: usize,
    fan_out: usize,
    seed: u64,
) -> Tensor {
    assert!(fan_in > 0 && fan_out > 0, "xavier_init needs positive fans");
    let shape = shape.into();
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("generated buffer matches shape")
}

// ── convolution and linear parameter blocks ─────────────────────────

#[derive(Clone, Debug)]
pub struct Conv2dParams<T> {
    pub kernel: T,
    pub bias: T,
}

impl Conv2dParams<Tensor> {
    pub fn init(c_out: usize, c_in: usize, kh: usize, kw: usize, seeds: &mut SeedStream) -> Self {
        Conv2dParams {
            kernel: xavier_init(
                vec![c_out, c_in, kh, kw],
                c_in * kh * kw,
                c_out * kh * kw,
                seeds.next_seed(),
            ),
            bias: Tensor::zeros(vec![c_out]),
        }
    }
}

impl<T> Conv2dParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Conv2dParams<U> {
        Conv2dParams {
            kernel: f(&self.kernel),
            bias: f(&self.bias),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.kernel"), &self.kernel);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
        f(&mut self.kernel);
        f(&mut self.bias);
    }
}

impl Conv2dParams<NodeId> {
    pub fn apply(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        tape.conv2d(x, self.kernel, Some(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LinearParams<T> {
    pub weight: T,
    pub bias: T,
}

impl LinearParams<Tensor> {
    pub fn init(out_dim: usize, in_dim: usize, seeds: &mut SeedStream) -> Self {
        LinearParams {
            weight: xavier_init(vec![out_dim, in_dim], in_dim, out_dim, seeds.next_seed()),
            bias: Tensor::zeros(vec![out_dim]),
        }
    }
}

impl<T> LinearParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LinearParams<U> {
        LinearParams {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

impl LinearParams<NodeId> {
    pub fn apply(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        tape.linear(x, self.weight, self.bias)
    }
}

// ── ConvLSTM ────────────────────────────────────────────────────────

const GATE_NAMES: [&str; 4] = ["i", "f", "o", "g"];

/// Four-gate ConvLSTM parameters, all kernels 3x3, no peepholes.
#[derive(Clone, Debug)]
pub struct ConvLstmParams<T> {
    /// Input-to-gate kernels, order `i, f, o, g`.
    pub w_x: [T; 4],
    /// Hidden-to-gate kernels, same order.
    pub w_h: [T; 4],
    /// Per-gate biases, same order.
    pub b: [T; 4],
}

impl ConvLstmParams<Tensor> {
    pub fn init(c_hidden: usize, c_in: usize, seeds: &mut SeedStream) -> Self {
        let mut conv = |co: usize, ci: usize, seeds: &mut SeedStream| {
            xavier_init(vec![co, ci, 3, 3], ci * 9, co * 9, seeds.next_seed())
        };
        ConvLstmParams {
            w_x: std::array::from_fn(|_| conv(c_hidden, c_in, seeds)),
            w_h: std::array::from_fn(|_| conv(c_hidden, c_hidden, seeds)),
            b: std::array::from_fn(|_| Tensor::zeros(vec![c_hidden])),
        }
    }
}

impl<T> ConvLstmParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ConvLstmParams<U> {
        ConvLstmParams {
            w_x: std::array::from_fn(|k| f(&self.w_x[k])),
            w_h: std::array::from_fn(|k| f(&self.w_h[k])),
            b: std::array::from_fn(|k| f(&self.b[k])),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        for (k, name) in GATE_NAMES.iter().enumerate() {
            f(format!("{prefix}.w_x{name}"), &self.w_x[k]);
        }
        for (k, name) in GATE_NAMES.iter().enumerate() {
            f(format!("{prefix}.w_h{name}"), &self.w_h[k]);
        }
        for (k, name) in GATE_NAMES.iter().enumerate() {
            f(format!("{prefix}.b_{name}"), &self.b[k]);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
        for t in &mut self.w_x {
            f(t);
        }
        for t in &mut self.w_h {
            f(t);
        }
        for t in &mut self.b {
            f(t);
        }
    }
}

/// Hidden and cell state of one ConvLSTM, both `c_hidden x h x w`.
#[derive(Clone, Copy, Debug)]
pub struct ConvLstmState {
    pub h: NodeId,
    pub c: NodeId,
}

impl ConvLstmState {
    /// All-zero initial state.
    pub fn zeros(tape: &mut Tape, c_hidden: usize, h: usize, w: usize) -> Self {
        let z = Tensor::zeros(vec![c_hidden, h, w]);
        ConvLstmState {
            h: tape.leaf(&z),
            c: tape.leaf(&z),
        }
    }
}

/// One ConvLSTM step:
/// `i = sig(conv(x, Wxi) + conv(H, Whi) + bi)`, `f`, `o` analogous,
/// `g = tanh(conv(x, Wxg) + conv(H, Whg) + bg)`,
/// `C' = f.C + i.g`, `H' = o.tanh(C')`.
pub fn convlstm_step(
    tape: &mut Tape,
    state: &ConvLstmState,
    x: NodeId,
    params: &ConvLstmParams<NodeId>,
) -> Result<ConvLstmState> {
    let mut pre = [None; 4];
    for k in 0..4 {
        let from_x = tape.conv2d(x, params.w_x[k], Some(params.b[k]))?;
        let from_h = tape.conv2d(state.h, params.w_h[k], None)?;
        pre[k] = Some(tape.add(from_x, from_h)?);
    }
    let gate_i = tape.sigmoid(pre[0].unwrap());
    let gate_f = tape.sigmoid(pre[1].unwrap());
    let gate_o = tape.sigmoid(pre[2].unwrap());
    let gate_g = tape.tanh(pre[3].unwrap());

    let keep = tape.mul(gate_f, state.c)?;
    let write = tape.mul(gate_i, gate_g)?;
    let c = tape.add(keep, write)?;
    let c_act = tape.tanh(c);
    let h = tape.mul(gate_o, c_act)?;
    Ok(ConvLstmState { h, c })
}

// ── residual flow-feature extractor ─────────────────────────────────

/// One residual unit: two 16-channel 3x3 convolutions.
#[derive(Clone, Debug)]
pub struct ResidualUnitParams<T> {
    pub conv1: Conv2dParams<T>,
    pub conv2: Conv2dParams<T>,
}

impl ResidualUnitParams<Tensor> {
    pub fn init(seeds: &mut SeedStream) -> Self {
        ResidualUnitParams {
            conv1: Conv2dParams::init(FEATURE_CHANNELS, FEATURE_CHANNELS, 3, 3, seeds),
            conv2: Conv2dParams::init(FEATURE_CHANNELS, FEATURE_CHANNELS, 3, 3, seeds),
        }
    }
}

impl<T> ResidualUnitParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ResidualUnitParams<U> {
        ResidualUnitParams {
            conv1: self.conv1.map(f),
            conv2: self.conv2.map(f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
    }
}

/// `y = relu(x + conv2(relu(conv1(x))))`.
pub fn residual_unit(
    tape: &mut Tape,
    x: NodeId,
    params: &ResidualUnitParams<NodeId>,
) -> Result<NodeId> {
    match *tape.shape(x) {
        [c, _, _] if c == FEATURE_CHANNELS => {}
        ref s => {
            return Err(Error::ShapeMismatch(format!(
                "residual_unit: expected {FEATURE_CHANNELS} channels, got {s:?}"
            )))
        }
    }
    let a = params.conv1.apply(tape, x)?;
    let a = tape.relu(a);
    let b = params.conv2.apply(tape, a)?;
    let sum = tape.add(x, b)?;
    Ok(tape.relu(sum))
}

/// Projection from the 2-channel flow map into feature space, followed by a
/// stack of residual units.
#[derive(Clone, Debug)]
pub struct FlowExtractorParams<T> {
    pub proj: Conv2dParams<T>,
    pub units: Vec<ResidualUnitParams<T>>,
}

impl FlowExtractorParams<Tensor> {
    pub fn init(residual_units: usize, seeds: &mut SeedStream) -> Self {
        FlowExtractorParams {
            proj: Conv2dParams::init(FEATURE_CHANNELS, FLOW_CHANNELS, 3, 3, seeds),
            units: (0..residual_units)
                .map(|_| ResidualUnitParams::init(seeds))
                .collect(),
        }
    }
}

impl<T> FlowExtractorParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> FlowExtractorParams<U> {
        FlowExtractorParams {
            proj: self.proj.map(f),
            units: self.units.iter().map(|u| u.map(f)).collect(),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        self.proj.visit(&format!("{prefix}.proj"), f);
        for (i, u) in self.units.iter().enumerate() {
            u.visit(&format!("{prefix}.unit{i}"), f);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
        self.proj.visit_mut(f);
        for u in &mut self.units {
            u.visit_mut(f);
        }
    }
}

/// Extracts `F(M)`: `16 x h x w` features from a normalized flow map.
pub fn flow_feature_extractor(
    tape: &mut Tape,
    m_norm: NodeId,
    params: &FlowExtractorParams<NodeId>,
) -> Result<NodeId> {
    match *tape.shape(m_norm) {
        [FLOW_CHANNELS, _, _] => {}
        ref s => {
            return Err(Error::ShapeMismatch(format!(
                "flow_feature_extractor: expected {FLOW_CHANNELS} x h x w, got {s:?}"
            )))
        }
    }
    let mut feat = params.proj.apply(tape, m_norm)?;
    for unit in &params.units {
        feat = residual_unit(tape, feat, unit)?;
    }
    Ok(feat)
}

// ── external-factor encoder ─────────────────────────────────────────

/// Two fully-connected layers lifting the external vector to `16 x h x w`.
#[derive(Clone, Debug)]
pub struct ExternalEncoderParams<T> {
    pub fc1: LinearParams<T>,
    pub fc2: LinearParams<T>,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl ExternalEncoderParams<Tensor> {
    pub fn init(ext_len: usize, grid_h: usize, grid_w: usize, seeds: &mut SeedStream) -> Self {
        ExternalEncoderParams {
            fc1: LinearParams::init(EXT_HIDDEN, ext_len, seeds),
            fc2: LinearParams::init(FEATURE_CHANNELS * grid_h * grid_w, EXT_HIDDEN, seeds),
            grid_h,
            grid_w,
        }
    }
}

impl<T> ExternalEncoderParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ExternalEncoderParams<U> {
        ExternalEncoderParams {
            fc1: self.fc1.map(f),
            fc2: self.fc2.map(f),
            grid_h: self.grid_h,
            grid_w: self.grid_w,
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        self.fc1.visit(&format!("{prefix}.fc1"), f);
        self.fc2.visit(&format!("{prefix}.fc2"), f);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

/// Encodes `F(E)`: the external vector through fc-relu-fc, reshaped to
/// `16 x h x w`.
pub fn external_factor_encoder(
    tape: &mut Tape,
    e: NodeId,
    params: &ExternalEncoderParams<NodeId>,
) -> Result<NodeId> {
    let hidden = params.fc1.apply(tape, e)?;
    let hidden = tape.relu(hidden);
    let flat = params.fc2.apply(tape, hidden)?;
    tape.reshape(flat, vec![FEATURE_CHANNELS, params.grid_h, params.grid_w])
}
