//! The value-iteration Q-network.
//!
//! ```text
//! obs (8x8xC) --reward 1x1--> R --vi (K iterations)--> V --+
//!     |                                                    concat --action_attention 3x3--> M (8x8x4)
//!     +------attention 1x1--> A ---------------------------+                               |
//!                             A  ------------------------------------- pointwise_mul(A, M)
//!                                                                                         |
//!                                                            q_values dense 256 -> 4  <---+
//! ```
//!
//! The two 1×1 layers are the only ones that see raw channels; everything
//! after them works on reward and attention maps and is shared across the
//! game family.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::gridworld::GRID;
use crate::nnet::gradcheck::{branch_signature, gradient_check, GradProbe, GradReport, FD_STEP};
use crate::nnet::{self, io, LayerParams, Shape, Tensor, ViTrace};
use crate::rng::{derive_seed, rng_from};

pub const NUM_ACTIONS: usize = 4;
pub const DEFAULT_VI_ITERATIONS: usize = 20;
const VI_FILTERS: usize = 2;
const ACTION_FEATURES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerId {
    Attention,
    Reward,
    Vi,
    ActionAttention,
    QValues,
}

impl LayerId {
    pub const ALL: [LayerId; 5] = [
        LayerId::Attention,
        LayerId::Reward,
        LayerId::Vi,
        LayerId::ActionAttention,
        LayerId::QValues,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerId::Attention => "attention",
            LayerId::Reward => "reward",
            LayerId::Vi => "vi",
            LayerId::ActionAttention => "action_attention",
            LayerId::QValues => "q_values",
        }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerId::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::UnknownLayer(s.to_string()))
    }
}

/// Per-layer parameter counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterReport {
    pub layers: Vec<(LayerId, usize)>,
    pub total: usize,
    pub trainable: usize,
}

impl ParameterReport {
    pub fn count(&self, id: LayerId) -> usize {
        self.layers.iter().find(|(l, _)| *l == id).map_or(0, |(_, n)| *n)
    }
}

impl fmt::Display for ParameterReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (id, n) in &self.layers {
            writeln!(f, "{:<17} {:>5}", id.name(), n)?;
        }
        writeln!(f, "{:<17} {:>5}", "total", self.total)?;
        write!(f, "{:<17} {:>5}", "trainable", self.trainable)
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    obs: Tensor,
    reward: Tensor,
    attention: Tensor,
    vi: ViTrace,
    value: Tensor,
    stacked: Tensor,
    features: Tensor,
    masked: Tensor,
    q: [f64; NUM_ACTIONS],
}

impl ForwardTrace {
    pub fn q(&self) -> [f64; NUM_ACTIONS] {
        self.q
    }

    pub fn reward_map(&self) -> &Tensor {
        &self.reward
    }

    pub fn attention_map(&self) -> &Tensor {
        &self.attention
    }

    pub fn value_map(&self) -> &Tensor {
        &self.value
    }

    /// Argmax choices of every value-iteration step, hashed.
    pub fn branch_signature(&self) -> u64 {
        let choices = (1..=self.vi.iterations()).flat_map(|k| self.vi.argmax_at(k).into_iter().map(usize::from));
        branch_signature(choices)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VinNetwork {
    channels: usize,
    iterations: usize,
    layers: Vec<LayerParams>,
}

impl VinNetwork {
    /// All-zero network; see [`VinNetwork::build`] for an initialized one.
    pub fn zeros(channels: usize, iterations: usize) -> Result<VinNetwork> {
        if !matches!(channels, 5 | 8) {
            return Err(Error::InvalidNetwork(format!("{channels} input channels (expected 5 or 8)")));
        }
        if iterations == 0 {
            return Err(Error::InvalidNetwork("value iteration needs at least one iteration".into()));
        }
        let plane = GRID * GRID;
        let layers = vec![
            LayerParams::zeros(LayerId::Attention.name(), &[channels, 1], None),
            LayerParams::zeros(LayerId::Reward.name(), &[channels, 1], None),
            LayerParams::zeros(LayerId::Vi.name(), &[3, 3, 2, VI_FILTERS], None),
            LayerParams::zeros(LayerId::ActionAttention.name(), &[3, 3, 2, ACTION_FEATURES], None),
            LayerParams::zeros(LayerId::QValues.name(), &[plane * ACTION_FEATURES, NUM_ACTIONS], Some(NUM_ACTIONS)),
        ];
        let net = VinNetwork {
            channels,
            iterations,
            layers,
        };
        net.validate()?;
        Ok(net)
    }

    /// Network for `channels` input channels and `iterations` value
    /// iterations, each layer drawn from its own stream of `seed`.
    pub fn build(channels: usize, iterations: usize, seed: u64) -> Result<VinNetwork> {
        let mut net = VinNetwork::zeros(channels, iterations)?;
        for id in LayerId::ALL {
            let mut rng = rng_from(derive_seed(seed, id.name()));
            net.layer_mut(id).initialize(&mut rng);
        }
        Ok(net)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn layer(&self, id: LayerId) -> &LayerParams {
        &self.layers[id.index()]
    }

    pub fn layer_mut(&mut self, id: LayerId) -> &mut LayerParams {
        &mut self.layers[id.index()]
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    /// Checks the parameter-count constraints of the architecture.
    pub fn validate(&self) -> Result<()> {
        let report = self.parameter_report();
        let n = |id| report.count(id);
        let c = self.channels;
        let fail = |msg: String| Err(Error::InvalidNetwork(msg));
        if n(LayerId::Attention) != c || n(LayerId::Reward) != c {
            return fail(format!("attention/reward must have {c} parameters each"));
        }
        if n(LayerId::QValues) <= 1000 || 100 * n(LayerId::QValues) <= 85 * report.total {
            return fail("q_values must exceed 1000 parameters and 85% of the total".into());
        }
        if !(1050..=1250).contains(&report.total) {
            return fail(format!("total of {} parameters outside 1050..=1250", report.total));
        }
        if n(LayerId::ActionAttention) <= n(LayerId::Attention).max(n(LayerId::Reward)) {
            return fail("action_attention must be larger than attention and reward".into());
        }
        Ok(())
    }

    pub fn parameter_report(&self) -> ParameterReport {
        let layers: Vec<(LayerId, usize)> = LayerId::ALL
            .into_iter()
            .map(|id| (id, self.layer(id).parameter_count()))
            .collect();
        ParameterReport {
            total: layers.iter().map(|(_, n)| n).sum(),
            trainable: LayerId::ALL
                .into_iter()
                .filter(|&id| !self.layer(id).is_frozen())
                .map(|id| self.layer(id).parameter_count())
                .sum(),
            layers,
        }
    }

    pub fn set_frozen(&mut self, ids: &[LayerId], frozen: bool) {
        for &id in ids {
            self.layer_mut(id).set_frozen(frozen);
        }
    }

    /// Freezes every layer not in `trainable` and unfreezes the rest.
    pub fn freeze_all_except(&mut self, trainable: &[LayerId]) {
        for id in LayerId::ALL {
            self.layer_mut(id).set_frozen(!trainable.contains(&id));
        }
    }

    pub fn frozen_layers(&self) -> Vec<LayerId> {
        LayerId::ALL
            .into_iter()
            .filter(|&id| self.layer(id).is_frozen())
            .collect()
    }

    /// Redraws one layer from the uniform initializer. Callers holding an
    /// optimizer should also reset that layer's moments.
    pub fn reinitialize_layer(&mut self, id: LayerId, rng: &mut impl Rng) {
        self.layer_mut(id).initialize(rng);
    }

    /// Copies all parameter values from `other` (freeze flags are kept).
    pub fn copy_values_from(&mut self, other: &VinNetwork) {
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            dst.copy_values_from(src);
        }
    }

    pub fn zero_grad(&mut self) {
        self.layers.iter_mut().for_each(LayerParams::zero_grad);
    }

    fn check_obs(&self, obs: &Tensor) -> Result<()> {
        let want = Shape::new(GRID, GRID, self.channels);
        if obs.shape() != want {
            return Err(Error::shape("forward_q", want, obs.shape()));
        }
        Ok(())
    }

    pub fn forward(&self, obs: &Tensor) -> Result<ForwardTrace> {
        self.check_obs(obs)?;
        let reward = nnet::conv1x1(obs, self.layer(LayerId::Reward))?;
        let attention = nnet::conv1x1(obs, self.layer(LayerId::Attention))?;
        let vi = nnet::vi_module(&reward, self.layer(LayerId::Vi), self.iterations)?;
        let value = vi.value();
        let stacked = value.concat_channels(&attention)?;
        let features = nnet::conv2d(&stacked, self.layer(LayerId::ActionAttention))?;
        let masked = nnet::pointwise_mul(&attention, &features)?;
        let q = nnet::dense(&masked, self.layer(LayerId::QValues))?;
        Ok(ForwardTrace {
            obs: obs.clone(),
            reward,
            attention,
            vi,
            value,
            stacked,
            features,
            masked,
            q: q.try_into().expect("four actions"),
        })
    }

    pub fn forward_q(&self, obs: &Tensor) -> Result<[f64; NUM_ACTIONS]> {
        Ok(self.forward(obs)?.q)
    }

    /// Accumulates parameter gradients of `sum_a q_grad[a] * q[a]`.
    ///
    /// Stops as soon as no earlier layer is trainable.
    pub fn backward(&mut self, trace: &mut ForwardTrace, q_grad: &[f64; NUM_ACTIONS]) -> Result<()> {
        let [att, rew, vi, aa, qv] = &mut self.layers[..] else {
            unreachable!("five layers")
        };
        let any_trainable = |layers: &[&LayerParams]| layers.iter().any(|l| !l.is_frozen());
        if !any_trainable(&[att, rew, vi, aa, qv]) {
            return Ok(());
        }
        nnet::dense_backward(&mut trace.masked, qv, q_grad)?;
        if !any_trainable(&[att, rew, vi, aa]) {
            return Ok(());
        }
        nnet::pointwise_mul_backward(&mut trace.attention, &mut trace.features, &trace.masked);
        nnet::conv2d_backward(&mut trace.stacked, aa, &trace.features)?;
        if !any_trainable(&[att, rew, vi]) {
            return Ok(());
        }
        trace.stacked.split_grad_into(&mut trace.value, &mut trace.attention);
        if !att.is_frozen() {
            nnet::conv1x1_backward(&mut trace.obs, att, &trace.attention)?;
        }
        if any_trainable(&[rew, vi]) {
            nnet::vi_module_backward(&mut trace.reward, vi, &trace.vi, trace.value.grad())?;
            if !rew.is_frozen() {
                nnet::conv1x1_backward(&mut trace.obs, rew, &trace.reward)?;
            }
        }
        Ok(())
    }

    /// Finite-difference check of the full network on `obs` with loss
    /// `sum_a projection[a] * q[a]`.
    pub fn gradient_check(&self, obs: &Tensor, projection: [f64; NUM_ACTIONS]) -> Result<GradReport> {
        self.check_obs(obs)?;
        let mut probe = NetworkProbe {
            net: self.clone(),
            obs: obs.clone(),
            projection,
        };
        Ok(gradient_check(&mut probe, FD_STEP))
    }

    /// Text form: a `vinnet channels <C> iterations <K>` header followed by
    /// the layers in network order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "vinnet channels {} iterations {}", self.channels, self.iterations).unwrap();
        io::write_layers(&mut out, &self.layers);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<VinNetwork> {
        std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?.parse()
    }
}

impl FromStr for VinNetwork {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "empty parameter file"))?;
        let (channels, iterations) = match header.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["vinnet", "channels", c, "iterations", k] => (
                c.parse().map_err(|_| Error::parse(1, "bad channel count"))?,
                k.parse().map_err(|_| Error::parse(1, "bad iteration count"))?,
            ),
            _ => return Err(Error::parse(1, "expected `vinnet channels <C> iterations <K>`")),
        };
        let mut net = VinNetwork::zeros(channels, iterations)?;
        let layers = io::read_layers(&mut lines)?;
        if layers.len() != LayerId::ALL.len() {
            return Err(Error::InvalidNetwork(format!("expected 5 layers, found {}", layers.len())));
        }
        for (id, layer) in LayerId::ALL.into_iter().zip(layers) {
            let slot = net.layer_mut(id);
            if layer.name() != id.name() || layer.shape() != slot.shape() || layer.bias().map(<[f64]>::len) != slot.bias().map(<[f64]>::len) {
                return Err(Error::InvalidNetwork(format!("layer `{}` does not match `{}`", layer, slot)));
            }
            *slot = layer;
        }
        net.validate()?;
        Ok(net)
    }
}

struct NetworkProbe {
    net: VinNetwork,
    obs: Tensor,
    projection: [f64; NUM_ACTIONS],
}

impl NetworkProbe {
    fn locate(&self, mut i: usize) -> (usize, usize) {
        for (l, layer) in self.net.layers.iter().enumerate() {
            if i < layer.parameter_count() {
                return (l, i);
            }
            i -= layer.parameter_count();
        }
        panic!("parameter index out of range")
    }
}

impl GradProbe for NetworkProbe {
    fn num_params(&self) -> usize {
        self.net.parameter_report().total
    }

    fn param(&self, i: usize) -> f64 {
        let (l, j) = self.locate(i);
        self.net.layers[l].param(j)
    }

    fn set_param(&mut self, i: usize, value: f64) {
        let (l, j) = self.locate(i);
        *self.net.layers[l].param_mut(j) = value;
    }

    fn is_trainable(&self, i: usize) -> bool {
        !self.net.layers[self.locate(i).0].is_frozen()
    }

    fn evaluate(&mut self) -> (f64, u64) {
        let trace = self.net.forward(&self.obs).expect("checked shape");
        let loss = trace.q.iter().zip(&self.projection).map(|(q, p)| q * p).sum();
        (loss, trace.branch_signature())
    }

    fn analytic_gradient(&mut self) -> Vec<f64> {
        self.net.zero_grad();
        let mut trace = self.net.forward(&self.obs).expect("checked shape");
        self.net.backward(&mut trace, &self.projection).expect("consistent shapes");
        self.net
            .layers
            .iter()
            .flat_map(|l| (0..l.parameter_count()).map(move |i| l.grad(i)))
            .collect()
    }
}
