//! Actor and critic function approximators: plain multilayer perceptrons
//! with tanh activations. The critic head is the identity; the actor head
//! squashes through tanh and scales each channel by its action amplitude,
//! so actor outputs can never leave the actuator range.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tape::{Bindings, GroupId, NodeId, Tape};

/// Output mapping applied after the last affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    /// Raw affine output (critics).
    Identity,
    /// `amplitude * tanh(x)` per channel (actors).
    TanhScaled,
}

/// Architecture description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub head: OutputHead,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize, head: OutputHead) -> Self {
        assert!(input_dim >= 1 && output_dim >= 1);
        assert!(hidden.iter().all(|&h| h >= 1));
        Self { input_dim, hidden, output_dim, head }
    }

    /// (rows, cols) of each affine layer in order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend_from_slice(&self.hidden);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(r, c)| r * c + r).sum()
    }
}

/// Per-channel action scaling for the tanh head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionAmplitude {
    /// Maximum acceleration magnitude [m/s^2].
    pub accel: f64,
    /// Maximum steering magnitude [rad]; equals the vehicle steering limit.
    pub steer: f64,
}

impl ActionAmplitude {
    pub fn new(accel: f64, steer: f64) -> Self {
        assert!(accel > 0.0 && steer > 0.0, "amplitudes must be positive");
        Self { accel, steer }
    }

    /// Channel scales in action order: `[steer]` for one channel,
    /// `[accel, steer]` for two.
    pub fn channels(&self, action_dim: usize) -> Vec<f64> {
        match action_dim {
            1 => vec![self.steer],
            2 => vec![self.accel, self.steer],
            other => panic!("unsupported action dimension {other}"),
        }
    }
}

/// One affine layer's parameters, row-major weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// All parameters of one network, flat-indexable for gradient updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub layers: Vec<Layer>,
}

impl ParamSet {
    /// Deterministic initialization: weights uniform in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn init(spec: &MlpSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(rows, cols)| {
                let bound = 1.0 / (cols as f64).sqrt();
                let weights = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
                Layer { weights, biases: vec![0.0; rows] }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(spec: &MlpSpec) -> Self {
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(rows, cols)| Layer { weights: vec![0.0; rows * cols], biases: vec![0.0; rows] })
            .collect();
        Self { layers }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn unflatten_into(&mut self, flat: &[f64]) {
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        assert_eq!(at, flat.len());
    }

    /// In-place gradient-descent update from per-layer gradients.
    pub fn descend(&mut self, grads: &[(Vec<f64>, Vec<f64>)], learning_rate: f64) {
        assert_eq!(grads.len(), self.layers.len());
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(grads) {
            for (w, g) in layer.weights.iter_mut().zip(gw) {
                *w -= learning_rate * g;
            }
            for (b, g) in layer.biases.iter_mut().zip(gb) {
                *b -= learning_rate * g;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }
}

/// Forward pass without any head applied.
fn mlp_raw(spec: &MlpSpec, params: &ParamSet, input: &[f64]) -> Vec<f64> {
    assert_eq!(input.len(), spec.input_dim, "input dimension mismatch");
    let shapes = spec.layer_shapes();
    let mut activ = input.to_vec();
    for (li, ((rows, cols), layer)) in shapes.iter().zip(&params.layers).enumerate() {
        let mut out = vec![0.0; *rows];
        for r in 0..*rows {
            let row = &layer.weights[r * cols..(r + 1) * cols];
            out[r] = layer.biases[r] + row.iter().zip(&activ).map(|(w, x)| w * x).sum::<f64>();
        }
        if li + 1 < shapes.len() {
            for v in &mut out {
                *v = v.tanh();
            }
        }
        activ = out;
    }
    activ
}

/// Critic value: scalar output, identity head.
pub fn critic_eval(spec: &MlpSpec, params: &ParamSet, input: &[f64]) -> f64 {
    debug_assert_eq!(spec.output_dim, 1);
    mlp_raw(spec, params, input)[0]
}

/// Actor action: tanh output scaled per channel by the amplitudes.
pub fn actor_eval(
    spec: &MlpSpec,
    params: &ParamSet,
    input: &[f64],
    amplitude: &[f64],
) -> Vec<f64> {
    let raw = mlp_raw(spec, params, input);
    match spec.head {
        OutputHead::Identity => raw,
        OutputHead::TanhScaled => {
            assert_eq!(amplitude.len(), spec.output_dim);
            raw.iter().zip(amplitude).map(|(x, a)| a * x.tanh()).collect()
        }
    }
}

/// The tape-side twin of a network: leaf groups per layer plus a recorded
/// forward pass. One `TapeNet` can be applied to several inputs on the same
/// tape (weight sharing through shared groups).
#[derive(Debug, Clone)]
pub struct TapeNet {
    spec: MlpSpec,
    groups: Vec<(GroupId, GroupId)>,
}

impl TapeNet {
    /// Declares parameter groups named `{prefix}.w{k}` / `{prefix}.b{k}`.
    pub fn register(tape: &mut Tape, spec: &MlpSpec, prefix: &str) -> Self {
        let groups = spec
            .layer_shapes()
            .iter()
            .enumerate()
            .map(|(k, (rows, cols))| {
                let (gw, _) = tape.param(format!("{prefix}.w{k}"), rows * cols);
                let (gb, _) = tape.param(format!("{prefix}.b{k}"), *rows);
                (gw, gb)
            })
            .collect();
        Self { spec: spec.clone(), groups }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn group_ids(&self) -> &[(GroupId, GroupId)] {
        &self.groups
    }

    /// Records a forward pass from `input` (a vector node of the spec's
    /// input dimension). `amplitude` is required for the tanh-scaled head.
    pub fn forward_nodes(
        &self,
        tape: &mut Tape,
        input: NodeId,
        amplitude: Option<&[f64]>,
    ) -> NodeId {
        let shapes = self.spec.layer_shapes();
        let mut activ = input;
        for (k, ((rows, cols), (gw, gb))) in shapes.iter().zip(&self.groups).enumerate() {
            let w = tape.leaf(*gw);
            let b = tape.leaf(*gb);
            let wx = tape.matvec(w, activ, *rows, *cols);
            activ = tape.add(wx, b);
            if k + 1 < shapes.len() {
                activ = tape.tanh(activ);
            }
        }
        match self.spec.head {
            OutputHead::Identity => activ,
            OutputHead::TanhScaled => {
                let amp = amplitude.expect("tanh-scaled head needs amplitudes");
                assert_eq!(amp.len(), self.spec.output_dim);
                let squashed = tape.tanh(activ);
                let scales = tape.constant(amp.to_vec());
                tape.mul(scales, squashed)
            }
        }
    }

    /// Binds a parameter snapshot to this net's groups.
    pub fn bind(&self, bindings: &mut Bindings, params: &ParamSet) {
        assert_eq!(params.layers.len(), self.groups.len());
        for ((gw, gb), layer) in self.groups.iter().zip(&params.layers) {
            bindings.set(*gw, layer.weights.clone());
            bindings.set(*gb, layer.biases.clone());
        }
    }

    /// Collects per-layer gradients from a backward sweep.
    pub fn gradients(&self, grads: &crate::tape::Gradients) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.groups
            .iter()
            .map(|(gw, gb)| (grads.group(*gw).to_vec(), grads.group(*gb).to_vec()))
            .collect()
    }
}
