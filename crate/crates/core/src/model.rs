//! Fully connected pose regressor.
//!
//! The network maps an observation vector through `tanh` (or ReLU) hidden
//! layers to a linear 7-D head: three position outputs followed by four raw
//! quaternion outputs. The quaternion is normalised to unit length on the
//! way out; that normalisation is differentiated by the losses, so
//! [`Regressor::backward`] takes gradients with respect to the raw head.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Vector3, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geom::Quaternion;
use crate::loss::PosePrediction;

/// Width of the pose head: 3 position + 4 quaternion values.
pub const HEAD_DIM: usize = 7;

/// Below this norm the raw quaternion cannot be normalised reliably.
pub const MIN_QUATERNION_NORM: f64 = 1e-9;

const CHECKPOINT_MAGIC: &str = "posereg-regressor v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            _ => Err(Error::Config(format!("unknown activation {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegressorConfig {
    pub input_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl RegressorConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_layers: vec![64, 64],
            activation: Activation::Tanh,
            seed: 0,
        }
    }

    pub fn with_hidden(mut self, hidden: &[usize]) -> Self {
        self.hidden_layers = hidden.to_vec();
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be at least 1".into()));
        }
        if self.hidden_layers.is_empty() {
            return Err(Error::Config("at least one hidden layer is required".into()));
        }
        if self.hidden_layers.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Layer widths from input to head.
    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_layers.len() + 2);
        w.push(self.input_dim);
        w.extend(&self.hidden_layers);
        w.push(HEAD_DIM);
        w
    }

    pub fn parameter_count(&self) -> usize {
        self.widths().windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }
}

/// Location of one dense layer inside the flat parameter vector. Weights
/// are stored row-major (`outputs x inputs`) followed by the biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layer {
    inputs: usize,
    outputs: usize,
    offset: usize,
}

impl Layer {
    fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.inputs * self.outputs]
    }

    fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        let start = self.offset + self.inputs * self.outputs;
        &params[start..start + self.outputs]
    }

    fn len(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Regressor {
    config: RegressorConfig,
    layers: Vec<Layer>,
    params: Vec<f64>,
}

/// Intermediate values recorded by [`Regressor::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    /// Input of every layer: the observation, then each hidden activation.
    layer_inputs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub prediction: PosePrediction,
    pub quaternion_unit: Quaternion,
    pub tape: Tape,
}

impl Regressor {
    /// Seeded initialisation: weights ~ N(0, 1/fan_in), biases zero.
    pub fn new(config: RegressorConfig) -> Result<Self> {
        config.validate()?;
        let layers = Self::layout(&config);
        let mut params = vec![0.0; config.parameter_count()];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for layer in &layers {
            let scale = 1.0 / (layer.inputs as f64).sqrt();
            for w in &mut params[layer.offset..layer.offset + layer.inputs * layer.outputs] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *w = z * scale;
            }
        }
        Ok(Self {
            config,
            layers,
            params,
        })
    }

    fn layout(config: &RegressorConfig) -> Vec<Layer> {
        let mut offset = 0;
        config
            .widths()
            .windows(2)
            .map(|p| {
                let layer = Layer {
                    inputs: p[0],
                    outputs: p[1],
                    offset,
                };
                offset += layer.len();
                layer
            })
            .collect()
    }

    pub fn config(&self) -> &RegressorConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn head(&self) -> &Layer {
        self.layers.last().expect("at least one layer")
    }

    /// Overwrites the head biases (position first, then raw quaternion).
    pub fn set_head_bias(&mut self, position: &Vector3<f64>, quaternion: &Vector4<f64>) {
        let head = *self.head();
        let start = head.offset + head.inputs * head.outputs;
        let bias = &mut self.params[start..start + HEAD_DIM];
        bias[..3].copy_from_slice(position.as_slice());
        bias[3..].copy_from_slice(quaternion.as_slice());
    }

    /// Zeroes the head weights so the output equals the head bias.
    pub fn zero_head_weights(&mut self) {
        let head = *self.head();
        self.params[head.offset..head.offset + head.inputs * head.outputs].fill(0.0);
    }

    pub fn forward(&self, observation: &[f64]) -> Result<Forward> {
        if observation.len() != self.config.input_dim {
            return Err(Error::Contract(format!(
                "observation has {} entries, model expects {}",
                observation.len(),
                self.config.input_dim
            )));
        }
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut current = observation.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = layer.weights(&self.params);
            let b = layer.bias(&self.params);
            let mut out: Vec<f64> = b.to_vec();
            for (o, row) in out.iter_mut().zip(w.chunks_exact(layer.inputs)) {
                *o += row.iter().zip(&current).map(|(a, x)| a * x).sum::<f64>();
            }
            if i < last {
                for v in &mut out {
                    *v = self.config.activation.apply(*v);
                }
            }
            layer_inputs.push(std::mem::replace(&mut current, out));
        }
        let position = Vector3::new(current[0], current[1], current[2]);
        let quaternion_raw = Vector4::new(current[3], current[4], current[5], current[6]);
        let norm = quaternion_raw.norm();
        if !(norm >= MIN_QUATERNION_NORM) {
            return Err(Error::DegenerateHead { norm });
        }
        let quaternion_unit = Quaternion::from_vector(&(quaternion_raw / norm));
        Ok(Forward {
            prediction: PosePrediction::new(position, quaternion_raw),
            quaternion_unit,
            tape: Tape { layer_inputs },
        })
    }

    fn check_tape(&self, tape: &Tape) -> Result<()> {
        let matches = tape.layer_inputs.len() == self.layers.len()
            && tape
                .layer_inputs
                .iter()
                .zip(&self.layers)
                .all(|(x, l)| x.len() == l.inputs);
        if matches {
            Ok(())
        } else {
            Err(Error::Contract("tape was not produced by this model".into()))
        }
    }

    /// Parameter gradients for upstream gradients on the raw head output.
    pub fn backward(
        &self,
        tape: &Tape,
        grad_position: &Vector3<f64>,
        grad_quaternion_raw: &Vector4<f64>,
    ) -> Result<Vec<f64>> {
        let mut grads = vec![0.0; self.params.len()];
        self.backward_into(tape, grad_position, grad_quaternion_raw, &mut grads)?;
        Ok(grads)
    }

    /// Like [`backward`](Self::backward) but adds into `grads`.
    pub fn backward_into(
        &self,
        tape: &Tape,
        grad_position: &Vector3<f64>,
        grad_quaternion_raw: &Vector4<f64>,
        grads: &mut [f64],
    ) -> Result<()> {
        self.check_tape(tape)?;
        if grads.len() != self.params.len() {
            return Err(Error::Contract("gradient buffer has the wrong length".into()));
        }
        let mut delta: Vec<f64> = grad_position
            .iter()
            .chain(grad_quaternion_raw.iter())
            .copied()
            .collect();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &tape.layer_inputs[i];
            let w = layer.weights(&self.params);
            let (gw, gb) = grads[layer.offset..layer.offset + layer.len()]
                .split_at_mut(layer.inputs * layer.outputs);
            for ((row, d), b) in gw.chunks_exact_mut(layer.inputs).zip(&delta).zip(gb.iter_mut()) {
                *b += d;
                for (g, x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            if i == 0 {
                break;
            }
            let mut upstream = vec![0.0; layer.inputs];
            for (row, d) in w.chunks_exact(layer.inputs).zip(&delta) {
                for (u, a) in upstream.iter_mut().zip(row) {
                    *u += a * d;
                }
            }
            for (u, a) in upstream.iter_mut().zip(input) {
                *u *= self.config.activation.derivative_from_output(*a);
            }
            delta = upstream;
        }
        Ok(())
    }

    /// Serialises config and parameters. Reals use Rust's shortest
    /// round-trip formatting, so [`from_checkpoint`](Self::from_checkpoint)
    /// restores the parameters bit for bit.
    pub fn to_checkpoint(&self) -> String {
        let c = &self.config;
        let hidden: Vec<String> = c.hidden_layers.iter().map(|h| h.to_string()).collect();
        let mut out = format!(
            "{CHECKPOINT_MAGIC}\ninput_dim {}\nhidden {}\nactivation {}\nseed {}\nparameters {}\n",
            c.input_dim,
            hidden.join(" "),
            c.activation,
            c.seed,
            self.params.len()
        );
        for p in &self.params {
            out.push_str(&format!("{p:?}\n"));
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| Error::Parse {
                line: 0,
                message: format!("checkpoint truncated before {what}"),
            })
        };
        let (n, magic) = next("header")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Parse {
                line: n,
                message: format!("expected {CHECKPOINT_MAGIC:?}"),
            });
        }
        let field = |(n, line): (usize, &str), key: &str| -> Result<String> {
            line.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix(' '))
                .map(str::to_owned)
                .ok_or_else(|| Error::Parse {
                    line: n,
                    message: format!("expected `{key} ...`"),
                })
        };
        let parse_err = |n: usize, what: &str| Error::Parse {
            line: n,
            message: format!("invalid {what}"),
        };

        let l = next("input_dim")?;
        let input_dim = field(l, "input_dim")?.parse().map_err(|_| parse_err(l.0, "input_dim"))?;
        let l = next("hidden")?;
        let hidden = field(l, "hidden")?
            .split_whitespace()
            .map(|h| h.parse().map_err(|_| parse_err(l.0, "hidden width")))
            .collect::<Result<Vec<usize>>>()?;
        let l = next("activation")?;
        let activation = field(l, "activation")?.parse()?;
        let l = next("seed")?;
        let seed = field(l, "seed")?.parse().map_err(|_| parse_err(l.0, "seed"))?;
        let l = next("parameters")?;
        let count: usize = field(l, "parameters")?
            .parse()
            .map_err(|_| parse_err(l.0, "parameter count"))?;

        let config = RegressorConfig {
            input_dim,
            hidden_layers: hidden,
            activation,
            seed,
        };
        config.validate()?;
        if config.parameter_count() != count {
            return Err(Error::Data {
                line: l.0,
                message: format!(
                    "checkpoint lists {count} parameters, architecture needs {}",
                    config.parameter_count()
                ),
            });
        }
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let (n, line) = next("parameter")?;
            let v: f64 = line.trim().parse().map_err(|_| parse_err(n, "parameter"))?;
            if !v.is_finite() {
                return Err(Error::Data {
                    line: n,
                    message: "parameter is not finite".into(),
                });
            }
            params.push(v);
        }
        let layers = Self::layout(&config);
        Ok(Self {
            config,
            layers,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&text)
    }
}
