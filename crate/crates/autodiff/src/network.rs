//! Feed-forward networks built from `Linear`, `BatchNorm`, `ReLU` and `Sigmoid`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::AutodiffError;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const BATCH_NORM_EPS: f64 = 1e-5;
/// Weight kept on the old running statistic at each train-mode update.
pub const BATCH_NORM_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Linear { inputs: usize, outputs: usize },
    BatchNorm { dim: usize },
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Layer sequence plus the seed its parameters are drawn from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<Layer>,
    pub seed: u64,
}

impl NetworkSpec {
    pub fn new(layers: Vec<Layer>, seed: u64) -> Result<Self, AutodiffError> {
        let spec = Self { layers, seed };
        spec.validate()?;
        Ok(spec)
    }

    /// `Linear -> BatchNorm -> ReLU` per hidden width, then `Linear -> Sigmoid`.
    pub fn generator(inputs: usize, hidden: &[usize], outputs: usize, seed: u64) -> Self {
        let mut layers = hidden_stack(inputs, hidden);
        layers.push(Layer::Linear {
            inputs: hidden.last().copied().unwrap_or(inputs),
            outputs,
        });
        layers.push(Layer::Sigmoid);
        Self { layers, seed }
    }

    /// `Linear -> BatchNorm -> ReLU` per hidden width, then a scalar `Linear` head.
    pub fn discriminator(inputs: usize, hidden: &[usize], seed: u64) -> Self {
        let mut layers = hidden_stack(inputs, hidden);
        layers.push(Layer::Linear {
            inputs: hidden.last().copied().unwrap_or(inputs),
            outputs: 1,
        });
        Self { layers, seed }
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            Layer::Linear { inputs, .. } => Some(*inputs),
            Layer::BatchNorm { dim } => Some(*dim),
            _ => None,
        })
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l {
            Layer::Linear { outputs, .. } => Some(*outputs),
            Layer::BatchNorm { dim } => Some(*dim),
            _ => None,
        })
    }

    pub fn ends_with_sigmoid(&self) -> bool {
        matches!(self.layers.last(), Some(Layer::Sigmoid))
    }

    pub fn ends_with_linear(&self) -> bool {
        matches!(self.layers.last(), Some(Layer::Linear { .. }))
    }

    pub fn validate(&self) -> Result<(), AutodiffError> {
        if self.layers.is_empty() {
            return Err(AutodiffError::InvalidNetwork("no layers".into()));
        }
        let mut width: Option<usize> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Linear { inputs, outputs } => {
                    if inputs == 0 || outputs == 0 {
                        return Err(AutodiffError::InvalidNetwork(format!(
                            "layer {i}: linear dimensions must be positive"
                        )));
                    }
                    check_width(i, width, inputs)?;
                    width = Some(outputs);
                }
                Layer::BatchNorm { dim } => {
                    if dim == 0 {
                        return Err(AutodiffError::InvalidNetwork(format!(
                            "layer {i}: batch norm dimension must be positive"
                        )));
                    }
                    check_width(i, width, dim)?;
                    width = Some(dim);
                }
                Layer::Relu | Layer::Sigmoid => {}
            }
        }
        if width.is_none() {
            return Err(AutodiffError::InvalidNetwork(
                "network has no parameterized layer".into(),
            ));
        }
        Ok(())
    }
}

fn hidden_stack(inputs: usize, hidden: &[usize]) -> Vec<Layer> {
    let mut layers = Vec::new();
    let mut width = inputs;
    for &h in hidden {
        layers.push(Layer::Linear {
            inputs: width,
            outputs: h,
        });
        layers.push(Layer::BatchNorm { dim: h });
        layers.push(Layer::Relu);
        width = h;
    }
    layers
}

fn check_width(layer: usize, have: Option<usize>, want: usize) -> Result<(), AutodiffError> {
    match have {
        Some(w) if w != want => Err(AutodiffError::InvalidNetwork(format!(
            "layer {layer} expects width {want} but receives {w}"
        ))),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunningStats {
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// Parameter handles for one network on one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps handles that already hold this network's parameters, in order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients for every parameter, zero-filled where a parameter was unused.
    pub fn grads(&self, net: &Network, grads: &crate::graph::Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(&net.params)
            .map(|(v, p)| grads.get_or_zeros(*v, p))
            .collect()
    }
}

/// Parameters and batch-norm running statistics for a [`NetworkSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetworkState", into = "NetworkState")]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<Tensor>,
    /// Index of the first parameter of each layer.
    offsets: Vec<usize>,
    stats: Vec<Option<RunningStats>>,
}

/// Serialized form; offsets are rebuilt and shapes checked on load.
#[derive(Clone, Serialize, Deserialize)]
struct NetworkState {
    spec: NetworkSpec,
    params: Vec<Tensor>,
    stats: Vec<Option<RunningStats>>,
}

impl From<Network> for NetworkState {
    fn from(net: Network) -> Self {
        Self {
            spec: net.spec,
            params: net.params,
            stats: net.stats,
        }
    }
}

impl TryFrom<NetworkState> for Network {
    type Error = AutodiffError;

    fn try_from(state: NetworkState) -> Result<Self, Self::Error> {
        let mut net = Network::new(state.spec)?;
        if state.params.len() != net.params.len()
            || state.params.iter().zip(&net.params).any(|(a, b)| !a.same_shape(b))
        {
            return Err(AutodiffError::InvalidNetwork(
                "stored parameters do not match the layer list".into(),
            ));
        }
        let stats_match = state.stats.len() == net.stats.len()
            && state.stats.iter().zip(&net.stats).all(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => a.mean.len() == b.mean.len() && a.var.len() == b.var.len(),
                (None, None) => true,
                _ => false,
            });
        if !stats_match {
            return Err(AutodiffError::InvalidNetwork(
                "stored running statistics do not match the layer list".into(),
            ));
        }
        net.params = state.params;
        net.stats = state.stats;
        Ok(net)
    }
}

impl Network {
    /// Glorot-uniform weights, zero biases, unit batch-norm scale.
    pub fn new(spec: NetworkSpec) -> Result<Self, AutodiffError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut params = Vec::new();
        let mut offsets = Vec::with_capacity(spec.layers.len());
        let mut stats = Vec::with_capacity(spec.layers.len());
        for layer in &spec.layers {
            offsets.push(params.len());
            match *layer {
                Layer::Linear { inputs, outputs } => {
                    let bound = (6.0 / (inputs + outputs) as f64).sqrt();
                    let w = (0..inputs * outputs)
                        .map(|_| rng.gen_range(-bound..=bound))
                        .collect();
                    params.push(Tensor::from_parts(inputs, outputs, w));
                    params.push(Tensor::zeros(1, outputs));
                    stats.push(None);
                }
                Layer::BatchNorm { dim } => {
                    params.push(Tensor::full(1, dim, 1.0));
                    params.push(Tensor::zeros(1, dim));
                    stats.push(Some(RunningStats {
                        mean: vec![0.0; dim],
                        var: vec![1.0; dim],
                    }));
                }
                Layer::Relu | Layer::Sigmoid => stats.push(None),
            }
        }
        Ok(Self {
            spec,
            params,
            offsets,
            stats,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim().expect("validated spec")
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim().expect("validated spec")
    }

    /// Registers every parameter as a tracked variable on `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| g.variable(p.clone())).collect(),
        }
    }

    /// Registers parameters as constants; no gradient flows into them.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| g.constant(p.clone())).collect(),
        }
    }

    /// Records the forward pass. Train mode uses batch statistics and updates
    /// the running averages; eval mode only reads them.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        bound: &Bound,
        input: Var,
        mode: Mode,
    ) -> Result<Var, AutodiffError> {
        if mode == Mode::Eval {
            return self.forward_eval(g, bound, input);
        }
        self.check_input(g, input)?;
        let mut h = input;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let off = self.offsets[i];
            h = match layer {
                Layer::Linear { .. } => {
                    let z = g.matmul(h, bound.vars[off])?;
                    g.add_row(z, bound.vars[off + 1])?
                }
                Layer::BatchNorm { .. } => {
                    let (gamma, beta) = (bound.vars[off], bound.vars[off + 1]);
                    let st = self.stats[i].as_mut().expect("batch norm stats");
                    let (y, batch) = g.batch_norm_train(h, gamma, beta, BATCH_NORM_EPS)?;
                    let m = BATCH_NORM_MOMENTUM;
                    for (r, b) in st.mean.iter_mut().zip(&batch.mean) {
                        *r = m * *r + (1.0 - m) * b;
                    }
                    for (r, b) in st.var.iter_mut().zip(&batch.var_unbiased) {
                        *r = m * *r + (1.0 - m) * b;
                    }
                    y
                }
                Layer::Relu => g.relu(h),
                Layer::Sigmoid => g.sigmoid(h),
            };
        }
        Ok(h)
    }

    fn check_input(&self, g: &Graph, input: Var) -> Result<(), AutodiffError> {
        let in_dim = self.input_dim();
        let x = g.value(input);
        if x.cols() != in_dim {
            return Err(AutodiffError::Shape {
                op: "network input",
                lhs: x.shape().to_vec(),
                rhs: vec![x.rows(), in_dim],
            });
        }
        Ok(())
    }

    /// Eval-mode forward pass outside any caller graph.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor, AutodiffError> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let x = g.constant(input.clone());
        let out = self.forward_eval(&mut g, &bound, x)?;
        Ok(g.value(out).clone())
    }

    /// Eval-mode forward without mutable access.
    pub fn forward_eval(&self, g: &mut Graph, bound: &Bound, input: Var) -> Result<Var, AutodiffError> {
        self.check_input(g, input)?;
        let mut h = input;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let off = self.offsets[i];
            h = match layer {
                Layer::Linear { .. } => {
                    let z = g.matmul(h, bound.vars[off])?;
                    g.add_row(z, bound.vars[off + 1])?
                }
                Layer::BatchNorm { .. } => {
                    let st = self.stats[i].as_ref().expect("batch norm stats");
                    g.batch_norm_eval(
                        h,
                        bound.vars[off],
                        bound.vars[off + 1],
                        &st.mean,
                        &st.var,
                        BATCH_NORM_EPS,
                    )?
                }
                Layer::Relu => g.relu(h),
                Layer::Sigmoid => g.sigmoid(h),
            };
        }
        Ok(h)
    }
}
