//! The landmark network: blocks of "same"-padded 3x3 convolutions, each block
//! opening with a stride-2 layer, then dropout + dense pairs and a regression
//! (or laterality) head.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Activation, Graph, Mode, NodeId};
use crate::error::{arg_err, dim_err, Error, Result};
use crate::kernels::same_padding;
use crate::tensor::{Scalar, Tensor};

/// Output layer variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Four linear outputs: OD x, OD y, fovea x, fovea y (normalised).
    Landmark4,
    /// One sigmoid output: probability that the image shows a right eye.
    Laterality1,
}

impl Head {
    pub fn outputs(self) -> usize {
        match self {
            Head::Landmark4 => 4,
            Head::Laterality1 => 1,
        }
    }

    fn activation(self) -> Activation {
        match self {
            Head::Landmark4 => Activation::Linear,
            Head::Laterality1 => Activation::Sigmoid,
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Head::Landmark4 => "landmark4",
            Head::Laterality1 => "laterality1",
        })
    }
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "landmark4" => Ok(Head::Landmark4),
            "laterality1" => Ok(Head::Laterality1),
            other => arg_err(format!("unknown head '{other}' (expected landmark4 or laterality1)")),
        }
    }
}

/// Architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Kernel count of every convolution in each block.
    pub block_widths: Vec<usize>,
    pub convs_per_block: usize,
    pub kernel_size: usize,
    pub fc_widths: Vec<usize>,
    pub dropout_p: f64,
    pub head: Head,
    /// Scales `block_widths` and `fc_widths` (round half up, minimum 1).
    pub width_multiplier: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_height: 768,
            input_width: 975,
            block_widths: vec![32, 32, 64, 64, 128],
            convs_per_block: 4,
            kernel_size: 3,
            fc_widths: vec![512, 512],
            dropout_p: 0.3,
            head: Head::Landmark4,
            width_multiplier: 1.0,
        }
    }
}

/// Shape and fan-in of one trainable tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Inputs feeding each output unit; zero for biases.
    pub fan_in: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Layer {
    /// Indices into the parameter list.
    Conv { kernel: usize, bias: usize, stride: usize },
    Dense { weights: usize, bias: usize },
    Act(Activation),
    Dropout(f64),
    Flatten,
}

impl ModelConfig {
    /// Reduced-size preset: 192x244 input (the 768:975 aspect) at half width.
    pub fn desk() -> Self {
        Self { input_height: 192, input_width: 244, width_multiplier: 0.5, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return arg_err(format!("width_multiplier must be positive, got {}", self.width_multiplier));
        }
        if self.input_height == 0 || self.input_width == 0 {
            return arg_err("input size must be positive");
        }
        if self.block_widths.is_empty() || self.block_widths.contains(&0) {
            return arg_err("block_widths must be a non-empty list of positive counts");
        }
        if self.fc_widths.contains(&0) {
            return arg_err("fc_widths entries must be positive");
        }
        if self.convs_per_block == 0 {
            return arg_err("convs_per_block must be at least 1");
        }
        if self.kernel_size == 0 {
            return arg_err("kernel_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return arg_err(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        Ok(())
    }

    fn scaled(&self, width: usize) -> usize {
        ((width as f64 * self.width_multiplier + 0.5).floor() as usize).max(1)
    }

    pub fn effective_block_widths(&self) -> Vec<usize> {
        self.block_widths.iter().map(|w| self.scaled(*w)).collect()
    }

    pub fn effective_fc_widths(&self) -> Vec<usize> {
        self.fc_widths.iter().map(|w| self.scaled(*w)).collect()
    }

    /// `[H, W, C]` of the last convolutional feature map.
    pub fn feature_shape(&self) -> [usize; 3] {
        let (mut h, mut w) = (self.input_height, self.input_width);
        for _ in &self.block_widths {
            h = same_padding(h, self.kernel_size, 2).0;
            w = same_padding(w, self.kernel_size, 2).0;
        }
        let c = self.effective_block_widths().last().copied().unwrap_or(1);
        [h, w, c]
    }

    fn plan(&self) -> (Vec<ParamSpec>, Vec<Layer>) {
        let k = self.kernel_size;
        let mut params = Vec::new();
        let mut layers = Vec::new();
        let push = |params: &mut Vec<ParamSpec>, name: String, shape: Vec<usize>, fan_in: usize| {
            params.push(ParamSpec { name, shape, fan_in });
            params.len() - 1
        };

        let mut channels = 1;
        for (b, width) in self.effective_block_widths().into_iter().enumerate() {
            for c in 0..self.convs_per_block {
                let prefix = format!("block{}.conv{}", b + 1, c + 1);
                let kernel = push(&mut params, format!("{prefix}.kernel"), vec![k, k, channels, width], k * k * channels);
                let bias = push(&mut params, format!("{prefix}.bias"), vec![width], 0);
                let stride = if c == 0 { 2 } else { 1 };
                layers.push(Layer::Conv { kernel, bias, stride });
                layers.push(Layer::Act(Activation::Relu));
                channels = width;
            }
        }
        layers.push(Layer::Flatten);

        let [fh, fw, fc] = self.feature_shape();
        let mut features = fh * fw * fc;
        for (i, units) in self.effective_fc_widths().into_iter().enumerate() {
            layers.push(Layer::Dropout(self.dropout_p));
            let weights = push(&mut params, format!("fc{}.weights", i + 1), vec![features, units], features);
            let bias = push(&mut params, format!("fc{}.bias", i + 1), vec![units], 0);
            layers.push(Layer::Dense { weights, bias });
            layers.push(Layer::Act(Activation::Relu));
            features = units;
        }
        let outputs = self.head.outputs();
        let weights = push(&mut params, "head.weights".into(), vec![features, outputs], features);
        let bias = push(&mut params, "head.bias".into(), vec![outputs], 0);
        layers.push(Layer::Dense { weights, bias });
        layers.push(Layer::Act(self.head.activation()));
        (params, layers)
    }

    /// Every trainable tensor in construction order.
    pub fn parameter_specs(&self) -> Vec<ParamSpec> {
        self.plan().0
    }
}

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// An instantiated network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    layers: Vec<Layer>,
}

/// Parameter leaves and output of one recorded forward pass.
#[derive(Debug, Clone)]
pub struct Recorded {
    pub output: NodeId,
    pub params: Vec<NodeId>,
}

/// He-uniform initialised model (zero biases), fully determined by `seed`.
pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Model::with_init(config, |spec| {
        if spec.fan_in == 0 {
            return vec![T::zero(); spec.shape.iter().product()];
        }
        let limit = (6.0 / spec.fan_in as f64).sqrt();
        (0..spec.shape.iter().product::<usize>())
            .map(|_| T::from_f64_lossy(rng.random_range(-limit..limit)))
            .collect()
    })
}

impl<T: Scalar> Model<T> {
    /// All-zero parameters.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        Self::with_init(config, |spec| vec![T::zero(); spec.shape.iter().product()])
    }

    fn with_init(config: &ModelConfig, mut init: impl FnMut(&ParamSpec) -> Vec<T>) -> Result<Self> {
        config.validate()?;
        let (specs, layers) = config.plan();
        let params = specs
            .iter()
            .map(|spec| {
                let tensor = Tensor::new(&spec.shape, init(spec))?.with_requires_grad(true);
                Ok(Param { name: spec.name.clone(), tensor })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config: config.clone(), params, layers })
    }

    /// Rebuilds a model around existing parameter tensors, checking names and shapes.
    pub fn from_params(config: &ModelConfig, params: Vec<Param<T>>) -> Result<Self> {
        config.validate()?;
        let (specs, layers) = config.plan();
        if specs.len() != params.len() {
            return dim_err(format!("expected {} parameter tensors, got {}", specs.len(), params.len()));
        }
        for (spec, p) in specs.iter().zip(&params) {
            if spec.name != p.name || spec.shape != p.tensor.shape() {
                return dim_err(format!(
                    "parameter '{}' {:?} does not match expected '{}' {:?}",
                    p.name,
                    p.tensor.shape(),
                    spec.name,
                    spec.shape
                ));
            }
        }
        let params = params
            .into_iter()
            .map(|p| Param { tensor: p.tensor.with_requires_grad(true), ..p })
            .collect();
        Ok(Self { config: config.clone(), params, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    /// Number of parameterised layers, head included.
    pub fn parameterised_layers(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::Conv { .. } | Layer::Dense { .. }))
            .count()
    }

    pub fn count_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape.len() != 4 || shape[1] != c.input_height || shape[2] != c.input_width || shape[3] != 1 {
            return dim_err(format!(
                "model expects input [N,{},{},1], got {shape:?}",
                c.input_height, c.input_width
            ));
        }
        Ok(())
    }

    /// Records a forward pass on `graph`, placing each parameter on the tape as
    /// a gradient-requiring leaf.
    pub fn record<R: Rng + ?Sized>(
        &self,
        graph: &mut Graph<T>,
        input: NodeId,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Recorded> {
        let params: Vec<NodeId> = self.params.iter().map(|p| graph.leaf(p.tensor.clone())).collect();
        let output = self.record_with(graph, input, &params, mode, rng)?;
        Ok(Recorded { output, params })
    }

    /// Records a forward pass using caller-provided parameter nodes, which
    /// must match `params()` in order and shape.
    pub fn record_with<R: Rng + ?Sized>(
        &self,
        graph: &mut Graph<T>,
        input: NodeId,
        params: &[NodeId],
        mode: Mode,
        rng: &mut R,
    ) -> Result<NodeId> {
        self.check_input(graph.value(input).shape())?;
        if params.len() != self.params.len() {
            return dim_err(format!("expected {} parameter nodes, got {}", self.params.len(), params.len()));
        }
        for (p, id) in self.params.iter().zip(params) {
            if graph.value(*id).shape() != p.tensor.shape() {
                return dim_err(format!(
                    "node for '{}' has shape {:?}, expected {:?}",
                    p.name,
                    graph.value(*id).shape(),
                    p.tensor.shape()
                ));
            }
        }
        self.run_layers(graph, input, params, mode, rng)
    }

    /// Runs the network on `[N,H,W,1]` and returns `[N,4]` or `[N,1]`.
    pub fn forward<R: Rng + ?Sized>(&self, batch: &Tensor<T>, mode: Mode, rng: &mut R) -> Result<Tensor<T>> {
        self.check_input(batch.shape())?;
        let mut graph = Graph::new();
        let input = graph.leaf(batch.clone().with_requires_grad(false));
        let params: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| graph.leaf(p.tensor.clone().with_requires_grad(false)))
            .collect();
        let output = self.run_layers(&mut graph, input, &params, mode, rng)?;
        Ok(graph.value(output).clone())
    }

    fn run_layers<R: Rng + ?Sized>(
        &self,
        graph: &mut Graph<T>,
        input: NodeId,
        params: &[NodeId],
        mode: Mode,
        rng: &mut R,
    ) -> Result<NodeId> {
        let mut x = input;
        for layer in &self.layers {
            x = match *layer {
                Layer::Conv { kernel, bias, stride } => graph.conv2d(x, params[kernel], params[bias], stride)?,
                Layer::Dense { weights, bias } => graph.dense(x, params[weights], params[bias])?,
                Layer::Act(kind) => graph.activation(x, kind)?,
                Layer::Dropout(p) => graph.dropout(x, p, mode, rng)?,
                Layer::Flatten => graph.flatten(x)?,
            };
        }
        Ok(x)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), tensor: p.tensor.cast() })
                .collect(),
            layers: self.layers.clone(),
        }
    }
}

/// Closed-form parameter count of a configuration.
pub fn analytic_param_count(config: &ModelConfig) -> usize {
    let k = config.kernel_size;
    let mut total = 0;
    let mut cin = 1;
    for w in config.effective_block_widths() {
        total += k * k * cin * w + w;
        total += (config.convs_per_block - 1) * (k * k * w * w + w);
        cin = w;
    }
    let [h, wd, c] = config.feature_shape();
    let mut features = h * wd * c;
    for units in config.effective_fc_widths() {
        total += features * units + units;
        features = units;
    }
    let out = config.head.outputs();
    total + features * out + out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_matches_published_parameter_count() {
        let config = ModelConfig::default();
        assert_eq!(analytic_param_count(&config), 49_882_660);
        let model = Model::<f32>::zeros(&config).unwrap();
        assert_eq!(model.count_params(), 49_882_660);
        assert_eq!(model.parameterised_layers(), 23);
    }

    #[test]
    fn conv_and_dense_subtotals() {
        let specs = ModelConfig::default().parameter_specs();
        let (conv, dense): (Vec<_>, Vec<_>) = specs.iter().partition(|s| s.name.starts_with("block"));
        let sum = |v: &[&ParamSpec]| v.iter().map(|s| s.shape.iter().product::<usize>()).sum::<usize>();
        assert_eq!(sum(&conv), 858_656);
        assert_eq!(sum(&dense), 49_024_004);
    }

    #[test]
    fn laterality_head_count() {
        let config = ModelConfig { head: Head::Laterality1, ..ModelConfig::default() };
        assert_eq!(analytic_param_count(&config), 49_881_121);
    }

    #[test]
    fn feature_shape_chain() {
        assert_eq!(ModelConfig::default().feature_shape(), [24, 31, 128]);
        assert_eq!(ModelConfig::desk().feature_shape(), [6, 8, 64]);
    }

    #[test]
    fn multiplier_rounds_half_up_with_floor_of_one() {
        let c = ModelConfig { width_multiplier: 0.5, block_widths: vec![3, 1, 5], fc_widths: vec![1], ..ModelConfig::default() };
        assert_eq!(c.effective_block_widths(), vec![2, 1, 3]);
        assert_eq!(c.effective_fc_widths(), vec![1]);
        let tiny = ModelConfig { width_multiplier: 0.01, ..ModelConfig::default() };
        assert!(tiny.effective_block_widths().iter().all(|w| *w == 1));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let zero = ModelConfig { width_multiplier: 0.0, ..ModelConfig::default() };
        assert!(matches!(build_model::<f32>(&zero, 0), Err(Error::Argument(_))));
        let p = ModelConfig { dropout_p: 1.0, ..ModelConfig::default() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn parameter_names_are_unique_and_ordered() {
        let specs = ModelConfig::default().parameter_specs();
        let mut names: Vec<_> = specs.iter().map(|s| s.name.clone()).collect();
        assert_eq!(names[0], "block1.conv1.kernel");
        assert_eq!(names.last().unwrap(), "head.bias");
        names.sort();
        names.dedup();
        assert_eq!(names.len(), specs.len());
    }
}
