//! Adam with gradient-norm clipping, mini-batch training and early stopping.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mode, NodeId};
use crate::data::Sample;
use crate::error::{arg_err, Error, Result};
use crate::model::{Head, Model};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClipScope {
    #[default]
    PerTensor,
    Global,
}

impl fmt::Display for ClipScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClipScope::PerTensor => "per_tensor",
            ClipScope::Global => "global",
        })
    }
}

impl FromStr for ClipScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_tensor" => Ok(ClipScope::PerTensor),
            "global" => Ok(ClipScope::Global),
            other => Err(Error::Format(format!("unknown clip scope '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub clip_scope: ClipScope,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 1.0,
            clip_scope: ClipScope::PerTensor,
            batch_size: 16,
            max_epochs: 100,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.beta1) || !open_unit(self.beta2) {
            return arg_err(format!("betas must lie in (0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return arg_err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.clip_norm > 0.0) {
            return arg_err(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if !(self.epsilon >= 0.0) {
            return arg_err("epsilon must be non-negative");
        }
        if self.batch_size == 0 {
            return arg_err("batch_size must be at least 1");
        }
        Ok(())
    }
}

/// Euclidean norm accumulated in `f64`.
fn norm_f64<T: Scalar>(v: &[T]) -> f64 {
    v.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt()
}

fn rescale<T: Scalar>(v: &mut [T], clip_norm: f64, norm: f64) {
    let clip = T::from_f64_lossy(clip_norm);
    let norm = T::from_f64_lossy(norm);
    for x in v {
        *x = *x * clip / norm;
    }
}

/// Scales gradients whose norm exceeds `clip_norm` back onto the norm ball.
/// Norms within a relative 1e-6 of the threshold count as on it, which keeps
/// the operation idempotent under rounding.
pub fn clip_gradients<T: Scalar>(grads: &mut [Vec<T>], clip_norm: f64, scope: ClipScope) -> Result<()> {
    if !(clip_norm > 0.0) {
        return arg_err(format!("clip_norm must be positive, got {clip_norm}"));
    }
    let limit = clip_norm * (1.0 + 1e-6);
    match scope {
        ClipScope::PerTensor => {
            for g in grads.iter_mut() {
                let n = norm_f64(g);
                if n > limit {
                    rescale(g, clip_norm, n);
                }
            }
        }
        ClipScope::Global => {
            let n = grads.iter().map(|g| norm_f64(g).powi(2)).sum::<f64>().sqrt();
            if n > limit {
                for g in grads.iter_mut() {
                    rescale(g, clip_norm, n);
                }
            }
        }
    }
    Ok(())
}

/// Bias-corrected Adam state for a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: &TrainConfig, sizes: &[usize]) -> Self {
        Self {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            step: 0,
            m: sizes.iter().map(|n| vec![T::zero(); *n]).collect(),
            v: sizes.iter().map(|n| vec![T::zero(); *n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to `params` using `grads` (same order and sizes).
    pub fn update(&mut self, params: &mut [&mut [T]], grads: &[Vec<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return arg_err(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let one = T::one();
        let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
        let lr = T::from_f64_lossy(self.lr);
        let eps = T::from_f64_lossy(self.epsilon);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != g.len() || g.len() != self.m[i].len() {
                return arg_err(format!("tensor {i}: parameter/gradient size mismatch"));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 0 is the untrained model, which has no training loss.
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    /// Validation loss did not improve for `patience` epochs.
    EarlyStopping,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::MaxEpochs => "max_epochs",
            StopReason::EarlyStopping => "early_stopping",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub stop: StopReason,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn best_val_loss(&self) -> f64 {
        self.records
            .iter()
            .find(|r| r.epoch == self.best_epoch)
            .map_or(f64::NAN, |r| r.val_loss)
    }

    /// Writes `epoch,train_loss,val_loss,seconds`. With `wall_time` off the
    /// seconds column is 0 so that identical runs give identical files.
    pub fn write_csv<W: Write>(&self, mut out: W, comments: &[String], wall_time: bool) -> Result<()> {
        for c in comments {
            writeln!(out, "# {c}")?;
        }
        writeln!(out, "epoch,train_loss,val_loss,seconds")?;
        for r in &self.records {
            let train = r.train_loss.map(|v| v.to_string()).unwrap_or_default();
            let secs = if wall_time { format!("{:.3}", r.seconds) } else { "0".into() };
            writeln!(out, "{},{train},{},{secs}", r.epoch, r.val_loss)?;
        }
        writeln!(out, "# stop: {} best_epoch: {}", self.stop, self.best_epoch)?;
        Ok(())
    }
}

/// Stacks samples into an `[N,H,W,1]` batch and their targets.
pub fn make_batch(samples: &[&Sample], head: Head) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Argument("cannot batch zero samples".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut pixels = Vec::with_capacity(samples.len() * h * w);
    let mut targets = Vec::with_capacity(samples.len() * head.outputs());
    for s in samples {
        if s.height() != h || s.width() != w {
            return Err(Error::Dimension(format!(
                "{}: {}x{} image in a batch of {w}x{h} images",
                s.image_path,
                s.width(),
                s.height()
            )));
        }
        pixels.extend_from_slice(s.image.data());
        match head {
            Head::Landmark4 => targets.extend(s.target().iter().map(|v| *v as f32)),
            Head::Laterality1 => targets.push(s.laterality.class_label()),
        }
    }
    let n = samples.len();
    Ok((Tensor::new(&[n, h, w, 1], pixels)?, Tensor::new(&[n, head.outputs()], targets)?))
}

fn loss_node(graph: &mut Graph<f32>, head: Head, output: NodeId, target: NodeId) -> Result<NodeId> {
    match head {
        Head::Landmark4 => graph.mse_loss(output, target),
        Head::Laterality1 => graph.bce_loss(output, target),
    }
}

/// Mean loss over `samples` in inference mode.
pub fn evaluate_loss(model: &Model<f32>, samples: &[Sample], batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return arg_err("validation set is empty");
    }
    let head = model.config().head;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, y) = make_batch(&refs, head)?;
        let out = model.forward(&x, Mode::Inference, &mut rng)?;
        let mut g = Graph::new();
        let (o, t) = (g.leaf(out), g.leaf(y));
        let loss = loss_node(&mut g, head, o, t)?;
        total += g.value(loss).data()[0] as f64 * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Network outputs for every sample, in order, computed in inference mode.
pub fn predict_outputs(model: &Model<f32>, samples: &[Sample], batch_size: usize) -> Result<Vec<Vec<f32>>> {
    let head = model.config().head;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, _) = make_batch(&refs, head)?;
        let y = model.forward(&x, Mode::Inference, &mut rng)?;
        out.extend(y.data().chunks(head.outputs()).map(<[f32]>::to_vec));
    }
    Ok(out)
}

/// Trains with Adam and early stopping; returns the parameters of the epoch
/// with the lowest validation loss (epoch 0 being the untrained model).
pub fn train(
    model: Model<f32>,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
) -> Result<(Model<f32>, TrainLog)> {
    train_with_progress(model, train_set, val_set, config, |_| {})
}

pub fn train_with_progress(
    mut model: Model<f32>,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model<f32>, TrainLog)> {
    config.validate()?;
    if train_set.is_empty() {
        return arg_err("training set is empty");
    }
    if val_set.is_empty() {
        return arg_err("validation set is empty");
    }
    let head = model.config().head;
    let sizes: Vec<usize> = model.params().iter().map(|p| p.tensor.numel()).collect();
    let mut adam = Adam::<f32>::new(config, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let initial = EpochRecord {
        epoch: 0,
        train_loss: None,
        val_loss: evaluate_loss(&model, val_set, config.batch_size)?,
        seconds: 0.0,
    };
    on_epoch(&initial);
    let mut best_val = initial.val_loss;
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut records = vec![initial];
    let mut wait = 0;
    let mut stop = StopReason::MaxEpochs;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.max_epochs {
        let epoch_start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch_idx, idx) in order.chunks(config.batch_size).enumerate() {
            let refs: Vec<&Sample> = idx.iter().map(|i| &train_set[*i]).collect();
            let (x, y) = make_batch(&refs, head)?;
            let mut graph = Graph::new();
            let input = graph.leaf(x);
            let rec = model.record(&mut graph, input, Mode::Train, &mut rng)?;
            let target = graph.leaf(y);
            let loss = loss_node(&mut graph, head, rec.output, target)?;
            let value = graph.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, batch: batch_idx, loss: value });
            }
            loss_sum += value * idx.len() as f64;
            graph.backward(loss)?;
            let mut grads: Vec<Vec<f32>> = rec
                .params
                .iter()
                .zip(&sizes)
                .map(|(id, n)| graph.take_grad(*id).unwrap_or_else(|| vec![0.0; *n]))
                .collect();
            clip_gradients(&mut grads, config.clip_norm, config.clip_scope)?;
            let mut params: Vec<&mut [f32]> = model.params_mut().iter_mut().map(|p| p.tensor.data_mut()).collect();
            adam.update(&mut params, &grads)?;
        }

        let val_loss = evaluate_loss(&model, val_set, config.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch, batch: order.len().div_ceil(config.batch_size), loss: val_loss });
        }
        let record = EpochRecord {
            epoch,
            train_loss: Some(loss_sum / train_set.len() as f64),
            val_loss,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        records.push(record);

        if val_loss < best_val {
            best_val = val_loss;
            best = model.clone();
            best_epoch = epoch;
            wait = 0;
        } else {
            wait += 1;
            if wait >= config.patience {
                stop = StopReason::EarlyStopping;
                break;
            }
        }
    }
    Ok((best, TrainLog { records, stop, best_epoch }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_fixtures() {
        let mut g = vec![vec![3.0f64, 4.0]];
        clip_gradients(&mut g, 1.0, ClipScope::PerTensor).unwrap();
        assert_eq!(g[0], vec![0.6, 0.8]);

        let mut small = vec![vec![0.3f64, 0.4]];
        clip_gradients(&mut small, 1.0, ClipScope::PerTensor).unwrap();
        assert_eq!(small[0], vec![0.3, 0.4]);
    }

    #[test]
    fn global_scope_uses_joint_norm() {
        let mut g = vec![vec![3.0f64], vec![4.0]];
        clip_gradients(&mut g, 1.0, ClipScope::Global).unwrap();
        assert_eq!(g, vec![vec![0.6], vec![0.8]]);
        let mut h = vec![vec![3.0f64], vec![4.0]];
        clip_gradients(&mut h, 1.0, ClipScope::PerTensor).unwrap();
        assert_eq!(h, vec![vec![1.0], vec![1.0]]);
    }

    #[test]
    fn clip_rejects_nonpositive_norm() {
        assert!(clip_gradients(&mut [vec![1.0f32]], 0.0, ClipScope::Global).is_err());
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        let config = TrainConfig { learning_rate: 0.1, ..TrainConfig::default() };
        let mut adam = Adam::<f64>::new(&config, &[2]);
        let mut p = [1.0, -1.0];
        adam.update(&mut [&mut p[..]], &[vec![2.0, -0.5]]).unwrap();
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        let expect = [1.0 - 0.1 * 2.0 / (2.0 + 1e-8), -1.0 + 0.1 * 0.5 / (0.5 + 1e-8)];
        for (a, e) in p.iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { beta1: 1.0, ..TrainConfig::default() },
            TrainConfig { beta2: 0.0, ..TrainConfig::default() },
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { clip_norm: -1.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Argument(_))));
        }
    }

    #[test]
    fn clip_scope_parse() {
        assert_eq!("global".parse::<ClipScope>().unwrap(), ClipScope::Global);
        assert_eq!(ClipScope::default().to_string(), "per_tensor");
        assert!("both".parse::<ClipScope>().is_err());
    }
}
