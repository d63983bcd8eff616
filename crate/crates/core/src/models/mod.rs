//! Desk-scale differentiable classifiers: a small residual CNN and a small
//! vision transformer, with training, checkpointing and access to the
//! penultimate-layer features.

mod checkpoint;
mod cnn;
mod train;
mod vit;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use cnn::{Cnn, CnnConfig};
pub use train::{accuracy, train, TrainConfig, TrainReport};
pub use vit::{Vit, VitConfig};

use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::Real;
use std::fmt;

/// Version of the fixed toy-architecture layouts. Bump when the layer
/// recipe of either family changes; checkpoints carry it.
pub const MODEL_CONFIG_VERSION: u32 = 1;

#[derive(Debug)]
pub enum ModelError {
    /// Patch size does not divide the image dimensions.
    IndivisiblePatch { patch: usize, h: usize, w: usize },
    /// Training loss became non-finite.
    DivergedTraining { epoch: usize },
    /// Checkpoint failed validation (magic, version, shapes, checksum).
    CorruptCheckpoint(String),
    /// A label lies outside 0..K-1.
    InvalidLabel { label: usize, classes: usize },
    /// Operation needs an attention-bearing architecture.
    UnsupportedArch(&'static str),
    Io(std::io::Error),
    Tensor(TensorError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::IndivisiblePatch { patch, h, w } => {
                write!(f, "patch size {patch} does not divide image {h}x{w}")
            }
            ModelError::DivergedTraining { epoch } => {
                write!(f, "training loss became non-finite in epoch {epoch}")
            }
            ModelError::CorruptCheckpoint(why) => write!(f, "corrupt checkpoint: {why}"),
            ModelError::InvalidLabel { label, classes } => {
                write!(f, "label {label} outside 0..{classes}")
            }
            ModelError::UnsupportedArch(why) => write!(f, "{why}"),
            ModelError::Io(e) => write!(f, "io error: {e}"),
            ModelError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

impl From<std::io::Error> for ModelError {
    fn from(e: std::io::Error) -> Self {
        ModelError::Io(e)
    }
}

/// Per-layer attention matrices (heads x tokens x tokens) captured during
/// a transformer forward pass.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub layers: Vec<Tensor>,
}

/// Forward-pass products. `param_vars` is populated (in [`Model::params`]
/// order) only when the pass was built with `train_params = true`.
pub struct ForwardPass<'t> {
    pub logits: Var<'t>,
    pub features: Var<'t>,
    pub param_vars: Vec<Var<'t>>,
    pub attention: Option<AttentionTrace>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Register parameters as differentiable leaves.
    pub train_params: bool,
    /// Capture per-layer attention matrices (transformer only).
    pub record_attention: bool,
}

/// A trained or trainable classifier; `f` is the logit head, `g` the
/// penultimate-layer feature map.
pub enum Model {
    Cnn(Cnn),
    Vit(Vit),
}

impl Model {
    pub fn arch_tag(&self) -> &'static str {
        match self {
            Model::Cnn(_) => "cnn",
            Model::Vit(_) => "vit",
        }
    }

    /// (C, H, W) accepted by the forward pass.
    pub fn input_spec(&self) -> (usize, usize, usize) {
        match self {
            Model::Cnn(m) => m.config().input,
            Model::Vit(m) => m.config().input,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Model::Cnn(m) => m.config().classes,
            Model::Vit(m) => m.config().classes,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Model::Cnn(m) => m.feature_dim(),
            Model::Vit(m) => m.feature_dim(),
        }
    }

    /// All learnable tensors, in a stable order shared with
    /// `ForwardPass::param_vars` and the checkpoint layout.
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Model::Cnn(m) => m.params(),
            Model::Vit(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Model::Cnn(m) => m.params_mut(),
            Model::Vit(m) => m.params_mut(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        opts: ForwardOptions,
    ) -> Result<ForwardPass<'t>, ModelError> {
        match self {
            Model::Cnn(m) => m.forward(tape, x, opts),
            Model::Vit(m) => m.forward(tape, x, opts),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<(), ModelError> {
        let (c, h, w) = self.input_spec();
        if x.shape() != [c, h, w] {
            return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                context: "model input",
                lhs: vec![c, h, w],
                rhs: x.shape().to_vec(),
            }));
        }
        Ok(())
    }

    /// Evaluation-mode logits.
    pub fn logits(&self, x: &Tensor) -> Result<Vec<Real>, ModelError> {
        self.check_input(x)?;
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pass = self.forward(&tape, xv, ForwardOptions::default())?;
        Ok(pass.logits.value().into_data())
    }

    /// Predicted class and softmax probability vector.
    pub fn predict(&self, x: &Tensor) -> Result<(usize, Vec<Real>), ModelError> {
        let logits = self.logits(x)?;
        let max = logits.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
        let exps: Vec<Real> = logits.iter().map(|&l| (l - max).exp()).collect();
        let sum: Real = exps.iter().sum();
        let probs: Vec<Real> = exps.iter().map(|&e| e / sum).collect();
        let class = argmax(&logits);
        Ok((class, probs))
    }

    /// Penultimate-layer feature vector.
    pub fn penultimate(&self, x: &Tensor) -> Result<Vec<Real>, ModelError> {
        self.check_input(x)?;
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pass = self.forward(&tape, xv, ForwardOptions::default())?;
        Ok(pass.features.value().into_data())
    }

    /// Attention trace of an evaluation forward pass (transformer only).
    pub fn attention_trace(&self, x: &Tensor) -> Result<AttentionTrace, ModelError> {
        if matches!(self, Model::Cnn(_)) {
            return Err(ModelError::UnsupportedArch("cnn forward records no attention"));
        }
        self.check_input(x)?;
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pass = self.forward(
            &tape,
            xv,
            ForwardOptions { train_params: false, record_attention: true },
        )?;
        Ok(pass.attention.expect("transformer pass records attention"))
    }

    /// Cross-entropy loss and its gradient w.r.t. the input image.
    pub fn input_gradient(&self, x: &Tensor, y: usize) -> Result<(Real, Tensor), ModelError> {
        self.check_input(x)?;
        if y >= self.num_classes() {
            return Err(ModelError::InvalidLabel { label: y, classes: self.num_classes() });
        }
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let pass = self.forward(&tape, xv, ForwardOptions::default())?;
        let loss = ce_loss_var(pass.logits, y)?;
        let loss_value = tape.scalar_value(loss)?;
        let grads = tape.backward(loss)?;
        Ok((loss_value, grads.get_or_zeros(xv)))
    }
}

pub fn argmax(xs: &[Real]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy of a one-dimensional logit vector against class `y`,
/// as a scalar variable: -log softmax(logits)[y].
pub fn ce_loss_var(logits: Var<'_>, y: usize) -> Result<Var<'_>, TensorError> {
    let ls = logits.log_softmax()?;
    let map = std::sync::Arc::new(vec![Some((y, -1.0))]);
    ls.gather_signed(vec![1], map)
}

/// Anything exposing a feature embedding of images; implemented by
/// [`Model`] via its penultimate layer and by test stand-ins.
pub trait FeatureMap {
    fn features(&self, x: &Tensor) -> Result<Vec<Real>, ModelError>;
}

impl FeatureMap for Model {
    fn features(&self, x: &Tensor) -> Result<Vec<Real>, ModelError> {
        self.penultimate(x)
    }
}

/// Linear layer parameters used by both families.
#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub weight: Tensor, // [in, out]
    pub bias: Tensor,   // [out]
}

impl Linear {
    pub fn init(inp: usize, out: usize, std: Real, rng: &mut crate::rng::Rng) -> Self {
        Linear { weight: Tensor::rand_normal(&[inp, out], std, rng), bias: Tensor::zeros(&[out]) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn probabilities_sum_to_one_and_argmax_matches() {
        let cfg = CnnConfig::new((1, 16, 16), 3, 11);
        let model = Model::Cnn(Cnn::build(cfg));
        let mut rng = Rng::new(2);
        let x = Tensor::rand_uniform(&[1, 16, 16], 0.0, 1.0, &mut rng);
        let (class, probs) = model.predict(&x).unwrap();
        assert!((probs.iter().sum::<Real>() - 1.0).abs() < 1e-6);
        let logits = model.logits(&x).unwrap();
        assert_eq!(class, argmax(&logits));
        assert_eq!(class, argmax(&probs));
    }

    #[test]
    fn penultimate_dim_is_input_independent() {
        let cfg = CnnConfig::new((3, 16, 16), 4, 5);
        let model = Model::Cnn(Cnn::build(cfg));
        let mut rng = Rng::new(3);
        let a = model.penultimate(&Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut rng)).unwrap();
        let b = model.penultimate(&Tensor::zeros(&[3, 16, 16])).unwrap();
        assert_eq!(a.len(), b.len());
        assert_eq!(a.len(), model.feature_dim());
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let model = Model::Cnn(Cnn::build(CnnConfig::new((3, 16, 16), 4, 7)));
        let err = model.logits(&Tensor::zeros(&[1, 16, 16])).unwrap_err();
        assert!(matches!(err, ModelError::Tensor(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn zero_image_has_finite_logits() {
        let model = Model::Cnn(Cnn::build(CnnConfig::new((3, 16, 16), 4, 7)));
        let logits = model.logits(&Tensor::zeros(&[3, 16, 16])).unwrap();
        assert_eq!(logits.len(), 4);
        assert!(logits.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn eval_forward_is_pure() {
        let model = Model::Vit(Vit::build(VitConfig::new((3, 16, 16), 4, 21)).unwrap());
        let mut rng = Rng::new(10);
        let x = Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        let a = model.logits(&x).unwrap();
        let b = model.logits(&x).unwrap();
        assert_eq!(a, b, "repeated eval passes must agree bit-exactly");
    }
}
