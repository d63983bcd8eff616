//! Small residual CNN: stem convolution, two residual blocks separated by
//! average-pool downsampling, global average pooling and a linear head.

use super::{ForwardOptions, ForwardPass, Linear, Model, ModelError};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CnnConfig {
    pub input: (usize, usize, usize),
    pub classes: usize,
    /// Channel width of the first stage; the second stage doubles it.
    pub width: usize,
    pub seed: u64,
}

impl CnnConfig {
    pub fn new(input: (usize, usize, usize), classes: usize, seed: u64) -> Self {
        CnnConfig { input, classes, width: 16, seed }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self
    }
}

#[derive(Debug, Clone)]
struct ConvParams {
    weight: Tensor, // [O,C,kh,kw]
    bias: Tensor,   // [O]
}

impl ConvParams {
    fn init(c_in: usize, c_out: usize, k: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / (c_in * k * k) as Real).sqrt();
        ConvParams {
            weight: Tensor::rand_normal(&[c_out, c_in, k, k], std, rng),
            bias: Tensor::zeros(&[c_out]),
        }
    }
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    conv1: ConvParams,
    conv2: ConvParams,
}

impl ResidualBlock {
    fn init(ch: usize, rng: &mut Rng) -> Self {
        ResidualBlock { conv1: ConvParams::init(ch, ch, 3, rng), conv2: ConvParams::init(ch, ch, 3, rng) }
    }
}

pub struct Cnn {
    cfg: CnnConfig,
    stem: ConvParams,
    block1: ResidualBlock,
    transition: ConvParams, // 1x1, width -> 2*width
    block2: ResidualBlock,
    head: Linear,
}

impl Cnn {
    pub fn build(cfg: CnnConfig) -> Self {
        let (c, h, w) = cfg.input;
        assert!(h >= 16 && w >= 16, "cnn expects at least 16x16 inputs");
        let mut rng = Rng::new(cfg.seed).fork(0xC44);
        let wd = cfg.width;
        Cnn {
            stem: ConvParams::init(c, wd, 3, &mut rng),
            block1: ResidualBlock::init(wd, &mut rng),
            transition: ConvParams::init(wd, 2 * wd, 1, &mut rng),
            block2: ResidualBlock::init(2 * wd, &mut rng),
            head: Linear::init(2 * wd, cfg.classes, (1.0 / (2 * wd) as Real).sqrt(), &mut rng),
            cfg,
        }
    }

    pub fn config(&self) -> &CnnConfig {
        &self.cfg
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.cfg.width
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.stem.weight,
            &self.stem.bias,
            &self.block1.conv1.weight,
            &self.block1.conv1.bias,
            &self.block1.conv2.weight,
            &self.block1.conv2.bias,
            &self.transition.weight,
            &self.transition.bias,
            &self.block2.conv1.weight,
            &self.block2.conv1.bias,
            &self.block2.conv2.weight,
            &self.block2.conv2.bias,
            &self.head.weight,
            &self.head.bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.stem.weight,
            &mut self.stem.bias,
            &mut self.block1.conv1.weight,
            &mut self.block1.conv1.bias,
            &mut self.block1.conv2.weight,
            &mut self.block1.conv2.bias,
            &mut self.transition.weight,
            &mut self.transition.bias,
            &mut self.block2.conv1.weight,
            &mut self.block2.conv1.bias,
            &mut self.block2.conv2.weight,
            &mut self.block2.conv2.bias,
            &mut self.head.weight,
            &mut self.head.bias,
        ]
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        opts: ForwardOptions,
    ) -> Result<ForwardPass<'t>, ModelError> {
        let reg = |t: &Tensor| if opts.train_params { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        let param_tensors = self.params();
        let param_vars: Vec<Var<'t>> = param_tensors.iter().map(|t| reg(t)).collect();
        let [stem_w, stem_b, b1c1_w, b1c1_b, b1c2_w, b1c2_b, tr_w, tr_b, b2c1_w, b2c1_b, b2c2_w, b2c2_b, head_w, head_b] =
            param_vars[..]
        else {
            unreachable!("cnn has 14 parameter tensors")
        };

        let block = |x: Var<'t>, c1w, c1b, c2w, c2b| -> Result<Var<'t>, ModelError> {
            let h = x.conv2d(c1w, Some(c1b), 1, 1)?.relu();
            let h = h.conv2d(c2w, Some(c2b), 1, 1)?;
            Ok(h.add(x)?.relu())
        };

        let h = x.conv2d(stem_w, Some(stem_b), 1, 1)?.relu().avg_pool2d(2, 2)?;
        let h = block(h, b1c1_w, b1c1_b, b1c2_w, b1c2_b)?;
        let h = h.avg_pool2d(2, 2)?;
        let h = h.conv2d(tr_w, Some(tr_b), 1, 0)?.relu();
        let h = block(h, b2c1_w, b2c1_b, b2c2_w, b2c2_b)?;

        // Global average pool: [2w, H/4, W/4] -> [2w].
        let ch = self.feature_dim();
        let spatial: usize = h.shape()[1] * h.shape()[2];
        let features = h.reshape(vec![ch, spatial])?.mean_axis(1)?;

        let logits = features
            .reshape(vec![1, ch])?
            .matmul(head_w)?
            .add(head_b)?
            .reshape(vec![self.cfg.classes])?;

        Ok(ForwardPass {
            logits,
            features,
            param_vars: if opts.train_params { param_vars } else { Vec::new() },
            attention: None,
        })
    }
}

impl From<Cnn> for Model {
    fn from(m: Cnn) -> Model {
        Model::Cnn(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ce_loss_var;
    use crate::tensor::finite_difference_check;

    #[test]
    fn forward_shapes() {
        let cnn = Cnn::build(CnnConfig::new((3, 32, 32), 4, 1));
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 32, 32]));
        let pass = cnn.forward(&tape, x, ForwardOptions::default()).unwrap();
        assert_eq!(pass.logits.value().shape(), &[4]);
        assert_eq!(pass.features.value().shape(), &[cnn.feature_dim()]);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        // Tiny config keeps the finite-difference sweep quick.
        let cnn = Cnn::build(CnnConfig::new((1, 16, 16), 3, 7).with_width(4));
        let mut rng = Rng::new(4);
        let x = Tensor::rand_uniform(&[1, 16, 16], 0.05, 0.95, &mut rng);
        let err = finite_difference_check(
            |tape, v| {
                let pass = cnn.forward(tape, v, ForwardOptions::default()).map_err(|e| match e {
                    ModelError::Tensor(t) => t,
                    other => panic!("unexpected error: {other}"),
                })?;
                ce_loss_var(pass.logits, 1)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "cnn input gradcheck: {err}");
    }

    #[test]
    fn param_count_is_stable() {
        let cnn = Cnn::build(CnnConfig::new((3, 32, 32), 4, 1));
        let n: usize = cnn.params().iter().map(|p| p.numel()).sum();
        // Width 16 layout: documented budget for the default toy model.
        assert_eq!(n, 24_260);
    }
}
