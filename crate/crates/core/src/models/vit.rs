//! Small vision transformer: patch embedding, learned class token and
//! positional embeddings, pre-norm encoder blocks, class-token head.

use super::{AttentionTrace, ForwardOptions, ForwardPass, Linear, Model, ModelError};
use crate::rng::Rng;
use crate::tensor::{concat, Tape, Tensor, TensorError, Var};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VitConfig {
    pub input: (usize, usize, usize),
    pub classes: usize,
    pub patch: usize,
    pub depth: usize,
    pub heads: usize,
    pub embed: usize,
    pub mlp_hidden: usize,
    pub seed: u64,
}

impl VitConfig {
    pub fn new(input: (usize, usize, usize), classes: usize, seed: u64) -> Self {
        VitConfig { input, classes, patch: 4, depth: 2, heads: 2, embed: 32, mlp_hidden: 64, seed }
    }

    pub fn with_dims(mut self, patch: usize, depth: usize, heads: usize, embed: usize) -> Self {
        self.patch = patch;
        self.depth = depth;
        self.heads = heads;
        self.embed = embed;
        self.mlp_hidden = 2 * embed;
        self
    }

    pub fn tokens(&self) -> usize {
        let (_, h, w) = self.input;
        (h / self.patch) * (w / self.patch)
    }
}

#[derive(Debug, Clone)]
struct LayerNormParams {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNormParams {
    fn init(dim: usize) -> Self {
        LayerNormParams { gamma: Tensor::full(&[dim], 1.0), beta: Tensor::zeros(&[dim]) }
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNormParams,
    qkv: Linear,  // [D, 3D]
    proj: Linear, // [D, D]
    ln2: LayerNormParams,
    fc1: Linear, // [D, M]
    fc2: Linear, // [M, D]
}

pub struct Vit {
    cfg: VitConfig,
    patch_embed: Linear, // [C*p*p, D]
    class_token: Tensor, // [1, D]
    pos_embed: Tensor,   // [T+1, D]
    blocks: Vec<Block>,
    final_ln: LayerNormParams,
    head: Linear, // [D, K]
}

const LN_EPS: Real = 1e-6;

impl Vit {
    pub fn build(cfg: VitConfig) -> Result<Self, ModelError> {
        let (c, h, w) = cfg.input;
        if cfg.patch == 0 || h % cfg.patch != 0 || w % cfg.patch != 0 {
            return Err(ModelError::IndivisiblePatch { patch: cfg.patch, h, w });
        }
        assert!(cfg.embed % cfg.heads == 0, "embed dim must split across heads");
        let mut rng = Rng::new(cfg.seed).fork(0x717);
        let d = cfg.embed;
        let std = 0.02;
        let blocks = (0..cfg.depth)
            .map(|_| Block {
                ln1: LayerNormParams::init(d),
                qkv: Linear::init(d, 3 * d, std, &mut rng),
                proj: Linear::init(d, d, std, &mut rng),
                ln2: LayerNormParams::init(d),
                fc1: Linear::init(d, cfg.mlp_hidden, std, &mut rng),
                fc2: Linear::init(cfg.mlp_hidden, d, std, &mut rng),
            })
            .collect();
        Ok(Vit {
            patch_embed: Linear::init(c * cfg.patch * cfg.patch, d, std, &mut rng),
            class_token: Tensor::rand_normal(&[1, d], std, &mut rng),
            pos_embed: Tensor::rand_normal(&[cfg.tokens() + 1, d], std, &mut rng),
            blocks,
            final_ln: LayerNormParams::init(d),
            head: Linear::init(d, cfg.classes, std, &mut rng),
            cfg,
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.cfg
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.embed
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut ps = vec![&self.patch_embed.weight, &self.patch_embed.bias, &self.class_token, &self.pos_embed];
        for b in &self.blocks {
            ps.extend([
                &b.ln1.gamma,
                &b.ln1.beta,
                &b.qkv.weight,
                &b.qkv.bias,
                &b.proj.weight,
                &b.proj.bias,
                &b.ln2.gamma,
                &b.ln2.beta,
                &b.fc1.weight,
                &b.fc1.bias,
                &b.fc2.weight,
                &b.fc2.bias,
            ]);
        }
        ps.extend([&self.final_ln.gamma, &self.final_ln.beta, &self.head.weight, &self.head.bias]);
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut ps = vec![
            &mut self.patch_embed.weight,
            &mut self.patch_embed.bias,
            &mut self.class_token,
            &mut self.pos_embed,
        ];
        for b in &mut self.blocks {
            ps.extend([
                &mut b.ln1.gamma,
                &mut b.ln1.beta,
                &mut b.qkv.weight,
                &mut b.qkv.bias,
                &mut b.proj.weight,
                &mut b.proj.bias,
                &mut b.ln2.gamma,
                &mut b.ln2.beta,
                &mut b.fc1.weight,
                &mut b.fc1.bias,
                &mut b.fc2.weight,
                &mut b.fc2.bias,
            ]);
        }
        ps.extend([
            &mut self.final_ln.gamma,
            &mut self.final_ln.beta,
            &mut self.head.weight,
            &mut self.head.bias,
        ]);
        ps
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        opts: ForwardOptions,
    ) -> Result<ForwardPass<'t>, ModelError> {
        let reg = |t: &Tensor| if opts.train_params { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        let param_vars: Vec<Var<'t>> = self.params().iter().map(|t| reg(t)).collect();

        let d = self.cfg.embed;
        let heads = self.cfg.heads;
        let hd = d / heads;
        let tokens = self.cfg.tokens() + 1;

        let ln = |x: Var<'t>, gamma: Var<'t>, beta: Var<'t>| -> Result<Var<'t>, TensorError> {
            x.layer_norm(LN_EPS)?.mul(gamma)?.add(beta)
        };

        // Patch embedding and class token.
        let patches = x.patchify(self.cfg.patch)?; // [T, C*p*p]
        let embedded = patches.matmul(param_vars[0])?.add(param_vars[1])?;
        let with_cls = concat(&[param_vars[2], embedded], 0)?;
        let mut h = with_cls.add(param_vars[3])?;

        let mut trace = Vec::new();
        let mut p = 4usize;
        for _ in 0..self.cfg.depth {
            let (ln1_g, ln1_b) = (param_vars[p], param_vars[p + 1]);
            let (qkv_w, qkv_b) = (param_vars[p + 2], param_vars[p + 3]);
            let (proj_w, proj_b) = (param_vars[p + 4], param_vars[p + 5]);
            let (ln2_g, ln2_b) = (param_vars[p + 6], param_vars[p + 7]);
            let (fc1_w, fc1_b) = (param_vars[p + 8], param_vars[p + 9]);
            let (fc2_w, fc2_b) = (param_vars[p + 10], param_vars[p + 11]);
            p += 12;

            // Self-attention on the pre-norm residual branch.
            let normed = ln(h, ln1_g, ln1_b)?;
            let qkv = normed.matmul(qkv_w)?.add(qkv_b)?; // [T, 3D]
            let split = |lo: usize| -> Result<Var<'t>, TensorError> {
                qkv.slice(&[(0, tokens), (lo * d, (lo + 1) * d)])?
                    .reshape(vec![tokens, heads, hd])?
                    .permute(&[1, 0, 2]) // [heads, T, hd]
            };
            let q = split(0)?;
            let k = split(1)?;
            let v = split(2)?;
            let scores = q
                .matmul(k.permute(&[0, 2, 1])?)?
                .mul_scalar(1.0 / (hd as Real).sqrt());
            let attn = scores.softmax()?; // [heads, T, T]
            if opts.record_attention {
                trace.push(attn.value());
            }
            let ctx = attn
                .matmul(v)? // [heads, T, hd]
                .permute(&[1, 0, 2])?
                .reshape(vec![tokens, d])?;
            let attn_out = ctx.matmul(proj_w)?.add(proj_b)?;
            h = h.add(attn_out)?;

            // MLP branch.
            let normed2 = ln(h, ln2_g, ln2_b)?;
            let mlp = normed2.matmul(fc1_w)?.add(fc1_b)?.gelu().matmul(fc2_w)?.add(fc2_b)?;
            h = h.add(mlp)?;
        }

        let (fln_g, fln_b) = (param_vars[p], param_vars[p + 1]);
        let (head_w, head_b) = (param_vars[p + 2], param_vars[p + 3]);
        let normed = ln(h, fln_g, fln_b)?;
        // Class-token representation is the feature vector g.
        let cls = normed.slice(&[(0, 1), (0, d)])?; // [1, D]
        let features = cls.reshape(vec![d])?;
        let logits = cls.matmul(head_w)?.add(head_b)?.reshape(vec![self.cfg.classes])?;

        Ok(ForwardPass {
            logits,
            features,
            param_vars: if opts.train_params { param_vars } else { Vec::new() },
            attention: if opts.record_attention { Some(AttentionTrace { layers: trace }) } else { None },
        })
    }
}

impl From<Vit> for Model {
    fn from(m: Vit) -> Model {
        Model::Vit(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ce_loss_var;
    use crate::tensor::finite_difference_check;

    #[test]
    fn token_arithmetic() {
        let cfg = VitConfig::new((3, 32, 32), 4, 9);
        assert_eq!(cfg.tokens(), 64);
        let vit = Vit::build(cfg).unwrap();
        assert_eq!(vit.pos_embed.shape(), &[65, 32]);
    }

    #[test]
    fn indivisible_patch_is_an_error() {
        let cfg = VitConfig { patch: 5, ..VitConfig::new((3, 32, 32), 4, 9) };
        assert!(matches!(Vit::build(cfg), Err(ModelError::IndivisiblePatch { .. })));
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let vit = Vit::build(VitConfig::new((3, 16, 16), 4, 33)).unwrap();
        let mut rng = Rng::new(1);
        let x = Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        let tape = Tape::new();
        let xv = tape.constant(x);
        let pass = vit
            .forward(&tape, xv, ForwardOptions { train_params: false, record_attention: true })
            .unwrap();
        let trace = pass.attention.unwrap();
        assert_eq!(trace.layers.len(), 2);
        for layer in &trace.layers {
            let t = layer.shape()[1];
            for row in layer.data().chunks(t) {
                let sum: Real = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "attention row sums to {sum}");
                assert!(row.iter().all(|&a| a >= 0.0));
            }
        }
    }

    #[test]
    fn permuting_tokens_and_positions_together_preserves_logits() {
        // Attention is permutation-equivariant; moving patch tokens together
        // with their positional embeddings must leave the class logits
        // unchanged.
        let cfg = VitConfig::new((1, 4, 4), 3, 5).with_dims(2, 1, 2, 8);
        let vit = Vit::build(cfg).unwrap();
        let mut rng = Rng::new(17);
        let x = Tensor::rand_uniform(&[1, 4, 4], 0.0, 1.0, &mut rng);
        let base = {
            let tape = Tape::new();
            let xv = tape.constant(x.clone());
            vit.forward(&tape, xv, ForwardOptions::default()).unwrap().logits.value()
        };

        // Swap patch tokens 0 and 3 (patches are 2x2 blocks of the 4x4
        // image) and swap pos embeddings rows 1 and 4 accordingly.
        let mut permuted = vit;
        let mut swapped = x.clone();
        {
            let d = swapped.data_mut();
            // patch 0 occupies rows 0..2, cols 0..2; patch 3 rows 2..4, cols 2..4.
            for dy in 0..2 {
                for dx in 0..2 {
                    d.swap(dy * 4 + dx, (2 + dy) * 4 + 2 + dx);
                }
            }
        }
        {
            let pe = &mut permuted.pos_embed;
            let dim = 8;
            let data = pe.data_mut();
            for j in 0..dim {
                data.swap(dim + j, 4 * dim + j);
            }
        }
        let swapped_logits = {
            let tape = Tape::new();
            let xv = tape.constant(swapped);
            permuted.forward(&tape, xv, ForwardOptions::default()).unwrap().logits.value()
        };
        assert!(
            base.max_abs_diff(&swapped_logits).unwrap() < 1e-9,
            "permutation changed logits"
        );
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let cfg = VitConfig::new((1, 8, 8), 3, 7).with_dims(4, 1, 2, 8);
        let vit = Vit::build(cfg).unwrap();
        let mut rng = Rng::new(8);
        let x = Tensor::rand_uniform(&[1, 8, 8], 0.05, 0.95, &mut rng);
        let err = finite_difference_check(
            |tape, v| {
                let pass = vit.forward(tape, v, ForwardOptions::default()).map_err(|e| match e {
                    ModelError::Tensor(t) => t,
                    other => panic!("unexpected error: {other}"),
                })?;
                ce_loss_var(pass.logits, 2)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "vit input gradcheck: {err}");
    }
}
