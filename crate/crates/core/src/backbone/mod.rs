//! Pre-LN transformer encoder, its weight container and freezing policies.

mod container;
mod freeze;

pub use container::{ContainerMeta, WeightContainer, DTYPE_F32, DTYPE_META, FORMAT_VERSION, MAGIC};
pub use freeze::FreezePolicy;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Linear};
use crate::tensor::{Element, ParamStore, Tape, Var};
use crate::tokenization::TokenSequence;

/// Prefix shared by every backbone tensor name.
pub const BACKBONE_PREFIX: &str = "backbone.";

/// Rate of the dropout applied to the token sequence before block 1.
pub const INPUT_DROPOUT: f64 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub input_dropout: f64,
}

impl TransformerConfig {
    /// Desk-scale default: 4 layers, width 128, 4 heads.
    pub fn small() -> Self {
        Self {
            layers: 4,
            width: 128,
            heads: 4,
            mlp_ratio: 4,
            input_dropout: INPUT_DROPOUT,
        }
    }

    /// ViT-B sized: 12 layers, width 768, 12 heads.
    pub fn base() -> Self {
        Self {
            layers: 12,
            width: 768,
            heads: 12,
            ..Self::small()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.input_dropout) {
            return Err(Error::Config(format!("input dropout {} not in [0, 1)", self.input_dropout)));
        }
        Ok(())
    }

    /// Every backbone tensor name with its shape, in registration order.
    pub fn expected_tensors(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.width;
        let hidden = d * self.mlp_ratio;
        let mut out = Vec::new();
        for l in 0..self.layers {
            let p = format!("{BACKBONE_PREFIX}blocks.{l}");
            out.push((format!("{p}.ln1.gamma"), vec![d]));
            out.push((format!("{p}.ln1.beta"), vec![d]));
            for proj in ["q", "k", "v", "out"] {
                out.push((format!("{p}.attn.{proj}.weight"), vec![d, d]));
                out.push((format!("{p}.attn.{proj}.bias"), vec![d]));
            }
            out.push((format!("{p}.ln2.gamma"), vec![d]));
            out.push((format!("{p}.ln2.beta"), vec![d]));
            out.push((format!("{p}.mlp.fc1.weight"), vec![d, hidden]));
            out.push((format!("{p}.mlp.fc1.bias"), vec![hidden]));
            out.push((format!("{p}.mlp.fc2.weight"), vec![hidden, d]));
            out.push((format!("{p}.mlp.fc2.bias"), vec![d]));
        }
        out.push((format!("{BACKBONE_PREFIX}ln_post.gamma"), vec![d]));
        out.push((format!("{BACKBONE_PREFIX}ln_post.beta"), vec![d]));
        out
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    /// `x + MSA(LN(x))` then `x + MLP(LN(x))`.
    pub fn forward<T: Element>(&self, tape: &mut Tape<'_, T>, x: Var, seq_len: usize, heads: usize) -> Result<Var> {
        let h = self.ln1.forward(tape, x)?;
        let q = self.q.forward(tape, h)?;
        let k = self.k.forward(tape, h)?;
        let v = self.v.forward(tape, h)?;
        let a = tape.attention(q, k, v, seq_len, heads)?;
        let a = self.out.forward(tape, a)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, x)?;
        let h = self.fc1.forward(tape, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, h)?;
        tape.add(x, h)
    }
}

/// Per-layer features from a forward pass.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    /// `L + 1` entries: the block input followed by each block's output.
    pub layers: Vec<Var>,
    /// Final LayerNorm applied to the last layer.
    pub normed: Var,
}

#[derive(Clone, Debug)]
pub struct Transformer {
    pub cfg: TransformerConfig,
    pub blocks: Vec<Block>,
    pub ln_post: LayerNorm,
}

impl Transformer {
    /// Registers (or re-binds, if already present) all backbone tensors.
    pub fn new<T: Element, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: TransformerConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let hidden = d * cfg.mlp_ratio;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("{BACKBONE_PREFIX}blocks.{l}");
            let lin = |store: &mut ParamStore<T>, rng: &mut R, name: &str, i: usize, o: usize| {
                Linear::with_init(store, &format!("{p}.{name}"), i, o, Init::FanIn, true, rng)
            };
            blocks.push(Block {
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), d, rng)?,
                q: lin(store, rng, "attn.q", d, d)?,
                k: lin(store, rng, "attn.k", d, d)?,
                v: lin(store, rng, "attn.v", d, d)?,
                out: lin(store, rng, "attn.out", d, d)?,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), d, rng)?,
                fc1: lin(store, rng, "mlp.fc1", d, hidden)?,
                fc2: lin(store, rng, "mlp.fc2", hidden, d)?,
            });
        }
        let ln_post = LayerNorm::new(store, &format!("{BACKBONE_PREFIX}ln_post"), d, rng)?;
        Ok(Self { cfg, blocks, ln_post })
    }

    /// Runs a tokenized batch. Dropout on the input sequence is active
    /// only when an rng is supplied.
    pub fn forward<T: Element, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, T>,
        seq: &TokenSequence,
        rng: Option<&mut R>,
    ) -> Result<BackboneOutput> {
        if seq.width != self.cfg.width {
            return Err(Error::Config(format!(
                "token width {} does not match backbone width {}",
                seq.width, self.cfg.width
            )));
        }
        let x = seq.embedded(tape)?;
        self.forward_embedded(tape, x, seq.len, rng)
    }

    /// Same as [`Transformer::forward`] on an already-embedded
    /// `(B·seq_len)×width` input.
    pub fn forward_embedded<T: Element, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        seq_len: usize,
        rng: Option<&mut R>,
    ) -> Result<BackboneOutput> {
        let cols = tape.shape(x).last().copied().unwrap_or(0);
        if cols != self.cfg.width {
            return Err(Error::Config(format!(
                "token width {cols} does not match backbone width {}",
                self.cfg.width
            )));
        }
        let mut x = tape.dropout(x, self.cfg.input_dropout, rng)?;
        let mut layers = Vec::with_capacity(self.blocks.len() + 1);
        layers.push(x);
        for block in &self.blocks {
            x = block.forward(tape, x, seq_len, self.cfg.heads)?;
            layers.push(x);
        }
        let normed = self.ln_post.forward(tape, x)?;
        Ok(BackboneOutput { layers, normed })
    }

    pub fn param_ids(&self, store: &ParamStore<impl Element>) -> Vec<crate::tensor::ParamId> {
        store
            .ids()
            .filter(|&id| store.name(id).starts_with(BACKBONE_PREFIX))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degenerate_zero_layers_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let cfg = TransformerConfig {
            layers: 0,
            width: 4,
            heads: 2,
            mlp_ratio: 2,
            input_dropout: 0.3,
        };
        let tf = Transformer::new(&mut store, cfg, &mut rng).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::from_fn(vec![3, 4], |i| i as f64 * 0.1));
        let out = tf.forward_embedded::<f64, ChaCha8Rng>(&mut tape, x, 3, None).unwrap();
        assert_eq!(out.layers.len(), 1);
        assert_eq!(tape.value(out.layers[0]), tape.value(x));
    }

    #[test]
    fn zeroed_output_projections_make_blocks_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f32>::new();
        let cfg = TransformerConfig {
            layers: 2,
            width: 8,
            heads: 2,
            mlp_ratio: 2,
            input_dropout: 0.0,
        };
        let tf = Transformer::new(&mut store, cfg, &mut rng).unwrap();
        for b in &tf.blocks {
            for lin in [&b.out, &b.fc2] {
                store.get_mut(lin.weight).data_mut().fill(0.0);
                store.get_mut(lin.bias.unwrap()).data_mut().fill(0.0);
            }
        }
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::from_fn(vec![6, 8], |i| (i as f32 * 0.37).sin()));
        let out = tf.forward_embedded::<f32, ChaCha8Rng>(&mut tape, x, 3, None).unwrap();
        assert_eq!(out.layers.len(), 3);
        for l in &out.layers {
            assert_eq!(tape.value(*l), tape.value(x));
        }
    }

    #[test]
    fn width_mismatch_and_bad_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f32>::new();
        let mut cfg = TransformerConfig::small();
        cfg.width = 10;
        cfg.heads = 3;
        assert!(matches!(Transformer::new(&mut store, cfg, &mut rng), Err(Error::Config(_))));
        let cfg = TransformerConfig {
            layers: 1,
            width: 8,
            heads: 2,
            mlp_ratio: 1,
            input_dropout: 0.0,
        };
        let tf = Transformer::new(&mut store, cfg, &mut rng).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::zeros(vec![2, 6]));
        assert!(matches!(
            tf.forward_embedded::<f32, ChaCha8Rng>(&mut tape, x, 2, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn expected_tensors_match_registration() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f32>::new();
        let cfg = TransformerConfig {
            layers: 2,
            width: 8,
            heads: 2,
            mlp_ratio: 3,
            input_dropout: 0.3,
        };
        Transformer::new(&mut store, cfg.clone(), &mut rng).unwrap();
        let got: Vec<_> = store.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
        assert_eq!(got, cfg.expected_tensors());
    }
}
