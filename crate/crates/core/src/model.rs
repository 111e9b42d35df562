//! Complete networks: tokenizer, task tokens, backbone and a head sharing
//! one parameter store.

use rand::Rng;

use crate::backbone::{BackboneOutput, ContainerMeta, FreezePolicy, Transformer, TransformerConfig, WeightContainer};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::heads::{ClassificationHead, ClassificationHeadConfig, SegmentationConfig, SegmentationPipeline};
use crate::tensor::{Element, ParamStore, Tape, Var};
use crate::tokenization::{PointTokenizer, PointTokenizerConfig, TaskToken, TokenSequence};

pub const TOKENIZER_PREFIX: &str = "point_tokenizer";
pub const TASK_PREFIX: &str = "task";
pub const HEAD_PREFIX: &str = "head";
pub const SEGMENTATION_PREFIX: &str = "segmentation";

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub backbone: TransformerConfig,
    pub tokenizer: PointTokenizerConfig,
    pub task_tokens: usize,
    pub head: ClassificationHeadConfig,
}

impl ClassifierConfig {
    pub fn new(backbone: TransformerConfig, classes: usize) -> Self {
        let width = backbone.width;
        Self {
            tokenizer: PointTokenizerConfig::new(width),
            task_tokens: 1,
            head: ClassificationHeadConfig::new(width, classes),
            backbone,
        }
    }
}

/// Every intermediate of one classifier forward pass.
#[derive(Clone, Debug)]
pub struct ClassifierPass {
    pub seq: TokenSequence,
    pub out: BackboneOutput,
    /// Final-LN CLS rows, `B×width`.
    pub cls: Var,
    pub logits: Var,
    pub proj: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct PointClassifier<T: Element = f32> {
    pub cfg: ClassifierConfig,
    pub store: ParamStore<T>,
    pub tokenizer: PointTokenizer,
    pub task: TaskToken,
    pub backbone: Transformer,
    pub head: ClassificationHead,
}

fn check_widths(backbone: &TransformerConfig, others: &[(&str, usize)]) -> Result<()> {
    for (what, w) in others {
        if *w != backbone.width {
            return Err(Error::Config(format!(
                "{what} width {w} differs from backbone width {}",
                backbone.width
            )));
        }
    }
    Ok(())
}

fn check_meta(meta: &ContainerMeta, cfg: &TransformerConfig) -> Result<()> {
    let have = meta.transformer_config();
    if (have.layers, have.width, have.heads, have.mlp_ratio) != (cfg.layers, cfg.width, cfg.heads, cfg.mlp_ratio) {
        return Err(Error::Config(format!(
            "weights describe layers={} width={} heads={} mlp_ratio={}, config asks for layers={} width={} heads={} mlp_ratio={}",
            have.layers, have.width, have.heads, have.mlp_ratio, cfg.layers, cfg.width, cfg.heads, cfg.mlp_ratio
        )));
    }
    Ok(())
}

impl<T: Element> PointClassifier<T> {
    /// Fresh random weights under the default frozen-backbone partition.
    pub fn new<R: Rng + ?Sized>(cfg: ClassifierConfig, rng: &mut R) -> Result<Self> {
        Self::with_store(ParamStore::new(), cfg, rng)
    }

    /// Builds on top of existing tensors (same-named tensors are reused).
    pub fn with_store<R: Rng + ?Sized>(mut store: ParamStore<T>, cfg: ClassifierConfig, rng: &mut R) -> Result<Self> {
        check_widths(
            &cfg.backbone,
            &[("tokenizer", cfg.tokenizer.width), ("head", cfg.head.width)],
        )?;
        let backbone = Transformer::new(&mut store, cfg.backbone.clone(), rng)?;
        let tokenizer = PointTokenizer::new(&mut store, TOKENIZER_PREFIX, cfg.tokenizer.clone(), rng)?;
        let task = TaskToken::new(&mut store, TASK_PREFIX, cfg.task_tokens, cfg.backbone.width, rng)?;
        let head = ClassificationHead::new(&mut store, HEAD_PREFIX, cfg.head.clone(), rng)?;
        let mut model = Self {
            cfg,
            store,
            tokenizer,
            task,
            backbone,
            head,
        };
        model.apply(FreezePolicy::default());
        Ok(model)
    }

    /// Starts from container tensors, after checking that its metadata
    /// matches the configured backbone.
    pub fn from_container<R: Rng + ?Sized>(c: &WeightContainer, cfg: ClassifierConfig, rng: &mut R) -> Result<Self> {
        check_meta(&c.meta, &cfg.backbone)?;
        Self::with_store(c.store.cast(), cfg, rng)
    }

    pub fn apply(&mut self, policy: FreezePolicy) {
        policy.apply(&mut self.store);
    }

    pub fn to_container(&self, source: &str) -> WeightContainer {
        WeightContainer::new(ContainerMeta::for_config(&self.cfg.backbone, source), self.store.cast())
    }

    /// Full forward pass. Dropout (backbone input and head) is active only
    /// when an rng is supplied.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, T>,
        clouds: &[&PointCloud],
        mut rng: Option<&mut R>,
    ) -> Result<ClassifierPass> {
        let seq = self.tokenizer.tokenize(tape, clouds, &self.task)?;
        let out = self.backbone.forward(tape, &seq, rng.as_deref_mut())?;
        let cls = ClassificationHead::cls_features(tape, &out, &seq)?;
        let logits = self.head.logits(tape, cls, rng)?;
        let proj = self.head.project(tape, cls)?;
        Ok(ClassifierPass {
            seq,
            out,
            cls,
            logits,
            proj,
        })
    }

    /// Arg-max class per cloud, evaluated in chunks of `batch`.
    pub fn predict(&self, clouds: &[&PointCloud], batch: usize) -> Result<Vec<usize>> {
        let mut preds = Vec::with_capacity(clouds.len());
        for chunk in clouds.chunks(batch.max(1)) {
            let mut tape = Tape::inference(&self.store);
            let pass = self.forward::<rand_chacha::ChaCha8Rng>(&mut tape, chunk, None)?;
            preds.extend(argmax_rows(tape.value(pass.logits), self.cfg.head.classes));
        }
        Ok(preds)
    }
}

/// Index of the largest entry in each row; ties go to the lower index.
pub fn argmax_rows<T: Element>(values: &[T], cols: usize) -> Vec<usize> {
    values
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmenterConfig {
    pub backbone: TransformerConfig,
    pub pipeline: SegmentationConfig,
    pub task_tokens: usize,
}

#[derive(Clone, Debug)]
pub struct PointSegmenter<T: Element = f32> {
    pub cfg: SegmenterConfig,
    pub store: ParamStore<T>,
    pub task: TaskToken,
    pub backbone: Transformer,
    pub pipeline: SegmentationPipeline,
}

impl<T: Element> PointSegmenter<T> {
    pub fn new<R: Rng + ?Sized>(cfg: SegmenterConfig, rng: &mut R) -> Result<Self> {
        Self::with_store(ParamStore::new(), cfg, rng)
    }

    pub fn with_store<R: Rng + ?Sized>(mut store: ParamStore<T>, cfg: SegmenterConfig, rng: &mut R) -> Result<Self> {
        check_widths(&cfg.backbone, &[("segmentation", cfg.pipeline.width)])?;
        let backbone = Transformer::new(&mut store, cfg.backbone.clone(), rng)?;
        let task = TaskToken::new(&mut store, TASK_PREFIX, cfg.task_tokens, cfg.backbone.width, rng)?;
        let pipeline = SegmentationPipeline::new(&mut store, SEGMENTATION_PREFIX, cfg.pipeline.clone(), rng)?;
        let mut model = Self {
            cfg,
            store,
            task,
            backbone,
            pipeline,
        };
        model.apply(FreezePolicy::default());
        Ok(model)
    }

    pub fn from_container<R: Rng + ?Sized>(c: &WeightContainer, cfg: SegmenterConfig, rng: &mut R) -> Result<Self> {
        check_meta(&c.meta, &cfg.backbone)?;
        Self::with_store(c.store.cast(), cfg, rng)
    }

    pub fn apply(&mut self, policy: FreezePolicy) {
        policy.apply(&mut self.store);
    }

    pub fn to_container(&self, source: &str) -> WeightContainer {
        WeightContainer::new(ContainerMeta::for_config(&self.cfg.backbone, source), self.store.cast())
    }

    /// `(B·A)×C` per-point logits.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, T>,
        clouds: &[&PointCloud],
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let levels = self.pipeline.levels::<T>(clouds)?;
        self.pipeline.segment(tape, &levels, &self.task, &self.backbone, rng)
    }

    /// Per-point arg-max labels for each cloud.
    pub fn predict(&self, clouds: &[&PointCloud], batch: usize) -> Result<Vec<Vec<usize>>> {
        let a = self.cfg.pipeline.input_points;
        let mut preds = Vec::with_capacity(clouds.len());
        for chunk in clouds.chunks(batch.max(1)) {
            let mut tape = Tape::inference(&self.store);
            let logits = self.forward::<rand_chacha::ChaCha8Rng>(&mut tape, chunk, None)?;
            let flat = argmax_rows(tape.value(logits), self.cfg.pipeline.classes);
            preds.extend(flat.chunks(a).map(<[usize]>::to_vec));
        }
        Ok(preds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ClassifierConfig {
        let bb = TransformerConfig {
            layers: 1,
            width: 16,
            heads: 2,
            ..TransformerConfig::small()
        };
        let mut cfg = ClassifierConfig::new(bb, 3);
        cfg.tokenizer.patches = 4;
        cfg.tokenizer.neighbors = 4;
        cfg.tokenizer.hidden = [8, 8, 8];
        cfg.tokenizer.pos_hidden = 8;
        cfg.head.hidden = 8;
        cfg
    }

    #[test]
    fn container_round_trip_keeps_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = PointClassifier::<f32>::new(tiny(), &mut rng).unwrap();
        let c = WeightContainer::from_bytes(&m.to_container("test").to_bytes().unwrap()).unwrap();
        let back = PointClassifier::<f32>::from_container(&c, tiny(), &mut rng).unwrap();
        for (a, b) in m.store.iter().zip(back.store.iter()) {
            assert_eq!(a.0, b.0);
            assert_eq!(a.1.data(), b.1.data());
            assert_eq!(a.1.requires_grad(), b.1.requires_grad());
        }
        let mut wrong = tiny();
        wrong.backbone.layers = 2;
        assert!(matches!(
            PointClassifier::<f32>::from_container(&c, wrong, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax_rows(&[1.0f32, 1.0, 0.0, 0.0, 2.0, 2.0], 3), vec![0, 1]);
    }
}
