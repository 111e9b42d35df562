//! Run configuration: a line-oriented `key = value` file with `#`
//! comments, overridable key by key.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::analysis::Estimator;
use crate::backbone::{FreezePolicy, TransformerConfig};
use crate::error::{Error, Result};
use crate::heads::{ClassificationHeadConfig, SegmentationConfig, DEFAULT_LAMBDA, DEFAULT_TEMPERATURE};
use crate::model::{ClassifierConfig, SegmenterConfig};
use crate::tokenization::PointTokenizerConfig;
use crate::training::{AdamWConfig, LrSchedule, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Classify,
    Segment,
    Fewshot,
    Align,
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(TaskKind::Classify),
            "segment" => Ok(TaskKind::Segment),
            "fewshot" => Ok(TaskKind::Fewshot),
            "align" => Ok(TaskKind::Align),
            other => Err(Error::Config(format!(
                "unknown task `{other}` (classify, segment, fewshot, align)"
            ))),
        }
    }
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Classify => "classify",
            TaskKind::Segment => "segment",
            TaskKind::Fewshot => "fewshot",
            TaskKind::Align => "align",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    KWayNShot,
    SixteenShot,
}

/// Every recognised key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("task", "classify | segment | fewshot | align"),
    ("data", "dataset manifest"),
    ("weights", "EPCLWGT1 container to start from"),
    ("textbank", "EPCL-TEXTBANK file enabling the contrastive term"),
    ("out", "output directory"),
    ("seed", "random seed (required)"),
    ("freeze", "frozen-backbone | full-finetune | all-frozen"),
    ("epochs", "training epochs"),
    ("batch_size", "samples per optimizer step"),
    ("max_steps", "stop after this many optimizer steps"),
    ("lr", "AdamW learning rate"),
    ("weight_decay", "AdamW decoupled weight decay"),
    ("beta1", "AdamW first-moment decay"),
    ("beta2", "AdamW second-moment decay"),
    ("eps", "AdamW epsilon"),
    ("schedule", "constant | cosine"),
    ("min_lr", "final rate of the cosine schedule"),
    ("lambda", "contrastive loss weight"),
    ("temperature", "contrastive softmax temperature"),
    ("layers", "transformer blocks"),
    ("width", "token width"),
    ("heads", "attention heads"),
    ("mlp_ratio", "block MLP expansion"),
    ("patches", "point patches per cloud"),
    ("neighbors", "points per patch"),
    ("tokenizer_hidden", "tokenizer MLP widths, three comma-separated values"),
    ("pos_hidden", "positional MLP hidden width"),
    ("task_tokens", "number of task tokens"),
    ("head_hidden", "classification head hidden width"),
    ("head_dropout", "classification head dropout"),
    ("points", "points per cloud for segmentation"),
    ("stages", "segmentation stage point counts, three comma-separated values"),
    ("seg_neighbors", "neighbors per transition-down group"),
    ("seg_stem", "segmentation per-point stem width"),
    ("seg_widths", "widths after the first two transition-down stages"),
    ("seg_classes", "per-point classes"),
    ("protocol", "kway | 16shot"),
    ("way", "few-shot classes per episode"),
    ("shot", "few-shot training samples per class"),
    ("layer", "depth whose CLS features are exported"),
    ("estimator", "pearson | cosine"),
    ("image_patch", "image patch size for alignment"),
    ("source", "source tag written into saved weights"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub task: TaskKind,
    pub data: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub textbank: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub freeze: FreezePolicy,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_steps: Option<usize>,
    pub optimizer: AdamWConfig,
    pub schedule: String,
    pub min_lr: f64,
    pub lambda: f64,
    pub temperature: f64,
    pub backbone: TransformerConfig,
    pub patches: usize,
    pub neighbors: usize,
    pub tokenizer_hidden: [usize; 3],
    pub pos_hidden: usize,
    pub task_tokens: usize,
    pub head_hidden: usize,
    pub head_dropout: f64,
    pub points: usize,
    pub stages: Option<[usize; 3]>,
    pub seg_neighbors: usize,
    pub seg_stem: usize,
    pub seg_widths: [usize; 2],
    pub seg_classes: usize,
    pub protocol: Protocol,
    pub way: usize,
    pub shot: usize,
    pub layer: usize,
    pub estimator: Estimator,
    pub image_patch: usize,
    pub source: String,
}

impl Default for TaskConfig {
    fn default() -> Self {
        let tok = PointTokenizerConfig::new(128);
        Self {
            task: TaskKind::Classify,
            data: None,
            weights: None,
            textbank: None,
            out: PathBuf::from("out"),
            seed: None,
            freeze: FreezePolicy::default(),
            epochs: 10,
            batch_size: 32,
            max_steps: None,
            optimizer: AdamWConfig::default(),
            schedule: "constant".into(),
            min_lr: 0.0,
            lambda: DEFAULT_LAMBDA,
            temperature: DEFAULT_TEMPERATURE,
            backbone: TransformerConfig::small(),
            patches: tok.patches,
            neighbors: tok.neighbors,
            tokenizer_hidden: tok.hidden,
            pos_hidden: tok.pos_hidden,
            task_tokens: 1,
            head_hidden: 256,
            head_dropout: crate::heads::HEAD_DROPOUT,
            points: 4096,
            stages: None,
            seg_neighbors: 16,
            seg_stem: 32,
            seg_widths: [64, 128],
            seg_classes: 2,
            protocol: Protocol::KWayNShot,
            way: 5,
            shot: 10,
            layer: 0,
            estimator: Estimator::Pearson,
            image_patch: 8,
            source: "epcl".into(),
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_list<const N: usize>(key: &str, value: &str) -> Result<[usize; N]> {
    let items = value
        .split(',')
        .map(|s| parse::<usize>(key, s.trim()))
        .collect::<Result<Vec<_>>>()?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("`{key}` needs {N} comma-separated values, got `{value}`")))
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl TaskConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "task" => self.task = v.parse()?,
            "data" => self.data = Some(v.into()),
            "weights" => self.weights = Some(v.into()),
            "textbank" => self.textbank = Some(v.into()),
            "out" => self.out = v.into(),
            "seed" => self.seed = Some(parse(key, v)?),
            "freeze" => self.freeze = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "max_steps" => self.max_steps = Some(parse(key, v)?),
            "lr" => self.optimizer.lr = parse(key, v)?,
            "weight_decay" => self.optimizer.weight_decay = parse(key, v)?,
            "beta1" => self.optimizer.betas.0 = parse(key, v)?,
            "beta2" => self.optimizer.betas.1 = parse(key, v)?,
            "eps" => self.optimizer.eps = parse(key, v)?,
            "schedule" => match v {
                "constant" | "cosine" => self.schedule = v.into(),
                _ => return Err(Error::Config(format!("unknown schedule `{v}` (constant, cosine)"))),
            },
            "min_lr" => self.min_lr = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "temperature" => self.temperature = parse(key, v)?,
            "layers" => self.backbone.layers = parse(key, v)?,
            "width" => self.backbone.width = parse(key, v)?,
            "heads" => self.backbone.heads = parse(key, v)?,
            "mlp_ratio" => self.backbone.mlp_ratio = parse(key, v)?,
            "patches" => self.patches = parse(key, v)?,
            "neighbors" => self.neighbors = parse(key, v)?,
            "tokenizer_hidden" => self.tokenizer_hidden = parse_list(key, v)?,
            "pos_hidden" => self.pos_hidden = parse(key, v)?,
            "task_tokens" => self.task_tokens = parse(key, v)?,
            "head_hidden" => self.head_hidden = parse(key, v)?,
            "head_dropout" => self.head_dropout = parse(key, v)?,
            "points" => self.points = parse(key, v)?,
            "stages" => self.stages = Some(parse_list(key, v)?),
            "seg_neighbors" => self.seg_neighbors = parse(key, v)?,
            "seg_stem" => self.seg_stem = parse(key, v)?,
            "seg_widths" => self.seg_widths = parse_list(key, v)?,
            "seg_classes" => self.seg_classes = parse(key, v)?,
            "protocol" => {
                self.protocol = match v {
                    "kway" => Protocol::KWayNShot,
                    "16shot" => Protocol::SixteenShot,
                    _ => return Err(Error::Config(format!("unknown protocol `{v}` (kway, 16shot)"))),
                }
            }
            "way" => self.way = parse(key, v)?,
            "shot" => self.shot = parse(key, v)?,
            "layer" => self.layer = parse(key, v)?,
            "estimator" => self.estimator = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "image_patch" => self.image_patch = parse(key, v)?,
            "source" => self.source = v.into(),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a config file on top of `self`. Relative paths inside it
    /// stay relative to the working directory.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {}", no + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Seed presence and existence of every referenced input path.
    pub fn validate(&self) -> Result<u64> {
        let seed = self.seed.ok_or_else(|| Error::Config("`seed` is required".into()))?;
        for (key, p) in [("data", &self.data), ("weights", &self.weights), ("textbank", &self.textbank)] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(Error::Config(format!("`{key}` path {} does not exist", p.display())));
                }
            }
        }
        if self.data.is_none() {
            return Err(Error::Config("`data` is required".into()));
        }
        self.backbone.validate()?;
        Ok(seed)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let seed = self.seed.ok_or_else(|| Error::Config("`seed` is required".into()))?;
        let mut t = TrainConfig::new(seed);
        t.epochs = self.epochs;
        t.batch_size = self.batch_size;
        t.max_steps = self.max_steps;
        t.optimizer = self.optimizer;
        t.lambda = self.lambda;
        t.temperature = self.temperature;
        t.schedule = match self.schedule.as_str() {
            "cosine" => LrSchedule::Cosine {
                total_steps: self.max_steps.unwrap_or(0),
                min_lr: self.min_lr,
            },
            _ => LrSchedule::Constant,
        };
        Ok(t)
    }

    pub fn classifier(&self, classes: usize, text_dim: Option<usize>) -> ClassifierConfig {
        let width = self.backbone.width;
        ClassifierConfig {
            backbone: self.backbone.clone(),
            tokenizer: PointTokenizerConfig {
                patches: self.patches,
                neighbors: self.neighbors,
                hidden: self.tokenizer_hidden,
                pos_hidden: self.pos_hidden,
                width,
                start: 0,
            },
            task_tokens: self.task_tokens,
            head: ClassificationHeadConfig {
                width,
                hidden: self.head_hidden,
                classes,
                dropout: self.head_dropout,
                text_dim,
            },
        }
    }

    pub fn segmenter(&self) -> SegmenterConfig {
        let mut p = SegmentationConfig::halving(self.points, self.backbone.width, self.seg_classes);
        if let Some(s) = self.stages {
            p.stage_points = s;
        }
        p.neighbors = self.seg_neighbors;
        p.stem = self.seg_stem;
        p.widths = self.seg_widths;
        SegmenterConfig {
            backbone: self.backbone.clone(),
            pipeline: p,
            task_tokens: self.task_tokens,
        }
    }

    /// Canonical `key = value` rendering, every key included.
    pub fn to_text(&self) -> String {
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            if !v.is_empty() {
                let _ = writeln!(s, "{k} = {v}");
            }
        };
        kv("task", self.task.as_str().into());
        kv("data", opt(&self.data));
        kv("weights", opt(&self.weights));
        kv("textbank", opt(&self.textbank));
        kv("out", self.out.display().to_string());
        kv("seed", self.seed.map(|s| s.to_string()).unwrap_or_default());
        kv("freeze", self.freeze.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("max_steps", self.max_steps.map(|s| s.to_string()).unwrap_or_default());
        kv("lr", self.optimizer.lr.to_string());
        kv("weight_decay", self.optimizer.weight_decay.to_string());
        kv("beta1", self.optimizer.betas.0.to_string());
        kv("beta2", self.optimizer.betas.1.to_string());
        kv("eps", self.optimizer.eps.to_string());
        kv("schedule", self.schedule.clone());
        kv("min_lr", self.min_lr.to_string());
        kv("lambda", self.lambda.to_string());
        kv("temperature", self.temperature.to_string());
        kv("layers", self.backbone.layers.to_string());
        kv("width", self.backbone.width.to_string());
        kv("heads", self.backbone.heads.to_string());
        kv("mlp_ratio", self.backbone.mlp_ratio.to_string());
        kv("patches", self.patches.to_string());
        kv("neighbors", self.neighbors.to_string());
        kv("tokenizer_hidden", join(&self.tokenizer_hidden));
        kv("pos_hidden", self.pos_hidden.to_string());
        kv("task_tokens", self.task_tokens.to_string());
        kv("head_hidden", self.head_hidden.to_string());
        kv("head_dropout", self.head_dropout.to_string());
        kv("points", self.points.to_string());
        kv("stages", self.stages.map(|s| join(&s)).unwrap_or_default());
        kv("seg_neighbors", self.seg_neighbors.to_string());
        kv("seg_stem", self.seg_stem.to_string());
        kv("seg_widths", join(&self.seg_widths));
        kv("seg_classes", self.seg_classes.to_string());
        kv(
            "protocol",
            match self.protocol {
                Protocol::KWayNShot => "kway".into(),
                Protocol::SixteenShot => "16shot".into(),
            },
        );
        kv("way", self.way.to_string());
        kv("shot", self.shot.to_string());
        kv("layer", self.layer.to_string());
        kv(
            "estimator",
            match self.estimator {
                Estimator::Pearson => "pearson".into(),
                Estimator::Cosine => "cosine".into(),
            },
        );
        kv("image_patch", self.image_patch.to_string());
        kv("source", self.source.clone());
        s
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render() {
        let mut c = TaskConfig::default();
        c.apply_text("# run\nseed = 7\nlr = 0.001  # faster\ntokenizer_hidden = 8, 16, 32\n\n").unwrap();
        assert_eq!(c.seed, Some(7));
        assert_eq!(c.optimizer.lr, 0.001);
        assert_eq!(c.tokenizer_hidden, [8, 16, 32]);
        let mut back = TaskConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let mut c = TaskConfig::default();
        let e = c.apply_text("seed = 1\nbogus = 2\n").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("bogus"), "{e}");
        assert!(c.apply_text("epochs = many").is_err());
        assert!(c.apply_text("just words").is_err());
        assert!(TaskConfig::default().validate().is_err());
    }
}
