//! Task heads and their losses.

mod segmentation;

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

pub use segmentation::{SegmentationConfig, SegmentationPipeline, SegmentationLevels};

use crate::backbone::BackboneOutput;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{Element, ParamStore, Tape, Var};
use crate::tokenization::TokenSequence;

pub const HEAD_DROPOUT: f64 = 0.2;
pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationHeadConfig {
    pub width: usize,
    pub hidden: usize,
    pub classes: usize,
    pub dropout: f64,
    /// Width of the text features the contrastive branch projects onto.
    pub text_dim: Option<usize>,
}

impl ClassificationHeadConfig {
    pub fn new(width: usize, classes: usize) -> Self {
        Self {
            width,
            hidden: 256,
            classes,
            dropout: HEAD_DROPOUT,
            text_dim: None,
        }
    }
}

/// Three-layer MLP over the normalized CLS feature, plus an optional
/// projection into text-feature space.
#[derive(Clone, Debug)]
pub struct ClassificationHead {
    pub cfg: ClassificationHeadConfig,
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
    proj: Option<Linear>,
}

impl ClassificationHead {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: ClassificationHeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.classes == 0 {
            return Err(Error::Config("classification head needs at least one class".into()));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::Config(format!("head dropout {} outside [0, 1)", cfg.dropout)));
        }
        let proj = match cfg.text_dim {
            Some(t) => Some(Linear::new(store, &format!("{prefix}.proj"), cfg.width, t, rng)?),
            None => None,
        };
        Ok(Self {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), cfg.width, cfg.hidden, rng)?,
            fc2: Linear::new(store, &format!("{prefix}.fc2"), cfg.hidden, cfg.hidden, rng)?,
            fc3: Linear::new(store, &format!("{prefix}.fc3"), cfg.hidden, cfg.classes, rng)?,
            proj,
            cfg,
        })
    }

    pub fn fc3(&self) -> &Linear {
        &self.fc3
    }

    /// Rows of the final-LN output at each sample's CLS position.
    pub fn cls_features<T: Element>(
        tape: &mut Tape<'_, T>,
        out: &BackboneOutput,
        seq: &TokenSequence,
    ) -> Result<Var> {
        tape.gather_rows(out.normed, &seq.cls_rows())
    }

    /// `B×width -> B×C`. Dropout runs only when an rng is supplied.
    pub fn logits<T: Element, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, T>,
        cls: Var,
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        let p = self.cfg.dropout;
        let h = self.fc1.forward(tape, cls)?;
        let h = tape.relu(h);
        let h = tape.dropout(h, p, rng.as_deref_mut())?;
        let h = self.fc2.forward(tape, h)?;
        let h = tape.relu(h);
        let h = tape.dropout(h, p, rng.as_deref_mut())?;
        self.fc3.forward(tape, h)
    }

    /// Logits straight from a backbone pass.
    pub fn classify<T: Element, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, T>,
        out: &BackboneOutput,
        seq: &TokenSequence,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let cls = Self::cls_features(tape, out, seq)?;
        self.logits(tape, cls, rng)
    }

    /// `B×width -> B×text_dim`, or `None` without a text branch.
    pub fn project<T: Element>(&self, tape: &mut Tape<'_, T>, cls: Var) -> Result<Option<Var>> {
        self.proj.as_ref().map(|p| p.forward(tape, cls)).transpose()
    }
}

/// Unit-norm text features, one row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeatureBank {
    pub names: Vec<String>,
    pub dim: usize,
    /// Row-major `C×dim`.
    pub vectors: Vec<f32>,
    pub provenance: String,
}

const BANK_MAGIC: &str = "EPCL-TEXTBANK";

impl TextFeatureBank {
    /// Normalizes each row to unit length; zero rows are rejected.
    pub fn new(names: Vec<String>, dim: usize, mut vectors: Vec<f32>, provenance: impl Into<String>) -> Result<Self> {
        if dim == 0 || vectors.len() != names.len() * dim {
            return Err(Error::shape("text bank", &[names.len(), dim], &[vectors.len()]));
        }
        for (name, row) in names.iter().zip(vectors.chunks_mut(dim)) {
            let norm = row.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
            if !norm.is_finite() || norm == 0.0 {
                return Err(Error::format(name.clone(), "text feature has zero or non-finite norm"));
            }
            // Rows that are already unit length stay bit-identical.
            if (norm - 1.0).abs() > 4.0 * f64::from(f32::EPSILON) {
                row.iter_mut().for_each(|v| *v = (f64::from(*v) / norm) as f32);
            }
        }
        Ok(Self {
            names,
            dim,
            vectors,
            provenance: provenance.into(),
        })
    }

    pub fn classes(&self) -> usize {
        self.names.len()
    }

    pub fn row(&self, c: usize) -> &[f32] {
        &self.vectors[c * self.dim..(c + 1) * self.dim]
    }

    pub fn parse(text: &str, provenance: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::format(None, "empty text bank"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let [magic, version, c, d] = fields.as_slice() else {
            return Err(Error::format(None, format!("bad text bank header `{header}`")));
        };
        if *magic != BANK_MAGIC || *version != "v1" {
            return Err(Error::format(None, format!("bad text bank header `{header}`")));
        }
        let parse_n = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::format(None, format!("bad count `{s}` in text bank header")))
        };
        let (c, d) = (parse_n(c)?, parse_n(d)?);
        let mut names = Vec::with_capacity(c);
        let mut vectors = Vec::with_capacity(c * d);
        for line in lines {
            let mut parts = line.split_whitespace();
            let name = parts.next().unwrap_or_default().to_string();
            let row = parts
                .map(|t| t.parse::<f32>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::format(name.clone(), format!("bad float: {e}")))?;
            if row.len() != d {
                return Err(Error::format(name, format!("expected {d} values, found {}", row.len())));
            }
            names.push(name);
            vectors.extend(row);
        }
        if names.len() != c {
            return Err(Error::format(None, format!("header declares {c} classes, found {}", names.len())));
        }
        Self::new(names, d, vectors, provenance)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{BANK_MAGIC} v1 {} {}\n", self.classes(), self.dim);
        for (c, name) in self.names.iter().enumerate() {
            s.push_str(name);
            for v in self.row(c) {
                let _ = write!(s, " {v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Cross-entropy over `normalize(proj) · bankᵀ / temperature`.
pub fn contrastive_loss<T: Element>(
    tape: &mut Tape<'_, T>,
    proj: Var,
    labels: &[usize],
    bank: &TextFeatureBank,
    temperature: f64,
) -> Result<Var> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let shape = tape.shape(proj).to_vec();
    if shape.len() != 2 || shape[1] != bank.dim {
        return Err(Error::shape("contrastive_loss", &shape, &[bank.classes(), bank.dim]));
    }
    let (c, d) = (bank.classes(), bank.dim);
    let mut bank_t = vec![T::zero(); d * c];
    for k in 0..c {
        for (j, &v) in bank.row(k).iter().enumerate() {
            bank_t[j * c + k] = T::from_f64_lossy(f64::from(v));
        }
    }
    let bank_t = tape.constant(vec![d, c], bank_t)?;
    let normed = tape.l2_normalize_rows(proj);
    let sim = tape.matmul(normed, bank_t)?;
    let logits = tape.scale(sim, T::from_f64_lossy(1.0 / temperature));
    tape.cross_entropy(logits, labels)
}

/// `ce + λ·contrastive`. A positive λ without a contrastive term means the
/// text bank is missing.
pub fn total_classification_loss<T: Element>(
    tape: &mut Tape<'_, T>,
    ce: Var,
    contrastive: Option<Var>,
    lambda: f64,
) -> Result<Var> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::Config(format!("contrastive weight must be non-negative, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(ce);
    }
    let Some(con) = contrastive else {
        return Err(Error::Config(
            "contrastive weight is positive but no text feature bank was supplied".into(),
        ));
    };
    let weighted = tape.scale(con, T::from_f64_lossy(lambda));
    tape.add(ce, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn orthogonal_bank(c: usize) -> TextFeatureBank {
        let d = c + 1;
        let mut v = vec![0.0f32; c * d];
        for k in 0..c {
            v[k * d + k] = 1.0;
        }
        TextFeatureBank::new((0..c).map(|k| format!("c{k}")).collect(), d, v, "test").unwrap()
    }

    #[test]
    fn orthogonal_projection_gives_log_c() {
        let bank = orthogonal_bank(4);
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let mut p = vec![0.0; 5];
        p[4] = 3.0;
        let proj = tape.constant(vec![1, 5], p).unwrap();
        let loss = contrastive_loss(&mut tape, proj, &[2], &bank, 0.07).unwrap();
        assert!((tape.value(loss)[0] - 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn aligned_projection_has_small_loss() {
        let bank = orthogonal_bank(3);
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let proj = tape.constant(vec![1, 4], vec![0.0, 2.0, 0.0, 0.0]).unwrap();
        let loss = contrastive_loss(&mut tape, proj, &[1], &bank, 0.01).unwrap();
        assert!(tape.value(loss)[0] < 1e-6);
    }

    #[test]
    fn lambda_rules() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let ce = tape.constant(vec![1], vec![0.5]).unwrap();
        let con = tape.constant(vec![1], vec![0.25]).unwrap();
        let l0 = total_classification_loss(&mut tape, ce, None, 0.0).unwrap();
        assert_eq!(tape.value(l0)[0], 0.5);
        let l1 = total_classification_loss(&mut tape, ce, Some(con), 1.0).unwrap();
        assert_eq!(tape.value(l1)[0], 0.75);
        assert!(matches!(
            total_classification_loss(&mut tape, ce, None, 1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bank_text_round_trip() {
        let bank = TextFeatureBank::new(vec!["a".into(), "b".into()], 2, vec![3.0, 4.0, 0.0, -2.0], "x").unwrap();
        assert_eq!(bank.row(0), &[0.6, 0.8]);
        let back = TextFeatureBank::parse(&bank.to_text(), "x").unwrap();
        assert_eq!(back, bank);
        assert!(TextFeatureBank::parse("EPCL-TEXTBANK v1 2 2\na 1 0\n", "x").is_err());
    }

    #[test]
    fn zero_last_layer_gives_uniform_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let head = ClassificationHead::new(&mut store, "head", ClassificationHeadConfig::new(8, 5), &mut rng).unwrap();
        let w = head.fc3().weight;
        store.get_mut(w).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::inference(&store);
        let x = tape.constant(vec![2, 8], (0..16).map(|i| i as f64 * 0.1).collect()).unwrap();
        let logits = head.logits::<_, ChaCha8Rng>(&mut tape, x, None).unwrap();
        let probs = tape.softmax(logits);
        assert!(tape.value(probs).iter().all(|&p| (p - 0.2).abs() < 1e-12));
    }
}
