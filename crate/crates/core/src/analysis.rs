//! Cross-modal alignment of category features and embedding export.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::backbone::Transformer;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::model::PointClassifier;
use crate::tensor::{Element, ParamStore, Tape};
use crate::tokenization::{Image, ImageTokenizer, PointTokenizer, TaskToken, TokenSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Estimator {
    /// Pearson correlation across feature dimensions.
    #[default]
    Pearson,
    /// Cosine similarity of the raw vectors.
    Cosine,
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pearson" => Ok(Estimator::Pearson),
            "cosine" => Ok(Estimator::Cosine),
            other => Err(Error::Argument(format!("unknown estimator `{other}` (pearson, cosine)"))),
        }
    }
}

impl Estimator {
    /// `None` when either vector has zero spread (Pearson) or zero norm
    /// (cosine).
    pub fn correlate(self, a: &[f64], b: &[f64]) -> Option<f64> {
        let n = a.len() as f64;
        let (ma, mb) = match self {
            Estimator::Pearson => (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n),
            Estimator::Cosine => (0.0, 0.0),
        };
        let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
        for (&x, &y) in a.iter().zip(b) {
            let (dx, dy) = (x - ma, y - mb);
            num += dx * dy;
            va += dx * dx;
            vb += dy * dy;
        }
        let denom = (va * vb).sqrt();
        if denom == 0.0 || !denom.is_finite() {
            return None;
        }
        Some((num / denom).clamp(-1.0, 1.0))
    }
}

/// Correlations between 2D-category rows and 3D-category columns at one
/// layer. Entries that could not be computed are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentMatrix {
    pub layer: usize,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Vec<Option<f64>>,
}

impl AlignmentMatrix {
    pub fn get(&self, r: usize, c: usize) -> Option<f64> {
        self.values[r * self.cols.len() + c]
    }

    pub fn flagged(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    /// Mean over matched categories (`i, i`), skipping flagged entries.
    pub fn mean_diagonal(&self) -> Option<f64> {
        let diag: Vec<f64> = (0..self.rows.len().min(self.cols.len()))
            .filter_map(|i| self.get(i, i))
            .collect();
        (!diag.is_empty()).then(|| diag.iter().sum::<f64>() / diag.len() as f64)
    }

    /// Tab-separated table; flagged entries print as `NA`.
    pub fn to_text(&self) -> String {
        let mut s = format!("# layer {}\n2d\\3d", self.layer);
        for c in &self.cols {
            let _ = write!(s, "\t{c}");
        }
        s.push('\n');
        for (r, name) in self.rows.iter().enumerate() {
            s.push_str(name);
            for c in 0..self.cols.len() {
                let _ = match self.get(r, c) {
                    Some(v) => write!(s, "\t{v:.6}"),
                    None => write!(s, "\tNA"),
                };
            }
            s.push('\n');
        }
        s
    }
}

/// Correlates every 2D category mean with every 3D category mean.
pub fn cross_correlation(
    feats2d: &[Vec<f64>],
    feats3d: &[Vec<f64>],
    names2d: &[String],
    names3d: &[String],
    layer: usize,
    estimator: Estimator,
) -> Result<AlignmentMatrix> {
    if feats2d.is_empty() || feats3d.is_empty() {
        return Err(Error::Argument("alignment needs at least one category per modality".into()));
    }
    if names2d.len() != feats2d.len() || names3d.len() != feats3d.len() {
        return Err(Error::shape(
            "cross_correlation",
            &[names2d.len(), names3d.len()],
            &[feats2d.len(), feats3d.len()],
        ));
    }
    let width = feats2d[0].len();
    if feats2d.iter().chain(feats3d).any(|f| f.len() != width) {
        return Err(Error::Config("2D and 3D features must share one width".into()));
    }
    let mut values = Vec::with_capacity(feats2d.len() * feats3d.len());
    for (a, ra) in feats2d.iter().zip(names2d) {
        for (b, cb) in feats3d.iter().zip(names3d) {
            let v = estimator.correlate(a, b);
            if v.is_none() {
                log::warn!("layer {layer}: correlation of {ra} (2D) with {cb} (3D) undefined, zero variance");
            }
            values.push(v);
        }
    }
    Ok(AlignmentMatrix {
        layer,
        rows: names2d.to_vec(),
        cols: names3d.to_vec(),
        values,
    })
}

/// `[layer][category]` mean CLS feature.
pub type CategoryFeatures = Vec<Vec<Vec<f64>>>;

fn cls_layers<T: Element>(
    tape: &mut Tape<'_, T>,
    backbone: &Transformer,
    seq: &TokenSequence,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let out = backbone.forward::<T, rand_chacha::ChaCha8Rng>(tape, seq, None)?;
    let rows = seq.cls_rows();
    let d = seq.width;
    Ok(out
        .layers
        .iter()
        .map(|&l| {
            let v = tape.value(l);
            rows.iter()
                .map(|&r| v[r * d..(r + 1) * d].iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect())
                .collect()
        })
        .collect())
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; rows.first().map_or(0, Vec::len)];
    for r in rows {
        m.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    m.iter_mut().for_each(|a| *a /= rows.len() as f64);
    m
}

fn category_means(per_category: Vec<Vec<Vec<Vec<f64>>>>, layers: usize) -> CategoryFeatures {
    // per_category[c][layer][sample] -> [layer][c]
    (0..layers)
        .map(|l| per_category.iter().map(|cat| mean_rows(&cat[l])).collect())
        .collect()
}

/// Category-mean CLS features of point clouds at every backbone depth.
pub fn cloud_category_features<T: Element>(
    store: &ParamStore<T>,
    backbone: &Transformer,
    tokenizer: &PointTokenizer,
    task: &TaskToken,
    clouds: &[Vec<&PointCloud>],
) -> Result<CategoryFeatures> {
    let mut per = Vec::with_capacity(clouds.len());
    for (c, cat) in clouds.iter().enumerate() {
        if cat.is_empty() {
            return Err(Error::Argument(format!("3D category {c} has no samples")));
        }
        let mut tape = Tape::inference(store);
        let seq = tokenizer.tokenize(&mut tape, cat, task)?;
        per.push(cls_layers(&mut tape, backbone, &seq)?);
    }
    Ok(category_means(per, backbone.cfg.layers + 1))
}

/// Category-mean CLS features of images at every backbone depth.
pub fn image_category_features<T: Element>(
    store: &ParamStore<T>,
    backbone: &Transformer,
    tokenizer: &ImageTokenizer,
    images: &[Vec<&Image>],
) -> Result<CategoryFeatures> {
    let mut per = Vec::with_capacity(images.len());
    for (c, cat) in images.iter().enumerate() {
        if cat.is_empty() {
            return Err(Error::Argument(format!("2D category {c} has no samples")));
        }
        let mut tape = Tape::inference(store);
        let seq = tokenizer.tokenize(&mut tape, cat)?;
        per.push(cls_layers(&mut tape, backbone, &seq)?);
    }
    Ok(category_means(per, backbone.cfg.layers + 1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentCurve {
    pub matrices: Vec<AlignmentMatrix>,
    /// Mean matched-category correlation at each depth `0..=L`.
    pub values: Vec<Option<f64>>,
}

impl AlignmentCurve {
    pub fn to_text(&self) -> String {
        let mut s = String::from("layer\tmean_diagonal\n");
        for (l, v) in self.values.iter().enumerate() {
            let _ = match v {
                Some(v) => writeln!(s, "{l}\t{v:.6}"),
                None => writeln!(s, "{l}\tNA"),
            };
        }
        s
    }
}

/// One alignment matrix per depth from precomputed category features.
pub fn alignment_curve(
    feats2d: &CategoryFeatures,
    feats3d: &CategoryFeatures,
    names2d: &[String],
    names3d: &[String],
    estimator: Estimator,
) -> Result<AlignmentCurve> {
    if feats2d.len() != feats3d.len() {
        return Err(Error::shape("alignment_curve", &[feats2d.len()], &[feats3d.len()]));
    }
    let matrices = feats2d
        .iter()
        .zip(feats3d)
        .enumerate()
        .map(|(l, (a, b))| cross_correlation(a, b, names2d, names3d, l, estimator))
        .collect::<Result<Vec<_>>>()?;
    let values = matrices.iter().map(AlignmentMatrix::mean_diagonal).collect();
    Ok(AlignmentCurve { matrices, values })
}

/// CSV of CLS features at depth `layer` (0 is the backbone input):
/// `sample_id,label,f0,...`. Rows follow `samples` order.
pub fn export_embeddings(model: &PointClassifier<f32>, samples: &[&Sample], layer: usize, batch: usize) -> Result<String> {
    let l_max = model.cfg.backbone.layers;
    if layer > l_max {
        return Err(Error::Argument(format!("layer {layer} out of range 0..={l_max}")));
    }
    let d = model.cfg.backbone.width;
    let mut s = String::from("sample_id,label");
    for j in 0..d {
        let _ = write!(s, ",f{j}");
    }
    s.push('\n');
    for chunk in samples.chunks(batch.max(1)) {
        let clouds: Vec<_> = chunk.iter().map(|x| &x.cloud).collect();
        let mut tape = Tape::inference(&model.store);
        let seq = model.tokenizer.tokenize(&mut tape, &clouds, &model.task)?;
        let feats = cls_layers(&mut tape, &model.backbone, &seq)?;
        for (sample, row) in chunk.iter().zip(&feats[layer]) {
            let _ = write!(s, "{},{}", sample.id, sample.label);
            for v in row {
                let _ = write!(s, ",{}", *v as f32);
            }
            s.push('\n');
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_negated() {
        let a = vec![1.0, 2.0, 4.0];
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((Estimator::Pearson.correlate(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((Estimator::Pearson.correlate(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(Estimator::Pearson.correlate(&a, &[3.0, 3.0, 3.0]), None);
    }

    #[test]
    fn flagged_entries_print_na() {
        let names = vec!["x".to_string()];
        let m = cross_correlation(&[vec![1.0, 1.0]], &[vec![0.0, 2.0]], &names, &names, 0, Estimator::Pearson).unwrap();
        assert_eq!(m.flagged(), 1);
        assert!(m.to_text().contains("NA"));
        assert_eq!(m.mean_diagonal(), None);
    }
}
