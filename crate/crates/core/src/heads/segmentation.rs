use rand::Rng;

use crate::backbone::Transformer;
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, interpolation_weights, knn_indices, PointCloud};
use crate::nn::{param, Init, Linear};
use crate::tensor::{Element, ParamId, ParamStore, Tape, Var};
use crate::tokenization::{assemble_sequence, TaskToken};

const INTERP_K: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationConfig {
    pub input_points: usize,
    /// Point counts after each transition-down stage.
    pub stage_points: [usize; 3],
    pub neighbors: usize,
    /// Width of the per-point stem features.
    pub stem: usize,
    /// Widths after the first two stages; the third is the backbone width.
    pub widths: [usize; 2],
    pub width: usize,
    pub pos_hidden: usize,
    pub classes: usize,
    pub start: usize,
}

impl SegmentationConfig {
    /// Each stage keeps half the points of the previous one.
    pub fn halving(input_points: usize, width: usize, classes: usize) -> Self {
        Self {
            input_points,
            stage_points: [input_points / 2, input_points / 4, input_points / 8],
            neighbors: 16,
            stem: 32,
            widths: [64, 128],
            width,
            pos_hidden: 64,
            classes,
            start: 0,
        }
    }

    /// Point counts at levels 0 (input) through 3 (coarsest).
    pub fn level_points(&self) -> [usize; 4] {
        let [a, b, c] = self.stage_points;
        [self.input_points, a, b, c]
    }

    pub fn level_widths(&self) -> [usize; 4] {
        [self.stem, self.widths[0], self.widths[1], self.width]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.level_points();
        for s in 0..3 {
            if n[s + 1] == 0 || n[s + 1] > n[s] {
                return Err(Error::Config(format!(
                    "stage {} keeps {} of {} points",
                    s + 1,
                    n[s + 1],
                    n[s]
                )));
            }
            if self.neighbors > n[s] {
                return Err(Error::Config(format!(
                    "{} neighbors requested from a level of {} points",
                    self.neighbors, n[s]
                )));
            }
        }
        if n[3] < INTERP_K {
            return Err(Error::Config(format!(
                "coarsest level needs at least {INTERP_K} points for interpolation, got {}",
                n[3]
            )));
        }
        if self.classes == 0 || self.neighbors == 0 {
            return Err(Error::Config("segmentation needs classes and neighbors".into()));
        }
        Ok(())
    }
}

/// Precomputed sampling, grouping and interpolation indices for a batch,
/// with row indices already offset into the stacked per-level matrices.
#[derive(Clone, Debug)]
pub struct SegmentationLevels<T> {
    pub batch: usize,
    /// Level-0 coordinates, `(B·A)×3`.
    pub input: Vec<T>,
    /// Member rows of level `s` for each level-`s+1` point, `K` per point.
    pub group: [Vec<usize>; 3],
    /// Member coordinates relative to their level-`s+1` center.
    pub relative: [Vec<T>; 3],
    /// Coarsest-level coordinates, `(B·n3)×3`.
    pub coarse: Vec<T>,
    /// For each level-`s` point, its 3 nearest level-`s+1` rows and weights.
    pub interp: [(Vec<usize>, Vec<T>); 3],
}

#[derive(Clone, Debug)]
struct Down {
    a: Linear,
    b: Linear,
}

/// Hierarchical encoder/decoder around a frozen backbone at the coarsest
/// scale.
#[derive(Clone, Debug)]
pub struct SegmentationPipeline {
    pub cfg: SegmentationConfig,
    stem: Linear,
    down: Vec<Down>,
    up: Vec<Linear>,
    pos_a: Linear,
    pos_b: Linear,
    cls: ParamId,
    cls_pos: ParamId,
    head_a: Linear,
    head_b: Linear,
}

impl SegmentationPipeline {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: SegmentationConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.level_widths();
        let d = cfg.width;
        let mut down = Vec::with_capacity(3);
        for s in 0..3 {
            down.push(Down {
                a: Linear::new(store, &format!("{prefix}.down.{s}.0"), w[s] + 3, w[s + 1], rng)?,
                b: Linear::new(store, &format!("{prefix}.down.{s}.1"), w[s + 1], w[s + 1], rng)?,
            });
        }
        let mut up = Vec::with_capacity(3);
        for s in 0..3 {
            up.push(Linear::new(store, &format!("{prefix}.up.{s}"), w[s + 1] + w[s], w[s], rng)?);
        }
        Ok(Self {
            stem: Linear::new(store, &format!("{prefix}.stem"), 3, w[0], rng)?,
            down,
            up,
            pos_a: Linear::new(store, &format!("{prefix}.pos.0"), 3, cfg.pos_hidden, rng)?,
            pos_b: Linear::new(store, &format!("{prefix}.pos.1"), cfg.pos_hidden, d, rng)?,
            cls: param(store, &format!("{prefix}.cls"), vec![1, d], Init::Normal(0.02), rng)?,
            cls_pos: param(store, &format!("{prefix}.cls_pos"), vec![1, d], Init::Normal(0.02), rng)?,
            head_a: Linear::new(store, &format!("{prefix}.head.0"), w[0], w[0], rng)?,
            head_b: Linear::new(store, &format!("{prefix}.head.1"), w[0], cfg.classes, rng)?,
            cfg,
        })
    }

    /// Transition-up layer into level `s`; its weight rows are
    /// `[interpolated | skip]`.
    pub fn up_layer(&self, s: usize) -> &Linear {
        &self.up[s]
    }

    pub fn levels<T: Element>(&self, clouds: &[&PointCloud]) -> Result<SegmentationLevels<T>> {
        if clouds.is_empty() {
            return Err(Error::Argument("no clouds to segment".into()));
        }
        let n = self.cfg.level_points();
        let k = self.cfg.neighbors;
        let mut out = SegmentationLevels {
            batch: clouds.len(),
            input: Vec::with_capacity(clouds.len() * n[0] * 3),
            group: Default::default(),
            relative: Default::default(),
            coarse: Vec::new(),
            interp: Default::default(),
        };
        for (b, cloud) in clouds.iter().enumerate() {
            if cloud.len() != n[0] {
                return Err(Error::Argument(format!(
                    "segmentation expects {} points per cloud, got {}",
                    n[0],
                    cloud.len()
                )));
            }
            let mut coords = vec![cloud.coords::<T>()];
            for s in 0..3 {
                let prev = &coords[s];
                let picked = farthest_point_sample(prev, n[s + 1], self.cfg.start)?;
                let next: Vec<[T; 3]> = picked.iter().map(|&i| prev[i]).collect();
                let members = knn_indices(prev, &next, k)?;
                for (q, row) in members.chunks(k).enumerate() {
                    for &m in row {
                        out.group[s].push(b * n[s] + m);
                        out.relative[s].extend((0..3).map(|j| prev[m][j] - next[q][j]));
                    }
                }
                let (idx, w) = interpolation_weights(&next, prev, INTERP_K)?;
                out.interp[s].0.extend(idx.into_iter().map(|i| b * n[s + 1] + i));
                out.interp[s].1.extend(w);
                coords.push(next);
            }
            out.input.extend(coords[0].iter().flatten());
            out.coarse.extend(coords[3].iter().flatten());
        }
        Ok(out)
    }

    /// Transition-down cascade: `[F0, F1, F2]` skips and coarsest `F3`.
    pub fn encode<T: Element>(&self, tape: &mut Tape<'_, T>, lv: &SegmentationLevels<T>) -> Result<(Vec<Var>, Var)> {
        let n = self.cfg.level_points();
        let k = self.cfg.neighbors;
        let xyz = tape.constant(vec![lv.batch * n[0], 3], lv.input.clone())?;
        let f0 = self.stem.forward(tape, xyz)?;
        let mut f = tape.relu(f0);
        let mut skips = Vec::with_capacity(3);
        for s in 0..3 {
            let grouped = tape.gather_rows(f, &lv.group[s])?;
            let rel = tape.constant(vec![lv.group[s].len(), 3], lv.relative[s].clone())?;
            let h = tape.concat_cols(&[grouped, rel])?;
            let h = self.down[s].a.forward(tape, h)?;
            let h = tape.relu(h);
            let h = self.down[s].b.forward(tape, h)?;
            skips.push(f);
            f = tape.group_max(h, k)?;
        }
        Ok((skips, f))
    }

    /// Runs the coarsest tokens (with CLS and task tokens) through the
    /// backbone and returns the final-LN rows of the point tokens.
    pub fn bottleneck<T: Element, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, T>,
        lv: &SegmentationLevels<T>,
        tokens: Var,
        task: &TaskToken,
        backbone: &Transformer,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let centers = tape.constant(vec![lv.coarse.len() / 3, 3], lv.coarse.clone())?;
        let h = self.pos_a.forward(tape, centers)?;
        let h = tape.gelu(h);
        let pos = self.pos_b.forward(tape, h)?;
        let cls = tape.param(self.cls);
        let cls_pos = tape.param(self.cls_pos);
        let seq = assemble_sequence(tape, (cls, cls_pos), task, tokens, pos, lv.batch)?;
        let out = backbone.forward(tape, &seq, rng)?;
        tape.gather_rows(out.normed, &seq.patch_rows())
    }

    /// Transition-up cascade from coarsest features to per-point logits.
    pub fn decode<T: Element>(
        &self,
        tape: &mut Tape<'_, T>,
        lv: &SegmentationLevels<T>,
        skips: &[Var],
        coarse: Var,
    ) -> Result<Var> {
        let mut g = coarse;
        for s in (0..3).rev() {
            let (idx, w) = &lv.interp[s];
            let up = tape.weighted_gather(g, idx, w, INTERP_K)?;
            let h = tape.concat_cols(&[up, skips[s]])?;
            let h = self.up[s].forward(tape, h)?;
            g = tape.relu(h);
        }
        let h = self.head_a.forward(tape, g)?;
        let h = tape.relu(h);
        self.head_b.forward(tape, h)
    }

    /// `(B·A)×C` logits, rows in input point order.
    pub fn segment<T: Element, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, T>,
        lv: &SegmentationLevels<T>,
        task: &TaskToken,
        backbone: &Transformer,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let (skips, tokens) = self.encode(tape, lv)?;
        let coarse = self.bottleneck(tape, lv, tokens, task, backbone, rng)?;
        self.decode(tape, lv, &skips, coarse)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::TransformerConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Uniform};

    fn cloud(n: usize, rng: &mut ChaCha8Rng) -> PointCloud {
        let u = Uniform::new(-1.0f32, 1.0);
        PointCloud::new((0..n).map(|_| [u.sample(rng), u.sample(rng), u.sample(rng)]).collect(), None).unwrap()
    }

    #[test]
    fn output_has_one_row_per_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f32>::new();
        let bb_cfg = TransformerConfig {
            layers: 1,
            width: 16,
            heads: 2,
            ..TransformerConfig::small()
        };
        let bb = Transformer::new(&mut store, bb_cfg, &mut rng).unwrap();
        let task = TaskToken::new(&mut store, "task", 1, 16, &mut rng).unwrap();
        let mut cfg = SegmentationConfig::halving(128, 16, 3);
        cfg.widths = [8, 12];
        cfg.stem = 8;
        let seg = SegmentationPipeline::new(&mut store, "seg", cfg, &mut rng).unwrap();
        let clouds = [cloud(128, &mut rng), cloud(128, &mut rng)];
        let refs: Vec<_> = clouds.iter().collect();
        let lv = seg.levels::<f32>(&refs).unwrap();
        let mut tape = Tape::inference(&store);
        let logits = seg.segment::<_, ChaCha8Rng>(&mut tape, &lv, &task, &bb, None).unwrap();
        assert_eq!(tape.shape(logits), &[256, 3]);
        let short = cloud(100, &mut rng);
        assert!(matches!(seg.levels::<f32>(&[&short]), Err(Error::Argument(_))));
    }

    #[test]
    fn halving_counts() {
        let cfg = SegmentationConfig::halving(4096, 128, 2);
        assert_eq!(cfg.level_points(), [4096, 2048, 1024, 512]);
    }
}
