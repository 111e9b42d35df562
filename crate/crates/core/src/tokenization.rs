//! Turning point clouds and images into backbone token sequences.
//!
//! Sequences are laid out `[CLS | task tokens | patch tokens]` per sample,
//! and samples are stacked row-wise, so a batch of `B` sequences of length
//! `T` is a `(B·T)×D` matrix. Position 0 of every sequence is always CLS.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{build_patches, normalize_patch, PointCloud};
use crate::nn::{param, Init, Linear};
use crate::tensor::{Element, ParamId, ParamStore, Tape, Var};

/// Stacked token embeddings plus their additive positional embeddings.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub positional: Var,
    pub batch: usize,
    /// Tokens per sequence: `1 + task_tokens + patches`.
    pub len: usize,
    pub task_tokens: usize,
    pub width: usize,
}

impl TokenSequence {
    /// `tokens + positional`, the backbone input.
    pub fn embedded<T: Element>(&self, tape: &mut Tape<'_, T>) -> Result<Var> {
        tape.add(self.tokens, self.positional)
    }

    /// Row index of the first patch token of sample `b`.
    pub fn first_patch_row(&self, b: usize) -> usize {
        b * self.len + 1 + self.task_tokens
    }

    pub fn patches(&self) -> usize {
        self.len - 1 - self.task_tokens
    }

    /// Row indices of every patch token, sample by sample.
    pub fn patch_rows(&self) -> Vec<usize> {
        (0..self.batch)
            .flat_map(|b| {
                let start = self.first_patch_row(b);
                start..start + self.patches()
            })
            .collect()
    }

    /// Row index of each sample's CLS token.
    pub fn cls_rows(&self) -> Vec<usize> {
        (0..self.batch).map(|b| b * self.len).collect()
    }
}

/// Stacks `[cls | task | per-sample rows]` sources into sequence order.
fn layout_rows(batch: usize, task: usize, per_sample: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(batch * (1 + task + per_sample));
    for b in 0..batch {
        idx.push(0);
        idx.extend(1..=task);
        let base = 1 + task + b * per_sample;
        idx.extend(base..base + per_sample);
    }
    idx
}

/// Hyper-parameters of the patch tokenizer.
#[derive(Clone, Debug, PartialEq)]
pub struct PointTokenizerConfig {
    /// Patches per cloud (`M`).
    pub patches: usize,
    /// Points per patch (`K`).
    pub neighbors: usize,
    /// Widths of the first shared MLP (`3→h0→h1`) and the hidden layer of
    /// the second (`2·h1→h2→width`).
    pub hidden: [usize; 3],
    pub pos_hidden: usize,
    pub width: usize,
    /// FPS seed point.
    pub start: usize,
}

impl PointTokenizerConfig {
    pub fn new(width: usize) -> Self {
        Self {
            patches: 64,
            neighbors: 32,
            hidden: [128, 256, 512],
            pos_hidden: 128,
            width,
            start: 0,
        }
    }
}

/// Mini-PointNet patch embedder with an MLP positional encoder on the
/// patch centers.
#[derive(Clone, Debug)]
pub struct PointTokenizer {
    pub cfg: PointTokenizerConfig,
    first_a: Linear,
    first_b: Linear,
    second_a: Linear,
    second_b: Linear,
    pos_a: Linear,
    pos_b: Linear,
    cls: ParamId,
    cls_pos: ParamId,
}

impl PointTokenizer {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: PointTokenizerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let [h0, h1, h2] = cfg.hidden;
        let d = cfg.width;
        Ok(Self {
            first_a: Linear::new(store, &format!("{prefix}.first.0"), 3, h0, rng)?,
            first_b: Linear::new(store, &format!("{prefix}.first.1"), h0, h1, rng)?,
            second_a: Linear::new(store, &format!("{prefix}.second.0"), 2 * h1, h2, rng)?,
            second_b: Linear::new(store, &format!("{prefix}.second.1"), h2, d, rng)?,
            pos_a: Linear::new(store, &format!("{prefix}.pos.0"), 3, cfg.pos_hidden, rng)?,
            pos_b: Linear::new(store, &format!("{prefix}.pos.1"), cfg.pos_hidden, d, rng)?,
            cls: param(store, &format!("{prefix}.cls"), vec![1, d], Init::Normal(0.02), rng)?,
            cls_pos: param(store, &format!("{prefix}.cls_pos"), vec![1, d], Init::Normal(0.02), rng)?,
            cfg,
        })
    }

    /// Embeds center-relative patches: `(N·K)×3 -> N×width`.
    ///
    /// Every output row is a max over its `K` input rows, so reordering the
    /// points inside a patch cannot change its token.
    pub fn embed_patches<T: Element>(&self, tape: &mut Tape<'_, T>, local: Var, k: usize) -> Result<Var> {
        let rows = tape.shape(local)[0];
        let h = self.first_a.forward(tape, local)?;
        let h = tape.relu(h);
        let f = self.first_b.forward(tape, h)?;
        let global = tape.group_max(f, k)?;
        let spread: Vec<usize> = (0..rows).map(|i| i / k).collect();
        let global = tape.gather_rows(global, &spread)?;
        let h = tape.concat_cols(&[global, f])?;
        let h = self.second_a.forward(tape, h)?;
        let h = tape.relu(h);
        let h = self.second_b.forward(tape, h)?;
        tape.group_max(h, k)
    }

    /// Positional embedding of raw patch centers: `N×3 -> N×width`.
    pub fn embed_positions<T: Element>(&self, tape: &mut Tape<'_, T>, centers: Var) -> Result<Var> {
        let h = self.pos_a.forward(tape, centers)?;
        let h = tape.gelu(h);
        self.pos_b.forward(tape, h)
    }

    /// FPS → kNN → center-relative coordinates for one cloud.
    pub fn patchify<T: Element>(&self, cloud: &PointCloud) -> Result<(Vec<[T; 3]>, Vec<[T; 3]>)> {
        let pts = cloud.coords::<T>();
        let set = build_patches(&pts, self.cfg.patches, self.cfg.neighbors, self.cfg.start)?;
        let mut local = Vec::with_capacity(set.members.len());
        for (i, c) in set.centers.iter().enumerate() {
            let members: Vec<_> = set.patch(i).iter().map(|&j| pts[j]).collect();
            local.extend(normalize_patch(&members, c));
        }
        Ok((set.centers, local))
    }

    /// Full point path: patch tokens, positional embeddings, CLS and task
    /// tokens for a batch of clouds.
    pub fn tokenize<T: Element>(
        &self,
        tape: &mut Tape<'_, T>,
        clouds: &[&PointCloud],
        task: &TaskToken,
    ) -> Result<TokenSequence> {
        if clouds.is_empty() {
            return Err(Error::Argument("no clouds to tokenize".into()));
        }
        if task.width != self.cfg.width {
            return Err(Error::Config(format!(
                "task token width {} differs from tokenizer width {}",
                task.width, self.cfg.width
            )));
        }
        let (m, k) = (self.cfg.patches, self.cfg.neighbors);
        let mut centers = Vec::with_capacity(clouds.len() * m * 3);
        let mut local = Vec::with_capacity(clouds.len() * m * k * 3);
        for cloud in clouds {
            let (c, l) = self.patchify::<T>(cloud)?;
            centers.extend(c.into_iter().flatten());
            local.extend(l.into_iter().flatten());
        }
        let b = clouds.len();
        let local = tape.constant(vec![b * m * k, 3], local)?;
        let centers = tape.constant(vec![b * m, 3], centers)?;
        let point_tokens = self.embed_patches(tape, local, k)?;
        let point_pos = self.embed_positions(tape, centers)?;
        self.assemble(tape, point_tokens, point_pos, b, task)
    }

    /// Prepends CLS and task tokens to already-embedded patch tokens
    /// (`(B·M)×width` each for tokens and positions).
    pub fn assemble<T: Element>(
        &self,
        tape: &mut Tape<'_, T>,
        point_tokens: Var,
        point_pos: Var,
        batch: usize,
        task: &TaskToken,
    ) -> Result<TokenSequence> {
        let cls = tape.param(self.cls);
        let cls_pos = tape.param(self.cls_pos);
        assemble_sequence(tape, (cls, cls_pos), task, point_tokens, point_pos, batch)
    }
}

/// Lays out `[CLS | task | patches]` per sample from a shared CLS token
/// (and its position), the task tokens, and stacked `(B·M)×D` patch
/// tokens and positions.
pub fn assemble_sequence<T: Element>(
    tape: &mut Tape<'_, T>,
    (cls, cls_pos): (Var, Var),
    task: &TaskToken,
    point_tokens: Var,
    point_pos: Var,
    batch: usize,
) -> Result<TokenSequence> {
    let rows = tape.shape(point_tokens)[0];
    if batch == 0 || rows % batch != 0 {
        return Err(Error::shape("assemble", tape.shape(point_tokens), &[batch]));
    }
    let width = tape.shape(point_tokens)[1];
    let per = rows / batch;
    let (tok_src, pos_src) = match task.forward(tape)? {
        Some((t, p)) => (
            tape.concat_rows(&[cls, t, point_tokens])?,
            tape.concat_rows(&[cls_pos, p, point_pos])?,
        ),
        None => (
            tape.concat_rows(&[cls, point_tokens])?,
            tape.concat_rows(&[cls_pos, point_pos])?,
        ),
    };
    let order = layout_rows(batch, task.count, per);
    let tokens = tape.gather_rows(tok_src, &order)?;
    let positional = tape.gather_rows(pos_src, &order)?;
    Ok(TokenSequence {
        tokens,
        positional,
        batch,
        len: 1 + task.count + per,
        task_tokens: task.count,
        width,
    })
}

/// Learnable task tokens: a fully-connected layer applied to a fixed
/// enumeration input, plus per-token positional rows.
#[derive(Clone, Debug)]
pub struct TaskToken {
    pub count: usize,
    pub width: usize,
    pub fc: Option<Linear>,
    pos: Option<ParamId>,
}

impl TaskToken {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        count: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if count == 0 {
            return Ok(Self {
                count,
                width,
                fc: None,
                pos: None,
            });
        }
        Ok(Self {
            count,
            width,
            fc: Some(Linear::new(store, &format!("{prefix}.fc"), width, width, rng)?),
            pos: Some(param(
                store,
                &format!("{prefix}.pos"),
                vec![count, width],
                Init::Normal(0.02),
                rng,
            )?),
        })
    }

    /// Fixed `G×width` input: row `i` is filled with `i / max(G-1, 1)`.
    pub fn enumeration<T: Element>(count: usize, width: usize) -> Vec<T> {
        let denom = T::from_usize(count.saturating_sub(1).max(1)).unwrap();
        (0..count)
            .flat_map(|i| std::iter::repeat(T::from_usize(i).unwrap() / denom).take(width))
            .collect()
    }

    /// `(tokens, positions)`, each `G×width`, or `None` when `G = 0`.
    pub fn forward<T: Element>(&self, tape: &mut Tape<'_, T>) -> Result<Option<(Var, Var)>> {
        let (Some(fc), Some(pos)) = (&self.fc, self.pos) else {
            return Ok(None);
        };
        let input = tape.constant(vec![self.count, self.width], Self::enumeration(self.count, self.width))?;
        let tokens = fc.forward(tape, input)?;
        Ok(Some((tokens, tape.param(pos))))
    }
}

/// An `H×W×C` raster with channel-interleaved values.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape("image", &[height, width, channels], &[data.len()]));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Flattens the patch at grid cell `(row, col)` in `(y, x, c)` order.
    pub fn patch(&self, row: usize, col: usize, size: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(size * size * self.channels);
        for y in 0..size {
            let start = ((row * size + y) * self.width + col * size) * self.channels;
            out.extend_from_slice(&self.data[start..start + size * self.channels]);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageTokenizerConfig {
    pub patch: usize,
    pub height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub width: usize,
}

impl ImageTokenizerConfig {
    /// `N = H·W / P²`.
    pub fn patch_count(&self) -> usize {
        (self.height / self.patch) * (self.image_width / self.patch)
    }
}

/// ViT-style linear patch embedding with CLS token and learned position table.
#[derive(Clone, Debug)]
pub struct ImageTokenizer {
    pub cfg: ImageTokenizerConfig,
    pub proj: Linear,
    cls: ParamId,
    pos: ParamId,
}

impl ImageTokenizer {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: ImageTokenizerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.patch == 0 || cfg.height % cfg.patch != 0 || cfg.image_width % cfg.patch != 0 {
            return Err(Error::Argument(format!(
                "image {}x{} is not divisible into {}-pixel patches",
                cfg.height, cfg.image_width, cfg.patch
            )));
        }
        let flat = cfg.patch * cfg.patch * cfg.channels;
        let n = cfg.patch_count();
        Ok(Self {
            proj: Linear::new(store, &format!("{prefix}.proj"), flat, cfg.width, rng)?,
            cls: param(store, &format!("{prefix}.cls"), vec![1, cfg.width], Init::Normal(0.02), rng)?,
            pos: param(store, &format!("{prefix}.pos"), vec![n + 1, cfg.width], Init::Normal(0.02), rng)?,
            cfg,
        })
    }

    /// Flattened patches of a batch, `(B·N)×(P²·C)`.
    pub fn flatten<T: Element>(&self, images: &[&Image]) -> Result<Vec<T>> {
        let c = &self.cfg;
        let mut out = Vec::new();
        for img in images {
            if img.height % c.patch != 0 || img.width % c.patch != 0 {
                return Err(Error::Argument(format!(
                    "image {}x{} is not divisible into {}-pixel patches",
                    img.height, img.width, c.patch
                )));
            }
            if (img.height, img.width, img.channels) != (c.height, c.image_width, c.channels) {
                return Err(Error::Argument(format!(
                    "image is {}x{}x{}, tokenizer expects {}x{}x{}",
                    img.height, img.width, img.channels, c.height, c.image_width, c.channels
                )));
            }
            for row in 0..img.height / c.patch {
                for col in 0..img.width / c.patch {
                    out.extend(img.patch(row, col, c.patch).into_iter().map(|v| T::from_f32(v).unwrap()));
                }
            }
        }
        Ok(out)
    }

    pub fn tokenize<T: Element>(&self, tape: &mut Tape<'_, T>, images: &[&Image]) -> Result<TokenSequence> {
        if images.is_empty() {
            return Err(Error::Argument("no images to tokenize".into()));
        }
        let flat = self.flatten::<T>(images)?;
        let b = images.len();
        let n = self.cfg.patch_count();
        let x = tape.constant(vec![b * n, self.cfg.patch * self.cfg.patch * self.cfg.channels], flat)?;
        let patches = self.proj.forward(tape, x)?;
        let cls = tape.param(self.cls);
        let src = tape.concat_rows(&[cls, patches])?;
        let tokens = tape.gather_rows(src, &layout_rows(b, 0, n))?;
        let pos = tape.param(self.pos);
        let pos_order: Vec<usize> = (0..b).flat_map(|_| 0..=n).collect();
        let positional = tape.gather_rows(pos, &pos_order)?;
        Ok(TokenSequence {
            tokens,
            positional,
            batch: b,
            len: n + 1,
            task_tokens: 0,
            width: self.cfg.width,
        })
    }
}
