#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use epcl::backbone::{FreezePolicy, Transformer, TransformerConfig};
use epcl::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 10;
pub const NORM_FLOOR: f64 = 1e-4;

type Build = dyn Fn(&mut Tape<'_, f64>, &[Var]) -> epcl::Result<Var>;

fn projection(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i * 7919 + 13) % 23) as f64 / 11.0 - 1.0).collect()
}

fn scalar_loss(tape: &mut Tape<'_, f64>, out: Var) -> Var {
    let n = tape.value(out).len();
    if n == 1 {
        return out;
    }
    let shape = tape.shape(out).to_vec();
    let r = tape.constant(shape, projection(n)).unwrap();
    let prod = tape.mul(out, r).unwrap();
    tape.sum(prod)
}

fn eval(store: &ParamStore<f64>, ids: &[ParamId], f: &Build) -> f64 {
    let mut tape = Tape::new(store);
    let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id)).collect();
    let out = f(&mut tape, &vars).unwrap();
    let loss = scalar_loss(&mut tape, out);
    tape.value(loss)[0]
}

/// Worst norm-wise relative error `‖g_a − g_n‖ / max(‖g_a‖ + ‖g_n‖, 1e-4)`
/// over the listed parameters, comparing the tape gradient against central
/// differences of a fixed random projection of the output. The floor
/// keeps gradients that are zero in exact arithmetic (a key bias under
/// softmax) from dividing difference noise by noise.
pub fn gradient_error(store: &mut ParamStore<f64>, ids: &[ParamId], f: &Build) -> f64 {
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new(store);
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id)).collect();
        let out = f(&mut tape, &vars).unwrap();
        let loss = scalar_loss(&mut tape, out);
        let g = tape.backward(loss).unwrap();
        ids.iter()
            .map(|&id| g.param(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; store.get(id).numel()]))
            .collect()
    };
    let mut worst = 0.0f64;
    for (&id, ga) in ids.iter().zip(&analytic) {
        let mut gn = vec![0.0; ga.len()];
        for (i, slot) in gn.iter_mut().enumerate() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + FD_STEP;
            let up = eval(store, ids, f);
            store.get_mut(id).data_mut()[i] = orig - FD_STEP;
            let down = eval(store, ids, f);
            store.get_mut(id).data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        let diff: f64 = ga.iter().zip(&gn).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let scale: f64 = ga.iter().map(|a| a * a).sum::<f64>().sqrt() + gn.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / scale.max(NORM_FLOOR));
    }
    worst
}

fn add(store: &mut ParamStore<f64>, name: &str, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
    store
        .insert(name, Tensor::new(shape, data).unwrap().with_requires_grad(true))
        .unwrap()
}

fn normal(store: &mut ParamStore<f64>, name: &str, shape: Vec<usize>, rng: &mut ChaCha8Rng) -> ParamId {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    add(store, name, shape, data)
}

/// Values bounded away from zero, for kinks at the origin.
fn away(store: &mut ParamStore<f64>, name: &str, shape: Vec<usize>, rng: &mut ChaCha8Rng) -> ParamId {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    add(store, name, shape, data)
}

/// Entries spaced at least 0.05 apart so max selections stay put.
fn distinct(store: &mut ParamStore<f64>, name: &str, shape: Vec<usize>, rng: &mut ChaCha8Rng) -> ParamId {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 0.5).collect();
    for i in (1..n).rev() {
        data.swap(i, rng.gen_range(0..=i));
    }
    add(store, name, shape, data)
}

pub struct Case {
    pub name: &'static str,
    pub store: ParamStore<f64>,
    pub ids: Vec<ParamId>,
    pub build: Box<Build>,
}

fn case(name: &'static str, store: ParamStore<f64>, ids: Vec<ParamId>, build: Box<Build>) -> Case {
    Case {
        name,
        store,
        ids,
        build,
    }
}

/// One random instance of every differentiable tape operation.
pub fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let rng = &mut rng;

    let (m, k, n) = (rng.gen_range(2..5), rng.gen_range(2..5), rng.gen_range(2..5));
    let mut s = ParamStore::new();
    let ids = vec![normal(&mut s, "a", vec![m, k], rng), normal(&mut s, "b", vec![k, n], rng)];
    out.push(case("matmul", s, ids, Box::new(|t, v| t.matmul(v[0], v[1]))));

    let mut s = ParamStore::new();
    let ids = vec![normal(&mut s, "a", vec![m, n], rng), normal(&mut s, "b", vec![m, n], rng)];
    out.push(case("add", s, ids, Box::new(|t, v| t.add(v[0], v[1]))));

    let mut s = ParamStore::new();
    let ids = vec![normal(&mut s, "a", vec![m, n], rng), normal(&mut s, "b", vec![m, n], rng)];
    out.push(case("mul", s, ids, Box::new(|t, v| t.mul(v[0], v[1]))));

    let c: f64 = rng.gen_range(-2.0..2.0);
    let mut s = ParamStore::new();
    let ids = vec![normal(&mut s, "a", vec![m, n], rng)];
    out.push(case("scale", s, ids, Box::new(move |t, v| Ok(t.scale(v[0], c)))));

    let mut s = ParamStore::new();
    let ids = vec![normal(&mut s, "x", vec![m, n], rng), normal(&mut s, "b", vec![n], rng)];
    out.push(case("add_bias", s, ids, Box::new(|t, v| t.add_bias(v[0], v[1]))));

    let mut s = ParamStore::new();
    let ids = vec![away(&mut s, "x", vec![m, n], rng)];
    out.push(case("relu", s, ids, Box::new(|t, v| Ok(t.relu(v[0])))));

    let mut s = ParamStore::new();
    let ids = vec![normal(&mut s, "x", vec![m, n], rng)];
    out.push(case("gelu", s, ids, Box::new(|t, v| Ok(t.gelu(v[0])))));

    let d = rng.gen_range(3..7);
    let mut s = ParamStore::new();
    let ids = vec![
        normal(&mut s, "x", vec![m, d], rng),
        normal(&mut s, "g", vec![d], rng),
        normal(&mut s, "b", vec![d], rng),
    ];
    out.push(case("layer_norm", s, ids, Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))));

    let mut s = ParamStore::new();
    let ids = vec![normal(&mut s, "x", vec![m, n], rng)];
    out.push(case("softmax", s, ids, Box::new(|t, v| Ok(t.softmax(v[0])))));

    let (seq, heads, hd) = (rng.gen_range(2..5), rng.gen_range(1..3), rng.gen_range(1..4));
    let batch = rng.gen_range(1..3);
    let rows = batch * seq;
    let mut s = ParamStore::new();
    let ids = vec![
        normal(&mut s, "q", vec![rows, heads * hd], rng),
        normal(&mut s, "k", vec![rows, heads * hd], rng),
        normal(&mut s, "v", vec![rows, heads * hd], rng),
    ];
    out.push(case(
        "attention",
        s,
        ids,
        Box::new(move |t, v| t.attention(v[0], v[1], v[2], seq, heads)),
    ));

    let drop_seed: u64 = rng.gen();
    let mut s = ParamStore::new();
    let ids = vec![normal(&mut s, "x", vec![m, n], rng)];
    out.push(case(
        "dropout",
        s,
        ids,
        Box::new(move |t, v| {
            let mut r = ChaCha8Rng::seed_from_u64(drop_seed);
            t.dropout(v[0], 0.3, Some(&mut r))
        }),
    ));

    let mask: Vec<f64> = (0..m * n).map(|_| rng.gen_range(0.0..2.0)).collect();
    let mut s = ParamStore::new();
    let ids = vec![normal(&mut s, "x", vec![m, n], rng)];
    out.push(case("mask_mul", s, ids, Box::new(move |t, v| t.mask_mul(v[0], mask.clone()))));

    let n2 = rng.gen_range(1..4);
    let mut s = ParamStore::new();
    let ids = vec![normal(&mut s, "a", vec![m, n], rng), normal(&mut s, "b", vec![m, n2], rng)];
    out.push(case("concat_cols", s, ids, Box::new(|t, v| t.concat_cols(&[v[0], v[1]]))));

    let m2 = rng.gen_range(1..4);
    let mut s = ParamStore::new();
    let ids = vec![normal(&mut s, "a", vec![m, n], rng), normal(&mut s, "b", vec![m2, n], rng)];
    out.push(case("concat_rows", s, ids, Box::new(|t, v| t.concat_rows(&[v[0], v[1]]))));

    let index: Vec<usize> = (0..m + 3).map(|_| rng.gen_range(0..m)).collect();
    let mut s = ParamStore::new();
    let ids = vec![normal(&mut s, "x", vec![m, n], rng)];
    out.push(case("gather_rows", s, ids, Box::new(move |t, v| t.gather_rows(v[0], &index))));

    let group = rng.gen_range(2..4);
    let mut s = ParamStore::new();
    let ids = vec![distinct(&mut s, "x", vec![m * group, n], rng)];
    out.push(case("group_max", s, ids, Box::new(move |t, v| t.group_max(v[0], group))));

    let mut s = ParamStore::new();
    let ids = vec![distinct(&mut s, "x", vec![m, n], rng)];
    out.push(case("max_pool", s, ids, Box::new(|t, v| t.max_pool(v[0]))));

    let (src, q, kk) = (m + 2, rng.gen_range(2..6), 3.min(m + 2));
    let widx: Vec<usize> = (0..q * kk).map(|_| rng.gen_range(0..src)).collect();
    let w: Vec<f64> = (0..q * kk).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut s = ParamStore::new();
    let ids = vec![normal(&mut s, "x", vec![src, n], rng)];
    out.push(case(
        "weighted_gather",
        s,
        ids,
        Box::new(move |t, v| t.weighted_gather(v[0], &widx, &w, kk)),
    ));

    let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
    let mut s = ParamStore::new();
    let ids = vec![normal(&mut s, "x", vec![m, n], rng)];
    out.push(case("cross_entropy", s, ids, Box::new(move |t, v| t.cross_entropy(v[0], &labels))));

    let mut s = ParamStore::new();
    let ids = vec![away(&mut s, "x", vec![m, n], rng)];
    out.push(case("l2_normalize_rows", s, ids, Box::new(|t, v| Ok(t.l2_normalize_rows(v[0])))));

    let mut s = ParamStore::new();
    let ids = vec![normal(&mut s, "x", vec![m, n], rng)];
    out.push(case("sum", s, ids, Box::new(|t, v| Ok(t.sum(v[0])))));

    let mut s = ParamStore::new();
    let ids = vec![normal(&mut s, "x", vec![m, n], rng)];
    out.push(case("mean", s, ids, Box::new(|t, v| Ok(t.mean(v[0])))));

    let mut s = ParamStore::new();
    let ids = vec![normal(&mut s, "x", vec![m, n], rng)];
    out.push(case("mean_rows", s, ids, Box::new(|t, v| Ok(t.mean_rows(v[0])))));

    out
}

/// A single pre-LN transformer block followed by the final LayerNorm,
/// checked with respect to its input and every block parameter.
pub fn block_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = TransformerConfig {
        layers: 1,
        width: 8,
        heads: 2,
        mlp_ratio: 2,
        ..TransformerConfig::small()
    };
    let mut store = ParamStore::<f64>::new();
    let bb = Transformer::new(&mut store, cfg, &mut rng).unwrap();
    FreezePolicy::FullFinetune.apply(&mut store);
    let (batch, seq) = (2, 3);
    let x = normal(&mut store, "x", vec![batch * seq, 8], &mut rng);
    let ids: Vec<ParamId> = store.ids().collect();
    Case {
        name: "transformer_block",
        store,
        ids,
        build: Box::new(move |t, _| {
            let xv = t.param(x);
            let h = bb.blocks[0].forward(t, xv, seq, 2)?;
            bb.ln_post.forward(t, h)
        }),
    }
}

/// Worst relative error per case name over [`INSTANCES`] random draws.
pub fn gradient_report() -> Vec<(&'static str, f64)> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for seed in 0..INSTANCES {
        let mut cases = op_cases(seed);
        cases.push(block_case(seed));
        for mut c in cases {
            let e = gradient_error(&mut c.store, &c.ids, &*c.build);
            match worst.iter_mut().find(|(n, _)| *n == c.name) {
                Some(slot) => slot.1 = slot.1.max(e),
                None => worst.push((c.name, e)),
            }
        }
    }
    worst
}

pub fn sq(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

/// Recomputes every min-distance from scratch at each step.
pub fn fps_oracle(points: &[[f64; 3]], m: usize, start: usize) -> Vec<usize> {
    let mut chosen = vec![start];
    while chosen.len() < m {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..points.len() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen.iter().map(|&c| sq(&points[i], &points[c])).fold(f64::INFINITY, f64::min);
            if best.map_or(true, |(bd, _)| d > bd) {
                best = Some((d, i));
            }
        }
        chosen.push(best.unwrap().1);
    }
    chosen
}

/// Full sort by `(distance, index)`.
pub fn knn_oracle(points: &[[f64; 3]], query: &[f64; 3], k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| (sq(p, query), i)).collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

pub fn interpolation_oracle(sources: &[[f64; 3]], feats: &[f64], d: usize, query: &[f64; 3]) -> Vec<f64> {
    let nn = knn_oracle(sources, query, 3);
    let w: Vec<f64> = nn.iter().map(|&i| 1.0 / (sq(&sources[i], query).sqrt() + 1e-8)).collect();
    let total: f64 = w.iter().sum();
    let mut out = vec![0.0; d];
    for (&i, wi) in nn.iter().zip(&w) {
        for j in 0..d {
            out[j] += wi / total * feats[i * d + j];
        }
    }
    out
}

/// Random cloud of up to 64 points; grid-valued clouds force distance ties.
pub fn random_cloud(rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let n = rng.gen_range(4..=64);
    let grid = rng.gen_bool(0.5);
    (0..n)
        .map(|_| {
            if grid {
                [0, 1, 2].map(|_| rng.gen_range(0..4) as f64)
            } else {
                [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0))
            }
        })
        .collect()
}

/// Mismatch counts for FPS and kNN, and the worst interpolation error, over
/// `clouds` random clouds.
pub fn geometry_report(clouds: usize, seed: u64) -> (usize, usize, f64) {
    use epcl::geometry::{farthest_point_sample, interpolate_features, knn_indices};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut fps_bad, mut knn_bad, mut interp_err) = (0, 0, 0.0f64);
    for _ in 0..clouds {
        let pts = random_cloud(&mut rng);
        let n = pts.len();
        let m = rng.gen_range(1..=n);
        let start = rng.gen_range(0..n);
        if farthest_point_sample(&pts, m, start).unwrap() != fps_oracle(&pts, m, start) {
            fps_bad += 1;
        }
        let k = rng.gen_range(1..=n);
        let queries: Vec<[f64; 3]> = (0..5)
            .map(|i| if i < 2 { pts[rng.gen_range(0..n)] } else { [0, 1, 2].map(|_| rng.gen_range(-1.0..3.0)) })
            .collect();
        let got = knn_indices(&pts, &queries, k).unwrap();
        for (qi, q) in queries.iter().enumerate() {
            if got[qi * k..(qi + 1) * k] != knn_oracle(&pts, q, k)[..] {
                knn_bad += 1;
            }
        }
        if n >= 3 {
            let d = 2;
            let feats: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = interpolate_features(&pts, &feats, &queries, 3).unwrap();
            for (qi, q) in queries.iter().enumerate() {
                let want = interpolation_oracle(&pts, &feats, d, q);
                for j in 0..d {
                    interp_err = interp_err.max((got[qi * d + j] - want[j]).abs());
                }
            }
        }
    }
    (fps_bad, knn_bad, interp_err)
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_epcl")
}

pub fn epcl(args: &[&str]) -> Output {
    Command::new(bin()).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Every file under `dir` with its bytes, sorted by relative path.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

pub fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub struct Invariance {
    /// Largest token change after shuffling members inside every patch.
    pub within_patch: f32,
    /// Largest token change after shuffling the whole cloud (FPS start kept).
    pub whole_cloud: f32,
    /// Largest token change after a translation.
    pub translation_tokens: f32,
    /// Largest positional-embedding change after the same translation.
    pub translation_positions: f32,
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Point-token invariances of a freshly initialised float32 tokenizer.
pub fn tokenizer_invariance(seed: u64) -> Invariance {
    use epcl::data::FAMILIES;
    use epcl::tokenization::{PointTokenizer, PointTokenizerConfig, TaskToken};
    use rand::seq::SliceRandom;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f32>::new();
    let mut cfg = PointTokenizerConfig::new(32);
    cfg.patches = 16;
    cfg.neighbors = 8;
    cfg.hidden = [16, 32, 64];
    cfg.pos_hidden = 32;
    let tok = PointTokenizer::new(&mut store, "tok", cfg, &mut rng).unwrap();
    let task = TaskToken::new(&mut store, "task", 1, 32, &mut rng).unwrap();
    let family = FAMILIES[(seed % 4) as usize];
    let cloud = family.sample(256, 0, 0.02, &mut rng).unwrap();

    let mut tape = Tape::inference(&store);
    let (centers, local) = tok.patchify::<f32>(&cloud).unwrap();
    let k = tok.cfg.neighbors;
    let mut shuffled = local.clone();
    for patch in shuffled.chunks_mut(k) {
        patch.shuffle(&mut rng);
    }
    let flat = |v: &[[f32; 3]]| v.iter().flatten().copied().collect::<Vec<_>>();
    let a = tape.constant(vec![local.len(), 3], flat(&local)).unwrap();
    let b = tape.constant(vec![local.len(), 3], flat(&shuffled)).unwrap();
    let ta = tok.embed_patches(&mut tape, a, k).unwrap();
    let tb = tok.embed_patches(&mut tape, b, k).unwrap();
    let within_patch = max_abs_diff(tape.value(ta), tape.value(tb));
    assert_eq!(centers.len(), tok.cfg.patches);

    let mut order: Vec<usize> = (1..cloud.len()).collect();
    order.shuffle(&mut rng);
    order.insert(0, 0);
    let permuted = cloud.permuted(&order).unwrap();
    let offset = [0, 1, 2].map(|_| rng.gen_range(-3.0f32..3.0));
    let moved = cloud.translated(offset);

    let base = tok.tokenize(&mut tape, &[&cloud], &task).unwrap();
    let perm = tok.tokenize(&mut tape, &[&permuted], &task).unwrap();
    let shift = tok.tokenize(&mut tape, &[&moved], &task).unwrap();
    let rows = |tape: &Tape<'_, f32>, v: Var| {
        let d = 32;
        base.patch_rows().iter().flat_map(|&r| tape.value(v)[r * d..(r + 1) * d].to_vec()).collect::<Vec<_>>()
    };
    Invariance {
        within_patch,
        whole_cloud: max_abs_diff(&rows(&tape, base.tokens), &rows(&tape, perm.tokens)),
        translation_tokens: max_abs_diff(&rows(&tape, base.tokens), &rows(&tape, shift.tokens)),
        translation_positions: max_abs_diff(&rows(&tape, base.positional), &rows(&tape, shift.positional)),
    }
}
