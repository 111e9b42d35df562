//! Point tokens, positional embeddings and the sequence layout fed to the
//! backbone, plus the translation behaviour of both.

use epcl::data::Family;
use epcl::tensor::{ParamStore, Tape};
use epcl::tokenization::{PointTokenizer, PointTokenizerConfig, TaskToken};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> epcl::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f32>::new();
    let mut cfg = PointTokenizerConfig::new(64);
    cfg.patches = 16;
    cfg.neighbors = 8;
    cfg.hidden = [16, 32, 64];
    let tok = PointTokenizer::new(&mut store, "point_tokenizer", cfg, &mut rng)?;
    let task = TaskToken::new(&mut store, "task", 2, 64, &mut rng)?;

    let cloud = Family::Cube.sample(256, 0, 0.0, &mut rng)?;
    let moved = cloud.translated([5.0, -2.0, 1.0]);

    let mut tape = Tape::inference(&store);
    let a = tok.tokenize(&mut tape, &[&cloud], &task)?;
    let b = tok.tokenize(&mut tape, &[&moved], &task)?;
    println!(
        "sequence: {} tokens of width {} (1 CLS, {} task, {} patches)",
        a.len,
        a.width,
        a.task_tokens,
        a.patches()
    );

    let max_diff = |x: &[f32], y: &[f32]| x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max);
    let (ta, tb) = (tape.value(a.tokens).to_vec(), tape.value(b.tokens).to_vec());
    let (pa, pb) = (tape.value(a.positional).to_vec(), tape.value(b.positional).to_vec());
    println!("token change under translation:      {:.2e}", max_diff(&ta, &tb));
    println!("positional change under translation: {:.2e}", max_diff(&pa, &pb));
    Ok(())
}
