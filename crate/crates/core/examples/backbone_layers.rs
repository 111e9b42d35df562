//! Runs token sequences through a frozen random transformer and reports
//! the CLS norm at every depth.

use epcl::backbone::{Transformer, TransformerConfig};
use epcl::data::Family;
use epcl::tensor::{ParamStore, Tape};
use epcl::tokenization::{PointTokenizer, PointTokenizerConfig, TaskToken};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> epcl::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f32>::new();
    let bb = Transformer::new(&mut store, TransformerConfig::small(), &mut rng)?;
    let mut tc = PointTokenizerConfig::new(bb.cfg.width);
    tc.patches = 32;
    tc.neighbors = 16;
    let tok = PointTokenizer::new(&mut store, "point_tokenizer", tc, &mut rng)?;
    let task = TaskToken::new(&mut store, "task", 1, bb.cfg.width, &mut rng)?;

    let clouds: Vec<_> = [Family::Sphere, Family::Cylinder]
        .iter()
        .map(|f| f.sample(512, 0, 0.01, &mut rng))
        .collect::<epcl::Result<_>>()?;
    let refs: Vec<_> = clouds.iter().collect();

    let mut tape = Tape::inference(&store);
    let seq = tok.tokenize(&mut tape, &refs, &task)?;
    let out = bb.forward::<f32, ChaCha8Rng>(&mut tape, &seq, None)?;
    let d = seq.width;
    for (l, &layer) in out.layers.iter().enumerate() {
        let v = tape.value(layer);
        let norms: Vec<String> = seq
            .cls_rows()
            .iter()
            .map(|&r| format!("{:.3}", v[r * d..(r + 1) * d].iter().map(|x| x * x).sum::<f32>().sqrt()))
            .collect();
        println!("layer {l}: CLS norms {}", norms.join(" "));
    }
    Ok(())
}
