//! Writes CLS features of a few generated clouds as CSV to stdout.

use epcl::analysis::export_embeddings;
use epcl::backbone::TransformerConfig;
use epcl::data::{Sample, FAMILIES};
use epcl::model::{ClassifierConfig, PointClassifier};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> epcl::Result<()> {
    let layer = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let bb = TransformerConfig {
        width: 16,
        heads: 2,
        ..TransformerConfig::small()
    };
    let mut cfg = ClassifierConfig::new(bb, FAMILIES.len());
    cfg.tokenizer.patches = 16;
    cfg.tokenizer.neighbors = 8;
    cfg.tokenizer.hidden = [8, 16, 32];
    cfg.tokenizer.pos_hidden = 16;
    let model = PointClassifier::<f32>::new(cfg, &mut rng)?;

    let mut samples = Vec::new();
    for (label, f) in FAMILIES.iter().enumerate() {
        for i in 0..2 {
            samples.push(Sample {
                id: format!("{}_{i}", f.name()),
                cloud: f.sample(256, 0, 0.01, &mut rng)?,
                label,
            });
        }
    }
    let refs: Vec<_> = samples.iter().collect();
    print!("{}", export_embeddings(&model, &refs, layer, 4)?);
    Ok(())
}
