//! Trains the point classifier on a generated 4-class shape dataset with a
//! frozen random backbone and prints per-epoch metrics.
//!
//! ```text
//! cargo run --release --example train_classifier -- [epochs] [seed]
//! ```

use std::time::Instant;

use epcl::backbone::TransformerConfig;
use epcl::data::{generate, load_dataset, SyntheticConfig};
use epcl::model::{ClassifierConfig, PointClassifier};
use epcl::training::{train, Classification, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> epcl::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|s| s.parse().ok()).unwrap_or(30);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(7);

    let dir = std::env::temp_dir().join(format!("epcl-train-example-{seed}"));
    generate(&SyntheticConfig::new(4, 100, 512, seed), &dir)?;
    let ds = load_dataset(dir.join("manifest.txt"))?;

    let mut cfg = ClassifierConfig::new(TransformerConfig::small(), ds.classes.len());
    cfg.tokenizer.patches = 32;
    cfg.tokenizer.neighbors = 16;
    cfg.tokenizer.hidden = [32, 64, 128];
    cfg.tokenizer.pos_hidden = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = PointClassifier::<f32>::new(cfg, &mut rng)?;
    println!(
        "{} tensors, {} trainable",
        model.store.len(),
        model.store.trainable_count()
    );

    let mut tc = TrainConfig::new(seed);
    tc.epochs = epochs;
    let train_set: Vec<_> = ds.train.iter().collect();
    let test_set: Vec<_> = ds.test.iter().collect();
    let start = Instant::now();
    let report = train(&mut Classification { model: &mut model, bank: None }, &train_set, &test_set, &tc)?;
    print!("{}", report.to_csv());
    println!("{:.1}s for {} steps", start.elapsed().as_secs_f64(), report.steps);
    Ok(())
}
