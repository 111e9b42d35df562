//! Trains a few steps under each freezing policy and checks which tensors
//! moved.

use epcl::backbone::{FreezePolicy, TransformerConfig};
use epcl::data::{generate, load_dataset, SyntheticConfig};
use epcl::model::{ClassifierConfig, PointClassifier};
use epcl::training::{train, Classification, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> epcl::Result<()> {
    let dir = std::env::temp_dir().join("epcl-freeze-example");
    generate(&SyntheticConfig::new(4, 10, 128, 1), &dir)?;
    let ds = load_dataset(dir.join("manifest.txt"))?;
    let tr: Vec<_> = ds.train.iter().collect();

    for policy in [FreezePolicy::FrozenBackbone, FreezePolicy::FullFinetune, FreezePolicy::AllFrozen] {
        let bb = TransformerConfig {
            layers: 2,
            width: 32,
            heads: 2,
            ..TransformerConfig::small()
        };
        let mut cfg = ClassifierConfig::new(bb, ds.classes.len());
        cfg.tokenizer.patches = 16;
        cfg.tokenizer.neighbors = 8;
        cfg.tokenizer.hidden = [8, 16, 32];
        let mut model = PointClassifier::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(1))?;
        model.apply(policy);
        let before = model.store.digests_with_prefix("backbone.");
        let mut tc = TrainConfig::new(1);
        tc.epochs = 1;
        tc.batch_size = 8;
        let result = train(&mut Classification { model: &mut model, bank: None }, &tr, &[], &tc);
        let after = model.store.digests_with_prefix("backbone.");
        let moved = before.iter().zip(&after).filter(|(a, b)| a.1 != b.1).count();
        match result {
            Ok(r) => println!("{policy}: {} steps, {moved}/{} backbone tensors changed", r.steps, before.len()),
            Err(e) => println!("{policy}: {e}"),
        }
    }
    Ok(())
}
