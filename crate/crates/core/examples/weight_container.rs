//! Saves a model to an EPCLWGT1 file, reloads it, prints the tensor table
//! and shows the diagnostic for a damaged payload.

use epcl::backbone::{FreezePolicy, TransformerConfig, WeightContainer};
use epcl::model::{ClassifierConfig, PointClassifier};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> epcl::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let bb = TransformerConfig {
        layers: 1,
        width: 32,
        heads: 2,
        ..TransformerConfig::small()
    };
    let mut cfg = ClassifierConfig::new(bb, 3);
    cfg.tokenizer.hidden = [8, 16, 32];
    cfg.tokenizer.pos_hidden = 16;
    cfg.head.hidden = 16;
    let model = PointClassifier::<f32>::new(cfg.clone(), &mut rng)?;

    let container = model.to_container("example");
    let bytes = container.to_bytes()?;
    let back = WeightContainer::from_bytes(&bytes)?;
    println!("{} bytes, reload identical: {}", bytes.len(), back.to_bytes()? == bytes);
    print!("{}", back.table());

    let mut again = PointClassifier::<f32>::from_container(&back, cfg, &mut rng)?;
    again.apply(FreezePolicy::FullFinetune);
    println!("trainable after full-finetune: {}", again.store.trainable_count());

    let mut broken = bytes.clone();
    broken.truncate(bytes.len() - 5);
    match WeightContainer::from_bytes(&broken) {
        Ok(_) => println!("truncated file accepted"),
        Err(e) => println!("truncated file rejected: {e}"),
    }
    Ok(())
}
