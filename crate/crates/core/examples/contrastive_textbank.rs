//! Classification loss with and without the contrastive term against a
//! text feature bank.

use epcl::backbone::TransformerConfig;
use epcl::data::FAMILIES;
use epcl::heads::{contrastive_loss, total_classification_loss, TextFeatureBank};
use epcl::model::{ClassifierConfig, PointClassifier};
use epcl::tensor::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> epcl::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let dim = 32;
    let names: Vec<String> = FAMILIES.iter().map(|f| f.name().to_string()).collect();
    let vectors = (0..names.len() * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let bank = TextFeatureBank::new(names, dim, vectors, "random")?;
    print!("{}", bank.to_text().lines().next().unwrap_or(""));
    println!();

    let bb = TransformerConfig {
        layers: 2,
        width: 32,
        heads: 4,
        ..TransformerConfig::small()
    };
    let mut cfg = ClassifierConfig::new(bb, bank.classes());
    cfg.tokenizer.patches = 16;
    cfg.tokenizer.neighbors = 8;
    cfg.tokenizer.hidden = [8, 16, 32];
    cfg.head.text_dim = Some(dim);
    let model = PointClassifier::<f32>::new(cfg, &mut rng)?;

    let clouds: Vec<_> = FAMILIES.iter().map(|f| f.sample(256, 0, 0.01, &mut rng)).collect::<epcl::Result<_>>()?;
    let refs: Vec<_> = clouds.iter().collect();
    let labels: Vec<usize> = (0..clouds.len()).collect();

    let mut tape = Tape::new(&model.store);
    let pass = model.forward::<ChaCha8Rng>(&mut tape, &refs, None)?;
    let ce = tape.cross_entropy(pass.logits, &labels)?;
    let proj = pass.proj.expect("text_dim set");
    let con = contrastive_loss(&mut tape, proj, &labels, &bank, 0.07)?;
    for lambda in [0.0, 0.5, 1.0] {
        let total = total_classification_loss(&mut tape, ce, Some(con), lambda)?;
        println!("lambda {lambda}: loss {:.4}", tape.value(total)[0]);
    }
    Ok(())
}
