//! Layer-wise correlation between image and point-cloud category features
//! through one shared random backbone.

use epcl::analysis::{alignment_curve, cloud_category_features, image_category_features, Estimator};
use epcl::backbone::{Transformer, TransformerConfig};
use epcl::data::{render_depth, FAMILIES};
use epcl::tensor::ParamStore;
use epcl::tokenization::{ImageTokenizer, ImageTokenizerConfig, PointTokenizer, PointTokenizerConfig, TaskToken};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> epcl::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::<f32>::new();
    let bb = Transformer::new(&mut store, TransformerConfig::small(), &mut rng)?;
    let d = bb.cfg.width;
    let mut tc = PointTokenizerConfig::new(d);
    tc.patches = 32;
    tc.neighbors = 16;
    let tok = PointTokenizer::new(&mut store, "point_tokenizer", tc, &mut rng)?;
    let task = TaskToken::new(&mut store, "task", 1, d, &mut rng)?;
    let img_cfg = ImageTokenizerConfig {
        patch: 8,
        height: 32,
        image_width: 32,
        channels: 1,
        width: d,
    };
    let img_tok = ImageTokenizer::new(&mut store, "image_tokenizer", img_cfg, &mut rng)?;

    let mut clouds = Vec::new();
    let mut images = Vec::new();
    for f in FAMILIES {
        let cs: Vec<_> = (0..6).map(|_| f.sample(512, 0, 0.01, &mut rng)).collect::<epcl::Result<_>>()?;
        images.push(cs.iter().map(|c| render_depth(c, 32)).collect::<Vec<_>>());
        clouds.push(cs);
    }
    let names: Vec<String> = FAMILIES.iter().map(|f| f.name().to_string()).collect();
    let cloud_refs: Vec<Vec<_>> = clouds.iter().map(|c| c.iter().collect()).collect();
    let image_refs: Vec<Vec<_>> = images.iter().map(|c| c.iter().collect()).collect();

    let f3d = cloud_category_features(&store, &bb, &tok, &task, &cloud_refs)?;
    let f2d = image_category_features(&store, &bb, &img_tok, &image_refs)?;
    let curve = alignment_curve(&f2d, &f3d, &names, &names, Estimator::Pearson)?;
    print!("{}", curve.to_text());
    print!("{}", curve.matrices.last().expect("L + 1 layers").to_text());

    let same = alignment_curve(&f3d, &f3d, &names, &names, Estimator::Pearson)?;
    println!("identical inputs: {:?}", same.values);
    Ok(())
}
