//! Trains the per-point segmentation head on two-label planes.
//!
//! ```text
//! cargo run --release --example segment_planes -- [epochs]
//! ```

use epcl::backbone::TransformerConfig;
use epcl::data::{generate, load_dataset, SyntheticConfig};
use epcl::heads::SegmentationConfig;
use epcl::model::{PointSegmenter, SegmenterConfig};
use epcl::training::{train, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> epcl::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let dir = std::env::temp_dir().join("epcl-segment-example");
    let mut syn = SyntheticConfig::new(2, 40, 512, 2);
    syn.segmentation = true;
    generate(&syn, &dir)?;
    let ds = load_dataset(dir.join("manifest.txt"))?;

    let backbone = TransformerConfig {
        layers: 2,
        width: 64,
        heads: 4,
        ..TransformerConfig::small()
    };
    let cfg = SegmenterConfig {
        pipeline: SegmentationConfig::halving(512, backbone.width, 2),
        backbone,
        task_tokens: 1,
    };
    let mut model = PointSegmenter::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(2))?;
    let mut tc = TrainConfig::new(2);
    tc.epochs = epochs;
    tc.batch_size = 8;
    tc.optimizer.lr = 1e-3;
    let tr: Vec<_> = ds.train.iter().collect();
    let te: Vec<_> = ds.test.iter().collect();
    let report = train(&mut model, &tr, &te, &tc)?;
    print!("{}", report.to_csv());
    Ok(())
}
