mod common;

use common::tokenizer_invariance;
use epcl::backbone::{Transformer, TransformerConfig};
use epcl::data::Family;
use epcl::tensor::{ParamStore, Tape};
use epcl::tokenization::{PointTokenizer, PointTokenizerConfig, TaskToken};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn invariances_hold_over_seeds() {
    for seed in 0..8 {
        let inv = tokenizer_invariance(seed);
        assert!(inv.within_patch <= 1e-5, "seed {seed}: {}", inv.within_patch);
        assert!(inv.whole_cloud <= 1e-5, "seed {seed}: {}", inv.whole_cloud);
        assert!(inv.translation_tokens <= 1e-5, "seed {seed}: {}", inv.translation_tokens);
        assert!(inv.translation_positions > 1e-3, "seed {seed}: {}", inv.translation_positions);
    }
}

fn setup(task_tokens: usize) -> (ParamStore<f32>, PointTokenizer, TaskToken) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let mut cfg = PointTokenizerConfig::new(16);
    cfg.patches = 8;
    cfg.neighbors = 4;
    cfg.hidden = [8, 8, 16];
    cfg.pos_hidden = 8;
    let tok = PointTokenizer::new(&mut store, "tok", cfg, &mut rng).unwrap();
    let task = TaskToken::new(&mut store, "task", task_tokens, 16, &mut rng).unwrap();
    (store, tok, task)
}

#[test]
fn sequence_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let clouds: Vec<_> = (0..3).map(|_| Family::Sphere.sample(64, 0, 0.0, &mut rng).unwrap()).collect();
    let refs: Vec<_> = clouds.iter().collect();
    for g in [0, 1, 3] {
        let (store, tok, task) = setup(g);
        let mut tape = Tape::inference(&store);
        let seq = tok.tokenize(&mut tape, &refs, &task).unwrap();
        assert_eq!(seq.len, 1 + g + 8);
        assert_eq!(tape.shape(seq.tokens), &[3 * seq.len, 16]);
        assert_eq!(tape.shape(seq.positional), &[3 * seq.len, 16]);
        assert_eq!(seq.cls_rows(), vec![0, seq.len, 2 * seq.len]);
        assert_eq!(seq.patch_rows().len(), 3 * 8);
        assert_eq!(seq.first_patch_row(1), seq.len + 1 + g);
        // The CLS row is shared by every sample; patches are not.
        let v = tape.value(seq.tokens);
        assert_eq!(&v[..16], &v[seq.len * 16..seq.len * 16 + 16]);
    }
}

#[test]
fn enumeration_input() {
    let e = TaskToken::enumeration::<f64>(3, 2);
    assert_eq!(e, vec![0.0, 0.0, 0.5, 0.5, 1.0, 1.0]);
    assert_eq!(TaskToken::enumeration::<f64>(1, 2), vec![0.0, 0.0]);
}

#[test]
fn batched_and_single_tokenization_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Family::Cube.sample(64, 0, 0.01, &mut rng).unwrap();
    let b = Family::Plane.sample(64, 0, 0.01, &mut rng).unwrap();
    let (store, tok, task) = setup(1);
    let mut tape = Tape::inference(&store);
    let both = tok.tokenize(&mut tape, &[&a, &b], &task).unwrap();
    let only_b = tok.tokenize(&mut tape, &[&b], &task).unwrap();
    let d = 16;
    let len = both.len;
    let batched = &tape.value(both.tokens)[len * d..2 * len * d];
    assert_eq!(batched, tape.value(only_b.tokens));
}

#[test]
fn undersized_cloud_is_rejected() {
    let (store, tok, task) = setup(1);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tiny = Family::Sphere.sample(6, 0, 0.0, &mut rng).unwrap();
    let mut tape = Tape::inference(&store);
    assert!(tok.tokenize(&mut tape, &[&tiny], &task).is_err());
    assert!(tok.tokenize(&mut tape, &[], &task).is_err());
}

#[test]
fn backbone_with_no_blocks_is_identity_plus_final_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut store, tok, task) = setup(1);
    let cfg = TransformerConfig {
        layers: 0,
        width: 16,
        heads: 2,
        ..TransformerConfig::small()
    };
    let bb = Transformer::new(&mut store, cfg, &mut rng).unwrap();
    let cloud = Family::Cylinder.sample(64, 0, 0.01, &mut rng).unwrap();
    let mut tape = Tape::inference(&store);
    let seq = tok.tokenize(&mut tape, &[&cloud], &task).unwrap();
    let out = bb.forward::<f32, ChaCha8Rng>(&mut tape, &seq, None).unwrap();
    assert_eq!(out.layers.len(), 1);
    let x = seq.embedded(&mut tape).unwrap();
    assert_eq!(tape.value(out.layers[0]), tape.value(x));
}
