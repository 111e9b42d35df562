mod common;

use common::{fps_oracle, geometry_report, knn_oracle, random_cloud, sq};
use epcl::geometry::{
    build_patches, farthest_point_sample, interpolation_weights, knn_indices, normalize_patch, PointCloud,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn oracles_agree_on_random_clouds() {
    let (fps, knn, interp) = geometry_report(200, 11);
    assert_eq!(fps, 0);
    assert_eq!(knn, 0);
    assert!(interp <= 1e-6, "{interp}");
}

#[test]
fn ties_resolve_to_lowest_index() {
    // Four corners of a square around the start point: all equally far.
    let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0]];
    assert_eq!(farthest_point_sample(&pts, 2, 0).unwrap(), vec![0, 1]);
    assert_eq!(knn_indices(&pts, &[[0.0, 0.0, 0.0]], 3).unwrap(), vec![0, 1, 2]);
    let dup = [[1.0, 1.0, 1.0]; 4];
    assert_eq!(farthest_point_sample(&dup, 4, 2).unwrap(), vec![2, 0, 1, 3]);
}

#[test]
fn hand_computed_interpolation() {
    let src: [[f64; 3]; 4] = [[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 4.0, 0.0], [9.0, 9.0, 9.0]];
    let (idx, w) = interpolation_weights(&src, &[[0.0, 0.0, 0.0]], 3).unwrap();
    assert_eq!(idx, vec![0, 1, 2]);
    // Query sits on source 0, whose weight dominates up to ε.
    assert!((w[0] - 1.0).abs() < 1e-7, "{w:?}");
    let (_, w) = interpolation_weights(&src, &[[1.0, 0.0, 0.0]], 3).unwrap();
    let inv = [1.0, 1.0, 1.0 / 17f64.sqrt()];
    let total: f64 = inv.iter().sum();
    for (a, b) in w.iter().zip(inv.iter().map(|v| v / total)) {
        assert!((a - b).abs() < 1e-7);
    }
}

#[test]
fn errors_for_impossible_requests() {
    let pts = [[0.0f64; 3]; 3];
    assert!(farthest_point_sample(&pts, 4, 0).is_err());
    assert!(farthest_point_sample(&pts, 0, 0).is_err());
    assert!(knn_indices(&pts, &[[0.0; 3]], 4).is_err());
    assert!(build_patches(&pts, 2, 5, 0).is_err());
    assert!(PointCloud::new(vec![[0.0; 3]; 2], Some(vec![1])).is_err());
}

fn cloud_strategy() -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec(prop::array::uniform3(-10.0f64..10.0), 3..48)
}

proptest! {
    #[test]
    fn fps_is_a_prefix_of_distinct_indices(pts in cloud_strategy(), m_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let n = pts.len();
        let m = 1 + ((n - 1) as f64 * m_frac) as usize;
        let start = (seed % n as u64) as usize;
        let got = farthest_point_sample(&pts, m, start).unwrap();
        prop_assert_eq!(got.len(), m);
        prop_assert_eq!(got[0], start);
        let mut sorted = got.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), m);
        let full = farthest_point_sample(&pts, n, start).unwrap();
        prop_assert_eq!(&full[..m], &got[..]);
        prop_assert_eq!(got, fps_oracle(&pts, m, start));
    }

    #[test]
    fn knn_rows_are_sorted_and_complete(pts in cloud_strategy(), q in prop::array::uniform3(-10.0f64..10.0), k_frac in 0.0f64..1.0) {
        let k = 1 + ((pts.len() - 1) as f64 * k_frac) as usize;
        let row = knn_indices(&pts, &[q], k).unwrap();
        let d: Vec<f64> = row.iter().map(|&i| sq(&pts[i], &q)).collect();
        prop_assert!(d.windows(2).all(|w| w[0] <= w[1]));
        let last = d[k - 1];
        for i in 0..pts.len() {
            if !row.contains(&i) {
                prop_assert!(sq(&pts[i], &q) >= last);
            }
        }
        prop_assert_eq!(row, knn_oracle(&pts, &q, k));
    }

    #[test]
    fn interpolation_weights_are_a_partition_of_unity(pts in cloud_strategy(), qs in prop::collection::vec(prop::array::uniform3(-10.0f64..10.0), 1..6)) {
        let (idx, w) = interpolation_weights(&pts, &qs, 3).unwrap();
        prop_assert_eq!(idx.len(), qs.len() * 3);
        for row in w.chunks(3) {
            prop_assert!(row.iter().all(|&x| x >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn patches_are_center_relative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = random_cloud(&mut rng);
        let n = pts.len();
        let (m, k) = (1 + n / 4, 1 + n / 3);
        let set = build_patches(&pts, m, k, 0).unwrap();
        for i in 0..m {
            let members: Vec<[f64; 3]> = set.patch(i).iter().map(|&j| pts[j]).collect();
            let local = normalize_patch(&members, &set.centers[i]);
            // The center is its own nearest neighbour (distance 0).
            prop_assert_eq!(sq(&members[0], &set.centers[i]), 0.0);
            for (l, p) in local.iter().zip(&members) {
                for a in 0..3 {
                    prop_assert!((l[a] + set.centers[i][a] - p[a]).abs() < 1e-12);
                }
            }
        }
    }
}
