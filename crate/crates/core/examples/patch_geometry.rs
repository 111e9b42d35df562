//! Farthest point sampling, kNN patches and three-nearest interpolation on
//! a generated sphere.

use epcl::data::Family;
use epcl::geometry::{build_patches, farthest_point_sample, interpolate_features};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> epcl::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cloud = Family::Sphere.sample(1024, 0, 0.01, &mut rng)?;
    let pts = cloud.coords::<f64>();

    let centers = farthest_point_sample(&pts, 8, 0)?;
    println!("fps centers: {centers:?}");

    let patches = build_patches(&pts, 64, 16, 0)?;
    println!("{} patches of {} points", patches.len(), patches.k);
    println!("patch 0 members: {:?}", patches.patch(0));

    // Height of each center, spread back to every point of the cloud.
    let heights: Vec<f64> = patches.centers.iter().map(|c| c[2]).collect();
    let dense = interpolate_features(&patches.centers, &heights, &pts, 3)?;
    let err = dense.iter().zip(&pts).map(|(h, p)| (h - p[2]).abs()).fold(0.0, f64::max);
    println!("max |interpolated z - z| over {} points: {err:.3}", pts.len());
    Ok(())
}
