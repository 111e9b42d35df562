//! Draws K-way N-shot and 16-shot episodes and prints their sizes.

use epcl::training::{sample_16shot, sample_kway_nshot};

fn main() -> epcl::Result<()> {
    let train: Vec<usize> = (0..40).flat_map(|c| std::iter::repeat(c).take(30)).collect();
    let test: Vec<usize> = (0..40).flat_map(|c| std::iter::repeat(c).take(25)).collect();
    for (way, shot) in [(5, 10), (5, 20), (10, 10), (30, 10)] {
        let ep = sample_kway_nshot(&train, &test, way, shot, 7)?;
        println!(
            "{way:>2}-way {shot:>2}-shot: {:>3} train / {:>3} test, classes {:?}",
            ep.train.len(),
            ep.test.len(),
            &ep.classes[..5]
        );
    }
    let ep = sample_16shot(&train, &test, 7)?;
    println!("16-shot: {} train / {} test", ep.train.len(), ep.test.len());
    Ok(())
}
