use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Test samples drawn per selected class in a K-way N-shot episode.
pub const TEST_PER_CLASS: usize = 20;

/// Index sets into the train and test splits. `classes[i]` is the
/// original label that episode label `i` stands for.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FewShotEpisode {
    pub way: usize,
    pub shot: usize,
    pub classes: Vec<usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl FewShotEpisode {
    /// Episode-local label of an original label.
    pub fn remap(&self, label: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == label)
    }
}

fn by_class(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        map.entry(l).or_default().push(i);
    }
    map
}

fn draw(pool: Option<&Vec<usize>>, n: usize, class: usize, split: &str, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let pool = pool.map(Vec::as_slice).unwrap_or_default();
    if pool.len() < n {
        return Err(Error::Argument(format!(
            "class {class} has {} {split} samples, {n} needed",
            pool.len()
        )));
    }
    Ok(pool.choose_multiple(rng, n).copied().collect())
}

/// Picks `way` classes uniformly, then `shot` training and
/// [`TEST_PER_CLASS`] test samples from each.
pub fn sample_kway_nshot(
    train_labels: &[usize],
    test_labels: &[usize],
    way: usize,
    shot: usize,
    seed: u64,
) -> Result<FewShotEpisode> {
    let train = by_class(train_labels);
    let test = by_class(test_labels);
    let mut universe: Vec<usize> = train.keys().chain(test.keys()).copied().collect();
    universe.sort_unstable();
    universe.dedup();
    if way == 0 || shot == 0 {
        return Err(Error::Argument("way and shot must be positive".into()));
    }
    if way > universe.len() {
        return Err(Error::Argument(format!(
            "{way}-way episode requested from {} classes",
            universe.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<usize> = universe.choose_multiple(&mut rng, way).copied().collect();
    classes.sort_unstable();
    let mut ep = FewShotEpisode {
        way,
        shot,
        classes: classes.clone(),
        train: Vec::with_capacity(way * shot),
        test: Vec::with_capacity(way * TEST_PER_CLASS),
        seed,
    };
    for &c in &classes {
        ep.train.extend(draw(train.get(&c), shot, c, "train", &mut rng)?);
        ep.test.extend(draw(test.get(&c), TEST_PER_CLASS, c, "test", &mut rng)?);
    }
    ep.train.sort_unstable();
    ep.test.sort_unstable();
    Ok(ep)
}

/// `shot` training samples from every class; the test split is kept whole.
pub fn sample_all_classes(train_labels: &[usize], test_labels: &[usize], shot: usize, seed: u64) -> Result<FewShotEpisode> {
    let train = by_class(train_labels);
    let classes: Vec<usize> = train.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(classes.len() * shot);
    for &c in &classes {
        picked.extend(draw(train.get(&c), shot, c, "train", &mut rng)?);
    }
    picked.sort_unstable();
    Ok(FewShotEpisode {
        way: classes.len(),
        shot,
        classes,
        train: picked,
        test: (0..test_labels.len()).collect(),
        seed,
    })
}

/// Sixteen training samples per class across every class.
pub fn sample_16shot(train_labels: &[usize], test_labels: &[usize], seed: u64) -> Result<FewShotEpisode> {
    sample_all_classes(train_labels, test_labels, 16, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(classes: usize, per: usize) -> Vec<usize> {
        (0..classes).flat_map(|c| std::iter::repeat(c).take(per)).collect()
    }

    #[test]
    fn counts_and_determinism() {
        let tr = labels(10, 30);
        let te = labels(10, 25);
        let ep = sample_kway_nshot(&tr, &te, 5, 10, 7).unwrap();
        assert_eq!((ep.train.len(), ep.test.len()), (50, 100));
        assert_eq!(ep, sample_kway_nshot(&tr, &te, 5, 10, 7).unwrap());
        for c in &ep.classes {
            assert_eq!(ep.train.iter().filter(|&&i| tr[i] == *c).count(), 10);
            assert_eq!(ep.test.iter().filter(|&&i| te[i] == *c).count(), 20);
        }
    }

    #[test]
    fn shortage_names_the_class() {
        let tr = labels(3, 30);
        let mut te = labels(3, 25);
        te.truncate(65);
        let err = sample_kway_nshot(&tr, &te, 3, 5, 1).unwrap_err().to_string();
        assert!(err.contains("class 2"), "{err}");
    }

    #[test]
    fn sixteen_shot() {
        let ep = sample_16shot(&labels(2, 20), &labels(2, 7), 3).unwrap();
        assert_eq!(ep.train.len(), 32);
        assert_eq!(ep.test.len(), 14);
        assert!(sample_16shot(&labels(2, 15), &labels(2, 7), 3).is_err());
    }
}
