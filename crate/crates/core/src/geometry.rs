//! Spatial kernels over raw point clouds.
//!
//! All routines are exact brute force, which is fast enough for clouds of a
//! few thousand points. Distance ties always resolve to the lower index so
//! results are reproducible bit for bit.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::tensor::Element;

/// Guard added to distances before inverting them for interpolation.
pub const INTERPOLATION_EPS: f64 = 1e-8;

/// `A×3` coordinates with optional per-point class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<[f32; 3]>,
    labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 3]>, labels: Option<Vec<u32>>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::Argument(format!("point {i} has a non-finite coordinate")));
        }
        if let Some(l) = &labels {
            if l.len() != points.len() {
                return Err(Error::Argument(format!(
                    "{} labels for {} points",
                    l.len(),
                    points.len()
                )));
            }
        }
        Ok(Self { points, labels })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f32; 3]] {
        &self.points
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn translated(&self, offset: [f32; 3]) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]])
                .collect(),
            labels: self.labels.clone(),
        }
    }

    /// Reorders points (and labels) so that new point `i` is old point `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.len()];
        for &o in order {
            if o >= self.len() || std::mem::replace(&mut seen[o], true) {
                return Err(Error::Argument("order is not a permutation".into()));
            }
        }
        if order.len() != self.len() {
            return Err(Error::Argument("order is not a permutation".into()));
        }
        Ok(Self {
            points: order.iter().map(|&i| self.points[i]).collect(),
            labels: self.labels.as_ref().map(|l| order.iter().map(|&i| l[i]).collect()),
        })
    }

    pub fn coords<T: Element>(&self) -> Vec<[T; 3]> {
        self.points
            .iter()
            .map(|p| p.map(|c| T::from_f32(c).expect("finite")))
            .collect()
    }
}

/// `M` patch centers and their `K` member indices into the parent cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet<T> {
    pub centers: Vec<[T; 3]>,
    /// Row-major `M×K`; row `i` is sorted by distance to center `i`.
    pub members: Vec<usize>,
    pub k: usize,
}

impl<T> PatchSet<T> {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn patch(&self, i: usize) -> &[usize] {
        &self.members[i * self.k..(i + 1) * self.k]
    }
}

#[inline]
pub fn squared_distance<T: Element>(a: &[T; 3], b: &[T; 3]) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Greedy max-min sampling of `m` indices starting from `start`.
///
/// Each step picks the unselected point farthest from everything already
/// chosen; among equal distances the lowest index wins. With `m == A` the
/// result is a permutation of all indices even when points coincide.
pub fn farthest_point_sample<T: Element>(points: &[[T; 3]], m: usize, start: usize) -> Result<Vec<usize>> {
    let a = points.len();
    if m == 0 || m > a {
        return Err(Error::Argument(format!("cannot sample {m} of {a} points")));
    }
    if start >= a {
        return Err(Error::Argument(format!("start index {start} out of range for {a} points")));
    }
    let mut chosen = Vec::with_capacity(m);
    let mut taken = vec![false; a];
    let mut nearest = vec![T::infinity(); a];
    let mut current = start;
    loop {
        chosen.push(current);
        taken[current] = true;
        if chosen.len() == m {
            break;
        }
        let c = points[current];
        let mut best: Option<(usize, T)> = None;
        for i in 0..a {
            if taken[i] {
                continue;
            }
            let d = squared_distance(&points[i], &c);
            if d < nearest[i] {
                nearest[i] = d;
            }
            if best.map_or(true, |(_, bd)| nearest[i] > bd) {
                best = Some((i, nearest[i]));
            }
        }
        current = best.expect("unselected point remains").0;
    }
    Ok(chosen)
}

fn by_distance_then_index<T: Element>(a: &(T, usize), b: &(T, usize)) -> Ordering {
    a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

/// The `k` nearest points to each query, row-major `Q×k`, each row sorted
/// by (distance, index).
pub fn knn_indices<T: Element>(points: &[[T; 3]], queries: &[[T; 3]], k: usize) -> Result<Vec<usize>> {
    knn_with_distances(points, queries, k).map(|(idx, _)| idx)
}

/// Like [`knn_indices`] but also returns the squared distances.
pub fn knn_with_distances<T: Element>(
    points: &[[T; 3]],
    queries: &[[T; 3]],
    k: usize,
) -> Result<(Vec<usize>, Vec<T>)> {
    if k == 0 || k > points.len() {
        return Err(Error::Argument(format!(
            "cannot take {k} neighbours from {} points",
            points.len()
        )));
    }
    let mut index = Vec::with_capacity(queries.len() * k);
    let mut dist = Vec::with_capacity(queries.len() * k);
    let mut scratch: Vec<(T, usize)> = Vec::with_capacity(points.len());
    for q in queries {
        scratch.clear();
        scratch.extend(points.iter().enumerate().map(|(i, p)| (squared_distance(p, q), i)));
        if k < scratch.len() {
            scratch.select_nth_unstable_by(k - 1, by_distance_then_index);
        }
        let head = &mut scratch[..k];
        head.sort_unstable_by(by_distance_then_index);
        index.extend(head.iter().map(|&(_, i)| i));
        dist.extend(head.iter().map(|&(d, _)| d));
    }
    Ok((index, dist))
}

/// Groups the `k` nearest cloud points around each center.
pub fn knn_group<T: Element>(points: &[[T; 3]], centers: &[[T; 3]], k: usize) -> Result<PatchSet<T>> {
    let members = knn_indices(points, centers, k)?;
    Ok(PatchSet {
        centers: centers.to_vec(),
        members,
        k,
    })
}

/// FPS centers followed by kNN grouping.
pub fn build_patches<T: Element>(points: &[[T; 3]], m: usize, k: usize, start: usize) -> Result<PatchSet<T>> {
    if k > points.len() {
        return Err(Error::Argument(format!(
            "cannot take {k} neighbours from {} points",
            points.len()
        )));
    }
    let idx = farthest_point_sample(points, m, start)?;
    let centers: Vec<_> = idx.iter().map(|&i| points[i]).collect();
    knn_group(points, &centers, k)
}

/// Member coordinates relative to their patch center.
pub fn normalize_patch<T: Element>(members: &[[T; 3]], center: &[T; 3]) -> Vec<[T; 3]> {
    members
        .iter()
        .map(|p| [p[0] - center[0], p[1] - center[1], p[2] - center[2]])
        .collect()
}

/// Inverse-distance weights over the `k` nearest sources of each query.
///
/// Returns row-major `Q×k` source indices and weights; each weight row sums
/// to one. Distances are Euclidean with [`INTERPOLATION_EPS`] added.
pub fn interpolation_weights<T: Element>(
    sources: &[[T; 3]],
    queries: &[[T; 3]],
    k: usize,
) -> Result<(Vec<usize>, Vec<T>)> {
    if sources.len() < k {
        return Err(Error::Argument(format!(
            "interpolation needs at least {k} sources, got {}",
            sources.len()
        )));
    }
    let (index, sq) = knn_with_distances(sources, queries, k)?;
    let eps = T::from_f64_lossy(INTERPOLATION_EPS);
    let mut weights: Vec<T> = sq.iter().map(|&d| T::one() / (d.sqrt() + eps)).collect();
    for row in weights.chunks_mut(k) {
        let total: T = row.iter().copied().sum();
        row.iter_mut().for_each(|w| *w = *w / total);
    }
    Ok((index, weights))
}

/// Interpolates `S×D` source features (row-major) onto the queries.
pub fn interpolate_features<T: Element>(
    sources: &[[T; 3]],
    features: &[T],
    queries: &[[T; 3]],
    k: usize,
) -> Result<Vec<T>> {
    if sources.is_empty() || features.len() % sources.len() != 0 {
        return Err(Error::shape("interpolate_features", &[sources.len(), 3], &[features.len()]));
    }
    let d = features.len() / sources.len();
    let (index, weights) = interpolation_weights(sources, queries, k)?;
    let mut out = vec![T::zero(); queries.len() * d];
    for (q, row) in out.chunks_mut(d.max(1)).enumerate() {
        for j in q * k..(q + 1) * k {
            let src = &features[index[j] * d..(index[j] + 1) * d];
            row.iter_mut().zip(src).for_each(|(o, &s)| *o += weights[j] * s);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fps_small_cases() {
        let one = [[0.0f64, 0.0, 0.0]];
        assert_eq!(farthest_point_sample(&one, 1, 0).unwrap(), vec![0]);
        let line = [[0.0f64, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 0.0, 0.0]];
        assert_eq!(farthest_point_sample(&line, 2, 0).unwrap(), vec![0, 1]);
        assert!(farthest_point_sample(&line, 4, 0).is_err());
        assert!(farthest_point_sample(&line, 1, 3).is_err());
    }

    #[test]
    fn fps_exhausts_with_duplicates() {
        let pts = [[0.0f32, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let mut got = farthest_point_sample(&pts, 4, 0).unwrap();
        got.sort();
        assert_eq!(got, vec![0, 1, 2, 3]);
    }

    #[test]
    fn knn_cases() {
        let pts = [[0.0f64, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let g = knn_group(&pts, &[[0.0, 0.0, 0.0]], 2).unwrap();
        assert_eq!(g.patch(0), &[0, 1]);
        let all = knn_group(&pts, &[[5.0, 0.0, 0.0], [0.9, 0.0, 0.0]], 3).unwrap();
        assert_eq!(all.patch(0), &[2, 1, 0]);
        assert_eq!(all.patch(1), &[1, 0, 2]);
        assert!(knn_group(&pts, &[[0.0; 3]], 4).is_err());
    }

    #[test]
    fn knn_tie_prefers_lower_index() {
        let pts = [[1.0f64, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        assert_eq!(knn_indices(&pts, &[[0.0; 3]], 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn interpolation_cases() {
        let src = [[0.0f64, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [5.0, 5.0, 5.0]];
        let feats = [1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0];
        let out = interpolate_features(&src, &feats, &[[1.0, 0.0, 0.0]], 3).unwrap();
        assert!((out[0] - 2.0).abs() < 1e-6 && (out[1] - 20.0).abs() < 1e-6, "{out:?}");

        let tri = [[1.0f64, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let out = interpolate_features(&tri, &[3.0, 6.0, 9.0], &[[0.0; 3]], 3).unwrap();
        assert!((out[0] - 6.0).abs() < 1e-12);

        assert!(interpolate_features(&tri[..2], &[1.0, 2.0], &[[0.0; 3]], 3).is_err());
    }

    #[test]
    fn normalize_patch_cases() {
        let c = [0.25f64, -1.0, 3.0];
        assert!(normalize_patch(&[c, c], &c).iter().flatten().all(|&v| v == 0.0));
        let p = normalize_patch(&[[1.0, 2.0, 3.0]], &[0.5, 0.5, 0.5]);
        assert_eq!(p, vec![[0.5, 1.5, 2.5]]);
    }

    #[test]
    fn cloud_validation() {
        assert!(PointCloud::new(vec![[f32::NAN, 0.0, 0.0]], None).is_err());
        assert!(PointCloud::new(vec![[0.0; 3]], Some(vec![0, 1])).is_err());
        let c = PointCloud::new(vec![[0.0; 3], [1.0; 3]], Some(vec![3, 4])).unwrap();
        let p = c.permuted(&[1, 0]).unwrap();
        assert_eq!(p.labels().unwrap(), &[4, 3]);
        assert!(c.permuted(&[0, 0]).is_err());
    }
}
