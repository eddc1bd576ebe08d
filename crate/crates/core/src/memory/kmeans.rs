//! Spherical k-means over unit vectors.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::tensor::{dot, normalized};
use crate::Real;

pub const MAX_ITERATIONS: usize = 25;
const REPAIR_ROUNDS: usize = 10;

#[derive(Clone, Debug)]
pub struct KMeans {
    pub k: usize,
    pub dim: usize,
    /// `k × dim`, unit rows.
    pub centroids: Vec<Real>,
    pub assignment: Vec<u32>,
    /// `Σ (1 − cos)` after each assignment step.
    pub inertia: Vec<f64>,
    pub iterations: usize,
    /// Clusters still empty after repair (only possible with fewer than `k`
    /// distinct points).
    pub empty_clusters: usize,
}

/// Index of the most similar centroid; ties go to the lower index.
pub fn nearest(centroids: &[Real], dim: usize, x: &[Real]) -> (usize, Real) {
    let mut best = (0, Real::NEG_INFINITY);
    for (c, row) in centroids.chunks(dim).enumerate() {
        let s = dot(row, x);
        if s > best.1 {
            best = (c, s);
        }
    }
    best
}

fn assign(points: &[Real], dim: usize, centroids: &[Real]) -> (Vec<u32>, Vec<Real>) {
    points
        .par_chunks(dim)
        .map(|p| {
            let (c, s) = nearest(centroids, dim, p);
            (c as u32, s)
        })
        .unzip()
}

fn inertia(cos: &[Real]) -> f64 {
    cos.iter().map(|&c| 1.0 - c as f64).sum()
}

fn sizes(assignment: &[u32], k: usize) -> Vec<usize> {
    let mut s = vec![0; k];
    for &a in assignment {
        s[a as usize] += 1;
    }
    s
}

/// Reseeds each empty cluster with the member of the currently largest
/// cluster that is least similar to its centroid. Returns how many clusters
/// stayed empty.
fn repair(points: &[Real], dim: usize, centroids: &mut [Real], assignment: &mut [u32], cos: &mut [Real]) -> usize {
    let k = centroids.len() / dim;
    let mut counts = sizes(assignment, k);
    let mut left = 0;
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let largest = (0..k).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap();
        if counts[largest] < 2 {
            left += 1;
            continue;
        }
        let worst = (0..assignment.len())
            .filter(|&i| assignment[i] as usize == largest)
            .min_by(|&a, &b| cos[a].partial_cmp(&cos[b]).unwrap().then(a.cmp(&b)))
            .unwrap();
        let p = &points[worst * dim..(worst + 1) * dim];
        centroids[empty * dim..(empty + 1) * dim].copy_from_slice(p);
        assignment[worst] = empty as u32;
        cos[worst] = dot(p, p);
        counts[largest] -= 1;
        counts[empty] = 1;
    }
    left
}

fn update(points: &[Real], dim: usize, assignment: &[u32], centroids: &mut [Real]) {
    let k = centroids.len() / dim;
    let mut sums = vec![0.0 as Real; k * dim];
    for (p, &a) in points.chunks(dim).zip(assignment) {
        let a = a as usize;
        for (s, x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p) {
            *s += x;
        }
    }
    for c in 0..k {
        let sum = &sums[c * dim..(c + 1) * dim];
        if sum.iter().any(|&x| x != 0.0) {
            centroids[c * dim..(c + 1) * dim].copy_from_slice(&normalized(sum));
        }
    }
}

/// Clusters `n = points.len() / dim` unit vectors into `k ≤ n` groups.
///
/// Centroids start at `k` distinct randomly chosen points. Lloyd iterations
/// stop once an assignment repeats or after [`MAX_ITERATIONS`]; the returned
/// assignment is always the nearest-centroid assignment for the returned
/// centroids.
pub fn spherical_kmeans<R: Rng + ?Sized>(points: &[Real], dim: usize, k: usize, rng: &mut R) -> KMeans {
    let n = points.len() / dim;
    assert!(k >= 1 && k <= n, "need 1 ≤ k ≤ n");
    let mut centroids = Vec::with_capacity(k * dim);
    for i in sample(rng, n, k).into_iter() {
        centroids.extend_from_slice(&points[i * dim..(i + 1) * dim]);
    }
    let mut history = Vec::new();
    let mut prev: Option<Vec<u32>> = None;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        let (mut a, mut cos) = assign(points, dim, &centroids);
        repair(points, dim, &mut centroids, &mut a, &mut cos);
        history.push(inertia(&cos));
        iterations += 1;
        if prev.as_ref() == Some(&a) {
            break;
        }
        update(points, dim, &a, &mut centroids);
        prev = Some(a);
    }
    // Final nearest-centroid pass against the final centroids.
    let mut empty = 0;
    let mut assignment = Vec::new();
    for _ in 0..REPAIR_ROUNDS {
        let (mut a, mut cos) = assign(points, dim, &centroids);
        let before = sizes(&a, k).iter().filter(|&&s| s == 0).count();
        if before == 0 {
            history.push(inertia(&cos));
            assignment = a;
            empty = 0;
            break;
        }
        empty = repair(points, dim, &mut centroids, &mut a, &mut cos);
        assignment = a;
        if empty == before {
            break;
        }
    }
    KMeans {
        k,
        dim,
        centroids,
        assignment,
        inertia: history,
        iterations,
        empty_clusters: empty,
    }
}
