use rand::Rng;

use crate::error::{Error, Result};
use crate::tensorcore::{BinaryMask, FeatureMap};

/// Default number of assignment rounds.
pub const DEFAULT_MAX_ITER: usize = 10;

/// Output of [`cosine_kmeans`].
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterResult {
    /// Cluster index per pixel, row-major.
    pub assignments: Vec<usize>,
    /// Unit-norm cluster centres.
    pub centers: Vec<Vec<f64>>,
    /// Objective after every assignment round.
    pub objective_trace: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl ClusterResult {
    pub fn n_clusters(&self) -> usize {
        self.centers.len()
    }

    /// Indicator mask of cluster `k`.
    pub fn mask(&self, k: usize) -> BinaryMask {
        BinaryMask::new(
            self.height,
            self.width,
            self.assignments.iter().map(|&a| a == k).collect(),
        )
        .expect("assignment length matches grid")
    }

    pub fn masks(&self) -> Vec<BinaryMask> {
        (0..self.n_clusters()).map(|k| self.mask(k)).collect()
    }
}

pub(crate) fn normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter().map(|x| x / norm).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// Unit vector along `v`, or the first axis when `v` is zero.
fn unit_or_axis(v: &[f64]) -> Vec<f64> {
    let u = normalize(v);
    if u.iter().any(|&x| x != 0.0) {
        u
    } else {
        let mut e = vec![0.0; v.len()];
        if let Some(first) = e.first_mut() {
            *first = 1.0;
        }
        e
    }
}

/// `1 - cos` between a unit (or zero) point and a unit centre.
pub fn cosine_distance(point: &[f64], center: &[f64]) -> f64 {
    1.0 - point.iter().zip(center).map(|(a, b)| a * b).sum::<f64>()
}

fn objective(points: &[Vec<f64>], centers: &[Vec<f64>], assign: &[usize]) -> f64 {
    points
        .iter()
        .zip(assign)
        .map(|(p, &a)| cosine_distance(p, &centers[a]))
        .sum()
}

fn assign_all(points: &[Vec<f64>], centers: &[Vec<f64>]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, c) in centers.iter().enumerate() {
                let d = cosine_distance(p, c);
                if d < best_d {
                    best = k;
                    best_d = d;
                }
            }
            best
        })
        .collect()
}

/// Farthest-point seeding in cosine distance from a random first pixel.
fn seed_centers<R: Rng + ?Sized>(points: &[Vec<f64>], n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut chosen = vec![rng.random_range(0..points.len())];
    let mut nearest: Vec<f64> = points
        .iter()
        .map(|p| cosine_distance(p, &unit_or_axis(&points[chosen[0]])))
        .collect();
    while chosen.len() < n {
        let next = (0..points.len())
            .filter(|i| !chosen.contains(i))
            .fold(None::<usize>, |best, i| match best {
                Some(b) if nearest[b] >= nearest[i] => Some(b),
                _ => Some(i),
            })
            .expect("h*w >= n leaves an unchosen pixel");
        chosen.push(next);
        let c = unit_or_axis(&points[next]);
        for (d, p) in nearest.iter_mut().zip(points) {
            *d = d.min(cosine_distance(p, &c));
        }
    }
    chosen.iter().map(|&i| unit_or_axis(&points[i])).collect()
}

/// Spherical k-means: every pixel's feature vector is projected onto the
/// unit sphere and clustered under cosine distance.
///
/// Rounds alternate nearest-centre assignment and normalized-mean centre
/// updates until no assignment changes or `max_iter` rounds have run.
pub fn cosine_kmeans<R: Rng + ?Sized>(
    features: &FeatureMap,
    n: usize,
    max_iter: usize,
    rng: &mut R,
) -> Result<ClusterResult> {
    let (h, w, c) = features.dims3()?;
    if n == 0 || max_iter == 0 {
        return Err(Error::config("k-means needs n >= 1 and max_iter >= 1"));
    }
    if n > h * w {
        return Err(Error::config(format!("{n} clusters requested for {} pixels", h * w)));
    }
    let points: Vec<Vec<f64>> = (0..h * w)
        .map(|p| normalize(&features.data()[p * c..(p + 1) * c]))
        .collect();

    let mut centers = seed_centers(&points, n, rng);
    let mut assign: Vec<usize> = Vec::new();
    let mut trace = Vec::with_capacity(max_iter);

    for round in 0..max_iter {
        let next = assign_all(&points, &centers);
        let converged = round > 0 && next == assign;
        assign = next;
        let obj = objective(&points, &centers, &assign);
        trace.push(obj);
        if converged || round + 1 == max_iter {
            break;
        }

        let mut sums = vec![vec![0.0; c]; n];
        let mut counts = vec![0usize; n];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, &v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut candidate = centers.clone();
        let mut taken: Vec<usize> = Vec::new();
        for k in 0..n {
            if counts[k] == 0 {
                // reseed at the worst-served pixel
                let worst = (0..points.len())
                    .filter(|i| !taken.contains(i))
                    .fold(None::<(usize, f64)>, |best, i| {
                        let d = cosine_distance(&points[i], &centers[assign[i]]);
                        match best {
                            Some((_, bd)) if bd >= d => best,
                            _ => Some((i, d)),
                        }
                    });
                if let Some((i, _)) = worst {
                    taken.push(i);
                    candidate[k] = unit_or_axis(&points[i]);
                }
            } else if sums[k].iter().any(|&s| s != 0.0) {
                candidate[k] = normalize(&sums[k]);
            }
        }
        // the normalized mean is optimal for a fixed assignment; keep the old
        // centres if rounding says otherwise so the trace never increases
        if objective(&points, &candidate, &assign) <= obj {
            centers = candidate;
        }
    }

    Ok(ClusterResult {
        assignments: assign,
        centers,
        objective_trace: trace,
        height: h,
        width: w,
    })
}
