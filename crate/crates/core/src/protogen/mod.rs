//! Prototype extraction: mask average pooling, query-side background
//! regions from spherical k-means, and the grid-bin and support-side
//! alternatives.

mod kmeans;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensorcore::{BinaryMask, FeatureMap, Tape};

pub use kmeans::{cosine_distance, cosine_kmeans, ClusterResult, DEFAULT_MAX_ITER};

/// Default number of background clusters.
pub const DEFAULT_CLUSTERS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrototypeOrigin {
    ForegroundSupport,
    BackgroundQuery,
    BackgroundSupport,
    SpatialPyramid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prototype {
    pub values: Vec<f64>,
    pub origin: PrototypeOrigin,
}

impl Prototype {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn pool(features: &FeatureMap, mask: &BinaryMask, origin: PrototypeOrigin) -> Result<Prototype> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let p = tape.masked_mean(f, mask)?;
    Ok(Prototype {
        values: tape.value(p).data().to_vec(),
        origin,
    })
}

/// Mask average pooling: `Σ F·M / Σ M` over the pixel grid.
///
/// The differentiable form of the same reduction is [`Tape::masked_mean`].
pub fn map_pool(features: &FeatureMap, mask: &BinaryMask) -> Result<Prototype> {
    pool(features, mask, PrototypeOrigin::ForegroundSupport)
}

/// Removes foreground pixels from every cluster mask and drops clusters left
/// empty.
pub fn refine_background_masks(cluster_masks: &[BinaryMask], fg_mask: &BinaryMask) -> Result<Vec<BinaryMask>> {
    let mut out = Vec::with_capacity(cluster_masks.len());
    for m in cluster_masks {
        let r = m.subtract(fg_mask)?;
        if r.any() {
            out.push(r);
        }
    }
    Ok(out)
}

/// Clusters `cluster_feat` into `n` regions and refines them against the
/// foreground. Returns the clustering and the surviving region masks.
pub fn background_regions<R: Rng + ?Sized>(
    cluster_feat: &FeatureMap,
    fg_mask: &BinaryMask,
    n: usize,
    rng: &mut R,
) -> Result<(ClusterResult, Vec<BinaryMask>)> {
    let (h, w, _) = cluster_feat.dims3()?;
    if fg_mask.dims() != (h, w) {
        return Err(Error::shape(format!(
            "foreground mask {:?} does not match {h}x{w} features",
            fg_mask.dims()
        )));
    }
    if fg_mask.all() {
        return Err(Error::NoBackground);
    }
    let clusters = cosine_kmeans(cluster_feat, n, DEFAULT_MAX_ITER, rng)?;
    let regions = refine_background_masks(&clusters.masks(), fg_mask)?;
    Ok((clusters, regions))
}

/// Query background prototypes: cluster the high-level map, refine the
/// regions against the foreground and pool `features` over each survivor.
pub fn background_prototypes<R: Rng + ?Sized>(
    features: &FeatureMap,
    cluster_feat: &FeatureMap,
    fg_mask: &BinaryMask,
    n: usize,
    rng: &mut R,
) -> Result<(Vec<Prototype>, Vec<BinaryMask>)> {
    let (h, w, _) = features.dims3()?;
    let (hc, wc, _) = cluster_feat.dims3()?;
    if (h, w) != (hc, wc) {
        return Err(Error::shape(format!(
            "features {h}x{w} and clustering features {hc}x{wc} differ spatially"
        )));
    }
    let (_, regions) = background_regions(cluster_feat, fg_mask, n, rng)?;
    let protos = regions
        .iter()
        .map(|m| pool(features, m, PrototypeOrigin::BackgroundQuery))
        .collect::<Result<Vec<_>>>()?;
    Ok((protos, regions))
}

/// Masks of an `a × a` grid of near-equal bins over an `h × w` map.
pub fn spp_masks(h: usize, w: usize, level: usize) -> Result<Vec<BinaryMask>> {
    if level == 0 || level > h.min(w) {
        return Err(Error::config(format!(
            "pyramid level {level} invalid for a {h}x{w} map"
        )));
    }
    let edge = |i: usize, n: usize| i * n / level;
    let mut out = Vec::with_capacity(level * level);
    for by in 0..level {
        for bx in 0..level {
            let (r0, r1) = (edge(by, h), edge(by + 1, h));
            let (c0, c1) = (edge(bx, w), edge(bx + 1, w));
            out.push(BinaryMask::from_fn(h, w, |i, j| {
                (r0..r1).contains(&i) && (c0..c1).contains(&j)
            }));
        }
    }
    Ok(out)
}

/// One average-pooled prototype per bin of an `a × a` grid.
pub fn spp_prototypes(features: &FeatureMap, level: usize) -> Result<(Vec<Prototype>, Vec<BinaryMask>)> {
    let (h, w, _) = features.dims3()?;
    let masks = spp_masks(h, w, level)?;
    let protos = masks
        .iter()
        .map(|m| pool(features, m, PrototypeOrigin::SpatialPyramid))
        .collect::<Result<Vec<_>>>()?;
    Ok((protos, masks))
}

/// Background prototype pooled from the support image's complement mask.
pub fn support_background_prototype(features: &FeatureMap, support_mask: &BinaryMask) -> Result<Prototype> {
    let bg = support_mask.complement();
    if !bg.any() {
        return Err(Error::EmptyMask("support mask covers the whole image".into()));
    }
    pool(features, &bg, PrototypeOrigin::BackgroundSupport)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor {
        Tensor::from_fn3(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn loop_average(f: &Tensor, m: &BinaryMask) -> Vec<f64> {
        let (h, w, c) = f.dims3().unwrap();
        let mut acc = vec![0.0; c];
        let mut n = 0.0;
        for i in 0..h {
            for j in 0..w {
                if m.get(i, j) {
                    n += 1.0;
                    for k in 0..c {
                        acc[k] += f.at3(i, j, k);
                    }
                }
            }
        }
        acc.iter().map(|a| a / n).collect()
    }

    #[test]
    fn map_pool_constant_and_single_pixel() {
        let f = Tensor::from_fn3(3, 3, 2, |_, _, k| [0.5, -2.0][k]);
        let m = BinaryMask::from_fn(3, 3, |i, j| i != j);
        assert_eq!(map_pool(&f, &m).unwrap().values, vec![0.5, -2.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_map(&mut rng, 4, 4, 3);
        let one = BinaryMask::from_fn(4, 4, |i, j| (i, j) == (2, 1));
        assert_eq!(map_pool(&f, &one).unwrap().values, f.pixel(2, 1));
        assert!(matches!(
            map_pool(&f, &BinaryMask::zeros(4, 4)),
            Err(Error::EmptyMask(_))
        ));
    }

    #[test]
    fn map_pool_matches_loop_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = random_map(&mut rng, 4, 4, 3);
        let m = BinaryMask::from_fn(4, 4, |_, _| rng.random_bool(0.5));
        let got = map_pool(&f, &m).unwrap().values;
        for (a, b) in got.iter().zip(loop_average(&f, &m)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn refine_cases() {
        let fg = BinaryMask::from_fn(3, 3, |i, _| i == 0);
        let disjoint = BinaryMask::from_fn(3, 3, |i, _| i == 2);
        let inside = BinaryMask::from_fn(3, 3, |i, j| i == 0 && j < 2);
        let overlap = BinaryMask::from_fn(3, 3, |_, j| j == 1);
        let out = refine_background_masks(&[disjoint.clone(), inside, overlap.clone()], &fg).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0], disjoint);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(out[1].get(i, j), overlap.get(i, j) && !fg.get(i, j));
            }
        }
    }

    #[test]
    fn one_cluster_without_foreground_is_global_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_map(&mut rng, 4, 4, 3);
        let g = random_map(&mut rng, 4, 4, 5);
        let fg = BinaryMask::zeros(4, 4);
        let (protos, masks) = background_prototypes(&f, &g, &fg, 1, &mut rng).unwrap();
        assert_eq!(protos.len(), 1);
        assert!(masks[0].all());
        let (spp, _) = spp_prototypes(&f, 1).unwrap();
        assert_eq!(protos[0].values, spp[0].values);
    }

    #[test]
    fn full_foreground_has_no_background() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_map(&mut rng, 3, 3, 2);
        let r = background_prototypes(&f, &f, &BinaryMask::ones(3, 3), 3, &mut rng);
        assert!(matches!(r, Err(Error::NoBackground)));
    }

    #[test]
    fn regions_and_foreground_partition_the_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let f = random_map(&mut rng, 6, 6, 4);
            let fg = BinaryMask::from_fn(6, 6, |_, _| rng.random_bool(0.3));
            if fg.all() {
                continue;
            }
            let n = rng.random_range(1..=5);
            let (_, masks) = background_prototypes(&f, &f, &fg, n, &mut rng).unwrap();
            for i in 0..6 {
                for j in 0..6 {
                    let hits = masks.iter().filter(|m| m.get(i, j)).count() + fg.get(i, j) as usize;
                    assert_eq!(hits, 1);
                }
            }
        }
    }

    #[test]
    fn spp_quadrants() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_map(&mut rng, 4, 4, 2);
        let (protos, masks) = spp_prototypes(&f, 2).unwrap();
        assert_eq!(protos.len(), 4);
        for (q, (p, m)) in protos.iter().zip(&masks).enumerate() {
            let (r0, c0) = (2 * (q / 2), 2 * (q % 2));
            assert_eq!(m.count(), 4);
            for k in 0..2 {
                let mut s = 0.0;
                for i in r0..r0 + 2 {
                    for j in c0..c0 + 2 {
                        s += f.at3(i, j, k);
                    }
                }
                assert!((p.values[k] - s / 4.0).abs() < 1e-12);
            }
        }
        let (one, m1) = spp_prototypes(&f, 1).unwrap();
        assert!(m1[0].all());
        assert_eq!(one.len(), 1);
        assert!(matches!(spp_prototypes(&f, 5), Err(Error::Config(_))));
    }

    #[test]
    fn spp_levels_tile_the_grid() {
        let f = Tensor::zeros(vec![16, 16, 1]);
        for level in 2..=5 {
            let (_, masks) = spp_prototypes(&f, level).unwrap();
            assert_eq!(masks.len(), level * level);
            let total: usize = masks.iter().map(BinaryMask::count).sum();
            assert_eq!(total, 256);
        }
    }

    #[test]
    fn support_background_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = random_map(&mut rng, 3, 4, 2);
        let global = support_background_prototype(&f, &BinaryMask::zeros(3, 4)).unwrap();
        assert_eq!(global.values, spp_prototypes(&f, 1).unwrap().0[0].values);
        let all_but_one = BinaryMask::from_fn(3, 4, |i, j| (i, j) != (1, 3));
        assert_eq!(
            support_background_prototype(&f, &all_but_one).unwrap().values,
            f.pixel(1, 3)
        );
        assert!(support_background_prototype(&f, &BinaryMask::ones(3, 4)).is_err());

        let m = BinaryMask::from_fn(3, 4, |_, _| rng.random_bool(0.4));
        let got = support_background_prototype(&f, &m).unwrap().values;
        for (a, b) in got.iter().zip(loop_average(&f, &m.complement())) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
