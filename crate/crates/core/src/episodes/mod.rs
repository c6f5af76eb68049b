//! Synthetic scenes and episodic sampling.
//!
//! Base-class scenes can carry an unlabeled object of a novel class in their
//! background, so training on them teaches a model to call novel objects
//! background. The hidden object is tracked separately so that effect can be
//! measured.

mod dataset;
pub mod pnm;
mod scene;

use std::collections::BTreeSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensorcore::{BinaryMask, Tensor};

pub use dataset::{export_split, load_split, Manifest, ManifestRecord, ScenePool};
pub use scene::{
    default_classes, render_scene, render_scene_with, Contamination, Scene, SceneSpec, Shape, ShapeClass, Texture,
    TextureKind,
};

/// Disjoint base (training) and novel (testing) class sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    base: BTreeSet<usize>,
    novel: BTreeSet<usize>,
}

impl FoldSplit {
    pub fn new(base: impl IntoIterator<Item = usize>, novel: impl IntoIterator<Item = usize>) -> Result<Self> {
        let base: BTreeSet<usize> = base.into_iter().collect();
        let novel: BTreeSet<usize> = novel.into_iter().collect();
        if let Some(c) = base.intersection(&novel).next() {
            return Err(Error::config(format!("class {c} is both base and novel")));
        }
        Ok(Self { base, novel })
    }

    /// Holds out class `fold` of `num_classes` as the novel set.
    pub fn for_fold(fold: usize, num_classes: usize) -> Result<Self> {
        if fold >= num_classes {
            return Err(Error::config(format!(
                "fold {fold} out of range for {num_classes} classes"
            )));
        }
        Self::new((0..num_classes).filter(|&c| c != fold), [fold])
    }

    pub fn base(&self) -> &BTreeSet<usize> {
        &self.base
    }

    pub fn novel(&self) -> &BTreeSet<usize> {
        &self.novel
    }

    pub fn classes(&self, phase: Phase) -> &BTreeSet<usize> {
        match phase {
            Phase::Train => &self.base,
            Phase::Test => &self.novel,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportPair {
    pub image: Tensor,
    pub mask: BinaryMask,
}

/// k support pairs and one query, all of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support: Vec<SupportPair>,
    pub query_image: Tensor,
    pub query_mask: BinaryMask,
    /// Unlabeled novel-class pixels in the query (empty when uncontaminated).
    pub query_hidden: BinaryMask,
    pub class_id: usize,
}

impl Episode {
    pub fn shots(&self) -> usize {
        self.support.len()
    }

    pub(crate) fn from_scenes(mut scenes: Vec<Scene>) -> Self {
        let query = scenes.pop().expect("at least one scene");
        Episode {
            support: scenes
                .into_iter()
                .map(|s| SupportPair {
                    image: s.image,
                    mask: s.mask,
                })
                .collect(),
            query_image: query.image,
            query_mask: query.mask,
            query_hidden: query.hidden_mask,
            class_id: query.class_id,
        }
    }
}

fn pick_class<R: Rng + ?Sized>(split: &FoldSplit, phase: Phase, rng: &mut R) -> Result<usize> {
    let classes = split.classes(phase);
    if classes.is_empty() {
        return Err(Error::config(format!("no classes available for {phase:?}")));
    }
    let idx = rng.random_range(0..classes.len());
    Ok(*classes.iter().nth(idx).expect("index in range"))
}

/// Draws a class for `phase` and renders `k + 1` independent scenes of it.
pub fn sample_episode<R: Rng + ?Sized>(
    spec: &SceneSpec,
    split: &FoldSplit,
    phase: Phase,
    k: usize,
    rng: &mut R,
) -> Result<Episode> {
    if k == 0 {
        return Err(Error::config("episodes need at least one shot"));
    }
    let class = pick_class(split, phase, rng)?;
    let scenes = (0..=k)
        .map(|_| render_scene(spec, class, rng.random()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Episode::from_scenes(scenes))
}

/// Where episodes come from: rendered on demand or drawn from an exported
/// dataset.
#[derive(Clone, Debug)]
pub enum EpisodeSource {
    Procedural(SceneSpec),
    Pool { train: ScenePool, test: ScenePool },
}

impl EpisodeSource {
    pub fn sample<R: Rng + ?Sized>(&self, split: &FoldSplit, phase: Phase, k: usize, rng: &mut R) -> Result<Episode> {
        match self {
            EpisodeSource::Procedural(spec) => sample_episode(spec, split, phase, k, rng),
            EpisodeSource::Pool { train, test } => {
                if k == 0 {
                    return Err(Error::config("episodes need at least one shot"));
                }
                let class = pick_class(split, phase, rng)?;
                let pool = match phase {
                    Phase::Train => train,
                    Phase::Test => test,
                };
                pool.sample(class, k + 1, rng).map(Episode::from_scenes)
            }
        }
    }
}

/// Nearest-neighbour mask reduction to `(h, w)`; each output pixel reads the
/// source pixel under its centre.
pub fn downsample_mask(mask: &BinaryMask, target: (usize, usize)) -> Result<BinaryMask> {
    let (h, w) = target;
    if h == 0 || w == 0 || h > mask.height() || w > mask.width() {
        return Err(Error::shape(format!(
            "cannot downsample {:?} to {target:?}",
            mask.dims()
        )));
    }
    Ok(mask.resize_nearest(h, w))
}

/// Nearest-neighbour mask enlargement, the inverse direction of
/// [`downsample_mask`].
pub fn upsample_mask(mask: &BinaryMask, target: (usize, usize)) -> Result<BinaryMask> {
    let (h, w) = target;
    if h < mask.height() || w < mask.width() {
        return Err(Error::shape(format!("cannot upsample {:?} to {target:?}", mask.dims())));
    }
    Ok(mask.resize_nearest(h, w))
}
