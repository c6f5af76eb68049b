//! Metrics, the prior-bias probe and run orchestration.

mod config;
mod run;

use std::collections::BTreeMap;

use rand::Rng;

use crate::episodes::{render_scene_with, Contamination, Episode, EpisodeSource, FoldSplit, Phase, SupportPair};
use crate::error::{Error, Result};
use crate::model::{infer, ModelConfig, ParamStore};
use crate::tensorcore::{BinaryMask, Tensor};

pub use config::{RunConfig, NUM_CLASSES};
pub use run::{
    episode_source, evaluate_params, gen_data, metrics_csv, probe_set, run_ablation, run_train, train,
    write_metrics_csv, AblationAxis, LossRecord, TrainReport, CSV_HEADER,
};

/// Pixel confusion counts for one class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn of(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        if pred.dims() != gt.dims() {
            return Err(Error::shape(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.dims(),
                gt.dims()
            )));
        }
        let mut c = Counts::default();
        for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        Ok(c)
    }

    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// TP/(TP+FP+FN), or 1 when nothing was predicted or present.
    pub fn iou(&self) -> f64 {
        let denom = self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            self.tp as f64 / denom as f64
        }
    }
}

/// Intersection over union of two masks; 1.0 when both are empty.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Counts::of(pred, gt).map(|c| c.iou())
}

/// Aggregated evaluation result.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    /// IoU per evaluated class, from counts pooled over all its episodes.
    pub class_iou: BTreeMap<usize, f64>,
    pub miou: f64,
    pub bias_rate: f64,
    pub episodes: usize,
    pub seconds: f64,
}

/// Per-class pooled counts over a set of episodes.
pub fn pooled_counts<'a, P>(
    episodes: impl IntoIterator<Item = &'a Episode>,
    mut predict: P,
) -> Result<BTreeMap<usize, Counts>>
where
    P: FnMut(&Tensor, &[SupportPair]) -> Result<BinaryMask>,
{
    let mut per_class: BTreeMap<usize, Counts> = BTreeMap::new();
    for ep in episodes {
        let pred = predict(&ep.query_image, &ep.support)?;
        per_class
            .entry(ep.class_id)
            .or_default()
            .add(Counts::of(&pred, &ep.query_mask)?);
    }
    Ok(per_class)
}

/// Arithmetic mean of per-class IoUs.
pub fn mean_iou(per_class: &BTreeMap<usize, Counts>) -> Result<(BTreeMap<usize, f64>, f64)> {
    if per_class.is_empty() {
        return Err(Error::config("no episodes were evaluated"));
    }
    let class_iou: BTreeMap<usize, f64> = per_class.iter().map(|(&k, c)| (k, c.iou())).collect();
    let miou = class_iou.values().sum::<f64>() / class_iou.len() as f64;
    Ok((class_iou, miou))
}

/// One probe: a base-class scene hiding an unlabeled novel object, and
/// labeled supports of that hidden class.
#[derive(Clone, Debug)]
pub struct ProbeCase {
    pub image: Tensor,
    pub hidden_mask: BinaryMask,
    pub hidden_class: usize,
    pub support: Vec<SupportPair>,
}

/// Builds `count` probe cases. Procedural sources render base scenes with a
/// forced hidden object; dataset sources reuse contaminated training
/// scenes and draw supports from the test pool.
pub fn probe_cases<R: Rng + ?Sized>(
    source: &EpisodeSource,
    split: &FoldSplit,
    count: usize,
    shots: usize,
    rng: &mut R,
) -> Result<Vec<ProbeCase>> {
    if count == 0 || shots == 0 {
        return Err(Error::config("bias probe needs at least one scene and one shot"));
    }
    let base: Vec<usize> = split.base().iter().copied().collect();
    if base.is_empty() {
        return Err(Error::config("bias probe needs base classes"));
    }
    let mut cases = Vec::with_capacity(count);
    match source {
        EpisodeSource::Procedural(spec) => {
            let mut attempts = 0;
            while cases.len() < count {
                attempts += 1;
                if attempts > 20 * count {
                    return Err(Error::config(
                        "could not render contaminated scenes; check contamination_classes",
                    ));
                }
                let class = base[rng.random_range(0..base.len())];
                let scene = render_scene_with(spec, class, rng.random(), Contamination::Always)?;
                let Some(&hidden) = scene.hidden_classes.first() else {
                    continue;
                };
                let support = (0..shots)
                    .map(|_| {
                        render_scene_with(spec, hidden, rng.random(), Contamination::Never).map(|s| SupportPair {
                            image: s.image,
                            mask: s.mask,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                cases.push(ProbeCase {
                    image: scene.image,
                    hidden_mask: scene.hidden_mask,
                    hidden_class: hidden,
                    support,
                });
            }
        }
        EpisodeSource::Pool { train, test } => {
            let contaminated: Vec<_> = base
                .iter()
                .flat_map(|&c| train.scenes(c))
                .filter(|s| s.hidden_mask.any() && !s.hidden_classes.is_empty())
                .collect();
            if contaminated.is_empty() {
                return Err(Error::config("training pool has no contaminated scenes"));
            }
            for _ in 0..count {
                let scene = contaminated[rng.random_range(0..contaminated.len())];
                let hidden = scene.hidden_classes[0];
                let support = test
                    .sample(hidden, shots, rng)?
                    .into_iter()
                    .map(|s| SupportPair {
                        image: s.image,
                        mask: s.mask,
                    })
                    .collect();
                cases.push(ProbeCase {
                    image: scene.image.clone(),
                    hidden_mask: scene.hidden_mask.clone(),
                    hidden_class: hidden,
                    support,
                });
            }
        }
    }
    Ok(cases)
}

/// Fraction of hidden-object pixels predicted as background when segmenting
/// with the hidden class's own supports, pooled over all cases.
pub fn bias_rate_with<P>(cases: &[ProbeCase], mut predict: P) -> Result<f64>
where
    P: FnMut(&Tensor, &[SupportPair]) -> Result<BinaryMask>,
{
    if cases.is_empty() {
        return Err(Error::config("no contaminated scenes to probe"));
    }
    let (mut missed, mut total) = (0u64, 0u64);
    for case in cases {
        let pred = predict(&case.image, &case.support)?;
        let c = Counts::of(&pred, &case.hidden_mask)?;
        missed += c.fn_;
        total += c.tp + c.fn_;
    }
    if total == 0 {
        return Err(Error::config("probe scenes have empty hidden masks"));
    }
    Ok(missed as f64 / total as f64)
}

pub fn bias_probe(params: &ParamStore, cases: &[ProbeCase], config: &ModelConfig) -> Result<f64> {
    bias_rate_with(cases, |img, sup| infer(img, sup, params, config))
}

/// Novel-class mIoU over pre-drawn test episodes plus the bias rate on
/// `probes`.
pub fn evaluate(
    params: &ParamStore,
    episodes: &[Episode],
    probes: &[ProbeCase],
    config: &ModelConfig,
) -> Result<MetricsRow> {
    if episodes.is_empty() {
        return Err(Error::config("eval_episodes must be at least 1"));
    }
    let start = std::time::Instant::now();
    let counts = pooled_counts(episodes, |img, sup| infer(img, sup, params, config))?;
    let (class_iou, miou) = mean_iou(&counts)?;
    let bias_rate = bias_probe(params, probes, config)?;
    Ok(MetricsRow {
        class_iou,
        miou,
        bias_rate,
        episodes: episodes.len(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Draws `count` test episodes.
pub fn test_episodes<R: Rng + ?Sized>(
    source: &EpisodeSource,
    split: &FoldSplit,
    count: usize,
    shots: usize,
    rng: &mut R,
) -> Result<Vec<Episode>> {
    if count == 0 {
        return Err(Error::config("eval_episodes must be at least 1"));
    }
    (0..count)
        .map(|_| source.sample(split, Phase::Test, shots, rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::SceneSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn iou_simple_cases() {
        let gt = BinaryMask::from_fn(4, 4, |i, _| i < 2);
        assert_eq!(iou(&gt, &gt).unwrap(), 1.0);
        assert_eq!(iou(&BinaryMask::ones(4, 4), &gt).unwrap(), 0.5);
        assert_eq!(iou(&BinaryMask::zeros(4, 4), &BinaryMask::zeros(4, 4)).unwrap(), 1.0);
        assert_eq!(iou(&BinaryMask::zeros(4, 4), &gt).unwrap(), 0.0);
        assert!(matches!(iou(&gt, &BinaryMask::zeros(4, 3)), Err(Error::Shape(_))));
    }

    fn setup() -> (EpisodeSource, FoldSplit) {
        let spec = SceneSpec {
            image_size: 16,
            object_radius: (3.0, 4.0),
            contamination_classes: vec![0],
            ..SceneSpec::default()
        };
        (EpisodeSource::Procedural(spec), FoldSplit::for_fold(0, 5).unwrap())
    }

    #[test]
    fn oracle_and_empty_predictors() {
        let (src, split) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let eps = test_episodes(&src, &split, 10, 1, &mut rng).unwrap();
        let lookup = |img: &Tensor| eps.iter().find(|e| &e.query_image == img).unwrap().query_mask.clone();
        let oracle = pooled_counts(&eps, |img, _| Ok(lookup(img))).unwrap();
        assert_eq!(mean_iou(&oracle).unwrap().1, 1.0);
        let empty = pooled_counts(&eps, |img, _| {
            let (h, w, _) = img.dims3()?;
            Ok(BinaryMask::zeros(h, w))
        })
        .unwrap();
        assert_eq!(mean_iou(&empty).unwrap().1, 0.0);
    }

    #[test]
    fn pooling_is_order_invariant_and_matches_hand_count() {
        let (src, split) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let eps = test_episodes(&src, &split, 10, 1, &mut rng).unwrap();
        // a fixed, imperfect predictor: the top half of the image
        let pred = |img: &Tensor, _: &[SupportPair]| {
            let (h, w, _) = img.dims3()?;
            Ok(BinaryMask::from_fn(h, w, |i, _| i < h / 2))
        };
        let a = pooled_counts(&eps, pred).unwrap();
        let rev: Vec<_> = eps.iter().rev().cloned().collect();
        let b = pooled_counts(&rev, pred).unwrap();
        assert_eq!(a, b);

        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for e in &eps {
            for i in 0..16 {
                for j in 0..16 {
                    match (i < 8, e.query_mask.get(i, j)) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        _ => {}
                    }
                }
            }
        }
        let want = tp as f64 / (tp + fp + fn_) as f64;
        assert_eq!(mean_iou(&a).unwrap().1, want);
    }

    #[test]
    fn bias_rate_extremes() {
        let (src, split) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cases = probe_cases(&src, &split, 8, 1, &mut rng).unwrap();
        assert!(cases.iter().all(|c| c.hidden_mask.any() && c.hidden_class == 0));
        let lookup = |img: &Tensor| cases.iter().find(|c| &c.image == img).unwrap().hidden_mask.clone();
        assert_eq!(bias_rate_with(&cases, |img, _| Ok(lookup(img))).unwrap(), 0.0);
        let none = bias_rate_with(&cases, |img, _| {
            let (h, w, _) = img.dims3()?;
            Ok(BinaryMask::zeros(h, w))
        });
        assert_eq!(none.unwrap(), 1.0);
        assert!(bias_rate_with(&[], |_, _| unreachable!()).is_err());
    }

    #[test]
    fn zero_eval_episodes_rejected() {
        let (src, split) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            test_episodes(&src, &split, 0, 1, &mut rng),
            Err(Error::Config(_))
        ));
        let p = ParamStore::new();
        assert!(matches!(
            evaluate(&p, &[], &[], &ModelConfig::default()),
            Err(Error::Config(_))
        ));
    }
}
