//! The two-branch segmentation model.
//!
//! A three-block conv encoder yields mid-level features `F` (block 2) and
//! high-level features `F̄` (block 3) at a quarter of the image resolution.
//! The class-specific branch pairs the averaged support prototype with the
//! query features; the class-agnostic branch pairs background prototypes
//! clustered from the query itself with the same features. One comparison
//! module scores both.

mod checkpoint;
mod params;

use rand::Rng;

use crate::alignment::{build_pair, expand_bg, expand_fg, AlignedInput, Branch};
use crate::episodes::{downsample_mask, upsample_mask, Episode, SupportPair};
use crate::error::{Error, Result};
use crate::protogen::{background_regions, refine_background_masks, spp_masks, DEFAULT_CLUSTERS};
use crate::tensorcore::{BinaryMask, OpRecord, Tape, Tensor, Var};

pub use checkpoint::{
    decode as decode_checkpoint, encode as encode_checkpoint, load_checkpoint, save_checkpoint, HEADER_LEN, MAGIC,
    VERSION,
};
pub use params::{sgd_step, Param, ParamStore};

/// Where class-agnostic background prototypes come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BgSource {
    Query,
    Support,
}

/// How query background regions are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BgMethod {
    KMeans,
    Spp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Channels of the mid-level features compared against prototypes.
    pub channels: usize,
    /// Channels of the high-level features used for clustering.
    pub high_channels: usize,
    pub n_clusters: usize,
    /// Weight of the class-agnostic loss.
    pub lambda: f64,
    pub shots: usize,
    pub bg_source: BgSource,
    pub bg_method: BgMethod,
    pub spp_level: usize,
    pub freeze_encoder: bool,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            high_channels: 32,
            n_clusters: DEFAULT_CLUSTERS,
            lambda: 0.5,
            shots: 1,
            bg_source: BgSource::Query,
            bg_method: BgMethod::KMeans,
            spp_level: 4,
            freeze_encoder: false,
            lr: 0.0025,
            momentum: 0.9,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.n_clusters == 0 {
            return Err(Error::config("n_clusters must be at least 1"));
        }
        if self.shots == 0 {
            return Err(Error::config("shots must be at least 1"));
        }
        if self.channels == 0 || self.high_channels == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.spp_level == 0 {
            return Err(Error::config("spp_level must be at least 1"));
        }
        if self.lr <= 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("lr must be positive and momentum in [0, 1)"));
        }
        Ok(())
    }
}

/// Parameter names, in store order.
pub mod names {
    pub const ENCODER: [(&str, &str); 3] = [
        ("encoder.block1.weight", "encoder.block1.bias"),
        ("encoder.block2.weight", "encoder.block2.bias"),
        ("encoder.block3.weight", "encoder.block3.bias"),
    ];
    pub const COMPARATOR: [(&str, &str); 3] = [
        ("comparator.conv1.weight", "comparator.conv1.bias"),
        ("comparator.conv2.weight", "comparator.conv2.bias"),
        ("comparator.head.weight", "comparator.head.bias"),
    ];
    pub const ENCODER_PREFIX: &str = "encoder.";
    pub const COMPARATOR_PREFIX: &str = "comparator.";
}

/// Fresh parameters for `config`.
pub fn init_params<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<ParamStore> {
    config.validate()?;
    let (c, cbar) = (config.channels, config.high_channels);
    let layers = [
        (names::ENCODER[0], 3, 3, c),
        (names::ENCODER[1], 3, c, c),
        (names::ENCODER[2], 3, c, cbar),
        (names::COMPARATOR[0], 3, 2 * c, 2 * c),
        (names::COMPARATOR[1], 3, 2 * c, 2 * c),
        (names::COMPARATOR[2], 1, 2 * c, 2),
    ];
    let mut store = ParamStore::new();
    for ((wn, bn), k, cin, cout) in layers {
        let (w, b) = params::conv_init(k, cin, cout, rng);
        store.insert(wn, w)?;
        store.insert(bn, b)?;
    }
    if config.freeze_encoder {
        store.set_trainable(names::ENCODER_PREFIX, false);
    }
    Ok(store)
}

/// Parameters recorded on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    all: Vec<Var>,
    encoder: [(Var, Var); 3],
    comparator: [(Var, Var); 3],
}

impl Bound {
    pub fn new(params: &ParamStore, tape: &mut Tape) -> Result<Self> {
        let all = params.bind(tape);
        let find = |name: &str| {
            params
                .index_of(name)
                .map(|i| all[i])
                .ok_or_else(|| Error::config(format!("missing parameter {name}")))
        };
        let pair = |(w, b): (&str, &str)| -> Result<(Var, Var)> { Ok((find(w)?, find(b)?)) };
        let encoder = [
            pair(names::ENCODER[0])?,
            pair(names::ENCODER[1])?,
            pair(names::ENCODER[2])?,
        ];
        let comparator = [
            pair(names::COMPARATOR[0])?,
            pair(names::COMPARATOR[1])?,
            pair(names::COMPARATOR[2])?,
        ];
        Ok(Self {
            all,
            encoder,
            comparator,
        })
    }

    pub fn vars(&self) -> &[Var] {
        &self.all
    }
}

/// Mid- and high-level feature maps of one image.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub mid: Var,
    pub high: Var,
}

/// Encoder forward: conv-relu-pool, conv-relu-pool, conv-relu.
pub fn encode(tape: &mut Tape, image: Var, bound: &Bound) -> Result<Encoded> {
    let [(w1, b1), (w2, b2), (w3, b3)] = bound.encoder;
    let x = tape.conv2d(image, w1, b1)?;
    let x = tape.relu(x);
    let x = tape.avg_pool2(x)?;
    let x = tape.conv2d(x, w2, b2)?;
    let x = tape.relu(x);
    let mid = tape.avg_pool2(x)?;
    let x = tape.conv2d(mid, w3, b3)?;
    let high = tape.relu(x);
    Ok(Encoded { mid, high })
}

/// Comparison module: two 3×3 conv-relu layers and a 1×1 two-logit head.
pub fn compare(tape: &mut Tape, fused: Var, bound: &Bound) -> Result<Var> {
    let [(w1, b1), (w2, b2), (wh, bh)] = bound.comparator;
    let x = tape.conv2d(fused, w1, b1)?;
    let x = tape.relu(x);
    let x = tape.conv2d(x, w2, b2)?;
    let x = tape.relu(x);
    tape.conv2d(x, wh, bh)
}

/// Logits of one branch and their argmax.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchOutput {
    pub logits: Tensor,
    pub prediction: BinaryMask,
}

impl BranchOutput {
    fn from_logits(logits: &Tensor) -> Result<Self> {
        let (h, w, c) = logits.dims3()?;
        if c != 2 {
            return Err(Error::shape(format!("expected 2 logits, got {c}")));
        }
        // ties go to background
        let prediction = BinaryMask::new(h, w, logits.data().chunks_exact(2).map(|z| z[1] > z[0]).collect())?;
        Ok(Self {
            logits: logits.clone(),
            prediction,
        })
    }
}

/// A recorded training forward pass, ready for [`ForwardPass::backward`].
#[derive(Debug)]
pub struct ForwardPass {
    pub tape: Tape,
    pub bound: Bound,
    pub loss_var: Var,
    pub loss: f64,
    pub loss_specific: f64,
    pub loss_agnostic: Option<f64>,
    pub out_sq: BranchOutput,
    pub out_qq: Option<BranchOutput>,
    /// Query foreground at feature resolution.
    pub query_mask: BinaryMask,
    /// Background regions paired in the class-agnostic branch.
    pub background_masks: Vec<BinaryMask>,
    pub logits_sq: Var,
    pub logits_qq: Option<Var>,
}

impl ForwardPass {
    /// Back-propagates the loss and adds parameter gradients into `params`.
    pub fn backward(&mut self, params: &mut ParamStore) -> Result<()> {
        self.tape.backward(self.loss_var)?;
        params.accumulate_grads(&self.tape, self.bound.vars());
        Ok(())
    }
}

fn image_var(tape: &mut Tape, image: &Tensor) -> Result<Var> {
    let (_, _, c) = image.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!("images need 3 channels, got {c}")));
    }
    Ok(tape.constant(image.clone()))
}

/// Foreground prototype averaged over the support set, with the encoded
/// support maps and masks at feature resolution.
struct SupportSide {
    prototype: Var,
    features: Vec<Var>,
    masks: Vec<BinaryMask>,
}

fn support_side(tape: &mut Tape, bound: &Bound, support: &[SupportPair]) -> Result<SupportSide> {
    if support.is_empty() {
        return Err(Error::config("at least one support pair is required"));
    }
    let mut protos = Vec::with_capacity(support.len());
    let mut features = Vec::with_capacity(support.len());
    let mut masks = Vec::with_capacity(support.len());
    for (i, pair) in support.iter().enumerate() {
        let img = image_var(tape, &pair.image)?;
        let enc = encode(tape, img, bound)?;
        let (h, w, _) = tape.value(enc.mid).dims3()?;
        let m = downsample_mask(&pair.mask, (h, w))?;
        if !m.any() {
            return Err(Error::EmptyMask(format!(
                "support mask {i} is empty at feature resolution"
            )));
        }
        protos.push(tape.masked_mean(enc.mid, &m)?);
        features.push(enc.mid);
        masks.push(m);
    }
    let prototype = tape.mean(&protos)?;
    Ok(SupportSide {
        prototype,
        features,
        masks,
    })
}

/// Background prototypes and their regions for the class-agnostic branch,
/// or `None` when the query has no background.
fn background_side<R: Rng + ?Sized>(
    tape: &mut Tape,
    query: crate::model::Encoded,
    query_mask: &BinaryMask,
    support: &SupportSide,
    config: &ModelConfig,
    rng: &mut R,
) -> Result<Option<(Vec<Var>, Vec<BinaryMask>)>> {
    let (h, w, _) = tape.value(query.mid).dims3()?;
    if query_mask.all() {
        return Ok(None);
    }
    match config.bg_source {
        BgSource::Support => {
            let mut protos = Vec::new();
            for (f, m) in support.features.iter().zip(&support.masks) {
                let bg = m.complement();
                if bg.any() {
                    protos.push(tape.masked_mean(*f, &bg)?);
                }
            }
            if protos.is_empty() {
                return Ok(None);
            }
            let p = tape.mean(&protos)?;
            Ok(Some((vec![p], vec![query_mask.complement()])))
        }
        BgSource::Query => {
            let regions = match config.bg_method {
                BgMethod::KMeans => {
                    let high = tape.value(query.high).clone();
                    match background_regions(&high, query_mask, config.n_clusters, rng) {
                        Ok((_, regions)) => regions,
                        Err(Error::NoBackground) => return Ok(None),
                        Err(e) => return Err(e),
                    }
                }
                BgMethod::Spp => refine_background_masks(&spp_masks(h, w, config.spp_level)?, query_mask)?,
            };
            let protos = regions
                .iter()
                .map(|m| tape.masked_mean(query.mid, m))
                .collect::<Result<Vec<_>>>()?;
            Ok(Some((protos, regions)))
        }
    }
}

fn branch_logits(tape: &mut Tape, input: &AlignedInput, bound: &Bound) -> Result<(Var, Var)> {
    let logits = compare(tape, input.fused, bound)?;
    let loss = tape.pixel_cross_entropy(logits, &input.supervision, None)?;
    Ok((logits, loss))
}

fn forward_impl<R: Rng + ?Sized>(
    episode: &Episode,
    params: &ParamStore,
    config: &ModelConfig,
    agnostic: bool,
    rng: &mut R,
) -> Result<ForwardPass> {
    config.validate()?;
    let mut tape = Tape::new();
    let bound = Bound::new(params, &mut tape)?;

    let support = support_side(&mut tape, &bound, &episode.support)?;
    let qimg = image_var(&mut tape, &episode.query_image)?;
    let query = encode(&mut tape, qimg, &bound)?;
    let (h, w, _) = tape.value(query.mid).dims3()?;
    let query_mask = downsample_mask(&episode.query_mask, (h, w))?;

    // class-specific branch
    let expanded = expand_fg(&mut tape, support.prototype, h, w)?;
    let pair_sq = build_pair(&mut tape, expanded, query.mid, &query_mask, Branch::ClassSpecific)?;
    let (logits_sq, loss_sq) = branch_logits(&mut tape, &pair_sq, &bound)?;

    let mut logits_qq = None;
    let mut loss_qq = None;
    let mut background_masks = Vec::new();
    if agnostic {
        if let Some((protos, regions)) = background_side(&mut tape, query, &query_mask, &support, config, rng)? {
            let bg = expand_bg(&mut tape, &protos, &regions, &query_mask, rng)?;
            let pair_qq = build_pair(&mut tape, bg.expanded, query.mid, &query_mask, Branch::ClassAgnostic)?;
            let (lq, ll) = branch_logits(&mut tape, &pair_qq, &bound)?;
            logits_qq = Some(lq);
            loss_qq = Some(ll);
            background_masks = regions;
        }
    }

    let loss_var = match loss_qq {
        Some(l2) => {
            let a = tape.scale(loss_sq, 1.0 - config.lambda);
            let b = tape.scale(l2, config.lambda);
            tape.add(a, b)?
        }
        None if agnostic => tape.scale(loss_sq, 1.0 - config.lambda),
        None => loss_sq,
    };

    let out_sq = BranchOutput::from_logits(tape.value(logits_sq))?;
    let out_qq = logits_qq
        .map(|v| BranchOutput::from_logits(tape.value(v)))
        .transpose()?;
    Ok(ForwardPass {
        loss: tape.value(loss_var).data()[0],
        loss_specific: tape.value(loss_sq).data()[0],
        loss_agnostic: loss_qq.map(|v| tape.value(v).data()[0]),
        loss_var,
        out_sq,
        out_qq,
        query_mask,
        background_masks,
        logits_sq,
        logits_qq,
        bound,
        tape,
    })
}

/// Training forward pass with both branches and the weighted loss
/// `(1 − λ)·L₁ + λ·L₂`. The class-agnostic branch is skipped when the query
/// has no background, leaving `(1 − λ)·L₁`.
pub fn forward_episode<R: Rng + ?Sized>(
    episode: &Episode,
    params: &ParamStore,
    config: &ModelConfig,
    rng: &mut R,
) -> Result<ForwardPass> {
    forward_impl(episode, params, config, true, rng)
}

/// Support-query comparison only; the loss is the class-specific
/// cross-entropy. Consumes no randomness.
pub fn forward_baseline(episode: &Episode, params: &ParamStore, config: &ModelConfig) -> Result<ForwardPass> {
    forward_impl(episode, params, config, false, &mut NoRng)
}

/// Predicted query mask at image resolution and the tape's op sequence.
#[derive(Clone, Debug)]
pub struct Inference {
    pub mask: BinaryMask,
    pub feature_prediction: BinaryMask,
    pub trace: Vec<OpRecord>,
}

/// Class-specific prediction for a query given `k` labeled supports.
pub fn infer_traced(query_image: &Tensor, support: &[SupportPair], params: &ParamStore) -> Result<Inference> {
    let mut tape = Tape::new();
    let bound = Bound::new(params, &mut tape)?;
    let side = support_side(&mut tape, &bound, support)?;
    let qimg = image_var(&mut tape, query_image)?;
    let query = encode(&mut tape, qimg, &bound)?;
    let (h, w, _) = tape.value(query.mid).dims3()?;
    let expanded = expand_fg(&mut tape, side.prototype, h, w)?;
    let fused = tape.concat_channels(expanded, query.mid)?;
    let logits = compare(&mut tape, fused, &bound)?;
    let out = BranchOutput::from_logits(tape.value(logits))?;
    let (ih, iw, _) = query_image.dims3()?;
    Ok(Inference {
        mask: upsample_mask(&out.prediction, (ih, iw))?,
        feature_prediction: out.prediction,
        trace: tape.op_trace(),
    })
}

/// Foreground prototype of a support set: per-shot mask average pooling of
/// the mid features, averaged over shots.
pub fn support_prototype(support: &[SupportPair], params: &ParamStore) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = Bound::new(params, &mut tape)?;
    let side = support_side(&mut tape, &bound, support)?;
    Ok(tape.value(side.prototype).data().to_vec())
}

/// Mid-level features of one image, `[h/4, w/4, channels]`.
pub fn mid_features(image: &Tensor, params: &ParamStore) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = Bound::new(params, &mut tape)?;
    let img = image_var(&mut tape, image)?;
    let enc = encode(&mut tape, img, &bound)?;
    Ok(tape.value(enc.mid).clone())
}

/// See [`infer_traced`].
pub fn infer(
    query_image: &Tensor,
    support: &[SupportPair],
    params: &ParamStore,
    _config: &ModelConfig,
) -> Result<BinaryMask> {
    infer_traced(query_image, support, params).map(|i| i.mask)
}

/// Rng that must never be drawn from.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("baseline forward consumed randomness")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("baseline forward consumed randomness")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("baseline forward consumed randomness")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{sample_episode, FoldSplit, Phase, SceneSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            channels: 4,
            high_channels: 6,
            ..ModelConfig::default()
        }
    }

    fn small_episode(seed: u64, k: usize) -> Episode {
        let spec = SceneSpec {
            image_size: 16,
            object_radius: (3.0, 4.0),
            ..SceneSpec::default()
        };
        let split = FoldSplit::for_fold(0, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_episode(&spec, &split, Phase::Train, k, &mut rng).unwrap()
    }

    #[test]
    fn comparator_is_stored_once() {
        let cfg = small_config();
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(
            p.iter()
                .filter(|x| x.name.starts_with(names::COMPARATOR_PREFIX))
                .count(),
            6
        );
        assert_eq!(p.len(), 12);
    }

    #[test]
    fn zero_image_and_biases_give_zero_features() {
        let cfg = small_config();
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut tape = Tape::new();
        let b = Bound::new(&p, &mut tape).unwrap();
        let img = tape.constant(Tensor::zeros(vec![8, 8, 3]));
        let e = encode(&mut tape, img, &b).unwrap();
        assert_eq!(tape.value(e.mid).shape(), &[2, 2, 4]);
        assert_eq!(tape.value(e.high).shape(), &[2, 2, 6]);
        assert!(tape.value(e.mid).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(e.high).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prediction_ties_go_to_background() {
        let l = Tensor::new(vec![1, 3, 2], vec![0.0, 0.0, 1.0, 2.0, 2.0, 1.0]).unwrap();
        let out = BranchOutput::from_logits(&l).unwrap();
        assert_eq!(out.prediction.as_slice(), &[false, true, false]);
    }

    #[test]
    fn lambda_extremes_select_one_loss() {
        let ep = small_episode(3, 1);
        let mut cfg = small_config();
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        cfg.lambda = 0.0;
        let f0 = forward_episode(&ep, &p, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(f0.loss, f0.loss_specific);
        cfg.lambda = 1.0;
        let f1 = forward_episode(&ep, &p, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(f1.loss, f1.loss_agnostic.unwrap());
        let base = forward_baseline(&ep, &p, &cfg).unwrap();
        assert_eq!(base.loss, f0.loss);
    }

    #[test]
    fn identical_supports_match_one_shot() {
        let ep = small_episode(5, 1);
        let cfg = small_config();
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let one = infer_traced(&ep.query_image, &ep.support, &p).unwrap();
        let three = vec![ep.support[0].clone(); 3];
        let many = infer_traced(&ep.query_image, &three, &p).unwrap();
        assert_eq!(one.mask, many.mask);
        assert_eq!(one.mask.dims(), (16, 16));
    }

    #[test]
    fn empty_support_mask_is_rejected() {
        let mut ep = small_episode(5, 1);
        ep.support[0].mask = BinaryMask::zeros(16, 16);
        let cfg = small_config();
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(matches!(
            infer(&ep.query_image, &ep.support, &p, &cfg),
            Err(Error::EmptyMask(_))
        ));
    }

    #[test]
    fn full_foreground_query_skips_agnostic_branch() {
        let mut ep = small_episode(6, 1);
        ep.query_mask = BinaryMask::ones(16, 16);
        let cfg = small_config();
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let f = forward_episode(&ep, &p, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(f.out_qq.is_none());
        assert_eq!(f.loss, (1.0 - cfg.lambda) * f.loss_specific);
    }

    #[test]
    fn every_background_mode_runs() {
        let ep = small_episode(8, 2);
        for (src, method) in [
            (BgSource::Query, BgMethod::KMeans),
            (BgSource::Query, BgMethod::Spp),
            (BgSource::Support, BgMethod::KMeans),
        ] {
            let cfg = ModelConfig {
                bg_source: src,
                bg_method: method,
                spp_level: 2,
                shots: 2,
                ..small_config()
            };
            let mut p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let mut f = forward_episode(&ep, &p, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert!(f.out_qq.is_some());
            assert!(f.loss.is_finite());
            f.backward(&mut p).unwrap();
            assert!(p.grad_norm_sq() > 0.0);
        }
    }
}
