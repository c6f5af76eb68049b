//! Finite-difference machinery shared by the gradient tests and the
//! acceptance run.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scnet_core::episodes::{Episode, SupportPair};
use scnet_core::model::{forward_episode, init_params, ModelConfig, ParamStore};
use scnet_core::tensorcore::{BinaryMask, Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const SEEDS: u64 = 20;
pub const OP_TOLERANCE: f64 = 1e-6;
pub const END_TO_END_TOLERANCE: f64 = 1e-5;

/// |a - n| / max(|a|, |n|, 1e-3). The floor keeps near-zero gradients from
/// turning rounding noise into huge ratios.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Values in ±[0.05, 1], so ReLU inputs stay clear of the kink.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let mut m = BinaryMask::from_fn(h, w, |_, _| rng.random_bool(0.5));
    m.set(0, 0, true);
    m
}

/// Reduces any op output to a scalar through a fixed random 1×1 projection
/// and a cross-entropy against random targets, so every output element gets
/// its own gradient weight.
struct Readout {
    proj: Tensor,
    bias: Tensor,
    target: BinaryMask,
}

impl Readout {
    fn new(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Self {
        Self {
            proj: away_from_zero(rng, vec![1, 1, c, 2]),
            bias: away_from_zero(rng, vec![2]),
            target: random_mask(rng, h, w),
        }
    }

    fn apply(&self, tape: &mut Tape, y: Var) -> Var {
        let y = if tape.value(y).shape().len() == 1 {
            let (h, w) = self.target.dims();
            tape.expand(y, h, w).unwrap()
        } else {
            y
        };
        let k = tape.constant(self.proj.clone());
        let b = tape.constant(self.bias.clone());
        let logits = tape.conv2d(y, k, b).unwrap();
        tape.pixel_cross_entropy(logits, &self.target, None).unwrap()
    }
}

/// Max relative error over every input element of `build`.
fn check_op(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var, readout: Option<&Readout>) -> f64 {
    let eval = |inputs: &[Tensor], grads: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| {
                if grads {
                    tape.variable(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let y = build(&mut tape, &vars);
        let loss = match readout {
            Some(r) => r.apply(&mut tape, y),
            None => y,
        };
        let value = tape.value(loss).data()[0];
        let g = if grads {
            tape.backward(loss).unwrap();
            vars.iter()
                .map(|&v| {
                    tape.grad(v)
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
                })
                .collect()
        } else {
            Vec::new()
        };
        (value, g)
    };
    let (_, analytic): (f64, Vec<Vec<f64>>) = eval(inputs, true);
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    worst
}

pub const OPS: [&str; 14] = [
    "conv2d",
    "relu",
    "avg_pool2",
    "concat_channels",
    "slice_channels",
    "pixel_cross_entropy",
    "masked_mean",
    "mean",
    "expand",
    "expand_regions",
    "sum",
    "scale",
    "add",
    "conv2d_1x1",
];

/// One random case of `op`; returns its max relative error.
fn op_case(op: &str, rng: &mut ChaCha8Rng) -> f64 {
    match op {
        "conv2d" => {
            let inputs = [
                away_from_zero(rng, vec![4, 5, 2]),
                away_from_zero(rng, vec![3, 3, 2, 3]),
                away_from_zero(rng, vec![3]),
            ];
            let r = Readout::new(rng, 3, 4, 5);
            check_op(&inputs, &|t, v| t.conv2d(v[0], v[1], v[2]).unwrap(), Some(&r))
        }
        "conv2d_1x1" => {
            let inputs = [
                away_from_zero(rng, vec![3, 3, 4]),
                away_from_zero(rng, vec![1, 1, 4, 2]),
                away_from_zero(rng, vec![2]),
            ];
            let target = random_mask(rng, 3, 3);
            check_op(
                &inputs,
                &|t, v| {
                    let y = t.conv2d(v[0], v[1], v[2]).unwrap();
                    t.pixel_cross_entropy(y, &target, None).unwrap()
                },
                None,
            )
        }
        "relu" => {
            let r = Readout::new(rng, 3, 3, 4);
            check_op(&[away_from_zero(rng, vec![3, 4, 3])], &|t, v| t.relu(v[0]), Some(&r))
        }
        "avg_pool2" => {
            let r = Readout::new(rng, 2, 2, 3);
            check_op(
                &[away_from_zero(rng, vec![4, 6, 2])],
                &|t, v| t.avg_pool2(v[0]).unwrap(),
                Some(&r),
            )
        }
        "concat_channels" => {
            let inputs = [away_from_zero(rng, vec![3, 3, 2]), away_from_zero(rng, vec![3, 3, 3])];
            let r = Readout::new(rng, 5, 3, 3);
            check_op(&inputs, &|t, v| t.concat_channels(v[0], v[1]).unwrap(), Some(&r))
        }
        "slice_channels" => {
            let r = Readout::new(rng, 2, 3, 3);
            check_op(
                &[away_from_zero(rng, vec![3, 3, 4])],
                &|t, v| t.slice_channels(v[0], 1, 3).unwrap(),
                Some(&r),
            )
        }
        "pixel_cross_entropy" => {
            let target = random_mask(rng, 4, 4);
            let ignore = BinaryMask::from_fn(4, 4, |i, j| i == 3 && j > 1);
            check_op(
                &[away_from_zero(rng, vec![4, 4, 2])],
                &|t, v| t.pixel_cross_entropy(v[0], &target, Some(&ignore)).unwrap(),
                None,
            )
        }
        "masked_mean" => {
            let mask = random_mask(rng, 3, 4);
            let r = Readout::new(rng, 3, 2, 2);
            check_op(
                &[away_from_zero(rng, vec![3, 4, 3])],
                &|t, v| t.masked_mean(v[0], &mask).unwrap(),
                Some(&r),
            )
        }
        "mean" => {
            let inputs: Vec<Tensor> = (0..3).map(|_| away_from_zero(rng, vec![4])).collect();
            let r = Readout::new(rng, 4, 2, 2);
            check_op(&inputs, &|t, v| t.mean(v).unwrap(), Some(&r))
        }
        "expand" => {
            let r = Readout::new(rng, 3, 3, 2);
            check_op(
                &[away_from_zero(rng, vec![3])],
                &|t, v| t.expand(v[0], 3, 2).unwrap(),
                Some(&r),
            )
        }
        "expand_regions" => {
            let inputs: Vec<Tensor> = (0..3).map(|_| away_from_zero(rng, vec![2])).collect();
            let assignment: Vec<usize> = (0..12).map(|_| rng.random_range(0..3)).collect();
            let r = Readout::new(rng, 2, 3, 4);
            check_op(
                &inputs,
                &|t, v| t.expand_regions(v, &assignment, 3, 4).unwrap(),
                Some(&r),
            )
        }
        "sum" => check_op(&[away_from_zero(rng, vec![2, 3, 2])], &|t, v| t.sum(v[0]), None),
        "scale" => {
            let f = rng.random_range(-2.0..2.0);
            let r = Readout::new(rng, 2, 2, 3);
            check_op(
                &[away_from_zero(rng, vec![2, 3, 2])],
                &|t, v| t.scale(v[0], f),
                Some(&r),
            )
        }
        "add" => {
            let inputs = [away_from_zero(rng, vec![2, 2, 3]), away_from_zero(rng, vec![2, 2, 3])];
            let r = Readout::new(rng, 3, 2, 2);
            check_op(&inputs, &|t, v| t.add(v[0], v[1]).unwrap(), Some(&r))
        }
        other => panic!("no gradient case for {other}"),
    }
}

/// Max relative error of `op` over [`SEEDS`] random cases.
pub fn op_error(op: &str) -> f64 {
    (0..SEEDS)
        .map(|seed| op_case(op, &mut ChaCha8Rng::seed_from_u64(seed)))
        .fold(0.0, f64::max)
}

fn tiny_episode(rng: &mut ChaCha8Rng) -> Episode {
    let image = |rng: &mut ChaCha8Rng| Tensor::from_fn3(8, 8, 3, |_, _, _| rng.random_range(0.0..1.0));
    // a 4x4 block downsamples to exactly one feature pixel
    let block =
        |i0: usize, j0: usize| BinaryMask::from_fn(8, 8, |i, j| (i0..i0 + 4).contains(&i) && (j0..j0 + 4).contains(&j));
    Episode {
        support: vec![SupportPair {
            image: image(rng),
            mask: block(rng.random_range(0..2) * 4, rng.random_range(0..2) * 4),
        }],
        query_image: image(rng),
        query_mask: block(rng.random_range(0..2) * 4, rng.random_range(0..2) * 4),
        query_hidden: BinaryMask::zeros(8, 8),
        class_id: 0,
    }
}

/// Loss plus everything discrete the forward pass decided: ReLU signs and
/// background regions. A difference step that changes either straddles a
/// kink, where the derivative is undefined.
fn episode_loss(episode: &Episode, params: &ParamStore, cfg: &ModelConfig, seed: u64) -> (f64, Vec<bool>) {
    let pass = forward_episode(episode, params, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let tape = &pass.tape;
    let mut pattern: Vec<bool> = tape
        .op_trace()
        .iter()
        .zip(tape.vars())
        .filter(|(r, _)| r.op == "relu")
        .flat_map(|(_, v)| tape.value(v).data().iter().map(|&x| x > 0.0).collect::<Vec<_>>())
        .collect();
    for m in &pass.background_masks {
        pattern.extend_from_slice(m.as_slice());
    }
    (pass.loss, pattern)
}

#[derive(Clone, Copy, Debug)]
pub struct EndToEnd {
    pub worst: f64,
    pub checked: usize,
    /// Entries skipped because the difference step crossed a kink.
    pub kinks: usize,
}

impl EndToEnd {
    pub fn passes(&self) -> bool {
        self.checked > 0 && self.kinks * 50 <= self.checked && self.worst < END_TO_END_TOLERANCE
    }
}

/// Full `forward_episode` on 8×8 episodes with both branches active, a
/// random sample of entries from every parameter tensor, [`SEEDS`] seeds.
pub fn end_to_end() -> EndToEnd {
    let cfg = ModelConfig {
        channels: 4,
        high_channels: 4,
        n_clusters: 2,
        ..ModelConfig::default()
    };
    let mut out = EndToEnd {
        worst: 0.0,
        checked: 0,
        kinks: 0,
    };
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let episode = tiny_episode(&mut rng);
        let mut params = init_params(&cfg, &mut rng).unwrap();
        let mut pass = forward_episode(&episode, &params, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert!(pass.loss_agnostic.is_some());
        pass.backward(&mut params).unwrap();
        let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
        for name in names {
            let analytic = params.get(&name).unwrap().grad().unwrap().to_vec();
            for _ in 0..12 {
                let j = rng.random_range(0..analytic.len());
                let mut p = params.clone();
                p.get_mut(&name).unwrap().data_mut()[j] += STEP;
                let (up, up_pattern) = episode_loss(&episode, &p, &cfg, seed);
                p.get_mut(&name).unwrap().data_mut()[j] -= 2.0 * STEP;
                let (down, down_pattern) = episode_loss(&episode, &p, &cfg, seed);
                if up_pattern != down_pattern {
                    out.kinks += 1;
                    continue;
                }
                let numeric = (up - down) / (2.0 * STEP);
                out.worst = out.worst.max(rel_err(analytic[j], numeric));
                out.checked += 1;
            }
        }
    }
    out
}
