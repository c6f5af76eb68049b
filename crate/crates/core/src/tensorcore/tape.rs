use crate::error::{Error, Result};

use super::kernels;
use super::tensor::{BinaryMask, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
    },
    Relu(Var),
    AvgPool2(Var),
    Concat {
        a: Var,
        b: Var,
    },
    SliceChannels {
        input: Var,
        start: usize,
    },
    CrossEntropy {
        logits: Var,
        target: Vec<bool>,
        counted: Vec<bool>,
        terms: usize,
    },
    MaskedMean {
        input: Var,
        mask: BinaryMask,
        count: usize,
    },
    Mean(Vec<Var>),
    Expand {
        proto: Var,
    },
    ExpandRegions {
        protos: Vec<Var>,
        assignment: Vec<usize>,
    },
    Sum(Var),
    Scale {
        input: Var,
        factor: f64,
    },
    Add {
        a: Var,
        b: Var,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::AvgPool2(_) => "avg_pool2",
            Op::Concat { .. } => "concat_channels",
            Op::SliceChannels { .. } => "slice_channels",
            Op::CrossEntropy { .. } => "pixel_cross_entropy",
            Op::MaskedMean { .. } => "masked_mean",
            Op::Mean(_) => "mean",
            Op::Expand { .. } => "expand",
            Op::ExpandRegions { .. } => "expand_regions",
            Op::Sum(_) => "sum",
            Op::Scale { .. } => "scale",
            Op::Add { .. } => "add",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One entry of [`Tape::op_trace`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpRecord {
    pub op: &'static str,
    pub shape: Vec<usize>,
}

/// Records forward operations in order and replays them in reverse to
/// accumulate gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input. Gradients are tracked when `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        let rg = tensor.requires_grad();
        let value = Tensor::new(tensor.shape().to_vec(), tensor.data().to_vec()).expect("shape already validated");
        self.push(value, Op::Leaf, rg)
    }

    /// Records a tracked input taking ownership of `tensor`.
    pub fn variable(&mut self, tensor: Tensor) -> Var {
        let value = Tensor::new(tensor.shape().to_vec(), tensor.into_data()).expect("validated");
        self.push(value, Op::Leaf, true)
    }

    /// Records an untracked input.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let value = Tensor::new(tensor.shape().to_vec(), tensor.into_data()).expect("validated");
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Every recorded node, in recording order; aligned with [`Tape::op_trace`].
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        (0..self.nodes.len()).map(Var)
    }

    pub fn op_trace(&self) -> Vec<OpRecord> {
        self.nodes
            .iter()
            .map(|n| OpRecord {
                op: n.op.name(),
                shape: n.value.shape().to_vec(),
            })
            .collect()
    }

    /// Same-padded 2-D cross-correlation. `kernel` is `[kh, kw, cin, cout]`
    /// with odd spatial extents.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        let b = self.value(bias);
        let (h, w, cin) = x.dims3()?;
        let (kh, kw, kcin, cout) = match k.shape()[..] {
            [a, b, c, d] => (a, b, c, d),
            _ => return Err(Error::shape(format!("kernel must be rank 4, got {:?}", k.shape()))),
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(format!("kernel spatial dims must be odd, got {kh}x{kw}")));
        }
        if kcin != cin {
            return Err(Error::shape(format!(
                "kernel expects {kcin} input channels, input has {cin}"
            )));
        }
        if b.shape() != [cout] {
            return Err(Error::shape(format!("bias shape {:?} != [{cout}]", b.shape())));
        }
        let dims = kernels::ConvDims {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
        };
        let out = kernels::conv2d_forward(&dims, x.data(), k.data(), b.data());
        let rg = self.needs(&[input, kernel, bias]);
        let value = Tensor::new(vec![h, w, cout], out)?;
        Ok(self.push(value, Op::Conv2d { input, kernel, bias }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[input]);
        self.push(value, Op::Relu(input), rg)
    }

    /// 2×2 average pooling with stride 2; height and width must be even.
    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (h, w, c) = x.dims3()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("avg_pool2 needs even dims, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; oh * ow * c];
        let xd = x.data();
        for i in 0..oh {
            for j in 0..ow {
                let o = &mut out[(i * ow + j) * c..][..c];
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let src = &xd[((2 * i + di) * w + 2 * j + dj) * c..][..c];
                    for (acc, &s) in o.iter_mut().zip(src) {
                        *acc += s;
                    }
                }
                o.iter_mut().for_each(|v| *v *= 0.25);
            }
        }
        let rg = self.needs(&[input]);
        Ok(self.push(Tensor::new(vec![oh, ow, c], out)?, Op::AvgPool2(input), rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (h, w, ca) = ta.dims3()?;
        let (hb, wb, cb) = tb.dims3()?;
        if (h, w) != (hb, wb) {
            return Err(Error::shape(format!("concat spatial mismatch: {h}x{w} vs {hb}x{wb}")));
        }
        let mut out = Vec::with_capacity(h * w * (ca + cb));
        for p in 0..h * w {
            out.extend_from_slice(&ta.data()[p * ca..(p + 1) * ca]);
            out.extend_from_slice(&tb.data()[p * cb..(p + 1) * cb]);
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![h, w, ca + cb], out)?, Op::Concat { a, b }, rg))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(input).slice_channels(start, end)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::SliceChannels { input, start }, rg))
    }

    /// Mean over counted pixels of `-log softmax(logits)[target]`.
    ///
    /// `logits` is `[h, w, 2]`; pixels set in `ignore` are excluded.
    pub fn pixel_cross_entropy(
        &mut self,
        logits: Var,
        target: &BinaryMask,
        ignore: Option<&BinaryMask>,
    ) -> Result<Var> {
        let l = self.value(logits);
        let (h, w, c) = l.dims3()?;
        if c != 2 || target.dims() != (h, w) {
            return Err(Error::shape(format!(
                "logits {:?} incompatible with target {:?}",
                l.shape(),
                target.dims()
            )));
        }
        let counted: Vec<bool> = match ignore {
            Some(m) if m.dims() != (h, w) => return Err(Error::shape("ignore mask shape differs from target")),
            Some(m) => m.as_slice().iter().map(|&b| !b).collect(),
            None => vec![true; h * w],
        };
        let terms = counted.iter().filter(|&&b| b).count();
        if terms == 0 {
            return Err(Error::EmptyLoss);
        }
        let mut total = 0.0;
        for (p, px) in l.data().chunks_exact(2).enumerate() {
            if !counted[p] {
                continue;
            }
            let t = target.as_slice()[p] as usize;
            total += kernels::log_sum_exp2(px[0], px[1]) - px[t];
        }
        let value = Tensor::scalar(total / terms as f64);
        let rg = self.needs(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            target: target.as_slice().to_vec(),
            counted,
            terms,
        };
        Ok(self.push(value, op, rg))
    }

    /// Mask average pooling: mean of the channel vectors under `mask`,
    /// returned as a `[c]` tensor.
    pub fn masked_mean(&mut self, input: Var, mask: &BinaryMask) -> Result<Var> {
        let x = self.value(input);
        let (h, w, c) = x.dims3()?;
        if mask.dims() != (h, w) {
            return Err(Error::shape(format!(
                "mask {:?} does not match features {h}x{w}",
                mask.dims()
            )));
        }
        let count = mask.count();
        if count == 0 {
            return Err(Error::EmptyMask("masked mean over an empty mask".into()));
        }
        let mut sum = vec![0.0; c];
        for (p, px) in x.data().chunks_exact(c.max(1)).enumerate().take(h * w) {
            if mask.as_slice()[p] {
                for (s, &v) in sum.iter_mut().zip(px) {
                    *s += v;
                }
            }
        }
        let n = count as f64;
        sum.iter_mut().for_each(|s| *s /= n);
        let rg = self.needs(&[input]);
        let op = Op::MaskedMean {
            input,
            mask: mask.clone(),
            count,
        };
        Ok(self.push(Tensor::new(vec![c], sum)?, op, rg))
    }

    /// Elementwise mean of equally shaped values.
    pub fn mean(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::shape("mean of an empty list"))?;
        let shape = self.value(*first).shape().to_vec();
        let mut acc = vec![0.0; self.value(*first).numel()];
        for v in inputs {
            let t = self.value(*v);
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(format!("mean over shapes {shape:?} and {:?}", t.shape())));
            }
            for (a, &x) in acc.iter_mut().zip(t.data()) {
                *a += x;
            }
        }
        let n = inputs.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        let rg = self.needs(inputs);
        Ok(self.push(Tensor::new(shape, acc)?, Op::Mean(inputs.to_vec()), rg))
    }

    /// Tiles a `[c]` vector over an `h × w` grid.
    pub fn expand(&mut self, proto: Var, h: usize, w: usize) -> Result<Var> {
        let p = self.value(proto);
        if p.shape().len() != 1 {
            return Err(Error::shape(format!("expand needs a vector, got {:?}", p.shape())));
        }
        let c = p.numel();
        let mut out = Vec::with_capacity(h * w * c);
        for _ in 0..h * w {
            out.extend_from_slice(p.data());
        }
        let rg = self.needs(&[proto]);
        Ok(self.push(Tensor::new(vec![h, w, c], out)?, Op::Expand { proto }, rg))
    }

    /// Writes `protos[assignment[p]]` at every pixel `p` of an `h × w` grid.
    pub fn expand_regions(&mut self, protos: &[Var], assignment: &[usize], h: usize, w: usize) -> Result<Var> {
        let first = protos
            .first()
            .ok_or_else(|| Error::shape("expand_regions needs at least one prototype"))?;
        let c = self.value(*first).numel();
        if assignment.len() != h * w {
            return Err(Error::shape(format!(
                "assignment covers {} pixels, grid has {}",
                assignment.len(),
                h * w
            )));
        }
        for p in protos {
            let t = self.value(*p);
            if t.shape() != [c] {
                return Err(Error::shape(format!("prototype shape {:?} != [{c}]", t.shape())));
            }
        }
        let mut out = Vec::with_capacity(h * w * c);
        for &a in assignment {
            let p = protos
                .get(a)
                .ok_or_else(|| Error::shape(format!("assignment index {a} out of range")))?;
            out.extend_from_slice(self.value(*p).data());
        }
        let rg = self.needs(protos);
        let op = Op::ExpandRegions {
            protos: protos.to_vec(),
            assignment: assignment.to_vec(),
        };
        Ok(self.push(Tensor::new(vec![h, w, c], out)?, op, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum();
        let rg = self.needs(&[input]);
        self.push(Tensor::scalar(s), Op::Sum(input), rg)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[input]);
        self.push(value, Op::Scale { input, factor }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!("add {:?} + {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Reverse-mode sweep from a scalar `loss`. Afterwards [`Tape::grad`]
    /// returns `d loss / d v` for every tracked value `v` that feeds `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[idx].as_deref() else {
                continue;
            };
            let gout = gout.to_vec();
            self.propagate(idx, &gout, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let tracked = |v: Var| nodes[v.0].requires_grad;

        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias } => {
                let x = &nodes[input.0].value;
                let k = &nodes[kernel.0].value;
                let (h, w, cin) = x.dims3().expect("validated");
                let s = k.shape();
                let dims = kernels::ConvDims {
                    h,
                    w,
                    cin,
                    kh: s[0],
                    kw: s[1],
                    cout: s[3],
                };
                if tracked(*bias) {
                    let gb = slot(grads, nodes, *bias);
                    for px in gout.chunks_exact(dims.cout) {
                        for (g, &v) in gb.iter_mut().zip(px) {
                            *g += v;
                        }
                    }
                }
                if tracked(*kernel) {
                    let gk = slot(grads, nodes, *kernel);
                    kernels::conv2d_backward_kernel(&dims, x.data(), gout, gk);
                }
                if tracked(*input) {
                    let gx = slot(grads, nodes, *input);
                    kernels::conv2d_backward_input(&dims, k.data(), gout, gx);
                }
            }
            Op::Relu(input) => {
                let x = nodes[input.0].value.data();
                let gx = slot(grads, nodes, *input);
                for ((g, &xv), &go) in gx.iter_mut().zip(x).zip(gout) {
                    if xv > 0.0 {
                        *g += go;
                    }
                }
            }
            Op::AvgPool2(input) => {
                let (h, w, c) = nodes[input.0].value.dims3().expect("validated");
                let ow = w / 2;
                let gx = slot(grads, nodes, *input);
                for i in 0..h {
                    for j in 0..w {
                        let src = &gout[((i / 2) * ow + j / 2) * c..][..c];
                        let dst = &mut gx[(i * w + j) * c..][..c];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += 0.25 * s;
                        }
                    }
                }
            }
            Op::Concat { a, b } => {
                let ca = nodes[a.0].value.shape()[2];
                let cb = nodes[b.0].value.shape()[2];
                let pixels = nodes[a.0].value.numel() / ca.max(1);
                let pixels = if ca == 0 {
                    nodes[b.0].value.numel() / cb.max(1)
                } else {
                    pixels
                };
                for (v, off, cv) in [(*a, 0, ca), (*b, ca, cb)] {
                    if !tracked(v) || cv == 0 {
                        continue;
                    }
                    let gv = slot(grads, nodes, v);
                    for p in 0..pixels {
                        let src = &gout[p * (ca + cb) + off..][..cv];
                        for (d, &s) in gv[p * cv..][..cv].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::SliceChannels { input, start } => {
                let c = nodes[input.0].value.shape()[2];
                let cs = nodes[idx].value.shape()[2];
                let gx = slot(grads, nodes, *input);
                for (p, src) in gout.chunks_exact(cs.max(1)).enumerate() {
                    if cs == 0 {
                        break;
                    }
                    for (d, &s) in gx[p * c + start..][..cs].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                counted,
                terms,
            } => {
                let l = nodes[logits.0].value.data();
                let scale = gout[0] / *terms as f64;
                let gl = slot(grads, nodes, *logits);
                for p in 0..target.len() {
                    if !counted[p] {
                        continue;
                    }
                    let (z0, z1) = (l[2 * p], l[2 * p + 1]);
                    let lse = kernels::log_sum_exp2(z0, z1);
                    let (p0, p1) = ((z0 - lse).exp(), (z1 - lse).exp());
                    let t = target[p] as usize;
                    gl[2 * p] += scale * (p0 - (t == 0) as u8 as f64);
                    gl[2 * p + 1] += scale * (p1 - (t == 1) as u8 as f64);
                }
            }
            Op::MaskedMean { input, mask, count } => {
                let c = nodes[idx].value.numel();
                let inv = 1.0 / *count as f64;
                let gx = slot(grads, nodes, *input);
                for (p, &m) in mask.as_slice().iter().enumerate() {
                    if m {
                        for (d, &s) in gx[p * c..][..c].iter_mut().zip(gout) {
                            *d += s * inv;
                        }
                    }
                }
            }
            Op::Mean(inputs) => {
                let inv = 1.0 / inputs.len() as f64;
                for v in inputs {
                    if tracked(*v) {
                        for (d, &s) in slot(grads, nodes, *v).iter_mut().zip(gout) {
                            *d += s * inv;
                        }
                    }
                }
            }
            Op::Expand { proto } => {
                let c = nodes[proto.0].value.numel();
                let gp = slot(grads, nodes, *proto);
                for px in gout.chunks_exact(c.max(1)) {
                    for (d, &s) in gp.iter_mut().zip(px) {
                        *d += s;
                    }
                }
            }
            Op::ExpandRegions { protos, assignment } => {
                let c = nodes[protos[0].0].value.numel();
                for (p, &a) in assignment.iter().enumerate() {
                    let v = protos[a];
                    if !tracked(v) {
                        continue;
                    }
                    for (d, &s) in slot(grads, nodes, v).iter_mut().zip(&gout[p * c..][..c]) {
                        *d += s;
                    }
                }
            }
            Op::Sum(input) => {
                let g = gout[0];
                slot(grads, nodes, *input).iter_mut().for_each(|d| *d += g);
            }
            Op::Scale { input, factor } => {
                for (d, &s) in slot(grads, nodes, *input).iter_mut().zip(gout) {
                    *d += s * factor;
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if tracked(v) {
                        for (d, &s) in slot(grads, nodes, v).iter_mut().zip(gout) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    let n = nodes[v.0].value.numel();
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}
