use serde::{Deserialize, Serialize};

use super::linalg::gemm;
use super::rng::RngStream;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How dropout layers behave during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    Train,
    /// Stochastic at inference time, used for Monte Carlo scoring.
    McActive,
    Off,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    ChannelAffine {
        input: Var,
        scale: Var,
        shift: Var,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    /// Reduction over the two trailing axes that picks one source element
    /// per output (global max or min).
    SpatialSelect {
        input: Var,
        index: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    PatchDistance {
        latent: Var,
        protos: Var,
    },
    Similarity {
        input: Var,
        eps: f64,
    },
    RowSelect {
        input: Var,
        index: Vec<usize>,
    },
    MaskedL1 {
        input: Var,
        mask: Vec<bool>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Define-by-run tape. Build one per forward pass; `backward` may run once.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Tensor>>>,
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn first_extreme(values: &[f64], better: impl Fn(f64, f64) -> bool) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if better(v, values[best]) {
            best = i;
        }
    }
    best
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf with no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        if requires_grad {
            self.param(value)
        } else {
            self.constant(value)
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if `v` tracked one.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.as_ref()?.get(v.0)?.as_ref()
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn map(&self, v: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(v);
        Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let t = Tensor::new(x.shape.clone(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p - q).collect();
        let t = Tensor::new(x.shape.clone(), data)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let t = Tensor::new(x.shape.clone(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.map(a, |x| x * s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x * x);
        self.push(t, Op::Square(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data.iter().sum::<f64>() / t.numel().max(1) as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    /// 2-D convolution of an `N×C×H×W` input with an `O×C×K×K` kernel.
    /// Output extent per axis is `floor((H + 2·pad − K)/stride) + 1`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be at least 1"));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(shape_err("conv2d bias", self.shape(b), &[o]));
            }
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let p = ho * wo;
        let ckk = c * k * k;
        let x = &self.value(input).data;
        let wt = &self.value(weight).data;
        let mut cols = vec![0.0; n * ckk * p];
        let mut out = vec![0.0; n * o * p];
        for ni in 0..n {
            let col = &mut cols[ni * ckk * p..(ni + 1) * ckk * p];
            im2col(&x[ni * c * h * w..(ni + 1) * c * h * w], (c, h, w), k, stride, pad, (ho, wo), col);
            gemm(o, ckk, p, wt, false, col, false, 0.0, &mut out[ni * o * p..(ni + 1) * o * p]);
        }
        if let Some(b) = bias {
            let bv = &self.value(b).data;
            for (chunk, &bias) in out.chunks_mut(p).zip(bv.iter().cycle()) {
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        let t = Tensor::new(vec![n, o, ho, wo], out)?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                cols,
            },
            &parents,
        ))
    }

    /// Per-channel `x·scale[c] + shift[c]` on an `N×C×H×W` tensor.
    pub fn channel_affine(&mut self, input: Var, scale: Var, shift: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 || self.shape(scale) != [xs[1]] || self.shape(shift) != [xs[1]] {
            return Err(shape_err("channel_affine", &xs, self.shape(scale)));
        }
        let hw = xs[2] * xs[3];
        let (sc, sh) = (&self.value(scale).data, &self.value(shift).data);
        let x = self.value(input);
        let mut data = x.data.clone();
        for (i, chunk) in data.chunks_mut(hw).enumerate() {
            let ch = i % xs[1];
            chunk.iter_mut().for_each(|v| *v = *v * sc[ch] + sh[ch]);
        }
        let t = Tensor::new(xs, data)?;
        Ok(self.push(t, Op::ChannelAffine { input, scale, shift }, &[input, scale, shift]))
    }

    /// Non-overlapping `window×window` max pooling; trailing rows/cols that do
    /// not fill a window are dropped (floor convention).
    pub fn max_pool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 || window == 0 || xs[2] < window || xs[3] < window {
            return Err(Error::invalid(format!(
                "max_pool2d: window {window} does not fit input {xs:?}"
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / window, w / window);
        let x = &self.value(input).data;
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * window * w + ox * window;
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = base + (oy * window + dy) * w + ox * window + dx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let t = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(t, Op::MaxPool2d { input, argmax }, &[input]))
    }

    fn spatial_select(&mut self, input: Var, max: bool) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() < 2 || xs[xs.len() - 1] * xs[xs.len() - 2] == 0 {
            return Err(Error::invalid(format!(
                "global pooling needs a non-empty spatial extent, got {xs:?}"
            )));
        }
        let hw = xs[xs.len() - 1] * xs[xs.len() - 2];
        let x = &self.value(input).data;
        let mut out = Vec::with_capacity(x.len() / hw);
        let mut index = Vec::with_capacity(x.len() / hw);
        for (plane, chunk) in x.chunks(hw).enumerate() {
            let i = if max {
                first_extreme(chunk, |a, b| a > b)
            } else {
                first_extreme(chunk, |a, b| a < b)
            };
            out.push(chunk[i]);
            index.push(plane * hw + i);
        }
        let t = Tensor::new(xs[..xs.len() - 2].to_vec(), out)?;
        Ok(self.push(t, Op::SpatialSelect { input, index }, &[input]))
    }

    /// Max over the two trailing (spatial) axes. Gradient flows to the first
    /// maximum in row-major order.
    pub fn global_max_pool(&mut self, input: Var) -> Result<Var> {
        self.spatial_select(input, true)
    }

    /// Min over the two trailing axes, first minimum on ties.
    pub fn global_min_pool(&mut self, input: Var) -> Result<Var> {
        self.spatial_select(input, false)
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() < 2 || xs[xs.len() - 1] * xs[xs.len() - 2] == 0 {
            return Err(Error::invalid(format!(
                "global pooling needs a non-empty spatial extent, got {xs:?}"
            )));
        }
        let hw = xs[xs.len() - 1] * xs[xs.len() - 2];
        let out = self
            .value(input)
            .data
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        let t = Tensor::new(xs[..xs.len() - 2].to_vec(), out)?;
        Ok(self.push(t, Op::GlobalAvgPool(input), &[input]))
    }

    /// Inverted dropout. In `Train` and `McActive` each unit is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)`; `Off`
    /// and `rate == 0` return `input` unchanged.
    pub fn dropout(
        &mut self,
        input: Var,
        rate: f64,
        mode: DropoutMode,
        rng: &mut RngStream,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == DropoutMode::Off || rate == 0.0 {
            return Ok(input);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let numel = self.value(input).numel();
        let mask: Vec<f64> = (0..numel)
            .map(|_| if rng.next_f64() < rate { 0.0 } else { keep_scale })
            .collect();
        let x = self.value(input);
        let data = x.data.iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(x.shape.clone(), data)?;
        Ok(self.push(t, Op::Dropout { input, mask }, &[input]))
    }

    /// `x·W + b` for `x: B×K`, `W: K×N`, `b: N`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(shape_err("dense", &xs, &ws));
        }
        let (b, k, n) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0; b * n];
        gemm(b, k, n, &self.value(input).data, false, &self.value(weight).data, false, 0.0, &mut out);
        if let Some(bv) = bias {
            if self.shape(bv) != [n] {
                return Err(shape_err("dense bias", self.shape(bv), &[n]));
            }
            let bias = &self.value(bv).data;
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
            }
        }
        let t = Tensor::new(vec![b, n], out)?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.push(t, Op::Dense { input, weight, bias }, &parents))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() || ls[0] == 0 {
            return Err(shape_err("softmax_cross_entropy", &ls, &[labels.len()]));
        }
        let c = ls[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = self.value(logits).data.clone();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        loss /= labels.len() as f64;
        let labels = labels.to_vec();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            },
            &[logits],
        ))
    }

    /// Squared L2 distance between every prototype (`m×D×h×w`) and every
    /// `h×w` window of the latent grid (`B×D×H×W`), giving `B×m×H'×W'`.
    pub fn patch_distances(&mut self, latent: Var, protos: Var) -> Result<Var> {
        let zs = self.shape(latent).to_vec();
        let ps = self.shape(protos).to_vec();
        if zs.len() != 4 || ps.len() != 4 || zs[1] != ps[1] || ps[2] > zs[2] || ps[3] > zs[3] {
            return Err(shape_err("patch_distances", &zs, &ps));
        }
        let (b, d, h, w) = (zs[0], zs[1], zs[2], zs[3]);
        let (m, ph, pw) = (ps[0], ps[2], ps[3]);
        let (ho, wo) = (h - ph + 1, w - pw + 1);
        let z = &self.value(latent).data;
        let p = &self.value(protos).data;
        let mut out = vec![0.0; b * m * ho * wo];
        for bi in 0..b {
            for j in 0..m {
                for y in 0..ho {
                    for x in 0..wo {
                        let mut acc = 0.0;
                        for di in 0..d {
                            for dy in 0..ph {
                                for dx in 0..pw {
                                    let zv = z[((bi * d + di) * h + y + dy) * w + x + dx];
                                    let pv = p[((j * d + di) * ph + dy) * pw + dx];
                                    let diff = zv - pv;
                                    acc += diff * diff;
                                }
                            }
                        }
                        out[((bi * m + j) * ho + y) * wo + x] = acc;
                    }
                }
            }
        }
        let t = Tensor::new(vec![b, m, ho, wo], out)?;
        Ok(self.push(t, Op::PatchDistance { latent, protos }, &[latent, protos]))
    }

    /// `log((d + 1)/(d + eps))`, elementwise; `d` must be non-negative.
    /// NaN passes through so the caller's loss check can report it.
    pub fn similarity(&mut self, input: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::invalid(format!("similarity epsilon {eps} must be positive")));
        }
        if let Some(bad) = self.value(input).data.iter().find(|&&d| d < 0.0) {
            return Err(Error::invalid(format!("similarity of negative distance {bad}")));
        }
        let t = self.map(input, |d| similarity(d, eps));
        Ok(self.push(t, Op::Similarity { input, eps }, &[input]))
    }

    /// For `x: B×m` and a `B×m` mask, the per-row minimum over masked
    /// entries (first on ties). Every row must select at least one entry.
    pub fn masked_row_min(&mut self, input: Var, mask: &[bool]) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 2 || mask.len() != xs[0] * xs[1] {
            return Err(shape_err("masked_row_min", &xs, &[mask.len()]));
        }
        let cols = xs[1];
        let x = &self.value(input).data;
        let mut out = Vec::with_capacity(xs[0]);
        let mut index = Vec::with_capacity(xs[0]);
        for r in 0..xs[0] {
            let mut best: Option<usize> = None;
            for c in 0..cols {
                let i = r * cols + c;
                if mask[i] && best.is_none_or(|b| x[i] < x[b]) {
                    best = Some(i);
                }
            }
            let best = best.ok_or_else(|| {
                Error::invalid(format!("masked_row_min: row {r} selects no entries"))
            })?;
            out.push(x[best]);
            index.push(best);
        }
        let t = Tensor::new(vec![xs[0]], out)?;
        Ok(self.push(t, Op::RowSelect { input, index }, &[input]))
    }

    /// Sum of `|x|` over masked entries.
    pub fn masked_l1(&mut self, input: Var, mask: &[bool]) -> Result<Var> {
        let x = self.value(input);
        if mask.len() != x.numel() {
            return Err(shape_err("masked_l1", x.shape(), &[mask.len()]));
        }
        let s = x
            .data
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| v.abs())
            .sum();
        let mask = mask.to_vec();
        Ok(self.push(Tensor::scalar(s), Op::MaskedL1 { input, mask }, &[input]))
    }

    /// Populates gradients of `loss` for every node that tracks one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarBackward(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(&mut slot.data);
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = &g.data;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, gd));
                self.accumulate(grads, *b, |d| add_into(d, gd));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, gd));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(gd).for_each(|(x, g)| *x -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                self.accumulate(grads, *a, |d| {
                    d.iter_mut().zip(gd).zip(bv).for_each(|((x, g), y)| *x += g * y)
                });
                self.accumulate(grads, *b, |d| {
                    d.iter_mut().zip(gd).zip(av).for_each(|((x, g), y)| *x += g * y)
                });
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(x, g)| *x += g * s));
            }
            Op::Square(a) => {
                let av = &self.value(*a).data;
                self.accumulate(grads, *a, |d| {
                    d.iter_mut().zip(gd).zip(av).for_each(|((x, g), y)| *x += 2.0 * g * y)
                });
            }
            Op::Sum(a) => {
                let g0 = gd[0];
                self.accumulate(grads, *a, |d| d.iter_mut().for_each(|x| *x += g0));
            }
            Op::Mean(a) => {
                let g0 = gd[0] / self.value(*a).numel().max(1) as f64;
                self.accumulate(grads, *a, |d| d.iter_mut().for_each(|x| *x += g0));
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |d| add_into(d, gd)),
            Op::Relu(a) => {
                let av = &self.value(*a).data;
                self.accumulate(grads, *a, |d| {
                    for ((x, g), y) in d.iter_mut().zip(gd).zip(av) {
                        if *y > 0.0 {
                            *x += g;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let out = &self.nodes[i].value.data;
                self.accumulate(grads, *a, |d| {
                    d.iter_mut()
                        .zip(gd)
                        .zip(out)
                        .for_each(|((x, g), s)| *x += g * s * (1.0 - s))
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                cols,
            } => self.conv2d_backward(i, *input, *weight, *bias, *stride, *pad, cols, gd, grads),
            Op::ChannelAffine { input, scale, shift } => {
                let xs = self.shape(*input);
                let (c, hw) = (xs[1], xs[2] * xs[3]);
                let x = &self.value(*input).data;
                let sc = &self.value(*scale).data;
                self.accumulate(grads, *input, |d| {
                    for (p, (dc, gc)) in d.chunks_mut(hw).zip(gd.chunks(hw)).enumerate() {
                        let s = sc[p % c];
                        dc.iter_mut().zip(gc).for_each(|(x, g)| *x += g * s);
                    }
                });
                self.accumulate(grads, *scale, |d| {
                    for (p, (xc, gc)) in x.chunks(hw).zip(gd.chunks(hw)).enumerate() {
                        d[p % c] += xc.iter().zip(gc).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
                self.accumulate(grads, *shift, |d| {
                    for (p, gc) in gd.chunks(hw).enumerate() {
                        d[p % c] += gc.iter().sum::<f64>();
                    }
                });
            }
            Op::MaxPool2d { input, argmax } | Op::SpatialSelect { input, index: argmax } => {
                self.accumulate(grads, *input, |d| {
                    argmax.iter().zip(gd).for_each(|(&k, g)| d[k] += g)
                });
            }
            Op::RowSelect { input, index } => {
                self.accumulate(grads, *input, |d| {
                    index.iter().zip(gd).for_each(|(&k, g)| d[k] += g)
                });
            }
            Op::GlobalAvgPool(a) => {
                let xs = self.shape(*a);
                let hw = xs[xs.len() - 1] * xs[xs.len() - 2];
                self.accumulate(grads, *a, |d| {
                    for (dc, g) in d.chunks_mut(hw).zip(gd) {
                        let v = g / hw as f64;
                        dc.iter_mut().for_each(|x| *x += v);
                    }
                });
            }
            Op::Dropout { input, mask } => {
                self.accumulate(grads, *input, |d| {
                    d.iter_mut().zip(gd).zip(mask).for_each(|((x, g), m)| *x += g * m)
                });
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let xs = self.shape(*input);
                let ws = self.shape(*weight);
                let (b, k, n) = (xs[0], xs[1], ws[1]);
                let xv = &self.value(*input).data;
                let wv = &self.value(*weight).data;
                self.accumulate(grads, *input, |d| gemm(b, n, k, gd, false, wv, true, 1.0, d));
                self.accumulate(grads, *weight, |d| gemm(k, b, n, xv, true, gd, false, 1.0, d));
                if let Some(bv) = bias {
                    self.accumulate(grads, *bv, |d| {
                        for row in gd.chunks(n) {
                            add_into(d, row);
                        }
                    });
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let scale = gd[0] / labels.len() as f64;
                self.accumulate(grads, *logits, |d| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            d[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::PatchDistance { latent, protos } => {
                self.patch_distance_backward(*latent, *protos, gd, grads)
            }
            Op::Similarity { input, eps } => {
                let dv = &self.value(*input).data;
                self.accumulate(grads, *input, |d| {
                    for ((x, g), dist) in d.iter_mut().zip(gd).zip(dv) {
                        *x += g * (1.0 / (dist + 1.0) - 1.0 / (dist + eps));
                    }
                });
            }
            Op::MaskedL1 { input, mask } => {
                let xv = &self.value(*input).data;
                let g0 = gd[0];
                self.accumulate(grads, *input, |d| {
                    for ((x, v), &m) in d.iter_mut().zip(xv).zip(mask) {
                        // subgradient 0 at the kink
                        if m && *v != 0.0 {
                            *x += g0 * v.signum();
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        i: usize,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        cols: &[f64],
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        let os = self.nodes[i].value.shape();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        let (ho, wo) = (os[2], os[3]);
        let p = ho * wo;
        let ckk = c * k * k;
        if let Some(b) = bias {
            self.accumulate(grads, b, |d| {
                for (plane, gc) in gd.chunks(p).enumerate() {
                    d[plane % o] += gc.iter().sum::<f64>();
                }
            });
        }
        self.accumulate(grads, weight, |d| {
            for ni in 0..n {
                let g = &gd[ni * o * p..(ni + 1) * o * p];
                let col = &cols[ni * ckk * p..(ni + 1) * ckk * p];
                gemm(o, p, ckk, g, false, col, true, 1.0, d);
            }
        });
        let wv = &self.value(weight).data;
        self.accumulate(grads, input, |d| {
            let mut dcol = vec![0.0; ckk * p];
            for ni in 0..n {
                let g = &gd[ni * o * p..(ni + 1) * o * p];
                gemm(ckk, o, p, wv, true, g, false, 0.0, &mut dcol);
                col2im(&dcol, (c, h, w), k, stride, pad, (ho, wo), &mut d[ni * c * h * w..(ni + 1) * c * h * w]);
            }
        });
    }

    fn patch_distance_backward(
        &self,
        latent: Var,
        protos: Var,
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let zs = self.shape(latent);
        let ps = self.shape(protos);
        let (b, d, h, w) = (zs[0], zs[1], zs[2], zs[3]);
        let (m, ph, pw) = (ps[0], ps[2], ps[3]);
        let (ho, wo) = (h - ph + 1, w - pw + 1);
        let z = &self.value(latent).data;
        let p = &self.value(protos).data;
        let mut dz = vec![0.0; z.len()];
        let mut dp = vec![0.0; p.len()];
        for bi in 0..b {
            for j in 0..m {
                for y in 0..ho {
                    for x in 0..wo {
                        let g = gd[((bi * m + j) * ho + y) * wo + x];
                        if g == 0.0 {
                            continue;
                        }
                        for di in 0..d {
                            for dy in 0..ph {
                                for dx in 0..pw {
                                    let zi = ((bi * d + di) * h + y + dy) * w + x + dx;
                                    let pi = ((j * d + di) * ph + dy) * pw + dx;
                                    let t = 2.0 * g * (z[zi] - p[pi]);
                                    dz[zi] += t;
                                    dp[pi] -= t;
                                }
                            }
                        }
                    }
                }
            }
        }
        self.accumulate(grads, latent, |d| add_into(d, &dz));
        self.accumulate(grads, protos, |d| add_into(d, &dp));
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn similarity(d: f64, eps: f64) -> f64 {
    ((d + 1.0) / (d + eps)).ln()
}

fn im2col(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    col: &mut [f64],
) {
    let p = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        dst[oy * wo..(oy + 1) * wo].fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        dst[oy * wo + ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(
    col: &[f64],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    dx: &mut [f64],
) {
    let p = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[(ci * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Pointwise nonlinearities selectable by name in configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::invalid(format!("unknown activation `{other}`"))),
        }
    }
}

impl Graph {
    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
        }
    }
}
