//! Tape-based reverse-mode differentiation.
//!
//! Every forward operation appends a node to a [`Graph`] holding its value and
//! the data its backward rule needs. Nodes only reference earlier nodes, so
//! the node list is already in topological order and [`Graph::backward`] is
//! a single reverse sweep. A node that is read by several consumers receives
//! the sum of their contributions.

use crate::error::{HorstError, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        cols: Vec<f64>,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        input: Var,
        scale: f64,
    },
    ChannelPool {
        input: Var,
        argmax: Vec<usize>,
    },
    SpatialAvgPool(Var),
    AvgPool2(Var),
    Concat(Vec<Var>),
    MulMap {
        x: Var,
        map: Var,
    },
    Mul(Var, Var),
    Dot(Var, Var),
    ChannelDot {
        q: Var,
        k: Var,
    },
    ScaleEntry {
        x: Var,
        weights: Var,
        index: usize,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Add(Vec<Var>),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// require gradients.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Like [`Gradients::get`] but yields zeros when a required-grad input had
    /// no path to the loss.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softmax_into(x: &[f64], scale: f64) -> Vec<f64> {
    let m = x.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b * scale));
    let mut out: Vec<f64> = x.iter().map(|&v| (v * scale - m).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

/// Plain scaled softmax with max subtraction.
pub fn softmax_scaled(scores: &[f64], scale: f64) -> Vec<f64> {
    softmax_into(scores, scale)
}

pub(crate) fn conv_out_extent(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

/// im2col for a 3x3 kernel with zero padding 1.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, stride: usize) -> (Vec<f64>, usize, usize) {
    let ho = conv_out_extent(h, stride);
    let wo = conv_out_extent(w, stride);
    let p = ho * wo;
    let mut cols = vec![0.0; c * 9 * p];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, stride: usize, out: &mut [f64]) {
    let ho = conv_out_extent(h, stride);
    let wo = conv_out_extent(w, stride);
    let p = ho * wo;
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m x n] += a[m x k] * b[k x n]`, with explicit strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: extents and strides describe regions inside the given slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn chw(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        self.value(v).chw().ok_or_else(|| {
            HorstError::shape(op, format!("expected CxHxW, got {:?}", self.shape(v)))
        })
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// 3x3 cross-correlation with zero padding 1 and no bias. Output extents are
    /// `ceil(H / stride) x ceil(W / stride)`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (c, h, w) = self.chw(input, "conv2d")?;
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 4 || ks[2] != 3 || ks[3] != 3 {
            return Err(HorstError::shape(
                "conv2d",
                format!("kernel must be Cout x Cin x 3 x 3, got {ks:?}"),
            ));
        }
        if ks[1] != c {
            return Err(HorstError::shape(
                "conv2d",
                format!("input has {c} channels, kernel expects {}", ks[1]),
            ));
        }
        if stride == 0 {
            return Err(HorstError::shape("conv2d", "stride must be >= 1"));
        }
        let co = ks[0];
        let (cols, ho, wo) = im2col(self.value(input).data(), c, h, w, stride);
        let p = ho * wo;
        let mut out = vec![0.0; co * p];
        gemm_acc(
            co,
            c * 9,
            p,
            self.value(kernel).data(),
            (c * 9, 1),
            &cols,
            (p, 1),
            &mut out,
        );
        let ng = self.ng(&[input, kernel]);
        let value = Tensor::new(vec![co, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                stride,
                cols: if ng { cols } else { Vec::new() },
            },
            ng,
        ))
    }

    /// Normalizes the channel vector at each spatial position, then applies the
    /// per-channel affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (c, h, w) = self.chw(input, "layer_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(HorstError::shape(
                "layer_norm",
                format!(
                    "{c} channels but gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let p = h * w;
        let x = self.value(input).data();
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; c * p];
        let mut rstd = vec![0.0; p];
        let mut out = vec![0.0; c * p];
        for i in 0..p {
            let mean = (0..c).map(|ch| x[ch * p + i]).sum::<f64>() / c as f64;
            let var = (0..c).map(|ch| (x[ch * p + i] - mean).powi(2)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for ch in 0..c {
                let xh = (x[ch * p + i] - mean) * r;
                xhat[ch * p + i] = xh;
                out[ch * p + i] = gm[ch] * xh + bt[ch];
            }
        }
        let ng = self.ng(&[input, gamma, beta]);
        let value = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // NaN passes through so a corrupted input surfaces in the loss.
        let value = self.value(x).map(|v| if v < 0.0 { 0.0 } else { v });
        let ng = self.ng(&[x]);
        self.push(value, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let ng = self.ng(&[x]);
        self.push(value, Op::Sigmoid(x), ng)
    }

    /// `softmax(scale * x)` over a rank-1 tensor.
    pub fn softmax_scaled(&mut self, input: Var, scale: f64) -> Result<Var> {
        if self.value(input).rank() != 1 {
            return Err(HorstError::shape(
                "softmax_scaled",
                format!("expected a vector, got {:?}", self.shape(input)),
            ));
        }
        let value = Tensor::from_vec(softmax_into(self.value(input).data(), scale));
        let ng = self.ng(&[input]);
        Ok(self.push(value, Op::Softmax { input, scale }, ng))
    }

    /// Per-pixel `[max, mean]` over channels: `C x H x W -> 2 x H x W`.
    pub fn channel_pool(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = self.chw(input, "channel_pool")?;
        let p = h * w;
        let x = self.value(input).data();
        let mut out = vec![0.0; 2 * p];
        let mut argmax = vec![0; p];
        for i in 0..p {
            let mut best = 0;
            let mut sum = 0.0;
            for ch in 0..c {
                let v = x[ch * p + i];
                sum += v;
                if v > x[best * p + i] {
                    best = ch;
                }
            }
            argmax[i] = best;
            out[i] = x[best * p + i];
            out[p + i] = sum / c as f64;
        }
        let ng = self.ng(&[input]);
        let value = Tensor::new(vec![2, h, w], out)?;
        Ok(self.push(value, Op::ChannelPool { input, argmax }, ng))
    }

    /// Mean over all spatial positions: `C x H x W -> C`.
    pub fn spatial_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = self.chw(input, "spatial_avg_pool")?;
        let p = h * w;
        let x = self.value(input).data();
        let out = (0..c)
            .map(|ch| x[ch * p..(ch + 1) * p].iter().sum::<f64>() / p as f64)
            .collect();
        let ng = self.ng(&[input]);
        Ok(self.push(Tensor::from_vec(out), Op::SpatialAvgPool(input), ng))
    }

    /// 2x2 average pooling to `ceil(H/2) x ceil(W/2)`; edge windows average
    /// only the pixels that exist.
    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = self.chw(input, "avg_pool2")?;
        let (ho, wo) = (conv_out_extent(h, 2), conv_out_extent(w, 2));
        let x = self.value(input).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    let mut n = 0;
                    for iy in 2 * oy..(2 * oy + 2).min(h) {
                        for ix in 2 * ox..(2 * ox + 2).min(w) {
                            s += x[(ch * h + iy) * w + ix];
                            n += 1;
                        }
                    }
                    out[(ch * ho + oy) * wo + ox] = s / n as f64;
                }
            }
        }
        let ng = self.ng(&[input]);
        let value = Tensor::new(vec![c, ho, wo], out)?;
        Ok(self.push(value, Op::AvgPool2(input), ng))
    }

    /// Concatenation along the leading axis (channels for maps, entries for
    /// vectors).
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| HorstError::shape("concat", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &v in inputs {
            let s = self.shape(v);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(HorstError::shape(
                    "concat",
                    format!("trailing extents {:?} vs {:?}", &s[1..], tail),
                ));
            }
            lead += s[0];
            data.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let ng = self.ng(inputs);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat(inputs.to_vec()), ng))
    }

    /// Multiplies every channel of `x` (`C x H x W`) by the single-channel map
    /// `map` (`1 x H x W`).
    pub fn mul_map(&mut self, x: Var, map: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x, "mul_map")?;
        if self.shape(map) != [1, h, w] {
            return Err(HorstError::shape(
                "mul_map",
                format!("map {:?} does not match {:?}", self.shape(map), [1, h, w]),
            ));
        }
        let p = h * w;
        let xv = self.value(x).data();
        let m = self.value(map).data();
        let out = (0..c * p).map(|i| xv[i] * m[i % p]).collect();
        let ng = self.ng(&[x, map]);
        let value = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push(value, Op::MulMap { x, map }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(HorstError::shape(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.ng(&[a, b]);
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    /// Dot product of the flattened operands, as a one-element tensor.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(HorstError::shape(
                "dot",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), ng))
    }

    /// `out[0, h, w] = sum_c q[c] * k[c, h, w]`.
    pub fn channel_dot(&mut self, q: Var, k: Var) -> Result<Var> {
        let (c, h, w) = self.chw(k, "channel_dot")?;
        if self.shape(q) != [c] {
            return Err(HorstError::shape(
                "channel_dot",
                format!("query {:?} vs {c} channels", self.shape(q)),
            ));
        }
        let p = h * w;
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let mut out = vec![0.0; p];
        for ch in 0..c {
            let a = qv[ch];
            for (o, &kk) in out.iter_mut().zip(&kv[ch * p..(ch + 1) * p]) {
                *o += a * kk;
            }
        }
        let ng = self.ng(&[q, k]);
        let value = Tensor::new(vec![1, h, w], out)?;
        Ok(self.push(value, Op::ChannelDot { q, k }, ng))
    }

    /// `x * weights[index]`.
    pub fn scale_entry(&mut self, x: Var, weights: Var, index: usize) -> Result<Var> {
        let wv = self.value(weights);
        if wv.rank() != 1 || index >= wv.len() {
            return Err(HorstError::shape(
                "scale_entry",
                format!("index {index} into {:?}", wv.shape()),
            ));
        }
        let s = wv.data()[index];
        let value = self.value(x).map(|v| v * s);
        let ng = self.ng(&[x, weights]);
        Ok(self.push(value, Op::ScaleEntry { x, weights, index }, ng))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let ng = self.ng(&[x]);
        self.push(value, Op::Scale { x, factor }, ng)
    }

    pub fn add_n(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| HorstError::shape("add", "no inputs"))?;
        let shape = self.shape(*first).to_vec();
        let mut out = vec![0.0; self.value(*first).len()];
        for &v in inputs {
            if self.shape(v) != shape.as_slice() {
                return Err(HorstError::shape(
                    "add",
                    format!("{:?} vs {:?}", self.shape(v), shape),
                ));
            }
            for (o, x) in out.iter_mut().zip(self.value(v).data()) {
                *o += x;
            }
        }
        let ng = self.ng(inputs);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Add(inputs.to_vec()), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_n(&[a, b])
    }

    /// `w x + b` with `x: [D]`, `w: [O, D]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let d = self.value(x).len();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || ws[1] != d || self.shape(b) != [ws[0]] {
            return Err(HorstError::shape(
                "linear",
                format!("input {d}, weight {ws:?}, bias {:?}", self.shape(b)),
            ));
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let out = (0..ws[0])
            .map(|o| {
                bv[o]
                    + wv[o * d..(o + 1) * d]
                        .iter()
                        .zip(xv)
                        .map(|(a, c)| a * c)
                        .sum::<f64>()
            })
            .collect();
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(Tensor::from_vec(out), Op::Linear { x, w, b }, ng))
    }

    /// Negative log softmax probability of `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 1 {
            return Err(HorstError::shape(
                "cross_entropy",
                format!("logits {:?}", lv.shape()),
            ));
        }
        if label >= lv.len() {
            return Err(HorstError::LabelOutOfRange {
                head: "logits",
                label,
                classes: lv.len(),
            });
        }
        let probs = softmax_into(lv.data(), 1.0);
        let m = lv.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + lv.data().iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let loss = lse - lv.data()[label];
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            ng,
        ))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(HorstError::Graph(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let dy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        // Only leaves that asked for gradients keep them.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn backprop_node(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                stride,
                cols,
            } => {
                let (c, h, w) = self.value(*input).chw().unwrap();
                let co = self.shape(*kernel)[0];
                let p = node.value.len() / co;
                if let Some(gk) = self.acc(grads, *kernel) {
                    // dK[co, k] += dOut[co, p] . cols[k, p]
                    gemm_acc(co, p, c * 9, dy, (p, 1), cols, (1, p), gk);
                }
                if self.nodes[input.0].needs_grad {
                    let mut dcols = vec![0.0; c * 9 * p];
                    gemm_acc(
                        c * 9,
                        co,
                        p,
                        self.value(*kernel).data(),
                        (1, c * 9),
                        dy,
                        (p, 1),
                        &mut dcols,
                    );
                    let gi = self.acc(grads, *input).unwrap();
                    col2im(&dcols, c, h, w, *stride, gi);
                }
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (c, h, w) = node.value.chw().unwrap();
                let p = h * w;
                let gm = self.value(*gamma).data().to_vec();
                if let Some(gg) = self.acc(grads, *gamma) {
                    for ch in 0..c {
                        gg[ch] += (0..p)
                            .map(|i| dy[ch * p + i] * xhat[ch * p + i])
                            .sum::<f64>();
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for ch in 0..c {
                        gb[ch] += dy[ch * p..(ch + 1) * p].iter().sum::<f64>();
                    }
                }
                if let Some(gi) = self.acc(grads, *input) {
                    let cf = c as f64;
                    for i in 0..p {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for ch in 0..c {
                            let dxh = dy[ch * p + i] * gm[ch];
                            s1 += dxh;
                            s2 += dxh * xhat[ch * p + i];
                        }
                        for ch in 0..c {
                            let dxh = dy[ch * p + i] * gm[ch];
                            gi[ch * p + i] +=
                                rstd[i] / cf * (cf * dxh - s1 - xhat[ch * p + i] * s2);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(gi) = self.acc(grads, *x) {
                    for ((g, &d), &v) in gi.iter_mut().zip(dy).zip(xv) {
                        if v > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                if let Some(gi) = self.acc(grads, *x) {
                    for ((g, &d), &y) in gi.iter_mut().zip(dy).zip(yv) {
                        *g += d * y * (1.0 - y);
                    }
                }
            }
            Op::Softmax { input, scale } => {
                let y = node.value.data();
                let s: f64 = dy.iter().zip(y).map(|(d, p)| d * p).sum();
                if let Some(gi) = self.acc(grads, *input) {
                    for ((g, &d), &p) in gi.iter_mut().zip(dy).zip(y) {
                        *g += scale * p * (d - s);
                    }
                }
            }
            Op::ChannelPool { input, argmax } => {
                let (c, h, w) = self.value(*input).chw().unwrap();
                let p = h * w;
                if let Some(gi) = self.acc(grads, *input) {
                    for i in 0..p {
                        gi[argmax[i] * p + i] += dy[i];
                        let m = dy[p + i] / c as f64;
                        for ch in 0..c {
                            gi[ch * p + i] += m;
                        }
                    }
                }
            }
            Op::SpatialAvgPool(x) => {
                let (c, h, w) = self.value(*x).chw().unwrap();
                let p = h * w;
                if let Some(gi) = self.acc(grads, *x) {
                    for ch in 0..c {
                        let d = dy[ch] / p as f64;
                        gi[ch * p..(ch + 1) * p].iter_mut().for_each(|g| *g += d);
                    }
                }
            }
            Op::AvgPool2(x) => {
                let (c, h, w) = self.value(*x).chw().unwrap();
                let (_, ho, wo) = node.value.chw().unwrap();
                if let Some(gi) = self.acc(grads, *x) {
                    for ch in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let ys = 2 * oy..(2 * oy + 2).min(h);
                                let xs = 2 * ox..(2 * ox + 2).min(w);
                                let n = (ys.len() * xs.len()) as f64;
                                let d = dy[(ch * ho + oy) * wo + ox] / n;
                                for iy in ys {
                                    for ix in xs.clone() {
                                        gi[(ch * h + iy) * w + ix] += d;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat(inputs) => {
                let mut off = 0;
                for &v in inputs {
                    let n = self.value(v).len();
                    if let Some(gi) = self.acc(grads, v) {
                        for (g, d) in gi.iter_mut().zip(&dy[off..off + n]) {
                            *g += d;
                        }
                    }
                    off += n;
                }
            }
            Op::MulMap { x, map } => {
                let p = self.value(*map).len();
                let xv = self.value(*x).data();
                let mv = self.value(*map).data();
                if let Some(gi) = self.acc(grads, *x) {
                    for (i, g) in gi.iter_mut().enumerate() {
                        *g += dy[i] * mv[i % p];
                    }
                }
                if let Some(gm) = self.acc(grads, *map) {
                    for (i, (&d, &v)) in dy.iter().zip(xv).enumerate() {
                        gm[i % p] += d * v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((g, d), v) in ga.iter_mut().zip(dy).zip(bv) {
                        *g += d * v;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((g, d), v) in gb.iter_mut().zip(dy).zip(av) {
                        *g += d * v;
                    }
                }
            }
            Op::Dot(a, b) => {
                let d = dy[0];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for (g, v) in ga.iter_mut().zip(bv) {
                        *g += d * v;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (g, v) in gb.iter_mut().zip(av) {
                        *g += d * v;
                    }
                }
            }
            Op::ChannelDot { q, k } => {
                let (c, h, w) = self.value(*k).chw().unwrap();
                let p = h * w;
                let qv = self.value(*q).data();
                let kv = self.value(*k).data();
                if let Some(gq) = self.acc(grads, *q) {
                    for ch in 0..c {
                        gq[ch] += kv[ch * p..(ch + 1) * p]
                            .iter()
                            .zip(dy)
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
                if let Some(gk) = self.acc(grads, *k) {
                    for ch in 0..c {
                        for (g, d) in gk[ch * p..(ch + 1) * p].iter_mut().zip(dy) {
                            *g += d * qv[ch];
                        }
                    }
                }
            }
            Op::ScaleEntry { x, weights, index } => {
                let s = self.value(*weights).data()[*index];
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for (g, d) in gx.iter_mut().zip(dy) {
                        *g += d * s;
                    }
                }
                if let Some(gw) = self.acc(grads, *weights) {
                    gw[*index] += dy.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Op::Scale { x, factor } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (g, d) in gx.iter_mut().zip(dy) {
                        *g += d * factor;
                    }
                }
            }
            Op::Add(inputs) => {
                for &v in inputs {
                    if let Some(gi) = self.acc(grads, v) {
                        for (g, d) in gi.iter_mut().zip(dy) {
                            *g += d;
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let d = self.value(*x).len();
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if let Some(gb) = self.acc(grads, *b) {
                    for (g, v) in gb.iter_mut().zip(dy) {
                        *g += v;
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    for (o, &dv) in dy.iter().enumerate() {
                        for (g, &xx) in gw[o * d..(o + 1) * d].iter_mut().zip(xv) {
                            *g += dv * xx;
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, &dv) in dy.iter().enumerate() {
                        for (g, &ww) in gx.iter_mut().zip(&wv[o * d..(o + 1) * d]) {
                            *g += dv * ww;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                if let Some(gl) = self.acc(grads, *logits) {
                    for (i, (g, p)) in gl.iter_mut().zip(probs).enumerate() {
                        let t = if i == *label { 1.0 } else { 0.0 };
                        *g += dy[0] * (p - t);
                    }
                }
            }
        }
    }
}
