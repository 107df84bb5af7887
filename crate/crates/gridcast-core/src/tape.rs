//! Recorded-operation reverse-mode differentiation.
//!
//! A [`Tape`] records every differentiable operation as it executes; the
//! node list is topologically ordered by construction, so a single reverse
//! sweep from a scalar loss accumulates gradients for every leaf. The op
//! set is exactly what the forecasting models need: per-pixel channel
//! mixing, elementwise activations, bilinear warping, bias-table lookups,
//! neighborhood gathers, broadcasts, and the three losses.
//!
//! Gradients of a value used several times accumulate by summation,
//! including repeated bias-table lookups.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::tensor::Tensor;
use crate::Result;

/// Clamp applied to cross-entropy probabilities.
pub const BCE_EPS: f64 = 1e-7;

const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;
const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
const LEAKY_SLOPE: f64 = 0.01;

/// Elementwise activation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// alpha = 1
    Elu,
    Selu,
    /// slope 0.01
    LeakyRelu,
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Elu => "elu",
            Activation::Selu => "selu",
            Activation::LeakyRelu => "leaky_relu",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "relu" => Ok(Activation::Relu),
            "elu" => Ok(Activation::Elu),
            "selu" => Ok(Activation::Selu),
            "leaky_relu" => Ok(Activation::LeakyRelu),
            other => Err(Error::config(alloc::format!(
                "unknown activation '{other}' (expected relu, elu, selu, leaky_relu)"
            ))),
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    libm::exp(x) - 1.0
                }
            }
            Activation::Selu => {
                if x > 0.0 {
                    SELU_LAMBDA * x
                } else {
                    SELU_LAMBDA * SELU_ALPHA * (libm::exp(x) - 1.0)
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
        }
    }

    /// Derivative expressed from input `x` and output `y` (saves the exp).
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Selu => {
                if x > 0.0 {
                    SELU_LAMBDA
                } else {
                    y + SELU_LAMBDA * SELU_ALPHA
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

enum Op {
    Leaf,
    ChannelLinear {
        input: Var,
        weights: Var,
        bias: Var,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    BilinearSample {
        field: Var,
        displacement: Var,
    },
    NeighborhoodGather {
        input: Var,
        k: usize,
    },
    /// `[H, W, K, C]` table fixed at one K index -> `[H, W, C]`.
    HourSlice {
        table: Var,
        hour: usize,
    },
    /// Table viewed as `[N, L]` rows; one row -> `[L]`.
    LastAxisRow {
        table: Var,
        row: usize,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    /// `[.., L] + [L]`, vector broadcast over leading axes.
    AddVector {
        input: Var,
        vector: Var,
    },
    /// `[H, W, C] * [H, W]`, field broadcast over channels.
    MulField {
        input: Var,
        field: Var,
    },
    Sum {
        input: Var,
    },
    Mse {
        pred: Var,
        target: Tensor,
    },
    MaskedMse {
        pred: Var,
        target: Tensor,
        mask: Tensor,
    },
    BinaryCrossEntropy {
        pred: Var,
        target: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of a scalar loss with respect to every leaf node,
/// shape-congruent with the leaves they belong to.
#[derive(Debug)]
pub struct GradientMap {
    grads: BTreeMap<usize, Tensor>,
}

impl GradientMap {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var.0)
    }

    /// Gradient for `var`, or zeros of the given shape when the leaf was
    /// never touched by the loss (or not registered at all).
    pub fn get_or_zeros(&self, var: Option<Var>, shape: &[usize]) -> Tensor {
        var.and_then(|v| self.grads.get(&v.0).cloned())
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Ordered record of executed differentiable operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Registers an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    // ── Forward operations ─────────────────────────────────────────────

    /// Per-pixel dense mix of channels: `out[x,y,:] = W · in[x,y,:] + b`.
    pub fn channel_linear(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let (h, w, c_in) = expect_rank3(self.value(input), "channel_linear input")?;
        let ws = self.value(weights).shape();
        if ws.len() != 2 || ws[1] != c_in {
            return Err(Error::ShapeMismatch {
                op: "channel_linear weights",
                expected: vec![ws.first().copied().unwrap_or(0), c_in],
                got: ws.to_vec(),
            });
        }
        let c_out = ws[0];
        let bs = self.value(bias).shape();
        if bs != [c_out] {
            return Err(Error::ShapeMismatch {
                op: "channel_linear bias",
                expected: vec![c_out],
                got: bs.to_vec(),
            });
        }

        let x = self.value(input).data();
        let wd = self.value(weights).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; h * w * c_out];
        for p in 0..h * w {
            let xin = &x[p * c_in..(p + 1) * c_in];
            let o = &mut out[p * c_out..(p + 1) * c_out];
            for (co, slot) in o.iter_mut().enumerate() {
                let row = &wd[co * c_in..(co + 1) * c_in];
                let mut acc = bd[co];
                for (wv, xv) in row.iter().zip(xin) {
                    acc += wv * xv;
                }
                *slot = acc;
            }
        }
        Ok(self.push(
            Tensor::from_raw(vec![h, w, c_out], out),
            Op::ChannelLinear { input, weights, bias },
        ))
    }

    /// Elementwise activation; total on any shape.
    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let v = self.value(input);
        let out: Vec<f64> = v.data().iter().map(|&x| kind.apply(x)).collect();
        let shape = v.shape().to_vec();
        self.push(Tensor::from_raw(shape, out), Op::Activation { input, kind })
    }

    /// Bilinear resampling of `field[H,W]` at `(x + dx, y + dy)` with
    /// source coordinates clamped to the border. `displacement[H,W,2]`
    /// holds `(dx, dy)` in pixel units, dx along columns.
    pub fn bilinear_sample(&mut self, field: Var, displacement: Var) -> Result<Var> {
        let fs = self.value(field).shape();
        if fs.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "bilinear_sample field",
                expected: vec![0, 0],
                got: fs.to_vec(),
            });
        }
        let (h, w) = (fs[0], fs[1]);
        let ds = self.value(displacement).shape();
        if ds != [h, w, 2] {
            return Err(Error::ShapeMismatch {
                op: "bilinear_sample displacement",
                expected: vec![h, w, 2],
                got: ds.to_vec(),
            });
        }

        let f = self.value(field).data();
        let d = self.value(displacement).data();
        let mut out = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let (v, _, _) = bilinear_at(f, h, w, j as f64 + d[p * 2], i as f64 + d[p * 2 + 1]);
                out[p] = v;
            }
        }
        Ok(self.push(
            Tensor::from_raw(vec![h, w], out),
            Op::BilinearSample { field, displacement },
        ))
    }

    /// Collects the k x k zero-padded neighborhood of every pixel into
    /// channels: `[H,W,C] -> [H,W,k*k*C]`. Realizes kernels larger than 1
    /// on top of `channel_linear`.
    pub fn neighborhood_gather(&mut self, input: Var, k: usize) -> Result<Var> {
        if k % 2 == 0 || k == 0 {
            return Err(Error::config("neighborhood gather size must be odd and >= 1"));
        }
        let (h, w, c) = expect_rank3(self.value(input), "neighborhood_gather input")?;
        let r = (k / 2) as isize;
        let x = self.value(input).data();
        let mut out = vec![0.0; h * w * k * k * c];
        for i in 0..h {
            for j in 0..w {
                let base = (i * w + j) * k * k * c;
                for di in 0..k {
                    for dj in 0..k {
                        let si = i as isize + di as isize - r;
                        let sj = j as isize + dj as isize - r;
                        if si < 0 || si >= h as isize || sj < 0 || sj >= w as isize {
                            continue; // zero padding
                        }
                        let src = (si as usize * w + sj as usize) * c;
                        let dst = base + (di * k + dj) * c;
                        out[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_raw(vec![h, w, k * k * c], out),
            Op::NeighborhoodGather { input, k },
        ))
    }

    /// Slices a `[H,W,K,C]` table at one index of the K axis.
    pub fn hour_slice(&mut self, table: Var, hour: usize) -> Result<Var> {
        let ts = self.value(table).shape();
        if ts.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "hour_slice table",
                expected: vec![0, 0, 0, 0],
                got: ts.to_vec(),
            });
        }
        let (h, w, k, c) = (ts[0], ts[1], ts[2], ts[3]);
        if hour >= k {
            return Err(Error::IndexOutOfRange {
                what: "hour_slice",
                index: hour,
                len: k,
            });
        }
        let t = self.value(table).data();
        let mut out = vec![0.0; h * w * c];
        for p in 0..h * w {
            let src = (p * k + hour) * c;
            out[p * c..(p + 1) * c].copy_from_slice(&t[src..src + c]);
        }
        Ok(self.push(
            Tensor::from_raw(vec![h, w, c], out),
            Op::HourSlice { table, hour },
        ))
    }

    /// Views a tensor as `[N, L]` with L the last axis and extracts row
    /// `row` as a `[L]` vector.
    pub fn last_axis_row(&mut self, table: Var, row: usize) -> Result<Var> {
        let ts = self.value(table).shape();
        if ts.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "last_axis_row table",
                expected: vec![0],
                got: ts.to_vec(),
            });
        }
        let l = ts[ts.len() - 1];
        let n = self.value(table).len() / l.max(1);
        if row >= n {
            return Err(Error::IndexOutOfRange {
                what: "last_axis_row",
                index: row,
                len: n,
            });
        }
        let t = self.value(table).data();
        let out = t[row * l..(row + 1) * l].to_vec();
        Ok(self.push(Tensor::from_raw(vec![l], out), Op::LastAxisRow { table, row }))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (ls, rs) = (self.value(lhs).shape(), self.value(rhs).shape());
        if ls != rs {
            return Err(Error::ShapeMismatch {
                op: "add",
                expected: ls.to_vec(),
                got: rs.to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(lhs)
            .data()
            .iter()
            .zip(self.value(rhs).data())
            .map(|(a, b)| a + b)
            .collect();
        let shape = ls.to_vec();
        Ok(self.push(Tensor::from_raw(shape, out), Op::Add { lhs, rhs }))
    }

    /// Adds a `[L]` vector to every length-L slice along the last axis.
    pub fn add_vector(&mut self, input: Var, vector: Var) -> Result<Var> {
        let is = self.value(input).shape().to_vec();
        let l = *is.last().unwrap_or(&0);
        let vs = self.value(vector).shape();
        if vs != [l] {
            return Err(Error::ShapeMismatch {
                op: "add_vector",
                expected: vec![l],
                got: vs.to_vec(),
            });
        }
        let v = self.value(vector).data().to_vec();
        let out: Vec<f64> = self
            .value(input)
            .data()
            .iter()
            .enumerate()
            .map(|(i, a)| a + v[i % l])
            .collect();
        Ok(self.push(Tensor::from_raw(is, out), Op::AddVector { input, vector }))
    }

    /// Multiplies `[H,W,C]` by a `[H,W]` field, broadcast over channels.
    pub fn mul_field(&mut self, input: Var, field: Var) -> Result<Var> {
        let (h, w, c) = expect_rank3(self.value(input), "mul_field input")?;
        let fs = self.value(field).shape();
        if fs != [h, w] {
            return Err(Error::ShapeMismatch {
                op: "mul_field field",
                expected: vec![h, w],
                got: fs.to_vec(),
            });
        }
        let x = self.value(input).data();
        let f = self.value(field).data();
        let mut out = vec![0.0; h * w * c];
        for p in 0..h * w {
            let m = f[p];
            for ch in 0..c {
                out[p * c + ch] = x[p * c + ch] * m;
            }
        }
        Ok(self.push(
            Tensor::from_raw(vec![h, w, c], out),
            Op::MulField { input, field },
        ))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, input: Var) -> Var {
        let s: f64 = self.value(input).data().iter().sum();
        self.push(Tensor::from_raw(Vec::new(), vec![s]), Op::Sum { input })
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let ps = self.value(pred).shape();
        if ps != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse",
                expected: ps.to_vec(),
                got: target.shape().to_vec(),
            });
        }
        let n = target.len().max(1) as f64;
        let s: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        Ok(self.push(
            Tensor::from_raw(Vec::new(), vec![s / n]),
            Op::Mse {
                pred,
                target: target.clone(),
            },
        ))
    }

    /// Mean squared error restricted to mask-1 elements; 0 on an empty
    /// mask.
    pub fn masked_mse(&mut self, pred: Var, target: &Tensor, mask: &Tensor) -> Result<Var> {
        let ps = self.value(pred).shape();
        if ps != target.shape() || ps != mask.shape() {
            return Err(Error::ShapeMismatch {
                op: "masked_mse",
                expected: ps.to_vec(),
                got: if ps != target.shape() {
                    target.shape().to_vec()
                } else {
                    mask.shape().to_vec()
                },
            });
        }
        let count: f64 = mask.data().iter().sum();
        let s: f64 = if count > 0.0 {
            self.value(pred)
                .data()
                .iter()
                .zip(target.data())
                .zip(mask.data())
                .map(|((p, t), m)| m * (p - t) * (p - t))
                .sum::<f64>()
                / count
        } else {
            0.0
        };
        Ok(self.push(
            Tensor::from_raw(Vec::new(), vec![s]),
            Op::MaskedMse {
                pred,
                target: target.clone(),
                mask: mask.clone(),
            },
        ))
    }

    /// Mean binary cross-entropy against a binary target; predictions are
    /// clamped to `[BCE_EPS, 1 - BCE_EPS]` and the clamp contributes zero
    /// gradient outside that range.
    pub fn binary_cross_entropy(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let ps = self.value(pred).shape();
        if ps != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "binary_cross_entropy",
                expected: ps.to_vec(),
                got: target.shape().to_vec(),
            });
        }
        let n = target.len().max(1) as f64;
        let s: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| {
                let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(t * libm::log(pc) + (1.0 - t) * libm::log(1.0 - pc))
            })
            .sum();
        Ok(self.push(
            Tensor::from_raw(Vec::new(), vec![s / n]),
            Op::BinaryCrossEntropy {
                pred,
                target: target.clone(),
            },
        ))
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Accumulates d loss / d leaf for every leaf node. The loss must be
    /// scalar; gradients must come back finite.
    pub fn reverse_gradients(&self, loss: Var) -> Result<GradientMap> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::NotScalarLoss {
                shape: loss_value.shape().to_vec(),
            });
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if grads[i].is_none() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = grads[i].take().expect("gradient present");
            self.backpropagate(i, &g, &mut grads);
        }

        let mut map = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf = node.op {
                if let Some(g) = grads[i].take() {
                    if !g.iter().all(|v| v.is_finite()) {
                        return Err(Error::NonFinite { what: "gradient" });
                    }
                    map.insert(i, Tensor::from_raw(node.value.shape().to_vec(), g));
                }
            }
        }
        Ok(GradientMap { grads: map })
    }

    fn backpropagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let accum = |grads: &mut [Option<Vec<f64>>], var: Var, contrib: &[f64]| {
            let slot = grads[var.0]
                .get_or_insert_with(|| vec![0.0; self.nodes[var.0].value.len()]);
            for (s, c) in slot.iter_mut().zip(contrib) {
                *s += c;
            }
        };

        match &self.nodes[i].op {
            Op::Leaf => unreachable!("leaves are skipped"),

            Op::ChannelLinear { input, weights, bias } => {
                let x = self.value(*input).data();
                let wd = self.value(*weights).data();
                let ws = self.value(*weights).shape();
                let (c_out, c_in) = (ws[0], ws[1]);
                let pixels = x.len() / c_in;

                let mut dx = vec![0.0; x.len()];
                let mut dw = vec![0.0; wd.len()];
                let mut db = vec![0.0; c_out];
                for p in 0..pixels {
                    let go = &g[p * c_out..(p + 1) * c_out];
                    let xin = &x[p * c_in..(p + 1) * c_in];
                    let dxi = &mut dx[p * c_in..(p + 1) * c_in];
                    for co in 0..c_out {
                        let gv = go[co];
                        db[co] += gv;
                        let row = &wd[co * c_in..(co + 1) * c_in];
                        let drow = &mut dw[co * c_in..(co + 1) * c_in];
                        for ci in 0..c_in {
                            dxi[ci] += gv * row[ci];
                            drow[ci] += gv * xin[ci];
                        }
                    }
                }
                accum(grads, *input, &dx);
                accum(grads, *weights, &dw);
                accum(grads, *bias, &db);
            }

            Op::Activation { input, kind } => {
                let x = self.value(*input).data();
                let y = self.nodes[i].value.data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .zip(y)
                    .map(|((gv, &xv), &yv)| gv * kind.derivative(xv, yv))
                    .collect();
                accum(grads, *input, &dx);
            }

            Op::BilinearSample { field, displacement } => {
                let f = self.value(*field).data();
                let fs = self.value(*field).shape();
                let (h, w) = (fs[0], fs[1]);
                let d = self.value(*displacement).data();

                let mut df = vec![0.0; f.len()];
                let mut dd = vec![0.0; d.len()];
                for i0 in 0..h {
                    for j0 in 0..w {
                        let p = i0 * w + j0;
                        let gv = g[p];
                        let sx = j0 as f64 + d[p * 2];
                        let sy = i0 as f64 + d[p * 2 + 1];
                        let (_, corners, slopes) = bilinear_at(f, h, w, sx, sy);
                        for (idx, wgt) in corners {
                            df[idx] += gv * wgt;
                        }
                        // Clamped coordinates stop responding to the
                        // displacement, so their slope is zero.
                        let (dvx, dvy) = slopes;
                        if (0.0..=(w - 1) as f64).contains(&sx) {
                            dd[p * 2] += gv * dvx;
                        }
                        if (0.0..=(h - 1) as f64).contains(&sy) {
                            dd[p * 2 + 1] += gv * dvy;
                        }
                    }
                }
                accum(grads, *field, &df);
                accum(grads, *displacement, &dd);
            }

            Op::NeighborhoodGather { input, k } => {
                let xs = self.value(*input).shape();
                let (h, w, c) = (xs[0], xs[1], xs[2]);
                let k = *k;
                let r = (k / 2) as isize;
                let mut dx = vec![0.0; h * w * c];
                for i0 in 0..h {
                    for j0 in 0..w {
                        let base = (i0 * w + j0) * k * k * c;
                        for di in 0..k {
                            for dj in 0..k {
                                let si = i0 as isize + di as isize - r;
                                let sj = j0 as isize + dj as isize - r;
                                if si < 0 || si >= h as isize || sj < 0 || sj >= w as isize {
                                    continue;
                                }
                                let src = (si as usize * w + sj as usize) * c;
                                let from = base + (di * k + dj) * c;
                                for ch in 0..c {
                                    dx[src + ch] += g[from + ch];
                                }
                            }
                        }
                    }
                }
                accum(grads, *input, &dx);
            }

            Op::HourSlice { table, hour } => {
                let ts = self.value(*table).shape();
                let (h, w, kdim, c) = (ts[0], ts[1], ts[2], ts[3]);
                let mut dt = vec![0.0; h * w * kdim * c];
                for p in 0..h * w {
                    let dst = (p * kdim + hour) * c;
                    for ch in 0..c {
                        dt[dst + ch] += g[p * c + ch];
                    }
                }
                accum(grads, *table, &dt);
            }

            Op::LastAxisRow { table, row } => {
                let t = self.value(*table);
                let l = *t.shape().last().unwrap();
                let mut dt = vec![0.0; t.len()];
                dt[row * l..(row + 1) * l].copy_from_slice(g);
                accum(grads, *table, &dt);
            }

            Op::Add { lhs, rhs } => {
                accum(grads, *lhs, g);
                accum(grads, *rhs, g);
            }

            Op::AddVector { input, vector } => {
                accum(grads, *input, g);
                let l = self.value(*vector).len();
                let mut dv = vec![0.0; l];
                for (i0, gv) in g.iter().enumerate() {
                    dv[i0 % l] += gv;
                }
                accum(grads, *vector, &dv);
            }

            Op::MulField { input, field } => {
                let x = self.value(*input).data();
                let f = self.value(*field).data();
                let c = x.len() / f.len();
                let mut dx = vec![0.0; x.len()];
                let mut df = vec![0.0; f.len()];
                for p in 0..f.len() {
                    for ch in 0..c {
                        dx[p * c + ch] = g[p * c + ch] * f[p];
                        df[p] += g[p * c + ch] * x[p * c + ch];
                    }
                }
                accum(grads, *input, &dx);
                accum(grads, *field, &df);
            }

            Op::Sum { input } => {
                let n = self.value(*input).len();
                accum(grads, *input, &vec![g[0]; n]);
            }

            Op::Mse { pred, target } => {
                let p = self.value(*pred).data();
                let n = target.len().max(1) as f64;
                let dp: Vec<f64> = p
                    .iter()
                    .zip(target.data())
                    .map(|(pv, tv)| g[0] * 2.0 * (pv - tv) / n)
                    .collect();
                accum(grads, *pred, &dp);
            }

            Op::MaskedMse { pred, target, mask } => {
                let count: f64 = mask.data().iter().sum();
                if count > 0.0 {
                    let p = self.value(*pred).data();
                    let dp: Vec<f64> = p
                        .iter()
                        .zip(target.data())
                        .zip(mask.data())
                        .map(|((pv, tv), mv)| g[0] * 2.0 * mv * (pv - tv) / count)
                        .collect();
                    accum(grads, *pred, &dp);
                }
            }

            Op::BinaryCrossEntropy { pred, target } => {
                let p = self.value(*pred).data();
                let n = target.len().max(1) as f64;
                let dp: Vec<f64> = p
                    .iter()
                    .zip(target.data())
                    .map(|(pv, tv)| {
                        if (BCE_EPS..=1.0 - BCE_EPS).contains(pv) {
                            g[0] * (pv - tv) / (pv * (1.0 - pv)) / n
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accum(grads, *pred, &dp);
            }
        }
    }
}

fn expect_rank3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch {
            op,
            expected: vec![0, 0, 0],
            got: s.to_vec(),
        });
    }
    Ok((s[0], s[1], s[2]))
}

/// Samples `field` at continuous `(sx, sy)` with border clamping.
/// Returns the value, the (index, weight) of up to four corners, and the
/// value slopes `(d/dsx, d/dsy)`.
fn bilinear_at(
    field: &[f64],
    h: usize,
    w: usize,
    sx: f64,
    sy: f64,
) -> (f64, [(usize, f64); 4], (f64, f64)) {
    let cx = sx.clamp(0.0, (w - 1) as f64);
    let cy = sy.clamp(0.0, (h - 1) as f64);
    let x0 = libm::floor(cx) as usize;
    let y0 = libm::floor(cy) as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = cx - x0 as f64;
    let fy = cy - y0 as f64;

    let f00 = field[y0 * w + x0];
    let f01 = field[y0 * w + x1];
    let f10 = field[y1 * w + x0];
    let f11 = field[y1 * w + x1];

    let value = (1.0 - fy) * ((1.0 - fx) * f00 + fx * f01) + fy * ((1.0 - fx) * f10 + fx * f11);
    let corners = [
        (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
        (y0 * w + x1, (1.0 - fy) * fx),
        (y1 * w + x0, fy * (1.0 - fx)),
        (y1 * w + x1, fy * fx),
    ];
    let dvx = (1.0 - fy) * (f01 - f00) + fy * (f11 - f10);
    let dvy = (1.0 - fx) * (f10 - f00) + fx * (f11 - f01);
    (value, corners, (dvx, dvy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FD_STEP: f64 = 1e-5;
    const FD_TOL: f64 = 1e-4;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    /// Max relative error between analytic gradients and central finite
    /// differences, checked at every element of every leaf. The numeric
    /// side only ever evaluates the forward pass.
    fn gradcheck(leaves: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.reverse_gradients(loss).unwrap();

        let eval = |ls: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ls.iter().map(|t| tape.leaf(t.clone())).collect();
            let loss = build(&mut tape, &vars);
            tape.value(loss).item()
        };

        let mut max_rel: f64 = 0.0;
        for li in 0..leaves.len() {
            for ei in 0..leaves[li].len() {
                let perturbed = |delta: f64| {
                    let mut ls = leaves.to_vec();
                    let mut data = ls[li].data().to_vec();
                    data[ei] += delta;
                    ls[li] = Tensor::new(ls[li].shape().to_vec(), data).unwrap();
                    ls
                };
                let numeric = (eval(&perturbed(FD_STEP)) - eval(&perturbed(-FD_STEP)))
                    / (2.0 * FD_STEP);
                let analytic = grads
                    .get(vars[li])
                    .map(|t| t.data()[ei])
                    .unwrap_or(0.0);
                let scale = analytic.abs().max(numeric.abs());
                if scale > 1e-8 {
                    max_rel = max_rel.max((analytic - numeric).abs() / scale);
                }
            }
        }
        max_rel
    }

    // ── channel_linear ─────────────────────────────────────────────────

    #[test]
    fn channel_linear_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, &[3, 4, 2], -1.0, 1.0);
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zero = Tensor::zeros(&[2]);

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(eye);
        let bv = tape.leaf(zero);
        let out = tape.channel_linear(xv, wv, bv).unwrap();
        assert_eq!(tape.value(out), &x);
    }

    #[test]
    fn channel_linear_constant_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&mut rng, &[2, 2, 3], -1.0, 1.0);
        let w = Tensor::zeros(&[2, 3]);
        let b = Tensor::new(vec![2], vec![0.7, -0.3]).unwrap();

        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let wv = tape.leaf(w);
        let bv = tape.leaf(b);
        let out = tape.channel_linear(xv, wv, bv).unwrap();
        for p in 0..4 {
            assert_eq!(tape.value(out).data()[p * 2], 0.7);
            assert_eq!(tape.value(out).data()[p * 2 + 1], -0.3);
        }
    }

    /// Independent per-pixel dense matrix-vector oracle.
    fn matvec_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
        let (hh, ww, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let cout = w.shape()[0];
        let mut out = vec![0.0; hh * ww * cout];
        for p in 0..hh * ww {
            for co in 0..cout {
                let mut acc = b.data()[co];
                for ci in 0..cin {
                    acc += w.data()[co * cin + ci] * x.data()[p * cin + ci];
                }
                out[p * cout + co] = acc;
            }
        }
        out
    }

    #[test]
    fn channel_linear_matches_matvec_oracle() {
        // 1x1 image, channels (1, 2), W = [[1,1],[1,-1]] -> (3, -1).
        let x = Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, -1.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        assert_eq!(matvec_oracle(&x, &w, &b), vec![3.0, -1.0]);

        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
        let out = tape.channel_linear(xv, wv, bv).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, -1.0]);

        // And on a larger random case.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, &[3, 5, 4], -2.0, 2.0);
        let w = random_tensor(&mut rng, &[6, 4], -1.0, 1.0);
        let b = random_tensor(&mut rng, &[6], -1.0, 1.0);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
        let out = tape.channel_linear(xv, wv, bv).unwrap();
        let oracle = matvec_oracle(&x, &w, &b);
        for (a, b) in tape.value(out).data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_linear_shape_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2, 3]));
        let w = tape.leaf(Tensor::zeros(&[4, 2])); // wrong c_in
        let b = tape.leaf(Tensor::zeros(&[4]));
        assert!(matches!(
            tape.channel_linear(x, w, b),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn channel_linear_is_spatially_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&mut rng, &[4, 3, 2], -1.0, 1.0);
        let w = random_tensor(&mut rng, &[3, 2], -1.0, 1.0);
        let b = random_tensor(&mut rng, &[3], -1.0, 1.0);

        // A fixed pixel permutation applied to [H, W, C] data.
        let pixels = 12;
        let mut perm: Vec<usize> = (0..pixels).collect();
        for i in (1..pixels).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let permute = |t: &Tensor| {
            let c = *t.shape().last().unwrap();
            let mut out = vec![0.0; t.len()];
            for (dst, &src) in perm.iter().enumerate() {
                out[dst * c..(dst + 1) * c].copy_from_slice(&t.data()[src * c..(src + 1) * c]);
            }
            Tensor::new(t.shape().to_vec(), out).unwrap()
        };

        let run = |input: &Tensor| {
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.leaf(input.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
            let out = tape.channel_linear(xv, wv, bv).unwrap();
            tape.value(out).clone()
        };

        assert_eq!(run(&permute(&x)), permute(&run(&x)));
    }

    // ── activation ─────────────────────────────────────────────────────

    #[test]
    fn elu_values() {
        assert_eq!(Activation::Elu.apply(0.0), 0.0);
        assert_eq!(Activation::Elu.apply(2.0), 2.0);
        // alpha * (e^-1 - 1)
        let expected = libm::exp(-1.0) - 1.0;
        assert!((Activation::Elu.apply(-1.0) - expected).abs() < 1e-15);
        assert!((expected + 0.63212).abs() < 1e-5);
    }

    #[test]
    fn elu_is_smooth_at_zero() {
        let h = 1e-7;
        let right = (Activation::Elu.apply(h) - Activation::Elu.apply(0.0)) / h;
        let left = (Activation::Elu.apply(0.0) - Activation::Elu.apply(-h)) / h;
        assert!((right - 1.0).abs() < 1e-6);
        assert!((left - 1.0).abs() < 1e-6);
    }

    // ── bilinear_sample ────────────────────────────────────────────────

    #[test]
    fn bilinear_zero_displacement_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let field = random_tensor(&mut rng, &[4, 5], 0.0, 1.0);
        let disp = Tensor::zeros(&[4, 5, 2]);
        let mut tape = Tape::new();
        let (fv, dv) = (tape.leaf(field.clone()), tape.leaf(disp));
        let out = tape.bilinear_sample(fv, dv).unwrap();
        assert_eq!(tape.value(out), &field);
    }

    #[test]
    fn bilinear_integer_shift_with_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let field = random_tensor(&mut rng, &[3, 4], 0.0, 1.0);
        // dx = 1 everywhere: every output pixel reads one column right,
        // last column duplicated by clamping.
        let disp = Tensor::from_fn(&[3, 4, 2], |i| if i % 2 == 0 { 1.0 } else { 0.0 });
        let mut tape = Tape::new();
        let (fv, dv) = (tape.leaf(field.clone()), tape.leaf(disp));
        let out = tape.bilinear_sample(fv, dv).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let src = (j + 1).min(3);
                assert!((tape.value(out).at(&[i, j]) - field.at(&[i, src])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bilinear_half_pixel() {
        let field = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let disp = Tensor::new(vec![1, 2, 2], vec![0.5, 0.0, 0.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let (fv, dv) = (tape.leaf(field), tape.leaf(disp));
        let out = tape.bilinear_sample(fv, dv).unwrap();
        assert!((tape.value(out).at(&[0, 0]) - 0.5).abs() < 1e-15);
    }

    // ── reverse_gradients ──────────────────────────────────────────────

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
        let loss = tape.sum(x);
        let grads = tape.reverse_gradients(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            tape.reverse_gradients(x),
            Err(Error::NotScalarLoss { .. })
        ));
    }

    #[test]
    fn gradcheck_linear_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
        let w = random_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let b = random_tensor(&mut rng, &[3], -0.5, 0.5);
        let target = random_tensor(&mut rng, &[2, 3, 3], -1.0, 1.0);

        let err = gradcheck(&[x, w, b], |tape, vars| {
            let out = tape.channel_linear(vars[0], vars[1], vars[2]).unwrap();
            tape.mse(out, &target).unwrap()
        });
        assert!(err < FD_TOL, "max relative error {err}");
    }

    #[test]
    fn gradcheck_elu_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_tensor(&mut rng, &[2, 2, 3], -1.0, 1.0);
        let w = random_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        let b = random_tensor(&mut rng, &[2], -0.5, 0.5);
        let target = random_tensor(&mut rng, &[2, 2, 2], -1.0, 1.0);

        let err = gradcheck(&[x, w, b], |tape, vars| {
            let lin = tape.channel_linear(vars[0], vars[1], vars[2]).unwrap();
            let act = tape.activation(lin, Activation::Elu);
            tape.mse(act, &target).unwrap()
        });
        assert!(err < FD_TOL, "max relative error {err}");
    }

    #[test]
    fn gradcheck_every_activation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for kind in [
            Activation::Relu,
            Activation::Elu,
            Activation::Selu,
            Activation::LeakyRelu,
        ] {
            let x = random_tensor(&mut rng, &[10], -1.5, 1.5);
            let target = random_tensor(&mut rng, &[10], -1.0, 1.0);
            let err = gradcheck(&[x], |tape, vars| {
                let act = tape.activation(vars[0], kind);
                tape.mse(act, &target).unwrap()
            });
            assert!(err < FD_TOL, "{kind:?}: max relative error {err}");
        }
    }

    #[test]
    fn gradcheck_bilinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let field = random_tensor(&mut rng, &[4, 4], 0.0, 1.0);
        let disp = random_tensor(&mut rng, &[4, 4, 2], -0.4, 0.4);
        let target = random_tensor(&mut rng, &[4, 4], 0.0, 1.0);

        let err = gradcheck(&[field, disp], |tape, vars| {
            let out = tape.bilinear_sample(vars[0], vars[1]).unwrap();
            tape.mse(out, &target).unwrap()
        });
        assert!(err < FD_TOL, "max relative error {err}");
    }

    #[test]
    fn gradcheck_gather_slices_broadcasts() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(&mut rng, &[3, 3, 2], -1.0, 1.0);
        let table = random_tensor(&mut rng, &[3, 3, 4, 2], -1.0, 1.0);
        let rows = random_tensor(&mut rng, &[5, 2], -1.0, 1.0);
        let vec2 = random_tensor(&mut rng, &[2], -1.0, 1.0);
        let fld = random_tensor(&mut rng, &[3, 3], 0.0, 1.0);
        let target = random_tensor(&mut rng, &[3, 3, 2], -1.0, 1.0);

        let err = gradcheck(&[x, table, rows, vec2, fld], |tape, vars| {
            let g = tape.neighborhood_gather(vars[0], 3).unwrap();
            let w = tape.leaf(Tensor::from_fn(&[2, 18], |i| ((i % 7) as f64 - 3.0) / 7.0));
            let b = tape.leaf(Tensor::zeros(&[2]));
            let lin = tape.channel_linear(g, w, b).unwrap();
            let sl = tape.hour_slice(vars[1], 2).unwrap();
            let sum1 = tape.add(lin, sl).unwrap();
            let row = tape.last_axis_row(vars[2], 3).unwrap();
            let sum2 = tape.add_vector(sum1, row).unwrap();
            let sum3 = tape.add_vector(sum2, vars[3]).unwrap();
            let masked = tape.mul_field(sum3, vars[4]).unwrap();
            tape.mse(masked, &target).unwrap()
        });
        assert!(err < FD_TOL, "max relative error {err}");
    }

    #[test]
    fn gradcheck_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pred = random_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let target = random_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let mask = Tensor::from_fn(&[3, 4], |i| (i % 3 == 0) as u8 as f64);

        let err = gradcheck(&[pred.clone()], |tape, vars| {
            tape.masked_mse(vars[0], &target, &mask).unwrap()
        });
        assert!(err < FD_TOL, "masked_mse: {err}");

        let prob = random_tensor(&mut rng, &[3, 4], 0.2, 0.8);
        let binary = Tensor::from_fn(&[3, 4], |i| (i % 2) as f64);
        let err = gradcheck(&[prob], |tape, vars| {
            tape.binary_cross_entropy(vars[0], &binary).unwrap()
        });
        assert!(err < FD_TOL, "bce: {err}");
    }

    #[test]
    fn shared_parameter_gradients_accumulate() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x1 = random_tensor(&mut rng, &[2, 2, 3], -1.0, 1.0);
        let x2 = random_tensor(&mut rng, &[2, 2, 3], -1.0, 1.0);
        let w = random_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        let b = random_tensor(&mut rng, &[2], -0.5, 0.5);

        // One tape using w twice.
        let mut tape = Tape::new();
        let (x1v, x2v) = (tape.leaf(x1.clone()), tape.leaf(x2.clone()));
        let (wv, bv) = (tape.leaf(w.clone()), tape.leaf(b.clone()));
        let o1 = tape.channel_linear(x1v, wv, bv).unwrap();
        let o2 = tape.channel_linear(x2v, wv, bv).unwrap();
        let s1 = tape.sum(o1);
        let s2 = tape.sum(o2);
        let loss = tape.add(s1, s2).unwrap();
        let shared = tape.reverse_gradients(loss).unwrap();

        // Two tapes, each a single use.
        let single = |x: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let (wv, bv) = (tape.leaf(w.clone()), tape.leaf(b.clone()));
            let o = tape.channel_linear(xv, wv, bv).unwrap();
            let loss = tape.sum(o);
            let g = tape.reverse_gradients(loss).unwrap();
            g.get(wv).unwrap().clone()
        };
        let (g1, g2) = (single(&x1), single(&x2));

        for ((s, a), b) in shared
            .get(wv)
            .unwrap()
            .data()
            .iter()
            .zip(g1.data())
            .zip(g2.data())
        {
            assert!((s - (a + b)).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_handles_saturated_predictions() {
        // p = 1 - m exactly: every element clamps, the value stays finite.
        let m = Tensor::from_fn(&[10], |i| (i % 2) as f64);
        let p = Tensor::from_fn(&[10], |i| 1.0 - (i % 2) as f64);
        let mut tape = Tape::new();
        let pv = tape.leaf(p);
        let loss = tape.binary_cross_entropy(pv, &m).unwrap();
        let expected = -libm::log(BCE_EPS);
        assert!((tape.value(loss).item() - expected).abs() < 1e-9);
        // Gradient is defined (zero at the clamp).
        let grads = tape.reverse_gradients(loss).unwrap();
        assert!(grads.get(pv).unwrap().data().iter().all(|g| *g == 0.0));
    }
}
