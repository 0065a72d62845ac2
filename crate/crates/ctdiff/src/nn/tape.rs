//! Define-by-run reverse-mode differentiation over a closed set of
//! primitives: 3x3 same-padding convolution, SiLU, 2x2 average pooling,
//! nearest-neighbor upsampling, elementwise add, channel concatenation,
//! per-channel bias broadcast, dense vector layers, and two scalar losses.
//! Values are f32; scalar losses accumulate in f64.
//!
//! A [`Tape`] borrows a flat parameter vector, records forward values
//! eagerly as ops are issued, and [`Tape::backward`] returns the loss and
//! the gradient laid out exactly like the parameter vector.

use crate::error::{Error, Result};

/// Logical tensor extent: `channels` planes of `height` x `width`.
/// Vectors are `(n, 1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn vector(n: usize) -> Self {
        Self { c: n, h: 1, w: 1 }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// External data; never receives a gradient.
    Input,
    /// Slice of the flat parameter vector starting at `offset`.
    Param { offset: usize },
    /// 3x3 convolution, zero padding 1, stride 1. Weight node shape is
    /// `(c_out, c_in, 9)`, bias `(c_out, 1, 1)`.
    Conv3x3 {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Silu { input: NodeId },
    AvgPool2 { input: NodeId },
    UpsampleNearest2 { input: NodeId },
    Add { a: NodeId, b: NodeId },
    ConcatChannels { a: NodeId, b: NodeId },
    /// Broadcast-add a `(c, 1, 1)` vector over each channel plane.
    AddChannelBias { input: NodeId, bias: NodeId },
    /// Dense layer on vectors: weight `(m, n, 1)`, bias `(m, 1, 1)`.
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    /// Mean squared difference, a scalar.
    Mse { pred: NodeId, target: NodeId },
    /// `0.5 * sum(x^2)`, a scalar with gradient exactly `x`.
    HalfSumSquares { input: NodeId },
}

struct Node {
    op: Op,
    shape: Shape,
}

pub struct Tape<'p> {
    params: &'p [f32],
    nodes: Vec<Node>,
    values: Vec<Vec<f32>>,
    scalars: Vec<(usize, f64)>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [f32]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            values: Vec::new(),
            scalars: Vec::new(),
        }
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[f32] {
        &self.values[id.0]
    }

    fn push(&mut self, op: Op, shape: Shape, value: Vec<f32>) -> NodeId {
        debug_assert_eq!(shape.len(), value.len());
        self.nodes.push(Node { op, shape });
        self.values.push(value);
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, shape: Shape, data: Vec<f32>) -> Result<NodeId> {
        if data.len() != shape.len() {
            return Err(Error::shape_mismatch(
                format!("{} values", shape.len()),
                format!("{}", data.len()),
            ));
        }
        Ok(self.push(Op::Input, shape, data))
    }

    /// Registers the parameter slice `[offset, offset + shape.len())` as a
    /// leaf tensor.
    pub fn param(&mut self, offset: usize, shape: Shape) -> Result<NodeId> {
        let end = offset + shape.len();
        if end > self.params.len() {
            return Err(Error::invalid(format!(
                "parameter slice {offset}..{end} exceeds vector of {}",
                self.params.len()
            )));
        }
        let value = self.params[offset..end].to_vec();
        Ok(self.push(Op::Param { offset }, shape, value))
    }

    pub fn conv3x3(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        let bs = self.shape(bias);
        if ws.h != xs.c || ws.w != 9 || bs != Shape::vector(ws.c) {
            return Err(Error::shape_mismatch(
                format!("conv weight ({}, {}, 9) with bias ({})", ws.c, xs.c, ws.c),
                format!("weight ({}, {}, {}), bias ({})", ws.c, ws.h, ws.w, bs.len()),
            ));
        }
        let out_shape = Shape::new(ws.c, xs.h, xs.w);
        let mut out = vec![0.0f32; out_shape.len()];
        conv3x3_forward(
            &self.values[input.0],
            xs,
            &self.values[weight.0],
            &self.values[bias.0],
            ws.c,
            &mut out,
        );
        Ok(self.push(Op::Conv3x3 { input, weight, bias }, out_shape, out))
    }

    pub fn silu(&mut self, input: NodeId) -> NodeId {
        let shape = self.shape(input);
        let out: Vec<f32> = self.values[input.0]
            .iter()
            .map(|&x| x * sigmoid(x))
            .collect();
        self.push(Op::Silu { input }, shape, out)
    }

    pub fn avg_pool2(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.shape(input);
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(Error::invalid(format!(
                "avg_pool2 needs even extent, got {}x{}",
                s.h, s.w
            )));
        }
        let out_shape = Shape::new(s.c, s.h / 2, s.w / 2);
        let src = &self.values[input.0];
        let mut out = vec![0.0f32; out_shape.len()];
        for c in 0..s.c {
            let ip = &src[c * s.plane()..];
            let op_base = c * out_shape.plane();
            for y in 0..out_shape.h {
                for x in 0..out_shape.w {
                    let i0 = 2 * y * s.w + 2 * x;
                    out[op_base + y * out_shape.w + x] =
                        0.25 * (ip[i0] + ip[i0 + 1] + ip[i0 + s.w] + ip[i0 + s.w + 1]);
                }
            }
        }
        Ok(self.push(Op::AvgPool2 { input }, out_shape, out))
    }

    pub fn upsample_nearest2(&mut self, input: NodeId) -> NodeId {
        let s = self.shape(input);
        let out_shape = Shape::new(s.c, s.h * 2, s.w * 2);
        let src = &self.values[input.0];
        let mut out = vec![0.0f32; out_shape.len()];
        for c in 0..s.c {
            let ip = &src[c * s.plane()..(c + 1) * s.plane()];
            let op = &mut out[c * out_shape.plane()..(c + 1) * out_shape.plane()];
            for y in 0..s.h {
                for x in 0..s.w {
                    let v = ip[y * s.w + x];
                    let o = 2 * y * out_shape.w + 2 * x;
                    op[o] = v;
                    op[o + 1] = v;
                    op[o + out_shape.w] = v;
                    op[o + out_shape.w + 1] = v;
                }
            }
        }
        self.push(Op::UpsampleNearest2 { input }, out_shape, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        if sa != self.shape(b) {
            return Err(Error::shape_mismatch(
                format!("{sa:?}"),
                format!("{:?}", self.shape(b)),
            ));
        }
        let out: Vec<f32> = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(Op::Add { a, b }, sa, out))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.h != sb.h || sa.w != sb.w {
            return Err(Error::shape_mismatch(
                format!("{}x{}", sa.h, sa.w),
                format!("{}x{}", sb.h, sb.w),
            ));
        }
        let out_shape = Shape::new(sa.c + sb.c, sa.h, sa.w);
        let mut out = Vec::with_capacity(out_shape.len());
        out.extend_from_slice(&self.values[a.0]);
        out.extend_from_slice(&self.values[b.0]);
        Ok(self.push(Op::ConcatChannels { a, b }, out_shape, out))
    }

    pub fn add_channel_bias(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let s = self.shape(input);
        if self.shape(bias) != Shape::vector(s.c) {
            return Err(Error::shape_mismatch(
                format!("bias of {} channels", s.c),
                format!("{:?}", self.shape(bias)),
            ));
        }
        let src = &self.values[input.0];
        let bv = &self.values[bias.0];
        let mut out = vec![0.0f32; s.len()];
        for c in 0..s.c {
            let b = bv[c];
            let ip = &src[c * s.plane()..(c + 1) * s.plane()];
            let op = &mut out[c * s.plane()..(c + 1) * s.plane()];
            for (o, &i) in op.iter_mut().zip(ip) {
                *o = i + b;
            }
        }
        Ok(self.push(Op::AddChannelBias { input, bias }, s, out))
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        let bs = self.shape(bias);
        if xs.h != 1 || xs.w != 1 || ws.w != 1 || ws.h != xs.c || bs != Shape::vector(ws.c) {
            return Err(Error::shape_mismatch(
                format!("linear ({}, {}) on vector ({})", ws.c, xs.c, xs.c),
                format!("weight {ws:?}, input {xs:?}, bias {bs:?}"),
            ));
        }
        let (m, n) = (ws.c, xs.c);
        let x = &self.values[input.0];
        let wv = &self.values[weight.0];
        let bv = &self.values[bias.0];
        let mut out = vec![0.0f32; m];
        for i in 0..m {
            let row = &wv[i * n..(i + 1) * n];
            let mut acc = bv[i] as f64;
            for (wi, xi) in row.iter().zip(x) {
                acc += *wi as f64 * *xi as f64;
            }
            out[i] = acc as f32;
        }
        Ok(self.push(Op::Linear { input, weight, bias }, Shape::vector(m), out))
    }

    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let sp = self.shape(pred);
        if sp != self.shape(target) {
            return Err(Error::shape_mismatch(
                format!("{sp:?}"),
                format!("{:?}", self.shape(target)),
            ));
        }
        let mut acc = 0.0f64;
        for (&p, &t) in self.values[pred.0].iter().zip(&self.values[target.0]) {
            let d = p as f64 - t as f64;
            acc += d * d;
        }
        let mean = acc / sp.len() as f64;
        let id = self.push(Op::Mse { pred, target }, Shape::vector(1), vec![mean as f32]);
        self.scalars.push((id.0, mean));
        Ok(id)
    }

    pub fn half_sum_squares(&mut self, input: NodeId) -> NodeId {
        let mut acc = 0.0f64;
        for &x in &self.values[input.0] {
            acc += 0.5 * x as f64 * x as f64;
        }
        let id = self.push(
            Op::HalfSumSquares { input },
            Shape::vector(1),
            vec![acc as f32],
        );
        self.scalars.push((id.0, acc));
        id
    }

    /// Reverse pass from a scalar node. Returns its f64 value and the
    /// gradient with the same layout as the parameter vector.
    pub fn backward(&self, loss: NodeId) -> Result<(f64, Vec<f32>)> {
        let loss_value = self
            .scalars
            .iter()
            .rev()
            .find(|(id, _)| *id == loss.0)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::invalid("backward target must be a scalar loss node"))?;

        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut param_grads = vec![0.0f32; self.params.len()];

        for idx in (0..self.nodes.len()).rev() {
            let grad = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Param { offset } => {
                    for (pg, g) in param_grads[*offset..*offset + grad.len()]
                        .iter_mut()
                        .zip(&grad)
                    {
                        *pg += g;
                    }
                }
                Op::Conv3x3 {
                    input,
                    weight,
                    bias,
                } => {
                    let xs = self.shape(*input);
                    let co = self.shape(*weight).c;
                    let din = self.grad_slot(&mut grads, *input);
                    conv3x3_backward_input(&grad, co, &self.values[weight.0], xs, din);
                    let dw = self.grad_slot(&mut grads, *weight);
                    conv3x3_backward_weight(&grad, co, &self.values[input.0], xs, dw);
                    let db = self.grad_slot(&mut grads, *bias);
                    let plane = xs.plane();
                    for c in 0..co {
                        let mut acc = 0.0f64;
                        for &g in &grad[c * plane..(c + 1) * plane] {
                            acc += g as f64;
                        }
                        db[c] += acc as f32;
                    }
                }
                Op::Silu { input } => {
                    let x = &self.values[input.0];
                    let din = self.grad_slot(&mut grads, *input);
                    for ((d, &g), &xv) in din.iter_mut().zip(&grad).zip(x) {
                        let s = sigmoid(xv);
                        *d += g * s * (1.0 + xv * (1.0 - s));
                    }
                }
                Op::AvgPool2 { input } => {
                    let s = self.shape(*input);
                    let (oh, ow) = (s.h / 2, s.w / 2);
                    let din = self.grad_slot(&mut grads, *input);
                    for c in 0..s.c {
                        let gp = &grad[c * oh * ow..(c + 1) * oh * ow];
                        let dp = &mut din[c * s.plane()..(c + 1) * s.plane()];
                        for y in 0..oh {
                            for x in 0..ow {
                                let g = 0.25 * gp[y * ow + x];
                                let i0 = 2 * y * s.w + 2 * x;
                                dp[i0] += g;
                                dp[i0 + 1] += g;
                                dp[i0 + s.w] += g;
                                dp[i0 + s.w + 1] += g;
                            }
                        }
                    }
                }
                Op::UpsampleNearest2 { input } => {
                    let s = self.shape(*input);
                    let (oh, ow) = (s.h * 2, s.w * 2);
                    let din = self.grad_slot(&mut grads, *input);
                    for c in 0..s.c {
                        let gp = &grad[c * oh * ow..(c + 1) * oh * ow];
                        let dp = &mut din[c * s.plane()..(c + 1) * s.plane()];
                        for y in 0..s.h {
                            for x in 0..s.w {
                                let o = 2 * y * ow + 2 * x;
                                dp[y * s.w + x] +=
                                    gp[o] + gp[o + 1] + gp[o + ow] + gp[o + ow + 1];
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    for id in [*a, *b] {
                        let d = self.grad_slot(&mut grads, id);
                        for (dv, &g) in d.iter_mut().zip(&grad) {
                            *dv += g;
                        }
                    }
                }
                Op::ConcatChannels { a, b } => {
                    let na = self.shape(*a).len();
                    let da = self.grad_slot(&mut grads, *a);
                    for (dv, &g) in da.iter_mut().zip(&grad[..na]) {
                        *dv += g;
                    }
                    let db = self.grad_slot(&mut grads, *b);
                    for (dv, &g) in db.iter_mut().zip(&grad[na..]) {
                        *dv += g;
                    }
                }
                Op::AddChannelBias { input, bias } => {
                    let s = self.shape(*input);
                    let din = self.grad_slot(&mut grads, *input);
                    for (dv, &g) in din.iter_mut().zip(&grad) {
                        *dv += g;
                    }
                    let db = self.grad_slot(&mut grads, *bias);
                    for c in 0..s.c {
                        let mut acc = 0.0f64;
                        for &g in &grad[c * s.plane()..(c + 1) * s.plane()] {
                            acc += g as f64;
                        }
                        db[c] += acc as f32;
                    }
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                } => {
                    let n = self.shape(*input).c;
                    let m = self.shape(*weight).c;
                    let x: Vec<f32> = self.values[input.0].clone();
                    let wv: Vec<f32> = self.values[weight.0].clone();
                    let din = self.grad_slot(&mut grads, *input);
                    for i in 0..m {
                        let g = grad[i];
                        for j in 0..n {
                            din[j] += g * wv[i * n + j];
                        }
                    }
                    let dw = self.grad_slot(&mut grads, *weight);
                    for i in 0..m {
                        let g = grad[i];
                        for j in 0..n {
                            dw[i * n + j] += g * x[j];
                        }
                    }
                    let db = self.grad_slot(&mut grads, *bias);
                    for (dv, &g) in db.iter_mut().zip(&grad) {
                        *dv += g;
                    }
                }
                Op::Mse { pred, target } => {
                    let g = grad[0];
                    let n = self.shape(*pred).len() as f32;
                    let scale = 2.0 * g / n;
                    let pv: Vec<f32> = self.values[pred.0].clone();
                    let tv: Vec<f32> = self.values[target.0].clone();
                    let dp = self.grad_slot(&mut grads, *pred);
                    for ((d, &p), &t) in dp.iter_mut().zip(&pv).zip(&tv) {
                        *d += scale * (p - t);
                    }
                    let dt = self.grad_slot(&mut grads, *target);
                    for ((d, &p), &t) in dt.iter_mut().zip(&pv).zip(&tv) {
                        *d -= scale * (p - t);
                    }
                }
                Op::HalfSumSquares { input } => {
                    let g = grad[0];
                    let xv: Vec<f32> = self.values[input.0].clone();
                    let din = self.grad_slot(&mut grads, *input);
                    for (d, &x) in din.iter_mut().zip(&xv) {
                        *d += g * x;
                    }
                }
            }
        }
        Ok((loss_value, param_grads))
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Vec<f32>>], id: NodeId) -> &'a mut Vec<f32> {
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0f32; self.nodes[id.0].shape.len()]);
        }
        slot.as_mut().unwrap()
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn conv3x3_forward(
    input: &[f32],
    xs: Shape,
    weight: &[f32],
    bias: &[f32],
    c_out: usize,
    out: &mut [f32],
) {
    let (h, w) = (xs.h, xs.w);
    let plane = h * w;
    for co in 0..c_out {
        let op = &mut out[co * plane..(co + 1) * plane];
        op.fill(bias[co]);
        for ci in 0..xs.c {
            let ip = &input[ci * plane..(ci + 1) * plane];
            let w9 = &weight[(co * xs.c + ci) * 9..(co * xs.c + ci + 1) * 9];
            for (tap, &s) in w9.iter().enumerate() {
                if s == 0.0 {
                    continue;
                }
                let ky = tap as isize / 3 - 1;
                let kx = tap as isize % 3 - 1;
                accumulate_shifted(op, ip, h, w, ky, kx, s);
            }
        }
    }
}

/// `dst(y, x) += s * src(y + ky, x + kx)` over valid positions.
fn accumulate_shifted(
    dst: &mut [f32],
    src: &[f32],
    h: usize,
    w: usize,
    ky: isize,
    kx: isize,
    s: f32,
) {
    let y0 = (-ky).max(0) as usize;
    let y1 = (h as isize - ky).min(h as isize) as usize;
    let x0 = (-kx).max(0) as usize;
    let x1 = (w as isize - kx).min(w as isize) as usize;
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + ky) as usize;
        let d = &mut dst[y * w + x0..y * w + x1];
        let r =
            &src[sy * w + (x0 as isize + kx) as usize..sy * w + (x1 as isize + kx) as usize];
        for (dv, &rv) in d.iter_mut().zip(r) {
            *dv += s * rv;
        }
    }
}

fn conv3x3_backward_input(grad_out: &[f32], c_out: usize, weight: &[f32], xs: Shape, din: &mut [f32]) {
    let plane = xs.plane();
    for ci in 0..xs.c {
        let dp = &mut din[ci * plane..(ci + 1) * plane];
        for co in 0..c_out {
            let gp = &grad_out[co * plane..(co + 1) * plane];
            let w9 = &weight[(co * xs.c + ci) * 9..(co * xs.c + ci + 1) * 9];
            for (tap, &s) in w9.iter().enumerate() {
                if s == 0.0 {
                    continue;
                }
                let ky = tap as isize / 3 - 1;
                let kx = tap as isize % 3 - 1;
                // d_in(y + ky, x + kx) += s * g(y, x): shift by the
                // negated offsets.
                accumulate_shifted(dp, gp, xs.h, xs.w, -ky, -kx, s);
            }
        }
    }
}

fn conv3x3_backward_weight(grad_out: &[f32], c_out: usize, input: &[f32], xs: Shape, dw: &mut [f32]) {
    let plane = xs.plane();
    let (h, w) = (xs.h, xs.w);
    for co in 0..c_out {
        let gp = &grad_out[co * plane..(co + 1) * plane];
        for ci in 0..xs.c {
            let ip = &input[ci * plane..(ci + 1) * plane];
            let base = (co * xs.c + ci) * 9;
            for tap in 0..9 {
                let ky = tap as isize / 3 - 1;
                let kx = tap as isize % 3 - 1;
                let y0 = (-ky).max(0) as usize;
                let y1 = (h as isize - ky).min(h as isize) as usize;
                let x0 = (-kx).max(0) as usize;
                let x1 = (w as isize - kx).min(w as isize) as usize;
                if x0 >= x1 {
                    continue;
                }
                let mut acc = 0.0f64;
                for y in y0..y1 {
                    let sy = (y as isize + ky) as usize;
                    let g = &gp[y * w + x0..y * w + x1];
                    let r = &ip[sy * w + (x0 as isize + kx) as usize
                        ..sy * w + (x1 as isize + kx) as usize];
                    let mut row = 0.0f32;
                    for (&gv, &rv) in g.iter().zip(r) {
                        row += gv * rv;
                    }
                    acc += row as f64;
                }
                dw[base + tap] += acc as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_sum_squares_gradient_is_the_input() {
        let params: Vec<f32> = vec![0.5, -1.25, 2.0, 0.0, 3.5];
        let mut tape = Tape::new(&params);
        let p = tape.param(0, Shape::vector(5)).unwrap();
        let loss = tape.half_sum_squares(p);
        let (val, grads) = tape.backward(loss).unwrap();
        let expect: f64 = params.iter().map(|&x| 0.5 * x as f64 * x as f64).sum();
        assert!((val - expect).abs() < 1e-12);
        assert_eq!(grads, params);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let params = vec![1.0f32; 4];
        let mut tape = Tape::new(&params);
        let x = tape.input(Shape::vector(3), vec![0.1, 0.2, 0.3]).unwrap();
        let loss = tape.half_sum_squares(x);
        let (_, grads) = tape.backward(loss).unwrap();
        assert!(grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mse_gradient_matches_analytic() {
        let params = vec![0.4f32, -0.2, 0.9];
        let mut tape = Tape::new(&params);
        let p = tape.param(0, Shape::vector(3)).unwrap();
        let t = tape.input(Shape::vector(3), vec![0.0, 0.0, 0.0]).unwrap();
        let loss = tape.mse(p, t).unwrap();
        let (val, grads) = tape.backward(loss).unwrap();
        let expect_val: f64 = params.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / 3.0;
        assert!((val - expect_val).abs() < 1e-12);
        for (g, &x) in grads.iter().zip(&params) {
            assert!((g - 2.0 * x / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_identity_kernel_passes_through() {
        // Kernel with a single center tap of 1 reproduces the input.
        let mut params = vec![0.0f32; 9 + 1];
        params[4] = 1.0;
        let mut tape = Tape::new(&params);
        let x = tape
            .input(Shape::new(1, 3, 4), (0..12).map(|i| i as f32).collect())
            .unwrap();
        let w = tape.param(0, Shape::new(1, 1, 9)).unwrap();
        let b = tape.param(9, Shape::vector(1)).unwrap();
        let y = tape.conv3x3(x, w, b).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv_against_direct_summation() {
        // 2-in 2-out conv on a 4x5 grid versus a naive quadruple loop.
        let mut state = 7u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 33) as f64 / (1u64 << 31) as f64 - 0.5) as f32
        };
        let (ci, co, h, w) = (2usize, 2usize, 4usize, 5usize);
        let mut params = Vec::new();
        for _ in 0..co * ci * 9 + co {
            params.push(next());
        }
        let input: Vec<f32> = (0..ci * h * w).map(|_| next()).collect();
        let mut tape = Tape::new(&params);
        let x = tape.input(Shape::new(ci, h, w), input.clone()).unwrap();
        let wn = tape.param(0, Shape::new(co, ci, 9)).unwrap();
        let bn = tape.param(co * ci * 9, Shape::vector(co)).unwrap();
        let y = tape.conv3x3(x, wn, bn).unwrap();

        for oc in 0..co {
            for yy in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = params[co * ci * 9 + oc];
                    for ic in 0..ci {
                        for ky in -1..=1isize {
                            for kx in -1..=1isize {
                                let (sy, sx) = (yy + ky, xx + kx);
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                    let wv = params[(oc * ci + ic) * 9
                                        + ((ky + 1) * 3 + kx + 1) as usize];
                                    acc += wv * input[ic * h * w + sy as usize * w + sx as usize];
                                }
                            }
                        }
                    }
                    let got = tape.value(y)[oc * h * w + yy as usize * w + xx as usize];
                    assert!((got - acc).abs() < 1e-5, "mismatch at {oc},{yy},{xx}");
                }
            }
        }
    }

    #[test]
    fn pool_then_upsample_shapes_and_grads_flow() {
        let params = vec![0.0f32];
        let mut tape = Tape::new(&params);
        let x = tape
            .input(Shape::new(1, 4, 4), (0..16).map(|i| i as f32 * 0.1).collect())
            .unwrap();
        let p = tape.avg_pool2(x).unwrap();
        assert_eq!(tape.shape(p), Shape::new(1, 2, 2));
        let u = tape.upsample_nearest2(p);
        assert_eq!(tape.shape(u), Shape::new(1, 4, 4));
        let odd = tape.input(Shape::new(1, 3, 3), vec![0.0; 9]).unwrap();
        assert!(tape.avg_pool2(odd).is_err());
    }

    /// Central finite differences over every parameter of a small mixed
    /// graph; the backbone correctness test for the tape.
    #[test]
    fn finite_difference_agreement_on_mixed_graph() {
        let mut state = 99u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 33) as f64 / (1u64 << 31) as f64 - 0.5) as f32 * 0.8
        };
        // conv(1->2) + channel bias + silu + pool + upsample + concat
        // + conv(3->1) + mse: touches every op.
        let n_params = 2 * 9 + 2 + 2 + 1 * 3 * 9 + 1;
        let params: Vec<f32> = (0..n_params).map(|_| next()).collect();
        let input: Vec<f32> = (0..16).map(|_| next()).collect();
        let target: Vec<f32> = (0..16).map(|_| next()).collect();

        let eval = |p: &[f32]| -> (f64, Vec<f32>) {
            let mut tape = Tape::new(p);
            let x = tape.input(Shape::new(1, 4, 4), input.clone()).unwrap();
            let w1 = tape.param(0, Shape::new(2, 1, 9)).unwrap();
            let b1 = tape.param(18, Shape::vector(2)).unwrap();
            let cb = tape.param(20, Shape::vector(2)).unwrap();
            let c1 = tape.conv3x3(x, w1, b1).unwrap();
            let c1 = tape.add_channel_bias(c1, cb).unwrap();
            let a1 = tape.silu(c1);
            let p1 = tape.avg_pool2(a1).unwrap();
            let u1 = tape.upsample_nearest2(p1);
            let cat = tape.concat_channels(u1, x).unwrap();
            let w2 = tape.param(22, Shape::new(1, 3, 9)).unwrap();
            let b2 = tape.param(22 + 27, Shape::vector(1)).unwrap();
            let y = tape.conv3x3(cat, w2, b2).unwrap();
            let tnode = tape.input(Shape::new(1, 4, 4), target.clone()).unwrap();
            let loss = tape.mse(y, tnode).unwrap();
            tape.backward(loss).unwrap()
        };

        let (_, grads) = eval(&params);
        // Wider step than the acceptance-level check: this sweep visits
        // every coordinate, including ones with ~1e-4 gradients where f32
        // forward rounding dominates a 1e-3 step.
        let h = 1e-2f32;
        for i in 0..n_params {
            let mut plus = params.clone();
            plus[i] += h;
            let mut minus = params.clone();
            minus[i] -= h;
            let (fp, _) = eval(&plus);
            let (fm, _) = eval(&minus);
            let fd = (fp - fm) / ((plus[i] - minus[i]) as f64);
            let g = grads[i] as f64;
            let denom = fd.abs().max(g.abs()).max(1e-4);
            assert!(
                (fd - g).abs() / denom < 1e-2,
                "param {i}: fd {fd} vs grad {g}"
            );
        }
    }
}
