//! Eagerly evaluated computation record with reverse-mode gradients.

use rand::Rng;

use super::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Padding behavior of [`Tape::conv1d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Odd kernel centered on each frame; output length equals input length.
    Same,
    /// `k-1` zeros on the left only: output at `t` sees input up to `t`.
    Causal,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Transpose(Var),
    MatMul(Var, Var),
    Col(Var, usize),
    ConcatTime(Vec<Var>),
    MeanPoolTime(Var),
    Linear { x: Var, w: Var, b: Var },
    Conv1d { x: Var, w: Var, b: Var, left_pad: usize },
    Glu(Var),
    MaskedSoftmax { e: Var, allowed: Vec<bool> },
    SampleOneHot { p: Var },
    L1Loss(Var, Var),
}

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
}

/// A single forward pass: append-only, so node order is topological.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let grad = vec![0.0; value.numel()];
        self.nodes.push(Node { value, grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    fn same_shape(&self, context: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(context, format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.push(out, Op::Scale(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|x| x.exp()).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.push(out, Op::Exp(a))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::shape("transpose", "rank-2", format!("{:?}", t.shape())));
        }
        let (r, c) = (t.rows(), t.cols());
        let mut out = Tensor::zeros(vec![c, r]);
        for i in 0..r {
            for j in 0..c {
                out.set2(j, i, t.at2(i, j));
            }
        }
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?}", ta.shape()),
                format!("{:?}", tb.shape()),
            ));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += ta.at2(i, l) * tb.at2(l, j);
                }
                out.set2(i, j, acc);
            }
        }
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Column `j` of a rank-2 tensor, as an `R x 1` tensor.
    pub fn col(&mut self, a: Var, j: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::shape("col", "rank-2", format!("{:?}", t.shape())));
        }
        if j >= t.cols() {
            return Err(Error::IndexOutOfRange {
                index: j,
                len: t.cols(),
            });
        }
        let data = (0..t.rows()).map(|i| t.at2(i, j)).collect();
        let out = Tensor::new(vec![t.rows(), 1], data)?;
        Ok(self.push(out, Op::Col(a, j)))
    }

    /// Concatenate rank-2 tensors along time (columns).
    pub fn concat_time(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptySequence("concat list"));
        }
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.rows() != rows {
                return Err(Error::shape(
                    "concat_time",
                    format!("[{rows}, _]"),
                    format!("{:?}", t.shape()),
                ));
            }
            total += t.cols();
        }
        let mut out = Tensor::zeros(vec![rows, total]);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            for i in 0..rows {
                for j in 0..t.cols() {
                    out.set2(i, off + j, t.at2(i, j));
                }
            }
            off += t.cols();
        }
        let parts = parts.to_vec();
        Ok(self.push(out, Op::ConcatTime(parts)))
    }

    /// Mean over time of a `D x T` tensor, as `D x 1`.
    pub fn mean_pool_time(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::shape(
                "mean_pool_time",
                "rank-2",
                format!("{:?}", t.shape()),
            ));
        }
        let (d, n) = (t.rows(), t.cols());
        let mut out = Tensor::zeros(vec![d, 1]);
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..n {
                acc += t.at2(i, j);
            }
            out.set2(i, 0, acc / n as f64);
        }
        Ok(self.push(out, Op::MeanPoolTime(a)))
    }

    /// Affine map per time step: `w·x + b` with `x: in x T`, `w: out x in`,
    /// `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let ok = tx.rank() == 2
            && tw.rank() == 2
            && tb.rank() == 1
            && tw.cols() == tx.rows()
            && tb.shape()[0] == tw.rows();
        if !ok {
            return Err(Error::shape(
                "linear",
                format!("w {:?}, b {:?}", tw.shape(), tb.shape()),
                format!("x {:?}", tx.shape()),
            ));
        }
        let (out_dim, in_dim, n) = (tw.rows(), tw.cols(), tx.cols());
        let mut out = Tensor::zeros(vec![out_dim, n]);
        for o in 0..out_dim {
            for t in 0..n {
                let mut acc = tb.data()[o];
                for i in 0..in_dim {
                    acc += tw.at2(o, i) * tx.at2(i, t);
                }
                out.set2(o, t, acc);
            }
        }
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    /// 1-D convolution over time: `x: C_in x T`, `w: C_out x C_in x k`,
    /// `b: C_out`, zero padding per `mode`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, mode: PadMode) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let ok = tx.rank() == 2
            && tw.rank() == 3
            && tb.rank() == 1
            && tw.shape()[1] == tx.rows()
            && tb.shape()[0] == tw.shape()[0];
        if !ok {
            return Err(Error::shape(
                "conv1d",
                format!("w {:?}, b {:?}", tw.shape(), tb.shape()),
                format!("x {:?}", tx.shape()),
            ));
        }
        let k = tw.shape()[2];
        let left_pad = match mode {
            PadMode::Same => {
                if k % 2 == 0 {
                    return Err(Error::InvalidArg(format!(
                        "same-padding convolution needs an odd kernel, got {k}"
                    )));
                }
                (k - 1) / 2
            }
            PadMode::Causal => k - 1,
        };
        let (c_out, c_in, n) = (tw.shape()[0], tx.rows(), tx.cols());
        let mut out = Tensor::zeros(vec![c_out, n]);
        for o in 0..c_out {
            for t in 0..n {
                let mut acc = tb.data()[o];
                for c in 0..c_in {
                    for tap in 0..k {
                        let u = t + tap;
                        if u < left_pad || u - left_pad >= n {
                            continue;
                        }
                        acc += tw.at3(o, c, tap) * tx.at2(c, u - left_pad);
                    }
                }
                out.set2(o, t, acc);
            }
        }
        Ok(self.push(out, Op::Conv1d { x, w, b, left_pad }))
    }

    /// Gated linear unit over channel halves: `x: 2C x T -> C x T`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || t.rows() % 2 != 0 {
            return Err(Error::shape(
                "glu",
                "even channel count",
                format!("{:?}", t.shape()),
            ));
        }
        let (c, n) = (t.rows() / 2, t.cols());
        let mut out = Tensor::zeros(vec![c, n]);
        for i in 0..c {
            for j in 0..n {
                out.set2(i, j, t.at2(i, j) * sigmoid(t.at2(c + i, j)));
            }
        }
        Ok(self.push(out, Op::Glu(x)))
    }

    /// Numerically stable softmax over the allowed entries; blocked entries
    /// are exactly zero.
    pub fn masked_softmax(&mut self, e: Var, allowed: &[bool]) -> Result<Var> {
        let t = self.value(e);
        if t.numel() != allowed.len() {
            return Err(Error::shape(
                "masked_softmax",
                format!("{} scores", t.numel()),
                format!("{} mask entries", allowed.len()),
            ));
        }
        let mut max = f64::NEG_INFINITY;
        for (v, &a) in t.data().iter().zip(allowed) {
            if a && *v > max {
                max = *v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::AllMasked);
        }
        let mut data = vec![0.0; t.numel()];
        let mut denom = 0.0;
        for (i, (&v, &a)) in t.data().iter().zip(allowed).enumerate() {
            if a {
                data[i] = (v - max).exp();
                denom += data[i];
            }
        }
        for v in &mut data {
            *v /= denom;
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let allowed = allowed.to_vec();
        Ok(self.push(out, Op::MaskedSoftmax { e, allowed }))
    }

    /// One-hot draw from a probability vector; the backward pass routes the
    /// gradient straight through to the probabilities.
    pub fn sample_one_hot<R: Rng>(&mut self, p: Var, rng: &mut R) -> Result<Var> {
        let t = self.value(p);
        let sum: f64 = t.data().iter().sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::NotNormalized { sum });
        }
        if t.data().iter().any(|&v| v < -1e-9) {
            return Err(Error::InvalidArg("negative probability".into()));
        }
        let u: f64 = rng.gen();
        let mut pick = 0;
        let mut cum = 0.0;
        let mut last_positive = 0;
        for (i, &v) in t.data().iter().enumerate() {
            if v > 0.0 {
                last_positive = i;
            }
            cum += v.max(0.0);
            pick = i;
            if u < cum {
                break;
            }
        }
        if u >= cum {
            pick = last_positive;
        }
        let mut data = vec![0.0; t.numel()];
        data[pick] = 1.0;
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::SampleOneHot { p }))
    }

    /// One-hot at the largest probability (ties to the first); gradient
    /// passes straight through, like [`Tape::sample_one_hot`].
    pub fn hard_one_hot(&mut self, p: Var) -> Result<Var> {
        let t = self.value(p);
        if t.numel() == 0 {
            return Err(Error::EmptySequence("probability vector"));
        }
        let mut pick = 0;
        let mut best = f64::NEG_INFINITY;
        for (i, &v) in t.data().iter().enumerate() {
            if v > best {
                best = v;
                pick = i;
            }
        }
        let mut data = vec![0.0; t.numel()];
        data[pick] = 1.0;
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::SampleOneHot { p }))
    }

    /// Mean absolute error over all elements, as a scalar node.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("l1_loss", pred, target)?;
        let n = self.value(pred).numel() as f64;
        let total: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(self.push(Tensor::scalar(total / n), Op::L1Loss(pred, target)))
    }

    /// Reverse pass from a scalar root: zeroes all gradients, seeds the
    /// root with 1, and accumulates into every ancestor.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::InvalidArg(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[root.0].grad[0] = 1.0;

        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let g = &node.grad;
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for (ga, &gv) in before[a.0].grad.iter_mut().zip(g) {
                        *ga += gv;
                    }
                    for (gb, &gv) in before[b.0].grad.iter_mut().zip(g) {
                        *gb += gv;
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    for idx in 0..g.len() {
                        let (av, bv) = (before[a.0].value.data()[idx], before[b.0].value.data()[idx]);
                        before[a.0].grad[idx] += g[idx] * bv;
                        before[b.0].grad[idx] += g[idx] * av;
                    }
                }
                Op::Scale(a, c) => {
                    for (ga, &gv) in before[a.0].grad.iter_mut().zip(g) {
                        *ga += gv * c;
                    }
                }
                Op::Exp(a) => {
                    for (idx, (ga, &gv)) in before[a.0].grad.iter_mut().zip(g).enumerate() {
                        *ga += gv * node.value.data()[idx];
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (node.value.rows(), node.value.cols());
                    for i2 in 0..r {
                        for j2 in 0..c {
                            before[a.0].grad[j2 * r + i2] += g[i2 * c + j2];
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, n) = (node.value.rows(), node.value.cols());
                    let k = before[a.0].value.cols();
                    for i2 in 0..m {
                        for j2 in 0..n {
                            let gv = g[i2 * n + j2];
                            if gv == 0.0 {
                                continue;
                            }
                            for l in 0..k {
                                before[a.0].grad[i2 * k + l] += gv * before[b.0].value.at2(l, j2);
                                before[b.0].grad[l * n + j2] += gv * before[a.0].value.at2(i2, l);
                            }
                        }
                    }
                }
                Op::Col(a, j) => {
                    let cols = before[a.0].value.cols();
                    for (i2, &gv) in g.iter().enumerate() {
                        before[a.0].grad[i2 * cols + j] += gv;
                    }
                }
                Op::ConcatTime(parts) => {
                    let rows = node.value.rows();
                    let total = node.value.cols();
                    let mut off = 0;
                    for &p in parts {
                        let w = before[p.0].value.cols();
                        for i2 in 0..rows {
                            for j2 in 0..w {
                                before[p.0].grad[i2 * w + j2] += g[i2 * total + off + j2];
                            }
                        }
                        off += w;
                    }
                }
                Op::MeanPoolTime(a) => {
                    let (d, n) = (before[a.0].value.rows(), before[a.0].value.cols());
                    for i2 in 0..d {
                        let gv = g[i2] / n as f64;
                        for j2 in 0..n {
                            before[a.0].grad[i2 * n + j2] += gv;
                        }
                    }
                }
                Op::Linear { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let (out_dim, n) = (node.value.rows(), node.value.cols());
                    let in_dim = before[x.0].value.rows();
                    for o in 0..out_dim {
                        for t in 0..n {
                            let gv = g[o * n + t];
                            if gv == 0.0 {
                                continue;
                            }
                            before[b.0].grad[o] += gv;
                            for i2 in 0..in_dim {
                                before[w.0].grad[o * in_dim + i2] +=
                                    gv * before[x.0].value.at2(i2, t);
                                before[x.0].grad[i2 * n + t] += gv * before[w.0].value.at2(o, i2);
                            }
                        }
                    }
                }
                Op::Conv1d { x, w, b, left_pad } => {
                    let (x, w, b, left_pad) = (*x, *w, *b, *left_pad);
                    let (c_out, n) = (node.value.rows(), node.value.cols());
                    let c_in = before[x.0].value.rows();
                    let k = before[w.0].value.shape()[2];
                    for o in 0..c_out {
                        for t in 0..n {
                            let gv = g[o * n + t];
                            if gv == 0.0 {
                                continue;
                            }
                            before[b.0].grad[o] += gv;
                            for c in 0..c_in {
                                for tap in 0..k {
                                    let u = t + tap;
                                    if u < left_pad || u - left_pad >= n {
                                        continue;
                                    }
                                    let src = u - left_pad;
                                    before[w.0].grad[(o * c_in + c) * k + tap] +=
                                        gv * before[x.0].value.at2(c, src);
                                    before[x.0].grad[c * n + src] +=
                                        gv * before[w.0].value.at3(o, c, tap);
                                }
                            }
                        }
                    }
                }
                Op::Glu(a) => {
                    let a = *a;
                    let (c, n) = (node.value.rows(), node.value.cols());
                    for i2 in 0..c {
                        for j2 in 0..n {
                            let gv = g[i2 * n + j2];
                            if gv == 0.0 {
                                continue;
                            }
                            let av = before[a.0].value.at2(i2, j2);
                            let s = sigmoid(before[a.0].value.at2(c + i2, j2));
                            before[a.0].grad[i2 * n + j2] += gv * s;
                            before[a.0].grad[(c + i2) * n + j2] += gv * av * s * (1.0 - s);
                        }
                    }
                }
                Op::MaskedSoftmax { e, allowed } => {
                    let p = node.value.data();
                    let mut dot = 0.0;
                    for i2 in 0..p.len() {
                        if allowed[i2] {
                            dot += g[i2] * p[i2];
                        }
                    }
                    for i2 in 0..p.len() {
                        if allowed[i2] {
                            before[e.0].grad[i2] += p[i2] * (g[i2] - dot);
                        }
                    }
                }
                Op::SampleOneHot { p } => {
                    for (gp, &gv) in before[p.0].grad.iter_mut().zip(g) {
                        *gp += gv;
                    }
                }
                Op::L1Loss(pred, target) => {
                    let gv = g[0];
                    let numel = before[pred.0].value.numel();
                    let n = numel as f64;
                    for idx in 0..numel {
                        let diff = before[pred.0].value.data()[idx]
                            - before[target.0].value.data()[idx];
                        let s = if diff > 0.0 {
                            1.0
                        } else if diff < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        before[pred.0].grad[idx] += gv * s / n;
                        before[target.0].grad[idx] -= gv * s / n;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::check::{finite_difference, max_rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Finite-difference check of d(loss)/d(leaf 0) for a graph builder.
    fn fd_check(
        build: impl Fn(&mut Tape, Var) -> Var,
        at: &Tensor,
        tolerance: f64,
    ) {
        let mut tape = Tape::new();
        let x = tape.leaf(at.clone());
        let loss = build(&mut tape, x);
        assert_eq!(tape.value(loss).numel(), 1);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(x).to_vec();
        let numeric = finite_difference(
            &mut |t: &Tensor| {
                let mut tape = Tape::new();
                let x = tape.leaf(t.clone());
                let out = build(&mut tape, x);
                Ok(tape.value(out).item())
            },
            at,
            1e-5,
        )
        .unwrap();
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < tolerance, "rel err {err}");
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.leaf(
            Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
        );
        let b = tape.leaf(Tensor::new(vec![3, 2], (0..6).map(f64::from).collect()).unwrap());
        let out = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(b).data());
    }

    #[test]
    fn matmul_shape_mismatch_names_both() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn mean_pool_of_constant_is_constant() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 5], vec![3.5; 10]).unwrap());
        let out = tape.mean_pool_time(x).unwrap();
        assert_eq!(tape.value(out).shape(), &[2, 1]);
        for &v in tape.value(out).data() {
            assert!((v - 3.5).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 6], (0..6).map(f64::from).collect()).unwrap());
        let w = tape.leaf(Tensor::new(vec![1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap());
        let b = tape.leaf(Tensor::zeros(vec![1]));
        let out = tape.conv1d(x, w, b, PadMode::Same).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(x).data());
    }

    #[test]
    fn causal_conv_never_sees_the_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = random_tensor(&mut rng, vec![2, 7], -1.0, 1.0);
        let w = random_tensor(&mut rng, vec![3, 2, 3], -1.0, 1.0);
        let bias = random_tensor(&mut rng, vec![3], -1.0, 1.0);
        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let wv = tape.leaf(w.clone());
            let bv = tape.leaf(bias.clone());
            let out = tape.conv1d(xv, wv, bv, PadMode::Causal).unwrap();
            tape.value(out).clone()
        };
        let base = run(&x0);
        for t in 0..7 {
            let mut bumped = x0.clone();
            bumped.set2(1, t, bumped.at2(1, t) + 10.0);
            let out = run(&bumped);
            for c in 0..3 {
                for u in 0..t {
                    assert_eq!(out.at2(c, u), base.at2(c, u), "t={t} leaked to u={u}");
                }
                assert_ne!(out.at2(c, t), base.at2(c, t));
            }
        }
    }

    #[test]
    fn even_kernel_same_padding_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 4]));
        let w = tape.leaf(Tensor::zeros(vec![1, 1, 2]));
        let b = tape.leaf(Tensor::zeros(vec![1]));
        assert!(tape.conv1d(x, w, b, PadMode::Same).is_err());
        let w4 = tape.leaf(Tensor::zeros(vec![1, 1, 2]));
        assert!(tape.conv1d(x, w4, b, PadMode::Causal).is_ok());
    }

    #[test]
    fn glu_halves() {
        let mut tape = Tape::new();
        // gate half zero -> sigmoid 0.5
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![2.0, 4.0, 0.0, 0.0]).unwrap());
        let out = tape.glu(x).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0]);
        // value half zero -> all zero
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![0.0, 0.0, 3.0, -3.0]).unwrap());
        let out = tape.glu(x).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 0.0]);
        let odd = tape.leaf(Tensor::zeros(vec![3, 2]));
        assert!(tape.glu(odd).is_err());
    }

    #[test]
    fn masked_softmax_basics() {
        let mut tape = Tape::new();
        let e = tape.leaf(Tensor::new(vec![4], vec![0.3, 9.0, -2.0, 1.5]).unwrap());
        let one = tape.masked_softmax(e, &[false, false, true, false]).unwrap();
        assert_eq!(tape.value(one).data(), &[0.0, 0.0, 1.0, 0.0]);

        let u = tape.leaf(Tensor::new(vec![4], vec![7.0; 4]).unwrap());
        let p = tape.masked_softmax(u, &[true, false, true, true]).unwrap();
        let want = [1.0 / 3.0, 0.0, 1.0 / 3.0, 1.0 / 3.0];
        for (got, want) in tape.value(p).data().iter().zip(want) {
            assert!((got - want).abs() < 1e-12);
        }

        assert!(matches!(
            tape.masked_softmax(e, &[false; 4]),
            Err(Error::AllMasked)
        ));
    }

    #[test]
    fn masked_softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.gen_range(2..12);
            let mut allowed: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
            allowed[rng.gen_range(0..n)] = true;
            let mut tape = Tape::new();
            let e = tape.leaf(random_tensor(&mut rng, vec![n], -30.0, 30.0));
            let p = tape.masked_softmax(e, &allowed).unwrap();
            let sum: f64 = tape.value(p).data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            for (v, a) in tape.value(p).data().iter().zip(&allowed) {
                assert!(*a || *v == 0.0);
            }
        }
    }

    #[test]
    fn sample_from_degenerate_distribution_is_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let mut tape = Tape::new();
            let p = tape.leaf(Tensor::new(vec![3], vec![0.0, 1.0, 0.0]).unwrap());
            let s = tape.sample_one_hot(p, &mut rng).unwrap();
            assert_eq!(tape.value(s).data(), &[0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn sample_frequencies_track_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut hits = [0u32; 2];
        for _ in 0..100_000 {
            let mut tape = Tape::new();
            let p = tape.leaf(Tensor::new(vec![2], vec![0.3, 0.7]).unwrap());
            let s = tape.sample_one_hot(p, &mut rng).unwrap();
            if tape.value(s).data()[0] == 1.0 {
                hits[0] += 1;
            } else {
                hits[1] += 1;
            }
        }
        let f0 = hits[0] as f64 / 100_000.0;
        assert!((f0 - 0.3).abs() < 0.01, "frequency {f0}");
    }

    #[test]
    fn sample_rejects_unnormalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(vec![2], vec![0.6, 0.6]).unwrap());
        assert!(matches!(
            tape.sample_one_hot(p, &mut rng),
            Err(Error::NotNormalized { .. })
        ));
    }

    #[test]
    fn straight_through_matches_soft_gradient() {
        // downstream of the draw is linear in it, so routing the gradient
        // straight through must reproduce the soft-path gradient exactly
        let weights = Tensor::new(vec![1, 3], vec![0.2, -1.5, 0.9]).unwrap();
        let scores = Tensor::new(vec![3, 1], vec![0.1, 0.4, -0.3]).unwrap();
        let grad_of = |sampled: bool| {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut tape = Tape::new();
            let e = tape.leaf(scores.clone());
            let p = tape.masked_softmax(e, &[true; 3]).unwrap();
            let picked = if sampled {
                tape.sample_one_hot(p, &mut rng).unwrap()
            } else {
                p
            };
            let w = tape.leaf(weights.clone());
            let loss = tape.matmul(w, picked).unwrap();
            tape.backward(loss).unwrap();
            tape.grad(e).to_vec()
        };
        assert_eq!(grad_of(true), grad_of(false));
    }

    #[test]
    fn l1_loss_examples_and_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let same = tape.l1_loss(a, a).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);

        let b = tape.leaf(Tensor::new(vec![2, 2], vec![1.5, 2.5, 3.5, 4.5]).unwrap());
        let off = tape.l1_loss(b, a).unwrap();
        assert!((tape.value(off).item() - 0.5).abs() < 1e-12);
        tape.backward(off).unwrap();
        for &g in tape.grad(b) {
            assert!((g - 0.25).abs() < 1e-12);
        }
        for &g in tape.grad(a) {
            assert!((g + 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn fanout_accumulates_additively() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        tape.backward(y).unwrap();
        // d(x^2 + x)/dx = 2x + 1
        assert!((tape.grad(x)[0] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn linear_gradient_matches_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let in_dim = rng.gen_range(1..5);
            let out_dim = rng.gen_range(1..5);
            let t = rng.gen_range(1..6);
            // positive inputs keep the absolute values away from kinks
            let x = random_tensor(&mut rng, vec![in_dim, t], 0.5, 1.5);
            let b = random_tensor(&mut rng, vec![out_dim], 0.1, 0.4);
            let w0 = random_tensor(&mut rng, vec![out_dim, in_dim], 0.5, 1.5);
            fd_check(
                |tape, w| {
                    let xv = tape.leaf(x.clone());
                    let bv = tape.leaf(b.clone());
                    let out = tape.linear(xv, w, bv).unwrap();
                    let zero = tape.leaf(Tensor::zeros(vec![out_dim, t]));
                    tape.l1_loss(out, zero).unwrap()
                },
                &w0,
                1e-4,
            );
        }
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let c_in = rng.gen_range(1..4);
            let c_out = rng.gen_range(1..4);
            let t = rng.gen_range(3..7);
            let mode = if seed % 2 == 0 { PadMode::Same } else { PadMode::Causal };
            let w = random_tensor(&mut rng, vec![c_out, c_in, 3], -1.0, 1.0);
            let b = random_tensor(&mut rng, vec![c_out], -0.3, 0.3);
            let target = random_tensor(&mut rng, vec![c_out, t], 5.0, 9.0);
            let x0 = random_tensor(&mut rng, vec![c_in, t], -1.0, 1.0);
            fd_check(
                |tape, x| {
                    let wv = tape.leaf(w.clone());
                    let bv = tape.leaf(b.clone());
                    let out = tape.conv1d(x, wv, bv, mode).unwrap();
                    let tv = tape.leaf(target.clone());
                    tape.l1_loss(out, tv).unwrap()
                },
                &x0,
                1e-4,
            );
            // and with respect to the kernels
            fd_check(
                |tape, wvar| {
                    let xv = tape.leaf(x0.clone());
                    let bv = tape.leaf(b.clone());
                    let out = tape.conv1d(xv, wvar, bv, mode).unwrap();
                    let tv = tape.leaf(target.clone());
                    tape.l1_loss(out, tv).unwrap()
                },
                &w,
                1e-4,
            );
        }
    }

    #[test]
    fn glu_gradient_matches_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let c = rng.gen_range(1..4);
            let t = rng.gen_range(1..6);
            let target = random_tensor(&mut rng, vec![c, t], 5.0, 9.0);
            let x0 = random_tensor(&mut rng, vec![2 * c, t], -2.0, 2.0);
            fd_check(
                |tape, x| {
                    let out = tape.glu(x).unwrap();
                    let tv = tape.leaf(target.clone());
                    tape.l1_loss(out, tv).unwrap()
                },
                &x0,
                1e-4,
            );
        }
    }

    #[test]
    fn masked_softmax_gradient_matches_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let n = rng.gen_range(2..8);
            let mut allowed: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
            allowed[rng.gen_range(0..n)] = true;
            let weights = random_tensor(&mut rng, vec![n], 1.0, 3.0);
            let e0 = random_tensor(&mut rng, vec![n], -1.0, 1.0);
            let allowed2 = allowed.clone();
            fd_check(
                move |tape, e| {
                    let p = tape.masked_softmax(e, &allowed2).unwrap();
                    let wv = tape.leaf(weights.clone());
                    let prod = tape.mul(p, wv).unwrap();
                    let zeros = tape.leaf(Tensor::zeros(vec![n]));
                    // all products are non-negative, so the mean absolute
                    // value is smooth here
                    tape.l1_loss(prod, zeros).unwrap()
                },
                &e0,
                1e-4,
            );
        }
    }

    #[test]
    fn composed_graph_gradient_matches_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
            let d = rng.gen_range(2..4);
            let t = rng.gen_range(2..5);
            let w = random_tensor(&mut rng, vec![d, d], -0.8, 0.8);
            let target = random_tensor(&mut rng, vec![d, 1], 5.0, 8.0);
            let x0 = random_tensor(&mut rng, vec![d, t], -1.0, 1.0);
            fd_check(
                |tape, x| {
                    let wv = tape.leaf(w.clone());
                    let xt = tape.transpose(x).unwrap();
                    let m = tape.matmul(wv, x).unwrap();
                    let mt = tape.transpose(xt).unwrap();
                    let s = tape.add(m, mt).unwrap();
                    let sc = tape.scale(s, 0.7);
                    let ex = tape.exp(sc);
                    let c0 = tape.col(ex, 0).unwrap();
                    let rest = tape.mean_pool_time(ex).unwrap();
                    let joined = tape.concat_time(&[c0, rest]).unwrap();
                    let pooled = tape.mean_pool_time(joined).unwrap();
                    let tv = tape.leaf(target.clone());
                    tape.l1_loss(pooled, tv).unwrap()
                },
                &x0,
                1e-4,
            );
        }
    }

    #[test]
    fn sampling_is_reproducible_from_the_seed() {
        let picks = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = Vec::new();
            for _ in 0..30 {
                let mut tape = Tape::new();
                let p = tape.leaf(Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
                let s = tape.sample_one_hot(p, &mut rng).unwrap();
                out.push(
                    tape.value(s)
                        .data()
                        .iter()
                        .position(|&v| v == 1.0)
                        .unwrap(),
                );
            }
            out
        };
        assert_eq!(picks(7), picks(7));
        assert_ne!(picks(7), picks(8));
    }
}
