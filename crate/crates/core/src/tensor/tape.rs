use super::kernels::{self, BnCache};
use super::{arg_err, shape_err, Element, Result, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the batch's own statistics.
    Train,
    /// Normalize with the running statistics.
    Eval,
}

/// Exponential moving averages of per-channel mean and variance.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }

    /// Folds one batch into the averages; the variance uses the unbiased estimate.
    pub fn update(&mut self, batch: &BatchStats<T>, momentum: T) {
        let n = batch.count as f64;
        let unbias = T::from_f64(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
        let keep = T::one() - momentum;
        for c in 0..self.mean.len() {
            self.mean[c] = keep * self.mean[c] + momentum * batch.mean[c];
            self.var[c] = keep * self.var[c] + momentum * batch.var[c] * unbias;
        }
    }
}

/// Per-channel statistics of one training batch (variance is biased).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

enum Op<T: Element> {
    Leaf,
    Conv2d { input: Var, kernel: Var, stride: usize, padding: usize },
    Depthwise { input: Var, kernel: Var, stride: usize, padding: usize },
    ConvTranspose { input: Var, kernel: Var, stride: usize },
    BatchNorm { input: Var, gamma: Var, beta: Var, cache: Option<BnCache<T>> },
    Relu6(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Concat(Var, Var),
    BiasAdd { input: Var, bias: Var },
    Mse { pred: Var, target: Var },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a forward computation, replayed in reverse by [`Tape::backward`].
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the leaves of a tape.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let y = kernels::conv2d(self.value(input), self.value(kernel), stride, padding)?;
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(y, Op::Conv2d { input, kernel, stride, padding }, rg))
    }

    pub fn depthwise_conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let y = kernels::depthwise_conv2d(self.value(input), self.value(kernel), stride, padding)?;
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(y, Op::Depthwise { input, kernel, stride, padding }, rg))
    }

    /// Transposed convolution with kernel `2 * stride`; output is `stride` times larger.
    pub fn conv2d_transpose(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let y = kernels::conv2d_transpose(self.value(input), self.value(kernel), stride)?;
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(y, Op::ConvTranspose { input, kernel, stride }, rg))
    }

    /// Batch normalization. In [`BnMode::Train`] the batch statistics are used and
    /// returned so the caller can fold them into `stats`; in [`BnMode::Eval`] the
    /// running statistics are used and `None` is returned.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &RunningStats<T>,
        mode: BnMode,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let x = self.value(input);
        let [b, c, h, w] = x.dims4("batch_norm")?;
        if stats.mean.len() != c || stats.var.len() != c {
            return shape_err("batch_norm", format!("running stats for {} channels, input has {c}", stats.mean.len()));
        }
        let (y, mut cache, batch) = match mode {
            BnMode::Train => {
                if b * h * w < 2 {
                    return arg_err("batch_norm", "train mode needs at least 2 values per channel");
                }
                let (mean, var) = kernels::channel_moments(x)?;
                let (y, cache) = kernels::batch_norm_apply(x, self.value(gamma), self.value(beta), &mean, &var, eps)?;
                (y, cache, Some(BatchStats { mean, var, count: b * h * w }))
            }
            BnMode::Eval => {
                let (y, cache) = kernels::batch_norm_apply(x, self.value(gamma), self.value(beta), &stats.mean, &stats.var, eps)?;
                (y, cache, None)
            }
        };
        cache.batch_stats = mode == BnMode::Train;
        let rg = self.rg(&[input, gamma, beta]);
        let cache = rg.then_some(cache);
        Ok((self.push(y, Op::BatchNorm { input, gamma, beta, cache }, rg), batch))
    }

    pub fn relu6(&mut self, x: Var) -> Var {
        let six = T::from_f64(6.0);
        let y = self.value(x).map(|v| {
            let v = if v > T::zero() { v } else { T::zero() };
            if v < six {
                v
            } else {
                six
            }
        });
        let rg = self.rg(&[x]);
        self.push(y, Op::Relu6(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(y, Op::Sigmoid(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b))
            .or_else(|_| shape_err("add", format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape())))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    /// Stacks `[B, Ca, H, W]` and `[B, Cb, H, W]` into `[B, Ca + Cb, H, W]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let [ba, ca, ha, wa] = ta.dims4("concat_channels")?;
        let [bb, cb, hb, wb] = tb.dims4("concat_channels")?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return shape_err("concat_channels", format!("{:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let hw = ha * wa;
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for bi in 0..ba {
            data.extend_from_slice(&ta.data()[bi * ca * hw..(bi + 1) * ca * hw]);
            data.extend_from_slice(&tb.data()[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        let y = Tensor::from_vec(&[ba, ca + cb, ha, wa], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Concat(a, b), rg))
    }

    /// Adds `bias[c]` to every element of channel `c`.
    pub fn bias_add(&mut self, input: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let [b, c, h, w] = x.dims4("bias_add")?;
        if self.value(bias).shape() != [c] {
            return shape_err("bias_add", format!("bias {:?} for {c} channels", self.value(bias).shape()));
        }
        let mut y = x.clone();
        let bv = self.value(bias).data().to_vec();
        for (i, chunk) in y.data_mut().chunks_mut(h * w).enumerate() {
            let add = bv[i % c];
            chunk.iter_mut().for_each(|v| *v = *v + add);
        }
        debug_assert_eq!(y.len(), b * c * h * w);
        let rg = self.rg(&[input, bias]);
        Ok(self.push(y, Op::BiasAdd { input, bias }, rg))
    }

    /// Mean of squared differences, as a rank-0 tensor.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return shape_err("mse_loss", format!("{:?} vs {:?}", p.shape(), t.shape()));
        }
        if p.is_empty() {
            return arg_err("mse_loss", "empty tensors");
        }
        let n = T::from_f64(p.len() as f64);
        let s: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let rg = self.rg(&[pred, target]);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse { pred, target }, rg))
    }

    /// Reverse pass from a single-element output, seeded with 1.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let v = self.value(output);
        if v.len() != 1 {
            return shape_err("backward", format!("output must hold one value, has shape {:?}", v.shape()));
        }
        self.backward_with(output, Tensor::full(v.shape(), T::one()))
    }

    /// Reverse pass seeded with an arbitrary output gradient.
    pub fn backward_with(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.value(output).shape() {
            return shape_err("backward", format!("seed {:?} for output {:?}", seed.shape(), self.value(output).shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], var: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[var.0].requires_grad {
            return Ok(());
        }
        match &mut grads[var.0] {
            Some(acc) => acc.add_assign(&g),
            slot => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, stride, padding } => {
                let (dx, dk) = kernels::conv2d_backward(
                    self.value(input),
                    self.value(kernel),
                    g,
                    stride,
                    padding,
                    self.requires_grad(input),
                    self.requires_grad(kernel),
                )?;
                self.accumulate_opt(grads, input, dx)?;
                self.accumulate_opt(grads, kernel, dk)?;
            }
            Op::Depthwise { input, kernel, stride, padding } => {
                let (dx, dk) = kernels::depthwise_conv2d_backward(
                    self.value(input),
                    self.value(kernel),
                    g,
                    stride,
                    padding,
                    self.requires_grad(input),
                    self.requires_grad(kernel),
                )?;
                self.accumulate_opt(grads, input, dx)?;
                self.accumulate_opt(grads, kernel, dk)?;
            }
            Op::ConvTranspose { input, kernel, stride } => {
                let (dx, dk) = kernels::conv2d_transpose_backward(
                    self.value(input),
                    self.value(kernel),
                    g,
                    stride,
                    self.requires_grad(input),
                    self.requires_grad(kernel),
                )?;
                self.accumulate_opt(grads, input, dx)?;
                self.accumulate_opt(grads, kernel, dk)?;
            }
            Op::BatchNorm { input, gamma, beta, ref cache } => {
                let cache = cache.as_ref().expect("batch-norm cache is kept whenever gradients are required");
                let (dx, dgamma, dbeta) = kernels::batch_norm_backward(g, self.value(gamma), cache, self.requires_grad(input))?;
                self.accumulate_opt(grads, input, dx)?;
                self.accumulate(grads, gamma, dgamma)?;
                self.accumulate(grads, beta, dbeta)?;
            }
            Op::Relu6(x) => {
                let six = T::from_f64(6.0);
                let xv = self.value(x).data();
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(xv) {
                    let pass = v > T::zero() && v < six;
                    *d = if pass { *d } else { T::zero() };
                }
                self.accumulate(grads, x, dx)?;
            }
            Op::Sigmoid(x) => {
                let mut dx = g.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d = *d * y * (T::one() - y);
                }
                self.accumulate(grads, x, dx)?;
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.clone())?;
            }
            Op::Concat(a, b) => {
                let [bn, ca, h, w] = self.value(a).dims4("concat_channels")?;
                let cb = self.value(b).shape()[1];
                let hw = h * w;
                let mut da = Vec::with_capacity(bn * ca * hw);
                let mut db = Vec::with_capacity(bn * cb * hw);
                for bi in 0..bn {
                    let base = bi * (ca + cb) * hw;
                    da.extend_from_slice(&g.data()[base..base + ca * hw]);
                    db.extend_from_slice(&g.data()[base + ca * hw..base + (ca + cb) * hw]);
                }
                self.accumulate(grads, a, Tensor::from_vec(&[bn, ca, h, w], da)?)?;
                self.accumulate(grads, b, Tensor::from_vec(&[bn, cb, h, w], db)?)?;
            }
            Op::BiasAdd { input, bias } => {
                let [_, c, h, w] = g.dims4("bias_add")?;
                let mut db = Tensor::zeros(&[c]);
                for (i, chunk) in g.data().chunks(h * w).enumerate() {
                    let s: T = chunk.iter().copied().sum();
                    db.data_mut()[i % c] = db.data()[i % c] + s;
                }
                self.accumulate(grads, input, g.clone())?;
                self.accumulate(grads, bias, db)?;
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.value(pred), self.value(target));
                let scale = g.data()[0] * T::from_f64(2.0 / p.len() as f64);
                let diff: Vec<T> = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * scale).collect();
                let dp = Tensor::from_vec(p.shape(), diff)?;
                if self.requires_grad(target) {
                    self.accumulate(grads, target, dp.map(|v| -v))?;
                }
                self.accumulate(grads, pred, dp)?;
            }
        }
        Ok(())
    }

    fn accumulate_opt(&self, grads: &mut [Option<Tensor<T>>], var: Var, g: Option<Tensor<T>>) -> Result<()> {
        match g {
            Some(g) => self.accumulate(grads, var, g),
            None => Ok(()),
        }
    }
}

#[inline]
fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
