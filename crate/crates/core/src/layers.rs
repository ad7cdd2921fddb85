//! Parameterized layers built on the tape: convolution (+ batch norm + ReLU),
//! fully-connected, and squeeze-and-excitation.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::tensor::{FiniteDiff, Gradients, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable, receives gradients.
    Weight,
    /// State carried alongside the weights (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn weight(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self { name: name.into(), kind: ParamKind::Weight, value }
    }

    pub fn buffer(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self { name: name.into(), kind: ParamKind::Buffer, value }
    }
}

/// Anything owning named parameters.
pub trait Module<T: Real> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    /// Number of learnable scalars.
    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.kind == ParamKind::Weight {
                n += p.value.numel();
            }
        });
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.value.zero_grad());
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by one batch-norm layer during a train-mode pass.
#[derive(Clone, Debug)]
pub struct BnObservation<T> {
    pub prefix: String,
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
    pub momentum: T,
}

/// Gate values realized by one block on one forward pass.
#[derive(Clone, Debug)]
pub struct GateRecord<T> {
    pub block: String,
    /// Index `i` of the gated group `y_i` (the carry into group `i + 1`), 1-based.
    pub group: usize,
    /// `[N, C]` gate values.
    pub values: Tensor<T>,
}

/// State of one forward pass: the tape, the mode, bound parameters, and
/// side outputs (batch-norm statistics, gate traces).
pub struct Session<'t, T: Real> {
    tape: &'t Tape<T>,
    mode: Mode,
    track_grads: bool,
    bound: Vec<(String, Var<'t, T>)>,
    bn_observations: Vec<BnObservation<T>>,
    gate_override: Option<T>,
    gate_trace: Option<Vec<GateRecord<T>>>,
}

impl<'t, T: Real> Session<'t, T> {
    pub fn new(tape: &'t Tape<T>, mode: Mode) -> Self {
        Self {
            tape,
            mode,
            track_grads: mode == Mode::Train,
            bound: Vec::new(),
            bn_observations: Vec::new(),
            gate_override: None,
            gate_trace: None,
        }
    }

    /// Whether parameters are recorded as gradient-carrying leaves.
    pub fn with_grads(mut self, flag: bool) -> Self {
        self.track_grads = flag;
        self
    }

    /// Replaces every channel gate with a constant vector of `value`.
    pub fn with_gate_override(mut self, value: Option<T>) -> Self {
        self.gate_override = value;
        self
    }

    pub fn with_gate_trace(mut self) -> Self {
        self.gate_trace = Some(Vec::new());
        self
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn gate_override(&self) -> Option<T> {
        self.gate_override
    }

    pub fn bind(&mut self, p: &Param<T>) -> Var<'t, T> {
        if self.track_grads && p.kind == ParamKind::Weight {
            let v = self.tape.param(&p.value);
            self.bound.push((p.name.clone(), v));
            v
        } else {
            self.tape.constant(p.value.clone())
        }
    }

    pub(crate) fn observe_bn(&mut self, obs: BnObservation<T>) {
        self.bn_observations.push(obs);
    }

    pub(crate) fn record_gate(&mut self, rec: impl FnOnce() -> GateRecord<T>) {
        if let Some(trace) = self.gate_trace.as_mut() {
            trace.push(rec());
        }
    }

    pub fn take_gate_trace(&mut self) -> Vec<GateRecord<T>> {
        self.gate_trace.take().unwrap_or_default()
    }

    pub fn bn_observations(&self) -> &[BnObservation<T>] {
        &self.bn_observations
    }

    /// Adds the gradients of every bound parameter into `module`.
    pub fn accumulate_grads(&self, grads: &Gradients<T>, module: &mut dyn Module<T>) -> Result<()> {
        let by_name: HashMap<&str, Var<'t, T>> = self.bound.iter().map(|(n, v)| (n.as_str(), *v)).collect();
        let mut result = Ok(());
        module.visit_mut(&mut |p| {
            if let Some(v) = by_name.get(p.name.as_str()) {
                if let Err(e) = grads.accumulate_into(*v, &mut p.value) {
                    result = Err(e);
                }
            }
        });
        result
    }

    /// Folds observed batch statistics into running statistics.
    pub fn commit_bn_stats(&self, module: &mut dyn Module<T>) {
        let by_prefix: HashMap<&str, &BnObservation<T>> =
            self.bn_observations.iter().map(|o| (o.prefix.as_str(), o)).collect();
        module.visit_mut(&mut |p| {
            let (prefix, stat) = match p.name.rsplit_once('.') {
                Some((prefix, s @ ("running_mean" | "running_var"))) => (prefix, s),
                _ => return,
            };
            if let Some(obs) = by_prefix.get(prefix) {
                let batch = if stat == "running_mean" { &obs.mean } else { &obs.var_unbiased };
                let m = obs.momentum;
                for (r, &b) in p.value.data_mut().iter_mut().zip(batch) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        });
    }
}

impl<T: Real, A: Module<T>, B: Module<T>> Module<T> for (A, B) {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.0.visit(f);
        self.1.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.0.visit_mut(f);
        self.1.visit_mut(f);
    }
}

impl<T: Real> Module<T> for Vec<Param<T>> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.iter().for_each(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.iter_mut().for_each(f);
    }
}

/// Finite-difference check of a module in train mode: compares the tape
/// gradients of `loss(module, x)` with respect to `x` and to every learnable
/// parameter against `fd` estimates. Returns the largest relative error.
pub fn module_grad_check<M, F>(module: &M, x: &Tensor<f64>, fd: impl Into<FiniteDiff>, loss: F) -> Result<f64>
where
    M: Module<f64> + Clone,
    F: for<'t> Fn(&M, &mut Session<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    module_grad_check_floor(module, x, fd, 1e-12, loss)
}

/// As [`module_grad_check`], with `floor` in place of `1e-12` in the error
/// denominator. Deep models have coordinates whose gradient is comparable to
/// the central-difference roundoff; the floor keeps those from dominating.
pub fn module_grad_check_floor<M, F>(
    module: &M,
    x: &Tensor<f64>,
    fd: impl Into<FiniteDiff>,
    floor: f64,
    loss: F,
) -> Result<f64>
where
    M: Module<f64> + Clone,
    F: for<'t> Fn(&M, &mut Session<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let fd = fd.into();
    let rel = |a: f64, b: f64| (a - b).abs() / (a.abs() + b.abs()).max(floor);
    let eval = |m: &M, x: &Tensor<f64>| -> Result<f64> {
        let tape = Tape::new();
        let mut s = Session::new(&tape, Mode::Train).with_grads(false);
        let xv = tape.constant(x.clone());
        Ok(loss(m, &mut s, xv)?.scalar())
    };

    let tape = Tape::new();
    let mut s = Session::new(&tape, Mode::Train).with_grads(true);
    let xv = tape.leaf(x.clone().with_requires_grad(true));
    let out = loss(module, &mut s, xv)?;
    let grads = tape.backward(out)?;
    let mut with_grads = module.clone();
    with_grads.zero_grad();
    s.accumulate_grads(&grads, &mut with_grads)?;

    let mut worst = 0.0f64;
    let mut xp = x.clone();
    for (j, &g) in grads.get(xv).expect("input gradient").iter().enumerate() {
        let orig = x.data()[j];
        let est = fd.derivative(|d| {
            xp.data_mut()[j] = orig + d;
            eval(module, &xp)
        })?;
        xp.data_mut()[j] = orig;
        worst = worst.max(rel(g, est));
    }

    let mut analytic = Vec::new();
    with_grads.visit(&mut |p| {
        if p.kind == ParamKind::Weight {
            let g = p.value.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.value.numel()]);
            analytic.push(g);
        }
    });
    for (k, g_param) in analytic.iter().enumerate() {
        for (j, &g) in g_param.iter().enumerate() {
            let est = fd.derivative(|delta| {
                let mut m = module.clone();
                let mut idx = 0;
                m.visit_mut(&mut |p| {
                    if p.kind == ParamKind::Weight {
                        if idx == k {
                            p.value.data_mut()[j] += delta;
                        }
                        idx += 1;
                    }
                });
                eval(&m, x)
            })?;
            worst = worst.max(rel(g, est));
        }
    }
    Ok(worst)
}

/// Kaiming-uniform initialization: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
}

#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub momentum: T,
    pub eps: T,
    prefix: String,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            gamma: Param::weight(format!("{prefix}.gamma"), Tensor::ones(&[channels])),
            beta: Param::weight(format!("{prefix}.beta"), Tensor::zeros(&[channels])),
            running_mean: Param::buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[channels])),
            running_var: Param::buffer(format!("{prefix}.running_var"), Tensor::ones(&[channels])),
            momentum: T::of(0.1),
            eps: T::of(1e-5),
            prefix: prefix.to_string(),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.numel()
    }

    pub fn forward<'t>(&self, s: &mut Session<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let gamma = s.bind(&self.gamma);
        let beta = s.bind(&self.beta);
        match s.mode() {
            Mode::Train => {
                let count = {
                    let shape = x.shape();
                    if shape.len() < 3 {
                        return dim_err(format!("batch norm expects a feature map, got {shape:?}"));
                    }
                    x.value().numel() / shape[shape.len() - 3]
                };
                let (y, mean, var) = x.batch_norm_train(gamma, beta, self.eps)?;
                let correction = if count > 1 {
                    T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
                } else {
                    T::one()
                };
                s.observe_bn(BnObservation {
                    prefix: self.prefix.clone(),
                    mean,
                    var_unbiased: var.into_iter().map(|v| v * correction).collect(),
                    momentum: self.momentum,
                });
                Ok(y)
            }
            Mode::Eval => {
                x.batch_norm_eval(gamma, beta, self.running_mean.value.data(), self.running_var.value.data(), self.eps)
            }
        }
    }

    /// Plain-tensor forward; a train-mode call updates the running statistics.
    pub fn apply(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let mut s = Session::new(&tape, mode).with_grads(false);
        let y = self.forward(&mut s, tape.constant(x.clone()))?.value();
        s.commit_bn_stats(self);
        Ok(y)
    }
}

impl<T: Real> Module<T> for BatchNorm<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

/// Fully-connected layer computing `W^T x (+ b)` with `W` stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Dense<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Real> Dense<T> {
    pub fn new(prefix: &str, inputs: usize, outputs: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::weight(format!("{prefix}.weight"), kaiming_uniform(&[inputs, outputs], inputs, rng)),
            bias: bias.then(|| Param::weight(format!("{prefix}.bias"), Tensor::zeros(&[outputs]))),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward<'t>(&self, s: &mut Session<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = s.bind(&self.weight);
        let y = x.matmul(w)?;
        match &self.bias {
            Some(b) => {
                let b = s.bind(b);
                y.add(b)
            }
            None => Ok(y),
        }
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let mut s = Session::new(&tape, Mode::Eval);
        Ok(self.forward(&mut s, tape.constant(x.clone()))?.value())
    }
}

impl<T: Real> Module<T> for Dense<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOptions {
    pub bias: bool,
    pub batch_norm: bool,
    pub relu: bool,
}

/// `k x k` convolution with "same" padding (`k / 2`), optionally followed by
/// batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct ConvLayer<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub bn: Option<BatchNorm<T>>,
    pub relu: bool,
    pub stride: usize,
}

impl<T: Real> ConvLayer<T> {
    pub fn new(
        prefix: &str,
        inputs: usize,
        outputs: usize,
        kernel: usize,
        stride: usize,
        opts: ConvOptions,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = inputs * kernel * kernel;
        Self {
            weight: Param::weight(
                format!("{prefix}.weight"),
                kaiming_uniform(&[outputs, inputs, kernel, kernel], fan_in, rng),
            ),
            bias: opts.bias.then(|| Param::weight(format!("{prefix}.bias"), Tensor::zeros(&[outputs]))),
            bn: opts.batch_norm.then(|| BatchNorm::new(&format!("{prefix}.bn"), outputs)),
            relu: opts.relu,
            stride,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward<'t>(&self, s: &mut Session<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = s.bind(&self.weight);
        let b = self.bias.as_ref().map(|b| s.bind(b));
        let mut y = x.conv2d(w, b, self.stride, self.kernel() / 2)?;
        if let Some(bn) = &self.bn {
            y = bn.forward(s, y)?;
        }
        if self.relu {
            y = y.relu();
        }
        Ok(y)
    }
}

impl<T: Real> Module<T> for ConvLayer<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
        if let Some(bn) = &self.bn {
            bn.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
        if let Some(bn) = &mut self.bn {
            bn.visit_mut(f);
        }
    }
}

/// Squeeze-and-excitation: `x * sigmoid(W2 relu(W1 avgpool(x) + b1) + b2)`.
#[derive(Clone, Debug)]
pub struct SeBlock<T> {
    pub fc1: Dense<T>,
    pub fc2: Dense<T>,
}

impl<T: Real> SeBlock<T> {
    pub fn new(prefix: &str, channels: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(crate::Error::Config(format!("SE reduction {reduction} must divide {channels} channels")));
        }
        let hidden = channels / reduction;
        Ok(Self {
            fc1: Dense::new(&format!("{prefix}.fc1"), channels, hidden, true, rng),
            fc2: Dense::new(&format!("{prefix}.fc2"), hidden, channels, true, rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.fc1.inputs()
    }

    /// The channel gate `sigmoid(W2 relu(W1 avgpool(x)))`, shape `[.., C]`.
    pub fn gate<'t>(&self, s: &mut Session<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        if shape.len() < 3 || shape[shape.len() - 3] != self.channels() {
            return dim_err(format!("SE block for {} channels got map {shape:?}", self.channels()));
        }
        let pooled = x.mean_over(&[shape.len() - 2, shape.len() - 1])?;
        let h = self.fc1.forward(s, pooled)?.relu();
        Ok(self.fc2.forward(s, h)?.sigmoid())
    }

    pub fn forward<'t>(&self, s: &mut Session<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let g = self.gate(s, x)?;
        x.channel_mul(g)
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let mut s = Session::new(&tape, Mode::Eval);
        Ok(self.forward(&mut s, tape.constant(x.clone()))?.value())
    }
}

impl<T: Real> Module<T> for SeBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.fc1.visit(f);
        self.fc2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn dense_zero_and_identity() {
        let mut r = rng(1);
        let mut d = Dense::<f64>::new("d", 3, 3, false, &mut r);
        let x = Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        d.weight.value = Tensor::zeros(&[3, 3]);
        assert_eq!(d.apply(&x).unwrap().data(), &[0.0; 3]);
        d.weight.value = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        assert_eq!(d.apply(&x).unwrap(), x);
        assert_eq!(d.param_count(), 9);
    }

    #[test]
    fn dense_matches_loop_oracle() {
        let mut r = rng(2);
        let d = Dense::<f64>::new("d", 4, 3, true, &mut r);
        let mut d = d;
        d.bias.as_mut().unwrap().value = randn(&[3], &mut r);
        let x = randn(&[2, 4], &mut r);
        let y = d.apply(&x).unwrap();
        let w = &d.weight.value;
        for row in 0..2 {
            for o in 0..3 {
                let mut acc = d.bias.as_ref().unwrap().value.data()[o];
                for i in 0..4 {
                    acc += w.get(&[i, o]) * x.get(&[row, i]);
                }
                assert!((y.get(&[row, o]) - acc).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn se_zero_weights_halve_input() {
        let mut r = rng(3);
        let mut se = SeBlock::<f64>::new("se", 4, 2, &mut r).unwrap();
        se.visit_mut(&mut |p| p.value.data_mut().fill(0.0));
        let x = randn(&[4, 3, 2], &mut r);
        let y = se.apply(&x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, b / 2.0);
        }
    }

    #[test]
    fn se_saturated_gate_passes_input() {
        let mut r = rng(4);
        let mut se = SeBlock::<f64>::new("se", 4, 2, &mut r).unwrap();
        se.fc2.bias.as_mut().unwrap().value = Tensor::full(&[4], 50.0);
        se.fc2.weight.value = Tensor::zeros(&[2, 4]);
        let x = randn(&[2, 4, 3, 3], &mut r);
        let y = se.apply(&x).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn se_matches_composition_oracle() {
        let mut r = rng(5);
        let mut se = SeBlock::<f64>::new("se", 4, 2, &mut r).unwrap();
        se.visit_mut(&mut |p| p.value = randn(p.value.shape(), &mut ChaCha8Rng::seed_from_u64(p.value.numel() as u64)));
        let x = randn(&[4, 2, 3], &mut r);
        let y = se.apply(&x).unwrap();
        let (w1, b1) = (&se.fc1.weight.value, &se.fc1.bias.as_ref().unwrap().value);
        let (w2, b2) = (&se.fc2.weight.value, &se.fc2.bias.as_ref().unwrap().value);
        let pooled: Vec<f64> = (0..4).map(|c| x.data()[c * 6..(c + 1) * 6].iter().sum::<f64>() / 6.0).collect();
        let hidden: Vec<f64> = (0..2)
            .map(|h| (b1.data()[h] + (0..4).map(|c| w1.get(&[c, h]) * pooled[c]).sum::<f64>()).max(0.0))
            .collect();
        for c in 0..4 {
            let z = b2.data()[c] + (0..2).map(|h| w2.get(&[h, c]) * hidden[h]).sum::<f64>();
            let gate = 1.0 / (1.0 + (-z).exp());
            assert!(gate > 0.0 && gate < 1.0);
            for i in 0..6 {
                assert!((y.data()[c * 6 + i] - x.data()[c * 6 + i] * gate).abs() < 1e-14);
            }
        }
        assert_eq!(se.param_count(), 2 * 4 * 4 / 2 + 4 + 2);
    }

    #[test]
    fn batchnorm_normalized_input_is_fixed_point() {
        let mut bn = BatchNorm::<f64>::new("bn", 1);
        // per-channel zero mean, unit (biased) variance
        let x = Tensor::from_f64(&[2, 1, 1, 2], &[1.0, -1.0, 1.0, -1.0]).unwrap();
        let y = bn.apply(&x, Mode::Train).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn batchnorm_eval_is_affine_and_leaves_stats() {
        let mut bn = BatchNorm::<f64>::new("bn", 2);
        bn.running_mean.value = Tensor::from_f64(&[2], &[0.5, -1.0]).unwrap();
        bn.running_var.value = Tensor::from_f64(&[2], &[4.0, 0.25]).unwrap();
        bn.gamma.value = Tensor::from_f64(&[2], &[2.0, 3.0]).unwrap();
        bn.beta.value = Tensor::from_f64(&[2], &[0.1, -0.2]).unwrap();
        let x = Tensor::from_f64(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let before = bn.clone();
        let y = bn.apply(&x, Mode::Eval).unwrap();
        let m = [0.5, -1.0];
        let v = [4.0, 0.25];
        let (g, b) = ([2.0, 3.0], [0.1, -0.2]);
        for c in 0..2 {
            for t in 0..2 {
                let xv = x.get(&[0, c, 0, t]);
                let want = (xv - m[c]) / (v[c] + 1e-5f64).sqrt() * g[c] + b[c];
                assert!((y.get(&[0, c, 0, t]) - want).abs() < 1e-14);
            }
        }
        assert_eq!(bn.running_mean, before.running_mean);
        assert_eq!(bn.running_var, before.running_var);
    }

    #[test]
    fn batchnorm_train_stats_match_two_pass_oracle() {
        let mut r = rng(6);
        let mut bn = BatchNorm::<f64>::new("bn", 3);
        let x = randn(&[4, 3, 2, 5], &mut r);
        let y = bn.apply(&x, Mode::Train).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| (0..10).map(move |i| (n, i)))
                .map(|(n, i)| x.data()[(n * 3 + c) * 10 + i])
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            let unbiased = var * vals.len() as f64 / (vals.len() - 1) as f64;
            assert!((bn.running_mean.value.data()[c] - 0.1 * mean).abs() < 1e-14);
            assert!((bn.running_var.value.data()[c] - (0.9 + 0.1 * unbiased)).abs() < 1e-14);
            let n0 = (x.data()[c * 10] - mean) / (var + 1e-5).sqrt();
            assert!((y.data()[c * 10] - n0).abs() < 1e-12);
        }
    }

    #[test]
    fn layers_pass_grad_check() {
        for seed in 0..5 {
            let mut r = rng(100 + seed);
            let opts = ConvOptions { bias: false, batch_norm: true, relu: true };
            let conv = ConvLayer::<f64>::new("c", 2, 3, 3, 1, opts, &mut r);
            let se = SeBlock::<f64>::new("se", 3, 3, &mut r).unwrap();
            let pair = (conv, se);
            let x = randn(&[2, 2, 3, 3], &mut r);
            let probe = randn(&[2, 3, 3, 3], &mut r);
            let err = module_grad_check(&pair, &x, 1e-6, |(conv, se), s, x| {
                let y = conv.forward(s, x)?;
                let y = se.forward(s, y)?;
                y.mul(s.tape().constant(probe.clone())).map(|v| v.sum())
            })
            .unwrap();
            assert!(err <= 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn dense_with_bias_passes_grad_check() {
        let mut r = rng(7);
        let d = Dense::<f64>::new("d", 3, 2, true, &mut r);
        let x = randn(&[4, 3], &mut r);
        let err = module_grad_check(&d, &x, 1e-6, |d, s, x| Ok(d.forward(s, x)?.sigmoid().sum())).unwrap();
        assert!(err <= 1e-5, "{err}");
    }
}
