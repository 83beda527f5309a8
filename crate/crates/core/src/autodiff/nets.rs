//! Feedforward and GRU networks built on the tape.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{dot, sigmoid, tanh};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => tanh(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    fn on_tape(self, tape: &mut Tape, v: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(v),
            Activation::Sigmoid => tape.sigmoid(v),
        }
    }
}

/// Anything owning a fixed, ordered list of weight arrays.
pub trait Parameterized {
    fn parameters(&self) -> Vec<&Array2<f64>>;
    fn parameters_mut(&mut self) -> Vec<&mut Array2<f64>>;

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    /// Puts every parameter on `tape` as a tracked leaf, in canonical order.
    fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.parameters()
            .into_iter()
            .map(|p| tape.param(p.clone()))
            .collect()
    }
}

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

/// One affine layer, `y = x W + b` with `W` of shape `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weight: Array2::zeros((input, output)),
            bias: Array2::zeros((1, output)),
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and bias.
    pub fn random(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        Dense {
            weight: uniform(input, output, bound, rng),
            bias: uniform(1, output, bound, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }
}

/// Fully connected network with a shared hidden activation and a linear
/// output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForwardNet {
    layers: Vec<Dense>,
    activation: Activation,
}

impl FeedForwardNet {
    /// `sizes` lists every layer width including input and output, e.g.
    /// `[3, 18, 18, 1]`.
    pub fn new(sizes: &[usize], activation: Activation, rng: &mut impl Rng) -> Result<Self> {
        Self::check_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|w| Dense::random(w[0], w[1], rng))
            .collect();
        Ok(FeedForwardNet { layers, activation })
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        Self::check_sizes(sizes)?;
        let layers = sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(FeedForwardNet { layers, activation })
    }

    /// Builds from explicit layers; consecutive layers must chain.
    pub fn from_layers(layers: Vec<Dense>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::dimension(
                    format!("layer {} input", i + 1),
                    pair[0].output_dim(),
                    pair[1].input_dim(),
                ));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.dim() != (1, l.output_dim()) {
                return Err(Error::dimension(
                    format!("layer {i} bias"),
                    format!("(1, {})", l.output_dim()),
                    format!("{:?}", l.bias.dim()),
                ));
            }
        }
        Ok(FeedForwardNet { layers, activation })
    }

    fn check_sizes(sizes: &[usize]) -> Result<()> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::dimension("feedforward input", self.input_dim(), cols));
        }
        Ok(())
    }

    /// Plain evaluation, one row per sample.
    pub fn forward(&self, input: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(input.ncols())?;
        let last = self.layers.len() - 1;
        let mut h = input.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.dot(&layer.weight) + &layer.bias;
            if i < last {
                h.mapv_inplace(|v| self.activation.apply(v));
            }
        }
        Ok(h)
    }

    /// Records the forward pass. `params` must come from [`Parameterized::register`].
    pub fn forward_on_tape(&self, tape: &mut Tape, params: &[Var], input: Var) -> Var {
        assert_eq!(params.len(), 2 * self.layers.len());
        let last = self.layers.len() - 1;
        let mut h = input;
        for i in 0..self.layers.len() {
            h = tape.affine(h, params[2 * i], params[2 * i + 1]);
            if i < last {
                h = self.activation.on_tape(tape, h);
            }
        }
        h
    }

    /// Output for each row together with the derivative of the (first)
    /// output with respect to every input column.
    pub fn value_and_input_grad(&self, input: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_input(input.ncols())?;
        let mut tape = Tape::new();
        let params: Vec<Var> = self
            .parameters()
            .into_iter()
            .map(|p| tape.constant(p.clone()))
            .collect();
        let x = tape.param(input.to_owned());
        let out = self.forward_on_tape(&mut tape, &params, x);
        let first = if self.output_dim() == 1 {
            out
        } else {
            let sel = tape.constant(selector(self.output_dim()));
            tape.matmul(out, sel)
        };
        let loss = tape.sum(first);
        let value = tape.value(out).clone();
        let mut grads = tape.backward(loss)?;
        let gx = grads.take_or_zeros(x, input.dim());
        Ok((value, gx))
    }
}

fn selector(outputs: usize) -> Array2<f64> {
    let mut sel = Array2::zeros((outputs, 1));
    sel[[0, 0]] = 1.0;
    sel
}

impl Parameterized for FeedForwardNet {
    fn parameters(&self) -> Vec<&Array2<f64>> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// Single-layer GRU (PyTorch gate convention) followed by an affine head.
///
/// ```text
/// r  = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
/// z  = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
/// n  = tanh(x W_in + b_in + r * (h W_hn + b_hn))
/// h' = (1 - z) * n + z * h
/// y  = h' W_head + e W_extra + b_head
/// ```
///
/// `e` is an optional per-step vector fed only to the head.
#[derive(Clone, Debug, PartialEq)]
pub struct GruNet {
    pub w_ir: Array2<f64>,
    pub w_iz: Array2<f64>,
    pub w_in: Array2<f64>,
    pub w_hr: Array2<f64>,
    pub w_hz: Array2<f64>,
    pub w_hn: Array2<f64>,
    pub b_ir: Array2<f64>,
    pub b_iz: Array2<f64>,
    pub b_in: Array2<f64>,
    pub b_hr: Array2<f64>,
    pub b_hz: Array2<f64>,
    pub b_hn: Array2<f64>,
    pub head_w: Array2<f64>,
    pub head_extra: Array2<f64>,
    pub head_b: Array2<f64>,
}

/// Per-step hidden states and outputs of a GRU run.
#[derive(Clone, Debug)]
pub struct GruTrace {
    pub hidden: Vec<Array2<f64>>,
    pub output: Vec<Array2<f64>>,
}

/// Shape of a [`GruNet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruShape {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub extra_dim: usize,
    pub output_dim: usize,
}

impl GruShape {
    /// `(name, rows, cols)` of every tensor in canonical parameter order.
    pub fn tensor_shapes(&self) -> [(&'static str, usize, usize); 15] {
        let (i, h, e, o) = (self.input_dim, self.hidden_dim, self.extra_dim, self.output_dim);
        [
            ("w_ir", i, h),
            ("w_iz", i, h),
            ("w_in", i, h),
            ("w_hr", h, h),
            ("w_hz", h, h),
            ("w_hn", h, h),
            ("b_ir", 1, h),
            ("b_iz", 1, h),
            ("b_in", 1, h),
            ("b_hr", 1, h),
            ("b_hz", 1, h),
            ("b_hn", 1, h),
            ("head_w", h, o),
            ("head_extra", e, o),
            ("head_b", 1, o),
        ]
    }
}

impl GruNet {
    pub fn zeros(shape: GruShape) -> Result<Self> {
        Self::from_tensors(shape, |r, c| Array2::zeros((r, c)))
    }

    /// Gate weights use `1/sqrt(hidden)` bounds, the head `1/sqrt(fan_in)`.
    pub fn new(shape: GruShape, rng: &mut impl Rng) -> Result<Self> {
        Self::check_shape(shape)?;
        let gate = 1.0 / (shape.hidden_dim as f64).sqrt();
        let head = 1.0 / ((shape.hidden_dim + shape.extra_dim) as f64).sqrt();
        let mut tensors = Vec::with_capacity(15);
        for (name, r, c) in shape.tensor_shapes() {
            let bound = if name.starts_with("head") { head } else { gate };
            tensors.push(uniform(r, c, bound, rng));
        }
        Self::from_vec(shape, tensors)
    }

    fn check_shape(shape: GruShape) -> Result<()> {
        if shape.input_dim == 0 || shape.hidden_dim == 0 || shape.output_dim == 0 {
            return Err(Error::Config(format!("invalid GRU shape {shape:?}")));
        }
        Ok(())
    }

    fn from_tensors(shape: GruShape, mut f: impl FnMut(usize, usize) -> Array2<f64>) -> Result<Self> {
        Self::check_shape(shape)?;
        let tensors = shape.tensor_shapes().iter().map(|&(_, r, c)| f(r, c)).collect();
        Self::from_vec(shape, tensors)
    }

    /// Builds from tensors in canonical order (see [`GruShape::tensor_shapes`]).
    pub fn from_vec(shape: GruShape, tensors: Vec<Array2<f64>>) -> Result<Self> {
        Self::check_shape(shape)?;
        let expected = shape.tensor_shapes();
        if tensors.len() != expected.len() {
            return Err(Error::dimension("GRU tensor count", expected.len(), tensors.len()));
        }
        for (t, (name, r, c)) in tensors.iter().zip(expected) {
            if t.dim() != (r, c) {
                return Err(Error::dimension(
                    format!("GRU tensor {name}"),
                    format!("({r}, {c})"),
                    format!("{:?}", t.dim()),
                ));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("count checked above");
        Ok(GruNet {
            w_ir: next(),
            w_iz: next(),
            w_in: next(),
            w_hr: next(),
            w_hz: next(),
            w_hn: next(),
            b_ir: next(),
            b_iz: next(),
            b_in: next(),
            b_hr: next(),
            b_hz: next(),
            b_hn: next(),
            head_w: next(),
            head_extra: next(),
            head_b: next(),
        })
    }

    pub fn shape(&self) -> GruShape {
        GruShape {
            input_dim: self.w_ir.nrows(),
            hidden_dim: self.w_ir.ncols(),
            extra_dim: self.head_extra.nrows(),
            output_dim: self.head_w.ncols(),
        }
    }

    fn check_sequence(&self, features: &[Array2<f64>], extras: Option<&[Array2<f64>]>) -> Result<usize> {
        let shape = self.shape();
        let Some(first) = features.first() else {
            return Err(Error::Usage("GRU needs a non-empty feature sequence".into()));
        };
        let batch = first.nrows();
        for f in features {
            if f.dim() != (batch, shape.input_dim) {
                return Err(Error::dimension(
                    "GRU step features",
                    format!("({batch}, {})", shape.input_dim),
                    format!("{:?}", f.dim()),
                ));
            }
        }
        match extras {
            Some(ex) => {
                if ex.len() != features.len() {
                    return Err(Error::dimension("GRU head inputs (steps)", features.len(), ex.len()));
                }
                for e in ex {
                    if e.dim() != (batch, shape.extra_dim) {
                        return Err(Error::dimension(
                            "GRU head inputs",
                            format!("({batch}, {})", shape.extra_dim),
                            format!("{:?}", e.dim()),
                        ));
                    }
                }
            }
            None if shape.extra_dim > 0 => {
                return Err(Error::Usage("GRU head expects extra inputs".into()));
            }
            None => {}
        }
        Ok(batch)
    }

    /// Runs the recurrence from a zero hidden state. Output `j` depends only
    /// on steps `0..=j`.
    pub fn run(&self, features: &[Array2<f64>], extras: Option<&[Array2<f64>]>) -> Result<GruTrace> {
        let batch = self.check_sequence(features, extras)?;
        let hdim = self.shape().hidden_dim;
        let mut h = Array2::<f64>::zeros((batch, hdim));
        let mut trace = GruTrace {
            hidden: Vec::with_capacity(features.len()),
            output: Vec::with_capacity(features.len()),
        };
        for (j, x) in features.iter().enumerate() {
            let r = (dot(x, &self.w_ir) + &self.b_ir + dot(&h, &self.w_hr) + &self.b_hr).mapv(sigmoid);
            let z = (dot(x, &self.w_iz) + &self.b_iz + dot(&h, &self.w_hz) + &self.b_hz).mapv(sigmoid);
            let n = (dot(x, &self.w_in) + &self.b_in + &r * &(dot(&h, &self.w_hn) + &self.b_hn)).mapv(tanh);
            h = &n + &(&z * &(&h - &n));
            let mut y = dot(&h, &self.head_w) + &self.head_b;
            if let Some(ex) = extras {
                y += &dot(&ex[j], &self.head_extra);
            }
            trace.hidden.push(h.clone());
            trace.output.push(y);
        }
        Ok(trace)
    }

    /// Records the recurrence on `tape`, returning one output node per step.
    pub fn run_on_tape(
        &self,
        tape: &mut Tape,
        params: &[Var],
        features: &[Var],
        extras: Option<&[Var]>,
    ) -> Vec<Var> {
        assert_eq!(params.len(), 15);
        let [w_ir, w_iz, w_in, w_hr, w_hz, w_hn, b_ir, b_iz, b_in, b_hr, b_hz, b_hn, head_w, head_extra, head_b] =
            params.try_into().expect("15 parameters");
        let batch = tape.value(features[0]).nrows();
        let mut h = tape.constant(Array2::zeros((batch, self.shape().hidden_dim)));
        let mut outputs = Vec::with_capacity(features.len());
        for (j, &x) in features.iter().enumerate() {
            let gate = |tape: &mut Tape, wi: Var, bi: Var, wh: Var, bh: Var| {
                let a = tape.affine(x, wi, bi);
                let b = tape.affine(h, wh, bh);
                tape.add(a, b)
            };
            let r_pre = gate(tape, w_ir, b_ir, w_hr, b_hr);
            let r = tape.sigmoid(r_pre);
            let z_pre = gate(tape, w_iz, b_iz, w_hz, b_hz);
            let z = tape.sigmoid(z_pre);
            let xn = tape.affine(x, w_in, b_in);
            let hn = tape.affine(h, w_hn, b_hn);
            let rhn = tape.mul(r, hn);
            let n_pre = tape.add(xn, rhn);
            let n = tape.tanh(n_pre);
            let diff = tape.sub(h, n);
            let zd = tape.mul(z, diff);
            h = tape.add(n, zd);
            let mut y = tape.affine(h, head_w, head_b);
            if let Some(ex) = extras {
                let e = tape.matmul(ex[j], head_extra);
                y = tape.add(y, e);
            }
            outputs.push(y);
        }
        outputs
    }
}

impl Parameterized for GruNet {
    fn parameters(&self) -> Vec<&Array2<f64>> {
        vec![
            &self.w_ir,
            &self.w_iz,
            &self.w_in,
            &self.w_hr,
            &self.w_hz,
            &self.w_hn,
            &self.b_ir,
            &self.b_iz,
            &self.b_in,
            &self.b_hr,
            &self.b_hz,
            &self.b_hn,
            &self.head_w,
            &self.head_extra,
            &self.head_b,
        ]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![
            &mut self.w_ir,
            &mut self.w_iz,
            &mut self.w_in,
            &mut self.w_hr,
            &mut self.w_hz,
            &mut self.w_hn,
            &mut self.b_ir,
            &mut self.b_iz,
            &mut self.b_in,
            &mut self.b_hr,
            &mut self.b_hz,
            &mut self.b_hn,
            &mut self.head_w,
            &mut self.head_extra,
            &mut self.head_b,
        ]
    }
}

/// Stacks per-step `batch x 1` outputs into a `batch x steps` matrix.
pub fn stack_steps(outputs: &[Array2<f64>]) -> Array2<f64> {
    let batch = outputs.first().map_or(0, |o| o.nrows());
    let mut out = Array2::zeros((batch, outputs.len()));
    for (j, o) in outputs.iter().enumerate() {
        out.slice_mut(s![.., j]).assign(&o.index_axis(Axis(1), 0));
    }
    out
}
