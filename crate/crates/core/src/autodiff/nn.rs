//! Small building blocks on top of the tape: dense layers, MLPs and
//! scaled dot-product attention.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent f64 math shadows it when std is linked
use num_traits::Float;
use rand::Rng;

use super::{AutodiffError, ParameterSet, Tape, Tensor, Var};

/// Hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var, AutodiffError> {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

/// Which parameter set a forward pass reads, and whether gradients reach it.
#[derive(Clone, Copy)]
pub struct Bind<'a> {
    params: &'a ParameterSet,
    trainable: bool,
}

impl<'a> Bind<'a> {
    pub fn live(params: &'a ParameterSet) -> Self {
        Self {
            params,
            trainable: true,
        }
    }

    pub fn frozen(params: &'a ParameterSet) -> Self {
        Self {
            params,
            trainable: false,
        }
    }

    pub fn get(&self, tape: &mut Tape, name: &str) -> Result<Var, AutodiffError> {
        if self.trainable {
            tape.param(self.params, name)
        } else {
            tape.frozen_param(self.params, name)
        }
    }
}

/// `y = x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(prefix: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: format!("{prefix}/w"),
            bias: format!("{prefix}/b"),
            fan_in,
            fan_out,
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParameterSet, rng: &mut R) {
        let a = (6.0 / (self.fan_in + self.fan_out) as f64).sqrt();
        let w: Vec<f64> = (0..self.fan_in * self.fan_out)
            .map(|_| rng.random_range(-a..a))
            .collect();
        params.insert(
            self.weight.clone(),
            Tensor::new(alloc::vec![self.fan_in, self.fan_out], w).expect("linear shape"),
        );
        params.insert(self.bias.clone(), Tensor::zeros(&[1, self.fan_out]));
    }

    pub fn init_zero(&self, params: &mut ParameterSet) {
        params.insert(self.weight.clone(), Tensor::zeros(&[self.fan_in, self.fan_out]));
        params.insert(self.bias.clone(), Tensor::zeros(&[1, self.fan_out]));
    }

    pub fn forward(&self, tape: &mut Tape, bind: Bind<'_>, x: Var) -> Result<Var, AutodiffError> {
        let w = bind.get(tape, &self.weight)?;
        let b = bind.get(tape, &self.bias)?;
        let xw = tape.matmul(x, w)?;
        tape.add_bias(xw, b)
    }
}

/// Stack of linear layers with an activation between them (none after the
/// last layer).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `sizes = [input, hidden.., output]`.
    pub fn new(prefix: &str, sizes: &[usize], activation: Activation) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&format!("{prefix}/{i}"), w[0], w[1]))
            .collect();
        Self { layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.fan_out).unwrap_or(0)
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParameterSet, rng: &mut R) {
        for l in &self.layers {
            l.init(params, rng);
        }
    }

    /// Glorot init for hidden layers, zeros for the output layer.
    pub fn init_zero_head<R: Rng + ?Sized>(&self, params: &mut ParameterSet, rng: &mut R) {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            if i + 1 == n {
                l.init_zero(params);
            } else {
                l.init(params, rng);
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: Bind<'_>, x: Var) -> Result<Var, AutodiffError> {
        let mut h = x;
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, bind, h)?;
            if i + 1 < n {
                h = self.activation.apply(tape, h)?;
            }
        }
        Ok(h)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }
}

/// `softmax(scale * q k^T) v` for `q: nq x d`, `k: nk x d`, `v: nk x dv`.
pub fn attend(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    scale: f64,
) -> Result<Var, AutodiffError> {
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, scale)?;
    let weights = tape.softmax(logits)?;
    tape.matmul(weights, v)
}
