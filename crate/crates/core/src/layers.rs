use crate::error::Result;
use crate::numerics::init::xavier_with;
use crate::numerics::{Param, Parameterized, Rng, Tape, Tensor, Var};

/// `y = W·x + b` over channel-major tokens; `W` is `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(name: &str, input: usize, output: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            weight: Param::new(format!("{name}.weight"), xavier_with(&[output, input], rng)?),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(vec![output])),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight)?;
        let b = tape.param(&self.bias)?;
        let y = tape.matmul(w, x)?;
        tape.add_column(y, b)
    }

    pub fn macs(&self, tokens: usize) -> u64 {
        (self.input_dim() * self.output_dim() * tokens) as u64
    }

    pub fn zero(&mut self) {
        self.weight.tensor_mut().data_mut().fill(0.0);
        self.bias.tensor_mut().data_mut().fill(0.0);
    }
}

impl Parameterized for Linear {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(name: &str, dims: &[usize], rng: &mut Rng) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, tape: &mut Tape, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, x)?;
            if i < last {
                x = tape.relu(x)?;
            }
        }
        Ok(x)
    }

    pub fn macs(&self, tokens: usize) -> u64 {
        self.layers.iter().map(|l| l.macs(tokens)).sum()
    }
}

impl Parameterized for Mlp {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.layers.iter().for_each(|l| l.visit_params(f));
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.layers.iter_mut().for_each(|l| l.visit_params_mut(f));
    }
}
