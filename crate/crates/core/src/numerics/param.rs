use super::tensor::Tensor;

/// A named trainable tensor. Names are unique within a model and double as
/// keys in weight files and on the gradient tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    name: String,
    tensor: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, mut tensor: Tensor) -> Self {
        tensor.set_requires_grad(true);
        Self {
            name: name.into(),
            tensor,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn numel(&self) -> usize {
        self.tensor.len()
    }
}

/// Uniform access to every parameter of a block, in a fixed order.
pub trait Parameterized {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |p| names.push(p.name().to_string()));
        names
    }
}
