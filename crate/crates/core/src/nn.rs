//! Parameter containers and the small layers everything else is built from.

use tecswin_tensor::{Result, Rng, Tensor, TensorError, DEFAULT_LN_EPS};

/// Something that owns named trainable tensors.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Module for Tensor {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(prefix, self)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(prefix, self)
    }
}

impl<M: Module> Module for Vec<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<M: Module> Module for Option<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        if let Some(m) = self {
            m.visit(prefix, f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        if let Some(m) = self {
            m.visit_mut(prefix, f);
        }
    }
}

/// Implements [`Module`] by visiting the listed fields in order.
macro_rules! impl_module {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::nn::Module for $ty {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &tecswin_tensor::Tensor)) {
                $( $crate::nn::Module::visit(&self.$field, &$crate::nn::join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut tecswin_tensor::Tensor)) {
                $( $crate::nn::Module::visit_mut(&mut self.$field, &$crate::nn::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use impl_module;

pub(crate) fn param(t: Tensor) -> Tensor {
    t.requires_grad_leaf()
}

/// `y = x W + b` over the last axis; also the 1x1 convolution on
/// channels-last feature maps.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}
impl_module!(Linear { weight, bias });

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (input as f32).sqrt();
        Self {
            weight: param(Tensor::rand_uniform(&[input, output], -bound, bound, rng)),
            bias: Some(param(Tensor::zeros(&[output]))),
        }
    }

    pub fn no_bias(input: usize, output: usize, rng: &mut Rng) -> Self {
        let mut l = Self::new(input, output, rng);
        l.bias = None;
        l
    }

    pub fn from_weights(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self {
            weight: param(weight),
            bias: bias.map(param),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn out_features(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.linear(&self.weight, self.bias.as_ref())
    }
}

/// Per-pixel linear map on `[B,H,W,Cin]` with `w: [Cin,Cout]`, `b: [Cout]`.
pub fn conv_1x1(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(TensorError::Dimension {
            op: "conv_1x1",
            msg: format!("expected [B,H,W,C], got {:?}", x.shape()),
        });
    }
    x.linear(w, Some(b))
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}
impl_module!(LayerNorm { gamma, beta });

impl LayerNorm {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: param(Tensor::ones(&[c])),
            beta: param(Tensor::zeros(&[c])),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, DEFAULT_LN_EPS)
    }
}

/// Two-layer perceptron with GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}
impl_module!(Mlp { fc1, fc2 });

impl Mlp {
    pub fn new(c: usize, ratio: usize, rng: &mut Rng) -> Self {
        Self {
            fc1: Linear::new(c, c * ratio, rng),
            fc2: Linear::new(c * ratio, c, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.fc1.out_features()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu())
    }
}

/// Replaces every parameter with the same-named entry of `source`.
pub fn load_parameters<M: Module + ?Sized>(
    module: &mut M,
    source: &std::collections::BTreeMap<String, Tensor>,
) -> std::result::Result<(), String> {
    let mut err = None;
    let mut seen = 0usize;
    module.visit_mut("", &mut |name, t| {
        if err.is_some() {
            return;
        }
        match source.get(name) {
            Some(s) if s.shape() == t.shape() => {
                *t = s.requires_grad_leaf();
                seen += 1;
            }
            Some(s) => {
                err = Some(format!(
                    "parameter {name}: shape {:?} in checkpoint, {:?} in model",
                    s.shape(),
                    t.shape()
                ))
            }
            None => err = Some(format!("parameter {name} missing from checkpoint")),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if seen != source.len() {
        return Err(format!(
            "checkpoint holds {} tensors, model has {seen}",
            source.len()
        ));
    }
    Ok(())
}
