//! Parameterised layers shared by the backbones, neck and heads.

use herbs_tensor::{ChaCha8Rng, Init, ParamId, ParamStore, Session, Var};
use serde::{Deserialize, Serialize};

use crate::error::{HerbsError, Result};

/// Pointwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// `x * sigmoid(x)`, a smooth member of the ReLU family.
    #[default]
    Silu,
    Gelu,
    /// Used to make the fusion paths linear in tests.
    Identity,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Silu => x.silu(),
            Activation::Gelu => x.gelu(),
            Activation::Identity => x,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Self::Relu),
            "silu" | "swish" => Ok(Self::Silu),
            "gelu" => Ok(Self::Gelu),
            "identity" | "none" => Ok(Self::Identity),
            other => Err(HerbsError::InvalidConfig(format!("unknown activation `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Silu => "silu",
            Activation::Gelu => "gelu",
            Activation::Identity => "identity",
        }
    }
}

/// Registers parameters under a dotted name prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        ParamBuilder { store: self.store, rng: self.rng, prefix }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        self.store.init(full, shape, init, self.rng)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut ParamBuilder<'_>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let mut s = b.scope(name);
        let fan_in = in_channels * kernel * kernel;
        let weight = s.param("weight", &[out_channels, in_channels, kernel, kernel], Init::KaimingUniform { fan_in });
        let bias = bias.then(|| s.param("bias", &[out_channels], Init::Zeros));
        Self { weight, bias, in_channels, out_channels, kernel, stride, padding }
    }

    pub fn forward<'t>(&self, sess: &Session<'t>, x: Var<'t>) -> Var<'t> {
        x.conv2d(sess.param(self.weight), self.bias.map(|b| sess.param(b)), self.stride, self.padding)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Affine map over the last axis, weight stored as `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let mut s = b.scope(name);
        // Glorot-style bound keeps head logits small at initialisation.
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = s.param("weight", &[in_dim, out_dim], Init::Uniform(bound));
        let bias = bias.then(|| s.param("bias", &[out_dim], Init::Zeros));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<'t>(&self, sess: &Session<'t>, x: Var<'t>) -> Var<'t> {
        let y = x.matmul(sess.param(self.weight));
        match self.bias {
            Some(b) => y.add(sess.param(b)),
            None => y,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(b: &mut ParamBuilder<'_>, name: &str, dim: usize) -> Self {
        let mut s = b.scope(name);
        let gamma = s.param("gamma", &[dim], Init::Constant(1.0));
        let beta = s.param("beta", &[dim], Init::Zeros);
        Self { gamma, beta, dim }
    }

    /// Normalises over the last axis.
    pub fn forward<'t>(&self, sess: &Session<'t>, x: Var<'t>) -> Var<'t> {
        let last = x.shape().len() - 1;
        let centered = x.sub(x.mean_axis_keepdim(last));
        let var = centered.square().mean_axis_keepdim(last);
        let normed = centered.mul(var.add_scalar(Self::EPS).powf(-0.5));
        normed.mul(sess.param(self.gamma)).add(sess.param(self.beta))
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Mean cross-entropy of `logits: [b, c]` against integer labels.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Var<'t> {
    let shape = logits.shape();
    let (b, c) = (shape[0], shape[1]);
    assert_eq!(b, labels.len(), "cross_entropy batch mismatch");
    let mut onehot = herbs_tensor::Tensor::zeros([b, c]);
    for (i, &y) in labels.iter().enumerate() {
        onehot.data_mut()[i * c + y] = 1.0;
    }
    let onehot = logits.tape().constant(onehot);
    logits.log_softmax().mul(onehot).sum().scale(-1.0 / b as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use herbs_tensor::{Tape, Tensor};
    use rand::SeedableRng;

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_c() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros([3, 7]));
        let l = cross_entropy(logits, &[0, 3, 6]).item();
        assert!((l - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_output_is_standardised() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ln = LayerNorm::new(&mut ParamBuilder::new(&mut store, &mut rng), "ln", 4);
        let tape = Tape::new();
        let sess = Session::new(&tape, &store);
        let y = ln.forward(&sess, tape.constant(Tensor::new([2, 4], vec![1., 2., 3., 4., -3., 0., 3., 6.]))).value();
        for r in 0..2 {
            let row = y.row(r);
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn scoped_names_are_dotted() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let mut neck = b.scope("neck");
        Conv2d::new(&mut neck.scope("lateral0"), "conv", 2, 3, 1, 1, 0, true);
        assert!(store.id_of("neck.lateral0.conv.weight").is_some());
        assert!(store.id_of("neck.lateral0.conv.bias").is_some());
    }
}
