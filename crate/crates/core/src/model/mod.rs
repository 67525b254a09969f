//! The video classifier: difference attention (TSA), the per-frame feature
//! network (FPN), a convolutional LSTM over time and a non-local
//! classification head.

mod blocks;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use blocks::{
    model_forward, predict_score, ConvLstmState, ConvLstmStep, ForwardOutput, Mode, Net,
};

/// Output non-linearity of the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// One unit, sigmoid score.
    Sigmoid,
    /// Two units, softmax over (posed, spontaneous).
    Softmax,
}

impl HeadKind {
    pub fn units(self) -> usize {
        match self {
            HeadKind::Sigmoid => 1,
            HeadKind::Softmax => 2,
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(HeadKind::Sigmoid),
            "softmax" => Ok(HeadKind::Softmax),
            other => Err(Error::Argument(format!("unknown head `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub resolution: usize,
    pub fpn_channels: [usize; 2],
    pub convlstm_hidden: usize,
    pub convlstm_kernel: usize,
    pub head_conv_channels: usize,
    /// Side of the valid-padding convolution in the head.
    pub head_conv_kernel: usize,
    /// Embedding width inside the non-local block; `None` means half the
    /// hidden width.
    pub nonlocal_bottleneck: Option<usize>,
    pub use_tsa: bool,
    pub head: HeadKind,
    pub dropout_p: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            resolution: 48,
            fpn_channels: [16, 32],
            convlstm_hidden: 32,
            convlstm_kernel: 3,
            head_conv_channels: 64,
            head_conv_kernel: 2,
            nonlocal_bottleneck: None,
            use_tsa: true,
            head: HeadKind::Sigmoid,
            dropout_p: 0.5,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

/// Side of the per-frame convolutions (TSA and FPN).
pub const FRAME_CONV_KERNEL: usize = 3;

impl ModelConfig {
    /// A tiny configuration (8×8 frames, narrow channels) for exhaustive
    /// gradient checks.
    pub fn micro() -> Self {
        Self {
            in_channels: 2,
            resolution: 8,
            fpn_channels: [3, 4],
            convlstm_hidden: 4,
            convlstm_kernel: 3,
            head_conv_channels: 3,
            head_conv_kernel: 1,
            nonlocal_bottleneck: Some(2),
            ..Self::default()
        }
    }

    pub fn tsa_channels(&self) -> usize {
        self.in_channels
    }

    pub fn bottleneck(&self) -> usize {
        self.nonlocal_bottleneck
            .unwrap_or(self.convlstm_hidden / 2)
    }

    /// Spatial side of the FPN output and the recurrent state.
    pub fn state_extent(&self) -> usize {
        self.resolution / 4
    }

    /// Spatial side after the head's 2×2 pooling.
    pub fn pooled_extent(&self) -> usize {
        self.state_extent() / 2
    }

    /// Spatial side after the head convolution.
    pub fn head_extent(&self) -> usize {
        (self.pooled_extent() + 1).saturating_sub(self.head_conv_kernel)
    }

    pub fn embedding_dim(&self) -> usize {
        self.head_conv_channels * self.head_extent() * self.head_extent()
    }

    pub fn min_frames(&self) -> usize {
        if self.use_tsa {
            2
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let channels = [
            self.in_channels,
            self.fpn_channels[0],
            self.fpn_channels[1],
            self.convlstm_hidden,
            self.head_conv_channels,
        ];
        if channels.contains(&0) {
            return bad("all channel counts must be at least 1".into());
        }
        if self.bottleneck() < 1 {
            return bad("non-local bottleneck must be at least 1".into());
        }
        if self.resolution == 0 || self.resolution % 4 != 0 {
            return bad(format!("resolution {} is not divisible by 4", self.resolution));
        }
        if self.state_extent() % 2 != 0 {
            return bad(format!(
                "feature extent {} is not divisible by the head pool",
                self.state_extent()
            ));
        }
        if self.convlstm_kernel % 2 == 0 {
            return bad("ConvLSTM kernel must be odd for same padding".into());
        }
        if self.head_conv_kernel == 0 || self.head_extent() == 0 {
            return bad(format!(
                "head convolution {k}x{k} does not fit the pooled {p}x{p} map",
                k = self.head_conv_kernel,
                p = self.pooled_extent()
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout probability {} not in [0, 1)", self.dropout_p));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("batch-norm eps must be positive and momentum in [0, 1]".into());
        }
        Ok(())
    }

    /// Every parameter with its shape and role, in canonical order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        let c = self.in_channels;
        let [f1, f2] = self.fpn_channels;
        let h = self.convlstm_hidden;
        let b = self.bottleneck();
        let k = FRAME_CONV_KERNEL;

        let mut conv = |name: &str, o: usize, i: usize, kh: usize| {
            out.push(ParamSpec::new(format!("{name}.weight"), vec![o, i, kh, kh], ParamRole::Weight { fan_in: i * kh * kh }));
            out.push(ParamSpec::new(format!("{name}.bias"), vec![o], ParamRole::Bias));
        };
        if self.use_tsa {
            conv("tsa.conv", c, c, k);
        }
        conv("fpn.block1.conv", f1, c, k);
        conv("fpn.block2.conv", f2, f1, k);
        for gate in LSTM_GATES {
            conv(&format!("lstm.{gate}"), h, f2 + h, self.convlstm_kernel);
        }
        for emb in ["theta", "phi", "g"] {
            conv(&format!("nl.{emb}"), b, h, 1);
        }
        conv("nl.z", h, b, 1);
        conv("head.conv", self.head_conv_channels, h, self.head_conv_kernel);

        let mut bn = |name: &str, ch: usize| {
            for (suffix, role) in [
                ("gamma", ParamRole::BnGamma),
                ("beta", ParamRole::BnBeta),
                ("running_mean", ParamRole::RunningMean),
                ("running_var", ParamRole::RunningVar),
            ] {
                out.push(ParamSpec::new(format!("{name}.{suffix}"), vec![ch], role));
            }
        };
        bn("fpn.block1.bn", f1);
        bn("fpn.block2.bn", f2);
        bn("head.bn", self.head_conv_channels);

        let e = self.embedding_dim();
        out.push(ParamSpec::new("head.fc.weight".into(), vec![e, self.head.units()], ParamRole::Weight { fan_in: e }));
        out.push(ParamSpec::new("head.fc.bias".into(), vec![self.head.units()], ParamRole::Bias));
        out
    }
}

/// Gate order of the fused ConvLSTM convolution.
pub const LSTM_GATES: [&str; 4] = ["i", "f", "o", "g"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight { fan_in: usize },
    Bias,
    BnGamma,
    BnBeta,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    /// Whether the optimizer updates this tensor.
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }

    /// Whether weight decay applies (conv and dense kernels only).
    pub fn decays(self) -> bool {
        matches!(self, ParamRole::Weight { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

impl ParamSpec {
    fn new(name: String, shape: Vec<usize>, role: ParamRole) -> Self {
        Self { name, shape, role }
    }
}

/// Named parameter tensors of one network, including batch-norm running
/// statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Uniform Kaiming initialization for conv kernels, `U(±1/√fan_in)` for the
/// final dense layer so initial scores sit near 0.5, zero biases, identity
/// batch norm.
pub fn init_params<T: Real, R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut tensors = BTreeMap::new();
    for spec in config.param_specs() {
        let t = match spec.role {
            ParamRole::Weight { fan_in } => {
                let bound = if spec.name == "head.fc.weight" {
                    (1.0 / fan_in as f64).sqrt()
                } else {
                    (6.0 / fan_in as f64).sqrt()
                };
                Tensor::rand_uniform(&spec.shape, -bound, bound, rng)
            }
            ParamRole::Bias | ParamRole::BnBeta | ParamRole::RunningMean => Tensor::zeros(&spec.shape),
            ParamRole::BnGamma | ParamRole::RunningVar => Tensor::ones(&spec.shape),
        };
        tensors.insert(spec.name, t);
    }
    Ok(ModelParams { tensors })
}

impl<T: Real> ModelParams<T> {
    /// Assembles parameters from named tensors, checking them against `config`.
    pub fn from_tensors(config: &ModelConfig, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let params = Self { tensors };
        params.check(config)?;
        Ok(params)
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        let specs = config.param_specs();
        if specs.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for spec in specs {
            let t = self.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {} has shape {:?}, configuration needs {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn into_tensors(self) -> BTreeMap<String, Tensor<T>> {
        self.tensors
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_config_is_valid_and_shapes_follow() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.state_extent(), 12);
        assert_eq!(c.pooled_extent(), 6);
        assert_eq!(c.head_extent(), 5);
        assert_eq!(c.embedding_dim(), 25 * 64);
        assert_eq!(c.bottleneck(), 16);
        ModelConfig::micro().validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            ModelConfig { resolution: 50, ..Default::default() },
            ModelConfig { resolution: 44, ..Default::default() },
            ModelConfig { nonlocal_bottleneck: Some(0), ..Default::default() },
            ModelConfig { fpn_channels: [0, 32], ..Default::default() },
            ModelConfig { resolution: 8, ..Default::default() },
            ModelConfig { dropout_p: 1.0, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let c = ModelConfig::default();
        let a: ModelParams<f32> = init_params(&c, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b: ModelParams<f32> = init_params(&c, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
        a.check(&c).unwrap();
        for spec in c.param_specs() {
            let t = a.get(&spec.name).unwrap();
            match spec.role {
                ParamRole::Bias | ParamRole::BnBeta | ParamRole::RunningMean => {
                    assert!(t.data().iter().all(|&v| v == 0.0), "{}", spec.name)
                }
                ParamRole::BnGamma | ParamRole::RunningVar => {
                    assert!(t.data().iter().all(|&v| v == 1.0))
                }
                ParamRole::Weight { .. } => {}
            }
        }
    }

    #[test]
    fn kaiming_variance() {
        let c = ModelConfig::default();
        let p: ModelParams<f64> = init_params(&c, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for spec in c.param_specs() {
            let ParamRole::Weight { fan_in } = spec.role else { continue };
            let w = p.get(&spec.name).unwrap().data();
            if w.len() < 10_000 {
                continue;
            }
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
            let target = 2.0 / fan_in as f64;
            assert!((var / target - 1.0).abs() < 0.2, "{}: {var} vs {target}", spec.name);
        }
        let fc = p.get("head.fc.weight").unwrap();
        let bound = 1.0 / (c.embedding_dim() as f64).sqrt();
        assert!(fc.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn gate_kernels_see_input_and_hidden() {
        let c = ModelConfig::default();
        let specs = c.param_specs();
        let w = specs.iter().find(|s| s.name == "lstm.f.weight").unwrap();
        assert_eq!(w.shape, vec![32, 32 + 32, 3, 3]);
        let no_tsa = ModelConfig { use_tsa: false, ..c };
        assert!(no_tsa.param_specs().iter().all(|s| !s.name.starts_with("tsa")));
    }
}
