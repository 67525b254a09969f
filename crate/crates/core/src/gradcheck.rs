//! Finite-difference verification of every differentiable operation and of
//! the assembled network.
//!
//! Each case draws its inputs once, records the operation on a tape and
//! seeds the reverse pass with a fixed random cotangent `w`, so the checked
//! scalar is `sum(w * f(x))`. Numeric gradients always come from the
//! double-precision forward pass.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{init_params, Mode, ModelConfig, ModelParams, Net};
use crate::tensor::{
    allclose, finite_diff_grad, max_rel_error, ActivationKind, BatchNormMode, BinaryKind, Real, Tape,
    Tensor, Tolerance, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Double,
    Single,
}

impl Precision {
    pub fn tolerance(self) -> Tolerance {
        match self {
            Precision::Double => Tolerance::DOUBLE,
            Precision::Single => Tolerance::SINGLE,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "double" => Ok(Precision::Double),
            "single" => Ok(Precision::Single),
            _ => Err(Error::Argument(format!("unknown precision `{s}` (expected double or single)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub precision: Precision,
    /// Name of a case whose analytic gradient is deliberately scaled by
    /// 1.01, to confirm the harness notices a wrong backward rule.
    pub perturb: Option<String>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            precision: Precision::Double,
            perturb: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub passed: bool,
    /// Number of checked scalar inputs.
    pub size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Case {
    Add,
    Sub,
    Hadamard,
    ChannelBroadcast,
    Conv2d,
    Conv2dStrided,
    AvgPool,
    Relu,
    Sigmoid,
    Tanh,
    Concat,
    Slice,
    BatchNormTrain,
    BatchNormEval,
    Dropout,
    Affine,
    Matmul,
    Transpose,
    Reshape,
    Softmax,
    Sum,
    Mean,
    Scale,
    WeightedBce,
    Tsa,
    Fpn,
    ConvLstmStep,
    NonLocal,
    Classify,
    MicroModel,
    MicroModelTrain,
}

const CASES: [Case; 31] = [
    Case::Add,
    Case::Sub,
    Case::Hadamard,
    Case::ChannelBroadcast,
    Case::Conv2d,
    Case::Conv2dStrided,
    Case::AvgPool,
    Case::Relu,
    Case::Sigmoid,
    Case::Tanh,
    Case::Concat,
    Case::Slice,
    Case::BatchNormTrain,
    Case::BatchNormEval,
    Case::Dropout,
    Case::Affine,
    Case::Matmul,
    Case::Transpose,
    Case::Reshape,
    Case::Softmax,
    Case::Sum,
    Case::Mean,
    Case::Scale,
    Case::WeightedBce,
    Case::Tsa,
    Case::Fpn,
    Case::ConvLstmStep,
    Case::NonLocal,
    Case::Classify,
    Case::MicroModel,
    Case::MicroModelTrain,
];

impl Case {
    fn name(self) -> &'static str {
        match self {
            Case::Add => "add",
            Case::Sub => "sub",
            Case::Hadamard => "hadamard",
            Case::ChannelBroadcast => "channel_broadcast",
            Case::Conv2d => "conv2d",
            Case::Conv2dStrided => "conv2d_strided",
            Case::AvgPool => "avg_pool2d",
            Case::Relu => "relu",
            Case::Sigmoid => "sigmoid",
            Case::Tanh => "tanh",
            Case::Concat => "concat",
            Case::Slice => "slice",
            Case::BatchNormTrain => "batch_norm_train",
            Case::BatchNormEval => "batch_norm_eval",
            Case::Dropout => "dropout",
            Case::Affine => "affine",
            Case::Matmul => "matmul",
            Case::Transpose => "transpose",
            Case::Reshape => "reshape",
            Case::Softmax => "softmax",
            Case::Sum => "sum",
            Case::Mean => "mean",
            Case::Scale => "scale",
            Case::WeightedBce => "weighted_bce",
            Case::Tsa => "tsa",
            Case::Fpn => "fpn",
            Case::ConvLstmStep => "convlstm_step",
            Case::NonLocal => "nonlocal",
            Case::Classify => "classify",
            Case::MicroModel => "micro_model",
            Case::MicroModelTrain => "micro_model_train",
        }
    }

    fn model_config(self) -> Option<ModelConfig> {
        match self {
            Case::Tsa | Case::Fpn | Case::ConvLstmStep | Case::NonLocal | Case::Classify | Case::MicroModel => {
                Some(ModelConfig::micro())
            }
            // A 1×1 head map cannot be batch-normalized in train mode, so the
            // train-mode network check uses a larger frame.
            Case::MicroModelTrain => Some(ModelConfig {
                resolution: 16,
                ..ModelConfig::micro()
            }),
            _ => None,
        }
    }

    /// Parameter prefixes that take part in a block-level check.
    fn param_prefixes(self) -> &'static [&'static str] {
        match self {
            Case::Tsa => &["tsa."],
            Case::Fpn => &["fpn."],
            Case::ConvLstmStep => &["lstm."],
            Case::NonLocal => &["nl."],
            Case::Classify => &["nl.", "head."],
            Case::MicroModel | Case::MicroModelTrain => &[""],
            _ => &[],
        }
    }
}

/// Names of every check in report order.
pub fn case_names() -> Vec<&'static str> {
    CASES.iter().map(|c| c.name()).collect()
}

/// Values bounded away from zero, for kinks such as ReLU.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::rand_uniform(shape, lo, hi, rng)
}

/// Everything a case needs besides the checked tensors.
struct Fixture {
    case: Case,
    /// Checked tensors: explicit inputs first, then named parameters.
    checked: Vec<Tensor<f64>>,
    /// Non-checked operands (running statistics, clip, targets, ...).
    fixed: Vec<Tensor<f64>>,
    model: Option<(ModelConfig, ModelParams<f64>, Vec<String>)>,
}

impl Fixture {
    fn new(case: Case, rng: &mut ChaCha8Rng) -> Result<Self> {
        let u = |s: &[usize], rng: &mut ChaCha8Rng| uniform(s, -1.0, 1.0, rng);
        let mut fixed = Vec::new();
        let checked = match case {
            Case::Add | Case::Sub | Case::Hadamard => vec![u(&[2, 3, 4], rng), u(&[2, 3, 4], rng)],
            Case::ChannelBroadcast => vec![u(&[2, 3, 2, 2], rng), u(&[3], rng)],
            Case::Conv2d => vec![u(&[2, 3, 5, 5], rng), u(&[4, 3, 3, 3], rng), u(&[4], rng)],
            Case::Conv2dStrided => vec![u(&[1, 2, 6, 5], rng), u(&[3, 2, 2, 2], rng), u(&[3], rng)],
            Case::AvgPool => vec![u(&[2, 2, 4, 6], rng)],
            Case::Relu => vec![away_from_zero(&[3, 4, 2], rng)],
            Case::Sigmoid | Case::Tanh => vec![uniform(&[3, 4], -3.0, 3.0, rng)],
            Case::Concat => vec![u(&[2, 3, 2, 2], rng), u(&[2, 1, 2, 2], rng)],
            Case::Slice => vec![u(&[2, 5, 3], rng)],
            Case::BatchNormTrain => vec![u(&[3, 2, 2, 3], rng), uniform(&[2], 0.5, 1.5, rng), u(&[2], rng)],
            Case::BatchNormEval => {
                fixed.push(u(&[2], rng));
                fixed.push(uniform(&[2], 0.5, 2.0, rng));
                vec![u(&[3, 2, 2, 3], rng), uniform(&[2], 0.5, 1.5, rng), u(&[2], rng)]
            }
            Case::Dropout => vec![u(&[4, 5], rng)],
            Case::Affine => vec![u(&[3, 4], rng), u(&[4, 2], rng), u(&[2], rng)],
            Case::Matmul => vec![u(&[2, 3, 4], rng), u(&[2, 4, 5], rng)],
            Case::Transpose | Case::Reshape => vec![u(&[2, 3, 4], rng)],
            Case::Softmax => vec![uniform(&[2, 3, 4], -2.0, 2.0, rng)],
            Case::Sum | Case::Mean | Case::Scale => vec![u(&[3, 4], rng)],
            Case::WeightedBce => {
                fixed.push(Tensor::new(vec![4], vec![1.0, 0.0, 1.0, 0.0])?);
                vec![uniform(&[4], 0.05, 0.95, rng)]
            }
            _ => Vec::new(),
        };
        let model = case.model_config().map(|cfg| -> Result<_> {
            let mut params: ModelParams<f64> = init_params(&cfg, rng)?;
            // Non-trivial biases, affine batch-norm terms and running stats.
            for (name, t) in params.iter_mut() {
                let shape = t.shape().to_vec();
                if name.ends_with(".bias") || name.ends_with(".beta") {
                    *t = uniform(&shape, -0.3, 0.3, rng);
                } else if name.ends_with(".gamma") || name.ends_with(".running_var") {
                    *t = uniform(&shape, 0.6, 1.4, rng);
                } else if name.ends_with(".running_mean") {
                    *t = uniform(&shape, -0.2, 0.2, rng);
                }
            }
            let names: Vec<String> = cfg
                .param_specs()
                .into_iter()
                .filter(|s| s.role.trainable() && case.param_prefixes().iter().any(|p| s.name.starts_with(p)))
                .map(|s| s.name)
                .collect();
            Ok((cfg, params, names))
        });
        let model = model.transpose()?;
        let mut checked = checked;
        if let Some((cfg, params, names)) = &model {
            let r = cfg.resolution;
            let c = cfg.in_channels;
            let s = cfg.state_extent();
            let h = cfg.convlstm_hidden;
            match case {
                Case::Tsa => {
                    checked.push(uniform(&[2, c, r, r], 0.0, 1.0, rng));
                    checked.push(uniform(&[2, c, r, r], 0.0, 1.0, rng));
                }
                Case::Fpn => checked.push(uniform(&[3, c, r, r], 0.0, 1.0, rng)),
                Case::ConvLstmStep => {
                    checked.push(away_from_zero(&[1, cfg.fpn_channels[1], s, s], rng).map(f64::abs));
                    checked.push(u(&[1, h, s, s], rng));
                    checked.push(u(&[1, h, s, s], rng));
                }
                Case::NonLocal | Case::Classify => checked.push(u(&[1, h, s, s], rng)),
                Case::MicroModel => fixed.push(uniform(&[2, c, r, r], 0.0, 1.0, rng)),
                // Two clips of different lengths share the batch statistics.
                Case::MicroModelTrain => {
                    fixed.push(uniform(&[2, c, r, r], 0.0, 1.0, rng));
                    fixed.push(uniform(&[3, c, r, r], 0.0, 1.0, rng));
                }
                _ => {}
            }
            for n in names {
                checked.push(params.get(n)?.clone());
            }
        }
        Ok(Self {
            case,
            checked,
            fixed,
            model,
        })
    }

    /// Records the case on `tape`, returning the output and the leaves of
    /// the checked tensors in order.
    fn record<T: Real>(&self, tape: &mut Tape<T>, checked: &[Tensor<T>]) -> Result<(Var, Vec<Var>)> {
        if let Some((cfg, base, names)) = &self.model {
            return self.record_model(tape, checked, cfg, base, names);
        }
        let leaves = checked
            .iter()
            .map(|t| tape.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let x = leaves[0];
        let fixed: Vec<Tensor<T>> = self.fixed.iter().map(|t| t.cast()).collect();
        let out = match self.case {
            Case::Add => tape.ew_binary(x, leaves[1], BinaryKind::Add)?,
            Case::Sub => tape.ew_binary(x, leaves[1], BinaryKind::Sub)?,
            Case::Hadamard | Case::ChannelBroadcast => tape.ew_binary(x, leaves[1], BinaryKind::Hadamard)?,
            Case::Conv2d => tape.conv2d(x, leaves[1], Some(leaves[2]), 1, 1)?,
            Case::Conv2dStrided => tape.conv2d(x, leaves[1], Some(leaves[2]), 2, 1)?,
            Case::AvgPool => tape.avg_pool2d(x, 2, 2)?,
            Case::Relu => tape.activation(x, ActivationKind::Relu)?,
            Case::Sigmoid => tape.activation(x, ActivationKind::Sigmoid)?,
            Case::Tanh => tape.activation(x, ActivationKind::Tanh)?,
            Case::Concat => tape.concat(&[x, leaves[1]], 1)?,
            Case::Slice => tape.slice(x, 1, 1, 3)?,
            Case::BatchNormTrain => {
                let eps = T::from_f64_lossy(1e-5);
                tape.batch_norm2d(x, leaves[1], leaves[2], BatchNormMode::Train, eps)?.0
            }
            Case::BatchNormEval => {
                let mode = BatchNormMode::Eval {
                    running_mean: Some(&fixed[0]),
                    running_var: Some(&fixed[1]),
                };
                tape.batch_norm2d(x, leaves[1], leaves[2], mode, T::from_f64_lossy(1e-5))?.0
            }
            Case::Dropout => {
                let mut rng = ChaCha8Rng::seed_from_u64(17);
                tape.dropout(x, 0.4, true, &mut rng)?
            }
            Case::Affine => tape.affine(x, leaves[1], leaves[2])?,
            Case::Matmul => tape.matmul(x, leaves[1])?,
            Case::Transpose => tape.transpose(x)?,
            Case::Reshape => tape.reshape(x, &[4, 6])?,
            Case::Softmax => tape.softmax(x, 1)?,
            Case::Sum => tape.sum(x)?,
            Case::Mean => tape.mean(x)?,
            Case::Scale => tape.scale(x, T::from_f64_lossy(-1.7))?,
            Case::WeightedBce => {
                let w = |v: f64| T::from_f64_lossy(v);
                tape.weighted_bce(x, fixed[0].data(), w(0.6), w(1.4), w(1e-7))?
            }
            _ => unreachable!("model cases are handled above"),
        };
        Ok((out, leaves))
    }

    fn record_model<T: Real>(
        &self,
        tape: &mut Tape<T>,
        checked: &[Tensor<T>],
        cfg: &ModelConfig,
        base: &ModelParams<f64>,
        names: &[String],
    ) -> Result<(Var, Vec<Var>)> {
        let n_inputs = checked.len() - names.len();
        let mut params: ModelParams<T> = base.cast();
        for (name, t) in names.iter().zip(&checked[n_inputs..]) {
            *params.get_mut(name)? = t.clone();
        }
        let mode = if self.case == Case::MicroModelTrain {
            Mode::Train
        } else {
            Mode::Eval
        };
        let mut net = Net::bind(tape, cfg, &params, mode, true)?;
        let inputs = checked[..n_inputs]
            .iter()
            .map(|t| tape.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let out = match self.case {
            Case::Tsa => net.tsa(tape, inputs[0], inputs[1])?,
            Case::Fpn => net.fpn(tape, inputs[0])?,
            Case::ConvLstmStep => {
                let gates = net.fused_gates(tape)?;
                let state = crate::model::ConvLstmState {
                    h: inputs[1],
                    c: inputs[2],
                };
                net.convlstm_step(tape, inputs[0], state, gates)?.state.h
            }
            Case::NonLocal => net.nonlocal(tape, inputs[0])?,
            Case::Classify => net.classify(tape, inputs[0], &mut rng)?.0,
            Case::MicroModel | Case::MicroModelTrain => {
                let clips: Vec<Tensor<T>> = self.fixed.iter().map(|t| t.cast()).collect();
                net.forward_batch(tape, &clips, &mut rng)?.score
            }
            _ => unreachable!("operation cases are handled by record"),
        };
        let mut leaves = inputs;
        for name in names {
            leaves.push(net.var(name)?);
        }
        Ok((out, leaves))
    }
}

fn flatten(ts: &[Tensor<f64>]) -> Tensor<f64> {
    let data: Vec<f64> = ts.iter().flat_map(|t| t.data().iter().copied()).collect();
    let n = data.len();
    Tensor::new(vec![n], data).expect("checked tensors are non-empty")
}

fn unflatten(flat: &Tensor<f64>, like: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
    let mut at = 0;
    like.iter()
        .map(|t| {
            let part = flat.data()[at..at + t.len()].to_vec();
            at += t.len();
            Tensor::new(t.shape().to_vec(), part).expect("shape preserved")
        })
        .collect()
}

fn analytic<T: Real>(fx: &Fixture, checked: &[Tensor<f64>], cot: &Tensor<f64>) -> Result<Vec<f64>> {
    let mut tape = Tape::<T>::new();
    let cast: Vec<Tensor<T>> = checked.iter().map(|t| t.cast()).collect();
    let (out, leaves) = fx.record(&mut tape, &cast)?;
    tape.backward_with(out, cot.cast())?;
    let mut grads = Vec::new();
    for (leaf, t) in leaves.iter().zip(checked) {
        match tape.grad(*leaf) {
            Some(g) => grads.extend(g.data().iter().map(|v| v.as_f64())),
            None => grads.extend(std::iter::repeat_n(0.0, t.len())),
        }
    }
    Ok(grads)
}

fn check_case(case: Case, opts: &GradcheckOptions) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (case as u64).wrapping_mul(0x9e37_79b9));
    let mut fx = Fixture::new(case, &mut rng)?;
    if opts.precision == Precision::Single {
        // Evaluate both sides at values representable in single precision.
        for t in fx.checked.iter_mut().chain(fx.fixed.iter_mut()) {
            *t = t.cast::<f32>().cast();
        }
    }
    let out_shape = {
        let mut tape = Tape::<f64>::new();
        let (out, _) = fx.record(&mut tape, &fx.checked)?;
        tape.shape(out).to_vec()
    };
    let cot = uniform(&out_shape, -1.0, 1.0, &mut rng);
    let mut grads = match opts.precision {
        Precision::Double => analytic::<f64>(&fx, &fx.checked, &cot)?,
        Precision::Single => analytic::<f32>(&fx, &fx.checked, &cot)?,
    };
    if opts.perturb.as_deref() == Some(case.name()) {
        grads.iter_mut().for_each(|g| *g *= 1.01);
    }
    let flat = flatten(&fx.checked);
    let like = fx.checked.clone();
    let mut failure = None;
    let numeric = finite_diff_grad(
        |x| {
            let parts = unflatten(x, &like);
            let mut tape = Tape::<f64>::new();
            match fx.record(&mut tape, &parts) {
                Ok((out, _)) => tape.value(out).data().iter().zip(cot.data()).map(|(a, b)| a * b).sum(),
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &flat,
        1e-6,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let tol = opts.precision.tolerance();
    Ok(CheckReport {
        name: case.name(),
        max_rel_error: max_rel_error(&grads, numeric.data(), tol),
        passed: allclose(&grads, numeric.data(), tol),
        size: flat.len(),
    })
}

/// Runs every check once, in [`case_names`] order.
pub fn run_suite(opts: &GradcheckOptions) -> Result<Vec<CheckReport>> {
    if let Some(p) = &opts.perturb {
        if !case_names().contains(&p.as_str()) {
            return Err(Error::Argument(format!("unknown gradcheck case `{p}`")));
        }
    }
    CASES.iter().map(|&c| check_case(c, opts)).collect()
}

/// Runs the suite and reports wall time alongside the results.
pub fn run_suite_timed(opts: &GradcheckOptions) -> Result<(Vec<CheckReport>, std::time::Duration)> {
    let start = Instant::now();
    let reports = run_suite(opts)?;
    Ok((reports, start.elapsed()))
}


#[cfg(test)]
mod suite_tests {
    use super::*;

    fn failures(reports: &[CheckReport]) -> Vec<String> {
        reports
            .iter()
            .filter(|r| !r.passed)
            .map(|r| format!("{} {:.3e}", r.name, r.max_rel_error))
            .collect()
    }

    #[test]
    fn full_suite_passes_in_both_precisions() {
        for precision in [Precision::Double, Precision::Single] {
            let opts = GradcheckOptions { precision, ..Default::default() };
            let reports = run_suite(&opts).unwrap();
            assert_eq!(reports.len(), case_names().len());
            assert!(failures(&reports).is_empty(), "{precision:?}: {:?}", failures(&reports));
        }
    }

    #[test]
    fn perturbed_rule_is_caught() {
        let opts = GradcheckOptions {
            perturb: Some("conv2d".into()),
            ..Default::default()
        };
        let reports = run_suite(&opts).unwrap();
        assert_eq!(failures(&reports).len(), 1);
        assert!(!reports.iter().find(|r| r.name == "conv2d").unwrap().passed);
    }
}
