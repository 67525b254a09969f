use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};

use super::{HeadKind, ModelConfig, ModelParams, FRAME_CONV_KERNEL, LSTM_GATES};
use crate::error::{Error, Result};
use crate::tensor::{BatchNormMode, BatchStats, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Hidden and cell state of the ConvLSTM, both N×hidden×S×S.
#[derive(Clone, Copy, Debug)]
pub struct ConvLstmState {
    pub h: Var,
    pub c: Var,
}

/// One recurrent update together with its gate activations.
#[derive(Clone, Copy, Debug)]
pub struct ConvLstmStep {
    pub state: ConvLstmState,
    pub input_gate: Var,
    pub forget_gate: Var,
    pub output_gate: Var,
    pub cell_gate: Var,
}

pub struct ForwardOutput<T> {
    /// `[N, 1]` sigmoid score or `[N, 2]` softmax over (posed, spontaneous).
    pub score: Var,
    /// Flattened post-ReLU head features, `[N, embedding_dim]`.
    pub embedding: Var,
    /// Train-mode batch statistics keyed by batch-norm layer prefix.
    pub bn_stats: Vec<(String, BatchStats<T>)>,
}

impl<T: Real> ForwardOutput<T> {
    /// Probability of the spontaneous class for each video in the batch.
    pub fn probabilities(&self, tape: &Tape<T>) -> Vec<T> {
        let v = tape.value(self.score);
        let units = v.shape()[1];
        v.data().chunks(units).map(|row| row[units - 1]).collect()
    }

    /// The score entries that feed the binary cross-entropy.
    pub fn positive_score(&self, tape: &mut Tape<T>) -> Result<Var> {
        let units = tape.shape(self.score)[1];
        if units == 1 {
            Ok(self.score)
        } else {
            tape.slice(self.score, 1, units - 1, 1)
        }
    }
}

/// Parameters bound to a tape for one forward pass.
pub struct Net<'a, T: Real> {
    config: &'a ModelConfig,
    params: &'a ModelParams<T>,
    vars: BTreeMap<String, Var>,
    mode: Mode,
    bn_stats: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Real> Net<'a, T> {
    /// Records every trainable parameter as a tape leaf. With
    /// `track_grads == false` the leaves are constants.
    pub fn bind(
        tape: &mut Tape<T>,
        config: &'a ModelConfig,
        params: &'a ModelParams<T>,
        mode: Mode,
        track_grads: bool,
    ) -> Result<Self> {
        config.validate()?;
        let mut vars = BTreeMap::new();
        for spec in config.param_specs() {
            if spec.role.trainable() {
                let v = tape.leaf(params.get(&spec.name)?.clone(), track_grads)?;
                vars.insert(spec.name, v);
            }
        }
        Ok(Self {
            config,
            params,
            vars,
            mode,
            bn_stats: Vec::new(),
        })
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {name} is not bound")))
    }

    /// Leaves for every trainable parameter, by name.
    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn take_bn_stats(&mut self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.bn_stats)
    }

    fn conv(&self, tape: &mut Tape<T>, x: Var, name: &str, padding: usize) -> Result<Var> {
        let w = self.var(&format!("{name}.weight"))?;
        let b = self.var(&format!("{name}.bias"))?;
        tape.conv2d(x, w, Some(b), 1, padding)
    }

    fn batch_norm(&mut self, tape: &mut Tape<T>, x: Var, name: &str) -> Result<Var> {
        let gamma = self.var(&format!("{name}.gamma"))?;
        let beta = self.var(&format!("{name}.beta"))?;
        let eps = T::from_f64_lossy(self.config.bn_eps);
        let mode = match self.mode {
            Mode::Train => BatchNormMode::Train,
            Mode::Eval => BatchNormMode::Eval {
                running_mean: self.params.get(&format!("{name}.running_mean")).ok(),
                running_var: self.params.get(&format!("{name}.running_var")).ok(),
            },
        };
        let (y, stats) = tape.batch_norm2d(x, gamma, beta, mode, eps)?;
        if let Some(stats) = stats {
            self.bn_stats.push((name.to_string(), stats));
        }
        Ok(y)
    }

    /// Residual difference attention: `C(cur - prev) ⊗ cur ⊕ cur`.
    pub fn tsa(&self, tape: &mut Tape<T>, prev: Var, cur: Var) -> Result<Var> {
        if tape.shape(prev) != tape.shape(cur) {
            return Err(Error::shape(
                "tsa",
                format!("frames {:?} and {:?}", tape.shape(prev), tape.shape(cur)),
            ));
        }
        let diff = tape.sub(cur, prev)?;
        let attn = self.conv(tape, diff, "tsa.conv", FRAME_CONV_KERNEL / 2)?;
        let gated = tape.mul(attn, cur)?;
        tape.add(gated, cur)
    }

    /// Two rounds of conv → batch norm → ReLU → 2×2 average pool.
    pub fn fpn(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let r = self.config.resolution;
        let s = tape.shape(x);
        if s.len() != 4 || s[1] != self.config.in_channels || s[2] != r || s[3] != r {
            return Err(Error::shape(
                "fpn",
                format!("input {s:?}, expected N×{}×{r}×{r}", self.config.in_channels),
            ));
        }
        let mut y = x;
        for block in ["fpn.block1", "fpn.block2"] {
            y = self.conv(tape, y, &format!("{block}.conv"), FRAME_CONV_KERNEL / 2)?;
            y = self.batch_norm(tape, y, &format!("{block}.bn"))?;
            y = tape.relu(y)?;
            y = tape.avg_pool2d(y, 2, 2)?;
        }
        Ok(y)
    }

    /// The four gate kernels stacked along the output axis in i, f, o, g
    /// order, so one convolution evaluates every gate.
    pub fn fused_gates(&self, tape: &mut Tape<T>) -> Result<(Var, Var)> {
        let mut ws = Vec::with_capacity(4);
        let mut bs = Vec::with_capacity(4);
        for gate in LSTM_GATES {
            ws.push(self.var(&format!("lstm.{gate}.weight"))?);
            bs.push(self.var(&format!("lstm.{gate}.bias"))?);
        }
        Ok((tape.concat(&ws, 0)?, tape.concat(&bs, 0)?))
    }

    pub fn zero_state(&self, tape: &mut Tape<T>, batch: usize) -> Result<ConvLstmState> {
        let s = self.config.state_extent();
        let shape = [batch, self.config.convlstm_hidden, s, s];
        Ok(ConvLstmState {
            h: tape.constant(Tensor::zeros(&shape))?,
            c: tape.constant(Tensor::zeros(&shape))?,
        })
    }

    /// One ConvLSTM transition on `u = concat(e, h)`; no peephole terms.
    pub fn convlstm_step(
        &self,
        tape: &mut Tape<T>,
        e: Var,
        state: ConvLstmState,
        gates: (Var, Var),
    ) -> Result<ConvLstmStep> {
        let (se, sh) = (tape.shape(e), tape.shape(state.h));
        if se.len() != 4 || se[0] != sh[0] || se[2..] != sh[2..] {
            return Err(Error::shape(
                "convlstm_step",
                format!("input {se:?} does not match state {sh:?}"),
            ));
        }
        let hidden = self.config.convlstm_hidden;
        let u = tape.concat_channels(e, state.h)?;
        let z = tape.conv2d(u, gates.0, Some(gates.1), 1, self.config.convlstm_kernel / 2)?;
        let pre = |tape: &mut Tape<T>, k: usize| tape.slice(z, 1, k * hidden, hidden);
        let (zi, zf, zo, zg) = (pre(tape, 0)?, pre(tape, 1)?, pre(tape, 2)?, pre(tape, 3)?);
        let i = tape.sigmoid(zi)?;
        let f = tape.sigmoid(zf)?;
        let o = tape.sigmoid(zo)?;
        let g = tape.tanh(zg)?;
        let keep = tape.mul(f, state.c)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;
        Ok(ConvLstmStep {
            state: ConvLstmState { h, c },
            input_gate: i,
            forget_gate: f,
            output_gate: o,
            cell_gate: g,
        })
    }

    /// Dot-product non-local block with a residual connection.
    pub fn nonlocal(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let &[n, c, hh, ww] = s.as_slice() else {
            return Err(Error::shape("nonlocal", format!("expected NCHW, got {s:?}")));
        };
        if c != self.config.convlstm_hidden {
            return Err(Error::shape(
                "nonlocal",
                format!("{c} channels, expected {}", self.config.convlstm_hidden),
            ));
        }
        let b = self.config.bottleneck();
        let positions = hh * ww;
        let embed = |tape: &mut Tape<T>, name: &str| -> Result<Var> {
            let e = self.conv(tape, x, name, 0)?;
            tape.reshape(e, &[n, b, positions])
        };
        let theta = embed(tape, "nl.theta")?;
        let phi = embed(tape, "nl.phi")?;
        let g = embed(tape, "nl.g")?;
        let theta_t = tape.transpose(theta)?;
        let pairwise = tape.matmul(theta_t, phi)?;
        let pairwise = tape.scale(pairwise, T::one() / T::from_usize(positions).unwrap())?;
        let g_t = tape.transpose(g)?;
        let y = tape.matmul(pairwise, g_t)?;
        let y = tape.transpose(y)?;
        let y = tape.reshape(y, &[n, b, hh, ww])?;
        let z = self.conv(tape, y, "nl.z", 0)?;
        tape.add(z, x)
    }

    /// Non-local → pool → conv → BN → ReLU → dropout → dense → sigmoid/softmax.
    /// Returns the score and the post-ReLU embedding.
    pub fn classify<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape<T>,
        h: Var,
        rng: &mut R,
    ) -> Result<(Var, Var)> {
        if self.config.head_extent() == 0 {
            return Err(Error::Config("spatial extent too small for the head".into()));
        }
        let y = self.nonlocal(tape, h)?;
        let y = tape.avg_pool2d(y, 2, 2)?;
        let y = self.conv(tape, y, "head.conv", 0)?;
        let y = self.batch_norm(tape, y, "head.bn")?;
        let y = tape.relu(y)?;
        let n = tape.shape(y)[0];
        let embedding = tape.reshape(y, &[n, self.config.embedding_dim()])?;
        let dropped = tape.dropout(embedding, self.config.dropout_p, self.mode == Mode::Train, rng)?;
        let logits = tape.affine(dropped, self.var("head.fc.weight")?, self.var("head.fc.bias")?)?;
        let score = match self.config.head {
            HeadKind::Sigmoid => tape.sigmoid(logits)?,
            HeadKind::Softmax => tape.softmax(logits, 1)?,
        };
        Ok((score, embedding))
    }

    /// Runs one video, `[frames, C, R, R]`, through the whole network.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape<T>,
        clip: &Tensor<T>,
        rng: &mut R,
    ) -> Result<ForwardOutput<T>> {
        self.forward_batch(tape, std::slice::from_ref(clip), rng)
    }

    /// Runs several videos of any lengths as one batch. The per-frame stages
    /// see every frame of every clip at once, so train-mode batch norm
    /// statistics cover the whole batch; the recurrence runs per video and
    /// the head receives one row per video, in input order.
    pub fn forward_batch<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape<T>,
        clips: &[Tensor<T>],
        rng: &mut R,
    ) -> Result<ForwardOutput<T>> {
        let cfg = self.config;
        let r = cfg.resolution;
        if clips.is_empty() {
            return Err(Error::Input("no clips to run".into()));
        }
        let mut inputs = Vec::with_capacity(clips.len());
        let mut steps = Vec::with_capacity(clips.len());
        for (k, clip) in clips.iter().enumerate() {
            let s = clip.shape();
            if s.len() != 4 || s[1] != cfg.in_channels || s[2] != r || s[3] != r {
                return Err(Error::Input(format!(
                    "clip {k}: shape {s:?}, expected frames×{}×{r}×{r}",
                    cfg.in_channels
                )));
            }
            let frames = s[0];
            if frames < cfg.min_frames() {
                return Err(Error::Input(format!(
                    "clip {k}: {frames} frame(s) given, at least {} required",
                    cfg.min_frames()
                )));
            }
            let clip = tape.constant(clip.clone())?;
            let x = if cfg.use_tsa {
                let prev = tape.slice(clip, 0, 0, frames - 1)?;
                let cur = tape.slice(clip, 0, 1, frames - 1)?;
                self.tsa(tape, prev, cur)?
            } else {
                clip
            };
            steps.push(tape.shape(x)[0]);
            inputs.push(x);
        }
        // Per-frame stages run batched over time; only the recurrence is sequential.
        let batched = if inputs.len() == 1 { inputs[0] } else { tape.concat(&inputs, 0)? };
        let features = self.fpn(tape, batched)?;
        let gates = self.fused_gates(tape)?;
        let mut finals = Vec::with_capacity(clips.len());
        let mut offset = 0;
        for &n in &steps {
            let mut state = self.zero_state(tape, 1)?;
            for t in offset..offset + n {
                let e = tape.slice(features, 0, t, 1)?;
                state = self.convlstm_step(tape, e, state, gates)?.state;
            }
            offset += n;
            finals.push(state.h);
        }
        let h = if finals.len() == 1 { finals[0] } else { tape.concat(&finals, 0)? };
        let (score, embedding) = self.classify(tape, h, rng)?;
        Ok(ForwardOutput {
            score,
            embedding,
            bn_stats: self.take_bn_stats(),
        })
    }
}

/// Records a full forward pass of one video on `tape`.
pub fn model_forward<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
    clip: &Tensor<T>,
    mode: Mode,
    rng: &mut R,
) -> Result<(ForwardOutput<T>, BTreeMap<String, Var>)> {
    let mut net = Net::bind(tape, config, params, mode, mode == Mode::Train)?;
    let out = net.forward(tape, clip, rng)?;
    Ok((out, net.vars().clone()))
}

/// Eval-mode probability of the spontaneous class plus the embedding.
pub fn predict_score<T: Real>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    clip: &Tensor<T>,
) -> Result<(T, Vec<T>)> {
    let mut tape = Tape::new();
    let mut net = Net::bind(&mut tape, config, params, Mode::Eval, false)?;
    // Eval mode never draws from the generator.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let out = net.forward(&mut tape, clip, &mut rng)?;
    let p = out.probabilities(&tape)[0];
    Ok((p, tape.value(out.embedding).data().to_vec()))
}
