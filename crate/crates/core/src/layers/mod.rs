//! Layers, including sparse variational dropout layers.
//!
//! A variational weight `w` follows `N(theta, alpha * theta^2)`, stored as
//! the pair `(theta, log_sigma2)` with `log_alpha = log_sigma2 - log(theta^2)`.
//! In train mode activations are sampled with the local reparameterization
//! trick; in eval mode the layer is deterministic and weights whose
//! `log_alpha` exceeds the pruning threshold are masked out.

pub mod checkpoint;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{batch_norm, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Constants of the closed-form KL approximation for sparse variational
/// dropout (Molchanov, Ashukha & Vetrov, 2017, "Variational Dropout
/// Sparsifies Deep Neural Networks", eq. 14):
///
/// `-KL ≈ k1·sigmoid(k2 + k3·log α) − 0.5·log(1 + 1/α) + C`, with `C = −k1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlConstants {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub version: u32,
}

impl KlConstants {
    pub const fn c(&self) -> f64 {
        -self.k1
    }
}

pub const KL_CONSTANTS: KlConstants = KlConstants {
    k1: 0.63576,
    k2: 1.87320,
    k3: 1.48695,
    version: 1,
};

/// `log_alpha` is clipped to `[-LOG_ALPHA_CLIP, LOG_ALPHA_CLIP]`.
pub const LOG_ALPHA_CLIP: f64 = 20.0;
/// Added to `theta^2` inside the logarithm.
pub const EPS_CLIP: f64 = 1e-16;
/// Variance floor under the LRT square root.
pub const LRT_VARIANCE_FLOOR: f64 = 1e-12;
pub const LOG_SIGMA2_INIT: f64 = -10.0;
pub const DEFAULT_ETA: f64 = 3.0;
pub const BN_EPS: f64 = 1e-5;

/// `log_alpha` of a single weight, clipped.
pub fn log_alpha(theta: f64, log_sigma2: f64) -> f64 {
    (log_sigma2 - (theta * theta + EPS_CLIP).ln()).clamp(-LOG_ALPHA_CLIP, LOG_ALPHA_CLIP)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerKind {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv3x3 {
        in_channels: usize,
        out_channels: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    MaxPool2x2,
    Flatten,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub variational: bool,
}

impl LayerSpec {
    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Dense { inputs, outputs },
            variational: false,
        }
    }

    pub fn conv3x3(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv3x3 {
                in_channels,
                out_channels,
            },
            variational: false,
        }
    }

    pub fn batch_norm(channels: usize) -> Self {
        LayerSpec {
            kind: LayerKind::BatchNorm { channels },
            variational: false,
        }
    }

    pub fn relu() -> Self {
        LayerSpec {
            kind: LayerKind::Relu,
            variational: false,
        }
    }

    pub fn max_pool() -> Self {
        LayerSpec {
            kind: LayerKind::MaxPool2x2,
            variational: false,
        }
    }

    pub fn flatten() -> Self {
        LayerSpec {
            kind: LayerKind::Flatten,
            variational: false,
        }
    }

    pub fn variational(mut self, on: bool) -> Self {
        self.variational = on;
        self
    }

    fn has_weights(&self) -> bool {
        matches!(
            self.kind,
            LayerKind::Dense { .. } | LayerKind::Conv3x3 { .. }
        )
    }

    fn is_variational(&self) -> bool {
        self.variational && self.has_weights()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Theta,
    LogSigma2,
    Bias,
    BnScale,
    BnShift,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub role: ParamRole,
    pub layer: usize,
    pub shape: Vec<usize>,
}

/// Mean and log-variance of a variational weight tensor, plus its
/// deterministic bias.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalParams {
    pub theta: Tensor,
    pub log_sigma2: Tensor,
    pub bias: Option<Tensor>,
}

impl VariationalParams {
    pub fn new(theta: Tensor, log_sigma2: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if theta.shape() != log_sigma2.shape() {
            return Err(Error::shape(
                "variational_params",
                theta.shape(),
                log_sigma2.shape(),
            ));
        }
        Ok(VariationalParams {
            theta,
            log_sigma2,
            bias,
        })
    }

    pub fn log_alpha(&self) -> Vec<f64> {
        self.theta
            .data()
            .iter()
            .zip(self.log_sigma2.data())
            .map(|(&t, &s)| log_alpha(t, s))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeterministicParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// Per-forward-pass options.
pub struct ForwardCtx<'r> {
    pub mode: Mode,
    /// Eval-mode pruning threshold on `log_alpha`.
    pub eta: f64,
    pub rng: Option<&'r mut Stream>,
}

impl<'r> ForwardCtx<'r> {
    pub fn train(rng: &'r mut Stream) -> Self {
        ForwardCtx {
            mode: Mode::Train,
            eta: DEFAULT_ETA,
            rng: Some(rng),
        }
    }

    pub fn eval() -> Self {
        ForwardCtx {
            mode: Mode::Eval,
            eta: DEFAULT_ETA,
            rng: None,
        }
    }
}

/// Differentiable handles to one variational weight group.
#[derive(Clone, Copy, Debug)]
pub struct VariationalVars<'t> {
    pub theta: Var<'t>,
    pub log_sigma2: Var<'t>,
    pub bias: Option<Var<'t>>,
}

enum Linear {
    Dense,
    Conv,
}

impl Linear {
    fn apply<'t>(&self, x: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
        match self {
            Linear::Dense => x.matmul(w),
            Linear::Conv => x.conv2d(w, 1),
        }
    }
}

fn add_bias<'t>(out: Var<'t>, bias: Option<Var<'t>>, conv: bool) -> Result<Var<'t>> {
    let Some(b) = bias else { return Ok(out) };
    let b = if conv {
        b.reshape(&[b.numel(), 1, 1])?
    } else {
        b
    };
    out.add_bcast(b)
}

/// Eval-mode keep-mask: 1 where `log_alpha <= eta`.
fn keep_mask(theta: &[f64], log_sigma2: &[f64], eta: f64) -> Vec<f64> {
    theta
        .iter()
        .zip(log_sigma2)
        .map(|(&t, &s)| if log_alpha(t, s) <= eta { 1.0 } else { 0.0 })
        .collect()
}

fn variational_linear<'t>(
    kind: Linear,
    p: VariationalVars<'t>,
    x: Var<'t>,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var<'t>> {
    let tape = x.tape();
    let conv = matches!(kind, Linear::Conv);
    match ctx.mode {
        Mode::Eval => {
            let mask = keep_mask(&p.theta.value(), &p.log_sigma2.value(), ctx.eta);
            let mask = tape.constant_raw(&p.theta.shape(), mask);
            let w = p.theta.mul(mask)?;
            add_bias(kind.apply(x, w)?, p.bias, conv)
        }
        Mode::Train => {
            let rng = ctx.rng.as_deref_mut().ok_or(Error::MissingRng)?;
            let mean = add_bias(kind.apply(x, p.theta)?, p.bias, conv)?;
            let var = kind.apply(x.square(), p.log_sigma2.exp())?;
            // sqrt(v + eps) - sqrt(eps): finite slope at v = 0, exact zero noise there
            let std = var
                .add_scalar(LRT_VARIANCE_FLOOR)
                .sqrt()
                .add_scalar(-LRT_VARIANCE_FLOOR.sqrt());
            let noise: Vec<f64> = (0..std.numel())
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let noise = tape.constant_raw(&std.shape(), noise);
            mean.add(std.mul(noise)?)
        }
    }
}

/// Fully connected variational layer on `[batch, fan_in]` input.
pub fn forward_variational<'t>(
    p: VariationalVars<'t>,
    input: Var<'t>,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var<'t>> {
    let (si, st) = (input.shape(), p.theta.shape());
    if si.len() != 2 || st.len() != 2 || si[1] != st[0] {
        return Err(Error::shape("forward_variational", &si, &st));
    }
    variational_linear(Linear::Dense, p, input, ctx)
}

/// Convolutional variational layer (3x3, same padding) on NCHW input.
pub fn forward_variational_conv<'t>(
    p: VariationalVars<'t>,
    input: Var<'t>,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var<'t>> {
    variational_linear(Linear::Conv, p, input, ctx)
}

/// Closed-form approximate `KL(q(w) || p(w))` summed over the group's weights.
pub fn kl_divergence<'t>(theta: Var<'t>, log_sigma2: Var<'t>) -> Result<Var<'t>> {
    let k = KL_CONSTANTS;
    let la = log_sigma2
        .sub(theta.square().add_scalar(EPS_CLIP).ln())?
        .clamp(-LOG_ALPHA_CLIP, LOG_ALPHA_CLIP);
    let sig = la.scale(k.k3).add_scalar(k.k2).sigmoid().scale(k.k1);
    let soft = la.neg().exp().add_scalar(1.0).ln().scale(0.5);
    // -(k1*sig - 0.5*log(1 + 1/alpha) + C)
    Ok(soft.sub(sig)?.add_scalar(-k.c()).sum())
}

/// An ordered stack of layers together with a flat, ordered parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    input_shape: Vec<usize>,
    specs: Vec<LayerSpec>,
    info: Vec<ParamInfo>,
    params: Vec<Tensor>,
    /// parameter index of the first tensor of each layer
    offsets: Vec<usize>,
}

impl Model {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn param_info(&self) -> &[ParamInfo] {
        &self.info
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<Tensor> {
        self.params
    }

    pub fn with_params(&self, params: Vec<Tensor>) -> Result<Model> {
        if params.len() != self.info.len() {
            return Err(Error::InvalidSpec(format!(
                "expected {} parameter tensors, got {}",
                self.info.len(),
                params.len()
            )));
        }
        for (p, info) in params.iter().zip(&self.info) {
            if p.shape() != info.shape.as_slice() {
                return Err(Error::shape("with_params", p.shape(), &info.shape));
            }
        }
        Ok(Model {
            params,
            ..self.clone()
        })
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn is_variational(&self) -> bool {
        self.specs.iter().any(LayerSpec::is_variational)
    }

    /// `(theta index, log_sigma2 index)` for each variational weight group.
    pub fn variational_groups(&self) -> Vec<(usize, usize)> {
        self.info
            .iter()
            .enumerate()
            .filter(|(_, i)| i.role == ParamRole::Theta)
            .map(|(t, _)| (t, t + 1))
            .collect()
    }

    /// Indices of every weight-like tensor (weights or variational means).
    pub fn weight_indices(&self) -> Vec<usize> {
        self.info
            .iter()
            .enumerate()
            .filter(|(_, i)| matches!(i.role, ParamRole::Weight | ParamRole::Theta))
            .map(|(i, _)| i)
            .collect()
    }

    /// Functional forward pass with caller-supplied parameter handles, in
    /// the order of [`Model::param_info`]. Input is `[batch, ..input_shape]`.
    pub fn forward<'t>(
        &self,
        params: &[Var<'t>],
        input: Var<'t>,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var<'t>> {
        if params.len() != self.info.len() {
            return Err(Error::InvalidSpec(format!(
                "forward expects {} parameters, got {}",
                self.info.len(),
                params.len()
            )));
        }
        let si = input.shape();
        if si.len() != self.input_shape.len() + 1 || si[1..] != self.input_shape[..] {
            return Err(Error::shape("model_input", &si, &self.input_shape));
        }
        let mut x = input;
        for (layer, spec) in self.specs.iter().enumerate() {
            let p = &params[self.offsets[layer]..];
            x = match spec.kind {
                LayerKind::Dense { .. } | LayerKind::Conv3x3 { .. } => {
                    let conv = matches!(spec.kind, LayerKind::Conv3x3 { .. });
                    if spec.is_variational() {
                        let vars = VariationalVars {
                            theta: p[0],
                            log_sigma2: p[1],
                            bias: Some(p[2]),
                        };
                        if conv {
                            forward_variational_conv(vars, x, ctx)?
                        } else {
                            forward_variational(vars, x, ctx)?
                        }
                    } else if conv {
                        add_bias(x.conv2d(p[0], 1)?, Some(p[1]), true)?
                    } else {
                        add_bias(x.matmul(p[0])?, Some(p[1]), false)?
                    }
                }
                LayerKind::BatchNorm { .. } => batch_norm(x, p[0], p[1], BN_EPS)?,
                LayerKind::Relu => x.relu(),
                LayerKind::MaxPool2x2 => x.max_pool2()?,
                LayerKind::Flatten => {
                    let s = x.shape();
                    x.reshape(&[s[0], s[1..].iter().product()])?
                }
            };
            if x.value().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation { layer });
            }
        }
        Ok(x)
    }

    /// Sum of KL terms over every variational weight group.
    pub fn kl<'t>(&self, params: &[Var<'t>]) -> Result<Option<Var<'t>>> {
        let mut total: Option<Var<'t>> = None;
        for (t, s) in self.variational_groups() {
            let kl = kl_divergence(params[t], params[s])?;
            total = Some(match total {
                Some(acc) => acc.add(kl)?,
                None => kl,
            });
        }
        Ok(total)
    }

    /// Convenience: forward with the model's own parameters as constants.
    pub fn predict(&self, input: &Tensor, ctx: &mut ForwardCtx<'_>) -> Result<Tensor> {
        let tape = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|p| tape.constant(p)).collect();
        let x = tape.constant(input);
        Ok(self.forward(&params, x, ctx)?.to_tensor())
    }

    /// Variational view of layer `layer`, if it is a variational weight layer.
    pub fn variational_params(&self, layer: usize) -> Option<VariationalParams> {
        let spec = self.specs.get(layer)?;
        if !spec.is_variational() {
            return None;
        }
        let o = self.offsets[layer];
        Some(VariationalParams {
            theta: self.params[o].clone(),
            log_sigma2: self.params[o + 1].clone(),
            bias: Some(self.params[o + 2].clone()),
        })
    }
}

/// Feature shape flowing between layers, excluding the batch axis.
fn propagate(shape: &[usize], spec: &LayerSpec, layer: usize) -> Result<Vec<usize>> {
    let bad = |why: &str| {
        Err(Error::InvalidSpec(format!(
            "layer {layer}: {why} (input {shape:?})"
        )))
    };
    match spec.kind {
        LayerKind::Dense { inputs, outputs } => {
            if shape != [inputs] || outputs == 0 {
                return bad("dense fan-in does not match");
            }
            Ok(vec![outputs])
        }
        LayerKind::Conv3x3 {
            in_channels,
            out_channels,
        } => {
            if shape.len() != 3 || shape[0] != in_channels || out_channels == 0 {
                return bad("conv channels do not match");
            }
            Ok(vec![out_channels, shape[1], shape[2]])
        }
        LayerKind::BatchNorm { channels } => {
            if shape.is_empty() || shape[0] != channels {
                return bad("batch-norm channels do not match");
            }
            Ok(shape.to_vec())
        }
        LayerKind::Relu => Ok(shape.to_vec()),
        LayerKind::MaxPool2x2 => {
            if shape.len() != 3 || shape[1] < 2 || shape[2] < 2 {
                return bad("spatial extent collapses under max-pool");
            }
            Ok(vec![shape[0], shape[1] / 2, shape[2] / 2])
        }
        LayerKind::Flatten => Ok(vec![shape.iter().product()]),
    }
}

/// Assemble a model from a layer list. `variational = true` turns every
/// dense and convolutional layer variational; otherwise each spec's own
/// flag is used. Weights are initialized uniformly in `±1/sqrt(fan_in)`,
/// biases at zero, `log_sigma2` at [`LOG_SIGMA2_INIT`].
pub fn build_model(
    input_shape: &[usize],
    specs: &[LayerSpec],
    variational: bool,
    rng: &mut Stream,
) -> Result<Model> {
    if specs.is_empty() {
        return Err(Error::InvalidSpec("empty layer list".into()));
    }
    if input_shape.is_empty() || input_shape.contains(&0) {
        return Err(Error::InvalidSpec(format!(
            "bad input shape {input_shape:?}"
        )));
    }
    let specs: Vec<LayerSpec> = specs
        .iter()
        .map(|s| LayerSpec {
            variational: s.variational || (variational && s.has_weights()),
            ..*s
        })
        .collect();
    let mut shape = input_shape.to_vec();
    let mut info = Vec::new();
    let mut params = Vec::new();
    let mut offsets = Vec::with_capacity(specs.len());
    for (layer, spec) in specs.iter().enumerate() {
        offsets.push(params.len());
        let next = propagate(&shape, spec, layer)?;
        let mut push = |name: &str, role: ParamRole, t: Tensor| {
            info.push(ParamInfo {
                name: format!("layer{layer}.{name}"),
                role,
                layer,
                shape: t.shape().to_vec(),
            });
            params.push(t);
        };
        let (wshape, fan_in, outs) = match spec.kind {
            LayerKind::Dense { inputs, outputs } => (vec![inputs, outputs], inputs, outputs),
            LayerKind::Conv3x3 {
                in_channels,
                out_channels,
            } => (
                vec![out_channels, in_channels, 3, 3],
                in_channels * 9,
                out_channels,
            ),
            LayerKind::BatchNorm { channels } => {
                push("gamma", ParamRole::BnScale, Tensor::full(&[channels], 1.0));
                push("beta", ParamRole::BnShift, Tensor::zeros(&[channels]));
                shape = next;
                continue;
            }
            _ => {
                shape = next;
                continue;
            }
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = wshape.iter().product();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        let w = Tensor::new(wshape.clone(), w)?;
        if spec.variational {
            push("theta", ParamRole::Theta, w);
            push(
                "log_sigma2",
                ParamRole::LogSigma2,
                Tensor::full(&wshape, LOG_SIGMA2_INIT),
            );
        } else {
            push("weight", ParamRole::Weight, w);
        }
        push("bias", ParamRole::Bias, Tensor::zeros(&[outs]));
        shape = next;
    }
    Ok(Model {
        input_shape: input_shape.to_vec(),
        specs,
        info,
        params,
        offsets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{builder, check};
    use crate::rng::stream;

    const K1: f64 = 0.63576;
    const K2: f64 = 1.87320;
    const K3: f64 = 1.48695;

    /// Closed form written out independently of the tape implementation.
    fn kl_oracle(la: f64) -> f64 {
        let sig = 1.0 / (1.0 + (-(K2 + K3 * la)).exp());
        -(K1 * sig - 0.5 * (-la).exp().ln_1p() - K1)
    }

    fn kl_at(log_alpha: f64) -> f64 {
        // theta = 1 => log_alpha = log_sigma2 - log(1 + eps)
        let tape = Tape::new();
        let theta = tape.param(&Tensor::from_vec(vec![1.0]));
        let ls2 = tape.param(&Tensor::from_vec(vec![log_alpha]));
        kl_divergence(theta, ls2).unwrap().item()
    }

    #[test]
    fn kl_pinned_value_at_zero_log_alpha() {
        // oracle evaluation of -(k1*sigmoid(k2) - 0.5*log 2 - k1)
        const PINNED: f64 = 0.4312389509903088;
        assert!((kl_oracle(0.0) - PINNED).abs() < 1e-15);
        assert!((kl_at(0.0) - PINNED).abs() < 1e-12);
    }

    #[test]
    fn kl_vanishes_for_dropped_weights() {
        assert!(kl_at(40.0) < 1e-8);
        assert!(kl_at(40.0) >= 0.0);
    }

    #[test]
    fn kl_ordering_and_monotonicity() {
        assert!(kl_at(-2.0) > kl_at(0.0));
        assert!(kl_at(0.0) > kl_at(2.0));
        let grid: Vec<f64> = (0..=160).map(|i| -8.0 + 0.1 * i as f64).collect();
        for w in grid.windows(2) {
            assert!(kl_at(w[1]) <= kl_at(w[0]));
            assert!((kl_at(w[0]) - kl_oracle(w[0])).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let mut rng = stream(3, &[]);
        for _ in 0..5 {
            let theta: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ls2: Vec<f64> = (0..6).map(|_| rng.random_range(-6.0..2.0)).collect();
            let err = check(
                &|_, v| kl_divergence(v[0], v[1]),
                &[Tensor::from_vec(theta), Tensor::from_vec(ls2)],
            );
            assert!(err <= 1e-5, "relative error {err:e}");
        }
    }

    fn single_dense(theta: Vec<f64>, ls2: Vec<f64>, n_in: usize, n_out: usize) -> Model {
        let mut m = build_model(
            &[n_in],
            &[LayerSpec::dense(n_in, n_out)],
            true,
            &mut stream(0, &[]),
        )
        .unwrap();
        m.params[0] = Tensor::new(vec![n_in, n_out], theta).unwrap();
        m.params[1] = Tensor::new(vec![n_in, n_out], ls2).unwrap();
        m
    }

    #[test]
    fn lrt_zero_noise_limit_matches_eval() {
        let m = single_dense(vec![0.5, -1.0, 0.25, 2.0], vec![-40.0; 4], 2, 2);
        let x = Tensor::new(vec![3, 2], vec![1.0, 2.0, -1.0, 0.5, 0.3, 0.0]).unwrap();
        let mut rng = stream(1, &[]);
        let train = m.predict(&x, &mut ForwardCtx::train(&mut rng)).unwrap();
        let eval = m.predict(&x, &mut ForwardCtx::eval()).unwrap();
        // residual noise ≈ var / (2·sqrt(floor)) with var ~ |x|²·e^-40
        for (a, b) in train.data().iter().zip(eval.data()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_mean_weights_give_centered_noise() {
        let m = single_dense(vec![0.0, 0.0], vec![0.0, 0.0], 2, 1);
        let x = Tensor::new(vec![20_000, 2], vec![1.0; 40_000]).unwrap();
        let mut rng = stream(2, &[]);
        let out = m.predict(&x, &mut ForwardCtx::train(&mut rng)).unwrap();
        let mean = out.data().iter().sum::<f64>() / out.numel() as f64;
        // variance 2 => standard error sqrt(2 / n)
        assert!(mean.abs() < 3.0 * (2.0f64 / 20_000.0).sqrt());
    }

    #[test]
    fn lrt_moments_match_analytic_values() {
        // input [1,1], theta [[1],[1]], log_sigma2 0 => mean 2, variance 2
        let m = single_dense(vec![1.0, 1.0], vec![0.0, 0.0], 2, 1);
        let n = 100_000;
        let x = Tensor::new(vec![n, 2], vec![1.0; 2 * n]).unwrap();
        let mut rng = stream(5, &[]);
        let out = m.predict(&x, &mut ForwardCtx::train(&mut rng)).unwrap();
        let d = out.data();
        let mean = d.iter().sum::<f64>() / n as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se_mean = (2.0 / n as f64).sqrt();
        // variance of the sample variance for a Gaussian: 2 sigma^4 / (n - 1)
        let se_var = (2.0 * 4.0 / (n - 1) as f64).sqrt();
        assert!((mean - 2.0).abs() < 3.0 * se_mean, "mean {mean}");
        assert!((var - 2.0).abs() < 3.0 * se_var, "var {var}");
    }

    #[test]
    fn eval_mode_is_deterministic_and_masks() {
        // second weight has log_alpha = 0 - log(0.01^2) ≈ 9.2 > 3 and is masked
        let m = single_dense(vec![1.0, 0.01], vec![0.0, 0.0], 2, 1);
        let x = Tensor::new(vec![1, 2], vec![1.0, 100.0]).unwrap();
        let a = m.predict(&x, &mut ForwardCtx::eval()).unwrap();
        let b = m.predict(&x, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.data(), &[1.0]);
    }

    #[test]
    fn train_mode_requires_rng() {
        let m = single_dense(vec![1.0], vec![0.0], 1, 1);
        let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let mut ctx = ForwardCtx {
            mode: Mode::Train,
            eta: DEFAULT_ETA,
            rng: None,
        };
        assert!(matches!(m.predict(&x, &mut ctx), Err(Error::MissingRng)));
    }

    #[test]
    fn variational_dense_gradients_match_finite_differences() {
        // fixed noise seed, so the sampled output is a smooth function of the parameters
        let x = Tensor::new(vec![3, 2], vec![0.5, -1.0, 1.5, 0.2, -0.3, 0.8]).unwrap();
        let build = builder(|t, v| {
            let mut rng = stream(9, &[]);
            let vars = VariationalVars {
                theta: v[0],
                log_sigma2: v[1],
                bias: Some(v[2]),
            };
            let out = forward_variational(vars, t.constant(&x), &mut ForwardCtx::train(&mut rng))?;
            Ok(out.square().sum())
        });
        let theta = Tensor::new(vec![2, 2], vec![0.3, -0.7, 1.1, 0.4]).unwrap();
        let ls2 = Tensor::new(vec![2, 2], vec![-2.0, -1.0, -3.0, -0.5]).unwrap();
        let bias = Tensor::from_vec(vec![0.1, -0.2]);
        let err = check(&build, &[theta, ls2, bias]);
        assert!(err <= 1e-5, "relative error {err:e}");
    }

    #[test]
    fn variational_conv_gradients_match_finite_differences() {
        let mut rng = stream(4, &[]);
        let x: Vec<f64> = (0..2 * 4 * 4)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let x = Tensor::new(vec![1, 2, 4, 4], x).unwrap();
        let theta: Vec<f64> = (0..2 * 2 * 9)
            .map(|_| rng.random_range(-0.5..0.5))
            .collect();
        let ls2: Vec<f64> = (0..2 * 2 * 9)
            .map(|_| rng.random_range(-4.0..-1.0))
            .collect();
        let build = builder(|t, v| {
            let mut rng = stream(10, &[]);
            let vars = VariationalVars {
                theta: v[0],
                log_sigma2: v[1],
                bias: Some(v[2]),
            };
            let out =
                forward_variational_conv(vars, t.constant(&x), &mut ForwardCtx::train(&mut rng))?;
            Ok(out.square().sum())
        });
        let err = check(
            &build,
            &[
                Tensor::new(vec![2, 2, 3, 3], theta).unwrap(),
                Tensor::new(vec![2, 2, 3, 3], ls2).unwrap(),
                Tensor::from_vec(vec![0.05, -0.1]),
            ],
        );
        assert!(err <= 1e-5, "relative error {err:e}");
    }

    #[test]
    fn build_model_counts_and_errors() {
        let specs = [
            LayerSpec::dense(1, 40),
            LayerSpec::relu(),
            LayerSpec::dense(40, 40),
            LayerSpec::relu(),
            LayerSpec::dense(40, 1),
        ];
        let det = build_model(&[1], &specs, false, &mut stream(0, &[])).unwrap();
        assert_eq!(det.num_params(), 1 * 40 + 40 + 40 * 40 + 40 + 40 + 1);
        let var = build_model(&[1], &specs, true, &mut stream(0, &[])).unwrap();
        assert_eq!(var.num_params(), 2 * 1680 + 81);
        assert!(var.is_variational() && !det.is_variational());
        assert!(var.params()[1].data().iter().all(|&v| v == LOG_SIGMA2_INIT));

        assert!(matches!(
            build_model(&[1], &[], false, &mut stream(0, &[])),
            Err(Error::InvalidSpec(_))
        ));
        let broken = [LayerSpec::dense(1, 40), LayerSpec::dense(30, 1)];
        assert!(build_model(&[1], &broken, false, &mut stream(0, &[])).is_err());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let m = build_model(
            &[40],
            &[LayerSpec::dense(40, 40)],
            false,
            &mut stream(8, &[]),
        )
        .unwrap();
        let bound = 1.0 / 40f64.sqrt();
        assert!(m.params()[0].data().iter().all(|v| v.abs() <= bound));
    }
}
