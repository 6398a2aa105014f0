//! Variational objectives and the KL/MI estimators built on a
//! discriminator, either a plain MLP or the RKHS construction.
//!
//! The discriminator is trained to maximize the logistic objective
//! `E_p[log σ(f)] + E_q[log(1-σ(f))]`; at the optimum `σ(f) = p/(p+q)`,
//! i.e. `f = log p/q`, and the KL divergence is recovered as the mean of
//! `f` over p-samples. The regularized variant subtracts `λ ·  mean g(w)²`,
//! the computable bound on the squared RKHS norm of `f`.

use crate::autodiff::{Tape, Tensor, VarId};
use crate::nn::{init_mlp, Activation, Mlp, MlpConfig, MlpVars};
use crate::rkhs::{RkhsDiscriminator, WBatch, WPolicy};
use crate::rng::RngState;
use crate::synthetic::GaussianSpec;
use crate::{Error, Result};

/// Which discriminator family an experiment uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiscriminatorKind {
    PlainMlp,
    Rkhs,
}

impl DiscriminatorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DiscriminatorKind::PlainMlp => "plain-mlp",
            DiscriminatorKind::Rkhs => "rkhs",
        }
    }
}

impl std::str::FromStr for DiscriminatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain-mlp" => Ok(DiscriminatorKind::PlainMlp),
            "rkhs" => Ok(DiscriminatorKind::Rkhs),
            other => Err(Error::InvalidConfig(format!(
                "unknown discriminator `{other}` (expected plain-mlp or rkhs)"
            ))),
        }
    }
}

/// Architecture of a discriminator, enough to build one per run seed.
#[derive(Clone, Debug)]
pub struct DiscriminatorConfig {
    pub kind: DiscriminatorKind,
    pub input_dim: usize,
    pub phi_hidden: usize,
    pub phi_layers: usize,
    /// Feature dimension d of the RKHS construction.
    pub feature_dim: usize,
    pub g_hidden: usize,
    pub g_layers: usize,
    pub gamma: f64,
    /// Number of feature draws D.
    pub n_features: usize,
    /// Per-layer Lipschitz target for phi (rkhs only).
    pub lipschitz: Option<f64>,
    /// Per-layer Lipschitz target for g (rkhs only).
    pub g_lipschitz: Option<f64>,
    pub activation: Activation,
}

impl DiscriminatorConfig {
    fn widths(input: usize, hidden: usize, layers: usize, output: usize) -> Vec<usize> {
        let mut w = Vec::with_capacity(layers + 2);
        w.push(input);
        w.extend(std::iter::repeat_n(hidden, layers));
        w.push(output);
        w
    }

    pub fn build(&self, init_seed: u64, w_seed: u64) -> Result<Discriminator> {
        let seeds = RngState::new(init_seed);
        match self.kind {
            DiscriminatorKind::PlainMlp => {
                let net = init_mlp(&MlpConfig {
                    layer_widths: Self::widths(self.input_dim, self.phi_hidden, self.phi_layers, 1),
                    activation: self.activation,
                    lipschitz_target: None,
                    init_seed: seeds.derive_seed(1),
                })?;
                Ok(Discriminator::PlainMlp(net))
            }
            DiscriminatorKind::Rkhs => {
                let phi = init_mlp(&MlpConfig {
                    layer_widths: Self::widths(
                        self.input_dim,
                        self.phi_hidden,
                        self.phi_layers,
                        self.feature_dim,
                    ),
                    activation: self.activation,
                    lipschitz_target: self.lipschitz,
                    init_seed: seeds.derive_seed(1),
                })?;
                let g = init_mlp(&MlpConfig {
                    layer_widths: Self::widths(self.feature_dim, self.g_hidden, self.g_layers, 1),
                    activation: self.activation,
                    lipschitz_target: self.g_lipschitz,
                    init_seed: seeds.derive_seed(2),
                })?;
                Ok(Discriminator::Rkhs(RkhsDiscriminator::new(
                    phi,
                    g,
                    self.gamma,
                    self.n_features,
                    WPolicy::ResampleEachForward,
                    w_seed,
                )?))
            }
        }
    }
}

/// Tape handles for one registered discriminator parameter set.
#[derive(Clone, Debug)]
pub enum DiscVars {
    PlainMlp(MlpVars),
    Rkhs { phi: MlpVars, g: MlpVars },
}

impl DiscVars {
    /// All parameter var ids, in [`Discriminator::params_mut`] order.
    pub fn ids(&self) -> Vec<VarId> {
        match self {
            DiscVars::PlainMlp(v) => v.layers.iter().flat_map(|(w, b)| [*w, *b]).collect(),
            DiscVars::Rkhs { phi, g } => phi
                .layers
                .iter()
                .chain(g.layers.iter())
                .flat_map(|(w, b)| [*w, *b])
                .collect(),
        }
    }
}

/// Plain-valued evaluation of a discriminator on a batch.
#[derive(Clone, Debug)]
pub struct DiscEval {
    pub f: Vec<f64>,
    pub g_norm: Option<f64>,
    pub n_w_draws: Option<usize>,
}

/// A trainable discriminator: a plain MLP critic or the RKHS construction.
#[derive(Clone, Debug)]
pub enum Discriminator {
    PlainMlp(Mlp),
    Rkhs(RkhsDiscriminator),
}

impl Discriminator {
    pub fn kind(&self) -> DiscriminatorKind {
        match self {
            Discriminator::PlainMlp(_) => DiscriminatorKind::PlainMlp,
            Discriminator::Rkhs(_) => DiscriminatorKind::Rkhs,
        }
    }

    pub fn register(&self, tape: &mut Tape) -> DiscVars {
        match self {
            Discriminator::PlainMlp(net) => DiscVars::PlainMlp(net.register(tape)),
            Discriminator::Rkhs(disc) => DiscVars::Rkhs {
                phi: disc.phi.register(tape),
                g: disc.g.register(tape),
            },
        }
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        match self {
            Discriminator::PlainMlp(net) => net
                .params_mut()
                .into_iter()
                .map(|(n, p)| (format!("mlp.{n}"), p))
                .collect(),
            Discriminator::Rkhs(disc) => {
                let mut out: Vec<(String, &mut [f64])> = disc
                    .phi
                    .params_mut()
                    .into_iter()
                    .map(|(n, p)| (format!("phi.{n}"), p))
                    .collect();
                out.extend(disc.g.params_mut().into_iter().map(|(n, p)| (format!("g.{n}"), p)));
                out
            }
        }
    }

    /// Draw a feature batch for this iteration; None for a plain critic.
    pub fn draw_w(&self, rng: &mut RngState) -> Option<WBatch> {
        match self {
            Discriminator::PlainMlp(_) => None,
            Discriminator::Rkhs(disc) => match disc.w_policy {
                WPolicy::Fixed => Some(disc.fixed_w().expect("fixed policy stores w").clone()),
                WPolicy::ResampleEachForward => Some(disc.sample_w(rng)),
            },
        }
    }

    /// Training forward: returns the f-values var and, for RKHS, the
    /// g_norm var.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        vars: &DiscVars,
        x: VarId,
        w: Option<&WBatch>,
    ) -> Result<(VarId, Option<VarId>)> {
        match (self, vars) {
            (Discriminator::PlainMlp(net), DiscVars::PlainMlp(v)) => {
                Ok((net.forward_train(tape, v, x)?, None))
            }
            (Discriminator::Rkhs(disc), DiscVars::Rkhs { phi, g }) => {
                let w = w.ok_or_else(|| {
                    Error::InvalidConfig("rkhs forward needs a feature batch".into())
                })?;
                let fr = disc.forward_train(tape, phi, g, x, w)?;
                Ok((fr.f_values, Some(fr.g_norm)))
            }
            _ => Err(Error::InvalidConfig("mismatched discriminator vars".into())),
        }
    }

    /// Evaluation forward; RKHS outputs are averaged over `n_w_draws`
    /// feature batches.
    pub fn eval_f(&self, x: &Tensor, n_w_draws: usize, rng: &mut RngState) -> Result<DiscEval> {
        match self {
            Discriminator::PlainMlp(net) => {
                let out = net.infer(x)?;
                Ok(DiscEval { f: out.data, g_norm: None, n_w_draws: None })
            }
            Discriminator::Rkhs(disc) => {
                let out = disc.eval_f(x, n_w_draws, rng)?;
                Ok(DiscEval {
                    f: out.f,
                    g_norm: Some(out.g_norm),
                    n_w_draws: Some(out.n_w_draws),
                })
            }
        }
    }
}

/// Regularization strength. `lambda` multiplies the `g_norm` penalty per
/// minibatch; it must be zero for a plain MLP, which has no such term.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveConfig {
    pub lambda: f64,
}

impl ObjectiveConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if lambda.is_nan() || lambda < 0.0 {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(ObjectiveConfig { lambda })
    }
}

/// A finite-sample KL estimate: the mean of discriminator outputs over
/// p-samples, in nats.
#[derive(Clone, Copy, Debug)]
pub struct KlEstimate {
    pub value: f64,
    pub n_eval_samples: usize,
    /// Number of feature draws averaged over (RKHS only).
    pub n_w_draws: Option<usize>,
}

fn check_finite(fs: &[f64]) -> Result<()> {
    if fs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue { context: "discriminator outputs" });
    }
    Ok(())
}

/// Monte-Carlo logistic objective
/// `mean(log σ(f_p)) + mean(log σ(-f_q))`, maximized during training.
/// Always <= 0, approaching 0 only under perfect separation.
pub fn gan_logistic_objective(f_p: &[f64], f_q: &[f64]) -> Result<f64> {
    if f_p.is_empty() || f_q.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    check_finite(f_p)?;
    check_finite(f_q)?;
    let lp: f64 =
        f_p.iter().map(|&v| crate::autodiff::log_sigmoid(v)).sum::<f64>() / f_p.len() as f64;
    let lq: f64 =
        f_q.iter().map(|&v| crate::autodiff::log_sigmoid(-v)).sum::<f64>() / f_q.len() as f64;
    Ok(lp + lq)
}

/// Logistic objective minus the complexity penalty `lambda * g_norm`.
pub fn regularized_objective(
    f_p: &[f64],
    f_q: &[f64],
    g_norm: f64,
    config: &ObjectiveConfig,
) -> Result<f64> {
    if g_norm.is_nan() || g_norm < 0.0 {
        return Err(Error::InvalidConfig(format!("g_norm must be >= 0, got {g_norm}")));
    }
    Ok(gan_logistic_objective(f_p, f_q)? - config.lambda * g_norm)
}

/// The (regularized) objective as a differentiable tape scalar.
pub fn objective_on_tape(
    tape: &mut Tape,
    f_p: VarId,
    f_q: VarId,
    g_norm: Option<VarId>,
    lambda: f64,
) -> Result<VarId> {
    let ls_p = tape.log_sigmoid_op(f_p);
    let mean_p = tape.mean(ls_p);
    let neg_q = tape.scalar_mul(f_q, -1.0);
    let ls_q = tape.log_sigmoid_op(neg_q);
    let mean_q = tape.mean(ls_q);
    let base = tape.add(mean_p, mean_q)?;
    match g_norm {
        Some(gn) if lambda != 0.0 => {
            let penalty = tape.scalar_mul(gn, lambda);
            tape.sub(base, penalty)
        }
        _ => Ok(base),
    }
}

/// KL estimate from discriminator outputs on p-samples: their mean.
pub fn kl_from_discriminator(f_on_p: &[f64], n_w_draws: Option<usize>) -> KlEstimate {
    assert!(!f_on_p.is_empty(), "need at least one p-sample");
    KlEstimate {
        value: f_on_p.iter().sum::<f64>() / f_on_p.len() as f64,
        n_eval_samples: f_on_p.len(),
        n_w_draws,
    }
}

/// The population-optimal discriminator value at `x`: `log p(x) - log q(x)`,
/// the unique value with `σ(f*) = p/(p+q)`. Used as a validation oracle for
/// trained discriminators.
pub fn optimal_f_target(p: &GaussianSpec, q: &GaussianSpec, x: &[f64]) -> Result<f64> {
    if p.dim() != q.dim() || x.len() != p.dim() {
        return Err(Error::DimensionMismatch(format!(
            "p dim {}, q dim {}, point dim {}",
            p.dim(),
            q.dim(),
            x.len()
        )));
    }
    Ok(p.log_density(x) - q.log_density(x))
}

/// Expand a joint batch of `n` pairs into discriminator inputs: the `n`
/// diagonal pairs `(x_i, y_i)` sample the joint, the `n² - n` off-diagonal
/// pairs `(x_i, y_j)` the product of marginals. Concatenation order is x
/// then y.
pub fn mi_pairing(x: &Tensor, y: &Tensor) -> Result<(Tensor, Tensor)> {
    if x.rows != y.rows {
        return Err(Error::Shape {
            op: "mi_pairing",
            detail: format!("{} x-rows vs {} y-rows", x.rows, y.rows),
        });
    }
    let n = x.rows;
    if n < 2 {
        return Err(Error::InvalidConfig(
            "mutual-information pairing needs at least 2 joint samples".into(),
        ));
    }
    let cols = x.cols + y.cols;
    let mut joint = Vec::with_capacity(n * cols);
    for i in 0..n {
        joint.extend_from_slice(x.row(i));
        joint.extend_from_slice(y.row(i));
    }
    let mut marginal = Vec::with_capacity((n * n - n) * cols);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                marginal.extend_from_slice(x.row(i));
                marginal.extend_from_slice(y.row(j));
            }
        }
    }
    Ok((
        Tensor { rows: n, cols, data: joint, requires_grad: false, grad: None },
        Tensor { rows: n * n - n, cols, data: marginal, requires_grad: false, grad: None },
    ))
}

/// Mutual-information estimate from a trained discriminator: mean f over
/// the joint pairs, the KL machinery applied to p = joint, q = marginals.
pub fn mi_estimate(
    disc: &Discriminator,
    x: &Tensor,
    y: &Tensor,
    n_w_draws: usize,
    rng: &mut RngState,
) -> Result<KlEstimate> {
    let joint = x.hstack(y)?;
    let eval = disc.eval_f(&joint, n_w_draws, rng)?;
    check_finite(&eval.f)?;
    Ok(kl_from_discriminator(&eval.f, eval.n_w_draws))
}
