//! The RKHS-constructed discriminator.
//!
//! A function built as `f(x) = ∫ g(w) φ(x)ᵀw dτ(w)` with `w ~ N(0, γI)`
//! lies in the RKHS of the kernel `K(x,t) = γ φ(x)ᵀφ(t)`, and its squared
//! RKHS norm is bounded by `‖g‖²_{L₂(dτ)}`. This module implements the
//! Monte-Carlo approximation of that construction over `D` feature draws,
//!
//! `f(x) = √(2/D) · (1/D) · Σ_k g(w_k) · φ(x)ᵀw_k`,
//!
//! with `w_k ~ N(0, 2γ I)` drawn fresh on every training forward, plus the
//! induced kernel, an empirical kernel-complexity estimate, and the
//! computable norm bound `mean_k g(w_k)²` that the training objective
//! penalizes.

use crate::autodiff::{Tape, Tensor, VarId};
use crate::mat;
use crate::nn::{Mlp, MlpVars};
use crate::rng::RngState;
use crate::{Error, Result};

/// How feature draws behave across forwards.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WPolicy {
    /// Fresh `w` on every training forward (the default).
    ResampleEachForward,
    /// One `w` drawn at construction and reused; for deterministic tests
    /// and evaluation.
    Fixed,
}

/// A batch of feature draws, `D x d` row-major, rows i.i.d. N(0, 2γ I).
#[derive(Clone, Debug)]
pub struct WBatch {
    pub w: Vec<f64>,
    pub n_features: usize,
    pub dim: usize,
}

/// Tape handles produced by a training forward.
#[derive(Clone, Copy, Debug)]
pub struct ForwardResult {
    /// `batch x 1` discriminator outputs.
    pub f_values: VarId,
    /// Scalar `mean_k g(w_k)²`.
    pub g_norm: VarId,
}

/// Plain-valued output of an evaluation forward.
#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub f: Vec<f64>,
    pub g_norm: f64,
    pub n_w_draws: usize,
}

/// Computable upper bound on the squared RKHS norm of `f`: the `g_norm`
/// carried by a forward. This is the radius diagnostic the harness logs.
pub fn rkhs_norm_bound(result: &EvalOutput) -> f64 {
    result.g_norm
}

#[derive(Clone, Debug)]
pub struct RkhsDiscriminator {
    /// Feature map, input dim n -> feature dim d.
    pub phi: Mlp,
    /// Feature weighting, d -> 1.
    pub g: Mlp,
    /// Gaussian feature scale; the kernel is `γ φ(x)ᵀφ(t)`.
    pub gamma: f64,
    /// Number of feature draws D.
    pub n_features: usize,
    pub w_policy: WPolicy,
    pub w_seed: u64,
    fixed_w: Option<WBatch>,
}

impl RkhsDiscriminator {
    pub fn new(
        phi: Mlp,
        g: Mlp,
        gamma: f64,
        n_features: usize,
        w_policy: WPolicy,
        w_seed: u64,
    ) -> Result<Self> {
        if phi.output_dim() != g.input_dim() {
            return Err(Error::InvalidConfig(format!(
                "phi outputs {} features but g takes {}",
                phi.output_dim(),
                g.input_dim()
            )));
        }
        if g.output_dim() != 1 {
            return Err(Error::InvalidConfig("g must be scalar-valued".into()));
        }
        if gamma.is_nan() || gamma <= 0.0 {
            return Err(Error::InvalidConfig(format!("gamma must be positive, got {gamma}")));
        }
        if n_features == 0 {
            return Err(Error::InvalidConfig("need at least one feature draw".into()));
        }
        let mut disc = RkhsDiscriminator {
            phi,
            g,
            gamma,
            n_features,
            w_policy,
            w_seed,
            fixed_w: None,
        };
        if w_policy == WPolicy::Fixed {
            let mut rng = RngState::new(w_seed);
            disc.fixed_w = Some(disc.sample_w(&mut rng));
        }
        Ok(disc)
    }

    pub fn input_dim(&self) -> usize {
        self.phi.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.phi.output_dim()
    }

    /// Scale in front of the feature sum: `√(2/D) / D`.
    pub fn forward_scale(&self) -> f64 {
        (2.0 / self.n_features as f64).sqrt() / self.n_features as f64
    }

    /// Draw a `D x d` feature batch with entries N(0, 2γ).
    pub fn sample_w(&self, rng: &mut RngState) -> WBatch {
        let d = self.feature_dim();
        let std = (2.0 * self.gamma).sqrt();
        let mut w = vec![0.0; self.n_features * d];
        for v in w.iter_mut() {
            *v = std * rng.next_normal();
        }
        WBatch { w, n_features: self.n_features, dim: d }
    }

    pub fn fixed_w(&self) -> Option<&WBatch> {
        self.fixed_w.as_ref()
    }

    fn check_w(&self, w: &WBatch) -> Result<()> {
        if w.dim != self.feature_dim() || w.n_features != self.n_features {
            return Err(Error::Shape {
                op: "rkhs_forward",
                detail: format!(
                    "w is {}x{}, discriminator expects {}x{}",
                    w.n_features,
                    w.dim,
                    self.n_features,
                    self.feature_dim()
                ),
            });
        }
        Ok(())
    }

    /// Training forward on the tape. Differentiable w.r.t. the `phi` and
    /// `g` parameters behind `phi_vars` / `g_vars`; `w` enters as a
    /// constant. The matrix product is associated as `Φ (Wᵀ g)`, which is
    /// the same sum per output as the literal `(Φ Wᵀ) g` at a fraction of
    /// the cost.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        phi_vars: &MlpVars,
        g_vars: &MlpVars,
        x: VarId,
        w: &WBatch,
    ) -> Result<ForwardResult> {
        self.check_w(w)?;
        let phix = self.phi.forward_train(tape, phi_vars, x)?;
        let w_leaf = tape.leaf_from(w.n_features, w.dim, w.w.clone(), false);
        let gw = self.g.forward_train(tape, g_vars, w_leaf)?;
        let wt = tape.transpose(w_leaf);
        let t = tape.matmul(wt, gw)?;
        let raw = tape.matmul(phix, t)?;
        let f_values = tape.scalar_mul(raw, self.forward_scale());
        let sq = tape.square(gw);
        let g_norm = tape.mean(sq);
        Ok(ForwardResult { f_values, g_norm })
    }

    /// Feature map `φ(x)` for a batch of points, evaluation mode.
    pub fn phi_features(&self, x: &Tensor) -> Result<Tensor> {
        self.phi.infer(x)
    }

    /// `g(w_k)` for each row of a feature batch, evaluation mode.
    pub fn g_values(&self, w: &WBatch) -> Result<Vec<f64>> {
        let wt = Tensor::new(w.n_features, w.dim, w.w.clone())?;
        Ok(self.g.infer(&wt)?.data)
    }

    /// Evaluation forward: `f(x)` averaged over `n_draws` independent
    /// feature batches (or the stored batch under the fixed policy), plus
    /// the matching average `g_norm`. Pure: identical inputs and state give
    /// bit-identical outputs.
    pub fn eval_f(&self, x: &Tensor, n_draws: usize, rng: &mut RngState) -> Result<EvalOutput> {
        assert!(n_draws >= 1);
        let feats = self.phi_features(x)?;
        let d = self.feature_dim();
        let scale = self.forward_scale();
        let mut f_acc = vec![0.0; x.rows];
        let mut g_norm_acc = 0.0;
        let draws: Vec<WBatch> = match self.w_policy {
            WPolicy::Fixed => vec![self.fixed_w.clone().expect("fixed policy stores w")],
            WPolicy::ResampleEachForward => (0..n_draws).map(|_| self.sample_w(rng)).collect(),
        };
        for w in &draws {
            self.check_w(w)?;
            let g = self.g_values(w)?;
            let t = mat::matvec_t(&w.w, &g, w.n_features, d);
            for (acc, row) in f_acc.iter_mut().zip(0..x.rows) {
                *acc += scale * mat::dot(feats.row(row), &t);
            }
            g_norm_acc += g.iter().map(|v| v * v).sum::<f64>() / g.len() as f64;
        }
        let n = draws.len() as f64;
        for v in f_acc.iter_mut() {
            *v /= n;
        }
        Ok(EvalOutput { f: f_acc, g_norm: g_norm_acc / n, n_w_draws: draws.len() })
    }

    /// The induced kernel `K(x,t) = γ ⟨φ(x), φ(t)⟩`.
    pub fn kernel(&self, x: &[f64], t: &[f64]) -> Result<f64> {
        let n = self.input_dim();
        let fx = self.phi_features(&Tensor::new(1, n, x.to_vec())?)?;
        let ft = self.phi_features(&Tensor::new(1, n, t.to_vec())?)?;
        Ok(self.gamma * mat::dot(&fx.data, &ft.data))
    }

    /// Full Gram matrix over a point set, one feature pass.
    pub fn gram(&self, points: &Tensor) -> Result<Vec<f64>> {
        if points.rows == 0 {
            return Err(Error::EmptyPointSet);
        }
        let feats = self.phi_features(points)?;
        let n = points.rows;
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                k[i * n + j] = self.gamma * mat::dot(feats.row(i), feats.row(j));
            }
        }
        Ok(k)
    }

    /// Empirical kernel complexity: `max_{x,t} K(x,t)` over all pairs from
    /// the point set, including x = t.
    pub fn kernel_complexity(&self, points: &Tensor) -> Result<f64> {
        if points.rows == 0 {
            return Err(Error::EmptyPointSet);
        }
        let feats = self.phi_features(points)?;
        let mut best = f64::NEG_INFINITY;
        for i in 0..points.rows {
            for j in i..points.rows {
                best = best.max(self.gamma * mat::dot(feats.row(i), feats.row(j)));
            }
        }
        Ok(best)
    }
}
