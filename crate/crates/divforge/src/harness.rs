//! Minibatch training loop, repeat-over-seeds experiment runner, lambda
//! sweeps, MI staircase, and bias/variance summarization.
//!
//! Every run is fully determined by its seed: data pools, weight init,
//! feature draws, and minibatch order all derive from it through tagged
//! substreams. Runs are embarrassingly parallel; the aggregator collects
//! results in seed order, so parallel and sequential execution produce
//! identical summaries.
//!
//! A run whose loss, gradients, or KL estimate leave the finite range is
//! marked diverged and kept as a first-class result: the instability of
//! the unregularized baseline is one of the measurements.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::{Tape, Tensor};
use crate::estimators::{
    kl_from_discriminator, mi_pairing, objective_on_tape, Discriminator, DiscriminatorConfig,
    DiscriminatorKind,
};
use crate::nn::AdamState;
use crate::rng::RngState;
use crate::synthetic::{analytic_mi, rho_for_mi, CorrelatedPairSpec, GaussianSpec};
use crate::{Error, Result};

/// A KL estimate beyond this magnitude marks the run as diverged.
pub const DIVERGENCE_KL_LIMIT: f64 = 1e6;

// substream tags off the run seed
const TAG_DATA_P: u64 = 1;
const TAG_DATA_Q: u64 = 2;
const TAG_INIT: u64 = 3;
const TAG_SHUFFLE_P: u64 = 4;
const TAG_SHUFFLE_Q: u64 = 5;
const TAG_W_TRAIN: u64 = 6;
const TAG_W_EVAL: u64 = 7;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Samples drawn once from each distribution.
    pub m: usize,
    pub minibatch: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// Fraction of evaluation points averaged into the final estimate.
    pub final_window_fraction: f64,
    /// Feature draws averaged per evaluation (rkhs).
    pub n_w_draws_eval: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.minibatch == 0 || self.minibatch > self.m {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= minibatch <= m, got minibatch {} and m {}",
                self.minibatch, self.m
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidConfig("eval-every must be >= 1".into()));
        }
        let fraction_ok = self.final_window_fraction > 0.0 && self.final_window_fraction <= 1.0;
        if !fraction_ok {
            return Err(Error::InvalidConfig(format!(
                "final-window-fraction must lie in (0, 1], got {}",
                self.final_window_fraction
            )));
        }
        if self.n_w_draws_eval == 0 {
            return Err(Error::InvalidConfig("n-w-draws-eval must be >= 1".into()));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning-rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// One evaluation snapshot along a training trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPoint {
    pub iteration: usize,
    pub kl_estimate: f64,
    /// Minibatch objective at that iteration (the maximized quantity).
    pub objective: f64,
    /// Evaluation-time g_norm; None for the plain critic.
    pub g_norm: Option<f64>,
}

/// Everything one training run produced.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub trajectory: Vec<EvalPoint>,
    /// Mean KL estimate over the last window of evaluations; NaN when the
    /// run diverged before the first evaluation.
    pub final_estimate: f64,
    pub diverged: bool,
}

impl RunRecord {
    fn window_len(&self, fraction: f64) -> usize {
        ((self.trajectory.len() as f64 * fraction).ceil() as usize)
            .max(1)
            .min(self.trajectory.len())
    }

    /// Mean trained g_norm over the same window the final estimate uses.
    pub fn final_g_norm(&self, fraction: f64) -> Option<f64> {
        if self.trajectory.is_empty() {
            return None;
        }
        let w = self.window_len(fraction);
        let tail = &self.trajectory[self.trajectory.len() - w..];
        let vals: Vec<f64> = tail.iter().filter_map(|p| p.g_norm).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

/// Cross-seed moments of the per-run final estimates.
#[derive(Clone, Debug, Serialize)]
pub struct SummaryStats {
    pub n_runs: usize,
    pub n_diverged: usize,
    pub mean: f64,
    /// Unbiased (n-1) variance.
    pub variance: f64,
    /// mean - ground_truth.
    pub bias: f64,
    pub min: f64,
    pub max: f64,
    pub finals: Vec<f64>,
}

/// Moments over the non-diverged records. Needs at least two survivors;
/// all-diverged input is rejected with its own error so callers can report
/// the divergence count.
pub fn summarize(records: &[RunRecord], ground_truth: f64) -> Result<SummaryStats> {
    let n_diverged = records.iter().filter(|r| r.diverged).count();
    let finals: Vec<f64> =
        records.iter().filter(|r| !r.diverged).map(|r| r.final_estimate).collect();
    if finals.is_empty() && !records.is_empty() {
        return Err(Error::AllRunsDiverged { n_runs: records.len() });
    }
    if finals.len() < 2 {
        return Err(Error::TooFewRuns { needed: 2, got: finals.len() });
    }
    let n = finals.len() as f64;
    let mean = finals.iter().sum::<f64>() / n;
    let variance = finals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let min = finals.iter().copied().fold(f64::INFINITY, f64::min);
    let max = finals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(SummaryStats {
        n_runs: finals.len(),
        n_diverged,
        mean,
        variance,
        bias: mean - ground_truth,
        min,
        max,
        finals,
    })
}

/// Without-replacement minibatch order, reshuffled each epoch.
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: RngState,
}

impl EpochSampler {
    fn new(n: usize, rng: RngState) -> Self {
        EpochSampler { order: (0..n).collect(), pos: n, rng }
    }

    fn next_batch(&mut self, k: usize) -> Vec<usize> {
        if self.pos + k > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let batch = self.order[self.pos..self.pos + k].to_vec();
        self.pos += k;
        batch
    }
}

/// Per-iteration supplier of (p-batch, q-batch) plus the pool KL_m is
/// evaluated on.
trait BatchSource {
    fn next_batches(&mut self) -> Result<(Tensor, Tensor)>;
    fn eval_pool(&self) -> &Tensor;
}

/// Fixed p and q pools, epoched independently.
struct KlBatches {
    p_pool: Tensor,
    q_pool: Tensor,
    sampler_p: EpochSampler,
    sampler_q: EpochSampler,
    batch: usize,
}

impl BatchSource for KlBatches {
    fn next_batches(&mut self) -> Result<(Tensor, Tensor)> {
        let ip = self.sampler_p.next_batch(self.batch);
        let iq = self.sampler_q.next_batch(self.batch);
        Ok((self.p_pool.gather_rows(&ip), self.q_pool.gather_rows(&iq)))
    }

    fn eval_pool(&self) -> &Tensor {
        &self.p_pool
    }
}

/// Fixed joint pool; each minibatch of pairs is tiled into joint
/// (diagonal) and marginal (off-diagonal) discriminator inputs.
struct MiBatches {
    x_pool: Tensor,
    y_pool: Tensor,
    joint_pool: Tensor,
    sampler: EpochSampler,
    batch: usize,
}

impl BatchSource for MiBatches {
    fn next_batches(&mut self) -> Result<(Tensor, Tensor)> {
        let idx = self.sampler.next_batch(self.batch);
        let xb = self.x_pool.gather_rows(&idx);
        let yb = self.y_pool.gather_rows(&idx);
        mi_pairing(&xb, &yb)
    }

    fn eval_pool(&self) -> &Tensor {
        &self.joint_pool
    }
}

fn is_divergence(err: &Error) -> bool {
    matches!(
        err,
        Error::NonFiniteGradient { .. } | Error::NonFiniteValue { .. } | Error::DegenerateWeight
    )
}

fn run_training(
    mut disc: Discriminator,
    source: &mut dyn BatchSource,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(RunRecord, Discriminator)> {
    let root = RngState::new(seed);
    let mut w_train_rng = root.substream(TAG_W_TRAIN);
    let mut w_eval_rng = root.substream(TAG_W_EVAL);
    let lambda = match disc.kind() {
        DiscriminatorKind::PlainMlp => 0.0,
        DiscriminatorKind::Rkhs => cfg.lambda,
    };
    let mut adam = AdamState::new(cfg.learning_rate);
    let mut trajectory: Vec<EvalPoint> = Vec::new();
    let mut diverged = false;

    'train: for it in 0..cfg.iterations {
        let step = (|| -> Result<f64> {
            let (xp, xq) = source.next_batches()?;
            let p_rows = xp.rows;
            let q_rows = xq.rows;
            let stacked = xp.vstack(&xq)?;
            let mut tape = Tape::new();
            let vars = disc.register(&mut tape);
            let xl = tape.leaf(&stacked);
            let w = disc.draw_w(&mut w_train_rng);
            let (f, g_norm) = disc.forward_train(&mut tape, &vars, xl, w.as_ref())?;
            let f_p = tape.slice_rows(f, 0, p_rows)?;
            let f_q = tape.slice_rows(f, p_rows, q_rows)?;
            let obj = objective_on_tape(&mut tape, f_p, f_q, g_norm, lambda)?;
            let obj_val = tape.scalar_value(obj);
            if !obj_val.is_finite() {
                return Err(Error::NonFiniteValue { context: "training objective" });
            }
            let loss = tape.scalar_mul(obj, -1.0);
            tape.backward(loss)?;
            let ids = vars.ids();
            let mut params = disc.params_mut();
            debug_assert_eq!(ids.len(), params.len());
            let grads: Vec<Vec<f64>> = ids
                .iter()
                .zip(params.iter())
                .map(|(id, (_, p))| match tape.grad(*id) {
                    Some(g) => g.to_vec(),
                    None => vec![0.0; p.len()],
                })
                .collect();
            adam.step(&mut params, &grads)?;
            Ok(obj_val)
        })();

        let obj_val = match step {
            Ok(v) => v,
            Err(e) if is_divergence(&e) => {
                diverged = true;
                break 'train;
            }
            Err(e) => return Err(e),
        };

        if (it + 1) % cfg.eval_every == 0 {
            let eval = match disc.eval_f(source.eval_pool(), cfg.n_w_draws_eval, &mut w_eval_rng) {
                Ok(e) => e,
                Err(e) if is_divergence(&e) => {
                    diverged = true;
                    break 'train;
                }
                Err(e) => return Err(e),
            };
            let est = kl_from_discriminator(&eval.f, eval.n_w_draws);
            if !est.value.is_finite() || est.value.abs() > DIVERGENCE_KL_LIMIT {
                diverged = true;
                break 'train;
            }
            trajectory.push(EvalPoint {
                iteration: it + 1,
                kl_estimate: est.value,
                objective: obj_val,
                g_norm: eval.g_norm,
            });
        }
    }

    let final_estimate = if trajectory.is_empty() {
        diverged = true;
        f64::NAN
    } else {
        let record = RunRecord {
            seed,
            trajectory: trajectory.clone(),
            final_estimate: f64::NAN,
            diverged,
        };
        let w = record.window_len(cfg.final_window_fraction);
        let tail = &trajectory[trajectory.len() - w..];
        tail.iter().map(|p| p.kl_estimate).sum::<f64>() / w as f64
    };
    Ok((RunRecord { seed, trajectory, final_estimate, diverged }, disc))
}

/// Train one discriminator to estimate KL(p || q) from finite pools.
/// Draws m samples from each distribution once, then runs Adam ascent on
/// the (regularized) logistic objective over without-replacement
/// minibatches, recording KL_m over the full p pool every `eval_every`
/// steps. Deterministic per seed.
pub fn train_kl_run(
    p: &GaussianSpec,
    q: &GaussianSpec,
    disc_cfg: &DiscriminatorConfig,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    Ok(train_kl_full(p, q, disc_cfg, cfg)?.0)
}

/// As [`train_kl_run`], also handing back the trained discriminator for
/// diagnostics such as comparing f against the analytic log density ratio.
pub fn train_kl_full(
    p: &GaussianSpec,
    q: &GaussianSpec,
    disc_cfg: &DiscriminatorConfig,
    cfg: &TrainConfig,
) -> Result<(RunRecord, Discriminator)> {
    cfg.validate()?;
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch(format!("p dim {}, q dim {}", p.dim(), q.dim())));
    }
    let root = RngState::new(cfg.seed);
    let p_pool = p.sample(cfg.m, &mut root.substream(TAG_DATA_P));
    let q_pool = q.sample(cfg.m, &mut root.substream(TAG_DATA_Q));
    let disc = disc_cfg.build(root.derive_seed(TAG_INIT), root.derive_seed(TAG_W_TRAIN))?;
    let mut source = KlBatches {
        sampler_p: EpochSampler::new(cfg.m, root.substream(TAG_SHUFFLE_P)),
        sampler_q: EpochSampler::new(cfg.m, root.substream(TAG_SHUFFLE_Q)),
        p_pool,
        q_pool,
        batch: cfg.minibatch,
    };
    run_training(disc, &mut source, cfg, cfg.seed)
}

/// Train one discriminator to estimate MI(x; y) for a correlated Gaussian
/// pair, via the tiled joint/marginal reduction to KL estimation.
pub fn train_mi_run(
    pair: &CorrelatedPairSpec,
    disc_cfg: &DiscriminatorConfig,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    cfg.validate()?;
    if cfg.minibatch < 2 {
        return Err(Error::InvalidConfig("MI training needs minibatch >= 2".into()));
    }
    let root = RngState::new(cfg.seed);
    let (x_pool, y_pool) = pair.sample(cfg.m, &mut root.substream(TAG_DATA_P));
    let joint_pool = x_pool.hstack(&y_pool)?;
    let disc = disc_cfg.build(root.derive_seed(TAG_INIT), root.derive_seed(TAG_W_TRAIN))?;
    let mut source = MiBatches {
        sampler: EpochSampler::new(cfg.m, root.substream(TAG_SHUFFLE_P)),
        x_pool,
        y_pool,
        joint_pool,
        batch: cfg.minibatch,
    };
    Ok(run_training(disc, &mut source, cfg, cfg.seed)?.0)
}

/// Worker pool honoring the `DIVFORGE_THREADS` cap (default: all cores).
fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let n = threads
        .or_else(|| std::env::var("DIVFORGE_THREADS").ok().and_then(|s| s.parse().ok()))
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))
}

fn repeat_runs<F>(n_runs: usize, threads: Option<usize>, job: F) -> Result<Vec<RunRecord>>
where
    F: Fn(usize) -> Result<RunRecord> + Sync,
{
    let pool = thread_pool(threads)?;
    // the closure borrows `job`, so only &F has to cross threads
    #[allow(clippy::redundant_closure)]
    pool.install(|| (0..n_runs).into_par_iter().map(|i| job(i)).collect())
}

/// Run `train_kl_run` under seeds `base.seed + 0 .. base.seed + n_runs - 1`
/// and aggregate the finals. Diverged runs are counted and excluded from
/// the moments.
pub fn repeat_experiment(
    p: &GaussianSpec,
    q: &GaussianSpec,
    disc_cfg: &DiscriminatorConfig,
    base: &TrainConfig,
    n_runs: usize,
    ground_truth: f64,
) -> Result<(SummaryStats, Vec<RunRecord>)> {
    repeat_experiment_with_threads(p, q, disc_cfg, base, n_runs, ground_truth, None)
}

/// As [`repeat_experiment`] with an explicit worker cap, mainly so tests
/// can show parallel == sequential.
pub fn repeat_experiment_with_threads(
    p: &GaussianSpec,
    q: &GaussianSpec,
    disc_cfg: &DiscriminatorConfig,
    base: &TrainConfig,
    n_runs: usize,
    ground_truth: f64,
    threads: Option<usize>,
) -> Result<(SummaryStats, Vec<RunRecord>)> {
    if n_runs < 2 {
        return Err(Error::TooFewRuns { needed: 2, got: n_runs });
    }
    let records = repeat_runs(n_runs, threads, |i| {
        let cfg = TrainConfig { seed: base.seed.wrapping_add(i as u64), ..base.clone() };
        train_kl_run(p, q, disc_cfg, &cfg)
    })?;
    let stats = summarize(&records, ground_truth)?;
    Ok((stats, records))
}

/// One row of a lambda sweep.
#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub lambda: f64,
    pub stats: SummaryStats,
    /// Median (across runs) of the trained g_norm in the final window.
    pub median_g_norm: Option<f64>,
    pub records: Vec<RunRecord>,
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    Some(if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) })
}

/// Repeat the experiment at each lambda on the grid, sharing the base
/// seed, and report per-lambda bias/variance plus the median trained
/// g_norm.
pub fn lambda_sweep(
    p: &GaussianSpec,
    q: &GaussianSpec,
    disc_cfg: &DiscriminatorConfig,
    base: &TrainConfig,
    grid: &[f64],
    n_runs: usize,
    ground_truth: f64,
) -> Result<Vec<SweepPoint>> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("lambda grid must be non-empty".into()));
    }
    if grid.iter().any(|l| l.is_nan() || *l < 0.0) {
        return Err(Error::InvalidConfig("lambda grid values must be >= 0".into()));
    }
    let mut out = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let cfg = TrainConfig { lambda, ..base.clone() };
        let (stats, records) = repeat_experiment(p, q, disc_cfg, &cfg, n_runs, ground_truth)?;
        let g_norms: Vec<f64> = records
            .iter()
            .filter(|r| !r.diverged)
            .filter_map(|r| r.final_g_norm(cfg.final_window_fraction))
            .collect();
        out.push(SweepPoint { lambda, stats, median_g_norm: median(g_norms), records });
    }
    Ok(out)
}

/// One level of the MI staircase.
#[derive(Clone, Debug)]
pub struct StaircasePoint {
    pub target_mi: f64,
    pub stats: SummaryStats,
    pub records: Vec<RunRecord>,
}

/// Train and summarize MI estimation at each target level. Levels must be
/// non-negative and strictly increasing; each level's pair spec comes from
/// inverting the MI formula, so its ground truth is exact by construction.
pub fn mi_staircase(
    dim: usize,
    levels: &[f64],
    disc_cfg: &DiscriminatorConfig,
    base: &TrainConfig,
    n_runs: usize,
) -> Result<Vec<StaircasePoint>> {
    if levels.is_empty() {
        return Err(Error::InvalidConfig("need at least one MI level".into()));
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig("MI levels must be strictly increasing".into()));
    }
    if n_runs < 2 {
        return Err(Error::TooFewRuns { needed: 2, got: n_runs });
    }
    let mut out = Vec::with_capacity(levels.len());
    for &level in levels {
        let rho = rho_for_mi(dim, level)?;
        let pair = CorrelatedPairSpec::new(dim, rho)?;
        let truth = analytic_mi(&pair);
        let records = repeat_runs(n_runs, None, |i| {
            let cfg = TrainConfig { seed: base.seed.wrapping_add(i as u64), ..base.clone() };
            train_mi_run(&pair, disc_cfg, &cfg)
        })?;
        let stats = summarize(&records, truth)?;
        out.push(StaircasePoint { target_mi: truth, stats, records });
    }
    Ok(out)
}

// ---- artifact writers ----

/// Per-run CSV: one row per evaluation, `g_norm` empty for the plain
/// critic. UTF-8, header row, '.' decimal separator.
pub fn write_runs_csv(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut out = String::from("run_id,seed,iteration,kl_estimate,objective,g_norm\n");
    for (run_id, rec) in records.iter().enumerate() {
        for pt in &rec.trajectory {
            let g = pt.g_norm.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{run_id},{},{},{},{},{g}\n",
                rec.seed, pt.iteration, pt.kl_estimate, pt.objective
            ));
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// The on-disk summary schema.
#[derive(Debug, Serialize)]
pub struct SummaryJson {
    pub experiment: String,
    pub ground_truth: f64,
    pub lambda: f64,
    pub n_runs: usize,
    pub n_diverged: usize,
    pub mean: f64,
    pub variance: f64,
    pub bias: f64,
    pub min: f64,
    pub max: f64,
    pub finals: Vec<f64>,
}

impl SummaryJson {
    pub fn new(experiment: &str, ground_truth: f64, lambda: f64, stats: &SummaryStats) -> Self {
        SummaryJson {
            experiment: experiment.to_string(),
            ground_truth,
            lambda,
            n_runs: stats.n_runs,
            n_diverged: stats.n_diverged,
            mean: stats.mean,
            variance: stats.variance,
            bias: stats.bias,
            min: stats.min,
            max: stats.max,
            finals: stats.finals.clone(),
        }
    }
}

pub fn write_summary_json(path: &Path, summary: &SummaryJson) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(serde_json::to_string_pretty(summary)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Sweep CSV: one row per lambda.
pub fn write_sweep_csv(path: &Path, points: &[SweepPoint]) -> Result<()> {
    let mut out = String::from("lambda,mean,variance,bias,n_diverged\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.lambda, p.stats.mean, p.stats.variance, p.stats.bias, p.stats.n_diverged
        ));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;

    fn stub_record(seed: u64, final_estimate: f64) -> RunRecord {
        RunRecord {
            seed,
            trajectory: vec![EvalPoint {
                iteration: 1,
                kl_estimate: final_estimate,
                objective: -1.0,
                g_norm: Some(1.0),
            }],
            final_estimate,
            diverged: false,
        }
    }

    fn tiny_rkhs_cfg() -> DiscriminatorConfig {
        DiscriminatorConfig {
            kind: DiscriminatorKind::Rkhs,
            input_dim: 2,
            phi_hidden: 8,
            phi_layers: 2,
            feature_dim: 4,
            g_hidden: 8,
            g_layers: 2,
            gamma: 1.0,
            n_features: 32,
            lipschitz: Some(5.0),
            g_lipschitz: Some(5.0),
            activation: Activation::Relu,
        }
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            m: 128,
            minibatch: 32,
            iterations: 60,
            learning_rate: 5e-3,
            lambda: 0.005,
            seed: 11,
            eval_every: 20,
            final_window_fraction: 0.5,
            n_w_draws_eval: 2,
        }
    }

    #[test]
    fn summarize_stub_values() {
        let recs: Vec<RunRecord> = [5.0, 5.0].iter().enumerate().map(|(i, &v)| stub_record(i as u64, v)).collect();
        let s = summarize(&recs, 5.0).unwrap();
        assert_eq!((s.mean, s.variance, s.bias), (5.0, 0.0, 0.0));

        let recs: Vec<RunRecord> = [0.0, 2.0].iter().enumerate().map(|(i, &v)| stub_record(i as u64, v)).collect();
        let s = summarize(&recs, 0.5).unwrap();
        assert_eq!((s.mean, s.variance, s.bias), (1.0, 2.0, 0.5));
        assert_eq!((s.min, s.max), (0.0, 2.0));

        let recs: Vec<RunRecord> = [1.0, 2.0, 3.0].iter().enumerate().map(|(i, &v)| stub_record(i as u64, v)).collect();
        let s = summarize(&recs, 2.0).unwrap();
        assert_eq!((s.mean, s.variance), (2.0, 1.0));
    }

    #[test]
    fn summarize_matches_welford_oracle() {
        let mut rng = RngState::new(97);
        let finals: Vec<f64> = (0..30).map(|_| 10.0 * rng.next_normal()).collect();
        let recs: Vec<RunRecord> =
            finals.iter().enumerate().map(|(i, &v)| stub_record(i as u64, v)).collect();
        let s = summarize(&recs, 0.0).unwrap();
        // Welford online moments, an independent accumulation route
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for (i, &x) in finals.iter().enumerate() {
            let delta = x - mean;
            mean += delta / (i + 1) as f64;
            m2 += delta * (x - mean);
        }
        let var = m2 / (finals.len() - 1) as f64;
        assert!((s.mean - mean).abs() < 1e-12);
        assert!((s.variance - var).abs() < 1e-12);
    }

    #[test]
    fn summarize_rejects_empty_and_diverged() {
        assert!(matches!(summarize(&[], 0.0), Err(Error::TooFewRuns { .. })));
        let mut rec = stub_record(0, f64::NAN);
        rec.diverged = true;
        assert!(matches!(
            summarize(&[rec.clone(), rec.clone()], 0.0),
            Err(Error::AllRunsDiverged { n_runs: 2 })
        ));
        let ok = stub_record(1, 1.0);
        assert!(matches!(summarize(&[rec, ok], 0.0), Err(Error::TooFewRuns { got: 1, .. })));
    }

    #[test]
    fn epoch_sampler_covers_pool_each_epoch() {
        let mut s = EpochSampler::new(10, RngState::new(3));
        let mut seen: Vec<usize> = Vec::new();
        for _ in 0..5 {
            seen.extend(s.next_batch(2));
        }
        let mut sorted = seen.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn train_run_is_bit_deterministic() {
        let p = GaussianSpec::standard(2);
        let q = GaussianSpec::standard_with_mean(vec![1.0, 0.0]);
        let cfg = tiny_train_cfg();
        let a = train_kl_run(&p, &q, &tiny_rkhs_cfg(), &cfg).unwrap();
        let b = train_kl_run(&p, &q, &tiny_rkhs_cfg(), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.final_estimate.to_bits(), b.final_estimate.to_bits());
        assert!(!a.trajectory.is_empty());

        // final estimate is the mean KL over the last window of evaluations
        let w = ((a.trajectory.len() as f64 * cfg.final_window_fraction).ceil() as usize).max(1);
        let tail = &a.trajectory[a.trajectory.len() - w..];
        let want = tail.iter().map(|p| p.kl_estimate).sum::<f64>() / w as f64;
        assert_eq!(a.final_estimate.to_bits(), want.to_bits());
    }

    #[test]
    fn parallel_and_sequential_runs_agree() {
        let p = GaussianSpec::standard(2);
        let q = GaussianSpec::standard_with_mean(vec![1.0, 0.0]);
        let cfg = tiny_train_cfg();
        let (s1, r1) =
            repeat_experiment_with_threads(&p, &q, &tiny_rkhs_cfg(), &cfg, 4, 0.5, Some(1))
                .unwrap();
        let (s2, r2) =
            repeat_experiment_with_threads(&p, &q, &tiny_rkhs_cfg(), &cfg, 4, 0.5, Some(2))
                .unwrap();
        assert_eq!(r1, r2);
        assert_eq!(s1.finals, s2.finals);
        assert_eq!(s1.variance.to_bits(), s2.variance.to_bits());
    }

    #[test]
    fn repeat_experiment_rejects_single_run() {
        let p = GaussianSpec::standard(2);
        assert!(matches!(
            repeat_experiment(&p, &p, &tiny_rkhs_cfg(), &tiny_train_cfg(), 1, 0.0),
            Err(Error::TooFewRuns { .. })
        ));
    }

    #[test]
    fn identical_distributions_estimate_near_zero() {
        let p = GaussianSpec::standard(2);
        let cfg = TrainConfig { iterations: 2000, m: 256, minibatch: 32, eval_every: 100, seed: 5, ..tiny_train_cfg() };
        let rec = train_kl_run(&p, &p, &tiny_rkhs_cfg(), &cfg).unwrap();
        assert!(!rec.diverged);
        assert!(rec.final_estimate.abs() <= 0.1, "estimate {}", rec.final_estimate);
    }

    #[test]
    fn zero_iterations_rejected() {
        let cfg = TrainConfig { iterations: 0, ..tiny_train_cfg() };
        let p = GaussianSpec::standard(2);
        assert!(train_kl_run(&p, &p, &tiny_rkhs_cfg(), &cfg).is_err());
    }

    #[test]
    fn independent_pair_mi_estimate_near_zero() {
        // rho = 0: joint equals product of marginals, true MI 0. Needs
        // enough steps to converge: KL_m of an under-trained f is just the
        // pool mean of a large random function.
        let pair = CorrelatedPairSpec::new(2, 0.0).unwrap();
        let disc = DiscriminatorConfig { input_dim: 4, n_features: 32, ..tiny_rkhs_cfg() };
        let cfg = TrainConfig {
            m: 1024,
            minibatch: 16,
            iterations: 2500,
            eval_every: 250,
            learning_rate: 1e-3,
            lambda: 1e-5,
            ..tiny_train_cfg()
        };
        let rec = train_mi_run(&pair, &disc, &cfg).unwrap();
        assert!(!rec.diverged);
        assert!(rec.final_estimate.abs() <= 0.3, "estimate {}", rec.final_estimate);
        let iters: Vec<usize> = rec.trajectory.iter().map(|p| p.iteration).collect();
        assert!(iters.windows(2).all(|w| w[0] < w[1]), "iterations not strictly increasing");
    }

    #[test]
    fn sweep_with_zero_grid_matches_unregularized_experiment() {
        let p = GaussianSpec::standard(2);
        let q = GaussianSpec::standard_with_mean(vec![0.8, 0.0]);
        let cfg = tiny_train_cfg();
        let points = lambda_sweep(&p, &q, &tiny_rkhs_cfg(), &cfg, &[0.0], 3, 0.32).unwrap();
        assert_eq!(points.len(), 1);
        let zero_cfg = TrainConfig { lambda: 0.0, ..cfg };
        let (stats, _) = repeat_experiment(&p, &q, &tiny_rkhs_cfg(), &zero_cfg, 3, 0.32).unwrap();
        assert_eq!(points[0].stats.finals, stats.finals);
        assert_eq!(points[0].stats.variance.to_bits(), stats.variance.to_bits());
    }

    #[test]
    fn mi_run_trains_and_records() {
        let pair = CorrelatedPairSpec::new(2, 0.5).unwrap();
        let cfg = TrainConfig { m: 64, minibatch: 8, iterations: 40, eval_every: 20, ..tiny_train_cfg() };
        let disc = DiscriminatorConfig { input_dim: 4, ..tiny_rkhs_cfg() };
        let rec = train_mi_run(&pair, &disc, &cfg).unwrap();
        assert_eq!(rec.trajectory.len(), 2);
        assert!(rec.trajectory.iter().all(|p| p.g_norm.is_some()));
    }

    #[test]
    fn staircase_rejects_bad_levels() {
        let disc = DiscriminatorConfig { input_dim: 4, ..tiny_rkhs_cfg() };
        let cfg = tiny_train_cfg();
        assert!(mi_staircase(2, &[], &disc, &cfg, 2).is_err());
        assert!(mi_staircase(2, &[2.0, 2.0], &disc, &cfg, 2).is_err());
        assert!(mi_staircase(2, &[4.0, 2.0], &disc, &cfg, 2).is_err());
    }

    #[test]
    fn csv_and_json_artifacts_round_trip() {
        let dir = std::env::temp_dir().join(format!("divforge-harness-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let recs = vec![stub_record(7, 1.25), {
            let mut r = stub_record(8, 2.5);
            r.trajectory[0].g_norm = None;
            r
        }];
        let csv_path = dir.join("runs.csv");
        write_runs_csv(&csv_path, &recs).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "run_id,seed,iteration,kl_estimate,objective,g_norm");
        assert_eq!(lines[1], "0,7,1,1.25,-1,1");
        assert_eq!(lines[2], "1,8,1,2.5,-1,");

        let stats = summarize(&recs, 1.0).unwrap();
        let json_path = dir.join("summary.json");
        write_summary_json(&json_path, &SummaryJson::new("kl-gauss", 1.0, 0.005, &stats)).unwrap();
        let text = std::fs::read_to_string(&json_path).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed["experiment"], "kl-gauss");
        assert_eq!(parsed["n_runs"], 2);
        assert_eq!(parsed["finals"].as_array().unwrap().len(), 2);

        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn sweep_csv_has_one_row_per_lambda() {
        let dir = std::env::temp_dir().join(format!("divforge-sweep-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let stats = summarize(&[stub_record(0, 1.0), stub_record(1, 2.0)], 1.0).unwrap();
        let points: Vec<SweepPoint> = [0.001, 0.01]
            .iter()
            .map(|&lambda| SweepPoint {
                lambda,
                stats: stats.clone(),
                median_g_norm: Some(1.0),
                records: vec![],
            })
            .collect();
        let path = dir.join("sweep.csv");
        write_sweep_csv(&path, &points).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(1).unwrap().starts_with("0.001,"));
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
