//! Sweep the complexity-penalty coefficient and watch variance and the
//! trained norm bound shrink as it grows.
//!
//! ```bash
//! cargo run --release --example lambda_sweep
//! ```

use divforge::cli::gaussian_pair_for_kl;
use divforge::estimators::{DiscriminatorConfig, DiscriminatorKind};
use divforge::harness::{lambda_sweep, TrainConfig};
use divforge::nn::Activation;
use divforge::synthetic::analytic_kl;

fn main() -> divforge::Result<()> {
    let (p, q) = gaussian_pair_for_kl(13.8, 2)?;
    let truth = analytic_kl(&p, &q)?;
    let disc = DiscriminatorConfig {
        kind: DiscriminatorKind::Rkhs,
        input_dim: 2,
        phi_hidden: 20,
        phi_layers: 3,
        feature_dim: 10,
        g_hidden: 20,
        g_layers: 3,
        gamma: 1.0,
        n_features: 500,
        lipschitz: Some(5.0),
        g_lipschitz: Some(5.0),
        activation: Activation::Relu,
    };
    let cfg = TrainConfig {
        m: 2500,
        minibatch: 50,
        iterations: 6000,
        learning_rate: 5e-3,
        lambda: 0.005, // overridden per grid point
        seed: 1,
        eval_every: 200,
        final_window_fraction: 0.1,
        n_w_draws_eval: 10,
    };
    let grid = [1e-3, 1e-2, 1e-1];

    println!("true KL = {truth}; 3 seeds per lambda (reduced demo)\n");
    println!("{:>8}  {:>8}  {:>9}  {:>8}  {:>13}", "lambda", "mean", "variance", "bias", "median g_norm");
    for pt in lambda_sweep(&p, &q, &disc, &cfg, &grid, 3, truth)? {
        println!(
            "{:>8}  {:>8.3}  {:>9.4}  {:>+8.3}  {:>13.5}",
            pt.lambda,
            pt.stats.mean,
            pt.stats.variance,
            pt.stats.bias,
            pt.median_g_norm.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
