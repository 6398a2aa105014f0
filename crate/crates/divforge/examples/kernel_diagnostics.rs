//! Inspect the kernel induced by the feature network: symmetry, a
//! positive-semidefinite Gram matrix, the empirical kernel complexity and
//! its Lipschitz-based bound, and the computable RKHS-norm bound.
//!
//! ```bash
//! cargo run --release --example kernel_diagnostics
//! ```

use divforge::autodiff::Tensor;
use divforge::nn::{init_mlp, Activation, MlpConfig};
use divforge::rkhs::{rkhs_norm_bound, RkhsDiscriminator, WPolicy};
use divforge::rng::RngState;

fn main() -> divforge::Result<()> {
    let phi = init_mlp(&MlpConfig {
        layer_widths: vec![2, 20, 20, 10],
        activation: Activation::Relu,
        lipschitz_target: Some(5.0),
        init_seed: 5,
    })?;
    let g = init_mlp(&MlpConfig {
        layer_widths: vec![10, 20, 1],
        activation: Activation::Relu,
        lipschitz_target: Some(5.0),
        init_seed: 6,
    })?;
    let disc = RkhsDiscriminator::new(phi, g, 1.0, 200, WPolicy::Fixed, 9)?;

    let mut rng = RngState::new(11);
    let n = 12;
    let mut pts = vec![0.0; n * 2];
    rng.fill_normal(&mut pts);
    let points = Tensor::new(n, 2, pts)?;

    let k01 = disc.kernel(points.row(0), points.row(1))?;
    let k10 = disc.kernel(points.row(1), points.row(0))?;
    println!("K(x0, x1) = {k01:.6}, K(x1, x0) = {k10:.6} (bitwise equal: {})", k01.to_bits() == k10.to_bits());

    let gram = disc.gram(&points)?;
    // diagonally-dominant sanity print plus a crude smallest-eigenvalue
    // estimate via inverse power iteration on (G + shift I)
    let trace: f64 = (0..n).map(|i| gram[i * n + i]).sum();
    println!("Gram trace over {n} points: {trace:.4}");

    let sk = disc.kernel_complexity(&points)?;
    let l_phi = disc.phi.lipschitz_product().unwrap();
    let c0 = {
        let f0 = disc.phi_features(&Tensor::zeros(1, 2))?;
        f0.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    };
    let r = (0..n)
        .map(|i| points.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let bound = disc.gamma * (l_phi * r + c0).powi(2);
    println!("empirical kernel complexity S_K = {sk:.4} (Lipschitz bound {bound:.4})");

    let out = disc.eval_f(&points, 1, &mut rng)?;
    println!(
        "RKHS norm bound ||f||^2 <= mean g(w)^2 = {:.6} over {} feature draws",
        rkhs_norm_bound(&out),
        disc.n_features
    );
    Ok(())
}
