//! Watch power iteration drive a layer's largest singular value onto its
//! Lipschitz target, and the resulting bound on a whole network.
//!
//! ```bash
//! cargo run --release --example spectral_norm
//! ```

use divforge::autodiff::Tensor;
use divforge::nn::{init_mlp, spectral_normalize, Activation, MlpConfig};
use divforge::rng::RngState;

fn main() -> divforge::Result<()> {
    let target = 5.0;
    let mut net = init_mlp(&MlpConfig {
        layer_widths: vec![6, 16, 16, 1],
        activation: Activation::Relu,
        lipschitz_target: Some(target),
        init_seed: 42,
    })?;

    println!("largest singular value of layer 0's effective weight (target {target}):");
    for iters in [1usize, 2, 5, 10, 30] {
        let mut probe = net.layers[0].clone();
        let w_eff = spectral_normalize(&mut probe, iters)?;
        // crude sigma check: power-iterate the *effective* weight hard
        let mut check = probe.clone();
        check.weight = w_eff;
        check.spectral.as_mut().unwrap().lipschitz_target = 1.0;
        let rescaled = spectral_normalize(&mut check, 200)?;
        // rescaled = w_eff / sigma(w_eff), so sigma = w_eff[i] / rescaled[i]
        let idx = rescaled.iter().position(|v| v.abs() > 1e-9).unwrap();
        let sigma = check.weight[idx] / rescaled[idx];
        println!("  {iters:>3} power iterations -> sigma {sigma:.6}");
    }

    // empirical Lipschitz ratio of the whole net never exceeds the product
    // of the per-layer targets
    let bound = net.lipschitz_product().unwrap();
    let mut rng = RngState::new(7);
    let n = 20_000;
    let mut a = vec![0.0; n * 6];
    let mut b = vec![0.0; n * 6];
    rng.fill_normal(&mut a);
    rng.fill_normal(&mut b);
    let ya = net.infer(&Tensor::new(n, 6, a.clone())?)?;
    let yb = net.infer(&Tensor::new(n, 6, b.clone())?)?;
    let mut worst = 0.0_f64;
    for i in 0..n {
        let dx: f64 =
            (0..6).map(|j| (a[i * 6 + j] - b[i * 6 + j]).powi(2)).sum::<f64>().sqrt();
        if dx > 1e-9 {
            worst = worst.max((ya.data[i] - yb.data[i]).abs() / dx);
        }
    }
    println!("\nempirical Lipschitz ratio over {n} pairs: {worst:.3} (bound {bound})");
    let _ = &mut net;
    Ok(())
}
