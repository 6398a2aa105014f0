//! Check analytic gradients against central finite differences, from a
//! single primitive up to the full regularized training objective.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

use divforge::autodiff::{grad_check, Tensor};
use divforge::estimators::{objective_on_tape, DiscriminatorConfig, DiscriminatorKind};
use divforge::nn::Activation;
use divforge::rng::RngState;

fn main() -> divforge::Result<()> {
    // 1. a quadratic: gradients are exact up to fd truncation
    let err = grad_check(
        |t, x| {
            let sq = t.mul(x, x)?;
            Ok(t.sum(sq))
        },
        &Tensor::column(vec![1.0, 2.0, -0.5]),
        1e-6,
    )?;
    println!("sum(x^2)                       max rel err {err:.2e}");

    // 2. log-sigmoid of a dot product
    let mut rng = RngState::new(3);
    let mut wts = vec![0.0; 5];
    let mut pt = vec![0.0; 5];
    rng.fill_normal(&mut wts);
    rng.fill_normal(&mut pt);
    let err = grad_check(
        move |t, x| {
            let w = t.leaf(&Tensor::new(1, 5, wts.clone())?);
            let d = t.matmul(w, x)?;
            Ok(t.log_sigmoid_op(d))
        },
        &Tensor::column(pt),
        1e-6,
    )?;
    println!("log sigmoid(w . x)             max rel err {err:.2e}");

    // 3. the full regularized objective on a tiny batch, differentiated
    //    w.r.t. every parameter of both networks
    let cfg = DiscriminatorConfig {
        kind: DiscriminatorKind::Rkhs,
        input_dim: 2,
        phi_hidden: 8,
        phi_layers: 2,
        feature_dim: 4,
        g_hidden: 8,
        g_layers: 1,
        gamma: 1.0,
        n_features: 16,
        lipschitz: Some(5.0),
        g_lipschitz: Some(5.0),
        activation: Activation::Relu,
    };
    let disc = cfg.build(11, 12)?;
    let divforge::estimators::Discriminator::Rkhs(mut disc) = disc else { unreachable!() };
    // freeze the power-iteration vectors so the function is exactly the one
    // the tape differentiates
    for l in disc.phi.layers.iter_mut().chain(disc.g.layers.iter_mut()) {
        if let Some(s) = l.spectral.as_mut() {
            s.power_iters_eval = 0;
        }
    }
    let w = disc.sample_w(&mut rng);
    let mut xp = vec![0.0; 6];
    let mut xq = vec![0.0; 6];
    rng.fill_normal(&mut xp);
    rng.fill_normal(&mut xq);
    let xp = Tensor::new(3, 2, xp)?;
    let xq = Tensor::new(3, 2, xq)?;
    let scale = disc.forward_scale();
    let mut flat = disc.phi.flat_params();
    flat.extend(disc.g.flat_params());
    let n_params = flat.len();
    let err = grad_check(
        move |t, p| {
            let mut off = 0;
            let phi_vars = disc.phi.vars_from_flat(t, p, &mut off)?;
            let g_vars = disc.g.vars_from_flat(t, p, &mut off)?;
            let stacked = xp.vstack(&xq)?;
            let xl = t.leaf(&stacked);
            let phix = disc.phi.forward_eval_with_vars(t, &phi_vars, xl)?;
            let w_leaf = t.leaf_from(w.n_features, w.dim, w.w.clone(), false);
            let gw = disc.g.forward_eval_with_vars(t, &g_vars, w_leaf)?;
            let wt = t.transpose(w_leaf);
            let tt = t.matmul(wt, gw)?;
            let raw = t.matmul(phix, tt)?;
            let f = t.scalar_mul(raw, scale);
            let sq = t.square(gw);
            let gn = t.mean(sq);
            let f_p = t.slice_rows(f, 0, 3)?;
            let f_q = t.slice_rows(f, 3, 3)?;
            objective_on_tape(t, f_p, f_q, Some(gn), 0.005)
        },
        &Tensor::column(flat),
        1e-6,
    )?;
    println!("full objective ({n_params} params)    max rel err {err:.2e}");
    Ok(())
}
