//! MLP layers, Lipschitz-targeted spectral normalization, and Adam.
//!
//! A [`LinearLayer`] may carry a [`SpectralNormState`]; when it does, the
//! weight actually used in a forward pass is rescaled so that its largest
//! singular value equals the layer's Lipschitz target `k`. The singular
//! value is estimated by power iteration: warm-started persistent vectors
//! with one iteration per training forward, and a converged 30-iteration
//! estimate for evaluation. Gradients flow through the weight in both the
//! numerator and the norm estimate, with `u` and `v` treated as constants
//! of the current step.

use crate::autodiff::{Tape, Tensor, VarId};
use crate::mat;
use crate::rng::RngState;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    LeakyRelu,
}

/// Persistent power-iteration state for one spectrally normalized layer.
#[derive(Clone, Debug)]
pub struct SpectralNormState {
    /// Target largest singular value of the effective weight.
    pub lipschitz_target: f64,
    /// Left vector, length `out_dim`, unit norm.
    pub u: Vec<f64>,
    /// Right vector, length `in_dim`, unit norm.
    pub v: Vec<f64>,
    pub power_iters_train: usize,
    pub power_iters_eval: usize,
}

#[derive(Clone, Debug)]
pub struct LinearLayer {
    /// `out_dim x in_dim`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub spectral: Option<SpectralNormState>,
}

/// Runs `iters` power iterations in place and returns the spectral norm
/// estimate `u' W v`. Fails on an effectively zero weight matrix.
fn power_iterate(
    weight: &[f64],
    out_dim: usize,
    in_dim: usize,
    u: &mut [f64],
    v: &mut [f64],
    iters: usize,
) -> Result<f64> {
    for _ in 0..iters {
        let wu = mat::matvec(weight, v, out_dim, in_dim);
        let n = mat::norm2(&wu);
        if n < 1e-300 {
            return Err(Error::DegenerateWeight);
        }
        for (ui, wi) in u.iter_mut().zip(&wu) {
            *ui = wi / n;
        }
        let wv = mat::matvec_t(weight, u, out_dim, in_dim);
        let n = mat::norm2(&wv);
        if n < 1e-300 {
            return Err(Error::DegenerateWeight);
        }
        for (vi, wi) in v.iter_mut().zip(&wv) {
            *vi = wi / n;
        }
    }
    let wv = mat::matvec(weight, v, out_dim, in_dim);
    let sigma = mat::dot(u, &wv);
    if sigma.abs() < 1e-300 {
        return Err(Error::DegenerateWeight);
    }
    Ok(sigma)
}

/// Effective weight of a spectrally normalized layer: power-iterates the
/// layer's persistent `u`, `v` for `iters` steps and returns
/// `W * (k / sigma_hat)`.
pub fn spectral_normalize(layer: &mut LinearLayer, iters: usize) -> Result<Vec<f64>> {
    assert!(iters >= 1);
    let (out_dim, in_dim) = (layer.out_dim, layer.in_dim);
    let spec = layer
        .spectral
        .as_mut()
        .ok_or_else(|| Error::InvalidConfig("layer has no spectral norm state".into()))?;
    let sigma = power_iterate(&layer.weight, out_dim, in_dim, &mut spec.u, &mut spec.v, iters)?;
    let scale = spec.lipschitz_target / sigma;
    Ok(layer.weight.iter().map(|w| w * scale).collect())
}

/// Network configuration. `layer_widths` runs input to output, so a net
/// with one hidden layer of 20 mapping 2 -> 1 is `[2, 20, 1]`.
#[derive(Clone, Debug)]
pub struct MlpConfig {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    /// Lipschitz target applied to every layer, or None for a plain net.
    pub lipschitz_target: Option<f64>,
    pub init_seed: u64,
}

/// Tape handles for one registered parameter set, `(weight, bias)` per layer.
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<(VarId, VarId)>,
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<LinearLayer>,
    pub activation: Activation,
}

/// Builds a network from `config`: weights drawn from Normal(0, 2/fan_in),
/// biases zero, deterministic in `init_seed`.
pub fn init_mlp(config: &MlpConfig) -> Result<Mlp> {
    if config.layer_widths.len() < 2 {
        return Err(Error::InvalidConfig("need at least one layer".into()));
    }
    if config.layer_widths.contains(&0) {
        return Err(Error::InvalidConfig("layer widths must be positive".into()));
    }
    if let Some(k) = config.lipschitz_target {
        if k.is_nan() || k <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "lipschitz target must be positive, got {k}"
            )));
        }
    }
    let root = RngState::new(config.init_seed);
    let mut layers = Vec::with_capacity(config.layer_widths.len() - 1);
    for (idx, pair) in config.layer_widths.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let mut rng = root.substream(idx as u64);
        let std = (2.0 / fan_in as f64).sqrt();
        let mut weight = vec![0.0; fan_out * fan_in];
        for w in weight.iter_mut() {
            *w = std * rng.next_normal();
        }
        let spectral = config.lipschitz_target.map(|k| {
            let mut u = vec![0.0; fan_out];
            let mut v = vec![0.0; fan_in];
            rng.fill_normal(&mut u);
            rng.fill_normal(&mut v);
            let (nu, nv) = (mat::norm2(&u), mat::norm2(&v));
            u.iter_mut().for_each(|x| *x /= nu);
            v.iter_mut().for_each(|x| *x /= nv);
            SpectralNormState {
                lipschitz_target: k,
                u,
                v,
                power_iters_train: 1,
                power_iters_eval: 30,
            }
        });
        layers.push(LinearLayer {
            weight,
            bias: vec![0.0; fan_out],
            in_dim: fan_in,
            out_dim: fan_out,
            spectral,
        });
    }
    Ok(Mlp { layers, activation: config.activation })
}

impl Mlp {
    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    /// Product of the per-layer Lipschitz targets, when every layer has one.
    pub fn lipschitz_product(&self) -> Option<f64> {
        self.layers
            .iter()
            .map(|l| l.spectral.as_ref().map(|s| s.lipschitz_target))
            .product()
    }

    /// Named mutable views of all parameters, weight then bias per layer.
    pub fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let LinearLayer { weight, bias, .. } = layer;
            out.push((format!("layer{i}.weight"), weight.as_mut_slice()));
            out.push((format!("layer{i}.bias"), bias.as_mut_slice()));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Register every parameter as a grad-requiring leaf.
    pub fn register(&self, tape: &mut Tape) -> MlpVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let w = tape.leaf_from(l.out_dim, l.in_dim, l.weight.clone(), true);
                let b = tape.leaf_from(1, l.out_dim, l.bias.clone(), true);
                (w, b)
            })
            .collect();
        MlpVars { layers }
    }

    /// Build parameter vars by slicing a flat `(param_count x 1)` tape
    /// vector, in [`Mlp::params_mut`] order. Used by gradient checks that
    /// differentiate a whole network at once.
    pub fn vars_from_flat(&self, tape: &mut Tape, flat: VarId, offset: &mut usize) -> Result<MlpVars> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let wlen = l.weight.len();
            let wv = tape.slice_rows(flat, *offset, wlen)?;
            let w = tape.reshape(wv, l.out_dim, l.in_dim)?;
            *offset += wlen;
            let bv = tape.slice_rows(flat, *offset, l.bias.len())?;
            let b = tape.reshape(bv, 1, l.out_dim)?;
            *offset += l.bias.len();
            layers.push((w, b));
        }
        Ok(MlpVars { layers })
    }

    /// Flat copy of all parameters in `params_mut` order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    fn apply_activation(&self, tape: &mut Tape, x: VarId) -> VarId {
        match self.activation {
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu => tape.leaky_relu(x),
        }
    }

    /// One affine layer on the tape. For spectral layers the effective
    /// weight is `W * (k / sigma_hat)` with `sigma_hat = u' W v` computed
    /// in-graph from the supplied constant `u`, `v`.
    fn layer_forward(
        &self,
        tape: &mut Tape,
        layer: &LinearLayer,
        w: VarId,
        b: VarId,
        uv: Option<(&[f64], &[f64])>,
        x: VarId,
    ) -> Result<VarId> {
        let w_eff = match (layer.spectral.as_ref(), uv) {
            (Some(spec), Some((u, v))) => {
                let u_row = tape.leaf_from(1, layer.out_dim, u.to_vec(), false);
                let v_col = tape.leaf_from(layer.in_dim, 1, v.to_vec(), false);
                let uw = tape.matmul(u_row, w)?;
                let sigma = tape.matmul(uw, v_col)?;
                let inv = tape.recip(sigma);
                let scale = tape.scalar_mul(inv, spec.lipschitz_target);
                tape.mul(w, scale)?
            }
            _ => w,
        };
        let wt = tape.transpose(w_eff);
        let xw = tape.matmul(x, wt)?;
        // bias broadcast across rows via a constant ones column
        let (batch, _) = tape.dims(x);
        let ones = tape.leaf_from(batch, 1, vec![1.0; batch], false);
        let brep = tape.matmul(ones, b)?;
        tape.add(xw, brep)
    }

    fn forward_with_uv(
        &self,
        tape: &mut Tape,
        vars: &MlpVars,
        x: VarId,
        uv: &[Option<(Vec<f64>, Vec<f64>)>],
    ) -> Result<VarId> {
        let (_, in_cols) = tape.dims(x);
        if in_cols != self.input_dim() {
            return Err(Error::Shape {
                op: "mlp_forward",
                detail: format!("input width {in_cols}, first layer expects {}", self.input_dim()),
            });
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (w, b) = vars.layers[i];
            let uv_ref = uv[i].as_ref().map(|(u, v)| (u.as_slice(), v.as_slice()));
            h = self.layer_forward(tape, layer, w, b, uv_ref, h)?;
            if i != last {
                h = self.apply_activation(tape, h);
            }
        }
        Ok(h)
    }

    /// Training forward: advances each spectral layer's persistent power
    /// iteration by `power_iters_train` steps, then builds the graph.
    pub fn forward_train(&mut self, tape: &mut Tape, vars: &MlpVars, x: VarId) -> Result<VarId> {
        let mut uv = Vec::with_capacity(self.layers.len());
        for layer in self.layers.iter_mut() {
            let (out_dim, in_dim) = (layer.out_dim, layer.in_dim);
            match layer.spectral.as_mut() {
                Some(spec) => {
                    power_iterate(
                        &layer.weight,
                        out_dim,
                        in_dim,
                        &mut spec.u,
                        &mut spec.v,
                        spec.power_iters_train,
                    )?;
                    uv.push(Some((spec.u.clone(), spec.v.clone())));
                }
                None => uv.push(None),
            }
        }
        let this: &Mlp = self;
        this.forward_with_uv(tape, vars, x, &uv)
    }

    /// Evaluation forward with externally supplied vars: converges a local
    /// copy of each power iteration (`power_iters_eval` steps) without
    /// touching persistent state, so repeated calls are pure.
    pub fn forward_eval_with_vars(&self, tape: &mut Tape, vars: &MlpVars, x: VarId) -> Result<VarId> {
        let mut uv = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match layer.spectral.as_ref() {
                Some(spec) => {
                    let mut u = spec.u.clone();
                    let mut v = spec.v.clone();
                    if spec.power_iters_eval > 0 {
                        power_iterate(
                            &layer.weight,
                            layer.out_dim,
                            layer.in_dim,
                            &mut u,
                            &mut v,
                            spec.power_iters_eval,
                        )?;
                    }
                    uv.push(Some((u, v)));
                }
                None => uv.push(None),
            }
        }
        self.forward_with_uv(tape, vars, x, &uv)
    }

    /// Evaluation forward from the stored parameters (no gradients).
    pub fn forward_eval(&self, tape: &mut Tape, x: VarId) -> Result<VarId> {
        let vars = MlpVars {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    let w = tape.leaf_from(l.out_dim, l.in_dim, l.weight.clone(), false);
                    let b = tape.leaf_from(1, l.out_dim, l.bias.clone(), false);
                    (w, b)
                })
                .collect(),
        };
        self.forward_eval_with_vars(tape, &vars, x)
    }

    /// Evaluate the network on plain data.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xid = tape.leaf(x);
        let out = self.forward_eval(&mut tape, xid)?;
        let (r, c) = tape.dims(out);
        Tensor::new(r, c, tape.value(out).to_vec())
    }
}

/// Adam optimizer state with community-standard defaults
/// (beta1 0.9, beta2 0.999, epsilon 1e-8).
#[derive(Clone, Debug)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            moments: Vec::new(),
        }
    }

    /// One bias-corrected descent step, in place. `params` and `grads`
    /// correspond index-wise; a NaN or infinite gradient aborts with the
    /// parameter's name.
    pub fn step(&mut self, params: &mut [(String, &mut [f64])], grads: &[Vec<f64>]) -> Result<()> {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|(_, p)| (vec![0.0; p.len()], vec![0.0; p.len()]))
                .collect();
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(Error::Shape {
                    op: "adam_step",
                    detail: format!("parameter `{name}` has {} values, gradient {}", p.len(), g.len()),
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient { parameter: name.clone() });
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((_, p), g), (m, v)) in params.iter_mut().zip(grads).zip(self.moments.iter_mut()) {
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    /// Largest singular value via Jacobi eigendecomposition of W'W,
    /// independent of the power-iteration path.
    fn svd_largest(w: &[f64], rows: usize, cols: usize) -> f64 {
        let mut a = mat::matmul_tn(w, w, rows, cols, cols); // W'W, cols x cols
        let n = cols;
        for _sweep in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += a[p * n + q] * a[p * n + q];
                }
            }
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[p * n + q];
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let app = a[p * n + p];
                    let aqq = a[q * n + q];
                    let phi = 0.5 * (2.0 * apq).atan2(app - aqq);
                    let (s, c) = phi.sin_cos();
                    for k in 0..n {
                        let akp = a[k * n + p];
                        let akq = a[k * n + q];
                        a[k * n + p] = c * akp + s * akq;
                        a[k * n + q] = -s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p * n + k];
                        let aqk = a[q * n + k];
                        a[p * n + k] = c * apk + s * aqk;
                        a[q * n + k] = -s * apk + c * aqk;
                    }
                }
            }
        }
        let mut best: f64 = 0.0;
        for i in 0..n {
            best = best.max(a[i * n + i]);
        }
        best.sqrt()
    }

    fn random_layer(out_dim: usize, in_dim: usize, k: f64, seed: u64) -> LinearLayer {
        let mut rng = RngState::new(seed);
        let mut weight = vec![0.0; out_dim * in_dim];
        rng.fill_normal(&mut weight);
        let mut u = vec![0.0; out_dim];
        let mut v = vec![0.0; in_dim];
        rng.fill_normal(&mut u);
        rng.fill_normal(&mut v);
        let (nu, nv) = (mat::norm2(&u), mat::norm2(&v));
        u.iter_mut().for_each(|x| *x /= nu);
        v.iter_mut().for_each(|x| *x /= nv);
        LinearLayer {
            weight,
            bias: vec![0.0; out_dim],
            in_dim,
            out_dim,
            spectral: Some(SpectralNormState {
                lipschitz_target: k,
                u,
                v,
                power_iters_train: 1,
                power_iters_eval: 30,
            }),
        }
    }

    #[test]
    fn spectral_identity_is_fixed_point() {
        let mut layer = random_layer(3, 3, 1.0, 1);
        layer.weight = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let w = spectral_normalize(&mut layer, 10).unwrap();
        for (i, x) in w.iter().enumerate() {
            let want = if i % 4 == 0 { 1.0 } else { 0.0 };
            assert!((x - want).abs() < 1e-12);
        }
    }

    #[test]
    fn spectral_scaled_identity_halved() {
        let mut layer = random_layer(3, 3, 1.0, 2);
        layer.weight = vec![2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0];
        let w = spectral_normalize(&mut layer, 10).unwrap();
        for (i, x) in w.iter().enumerate() {
            let want = if i % 4 == 0 { 1.0 } else { 0.0 };
            assert!((x - want).abs() < 1e-12);
        }
    }

    #[test]
    fn spectral_random_hits_target_vs_svd_oracle() {
        let mut layer = random_layer(4, 6, 5.0, 3);
        let w = spectral_normalize(&mut layer, 50).unwrap();
        let sigma = svd_largest(&w, 4, 6);
        let band = 5.0 * (1.0 - 1e-3)..=5.0 * (1.0 + 1e-3);
        assert!(band.contains(&sigma), "sigma {sigma}");
    }

    #[test]
    fn spectral_targets_hold_up_to_64x64() {
        for (rows, cols, seed) in [(8usize, 8usize, 10u64), (32, 16, 11), (64, 64, 12)] {
            let mut layer = random_layer(rows, cols, 2.5, seed);
            let w = spectral_normalize(&mut layer, 30).unwrap();
            let sigma = svd_largest(&w, rows, cols);
            assert!((sigma - 2.5).abs() / 2.5 < 5e-3, "{rows}x{cols}: sigma {sigma}");
        }
    }

    #[test]
    fn spectral_rejects_zero_weight() {
        let mut layer = random_layer(3, 3, 1.0, 4);
        layer.weight = vec![0.0; 9];
        assert!(matches!(spectral_normalize(&mut layer, 5), Err(Error::DegenerateWeight)));
    }

    #[test]
    fn power_iteration_vectors_stay_unit_norm() {
        let mut layer = random_layer(5, 7, 3.0, 5);
        for _ in 0..4 {
            spectral_normalize(&mut layer, 1).unwrap();
            let spec = layer.spectral.as_ref().unwrap();
            assert!((mat::norm2(&spec.u) - 1.0).abs() < 1e-12);
            assert!((mat::norm2(&spec.v) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_single_identity_layer() {
        let mut net = init_mlp(&MlpConfig {
            layer_widths: vec![3, 3],
            activation: Activation::Relu,
            lipschitz_target: None,
            init_seed: 0,
        })
        .unwrap();
        net.layers[0].weight = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let x = Tensor::new(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, -0.25]).unwrap();
        let y = net.infer(&x).unwrap();
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn mlp_zero_weights_outputs_bias() {
        let mut net = init_mlp(&MlpConfig {
            layer_widths: vec![3, 2],
            activation: Activation::Relu,
            lipschitz_target: None,
            init_seed: 0,
        })
        .unwrap();
        net.layers[0].weight = vec![0.0; 6];
        net.layers[0].bias = vec![0.7, -0.3];
        let x = Tensor::new(4, 3, vec![1.0; 12]).unwrap();
        let y = net.infer(&x).unwrap();
        for r in 0..4 {
            assert_eq!(y.row(r), &[0.7, -0.3]);
        }
    }

    #[test]
    fn mlp_matches_per_neuron_loop_oracle() {
        let net = init_mlp(&MlpConfig {
            layer_widths: vec![3, 5, 2],
            activation: Activation::LeakyRelu,
            lipschitz_target: None,
            init_seed: 77,
        })
        .unwrap();
        let mut rng = RngState::new(78);
        let mut xdata = vec![0.0; 12];
        rng.fill_normal(&mut xdata);
        let x = Tensor::new(4, 3, xdata.clone()).unwrap();
        let got = net.infer(&x).unwrap();

        for r in 0..4 {
            let mut h: Vec<f64> = x.row(r).to_vec();
            for (li, layer) in net.layers.iter().enumerate() {
                let mut next = vec![0.0; layer.out_dim];
                for (o, nx) in next.iter_mut().enumerate() {
                    let mut acc = layer.bias[o];
                    for (i, hi) in h.iter().enumerate() {
                        acc += layer.weight[o * layer.in_dim + i] * hi;
                    }
                    *nx = acc;
                }
                if li != net.layers.len() - 1 {
                    for v in next.iter_mut() {
                        if *v < 0.0 {
                            *v *= crate::autodiff::LEAKY_RELU_SLOPE;
                        }
                    }
                }
                h = next;
            }
            for (a, b) in got.row(r).iter().zip(&h) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mlp_rejects_width_mismatch() {
        let net = init_mlp(&MlpConfig {
            layer_widths: vec![3, 4, 1],
            activation: Activation::Relu,
            lipschitz_target: None,
            init_seed: 1,
        })
        .unwrap();
        let x = Tensor::new(2, 5, vec![0.0; 10]).unwrap();
        assert!(matches!(net.infer(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn init_rejects_invalid_configs() {
        let bad_widths = MlpConfig {
            layer_widths: vec![3],
            activation: Activation::Relu,
            lipschitz_target: None,
            init_seed: 0,
        };
        assert!(init_mlp(&bad_widths).is_err());
        let zero_width = MlpConfig { layer_widths: vec![3, 0, 1], ..bad_widths.clone() };
        assert!(init_mlp(&zero_width).is_err());
        let bad_lip = MlpConfig {
            layer_widths: vec![3, 4, 1],
            lipschitz_target: Some(0.0),
            ..bad_widths
        };
        assert!(init_mlp(&bad_lip).is_err());
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = MlpConfig {
            layer_widths: vec![4, 8, 1],
            activation: Activation::Relu,
            lipschitz_target: Some(5.0),
            init_seed: 99,
        };
        let a = init_mlp(&cfg).unwrap();
        let b = init_mlp(&cfg).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
        let mut cfg2 = cfg.clone();
        cfg2.init_seed = 100;
        let c = init_mlp(&cfg2).unwrap();
        assert_ne!(a.flat_params(), c.flat_params());
    }

    #[test]
    fn init_variance_matches_he() {
        let cfg = MlpConfig {
            layer_widths: vec![20, 5000], // 100k weights at fan_in 20
            activation: Activation::Relu,
            lipschitz_target: None,
            init_seed: 5,
        };
        let net = init_mlp(&cfg).unwrap();
        let w = &net.layers[0].weight;
        let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
        let var: f64 = w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / w.len() as f64;
        assert!((var - 0.1).abs() / 0.1 < 0.05, "var {var}");
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut adam = AdamState::new(0.01);
        let mut params = vec![("p".to_string(), p.as_mut_slice())];
        adam.step(&mut params, &[vec![0.0; 3]]).unwrap();
        assert_eq!(adam.step_count, 1);
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        for g in [0.37, -12.0, 1e-3] {
            let mut p = vec![0.0];
            let mut adam = AdamState::new(0.01);
            let mut params = vec![("p".to_string(), p.as_mut_slice())];
            adam.step(&mut params, &[vec![g]]).unwrap();
            assert!((p[0] + 0.01 * g.signum()).abs() < 1e-6, "g={g} -> {}", p[0]);
        }
    }

    #[test]
    fn adam_matches_scalar_recurrence_oracle() {
        // five steps on f(x) = x^2 / 2, grad = x
        let lr = 0.1;
        let mut x = 1.0_f64;
        let mut adam = AdamState::new(lr);
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut xo = 1.0_f64;
        let (mut m, mut v) = (0.0_f64, 0.0_f64);
        for t in 1..=5 {
            let g = x;
            {
                let mut slice = [x];
                let mut params = vec![("x".to_string(), &mut slice[..])];
                adam.step(&mut params, &[vec![g]]).unwrap();
                x = slice[0];
            }
            let go = xo;
            m = b1 * m + (1.0 - b1) * go;
            v = b2 * v + (1.0 - b2) * go * go;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            xo -= lr * mhat / (vhat.sqrt() + eps);
            assert!((x - xo).abs() < 1e-12, "step {t}: {x} vs {xo}");
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = vec![0.0];
        let mut adam = AdamState::new(0.01);
        let mut params = vec![("w".to_string(), p.as_mut_slice())];
        let err = adam.step(&mut params, &[vec![f64::NAN]]).unwrap_err();
        match err {
            Error::NonFiniteGradient { parameter } => assert_eq!(parameter, "w"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn spectral_net_respects_lipschitz_product() {
        let cfg = MlpConfig {
            layer_widths: vec![4, 16, 16, 1],
            activation: Activation::Relu,
            lipschitz_target: Some(1.5),
            init_seed: 21,
        };
        let net = init_mlp(&cfg).unwrap();
        let bound = net.lipschitz_product().unwrap();
        assert!((bound - 1.5f64.powi(3)).abs() < 1e-12);
        let mut rng = RngState::new(22);
        let n_pairs = 10_000;
        let mut x1 = vec![0.0; n_pairs * 4];
        let mut x2 = vec![0.0; n_pairs * 4];
        rng.fill_normal(&mut x1);
        rng.fill_normal(&mut x2);
        let y1 = net.infer(&Tensor::new(n_pairs, 4, x1.clone()).unwrap()).unwrap();
        let y2 = net.infer(&Tensor::new(n_pairs, 4, x2.clone()).unwrap()).unwrap();
        let mut worst = 0.0_f64;
        for i in 0..n_pairs {
            let dx: f64 = (0..4)
                .map(|j| (x1[i * 4 + j] - x2[i * 4 + j]).powi(2))
                .sum::<f64>()
                .sqrt();
            let dy = (y1.data[i] - y2.data[i]).abs();
            if dx > 1e-9 {
                worst = worst.max(dy / dx);
            }
        }
        assert!(worst <= bound, "empirical ratio {worst} exceeds {bound}");
    }

    #[test]
    fn train_forward_gradients_match_finite_differences() {
        // gradient of a scalar loss through a spectral layer, against
        // central differences on the flat parameter vector; u, v frozen so
        // the function is exactly the one the tape differentiates
        let cfg = MlpConfig {
            layer_widths: vec![3, 4, 1],
            activation: Activation::LeakyRelu,
            lipschitz_target: Some(2.0),
            init_seed: 31,
        };
        let net = init_mlp(&cfg).unwrap();
        let mut rng = RngState::new(32);
        let mut xdata = vec![0.0; 6];
        rng.fill_normal(&mut xdata);
        let x = Tensor::new(2, 3, xdata).unwrap();
        let mut frozen = net.clone();
        for l in frozen.layers.iter_mut() {
            if let Some(s) = l.spectral.as_mut() {
                s.power_iters_eval = 0;
            }
        }
        let flat = Tensor::column(net.flat_params());
        let err = crate::autodiff::grad_check(
            move |t, p| {
                let mut off = 0;
                let vars = frozen.vars_from_flat(t, p, &mut off)?;
                let xl = t.leaf(&x);
                let out = frozen.forward_eval_with_vars(t, &vars, xl)?;
                Ok(t.mean(out))
            },
            &flat,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "rel err {err}");
    }
}
