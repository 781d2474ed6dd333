//! The latent field network: a small MLP over encoded positions with a
//! softplus density head and a linear 4-channel latent head, the view
//! direction entering before the last hidden layer.
//!
//! Parameters live in one flat `Vec<f64>`; the backward pass accumulates into
//! a buffer of the same layout and can also return gradients with respect to
//! the inputs (needed for camera optimization through ray geometry).

use rand::Rng;

use super::encoding::{
    encoded_len, positional_encode_backward, positional_encode_into,
};
use crate::error::{Error, Result};
use crate::rng::{self, tags};

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_prime(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Numerically stable softplus; underflows to exactly 0 for very negative
/// inputs, which lets tests build fields with density identically zero.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy)]
struct LayerSpec {
    w_off: usize,
    b_off: usize,
    n_in: usize,
    n_out: usize,
}

/// Field architecture: encoding bands plus hidden widths. The last hidden
/// layer consumes the view direction; the ones before it form the trunk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldArch {
    pub pos_bands: usize,
    pub dir_bands: usize,
    pub hidden: Vec<usize>,
}

impl Default for FieldArch {
    fn default() -> Self {
        FieldArch {
            pos_bands: 6,
            dir_bands: 2,
            hidden: vec![64, 64, 64, 64],
        }
    }
}

impl FieldArch {
    pub fn new(pos_bands: usize, dir_bands: usize, hidden: Vec<usize>) -> Result<Self> {
        if hidden.len() < 2 {
            return Err(Error::config(
                "field needs at least two hidden layers (trunk + direction layer)",
            ));
        }
        if hidden.iter().any(|&h| h == 0) {
            return Err(Error::config("hidden widths must be positive"));
        }
        Ok(FieldArch {
            pos_bands,
            dir_bands,
            hidden,
        })
    }

    pub fn pos_dim(&self) -> usize {
        encoded_len(self.pos_bands)
    }

    pub fn dir_dim(&self) -> usize {
        encoded_len(self.dir_bands)
    }

    fn trunk_len(&self) -> usize {
        self.hidden.len() - 1
    }

    /// Layer order: trunk layers, sigma head, direction layer, latent head.
    fn layers(&self) -> Vec<LayerSpec> {
        let t = self.trunk_len();
        let mut specs = Vec::with_capacity(t + 3);
        let mut off = 0;
        let push = |n_in: usize, n_out: usize, off: &mut usize| {
            let spec = LayerSpec {
                w_off: *off,
                b_off: *off + n_in * n_out,
                n_in,
                n_out,
            };
            *off += n_in * n_out + n_out;
            spec
        };
        let mut prev = self.pos_dim();
        for i in 0..t {
            specs.push(push(prev, self.hidden[i], &mut off));
            prev = self.hidden[i];
        }
        specs.push(push(prev, 1, &mut off)); // sigma head
        specs.push(push(prev + self.dir_dim(), self.hidden[t], &mut off)); // dir layer
        specs.push(push(self.hidden[t], 4, &mut off)); // latent head
        specs
    }

    pub fn param_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| l.n_in * l.n_out + l.n_out)
            .sum()
    }

    /// Xavier-uniform weights, zero biases, from a seeded stream.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut params = vec![0.0; self.param_count()];
        let mut rng = rng::stream(seed, tags::FIELD_INIT, 0);
        for l in self.layers() {
            let scale = (6.0 / (l.n_in + l.n_out) as f64).sqrt();
            for k in 0..l.n_in * l.n_out {
                params[l.w_off + k] = rng.gen_range(-scale..scale);
            }
        }
        params
    }
}

/// Cached intermediate values for one `(p, v)` evaluation.
#[derive(Debug, Default, Clone)]
pub struct Trace {
    pos_enc: Vec<f64>,
    dir_enc: Vec<f64>,
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    dir_in: Vec<f64>,
    dir_pre: Vec<f64>,
    dir_act: Vec<f64>,
    sigma_pre: f64,
    pub z: [f64; 4],
    pub sigma: f64,
}

fn linear(params: &[f64], spec: &LayerSpec, x: &[f64], y: &mut Vec<f64>) {
    y.clear();
    for r in 0..spec.n_out {
        let row = &params[spec.w_off + r * spec.n_in..spec.w_off + (r + 1) * spec.n_in];
        let mut acc = params[spec.b_off + r];
        for (w, xi) in row.iter().zip(x) {
            acc += w * xi;
        }
        y.push(acc);
    }
}

fn linear_backward(
    params: &[f64],
    spec: &LayerSpec,
    x: &[f64],
    dy: &[f64],
    grads: &mut [f64],
    dx: Option<&mut Vec<f64>>,
) {
    for r in 0..spec.n_out {
        let g = dy[r];
        let w_row = spec.w_off + r * spec.n_in;
        for c in 0..spec.n_in {
            grads[w_row + c] += g * x[c];
        }
        grads[spec.b_off + r] += g;
    }
    if let Some(dx) = dx {
        dx.clear();
        dx.resize(spec.n_in, 0.0);
        for r in 0..spec.n_out {
            let g = dy[r];
            let w_row = spec.w_off + r * spec.n_in;
            for c in 0..spec.n_in {
                dx[c] += params[w_row + c] * g;
            }
        }
    }
}

impl FieldArch {
    /// Forward pass caching everything needed for [`FieldArch::backward`].
    pub fn forward(&self, params: &[f64], p: [f64; 3], v: [f64; 3], trace: &mut Trace) {
        let specs = self.layers();
        let t = self.trunk_len();
        positional_encode_into(p, self.pos_bands, &mut trace.pos_enc);
        positional_encode_into(v, self.dir_bands, &mut trace.dir_enc);

        trace.pre.resize(t, Vec::new());
        trace.act.resize(t, Vec::new());
        for i in 0..t {
            if i == 0 {
                linear(params, &specs[i], &trace.pos_enc, &mut trace.pre[i]);
            } else {
                let (acts, pres) = (&trace.act, &mut trace.pre);
                linear(params, &specs[i], &acts[i - 1], &mut pres[i]);
            }
            let width = trace.pre[i].len();
            trace.act[i].clear();
            for k in 0..width {
                let x = trace.pre[i][k];
                trace.act[i].push(silu(x));
            }
        }

        // Sigma head.
        let sigma_spec = &specs[t];
        let mut sigma_pre = params[sigma_spec.b_off];
        for (c, x) in trace.act[t - 1].iter().enumerate() {
            sigma_pre += params[sigma_spec.w_off + c] * x;
        }
        trace.sigma_pre = sigma_pre;
        trace.sigma = softplus(sigma_pre);

        // Direction layer on [trunk_out, dir_enc].
        trace.dir_in.clear();
        for i in 0..trace.act[t - 1].len() {
            let x = trace.act[t - 1][i];
            trace.dir_in.push(x);
        }
        for i in 0..trace.dir_enc.len() {
            let x = trace.dir_enc[i];
            trace.dir_in.push(x);
        }
        let dir_spec = &specs[t + 1];
        {
            let (dir_in, dir_pre) = (&trace.dir_in, &mut trace.dir_pre);
            linear(params, dir_spec, dir_in, dir_pre);
        }
        trace.dir_act.clear();
        for k in 0..trace.dir_pre.len() {
            let x = trace.dir_pre[k];
            trace.dir_act.push(silu(x));
        }

        // Latent head.
        let z_spec = &specs[t + 2];
        for r in 0..4 {
            let mut acc = params[z_spec.b_off + r];
            let row = z_spec.w_off + r * z_spec.n_in;
            for (c, x) in trace.dir_act.iter().enumerate() {
                acc += params[row + c] * x;
            }
            trace.z[r] = acc;
        }
    }

    /// Backward pass: accumulate parameter gradients for upstream
    /// `(d_z, d_sigma)` into `grads`; optionally also return input gradients
    /// `(dL/dp, dL/dv)`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        params: &[f64],
        p: [f64; 3],
        v: [f64; 3],
        trace: &Trace,
        d_z: [f64; 4],
        d_sigma: f64,
        grads: &mut [f64],
        mut input_grads: Option<(&mut [f64; 3], &mut [f64; 3])>,
    ) {
        let specs = self.layers();
        let t = self.trunk_len();
        let z_spec = &specs[t + 2];
        let dir_spec = &specs[t + 1];
        let sigma_spec = &specs[t];

        // Latent head.
        let mut d_dir_act = Vec::new();
        linear_backward(params, z_spec, &trace.dir_act, &d_z, grads, Some(&mut d_dir_act));

        // Direction layer.
        let d_dir_pre: Vec<f64> = d_dir_act
            .iter()
            .zip(&trace.dir_pre)
            .map(|(g, &pre)| g * silu_prime(pre))
            .collect();
        let mut d_dir_in = Vec::new();
        linear_backward(
            params,
            dir_spec,
            &trace.dir_in,
            &d_dir_pre,
            grads,
            Some(&mut d_dir_in),
        );
        let trunk_width = self.hidden[t - 1];
        let mut d_trunk_out = d_dir_in[..trunk_width].to_vec();
        let d_dir_enc = &d_dir_in[trunk_width..];
        if let Some((_, dv)) = input_grads.as_mut() {
            positional_encode_backward(v, self.dir_bands, d_dir_enc, dv);
        }

        // Sigma head.
        let d_sigma_pre = d_sigma * sigmoid(trace.sigma_pre);
        grads[sigma_spec.b_off] += d_sigma_pre;
        for c in 0..sigma_spec.n_in {
            grads[sigma_spec.w_off + c] += d_sigma_pre * trace.act[t - 1][c];
            d_trunk_out[c] += params[sigma_spec.w_off + c] * d_sigma_pre;
        }

        // Trunk.
        let mut d_act = d_trunk_out;
        for i in (0..t).rev() {
            let d_pre: Vec<f64> = d_act
                .iter()
                .zip(&trace.pre[i])
                .map(|(g, &pre)| g * silu_prime(pre))
                .collect();
            let input: &[f64] = if i == 0 {
                &trace.pos_enc
            } else {
                &trace.act[i - 1]
            };
            let want_dx = i > 0 || input_grads.is_some();
            let mut dx = Vec::new();
            linear_backward(
                params,
                &specs[i],
                input,
                &d_pre,
                grads,
                want_dx.then_some(&mut dx),
            );
            if i == 0 {
                if let Some((dp, _)) = input_grads.as_mut() {
                    positional_encode_backward(p, self.pos_bands, &dx, dp);
                }
            } else {
                d_act = dx;
            }
        }
    }
}

/// Parameters of the latent radiance field.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldState {
    pub arch: FieldArch,
    pub params: Vec<f64>,
    pub step_count: u64,
}

impl FieldState {
    pub fn init(arch: FieldArch, seed: u64) -> FieldState {
        let params = arch.init_params(seed);
        FieldState {
            arch,
            params,
            step_count: 0,
        }
    }

    /// A field that outputs the same `(z, sigma)` everywhere: all weights and
    /// hidden biases zero, head biases chosen to hit the targets. `sigma_pre`
    /// passes through softplus (use a very negative value for exactly zero
    /// density).
    pub fn constant(arch: FieldArch, z: [f64; 4], sigma_pre: f64) -> FieldState {
        let mut params = vec![0.0; arch.param_count()];
        let specs = arch.layers();
        let t = arch.trunk_len();
        params[specs[t].b_off] = sigma_pre;
        for r in 0..4 {
            params[specs[t + 2].b_off + r] = z[r];
        }
        FieldState {
            arch,
            params,
            step_count: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.params.len() != self.arch.param_count() {
            return Err(Error::validation(format!(
                "parameter vector length {} does not match architecture ({})",
                self.params.len(),
                self.arch.param_count()
            )));
        }
        if !self.params.iter().all(|p| p.is_finite()) {
            return Err(Error::validation("field parameters contain non-finite values"));
        }
        Ok(())
    }

    /// Evaluate latent features and density at `(p, v)`.
    pub fn eval(&self, p: [f64; 3], v: [f64; 3]) -> Result<([f64; 4], f64)> {
        if !p.iter().chain(v.iter()).all(|x| x.is_finite()) {
            return Err(Error::validation("field_eval inputs must be finite"));
        }
        let mut trace = Trace::default();
        self.arch.forward(&self.params, p, v, &mut trace);
        Ok((trace.z, trace.sigma))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> FieldArch {
        FieldArch::new(2, 1, vec![10, 8]).unwrap()
    }

    #[test]
    fn zero_initialized_heads_give_constant_outputs() {
        let arch = FieldArch::default();
        let state = FieldState::constant(arch, [0.0; 4], 0.0);
        for (p, v) in [
            ([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]),
            ([0.3, -0.2, 0.9], [0.6, 0.8, 0.0]),
        ] {
            let (z, sigma) = state.eval(p, v).unwrap();
            assert_eq!(z, [0.0; 4]);
            assert_eq!(sigma, softplus(0.0));
        }
    }

    #[test]
    fn eval_is_deterministic_and_rejects_non_finite_input() {
        let state = FieldState::init(small_arch(), 42);
        let a = state.eval([0.1, 0.2, 0.3], [0.0, 1.0, 0.0]).unwrap();
        let b = state.eval([0.1, 0.2, 0.3], [0.0, 1.0, 0.0]).unwrap();
        assert_eq!(a, b);
        assert!(state.eval([f64::NAN, 0.0, 0.0], [0.0, 1.0, 0.0]).is_err());
    }

    #[test]
    fn sigma_is_nonnegative() {
        let state = FieldState::init(small_arch(), 1);
        let mut rng = crate::rng::stream(3, 0x51, 0);
        use rand::Rng;
        for _ in 0..50 {
            let p = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let (_, sigma) = state.eval(p, [0.0, 0.0, 1.0]).unwrap();
            assert!(sigma >= 0.0);
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let arch = small_arch();
        let state = FieldState::init(arch.clone(), 7);
        let p = [0.31, -0.44, 0.52];
        let v = [0.48, 0.6, 0.64];
        let mut rng = crate::rng::stream(9, 0x52, 0);
        use rand::Rng;

        let mut checked = 0;
        for component in 0..4 {
            let mut grads = vec![0.0; arch.param_count()];
            let mut trace = Trace::default();
            arch.forward(&state.params, p, v, &mut trace);
            let mut d_z = [0.0; 4];
            d_z[component] = 1.0;
            arch.backward(&state.params, p, v, &trace, d_z, 0.0, &mut grads, None);

            for _ in 0..30 {
                let k = rng.gen_range(0..arch.param_count());
                let h = 1e-4;
                let mut plus = state.params.clone();
                let mut minus = state.params.clone();
                plus[k] += h;
                minus[k] -= h;
                let mut tr = Trace::default();
                arch.forward(&plus, p, v, &mut tr);
                let fp = tr.z[component];
                arch.forward(&minus, p, v, &mut tr);
                let fm = tr.z[component];
                let fd = (fp - fm) / (2.0 * h);
                let denom = grads[k].abs().max(fd.abs()).max(1e-2);
                assert!(
                    ((grads[k] - fd) / denom).abs() < 1e-4,
                    "component {component} param {k}: {} vs {fd}",
                    grads[k]
                );
                checked += 1;
            }
        }
        assert!(checked >= 100);
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let arch = small_arch();
        let state = FieldState::init(arch.clone(), 13);
        let p = [0.11, 0.22, -0.35];
        let v = [0.267, 0.535, 0.802];
        let d_z = [0.4, -0.3, 0.2, 0.7];
        let d_sigma = 0.9;

        let mut grads = vec![0.0; arch.param_count()];
        let mut dp = [0.0; 3];
        let mut dv = [0.0; 3];
        let mut trace = Trace::default();
        arch.forward(&state.params, p, v, &mut trace);
        arch.backward(
            &state.params,
            p,
            v,
            &trace,
            d_z,
            d_sigma,
            &mut grads,
            Some((&mut dp, &mut dv)),
        );

        let f = |p: [f64; 3], v: [f64; 3]| -> f64 {
            let mut tr = Trace::default();
            arch.forward(&state.params, p, v, &mut tr);
            tr.z.iter().zip(&d_z).map(|(a, b)| a * b).sum::<f64>() + tr.sigma * d_sigma
        };
        let h = 1e-5;
        for i in 0..3 {
            let mut pp = p;
            let mut pm = p;
            pp[i] += h;
            pm[i] -= h;
            let fd = (f(pp, v) - f(pm, v)) / (2.0 * h);
            assert!((dp[i] - fd).abs() / fd.abs().max(1e-2) < 1e-5, "dp[{i}]");
            let mut vp = v;
            let mut vm = v;
            vp[i] += h;
            vm[i] -= h;
            let fd = (f(p, vp) - f(p, vm)) / (2.0 * h);
            assert!((dv[i] - fd).abs() / fd.abs().max(1e-2) < 1e-5, "dv[{i}]");
        }
    }

    #[test]
    fn softplus_underflows_to_exact_zero() {
        assert_eq!(softplus(-1e4), 0.0);
        assert!(softplus(0.0) > 0.69 && softplus(0.0) < 0.70);
        assert_eq!(softplus(1e4), 1e4);
    }
}
