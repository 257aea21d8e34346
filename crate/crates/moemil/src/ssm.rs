//! Selective state-space (Mamba-style) sequence layer.
//!
//! One layer maps `[L, D] -> [L, D]`:
//!
//! ```text
//! x,z = split(in_proj(seq))            x,z: [L, Di],  Di = expand * D
//! u   = silu(causal_conv1d(x))
//! dt  = softplus(dt_proj(u))           per-token step size
//! B,C = b_proj(u), c_proj(u)           input-conditioned state maps
//! h_t = exp(dt_t * A) .* h_{t-1} + dt_t * B_t * u_t     (A < 0, h_0 = 0)
//! y_t = <C_t, h_t> + D_skip .* u_t
//! out = out_proj(y .* silu(z))
//! ```
//!
//! Discretization is ZOH on A and Euler on B; A is stored as a log
//! magnitude (`A = -exp(a_log)`) and initialized to `A[c,s] = -(s+1)`.
//! The dt bias is initialized so that `softplus(bias)` is log-uniform in
//! `[0.001, 0.1]`. in/out projections carry no bias; the dt projection
//! and the convolution do. The scan is the sequential reference
//! recurrence; there is no parallel-prefix variant.

use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;

/// Layer-norm epsilon used across the whole model.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SsmConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: usize,
}

impl SsmConfig {
    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    /// Scalar parameter count of one [`SsmLayer`].
    pub fn param_count(&self) -> usize {
        let (d, di, s, w) = (self.d_model, self.d_inner(), self.d_state, self.d_conv);
        d * 2 * di            // in_proj
            + di * w + di     // conv kernel + bias
            + di * di + di    // dt proj + bias
            + 2 * di * s      // b/c proj
            + di * s          // a_log
            + di              // d_skip
            + di * d          // out_proj
    }
}

/// Parameter ids of one selective-SSM layer.
#[derive(Debug, Clone)]
pub struct SsmLayer {
    pub d_model: usize,
    pub d_inner: usize,
    in_proj: ParamId,
    conv_kernel: ParamId,
    conv_bias: ParamId,
    dt_w: ParamId,
    dt_b: ParamId,
    b_w: ParamId,
    c_w: ParamId,
    a_log: ParamId,
    d_skip: ParamId,
    out_proj: ParamId,
}

impl SsmLayer {
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &SsmConfig,
        rng: &mut R,
    ) -> Self {
        let (d, di, s, w) = (cfg.d_model, cfg.d_inner(), cfg.d_state, cfg.d_conv);

        let in_proj = store.add(format!("{prefix}.in_proj"), init::fan_in_uniform(rng, vec![d, 2 * di], d));
        let conv_kernel = store.add(format!("{prefix}.conv.kernel"), init::fan_in_uniform(rng, vec![di, w], w));
        let conv_bias = store.add(format!("{prefix}.conv.bias"), init::fan_in_uniform(rng, vec![di], w));
        let dt_w = store.add(format!("{prefix}.dt.w"), init::fan_in_uniform(rng, vec![di, di], di));

        // softplus(dt_b) log-uniform in [0.001, 0.1]
        let lo = 0.001_f64.ln();
        let hi = 0.1_f64.ln();
        let dt_bias: Vec<T> = (0..di)
            .map(|_| {
                let dt = rng.random_range(lo..hi).exp();
                // inverse softplus: ln(e^dt - 1)
                T::from_f64(dt.exp_m1().ln())
            })
            .collect();
        let dt_b = store.add(
            format!("{prefix}.dt.b"),
            Tensor::from_vec(vec![di], dt_bias).expect("consistent shape"),
        );

        let b_w = store.add(format!("{prefix}.b_proj"), init::fan_in_uniform(rng, vec![di, s], di));
        let c_w = store.add(format!("{prefix}.c_proj"), init::fan_in_uniform(rng, vec![di, s], di));

        // A[c, si] = -(si + 1), stored as ln(si + 1)
        let a_init: Vec<T> = (0..di * s)
            .map(|i| T::from_f64(((i % s + 1) as f64).ln()))
            .collect();
        let a_log = store.add(
            format!("{prefix}.a_log"),
            Tensor::from_vec(vec![di, s], a_init).expect("consistent shape"),
        );
        let d_skip = store.add(format!("{prefix}.d_skip"), Tensor::full(vec![di], T::one()));
        let out_proj = store.add(format!("{prefix}.out_proj"), init::fan_in_uniform(rng, vec![di, d], di));

        SsmLayer {
            d_model: d,
            d_inner: di,
            in_proj,
            conv_kernel,
            conv_bias,
            dt_w,
            dt_b,
            b_w,
            c_w,
            a_log,
            d_skip,
            out_proj,
        }
    }

    /// Forward over one sequence `[L, D]`, `L >= 1`. Causal: outputs at a
    /// position depend only on inputs at or before it.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, seq: Var) -> Result<Var> {
        let shape = tape.shape(seq);
        if shape.len() != 2 || shape[1] != self.d_model {
            return Err(Error::Dimension {
                op: "ssm_forward",
                lhs: shape.to_vec(),
                rhs: vec![0, self.d_model],
            });
        }
        if shape[0] == 0 {
            return Err(Error::contract("ssm_forward on an empty sequence"));
        }
        let di = self.d_inner;

        let in_proj = tape.param(store, self.in_proj);
        let xz = tape.matmul(seq, in_proj)?;
        let xb = tape.slice_cols(xz, 0, di)?;
        let zb = tape.slice_cols(xz, di, di)?;

        let kernel = tape.param(store, self.conv_kernel);
        let cbias = tape.param(store, self.conv_bias);
        let xc = tape.causal_conv1d(xb, kernel, cbias)?;
        let u = tape.silu(xc);

        let dt_w = tape.param(store, self.dt_w);
        let dt_b = tape.param(store, self.dt_b);
        let dt_lin = tape.matmul(u, dt_w)?;
        let dt_aff = tape.add(dt_lin, dt_b)?;
        let dt = tape.softplus(dt_aff);

        let b_w = tape.param(store, self.b_w);
        let c_w = tape.param(store, self.c_w);
        let bmat = tape.matmul(u, b_w)?;
        let cmat = tape.matmul(u, c_w)?;

        let a_log = tape.param(store, self.a_log);
        let a_exp = tape.exp(a_log);
        let a = tape.scale(a_exp, -T::one());
        let d_skip = tape.param(store, self.d_skip);

        let y = tape.selective_scan(u, dt, bmat, cmat, a, d_skip)?;
        let gate = tape.silu(zb);
        let yg = tape.mul(y, gate)?;
        let out_proj = tape.param(store, self.out_proj);
        tape.matmul(yg, out_proj)
    }

    /// Id of the output projection (used by tests to zero the layer out).
    pub fn out_proj_id(&self) -> ParamId {
        self.out_proj
    }

    pub fn conv_bias_id(&self) -> ParamId {
        self.conv_bias
    }
}

/// Affine layer-norm parameters.
#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, width: usize) -> Self {
        let gamma = store.add(format!("{prefix}.gamma"), Tensor::full(vec![width], T::one()));
        let beta = store.add(format!("{prefix}.beta"), Tensor::zeros(vec![width]));
        LayerNormParams { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        tape.layer_norm(x, gamma, beta, T::from_f64(LN_EPS))
    }
}

/// Pre-norm residual stack: `h <- h + ssm(LN(h))` per layer.
#[derive(Debug, Clone)]
pub struct SsmStack {
    pub layers: Vec<(LayerNormParams, SsmLayer)>,
}

impl SsmStack {
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &SsmConfig,
        depth: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..depth)
            .map(|l| {
                let norm = LayerNormParams::init(store, &format!("{prefix}.{l}.norm"), cfg.d_model);
                let layer = SsmLayer::init(store, &format!("{prefix}.{l}.ssm"), cfg, rng);
                (norm, layer)
            })
            .collect();
        SsmStack { layers }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, seq: Var) -> Result<Var> {
        if tape.shape(seq)[0] == 0 {
            return Err(Error::contract("ssm_stack_forward on an empty sequence"));
        }
        let mut h = seq;
        for (norm, layer) in &self.layers {
            let normed = norm.forward(tape, store, h)?;
            let delta = layer.forward(tape, store, normed)?;
            h = tape.add(h, delta)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff, max_rel_err, FD_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn micro_cfg() -> SsmConfig {
        SsmConfig { d_model: 1, d_state: 1, d_conv: 1, expand: 2 }
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn softplus(x: f64) -> f64 {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }

    /// Independent step-by-step recurrence in plain f64, no tape involved.
    /// Micro config: D=1, d_state=1, d_conv=1, expand=2 (Di=2).
    fn micro_oracle(store: &ParamStore<f64>, xs: &[f64]) -> Vec<f64> {
        let get = |name: &str| store.get(store.find(name).unwrap()).data().to_vec();
        let in_proj = get("t.in_proj"); // [1, 4]: columns x0 x1 z0 z1
        let kernel = get("t.conv.kernel"); // [2, 1]
        let cbias = get("t.conv.bias"); // [2]
        let dt_w = get("t.dt.w"); // [2, 2] row-major
        let dt_b = get("t.dt.b"); // [2]
        let b_w = get("t.b_proj"); // [2, 1]
        let c_w = get("t.c_proj"); // [2, 1]
        let a_log = get("t.a_log"); // [2, 1]
        let d_skip = get("t.d_skip"); // [2]
        let out_proj = get("t.out_proj"); // [2, 1]

        let mut h = [0.0f64; 2]; // one state per inner channel
        let mut out = Vec::new();
        for &x in xs {
            let xb = [x * in_proj[0], x * in_proj[1]];
            let zb = [x * in_proj[2], x * in_proj[3]];
            let pre = [kernel[0] * xb[0] + cbias[0], kernel[1] * xb[1] + cbias[1]];
            let u = [pre[0] * sigmoid(pre[0]), pre[1] * sigmoid(pre[1])];
            let b = u[0] * b_w[0] + u[1] * b_w[1];
            let cc = u[0] * c_w[0] + u[1] * c_w[1];
            let mut y = [0.0f64; 2];
            for c in 0..2 {
                let dt = softplus(u[0] * dt_w[c] + u[1] * dt_w[2 + c] + dt_b[c]);
                let a = -a_log[c].exp();
                let abar = (dt * a).exp();
                h[c] = abar * h[c] + dt * b * u[c];
                y[c] = cc * h[c] + d_skip[c] * u[c];
            }
            let g = [zb[0] * sigmoid(zb[0]), zb[1] * sigmoid(zb[1])];
            out.push(y[0] * g[0] * out_proj[0] + y[1] * g[1] * out_proj[1]);
        }
        out
    }

    #[test]
    fn matches_independent_recurrence_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParamStore::<f64>::new();
        let layer = SsmLayer::init(&mut store, "t", &micro_cfg(), &mut rng);
        let xs: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();

        let mut tape = Tape::new();
        let x = tape.constant_vec(vec![16, 1], xs.clone()).unwrap();
        let y = layer.forward(&mut tape, &store, x).unwrap();
        let got = tape.data(y);
        let want = micro_oracle(&store, &xs);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-10, "{g} vs {w}");
        }
    }

    #[test]
    fn zero_input_zero_biases_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let cfg = SsmConfig { d_model: 3, d_state: 4, d_conv: 2, expand: 2 };
        let layer = SsmLayer::init(&mut store, "t", &cfg, &mut rng);
        let bias = store.get_mut(layer.conv_bias_id());
        bias.data_mut().iter_mut().for_each(|v| *v = 0.0);

        let mut tape = Tape::new();
        let x = tape.constant_vec(vec![5, 3], vec![0.0; 15]).unwrap();
        let y = layer.forward(&mut tape, &store, x).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let cfg = SsmConfig { d_model: 2, d_state: 3, d_conv: 4, expand: 2 };
        let layer = SsmLayer::init(&mut store, "t", &cfg, &mut rng);
        let xs: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();

        let run = |xs: &[f64]| {
            let mut tape = Tape::new();
            let x = tape.constant_vec(vec![10, 2], xs.to_vec()).unwrap();
            let y = layer.forward(&mut tape, &store, x).unwrap();
            tape.data(y).to_vec()
        };
        let base = run(&xs);
        let t0 = 6;
        let mut pert = xs.clone();
        pert[t0 * 2] += 5.0;
        pert[t0 * 2 + 1] -= 3.0;
        let changed = run(&pert);
        for t in 0..t0 {
            for c in 0..2 {
                assert_eq!(base[t * 2 + c].to_bits(), changed[t * 2 + c].to_bits());
            }
        }
    }

    #[test]
    fn rejects_empty_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let layer = SsmLayer::init(&mut store, "t", &micro_cfg(), &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant_vec(vec![0, 1], vec![]).unwrap();
        assert!(layer.forward(&mut tape, &store, x).is_err());
    }

    #[test]
    fn empty_stack_is_identity() {
        let stack = SsmStack { layers: Vec::new() };
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new();
        let x = tape.constant_vec(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let y = stack.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn zeroed_out_proj_makes_stack_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let cfg = SsmConfig { d_model: 3, d_state: 2, d_conv: 2, expand: 2 };
        let stack = SsmStack::init(&mut store, "t", &cfg, 1, &mut rng);
        let out_id = stack.layers[0].1.out_proj_id();
        store.get_mut(out_id).data_mut().iter_mut().for_each(|v| *v = 0.0);

        let xs: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant_vec(vec![4, 3], xs.clone()).unwrap();
        let y = stack.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.data(y), &xs[..]);
    }

    #[test]
    fn stack_grad_matches_finite_differences() {
        for seed in [1u64, 2, 3, 4, 5] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::<f64>::new();
            let cfg = SsmConfig { d_model: 4, d_state: 2, d_conv: 2, expand: 2 };
            let stack = SsmStack::init(&mut store, "t", &cfg, 2, &mut rng);
            let xs: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();

            let eval = |store: &ParamStore<f64>, want_grad: bool| -> (f64, Vec<f64>) {
                let mut tape = Tape::new();
                let x = tape.constant_vec(vec![6, 4], xs.clone()).unwrap();
                let y = stack.forward(&mut tape, store, x).unwrap();
                let n = tape.numel(y);
                let w: Vec<f64> = (0..n).map(|i| ((i + 1) as f64).sin()).collect();
                let wv = tape.constant_vec(vec![6, 4], w).unwrap();
                let p = tape.mul(y, wv).unwrap();
                let loss = tape.sum(p);
                let lv = tape.data(loss)[0];
                if !want_grad {
                    return (lv, Vec::new());
                }
                tape.backward(loss).unwrap();
                let mut offsets = vec![0usize];
                for (_, _, t) in store.iter() {
                    offsets.push(offsets.last().unwrap() + t.numel());
                }
                let mut flat = vec![0.0; store.scalar_count()];
                for (id, g) in tape.param_grads() {
                    if let Some(g) = g {
                        let o = offsets[id.index()];
                        flat[o..o + g.len()].copy_from_slice(g);
                    }
                }
                (lv, flat)
            };

            let (_, analytic) = eval(&store, true);
            let theta = store.flatten();
            let mut probe = store.clone();
            let numeric = finite_diff(
                |th| {
                    probe.unflatten(th);
                    eval(&probe, false).0
                },
                &theta,
                FD_STEP,
            );
            let err = max_rel_err(&analytic, &numeric);
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn long_sequence_stays_finite_in_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f32>::new();
        let cfg = SsmConfig { d_model: 4, d_state: 4, d_conv: 4, expand: 2 };
        let layer = SsmLayer::init(&mut store, "t", &cfg, &mut rng);
        let n = 10_000;
        let xs: Vec<f32> = (0..n * 4).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant_vec(vec![n, 4], xs).unwrap();
        let y = layer.forward(&mut tape, &store, x).unwrap();
        assert!(tape.data(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::<f32>::new();
        let cfg = SsmConfig { d_model: 8, d_state: 16, d_conv: 4, expand: 2 };
        let layer = SsmLayer::init(&mut store, "t", &cfg, &mut rng);
        let xs: Vec<f32> = (0..30 * 8).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant_vec(vec![30, 8], xs.clone()).unwrap();
            let y = layer.forward(&mut tape, &store, x).unwrap();
            tape.data(y).to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
