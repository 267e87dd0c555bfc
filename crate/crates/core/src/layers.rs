//! Hybrid quantum layers and the quantum-gated GRU cell.
//!
//! An HQL is `dense-in → VQC → dense-out`. The dense-in output `h` has width
//! `injection_blocks · n_qubits` and is fed into the circuit in chunks of
//! `n_qubits`, one chunk per injection block, each component as the angle of an
//! `RY(encoding(h_i))`. Injection blocks are spread evenly over the ansatz
//! (alternating with pure variational blocks when half the blocks inject).
//! Every block then applies `RZ(θ)`, `RX(θ)` per qubit and a CNOT chain
//! `q → q+1`. The readout is the per-qubit Pauli-Z expectation.

use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{add_assign, add_outer, affine, matvec_t, sigmoid};
use crate::qsim::{
    self, adjoint_from_state, AngleSource, CircuitProgram, Encoding, GateOp, NoiseSpec, QubitState,
};
use crate::rng::Rng;

/// Uniform access to every trainable tensor of a parameter bundle.
pub trait Parameters: Clone {
    /// Calls `f(name, shape, values)` for each tensor in a fixed order.
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    /// Mutable counterpart of [`Parameters::visit`], same order.
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, v| n += v.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit("", &mut |_, _, v| out.extend_from_slice(v));
        out
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut(&mut |v| {
            v.copy_from_slice(&flat[offset..offset + v.len()]);
            offset += v.len();
        });
        debug_assert_eq!(offset, flat.len());
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |v| v.iter_mut().for_each(|x| *x = 0.0));
        z
    }

    fn scale(&mut self, factor: f64) {
        self.visit_mut(&mut |v| v.iter_mut().for_each(|x| *x *= factor));
    }

    fn add_from(&mut self, other: &Self) {
        let flat = other.flatten();
        let mut offset = 0;
        self.visit_mut(&mut |v| {
            add_assign(v, &flat[offset..offset + v.len()]);
            offset += v.len();
        });
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, _, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Circuit shape shared by every HQL of one network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnsatzConfig {
    pub n_qubits: usize,
    /// Total ansatz blocks.
    pub n_blocks: usize,
    /// Blocks that start with a data-injection layer.
    pub injection_blocks: usize,
    pub encoding: Encoding,
}

impl Default for AnsatzConfig {
    fn default() -> Self {
        Self {
            n_qubits: 6,
            n_blocks: 12,
            injection_blocks: 6,
            encoding: Encoding::ArcTan,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HqlConfig {
    pub in_dim: usize,
    pub out_dim: usize,
    pub ansatz: AnsatzConfig,
}

impl HqlConfig {
    pub fn new(in_dim: usize, out_dim: usize, ansatz: AnsatzConfig) -> Self {
        Self {
            in_dim,
            out_dim,
            ansatz,
        }
    }

    /// Width `m` of the dense-in layer.
    pub fn hidden_width(&self) -> usize {
        self.ansatz.injection_blocks * self.ansatz.n_qubits
    }

    pub fn n_theta(&self) -> usize {
        2 * self.ansatz.n_qubits * self.ansatz.n_blocks
    }

    /// Whether block `b` begins with a data-injection layer. Spreads
    /// `injection_blocks` injections evenly over `n_blocks`, starting at block 0.
    pub fn injects_at(&self, block: usize) -> bool {
        let a = &self.ansatz;
        (block * a.injection_blocks) % a.n_blocks < a.injection_blocks
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.ansatz;
        if a.n_qubits == 0 || a.n_qubits > qsim::MAX_QUBITS {
            return Err(Error::Budget(format!(
                "{} qubits requested, supported range is 1..={}",
                a.n_qubits,
                qsim::MAX_QUBITS
            )));
        }
        if a.n_blocks == 0 {
            return Err(Error::Config("ansatz needs at least one block".into()));
        }
        if a.injection_blocks == 0 || a.injection_blocks > a.n_blocks {
            return Err(Error::Config(format!(
                "injection_blocks = {} must be in 1..={}",
                a.injection_blocks, a.n_blocks
            )));
        }
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::Config("HQL dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Builds the SuDaI ansatz circuit for `config`.
pub fn build_hql_program(config: &HqlConfig) -> Result<CircuitProgram> {
    config.validate()?;
    let a = &config.ansatz;
    let n = a.n_qubits;
    let mut ops = Vec::new();
    let mut injection = 0;
    for block in 0..a.n_blocks {
        let inject = config.injects_at(block);
        for q in 0..n {
            if inject {
                ops.push(GateOp::ry(
                    q,
                    AngleSource::Input {
                        slot: injection * n + q,
                        encoding: a.encoding,
                    },
                ));
            }
            let base = 2 * (block * n + q);
            ops.push(GateOp::rz(q, AngleSource::Param { slot: base }));
            ops.push(GateOp::rx(q, AngleSource::Param { slot: base + 1 }));
        }
        for q in 0..n.saturating_sub(1) {
            ops.push(GateOp::cnot(q, q + 1));
        }
        if inject {
            injection += 1;
        }
    }
    CircuitProgram::new(n, ops, config.n_theta(), config.hidden_width())
}

#[derive(Clone, Debug, PartialEq)]
pub struct HqlParams {
    in_dim: usize,
    out_dim: usize,
    /// `m × in_dim`, row-major.
    pub w_in: Vec<f64>,
    pub b_in: Vec<f64>,
    pub theta: Vec<f64>,
    /// `out_dim × n_qubits`, row-major.
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
}

impl HqlParams {
    pub fn zeros(config: &HqlConfig) -> Self {
        let m = config.hidden_width();
        let n = config.ansatz.n_qubits;
        Self {
            in_dim: config.in_dim,
            out_dim: config.out_dim,
            w_in: vec![0.0; m * config.in_dim],
            b_in: vec![0.0; m],
            theta: vec![0.0; config.n_theta()],
            w_out: vec![0.0; config.out_dim * n],
            b_out: vec![0.0; config.out_dim],
        }
    }

    /// Dense weights and biases uniform in `±1/√fan_in`, circuit angles uniform in `[−π, π]`.
    pub fn init(config: &HqlConfig, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(config);
        let bound_in = 1.0 / (config.in_dim as f64).sqrt();
        let bound_out = 1.0 / (config.ansatz.n_qubits as f64).sqrt();
        let pi = std::f64::consts::PI;
        let fill = |v: &mut [f64], b: f64, rng: &mut Rng| {
            v.iter_mut().for_each(|x| *x = rng.random_range(-b..=b));
        };
        fill(&mut p.w_in, bound_in, rng);
        fill(&mut p.b_in, bound_in, rng);
        fill(&mut p.theta, pi, rng);
        fill(&mut p.w_out, bound_out, rng);
        fill(&mut p.b_out, bound_out, rng);
        p
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }
}

impl Parameters for HqlParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        let m = self.b_in.len();
        let n = self.w_out.len() / self.out_dim;
        f(&join(prefix, "w_in"), &[m, self.in_dim], &self.w_in);
        f(&join(prefix, "b_in"), &[m], &self.b_in);
        f(&join(prefix, "theta"), &[self.theta.len()], &self.theta);
        f(&join(prefix, "w_out"), &[self.out_dim, n], &self.w_out);
        f(&join(prefix, "b_out"), &[self.out_dim], &self.b_out);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(&mut self.w_in);
        f(&mut self.b_in);
        f(&mut self.theta);
        f(&mut self.w_out);
        f(&mut self.b_out);
    }
}

/// Intermediates of one HQL forward pass.
#[derive(Clone, Debug)]
pub struct HqlCache {
    x: Vec<f64>,
    h: Vec<f64>,
    z: Vec<f64>,
    /// Noisy trajectory actually simulated, when noise was on.
    sampled: Option<CircuitProgram>,
    state: QubitState,
}

impl HqlCache {
    pub fn expectations(&self) -> &[f64] {
        &self.z
    }
}

/// A hybrid quantum layer with its compiled circuit.
#[derive(Clone, Debug)]
pub struct Hql {
    config: HqlConfig,
    program: Arc<CircuitProgram>,
}

impl Hql {
    pub fn new(config: HqlConfig) -> Result<Self> {
        let program = Arc::new(build_hql_program(&config)?);
        Ok(Self { config, program })
    }

    pub fn config(&self) -> &HqlConfig {
        &self.config
    }

    pub fn program(&self) -> &CircuitProgram {
        &self.program
    }

    fn check_params(&self, p: &HqlParams) -> Result<()> {
        let c = &self.config;
        if p.in_dim != c.in_dim
            || p.out_dim != c.out_dim
            || p.theta.len() != c.n_theta()
            || p.b_in.len() != c.hidden_width()
            || p.w_out.len() != c.out_dim * c.ansatz.n_qubits
        {
            return Err(Error::Shape(format!(
                "HQL params ({} -> {}, {} angles) do not match config ({} -> {}, {} angles)",
                p.in_dim,
                p.out_dim,
                p.theta.len(),
                c.in_dim,
                c.out_dim,
                c.n_theta()
            )));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        p: &HqlParams,
        x: &[f64],
        noise: &NoiseSpec,
        rng: &mut Rng,
    ) -> Result<(Vec<f64>, HqlCache)> {
        self.check_params(p)?;
        if x.len() != self.config.in_dim {
            return Err(Error::Shape(format!(
                "HQL expects input of length {}, got {}",
                self.config.in_dim,
                x.len()
            )));
        }
        let h = affine(&p.w_in, &p.b_in, x);
        let sampled = noise
            .enabled
            .then(|| qsim::sample_noisy_program(&self.program, noise, rng));
        let program = sampled.as_ref().unwrap_or(&self.program);
        let state = qsim::execute(program, &p.theta, &h)?;
        let z = qsim::expect_z_all(&state);
        let y = affine(&p.w_out, &p.b_out, &z);
        Ok((
            y,
            HqlCache {
                x: x.to_vec(),
                h,
                z,
                sampled,
                state,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` and returns `∂L/∂x`.
    pub fn backward_into(
        &self,
        p: &HqlParams,
        cache: &HqlCache,
        upstream: &[f64],
        grads: &mut HqlParams,
    ) -> Result<Vec<f64>> {
        if upstream.len() != self.config.out_dim {
            return Err(Error::Shape(format!(
                "HQL upstream gradient has length {}, expected {}",
                upstream.len(),
                self.config.out_dim
            )));
        }
        add_outer(&mut grads.w_out, upstream, &cache.z);
        add_assign(&mut grads.b_out, upstream);
        let dz = matvec_t(&p.w_out, upstream, self.config.ansatz.n_qubits);
        let program = cache.sampled.as_ref().unwrap_or(&self.program);
        let circuit =
            adjoint_from_state(program, &p.theta, &cache.h, cache.state.clone(), &dz)?;
        add_assign(&mut grads.theta, &circuit.params);
        let dh = circuit.inputs;
        add_outer(&mut grads.w_in, &dh, &cache.x);
        add_assign(&mut grads.b_in, &dh);
        Ok(matvec_t(&p.w_in, &dh, self.config.in_dim))
    }

    /// Gradients of `upstream · y` with respect to params and the layer input.
    pub fn backward(
        &self,
        p: &HqlParams,
        cache: &HqlCache,
        upstream: &[f64],
    ) -> Result<(HqlParams, Vec<f64>)> {
        let mut grads = p.zeros_like();
        let dx = self.backward_into(p, cache, upstream, &mut grads)?;
        Ok((grads, dx))
    }
}

/// Shape of a quantum-gated GRU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub ansatz: AnsatzConfig,
}

impl GruConfig {
    pub fn gate_config(&self) -> HqlConfig {
        HqlConfig::new(self.input_dim + self.hidden_dim, self.hidden_dim, self.ansatz)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub update: HqlParams,
    pub reset: HqlParams,
    pub candidate: HqlParams,
    pub hidden_dim: usize,
}

impl GruParams {
    pub fn zeros(config: &GruConfig) -> Self {
        let g = config.gate_config();
        Self {
            update: HqlParams::zeros(&g),
            reset: HqlParams::zeros(&g),
            candidate: HqlParams::zeros(&g),
            hidden_dim: config.hidden_dim,
        }
    }

    pub fn init(config: &GruConfig, rng: &mut Rng) -> Self {
        let g = config.gate_config();
        Self {
            update: HqlParams::init(&g, rng),
            reset: HqlParams::init(&g, rng),
            candidate: HqlParams::init(&g, rng),
            hidden_dim: config.hidden_dim,
        }
    }
}

impl Parameters for GruParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.update.visit(&join(prefix, "update"), f);
        self.reset.visit(&join(prefix, "reset"), f);
        self.candidate.visit(&join(prefix, "candidate"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.update.visit_mut(f);
        self.reset.visit_mut(f);
        self.candidate.visit_mut(f);
    }
}

/// Intermediates of one GRU step.
#[derive(Clone, Debug)]
pub struct GruStepCache {
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    candidate: Vec<f64>,
    update_cache: HqlCache,
    reset_cache: HqlCache,
    candidate_cache: HqlCache,
}

/// Gradients from backpropagation through a GRU sequence.
#[derive(Clone, Debug)]
pub struct GruBackward {
    pub params: GruParams,
    /// `∂L/∂x_t` for every step, concatenated.
    pub inputs: Vec<f64>,
    pub h0: Vec<f64>,
}

/// A GRU cell whose update, reset and candidate transforms are HQLs.
#[derive(Clone, Debug)]
pub struct QGru {
    config: GruConfig,
    gate: Hql,
}

impl QGru {
    pub fn new(config: GruConfig) -> Result<Self> {
        if config.input_dim == 0 || config.hidden_dim == 0 {
            return Err(Error::Config("GRU dimensions must be positive".into()));
        }
        Ok(Self {
            gate: Hql::new(config.gate_config())?,
            config,
        })
    }

    pub fn config(&self) -> &GruConfig {
        &self.config
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    /// One recurrence step:
    /// `z = σ(U[x; h])`, `r = σ(R[x; h])`, `c = tanh(C[x; r⊙h])`, `h' = (1−z)⊙h + z⊙c`.
    pub fn step(
        &self,
        p: &GruParams,
        x: &[f64],
        h_prev: &[f64],
        noise: &NoiseSpec,
        rng: &mut Rng,
    ) -> Result<(Vec<f64>, GruStepCache)> {
        let hd = self.config.hidden_dim;
        if x.len() != self.config.input_dim || h_prev.len() != hd {
            return Err(Error::Shape(format!(
                "GRU step expects x of length {} and h of length {hd}, got {} and {}",
                self.config.input_dim,
                x.len(),
                h_prev.len()
            )));
        }
        let mut xh = Vec::with_capacity(x.len() + hd);
        xh.extend_from_slice(x);
        xh.extend_from_slice(h_prev);
        let (za, update_cache) = self.gate.forward(&p.update, &xh, noise, rng)?;
        let (ra, reset_cache) = self.gate.forward(&p.reset, &xh, noise, rng)?;
        let z: Vec<f64> = za.iter().map(|&a| sigmoid(a)).collect();
        let r: Vec<f64> = ra.iter().map(|&a| sigmoid(a)).collect();
        for (slot, (ri, hi)) in xh[x.len()..].iter_mut().zip(r.iter().zip(h_prev)) {
            *slot = ri * hi;
        }
        let (ca, candidate_cache) = self.gate.forward(&p.candidate, &xh, noise, rng)?;
        let candidate: Vec<f64> = ca.iter().map(|a| a.tanh()).collect();
        let h: Vec<f64> = (0..hd)
            .map(|i| (1.0 - z[i]) * h_prev[i] + z[i] * candidate[i])
            .collect();
        Ok((
            h,
            GruStepCache {
                h_prev: h_prev.to_vec(),
                z,
                r,
                candidate,
                update_cache,
                reset_cache,
                candidate_cache,
            },
        ))
    }

    /// Runs the cell over `seq` (steps of `input_dim` values, concatenated)
    /// starting from `h0`, or zeros when `h0` is `None`.
    pub fn forward(
        &self,
        p: &GruParams,
        seq: &[f64],
        h0: Option<&[f64]>,
        noise: &NoiseSpec,
        rng: &mut Rng,
    ) -> Result<(Vec<f64>, Vec<GruStepCache>)> {
        let d = self.config.input_dim;
        if seq.is_empty() {
            return Err(Error::Input("GRU input sequence is empty".into()));
        }
        if seq.len() % d != 0 {
            return Err(Error::Shape(format!(
                "sequence length {} is not a multiple of the input width {d}",
                seq.len()
            )));
        }
        let mut h = match h0 {
            Some(h0) => h0.to_vec(),
            None => vec![0.0; self.config.hidden_dim],
        };
        let mut caches = Vec::with_capacity(seq.len() / d);
        for x in seq.chunks_exact(d) {
            let (next, cache) = self.step(p, x, &h, noise, rng)?;
            h = next;
            caches.push(cache);
        }
        Ok((h, caches))
    }

    /// Backward through one step; accumulates into `grads` and returns
    /// `(∂L/∂x_t, ∂L/∂h_{t-1})`.
    pub fn step_backward(
        &self,
        p: &GruParams,
        cache: &GruStepCache,
        dh: &[f64],
        grads: &mut GruParams,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let hd = self.config.hidden_dim;
        let d = self.config.input_dim;
        let mut dz = vec![0.0; hd];
        let mut dc_pre = vec![0.0; hd];
        let mut dh_prev = vec![0.0; hd];
        for i in 0..hd {
            dz[i] = dh[i] * (cache.candidate[i] - cache.h_prev[i]) * cache.z[i] * (1.0 - cache.z[i]);
            dc_pre[i] = dh[i] * cache.z[i] * (1.0 - cache.candidate[i] * cache.candidate[i]);
            dh_prev[i] = dh[i] * (1.0 - cache.z[i]);
        }

        let d_cand_in =
            self.gate
                .backward_into(&p.candidate, &cache.candidate_cache, &dc_pre, &mut grads.candidate)?;
        let mut dx = d_cand_in[..d].to_vec();
        let mut dr = vec![0.0; hd];
        for i in 0..hd {
            let drh = d_cand_in[d + i];
            dr[i] = drh * cache.h_prev[i] * cache.r[i] * (1.0 - cache.r[i]);
            dh_prev[i] += drh * cache.r[i];
        }

        let d_upd_in = self
            .gate
            .backward_into(&p.update, &cache.update_cache, &dz, &mut grads.update)?;
        let d_rst_in = self
            .gate
            .backward_into(&p.reset, &cache.reset_cache, &dr, &mut grads.reset)?;
        for d_in in [&d_upd_in, &d_rst_in] {
            let (d_x, d_h) = d_in.split_at(d);
            add_assign(&mut dx, d_x);
            add_assign(&mut dh_prev, d_h);
        }
        Ok((dx, dh_prev))
    }

    /// Backpropagation through time from `∂L/∂h_final`.
    pub fn backward(
        &self,
        p: &GruParams,
        caches: &[GruStepCache],
        upstream: &[f64],
    ) -> Result<GruBackward> {
        if upstream.len() != self.config.hidden_dim {
            return Err(Error::Shape(format!(
                "GRU upstream gradient has length {}, expected {}",
                upstream.len(),
                self.config.hidden_dim
            )));
        }
        let d = self.config.input_dim;
        let mut grads = p.zeros_like();
        let mut inputs = vec![0.0; caches.len() * d];
        let mut dh = upstream.to_vec();
        for (t, cache) in caches.iter().enumerate().rev() {
            let (dx, dh_prev) = self.step_backward(p, cache, &dh, &mut grads)?;
            inputs[t * d..(t + 1) * d].copy_from_slice(&dx);
            dh = dh_prev;
        }
        Ok(GruBackward {
            params: grads,
            inputs,
            h0: dh,
        })
    }
}
