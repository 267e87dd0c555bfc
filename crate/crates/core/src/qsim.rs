//! Statevector simulator for small variational circuits.
//!
//! Conventions:
//! - qubit 0 is the most significant bit of the basis index, so on two qubits
//!   `|01⟩` is index 1 and has qubit 1 in state `|1⟩`;
//! - rotations are `R_P(θ) = exp(−iθP/2)` for `P ∈ {X, Y, Z}`.
//!
//! Noise is simulated with stochastic trajectories: [`sample_noisy_program`]
//! draws one concrete gate sequence (Pauli insertions, flipped CNOTs) which is
//! then simulated exactly. Gradients are only defined on concrete programs, so
//! noise-aware training differentiates the sampled sequence.

use std::f64::consts::FRAC_PI_2;

use num_complex::Complex64;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Largest register the simulator will allocate.
pub const MAX_QUBITS: usize = 12;

/// Inputs to `ArcCos` encoding are clamped to `±ARCCOS_CLAMP`.
pub const ARCCOS_CLAMP: f64 = 1.0 - 1e-6;

const CIRCUIT_FORMAT: &str = "qtsad-circuit";
const CIRCUIT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

/// Map from a classical input value to a rotation angle.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    /// The value is used as the angle directly.
    Identity,
    #[default]
    ArcTan,
    /// `arccos` of the value clamped to `[−1+1e-6, 1−1e-6]`.
    ArcCos,
}

impl Encoding {
    pub fn angle(self, h: f64) -> f64 {
        match self {
            Encoding::Identity => h,
            Encoding::ArcTan => h.atan(),
            Encoding::ArcCos => h.clamp(-ARCCOS_CLAMP, ARCCOS_CLAMP).acos(),
        }
    }

    /// `d angle / d h`. Zero where the `ArcCos` clamp is active.
    pub fn derivative(self, h: f64) -> f64 {
        match self {
            Encoding::Identity => 1.0,
            Encoding::ArcTan => 1.0 / (1.0 + h * h),
            Encoding::ArcCos => {
                if h.abs() > ARCCOS_CLAMP {
                    0.0
                } else {
                    -1.0 / (1.0 - h * h).sqrt()
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AngleSource {
    Constant { radians: f64 },
    Param { slot: usize },
    Input { slot: usize, encoding: Encoding },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "gate", rename_all = "lowercase")]
pub enum GateOp {
    Rotation {
        axis: Axis,
        wire: usize,
        angle: AngleSource,
    },
    Cnot {
        control: usize,
        target: usize,
    },
    /// Fixed Pauli gate; only produced by noise sampling.
    Pauli { axis: Axis, wire: usize },
}

impl GateOp {
    pub fn rx(wire: usize, angle: AngleSource) -> Self {
        GateOp::Rotation {
            axis: Axis::X,
            wire,
            angle,
        }
    }

    pub fn ry(wire: usize, angle: AngleSource) -> Self {
        GateOp::Rotation {
            axis: Axis::Y,
            wire,
            angle,
        }
    }

    pub fn rz(wire: usize, angle: AngleSource) -> Self {
        GateOp::Rotation {
            axis: Axis::Z,
            wire,
            angle,
        }
    }

    pub fn cnot(control: usize, target: usize) -> Self {
        GateOp::Cnot { control, target }
    }
}

/// A validated gate list with declared parameter and input slot counts.
#[derive(Clone, Debug, PartialEq)]
pub struct CircuitProgram {
    n_qubits: usize,
    ops: Vec<GateOp>,
    n_param_slots: usize,
    n_input_slots: usize,
}

impl CircuitProgram {
    /// Builds a program, checking wires and slot usage. Every parameter slot
    /// must be used at least once and every input slot exactly once.
    pub fn new(
        n_qubits: usize,
        ops: Vec<GateOp>,
        n_param_slots: usize,
        n_input_slots: usize,
    ) -> Result<Self> {
        check_register(n_qubits)?;
        let mut param_uses = vec![0usize; n_param_slots];
        let mut input_uses = vec![0usize; n_input_slots];
        let wire_ok = |w: usize| -> Result<()> {
            if w >= n_qubits {
                Err(Error::Config(format!(
                    "wire {w} outside register of {n_qubits} qubits"
                )))
            } else {
                Ok(())
            }
        };
        for (i, op) in ops.iter().enumerate() {
            match *op {
                GateOp::Rotation { wire, angle, .. } => {
                    wire_ok(wire)?;
                    match angle {
                        AngleSource::Constant { radians } if !radians.is_finite() => {
                            return Err(Error::Numeric(format!(
                                "gate {i} has a non-finite constant angle"
                            )));
                        }
                        AngleSource::Constant { .. } => {}
                        AngleSource::Param { slot } => {
                            *param_uses.get_mut(slot).ok_or_else(|| {
                                Error::Config(format!(
                                    "gate {i} references param slot {slot} of {n_param_slots}"
                                ))
                            })? += 1;
                        }
                        AngleSource::Input { slot, .. } => {
                            *input_uses.get_mut(slot).ok_or_else(|| {
                                Error::Config(format!(
                                    "gate {i} references input slot {slot} of {n_input_slots}"
                                ))
                            })? += 1;
                        }
                    }
                }
                GateOp::Cnot { control, target } => {
                    wire_ok(control)?;
                    wire_ok(target)?;
                    if control == target {
                        return Err(Error::Config(format!(
                            "gate {i}: CNOT control and target are both {control}"
                        )));
                    }
                }
                GateOp::Pauli { wire, .. } => wire_ok(wire)?,
            }
        }
        if let Some(slot) = param_uses.iter().position(|&n| n == 0) {
            return Err(Error::Config(format!("param slot {slot} is never used")));
        }
        if let Some((slot, n)) = input_uses.iter().enumerate().find(|(_, &n)| n != 1) {
            return Err(Error::Config(format!(
                "input slot {slot} is used {n} times, expected exactly once"
            )));
        }
        Ok(Self {
            n_qubits,
            ops,
            n_param_slots,
            n_input_slots,
        })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn ops(&self) -> &[GateOp] {
        &self.ops
    }

    pub fn n_param_slots(&self) -> usize {
        self.n_param_slots
    }

    pub fn n_input_slots(&self) -> usize {
        self.n_input_slots
    }

    pub fn cnot_count(&self) -> usize {
        self.ops
            .iter()
            .filter(|op| matches!(op, GateOp::Cnot { .. }))
            .count()
    }

    fn check_lengths(&self, params: &[f64], inputs: &[f64]) -> Result<()> {
        if params.len() != self.n_param_slots {
            return Err(Error::Shape(format!(
                "expected {} circuit params, got {}",
                self.n_param_slots,
                params.len()
            )));
        }
        if inputs.len() != self.n_input_slots {
            return Err(Error::Shape(format!(
                "expected {} circuit inputs, got {}",
                self.n_input_slots,
                inputs.len()
            )));
        }
        Ok(())
    }

    /// Serializes to the versioned JSON circuit document.
    pub fn to_json(&self) -> String {
        let doc = CircuitDocument {
            format: CIRCUIT_FORMAT.to_string(),
            version: CIRCUIT_VERSION,
            n_qubits: self.n_qubits,
            n_param_slots: self.n_param_slots,
            n_input_slots: self.n_input_slots,
            ops: self.ops.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("circuit documents always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CircuitDocument =
            serde_json::from_str(text).map_err(|e| Error::parse("circuit", e.to_string()))?;
        if doc.format != CIRCUIT_FORMAT {
            return Err(Error::parse(
                "circuit",
                format!("unknown format tag {:?}", doc.format),
            ));
        }
        if doc.version != CIRCUIT_VERSION {
            return Err(Error::parse(
                "circuit",
                format!("unsupported version {}", doc.version),
            ));
        }
        Self::new(doc.n_qubits, doc.ops, doc.n_param_slots, doc.n_input_slots)
    }
}

#[derive(Serialize, Deserialize)]
struct CircuitDocument {
    format: String,
    version: u32,
    n_qubits: usize,
    n_param_slots: usize,
    n_input_slots: usize,
    ops: Vec<GateOp>,
}

fn check_register(n_qubits: usize) -> Result<()> {
    if n_qubits == 0 || n_qubits > MAX_QUBITS {
        return Err(Error::Budget(format!(
            "{n_qubits} qubits requested, supported range is 1..={MAX_QUBITS}"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub enabled: bool,
    /// Probability of a Pauli error after each encoding or parameterized rotation.
    pub p_single: f64,
    /// Probability that a CNOT runs with control and target swapped.
    pub p_cnot: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            enabled: false,
            p_single: 0.1,
            p_cnot: 0.2,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        Self::default()
    }

    pub fn with_probabilities(p_single: f64, p_cnot: f64, seed: u64) -> Self {
        Self {
            enabled: true,
            p_single,
            p_cnot,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_single", self.p_single), ("p_cnot", self.p_cnot)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        Ok(())
    }

    /// Random stream seeded from this spec.
    pub fn rng(&self) -> Rng {
        rng::seeded(self.seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QubitState {
    n_qubits: usize,
    amplitudes: Vec<Complex64>,
}

impl QubitState {
    /// `|0…0⟩` on `n_qubits` qubits.
    pub fn zero(n_qubits: usize) -> Result<Self> {
        check_register(n_qubits)?;
        let mut amplitudes = vec![Complex64::new(0.0, 0.0); 1 << n_qubits];
        amplitudes[0] = Complex64::new(1.0, 0.0);
        Ok(Self {
            n_qubits,
            amplitudes,
        })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    fn mask(&self, wire: usize) -> usize {
        1 << (self.n_qubits - 1 - wire)
    }

    /// Applies one gate. `angle` is the already resolved rotation angle and is
    /// ignored for CNOT and Pauli gates.
    pub fn apply_gate(&mut self, gate: &GateOp, angle: f64) -> Result<()> {
        match *gate {
            GateOp::Rotation { axis, wire, .. } => {
                if !angle.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite rotation angle on wire {wire}"
                    )));
                }
                self.check_wire(wire)?;
                self.rotate(axis, wire, angle);
            }
            GateOp::Cnot { control, target } => {
                self.check_wire(control)?;
                self.check_wire(target)?;
                if control == target {
                    return Err(Error::Config("CNOT control equals target".into()));
                }
                self.cnot(control, target);
            }
            GateOp::Pauli { axis, wire } => {
                self.check_wire(wire)?;
                self.pauli(axis, wire);
            }
        }
        Ok(())
    }

    fn check_wire(&self, wire: usize) -> Result<()> {
        if wire >= self.n_qubits {
            return Err(Error::Config(format!(
                "wire {wire} outside register of {} qubits",
                self.n_qubits
            )));
        }
        Ok(())
    }

    fn rotate(&mut self, axis: Axis, wire: usize, angle: f64) {
        let (s, c) = (0.5 * angle).sin_cos();
        let m = match axis {
            Axis::X => [
                [Complex64::new(c, 0.0), Complex64::new(0.0, -s)],
                [Complex64::new(0.0, -s), Complex64::new(c, 0.0)],
            ],
            Axis::Y => [
                [Complex64::new(c, 0.0), Complex64::new(-s, 0.0)],
                [Complex64::new(s, 0.0), Complex64::new(c, 0.0)],
            ],
            Axis::Z => [
                [Complex64::new(c, -s), Complex64::new(0.0, 0.0)],
                [Complex64::new(0.0, 0.0), Complex64::new(c, s)],
            ],
        };
        self.apply_single(wire, m);
    }

    fn apply_single(&mut self, wire: usize, m: [[Complex64; 2]; 2]) {
        let mask = self.mask(wire);
        for i in 0..self.amplitudes.len() {
            if i & mask != 0 {
                continue;
            }
            let j = i | mask;
            let (a0, a1) = (self.amplitudes[i], self.amplitudes[j]);
            self.amplitudes[i] = m[0][0] * a0 + m[0][1] * a1;
            self.amplitudes[j] = m[1][0] * a0 + m[1][1] * a1;
        }
    }

    fn pauli(&mut self, axis: Axis, wire: usize) {
        let mask = self.mask(wire);
        let i_unit = Complex64::new(0.0, 1.0);
        for i in 0..self.amplitudes.len() {
            if i & mask != 0 {
                continue;
            }
            let j = i | mask;
            let (a0, a1) = (self.amplitudes[i], self.amplitudes[j]);
            match axis {
                Axis::X => {
                    self.amplitudes[i] = a1;
                    self.amplitudes[j] = a0;
                }
                Axis::Y => {
                    self.amplitudes[i] = -i_unit * a1;
                    self.amplitudes[j] = i_unit * a0;
                }
                Axis::Z => self.amplitudes[j] = -a1,
            }
        }
    }

    fn cnot(&mut self, control: usize, target: usize) {
        let (cm, tm) = (self.mask(control), self.mask(target));
        for i in 0..self.amplitudes.len() {
            if i & cm != 0 && i & tm == 0 {
                self.amplitudes.swap(i, i | tm);
            }
        }
    }

    /// Applies the inverse of `gate` at `angle`. Pauli and CNOT are self-inverse.
    fn unapply(&mut self, gate: &GateOp, angle: f64) {
        match *gate {
            GateOp::Rotation { axis, wire, .. } => self.rotate(axis, wire, -angle),
            GateOp::Cnot { control, target } => self.cnot(control, target),
            GateOp::Pauli { axis, wire } => self.pauli(axis, wire),
        }
    }
}

/// `|0…0⟩`; fails outside `1..=MAX_QUBITS`.
pub fn init_zero_state(n_qubits: usize) -> Result<QubitState> {
    QubitState::zero(n_qubits)
}

/// Per-qubit Pauli-Z expectations.
pub fn expect_z_all(state: &QubitState) -> Vec<f64> {
    let n = state.n_qubits;
    let mut out = vec![0.0; n];
    for (i, a) in state.amplitudes.iter().enumerate() {
        let p = a.norm_sqr();
        if p == 0.0 {
            continue;
        }
        for (q, o) in out.iter_mut().enumerate() {
            if i & (1 << (n - 1 - q)) == 0 {
                *o += p;
            } else {
                *o -= p;
            }
        }
    }
    out
}

fn resolve_angle(source: AngleSource, params: &[f64], inputs: &[f64]) -> f64 {
    match source {
        AngleSource::Constant { radians } => radians,
        AngleSource::Param { slot } => params[slot],
        AngleSource::Input { slot, encoding } => encoding.angle(inputs[slot]),
    }
}

fn gate_angle(op: &GateOp, params: &[f64], inputs: &[f64]) -> f64 {
    match *op {
        GateOp::Rotation { angle, .. } => resolve_angle(angle, params, inputs),
        _ => 0.0,
    }
}

/// Simulates `program` exactly. `shift` adds `delta` to the angle of one gate.
fn simulate(
    program: &CircuitProgram,
    params: &[f64],
    inputs: &[f64],
    shift: Option<(usize, f64)>,
) -> Result<QubitState> {
    let mut state = QubitState::zero(program.n_qubits)?;
    for (k, op) in program.ops.iter().enumerate() {
        let mut angle = gate_angle(op, params, inputs);
        if let Some((at, delta)) = shift {
            if at == k {
                angle += delta;
            }
        }
        state.apply_gate(op, angle)?;
    }
    Ok(state)
}

/// Runs `program` from `|0…0⟩`. With noise enabled a noisy gate sequence is
/// first drawn from `rng`; otherwise `rng` is not touched.
pub fn run_circuit(
    program: &CircuitProgram,
    params: &[f64],
    inputs: &[f64],
    noise: &NoiseSpec,
    rng: &mut Rng,
) -> Result<QubitState> {
    program.check_lengths(params, inputs)?;
    if noise.enabled {
        let sampled = sample_noisy_program(program, noise, rng);
        simulate(&sampled, params, inputs, None)
    } else {
        simulate(program, params, inputs, None)
    }
}

/// Noise-free run with no random stream.
pub fn execute(program: &CircuitProgram, params: &[f64], inputs: &[f64]) -> Result<QubitState> {
    program.check_lengths(params, inputs)?;
    simulate(program, params, inputs, None)
}

fn require_noiseless(noise: &NoiseSpec) -> Result<()> {
    if noise.enabled {
        return Err(Error::Unsupported(
            "gradients are defined on concrete (noise-free) programs; sample a noisy program first"
                .into(),
        ));
    }
    Ok(())
}

fn weighted_z(state: &QubitState, weights: &[f64]) -> f64 {
    expect_z_all(state)
        .iter()
        .zip(weights)
        .map(|(z, w)| z * w)
        .sum()
}

/// Parameter-shift gradient of `Σ_q w_q ⟨Z_q⟩` with respect to the param slots.
pub fn grad_parameter_shift(
    program: &CircuitProgram,
    params: &[f64],
    inputs: &[f64],
    obs_weights: &[f64],
    noise: &NoiseSpec,
) -> Result<Vec<f64>> {
    require_noiseless(noise)?;
    program.check_lengths(params, inputs)?;
    check_weights(program, obs_weights)?;
    let mut grad = vec![0.0; program.n_param_slots];
    for (k, op) in program.ops.iter().enumerate() {
        if let GateOp::Rotation {
            angle: AngleSource::Param { slot },
            ..
        } = *op
        {
            let plus = simulate(program, params, inputs, Some((k, FRAC_PI_2)))?;
            let minus = simulate(program, params, inputs, Some((k, -FRAC_PI_2)))?;
            grad[slot] += 0.5 * (weighted_z(&plus, obs_weights) - weighted_z(&minus, obs_weights));
        }
    }
    Ok(grad)
}

fn check_weights(program: &CircuitProgram, obs_weights: &[f64]) -> Result<()> {
    if obs_weights.len() != program.n_qubits {
        return Err(Error::Shape(format!(
            "expected {} observable weights, got {}",
            program.n_qubits,
            obs_weights.len()
        )));
    }
    Ok(())
}

/// Gradients of a weighted Z observable with respect to params and raw inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjointGradients {
    pub params: Vec<f64>,
    /// Includes the encoding derivative `d angle / d input`.
    pub inputs: Vec<f64>,
}

/// Adjoint (reverse-sweep) gradient of `Σ_q w_q ⟨Z_q⟩`.
pub fn grad_adjoint(
    program: &CircuitProgram,
    params: &[f64],
    inputs: &[f64],
    obs_weights: &[f64],
    noise: &NoiseSpec,
) -> Result<AdjointGradients> {
    require_noiseless(noise)?;
    program.check_lengths(params, inputs)?;
    let state = simulate(program, params, inputs, None)?;
    adjoint_from_state(program, params, inputs, state, obs_weights)
}

/// Adjoint sweep starting from the already simulated final `state`.
pub(crate) fn adjoint_from_state(
    program: &CircuitProgram,
    params: &[f64],
    inputs: &[f64],
    mut state: QubitState,
    obs_weights: &[f64],
) -> Result<AdjointGradients> {
    check_weights(program, obs_weights)?;
    let n = program.n_qubits;
    let mut grads = AdjointGradients {
        params: vec![0.0; program.n_param_slots],
        inputs: vec![0.0; program.n_input_slots],
    };
    if obs_weights.iter().all(|&w| w == 0.0) {
        return Ok(grads);
    }

    // λ = O ψ with O = Σ_q w_q Z_q diagonal in the computational basis.
    let mut lambda = state.clone();
    for (i, a) in lambda.amplitudes.iter_mut().enumerate() {
        let diag: f64 = obs_weights
            .iter()
            .enumerate()
            .map(|(q, w)| if i & (1 << (n - 1 - q)) == 0 { *w } else { -*w })
            .sum();
        *a *= diag;
    }

    let mut scratch = state.clone();
    for op in program.ops.iter().rev() {
        let angle = gate_angle(op, params, inputs);
        if let GateOp::Rotation {
            axis,
            wire,
            angle: source,
        } = *op
        {
            let trainable = !matches!(source, AngleSource::Constant { .. });
            if trainable {
                // dU/dθ ψ_{k-1} = −(i/2) P ψ_k, so ∂⟨O⟩/∂θ = Im⟨λ|P ψ_k⟩.
                scratch.amplitudes.copy_from_slice(&state.amplitudes);
                scratch.pauli(axis, wire);
                let overlap: Complex64 = lambda
                    .amplitudes
                    .iter()
                    .zip(&scratch.amplitudes)
                    .map(|(l, p)| l.conj() * p)
                    .sum();
                let d_angle = overlap.im;
                match source {
                    AngleSource::Param { slot } => grads.params[slot] += d_angle,
                    AngleSource::Input { slot, encoding } => {
                        grads.inputs[slot] += d_angle * encoding.derivative(inputs[slot])
                    }
                    AngleSource::Constant { .. } => {}
                }
            }
        }
        state.unapply(op, angle);
        lambda.unapply(op, angle);
    }
    Ok(grads)
}

/// Draws one noisy trajectory of `program`: after every encoding or
/// parameterized rotation a uniformly chosen Pauli is inserted with
/// probability `p_single`, and every CNOT is flipped with probability `p_cnot`.
pub fn sample_noisy_program(
    program: &CircuitProgram,
    noise: &NoiseSpec,
    rng: &mut Rng,
) -> CircuitProgram {
    let mut ops = Vec::with_capacity(program.ops.len() + program.ops.len() / 4);
    for op in &program.ops {
        match *op {
            GateOp::Rotation { wire, angle, .. } => {
                ops.push(*op);
                if !matches!(angle, AngleSource::Constant { .. }) && rng.random::<f64>() < noise.p_single
                {
                    let axis = match rng.random_range(0..3) {
                        0 => Axis::X,
                        1 => Axis::Y,
                        _ => Axis::Z,
                    };
                    ops.push(GateOp::Pauli { axis, wire });
                }
            }
            GateOp::Cnot { control, target } => {
                if rng.random::<f64>() < noise.p_cnot {
                    ops.push(GateOp::Cnot {
                        control: target,
                        target: control,
                    });
                } else {
                    ops.push(*op);
                }
            }
            GateOp::Pauli { .. } => ops.push(*op),
        }
    }
    CircuitProgram {
        n_qubits: program.n_qubits,
        ops,
        n_param_slots: program.n_param_slots,
        n_input_slots: program.n_input_slots,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn param(slot: usize) -> AngleSource {
        AngleSource::Param { slot }
    }

    fn konst(radians: f64) -> AngleSource {
        AngleSource::Constant { radians }
    }

    fn single(op: GateOp, params: usize, inputs: usize) -> CircuitProgram {
        CircuitProgram::new(1, vec![op], params, inputs).unwrap()
    }

    #[test]
    fn zero_state_and_budget() {
        assert_eq!(init_zero_state(1).unwrap().amplitudes(), &[c(1.0), c(0.0)]);
        assert_eq!(
            init_zero_state(2).unwrap().amplitudes(),
            &[c(1.0), c(0.0), c(0.0), c(0.0)]
        );
        assert!(matches!(init_zero_state(13), Err(Error::Budget(_))));
        assert!(matches!(init_zero_state(0), Err(Error::Budget(_))));
    }

    #[test]
    fn ry_pi_flips_to_one() {
        let mut s = init_zero_state(1).unwrap();
        s.apply_gate(&GateOp::ry(0, konst(PI)), PI).unwrap();
        assert!(s.amplitudes()[0].norm() < 1e-15);
        assert!((s.amplitudes()[1].norm() - 1.0).abs() < 1e-15);
        assert!((expect_z_all(&s)[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn rz_keeps_zero_state_expectation() {
        for theta in [0.3, 1.7, -2.9, 10.0] {
            let mut s = init_zero_state(1).unwrap();
            s.apply_gate(&GateOp::rz(0, konst(theta)), theta).unwrap();
            assert!((expect_z_all(&s)[0] - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn cnot_truth_table() {
        // Basis index with qubit 0 as MSB: |c t⟩ -> index 2c + t.
        let expected = [0usize, 1, 3, 2];
        for (input, out) in expected.iter().enumerate() {
            let mut s = init_zero_state(2).unwrap();
            s.amplitudes.iter_mut().for_each(|a| *a = c(0.0));
            s.amplitudes[input] = c(1.0);
            s.apply_gate(&GateOp::cnot(0, 1), 0.0).unwrap();
            for (i, a) in s.amplitudes().iter().enumerate() {
                assert_eq!(*a, c(if i == *out { 1.0 } else { 0.0 }));
            }
        }
    }

    #[test]
    fn non_finite_angle_is_rejected() {
        let mut s = init_zero_state(1).unwrap();
        let err = s.apply_gate(&GateOp::rx(0, konst(0.0)), f64::NAN);
        assert!(matches!(err, Err(Error::Numeric(_))));
    }

    #[test]
    fn expectation_conventions() {
        assert_eq!(expect_z_all(&init_zero_state(2).unwrap()), vec![1.0, 1.0]);

        let mut plus = init_zero_state(2).unwrap();
        for q in 0..2 {
            plus.apply_gate(&GateOp::ry(q, konst(0.0)), PI / 2.0).unwrap();
        }
        for z in expect_z_all(&plus) {
            assert!(z.abs() < 1e-10);
        }

        // |01⟩: qubit 1 excited.
        let mut s = init_zero_state(2).unwrap();
        s.apply_gate(&GateOp::ry(1, konst(PI)), PI).unwrap();
        let z = expect_z_all(&s);
        assert!((z[0] - 1.0).abs() < 1e-12 && (z[1] + 1.0).abs() < 1e-12);
        assert!(s.amplitudes()[1].norm() > 0.999);
    }

    #[test]
    fn run_circuit_closed_forms() {
        let mut rng = rng::seeded(1);
        let empty = CircuitProgram::new(2, vec![], 0, 0).unwrap();
        let s = run_circuit(&empty, &[], &[], &NoiseSpec::noiseless(), &mut rng).unwrap();
        assert_eq!(s, init_zero_state(2).unwrap());

        let enc = single(
            GateOp::ry(
                0,
                AngleSource::Input {
                    slot: 0,
                    encoding: Encoding::ArcTan,
                },
            ),
            0,
            1,
        );
        for h in [0.0, 0.4, -2.5] {
            let s = run_circuit(&enc, &[], &[h], &NoiseSpec::noiseless(), &mut rng).unwrap();
            assert!((expect_z_all(&s)[0] - h.atan().cos()).abs() < 1e-14);
        }
        let s = run_circuit(&enc, &[], &[0.0], &NoiseSpec::noiseless(), &mut rng).unwrap();
        assert!((expect_z_all(&s)[0] - 1.0).abs() < 1e-15);

        let err = run_circuit(&enc, &[], &[], &NoiseSpec::noiseless(), &mut rng);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn noiseless_runs_ignore_seed() {
        let prog = random_program(3, 4, &mut rng::seeded(4));
        let params: Vec<f64> = (0..prog.n_param_slots()).map(|i| i as f64 * 0.37).collect();
        let a = run_circuit(&prog, &params, &[], &NoiseSpec::noiseless(), &mut rng::seeded(1)).unwrap();
        let b = run_circuit(&prog, &params, &[], &NoiseSpec::noiseless(), &mut rng::seeded(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noisy_runs_are_reproducible() {
        let prog = random_program(3, 4, &mut rng::seeded(5));
        let params: Vec<f64> = (0..prog.n_param_slots()).map(|i| i as f64 * 0.11).collect();
        let noise = NoiseSpec::with_probabilities(0.3, 0.3, 77);
        let a = run_circuit(&prog, &params, &[], &noise, &mut noise.rng()).unwrap();
        let b = run_circuit(&prog, &params, &[], &noise, &mut noise.rng()).unwrap();
        assert_eq!(a.amplitudes(), b.amplitudes());
    }

    #[test]
    fn program_validation() {
        assert!(CircuitProgram::new(2, vec![GateOp::cnot(1, 1)], 0, 0).is_err());
        assert!(CircuitProgram::new(2, vec![GateOp::rx(2, konst(0.0))], 0, 0).is_err());
        // unused param slot
        assert!(CircuitProgram::new(1, vec![GateOp::rx(0, param(0))], 2, 0).is_err());
        // input slot used twice
        let inp = AngleSource::Input {
            slot: 0,
            encoding: Encoding::ArcTan,
        };
        assert!(CircuitProgram::new(1, vec![GateOp::rx(0, inp), GateOp::ry(0, inp)], 0, 1).is_err());
        assert!(CircuitProgram::new(1, vec![GateOp::rx(0, param(1))], 1, 0).is_err());
    }

    #[test]
    fn json_document_round_trips() {
        let prog = random_program(3, 3, &mut rng::seeded(9));
        let text = prog.to_json();
        assert!(text.contains("\"version\": 1"));
        assert_eq!(CircuitProgram::from_json(&text).unwrap(), prog);
        let bumped = text.replace("\"version\": 1", "\"version\": 2");
        assert!(matches!(CircuitProgram::from_json(&bumped), Err(Error::Parse { .. })));
    }

    #[test]
    fn parameter_shift_single_qubit_closed_form() {
        let prog = single(GateOp::ry(0, param(0)), 1, 0);
        for theta in [0.0, PI / 2.0, 0.7, -1.3, 2.9] {
            let g = grad_parameter_shift(&prog, &[theta], &[], &[1.0], &NoiseSpec::noiseless())
                .unwrap();
            assert!((g[0] + theta.sin()).abs() < 1e-10, "theta {theta}");
        }
        let g = grad_parameter_shift(&prog, &[PI / 2.0], &[], &[1.0], &NoiseSpec::noiseless())
            .unwrap();
        assert!((g[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradients_reject_noise() {
        let prog = single(GateOp::ry(0, param(0)), 1, 0);
        let noise = NoiseSpec::with_probabilities(0.1, 0.2, 0);
        assert!(matches!(
            grad_parameter_shift(&prog, &[0.1], &[], &[1.0], &noise),
            Err(Error::Unsupported(_))
        ));
        assert!(matches!(
            grad_adjoint(&prog, &[0.1], &[], &[1.0], &noise),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn adjoint_input_gradient_closed_forms() {
        let prog = single(
            GateOp::ry(
                0,
                AngleSource::Input {
                    slot: 0,
                    encoding: Encoding::ArcTan,
                },
            ),
            0,
            1,
        );
        let g0 = grad_adjoint(&prog, &[], &[0.0], &[1.0], &NoiseSpec::noiseless()).unwrap();
        assert!(g0.inputs[0].abs() < 1e-15);
        let g1 = grad_adjoint(&prog, &[], &[1.0], &[1.0], &NoiseSpec::noiseless()).unwrap();
        assert!((g1.inputs[0] + 2f64.sqrt() / 4.0).abs() < 1e-12);
    }

    #[test]
    fn noise_sampling_degenerate_probabilities() {
        let prog = random_program(3, 4, &mut rng::seeded(3));
        let mut rng = rng::seeded(10);
        let none = NoiseSpec::with_probabilities(0.0, 0.0, 0);
        assert_eq!(sample_noisy_program(&prog, &none, &mut rng), prog);

        let always = NoiseSpec::with_probabilities(1.0, 0.0, 0);
        let noisy = sample_noisy_program(&prog, &always, &mut rng);
        let ops = noisy.ops();
        let mut k = 0;
        for op in prog.ops() {
            assert_eq!(ops[k], *op);
            k += 1;
            if let GateOp::Rotation { wire, angle, .. } = *op {
                if !matches!(angle, AngleSource::Constant { .. }) {
                    match ops[k] {
                        GateOp::Pauli { wire: w, .. } => assert_eq!(w, wire),
                        other => panic!("expected Pauli, got {other:?}"),
                    }
                    k += 1;
                }
            }
        }
        assert_eq!(k, ops.len());

        let flip = NoiseSpec::with_probabilities(0.0, 1.0, 0);
        for (a, b) in prog.ops().iter().zip(sample_noisy_program(&prog, &flip, &mut rng).ops()) {
            if let (GateOp::Cnot { control, target }, GateOp::Cnot { control: c2, target: t2 }) = (a, b) {
                assert_eq!((control, target), (t2, c2));
            }
        }
    }

    #[test]
    fn noise_sampling_is_seed_deterministic() {
        let prog = random_program(4, 5, &mut rng::seeded(8));
        let noise = NoiseSpec::with_probabilities(0.1, 0.2, 1234);
        let a = sample_noisy_program(&prog, &noise, &mut noise.rng());
        let b = sample_noisy_program(&prog, &noise, &mut noise.rng());
        assert_eq!(a, b);
    }

    fn weighted(prog: &CircuitProgram, params: &[f64], inputs: &[f64], w: &[f64]) -> f64 {
        weighted_z(&execute(prog, params, inputs).unwrap(), w)
    }

    #[test]
    fn parameter_shift_matches_finite_differences() {
        let mut rng = rng::seeded(21);
        for _ in 0..20 {
            let prog = random_program(3, 4, &mut rng);
            let params: Vec<f64> = (0..prog.n_param_slots())
                .map(|_| rng.random_range(-PI..PI))
                .collect();
            let w: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = grad_parameter_shift(&prog, &params, &[], &w, &NoiseSpec::noiseless()).unwrap();
            let step = 1e-5;
            for j in 0..params.len() {
                let mut p = params.clone();
                p[j] += step;
                let up = weighted(&prog, &p, &[], &w);
                p[j] -= 2.0 * step;
                let down = weighted(&prog, &p, &[], &w);
                let fd = (up - down) / (2.0 * step);
                assert!((g[j] - fd).abs() <= 1e-4 * fd.abs().max(1e-2), "{} vs {fd}", g[j]);
            }
        }
    }

    #[test]
    fn adjoint_matches_parameter_shift_with_inputs() {
        let mut rng = rng::seeded(22);
        for n in 1..=4 {
            for depth in 1..=6 {
                let base = random_program(n, depth, &mut rng);
                // Prepend encoded inputs on every wire.
                let mut ops: Vec<GateOp> = (0..n)
                    .map(|q| GateOp::ry(q, AngleSource::Input { slot: q, encoding: Encoding::ArcTan }))
                    .collect();
                ops.extend_from_slice(base.ops());
                ops.push(GateOp::rx(0, konst(0.3)));
                let prog = CircuitProgram::new(n, ops, base.n_param_slots(), n).unwrap();
                let params: Vec<f64> = (0..prog.n_param_slots())
                    .map(|_| rng.random_range(-PI..PI))
                    .collect();
                let inputs: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
                let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let shift =
                    grad_parameter_shift(&prog, &params, &inputs, &w, &NoiseSpec::noiseless()).unwrap();
                let adj = grad_adjoint(&prog, &params, &inputs, &w, &NoiseSpec::noiseless()).unwrap();
                for (a, b) in adj.params.iter().zip(&shift) {
                    assert!((a - b).abs() <= 1e-8);
                }
                let step = 1e-6;
                for j in 0..n {
                    let mut x = inputs.clone();
                    x[j] += step;
                    let up = weighted(&prog, &params, &x, &w);
                    x[j] -= 2.0 * step;
                    let down = weighted(&prog, &params, &x, &w);
                    let fd = (up - down) / (2.0 * step);
                    assert!((adj.inputs[j] - fd).abs() <= 1e-7, "{} vs {fd}", adj.inputs[j]);
                }
            }
        }
    }

    #[test]
    fn long_sequences_preserve_norm_and_invert() {
        let mut rng = rng::seeded(23);
        let prog = random_program(4, 250, &mut rng);
        let params: Vec<f64> = (0..prog.n_param_slots())
            .map(|_| rng.random_range(-PI..PI))
            .collect();
        let s = execute(&prog, &params, &[]).unwrap();
        assert!(prog.ops().len() >= 1000);
        assert!((s.norm_sqr() - 1.0).abs() <= 1e-10);

        let mut t = s.clone();
        let gate = GateOp::ry(2, konst(0.0));
        t.apply_gate(&gate, 1.234).unwrap();
        t.apply_gate(&gate, -1.234).unwrap();
        for (a, b) in t.amplitudes().iter().zip(s.amplitudes()) {
            assert!((a - b).norm() <= 1e-10);
        }
    }

    /// Random program of `depth` layers: a rotation per qubit with a fresh
    /// param slot, then a CNOT between two random distinct wires.
    pub(crate) fn random_program(n: usize, depth: usize, rng: &mut Rng) -> CircuitProgram {
        let mut ops = Vec::new();
        let mut slot = 0;
        for _ in 0..depth {
            for q in 0..n {
                let axis = match rng.random_range(0..3) {
                    0 => Axis::X,
                    1 => Axis::Y,
                    _ => Axis::Z,
                };
                ops.push(GateOp::Rotation {
                    axis,
                    wire: q,
                    angle: param(slot),
                });
                slot += 1;
            }
            if n > 1 {
                let c = rng.random_range(0..n);
                let t = (c + rng.random_range(1..n)) % n;
                ops.push(GateOp::cnot(c, t));
            }
        }
        CircuitProgram::new(n, ops, slot, 0).unwrap()
    }
}
