//! Continuous attractor network on a ring or torus.
//!
//! Neurons sit on a regular grid over `(-pi, pi]` per axis. Recurrent weights are a
//! Gaussian of the shortest circular distance, so the connectivity is circulant and
//! every stationary bump is a circular roll of every other one.
//!
//! The discrete sums of the rate equation carry the grid cell measure `(2 pi / N)^P`
//! so that they approximate the continuum integrals the closed-form bump amplitude is
//! derived from:
//!
//! ```text
//! tau dU/dt = -U + rho * dA * sum_j W_ij r_j + I
//! r_i       = U_i^2 / (1 + k rho dA sum_j U_j^2)          (global inhibition)
//! ```
//!
//! Stationary solution, with `U = U0 exp(-x^2 / 4a^2)` and `r = A exp(-x^2 / 2a^2)`:
//!
//! * torus: `A = [1 + sqrt(1 - 32 pi a^2 k / (J^2 rho))] / (4 pi a^2 k rho)`, `U0 = rho J A / 2`.
//! * ring: substituting the 1D Gaussian integrals (`int U^2 = sqrt(2 pi) a U0^2`, kernel
//!   convolution gain `J / (2 sqrt(pi) a)`) into the same self-consistency equations gives
//!   `A = [1 + sqrt(1 - 16 pi sqrt(2 pi) k a^3 / (J^2 rho))] / (2 sqrt(2 pi) k rho a)` and
//!   `U0 = rho J A / (2 sqrt(pi) a)`.
//!
//! The ring closed form is only trusted through the fixed-point residual check.

use std::f64::consts::PI;

use ndarray::Array2;

use crate::error::{GcqError, Result};
use crate::exact::{exact_sum, two_diff};

/// Below this synaptic magnitude the network is treated as quiescent when measuring
/// relative residuals.
const QUIESCENT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Topology {
    Ring,
    Torus,
}

impl Topology {
    pub fn dims(self) -> usize {
        match self {
            Topology::Ring => 1,
            Topology::Torus => 2,
        }
    }

    pub fn id(self) -> u8 {
        match self {
            Topology::Ring => 0,
            Topology::Torus => 1,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(Topology::Ring),
            1 => Some(Topology::Torus),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Topology::Ring => "ring",
            Topology::Torus => "torus",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ring" => Some(Topology::Ring),
            "torus" => Some(Topology::Torus),
            _ => None,
        }
    }

    /// Moves available on this topology, in canonical order.
    pub fn moves(self) -> &'static [Move] {
        match self {
            Topology::Ring => &[Move::Stay, Move::Forward(Axis::First), Move::Backward(Axis::First)],
            Topology::Torus => &[
                Move::Stay,
                Move::Forward(Axis::First),
                Move::Backward(Axis::First),
                Move::Forward(Axis::Second),
                Move::Backward(Axis::Second),
            ],
        }
    }
}

/// Form of the divisive normalization denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// `1 + k rho dA sum_j U_j^2`. The closed-form bump is exact for this form.
    Global,
    /// `1 + k rho dA sum_j W_ij U_j^2`. The weight-filtered variant; bumps are only
    /// approximately Gaussian.
    Local,
}

impl Normalization {
    pub fn name(self) -> &'static str {
        match self {
            Normalization::Global => "global",
            Normalization::Local => "local",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "global" => Some(Normalization::Global),
            "local" => Some(Normalization::Local),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Axis {
    First,
    Second,
}

/// A single-network action: stay put, or shift the bump one step along an axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Move {
    Stay,
    Forward(Axis),
    Backward(Axis),
}

impl Move {
    pub fn inverse(self) -> Move {
        match self {
            Move::Stay => Move::Stay,
            Move::Forward(a) => Move::Backward(a),
            Move::Backward(a) => Move::Forward(a),
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            Move::Stay => "stay",
            Move::Forward(Axis::First) => "+1",
            Move::Backward(Axis::First) => "-1",
            Move::Forward(Axis::Second) => "+2",
            Move::Backward(Axis::Second) => "-2",
        }
    }

    pub fn parse(token: &str) -> Option<Move> {
        match token {
            "stay" | "0" => Some(Move::Stay),
            "+1" => Some(Move::Forward(Axis::First)),
            "-1" => Some(Move::Backward(Axis::First)),
            "+2" => Some(Move::Forward(Axis::Second)),
            "-2" => Some(Move::Backward(Axis::Second)),
            _ => None,
        }
    }

    /// Signed displacement along each axis, in units of the step size.
    pub fn offsets(self) -> (i64, i64) {
        match self {
            Move::Stay => (0, 0),
            Move::Forward(Axis::First) => (1, 0),
            Move::Backward(Axis::First) => (-1, 0),
            Move::Forward(Axis::Second) => (0, 1),
            Move::Backward(Axis::Second) => (0, -1),
        }
    }
}

/// Physical constants of one attractor network.
#[derive(Debug, Clone, PartialEq)]
pub struct CannParams {
    pub topology: Topology,
    pub neurons_per_axis: usize,
    /// Attractor centres per neuron spacing (ring only). `K = subdivision * N`.
    pub subdivision: usize,
    pub tau: f64,
    pub rho: f64,
    /// Connection strength J.
    pub strength: f64,
    /// Connection width a, radians.
    pub width: f64,
    /// Divisive normalization strength k.
    pub inhibition: f64,
    pub dt: f64,
    pub conv_tol: f64,
    pub max_steps: usize,
    pub normalization: Normalization,
}

impl Default for CannParams {
    fn default() -> Self {
        CannParams {
            topology: Topology::Ring,
            neurons_per_axis: 16,
            subdivision: 1,
            tau: 1.0,
            rho: 1.0,
            strength: 1.0,
            width: 0.455,
            inhibition: 0.02,
            dt: 0.1,
            conv_tol: 1e-6,
            max_steps: 20_000,
            normalization: Normalization::Global,
        }
    }
}

impl CannParams {
    pub fn ring(neurons: usize) -> Self {
        CannParams {
            neurons_per_axis: neurons,
            ..Default::default()
        }
    }

    pub fn torus(neurons: usize) -> Self {
        CannParams {
            topology: Topology::Torus,
            neurons_per_axis: neurons,
            ..Default::default()
        }
    }

    /// Total neuron count d.
    pub fn neuron_count(&self) -> usize {
        self.neurons_per_axis.pow(self.topology.dims() as u32)
    }

    /// Attractor centres along one axis.
    pub fn centers_per_axis(&self) -> usize {
        self.neurons_per_axis * self.subdivision
    }

    /// Number of attractors K.
    pub fn attractor_count(&self) -> usize {
        self.centers_per_axis().pow(self.topology.dims() as u32)
    }

    /// Grid spacing along one axis, radians.
    pub fn spacing(&self) -> f64 {
        2.0 * PI / self.neurons_per_axis as f64
    }

    /// Quadrature weight carried by the discrete sums.
    pub fn cell_measure(&self) -> f64 {
        self.spacing().powi(self.topology.dims() as i32)
    }

    pub fn radicand(&self) -> f64 {
        let (a, j, k, rho) = (self.width, self.strength, self.inhibition, self.rho);
        match self.topology {
            Topology::Torus => 1.0 - 32.0 * PI * a * a * k / (j * j * rho),
            Topology::Ring => 1.0 - 16.0 * PI * (2.0 * PI).sqrt() * k * a.powi(3) / (j * j * rho),
        }
    }

    /// Peak firing rate A of a stationary bump.
    pub fn amplitude(&self) -> Result<f64> {
        let radicand = self.radicand();
        if radicand < 0.0 {
            return Err(GcqError::StabilityViolation { radicand });
        }
        let (a, k, rho) = (self.width, self.inhibition, self.rho);
        Ok(match self.topology {
            Topology::Torus => (1.0 + radicand.sqrt()) / (4.0 * PI * a * a * k * rho),
            Topology::Ring => (1.0 + radicand.sqrt()) / (2.0 * (2.0 * PI).sqrt() * k * rho * a),
        })
    }

    /// Peak synaptic input U0 of a stationary bump.
    pub fn synaptic_amplitude(&self) -> Result<f64> {
        let amp = self.amplitude()?;
        Ok(match self.topology {
            Topology::Torus => self.rho * self.strength * amp / 2.0,
            Topology::Ring => self.rho * self.strength * amp / (2.0 * PI.sqrt() * self.width),
        })
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(name: &'static str, v: f64) -> Result<()> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(GcqError::InvalidParameter {
                    name,
                    reason: format!("must be finite and > 0, got {v}"),
                })
            }
        }
        positive("tau", self.tau)?;
        positive("rho", self.rho)?;
        positive("strength", self.strength)?;
        positive("width", self.width)?;
        positive("inhibition", self.inhibition)?;
        positive("dt", self.dt)?;
        positive("conv_tol", self.conv_tol)?;
        if self.neurons_per_axis < 2 {
            return Err(GcqError::InvalidParameter {
                name: "neurons",
                reason: "need at least 2 neurons per axis".into(),
            });
        }
        if self.subdivision == 0 || (self.topology == Topology::Torus && self.subdivision != 1) {
            return Err(GcqError::InvalidParameter {
                name: "subdivision",
                reason: "must be >= 1, and exactly 1 on a torus".into(),
            });
        }
        if self.dt >= self.tau {
            return Err(GcqError::InvalidParameter {
                name: "dt",
                reason: format!("explicit integration needs dt < tau ({} >= {})", self.dt, self.tau),
            });
        }
        if self.max_steps == 0 {
            return Err(GcqError::InvalidParameter {
                name: "max_steps",
                reason: "must be positive".into(),
            });
        }
        let radicand = self.radicand();
        if radicand.is_nan() || radicand < 0.0 {
            return Err(GcqError::StabilityViolation { radicand });
        }
        Ok(())
    }

    /// Squared angular distance between neuron `neuron` and attractor centre `center`.
    fn center_distance_sq(&self, neuron: usize, center: usize) -> f64 {
        let l = self.centers_per_axis();
        let unit = 2.0 * PI / l as f64;
        let n = self.neurons_per_axis;
        let r = self.subdivision;
        match self.topology {
            Topology::Ring => {
                let du = circular_units(neuron * r, center, l) as f64 * unit;
                du * du
            }
            Topology::Torus => {
                let (nx, ny) = (neuron / n, neuron % n);
                let (cx, cy) = (center / l, center % l);
                let dx = circular_units(nx, cx, l) as f64 * unit;
                let dy = circular_units(ny, cy, l) as f64 * unit;
                dx * dx + dy * dy
            }
        }
    }
}

/// Shortest circular distance between two positions on a cycle of length `len`.
pub fn circular_units(a: usize, b: usize, len: usize) -> usize {
    let diff = (a + len - b % len) % len;
    diff.min(len - diff)
}

/// Firing-rate pattern over the network's neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct BumpPattern {
    pub values: Vec<f64>,
    pub center: Option<usize>,
}

/// Synaptic input, firing rate and elapsed time of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub u: Vec<f64>,
    pub r: Vec<f64>,
    pub t: f64,
}

impl NetworkState {
    pub fn quiescent(d: usize) -> Self {
        NetworkState {
            u: vec![0.0; d],
            r: vec![0.0; d],
            t: 0.0,
        }
    }
}

/// Circulant recurrent connectivity, stored as the kernel row of neuron 0.
///
/// Products are always accumulated over offsets in the same order, so rolling the
/// input rolls the output bit for bit.
#[derive(Debug, Clone)]
pub struct Connectivity {
    topology: Topology,
    n: usize,
    kernel: Vec<f64>,
}

impl Connectivity {
    pub fn new(params: &CannParams) -> Self {
        let n = params.neurons_per_axis;
        let h = params.spacing();
        let a2 = params.width * params.width;
        let scale = params.strength / (2.0 * PI * a2);
        let kernel = (0..params.neuron_count())
            .map(|j| {
                let d2 = match params.topology {
                    Topology::Ring => {
                        let d = circular_units(0, j, n) as f64 * h;
                        d * d
                    }
                    Topology::Torus => {
                        let dx = circular_units(0, j / n, n) as f64 * h;
                        let dy = circular_units(0, j % n, n) as f64 * h;
                        dx * dx + dy * dy
                    }
                };
                scale * (-d2 / (2.0 * a2)).exp()
            })
            .collect();
        Connectivity {
            topology: params.topology,
            n,
            kernel,
        }
    }

    pub fn len(&self) -> usize {
        self.kernel.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernel.is_empty()
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.kernel[self.offset(i, j)]
    }

    fn offset(&self, i: usize, j: usize) -> usize {
        let n = self.n;
        match self.topology {
            Topology::Ring => (j + n - i) % n,
            Topology::Torus => {
                let dx = (j / n + n - i / n) % n;
                let dy = (j % n + n - i % n) % n;
                dx * n + dy
            }
        }
    }

    /// `y = W x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n;
        match self.topology {
            Topology::Ring => (0..n)
                .map(|i| {
                    let mut acc = 0.0;
                    for (delta, w) in self.kernel.iter().enumerate() {
                        acc += w * x[(i + delta) % n];
                    }
                    acc
                })
                .collect(),
            Topology::Torus => (0..n * n)
                .map(|i| {
                    let (ix, iy) = (i / n, i % n);
                    let mut acc = 0.0;
                    for dx in 0..n {
                        let row = ((ix + dx) % n) * n;
                        let krow = &self.kernel[dx * n..(dx + 1) * n];
                        for (dy, w) in krow.iter().enumerate() {
                            acc += w * x[row + (iy + dy) % n];
                        }
                    }
                    acc
                })
                .collect(),
        }
    }

    pub fn matrix(&self) -> Array2<f64> {
        let d = self.kernel.len();
        Array2::from_shape_fn((d, d), |(i, j)| self.weight(i, j))
    }
}

/// Dense d x d recurrent weight matrix.
pub fn connectivity_matrix(params: &CannParams) -> Array2<f64> {
    Connectivity::new(params).matrix()
}

/// Stationary bump centred on attractor `center`.
pub fn stationary_bump(params: &CannParams, center: usize) -> Result<BumpPattern> {
    let amp = params.amplitude()?;
    check_center(params, center)?;
    let two_a2 = 2.0 * params.width * params.width;
    let values = (0..params.neuron_count())
        .map(|n| amp * (-params.center_distance_sq(n, center) / two_a2).exp())
        .collect();
    Ok(BumpPattern {
        values,
        center: Some(center),
    })
}

/// Network state sitting on the stationary bump at `center`: the Gaussian synaptic
/// profile and its normalized firing rate.
pub fn stationary_state(params: &CannParams, conn: &Connectivity, center: usize) -> Result<NetworkState> {
    let u0 = params.synaptic_amplitude()?;
    check_center(params, center)?;
    let four_a2 = 4.0 * params.width * params.width;
    let u: Vec<f64> = (0..params.neuron_count())
        .map(|n| u0 * (-params.center_distance_sq(n, center) / four_a2).exp())
        .collect();
    let r = divisive_normalization(&u, params, conn);
    Ok(NetworkState { u, r, t: 0.0 })
}

fn check_center(params: &CannParams, center: usize) -> Result<()> {
    if center >= params.attractor_count() {
        return Err(GcqError::DimensionMismatch {
            context: "attractor index",
            expected: params.attractor_count(),
            found: center,
        });
    }
    Ok(())
}

/// Divisive normalization from synaptic input to firing rate.
pub fn divisive_normalization(u: &[f64], params: &CannParams, conn: &Connectivity) -> Vec<f64> {
    let gain = params.inhibition * params.rho * params.cell_measure();
    let sq: Vec<f64> = u.iter().map(|x| x * x).collect();
    match params.normalization {
        Normalization::Global => {
            let total: f64 = sq.iter().sum();
            let denom = 1.0 + gain * total;
            sq.iter().map(|s| s / denom).collect()
        }
        Normalization::Local => {
            let pooled = conn.apply(&sq);
            sq.iter().zip(pooled).map(|(s, p)| s / (1.0 + gain * p)).collect()
        }
    }
}

/// One explicit Euler step of the rate dynamics.
pub fn step_dynamics(
    state: &NetworkState,
    input: &[f64],
    params: &CannParams,
    conn: &Connectivity,
) -> Result<NetworkState> {
    let d = state.u.len();
    if input.len() != d || state.r.len() != d || conn.len() != d {
        return Err(GcqError::DimensionMismatch {
            context: "step_dynamics",
            expected: d,
            found: input.len(),
        });
    }
    let recurrent = conn.apply(&state.r);
    let gain = params.rho * params.cell_measure();
    let rate = params.dt / params.tau;
    let u: Vec<f64> = (0..d)
        .map(|i| state.u[i] + rate * (-state.u[i] + gain * recurrent[i] + input[i]))
        .collect();
    if u.iter().any(|x| !x.is_finite()) {
        return Err(GcqError::NonFinite(format!("synaptic input at t = {}", state.t)));
    }
    let r = divisive_normalization(&u, params, conn);
    Ok(NetworkState {
        u,
        r,
        t: state.t + params.dt,
    })
}

/// `max |U' - U| / max |U|`, with the denominator floored for a quiescent network.
pub fn relative_residual(prev: &[f64], next: &[f64]) -> f64 {
    let change = prev.iter().zip(next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = prev.iter().map(|x| x.abs()).fold(0.0, f64::max);
    change / scale.max(QUIESCENT_FLOOR)
}

/// Relative residual of the stationary state at `center` under one Euler step with no
/// input.
pub fn fixed_point_residual(params: &CannParams, conn: &Connectivity, center: usize) -> Result<f64> {
    let state = stationary_state(params, conn, center)?;
    let zero = vec![0.0; state.u.len()];
    let next = step_dynamics(&state, &zero, params, conn)?;
    Ok(relative_residual(&state.u, &next.u))
}

/// Index of the codeword with the largest inner product with `input`; lowest index on
/// ties. Products are summed exactly so that inputs related by a roll give identical
/// scores.
pub fn template_match_direct(input: &[f64], codewords: &[BumpPattern]) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, e) in codewords.iter().enumerate() {
        let score = exact_sum(e.values.iter().zip(input).map(|(a, b)| a * b));
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    best
}

/// Relaxation protocol durations, in units of tau.
pub const INPUT_DURATION_TAU: f64 = 20.0;
pub const FREE_DURATION_TAU: f64 = 20.0;

/// Drives the quiescent network with a constant input, removes it, lets the dynamics
/// settle and reads out the attractor whose bump best matches the firing pattern.
pub fn relax(
    input: &[f64],
    params: &CannParams,
    conn: &Connectivity,
    codewords: &[BumpPattern],
) -> Result<(usize, NetworkState)> {
    let d = params.neuron_count();
    if input.len() != d {
        return Err(GcqError::DimensionMismatch {
            context: "relax input",
            expected: d,
            found: input.len(),
        });
    }
    let driven = (INPUT_DURATION_TAU * params.tau / params.dt).round() as usize;
    let free = (FREE_DURATION_TAU * params.tau / params.dt).round() as usize;
    let zero = vec![0.0; d];
    let mut state = NetworkState::quiescent(d);
    let mut steps = 0;
    for _ in 0..driven {
        state = step_dynamics(&state, input, params, conn)?;
        steps += 1;
    }
    let mut free_steps = 0;
    let mut residual = f64::INFINITY;
    while free_steps < free || residual >= params.conv_tol {
        if steps >= params.max_steps {
            return Err(GcqError::NoConvergence { steps, residual });
        }
        let next = step_dynamics(&state, &zero, params, conn)?;
        residual = relative_residual(&state.u, &next.u);
        state = next;
        steps += 1;
        free_steps += 1;
    }
    Ok((template_match_direct(&state.r, codewords), state))
}

/// Index arithmetic behind a move: shift an attractor index by `step` centres along
/// the move's axis.
pub fn roll_center(center: usize, mv: Move, step: usize, topology: Topology, axis_len: usize) -> usize {
    let (ox, oy) = mv.offsets();
    let l = axis_len as i64;
    let s = step as i64;
    match topology {
        Topology::Ring => ((center as i64 + ox * s).rem_euclid(l)) as usize,
        Topology::Torus => {
            let (x, y) = ((center / axis_len) as i64, (center % axis_len) as i64);
            let nx = (x + ox * s).rem_euclid(l);
            let ny = (y + oy * s).rem_euclid(l);
            (nx * l + ny) as usize
        }
    }
}

/// Circularly rolls a neuron pattern by whole neurons along each axis.
pub fn roll_pattern(values: &[f64], topology: Topology, n: usize, shift: (i64, i64)) -> Vec<f64> {
    let ni = n as i64;
    match topology {
        Topology::Ring => (0..n)
            .map(|i| values[((i as i64 - shift.0).rem_euclid(ni)) as usize])
            .collect(),
        Topology::Torus => (0..n * n)
            .map(|i| {
                let x = ((i / n) as i64 - shift.0).rem_euclid(ni) as usize;
                let y = ((i % n) as i64 - shift.1).rem_euclid(ni) as usize;
                values[x * n + y]
            })
            .collect(),
    }
}

/// Exact difference between two codewords, as rounded value plus rounding error.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftVector {
    pub delta: Vec<f64>,
    pub error: Vec<f64>,
}

impl ShiftVector {
    pub fn between(from: &[f64], to: &[f64]) -> Self {
        let (delta, error) = from.iter().zip(to).map(|(&a, &b)| two_diff(b, a)).unzip();
        ShiftVector { delta, error }
    }

    pub fn zero(d: usize) -> Self {
        ShiftVector {
            delta: vec![0.0; d],
            error: vec![0.0; d],
        }
    }

    fn rolled(&self, topology: Topology, n: usize, shift: (i64, i64)) -> Self {
        ShiftVector {
            delta: roll_pattern(&self.delta, topology, n, shift),
            error: roll_pattern(&self.error, topology, n, shift),
        }
    }
}

/// Difference vectors that move a bump by `step` centres along each axis.
///
/// Stored at the reference centres `0..subdivision` and rolled to any other centre;
/// the connectivity is translation invariant so the rolled vectors are exact.
#[derive(Debug, Clone)]
pub struct ActionBasis {
    pub step: usize,
    /// Displacement per move, radians.
    pub step_radians: f64,
    topology: Topology,
    neurons: usize,
    subdivision: usize,
    references: Vec<Vec<(Move, ShiftVector)>>,
}

impl ActionBasis {
    pub fn moves(&self) -> impl Iterator<Item = Move> + '_ {
        self.references[0].iter().map(|(m, _)| *m)
    }

    /// Shift vector of `mv` at the reference centre 0.
    pub fn reference(&self, mv: Move) -> Option<&ShiftVector> {
        self.references[0].iter().find(|(m, _)| *m == mv).map(|(_, v)| v)
    }

    /// Shift vector of `mv` applied at `center`.
    pub fn at(&self, center: usize, mv: Move) -> Option<ShiftVector> {
        let (residue, shift) = match self.topology {
            Topology::Ring => (center % self.subdivision, ((center / self.subdivision) as i64, 0)),
            Topology::Torus => (0, ((center / self.neurons) as i64, (center % self.neurons) as i64)),
        };
        self.references[residue]
            .iter()
            .find(|(m, _)| *m == mv)
            .map(|(_, v)| v.rolled(self.topology, self.neurons, shift))
    }
}

/// Builds the action basis for a network's codewords.
pub fn action_basis(params: &CannParams, codewords: &[BumpPattern], step: usize) -> Result<ActionBasis> {
    if step == 0 {
        return Err(GcqError::InvalidParameter {
            name: "step",
            reason: "must be >= 1".into(),
        });
    }
    if codewords.len() != params.attractor_count() {
        return Err(GcqError::DimensionMismatch {
            context: "action basis codewords",
            expected: params.attractor_count(),
            found: codewords.len(),
        });
    }
    let l = params.centers_per_axis();
    let residues = match params.topology {
        Topology::Ring => params.subdivision,
        Topology::Torus => 1,
    };
    let references = (0..residues)
        .map(|base| {
            params
                .topology
                .moves()
                .iter()
                .map(|&mv| {
                    let target = roll_center(base, mv, step, params.topology, l);
                    let v = match mv {
                        Move::Stay => ShiftVector::zero(params.neuron_count()),
                        _ => ShiftVector::between(&codewords[base].values, &codewords[target].values),
                    };
                    (mv, v)
                })
                .collect()
        })
        .collect();
    Ok(ActionBasis {
        step,
        step_radians: step as f64 * 2.0 * PI / l as f64,
        topology: params.topology,
        neurons: params.neurons_per_axis,
        subdivision: params.subdivision,
        references,
    })
}

/// A network together with its connectivity and all stationary bumps.
#[derive(Debug, Clone)]
pub struct Cann {
    pub params: CannParams,
    pub connectivity: Connectivity,
    pub codewords: Vec<BumpPattern>,
}

impl Cann {
    pub fn new(params: CannParams) -> Result<Self> {
        params.validate()?;
        let connectivity = Connectivity::new(&params);
        let codewords = (0..params.attractor_count())
            .map(|c| stationary_bump(&params, c))
            .collect::<Result<_>>()?;
        Ok(Cann {
            params,
            connectivity,
            codewords,
        })
    }

    pub fn step(&self, state: &NetworkState, input: &[f64]) -> Result<NetworkState> {
        step_dynamics(state, input, &self.params, &self.connectivity)
    }

    pub fn relax(&self, input: &[f64]) -> Result<(usize, NetworkState)> {
        relax(input, &self.params, &self.connectivity, &self.codewords)
    }

    pub fn template_match(&self, input: &[f64]) -> usize {
        template_match_direct(input, &self.codewords)
    }

    pub fn fixed_point_residual(&self, center: usize) -> Result<f64> {
        fixed_point_residual(&self.params, &self.connectivity, center)
    }

    pub fn action_basis(&self, step: usize) -> Result<ActionBasis> {
        action_basis(&self.params, &self.codewords, step)
    }
}
