//! Pulse/delay schedules and their simulation under the Lindblad model.
//!
//! Each pulse is simulated in the frame rotating at its own drive frequency.
//! Oscillator phases are referenced to the start of the shot, so switching
//! from a frame at ω_a to one at ω_b at absolute time t conjugates the state
//! by exp(i (ω_b − ω_a) a†a t). The dissipators commute with that change of
//! frame, so only the coherences pick up phases.

use std::collections::HashMap;

use crate::dynamics::{DensityMatrix, LindbladModel};
use crate::error::{Error, Result};
use crate::linalg::{expm, identity, kron, unitary_exp, CMatrix, CVector, C64};
use crate::pulses::{Pulse, SAMPLES_PER_NS};
use crate::qmodel::{DeviceParams, Parity};

#[derive(Clone, Debug, PartialEq)]
pub enum Step {
    Pulse(Pulse),
    Delay(f64),
    /// Placeholder filled by each value of a delay sweep.
    VariableDelay,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Schedule {
    pub steps: Vec<Step>,
}

impl Schedule {
    pub fn new(steps: Vec<Step>) -> Self {
        Self { steps }
    }

    pub fn push(&mut self, step: Step) -> &mut Self {
        self.steps.push(step);
        self
    }

    pub fn has_variable_delay(&self) -> bool {
        self.steps.iter().any(|s| matches!(s, Step::VariableDelay))
    }

    fn first_frame(&self) -> f64 {
        self.steps
            .iter()
            .find_map(|s| match s {
                Step::Pulse(p) => Some(p.drive_freq),
                _ => None,
            })
            .unwrap_or(0.0)
    }
}

/// Superoperator of one time-dependent pulse under Lindblad dynamics, in the
/// pulse's drive frame.
///
/// The waveform is held constant over each 1/32 ns sample, so the coherent
/// part is a product of exact exponentials. Dissipation is interleaved once
/// per nanosecond with Strang splitting; the diagonal system Hamiltonian
/// commutes with the dissipator, so the splitting error only involves the
/// (MHz-scale) control term.
pub fn pulse_channel(model: &LindbladModel, pulse: &Pulse) -> Result<CMatrix> {
    let samples = pulse.envelope_samples()?;
    let n = model.levels();
    let dt = pulse.duration() / samples.len() as f64;
    let block = SAMPLES_PER_NS;
    let dissipator = model.dissipator();
    let tau = dt * block as f64;
    let d_full = dissipator.propagator(tau);
    let d_half = dissipator.propagator(0.5 * tau);
    let h0 = model.hamiltonian(pulse.drive_freq, C64::new(0.0, 0.0));
    let a = model.lowering();
    let ad = a.adjoint();
    let mut channel = d_half.clone();
    let mut chunks = samples.chunks(block).peekable();
    while let Some(chunk) = chunks.next() {
        let mut u = identity(n);
        for &d in chunk {
            let h = &h0 + a * d + &ad * d.conj();
            u = unitary_exp(&h, dt) * u;
        }
        channel = kron(&u.conjugate(), &u) * channel;
        let tail = if chunks.peek().is_some() {
            &d_full
        } else if chunk.len() == block {
            &d_half
        } else {
            // a partial final block gets a proportionally shorter half step
            let frac = chunk.len() as f64 / block as f64;
            channel = dissipator.propagator(0.5 * tau * frac) * channel;
            continue;
        };
        channel = tail * channel;
    }
    Ok(channel)
}

/// Diagonal phase applied to vec(ρ) when the frame changes by `dw` at `t`.
fn shift_frame(v: &mut CVector, n: usize, dw: f64, t: f64) {
    if dw == 0.0 || t == 0.0 {
        return;
    }
    let theta = dw * t;
    for col in 0..n {
        for row in 0..n {
            let k = row as f64 - col as f64;
            if k != 0.0 {
                v[col * n + row] *= C64::from_polar(1.0, theta * k);
            }
        }
    }
}

fn bits(x: f64) -> u64 {
    x.to_bits()
}

/// Simulates schedules against one [`LindbladModel`], caching propagators.
pub struct ScheduleSimulator<'m> {
    model: &'m LindbladModel,
    constant: HashMap<(u64, u64, u64, u64), CMatrix>,
    shaped: Vec<(Pulse, CMatrix)>,
    delays: HashMap<(u64, u64), CMatrix>,
    powers: HashMap<u64, Vec<CMatrix>>,
    grid_step: Option<f64>,
}

#[derive(Clone, Debug)]
struct Evolving {
    v: CVector,
    frame: f64,
    t: f64,
}

impl<'m> ScheduleSimulator<'m> {
    pub fn new(model: &'m LindbladModel) -> Self {
        Self {
            model,
            constant: HashMap::new(),
            shaped: Vec::new(),
            delays: HashMap::new(),
            powers: HashMap::new(),
            grid_step: None,
        }
    }

    pub fn model(&self) -> &LindbladModel {
        self.model
    }

    fn pulse_propagator(&mut self, pulse: &Pulse) -> Result<&CMatrix> {
        if let Some(c) = pulse.constant_envelope() {
            let key = (
                bits(pulse.drive_freq),
                bits(c.re),
                bits(c.im),
                bits(pulse.duration()),
            );
            if !self.constant.contains_key(&key) {
                let p = self
                    .model
                    .generator(pulse.drive_freq, c)
                    .propagator(pulse.duration());
                self.constant.insert(key, p);
            }
            return Ok(&self.constant[&key]);
        }
        let idx = match self.shaped.iter().position(|(p, _)| p == pulse) {
            Some(i) => i,
            None => {
                let ch = pulse_channel(self.model, pulse)?;
                self.shaped.push((pulse.clone(), ch));
                self.shaped.len() - 1
            }
        };
        Ok(&self.shaped[idx].1)
    }

    fn delay_propagator(&mut self, frame: f64, t: f64) -> CMatrix {
        if let Some(step) = self.grid_step {
            let j = (t / step).round();
            if j >= 0.0 && (t - j * step).abs() <= 1e-9 * step {
                let j = j as usize;
                let model = self.model;
                let list = self.powers.entry(bits(frame)).or_insert_with(|| {
                    let base = model.generator(frame, C64::new(0.0, 0.0)).propagator(step);
                    vec![identity(base.nrows()), base]
                });
                while list.len() <= j {
                    let next = &list[1] * list.last().expect("nonempty");
                    list.push(next);
                }
                return list[j].clone();
            }
        }
        let key = (bits(frame), bits(t));
        self.delays
            .entry(key)
            .or_insert_with(|| {
                expm(&(&self.model.generator(frame, C64::new(0.0, 0.0)).matrix * C64::new(t, 0.0)))
            })
            .clone()
    }

    fn apply(&mut self, state: &mut Evolving, step: &Step, delay: Option<f64>) -> Result<()> {
        let n = self.model.levels();
        match step {
            Step::Pulse(p) => {
                shift_frame(&mut state.v, n, p.drive_freq - state.frame, state.t);
                state.frame = p.drive_freq;
                let prop = self.pulse_propagator(p)?;
                state.v = prop * &state.v;
                state.t += p.duration();
            }
            Step::Delay(d) => self.free(state, *d)?,
            Step::VariableDelay => {
                let d = delay.ok_or_else(|| {
                    Error::Config("schedule has a variable delay but no delay value".into())
                })?;
                self.free(state, d)?;
            }
        }
        Ok(())
    }

    fn free(&mut self, state: &mut Evolving, d: f64) -> Result<()> {
        if d < 0.0 || d.is_nan() {
            return Err(Error::OutOfRange {
                what: "delay",
                value: d,
            });
        }
        if d > 0.0 {
            let prop = self.delay_propagator(state.frame, d);
            state.v = prop * &state.v;
            state.t += d;
        }
        Ok(())
    }

    /// Final state of a schedule without variable delays.
    pub fn run(&mut self, schedule: &Schedule, rho0: &DensityMatrix) -> Result<DensityMatrix> {
        let n = self.model.levels();
        check_dim(rho0, n)?;
        let mut state = Evolving {
            v: rho0.to_vec(),
            frame: schedule.first_frame(),
            t: 0.0,
        };
        for step in &schedule.steps {
            self.apply(&mut state, step, None)?;
        }
        Ok(DensityMatrix::from_vec(&state.v, n))
    }

    /// State after each step, in order.
    pub fn trajectory(
        &mut self,
        schedule: &Schedule,
        rho0: &DensityMatrix,
    ) -> Result<Vec<DensityMatrix>> {
        let n = self.model.levels();
        check_dim(rho0, n)?;
        let mut state = Evolving {
            v: rho0.to_vec(),
            frame: schedule.first_frame(),
            t: 0.0,
        };
        let mut out = Vec::with_capacity(schedule.steps.len());
        for step in &schedule.steps {
            self.apply(&mut state, step, None)?;
            out.push(DensityMatrix::from_vec(&state.v, n));
        }
        Ok(out)
    }

    /// Level populations at the end of the schedule for every delay value.
    ///
    /// Same result as [`Self::sweep`]. When the schedule has one variable
    /// delay, the delays are 0, h, 2h, … and all pulses after the delay share
    /// a frame, the state is stepped along the grid with a sparse free
    /// propagator and only the population rows of the final pulses are formed.
    pub fn sweep_populations(
        &mut self,
        schedule: &Schedule,
        delays: &[f64],
        rho0: &DensityMatrix,
    ) -> Result<Vec<Vec<f64>>> {
        match self.stepped_sweep(schedule, delays, rho0)? {
            Some(p) => Ok(p),
            None => Ok(self
                .sweep(schedule, delays, rho0)?
                .iter()
                .map(crate::dynamics::populations)
                .collect()),
        }
    }

    fn stepped_sweep(
        &mut self,
        schedule: &Schedule,
        delays: &[f64],
        rho0: &DensityMatrix,
    ) -> Result<Option<Vec<Vec<f64>>>> {
        let n = self.model.levels();
        check_dim(rho0, n)?;
        let variable: Vec<usize> = (0..schedule.steps.len())
            .filter(|&i| matches!(schedule.steps[i], Step::VariableDelay))
            .collect();
        if variable.len() != 1 || delays.len() < 2 {
            return Ok(None);
        }
        let split = variable[0];
        let mut suffix = Vec::new();
        for s in &schedule.steps[split + 1..] {
            match s {
                Step::Pulse(p)
                    if suffix
                        .first()
                        .is_none_or(|q: &&Pulse| q.drive_freq == p.drive_freq) =>
                {
                    suffix.push(p)
                }
                _ => return Ok(None),
            }
        }
        let step = delays[1] - delays[0];
        let on_grid = delays[0] == 0.0
            && step > 0.0
            && delays
                .iter()
                .enumerate()
                .all(|(j, &d)| (d - j as f64 * step).abs() <= 1e-9 * step);
        if !on_grid {
            return Ok(None);
        }

        let mut state = Evolving {
            v: rho0.to_vec(),
            frame: schedule.first_frame(),
            t: 0.0,
        };
        for s in &schedule.steps[..split] {
            self.apply(&mut state, s, None)?;
        }
        let dense = self
            .model
            .generator(state.frame, C64::new(0.0, 0.0))
            .propagator(step);
        let sparse: Vec<Vec<(usize, C64)>> = (0..dense.nrows())
            .map(|r| {
                (0..dense.ncols())
                    .filter(|&c| dense[(r, c)] != C64::new(0.0, 0.0))
                    .map(|c| (c, dense[(r, c)]))
                    .collect()
            })
            .collect();

        let nn = n * n;
        let mut readout = CMatrix::zeros(n, nn);
        for k in 0..n {
            readout[(k, k * (n + 1))] = C64::new(1.0, 0.0);
        }
        for p in suffix.iter().rev() {
            readout = &readout * self.pulse_propagator(p)?;
        }
        let dw = suffix.first().map_or(0.0, |p| p.drive_freq - state.frame);

        let mut v = state.v;
        let mut next = v.clone();
        let mut w = v.clone();
        let mut out = Vec::with_capacity(delays.len());
        for j in 0..delays.len() {
            if j > 0 {
                for (slot, row) in next.iter_mut().zip(&sparse) {
                    *slot = row.iter().map(|&(c, x)| x * v[c]).sum();
                }
                std::mem::swap(&mut v, &mut next);
            }
            w.copy_from(&v);
            shift_frame(&mut w, n, dw, state.t + j as f64 * step);
            out.push(
                (0..n)
                    .map(|k| (0..nn).map(|c| (readout[(k, c)] * w[c]).re).sum())
                    .collect(),
            );
        }
        Ok(Some(out))
    }

    /// Final states for every value of the variable delay(s).
    pub fn sweep(
        &mut self,
        schedule: &Schedule,
        delays: &[f64],
        rho0: &DensityMatrix,
    ) -> Result<Vec<DensityMatrix>> {
        let n = self.model.levels();
        check_dim(rho0, n)?;
        if !schedule.has_variable_delay() {
            let out = self.run(schedule, rho0)?;
            return Ok(vec![out; delays.len()]);
        }
        self.grid_step = uniform_step(delays);
        let split = schedule
            .steps
            .iter()
            .position(|s| matches!(s, Step::VariableDelay))
            .expect("checked");
        let mut prefix = Evolving {
            v: rho0.to_vec(),
            frame: schedule.first_frame(),
            t: 0.0,
        };
        for step in &schedule.steps[..split] {
            self.apply(&mut prefix, step, None)?;
        }
        let mut out = Vec::with_capacity(delays.len());
        for &d in delays {
            let mut state = prefix.clone();
            for step in &schedule.steps[split..] {
                self.apply(&mut state, step, Some(d))?;
            }
            out.push(DensityMatrix::from_vec(&state.v, n));
        }
        Ok(out)
    }
}

fn check_dim(rho: &DensityMatrix, n: usize) -> Result<()> {
    if rho.dim() != n {
        return Err(Error::Dimension {
            expected: n,
            found: rho.dim(),
        });
    }
    Ok(())
}

fn uniform_step(delays: &[f64]) -> Option<f64> {
    let positive: Vec<f64> = delays.iter().copied().filter(|&d| d > 0.0).collect();
    let step = positive.iter().copied().fold(f64::INFINITY, f64::min);
    if !step.is_finite() {
        return None;
    }
    let on_grid = positive.iter().all(|&d| {
        let j = (d / step).round();
        (d - j * step).abs() <= 1e-9 * step
    });
    on_grid.then_some(step)
}

fn average(a: Vec<DensityMatrix>, b: Vec<DensityMatrix>) -> Vec<DensityMatrix> {
    a.into_iter()
        .zip(b)
        .map(|(x, y)| {
            DensityMatrix::from_raw((x.into_matrix() + y.into_matrix()) * C64::new(0.5, 0.0))
        })
        .collect()
}

/// ½(ρ⁺ + ρ⁻) with ρ± the final states for ω12 = ω̄12 ± ε12.
pub fn parity_averaged_solve(
    params: &DeviceParams,
    schedule: &Schedule,
    rho0: &DensityMatrix,
) -> Result<DensityMatrix> {
    let mut out = parity_averaged_sweep(params, schedule, &[0.0], rho0)?;
    Ok(out.remove(0))
}

/// Parity-averaged final states over a delay sweep.
pub fn parity_averaged_sweep(
    params: &DeviceParams,
    schedule: &Schedule,
    delays: &[f64],
    rho0: &DensityMatrix,
) -> Result<Vec<DensityMatrix>> {
    let [plus, minus] = parity_sweeps(params, schedule, delays, rho0)?;
    Ok(average(plus, minus))
}

/// Final states for each parity separately, `[plus, minus]`.
pub fn parity_sweeps(
    params: &DeviceParams,
    schedule: &Schedule,
    delays: &[f64],
    rho0: &DensityMatrix,
) -> Result<[Vec<DensityMatrix>; 2]> {
    let run = |parity| -> Result<Vec<DensityMatrix>> {
        let model = LindbladModel::new(params, parity)?;
        ScheduleSimulator::new(&model).sweep(schedule, delays, rho0)
    };
    Ok([run(Parity::Plus)?, run(Parity::Minus)?])
}
