//! Plot-ready CSV files and a summary of every stage that has run.

use std::fmt::Write as _;

use qudit_core::qmodel::{to_hz, DeviceParamsFile};
use qudit_core::ExperimentKind;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::artifacts::*;
use crate::error::CliResult;
use crate::stages::{read_chain, Context};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub characterization: Option<DetFile>,
    pub posterior: Option<BayesFile>,
    pub optimization: Vec<OptimizationSummary>,
    pub tuning: Option<TuningSummary>,
    pub validation: Option<ValidationFile>,
    pub fidelity: Option<FidelityFile>,
    /// Only present with `--reveal-truth`.
    pub truth: Option<TruthComparison>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationSummary {
    pub mode: String,
    pub nodes: usize,
    pub j1: f64,
    pub fidelity: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningSummary {
    pub r_c: f64,
    pub a_c: f64,
    pub population: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthComparison {
    pub params: DeviceParamsFile,
    /// Transmission gain of each carrier at the start of the run.
    pub gains: Vec<f64>,
    /// Deterministic estimate minus truth for (ω01, ω⁺12, ω⁻12), kHz.
    pub det_frequency_error_khz: Option<[f64; 3]>,
    pub det_t1_relative_error: Option<[f64; 2]>,
    pub det_t2_relative_error: Option<[f64; 2]>,
    /// |posterior mean − truth| / posterior std for the three frequencies.
    pub posterior_z: Option<[f64; 3]>,
}

/// Magnitude spectrum of a mean-subtracted, zero-padded uniform series.
pub fn spectrum(values: &[f64], step: f64, padding: usize) -> Vec<(f64, f64)> {
    if values.len() < 2 || !(step > 0.0) {
        return Vec::new();
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let n = (values.len() * padding.max(1)).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = values.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
    buf.resize(n, Complex::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    (0..n / 2)
        .map(|k| (k as f64 / (n as f64 * step), buf[k].norm()))
        .collect()
}

/// Normalized histogram with `bins` equal bins over the sample range.
pub fn histogram(values: &[f64], bins: usize) -> Vec<(f64, f64)> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let norm = values.len() as f64 * width;
    counts
        .iter()
        .enumerate()
        .map(|(b, c)| (lo + (b as f64 + 0.5) * width, *c as f64 / norm))
        .collect()
}

fn relative(a: f64, b: f64) -> f64 {
    a / b - 1.0
}

pub fn report(ctx: &Context) -> CliResult<Report> {
    const STAGE: &str = "report";
    let store = &ctx.store;
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    let mut out = Report::default();

    if store.exists(DATASETS) {
        let (files, hash): (Vec<DatasetFile>, _) = store.read_result(DATASETS)?;
        inputs.push(hash);
        for f in files.iter().filter(|f| f.kind == ExperimentKind::Ramsey) {
            let upper = (f.level + 1).min(2);
            let series: Vec<f64> = f.pops.iter().map(|p| p[upper]).collect();
            let step = f.grid.get(1).zip(f.grid.first()).map_or(0.0, |(b, a)| b - a);
            let mut csv = String::from("frequency_hz,magnitude\n");
            for (freq, mag) in spectrum(&series, step, 8) {
                let _ = writeln!(csv, "{freq:.3},{mag:.6e}");
            }
            outputs.push(store.write_bytes(&format!("spectrum_{}.csv", f.stem()), csv.as_bytes())?);
        }
    }
    if store.exists(CHARACTERIZATION_DET) {
        let (det, hash): (DetFile, _) = store.read_result(CHARACTERIZATION_DET)?;
        inputs.push(hash);
        out.characterization = Some(det);
    }
    if store.exists(CHARACTERIZATION_BAYES) {
        let (bayes, hash): (BayesFile, _) = store.read_result(CHARACTERIZATION_BAYES)?;
        inputs.push(hash);
        let (samples, chain_hash) = read_chain(store)?;
        inputs.push(chain_hash);
        let mut csv = String::from("parameter,value_hz,density\n");
        for (i, name) in bayes.parameters.iter().take(3).enumerate() {
            let col: Vec<f64> = samples.iter().map(|s| to_hz(s[i])).collect();
            for (x, d) in histogram(&col, 40) {
                let _ = writeln!(csv, "{name},{x:.3},{d:.6e}");
            }
        }
        outputs.push(store.write_bytes("posterior_histogram.csv", csv.as_bytes())?);
        out.posterior = Some(bayes);
    }
    let mut trace = String::from("mode,iteration,j1,j2\n");
    for mode in ["det", "parity2", "posterior"] {
        let name = optimization_name(mode);
        if !store.exists(&name) {
            continue;
        }
        let (opt, hash): (OptimizationFile, _) = store.read_result(&name)?;
        inputs.push(hash);
        for t in &opt.trace {
            let _ = writeln!(trace, "{mode},{},{:.6e},{:.6e}", t.iteration, t.j1, t.j2);
        }
        out.optimization.push(OptimizationSummary {
            mode: opt.mode,
            nodes: opt.nodes,
            j1: opt.j1,
            fidelity: opt.fidelity,
            iterations: opt.iterations,
            converged: opt.converged,
        });
    }
    if !out.optimization.is_empty() {
        outputs.push(store.write_bytes("optimization_trace.csv", trace.as_bytes())?);
    }
    if store.exists(TUNING) {
        let (t, hash): (TuningFile, _) = store.read_result(TUNING)?;
        inputs.push(hash);
        out.tuning = Some(TuningSummary {
            r_c: t.r_c,
            a_c: t.a_c,
            population: t.population,
        });
    }
    if store.exists(VALIDATION) {
        let (v, hash): (ValidationFile, _) = store.read_result(VALIDATION)?;
        inputs.push(hash);
        out.validation = Some(v);
    }
    if store.exists(FIDELITY) {
        let (f, hash): (FidelityFile, _) = store.read_json(&store.path(FIDELITY))?;
        inputs.push(hash);
        out.fidelity = Some(f);
    }

    if ctx.reveal_truth {
        let p = &ctx.truth.params;
        let truth = [
            to_hz(p.omega01),
            to_hz(p.omega12_bar + p.epsilon12),
            to_hz(p.omega12_bar - p.epsilon12),
        ];
        let det = out.characterization.as_ref();
        out.truth = Some(TruthComparison {
            params: DeviceParamsFile::from(p),
            gains: ctx.truth.transmission_gain.iter().map(|g| g.gain).collect(),
            det_frequency_error_khz: det
                .map(|d| std::array::from_fn(|i| (d.frequencies_hz[i] - truth[i]) / 1e3)),
            det_t1_relative_error: det.map(|d| std::array::from_fn(|k| relative(d.t1_s[k], p.t1[k]))),
            det_t2_relative_error: det.map(|d| std::array::from_fn(|k| relative(d.t2_s[k], p.t2[k]))),
            posterior_z: out
                .posterior
                .as_ref()
                .map(|b| std::array::from_fn(|i| (b.mean[i] - truth[i]).abs() / b.std[i])),
        });
    }
    store.write_artifact(REPORT, STAGE, ctx.cfg.seed, inputs, outputs, &out)?;
    Ok(out)
}

/// Human-readable summary. Ground truth appears only when it was revealed.
pub fn render(r: &Report) -> String {
    let mut s = String::new();
    if let Some(d) = &r.characterization {
        let _ = writeln!(
            s,
            "characterization: ω01/2π {:.6} GHz, ω12±/2π {:.6} / {:.6} GHz, T1 {:.1} / {:.1} µs, T2 {:.1} / {:.1} µs",
            d.frequencies_hz[0] / 1e9,
            d.frequencies_hz[1] / 1e9,
            d.frequencies_hz[2] / 1e9,
            d.t1_s[0] * 1e6,
            d.t1_s[1] * 1e6,
            d.t2_s[0] * 1e6,
            d.t2_s[1] * 1e6
        );
    }
    if let Some(b) = &r.posterior {
        let _ = writeln!(
            s,
            "posterior: std ω01/2π {:.3} kHz, max r-hat {:.4}",
            b.std[0] / 1e3,
            b.rhat.iter().cloned().fold(0.0, f64::max)
        );
    }
    for o in &r.optimization {
        let _ = writeln!(
            s,
            "optimize {:<9} {:>3} systems: J1 {:.3e} ({} iterations)",
            o.mode, o.nodes, o.j1, o.iterations
        );
    }
    if let Some(t) = &r.tuning {
        let _ = writeln!(s, "tuning: r_c {:.4}, A_c {:.4}", t.r_c, t.a_c);
    }
    if let Some(v) = &r.validation {
        let _ = writeln!(
            s,
            "validation: P2 after one gate {:.4} (wall clock +{} h)",
            v.p2_after_one, v.wall_clock_offset_hours
        );
    }
    if let Some(f) = &r.fidelity {
        let _ = writeln!(
            s,
            "fidelity: gate {:.3}% ± {:.3}, entanglement {:.3}% ± {:.3}",
            100.0 * f.gate,
            100.0 * f.gate_stderr,
            100.0 * f.entanglement,
            100.0 * f.entanglement_stderr
        );
    }
    if let Some(t) = &r.truth {
        if let Some(e) = t.det_frequency_error_khz {
            let _ = writeln!(
                s,
                "truth: frequency errors {:.3} / {:.3} / {:.3} kHz",
                e[0], e[1], e[2]
            );
        }
        if let Some(z) = t.posterior_z {
            let _ = writeln!(s, "truth: posterior |z| {:.2} / {:.2} / {:.2}", z[0], z[1], z[2]);
        }
    }
    s
}
