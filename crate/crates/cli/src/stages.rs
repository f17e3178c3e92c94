use std::path::{Path, PathBuf};

use log::info;
use qudit_core::characterize::{
    bayes_characterize, calibrate_pi, collect_datasets, det_characterize, initial_guess,
    CharacterizationSetup, SAMPLE_NAMES,
};
use qudit_core::controlopt::{optimize, parity2_rule, posterior_rule};
use qudit_core::pulses::PulseFile;
use qudit_core::qmodel::{hz, to_hz, DeviceParamsFile};
use qudit_core::validate::{
    swap02_unitary, tune_pulse_auto, validate_process, FitChiConfig, RepetitionData,
};
use qudit_core::vdevice::PiCalibration;
use qudit_core::{
    ControlProblem, ControlVector, DeviceParams, Ensemble, ExperimentData, GroundTruth, Pulse,
    VirtualDevice,
};

use crate::artifacts::*;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult, InStage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum CharMode {
    Det,
    Bayes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum OptMode {
    Det,
    Parity2,
    Posterior,
}

impl OptMode {
    pub fn name(self) -> &'static str {
        match self {
            OptMode::Det => "det",
            OptMode::Parity2 => "parity2",
            OptMode::Posterior => "posterior",
        }
    }

    /// Earlier controls this mode starts from, most refined first.
    fn warm_starts(self) -> &'static [OptMode] {
        match self {
            OptMode::Det => &[],
            OptMode::Parity2 => &[OptMode::Det],
            OptMode::Posterior => &[OptMode::Parity2, OptMode::Det],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Gate {
    Swap02,
}

/// Everything a stage needs: configuration, the hidden device description
/// and the output directory.
pub struct Context {
    pub cfg: RunConfig,
    pub truth: GroundTruth,
    pub store: Store,
    pub reveal_truth: bool,
}

impl Context {
    pub fn new(cfg: RunConfig, reveal_truth: bool) -> CliResult<Self> {
        cfg.validate()?;
        let truth = cfg.ground_truth()?;
        let store = Store::create(&cfg.output_dir)?;
        Ok(Self {
            cfg,
            truth,
            store,
            reveal_truth,
        })
    }

    /// A fresh device whose randomness is private to `stage`.
    fn device(&self, stage: &str) -> CliResult<VirtualDevice> {
        let truth = GroundTruth {
            rng_seed: self.cfg.stage_seed(stage),
            ..self.truth.clone()
        };
        VirtualDevice::new(truth).map_err(|e| CliError::Config(format!("ground truth: {e}")))
    }

    /// A device carrying the stored π pulses and readout classifier.
    fn calibrated_device(&self, stage: &'static str) -> CliResult<(VirtualDevice, FileHash)> {
        let (cal, hash): (CalibrationFile, _) = self.store.read_result(CALIBRATION)?;
        let mut dev = self.device(stage)?;
        for (k, p) in cal.pi_pulses.iter().enumerate() {
            dev.set_pi_calibration(k, PiCalibration::from(p)).in_stage(stage)?;
        }
        dev.set_readout(cal.readout);
        Ok((dev, hash))
    }

    fn datasets(&self) -> CliResult<(Vec<ExperimentData>, FileHash)> {
        let (files, hash): (Vec<DatasetFile>, _) = self.store.read_result(DATASETS)?;
        Ok((files.iter().map(ExperimentData::from).collect(), hash))
    }

    fn setup(&self) -> CliResult<(CharacterizationSetup, FileHash)> {
        let (cal, hash): (CalibrationFile, _) = self.store.read_result(CALIBRATION)?;
        let pi: Vec<PiCalibration> = cal.pi_pulses.iter().map(PiCalibration::from).collect();
        Ok((CharacterizationSetup::new([pi[0].freq, pi[1].freq], pi[0].duration), hash))
    }

    fn det_result(&self) -> CliResult<(qudit_core::characterize::DetCharResult, FileHash)> {
        let (file, hash): (DetFile, _) = self.store.read_result(CHARACTERIZATION_DET)?;
        Ok((file.to_result()?, hash))
    }

    fn read_pulse(&self, path: &Path) -> CliResult<(Pulse, FileHash)> {
        let (file, hash): (PulseFile, _) = self.store.read_json(path)?;
        let pulse = Pulse::try_from(file)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok((pulse, hash))
    }

    fn write_pulse(&self, name: &str, pulse: &Pulse) -> CliResult<FileHash> {
        self.store.write_json(name, &PulseFile::from(pulse))
    }
}

// --- calibrate ----------------------------------------------------------------

pub fn calibrate(ctx: &Context) -> CliResult<CalibrationFile> {
    const STAGE: &str = "calibrate";
    let mut dev = ctx.device(STAGE)?;
    let cfg = ctx.cfg.calibration_config();
    let mut iterations = [0; 2];
    for (k, it) in iterations.iter_mut().enumerate() {
        let res = calibrate_pi(&mut dev, k, &cfg).in_stage(STAGE)?;
        info!(
            "transition {k}: {:.6} GHz after {} rounds",
            to_hz(res.freq) / 1e9,
            res.iterations
        );
        *it = res.iterations;
    }
    let readout = dev
        .readout()
        .cloned()
        .ok_or_else(|| CliError::stage(STAGE, "calibration left no readout classifier"))?;
    let m = readout.confusion.matrix();
    let confusion: Vec<Vec<f64>> = (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect();
    let training = ctx.store.write_bytes(READOUT_TRAINING, readout.training_csv().as_bytes())?;
    let result = CalibrationFile {
        pi_pulses: [
            PiPulseFile::from(&dev.pi_calibration(0).in_stage(STAGE)?),
            PiPulseFile::from(&dev.pi_calibration(1).in_stage(STAGE)?),
        ],
        iterations,
        readout,
        confusion,
    };
    ctx.store.write_artifact(
        CALIBRATION,
        STAGE,
        ctx.cfg.stage_seed(STAGE),
        vec![],
        vec![training],
        &result,
    )?;
    Ok(result)
}

// --- collect ------------------------------------------------------------------

pub fn collect(ctx: &Context) -> CliResult<Vec<DatasetFile>> {
    const STAGE: &str = "collect";
    let (mut dev, cal) = ctx.calibrated_device(STAGE)?;
    let data = collect_datasets(&mut dev, &ctx.cfg.collection_config()).in_stage(STAGE)?;
    let mut outputs = Vec::new();
    let files: Vec<DatasetFile> = data.iter().map(DatasetFile::from).collect();
    for (d, f) in data.iter().zip(&files) {
        outputs.push(ctx.store.write_bytes(&format!("{}.csv", f.stem()), d.to_csv().as_bytes())?);
    }
    info!("collected {} datasets", files.len());
    ctx.store.write_artifact(
        DATASETS,
        STAGE,
        ctx.cfg.stage_seed(STAGE),
        vec![cal],
        outputs,
        &files,
    )?;
    Ok(files)
}

// --- characterize -------------------------------------------------------------

pub fn characterize_det(ctx: &Context, bounds_file: Option<&Path>) -> CliResult<DetFile> {
    const STAGE: &str = "characterize-det";
    let (data, data_hash) = ctx.datasets()?;
    let (setup, cal_hash) = ctx.setup()?;
    let cfg = ctx.cfg.det_config();
    let (mut y0, mut bounds, _) = initial_guess(&data, &setup, &cfg).in_stage(STAGE)?;
    let mut inputs = vec![cal_hash, data_hash];
    if let Some(path) = bounds_file {
        let (file, hash): (BoundsFile, _) = ctx.store.read_json(path)?;
        file.apply(&mut bounds)?;
        for (y, (lo, hi)) in y0.iter_mut().zip(&bounds) {
            *y = y.clamp(*lo, *hi);
        }
        inputs.push(hash);
    }
    let res = det_characterize(&data, &bounds, &y0, &setup, &cfg).in_stage(STAGE)?;
    let file = DetFile::from(&res);
    info!(
        "ω01/2π {:.6} GHz, ω12±/2π {:.6} / {:.6} GHz",
        file.frequencies_hz[0] / 1e9,
        file.frequencies_hz[1] / 1e9,
        file.frequencies_hz[2] / 1e9
    );
    ctx.store.write_artifact(
        CHARACTERIZATION_DET,
        STAGE,
        ctx.cfg.stage_seed(STAGE),
        inputs,
        vec![],
        &file,
    )?;
    Ok(file)
}

pub fn characterize_bayes(ctx: &Context) -> CliResult<BayesFile> {
    const STAGE: &str = "characterize-bayes";
    let (data, data_hash) = ctx.datasets()?;
    let (setup, cal_hash) = ctx.setup()?;
    let (det, det_hash) = ctx.det_result()?;
    let cfg = ctx.cfg.bayes_config();
    let res = bayes_characterize(&data, setup, &det, &cfg).in_stage(STAGE)?;
    let is_freq = |i: usize| i < 3;
    let unit = |i: usize, v: f64| if is_freq(i) { to_hz(v) } else { v };

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["chain".to_string(), "draw".to_string()];
    header.extend(
        SAMPLE_NAMES
            .iter()
            .enumerate()
            .map(|(i, n)| if is_freq(i) { format!("{n}_hz") } else { n.to_string() }),
    );
    w.write_record(&header).in_stage(STAGE)?;
    for (c, chain) in res.chain.chains.iter().enumerate() {
        for (d, s) in chain.iter().enumerate() {
            let mut row = vec![c.to_string(), d.to_string()];
            row.extend(s.iter().enumerate().map(|(i, v)| format!("{:.6}", unit(i, *v))));
            w.write_record(&row).in_stage(STAGE)?;
        }
    }
    let chain_csv = w.into_inner().map_err(|e| CliError::stage(STAGE, e))?;
    let chain_hash = ctx.store.write_bytes(POSTERIOR_CHAIN, &chain_csv)?;

    let (mean, std) = (res.mean(), res.std());
    let file = BayesFile {
        parameters: SAMPLE_NAMES.iter().map(|s| s.to_string()).collect(),
        mean: mean.iter().enumerate().map(|(i, v)| unit(i, *v)).collect(),
        std: std.iter().enumerate().map(|(i, v)| unit(i, *v)).collect(),
        rhat: res.chain.rhat.clone(),
        acceptance_rate: res.chain.acceptance_rate,
        prior_mean_hz: res.prior_mean.map(to_hz),
        prior_width_hz: to_hz(cfg.prior_sd),
        n_chains: res.chain.chains.len(),
        samples_per_chain: res.chain.chains.first().map_or(0, Vec::len),
    };
    info!(
        "posterior ω01/2π {:.6} GHz ± {:.3} kHz, max r-hat {:.4}",
        file.mean[0] / 1e9,
        file.std[0] / 1e3,
        file.rhat.iter().cloned().fold(0.0, f64::max)
    );
    ctx.store.write_artifact(
        CHARACTERIZATION_BAYES,
        STAGE,
        cfg.seed,
        vec![cal_hash, data_hash, det_hash],
        vec![chain_hash],
        &file,
    )?;
    Ok(file)
}

/// Frequency columns (ω01, ω⁺12, ω⁻12) of the stored posterior chain, rad/s.
pub fn read_chain(store: &Store) -> CliResult<(Vec<[f64; 3]>, FileHash)> {
    let (bytes, hash) = store.read_bytes(&store.path(POSTERIOR_CHAIN))?;
    let bad = |e: &dyn std::fmt::Display| CliError::Config(format!("{POSTERIOR_CHAIN}: {e}"));
    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| bad(&e))?;
        let mut f = [0.0; 3];
        for (i, v) in f.iter_mut().enumerate() {
            let text = rec.get(2 + i).ok_or_else(|| bad(&"short row"))?;
            *v = hz(text.parse::<f64>().map_err(|e| bad(&e))?);
        }
        rows.push(f);
    }
    Ok((rows, hash))
}

// --- optimize -----------------------------------------------------------------

/// Model used for control synthesis: the deterministic estimates, with the
/// unmeasured guard transition extrapolated along the transmon ladder.
pub fn synthesis_params(det: &qudit_core::characterize::DetCharResult) -> DeviceParams {
    let mut p = det.device_params(&DeviceParams::reference());
    p.omega23 = 2.0 * p.omega12_bar - p.omega01;
    p
}

pub fn optimize_stage(
    ctx: &Context,
    gate: Gate,
    mode: OptMode,
    nodes: Option<(usize, usize)>,
) -> CliResult<OptimizationFile> {
    const STAGE: &str = "optimize";
    let Gate::Swap02 = gate;
    let (det, det_hash) = ctx.det_result()?;
    let params = synthesis_params(&det);
    let o = &ctx.cfg.optimization;
    let problem =
        ControlProblem::swap02(&params, o.duration_ns / 1e9, o.n_steps).in_stage(STAGE)?;
    let mut inputs = vec![det_hash];
    let ensemble = match mode {
        OptMode::Det => Ensemble::single(params.clone()),
        OptMode::Parity2 => Ensemble::from_rule(&params, &parity2_rule(&params)).in_stage(STAGE)?,
        OptMode::Posterior => {
            let (samples, hash) = read_chain(&ctx.store)?;
            inputs.push(hash);
            let w01: Vec<f64> = samples.iter().map(|s| s[0]).collect();
            let w12: Vec<f64> = samples.iter().flat_map(|s| [s[1], s[2]]).collect();
            let (n01, n12) = nodes.unwrap_or(o.nodes);
            let rule = posterior_rule(&w01, &w12, n01, n12).in_stage(STAGE)?;
            Ensemble::from_rule(&params, &rule).in_stage(STAGE)?
        }
    };
    let mut warm: Option<(String, ControlVector)> = None;
    for prev in mode.warm_starts() {
        let name = pulse_name(prev.name());
        if ctx.store.exists(&name) {
            let (pulse, hash) = ctx.read_pulse(&ctx.store.path(&name))?;
            inputs.push(hash);
            warm = Some((name, pulse.control));
            break;
        }
    }
    let max_iter = if mode == OptMode::Posterior && warm.is_some() {
        o.posterior_max_iter
    } else {
        o.max_iter
    };
    let mut cfg = ctx.cfg.optimize_config(max_iter);
    cfg.seed = ctx.cfg.stage_seed(&format!("optimize-{}", mode.name()));
    info!(
        "optimizing SWAP02 ({}, {} systems, {} iterations at most)",
        mode.name(),
        ensemble.systems.len(),
        max_iter
    );
    let report =
        optimize(&problem, &ensemble, warm.as_ref().map(|w| &w.1), &cfg).in_stage(STAGE)?;
    let pulse = problem.pulse(&report.control).in_stage(STAGE)?;
    let pulse_hash = ctx.write_pulse(&pulse_name(mode.name()), &pulse)?;
    let file = OptimizationFile {
        gate: "swap02".into(),
        mode: mode.name().into(),
        nodes: ensemble.systems.len(),
        duration_ns: o.duration_ns,
        n_steps: o.n_steps,
        warm_start: warm.map(|w| w.0),
        j1: report.j1,
        j2: report.j2,
        fidelity: report.fidelity,
        iterations: report.iterations,
        evaluations: report.evaluations,
        converged: report.converged,
        flagged: report.flagged,
        message: report.message.clone(),
        trace: report
            .trace
            .iter()
            .map(|t| TraceRow {
                iteration: t.iteration,
                j1: t.j1,
                j2: t.j2,
            })
            .collect(),
        model: DeviceParamsFile::from(&params),
    };
    info!("J1 {:.3e} after {} iterations", file.j1, file.iterations);
    ctx.store.write_artifact(
        &optimization_name(mode.name()),
        STAGE,
        cfg.seed,
        inputs,
        vec![pulse_hash],
        &file,
    )?;
    Ok(file)
}

// --- tune ---------------------------------------------------------------------

/// Most refined optimized pulse available.
fn default_pulse(store: &Store) -> CliResult<PathBuf> {
    [OptMode::Posterior, OptMode::Parity2, OptMode::Det]
        .iter()
        .map(|m| store.path(&pulse_name(m.name())))
        .find(|p| p.is_file())
        .ok_or_else(|| CliError::Config("no optimized pulse found; run `optimize` first".into()))
}

pub fn tune(ctx: &Context, pulse_path: Option<&Path>) -> CliResult<TuningFile> {
    const STAGE: &str = "tune";
    let path = match pulse_path {
        Some(p) => p.to_path_buf(),
        None => default_pulse(&ctx.store)?,
    };
    let (pulse, pulse_hash) = ctx.read_pulse(&path)?;
    let (mut dev, cal) = ctx.calibrated_device(STAGE)?;
    let cfg = ctx.cfg.tune_config();
    let res = tune_pulse_auto(&mut dev, &pulse, &cfg).in_stage(STAGE)?;
    info!(
        "r_c {:.4}, A_c {:.4}, P2 after {} gates {:.4}",
        res.r_c, res.a_c, cfg.tune.n_reps, res.population
    );
    let tuned = ctx.write_pulse(PULSE_TUNED, &res.pulse)?;
    let file = TuningFile {
        source_pulse: pulse_hash.path.clone(),
        r_c: res.r_c,
        a_c: res.a_c,
        population: res.population,
        reps: cfg.tune.n_reps,
        per_r: res.per_r,
    };
    ctx.store.write_artifact(
        TUNING,
        STAGE,
        ctx.cfg.stage_seed(STAGE),
        vec![cal, pulse_hash],
        vec![tuned],
        &file,
    )?;
    Ok(file)
}

// --- validate -----------------------------------------------------------------

pub struct ValidateArgs<'a> {
    pub pulse: Option<&'a Path>,
    pub reps: Option<usize>,
    pub tomography: bool,
    pub wall_clock_offset_hours: Option<f64>,
}

pub fn validate(ctx: &Context, args: &ValidateArgs) -> CliResult<ValidationFile> {
    const STAGE: &str = "validate";
    let path = match args.pulse {
        Some(p) => p.to_path_buf(),
        None if ctx.store.exists(PULSE_TUNED) => ctx.store.path(PULSE_TUNED),
        None => default_pulse(&ctx.store)?,
    };
    let (pulse, pulse_hash) = ctx.read_pulse(&path)?;
    let (mut dev, cal) = ctx.calibrated_device(STAGE)?;
    let offset = args
        .wall_clock_offset_hours
        .unwrap_or(ctx.cfg.validation.wall_clock_offset_hours);
    dev.set_wall_clock_hours(offset);
    let v = &ctx.cfg.validation;
    let reps = args.reps.unwrap_or(v.reps);
    let data = match v.n_shots {
        Some(shots) => RepetitionData::measure(&mut dev, &pulse, reps, shots),
        None => RepetitionData::exact(&dev, &pulse, reps),
    }
    .in_stage(STAGE)?;

    let mut csv = String::from("initial_state,repetitions,p0,p1,p2\n");
    for (k, series) in data.pops.iter().enumerate() {
        for (n, p) in series.iter().enumerate() {
            csv.push_str(&format!("{k},{},{:.6},{:.6},{:.6}\n", n + 1, p[0], p[1], p[2]));
        }
    }
    let mut outputs = vec![ctx.store.write_bytes(GATE_REPETITION, csv.as_bytes())?];
    if args.tomography {
        let seed = ctx.cfg.stage_seed("validate-fidelity");
        let report = validate_process(
            &data,
            &swap02_unitary(),
            v.fidelity_samples,
            &FitChiConfig::default(),
            seed,
        )
        .in_stage(STAGE)?;
        outputs.push(ctx.store.write_json(
            CHI,
            &ChiFile {
                basis_size: report.chi_re.len(),
                re: report.chi_re.clone(),
                im: report.chi_im.clone(),
            },
        )?);
        let f = &report.fidelity;
        outputs.push(ctx.store.write_json(
            FIDELITY,
            &FidelityFile {
                gate: f.gate,
                gate_stderr: f.gate_stderr,
                entanglement: f.entanglement,
                entanglement_stderr: f.entanglement_stderr,
                n_samples: f.n_samples,
                fit_sse: report.fit.sse,
                completion_residual: report.fit.completion_residual,
                penalty_stages: report.fit.stages,
                converged: report.fit.converged,
            },
        )?);
        info!(
            "gate fidelity {:.3}%, entanglement fidelity {:.3}%",
            100.0 * f.gate,
            100.0 * f.entanglement
        );
    }
    let file = ValidationFile {
        pulse: pulse_hash.path.clone(),
        reps,
        n_shots: v.n_shots,
        wall_clock_offset_hours: offset,
        p2_after_one: data.pops[0][0][2],
        p0_after_one_from_2: data.pops[2][0][0],
        tomography: args.tomography,
    };
    info!("P2 after one gate {:.4}", file.p2_after_one);
    ctx.store.write_artifact(
        VALIDATION,
        STAGE,
        ctx.cfg.stage_seed(STAGE),
        vec![cal, pulse_hash],
        outputs,
        &file,
    )?;
    Ok(file)
}
