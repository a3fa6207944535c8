//! The four pipeline stages behind the command-line subcommands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::json;
use weightflow_core::autoencoder::{Activation, ArchSpec, Network, TrainConfig, Trainer, BOTTLENECK_LAYERS};
use weightflow_core::callan_symanzik::{
    beta_from_drift, characteristic_solution, cs_residual, mass_audit, stationary_residual, terminal_detect,
    TerminalCondition,
};
use weightflow_core::comparison::{compare_outputs, CompareConfig, ComparisonResult};
use weightflow_core::dataset::{filter_digits, Dataset, DIGITS_0_TO_5};
use weightflow_core::drift::{diffusion_coefficients, drift_from_rows, epoch_drift, gate, AdamHyper, RowUpdateSample};
use weightflow_core::fokker_planck::{evolve_epoch, DriftField, SolverConfig};
use weightflow_core::grid::{default_floor, potential_from_density, score_field, Bandwidth, Bounds};
use weightflow_core::{Density, Grid2D, PointCloud};

use crate::error::{Error, Result};
use crate::formats::{
    density_from_csv, density_to_csv, from_jsonl, matrix_from_bytes, matrix_to_bytes, to_jsonl, RowUpdateRecord,
    SolverLogRecord,
};
use crate::heatmap;
use crate::run::{self, ArchRecord, Manifest, RunDir, TrainRecord};

/// Standard deviation of the initial weight-row density per axis.
const INITIAL_STD: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub mnist_dir: PathBuf,
    pub run: PathBuf,
    pub seed: u64,
    pub epochs: u32,
    pub batch_size: usize,
    pub adam: AdamHyper,
    pub activation: Activation,
    /// Use only the first `n` filtered training images.
    pub train_samples: Option<usize>,
    /// Images whose encoder outputs are stored for the comparison stage.
    pub compare_samples: usize,
}

impl TrainOptions {
    pub fn new(mnist_dir: impl Into<PathBuf>, run: impl Into<PathBuf>) -> Self {
        Self {
            mnist_dir: mnist_dir.into(),
            run: run.into(),
            seed: 0,
            epochs: 5,
            batch_size: 64,
            adam: AdamHyper::default(),
            activation: Activation::Relu,
            train_samples: None,
            compare_samples: 1000,
        }
    }
}

fn arch_record(a: &ArchSpec) -> ArchRecord {
    ArchRecord {
        input_dim: a.input_dim,
        encoder_hidden: a.encoder_hidden.clone(),
        decoder_hidden: a.decoder_hidden.clone(),
        activation: a.activation.name().into(),
        output_activation: a.output_activation.name().into(),
        bottleneck_bias: a.bottleneck_bias,
    }
}

fn write_snapshot(run: &mut RunDir, t: &Trainer, loss: f64) -> Result<()> {
    for id in BOTTLENECK_LAYERS {
        let s = t.snapshot(id, loss)?;
        run.write(run::TRAIN, &run::snapshot_path(s.epoch, id), &matrix_to_bytes(s.rows, s.cols, &s.matrix))?;
        run.write(run::TRAIN, &run::adam_path(s.epoch, id, "m"), &matrix_to_bytes(s.rows, s.cols, &s.adam_m))?;
        run.write(run::TRAIN, &run::adam_path(s.epoch, id, "v"), &matrix_to_bytes(s.rows, s.cols, &s.adam_v))?;
    }
    Ok(())
}

fn write_encoder_outputs(run: &mut RunDir, net: &Network, epoch: u32, subset: &[f64], n: usize) -> Result<()> {
    let h = net.encode(subset, n)?;
    let dim = net.arch.encoder_dim();
    run.write(run::TRAIN, &run::encoder_path(epoch), &matrix_to_bytes(n, dim, &h))
}

/// Trains the autoencoder and records snapshots, row updates and encoder
/// outputs for every epoch.
pub fn train(opts: &TrainOptions) -> Result<RunDir> {
    let arch = ArchSpec { activation: opts.activation, ..ArchSpec::default() };
    let cfg = TrainConfig { seed: opts.seed, batch_size: opts.batch_size, epochs: opts.epochs, adam: opts.adam };
    cfg.validate()?;
    if opts.compare_samples == 0 {
        return Err(Error::config("compare-samples must be at least 1"));
    }

    let (raw, sums) = crate::mnist::load_train(&opts.mnist_dir)?;
    let mut data = filter_digits(&raw, &DIGITS_0_TO_5)?;
    if let Some(n) = opts.train_samples {
        if n == 0 {
            return Err(Error::config("train-samples must be at least 1"));
        }
        data = data.take(n);
    }
    log::info!("training on {} images of digits 0-5", data.len());
    let subset = data.take(opts.compare_samples);
    let subset_x = subset.to_matrix();

    let arch_rec = arch_record(&arch);
    let train_rec = TrainRecord {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        eta: cfg.adam.eta,
        beta1: cfg.adam.beta1,
        beta2: cfg.adam.beta2,
        eps: cfg.adam.eps,
        digits: DIGITS_0_TO_5.to_vec(),
        train_samples: data.len(),
        compare_samples: subset.len(),
    };
    let mut trainer = Trainer::new(arch, cfg.clone())?;
    let initial_loss = trainer.network.dataset_loss(&data)?;
    log::info!("initial loss {initial_loss:.6}");
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        config_digest: Manifest::digest_config(&arch_rec, &train_rec, cfg.seed),
        arch: arch_rec,
        train: train_rec,
        data: sums,
        initial_loss,
        loss_curve: Vec::new(),
        stages: BTreeMap::new(),
        artifacts: BTreeMap::new(),
    };
    let mut run = RunDir::create(&opts.run, manifest)?;
    run.reset_stage(run::TRAIN);

    write_snapshot(&mut run, &trainer, initial_loss)?;
    write_encoder_outputs(&mut run, &trainer.network, 0, &subset_x, subset.len())?;
    let mut records = Vec::new();
    for _ in 0..cfg.epochs {
        let r = trainer.train_epoch(&data)?;
        log::info!("epoch {}: loss {:.6}", r.epoch, r.loss);
        run.manifest.loss_curve.push(r.loss);
        for (k, rows) in r.row_updates.iter().enumerate() {
            for (row, s) in rows.iter().enumerate() {
                records.push(RowUpdateRecord {
                    epoch: r.epoch,
                    layer: BOTTLENECK_LAYERS[k],
                    row,
                    pos: s.position,
                    update: s.update,
                });
            }
        }
        write_snapshot(&mut run, &trainer, r.loss)?;
        write_encoder_outputs(&mut run, &trainer.network, r.epoch, &subset_x, subset.len())?;
    }
    run.write(run::TRAIN, run::ROW_UPDATES, to_jsonl(&records).as_bytes())?;
    run.save()?;
    Ok(run)
}

/// Rows of a stored bottleneck snapshot as points.
pub fn load_rows(run: &RunDir, epoch: u32, layer: u32) -> Result<Vec<[f64; 2]>> {
    let rel = run::snapshot_path(epoch, layer);
    let (_, cols, data) = matrix_from_bytes(&run.path(&rel), &run.read(&rel)?)?;
    if cols != 2 {
        return Err(Error::parse(run.path(&rel), "bottleneck snapshot must have two columns"));
    }
    Ok(data.chunks_exact(2).map(|r| [r[0], r[1]]).collect())
}

fn load_updates(run: &RunDir) -> Result<Vec<RowUpdateRecord>> {
    from_jsonl(&run.path(run::ROW_UPDATES), &run.read_text(run::ROW_UPDATES)?)
}

fn epoch_samples(records: &[RowUpdateRecord], epoch: u32, layer: u32) -> Vec<RowUpdateSample> {
    records.iter().filter(|r| r.epoch == epoch && r.layer == layer).map(RowUpdateRecord::sample).collect()
}

/// Loss before and after epoch `e` (1-based).
fn losses_around(m: &Manifest, e: u32) -> (f64, f64) {
    let i = e as usize - 1;
    let prev = if i == 0 { m.initial_loss } else { m.loss_curve[i - 1] };
    (prev, m.loss_curve[i])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolveOptions {
    pub run: PathBuf,
    pub grid: usize,
    pub substeps: u32,
    /// Multiplies `eps^2 eta^2` to give the diffusion coefficient.
    pub sigma_scale: f64,
    /// Multiplies Scott's rule for the drift regression kernel.
    pub bandwidth: f64,
    pub cfl_safety: f64,
}

impl EvolveOptions {
    pub fn new(run: impl Into<PathBuf>) -> Self {
        Self { run: run.into(), grid: 64, substeps: 100, sigma_scale: 1.0, bandwidth: 1.0, cfl_safety: 0.9 }
    }
}

/// Grid covering every stored row of `layer` and three standard deviations
/// of the initial density, padded by 10%.
fn layer_grid(run: &RunDir, layer: u32, epochs: u32, n: usize) -> Result<Grid2D> {
    let mut b = Bounds::default();
    let r = 3.0 * INITIAL_STD;
    b.include_all(&[[-r, -r], [r, r]]);
    for e in 0..=epochs {
        b.include_all(&load_rows(run, e, layer)?);
    }
    Ok(b.to_grid(weightflow_core::grid::DEFAULT_PAD_FRACTION, n, n)?)
}

/// Regression bandwidth for the drift: Scott's rule on the row positions
/// times `factor`, never narrower than one cell.
fn drift_bandwidth(samples: &[RowUpdateSample], grid: &Grid2D, factor: f64) -> [f64; 2] {
    let floor = grid.dx().max(grid.dy());
    let scott = PointCloud::new(samples.iter().map(|s| s.position).collect())
        .and_then(|c| Bandwidth::ScaledScott(factor).resolve(&c));
    match scott {
        Ok(h) => [h[0].max(floor), h[1].max(floor)],
        Err(_) => [2.0 * floor; 2],
    }
}

fn drift_sigma2(m: &Manifest, grid: &Grid2D, scale: f64) -> Result<Vec<[f64; 2]>> {
    Ok(diffusion_coefficients(grid, m.train.eta, m.train.eps, scale)?)
}

/// Evolves the weight-row density of both bottleneck layers from the
/// Gaussian initial condition through every trained epoch.
pub fn evolve(opts: &EvolveOptions) -> Result<RunDir> {
    if !(opts.sigma_scale >= 0.0 && opts.bandwidth > 0.0) {
        return Err(Error::config("sigma-scale must be non-negative and bandwidth positive"));
    }
    let cfg = SolverConfig::new(opts.substeps, opts.cfl_safety)?;
    let mut run = RunDir::open(&opts.run)?;
    run.reset_stage(run::EVOLVE);
    let epochs = run.manifest.train.epochs;
    let records = load_updates(&run)?;
    let mut log_records = Vec::new();
    for layer in BOTTLENECK_LAYERS {
        let grid = layer_grid(&run, layer, epochs, opts.grid)?;
        let sigma2 = drift_sigma2(&run.manifest, &grid, opts.sigma_scale)?;
        let mut p = Density::gaussian(grid, [0.0, 0.0], [INITIAL_STD * INITIAL_STD; 2])?;
        run.write(run::EVOLVE, &run::density_path(0, layer), density_to_csv(&p).as_bytes())?;
        for e in 1..=epochs {
            let samples = epoch_samples(&records, e, layer);
            let (prev, cur) = losses_around(&run.manifest, e);
            let g = gate(prev, cur);
            let bw = drift_bandwidth(&samples, &grid, opts.bandwidth);
            let provider = epoch_drift(&samples, &g, &grid, bw, sigma2.clone(), f64::from(e - 1))?;
            let (next, reports) = evolve_epoch(&p, &provider, &cfg)
                .map_err(|err| err.context(format!("layer {layer}, epoch {e}")))?;
            for (k, r) in reports.iter().enumerate() {
                log_records.push(SolverLogRecord {
                    epoch: e,
                    layer,
                    step: k as u32,
                    time: r.time,
                    mass_error: r.mass_error,
                    max_density: r.max_density,
                    advective_cfl: r.stability.advective_cfl,
                    diffusive_cfl: r.stability.diffusive_cfl,
                    renormalized: r.renormalized,
                });
            }
            log::info!("layer {layer} epoch {e}: gate {} mass {:.9}", if g.open { "open" } else { "closed" }, next.mass());
            p = next;
            run.write(run::EVOLVE, &run::density_path(e, layer), density_to_csv(&p).as_bytes())?;
        }
    }
    run.write(run::EVOLVE, run::SOLVER_LOG, to_jsonl(&log_records).as_bytes())?;
    run.manifest.stages.insert(run::EVOLVE.into(), serde_json::to_value(Stage::from(opts)).expect("serializable"));
    run.save()?;
    Ok(run)
}

/// Evolve parameters as recorded in the manifest (the run path is left out
/// so that identical runs in different places agree).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Stage {
    grid: usize,
    substeps: u32,
    sigma_scale: f64,
    bandwidth: f64,
    cfl_safety: f64,
}

impl From<&EvolveOptions> for Stage {
    fn from(o: &EvolveOptions) -> Self {
        Self {
            grid: o.grid,
            substeps: o.substeps,
            sigma_scale: o.sigma_scale,
            bandwidth: o.bandwidth,
            cfl_safety: o.cfl_safety,
        }
    }
}

fn evolve_stage(run: &RunDir) -> Result<Stage> {
    let v = run
        .manifest
        .stages
        .get(run::EVOLVE)
        .ok_or_else(|| Error::NotFound(run.path(&run::density_path(0, 1))))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::parse(run.path(run::MANIFEST), e.to_string()))
}

pub fn load_density(run: &RunDir, epoch: u32, layer: u32) -> Result<Density> {
    let rel = run::density_path(epoch, layer);
    density_from_csv(&run.path(&rel), &run.read_text(&rel)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareOptions {
    pub run: PathBuf,
    /// Epochs to compare; all stored epochs when absent.
    pub epochs: Option<Vec<u32>>,
    pub ensemble: usize,
    /// Sampling seed; the training seed when absent.
    pub seed: Option<u64>,
    /// Multiplies Scott's rule for the output KDEs.
    pub bandwidth: f64,
    pub grid: usize,
}

impl CompareOptions {
    pub fn new(run: impl Into<PathBuf>) -> Self {
        Self { run: run.into(), epochs: None, ensemble: 16, seed: None, bandwidth: 1.0, grid: 64 }
    }
}

/// Scores the theoretical against the empirical bottleneck outputs.
pub fn compare(opts: &CompareOptions) -> Result<(RunDir, Vec<ComparisonResult>)> {
    if !(opts.bandwidth > 0.0) {
        return Err(Error::config("bandwidth must be positive"));
    }
    let mut run = RunDir::open(&opts.run)?;
    let last = run.manifest.train.epochs;
    let epochs = opts.epochs.clone().unwrap_or_else(|| (0..=last).collect());
    if let Some(e) = epochs.iter().find(|e| **e > last) {
        return Err(Error::config(format!("epoch {e} is beyond the {last} trained epochs")));
    }
    run.reset_stage(run::COMPARE);
    let seed = opts.seed.unwrap_or(run.manifest.seed);
    let cfg = CompareConfig {
        ensemble: opts.ensemble,
        seed,
        resolution: opts.grid,
        pad_fraction: weightflow_core::grid::DEFAULT_PAD_FRACTION,
        bandwidth: Bandwidth::ScaledScott(opts.bandwidth),
    };
    let mut csv = String::from("epoch,layer,mse,pearson,ensemble,seed\n");
    let mut results = Vec::new();
    for &e in &epochs {
        let rel = run::encoder_path(e);
        let (_, _, h) = matrix_from_bytes(&run.path(&rel), &run.read(&rel)?)?;
        let w1 = load_rows(&run, e, 1)?;
        let w2 = load_rows(&run, e, 2)?;
        if w2.len() != 2 {
            return Err(Error::parse(run.path(&run::snapshot_path(e, 2)), "second bottleneck must be 2x2"));
        }
        let p1 = load_density(&run, e, 1)?;
        let p2 = load_density(&run, e, 2)?;
        let out = compare_outputs(e, &h, &w1, &[w2[0], w2[1]], &p1, &p2, &cfg)
            .map_err(|err| err.context(format!("epoch {e}")))?;
        for (lc, p) in out.iter().zip([&p1, &p2]) {
            let r = &lc.result;
            writeln!(csv, "{},{},{:e},{:e},{},{}", r.epoch, r.layer, r.mse, r.pearson, r.ensemble, r.seed).unwrap();
            let dir = run::epoch_dir(e);
            let g = r.grid;
            run.write(
                run::COMPARE,
                &format!("{dir}/compare_layer_{}_empirical.csv", r.layer),
                density_to_csv(&lc.empirical).as_bytes(),
            )?;
            run.write(
                run::COMPARE,
                &format!("{dir}/compare_layer_{}_theory.csv", r.layer),
                density_to_csv(&lc.theoretical).as_bytes(),
            )?;
            run.write(
                run::COMPARE,
                &format!("{dir}/compare_layer_{}.ppm", r.layer),
                &heatmap::render_pair(&g, lc.empirical.values(), lc.theoretical.values()),
            )?;
            let v = potential_from_density(p, default_floor(p.grid()))?;
            run.write(
                run::COMPARE,
                &format!("{dir}/score_layer_{}.ppm", r.layer),
                &heatmap::render_with_arrows(p.grid(), p.values(), &score_field(&v), 4),
            )?;
            results.push(r.clone());
        }
    }
    run.write(run::COMPARE, run::COMPARISON_CSV, csv.as_bytes())?;
    run.manifest.stages.insert(
        run::COMPARE.into(),
        json!({ "epochs": epochs, "ensemble": opts.ensemble, "seed": seed, "bandwidth": opts.bandwidth, "grid": opts.grid }),
    );
    run.save()?;
    Ok((run, results))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalOptions {
    pub run: PathBuf,
    pub threshold: f64,
    /// Start points of the characteristic curves; the first rows of the
    /// final snapshot when absent.
    pub curve_seeds: Option<Vec<[f64; 2]>>,
    pub arc_steps: usize,
}

impl TerminalOptions {
    pub fn new(run: impl Into<PathBuf>) -> Self {
        Self { run: run.into(), threshold: 1e-3, curve_seeds: None, arc_steps: 400 }
    }
}

const DEFAULT_CURVES: usize = 8;

fn condition_name(c: TerminalCondition) -> &'static str {
    match c {
        TerminalCondition::Stationary => "stationary",
        TerminalCondition::ScaleInvariant => "scale_invariant",
    }
}

/// Start-of-epoch drift of epoch `e + 1`, i.e. the field acting at time `e`.
fn drift_at(run: &RunDir, records: &[RowUpdateRecord], stage: &Stage, grid: &Grid2D, layer: u32, e: u32) -> Result<DriftField> {
    let samples = epoch_samples(records, e + 1, layer);
    let (prev, cur) = losses_around(&run.manifest, e + 1);
    let bw = drift_bandwidth(&samples, grid, stage.bandwidth);
    Ok(drift_from_rows(&samples, &gate(prev, cur), grid, bw)?)
}

/// Terminal-time detection, mass audit, scale-flow residuals and
/// characteristic curves over the evolved densities.
pub fn terminal(opts: &TerminalOptions) -> Result<(RunDir, serde_json::Value)> {
    let mut run = RunDir::open(&opts.run)?;
    let stage = evolve_stage(&run)?;
    let epochs = run.manifest.train.epochs;
    if epochs < 2 {
        return Err(Error::config(format!("terminal analysis needs at least 3 densities, the run has {}", epochs + 1)));
    }
    run.reset_stage(run::TERMINAL);
    let records = load_updates(&run)?;
    let mut layers = Vec::new();
    let mut curves_csv = String::from("curve_id,s,x1,x2,P\n");
    let mut curve_id = 0usize;
    for layer in BOTTLENECK_LAYERS {
        let history = (0..=epochs).map(|e| load_density(&run, e, layer)).collect::<Result<Vec<_>>>()?;
        let grid = *history[0].grid();
        let report = terminal_detect(&history, opts.threshold)?;
        let audit = mass_audit(&history);

        let mut cs = Vec::new();
        for e in 1..epochs {
            let d = drift_at(&run, &records, &stage, &grid, layer, e)?;
            let t = f64::from(e);
            let beta = beta_from_drift(&d, t)?;
            let r = cs_residual(&history[e as usize], &history[e as usize + 1], &beta, t)?;
            cs.push(json!({ "epoch": e, "l1": r.l1, "max": r.max }));
        }

        let stationary = match report.terminal {
            Some(k) if k >= 1 && (k as u32) < epochs => {
                let t = f64::from(k as u32);
                let beta = beta_from_drift(&drift_at(&run, &records, &stage, &grid, layer, k as u32)?, t)?;
                let r = stationary_residual(&history[k], &beta)?;
                json!({ "epoch": k, "l1": r.l1, "max": r.max })
            }
            _ => serde_json::Value::Null,
        };

        // Characteristics of the most recent flow field.
        let last = epochs - 1;
        let beta = beta_from_drift(&drift_at(&run, &records, &stage, &grid, layer, last)?, f64::from(epochs))?;
        let final_density = &history[epochs as usize];
        let seeds: Vec<[f64; 2]> = match &opts.curve_seeds {
            Some(s) => s.clone(),
            None => load_rows(&run, epochs, layer)?.into_iter().take(DEFAULT_CURVES).collect(),
        };
        let mut curve_summaries = Vec::new();
        for seed in seeds {
            let p0 = grid.interpolate(final_density.values(), seed);
            let entry = match characteristic_solution(&beta, &[seed], &[p0], opts.arc_steps) {
                Ok(mut c) => {
                    let c = c.remove(0);
                    for pt in &c.points {
                        writeln!(curves_csv, "{curve_id},{:e},{:e},{:e},{:e}", pt.s, pt.w[0], pt.w[1], pt.p).unwrap();
                    }
                    json!({ "id": curve_id, "layer": layer, "seed": seed, "p0": p0,
                            "status": if c.exited { "exited" } else { "complete" }, "points": c.points.len() })
                }
                Err(e) => json!({ "id": curve_id, "layer": layer, "seed": seed, "p0": p0,
                                  "status": "failed", "reason": e.to_string() }),
            };
            curve_summaries.push(entry);
            curve_id += 1;
        }

        let e = report.extrapolation;
        layers.push(json!({
            "layer": layer,
            "threshold": report.threshold,
            "times": report.times,
            "dp_dt_l1": report.dp_dt,
            "t_dp_dt_l1": report.t_dp_dt,
            "stationary_at": report.stationary_at,
            "scale_invariant_at": report.scale_invariant_at,
            "terminal": report.terminal,
            "triggered_by": report.triggered_by.map(condition_name),
            "extrapolation": e.map(|e| json!({ "slope": e.slope, "intercept": e.intercept, "crossing": e.crossing })),
            "mass": { "masses": audit.masses, "max_deviation": audit.max_deviation, "flagged": audit.flagged },
            "cs_residuals": cs,
            "stationary_residual": stationary,
            "curves": curve_summaries,
        }));
    }
    let report = json!({ "threshold": opts.threshold, "arc_steps": opts.arc_steps, "layers": layers });
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    run.write(run::TERMINAL, run::CS_REPORT, text.as_bytes())?;
    run.write(run::TERMINAL, run::CURVES_CSV, curves_csv.as_bytes())?;
    run.manifest.stages.insert(
        run::TERMINAL.into(),
        json!({ "threshold": opts.threshold, "arc_steps": opts.arc_steps, "curve_seeds": opts.curve_seeds }),
    );
    run.save()?;
    Ok((run, report))
}

/// Filtered training images, for callers that train outside the CLI.
pub fn load_digits(mnist_dir: &std::path::Path) -> Result<Dataset> {
    let (raw, _) = crate::mnist::load_train(mnist_dir)?;
    Ok(filter_digits(&raw, &DIGITS_0_TO_5)?)
}
