//! Sweep execution for bounds and Monte Carlo estimator runs. Every trial draws from its own ChaCha stream keyed by
//! `(seed, sweep index, trial)`, and results are reduced in trial order, so
//! the output does not depend on the thread count.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use super::config::{ChannelModel, ConfigError, EstimatorKind, ExperimentConfig, PlanKind, Point};
use crate::channel::{
    composite_covariance, synth_geometric, synth_unstructured, ChannelSet, CorrelationModel, GeometricParams,
};
use crate::crb::{crb_structured_mean_diag, crb_unstructured_mean_diag};
use crate::error::Error;
use crate::geometric::{decoupled_estimate, simulate_decoupled, DecoupledPlan, Grids, Stage2Mode};
use crate::linalg::{CMat, CVec};
use crate::manifold::{ArrayKind, ArraySpec, FreqGrid};
use crate::training::{
    assemble_measurement, dft_ris_sequence, hadamard_ris_sequence, one_hot_ris_sequence, orthogonal_pilots,
    random_ris_sequence, ris_columns, simulate_uplink, with_direct_column, TrainingPlan,
};
use crate::unstructured::{lmmse_estimate, ls_estimate};

pub const CSV_HEADER: &str = "sweep_var,value,model,mean_diag_db,mse_db,realizations,skipped";

/// One CSV line. Missing quantities are `None` and print as `NaN`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub sweep_var: String,
    pub value: f64,
    pub model: String,
    pub mean_diag_db: Option<f64>,
    pub mse_db: Option<f64>,
    pub realizations: usize,
    pub skipped: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("every realization was skipped as unidentifiable")]
    AllSkipped(Vec<ResultRow>),
    #[error(transparent)]
    Model(#[from] Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RunError {
    /// Process exit code: 2 for configuration errors, 3 when every
    /// realization was unidentifiable, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::AllSkipped(_) => 3,
            _ => 1,
        }
    }
}

fn num(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.16e}"),
        None => "NaN".to_string(),
    }
}

pub fn write_csv<W: Write>(rows: &[ResultRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.sweep_var,
            num(Some(r.value)),
            r.model,
            num(r.mean_diag_db),
            num(r.mse_db),
            r.realizations,
            r.skipped
        )?;
    }
    Ok(())
}

pub fn csv_string(rows: &[ResultRow]) -> String {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ASCII output")
}

/// Independent stream for trial `trial` at sweep index `point`.
pub fn trial_rng(seed: u64, point: usize, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((point as u64) << 32) | trial as u64);
    rng
}

fn is_skip(e: &Error) -> bool {
    matches!(e, Error::Identifiability { .. } | Error::PeakShortfall { .. })
}

/// Training plan at one sweep point. DFT and Hadamard schedules shorter
/// than N+1 states keep their first rows, leaving LS unidentifiable (and
/// reported as such) while the structured bound remains defined.
pub fn build_plan(cfg: &ExperimentConfig, point: &Point, rng: &mut ChaCha8Rng) -> Result<TrainingPlan, Error> {
    let g = &point.geometry;
    let k = g.k_total();
    let n = g.n();
    let direct = cfg.training.include_direct;
    if point.t == 0 || point.t % k != 0 {
        return Err(Error::InvalidArgument(format!(
            "T = {} is not a positive multiple of the {k} pilot antennas",
            point.t
        )));
    }
    let blocks = point.t / k;
    let trim = |psi: CMat| -> CMat {
        let psi = psi.rows(0, blocks).into_owned();
        if direct {
            psi
        } else {
            ris_columns(&psi)
        }
    };
    let psi = match cfg.training.plan {
        PlanKind::Dft => trim(dft_ris_sequence(blocks.max(n + 1), n)?),
        PlanKind::Hadamard => trim(hadamard_ris_sequence(blocks.max(n + 1).next_power_of_two().max(blocks), n)?),
        PlanKind::Random => {
            let psi = random_ris_sequence(blocks, n, rng);
            if direct {
                with_direct_column(&psi)
            } else {
                psi
            }
        }
        PlanKind::OneHot => {
            let psi = one_hot_ris_sequence(n, direct)?;
            if psi.nrows() != blocks {
                return Err(Error::InvalidArgument(format!(
                    "one-hot training needs T = {}",
                    psi.nrows() * k
                )));
            }
            psi
        }
    };
    TrainingPlan::block_repeat(&orthogonal_pilots(k), psi, direct)
}

fn grids(cfg: &ExperimentConfig, point: &Point) -> Grids {
    let grid = |spec: &ArraySpec| match spec.kind {
        ArrayKind::Ula => FreqGrid::uniform_1d(cfg.grid.points_1d).expect("validated"),
        ArrayKind::Ura => FreqGrid::uniform_2d(cfg.grid.points_2d, cfg.grid.points_2d).expect("validated"),
    };
    let g = &point.geometry;
    Grids {
        bs: grid(&g.bs),
        ris: grid(&g.ris),
        ue: g.users.iter().map(grid).collect(),
    }
}

fn pool(threads: Option<usize>) -> Result<rayon::ThreadPool, RunError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    b.build()
        .map_err(|e| RunError::Config(ConfigError { problems: vec![format!("thread pool: {e}")] }))
}

/// Plans are checked once per point so that design errors surface as
/// configuration errors rather than skipped trials.
fn check_points(cfg: &ExperimentConfig) -> Result<Vec<Point>, RunError> {
    let mut problems = Vec::new();
    let mut points = Vec::new();
    for i in 0..cfg.sweep().len() {
        let point = cfg.point(i);
        if let Err(e) = point.geometry.validate() {
            problems.push(format!("sweep point {i}: {e}"));
        } else if let Err(e) = build_plan(cfg, &point, &mut trial_rng(0, 0, 0)) {
            problems.push(format!("sweep point {i}: {e}"));
        }
        points.push(point);
    }
    if problems.is_empty() {
        Ok(points)
    } else {
        Err(ConfigError { problems }.into())
    }
}

/// Accumulates one model's samples in trial order.
#[derive(Debug, Default, Clone)]
struct Tally {
    sum: f64,
    count: usize,
    skipped: usize,
}

impl Tally {
    fn add(&mut self, v: Result<f64, Error>) -> Result<(), Error> {
        match v {
            Ok(x) => {
                self.sum += x;
                self.count += 1;
            }
            Err(e) if is_skip(&e) => self.skipped += 1,
            Err(e) => return Err(e),
        }
        Ok(())
    }

    fn mean_db(&self) -> Option<f64> {
        (self.count > 0).then(|| 10.0 * (self.sum / self.count as f64).log10())
    }
}

fn finish(rows: Vec<ResultRow>) -> Result<Vec<ResultRow>, RunError> {
    if !rows.is_empty() && rows.iter().all(|r| r.realizations == 0) {
        return Err(RunError::AllSkipped(rows));
    }
    Ok(rows)
}

/// Mean-diagonal unstructured and (geometric model) structured CRBs per
/// sweep point, averaged over random channel and schedule draws.
pub fn run_crb_sweep(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<Vec<ResultRow>, RunError> {
    cfg.validate()?;
    let points = check_points(cfg)?;
    let pool = pool(threads)?;
    let sweep = cfg.sweep();
    let seed = cfg.seed();
    let geometric = cfg.channel.model == ChannelModel::Geometric;
    let mut rows = Vec::new();
    for (i, point) in points.iter().enumerate() {
        let g = &point.geometry;
        let outcomes: Vec<(Result<f64, Error>, Option<Result<f64, Error>>)> = pool.install(|| {
            (0..cfg.mc.trials)
                .into_par_iter()
                .map(|trial| {
                    let mut rng = trial_rng(seed, i, trial);
                    let plan = match build_plan(cfg, point, &mut rng) {
                        Ok(p) => p,
                        Err(e) => return (Err(e.clone()), geometric.then_some(Err(e))),
                    };
                    let unstructured = assemble_measurement(&plan, g)
                        .and_then(|z| crb_unstructured_mean_diag(&z, g.powers[0], g.sigma2));
                    let structured = geometric.then(|| {
                        GeometricParams::random(g, &point.counts, cfg.channel.gain_rule, &mut rng)
                            .and_then(|p| crb_structured_mean_diag(&p, &plan, g))
                    });
                    (unstructured, structured)
                })
                .collect()
        });
        let mut u = Tally::default();
        let mut s = Tally::default();
        for (a, b) in outcomes {
            u.add(a)?;
            if let Some(b) = b {
                s.add(b)?;
            }
        }
        let row = |model: &str, t: &Tally| ResultRow {
            sweep_var: sweep.name().to_string(),
            value: sweep.value(i),
            model: model.to_string(),
            mean_diag_db: t.mean_db(),
            mse_db: None,
            realizations: t.count,
            skipped: t.skipped,
        };
        rows.push(row("crb_unstructured", &u));
        if geometric {
            rows.push(row("crb_structured", &s));
        }
    }
    finish(rows)
}

fn draw_channels(
    cfg: &ExperimentConfig,
    point: &Point,
    rng: &mut ChaCha8Rng,
) -> Result<(ChannelSet, Option<GeometricParams>), Error> {
    let g = &point.geometry;
    match cfg.channel.model {
        ChannelModel::Geometric => {
            let p = GeometricParams::random(g, &point.counts, cfg.channel.gain_rule, rng)?;
            Ok((synth_geometric(&p, g)?, Some(p)))
        }
        ChannelModel::Unstructured => {
            let corr = CorrelationModel::identity(g, cfg.training.include_direct);
            Ok((synth_unstructured(&corr, g, rng)?, None))
        }
    }
}

/// Per-element real squared error `Σ|e|² / (2·len)`, comparable with the
/// mean CRB diagonal.
fn per_element_error(estimate: &CVec, truth: &CVec) -> f64 {
    (estimate - truth).norm_squared() / (2.0 * truth.len() as f64)
}

/// Monte Carlo composite-channel MSE of the configured estimators, reported
/// next to the unstructured CRB of the same plan.
pub fn run_mc_mse(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<Vec<ResultRow>, RunError> {
    cfg.validate()?;
    let points = check_points(cfg)?;
    let estimators = cfg.mc.estimators.clone();
    if estimators.contains(&EstimatorKind::Decoupled)
        && (cfg.channel.model != ChannelModel::Geometric || cfg.training.include_direct)
    {
        return Err(ConfigError {
            problems: vec!["the decoupled estimator needs the geometric model without a direct channel".into()],
        }
        .into());
    }
    if estimators.contains(&EstimatorKind::Decoupled) {
        if let Some(p) = points.iter().find(|p| p.t < 2 * p.geometry.k_total()) {
            return Err(ConfigError {
                problems: vec![format!("the decoupled estimator needs at least two pilot blocks, T = {}", p.t)],
            }
            .into());
        }
    }
    let pool = pool(threads)?;
    let sweep = cfg.sweep();
    let seed = cfg.seed();
    let direct = cfg.training.include_direct;
    let mut rows = Vec::new();
    for (i, point) in points.iter().enumerate() {
        let g = &point.geometry;
        let (p, sigma2) = (g.powers[0], g.sigma2);
        let prior = if estimators.contains(&EstimatorKind::Lmmse) {
            Some(composite_covariance(&CorrelationModel::identity(g, direct))?)
        } else {
            None
        };
        let grids = grids(cfg, point);
        let outcomes: Vec<Result<(Result<f64, Error>, Vec<Result<f64, Error>>), Error>> = pool.install(|| {
            (0..cfg.mc.trials)
                .into_par_iter()
                .map(|trial| {
                    let mut rng = trial_rng(seed, i, trial);
                    let plan = build_plan(cfg, point, &mut rng)?;
                    let (channels, _) = draw_channels(cfg, point, &mut rng)?;
                    let truth = channels.composite_vector(direct)?;
                    let z = assemble_measurement(&plan, g)?;
                    let y = simulate_uplink(&channels, &plan, g, &mut rng)?;
                    let crb = crb_unstructured_mean_diag(&z, p, sigma2);
                    let errs = estimators
                        .iter()
                        .map(|e| match e {
                            EstimatorKind::Ls => ls_estimate(&y, &z, p, sigma2).map(|r| per_element_error(&r.h_hat, &truth)),
                            EstimatorKind::Lmmse => {
                                lmmse_estimate(&y, &z, prior.as_ref().expect("built above"), p, sigma2)
                                    .map(|r| per_element_error(&r.h_hat, &truth))
                            }
                            EstimatorKind::Decoupled => {
                                let k = g.k_total();
                                let plan = DecoupledPlan::new(g, 1, (point.t / k).saturating_sub(1), &mut rng)?;
                                let (y1, y2) = simulate_decoupled(&channels, &plan, g, &mut rng)?;
                                let mode = if g.users.iter().all(|u| u.len() == 1) {
                                    Stage2Mode::SingleAntennaUe
                                } else {
                                    Stage2Mode::General
                                };
                                decoupled_estimate(&y1, &y2, &plan, g, &point.counts, &grids, mode)
                                    .map(|est| per_element_error(&est.h_c, &truth))
                            }
                        })
                        .collect();
                    Ok((crb, errs))
                })
                .collect()
        });
        let mut crb = Tally::default();
        let mut tallies = vec![Tally::default(); estimators.len()];
        for outcome in outcomes {
            match outcome {
                Ok((c, errs)) => {
                    crb.add(c)?;
                    for (t, e) in tallies.iter_mut().zip(errs) {
                        t.add(e)?;
                    }
                }
                Err(e) if is_skip(&e) => tallies.iter_mut().for_each(|t| t.skipped += 1),
                Err(e) => return Err(e.into()),
            }
        }
        for (e, t) in estimators.iter().zip(&tallies) {
            rows.push(ResultRow {
                sweep_var: sweep.name().to_string(),
                value: sweep.value(i),
                model: e.name().to_string(),
                mean_diag_db: if *e == EstimatorKind::Decoupled { None } else { crb.mean_db() },
                mse_db: t.mean_db(),
                realizations: t.count,
                skipped: t.skipped,
            });
        }
    }
    finish(rows)
}

fn matrix_json(m: &CMat) -> Value {
    Value::Array(
        m.row_iter()
            .map(|r| Value::Array(r.iter().map(|z| json!([z.re, z.im])).collect()))
            .collect(),
    )
}

/// One channel draw and training plan at the first sweep point, as JSON.
pub fn synth(cfg: &ExperimentConfig) -> Result<Value, RunError> {
    cfg.validate()?;
    let points = check_points(cfg)?;
    let point = &points[0];
    let mut rng = trial_rng(cfg.seed(), 0, 0);
    let plan = build_plan(cfg, point, &mut rng)?;
    let (channels, params) = draw_channels(cfg, point, &mut rng)?;
    let composite = channels.composite_vector(cfg.training.include_direct)?;
    Ok(json!({
        "config": cfg,
        "geometry": point.geometry,
        "t": point.t,
        "params": params,
        "channels": {
            "h": matrix_json(&channels.h),
            "g": channels.g.iter().map(matrix_json).collect::<Vec<_>>(),
            "hd": channels.hd.as_ref().map(|v| v.iter().map(matrix_json).collect::<Vec<_>>()),
        },
        "plan": {
            "x": matrix_json(&plan.x),
            "psi": matrix_json(&plan.psi),
            "include_direct": plan.include_direct,
        },
        "composite": composite.iter().map(|z| json!([z.re, z.im])).collect::<Vec<_>>(),
    }))
}
