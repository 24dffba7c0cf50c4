use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use crate::data::{Dataset, DatasetSpec, ModeGeometry};
use crate::error::Error;
use crate::imle::{coverage_lemma_mc, HistoryRow, LemmaReport, RefreshEvent, TrainState, Trainer};
use crate::metrics::{FeatureSet, MetricReport};
use crate::rng::{self, Stream};

/// File names inside a run directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.rtmi";
pub const HISTORY_FILE: &str = "history.csv";

/// `<out>/<first 12 hex digits of the config digest>-s<seed>`.
pub fn run_dir(out: &Path, cfg: &ExperimentConfig) -> PathBuf {
    out.join(format!("{}-s{}", cfg.short_digest(), cfg.seed))
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Writes `rows` as CSV with a header row, or appends without one.
pub fn write_table<R: Serialize>(path: &Path, rows: &[R], append: bool) -> Result<(), Error> {
    let exists = append && path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(exists)
        .truncate(!exists)
        .open(path)
        .map_err(io(path))?;
    let mut w = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(io(path))
}

#[derive(Serialize)]
struct HistoryRecord {
    step: u64,
    loss: f64,
    mean_matched_distance: f64,
    acceptance_rate: f64,
}

impl From<&HistoryRow> for HistoryRecord {
    fn from(r: &HistoryRow) -> Self {
        Self {
            step: r.step,
            loss: r.loss,
            mean_matched_distance: r.mean_distance,
            acceptance_rate: r.acceptance,
        }
    }
}

/// A validated config with its dataset materialised and a trainer built.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub spec: DatasetSpec,
    pub data: Dataset,
    /// Mode centres, for mixture datasets.
    pub geometry: Option<ModeGeometry>,
    pub trainer: Trainer,
}

impl Experiment {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self, Error> {
        cfg.validate()?;
        let spec = cfg.dataset_spec()?;
        let data = spec.generate()?;
        let geometry = spec.mode_geometry().ok();
        let trainer = Trainer::new(cfg.generator()?, cfg.imle.clone(), &data)?;
        Ok(Self {
            cfg: cfg.clone(),
            spec,
            data,
            geometry,
            trainer,
        })
    }

    pub fn init_state(&self) -> TrainState {
        self.trainer.init_state(self.cfg.seed)
    }

    pub fn checkpoint(&self, state: &TrainState) -> Checkpoint {
        Checkpoint::from_state(self.cfg.digest(), state)
    }

    /// Restores a state after checking that `ckpt` belongs to this config.
    pub fn restore(&self, ckpt: &Checkpoint) -> Result<TrainState, Error> {
        ckpt.verify(&self.cfg.digest())?;
        let template = self.trainer.gen.init(0);
        Ok(ckpt.to_state(&template, self.cfg.imle.lr)?)
    }

    pub fn load(&self, path: &Path) -> Result<TrainState, Error> {
        self.restore(&Checkpoint::load(path)?)
    }

    /// Metrics of `n_fake` EMA samples against the dataset.
    pub fn evaluate(&self, state: &TrainState, k: usize, n_fake: usize, h_override: Option<usize>) -> Result<MetricReport, Error> {
        let fake = self.trainer.eval_samples(state, n_fake, h_override)?;
        let real = FeatureSet::new(&self.data.points, self.data.dim)?;
        let fake = FeatureSet::new(&fake, self.data.dim)?;
        Ok(MetricReport::compute(real, fake, k, self.geometry.as_ref())?)
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub state: TrainState,
    pub history: Vec<HistoryRow>,
}

/// Trains to `imle.steps`, writing `checkpoint.rtmi` and `history.csv` into
/// the run directory under `out`. With `resume`, training continues from
/// that checkpoint and the history is appended to.
///
/// If a step fails, the last good state is checkpointed before the error is
/// returned.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    out: &Path,
    resume: Option<&Path>,
    observer: &mut dyn FnMut(&RefreshEvent<'_>),
) -> Result<TrainOutcome, Error> {
    let exp = Experiment::new(cfg)?;
    let dir = run_dir(out, cfg);
    std::fs::create_dir_all(&dir).map_err(io(&dir))?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let mut state = match resume {
        Some(p) => exp.load(p)?,
        None => exp.init_state(),
    };
    let until = cfg.imle.steps as u64;
    let mut history = Vec::with_capacity(until.saturating_sub(state.step) as usize);
    let mut failure = None;
    while state.step < until {
        match exp.trainer.step(&mut state, observer) {
            Ok(row) => history.push(row),
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    let records: Vec<HistoryRecord> = history.iter().map(HistoryRecord::from).collect();
    write_table(&dir.join(HISTORY_FILE), &records, resume.is_some())?;
    exp.checkpoint(&state).save(&ckpt_path)?;
    if let Some(source) = failure {
        return Err(Error::TrainAborted {
            step: state.step,
            checkpoint: ckpt_path.display().to_string(),
            source,
        });
    }
    Ok(TrainOutcome {
        run_dir: dir,
        checkpoint: ckpt_path,
        state,
        history,
    })
}

#[derive(Serialize)]
struct MetricRecord {
    h: Option<usize>,
    precision: f64,
    recall: f64,
    density: f64,
    coverage: f64,
    fid: f64,
    modes_covered: Option<usize>,
    modes_total: Option<usize>,
    k: usize,
    n_real: usize,
    n_fake: usize,
}

impl MetricRecord {
    fn new(h: Option<usize>, r: &MetricReport) -> Self {
        Self {
            h,
            precision: r.precision,
            recall: r.recall,
            density: r.density,
            coverage: r.coverage,
            fid: r.fid,
            modes_covered: r.modes_covered,
            modes_total: r.modes_total,
            k: r.k,
            n_real: r.n_real,
            n_fake: r.n_fake,
        }
    }
}

fn check_h(h: Option<usize>) -> Result<(), Error> {
    if h == Some(0) {
        return Err(super::ConfigError::Invalid {
            path: "h_override".into(),
            reason: "must be at least 1".into(),
        }
        .into());
    }
    Ok(())
}

/// Evaluates a checkpoint with `metrics.k` and `metrics.n_fake`, optionally
/// at a different number of refinement steps. Writes `eval.csv` when `out`
/// is given.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, h_override: Option<usize>, out: Option<&Path>) -> Result<MetricReport, Error> {
    check_h(h_override)?;
    let exp = Experiment::new(cfg)?;
    let state = exp.load(checkpoint)?;
    let report = exp.evaluate(&state, cfg.metrics.k, cfg.metrics.n_fake, h_override)?;
    if let Some(out) = out {
        let dir = run_dir(out, cfg);
        std::fs::create_dir_all(&dir).map_err(io(&dir))?;
        let h = h_override.or(mapper_h(cfg));
        write_table(&dir.join("eval.csv"), &[MetricRecord::new(h, &report)], false)?;
    }
    Ok(report)
}

fn mapper_h(cfg: &ExperimentConfig) -> Option<usize> {
    match &cfg.mapper {
        crate::mapper::MapperConfig::Rtm(c) => Some(c.h),
        _ => None,
    }
}

/// Re-evaluates one checkpoint at each `H` in `hs`; writes `sweep_h.csv`.
pub fn cmd_sweep_h(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    hs: &[usize],
    out: Option<&Path>,
) -> Result<Vec<(usize, MetricReport)>, Error> {
    for &h in hs {
        check_h(Some(h))?;
    }
    let exp = Experiment::new(cfg)?;
    let state = exp.load(checkpoint)?;
    let rows = hs
        .iter()
        .map(|&h| Ok((h, exp.evaluate(&state, cfg.metrics.k, cfg.metrics.n_fake, Some(h))?)))
        .collect::<Result<Vec<_>, Error>>()?;
    if let Some(out) = out {
        let dir = run_dir(out, cfg);
        std::fs::create_dir_all(&dir).map_err(io(&dir))?;
        let records: Vec<_> = rows.iter().map(|(h, r)| MetricRecord::new(Some(*h), r)).collect();
        write_table(&dir.join("sweep_h.csv"), &records, false)?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub mapper: String,
    /// Mapper parameters only.
    pub parameter_count: usize,
    pub sequential_depth: usize,
    pub steps: u64,
    pub final_loss: f64,
    pub report: MetricReport,
}

#[derive(Serialize)]
struct AblationRecord<'a> {
    mapper: &'a str,
    parameter_count: usize,
    sequential_depth: usize,
    steps: u64,
    final_loss: f64,
    precision: f64,
    recall: f64,
    density: f64,
    coverage: f64,
    fid: f64,
    modes_covered: Option<usize>,
    modes_total: Option<usize>,
}

/// Trains every mapper in `ablate.mappers` with the rest of the pipeline
/// unchanged; writes `ablate_depth.csv`.
pub fn cmd_ablate_depth(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<AblationRow>, Error> {
    cfg.validate()?;
    let mappers = cfg
        .ablate
        .as_ref()
        .ok_or_else(|| super::ConfigError::Invalid {
            path: "ablate.mappers".into(),
            reason: "the depth ablation needs a list of mappers".into(),
        })?
        .mappers
        .clone();
    let mut rows = Vec::with_capacity(mappers.len());
    for m in mappers {
        let variant = cfg.with_mapper(m.clone());
        let exp = Experiment::new(&variant)?;
        let mut state = exp.init_state();
        let history = exp.trainer.run(&mut state, cfg.imle.steps as u64, &mut |_| {})?;
        let report = exp.evaluate(&state, cfg.metrics.k, cfg.metrics.n_fake, None)?;
        rows.push(AblationRow {
            mapper: m.label(),
            parameter_count: m.parameter_count(),
            sequential_depth: m.sequential_depth(),
            steps: state.step,
            final_loss: history.last().map_or(f64::NAN, |r| r.loss),
            report,
        });
    }
    if let Some(out) = out {
        let dir = run_dir(out, cfg);
        std::fs::create_dir_all(&dir).map_err(io(&dir))?;
        let records: Vec<_> = rows
            .iter()
            .map(|r| AblationRecord {
                mapper: &r.mapper,
                parameter_count: r.parameter_count,
                sequential_depth: r.sequential_depth,
                steps: r.steps,
                final_loss: r.final_loss,
                precision: r.report.precision,
                recall: r.report.recall,
                density: r.report.density,
                coverage: r.report.coverage,
                fid: r.report.fid,
                modes_covered: r.report.modes_covered,
                modes_total: r.report.modes_total,
            })
            .collect();
        write_table(&dir.join("ablate_depth.csv"), &records, false)?;
    }
    Ok(rows)
}

#[derive(Serialize)]
struct LemmaRecord {
    m: usize,
    empirical: f64,
    bound: f64,
    se: f64,
    q_hat: f64,
    trials: usize,
}

/// Monte Carlo check of the pool-coverage bound for the identity stub with
/// target 0; writes `lemma_<seed>.csv` into `out`.
pub fn cmd_lemma_lab(epsilon: f64, m_list: &[usize], trials: usize, seed: u64, out: Option<&Path>) -> Result<LemmaReport, Error> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(super::ConfigError::Invalid {
            path: "epsilon".into(),
            reason: "must be finite and non-negative".into(),
        }
        .into());
    }
    if trials == 0 {
        return Err(super::ConfigError::Invalid {
            path: "trials".into(),
            reason: "must be at least 1".into(),
        }
        .into());
    }
    let report = coverage_lemma_mc(|z| z, 0.0, epsilon, m_list, trials, seed);
    if let Some(out) = out {
        std::fs::create_dir_all(out).map_err(io(out))?;
        let records: Vec<_> = report
            .rows
            .iter()
            .map(|r| LemmaRecord {
                m: r.m,
                empirical: r.empirical,
                bound: r.bound,
                se: r.se,
                q_hat: report.q_hat,
                trials: report.trials,
            })
            .collect();
        write_table(&out.join(format!("lemma_s{seed}.csv")), &records, false)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchOptions {
    pub batch: usize,
    pub passes: usize,
    pub warmup: usize,
    pub h_override: Option<usize>,
    /// Time the mapping network alone.
    pub mapper_only: bool,
}

impl BenchOptions {
    pub fn new(batch: usize) -> Self {
        Self {
            batch,
            passes: 200,
            warmup: 20,
            h_override: None,
            mapper_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub batch: usize,
    pub passes: usize,
    pub warmup: usize,
    pub h: Option<usize>,
    pub mapper_only: bool,
    pub median_batch_seconds: f64,
    pub per_image_seconds: f64,
}

/// Median wall-clock time of gradient-free forward passes with the EMA
/// weights, after untimed warm-up passes.
pub fn bench_state(exp: &Experiment, state: &TrainState, opts: BenchOptions) -> Result<BenchReport, Error> {
    if opts.batch == 0 || opts.passes == 0 {
        return Err(super::ConfigError::Invalid {
            path: if opts.batch == 0 { "batch" } else { "passes" }.into(),
            reason: "must be at least 1".into(),
        }
        .into());
    }
    check_h(opts.h_override)?;
    let gen = &exp.trainer.gen;
    let z = rng::latents(state.seed, Stream::Eval, 0, opts.batch, gen.latent_dim());
    let pass = || -> Result<(), Error> {
        if opts.mapper_only {
            std::hint::black_box(gen.map_only(&state.ema, &z, opts.h_override)?);
        } else {
            std::hint::black_box(gen.sample(&state.ema, &z, opts.h_override)?);
        }
        Ok(())
    };
    for _ in 0..opts.warmup {
        pass()?;
    }
    let mut times = Vec::with_capacity(opts.passes);
    for _ in 0..opts.passes {
        let t = Instant::now();
        pass()?;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let n = times.len();
    let median = if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    };
    Ok(BenchReport {
        batch: opts.batch,
        passes: opts.passes,
        warmup: opts.warmup,
        h: opts.h_override.or(mapper_h(&exp.cfg)),
        mapper_only: opts.mapper_only,
        median_batch_seconds: median,
        per_image_seconds: median / opts.batch as f64,
    })
}

/// Latency of a trained checkpoint; writes `bench.csv` when `out` is given.
pub fn cmd_bench(cfg: &ExperimentConfig, checkpoint: &Path, opts: BenchOptions, out: Option<&Path>) -> Result<BenchReport, Error> {
    let exp = Experiment::new(cfg)?;
    let state = exp.load(checkpoint)?;
    let report = bench_state(&exp, &state, opts)?;
    if let Some(out) = out {
        let dir = run_dir(out, cfg);
        std::fs::create_dir_all(&dir).map_err(io(&dir))?;
        write_table(&dir.join("bench.csv"), &[&report], false)?;
    }
    Ok(report)
}

/// Writes the configured dataset to `<out>/data_<kind>_n<n>_s<seed>.csv` with
/// columns `x0 … x{dim-1}, label`.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf, Error> {
    let spec = cfg.dataset_spec()?;
    let data = spec.generate()?;
    std::fs::create_dir_all(out).map_err(io(out))?;
    let path = out.join(format!("data_{}_n{}_s{}.csv", spec.kind.name(), spec.n, spec.seed));
    let file = std::fs::File::create(&path).map_err(io(&path))?;
    let csv_err = |e: csv::Error| Error::io(&path, std::io::Error::other(e));
    let mut w = csv::Writer::from_writer(file);
    let mut header: Vec<String> = (0..data.dim).map(|i| format!("x{i}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(data.labels[i].to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(io(&path))?;
    Ok(path)
}
