use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use kmarkov::estimator::{estimate, AccumulatorBank, EstimateBundle, LagRange};
use kmarkov::harness::{
    build_bank, format_summary, records_to_csv, run_experiment, summarize, ExperimentSpec, SummaryRow,
};
use kmarkov::markov::CovariatePoint;
use kmarkov::simulator::{read_jsonl, simulate_paths, write_jsonl, SamplePath};
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::{manifest_dir, RunManifest};
use crate::CliError;

/// Options shared by the subcommands; unused ones are ignored.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub lags: Option<LagRange>,
    pub grid: Option<Vec<CovariatePoint>>,
}

/// Result of a command that may finish with warnings.
#[derive(Debug)]
pub struct Outcome {
    pub warnings: Vec<String>,
    pub manifest: RunManifest,
}

fn load_config(path: Option<&Path>, ov: &Overrides) -> Result<(RunConfig, Vec<u8>), CliError> {
    let (mut cfg, bytes) = match path {
        Some(p) => RunConfig::load(p)?,
        None => (RunConfig::parse("{}")?, Vec::new()),
    };
    if let Some(l) = ov.lags {
        cfg.estimator.lags = l;
    }
    if let Some(g) = &ov.grid {
        cfg.grid = Some(g.clone());
    }
    if let Some(s) = ov.seed {
        if let Some(sim) = cfg.sim.as_mut() {
            sim.seed = s;
        }
        if let Some(e) = cfg.experiment.as_mut() {
            e.seed = Some(s);
        }
    }
    cfg.estimator.lags.check(cfg.estimator.max_gap)?;
    Ok((cfg, bytes))
}

fn create_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    create_parent(path)?;
    File::create(path).map(BufWriter::new).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

pub fn read_dataset(path: &Path) -> Result<Vec<SamplePath>, CliError> {
    let f = File::open(path).map_err(io_err(path))?;
    read_jsonl(BufReader::new(f)).map_err(|e| match CliError::from(e) {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Writes replication 0 of the configured simulation as JSONL.
pub fn simulate(config: &Path, ov: &Overrides, out: &Path) -> Result<Outcome, CliError> {
    let (cfg, bytes) = load_config(Some(config), ov)?;
    let sim = cfg.sim.ok_or_else(|| CliError::Usage("config has no `sim` block".into()))?;
    sim.validate()?;
    let paths = simulate_paths(&sim, 0)?;
    let mut w = create(out)?;
    write_jsonl(&paths, &mut w).map_err(io_err(out))?;
    w.flush().map_err(io_err(out))?;

    let mut manifest = RunManifest::new("simulate", &bytes, Some(sim.seed));
    manifest.dataset = Some(out.to_path_buf());
    manifest.append(&manifest_dir(out))?;
    Ok(Outcome { warnings: Vec::new(), manifest })
}

fn infer_states(paths: &[SamplePath]) -> usize {
    let max = paths
        .iter()
        .flat_map(|p| std::iter::once(p.initial_state).chain(p.events.iter().map(|e| e.state)))
        .max()
        .unwrap_or(0);
    (max + 1).max(2)
}

/// Resumes `checkpoint` or starts a fresh bank, then absorbs `paths`.
///
/// A fresh bank whose schedule leaves `sigma_scale` unset takes it from the
/// sample standard deviation of this first batch, and it stays fixed in
/// every later checkpoint.
fn ingest(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    grid_given: bool,
    paths: &[SamplePath],
) -> Result<AccumulatorBank, CliError> {
    let est = &cfg.estimator;
    match checkpoint {
        Some(ck) => {
            let f = File::open(ck).map_err(io_err(ck))?;
            let mut bank = AccumulatorBank::load_checkpoint(BufReader::new(f))?;
            bank.check_schedule(&est.schedule, est.kernel)?;
            if grid_given && bank.grid() != cfg.grid().as_slice() {
                return Err(CliError::Usage("evaluation grid differs from the checkpoint's".into()));
            }
            if bank.max_gap() != est.max_gap {
                return Err(CliError::Usage(format!(
                    "max_gap {} differs from the checkpoint's {}",
                    est.max_gap,
                    bank.max_gap()
                )));
            }
            bank.absorb_all(paths)?;
            Ok(bank)
        }
        None => {
            let states = cfg.states().unwrap_or_else(|| infer_states(paths));
            Ok(build_bank(est, &cfg.grid(), states, paths)?)
        }
    }
}

fn save_checkpoint(bank: &AccumulatorBank, path: &Path) -> Result<(), CliError> {
    let mut w = create(path)?;
    bank.save_checkpoint(&mut w)?;
    w.flush().map_err(io_err(path))
}

#[derive(Serialize)]
struct PointEstimate<'a> {
    point: &'a CovariatePoint,
    ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    warning: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    estimate: Option<EstimateBundle>,
}

#[derive(Serialize)]
struct EstimateReport<'a> {
    states: usize,
    n_paths: u64,
    skipped_transitions: u64,
    kernel: kmarkov::estimator::KernelKind,
    schedule: &'a kmarkov::estimator::BandwidthSchedule,
    lags: LagRange,
    reg_mode: kmarkov::estimator::RegMode,
    points: Vec<PointEstimate<'a>>,
}

pub struct EstimateArgs<'a> {
    pub config: Option<&'a Path>,
    pub dataset: Option<&'a Path>,
    pub checkpoint: Option<&'a Path>,
    pub save_checkpoint: Option<&'a Path>,
    pub out: &'a Path,
    pub strict: bool,
}

/// Estimates at every grid point and writes a JSON report. Points without
/// a usable lag are flagged; with `strict` they turn into a numeric error
/// after all outputs are written.
pub fn estimate_cmd(args: &EstimateArgs<'_>, ov: &Overrides) -> Result<Outcome, CliError> {
    let (cfg, bytes) = load_config(args.config, ov)?;
    let paths = match args.dataset {
        Some(p) => read_dataset(p)?,
        None => Vec::new(),
    };
    let grid_given = cfg.grid.is_some();
    let bank = ingest(&cfg, args.checkpoint, grid_given, &paths)?;
    let est = &cfg.estimator;

    let mut warnings = Vec::new();
    let points = bank
        .grid()
        .iter()
        .enumerate()
        .map(|(g, point)| match estimate(&bank, g, est.lags, est.reg_mode) {
            Ok(b) => PointEstimate { point, ok: true, warning: None, estimate: Some(b) },
            Err(e) => {
                let msg = format!("grid point {g} {:?}/{:?}: {e}", point.continuous, point.discrete);
                warnings.push(msg.clone());
                PointEstimate { point, ok: false, warning: Some(msg), estimate: None }
            }
        })
        .collect();
    let report = EstimateReport {
        states: bank.states(),
        n_paths: bank.n_paths(),
        skipped_transitions: bank.skipped_transitions(),
        kernel: bank.kernel(),
        schedule: bank.schedule(),
        lags: est.lags,
        reg_mode: est.reg_mode,
        points,
    };
    let mut w = create(args.out)?;
    serde_json::to_writer_pretty(&mut w, &report).map_err(|e| CliError::Io(e.to_string()))?;
    writeln!(w).map_err(io_err(args.out))?;
    w.flush().map_err(io_err(args.out))?;
    if let Some(ck) = args.save_checkpoint {
        save_checkpoint(&bank, ck)?;
    }

    let seed = cfg.sim.as_ref().map(|s| s.seed);
    let mut manifest = RunManifest::new("estimate", &bytes, seed);
    manifest.dataset = args.dataset.map(Path::to_path_buf);
    manifest.checkpoint = args.save_checkpoint.or(args.checkpoint).map(Path::to_path_buf);
    manifest.results = vec![args.out.to_path_buf()];
    manifest.append(&manifest_dir(args.out))?;

    if args.strict && !warnings.is_empty() {
        return Err(CliError::Numeric(warnings.join("; ")));
    }
    Ok(Outcome { warnings, manifest })
}

/// Absorbs `dataset` into `checkpoint` (or a fresh bank) and writes `out`.
pub fn update(
    config: Option<&Path>,
    dataset: &Path,
    checkpoint: Option<&Path>,
    out: &Path,
    ov: &Overrides,
) -> Result<Outcome, CliError> {
    let (cfg, bytes) = load_config(config, ov)?;
    let paths = read_dataset(dataset)?;
    let bank = ingest(&cfg, checkpoint, cfg.grid.is_some(), &paths)?;
    save_checkpoint(&bank, out)?;

    let mut manifest = RunManifest::new("update", &bytes, None);
    manifest.dataset = Some(dataset.to_path_buf());
    manifest.checkpoint = Some(out.to_path_buf());
    manifest.append(&manifest_dir(out))?;
    Ok(Outcome { warnings: Vec::new(), manifest })
}

#[derive(Serialize)]
struct ExperimentSummary<'a> {
    spec: &'a ExperimentSpec,
    rows: &'a [SummaryRow],
}

pub const RESULTS_CSV: &str = "results.csv";
pub const SUMMARY_JSON: &str = "summary.json";

/// Runs the experiment and writes `results.csv` and `summary.json` into
/// `out_dir`. Returns the text table.
pub fn experiment(config: &Path, ov: &Overrides, out_dir: &Path) -> Result<(String, Outcome), CliError> {
    let (cfg, bytes) = load_config(Some(config), ov)?;
    let sim = cfg.sim.clone().ok_or_else(|| CliError::Usage("config has no `sim` block".into()))?;
    let block = cfg.experiment.clone().ok_or_else(|| CliError::Usage("config has no `experiment` block".into()))?;
    let spec = ExperimentSpec {
        seed: block.seed.unwrap_or(sim.seed),
        sim,
        estimator: cfg.estimator.clone(),
        eval_grid: cfg.grid(),
        n_values: block.n_values,
        replications: block.replications,
    };
    let records = run_experiment(&spec)?;
    let rows = summarize(&records);

    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let csv_path = out_dir.join(RESULTS_CSV);
    std::fs::write(&csv_path, records_to_csv(&records)).map_err(io_err(&csv_path))?;
    let json_path = out_dir.join(SUMMARY_JSON);
    let mut w = create(&json_path)?;
    serde_json::to_writer_pretty(&mut w, &ExperimentSummary { spec: &spec, rows: &rows })
        .map_err(|e| CliError::Io(e.to_string()))?;
    writeln!(w).map_err(io_err(&json_path))?;
    w.flush().map_err(io_err(&json_path))?;

    let mut manifest = RunManifest::new("experiment", &bytes, Some(spec.seed));
    manifest.results = vec![csv_path, json_path];
    manifest.append(out_dir)?;

    let warnings = rows
        .iter()
        .filter(|r| r.failures > 0)
        .map(|r| format!("N={} grid point {}: {} of {} cells failed", r.n, r.grid_index, r.failures, r.count))
        .collect();
    Ok((format_summary(&rows), Outcome { warnings, manifest }))
}
