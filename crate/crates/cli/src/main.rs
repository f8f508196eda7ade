//! `rfda`: simulate, fit and score sparse manifold-valued curves.
//!
//! Exit codes: 0 on success, 2 for invalid input or usage, 3 when an
//! estimator breaks down numerically.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rfda::bandwidth::{select_cov, select_mean, BandwidthGrid, CvOptions, SelectionMethod};
use rfda::experiment::{full_table, run_experiment, write_rows, BandwidthPolicy, ExperimentConfig, ExperimentReport};
use rfda::mean::{fit_mean, uniform_grid, DEFAULT_GRID};
use rfda::metrics::cov_errors;
use rfda::sampling::{SimSpec, TruthGrid};
use rfda::smoother::CovSurfaceRecord;
use rfda::{
    blup_scores, discretize_operator, eigenpairs, fit_cov_surface, noise_variance, CovSurface, Design, EigenSystem,
    MeanCurve, SparseDataset, WeightScheme,
};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "rfda", version, about = "Intrinsic functional data analysis on manifolds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a dataset from a simulation design, plus its truth on a grid.
    Simulate(Opts),
    /// Fit the Fréchet mean curve.
    FitMean(Opts),
    /// Fit the covariance surface against a fitted mean.
    FitCov(Opts),
    /// Eigenpairs of a fitted covariance and BLUP scores.
    Fpca(Opts),
    /// rMUIE and rRMISE of a fitted covariance against a simulation truth.
    Evaluate(Opts),
    /// Whole pipeline on `--input`, or a Monte Carlo experiment without it.
    Report(Opts),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Bw {
    Fixed,
    Cv,
    Gcv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Weights {
    Obs,
    Subject,
}

/// Flags shared by all subcommands; a `--config` file overrides any of them.
#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
struct Opts {
    /// JSON file whose keys (flag names) override the command line.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Simulation design as a geometry descriptor: sphere:2, spd-lc:2, spd-ai:2.
    #[arg(long)]
    geometry: Option<String>,
    /// Dataset (JSON lines).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Main output file.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Fitted mean curve (JSON).
    #[arg(long)]
    mean: Option<PathBuf>,
    /// Fitted covariance surface (JSON).
    #[arg(long)]
    cov: Option<PathBuf>,
    /// Simulation truth (JSON); `simulate` writes it here.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// BLUP scores (CSV), written by `fpca`.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    h_mu: Option<f64>,
    #[arg(long)]
    h_cov: Option<f64>,
    /// Number of grid points.
    #[arg(long)]
    grid: Option<usize>,
    /// Number of principal components.
    #[arg(long)]
    k: Option<usize>,
    /// Choose K as the smallest reaching this fraction of variance.
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    snr: Option<f64>,
    #[arg(short = 'n', long = "subjects")]
    n: Option<usize>,
    #[arg(short = 'm', long = "obs")]
    m: Option<usize>,
    #[arg(long, value_enum)]
    weights: Option<Weights>,
    #[arg(long, value_enum)]
    bw: Option<Bw>,
    #[arg(long)]
    folds: Option<usize>,
    /// Every design × n × m cell; slow.
    #[arg(long)]
    full_table: bool,
    /// Record wall-clock seconds (makes reports non-reproducible).
    #[arg(long)]
    timing: bool,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Lib(rfda::Error),
}

impl From<rfda::Error> for Failure {
    fn from(e: rfda::Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Lib(e.into())
    }
}

type Res<T> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

impl Opts {
    fn merged(self) -> Res<Opts> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let text = std::fs::read_to_string(&path)?;
        let file: serde_json::Value = serde_json::from_str(&text)?;
        let serde_json::Value::Object(over) = file else {
            return Err(usage("config file must hold a JSON object"));
        };
        let mut base = serde_json::to_value(&self)?;
        let obj = base.as_object_mut().expect("struct serializes to an object");
        for (k, v) in over {
            obj.insert(k, v);
        }
        let mut out: Opts = serde_json::from_value(base).map_err(|e| usage(format!("config: {e}")))?;
        out.config = Some(path);
        Ok(out)
    }

    fn need<'a>(&self, v: &'a Option<PathBuf>, flag: &str) -> Res<&'a Path> {
        v.as_deref().ok_or_else(|| usage(format!("--{flag} is required")))
    }

    fn design(&self) -> Res<Design> {
        Ok(self.geometry.as_deref().unwrap_or("sphere:2").parse::<Design>()?)
    }

    fn scheme(&self) -> Option<WeightScheme> {
        self.weights.map(|w| match w {
            Weights::Obs => WeightScheme::ObsEqual,
            Weights::Subject => WeightScheme::SubjectEqual,
        })
    }

    fn grid_len(&self) -> usize {
        self.grid.unwrap_or(DEFAULT_GRID)
    }

    fn cv(&self) -> CvOptions {
        CvOptions {
            folds: self.folds.unwrap_or(CvOptions::default().folds),
            seed: self.seed.unwrap_or(0),
            ..CvOptions::default()
        }
    }

    /// The selection method when bandwidths are data-driven. A given
    /// bandwidth wins unless `--bw` asks for selection explicitly.
    fn method(&self, given: Option<f64>) -> Res<Option<SelectionMethod>> {
        match (self.bw, given) {
            (Some(Bw::Cv), _) => Ok(Some(SelectionMethod::Cv)),
            (Some(Bw::Gcv), _) => Ok(Some(SelectionMethod::Gcv)),
            (Some(Bw::Fixed), None) => Err(usage("--bw fixed needs the bandwidth flag")),
            (_, Some(_)) => Ok(None),
            (None, None) => Ok(Some(SelectionMethod::Cv)),
        }
    }

    fn read_data(&self) -> Res<SparseDataset> {
        Ok(SparseDataset::read_path(self.need(&self.input, "input")?, self.scheme())?)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Res<T> {
    let f = File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
}

fn write_json<T: Serialize>(path: Option<&Path>, v: &T) -> Res<()> {
    match path {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            serde_json::to_writer_pretty(&mut w, v)?;
            writeln!(w)?;
            w.flush()?;
        }
        None => {
            let out = std::io::stdout();
            let mut w = out.lock();
            serde_json::to_writer_pretty(&mut w, v)?;
            writeln!(w)?;
        }
    }
    Ok(())
}

fn output(path: Option<&Path>) -> Res<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout()),
    })
}

fn read_surface(path: &Path, mean: MeanCurve) -> Res<CovSurface> {
    let rec: CovSurfaceRecord = read_json(path)?;
    Ok(CovSurface::from_record(rec, mean)?)
}

fn simulate(o: &Opts) -> Res<()> {
    let spec = SimSpec::new(
        o.design()?,
        o.n.unwrap_or(100),
        o.m.unwrap_or(5),
        o.snr.unwrap_or(5.0),
        o.seed.unwrap_or(1),
    );
    let (data, truth) = spec.generate()?;
    let data = match o.scheme() {
        Some(s) => data.with_scheme(s),
        None => data,
    };
    match &o.output {
        Some(p) => data.write_path(p)?,
        None => data.write_jsonl(std::io::stdout().lock())?,
    }
    if let Some(p) = &o.truth {
        write_json(Some(p), &truth.grid(&uniform_grid(data.domain(), o.grid_len())))?;
    }
    Ok(())
}

fn mean_of(o: &Opts, data: &SparseDataset) -> Res<MeanCurve> {
    let grid = uniform_grid(data.domain(), o.grid_len());
    let h = match o.method(o.h_mu)? {
        None => o.h_mu.expect("fixed bandwidth present"),
        Some(m) => select_mean(data, &BandwidthGrid::default_for(data)?, m, &o.cv())?.selected,
    };
    Ok(fit_mean(data, h, &grid)?)
}

fn surface_of(o: &Opts, data: &SparseDataset, mean: &MeanCurve) -> Res<CovSurface> {
    let h = match o.method(o.h_cov)? {
        None => o.h_cov.expect("fixed bandwidth present"),
        Some(m) => select_cov(data, mean, &BandwidthGrid::default_for(data)?, m, &o.cv())?.selected,
    };
    Ok(fit_cov_surface(data, mean, h)?)
}

fn fit_mean_cmd(o: &Opts) -> Res<()> {
    let data = o.read_data()?;
    write_json(o.output.as_deref(), &mean_of(o, &data)?)
}

fn fit_cov_cmd(o: &Opts) -> Res<()> {
    let data = o.read_data()?;
    let mean: MeanCurve = read_json(o.need(&o.mean, "mean")?)?;
    let surface = surface_of(o, &data, &mean)?;
    for w in surface.warnings() {
        eprintln!("warning: {w}");
    }
    write_json(o.output.as_deref(), &surface.to_record())
}

/// K from `--k`, else from `--fraction`, else 3, capped at the spectrum size.
fn components(o: &Opts, surface: &CovSurface, mean: &MeanCurve) -> Res<EigenSystem> {
    let op = discretize_operator(surface)?;
    let all = op.grid.len() * op.d;
    let k = match (o.k, o.fraction) {
        (Some(k), _) => k,
        (None, Some(f)) => {
            if !(f > 0.0 && f <= 1.0) {
                return Err(usage("--fraction must be in (0, 1]"));
            }
            eigenpairs(&op, mean, all)?.k_for_fraction(f)
        }
        (None, None) => 3.min(all),
    };
    Ok(eigenpairs(&op, mean, k)?)
}

#[derive(Serialize)]
struct FpcaOut<'a> {
    sigma2: f64,
    explained: f64,
    #[serde(flatten)]
    eig: &'a EigenSystem,
}

fn fpca_cmd(o: &Opts) -> Res<()> {
    let data = o.read_data()?;
    let mean: MeanCurve = read_json(o.need(&o.mean, "mean")?)?;
    let surface = read_surface(o.need(&o.cov, "cov")?, mean.clone())?;
    let eig = components(o, &surface, &mean)?;
    let noise = noise_variance(&data, &mean, &surface)?;
    let scores = blup_scores(&data, &mean, &surface, &eig, &noise, eig.k())?;
    if let Some(p) = &o.scores {
        scores.write_csv(BufWriter::new(File::create(p)?))?;
    }
    write_json(
        o.output.as_deref(),
        &FpcaOut {
            sigma2: noise.sigma2,
            explained: eig.explained(eig.k()),
            eig: &eig,
        },
    )
}

fn evaluate_cmd(o: &Opts) -> Res<()> {
    let mean: MeanCurve = read_json(o.need(&o.mean, "mean")?)?;
    let surface = read_surface(o.need(&o.cov, "cov")?, mean)?;
    let truth: TruthGrid = read_json(o.need(&o.truth, "truth")?)?;
    let e = cov_errors(&surface, &truth.to_truth(), None)?;
    let mut w = output(o.output.as_deref())?;
    writeln!(w, "rMUIE={}", 100.0 * e.rmuie)?;
    writeln!(w, "rRMISE={}", 100.0 * e.rrmise)?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct PipelineReport {
    geometry: String,
    n: usize,
    h_mu: f64,
    h_cov: f64,
    sigma2: f64,
    grid: Vec<f64>,
    mean: MeanCurve,
    values: Vec<f64>,
    explained: f64,
    ids: Vec<String>,
    scores: Vec<Vec<f64>>,
}

fn report_cmd(o: &Opts) -> Res<()> {
    if o.input.is_some() {
        return pipeline_report(o);
    }
    let base = ExperimentConfig {
        design: o.design()?,
        n: o.n.unwrap_or(100),
        m: o.m.unwrap_or(5),
        reps: o.reps.unwrap_or(100),
        snr: o.snr.unwrap_or(5.0),
        seed: o.seed.unwrap_or(1),
        grid: o.grid_len(),
        bandwidth: match o.bw {
            Some(Bw::Fixed) => BandwidthPolicy::Fixed {
                h_mu: o.h_mu.ok_or_else(|| usage("--bw fixed needs --h-mu"))?,
                h_cov: o.h_cov.ok_or_else(|| usage("--bw fixed needs --h-cov"))?,
            },
            Some(Bw::Gcv) => BandwidthPolicy::Gcv,
            None if o.h_mu.is_some() && o.h_cov.is_some() => BandwidthPolicy::Fixed {
                h_mu: o.h_mu.unwrap(),
                h_cov: o.h_cov.unwrap(),
            },
            _ => BandwidthPolicy::Cv,
        },
        folds: o.folds.unwrap_or(CvOptions::default().folds),
        weights: o.scheme().unwrap_or_default(),
        timing: o.timing,
        ..ExperimentConfig::default()
    };
    let configs = if o.full_table { full_table(&base) } else { vec![base] };
    let mut reports: Vec<ExperimentReport> = Vec::new();
    for c in &configs {
        let r = run_experiment(c)?;
        eprintln!(
            "{} n={} m={}: rMUIE {:.2} ({:.2})  rRMISE {:.2} ({:.2})  [{} reps, {} failed]",
            c.design,
            c.n,
            c.m,
            r.rmuie.mean,
            r.rmuie.sd,
            r.rrmise.mean,
            r.rrmise.sd,
            r.reps.len(),
            r.failures.len()
        );
        reports.push(r);
    }
    write_rows(output(o.output.as_deref())?, &reports)?;
    Ok(())
}

fn pipeline_report(o: &Opts) -> Res<()> {
    let data = o.read_data()?;
    let mean = mean_of(o, &data)?;
    let surface = surface_of(o, &data, &mean)?;
    let noise = noise_variance(&data, &mean, &surface)?;
    let eig = components(o, &surface, &mean)?;
    let scores = blup_scores(&data, &mean, &surface, &eig, &noise, eig.k())?;
    let rep = PipelineReport {
        geometry: data.geometry().descriptor(),
        n: data.n(),
        h_mu: mean.bandwidth(),
        h_cov: surface.bandwidth(),
        sigma2: noise.sigma2,
        grid: mean.grid().to_vec(),
        values: eig.values.clone(),
        explained: eig.explained(eig.k()),
        ids: scores.ids.clone(),
        scores: scores.scores.row_iter().map(|r| r.iter().copied().collect()).collect(),
        mean,
    };
    write_json(o.output.as_deref(), &rep)
}

fn run(cli: Cli) -> Res<()> {
    match cli.command {
        Command::Simulate(o) => simulate(&o.merged()?),
        Command::FitMean(o) => fit_mean_cmd(&o.merged()?),
        Command::FitCov(o) => fit_cov_cmd(&o.merged()?),
        Command::Fpca(o) => fpca_cmd(&o.merged()?),
        Command::Evaluate(o) => evaluate_cmd(&o.merged()?),
        Command::Report(o) => report_cmd(&o.merged()?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
