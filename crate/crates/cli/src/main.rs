//! `surrogate`: analyze a trial, design a follow-up trial, run simulations.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use surrogate_core::analysis::AnalysisReport;
use surrogate_core::data::load_dataset;
use surrogate_core::power::{design_for_rho, solve_sample_size_ci, EffectSizeDraws};
use surrogate_core::simulate::{calibrate_t, population_truth, run_study, StudyOptions};
use surrogate_core::{
    analyze, AnalysisConfig, BandwidthRule, ColumnMap, DesignResult, Error, MissingPolicy, SimulationSetting,
};

const TRANSPORTABILITY: &str = "This design assumes transportability: the standardized effect sizes \
Δ/σ and Δ_g/σ_g estimated from the existing trial are assumed to hold in the future trial.";

#[derive(Parser)]
#[command(name = "surrogate", version, about = "Optimal surrogate transformations, PTE and relative power")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate ĝ, PTE and relative power from a trial CSV.
    Analyze(AnalyzeArgs),
    /// Sample size for a future trial testing on g(S).
    Design(DesignArgs),
    /// Replication study on a benchmark setting.
    Simulate(SimulateArgs),
    /// Threshold t at which a setting's population PTE hits a target.
    #[command(name = "calibrate-t")]
    CalibrateT(CalibrateArgs),
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long, default_value_t = 20_240_601)]
    seed: u64,
    /// Grid points for the kernel curves.
    #[arg(long, default_value_t = 512)]
    grid: usize,
    /// "scott" (undersmoothed reference rule) or a fixed positive bandwidth.
    #[arg(long, default_value = "scott")]
    bandwidth: String,
    /// Undersmoothing exponent.
    #[arg(long, default_value_t = 0.06)]
    c0: f64,
    /// Perturbation replicates.
    #[arg(long = "B", default_value_t = 500)]
    b: usize,
    /// Cross-validation folds.
    #[arg(long = "K", default_value_t = 2)]
    k: usize,
    /// Fraction trimmed from each end of each arm's surrogate range.
    #[arg(long, default_value_t = 0.0)]
    trim: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<AnalysisConfig, Error> {
        let bandwidth_rule = match self.bandwidth.as_str() {
            "scott" => BandwidthRule::ScottUndersmoothed,
            v => BandwidthRule::Fixed(
                v.parse()
                    .map_err(|_| Error::InvalidConfig(format!("bandwidth must be 'scott' or a number, got {v}")))?,
            ),
        };
        let cfg = AnalysisConfig {
            bandwidth_rule,
            undersmooth_exponent: self.c0,
            grid_points: self.grid,
            support_trim: self.trim,
            resample_count: self.b,
            cv_folds: self.k,
            seed: self.seed,
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Trial CSV with outcome, surrogate and arm columns.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "y")]
    col_y: String,
    #[arg(long, default_value = "s")]
    col_s: String,
    #[arg(long, default_value = "a")]
    col_a: String,
    /// Drop rows with missing values instead of failing.
    #[arg(long)]
    lenient: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',', default_value = "50,100,150")]
    n_bar: Vec<u64>,
    #[arg(long)]
    with_comparators: bool,
}

#[derive(Args)]
struct DesignArgs {
    /// Analysis report JSON from `analyze`; alternative to --data.
    #[arg(long, conflicts_with = "data")]
    report: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    common: Common,
    /// Reference sample size of the trial on Y.
    #[arg(long, default_value_t = 50)]
    n_bar: u64,
    /// Target power ratio.
    #[arg(long, conflicts_with = "kappa", required_unless_present = "kappa")]
    rho: Option<f64>,
    /// Required lower confidence bound of RP.
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 1_000_000)]
    max_n: u64,
}

#[derive(Args)]
struct SimulateArgs {
    /// Benchmark setting 1-5, or "custom" for the perfect-surrogate setting.
    #[arg(long)]
    setting: String,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Outcome threshold for settings 1-4.
    #[arg(long)]
    t: Option<f64>,
    #[arg(long, value_delimiter = ',', default_value = "50,100,150")]
    n_bar: Vec<u64>,
    /// Skip perturbation SEs (no ASE or CP columns).
    #[arg(long)]
    no_resample: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    setting: u8,
    /// Population PTE to reach.
    #[arg(long)]
    target: f64,
    #[arg(long, default_value_t = 0.2)]
    lo: f64,
    #[arg(long, default_value_t = 8.0)]
    hi: f64,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Malformed(format!("{}: {e}", path.display()))
}

fn load(args: &DataArgs) -> Result<surrogate_core::TrialDataset, Error> {
    let path = args.data.as_ref().ok_or_else(|| Error::InvalidConfig("--data is required".into()))?;
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let cols = ColumnMap { y: args.col_y.clone(), s: args.col_s.clone(), a: args.col_a.clone() };
    let policy = if args.lenient { MissingPolicy::Lenient } else { MissingPolicy::Strict };
    let loaded = load_dataset(BufReader::new(file), &cols, policy)?;
    if loaded.dropped_rows > 0 {
        eprintln!("dropped {} rows with missing values", loaded.dropped_rows);
    }
    Ok(loaded.dataset)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Error> {
    let mut f = File::create(path).map_err(|e| io_err(path, e))?;
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| io_err(path, e))?;
    writeln!(f).map_err(|e| io_err(path, e))
}

fn interval(r: &surrogate_core::ResampleReport) -> String {
    format!(
        "{:.4} (SE {:.4}; {:.0}% normal CI {:.4} to {:.4}; percentile {:.4} to {:.4})",
        r.point,
        r.se,
        100.0 * r.ci_normal.level,
        r.ci_normal.lo,
        r.ci_normal.hi.unwrap_or(f64::NAN),
        r.ci_percentile.lo,
        r.ci_percentile.hi.unwrap_or(f64::NAN)
    )
}

fn report_text(r: &AnalysisReport) -> String {
    let mut s = String::new();
    let e = &r.effects;
    s += &format!(
        "n = {} (arm 0: {}, arm 1: {}), bandwidth {:.4}\n",
        r.config.n, r.config.n0, r.config.n1, r.config.bandwidth
    );
    s += &format!(
        "transform: lambda {:.4}, c {}, K1 {:.4}, K2 {:.4}, D0 {:?}\n",
        r.transform.lambda,
        r.transform.c.map_or("-".into(), |c| format!("{c:.4}")),
        r.transform.k1,
        r.transform.k2,
        r.transform.partition.orientation
    );
    s += &format!("delta {:.4} (sigma {:.4}), delta_g {:.4} (sigma_g {:.4})\n", e.delta, e.sigma, e.delta_g, e.sigma_g);
    s += &format!("in-sample PTE {:.4}\n", e.pte_in_sample);
    s += &format!("PTE_CV {}\n", interval(&r.cross_validated.pte));
    for row in &r.cross_validated.rp {
        s += &format!("RP_CV({}) {}\n", row.n_bar, interval(&row.estimate));
    }
    let c = &r.diagnostics.conditions;
    s += &format!(
        "conditions: C1 {}, C2 {}\n",
        if c.c1_holds { "holds" } else { "fails" },
        if c.c2_holds { "holds" } else { "fails" }
    );
    s += &format!("reference gap delta_g - delta_L {:.3e}\n", r.diagnostics.reference.delta_l_gap);
    if let Some(cs) = &r.comparators {
        for c in cs {
            match (c.estimate, &c.error) {
                (Some(v), _) => s += &format!("{} {:.4}\n", c.name, v),
                (None, Some(err)) => s += &format!("{} failed: {}\n", c.name, err),
                _ => {}
            }
        }
    }
    for w in &r.warnings {
        s += &format!("warning: {w}\n");
    }
    s
}

#[derive(Serialize)]
struct DesignOutput {
    #[serde(flatten)]
    result: DesignResult,
    effect_size_y: f64,
    effect_size_g: f64,
    assumption: &'static str,
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<(), Error> {
    let cfg = a.common.config()?;
    let data = load(&a.data)?;
    let report = analyze(&data, &cfg, &a.n_bar, a.with_comparators)?;
    if let Some(p) = &a.common.out {
        write_json(p, &report)?;
    }
    print!("{}", report_text(&report));
    Ok(())
}

fn cmd_design(a: DesignArgs) -> Result<(), Error> {
    let cfg = a.common.config()?;
    let draws: EffectSizeDraws = match &a.report {
        Some(path) => {
            let f = File::open(path).map_err(|e| io_err(path, e))?;
            let r: AnalysisReport = serde_json::from_reader(BufReader::new(f)).map_err(|e| io_err(path, e))?;
            r.effect_size_draws
        }
        None => analyze(&load(&a.data)?, &cfg, &[a.n_bar], false)?.effect_size_draws,
    };
    let k = draws.point.len() as f64;
    let ey = draws.point.iter().map(|p| p.0).sum::<f64>() / k;
    let eg = draws.point.iter().map(|p| p.1).sum::<f64>() / k;
    let result = match (a.rho, a.kappa) {
        (Some(rho), _) => design_for_rho(eg, ey, a.n_bar, rho, cfg.critical_z)?,
        (None, Some(kappa)) => solve_sample_size_ci(&draws, a.n_bar, kappa, a.alpha, cfg.critical_z, a.max_n)?,
        (None, None) => return Err(Error::InvalidConfig("one of --rho or --kappa is required".into())),
    };
    let out = DesignOutput { result, effect_size_y: ey, effect_size_g: eg, assumption: TRANSPORTABILITY };
    if let Some(p) = &a.common.out {
        write_json(p, &out)?;
    }
    let r = &out.result;
    println!("n* = {} (reference n_bar = {})", r.n_star, r.n_bar);
    println!(
        "achieved {:.4} at n*, {} at n* - 1",
        r.achieved,
        r.achieved_previous.map_or("-".into(), |v| format!("{v:.4}"))
    );
    println!("{TRANSPORTABILITY}");
    Ok(())
}

fn parse_setting(id: &str, t: Option<f64>) -> Result<SimulationSetting, Error> {
    match id {
        "custom" => Ok(SimulationSetting::perfect_surrogate()),
        v => {
            let k: u8 = v
                .parse()
                .map_err(|_| Error::InvalidParameters(format!("unknown setting {v}; expected 1-5 or custom")))?;
            SimulationSetting::benchmark(k, t)
        }
    }
}

fn cmd_simulate(a: SimulateArgs) -> Result<(), Error> {
    let cfg = a.common.config()?;
    let setting = parse_setting(&a.setting, a.t)?;
    let truth = population_truth(&setting, &a.n_bar, cfg.critical_z)?;
    let opts = StudyOptions { n_bars: a.n_bar.clone(), resample: !a.no_resample, ..Default::default() };
    let summary = run_study(&setting, a.reps, a.n, &cfg, &truth, &opts)?;
    let md = summary.to_markdown();
    if let Some(p) = &a.common.out {
        if p.extension().is_some_and(|e| e == "md") {
            std::fs::write(p, &md).map_err(|e| io_err(p, e))?;
        } else {
            write_json(p, &summary)?;
        }
    }
    print!("{md}");
    Ok(())
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<(), Error> {
    let setting = SimulationSetting::benchmark(a.setting, None)?;
    let t = calibrate_t(&setting, a.target, a.lo, a.hi)?;
    let truth = population_truth(&setting.with_t(t), &[50, 100, 150], 1.96)?;
    println!("t = {t:.6}");
    println!("PTE = {:.6}, delta = {:.6}", truth.pte, truth.delta);
    for (nb, rp) in truth.rp {
        println!("RP({nb}) = {rp:.4}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Analyze(a) => cmd_analyze(a),
        Command::Design(a) => cmd_design(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::CalibrateT(a) => cmd_calibrate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}
