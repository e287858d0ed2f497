//! Subcommand bodies.

use std::path::{Path, PathBuf};

use serde::Serialize;

use pairlink_core::coincidence::{accidentals_from_rates, delay_scan, measure_coincidences, CoincidenceResult};
use pairlink_core::config::{canonical_hash, AnalysisConfig, RunConfig};
use pairlink_core::pipeline::{
    run, run_chsh_experiment, simulate_nodes, simulate_power_sweep, simulate_spectrum, sync_streams, Manifest,
};
use pairlink_core::ptag::{read_tag_file, write_tag_file};
use pairlink_core::rate::{fit_rate_curve, predict_car, FitOptions, PowerSweep, RateFit, RateKind, Weighting};
use pairlink_core::source::AnalyzerSetting;
use pairlink_core::sync::{find_initial_offset, AllanSummary, SyncError, SyncResult};
use pairlink_core::{Error, TagStream};

use crate::output::{code, ensure_dir, write_json, write_rows, write_with, CliError, CliResult, Written};
use crate::{CoincideArgs, Common, Format, RatefitArgs, SimulateArgs, SyncArgs};

/// Sizes the global worker pool from `PAIRLINK_THREADS`.
pub fn init_threads() -> CliResult {
    let Ok(raw) = std::env::var("PAIRLINK_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::new(code::CONFIG, format!("PAIRLINK_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::new(code::OTHER, e.to_string()))
}

/// Effective settings of one invocation after command-line overrides.
struct Context {
    cfg: Option<RunConfig>,
    analysis: AnalysisConfig,
    out: PathBuf,
    config_hash: String,
}

impl Context {
    fn new(c: &Common, duration: Option<f64>) -> CliResult<Self> {
        let cfg = match &c.config {
            Some(path) => {
                let mut cfg = RunConfig::load(path).map_err(Error::from)?;
                if let Some(seed) = c.seed {
                    cfg.seed = seed;
                }
                if let Some(w) = c.window_ps {
                    cfg.analysis.window_ps = w;
                }
                if let Some(d) = duration {
                    cfg.duration_s = d;
                }
                cfg.validate().map_err(Error::from)?;
                Some(cfg)
            }
            None => None,
        };
        let analysis = match &cfg {
            Some(cfg) => cfg.analysis.clone(),
            None => {
                let mut a = AnalysisConfig::default();
                if let Some(w) = c.window_ps {
                    if w == 0 {
                        return Err(CliError::new(code::CONFIG, "--window-ps must be positive"));
                    }
                    a.window_ps = w;
                }
                a
            }
        };
        let config_hash = match &cfg {
            Some(cfg) => cfg.hash(),
            None => canonical_hash(&analysis),
        };
        let out = c
            .out
            .clone()
            .or_else(|| cfg.as_ref().map(|c| c.output_dir.clone()))
            .unwrap_or_else(|| PathBuf::from("."));
        ensure_dir(&out)?;
        Ok(Context { cfg, analysis, out, config_hash })
    }

    fn require_config(&self, command: &str) -> CliResult<&RunConfig> {
        self.cfg
            .as_ref()
            .ok_or_else(|| CliError::new(code::CONFIG, format!("`{command}` needs --config")))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn read_stream(path: &Path) -> CliResult<TagStream> {
    read_tag_file(path).map_err(|e| CliError::new(code::IO, format!("{}: {e}", path.display())))
}

fn first_second(s: &TagStream) -> &[u64] {
    let end = s.times().partition_point(|&t| t < s.pps_period_ps());
    &s.times()[..end]
}

#[derive(Serialize)]
struct TruthRow {
    second: usize,
    alice_clock_ps: f64,
    bob_clock_ps: f64,
    expected_delay_ps: f64,
}

const TRUTH_HEADER: [&str; 4] = ["second", "alice_clock_ps", "bob_clock_ps", "expected_delay_ps"];

pub fn simulate(args: &SimulateArgs) -> CliResult {
    let ctx = Context::new(&args.common, args.duration)?;
    let cfg = ctx.require_config("simulate")?;
    let [a_deg, b_deg] = cfg.analysis.analyzer_deg;
    let acq = simulate_nodes(cfg, AnalyzerSetting::from_degrees(a_deg, b_deg), cfg.duration_s, run::MAIN)?;
    let mut written = Written::new();
    for (name, s) in [("alice.ptag", &acq.alice), ("bob.ptag", &acq.bob)] {
        let p = written.push(ctx.path(name));
        write_tag_file(s, &p).map_err(Error::from)?;
    }
    let manifest = Manifest::new(cfg, &acq, cfg.analysis.analyzer_deg, cfg.duration_s);
    write_json(&written.push(ctx.path("manifest.json")), &manifest)?;
    if args.common.format == Format::Csv {
        let rows: Vec<TruthRow> = (0..acq.truth.alice_clock_ps.len())
            .map(|i| TruthRow {
                second: i,
                alice_clock_ps: acq.truth.alice_clock_ps[i],
                bob_clock_ps: acq.truth.bob_clock_ps[i],
                expected_delay_ps: acq.truth.expected_delay_ps(i),
            })
            .collect();
        write_rows(&written.push(ctx.path("truth.csv")), &TRUTH_HEADER, &rows)?;
    }
    println!("config_hash {}", ctx.config_hash);
    println!("alice tags {}, bob tags {}", acq.alice.len(), acq.bob.len());
    println!("injected delay {} ps", acq.truth.injected_delay_ps);
    written.report();
    Ok(())
}

#[derive(Serialize)]
struct SyncSummary<'a> {
    config_hash: &'a str,
    initial_delay_ps: f64,
    initial_fwhm_ps: f64,
    coarse_peak_ps: f64,
    dropped_before_epoch: usize,
    include_flagged: bool,
    uncorrected: AllanSummary,
    corrected: AllanSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    series: Option<Series<'a>>,
}

#[derive(Serialize)]
struct Series<'a> {
    uncorrected: &'a SyncResult,
    corrected: &'a SyncResult,
}

fn fmt_ns(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4} ns"))
}

pub fn sync(args: &SyncArgs) -> CliResult {
    let ctx = Context::new(&args.common, None)?;
    let alice = read_stream(&args.alice)?;
    let bob = read_stream(&args.bob)?;
    let report = match sync_streams(&ctx.analysis.sync, &alice, &bob) {
        Ok(r) => r,
        Err(Error::Sync(SyncError::NoPeak { max, baseline, histogram })) => {
            let p = ctx.path("no_peak_histogram.csv");
            write_with(&p, |w| histogram.write_csv(w))?;
            eprintln!("initial scan histogram written to {}", p.display());
            return Err(Error::Sync(SyncError::NoPeak { max, baseline, histogram }).into());
        }
        Err(e) => return Err(e.into()),
    };
    let mut written = Written::new();
    if args.common.format == Format::Csv {
        write_with(&written.push(ctx.path("sync.csv")), |w| report.uncorrected.write_csv(w))?;
        write_with(&written.push(ctx.path("sync_corrected.csv")), |w| report.corrected.write_csv(w))?;
    }
    let summary = SyncSummary {
        config_hash: &ctx.config_hash,
        initial_delay_ps: report.initial.delay_ps,
        initial_fwhm_ps: report.initial.fit.fwhm_ps,
        coarse_peak_ps: report.initial.coarse_peak_ps,
        dropped_before_epoch: report.dropped_before_epoch,
        include_flagged: ctx.analysis.include_flagged,
        uncorrected: report.uncorrected.allan_summary(),
        corrected: report.corrected.allan_summary(),
        series: (args.common.format == Format::Json)
            .then_some(Series { uncorrected: &report.uncorrected, corrected: &report.corrected }),
    };
    write_json(&written.push(ctx.path("sync.json")), &summary)?;
    if args.write_corrected {
        let p = written.push(ctx.path("bob_corrected.ptag"));
        write_tag_file(&report.corrected_bob, &p).map_err(Error::from)?;
    }

    let pick = |s: &AllanSummary| {
        if ctx.analysis.include_flagged {
            s.allan_dev_inclusive_ns
        } else {
            s.allan_dev_ns
        }
    };
    println!("config_hash {}", ctx.config_hash);
    println!(
        "initial offset {:.1} ps (FWHM {:.1} ps)",
        report.initial.delay_ps, report.initial.fit.fwhm_ps
    );
    println!(
        "blocks {} ({} flagged), dropped before epoch {}",
        report.uncorrected.len(),
        report.uncorrected.n_flagged(),
        report.dropped_before_epoch
    );
    println!("Allan deviation before correction {}", fmt_ns(pick(&summary.uncorrected)));
    println!("Allan deviation after correction  {}", fmt_ns(pick(&summary.corrected)));
    written.report();
    Ok(())
}

#[derive(Serialize)]
struct CoincidenceRow<'a> {
    delay_ps: i64,
    delay_source: &'static str,
    window_ps: u64,
    cc: u64,
    accidentals: f64,
    accidentals_rate_product: f64,
    car: Option<f64>,
    car_sigma: Option<f64>,
    config_hash: &'a str,
}

impl<'a> CoincidenceRow<'a> {
    fn new(r: &CoincidenceResult, product: f64, source: &'static str, n_offsets: usize, hash: &'a str) -> Self {
        CoincidenceRow {
            delay_ps: r.delay_ps,
            delay_source: source,
            window_ps: r.window_ps,
            cc: r.cc,
            accidentals: r.accidentals,
            accidentals_rate_product: product,
            car: r.car,
            car_sigma: r.car_sigma(n_offsets),
            config_hash: hash,
        }
    }
}

const COINCIDENCE_HEADER: [&str; 9] = [
    "delay_ps",
    "delay_source",
    "window_ps",
    "cc",
    "accidentals",
    "accidentals_rate_product",
    "car",
    "car_sigma",
    "config_hash",
];

pub fn coincide(args: &CoincideArgs) -> CliResult {
    let ctx = Context::new(&args.common, None)?;
    let alice = read_stream(&args.alice)?;
    let bob = read_stream(&args.bob)?;
    let (delay, source) = match args.delay_ps {
        Some(d) => (d, "given"),
        None => {
            let res = alice.resolution_ps();
            let init = find_initial_offset(first_second(&alice), first_second(&bob), res, &ctx.analysis.sync)
                .map_err(Error::from)?;
            let res = res as f64;
            (((init.delay_ps / res).round() * res) as i64, "initial_offset")
        }
    };
    let n = ctx.analysis.accidental_offsets;
    let r = measure_coincidences(alice.times(), bob.times(), delay, ctx.analysis.window_ps, n).map_err(Error::from)?;
    let product = accidentals_from_rates(alice.times(), bob.times(), r.window_ps);
    let row = CoincidenceRow::new(&r, product, source, n, &ctx.config_hash);

    let mut written = Written::new();
    match args.common.format {
        Format::Csv => write_rows(&written.push(ctx.path("coincidences.csv")), &COINCIDENCE_HEADER, &[&row])?,
        Format::Json => write_json(&written.push(ctx.path("coincidences.json")), &row)?,
    }
    if let Some(half) = args.scan_ps {
        let bin = args.bin_ps.unwrap_or(alice.resolution_ps());
        let h = delay_scan(alice.times(), bob.times(), delay - half as i64, delay + half as i64, bin).map_err(Error::from)?;
        write_with(&written.push(ctx.path("delay_histogram.csv")), |w| h.write_csv(w))?;
    }
    println!("config_hash {}", ctx.config_hash);
    println!("delay {delay} ps ({source}), window {} ps", r.window_ps);
    println!("coincidences {}, accidentals {:.3} (rate product {product:.3})", r.cc, r.accidentals);
    match (r.car, r.car_sigma(n)) {
        (Some(car), Some(s)) => println!("CAR {car:.2} ± {s:.2}"),
        _ => println!("CAR n/a (no accidentals observed)"),
    }
    written.report();
    Ok(())
}

#[derive(Serialize)]
struct SettingRow<'a> {
    theta_a_deg: f64,
    theta_b_deg: f64,
    cc_pp: u64,
    cc_mm: u64,
    cc_pm: u64,
    cc_mp: u64,
    e: f64,
    sigma: f64,
    config_hash: &'a str,
}

const SETTING_HEADER: [&str; 9] =
    ["theta_a_deg", "theta_b_deg", "cc_pp", "cc_mm", "cc_pm", "cc_mp", "e", "sigma", "config_hash"];

pub fn chsh(c: &Common) -> CliResult {
    let ctx = Context::new(c, None)?;
    let cfg = ctx.require_config("chsh")?;
    let exp = run_chsh_experiment(cfg)?;
    let mut written = Written::new();
    write_json(&written.push(ctx.path("chsh.json")), &exp)?;
    if c.format == Format::Csv {
        let rows: Vec<SettingRow> = exp
            .settings
            .iter()
            .map(|s| SettingRow {
                theta_a_deg: s.theta_a_deg,
                theta_b_deg: s.theta_b_deg,
                cc_pp: s.counts.cc_pp,
                cc_mm: s.counts.cc_mm,
                cc_pm: s.counts.cc_pm,
                cc_mp: s.counts.cc_mp,
                e: s.expectation.value,
                sigma: s.expectation.sigma,
                config_hash: &exp.config_hash,
            })
            .collect();
        write_rows(&written.push(ctx.path("chsh.csv")), &SETTING_HEADER, &rows)?;
    }
    println!("config_hash {}", exp.config_hash);
    for s in &exp.settings {
        println!(
            "E({:>5.1}°, {:>5.1}°) = {:+.4} ± {:.4}",
            s.theta_a_deg, s.theta_b_deg, s.expectation.value, s.expectation.sigma
        );
    }
    let r = &exp.result;
    println!("S = {:.4} ± {:.4} ({:.1} σ above 2)", r.s, r.sigma_s, r.violation_sigmas);
    written.report();
    Ok(())
}

#[derive(Serialize)]
struct RateReport<'a> {
    config_hash: &'a str,
    options: FitOptions,
    window_ps: u64,
    fits: Vec<RateFit>,
    car_prediction: Vec<pairlink_core::rate::CarPrediction>,
}

#[derive(Serialize)]
struct FitRow<'a> {
    which: Option<RateKind>,
    a: f64,
    b: f64,
    c: f64,
    se_a: Option<f64>,
    se_b: Option<f64>,
    se_c: Option<f64>,
    relative_residual: f64,
    n_points: usize,
    saturation_suspected: bool,
    config_hash: &'a str,
}

const FIT_HEADER: [&str; 11] = [
    "which",
    "a",
    "b",
    "c",
    "se_a",
    "se_b",
    "se_c",
    "relative_residual",
    "n_points",
    "saturation_suspected",
    "config_hash",
];

fn fit_and_write(sweep: &PowerSweep, opts: FitOptions, ctx: &Context, format: Format, written: &mut Written) -> CliResult {
    let mut fits = Vec::new();
    for kind in sweep.kinds() {
        fits.push(fit_rate_curve(&sweep.of_kind(kind), &opts).map_err(Error::from)?);
    }
    let of = |k| fits.iter().find(|f: &&RateFit| f.which == Some(k));
    let mut car_prediction = Vec::new();
    if let (Some(s), Some(i), Some(cc)) = (of(RateKind::SinglesS), of(RateKind::SinglesI), of(RateKind::Coincidences)) {
        let mut powers: Vec<f64> = sweep.points.iter().map(|p| p.power_mw).collect();
        powers.sort_by(f64::total_cmp);
        powers.dedup();
        car_prediction = powers
            .iter()
            .map(|&p| predict_car(p, s, i, cc, ctx.analysis.window_ps as f64))
            .collect();
    }
    let report = RateReport {
        config_hash: &ctx.config_hash,
        options: opts,
        window_ps: ctx.analysis.window_ps,
        fits,
        car_prediction,
    };
    write_json(&written.push(ctx.path("ratefit.json")), &report)?;
    if format == Format::Csv {
        let rows: Vec<FitRow> = report
            .fits
            .iter()
            .map(|f| FitRow {
                which: f.which,
                a: f.a,
                b: f.b,
                c: f.c,
                se_a: f.std_errors.map(|e| e[0]),
                se_b: f.std_errors.map(|e| e[1]),
                se_c: f.std_errors.map(|e| e[2]),
                relative_residual: f.relative_residual,
                n_points: f.n_points,
                saturation_suspected: f.saturation.suspected,
                config_hash: &ctx.config_hash,
            })
            .collect();
        write_rows(&written.push(ctx.path("ratefit.csv")), &FIT_HEADER, &rows)?;
    }
    println!("config_hash {}", ctx.config_hash);
    for f in &report.fits {
        let name = f.which.map_or("rate", |k| match k {
            RateKind::SinglesS => "singles_s",
            RateKind::SinglesI => "singles_i",
            RateKind::Coincidences => "coincidences",
        });
        print!("{name}: a = {:.6e}, b = {:.6e}, c = {:.6e}", f.a, f.b, f.c);
        if let Some(se) = f.std_errors {
            print!(" (± {:.3e}, {:.3e}, {:.3e})", se[0], se[1], se[2]);
        }
        println!();
        if !f.negative.is_empty() {
            println!("  warning: negative coefficients {}", f.negative.join(", "));
        }
        if f.saturation.suspected {
            println!(
                "  warning: high-power rates fall {:.1}% below the low-power trend",
                -100.0 * f.saturation.mean_relative_residual
            );
        }
    }
    Ok(())
}

fn fit_options(ctx: &Context, poisson: bool, non_negative: bool) -> FitOptions {
    let base = ctx.cfg.as_ref().map(|c| (c.sweep.weighting, c.sweep.non_negative));
    let (w, nn) = base.unwrap_or_default();
    FitOptions {
        weighting: if poisson { Weighting::Poisson } else { w },
        non_negative: non_negative || nn,
    }
}

pub fn ratefit(args: &RatefitArgs) -> CliResult {
    let mut ctx = Context::new(&args.common, None)?;
    let opts = fit_options(&ctx, args.poisson, args.non_negative);
    if ctx.cfg.is_none() {
        ctx.config_hash = canonical_hash(&(opts, ctx.analysis.window_ps));
    }
    let file = std::fs::File::open(&args.sweep)
        .map_err(|e| CliError::new(code::IO, format!("cannot read {}: {e}", args.sweep.display())))?;
    let sweep = PowerSweep::read_csv(file).map_err(Error::from)?;
    let mut written = Written::new();
    fit_and_write(&sweep, opts, &ctx, args.common.format, &mut written)?;
    written.report();
    Ok(())
}

pub fn sweep(c: &Common) -> CliResult {
    let ctx = Context::new(c, None)?;
    let cfg = ctx.require_config("sweep")?;
    let sweep = simulate_power_sweep(cfg)?;
    let mut written = Written::new();
    write_with(&written.push(ctx.path("sweep.csv")), |w| sweep.write_csv(w))?;
    fit_and_write(&sweep, fit_options(&ctx, false, false), &ctx, c.format, &mut written)?;
    written.report();
    Ok(())
}

#[derive(Serialize)]
struct SpectrumReport<'a> {
    config_hash: &'a str,
    car_follows_noise: bool,
    car_is_flat: bool,
    #[serde(flatten)]
    table: &'a pairlink_core::rate::SpectrumTable,
}

pub fn spectrum(c: &Common) -> CliResult {
    let ctx = Context::new(c, None)?;
    let cfg = ctx.require_config("spectrum")?;
    let table = simulate_spectrum(cfg)?;
    let mut written = Written::new();
    let report = SpectrumReport {
        config_hash: &ctx.config_hash,
        car_follows_noise: table.car_follows_noise(),
        car_is_flat: table.car_is_flat(),
        table: &table,
    };
    write_json(&written.push(ctx.path("spectrum.json")), &report)?;
    if c.format == Format::Csv {
        write_with(&written.push(ctx.path("spectrum.csv")), |w| table.write_csv(w))?;
    }
    println!("config_hash {}", ctx.config_hash);
    println!("{:>5} {:>9} {:>12} {:>10}", "pair", "det_GHz", "CC_Hz", "CAR");
    for r in &table.rows {
        println!("{:>5} {:>9.0} {:>12.1} {:>10.2}", r.pair_index, r.detuning_ghz, r.cc_hz, r.car);
    }
    println!(
        "CAR follows noise: {}, CAR flat: {}",
        report.car_follows_noise, report.car_is_flat
    );
    written.report();
    Ok(())
}
