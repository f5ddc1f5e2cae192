//! `skydaq` command-line front end.
//!
//! Data goes to standard output and diagnostics to standard error. Exit
//! codes: 0 success, 1 validation findings, 2 usage error, 3 processing error.

use std::error::Error;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use skydaq::dataset::{
    interpolate_weather, read_csv_stream, read_image, read_timestamp_column, validate_day,
    write_csv, write_frame, PyranometerRecord, WeatherRecord,
};
use skydaq::denoise::{denoise, Centering, FilterConfig};
use skydaq::fusion::{
    regularize, regularized_grayscale, ExposureSet, FusionConfig, FusionPlan, EXPOSURES,
};
use skydaq::sim::{run_session, SimConfig};
use skydaq::solar::{
    session_window_for_date, solar_noon_hours, solar_position, sun_position_table,
    sunrise_sunset, GeoLocation, WindowPolicy,
};
use skydaq::{Datelike, Frame, NaiveDate};

#[derive(Debug, Parser)]
#[command(name = "skydaq", version, about = "Sky imaging station processing tools")]
#[command(args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sun angles at one instant.
    #[command(allow_negative_numbers = true)]
    Sunpos {
        latitude: f64,
        longitude: f64,
        /// Hours from GMT, e.g. -7.
        gmt_offset: f64,
        /// Unix seconds.
        unix_time: f64,
    },
    /// Sunrise, sunset and both session windows for a local date.
    Window {
        date: NaiveDate,
        #[command(flatten)]
        site: SiteArgs,
    },
    /// Filter and average every PNG in a burst directory.
    Denoise {
        dir: PathBuf,
        /// Output PNG; 16-bit, rounded mean at the input scale.
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        filter: FilterArgs,
    },
    /// Fuse four exposures, shortest first, into one 16-bit frame.
    Fuse {
        #[arg(num_args = EXPOSURES, required = true)]
        inputs: Vec<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        fusion: FusionArgs,
    },
    /// Sun position CSV for the timestamps of a pyranometer CSV.
    SunposTable {
        pyranometer: PathBuf,
        #[command(flatten)]
        site: SiteArgs,
    },
    /// Resample a raw weather CSV at the timestamps of another CSV.
    InterpWeather { raw: PathBuf, targets: PathBuf },
    /// Check one day of an archive.
    Validate { root: PathBuf, date: NaiveDate },
    /// Simulate a full day from a config file.
    Simulate {
        config: PathBuf,
        /// Archive root to write into.
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Debug, Args)]
#[command(next_help_heading = "Site")]
struct SiteArgs {
    #[arg(long, default_value_t = GeoLocation::ALBUQUERQUE.latitude_deg, allow_negative_numbers = true)]
    lat: f64,
    #[arg(long, default_value_t = GeoLocation::ALBUQUERQUE.longitude_deg, allow_negative_numbers = true)]
    lon: f64,
    #[arg(long, default_value_t = GeoLocation::ALBUQUERQUE.gmt_offset_hours, allow_negative_numbers = true)]
    gmt_offset: f64,
}

impl SiteArgs {
    fn location(&self) -> Result<GeoLocation, CliError> {
        GeoLocation::new(self.lat, self.lon, self.gmt_offset).map_err(|e| CliError::Usage(e.to_string()))
    }
}

#[derive(Debug, Args)]
#[command(next_help_heading = "Filter")]
struct FilterArgs {
    /// per_frame or ensemble_mean.
    #[arg(long, default_value = "per_frame")]
    centering: Centering,
    #[arg(long, default_value_t = FilterConfig::default().defect_threshold)]
    defect_threshold: f64,
    #[arg(long, default_value_t = FilterConfig::default().duplicate_tol)]
    duplicate_tol: f64,
}

impl FilterArgs {
    fn config(&self) -> FilterConfig {
        FilterConfig {
            duplicate_tol: self.duplicate_tol,
            defect_threshold: self.defect_threshold,
            centering: self.centering,
        }
    }
}

#[derive(Debug, Args)]
#[command(next_help_heading = "Fusion")]
struct FusionArgs {
    /// Region radii in pixels, comma separated, shortest exposure first.
    #[arg(long, value_delimiter = ',', num_args = EXPOSURES)]
    radii: Option<Vec<f64>>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    regularizer: Option<f64>,
}

impl FusionArgs {
    fn config(&self) -> FusionConfig {
        let mut cfg = FusionConfig::default();
        if let Some(r) = &self.radii {
            cfg.radii_px.copy_from_slice(r);
        }
        if let Some(s) = self.sigma {
            cfg.gaussian_sigma = s;
        }
        if let Some(k) = self.kernel {
            cfg.kernel_size = k;
        }
        if let Some(l) = self.regularizer {
            cfg.regularizer = l;
        }
        cfg
    }
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Processing(Box<dyn Error>),
}

impl<E: Error + 'static> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Processing(Box::new(e))
    }
}

type Outcome = Result<ExitCode, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Processing(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Sunpos {
            latitude,
            longitude,
            gmt_offset,
            unix_time,
        } => sunpos(latitude, longitude, gmt_offset, unix_time),
        Command::Window { date, site } => window(date, &site.location()?),
        Command::Denoise { dir, output, filter } => denoise_dir(&dir, &output, &filter.config()),
        Command::Fuse {
            inputs,
            output,
            fusion,
        } => fuse(&inputs, &output, fusion.config()),
        Command::SunposTable { pyranometer, site } => sunpos_table(&pyranometer, &site.location()?),
        Command::InterpWeather { raw, targets } => interp_weather(&raw, &targets),
        Command::Validate { root, date } => validate(&root, date),
        Command::Simulate { config, output } => simulate(&config, &output),
    }
}

fn sunpos(lat: f64, lon: f64, offset: f64, t: f64) -> Outcome {
    let loc = GeoLocation::new(lat, lon, offset).map_err(|e| CliError::Usage(e.to_string()))?;
    let a = solar_position(&loc, t)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "elevation_deg {}", a.elevation_deg)?;
    writeln!(out, "azimuth_deg {}", a.azimuth_deg)?;
    writeln!(out, "zenith_deg {}", a.zenith_deg)?;
    writeln!(out, "declination_deg {}", a.declination_deg)?;
    Ok(ExitCode::SUCCESS)
}

fn window(date: NaiveDate, loc: &GeoLocation) -> Outcome {
    let day = date.ordinal();
    let (sr, ss) = sunrise_sunset(loc, day)?;
    let noon = solar_noon_hours(loc, day)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "date {date}")?;
    writeln!(out, "sunrise_h {sr}")?;
    writeln!(out, "sunset_h {ss}")?;
    writeln!(out, "solar_noon_h {noon}")?;
    for policy in [WindowPolicy::Offset1h, WindowPolicy::Elevation15Deg] {
        let w = session_window_for_date(loc, date, policy)?;
        let (a, b) = w.unix_bounds(loc, date);
        writeln!(
            out,
            "{} start_h={} end_h={} start_unix={a} end_unix={b}",
            policy.name(),
            w.start_hours,
            w.end_hours
        )?;
    }
    Ok(ExitCode::SUCCESS)
}

fn denoise_dir(dir: &Path, output: &Path, cfg: &FilterConfig) -> Outcome {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map_or(false, |x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Usage(format!("no PNG files in {}", dir.display())));
    }
    let frames = paths.iter().map(|p| read_image(p)).collect::<Result<Vec<_>, _>>()?;
    let d = denoise(&frames, cfg)?;
    write_frame(output, &d.frame.quantized(16))?;
    let names = |idx: &[usize]| -> String {
        idx.iter()
            .map(|&i| paths[i].file_name().unwrap_or_default().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join(",")
    };
    let mut out = std::io::stdout().lock();
    writeln!(out, "frames {}", frames.len())?;
    writeln!(out, "kept {}", names(&d.kept))?;
    writeln!(out, "duplicates {}", names(&d.duplicates))?;
    writeln!(out, "defective {}", names(&d.defective))?;
    writeln!(out, "output {}", output.display())?;
    Ok(ExitCode::SUCCESS)
}

fn fuse(inputs: &[PathBuf], output: &Path, cfg: FusionConfig) -> Outcome {
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let mut gray = Vec::with_capacity(EXPOSURES);
    for p in inputs {
        let f = read_image(p)?;
        let g = match f.channels() {
            3 => regularized_grayscale(&f, cfg.regularizer, cfg.luma_weights)?,
            _ => regularize(&f, cfg.regularizer)?,
        };
        gray.push(g);
    }
    let frames: [Frame; EXPOSURES] = gray.try_into().expect("clap enforces four inputs");
    let instant = frames[0].timestamp;
    let set = ExposureSet::new(frames, cfg.exposure_times_ms, instant)?;
    let plan = FusionPlan::new(&cfg, set.size())?;
    let fused = plan.fuse(&set)?;
    write_frame(output, &fused.frame)?;
    if fused.saturation_warning() {
        eprintln!(
            "warning: {:.2}% of pixels clamped at the output ceiling",
            100.0 * fused.clamped_fraction
        );
    }
    let mut out = std::io::stdout().lock();
    let alphas: Vec<String> = fused.weights.alphas.iter().map(f64::to_string).collect();
    writeln!(out, "alphas {}", alphas.join(","))?;
    writeln!(out, "clamped_fraction {}", fused.clamped_fraction)?;
    writeln!(out, "output {}", output.display())?;
    Ok(ExitCode::SUCCESS)
}

fn sunpos_table(path: &Path, loc: &GeoLocation) -> Outcome {
    let records: Vec<PyranometerRecord> = read_csv_stream(path)?;
    let times: Vec<f64> = records.iter().map(|r| r.unix_time).collect();
    let table = sun_position_table(&times, loc)?;
    for s in &table.skipped {
        eprintln!("skipped {}: {}", s.unix_time, s.reason);
    }
    write_csv(&table.records, &mut std::io::stdout().lock())?;
    Ok(ExitCode::SUCCESS)
}

fn interp_weather(raw: &Path, targets: &Path) -> Outcome {
    let raw: Vec<WeatherRecord> = read_csv_stream(raw)?;
    let times = read_timestamp_column(targets)?;
    let out = interpolate_weather(&raw, &times)?;
    write_csv(&out, &mut std::io::stdout().lock())?;
    Ok(ExitCode::SUCCESS)
}

fn validate(root: &Path, date: NaiveDate) -> Outcome {
    let report = validate_day(root, date);
    print!("{report}");
    if report.is_clean() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("{} violation(s)", report.violations.len());
        Ok(ExitCode::from(1))
    }
}

fn simulate(config: &Path, output: &Path) -> Outcome {
    let cfg = SimConfig::read(config)?;
    let s = run_session(&cfg, output)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "date {}", s.date)?;
    writeln!(out, "window {} {}", s.window.0, s.window.1)?;
    writeln!(out, "captures {}", s.captures)?;
    writeln!(out, "visible_written {}", s.visible_written)?;
    writeln!(out, "infrared_written {}", s.infrared_written)?;
    writeln!(out, "skipped {}", s.skipped.len())?;
    writeln!(out, "mean_visible_survivors {}", s.mean_visible_survivors)?;
    writeln!(out, "mean_infrared_survivors {}", s.mean_infrared_survivors)?;
    writeln!(out, "saturation_warnings {}", s.saturation_warnings)?;
    writeln!(out, "pyranometer_records {}", s.pyranometer_records)?;
    for k in &s.skipped {
        eprintln!("skipped {} {}: {}", k.unix_time, k.stream, k.reason);
    }
    Ok(ExitCode::SUCCESS)
}
