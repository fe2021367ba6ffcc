use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use fconv::bases::verify_remark1;
use fconv::data::{eval_crops, train_crops};
use fconv::equivariance::{scaling_experiment, ScalingConfig};
use fconv::experiment::{compare_stacks, train_and_measure, AngleSpec, Measurement};
use fconv::io::{coefficients_csv, encode_pgm_symmetric, filter_csv, header_line, read_image, sci, tile, CsvTable, FitMeta};
use fconv::parametrize::{morlet_filter, MorletParams, RidgeFitter};
use fconv::trials::{run_fit_trials, TargetKind, TrialConfig};
use fconv::{BasisKind, BasisSet, Error, GridSpec, NetworkConfig, NetworkKind, TrainConfig};

#[derive(Parser)]
#[command(name = "fconv", version, about = "Rotation-equivariant convolution experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Basis image sheets and the sign-flip equivalence report.
    Bases(BasesArgs),
    /// Morlet and random-filter fitting trials.
    Fit(FitArgs),
    /// Equivariance of random equivariant vs plain stacks.
    Equiv(EquivArgs),
    /// Layer equivariance error against the theoretical bound as h shrinks.
    Scaling(ScalingArgs),
    /// Auto-encoder training with equivariance before and after.
    Train(TrainArgs),
}

#[derive(Args)]
struct Common {
    /// Run seed.
    #[arg(long, env = "FCONV_SEED", default_value_t = 2021)]
    seed: u64,
    /// Existing output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct BasesArgs {
    #[arg(long, default_value_t = 11)]
    p: usize,
    #[arg(long, default_value_t = 1.0)]
    h: f64,
    #[arg(long, default_value_t = 8)]
    t: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, default_value_t = 11)]
    p: usize,
    #[arg(long, default_value_t = 0.2)]
    h: f64,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Ridge regularization.
    #[arg(long, default_value_t = fconv::parametrize::DEFAULT_LAMBDA)]
    lambda: f64,
    /// Standard deviation of the Morlet translation.
    #[arg(long, default_value_t = 0.1)]
    translation_std: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct NetArgs {
    #[arg(long, default_value_t = 5)]
    p: usize,
    #[arg(long, default_value_t = 0.5)]
    h: f64,
    /// Rotation group order.
    #[arg(long)]
    t: Option<usize>,
    /// Channels per hidden layer.
    #[arg(long)]
    channels: Option<usize>,
    /// Convolution layers (at least 2).
    #[arg(long, default_value_t = 5)]
    layers: usize,
    /// Rotation angles in degrees; one random angle per image when omitted.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    angles: Option<Vec<f64>>,
    /// PGM/PPM images; the bundled crops when omitted.
    #[arg(long, num_args = 1..)]
    images: Option<Vec<PathBuf>>,
}

#[derive(Args)]
struct EquivArgs {
    #[command(flatten)]
    net: NetArgs,
    /// Network initializations to average over.
    #[arg(long, default_value_t = 3)]
    inits: u64,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ScalingArgs {
    #[arg(long, default_value_t = 8)]
    t: usize,
    /// Mesh sizes.
    #[arg(long, value_delimiter = ',', default_values_t = [0.2, 0.1, 0.05, 0.025])]
    hs: Vec<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    net: NetArgs,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    /// Initial gradient step.
    #[arg(long, default_value_t = 1e-2)]
    step: f64,
    /// Held-out images for the equivariance report; the bundled held-out
    /// crops when omitted.
    #[arg(long, num_args = 1..)]
    eval_images: Option<Vec<PathBuf>>,
    #[command(flatten)]
    common: Common,
}

enum CliError {
    Usage(String),
    Io(PathBuf, String),
    Diverged(String),
    Other(Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Io(p, m) => write!(f, "{}: {m}", p.display()),
            CliError::Diverged(m) => write!(f, "{m}"),
            CliError::Other(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(m) => CliError::Usage(m),
            other => CliError::Other(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

struct Output {
    dir: PathBuf,
}

impl Output {
    fn new(dir: &Path) -> CliResult<Self> {
        if !dir.is_dir() {
            return Err(CliError::Io(dir.to_path_buf(), "output directory does not exist".into()));
        }
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> CliResult<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::Io(path, e.to_string()))
    }
}

fn load_images(paths: &Option<Vec<PathBuf>>, bundled: fn() -> fconv::Result<Vec<(String, Array2<f64>)>>) -> CliResult<Vec<(String, Array2<f64>)>> {
    let Some(paths) = paths else {
        return Ok(bundled()?);
    };
    let mut images = Vec::new();
    let mut failed = Vec::new();
    for p in paths {
        match read_image(p) {
            Ok(img) => images.push((p.display().to_string(), img)),
            Err(e) => failed.push(format!("{}: {e}", p.display())),
        }
    }
    if !failed.is_empty() {
        return Err(CliError::Io(PathBuf::from("--images"), format!("unreadable images:\n  {}", failed.join("\n  "))));
    }
    if images.is_empty() {
        return Err(CliError::Usage("no images given".into()));
    }
    Ok(images)
}

fn upscale(a: &Array2<f64>, k: usize) -> Array2<f64> {
    let (r, c) = a.dim();
    Array2::from_shape_fn((r * k, c * k), |(i, j)| a[[i / k, j / k]])
}

fn cmd_bases(a: &BasesArgs) -> CliResult<()> {
    let out = Output::new(&a.common.out)?;
    let grid = GridSpec::new(a.p, a.h)?;
    let config = [("p", a.p.to_string()), ("h", sci(a.h)), ("t", a.t.to_string())];
    let header = header_line("bases", &config, a.common.seed);
    let zoom = (64 / a.p).max(1);
    for kind in [BasisKind::ClassicFourier, BasisKind::Proposed] {
        let set = BasisSet::new(kind, grid);
        for (suffix, theta) in [("", 0.0), ("_rot45", PI / 4.0)] {
            let tiles = (0..set.len())
                .map(|n| set.sample_at_angle(n, theta).map(|s| upscale(&s, zoom)))
                .collect::<fconv::Result<Vec<_>>>()?;
            // Zero-valued gaps render mid-gray, separating tiles.
            let sheet = tile(&tiles, (2 * a.p).min(tiles.len()), 1, 0.0);
            out.write(&format!("basis_{}{suffix}.pgm", kind.name()), encode_pgm_symmetric(sheet.view(), Some(header.trim_start_matches("# "))))?;
        }
    }
    let mut report = CsvTable::new(header.clone(), &["p", "h", "max_discrepancy"]);
    for p in 1..=a.p {
        report.push(vec![p.to_string(), sci(a.h), sci(verify_remark1(p, a.h)?)]);
    }
    out.write("remark1_report.csv", report.render())
}

fn cmd_fit(a: &FitArgs) -> CliResult<()> {
    let out = Output::new(&a.common.out)?;
    let grid = GridSpec::new(a.p, a.h)?;
    let seed = a.common.seed;
    let config = [
        ("p", a.p.to_string()),
        ("h", sci(a.h)),
        ("trials", a.trials.to_string()),
        ("lambda", sci(a.lambda)),
        ("translation_std", sci(a.translation_std)),
    ];
    let mut table = CsvTable::new(header_line("fit", &config, seed), &["method", "p", "target", "case", "mean_rmse", "std_rmse"]);
    let morlet = TargetKind::Morlet { a: [2.0, 1.5], translation_std: a.translation_std };
    for target in [morlet, TargetKind::RandomResized] {
        for kind in [BasisKind::ClassicFourier, BasisKind::Proposed] {
            let cfg = TrialConfig { kind, grid, trials: a.trials, seed, lambda: a.lambda };
            for s in run_fit_trials(target, &cfg)? {
                table.push(vec![
                    kind.name().into(),
                    a.p.to_string(),
                    target.name().into(),
                    s.case.name().into(),
                    sci(s.mean()),
                    sci(s.std()),
                ]);
            }
        }
    }
    out.write("fit.csv", table.render())?;

    // One worked example: the unrotated Morlet fitted with the proposed basis.
    let set = BasisSet::new(BasisKind::Proposed, grid);
    let fitter = RidgeFitter::new(&set, a.lambda, &[0.0])?;
    let target = &morlet_filter(&MorletParams::new([2.0, 1.5], [0.0, 0.0])?, &grid, 0.0) * &set.mask_samples();
    let fit = fitter.fit(&target)?;
    let meta = FitMeta { kind: BasisKind::Proposed.name().into(), p: a.p, h: a.h, t: 1, lambda: a.lambda, seed };
    out.write("fit_coefficients.csv", coefficients_csv(&meta, &fit.coefficients))?;
    out.write("fit_filter.csv", filter_csv(&meta, fit.fitted.view()))?;
    out.write("fit_filter.pgm", encode_pgm_symmetric(upscale(&fit.fitted, 8).view(), Some(header_line("fit", &config, seed).trim_start_matches("# "))))
}

fn net_config(n: &NetArgs, t_default: usize, c_default: usize) -> CliResult<NetworkConfig> {
    if n.layers < 2 {
        return Err(CliError::Usage("--layers must be at least 2".into()));
    }
    Ok(NetworkConfig { p: n.p, h: n.h, t: n.t.unwrap_or(t_default), channels: n.channels.unwrap_or(c_default), hidden_layers: n.layers - 2 })
}

fn angle_spec(n: &NetArgs, seed: u64) -> AngleSpec {
    match &n.angles {
        Some(list) => AngleSpec::List(list.iter().map(|d| d.to_radians()).collect()),
        None => AngleSpec::Random { seed },
    }
}

fn net_header(command: &str, cfg: &NetworkConfig, n: &NetArgs, extra: &[(&str, String)], seed: u64) -> String {
    let mut config = vec![
        ("p", cfg.p.to_string()),
        ("h", sci(cfg.h)),
        ("t", cfg.t.to_string()),
        ("channels", cfg.channels.to_string()),
        ("layers", cfg.conv_layers().to_string()),
        (
            "angles",
            match &n.angles {
                Some(a) => a.iter().map(|v| sci(*v)).collect::<Vec<_>>().join(";"),
                None => "random".into(),
            },
        ),
        ("images", if n.images.is_some() { "files".into() } else { "bundled".into() }),
    ];
    config.extend(extra.iter().cloned());
    header_line(command, &config, seed)
}

fn measurement_row(stage: Option<&str>, m: &Measurement, names: &[(String, Array2<f64>)]) -> Vec<String> {
    let r = &m.report;
    let mut row = Vec::new();
    if let Some(s) = stage {
        row.push(s.to_string());
    }
    row.extend([
        r.network.clone(),
        m.init_seed.to_string(),
        names[m.image].0.clone(),
        sci(r.angle.to_degrees()),
        r.region.name().to_string(),
        sci(r.rmse),
        r.lepn_count.to_string(),
        sci(r.lepn_fraction),
    ]);
    row
}

const MEASURE_COLUMNS: [&str; 8] = ["network", "init_seed", "image", "angle_deg", "region", "rmse", "lepn_count", "lepn_fraction"];

fn summary_row(label: &str, ms: &[Measurement]) -> Vec<String> {
    let n = ms.len() as f64;
    let mean = ms.iter().map(|m| m.report.rmse).sum::<f64>() / n;
    let std = (ms.iter().map(|m| (m.report.rmse - mean).powi(2)).sum::<f64>() / n).sqrt();
    let lepn = ms.iter().map(|m| m.report.lepn_fraction).sum::<f64>() / n;
    vec![label.to_string(), ms.len().to_string(), sci(mean), sci(std), sci(lepn)]
}

fn cmd_equiv(a: &EquivArgs) -> CliResult<()> {
    let out = Output::new(&a.common.out)?;
    let cfg = net_config(&a.net, 24, 3)?;
    let seed = a.common.seed;
    if a.inits == 0 {
        return Err(CliError::Usage("--inits must be at least 1".into()));
    }
    let images = load_images(&a.net.images, eval_crops)?;
    let center_on = if a.net.images.is_some() { images.clone() } else { train_crops()? };
    let plain = |v: &[(String, Array2<f64>)]| v.iter().map(|(_, i)| i.clone()).collect::<Vec<_>>();
    let inits: Vec<u64> = (0..a.inits).map(|k| seed.wrapping_add(k)).collect();
    let (f, c) = compare_stacks(cfg, &inits, &plain(&images), &plain(&center_on), &angle_spec(&a.net, seed))?;
    let header = net_header("equiv", &cfg, &a.net, &[("inits", a.inits.to_string())], seed);
    let mut table = CsvTable::new(header.clone(), &MEASURE_COLUMNS);
    for m in f.iter().chain(&c) {
        table.push(measurement_row(None, m, &images));
    }
    out.write("equiv.csv", table.render())?;
    let mut summary = CsvTable::new(header, &["network", "count", "mean_rmse", "std_rmse", "mean_lepn_fraction"]);
    summary.push(summary_row(NetworkKind::Equivariant.name(), &f));
    summary.push(summary_row(NetworkKind::Plain.name(), &c));
    out.write("equiv_summary.csv", summary.render())
}

fn cmd_scaling(a: &ScalingArgs) -> CliResult<()> {
    let out = Output::new(&a.common.out)?;
    let cfg = ScalingConfig { hs: a.hs.clone(), t: a.t, ..ScalingConfig::default() };
    let rows = scaling_experiment(&cfg)?;
    let hs = a.hs.iter().map(|h| sci(*h)).collect::<Vec<_>>().join(";");
    let header = header_line("scaling", &[("t", a.t.to_string()), ("hs", hs)], a.common.seed);
    let mut table = CsvTable::new(header, &["layer", "h", "p", "error", "bound"]);
    for r in rows {
        table.push(vec![r.layer.name().into(), sci(r.h), r.p.to_string(), sci(r.error), sci(r.bound)]);
    }
    out.write("scaling.csv", table.render())
}

fn loss_table(header: String, losses: &[f64]) -> String {
    let mut t = CsvTable::new(header, &["epoch", "loss"]);
    for (e, l) in losses.iter().enumerate() {
        t.push(vec![e.to_string(), sci(*l)]);
    }
    t.render()
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let out = Output::new(&a.common.out)?;
    let cfg = net_config(&a.net, 8, 2)?;
    let seed = a.common.seed;
    let train = load_images(&a.net.images, train_crops)?;
    let held_out = load_images(&a.eval_images, eval_crops)?;
    let side = train[0].1.dim();
    if let Some((name, _)) = train.iter().find(|(_, i)| i.dim() != side) {
        return Err(CliError::Usage(format!("training images must share one size; {name} differs")));
    }
    let plain = |v: &[(String, Array2<f64>)]| v.iter().map(|(_, i)| i.clone()).collect::<Vec<_>>();
    let header = net_header(
        "train",
        &cfg,
        &a.net,
        &[("epochs", a.epochs.to_string()), ("step", sci(a.step)), ("momentum", sci(0.9))],
        seed,
    );
    let tc = TrainConfig { epochs: a.epochs, step: a.step, momentum: 0.9, batch_size: None, seed };
    let outcome = train_and_measure(NetworkKind::Equivariant, cfg, seed, &plain(&train), &plain(&held_out), &angle_spec(&a.net, seed), &tc);
    let outcome = match outcome {
        Ok(o) => o,
        Err(Error::TrainingDiverged { epoch, loss, trace }) => {
            out.write("loss.csv", loss_table(header, &trace))?;
            return Err(CliError::Diverged(format!(
                "training diverged at epoch {epoch} (loss {loss}); trace written to {}",
                out.dir.join("loss.csv").display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    out.write("loss.csv", loss_table(header.clone(), &outcome.report.losses))?;
    out.write("checkpoint.txt", outcome.net.to_checkpoint(seed))?;
    let mut cols = vec!["stage"];
    cols.extend(MEASURE_COLUMNS);
    let mut table = CsvTable::new(header.clone(), &cols);
    for (stage, ms) in [("untrained", &outcome.before), ("trained", &outcome.after)] {
        for m in ms {
            table.push(measurement_row(Some(stage), m, &held_out));
        }
    }
    out.write("train_equiv.csv", table.render())?;
    let mut summary = CsvTable::new(header, &["stage", "count", "mean_rmse", "std_rmse", "mean_lepn_fraction"]);
    summary.push(summary_row("untrained", &outcome.before));
    summary.push(summary_row("trained", &outcome.after));
    out.write("train_summary.csv", summary.render())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Bases(a) => cmd_bases(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Equiv(a) => cmd_equiv(a),
        Command::Scaling(a) => cmd_scaling(a),
        Command::Train(a) => cmd_train(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fconv: {e}");
            ExitCode::from(match e {
                CliError::Diverged(_) => 3,
                CliError::Usage(_) | CliError::Io(..) => 2,
                CliError::Other(Error::Io(_)) => 2,
                CliError::Other(_) => 1,
            })
        }
    }
}
