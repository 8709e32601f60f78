//! The `cdg` command.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or IO error, 3 numeric failure
//! (a non-finite value during training or a failed gradient check).

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use cdg_core::metrics::Confusion;
use cdg_core::pipeline::{gradcheck_suite, infer_multiscale_flip, train_with};
use clap::{Parser, Subcommand, ValueEnum};

use crate::checkpoint::Checkpoint;
use crate::error::{io_err, write_file, Error};
use crate::{config, distfile, heatmap, pnm, report};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "cdg",
    version,
    about = "Class distribution guided parsing on synthetic figures"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes the horizontal and vertical class distributions of a label map.
    Encode {
        /// P5 label map.
        #[arg(long)]
        label: PathBuf,
        /// Class count; defaults to one more than the largest id present.
        #[arg(long)]
        classes: Option<usize>,
        /// Divide counts by the length of the pooled axis.
        #[arg(long)]
        normalize: bool,
        /// Nearest-neighbour downscale factor applied before counting.
        #[arg(long, default_value_t = 1)]
        feature_scale: usize,
        /// Output prefix; writes `<prefix>.horizontal.txt` and `<prefix>.vertical.txt`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Renders a synthetic dataset as `images/NNNN.ppm` and `labels/NNNN.pgm`.
    Synth {
        /// Config whose `[data]` section describes the dataset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains on the synthetic dataset described by the config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Per-epoch CSV log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Scores a checkpoint on every `<stem>.ppm` image with a matching `<stem>.pgm` label.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Metrics CSV; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1.0")]
        scales: Vec<f64>,
        #[arg(long)]
        flip: bool,
    },
    /// Predicts a label map for one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1.0")]
        scales: Vec<f64>,
        #[arg(long)]
        flip: bool,
    },
    /// Finite-difference check of every parameter of the CDG objective.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// Renders a distribution file, or a CDG activation of a checkpoint on an image.
    Heatmap {
        #[arg(long, conflicts_with_all = ["checkpoint", "image"], required_unless_present = "checkpoint")]
        dist: Option<PathBuf>,
        #[arg(long, requires_all = ["image", "map"])]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, value_enum)]
        map: Option<MapKind>,
        /// Channel of the spatial guidance map.
        #[arg(long, default_value_t = 0)]
        channel: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MapKind {
    Ph,
    Pv,
    Ad,
}

enum Failure {
    Data(Error),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Core(cdg_core::Error::NonFinite(what)) => {
                Failure::Numeric(format!("non-finite value in {what}"))
            }
            e => Failure::Data(e),
        }
    }
}

impl From<cdg_core::Error> for Failure {
    fn from(e: cdg_core::Error) -> Self {
        Error::from(e).into()
    }
}

/// Runs the command line, printing to the process's stdout and stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_to(
        args,
        &mut std::io::stdout().lock(),
        &mut std::io::stderr().lock(),
    )
}

pub fn run_to<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            return if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                EXIT_USAGE
            } else {
                let _ = write!(out, "{}", e.render());
                EXIT_OK
            };
        }
    };
    match execute(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(Failure::Data(e)) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_DATA
        }
        Err(Failure::Numeric(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_NUMERIC
        }
    }
}

fn say(out: &mut dyn Write, msg: std::fmt::Arguments) {
    let _ = writeln!(out, "{msg}");
}

fn run_config(path: Option<&Path>) -> Result<config::RunConfig, Failure> {
    Ok(match path {
        Some(p) => config::read(p)?,
        None => config::RunConfig::default(),
    })
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path).map_err(io_err(path))?;
    Ok(())
}

fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn execute(command: Command, out: &mut dyn Write) -> Result<(), Failure> {
    match command {
        Command::Encode {
            label,
            classes,
            normalize,
            feature_scale,
            out: prefix,
        } => {
            let map = pnm::read_label(&label, classes)?.downscale(feature_scale)?;
            let (h, v) = map.distributions(normalize);
            for d in [&h, &v] {
                let path = suffixed(&prefix, &format!(".{}.txt", d.axis.name()));
                distfile::write(&path, d)?;
                say(out, format_args!("wrote {}", path.display()));
            }
        }
        Command::Synth { config, out: dir } => {
            let data = run_config(config.as_deref())?.data.generate()?;
            let (images, labels) = (dir.join("images"), dir.join("labels"));
            create_dir(&images)?;
            create_dir(&labels)?;
            for (i, s) in data.iter().enumerate() {
                pnm::write_image(&images.join(format!("{i:04}.ppm")), &s.image)?;
                pnm::write_label(&labels.join(format!("{i:04}.pgm")), &s.label)?;
            }
            say(
                out,
                format_args!("wrote {} samples to {}", data.len(), dir.display()),
            );
        }
        Command::Train {
            config,
            checkpoint,
            log,
        } => {
            let cfg = run_config(config.as_deref())?;
            let data = cfg.data.generate()?;
            let mut csv = String::from(report::LOG_HEADER);
            let (net, logs) = train_with(&cfg.train, &data, |l| csv.push_str(&report::log_row(l)))?;
            let swaps = data[0].swaps.clone();
            Checkpoint { net, swaps }.save(&checkpoint)?;
            if let Some(path) = log {
                write_file(&path, csv.as_bytes())?;
            }
            if let Some(last) = logs.last() {
                say(
                    out,
                    format_args!(
                        "epoch {} total {} train_miou {}",
                        last.epoch, last.total as f32, last.train_miou as f32
                    ),
                );
            }
            say(out, format_args!("wrote {}", checkpoint.display()));
        }
        Command::Eval {
            checkpoint,
            images,
            labels,
            out: csv_path,
            scales,
            flip,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let classes = ckpt.net.spec.classes;
            let mut confusion = Confusion::new(classes);
            let entries = std::fs::read_dir(&images).map_err(io_err(&images))?;
            let mut stems: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
                .collect();
            stems.sort();
            if stems.is_empty() {
                return Err(cdg_core::Error::Invalid(format!(
                    "no .ppm images in {}",
                    images.display()
                ))
                .into());
            }
            for image_path in &stems {
                let stem = image_path.file_stem().expect("file has a stem");
                let label_path = labels.join(stem).with_extension("pgm");
                let image = pnm::read_image(image_path)?;
                let gt = pnm::read_label(&label_path, Some(classes))?;
                let pred = infer_multiscale_flip(&ckpt.net, &image, &scales, &ckpt.swaps, flip)?;
                confusion.accumulate(&pred, &gt)?;
            }
            let csv = report::metrics_csv(&confusion.report());
            match csv_path {
                Some(p) => {
                    write_file(&p, csv.as_bytes())?;
                    say(
                        out,
                        format_args!("scored {} images, wrote {}", stems.len(), p.display()),
                    );
                }
                None => {
                    let _ = out.write_all(csv.as_bytes());
                }
            }
        }
        Command::Infer {
            checkpoint,
            image,
            out: path,
            scales,
            flip,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let img = pnm::read_image(&image)?;
            let pred = infer_multiscale_flip(&ckpt.net, &img, &scales, &ckpt.swaps, flip)?;
            pnm::write_label(&path, &pred)?;
            say(out, format_args!("wrote {}", path.display()));
        }
        Command::Gradcheck {
            seed,
            step,
            tolerance,
        } => {
            if !(step.is_finite() && step > 0.0) {
                return Err(cdg_core::Error::Invalid("step must be positive".into()).into());
            }
            let rows = gradcheck_suite(seed, step)?;
            let mut failed = Vec::new();
            for r in &rows {
                let ok = r.max_rel_err <= tolerance;
                say(
                    out,
                    format_args!(
                        "{:<28} {:.3e} {}",
                        r.param,
                        r.max_rel_err,
                        if ok { "ok" } else { "FAIL" }
                    ),
                );
                if !ok {
                    failed.push(r.param.as_str());
                }
            }
            if !failed.is_empty() {
                return Err(Failure::Numeric(format!(
                    "gradient check failed for {}",
                    failed.join(", ")
                )));
            }
            say(
                out,
                format_args!("{} parameters within {tolerance:e}", rows.len()),
            );
        }
        Command::Heatmap {
            dist,
            checkpoint,
            image,
            map,
            channel,
            out: path,
        } => {
            let raster = match (dist, checkpoint, image, map) {
                (Some(d), _, _, _) => heatmap::distribution(&distfile::read(&d)?)?,
                (None, Some(c), Some(i), Some(m)) => {
                    let ckpt = Checkpoint::load(&c)?;
                    let a = heatmap::activations(&ckpt.net, &pnm::read_image(&i)?)?;
                    match m {
                        MapKind::Ph => heatmap::distribution(&a.p_h)?,
                        MapKind::Pv => heatmap::distribution(&a.p_v)?,
                        MapKind::Ad => heatmap::channel(&a.a_d, channel)?,
                    }
                }
                _ => unreachable!("clap enforces the argument groups"),
            };
            write_file(&path, &pnm::encode(&raster))?;
            say(out, format_args!("wrote {}", path.display()));
        }
    }
    Ok(())
}
