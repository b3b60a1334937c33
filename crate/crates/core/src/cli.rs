//! Command-line front end: `train`, `synthesize` and `analyze`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::dataset::{filter_by_class, load_idx_images, load_idx_labels, preprocess, ImageTensor};
use crate::error::{Error, Result};
use crate::forest::ForestParams;
use crate::image::{montage, parse_grid, write_pgm};
use crate::linalg::SeededRng;
use crate::model::{AcMask, GenerativeModel, ModelConfig, SynthesisOptions};
use crate::pca::{detect_turning_points, fit_pca, EnergyCurve, TurningPointParams};
use crate::sampler::OutlierMethod;

const MIN_TRAINING_IMAGES: usize = 100;

#[derive(Debug, Parser)]
#[command(name = "ffgen", version, about = "Feedforward two-stage PCA digit generator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one model per digit.
    Train(TrainArgs),
    /// Draw images from a trained model.
    Synthesize(SynthesizeArgs),
    /// Write the full-image PCA energy curve with its turning points.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("class").required(true).args(["digit", "all"]))]
pub struct TrainArgs {
    /// Uncompressed IDX image file.
    #[arg(long)]
    pub images: PathBuf,
    /// Uncompressed IDX label file.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=9))]
    pub digit: Option<u8>,
    #[arg(long)]
    pub all: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Stage-2 spectral dimension including DC.
    #[arg(long, default_value_t = 12)]
    pub k2: usize,
    #[arg(long, default_value_t = 30)]
    pub trees: usize,
    #[arg(long, default_value_t = 12)]
    pub depth: usize,
    #[arg(long, default_value_t = 10)]
    pub kmeans: usize,
    #[arg(long, default_value_t = OutlierMethod::ZScore)]
    pub outlier: OutlierMethod,
    /// Use at most this many images per digit.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write montage.pgm with an RxC grid.
    #[arg(long)]
    pub montage: Option<String>,
    /// Stage-1 AC indices to keep, e.g. "1-8" or "1,3,5-7".
    #[arg(long)]
    pub mask: Option<AcMask>,
    #[arg(long)]
    pub upsample: bool,
    /// Dump this pixel row of every image to slice.csv.
    #[arg(long)]
    pub slice: Option<usize>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["images", "eigenvalues"]))]
pub struct AnalyzeArgs {
    #[arg(long, requires = "labels")]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=9))]
    pub digit: Option<u8>,
    /// Analyze a whitespace-separated spectrum from a file, or stdin for "-".
    #[arg(long)]
    pub eigenvalues: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first) and runs the command, writing the
/// report to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    execute(cli, out)
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let mut report = String::new();
    let result = match cli.command {
        Command::Train(a) => train(&a, &mut report),
        Command::Synthesize(a) => synthesize(&a, &mut report),
        Command::Analyze(a) => analyze(&a, &mut report),
    };
    out.write_all(report.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))?;
    result
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_dataset(images: &Path, labels: &Path) -> Result<(ImageTensor, crate::dataset::LabelVector)> {
    let raw = load_idx_images(images)?;
    let labels = load_idx_labels(labels)?;
    if raw.count != labels.len() {
        return Err(Error::CountMismatch(raw.count, labels.len()));
    }
    Ok((preprocess(&raw)?, labels))
}

fn train(a: &TrainArgs, report: &mut String) -> Result<()> {
    let config = ModelConfig {
        spectral_dim: a.k2,
        forest: ForestParams {
            trees: a.trees,
            max_depth: a.depth,
            ..ForestParams::default()
        },
        outlier: a.outlier,
        clusters: a.kmeans,
        seed: a.seed,
        ..ModelConfig::default()
    };
    config.validate()?;
    let (images, labels) = load_dataset(&a.images, &a.labels)?;
    create_dir(&a.out)?;
    let digits: Vec<u8> = match a.digit {
        Some(d) => vec![d],
        None => (0..=9).collect(),
    };
    let rng = SeededRng::new(a.seed);
    for d in digits {
        let mut class = filter_by_class(&images, &labels, d)?;
        if let Some(n) = a.limit {
            class = class.take(n);
        }
        if class.count < MIN_TRAINING_IMAGES {
            eprintln!(
                "warning: digit {d} has only {} training images",
                class.count
            );
        }
        let (model, summary) = GenerativeModel::train(&class, d, config, &rng.fork(d as u64))?;
        let path = a.out.join(format!("{d}.ffgm"));
        model.save(&path)?;
        let s1: f64 = summary.stage1_energy.iter().sum();
        let _ = writeln!(
            report,
            "digit {d}: {} images, stage-1 AC eigenvalue total {s1:.6}, \
             stage-2 AC eigenvalue total {:.6} (kept {:.6}), wrote {}",
            summary.images,
            summary.stage2_energy,
            summary.stage2_retained,
            path.display()
        );
        if !summary.degenerate_positions.is_empty() {
            let _ = writeln!(
                report,
                "digit {d}: constant block positions {:?}",
                summary.degenerate_positions
            );
        }
    }
    Ok(())
}

fn synthesize(a: &SynthesizeArgs, report: &mut String) -> Result<()> {
    let model = GenerativeModel::load(&a.model)?;
    let grid = a.montage.as_deref().map(parse_grid).transpose()?;
    let options = SynthesisOptions {
        ac_mask: a.mask.unwrap_or(model.config.ac_mask),
        upsample: a.upsample || model.config.upsample,
    };
    let mut rng = SeededRng::new(a.seed);
    let images = model.synthesize_with(&mut rng, a.n, &options)?;
    if let Some(row) = a.slice {
        if row >= images.height {
            return Err(Error::InvalidParameter(format!(
                "slice row {row} outside 0..{}",
                images.height
            )));
        }
    }
    create_dir(&a.out)?;
    for (i, img) in images.iter().enumerate() {
        write_pgm(a.out.join(format!("img_{i:04}.pgm")), img, images.height, images.width)?;
    }
    if let Some((rows, cols)) = grid {
        let (px, h, w) = montage(&images, rows, cols)?;
        write_pgm(a.out.join("montage.pgm"), &px, h, w)?;
    }
    if let Some(row) = a.slice {
        let mut csv = String::from("image,column,value\n");
        for (i, img) in images.iter().enumerate() {
            for (c, v) in img[row * images.width..(row + 1) * images.width].iter().enumerate() {
                let _ = writeln!(csv, "{i},{c},{v}");
            }
        }
        let path = a.out.join("slice.csv");
        std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    }
    let _ = writeln!(
        report,
        "wrote {} images of digit {} to {}",
        images.count,
        model.label,
        a.out.display()
    );
    Ok(())
}

fn read_spectrum(path: &Path) -> Result<Vec<f64>> {
    let mut text = String::new();
    if path.as_os_str() == "-" {
        std::io::stdin()
            .read_to_string(&mut text)
            .map_err(|e| Error::io("<stdin>", e))?;
    } else {
        text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    }
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::InvalidParameter(format!("bad eigenvalue {t:?}")))
        })
        .collect()
}

fn analyze(a: &AnalyzeArgs, report: &mut String) -> Result<()> {
    let eigenvalues = match (&a.eigenvalues, &a.images, &a.labels) {
        (Some(path), _, _) => read_spectrum(path)?,
        (None, Some(images), Some(labels)) => {
            let (images, labels) = load_dataset(images, labels)?;
            let images = match a.digit {
                Some(d) => filter_by_class(&images, &labels, d)?,
                None => images,
            };
            let vectors: Vec<&[f64]> = images.iter().collect();
            fit_pca(&vectors, images.image_len() - 1)?.eigenvalues().to_vec()
        }
        _ => return Err(Error::InvalidParameter("--images needs --labels".into())),
    };
    let mut curve = EnergyCurve::from_eigenvalues(&eigenvalues)?;
    curve.turning_points = detect_turning_points(&curve, &TurningPointParams::default())?;

    let mut csv = String::from("index,ratio,is_turning_point\n");
    for (i, r) in curve.ratios.iter().enumerate() {
        let _ = writeln!(csv, "{},{r:e},{}", i + 1, curve.is_turning_point(i + 1) as u8);
    }
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    std::fs::write(&a.out, csv).map_err(|e| Error::io(&a.out, e))?;
    let _ = writeln!(report, "turning points: {:?}", curve.turning_points);
    Ok(())
}
