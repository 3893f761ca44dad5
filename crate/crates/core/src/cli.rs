//! Command-line surface: `train`, `extract`, `match`, `eval-homography` and
//! `bench-flops`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{
    corner_error, ransac_homography, read_hpatches, EvalReport, HomographyPair, PairResult, RansacParams,
    MHA_THRESHOLDS,
};
use crate::heads::DetectParams;
use crate::image::GrayImage;
use crate::io::{
    atomic_write, load_features, load_image, load_weights, read_manifest, save_features, save_weights, write_json,
    MatchRecord,
};
use crate::matcher::{extract_sparse, match_features, semi_dense_extract, FeatureSet};
use crate::model::XFeatModel;
use crate::tensor::FlopCounter;
use crate::training::{procedural_bases, HarrisTeacher, StepReport, TrainConfig, TrainSample, Trainer};

#[derive(Debug, Parser)]
#[command(name = "xfeat", version, about = "Lightweight local features: extraction, matching, training, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on synthetic warps of a corpus (or procedural textures).
    Train(TrainArgs),
    /// Detect and describe one image into a feature cache.
    Extract(ExtractArgs),
    /// Match two feature caches.
    Match(MatchArgs),
    /// Homography accuracy over a pair manifest or an HPatches tree.
    EvalHomography(EvalArgs),
    /// Per-layer convolution cost and forward timing.
    BenchFlops(BenchArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of PGM/PPM/PNG images to warp; procedural textures when absent.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Manifest of real pairs with homographies, mixed in by `synthetic_fraction`.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON training config; fields not given keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from the single-core preset (reduced model, 256x256, batch 2).
    #[arg(long)]
    pub desk: bool,
    /// Loss-curve CSV; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Sparse,
    #[value(alias = "semi-dense")]
    Semidense,
}

impl ModeArg {
    fn default_top_k(self) -> usize {
        match self {
            ModeArg::Sparse => 4096,
            ModeArg::Semidense => 10_000,
        }
    }
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, value_enum, default_value = "sparse")]
    pub mode: ModeArg,
    /// 4096 for sparse, 10000 for semi-dense when omitted.
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// Required with `--refine`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub feats_a: PathBuf,
    #[arg(long)]
    pub feats_b: PathBuf,
    #[arg(long)]
    pub refine: bool,
    /// Minimum offset confidence kept by refinement.
    #[arg(long, default_value_t = 0.2)]
    pub conf: f32,
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    pub min_cossim: f32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Manifest: JSON array or JSON lines of {image_a, image_b, homography}.
    #[arg(long, conflicts_with = "hpatches", required_unless_present = "hpatches")]
    pub pairs: Option<PathBuf>,
    /// HPatches root with one directory per sequence.
    #[arg(long)]
    pub hpatches: Option<PathBuf>,
    /// RANSAC inlier threshold in pixels.
    #[arg(long, default_value_t = 3.0)]
    pub threshold: f64,
    /// Evaluate every listed RANSAC threshold and report each.
    #[arg(long, value_delimiter = ',')]
    pub sweep: Vec<f64>,
    #[arg(long, value_enum, default_value = "sparse")]
    pub mode: ModeArg,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Refinement confidence threshold for semi-dense matching.
    #[arg(long, default_value_t = 0.2)]
    pub conf: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Reference architecture with seeded weights when absent.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 800)]
    pub width: usize,
    #[arg(long, default_value_t = 600)]
    pub height: usize,
    /// Also write the table as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

/// Parses `args` (program name first) and runs the command, returning the
/// text it would print.
pub fn run<I, S>(args: I) -> Result<String>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    execute(cli.command)
}

pub fn execute(command: Command) -> Result<String> {
    match command {
        Command::Train(a) => train(a),
        Command::Extract(a) => extract(a),
        Command::Match(a) => match_cmd(a),
        Command::EvalHomography(a) => eval_homography(a),
        Command::BenchFlops(a) => bench_flops(a),
    }
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| ["pgm", "ppm", "png"].contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!("no PGM/PPM/PNG images in {}", dir.display())));
    }
    Ok(files)
}

/// Center crop to the target aspect ratio, then resize.
fn fit_to(img: &GrayImage, width: usize, height: usize) -> Result<GrayImage> {
    let target = width as f64 / height as f64;
    let (mut cw, mut ch) = (img.width, img.height);
    if (cw as f64 / ch as f64) > target {
        cw = ((ch as f64 * target).round() as usize).max(1);
    } else {
        ch = ((cw as f64 / target).round() as usize).max(1);
    }
    let (x0, y0) = ((img.width - cw) / 2, (img.height - ch) / 2);
    let pixels = (y0..y0 + ch)
        .flat_map(|y| img.pixels[y * img.width + x0..y * img.width + x0 + cw].iter().copied())
        .collect();
    GrayImage::new(cw, ch, pixels)?.resize(width, height)
}

fn loss_csv(reports: &[StepReport]) -> String {
    let mut s = String::from("step,lr,total,ds,rel,fine,kp,correspondences,keypoint_cells\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{:e},{},{},{},{},{},{},{}",
            r.step, r.lr, r.total, r.ds, r.rel, r.fine, r.kp, r.correspondences, r.keypoint_cells
        );
    }
    s
}

fn train(a: TrainArgs) -> Result<String> {
    let mut config = match &a.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None if a.desk => TrainConfig::desk(),
        None => TrainConfig::default(),
    };
    if let Some(s) = a.steps {
        config.steps = s;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    config.validate()?;
    let teacher = HarrisTeacher::default();
    let size = (config.width, config.height);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let bases = match &a.corpus {
        None => procedural_bases(config.dataset_size, size.0, size.1, config.seed),
        Some(dir) => list_images(dir)?
            .iter()
            .map(|p| fit_to(&load_image(p)?, size.0, size.1))
            .collect::<Result<Vec<_>>>()?,
    };
    let real = match &a.pairs {
        None => Vec::new(),
        Some(m) => read_manifest(m)?
            .iter()
            .map(|p| {
                let (ia, ib) = (load_image(&p.image_a)?, load_image(&p.image_b)?);
                TrainSample::from_posed(&ia, &ib, &p.homography, size, config.max_correspondences, &teacher, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let steps = config.steps;
    let log_every = config.log_every.max(1);
    let mut trainer = Trainer::from_config(config)?;
    let start = Instant::now();
    let reports = trainer.fit_online(&bases, &teacher, &real, steps, |r| {
        if r.step % log_every == 0 || r.step == steps {
            log::info!(
                "step {} lr {:.2e} loss {:.4} (ds {:.4} rel {:.4} fine {:.4} kp {:.4})",
                r.step,
                r.lr,
                r.total,
                r.ds,
                r.rel,
                r.fine,
                r.kp
            );
        }
    })?;
    save_weights(&trainer.model, &a.out)?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    atomic_write(&log_path, loss_csv(&reports).as_bytes())?;
    let last = reports.last().map_or(f64::NAN, |r| r.total);
    Ok(format!(
        "trained {steps} steps in {:.1}s, final loss {last:.4}\ncheckpoint {}\nloss curve {}\n",
        start.elapsed().as_secs_f64(),
        a.out.display(),
        log_path.display()
    ))
}

fn extract_features(model: &XFeatModel<f32>, img: &GrayImage, mode: ModeArg, top_k: usize) -> Result<FeatureSet> {
    let t = img.to_tensor();
    match mode {
        ModeArg::Sparse => extract_sparse(
            model,
            &t,
            &DetectParams {
                top_k,
                ..DetectParams::default()
            },
        ),
        ModeArg::Semidense => semi_dense_extract(model, &t, top_k),
    }
}

fn extract(a: ExtractArgs) -> Result<String> {
    let model = load_weights(&a.model)?;
    let img = load_image(&a.image)?;
    let set = extract_features(&model, &img, a.mode, a.top_k.unwrap_or(a.mode.default_top_k()))?;
    save_features(&set, &a.out)?;
    Ok(format!("{} features written to {}\n", set.len(), a.out.display()))
}

fn match_cmd(a: MatchArgs) -> Result<String> {
    let fa = load_features(&a.feats_a)?;
    let fb = load_features(&a.feats_b)?;
    let model = match (&a.model, a.refine) {
        (Some(p), true) => Some(load_weights(p)?),
        (None, true) => return Err(Error::InvalidArgument("--refine needs --model".into())),
        _ => None,
    };
    let matches = match_features(model.as_ref(), &fa, &fb, a.min_cossim, a.refine.then_some(a.conf))?;
    write_json(&MatchRecord::from_matches(&matches), &a.out)?;
    Ok(format!("{} matches written to {}\n", matches.len(), a.out.display()))
}

fn evaluate(
    model: &XFeatModel<f32>,
    pairs: &[HomographyPair],
    a: &EvalArgs,
    thresholds: &[f64],
) -> Result<Vec<EvalReport>> {
    let top_k = a.top_k.unwrap_or(a.mode.default_top_k());
    let mut per_threshold: Vec<Vec<PairResult>> = vec![Vec::new(); thresholds.len()];
    for pair in pairs {
        let (ia, ib) = (load_image(&pair.image_a)?, load_image(&pair.image_b)?);
        let fa = extract_features(model, &ia, a.mode, top_k)?;
        let fb = extract_features(model, &ib, a.mode, top_k)?;
        let conf = (a.mode == ModeArg::Semidense).then_some(a.conf);
        let m = match_features(Some(model), &fa, &fb, -1.0, conf)?;
        let pa: Vec<(f64, f64)> = m.coords_a.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
        let pb: Vec<(f64, f64)> = m.coords_b.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
        for (t, results) in thresholds.iter().zip(per_threshold.iter_mut()) {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let params = RansacParams {
                threshold_px: *t,
                ..RansacParams::default()
            };
            let (err, inliers) = if pa.len() >= 4 {
                let r = ransac_homography(&pa, &pb, &params, &mut rng)?;
                let err = match &r.homography {
                    Some(h) => corner_error(h, &pair.homography, (ia.width, ia.height)).unwrap_or(f64::INFINITY),
                    None => f64::INFINITY,
                };
                (err, r.inlier_count())
            } else {
                (f64::INFINITY, 0)
            };
            results.push(PairResult {
                name: pair.name.clone(),
                matches: pa.len(),
                inliers,
                corner_error: err,
            });
        }
    }
    Ok(per_threshold
        .into_iter()
        .map(|r| EvalReport::from_pairs(r, &MHA_THRESHOLDS))
        .collect())
}

#[derive(Serialize)]
struct SweepEntry {
    ransac_threshold: f64,
    report: EvalReport,
}

fn eval_homography(a: EvalArgs) -> Result<String> {
    let model = load_weights(&a.model)?;
    let pairs = match (&a.pairs, &a.hpatches) {
        (Some(m), _) => read_manifest(m)?,
        (None, Some(root)) => read_hpatches(root)?,
        (None, None) => return Err(Error::InvalidArgument("--pairs or --hpatches is required".into())),
    };
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no pairs to evaluate".into()));
    }
    let thresholds = if a.sweep.is_empty() { vec![a.threshold] } else { a.sweep.clone() };
    let reports = evaluate(&model, &pairs, &a, &thresholds)?;
    let mut text = String::new();
    for (t, r) in thresholds.iter().zip(&reports) {
        let mha: Vec<String> = r.mha.iter().map(|(k, v)| format!("MHA@{k} {:.1}%", 100.0 * v)).collect();
        let _ = writeln!(
            text,
            "ransac {t}px: {} | corner error {:.2}px | {} pairs, {} failures",
            mha.join(" "),
            r.mean_corner_error,
            r.pairs,
            r.failures
        );
    }
    if a.sweep.is_empty() {
        write_json(&reports[0], &a.out)?;
    } else {
        let entries: Vec<SweepEntry> = thresholds
            .iter()
            .zip(reports)
            .map(|(&ransac_threshold, report)| SweepEntry { ransac_threshold, report })
            .collect();
        write_json(&entries, &a.out)?;
    }
    Ok(text)
}

#[derive(Serialize)]
struct BenchReport<'a> {
    width: usize,
    height: usize,
    layers: &'a [crate::tensor::FlopEntry],
    total: u64,
    forward_seconds: f64,
}

fn bench_flops(a: BenchArgs) -> Result<String> {
    let model = match &a.model {
        Some(p) => load_weights(p)?,
        None => XFeatModel::reference(0)?,
    };
    let image = crate::tensor::Tensor::zeros(&[1, 1, a.height, a.width]);
    let mut counter = FlopCounter::new();
    model.infer_counted(&image, &mut counter)?;
    let start = Instant::now();
    model.infer(&image)?;
    let secs = start.elapsed().as_secs_f64();
    let mut s = format!("{:<36} {:>9} {:>5} {:>5} {:>2} {:>14}\n", "layer", "out HxW", "cin", "cout", "k", "flops");
    for e in counter.entries() {
        let _ = writeln!(
            s,
            "{:<36} {:>9} {:>5} {:>5} {:>2} {:>14}",
            e.layer,
            format!("{}x{}", e.height, e.width),
            e.in_channels,
            e.out_channels,
            e.kernel,
            e.flops
        );
    }
    let _ = writeln!(s, "total {} at {}x{}", counter.total(), a.width, a.height);
    let _ = writeln!(s, "forward {:.1} ms", secs * 1e3);
    if let Some(p) = &a.json {
        write_json(
            &BenchReport {
                width: a.width,
                height: a.height,
                layers: counter.entries(),
                total: counter.total(),
                forward_seconds: secs,
            },
            p,
        )?;
    }
    Ok(s)
}
