use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fds_core::bench::{run_benchmark, BenchConfig};
use fds_core::dataset::{read_class_list, resize_image, LoadedSample, DEFAULT_IMAGE_SIDE};
use fds_core::features::{load_features, save_features, ExtractInput, ExtractorSpec, SampleKey};
use fds_core::fusion::{FusionConfig, FusionStrategy, DEFAULT_DILATION, DEFAULT_TAU1, DEFAULT_TAU2};
use fds_core::matching::{PrototypeConfig, PrototypeStrategy, DEFAULT_PATCH_SIZE};
use fds_core::metrics::ReportOptions;
use fds_core::pipeline::{find_proposals, load_proposals, write_episode_outputs, Engine, EngineConfig, EpisodeRecord};
use fds_core::proposals::ProposalFile;
use fds_core::{BinaryMask, Error, Result};

/// Few-shot industrial defect segmentation.
#[derive(Parser)]
#[command(name = "fds", version, about)]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment one query image from annotated support images.
    Run(RunArgs),
    /// Evaluate every episode of a benchmark folder and write a report.
    Bench(BenchArgs),
    /// Feature file utilities.
    #[command(subcommand)]
    Features(FeaturesCmd),
    /// Proposal file utilities.
    #[command(subcommand)]
    Proposals(ProposalsCmd),
}

#[derive(Args, Clone)]
#[group(required = true, multiple = false)]
struct ExtractorArgs {
    /// ONNX feature extractor.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Directory of precomputed FMAP feature files.
    #[arg(long, value_name = "DIR")]
    features_dir: Option<PathBuf>,
    /// Trivial average-pooling extractor with this window size.
    #[arg(long, value_name = "FACTOR")]
    avgpool: Option<usize>,
}

impl ExtractorArgs {
    fn spec(&self) -> ExtractorSpec {
        match (&self.model, &self.features_dir, self.avgpool) {
            (Some(m), _, _) => ExtractorSpec::portable_model(m),
            (_, Some(d), _) => ExtractorSpec::feature_files(d),
            (_, _, Some(f)) => ExtractorSpec::avg_pool(f),
            _ => unreachable!("clap requires one extractor flag"),
        }
    }
}

#[derive(Args, Clone)]
struct EngineArgs {
    /// Proposal selection threshold.
    #[arg(long, default_value_t = DEFAULT_TAU1)]
    tau1: f64,
    /// Coverage above which a coarse region is replaced by proposals.
    #[arg(long, default_value_t = DEFAULT_TAU2)]
    tau2: f64,
    /// Dilation kernel size (odd).
    #[arg(long, default_value_t = DEFAULT_DILATION)]
    dilate: usize,
    /// Patch size for patch prototypes (odd).
    #[arg(long, default_value_t = DEFAULT_PATCH_SIZE)]
    patch: usize,
    #[arg(long, default_value_t = PrototypeStrategy::Patch)]
    fg_strategy: PrototypeStrategy,
    #[arg(long, default_value_t = PrototypeStrategy::Dense)]
    bg_strategy: PrototypeStrategy,
    /// paper | none | sam-only | union
    #[arg(long, default_value_t = FusionStrategy::Paper)]
    fusion: FusionStrategy,
    /// Working resolution images and masks are resized to.
    #[arg(long, default_value_t = DEFAULT_IMAGE_SIDE)]
    image_side: u32,
}

impl EngineArgs {
    fn config(&self) -> EngineConfig {
        EngineConfig {
            prototypes: PrototypeConfig {
                fg: self.fg_strategy,
                bg: self.bg_strategy,
                patch_size: self.patch,
            },
            fusion: FusionConfig {
                tau1: self.tau1,
                tau2: self.tau2,
                dilation_k: self.dilate,
                strategy: self.fusion,
            },
            image_side: self.image_side,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Support image; repeat for N shots.
    #[arg(long = "support", required = true, value_name = "IMAGE")]
    supports: Vec<PathBuf>,
    /// Support mask, one per --support, in the same order.
    #[arg(long = "support-mask", required = true, value_name = "MASK")]
    support_masks: Vec<PathBuf>,
    #[arg(long, value_name = "IMAGE")]
    query: PathBuf,
    /// Ground-truth mask of the query; enables IoU in the episode record.
    #[arg(long, value_name = "MASK")]
    query_mask: Option<PathBuf>,
    /// Proposal file for the query.
    #[arg(long, value_name = "FILE", conflicts_with = "proposals_dir")]
    proposals: Option<PathBuf>,
    /// Directory searched for `<query stem>.json`.
    #[arg(long, value_name = "DIR")]
    proposals_dir: Option<PathBuf>,
    #[command(flatten)]
    extractor: ExtractorArgs,
    #[command(flatten)]
    engine: EngineArgs,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Dataset root: <root>/<product>/<class>/{images,masks}.
    #[arg(long, value_name = "DIR")]
    root: PathBuf,
    /// Comma list of `product` or `product/class`, or a file with one per line.
    #[arg(long)]
    classes: Option<String>,
    #[arg(long, default_value_t = 1)]
    shots: usize,
    #[arg(long, value_name = "DIR")]
    proposals_dir: Option<PathBuf>,
    #[command(flatten)]
    extractor: ExtractorArgs,
    #[command(flatten)]
    engine: EngineArgs,
    /// Parallel episode workers (default: available cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Report FB-IoU over pixels pooled across products as well.
    #[arg(long)]
    pooled_fb_iou: bool,
    /// Also write each final mask to <DIR>/<product>/<class>/<stem>.png.
    #[arg(long, value_name = "DIR")]
    save_masks: Option<PathBuf>,
    /// Report path.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum FeaturesCmd {
    /// Extract features of one image into an FMAP file.
    Dump {
        #[arg(long, value_name = "IMAGE")]
        image: PathBuf,
        #[command(flatten)]
        extractor: ExtractorArgs,
        #[arg(long, default_value_t = DEFAULT_IMAGE_SIDE)]
        image_side: u32,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Print shape and value statistics of an FMAP file.
    Info { file: PathBuf },
}

#[derive(Subcommand)]
enum ProposalsCmd {
    /// Print canvas size, masks and overlap of a proposal file.
    Info { file: PathBuf },
}

fn parse_classes(arg: Option<&str>) -> Result<Vec<String>> {
    let Some(arg) = arg else { return Ok(Vec::new()) };
    let path = Path::new(arg);
    if path.is_file() {
        return read_class_list(path);
    }
    Ok(arg
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect())
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn cmd_run(args: RunArgs) -> Result<()> {
    if args.supports.len() != args.support_masks.len() {
        return Err(Error::InvalidArgument(format!(
            "{} --support images but {} --support-mask masks",
            args.supports.len(),
            args.support_masks.len()
        )));
    }
    let cfg = args.engine.config();
    let side = cfg.image_side;
    let engine = Engine::new(&args.extractor.spec(), cfg)?;
    let supports = args
        .supports
        .iter()
        .zip(&args.support_masks)
        .map(|(img, mask)| LoadedSample::load(SampleKey::stem(file_stem(img)), img, mask, side))
        .collect::<Result<Vec<_>>>()?;
    if let Some((s, p)) = supports.iter().zip(&args.support_masks).find(|(s, _)| s.mask.is_empty()) {
        return Err(Error::Dataset(format!(
            "support mask {} for '{}' has no foreground",
            p.display(),
            s.key.stem
        )));
    }
    let key = SampleKey::stem(file_stem(&args.query));
    let raw = image::open(&args.query)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", args.query.display())))?
        .to_rgb8();
    let query = resize_image(&raw, side)?;
    let gt = match &args.query_mask {
        Some(p) => Some(fds_core::dataset::resize_mask(&BinaryMask::load(p)?, side as usize, side as usize)?),
        None => None,
    };
    let proposals = match (&args.proposals, &args.proposals_dir) {
        (Some(f), _) => load_proposals(f, side as usize)?,
        (None, Some(d)) => find_proposals(d, &key, side as usize)?,
        (None, None) => fds_core::maskops::ProposalSet::empty(side as usize, side as usize),
    };
    let seg = engine.segment(&supports, &query, &key, Some(&proposals))?;
    let record = EpisodeRecord::new(&key, &supports, &seg, proposals.len(), gt.as_ref())?;
    write_episode_outputs(&args.out, &query, &seg, &record)?;
    match record.iou {
        Some(v) => println!("{}: IoU {v:.4} (coarse {:.4})", key.stem, record.coarse_iou.unwrap_or(v)),
        None => println!("{}: {} foreground pixels", key.stem, record.final_pixels),
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let workers = args
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    if workers == 0 {
        return Err(Error::InvalidArgument("--workers must be >= 1".into()));
    }
    let cfg = BenchConfig {
        root: args.root,
        classes: parse_classes(args.classes.as_deref())?,
        shots: args.shots,
        extractor: args.extractor.spec(),
        proposals_dir: args.proposals_dir,
        engine: args.engine.config(),
        workers,
        report: ReportOptions {
            pooled_fb_iou: args.pooled_fb_iou,
        },
        save_masks: args.save_masks,
    };
    cfg.engine.validate()?;
    let report = run_benchmark(&cfg)?;
    report.write(&args.out)?;
    let m = &report.payload.metrics;
    println!(
        "{} episodes, {} classes: mIoU {:.4}, FB-IoU {:.4}",
        report.payload.episodes.len(),
        m.per_class.len(),
        m.miou,
        m.mean_fb_iou
    );
    Ok(())
}

fn cmd_features(cmd: FeaturesCmd) -> Result<()> {
    match cmd {
        FeaturesCmd::Dump {
            image,
            extractor,
            image_side,
            out,
        } => {
            let raw = image::open(&image)
                .map_err(|e| Error::InvalidArgument(format!("{}: {e}", image.display())))?
                .to_rgb8();
            let img = resize_image(&raw, image_side)?;
            let key = SampleKey::stem(file_stem(&image));
            let f = fds_core::features::extract_features(ExtractInput { image: &img, key: &key }, &extractor.spec())?;
            save_features(&f, &out)?;
            println!("{}: {}", out.display(), f.shape());
        }
        FeaturesCmd::Info { file } => {
            let f = load_features(&file)?;
            let d = f.data();
            let min = d.iter().copied().fold(f32::INFINITY, f32::min);
            let max = d.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mean = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
            println!("shape   {}", f.shape());
            println!("values  min {min} max {max} mean {mean}");
        }
    }
    Ok(())
}

fn cmd_proposals(cmd: ProposalsCmd) -> Result<()> {
    let ProposalsCmd::Info { file } = cmd;
    let pf = ProposalFile::read(&file)?;
    let raw = pf.decode()?;
    let set = pf.to_proposal_set()?;
    let overlapping = raw.iter().map(|p| p.mask.count()).sum::<usize>() - set.union().count();
    println!("canvas      {}x{}", pf.width, pf.height);
    println!("masks       {} ({} after de-overlap)", raw.len(), set.len());
    println!("overlap     {overlapping} px");
    for (i, p) in raw.iter().enumerate() {
        println!("  [{i}] area {} confidence {}", p.mask.count(), p.confidence);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Features(c) => cmd_features(c),
        Command::Proposals(c) => cmd_proposals(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
