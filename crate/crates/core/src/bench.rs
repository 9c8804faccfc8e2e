//! Full benchmark: every episode of every selected class, metrics and a
//! report whose `payload` is byte-deterministic.
//!
//! Everything that varies between otherwise identical runs (timestamp,
//! wall-clock timings, worker count) lives in the separate `runtime` block.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{build_episodes, scan_dataset, ClassId, Episode};
use crate::error::{Error, Result, ResultExt};
use crate::features::ExtractorSpec;
use crate::fusion::FusionStrategy;
use crate::matching::{PrototypeStrategy, PATCH_STRIDE};
use crate::metrics::{report, MetricLedger, MetricReport, ReportOptions};
use crate::pipeline::{find_proposals, Engine, EngineConfig, EpisodeRecord};

pub const ENGINE_NAME: &str = "fds";
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub root: PathBuf,
    /// Entries of the form `product` or `product/class`; empty means all.
    pub classes: Vec<String>,
    pub shots: usize,
    pub extractor: ExtractorSpec,
    pub proposals_dir: Option<PathBuf>,
    pub engine: EngineConfig,
    pub workers: usize,
    pub report: ReportOptions,
    /// When set, final masks are written to `<dir>/<product>/<class>/<stem>.png`.
    pub save_masks: Option<PathBuf>,
}

impl BenchConfig {
    pub fn new(root: impl Into<PathBuf>, extractor: ExtractorSpec) -> Self {
        BenchConfig {
            root: root.into(),
            classes: Vec::new(),
            shots: 1,
            extractor,
            proposals_dir: None,
            engine: EngineConfig::default(),
            workers: 1,
            report: ReportOptions::default(),
            save_masks: None,
        }
    }

    pub fn echo(&self) -> ConfigEcho {
        let e = &self.engine;
        ConfigEcho {
            tau1: e.fusion.tau1,
            tau2: e.fusion.tau2,
            dilation_k: e.fusion.dilation_k,
            patch_size: e.prototypes.patch_size,
            patch_stride: PATCH_STRIDE,
            fg_strategy: e.prototypes.fg,
            bg_strategy: e.prototypes.bg,
            fusion: e.fusion.strategy,
            shots: self.shots,
            image_side: e.image_side,
            extractor: self.extractor.clone(),
            root: self.root.clone(),
            classes: self.classes.clone(),
            proposals_dir: self.proposals_dir.clone(),
            pooled_fb_iou: self.report.pooled_fb_iou,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub tau1: f64,
    pub tau2: f64,
    pub dilation_k: usize,
    pub patch_size: usize,
    pub patch_stride: usize,
    pub fg_strategy: PrototypeStrategy,
    pub bg_strategy: PrototypeStrategy,
    pub fusion: FusionStrategy,
    pub shots: usize,
    pub image_side: u32,
    pub extractor: ExtractorSpec,
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub proposals_dir: Option<PathBuf>,
    pub pooled_fb_iou: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineInfo {
    pub name: String,
    pub version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchEpisode {
    pub product: String,
    pub class: String,
    #[serde(flatten)]
    pub record: EpisodeRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchPayload {
    pub engine: EngineInfo,
    pub config: ConfigEcho,
    pub metrics: MetricReport,
    pub episodes: Vec<BenchEpisode>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub episodes: usize,
    pub total_ms: f64,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub fps: f64,
}

impl TimingStats {
    pub fn from_samples(ms: &[f64], wall_ms: f64) -> Self {
        if ms.is_empty() {
            return TimingStats::default();
        }
        let mut sorted = ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        TimingStats {
            episodes: n,
            total_ms: wall_ms,
            mean_ms: sorted.iter().sum::<f64>() / n as f64,
            median_ms: median,
            min_ms: sorted[0],
            max_ms: sorted[n - 1],
            fps: if wall_ms > 0.0 { n as f64 / (wall_ms / 1e3) } else { 0.0 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeInfo {
    pub timestamp_unix: u64,
    pub workers: usize,
    pub timing: TimingStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub payload: BenchPayload,
    pub runtime: RuntimeInfo,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn payload_json(&self) -> String {
        serde_json::to_string_pretty(&self.payload).expect("report serializes") + "\n"
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

struct Outcome {
    episode: BenchEpisode,
    ledger: MetricLedger,
    ms: f64,
}

fn run_one(engine: &Engine, cfg: &BenchConfig, ep: &Episode) -> Result<Outcome> {
    let start = Instant::now();
    let side = engine.config().image_side;
    let loaded = ep.load(side)?;
    let q = &loaded.query;
    let proposals = match &cfg.proposals_dir {
        Some(dir) => find_proposals(dir, &q.key, side as usize)?,
        None => crate::maskops::ProposalSet::empty(side as usize, side as usize),
    };
    let seg = engine.segment(&loaded.supports, &q.image, &q.key, Some(&proposals))?;
    let mut ledger = MetricLedger::new();
    ledger.accumulate(&ep.class_id, seg.mask(), &q.mask)?;
    let record = EpisodeRecord::new(&q.key, &loaded.supports, &seg, proposals.len(), Some(&q.mask))?;
    if let Some(dir) = &cfg.save_masks {
        let d = dir.join(&ep.class_id.product).join(&ep.class_id.class);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        seg.mask().save(&d.join(format!("{}.png", q.key.stem)))?;
    }
    Ok(Outcome {
        episode: BenchEpisode {
            product: ep.class_id.product.clone(),
            class: ep.class_id.class.clone(),
            record,
        },
        ledger,
        ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Lists the episodes a benchmark run would evaluate, in report order.
pub fn plan_episodes(cfg: &BenchConfig) -> Result<Vec<Episode>> {
    let index = scan_dataset(&cfg.root)?;
    let classes: Vec<ClassId> = index.select(&cfg.classes)?;
    let mut episodes = Vec::new();
    for id in &classes {
        episodes.extend(build_episodes(&index, id, cfg.shots)?);
    }
    if episodes.is_empty() {
        return Err(Error::Dataset("zero episodes selected".into()));
    }
    Ok(episodes)
}

pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchReport> {
    let episodes = plan_episodes(cfg)?;
    let engine = Engine::new(&cfg.extractor, cfg.engine)?;
    let workers = cfg.workers.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start {workers} workers: {e}")))?;
    log::info!("running {} episodes on {workers} worker(s)", episodes.len());

    let start = Instant::now();
    let outcomes: Vec<Outcome> = pool.install(|| {
        episodes
            .par_iter()
            .map(|ep| {
                run_one(&engine, cfg, ep)
                    .context(|| format!("episode {} query '{}'", ep.class_id, ep.query.stem))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;

    let mut ledger = MetricLedger::new();
    for o in &outcomes {
        ledger.merge(&o.ledger);
    }
    let metrics = report(&ledger, cfg.report)?;
    let ms: Vec<f64> = outcomes.iter().map(|o| o.ms).collect();
    let timestamp_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);

    Ok(BenchReport {
        payload: BenchPayload {
            engine: EngineInfo {
                name: ENGINE_NAME.into(),
                version: ENGINE_VERSION.into(),
            },
            config: cfg.echo(),
            metrics,
            episodes: outcomes.into_iter().map(|o| o.episode).collect(),
        },
        runtime: RuntimeInfo {
            timestamp_unix,
            workers,
            timing: TimingStats::from_samples(&ms, wall_ms),
        },
    })
}
