//! Command-line frontend. Every subcommand reads and writes files only, so
//! stages compose the same way the `pipeline` subcommand chains them.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gazemap::dataset::{self, EvalOptions, VideoLabels};
use gazemap::fusion::FusionModel;
use gazemap::matching::{GpsTrace, MatchedTrace, Matcher};
use gazemap::osm;
use gazemap::patch::MapPatch;
use gazemap::pipeline::{self, PipelineConfig, SegmentsFile};
use gazemap::raster::RasterMap;

#[derive(Parser)]
#[command(name = "gazemap", version = gazemap::VERSION, about = "Street-map conditioned driver gaze tooling")]
struct Cli {
    /// Pipeline config file (TOML); required by subcommands that read it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for per-segment stages.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    /// Log more (-v debug, -vv trace); logs go to standard error.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse an OSM XML extract into a drivable street graph (JSON).
    ExtractGraph {
        /// OSM XML input.
        #[arg(long)]
        osm: PathBuf,
        /// Output graph JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Map-match a GPS trace and interpolate per-frame fixes (CSV).
    Match {
        #[arg(long)]
        graph: PathBuf,
        /// GPS trace CSV with header t,lat,lon.
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4.07)]
        sigma_z_m: f64,
        #[arg(long, default_value_t = 20.0)]
        beta_m: f64,
        #[arg(long, default_value_t = 1.0)]
        gps_rate_hz: f64,
        #[arg(long, default_value_t = 2.0)]
        frame_rate_hz: f64,
        /// Frames to interpolate; defaults to one frame per GPS period.
        #[arg(long)]
        n_frames: Option<usize>,
    },
    /// Rasterize a street graph to a PGM map with a JSON geo sidecar.
    Rasterize {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        m_per_px: f64,
        #[arg(long, default_value_t = 2.0)]
        line_width_px: f64,
    },
    /// Cut heading-up map+route patches for the kept segments.
    Sample {
        #[arg(long)]
        raster: PathBuf,
        /// Matched frames CSV from `match`.
        #[arg(long)]
        matched: PathBuf,
        /// Segments JSON from `segments`.
        #[arg(long)]
        segments: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 100.0)]
        radius_m: f64,
        #[arg(long, default_value_t = 128)]
        out_size_px: usize,
    },
    /// Run the fusion forward pass over sampled patches.
    Fuse {
        #[arg(long)]
        patches_dir: PathBuf,
        #[arg(long)]
        segments: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Encoder blocks routed through cross-attention, e.g. "2,3,4".
        #[arg(long, default_value = "2,3,4")]
        enc_blocks: String,
        /// Checkpoint to load; omitted means seeded random weights.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 7)]
        scene_seed: u64,
    },
    /// Generate and filter clip segments from a labels CSV.
    Segments {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value = "v1")]
        video: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        clip_len: usize,
        #[arg(long, default_value_t = 8)]
        stride: usize,
    },
    /// Score predictions against ground truth and write report.json.
    Evaluate {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value = "v1")]
        video: String,
        #[arg(long)]
        segments: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 99.5)]
        fixation_percentile: f64,
    },
    /// Run every stage from the config file.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct PipelineArgs {
    /// Override [paths].out_dir from the config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override [patch].radius_m.
    #[arg(long)]
    radius_m: Option<f64>,
    /// Override [raster].m_per_px.
    #[arg(long)]
    m_per_px: Option<f64>,
    /// Override [fusion].seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override [fusion].enc_blocks, e.g. "3" or "2,3,4".
    #[arg(long)]
    enc_blocks: Option<String>,
}

fn parse_enc_blocks(s: &str) -> anyhow::Result<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| Ok(t.parse::<usize>()?))
        .collect()
}

fn load_segments(path: &PathBuf) -> anyhow::Result<SegmentsFile> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.cmd {
        Cmd::ExtractGraph { osm: osm_path, out } => {
            let parsed = osm::parse_osm_file(&osm_path)?;
            log::info!(
                "parsed {} nodes, {} ways ({} drivable); graph has {} edges",
                parsed.stats.nodes_total,
                parsed.stats.ways_total,
                parsed.stats.ways_drivable,
                parsed.graph.edges().len()
            );
            parsed.graph.save_json(out)?;
        }
        Cmd::Match {
            graph,
            trace,
            out,
            sigma_z_m,
            beta_m,
            gps_rate_hz,
            frame_rate_hz,
            n_frames,
        } => {
            let graph = gazemap::osm::StreetGraph::load_json(graph)?;
            let trace = GpsTrace::read_csv_file(trace, gps_rate_hz)?;
            let matcher = Matcher::new(&graph)?;
            let params = gazemap::matching::MatchParams {
                sigma_z_m,
                beta_m,
                ..Default::default()
            };
            let result = matcher.match_trace(&trace, &params)?;
            let span = trace.samples.last().unwrap().t - trace.samples[0].t;
            let n = n_frames.unwrap_or((span * frame_rate_hz).floor() as usize + 1);
            let frames = matcher.interpolate_to_frames(&trace, &result.states, frame_rate_hz, n)?;
            frames.write_csv(out)?;
            log::info!("matched {} observations to {} frames", trace.samples.len(), n);
        }
        Cmd::Rasterize { graph, out, m_per_px, line_width_px } => {
            let graph = gazemap::osm::StreetGraph::load_json(graph)?;
            let raster = RasterMap::rasterize_graph(&graph, m_per_px, line_width_px)?;
            raster.save(&out)?;
            let t = raster.transform();
            log::info!("wrote {} x {} px raster to {}", t.width_px, t.height_px, out.display());
        }
        Cmd::Sample { raster, matched, segments, out_dir, radius_m, out_size_px } => {
            let raster = RasterMap::load(raster)?;
            let matched = MatchedTrace::read_csv(matched)?;
            let segs = load_segments(&segments)?;
            std::fs::create_dir_all(&out_dir)?;
            for seg in &segs.kept {
                let last = seg.last_frame();
                anyhow::ensure!(
                    last < matched.frames.len(),
                    "segment {} needs frame {last}, matched trace has {}",
                    seg.sample_name(),
                    matched.frames.len()
                );
                let route: Vec<_> =
                    matched.frames[seg.start..=last].iter().map(|f| f.point()).collect();
                let fix = &matched.frames[last];
                let heading =
                    gazemap::patch::heading_from_route(&route, Some(fix.heading_deg))?;
                let req = gazemap::patch::PatchRequest::new(
                    fix.point(),
                    heading,
                    radius_m,
                    route,
                    out_size_px,
                )?;
                let patch = gazemap::patch::sample_patch(&raster, &req)?;
                patch.save(out_dir.join(format!("{}.bin", seg.sample_name())))?;
            }
            log::info!("wrote {} patches to {}", segs.kept.len(), out_dir.display());
        }
        Cmd::Fuse {
            patches_dir,
            segments,
            out_dir,
            enc_blocks,
            checkpoint,
            seed,
            scene_seed,
        } => {
            let segs = load_segments(&segments)?;
            let blocks = parse_enc_blocks(&enc_blocks)?;
            let fcfg = pipeline::FusionConfig {
                enc_blocks: blocks,
                seed,
                scene_seed,
                checkpoint: checkpoint.map(|p| p.display().to_string()).unwrap_or_default(),
                ..Default::default()
            };
            let model = if fcfg.checkpoint.is_empty() {
                FusionModel::seeded(fcfg.pyramid(), fcfg.blocks(), fcfg.seed)?
            } else {
                FusionModel::load(&fcfg.checkpoint)?
            };
            std::fs::create_dir_all(&out_dir)?;
            for seg in &segs.kept {
                let name = seg.sample_name();
                let patch = MapPatch::load(patches_dir.join(format!("{name}.bin")))?;
                let scene = gazemap::fusion::synthetic_scene_features(
                    scene_seed ^ pipeline::segment_seed(seg),
                    &model.config,
                )?;
                let outm = model.forward(&patch.channels, &scene)?;
                let (h, w) = outm.dim();
                gazemap::patch::write_f32_tensor(
                    out_dir.join(format!("{name}.bin")),
                    &[h, w],
                    &outm.iter().copied().collect::<Vec<_>>(),
                    Default::default(),
                )?;
            }
            log::info!("wrote {} predictions to {}", segs.kept.len(), out_dir.display());
        }
        Cmd::Segments { labels, video, out, clip_len, stride } => {
            let labels = VideoLabels::read_csv_file(&labels, &video)?;
            let segs = dataset::generate_segments(&video, labels.frames.len(), clip_len, stride);
            let (kept, excluded) = dataset::filter_segments(&segs, &labels)?;
            log::info!("{} segments, {} kept, {} excluded", segs.len(), kept.len(), excluded.len());
            std::fs::write(out, serde_json::to_string_pretty(&SegmentsFile { kept, excluded })?)?;
        }
        Cmd::Evaluate {
            pred_dir,
            gt_dir,
            labels,
            video,
            segments,
            out,
            fixation_percentile,
        } => {
            let labels = VideoLabels::read_csv_file(&labels, &video)?;
            let segs = load_segments(&segments)?;
            let by_video = BTreeMap::from([(video, labels)]);
            let opts = EvalOptions { fixation_percentile, fixations_dir: None };
            let report = dataset::evaluate_run(&segs.kept, &by_video, &pred_dir, &gt_dir, &opts)?;
            report.save_json(&out)?;
            println!("{}", serde_json::to_string(&report.overall)?);
            if report.has_problems() {
                log::error!(
                    "{} missing predictions, {} per-sample errors; see {}",
                    report.missing_predictions.len(),
                    report.errors.len(),
                    out.display()
                );
                return Ok(false);
            }
        }
        Cmd::Pipeline(args) => {
            let config_path = cli
                .config
                .ok_or_else(|| anyhow::anyhow!("--config is required for `pipeline`"))?;
            let mut cfg = PipelineConfig::from_toml_file(&config_path)?;
            if let Some(out_dir) = args.out_dir {
                cfg.paths.out_dir = out_dir;
            }
            if let Some(r) = args.radius_m {
                cfg.patch.radius_m = r;
            }
            if let Some(m) = args.m_per_px {
                cfg.raster.m_per_px = m;
            }
            if let Some(s) = args.seed {
                cfg.fusion.seed = s;
            }
            if let Some(b) = args.enc_blocks {
                cfg.fusion.enc_blocks = parse_enc_blocks(&b)?;
            }
            let report = pipeline::run_pipeline(&cfg, cli.jobs)?;
            println!("{}", serde_json::to_string(&report.overall)?);
            if report.has_problems() {
                log::error!(
                    "{} missing predictions, {} per-sample errors; see {}",
                    report.missing_predictions.len(),
                    report.errors.len(),
                    cfg.report_path().display()
                );
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
