use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use tubekit::combine::{self, Source};
use tubekit::eval::{self, EvalReport};
use tubekit::io;
use tubekit::mgp::{self, PropagationMode, PropagationPlan};
use tubekit::pipeline::{self, FlowProvider, PipelineInputs, Stages};
use tubekit::rescoring::{self, BayesClassifier1D, RescoreParams, Statistic};
use tubekit::synth::{self, SynthSpec};
use tubekit::tracker::{build_tubelets, AnchorPolicy, FlowSnapTracker, Tubelet};
use tubekit::{mcs, ClipDetections, PipelineConfig};

#[derive(Parser)]
#[command(name = "tubekit", version, about = "Temporal post-processing for video object detections")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Penalize classes outside each clip's high-confidence set.
    Mcs {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Propagate detections to neighbouring frames along optical flow.
    Mgp {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        flow_dir: Option<PathBuf>,
        #[arg(long, default_value = "motion")]
        mode: PropagationMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grow tubelets from high-confidence anchors.
    Track {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        flow_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Max-pool, classify and remap tubelet scores.
    Rescore {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        tubelets: PathBuf,
        #[arg(long)]
        dets: PathBuf,
        /// Ground truth to fit the classifier on.
        #[arg(long, conflicts_with = "model", requires = "model_out")]
        fit: Option<PathBuf>,
        #[arg(long)]
        model_out: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Normalize detection files and fuse them with NMS.
    Combine {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "in", required = true)]
        inputs: Vec<PathBuf>,
        /// Fuse scores as given instead of min-max mapping each input.
        #[arg(long)]
        no_normalize: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy score averaging across detection files.
    Average {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "in", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean average precision.
    EvalMap {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long, default_value_t = 30)]
        num_classes: u32,
    },
    /// Correct localization over annotated frames.
    EvalCorloc {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// JSON object mapping clip id to target class; defaults to each
        /// clip's most frequent ground-truth class.
        #[arg(long)]
        targets: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        num_classes: u32,
    },
    /// Write synthetic detections, ground truth and flow.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the selected stages end to end.
    Pipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, required = true)]
        dets: Vec<PathBuf>,
        #[arg(long)]
        flow_dir: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "mcs,mgp,track,rescore,combine,eval")]
        stages: Stages,
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    Ok(match path {
        Some(p) => io::read_config(p)?,
        None => PipelineConfig::default(),
    })
}

fn load_flows(dir: Option<&Path>, clip: &ClipDetections) -> Result<tubekit::FlowSet> {
    Ok(match dir {
        Some(d) => io::load_flow_set(d, clip)?,
        None => tubekit::FlowSet::new(clip.clip_id.clone()),
    })
}

fn read_tubelets(path: &Path) -> Result<Vec<Tubelet>> {
    let tubes: Vec<Tubelet> = io::read_json_lines(path)?;
    for (i, t) in tubes.iter().enumerate() {
        t.validate()
            .with_context(|| format!("{}: tubelet {}", path.display(), i + 1))?;
    }
    Ok(tubes)
}

fn print_report(report: &EvalReport) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(report)?);
    print!("{}", report.to_table());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Mcs { config, input, out } => {
            let cfg = load_config(config.as_deref())?;
            let clips = io::read_detections(&input, cfg.num_classes)?;
            let out_clips = clips
                .iter()
                .map(|c| mcs::apply(c, cfg.mcs_ratio, cfg.mcs_penalty))
                .collect::<tubekit::Result<Vec<_>>>()?;
            io::write_detections(&out_clips, &out)?;
        }
        Command::Mgp {
            config,
            input,
            flow_dir,
            mode,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            if flow_dir.is_none() && mode == PropagationMode::MotionGuided && cfg.mgp_window > 1 {
                bail!(tubekit::Error::Config("motion-guided propagation needs --flow-dir".into()));
            }
            let plan = PropagationPlan::new(cfg.mgp_window, mode)?;
            let mut out_clips = Vec::new();
            for clip in io::read_detections(&input, cfg.num_classes)? {
                let dense = mgp::interpolate_stride(&clip, cfg.frame_stride, cfg.nms_iou)?;
                let flows = load_flows(flow_dir.as_deref(), &dense)?;
                let (c, stats) = mgp::propagate(&dense, &flows, plan, cfg.nms_iou)?;
                eprintln!(
                    "{}: propagated {} dropped {}",
                    clip.clip_id, stats.propagated, stats.dropped
                );
                out_clips.push(c);
            }
            io::write_detections(&out_clips, &out)?;
        }
        Command::Track {
            config,
            input,
            flow_dir,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let tracker = FlowSnapTracker::from_config(&cfg);
            let policy = AnchorPolicy::from_config(&cfg);
            let mut tubes = Vec::new();
            for clip in io::read_detections(&input, cfg.num_classes)? {
                let flows = io::load_flow_set(&flow_dir, &clip)?;
                tubes.extend(build_tubelets(&clip, &flows, &tracker, policy)?);
            }
            io::write_json_lines(&tubes, &out)?;
        }
        Command::Rescore {
            config,
            tubelets,
            dets,
            fit,
            model_out,
            model,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let clips: BTreeMap<String, ClipDetections> = io::read_detections(&dets, cfg.num_classes)?
                .into_iter()
                .map(|c| (c.clip_id.clone(), c))
                .collect();
            let pooled = read_tubelets(&tubelets)?
                .iter()
                .map(|t| match clips.get(&t.clip_id) {
                    Some(c) => Ok(rescoring::spatial_max_pool(t, c, cfg.maxpool_iou)),
                    None => bail!(tubekit::Error::Invalid(format!(
                        "tubelet clip `{}` not in {}",
                        t.clip_id,
                        dets.display()
                    ))),
                })
                .collect::<Result<Vec<_>>>()?;
            let params = RescoreParams {
                statistic: Statistic::TopK,
                k: cfg.topk_k,
                positive_range: cfg.positive_range,
                negative_range: cfg.negative_range,
            };
            let clf: BayesClassifier1D = match (fit, model) {
                (Some(gt_path), None) => {
                    let gt = io::read_ground_truth(&gt_path)?;
                    let clf = rescoring::fit_from_ground_truth(&pooled, &gt, cfg.label_iou, params.statistic, params.k)?;
                    io::write_json(&clf, model_out.as_ref().expect("clap requires --model-out"))?;
                    clf
                }
                (None, Some(m)) => io::read_json(&m)?,
                _ => bail!(tubekit::Error::Config("give either --fit with --model-out, or --model".into())),
            };
            let rescored: Vec<Tubelet> = rescoring::rescore(&pooled, &clf, params)?
                .into_iter()
                .map(|r| r.tubelet)
                .collect();
            io::write_json_lines(&rescored, &out)?;
        }
        Command::Combine {
            config,
            inputs,
            no_normalize,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let ids = pipeline::source_ids(&inputs);
            let mut sources = Vec::new();
            for (id, path) in ids.into_iter().zip(&inputs) {
                let clips = io::read_detections(path, cfg.num_classes)?;
                let clips = if no_normalize {
                    clips
                } else {
                    combine::minmax_normalize(&clips, cfg.minmax_scope)
                };
                sources.push(Source::new(id, clips));
            }
            io::write_detections(&combine::combine(&sources, cfg.nms_iou)?, &out)?;
        }
        Command::Average {
            config,
            inputs,
            gt,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let gt = io::read_ground_truth(&gt)?;
            let ids = pipeline::source_ids(&inputs);
            let mut sources = Vec::new();
            for (id, path) in ids.into_iter().zip(&inputs) {
                sources.push(Source::new(id, io::read_detections(path, cfg.num_classes)?));
            }
            let g = combine::greedy_average(&sources, cfg.nms_iou, cfg.greedy_epsilon, |clips| {
                Ok(eval::mean_ap(clips, &gt, cfg.matching_iou)?.mean_ap)
            })?;
            eprintln!("selected {:?}, mean AP trace {:?}", g.selected, g.trace);
            io::write_detections(&g.averaged, &out)?;
        }
        Command::EvalMap {
            dets,
            gt,
            iou,
            num_classes,
        } => {
            let clips = io::read_detections(&dets, num_classes)?;
            let gt = io::read_ground_truth(&gt)?;
            print_report(&eval::mean_ap(&clips, &gt, iou)?)?;
        }
        Command::EvalCorloc {
            dets,
            gt,
            targets,
            num_classes,
        } => {
            let clips = io::read_detections(&dets, num_classes)?;
            let gt = io::read_ground_truth(&gt)?;
            let targets: BTreeMap<String, u32> = match targets {
                Some(p) => io::read_json(&p)?,
                None => eval::targets_from_ground_truth(&gt),
            };
            let c = eval::corloc(&clips, &gt, &targets)?;
            println!("{}", serde_json::to_string_pretty(&c)?);
            println!("{:<12}{:>10}{:>10}", "frames", "localized", "corloc");
            println!("{:<12}{:>10}{:>10.4}", c.frames, c.localized, c.value);
        }
        Command::Synth { spec, out_dir } => {
            let spec: SynthSpec = match spec {
                Some(p) => io::read_json(&p)?,
                None => SynthSpec::default(),
            };
            let m = synth::write_fixtures(&spec, &out_dir)?;
            eprintln!("wrote {} files to {}", m.files.len() + 1, out_dir.display());
        }
        Command::Pipeline {
            config,
            dets,
            flow_dir,
            gt,
            model,
            out_dir,
            stages,
            workers,
        } => {
            let cfg = load_config(config.as_deref())?;
            let ids = pipeline::source_ids(&dets);
            let mut inputs = PipelineInputs {
                flows: flow_dir.clone().map_or(FlowProvider::None, FlowProvider::Dir),
                ..Default::default()
            };
            for (id, path) in ids.into_iter().zip(&dets) {
                inputs
                    .sources
                    .push(Source::new(id, io::read_detections(path, cfg.num_classes)?));
            }
            let mut files: Vec<PathBuf> = dets.clone();
            if let Some(g) = &gt {
                inputs.ground_truth = Some(io::read_ground_truth(g)?);
                files.push(g.clone());
            }
            if let Some(m) = &model {
                inputs.classifier = Some(io::read_json(m)?);
                files.push(m.clone());
            }
            files.extend(config);
            let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build()?;
            let output = pool.install(|| pipeline::run_pipeline(&cfg, &stages, &inputs))?;
            pipeline::write_run(&out_dir, &cfg, &stages, &files, &output)?;
            for note in &output.notes {
                eprintln!("note: {note}");
            }
            if let Some(r) = &output.report {
                print_report(r)?;
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<tubekit::Error>())
        .map_or(2, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
