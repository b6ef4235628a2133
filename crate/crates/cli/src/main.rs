use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use casmtr::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use casmtr::detect::Detector;
use casmtr::harness::{
    self, error_curves, evaluate, load_corpus, match_overlay, EvalReport, MatchSource, PairMode, RunConfig, Task,
};
use casmtr::imageio::Image;
use casmtr::matcher::Model;
use casmtr::nn::ParamStore;
use casmtr::training::{Stage, StagePlan, TrainConfig, TrainSample, Trainer};
use casmtr::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "casmtr", version, about = "Cascaded transformer image matching")]
struct Cli {
    /// Run configuration (JSON); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(flatten)]
    detector: DetectorArgs,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum DetectorKind {
    None,
    Nms,
    Grid,
    Threshold,
}

#[derive(Args, Debug)]
struct DetectorArgs {
    #[arg(long, global = true, value_enum)]
    detector: Option<DetectorKind>,
    #[arg(long, global = true)]
    nms_kernel: Option<usize>,
    #[arg(long, global = true)]
    grid_cell: Option<usize>,
    #[arg(long, global = true)]
    conf_thr: Option<f64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Homography,
    TwoView,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic pair corpus.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Directory of source images instead of procedural textures.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
    },
    /// Train on a corpus and write a checkpoint.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Checkpoint to write.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Progressive schedule with N / 2N / N steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Train a single stage instead of the schedule.
        #[arg(long, value_parser = parse_stage)]
        stage: Option<Stage>,
        /// Checkpoint to start from (required for pmt).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        eval_every: Option<usize>,
    },
    /// Match one image pair.
    Match {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image_a: PathBuf,
        #[arg(long)]
        image_b: PathBuf,
        /// MatchSet JSON-lines output.
        #[arg(long)]
        out: PathBuf,
        /// Confidence map output (raw f32 plus a JSON header).
        #[arg(long)]
        confidence: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<usize>>,
        /// Match overlay PNG.
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Homography AUC of corner error.
    EvalHomography(EvalArgs),
    /// Relative pose AUC.
    EvalPose(EvalArgs),
    /// Per-stage timing table.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<usize>>,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Finite-difference gradient checks (float64).
    GradCheck {
        /// Operator name or `all`.
        #[arg(long, default_value = "all")]
        op: String,
        #[arg(long, default_value_t = 6)]
        grid: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use exact ground-truth matches instead of a model.
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Square resolutions of a sweep.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<usize>>,
    /// Extra detector rows, e.g. `none,nms-5,grid-4,thr-0.5`.
    #[arg(long, value_delimiter = ',', value_parser = parse_detector)]
    compare: Option<Vec<Detector>>,
    #[arg(long)]
    max_pairs: Option<usize>,
    /// Report JSON output.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Directory for the cumulative error curve.
    #[arg(long)]
    plots: Option<PathBuf>,
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("unknown stage {s:?}; expected coarse_only, cascade_4c, cascade_2c or pmt"))
}

fn parse_detector(s: &str) -> std::result::Result<Detector, String> {
    let d = if s == "none" {
        Detector::None
    } else if let Some(k) = s.strip_prefix("nms-") {
        Detector::Nms { kernel: k.parse().map_err(|_| format!("bad NMS kernel in {s:?}"))? }
    } else if let Some(c) = s.strip_prefix("grid-") {
        Detector::Grid { cell: c.parse().map_err(|_| format!("bad grid cell in {s:?}"))? }
    } else if let Some(t) = s.strip_prefix("thr-") {
        Detector::Threshold { thr: t.parse().map_err(|_| format!("bad threshold in {s:?}"))? }
    } else {
        return Err(format!("unknown detector {s:?}; expected none, nms-K, grid-C or thr-X"));
    };
    d.validate().map_err(|e| e.to_string())?;
    Ok(d)
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

impl DetectorArgs {
    fn apply(&self, base: Detector) -> Detector {
        let kernel = self.nms_kernel.or(match base {
            Detector::Nms { kernel } => Some(kernel),
            _ => None,
        });
        let cell = self.grid_cell.or(match base {
            Detector::Grid { cell } => Some(cell),
            _ => None,
        });
        let thr = self.conf_thr.or(match base {
            Detector::Threshold { thr } => Some(thr),
            _ => None,
        });
        let kind = self.detector.unwrap_or(match base {
            Detector::None => DetectorKind::None,
            Detector::Nms { .. } => DetectorKind::Nms,
            Detector::Grid { .. } => DetectorKind::Grid,
            Detector::Threshold { .. } => DetectorKind::Threshold,
        });
        match kind {
            DetectorKind::None => Detector::None,
            DetectorKind::Nms => Detector::Nms { kernel: kernel.unwrap_or(5) },
            DetectorKind::Grid => Detector::Grid { cell: cell.unwrap_or(4) },
            DetectorKind::Threshold => Detector::Threshold { thr: thr.unwrap_or(0.5) },
        }
    }
}

fn load_model(cfg: &RunConfig, flag: &Option<PathBuf>) -> Result<(Model, ParamStore<f32>)> {
    let path = flag
        .clone()
        .or_else(|| cfg.output.checkpoint.as_ref().map(PathBuf::from))
        .ok_or_else(|| invalid("no checkpoint given (--checkpoint or output.checkpoint)"))?;
    load_checkpoint(&path)?.build()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    cfg.detector = cli.detector.apply(cfg.detector);
    match cli.cmd {
        Command::GenData { out, pairs, mode, images, width, height } => {
            if let Some(n) = pairs {
                cfg.data.pairs = n;
            }
            if let Some(m) = mode {
                cfg.data.mode = match m {
                    ModeArg::Homography => PairMode::Homography,
                    ModeArg::TwoView => PairMode::TwoView,
                };
            }
            if let Some(i) = images {
                cfg.data.images = Some(path_str(&i));
            }
            cfg.data.width = width.unwrap_or(cfg.data.width);
            cfg.data.height = height.unwrap_or(cfg.data.height);
            cfg.validate()?;
            let out = out
                .or_else(|| cfg.data.dir.as_ref().map(PathBuf::from))
                .ok_or_else(|| invalid("no output directory (--out or data.dir)"))?;
            let stems = harness::gen_data(&cfg.data, &out, cfg.seed)?;
            println!("wrote {} pairs to {}", stems.len(), out.display());
        }
        Command::Train { data, eval_data, out, steps, stage, init, metrics, eval_every } => {
            if let Some(d) = data {
                cfg.data.dir = Some(path_str(&d));
            }
            if let Some(d) = eval_data {
                cfg.data.eval_dir = Some(path_str(&d));
            }
            if let Some(o) = out {
                cfg.output.checkpoint = Some(path_str(&o));
            }
            if let Some(m) = metrics {
                cfg.output.metrics = Some(path_str(&m));
            }
            if let Some(e) = eval_every {
                cfg.output.eval_every = e;
            }
            if let Some(i) = init {
                cfg.train.init = Some(path_str(&i));
            }
            match (stage, steps) {
                (Some(s), n) => cfg.train.schedule = vec![StagePlan { stage: s, steps: n.unwrap_or(100) }],
                (None, Some(n)) => cfg.train.schedule = TrainConfig::progressive(n),
                (None, None) => {}
            }
            cfg.validate()?;
            train(&cfg)?;
        }
        Command::Match { checkpoint, image_a, image_b, out, confidence, scales, overlay } => {
            cfg.validate()?;
            let (model, store) = load_model(&cfg, &checkpoint)?;
            let (a, b) = (Image::load(&image_a)?, Image::load(&image_b)?);
            let res = model.run(&store, &a, &b, scales.as_deref())?;
            let kept = cfg.detector.apply(&res.confidence, &res.matches)?;
            kept.save(&out)?;
            if let Some(c) = confidence {
                res.confidence.save(&c)?;
            }
            if let Some(o) = overlay {
                match_overlay(&a, &b, &kept, 400, &o)?;
            }
            println!("{} matches ({} before {})", kept.len(), res.matches.len(), cfg.detector.label());
        }
        Command::EvalHomography(args) => eval_cmd(cfg, args, Task::Homography)?,
        Command::EvalPose(args) => eval_cmd(cfg, args, Task::Pose)?,
        Command::Bench { checkpoint, size, scales, runs, json } => {
            cfg.validate()?;
            let (model, store) = load_model(&cfg, &checkpoint)?;
            let r = harness::bench(&model, &store, size, scales.as_deref(), cfg.detector, runs, cfg.seed)?;
            print!("{}", r.table());
            if let Some(p) = json {
                write_text(&p, &serde_json::to_string_pretty(&r)?)?;
            }
        }
        Command::GradCheck { op, grid, tol } => {
            cfg.validate()?;
            let ops: Vec<&str> = if op == "all" { harness::GRAD_OPS.to_vec() } else { vec![op.as_str()] };
            let mut failed = Vec::new();
            for o in ops {
                let r = harness::grad_check(o, grid, tol, cfg.seed)?;
                println!("[{o}] max rel err {:.3e} {}", r.max_rel_err(), if r.passed() { "ok" } else { "FAIL" });
                if !r.passed() {
                    print!("{r}");
                    failed.push(o.to_string());
                }
            }
            if !failed.is_empty() {
                return Err(Error::Runtime(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn task_of(mode: PairMode) -> Task {
    match mode {
        PairMode::Homography => Task::Homography,
        PairMode::TwoView => Task::Pose,
    }
}

fn train(cfg: &RunConfig) -> Result<()> {
    let data = cfg.data.dir.as_ref().ok_or_else(|| invalid("no training corpus (--data or data.dir)"))?;
    let ckpt = cfg.output.checkpoint.clone().ok_or_else(|| invalid("no checkpoint path (--out or output.checkpoint)"))?;
    let pairs = load_corpus(Path::new(data))?;
    let eval_pairs = match &cfg.data.eval_dir {
        Some(d) => load_corpus(Path::new(d))?,
        None => Vec::new(),
    };
    let pmt = cfg.train.schedule.iter().any(|p| p.stage == Stage::Pmt);
    let (model, store) = match &cfg.train.init {
        Some(p) => {
            let ck = load_checkpoint(Path::new(p))?;
            let mut m = ck.manifest.model.clone();
            m.ladder |= pmt;
            ck.build_with(&m, &ck.manifest.attention)?
        }
        None => {
            let mut m = cfg.model.clone();
            if m.matcher.train_size.is_none() {
                let (w, h) = pairs[0].size();
                m.matcher.train_size = Some([w, h]);
            }
            let mut store = ParamStore::new();
            let model = Model::new(&mut store, &m, &cfg.attention, cfg.seed)?;
            (model, store)
        }
    };
    let strides: Vec<usize> = model.cfg.matcher.scales.clone();
    let samples = pairs.iter().map(|p| TrainSample::new(p, &strides)).collect::<Result<Vec<_>>>()?;
    let mut log_file = match &cfg.output.metrics {
        Some(p) => {
            if let Some(dir) = Path::new(p).parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            Some(std::io::BufWriter::new(std::fs::File::create(p)?))
        }
        None => None,
    };
    let task = task_of(cfg.data.mode);
    let mut trainer = Trainer::new(&model, store, cfg.train.clone(), &samples)?;
    let eval_every = cfg.output.eval_every;
    let mut last_stage = None;
    trainer.run(&mut |rec, store| {
        use std::io::Write;
        last_stage = Some(rec.stage);
        let mut line = serde_json::to_value(rec)?;
        line["kind"] = "step".into();
        if rec.step % 10 == 0 {
            log::info!("{} step {} loss {:.4}", rec.stage.label(), rec.step, rec.loss);
        }
        let mut lines = vec![line];
        if eval_every > 0 && !eval_pairs.is_empty() && (rec.global_step + 1) % eval_every == 0 {
            let scales = model.cfg.matcher.scales[..rec.stage.levels()].to_vec();
            let ecfg = harness::EvalConfig { scales: Some(scales), sizes: Vec::new(), ..cfg.eval.clone() };
            let rep = evaluate(task, &MatchSource::Model { model: &model, store }, &eval_pairs, &[cfg.detector], &ecfg, cfg.seed)?;
            let row = &rep.rows[0];
            println!("step {} eval AUC {:?}", rec.global_step + 1, row.auc);
            lines.push(serde_json::json!({
                "kind": "eval",
                "global_step": rec.global_step + 1,
                "stage": rec.stage,
                "task": task,
                "thresholds": row.thresholds,
                "auc": row.auc,
                "mean_matches": row.mean_matches,
            }));
        }
        if let Some(f) = log_file.as_mut() {
            for l in lines {
                writeln!(f, "{}", serde_json::to_string(&l)?)?;
            }
        }
        Ok(())
    })?;
    let steps = cfg.train.schedule.iter().map(|p| p.steps).sum();
    let meta = CheckpointMeta { stage: last_stage.map(|s| s.label().to_string()), steps, seed: cfg.seed };
    let manifest = save_checkpoint(Path::new(&ckpt), &model.cfg, &model.attention, &trainer.store, meta)?;
    println!("wrote checkpoint {ckpt} ({} tensors, digest {})", manifest.tensors.len(), &manifest.digest[..12]);
    Ok(())
}

fn eval_cmd(mut cfg: RunConfig, args: EvalArgs, task: Task) -> Result<()> {
    if let Some(s) = args.sizes {
        cfg.eval.sizes = s;
    }
    if let Some(s) = args.scales {
        cfg.eval.scales = Some(s);
    }
    if let Some(c) = args.compare {
        cfg.eval.detectors = c;
    }
    if let Some(m) = args.max_pairs {
        cfg.eval.max_pairs = Some(m);
    }
    if let Some(d) = args.data {
        cfg.data.dir = Some(path_str(&d));
    }
    cfg.validate()?;
    if args.oracle && args.checkpoint.is_some() {
        return Err(invalid("--oracle and --checkpoint are exclusive"));
    }
    let dir = cfg.data.dir.as_ref().ok_or_else(|| invalid("no evaluation corpus (--data or data.dir)"))?;
    let pairs = load_corpus(Path::new(dir))?;
    let mut detectors = vec![cfg.detector];
    for d in &cfg.eval.detectors {
        if !detectors.contains(d) {
            detectors.push(*d);
        }
    }
    let loaded;
    let source = if args.oracle {
        MatchSource::Oracle
    } else {
        loaded = load_model(&cfg, &args.checkpoint)?;
        MatchSource::Model { model: &loaded.0, store: &loaded.1 }
    };
    let report: EvalReport = evaluate(task, &source, &pairs, &detectors, &cfg.eval, cfg.seed)?;
    print!("{}", report.table());
    let report_path = args
        .report
        .or_else(|| cfg.output.dir.as_ref().map(|d| Path::new(d).join(format!("report_{}.json", task.label()))));
    if let Some(p) = report_path {
        report.save(&p)?;
    }
    if let Some(m) = args.metrics.or_else(|| cfg.output.metrics.as_ref().map(PathBuf::from)) {
        write_text(&m, &report.jsonl()?)?;
    }
    let plots = args.plots.or_else(|| cfg.output.dir.as_ref().filter(|_| cfg.output.plots).map(PathBuf::from));
    if let Some(d) = plots {
        error_curves(&report, &d.join(format!("curve_{}.png", task.label())))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
