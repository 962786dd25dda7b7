use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use plumenet::data_io::{
    count_frames, load_kitti_sample, synth_scene, toy_rig, write_kitti_sample, DataError, KittiCalib, KittiPaths,
    StereoSample, SyntheticSceneSpec,
};
use plumenet::evaluation::{evaluate, ApMode, GroundTruthBox};
use plumenet::harness::{
    gradient_suite, infer, read_checkpoint, toy_dataset, train, write_checkpoint, CheckpointHeader, HarnessError, Sgd,
    Stage, TrainConfig, TrainingSample,
};
use plumenet::networks::{
    build_plume, forward, paper_table, shape_plan, Ctx, Heads, Model, NetworkConfig, Trainable, Variant,
};
use plumenet::postproc::{nms, parse_detections, rotated_iou, write_detections, BevBox, PostprocError};
use plumenet::tensor::gradcheck::GradCheckOptions;
use plumenet::tensor::{ParamStore, Tape, Tensor, TensorError};
use plumenet::voxel_grid::{occupancy_from_points, GridError};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "plumenet",
    version,
    about = "Stereo 3D detection and occupancy through a pseudo-LiDAR feature volume"
)]
struct Cli {
    /// JSON training or network config; missing fields take the toy defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    variant: Option<VariantArg>,
    /// Channel multiplier of the network.
    #[arg(long, global = true)]
    scale: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Small,
    Middle,
    Large,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Small => Variant::Small,
            VariantArg::Middle => Variant::Middle,
            VariantArg::Large => Variant::Large,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Toy,
    Micro,
}

impl Preset {
    fn spec(self, seed: u64) -> SyntheticSceneSpec {
        match self {
            Preset::Toy => SyntheticSceneSpec::toy(seed),
            Preset::Micro => SyntheticSceneSpec::micro(seed),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference checks of every differentiable op, both losses and the full network.
    Gradcheck {
        /// Random shapes per op and per loss.
        #[arg(long, default_value_t = 2)]
        cases: usize,
    },
    /// Prints the layer shape plan and diffs it against the reference table.
    Shapes {
        /// Network config; the KITTI-scale default when omitted.
        config: Option<PathBuf>,
    },
    /// Writes synthetic scenes in the KITTI directory layout.
    Synth {
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, value_enum, default_value = "toy")]
        preset: Preset,
    },
    /// Voxelizes a frame's point cloud into an occupancy grid file.
    Occupancy {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Lifts a frame's stereo pixels into the voxel grid and stores the volume.
    BuildPlume {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Stage-wise training; synthetic toy scenes when no data is given.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of synthetic scenes without `--data`.
        #[arg(long, default_value_t = 4)]
        scenes: usize,
    },
    /// Runs a checkpoint on one frame or on every frame of a dataset.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        index: Option<usize>,
        #[arg(long)]
        score_threshold: Option<f64>,
        #[arg(long)]
        nms_iou: Option<f64>,
    },
    /// BEV average precision of detection files against KITTI labels.
    Eval {
        /// Directory of `NNNNNN.txt` detection files.
        #[arg(long)]
        detections: PathBuf,
        /// KITTI root holding `label_2` and `calib`.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value = "Car")]
        class: String,
        #[arg(long)]
        forty_point: bool,
    },
    /// Times the main kernels and a full forward/backward pass.
    Bench {
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
}

#[derive(Debug)]
enum CliError {
    Invalid(String),
    Io(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Invalid(m) => write!(f, "{m}"),
            CliError::Io(m) => write!(f, "I/O error: {m}"),
        }
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Io(_) => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn data_is_io(e: &DataError) -> bool {
    matches!(e, DataError::Io(_) | DataError::Image(_))
}

fn tensor_is_io(e: &TensorError) -> bool {
    matches!(e, TensorError::Io(_))
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        let io = match &e {
            HarnessError::Io(_) => true,
            HarnessError::Data(d) => data_is_io(d),
            HarnessError::Tensor(t) => tensor_is_io(t),
            HarnessError::Grid(g) => matches!(g, GridError::Io(_)),
            HarnessError::Network(plumenet::networks::NetworkError::Tensor(t)) => tensor_is_io(t),
            _ => false,
        };
        if io {
            CliError::Io(e.to_string())
        } else {
            CliError::Invalid(e.to_string())
        }
    }
}

macro_rules! via_harness {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                HarnessError::from(e).into()
            }
        }
    )*};
}

via_harness!(
    DataError,
    TensorError,
    GridError,
    PostprocError,
    plumenet::networks::NetworkError,
    serde_json::Error
);

type Result<T> = std::result::Result<T, CliError>;

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn required_out(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| CliError::Invalid("this command needs --out".into()))
}

/// A config file holds either a whole training config or just its network.
fn parse_config(bytes: &[u8]) -> Result<TrainConfig> {
    let value: serde_json::Value = serde_json::from_slice(bytes)?;
    let is_train = value
        .as_object()
        .is_some_and(|o| o.contains_key("network") || o.contains_key("stage1"));
    if is_train {
        Ok(serde_json::from_value(value)?)
    } else {
        Ok(TrainConfig {
            network: serde_json::from_value(value)?,
            ..TrainConfig::toy()
        })
    }
}

fn load_config(cli: &Cli, path: Option<&Path>, base: TrainConfig) -> Result<TrainConfig> {
    let mut cfg = match path.or(cli.config.as_deref()) {
        Some(p) => parse_config(&read(p)?)?,
        None => base,
    };
    if let Some(v) = cli.variant {
        cfg.network.variant = v.into();
    }
    if let Some(s) = cli.scale {
        cfg.network.scale = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_gradcheck(cli: &Cli, cases: usize) -> Result<()> {
    let entries = gradient_suite(cli.seed, cases, GradCheckOptions::default())?;
    let mut worst: f64 = 0.0;
    let mut failed = 0;
    for e in &entries {
        let ok = e.report.passes(GRADCHECK_TOLERANCE);
        failed += usize::from(!ok);
        worst = worst.max(e.report.max_rel_err);
        println!(
            "{:<18} {:<44} checked {:>4}  max rel err {:.3e}  {}",
            e.name,
            e.shapes,
            e.report.checked,
            e.report.max_rel_err,
            if ok { "ok" } else { "FAIL" }
        );
    }
    println!(
        "{} checks, max relative error {worst:.3e}, tolerance {GRADCHECK_TOLERANCE:e}",
        entries.len()
    );
    if failed > 0 {
        return Err(CliError::Invalid(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

fn cmd_shapes(cli: &Cli, path: Option<&Path>) -> Result<()> {
    let base = TrainConfig {
        network: NetworkConfig::default(),
        ..TrainConfig::toy()
    };
    let cfg = load_config(cli, path, base)?.network;
    let plan = shape_plan(&cfg)?;
    let dims = cfg.grid.grid_dims()?;
    println!("variant {} scale {} grid {:?}", cfg.variant.name(), cfg.scale, dims);
    print!("{}", plan.to_text());
    let diffs = plan.diff(&paper_table(cfg.variant));
    for d in &diffs {
        println!(
            "diff {}: expected {} found {}",
            d.row,
            d.expected.as_deref().unwrap_or("-"),
            d.found.as_deref().unwrap_or("-")
        );
    }
    println!("{} rows differ from the reference table", diffs.len());
    if !diffs.is_empty() {
        return Err(CliError::Invalid("shape plan differs from the reference table".into()));
    }
    Ok(())
}

fn cmd_synth(cli: &Cli, count: usize, preset: Preset) -> Result<()> {
    let root = required_out(cli)?;
    for i in 0..count {
        let scene = synth_scene(&preset.spec(cli.seed.wrapping_add(i as u64)))?;
        write_kitti_sample(root, i, &scene)?;
        println!(
            "{i:06} boxes {} points {} occupied {}",
            scene.sample.gt_boxes.len(),
            scene.sample.cloud.len(),
            scene.labels.occupied_count()
        );
    }
    Ok(())
}

fn cmd_occupancy(cli: &Cli, data: &Path, index: usize) -> Result<()> {
    let cfg = load_config(cli, None, TrainConfig::toy())?.network;
    let sample = load_frame(data, index)?;
    let grid = occupancy_from_points(&cfg.grid, &sample.rig, &sample.cloud, cfg.require_both_cameras);
    let mut bytes = Vec::new();
    grid.write_to(&mut bytes)?;
    write(required_out(cli)?, bytes)?;
    let in_fov = grid.fov_mask.iter().filter(|&&m| m).count();
    println!(
        "dims {:?} points {} occupied {} in view {in_fov}",
        grid.dims(),
        sample.cloud.len(),
        grid.occupied_count()
    );
    Ok(())
}

fn cmd_build_plume(cli: &Cli, data: &Path, index: usize) -> Result<()> {
    let mut cfg = load_config(cli, None, TrainConfig::toy())?.network;
    cfg.image_feature_resolution = Default::default();
    let sample = load_frame(data, index)?;
    let mut tape = Tape::new();
    let l = tape.constant(sample.left.clone());
    let r = tape.constant(sample.right.clone());
    let volume = build_plume(&mut tape, l, r, &cfg.grid, &sample.rig, &cfg)?;
    let values = tape.value(volume.values).clone();
    let shape = values.shape().to_vec();
    let mut store = ParamStore::new();
    store.insert("plume", values);
    let mut bytes = Vec::new();
    store.write_to(&mut bytes)?;
    write(required_out(cli)?, bytes)?;
    println!("volume {shape:?} checksum {:016x}", store.checksum());
    Ok(())
}

fn load_frame(root: &Path, index: usize) -> Result<StereoSample> {
    load_kitti_sample(root, index).map_err(|e| match CliError::from(e) {
        CliError::Io(m) => CliError::Io(format!("{} frame {index:06}: {m}", root.display())),
        other => other,
    })
}

fn load_dataset(root: &Path, cfg: &NetworkConfig) -> Result<Vec<TrainingSample>> {
    (0..count_frames(root)?)
        .map(|i| Ok(TrainingSample::new(load_frame(root, i)?, cfg)))
        .collect()
}

fn cmd_train(cli: &Cli, data: Option<&Path>, scenes: usize) -> Result<()> {
    let mut cfg = load_config(cli, None, TrainConfig::toy())?;
    cfg.seed = cli.seed;
    cfg.stage1.seed = cli.seed;
    cfg.stage2.seed = cli.seed;
    let out = required_out(cli)?;
    let samples = match data {
        Some(root) => load_dataset(root, &cfg.network)?,
        None => toy_dataset(cli.seed, scenes)?,
    };
    let (model, report) = train(&cfg, &samples)?;
    let header = CheckpointHeader {
        network: cfg.network.clone(),
        seed: model.seed,
        optimizer: Sgd::new(cfg.stage1.momentum, cfg.stage1.weight_decay).info(),
        stages_completed: vec![Stage::BackboneOccupancy, Stage::DetectionHead],
    };
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &header, &model.params)?;
    write(&out.join("checkpoint.plmc"), bytes)?;
    write(&out.join("train_report.json"), serde_json::to_vec_pretty(&report)?)?;
    write(&out.join("config.json"), serde_json::to_vec_pretty(&cfg)?)?;
    for stage in [Stage::BackboneOccupancy, Stage::DetectionHead] {
        let losses = report.stage_losses(stage);
        let (first, last) = (
            losses.first().copied().unwrap_or(0.0),
            losses.last().copied().unwrap_or(0.0),
        );
        println!("{} steps {} loss {first:.6} -> {last:.6}", stage.name(), losses.len());
    }
    println!(
        "parameters {} checksum {:016x}",
        model.params.len(),
        model.params.checksum()
    );
    Ok(())
}

fn cmd_infer(
    cli: &Cli,
    checkpoint: &Path,
    data: &Path,
    index: Option<usize>,
    score: Option<f64>,
    nms_iou: Option<f64>,
) -> Result<()> {
    let (header, params) = read_checkpoint(read(checkpoint)?.as_slice())?;
    let defaults = TrainConfig {
        network: header.network.clone(),
        ..TrainConfig::toy()
    };
    let cfg = load_config(cli, None, defaults)?;
    if cfg.network != header.network {
        return Err(
            HarnessError::CheckpointMismatch("the configured network differs from the checkpoint".into()).into(),
        );
    }
    let model = Model {
        config: header.network,
        params,
        seed: header.seed,
    };
    let out = required_out(cli)?;
    let frames: Vec<usize> = match index {
        Some(i) => vec![i],
        None => (0..count_frames(data)?).collect(),
    };
    for i in frames {
        let sample = load_frame(data, i)?;
        let result = infer(
            &model,
            &sample,
            score.unwrap_or(cfg.score_threshold),
            nms_iou.unwrap_or(cfg.nms_iou),
        )?;
        write(
            &out.join("detections").join(format!("{i:06}.txt")),
            write_detections(&result.boxes),
        )?;
        let mut bytes = Vec::new();
        result.occupancy.write_to(&mut bytes)?;
        write(&out.join("occupancy").join(format!("{i:06}.occ")), bytes)?;
        let mut line = format!("{i:06} boxes {}", result.boxes.len());
        if !sample.cloud.is_empty() {
            let labels = occupancy_from_points(
                &model.config.grid,
                &sample.rig,
                &sample.cloud,
                model.config.require_both_cameras,
            );
            line += &format!(" voxel iou {:.4}", result.occupancy.voxel_iou(&labels, 0.5));
        }
        println!("{line}");
    }
    Ok(())
}

/// Ground truth of every labeled frame, moved into the left camera frame.
fn load_labels(root: &Path) -> Result<Vec<(usize, Vec<GroundTruthBox>)>> {
    let mut ids: Vec<usize> = std::fs::read_dir(root.join("label_2"))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension()? == "txt").then(|| p.file_stem()?.to_str()?.parse().ok())?
        })
        .collect();
    ids.sort_unstable();
    ids.into_iter()
        .map(|i| {
            let p = KittiPaths::new(root, i);
            let text = String::from_utf8_lossy(&read(&p.labels)?).into_owned();
            let offset = match std::fs::read_to_string(&p.calib) {
                Ok(c) => KittiCalib::parse(&c)?.left_camera_offset(),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => 0.0,
                Err(e) => return Err(e.into()),
            };
            let gts = plumenet::data_io::parse_kitti_labels(&text)?
                .into_iter()
                .map(|mut g| {
                    g.bev.u += offset;
                    g
                })
                .collect();
            Ok((i, gts))
        })
        .collect()
}

fn cmd_eval(cli: &Cli, detections: &Path, labels: &Path, class: &str, forty: bool) -> Result<()> {
    let frames = load_labels(labels)?;
    let mut dets = Vec::with_capacity(frames.len());
    let mut gts = Vec::with_capacity(frames.len());
    for (i, g) in frames {
        let path = detections.join(format!("{i:06}.txt"));
        let boxes = match std::fs::read_to_string(&path) {
            Ok(text) => parse_detections(&text)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(CliError::Io(format!("{}: {e}", path.display()))),
        };
        dets.push(boxes);
        gts.push(g);
    }
    let mode = if forty { ApMode::FortyPoint } else { ApMode::ElevenPoint };
    let table = evaluate(&dets, &gts, class, mode).map_err(HarnessError::from)?;
    println!("frames {}", dets.len());
    print!("{}", table.to_text());
    if let Some(out) = &cli.out {
        write(out, table.to_csv())?;
    }
    Ok(())
}

fn time_ms(reps: usize, mut f: impl FnMut() -> Result<u64>) -> Result<(f64, u64)> {
    let mut times = Vec::with_capacity(reps);
    let mut check = 0;
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        check = f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok((times[times.len() / 2], check))
}

fn tensor_checksum(t: &Tensor) -> u64 {
    let mut s = ParamStore::new();
    s.insert("t", t.clone());
    s.checksum()
}

fn cmd_bench(cli: &Cli, reps: usize) -> Result<()> {
    let cfg = load_config(cli, None, TrainConfig::toy())?.network;
    let rig = toy_rig();
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    let mut image = || Tensor::from_fn(&[3, rig.image_h, rig.image_w], |_| rng.gen_range(0.0..1.0));
    let sample = StereoSample::new(image(), image(), rig, Vec::new(), Vec::new())?;
    let (h, w) = (sample.rig.image_h, sample.rig.image_w);
    let report = |name: &str, shape: String, (ms, check): (f64, u64)| {
        println!("{name:<18} {shape:<26} median {ms:>10.3} ms  output {check:016x}");
    };

    let x = Tensor::from_fn(&[16, h, w], |i| ((i * 7919) % 101) as f64 / 101.0);
    let k = Tensor::from_fn(&[16, 16, 3, 3], |i| ((i * 104_729) % 37) as f64 / 370.0 - 0.05);
    report(
        "conv2d",
        format!("16x{h}x{w} k3"),
        time_ms(reps, || {
            let mut t = Tape::new();
            let (xv, kv) = (t.constant(x.clone()), t.constant(k.clone()));
            let y = t.conv2d(xv, kv, None, 1, 1, 1)?;
            Ok(tensor_checksum(t.value(y)))
        })?,
    );

    let (nx, ny, nz) = cfg.grid.grid_dims()?;
    let v = Tensor::from_fn(&[8, nx, ny, nz], |i| ((i * 7919) % 101) as f64 / 101.0);
    let k3 = Tensor::from_fn(&[8, 8, 3, 3, 3], |i| ((i * 104_729) % 37) as f64 / 370.0 - 0.05);
    report(
        "conv3d",
        format!("8x{nx}x{ny}x{nz} k3"),
        time_ms(reps, || {
            let mut t = Tape::new();
            let (xv, kv) = (t.constant(v.clone()), t.constant(k3.clone()));
            let y = t.conv3d(xv, kv, None, 1, 1, 1)?;
            Ok(tensor_checksum(t.value(y)))
        })?,
    );

    report(
        "build_plume",
        format!("3x{h}x{w} -> {nx}x{ny}x{nz}"),
        time_ms(reps, || {
            let mut t = Tape::new();
            let (l, r) = (t.constant(sample.left.clone()), t.constant(sample.right.clone()));
            let vol = build_plume(&mut t, l, r, &cfg.grid, &sample.rig, &cfg)?;
            Ok(tensor_checksum(t.value(vol.values)))
        })?,
    );

    let mut model = Model::new(cfg.clone(), cli.seed)?;
    model.initialize(&sample.rig)?;
    report(
        "forward_backward",
        format!("scale {} {}", cfg.scale, cfg.variant.name()),
        time_ms(reps, || {
            let mut t = Tape::new();
            let (l, r) = (t.constant(sample.left.clone()), t.constant(sample.right.clone()));
            let mut params = model.params.clone();
            let mut ctx = Ctx::new(&mut t, &mut params, model.seed, Trainable::All);
            let out = forward(&mut ctx, &cfg, l, r, &sample.rig, Heads::ALL)?;
            let occ = ctx.tape.mean(out.occupancy.expect("requested"));
            ctx.tape.backward(occ)?;
            Ok(ctx.tape.data(occ)[0].to_bits())
        })?,
    );

    let boxes: Vec<BevBox> = (0..400)
        .map(|i| {
            let f = i as f64;
            BevBox::new((f * 0.37) % 20.0, (f * 0.53) % 30.0, 1.6, 3.9, f * 0.1).with_score(1.0 - f / 400.0)
        })
        .collect();
    report(
        "rotated_iou",
        "400x400 pairs".into(),
        time_ms(reps, || {
            let mut acc = 0.0;
            for a in &boxes {
                for b in &boxes {
                    acc += rotated_iou(a, b)?;
                }
            }
            Ok(acc.to_bits())
        })?,
    );
    report(
        "nms",
        "400 boxes iou 0.3".into(),
        time_ms(reps, || Ok(nms(&boxes, 0.3).len() as u64))?,
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gradcheck { cases } => cmd_gradcheck(cli, *cases),
        Command::Shapes { config } => cmd_shapes(cli, config.as_deref()),
        Command::Synth { count, preset } => cmd_synth(cli, *count, *preset),
        Command::Occupancy { data, index } => cmd_occupancy(cli, data, *index),
        Command::BuildPlume { data, index } => cmd_build_plume(cli, data, *index),
        Command::Train { data, scenes } => cmd_train(cli, data.as_deref(), *scenes),
        Command::Infer {
            checkpoint,
            data,
            index,
            score_threshold,
            nms_iou,
        } => cmd_infer(cli, checkpoint, data, *index, *score_threshold, *nms_iou),
        Command::Eval {
            detections,
            labels,
            class,
            forty_point,
        } => cmd_eval(cli, detections, labels, class, *forty_point),
        Command::Bench { reps } => cmd_bench(cli, *reps),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
