//! `cacvit` command-line driver: dataset generation, training, evaluation,
//! inference, attention dumps and gradient checks.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use cacvit_core::attention::token_maps;
use cacvit_core::data::{build_split, parse_box, SceneSpec};
use cacvit_core::image::{encode_pgm, read_image, write_density, write_pgm, BBox, DensityMap};
use cacvit_core::model::{checkpoint_config_pairs, prepare_exemplars, Model, ModelConfig};
use cacvit_core::suite::{check_end_to_end, check_op, checked_ops, SuiteRow};
use cacvit_core::train::{
    ablation_csv, ablation_grid, evaluate, load_split, train, OptimConfig, TrainOptions, BEST_CHECKPOINT,
};
use cacvit_core::{Error, OpKind};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Minimum number of parameters probed by the end-to-end gradient check.
pub const GRADCHECK_PARAMS: usize = 200;

#[derive(Parser, Debug)]
#[command(name = "cacvit", version, about = "Class-agnostic counting with a plain vision transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate train/val/test splits of the synthetic benchmark.
    GenData,
    /// Train a model (or the ablation grid with --ablate).
    Train,
    /// Evaluate a checkpoint on a split.
    Eval,
    /// Count objects in one image given exemplar boxes.
    Infer,
    /// Dump per-layer attention maps as PGM images.
    InspectAttention,
    /// Finite-difference check of every op and of the full model.
    Gradcheck,
}

#[derive(clap::Args, Debug, Default)]
pub struct Flags {
    /// key=value configuration file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for model init, data order and data generation
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (the dataset directory for gen-data)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite a non-empty output directory
    #[arg(long, global = true)]
    pub force: bool,
    /// Number of exemplars per image
    #[arg(long, global = true)]
    pub shots: Option<usize>,
    /// Run the five-row ablation grid
    #[arg(long, global = true)]
    pub ablate: bool,
    /// Count threshold separating the low and high density buckets
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    /// Encoder layer to dump (all layers when omitted)
    #[arg(long, global = true)]
    pub layer: Option<usize>,
    /// Exemplar boxes `x,y,w,h[;x,y,w,h...]`
    #[arg(long, global = true)]
    pub boxes: Option<String>,
    /// Model checkpoint (defaults to <out_dir>/best.ckpt)
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Query image in the CVDM format
    #[arg(long, global = true)]
    pub image: Option<PathBuf>,
    /// Dataset split to evaluate
    #[arg(long, global = true)]
    pub split: Option<String>,
    /// Continue training from <out_dir>/state.bin
    #[arg(long, global = true)]
    pub resume: bool,
    /// Restrict the gradient check to one op (or `end-to-end`)
    #[arg(long, global = true)]
    pub op: Option<String>,
    #[arg(long, global = true, hide = true)]
    pub corrupt: Option<String>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
    Failed(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(Error::Numerical(_) | Error::NonFinite { .. }) | CliError::Failed(_) => EXIT_NUMERICAL,
            CliError::Core(_) => EXIT_DATA,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Merged model, optimizer, scene and path settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub scene: SceneSpec,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub eval_split: String,
    pub threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            optim: OptimConfig::desk(),
            scene: SceneSpec::default(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/desk"),
            n_train: 512,
            n_val: 128,
            n_test: 128,
            eval_split: "val".into(),
            threshold: 6.0,
        }
    }
}

const PATH_KEYS: [&str; 7] = ["data_dir", "out_dir", "n_train", "n_val", "n_test", "eval_split", "threshold"];

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let bad = || CliError::Core(Error::Config(format!("{key}: cannot parse {value:?}")));
        match key {
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "n_train" => self.n_train = value.parse().map_err(|_| bad())?,
            "n_val" => self.n_val = value.parse().map_err(|_| bad())?,
            "n_test" => self.n_test = value.parse().map_err(|_| bad())?,
            "eval_split" => self.eval_split = value.to_string(),
            "threshold" => self.threshold = value.parse().map_err(|_| bad())?,
            _ => {
                let known = self.model.set(key, value)? || self.optim.set(key, value)? || self.scene.set(key, value)?;
                if !known {
                    return Err(CliError::Core(Error::Config(format!("unknown config key {key:?}"))));
                }
                if key == "shots" {
                    self.scene.k_shots = self.model.k_shots;
                }
            }
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> CliResult<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Core(Error::Config(format!("{origin}:{}: expected key=value, got {line:?}", i + 1)))
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| match e {
                CliError::Core(Error::Config(m)) => CliError::Core(Error::Config(format!("{origin}:{}: {m}", i + 1))),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn apply_flags(&mut self, flags: &Flags) {
        if let Some(s) = flags.seed {
            self.model.seed = s;
            self.optim.seed = s;
            self.scene.seed = s;
        }
        if let Some(k) = flags.shots {
            self.model.k_shots = k;
            self.scene.k_shots = k;
        }
        if let Some(t) = flags.threshold {
            self.threshold = t;
        }
        if let Some(s) = &flags.split {
            self.eval_split = s.clone();
        }
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("data_dir".to_string(), self.data_dir.display().to_string()),
            ("out_dir".to_string(), self.out_dir.display().to_string()),
            ("n_train".to_string(), self.n_train.to_string()),
            ("n_val".to_string(), self.n_val.to_string()),
            ("n_test".to_string(), self.n_test.to_string()),
            ("eval_split".to_string(), self.eval_split.clone()),
            ("threshold".to_string(), self.threshold.to_string()),
        ];
        debug_assert_eq!(out.len(), PATH_KEYS.len());
        out.extend(self.model.to_kv());
        out.extend(self.optim.to_kv());
        out.extend(self.scene.to_kv());
        out
    }

    pub fn render(&self) -> String {
        self.to_kv().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.scene.validate()?;
        if self.scene.canvas != self.model.image_size {
            return Err(CliError::Core(Error::Config(format!(
                "canvas {} differs from image_size {}",
                self.scene.canvas, self.model.image_size
            ))));
        }
        Ok(())
    }
}

/// Defaults, then the config file, then flags.
pub fn resolve_config(flags: &Flags) -> CliResult<RunConfig> {
    let mut rc = RunConfig::default();
    if let Some(path) = &flags.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::Core(Error::io(path, e)))?;
        rc.apply_text(&text, &path.display().to_string())?;
    }
    rc.apply_flags(flags);
    Ok(rc)
}

/// Parses `x,y,w,h[;...]`, naming the failing box by position.
pub fn parse_boxes(spec: &str) -> CliResult<Vec<BBox>> {
    spec.split(';')
        .enumerate()
        .map(|(i, part)| {
            parse_box(part.trim()).map_err(|e| CliError::Core(Error::Data(format!("--boxes entry {}: {e}", i + 1))))
        })
        .collect()
}

/// Model dimension keys that must agree between a config and a checkpoint.
const DIM_KEYS: [&str; 13] = [
    "image_size",
    "patch_size",
    "exemplar_w",
    "exemplar_h",
    "exemplar_patch",
    "channels",
    "depth",
    "dim",
    "heads",
    "extra_depth",
    "extra_dim",
    "extra_heads",
    "decoder_dim",
];

/// Loads a checkpoint, refusing one whose dimensions differ from `rc.model`.
pub fn load_checkpoint(rc: &RunConfig, path: &Path) -> CliResult<Model> {
    let bytes = fs::read(path).map_err(|e| CliError::Core(Error::io(path, e)))?;
    let pairs = checkpoint_config_pairs(&bytes)?;
    let mine: Vec<(String, String)> = rc.model.to_kv();
    let differing: Vec<String> = mine
        .iter()
        .filter(|(k, v)| DIM_KEYS.contains(&k.as_str()) && pairs.get(k) != Some(v))
        .map(|(k, v)| format!("{k} (config {v}, checkpoint {})", pairs.get(k).map_or("missing", String::as_str)))
        .collect();
    if !differing.is_empty() {
        return Err(CliError::Core(Error::Config(format!(
            "checkpoint {} does not match the config: {}",
            path.display(),
            differing.join(", ")
        ))));
    }
    let mut model = Model::from_checkpoint(&bytes)?;
    model.cfg.k_shots = rc.model.k_shots;
    Ok(model)
}

fn checkpoint_path(rc: &RunConfig, flags: &Flags) -> PathBuf {
    flags.checkpoint.clone().unwrap_or_else(|| rc.out_dir.join(BEST_CHECKPOINT))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Core(Error::io(path, e)))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Core(Error::io(path, e)))
}

macro_rules! say {
    ($out:expr, $($arg:tt)*) => {
        let _ = writeln!($out, $($arg)*);
    };
}

pub fn cmd_gen_data(rc: &RunConfig, flags: &Flags, out: &mut dyn Write) -> CliResult<()> {
    let dir = &rc.data_dir;
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| CliError::Core(Error::io(dir, e)))?.next().is_some();
        if non_empty {
            if !flags.force {
                return Err(CliError::Core(Error::Data(format!(
                    "{} is not empty; pass --force to overwrite",
                    dir.display()
                ))));
            }
            fs::remove_dir_all(dir).map_err(|e| CliError::Core(Error::io(dir, e)))?;
        }
    }
    for (i, (name, n)) in [("train", rc.n_train), ("val", rc.n_val), ("test", rc.n_test)].into_iter().enumerate() {
        let spec = SceneSpec { seed: rc.scene.seed.wrapping_add(i as u64 * 0x9E37_79B9), ..rc.scene.clone() };
        let summary = build_split(&spec, n, &dir.join(name))?;
        let hist: Vec<String> = summary.histogram.iter().map(usize::to_string).collect();
        say!(out, "{name}: {n} scenes, count histogram [{}]", hist.join(" "));
    }
    Ok(())
}

pub fn cmd_train(rc: &RunConfig, flags: &Flags, out: &mut dyn Write) -> CliResult<()> {
    let train_set = load_split(&rc.data_dir.join("train"))?;
    let val_set = load_split(&rc.data_dir.join("val"))?;
    create_dir(&rc.out_dir)?;
    write_text(&rc.out_dir.join("run_config.txt"), &rc.render())?;
    if flags.ablate {
        let rows = ablation_grid(&rc.model, &train_set, &val_set, &rc.optim, &rc.out_dir, |r| {
            say!(out, "{} cls={} se={} me={} val_mae={} val_rmse={}", r.name, r.use_cls, r.use_se, r.use_me, r.val_mae, r.val_rmse);
        })?;
        write_text(&rc.out_dir.join("ablation.csv"), &ablation_csv(&rows))?;
        return Ok(());
    }
    let mut model = Model::new(rc.model.clone())?;
    let opts = TrainOptions { out_dir: rc.out_dir.clone(), resume: flags.resume, stop_after: None };
    let result = train(&mut model, &train_set, &val_set, &rc.optim, &opts, |m| {
        say!(out, "epoch={} loss={} val_mae={}", m.epoch, m.train_loss, m.val_mae);
    })?;
    say!(out, "best_epoch={} best_val_mae={}", result.best_epoch, result.best_val_mae);
    Ok(())
}

pub fn cmd_eval(rc: &RunConfig, flags: &Flags, out: &mut dyn Write) -> CliResult<()> {
    let model = load_checkpoint(rc, &checkpoint_path(rc, flags))?;
    let samples = load_split(&rc.data_dir.join(&rc.eval_split))?;
    let report = evaluate(&model, &samples, Some(rc.threshold))?;
    if report.is_single_bucket() {
        say!(
            out,
            "warning: threshold {} lies outside the observed count range; single-bucket report",
            rc.threshold
        );
    }
    create_dir(&rc.out_dir)?;
    let path = rc.out_dir.join(format!("eval_{}.csv", rc.eval_split));
    write_text(&path, &report.to_csv())?;
    say!(out, "split={} n={} mae={} rmse={}", rc.eval_split, report.rows.len(), report.mae, report.rmse);
    for (label, sub) in [("low", &report.low), ("high", &report.high)] {
        if let Some(s) = sub {
            say!(out, "{label}: n={} mae={} rmse={}", s.rows.len(), s.mae, s.rmse);
        }
    }
    say!(out, "report={}", path.display());
    Ok(())
}

fn query_and_boxes(flags: &Flags) -> CliResult<(PathBuf, Vec<BBox>)> {
    let image = flags.image.clone().ok_or_else(|| CliError::Usage("--image is required".into()))?;
    let boxes = parse_boxes(flags.boxes.as_deref().ok_or_else(|| CliError::Usage("--boxes is required".into()))?)?;
    Ok((image, boxes))
}

pub fn cmd_infer(rc: &RunConfig, flags: &Flags, out: &mut dyn Write) -> CliResult<()> {
    let (image_path, boxes) = query_and_boxes(flags)?;
    let model = load_checkpoint(rc, &checkpoint_path(rc, flags))?;
    let img = read_image(&image_path)?;
    let ex = prepare_exemplars(&img, &boxes, &model.cfg)?;
    let output = model.forward(&img, &ex)?;
    create_dir(&rc.out_dir)?;
    let d: &DensityMap = &output.density;
    write_density(&rc.out_dir.join("density.cvdm"), d)?;
    write_pgm(&rc.out_dir.join("density.pgm"), d.width(), d.height(), d.data())?;
    say!(out, "count={}", output.count);
    Ok(())
}

pub fn cmd_inspect_attention(rc: &RunConfig, flags: &Flags, out: &mut dyn Write) -> CliResult<()> {
    let (image_path, boxes) = query_and_boxes(flags)?;
    let model = match &flags.checkpoint {
        Some(p) => load_checkpoint(rc, p)?,
        None => Model::new(rc.model.clone())?,
    };
    let depth = model.cfg.depth;
    let layers: Vec<usize> = match flags.layer {
        Some(l) if l >= depth => {
            return Err(CliError::Core(Error::Config(format!("--layer {l} out of range (model has {depth} layers)"))))
        }
        Some(l) => vec![l],
        None => (0..depth).collect(),
    };
    let img = read_image(&image_path)?;
    let ex = prepare_exemplars(&img, &boxes, &model.cfg)?;
    let output = model.forward_prepared(&model.prepare(&img, &ex)?, true)?;
    let dir = rc.out_dir.join("attention");
    create_dir(&dir)?;
    let g = model.cfg.grid();
    for l in layers {
        let maps = token_maps(&output.layer_attention[l]);
        for (name, map) in ["query", "match", "class"].iter().zip(maps) {
            let path = dir.join(format!("layer{l}_{name}.pgm"));
            fs::write(&path, encode_pgm(g, g, &map)?).map_err(|e| CliError::Core(Error::io(&path, e)))?;
            say!(out, "{}", path.display());
        }
    }
    Ok(())
}

fn op_from_name(name: &str) -> CliResult<OpKind> {
    OpKind::from_name(name)
        .filter(|k| *k != OpKind::Leaf)
        .ok_or_else(|| CliError::Usage(format!("unknown op {name:?}")))
}

pub fn cmd_gradcheck(rc: &RunConfig, flags: &Flags, out: &mut dyn Write) -> CliResult<()> {
    let fault = flags.corrupt.as_deref().map(op_from_name).transpose()?;
    let (ops, end_to_end) = match flags.op.as_deref() {
        None => (checked_ops(), true),
        Some("end-to-end") => (Vec::new(), true),
        Some(name) => (vec![op_from_name(name)?], false),
    };
    let mut rows: Vec<SuiteRow> = Vec::new();
    for k in ops {
        rows.push(check_op(k, fault)?);
    }
    if end_to_end {
        rows.push(check_end_to_end(&rc.model, GRADCHECK_PARAMS, fault)?);
    }
    say!(out, "{:<12} {:>8} {:>12}  status", "op", "checked", "max_rel_err");
    let mut failed = Vec::new();
    for r in &rows {
        let status = if r.report.passed() { "pass" } else { "FAIL" };
        say!(out, "{:<12} {:>8} {:>12.3e}  {status}", r.name, r.report.checked, r.report.max_rel_err);
        if let Some(f) = &r.report.failure {
            say!(out, "  {f}");
        }
        if !r.report.passed() {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("gradient check failed for: {}", failed.join(", "))))
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run(args: impl IntoIterator<Item = OsString>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: &Cli, out: &mut dyn Write) -> CliResult<()> {
    let mut rc = resolve_config(&cli.flags)?;
    if let Some(dir) = &cli.flags.out {
        match cli.command {
            Command::GenData => rc.data_dir = dir.clone(),
            _ => rc.out_dir = dir.clone(),
        }
    }
    rc.validate()?;
    say!(out, "# effective config");
    let _ = out.write_all(rc.render().as_bytes());
    match cli.command {
        Command::GenData => cmd_gen_data(&rc, &cli.flags, out),
        Command::Train => cmd_train(&rc, &cli.flags, out),
        Command::Eval => cmd_eval(&rc, &cli.flags, out),
        Command::Infer => cmd_infer(&rc, &cli.flags, out),
        Command::InspectAttention => cmd_inspect_attention(&rc, &cli.flags, out),
        Command::Gradcheck => cmd_gradcheck(&rc, &cli.flags, out),
    }
}
