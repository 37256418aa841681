//! The `r2net` command line: argument parsing, dispatch and line-oriented
//! output. [`run`] is the whole program minus process exit, so it can be
//! driven from tests.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, read_checkpoint, write_tensor_dump};
use crate::data::{make_symmetry_breaking_set, LabeledImageSet, MnistPaths, DATA_DIR_ENV};
use crate::error::{invalid, Error, Result};
use crate::filters::{expand_filters, strictness_gap, FilterFlavor};
use crate::gradcheck::{check_model, check_op, OPS};
use crate::group::PerturbationDelta;
use crate::layers::Mode;
use crate::metrics::{equivariance_error, model_tap, model_taps, prop1_check, prop2_check, Actions, ProbeSet};
use crate::model::{Model, ModelSpec};
use crate::record::{MetricsRecord, Record, Split};
use crate::tensor::{Precision, Scalar, Tensor};
use crate::train::{evaluate, sigma_sweep, train_with, OptimizerKind, TrainConfig, TrainData};

#[derive(Debug, Parser)]
#[command(name = "r2net", about = "Relaxed rotation-equivariant networks over C4", version)]
pub struct Cli {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct SharedArgs {
    /// Seed for initialization, shuffling, augmentation and probes
    #[arg(long, global = true, value_name = "U64", default_value_t = 0)]
    pub seed: u64,
    /// Standard deviation of the initial perturbation Δ
    #[arg(long, global = true, value_name = "FLOAT", default_value_t = 0.1)]
    pub sigma: f64,
    /// Layer mode: relaxed, strict or plain
    #[arg(long, global = true, value_name = "MODE", default_value = "relaxed")]
    pub mode: Mode,
    /// Numeric precision: f32 or f64-check
    #[arg(long, global = true, value_name = "PRECISION", default_value = "f32")]
    pub precision: Precision,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a classifier and write a checkpoint
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test set
    Eval(EvalArgs),
    /// Measure equivariance error and check the bounds
    EquivCheck(EquivArgs),
    /// Print the per-layer parameter table of a model
    ParamCount(ModelArgs),
    /// Expand one filter into its four-fold bank and dump it
    BuildFilters(FilterArgs),
    /// Finite-difference gradient checks
    Gradcheck(GradArgs),
    /// Train one model per σ and tabulate error and EE
    SigmaSweep(SweepArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Model family
    #[arg(long, value_name = "NAME", default_value = "r2net-toy")]
    pub model: String,
    /// Stem and stage widths, four comma-separated integers
    #[arg(long, value_name = "LIST", value_delimiter = ',', default_value = "8,16,32,32")]
    pub widths: Vec<usize>,
    /// Input channels
    #[arg(long, value_name = "N", default_value_t = 1)]
    pub in_channels: usize,
    /// Square input size
    #[arg(long, value_name = "N", default_value_t = 28)]
    pub input_size: usize,
    /// Number of classes [default: 10 for mnist, 4 for synthetic]
    #[arg(long, value_name = "N")]
    pub classes: Option<usize>,
}

impl ModelArgs {
    fn spec(&self, shared: &SharedArgs, classes: usize) -> Result<ModelSpec> {
        if self.model != "r2net-toy" {
            return Err(invalid("model", format!("unknown model `{}` (expected r2net-toy)", self.model)));
        }
        let mut spec = ModelSpec::toy(&self.widths, shared.mode, shared.sigma, classes);
        spec.in_channels = self.in_channels;
        spec.input_size = self.input_size;
        spec.canvas = crate::model::canvas_for(self.input_size);
        spec.validate()?;
        Ok(spec)
    }

    fn describe(&self, r: Record, classes: usize) -> Record {
        r.field("model", &self.model)
            .field("widths", join(&self.widths))
            .field("in_channels", self.in_channels)
            .field("input_size", self.input_size)
            .field("classes", classes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DatasetKind {
    Mnist,
    Synthetic,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Dataset: mnist (IDX files) or synthetic (quadrant defects)
    #[arg(long, value_enum, value_name = "KIND", default_value = "mnist")]
    pub dataset: DatasetKind,
    /// MNIST training images (IDX) [default: $R2NET_DATA_DIR/train-images-idx3-ubyte]
    #[arg(long, value_name = "PATH")]
    pub train_images: Option<PathBuf>,
    /// MNIST training labels (IDX) [default: $R2NET_DATA_DIR/train-labels-idx1-ubyte]
    #[arg(long, value_name = "PATH")]
    pub train_labels: Option<PathBuf>,
    /// MNIST test images (IDX) [default: $R2NET_DATA_DIR/t10k-images-idx3-ubyte]
    #[arg(long, value_name = "PATH")]
    pub test_images: Option<PathBuf>,
    /// MNIST test labels (IDX) [default: $R2NET_DATA_DIR/t10k-labels-idx1-ubyte]
    #[arg(long, value_name = "PATH")]
    pub test_labels: Option<PathBuf>,
    /// Training samples used (0 = all)
    #[arg(long, value_name = "N", default_value_t = 5000)]
    pub subset_train: usize,
    /// Test samples used (0 = all)
    #[arg(long, value_name = "N", default_value_t = 1000)]
    pub subset_test: usize,
    /// Synthetic set size per split
    #[arg(long, value_name = "N", default_value_t = 400)]
    pub synthetic_n: usize,
    /// Synthetic defect amplitude in [0, 1]
    #[arg(long, value_name = "FLOAT", default_value_t = 1.0)]
    pub defect_scale: f64,
}

impl DataArgs {
    fn default_classes(&self) -> usize {
        match self.dataset {
            DatasetKind::Mnist => 10,
            DatasetKind::Synthetic => 4,
        }
    }

    /// Explicit paths, filled in from the data directory when missing.
    fn paths(&self) -> Option<MnistPaths> {
        let base = MnistPaths::from_env();
        let pick = |explicit: &Option<PathBuf>, fallback: Option<&PathBuf>| explicit.clone().or(fallback.cloned());
        Some(MnistPaths {
            train_images: pick(&self.train_images, base.as_ref().map(|b| &b.train_images))?,
            train_labels: pick(&self.train_labels, base.as_ref().map(|b| &b.train_labels))?,
            test_images: pick(&self.test_images, base.as_ref().map(|b| &b.test_images))?,
            test_labels: pick(&self.test_labels, base.as_ref().map(|b| &b.test_labels))?,
        })
    }

    fn subset(n: usize) -> Option<usize> {
        (n > 0).then_some(n)
    }

    fn describe(&self, r: Record) -> Record {
        let p = self.paths();
        let show = |f: fn(&MnistPaths) -> &PathBuf| p.as_ref().map_or_else(|| "none".into(), |p| f(p).display().to_string());
        let r = r.field("dataset", format!("{:?}", self.dataset).to_lowercase());
        match self.dataset {
            DatasetKind::Mnist => r
                .field("train_images", show(|p| &p.train_images))
                .field("train_labels", show(|p| &p.train_labels))
                .field("test_images", show(|p| &p.test_images))
                .field("test_labels", show(|p| &p.test_labels))
                .field("subset_train", self.subset_train)
                .field("subset_test", self.subset_test),
            DatasetKind::Synthetic => r
                .field("synthetic_n", self.synthetic_n)
                .field("defect_scale", self.defect_scale),
        }
    }

    fn synthetic(&self, seed: u64) -> Result<(LabeledImageSet, LabeledImageSet)> {
        let train = make_symmetry_breaking_set(self.synthetic_n, self.defect_scale, seed)?;
        let test = make_symmetry_breaking_set(self.synthetic_n, self.defect_scale, seed ^ 0x7e57)?;
        Ok((train, test))
    }

    /// The test split alone, as used by `eval` and `equiv-check`.
    fn test_set(&self, seed: u64) -> Result<LabeledImageSet> {
        match self.dataset {
            DatasetKind::Synthetic => Ok(self.synthetic(seed)?.1),
            DatasetKind::Mnist => {
                let p = self.paths().ok_or_else(missing_data)?;
                let set = crate::data::load_idx(&p.test_images, &p.test_labels, crate::data::Provenance::Test)?;
                match Self::subset(self.subset_test) {
                    Some(n) => set.take(n),
                    None => Ok(set),
                }
            }
        }
    }
}

fn missing_data() -> Error {
    Error::Data(format!(
        "dataset paths not given; pass --train-images/--train-labels/--test-images/--test-labels or set {DATA_DIR_ENV}"
    ))
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Training epochs
    #[arg(long, value_name = "N", default_value_t = 3)]
    pub epochs: usize,
    /// Mini-batch size
    #[arg(long, value_name = "N", default_value_t = 64)]
    pub batch_size: usize,
    /// Learning rate
    #[arg(long, value_name = "FLOAT", default_value_t = 1e-3)]
    pub lr: f64,
    /// Optimizer: adam or sgd-momentum
    #[arg(long, value_name = "NAME", default_value = "adam")]
    pub optimizer: OptimizerKind,
    /// Keep training images upright (MNIST is rotated by default)
    #[arg(long)]
    pub no_rotate: bool,
    /// Probes for the per-epoch EE column (0 disables)
    #[arg(long, value_name = "N", default_value_t = 16)]
    pub ee_probes: usize,
    /// Checkpoint output path
    #[arg(long, value_name = "PATH", default_value = "r2net.ckpt")]
    pub out: PathBuf,
}

impl TrainArgs {
    fn config(&self, shared: &SharedArgs) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            optimizer: self.optimizer,
            seed: shared.seed,
            sigma: shared.sigma,
            mode: shared.mode,
            widths: self.model.widths.clone(),
            num_classes: self.model.classes.unwrap_or(self.data.default_classes()),
            rotate_train: !self.no_rotate && self.data.dataset == DatasetKind::Mnist,
            subset_train: DataArgs::subset(self.data.subset_train),
            subset_test: DataArgs::subset(self.data.subset_test),
            ee_probes: self.ee_probes,
            data: self.data.paths(),
            checkpoint_out: Some(self.out.clone()),
        }
    }

    fn load(&self, config: &TrainConfig) -> Result<TrainData> {
        match self.data.dataset {
            DatasetKind::Mnist => {
                if config.data.is_none() {
                    return Err(missing_data());
                }
                TrainData::load(config)
            }
            DatasetKind::Synthetic => {
                let (tr, te) = self.data.synthetic(config.seed)?;
                TrainData::prepare(config, &tr, &te)
            }
        }
    }

    fn describe(&self, r: Record, shared: &SharedArgs) -> Record {
        let cfg = self.config(shared);
        let r = self.model.describe(r, cfg.num_classes);
        let r = self.data.describe(r);
        r.field("epochs", self.epochs)
            .field("batch_size", self.batch_size)
            .field("lr", self.lr)
            .field("optimizer", self.optimizer)
            .field("rotate_train", cfg.rotate_train)
            .field("ee_probes", self.ee_probes)
            .field("out", self.out.display())
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long, value_name = "PATH")]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Probes for the EE column (0 disables)
    #[arg(long, value_name = "N", default_value_t = 16)]
    pub ee_probes: usize,
}

#[derive(Debug, Clone, Args)]
pub struct EquivArgs {
    /// Checkpoint to measure [default: a fresh model built from the model flags]
    #[arg(long, value_name = "PATH")]
    pub ckpt: Option<PathBuf>,
    /// Second model for the comparison bound [default: the first with Δ set to 0]
    #[arg(long, value_name = "PATH")]
    pub compare_ckpt: Option<PathBuf>,
    /// Number of probes (half dataset images when data is available, half Gaussian)
    #[arg(long, value_name = "N", default_value_t = 16)]
    pub probes: usize,
    /// Also report every intermediate layer
    #[arg(long)]
    pub per_layer: bool,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, Args)]
pub struct FilterArgs {
    /// Filter flavor: lifting, pointwise or depthwise
    #[arg(long, value_name = "FLAVOR", default_value = "depthwise")]
    pub flavor: FilterFlavor,
    /// Kernel size (ignored for pointwise)
    #[arg(long, value_name = "N", default_value_t = 3)]
    pub k: usize,
    /// Input channels
    #[arg(long, value_name = "N", default_value_t = 1)]
    pub ci: usize,
    /// Output channels
    #[arg(long, value_name = "N", default_value_t = 1)]
    pub co: usize,
    /// Tensor-dump output path
    #[arg(long, value_name = "PATH", default_value = "filters.bin")]
    pub dump: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GradArgs {
    /// Primitive to check, or `all`
    #[arg(long, value_name = "NAME", default_value = "all", conflicts_with = "model")]
    pub op: String,
    /// Spot-check a whole model instead of primitives
    #[arg(long)]
    pub model: bool,
    /// Random trials per primitive (entries checked for --model)
    #[arg(long, value_name = "N", default_value_t = 3)]
    pub trials: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    /// Comma-separated σ values
    #[arg(long, value_name = "LIST", value_delimiter = ',', default_value = "0.1,0.8")]
    pub sigmas: Vec<f64>,
    #[command(flatten)]
    pub train: TrainArgs,
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn shared_fields(r: Record, s: &SharedArgs) -> Record {
    r.field("seed", s.seed)
        .field("sigma", s.sigma)
        .field("mode", s.mode)
        .field("precision", s.precision.as_str())
}

fn require_f32(s: &SharedArgs, what: &'static str) -> Result<()> {
    if s.precision != Precision::F32 {
        return Err(invalid(what, "only f32 is supported here; f64-check applies to equiv-check, build-filters and gradcheck"));
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code: 0 success, 1 runtime failure, 2 usage.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(&cli, out) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => 0,
        Err(e) => {
            let _ = writeln!(err, "{}", error_line(&e));
            1
        }
    }
}

/// `error kind=<variant> message="<text>"`, always on one line.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace('\n', " ").replace('"', "'");
    format!("error kind={} message=\"{msg}\"", e.kind())
}

/// `Ok(false)` means the command ran but a check failed.
fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<bool> {
    let s = &cli.shared;
    match &cli.command {
        Command::Train(a) => {
            let cfg = a.config(s);
            writeln!(out, "{}", a.describe(shared_fields(Record::new("config").field("command", "train"), s), s))?;
            require_f32(s, "train")?;
            let data = a.load(&cfg)?;
            let mut io = Ok(());
            let res = train_with(&cfg, &data, |r| {
                if io.is_ok() {
                    io = writeln!(out, "{r}");
                }
            })?;
            io?;
            writeln!(
                out,
                "{}",
                Record::new("checkpoint")
                    .field("path", a.out.display())
                    .field("params", res.model.param_count())
            )?;
            Ok(true)
        }
        Command::Eval(a) => {
            let r = Record::new("config").field("command", "eval").field("ckpt", a.ckpt.display());
            writeln!(out, "{}", a.data.describe(shared_fields(r, s)).field("ee_probes", a.ee_probes))?;
            require_f32(s, "eval")?;
            let (model, ckpt) = load_checkpoint(&a.ckpt)?;
            let test = a.data.test_set(s.seed)?;
            let ev = evaluate(&model, &test)?;
            let ee = crate::train::classifier_ee(&model, &test, a.ee_probes, s.seed)?;
            let epoch = ckpt.meta.get("epoch").and_then(|e| e.parse().ok()).unwrap_or(0);
            let rec: MetricsRecord = ev.record(epoch, Split::Test, ee, 0.0);
            writeln!(out, "{rec}")?;
            Ok(true)
        }
        Command::EquivCheck(a) => equiv_check(a, s, out),
        Command::ParamCount(a) => {
            let classes = a.classes.unwrap_or(10);
            let r = Record::new("config").field("command", "param-count");
            writeln!(out, "{}", a.describe(shared_fields(r, s), classes))?;
            let spec = a.spec(s, classes)?;
            writeln!(out, "{}", crate::model::param_count(&spec)?)?;
            Ok(true)
        }
        Command::BuildFilters(a) => build_filters(a, s, out),
        Command::Gradcheck(a) => {
            let r = Record::new("config")
                .field("command", "gradcheck")
                .field("target", if a.model { "model".to_string() } else { a.op.clone() })
                .field("trials", a.trials);
            writeln!(out, "{}", shared_fields(r, s))?;
            let reports = if a.model {
                vec![check_model(a.trials, s.seed)?]
            } else if a.op == "all" {
                OPS.iter().map(|op| check_op(op, a.trials, s.seed)).collect::<Result<Vec<_>>>()?
            } else {
                vec![check_op(&a.op, a.trials, s.seed)?]
            };
            let mut ok = true;
            for r in &reports {
                writeln!(out, "{r}")?;
                ok &= r.passed();
            }
            Ok(ok)
        }
        Command::SigmaSweep(a) => {
            let cfg = a.train.config(s);
            let r = Record::new("config").field("command", "sigma-sweep").field("sigmas", join(&a.sigmas));
            writeln!(out, "{}", a.train.describe(shared_fields(r, s), s))?;
            require_f32(s, "sigma-sweep")?;
            let data = a.train.load(&cfg)?;
            for row in sigma_sweep(&cfg, &a.sigmas, &data)? {
                writeln!(out, "{}", row.to_record())?;
            }
            Ok(true)
        }
    }
}

fn build_filters(a: &FilterArgs, s: &SharedArgs, out: &mut dyn Write) -> Result<bool> {
    let k = if a.flavor == FilterFlavor::Pointwise { 1 } else { a.k };
    let r = Record::new("config")
        .field("command", "build-filters")
        .field("flavor", a.flavor)
        .field("k", k)
        .field("ci", a.ci)
        .field("co", a.co)
        .field("dump", a.dump.display());
    writeln!(out, "{}", shared_fields(r, s))?;
    if k == 0 || a.ci == 0 || a.co == 0 {
        return Err(invalid("build-filters", "k, ci and co must be positive"));
    }
    let ci = if a.flavor == FilterFlavor::Depthwise { 1 } else { a.ci };
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let shape = a.flavor.init_shape(ci, a.co, k);
    let k_init = Tensor::<f64>::randn(&shape, 1.0, &mut rng);
    let delta = match s.mode {
        Mode::Relaxed => PerturbationDelta::<f64>::sample(s.sigma, &mut rng)?,
        _ => PerturbationDelta::zeros(),
    };
    let (bank, strict) = match s.precision {
        Precision::F64Check => (
            expand_filters(&k_init, &delta, a.flavor)?,
            expand_filters(&k_init, &PerturbationDelta::zeros(), a.flavor)?,
        ),
        Precision::F32 => {
            let (ki, d) = (k_init.cast::<f32>(), PerturbationDelta::from_tensor(delta.tensor().cast::<f32>(), s.sigma)?);
            (
                expand_filters(&ki, &d, a.flavor)?.cast(),
                expand_filters(&ki, &PerturbationDelta::zeros(), a.flavor)?.cast(),
            )
        }
    };
    let gap = strictness_gap(&bank, &strict)?;
    write_tensor_dump(
        &a.dump,
        &[
            ("k_init".to_string(), k_init.cast()),
            ("delta".to_string(), delta.tensor().cast()),
            ("k_rel".to_string(), bank.cast()),
        ],
    )?;
    writeln!(
        out,
        "{}",
        Record::new("filters")
            .field("k_init_shape", join(&shape))
            .field("k_rel_shape", join(bank.shape()))
            .field("strictness_gap", gap)
            .field("path", a.dump.display())
    )?;
    Ok(true)
}

fn equiv_check(a: &EquivArgs, s: &SharedArgs, out: &mut dyn Write) -> Result<bool> {
    let classes = a.model.classes.unwrap_or(10);
    let show = |p: &Option<PathBuf>| p.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string());
    let r = Record::new("config")
        .field("command", "equiv-check")
        .field("ckpt", show(&a.ckpt))
        .field("compare_ckpt", show(&a.compare_ckpt))
        .field("probes", a.probes)
        .field("per_layer", a.per_layer);
    let r = shared_fields(r, s);
    let r = if a.ckpt.is_none() { a.model.describe(r, classes) } else { r };
    writeln!(out, "{r}")?;
    if a.probes == 0 {
        return Err(invalid("equiv-check", "needs at least one probe"));
    }
    let model = match &a.ckpt {
        Some(p) => load_checkpoint(p)?.0,
        None => Model::<f32>::build(&a.model.spec(s, classes)?, s.seed)?,
    };
    let other = match &a.compare_ckpt {
        Some(p) => read_checkpoint(p)?.into_model()?,
        None => {
            let mut m = model.clone();
            m.scale_deltas(0.0);
            m
        }
    };
    let spec = model.spec().clone();
    let shape = [1, spec.in_channels, spec.input_size, spec.input_size];
    let probes = match MnistPaths::from_env().filter(MnistPaths::all_exist) {
        Some(p) if spec.in_channels == 1 && spec.input_size == 28 => {
            let set = crate::data::load_idx(&p.test_images, &p.test_labels, crate::data::Provenance::Test)?;
            let natural = a.probes / 2;
            ProbeSet::mixed(&set, natural, a.probes - natural, s.seed)?
        }
        _ => ProbeSet::gaussian(a.probes, &shape, s.seed)?,
    };
    match s.precision {
        Precision::F32 => equiv_report(&model, &other, &probes, a.per_layer, out),
        Precision::F64Check => equiv_report(&model.cast::<f64>(), &other.cast(), &probes.cast(), a.per_layer, out),
    }
}

fn equiv_report<T: Scalar>(
    model: &Model<T>,
    other: &Model<T>,
    probes: &ProbeSet<T>,
    per_layer: bool,
    out: &mut dyn Write,
) -> Result<bool> {
    let input = crate::group::Representation::Spatial;
    let mut layers = vec![("model".to_string(), "head".to_string(), Actions::INVARIANT)];
    if per_layer {
        for (name, rep) in model_taps(model)? {
            if name != "head" {
                layers.push((name.clone(), name, Actions { input, output: rep }));
            }
        }
    }
    for (label, tap, actions) in &layers {
        let res = equivariance_error(model_tap(model, tap), probes, *actions)?;
        let mut per_g = [(0.0f64, 0.0f64); 4];
        for r in &res.records {
            let e = &mut per_g[r.g.index()];
            e.0 = e.0.max(r.error);
            e.1 = e.1.max(r.norm);
        }
        for (g, (error, norm)) in per_g.iter().enumerate() {
            writeln!(
                out,
                "{}",
                Record::new("equiv")
                    .field("name", label)
                    .field("g", g)
                    .field("error", error)
                    .field("norm", norm)
            )?;
        }
    }
    let phi = model_tap(model, "head");
    let p1 = prop1_check(&phi, probes, Actions::INVARIANT)?;
    let p2 = prop2_check(&phi, model_tap(other, "head"), probes, Actions::INVARIANT)?;
    let verdict = |h: bool| if h { "holds" } else { "violated" };
    writeln!(
        out,
        "{}",
        Record::new("summary")
            .field("ee", p1.ee_hat)
            .field("epsilon", model.spec().sigma)
            .field("k_hat", p1.k_hat)
            .field("c_hat", p2.c_hat)
            .field("prop1", verdict(p1.check.holds))
            .field("prop1_slack", p1.check.slack)
            .field("prop2", verdict(p2.check.holds))
            .field("prop2_slack", p2.check.slack)
    )?;
    Ok(p1.check.holds && p2.check.holds)
}
