//! `spnn`: train, evaluate, report and simulate LFSR-masked networks.
//!
//! Metrics and results go to stdout as one JSON object per line;
//! diagnostics go to stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use spnn::data::{default_data_dir, load_idx_pair, split_contiguous, Dataset};
use spnn::hwsim::{simulate_layer, trace_to_json_lines, Arithmetic, DatapathMode};
use spnn::lfsr::LfsrMode;
use spnn::quantize::QuantMode;
use spnn::store::{memory_footprint_bits, ModelFile};
use spnn::train::{evaluate, fit, EvalMode, TrainConfig};
use spnn::{Error, Matrix};

#[derive(Parser)]
#[command(name = "spnn", version, about = "Sparsely-connected networks with LFSR-generated masks", args_override_self = true)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Directory holding the MNIST IDX files [env: SPNN_DATA_DIR].
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write the compressed model.
    Train(TrainArgs),
    /// Misclassification rate of a saved model.
    Eval(EvalArgs),
    /// Run one layer on the datapath simulator and check it against software.
    Simulate(SimulateArgs),
    /// Weight-memory footprint per layer and neuron.
    Report(ReportArgs),
}

#[derive(Args)]
struct SplitArgs {
    /// Train, validation and test sizes carved from the training file.
    #[arg(long, value_delimiter = ',', default_values_t = [40000usize, 10000, 10000])]
    split: Vec<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [784usize, 512, 512, 10])]
    shape: Vec<usize>,
    /// One value for all layers or one per layer.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0f64])]
    sparsity: Vec<f64>,
    #[arg(long, value_enum, default_value_t = Quant::None)]
    quant: Quant,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.98)]
    lr_decay: f64,
    #[arg(long, default_value_t = 100)]
    batch: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    mask_seed: u32,
    #[arg(long, value_enum, default_value_t = Mode::Debruijn)]
    lfsr_mode: Mode,
    #[arg(long)]
    out: PathBuf,
    /// Also evaluate on the official 10000-image test file every epoch.
    #[arg(long)]
    official_test: bool,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value_t = TestMode::Real)]
    test_mode: TestMode,
    /// Which set to score.
    #[arg(long, value_enum, default_value_t = EvalSet::Test)]
    set: EvalSet,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    /// Sample index into the official test file.
    #[arg(long, default_value_t = 0)]
    input: usize,
    #[arg(long, value_enum, default_value_t = SimMode::Sparse)]
    mode: SimMode,
    /// Q8.8 fixed-point inputs (quantized models only).
    #[arg(long)]
    fixed: bool,
    /// Write per-cycle JSON lines for `--neuron` here.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    neuron: usize,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    model: PathBuf,
    /// Machine-readable output only.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Quant {
    None,
    Binary,
    Ternary,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Maximal,
    Debruijn,
}

#[derive(Clone, Copy, ValueEnum)]
enum TestMode {
    Real,
    Quantized,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalSet {
    Train,
    Validation,
    Test,
    Official,
}

#[derive(Clone, Copy, ValueEnum)]
enum SimMode {
    Fc,
    Sparse,
}

/// Exit statuses: 0 ok, 1 simulator mismatch, 2 usage, 3 data/format, 4 divergence.
enum Failure {
    Lib(Error),
    Mismatch(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } => 4,
        e if e.is_data_error() => 3,
        Error::LabelOutOfRange { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let data_dir = cli.data_dir.clone().unwrap_or_else(default_data_dir);
    let result = match cli.command {
        Command::Train(a) => train(a, &data_dir),
        Command::Eval(a) => eval(a, &data_dir),
        Command::Simulate(a) => simulate(a, &data_dir),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Mismatch(msg)) => {
            eprintln!("error: simulator disagrees with software forward pass: {msg}");
            ExitCode::from(1)
        }
    }
}

fn load_split(dir: &Path, split: &SplitArgs) -> Result<spnn::data::DataSplit, Error> {
    if split.split.len() != 3 {
        return Err(Error::InvalidConfig(format!("--split takes 3 sizes, got {}", split.split.len())));
    }
    let train = load_idx_pair(dir, "train")?;
    split_contiguous(&train, split.split[0], split.split[1], split.split[2])
}

fn train(a: TrainArgs, dir: &Path) -> Result<(), Failure> {
    let cfg = TrainConfig {
        shape: a.shape,
        sparsity: a.sparsity,
        quant: match a.quant {
            Quant::None => QuantMode::None,
            Quant::Binary => QuantMode::Binary,
            Quant::Ternary => QuantMode::Ternary,
        },
        learning_rate: a.lr,
        lr_decay: a.lr_decay,
        batch_size: a.batch,
        epochs: a.epochs,
        rng_seed: a.seed,
        mask_seed: a.mask_seed,
        lfsr_mode: match a.lfsr_mode {
            Mode::Maximal => LfsrMode::Maximal,
            Mode::Debruijn => LfsrMode::DeBruijn,
        },
    };
    cfg.validate()?;
    let split = load_split(dir, &a.split)?;
    let official = if a.official_test {
        Some(load_idx_pair(dir, "t10k")?)
    } else {
        None
    };
    eprintln!(
        "training {:?} on {} samples ({} validation, {} test)",
        cfg.shape,
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    let outcome = fit(&cfg, &split, official.as_ref(), |m| {
        println!("{}", serde_json::to_string(m).expect("metrics serialize"));
    })?;
    let model = ModelFile::from_network(&outcome.network, cfg.hash(), cfg.epochs as u32)?;
    model.save(&a.out)?;
    let params = outcome.network.parameter_count();
    let best = outcome.best();
    println!(
        "{}",
        json!({
            "event": "done",
            "model": a.out,
            "best_epoch": outcome.best_epoch,
            "val_error": best.map(|m| m.val_error),
            "test_error": best.map(|m| m.test_error),
            "official_test_error": best.and_then(|m| m.official_test_error),
            "parameters": params.weights_and_biases(),
            "parameters_with_batch_norm": params.total(),
            "memory_bits": model.memory_footprint_bits(),
        })
    );
    Ok(())
}

fn eval(a: EvalArgs, dir: &Path) -> Result<(), Failure> {
    let model = ModelFile::load(&a.model)?;
    let quantized = model.layers.iter().any(|l| l.quant != QuantMode::None);
    let mode = match a.test_mode {
        TestMode::Quantized if !quantized => {
            eprintln!("warning: model has no quantized layers; evaluating with real weights");
            EvalMode::Real
        }
        TestMode::Real if quantized => {
            eprintln!("warning: model stores only quantized weights; real and quantized evaluation coincide");
            EvalMode::Quantized
        }
        TestMode::Real => EvalMode::Real,
        TestMode::Quantized => EvalMode::Quantized,
    };
    let data: Dataset = match a.set {
        EvalSet::Official => load_idx_pair(dir, "t10k")?,
        set => {
            let s = load_split(dir, &a.split)?;
            match set {
                EvalSet::Train => s.train,
                EvalSet::Validation => s.validation,
                _ => s.test,
            }
        }
    };
    let net = model.to_network()?;
    let rate = evaluate(&net, &data, mode)?;
    let params = net.parameter_count();
    println!(
        "{}",
        json!({
            "misclassification": rate,
            "samples": data.len(),
            "mode": match mode { EvalMode::Real => "real", EvalMode::Quantized => "quantized" },
            "parameters": params.weights_and_biases(),
            "parameters_with_batch_norm": params.total(),
            "kept_weights": params.weights,
        })
    );
    Ok(())
}

fn simulate(a: SimulateArgs, dir: &Path) -> Result<(), Failure> {
    let model = ModelFile::load(&a.model)?;
    let layer = model.layers.get(a.layer).ok_or(Error::IndexOutOfRange {
        index: a.layer,
        len: model.layers.len(),
    })?;
    if a.neuron >= layer.m {
        return Err(Error::IndexOutOfRange {
            index: a.neuron,
            len: layer.m,
        }
        .into());
    }
    let data = load_idx_pair(dir, "t10k")?;
    if a.input >= data.len() {
        return Err(Error::IndexOutOfRange {
            index: a.input,
            len: data.len(),
        }
        .into());
    }
    let net = model.to_network()?;
    let sample = data.images.slice_rows(a.input, a.input + 1);
    let x = net.layer_input(&sample, a.layer, EvalMode::Quantized)?;
    let software = net.forward_collect(&sample, EvalMode::Quantized)?.swap_remove(a.layer);
    let mode = match a.mode {
        SimMode::Fc => DatapathMode::Fc,
        SimMode::Sparse => DatapathMode::Sparse,
    };
    let arithmetic = if a.fixed { Arithmetic::Q8_8 } else { Arithmetic::Float };
    let run = simulate_layer(x.row(0), layer, mode, arithmetic, a.trace.is_some())?;

    let weights = net.layers()[a.layer].effective_weights(spnn::quantize::Phase::TestQuantized);
    let mut max_diff = 0.0f64;
    let mut worst = None;
    for (j, &hw) in run.outputs.iter().enumerate() {
        let sw = f64::from(software[(0, j)]);
        let diff = (hw - sw).abs();
        if diff > tolerance(&x, &weights, layer.bias[j], j, a.fixed) {
            worst = Some((j, hw, sw));
        }
        max_diff = max_diff.max(diff);
    }
    if let Some(path) = &a.trace {
        std::fs::write(path, trace_to_json_lines(&run.neurons[a.neuron].trace)).map_err(Error::from)?;
    }
    println!(
        "{}",
        json!({
            "layer": a.layer,
            "input": a.input,
            "mode": match mode { DatapathMode::Fc => "fc", DatapathMode::Sparse => "sparse" },
            "cycles": run.report.cycles,
            "memory_reads": run.report.memory_reads,
            "mac_operations": run.report.mac_operations,
            "accumulator_loads": run.report.accumulator_loads,
            "memory_bits": run.report.memory_bits,
            "neuron": a.neuron,
            "neuron_memory_bits": run.neurons[a.neuron].report.memory_bits,
            "neuron_output": run.outputs[a.neuron],
            "software_output": software[(0, a.neuron)],
            "max_abs_diff": max_diff,
            "match": worst.is_none(),
        })
    );
    match worst {
        Some((j, hw, sw)) => Err(Failure::Mismatch(format!("neuron {j}: simulator {hw}, software {sw}"))),
        None => Ok(()),
    }
}

/// Float: rounding slack relative to the magnitude of the summed terms.
/// Fixed: input rounding error of half an LSB per kept term.
fn tolerance(x: &Matrix<f32>, w: &Matrix<f32>, bias: f32, j: usize, fixed: bool) -> f64 {
    let mut magnitude = f64::from(bias.abs());
    let mut terms = 0usize;
    for i in 0..x.cols() {
        let wx = f64::from(w[(i, j)]) * f64::from(x[(0, i)]);
        magnitude += wx.abs();
        terms += usize::from(w[(i, j)] != 0.0);
    }
    if fixed {
        terms as f64 * 0.5 / 256.0 + 1e-6 * magnitude
    } else {
        1e-5 * magnitude.max(1.0)
    }
}

fn report(a: ReportArgs) -> Result<(), Failure> {
    let model = ModelFile::load(&a.model)?;
    let mut layers = Vec::new();
    for (l, c) in model.layers.iter().enumerate() {
        let depths: Vec<usize> = (0..c.m).map(|j| c.depth(j)).collect();
        layers.push(json!({
            "layer": l,
            "inputs": c.n,
            "outputs": c.m,
            "quant": c.quant.name(),
            "weight_bits": c.weight_width_bits(),
            "lfsr_width": c.sng.lfsr().width(),
            "lfsr_mode": c.sng.lfsr().mode().name(),
            "threshold": c.sng.threshold(),
            "sparsity": 1.0 - c.kept() as f64 / (c.n * c.m) as f64,
            "kept_weights": c.kept(),
            "depth_min": depths.iter().min(),
            "depth_max": depths.iter().max(),
            "neuron_memory_bits": depths.iter().map(|&d| d as u64 * u64::from(c.weight_width_bits())).collect::<Vec<_>>(),
            "memory_bits": memory_footprint_bits(c),
        }));
    }
    let total = model.memory_footprint_bits();
    let doc = json!({ "layers": layers, "total_memory_bits": total, "epochs": model.epochs, "config_hash": format!("{:016x}", model.config_hash) });
    if a.json {
        println!("{doc}");
        return Ok(());
    }
    println!(
        "{:>5} {:>7} {:>7} {:>8} {:>5} {:>9} {:>11} {:>12}",
        "layer", "inputs", "outputs", "quant", "bits", "sparsity", "depth", "memory bits"
    );
    for (l, c) in model.layers.iter().enumerate() {
        let (lo, hi) = (0..c.m).map(|j| c.depth(j)).fold((usize::MAX, 0), |(lo, hi), d| (lo.min(d), hi.max(d)));
        let depth = if lo == hi { lo.to_string() } else { format!("{lo}-{hi}") };
        println!(
            "{:>5} {:>7} {:>7} {:>8} {:>5} {:>9.4} {:>11} {:>12}",
            l,
            c.n,
            c.m,
            c.quant.name(),
            c.weight_width_bits(),
            1.0 - c.kept() as f64 / (c.n * c.m) as f64,
            depth,
            memory_footprint_bits(c)
        );
    }
    println!("total memory bits: {total}");
    Ok(())
}
