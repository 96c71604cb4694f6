//! Cycle-level model of a single-neuron MAC datapath.
//!
//! Inputs stream in one per clock. The fully-connected datapath reads a
//! weight and accumulates every cycle. The sparse datapath runs the same SNG
//! that generated the mask: on a 1 it reads `weight_memory[counter]`,
//! accumulates and advances the counter; on a 0 nothing is read and both
//! counter and accumulator hold. Either way a neuron takes exactly `N`
//! cycles, but the sparse one only stores and reads the kept weights.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{SngBits, SngConfig};
use crate::store::{decompress_layer, CompressedLayer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatapathMode {
    /// Weight read and MAC on every cycle.
    Fc,
    /// Read and MAC only when the SNG emits 1.
    Sparse,
}

impl std::str::FromStr for DatapathMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fc" => Ok(DatapathMode::Fc),
            "sparse" => Ok(DatapathMode::Sparse),
            other => Err(Error::InvalidConfig(format!("unknown datapath mode `{other}`"))),
        }
    }
}

/// Accumulator arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arithmetic {
    /// f32 multiply-accumulate in stream order.
    Float,
    /// Inputs rounded to signed `total_bits`-bit codes with `frac_bits`
    /// fractional bits; weights must be integers (binary or ternary).
    Fixed { total_bits: u32, frac_bits: u32 },
}

impl Arithmetic {
    /// Q8.8.
    pub const Q8_8: Arithmetic = Arithmetic::Fixed {
        total_bits: 16,
        frac_bits: 8,
    };

    fn validate(self) -> Result<()> {
        if let Arithmetic::Fixed { total_bits, frac_bits } = self {
            if !(2..=32).contains(&total_bits) || frac_bits >= total_bits {
                return Err(Error::InvalidConfig(format!("fixed-point Q format {total_bits}/{frac_bits}")));
            }
        }
        Ok(())
    }

    /// Integer code of `x` in fixed mode, saturating.
    pub fn input_code(self, x: f32) -> i64 {
        match self {
            Arithmetic::Float => 0,
            Arithmetic::Fixed { total_bits, frac_bits } => {
                let hi = (1i64 << (total_bits - 1)) - 1;
                let lo = -(1i64 << (total_bits - 1));
                let scaled = (f64::from(x) * (1u64 << frac_bits) as f64).round();
                (scaled.clamp(lo as f64, hi as f64)) as i64
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ActivityReport {
    pub cycles: u64,
    pub memory_reads: u64,
    pub mac_operations: u64,
    pub accumulator_loads: u64,
    pub memory_bits: u64,
}

impl std::ops::AddAssign for ActivityReport {
    fn add_assign(&mut self, o: Self) {
        self.cycles += o.cycles;
        self.memory_reads += o.memory_reads;
        self.mac_operations += o.mac_operations;
        self.accumulator_loads += o.accumulator_loads;
        self.memory_bits += o.memory_bits;
    }
}

/// One clock of one neuron.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub cycle: u64,
    pub sng_bit: bool,
    /// Address read this cycle, if any.
    pub address: Option<usize>,
    pub weight: Option<f32>,
    pub input: f32,
    /// Accumulator after the cycle, in real units.
    pub accumulator: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Accumulator {
    Float(f32),
    Fixed(i64),
}

/// Registers of one neuron datapath.
#[derive(Debug, Clone)]
pub struct NeuronDatapath {
    weight_memory: Vec<f32>,
    counter: usize,
    accumulator: Accumulator,
    sng: Option<SngBits>,
    mode: DatapathMode,
    arithmetic: Arithmetic,
    weight_width_bits: u32,
    report: ActivityReport,
}

impl NeuronDatapath {
    /// `sng` must be seeded for this neuron's column; it is ignored in FC mode.
    pub fn new(
        weight_memory: Vec<f32>,
        mode: DatapathMode,
        sng: &SngConfig,
        arithmetic: Arithmetic,
        weight_width_bits: u32,
    ) -> Result<Self> {
        arithmetic.validate()?;
        if let Arithmetic::Fixed { .. } = arithmetic {
            if let Some(w) = weight_memory.iter().find(|w| w.fract() != 0.0 || !w.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "fixed-point datapath needs integer weights, got {w}"
                )));
            }
        }
        let memory_bits = weight_memory.len() as u64 * u64::from(weight_width_bits);
        Ok(NeuronDatapath {
            accumulator: match arithmetic {
                Arithmetic::Float => Accumulator::Float(0.0),
                Arithmetic::Fixed { .. } => Accumulator::Fixed(0),
            },
            weight_memory,
            counter: 0,
            sng: (mode == DatapathMode::Sparse).then(|| sng.bits()),
            mode,
            arithmetic,
            weight_width_bits,
            report: ActivityReport {
                memory_bits,
                ..ActivityReport::default()
            },
        })
    }

    pub fn counter(&self) -> usize {
        self.counter
    }

    pub fn depth(&self) -> usize {
        self.weight_memory.len()
    }

    pub fn report(&self) -> ActivityReport {
        self.report
    }

    pub fn weight_width_bits(&self) -> u32 {
        self.weight_width_bits
    }

    /// Accumulator in real units.
    pub fn value(&self) -> f64 {
        match (self.accumulator, self.arithmetic) {
            (Accumulator::Float(a), _) => f64::from(a),
            (Accumulator::Fixed(a), Arithmetic::Fixed { frac_bits, .. }) => a as f64 / (1u64 << frac_bits) as f64,
            (Accumulator::Fixed(a), Arithmetic::Float) => a as f64,
        }
    }

    /// Advances one clock with `input` on the input bus.
    pub fn step(&mut self, input: f32) -> Result<TraceRecord> {
        let cycle = self.report.cycles;
        let enable = match self.mode {
            DatapathMode::Fc => true,
            DatapathMode::Sparse => self.sng.as_mut().and_then(Iterator::next).unwrap_or(false),
        };
        let mut address = None;
        let mut weight = None;
        if enable {
            let w = *self.weight_memory.get(self.counter).ok_or_else(|| {
                Error::Corruption(format!(
                    "weight memory overrun at cycle {cycle}: depth {}",
                    self.weight_memory.len()
                ))
            })?;
            address = Some(self.counter);
            weight = Some(w);
            self.accumulator = match self.accumulator {
                Accumulator::Float(a) => Accumulator::Float(a + w * input),
                Accumulator::Fixed(a) => Accumulator::Fixed(a + w as i64 * self.arithmetic.input_code(input)),
            };
            self.counter += 1;
            self.report.memory_reads += 1;
            self.report.mac_operations += 1;
            self.report.accumulator_loads += 1;
        }
        self.report.cycles += 1;
        Ok(TraceRecord {
            cycle,
            sng_bit: enable,
            address,
            weight,
            input,
            accumulator: self.value(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuronRun {
    /// Accumulator after the last cycle; no bias, no activation.
    pub output: f64,
    pub report: ActivityReport,
    /// Empty unless requested.
    pub trace: Vec<TraceRecord>,
}

/// Streams `inputs` through one neuron.
///
/// In sparse mode `weights` is the compressed column and its length must
/// equal the SNG's popcount over `inputs.len()` cycles; in FC mode it holds
/// one weight per input.
pub fn simulate_neuron(
    inputs: &[f32],
    weights: &[f32],
    sng: &SngConfig,
    mode: DatapathMode,
    arithmetic: Arithmetic,
    weight_width_bits: u32,
    trace: bool,
) -> Result<NeuronRun> {
    if mode == DatapathMode::Fc && weights.len() != inputs.len() {
        return Err(Error::shape("simulate_neuron (fc)", inputs.len(), weights.len()));
    }
    let mut dp = NeuronDatapath::new(weights.to_vec(), mode, sng, arithmetic, weight_width_bits)?;
    let mut records = Vec::with_capacity(if trace { inputs.len() } else { 0 });
    for &x in inputs {
        let rec = dp.step(x)?;
        if trace {
            records.push(rec);
        }
    }
    if dp.counter() != dp.depth() {
        return Err(Error::Corruption(format!(
            "SNG enabled {} reads but weight memory holds {}",
            dp.counter(),
            dp.depth()
        )));
    }
    Ok(NeuronRun {
        output: dp.value(),
        report: dp.report(),
        trace: records,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRun {
    /// Pre-activations including bias.
    pub outputs: Vec<f64>,
    /// Neurons run side by side, so `cycles` is `N`; other counters are summed.
    pub report: ActivityReport,
    pub neurons: Vec<NeuronRun>,
}

/// Runs every neuron of `layer` on the shared input stream.
///
/// FC mode models the uncompressed datapath, whose memory holds all `N`
/// weights of the column (zeros included).
pub fn simulate_layer(
    inputs: &[f32],
    layer: &CompressedLayer,
    mode: DatapathMode,
    arithmetic: Arithmetic,
    trace: bool,
) -> Result<LayerRun> {
    if inputs.len() != layer.n {
        return Err(Error::shape("simulate_layer", layer.n, inputs.len()));
    }
    let dense = match mode {
        DatapathMode::Fc => Some(decompress_layer(layer)?),
        DatapathMode::Sparse => None,
    };
    let neurons: Vec<NeuronRun> = (0..layer.m)
        .into_par_iter()
        .map(|j| {
            let column = match &dense {
                Some(w) => w.column(j),
                None => layer.columns[j].clone(),
            };
            simulate_neuron(
                inputs,
                &column,
                &layer.column_sng(j)?,
                mode,
                arithmetic,
                layer.weight_width_bits(),
                trace,
            )
        })
        .collect::<Result<_>>()?;
    let mut report = ActivityReport::default();
    for run in &neurons {
        report += run.report;
    }
    report.cycles = inputs.len() as u64;
    let outputs = neurons
        .iter()
        .zip(&layer.bias)
        .map(|(r, &b)| match arithmetic {
            Arithmetic::Float => f64::from(r.output as f32 + b),
            Arithmetic::Fixed { .. } => r.output + f64::from(b),
        })
        .collect();
    Ok(LayerRun {
        outputs,
        report,
        neurons,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    pub fc: ActivityReport,
    pub sparse: ActivityReport,
    /// Sparse over FC.
    pub memory_bits_ratio: f64,
    pub memory_reads_ratio: f64,
}

/// Runs `dense` on the FC datapath and `sparse` on the sparse one.
pub fn compare_modes(dense: &CompressedLayer, sparse: &CompressedLayer, inputs: &[f32]) -> Result<ModeComparison> {
    if (dense.n, dense.m) != (sparse.n, sparse.m) {
        return Err(Error::shape(
            "compare_modes",
            format!("{}x{}", dense.n, dense.m),
            format!("{}x{}", sparse.n, sparse.m),
        ));
    }
    let fc = simulate_layer(inputs, dense, DatapathMode::Fc, Arithmetic::Float, false)?.report;
    let sp = simulate_layer(inputs, sparse, DatapathMode::Sparse, Arithmetic::Float, false)?.report;
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(ModeComparison {
        fc,
        sparse: sp,
        memory_bits_ratio: ratio(sp.memory_bits, fc.memory_bits),
        memory_reads_ratio: ratio(sp.memory_reads, fc.memory_reads),
    })
}

/// One JSON object per line.
pub fn trace_to_json_lines(trace: &[TraceRecord]) -> String {
    let mut out = String::new();
    for rec in trace {
        out.push_str(&serde_json::to_string(rec).expect("trace records serialize"));
        out.push('\n');
    }
    out
}
