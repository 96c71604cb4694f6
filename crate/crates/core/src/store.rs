//! Kept-weights-only layer storage and the `.spnn` model file.
//!
//! A compressed column holds only the weights at mask positions, in the order
//! the SNG emits its ones. Positions are never stored: decompression replays
//! the register from the column seed and scatters the weights back.
//!
//! File layout, little-endian:
//!
//! ```text
//! "SPNN"  u16 version  u16 layer count
//! per layer:
//!   u32 n  u32 m  u8 quant  u8 lfsr width  u8 lfsr mode  u32 taps  u32 base seed
//!   u32 threshold  m x u32 column seeds  m x u32 kept counts
//!   packed weights (per column, byte padded)  m x f32 bias
//!   m x f32 gamma, beta, running mean, running var
//!   u32 CRC-32 of the record above
//! u64 config hash  u32 epochs  u32 CRC-32 of these 12 bytes
//! ```
//!
//! Packing: real weights as f32; binary 1 bit per weight (1 = +1, 0 = -1);
//! ternary 2 bits (00 = 0, 01 = +1, 11 = -1). Bits fill each byte from the
//! least significant end and padding bits are zero.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{BatchNorm, SparseAffineLayer};
use crate::lfsr::{LfsrConfig, LfsrMode};
use crate::mask::{mask_from_seeds, MaskMatrix, SngConfig};
use crate::quantize::{masked_weights, Phase, QuantMode};
use crate::tensor::Matrix;
use crate::train::Network;

pub const MAGIC: &[u8; 4] = b"SPNN";
pub const FORMAT_VERSION: u16 = 1;

/// One layer in stored form.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedLayer {
    pub n: usize,
    pub m: usize,
    pub quant: QuantMode,
    /// Comparator and register; the register seed equals `column_seeds[0]`.
    pub sng: SngConfig,
    pub base_seed: u32,
    pub column_seeds: Vec<u32>,
    /// Kept weights of each column in ascending row order.
    pub columns: Vec<Vec<f32>>,
    pub bias: Vec<f32>,
    /// Identity for the output layer, which has no batch norm.
    pub norm: BatchNorm<f32>,
}

impl CompressedLayer {
    pub fn weight_width_bits(&self) -> u32 {
        self.quant.weight_width_bits()
    }

    /// Weight-memory depth of neuron `j`.
    pub fn depth(&self, j: usize) -> usize {
        self.columns[j].len()
    }

    pub fn kept(&self) -> usize {
        self.columns.iter().map(Vec::len).sum()
    }

    /// Memory bits of neuron `j`: depth times weight width.
    pub fn neuron_memory_bits(&self, j: usize) -> u64 {
        self.depth(j) as u64 * u64::from(self.weight_width_bits())
    }

    /// Regenerates the connection mask from the stored seeds.
    pub fn mask(&self) -> Result<MaskMatrix> {
        mask_from_seeds(self.n, &self.sng, self.base_seed, self.column_seeds.clone())
    }

    /// SNG for column `j`.
    pub fn column_sng(&self, j: usize) -> Result<SngConfig> {
        self.sng.reseeded(self.column_seeds[j])
    }

    pub fn with_bias(mut self, bias: Vec<f32>) -> Result<Self> {
        if bias.len() != self.m {
            return Err(Error::shape("CompressedLayer::with_bias", self.m, bias.len()));
        }
        self.bias = bias;
        Ok(self)
    }

    pub fn with_norm(mut self, norm: BatchNorm<f32>) -> Result<Self> {
        if norm.features() != self.m {
            return Err(Error::shape("CompressedLayer::with_norm", self.m, norm.features()));
        }
        norm.validate()?;
        self.norm = norm;
        Ok(self)
    }
}

/// Total weight-memory bits of a layer.
pub fn memory_footprint_bits(c: &CompressedLayer) -> u64 {
    (0..c.m).map(|j| c.neuron_memory_bits(j)).sum()
}

/// Quantizes for test, masks, and keeps the mask-1 entries column by column.
/// Bias is zero and batch norm identity until set.
pub fn compress_layer(w: &Matrix<f32>, mask: &MaskMatrix, quant: QuantMode) -> Result<CompressedLayer> {
    if w.shape() != (mask.rows(), mask.cols()) {
        return Err(Error::shape(
            "compress_layer",
            format!("{}x{}", mask.rows(), mask.cols()),
            format!("{}x{}", w.rows(), w.cols()),
        ));
    }
    let effective = masked_weights(w, &mask.to_matrix(), quant, Phase::TestQuantized)?;
    let columns = (0..mask.cols())
        .map(|j| {
            (0..mask.rows())
                .filter(|&i| mask.get(i, j))
                .map(|i| effective[(i, j)])
                .collect()
        })
        .collect();
    let seeds = mask.column_seeds().to_vec();
    let sng = SngConfig::with_threshold(mask.sng().lfsr().with_seed(seeds[0])?, mask.sng().threshold())?;
    Ok(CompressedLayer {
        n: mask.rows(),
        m: mask.cols(),
        quant,
        sng,
        base_seed: mask.base_seed(),
        column_seeds: seeds,
        columns,
        bias: vec![0.0; mask.cols()],
        norm: BatchNorm::new(mask.cols()),
    })
}

/// Scatters kept weights back to the regenerated mask positions.
pub fn decompress_layer(c: &CompressedLayer) -> Result<Matrix<f32>> {
    if c.columns.len() != c.m || c.column_seeds.len() != c.m {
        return Err(Error::Corruption(format!(
            "{} columns and {} seeds for {} outputs",
            c.columns.len(),
            c.column_seeds.len(),
            c.m
        )));
    }
    let mut w = Matrix::zeros(c.n, c.m);
    for (j, column) in c.columns.iter().enumerate() {
        let mut kept = column.iter();
        for (i, bit) in c.column_sng(j)?.bits().take(c.n).enumerate() {
            if bit {
                w[(i, j)] = *kept.next().ok_or_else(|| {
                    Error::Corruption(format!("column {j}: fewer stored weights than mask ones"))
                })?;
            }
        }
        if kept.next().is_some() {
            return Err(Error::Corruption(format!(
                "column {j}: more stored weights than mask ones"
            )));
        }
    }
    Ok(w)
}

/// Complete model: layers plus training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub layers: Vec<CompressedLayer>,
    pub config_hash: u64,
    pub epochs: u32,
}

impl ModelFile {
    pub fn from_network(net: &Network, config_hash: u64, epochs: u32) -> Result<Self> {
        let mut layers = Vec::with_capacity(net.layers().len());
        for (l, layer) in net.layers().iter().enumerate() {
            let mut c = compress_layer(layer.weights(), layer.mask(), layer.quant())?.with_bias(layer.bias().to_vec())?;
            if let Some(norm) = net.norms().get(l) {
                c = c.with_norm(norm.clone())?;
            }
            layers.push(c);
        }
        Ok(ModelFile {
            layers,
            config_hash,
            epochs,
        })
    }

    /// Inference network. Quantized layers carry only their quantized values,
    /// so real-mode and quantized-mode inference coincide for them.
    pub fn to_network(&self) -> Result<Network> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for c in &self.layers {
            layers.push(SparseAffineLayer::new(decompress_layer(c)?, c.bias.clone(), c.mask()?, c.quant)?);
        }
        let norms = self.layers[..self.layers.len().saturating_sub(1)]
            .iter()
            .map(|c| c.norm.clone())
            .collect();
        Network::from_parts(layers, Some(norms))
    }

    pub fn memory_footprint_bits(&self) -> u64 {
        self.layers.iter().map(memory_footprint_bits).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        serialize(self)
    }

    /// Writes to a temporary file beside `path`, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serialize(self)?;
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        deserialize(&fs::read(path)?)
    }
}

fn pack_column(out: &mut Vec<u8>, column: &[f32], quant: QuantMode) -> Result<()> {
    let invalid = |v: f32| Error::InvalidConfig(format!("{v} is not a {} weight", quant.name()));
    match quant {
        QuantMode::None => {
            for &v in column {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        QuantMode::Binary => {
            let mut bytes = vec![0u8; column.len().div_ceil(8)];
            for (k, &v) in column.iter().enumerate() {
                match v {
                    1.0 => bytes[k / 8] |= 1 << (k % 8),
                    -1.0 => {}
                    _ => return Err(invalid(v)),
                }
            }
            out.extend_from_slice(&bytes);
        }
        QuantMode::Ternary => {
            let mut bytes = vec![0u8; (column.len() * 2).div_ceil(8)];
            for (k, &v) in column.iter().enumerate() {
                let code = match v {
                    0.0 => 0b00,
                    1.0 => 0b01,
                    -1.0 => 0b11,
                    _ => return Err(invalid(v)),
                };
                bytes[k / 4] |= code << (2 * (k % 4));
            }
            out.extend_from_slice(&bytes);
        }
    }
    Ok(())
}

fn packed_len(kept: usize, quant: QuantMode) -> usize {
    match quant {
        QuantMode::None => kept * 4,
        QuantMode::Binary => kept.div_ceil(8),
        QuantMode::Ternary => (kept * 2).div_ceil(8),
    }
}

fn unpack_column(bytes: &[u8], kept: usize, quant: QuantMode, offset: usize) -> Result<Vec<f32>> {
    let padding = |o: usize| Error::format(o, "nonzero padding bits");
    Ok(match quant {
        QuantMode::None => bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect(),
        QuantMode::Binary => {
            if kept % 8 != 0 && bytes[kept / 8] >> (kept % 8) != 0 {
                return Err(padding(offset + kept / 8));
            }
            (0..kept)
                .map(|k| if bytes[k / 8] >> (k % 8) & 1 == 1 { 1.0 } else { -1.0 })
                .collect()
        }
        QuantMode::Ternary => {
            if kept % 4 != 0 && bytes[kept / 4] >> (2 * (kept % 4)) != 0 {
                return Err(padding(offset + kept / 4));
            }
            let mut out = Vec::with_capacity(kept);
            for k in 0..kept {
                out.push(match bytes[k / 4] >> (2 * (k % 4)) & 0b11 {
                    0b00 => 0.0,
                    0b01 => 1.0,
                    0b11 => -1.0,
                    _ => return Err(Error::format(offset + k / 4, "invalid ternary code 10")),
                });
            }
            out
        }
    })
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vs: &[f32]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_layer(c: &CompressedLayer) -> Result<Vec<u8>> {
    let too_big = |what: &str| Error::InvalidConfig(format!("{what} does not fit in u32"));
    let n = u32::try_from(c.n).map_err(|_| too_big("n"))?;
    let m = u32::try_from(c.m).map_err(|_| too_big("m"))?;
    if c.columns.len() != c.m || c.column_seeds.len() != c.m || c.bias.len() != c.m || c.norm.features() != c.m {
        return Err(Error::shape("serialize", c.m, "per-column vectors of another length"));
    }
    let lfsr = c.sng.lfsr();
    let mut out = Vec::new();
    put_u32(&mut out, n);
    put_u32(&mut out, m);
    out.push(c.quant.to_byte());
    out.push(lfsr.width());
    out.push(lfsr.mode().to_byte());
    put_u32(&mut out, lfsr.taps_mask());
    put_u32(&mut out, c.base_seed);
    put_u32(&mut out, c.sng.threshold());
    for &s in &c.column_seeds {
        put_u32(&mut out, s);
    }
    for col in &c.columns {
        put_u32(&mut out, col.len() as u32);
    }
    for col in &c.columns {
        pack_column(&mut out, col, c.quant)?;
    }
    put_f32s(&mut out, &c.bias);
    for v in [&c.norm.gamma, &c.norm.beta, &c.norm.running_mean, &c.norm.running_var] {
        put_f32s(&mut out, v);
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

pub fn serialize(model: &ModelFile) -> Result<Vec<u8>> {
    if model.layers.is_empty() {
        return Err(Error::InvalidConfig("model has no layers".into()));
    }
    let count = u16::try_from(model.layers.len())
        .map_err(|_| Error::InvalidConfig("more than 65535 layers".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for c in &model.layers {
        out.extend(encode_layer(c)?);
    }
    let meta_start = out.len();
    out.extend_from_slice(&model.config_hash.to_le_bytes());
    put_u32(&mut out, model.epochs);
    let crc = crc32fast::hash(&out[meta_start..]);
    put_u32(&mut out, crc);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.pos, format!("truncated {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let len = count
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.pos, format!("{what} length overflows")))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    }

    fn u32s(&mut self, count: usize, what: &str) -> Result<Vec<u32>> {
        let len = count
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.pos, format!("{what} length overflows")))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    }
}

fn decode_layer(r: &mut Reader<'_>) -> Result<CompressedLayer> {
    let start = r.pos;
    let n = r.u32("layer n")? as usize;
    let m = r.u32("layer m")? as usize;
    let field = r.pos;
    let quant = QuantMode::from_byte(r.u8("quant mode")?)
        .ok_or_else(|| Error::format(field, "unknown quant mode"))?;
    let width = r.u8("lfsr width")?;
    let mode = LfsrMode::from_byte(r.u8("lfsr mode")?)
        .ok_or_else(|| Error::format(field + 2, "unknown lfsr mode"))?;
    let taps = r.u32("taps")?;
    let base_seed = r.u32("base seed")?;
    let threshold = r.u32("threshold")?;
    let column_seeds = r.u32s(m, "column seeds")?;
    let kept: Vec<usize> = r.u32s(m, "kept counts")?.into_iter().map(|k| k as usize).collect();
    if let Some(&k) = kept.iter().find(|&&k| k > n) {
        return Err(Error::format(start, format!("kept count {k} exceeds {n} rows")));
    }
    let mut packed = Vec::with_capacity(m);
    for &k in &kept {
        let at = r.pos;
        packed.push((at, r.take(packed_len(k, quant), "weight payload")?));
    }
    let bias = r.f32s(m, "bias")?;
    let mut bn: Vec<Vec<f32>> = Vec::with_capacity(4);
    for what in ["gamma", "beta", "running mean", "running var"] {
        bn.push(r.f32s(m, what)?);
    }
    let body_end = r.pos;
    let crc = r.u32("layer checksum")?;
    if crc32fast::hash(&r.bytes[start..body_end]) != crc {
        return Err(Error::Corruption(format!("layer record at byte {start}: checksum mismatch")));
    }
    if n == 0 || m == 0 {
        return Err(Error::format(start, format!("layer shape {n}x{m}")));
    }

    let lfsr = LfsrConfig::from_taps_mask(width, taps, column_seeds[0], mode)
        .map_err(|e| Error::format(field + 1, e.to_string()))?;
    let sng = SngConfig::with_threshold(lfsr, threshold).map_err(|e| Error::format(field, e.to_string()))?;
    let mut columns = Vec::with_capacity(m);
    for (j, (&k, (at, bytes))) in kept.iter().zip(packed).enumerate() {
        let col_sng = sng
            .reseeded(column_seeds[j])
            .map_err(|e| Error::Corruption(format!("column {j}: {e}")))?;
        let ones = col_sng.bits().take(n).filter(|&b| b).count();
        if ones != k {
            return Err(Error::Corruption(format!(
                "column {j}: {k} stored weights, regenerated mask has {ones}"
            )));
        }
        columns.push(unpack_column(bytes, k, quant, at)?);
    }
    let mut it = bn.into_iter();
    let norm = BatchNorm {
        gamma: it.next().expect("four vectors"),
        beta: it.next().expect("four vectors"),
        running_mean: it.next().expect("four vectors"),
        running_var: it.next().expect("four vectors"),
        ..BatchNorm::new(0)
    };
    norm.validate().map_err(|e| Error::Corruption(e.to_string()))?;
    Ok(CompressedLayer {
        n,
        m,
        quant,
        sng,
        base_seed,
        column_seeds,
        columns,
        bias,
        norm,
    })
}

pub fn deserialize(bytes: &[u8]) -> Result<ModelFile> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic"));
    }
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = r.u16("layer count")?;
    if count == 0 {
        return Err(Error::format(6, "model has no layers"));
    }
    let mut layers = Vec::with_capacity(usize::from(count));
    for _ in 0..count {
        layers.push(decode_layer(&mut r)?);
    }
    for pair in layers.windows(2) {
        if pair[0].m != pair[1].n {
            return Err(Error::Corruption(format!(
                "layer widths do not chain: {} outputs into {} inputs",
                pair[0].m, pair[1].n
            )));
        }
    }
    let meta_start = r.pos;
    let config_hash = r.u64("config hash")?;
    let epochs = r.u32("epochs")?;
    let meta_end = r.pos;
    let crc = r.u32("metadata checksum")?;
    if crc32fast::hash(&bytes[meta_start..meta_end]) != crc {
        return Err(Error::Corruption("metadata checksum mismatch".into()));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos, "trailing bytes after model"));
    }
    Ok(ModelFile {
        layers,
        config_hash,
        epochs,
    })
}
