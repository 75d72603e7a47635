//! Binary checkpoints of a quantized model and its Lion momentum.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "QFTC" | version u16 | file length u64 | layers u32 | bit_width u8
//! | outlier_fraction f64 | weight mode u8 | threshold rule u8 | state mode u8 | state bit_width u8
//! | loss u8 | step u64 | activation u8 × (layers − 1)
//! per layer:
//!   rows u32 | cols u32
//!   weight tag u8: 0 dense+sparse | 1 exact
//!     dense+sparse: fraction f64 | (min f32, max f32) × rows | affine | csr
//!     exact:        f32 × rows·cols
//!   momentum tag u8: 0 affine | 1 exact f32 × rows·cols
//! crc32 u32 over every preceding byte
//!
//! affine: bit_width u8 | channels u32 | scale f32 × channels
//!         | zero_point i32 × channels | payload u8 × rows·cols
//! csr:    nnz u32 | row_ptr u32 × (rows + 1) | col u32 × nnz | value f32 × nnz
//! ```

use std::path::Path;

use crate::error::{QftError, Result};
use crate::network::{Activation, LossKind, Model};
use crate::optim::LionState;
use crate::quant::{
    AffineParams, DenseSparseWeight, QuantMode, QuantizedTensor, SparseOutliers, StateCodec,
    StoredState, StoredWeight, Threshold, ThresholdRule, WeightCodec,
};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"QFTC";
pub const FORMAT_VERSION: u16 = 1;

/// Magic, version and file length.
const HEADER_PREFIX: usize = 14;

const TAG_DENSE_SPARSE: u8 = 0;
const TAG_AFFINE: u8 = 0;
const TAG_EXACT: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub state: LionState<f32>,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: u64,
}

fn mode_code(m: QuantMode) -> u8 {
    match m {
        QuantMode::Affine => 0,
        QuantMode::PassThrough => 1,
    }
}

fn mode_from_code(c: u8) -> Result<QuantMode> {
    match c {
        0 => Ok(QuantMode::Affine),
        1 => Ok(QuantMode::PassThrough),
        _ => Err(QftError::Format(format!("unknown quant mode {c}"))),
    }
}

fn rule_code(r: ThresholdRule) -> u8 {
    match r {
        ThresholdRule::Percentile => 0,
        ThresholdRule::RangeFraction => 1,
    }
}

fn rule_from_code(c: u8) -> Result<ThresholdRule> {
    match c {
        0 => Ok(ThresholdRule::Percentile),
        1 => Ok(ThresholdRule::RangeFraction),
        _ => Err(QftError::Format(format!("unknown threshold rule {c}"))),
    }
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| QftError::Format(format!("{v} exceeds u32")))?;
        self.u32(v);
        Ok(())
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn i32s(&mut self, v: &[i32]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn u32s(&mut self, v: &[u32]) {
        for &x in v {
            self.u32(x);
        }
    }

    fn affine(&mut self, q: &QuantizedTensor<f32>) -> Result<()> {
        let p = q.params();
        self.u8(p.bit_width);
        self.len(p.scales.len())?;
        self.f32s(&p.scales);
        self.i32s(&p.zero_points);
        self.buf.extend_from_slice(q.values());
        Ok(())
    }

    fn csr(&mut self, s: &SparseOutliers<f32>) -> Result<()> {
        self.len(s.nnz())?;
        self.u32s(s.row_ptr());
        self.u32s(s.col_idx());
        self.f32s(s.values());
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(QftError::Truncated(self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn words(&mut self, n: usize) -> Result<impl Iterator<Item = [u8; 4]> + 'a> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| QftError::Format(format!("count {n} overflows")))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| c.try_into().expect("chunk of 4")))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self.words(n)?.map(f32::from_le_bytes).collect())
    }
    fn i32s(&mut self, n: usize) -> Result<Vec<i32>> {
        Ok(self.words(n)?.map(i32::from_le_bytes).collect())
    }
    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        Ok(self.words(n)?.map(u32::from_le_bytes).collect())
    }

    fn affine(&mut self, rows: usize, cols: usize) -> Result<QuantizedTensor<f32>> {
        let bit_width = self.u8()?;
        let channels = self.len()?;
        let scales = self.f32s(channels)?;
        let zero_points = self.i32s(channels)?;
        let values = self.take(rows * cols)?.to_vec();
        QuantizedTensor::from_parts(
            rows,
            cols,
            values,
            AffineParams {
                scales,
                zero_points,
                bit_width,
            },
        )
    }

    fn csr(&mut self, rows: usize, cols: usize) -> Result<SparseOutliers<f32>> {
        let nnz = self.len()?;
        let row_ptr = self.u32s(rows + 1)?;
        let col_idx = self.u32s(nnz)?;
        let values = self.f32s(nnz)?;
        SparseOutliers::from_csr(rows, cols, row_ptr, col_idx, values)
    }
}

fn write_weight(w: &mut Writer, weight: &StoredWeight<f32>) -> Result<()> {
    match weight {
        StoredWeight::DenseSparse(d) => {
            w.u8(TAG_DENSE_SPARSE);
            w.f64(d.outlier_fraction());
            for t in d.thresholds() {
                w.f32s(&[t.min, t.max]);
            }
            w.affine(d.dense())?;
            w.csr(d.sparse())
        }
        StoredWeight::Exact(t) => {
            w.u8(TAG_EXACT);
            w.f32s(t.data());
            Ok(())
        }
    }
}

fn read_weight(r: &mut Reader<'_>, rows: usize, cols: usize) -> Result<StoredWeight<f32>> {
    match r.u8()? {
        TAG_DENSE_SPARSE => {
            let fraction = r.f64()?;
            let bounds = r.f32s(rows * 2)?;
            let thresholds = bounds
                .chunks_exact(2)
                .map(|c| Threshold { min: c[0], max: c[1] })
                .collect();
            let dense = r.affine(rows, cols)?;
            let sparse = r.csr(rows, cols)?;
            Ok(StoredWeight::DenseSparse(DenseSparseWeight::from_parts(
                dense, sparse, thresholds, fraction,
            )?))
        }
        TAG_EXACT => Ok(StoredWeight::Exact(Tensor::from_vec(rows, cols, r.f32s(rows * cols)?)?)),
        tag => Err(QftError::Format(format!("unknown weight tag {tag}"))),
    }
}

fn write_state(w: &mut Writer, m: &StoredState<f32>) -> Result<()> {
    match m {
        StoredState::Quantized(q) => {
            w.u8(TAG_AFFINE);
            w.affine(q)
        }
        StoredState::Exact(t) => {
            w.u8(TAG_EXACT);
            w.f32s(t.data());
            Ok(())
        }
    }
}

fn read_state(r: &mut Reader<'_>, rows: usize, cols: usize) -> Result<StoredState<f32>> {
    match r.u8()? {
        TAG_AFFINE => Ok(StoredState::Quantized(r.affine(rows, cols)?)),
        TAG_EXACT => Ok(StoredState::Exact(Tensor::from_vec(rows, cols, r.f32s(rows * cols)?)?)),
        tag => Err(QftError::Format(format!("unknown momentum tag {tag}"))),
    }
}

pub fn encode_checkpoint(model: &Model<f32>, state: &LionState<f32>, step: u64) -> Result<Vec<u8>> {
    if state.momentum().len() != model.num_layers() {
        return Err(QftError::InvalidArgument(format!(
            "{} momentum tensors for {} layers",
            state.momentum().len(),
            model.num_layers()
        )));
    }
    let codec = model.codec();
    let state_codec = state.codec();
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC);
    w.u16(FORMAT_VERSION);
    let len_at = w.buf.len();
    w.u64(0);
    w.len(model.num_layers())?;
    w.u8(codec.bit_width);
    w.f64(codec.outlier_fraction);
    w.u8(mode_code(codec.mode));
    w.u8(rule_code(codec.rule));
    w.u8(mode_code(state_codec.mode));
    w.u8(state_codec.bit_width);
    w.u8(model.loss_kind().code());
    w.u64(step);
    for a in model.activations() {
        w.u8(a.code());
    }
    for (layer, m) in model.layers().iter().zip(state.momentum()) {
        let (rows, cols) = layer.weight().shape();
        if m.shape() != (rows, cols) {
            return Err(QftError::shape(
                "encode_checkpoint",
                format!("{:?}", (rows, cols)),
                format!("{:?}", m.shape()),
            ));
        }
        w.len(rows)?;
        w.len(cols)?;
        write_weight(&mut w, layer.weight())?;
        write_state(&mut w, m)?;
    }
    let total = (w.buf.len() + 4) as u64;
    w.buf[len_at..len_at + 8].copy_from_slice(&total.to_le_bytes());
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    Ok(w.buf)
}

fn parse_body(bytes: &[u8]) -> Result<(Checkpoint, usize)> {
    let mut r = Reader { buf: bytes, pos: HEADER_PREFIX };
    let layers = r.len()?;
    let bit_width = r.u8()?;
    let outlier_fraction = r.f64()?;
    let mode = mode_from_code(r.u8()?)?;
    let rule = rule_from_code(r.u8()?)?;
    let state_mode = mode_from_code(r.u8()?)?;
    let state_bit_width = r.u8()?;
    let loss = LossKind::from_code(r.u8()?)?;
    let step = r.u64()?;
    if layers == 0 {
        return Err(QftError::Format("checkpoint has no layers".into()));
    }
    let activations = (1..layers)
        .map(|_| Activation::from_code(r.u8()?))
        .collect::<Result<Vec<_>>>()?;
    let mut weights = Vec::new();
    let mut momentum = Vec::new();
    for _ in 0..layers {
        let rows = r.len()?;
        let cols = r.len()?;
        rows.checked_mul(cols)
            .filter(|&n| n <= bytes.len())
            .ok_or_else(|| QftError::Format(format!("implausible layer shape {rows}x{cols}")))?;
        weights.push(read_weight(&mut r, rows, cols)?);
        momentum.push(read_state(&mut r, rows, cols)?);
    }
    let codec = WeightCodec {
        mode,
        bit_width,
        outlier_fraction,
        rule,
    };
    let state_codec = StateCodec {
        mode: state_mode,
        bit_width: state_bit_width,
    };
    let model = Model::from_stored(weights, activations, loss, codec)?;
    let state = LionState::from_parts(momentum, state_codec);
    Ok((Checkpoint { model, state, step }, r.pos))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() {
        return Err(QftError::Truncated(bytes.len()));
    }
    if &bytes[..4] != MAGIC {
        return Err(QftError::Format("bad magic, not a checkpoint".into()));
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(QftError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let declared = r.u64()?;
    if (bytes.len() as u64) < declared {
        return Err(QftError::Truncated(bytes.len()));
    }
    if bytes.len() < HEADER_PREFIX + 4 {
        return Err(QftError::Truncated(bytes.len()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(QftError::Checksum { stored, computed });
    }
    if bytes.len() as u64 != declared {
        return Err(QftError::Format(format!(
            "file is {} bytes, header declares {declared}",
            bytes.len()
        )));
    }
    let (ckpt, end) = parse_body(body)?;
    if end != body.len() {
        return Err(QftError::Format(format!(
            "{} trailing bytes after the last layer",
            body.len() - end
        )));
    }
    Ok(ckpt)
}

pub fn save_checkpoint(model: &Model<f32>, state: &LionState<f32>, step: u64, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model, state, step)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}
