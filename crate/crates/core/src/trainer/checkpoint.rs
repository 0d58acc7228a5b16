//! Binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "DDL1" | version u32 | payload length u64 | payload | crc32 u32
//! ```
//!
//! The CRC covers every byte before it. The payload is a sequence of sections,
//! each `tag u32 | length u64 | body`: one header, one section per layer, the
//! classifier, and the RNG position.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::classifier::ClassifierParams;
use crate::error::{CheckpointError, DdlError, Result};
use crate::network::{Dictionary, InputSpec, Layer, LayerSpec, ModelState};
use crate::patch_ops::WindowSpec;
use crate::rng::RngState;
use crate::sparse_coding::ElasticNetParams;

use super::TrainState;

pub const MAGIC: &[u8; 4] = b"DDL1";
pub const FORMAT_VERSION: u32 = 1;

const TAG_HEADER: u32 = 1;
const TAG_LAYER: u32 = 2;
const TAG_CLASSIFIER: u32 = 3;
const TAG_RNG: u32 = 4;
const PREAMBLE: usize = 16;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn window(&mut self, w: WindowSpec) {
        self.usize(w.window);
        self.usize(w.stride);
    }
    fn matrix(&mut self, m: &Array2<f64>) {
        self.usize(m.nrows());
        self.usize(m.ncols());
        for v in m.iter() {
            self.f64(*v);
        }
    }
    fn vector(&mut self, v: &Array1<f64>) {
        self.usize(v.len());
        for x in v.iter() {
            self.f64(*x);
        }
    }
    fn section(&mut self, tag: u32, body: Writer) {
        self.u32(tag);
        self.usize(body.0.len());
        self.0.extend(body.0);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    /// Offset of `bytes[0]` in the file, for error messages.
    base: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated {
                offset: self.base + self.pos,
                needed: n - (self.bytes.len() - self.pos),
            }
            .into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| malformed("length overflows usize"))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn window(&mut self) -> Result<WindowSpec> {
        let window = self.usize()?;
        let stride = self.usize()?;
        Ok(WindowSpec { window, stride })
    }
    fn matrix(&mut self) -> Result<Array2<f64>> {
        let r = self.usize()?;
        let c = self.usize()?;
        let n = r.checked_mul(c).ok_or_else(|| malformed("matrix too large"))?;
        if n.saturating_mul(8) > self.bytes.len() - self.pos {
            return Err(malformed("matrix larger than its section"));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Array2::from_shape_vec((r, c), data).map_err(|e| malformed(&e.to_string()))
    }
    fn vector(&mut self) -> Result<Array1<f64>> {
        let n = self.usize()?;
        if n.saturating_mul(8) > self.bytes.len() - self.pos {
            return Err(malformed("vector larger than its section"));
        }
        Ok(Array1::from((0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?))
    }
    fn section(&mut self, expected: u32) -> Result<Reader<'a>> {
        let tag = self.u32()?;
        if tag != expected {
            return Err(malformed(&format!("expected section {expected}, found {tag}")));
        }
        let len = self.usize()?;
        let base = self.base + self.pos;
        let body = self.take(len)?;
        Ok(Reader { bytes: body, pos: 0, base })
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(malformed("trailing bytes in section"));
        }
        Ok(())
    }
}

fn malformed(msg: &str) -> DdlError {
    CheckpointError::Malformed(msg.to_string()).into()
}

fn put_enet(w: &mut Writer, p: &ElasticNetParams) {
    w.f64(p.lambda);
    w.f64(p.lambda_prime);
    w.usize(p.max_iters);
    w.f64(p.tol);
}

fn get_enet(r: &mut Reader) -> Result<ElasticNetParams> {
    Ok(ElasticNetParams {
        lambda: r.f64()?,
        lambda_prime: r.f64()?,
        max_iters: r.usize()?,
        tol: r.f64()?,
    })
}

/// Serializes a training state.
pub fn write_checkpoint(state: &TrainState) -> Vec<u8> {
    let model = &state.model;
    let mut payload = Writer::default();

    let mut h = Writer::default();
    let inp = model.input();
    h.usize(inp.channels);
    h.usize(inp.height);
    h.usize(inp.width);
    h.window(inp.window);
    h.usize(model.depth());
    h.u64(state.epoch);
    h.u64(state.step);
    h.u64(model.generation());
    payload.section(TAG_HEADER, h);

    for l in model.layers() {
        let mut b = Writer::default();
        b.usize(l.spec.num_atoms);
        b.window(l.spec.window);
        put_enet(&mut b, &l.spec.enet);
        b.u32(u32::from(l.spec.batch_norm));
        b.matrix(&l.dictionary.atoms().to_owned());
        match &l.running_scale {
            Some(s) => {
                b.u32(1);
                b.vector(s);
            }
            None => b.u32(0),
        }
        payload.section(TAG_LAYER, b);
    }

    let mut c = Writer::default();
    c.f64(model.classifier().lambda_c);
    c.matrix(&model.classifier().weights);
    payload.section(TAG_CLASSIFIER, c);

    let rs = RngState::capture(&state.rng);
    let mut r = Writer::default();
    r.0.extend_from_slice(&rs.seed);
    r.u64(rs.stream);
    r.0.extend_from_slice(&rs.word_pos.to_le_bytes());
    payload.section(TAG_RNG, r);

    let mut out = Writer::default();
    out.0.extend_from_slice(MAGIC);
    out.u32(FORMAT_VERSION);
    out.usize(payload.0.len());
    out.0.extend(payload.0);
    let crc = crc32fast::hash(&out.0);
    out.u32(crc);
    out.0
}

/// Decodes bytes produced by [`write_checkpoint`].
pub fn read_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() >= 4 && &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let mut pre = Reader { bytes, pos: 0, base: 0 };
    pre.take(4)?;
    let version = pre.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let len = pre.usize()?;
    let total = PREAMBLE.saturating_add(len).saturating_add(4);
    if bytes.len() < total {
        return Err(CheckpointError::Truncated {
            offset: bytes.len(),
            needed: total - bytes.len(),
        }
        .into());
    }
    if bytes.len() > total {
        return Err(malformed("trailing bytes after checksum"));
    }
    let stored = u32::from_le_bytes(bytes[total - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..total - 4]);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed }.into());
    }

    let mut p = Reader {
        bytes: &bytes[PREAMBLE..total - 4],
        pos: 0,
        base: PREAMBLE,
    };
    let mut h = p.section(TAG_HEADER)?;
    let input = InputSpec {
        channels: h.usize()?,
        height: h.usize()?,
        width: h.usize()?,
        window: h.window()?,
    };
    let depth = h.usize()?;
    let epoch = h.u64()?;
    let step = h.u64()?;
    let generation = h.u64()?;
    h.finish()?;

    let mut layers = Vec::with_capacity(depth.min(1024));
    for _ in 0..depth {
        let mut b = p.section(TAG_LAYER)?;
        let num_atoms = b.usize()?;
        let window = b.window()?;
        let enet = get_enet(&mut b)?;
        let batch_norm = b.u32()? != 0;
        let atoms = b.matrix()?;
        let running_scale = match b.u32()? {
            0 => None,
            _ => Some(b.vector()?),
        };
        b.finish()?;
        layers.push(Layer {
            spec: LayerSpec {
                num_atoms,
                window,
                enet,
                batch_norm,
            },
            dictionary: Dictionary::new(atoms)?,
            running_scale,
        });
    }

    let mut c = p.section(TAG_CLASSIFIER)?;
    let lambda_c = c.f64()?;
    let weights = c.matrix()?;
    c.finish()?;

    let mut r = p.section(TAG_RNG)?;
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    r.finish()?;
    p.finish()?;

    let mut model = ModelState::new(input, layers, ClassifierParams::new(weights, lambda_c)?)
        .map_err(|e| malformed(&e.to_string()))?;
    model.set_generation(generation);
    Ok(TrainState {
        model,
        rng: RngState {
            seed,
            stream,
            word_pos,
        }
        .restore(),
        epoch,
        step,
    })
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    fs::write(path, write_checkpoint(state))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    read_checkpoint(&fs::read(path)?)
}
