//! Binary training checkpoints.
//!
//! Little-endian layout: magic `KAOCKPT\0`, format version, the denoiser
//! shape, the iteration counter, optimizer hyperparameters and step count,
//! one record per parameter (name, shape, values, first and second moments)
//! in model order, the loss history, and a CRC-32 of everything before it.

use std::path::Path;

use kao_core::denoiser::{DenoiserConfig, TptDenoiser};
use kao_core::optim::{AdamState, OptimizerKind};
use kao_core::trainer::TrainState;
use kao_core::{Grid, SeededRng};

use crate::error::{CliError, Result};
use crate::pnm::write_atomic;

const MAGIC: &[u8; 8] = b"KAOCKPT\0";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, v: usize) {
        self.u32(v as u32);
    }
    fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn corrupt(what: &str) -> CliError {
    CliError::Data(format!("corrupt checkpoint: {what}"))
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt("truncated"))?;
        let s = &self.bytes[self.pos..end];
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
        self.array().map(u16::from_le_bytes)
    }
    fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }
    fn u64(&mut self) -> Result<u64> {
        self.array().map(u64::from_le_bytes)
    }
    fn f64(&mut self) -> Result<f64> {
        self.array().map(f64::from_le_bytes)
    }
    fn len(&mut self) -> Result<usize> {
        self.u32().map(|v| v as usize)
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| corrupt("length overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect())
    }
}

pub fn encode(state: &TrainState) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    let cfg = state.model.config();
    w.len(cfg.in_channels);
    w.len(cfg.height);
    w.len(cfg.width);
    w.len(cfg.level_channels.len());
    for &c in &cfg.level_channels {
        w.len(c);
    }
    w.len(cfg.time_dim);
    w.len(cfg.ff_mult);
    w.len(cfg.mixer_hidden);
    w.u64(state.iter as u64);
    let opt = &state.opt;
    w.u8(match opt.kind {
        OptimizerKind::AdamW => 0,
        OptimizerKind::Adam => 1,
    });
    w.f64(opt.beta1);
    w.f64(opt.beta2);
    w.f64(opt.eps);
    w.f64(opt.weight_decay);
    w.u64(opt.steps);
    let params = state.model.params();
    w.len(params.len());
    for (slot, (name, g)) in params.iter().enumerate() {
        w.u16(name.len() as u16);
        w.0.extend_from_slice(name.as_bytes());
        w.u8(g.rank() as u8);
        for &d in g.shape() {
            w.len(d);
        }
        w.f32s(g.data());
        w.f32s(opt.m[slot].data());
        w.f32s(opt.v[slot].data());
    }
    w.u64(state.losses.len() as u64);
    for &l in &state.losses {
        w.f64(l);
    }
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    w.0
}

pub fn decode(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CliError::Data("not a checkpoint file".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CliError::Data(format!("unsupported checkpoint version {version}")));
    }
    let (in_channels, height, width) = (r.len()?, r.len()?, r.len()?);
    let levels = r.len()?;
    if levels > 16 {
        return Err(corrupt("implausible level count"));
    }
    let level_channels = (0..levels).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
    let cfg = DenoiserConfig {
        in_channels,
        height,
        width,
        level_channels,
        time_dim: r.len()?,
        ff_mult: r.len()?,
        mixer_hidden: r.len()?,
    };
    let mut model = TptDenoiser::new(cfg, &mut SeededRng::new(0))?;
    let iter = r.u64()? as usize;
    let kind = match r.u8()? {
        0 => OptimizerKind::AdamW,
        1 => OptimizerKind::Adam,
        k => return Err(corrupt(&format!("optimizer kind {k}"))),
    };
    let mut opt = AdamState::new(kind, 0.0, model.params());
    opt.beta1 = r.f64()?;
    opt.beta2 = r.f64()?;
    opt.eps = r.f64()?;
    opt.weight_decay = r.f64()?;
    opt.steps = r.u64()?;
    let count = r.len()?;
    if count != model.params().len() {
        return Err(corrupt(&format!("{count} parameters, model has {}", model.params().len())));
    }
    for slot in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| corrupt("parameter name"))?;
        let (expected_name, expected) = model.params().iter().nth(slot).expect("slot in range");
        if name != expected_name {
            return Err(corrupt(&format!("parameter `{name}` where `{expected_name}` was expected")));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        if shape != expected.shape() {
            return Err(corrupt(&format!("`{name}` has shape {shape:?}, expected {:?}", expected.shape())));
        }
        let n = expected.len();
        let values = Grid::new(&shape, r.f32s(n)?)?;
        opt.m[slot] = Grid::new(&shape, r.f32s(n)?)?;
        opt.v[slot] = Grid::new(&shape, r.f32s(n)?)?;
        *model.params_mut().slot_mut(slot) = values;
    }
    let losses_len = r.u64()? as usize;
    if losses_len > body.len() / 8 {
        return Err(corrupt("loss history length"));
    }
    let losses = (0..losses_len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(TrainState {
        model,
        opt,
        iter,
        losses,
    })
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    write_atomic(path, &encode(state))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
