//! Binary checkpoints of fitted models.
//!
//! Layout (all integers and floats little-endian):
//! `b"DPBEKKCK"`, `u32` version, `u8` model kind, `u32` assets,
//! 32-byte config hash, 32-byte panel hash, parameters, terminal carry.

use std::path::Path;

use thiserror::Error;

use deepbekk::garch::{Carry, DccCarry, DccParams, ScalarBekkParams, UnivariateGarchParams};
use deepbekk::linalg::{tri_len, LowerTriangular, Matrix};
use deepbekk::lstm::{LstmState, LstmWeights};
use deepbekk::lstm_bekk::LstmBekkParams;
use deepbekk::{ModelKind, ModelParams};

pub const MAGIC: &[u8; 8] = b"DPBEKKCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (this build reads version {VERSION})")]
    Version(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// State after the validation span.
    pub carry: Carry,
    pub config_hash: [u8; 32],
    pub panel_hash: [u8; 32],
}

fn kind_tag(k: ModelKind) -> u8 {
    match k {
        ModelKind::ScalarBekk => 0,
        ModelKind::Dcc => 1,
        ModelKind::LstmBekk => 2,
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|x| self.f64(*x));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(k).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, k: usize) -> Result<Vec<f64>, CheckpointError> {
        (0..k).map(|_| self.f64()).collect()
    }
    fn hash(&mut self) -> Result<[u8; 32], CheckpointError> {
        Ok(self.take(32)?.try_into().expect("32 bytes"))
    }
    fn matrix(&mut self, n: usize) -> Result<Matrix, CheckpointError> {
        Matrix::from_vec(n, n, self.f64s(n * n)?).map_err(invalid)
    }
    fn lower(&mut self, n: usize) -> Result<LowerTriangular, CheckpointError> {
        LowerTriangular::from_packed(self.f64s(tri_len(n))?).map_err(invalid)
    }
}

fn invalid(e: impl std::fmt::Display) -> CheckpointError {
    CheckpointError::Invalid(e.to_string())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u8(kind_tag(self.params.kind()));
        w.u32(self.params.dim() as u32);
        w.0.extend_from_slice(&self.config_hash);
        w.0.extend_from_slice(&self.panel_hash);
        match &self.params {
            ModelParams::ScalarBekk(p) => {
                w.f64s(p.c.packed());
                w.f64s(&[p.a, p.b]);
            }
            ModelParams::Dcc(p) => {
                for g in &p.garch {
                    w.f64s(&[g.omega, g.alpha, g.beta]);
                }
                w.f64s(&[p.a, p.b]);
                w.f64s(p.s.as_slice());
            }
            ModelParams::LstmBekk(p) => {
                w.f64s(p.c.packed());
                w.f64s(&[p.a, p.b]);
                w.u32(p.lstm.num_layers() as u32);
                w.f64s(&p.lstm.flatten());
            }
        }
        match &self.carry {
            Carry::Bekk { h } => w.f64s(h.as_slice()),
            Carry::Dcc(c) => {
                w.f64s(&c.var);
                w.f64s(c.q.as_slice());
            }
            Carry::LstmBekk { h, lstm } => {
                w.f64s(h.as_slice());
                for (h, c) in lstm.h.iter().zip(&lstm.c) {
                    w.f64s(h);
                    w.f64s(c);
                }
            }
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let tag = r.u8()?;
        let n = r.u32()? as usize;
        if n == 0 {
            return Err(invalid("zero assets"));
        }
        let config_hash = r.hash()?;
        let panel_hash = r.hash()?;
        let (params, carry) = match tag {
            0 => {
                let c = r.lower(n)?;
                let (a, b) = (r.f64()?, r.f64()?);
                let h = r.matrix(n)?;
                (ModelParams::ScalarBekk(ScalarBekkParams { c, a, b }), Carry::Bekk { h })
            }
            1 => {
                let garch = (0..n)
                    .map(|_| {
                        Ok(UnivariateGarchParams {
                            omega: r.f64()?,
                            alpha: r.f64()?,
                            beta: r.f64()?,
                        })
                    })
                    .collect::<Result<Vec<_>, CheckpointError>>()?;
                let (a, b) = (r.f64()?, r.f64()?);
                let s = r.matrix(n)?;
                let var = r.f64s(n)?;
                let q = r.matrix(n)?;
                (ModelParams::Dcc(DccParams { garch, a, b, s }), Carry::Dcc(DccCarry { var, q }))
            }
            2 => {
                let c = r.lower(n)?;
                let (a, b) = (r.f64()?, r.f64()?);
                let layers = r.u32()? as usize;
                let mut lstm = LstmWeights::zeros(n, layers).map_err(invalid)?;
                let flat = r.f64s(lstm.num_params())?;
                lstm.assign_flat(&flat).map_err(invalid)?;
                let h = r.matrix(n)?;
                let mut state = LstmState::zeros(n, layers);
                for l in 0..layers {
                    state.h[l] = r.f64s(n)?;
                    state.c[l] = r.f64s(n)?;
                }
                (
                    ModelParams::LstmBekk(LstmBekkParams { c, a, b, lstm }),
                    Carry::LstmBekk { h, lstm: state },
                )
            }
            other => return Err(invalid(format!("unknown model tag {other}"))),
        };
        if r.pos != buf.len() {
            return Err(invalid(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        params.validate().map_err(invalid)?;
        Ok(Self {
            params,
            carry,
            config_hash,
            panel_hash,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
