//! Flat binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "RSKIPCKP"
//! version      u32      1
//! kind         u8       SkipKind::code
//! lambda       f64
//! res_scale    f64
//! depth        u32
//! input_dim    u32
//! width        u32
//! hidden       u32
//! classes      u32
//! seed         u64
//! w_skip_init  f64
//! n_params     u64      followed by n_params f64 in declaration order
//! n_buffers    u64      followed by n_buffers f64: running mean then
//!                       running variance of every batch norm, in order
//! ```

use std::path::Path;

use crate::block::{Norm, SkipConstruction, SkipKind};
use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig, ResidualModel};

pub const MAGIC: &[u8; 8] = b"RSKIPCKP";
pub const VERSION: u32 = 1;

fn buffers(model: &ResidualModel) -> Vec<f64> {
    let mut out = Vec::new();
    for b in &model.blocks {
        for n in &b.norms {
            if let Norm::Batch(p) = n {
                out.extend_from_slice(p.running_mean.data());
                out.extend_from_slice(p.running_var.data());
            }
        }
    }
    out
}

fn set_buffers(model: &mut ResidualModel, flat: &[f64]) {
    let mut off = 0;
    for b in &mut model.blocks {
        for n in &mut b.norms {
            if let Norm::Batch(p) = n {
                let d = p.dim();
                p.running_mean.data_mut().copy_from_slice(&flat[off..off + d]);
                p.running_var.data_mut().copy_from_slice(&flat[off + d..off + 2 * d]);
                off += 2 * d;
            }
        }
    }
}

pub fn to_bytes(model: &ResidualModel) -> Vec<u8> {
    let cfg = model.config();
    let c = cfg.construction;
    let params = model.flat_params();
    let bufs = buffers(model);
    let mut out = Vec::with_capacity(96 + 8 * (params.len() + bufs.len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(c.kind().code());
    out.extend_from_slice(&c.lambda().to_le_bytes());
    out.extend_from_slice(&c.residual_scale().to_le_bytes());
    for v in [cfg.depth, cfg.input_dim, cfg.width, cfg.hidden, cfg.classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    out.extend_from_slice(&cfg.w_skip_init.to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(bufs.len() as u64).to_le_bytes());
    for v in bufs {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<ResidualModel> {
    let fmt_err = |reason: String| Error::Format {
        path: origin.to_path_buf(),
        reason,
    };
    let mut r = Reader { buf: bytes, pos: 0 };
    let parse = |r: &mut Reader<'_>| -> std::result::Result<_, String> {
        if r.take(8)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let code = r.u8()?;
        let kind = SkipKind::from_code(code).ok_or_else(|| format!("unknown construction code {code}"))?;
        let lambda = r.f64()?;
        let residual_scale = r.f64()?;
        let dims: Vec<usize> = (0..5).map(|_| r.u32().map(|v| v as usize)).collect::<std::result::Result<_, _>>()?;
        let seed = r.u64()?;
        let w_skip_init = r.f64()?;
        Ok((kind, lambda, residual_scale, dims, seed, w_skip_init))
    };
    let (kind, lambda, residual_scale, dims, seed, w_skip_init) = parse(&mut r).map_err(fmt_err)?;
    let construction = SkipConstruction::new(kind, lambda, residual_scale)
        .map_err(|e| fmt_err(e.to_string()))?;
    let cfg = ModelConfig {
        construction,
        depth: dims[0],
        input_dim: dims[1],
        width: dims[2],
        hidden: dims[3],
        classes: dims[4],
        seed,
        w_skip_init,
    };
    let mut model = build_model(&cfg).map_err(|e| fmt_err(e.to_string()))?;

    let n_params = r.u64().map_err(fmt_err)? as usize;
    if n_params != model.num_params() {
        return Err(fmt_err(format!(
            "header describes {} parameters, file declares {n_params}",
            model.num_params()
        )));
    }
    let params = r.f64s(n_params).map_err(fmt_err)?;
    model.set_flat_params(&params)?;

    let n_buf = r.u64().map_err(fmt_err)? as usize;
    if n_buf != buffers(&model).len() {
        return Err(fmt_err(format!("unexpected buffer count {n_buf}")));
    }
    let bufs = r.f64s(n_buf).map_err(fmt_err)?;
    set_buffers(&mut model, &bufs);
    if r.pos != bytes.len() {
        return Err(fmt_err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(model)
}

pub fn save(model: &ResidualModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ResidualModel> {
    let path = path.as_ref();
    from_bytes(&std::fs::read(path)?, path)
}
