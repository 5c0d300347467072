//! Binary checkpoints: a fixed header, the flat parameter buffer as
//! little-endian `f64`, then optional Adam moments. A JSON sidecar next to
//! the file records the configuration in readable form.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::{AdamState, CsUnet, CsUnetConfig};
use crate::scalar::Scalar;
use crate::sphharm::Degree;

pub const MAGIC: &[u8; 8] = b"LOCDIFF\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub degree: u32,
    pub net: CsUnetConfig,
    pub widths: Vec<usize>,
    pub num_params: usize,
    pub tensors: Vec<(String, Vec<usize>)>,
    pub train: Option<TrainConfig>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

struct Writer<W: Write> {
    w: W,
    path: PathBuf,
}

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.w.write_all(b).map_err(|e| Error::io(&self.path, e))
    }

    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} overflows u32")))?;
        self.bytes(&v.to_le_bytes())
    }

    fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn f64s<T: Scalar>(&mut self, vs: &[T]) -> Result<()> {
        for v in vs {
            self.bytes(&v.f64().to_le_bytes())?;
        }
        Ok(())
    }
}

struct Reader<R: Read> {
    r: R,
}

impl<R: Read> Reader<R> {
    fn exact<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.r
            .read_exact(&mut b)
            .map_err(|_| Error::Checkpoint(format!("truncated while reading {what}")))?;
        Ok(b)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.exact(what)?) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.exact(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.exact(what)?))
    }

    fn f64s<T: Scalar>(&mut self, n: usize, what: &str) -> Result<Vec<T>> {
        (0..n).map(|_| self.f64(what).map(T::of)).collect()
    }
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &CsUnet<T>,
    adam: Option<&AdamState<T>>,
    train: Option<&TrainConfig>,
) -> Result<()> {
    let cfg = model.config();
    let degree = Degree::from_dim(cfg.dim)?;
    let mut widths = vec![cfg.dim];
    widths.extend(cfg.encoder_widths());
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = Writer {
        w: BufWriter::new(f),
        path: path.to_owned(),
    };
    w.bytes(MAGIC)?;
    w.u32(FORMAT_VERSION as usize)?;
    w.u32(degree.get() as usize)?;
    w.u32(cfg.cond_dim)?;
    w.u32(cfg.time_dim)?;
    w.u32(cfg.time_hidden)?;
    w.u32(cfg.depth)?;
    w.u32(widths.len())?;
    for &wd in &widths {
        w.u32(wd)?;
    }
    w.bytes(&cfg.dropout.to_le_bytes())?;
    w.bytes(&cfg.first_omega.to_le_bytes())?;
    w.u64(model.num_params() as u64)?;
    w.f64s(model.params())?;
    match adam {
        Some(a) => {
            w.bytes(&[1])?;
            w.u64(a.step)?;
            w.f64s(&a.m)?;
            w.f64s(&a.v)?;
        }
        None => w.bytes(&[0])?,
    }
    w.w.flush().map_err(|e| Error::io(path, e))?;

    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        degree: degree.get(),
        net: cfg.clone(),
        widths,
        num_params: model.num_params(),
        tensors: model.tensor_names(),
        train: train.cloned(),
    };
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&side, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(CsUnet<T>, Option<AdamState<T>>)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        r: BufReader::new(f),
    };
    if &r.exact::<8>("magic")? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint",
            path.display()
        )));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let degree = Degree::new(r.u32("degree")? as u32)?;
    let cond_dim = r.u32("condition width")?;
    let time_dim = r.u32("time embedding width")?;
    let time_hidden = r.u32("time hidden width")?;
    let depth = r.u32("depth")?;
    let n_widths = r.u32("width count")?;
    if n_widths != depth / 2 + 1 {
        return Err(Error::Checkpoint(format!(
            "{n_widths} widths inconsistent with depth {depth}"
        )));
    }
    let widths: Vec<usize> = (0..n_widths)
        .map(|_| r.u32("widths"))
        .collect::<Result<_>>()?;
    let dropout = r.f64("dropout")?;
    let first_omega = r.f64("first omega")?;
    let cfg = CsUnetConfig {
        dim: degree.dim(),
        cond_dim,
        time_dim,
        time_hidden,
        bottleneck: *widths.last().expect("non-empty"),
        depth,
        dropout,
        first_omega,
    };
    let mut expect = vec![cfg.dim];
    expect.extend(cfg.encoder_widths());
    if expect != widths {
        return Err(Error::Checkpoint(format!(
            "stored widths {widths:?} do not match the architecture {expect:?}"
        )));
    }
    let n = r.u64("parameter count")? as usize;
    let params = r.f64s(n, "parameters")?;
    let model = CsUnet::from_parts(cfg, params)
        .map_err(|e| Error::Checkpoint(format!("parameter block: {e}")))?;
    let adam = match r.exact::<1>("optimizer flag")?[0] {
        0 => None,
        1 => {
            let step = r.u64("optimizer step")?;
            let m = r.f64s(n, "first moments")?;
            let v = r.f64s(n, "second moments")?;
            Some(AdamState { step, m, v })
        }
        b => return Err(Error::Checkpoint(format!("bad optimizer flag {b}"))),
    };
    let mut rest = [0u8; 1];
    if r.r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Checkpoint(
            "trailing bytes after optimizer state".into(),
        ));
    }
    Ok((model, adam))
}

pub fn load_meta(path: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    Ok(serde_json::from_str(&text)?)
}
