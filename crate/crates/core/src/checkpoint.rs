//! Binary checkpoints: full trainer state (config, weights, optimizer
//! buffers, RNG position, captured init statistics) with exact round-trips.

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::init_protocol::{CapturedStats, SiteStats};
use crate::tensor::Tensor;
use crate::train::Trainer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"SSLCKPT\0";
const VERSION: u32 = 1;

const SEC_ONLINE: u8 = 1;
const SEC_TARGET: u8 = 2;
const SEC_BUFS: u8 = 3;
const SEC_CAPTURED: u8 = 4;
const SEC_END: u8 = 0;

fn w_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_str(w: &mut impl Write, s: &str) -> Result<()> {
    w_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn w_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w_u32(w, t.shape().len() as u32)?;
    for &d in t.shape() {
        w_u32(w, d as u32)?;
    }
    for &v in t.data() {
        w_f64(w, v)?;
    }
    Ok(())
}

fn r_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn r_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn r_u128(r: &mut impl Read) -> Result<u128> {
    let mut b = [0u8; 16];
    r.read_exact(&mut b)?;
    Ok(u128::from_le_bytes(b))
}

fn r_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn r_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn r_str(r: &mut impl Read) -> Result<String> {
    let n = r_u32(r)? as usize;
    if n > 1 << 24 {
        return Err(Error::Checkpoint("unreasonable string length".into()));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
}

fn r_tensor(r: &mut impl Read) -> Result<Tensor> {
    let rank = r_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::Checkpoint("unreasonable tensor rank".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r_u32(r)? as usize);
    }
    let n: usize = shape.iter().product();
    if n > 1 << 28 {
        return Err(Error::Checkpoint("unreasonable tensor size".into()));
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r_f64(r)?);
    }
    Tensor::new(&shape, data)
}

fn write_named_tensors(w: &mut impl Write, items: &[(String, &Tensor)]) -> Result<()> {
    w_u32(w, items.len() as u32)?;
    for (name, t) in items {
        w_str(w, name)?;
        w_tensor(w, t)?;
    }
    Ok(())
}

fn read_named_tensors(r: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    let n = r_u32(r)? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r_str(r)?;
        out.push((name, r_tensor(r)?));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, trainer: &Trainer) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w_u32(&mut w, VERSION)?;
    w_str(&mut w, &trainer.cfg.to_canonical_string())?;
    w_u64(&mut w, trainer.step)?;
    w_u64(&mut w, trainer.epoch as u64)?;
    w_u64(&mut w, trainer.cfg.seed)?;
    w.write_all(&trainer.rng.get_word_pos().to_le_bytes())?;

    w.write_all(&[SEC_ONLINE])?;
    let online: Vec<(String, &Tensor)> =
        trainer.online.params.iter().map(|e| (e.name.clone(), &e.tensor)).collect();
    write_named_tensors(&mut w, &online)?;

    if let Some(target) = &trainer.target {
        w.write_all(&[SEC_TARGET])?;
        let t: Vec<(String, &Tensor)> =
            target.params.iter().map(|e| (e.name.clone(), &e.tensor)).collect();
        write_named_tensors(&mut w, &t)?;
    }

    w.write_all(&[SEC_BUFS])?;
    let mut bufs: Vec<(String, &Tensor)> =
        trainer.bufs.iter().map(|(k, v)| (k.clone(), v)).collect();
    bufs.sort_by(|a, b| a.0.cmp(&b.0));
    write_named_tensors(&mut w, &bufs)?;

    if let Some(cap) = &trainer.captured {
        w.write_all(&[SEC_CAPTURED])?;
        w_u32(&mut w, cap.sites.len() as u32)?;
        w_u64(&mut w, cap.floor_hits as u64)?;
        for s in &cap.sites {
            w_str(&mut w, &s.name)?;
            w_f64(&mut w, s.gamma0)?;
            w_tensor(&mut w, &s.mean)?;
            w_tensor(&mut w, &s.sigma)?;
        }
    }

    w.write_all(&[SEC_END])?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
    }
    let version = r_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {})",
            version, VERSION
        )));
    }
    let cfg_text = r_str(&mut r)?;
    let cfg = ExperimentConfig::parse_str(&cfg_text)?;
    let step = r_u64(&mut r)?;
    let epoch = r_u64(&mut r)? as usize;
    let seed = r_u64(&mut r)?;
    let word_pos = r_u128(&mut r)?;

    // rebuild the skeleton (same config implies same shapes, names, and site
    // rewrites), then overwrite all state from the file
    let mut trainer = Trainer::new(cfg)?;
    trainer.step = step;
    trainer.epoch = epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_word_pos(word_pos);
    trainer.rng = rng;
    trainer.bufs.clear();

    loop {
        let tag = r_u8(&mut r)?;
        match tag {
            SEC_END => break,
            SEC_ONLINE => {
                for (name, t) in read_named_tensors(&mut r)? {
                    let e = trainer.online.params.get_mut(&name)?;
                    if e.tensor.shape() != t.shape() {
                        return Err(Error::Checkpoint(format!("shape mismatch for {}", name)));
                    }
                    e.tensor = t;
                }
            }
            SEC_TARGET => {
                let target = trainer
                    .target
                    .as_mut()
                    .ok_or_else(|| Error::Checkpoint("target section for a config without one".into()))?;
                for (name, t) in read_named_tensors(&mut r)? {
                    target.params.get_mut(&name)?.tensor = t;
                }
            }
            SEC_BUFS => {
                for (name, t) in read_named_tensors(&mut r)? {
                    trainer.bufs.insert(name, t);
                }
            }
            SEC_CAPTURED => {
                let n = r_u32(&mut r)? as usize;
                let floor_hits = r_u64(&mut r)? as usize;
                let mut sites = Vec::with_capacity(n);
                for _ in 0..n {
                    let name = r_str(&mut r)?;
                    let gamma0 = r_f64(&mut r)?;
                    let mean = r_tensor(&mut r)?;
                    let sigma = r_tensor(&mut r)?;
                    sites.push(SiteStats { name, gamma0, mean, sigma });
                }
                trainer.captured = Some(CapturedStats { sites, floor_hits });
            }
            other => return Err(Error::Checkpoint(format!("unknown section tag {}", other))),
        }
    }
    Ok(trainer)
}
