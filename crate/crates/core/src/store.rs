//! Sealed binary files for full-precision adapters (`QLAD`), samples
//! (`QSMP`) and single tensors (`QTEN`), plus directory helpers.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::codec::{seal, unseal, Reader, Writer};
use crate::error::{Error, Result};
use crate::graph::{LoRAAdapter, LoraFactors, Sample};
use crate::tensor::Tensor;

const ADAPTER_MAGIC: &[u8; 4] = b"QLAD";
const SAMPLE_MAGIC: &[u8; 4] = b"QSMP";
const TENSOR_MAGIC: &[u8; 4] = b"QTEN";
const VERSION: u16 = 1;

pub const ADAPTER_EXT: &str = "qla";
pub const SAMPLE_EXT: &str = "qds";
pub const TENSOR_EXT: &str = "qtn";

fn done(r: &Reader) -> Result<()> {
    if r.is_done() {
        Ok(())
    } else {
        Err(Error::Format("trailing bytes in record".into()))
    }
}

pub fn adapter_to_bytes(a: &LoRAAdapter) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.str(&a.id)?;
    w.len32(a.entries.len())?;
    for (&nid, f) in &a.entries {
        w.u32(nid);
        w.f32(f.alpha);
        w.tensor(&f.a)?;
        w.tensor(&f.b)?;
    }
    Ok(seal(ADAPTER_MAGIC, VERSION, &w.buf))
}

pub fn adapter_from_bytes(bytes: &[u8]) -> Result<LoRAAdapter> {
    let mut r = Reader::new(unseal(bytes, ADAPTER_MAGIC, VERSION)?);
    let id = r.str()?;
    let mut entries = BTreeMap::new();
    for _ in 0..r.usize()? {
        let nid = r.u32()?;
        let alpha = r.f32()?;
        entries.insert(nid, LoraFactors { alpha, a: r.tensor()?, b: r.tensor()? });
    }
    done(&r)?;
    Ok(LoRAAdapter { id, entries })
}

pub fn sample_to_bytes(s: &Sample) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.u64(s.noise_seed);
    w.tensor(&s.x)?;
    w.tensor(&s.cond)?;
    match &s.target {
        Some(t) => {
            w.u8(1);
            w.tensor(t)?;
        }
        None => w.u8(0),
    }
    Ok(seal(SAMPLE_MAGIC, VERSION, &w.buf))
}

pub fn sample_from_bytes(bytes: &[u8]) -> Result<Sample> {
    let mut r = Reader::new(unseal(bytes, SAMPLE_MAGIC, VERSION)?);
    let noise_seed = r.u64()?;
    let x = r.tensor()?;
    let cond = r.tensor()?;
    let target = match r.u8()? {
        0 => None,
        1 => Some(r.tensor()?),
        v => return Err(Error::Format(format!("bad target flag {v}"))),
    };
    done(&r)?;
    Ok(Sample { x, cond, noise_seed, target })
}

pub fn tensor_to_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.tensor(t)?;
    Ok(seal(TENSOR_MAGIC, VERSION, &w.buf))
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(unseal(bytes, TENSOR_MAGIC, VERSION)?);
    let t = r.tensor()?;
    done(&r)?;
    Ok(t)
}

/// Files in `dir` with extension `ext`, sorted by name.
pub fn list(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_file() && p.extension().is_some_and(|x| x == ext) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Every sample file in `dir`, in file-name order.
pub fn load_samples(dir: &Path) -> Result<Vec<Sample>> {
    list(dir, SAMPLE_EXT)?.iter().map(|p| sample_from_bytes(&fs::read(p)?)).collect()
}

/// Writes `sample-0000.qds`, `sample-0001.qds`, ...
pub fn save_samples(dir: &Path, samples: &[Sample]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let p = dir.join(format!("sample-{i:04}.{SAMPLE_EXT}"));
            fs::write(&p, sample_to_bytes(s)?)?;
            Ok(p)
        })
        .collect()
}

/// Every adapter file in `dir`, in file-name order.
pub fn load_adapters(dir: &Path) -> Result<Vec<LoRAAdapter>> {
    list(dir, ADAPTER_EXT)?.iter().map(|p| adapter_from_bytes(&fs::read(p)?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_def::{ModelDef, TOY};

    #[test]
    fn records_round_trip() {
        let d = ModelDef::parse(TOY).unwrap();
        let b = d.build_bundle().unwrap();
        let a = &d.build_adapters(&b).unwrap()[0];
        assert_eq!(&adapter_from_bytes(&adapter_to_bytes(a).unwrap()).unwrap(), a);
        let mut s = d.samples(1, 3).remove(0);
        assert_eq!(sample_from_bytes(&sample_to_bytes(&s).unwrap()).unwrap(), s);
        s.target = Some(s.x.clone());
        assert_eq!(sample_from_bytes(&sample_to_bytes(&s).unwrap()).unwrap(), s);
        assert_eq!(tensor_from_bytes(&tensor_to_bytes(&s.x).unwrap()).unwrap(), s.x);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let t = tensor_to_bytes(&Tensor::scalar(1.0)).unwrap();
        assert!(matches!(sample_from_bytes(&t), Err(Error::Format(_))));
    }
}
