//! Binary checkpoints.
//!
//! Layout: `b"CULB"`, format version (`u32` LE), manifest length (`u64` LE),
//! UTF-8 JSON manifest, then every section's values as little-endian `f64`
//! in manifest order. The deletion mask is stored as its own section so a
//! shipped model cannot drop it.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bottleneck::CodebookState;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Seq2Seq};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CULB";
pub const VERSION: u32 = 1;
const MASK_SECTION: &str = "codebook.deleted_mask";
const CODES_SECTION: &str = "codebook.codes";
/// Upper bound on the manifest size accepted when loading.
const MAX_MANIFEST: u64 = 64 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    pub deleted: Vec<usize>,
    pub sections: Vec<Section>,
}

fn sections_of(model: &Seq2Seq) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out: Vec<(String, Vec<usize>, Vec<f64>)> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec(), t.data().to_vec()))
        .collect();
    let mask = model.codebook.deleted_mask();
    out.push((
        MASK_SECTION.into(),
        vec![mask.len()],
        mask.iter().map(|&d| if d { 1.0 } else { 0.0 }).collect(),
    ));
    out
}

pub fn save<W: Write>(model: &Seq2Seq, metrics: &BTreeMap<String, f64>, w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    let sections = sections_of(model);
    let manifest = Manifest {
        config: model.config().clone(),
        metrics: metrics.clone(),
        deleted: model.codebook.deleted_indices(),
        sections: sections
            .iter()
            .map(|(n, s, _)| Section {
                name: n.clone(),
                shape: s.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, _, data) in &sections {
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load<R: Read>(r: R) -> Result<(Seq2Seq, Manifest)> {
    let mut r = BufReader::new(r);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for a header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic, not a checkpoint".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Format(format!(
            "format version {version} is not supported (expected {VERSION})"
        )));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > MAX_MANIFEST {
        return Err(Error::Format(format!(
            "manifest of {len} bytes is implausible"
        )));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)?;
    let manifest: Manifest = serde_json::from_slice(&json)?;

    let mut blobs: BTreeMap<String, Tensor> = BTreeMap::new();
    for s in &manifest.sections {
        let n: usize = s.shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Format(format!("section `{}` is truncated", s.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if blobs
            .insert(s.name.clone(), Tensor::new(s.shape.clone(), data)?)
            .is_some()
        {
            return Err(Error::Format(format!("duplicate section `{}`", s.name)));
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format(
            "trailing bytes after the last section".into(),
        ));
    }

    let mut model = Seq2Seq::new(manifest.config.clone(), 0)?;
    let mut missing = None;
    model
        .weights
        .visit_mut(&mut |name, t| match blobs.remove(&name) {
            Some(b) if b.shape() == t.shape() => *t = b,
            _ => {
                missing.get_or_insert(name);
            }
        });
    if let Some(name) = missing {
        return Err(Error::Format(format!(
            "section `{name}` is missing or misshapen"
        )));
    }
    let codes = blobs
        .remove(CODES_SECTION)
        .ok_or_else(|| Error::Format("codes section missing".into()))?;
    let mask = blobs
        .remove(MASK_SECTION)
        .ok_or_else(|| Error::Format("deletion mask section missing".into()))?;
    if let Some(extra) = blobs.keys().next() {
        return Err(Error::Format(format!("unexpected section `{extra}`")));
    }
    let mut deleted = Vec::with_capacity(mask.len());
    for &v in mask.data() {
        deleted.push(match v {
            0.0 => false,
            1.0 => true,
            _ => {
                return Err(Error::Format(
                    "deletion mask holds a non-binary value".into(),
                ))
            }
        });
    }
    let listed: Vec<usize> = (0..deleted.len()).filter(|&k| deleted[k]).collect();
    if listed != manifest.deleted {
        return Err(Error::Format(
            "manifest deletion list disagrees with the mask".into(),
        ));
    }
    let codebook = CodebookState::with_mask(codes, manifest.config.codebook.top_s, deleted)?;
    let model = Seq2Seq::from_parts(manifest.config.clone(), model.weights, codebook)?;
    Ok((model, manifest))
}

pub fn save_file(model: &Seq2Seq, metrics: &BTreeMap<String, f64>, path: &Path) -> Result<()> {
    save(model, metrics, File::create(path)?)
}

pub fn load_file(path: &Path) -> Result<(Seq2Seq, Manifest)> {
    load(File::open(path)?)
}
