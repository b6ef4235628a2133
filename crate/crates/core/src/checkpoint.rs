//! Named-array checkpoint archive with a JSON manifest.
//!
//! The archive holds, per tensor: name, shape, dtype tag and a little-endian
//! `f32` payload. The manifest (`<archive>.json`) records the model and
//! attention configuration, the tensor table and a parameter digest.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::error::{invalid, Error, Result};
use crate::matcher::{Model, ModelConfig};
use crate::nn::ParamStore;
use crate::Tensor;

const MAGIC: &[u8; 8] = b"CASMTRA1";
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset of the payload inside the archive.
    pub offset: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointMeta {
    pub stage: Option<String>,
    pub steps: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub attention: AttentionConfig,
    pub meta: CheckpointMeta,
    pub digest: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn manifest_path(archive: &Path) -> PathBuf {
    let mut s = archive.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub struct Checkpoint {
    pub manifest: Manifest,
    pub store: ParamStore<f32>,
}

impl Checkpoint {
    /// Rebuilds the model described by the manifest with the stored values.
    pub fn build(&self) -> Result<(Model, ParamStore<f32>)> {
        self.build_with(&self.manifest.model, &self.manifest.attention)
    }

    /// Builds a possibly different model (e.g. with a ladder) and copies every
    /// stored tensor whose name and shape match. Stored tensors the new model
    /// lacks are an error.
    pub fn build_with(&self, model: &ModelConfig, attention: &AttentionConfig) -> Result<(Model, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let m = Model::new(&mut store, model, attention, self.manifest.meta.seed)?;
        let copied = store.load_matching(&self.store);
        if copied.len() != self.store.len() {
            let missing: Vec<&str> =
                self.store.iter().map(|(_, p)| p.name()).filter(|n| !copied.iter().any(|c| c == n)).take(5).collect();
            return Err(invalid!("checkpoint tensors do not fit the model, e.g. {missing:?}"));
        }
        Ok((m, store))
    }
}

pub fn save_checkpoint(
    path: &Path,
    model: &ModelConfig,
    attention: &AttentionConfig,
    store: &ParamStore<f32>,
    meta: CheckpointMeta,
) -> Result<Manifest> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    let mut offset = (MAGIC.len() + 4) as u64;
    let mut tensors = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        let v = p.value();
        let name = p.name().as_bytes();
        let mut head = Vec::new();
        head.extend((name.len() as u32).to_le_bytes());
        head.extend(name);
        head.extend((v.shape().len() as u32).to_le_bytes());
        for &d in v.shape() {
            head.extend((d as u64).to_le_bytes());
        }
        head.push(DTYPE_F32);
        head.extend(((v.len() * 4) as u64).to_le_bytes());
        w.write_all(&head)?;
        offset += head.len() as u64;
        for x in v.data() {
            w.write_all(&x.to_le_bytes())?;
        }
        tensors.push(TensorEntry { name: p.name().into(), shape: v.shape().to_vec(), dtype: "f32".into(), offset });
        offset += (v.len() * 4) as u64;
    }
    w.flush()?;
    let all: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let manifest = Manifest {
        format: "casmtr-checkpoint".into(),
        version: 1,
        model: model.clone(),
        attention: attention.clone(),
        meta,
        digest: store.digest(&all),
        tensors,
    };
    fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| invalid!("cannot read checkpoint manifest {}: {e}", mpath.display()))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Runtime(format!("checkpoint manifest {} is malformed: {e}", mpath.display())))?;
    if manifest.format != "casmtr-checkpoint" || manifest.version != 1 {
        return Err(invalid!("unsupported checkpoint format {} v{}", manifest.format, manifest.version));
    }
    let file = fs::File::open(path).map_err(|e| invalid!("cannot open checkpoint {}: {e}", path.display()))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(invalid!("{} is not a checkpoint archive", path.display()));
    }
    let n = read_u32(&mut r)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| invalid!("tensor name is not UTF-8"))?;
        let nd = read_u32(&mut r)? as usize;
        let shape = (0..nd).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let mut dt = [0u8; 1];
        r.read_exact(&mut dt)?;
        if dt[0] != DTYPE_F32 {
            return Err(invalid!("tensor {name} has unsupported dtype code {}", dt[0]));
        }
        let bytes = read_u64(&mut r)? as usize;
        if bytes != shape.iter().product::<usize>() * 4 {
            return Err(invalid!("tensor {name} payload does not match its shape"));
        }
        let mut buf = vec![0u8; bytes];
        r.read_exact(&mut buf)?;
        let data = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        store.add(name, Tensor::from_vec(&shape, data));
    }
    let all: Vec<_> = store.iter().map(|(id, _)| id).collect();
    if store.digest(&all) != manifest.digest {
        return Err(Error::Runtime(format!("checkpoint {} does not match its manifest digest", path.display())));
    }
    Ok(Checkpoint { manifest, store })
}
