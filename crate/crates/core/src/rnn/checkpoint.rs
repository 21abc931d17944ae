//! Model file: `key: value` manifest lines ended by a blank line, then one
//! record per tensor (name length, name, rank, dims, f32 data, all
//! little-endian) and a CRC32 of everything before it.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::nn::{CellKind, ParamSet, Tensor};
use crate::rnn::{ModelManifest, RnnModel};

pub(crate) const MAGIC: &str = "idsplit-rnn";

fn manifest_text(m: &ModelManifest) -> String {
    let mut out = format!("{MAGIC}\n");
    let alphabet: String = m.alphabet.iter().collect();
    let _ = write!(
        out,
        "version: {}\ncell: {}\nlayers: {}\nhidden: {}\nseq_len: {}\nalphabet: {alphabet}\nthreshold: {}\n\n",
        m.version, m.cell, m.layers, m.hidden, m.seq_len, m.threshold
    );
    out
}

pub(crate) fn encode_parts(manifest: &ModelManifest, params: &ParamSet<f32>) -> Vec<u8> {
    let mut out = manifest_text(manifest).into_bytes();
    for (name, tensor) in params.names().iter().zip(params.tensors()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

impl RnnModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        encode_parts(&self.manifest, &self.params)
    }

    pub fn is_container(bytes: &[u8]) -> bool {
        bytes.starts_with(format!("{MAGIC}\n").as_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Format("model file too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let (manifest, mut rest) = parse_manifest(body)?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        while !rest.is_empty() {
            let len = take_u32(&mut rest)? as usize;
            let name = std::str::from_utf8(take(&mut rest, len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = take_u32(&mut rest)? as usize;
            let shape = (0..rank)
                .map(|_| take_u32(&mut rest).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let raw = take(&mut rest, count * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            names.push(name);
            tensors.push(Tensor::new(shape, data)?);
        }
        let params = ParamSet::from_parts(names, tensors)?;
        RnnModel::new(manifest, params)
    }
}

fn take<'a>(rest: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if rest.len() < n {
        return Err(Error::Format("truncated tensor record".into()));
    }
    let (head, tail) = rest.split_at(n);
    *rest = tail;
    Ok(head)
}

fn take_u32(rest: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(rest, 4)?.try_into().expect("4 bytes")))
}

fn parse_manifest(body: &[u8]) -> Result<(ModelManifest, &[u8])> {
    let end = body
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::Format("manifest is not terminated by a blank line".into()))?;
    let text = std::str::from_utf8(&body[..end]).map_err(|_| Error::Format("manifest is not UTF-8".into()))?;
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Format("not an rnn model file".into()));
    }
    let mut fields = std::collections::BTreeMap::new();
    for line in lines {
        let (key, value) = line
            .split_once(": ")
            .ok_or_else(|| Error::Format(format!("bad manifest line {line:?}")))?;
        fields.insert(key, value);
    }
    let get = |key: &str| {
        fields
            .get(key)
            .copied()
            .ok_or_else(|| Error::Format(format!("manifest lacks {key}")))
    };
    let number = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::Format(format!("manifest {key} is not a number")))
    };
    let version: u32 = get("version")?
        .parse()
        .map_err(|_| Error::Format("manifest version is not a number".into()))?;
    if version != super::MANIFEST_VERSION {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let manifest = ModelManifest {
        cell: get("cell")?.parse()?,
        layers: number("layers")?,
        hidden: number("hidden")?,
        seq_len: number("seq_len")?,
        alphabet: get("alphabet")?.chars().collect(),
        threshold: get("threshold")?
            .parse()
            .map_err(|_| Error::Format("manifest threshold is not a number".into()))?,
        version,
    };
    Ok((manifest, &body[end + 2..]))
}

pub fn save_model(model: &RnnModel, path: &Path) -> Result<()> {
    write_atomic(path, &model.to_bytes())
}

pub fn load_model(path: &Path) -> Result<RnnModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    RnnModel::from_bytes(&bytes)
}

/// Loads a model and insists on its cell type.
pub fn load_model_as(path: &Path, cell: CellKind) -> Result<RnnModel> {
    let model = load_model(path)?;
    if model.manifest.cell != cell {
        return Err(Error::Shape(format!(
            "expected a {cell} model, found {}",
            model.manifest.cell
        )));
    }
    Ok(model)
}
