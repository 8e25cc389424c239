// SPDX-License-Identifier: MIT OR Apache-2.0

//! `TBLS` container: magic, `u32` version, a length-prefixed JSON header,
//! then `(name, dtype, shape, payload)` records, all little-endian. The only
//! dtype is `f32` (code 0).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Model, ModelConfig, Param, Scalar};
use crate::error::{LabError, Result};

const MAGIC: &[u8; 4] = b"TBLS";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_container(path: &Path, header: &serde_json::Value, records: &[Record]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(header)?;
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        if r.shape.iter().product::<usize>() != r.data.len() {
            return Err(LabError::Shape(format!("record {} has {} values for shape {:?}", r.name, r.data.len(), r.shape)));
        }
        buf.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(r.name.as_bytes());
        buf.push(DTYPE_F32);
        buf.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for &s in &r.shape {
            buf.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for x in &r.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)?.write_all(&buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| LabError::Format("truncated TBLS file".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_container(path: &Path) -> Result<(serde_json::Value, Vec<Record>)> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(LabError::Format(format!("{} is not a TBLS file", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(LabError::Format(format!("unsupported TBLS version {version}")));
    }
    let json_len = r.u64()? as usize;
    let header = serde_json::from_slice(r.take(json_len)?)?;
    let n = r.u32()? as usize;
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| LabError::Format("record name is not UTF-8".into()))?;
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(LabError::Format(format!("record {name}: unknown dtype {dtype}")));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|s| s as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let data = r
            .take(count * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(Record { name, shape, data });
    }
    Ok((header, records))
}

/// Writes the model weights (as `f32`) with its config in the header.
pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let header = serde_json::json!({ "kind": "model", "config": model.config });
    let records: Vec<Record> = model
        .params
        .iter()
        .map(|p| Record {
            name: p.name.clone(),
            shape: p.shape.clone(),
            data: p.data.iter().map(|x| x.to_f64() as f32).collect(),
        })
        .collect();
    write_container(path, &header, &records)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let (header, records) = read_container(path)?;
    let config: ModelConfig = serde_json::from_value(header["config"].clone())?;
    let params = records
        .into_iter()
        .map(|r| Param {
            name: r.name,
            shape: r.shape,
            data: r.data.into_iter().map(|x| T::from_f64(x as f64)).collect(),
        })
        .collect();
    Model::from_params(config, params)
}
