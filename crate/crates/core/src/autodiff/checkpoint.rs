//! Binary checkpoints.
//!
//! `params.bin` is a sequence of records
//! `(u32 name_len, name bytes, u32 rows, u32 cols, rows*cols f64)`, all
//! little-endian. `optimizer.bin` starts with a u64 step counter followed by
//! the same records for the moments, named `m/<param>` and `v/<param>`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{AdamConfig, AdamState, ParamStore, Tensor};
use crate::error::{Error, Result};

fn write_record(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format { path: self.path.clone(), message: format!("truncated at byte {}", self.pos) });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn record(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|e| Error::Format { path: self.path.clone(), message: e.to_string() })?;
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let raw = self.take(rows * cols * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((name, Tensor::from_vec(rows, cols, data)?))
    }
}

pub fn encode_params(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, t) in params.iter() {
        write_record(&mut out, name, t);
    }
    out
}

pub fn decode_params(bytes: &[u8], path: &str) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0, path: path.to_string() };
    let mut store = ParamStore::new();
    while !r.done() {
        let (name, t) = r.record()?;
        store.insert(name, t)?;
    }
    Ok(store)
}

pub fn save_params(path: &Path, params: &ParamStore) -> Result<()> {
    fs::File::create(path)?.write_all(&encode_params(params))?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_params(&bytes, &path.display().to_string())
}

pub fn encode_optimizer(state: &AdamState, params: &ParamStore) -> Vec<u8> {
    let mut out = state.step.to_le_bytes().to_vec();
    for (i, name) in params.names().iter().enumerate() {
        write_record(&mut out, &format!("m/{name}"), &state.first[i]);
        write_record(&mut out, &format!("v/{name}"), &state.second[i]);
    }
    out
}

pub fn save_optimizer(path: &Path, state: &AdamState, params: &ParamStore) -> Result<()> {
    fs::File::create(path)?.write_all(&encode_optimizer(state, params))?;
    Ok(())
}

/// Reads moments back in the parameter order of `params`.
pub fn load_optimizer(path: &Path, config: AdamConfig, params: &ParamStore) -> Result<AdamState> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let p = path.display().to_string();
    let mut r = Reader { bytes: &bytes, pos: 0, path: p.clone() };
    let step = r.u64()?;
    let mut state = AdamState::new(config, params);
    state.step = step;
    while !r.done() {
        let (name, t) = r.record()?;
        let (kind, pname) = name
            .split_once('/')
            .ok_or_else(|| Error::Format { path: p.clone(), message: format!("bad moment name {name}") })?;
        let idx = params
            .position(pname)
            .ok_or_else(|| Error::Format { path: p.clone(), message: format!("unknown parameter {pname}") })?;
        match kind {
            "m" => state.first[idx] = t,
            "v" => state.second[idx] = t,
            _ => return Err(Error::Format { path: p.clone(), message: format!("bad moment kind {kind}") }),
        }
    }
    Ok(state)
}
