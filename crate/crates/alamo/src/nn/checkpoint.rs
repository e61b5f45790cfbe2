//! Checkpoint file format.
//!
//! Layout: 8-byte magic `ALAMOCKP`, `u32` LE format version, `u32` LE
//! config length, the model config as UTF-8 JSON, then named records
//! until end of file. Each record is: `u32` name length, UTF-8 name,
//! `u8` dtype tag (0 = f32, 1 = f64, 2 = u64, 3 = u8), `u32` rank,
//! rank extents as `u64`, then the raw little-endian payload.
//!
//! Record naming: bare names are model parameters; `bn/<slot>/...`
//! carries running normalization statistics; everything under `opt/`
//! is optimizer state (Adam moments, step counter, RNG state).

use std::fs;
use std::io::Write;
use std::path::Path;

use super::net::{ModelConfig, Network, NormStates};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ALAMOCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum RecData {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    F64 { shape: Vec<usize>, data: Vec<f64> },
    U64(Vec<u64>),
    U8(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub data: RecData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig) -> Self {
        Checkpoint { config, records: Vec::new() }
    }

    pub fn push_f32(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) {
        self.records.push(Record {
            name: name.into(),
            data: RecData::F32 { shape: shape.to_vec(), data },
        });
    }

    pub fn push_u64(&mut self, name: impl Into<String>, data: Vec<u64>) {
        self.records.push(Record { name: name.into(), data: RecData::U64(data) });
    }

    pub fn push_u8(&mut self, name: impl Into<String>, data: Vec<u8>) {
        self.records.push(Record { name: name.into(), data: RecData::U8(data) });
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn f32_tensor(&self, name: &str) -> Result<Tensor<f32>> {
        match self.get(name) {
            Some(Record { data: RecData::F32 { shape, data }, .. }) => {
                Tensor::from_vec(shape, data.clone())
            }
            Some(_) => Err(Error::format(format!("record '{name}' has unexpected dtype"))),
            None => Err(Error::format(format!("missing record '{name}'"))),
        }
    }

    pub fn u64_values(&self, name: &str) -> Result<Vec<u64>> {
        match self.get(name) {
            Some(Record { data: RecData::U64(v), .. }) => Ok(v.clone()),
            Some(_) => Err(Error::format(format!("record '{name}' has unexpected dtype"))),
            None => Err(Error::format(format!("missing record '{name}'"))),
        }
    }

    /// Capture a network's parameters plus running norm statistics.
    pub fn pack_network(net: &Network<f32>, norm: &NormStates<f32>) -> Checkpoint {
        let mut ckpt = Checkpoint::new(net.cfg.clone());
        for (name, p) in net.names.iter().zip(&net.params) {
            ckpt.push_f32(name.clone(), p.shape(), p.data().to_vec());
        }
        for (i, r) in norm.stats.iter().enumerate() {
            ckpt.push_f32(format!("bn/{i}/mean"), &[r.mean.len()], r.mean.clone());
            ckpt.push_f32(format!("bn/{i}/var"), &[r.var.len()], r.var.clone());
            ckpt.push_u64(format!("bn/{i}/count"), vec![r.count]);
        }
        ckpt
    }

    /// Rebuild the network and norm state. Every architecture parameter
    /// must be present with exactly the config-derived shape.
    pub fn unpack_network(&self) -> Result<(Network<f32>, NormStates<f32>)> {
        let mut net = Network::<f32>::init(&self.config, 0)?;
        for (id, name) in net.names.clone().iter().enumerate() {
            let t = self.f32_tensor(name)?;
            if t.shape() != net.params[id].shape() {
                return Err(Error::format(format!(
                    "parameter '{name}' has shape {:?}, architecture expects {:?}",
                    t.shape(),
                    net.params[id].shape()
                )));
            }
            net.params[id] = t;
        }
        let mut norm = NormStates::<f32>::new(&net);
        for (i, r) in norm.stats.iter_mut().enumerate() {
            let mean = self.f32_tensor(&format!("bn/{i}/mean"))?;
            let var = self.f32_tensor(&format!("bn/{i}/var"))?;
            if mean.len() != r.mean.len() || var.len() != r.var.len() {
                return Err(Error::format(format!("norm state {i} has wrong channel count")));
            }
            r.mean = mean.into_data();
            r.var = var.into_data();
            r.count = self.u64_values(&format!("bn/{i}/count"))?[0];
        }
        Ok((net, norm))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut duplicate_check = std::collections::HashSet::new();
        for r in &self.records {
            if !duplicate_check.insert(r.name.as_str()) {
                return Err(Error::invalid(format!("duplicate record name '{}'", r.name)));
            }
        }
        let json = serde_json::to_vec(&self.config).map_err(|e| Error::format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            match &r.data {
                RecData::F32 { shape, data } => {
                    out.push(0u8);
                    write_extents(&mut out, shape);
                    for v in data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                RecData::F64 { shape, data } => {
                    out.push(1u8);
                    write_extents(&mut out, shape);
                    for v in data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                RecData::U64(data) => {
                    out.push(2u8);
                    write_extents(&mut out, &[data.len()]);
                    for v in data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                RecData::U8(data) => {
                    out.push(3u8);
                    write_extents(&mut out, &[data.len()]);
                    out.extend_from_slice(data);
                }
            }
        }
        let tmp = path.as_ref().with_extension("ckpt.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&out)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path.as_ref())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path.as_ref())?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format("bad magic: not an ALAMOCKP file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let json_len = r.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(json_len)?)
            .map_err(|e| Error::format(format!("malformed config json: {e}")))?;
        let mut records = Vec::new();
        while !r.at_end() {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::format("record name is not UTF-8"))?;
            let dtype = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let data = match dtype {
                0 => {
                    let raw = r.take(n * 4)?;
                    RecData::F32 {
                        shape,
                        data: raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                    }
                }
                1 => {
                    let raw = r.take(n * 8)?;
                    RecData::F64 {
                        shape,
                        data: raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                    }
                }
                2 => {
                    let raw = r.take(n * 8)?;
                    RecData::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
                }
                3 => RecData::U8(r.take(n)?.to_vec()),
                other => return Err(Error::format(format!("unknown dtype tag {other} in record '{name}'"))),
            };
            records.push(Record { name, data });
        }
        Ok(Checkpoint { config, records })
    }
}

fn write_extents(out: &mut Vec<u8>, shape: &[usize]) {
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &e in shape {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("truncated checkpoint file"));
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

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::net::{Arch, ModelConfig};

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let d = std::env::temp_dir().join(format!("alamo_ckpt_{}", std::process::id()));
        fs::create_dir_all(&d).unwrap();
        d.join(name)
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            arch: Arch::Dense,
            k: 2,
            depth: 1,
            layers_per_block: 1,
            slab: 2,
            norm: crate::nn::NormMode::Bn,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn network_round_trip_is_bit_exact() {
        let cfg = tiny_cfg();
        let net = Network::<f32>::init(&cfg, 9).unwrap();
        let mut norm = NormStates::<f32>::new(&net);
        norm.stats[0].mean[0] = 0.25;
        norm.stats[0].count = 3;
        let ckpt = Checkpoint::pack_network(&net, &norm);
        let path = tmpfile("net.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);
        let (net2, norm2) = loaded.unpack_network().unwrap();
        assert_eq!(net2.params, net.params);
        assert_eq!(norm2, norm);
        // Bytes on disk are stable across re-saves.
        let path2 = tmpfile("net2.ckpt");
        Checkpoint::pack_network(&net2, &norm2).save(&path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let cfg = tiny_cfg();
        let net = Network::<f32>::init(&cfg, 9).unwrap();
        let norm = NormStates::<f32>::new(&net);
        let mut ckpt = Checkpoint::pack_network(&net, &norm);
        // Replace the stem weight record with a consistently-framed but
        // wrongly-shaped tensor.
        for r in &mut ckpt.records {
            if r.name == "stem/w" {
                if let RecData::F32 { shape, data } = &mut r.data {
                    shape[0] += 1;
                    *data = vec![0.0; shape.iter().product()];
                }
            }
        }
        let path = tmpfile("bad.ckpt");
        ckpt.save(&path).unwrap();
        let err = Checkpoint::load(&path).unwrap().unpack_network().unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }

    #[test]
    fn missing_parameter_is_rejected() {
        let cfg = tiny_cfg();
        let net = Network::<f32>::init(&cfg, 9).unwrap();
        let norm = NormStates::<f32>::new(&net);
        let mut ckpt = Checkpoint::pack_network(&net, &norm);
        ckpt.records.retain(|r| r.name != "head/b");
        let path = tmpfile("missing.ckpt");
        ckpt.save(&path).unwrap();
        let err = Checkpoint::load(&path).unwrap().unpack_network().unwrap_err();
        assert!(err.to_string().contains("missing record 'head/b'"), "{err}");
    }

    #[test]
    fn duplicate_names_refused_at_save() {
        let cfg = tiny_cfg();
        let mut ckpt = Checkpoint::new(cfg);
        ckpt.push_u64("opt/step", vec![1]);
        ckpt.push_u64("opt/step", vec![2]);
        assert!(ckpt.save(tmpfile("dup.ckpt")).is_err());
    }

    #[test]
    fn extra_optimizer_records_round_trip() {
        let cfg = tiny_cfg();
        let net = Network::<f32>::init(&cfg, 0).unwrap();
        let norm = NormStates::<f32>::new(&net);
        let mut ckpt = Checkpoint::pack_network(&net, &norm);
        ckpt.push_u64("opt/step", vec![123]);
        ckpt.push_u8("opt/rng_seed", vec![7; 32]);
        let path = tmpfile("opt.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.u64_values("opt/step").unwrap(), vec![123]);
        assert_eq!(loaded, ckpt);
    }
}
