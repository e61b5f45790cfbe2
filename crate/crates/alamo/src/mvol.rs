//! `.mvol` volume file format.
//!
//! Layout: 8-byte magic `ALAMOVOL`, `u32` little-endian header length,
//! UTF-8 JSON header, then the raw voxel payload (little-endian, `x`
//! fastest-varying). Intensity volumes store `f32` voxels, label maps
//! store `u8`. No compression.
//!
//! Header JSON:
//! `{"dims":[z,y,x],"spacing_mm":[sz,sy,sx],"dtype":"f32"|"u8","kind":"intensity"|"label"}`

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelMap, Volume};

pub const MAGIC: &[u8; 8] = b"ALAMOVOL";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: String,
    kind: String,
}

fn encode(header: &Header, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header).map_err(|e| Error::format(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::format("bad magic: not an ALAMOVOL file"));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(Error::format("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| Error::format(format!("malformed header json: {e}")))?;
    Ok((header, &bytes[12 + header_len..]))
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    if v.dims.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!("refusing to save empty dims {:?}", v.dims)));
    }
    let header = Header {
        dims: v.dims,
        spacing_mm: v.spacing,
        dtype: "f32".into(),
        kind: "intensity".into(),
    };
    let mut payload = Vec::with_capacity(v.data.len() * 4);
    for &x in &v.data {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    write_atomic(path.as_ref(), &encode(&header, &payload)?)
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let bytes = fs::read(path.as_ref())?;
    let (header, payload) = decode(&bytes)?;
    if header.dtype != "f32" || header.kind != "intensity" {
        return Err(Error::format(format!(
            "expected intensity f32 volume, header says dtype={} kind={}",
            header.dtype, header.kind
        )));
    }
    let n = header.dims.iter().product::<usize>();
    if payload.len() != n * 4 {
        return Err(Error::format(format!(
            "payload length mismatch: header dims {:?} imply {} bytes, found {}",
            header.dims,
            n * 4,
            payload.len()
        )));
    }
    let mut data = Vec::with_capacity(n);
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Volume::new(header.dims, header.spacing_mm, data)
}

pub fn save_labels(l: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    if l.dims.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!("refusing to save empty dims {:?}", l.dims)));
    }
    // LabelMap construction already enforces the id range; re-check so a
    // mutated map cannot reach disk.
    if l.data.iter().any(|&v| v as usize >= crate::volume::CLASS_COUNT) {
        return Err(Error::invalid("class id out of range (must be 0..=10)"));
    }
    let header = Header {
        dims: l.dims,
        spacing_mm: l.spacing,
        dtype: "u8".into(),
        kind: "label".into(),
    };
    write_atomic(path.as_ref(), &encode(&header, &l.data)?)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let bytes = fs::read(path.as_ref())?;
    let (header, payload) = decode(&bytes)?;
    if header.dtype != "u8" || header.kind != "label" {
        return Err(Error::format(format!(
            "expected u8 label map, header says dtype={} kind={}",
            header.dtype, header.kind
        )));
    }
    let n = header.dims.iter().product::<usize>();
    if payload.len() != n {
        return Err(Error::format(format!(
            "payload length mismatch: header dims {:?} imply {} bytes, found {}",
            header.dims,
            n,
            payload.len()
        )));
    }
    LabelMap::new(header.dims, header.spacing_mm, payload.to_vec())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("mvol.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn tmpdir(name: &str) -> std::path::PathBuf {
        let d = std::env::temp_dir().join(format!("alamo_mvol_{name}_{}", std::process::id()));
        fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn zero_volume_round_trip() {
        let dir = tmpdir("zero");
        let v = Volume::filled([2, 2, 2], [1.0; 3], 0.0).unwrap();
        let path = dir.join("zero.mvol");
        save_volume(&v, &path).unwrap();
        let loaded = load_volume(&path).unwrap();
        assert_eq!(loaded, v);
        assert_eq!(loaded.data, vec![0.0; 8]);
    }

    #[test]
    fn random_volume_round_trip_is_bit_exact() {
        let dir = tmpdir("rt");
        let mut rng = Rng::seed_from_u64(11);
        let data: Vec<f32> = (0..5 * 6 * 7).map(|_| rng.range_f64(-1e3, 1e3) as f32).collect();
        let v = Volume::new([5, 6, 7], [1.1, 1.2, 1.3], data).unwrap();
        let path = dir.join("rand.mvol");
        save_volume(&v, &path).unwrap();
        let loaded = load_volume(&path).unwrap();
        assert_eq!(loaded.data, v.data);
        assert_eq!(loaded.spacing, v.spacing);
        // Save again: identical bytes on disk.
        let path2 = dir.join("rand2.mvol");
        save_volume(&loaded, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn payload_length_mismatch_is_reported() {
        let dir = tmpdir("short");
        let header = Header {
            dims: [3, 3, 3],
            spacing_mm: [1.0; 3],
            dtype: "f32".into(),
            kind: "intensity".into(),
        };
        // 26 voxels instead of 27.
        let payload = vec![0u8; 26 * 4];
        let bytes = encode(&header, &payload).unwrap();
        let path = dir.join("short.mvol");
        fs::write(&path, bytes).unwrap();
        let err = load_volume(&path).unwrap_err();
        assert!(err.to_string().contains("payload length mismatch"), "{err}");
    }

    #[test]
    fn non_finite_payload_is_rejected() {
        let dir = tmpdir("nan");
        let header = Header {
            dims: [1, 1, 1],
            spacing_mm: [1.0; 3],
            dtype: "f32".into(),
            kind: "intensity".into(),
        };
        let payload = f32::NAN.to_le_bytes().to_vec();
        fs::write(dir.join("nan.mvol"), encode(&header, &payload).unwrap()).unwrap();
        let err = load_volume(dir.join("nan.mvol")).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tmpdir("magic");
        fs::write(dir.join("bad.mvol"), b"NOTAVOL!blahblah").unwrap();
        let err = load_volume(dir.join("bad.mvol")).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn label_round_trip_with_all_ids() {
        let dir = tmpdir("lab");
        let data: Vec<u8> = (0..22).map(|i| (i % 11) as u8).collect();
        let l = LabelMap::new([1, 2, 11], [1.2; 3], data).unwrap();
        let path = dir.join("lab.mvol");
        save_labels(&l, &path).unwrap();
        assert_eq!(load_labels(&path).unwrap(), l);
    }

    #[test]
    fn label_save_refuses_out_of_range() {
        let dir = tmpdir("badlab");
        let mut l = LabelMap::zeros([1, 1, 2], [1.0; 3]).unwrap();
        l.data[1] = 11; // corrupt after construction
        let err = save_labels(&l, dir.join("bad.mvol")).unwrap_err();
        assert!(err.to_string().contains("class id out of range"), "{err}");
    }

    #[test]
    fn save_refuses_empty_dims() {
        let dir = tmpdir("empty");
        let v = Volume { dims: [0, 1, 1], spacing: [1.0; 3], data: vec![] };
        assert!(save_volume(&v, dir.join("e.mvol")).is_err());
        let l = LabelMap { dims: [1, 0, 1], spacing: [1.0; 3], data: vec![] };
        assert!(save_labels(&l, dir.join("el.mvol")).is_err());
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let dir = tmpdir("kind");
        let l = LabelMap::zeros([1, 1, 2], [1.0; 3]).unwrap();
        let path = dir.join("lab.mvol");
        save_labels(&l, &path).unwrap();
        assert!(load_volume(&path).is_err());
    }
}
