//! Checkpoint archives: one little-endian f32 blob plus a JSON manifest.
//!
//! Values are stored as f32 regardless of the in-memory element type, and
//! entries are written in name order, so the same parameters always produce
//! byte-identical files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{ParamSet, Scalar, Tensor};

pub const DATA_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("archive io: {0}")]
    Io(#[from] std::io::Error),
    #[error("archive manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("archive corrupt: {0}")]
    Corrupt(String),
}

#[derive(Serialize, Deserialize)]
struct Record {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    records: Vec<Record>,
    total_len: usize,
}

pub fn save_param_archive<T: Scalar>(params: &ParamSet<T>, dir: &Path) -> Result<(), ArchiveError> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(params.len());
    let mut bytes = Vec::with_capacity(params.num_elements() * 4);
    let mut offset = 0usize;
    for (name, t) in params.iter() {
        let data = t.data();
        for v in data.iter() {
            bytes.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
        records.push(Record {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: data.len(),
        });
        offset += data.len();
    }
    fs::write(dir.join(DATA_FILE), &bytes)?;
    let manifest = Manifest { records, total_len: offset };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_param_archive<T: Scalar>(dir: &Path) -> Result<ParamSet<T>, ArchiveError> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let bytes = fs::read(dir.join(DATA_FILE))?;
    if bytes.len() != manifest.total_len * 4 {
        return Err(ArchiveError::Corrupt(format!(
            "data file holds {} bytes, manifest expects {}",
            bytes.len(),
            manifest.total_len * 4
        )));
    }
    let mut params = ParamSet::new();
    for rec in &manifest.records {
        let numel: usize = rec.shape.iter().product();
        if numel != rec.len {
            return Err(ArchiveError::Corrupt(format!(
                "{}: shape {:?} disagrees with length {}",
                rec.name, rec.shape, rec.len
            )));
        }
        if rec.offset + rec.len > manifest.total_len {
            return Err(ArchiveError::Corrupt(format!("{}: record overruns data file", rec.name)));
        }
        if params.contains(&rec.name) {
            return Err(ArchiveError::Corrupt(format!("duplicate record {}", rec.name)));
        }
        let mut data = Vec::with_capacity(rec.len);
        for i in 0..rec.len {
            let at = (rec.offset + i) * 4;
            let v = f32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]);
            if !v.is_finite() {
                return Err(ArchiveError::Corrupt(format!("{}: non-finite value", rec.name)));
            }
            data.push(T::from_f64(v as f64));
        }
        params.insert(
            &rec.name,
            Tensor::from_vec(rec.shape.clone(), data)
                .map_err(|e| ArchiveError::Corrupt(e.to_string()))?,
        );
    }
    Ok(params)
}

/// Content digest over names, shapes, and f32 values; identical archives
/// give identical digests regardless of where they live on disk.
pub fn params_checksum<T: Scalar>(params: &ParamSet<T>) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter() {
        h.update(name.as_bytes());
        h.update([0u8]);
        h.update((t.ndim() as u64).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data().iter() {
            h.update((v.to_f64() as f32).to_le_bytes());
        }
    }
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{:02x}", b));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.insert("b.w", Tensor::from_f64s(vec![2, 2], &[1.0, -2.0, 0.5, 4.0]).unwrap());
        p.insert("a.bias", Tensor::from_f64s(vec![3], &[0.1, 0.2, 0.3]).unwrap());
        p
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = sample();
        save_param_archive(&p, dir.path()).unwrap();
        let q: ParamSet<f32> = load_param_archive(dir.path()).unwrap();
        assert_eq!(q.len(), 2);
        for (name, t) in p.iter() {
            let u = q.get(name).unwrap();
            assert_eq!(u.shape(), t.shape());
            assert_eq!(u.to_vec(), t.to_vec());
            assert!(u.requires_grad());
        }
    }

    #[test]
    fn loads_into_f64_exactly() {
        let dir = tempfile::tempdir().unwrap();
        save_param_archive(&sample(), dir.path()).unwrap();
        let q: ParamSet<f64> = load_param_archive(dir.path()).unwrap();
        assert_eq!(q.get("a.bias").unwrap().data()[1], 0.2f32 as f64);
    }

    #[test]
    fn save_is_byte_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        save_param_archive(&sample(), d1.path()).unwrap();
        save_param_archive(&sample(), d2.path()).unwrap();
        for f in [DATA_FILE, MANIFEST_FILE] {
            assert_eq!(
                fs::read(d1.path().join(f)).unwrap(),
                fs::read(d2.path().join(f)).unwrap()
            );
        }
    }

    #[test]
    fn truncated_data_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_param_archive(&sample(), dir.path()).unwrap();
        let bin = dir.path().join(DATA_FILE);
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            load_param_archive::<f32>(dir.path()),
            Err(ArchiveError::Corrupt(_))
        ));
    }

    #[test]
    fn checksum_tracks_content_not_location() {
        let p = sample();
        let a = params_checksum(&p);
        assert_eq!(a.len(), 64);
        assert_eq!(a, params_checksum(&p.deep_clone()));
        p.get("b.w").unwrap().data_mut()[0] = 9.0;
        assert_ne!(a, params_checksum(&p));
    }

    #[test]
    fn checksum_distinguishes_names_and_shapes() {
        let mut p = ParamSet::<f32>::new();
        p.insert("w", Tensor::zeros(vec![2, 3]));
        let mut q = ParamSet::<f32>::new();
        q.insert("w", Tensor::zeros(vec![3, 2]));
        assert_ne!(params_checksum(&p), params_checksum(&q));
        let mut r = ParamSet::<f32>::new();
        r.insert("v", Tensor::zeros(vec![2, 3]));
        assert_ne!(params_checksum(&p), params_checksum(&r));
    }
}
