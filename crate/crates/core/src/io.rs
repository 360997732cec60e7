//! Binary artifact formats.
//!
//! All three formats are little-endian and end with a SHA-256 trailer over
//! the preceding bytes:
//!
//! ```text
//! dataset       "LCDS" u32 version, u64 N, u64 I, u64 K, u64 seed,
//!               u32 len + utf8 domain_id, N*I f64 samples, N u16 labels
//! perturbation  "LCPT" u32 version, u64 K, u64 I, f64 budget,
//!               u64 domain hash, K*I f64 rows
//! parameters    "LCPV" u32 version, u64 d, u64 model digest, d f64 values
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::{domain_hash, ClasswisePerturbation, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{hex_string, ModelSpec, ParamVector};

const VERSION: u32 = 1;
const TRAILER: usize = 32;

struct Writer(Vec<u8>);

impl Writer {
    fn new(magic: &[u8; 4]) -> Self {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(magic);
        w.u32(VERSION);
        w
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn finish(mut self) -> Vec<u8> {
        let sum = Sha256::digest(&self.0);
        self.0.extend_from_slice(&sum);
        self.0
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl<'a> Reader<'a> {
    fn open(bytes: &'a [u8], magic: &[u8; 4], kind: &'static str) -> Result<Self> {
        if bytes.len() < 8 + TRAILER {
            return Err(Error::CorruptFile(format!("{kind} file truncated ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != magic {
            return Err(Error::CorruptFile(format!("{kind} file has bad magic")));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - TRAILER);
        let sum = Sha256::digest(body);
        if sum.as_slice() != trailer {
            return Err(Error::HashMismatch {
                what: "file checksum",
                expected: hex_string(trailer),
                found: hex_string(&sum),
            });
        }
        let mut r = Reader { buf: body, pos: 4, kind };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CorruptFile(format!("{kind} file has unsupported version {version}")));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::CorruptFile(format!("{} file truncated at byte {}", self.kind, self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::CorruptFile(format!("{} size overflow", self.kind)))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::CorruptFile("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::CorruptFile(format!("{} file has trailing bytes", self.kind)));
        }
        Ok(())
    }
}

pub fn encode_dataset(data: &LabeledDataset) -> Vec<u8> {
    let mut w = Writer::new(b"LCDS");
    w.u64(data.len() as u64);
    w.u64(data.dim() as u64);
    w.u64(data.classes() as u64);
    w.u64(data.seed());
    w.u32(data.domain_id().len() as u32);
    w.0.extend_from_slice(data.domain_id().as_bytes());
    w.f64s(data.samples());
    for &y in data.labels() {
        w.0.extend_from_slice(&(y as u16).to_le_bytes());
    }
    w.finish()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<LabeledDataset> {
    let mut r = Reader::open(bytes, b"LCDS", "dataset")?;
    let n = r.usize()?;
    let dim = r.usize()?;
    let classes = r.usize()?;
    let seed = r.u64()?;
    let id_len = r.u32()? as usize;
    let domain = std::str::from_utf8(r.take(id_len)?)
        .map_err(|_| Error::CorruptFile("dataset domain id is not utf-8".into()))?
        .to_string();
    let samples = r.f64s(n.checked_mul(dim).ok_or_else(|| Error::CorruptFile("size overflow".into()))?)?;
    let labels = r
        .take(n * 2)?
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
        .collect();
    r.done()?;
    LabeledDataset::new(samples, labels, dim, classes, domain, seed)
        .map_err(|e| Error::CorruptFile(format!("dataset contents invalid: {e}")))
}

pub fn encode_perturbation(delta: &ClasswisePerturbation, domain_hash: u64) -> Vec<u8> {
    let mut w = Writer::new(b"LCPT");
    w.u64(delta.classes() as u64);
    w.u64(delta.dim() as u64);
    w.f64s(&[delta.budget()]);
    w.u64(domain_hash);
    w.f64s(delta.as_slice());
    w.finish()
}

/// Decodes a perturbation table and returns it with its recorded domain hash.
pub fn decode_perturbation(bytes: &[u8]) -> Result<(ClasswisePerturbation, u64)> {
    let mut r = Reader::open(bytes, b"LCPT", "perturbation")?;
    let classes = r.usize()?;
    let dim = r.usize()?;
    let budget = r.f64s(1)?[0];
    let domain = r.u64()?;
    let rows = r.f64s(classes.checked_mul(dim).ok_or_else(|| Error::CorruptFile("size overflow".into()))?)?;
    r.done()?;
    let delta = ClasswisePerturbation::new(rows, classes, dim, budget)
        .map_err(|e| Error::CorruptFile(format!("perturbation contents invalid: {e}")))?;
    Ok((delta, domain))
}

/// Decodes a perturbation and refuses it unless it was made for `data`'s
/// domain and shape.
pub fn decode_perturbation_for(bytes: &[u8], data: &LabeledDataset) -> Result<ClasswisePerturbation> {
    let (delta, recorded) = decode_perturbation(bytes)?;
    let expected = domain_hash(data.domain_id(), data.classes(), data.dim());
    if recorded != expected {
        return Err(Error::HashMismatch {
            what: "perturbation domain",
            expected: format!("{expected:016x}"),
            found: format!("{recorded:016x}"),
        });
    }
    Ok(delta)
}

pub fn encode_params(theta: &ParamVector, spec: &ModelSpec) -> Result<Vec<u8>> {
    crate::error::ensure_len("parameter vector", spec.param_count(), theta.len())?;
    let mut w = Writer::new(b"LCPV");
    w.u64(theta.len() as u64);
    w.u64(spec.digest());
    w.f64s(theta.as_slice());
    Ok(w.finish())
}

pub fn decode_params(bytes: &[u8], spec: &ModelSpec) -> Result<ParamVector> {
    let mut r = Reader::open(bytes, b"LCPV", "parameter")?;
    let d = r.usize()?;
    let digest = r.u64()?;
    if digest != spec.digest() {
        return Err(Error::HashMismatch {
            what: "model spec",
            expected: format!("{:016x}", spec.digest()),
            found: format!("{digest:016x}"),
        });
    }
    crate::error::ensure_len("parameter vector", spec.param_count(), d)?;
    let values = r.f64s(d)?;
    r.done()?;
    ParamVector::from_vec(values)
}

pub fn save_dataset(path: impl AsRef<Path>, data: &LabeledDataset) -> Result<()> {
    Ok(fs::write(path, encode_dataset(data))?)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    decode_dataset(&fs::read(path)?)
}

pub fn save_perturbation(path: impl AsRef<Path>, delta: &ClasswisePerturbation, data: &LabeledDataset) -> Result<()> {
    Ok(fs::write(path, encode_perturbation(delta, data.domain_hash()))?)
}

pub fn load_perturbation_for(path: impl AsRef<Path>, data: &LabeledDataset) -> Result<ClasswisePerturbation> {
    decode_perturbation_for(&fs::read(path)?, data)
}

pub fn save_params(path: impl AsRef<Path>, theta: &ParamVector, spec: &ModelSpec) -> Result<()> {
    Ok(fs::write(path, encode_params(theta, spec)?)?)
}

pub fn load_params(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<ParamVector> {
    decode_params(&fs::read(path)?, spec)
}

/// Hex SHA-256 of a byte string, used for manifest content hashes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex_string(&Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_blobs, BlobSpec};
    use crate::nn::{init_params, Activation};
    use proptest::prelude::*;

    fn blobs(seed: u64) -> LabeledDataset {
        make_blobs(&BlobSpec {
            classes: 3,
            dim: 5,
            train_per_class: 7,
            test_per_class: 2,
            spread: 0.1,
            center_spread: 0.3,
            seed,
        })
        .unwrap()
        .0
    }

    proptest! {
        #[test]
        fn dataset_roundtrip_is_bit_exact(seed in any::<u64>()) {
            let data = blobs(seed);
            let back = decode_dataset(&encode_dataset(&data)).unwrap();
            prop_assert_eq!(back.digest_hex(), data.digest_hex());
            prop_assert_eq!(back, data);
        }
    }

    #[test]
    fn params_roundtrip_and_spec_check() {
        let spec = ModelSpec::mlp(5, &[4], 3, Activation::Relu).unwrap();
        let theta = init_params(&spec, 1);
        let bytes = encode_params(&theta, &spec).unwrap();
        assert_eq!(decode_params(&bytes, &spec).unwrap(), theta);
        let other = ModelSpec::mlp(5, &[4], 3, Activation::Tanh).unwrap();
        assert!(matches!(decode_params(&bytes, &other), Err(Error::HashMismatch { .. })));
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let bytes = encode_dataset(&blobs(1));
        let cut = &bytes[..bytes.len() / 2];
        assert!(matches!(decode_dataset(cut), Err(Error::HashMismatch { .. }) | Err(Error::CorruptFile(_))));
        assert!(matches!(decode_dataset(&bytes[..10]), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let mut bytes = encode_dataset(&blobs(1));
        bytes[40] ^= 1;
        assert!(matches!(decode_dataset(&bytes), Err(Error::HashMismatch { .. })));
    }

    #[test]
    fn perturbation_refused_for_other_domain() {
        let a = blobs(1);
        let b = blobs(2);
        let delta = ClasswisePerturbation::new(vec![0.01; 15], 3, 5, 0.02).unwrap();
        let bytes = encode_perturbation(&delta, a.domain_hash());
        assert_eq!(decode_perturbation_for(&bytes, &a).unwrap(), delta);
        match decode_perturbation_for(&bytes, &b) {
            Err(Error::HashMismatch { what, .. }) => assert_eq!(what, "perturbation domain"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
