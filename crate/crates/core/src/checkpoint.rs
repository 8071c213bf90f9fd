//! Binary model and finetune-result files.
//!
//! All integers and reals are little-endian.
//!
//! Model file (`IACK`):
//! ```text
//! magic "IACK" | u16 version | 6 x u32 config | u32 tensor count
//! per tensor: u8 rank | rank x u32 dims | numel x f64
//! ```
//! Finetune file (`IACF`):
//! ```text
//! magic "IACF" | u16 version | [u8; 32] global model hash
//! f64 t | f64 sigma | f64 alpha | u32 transmitter tensor count | tensors
//! u64 update length | update values as f64
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{CodecModel, ModelConfig};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: [u8; 4] = *b"IACK";
pub const FINETUNE_MAGIC: [u8; 4] = *b"IACF";
pub const CHECKPOINT_VERSION: u16 = 1;

pub type ModelHash = [u8; 32];

pub fn hex(hash: &ModelHash) -> String {
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated(self.what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.push(t.shape().len() as u8);
    for d in t.shape() {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn get_tensor(r: &mut Reader) -> Result<Tensor> {
    let rank = r.u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let numel: usize = shape.iter().product();
    if numel > r.remaining() / 8 {
        return Err(Error::Truncated(r.what));
    }
    let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    Tensor::new(shape, data)
}

fn check_header(r: &mut Reader, magic: [u8; 4]) -> Result<()> {
    let m = r.array::<4>()?;
    if m != magic {
        return Err(Error::BadMagic(m));
    }
    let v = r.u16()?;
    if v != CHECKPOINT_VERSION {
        return Err(Error::Version(v));
    }
    Ok(())
}

pub fn model_to_bytes(model: &CodecModel) -> Vec<u8> {
    let c = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [c.image_channels, c.hidden, c.latent, c.hyper_hidden, c.hyper_latent, c.kernel] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        put_tensor(&mut out, p);
    }
    out
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<CodecModel> {
    let mut r = Reader::new(bytes, "model checkpoint");
    check_header(&mut r, MODEL_MAGIC)?;
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let config = ModelConfig {
        image_channels: dims[0],
        hidden: dims[1],
        latent: dims[2],
        hyper_hidden: dims[3],
        hyper_latent: dims[4],
        kernel: dims[5],
    };
    let count = r.u32()? as usize;
    let params = (0..count).map(|_| get_tensor(&mut r)).collect::<Result<Vec<_>>>()?;
    if r.remaining() != 0 {
        return Err(Error::Config("trailing bytes after model checkpoint".into()));
    }
    CodecModel::from_params(config, params)
}

/// SHA-256 of the serialized model; identifies the shared global model.
pub fn model_hash(model: &CodecModel) -> ModelHash {
    Sha256::digest(model_to_bytes(model)).into()
}

/// Transmitter parameters and quantized receiver update from a finetune run.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetunedModel {
    pub global_hash: ModelHash,
    pub step: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub transmitter: Vec<Tensor>,
    pub update: Vec<f64>,
}

impl FinetunedModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&FINETUNE_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.global_hash);
        for v in [self.step, self.sigma, self.alpha] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.transmitter.len() as u32).to_le_bytes());
        for t in &self.transmitter {
            put_tensor(&mut out, t);
        }
        out.extend_from_slice(&(self.update.len() as u64).to_le_bytes());
        for v in &self.update {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "finetune checkpoint");
        check_header(&mut r, FINETUNE_MAGIC)?;
        let global_hash = r.array::<32>()?;
        let step = r.f64()?;
        let sigma = r.f64()?;
        let alpha = r.f64()?;
        let count = r.u32()? as usize;
        let transmitter = (0..count).map(|_| get_tensor(&mut r)).collect::<Result<Vec<_>>>()?;
        let n = r.u64()? as usize;
        if n > r.remaining() / 8 {
            return Err(Error::Truncated("finetune checkpoint"));
        }
        let update = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            global_hash,
            step,
            sigma,
            alpha,
            transmitter,
            update,
        })
    }

    /// Finetuned model, after checking it belongs to `global`.
    pub fn apply(&self, global: &CodecModel) -> Result<CodecModel> {
        let actual = model_hash(global);
        if actual != self.global_hash {
            return Err(Error::ModelHash {
                expected: hex(&self.global_hash),
                actual: hex(&actual),
            });
        }
        global.with_transmitter(&self.transmitter)?.with_receiver_update(&self.update)
    }
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_model(path: &Path, model: &CodecModel) -> Result<()> {
    write_atomic(path, &model_to_bytes(model))
}

pub fn load_model(path: &Path) -> Result<CodecModel> {
    model_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_round_trip_is_bitwise() {
        let m = CodecModel::new(ModelConfig::tiny(), 4);
        let bytes = model_to_bytes(&m);
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(model_to_bytes(&back), bytes);
        assert_eq!(model_hash(&back), model_hash(&m));
    }

    #[test]
    fn hash_changes_with_any_parameter() {
        let m = CodecModel::new(ModelConfig::tiny(), 4);
        let mut upd = vec![0.0; m.receiver_parameter_count()];
        *upd.last_mut().unwrap() = 0.005;
        let m2 = m.with_receiver_update(&upd).unwrap();
        assert_ne!(model_hash(&m), model_hash(&m2));
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let m = CodecModel::new(ModelConfig::tiny(), 4);
        let mut bytes = model_to_bytes(&m);
        assert!(matches!(model_from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
        bytes[4] = 9;
        assert!(matches!(model_from_bytes(&bytes), Err(Error::Version(9))));
        bytes[0] = b'X';
        assert!(matches!(model_from_bytes(&bytes), Err(Error::BadMagic(_))));
    }

    #[test]
    fn finetune_file_round_trips_and_checks_hash() {
        let g = CodecModel::new(ModelConfig::tiny(), 4);
        let f = FinetunedModel {
            global_hash: model_hash(&g),
            step: 0.005,
            sigma: 0.05,
            alpha: 1000.0,
            transmitter: g.transmitter_params(),
            update: vec![0.005; g.receiver_parameter_count()],
        };
        let back = FinetunedModel::from_bytes(&f.to_bytes()).unwrap();
        assert_eq!(back, f);
        assert!(back.apply(&g).is_ok());
        let other = CodecModel::new(ModelConfig::tiny(), 5);
        assert!(matches!(back.apply(&other), Err(Error::ModelHash { .. })));
    }
}
