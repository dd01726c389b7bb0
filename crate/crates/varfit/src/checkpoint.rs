//! The `VARFIT01` checkpoint container.
//!
//! Layout: 8-byte magic, little-endian u32 version, length-prefixed UTF-8
//! JSON metadata (config, adapter spec, step, privacy state), then named
//! tensor payloads as little-endian IEEE-754 with shape headers, and a
//! trailing SHA-256 over everything before it. Lengths are validated on
//! read and the digest rejects any corrupted byte, so a load never returns
//! partial state. Adapter tensors are stored separately from base tensors
//! so a base checkpoint and an adapter-only checkpoint recombine exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{AdapterSpec, AdaptedModel};
use crate::dp::{PrivacyLedger, PrivacySpec};
use crate::error::{contract, Error, Result};
use crate::model::{VarConfig, VarModel};
use crate::tensor::{Dtype, Real, Tensor};
use crate::tokenizer::Codebook;

pub const MAGIC: &[u8; 8] = b"VARFIT01";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Base weights plus adapter state.
    Full,
    /// Base weights only.
    Base,
    /// Adapter state only; recombine with a base checkpoint.
    AdapterOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionTag {
    F32,
    F64,
}

impl PrecisionTag {
    pub fn of<T: Real>() -> Self {
        match T::DTYPE {
            Dtype::F32 => PrecisionTag::F32,
            Dtype::F64 => PrecisionTag::F64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodebookMeta {
    pub vocab: usize,
    pub dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub precision: PrecisionTag,
    pub config: VarConfig,
    pub adapter: Option<AdapterSpec>,
    pub adapter_seed: u64,
    pub step: u64,
    pub privacy: Option<PrivacySpec>,
    pub ledger: Option<PrivacyLedger>,
    pub codebook: Option<CodebookMeta>,
}

/// In-memory checkpoint contents.
pub struct Checkpoint<T: Real> {
    pub meta: CheckpointMeta,
    pub base: Option<VarModel<T>>,
    pub adapter: Option<BTreeMap<String, Tensor<T>>>,
    pub codebook: Option<Codebook>,
}

impl<T: Real> Checkpoint<T> {
    /// Reassembles the adapted model (base weights + adapter state).
    pub fn into_adapted(self) -> Result<AdaptedModel<T>> {
        let base = self
            .base
            .ok_or_else(|| contract("checkpoint holds no base weights"))?;
        let spec = self
            .meta
            .adapter
            .clone()
            .ok_or_else(|| contract("checkpoint holds no adapter spec"))?;
        let adapter = self.adapter.unwrap_or_default();
        AdaptedModel::from_parts(base, spec, adapter)
    }
}

fn write_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn write_tensor<T: Real>(buf: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    write_u64(buf, name.len() as u64);
    buf.extend_from_slice(name.as_bytes());
    buf.push(match T::DTYPE {
        Dtype::F32 => 1u8,
        Dtype::F64 => 2u8,
    });
    write_u64(buf, t.ndim() as u64);
    for &d in t.shape() {
        write_u64(buf, d as u64);
    }
    write_u64(buf, (t.len() * T::DTYPE.byte_width()) as u64);
    match T::DTYPE {
        Dtype::F32 => {
            for v in t.data() {
                buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for v in t.data() {
                buf.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    }
}

/// Serializes and writes a checkpoint. Tensor names: `model/<param>`,
/// adapter parameters under their own `adapter.` names, and
/// `codebook/entries`.
pub fn save_checkpoint<T: Real>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let meta_json = serde_json::to_vec(&ckpt.meta).expect("meta serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    write_u64(&mut buf, meta_json.len() as u64);
    buf.extend_from_slice(&meta_json);

    let mut tensors: Vec<(String, &Tensor<T>)> = Vec::new();
    if let Some(base) = &ckpt.base {
        for (name, t) in base.params() {
            tensors.push((format!("model/{name}"), t));
        }
    }
    if let Some(adapter) = &ckpt.adapter {
        for (name, t) in adapter {
            tensors.push((name.clone(), t));
        }
    }
    // codebooks are stored in f64 regardless of the model precision
    let codebook_f64 = ckpt.codebook.as_ref().map(|cb| {
        Tensor::<f64>::from_raw(vec![cb.num_entries(), cb.dim()], cb.entries().to_vec())
    });

    write_u64(
        &mut buf,
        (tensors.len() + usize::from(codebook_f64.is_some())) as u64,
    );
    for (name, t) in &tensors {
        write_tensor(&mut buf, name, t);
    }
    if let Some(cb) = &codebook_f64 {
        write_tensor(&mut buf, "codebook/entries", cb);
    }

    let digest = Sha256::digest(&buf);
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    file.write_all(&digest)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Raw tensor payload, precision-tagged.
enum RawTensor {
    F32(Vec<usize>, Vec<f32>),
    F64(Vec<usize>, Vec<f64>),
}

fn read_tensor(r: &mut Reader) -> Result<(String, RawTensor)> {
    let name_len = r.u64()? as usize;
    let name = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
    let dtype = r.u8()?;
    let ndim = r.u64()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u64()? as usize);
    }
    let count: usize = shape.iter().product();
    let byte_len = r.u64()? as usize;
    let expected = count
        * match dtype {
            1 => 4,
            2 => 8,
            other => return Err(Error::Format(format!("unknown dtype tag {other}"))),
        };
    if byte_len != expected {
        return Err(Error::Format(format!(
            "tensor '{name}': payload length {byte_len} does not match shape {shape:?}"
        )));
    }
    let bytes = r.take(byte_len)?;
    let raw = match dtype {
        1 => RawTensor::F32(
            shape,
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        _ => RawTensor::F64(
            shape,
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok((name, raw))
}

fn raw_to_tensor<T: Real>(name: &str, raw: RawTensor) -> Result<Tensor<T>> {
    match (raw, T::DTYPE) {
        (RawTensor::F32(shape, data), Dtype::F32) => Ok(Tensor::from_raw(
            shape,
            data.into_iter().map(|v| T::from_f64(v as f64)).collect(),
        )),
        (RawTensor::F64(shape, data), Dtype::F64) => Ok(Tensor::from_raw(
            shape,
            data.into_iter().map(T::from_f64).collect(),
        )),
        _ => Err(Error::Format(format!(
            "tensor '{name}' precision does not match the requested load precision"
        ))),
    }
}

/// Loads and fully validates a checkpoint: magic, version, lengths and the
/// trailing digest; any mismatch returns an error with no partial state.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(Error::Format("file too short for a checkpoint".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let computed = Sha256::digest(body);
    if computed.as_slice() != digest {
        return Err(Error::Format(
            "integrity check failed: checkpoint bytes do not match their digest".into(),
        ));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("bad magic: not a VARFIT01 checkpoint".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let meta_len = r.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::Format(format!("metadata: {e}")))?;
    if meta.precision != PrecisionTag::of::<T>() {
        return Err(Error::Format(format!(
            "checkpoint precision {:?} does not match the requested precision",
            meta.precision
        )));
    }

    let count = r.u64()? as usize;
    let mut model_params = BTreeMap::new();
    let mut adapter = BTreeMap::new();
    let mut codebook_entries: Option<Tensor<f64>> = None;
    for _ in 0..count {
        let (name, raw) = read_tensor(&mut r)?;
        if let Some(param) = name.strip_prefix("model/") {
            model_params.insert(param.to_string(), raw_to_tensor::<T>(&name, raw)?.with_grad());
        } else if name == "codebook/entries" {
            match raw {
                RawTensor::F64(shape, data) => {
                    codebook_entries = Some(Tensor::from_raw(shape, data));
                }
                RawTensor::F32(..) => {
                    return Err(Error::Format("codebook must be stored in f64".into()))
                }
            }
        } else if name.starts_with("adapter.") {
            adapter.insert(name.clone(), raw_to_tensor::<T>(&name, raw)?.with_grad());
        } else {
            return Err(Error::Format(format!("unexpected tensor '{name}'")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last tensor",
            body.len() - r.pos
        )));
    }

    let base = if model_params.is_empty() {
        None
    } else {
        Some(VarModel::from_params(meta.config.clone(), model_params)?)
    };
    let codebook = match (&meta.codebook, codebook_entries) {
        (Some(cm), Some(entries)) => Some(Codebook::from_entries(
            cm.vocab,
            cm.dim,
            cm.seed,
            entries.data().to_vec(),
        )?),
        (None, None) => None,
        _ => {
            return Err(Error::Format(
                "codebook metadata and entries must appear together".into(),
            ))
        }
    };
    Ok(Checkpoint {
        meta,
        base,
        adapter: if adapter.is_empty() { None } else { Some(adapter) },
        codebook,
    })
}

/// Convenience: writes a full checkpoint for an adapted model.
#[allow(clippy::too_many_arguments)]
pub fn save_full<T: Real>(
    path: &Path,
    model: &AdaptedModel<T>,
    adapter_seed: u64,
    codebook: Option<&Codebook>,
    step: u64,
    privacy: Option<&PrivacySpec>,
    ledger: Option<&PrivacyLedger>,
) -> Result<()> {
    let meta = CheckpointMeta {
        kind: CheckpointKind::Full,
        precision: PrecisionTag::of::<T>(),
        config: model.config().clone(),
        adapter: Some(model.spec().clone()),
        adapter_seed,
        step,
        privacy: privacy.cloned(),
        ledger: ledger.cloned(),
        codebook: codebook.map(|cb| CodebookMeta {
            vocab: cb.num_entries(),
            dim: cb.dim(),
            seed: cb.seed(),
        }),
    };
    save_checkpoint(
        path,
        &Checkpoint {
            meta,
            base: Some(model.base().clone()),
            adapter: Some(model.adapter_params().clone()),
            codebook: codebook.cloned(),
        },
    )
}

/// Writes only the adapter state (plus spec) for later recombination.
pub fn save_adapter_only<T: Real>(
    path: &Path,
    model: &AdaptedModel<T>,
    adapter_seed: u64,
    step: u64,
) -> Result<()> {
    let meta = CheckpointMeta {
        kind: CheckpointKind::AdapterOnly,
        precision: PrecisionTag::of::<T>(),
        config: model.config().clone(),
        adapter: Some(model.spec().clone()),
        adapter_seed,
        step,
        privacy: None,
        ledger: None,
        codebook: None,
    };
    save_checkpoint(
        path,
        &Checkpoint {
            meta,
            base: None,
            adapter: Some(model.adapter_params().clone()),
            codebook: None,
        },
    )
}

/// Writes only the base weights.
pub fn save_base<T: Real>(path: &Path, model: &VarModel<T>, codebook: Option<&Codebook>) -> Result<()> {
    let meta = CheckpointMeta {
        kind: CheckpointKind::Base,
        precision: PrecisionTag::of::<T>(),
        config: model.config().clone(),
        adapter: None,
        adapter_seed: 0,
        step: 0,
        privacy: None,
        ledger: None,
        codebook: codebook.map(|cb| CodebookMeta {
            vocab: cb.num_entries(),
            dim: cb.dim(),
            seed: cb.seed(),
        }),
    };
    save_checkpoint(
        path,
        &Checkpoint {
            meta,
            base: Some(model.clone()),
            adapter: None,
            codebook: codebook.cloned(),
        },
    )
}

/// Recombines a base checkpoint with an adapter-only checkpoint.
pub fn recombine<T: Real>(
    base: Checkpoint<T>,
    adapter: Checkpoint<T>,
) -> Result<AdaptedModel<T>> {
    let base_model = base
        .base
        .ok_or_else(|| contract("base checkpoint holds no base weights"))?;
    let spec = adapter
        .meta
        .adapter
        .clone()
        .ok_or_else(|| contract("adapter checkpoint holds no adapter spec"))?;
    let params = adapter
        .adapter
        .ok_or_else(|| contract("adapter checkpoint holds no adapter tensors"))?;
    AdaptedModel::from_parts(base_model, spec, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{apply_adapter, content_hash};
    use crate::model::ForwardMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn setup() -> (AdaptedModel<f64>, Codebook) {
        let model = VarModel::<f64>::random_init(VarConfig::toy(), 5, 0.1).unwrap();
        let adapted = apply_adapter(model, AdapterSpec::lora_default(), 3).unwrap();
        let cb = Codebook::seeded(64, 3, 9).unwrap();
        (adapted, cb)
    }

    #[test]
    fn save_load_round_trip_is_bit_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("ckpt.varfit");
        let (adapted, cb) = setup();
        let ledger = PrivacyLedger::restore(1.3, 0.1, 1e-3, 17).unwrap();
        let privacy = PrivacySpec::with_sigma(1.3, 0.5, 0.1, 4);
        save_full(&path, &adapted, 3, Some(&cb), 42, Some(&privacy), Some(&ledger)).unwrap();

        let loaded = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(loaded.meta.step, 42);
        assert_eq!(loaded.meta.ledger.as_ref().unwrap(), &ledger);
        assert_eq!(loaded.meta.privacy.as_ref().unwrap(), &privacy);
        assert_eq!(loaded.codebook.as_ref().unwrap(), &cb);
        let restored = loaded.into_adapted().unwrap();
        for (name, t) in adapted.base().params() {
            assert_eq!(
                content_hash(t),
                content_hash(restored.base().param(name).unwrap()),
                "{name}"
            );
        }
        for (name, t) in adapted.adapter_params() {
            assert_eq!(
                content_hash(t),
                content_hash(&restored.param(name).unwrap().clone()),
                "{name}"
            );
        }
    }

    #[test]
    fn f32_round_trip_preserves_bits() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("ckpt32.varfit");
        let model = VarModel::<f32>::init(VarConfig::toy(), 1).unwrap();
        let adapted = apply_adapter(model, AdapterSpec::fft(), 0).unwrap();
        save_full(&path, &adapted, 0, None, 7, None, None).unwrap();
        let loaded = load_checkpoint::<f32>(&path).unwrap();
        let restored = loaded.into_adapted().unwrap();
        for (name, t) in adapted.base().params() {
            assert_eq!(t, restored.base().param(name).unwrap(), "{name}");
        }
        // wrong-precision load is refused
        assert!(load_checkpoint::<f64>(&path).is_err());
    }

    #[test]
    fn corrupting_one_byte_is_an_integrity_error() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("ckpt.varfit");
        let (adapted, cb) = setup();
        save_full(&path, &adapted, 3, Some(&cb), 1, None, None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint::<f64>(&path).err().expect("must fail");
        assert!(err.to_string().contains("integrity"), "{err}");
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("ckpt.varfit");
        let (adapted, _) = setup();
        save_full(&path, &adapted, 3, None, 1, None, None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint::<f64>(&path).is_err());
    }

    #[test]
    fn bad_magic_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("bogus.varfit");
        let mut body = b"NOTMAGIC".to_vec();
        body.extend_from_slice(&1u32.to_le_bytes());
        let digest = Sha256::digest(&body);
        let mut all = body;
        all.extend_from_slice(&digest);
        std::fs::write(&path, &all).unwrap();
        let err = load_checkpoint::<f64>(&path).err().expect("must fail");
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn adapter_plus_base_recombine_to_exact_forward() {
        let tmp = tempfile::tempdir().unwrap();
        let (mut adapted, cb) = setup();
        // make the adapter non-trivial
        let name = "adapter.blocks.0.qkv_w.lora_b";
        let shape = adapted.param(name).unwrap().shape().to_vec();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        adapted
            .set_param(name, Tensor::randn(&shape, 0.2, &mut rng))
            .unwrap();

        let base_path = tmp.path().join("base.varfit");
        let adapter_path = tmp.path().join("adapter.varfit");
        save_base(&base_path, adapted.base(), Some(&cb)).unwrap();
        save_adapter_only(&adapter_path, &adapted, 3, 9).unwrap();

        let recombined = recombine(
            load_checkpoint::<f64>(&base_path).unwrap(),
            load_checkpoint::<f64>(&adapter_path).unwrap(),
        )
        .unwrap();

        let teacher = Tensor::<f64>::randn(&[1, 20, 32], 0.3, &mut rng);
        let a = adapted
            .forward(&[1], &teacher, ForwardMode::Eval, &mut rng)
            .unwrap();
        let b = recombined
            .forward(&[1], &teacher, ForwardMode::Eval, &mut rng)
            .unwrap();
        assert_eq!(a, b);
    }
}
