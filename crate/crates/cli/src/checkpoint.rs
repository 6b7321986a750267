//! Versioned binary checkpoint container.
//!
//! Layout: magic `CMAP`, format version (u32 LE), tensor count (u64 LE), then
//! one manifest record per tensor — name length (u64 LE) + UTF-8 name, dtype
//! code (u8), rank (u64 LE), dims (u64 LE each), payload byte offset (u64 LE,
//! strictly increasing) — followed by the raw little-endian payload and a
//! trailing CRC32 of all preceding bytes. Loading re-checks every structural
//! invariant and the checksum; round-trips are bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use clipmap_core::compress::{ClipMaps, CompressionSpec, MapInit};
use clipmap_core::model::{ClipModel, EncoderConfig, InputSpec};
use clipmap_core::{Scalar, Tensor};

use crate::{CliError, CliResult};

pub const MAGIC: [u8; 4] = *b"CMAP";
pub const VERSION: u32 = 1;

const F64_CODE: u8 = <f64 as Scalar>::DTYPE_CODE as u8;

/// Serialize named tensors into the container byte layout.
pub fn encode(tensors: &[(String, &Tensor<f64>)]) -> Vec<u8> {
    let mut manifest = Vec::new();
    let mut payload = Vec::new();
    for (name, t) in tensors {
        let offset = payload.len() as u64;
        manifest.extend_from_slice(&(name.len() as u64).to_le_bytes());
        manifest.extend_from_slice(name.as_bytes());
        manifest.push(F64_CODE);
        manifest.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            manifest.extend_from_slice(&(d as u64).to_le_bytes());
        }
        manifest.extend_from_slice(&offset.to_le_bytes());
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(4 + 4 + 8 + manifest.len() + payload.len() + 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> CliResult<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CliError::Io("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> CliResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> CliResult<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Parse container bytes back into named tensors, validating magic, version,
/// manifest invariants, and the trailing CRC.
pub fn decode(bytes: &[u8]) -> CliResult<Vec<(String, Tensor<f64>)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CliError::Io("bad magic: not a checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CliError::Io(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u64()? as usize;
    // a manifest entry is at least 25 bytes; bound allocations by the buffer
    // so a corrupted count fails cleanly instead of exhausting memory
    if count > bytes.len() / 25 {
        return Err(CliError::Io(format!("implausible tensor count {count}")));
    }
    let mut entries = Vec::with_capacity(count);
    let mut prev_offset: Option<u64> = None;
    let mut expected_offset = 0u64;
    for _ in 0..count {
        let name_len = r.u64()? as usize;
        if name_len > bytes.len() - r.pos {
            return Err(CliError::Io(format!("implausible name length {name_len}")));
        }
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CliError::Io("non-UTF-8 tensor name".into()))?;
        let dtype = r.u8()?;
        if dtype != F64_CODE {
            return Err(CliError::Io(format!("unsupported dtype code {dtype}")));
        }
        let rank = r.u64()? as usize;
        if rank > (bytes.len() - r.pos) / 8 {
            return Err(CliError::Io(format!("implausible tensor rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        let offset = r.u64()?;
        if let Some(p) = prev_offset {
            if offset <= p {
                return Err(CliError::Io("manifest offsets not strictly increasing".into()));
            }
        }
        if offset != expected_offset {
            return Err(CliError::Io("manifest offsets overlap or leave gaps".into()));
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= bytes.len() / 8)
            .ok_or_else(|| CliError::Io(format!("implausible tensor shape {dims:?}")))?;
        expected_offset += (numel * 8) as u64;
        prev_offset = Some(offset);
        entries.push((name, dims, offset, numel));
    }
    let payload = r.take(expected_offset as usize)?;
    let stored_crc = r.u32()?;
    if r.pos != bytes.len() {
        return Err(CliError::Io("trailing bytes after checksum".into()));
    }
    if crc32fast::hash(&bytes[..bytes.len() - 4]) != stored_crc {
        return Err(CliError::Io("CRC mismatch: checkpoint corrupt".into()));
    }
    let mut out = Vec::with_capacity(count);
    for (name, dims, offset, numel) in entries {
        let start = offset as usize;
        let data: Vec<f64> = payload[start..start + numel * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, data)
            .map_err(|e| CliError::Io(format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

/// Write bytes atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Io(format!("creating {}: {e}", dir.display())))?;
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)
        .map_err(|e| CliError::Io(format!("creating {}: {e}", tmp.display())))?;
    f.write_all(bytes)
        .and_then(|_| f.sync_all())
        .map_err(|e| CliError::Io(format!("writing {}: {e}", tmp.display())))?;
    drop(f);
    fs::rename(&tmp, path)
        .map_err(|e| CliError::Io(format!("renaming into {}: {e}", path.display())))
}

pub fn save_tensors(path: &Path, tensors: &[(String, &Tensor<f64>)]) -> CliResult<()> {
    write_atomic(path, &encode(tensors))
}

pub fn load_tensors(path: &Path) -> CliResult<Vec<(String, Tensor<f64>)>> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
    decode(&bytes)
}

// ── model and map bundles ────────────────────────────────────────────────────

const MODEL_META: &str = "meta.model";
const MAPS_META: &str = "meta.maps";

fn encoder_meta(cfg: &EncoderConfig) -> Vec<f64> {
    let (a, b, c, kind) = match cfg.input {
        InputSpec::Image { grid, patch, channels } => (grid, patch, channels, 0.0),
        InputSpec::Text { vocab, seq_len } => (vocab, seq_len, 0, 1.0),
    };
    vec![
        cfg.width as f64,
        cfg.depth as f64,
        cfg.heads as f64,
        cfg.ffn_mult as f64,
        cfg.embed_dim as f64,
        kind,
        a as f64,
        b as f64,
        c as f64,
    ]
}

fn decode_encoder_meta(m: &[f64]) -> CliResult<EncoderConfig> {
    if m.len() != 9 {
        return Err(CliError::Io("malformed encoder metadata".into()));
    }
    let input = if m[5] == 0.0 {
        InputSpec::Image { grid: m[6] as usize, patch: m[7] as usize, channels: m[8] as usize }
    } else {
        InputSpec::Text { vocab: m[6] as usize, seq_len: m[7] as usize }
    };
    Ok(EncoderConfig {
        width: m[0] as usize,
        depth: m[1] as usize,
        heads: m[2] as usize,
        ffn_mult: m[3] as usize,
        embed_dim: m[4] as usize,
        input,
    })
}

/// Fill a freshly-initialized structure's tensors from a loaded name → tensor
/// list; names and shapes must agree exactly.
fn restore_named(
    slots: Vec<(String, &mut Tensor<f64>)>,
    loaded: &[(String, Tensor<f64>)],
    what: &str,
) -> CliResult<()> {
    let mut filled = 0usize;
    for (name, slot) in slots {
        let src = loaded
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| CliError::Io(format!("{what}: missing tensor `{name}`")))?;
        if src.1.shape() != slot.shape() {
            return Err(CliError::Io(format!(
                "{what}: tensor `{name}` has shape {:?}, expected {:?}",
                src.1.shape(),
                slot.shape()
            )));
        }
        *slot = src.1.clone();
        filled += 1;
    }
    if filled != loaded.len() {
        return Err(CliError::Io(format!("{what}: {} unexpected tensors", loaded.len() - filled)));
    }
    Ok(())
}

pub fn save_model(path: &Path, model: &ClipModel<f64>) -> CliResult<()> {
    let mut meta = encoder_meta(&model.image.config);
    meta.extend(encoder_meta(&model.text.config));
    let meta_t = Tensor::from_f64(vec![meta.len()], &meta).unwrap();
    let mut tensors = vec![(MODEL_META.to_string(), &meta_t)];
    let named = model.named_tensors();
    tensors.extend(named.iter().map(|(n, t)| (n.clone(), *t)));
    save_tensors(path, &tensors)
}

pub fn load_model(path: &Path) -> CliResult<ClipModel<f64>> {
    let loaded = load_tensors(path)?;
    let meta = loaded
        .iter()
        .find(|(n, _)| n == MODEL_META)
        .ok_or_else(|| CliError::Io("not a model checkpoint (no metadata)".into()))?;
    let m = meta.1.data();
    if m.len() != 18 {
        return Err(CliError::Io("malformed model metadata".into()));
    }
    let image_cfg = decode_encoder_meta(&m[..9])?;
    let text_cfg = decode_encoder_meta(&m[9..])?;
    let mut model = ClipModel::init(image_cfg, text_cfg, 1.0, 0)?;
    let non_meta: Vec<(String, Tensor<f64>)> =
        loaded.iter().filter(|(n, _)| n != MODEL_META).cloned().collect();
    restore_named(model.named_tensors_mut(), &non_meta, "model checkpoint")?;
    Ok(model)
}

pub fn save_maps(
    path: &Path,
    maps: &ClipMaps<f64>,
    teacher_image: &EncoderConfig,
    teacher_text: &EncoderConfig,
    spec: &CompressionSpec,
) -> CliResult<()> {
    let mut meta = encoder_meta(teacher_image);
    meta.extend(encoder_meta(teacher_text));
    meta.push(spec.width as f64);
    meta.push(spec.depth as f64);
    let meta_t = Tensor::from_f64(vec![meta.len()], &meta).unwrap();
    let mut tensors = vec![(MAPS_META.to_string(), &meta_t)];
    let named = maps.named_tensors();
    tensors.extend(named.iter().map(|(n, t)| (n.clone(), *t)));
    save_tensors(path, &tensors)
}

pub struct LoadedMaps {
    pub maps: ClipMaps<f64>,
    pub teacher_image: EncoderConfig,
    pub teacher_text: EncoderConfig,
    pub spec: CompressionSpec,
}

pub fn load_maps(path: &Path) -> CliResult<LoadedMaps> {
    let loaded = load_tensors(path)?;
    let meta = loaded
        .iter()
        .find(|(n, _)| n == MAPS_META)
        .ok_or_else(|| CliError::Io("not a maps checkpoint (no metadata)".into()))?;
    let m = meta.1.data();
    if m.len() != 20 {
        return Err(CliError::Io("malformed maps metadata".into()));
    }
    let teacher_image = decode_encoder_meta(&m[..9])?;
    let teacher_text = decode_encoder_meta(&m[9..18])?;
    let spec = CompressionSpec {
        width: m[18] as usize,
        depth: m[19] as usize,
        off_diag_std: 0.0,
    };
    let mut maps = ClipMaps::init(
        &teacher_image,
        &teacher_text,
        &spec,
        MapInit::DiagInherit { off_diag_std: 0.0 },
        0,
    )?;
    let non_meta: Vec<(String, Tensor<f64>)> =
        loaded.iter().filter(|(n, _)| n != MAPS_META).cloned().collect();
    restore_named(maps.named_tensors_mut(), &non_meta, "maps checkpoint")?;
    Ok(LoadedMaps { maps, teacher_image, teacher_text, spec })
}

#[cfg(test)]
mod tests {
    use super::*;
    use clipmap_core::rng::Rng;

    fn random_bundle(seed: u64) -> Vec<(String, Tensor<f64>)> {
        let mut rng = Rng::from_seed(seed);
        let n = 1 + rng.below(6);
        (0..n)
            .map(|i| {
                let rank = 1 + rng.below(3);
                let shape: Vec<usize> = (0..rank).map(|_| 1 + rng.below(5)).collect();
                let numel = shape.iter().product();
                let t = Tensor::from_f64(shape, &rng.normal_vec(numel, 1.0)).unwrap();
                (format!("tensor.{i}"), t)
            })
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact_over_100_bundles() {
        for seed in 0..100 {
            let bundle = random_bundle(seed);
            let refs: Vec<(String, &Tensor<f64>)> =
                bundle.iter().map(|(n, t)| (n.clone(), t)).collect();
            let bytes = encode(&refs);
            let back = decode(&bytes).unwrap();
            assert_eq!(back, bundle, "seed {seed}");
        }
    }

    #[test]
    fn single_byte_corruption_is_detected() {
        let bundle = random_bundle(7);
        let refs: Vec<(String, &Tensor<f64>)> =
            bundle.iter().map(|(n, t)| (n.clone(), t)).collect();
        let bytes = encode(&refs);
        // find where the payload starts: total = header + manifest + payload + crc
        let payload_len: usize = bundle.iter().map(|(_, t)| t.numel() * 8).sum();
        let payload_start = bytes.len() - 4 - payload_len;
        let mut rng = Rng::from_seed(3);
        for _ in 0..50 {
            let i = payload_start + rng.below(payload_len);
            let mut bad = bytes.clone();
            bad[i] ^= 1;
            assert!(decode(&bad).is_err(), "flip at {i} undetected");
        }
    }

    #[test]
    fn header_tampering_rejected() {
        let bundle = random_bundle(1);
        let refs: Vec<(String, &Tensor<f64>)> =
            bundle.iter().map(|(n, t)| (n.clone(), t)).collect();
        let bytes = encode(&refs);
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(decode(&bad_magic).is_err());
        let mut bad_version = bytes.clone();
        bad_version[4] = 99;
        assert!(decode(&bad_version).is_err());
        assert!(decode(&bytes[..bytes.len() - 2]).is_err());
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(decode(&trailing).is_err());
    }

    #[test]
    fn file_round_trip_via_atomic_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let bundle = random_bundle(11);
        let refs: Vec<(String, &Tensor<f64>)> =
            bundle.iter().map(|(n, t)| (n.clone(), t)).collect();
        save_tensors(&path, &refs).unwrap();
        assert!(!path.with_extension("tmp").exists());
        assert_eq!(load_tensors(&path).unwrap(), bundle);
    }

    #[test]
    fn model_checkpoint_round_trips() {
        use clipmap_core::model::{EncoderConfig, InputSpec};
        let image = EncoderConfig {
            width: 8,
            depth: 2,
            heads: 2,
            ffn_mult: 2,
            embed_dim: 6,
            input: InputSpec::Image { grid: 2, patch: 2, channels: 1 },
        };
        let text = EncoderConfig {
            input: InputSpec::Text { vocab: 12, seq_len: 6 },
            ..image
        };
        let model = ClipModel::<f64>::init(image, text, 50.0, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_model(&path, &model).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.checksum(), model.checksum());
        assert_eq!(back.image.config, model.image.config);
        assert_eq!(back.text.config, model.text.config);
    }

    #[test]
    fn maps_checkpoint_round_trips() {
        use clipmap_core::model::{EncoderConfig, InputSpec};
        let image = EncoderConfig {
            width: 8,
            depth: 2,
            heads: 2,
            ffn_mult: 2,
            embed_dim: 6,
            input: InputSpec::Image { grid: 2, patch: 2, channels: 1 },
        };
        let text = EncoderConfig {
            input: InputSpec::Text { vocab: 12, seq_len: 6 },
            ..image
        };
        let spec = CompressionSpec { width: 4, depth: 1, off_diag_std: 0.01 };
        let maps = ClipMaps::<f64>::init(
            &image,
            &text,
            &spec,
            MapInit::DiagInherit { off_diag_std: 0.01 },
            9,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("maps.ckpt");
        save_maps(&path, &maps, &image, &text, &spec).unwrap();
        let back = load_maps(&path).unwrap();
        assert_eq!(back.maps, maps);
        assert_eq!(back.teacher_image, image);
        assert_eq!(back.spec.width, 4);
    }
}
