//! Binary model checkpoints.
//!
//! Layout: magic `FQCK`, format version (u32 LE), architecture tag,
//! architecture config (u64 LE list), parameter shape table with raw
//! little-endian f64 payloads, trailing CRC-32 over everything before it.

use super::{Cnn, CnnConfig, Model, ModelError, Vit, VitConfig, MODEL_CONFIG_VERSION};
use crate::checksum::crc32;
use crate::tensor::Tensor;
use std::path::Path;

const MAGIC: &[u8; 4] = b"FQCK";

fn config_ints(model: &Model) -> Vec<u64> {
    match model {
        Model::Cnn(m) => {
            let c = m.config();
            vec![c.classes as u64, c.input.0 as u64, c.input.1 as u64, c.input.2 as u64, c.width as u64, c.seed]
        }
        Model::Vit(m) => {
            let c = m.config();
            vec![
                c.classes as u64,
                c.input.0 as u64,
                c.input.1 as u64,
                c.input.2 as u64,
                c.patch as u64,
                c.depth as u64,
                c.heads as u64,
                c.embed as u64,
                c.mlp_hidden as u64,
                c.seed,
            ]
        }
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&MODEL_CONFIG_VERSION.to_le_bytes());
    let tag = model.arch_tag().as_bytes();
    buf.push(tag.len() as u8);
    buf.extend_from_slice(tag);
    let ints = config_ints(model);
    buf.extend_from_slice(&(ints.len() as u32).to_le_bytes());
    for v in ints {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let params = model.params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        buf.push(p.rank() as u8);
        for &d in p.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::CorruptCheckpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Model, ModelError> {
    let buf = std::fs::read(path)?;
    if buf.len() < MAGIC.len() + 8 {
        return Err(ModelError::CorruptCheckpoint("file too short".into()));
    }
    let (body, crc_bytes) = buf.split_at(buf.len() - 4);
    let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32(body) != stored_crc {
        return Err(ModelError::CorruptCheckpoint("checksum mismatch".into()));
    }

    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(ModelError::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != MODEL_CONFIG_VERSION {
        return Err(ModelError::CorruptCheckpoint(format!(
            "format version {version}, expected {MODEL_CONFIG_VERSION}"
        )));
    }
    let tag_len = r.u8()? as usize;
    let tag = std::str::from_utf8(r.take(tag_len)?)
        .map_err(|_| ModelError::CorruptCheckpoint("architecture tag not utf-8".into()))?
        .to_string();
    let n_ints = r.u32()? as usize;
    let mut ints = Vec::with_capacity(n_ints);
    for _ in 0..n_ints {
        ints.push(r.u64()?);
    }

    let mut model = match tag.as_str() {
        "cnn" => {
            if ints.len() != 6 {
                return Err(ModelError::CorruptCheckpoint("cnn config length".into()));
            }
            let cfg = CnnConfig {
                classes: ints[0] as usize,
                input: (ints[1] as usize, ints[2] as usize, ints[3] as usize),
                width: ints[4] as usize,
                seed: ints[5],
            };
            Model::Cnn(Cnn::build(cfg))
        }
        "vit" => {
            if ints.len() != 10 {
                return Err(ModelError::CorruptCheckpoint("vit config length".into()));
            }
            let cfg = VitConfig {
                classes: ints[0] as usize,
                input: (ints[1] as usize, ints[2] as usize, ints[3] as usize),
                patch: ints[4] as usize,
                depth: ints[5] as usize,
                heads: ints[6] as usize,
                embed: ints[7] as usize,
                mlp_hidden: ints[8] as usize,
                seed: ints[9],
            };
            Model::Vit(Vit::build(cfg)?)
        }
        other => {
            return Err(ModelError::CorruptCheckpoint(format!("unknown architecture '{other}'")))
        }
    };

    let n_params = r.u32()? as usize;
    if n_params != model.params().len() {
        return Err(ModelError::CorruptCheckpoint(format!(
            "parameter count {n_params}, architecture has {}",
            model.params().len()
        )));
    }
    let expected_shapes: Vec<Vec<usize>> =
        model.params().iter().map(|p| p.shape().to_vec()).collect();
    let mut loaded: Vec<Tensor> = Vec::with_capacity(n_params);
    for expected in &expected_shapes {
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        if &shape != expected {
            return Err(ModelError::CorruptCheckpoint(format!(
                "shape table mismatch: {shape:?} vs {expected:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64()?);
        }
        loaded.push(Tensor::new(shape, data).expect("validated length"));
    }
    if r.pos != body.len() {
        return Err(ModelError::CorruptCheckpoint("trailing bytes".into()));
    }
    for (slot, new) in model.params_mut().into_iter().zip(loaded) {
        *slot = new;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ForwardOptions, VitConfig};
    use crate::rng::Rng;
    use crate::tensor::Tape;

    fn tmpdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("freqlab-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn roundtrip_preserves_forward_outputs() {
        let model = Model::Vit(Vit::build(VitConfig::new((3, 16, 16), 4, 123)).unwrap());
        let path = tmpdir().join("vit.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let mut rng = Rng::new(7);
        let x = Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        assert_eq!(model.logits(&x).unwrap(), loaded.logits(&x).unwrap());
        // Attention traces agree too.
        let ta = model.attention_trace(&x).unwrap();
        let tb = loaded.attention_trace(&x).unwrap();
        for (a, b) in ta.layers.iter().zip(&tb.layers) {
            assert_eq!(a.data(), b.data());
        }
        let _ = ForwardOptions::default();
        let _ = Tape::new();
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let model = Model::Cnn(Cnn::build(CnnConfig::new((1, 16, 16), 2, 9).with_width(4)));
        let path = tmpdir().join("cnn.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = path.with_extension("cut");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&cut), Err(ModelError::CorruptCheckpoint(_))));
    }

    #[test]
    fn version_mismatch_is_corrupt() {
        let model = Model::Cnn(Cnn::build(CnnConfig::new((1, 16, 16), 2, 9).with_width(4)));
        let path = tmpdir().join("ver.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 0xFF; // version field
        // Keep the CRC consistent so the version check itself fires.
        let body_len = bytes.len() - 4;
        let crc = crate::checksum::crc32(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&crc.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        match load_checkpoint(&path) {
            Err(ModelError::CorruptCheckpoint(why)) => assert!(why.contains("version")),
            Err(other) => panic!("unexpected error {other}"),
            Ok(_) => panic!("expected a corrupt checkpoint"),
        }
    }

    #[test]
    fn flipped_payload_bit_fails_checksum() {
        let model = Model::Cnn(Cnn::build(CnnConfig::new((1, 16, 16), 2, 9).with_width(4)));
        let path = tmpdir().join("bit.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        std::fs::write(&path, bytes).unwrap();
        match load_checkpoint(&path) {
            Err(ModelError::CorruptCheckpoint(why)) => assert!(why.contains("checksum")),
            Err(other) => panic!("unexpected error {other}"),
            Ok(_) => panic!("expected a corrupt checkpoint"),
        }
    }
}
