//! Versioned binary checkpoints: magic header, config snapshot, student and
//! teacher parameter sections, optimizer state. Round trips are byte-exact.

use alloc::string::String;
use alloc::vec::Vec;

use crate::nn::ParamStore;
use crate::optim::{AdamState, Optimizer, OptimizerKind};
use crate::tensor::Matrix;
use crate::training::{init_trainer, TrainConfig, TrainerState};
use crate::{CoreError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"SEOR1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Decoded checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: u64,
    pub config: TrainConfig,
    pub student: Vec<(String, Matrix)>,
    pub teacher: Vec<(String, Matrix)>,
    pub adam: Option<AdamState>,
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_bytes(out: &mut Vec<u8>, b: &[u8]) {
    push_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

fn push_matrix(out: &mut Vec<u8>, m: &Matrix) {
    push_u64(out, m.rows() as u64);
    push_u64(out, m.cols() as u64);
    for &v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_store(out: &mut Vec<u8>, store: &ParamStore) {
    push_u64(out, store.len() as u64);
    for (name, m) in store.names().iter().zip(store.mats()) {
        push_bytes(out, name.as_bytes());
        push_matrix(out, m);
    }
}

fn push_mats(out: &mut Vec<u8>, mats: &[Matrix]) {
    push_u64(out, mats.len() as u64);
    for m in mats {
        push_matrix(out, m);
    }
}

/// Serializes the full training state.
pub fn encode_checkpoint(state: &TrainerState, cfg: &TrainConfig) -> Result<Vec<u8>> {
    let config_json = serde_json::to_string(cfg)
        .map_err(|e| CoreError::CheckpointFormat(alloc::format!("config encode: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut out, CHECKPOINT_VERSION);
    push_u64(&mut out, state.step);
    push_bytes(&mut out, config_json.as_bytes());
    push_store(&mut out, &state.ts.student.store);
    push_store(&mut out, &state.ts.teacher.store);
    match (&state.opt.kind, &state.opt.adam) {
        (OptimizerKind::Sgd, _) => out.push(0),
        (OptimizerKind::Adam, Some(adam)) => {
            out.push(1);
            push_u64(&mut out, adam.t);
            push_mats(&mut out, &adam.m);
            push_mats(&mut out, &adam.v);
        }
        (OptimizerKind::Adam, None) => {
            return Err(CoreError::CheckpointFormat(
                "adam optimizer without moment state".into(),
            ))
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CoreError::CheckpointFormat(alloc::format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let len = self.u64()? as usize;
        self.take(len)
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let count = rows.checked_mul(cols).ok_or_else(|| {
            CoreError::CheckpointFormat("tensor dimension overflow".into())
        })?;
        if count > self.buf.len() / 8 + 1 {
            return Err(CoreError::CheckpointFormat(alloc::format!(
                "tensor of {count} entries exceeds file size"
            )));
        }
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(self.f64()?);
        }
        Matrix::from_vec(rows, cols, data)
            .map_err(|_| CoreError::CheckpointFormat("inconsistent tensor shape".into()))
    }

    fn named_mats(&mut self) -> Result<Vec<(String, Matrix)>> {
        let count = self.u64()? as usize;
        let mut out = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = core::str::from_utf8(self.bytes()?)
                .map_err(|_| CoreError::CheckpointFormat("non-utf8 tensor name".into()))?
                .into();
            out.push((name, self.matrix()?));
        }
        Ok(out)
    }

    fn mats(&mut self) -> Result<Vec<Matrix>> {
        let count = self.u64()? as usize;
        let mut out = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            out.push(self.matrix()?);
        }
        Ok(out)
    }
}

/// Parses checkpoint bytes; never reinterprets unknown versions.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    let magic = r.take(5)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CoreError::CheckpointFormat("bad magic header".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CoreError::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let step = r.u64()?;
    let config_json = core::str::from_utf8(r.bytes()?)
        .map_err(|_| CoreError::CheckpointFormat("non-utf8 config".into()))?;
    let config: TrainConfig = serde_json::from_str(config_json)
        .map_err(|e| CoreError::CheckpointFormat(alloc::format!("config parse: {e}")))?;
    let student = r.named_mats()?;
    let teacher = r.named_mats()?;
    let opt_tag = r.take(1)?[0];
    let adam = match opt_tag {
        0 => None,
        1 => {
            let t = r.u64()?;
            let m = r.mats()?;
            let v = r.mats()?;
            Some(AdamState { t, m, v })
        }
        other => {
            return Err(CoreError::CheckpointFormat(alloc::format!(
                "unknown optimizer tag {other}"
            )))
        }
    };
    if r.pos != bytes.len() {
        return Err(CoreError::CheckpointFormat(alloc::format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        step,
        config,
        student,
        teacher,
        adam,
    })
}

fn load_store(store: &mut ParamStore, named: &[(String, Matrix)]) -> Result<()> {
    if named.len() != store.len() {
        return Err(CoreError::CheckpointFormat(alloc::format!(
            "expected {} tensors, checkpoint has {}",
            store.len(),
            named.len()
        )));
    }
    for (i, (name, m)) in named.iter().enumerate() {
        if store.names()[i] != *name {
            return Err(CoreError::CheckpointFormat(alloc::format!(
                "tensor {i} named `{name}`, expected `{}`",
                store.names()[i]
            )));
        }
        if !store.mats()[i].same_shape(m) {
            return Err(CoreError::CheckpointFormat(alloc::format!(
                "tensor `{name}` has shape {}x{}, expected {}x{}",
                m.rows(),
                m.cols(),
                store.mats()[i].rows(),
                store.mats()[i].cols()
            )));
        }
        store.mats_mut()[i] = m.clone();
    }
    Ok(())
}

/// Rebuilds a trainer from a decoded checkpoint. The architecture comes from
/// the embedded config; tensor names and shapes must match it exactly.
pub fn restore_trainer(ckpt: &Checkpoint) -> Result<(TrainerState, TrainConfig)> {
    let cfg = ckpt.config.clone();
    let mut state = init_trainer(&cfg)?;
    load_store(&mut state.ts.student.store, &ckpt.student)?;
    load_store(&mut state.ts.teacher.store, &ckpt.teacher)?;
    state.step = ckpt.step;
    state.opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &state.ts.student.store);
    match (cfg.optimizer, &ckpt.adam) {
        (OptimizerKind::Adam, Some(adam)) => {
            let expect = state.ts.student.store.len();
            if adam.m.len() != expect || adam.v.len() != expect {
                return Err(CoreError::CheckpointFormat(
                    "optimizer state misaligned with parameters".into(),
                ));
            }
            state.opt.adam = Some(adam.clone());
        }
        (OptimizerKind::Adam, None) => {
            return Err(CoreError::CheckpointFormat(
                "config says adam but checkpoint carries no moment state".into(),
            ))
        }
        (OptimizerKind::Sgd, _) => {}
    }
    Ok((state, cfg))
}

/// Writes a checkpoint file.
#[cfg(feature = "std")]
pub fn save_checkpoint(
    state: &TrainerState,
    cfg: &TrainConfig,
    path: impl AsRef<std::path::Path>,
) -> Result<()> {
    let bytes = encode_checkpoint(state, cfg)?;
    std::fs::write(path.as_ref(), bytes).map_err(|e| {
        CoreError::CheckpointFormat(alloc::format!(
            "write {}: {e}",
            path.as_ref().display()
        ))
    })
}

/// Reads and restores a checkpoint file.
#[cfg(feature = "std")]
pub fn load_checkpoint(path: impl AsRef<std::path::Path>) -> Result<(TrainerState, TrainConfig)> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| {
        CoreError::CheckpointFormat(alloc::format!(
            "read {}: {e}",
            path.as_ref().display()
        ))
    })?;
    let ckpt = decode_checkpoint(&bytes)?;
    restore_trainer(&ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_state() -> (TrainerState, TrainConfig) {
        let cfg = TrainConfig {
            steps: 10,
            model: ModelConfig::micro(),
            seed: 9,
            ..Default::default()
        };
        let state = init_trainer(&cfg).unwrap();
        (state, cfg)
    }

    #[test]
    fn roundtrip_is_byte_exact() {
        let (mut state, cfg) = tiny_state();
        state.step = 4;
        state.opt.adam.as_mut().unwrap().t = 4;
        let bytes = encode_checkpoint(&state, &cfg).unwrap();
        let ckpt = decode_checkpoint(&bytes).unwrap();
        let (restored, rcfg) = restore_trainer(&ckpt).unwrap();
        assert_eq!(rcfg, cfg);
        assert_eq!(restored.step, 4);
        assert_eq!(
            restored.ts.student.store.mats(),
            state.ts.student.store.mats()
        );
        let bytes2 = encode_checkpoint(&restored, &rcfg).unwrap();
        assert_eq!(bytes, bytes2, "save -> load -> save must be identical");
    }

    #[test]
    fn magic_is_pinned() {
        let (state, cfg) = tiny_state();
        let bytes = encode_checkpoint(&state, &cfg).unwrap();
        assert_eq!(&bytes[..5], b"SEOR1");
    }

    #[test]
    fn corrupted_and_truncated_files_fail_loudly() {
        let (state, cfg) = tiny_state();
        let bytes = encode_checkpoint(&state, &cfg).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bad_magic),
            Err(CoreError::CheckpointFormat(_))
        ));

        let truncated = &bytes[..bytes.len() / 2];
        assert!(decode_checkpoint(truncated).is_err());

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(decode_checkpoint(&trailing).is_err());
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let (state, cfg) = tiny_state();
        let mut bytes = encode_checkpoint(&state, &cfg).unwrap();
        bytes[5..9].copy_from_slice(&2u32.to_le_bytes());
        match decode_checkpoint(&bytes) {
            Err(CoreError::CheckpointVersion { found, expected }) => {
                assert_eq!(found, 2);
                assert_eq!(expected, 1);
            }
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn layout_mismatch_rejected_on_restore() {
        let (state, cfg) = tiny_state();
        let bytes = encode_checkpoint(&state, &cfg).unwrap();
        let mut ckpt = decode_checkpoint(&bytes).unwrap();
        ckpt.student.swap(0, 1);
        assert!(restore_trainer(&ckpt).is_err());
    }

    #[cfg(feature = "std")]
    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.seor");
        let (state, cfg) = tiny_state();
        save_checkpoint(&state, &cfg, &path).unwrap();
        let (restored, _) = load_checkpoint(&path).unwrap();
        assert_eq!(
            restored.ts.teacher.store.mats(),
            state.ts.teacher.store.mats()
        );
        assert!(load_checkpoint(dir.path().join("missing.seor")).is_err());
    }
}
