//! SGCK checkpoint files.
//!
//! Layout, little-endian throughout: magic `SGCK`, format version u32,
//! model-kind tag (u32 length + utf8), iteration u64, optimizer step u64,
//! then two tensor sections (model, optimizer state). A section is a u32
//! tensor count followed by, per tensor: name (u32 length + bytes), rank
//! u32, dims as u32 each, then the f32 payload. Save -> load -> save is
//! byte-identical; loading validates names and shapes against the
//! architecture built from the run configuration.

use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::{Adam, Sgd};
use crate::tensor::Param;

const MAGIC: &[u8; 4] = b"SGCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// "rpn", "seg.plain", "seg.mask3d" or "seg.attention".
    pub kind: String,
    pub iteration: u64,
    pub opt_step: u64,
    pub model: Vec<NamedTensor>,
    pub opt: Vec<NamedTensor>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_tensors(out: &mut Vec<u8>, tensors: &[NamedTensor]) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        put_str(out, &t.name);
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for &d in &t.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    ctx: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: truncated checkpoint at byte offset {}",
                self.ctx,
                self.bytes.len()
            )));
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

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Format(format!("{}: non-utf8 string at byte offset {}", self.ctx, self.pos)))
    }

    fn tensors(&mut self) -> Result<Vec<NamedTensor>> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let name = self.string()?;
            let rank = self.u32()? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("{}: implausible rank {rank} for '{name}'", self.ctx)));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(self.u32()? as usize);
            }
            let numel: usize = dims.iter().product();
            let raw = self.take(4 * numel)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            out.push(NamedTensor { name, dims, data });
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.opt_step.to_le_bytes());
        put_tensors(&mut out, &self.model);
        put_tensors(&mut out, &self.opt);
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        let ctx = path.display().to_string();
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format(format!("{ctx}: bad magic at byte offset 0")));
        }
        let mut r = Reader { bytes: &bytes, pos: 4, ctx };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported checkpoint version {version}",
                r.ctx
            )));
        }
        let kind = r.string()?;
        let iteration = r.u64()?;
        let opt_step = r.u64()?;
        let model = r.tensors()?;
        let opt = r.tensors()?;
        if r.pos != r.bytes.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes at byte offset {}",
                r.ctx,
                r.bytes.len() - r.pos,
                r.pos
            )));
        }
        Ok(Checkpoint { kind, iteration, opt_step, model, opt })
    }
}

fn snapshot_params(params: &[Param]) -> Vec<NamedTensor> {
    params
        .iter()
        .map(|p| {
            let t = p.borrow();
            NamedTensor { name: p.name.clone(), dims: t.shape.clone(), data: t.data.clone() }
        })
        .collect()
}

fn opt_tensor(prefix: &str, param: &Param, data: &[f32]) -> NamedTensor {
    NamedTensor {
        name: format!("{prefix}.{}", param.name),
        dims: param.shape(),
        data: data.to_vec(),
    }
}

/// Snapshot a model trained with SGD.
pub fn snapshot_sgd(kind: &str, iteration: u64, params: &[Param], opt: &Sgd) -> Checkpoint {
    let opt_tensors = if opt.velocity.is_empty() {
        Vec::new()
    } else {
        params
            .iter()
            .zip(&opt.velocity)
            .map(|(p, v)| opt_tensor("sgd.v", p, v))
            .collect()
    };
    Checkpoint {
        kind: kind.to_string(),
        iteration,
        opt_step: 0,
        model: snapshot_params(params),
        opt: opt_tensors,
    }
}

/// Snapshot a model trained with Adam.
pub fn snapshot_adam(kind: &str, iteration: u64, params: &[Param], opt: &Adam) -> Checkpoint {
    let mut opt_tensors = Vec::new();
    if !opt.m.is_empty() {
        for (p, m) in params.iter().zip(&opt.m) {
            opt_tensors.push(opt_tensor("adam.m", p, m));
        }
        for (p, v) in params.iter().zip(&opt.v) {
            opt_tensors.push(opt_tensor("adam.v", p, v));
        }
    }
    Checkpoint {
        kind: kind.to_string(),
        iteration,
        opt_step: opt.step_count,
        model: snapshot_params(params),
        opt: opt_tensors,
    }
}

/// Copy checkpointed model tensors into a freshly built architecture,
/// validating every name and shape.
pub fn restore_params(ckpt: &Checkpoint, params: &[Param]) -> Result<()> {
    if ckpt.model.len() != params.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, architecture expects {}",
            ckpt.model.len(),
            params.len()
        )));
    }
    for (saved, p) in ckpt.model.iter().zip(params) {
        if saved.name != p.name {
            return Err(Error::Format(format!(
                "checkpoint tensor '{}' does not match architecture parameter '{}'",
                saved.name, p.name
            )));
        }
        if saved.dims != p.shape() {
            return Err(Error::Format(format!(
                "checkpoint tensor '{}' has shape {:?}, architecture expects {:?}",
                saved.name,
                saved.dims,
                p.shape()
            )));
        }
        p.borrow_mut().data.copy_from_slice(&saved.data);
    }
    Ok(())
}

/// Restore SGD velocity buffers saved by [`snapshot_sgd`].
pub fn restore_sgd(ckpt: &Checkpoint, params: &[Param], opt: &mut Sgd) -> Result<()> {
    if ckpt.opt.is_empty() {
        opt.velocity = Vec::new();
        return Ok(());
    }
    if ckpt.opt.len() != params.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} optimizer tensors, expected {}",
            ckpt.opt.len(),
            params.len()
        )));
    }
    let mut velocity = Vec::with_capacity(params.len());
    for (saved, p) in ckpt.opt.iter().zip(params) {
        let want = format!("sgd.v.{}", p.name);
        if saved.name != want {
            return Err(Error::Format(format!(
                "optimizer tensor '{}' does not match expected '{want}'",
                saved.name
            )));
        }
        velocity.push(saved.data.clone());
    }
    opt.velocity = velocity;
    Ok(())
}

/// Restore Adam moment buffers saved by [`snapshot_adam`].
pub fn restore_adam(ckpt: &Checkpoint, params: &[Param], opt: &mut Adam) -> Result<()> {
    opt.step_count = ckpt.opt_step;
    if ckpt.opt.is_empty() {
        opt.m = Vec::new();
        opt.v = Vec::new();
        return Ok(());
    }
    if ckpt.opt.len() != 2 * params.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} optimizer tensors, expected {}",
            ckpt.opt.len(),
            2 * params.len()
        )));
    }
    let (m_part, v_part) = ckpt.opt.split_at(params.len());
    let mut m = Vec::with_capacity(params.len());
    let mut v = Vec::with_capacity(params.len());
    for ((sm, sv), p) in m_part.iter().zip(v_part).zip(params) {
        for (saved, prefix) in [(sm, "adam.m"), (sv, "adam.v")] {
            let want = format!("{prefix}.{}", p.name);
            if saved.name != want {
                return Err(Error::Format(format!(
                    "optimizer tensor '{}' does not match expected '{want}'",
                    saved.name
                )));
            }
        }
        m.push(sm.data.clone());
        v.push(sv.data.clone());
    }
    opt.m = m;
    opt.v = v;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rpn::{RpnConfig, RpnModel};

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let model = RpnModel::new(RpnConfig::default(), 123);
        let opt = Sgd::detection_defaults();
        let ckpt = snapshot_sgd("rpn", 17, &model.params(), &opt);
        let p1 = dir.path().join("a.sgck");
        let p2 = dir.path().join("b.sgck");
        ckpt.write(&p1).unwrap();
        let loaded = Checkpoint::read(&p1).unwrap();
        loaded.write(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded, ckpt);
    }

    #[test]
    fn restore_reproduces_every_tensor_bit_exactly() {
        let model = RpnModel::new(RpnConfig::default(), 9);
        let ckpt = snapshot_sgd("rpn", 1, &model.params(), &Sgd::detection_defaults());
        let fresh = RpnModel::new(RpnConfig::default(), 777);
        restore_params(&ckpt, &fresh.params()).unwrap();
        for (a, b) in model.params().iter().zip(fresh.params().iter()) {
            assert_eq!(a.borrow().data, b.borrow().data, "{}", a.name);
        }
    }

    #[test]
    fn shape_validation_rejects_wrong_architecture() {
        let model = RpnModel::new(RpnConfig::default(), 9);
        let ckpt = snapshot_sgd("rpn", 1, &model.params(), &Sgd::detection_defaults());
        let other = RpnModel::new(
            RpnConfig { backbone_channels: vec![4, 8, 16], ..RpnConfig::default() },
            9,
        );
        assert!(matches!(restore_params(&ckpt, &other.params()), Err(Error::Format(_))));
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.sgck");
        let model = RpnModel::new(RpnConfig::default(), 3);
        let ckpt = snapshot_sgd("rpn", 5, &model.params(), &Sgd::detection_defaults());
        ckpt.write(&path).unwrap();
        let good = std::fs::read(&path).unwrap();

        std::fs::write(&path, b"JUNK").unwrap();
        assert!(matches!(Checkpoint::read(&path), Err(Error::Format(_))));

        std::fs::write(&path, &good[..good.len() / 2]).unwrap();
        assert!(matches!(Checkpoint::read(&path), Err(Error::Format(m)) if m.contains("truncated")));

        let mut padded = good.clone();
        padded.extend_from_slice(&[0, 0]);
        std::fs::write(&path, &padded).unwrap();
        assert!(matches!(Checkpoint::read(&path), Err(Error::Format(m)) if m.contains("trailing")));
    }

    #[test]
    fn adam_state_roundtrip_continues_identically() {
        use crate::tensor::{ParamKind, Tensor};
        let mk = || {
            let mut t = Tensor::new(vec![3], vec![1.0, -0.5, 2.0]).unwrap();
            t.grad = Some(vec![0.0; 3]);
            crate::tensor::Param::new("p", ParamKind::Weight, t)
        };
        let grads = |step: usize| vec![0.1 * step as f32, -0.2, 0.3];

        // uninterrupted: 6 adam steps
        let p_full = mk();
        let mut opt_full = Adam::segmentation_defaults();
        for s in 1..=6 {
            p_full.borrow_mut().grad = Some(grads(s));
            opt_full.step(&[p_full.clone()]).unwrap();
        }

        // interrupted at 3, snapshotted, restored, 3 more
        let p_half = mk();
        let mut opt_a = Adam::segmentation_defaults();
        for s in 1..=3 {
            p_half.borrow_mut().grad = Some(grads(s));
            opt_a.step(&[p_half.clone()]).unwrap();
        }
        let ckpt = snapshot_adam("seg.plain", 3, &[p_half.clone()], &opt_a);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adam.sgck");
        ckpt.write(&path).unwrap();
        let loaded = Checkpoint::read(&path).unwrap();

        let p_resumed = mk();
        restore_params(&loaded, &[p_resumed.clone()]).unwrap();
        let mut opt_b = Adam::segmentation_defaults();
        restore_adam(&loaded, &[p_resumed.clone()], &mut opt_b).unwrap();
        assert_eq!(opt_b.step_count, 3);
        for s in 4..=6 {
            p_resumed.borrow_mut().grad = Some(grads(s));
            opt_b.step(&[p_resumed.clone()]).unwrap();
        }
        assert_eq!(p_full.borrow().data, p_resumed.borrow().data);
    }
}
