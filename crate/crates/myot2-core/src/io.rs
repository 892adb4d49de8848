//! On-disk artifact formats. Every artifact is a directory holding a
//! `meta.json` sidecar plus raw little-endian binary payloads, so files are
//! inspectable with standard tools and byte-identical across runs.
//!
//! - `.mev` (multi-echo volume): `meta.json` with `{version, slices,
//!   echoes_ms, height, width, dtype}` and `data.bin` of binary32 values at
//!   index `((s*C + c)*H + h)*W + w`.
//! - `.t2f` (T2 map stack): `meta.json` with `{slices, height, width, units}`
//!   plus `data.bin` (binary32, ms) and `valid.bin` (one byte per pixel,
//!   0 or 1), both indexed `(s*H + h)*W + w`.
//! - `.lbl` (label stack): `meta.json` with `{slices, height, width}` plus
//!   `data.bin`, one byte per pixel in 0..=3.
//! - `.ckpt` (checkpoint): `meta.json` with `{config, seed, epoch}` plus
//!   `params.bin`: magic `MYOT2CK1`, a u64 parameter count, per parameter a
//!   u64 name length + UTF-8 name + u64 rank + rank u64 dims + u64 byte
//!   offset into the payload section, then a u64 payload byte length and the
//!   concatenated binary64 payloads in table order. Offsets are contiguous
//!   and ascending.
//!
//! A training dataset is a directory of subjects; subject `name` is the
//! triple `name.mev`, `name.lbl`, `name.t2f`.

use crate::autodiff::optim::ParamStore;
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::relaxometry::{MultiEchoVolume, T2Map};
use crate::sqnet::ModelConfig;
use crate::types::SegMap;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

const CKPT_MAGIC: &[u8; 8] = b"MYOT2CK1";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn f32_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn f32_values(bytes: &[u8], what: &str) -> Result<Vec<f64>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::MalformedFile(format!(
            "{what}: {} bytes is not a whole number of binary32 values",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn expect_len(got: usize, want: usize, what: &str) -> Result<()> {
    if got != want {
        return Err(Error::MalformedFile(format!("{what}: expected {want} entries, got {got}")));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MevMeta {
    version: u32,
    slices: usize,
    echoes_ms: Vec<f64>,
    height: usize,
    width: usize,
    dtype: String,
}

/// Writes a multi-echo volume directory, creating it if needed.
pub fn write_mev(dir: &Path, v: &MultiEchoVolume) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = MevMeta {
        version: 1,
        slices: v.slices(),
        echoes_ms: v.echoes_ms().to_vec(),
        height: v.height(),
        width: v.width(),
        dtype: "f32le".to_string(),
    };
    write_json(&dir.join("meta.json"), &meta)?;
    fs::write(dir.join("data.bin"), f32_bytes(v.data()))?;
    Ok(())
}

pub fn read_mev(dir: &Path) -> Result<MultiEchoVolume> {
    let meta: MevMeta = read_json(&dir.join("meta.json"))?;
    if meta.version != 1 {
        return Err(Error::MalformedFile(format!("unsupported MEV version {}", meta.version)));
    }
    if meta.dtype != "f32le" {
        return Err(Error::MalformedFile(format!("unsupported MEV dtype '{}'", meta.dtype)));
    }
    let data = f32_values(&fs::read(dir.join("data.bin"))?, "MEV data.bin")?;
    expect_len(
        data.len(),
        meta.slices * meta.echoes_ms.len() * meta.height * meta.width,
        "MEV data.bin",
    )?;
    MultiEchoVolume::new(meta.echoes_ms, meta.slices, meta.height, meta.width, data)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct T2fMeta {
    slices: usize,
    height: usize,
    width: usize,
    units: String,
}

/// Writes a stack of per-slice T2 maps. All maps must share one shape.
pub fn write_t2f(dir: &Path, maps: &[T2Map]) -> Result<()> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("t2f wants at least one slice".into()))?;
    fs::create_dir_all(dir)?;
    let mut values = Vec::new();
    let mut flags = Vec::new();
    for m in maps {
        if m.height != first.height || m.width != first.width {
            return Err(Error::ShapeMismatch(format!(
                "t2f slices disagree: {}x{} vs {}x{}",
                m.height, m.width, first.height, first.width
            )));
        }
        values.extend_from_slice(&m.values_ms);
        flags.extend(m.valid.iter().map(|&b| b as u8));
    }
    let meta = T2fMeta {
        slices: maps.len(),
        height: first.height,
        width: first.width,
        units: "ms".to_string(),
    };
    write_json(&dir.join("meta.json"), &meta)?;
    fs::write(dir.join("data.bin"), f32_bytes(&values))?;
    fs::write(dir.join("valid.bin"), flags)?;
    Ok(())
}

pub fn read_t2f(dir: &Path) -> Result<Vec<T2Map>> {
    let meta: T2fMeta = read_json(&dir.join("meta.json"))?;
    if meta.units != "ms" {
        return Err(Error::MalformedFile(format!("unsupported T2F units '{}'", meta.units)));
    }
    let hw = meta.height * meta.width;
    let values = f32_values(&fs::read(dir.join("data.bin"))?, "T2F data.bin")?;
    expect_len(values.len(), meta.slices * hw, "T2F data.bin")?;
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::MalformedFile(format!("T2F data.bin holds non-finite value {bad}")));
    }
    let flags = fs::read(dir.join("valid.bin"))?;
    expect_len(flags.len(), meta.slices * hw, "T2F valid.bin")?;
    if let Some(bad) = flags.iter().find(|&&b| b > 1) {
        return Err(Error::MalformedFile(format!("T2F valid.bin holds byte {bad}, wants 0/1")));
    }
    (0..meta.slices)
        .map(|s| {
            T2Map::new(
                meta.height,
                meta.width,
                values[s * hw..(s + 1) * hw].to_vec(),
                flags[s * hw..(s + 1) * hw].iter().map(|&b| b == 1).collect(),
            )
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LblMeta {
    slices: usize,
    height: usize,
    width: usize,
}

/// Writes a stack of label maps; one byte per pixel.
pub fn write_lbl(dir: &Path, maps: &[SegMap]) -> Result<()> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("lbl wants at least one slice".into()))?;
    fs::create_dir_all(dir)?;
    let mut data = Vec::new();
    for m in maps {
        if m.height != first.height || m.width != first.width {
            return Err(Error::ShapeMismatch(format!(
                "lbl slices disagree: {}x{} vs {}x{}",
                m.height, m.width, first.height, first.width
            )));
        }
        data.extend_from_slice(&m.data);
    }
    let meta = LblMeta { slices: maps.len(), height: first.height, width: first.width };
    write_json(&dir.join("meta.json"), &meta)?;
    fs::write(dir.join("data.bin"), data)?;
    Ok(())
}

pub fn read_lbl(dir: &Path) -> Result<Vec<SegMap>> {
    let meta: LblMeta = read_json(&dir.join("meta.json"))?;
    let hw = meta.height * meta.width;
    let data = fs::read(dir.join("data.bin"))?;
    expect_len(data.len(), meta.slices * hw, "LBL data.bin")?;
    (0..meta.slices)
        .map(|s| {
            SegMap::new(meta.height, meta.width, data[s * hw..(s + 1) * hw].to_vec())
                .map_err(|e| Error::MalformedFile(format!("LBL slice {s}: {e}")))
        })
        .collect()
}

/// Checkpoint sidecar: enough to rebuild the model and reject mismatched
/// weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
}

pub fn write_ckpt(dir: &Path, meta: &CheckpointMeta, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("meta.json"), meta)?;
    let mut table = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let count = store.len() as u64;
    for (name, tensor) in store.iter() {
        table.extend_from_slice(&(name.len() as u64).to_le_bytes());
        table.extend_from_slice(name.as_bytes());
        table.extend_from_slice(&(tensor.rank() as u64).to_le_bytes());
        for &d in tensor.shape() {
            table.extend_from_slice(&(d as u64).to_le_bytes());
        }
        table.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        for &v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = Vec::with_capacity(8 + 8 + table.len() + 8 + payload.len());
    file.extend_from_slice(CKPT_MAGIC);
    file.extend_from_slice(&count.to_le_bytes());
    file.extend_from_slice(&table);
    file.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    file.extend_from_slice(&payload);
    fs::write(dir.join("params.bin"), file)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::MalformedFile(format!(
                "params.bin truncated reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("slice is 8 bytes")))
    }
}

pub fn read_ckpt(dir: &Path) -> Result<(CheckpointMeta, ParamStore)> {
    let meta: CheckpointMeta = read_json(&dir.join("meta.json"))?;
    let bytes = fs::read(dir.join("params.bin"))?;
    let mut cur = Cursor { buf: &bytes, pos: 0 };
    if cur.take(8, "magic")? != CKPT_MAGIC {
        return Err(Error::MalformedFile("params.bin magic mismatch".into()));
    }
    let count = cur.u64("parameter count")? as usize;
    let mut entries = Vec::with_capacity(count);
    let mut expected_offset = 0u64;
    for i in 0..count {
        let name_len = cur.u64("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| Error::MalformedFile(format!("parameter {i} name is not UTF-8")))?
            .to_string();
        let rank = cur.u64("rank")? as usize;
        if rank > 8 {
            return Err(Error::MalformedFile(format!("parameter '{name}' rank {rank} > 8")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64("dim")? as usize);
        }
        let offset = cur.u64("offset")?;
        if offset != expected_offset {
            return Err(Error::MalformedFile(format!(
                "parameter '{name}' offset {offset}, expected {expected_offset}"
            )));
        }
        let numel: usize = shape.iter().product();
        expected_offset += (numel * 8) as u64;
        entries.push((name, shape, numel));
    }
    let payload_len = cur.u64("payload length")? as usize;
    if payload_len as u64 != expected_offset {
        return Err(Error::MalformedFile(format!(
            "payload length {payload_len} disagrees with table total {expected_offset}"
        )));
    }
    let payload = cur.take(payload_len, "payload")?;
    if cur.pos != bytes.len() {
        return Err(Error::MalformedFile(format!(
            "{} trailing bytes after payload",
            bytes.len() - cur.pos
        )));
    }
    let mut store = ParamStore::new();
    let mut at = 0usize;
    for (name, shape, numel) in entries {
        let mut data = Vec::with_capacity(numel);
        for c in payload[at..at + numel * 8].chunks_exact(8) {
            let v = f64::from_le_bytes(c.try_into().expect("slice is 8 bytes"));
            if !v.is_finite() {
                return Err(Error::MalformedFile(format!(
                    "parameter '{name}' holds non-finite value {v}"
                )));
            }
            data.push(v);
        }
        at += numel * 8;
        store.insert(&name, Tensor::new(shape, data))?;
    }
    Ok((meta, store))
}

/// One training subject: the echo volume and its per-slice labels and truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectData {
    pub volume: MultiEchoVolume,
    pub labels: Vec<SegMap>,
    pub t2: Vec<T2Map>,
}

fn subject_dirs(dir: &Path, name: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("{name}.mev")),
        dir.join(format!("{name}.lbl")),
        dir.join(format!("{name}.t2f")),
    )
}

pub fn write_subject(dir: &Path, name: &str, subject: &SubjectData) -> Result<()> {
    let (mev, lbl, t2f) = subject_dirs(dir, name);
    write_mev(&mev, &subject.volume)?;
    write_lbl(&lbl, &subject.labels)?;
    write_t2f(&t2f, &subject.t2)?;
    Ok(())
}

pub fn read_subject(dir: &Path, name: &str) -> Result<SubjectData> {
    let (mev, lbl, t2f) = subject_dirs(dir, name);
    let volume = read_mev(&mev)?;
    let labels = read_lbl(&lbl)?;
    let t2 = read_t2f(&t2f)?;
    if labels.len() != volume.slices() || t2.len() != volume.slices() {
        return Err(Error::ConfigMismatch(format!(
            "subject '{name}': {} slices vs {} labels vs {} t2 maps",
            volume.slices(),
            labels.len(),
            t2.len()
        )));
    }
    Ok(SubjectData { volume, labels, t2 })
}

/// Subject names that have all three artifacts present, sorted.
pub fn list_subjects(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let file_name = entry.file_name();
        let Some(text) = file_name.to_str() else { continue };
        if let Some(stem) = text.strip_suffix(".mev") {
            let (_, lbl, t2f) = subject_dirs(dir, stem);
            if lbl.is_dir() && t2f.is_dir() {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sqnet::init_params;
    use crate::synth::{gen_phantom, gen_phantom_stack, PhantomSpec};

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().expect("create temp dir")
    }

    #[test]
    fn mev_roundtrip_is_byte_stable() {
        let dir = tmp();
        let s = gen_phantom(&PhantomSpec::base(1)).unwrap();
        let p1 = dir.path().join("a.mev");
        let p2 = dir.path().join("b.mev");
        write_mev(&p1, &s.volume).unwrap();
        let r1 = read_mev(&p1).unwrap();
        assert_eq!(r1.slices(), 1);
        assert_eq!(r1.echoes_ms(), s.volume.echoes_ms());
        // Values already passed through f32 once, so a second trip is exact.
        write_mev(&p2, &r1).unwrap();
        assert_eq!(
            fs::read(p1.join("data.bin")).unwrap(),
            fs::read(p2.join("data.bin")).unwrap()
        );
        assert_eq!(
            fs::read(p1.join("meta.json")).unwrap(),
            fs::read(p2.join("meta.json")).unwrap()
        );
        assert_eq!(read_mev(&p2).unwrap(), r1);
    }

    #[test]
    fn mev_rejects_corrupted_payloads() {
        let dir = tmp();
        let s = gen_phantom(&PhantomSpec::base(1)).unwrap();
        let p = dir.path().join("a.mev");
        write_mev(&p, &s.volume).unwrap();
        let mut bytes = fs::read(p.join("data.bin")).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(p.join("data.bin"), &bytes).unwrap();
        assert!(matches!(read_mev(&p), Err(Error::MalformedFile(_))));
        let mut meta: serde_json::Value = read_json(&p.join("meta.json")).unwrap();
        meta["dtype"] = "f64le".into();
        write_json(&p.join("meta.json"), &meta).unwrap();
        assert!(matches!(read_mev(&p), Err(Error::MalformedFile(_))));
    }

    #[test]
    fn t2f_and_lbl_roundtrip() {
        let dir = tmp();
        let specs: Vec<PhantomSpec> = (0..2).map(PhantomSpec::randomized).collect();
        let (_, labels, truth) = gen_phantom_stack(&specs).unwrap();
        let t2p = dir.path().join("x.t2f");
        write_t2f(&t2p, &truth).unwrap();
        let rt = read_t2f(&t2p).unwrap();
        assert_eq!(rt.len(), 2);
        for (a, b) in rt.iter().zip(&truth) {
            assert_eq!(a.valid, b.valid);
            for (x, y) in a.values_ms.iter().zip(&b.values_ms) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        let lp = dir.path().join("x.lbl");
        write_lbl(&lp, &labels).unwrap();
        assert_eq!(read_lbl(&lp).unwrap(), labels);
    }

    #[test]
    fn t2f_rejects_bad_valid_bytes() {
        let dir = tmp();
        let s = gen_phantom(&PhantomSpec::base(4)).unwrap();
        let p = dir.path().join("x.t2f");
        write_t2f(&p, &[s.t2_truth]).unwrap();
        let mut flags = fs::read(p.join("valid.bin")).unwrap();
        flags[0] = 2;
        fs::write(p.join("valid.bin"), &flags).unwrap();
        assert!(matches!(read_t2f(&p), Err(Error::MalformedFile(_))));
    }

    #[test]
    fn lbl_rejects_out_of_range_labels() {
        let dir = tmp();
        let s = gen_phantom(&PhantomSpec::base(4)).unwrap();
        let p = dir.path().join("x.lbl");
        write_lbl(&p, &[s.labels]).unwrap();
        let mut data = fs::read(p.join("data.bin")).unwrap();
        data[0] = 9;
        fs::write(p.join("data.bin"), &data).unwrap();
        assert!(matches!(read_lbl(&p), Err(Error::MalformedFile(_))));
    }

    #[test]
    fn ckpt_roundtrip_preserves_every_parameter_bit() {
        let dir = tmp();
        let cfg = ModelConfig {
            side: 32,
            in_channels: 2,
            patch: 8,
            dim: 16,
            heads: 2,
            depth: [1, 1, 1],
            cnn_channels: [8, 16, 32],
            num_classes: 4,
            dropout: 0.1,
        };
        let store = init_params(&cfg, 3).unwrap();
        let meta = CheckpointMeta { config: cfg, seed: 3, epoch: 17 };
        let p = dir.path().join("m.ckpt");
        write_ckpt(&p, &meta, &store).unwrap();
        let (meta2, store2) = read_ckpt(&p).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(store.len(), store2.len());
        for ((na, ta), (nb, tb)) in store.iter().zip(store2.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb, "parameter {na} must roundtrip bit-exactly");
        }
    }

    #[test]
    fn ckpt_rejects_tampered_tables() {
        let dir = tmp();
        let cfg = ModelConfig {
            side: 32,
            in_channels: 2,
            patch: 8,
            dim: 16,
            heads: 2,
            depth: [1, 1, 1],
            cnn_channels: [8, 16, 32],
            num_classes: 4,
            dropout: 0.1,
        };
        let store = init_params(&cfg, 3).unwrap();
        let meta = CheckpointMeta { config: cfg, seed: 3, epoch: 0 };
        let p = dir.path().join("m.ckpt");
        write_ckpt(&p, &meta, &store).unwrap();
        let mut bytes = fs::read(p.join("params.bin")).unwrap();
        bytes[0] = b'X';
        fs::write(p.join("params.bin"), &bytes).unwrap();
        assert!(matches!(read_ckpt(&p), Err(Error::MalformedFile(_))));
        let bytes = fs::read(p.join("params.bin")).unwrap();
        fs::write(p.join("params.bin"), &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_ckpt(&p), Err(Error::MalformedFile(_))));
    }

    #[test]
    fn subjects_list_sorted_and_require_all_parts() {
        let dir = tmp();
        for (i, name) in ["beta", "alpha", "gamma"].iter().enumerate() {
            let s = gen_phantom(&PhantomSpec::randomized(i as u64)).unwrap();
            let subject = SubjectData {
                volume: s.volume.clone(),
                labels: vec![s.labels.clone()],
                t2: vec![s.t2_truth.clone()],
            };
            write_subject(dir.path(), name, &subject).unwrap();
        }
        fs::remove_dir_all(dir.path().join("gamma.t2f")).unwrap();
        let names = list_subjects(dir.path()).unwrap();
        assert_eq!(names, ["alpha", "beta"]);
        let s = read_subject(dir.path(), "alpha").unwrap();
        assert_eq!(s.volume.slices(), 1);
        assert_eq!(s.labels.len(), 1);
    }
}
