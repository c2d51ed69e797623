//! On-disk formats. Layouts are documented in `docs/formats.md`.

use std::io::Write;
use std::path::Path;

use bridge_core::diffmath::Mat;
use bridge_core::proxy::{mlp_from, ProxyKind, ProxyPredictor};
use bridge_core::synth::{Modality, Split, SplitData, SyntheticWorld, WorldSpec};
use bridge_core::train::Encoder;
use serde::Serialize;

use crate::error::{Result, RunError};

pub const WORLD_MAGIC: &[u8; 8] = b"BRWORLD\0";
pub const WORLD_VERSION: u32 = 1;
pub const CKPT_TAG: &str = "BRIDGE-CKPT v1";

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| RunError::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| RunError::io(path, e))
}

// ---------------------------------------------------------------- world

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_mat(buf: &mut Vec<u8>, m: &Mat) {
    put_u64(buf, m.rows() as u64);
    put_u64(buf, m.cols() as u64);
    for v in m.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn split_tag(s: Split) -> u8 {
    Split::ALL.iter().position(|x| *x == s).expect("split is listed") as u8
}

pub fn encode_world(world: &SyntheticWorld) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&world.spec).map_err(|e| RunError::Config(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(WORLD_MAGIC);
    buf.extend_from_slice(&WORLD_VERSION.to_le_bytes());
    put_u64(&mut buf, header.len() as u64);
    buf.extend_from_slice(&header);
    put_u64(&mut buf, world.splits.len() as u64);
    for s in &world.splits {
        buf.push(split_tag(s.split));
        put_u64(&mut buf, s.ids.len() as u64);
        s.ids.iter().for_each(|&id| put_u64(&mut buf, id));
        s.labels.iter().for_each(|&l| put_u64(&mut buf, l as u64));
        put_mat(&mut buf, &s.anchors);
        for obs in [&s.obs_a, &s.obs_b] {
            match obs {
                Some(m) => {
                    buf.push(1);
                    put_mat(&mut buf, m);
                }
                None => buf.push(0),
            }
        }
    }
    put_mat(&mut buf, &world.anchor_prototypes);
    put_mat(&mut buf, &world.class_obs_a);
    buf.extend_from_slice(&world.fingerprint());
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| RunError::format(self.path, "unexpected end of file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| RunError::format(self.path, "length out of range"))
    }

    fn mat(&mut self) -> Result<Mat> {
        let rows = self.len()?;
        let cols = self.len()?;
        let n = rows.checked_mul(cols).filter(|&n| n <= self.bytes.len() / 8);
        let n = n.ok_or_else(|| RunError::format(self.path, "matrix too large"))?;
        let data =
            self.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Mat::from_vec(rows, cols, data).map_err(|e| RunError::format(self.path, e.to_string()))
    }
}

pub fn decode_world(bytes: &[u8], path: &Path) -> Result<SyntheticWorld> {
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(8)? != WORLD_MAGIC {
        return Err(RunError::format(path, "not a world file"));
    }
    let version = u32::from_le_bytes(c.take(4)?.try_into().expect("4 bytes"));
    if version != WORLD_VERSION {
        return Err(RunError::format(path, format!("unsupported world version {version}")));
    }
    let header_len = c.len()?;
    let spec: WorldSpec =
        serde_json::from_slice(c.take(header_len)?).map_err(|e| RunError::format(path, format!("header: {e}")))?;
    let count = c.len()?;
    let mut splits = Vec::with_capacity(count);
    for _ in 0..count {
        let tag = c.u8()? as usize;
        let split = *Split::ALL.get(tag).ok_or_else(|| RunError::format(path, format!("unknown split tag {tag}")))?;
        let n = c.len()?;
        let ids = (0..n).map(|_| c.u64()).collect::<Result<Vec<_>>>()?;
        let labels = (0..n).map(|_| c.len()).collect::<Result<Vec<_>>>()?;
        let anchors = c.mat()?;
        let mut opt = || -> Result<Option<Mat>> {
            if c.u8()? == 1 {
                c.mat().map(Some)
            } else {
                Ok(None)
            }
        };
        let obs_a = opt()?;
        let obs_b = opt()?;
        splits.push(SplitData { split, ids, labels, anchors, obs_a, obs_b });
    }
    let anchor_prototypes = c.mat()?;
    let class_obs_a = c.mat()?;
    let stored: [u8; 32] = c.take(32)?.try_into().expect("32 bytes");
    if c.pos != bytes.len() {
        return Err(RunError::format(path, "trailing bytes"));
    }
    if Split::ALL.iter().any(|s| !splits.iter().any(|d| d.split == *s)) {
        return Err(RunError::format(path, "missing split"));
    }
    let world = SyntheticWorld { spec, splits, anchor_prototypes, class_obs_a };
    if world.fingerprint() != stored {
        return Err(RunError::format(path, "fingerprint mismatch"));
    }
    Ok(world)
}

pub fn write_world(path: &Path, world: &SyntheticWorld) -> Result<()> {
    write_file(path, &encode_world(world)?)
}

pub fn read_world(path: &Path) -> Result<SyntheticWorld> {
    decode_world(&read_file(path)?, path)
}

// ---------------------------------------------------------------- checkpoints

/// A header of `key value` lines and named row-major tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Vec<(String, String)>,
    pub tensors: Vec<(String, Mat)>,
}

impl Checkpoint {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(CKPT_TAG);
        s.push('\n');
        for (k, v) in &self.header {
            s.push_str(&format!("{k} {v}\n"));
        }
        for (name, m) in &self.tensors {
            s.push_str(&format!("tensor {name} {} {}\n", m.rows(), m.cols()));
            for row in m.iter_rows() {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                s.push_str(&cells.join(" "));
                s.push('\n');
            }
        }
        s.push_str("end\n");
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Checkpoint> {
        let bad = |msg: String| RunError::format(path, msg);
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, CKPT_TAG)) => {}
            _ => return Err(bad(format!("missing `{CKPT_TAG}` tag"))),
        }
        let mut ck = Checkpoint { header: Vec::new(), tensors: Vec::new() };
        while let Some((no, line)) = lines.next() {
            let line_no = no + 1;
            if line == "end" {
                return Ok(ck);
            }
            let (key, rest) =
                line.split_once(' ').ok_or_else(|| bad(format!("line {line_no}: expected `key value`")))?;
            if key != "tensor" {
                ck.header.push((key.to_string(), rest.to_string()));
                continue;
            }
            let fields: Vec<&str> = rest.split(' ').collect();
            let [name, rows, cols] = fields[..] else {
                return Err(bad(format!("line {line_no}: expected `tensor name rows cols`")));
            };
            let dim = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("line {line_no}: bad dimension `{s}`")));
            let (rows, cols) = (dim(rows)?, dim(cols)?);
            let mut data = Vec::with_capacity(rows.saturating_mul(cols).min(1 << 20));
            for _ in 0..rows {
                let (no, row) = lines.next().ok_or_else(|| bad(format!("tensor {name}: truncated")))?;
                let before = data.len();
                for cell in row.split(' ').filter(|c| !c.is_empty()) {
                    data.push(cell.parse::<f64>().map_err(|_| bad(format!("line {}: bad number `{cell}`", no + 1)))?);
                }
                if data.len() - before != cols {
                    return Err(bad(format!("line {}: expected {cols} values", no + 1)));
                }
            }
            let m = Mat::from_vec(rows, cols, data).map_err(|e| bad(e.to_string()))?;
            ck.tensors.push((name.to_string(), m));
        }
        Err(bad("missing `end` line".into()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_text().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
        Checkpoint::parse(&text, path)
    }

    fn expect_kind(&self, kind: &str, path: &Path) -> Result<()> {
        match self.get("kind") {
            Some(k) if k == kind => Ok(()),
            other => Err(RunError::format(path, format!("expected kind `{kind}`, found {other:?}"))),
        }
    }
}

fn modality_name(m: Modality) -> &'static str {
    match m {
        Modality::Anchor => "anchor",
        Modality::A => "a",
        Modality::B => "b",
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(" ")
}

fn layer_tensors(e: &Encoder) -> Vec<(String, Mat)> {
    let mut out = Vec::new();
    for (l, (w, b)) in e.mlp.weights.iter().zip(&e.mlp.biases).enumerate() {
        out.push((format!("w{l}"), w.clone()));
        out.push((format!("b{l}"), b.clone()));
    }
    out
}

pub fn encoder_checkpoint(e: &Encoder) -> Checkpoint {
    Checkpoint {
        header: vec![
            ("kind".into(), "encoder".into()),
            ("modality".into(), modality_name(e.modality).into()),
            ("dim".into(), e.embed_dim().to_string()),
            ("widths".into(), join(&e.mlp.widths)),
            ("frozen".into(), e.frozen.to_string()),
        ],
        tensors: layer_tensors(e),
    }
}

fn take_from(tensors: Vec<(String, Mat)>) -> impl FnMut(&str) -> bridge_core::Result<Mat> {
    let mut map: std::collections::BTreeMap<String, Mat> = tensors.into_iter().collect();
    move |name: &str| map.remove(name).ok_or_else(|| bridge_core::Error::InvalidSpec(format!("missing tensor {name}")))
}

pub fn encoder_from_checkpoint(ck: Checkpoint, path: &Path) -> Result<Encoder> {
    ck.expect_kind("encoder", path)?;
    let modality = match ck.get("modality") {
        Some("anchor") => Modality::Anchor,
        Some("a") => Modality::A,
        Some("b") => Modality::B,
        other => return Err(RunError::format(path, format!("unknown modality {other:?}"))),
    };
    let frozen = ck.get("frozen") == Some("true");
    let widths = ck.get("widths").unwrap_or_default().to_string();
    let mlp = mlp_from(&mut take_from(ck.tensors), "", true).map_err(|e| RunError::format(path, e.to_string()))?;
    if join(&mlp.widths) != widths {
        return Err(RunError::format(path, format!("tensors give widths {:?}, header says `{widths}`", mlp.widths)));
    }
    Ok(Encoder { modality, mlp, frozen })
}

pub fn proxy_checkpoint(p: &ProxyPredictor) -> Checkpoint {
    Checkpoint {
        header: vec![
            ("kind".into(), "proxy".into()),
            ("proxy".into(), p.kind().name().into()),
            ("dim".into(), p.embed_dim().to_string()),
        ],
        tensors: p.tensors(),
    }
}

pub fn proxy_from_checkpoint(ck: Checkpoint, path: &Path) -> Result<ProxyPredictor> {
    ck.expect_kind("proxy", path)?;
    let name = ck.get("proxy").unwrap_or_default();
    let kind =
        ProxyKind::from_name(name).ok_or_else(|| RunError::format(path, format!("unknown proxy kind `{name}`")))?;
    let p = ProxyPredictor::from_tensors(kind, ck.tensors).map_err(|e| RunError::format(path, e.to_string()))?;
    if ck.header.iter().any(|(k, v)| k == "dim" && *v != p.embed_dim().to_string()) {
        return Err(RunError::format(path, "dim header disagrees with the tensors"));
    }
    Ok(p)
}

// ---------------------------------------------------------------- tables and logs

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| RunError::Config(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| RunError::Config(format!("csv: {e}")))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_file(path, &csv_bytes(rows)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| RunError::Config(format!("json: {e}")))?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut bytes = Vec::new();
    for r in records {
        serde_json::to_writer(&mut bytes, r).map_err(|e| RunError::Config(format!("json: {e}")))?;
        bytes.write_all(b"\n").expect("writing to a Vec cannot fail");
    }
    write_file(path, &bytes)
}
