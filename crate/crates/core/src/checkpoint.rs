//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "APE1" | u32 version | u32 sections
//! section: u32 name_len | name | u32 entries
//! entry:   u32 name_len | name | u8 kind
//!          kind 0: u32 rank | u64 dims[rank] | f32 data[prod(dims)]
//!          kind 1: u64 len  | bytes
//! ```

use std::fs;
use std::path::Path;

use ape_tensor::{OptimizerState, ParamStore, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"APE1";
pub const VERSION: u32 = 1;

/// Section names this format version understands.
pub const SECTIONS: &[&str] = &[
    "meta",
    "encoder",
    "projection",
    "key_encoder",
    "queue",
    "world_model",
    "actor",
    "critic",
    "critic_ema",
    "optimizer",
    "scheduler",
    "rng",
    "trainer",
];

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    Tensor(Tensor<f32>),
    Bytes(Vec<u8>),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Section {
    pub name: String,
    pub entries: Vec<(String, Entry)>,
}

impl Section {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            entries: Vec::new(),
        }
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.entries.push((name.into(), Entry::Tensor(t)));
    }

    pub fn push_bytes(&mut self, name: impl Into<String>, b: Vec<u8>) {
        self.entries.push((name.into(), Entry::Bytes(b)));
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        match self.get(name) {
            Some(Entry::Tensor(t)) => Ok(t),
            _ => Err(Error::Checkpoint(format!("section `{}` has no tensor `{name}`", self.name))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name) {
            Some(Entry::Bytes(b)) => Ok(b),
            _ => Err(Error::Checkpoint(format!("section `{}` has no blob `{name}`", self.name))),
        }
    }

    pub fn from_store(name: &str, store: &ParamStore<f32>) -> Self {
        let mut s = Self::new(name);
        for (n, v) in store.iter() {
            s.push_tensor(n, v.clone());
        }
        s
    }

    /// Copies every parameter of `store` from this section by name.
    /// Missing or mis-shaped entries are all reported together.
    pub fn load_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let mut problems = Vec::new();
        let mut values = Vec::new();
        for i in 0..store.len() {
            let name = store.name(i);
            match self.get(name) {
                Some(Entry::Tensor(t)) if t.shape() == store.value(i).shape() => values.push((i, t.clone())),
                Some(Entry::Tensor(t)) => problems.push(format!(
                    "{name}: checkpoint {:?} vs model {:?}",
                    t.shape(),
                    store.value(i).shape()
                )),
                _ => problems.push(format!("{name}: missing")),
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(format!(
                "section `{}` incompatible: {}",
                self.name,
                problems.join("; ")
            )));
        }
        for (i, t) in values {
            store.set(i, t)?;
        }
        Ok(())
    }

    /// Stores optimizer moments under `prefix`, skipping absent ones.
    pub fn push_optimizer(&mut self, prefix: &str, state: &OptimizerState<f32>) {
        self.push_bytes(format!("{prefix}.step"), state.step_count.to_le_bytes().to_vec());
        self.push_bytes(format!("{prefix}.len"), (state.first.len() as u64).to_le_bytes().to_vec());
        for (kind, moments) in [("m", &state.first), ("v", &state.second)] {
            for (i, m) in moments.iter().enumerate() {
                if let Some(t) = m {
                    self.push_tensor(format!("{prefix}.{kind}.{i}"), t.clone());
                }
            }
        }
    }

    pub fn read_optimizer(&self, prefix: &str) -> Result<OptimizerState<f32>> {
        let u64_of = |b: &[u8]| -> Result<u64> {
            Ok(u64::from_le_bytes(
                b.try_into().map_err(|_| Error::Checkpoint(format!("bad integer in `{prefix}`")))?,
            ))
        };
        let step_count = u64_of(self.bytes(&format!("{prefix}.step"))?)?;
        let len = u64_of(self.bytes(&format!("{prefix}.len"))?)? as usize;
        let read = |kind: &str| -> Vec<Option<Tensor<f32>>> {
            (0..len)
                .map(|i| match self.get(&format!("{prefix}.{kind}.{i}")) {
                    Some(Entry::Tensor(t)) => Some(t.clone()),
                    _ => None,
                })
                .collect()
        };
        Ok(OptimizerState {
            step_count,
            first: read("m"),
            second: read("v"),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub sections: Vec<Section>,
}

/// Bounds-checked little-endian decoder.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("non-UTF-8 name".into()))
    }

    /// Errors unless every byte was consumed.
    pub fn finish(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("{} trailing bytes", self.buf.len() - self.pos)))
        }
    }
}

/// Little-endian encoder matching [`ByteReader`].
#[derive(Clone, Debug, Default)]
pub struct ByteWriter(pub Vec<u8>);

impl ByteWriter {
    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.u64(v.to_bits())
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
        self
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing section `{name}`")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.sections.iter().any(|s| s.name == name)
    }

    /// Adds or replaces a section.
    pub fn put(&mut self, section: Section) {
        match self.sections.iter_mut().find(|s| s.name == section.name) {
            Some(s) => *s = section,
            None => self.sections.push(section),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            put_str(&mut out, &s.name);
            out.extend_from_slice(&(s.entries.len() as u32).to_le_bytes());
            for (name, e) in &s.entries {
                put_str(&mut out, name);
                match e {
                    Entry::Tensor(t) => {
                        out.push(0);
                        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
                        for &d in t.shape() {
                            out.extend_from_slice(&(d as u64).to_le_bytes());
                        }
                        for v in t.data() {
                            out.extend_from_slice(&v.to_le_bytes());
                        }
                    }
                    Entry::Bytes(b) => {
                        out.push(1);
                        out.extend_from_slice(&(b.len() as u64).to_le_bytes());
                        out.extend_from_slice(b);
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader { buf, pos: 0 };
        if r.take(4).ok() != Some(&MAGIC[..]) {
            return Err(Error::Checkpoint("bad magic (not an APE1 checkpoint)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (this build reads {VERSION})"
            )));
        }
        let count = r.u32()?;
        let mut sections = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            if !SECTIONS.contains(&name.as_str()) {
                return Err(Error::Checkpoint(format!("unknown section `{name}` for version {VERSION}")));
            }
            let n = r.u32()?;
            let mut entries = Vec::new();
            for _ in 0..n {
                let ename = r.string()?;
                let entry = match r.u8()? {
                    0 => {
                        let rank = r.u32()? as usize;
                        let shape = (0..rank).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
                        let len = shape
                            .iter()
                            .try_fold(1usize, |a, &d| a.checked_mul(d))
                            .and_then(|n| n.checked_mul(4))
                            .ok_or_else(|| Error::Checkpoint("tensor size overflow".into()))?;
                        let data = r
                            .take(len)?
                            .chunks_exact(4)
                            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                            .collect();
                        Entry::Tensor(Tensor::new(&shape, data)?)
                    }
                    1 => {
                        let len = r.u64()? as usize;
                        Entry::Bytes(r.take(len)?.to_vec())
                    }
                    k => return Err(Error::Checkpoint(format!("unknown entry kind {k}"))),
                };
                entries.push((ename, entry));
            }
            sections.push(Section { name, entries });
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
