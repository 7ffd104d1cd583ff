//! The "NPRP" checkpoint format.
//!
//! Little-endian throughout. Layout:
//!
//! ```text
//! "NPRP" | version u32 | method str | trained u8 | config str
//! | input 3 x u64 | classes u64
//! | schedule: present u8 [steps u64, offset f64, clip 2 x f64, n u64, n x f64]
//! | cursors: n u32, n x (name str, seed u64, stream u64, word_pos u128)
//! | step counts: n u32, n x (store str, u64)
//! | tensors: n u32, n x (name str, kind u8, dtype u8, ndim u32, dims u64.., data)
//! | sha256 of everything above (32 bytes)
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8. Tensor names are
//! `<store>/<param>`; kinds are param, first moment, second moment and
//! buffer. Only dtype 0 (f64) is written.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::{Method, TrainConfig};
use crate::embedding::{EmbeddingMatrix, EmbeddingMode, EMBED};
use crate::error::{Error, Result};
use crate::optim::{Moments, ParamStore};
use crate::rng::StreamCursor;
use crate::schedule::DiscreteSchedule;
use crate::tensor::Tensor;
use crate::trainer::ModelBundle;

pub const MAGIC: &[u8; 4] = b"NPRP";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const DTYPE_F64: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Param = 0,
    First = 1,
    Second = 2,
    Buffer = 3,
}

impl Kind {
    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => Kind::Param,
            1 => Kind::First,
            2 => Kind::Second,
            3 => Kind::Buffer,
            _ => return Err(Error::Format(format!("unknown tensor kind {v}"))),
        })
    }
}

/// A model plus any named stream positions saved with it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub bundle: ModelBundle,
    pub cursors: Vec<(String, StreamCursor)>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend(s.as_bytes());
    }
    fn tensor(&mut self, name: &str, kind: Kind, t: &Tensor) {
        self.str(name);
        self.u8(kind as u8);
        self.u8(DTYPE_F64);
        self.u32(t.ndim() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &x in t.data() {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("size does not fit".into()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("string is not UTF-8".into()))
    }
    fn tensor(&mut self) -> Result<(String, Kind, Tensor)> {
        let name = self.str()?;
        let kind = Kind::from_u8(self.u8()?)?;
        let dtype = self.u8()?;
        if dtype != DTYPE_F64 {
            return Err(Error::Format(format!("tensor `{name}` has unsupported dtype {dtype}")));
        }
        let ndim = self.u32()? as usize;
        let shape = (0..ndim).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= self.buf.len() - self.pos))
            .ok_or_else(|| Error::Format(format!("tensor `{name}` larger than the file")))?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok((name, kind, Tensor::new(&shape, data)?))
    }
}

/// Serializes `bundle` and `cursors`.
pub fn to_bytes(bundle: &ModelBundle, cursors: &[(String, StreamCursor)]) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend(MAGIC);
    w.u32(VERSION);
    w.str(bundle.method().as_str());
    w.u8(bundle.trained as u8);
    w.str(&bundle.config.to_text());
    for d in bundle.input {
        w.u64(d as u64);
    }
    w.u64(bundle.classes as u64);

    match &bundle.schedule {
        Some(s) => {
            w.u8(1);
            w.u64(s.steps() as u64);
            w.f64(s.offset());
            w.f64(s.clip().0);
            w.f64(s.clip().1);
            w.u64(s.alpha_bars().len() as u64);
            for &a in s.alpha_bars() {
                w.f64(a);
            }
        }
        None => w.u8(0),
    }

    w.u32(cursors.len() as u32);
    for (name, c) in cursors {
        w.str(name);
        w.u64(c.seed);
        w.u64(c.stream);
        w.u128(c.word_pos);
    }

    let stores = bundle.stores();
    w.u32(stores.len() as u32);
    for (name, s) in &stores {
        w.str(name);
        w.u64(s.step_count());
    }

    let mut entries = Vec::new();
    for (store, s) in &stores {
        for (p, t) in s.params() {
            let key = format!("{store}/{p}");
            entries.push((key.clone(), Kind::Param, t));
            if let Some(m) = s.moments(p) {
                entries.push((key.clone(), Kind::First, &m.m));
                entries.push((key, Kind::Second, &m.v));
            }
        }
        for (b, t) in s.buffers() {
            entries.push((format!("{store}/{b}"), Kind::Buffer, t));
        }
    }
    w.u32(entries.len() as u32);
    for (name, kind, t) in entries {
        w.tensor(&name, kind, t);
    }

    let digest = Sha256::digest(&w.0);
    w.0.extend(digest.as_slice());
    w.0
}

#[derive(Default)]
struct Loaded {
    params: BTreeMap<String, Tensor>,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
    step: u64,
}

impl Loaded {
    fn into_store(mut self, store: &str) -> Result<ParamStore> {
        let mut s = ParamStore::new();
        for (name, t) in &self.params {
            s.insert(name, t.clone())?;
            match (self.first.remove(name), self.second.remove(name)) {
                (Some(m), Some(v)) => s.set_moments(name, Moments { m, v })?,
                (None, None) => {}
                _ => return Err(Error::Format(format!("`{store}/{name}` has only one moment slot"))),
            }
        }
        if let Some(name) = self.first.keys().chain(self.second.keys()).next() {
            return Err(Error::Format(format!("moments for missing parameter `{store}/{name}`")));
        }
        for (name, t) in self.buffers {
            s.insert_buffer(&name, t)?;
        }
        s.set_step_count(self.step);
        Ok(s)
    }
}

fn same_layout(a: &ParamStore, b: &ParamStore) -> bool {
    let shapes = |s: &ParamStore| -> Vec<(String, Vec<usize>)> {
        s.params()
            .chain(s.buffers())
            .map(|(k, t)| (k.clone(), t.shape().to_vec()))
            .collect()
    };
    shapes(a) == shapes(b)
}

/// Parses a checkpoint. Magic and version are checked before the checksum
/// so that files from newer builds are reported as such.
pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    if buf.len() < MAGIC.len() + 4 || &buf[..4] != MAGIC {
        return Err(Error::Format("not an NPRP checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().expect("length checked"));
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    if buf.len() < 8 + DIGEST_LEN {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let (body, digest) = buf.split_at(buf.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum);
    }

    let mut r = Reader { buf: body, pos: 8 };
    let method: Method = r.str()?.parse()?;
    let trained = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(Error::Format(format!("bad trained flag {v}"))),
    };
    let config = TrainConfig::parse(&r.str()?)?;
    if config.method != method {
        return Err(Error::Format(format!(
            "method tag {method} disagrees with config method {}",
            config.method
        )));
    }
    let input = [r.usize()?, r.usize()?, r.usize()?];
    let classes = r.usize()?;

    let schedule = match r.u8()? {
        0 => None,
        1 => {
            let steps = r.usize()?;
            let offset = r.f64()?;
            let clip = (r.f64()?, r.f64()?);
            let n = r.usize()?;
            if n > body.len() / 8 {
                return Err(Error::Format("schedule table larger than the file".into()));
            }
            let table = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let s = DiscreteSchedule::cosine(steps, offset, clip)?;
            if s.alpha_bars() != table.as_slice() {
                return Err(Error::Format("stored schedule does not match its parameters".into()));
            }
            Some(s)
        }
        v => return Err(Error::Format(format!("bad schedule flag {v}"))),
    };

    let n = r.u32()?;
    let mut cursors = Vec::new();
    for _ in 0..n {
        let name = r.str()?;
        cursors.push((
            name,
            StreamCursor {
                seed: r.u64()?,
                stream: r.u64()?,
                word_pos: r.u128()?,
            },
        ));
    }

    let mut loaded: BTreeMap<String, Loaded> = BTreeMap::new();
    let mut order = Vec::new();
    for _ in 0..r.u32()? {
        let name = r.str()?;
        let step = r.u64()?;
        order.push(name.clone());
        if loaded.insert(name.clone(), Loaded { step, ..Default::default() }).is_some() {
            return Err(Error::Format(format!("store `{name}` listed twice")));
        }
    }
    for _ in 0..r.u32()? {
        let (key, kind, t) = r.tensor()?;
        let (store, param) = key
            .split_once('/')
            .ok_or_else(|| Error::Format(format!("tensor name `{key}` has no store prefix")))?;
        let l = loaded
            .get_mut(store)
            .ok_or_else(|| Error::Format(format!("tensor `{key}` belongs to an unlisted store")))?;
        let slot = match kind {
            Kind::Param => &mut l.params,
            Kind::First => &mut l.first,
            Kind::Second => &mut l.second,
            Kind::Buffer => &mut l.buffers,
        };
        if slot.insert(param.to_string(), t).is_some() {
            return Err(Error::Format(format!("tensor `{key}` appears twice")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes before checksum".into()));
    }

    let mut stores = BTreeMap::new();
    for (name, l) in loaded {
        stores.insert(name.clone(), l.into_store(&name)?);
    }
    let prototype = match config.embedding {
        EmbeddingMode::Prototype => {
            let rows = stores
                .get("embed")
                .ok_or_else(|| Error::Format("missing embedding store".into()))?
                .get(EMBED)?
                .clone();
            Some(EmbeddingMatrix::with_rows(EmbeddingMode::Prototype, rows))
        }
        _ => None,
    };
    let mut bundle = ModelBundle::build(&config, input, classes, prototype)?;
    let expected: Vec<String> = bundle.stores().into_iter().map(|(n, _)| n).collect();
    if expected != order {
        return Err(Error::Format(format!("stores {order:?} do not match the model's {expected:?}")));
    }
    for (name, store) in stores {
        let slot = bundle.store_mut(&name)?;
        if !same_layout(slot, &store) {
            return Err(Error::Format(format!("store `{name}` does not match the model layout")));
        }
        *slot = store;
    }
    if bundle.schedule != schedule {
        return Err(Error::Format("schedule section does not match the config".into()));
    }
    bundle.trained = trained;
    Ok(Checkpoint { bundle, cursors })
}

pub fn save_checkpoint(bundle: &ModelBundle, path: &Path) -> Result<()> {
    save_checkpoint_with(bundle, &[], path)
}

pub fn save_checkpoint_with(bundle: &ModelBundle, cursors: &[(String, StreamCursor)], path: &Path) -> Result<()> {
    fs::write(path, to_bytes(bundle, cursors))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    Ok(load_checkpoint_with(path)?.bundle)
}

pub fn load_checkpoint_with(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}
