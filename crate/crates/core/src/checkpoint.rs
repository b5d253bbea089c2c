//! Binary checkpoint container.
//!
//! Layout: magic, format version, then length-prefixed config text and
//! vocabulary symbols, step and seed, and one record per parameter holding
//! its name, flags, initializer, shape and the value / Adam moments / EMA payloads as
//! little-endian `f64`. Integers are little-endian `u64`.

use std::path::Path;

use htr_autograd::Tensor;

use crate::config::Config;
use crate::error::{CheckpointErrorKind as Kind, HtrError, Result};
use crate::nn::{Init, ParamKind, ParamSpec, ParamStore};
use crate::train::TrainState;
use crate::vocab::CharVocab;

pub const MAGIC: &[u8; 8] = b"HTRCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub vocab: CharVocab,
    pub state: TrainState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn floats(&mut self, t: &Tensor) {
        for x in t.data() {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(HtrError::checkpoint(Kind::Truncated, format!("needed {n} bytes at offset {}", self.pos)));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > self.buf.len() as u64 {
            return Err(HtrError::checkpoint(Kind::Truncated, format!("length {n} exceeds the file")));
        }
        Ok(n as usize)
    }
    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| HtrError::checkpoint(Kind::Malformed, "string is not UTF-8"))
    }
    fn floats(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| HtrError::checkpoint(Kind::Malformed, "tensor too large"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::new(shape, data))
    }
}

fn kind_code(k: ParamKind) -> u8 {
    match k {
        ParamKind::Weight => 0,
        ParamKind::NoDecay => 1,
        ParamKind::Buffer => 2,
    }
}

fn write_init(w: &mut Writer, init: Init) {
    let (tag, x) = match init {
        Init::Zeros => (0u8, 0.0),
        Init::Const(c) => (1, c),
        Init::Normal(std) => (2, std),
        Init::Uniform(b) => (3, b),
    };
    w.0.push(tag);
    w.0.extend_from_slice(&x.to_le_bytes());
}

fn read_init(r: &mut Reader) -> Result<Init> {
    let tag = r.u8()?;
    let x = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
    match tag {
        0 => Ok(Init::Zeros),
        1 => Ok(Init::Const(x)),
        2 => Ok(Init::Normal(x)),
        3 => Ok(Init::Uniform(x)),
        _ => Err(HtrError::checkpoint(Kind::Malformed, format!("unknown initializer {tag}"))),
    }
}

fn kind_from(code: u8) -> Result<ParamKind> {
    match code {
        0 => Ok(ParamKind::Weight),
        1 => Ok(ParamKind::NoDecay),
        2 => Ok(ParamKind::Buffer),
        _ => Err(HtrError::checkpoint(Kind::Malformed, format!("unknown parameter kind {code}"))),
    }
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&VERSION.to_le_bytes());
    w.bytes(ck.config.to_toml().as_bytes());
    w.bytes(ck.vocab.symbols().as_bytes());
    let s = &ck.state;
    w.u64(s.step as u64);
    w.u64(s.seed);
    w.u64(s.params.len() as u64);
    for (i, spec) in s.params.specs().iter().enumerate() {
        w.bytes(spec.name.as_bytes());
        w.0.push(kind_code(spec.kind));
        w.0.push(u8::from(spec.train_only));
        write_init(&mut w, spec.init);
        w.u64(spec.shape.len() as u64);
        for &d in &spec.shape {
            w.u64(d as u64);
        }
        w.floats(&s.params.values()[i]);
        w.floats(&s.adam_m[i]);
        w.floats(&s.adam_v[i]);
        w.floats(&s.ema[i]);
    }
    w.0
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(MAGIC.len()).map_err(|_| HtrError::checkpoint(Kind::Version, "file too short for a header"))?;
    if magic != MAGIC {
        return Err(HtrError::checkpoint(Kind::Version, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(HtrError::checkpoint(Kind::Version, format!("format version {version}, expected {VERSION}")));
    }
    let config = Config::from_toml(&r.string()?)
        .map_err(|e| HtrError::checkpoint(Kind::Malformed, format!("stored config: {e}")))?;
    let vocab = CharVocab::from_symbols(&r.string()?)
        .map_err(|e| HtrError::checkpoint(Kind::Malformed, format!("stored vocabulary: {e}")))?;
    let step = r.u64()? as usize;
    let seed = r.u64()?;
    let count = r.len()?;
    let mut specs = Vec::with_capacity(count);
    let (mut values, mut m, mut v, mut ema) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..count {
        let name = r.string()?;
        let kind = kind_from(r.u8()?)?;
        let train_only = r.u8()? != 0;
        let init = read_init(&mut r)?;
        let ndim = r.len()?;
        let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        values.push(r.floats(&shape)?);
        m.push(r.floats(&shape)?);
        v.push(r.floats(&shape)?);
        ema.push(r.floats(&shape)?);
        specs.push(ParamSpec {
            name,
            shape,
            init,
            kind,
            train_only,
        });
    }
    if r.pos != buf.len() {
        return Err(HtrError::checkpoint(Kind::Malformed, "trailing bytes after the last tensor"));
    }
    Ok(Checkpoint {
        config,
        vocab,
        state: TrainState {
            step,
            seed,
            params: ParamStore::from_parts(specs, values),
            adam_m: m,
            adam_v: v,
            ema,
        },
    })
}

pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode(ck)).map_err(|e| HtrError::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| HtrError::io(path, e))?;
    decode(&buf)
}

/// Which stored tensors to take as parameter values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weights {
    Raw,
    Ema,
}

/// Parameters for a model declaring `specs`, matched by name. Stored
/// training-only tensors the model does not declare are skipped; every
/// declared parameter must be present with the same shape.
pub fn params_for(ck: &Checkpoint, specs: &[ParamSpec], which: Weights) -> Result<ParamStore> {
    let stored = &ck.state.params;
    let mut values = Vec::with_capacity(specs.len());
    for spec in specs {
        let Some(id) = stored.find(&spec.name) else {
            return Err(HtrError::checkpoint(Kind::Shape, format!("parameter {} is missing", spec.name)));
        };
        let have = &stored.spec(id).shape;
        if *have != spec.shape {
            return Err(HtrError::checkpoint(
                Kind::Shape,
                format!("parameter {} has shape {have:?}, model expects {:?}", spec.name, spec.shape),
            ));
        }
        values.push(match which {
            Weights::Raw => stored.value(id).clone(),
            Weights::Ema => ck.state.ema[id.index()].clone(),
        });
    }
    if let Some(extra) = stored
        .specs()
        .iter()
        .find(|s| !s.train_only && !specs.iter().any(|t| t.name == s.name))
    {
        return Err(HtrError::checkpoint(Kind::Shape, format!("unexpected parameter {}", extra.name)));
    }
    Ok(ParamStore::from_parts(specs.to_vec(), values))
}
