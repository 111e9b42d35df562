//! The `EPCLWGT1` weight container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic    8 bytes  "EPCLWGT1"
//! version  u32
//! count    u32
//! count × entry:
//!   name_len u16, name (UTF-8)
//!   frozen   u8   (0 or 1)
//!   dtype    u8   (0 = f32, 0x7f = UTF-8 metadata blob)
//!   rank     u8
//!   dims     rank × u32
//!   zero padding up to the next 64-byte file offset
//!   payload  numel × 4 bytes (f32) or dims[0] bytes (metadata)
//! ```
//!
//! Metadata (source tag, width, layer count, ...) travels as a single
//! `key=value` text entry named [`META_NAME`].

use std::fmt::Write as _;
use std::path::Path;

use super::{TransformerConfig, BACKBONE_PREFIX, INPUT_DROPOUT};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"EPCLWGT1";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_META: u8 = 0x7f;
pub const META_NAME: &str = "__meta__";
const ALIGN: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct ContainerMeta {
    pub version: u32,
    pub source: String,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl ContainerMeta {
    pub fn for_config(cfg: &TransformerConfig, source: impl Into<String>) -> Self {
        Self {
            version: FORMAT_VERSION,
            source: source.into(),
            width: cfg.width,
            layers: cfg.layers,
            heads: cfg.heads,
            mlp_ratio: cfg.mlp_ratio,
        }
    }

    pub fn transformer_config(&self) -> TransformerConfig {
        TransformerConfig {
            layers: self.layers,
            width: self.width,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            input_dropout: INPUT_DROPOUT,
        }
    }

    fn encode(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "source={}", self.source.replace('\n', " "));
        let _ = writeln!(s, "width={}", self.width);
        let _ = writeln!(s, "layers={}", self.layers);
        let _ = writeln!(s, "heads={}", self.heads);
        let _ = writeln!(s, "mlp_ratio={}", self.mlp_ratio);
        s
    }

    fn decode(text: &str, version: u32) -> Result<Self> {
        let mut meta = Self {
            version,
            source: String::new(),
            width: 0,
            layers: 0,
            heads: 0,
            mlp_ratio: 0,
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(META_NAME.to_string(), format!("bad metadata line `{line}`")))?;
            let num = || {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::format(META_NAME.to_string(), format!("`{k}` is not an integer: `{v}`")))
            };
            match k.trim() {
                "source" => meta.source = v.to_string(),
                "width" => meta.width = num()?,
                "layers" => meta.layers = num()?,
                "heads" => meta.heads = num()?,
                "mlp_ratio" => meta.mlp_ratio = num()?,
                _ => {}
            }
        }
        Ok(meta)
    }
}

/// Named f32 tensors with frozen flags plus model metadata.
#[derive(Clone, Debug)]
pub struct WeightContainer {
    pub meta: ContainerMeta,
    pub store: ParamStore<f32>,
}

fn pad_to(buf: &mut Vec<u8>, align: usize) {
    let rem = buf.len() % align;
    if rem != 0 {
        buf.resize(buf.len() + align - rem, 0);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, ctx: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                ctx.to_string(),
                format!("truncated: need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, ctx: &str) -> Result<u8> {
        Ok(self.take(1, ctx)?[0])
    }

    fn u16(&mut self, ctx: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, ctx)?.try_into().unwrap()))
    }

    fn u32(&mut self, ctx: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, ctx)?.try_into().unwrap()))
    }

    fn align(&mut self, ctx: &str) -> Result<()> {
        let rem = self.pos % ALIGN;
        if rem != 0 {
            self.take(ALIGN - rem, ctx)?;
        }
        Ok(())
    }
}

impl WeightContainer {
    pub fn new(meta: ContainerMeta, store: ParamStore<f32>) -> Self {
        Self { meta, store }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&((self.store.len() + 1) as u32).to_le_bytes());

        let meta = self.meta.encode();
        write_header(&mut buf, META_NAME, true, DTYPE_META, &[meta.len()])?;
        pad_to(&mut buf, ALIGN);
        buf.extend_from_slice(meta.as_bytes());

        for (name, t) in self.store.iter() {
            write_header(&mut buf, name, !t.requires_grad(), DTYPE_F32, t.shape())?;
            pad_to(&mut buf, ALIGN);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Parses a container and checks backbone tensors against the declared
    /// metadata.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "header").ok() != Some(MAGIC.as_slice()) {
            return Err(Error::format(None, "bad magic, not an EPCLWGT1 file"));
        }
        let version = r.u32("header")?;
        if version != FORMAT_VERSION {
            return Err(Error::format(None, format!("unsupported version {version}")));
        }
        let count = r.u32("header")? as usize;
        let mut meta = None;
        let mut store = ParamStore::new();
        for i in 0..count {
            let ctx = format!("entry #{i}");
            let len = r.u16(&ctx)? as usize;
            let name = std::str::from_utf8(r.take(len, &ctx)?)
                .map_err(|_| Error::format(ctx.clone(), "name is not UTF-8"))?
                .to_string();
            let frozen = r.u8(&name)?;
            let dtype = r.u8(&name)?;
            let rank = r.u8(&name)? as usize;
            let dims = (0..rank).map(|_| r.u32(&name).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if frozen > 1 {
                return Err(Error::format(name, format!("frozen flag must be 0 or 1, got {frozen}")));
            }
            r.align(&name)?;
            match dtype {
                DTYPE_META => {
                    if name != META_NAME || rank != 1 {
                        return Err(Error::format(name, "metadata entry must be `__meta__` with rank 1"));
                    }
                    let text = std::str::from_utf8(r.take(dims[0], &name)?)
                        .map_err(|_| Error::format(name.clone(), "metadata is not UTF-8"))?;
                    meta = Some(ContainerMeta::decode(text, version)?);
                }
                DTYPE_F32 => {
                    let numel: usize = dims.iter().product();
                    let raw = r.take(numel * 4, &name)?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    let t = Tensor::new(dims, data)?.with_requires_grad(frozen == 0);
                    store
                        .insert(name.clone(), t)
                        .map_err(|_| Error::format(name, "duplicate tensor name"))?;
                }
                other => return Err(Error::format(name, format!("unknown dtype code {other}"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format(None, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let meta = meta.ok_or_else(|| Error::format(META_NAME.to_string(), "metadata entry missing"))?;
        let c = Self { meta, store };
        c.validate()?;
        Ok(c)
    }

    /// Checks that every backbone tensor implied by the metadata is present
    /// with the right shape, and that no stray backbone tensors exist.
    pub fn validate(&self) -> Result<()> {
        let cfg = self.meta.transformer_config();
        if cfg.width == 0 || cfg.heads == 0 || cfg.width % cfg.heads != 0 {
            return Err(Error::format(
                META_NAME.to_string(),
                format!("width {} incompatible with {} heads", cfg.width, cfg.heads),
            ));
        }
        let expected = cfg.expected_tensors();
        for (name, shape) in &expected {
            match self.store.by_name(name) {
                None => return Err(Error::format(name.clone(), "missing backbone tensor")),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::format(
                        name.clone(),
                        format!(
                            "shape {:?} inconsistent with declared width {} (expected {shape:?})",
                            t.shape(),
                            cfg.width
                        ),
                    ))
                }
                Some(_) => {}
            }
        }
        for (name, _) in self.store.iter() {
            if name.starts_with(BACKBONE_PREFIX) && !expected.iter().any(|(n, _)| n == name) {
                return Err(Error::format(name.to_string(), "unexpected backbone tensor"));
            }
        }
        Ok(())
    }

    /// One line per tensor: name, shape, frozen flag, element count.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# EPCLWGT1 v{} source={} width={} layers={} heads={} mlp_ratio={}",
            self.meta.version, self.meta.source, self.meta.width, self.meta.layers, self.meta.heads, self.meta.mlp_ratio
        );
        let _ = writeln!(s, "name\tshape\tfrozen\tnumel");
        for (name, t) in self.store.iter() {
            let shape = t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x");
            let _ = writeln!(s, "{name}\t{shape}\t{}\t{}", !t.requires_grad(), t.numel());
        }
        s
    }
}

fn write_header(buf: &mut Vec<u8>, name: &str, frozen: bool, dtype: u8, dims: &[usize]) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::format(name.to_string(), "name too long"))?;
    let rank = u8::try_from(dims.len()).map_err(|_| Error::format(name.to_string(), "rank too large"))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(frozen as u8);
    buf.push(dtype);
    buf.push(rank);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::format(name.to_string(), "dimension exceeds u32"))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Transformer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> WeightContainer {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let cfg = TransformerConfig {
            layers: 1,
            width: 4,
            heads: 2,
            mlp_ratio: 2,
            input_dropout: 0.3,
        };
        Transformer::new(&mut store, cfg.clone(), &mut rng).unwrap();
        let extra = Tensor::from_fn(vec![2, 3], |i| i as f32 - 2.5).with_requires_grad(true);
        store.insert("head.weight", extra).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).starts_with(BACKBONE_PREFIX) {
                store.set_frozen(id, true);
            }
        }
        WeightContainer::new(ContainerMeta::for_config(&cfg, "unit-test"), store)
    }

    #[test]
    fn payloads_are_aligned() {
        let bytes = sample().to_bytes().unwrap();
        // first entry header starts at 16; its payload must sit on a 64-byte boundary
        assert_eq!(&bytes[..8], MAGIC);
        let c = WeightContainer::from_bytes(&bytes).unwrap();
        assert_eq!(c.meta.source, "unit-test");
        let name_len = u16::from_le_bytes([bytes[16], bytes[17]]) as usize;
        let after_header = 16 + 2 + name_len + 3 + 4;
        assert!(after_header <= 64);
        assert_eq!(&bytes[64..64 + 7], b"source=");
    }

    #[test]
    fn truncation_names_the_tensor() {
        let bytes = sample().to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 3];
        let err = WeightContainer::from_bytes(cut).unwrap_err().to_string();
        assert!(err.contains("head.weight") && err.contains("truncated"), "{err}");
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(WeightContainer::from_bytes(&bytes).unwrap_err().to_string().contains("magic"));
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8] = 9;
        assert!(WeightContainer::from_bytes(&bytes).unwrap_err().to_string().contains("version"));
    }
}
