//! Versioned binary container for networks and perturbations.
//!
//! Layout, all integers little-endian:
//! magic `SUPF`, u32 version, 4-byte kind tag, u32 config length and that
//! many bytes of UTF-8 `key=value` lines, u32 record count, then per record
//! u32 name length, name bytes, u32 rank, u64 extents, f64 payload.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use supforge_tensor::Tensor;

use crate::attack::PerturbationPair;
use crate::error::{Error, Result};
use crate::net::{ConvMode, CostMode, StereoNet, StereoNetConfig};

pub const MAGIC: &[u8; 4] = b"SUPF";
pub const VERSION: u32 = 1;
pub const KIND_NET: &[u8; 4] = b"SNET";
pub const KIND_SUP: &[u8; 4] = b"SUPP";

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: [u8; 4],
    pub config: BTreeMap<String, String>,
    pub records: Vec<(String, Tensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl Container {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.kind);
        let text: String = self.config.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        put_u32(&mut out, text.len());
        out.extend_from_slice(text.as_bytes());
        put_u32(&mut out, self.records.len());
        for (name, t) in &self.records {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { path, bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a SUPF container"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let kind: [u8; 4] = r.take(4)?.try_into().expect("four bytes");
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format(path, "config is not UTF-8"))?;
        let mut config = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("bad config line {line:?}")))?;
            config.insert(k.to_string(), v.to_string());
        }
        let n = r.u32()? as usize;
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(path, "record name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = r
                .take(
                    numel
                        .checked_mul(8)
                        .ok_or_else(|| Error::format(path, "record too large"))?,
                )?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("eight bytes")))
                .collect();
            records.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes"));
        }
        Ok(Container { kind, config, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(path, &bytes)
    }

    fn expect_kind(&self, path: &Path, kind: &[u8; 4]) -> Result<()> {
        if &self.kind != kind {
            return Err(Error::format(
                path,
                format!(
                    "expected a {} container, found {}",
                    String::from_utf8_lossy(kind),
                    String::from_utf8_lossy(&self.kind)
                ),
            ));
        }
        Ok(())
    }

    fn get<T: std::str::FromStr>(&self, path: &Path, key: &str) -> Result<T> {
        let raw = self
            .config
            .get(key)
            .ok_or_else(|| Error::format(path, format!("missing config key {key}")))?;
        raw.parse()
            .map_err(|_| Error::format(path, format!("bad value {raw:?} for {key}")))
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
}

impl StereoNet {
    pub fn to_container(&self) -> Container {
        let c = &self.config;
        let layers: Vec<String> = c.deformable_layers.iter().map(|l| l.to_string()).collect();
        let config = [
            ("encoder_layers", c.encoder_layers.to_string()),
            ("channels", c.channels.to_string()),
            ("downsample", c.downsample.to_string()),
            ("d_max", c.d_max.to_string()),
            ("cost_mode", c.cost_mode.as_str().to_string()),
            ("conv_mode", c.conv_mode.as_str().to_string()),
            ("deformable_layers", layers.join(",")),
            ("use_isa", c.use_isa.to_string()),
            ("seed", c.seed.to_string()),
            ("trained", self.trained.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Container {
            kind: *KIND_NET,
            config,
            records: self.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        }
    }

    pub fn from_container(path: &Path, c: &Container) -> Result<Self> {
        c.expect_kind(path, KIND_NET)?;
        let mode = |key: &str| -> Result<String> { c.get(path, key) };
        let cost_mode = CostMode::parse(&mode("cost_mode")?).ok_or_else(|| Error::format(path, "bad cost_mode"))?;
        let conv_mode = ConvMode::parse(&mode("conv_mode")?).ok_or_else(|| Error::format(path, "bad conv_mode"))?;
        let layers: String = c.get(path, "deformable_layers")?;
        let deformable_layers = layers
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::format(path, "bad deformable_layers")))
            .collect::<Result<BTreeSet<usize>>>()?;
        let config = StereoNetConfig {
            encoder_layers: c.get(path, "encoder_layers")?,
            channels: c.get(path, "channels")?,
            downsample: c.get(path, "downsample")?,
            d_max: c.get(path, "d_max")?,
            cost_mode,
            conv_mode,
            deformable_layers,
            use_isa: c.get(path, "use_isa")?,
            seed: c.get(path, "seed")?,
        };
        let template = StereoNet::init(&config)?;
        let params: BTreeMap<String, Tensor> = c.records.iter().cloned().collect();
        let expected: Vec<(&String, &[usize])> = template.params.iter().map(|(k, v)| (k, v.shape())).collect();
        let found: Vec<(&String, &[usize])> = params.iter().map(|(k, v)| (k, v.shape())).collect();
        if expected != found {
            return Err(Error::format(path, "parameter records do not match the stored config"));
        }
        Ok(StereoNet {
            config,
            params,
            trained: c.get(path, "trained")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(path, &Container::load(path)?)
    }
}

impl PerturbationPair {
    /// `meta` entries are stored alongside the budget and tile size.
    pub fn to_container(&self, meta: &BTreeMap<String, String>) -> Container {
        let mut config = meta.clone();
        config.insert("epsilon".into(), self.epsilon.to_string());
        config.insert("tile_h".into(), self.tile_h.to_string());
        config.insert("tile_w".into(), self.tile_w.to_string());
        Container {
            kind: *KIND_SUP,
            config,
            records: vec![("left".into(), self.left.clone()), ("right".into(), self.right.clone())],
        }
    }

    pub fn from_container(path: &Path, c: &Container) -> Result<Self> {
        c.expect_kind(path, KIND_SUP)?;
        let (tile_h, tile_w): (usize, usize) = (c.get(path, "tile_h")?, c.get(path, "tile_w")?);
        let find = |name: &str| {
            c.records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .filter(|t| t.shape() == [3, tile_h, tile_w])
                .ok_or_else(|| Error::format(path, format!("missing or misshapen {name} tile")))
        };
        Ok(PerturbationPair {
            left: find("left")?,
            right: find("right")?,
            epsilon: c.get(path, "epsilon")?,
            tile_h,
            tile_w,
        })
    }

    pub fn save(&self, path: &Path, meta: &BTreeMap<String, String>) -> Result<()> {
        self.to_container(meta).save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let c = Container::load(path)?;
        let sup = Self::from_container(path, &c)?;
        Ok((sup, c.config))
    }
}
