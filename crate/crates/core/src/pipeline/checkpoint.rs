//! "SBN1" checkpoint serialization.
//!
//! Layout: magic, u32 LE descriptor length, UTF-8 descriptor (key = value
//! lines), then per parameter block in layer order: u32 rank, u32 dims, μ and
//! ρ as f64 LE, one mask byte per entry, squared-gradient accumulator.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::layers::{Head, Model, ModelSpec, ParamBlock};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SBN1";

/// Which training step produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepLabel {
    Deterministic,
    SparseBayes,
    Member(usize),
}

impl fmt::Display for StepLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepLabel::Deterministic => write!(f, "deterministic"),
            StepLabel::SparseBayes => write!(f, "sparse_bayes"),
            StepLabel::Member(i) => write!(f, "member_{i}"),
        }
    }
}

impl std::str::FromStr for StepLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(StepLabel::Deterministic),
            "sparse_bayes" => Ok(StepLabel::SparseBayes),
            _ => s
                .strip_prefix("member_")
                .and_then(|i| i.parse().ok())
                .map(StepLabel::Member)
                .ok_or_else(|| Error::config("step", format!("unknown step label {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub config: TrainConfig,
    pub step: StepLabel,
    /// Epochs completed.
    pub epoch: usize,
    /// Generator state: draws are keyed by `(rng_seed, epoch, …)`, so the
    /// seed plus `epoch` fully determine where a resumed run continues.
    pub rng_seed: u64,
}

impl Checkpoint {
    pub fn descriptor(&self) -> String {
        let spec = &self.model.spec;
        let mut out = String::new();
        let shape = spec
            .input_shape
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",");
        out.push_str(&format!("layers = {}\n", spec.layers_descriptor()));
        out.push_str(&format!("input_shape = {shape}\n"));
        out.push_str(&format!("head = {}\n", spec.head));
        out.push_str(&format!("step = {}\n", self.step));
        out.push_str(&format!("epoch = {}\n", self.epoch));
        out.push_str(&format!("rng_seed = {}\n", self.rng_seed));
        for (k, v) in self.config.pairs() {
            out.push_str(&format!("train.{k} = {v}\n"));
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let desc = self.descriptor();
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(desc.len() as u32).to_le_bytes())?;
        w.write_all(desc.as_bytes())?;
        let mut buf = Vec::new();
        for b in &self.model.blocks {
            buf.extend_from_slice(&(b.mu.rank() as u32).to_le_bytes());
            for &d in b.mu.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for t in [&b.mu, &b.rho] {
                for v in t.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            buf.extend(b.mask.iter().map(|&m| m as u8));
            for v in b.sq_grad_acc.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut cur = ByteCursor::new(&buf);
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "unknown magic, expected SBN1"));
        }
        let len = cur.u32()? as usize;
        let desc_at = cur.offset();
        let desc = std::str::from_utf8(cur.take(len)?)
            .map_err(|e| Error::format(desc_at + e.valid_up_to() as u64, "descriptor is not UTF-8"))?;
        let fields = Descriptor::parse(desc, desc_at)?;

        let mut tensors = Vec::new();
        while !cur.at_end() {
            let shape = cur.shape()?;
            let n: usize = shape.iter().product();
            let mu = cur.f64s(n)?;
            let rho = cur.f64s(n)?;
            let mask_at = cur.offset();
            let mask = cur
                .take(n)?
                .iter()
                .enumerate()
                .map(|(i, &b)| match b {
                    0 => Ok(false),
                    1 => Ok(true),
                    _ => Err(Error::format(mask_at + i as u64, format!("mask byte {b} is not 0/1"))),
                })
                .collect::<Result<Vec<_>>>()?;
            let acc = cur.f64s(n)?;
            tensors.push((shape, mu, rho, mask, acc));
        }

        let spec = ModelSpec {
            layers: ModelSpec::parse_layers(fields.get("layers")?)?,
            input_shape: parse_list(fields.get("input_shape")?, "input_shape")?,
            head: fields.get("head")?.parse::<Head>()?,
        };
        let template = Model::init(spec.clone(), 0)?;
        if tensors.len() != template.blocks.len() {
            return Err(Error::format(
                buf.len() as u64,
                format!(
                    "checkpoint holds {} blocks, architecture needs {}",
                    tensors.len(),
                    template.blocks.len()
                ),
            ));
        }
        let blocks = template
            .blocks
            .into_iter()
            .zip(tensors)
            .map(|(slot, (shape, mu, rho, mask, acc))| {
                Ok(ParamBlock {
                    mu: Tensor::new(shape.clone(), mu)?,
                    rho: Tensor::new(shape.clone(), rho)?,
                    mask,
                    sq_grad_acc: Tensor::new(shape, acc)?,
                    ..slot
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = Model::from_blocks(spec, blocks)?;

        let mut config = TrainConfig::default_for(model.spec.head);
        for (k, v) in &fields.pairs {
            if let Some(key) = k.strip_prefix("train.") {
                if !config.set(key, v)? {
                    return Err(Error::config(k.clone(), "unknown training key in checkpoint"));
                }
            }
        }
        Ok(Checkpoint {
            model,
            config,
            step: fields.get("step")?.parse()?,
            epoch: parse_num(fields.get("epoch")?, "epoch")?,
            rng_seed: parse_num(fields.get("rng_seed")?, "rng_seed")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes)?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        Self::read_from(&mut f)
    }
}

struct Descriptor {
    pairs: Vec<(String, String)>,
}

impl Descriptor {
    fn parse(text: &str, base: u64) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut at = base;
        for line in text.lines() {
            let t = line.trim();
            if !t.is_empty() {
                let (k, v) = t
                    .split_once('=')
                    .ok_or_else(|| Error::format(at, format!("descriptor line {t:?} lacks '='")))?;
                pairs.push((k.trim().to_string(), v.trim().to_string()));
            }
            at += line.len() as u64 + 1;
        }
        Ok(Descriptor { pairs })
    }

    fn get(&self, key: &str) -> Result<&str> {
        self.pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::config(key, "missing from checkpoint descriptor"))
    }
}

fn parse_num<T: std::str::FromStr>(s: &str, key: &str) -> Result<T> {
    s.parse().map_err(|_| Error::config(key, format!("cannot parse {s:?}")))
}

fn parse_list(s: &str, key: &str) -> Result<Vec<usize>> {
    s.split(',').map(|p| parse_num(p.trim(), key)).collect()
}

/// Bounds-checked little-endian reader that reports byte offsets on failure.
pub(crate) struct ByteCursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteCursor { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos >= self.buf.len()
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.buf.len() as u64,
                format!("truncated: needed {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn shape(&mut self) -> Result<Vec<usize>> {
        let at = self.offset();
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::format(at, format!("implausible tensor rank {rank}")));
        }
        (0..rank).map(|_| self.u32().map(|d| d as usize)).collect()
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.offset(), "length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Head;

    fn sample() -> Checkpoint {
        let spec = ModelSpec::reference_mlp(2, Head::Multiclass { classes: 2 });
        let mut model = Model::init(spec, 3).unwrap();
        model.blocks[0].mask[5] = true;
        model.blocks[0].rho.data_mut()[5] = -2.5;
        model.blocks[0].sq_grad_acc.data_mut()[1] = 0.125;
        Checkpoint {
            model,
            config: TrainConfig::default_for(Head::Multiclass { classes: 2 }),
            step: StepLabel::Member(3),
            epoch: 12,
            rng_seed: 99,
        }
    }

    #[test]
    fn round_trips_bit_exactly() {
        let ck = sample();
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, ck);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = Vec::new();
        sample().write_to(&mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read_from(&mut bad.as_slice()), Err(Error::Format { offset: 0, .. })));
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(Checkpoint::read_from(&mut bytes.as_slice()), Err(Error::Format { .. })));
    }

    #[test]
    fn step_labels_parse() {
        for s in [StepLabel::Deterministic, StepLabel::SparseBayes, StepLabel::Member(4)] {
            assert_eq!(s.to_string().parse::<StepLabel>().unwrap(), s);
        }
    }
}
