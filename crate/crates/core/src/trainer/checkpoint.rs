//! Checkpoint container: a text header followed by raw little-endian `f32`
//! payloads.
//!
//! ```text
//! triflow-checkpoint 1
//! step=<n>
//! rng=<seed> <stream> <word_pos>
//! config <lines>
//! <key=value>...
//! tensors <count>
//! <name> <d0,d1,...> <byte offset>...
//! end
//! <payload>
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainConfig;
use crate::config::{split_assignment, RunConfig, MODEL_SECTIONS};
use crate::error::{Error, Result};
use crate::model::VideoFlowNet;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &str = "triflow-checkpoint";
const VERSION: u32 = 1;

/// Position of the data-order stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub rng: RngState,
    pub params: ParamStore<f32>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    /// The model these parameters belong to.
    pub fn model(&self) -> Result<VideoFlowNet<f32>> {
        let mut net = VideoFlowNet::new(self.config.model.clone(), 0)?;
        net.params.load_from(&self.params)?;
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = RunConfig { train: self.config.clone(), ..RunConfig::default() }.to_text(MODEL_SECTIONS);
        let mut header = format!("{MAGIC} {VERSION}\nstep={}\n", self.step);
        header += &format!("rng={} {} {}\n", self.rng.seed, self.rng.stream, self.rng.word_pos);
        header += &format!("config {}\n{cfg}", cfg.lines().count());
        header += &format!("tensors {}\n", self.params.len());
        let mut offset = 0usize;
        for (name, t) in self.params.iter() {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            header += &format!("{name} {} {offset}\n", dims.join(","));
            offset += 4 * t.numel();
        }
        header += "end\n";
        let mut out = header.into_bytes();
        out.reserve(offset);
        for (_, t) in self.params.iter() {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))
        };
        let first = next_line()?;
        if first != format!("{MAGIC} {VERSION}") {
            return Err(bad(format!("unrecognized header `{first}`")));
        }
        let step = next_line()?
            .strip_prefix("step=")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("missing step"))?;
        let rng_line = next_line()?.strip_prefix("rng=").ok_or_else(|| bad("missing rng state"))?;
        let parts: Vec<&str> = rng_line.split(' ').collect();
        let rng = match parts[..] {
            [a, b, c] => RngState {
                seed: a.parse().map_err(|_| bad("bad rng seed"))?,
                stream: b.parse().map_err(|_| bad("bad rng stream"))?,
                word_pos: c.parse().map_err(|_| bad("bad rng position"))?,
            },
            _ => return Err(bad(format!("bad rng line `{rng_line}`"))),
        };
        let count = |line: &str, tag: &str| -> Result<usize> {
            line.strip_prefix(tag).and_then(|s| s.trim().parse().ok()).ok_or_else(|| bad(format!("expected `{tag}<n>`, got `{line}`")))
        };
        let n_cfg = count(next_line()?, "config ")?;
        let mut run = RunConfig::default();
        for _ in 0..n_cfg {
            let (k, v) = split_assignment(next_line()?)?;
            run.set(k, v)?;
        }
        let n_tensors = count(next_line()?, "tensors ")?;
        let mut dir = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let line = next_line()?;
            let fields: Vec<&str> = line.split(' ').collect();
            let [name, dims, offset] = fields[..] else {
                return Err(bad(format!("bad tensor entry `{line}`")));
            };
            let shape: Vec<usize> =
                dims.split(',').map(|d| d.parse().map_err(|_| bad(format!("bad shape in `{line}`")))).collect::<Result<_>>()?;
            let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset in `{line}`")))?;
            dir.push((name.to_string(), shape, offset));
        }
        if next_line()? != "end" {
            return Err(bad("missing end of header"));
        }
        let payload = &bytes[pos..];
        let mut params = ParamStore::new();
        for (name, shape, offset) in dir {
            let n: usize = shape.iter().product();
            let chunk = payload
                .get(offset..offset + 4 * n)
                .ok_or_else(|| bad(format!("payload of `{name}` is truncated")))?;
            let data = chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            params.add(name, Tensor::new(shape, data)?);
        }
        let ckpt = Checkpoint { config: run.train, step, rng, params };
        ckpt.model()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
