//! Single-file binary checkpoints.
//!
//! Layout (little-endian): magic `RATTNCKP`, format version `u32`, SHA-256
//! of the network and training config text, iteration `u64`, the two config
//! texts, sampler state (ChaCha8 seed, stream, word position, epoch order,
//! cursor), the pixel mean, parameters, batch-norm running statistics and
//! momentum buffers. Every string and array is length-prefixed with a `u64`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::RunningStats;
use crate::blocks::ParamStore;
use crate::error::{Error, Result};
use crate::network::{Network, NetworkSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RATTNCKP";
pub const FORMAT_VERSION: u32 = 1;

/// Hash binding a checkpoint to the configs that produced it.
pub fn config_hash(spec_text: &str, train_text: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(spec_text.as_bytes());
    h.update([0u8]);
    h.update(train_text.as_bytes());
    h.finalize().into()
}

pub fn hex(hash: &[u8]) -> String {
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub config_hash: [u8; 32],
    pub spec_text: String,
    pub train_text: String,
    pub rng: RngState,
    pub order: Vec<u32>,
    pub cursor: u64,
    pub mean: Tensor<f32>,
    pub store: ParamStore<f32>,
    pub velocity: Vec<Tensor<f32>>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) {
        self.u64(n as u64);
    }
    fn bytes(&mut self, b: &[u8]) {
        self.len(b.len());
        self.0.extend_from_slice(b);
    }
    fn f32s(&mut self, v: &[f32]) {
        self.len(v.len());
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn tensor(&mut self, t: &Tensor<f32>) {
        self.len(t.shape().len());
        for &d in t.shape() {
            self.len(d);
        }
        self.f32s(t.data());
    }
}

struct Reader<'a>(&'a [u8]);

fn truncated() -> Error {
    Error::Checkpoint("file is truncated".into())
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.0.len() < n {
            return Err(truncated());
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()? as usize;
        if n > self.0.len() * 8 + 64 {
            return Err(truncated());
        }
        Ok(n)
    }
    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))
    }
    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.len()?;
        let raw = self.take(n.checked_mul(4).ok_or_else(truncated)?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let nd = self.len()?;
        let shape = (0..nd).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let data = self.f32s()?;
        Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("bad tensor: {e}")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.0.extend_from_slice(&self.config_hash);
        w.u64(self.iteration);
        w.bytes(self.spec_text.as_bytes());
        w.bytes(self.train_text.as_bytes());
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.len(self.order.len());
        for &i in &self.order {
            w.u32(i);
        }
        w.u64(self.cursor);
        w.tensor(&self.mean);
        w.len(self.store.values().len());
        for (spec, v) in self.store.layout().params().iter().zip(self.store.values()) {
            w.bytes(spec.name.as_bytes());
            w.tensor(v);
        }
        w.len(self.store.all_stats().len());
        for s in self.store.all_stats() {
            w.f32s(&s.mean);
            w.f32s(&s.var);
        }
        w.len(self.velocity.len());
        for v in &self.velocity {
            w.tensor(v);
        }
        w.0
    }

    /// Parses a checkpoint and rebuilds the network layout from its embedded
    /// network config.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader(bytes);
        if r.take(MAGIC.len()).map_err(|_| Error::Checkpoint("not a checkpoint file".into()))? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version} (expected {FORMAT_VERSION})")));
        }
        let config_hash = r.array::<32>()?;
        let iteration = r.u64()?;
        let spec_text = r.string()?;
        let train_text = r.string()?;
        let rng = RngState { seed: r.array()?, stream: r.u64()?, word_pos: u128::from_le_bytes(r.array()?) };
        let n = r.len()?;
        let order = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let cursor = r.u64()?;
        let mean = r.tensor()?;
        let net = Network::build(&NetworkSpec::parse(&spec_text)?)?;
        let layout = &net.layout;
        let n = r.len()?;
        if n != layout.params().len() {
            return Err(Error::Checkpoint(format!("{n} parameters stored, network has {}", layout.params().len())));
        }
        let mut values = Vec::with_capacity(n);
        for spec in layout.params() {
            let name = r.string()?;
            if name != spec.name {
                return Err(Error::Checkpoint(format!("parameter `{name}` stored where `{}` expected", spec.name)));
            }
            values.push(r.tensor()?);
        }
        let n = r.len()?;
        let stats = (0..n)
            .map(|_| Ok(RunningStats { mean: r.f32s()?, var: r.f32s()? }))
            .collect::<Result<Vec<_>>>()?;
        let store = ParamStore::from_parts(layout, values, stats)?;
        let n = r.len()?;
        let velocity = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        if velocity.len() != store.values().len()
            || velocity.iter().zip(store.values()).any(|(v, p)| v.shape() != p.shape())
        {
            return Err(Error::Checkpoint("momentum buffers do not match the parameters".into()));
        }
        if !r.0.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.0.len())));
        }
        Ok(Checkpoint { iteration, config_hash, spec_text, train_text, rng, order, cursor, mean, store, velocity })
    }

    /// Writes atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Refuses a checkpoint written under different configs unless `force`.
    pub fn check_hash(&self, expected: &[u8; 32], force: bool) -> Result<()> {
        if &self.config_hash != expected && !force {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {} vs current {} (use force to load anyway)",
                hex(&self.config_hash),
                hex(expected)
            )));
        }
        Ok(())
    }
}
