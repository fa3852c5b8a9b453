//! Binary training snapshot.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PHFM" | version u32 | config_len u32 | config UTF-8
//! params:  count u32 | record*
//! adam m:  count u32 | record*
//! adam v:  count u32 | record*
//! logits 4 × f32 | epoch u64 | step u64 | rng_len u32 | rng bytes
//! record = name_len u32 | name | rank u32 | dims u32 × rank | f32 × numel
//! ```
//!
//! Records are written in sorted-name order. The RNG bytes are the ChaCha8
//! seed (32 bytes), stream (u64) and word position (u128).

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PHFM";
pub const VERSION: u32 = 1;

pub type Record = (String, Tensor<f32>);

/// Serializable position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    fn to_bytes(self) -> Vec<u8> {
        let mut b = self.seed.to_vec();
        b.extend(self.stream.to_le_bytes());
        b.extend(self.word_pos.to_le_bytes());
        b
    }

    fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() != 56 {
            return Err(Error::Checkpoint(format!("rng state is {} bytes, expected 56", b.len())));
        }
        Ok(RngState {
            seed: b[..32].try_into().expect("length checked"),
            stream: u64::from_le_bytes(b[32..40].try_into().expect("length checked")),
            word_pos: u128::from_le_bytes(b[40..56].try_into().expect("length checked")),
        })
    }
}

/// Everything needed to continue training bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub params: Vec<Record>,
    pub adam_m: Vec<Record>,
    pub adam_v: Vec<Record>,
    pub logits: [f32; 4],
    pub epoch: u64,
    pub step: u64,
    pub rng: RngState,
}

impl Checkpoint {
    /// Number of model scalars stored.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(VERSION.to_le_bytes());
        put_bytes(&mut out, self.config.as_bytes());
        for set in [&self.params, &self.adam_m, &self.adam_v] {
            write_records(&mut out, set);
        }
        for l in self.logits {
            out.extend(l.to_le_bytes());
        }
        out.extend(self.epoch.to_le_bytes());
        out.extend(self.step.to_le_bytes());
        put_bytes(&mut out, &self.rng.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = get_u32(&mut r, "version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let config = String::from_utf8(get_bytes(&mut r, "config")?)
            .map_err(|e| Error::Checkpoint(format!("config block is not UTF-8: {e}")))?;
        let params = read_records(&mut r)?;
        let adam_m = read_records(&mut r)?;
        let adam_v = read_records(&mut r)?;
        let mut logits = [0f32; 4];
        for l in &mut logits {
            let mut b = [0u8; 4];
            read_exact(&mut r, &mut b, "logits")?;
            *l = f32::from_le_bytes(b);
        }
        let epoch = get_u64(&mut r, "epoch")?;
        let step = get_u64(&mut r, "step")?;
        let rng = RngState::from_bytes(&get_bytes(&mut r, "rng state")?)?;
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Checkpoint {
            config,
            params,
            adam_m,
            adam_v,
            logits,
            epoch,
            step,
            rng,
        })
    }

    /// Write via a temporary file and rename, so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend((b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

/// Append `count u32` then every record, sorted by name.
pub fn write_records(out: &mut Vec<u8>, records: &[Record]) {
    let mut sorted: Vec<&Record> = records.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    out.extend((sorted.len() as u32).to_le_bytes());
    for (name, t) in sorted {
        put_bytes(out, name.as_bytes());
        out.extend((t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
}

/// Read a `count u32`-prefixed record list, advancing `r`.
pub fn read_records(r: &mut &[u8]) -> Result<Vec<Record>> {
    let count = get_u32(r, "record count")? as usize;
    let mut out: Vec<Record> = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = String::from_utf8(get_bytes(r, "record name")?)
            .map_err(|e| Error::Checkpoint(format!("record name is not UTF-8: {e}")))?;
        if let Some((prev, _)) = out.last() {
            if *prev >= name {
                return Err(Error::Checkpoint(format!("record {name} out of sorted order")));
            }
        }
        let rank = get_u32(r, "rank")? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("record {name} has implausible rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| get_u32(r, "dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        if r.len() < n * 4 {
            return Err(Error::Checkpoint(format!("record {name} truncated")));
        }
        let (body, rest) = r.split_at(n * 4);
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        *r = rest;
        out.push((name, Tensor::new(dims, data)?));
    }
    Ok(out)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint(format!("truncated while reading {what}")))
}

fn get_u32(r: &mut &[u8], what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut &[u8], what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn get_bytes(r: &mut &[u8], what: &str) -> Result<Vec<u8>> {
    let n = get_u32(r, what)? as usize;
    if r.len() < n {
        return Err(Error::Checkpoint(format!("truncated while reading {what}")));
    }
    let (b, rest) = r.split_at(n);
    *r = rest;
    Ok(b.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let _: u64 = rng.random();
        Checkpoint {
            config: "a = 1\n".into(),
            params: vec![
                ("a.w".into(), Tensor::from_fn(vec![2, 3], |i| i as f32 * 0.5)),
                ("b".into(), Tensor::scalar(-1.25)),
            ],
            adam_m: vec![("a.w".into(), Tensor::zeros(vec![2, 3]))],
            adam_v: vec![("a.w".into(), Tensor::full(vec![2, 3], 1e-9))],
            logits: [0.0, 0.5, -0.5, 1.0],
            epoch: 3,
            step: 17,
            rng: RngState::capture(&rng),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.params[0].0, "a.w");
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let _: u32 = rng.random();
        }
        let mut resumed = RngState::capture(&rng).restore();
        let a: Vec<u64> = (0..10).map(|_| rng.random()).collect();
        let b: Vec<u64> = (0..10).map(|_| resumed.random()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_version_and_truncation() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
    }
}
