//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! "GEKT"  u32 version
//! u32 len, config echo (UTF-8 TOML)
//! u32 completed epochs
//! u32 count, tensor records      (parameters and running statistics)
//! u32 count, tensor records      (momentum buffers, named after their parameter)
//! u32 count, { u64 seed, u64 stream, u128 word position }
//! u32 drops, u32 stale epochs, u8 has-best, f64 best     (schedule state)
//! ```
//!
//! A tensor record is `u32 name length, name, 4 × u32 dims, f32 payload`.

use std::fs;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::tensor::{Shape, Tensor};

use super::schedule::ScheduleState;

pub const MAGIC: &[u8; 4] = b"GEKT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_echo: String,
    pub epoch: u32,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub momentum: Vec<(String, Tensor<f32>)>,
    pub rng: Vec<RngState>,
    pub schedule: ScheduleState,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensors(out: &mut Vec<u8>, tensors: &[(String, Tensor<f32>)]) {
    put_u32(out, tensors.len() as u32);
    for (name, t) in tensors {
        put_u32(out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        for d in t.shape().dims() {
            put_u32(out, d as u32);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated { offset: self.pos, what });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &'static str) -> Result<String, CheckpointError> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| CheckpointError::Malformed(format!("{what} is not UTF-8")))
    }

    fn tensors(&mut self) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
        let n = self.u32("tensor count")?;
        let mut out = Vec::new();
        for _ in 0..n {
            let name = self.string("tensor name")?;
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = self.u32("tensor dims")? as usize;
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= (self.bytes.len() - self.pos) / 4)
                .ok_or(CheckpointError::Truncated {
                    offset: self.pos,
                    what: "tensor payload",
                })?;
            let raw = self.take(numel * 4, "tensor payload")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::from_vec(Shape::from_dims(dims), data).expect("sized from dims");
            out.push((name, t));
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.config_echo.len() as u32);
        out.extend_from_slice(self.config_echo.as_bytes());
        put_u32(&mut out, self.epoch);
        put_tensors(&mut out, &self.tensors);
        put_tensors(&mut out, &self.momentum);
        put_u32(&mut out, self.rng.len() as u32);
        for r in &self.rng {
            out.extend_from_slice(&r.seed.to_le_bytes());
            out.extend_from_slice(&r.stream.to_le_bytes());
            out.extend_from_slice(&r.word_pos.to_le_bytes());
        }
        put_u32(&mut out, self.schedule.drops);
        put_u32(&mut out, self.schedule.stale_epochs);
        out.push(self.schedule.best.is_some() as u8);
        out.extend_from_slice(&self.schedule.best.unwrap_or(0.0).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic {
                found: magic.try_into().unwrap(),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let config_echo = r.string("config echo")?;
        let epoch = r.u32("epoch")?;
        let tensors = r.tensors()?;
        let momentum = r.tensors()?;
        let n = r.u32("rng count")?;
        let mut rng = Vec::new();
        for _ in 0..n {
            let seed = r.u64("rng seed")?;
            let stream = r.u64("rng stream")?;
            let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().unwrap());
            rng.push(RngState { seed, stream, word_pos });
        }
        let drops = r.u32("schedule")?;
        let stale_epochs = r.u32("schedule")?;
        let has_best = r.take(1, "schedule")?[0];
        let best = f64::from_le_bytes(r.take(8, "schedule")?.try_into().unwrap());
        if has_best > 1 {
            return Err(CheckpointError::Malformed("schedule flag".into()));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Checkpoint {
            config_echo,
            epoch,
            tensors,
            momentum,
            rng,
            schedule: ScheduleState {
                drops,
                stale_epochs,
                best: (has_best == 1).then_some(best),
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config_echo: "[arch]\nfamily = \"x\"\n".into(),
            epoch: 7,
            tensors: vec![
                (
                    "a.weight".into(),
                    Tensor::from_fn(Shape::new(2, 1, 3, 1), |n, _, h, _| (n * 3 + h) as f32 - 0.5),
                ),
                ("a.running_var".into(), Tensor::ones(Shape::new(1, 2, 1, 1))),
            ],
            momentum: vec![("a.weight".into(), Tensor::full(Shape::new(2, 1, 3, 1), -0.25))],
            rng: vec![RngState {
                seed: 42,
                stream: 2,
                word_pos: 1 << 70,
            }],
            schedule: ScheduleState {
                drops: 1,
                stale_epochs: 2,
                best: Some(0.75),
            },
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = sample().to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(&bytes[..4], b"GEKT");
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(CheckpointError::BadMagic { .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(CheckpointError::UnsupportedVersion(9))
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated { .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&long),
            Err(CheckpointError::TrailingBytes(1))
        ));
    }

    #[test]
    fn huge_dims_do_not_allocate() {
        let mut c = sample();
        c.momentum.clear();
        let mut bytes = c.to_bytes();
        // First tensor's first dim sits after magic, version, echo, epoch, count, name.
        let at = 4 + 4 + 4 + c.config_echo.len() + 4 + 4 + 4 + "a.weight".len();
        bytes[at..at + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::Truncated { .. })
        ));
    }
}
