use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::array::Array;
use crate::error::{Error, Result};

/// Independent random streams derived from one seed.
///
/// Each purpose gets its own ChaCha stream, so enabling or disabling one
/// component never shifts the draws seen by another.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Init = 0,
    AssistantNoise = 1,
    GeneratorNoise = 2,
    Time = 3,
    Class = 4,
    Eval = 5,
}

impl Stream {
    pub const ALL: [Stream; 6] = [
        Stream::Init,
        Stream::AssistantNoise,
        Stream::GeneratorNoise,
        Stream::Time,
        Stream::Class,
        Stream::Eval,
    ];

    fn name(self) -> &'static str {
        match self {
            Stream::Init => "init",
            Stream::AssistantNoise => "assistant-noise",
            Stream::GeneratorNoise => "generator-noise",
            Stream::Time => "time",
            Stream::Class => "class",
            Stream::Eval => "eval",
        }
    }
}

#[derive(Clone, Debug)]
pub struct RngStreams {
    seed: u64,
    streams: Vec<ChaCha8Rng>,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        let streams = Stream::ALL
            .iter()
            .map(|&s| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(s as u64);
                r
            })
            .collect();
        Self { seed, streams }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn get(&mut self, s: Stream) -> &mut ChaCha8Rng {
        &mut self.streams[s as usize]
    }

    pub fn snapshot(&self) -> RngSnapshot {
        RngSnapshot {
            seed: self.seed,
            positions: Stream::ALL
                .iter()
                .map(|&s| (s.name().to_string(), self.streams[s as usize].get_word_pos().to_string()))
                .collect(),
        }
    }

    pub fn restore(snap: &RngSnapshot) -> Result<Self> {
        let mut r = Self::new(snap.seed);
        for (name, pos) in &snap.positions {
            let s = Stream::ALL
                .iter()
                .find(|s| s.name() == name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown rng stream `{name}`")))?;
            let pos: u128 = pos
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad rng position `{pos}`")))?;
            r.streams[*s as usize].set_word_pos(pos);
        }
        Ok(r)
    }
}

/// Stream positions as decimal strings (u128 does not fit JSON numbers).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: u64,
    pub positions: Vec<(String, String)>,
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Array::matrix(rows, cols, data).expect("sized")
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array {
    standard_normal(rng, rows, cols).map(|v| v * std)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_independent_and_restorable() {
        let mut a = RngStreams::new(5);
        let mut b = RngStreams::new(5);
        let _: f64 = a.get(Stream::Time).random();
        let x: f64 = a.get(Stream::Eval).random();
        let y: f64 = b.get(Stream::Eval).random();
        assert_eq!(x, y);

        let snap = a.snapshot();
        let mut c = RngStreams::restore(&snap).unwrap();
        let u: u64 = a.get(Stream::Time).random();
        let v: u64 = c.get(Stream::Time).random();
        assert_eq!(u, v);
    }
}
