//! Seeded synthetic "read the symbols in the picture" task.
//!
//! An image is a grid of symbol cells. Each cell is rendered as a square
//! block of patches; every patch is the symbol's prototype vector plus
//! gaussian noise. The response lists the cell symbols in row-major order
//! followed by EOS. Because each vision token carries one symbol, decoding
//! vision tokens through the LM head has a ground truth to check against.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// End-of-sequence token id.
pub const EOS: usize = 0;
/// Label value for positions excluded from supervision.
pub const IGNORE_INDEX: i64 = -100;
/// Ids below this are reserved for EOS and prompt words.
pub const SYMBOL_OFFSET: usize = 8;
/// Upper bound on any single size field of a config.
pub const MAX_EXTENT: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Symbol cells per image, `[rows, cols]`.
    pub grid: [usize; 2],
    /// Side length, in patches, of the square block each cell occupies.
    pub cell_size: usize,
    pub patch_dim: usize,
    pub num_symbols: usize,
    pub noise_std: f64,
    pub prompt_ids: Vec<usize>,
    pub train_size: usize,
    pub eval_size: usize,
    pub base_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            grid: [4, 4],
            cell_size: 2,
            patch_dim: 16,
            num_symbols: 32,
            noise_std: 0.1,
            prompt_ids: vec![1, 2, 3, 4],
            train_size: 4096,
            eval_size: 64,
            base_seed: 7,
        }
    }
}

impl DatasetConfig {
    pub fn cells(&self) -> usize {
        self.grid[0] * self.grid[1]
    }

    /// Patch grid `[H, W]` of a rendered image.
    pub fn patch_grid(&self) -> [usize; 2] {
        [self.grid[0] * self.cell_size, self.grid[1] * self.cell_size]
    }

    /// Response length including EOS.
    pub fn response_len(&self) -> usize {
        self.cells() + 1
    }

    /// Text positions fed to the model: prompt plus response without EOS.
    pub fn text_len(&self) -> usize {
        self.prompt_ids.len() + self.cells()
    }

    pub fn symbol_token(&self, symbol: usize) -> usize {
        SYMBOL_OFFSET + symbol
    }

    /// Smallest vocabulary that holds every token this task emits.
    pub fn min_vocab(&self) -> usize {
        SYMBOL_OFFSET + self.num_symbols
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("data: {m}")));
        let sizes = [self.grid[0], self.grid[1], self.cell_size, self.patch_dim, self.num_symbols];
        if sizes.iter().any(|&n| n > MAX_EXTENT) || self.prompt_ids.len() > MAX_EXTENT {
            return bad(format!("sizes are limited to {MAX_EXTENT}"));
        }
        if self.grid[0] == 0 || self.grid[1] == 0 || self.cell_size == 0 {
            return bad("grid and cell_size must be positive".into());
        }
        if self.patch_dim == 0 || self.num_symbols < 2 {
            return bad("need patch_dim >= 1 and at least 2 symbols".into());
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return bad(format!("noise_std {} must be finite and >= 0", self.noise_std));
        }
        if self.prompt_ids.is_empty() {
            return bad("prompt must contain at least one token".into());
        }
        if let Some(&id) = self
            .prompt_ids
            .iter()
            .find(|&&id| id == EOS || id >= SYMBOL_OFFSET)
        {
            return bad(format!(
                "prompt id {id} collides with EOS or symbol tokens (use 1..{SYMBOL_OFFSET})"
            ));
        }
        if self.train_size == 0 || self.eval_size == 0 {
            return bad("split sizes must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn key(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00_0001,
            Split::Eval => 0x6576_616c_0000_0002,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticExample {
    /// `[H, W, P]` patch vectors.
    pub patch_grid: Tensor,
    /// Row-major symbol per cell.
    pub symbols: Vec<usize>,
    pub prompt_ids: Vec<usize>,
    /// Symbol tokens followed by EOS.
    pub response_ids: Vec<usize>,
    /// One label per text position: the next token, or [`IGNORE_INDEX`]
    /// where the next token is still part of the prompt.
    pub labels: Vec<i64>,
}

impl SyntheticExample {
    /// Teacher-forced text input: prompt then response minus its last token.
    pub fn text_ids(&self) -> Vec<usize> {
        let mut ids = self.prompt_ids.clone();
        ids.extend_from_slice(&self.response_ids[..self.response_ids.len() - 1]);
        ids
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream(base_seed: u64, key: u64, index: u64) -> ChaCha8Rng {
    let seed = splitmix64(splitmix64(base_seed ^ key).wrapping_add(index));
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dataset generator with its symbol prototypes fixed at construction.
#[derive(Clone, Debug)]
pub struct Dataset {
    config: DatasetConfig,
    prototypes: Vec<Vec<f64>>,
}

const PROTOTYPE_KEY: u64 = 0x7072_6f74_6f00_0003;
const MAX_PROTOTYPE_DRAWS: usize = 10_000;

impl Dataset {
    pub fn new(config: DatasetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.base_seed, PROTOTYPE_KEY, 0);
        let min_dist = 4.0 * config.noise_std;
        let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(config.num_symbols);
        let mut draws = 0;
        while prototypes.len() < config.num_symbols {
            draws += 1;
            if draws > MAX_PROTOTYPE_DRAWS {
                return Err(Error::Config(format!(
                    "data: could not place {} prototypes {min_dist} apart in {} dims",
                    config.num_symbols, config.patch_dim
                )));
            }
            let cand: Vec<f64> = (0..config.patch_dim)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            let far_enough = prototypes.iter().all(|p| l2(p, &cand) > min_dist);
            if far_enough {
                prototypes.push(cand);
            }
        }
        Ok(Self { config, prototypes })
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.config
    }

    pub fn prototypes(&self) -> &[Vec<f64>] {
        &self.prototypes
    }

    pub fn split_len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.config.train_size,
            Split::Eval => self.config.eval_size,
        }
    }

    pub fn generate_example(&self, split: Split, index: usize) -> Result<SyntheticExample> {
        let len = self.split_len(split);
        if index >= len {
            return Err(Error::IndexOutOfRange {
                op: "generate_example",
                index,
                len,
            });
        }
        let cfg = &self.config;
        let mut rng = stream(cfg.base_seed, split.key(), index as u64);
        let symbols: Vec<usize> = (0..cfg.cells())
            .map(|_| rng.random_range(0..cfg.num_symbols))
            .collect();

        let [ph, pw] = cfg.patch_grid();
        let p = cfg.patch_dim;
        let mut data = vec![0.0; ph * pw * p];
        for r in 0..ph {
            for c in 0..pw {
                let cell = (r / cfg.cell_size) * cfg.grid[1] + c / cfg.cell_size;
                let proto = &self.prototypes[symbols[cell]];
                let dst = &mut data[(r * pw + c) * p..(r * pw + c + 1) * p];
                for (d, &v) in dst.iter_mut().zip(proto) {
                    let noise: f64 = rng.sample(StandardNormal);
                    *d = v + cfg.noise_std * noise;
                }
            }
        }
        let patch_grid = Tensor::new(vec![ph, pw, p], data)?;

        let mut response_ids: Vec<usize> = symbols.iter().map(|&s| cfg.symbol_token(s)).collect();
        response_ids.push(EOS);

        let prompt_len = cfg.prompt_ids.len();
        let mut labels = vec![IGNORE_INDEX; prompt_len - 1];
        labels.extend(response_ids.iter().map(|&t| t as i64));

        Ok(SyntheticExample {
            patch_grid,
            symbols,
            prompt_ids: cfg.prompt_ids.clone(),
            response_ids,
            labels,
        })
    }

    /// Consecutive batches over a whole split; the last batch may be short.
    pub fn make_batches(
        &self,
        split: Split,
        batch_size: usize,
    ) -> Result<impl Iterator<Item = Result<Vec<SyntheticExample>>> + '_> {
        if batch_size == 0 {
            return Err(Error::invalid("make_batches", "batch_size must be >= 1"));
        }
        let len = self.split_len(split);
        Ok((0..len).step_by(batch_size).map(move |start| {
            (start..(start + batch_size).min(len))
                .map(|i| self.generate_example(split, i))
                .collect()
        }))
    }

    /// Training batch for a global step, cycling through the train split.
    pub fn train_batch(&self, step: usize, batch_size: usize) -> Result<Vec<SyntheticExample>> {
        let len = self.config.train_size;
        (0..batch_size)
            .map(|i| self.generate_example(Split::Train, (step * batch_size + i) % len))
            .collect()
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
