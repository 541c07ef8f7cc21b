use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer sizes of a single-layer GRU with a linear output head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GruDims {
    pub hidden: usize,
    pub input: usize,
    pub output: usize,
}

impl GruDims {
    pub fn new(hidden: usize, input: usize, output: usize) -> Result<Self> {
        if hidden == 0 || input == 0 || output == 0 {
            return Err(Error::Config(format!(
                "GRU dimensions must be positive (H={hidden}, D_in={input}, K={output})"
            )));
        }
        Ok(Self { hidden, input, output })
    }

    pub fn param_count(&self) -> usize {
        Block::ALL.iter().map(|b| b.len(*self)).sum()
    }
}

/// Named parameter blocks, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Block {
    InputUpdate,
    InputReset,
    InputCandidate,
    RecurrentUpdate,
    RecurrentReset,
    RecurrentCandidate,
    BiasUpdate,
    BiasReset,
    BiasCandidate,
    HeadWeight,
    HeadBias,
}

impl Block {
    pub const ALL: [Block; 11] = [
        Block::InputUpdate,
        Block::InputReset,
        Block::InputCandidate,
        Block::RecurrentUpdate,
        Block::RecurrentReset,
        Block::RecurrentCandidate,
        Block::BiasUpdate,
        Block::BiasReset,
        Block::BiasCandidate,
        Block::HeadWeight,
        Block::HeadBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::InputUpdate => "input_update",
            Block::InputReset => "input_reset",
            Block::InputCandidate => "input_candidate",
            Block::RecurrentUpdate => "recurrent_update",
            Block::RecurrentReset => "recurrent_reset",
            Block::RecurrentCandidate => "recurrent_candidate",
            Block::BiasUpdate => "bias_update",
            Block::BiasReset => "bias_reset",
            Block::BiasCandidate => "bias_candidate",
            Block::HeadWeight => "head_weight",
            Block::HeadBias => "head_bias",
        }
    }

    pub fn from_name(name: &str) -> Option<Block> {
        Block::ALL.into_iter().find(|b| b.name() == name)
    }

    /// (rows, cols); vectors are stored as `n x 1`.
    pub fn shape(self, d: GruDims) -> (usize, usize) {
        match self {
            Block::InputUpdate | Block::InputReset | Block::InputCandidate => (d.hidden, d.input),
            Block::RecurrentUpdate | Block::RecurrentReset | Block::RecurrentCandidate => {
                (d.hidden, d.hidden)
            }
            Block::BiasUpdate | Block::BiasReset | Block::BiasCandidate => (d.hidden, 1),
            Block::HeadWeight => (d.output, d.hidden),
            Block::HeadBias => (d.output, 1),
        }
    }

    pub fn len(self, d: GruDims) -> usize {
        let (r, c) = self.shape(d);
        r * c
    }

    fn fan_in(self, d: GruDims) -> usize {
        match self {
            Block::InputUpdate | Block::InputReset | Block::InputCandidate => d.input,
            _ => d.hidden,
        }
    }

    fn is_bias(self) -> bool {
        matches!(
            self,
            Block::BiasUpdate | Block::BiasReset | Block::BiasCandidate | Block::HeadBias
        )
    }
}

/// All GRU weights in one flat buffer, addressed by [`Block`].
///
/// Gradients share this type: a gradient is a `GruParams` whose entries
/// are partial derivatives of the loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    dims: GruDims,
    data: Vec<f64>,
}

pub type Gradients = GruParams;

impl GruParams {
    pub fn zeros(dims: GruDims) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.param_count()],
        }
    }

    pub fn from_flat(dims: GruDims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.param_count() {
            return Err(Error::Shape(format!(
                "{} values given, {dims:?} needs {}",
                data.len(),
                dims.param_count()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> GruDims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn range(&self, block: Block) -> std::ops::Range<usize> {
        let mut start = 0;
        for b in Block::ALL {
            let len = b.len(self.dims);
            if b == block {
                return start..start + len;
            }
            start += len;
        }
        unreachable!("every block is listed in Block::ALL")
    }

    pub fn block(&self, block: Block) -> &[f64] {
        &self.data[self.range(block)]
    }

    pub fn block_mut(&mut self, block: Block) -> &mut [f64] {
        let r = self.range(block);
        &mut self.data[r]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_dims(&self, other: &GruParams) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "parameter shapes differ: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &GruParams, scale: f64) -> Result<()> {
        self.check_dims(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }
}

/// Uniform `±1/sqrt(fan_in)` weights and zero biases, deterministic per seed.
pub fn init_gru(hidden: usize, input: usize, output: usize, seed: u64) -> Result<GruParams> {
    let dims = GruDims::new(hidden, input, output)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = GruParams::zeros(dims);
    for block in Block::ALL {
        if block.is_bias() {
            continue;
        }
        let bound = 1.0 / (block.fan_in(dims) as f64).sqrt();
        for w in params.block_mut(block) {
            *w = rng.random_range(-bound..=bound);
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = init_gru(32, 6, 1, 9).unwrap();
        let b = init_gru(32, 6, 1, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_gru(32, 6, 1, 10).unwrap());
        assert_eq!(Block::InputUpdate.shape(a.dims()), (32, 6));
        assert_eq!(a.block(Block::InputUpdate).len(), 32 * 6);
        let bound = 1.0 / 6f64.sqrt();
        for blk in [Block::InputUpdate, Block::InputReset, Block::InputCandidate] {
            assert!(a.block(blk).iter().all(|w| w.abs() <= bound));
        }
        assert!(a.block(Block::BiasUpdate).iter().all(|&w| w == 0.0));
        assert!(a.block(Block::HeadBias).iter().all(|&w| w == 0.0));
    }

    #[test]
    fn rejects_zero_dims() {
        assert!(init_gru(0, 3, 1, 0).is_err());
        assert!(init_gru(3, 0, 1, 0).is_err());
    }

    #[test]
    fn blocks_partition_the_buffer() {
        let p = GruParams::zeros(GruDims::new(4, 3, 2).unwrap());
        let total: usize = Block::ALL.iter().map(|b| p.block(*b).len()).sum();
        assert_eq!(total, p.len());
        assert_eq!(Block::from_name("head_bias"), Some(Block::HeadBias));
    }
}
