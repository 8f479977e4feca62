use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MsctError, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Train/eval switch for a forward pass. In training mode every dropout site
/// draws a fresh mask from the context's own RNG, so a pass is reproducible
/// from its seed alone.
#[derive(Clone, Debug)]
pub struct ForwardCtx {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(MsctError::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(ForwardCtx {
            rate,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        })
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Inverted-dropout mask of the given shape, or `None` when dropout is off.
    pub fn mask(&mut self, g: &mut Graph, shape: &[usize]) -> Option<Var> {
        let rate = self.rate;
        let rng = self.rng.as_mut().filter(|_| rate > 0.0)?;
        let keep = 1.0 - rate;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        Some(g.constant(Tensor::new(shape.to_vec(), data).expect("mask shape")))
    }

    /// Multiply `x` by a mask of `mask_shape` (broadcast against `x`).
    pub fn apply(&mut self, g: &mut Graph, x: Var, mask_shape: &[usize]) -> Result<Var> {
        match self.mask(g, mask_shape) {
            Some(m) => g.mul(x, m),
            None => Ok(x),
        }
    }

    /// Variational mask for `[B, T, F]`: one draw per (batch row, feature),
    /// shared across time.
    pub fn apply_seq(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 {
            return Err(MsctError::shape("dropout_seq", &s, &[]));
        }
        self.apply(g, x, &[s[0], 1, s[2]])
    }
}
