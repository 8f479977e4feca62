use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Frequency base of the sinusoidal encoding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeBase {
    #[default]
    Thousand,
    TenThousand,
}

impl PeBase {
    pub fn value(self) -> f64 {
        match self {
            PeBase::Thousand => 1000.0,
            PeBase::TenThousand => 10000.0,
        }
    }
}

/// Rows `0..t_max` of the absolute encoding.
pub fn positional_encoding(t_max: usize, d_h: usize, base: PeBase) -> Tensor {
    let positions: Vec<usize> = (0..t_max).collect();
    positional_encoding_at(&positions, d_h, base)
}

/// Encoding rows for arbitrary absolute positions.
///
/// Column pair `(2d, 2d+1)` holds `sin`/`cos` of `t / base^(2d/d_h)`. With an odd
/// width the unpaired last column takes the cosine of its own frequency.
pub fn positional_encoding_at(positions: &[usize], d_h: usize, base: PeBase) -> Tensor {
    let b = base.value();
    let mut data = Vec::with_capacity(positions.len() * d_h);
    for &t in positions {
        for c in 0..d_h {
            let d = c / 2;
            let angle = t as f64 / b.powf(2.0 * d as f64 / d_h as f64);
            let use_cos = c % 2 == 1 || (d_h % 2 == 1 && c == d_h - 1);
            data.push(if use_cos { angle.cos() } else { angle.sin() });
        }
    }
    Tensor::new(vec![positions.len(), d_h], data).expect("pe shape")
}
