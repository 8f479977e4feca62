use serde::{Deserialize, Serialize};

use crate::dgp::UnitRecord;
use crate::error::{MsctError, Result};
use crate::tensor::Tensor;

/// Which record column supplies the treatment class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreatmentField {
    /// Crash indicator, two classes.
    #[default]
    Binary,
    /// Crash type, `0` for none.
    Typed,
}

/// One unit's aligned history in model-ready form.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    /// Row-major `len x d_x`.
    pub x: Vec<f64>,
    pub d_x: usize,
    pub t: Vec<usize>,
    pub y: Vec<f64>,
    pub s: Vec<f64>,
}

impl Sequence {
    pub fn from_record(rec: &UnitRecord, field: TreatmentField, k: usize) -> Result<Self> {
        let n = rec.y.len();
        let t: Vec<usize> = match field {
            TreatmentField::Binary => rec.t.iter().map(|&v| v as usize).collect(),
            TreatmentField::Typed => rec.t_type.iter().map(|&v| v as usize).collect(),
        };
        if rec.x.len() != n || t.len() != n {
            return Err(MsctError::shape("sequence", &[rec.x.len(), t.len()], &[n]));
        }
        if let Some(&bad) = t.iter().find(|&&c| c >= k) {
            return Err(MsctError::Data(format!("treatment class {bad} outside 0..{k}")));
        }
        let d_x = rec.x.width();
        let mut x = Vec::with_capacity(n * d_x);
        for i in 0..n {
            let row = rec.x.row(i);
            if row.len() != d_x {
                return Err(MsctError::shape("sequence_x", &[row.len()], &[d_x]));
            }
            x.extend_from_slice(row);
        }
        Ok(Sequence {
            x,
            d_x,
            t,
            y: rec.y.clone(),
            s: rec.s.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d_x..(i + 1) * self.d_x]
    }
}

pub fn sequences(records: &[UnitRecord], field: TreatmentField, k: usize) -> Result<Vec<Sequence>> {
    records.iter().map(|r| Sequence::from_record(r, field, k)).collect()
}

/// Affine standardization of speeds, fitted on the training split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Default for Normalizer {
    fn default() -> Self {
        Normalizer { mean: 0.0, std: 1.0 }
    }
}

impl Normalizer {
    pub fn fit(seqs: &[Sequence]) -> Result<Self> {
        let n: usize = seqs.iter().map(|s| s.len()).sum();
        if n == 0 {
            return Err(MsctError::Usage("cannot fit a normalizer on an empty dataset".into()));
        }
        let mean = seqs.iter().flat_map(|s| &s.y).sum::<f64>() / n as f64;
        let var = seqs.iter().flat_map(|s| &s.y).map(|y| (y - mean).powi(2)).sum::<f64>() / n as f64;
        Ok(Normalizer {
            mean,
            std: var.sqrt().max(1e-8),
        })
    }

    pub fn forward(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

pub(crate) fn one_hot(out: &mut Vec<f64>, class: usize, k: usize) {
    out.extend((0..k).map(|j| if j == class { 1.0 } else { 0.0 }));
}

/// Encoder inputs over positions `0..n-1`: position `p` sees `x[p+1]`,
/// the treatment `t[p]`, the speed `y[p]` and the static features, and its
/// targets are `y[p+1]` and the class of `t[p+1]`.
#[derive(Clone, Debug)]
pub struct EncoderBatch {
    pub inputs: Tensor,
    pub treat_in: Tensor,
    pub treat_next: Tensor,
    pub next_class: Vec<usize>,
    pub y_next: Tensor,
}

impl EncoderBatch {
    pub fn build(seqs: &[&Sequence], norm: &Normalizer, k: usize) -> Result<Self> {
        let first = seqs.first().ok_or_else(|| MsctError::Usage("empty batch".into()))?;
        let n = first.len();
        if n < 2 {
            return Err(MsctError::Data(format!("sequence of length {n} is too short")));
        }
        let (d_x, d_s) = (first.d_x, first.s.len());
        let l = n - 1;
        let b = seqs.len();
        let d_in = d_x + k + 1 + d_s;
        let mut inputs = Vec::with_capacity(b * l * d_in);
        let mut treat_in = Vec::with_capacity(b * l * k);
        let mut treat_next = Vec::with_capacity(b * l * k);
        let mut next_class = Vec::with_capacity(b * l);
        let mut y_next = Vec::with_capacity(b * l);
        for s in seqs {
            if s.len() != n || s.d_x != d_x || s.s.len() != d_s {
                return Err(MsctError::shape("encoder_batch", &[s.len(), s.d_x, s.s.len()], &[n, d_x, d_s]));
            }
            for p in 0..l {
                inputs.extend_from_slice(s.x_row(p + 1));
                one_hot(&mut inputs, s.t[p], k);
                inputs.push(norm.forward(s.y[p]));
                inputs.extend_from_slice(&s.s);
                one_hot(&mut treat_in, s.t[p], k);
                one_hot(&mut treat_next, s.t[p + 1], k);
                next_class.push(s.t[p + 1]);
                y_next.push(norm.forward(s.y[p + 1]));
            }
        }
        Ok(EncoderBatch {
            inputs: Tensor::new(vec![b, l, d_in], inputs)?,
            treat_in: Tensor::new(vec![b, l, k], treat_in)?,
            treat_next: Tensor::new(vec![b, l, k], treat_next)?,
            next_class,
            y_next: Tensor::new(vec![b, l], y_next)?,
        })
    }

    pub fn batch(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
