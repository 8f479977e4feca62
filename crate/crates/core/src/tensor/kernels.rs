//! Raw numeric kernels shared by the graph ops.

use crate::error::{MsctError, Result};

/// `c = op(a) * op(b) + beta * c`, where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// A transposed operand is stored in row-major order with its own shape
/// (`k x m` for `a`, `n x k` for `b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    if m * k * n <= 256 {
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    let av = a[(i as isize * rsa + p as isize * csa) as usize];
                    let bv = b[(p as isize * rsb + j as isize * csb) as usize];
                    s += av * bv;
                }
                let cv = &mut c[i * n + j];
                *cv = if beta == 0.0 { s } else { beta * *cv + s };
            }
        }
        return;
    }
    // SAFETY: the slices cover exactly the strided extents described above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Right-aligned broadcast of two shapes.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(MsctError::shape(op, a, b));
        };
    }
    Ok(out)
}

/// How an input of shape `input` is read when broadcast to `out`.
pub(crate) enum Bcast {
    Same,
    /// Input repeats with this period (input matches trailing dims of out).
    Cyclic(usize),
    /// Explicit source offset per output element.
    Map(Vec<usize>),
}

pub(crate) fn bcast_plan(out: &[usize], input: &[usize]) -> Bcast {
    let n_in: usize = input.iter().product();
    if out == input {
        return Bcast::Same;
    }
    let r = out.len();
    let trailing_match = input.len() <= r && {
        // strip leading ones of input
        let stripped: Vec<usize> = input.iter().copied().skip_while(|&d| d == 1).collect();
        stripped.len() <= r && out[r - stripped.len()..] == stripped[..]
    };
    if trailing_match {
        return Bcast::Cyclic(n_in.max(1));
    }
    let mut strides = vec![0usize; r];
    let mut acc = 1;
    for i in (0..r).rev() {
        let j = i as isize - (r as isize - input.len() as isize);
        if j >= 0 {
            let d = input[j as usize];
            strides[i] = if d == 1 { 0 } else { acc };
            acc *= d;
        }
    }
    let n_out: usize = out.iter().product();
    let mut map = Vec::with_capacity(n_out);
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..n_out {
        map.push(off);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= strides[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    Bcast::Map(map)
}

impl Bcast {
    #[inline]
    pub(crate) fn src(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Cyclic(p) => i % p,
            Bcast::Map(m) => m[i],
        }
    }
}

/// Sum `grad` (shaped like the broadcast output) back down to an input of `n_in` elements.
pub(crate) fn reduce_to(plan: &Bcast, grad: &[f64], n_in: usize) -> Vec<f64> {
    match plan {
        Bcast::Same => grad.to_vec(),
        _ => {
            let mut out = vec![0.0; n_in];
            for (i, g) in grad.iter().enumerate() {
                out[plan.src(i)] += g;
            }
            out
        }
    }
}
