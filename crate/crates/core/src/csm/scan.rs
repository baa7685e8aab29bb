//! Reference selective scans on plain row-major buffers.
//!
//! Per channel `i` and state index `s`:
//!
//! ```text
//! Δ_t = softplus(x_t W_Δ + b_Δ)      B_t = x_t W_B      C_t = x_t W_C
//! h_t[i,s] = exp(Δ_t[i] A[i,s]) h_{t-1}[i,s] + Δ_t[i] B_t[s] x_t[i]
//! y_t[i]   = Σ_s C_t[s] h_t[i,s] + D[i] x_t[i]
//! ```
//!
//! with `A = −exp(A_log)`. [`selective_scan_seq`] walks time strictly in
//! order; [`selective_scan_chunked`] scans chunks independently from a zero
//! state (in parallel) and stitches them with the carried state.

use num_traits::Float;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Row-major `rows x cols` buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Float> Matrix<F> {
    pub fn new(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix buffer length");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![F::zero(); rows * cols])
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn max_abs_diff(&self, other: &Self) -> F {
        self.data
            .iter()
            .zip(&other.data)
            .fold(F::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }
}

/// Learned scan parameters for `channels` channels and `state_dim` states.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanParams<F> {
    pub channels: usize,
    pub state_dim: usize,
    /// `channels x state_dim`
    pub a_log: Vec<F>,
    /// `channels x channels`, input-major.
    pub w_delta: Vec<F>,
    pub b_delta: Vec<F>,
    /// `channels x state_dim`
    pub w_b: Vec<F>,
    /// `channels x state_dim`
    pub w_c: Vec<F>,
    pub d: Vec<F>,
}

/// Scan carry `h`, `channels x state_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanState<F> {
    pub h: Vec<F>,
}

impl<F: Float> ScanState<F> {
    pub fn zeros(channels: usize, state_dim: usize) -> Self {
        Self {
            h: vec![F::zero(); channels * state_dim],
        }
    }
}

/// Per-timestep discretisation inputs.
struct Step<F> {
    delta: Vec<F>,
    b: Vec<F>,
    c: Vec<F>,
}

fn softplus<F: Float>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

impl<F: Float + Send + Sync> ScanParams<F> {
    pub fn validate(&self) -> Result<()> {
        let (c, n) = (self.channels, self.state_dim);
        if self.a_log.len() != c * n
            || self.w_delta.len() != c * c
            || self.b_delta.len() != c
            || self.w_b.len() != c * n
            || self.w_c.len() != c * n
            || self.d.len() != c
        {
            return Err(Error::Input("scan parameter shapes disagree".into()));
        }
        for i in 0..c {
            let finite = self.a_log[i * n..(i + 1) * n].iter().all(|v| v.is_finite())
                && self.w_b[i * n..(i + 1) * n].iter().all(|v| v.is_finite())
                && self.w_c[i * n..(i + 1) * n].iter().all(|v| v.is_finite())
                && self.w_delta[i * c..(i + 1) * c].iter().all(|v| v.is_finite())
                && (0..c).all(|r| self.w_delta[r * c + i].is_finite())
                && self.b_delta[i].is_finite()
                && self.d[i].is_finite();
            if !finite {
                return Err(Error::Numeric(format!("non-finite scan parameter in channel {i}")));
            }
        }
        Ok(())
    }

    /// `A = −exp(A_log)`.
    pub fn a(&self) -> Vec<F> {
        self.a_log.iter().map(|v| -v.exp()).collect()
    }

    fn step(&self, x: &[F]) -> Step<F> {
        let (c, n) = (self.channels, self.state_dim);
        let mut delta = self.b_delta.clone();
        let mut b = vec![F::zero(); n];
        let mut cc = vec![F::zero(); n];
        for (j, &xj) in x.iter().enumerate() {
            for i in 0..c {
                delta[i] = delta[i] + xj * self.w_delta[j * c + i];
            }
            for s in 0..n {
                b[s] = b[s] + xj * self.w_b[j * n + s];
                cc[s] = cc[s] + xj * self.w_c[j * n + s];
            }
        }
        Step {
            delta: delta.into_iter().map(softplus).collect(),
            b,
            c: cc,
        }
    }
}

/// Sequential scan over rows `range` of `x`, starting from `h`.
fn scan_block<F: Float + Send + Sync>(
    x: &Matrix<F>,
    p: &ScanParams<F>,
    a: &[F],
    range: std::ops::Range<usize>,
    h: &mut [F],
    y: &mut [F],
) {
    let (c, n) = (p.channels, p.state_dim);
    for (local, t) in range.enumerate() {
        let xt = x.row(t);
        let st = p.step(xt);
        for i in 0..c {
            let mut acc = F::zero();
            for s in 0..n {
                let k = i * n + s;
                let decay = (st.delta[i] * a[k]).exp();
                h[k] = decay * h[k] + st.delta[i] * st.b[s] * xt[i];
                acc = acc + st.c[s] * h[k];
            }
            y[local * c + i] = acc + p.d[i] * xt[i];
        }
    }
}

fn check_input<F: Float + Send + Sync>(x: &Matrix<F>, p: &ScanParams<F>, carry: Option<&ScanState<F>>) -> Result<()> {
    p.validate()?;
    if x.cols != p.channels {
        return Err(Error::Input(format!("input has {} channels, scan expects {}", x.cols, p.channels)));
    }
    if x.rows == 0 {
        return Err(Error::Input("scan needs at least one timestep".into()));
    }
    if let Some(state) = carry {
        if state.h.len() != p.channels * p.state_dim {
            return Err(Error::Input("carry state has wrong size".into()));
        }
    }
    Ok(())
}

/// Strictly sequential scan. Returns outputs `T x c` and the final state.
pub fn selective_scan_seq<F: Float + Send + Sync>(
    x: &Matrix<F>,
    p: &ScanParams<F>,
    carry: Option<&ScanState<F>>,
) -> Result<(Matrix<F>, ScanState<F>)> {
    check_input(x, p, carry)?;
    let a = p.a();
    let mut h = carry.map_or_else(|| vec![F::zero(); p.channels * p.state_dim], |s| s.h.clone());
    let mut y = Matrix::zeros(x.rows, x.cols);
    scan_block(x, p, &a, 0..x.rows, &mut h, &mut y.data);
    Ok((y, ScanState { h }))
}

/// Chunk-local results from a zero initial state.
struct ChunkLocal<F> {
    /// `len x c` outputs assuming zero incoming state.
    y: Vec<F>,
    /// `len x (c*n)` cumulative decay products since the chunk start.
    decay: Vec<F>,
    /// `len x n` read-out vectors.
    readout: Vec<F>,
    /// Final zero-start state.
    h: Vec<F>,
}

fn scan_chunk_local<F: Float + Send + Sync>(
    x: &Matrix<F>,
    p: &ScanParams<F>,
    a: &[F],
    range: std::ops::Range<usize>,
) -> ChunkLocal<F> {
    let (c, n) = (p.channels, p.state_dim);
    let len = range.len();
    let mut h = vec![F::zero(); c * n];
    let mut prod = vec![F::one(); c * n];
    let mut out = ChunkLocal {
        y: vec![F::zero(); len * c],
        decay: Vec::with_capacity(len * c * n),
        readout: Vec::with_capacity(len * n),
        h: Vec::new(),
    };
    for (local, t) in range.enumerate() {
        let xt = x.row(t);
        let st = p.step(xt);
        for i in 0..c {
            let mut acc = F::zero();
            for s in 0..n {
                let k = i * n + s;
                let decay = (st.delta[i] * a[k]).exp();
                h[k] = decay * h[k] + st.delta[i] * st.b[s] * xt[i];
                prod[k] = prod[k] * decay;
                acc = acc + st.c[s] * h[k];
            }
            out.y[local * c + i] = acc + p.d[i] * xt[i];
        }
        out.decay.extend_from_slice(&prod);
        out.readout.extend_from_slice(&st.c);
    }
    out.h = h;
    out
}

/// Chunked scan: identical recurrence, chunks of `chunk` timesteps scanned
/// independently then corrected with the carried state.
pub fn selective_scan_chunked<F: Float + Send + Sync>(
    x: &Matrix<F>,
    p: &ScanParams<F>,
    chunk: usize,
    carry: Option<&ScanState<F>>,
) -> Result<(Matrix<F>, ScanState<F>)> {
    check_input(x, p, carry)?;
    if chunk == 0 {
        return Err(Error::Config("scan chunk must be at least 1".into()));
    }
    let (c, n) = (p.channels, p.state_dim);
    let a = p.a();
    let first = chunk.min(x.rows);
    let mut h = carry.map_or_else(|| vec![F::zero(); c * n], |s| s.h.clone());
    let mut y = Matrix::zeros(x.rows, c);
    // The first chunk sees the true carry directly.
    scan_block(x, p, &a, 0..first, &mut h, &mut y.data[..first * c]);

    let starts: Vec<usize> = (first..x.rows).step_by(chunk).collect();
    let locals: Vec<ChunkLocal<F>> = starts
        .par_iter()
        .map(|&s| scan_chunk_local(x, p, &a, s..(s + chunk).min(x.rows)))
        .collect();

    for (&start, local) in starts.iter().zip(&locals) {
        let len = local.y.len() / c;
        for t in 0..len {
            let decay = &local.decay[t * c * n..(t + 1) * c * n];
            let readout = &local.readout[t * n..(t + 1) * n];
            let out = y.row_mut(start + t);
            for i in 0..c {
                let mut carry_term = F::zero();
                for s in 0..n {
                    carry_term = carry_term + readout[s] * decay[i * n + s] * h[i * n + s];
                }
                out[i] = local.y[t * c + i] + carry_term;
            }
        }
        let last = &local.decay[(len - 1) * c * n..len * c * n];
        for k in 0..c * n {
            h[k] = local.h[k] + last[k] * h[k];
        }
    }
    Ok((y, ScanState { h }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_params(c: usize, n: usize, rng: &mut ChaCha8Rng) -> ScanParams<f64> {
        let mut v = |len: usize, scale: f64| -> Vec<f64> { (0..len).map(|_| rng.random_range(-scale..scale)).collect() };
        ScanParams {
            channels: c,
            state_dim: n,
            a_log: v(c * n, 1.0),
            w_delta: v(c * c, 0.5),
            b_delta: v(c, 0.5),
            w_b: v(c * n, 0.5),
            w_c: v(c * n, 0.5),
            d: v(c, 1.0),
        }
    }

    fn random_input(t: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::new(t, c, (0..t * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn single_step_unrolled() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_params(3, 2, &mut rng);
        let x = random_input(1, 3, &mut rng);
        let (y, _) = selective_scan_seq(&x, &p, None).unwrap();
        let st = p.step(x.row(0));
        for i in 0..3 {
            let mut expect = p.d[i] * x.data[i];
            for s in 0..2 {
                expect += st.c[s] * st.delta[i] * st.b[s] * x.data[i];
            }
            assert!((y.data[i] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn memoryless_when_decay_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = random_params(2, 3, &mut rng);
        p.a_log.iter_mut().for_each(|v| *v = 800.0);
        let x = random_input(4, 2, &mut rng);
        let (y, _) = selective_scan_seq(&x, &p, None).unwrap();
        for t in 0..4 {
            let st = p.step(x.row(t));
            for i in 0..2 {
                let mut expect = p.d[i] * x.row(t)[i];
                for s in 0..3 {
                    expect += st.c[s] * (st.delta[i] * st.b[s] * x.row(t)[i]);
                }
                assert!((y.row(t)[i] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn non_finite_parameter_names_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = random_params(4, 2, &mut rng);
        p.d[2] = f64::NAN;
        let x = random_input(3, 4, &mut rng);
        match selective_scan_seq(&x, &p, None) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("channel 2")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn chunk_equal_to_length_is_bitwise_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_params(5, 4, &mut rng);
        let x = random_input(9, 5, &mut rng);
        let carry = ScanState { h: (0..20).map(|i| i as f64 * 0.01).collect() };
        let (a, sa) = selective_scan_seq(&x, &p, Some(&carry)).unwrap();
        let (b, sb) = selective_scan_chunked(&x, &p, 9, Some(&carry)).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn chunk_of_one_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_params(4, 3, &mut rng);
        let x = random_input(12, 4, &mut rng);
        let (a, sa) = selective_scan_seq(&x, &p, None).unwrap();
        let (b, sb) = selective_scan_chunked(&x, &p, 1, None).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
        let ds = sa.h.iter().zip(&sb.h).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(ds < 1e-12);
    }

    #[test]
    fn float32_chunked_agrees_to_relative_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p64 = random_params(6, 4, &mut rng);
        let conv = |v: &Vec<f64>| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        let p = ScanParams {
            channels: 6,
            state_dim: 4,
            a_log: conv(&p64.a_log),
            w_delta: conv(&p64.w_delta),
            b_delta: conv(&p64.b_delta),
            w_b: conv(&p64.w_b),
            w_c: conv(&p64.w_c),
            d: conv(&p64.d),
        };
        let x64 = random_input(64, 6, &mut rng);
        let x = Matrix::new(64, 6, conv(&x64.data));
        let (a, _) = selective_scan_seq(&x, &p, None).unwrap();
        let (b, _) = selective_scan_chunked(&x, &p, 16, None).unwrap();
        for (u, v) in a.data.iter().zip(&b.data) {
            assert!((u - v).abs() <= 1e-5 * u.abs().max(1.0));
        }
    }
}
