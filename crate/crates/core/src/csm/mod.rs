//! Compressed sequence modeling: overlapping temporal pooling, gated
//! selective-scan blocks with a region branch, cosine retrieval from the
//! resulting long-term memory, and the effectiveness head.

pub mod scan;

pub use scan::{selective_scan_chunked, selective_scan_seq, Matrix, ScanParams, ScanState};

use candle_core::{DType, Tensor, D};
use log::debug;

use crate::error::{Error, Result};
use crate::nn::{l2_normalize_rows, softmax_last, softplus, LayerNorm, Linear, Mlp, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CsmConfig {
    pub channels: usize,
    pub state_dim: usize,
    pub n_blocks: usize,
    pub clip_width: usize,
    pub region_in_all_blocks: bool,
    /// Replace every block by the identity (ablation).
    pub identity: bool,
}

/// Compressed memory `F_ssm` for a batch of windows.
#[derive(Debug, Clone)]
pub struct LongMemory {
    /// `(B, M, c)`
    pub values: Tensor,
    /// Final scan state of the last block, `(B, c, state_dim)`.
    pub scan_state: Option<Tensor>,
}

impl LongMemory {
    pub fn len(&self) -> Result<usize> {
        Ok(self.values.dim(1)?)
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.len()? == 0)
    }
}

/// Start offsets of the pooling windows: width `2w`, stride `w`, no padding.
/// Sequences shorter than `2w` pool into a single window over all rows.
pub fn pool_windows(n: usize, w: usize) -> Vec<(usize, usize)> {
    let width = 2 * w;
    if n < width {
        return vec![(0, n)];
    }
    (0..=(n - width)).step_by(w).map(|s| (s, width)).collect()
}

/// Mean pooling of `(B, N, c)` over time with window `2w` and stride `w`.
pub fn overlap_pool(x: &Tensor, w: usize) -> Result<Tensor> {
    let n = x.dim(1)?;
    if n < 2 {
        return Err(Error::Input(format!("overlap pooling needs at least 2 frames, got {n}")));
    }
    if w == 0 {
        return Err(Error::Config("pooling stride must be positive".into()));
    }
    let pooled = pool_windows(n, w)
        .into_iter()
        .map(|(s, len)| x.narrow(1, s, len)?.mean_keepdim(1))
        .collect::<candle_core::Result<Vec<_>>>()?;
    Ok(Tensor::cat(&pooled, 1)?)
}

/// Differentiable selective scan with input-dependent `Δ`, `B`, `C`.
pub struct SelectiveScan {
    pub a_log: Tensor,
    pub delta: Linear,
    pub b_proj: Linear,
    pub c_proj: Linear,
    pub d: Tensor,
    state_dim: usize,
}

impl SelectiveScan {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, state_dim: usize) -> Result<Self> {
        // S4D-real style initialisation: A = -(1..=n) per channel.
        let a_log = (0..channels)
            .flat_map(|_| (1..=state_dim).map(|s| (s as f64).ln()))
            .collect();
        let a_log = store.from_values(&format!("{name}.a_log"), &[channels, state_dim], a_log)?;
        let delta = Linear::new(store, &format!("{name}.delta"), channels, channels)?;
        let b_proj = Linear::no_bias(store, &format!("{name}.b_proj"), channels, state_dim)?;
        let c_proj = Linear::no_bias(store, &format!("{name}.c_proj"), channels, state_dim)?;
        let d = store.constant(&format!("{name}.d"), &[channels], 1.0)?;
        Ok(Self {
            a_log,
            delta,
            b_proj,
            c_proj,
            d,
            state_dim,
        })
    }

    /// `x` is `(B, T, c)`; returns outputs `(B, T, c)` and final state `(B, c, n)`.
    pub fn forward(&self, x: &Tensor, carry: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let (b, t, c) = x.dims3()?;
        let n = self.state_dim;
        let a = self.a_log.exp()?.neg()?;
        let delta = softplus(&self.delta.forward(x)?)?;
        let bm = self.b_proj.forward(x)?;
        let cm = self.c_proj.forward(x)?;
        let mut h = match carry {
            Some(h) => h.clone(),
            None => Tensor::zeros((b, c, n), x.dtype(), x.device())?,
        };
        let mut ys = Vec::with_capacity(t);
        for step in 0..t {
            let xt = x.narrow(1, step, 1)?.reshape((b, c, 1))?;
            let dt = delta.narrow(1, step, 1)?.reshape((b, c, 1))?;
            let bt = bm.narrow(1, step, 1)?.reshape((b, 1, n))?;
            let ct = cm.narrow(1, step, 1)?.reshape((b, 1, n))?;
            let decay = dt.broadcast_mul(&a.unsqueeze(0)?)?.exp()?;
            let inject = dt.broadcast_mul(&bt)?.broadcast_mul(&xt)?;
            h = ((decay * h)? + inject)?;
            let yt = h.broadcast_mul(&ct)?.sum(D::Minus1)?;
            let skip = xt.squeeze(2)?.broadcast_mul(&self.d)?;
            ys.push((yt + skip)?.unsqueeze(1)?);
        }
        Ok((Tensor::cat(&ys, 1)?, h))
    }

    /// Current parameter values as a reference-scan parameter set.
    pub fn to_params(&self) -> Result<ScanParams<f64>> {
        let flat = |t: &Tensor| -> Result<Vec<f64>> { Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?) };
        let (channels, state_dim) = self.a_log.dims2()?;
        Ok(ScanParams {
            channels,
            state_dim,
            a_log: flat(&self.a_log)?,
            w_delta: flat(&self.delta.weight)?,
            b_delta: flat(self.delta.bias.as_ref().expect("delta has bias"))?,
            w_b: flat(&self.b_proj.weight)?,
            w_c: flat(&self.c_proj.weight)?,
            d: flat(&self.d)?,
        })
    }
}

/// `x + out(SiLU(gate(x̂)) ⊙ (S(main(x̂)) + S(region(r̂))))` with layer-normed
/// inputs `x̂`, `r̂`.
pub struct CsmBlock {
    pub norm: LayerNorm,
    pub norm_region: LayerNorm,
    pub gate: Linear,
    pub main: Linear,
    pub region: Linear,
    pub scan: SelectiveScan,
    pub out: Linear,
}

impl CsmBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, state_dim: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), channels)?,
            norm_region: LayerNorm::new(store, &format!("{name}.norm_region"), channels)?,
            gate: Linear::new(store, &format!("{name}.gate"), channels, channels)?,
            main: Linear::new(store, &format!("{name}.main"), channels, channels)?,
            region: Linear::new(store, &format!("{name}.region"), channels, channels)?,
            scan: SelectiveScan::new(store, &format!("{name}.scan"), channels, state_dim)?,
            out: Linear::with_std(store, &format!("{name}.out"), channels, channels, 0.2 / (channels as f64).sqrt())?,
        })
    }

    pub fn forward(&self, x: &Tensor, region: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let xn = self.norm.forward(x)?;
        let gate = self.gate.forward(&xn)?.silu()?;
        let (mut mixed, state) = self.scan.forward(&self.main.forward(&xn)?, None)?;
        if let Some(r) = region {
            if r.dims() != x.dims() {
                return Err(Error::Input(format!(
                    "region branch shape {:?} differs from memory shape {:?}",
                    r.dims(),
                    x.dims()
                )));
            }
            let rn = self.norm_region.forward(r)?;
            let (ry, _) = self.scan.forward(&self.region.forward(&rn)?, None)?;
            mixed = (mixed + ry)?;
        }
        let y = (x + self.out.forward(&(gate * mixed)?)?)?;
        Ok((y, state))
    }
}

pub struct Csm {
    cfg: CsmConfig,
    pub blocks: Vec<CsmBlock>,
}

impl Csm {
    pub fn new(store: &mut ParamStore, cfg: CsmConfig) -> Result<Self> {
        let blocks = if cfg.identity {
            Vec::new()
        } else {
            (0..cfg.n_blocks)
                .map(|i| CsmBlock::new(store, &format!("csm.block{i}"), cfg.channels, cfg.state_dim))
                .collect::<Result<_>>()?
        };
        Ok(Self { cfg, blocks })
    }

    pub fn config(&self) -> &CsmConfig {
        &self.cfg
    }

    /// Pools the concatenated clip features and region features, then runs
    /// the block stack. Both inputs are `(B, N, c)`.
    pub fn forward(&self, clip_sequence: &Tensor, region_sequence: &Tensor) -> Result<LongMemory> {
        let pooled = overlap_pool(clip_sequence, self.cfg.clip_width)?;
        let region = overlap_pool(region_sequence, self.cfg.clip_width)?;
        self.forward_pooled(&pooled, &region)
    }

    /// Block stack on already pooled `F_c` and region features `(B, M, c)`.
    pub fn forward_pooled(&self, pooled: &Tensor, region: &Tensor) -> Result<LongMemory> {
        let mut x = pooled.clone();
        let mut state = None;
        for (i, block) in self.blocks.iter().enumerate() {
            let r = (i == 0 || self.cfg.region_in_all_blocks).then_some(region);
            let (y, s) = block.forward(&x, r)?;
            x = y;
            state = Some(s);
        }
        Ok(LongMemory {
            values: x,
            scan_state: state,
        })
    }
}

/// Cosine-similarity retrieval: `softmax(q̂ m̂ᵀ) m + q` with row-normalised
/// queries `q` `(B, L, c)` and memory rows `m` `(B, M, c)`. Returns the
/// enriched features and the attention weights `(B, L, M)`.
pub fn retrieve(queries: &Tensor, memory: &LongMemory) -> Result<(Tensor, Tensor)> {
    let m = &memory.values;
    if m.dim(1)? == 0 {
        return Err(Error::Input("retrieval from empty memory".into()));
    }
    if log::log_enabled!(log::Level::Debug) {
        let norms = queries.sqr()?.sum(D::Minus1)?.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let zero = norms.iter().filter(|v| **v == 0.0).count();
        if zero > 0 {
            debug!("{zero} zero-norm query rows use uniform retrieval weights");
        }
    }
    let qn = l2_normalize_rows(queries)?;
    let mn = l2_normalize_rows(m)?;
    let logits = qn.matmul(&mn.transpose(1, 2)?.contiguous()?)?;
    let weights = softmax_last(&logits)?;
    let out = (weights.matmul(m)? + queries)?;
    Ok((out, weights))
}

/// Temporal mean of the memory followed by a two-layer MLP, two logits
/// `{ineffective, effective}` per window.
pub struct EffectivenessHead {
    pub mlp: Mlp,
}

impl EffectivenessHead {
    pub fn new(store: &mut ParamStore, channels: usize) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, "effect_head", channels, 2 * channels, 2)?,
        })
    }

    pub fn forward(&self, memory: &LongMemory) -> Result<Tensor> {
        self.mlp.forward(&memory.values.mean(1)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut s = ParamStore::new(seed, DType::F64);
        s.normal("x", shape, 1.0).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    fn cfg(identity: bool) -> CsmConfig {
        CsmConfig {
            channels: 6,
            state_dim: 3,
            n_blocks: 2,
            clip_width: 4,
            region_in_all_blocks: true,
            identity,
        }
    }

    #[test]
    fn pool_window_layout() {
        assert_eq!(pool_windows(20, 4), vec![(0, 8), (4, 8), (8, 8), (12, 8)]);
        assert_eq!(pool_windows(5, 4), vec![(0, 5)]);
        assert_eq!(pool_windows(8, 4), vec![(0, 8)]);
    }

    #[test]
    fn overlap_pool_matches_index_oracle() {
        let x = random(&[2, 20, 3], 1);
        let pooled = overlap_pool(&x, 4).unwrap();
        assert_eq!(pooled.dims(), &[2, 4, 3]);
        let xv: Vec<Vec<Vec<f64>>> = x.to_vec3().unwrap();
        let pv: Vec<Vec<Vec<f64>>> = pooled.to_vec3().unwrap();
        for b in 0..2 {
            for m in 0..4 {
                for ch in 0..3 {
                    let oracle: f64 = (4 * m..4 * m + 8).map(|t| xv[b][t][ch]).sum::<f64>() / 8.0;
                    assert!((pv[b][m][ch] - oracle).abs() < 1e-12);
                }
            }
        }
        assert!(overlap_pool(&random(&[1, 1, 3], 2), 4).is_err());
    }

    #[test]
    fn tensor_scan_matches_reference() {
        let mut store = ParamStore::new(4, DType::F64);
        let scan = SelectiveScan::new(&mut store, "s", 5, 3).unwrap();
        let params = scan.to_params().unwrap();
        let x = random(&[2, 17, 5], 5);
        let (y, h) = scan.forward(&x, None).unwrap();
        let yv: Vec<Vec<Vec<f64>>> = y.to_vec3().unwrap();
        let hv: Vec<Vec<Vec<f64>>> = h.to_vec3().unwrap();
        let xv: Vec<Vec<Vec<f64>>> = x.to_vec3().unwrap();
        for b in 0..2 {
            let input = Matrix::new(17, 5, xv[b].concat());
            let (reference, state) = selective_scan_seq(&input, &params, None).unwrap();
            for t in 0..17 {
                for ch in 0..5 {
                    assert!((yv[b][t][ch] - reference.row(t)[ch]).abs() < 1e-10);
                }
            }
            for ch in 0..5 {
                for s in 0..3 {
                    assert!((hv[b][ch][s] - state.h[ch * 3 + s]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn tensor_scan_carry_resumes() {
        let mut store = ParamStore::new(6, DType::F64);
        let scan = SelectiveScan::new(&mut store, "s", 4, 2).unwrap();
        let x = random(&[1, 12, 4], 7);
        let (full, _) = scan.forward(&x, None).unwrap();
        let (head, h) = scan.forward(&x.narrow(1, 0, 5).unwrap(), None).unwrap();
        let (tail, _) = scan.forward(&x.narrow(1, 5, 7).unwrap(), Some(&h)).unwrap();
        let joined = Tensor::cat(&[head, tail], 1).unwrap();
        assert!(max_diff(&full, &joined) < 1e-12);
    }

    #[test]
    fn identity_ablation_passes_pooled_features() {
        let mut store = ParamStore::new(8, DType::F64);
        let csm = Csm::new(&mut store, cfg(true)).unwrap();
        assert_eq!(store.num_parameters(), 0);
        let x = random(&[1, 20, 6], 9);
        let mem = csm.forward(&x, &random(&[1, 20, 6], 10)).unwrap();
        assert_eq!(max_diff(&mem.values, &overlap_pool(&x, 4).unwrap()), 0.0);
        assert!(mem.scan_state.is_none());
    }

    #[test]
    fn blocks_keep_shape_and_use_region() {
        let mut store = ParamStore::new(11, DType::F64);
        let csm = Csm::new(&mut store, cfg(false)).unwrap();
        let x = random(&[2, 20, 6], 12);
        let a = csm.forward(&x, &random(&[2, 20, 6], 13)).unwrap();
        let b = csm.forward(&x, &random(&[2, 20, 6], 14)).unwrap();
        assert_eq!(a.values.dims(), &[2, 4, 6]);
        assert_eq!(a.scan_state.as_ref().unwrap().dims(), &[2, 6, 3]);
        assert!(max_diff(&a.values, &b.values) > 1e-9);
        let block = &csm.blocks[0];
        assert!(block.forward(&random(&[1, 4, 6], 15), Some(&random(&[1, 3, 6], 16))).is_err());
    }

    #[test]
    fn retrieval_from_single_row_adds_it() {
        let q = random(&[1, 7, 4], 17);
        let m = random(&[1, 1, 4], 18);
        let memory = LongMemory {
            values: m.clone(),
            scan_state: None,
        };
        let (out, w) = retrieve(&q, &memory).unwrap();
        assert!(w.to_vec3::<f64>().unwrap()[0].iter().all(|r| (r[0] - 1.0).abs() < 1e-15));
        let expected = q.broadcast_add(&m).unwrap();
        assert!(max_diff(&out, &expected) < 1e-12);
    }

    #[test]
    fn retrieval_weights_are_distributions_over_memory() {
        let q = random(&[2, 20, 5], 19);
        let m = random(&[2, 4, 5], 20);
        let memory = LongMemory {
            values: m.clone(),
            scan_state: None,
        };
        let (out, w) = retrieve(&q, &memory).unwrap();
        assert_eq!(w.dims(), &[2, 20, 4]);
        let sums: Vec<f64> = w.sum(2).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
        // The retrieved part is a convex combination of memory rows.
        let retrieved = (out - &q).unwrap();
        let rebuilt = w.matmul(&m).unwrap();
        assert!(max_diff(&retrieved, &rebuilt) < 1e-12);
    }

    #[test]
    fn retrieval_edge_cases() {
        let empty = LongMemory {
            values: Tensor::zeros((1, 0, 3), DType::F64, &Device::Cpu).unwrap(),
            scan_state: None,
        };
        assert!(retrieve(&random(&[1, 2, 3], 21), &empty).is_err());
        let memory = LongMemory {
            values: random(&[1, 3, 3], 22),
            scan_state: None,
        };
        let zero = Tensor::zeros((1, 1, 3), DType::F64, &Device::Cpu).unwrap();
        let (_, w) = retrieve(&zero, &memory).unwrap();
        assert!(w.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn long_reference_scan_stays_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (c, n, t) = (4, 3, 10_000);
        let mut v = |len: usize, s: f64| -> Vec<f64> { (0..len).map(|_| rng.random_range(-s..s)).collect() };
        let params = ScanParams {
            channels: c,
            state_dim: n,
            a_log: v(c * n, 1.0),
            w_delta: v(c * c, 0.5),
            b_delta: v(c, 0.5),
            w_b: v(c * n, 0.5),
            w_c: v(c * n, 0.5),
            d: v(c, 1.0),
        };
        let x = Matrix::new(t, c, v(t * c, 1.0));
        let (y, state) = selective_scan_seq(&x, &params, None).unwrap();
        assert!(y.data.iter().all(|v| v.is_finite() && v.abs() < 1e3));
        assert!(state.h.iter().all(|v| v.is_finite()));
    }
}
