use std::sync::Arc;

use rand::Rng;

use super::gemm::{gemm, View, ViewMut};
use super::tape::{Dropout, Var};
use super::Float;
use crate::error::{Error, Result};

/// Boolean visibility matrix: entry `(t, s)` says whether query `t` may attend
/// to key `s`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..rows * cols).map(|i| f(i / cols.max(1), i % cols.max(1))).collect();
        Self { rows, cols, allowed }
    }

    /// Lower-triangular mask over a sequence of length `len`.
    pub fn causal(len: usize) -> Self {
        Self::from_fn(len, len, |t, s| s <= t)
    }

    /// Causal mask for `rows` new queries appended after `cols - rows`
    /// already-processed positions.
    pub fn causal_offset(rows: usize, cols: usize) -> Result<Self> {
        if rows > cols {
            return Err(Error::contract(format!(
                "causal_offset needs cols >= rows, got {rows}x{cols}"
            )));
        }
        let offset = cols - rows;
        Ok(Self::from_fn(rows, cols, |t, s| s <= offset + t))
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| true)
    }

    /// Masks every column flagged as padding.
    pub fn with_key_padding(mut self, padding: &[bool]) -> Result<Self> {
        if padding.len() != self.cols {
            return Err(Error::Shape {
                op: "with_key_padding",
                lhs: vec![self.rows, self.cols],
                rhs: vec![padding.len()],
            });
        }
        for t in 0..self.rows {
            for (s, &pad) in padding.iter().enumerate() {
                if pad {
                    self.allowed[t * self.cols + s] = false;
                }
            }
        }
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allows(&self, t: usize, s: usize) -> bool {
        self.allowed[t * self.cols + s]
    }

    pub fn is_lower_triangular(&self) -> bool {
        (0..self.rows).all(|t| (0..self.cols).all(|s| s <= t || !self.allows(t, s)))
    }

    /// Every query must be able to see at least one key.
    pub fn validate(&self) -> Result<()> {
        for t in 0..self.rows {
            if !(0..self.cols).any(|s| self.allows(t, s)) {
                return Err(Error::contract(format!("attention row {t} is fully masked")));
            }
        }
        Ok(())
    }
}

/// Query rows `q_start..q_start+mask.rows()` attend to key rows
/// `k_start..k_start+mask.cols()`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionBlock {
    pub q_start: usize,
    pub k_start: usize,
    pub mask: AttentionMask,
}

/// A set of blocks that together cover each query row exactly once.
///
/// Packing several sequences into one matrix and giving each its own block
/// keeps the projections as single large matrix products while attention stays
/// within a sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    blocks: Vec<AttentionBlock>,
    q_rows: usize,
    k_rows: usize,
}

impl AttentionLayout {
    pub fn new(blocks: Vec<AttentionBlock>, q_rows: usize, k_rows: usize) -> Result<Self> {
        let mut covered = vec![false; q_rows];
        for b in &blocks {
            b.mask.validate()?;
            if b.q_start + b.mask.rows() > q_rows || b.k_start + b.mask.cols() > k_rows {
                return Err(Error::contract(format!(
                    "attention block at ({}, {}) of size {}x{} exceeds {}x{}",
                    b.q_start,
                    b.k_start,
                    b.mask.rows(),
                    b.mask.cols(),
                    q_rows,
                    k_rows
                )));
            }
            for c in &mut covered[b.q_start..b.q_start + b.mask.rows()] {
                if *c {
                    return Err(Error::contract("attention blocks overlap in query rows"));
                }
                *c = true;
            }
        }
        if let Some(row) = covered.iter().position(|c| !c) {
            return Err(Error::contract(format!("query row {row} is not covered by any attention block")));
        }
        Ok(Self {
            blocks,
            q_rows,
            k_rows,
        })
    }

    /// One block over the whole query and key range.
    pub fn single(mask: AttentionMask) -> Result<Self> {
        let (r, c) = (mask.rows(), mask.cols());
        Self::new(
            vec![AttentionBlock {
                q_start: 0,
                k_start: 0,
                mask,
            }],
            r,
            c,
        )
    }

    pub fn blocks(&self) -> &[AttentionBlock] {
        &self.blocks
    }

    pub(crate) fn check_extent(&self, nq: usize, nk: usize) -> Result<()> {
        if nq != self.q_rows || nk != self.k_rows {
            return Err(Error::Shape {
                op: "attention layout",
                lhs: vec![self.q_rows, self.k_rows],
                rhs: vec![nq, nk],
            });
        }
        Ok(())
    }
}

pub(crate) struct AttentionRecord<T> {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub layout: Arc<AttentionLayout>,
    pub heads: usize,
    pub probs: Vec<T>,
    pub drop_mask: Option<Vec<T>>,
}

pub(crate) struct AttentionForward<T> {
    pub out: Vec<T>,
    pub probs: Vec<T>,
    pub drop_mask: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn forward<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    d: usize,
    layout: &AttentionLayout,
    heads: usize,
    mut dropout: Option<Dropout<'_>>,
    keep: bool,
) -> AttentionForward<T> {
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let total: usize = layout.blocks.iter().map(|b| b.mask.rows() * b.mask.cols() * heads).sum();
    let mut out = vec![T::zero(); layout.q_rows * d];
    let mut probs = if keep { Vec::with_capacity(total) } else { Vec::new() };
    let active_p = dropout.as_ref().map(|dr| dr.p).filter(|p| *p > 0.0);
    let mut drop_mask = active_p.map(|_| Vec::with_capacity(total));
    let mut scores = Vec::new();

    for b in &layout.blocks {
        let (rows, cols) = (b.mask.rows(), b.mask.cols());
        for h in 0..heads {
            scores.clear();
            scores.resize(rows * cols, T::zero());
            gemm(
                scale,
                View::new(q, b.q_start * d + h * dh, rows, dh, d, 1),
                View::new(k, b.k_start * d + h * dh, cols, dh, d, 1).t(),
                T::zero(),
                ViewMut::dense(&mut scores, rows, cols),
            );
            masked_softmax(&mut scores, &b.mask);
            if keep {
                probs.extend_from_slice(&scores);
            }
            if let (Some(p), Some(mask), Some(dr)) = (active_p, drop_mask.as_mut(), dropout.as_mut()) {
                let kept = T::lit(1.0 / (1.0 - p));
                for s in scores.iter_mut() {
                    let m = if dr.rng.random::<f64>() < p { T::zero() } else { kept };
                    *s *= m;
                    mask.push(m);
                }
            }
            gemm(
                T::one(),
                View::dense(&scores, rows, cols),
                View::new(v, b.k_start * d + h * dh, cols, dh, d, 1),
                T::zero(),
                ViewMut::new(&mut out, b.q_start * d + h * dh, rows, dh, d, 1),
            );
        }
    }
    AttentionForward {
        out,
        probs,
        drop_mask: if keep { drop_mask } else { None },
    }
}

fn masked_softmax<T: Float>(scores: &mut [T], mask: &AttentionMask) {
    let cols = mask.cols();
    for (t, row) in scores.chunks_mut(cols.max(1)).enumerate() {
        let mut max = T::neg_infinity();
        for (s, v) in row.iter().enumerate() {
            if mask.allows(t, s) && *v > max {
                max = *v;
            }
        }
        let mut total = T::zero();
        for (s, v) in row.iter_mut().enumerate() {
            if mask.allows(t, s) {
                *v = (*v - max).exp();
                total += *v;
            } else {
                *v = T::zero();
            }
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

pub(crate) fn backward<T: Float>(
    rec: &AttentionRecord<T>,
    q: &[T],
    k: &[T],
    v: &[T],
    g: &[T],
    wants: [bool; 3],
) -> [Option<Vec<T>>; 3] {
    let heads = rec.heads;
    let d = q.len() / rec.layout.q_rows.max(1);
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut dq = wants[0].then(|| vec![T::zero(); q.len()]);
    let mut dk = wants[1].then(|| vec![T::zero(); k.len()]);
    let mut dv = wants[2].then(|| vec![T::zero(); v.len()]);
    let mut offset = 0;
    let mut dp = Vec::new();
    let mut pd = Vec::new();

    for b in &rec.layout.blocks {
        let (rows, cols) = (b.mask.rows(), b.mask.cols());
        let n = rows * cols;
        for h in 0..heads {
            let p = &rec.probs[offset..offset + n];
            let dmask = rec.drop_mask.as_ref().map(|m| &m[offset..offset + n]);
            offset += n;
            let g_h = View::new(g, b.q_start * d + h * dh, rows, dh, d, 1);
            let v_h = View::new(v, b.k_start * d + h * dh, cols, dh, d, 1);

            pd.clear();
            match dmask {
                Some(m) => pd.extend(p.iter().zip(m).map(|(p, m)| *p * *m)),
                None => pd.extend_from_slice(p),
            }
            if let Some(dv) = dv.as_mut() {
                gemm(
                    T::one(),
                    View::dense(&pd, rows, cols).t(),
                    g_h,
                    T::one(),
                    ViewMut::new(dv, b.k_start * d + h * dh, cols, dh, d, 1),
                );
            }
            if dq.is_none() && dk.is_none() {
                continue;
            }
            dp.clear();
            dp.resize(n, T::zero());
            gemm(T::one(), g_h, v_h.t(), T::zero(), ViewMut::dense(&mut dp, rows, cols));
            if let Some(m) = dmask {
                dp.iter_mut().zip(m).for_each(|(x, m)| *x *= *m);
            }
            for t in 0..rows {
                let row = t * cols..(t + 1) * cols;
                let dot: T = dp[row.clone()].iter().zip(&p[row.clone()]).map(|(a, b)| *a * *b).sum();
                for i in row {
                    dp[i] = p[i] * (dp[i] - dot);
                }
            }
            if let Some(dq) = dq.as_mut() {
                gemm(
                    scale,
                    View::dense(&dp, rows, cols),
                    View::new(k, b.k_start * d + h * dh, cols, dh, d, 1),
                    T::one(),
                    ViewMut::new(dq, b.q_start * d + h * dh, rows, dh, d, 1),
                );
            }
            if let Some(dk) = dk.as_mut() {
                gemm(
                    scale,
                    View::dense(&dp, rows, cols).t(),
                    View::new(q, b.q_start * d + h * dh, rows, dh, d, 1),
                    T::one(),
                    ViewMut::new(dk, b.k_start * d + h * dh, cols, dh, d, 1),
                );
            }
        }
    }
    [dq, dk, dv]
}
