// SPDX-License-Identifier: Apache-2.0

//! Orthonormal polynomial targets over finite input histories.
//!
//! A target is a product of normalized Legendre polynomials of delayed
//! inputs, `y(t) = Π_i P̃_{g_i}(U(t − d_i))`, with `P̃_g = √(2g+1)·P_g` so that
//! `E[P̃_g(u)²] = 1` for `u ~ uniform[−1, 1]`. Distinct multi-indices are then
//! orthonormal under i.i.d. uniform inputs.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_BASIS_CAP: usize = 1_000_000;

/// One target function: `(delay, degree)` pairs with strictly increasing
/// delays. The empty list is the constant function 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BasisIndex {
    terms: Vec<(usize, u32)>,
    pub channel: usize,
}

impl BasisIndex {
    pub fn new(mut terms: Vec<(usize, u32)>) -> Result<Self> {
        terms.sort_by_key(|&(d, _)| d);
        if terms.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidArgument(
                "basis index delays must be distinct".into(),
            ));
        }
        if terms.iter().any(|&(_, g)| g == 0) {
            return Err(Error::InvalidArgument(
                "basis index degrees must be >= 1".into(),
            ));
        }
        Ok(Self { terms, channel: 0 })
    }

    pub fn constant() -> Self {
        Self {
            terms: Vec::new(),
            channel: 0,
        }
    }

    /// Single linear term at `delay`.
    pub fn linear(delay: usize) -> Self {
        Self {
            terms: vec![(delay, 1)],
            channel: 0,
        }
    }

    pub fn terms(&self) -> &[(usize, u32)] {
        &self.terms
    }

    pub fn is_constant(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn total_degree(&self) -> u32 {
        self.terms.iter().map(|&(_, g)| g).sum()
    }

    pub fn max_delay(&self) -> usize {
        self.terms.last().map_or(0, |&(d, _)| d)
    }

    /// Memory depth `h = max_delay + 1`.
    pub fn memory_depth(&self) -> usize {
        self.max_delay() + 1
    }

    /// Degree at each delay `0..=max_delay`.
    fn dense_exponents(&self) -> Vec<u32> {
        let mut v = vec![0; self.memory_depth()];
        for &(d, g) in &self.terms {
            v[d] = g;
        }
        v
    }

    /// Graded order: total degree, then maximum delay, then the exponent
    /// vector over delays `0..=max_delay` compared lexicographically.
    pub fn graded_cmp(&self, other: &Self) -> Ordering {
        self.total_degree()
            .cmp(&other.total_degree())
            .then(self.max_delay().cmp(&other.max_delay()))
            .then_with(|| self.dense_exponents().cmp(&other.dense_exponents()))
    }
}

impl fmt::Display for BasisIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return f.write_str("1");
        }
        for (i, (d, g)) in self.terms.iter().enumerate() {
            if i > 0 {
                f.write_str("*")?;
            }
            write!(f, "{d}^{g}")?;
        }
        Ok(())
    }
}

impl FromStr for BasisIndex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "1" {
            return Ok(Self::constant());
        }
        let bad = || Error::InvalidArgument(format!("malformed basis index `{s}`"));
        let terms = s
            .split('*')
            .map(|term| {
                let (d, g) = term.split_once('^').ok_or_else(bad)?;
                Ok((
                    d.trim().parse().map_err(|_| bad())?,
                    g.trim().parse().map_err(|_| bad())?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        if terms.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(bad());
        }
        Self::new(terms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BasisSet {
    pub indices: Vec<BasisIndex>,
    pub max_degree: u32,
    pub max_delay: usize,
}

impl BasisSet {
    /// Explicit list of indices (diagnostics, subsets). Cutoffs are taken
    /// from the indices themselves.
    pub fn from_indices(indices: Vec<BasisIndex>) -> Self {
        let max_degree = indices.iter().map(BasisIndex::total_degree).max().unwrap_or(0);
        let max_delay = indices.iter().map(BasisIndex::max_delay).max().unwrap_or(0);
        Self {
            indices,
            max_degree,
            max_delay,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn binomial(n: u128, k: u128) -> u128 {
    debug_assert!(k <= n);
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

/// Number of nonconstant indices within the cutoffs: `C(L + g, g) − 1` with
/// `L = max_delay + 1` variables and total degree at most `g`.
pub fn basis_size(max_degree: u32, max_delay: usize) -> u128 {
    binomial(max_delay as u128 + 1 + max_degree as u128, max_degree as u128) - 1
}

pub fn enumerate_basis(max_degree: u32, max_delay: usize) -> Result<BasisSet> {
    enumerate_basis_capped(max_degree, max_delay, DEFAULT_BASIS_CAP)
}

pub fn enumerate_basis_capped(max_degree: u32, max_delay: usize, cap: usize) -> Result<BasisSet> {
    if max_degree == 0 {
        return Err(Error::InvalidArgument("max_degree must be >= 1".into()));
    }
    let size = basis_size(max_degree, max_delay);
    if size > cap as u128 {
        return Err(Error::BasisTooLarge { size, cap });
    }
    let mut indices = Vec::with_capacity(size as usize);
    let mut terms = Vec::new();
    fill(0, max_delay, max_degree, &mut terms, &mut indices);
    indices.sort_by(BasisIndex::graded_cmp);
    Ok(BasisSet {
        indices,
        max_degree,
        max_delay,
    })
}

fn fill(
    delay: usize,
    max_delay: usize,
    budget: u32,
    terms: &mut Vec<(usize, u32)>,
    out: &mut Vec<BasisIndex>,
) {
    if delay > max_delay {
        if !terms.is_empty() {
            out.push(BasisIndex {
                terms: terms.clone(),
                channel: 0,
            });
        }
        return;
    }
    fill(delay + 1, max_delay, budget, terms, out);
    for g in 1..=budget {
        terms.push((delay, g));
        fill(delay + 1, max_delay, budget - g, terms, out);
        terms.pop();
    }
}

/// `P̃_0(u), …, P̃_g(u)` into `out` (length `g + 1`).
pub fn normalized_legendre(u: f64, out: &mut [f64]) {
    // Plain Legendre recurrence, then scale by √(2k+1).
    let g = out.len();
    if g == 0 {
        return;
    }
    out[0] = 1.0;
    if g > 1 {
        out[1] = u;
    }
    for k in 1..g.saturating_sub(1) {
        let kf = k as f64;
        out[k + 1] = ((2.0 * kf + 1.0) * u * out[k] - kf * out[k - 1]) / (kf + 1.0);
    }
    for (k, v) in out.iter_mut().enumerate() {
        *v *= (2.0 * k as f64 + 1.0).sqrt();
    }
}

/// `P̃_g(u)` for a single degree.
pub fn legendre_normalized(degree: u32, u: f64) -> f64 {
    let mut buf = vec![0.0; degree as usize + 1];
    normalized_legendre(u, &mut buf);
    buf[degree as usize]
}

/// `history` holds `U(t − max_delay), …, U(t)`, most recent last.
pub fn evaluate_basis(index: &BasisIndex, history: &[f64]) -> Result<f64> {
    let required = index.memory_depth();
    if !index.is_constant() && history.len() < required {
        return Err(Error::InsufficientHistory {
            required,
            available: history.len(),
        });
    }
    let last = history.len().wrapping_sub(1);
    Ok(index
        .terms
        .iter()
        .map(|&(d, g)| legendre_normalized(g, history[last - d]))
        .product())
}

/// Precomputed `P̃_g(U(t))` for every degree and time step; rows of the target
/// matrix are produced on demand so `D × T` never has to be materialized.
#[derive(Debug, Clone)]
pub struct TargetEvaluator {
    /// `table[g − 1][t] = P̃_g(U(t))`.
    table: Vec<Vec<f64>>,
    offset: usize,
    len: usize,
}

impl TargetEvaluator {
    /// Targets over `inputs[offset..]`, where `offset` is the largest delay
    /// that will be requested.
    pub fn new(inputs: &[f64], max_degree: u32, offset: usize) -> Result<Self> {
        if inputs.len() <= offset {
            return Err(Error::InsufficientHistory {
                required: offset + 1,
                available: inputs.len(),
            });
        }
        let mut table = vec![vec![0.0; inputs.len()]; max_degree as usize];
        let mut buf = vec![0.0; max_degree as usize + 1];
        for (t, &u) in inputs.iter().enumerate() {
            normalized_legendre(u, &mut buf);
            for g in 0..max_degree as usize {
                table[g][t] = buf[g + 1];
            }
        }
        Ok(Self {
            table,
            offset,
            len: inputs.len() - offset,
        })
    }

    pub fn for_basis(inputs: &[f64], basis: &BasisSet) -> Result<Self> {
        Self::new(inputs, basis.max_degree.max(1), basis.max_delay)
    }

    /// Effective number of time steps, `T − offset`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    /// `out[k] = y(offset + k)`.
    pub fn fill_row(&self, index: &BasisIndex, out: &mut [f64]) {
        out.fill(1.0);
        self.multiply_row(index, out);
    }

    fn multiply_row(&self, index: &BasisIndex, out: &mut [f64]) {
        debug_assert!(index.max_delay() <= self.offset);
        for &(d, g) in &index.terms {
            let col = &self.table[g as usize - 1][self.offset - d..self.offset - d + self.len];
            for (o, &p) in out.iter_mut().zip(col) {
                *o *= p;
            }
        }
    }

    pub fn row(&self, index: &BasisIndex) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        self.fill_row(index, &mut out);
        out
    }
}

/// Target matrix with rows `y_ℓ(t)` for `t = max_delay..T` (0-based), the
/// first `max_delay` columns being dropped for lack of history.
#[derive(Debug, Clone)]
pub struct TargetMatrix {
    pub y: DMatrix<f64>,
    /// Number of dropped leading columns.
    pub offset: usize,
}

impl TargetMatrix {
    pub fn effective_len(&self) -> usize {
        self.y.ncols()
    }
}

pub fn evaluate_targets(basis: &BasisSet, inputs: &DMatrix<f64>) -> Result<TargetMatrix> {
    let channel = basis.indices.iter().map(|i| i.channel).max().unwrap_or(0);
    if channel >= inputs.nrows() {
        return Err(Error::mismatch("inputs", format!("> {channel} channels"), inputs.nrows()));
    }
    let t = inputs.ncols();
    if t <= basis.max_delay {
        return Err(Error::InsufficientHistory {
            required: basis.max_delay + 1,
            available: t,
        });
    }
    let u: Vec<f64> = inputs.row(0).iter().copied().collect();
    let eval = TargetEvaluator::for_basis(&u, basis)?;
    let mut y = DMatrix::zeros(basis.len(), eval.len());
    let mut row = vec![0.0; eval.len()];
    for (l, idx) in basis.indices.iter().enumerate() {
        eval.fill_row(idx, &mut row);
        for (k, v) in row.iter().enumerate() {
            y[(l, k)] = *v;
        }
    }
    Ok(TargetMatrix {
        y,
        offset: basis.max_delay,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn idx(terms: &[(usize, u32)]) -> BasisIndex {
        BasisIndex::new(terms.to_vec()).unwrap()
    }

    /// Composite Simpson on [−1, 1] of f, divided by 2 (uniform density).
    fn uniform_expectation(f: impl Fn(f64) -> f64) -> f64 {
        let m = 20_000;
        let h = 2.0 / m as f64;
        let mut s = f(-1.0) + f(1.0);
        for i in 1..m {
            let x = -1.0 + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0 / 2.0
    }

    #[test]
    fn legendre_is_orthonormal_under_uniform() {
        for g in 0..=6u32 {
            for h in 0..=6u32 {
                let e = uniform_expectation(|u| legendre_normalized(g, u) * legendre_normalized(h, u));
                let want = if g == h { 1.0 } else { 0.0 };
                assert!((e - want).abs() < 1e-10, "g={g} h={h} e={e}");
            }
        }
    }

    #[test]
    fn evaluate_examples() {
        assert_relative_eq!(evaluate_basis(&idx(&[(0, 1)]), &[1.0]).unwrap(), 3f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(evaluate_basis(&idx(&[(0, 2)]), &[1.0]).unwrap(), 5f64.sqrt(), epsilon = 1e-15);
        assert_eq!(evaluate_basis(&BasisIndex::constant(), &[0.3, -0.2]).unwrap(), 1.0);
        assert_eq!(evaluate_basis(&BasisIndex::constant(), &[]).unwrap(), 1.0);
        // history is oldest first: U(t−1) = 0.5, U(t) = −0.25
        let v = evaluate_basis(&idx(&[(0, 1), (1, 2)]), &[0.5, -0.25]).unwrap();
        let p2 = 5f64.sqrt() * (3.0 * 0.25 - 1.0) / 2.0;
        assert_relative_eq!(v, 3f64.sqrt() * -0.25 * p2, epsilon = 1e-15);
    }

    #[test]
    fn evaluate_requires_history() {
        let err = evaluate_basis(&idx(&[(3, 1)]), &[0.1, 0.2]).unwrap_err();
        assert!(matches!(err, Error::InsufficientHistory { required: 4, available: 2 }));
    }

    #[test]
    fn enumerate_linear_only() {
        let b = enumerate_basis(1, 2).unwrap();
        assert_eq!(b.indices, vec![idx(&[(0, 1)]), idx(&[(1, 1)]), idx(&[(2, 1)])]);
    }

    #[test]
    fn enumerate_degree_two_delay_one() {
        let b = enumerate_basis(2, 1).unwrap();
        assert_eq!(
            b.indices,
            vec![
                idx(&[(0, 1)]),
                idx(&[(1, 1)]),
                idx(&[(0, 2)]),
                idx(&[(1, 2)]),
                idx(&[(0, 1), (1, 1)]),
            ]
        );
    }

    #[test]
    fn enumerate_counts_match_monomial_oracle() {
        assert_eq!(enumerate_basis(3, 2).unwrap().len(), 19);
        assert_eq!(enumerate_basis(3, 20).unwrap().len(), 2023);
        assert_eq!(enumerate_basis(1, 50).unwrap().len(), 51);
        assert_eq!(basis_size(3, 2), 19);
    }

    #[test]
    fn enumerate_rejects_large_and_zero() {
        assert!(matches!(enumerate_basis_capped(3, 50, 1000), Err(Error::BasisTooLarge { .. })));
        assert!(enumerate_basis(0, 3).is_err());
    }

    /// Brute force over dense exponent vectors.
    fn brute_force(max_degree: u32, max_delay: usize) -> HashSet<BasisIndex> {
        let vars = max_delay + 1;
        let mut out = HashSet::new();
        let total = (max_degree as usize + 1).pow(vars as u32);
        for code in 0..total {
            let mut c = code;
            let mut terms = Vec::new();
            let mut deg = 0;
            for d in 0..vars {
                let g = (c % (max_degree as usize + 1)) as u32;
                c /= max_degree as usize + 1;
                if g > 0 {
                    terms.push((d, g));
                    deg += g;
                }
            }
            if deg >= 1 && deg <= max_degree {
                out.insert(BasisIndex::new(terms).unwrap());
            }
        }
        out
    }

    #[test]
    fn enumeration_is_complete() {
        for (g, h) in [(1, 0), (1, 4), (2, 3), (3, 3), (4, 2), (5, 1)] {
            let b = enumerate_basis(g, h).unwrap();
            let set: HashSet<_> = b.indices.iter().cloned().collect();
            assert_eq!(set.len(), b.len(), "duplicates for ({g},{h})");
            assert_eq!(set, brute_force(g, h), "mismatch for ({g},{h})");
            assert!(b.indices.windows(2).all(|w| w[0].graded_cmp(&w[1]) == Ordering::Less));
        }
    }

    #[test]
    fn text_form() {
        let i = idx(&[(0, 2), (3, 1)]);
        assert_eq!(i.to_string(), "0^2*3^1");
        assert_eq!("0^2*3^1".parse::<BasisIndex>().unwrap(), i);
        assert_eq!("1".parse::<BasisIndex>().unwrap(), BasisIndex::constant());
        assert!("3^1*0^2".parse::<BasisIndex>().is_err());
        assert!("0^0".parse::<BasisIndex>().is_err());
        assert!("x".parse::<BasisIndex>().is_err());
    }

    proptest! {
        #[test]
        fn text_form_round_trips(g in 1u32..4, h in 0usize..6, pick in any::<prop::sample::Index>()) {
            let b = enumerate_basis(g, h).unwrap();
            let i = pick.get(&b.indices);
            prop_assert_eq!(&i.to_string().parse::<BasisIndex>().unwrap(), i);
        }
    }

    #[test]
    fn targets_linear_rows() {
        let inputs = crate::reservoir::draw_inputs(1, 40, 3);
        let b = enumerate_basis(1, 3).unwrap();
        let tm = evaluate_targets(&b, &inputs).unwrap();
        assert_eq!(tm.effective_len(), 37);
        for (l, i) in b.indices.iter().enumerate() {
            let d = i.max_delay();
            for k in 0..tm.effective_len() {
                let t = k + 3;
                assert_relative_eq!(tm.y[(l, k)], 3f64.sqrt() * inputs[(0, t - d)], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn targets_constant_row_and_short_input() {
        let inputs = crate::reservoir::draw_inputs(1, 5, 3);
        let b = BasisSet::from_indices(vec![BasisIndex::constant()]);
        let tm = evaluate_targets(&b, &inputs).unwrap();
        assert!(tm.y.iter().all(|&v| v == 1.0));
        assert_eq!(tm.y.nrows(), 1);
        let b = enumerate_basis(1, 5).unwrap();
        assert!(evaluate_targets(&b, &inputs).is_err());
    }

    #[test]
    fn evaluator_matches_pointwise() {
        let inputs = crate::reservoir::draw_inputs(1, 60, 8);
        let u: Vec<f64> = inputs.iter().copied().collect();
        let b = enumerate_basis(3, 4).unwrap();
        let ev = TargetEvaluator::for_basis(&u, &b).unwrap();
        for i in &b.indices {
            let row = ev.row(i);
            for (k, v) in row.iter().enumerate() {
                let t = k + 4;
                let direct = evaluate_basis(i, &u[t - 4..=t]).unwrap();
                assert_relative_eq!(*v, direct, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn gram_matrix_is_identity() {
        let t = 100_000;
        let inputs = crate::reservoir::draw_inputs(1, t + 3, 21);
        let b = enumerate_basis(2, 3).unwrap();
        let tm = evaluate_targets(&b, &inputs).unwrap();
        let tf = tm.effective_len() as f64;
        let gram = &tm.y * tm.y.transpose() / tf;
        let band = 5.0 / tf.sqrt();
        let dev = (gram - DMatrix::identity(b.len(), b.len())).amax();
        assert!(dev <= band, "max deviation {dev} > {band}");
    }
}
