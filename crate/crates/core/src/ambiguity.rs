//! Reference ambiguity: factor-permuting maps `T(v, c)` that reproduce the
//! weakly-labeled data distribution while breaking feature disentangling,
//! checked by exact enumeration over discrete factor spaces.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_rational::Rational64;
use num_traits::{One, Signed, Zero};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{grid_angle, grid_index, wrap_angle, FactorPair};
use crate::diagnostics::pca_embed;
use crate::error::{invalid, Result};

/// Finite factor space. Varying values are indices `0..p_v.len()`, common
/// values indices `0..p_c.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteFactorSpace {
    pub p_v: Vec<Rational64>,
    pub p_c: Vec<Rational64>,
}

impl DiscreteFactorSpace {
    pub fn new(p_v: Vec<Rational64>, p_c: Vec<Rational64>) -> Result<Self> {
        for (name, p) in [("p_v", &p_v), ("p_c", &p_c)] {
            if p.is_empty() || p.iter().any(|x| !x.is_positive()) {
                return Err(invalid("factor_space", format!("{name} must be non-empty and positive")));
            }
            if p.iter().copied().sum::<Rational64>() != Rational64::one() {
                return Err(invalid("factor_space", format!("{name} must sum to 1")));
            }
        }
        Ok(Self { p_v, p_c })
    }

    pub fn uniform(n_v: usize, n_c: usize) -> Result<Self> {
        let u = |n: usize| vec![Rational64::new(1, n.max(1) as i64); n];
        Self::new(u(n_v), u(n_c))
    }

    pub fn n_v(&self) -> usize {
        self.p_v.len()
    }

    pub fn n_c(&self) -> usize {
        self.p_c.len()
    }
}

/// Table `T[v][c] -> v'`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TMap {
    pub table: Vec<Vec<usize>>,
    /// The split set `𝒞`, sorted.
    pub subset: Vec<usize>,
}

impl TMap {
    pub fn identity(space: &DiscreteFactorSpace) -> Self {
        Self {
            table: (0..space.n_v()).map(|v| vec![v; space.n_c()]).collect(),
            subset: Vec::new(),
        }
    }

    pub fn get(&self, v: usize, c: usize) -> usize {
        self.table[v][c]
    }

    /// Whether every `T(·, c)` permutes the varying values. The literal
    /// two-point construction is not bijective; it collapses `{v_a, v_b}`.
    pub fn bijective_per_class(&self) -> bool {
        let n_c = self.table.first().map_or(0, Vec::len);
        (0..n_c).all(|c| {
            let mut seen = vec![false; self.table.len()];
            self.table.iter().all(|row| {
                let t = row[c];
                t < seen.len() && !std::mem::replace(&mut seen[t], true)
            })
        })
    }
}

fn subset_mass(space: &DiscreteFactorSpace, subset: &[usize]) -> Rational64 {
    subset.iter().map(|&c| space.p_c[c]).sum()
}

/// Identity off `{v_a, v_b}`; both map to `v_a` when `c ∈ 𝒞` and to `v_b`
/// otherwise.
pub fn build_t(space: &DiscreteFactorSpace, v_a: usize, v_b: usize, subset: &[usize]) -> Result<TMap> {
    let op = "build_T";
    if v_a == v_b || v_a >= space.n_v() || v_b >= space.n_v() {
        return Err(invalid(op, "v_a and v_b must be distinct varying values"));
    }
    if space.p_v[v_a] != space.p_v[v_b] {
        return Err(invalid(op, format!("p_v({v_a}) != p_v({v_b})")));
    }
    let mut sorted = subset.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != subset.len() || sorted.iter().any(|&c| c >= space.n_c()) {
        return Err(invalid(op, "subset must list distinct common values"));
    }
    let mass = subset_mass(space, &sorted);
    if mass != Rational64::new(1, 2) {
        return Err(invalid(op, format!("subset carries p_c mass {mass}, expected 1/2")));
    }
    Ok(build_t_unchecked(space, v_a, v_b, sorted))
}

/// The same table without the probability checks, for negative controls.
pub fn build_t_unchecked(space: &DiscreteFactorSpace, v_a: usize, v_b: usize, mut subset: Vec<usize>) -> TMap {
    subset.sort_unstable();
    let table = (0..space.n_v())
        .map(|v| {
            (0..space.n_c())
                .map(|c| match (v == v_a || v == v_b, subset.binary_search(&c).is_ok()) {
                    (false, _) => v,
                    (true, true) => v_a,
                    (true, false) => v_b,
                })
                .collect()
        })
        .collect();
    TMap { table, subset }
}

/// `v·(2c − 1)`, wrapped into `[-π, π)`.
pub fn mirror_t(v: f64, c: u8) -> Result<f64> {
    match c {
        0 | 1 => Ok(wrap_angle(v * (2.0 * f64::from(c) - 1.0))),
        _ => Err(invalid("mirror_T", format!("c must be 0 or 1, got {c}"))),
    }
}

/// `mirror_T` on an `n`-point angle grid, as a table over two classes.
pub fn mirror_tmap(n: usize) -> Result<TMap> {
    if n == 0 {
        return Err(invalid("mirror_T", "grid must be non-empty"));
    }
    let table = (0..n)
        .map(|k| {
            (0..2u8)
                .map(|c| mirror_t(grid_angle(k, n), c).map(|t| grid_index(t, n)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TMap { table, subset: vec![1] })
}

/// Law of `T(v, c)` pooled over `v ~ p_v`, `c ~ p_c`.
pub fn pooled_law(space: &DiscreteFactorSpace, tmap: &TMap) -> Vec<Rational64> {
    let mut law = vec![Rational64::zero(); space.n_v()];
    for (v, pv) in space.p_v.iter().enumerate() {
        for (c, pc) in space.p_c.iter().enumerate() {
            law[tmap.get(v, c)] += pv * pc;
        }
    }
    law
}

/// Exact total-variation distance between the generated pair law and the
/// data law `p(x1, x2) = Σ_c p_c(c) p_v(v1) p_v(v2)` for `x_i = f(v_i, c)`.
///
/// The generated pair is `[Dec(t1, c), Dec(t2, c)]` with `Dec(t, c) = f(t, c)`
/// and `t1, t2` independent draws of the encoder output `T(v, c)` under the
/// data distribution, so it reproduces the data exactly when that output
/// follows `p_v`.
pub fn verify_distribution_reproduction(space: &DiscreteFactorSpace, tmap: &TMap) -> Rational64 {
    let q = pooled_law(space, tmap);
    let mut tv = Rational64::zero();
    for pc in &space.p_c {
        for v1 in 0..space.n_v() {
            for v2 in 0..space.n_v() {
                let generated = pc * q[v1] * q[v2];
                let data = pc * space.p_v[v1] * space.p_v[v2];
                tv += (generated - data).abs();
            }
        }
    }
    tv / Rational64::from_integer(2)
}

/// A varying value whose code depends on the common factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Witness {
    pub v: usize,
    pub c1: usize,
    pub c2: usize,
}

/// Some `(v, c1, c2)` with `T(v, c1) ≠ T(v, c2)`, scanning in index order.
pub fn verify_disentangling_violation(tmap: &TMap) -> Option<Witness> {
    tmap.table.iter().enumerate().find_map(|(v, row)| {
        (0..row.len()).find_map(|c1| {
            (c1 + 1..row.len())
                .find(|&c2| row[c1] != row[c2])
                .map(|c2| Witness { v, c1, c2 })
        })
    })
}

/// Random `(v_a, v_b, 𝒞)` on a uniform space with an even number of classes.
pub fn random_configuration(space: &DiscreteFactorSpace, rng: &mut impl Rng) -> (usize, usize, Vec<usize>) {
    use rand::seq::index::sample;
    let vs = sample(rng, space.n_v(), 2);
    let subset = sample(rng, space.n_c(), space.n_c() / 2).into_vec();
    (vs.index(0), vs.index(1), subset)
}

/// One-sample Kolmogorov–Smirnov test against `U[a, b)`. Returns the
/// statistic and its asymptotic p-value (Stephens' small-sample correction).
pub fn ks_uniform(samples: &[f64], a: f64, b: f64) -> Result<(f64, f64)> {
    if samples.is_empty() || !(b > a) {
        return Err(invalid("ks_uniform", "need samples and a < b"));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let d = xs.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
        let f = ((x - a) / (b - a)).clamp(0.0, 1.0);
        d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n)
    });
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    Ok((d, kolmogorov_q(lambda)))
}

/// `Q(λ) = 2 Σ_{k≥1} (−1)^{k−1} exp(−2k²λ²)`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// KS results of `mirror_T(v, c)` with `v ~ U[-π, π)`, per class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MirrorCheck {
    pub c: u8,
    pub ks_statistic: f64,
    pub p_value: f64,
}

pub fn mirror_ks_check(n: usize, rng: &mut impl Rng) -> Result<Vec<MirrorCheck>> {
    (0..2u8)
        .map(|c| {
            let xs = (0..n)
                .map(|_| mirror_t(rng.random_range(-PI..PI), c))
                .collect::<Result<Vec<_>>>()?;
            let (d, p) = ks_uniform(&xs, -PI, PI)?;
            Ok(MirrorCheck { c, ks_statistic: d, p_value: p })
        })
        .collect()
}

/// Minimum class size for the alignment fit.
pub const MIN_CLASS_SAMPLES: usize = 8;

/// Mean absolute angular residual above which alignment is unreliable.
pub const UNRELIABLE_RESIDUAL: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAlignment {
    pub c: usize,
    pub n: usize,
    /// Angle in the embedding runs against `v`.
    pub reflected: bool,
    /// Rotation offset of the fitted alignment, radians.
    pub rotation: f64,
    /// Mean absolute angular residual, radians.
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub classes: Vec<ClassAlignment>,
    /// Classes with fewer than the minimum sample count.
    pub skipped: Vec<usize>,
    /// Fitted classes disagree on reflection.
    pub ambiguous: bool,
    pub mean_residual: f64,
    pub unreliable: bool,
}

/// Fits `θ ≈ s·v + φ` for `s ∈ {+1, −1}`; returns `(reflected, φ, residual)`.
fn fit_alignment(theta: &[f64], v: &[f64]) -> (bool, f64, f64) {
    let fit = |s: f64| {
        let (sx, sy) = theta.iter().zip(v).fold((0.0, 0.0), |(x, y), (t, v)| {
            let d = t - s * v;
            (x + d.cos(), y + d.sin())
        });
        let phi = sy.atan2(sx);
        let r = theta.iter().zip(v).map(|(t, v)| wrap_angle(t - s * v - phi).abs()).sum::<f64>() / theta.len() as f64;
        (phi, r)
    };
    let (p_pos, r_pos) = fit(1.0);
    let (p_neg, r_neg) = fit(-1.0);
    if r_neg < r_pos {
        (true, p_neg, r_neg)
    } else {
        (false, p_pos, r_pos)
    }
}

/// Projects varying features onto a global 2-D PCA basis and fits, per
/// class, a rotation plus optional reflection between the embedding angle
/// and the ground-truth viewpoint.
pub fn reference_consistency(features: &[Vec<f64>], factors: &[FactorPair]) -> Result<ConsistencyReport> {
    if features.len() != factors.len() {
        return Err(invalid("reference_consistency", "features and factors differ in length"));
    }
    let coords = pca_embed(features)?;
    let mut by_class: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (p, f) in coords.iter().zip(factors) {
        let e = by_class.entry(f.c).or_default();
        e.0.push(p[1].atan2(p[0]));
        e.1.push(f.v);
    }
    let mut classes = Vec::new();
    let mut skipped = Vec::new();
    for (c, (theta, v)) in by_class {
        if theta.len() < MIN_CLASS_SAMPLES {
            skipped.push(c);
            continue;
        }
        let (reflected, rotation, residual) = fit_alignment(&theta, &v);
        classes.push(ClassAlignment { c, n: theta.len(), reflected, rotation, residual });
    }
    let ambiguous = classes.windows(2).any(|w| w[0].reflected != w[1].reflected);
    let mean_residual = if classes.is_empty() {
        f64::NAN
    } else {
        classes.iter().map(|a| a.residual).sum::<f64>() / classes.len() as f64
    };
    Ok(ConsistencyReport {
        classes,
        skipped,
        ambiguous,
        unreliable: !(mean_residual <= UNRELIABLE_RESIDUAL),
        mean_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn r(n: i64, d: i64) -> Rational64 {
        Rational64::new(n, d)
    }

    #[test]
    fn construction_cases() {
        let s = DiscreteFactorSpace::uniform(4, 4).unwrap();
        let t = build_t(&s, 1, 2, &[0, 3]).unwrap();
        for c in 0..4 {
            assert_eq!((t.get(0, c), t.get(3, c)), (0, 3));
            let expect = if c == 0 || c == 3 { 1 } else { 2 };
            assert_eq!((t.get(1, c), t.get(2, c)), (expect, expect));
        }
        assert_eq!(pooled_law(&s, &t), s.p_v);
        assert!(!t.bijective_per_class());
    }

    #[test]
    fn construction_preconditions() {
        let s = DiscreteFactorSpace::new(vec![r(1, 2), r(1, 4), r(1, 4)], vec![r(1, 2), r(1, 2)]).unwrap();
        assert!(build_t(&s, 0, 1, &[0]).is_err());
        assert!(build_t(&s, 1, 2, &[0]).is_ok());
        assert!(build_t(&s, 1, 1, &[0]).is_err());
        assert!(build_t(&s, 1, 2, &[0, 1]).is_err());
        assert!(build_t(&s, 1, 2, &[0, 0]).is_err());
        assert!(DiscreteFactorSpace::new(vec![r(1, 2)], vec![r(1, 1)]).is_err());
    }

    #[test]
    fn reproduction_and_violation() {
        let s = DiscreteFactorSpace::uniform(8, 4).unwrap();
        let t = build_t(&s, 2, 5, &[1, 2]).unwrap();
        assert_eq!(verify_distribution_reproduction(&s, &t), Rational64::zero());
        let w = verify_disentangling_violation(&t).unwrap();
        assert_ne!(t.get(w.v, w.c1), t.get(w.v, w.c2));
        let id = TMap::identity(&s);
        assert_eq!(verify_distribution_reproduction(&s, &id), Rational64::zero());
        assert_eq!(verify_disentangling_violation(&id), None);
    }

    #[test]
    fn wrong_subset_mass_breaks_reproduction() {
        let s = DiscreteFactorSpace::new(vec![r(1, 4); 4], vec![r(3, 10), r(7, 10)]).unwrap();
        let t = build_t_unchecked(&s, 0, 1, vec![0]);
        assert!(verify_distribution_reproduction(&s, &t) > Rational64::zero());
    }

    #[test]
    fn mirror_examples() {
        let h = std::f64::consts::FRAC_PI_2;
        assert_eq!(mirror_t(h, 1).unwrap(), h);
        assert_eq!(mirror_t(h, 0).unwrap(), -h);
        assert_eq!(mirror_t(0.0, 0).unwrap(), 0.0);
        assert_eq!(mirror_t(0.0, 1).unwrap(), 0.0);
        assert_eq!(mirror_t(-PI, 0).unwrap(), -PI);
        assert!(mirror_t(1.0, 2).is_err());
        let t = mirror_tmap(12).unwrap();
        assert!(t.bijective_per_class());
        let w = verify_disentangling_violation(&t).unwrap();
        assert_eq!((w.c1, w.c2), (0, 1));
        assert_ne!(grid_angle(w.v, 12), 0.0);
    }

    #[test]
    fn ks_detects_non_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u: Vec<f64> = (0..5000).map(|_| rng.random_range(0.0..1.0)).collect();
        assert!(ks_uniform(&u, 0.0, 1.0).unwrap().1 > 0.01);
        let sq: Vec<f64> = u.iter().map(|x| x * x).collect();
        assert!(ks_uniform(&sq, 0.0, 1.0).unwrap().1 < 1e-6);
        assert!((kolmogorov_q(1.3581) - 0.05).abs() < 1e-3);
    }

    fn circle(n: usize, mirror_odd: bool) -> (Vec<Vec<f64>>, Vec<FactorPair>) {
        let mut feats = Vec::new();
        let mut facts = Vec::new();
        for c in 0..4 {
            for k in 0..n {
                let v = grid_angle(k, n);
                let s = if mirror_odd && c % 2 == 1 { -1.0 } else { 1.0 };
                feats.push(vec![v.cos(), s * v.sin(), 0.0]);
                facts.push(FactorPair { v, c });
            }
        }
        (feats, facts)
    }

    #[test]
    fn consistency_detector() {
        let (f, x) = circle(16, false);
        let rep = reference_consistency(&f, &x).unwrap();
        assert!(!rep.ambiguous && !rep.unreliable);
        assert!(rep.mean_residual < 1e-9);
        let (f, x) = circle(16, true);
        assert!(reference_consistency(&f, &x).unwrap().ambiguous);
        let (f, x) = circle(4, false);
        assert_eq!(reference_consistency(&f, &x).unwrap().skipped, vec![0, 1, 2, 3]);
    }
}
