//! Quantitative evaluation: nearest-neighbour retrieval mAP, transfer error
//! against ground truth, shortcut detection and the common-factor statistic.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{grid_index, FactorPair, InverseIndex, Renderer};
use crate::error::{invalid, Result};
use crate::nn::{Nets, NetConfig, ModelParams};
use crate::tensor::Tensor;

/// Images processed per forward pass during evaluation.
const CHUNK: usize = 64;

/// Viewpoint label granularity when `v` is continuous.
pub const DEFAULT_VIEW_BINS: usize = 24;

/// Anything that can transfer the varying factor of one image onto the
/// common factor of another: `Dec(N_v(v_src), N_c(c_src))`.
pub trait TransferModel {
    fn transfer(&self, v_src: &[Tensor], c_src: &[Tensor]) -> Result<Vec<Tensor>>;
}

fn unstack(batch: &Tensor) -> Result<Vec<Tensor>> {
    let shape = &batch.shape()[1..];
    let per: usize = shape.iter().product();
    batch.data().chunks(per).map(|d| Tensor::new(shape, d.to_vec())).collect()
}

/// Trained encoder/decoder in eval mode.
pub struct NetTransfer<'a> {
    pub nets: Nets<'a>,
}

impl<'a> NetTransfer<'a> {
    pub fn new(cfg: &'a NetConfig, params: &'a ModelParams) -> Self {
        Self { nets: Nets::new(cfg, params) }
    }
}

impl TransferModel for NetTransfer<'_> {
    fn transfer(&self, v_src: &[Tensor], c_src: &[Tensor]) -> Result<Vec<Tensor>> {
        if v_src.len() != c_src.len() {
            return Err(invalid("transfer", "source lists differ in length"));
        }
        let mut out = Vec::with_capacity(v_src.len());
        for (a, b) in v_src.chunks(CHUNK).zip(c_src.chunks(CHUNK)) {
            let (nv, _) = self.nets.encode_batch(&Tensor::stack(a)?)?;
            let (_, nc) = self.nets.encode_batch(&Tensor::stack(b)?)?;
            out.extend(unstack(&self.nets.decode_batch(&nv, &nc)?)?);
        }
        Ok(out)
    }
}

/// The analytically ideal model, simulated as `f(f_v⁻¹(v_src), f_c⁻¹(c_src))`.
pub struct IdealTransfer<'a> {
    pub renderer: &'a Renderer,
    pub index: &'a InverseIndex,
}

impl TransferModel for IdealTransfer<'_> {
    fn transfer(&self, v_src: &[Tensor], c_src: &[Tensor]) -> Result<Vec<Tensor>> {
        v_src
            .iter()
            .zip(c_src)
            .map(|(a, b)| {
                let v = self.index.invert(a.data())?.factors.v;
                let c = self.index.invert(b.data())?.factors.c;
                self.renderer.render(FactorPair { v, c })
            })
            .collect()
    }
}

/// The total-shortcut model: the decoder reproduces the `v` source.
pub struct CopyVSource;

impl TransferModel for CopyVSource {
    fn transfer(&self, v_src: &[Tensor], _c_src: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(v_src.to_vec())
    }
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Leave-one-out nearest-neighbour mean average precision. Each query ranks
/// every other sample by Euclidean distance (ties by index) and scores the
/// average precision of retrieving its own label.
pub fn nn_map(features: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let n = features.len();
    if n != labels.len() {
        return Err(invalid("nn_map", "features and labels differ in length"));
    }
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    if counts.len() < 2 {
        return Err(invalid("nn_map", "need at least two distinct labels"));
    }
    if counts.values().any(|&k| k < 2) {
        return Err(invalid("nn_map", "every label needs at least two samples"));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(invalid("nn_map", "ragged feature matrix"));
    }
    let mut total = 0.0;
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    for q in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != q).map(|j| {
            let dist: f64 = features[q].iter().zip(&features[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            (dist, j)
        }));
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let (mut hits, mut ap) = (0usize, 0.0);
        for (rank, &(_, j)) in order.iter().enumerate() {
            if labels[j] == labels[q] {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        total += ap / hits as f64;
    }
    Ok(total / n as f64)
}

/// Projection onto the top two principal components of mean-centred
/// features. Components are sign-normalised so the largest-magnitude loading
/// is positive.
pub fn pca_embed(features: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = features.len();
    if n < 3 {
        return Err(invalid("pca_embed", "need at least 3 samples"));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(invalid("pca_embed", "ragged or empty feature matrix"));
    }
    let mut x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    for j in 0..d {
        let m = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-m);
    }
    let total: f64 = x.iter().map(|v| v * v).sum();
    let scale = features.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    if total <= 1e-24 * scale * scale * (n * d) as f64 {
        return Err(invalid("pca_embed", "features have zero variance"));
    }
    let cov = x.transpose() * &x / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axis = |k: usize| -> Vec<f64> {
        let Some(&col) = idx.get(k) else { return vec![0.0; d] };
        let mut v: Vec<f64> = eig.eigenvectors.column(col).iter().copied().collect();
        let lead = v.iter().fold(0.0f64, |a, &b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            v.iter_mut().for_each(|e| *e = -*e);
        }
        v
    };
    let (a0, a1) = (axis(0), axis(1));
    Ok((0..n)
        .map(|i| {
            let row = x.row(i);
            let p = |a: &[f64]| row.iter().zip(a).map(|(r, w)| r * w).sum::<f64>();
            [p(&a0), p(&a1)]
        })
        .collect())
}

/// Mean per-pixel squared error of `Dec(N_v(x1), N_c(x2))` against the
/// ground-truth render `f(v1, c2)` over `n` independent draws.
pub fn transfer_error(model: &dyn TransferModel, renderer: &Renderer, n: usize, rng: &mut impl Rng) -> Result<f64> {
    if n == 0 {
        return Err(invalid("transfer_error", "n must be >= 1"));
    }
    let mut total = 0.0;
    let mut left = n;
    while left > 0 {
        let m = left.min(CHUNK);
        let mut xs1 = Vec::with_capacity(m);
        let mut xs2 = Vec::with_capacity(m);
        let mut targets = Vec::with_capacity(m);
        for _ in 0..m {
            let f1 = renderer.sample_factors(rng);
            let f2 = renderer.sample_factors(rng);
            xs1.push(renderer.render(f1)?);
            xs2.push(renderer.render(f2)?);
            targets.push(renderer.render(FactorPair { v: f1.v, c: f2.c })?);
        }
        let out = model.transfer(&xs1, &xs2)?;
        total += out.iter().zip(&targets).map(|(o, t)| mse(o, t)).sum::<f64>();
        left -= m;
    }
    Ok(total / n as f64)
}

fn distinct_identity(renderer: &Renderer, c1: usize, rng: &mut impl Rng) -> Result<usize> {
    if renderer.bank().len() < 2 {
        return Err(invalid("shortcut_index", "need at least two identities"));
    }
    loop {
        let c = renderer.sample_c(rng);
        if c != c1 {
            return Ok(c);
        }
    }
}

/// Fraction of draws where `x_{3⊕1} = Dec(N_v(x3), N_c(x1))` is strictly
/// closer in pixels to `x3` than to the correct target `f(v3, c1)`. The
/// identities `c1 ≠ c3` are drawn distinct so the two candidates differ.
pub fn shortcut_index(model: &dyn TransferModel, renderer: &Renderer, n: usize, rng: &mut impl Rng) -> Result<f64> {
    if n == 0 {
        return Err(invalid("shortcut_index", "n must be >= 1"));
    }
    let mut hits = 0usize;
    let mut left = n;
    while left > 0 {
        let m = left.min(CHUNK);
        let mut xs1 = Vec::with_capacity(m);
        let mut xs3 = Vec::with_capacity(m);
        let mut targets = Vec::with_capacity(m);
        for _ in 0..m {
            let c1 = renderer.sample_c(rng);
            let c3 = distinct_identity(renderer, c1, rng)?;
            let (v1, v3) = (renderer.sample_v(rng), renderer.sample_v(rng));
            xs1.push(renderer.render(FactorPair { v: v1, c: c1 })?);
            xs3.push(renderer.render(FactorPair { v: v3, c: c3 })?);
            targets.push(renderer.render(FactorPair { v: v3, c: c1 })?);
        }
        let fakes = model.transfer(&xs3, &xs1)?;
        hits += fakes
            .iter()
            .zip(xs3.iter().zip(&targets))
            .filter(|(f, (x3, t))| mse(f, x3) < mse(f, t))
            .count();
        left -= m;
    }
    Ok(hits as f64 / n as f64)
}

/// Identity-mismatch statistics of real and fake pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommonStat {
    /// Mismatch rate of `f_c⁻¹(x1)` vs `f_c⁻¹(x2)`; zero by construction.
    pub stat_real: f64,
    /// Mismatch rate of `f_c⁻¹(x1)` vs `f_c⁻¹(x_{3⊕1})`.
    pub stat_fake: f64,
    /// Fake images whose inverse residual exceeded the rejection threshold
    /// (each also counted as a mismatch).
    pub rejected: usize,
    pub n: usize,
}

/// Draws triplets with `sample_triplet` and compares identities recovered by
/// template inversion, using 0/1 mismatch as the distance on `c`.
pub fn common_stat(
    model: &dyn TransferModel,
    renderer: &Renderer,
    index: &InverseIndex,
    n: usize,
    rng: &mut impl Rng,
) -> Result<CommonStat> {
    if n == 0 {
        return Err(invalid("common_stat", "n must be >= 1"));
    }
    let (mut real_mis, mut fake_mis, mut rejected) = (0usize, 0usize, 0usize);
    let mut left = n;
    while left > 0 {
        let m = left.min(CHUNK);
        let ts = (0..m).map(|_| renderer.sample_triplet(rng)).collect::<Result<Vec<_>>>()?;
        let xs1: Vec<Tensor> = ts.iter().map(|t| t.x1.clone()).collect();
        let xs3: Vec<Tensor> = ts.iter().map(|t| t.x3.clone()).collect();
        let fakes = model.transfer(&xs3, &xs1)?;
        for (t, fake) in ts.iter().zip(&fakes) {
            let c1 = index.invert(t.x1.data())?;
            let c2 = index.invert(t.x2.data())?;
            if c1.factors.c != c2.factors.c || c1.rejected() || c2.rejected() {
                real_mis += 1;
            }
            let cf = index.invert(fake.data())?;
            if cf.rejected() {
                rejected += 1;
                fake_mis += 1;
            } else if cf.factors.c != c1.factors.c {
                fake_mis += 1;
            }
        }
        left -= m;
    }
    Ok(CommonStat {
        stat_real: real_mis as f64 / n as f64,
        stat_fake: fake_mis as f64 / n as f64,
        rejected,
        n,
    })
}

/// One row of the PCA embedding export.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaPoint {
    pub sample_id: usize,
    pub x: f64,
    pub y: f64,
    pub v_true: f64,
    pub c_true: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seed: u64,
    /// Draws for transfer error, shortcut index and common statistic.
    pub n_draws: usize,
    /// Samples per identity for retrieval when `v` is continuous.
    pub per_identity: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { seed: 0, n_draws: 512, per_identity: 24 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map_v: f64,
    pub map_c: f64,
    pub transfer_mse: f64,
    pub shortcut_index: f64,
    pub common_stat: CommonStat,
    pub n_retrieval: usize,
    pub pca_coords: Vec<PcaPoint>,
}

impl EvalReport {
    pub fn write_pca_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "sample_id,x,y,v_true,c_true")?;
        for p in &self.pca_coords {
            writeln!(w, "{},{:?},{:?},{:?},{}", p.sample_id, p.x, p.y, p.v_true, p.c_true)?;
        }
        Ok(())
    }
}

/// Retrieval samples: every (identity, viewpoint) grid point when `v` is
/// discrete, otherwise `per_identity` random viewpoints per identity.
/// Returns factors and their viewpoint labels.
pub fn retrieval_set(renderer: &Renderer, per_identity: usize, rng: &mut impl Rng) -> (Vec<FactorPair>, Vec<usize>) {
    let ids = renderer.bank().identities();
    let mut factors = Vec::new();
    let mut labels = Vec::new();
    match renderer.config().viewpoints {
        Some(n) => {
            for &c in &ids {
                for k in 0..n {
                    factors.push(FactorPair { v: crate::data::grid_angle(k, n), c });
                    labels.push(k);
                }
            }
        }
        None => {
            for &c in &ids {
                for _ in 0..per_identity {
                    let v = renderer.sample_v(rng);
                    factors.push(FactorPair { v, c });
                    labels.push(grid_index(v, DEFAULT_VIEW_BINS));
                }
            }
        }
    }
    (factors, labels)
}

/// Full report for trained nets on the renderer's identities (normally the
/// held-out split). Deterministic in `(params, cfg.seed)`.
pub fn evaluate(
    net: &NetConfig,
    params: &ModelParams,
    renderer: &Renderer,
    index: &InverseIndex,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = NetTransfer::new(net, params);

    let (factors, v_labels) = retrieval_set(renderer, cfg.per_identity, &mut rng);
    let images = factors.iter().map(|f| renderer.render(*f)).collect::<Result<Vec<_>>>()?;
    let mut fv = Vec::with_capacity(images.len());
    let mut fc = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        for feat in model.nets.encode(&Tensor::stack(chunk)?)? {
            fv.push(feat.n_v);
            fc.push(feat.n_c);
        }
    }
    let c_labels: Vec<usize> = factors.iter().map(|f| f.c).collect();
    let map_v = nn_map(&fv, &v_labels)?;
    let map_c = nn_map(&fc, &c_labels)?;
    let pca_coords = pca_embed(&fv)?
        .into_iter()
        .zip(&factors)
        .enumerate()
        .map(|(i, (p, f))| PcaPoint { sample_id: i, x: p[0], y: p[1], v_true: f.v, c_true: f.c })
        .collect();

    let transfer_mse = transfer_error(&model, renderer, cfg.n_draws, &mut rng)?;
    let shortcut = shortcut_index(&model, renderer, cfg.n_draws, &mut rng)?;
    let common = common_stat(&model, renderer, index, cfg.n_draws, &mut rng)?;
    Ok(EvalReport {
        map_v,
        map_c,
        transfer_mse,
        shortcut_index: shortcut,
        common_stat: common,
        n_retrieval: factors.len(),
        pca_coords,
    })
}
