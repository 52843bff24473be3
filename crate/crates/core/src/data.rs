//! Procedural weakly-labeled images: a bank of asymmetric polygon shapes
//! (the common factor `c`) rendered at an in-plane orientation (the varying
//! factor `v`), with a template-matching inverse of the renderer.

use std::f64::consts::{PI, TAU};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Mean-squared residual above which [`InverseIndex::invert`] results should
/// be treated as "no shape recognized".
pub const REJECT_RESIDUAL: f64 = 0.05;

/// Viewpoints per full turn used by the renderer inverse (1° steps).
pub const INVERSE_GRID: usize = 360;

const MARKER_VALUE: f64 = 0.15;
const MARKER_RADIUS: f64 = 0.16;
const OUTLINE_VERTICES: usize = 32;
const EGG: f64 = 0.15;

/// Ground-truth latent pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorPair {
    /// Orientation in radians, in `[-π, π)`.
    pub v: f64,
    /// Shape identity.
    pub c: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub image_size: usize,
    /// Number of shape identities `K` in the full bank.
    pub identities: usize,
    /// Discrete viewpoints per turn; `None` samples `v` continuously.
    /// Serialized as a count with `0` meaning continuous.
    #[serde(with = "viewpoint_count")]
    pub viewpoints: Option<usize>,
    pub bank_seed: u64,
    /// Subsamples per pixel side for anti-aliasing.
    pub supersample: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            identities: 24,
            viewpoints: Some(24),
            bank_seed: 7,
            supersample: 4,
        }
    }
}

mod viewpoint_count {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(v.unwrap_or(0) as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        let n = usize::deserialize(d)?;
        Ok((n > 0).then_some(n))
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(v: f64) -> f64 {
    let w = (v + PI).rem_euclid(TAU) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Angle of viewpoint `k` on an `n`-step grid starting at `-π`. The fraction
/// is reduced first so that coinciding points of different grids are
/// bit-identical.
pub fn grid_angle(k: usize, n: usize) -> f64 {
    let g = gcd(k, n).max(1);
    -PI + TAU * (k / g) as f64 / (n / g) as f64
}

/// Nearest viewpoint index on an `n`-step grid.
pub fn grid_index(v: f64, n: usize) -> usize {
    let t = (wrap_angle(v) + PI) / TAU * n as f64;
    (t.round() as usize) % n
}

/// One identity: a star-shaped polygon with a fill level and an off-center
/// marker dot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeDef {
    pub id: usize,
    /// Polygon vertices in normalized coordinates (image spans `[-1, 1]²`).
    pub vertices: Vec<(f64, f64)>,
    pub fill: f64,
    pub marker: (f64, f64),
}

impl ShapeDef {
    fn value_at(&self, x: f64, y: f64) -> f64 {
        let (mx, my) = self.marker;
        if (x - mx).powi(2) + (y - my).powi(2) < MARKER_RADIUS * MARKER_RADIUS {
            return MARKER_VALUE;
        }
        let mut inside = false;
        let n = self.vertices.len();
        let mut j = n - 1;
        for i in 0..n {
            let (xi, yi) = self.vertices[i];
            let (xj, yj) = self.vertices[j];
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        if inside {
            self.fill
        } else {
            0.0
        }
    }
}

/// A set of shape identities, sorted by id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeBank {
    shapes: Vec<ShapeDef>,
}

impl ShapeBank {
    /// Generates `k` identities deterministically from `seed`.
    pub fn generate(k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(invalid("shape_bank", "need at least one identity"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Identities are the cells of a (fill level × outline size) grid,
        // assigned in random order. A smooth, low-dimensional family lets a
        // model trained on some identities render unseen ones.
        let n_fill = (((k as f64) * 2.0 / 3.0).sqrt().round() as usize).max(1);
        let n_size = k.div_ceil(n_fill);
        let spread = |i: usize, n: usize, lo: f64, hi: f64| {
            if n == 1 {
                0.5 * (lo + hi)
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        };
        let mut cells: Vec<(usize, usize)> = (0..n_fill).flat_map(|f| (0..n_size).map(move |z| (f, z))).collect();
        cells.shuffle(&mut rng);
        let shapes = cells
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(id, (f, z))| {
                let minor = spread(z, n_size, 0.45, 0.8);
                // An egg-shaped outline, fuller toward the frame's +x axis.
                let vertices = (0..OUTLINE_VERTICES)
                    .map(|i| {
                        let a = TAU * i as f64 / OUTLINE_VERTICES as f64;
                        let ellipse = minor / ((minor * a.cos()).powi(2) + a.sin().powi(2)).sqrt();
                        let r = 0.95 * ellipse * (1.0 + EGG * a.cos()) / (1.0 + EGG);
                        (r * a.cos(), r * a.sin())
                    })
                    .collect();
                // Every marker sits on the +x axis of its shape frame, so `v = 0`
                // means the same heading for all identities.
                ShapeDef {
                    id,
                    vertices,
                    fill: spread(f, n_fill, 0.55, 1.0),
                    marker: (0.45, 0.0),
                }
            })
            .collect();
        Ok(Self { shapes })
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn identities(&self) -> Vec<usize> {
        self.shapes.iter().map(|s| s.id).collect()
    }

    pub fn shapes(&self) -> &[ShapeDef] {
        &self.shapes
    }

    /// Position of identity `c` within the bank.
    pub fn position(&self, c: usize) -> Result<usize> {
        self.shapes
            .binary_search_by_key(&c, |s| s.id)
            .map_err(|_| Error::UnknownIdentity {
                id: c,
                size: self.shapes.len(),
            })
    }

    pub fn get(&self, c: usize) -> Result<&ShapeDef> {
        Ok(&self.shapes[self.position(c)?])
    }

    /// Sub-bank holding the listed identities.
    pub fn subset(&self, ids: &[usize]) -> Result<Self> {
        let mut shapes = ids
            .iter()
            .map(|&c| self.get(c).cloned())
            .collect::<Result<Vec<_>>>()?;
        shapes.sort_by_key(|s| s.id);
        shapes.dedup_by_key(|s| s.id);
        Ok(Self { shapes })
    }
}

/// Disjoint train/test identity split, deterministic per seed.
pub fn make_split(bank: &ShapeBank, seed: u64, n_train: usize, n_test: usize) -> Result<(ShapeBank, ShapeBank)> {
    if n_train + n_test > bank.len() || n_train == 0 || n_test == 0 {
        return Err(invalid(
            "make_split",
            format!("cannot split {} identities into {n_train}/{n_test}", bank.len()),
        ));
    }
    let mut ids = bank.identities();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((bank.subset(&ids[..n_train])?, bank.subset(&ids[n_train..n_train + n_test])?))
}

/// The rendering function `f(v, c)`: a `1 × S × S` image with values in `[0, 1]`.
pub fn render(v: f64, c: usize, bank: &ShapeBank, cfg: &DataConfig) -> Result<Tensor> {
    let shape = bank.get(c)?;
    let s = cfg.image_size;
    let ss = cfg.supersample.max(1);
    let (sin, cos) = wrap_angle(v).sin_cos();
    let inv = 1.0 / (ss * ss) as f64;
    let mut data = Vec::with_capacity(s * s);
    for i in 0..s {
        for j in 0..s {
            let mut acc = 0.0;
            for a in 0..ss {
                let y = ((i as f64 + (a as f64 + 0.5) / ss as f64) / s as f64) * 2.0 - 1.0;
                for b in 0..ss {
                    let x = ((j as f64 + (b as f64 + 0.5) / ss as f64) / s as f64) * 2.0 - 1.0;
                    // Rotate the sample point by -v into the shape frame.
                    acc += shape.value_at(cos * x + sin * y, -sin * x + cos * y);
                }
            }
            data.push(acc * inv);
        }
    }
    Tensor::new(&[1, s, s], data)
}

/// Weakly-labeled sample: `x1, x2` share `c`, `x3` is independent.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub x1: Tensor,
    pub x2: Tensor,
    pub x3: Tensor,
    pub f1: FactorPair,
    pub f2: FactorPair,
    pub f3: FactorPair,
}

/// Renders on demand, caching every grid viewpoint when `v` is discrete.
#[derive(Clone, Debug)]
pub struct Renderer {
    bank: ShapeBank,
    cfg: DataConfig,
    cache: Option<Vec<Vec<Tensor>>>,
}

impl Renderer {
    pub fn new(bank: ShapeBank, cfg: DataConfig) -> Result<Self> {
        let cache = match cfg.viewpoints {
            Some(0) => return Err(invalid("renderer", "viewpoints must be >= 1")),
            Some(n) => Some(
                bank.identities()
                    .iter()
                    .map(|&c| (0..n).map(|k| render(grid_angle(k, n), c, &bank, &cfg)).collect())
                    .collect::<Result<Vec<Vec<_>>>>()?,
            ),
            None => None,
        };
        Ok(Self { bank, cfg, cache })
    }

    pub fn bank(&self) -> &ShapeBank {
        &self.bank
    }

    pub fn config(&self) -> &DataConfig {
        &self.cfg
    }

    pub fn render(&self, f: FactorPair) -> Result<Tensor> {
        if let (Some(cache), Some(n)) = (&self.cache, self.cfg.viewpoints) {
            let k = grid_index(f.v, n);
            if grid_angle(k, n) == wrap_angle(f.v) {
                return Ok(cache[self.bank.position(f.c)?][k].clone());
            }
        }
        render(f.v, f.c, &self.bank, &self.cfg)
    }

    /// `v ~ p_v`: uniform on `[-π, π)`, snapped to the viewpoint grid when discrete.
    pub fn sample_v(&self, rng: &mut impl Rng) -> f64 {
        match self.cfg.viewpoints {
            Some(n) => grid_angle(rng.random_range(0..n), n),
            None => wrap_angle(rng.random_range(-PI..PI)),
        }
    }

    /// `c ~ p_c`: uniform over the bank's identities.
    pub fn sample_c(&self, rng: &mut impl Rng) -> usize {
        self.bank.shapes[rng.random_range(0..self.bank.len())].id
    }

    pub fn sample_factors(&self, rng: &mut impl Rng) -> FactorPair {
        let v = self.sample_v(rng);
        FactorPair { v, c: self.sample_c(rng) }
    }

    /// Draws `c1, c3 ~ p_c` and `v1, v2, v3 ~ p_v` independently.
    pub fn sample_triplet(&self, rng: &mut impl Rng) -> Result<Triplet> {
        let c1 = self.sample_c(rng);
        let c3 = self.sample_c(rng);
        let v1 = self.sample_v(rng);
        let v2 = self.sample_v(rng);
        let v3 = self.sample_v(rng);
        let f1 = FactorPair { v: v1, c: c1 };
        let f2 = FactorPair { v: v2, c: c1 };
        let f3 = FactorPair { v: v3, c: c3 };
        Ok(Triplet {
            x1: self.render(f1)?,
            x2: self.render(f2)?,
            x3: self.render(f3)?,
            f1,
            f2,
            f3,
        })
    }
}

/// Best template match for an image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InverseMatch {
    pub factors: FactorPair,
    /// Mean-squared pixel residual to the matched template.
    pub residual: f64,
}

impl InverseMatch {
    pub fn rejected(&self) -> bool {
        self.residual > REJECT_RESIDUAL
    }
}

/// Nearest-template inverse `f⁻¹ = [f_v⁻¹, f_c⁻¹]` over a 1° viewpoint grid.
pub struct InverseIndex {
    ids: Vec<usize>,
    /// `templates[class][k]`, flattened images.
    templates: Vec<Vec<Vec<f64>>>,
    pixels: usize,
}

const COARSE_STRIDE: usize = 10;
const REFINE_CLASSES: usize = 3;

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

impl InverseIndex {
    pub fn build(bank: &ShapeBank, cfg: &DataConfig) -> Result<Self> {
        let ids = bank.identities();
        let templates = ids
            .iter()
            .map(|&c| {
                (0..INVERSE_GRID)
                    .map(|k| render(grid_angle(k, INVERSE_GRID), c, bank, cfg).map(Tensor::into_data))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ids,
            templates,
            pixels: cfg.image_size * cfg.image_size,
        })
    }

    /// Coarse search every 10°, then a full 1° search within ±10° of the
    /// coarse optimum for the best few classes.
    pub fn invert(&self, image: &[f64]) -> Result<InverseMatch> {
        if image.len() != self.pixels {
            return Err(Error::Shape {
                op: "inverse_factors",
                lhs: vec![image.len()],
                rhs: vec![self.pixels],
            });
        }
        let mut coarse: Vec<(f64, usize, usize)> = self
            .templates
            .iter()
            .enumerate()
            .map(|(ci, row)| {
                (0..INVERSE_GRID)
                    .step_by(COARSE_STRIDE)
                    .map(|k| (mse(image, &row[k]), ci, k))
                    .fold((f64::INFINITY, ci, 0), |a, b| if b.0 < a.0 { b } else { a })
            })
            .collect();
        coarse.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut best = (f64::INFINITY, 0usize, 0usize);
        for &(_, ci, k0) in coarse.iter().take(REFINE_CLASSES) {
            for d in 0..=2 * COARSE_STRIDE {
                let k = (k0 + INVERSE_GRID + d - COARSE_STRIDE) % INVERSE_GRID;
                let e = mse(image, &self.templates[ci][k]);
                if e < best.0 {
                    best = (e, ci, k);
                }
            }
        }
        Ok(InverseMatch {
            factors: FactorPair {
                v: grid_angle(best.2, INVERSE_GRID),
                c: self.ids[best.1],
            },
            residual: best.0,
        })
    }
}

/// Convenience wrapper: builds an index and inverts a single image.
pub fn inverse_factors(image: &Tensor, bank: &ShapeBank, cfg: &DataConfig) -> Result<InverseMatch> {
    InverseIndex::build(bank, cfg)?.invert(image.data())
}

const DATASET_MAGIC: &[u8; 4] = b"DLAB";
const DATASET_VERSION: u32 = 1;

/// Header of a dumped dataset file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub image_size: u32,
    pub channels: u32,
    pub identities: u32,
    pub count: u64,
}

/// One labeled image.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub v: f64,
    pub c: u32,
    pub pixels: Vec<f64>,
}

/// Writes `DLAB` little-endian records: magic, version u32, image_size u32,
/// channels u32, K u32, count u64, then per record `v: f64, c: u32, pixels: f64[]`.
pub fn write_dataset(mut w: impl Write, header: &DatasetHeader, records: &[Record]) -> Result<()> {
    let per = (header.image_size * header.image_size * header.channels) as usize;
    if records.len() as u64 != header.count {
        return Err(Error::Format(format!(
            "header count {} but {} records",
            header.count,
            records.len()
        )));
    }
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&header.image_size.to_le_bytes())?;
    w.write_all(&header.channels.to_le_bytes())?;
    w.write_all(&header.identities.to_le_bytes())?;
    w.write_all(&header.count.to_le_bytes())?;
    for r in records {
        if r.pixels.len() != per {
            return Err(Error::Format(format!("record has {} pixels, expected {per}", r.pixels.len())));
        }
        w.write_all(&r.v.to_le_bytes())?;
        w.write_all(&r.c.to_le_bytes())?;
        for p in &r.pixels {
            w.write_all(&p.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

pub fn read_dataset(mut r: impl Read) -> Result<(DatasetHeader, Vec<Record>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("not a DLAB dataset".into()));
    }
    let version = read_u32(&mut r)?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let header = DatasetHeader {
        image_size: read_u32(&mut r)?,
        channels: read_u32(&mut r)?,
        identities: read_u32(&mut r)?,
        count: read_u64(&mut r)?,
    };
    let per = (header.image_size * header.image_size * header.channels) as usize;
    let mut records = Vec::with_capacity(header.count.min(1 << 20) as usize);
    for _ in 0..header.count {
        let v = read_f64(&mut r)?;
        let c = read_u32(&mut r)?;
        let pixels = (0..per).map(|_| read_f64(&mut r)).collect::<Result<_>>()?;
        records.push(Record { v, c, pixels });
    }
    Ok((header, records))
}

pub fn save_dataset(path: &Path, header: &DatasetHeader, records: &[Record]) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(&mut buf, header, records)?;
    crate::checkpoint::write_atomic(path, &buf)
}

pub fn load_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Record>)> {
    read_dataset(std::io::BufReader::new(std::fs::File::open(path)?))
}
