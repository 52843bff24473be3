//! Central finite-difference checking of tape gradients, plus a registry of
//! small cases covering every differentiable op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{backward, NormKind, Tape, Var, LEAKY_SLOPE};
use crate::error::Result;
use crate::losses;
use crate::nn::{Forward, Mode, ModelParams, NetConfig, NormMode, Track};
use crate::tensor::Tensor;

/// A scalar-valued function of a list of parameter tensors, built on a tape.
pub type ScalarFn = dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

/// Gradients of `f` at `params` from the tape.
pub fn analytic_gradients(f: &ScalarFn, params: &[Tensor]) -> Result<Vec<Tensor>> {
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = backward(loss)?;
    Ok(vars.iter().map(|v| grads.wrt(*v)).collect())
}

fn evaluate(f: &ScalarFn, params: &[Tensor]) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let loss = f(&tape, &vars)?;
    let v = loss.value();
    Ok(v.data()[0])
}

/// Central differences `(f(p + h) - f(p - h)) / 2h` at the listed
/// coordinates of each parameter (`None` means every coordinate).
pub fn numeric_gradients(
    f: &ScalarFn,
    params: &[Tensor],
    h: f64,
    coords: &[Option<Vec<usize>>],
) -> Result<Vec<Vec<(usize, f64)>>> {
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for (pi, sel) in coords.iter().enumerate() {
        let indices: Vec<usize> = match sel {
            Some(s) => s.clone(),
            None => (0..params[pi].len()).collect(),
        };
        let mut column = Vec::with_capacity(indices.len());
        for i in indices {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + h;
            let up = evaluate(f, &work)?;
            work[pi].data_mut()[i] = orig - h;
            let down = evaluate(f, &work)?;
            work[pi].data_mut()[i] = orig;
            column.push((i, (up - down) / (2.0 * h)));
        }
        out.push(column);
    }
    Ok(out)
}

/// `|analytic − numeric| / max(1e-8, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-8)
}

fn max_error(analytic: &[Tensor], numeric: &[Vec<(usize, f64)>]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, col)| col.iter().map(move |&(i, n)| relative_error(a.data()[i], n)))
        .fold(0.0, f64::max)
}

/// Maximum relative error between tape and central-difference gradients
/// over every coordinate of every parameter.
pub fn finite_diff_check(f: &ScalarFn, params: &[Tensor], h: f64) -> Result<f64> {
    let analytic = analytic_gradients(f, params)?;
    let numeric = numeric_gradients(f, params, h, &vec![None; params.len()])?;
    Ok(max_error(&analytic, &numeric))
}

/// Like [`finite_diff_check`] but only at up to `per_param` randomly chosen
/// coordinates per parameter tensor.
pub fn finite_diff_check_sampled(
    f: &ScalarFn,
    params: &[Tensor],
    h: f64,
    per_param: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<Option<Vec<usize>>> = params
        .iter()
        .map(|p| {
            if p.len() <= per_param {
                None
            } else {
                Some((0..per_param).map(|_| rng.random_range(0..p.len())).collect())
            }
        })
        .collect();
    let analytic = analytic_gradients(f, params)?;
    let numeric = numeric_gradients(f, params, h, &coords)?;
    Ok(max_error(&analytic, &numeric))
}

/// One entry of the op registry: parameters and a scalar function that
/// exercises a single op.
pub struct OpCase {
    pub name: &'static str,
    pub params: Vec<Tensor>,
    pub f: Box<ScalarFn>,
    /// Coordinates checked per parameter tensor; `None` checks all.
    pub sample: Option<usize>,
}

/// Step used by [`check_case`].
pub const DEFAULT_STEP: f64 = 1e-5;

/// Maximum relative error of one registry case.
pub fn check_case(case: &OpCase, h: f64, seed: u64) -> Result<f64> {
    match case.sample {
        Some(k) => finite_diff_check_sampled(case.f.as_ref(), &case.params, h, k, seed),
        None => finite_diff_check(case.f.as_ref(), &case.params, h),
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Values in `[-1, 1]` kept at least `band` away from zero.
fn away_from_kink(rng: &mut ChaCha8Rng, shape: &[usize], band: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(band..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

/// Reduces `out` to a scalar through a fixed random weighting so every
/// output element carries a distinct upstream gradient.
fn weighted_sum<'t>(tape: &'t Tape, out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(uniform(&mut rng, &out.shape(), 0.5, 1.5));
    Ok(out.mul(w)?.sum())
}

macro_rules! case {
    ($name:expr, $params:expr, |$tape:ident, $p:ident| $body:expr) => {
        OpCase {
            name: $name,
            params: $params,
            f: Box::new(move |$tape: &Tape, $p: &[Var]| {
                let out: Var = $body?;
                weighted_sum($tape, out, 99)
            }),
            sample: None,
        }
    };
}

/// Every differentiable op on the tape, each wrapped in a small case.
pub fn op_registry(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    vec![
        case!("add", vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)], |_t, p| p[0].add(p[1])),
        case!("sub", vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)], |_t, p| p[0].sub(p[1])),
        case!("mul", vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)], |_t, p| p[0].mul(p[1])),
        case!("add_scalar", vec![uniform(r, &[5], -1.0, 1.0)], |_t, p| Ok::<_, crate::Error>(p[0].add_scalar(0.7))),
        case!("scale", vec![uniform(r, &[5], -1.0, 1.0)], |_t, p| Ok::<_, crate::Error>(p[0].scale(-1.3))),
        case!("matmul", vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)], |_t, p| p[0].matmul(p[1])),
        case!("mean", vec![uniform(r, &[2, 3], -1.0, 1.0)], |_t, p| Ok::<_, crate::Error>(p[0].square().mean())),
        case!("sum", vec![uniform(r, &[2, 3], -1.0, 1.0)], |_t, p| Ok::<_, crate::Error>(p[0].square().sum())),
        case!("square", vec![uniform(r, &[6], -1.0, 1.0)], |_t, p| Ok::<_, crate::Error>(p[0].square())),
        case!("sigmoid", vec![uniform(r, &[6], -3.0, 3.0)], |_t, p| Ok::<_, crate::Error>(p[0].sigmoid())),
        case!("leaky_relu", vec![away_from_kink(r, &[8], 1e-3)], |_t, p| Ok::<_, crate::Error>(p[0].leaky_relu(LEAKY_SLOPE))),
        case!("relu", vec![away_from_kink(r, &[8], 1e-3)], |_t, p| Ok::<_, crate::Error>(p[0].relu())),
        case!("log_eps", vec![uniform(r, &[6], 0.1, 1.0)], |_t, p| p[0].log_eps(1e-12)),
        case!("concat", vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 2], -1.0, 1.0)], |_t, p| Var::concat(&[p[0], p[1]], 1)),
        case!("reshape", vec![uniform(r, &[2, 6], -1.0, 1.0)], |_t, p| Ok::<_, crate::Error>(p[0].reshape(&[3, 4])?.square())),
        case!("slice", vec![uniform(r, &[3, 5], -1.0, 1.0)], |_t, p| p[0].slice(1, 1, 3)),
        case!("conv2d", vec![uniform(r, &[2, 3, 6, 5], -1.0, 1.0), uniform(r, &[4, 3, 3, 3], -1.0, 1.0)], |_t, p| p[0].conv2d(p[1], 2, 1)),
        case!("conv_transpose2d", vec![uniform(r, &[2, 4, 3, 3], -1.0, 1.0), uniform(r, &[4, 3, 4, 4], -1.0, 1.0)], |_t, p| p[0].conv_transpose2d(p[1], 2, 1)),
        case!("add_bias", vec![uniform(r, &[2, 3, 2, 2], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)], |_t, p| p[0].add_bias(p[1])),
        case!("affine", vec![uniform(r, &[2, 3, 2, 2], -1.0, 1.0), uniform(r, &[3], 0.5, 1.5), uniform(r, &[3], -1.0, 1.0)], |_t, p| p[0].affine(p[1], p[2])),
        case!("normalize_instance", vec![uniform(r, &[2, 3, 3, 3], -1.0, 1.0)], |_t, p| Ok::<_, crate::Error>(p[0].normalize(NormKind::Instance)?.0)),
        case!("normalize_batch", vec![uniform(r, &[3, 2, 2, 3], -1.0, 1.0)], |_t, p| Ok::<_, crate::Error>(p[0].normalize(NormKind::Batch)?.0)),
        case!("global_avg_pool", vec![uniform(r, &[2, 3, 3, 2], -1.0, 1.0)], |_t, p| p[0].global_avg_pool()),
    ]
}

/// Tiny networks used by the model-level cases.
pub fn tiny_net() -> NetConfig {
    NetConfig {
        image_size: 8,
        channels: 1,
        dim_v: 2,
        dim_c: 2,
        norm: NormMode::Instance,
        enc_widths: vec![3, 4],
        dsc_widths: vec![3, 4],
    }
}

fn model_case(name: &'static str, seed: u64, generator: bool) -> Result<OpCase> {
    let net = tiny_net();
    let init = ModelParams::init(&net, seed)?;
    let names: Vec<String> = init.tensors.keys().cloned().collect();
    // Larger weights than the default init keep gradients well above the
    // finite-difference noise floor.
    let params: Vec<Tensor> = init
        .tensors
        .values()
        .map(|t| if t.shape().len() > 1 { t.map(|x| x * 10.0) } else { t.clone() })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let s = net.image_size;
    let images: Vec<Tensor> = (0..3).map(|_| uniform(&mut rng, &[2, 1, s, s], 0.0, 1.0)).collect();
    let f: Box<ScalarFn> = Box::new(move |tape: &Tape, p: &[Var]| {
        let empty = ModelParams { tensors: Default::default(), buffers: Default::default() };
        let mut fw = Forward::new(tape, &net, &empty, Mode::Train, Track::All);
        for (n, v) in names.iter().zip(p) {
            fw.bind(n, *v);
        }
        let [x1, x2, x3] = [0, 1, 2].map(|i| tape.constant(images[i].clone()));
        let pass = losses::swapped_reconstructions(&mut fw, x1, x2)?;
        let fake = losses::fake_from(&mut fw, x3, pass.n_c1)?;
        if generator {
            let l_ae = losses::ae_loss(x1, x2, pass.rec1, pass.rec2)?;
            let d = fw.discriminate(x1, fake)?;
            losses::composite(l_ae, Some(losses::gen_surrogate(d, losses::DEFAULT_EPSILON)?), losses::DEFAULT_LAMBDA)
        } else {
            let (real, fake) = losses::discriminate_pairs(&mut fw, x1, x2, fake)?;
            losses::gan_objective(real, fake, losses::DEFAULT_EPSILON)
        }
    });
    Ok(OpCase { name, params, f, sample: Some(4) })
}

/// The full Enc/Dec/Dsc losses: the generator's composite objective and the
/// discriminator's adversarial objective, differentiated through all three
/// networks.
pub fn model_cases(seed: u64) -> Result<Vec<OpCase>> {
    Ok(vec![
        model_case("composite_generator_loss", seed, true)?,
        model_case("adversarial_objective", seed, false)?,
    ])
}
