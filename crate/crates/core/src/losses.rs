//! Swapped-reconstruction autoencoder loss, the pair-adversarial objective,
//! and the generator's composite loss.

use crate::autodiff::Var;
use crate::error::Result;
use crate::nn::Forward;

/// ε inside every adversarial logarithm.
pub const DEFAULT_EPSILON: f64 = 1e-12;

/// Weight of the adversarial term in the composite loss.
pub const DEFAULT_LAMBDA: f64 = 1.0;

/// `mean|x1 − rec1|² + mean|x2 − rec2|²`, each averaged per pixel, where
/// `rec1 = Dec(N_v(x1), N_c(x2))` and `rec2 = Dec(N_v(x2), N_c(x1))`.
pub fn ae_loss<'t>(x1: Var<'t>, x2: Var<'t>, rec1: Var<'t>, rec2: Var<'t>) -> Result<Var<'t>> {
    let a = x1.sub(rec1)?.square().mean();
    let b = x2.sub(rec2)?.square().mean();
    a.add(b)
}

/// `mean log_ε Dsc(real) + mean log_ε (1 − Dsc(fake))`; the discriminator
/// ascends this.
pub fn gan_objective<'t>(d_real: Var<'t>, d_fake: Var<'t>, epsilon: f64) -> Result<Var<'t>> {
    let real = d_real.log_eps(epsilon)?.mean();
    let fake = d_fake.one_minus().log_eps(epsilon)?.mean();
    real.add(fake)
}

/// Non-saturating generator surrogate `−mean log_ε Dsc(x1, x_{3⊕1})`.
pub fn gen_surrogate(d_fake: Var<'_>, epsilon: f64) -> Result<Var<'_>> {
    Ok(d_fake.log_eps(epsilon)?.mean().scale(-1.0))
}

/// `L_AE + λ·surrogate`; with `λ = 0` or no adversarial term this is `L_AE`
/// itself.
pub fn composite<'t>(l_ae: Var<'t>, surrogate: Option<Var<'t>>, lambda: f64) -> Result<Var<'t>> {
    match surrogate {
        Some(s) if lambda != 0.0 => l_ae.add(s.scale(lambda)),
        _ => Ok(l_ae),
    }
}

/// Generator outputs for a batch of triplets.
pub struct GenPass<'t> {
    pub rec1: Var<'t>,
    pub rec2: Var<'t>,
    /// `N_c(x1)`, reused for the fake image.
    pub n_c1: Var<'t>,
}

/// Encodes `[x1; x2]` in one pass and decodes both swapped reconstructions.
pub fn swapped_reconstructions<'t>(fw: &mut Forward<'_, 't>, x1: Var<'t>, x2: Var<'t>) -> Result<GenPass<'t>> {
    let n = x1.shape()[0];
    let (nv, nc) = fw.encode(Var::concat(&[x1, x2], 0)?)?;
    let (nv1, nv2) = (nv.slice(0, 0, n)?, nv.slice(0, n, n)?);
    let (nc1, nc2) = (nc.slice(0, 0, n)?, nc.slice(0, n, n)?);
    let out = fw.decode(Var::concat(&[nv1, nv2], 0)?, Var::concat(&[nc2, nc1], 0)?)?;
    Ok(GenPass {
        rec1: out.slice(0, 0, n)?,
        rec2: out.slice(0, n, n)?,
        n_c1: nc1,
    })
}

/// `x_{3⊕1} = Dec(N_v(x3), N_c(x1))` given an already computed `N_c(x1)`.
pub fn fake_from<'t>(fw: &mut Forward<'_, 't>, x3: Var<'t>, n_c1: Var<'t>) -> Result<Var<'t>> {
    let (nv3, _) = fw.encode(x3)?;
    fw.decode(nv3, n_c1)
}

/// `x_{3⊕1} = Dec(N_v(x3), N_c(x1))`.
pub fn make_fake<'t>(fw: &mut Forward<'_, 't>, x1: Var<'t>, x3: Var<'t>) -> Result<Var<'t>> {
    let (_, nc1) = fw.encode(x1)?;
    fake_from(fw, x3, nc1)
}

/// Discriminator outputs on real pairs `[x1, x2]` and fake pairs
/// `[x1, fake]`, evaluated as one batch.
pub fn discriminate_pairs<'t>(
    fw: &mut Forward<'_, 't>,
    x1: Var<'t>,
    x2: Var<'t>,
    fake: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let n = x1.shape()[0];
    let d = fw.discriminate(Var::concat(&[x1, x1], 0)?, Var::concat(&[x2, fake], 0)?)?;
    Ok((d.slice(0, 0, n)?, d.slice(0, n, n)?))
}
