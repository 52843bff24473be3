//! Alternating min-max training of encoder/decoder against the pair
//! discriminator (or plain autoencoder training).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, Tape, Var};
use crate::data::{FactorPair, Renderer, Triplet};
use crate::error::{invalid, Error, Result};
use crate::losses::{self, DEFAULT_EPSILON, DEFAULT_LAMBDA};
use crate::nn::{BatchStats, Forward, Mode, ModelParams, NetConfig, Track};
use crate::optim::Adam;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    #[default]
    #[serde(rename = "ae")]
    Ae,
    #[serde(rename = "ae-gan")]
    AeGan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lambda: f64,
    pub epsilon: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub lr_gen: f64,
    pub lr_dsc: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub dsc_steps_per_gen_step: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Ae,
            lambda: DEFAULT_LAMBDA,
            epsilon: DEFAULT_EPSILON,
            steps: 2000,
            batch_size: 32,
            lr_gen: 2e-4,
            lr_dsc: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            seed: 0,
            dsc_steps_per_gen_step: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let op = "train_config";
        if !(self.lambda >= 0.0) {
            return Err(invalid(op, "lambda must be >= 0"));
        }
        if !(self.epsilon > 0.0) {
            return Err(invalid(op, "epsilon must be > 0"));
        }
        if !(self.lr_gen > 0.0 && self.lr_dsc > 0.0) {
            return Err(invalid(op, "learning rates must be > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid(op, "adam betas must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.dsc_steps_per_gen_step == 0 {
            return Err(invalid(op, "batch_size and dsc_steps_per_gen_step must be >= 1"));
        }
        Ok(())
    }
}

/// Losses and discriminator statistics of one training iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_ae: f64,
    pub loss_gan_gen: f64,
    pub loss_gan_dsc: f64,
    pub dsc_real_mean: f64,
    pub dsc_fake_mean: f64,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "step,loss_ae,loss_gan_gen,loss_gan_dsc,dsc_real_mean,dsc_fake_mean";

    /// One CSV row; floats use shortest round-trip formatting.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?}",
            self.step, self.loss_ae, self.loss_gan_gen, self.loss_gan_dsc, self.dsc_real_mean, self.dsc_fake_mean
        )
    }
}

/// Where training triplets come from.
#[derive(Clone, Debug)]
pub enum TripletSource {
    /// Fresh triplets rendered every step.
    Procedural(Renderer),
    /// A fixed set visited in per-epoch shuffled order.
    Fixed(Vec<Triplet>),
}

/// A batch of triplets stacked as `N×C×S×S` tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch {
    pub x1: Tensor,
    pub x2: Tensor,
    pub x3: Tensor,
    pub factors: Vec<[FactorPair; 3]>,
}

impl TripletBatch {
    pub fn from_triplets(ts: &[Triplet]) -> Result<Self> {
        if ts.is_empty() {
            return Err(invalid("batch", "no triplets"));
        }
        let stack = |pick: fn(&Triplet) -> &Tensor| -> Result<Tensor> {
            let s = pick(&ts[0]).shape();
            let mut shape = vec![ts.len()];
            shape.extend_from_slice(s);
            let data = ts.iter().flat_map(|t| pick(t).data().iter().copied()).collect();
            Tensor::new(&shape, data)
        };
        Ok(Self {
            x1: stack(|t| &t.x1)?,
            x2: stack(|t| &t.x2)?,
            x3: stack(|t| &t.x3)?,
            factors: ts.iter().map(|t| [t.f1, t.f2, t.f3]).collect(),
        })
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub params: ModelParams,
    pub gen_opt: Adam,
    pub dsc_opt: Adam,
    /// Draws generator batches.
    pub data_rng: ChaCha8Rng,
    /// Draws the extra batches of additional discriminator steps.
    pub dsc_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn init(net: &NetConfig, cfg: &TrainConfig) -> Result<Self> {
        Ok(Self {
            step: 0,
            params: ModelParams::init(net, cfg.seed)?,
            gen_opt: Adam::new(cfg.lr_gen, cfg.beta1, cfg.beta2),
            dsc_opt: Adam::new(cfg.lr_dsc, cfg.beta1, cfg.beta2),
            data_rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1)),
            dsc_rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2)),
        })
    }
}

fn collect_grads(bound: &std::collections::HashMap<String, Var<'_>>, loss: Var<'_>) -> Result<BTreeMap<String, Tensor>> {
    let grads = backward(loss)?;
    Ok(bound.iter().map(|(n, v)| (n.clone(), grads.wrt(*v))).collect())
}

fn check_finite(term: &'static str, value: f64, step: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { term, step })
    }
}

pub struct Trainer {
    pub net: NetConfig,
    pub cfg: TrainConfig,
    pub state: TrainState,
    source: TripletSource,
}

impl Trainer {
    pub fn new(net: NetConfig, cfg: TrainConfig, source: TripletSource) -> Result<Self> {
        let state = TrainState::init(&net, &cfg)?;
        Self::resume(net, cfg, source, state)
    }

    pub fn resume(net: NetConfig, cfg: TrainConfig, source: TripletSource, state: TrainState) -> Result<Self> {
        net.validate()?;
        cfg.validate()?;
        if let TripletSource::Fixed(ts) = &source {
            if ts.is_empty() {
                return Err(invalid("train", "fixed triplet set is empty"));
            }
        }
        Ok(Self { net, cfg, state, source })
    }

    pub fn source(&self) -> &TripletSource {
        &self.source
    }

    fn fixed_batch(&self, ts: &[Triplet], step: u64) -> Result<TripletBatch> {
        let n = ts.len() as u64;
        let b = self.cfg.batch_size as u64;
        let mut picked = Vec::with_capacity(b as usize);
        let mut perm: Option<(u64, Vec<usize>)> = None;
        for i in 0..b {
            let pos = step * b + i;
            let epoch = pos / n;
            if perm.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut p: Vec<usize> = (0..ts.len()).collect();
                p.shuffle(&mut ChaCha8Rng::seed_from_u64(self.cfg.seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
                perm = Some((epoch, p));
            }
            let (_, p) = perm.as_ref().expect("set above");
            picked.push(ts[p[(pos % n) as usize]].clone());
        }
        TripletBatch::from_triplets(&picked)
    }

    fn procedural_batch(renderer: &Renderer, rng: &mut ChaCha8Rng, size: usize) -> Result<TripletBatch> {
        let ts = (0..size)
            .map(|_| renderer.sample_triplet(rng))
            .collect::<Result<Vec<_>>>()?;
        TripletBatch::from_triplets(&ts)
    }

    fn next_batch(&mut self) -> Result<TripletBatch> {
        match &self.source {
            TripletSource::Procedural(r) => Self::procedural_batch(r, &mut self.state.data_rng, self.cfg.batch_size),
            TripletSource::Fixed(ts) => self.fixed_batch(ts, self.state.step),
        }
    }

    fn extra_dsc_batch(&mut self) -> Result<TripletBatch> {
        match &self.source {
            TripletSource::Procedural(r) => Self::procedural_batch(r, &mut self.state.dsc_rng, self.cfg.batch_size),
            TripletSource::Fixed(ts) => {
                let idx: Vec<Triplet> = (0..self.cfg.batch_size)
                    .map(|_| {
                        use rand::Rng;
                        ts[self.state.dsc_rng.random_range(0..ts.len())].clone()
                    })
                    .collect();
                TripletBatch::from_triplets(&idx)
            }
        }
    }

    /// One discriminator ascent step on real `[x1, x2]` vs fake `[x1, fake]`.
    /// Returns `(L_GAN, mean Dsc(real), mean Dsc(fake))`.
    fn dsc_step(&mut self, x1: &Tensor, x2: &Tensor, fake: &Tensor) -> Result<(f64, f64, f64)> {
        let tape = Tape::new();
        let mut fw = Forward::new(&tape, &self.net, &self.state.params, Mode::Train, Track::Discriminator);
        let (d_real, d_fake) = losses::discriminate_pairs(
            &mut fw,
            tape.constant(x1.clone()),
            tape.constant(x2.clone()),
            tape.constant(fake.clone()),
        )?;
        let objective = losses::gan_objective(d_real, d_fake, self.cfg.epsilon)?;
        let value = check_finite("loss_gan_dsc", objective.value().data()[0], self.state.step)?;
        let (bound, stats) = fw.finish();
        let grads = collect_grads(&bound, objective.scale(-1.0))?;
        let mean = |v: Var| v.value().data().iter().sum::<f64>() / v.value().len() as f64;
        let (real_mean, fake_mean) = (mean(d_real), mean(d_fake));
        self.state.dsc_opt.step(&mut self.state.params, &grads);
        stats.commit(&mut self.state.params);
        Ok((value, real_mean, fake_mean))
    }

    /// Generator-side fake images for an extra discriminator batch.
    fn fake_values(&self, batch: &TripletBatch) -> Result<Tensor> {
        let tape = Tape::new();
        let mut fw = Forward::new(&tape, &self.net, &self.state.params, Mode::Train, Track::Nothing);
        let fake = losses::make_fake(&mut fw, tape.constant(batch.x1.clone()), tape.constant(batch.x3.clone()))?;
        let v = fake.value();
        Ok((*v).clone())
    }

    /// One full iteration: discriminator step(s) then generator step.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let step = self.state.step;
        let batch = self.next_batch()?;
        let gan = self.cfg.mode == TrainMode::AeGan;

        let tape = Tape::new();
        let x1 = tape.constant(batch.x1.clone());
        let x2 = tape.constant(batch.x2.clone());
        let mut fw = Forward::new(&tape, &self.net, &self.state.params, Mode::Train, Track::Generator);
        let pass = losses::swapped_reconstructions(&mut fw, x1, x2)?;
        let l_ae = losses::ae_loss(x1, x2, pass.rec1, pass.rec2)?;
        let fake = if gan {
            Some(losses::fake_from(&mut fw, tape.constant(batch.x3.clone()), pass.n_c1)?)
        } else {
            None
        };
        let (mut bound, gen_stats) = fw.finish();

        let mut metrics = StepMetrics {
            step,
            loss_ae: check_finite("loss_ae", l_ae.value().data()[0], step)?,
            loss_gan_gen: 0.0,
            loss_gan_dsc: 0.0,
            dsc_real_mean: 0.0,
            dsc_fake_mean: 0.0,
        };

        let mut surrogate = None;
        if let Some(fake) = fake {
            let fake_now = (*fake.value()).clone();
            let (obj, real_mean, fake_mean) = self.dsc_step(&batch.x1, &batch.x2, &fake_now)?;
            metrics.loss_gan_dsc = obj;
            metrics.dsc_real_mean = real_mean;
            metrics.dsc_fake_mean = fake_mean;
            for _ in 1..self.cfg.dsc_steps_per_gen_step {
                let extra = self.extra_dsc_batch()?;
                let extra_fake = self.fake_values(&extra)?;
                self.dsc_step(&extra.x1, &extra.x2, &extra_fake)?;
            }
            if self.cfg.lambda != 0.0 {
                // The updated discriminator enters as constants.
                let mut fw = Forward::new(&tape, &self.net, &self.state.params, Mode::Train, Track::Generator);
                let d_gen = fw.discriminate(x1, fake)?;
                let s = losses::gen_surrogate(d_gen, self.cfg.epsilon)?;
                metrics.loss_gan_gen = check_finite("loss_gan_gen", s.value().data()[0], step)?;
                let (b, _) = fw.finish();
                bound.extend(b);
                surrogate = Some(s);
            }
        }

        let total = losses::composite(l_ae, surrogate, self.cfg.lambda)?;
        let grads = collect_grads(&bound, total)?;
        drop(tape);
        self.state.gen_opt.step(&mut self.state.params, &grads);
        commit(gen_stats, &mut self.state.params);
        self.state.step += 1;
        Ok(metrics)
    }

    /// Runs until `cfg.steps` iterations have completed, calling `on_step`
    /// after each one.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepMetrics, &TrainState) -> Result<()>) -> Result<Vec<StepMetrics>> {
        let mut log = Vec::new();
        while self.state.step < self.cfg.steps {
            let m = self.step()?;
            on_step(&m, &self.state)?;
            log.push(m);
        }
        Ok(log)
    }
}

fn commit(stats: BatchStats, params: &mut ModelParams) {
    stats.commit(params);
}

/// Trains from scratch and returns the final state with the metric log.
pub fn train(net: NetConfig, cfg: TrainConfig, source: TripletSource) -> Result<(TrainState, Vec<StepMetrics>)> {
    let mut trainer = Trainer::new(net, cfg, source)?;
    let log = trainer.run(|_, _| Ok(()))?;
    Ok((trainer.state, log))
}
