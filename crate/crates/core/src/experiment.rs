//! The shortcut experiment: AE and AE+GAN at a small and a large `dim_v`,
//! scored on held-out identities.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_split, DataConfig, InverseIndex, Renderer, ShapeBank};
use crate::diagnostics::{common_stat, shortcut_index, transfer_error, NetTransfer};
use crate::error::{invalid, Result};
use crate::nn::NetConfig;
use crate::train::{TrainConfig, TrainMode, Trainer, TripletSource};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShortcutExperiment {
    pub data: DataConfig,
    pub split_seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    /// Network template; `dim_v` is overridden per run.
    pub net: NetConfig,
    /// Training template; `mode` and `lambda` are overridden per run.
    pub train: TrainConfig,
    /// Adversarial weight of the AE+GAN runs.
    pub gan_lambda: f64,
    pub dims: Vec<usize>,
    pub eval_draws: usize,
    pub eval_seed: u64,
}

impl Default for ShortcutExperiment {
    fn default() -> Self {
        let data = DataConfig::default();
        Self {
            net: NetConfig {
                image_size: data.image_size,
                dim_c: 16,
                enc_widths: vec![16, 32, 64],
                dsc_widths: vec![16, 32, 64],
                ..NetConfig::default()
            },
            train: TrainConfig {
                steps: 3000,
                batch_size: 16,
                lr_gen: 1e-3,
                lr_dsc: 1e-4,
                seed: 3,
                ..TrainConfig::default()
            },
            data,
            split_seed: 1,
            n_train: 20,
            n_test: 4,
            gan_lambda: 0.03,
            dims: vec![2, 64],
            eval_draws: 512,
            eval_seed: 9,
        }
    }
}

/// Held-out scores of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub mode: TrainMode,
    pub dim_v: usize,
    pub final_loss_ae: f64,
    pub transfer_error: f64,
    pub shortcut_index: f64,
    pub stat_real: f64,
    pub stat_fake: f64,
    pub rejected: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub runs: Vec<RunResult>,
}

impl ExperimentResults {
    pub fn get(&self, mode: TrainMode, dim_v: usize) -> Option<&RunResult> {
        self.runs.iter().find(|r| r.mode == mode && r.dim_v == dim_v)
    }
}

impl ShortcutExperiment {
    /// Trains every `(mode, dim_v)` combination and scores it on the
    /// held-out split. `progress` receives each finished run.
    pub fn run(&self, mut progress: impl FnMut(&RunResult)) -> Result<ExperimentResults> {
        if self.dims.is_empty() || self.eval_draws == 0 {
            return Err(invalid("shortcut_experiment", "need at least one dim_v and one draw"));
        }
        let bank = ShapeBank::generate(self.data.identities, self.data.bank_seed)?;
        let (train, test) = make_split(&bank, self.split_seed, self.n_train, self.n_test)?;
        let train_r = Renderer::new(train, self.data.clone())?;
        let index = InverseIndex::build(&test, &self.data)?;
        let test_r = Renderer::new(test, self.data.clone())?;

        let mut runs = Vec::new();
        for mode in [TrainMode::Ae, TrainMode::AeGan] {
            for &dim_v in &self.dims {
                let start = Instant::now();
                let net = NetConfig { dim_v, ..self.net.clone() };
                let lambda = match mode {
                    TrainMode::Ae => self.train.lambda,
                    TrainMode::AeGan => self.gan_lambda,
                };
                let cfg = TrainConfig { mode, lambda, ..self.train.clone() };
                let mut trainer = Trainer::new(net.clone(), cfg, TripletSource::Procedural(train_r.clone()))?;
                let log = trainer.run(|_, _| Ok(()))?;
                let tail = &log[log.len().saturating_sub(50)..];
                let final_loss_ae = tail.iter().map(|m| m.loss_ae).sum::<f64>() / tail.len().max(1) as f64;

                let model = NetTransfer::new(&net, &trainer.state.params);
                let mut rng = ChaCha8Rng::seed_from_u64(self.eval_seed);
                let te = transfer_error(&model, &test_r, self.eval_draws, &mut rng)?;
                let si = shortcut_index(&model, &test_r, self.eval_draws, &mut rng)?;
                let cs = common_stat(&model, &test_r, &index, self.eval_draws, &mut rng)?;
                let r = RunResult {
                    mode,
                    dim_v,
                    final_loss_ae,
                    transfer_error: te,
                    shortcut_index: si,
                    stat_real: cs.stat_real,
                    stat_fake: cs.stat_fake,
                    rejected: cs.rejected,
                    seconds: start.elapsed().as_secs_f64(),
                };
                progress(&r);
                runs.push(r);
            }
        }
        Ok(ExperimentResults { runs })
    }
}
