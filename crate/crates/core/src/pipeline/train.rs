//! Deterministic training loop: batching, augmentation, the dual-resolution
//! objective, ADAM with cosine annealing and per-epoch checkpoints.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::losses::{total_loss, FeatureExtractor, LossContext, LossWeights, WeightMode, REPORTED_OMEGA};
use crate::metrics::psnr;
use crate::model::{forward, infer, init_params, param_specs, ModelConfig};
use crate::pipeline::augment::{apply, apply_geometric, AugmentConfig, Draws};
use crate::pipeline::checkpoint::{Checkpoint, Record, RngState};
use crate::pipeline::dataset::Pair;
use crate::pipeline::image::resize_bilinear;
use crate::pipeline::optim::{cosine_lr, Adam, LR0, LR_MIN};
use crate::tensor::{ParamStore, Tape, Tensor};

/// Parameter name of the loss-weight logits in optimiser state.
pub const LOGITS_KEY: &str = "loss_weights.logits";

/// How the four loss weights are set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightSetting {
    Learnable,
    /// Frozen at equal weights.
    Fixed,
    /// Frozen at [`REPORTED_OMEGA`].
    Reported,
}

impl WeightSetting {
    pub fn initial(self) -> LossWeights {
        match self {
            WeightSetting::Learnable => LossWeights::learnable(),
            WeightSetting::Fixed => LossWeights::for_mode(WeightMode::Fixed),
            WeightSetting::Reported => LossWeights::fixed(REPORTED_OMEGA).expect("reported weights are valid"),
        }
    }
}

impl From<WeightMode> for WeightSetting {
    fn from(m: WeightMode) -> Self {
        match m {
            WeightMode::Learnable => WeightSetting::Learnable,
            WeightMode::Fixed => WeightSetting::Fixed,
        }
    }
}

impl fmt::Display for WeightSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightSetting::Learnable => "learnable",
            WeightSetting::Fixed => "fixed",
            WeightSetting::Reported => "reported",
        })
    }
}

impl FromStr for WeightSetting {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "learnable" => Ok(WeightSetting::Learnable),
            "fixed" => Ok(WeightSetting::Fixed),
            "reported" => Ok(WeightSetting::Reported),
            _ => Err("expected one of: learnable, fixed, reported".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub loss_weights: WeightSetting,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    /// Pairs at the end of the dataset kept out of training for the running PSNR.
    pub holdout_pairs: usize,
    pub charbonnier_eps: f64,
    pub feature_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 2,
            lr0: LR0,
            lr_min: LR_MIN,
            loss_weights: WeightSetting::Learnable,
            augment: true,
            augmentation: AugmentConfig::default(),
            holdout_pairs: 1,
            charbonnier_eps: 1e-3,
            feature_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr0 > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr0) {
            return Err(Error::Config(format!("need 0 <= lr_min <= lr0, got {} and {}", self.lr_min, self.lr0)));
        }
        if self.charbonnier_eps.is_nan() || self.charbonnier_eps <= 0.0 {
            return Err(Error::Config("charbonnier_eps must be positive".into()));
        }
        self.augmentation.validate()
    }

    pub fn from_key_values(kv: &mut KeyValues) -> Result<Self> {
        let mut t = Self::default();
        macro_rules! take {
            ($($key:literal => $field:expr),+ $(,)?) => {
                $(if let Some(v) = kv.take($key)? { $field = v; })+
            };
        }
        take! {
            "epochs" => t.epochs,
            "batch_size" => t.batch_size,
            "lr0" => t.lr0,
            "lr_min" => t.lr_min,
            "loss_weights" => t.loss_weights,
            "augment" => t.augment,
            "flip_probability" => t.augmentation.flip_probability,
            "noise_sigma_max" => t.augmentation.noise_sigma_max,
            "contrast_min" => t.augmentation.contrast_min,
            "contrast_max" => t.augmentation.contrast_max,
            "holdout_pairs" => t.holdout_pairs,
            "charbonnier_eps" => t.charbonnier_eps,
            "feature_seed" => t.feature_seed,
        }
        t.validate()?;
        Ok(t)
    }

    pub fn to_text(&self) -> String {
        let a = &self.augmentation;
        [
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr0", self.lr0.to_string()),
            ("lr_min", self.lr_min.to_string()),
            ("loss_weights", self.loss_weights.to_string()),
            ("augment", self.augment.to_string()),
            ("flip_probability", a.flip_probability.to_string()),
            ("noise_sigma_max", a.noise_sigma_max.to_string()),
            ("contrast_min", a.contrast_min.to_string()),
            ("contrast_max", a.contrast_max.to_string()),
            ("holdout_pairs", self.holdout_pairs.to_string()),
            ("charbonnier_eps", self.charbonnier_eps.to_string()),
            ("feature_seed", self.feature_seed.to_string()),
        ]
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
    }
}

/// Model plus training settings; the text form is what config files and checkpoints hold.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn full() -> Self {
        RunConfig {
            model: ModelConfig::full(),
            train: TrainConfig::default(),
        }
    }

    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let model = ModelConfig::from_key_values(&mut kv)?;
        let train = TrainConfig::from_key_values(&mut kv)?;
        kv.finish()?;
        Ok(RunConfig { model, train })
    }

    pub fn to_text(&self) -> String {
        format!("# model\n{}\n# training\n{}", self.model.to_text(), self.train.to_text())
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: RunConfig,
    pub params: ParamStore<f32>,
    pub adam: Adam<f32>,
    /// `[4]` loss-weight logits.
    pub logits: Tensor<f32>,
    pub weight_mode: WeightMode,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimiser steps.
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: RunConfig, seed: u64) -> Result<Self> {
        config.model.validate()?;
        config.train.validate()?;
        let params = init_params(&config.model, seed)?;
        let weights = config.train.loss_weights.initial();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(TrainState {
            params,
            adam: Adam::default(),
            logits: Tensor::from_f64(vec![4], &weights.logits)?,
            weight_mode: weights.mode,
            epoch: 0,
            step: 0,
            rng,
            config,
        })
    }

    pub fn weights(&self) -> LossWeights {
        let mut l = [0.0; 4];
        for (o, &v) in l.iter_mut().zip(self.logits.data()) {
            *o = v as f64;
        }
        LossWeights {
            logits: l,
            mode: self.weight_mode,
            ..LossWeights::learnable()
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let records = |m: &std::collections::BTreeMap<String, Tensor<f32>>| -> Vec<Record> {
            m.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
        };
        let mut logits = [0f32; 4];
        logits.copy_from_slice(self.logits.data());
        Checkpoint {
            config: self.config.to_text(),
            params: self.params.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect(),
            adam_m: records(&self.adam.m),
            adam_v: records(&self.adam.v),
            logits,
            epoch: self.epoch,
            step: self.step,
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = RunConfig::parse(&ck.config)?;
        let expected: std::collections::BTreeMap<String, Vec<usize>> = param_specs(&config.model)?
            .into_iter()
            .map(|s| (s.name, s.shape))
            .collect();
        let mut params = ParamStore::new();
        for (name, t) in &ck.params {
            match expected.get(name) {
                Some(shape) if shape == t.shape() => params.insert(name, t.clone())?,
                Some(shape) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, config expects {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("unexpected parameter {name}"))),
            }
        }
        if params.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, config needs {}",
                params.len(),
                expected.len()
            )));
        }
        let mode = config.train.loss_weights.initial().mode;
        let adam = Adam {
            t: ck.step,
            m: ck.adam_m.iter().cloned().collect(),
            v: ck.adam_v.iter().cloned().collect(),
            ..Adam::default()
        };
        Ok(TrainState {
            params,
            adam,
            logits: Tensor::new(vec![4], ck.logits.to_vec())?,
            weight_mode: mode,
            epoch: ck.epoch,
            step: ck.step,
            rng: ck.rng.restore(),
            config,
        })
    }
}

/// One optimiser step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub omega: [f64; 4],
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let o = self.omega;
        write!(
            f,
            "{}\t{:.6e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.step, self.lr, self.loss, o[0], o[1], o[2], o[3]
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: u64,
    pub mean_loss: f64,
    pub omega: [f64; 4],
    pub holdout_psnr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Event {
    Step(StepLog),
    Epoch(EpochLog),
}

pub struct Trainer {
    pub state: TrainState,
    pub ctx: LossContext,
    pub train: Vec<Pair>,
    pub holdout: Vec<Pair>,
    /// Native double-resolution targets of the training pairs; bilinear
    /// upsampling of the clean image otherwise.
    pub doubles: Option<Vec<Tensor<f32>>>,
    /// Written after every epoch when set.
    pub checkpoint_path: Option<PathBuf>,
}

/// Stack `[3, h, w]` images into `[n, 3, h, w]`.
fn stack(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let owned: Vec<Tensor<f32>> = images.iter().map(|t| (*t).clone()).collect();
    Tensor::stack(&owned)
}

impl Trainer {
    /// Split `data` into training pairs and the trailing holdout pairs.
    pub fn new(state: TrainState, mut data: Vec<Pair>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Usage("training needs at least one image pair".into()));
        }
        let keep = state.config.train.holdout_pairs.min(data.len() - 1);
        let holdout = data.split_off(data.len() - keep);
        let ctx = LossContext {
            charbonnier_eps: state.config.train.charbonnier_eps,
            extractor: FeatureExtractor::seeded(state.config.train.feature_seed),
        };
        Ok(Trainer {
            state,
            ctx,
            train: data,
            holdout,
            doubles: None,
            checkpoint_path: None,
        })
    }

    /// Use `targets` (one `[3, 2h, 2w]` image per pair given to [`Trainer::new`])
    /// as the double-resolution ground truth.
    pub fn with_double_targets(mut self, mut targets: Vec<Tensor<f32>>) -> Result<Self> {
        let n = self.train.len() + self.holdout.len();
        if targets.len() != n {
            return Err(Error::Usage(format!("{} double-resolution targets for {n} pairs", targets.len())));
        }
        for (t, (_, c)) in targets.iter().zip(self.train.iter().chain(&self.holdout)) {
            let (cs, ts) = (c.shape(), t.shape());
            if ts != [cs[0], 2 * cs[1], 2 * cs[2]] {
                return Err(Error::dim("double target", format!("{ts:?} for a {cs:?} clean image")));
            }
        }
        targets.truncate(self.train.len());
        self.doubles = Some(targets);
        Ok(self)
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.train.len().div_ceil(self.state.config.train.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.state.config.train.epochs * self.steps_per_epoch()
    }

    /// `(loss, realized Ω)` of the current parameters on a batch, without updating.
    pub fn batch_loss(&self, degraded: &Tensor<f32>, clean: &Tensor<f32>) -> Result<(f64, [f64; 4])> {
        let mut tape = Tape::new();
        let bound = self.state.params.bind(&mut tape, false);
        let weights = self.state.weights();
        let (_, omega) = weights.bind(&mut tape)?;
        let loss = self.record_loss(&mut tape, &bound, omega, &weights, degraded, clean, None)?;
        Ok((tape.value(loss).item() as f64, weights.realized()))
    }

    #[allow(clippy::too_many_arguments)]
    fn record_loss(
        &self,
        tape: &mut Tape<f32>,
        bound: &crate::tensor::BoundParams,
        omega: crate::tensor::Var,
        weights: &LossWeights,
        degraded: &Tensor<f32>,
        clean: &Tensor<f32>,
        double: Option<Tensor<f32>>,
    ) -> Result<crate::tensor::Var> {
        let s = clean.shape();
        let double = match double {
            Some(d) => d,
            None => resize_bilinear(clean, 2 * s[2], 2 * s[3])?,
        };
        let x = tape.constant(degraded.clone());
        let out = forward(tape, &self.state.config.model, bound, x)?;
        let gt = tape.constant(clean.clone());
        let gt2 = tape.constant(double);
        Ok(total_loss(tape, &out, gt, gt2, omega, weights, &self.ctx)?.total)
    }

    fn step(&mut self, batch: &[usize]) -> Result<StepLog> {
        let tc = self.state.config.train.clone();
        let mut degs = Vec::with_capacity(batch.len());
        let mut cleans = Vec::with_capacity(batch.len());
        let mut doubles = Vec::new();
        for &i in batch {
            let (d, c) = &self.train[i];
            let draws = if tc.augment {
                Draws::sample(&tc.augmentation, &mut self.state.rng)
            } else {
                Draws::IDENTITY
            };
            let (d, c) = apply(d, c, &draws, &mut self.state.rng);
            degs.push(d);
            cleans.push(c);
            if let Some(targets) = &self.doubles {
                doubles.push(apply_geometric(&targets[i], &draws));
            }
        }
        let deg = stack(&degs.iter().collect::<Vec<_>>())?;
        let clean = stack(&cleans.iter().collect::<Vec<_>>())?;
        let double = match self.doubles {
            Some(_) => Some(stack(&doubles.iter().collect::<Vec<_>>())?),
            None => None,
        };

        let weights = self.state.weights();
        let omega_now = weights.realized();
        let omega_sum: f64 = omega_now.iter().sum();
        if omega_now.iter().any(|&w| w.is_nan() || w <= 0.0) || (omega_sum - 1.0).abs() > 1e-9 {
            return Err(Error::Numerical(format!("loss weights {omega_now:?} left the simplex")));
        }

        let mut tape = Tape::new();
        let bound = self.state.params.bind(&mut tape, true);
        let (logits_var, omega) = weights.bind(&mut tape)?;
        let loss = self.record_loss(&mut tape, &bound, omega, &weights, &deg, &clean, double)?;
        let loss_value = tape.value(loss).item() as f64;
        if !loss_value.is_finite() {
            return Err(Error::Numerical(format!(
                "loss became {loss_value} at step {}",
                self.state.step + 1
            )));
        }
        tape.backward(loss)?;

        let lr = cosine_lr(self.state.step, self.total_steps(), tc.lr0, tc.lr_min);
        let learnable = self.state.weight_mode == WeightMode::Learnable;
        let TrainState {
            params, adam, logits, ..
        } = &mut self.state;
        params.zero_grad();
        params.accumulate_grads(&tape, &bound)?;
        let logit_grad = tape.grad(logits_var).cloned().unwrap_or_else(|| Tensor::zeros(vec![4]));
        let mut items: Vec<(&str, &mut Tensor<f32>, &Tensor<f32>)> = params
            .iter_mut()
            .map(|p| {
                let crate::tensor::Parameter { name, tensor, grad } = p;
                (name.as_str(), tensor, &*grad)
            })
            .collect();
        if learnable {
            items.push((LOGITS_KEY, logits, &logit_grad));
        }
        adam.step(items, lr)?;
        self.state.step += 1;
        Ok(StepLog {
            step: self.state.step,
            lr,
            loss: loss_value,
            omega: omega_now,
        })
    }

    /// Mean PSNR of the native-resolution prediction over `pairs`.
    pub fn mean_psnr(&self, pairs: &[Pair]) -> Result<f64> {
        let mut total = 0.0;
        for (d, c) in pairs {
            let x = stack(&[d])?;
            let out = infer(&self.state.config.model, &self.state.params, &x)?;
            total += psnr(&out.full_res.index0(0), c, 1.0)?;
        }
        Ok(total / pairs.len().max(1) as f64)
    }

    /// Run one epoch in a freshly shuffled order.
    pub fn run_epoch(&mut self, on_event: &mut dyn FnMut(&Event)) -> Result<EpochLog> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.state.rng);
        let mut losses = Vec::new();
        for batch in order.chunks(self.state.config.train.batch_size) {
            let log = self.step(batch)?;
            losses.push(log.loss);
            on_event(&Event::Step(log));
        }
        self.state.epoch += 1;
        let holdout_psnr = if self.holdout.is_empty() {
            None
        } else {
            Some(self.mean_psnr(&self.holdout)?)
        };
        let log = EpochLog {
            epoch: self.state.epoch,
            mean_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
            omega: self.state.weights().realized(),
            holdout_psnr,
        };
        if let Some(path) = &self.checkpoint_path {
            self.state.to_checkpoint().save(path)?;
        }
        on_event(&Event::Epoch(log.clone()));
        Ok(log)
    }

    /// Train until `config.train.epochs` epochs are complete.
    pub fn run(&mut self, on_event: &mut dyn FnMut(&Event)) -> Result<()> {
        while self.state.epoch < self.state.config.train.epochs {
            self.run_epoch(on_event)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_round_trip() {
        for c in [RunConfig::full(), RunConfig::desk()] {
            assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        }
        assert!(RunConfig::parse("batch_size = 0").is_err());
        assert!(RunConfig::parse("loss_weights = sometimes").is_err());
    }

    #[test]
    fn step_log_is_tab_separated() {
        let s = StepLog {
            step: 3,
            lr: 3e-4,
            loss: 0.5,
            omega: [0.25; 4],
        }
        .to_string();
        assert_eq!(s.split('\t').count(), 7);
        assert!(s.starts_with("3\t"));
    }
}
