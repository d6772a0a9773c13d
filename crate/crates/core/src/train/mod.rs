//! Super-network fine-tuning with the sandwich rule and in-place
//! distillation, plus independent fine-tuning of single sub-networks.

mod optim;

use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LmBatch, WindowSet};
use crate::error::{Error, Result};
use crate::grid::ArchSampler;
use crate::kd;
use crate::model::{
    attach_lora, bind_weights, extract_subnet, forward_on_tape, init_supernet, merge_lora, ForwardOptions, LoraSpec,
    SuperNetWeights, Trainable,
};
use crate::numerics::{Float, Tape, Tensor};
use crate::search::SubNetworkConfig;

pub use optim::{clip_global_norm, cosine_lr, Adam};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    WeightSharing,
    Independent,
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weight_sharing" | "weight-sharing" => Ok(Self::WeightSharing),
            "independent" => Ok(Self::Independent),
            _ => Err(Error::Config(format!("unknown train mode `{s}` (weight_sharing, independent)"))),
        }
    }
}

/// Starting point of an independently fine-tuned sub-network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Random,
    PretrainedSliced,
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "pretrained" | "pretrained_sliced" => Ok(Self::PretrainedSliced),
            _ => Err(Error::Config(format!("unknown init mode `{s}` (random, pretrained)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Sub-networks per step besides the full network.
    pub k: usize,
    pub kd_kind: String,
    pub kd_temperature: f64,
    pub kd_weight: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub lora: bool,
    pub lora_spec: LoraSpec,
    pub mode: TrainMode,
    pub clip_norm: f64,
    /// Caps the total number of steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            base_lr: 2e-4,
            final_lr: 6e-5,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            k: 3,
            kd_kind: "cosine".into(),
            kd_temperature: 1.0,
            kd_weight: 1.0,
            batch_size: 16,
            seq_len: 64,
            seed: 0,
            lora: true,
            lora_spec: LoraSpec::default(),
            mode: TrainMode::WeightSharing,
            clip_norm: 1.0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.final_lr > 0.0 && self.final_lr <= self.base_lr) {
            return bad("learning rates must satisfy 0 < final_lr <= base_lr");
        }
        if !(self.kd_temperature > 0.0) {
            return bad("kd_temperature must be positive");
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return bad("batch_size and seq_len must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        kd::by_name(&self.kd_kind)?;
        if self.lora {
            self.lora_spec.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubnetLoss {
    pub theta: SubNetworkConfig,
    pub lm: f64,
    pub kd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub full_loss: f64,
    pub subnets: Vec<SubnetLoss>,
    pub forward_passes: usize,
    pub grad_norm: f64,
}

pub struct TrainState<F: Float> {
    pub weights: SuperNetWeights<F>,
    pub adam: Adam<F>,
    pub step: usize,
    /// Teacher configuration of every step.
    pub theta_max: SubNetworkConfig,
    pub sample_rng: ChaCha8Rng,
    pub dropout_rng: ChaCha8Rng,
    pub metrics: Vec<StepMetrics>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

impl<F: Float> TrainState<F> {
    /// Attaches adapters when `cfg.lora` asks for them and none are present.
    pub fn new(mut weights: SuperNetWeights<F>, theta_max: SubNetworkConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        theta_max.check_fits(&weights.cfg)?;
        if cfg.lora && weights.lora.is_none() {
            attach_lora(&mut weights, cfg.lora_spec, cfg.seed.wrapping_add(17))?;
        }
        Ok(Self {
            weights,
            adam: Adam::new(cfg.beta1, cfg.beta2, cfg.adam_eps),
            step: 0,
            theta_max,
            sample_rng: stream(cfg.seed, 1),
            dropout_rng: stream(cfg.seed, 2),
            metrics: Vec::new(),
        })
    }
}

fn finite(v: f64, what: impl FnOnce() -> String) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what()))
    }
}

/// One update: the full network with the LM loss, then `cfg.k` sampled
/// sub-networks with LM plus weighted distillation against the full
/// network's logits. Gradients of all passes are summed, clipped, and
/// applied in a single Adam step at learning rate `lr`.
pub fn sandwich_step<F: Float>(
    state: &mut TrainState<F>,
    batch: &LmBatch,
    sampler: Option<&dyn ArchSampler>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepMetrics> {
    let thetas = match (cfg.k, sampler) {
        (0, _) => Vec::new(),
        (k, Some(s)) => s.sample(&mut state.sample_rng, k)?,
        (_, None) => return Err(Error::Grid("k > 0 needs a sub-network sampler".into())),
    };
    let kd_loss = kd::by_name(&cfg.kd_kind)?;
    let trainable = if state.weights.lora.is_some() {
        Trainable::Adapters
    } else {
        Trainable::Base
    };
    let w = &state.weights;
    let targets: Arc<[usize]> = batch.targets.clone().into();
    let mut tape = Tape::new();
    let bound = bind_weights(&mut tape, w, trainable);
    let mut passes = 0;

    let mut opts = ForwardOptions {
        dropout: Some(&mut state.dropout_rng),
        ..Default::default()
    };
    let (logits, _) = forward_on_tape(&mut tape, w, &bound, &state.theta_max, &batch.inputs, &mut opts)?;
    passes += 1;
    let mut total = tape.cross_entropy(logits, targets.clone())?;
    let full_loss = finite(tape.value(total).data()[0].as_f64(), || {
        format!("full-network loss at step {}", state.step)
    })?;
    let teacher = Arc::new(tape.value(logits).clone());

    let mut sub_losses = Vec::with_capacity(thetas.len());
    for theta in thetas {
        let (logits, _) = forward_on_tape(&mut tape, w, &bound, &theta, &batch.inputs, &mut opts)?;
        passes += 1;
        let lm = tape.cross_entropy(logits, targets.clone())?;
        let kd = tape.distill(logits, teacher.clone(), kd_loss.clone(), cfg.kd_temperature)?;
        let lm_v = tape.value(lm).data()[0].as_f64();
        let kd_v = tape.value(kd).data()[0].as_f64();
        finite(lm_v + kd_v, || format!("sub-network {theta} loss at step {}", state.step))?;
        let kd_scaled = tape.scale(kd, F::from_f64_lossy(cfg.kd_weight))?;
        let pass = tape.add(lm, kd_scaled)?;
        total = tape.add(total, pass)?;
        sub_losses.push(SubnetLoss {
            theta,
            lm: lm_v,
            kd: kd_v,
        });
    }

    let grads = tape.backward(total)?;
    let mut names = Vec::new();
    let mut gs: Vec<Tensor<F>> = Vec::new();
    for (name, var) in bound.named_vars() {
        if tape.needs_grad(*var) {
            names.push(name.clone());
            gs.push(grads.wrt(*var));
        }
    }
    drop(tape);
    let grad_norm = clip_global_norm(&mut gs, cfg.clip_norm);
    finite(grad_norm, || format!("gradient norm at step {}", state.step))?;
    let mut params = state.weights.named_tensors_mut();
    let mut updates = Vec::with_capacity(names.len());
    let mut gi = gs.iter();
    let mut ni = names.iter().peekable();
    for (name, t) in params.iter_mut() {
        if ni.peek() == Some(&&*name) {
            let n = ni.next().expect("peeked");
            updates.push((n.as_str(), &mut **t, gi.next().expect("one gradient per name")));
        }
    }
    state.adam.step(lr, updates);

    let m = StepMetrics {
        step: state.step,
        lr,
        full_loss,
        subnets: sub_losses,
        forward_passes: passes,
        grad_norm,
    };
    state.step += 1;
    state.metrics.push(m.clone());
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub initial_loss: Option<f64>,
    /// Mean full-network loss over the last (up to) 50 steps.
    pub final_loss: Option<f64>,
}

/// Runs `cfg.epochs` passes of shuffled full batches over `data`.
/// `on_epoch` sees the state after every completed epoch.
pub fn train<F: Float>(
    state: &mut TrainState<F>,
    data: &WindowSet,
    cfg: &TrainConfig,
    sampler: Option<&dyn ArchSampler>,
    mut log: Option<&mut dyn Write>,
    on_epoch: &mut dyn FnMut(usize, &TrainState<F>) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training corpus holds no complete window".into()));
    }
    let bs = cfg.batch_size.min(data.len());
    let per_epoch = data.len() / bs;
    let total = (per_epoch * cfg.epochs).min(cfg.max_steps.unwrap_or(usize::MAX));
    let first = state.metrics.len();
    let mut done = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let mut rng = stream(cfg.seed, 100 + epoch as u64);
        for idx in data.epoch(bs, &mut rng) {
            if done == total {
                break 'epochs;
            }
            let batch = data.batch(&idx)?;
            let lr = cosine_lr(cfg.base_lr, cfg.final_lr, done, total);
            let m = sandwich_step(state, &batch, sampler, cfg, lr)?;
            if let Some(out) = log.as_deref_mut() {
                serde_json::to_writer(&mut *out, &m)?;
                out.write_all(b"\n")?;
            }
            done += 1;
        }
        on_epoch(epoch, state)?;
    }
    let run = &state.metrics[first..];
    let tail = &run[run.len().saturating_sub(50)..];
    Ok(TrainReport {
        steps: done,
        initial_loss: run.first().map(|m| m.full_loss),
        final_loss: (!tail.is_empty()).then(|| tail.iter().map(|m| m.full_loss).sum::<f64>() / tail.len() as f64),
    })
}

/// Trains one sub-network on its own with the plain LM loss and returns
/// standalone weights with any adapters merged.
pub fn finetune_independent<F: Float>(
    base: &SuperNetWeights<F>,
    theta: &SubNetworkConfig,
    init: InitMode,
    data: &WindowSet,
    cfg: &TrainConfig,
) -> Result<SuperNetWeights<F>> {
    let sliced = extract_subnet(base, theta)?;
    let weights = match init {
        InitMode::PretrainedSliced => sliced,
        InitMode::Random => init_supernet(&sliced.cfg, cfg.seed.wrapping_add(29))?,
    };
    let cfg = TrainConfig { k: 0, ..cfg.clone() };
    let full = SubNetworkConfig::full(&weights.cfg);
    let mut state = TrainState::new(weights, full, &cfg)?;
    train(&mut state, data, &cfg, None, None, &mut |_, _| Ok(()))?;
    let mut w = state.weights;
    merge_lora(&mut w)?;
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::UniformSampler;
    use crate::model::{SuperNetConfig, };
    use crate::search::{SearchSpace, SpaceVariant};

    fn setup(lora: bool) -> (TrainState<f32>, WindowSet, TrainConfig, SearchSpace) {
        let cfg = SuperNetConfig::toy();
        let w = init_supernet::<f32>(&cfg, 0).unwrap();
        let text: Vec<u8> = b"in the beginning god created the heaven and the earth. ".repeat(20);
        let data = WindowSet::new(&text, 16).unwrap();
        let tc = TrainConfig {
            batch_size: 4,
            seq_len: 16,
            lora,
            base_lr: 1e-3,
            final_lr: 1e-4,
            ..Default::default()
        };
        let space = SearchSpace::for_supernet(&cfg, SpaceVariant::Joint).unwrap();
        let state = TrainState::new(w, space.theta_max(), &tc).unwrap();
        (state, data, tc, space)
    }

    #[test]
    fn k_three_counts_four_passes() {
        let (mut st, data, tc, space) = setup(true);
        let s = UniformSampler(space);
        let m = sandwich_step(&mut st, &data.batch(&[0, 1]).unwrap(), Some(&s), &tc, 1e-3).unwrap();
        assert_eq!(m.forward_passes, 4);
        assert_eq!(m.subnets.len(), 3);
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let (mut st, data, tc, space) = setup(false);
        let before = st.weights.clone();
        let s = UniformSampler(space);
        let m = sandwich_step(&mut st, &data.batch(&[0]).unwrap(), Some(&s), &tc, 0.0).unwrap();
        assert_eq!(st.weights, before);
        assert!(m.full_loss.is_finite());
        assert_eq!(st.metrics.len(), 1);
    }

    #[test]
    fn lora_training_touches_only_adapters() {
        let (mut st, data, tc, space) = setup(true);
        let before = st.weights.clone();
        let s = UniformSampler(space);
        for i in 0..3 {
            sandwich_step(&mut st, &data.batch(&[i]).unwrap(), Some(&s), &tc, 1e-2).unwrap();
        }
        assert_eq!(st.weights.emb, before.emb);
        assert_eq!(st.weights.blocks, before.blocks);
        assert_eq!(st.weights.lm_head, before.lm_head);
        assert_ne!(st.weights.lora, before.lora);
    }

    #[test]
    fn zero_epochs_change_nothing() {
        let (mut st, data, mut tc, _) = setup(false);
        tc.epochs = 0;
        let before = st.weights.clone();
        let r = train(&mut st, &data, &tc, None, None, &mut |_, _| Ok(())).unwrap();
        assert_eq!(r.steps, 0);
        assert_eq!(st.weights, before);
    }

    #[test]
    fn sampler_is_required_when_k_positive() {
        let (mut st, data, tc, _) = setup(false);
        let err = sandwich_step(&mut st, &data.batch(&[0]).unwrap(), None, &tc, 1e-3).unwrap_err();
        assert!(matches!(err, Error::Grid(_)));
    }

    #[test]
    fn plain_training_lowers_loss() {
        let (mut st, data, mut tc, _) = setup(false);
        tc.k = 0;
        tc.epochs = 4;
        let r = train(&mut st, &data, &tc, None, None, &mut |_, _| Ok(())).unwrap();
        assert!(r.final_loss.unwrap() < r.initial_loss.unwrap());
    }

    #[test]
    fn pretrained_slice_with_zero_epochs_is_the_extraction() {
        let cfg = SuperNetConfig::toy();
        let w = init_supernet::<f32>(&cfg, 0).unwrap();
        let data = WindowSet::new(&[1u8; 100], 16).unwrap();
        let tc = TrainConfig {
            epochs: 0,
            lora: false,
            ..Default::default()
        };
        let theta = SubNetworkConfig::new(32, 2, 8, 2.0, 2);
        let a = finetune_independent(&w, &theta, InitMode::PretrainedSliced, &data, &tc).unwrap();
        assert_eq!(a, extract_subnet(&w, &theta).unwrap());
        let b = finetune_independent(&w, &theta, InitMode::Random, &data, &tc).unwrap();
        assert_ne!(a, b);
    }
}
