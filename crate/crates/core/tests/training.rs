mod common;

use std::sync::Arc;

use common::{toy_weights, toy_weights_with_lora};
use nasprune::data::WindowSet;
use nasprune::eval::eval_loss;
use nasprune::grid::{ArchSampler, UniformSampler};
use nasprune::kd::{by_name, kd_loss};
use nasprune::model::{bind_weights, forward, forward_on_tape, lm_loss, ForwardOptions, SuperNetWeights, Trainable};
use nasprune::numerics::Tape;
use nasprune::search::{SearchSpace, SpaceVariant, SubNetworkConfig};
use nasprune::train::{finetune_independent, sandwich_step, train, InitMode, TrainConfig, TrainState};

const TEXT: &str = include_str!("../../../data/kjv-genesis-to-numbers.txt");

fn windows(range: std::ops::Range<usize>, seq: usize) -> WindowSet {
    WindowSet::new(&TEXT.as_bytes()[range], seq).unwrap()
}

fn config(lora: bool) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        seq_len: 16,
        lora,
        base_lr: 3e-3,
        final_lr: 3e-4,
        ..Default::default()
    }
}

fn space(w: &SuperNetWeights<f32>) -> SearchSpace {
    SearchSpace::for_supernet(&w.cfg, SpaceVariant::Joint).unwrap()
}

#[test]
fn adapter_training_leaves_base_weights_bit_identical() {
    let w = toy_weights::<f32>(0);
    let s = UniformSampler(space(&w));
    let cfg = config(true);
    let mut st = TrainState::new(w.clone(), s.0.theta_max(), &cfg).unwrap();
    let data = windows(0..4000, 16);
    for i in 0..4 {
        sandwich_step(&mut st, &data.batch(&[i, i + 1]).unwrap(), Some(&s), &cfg, 1e-2).unwrap();
    }
    let trained = st.weights.named_tensors();
    let base = w.named_tensors();
    assert_eq!(&trained[..base.len()], &base[..]);
    assert!(trained[base.len()..].iter().any(|(n, t)| n.ends_with(".b") && t.abs_sum() > 0.0));
}

#[test]
fn full_network_logits_are_the_teacher() {
    let w = toy_weights::<f64>(1);
    let theta_max = SubNetworkConfig::full(&w.cfg);
    let data = windows(0..2000, 16);
    let batch = data.batch(&[0, 1]).unwrap();
    let kd = by_name("forward_kl").unwrap();
    let cfg = TrainConfig {
        kd_kind: "forward_kl".into(),
        lora: false,
        k: 2,
        ..config(false)
    };
    let s = UniformSampler(space(&w.cast()));
    let mut st = TrainState::new(w.clone(), theta_max, &cfg).unwrap();
    let mut peek = st.sample_rng.clone();
    let drawn = s.sample(&mut peek, 2).unwrap();
    let m = sandwich_step(&mut st, &batch, Some(&s), &cfg, 0.0).unwrap();
    let teacher = forward(&w, &theta_max, &batch.inputs).unwrap();
    assert!((m.full_loss - lm_loss(&teacher, &batch.targets).unwrap()).abs() < 1e-12);
    let t2 = teacher.clone().reshape(&[32, 256]).unwrap();
    for (sub, theta) in m.subnets.iter().zip(&drawn) {
        assert_eq!(sub.theta, *theta);
        let student = forward(&w, theta, &batch.inputs).unwrap().reshape(&[32, 256]).unwrap();
        assert!((sub.kd - kd_loss(kd.as_ref(), &t2, &student, 1.0).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn distillation_gradient_does_not_reach_the_teacher_path() {
    let w = toy_weights::<f64>(2);
    let data = windows(0..2000, 16);
    let batch = data.batch(&[0]).unwrap();
    let theta = SubNetworkConfig::new(32, 2, 8, 2.0, 2);
    let kd = by_name("js").unwrap();
    let grads_of = |with_teacher_pass: bool| {
        let mut tape = Tape::new();
        let bound = bind_weights(&mut tape, &w, Trainable::Base);
        let mut opts = ForwardOptions::default();
        let teacher = if with_teacher_pass {
            let (t, _) = forward_on_tape(&mut tape, &w, &bound, &SubNetworkConfig::full(&w.cfg), &batch.inputs, &mut opts).unwrap();
            Arc::new(tape.value(t).clone())
        } else {
            let t = forward(&w, &SubNetworkConfig::full(&w.cfg), &batch.inputs).unwrap();
            Arc::new(t.reshape(&[16, 256]).unwrap())
        };
        let (s, _) = forward_on_tape(&mut tape, &w, &bound, &theta, &batch.inputs, &mut opts).unwrap();
        let l = tape.distill(s, teacher, kd.clone(), 1.0).unwrap();
        let g = tape.backward(l).unwrap();
        bound.named_vars().iter().map(|(_, v)| g.wrt(*v)).collect::<Vec<_>>()
    };
    assert_eq!(grads_of(true), grads_of(false));
}

#[test]
fn each_step_runs_one_plus_k_passes() {
    let w = toy_weights_with_lora::<f32>(3, 4);
    let s = UniformSampler(space(&w));
    for k in [0, 1, 3] {
        let cfg = TrainConfig { k, ..config(true) };
        let mut st = TrainState::new(w.clone(), s.0.theta_max(), &cfg).unwrap();
        let data = windows(0..2000, 16);
        let m = sandwich_step(&mut st, &data.batch(&[0]).unwrap(), Some(&s), &cfg, 1e-3).unwrap();
        assert_eq!(m.forward_passes, 1 + k);
    }
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let run = || {
        let w = toy_weights::<f32>(4);
        let s = UniformSampler(space(&w));
        let cfg = TrainConfig {
            epochs: 1,
            max_steps: Some(6),
            ..config(true)
        };
        let mut st = TrainState::new(w, s.0.theta_max(), &cfg).unwrap();
        let mut log = Vec::new();
        train(&mut st, &windows(0..8000, 16), &cfg, Some(&s), Some(&mut log), &mut |_, _| Ok(())).unwrap();
        (st.weights, log)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert_eq!(String::from_utf8(la).unwrap().lines().count(), 6);
}

#[test]
fn pretrained_slices_beat_random_initialization() {
    let data = windows(0..60_000, 32);
    let valid = windows(500_000..520_000, 32);
    let base = {
        let cfg = TrainConfig {
            k: 0,
            lora: false,
            epochs: 1,
            batch_size: 8,
            seq_len: 32,
            ..config(false)
        };
        let w = toy_weights::<f32>(5);
        let theta = SubNetworkConfig::full(&w.cfg);
        let mut st = TrainState::new(w, theta, &cfg).unwrap();
        train(&mut st, &data, &cfg, None, None, &mut |_, _| Ok(())).unwrap();
        st.weights
    };
    let theta = SubNetworkConfig::new(32, 2, 16, 2.0, 2);
    let cfg = TrainConfig {
        lora: false,
        epochs: 1,
        max_steps: Some(40),
        batch_size: 8,
        seq_len: 32,
        ..config(false)
    };
    let pre = finetune_independent(&base, &theta, InitMode::PretrainedSliced, &data, &cfg).unwrap();
    let rnd = finetune_independent(&base, &theta, InitMode::Random, &data, &cfg).unwrap();
    let full = SubNetworkConfig::full(&pre.cfg);
    let lp = eval_loss(&pre, &full, &valid, 16).unwrap();
    let lr = eval_loss(&rnd, &full, &valid, 16).unwrap();
    assert!(lp < lr, "pretrained {lp} vs random {lr}");
}
