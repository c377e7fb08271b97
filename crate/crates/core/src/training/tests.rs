use super::*;
use crate::synth::{gen_pool, MixConfig};

fn pool(n: usize, seed: u64) -> Vec<ManipSample> {
    gen_pool(seed, n, &MixConfig::default()).unwrap()
}

fn tiny_state(cfg: TrainConfig) -> TrainState {
    TrainState::new(&ModelConfig::tiny(), &cfg).unwrap()
}

fn small_cfg() -> TrainConfig {
    TrainConfig { batch_size: 4, epochs: 2, warmup: 2, queue_size: 16, peak_lr: 1e-3, floor_lr: 1e-4, ..TrainConfig::default() }
}

fn refs(data: &[ManipSample]) -> Vec<&ManipSample> {
    data.iter().collect()
}

#[test]
fn schedule_examples() {
    let s = LrSchedule::new(1e-4, 1e-6, 1000, 10_000).unwrap();
    assert!((s.lr(0) - 1e-7).abs() < 1e-18);
    assert!((s.lr(500) - 5e-5).abs() < 1e-15);
    assert_eq!(s.lr(1000), 1e-4);
    assert!((s.lr(9999) - 1e-6).abs() < 1e-15);
    // Continuous where the ramp meets the cosine.
    assert!((s.lr(999) - s.lr(1000)).abs() < 1e-4 / 500.0);
    for k in 1000..9999 {
        assert!(s.lr(k + 1) <= s.lr(k));
    }
    assert!(LrSchedule::new(1e-4, 1e-3, 10, 100).is_err());
    assert!(LrSchedule::new(1e-4, 1e-5, 100, 100).is_err());
}

#[test]
fn zero_gradient_still_decays_weights() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![2.0, -1.0]));
    let mut opt = AdamW::new(&store, 0.1);
    opt.step(&mut store, &[None], 0.5, None).unwrap();
    assert_eq!(store.get(id).data(), &[2.0 * (1.0 - 0.05), -1.0 * (1.0 - 0.05)]);
}

#[test]
fn adam_first_step_moves_by_lr() {
    // Bias correction makes the first update ±lr per coordinate.
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![1.0, 1.0]));
    let mut opt = AdamW::new(&store, 0.0);
    opt.step(&mut store, &[Some(Tensor::vector(vec![3.0, -0.2]))], 0.01, None).unwrap();
    let d = store.get(id).data();
    assert!((d[0] - 0.99).abs() < 1e-9 && (d[1] - 1.01).abs() < 1e-9);
}

#[test]
fn clipping_caps_the_global_norm() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::vector(vec![0.0, 0.0]));
    let mut opt = AdamW::new(&store, 0.0);
    let norm = opt.step(&mut store, &[Some(Tensor::vector(vec![3.0, 4.0]))], 0.0, Some(1.0)).unwrap();
    assert_eq!(norm, 5.0);
    assert!((opt.m[0].data()[0] - 0.1 * 0.6).abs() < 1e-12);
}

#[test]
fn non_finite_gradient_rejects_the_step() {
    let mut store = ParamStore::new();
    store.add("a", Tensor::vector(vec![1.0]));
    store.add("b", Tensor::vector(vec![1.0]));
    let before = store.clone();
    let mut opt = AdamW::new(&store, 0.01);
    let grads = [Some(Tensor::vector(vec![1.0])), Some(Tensor::vector(vec![f64::NAN]))];
    assert!(matches!(opt.step(&mut store, &grads, 0.1, None), Err(Error::NonFiniteGradient(n)) if n == "b"));
    assert_eq!(store.get(store.ids().next().unwrap()), before.get(before.ids().next().unwrap()));
    assert_eq!(opt.t, 0);
}

#[test]
fn train_step_skips_poisoned_update() {
    let data = pool(4, 1);
    let mut state = tiny_state(small_cfg());
    let id = state.online.find("bin_head.fc2.w").or_else(|| state.online.ids().last()).unwrap();
    state.online.get_mut(id).data_mut()[0] = f64::NAN;
    let before = state.online.clone();
    let mom_before = state.momentum.clone();
    let sched = state.train_cfg.schedule(4).unwrap();
    let log = train_step(&mut state, &refs(&data), &sched).unwrap();
    assert!(!log.applied);
    assert_eq!(state.step, 1);
    for other in state.online.ids().filter(|&o| o != id) {
        assert_eq!(state.online.get(other), before.get(other));
        assert_eq!(state.momentum.get(other), mom_before.get(other));
    }
}

#[test]
fn breakdown_sums_to_total() {
    let data = pool(6, 2);
    let cfg = TrainConfig { loss_weights: [0.5, 2.0, 1.0, 0.3, 1.5], ..small_cfg() };
    let mut state = tiny_state(cfg);
    let sched = state.train_cfg.schedule(6).unwrap();
    // The second step has a populated queue, so every term is active.
    train_step(&mut state, &refs(&data), &sched).unwrap();
    let log = train_step(&mut state, &refs(&data), &sched).unwrap();
    let sum: f64 = log.loss.terms.iter().map(|t| t.unwrap()).sum();
    assert!((sum - log.loss.total).abs() < 1e-12 * log.loss.total.abs().max(1.0));
}

#[test]
fn first_step_skips_contrastive_term() {
    let data = pool(4, 3);
    let mut state = tiny_state(small_cfg());
    let sched = state.train_cfg.schedule(4).unwrap();
    let log = train_step(&mut state, &refs(&data), &sched).unwrap();
    assert!(log.loss.terms[0].is_none());
    assert!(log.loss.terms[1..].iter().all(Option::is_some));
}

fn grads_with(flags: LossFlags) -> (ParamStore, Vec<Option<Tensor>>) {
    let data = pool(6, 4);
    let mut state = tiny_state(TrainConfig { flags, ..small_cfg() });
    let sched = state.train_cfg.schedule(6).unwrap();
    train_step(&mut state, &refs(&data), &sched).unwrap();
    let input = BatchInput::new(&refs(&data));
    let mom = momentum_forward(&state.model, &state.momentum, &input, flags.tmg).unwrap();
    let mut g = Graph::new(&state.online, true);
    let (root, _) = joint_loss(&mut g, &state, &refs(&data), &mom).unwrap();
    g.backward(root).unwrap();
    let grads = g.param_grads();
    drop(g);
    (state.online, grads)
}

fn zero_grad(store: &ParamStore, grads: &[Option<Tensor>], prefix: &str) -> bool {
    let mut seen = false;
    for id in store.ids().filter(|&id| store.name(id).starts_with(prefix)) {
        seen = true;
        if let Some(g) = &grads[id.index()] {
            if g.data().iter().any(|&x| x != 0.0) {
                return false;
            }
        }
    }
    assert!(seen, "no parameters under {prefix}");
    true
}

#[test]
fn disabled_terms_leave_their_heads_untouched() {
    let (store, grads) = grads_with(LossFlags { img: false, bic: false, ..LossFlags::ALL });
    for p in ["box_head", "lpaa", "uv", "bin_head"] {
        assert!(zero_grad(&store, &grads, p), "{p}");
    }
    for p in ["mul_head", "tok_head", "proj_v", "aggregator"] {
        assert!(!zero_grad(&store, &grads, p), "{p}");
    }
    let (store, grads) = grads_with(LossFlags::from_array([false, true, false, false, false]));
    for p in ["proj_v", "proj_t", "aggregator", "tok_head", "mul_head", "bin_head"] {
        assert!(zero_grad(&store, &grads, p), "{p}");
    }
    assert!(!zero_grad(&store, &grads, "box_head"));
}

#[test]
fn all_terms_disabled_is_an_error() {
    let data = pool(2, 5);
    let state = tiny_state(TrainConfig { flags: LossFlags::from_array([false; 5]), ..small_cfg() });
    let input = BatchInput::new(&refs(&data));
    let mom = momentum_forward(&state.model, &state.momentum, &input, false).unwrap();
    let mut g = Graph::new(&state.online, true);
    assert!(joint_loss(&mut g, &state, &refs(&data), &mom).is_err());
}

#[test]
fn momentum_branch_is_frozen_and_tracks_online() {
    let data = pool(4, 6);
    let input = BatchInput::new(&refs(&data));
    let state = tiny_state(small_cfg());
    let mut g = Graph::new(&state.momentum, false);
    let out = state.model.forward(&mut g, &input, Needs::ALL).unwrap();
    let loss = g.sum(out.v_proj.unwrap());
    g.backward(loss).unwrap();
    assert!(g.param_grads().iter().all(|gr| gr.as_ref().is_none_or(|t| t.data().iter().all(|&x| x == 0.0))));
    drop(g);

    // m = 1 freezes the momentum weights.
    let mut state = tiny_state(TrainConfig { ema_momentum: 1.0, ..small_cfg() });
    let before = state.momentum.clone();
    let sched = state.train_cfg.schedule(4).unwrap();
    train_step(&mut state, &refs(&data), &sched).unwrap();
    for id in before.ids() {
        assert_eq!(state.momentum.get(id), before.get(id));
    }
    assert!(state.online.ids().any(|id| state.online.get(id) != before.get(id)));

    // m = 0 copies the online weights.
    let mut state = tiny_state(TrainConfig { ema_momentum: 0.0, ..small_cfg() });
    train_step(&mut state, &refs(&data), &sched).unwrap();
    for id in state.online.ids() {
        assert_eq!(state.momentum.get(id), state.online.get(id));
    }
}

#[test]
fn queues_fill_to_capacity() {
    let data = pool(4, 7);
    let mut state = tiny_state(small_cfg());
    let sched = LrSchedule::new(1e-3, 1e-4, 2, 10).unwrap();
    for s in 1..=6usize {
        train_step(&mut state, &refs(&data), &sched).unwrap();
        assert_eq!(state.image_queue.len(), (4 * s).min(16));
        assert_eq!(state.text_queue.len(), (4 * s).min(16));
    }
}

#[test]
fn training_is_deterministic() {
    let data = pool(40, 8);
    let run = || {
        let mut state = tiny_state(small_cfg());
        let sched = state.train_cfg.schedule(40).unwrap();
        let logs = train_epoch(&mut state, &data, 0, &sched).unwrap();
        logs.iter().map(|l| l.loss.total.to_bits()).collect::<Vec<_>>()
    };
    let a = run();
    assert_eq!(a.len(), 10);
    assert_eq!(a, run());
    assert_eq!(epoch_order(3, 1, 50), epoch_order(3, 1, 50));
    assert_ne!(epoch_order(3, 1, 50), epoch_order(3, 2, 50));
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let data = pool(8, 9);
    let mut state = tiny_state(small_cfg());
    let sched = state.train_cfg.schedule(8).unwrap();
    train_epoch(&mut state, &data, 0, &sched).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&state, &path).unwrap();
    let back = load_checkpoint(&path, Some((&state.model_cfg, &state.train_cfg))).unwrap();
    let r = refs(&data);
    let a: Vec<u64> = eval_logits(&state.model, &state.online, &r).unwrap().iter().map(|x| x.to_bits()).collect();
    let b: Vec<u64> = eval_logits(&back.model, &back.online, &r).unwrap().iter().map(|x| x.to_bits()).collect();
    assert_eq!(a, b);
    assert_eq!(back.step, state.step);
    assert_eq!(back.opt, state.opt);
    assert_eq!(back.image_queue.snapshot(), state.image_queue.snapshot());
    assert_eq!(back.text_queue.raw_parts(), state.text_queue.raw_parts());
    for id in state.momentum.ids() {
        assert_eq!(back.momentum.get(id), state.momentum.get(id));
    }

    // Resuming from the checkpoint continues identically.
    let mut resumed = back;
    let x = train_epoch(&mut state, &data, 1, &sched).unwrap();
    let y = train_epoch(&mut resumed, &data, 1, &sched).unwrap();
    assert_eq!(x, y);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let state = tiny_state(small_cfg());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&state, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&cut, None), Err(Error::Checkpoint(_))));

    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 0x40;
    std::fs::write(&cut, &flipped).unwrap();
    assert!(matches!(load_checkpoint(&cut, None), Err(Error::Checkpoint(_))));

    let mut wrong_version = bytes.clone();
    wrong_version[4] = 9;
    std::fs::write(&cut, &wrong_version).unwrap();
    let err = load_checkpoint(&cut, None).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");

    // A different expected configuration only warns.
    let other = TrainConfig { seed: 99, ..small_cfg() };
    assert!(load_checkpoint(&path, Some((&state.model_cfg, &other))).is_ok());
}

#[test]
fn predictions_and_inspection_have_expected_shapes() {
    let data = pool(70, 10);
    let state = tiny_state(small_cfg());
    let preds = predict(&state.model, &state.online, &data).unwrap();
    assert_eq!(preds.len(), 70);
    for (p, s) in preds.iter().zip(&data) {
        assert_eq!(p.id, s.id);
        assert!((0.0..=1.0).contains(&p.fake_prob));
        assert_eq!(p.token_probs.len(), s.y_tok.len());
    }
    let ins = inspect(&state.model, &state.online, &data[..3]).unwrap();
    let n = state.model_cfg.patches_per_image();
    assert_eq!(ins[0].agg_attention.len(), state.model_cfg.heads);
    assert_eq!(ins[0].agg_attention[0].len(), n);
    assert!((ins[0].agg_attention[0].iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert_eq!(ins[0].text_to_image.len(), 1 + state.model_cfg.max_text_len);
    assert_eq!(ins[0].image_to_text.len(), 1 + n);
}

#[test]
fn config_hash_tracks_both_configs() {
    let m = ModelConfig::tiny();
    let t = TrainConfig::default();
    assert_eq!(config_hash(&m, &t).unwrap(), config_hash(&m, &t.clone()).unwrap());
    assert_ne!(config_hash(&m, &t).unwrap(), config_hash(&ModelConfig::desk(), &t).unwrap());
    assert_ne!(config_hash(&m, &t).unwrap(), config_hash(&m, &TrainConfig { alpha: 0.1, ..t.clone() }).unwrap());
}
