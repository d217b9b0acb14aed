use metarims::agent::{AgentConfig, CoreKind};
use metarims::autodiff::{Tape, Tensor};
use metarims::metaloop::*;
use metarims::params::ParamId;
use metarims::rims::RimConfig;
use metarims::rl::*;
use metarims::{Agent64, Error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_cfg() -> AgentConfig {
    AgentConfig {
        core: CoreKind::Rims,
        rim: RimConfig {
            n_modules: 4,
            n_active: 2,
            hidden_per_module: 4,
            key_dim: 4,
            value_dim: 4,
            n_heads_input: 2,
            n_heads_comm: 2,
            comm_key_dim: 4,
            comm_value_dim: 4,
            input_dim: 8,
        },
        lstm_hidden: 6,
        encoder_dim: 6,
        mission_dim: 2,
        head_hidden: 5,
    }
}

fn small_loop() -> LoopConfig {
    LoopConfig {
        t_in: 4,
        envs: 3,
        workers: 2,
        ..Default::default()
    }
}

fn trainer(name: &str, ppo: PpoConfig, seed: u64) -> Trainer<f64> {
    let tasks = TaskDistribution::single("gotoobj:5".parse().unwrap());
    make_variant(name, small_cfg(), small_loop(), ppo, GaeConfig::default(), tasks, seed).unwrap()
}

#[test]
fn unknown_variant_is_a_config_error() {
    let tasks = TaskDistribution::single("gotoobj:5".parse().unwrap());
    let r = make_variant::<f64>("metaGru", small_cfg(), small_loop(), PpoConfig::default(), GaeConfig::default(), tasks, 0);
    assert!(matches!(r, Err(Error::Config(_))));
    for v in VariantName::ALL {
        assert_eq!(v.as_str().parse::<VariantName>().unwrap(), v);
    }
}

#[test]
fn outer_span_is_four_inner_spans() {
    let cfg = LoopConfig { t_in: 16, ..Default::default() };
    assert_eq!(cfg.t_out(), 64);
    assert_eq!(LoopConfig::default().inner_per_outer, 4);
}

#[test]
fn partitions_cover_every_parameter_once() {
    for v in VariantName::ALL {
        let t = trainer(v.as_str(), PpoConfig::default(), 0);
        t.partition.validate(&t.agent.store).unwrap();
        let mut all: Vec<ParamId> = t.partition.fast.iter().chain(&t.partition.slow).copied().collect();
        all.sort_by_key(|id| id.index());
        assert_eq!(all, t.agent.store.ids().collect::<Vec<_>>(), "{v}");
        assert_eq!(t.partition.is_single(), !v.two_loops(), "{v}");
    }
}

#[test]
fn variant_partitions_follow_the_roles() {
    let role = |t: &Trainer<f64>, id: ParamId| t.agent.store.get(id).role;
    let meta = trainer("metaRims", PpoConfig::default(), 0);
    assert!(meta.partition.fast.iter().all(|&id| !role(&meta, id).is_attention()));
    assert!(meta.partition.slow.iter().all(|&id| !role(&meta, id).is_module()));
    let rims = meta.agent.params.rims().unwrap();
    for id in rims.module_ids() {
        assert!(meta.partition.fast.contains(&id));
    }
    for id in rims.attention_ids() {
        assert!(meta.partition.slow.contains(&id));
    }
    assert!(meta.partition.fast.contains(&meta.agent.params.pol_w1));
    assert!(meta.partition.slow.contains(&meta.agent.params.val_w1));

    let flip = trainer("metaFlip", PpoConfig::default(), 0);
    for id in rims.attention_ids() {
        assert!(flip.partition.fast.contains(&id));
    }
    for id in rims.module_ids() {
        assert!(flip.partition.slow.contains(&id));
    }
    let union = |t: &Trainer<f64>| {
        let mut u: Vec<usize> = t.partition.fast.iter().chain(&t.partition.slow).map(|i| i.index()).collect();
        u.sort();
        u
    };
    assert_eq!(union(&meta), union(&flip));

    let lstm = trainer("metaLstm", PpoConfig::default(), 0);
    assert_eq!(lstm.agent.cfg.core, CoreKind::Lstm);
    let p = &lstm.agent.params;
    assert_eq!(lstm.partition.slow, vec![p.val_w1, p.val_b1, p.val_w2, p.val_b2]);

    for single in ["vanilla", "modular", "slowLR"] {
        let t = trainer(single, PpoConfig::default(), 0);
        assert!(t.partition.slow.is_empty(), "{single}");
    }
    assert_eq!(trainer("vanilla", PpoConfig::default(), 0).agent.cfg.core, CoreKind::Lstm);
}

#[test]
fn inner_and_outer_updates_respect_the_partition() {
    let mut t = trainer("metaRims", PpoConfig::default(), 1);
    for _ in 0..3 {
        let slow = t.agent.store.content_hash(t.partition.slow.clone());
        let fast = t.agent.store.content_hash(t.partition.fast.clone());
        let m = t.inner_update().unwrap();
        assert_eq!(m.phase, Phase::Inner);
        assert_eq!(slow, t.agent.store.content_hash(t.partition.slow.clone()));
        assert_ne!(fast, t.agent.store.content_hash(t.partition.fast.clone()));

        let slow = t.agent.store.content_hash(t.partition.slow.clone());
        let fast = t.agent.store.content_hash(t.partition.fast.clone());
        let m = t.outer_update().unwrap();
        assert_eq!(m.phase, Phase::Outer);
        assert_eq!(fast, t.agent.store.content_hash(t.partition.fast.clone()));
        assert_ne!(slow, t.agent.store.content_hash(t.partition.slow.clone()));
    }
}

#[test]
fn zero_rates_change_nothing() {
    let ppo = PpoConfig {
        lr: 0.0,
        outer_lr: Some(0.0),
        ..Default::default()
    };
    let mut t = trainer("metaRims", ppo, 2);
    let all: Vec<ParamId> = t.agent.store.ids().collect();
    let before = t.agent.store.content_hash(all.clone());
    t.inner_update().unwrap();
    assert_eq!(before, t.agent.store.content_hash(all.clone()));
    t.outer_update().unwrap();
    assert_eq!(before, t.agent.store.content_hash(all));

    let ppo = PpoConfig {
        outer_lr: Some(0.0),
        ..Default::default()
    };
    let mut t = trainer("metaRims", ppo, 2);
    let all: Vec<ParamId> = t.agent.store.ids().collect();
    let before = t.agent.store.content_hash(all.clone());
    t.outer_update().unwrap();
    assert_eq!(before, t.agent.store.content_hash(all));
}

#[test]
fn never_active_modules_get_no_dynamics_gradient() {
    let mut cfg = small_cfg();
    cfg.rim.n_modules = 5;
    cfg.rim.n_active = 1;
    let mut checked = 0;
    for seed in 0..6 {
        let agent = Agent64::new(cfg.clone(), seed).unwrap();
        let tasks = TaskDistribution::single("gotolocal:6".parse().unwrap());
        let mut pool = EnvPool::new(&agent, tasks, 1, seed).unwrap();
        let ro = collect_rollout(&mut pool, &agent, 3, true, 1).unwrap();
        let used: Vec<usize> = ro.active.iter().flatten().flatten().copied().collect();
        let (adv, ret) = rollout_advantages(&ro, &GaeConfig::default()).unwrap();
        let rims = agent.params.rims().unwrap().clone();
        let mask = trainable_mask(agent.store.len(), rims.dynamics_ids());
        let mut tape = Tape::with_trainable(&agent.store, &mask);
        let terms = ppo_loss(&mut tape, agent.net(), &ro, &[0], &adv, &ret, &PpoConfig::default(), false).unwrap();
        let grads = tape.backward(terms.total).unwrap();
        for j in 0..5 {
            // a module active only while its state is zero has no `wh` gradient
            let mut any = false;
            for id in rims.dynamics_ids() {
                let g = grads.param(id).unwrap();
                let per = g.len() / 5;
                let slice = &g.data()[j * per..(j + 1) * per];
                any |= slice.iter().any(|&x| x != 0.0);
                if !used.contains(&j) {
                    assert!(slice.iter().all(|&x| x == 0.0), "module {j} never active");
                    checked += 1;
                }
            }
            assert_eq!(any, used.contains(&j), "module {j}");
        }
    }
    assert!(checked > 0);
}

#[test]
fn slow_lr_scales_attention_steps_by_a_quarter() {
    let ppo = PpoConfig {
        lr: 2e-3,
        optimizer: OptimizerKind::Adam,
        ..Default::default()
    };
    let t = trainer("slowLR", ppo.clone(), 3);
    let groups = t.single_groups();
    assert_eq!(groups.len(), 2);
    let attn: Vec<ParamId> = t.agent.params.rims().unwrap().attention_ids().to_vec();
    let mut got_attn = groups[1].ids.clone();
    got_attn.sort_by_key(|i| i.index());
    let mut want_attn = attn.clone();
    want_attn.sort_by_key(|i| i.index());
    assert_eq!(got_attn, want_attn);
    assert_eq!(groups[1].lr, 2e-3 / 4.0);
    assert_eq!(groups[0].lr, 2e-3);

    // small gradients keep the global clip inactive, so the groups decouple
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let store = &t.agent.store;
    let grads: Vec<Option<Tensor<f64>>> = store
        .ids()
        .map(|id| {
            let v = store.value(id);
            let data = (0..v.len()).map(|_| rng.gen_range(-1e-3..1e-3)).collect();
            Some(Tensor::new(v.shape().to_vec(), data).unwrap())
        })
        .collect();
    let only = |ids: &[ParamId]| -> Vec<Option<Tensor<f64>>> {
        grads
            .iter()
            .enumerate()
            .map(|(i, g)| if ids.iter().any(|id| id.index() == i) { g.clone() } else { None })
            .collect()
    };
    let mut joint = store.clone();
    Optimizer::new(&ppo).apply_update(&mut joint, &groups, &grads).unwrap();
    let mut split = store.clone();
    Optimizer::new(&ppo).apply_update(&mut split, &groups[..1], &only(&groups[0].ids)).unwrap();
    Optimizer::new(&ppo).apply_update(&mut split, &groups[1..], &only(&groups[1].ids)).unwrap();
    let all: Vec<ParamId> = store.ids().collect();
    assert_eq!(joint.content_hash(all.clone()), split.content_hash(all));

    // an Adam first step moves each coordinate by about lr
    for (&id, scale) in groups[0].ids.iter().take(1).map(|id| (id, 1.0)).chain(attn.iter().take(1).map(|id| (id, 0.25))) {
        let d = joint.value(id).data()[0] - store.value(id).data()[0];
        assert!((d.abs() - scale * 2e-3).abs() < 1e-6 * scale, "{d}");
    }
}

#[test]
fn zero_budget_trains_nothing() {
    let mut t = trainer("metaRims", PpoConfig::default(), 4);
    let mut calls = 0;
    t.train(0, |_, _| {
        calls += 1;
        Ok(Flow::Continue)
    })
    .unwrap();
    assert_eq!((calls, t.frames(), t.updates()), (0, 0, 0));
}

#[test]
fn frames_are_accounted_exactly() {
    for name in ["metaRims", "modular"] {
        let mut t = trainer(name, PpoConfig::default(), 5);
        let budget = 1000;
        let mut rows = Vec::new();
        t.train(budget, |m, _| {
            rows.push(m.clone());
            Ok(Flow::Continue)
        })
        .unwrap();
        let (t_in, envs) = (4u64, 3u64);
        let mut expect = 0;
        for (i, m) in rows.iter().enumerate() {
            expect += match m.phase {
                Phase::Inner | Phase::Single => t_in * envs,
                Phase::Outer => 4 * t_in * envs,
            };
            assert_eq!(m.frames, expect);
            assert_eq!(m.updates, i as u64 + 1);
        }
        assert!(expect <= budget);
        assert_eq!(t.frames(), expect);
        let outer = rows.iter().filter(|m| m.phase == Phase::Outer).count();
        if name == "metaRims" {
            assert_eq!(rows[4].phase, Phase::Outer);
            assert_eq!(outer, rows.len() / 5);
        } else {
            assert_eq!(outer, 0);
        }
        assert!(t.active_sizes_ok());
    }
}

#[test]
fn deterministic_mode_repeats_the_metric_stream() {
    let run = || {
        let mut lc = small_loop();
        lc.deterministic = true;
        let tasks = TaskDistribution::single("gotoobj:5".parse().unwrap());
        let mut t: Trainer<f64> =
            make_variant("metaRims", small_cfg(), lc, PpoConfig::default(), GaeConfig::default(), tasks, 6).unwrap();
        let mut rows = Vec::new();
        t.train(800, |m, _| {
            rows.push(m.clone());
            Ok(Flow::Continue)
        })
        .unwrap();
        (rows, t.agent.to_checkpoint())
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert!(!a.is_empty());
    assert!(a.iter().all(|m| m.fps == 0.0));
    assert_eq!(a, b);
    assert_eq!(ca, cb);
}

#[test]
fn early_stop_is_honoured() {
    let mut t = trainer("vanilla", PpoConfig::default(), 7);
    t.train(10_000, |m, _| Ok(if m.updates == 2 { Flow::Stop } else { Flow::Continue }))
        .unwrap();
    assert_eq!(t.updates(), 2);
}
