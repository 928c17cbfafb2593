use std::collections::BTreeSet;

use graphreason::backbone::{BackboneConfig, Model, Vocab};
use graphreason::config::ExperimentConfig;
use graphreason::data::Example;
use graphreason::graph::{
    build_swing_graph, candidate_set, k_hop_neighborhood, Candidate, CandidateSet, InteractionLog, SwingParams,
};
use graphreason::inference::{halting_step, ndcg_at_k, recall_at_k};
use graphreason::reasoning::{temperature_at, total_loss, train, ReasoningConfig};
use graphreason::simplex::{
    barycenter, entropy, kl_divergence, rank_teacher_prior, tv_distance, Categorical, TeacherSchedule,
};
use graphreason::tensor::{Tape, Tensor};
use graphreason::{ItemId, UserId};
use proptest::prelude::*;

fn dist(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..1.0, n).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    })
}

fn pair(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1..=max).prop_flat_map(|n| (dist(n), dist(n)))
}

fn cat(mass: Vec<f64>) -> Categorical<f64> {
    Categorical::new((0..mass.len() as u64).map(ItemId).collect(), mass).unwrap()
}

fn logs() -> impl Strategy<Value = Vec<Vec<u64>>> {
    prop::collection::vec(prop::collection::vec(0u64..12, 2..8), 2..16)
}

fn to_log(seqs: &[Vec<u64>]) -> InteractionLog {
    InteractionLog::from_sequences(
        seqs.iter().enumerate().map(|(u, s)| (UserId(u as u64), s.iter().map(|&i| ItemId(i)).collect())),
    )
}

proptest! {
    #[test]
    fn gibbs((p, q) in pair(10)) {
        let (p, q) = (cat(p), cat(q));
        prop_assert!(kl_divergence(&q, &p).unwrap() >= -1e-15);
        prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-15);
    }

    #[test]
    fn pinsker((p, q) in pair(10)) {
        let (p, q) = (cat(p), cat(q));
        prop_assert!(tv_distance(&p, &q) <= (kl_divergence(&q, &p).unwrap() / 2.0).sqrt() + 1e-12);
    }

    #[test]
    fn tv_is_a_metric((a, b, c) in (1usize..8).prop_flat_map(|n| (dist(n), dist(n), dist(n)))) {
        let (a, b, c) = (cat(a), cat(b), cat(c));
        prop_assert_eq!(tv_distance(&a, &b), tv_distance(&b, &a));
        prop_assert!(tv_distance(&a, &c) <= tv_distance(&a, &b) + tv_distance(&b, &c) + 1e-15);
        prop_assert!(tv_distance(&a, &a) == 0.0);
    }

    #[test]
    fn teacher_sharpens_along_schedule(m in 0usize..30, steps in 1usize..8, gamma_base in 1.0f64..10.0, tgt in 0u64..40) {
        let cands = CandidateSet {
            seeds: vec![],
            candidates: (0..m as u64).map(|k| Candidate { item: ItemId(k), weight: 1.0 / (k + 1) as f64 }).collect(),
            hops: 1,
            max_candidates: 30,
        };
        let sched = TeacherSchedule::new(gamma_base, steps).unwrap();
        let h: Vec<f64> = (1..=steps)
            .map(|t| entropy(&rank_teacher_prior(&cands, ItemId(tgt), sched.gamma(t).unwrap()).unwrap()))
            .collect();
        prop_assert!(h.windows(2).all(|w| w[1] <= w[0] + 1e-15), "{:?}", h);
    }

    #[test]
    fn barycenter_in_hull(p in dist(6), emb in prop::collection::vec(-5.0f64..5.0, 12)) {
        let p = cat(p);
        let b = barycenter(&p, |i| Some(&emb[i.0 as usize * 2..i.0 as usize * 2 + 2])).unwrap();
        for axis in 0..2 {
            let coords = (0..6).map(|k| emb[k * 2 + axis]);
            let lo = coords.clone().fold(f64::INFINITY, f64::min);
            let hi = coords.fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(b[axis] >= lo - 1e-12 && b[axis] <= hi + 1e-12);
        }
    }

    #[test]
    fn candidates_stay_in_neighborhood(seqs in logs(), hist in prop::collection::vec(0u64..12, 1..6), window in 1usize..4, hops in 1usize..3, m in 1usize..30) {
        let g = build_swing_graph(&to_log(&seqs), &SwingParams::default()).unwrap();
        let hist: Vec<ItemId> = hist.into_iter().map(ItemId).collect();
        let c = candidate_set(&g, &hist, window, hops, m).unwrap();
        let seeds: BTreeSet<ItemId> = c.seeds.iter().copied().collect();
        let mut allowed = k_hop_neighborhood(&g, &seeds, hops);
        allowed.extend(seeds.iter().copied());
        prop_assert!(c.len() <= m);
        prop_assert!(c.items().all(|i| allowed.contains(&i)));
    }

    #[test]
    fn swing_is_deterministic_and_unsampled_below_cap(seqs in logs(), seed in any::<u64>()) {
        let log = to_log(&seqs);
        let p = SwingParams { seed, ..Default::default() };
        let a = build_swing_graph(&log, &p).unwrap();
        prop_assert_eq!(&a, &build_swing_graph(&log, &p).unwrap());
        // at most 15 users, so a cap of 16 never samples
        let capped = build_swing_graph(&log, &SwingParams { max_common_users: 16, seed: seed ^ 1, ..p }).unwrap();
        let ea: Vec<_> = a.edges().map(|(i, e)| (i, *e)).collect();
        let eb: Vec<_> = capped.edges().map(|(i, e)| (i, *e)).collect();
        prop_assert_eq!(ea, eb);
    }

    #[test]
    fn softmax_rows_sum_to_one(z in prop::collection::vec(-1e4f64..1e4, 1..40), tau in 0.05f64..10.0) {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::row(z));
        let s = tape.softmax_rows(x, tau).unwrap();
        let v = tape.value(s);
        prop_assert!(v.iter().all(|p| p.is_finite() && *p >= 0.0));
        prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn backward_is_linear(x in prop::collection::vec(-2.0f64..2.0, 6), target in 0usize..6) {
        let t = Tensor::row(x);
        let grad = |which: u8| {
            let mut tape = Tape::new();
            let v = tape.param(&t);
            let a = tape.cross_entropy(v, target, 1.0).unwrap();
            let g = tape.gelu(v);
            let b = tape.sum(g);
            let loss = match which {
                0 => a,
                1 => b,
                _ => tape.add(a, b).unwrap(),
            };
            tape.backward(loss).unwrap().get(v).unwrap().to_vec()
        };
        let (ga, gb, gs) = (grad(0), grad(1), grad(2));
        for k in 0..6 {
            prop_assert!((ga[k] + gb[k] - gs[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn schedules_are_monotone(steps in 1usize..8, gamma_base in 1.0f64..10.0, tau_base in 0.01f64..10.0, alpha in 1.01f64..3.0) {
        let cfg = ReasoningConfig { train_steps: steps, gamma_base, tau_base, tau_exponent: alpha, ..Default::default() };
        let sched = cfg.teacher_schedule().unwrap();
        for t in 1..steps {
            prop_assert!(temperature_at(&cfg, t + 1).unwrap() > temperature_at(&cfg, t).unwrap());
            prop_assert!(sched.gamma(t + 1).unwrap() < sched.gamma(t).unwrap());
        }
    }

    #[test]
    fn halting_dominance(kl in prop::collection::vec(0.0f64..1.0, 0..8), e1 in 0.0f64..1.0, e2 in 0.0f64..1.0) {
        let (hi, lo) = if e1 >= e2 { (e1, e2) } else { (e2, e1) };
        let max = kl.len() + 1;
        prop_assert!(halting_step(&kl, hi, max) <= halting_step(&kl, lo, max));
    }

    #[test]
    fn metric_consistency(perm in Just((0..30u64).collect::<Vec<_>>()).prop_shuffle(), target in 0u64..40, k in 1usize..30) {
        let ranked: Vec<ItemId> = perm.into_iter().map(ItemId).collect();
        let (r, n) = (recall_at_k(&ranked, ItemId(target), k), ndcg_at_k(&ranked, ItemId(target), k));
        prop_assert!((r == 0.0 && n == 0.0) || (r == 1.0 && n > 0.0 && n <= 1.0));
    }

    #[test]
    fn zero_weight_total_is_main_sum(main in prop::collection::vec(0.0f64..10.0, 1..6)) {
        let reg = vec![3.0; main.len()];
        prop_assert_eq!(total_loss(&main, &reg, 0.0).unwrap(), main.iter().sum::<f64>());
    }

    #[test]
    fn config_text_round_trips(d in 1usize..8, lr in 1e-5f64..1.0, eps in 0.0f64..1.0, seed in any::<u64>(), ctx in any::<bool>()) {
        let mut c = ExperimentConfig { seed, ..Default::default() };
        c.backbone.d = d * 2;
        c.backbone.heads = 2;
        c.reasoning.learning_rate = lr;
        c.reasoning.epsilon = eps;
        c.reasoning.use_context = ctx;
        prop_assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }
}

#[test]
fn overfits_a_small_set() {
    let seqs: Vec<Example> = (0..32u64)
        .map(|u| Example {
            user: UserId(u),
            history: (0..4).map(|k| ItemId((u * 3 + k) % 40)).collect(),
            target: ItemId((u * 7 + 1) % 40),
        })
        .collect();
    let log = InteractionLog::from_sequences(
        seqs.iter().map(|e| (e.user, e.history.iter().copied().chain([e.target]).collect())),
    );
    let graph = build_swing_graph(&log, &SwingParams::default()).unwrap();
    let cfg = BackboneConfig { d: 32, layers: 1, dropout: 0.0, ..Default::default() };
    let mut model: Model<f64> = Model::new(cfg, Vocab::new((0..40).map(ItemId)).unwrap()).unwrap();
    let rcfg = ReasoningConfig {
        train_steps: 2,
        reg_weight: 0.0,
        tau_base: 0.1,
        learning_rate: 1e-2,
        batch_size: 32,
        epochs: 500,
        patience: 0,
        ..Default::default()
    };
    let report = train(&mut model, &seqs, &[], &graph, &rcfg).unwrap();
    assert!(report.final_step_main < 0.05, "final-step main loss {}", report.final_step_main);
}
