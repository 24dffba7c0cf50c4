use super::*;
use crate::data::Dataset;
use crate::decoder::DecoderConfig;
use crate::mapper::{IdentityConfig, MapperConfig};

fn fs(v: &[f64], dim: usize) -> FeatureSet<'_> {
    FeatureSet::new(v, dim).unwrap()
}

fn copy_task(n: usize, d: usize) -> (Generator, Dataset) {
    let gen = Generator::new(MapperConfig::Identity(IdentityConfig { d }), DecoderConfig::Affine, 2).unwrap();
    let points: Vec<f64> = (0..n).flat_map(|i| [i as f64 * 0.5 - 0.7, (i as f64).sin()]).collect();
    let data = Dataset {
        dim: 2,
        points,
        labels: (0..n).collect(),
    };
    (gen, data)
}

#[test]
fn rejection_keeps_candidates_at_or_beyond_epsilon() {
    let data = [0.0, 0.0, 10.0, 0.0];
    let pool = [0.05, 0.0, 0.25, 0.0, 0.0, 0.5, 9.95, 0.0, 5.0, 5.0];
    assert_eq!(rs_reject(fs(&pool, 2), fs(&data, 2), 0.25), vec![1, 2, 4]);
    assert_eq!(rs_reject(fs(&pool, 2), fs(&data, 2), 0.0), vec![0, 1, 2, 3, 4]);
    assert!(rs_reject(fs(&pool, 2), fs(&data, 2), 100.0).is_empty());
}

#[test]
fn matching_picks_nearest_accepted() {
    let data = [0.0, 3.0];
    let pool = [0.5, -0.4, 2.0, 3.1, 2.9];
    let a = match_nearest(fs(&data, 1), fs(&pool, 1), &[0, 1, 2, 3, 4], 0.0).unwrap();
    assert_eq!(a.sigma, vec![1, 3]);
    // rejected candidates are never used
    let a = match_nearest(fs(&data, 1), fs(&pool, 1), &[4, 2, 0], 0.0).unwrap();
    assert_eq!(a.sigma, vec![0, 4]);
    assert!((a.distances[0] - 0.5).abs() < 1e-12);
    assert!((a.mean_distance() - 0.3).abs() < 1e-12);
}

#[test]
fn matching_ties_go_to_the_lowest_index() {
    let data = [0.0];
    let pool = [1.0, -1.0, 1.0, -1.0];
    let a = match_nearest(fs(&data, 1), fs(&pool, 1), &[3, 2, 1], 0.0).unwrap();
    assert_eq!(a.sigma, vec![1]);
}

#[test]
fn matching_oracle() {
    let data: Vec<f64> = (0..30).flat_map(|i| rng::normal_vec(1, Stream::Eval, i, 3)).collect();
    let pool: Vec<f64> = (0..200).flat_map(|i| rng::normal_vec(2, Stream::Eval, i, 3)).collect();
    let accepted: Vec<usize> = (0..200).filter(|j| j % 3 != 0).collect();
    let a = match_nearest(fs(&data, 3), fs(&pool, 3), &accepted, 0.0).unwrap();
    for i in 0..30 {
        let x = &data[i * 3..i * 3 + 3];
        let best = accepted
            .iter()
            .copied()
            .min_by(|&p, &q| euclidean(x, &pool[p * 3..p * 3 + 3]).total_cmp(&euclidean(x, &pool[q * 3..q * 3 + 3])))
            .unwrap();
        assert_eq!(a.sigma[i], best);
    }
}

#[test]
fn empty_pool_is_an_error() {
    assert_eq!(
        match_nearest(fs(&[0.0], 1), fs(&[1.0], 1), &[], 0.5),
        Err(TrainError::EmptyPool { epsilon: 0.5 })
    );
}

#[test]
fn loss_is_mean_squared_error() {
    let tape = Tape::<f64>::inactive();
    let a = DiffTensor::from_f64(&[1, 2], &[3.0, 4.0]).unwrap();
    let b = DiffTensor::zeros(&[1, 2]);
    assert_eq!(imle_loss(&tape, &a, &b).unwrap().item(), 12.5);
    let a = DiffTensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = DiffTensor::from_f64(&[2, 2], &[1.0, 1.0, 1.0, 1.0]).unwrap();
    assert_eq!(imle_loss(&tape, &a, &b).unwrap().item(), 3.5);
}

#[test]
fn default_epsilon_is_the_nearest_rank_percentile() {
    // 5 points on a line: 10 pairwise distances, rank ceil(0.5) = 1
    let data = [0.0, 1.0, 3.0, 6.0, 10.0];
    assert_eq!(default_epsilon(fs(&data, 1)), 1.0);
    // 41 points: 820 distances, rank 41 → the 41st smallest distance
    let line: Vec<f64> = (0..41).map(|i| (i * i) as f64).collect();
    let mut all = Vec::new();
    for a in 0..41 {
        for b in a + 1..41 {
            all.push(line[b] - line[a]);
        }
    }
    all.sort_by(f64::total_cmp);
    assert_eq!(default_epsilon(fs(&line, 1)), all[40]);
    assert_eq!(default_epsilon(fs(&[1.0], 1)), 0.0);
}

fn single(v: f64) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    p.insert("x", DiffTensor::from_f64(&[1], &[v]).unwrap());
    p
}

#[test]
fn adam_first_step_moves_by_the_learning_rate() {
    let mut p = single(1.0);
    let mut adam = Adam::new(AdamConfig::new(0.1), &p);
    adam.step(&mut p, &single(1.0)).unwrap();
    assert!((p.get("x").unwrap().item() - 0.9).abs() < 1e-8);
    assert_eq!(adam.t, 1);
    assert!((adam.m.get("x").unwrap().item() - 0.5).abs() < 1e-15);
    assert!((adam.v.get("x").unwrap().item() - 0.001).abs() < 1e-15);
    let mut q = single(1.0);
    let mut adam = Adam::new(AdamConfig::new(0.1), &q);
    adam.step(&mut q, &single(-3.0)).unwrap();
    assert!((q.get("x").unwrap().item() - 1.1).abs() < 1e-8);
}

#[test]
fn adam_rejects_non_finite_gradients_without_moving() {
    let mut p = single(1.0);
    let mut adam = Adam::new(AdamConfig::new(0.1), &p);
    let err = adam.step(&mut p, &single(f64::NAN)).unwrap_err();
    assert_eq!(err, TrainError::NonFiniteGradient { tensor: "x".into() });
    assert_eq!(p.get("x").unwrap().item(), 1.0);
    assert_eq!(adam.t, 0);
}

#[test]
fn ema_examples() {
    let mut s = single(0.0);
    ema_update(&mut s, &single(1.0), 0.5);
    assert_eq!(s.get("x").unwrap().item(), 0.5);
    ema_update(&mut s, &single(1.0), 0.0);
    assert_eq!(s.get("x").unwrap().item(), 1.0);
}

#[test]
fn pool_latents_are_keyed_by_round() {
    let (gen, _) = copy_task(4, 4);
    let p = gen.init(0);
    let a = sample_pool(&gen, &p, 16, 7, 0).unwrap();
    let b = sample_pool(&gen, &p, 16, 7, 0).unwrap();
    let c = sample_pool(&gen, &p, 16, 7, 1).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.latents, c.latents);
    assert_eq!(a.len(), 16);
    assert_eq!(a.latents, rng::latents(7, Stream::Pool, 0, 16, 4));
    assert!(sample_pool(&gen, &p, 0, 7, 0).is_err());
}

#[test]
fn copy_task_converges() {
    let (gen, data) = copy_task(4, 4);
    let mut cfg = ImleConfig::new(2000);
    cfg.m = Some(64);
    cfg.epsilon = Some(0.0);
    cfg.lr = 1e-2;
    let trainer = Trainer::new(gen, cfg, &data).unwrap();
    let mut state = trainer.init_state(0);
    let hist = trainer.run(&mut state, 2000, &mut |_| {}).unwrap();
    let last = hist.last().unwrap();
    assert!(last.loss < 1e-3, "loss {}", last.loss);
    assert_eq!(state.acceptance(), 1.0);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let (gen, data) = copy_task(4, 4);
    let mut cfg = ImleConfig::new(20);
    cfg.m = Some(32);
    cfg.lr = 0.0;
    cfg.refresh = 100;
    let trainer = Trainer::new(gen, cfg, &data).unwrap();
    let init = trainer.init_state(3);
    let mut state = init.clone();
    let mut refreshes = 0;
    let hist = trainer.run(&mut state, 20, &mut |_| refreshes += 1).unwrap();
    assert_eq!(refreshes, 1);
    assert!(state.params.bit_eq(&init.params));
    assert!(state.ema.bit_eq(&init.ema));
    // the matching is fixed, so every step sees the same loss
    assert!(hist.windows(2).all(|w| w[0].loss == w[1].loss));
}

#[test]
fn training_is_deterministic() {
    let (gen, data) = copy_task(6, 4);
    let mut cfg = ImleConfig::new(30);
    cfg.m = Some(40);
    cfg.refresh = 7;
    cfg.batch = Some(3);
    let trainer = Trainer::new(gen, cfg, &data).unwrap();
    let mut a = trainer.init_state(5);
    let mut b = trainer.init_state(5);
    let ha = trainer.run(&mut a, 30, &mut |_| {}).unwrap();
    let hb = trainer.run(&mut b, 30, &mut |_| {}).unwrap();
    assert_eq!(ha, hb);
    assert!(a.bit_eq(&b));
    let mut c = trainer.init_state(6);
    trainer.run(&mut c, 30, &mut |_| {}).unwrap();
    assert!(!a.bit_eq(&c));
}

#[test]
fn refresh_events_report_rejection() {
    let (gen, data) = copy_task(4, 4);
    let mut cfg = ImleConfig::new(10);
    cfg.m = Some(50);
    cfg.epsilon = Some(0.3);
    cfg.refresh = 5;
    let trainer = Trainer::new(gen, cfg, &data).unwrap();
    let mut state = trainer.init_state(0);
    let mut seen = Vec::new();
    trainer
        .run(&mut state, 10, &mut |e| {
            for &j in e.accepted {
                for i in 0..4 {
                    assert!(euclidean(&data.points[i * 2..i * 2 + 2], e.pool.feature_set().row(j)) >= e.epsilon);
                }
            }
            for &s in &e.assignment.sigma {
                assert!(e.accepted.contains(&s));
            }
            seen.push(e.step);
        })
        .unwrap();
    assert_eq!(seen, vec![0, 5]);
    assert_eq!(state.pool, 50);
}

#[test]
fn trainer_rejects_bad_setups() {
    let (gen, data) = copy_task(4, 4);
    let mut cfg = ImleConfig::new(10);
    cfg.refresh = 0;
    assert!(matches!(
        Trainer::new(gen.clone(), cfg, &data),
        Err(TrainError::Invalid { field: "refresh", .. })
    ));
    let empty = Dataset {
        dim: 2,
        points: vec![],
        labels: vec![],
    };
    assert_eq!(Trainer::new(gen, ImleConfig::new(1), &empty).unwrap_err(), TrainError::EmptyDataset);
}

#[test]
fn lemma_estimate_respects_the_bound() {
    let report = coverage_lemma_mc(|z| z, 0.0, EPSILON_Q10, &[1, 5, 10, 20, 40], 2000, 0);
    assert!((report.q_hat - 0.1).abs() < 0.002, "{}", report.q_hat);
    assert!(!report.inconclusive());
    assert!(report.within_bound());
    assert!(report.monotone());
    let r1 = report.rows[0];
    assert!((r1.bound - (1.0 - report.q_hat)).abs() < 1e-15);
    assert!((r1.se - (r1.bound * (1.0 - r1.bound) / 2000.0).sqrt()).abs() < 1e-15);
}

#[test]
fn lemma_with_unreachable_target_is_inconclusive() {
    let report = coverage_lemma_mc(|z| z, 100.0, 0.01, &[1, 2], 10, 0);
    assert!(report.inconclusive());
    assert!(report.rows.iter().all(|r| r.empirical == 1.0 && r.bound == 1.0));
}
