use prior_forge_core::controller::{reward, search, ControllerPolicy, Search, SearchConfig, TrainImage};
use prior_forge_core::dip::{FitConfig, TaskKind, TaskSpec};
use prior_forge_core::genome::{ArchGenome, SpatialOp};
use prior_forge_core::tensor::{Shape, Tensor};
use prior_forge_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn p_bilinear(policy: &ControllerPolicy) -> f64 {
    let s = policy.sample(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let l = &s.logits[0];
    l[0].exp() / l.iter().map(|v| v.exp()).sum::<f64>()
}

fn bandit(g: &ArchGenome) -> f64 {
    if g.cell.spatial_op == SpatialOp::Bilinear {
        1.0
    } else {
        0.0
    }
}

fn tiny_cfg(updates: usize) -> SearchConfig {
    let mut fit_cfg = FitConfig::for_task(TaskKind::Denoise, 20);
    fit_cfg.eval_every = 5;
    SearchConfig {
        candidates_per_update: 3,
        depth: 2,
        width: 4,
        z_channels: 2,
        ..SearchConfig::new(fit_cfg, updates)
    }
}

fn images(n: usize) -> Vec<TrainImage> {
    let raw: Vec<Tensor> = (0..n)
        .map(|i| Tensor::from_fn(Shape::new(1, 3, 8, 8), |_, c, h, w| ((c + i) * 5 + h * 3 + w) as f64 % 11.0 / 11.0))
        .collect();
    TrainImage::prepare(&raw, &TaskSpec::denoise(0.1), 0).unwrap()
}

#[test]
fn zero_heads_sample_uniformly() {
    let mut p = ControllerPolicy::new(3, 32, 32, 5e-3, 1);
    p.zero_heads();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut counts = [0usize; 5];
    let n = 10_000;
    for _ in 0..n {
        let s = p.sample(&mut rng).unwrap();
        counts[s.decisions[0]] += 1;
        assert!(s.logits.iter().flatten().all(|&l| l == 0.0));
    }
    for c in counts {
        assert!((c as f64 / n as f64 - 0.2).abs() <= 0.02, "{counts:?}");
    }
}

#[test]
fn rigged_bandit_prefers_bilinear() {
    let mut cfg = SearchConfig::new(FitConfig::for_task(TaskKind::Denoise, 10), 300);
    cfg.depth = 3;
    let mut run = Search::new(cfg).unwrap();
    let start = p_bilinear(&run.policy);
    while !run.finished() && p_bilinear(&run.policy) < 0.9 {
        run.step_with(|g, _| Ok((bandit(g), vec![]))).unwrap();
    }
    assert!(p_bilinear(&run.policy) >= 0.9, "from {start}");
    assert_eq!(run.state.best.as_ref().unwrap().reward, 1.0);
}

#[test]
fn zero_updates_still_evaluates_one_batch() {
    let mut run = Search::new(tiny_cfg(0)).unwrap();
    let before = run.policy.params.clone();
    let mut evaluated = std::sync::atomic::AtomicUsize::new(0);
    while !run.finished() {
        run.step_with(|g, _| {
            evaluated.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            Ok((bandit(g), vec![]))
        })
        .unwrap();
    }
    assert_eq!(*evaluated.get_mut(), 3);
    assert!(run.state.history.is_empty());
    assert!(run.state.best.is_some());
    for ((_, a), (_, b)) in before.iter().zip(run.policy.params.iter()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn resumed_search_matches_uninterrupted_run() {
    let eval = |g: &ArchGenome, _| Ok((g.pattern.active_offsets().count() as f64 + bandit(g), vec![]));
    let mut straight = Search::new(tiny_cfg(6)).unwrap();
    while !straight.finished() {
        straight.step_with(eval).unwrap();
    }
    let mut first = Search::new(tiny_cfg(6)).unwrap();
    for _ in 0..3 {
        first.step_with(eval).unwrap();
    }
    let text = serde_json::to_string(&first).unwrap();
    let mut resumed: Search = serde_json::from_str(&text).unwrap();
    while !resumed.finished() {
        resumed.step_with(eval).unwrap();
    }
    assert_eq!(resumed.state, straight.state);
    assert_eq!(resumed.state.history.len(), 6);
}

#[test]
fn reward_is_mean_of_per_image_best_psnr() {
    let imgs = images(2);
    let genome = ArchGenome::baseline(2, 4, 2).unwrap();
    let cfg = tiny_cfg(1).fit_cfg;
    let task = TaskSpec::denoise(0.1);
    let (r, fits) = reward(&genome, &imgs, &task, &cfg, 0.0).unwrap();
    assert_eq!(fits.len(), 2);
    let mean = (fits[0].best_psnr.unwrap() + fits[1].best_psnr.unwrap()) / 2.0;
    assert_eq!(r, mean);
    let (again, _) = reward(&genome, &imgs, &task, &cfg, 0.0).unwrap();
    assert_eq!(r.to_bits(), again.to_bits());
    assert!(matches!(reward(&genome, &[], &task, &cfg, 0.0), Err(Error::Empty(_))));
}

#[test]
fn diverged_candidates_score_the_fallback() {
    let imgs = images(1);
    let genome = ArchGenome::baseline(2, 4, 2).unwrap();
    let mut cfg = tiny_cfg(1).fit_cfg;
    cfg.lr = 1e300;
    let (r, fits) = reward(&genome, &imgs, &TaskSpec::denoise(0.1), &cfg, 7.5).unwrap();
    assert_eq!(r, 7.5);
    assert!(fits.is_empty());
}

#[test]
fn end_to_end_search_is_consistent() {
    let imgs = images(2);
    let task = TaskSpec::denoise(0.1);
    let (genome, t_star, state) = search(&imgs, &task, tiny_cfg(2)).unwrap();
    assert_eq!(state.history.len(), 2);
    let best = state.best.as_ref().unwrap();
    assert_eq!(best.genome, genome);
    for row in &state.history {
        assert!(row.mean_reward.is_finite());
        assert!(row.mean_reward <= best.reward);
        assert!(row.best_reward <= best.reward);
    }
    assert!((5..=20).contains(&t_star));
    assert_eq!(t_star % 5, 0);
    assert!(matches!(search(&[], &task, tiny_cfg(1)), Err(Error::Empty(_))));

    let (g2, t2, s2) = search(&imgs, &task, tiny_cfg(2)).unwrap();
    assert_eq!((g2, t2), (genome, t_star));
    assert_eq!(s2, state);
}
