use super::*;
use crate::autograd::Tensor;
use crate::models::{AnalyticReward, LearnedReward, ModelDims};
use crate::stats::{mean, RunningMoments};

struct Fixture {
    params: PolicyParams,
    prompts: Vec<Prompt>,
    reward: RewardModel,
    config: TrainerConfig,
}

fn fixture(method: Method, weights: Vec<f64>, seed: u64) -> Fixture {
    let vocab = weights.len();
    let dims = ModelDims { vocab, embed: 3, hidden: 5 };
    let mut rng = Rng::new(seed);
    let params = PolicyParams::init(dims, 1.0, &mut rng).unwrap();
    let prompts = vec![
        Prompt::new(vec![0, 1], vocab).unwrap(),
        Prompt::new(vec![2, 3], vocab).unwrap(),
        Prompt::new(vec![1, 1], vocab).unwrap(),
    ];
    let config = TrainerConfig {
        gen_tokens: 2,
        batch_size: 2,
        grad_accum: 2,
        max_steps: 10,
        eval_every: 0,
        tau: TauConfig { start: 1.0, end: 1.0, anneal_steps: 1 },
        ..TrainerConfig::default()
    }
    .with_method(method);
    Fixture {
        params,
        prompts,
        reward: RewardModel::Analytic(AnalyticReward::new(weights)),
        config,
    }
}

fn ctx(f: &Fixture) -> StepContext<'_> {
    StepContext {
        reference: &f.params,
        reward: &f.reward,
        prompts: &f.prompts,
        config: &f.config,
    }
}

/// Exact E[r] averaged over prompts, by listing every continuation and
/// multiplying its per-step probabilities.
fn enumerated_reward(params: &PolicyParams, prompts: &[Prompt], reward: &RewardModel, steps: usize) -> f64 {
    let vocab = params.dims().vocab;
    let total = vocab.pow(steps as u32);
    let opts = GenerateOptions { steps, tau: 1.0, mode: Mode::Hard, top_k: None };
    let mut acc = 0.0;
    for prompt in prompts {
        let mut mass = 0.0;
        for code in 0..total {
            let ids: Vec<usize> = (0..steps).map(|t| (code / vocab.pow(t as u32)) % vocab).collect();
            let mut g = Graph::new();
            let pv = params.bind(&mut g, false);
            let seq = generate(&mut g, &pv, &pv, prompt, &opts, TokenSource::Forced(&ids)).unwrap();
            let p: f64 = seq
                .policy_logits
                .iter()
                .zip(&ids)
                .map(|(&l, &id)| {
                    let v = g.value(l).data();
                    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = v.iter().map(|x| (x - m).exp()).sum();
                    (v[id] - m).exp() / z
                })
                .product();
            mass += p;
            acc += p * reward.score_ids(prompt, &ids);
        }
        assert!((mass - 1.0).abs() < 1e-9);
    }
    acc / prompts.len() as f64
}

#[test]
fn objective_fixtures() {
    assert_eq!(objective(1.0, 0.0, 0.1), -1.0);
    assert_eq!(objective(0.7, 5.0, 0.0), -0.7);
    assert!((objective(0.5, 2.0, 0.1) + 0.3).abs() < 1e-15);
    let mut g = Graph::new();
    let r = g.constant(Tensor::scalar(0.5));
    let k = g.constant(Tensor::scalar(2.0));
    let l = objective_var(&mut g, r, k, 0.1).unwrap();
    assert_eq!(g.value(l).item(), objective(0.5, 2.0, 0.1));
}

#[test]
fn zero_learning_rate_is_a_no_op_for_every_method() {
    for method in Method::ALL {
        let mut f = fixture(method, vec![1.0, 0.0, 0.5, 0.25], 1);
        f.config.learning_rate = 0.0;
        let mut params = f.params.clone();
        let mut opt = OptimizerState::new(&params);
        let report = method_step(&mut params, &ctx(&f), &mut opt, &Rng::new(9), 1).unwrap();
        assert_eq!(params, f.params, "{method}");
        assert_eq!(report.step, 1);
        assert!(report.grad_norm > 0.0, "{method}");
        assert!(report.mean_reward.is_finite() && report.loss.is_finite());
        assert_eq!(report.total_tokens, 8);
        assert_eq!(report.grad_sample.len(), params.num_params());
        assert_eq!(report.first_epoch_ratio_deviation.is_some(), method == Method::Ppo);
    }
}

#[test]
fn steps_are_deterministic() {
    for method in Method::ALL {
        let f = fixture(method, vec![1.0, 0.0, 0.5, 0.25], 2);
        let run = || {
            let mut params = f.params.clone();
            let mut opt = OptimizerState::new(&params);
            let reports: Vec<StepReport> = (1..=3)
                .map(|s| method_step(&mut params, &ctx(&f), &mut opt, &Rng::new(4), s).unwrap())
                .collect();
            (reports, params)
        };
        assert_eq!(run(), run(), "{method}");
    }
}

#[test]
fn grade_ste_raises_exact_reward_on_small_task() {
    let mut f = fixture(Method::GradeSte, vec![1.0, 0.0, 0.0, 0.0], 3);
    f.config.beta = 0.0;
    f.config.learning_rate = 0.05;
    let before = enumerated_reward(&f.params, &f.prompts, &f.reward, 2);
    let mut params = f.params.clone();
    let mut opt = OptimizerState::new(&params);
    let rng = Rng::new(5);
    for s in 1..=200 {
        let r = grade_ste_step(&mut params, &ctx(&f), &mut opt, &rng, s).unwrap();
        assert_eq!(r.discrete_tokens, r.total_tokens);
    }
    let after = enumerated_reward(&params, &f.prompts, &f.reward, 2);
    assert!(after >= 1.5 * before, "before {before}, after {after}");
}

#[test]
fn grade_at_high_temperature_sees_mean_weight() {
    let w = vec![1.0, 0.0, 0.5, 0.25];
    let mut f = fixture(Method::Grade, w.clone(), 4);
    f.config.learning_rate = 0.0;
    f.config.beta = 0.0;
    let norm_at = |f: &mut Fixture, tau: f64| {
        f.config.tau = TauConfig { start: tau, end: tau, anneal_steps: 1 };
        let mut params = f.params.clone();
        let mut opt = OptimizerState::new(&params);
        grade_step(&mut params, &ctx(f), &mut opt, &Rng::new(1), 1).unwrap()
    };
    let hot = norm_at(&mut f, 100.0);
    assert!((hot.mean_reward - mean(&w)).abs() < 0.02, "{}", hot.mean_reward);
    let cool = norm_at(&mut f, 1.0);
    assert!(hot.grad_norm < 0.05 * cool.grad_norm, "{} vs {}", hot.grad_norm, cool.grad_norm);
}

#[test]
fn clipping_caps_the_global_norm() {
    let dims = ModelDims { vocab: 2, embed: 1, hidden: 1 };
    let mut params = PolicyParams::zeros(dims);
    let mut grads = PolicyParams::zeros(dims);
    grads.embedding = Tensor::matrix(2, 1, vec![6.0, 8.0]).unwrap();
    let mut adam = OptimizerState::new(&params).adam;
    let norm = optimizer_update(&mut params, &mut grads, &mut adam, 0.01, 1.0);
    assert_eq!(norm, 10.0);
    assert!((grads.embedding.data()[0] - 0.6).abs() < 1e-15);
    assert!((grads.embedding.data()[1] - 0.8).abs() < 1e-15);
    // First bias-corrected Adam step moves each coordinate by about lr.
    assert!((params.embedding.data()[0] + 0.01).abs() < 1e-8);
}

#[test]
fn reported_norm_exceeds_a_tiny_clip() {
    let mut f = fixture(Method::Grade, vec![1.0, 0.0, 0.5, 0.25], 5);
    f.config.grad_clip = 1e-6;
    let mut params = f.params.clone();
    let mut opt = OptimizerState::new(&params);
    let r = grade_step(&mut params, &ctx(&f), &mut opt, &Rng::new(2), 1).unwrap();
    assert!(r.grad_norm > f.config.grad_clip);
}

#[test]
fn reinforce_with_rewards_at_baseline_has_no_gradient() {
    let mut f = fixture(Method::Reinforce, vec![0.5; 4], 6);
    f.config.beta = 0.0;
    let mut params = f.params.clone();
    let mut opt = OptimizerState::new(&params);
    opt.baseline = 0.5;
    let r = reinforce_step(&mut params, &ctx(&f), &mut opt, &Rng::new(3), 1).unwrap();
    assert_eq!(r.grad_norm, 0.0);
    assert_eq!(r.mean_reward, 0.5);
}

#[test]
fn reinforce_baseline_ema() {
    let f = fixture(Method::Reinforce, vec![1.0; 4], 7);
    let mut params = f.params.clone();
    let mut opt = OptimizerState::new(&params);
    reinforce_step(&mut params, &ctx(&f), &mut opt, &Rng::new(3), 1).unwrap();
    assert!((opt.baseline - 0.1).abs() < 1e-15);
}

/// Single-sample score-function estimates of dE[r]/dℓ for a two-way softmax.
fn two_way_reinforce(baseline: f64, n: usize) -> RunningMoments {
    let rewards = [1.0, 0.2];
    let mut rng = Rng::new(11);
    let mut m = RunningMoments::new(2);
    for _ in 0..n {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::vector(vec![0.0, 0.0]));
        let id = crate::relaxation::sample_hard(&[0.0, 0.0], &mut rng);
        let ls = g.log_softmax(logits).unwrap();
        let lp = g.select(ls, id).unwrap();
        let loss = reinforce_surrogate(&mut g, lp, rewards[id], baseline);
        let grads = g.backward(loss).unwrap();
        let est: Vec<f64> = grads.wrt(logits).data().iter().map(|v| -v).collect();
        m.push(&est);
    }
    m
}

#[test]
fn reinforce_estimator_matches_softmax_derivative() {
    let n = 100_000;
    let gap = 0.8;
    let exact = [0.25 * gap, -0.25 * gap];
    for b in [0.0, 0.3] {
        let m = two_way_reinforce(b, n);
        let var = m.variance();
        for j in 0..2 {
            let se = (var[j] / n as f64).sqrt();
            assert!((m.mean[j] - exact[j]).abs() < 3.0 * se, "b={b} j={j} mean {} se {se}", m.mean[j]);
        }
    }
}

#[test]
fn gae_fixtures() {
    assert_eq!(gae_advantages(&[0.0, 0.0, 2.0], &[0.0; 3], 0.9, 0.0).unwrap(), vec![0.0, 0.0, 2.0]);
    assert_eq!(gae_advantages(&[0.0, 0.0, 2.0], &[0.0; 3], 1.0, 1.0).unwrap(), vec![2.0, 2.0, 2.0]);
    let a = gae_advantages(&[0.0, 1.0], &[1.0, 1.0], 0.5, 0.5).unwrap();
    assert_eq!(a, vec![-0.5, 0.0]);
    assert!(gae_advantages(&[0.0], &[0.0, 1.0], 0.5, 0.5).is_err());
}

#[test]
fn gae_matches_brute_force_sum() {
    let mut rng = Rng::new(8);
    let (gamma, lambda) = (0.9, 0.7);
    let rewards: Vec<f64> = (0..6).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let values: Vec<f64> = (0..6).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let n = rewards.len();
    let v = |t: usize| if t < n { values[t] } else { 0.0 };
    let deltas: Vec<f64> = (0..n).map(|t| rewards[t] + gamma * v(t + 1) - values[t]).collect();
    let a = gae_advantages(&rewards, &values, gamma, lambda).unwrap();
    for t in 0..n {
        let brute: f64 = (t..n).map(|k| (gamma * lambda).powi((k - t) as i32) * deltas[k]).sum();
        assert!((a[t] - brute).abs() < 1e-12);
    }
}

#[test]
fn clip_arithmetic() {
    let mut g = Graph::new();
    let rho = g.leaf(Tensor::scalar(1.5));
    let s = clipped_surrogate(&mut g, rho, 2.0, 0.2).unwrap();
    assert_eq!(g.value(s).item(), 1.2 * 2.0);
    let one = g.leaf(Tensor::scalar(1.0));
    let s = clipped_surrogate(&mut g, one, -0.7, 0.2).unwrap();
    assert_eq!(g.value(s).item(), -0.7);
    let z = clipped_surrogate(&mut g, one, 0.0, 0.2).unwrap();
    assert_eq!(g.value(z).item(), 0.0);
    assert_eq!(g.backward(z).unwrap().wrt(one).item(), 0.0);
}

#[test]
fn ppo_first_epoch_ratio_is_exactly_one() {
    let f = fixture(Method::Ppo, vec![1.0, 0.0, 0.5, 0.25], 9);
    let mut params = f.params.clone();
    let mut opt = OptimizerState::new(&params);
    for s in 1..=3 {
        let r = ppo_step(&mut params, &ctx(&f), &mut opt, &Rng::new(6), s).unwrap();
        assert_eq!(r.first_epoch_ratio_deviation, Some(0.0));
    }
    assert_eq!(opt.adam.step, 3 * f.config.ppo.epochs as u64);
}

#[test]
fn kl_penalty_keeps_policy_closer_to_reference() {
    let run = |beta: f64| {
        let mut f = fixture(Method::Reinforce, vec![0.5; 4], 10);
        f.config.beta = beta;
        f.config.learning_rate = 0.05;
        let mut params = f.params.clone();
        let mut opt = OptimizerState::new(&params);
        let kls: Vec<f64> = (1..=150)
            .map(|s| reinforce_step(&mut params, &ctx(&f), &mut opt, &Rng::new(12), s).unwrap().mean_kl)
            .collect();
        mean(&kls[100..])
    };
    let (free, penalised) = (run(0.0), run(1.0));
    assert!(penalised < free, "{penalised} vs {free}");
}

#[test]
fn accumulation_matches_full_batch() {
    for method in Method::ALL {
        let mut a = fixture(method, vec![1.0, 0.0, 0.5, 0.25], 13);
        a.config.learning_rate = 0.0;
        a.config.batch_size = 4;
        a.config.grad_accum = 4;
        let mut b = fixture(method, vec![1.0, 0.0, 0.5, 0.25], 13);
        b.config.learning_rate = 0.0;
        b.config.batch_size = 16;
        b.config.grad_accum = 1;
        let step = |f: &Fixture| {
            let mut params = f.params.clone();
            let mut opt = OptimizerState::new(&params);
            method_step(&mut params, &ctx(f), &mut opt, &Rng::new(3), 1).unwrap()
        };
        let (ra, rb) = (step(&a), step(&b));
        for (x, y) in ra.grad_sample.iter().zip(&rb.grad_sample) {
            assert!((x - y).abs() < 1e-10, "{method}: {x} vs {y}");
        }
        assert!((ra.mean_reward - rb.mean_reward).abs() < 1e-12);
    }
}

#[test]
fn topk_grade_ste_trains() {
    let mut f = fixture(Method::GradeSte, vec![1.0, 0.0, 0.5, 0.25], 14);
    f.config.top_k = Some(2);
    let mut params = f.params.clone();
    let mut opt = OptimizerState::new(&params);
    let r = grade_ste_step(&mut params, &ctx(&f), &mut opt, &Rng::new(1), 1).unwrap();
    assert_eq!(r.discrete_tokens, r.total_tokens);
    assert_ne!(params, f.params);
}

fn setup<'a>(f: &'a Fixture) -> TrainSetup<'a> {
    TrainSetup {
        config: &f.config,
        init: f.params.clone(),
        reward: &f.reward,
        train_prompts: &f.prompts,
        val_prompts: &f.prompts[..2],
    }
}

#[test]
fn train_with_zero_steps_returns_init() {
    let mut f = fixture(Method::GradeSte, vec![1.0, 0.0, 0.5, 0.25], 15);
    f.config.max_steps = 0;
    let out = train(&setup(&f), &Rng::new(1)).unwrap();
    assert!(out.reports.is_empty());
    assert_eq!(out.params, f.params);
    assert!(out.best.is_none());
}

#[test]
fn train_validates_on_schedule_and_is_deterministic() {
    let mut f = fixture(Method::Reinforce, vec![1.0, 0.0, 0.5, 0.25], 16);
    f.config.max_steps = 250;
    f.config.eval_every = 100;
    f.config.batch_size = 1;
    f.config.grad_accum = 1;
    let a = train(&setup(&f), &Rng::new(2)).unwrap();
    let steps: Vec<usize> = a.validation.iter().map(|v| v.0).collect();
    assert_eq!(steps, vec![100, 200]);
    assert_eq!(a.reports.len(), 250);
    let best = a.best.as_ref().unwrap();
    let top = a.validation.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(best.val_reward, top);
    let b = train(&setup(&f), &Rng::new(2)).unwrap();
    assert_eq!(a.reports, b.reports);
    assert_eq!(a.validation, b.validation);
}

#[test]
fn non_finite_reward_skips_then_aborts() {
    let mut f = fixture(Method::GradeSte, vec![1.0, 0.0, 0.5, 0.25], 17);
    let mut lr = LearnedReward::init(4, 2, 2, &mut Rng::new(1));
    lr.head_bias = Tensor::scalar(f64::NAN);
    f.reward = RewardModel::Learned(lr);
    let mut params = f.params.clone();
    let mut opt = OptimizerState::new(&params);
    let err = grade_ste_step(&mut params, &ctx(&f), &mut opt, &Rng::new(1), 1).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 1, .. }));
    assert_eq!(params, f.params);
    assert_eq!(opt.adam.step, 0);
    let err = train(&setup(&f), &Rng::new(1)).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 3, .. }), "{err}");
}

#[test]
fn evaluation_is_reproducible() {
    let f = fixture(Method::Grade, vec![1.0, 0.0, 0.5, 0.25], 18);
    let a = evaluate_policy(&f.params, &f.reward, &f.prompts, 2, 3, &Rng::new(4)).unwrap();
    let b = evaluate_policy(&f.params, &f.reward, &f.prompts, 2, 3, &Rng::new(4)).unwrap();
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&a));
}
