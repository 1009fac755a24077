//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use moe_locality::cache::{
    hard_miss_count, lcs_closed_form, run_eviction_policy, soft_cache_loss, CacheInit, EvictionPolicy, HardCacheState,
    SoftCacheState,
};
use moe_locality::data::{generate_dataset, SyntheticDatasetSpec};
use moe_locality::harness::{base_model, ExperimentConfig, PrefetchMode, SimContext};
use moe_locality::losses::{inversion_count, rank_mistakes, LossWeights};
use moe_locality::model::{Activation, MoEModel, ModelConfig, RoutingMode, RoutingTrace};
use moe_locality::rng::stream;
use moe_locality::train::{
    backward, evaluate_objective, finite_difference_grad, flatten, max_relative_error, routing_traces, train,
    unflatten, GradMask, GradMode, TrainConfig,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

const E: usize = 16;
const K: usize = 2;
const C: usize = 4;

fn random_requests(rng: &mut ChaCha8Rng, tokens: usize) -> Vec<Vec<usize>> {
    let ids: Vec<usize> = (0..E).collect();
    (0..tokens)
        .map(|_| {
            let mut r: Vec<usize> = ids.choose_multiple(rng, K).copied().collect();
            r.sort();
            r
        })
        .collect()
}

fn indicator(req: &[usize]) -> Vec<f64> {
    let mut v = vec![0.0; E];
    req.iter().for_each(|&i| v[i] = 1.0);
    v
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut max_entry, mut max_mass) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let reqs = random_requests(&mut rng, 100);
        for gamma in [0.3, 0.9] {
            let c0 = [C as f64 / E as f64; E];
            let mut state = SoftCacheState::uniform(E, C, K, gamma).unwrap();
            for t in 1..=reqs.len() {
                state = state.update(&indicator(&reqs[t - 1])).unwrap();
                // Unrolled: Γ_t = γ^t + (K/C) Σ_{j<t} γ^j,
                // c_t = (γ^t c_0 + Σ_{s<t} γ^{t-1-s} r_s) / Γ_t.
                let norm =
                    gamma.powi(t as i32) + (K as f64 / C as f64) * (0..t).map(|j| gamma.powi(j as i32)).sum::<f64>();
                let mut want: Vec<f64> = c0.iter().map(|c| gamma.powi(t as i32) * c).collect();
                for (s, req) in reqs[..t].iter().enumerate() {
                    let w = gamma.powi((t - 1 - s) as i32);
                    req.iter().for_each(|&i| want[i] += w);
                }
                for (got, w) in state.c.iter().zip(&want) {
                    max_entry = max_entry.max((got - w / norm).abs());
                }
                max_mass = max_mass.max((state.c.iter().sum::<f64>() - C as f64).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        max_entry <= 1e-8 && max_mass <= 1e-9 && secs < 10.0,
        format!("max entry error {max_entry:.2e}, max |mass-C| {max_mass:.2e}, {secs:.1}s"),
    )
}

fn random_trace_set(rng: &mut ChaCha8Rng) -> Vec<RoutingTrace> {
    (0..8)
        .map(|_| {
            let layers = 2;
            let tokens = 24;
            RoutingTrace::from_requests(layers, tokens, E, K, random_requests(rng, layers * tokens)).unwrap()
        })
        .collect()
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let gammas: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
    let (mut max_err, mut violations, mut worst) = (0.0f64, 0usize, 0.0f64);
    for _ in 0..100 {
        let set = random_trace_set(&mut rng);
        let mut losses = Vec::new();
        for &g in &gammas {
            let closed = lcs_closed_form(&set, g, C, &CacheInit::Uniform).unwrap();
            let mean = set
                .iter()
                .map(|t| soft_cache_loss(t, g, C, &CacheInit::Uniform).unwrap())
                .sum::<f64>()
                / set.len() as f64;
            max_err = max_err.max((closed - mean).abs());
            losses.push(mean);
        }
        for w in losses.windows(2) {
            if w[1] > w[0] + 1e-8 {
                violations += 1;
                worst = worst.max(w[1] - w[0]);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        max_err <= 1e-8 && violations == 0 && secs < 30.0,
        format!(
            "closed form max error {max_err:.2e}; monotonicity violations {violations}/900 (largest increase {worst:.3e}); {secs:.1}s"
        ),
    )
}

fn random_distribution(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let z: Vec<f64> = (0..E).map(|_| rng.random::<f64>() * 4.0).collect();
    let s: f64 = z.iter().map(|v| v.exp()).sum();
    z.iter().map(|v| v.exp() / s).collect()
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut violations = 0;
    let mut checked = 0;
    for &rho in &[0.05, 0.1, 0.2] {
        for _ in 0..1000 {
            let p = random_distribution(&mut rng);
            let q = random_distribution(&mut rng);
            let rm = rank_mistakes(&p, &q, rho).unwrap();
            let inv = inversion_count(&p, &q).unwrap() as f64;
            checked += 1;
            if rm < rho * inv {
                violations += 1;
            }
        }
    }
    outcome(violations == 0, format!("{violations} violations over {checked} pairs"))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut mismatched_totals = 0;
    for _ in 0..100 {
        let layers = 3;
        let tokens = 60;
        let trace =
            RoutingTrace::from_requests(layers, tokens, E, K, random_requests(&mut rng, layers * tokens)).unwrap();
        let g = hard_miss_count(&trace, 1.0, C, &CacheInit::Uniform).unwrap();
        let lfu = run_eviction_policy(&trace, EvictionPolicy::Lfu, C, &CacheInit::Uniform).unwrap();
        if g.total != lfu.total {
            mismatched_totals += 1;
        }
    }
    // Recency oracle: the C experts with the latest request times.
    let (mut checked, mut mismatched_sets) = (0, 0);
    for _ in 0..100 {
        let reqs = random_requests(&mut rng, 60);
        let mut state = HardCacheState::uniform(E, C, 1e-6).unwrap();
        let mut last: Vec<Option<usize>> = vec![None; E];
        for (t, req) in reqs.iter().enumerate() {
            state = state.step(req).1;
            req.iter().for_each(|&i| last[i] = Some(t));
            let mut order: Vec<usize> = (0..E).collect();
            order.sort_by(|&a, &b| last[b].cmp(&last[a]));
            let (inside, outside) = (last[order[C - 1]], last[order[C]]);
            if inside.is_none() || inside == outside {
                continue;
            }
            checked += 1;
            let mut want = order[..C].to_vec();
            want.sort();
            if state.resident_ids() != want {
                mismatched_sets += 1;
            }
        }
    }
    outcome(
        mismatched_totals == 0 && mismatched_sets == 0 && checked > 0,
        format!(
            "γ=1 vs LFU mismatched traces {mismatched_totals}/100; γ=1e-6 vs recency sets mismatched {mismatched_sets}/{checked} unambiguous steps"
        ),
    )
}

fn criterion_5() -> Outcome {
    let cfg = ModelConfig {
        layers: 2,
        experts: 4,
        top_k: 2,
        hidden: 4,
        ffn: 4,
        vocab: 4,
        max_len: 8,
        activation: Activation::Silu,
        routing_mode: RoutingMode::Hard,
    };
    let weights = LossWeights {
        lambda_cs: 0.5,
        lambda_rm: 0.1,
        rho: 0.1,
        gamma: 0.9,
        c_sim: 2,
    };
    let mut worst = 0.0f64;
    let mut params = 0;
    for seed in 0..20u64 {
        let data = generate_dataset(&SyntheticDatasetSpec {
            n_topics: 1,
            vocab: 4,
            seqs_per_topic: 10,
            seq_len: 6,
            concentration: 1.0,
            successor_prob: 0.5,
            background: 0.1,
            val_fraction: 0.2,
            seed,
        })
        .unwrap();
        let batch = &data.train[..3];
        let m = MoEModel::init(cfg.clone(), &mut stream(seed, "fd-model")).unwrap();
        params = m.num_params();
        let base_model = MoEModel::init(cfg.clone(), &mut stream(seed, "fd-base")).unwrap();
        let base = routing_traces(&base_model, batch).unwrap();
        let (_, rep) = backward(&m, batch, Some(&base), &weights, GradMode::SoftRoute, &GradMask::all()).unwrap();
        let mut probe = m.clone();
        let num = finite_difference_grad(
            |x| {
                unflatten(&mut probe, x).unwrap();
                evaluate_objective(&probe, batch, Some(&base), &weights).unwrap()
            },
            &flatten(&m),
            1e-5,
        )
        .unwrap();
        worst = worst.max(max_relative_error(&flatten(&rep.grads), &num, 1e-6));
    }
    outcome(
        worst <= 1e-4 && params <= 500,
        format!("max relative error {worst:.2e} over 20 seeds, {params} parameters"),
    )
}

struct TrainedRun {
    tx: f64,
    val_nll: f64,
}

fn last_metrics(out: &moe_locality::train::TrainOutcome) -> TrainedRun {
    let m = out.history.last().expect("at least one epoch");
    TrainedRun {
        tx: m.transfers_per_layer,
        val_nll: m.val_nll,
    }
}

fn with_weights(cfg: &TrainConfig, lambda_cs: f64, lambda_rm: f64) -> TrainConfig {
    TrainConfig {
        weights: LossWeights {
            lambda_cs,
            lambda_rm,
            ..cfg.weights.clone()
        },
        ..cfg.clone()
    }
}

#[test]
fn acceptance() {
    let mut results: Vec<(usize, Outcome)> = vec![
        (1, criterion_1()),
        (2, criterion_2()),
        (3, criterion_3()),
        (4, criterion_4()),
        (5, criterion_5()),
    ];

    // Criteria 6 to 9 share one pretrained base and its fine-tuned runs.
    let cfg = ExperimentConfig::desk(7);
    let start = Instant::now();
    let data = generate_dataset(&cfg.data).unwrap();
    let (base, _) = base_model(&cfg, &data, None).unwrap();
    let control = train(&base, &data, &with_weights(&cfg.train, 0.0, 0.0)).unwrap();
    let tuned = train(&base, &data, &cfg.train).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let (c, t) = (last_metrics(&control), last_metrics(&tuned));
    let ratio = c.tx / t.tx;
    let degradation = (t.val_nll - c.val_nll) / c.val_nll;
    results.push((
        6,
        outcome(
            ratio >= 2.0 && degradation <= 0.10 && secs < 600.0 && tuned.diverged.is_none(),
            format!(
                "transfers/layer {:.3} -> {:.3} ({ratio:.2}x), val NLL {:.4} -> {:.4} ({:+.1}%), {secs:.0}s",
                c.tx,
                t.tx,
                c.val_nll,
                t.val_nll,
                100.0 * degradation
            ),
        ),
    ));

    let lambdas = [0.0, 0.05, 0.5, 5.0];
    let rm = cfg.train.weights.lambda_rm;
    let runs: Vec<TrainedRun> = lambdas
        .iter()
        .map(|&l| {
            if l == cfg.train.weights.lambda_cs {
                last_metrics(&tuned)
            } else {
                last_metrics(&train(&base, &data, &with_weights(&cfg.train, l, rm)).unwrap())
            }
        })
        .collect();
    let inversions: Vec<f64> = runs
        .windows(2)
        .filter(|w| w[1].tx > w[0].tx)
        .map(|w| w[1].tx / w[0].tx - 1.0)
        .collect();
    let trend_ok = inversions.len() <= 1 && inversions.iter().all(|&r| r <= 0.05);
    let worst_nll = runs.iter().map(|r| r.val_nll).fold(f64::NEG_INFINITY, f64::max);
    let last_worst = runs[3].val_nll == worst_nll;
    results.push((
        7,
        outcome(
            trend_ok && last_worst,
            format!(
                "λ_cs {:?}: transfers {:?}, val NLL {:?}",
                lambdas,
                runs.iter().map(|r| format!("{:.2}", r.tx)).collect::<Vec<_>>(),
                runs.iter().map(|r| format!("{:.4}", r.val_nll)).collect::<Vec<_>>()
            ),
        ),
    ));

    let ctx = SimContext::build(&tuned.model, &data, &cfg).unwrap();
    let sim = &cfg.simulation;
    let random = ctx.evaluate(sim.policy, sim.capacity, PrefetchMode::Random).unwrap();
    let predicted = ctx.evaluate(sim.policy, sim.capacity, PrefetchMode::Predictor).unwrap();
    let topics: std::collections::BTreeSet<usize> = ctx.prompts.iter().map(|p| p.1).collect();
    let gain = predicted.summary.hit_rate - random.summary.hit_rate;
    let slower = predicted
        .decodes
        .iter()
        .zip(&random.decodes)
        .filter(|(p, r)| p.report.estimated_seconds > r.report.estimated_seconds)
        .count();
    results.push((
        8,
        outcome(
            ctx.prompts.len() == 50 && topics.len() == 2 && gain >= 0.05 && slower == 0,
            format!(
                "{} prompts over {} topics, {} C={}: hit rate random {:.3}, predictor {:.3} ({:+.1} pp); predictor slower on {slower} prompts",
                ctx.prompts.len(),
                topics.len(),
                sim.policy,
                sim.capacity,
                random.summary.hit_rate,
                predicted.summary.hit_rate,
                100.0 * gain
            ),
        ),
    ));

    let none = ctx.evaluate(sim.policy, sim.capacity, PrefetchMode::None).unwrap();
    let (mut decodes, mut mismatches) = (0, 0);
    for ev in [&random, &predicted, &none] {
        for d in &ev.decodes {
            let init = d.plan.as_ref().map_or(CacheInit::Uniform, |p| p.to_init());
            let replay = run_eviction_policy(&d.trace, ev.policy, ev.capacity, &init).unwrap();
            decodes += 1;
            if replay.per_layer != d.report.misses_per_layer {
                mismatches += 1;
            }
        }
    }
    results.push((
        9,
        outcome(
            mismatches == 0 && decodes > 0,
            format!("{mismatches} mismatches over {decodes} replayed decodes"),
        ),
    ));

    let mut failed = Vec::new();
    for (id, o) in &results {
        println!(
            "criterion {id}: {} - {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.pass {
            failed.push(*id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
