use moe_offload::cost::{speculation_cost, token_latency, CostParams};
use moe_offload::metrics::{cache_metrics, expert_histograms, speculation_metrics};
use moe_offload::policy::{warm_state, PolicyKind};
use moe_offload::sim::{event_log_to_string, read_event_log, simulate, SimConfig};
use moe_offload::trace::{read_trace, trace_to_string, ActivationTrace, ModelShape, Trace};
use moe_offload::tracegen::{gen_markov, gen_zipf, random_set, random_speculation_trace, MarkovParams, ZipfParams};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn shape_strategy(max_layers: usize, max_experts: usize) -> impl Strategy<Value = ModelShape> {
    (1..=max_layers, 1..=max_experts)
        .prop_flat_map(|(l, e)| (Just(l), Just(e), 1..=e))
        .prop_map(|(l, e, k)| ModelShape::new(l, e, k).unwrap())
}

fn random_trace(shape: ModelShape, tokens: usize, seed: u64) -> ActivationTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sets = (0..tokens)
        .map(|_| {
            (0..shape.num_layers)
                .map(|_| random_set(shape.num_experts, shape.top_k, &mut rng))
                .collect()
        })
        .collect();
    ActivationTrace::from_sets(shape, sets).unwrap()
}

fn policy_strategy() -> impl Strategy<Value = PolicyKind> {
    prop_oneof![
        Just(PolicyKind::Lru),
        Just(PolicyKind::Lfu),
        (0.05f64..=1.0, 1u64..8).prop_map(|(f, p)| PolicyKind::LfuAged { decay_factor: f, decay_period: p }),
        Just(PolicyKind::Opt),
    ]
}

/// A trace plus a cache size no smaller than top_k.
fn sim_case() -> impl Strategy<Value = (ActivationTrace, usize)> {
    (shape_strategy(3, 10), 0usize..30, any::<u64>())
        .prop_flat_map(|(s, t, seed)| (Just(random_trace(s, t, seed)), s.top_k..=s.num_experts))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn activation_round_trip(shape in shape_strategy(4, 12), tokens in 0usize..15, seed: u64) {
        let t: Trace = random_trace(shape, tokens, seed).into();
        let text = trace_to_string(&t);
        let back = read_trace(text.as_bytes()).unwrap();
        prop_assert_eq!(&back, &t);
        prop_assert_eq!(trace_to_string(&back), text);
    }

    #[test]
    fn speculation_round_trip(shape in shape_strategy(4, 12), tokens in 0usize..15, seed: u64) {
        let t: Trace = random_speculation_trace(shape, tokens, seed).unwrap().into();
        let text = trace_to_string(&t);
        prop_assert_eq!(read_trace(text.as_bytes()).unwrap(), t);
    }

    #[test]
    fn step_invariants((trace, c) in sim_case(), policy in policy_strategy()) {
        let log = simulate(&trace, &SimConfig::new(policy, c)).unwrap();
        for step in log.steps() {
            let o = &step.outcome;
            let a = trace.get(step.token, step.layer).unwrap();
            prop_assert_eq!(&o.activated(), a);
            prop_assert!(o.resident_after.len() <= c);
            prop_assert_eq!(o.hits.len() + o.misses.len(), trace.shape().top_k);
            prop_assert!(a.iter().all(|e| o.resident_after.contains(e)));
            prop_assert_eq!(o.evicted.intersection_len(a), 0);
            let expect = o.resident_before.difference(&o.evicted).union(&o.misses);
            prop_assert_eq!(&o.resident_after, &expect);
        }
    }

    #[test]
    fn precision_recall_share_hits((trace, c) in sim_case(), policy in policy_strategy()) {
        let m = cache_metrics(&simulate(&trace, &SimConfig::new(policy, c)).unwrap());
        let t = m.totals;
        prop_assert_eq!(t.hits, m.total_hits);
        if let (Some(p), Some(r)) = (m.precision.value(), m.recall.value()) {
            let hits = t.hits as f64;
            prop_assert!((p * t.cached as f64 - hits).abs() <= 1e-9 * hits.max(1.0));
            prop_assert!((r * t.activated as f64 - hits).abs() <= 1e-9 * hits.max(1.0));
        }
        let full = m.full_cache;
        if full.counts.steps > 0 && full.counts.hits > 0 {
            let ratio = full.recall.value().unwrap() / full.precision.value().unwrap();
            let expect = c as f64 / trace.shape().top_k as f64;
            prop_assert!((ratio - expect).abs() <= 1e-12 * expect);
        }
    }

    #[test]
    fn opt_dominates((trace, c) in sim_case()) {
        let hits = |p| cache_metrics(&simulate(&trace, &SimConfig::new(p, c)).unwrap()).total_hits;
        let opt = hits(PolicyKind::Opt);
        prop_assert!(opt >= hits(PolicyKind::Lru));
        prop_assert!(opt >= hits(PolicyKind::Lfu));
        prop_assert!(opt >= hits(PolicyKind::lfu_aged_default()));
    }

    #[test]
    fn event_log_round_trip((trace, c) in sim_case(), policy in policy_strategy(), warmup in 0usize..5) {
        let log = simulate(&trace, &SimConfig::new(policy, c).with_warmup(warmup)).unwrap();
        let text = event_log_to_string(&log);
        let back = read_event_log(text.as_bytes()).unwrap();
        prop_assert_eq!(event_log_to_string(&back), text);
        prop_assert_eq!(cache_metrics(&back), cache_metrics(&log));
    }

    #[test]
    fn lfu_counts_never_decrease(shape in shape_strategy(1, 8), tokens in 1usize..30, seed: u64) {
        let trace = random_trace(shape, tokens, seed);
        let mut state = warm_state(PolicyKind::Lfu, shape.num_experts).unwrap();
        let mut before = vec![0.0; shape.num_experts];
        for s in trace.layer_sets(0) {
            state.step(PolicyKind::Lfu, s, None).unwrap();
            for (e, b) in before.iter_mut().enumerate() {
                let f = state.freq(e.into());
                prop_assert!(f >= *b);
                *b = f;
            }
        }
    }

    #[test]
    fn speculation_fp_equals_fn(shape in shape_strategy(5, 12), tokens in 0usize..20, seed: u64) {
        let t = random_speculation_trace(shape, tokens, seed).unwrap();
        let m = speculation_metrics(&t);
        prop_assert_eq!(m.counts.fp, m.counts.fn_);
        prop_assert_eq!(m.precision, m.recall);
        let cost = speculation_cost(&t, &CostParams { expert_bytes: 1.0, ..CostParams::default() }).unwrap();
        let k = shape.top_k as u64;
        prop_assert_eq!(cost.transferred_experts - k * cost.records, m.counts.fn_);
        prop_assert_eq!(cost.wasted_experts, m.counts.fn_);
    }

    #[test]
    fn histogram_mass(shape in shape_strategy(4, 12), tokens in 0usize..40, seed: u64) {
        let trace = random_trace(shape, tokens, seed);
        for h in expert_histograms(&trace) {
            prop_assert_eq!(h.counts.iter().sum::<u64>(), (shape.top_k * tokens) as u64);
            prop_assert!((0.0..1.0).contains(&h.gini));
        }
    }

    #[test]
    fn generators_are_valid_and_seeded(shape in shape_strategy(3, 10), tokens in 0usize..30, s in 0.0f64..3.0, p in 0.0f64..=1.0, seed: u64) {
        let base = ZipfParams::new(shape, tokens, s, seed);
        let z = gen_zipf(&base).unwrap();
        prop_assert_eq!(z.num_tokens(), tokens);
        prop_assert_eq!(&z, &gen_zipf(&base).unwrap());
        let m = MarkovParams { base, repeat_prob: p };
        let mk = gen_markov(&m).unwrap();
        prop_assert_eq!(mk.records().len(), tokens * shape.num_layers);
        prop_assert_eq!(&mk, &gen_markov(&m).unwrap());
    }

    #[test]
    fn latency_grows_with_misses(misses in proptest::collection::vec(0u64..5, 1..8), at in 0usize..8, overlap in 0.0f64..0.99) {
        let params = CostParams { overlap, ..CostParams::default() };
        let base = token_latency(&params, &misses);
        let mut more = misses.clone();
        let i = at % more.len();
        more[i] += 1;
        prop_assert!(token_latency(&params, &more) > base);
        let hidden = CostParams { overlap: 1.0, ..CostParams::default() };
        prop_assert_eq!(token_latency(&hidden, &more), token_latency(&hidden, &misses));
    }
}
