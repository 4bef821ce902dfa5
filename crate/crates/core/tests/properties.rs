use mdlab::corpus::Example;
use mdlab::decoding::{
    apply_conv, apply_eos_fill, apply_rep_penalty, apply_topk_glob, decode, total_mass, BaseSampler, ConvConfig,
    DecodePolicy, Prompts,
};
use mdlab::denoiser::{DenoiserParams, FixedDenoiser};
use mdlab::hazard::{q_value, ConvMode, HazardFamily, Q_conv, Q_default, Q_semi_ar};
use mdlab::metrics::{inlier_rate, validate_trace, PplEntry};
use mdlab::r2ft::{
    corrupt, grad_r2ft, penalty_s, r2ft_objective, reject_grad_display, CorruptionConfig, PreferencePair,
};
use mdlab::rng::rng_from_seed;
use mdlab::schedule::NoiseSchedule;
use mdlab::state::{forward_mask, ProbGrid, SequenceState, Slot};
use mdlab::vocab::{TokenId, VocabSpec};
use proptest::prelude::*;
use rand::Rng;

fn grid_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<bool>)> {
    (1usize..12, 2usize..9).prop_flat_map(|(rows, cols)| {
        (
            prop::collection::vec(prop::collection::vec(0.0f64..1.0, cols), rows),
            prop::collection::vec(any::<bool>(), rows),
        )
    })
}

fn normalized(rows: &[Vec<f64>]) -> ProbGrid {
    let rows: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let s: f64 = r.iter().sum::<f64>() + 1e-3;
            r.iter().map(|x| (x + 1e-3 / r.len() as f64) / s).collect()
        })
        .collect();
    ProbGrid::from_rows(&rows).unwrap()
}

proptest! {
    #[test]
    fn topk_preserves_total_mass((rows, _) in grid_strategy(), k in 1usize..9) {
        let g = normalized(&rows);
        let idx: Vec<usize> = (0..g.rows()).collect();
        let out = apply_topk_glob(&g, &idx, k);
        let (a, b) = (total_mass(&g, &idx), total_mass(&out, &idx));
        prop_assert!((a - b).abs() <= 1e-9 * a);
        for &i in &idx {
            prop_assert!(out.row(i).iter().filter(|&&x| x > 0.0).count() <= k.max(1));
        }
    }

    #[test]
    fn conv_preserves_total_mass((rows, mask) in grid_strategy(), kernel in 1usize..5, scale in 0.1f64..3.0) {
        let g = normalized(&rows);
        let mut slots: Vec<Slot> = mask.iter().map(|&m| if m { Slot::Masked } else { Slot::Token(0) }).collect();
        slots[0] = Slot::Token(0);
        let state = SequenceState::from_parts(slots, vec![]).unwrap();
        let active = state.masked_positions();
        let cfg = ConvConfig { scale, ..ConvConfig::new(2 * kernel) };
        let out = apply_conv(&g, &state, &active, &cfg);
        let (a, b) = (total_mass(&g, &active), total_mass(&out, &active));
        let blocked = active.iter().all(|&i| mdlab::decoding::neighbour_count(&state, i, kernel) == 0);
        if !blocked {
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1e-300));
        }
    }

    #[test]
    fn penalty_preserves_row_mass((rows, flags) in grid_strategy(), rho in 0.01f64..0.99) {
        let g = normalized(&rows);
        let idx: Vec<usize> = (0..g.rows()).collect();
        let ctx: Vec<bool> = (0..g.cols()).map(|j| flags.get(j).copied().unwrap_or(false)).collect();
        let out = apply_rep_penalty(&g, &idx, &ctx, rho);
        for &i in &idx {
            prop_assert!((out.row_sum(i) - g.row_sum(i)).abs() < 1e-12);
        }
    }

    #[test]
    fn swapped_reject_terms_are_at_least_two_ln2(
        lw in -30.0f64..-0.01, nw in 1usize..20, ll in -30.0f64..-0.01, nl in 1usize..20, beta in 0.1f64..3.0
    ) {
        let a = r2ft_objective(lw, nw, ll, nl, 0.0, beta);
        let b = r2ft_objective(ll, nl, lw, nw, 0.0, beta);
        prop_assert!(a + b >= 2.0 * std::f64::consts::LN_2 - 1e-12);
        let equal = r2ft_objective(lw, nw, lw * nl as f64 / nw as f64, nl, 0.0, beta)
            + r2ft_objective(lw * nl as f64 / nw as f64, nl, lw, nw, 0.0, beta);
        prop_assert!((equal - 2.0 * std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn corruption_shape(seed in any::<u64>(), lq in 1usize..6, la in 0usize..30, eos in any::<bool>()) {
        let vocab = VocabSpec::new(40).unwrap();
        let ex = Example { prompt: (0..lq as TokenId).collect(), response: (10..10 + la as TokenId).collect() };
        let cfg = CorruptionConfig { eos_insert: eos, ..CorruptionConfig::default() };
        let len = 100;
        let c = corrupt(&ex, &vocab, len, &cfg, &mut rng_from_seed(seed)).unwrap();
        prop_assert_eq!(c.tokens.len(), len);
        prop_assert!(c.tokens[c.c + c.z..].iter().all(|&t| t == vocab.pad()));
        prop_assert!(c.tokens[..c.c + c.z].iter().all(|&t| t != vocab.pad()));
        prop_assert_eq!(c.span().len(), c.z);
        prop_assert!(c.g <= c.c && c.c >= lq && c.c <= lq + la);
    }

    #[test]
    fn inlier_rate_is_affine_invariant(
        ppls in prop::collection::vec(1.0f64..50.0, 1..30), mu in 1.0f64..50.0, sigma in 0.0f64..10.0,
        a in 0.1f64..10.0, b in -5.0f64..5.0
    ) {
        let entries: Vec<PplEntry> = ppls.iter().map(|&p| PplEntry { ppl: p, zero_len: false }).collect();
        let moved: Vec<PplEntry> = ppls.iter().map(|&p| PplEntry { ppl: a * p + b, zero_len: false }).collect();
        let r1 = inlier_rate(&entries, mu, sigma).unwrap();
        let r2 = inlier_rate(&moved, a * mu + b, a * sigma).unwrap();
        // boundary points may flip under rounding; allow one entry of slack
        prop_assert!((r1 - r2).abs() <= 1.0 / ppls.len() as f64 + 1e-12);
    }

    #[test]
    fn forward_mask_spares_prompt(seed in any::<u64>(), t in 0.01f64..1.0) {
        let toks: Vec<TokenId> = (0..20).map(|i| i % 5).collect();
        let x0 = SequenceState::from_tokens(&toks, 4).unwrap();
        let s = NoiseSchedule::linear(8).unwrap();
        let xt = forward_mask(&x0, &s, t, &mut rng_from_seed(seed)).unwrap();
        for i in 0..20 {
            if i < 4 {
                prop_assert_eq!(xt.slot(i), x0.slot(i));
            } else if let Slot::Token(tok) = xt.slot(i) {
                prop_assert_eq!(Some(tok), x0.slot(i).token());
            }
        }
    }

    #[test]
    fn eos_fill_never_touches_committed(seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let slots: Vec<Slot> = (0..24)
            .map(|_| if rng.gen_bool(0.5) { Slot::Masked } else { Slot::Token(rng.gen_range(0..4)) })
            .collect();
        let mut s = SequenceState::from_parts(slots.clone(), vec![]).unwrap();
        let filled = apply_eos_fill(&mut s, 3);
        for (i, old) in slots.iter().enumerate() {
            if let Slot::Token(t) = old {
                prop_assert_eq!(s.slot(i), Slot::Token(*t));
            }
        }
        if let Some(first) = s.slots().iter().position(|x| *x == Slot::Token(3)) {
            prop_assert!((first + 1..24).all(|i| !s.is_masked(i)));
            prop_assert!(filled.iter().all(|&i| i > first));
        } else {
            prop_assert!(filled.is_empty());
        }
    }
}

#[test]
fn penalty_is_monotone_on_a_grid() {
    let vals: Vec<f64> = (0..10).map(|k| -0.5 - k as f64).collect();
    for &w in &vals {
        for &l in &vals {
            let s = penalty_s(w, 1, l, 1, 1.0);
            assert!(s > 0.0 && s < 1.0);
            assert!(penalty_s(w, 1, l + 0.25, 1, 1.0) > s);
            assert!(penalty_s(w + 0.25, 1, l, 1, 1.0) < s);
        }
    }
}

#[test]
fn reject_gradient_ascends_the_margin() {
    for seed in 0..20 {
        let mut rng = rng_from_seed(seed);
        let params = DenoiserParams::random(6, 3, 1.0, &mut rng).unwrap();
        let toks =
            |rng: &mut rand_chacha::ChaCha8Rng, n| -> Vec<TokenId> { (0..n).map(|_| rng.gen_range(0..6)).collect() };
        let prefix = toks(&mut rng, 2);
        let yw = toks(&mut rng, 3);
        let mut yl = toks(&mut rng, 4);
        if yl[..3] == yw[..] {
            yl[0] = (yl[0] + 1) % 6;
        }
        let pair = PreferencePair::new(&prefix, &yw, &yl).unwrap();
        let (_, g) = grad_r2ft(&params, &pair, 0.0, 1.0).unwrap();
        // the margin's own gradient is the display divided by -beta * s
        let d = reject_grad_display(&params, &pair, 1.0).unwrap();
        assert!(g.max_abs_diff(&d) < 1e-10);
        assert!(g.norm() > 0.0);
        // a small step against the gradient raises the margin
        let margin = |p: &DenoiserParams| {
            let lw = mdlab::r2ft::seq_logprob(p, &pair.context, &pair.y_w).unwrap().logp / 3.0;
            let ll = mdlab::r2ft::seq_logprob(p, &pair.context, &pair.y_l).unwrap().logp / 4.0;
            lw - ll
        };
        let mut q = params.clone();
        q.apply(&g, 1e-4);
        assert!(margin(&q) > margin(&params), "seed {seed}");
    }
}

#[test]
fn hazard_monotonicity() {
    let f = HazardFamily::ratio(0.2, 0.9).unwrap();
    // Q_default falls as S grows
    let l = 128;
    let mut prev = f64::INFINITY;
    for s in [1, 2, 4, 8, 16, 32, 64, 128] {
        let q = Q_default(l, s, &f).unwrap();
        assert!(q <= prev + 1e-15);
        prev = q;
    }
    // Q_semi_ar rises toward Q_default as blocks grow (fewer blocks)
    let s = 32;
    let mut prev = f64::NEG_INFINITY;
    for b in [32, 16, 8, 4, 2, 1] {
        let q = Q_semi_ar(l, s, b, &f).unwrap();
        assert!(q >= prev - 1e-15, "b = {b}");
        prev = q;
    }
    assert_eq!(prev, Q_default(l, s, &f).unwrap());
    // Q_conv rises toward Q_default as the kernel grows
    let mut prev = f64::NEG_INFINITY;
    for k in [4, 8, 16, 32, 64, 128] {
        let q = Q_conv(l, s, k, &f, ConvMode::PerStep).unwrap();
        assert!(q >= prev - 1e-15, "K = {k}");
        prev = q;
    }
    assert_eq!(prev, Q_default(l, s, &f).unwrap());
    assert!(q_value(&f, 4.0, 1e12).unwrap() > q_value(&f, 4.0, 10.0).unwrap());
}

#[test]
fn caching_and_eos_fill_never_add_calls() {
    let d = FixedDenoiser {
        row: vec![0.3, 0.3, 0.25, 0.15],
    };
    for seed in 0..30 {
        let run = |p: &DecodePolicy| {
            let (_, t) = decode(&d, &Prompts::left(&[0]), p, 64, 32, &mut rng_from_seed(seed)).unwrap();
            t.denoiser_calls()
        };
        let base = DecodePolicy::categorical();
        let plain = run(&base);
        assert!(run(&base.clone().with_cache(true)) <= plain);
        assert!(run(&base.clone().with_eos_fill(true)) <= plain);
        assert!(run(&base.clone().with_eos_fill(true).with_cache(true)) <= run(&base.clone().with_eos_fill(true)));
    }
}

#[test]
fn decoded_traces_replay_and_validate() {
    let d = FixedDenoiser {
        row: vec![0.35, 0.3, 0.2, 0.15],
    };
    let policies = [
        DecodePolicy::categorical(),
        DecodePolicy::categorical().with_semi_ar(4).with_eos_fill(true),
        DecodePolicy::categorical().with_conv(ConvConfig::new(6)),
        DecodePolicy::categorical()
            .with_base(BaseSampler::TopKGlob { k: 2 })
            .with_rep_penalty(0.5),
        DecodePolicy::categorical()
            .with_base(BaseSampler::Llada)
            .with_conv(ConvConfig::new(4)),
    ];
    for pol in &policies {
        for seed in 0..20 {
            let (state, trace) = decode(&d, &Prompts::left(&[1, 2]), pol, 48, 16, &mut rng_from_seed(seed)).unwrap();
            let init = SequenceState::with_prompts(&[1, 2], &[], 48).unwrap();
            assert_eq!(trace.replay(&init).unwrap().slots(), state.slots());
            let mut csv = Vec::new();
            trace.write_csv(&mut csv).unwrap();
            let back = mdlab::decoding::TraceLog::read_csv(&csv[..], &init).unwrap();
            assert_eq!(back.events, trace.events);
            assert_eq!(back.calls, trace.calls);
            let v = validate_trace(pol, &trace, &init, 16, 3);
            assert!(v.is_empty(), "{pol:?} seed {seed}: {v:?}");
        }
    }
}
