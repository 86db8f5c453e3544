#![allow(clippy::excessive_precision)]

mod common;

use musicform_core::backend::{BackendInfo, ConditionId, LogitsStep, TokenModel, ToyBackend};
use musicform_core::pattern::TokenGrid;
use musicform_core::sampler::{
    blend, decay_weight, generate_segment, sample_step, softmax_with, transition_weights, DecaySchedule, Distributions,
    SamplerConfig, StepConditions, TransitionWindow, WeightedCondition,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const LOGITS: [[f64; 6]; 3] = [
    [0.3, -1.2, 2.5, 0.0, 1.7, -0.4],
    [10.0, 9.5, -3.0, 9.999, 0.0, 4.2],
    [-700.0, -701.5, -699.25, -702.0, -705.0, -698.0],
];

// 40-digit reference values, rounded to 20.
const SOFTMAX_T1: [[f64; 6]; 3] = [
    [0.064346970598647506536, 0.014357749854742524552, 0.58073227830048423057, 0.047669408265148860213, 0.26093983303819061029, 0.031953759942786267843],
    [0.3833464526330820739, 0.23251137681404105045, 8.6648925994842523567e-7, 0.38296329778980041475, 0.000017403902024239652229, 0.0011606023717922728335],
    [0.091985661776794061796, 0.020524775443615359337, 0.19473364750960090209, 0.012448905590269682235, 0.00061979451372784030396, 0.67968721516599215424],
];
const SOFTMAX_T07_TOP3: [[f64; 6]; 3] = [
    [0.031686653575461154761, 0.0, 0.73417888556807488657, 0.0, 0.23413446085646395867, 0.0],
    [0.40191082746739470748, 0.19675209347229665595, 0.0, 0.40133707906030863657, 0.0, 0.0],
    [0.046879566287770037335, 0.0, 0.13686711137416116063, 0.0, 0.0, 0.81625332233806880204],
];

#[test]
fn softmax_matches_high_precision_reference() {
    let logits = LogitsStep::from_rows(LOGITS.iter().map(|r| r.to_vec()).collect()).unwrap();
    for (t, k, expected) in [(1.0, None, SOFTMAX_T1), (0.7, Some(3), SOFTMAX_T07_TOP3)] {
        let d = softmax_with(&logits, t, k).unwrap();
        for (j, row) in expected.iter().enumerate() {
            for (got, want) in d.row(j).iter().zip(row) {
                assert!((got - want).abs() <= 1e-15 + 1e-13 * want, "{got} vs {want}");
            }
        }
    }
}

#[test]
fn duplicate_conditions_split_weight_stably() {
    let u = Distributions::from_rows(&[vec![0.2, 0.3, 0.5]]);
    let p = Distributions::from_rows(&[vec![0.7, 0.1, 0.2]]);
    let whole = blend(&u, &[(&p, 1.0)], 0.85).unwrap();
    let split = blend(&u, &[(&p, 0.3), (&p, 0.7)], 0.85).unwrap();
    for (a, b) in whole.probs.iter().zip(&split.probs) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn schedule_constants() {
    let w = TransitionWindow { start_step: 0, length_steps: 375 };
    assert_eq!(transition_weights(0, &w), (1.0, 0.0));
    assert_eq!(transition_weights(374, &w), (0.0, 1.0));
    let d = DecaySchedule { length_steps: 750 };
    assert_eq!(decay_weight(0, &d), 1.0);
    assert_eq!(decay_weight(749, &d), 0.0);
    assert_eq!(decay_weight(10_000, &d), 0.0);
}

fn blended_three_outcomes() -> Distributions {
    let u = Distributions::from_rows(&[vec![0.5, 0.3, 0.2]]);
    let a = Distributions::from_rows(&[vec![0.1, 0.6, 0.3]]);
    let b = Distributions::from_rows(&[vec![0.2, 0.2, 0.6]]);
    blend(&u, &[(&a, 0.25), (&b, 0.75)], 0.85).unwrap()
}

#[test]
fn draws_follow_blended_distribution() {
    let q = blended_three_outcomes();
    // (1 − 0.85)·u + 0.85·(0.25·a + 0.75·b)
    let expected = [0.15 * 0.5 + 0.85 * 0.175, 0.15 * 0.3 + 0.85 * 0.3, 0.15 * 0.2 + 0.85 * 0.525];
    for (got, want) in q.row(0).iter().zip(expected) {
        assert!((got - want).abs() < 1e-15);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = 100_000;
    let mut counts = [0f64; 3];
    for _ in 0..n {
        counts[sample_step(&q, &mut rng)[0] as usize] += 1.0;
    }
    let chi2: f64 = counts
        .iter()
        .zip(expected)
        .map(|(o, p)| (o - p * n as f64).powi(2) / (p * n as f64))
        .sum();
    let p = 1.0 - ChiSquared::new(2.0).unwrap().cdf(chi2);
    assert!(p > 0.001, "chi2 {chi2}, p {p}");
}

/// The segment loop restated step by step from public building blocks.
fn reference_segment(
    backend: &dyn TokenModel,
    schedule: &[StepConditions],
    ctx0: &TokenGrid,
    config: &SamplerConfig,
) -> TokenGrid {
    let info: &BackendInfo = backend.info();
    let window = info.context_window.min(info.max_context.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = TokenGrid::new(info.codebooks);
    for step in schedule {
        let ctx_for = |c: &ConditionId| {
            let mut full = match &c.prefix {
                Some(p) => (**p).clone(),
                None => ctx0.clone(),
            };
            full.extend_from(&out);
            let start = full.steps().saturating_sub(window);
            full.slice(start, full.steps())
        };
        let dist = |c: &ConditionId| {
            softmax_with(&backend.next_logits(&ctx_for(c), c).unwrap(), config.temperature, config.top_k).unwrap()
        };
        let u = dist(&step.uncond);
        let conds: Vec<(Distributions, f64)> = step.weighted.iter().map(|w| (dist(&w.condition), w.weight)).collect();
        let refs: Vec<(&Distributions, f64)> = conds.iter().map(|(d, w)| (d, *w)).collect();
        let q = blend(&u, &refs, config.guidance).unwrap();
        out.push_row(&sample_step(&q, &mut rng)).unwrap();
    }
    out
}

#[test]
fn segment_matches_reference_loop() {
    let backend = ToyBackend::default();
    let a = ConditionId::text("driving drums");
    let b = ConditionId::text("soft pads");
    let prefix = std::sync::Arc::new(TokenGrid::from_flat(4, (0..40).map(|i| i % 64).collect()).unwrap());
    let prompted = ConditionId::audio_prefix(&b, prefix);
    let schedule: Vec<StepConditions> = (0..120)
        .map(|s| {
            let w = transition_weights(s, &TransitionWindow { start_step: 0, length_steps: 60 });
            let wa = decay_weight(s, &DecaySchedule { length_steps: 90 });
            let mut weighted = vec![
                WeightedCondition { condition: a.clone(), weight: w.0 },
                WeightedCondition { condition: prompted.clone(), weight: w.1 * wa },
                WeightedCondition { condition: b.clone(), weight: w.1 * (1.0 - wa) },
            ];
            weighted.retain(|c| c.weight > 0.0);
            let total: f64 = weighted.iter().map(|c| c.weight).sum();
            weighted.iter_mut().for_each(|c| c.weight /= total);
            StepConditions { uncond: ConditionId::unconditional(), weighted }
        })
        .collect();
    let ctx0 = TokenGrid::from_flat(4, (0..20).map(|i| (i * 7) % 64).collect()).unwrap();
    let config = SamplerConfig { seed: 99, top_k: Some(20), ..SamplerConfig::default() };
    let got = generate_segment(&backend, &schedule, 120, &ctx0, &config).unwrap();
    assert_eq!(got, reference_segment(&backend, &schedule, &ctx0, &config));
}
