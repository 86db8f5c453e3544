//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{brute_nearest, expand, sample_form, sq_dist, welch_cases, OURS, POND5, VANILLA};
use musicform_core::exec::Strategy;
use musicform_core::optimizer::{
    BackendEngine, Optimizer, OptimizerConfig, OptimizerState, Phase, ScriptedLlm, SimulatedRater,
};
use musicform_core::orchestrator::{plan_piece, render_piece, OrchestratorConfig};
use musicform_core::pattern::{apply_pattern, invert_pattern, Pattern, TokenGrid};
use musicform_core::rvq::{synthetic_frames, train_codebooks, train_preset, CodecPreset, TrainConfig};
use musicform_core::sampler::{
    blend, decay_weight, sample_step, transition_weights, DecaySchedule, Distributions, TransitionWindow,
};
use musicform_core::stats::{compare_groups, qualify_rater, GroupSummary, MosReport, QualificationKind, RatingContext, RatingRecord};
use musicform_core::ToyBackend;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

struct Criterion {
    name: &'static str,
    limit: Option<Duration>,
    check: fn(),
}

fn rvq_oracle() {
    let codec = train_preset(CodecPreset::Toy, 11, Strategy::default()).unwrap();
    assert_eq!((codec.dim(), codec.num_codebooks(), codec.codebook_size()), (8, 4, 64));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let frame: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let tokens = codec.encode_frame(&frame).unwrap();
        let mut residual = frame.clone();
        for (stage, &t) in tokens.iter().enumerate() {
            let (best, _) = brute_nearest(codec.codebook(stage), 8, &residual);
            assert_eq!(t as usize, best, "stage {stage}");
            for (r, e) in residual.iter_mut().zip(codec.entry(stage, best)) {
                *r -= e;
            }
        }
        let errors: Vec<f64> = (1..=4)
            .map(|k| sq_dist(&frame, &codec.decode_tokens(&tokens[..k]).unwrap()))
            .collect();
        assert!(errors.windows(2).all(|w| w[1] <= w[0]), "{errors:?}");
    }
}

fn kmeans() {
    let frames = synthetic_frames(5000, 8, 21);
    let mut config = TrainConfig::new(4, 64, 4);
    config.record_history = true;
    let (codec, report) = train_codebooks(&frames, &config).unwrap();
    let mut residuals = frames;
    for (stage, rep) in report.stages.iter().enumerate() {
        for (err, centroids) in rep.errors.iter().zip(&rep.history) {
            let brute = residuals.iter().map(|x| brute_nearest(centroids, 8, x).1).sum::<f64>() / residuals.len() as f64;
            assert!((brute - err).abs() <= 1e-12 * brute.max(1.0));
        }
        assert!(rep.errors.windows(2).all(|w| w[1] <= w[0]), "stage {stage}");
        for x in &mut residuals {
            let (best, _) = brute_nearest(codec.codebook(stage), 8, x);
            for (r, e) in x.iter_mut().zip(codec.entry(stage, best)) {
                *r -= e;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let own: Vec<Vec<f64>> = (0..64).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let (_, report) = train_codebooks(&own, &TrainConfig::new(1, 64, 0)).unwrap();
    assert_eq!(*report.stages[0].errors.last().unwrap(), 0.0);
}

fn delay_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..500 {
        let t = rng.random_range(1..=64usize);
        let k = rng.random_range(1..=8usize);
        let grid = TokenGrid::from_flat(k, (0..t * k).map(|_| rng.random_range(0..1024)).collect()).unwrap();
        let seq = apply_pattern(&grid, Pattern::Delay);
        assert_eq!(seq.len(), t + k - 1);
        assert_eq!(invert_pattern(&seq, t, k).unwrap(), grid);
    }
}

fn random_dist(rng: &mut ChaCha8Rng, k: usize, v: usize) -> Distributions {
    let rows: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let raw: Vec<f64> = (0..v).map(|_| rng.random::<f64>().powi(3)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|x| x / s).collect()
        })
        .collect();
    Distributions::from_rows(&rows)
}

fn blend_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10_000 {
        let (k, v) = (rng.random_range(1..=4), rng.random_range(2..=16));
        let u = random_dist(&mut rng, k, v);
        let n = rng.random_range(1..=3);
        let conds: Vec<Distributions> = (0..n).map(|_| random_dist(&mut rng, k, v)).collect();
        let mut w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.01).collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
        let g = rng.random::<f64>();
        let refs: Vec<(&Distributions, f64)> = conds.iter().zip(&w).map(|(d, w)| (d, *w)).collect();
        let q = blend(&u, &refs, g).unwrap();
        for j in 0..k {
            let s: f64 = q.row(j).iter().sum();
            assert!((s - 1.0).abs() <= 1e-9);
            assert!(q.row(j).iter().all(|&p| p >= 0.0));
        }
        assert_eq!(blend(&u, &refs, 0.0).unwrap(), u);
        assert_eq!(blend(&u, &[(&conds[0], 1.0)], 1.0).unwrap(), conds[0]);
        let split = rng.random::<f64>();
        let mut dup = refs.clone();
        let (d0, w0) = dup[0];
        dup[0] = (d0, w0 * split);
        dup.push((d0, w0 * (1.0 - split)));
        let q2 = blend(&u, &dup, g).unwrap();
        assert!(q.probs.iter().zip(&q2.probs).all(|(a, b)| (a - b).abs() <= 1e-12));
    }
}

fn schedules() {
    let fr = musicform_core::FrameRate::default();
    let window = TransitionWindow {
        start_step: 1000,
        length_steps: fr.seconds_to_steps(5),
    };
    assert_eq!(window.length_steps, 375);
    assert_eq!(transition_weights(1000, &window), (1.0, 0.0));
    assert_eq!(transition_weights(1374, &window), (0.0, 1.0));
    let olds: Vec<f64> = (1000..1375)
        .map(|s| {
            let (o, n) = transition_weights(s, &window);
            assert_eq!(o + n, 1.0);
            o
        })
        .collect();
    assert!(olds.windows(3).all(|w| (w[2] - 2.0 * w[1] + w[0]).abs() <= 1e-12));
    let decay = DecaySchedule {
        length_steps: fr.seconds_to_steps(10),
    };
    assert_eq!(decay.length_steps, 750);
    assert_eq!(decay_weight(0, &decay), 1.0);
    assert_eq!(decay_weight(749, &decay), 0.0);
}

fn end_to_end() {
    let spec = sample_form();
    let mut config = OrchestratorConfig::default();
    config.sampler.seed = 1234;
    let plan = plan_piece(&spec, &config).unwrap();
    let backend = ToyBackend::default();
    let codec = train_preset(CodecPreset::Toy, 0, Strategy::default()).unwrap();
    let a = render_piece(&spec, &plan, &backend, &codec, Strategy::default()).unwrap();
    assert_eq!(a.grid.steps(), 11_250);
    let starts: Vec<u64> = a.manifest.part_ranges.iter().map(|r| r.start_step).collect();
    assert_eq!(starts, [0, 1875, 3750, 5250, 7500, 9375]);
    let variations: Vec<(u32, u64)> = a
        .manifest
        .plan
        .parts
        .iter()
        .filter_map(|p| p.variation.as_ref().map(|v| (v.referenced_part, v.prompt_steps)))
        .collect();
    assert_eq!(variations, [(2, 1125), (1, 1125), (3, 1125)]);
    let b = render_piece(&spec, &plan, &backend, &codec, Strategy::default()).unwrap();
    assert_eq!(a.manifest.grid_hash, b.manifest.grid_hash);
}

fn sampling_statistics() {
    let u = Distributions::from_rows(&[vec![0.5, 0.3, 0.2]]);
    let c1 = Distributions::from_rows(&[vec![0.1, 0.6, 0.3]]);
    let c2 = Distributions::from_rows(&[vec![0.2, 0.2, 0.6]]);
    let q = blend(&u, &[(&c1, 0.25), (&c2, 0.75)], 0.85).unwrap();
    let expected = [0.15 * 0.5 + 0.85 * 0.175, 0.15 * 0.3 + 0.85 * 0.3, 0.15 * 0.2 + 0.85 * 0.525];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 100_000f64;
    let mut counts = [0f64; 3];
    for _ in 0..100_000 {
        counts[sample_step(&q, &mut rng)[0] as usize] += 1.0;
    }
    let chi2: f64 = counts.iter().zip(expected).map(|(o, p)| (o - p * n).powi(2) / (p * n)).sum();
    let p = 1.0 - ChiSquared::new(2.0).unwrap().cdf(chi2);
    assert!(p > 0.001, "p = {p}");
}

fn optimizer_loop() {
    let po = ScriptedLlm::load(common::fixture("po_llm.json")).unwrap();
    let mp = ScriptedLlm::load(common::fixture("mp_llm.json")).unwrap();
    let engine = BackendEngine {
        backend: Arc::new(ToyBackend::default()),
        config: OrchestratorConfig::default(),
    };
    let rater = SimulatedRater::new(8);
    let opt = Optimizer {
        po_llm: &po,
        mp_llm: &mp,
        engine: &engine,
        raters: &rater,
        strategy: Strategy::default(),
    };
    let mut state = OptimizerState::new("Write forms for energetic dance music.", OptimizerConfig::default());
    let mut snapshots = Vec::new();
    opt.run(&mut state, &mut |s| snapshots.push(s.clone())).unwrap();
    assert_eq!(state.pool.iter().filter(|c| c.origin == musicform_core::optimizer::Origin::Exploration).count(), 20);
    assert!(state.pool[..20].iter().all(|c| c.avg_mos.is_some()));
    assert_eq!(state.phase, Phase::Done);
    assert_eq!(state.iteration, 20);
    let t = &state.trajectory;
    assert_eq!(t.len(), 21);
    assert!(t.windows(2).all(|w| w[1].min >= w[0].min && w[1].max >= w[0].max));
    assert!(t.last().unwrap().mean >= t[0].mean);

    let mid = snapshots
        .iter()
        .find(|s| s.phase == Phase::Exploitation && s.iteration == 14)
        .unwrap()
        .clone();
    let dir = tempfile::tempdir().unwrap();
    mid.save(dir.path().join("state.json")).unwrap();
    let mut resumed = OptimizerState::load(dir.path().join("state.json")).unwrap();
    opt.run(&mut resumed, &mut |_| {}).unwrap();
    assert_eq!(resumed, state);
}

fn stats() {
    let s = GroupSummary::from_scores("g", &[4.0, 4.0, 3.0, 5.0]).unwrap();
    assert_eq!(s.mos(), "4.00±0.82");

    let mut ratings = Vec::new();
    for (group, counts) in [("ours", OURS), ("vanilla", VANILLA), ("pond5", POND5)] {
        for (i, score) in expand(counts).into_iter().enumerate() {
            ratings.push(RatingRecord::study(format!("r{}", i % 10), format!("{group}/{}", i % 10), score as u8));
        }
    }
    let groups: Vec<(String, String)> = [("ours", "Ours"), ("vanilla", "Vanilla MusicGen"), ("pond5", "Pond5")]
        .iter()
        .map(|(g, l)| (g.to_string(), l.to_string()))
        .collect();
    let report = MosReport::build(&ratings, &groups, &Default::default()).unwrap();
    let rows: Vec<(String, String)> = report.table_rows();
    let expected = [("Ours", "3.89±1.06"), ("Vanilla MusicGen", "3.50±1.08"), ("Pond5", "3.98±0.81")];
    assert_eq!(rows.len(), 3);
    for ((label, mos), (el, em)) in rows.iter().zip(expected) {
        assert_eq!((label.as_str(), mos.as_str()), (el, em));
    }

    let key = [
        ("q/0", QualificationKind::Instructed(4)),
        ("q/1", QualificationKind::Instructed(2)),
        ("q/2", QualificationKind::Instructed(5)),
        ("q/3", QualificationKind::Silence),
    ]
    .into_iter()
    .map(|(c, k)| (c.to_string(), k))
    .chain((4..10).map(|i| (format!("q/{i}"), QualificationKind::Plain)))
    .collect();
    let session: Vec<RatingRecord> = [4u8, 2, 5, 2, 3, 3, 3, 3, 3, 3]
        .iter()
        .enumerate()
        .map(|(i, &s)| RatingRecord {
            context: RatingContext::Qualification,
            ..RatingRecord::study("bob", format!("q/{i}"), s)
        })
        .collect();
    let r = qualify_rater("bob", &session, &key, 10).unwrap();
    assert!(!r.passed);
    assert_eq!(r.failures, ["silence"]);

    for case in welch_cases() {
        let c = compare_groups(&case.a, &case.b).unwrap();
        assert!((c.p_value - case.p).abs() <= 1e-9, "{} vs {}", c.p_value, case.p);
    }
}

fn main() {
    let criteria = [
        Criterion { name: "rvq oracle equivalence", limit: Some(Duration::from_secs(5)), check: rvq_oracle },
        Criterion { name: "k-means training", limit: Some(Duration::from_secs(30)), check: kmeans },
        Criterion { name: "delay-pattern round trip", limit: None, check: delay_round_trip },
        Criterion { name: "blend correctness", limit: None, check: blend_correctness },
        Criterion { name: "schedules", limit: None, check: schedules },
        Criterion { name: "end-to-end generation", limit: Some(Duration::from_secs(60)), check: end_to_end },
        Criterion { name: "sampling statistics", limit: None, check: sampling_statistics },
        Criterion { name: "optimizer loop", limit: Some(Duration::from_secs(120)), check: optimizer_loop },
        Criterion { name: "stats", limit: None, check: stats },
    ];
    println!("\nacceptance criteria");
    let mut failed = Vec::new();
    for c in &criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.check));
        let elapsed = start.elapsed();
        let over = c.limit.is_some_and(|l| elapsed > l);
        let ok = outcome.is_ok() && !over;
        let limit = c.limit.map_or(String::new(), |l| format!(", limit {}s", l.as_secs()));
        println!(
            "{} {} ({:.2}s{limit}){}",
            if ok { "PASS" } else { "FAIL" },
            c.name,
            elapsed.as_secs_f64(),
            if over { " over time limit" } else { "" }
        );
        if !ok {
            failed.push(c.name);
        }
    }
    println!("{} passed, {} failed", criteria.len() - failed.len(), failed.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
