use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vistabnet::error::Error;
use vistabnet::search::*;

fn one_significant_digit(x: f64) -> bool {
    let s = format!("{x:e}");
    let mantissa = s.split('e').next().unwrap();
    !mantissa.contains('.') && mantissa.len() == 1
}

#[test]
fn ten_thousand_samples_satisfy_space() {
    let space = SearchSpace::vistabnet();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut best = None;
    for i in 0..10_000 {
        let cfg = space.sample(&mut rng, best.as_ref(), 0.5).unwrap();
        assert_eq!(space.violation(&cfg), None, "{cfg:?}");
        for name in ["lr", "proj_lr"] {
            let lr = cfg[name].as_f64().unwrap();
            assert!(one_significant_digit(lr), "{lr}");
            assert!((1e-5..=1e-3).contains(&lr));
        }
        let epochs = cfg["epochs"].as_usize().unwrap();
        assert!(epochs.is_multiple_of(10) && (10..=100).contains(&epochs));
        assert!([8, 16, 32, 64, 128].contains(&cfg["projections"].as_usize().unwrap()));
        assert!((1..=4).contains(&cfg["proj_depth"].as_usize().unwrap()));
        if i % 7 == 0 {
            best = Some(cfg);
        }
    }
}

#[test]
fn budget_is_exact_despite_failures() {
    let calls = AtomicUsize::new(0);
    let objective = |p: &ParamSet, _seed: u64| {
        let n = calls.fetch_add(1, Ordering::SeqCst);
        match n % 5 {
            0 => Err(Error::State("boom".into())),
            1 => panic!("objective panic"),
            _ => Ok(p["lr"].as_f64().unwrap()),
        }
    };
    let opts = SearchOptions {
        budget: 50,
        parallel: 4,
        ..SearchOptions::default()
    };
    let result = run_search(&SearchSpace::vistabnet(), objective, &opts).unwrap();
    assert_eq!(calls.load(Ordering::SeqCst), 50);
    assert_eq!(result.trials.len(), 50);
    let ok: Vec<&Trial> = result.trials.iter().filter(|t| !t.failed()).collect();
    let max = ok.iter().map(|t| t.score).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(result.best.unwrap().score, max);
    assert!(result
        .trials
        .iter()
        .filter(|t| t.failed())
        .all(|t| t.score == f64::NEG_INFINITY));
}

#[test]
fn finds_target_rate() {
    let space = SearchSpace::vistabnet();
    let target = 3e-4;
    let mut hits = 0;
    for seed in 0..100 {
        let opts = SearchOptions {
            budget: 50,
            parallel: 1,
            seed,
            ..SearchOptions::default()
        };
        let result = run_search(&space, |p, _| Ok(-(p["lr"].as_f64().unwrap() - target).powi(2)), &opts).unwrap();
        let lr = result.best.unwrap().params["lr"].as_f64().unwrap();
        if (lr - target).abs() <= 1e-4 + 1e-12 {
            hits += 1;
        }
    }
    assert!(hits >= 95, "{hits}/100");
}

#[test]
fn sequential_search_is_reproducible() {
    let opts = SearchOptions {
        budget: 20,
        parallel: 1,
        seed: 4,
        ..SearchOptions::default()
    };
    let obj = |p: &ParamSet, s: u64| Ok(p["epochs"].as_f64().unwrap() + s as f64 * 1e-3);
    let strip =
        |r: SearchResult| -> Vec<(ParamSet, f64)> { r.trials.into_iter().map(|t| (t.params, t.score)).collect() };
    let a = strip(run_search(&SearchSpace::vistabnet(), obj, &opts).unwrap());
    let b = strip(run_search(&SearchSpace::vistabnet(), obj, &opts).unwrap());
    assert_eq!(a, b);
}

#[test]
fn zero_seeding_ignores_incumbent() {
    let space = SearchSpace::vistabnet();
    let best = space.sample(&mut ChaCha8Rng::seed_from_u64(1), None, 0.0).unwrap();
    let mut with = ChaCha8Rng::seed_from_u64(2);
    let mut without = ChaCha8Rng::seed_from_u64(2);
    let mut counts = [0usize; 10];
    for _ in 0..1000 {
        let a = space.sample(&mut with, Some(&best), 0.0).unwrap();
        let b = space.sample(&mut without, None, 0.0).unwrap();
        assert_eq!(a, b);
        counts[a["epochs"].as_usize().unwrap() / 10 - 1] += 1;
    }
    let expected = 100.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // df = 9, p = 0.001
    assert!(chi2 < 27.88, "{chi2} {counts:?}");
}

#[test]
fn trials_csv_layout() {
    let dir = tempfile::tempdir().unwrap();
    let space = SearchSpace::vistabnet();
    let opts = SearchOptions {
        budget: 3,
        parallel: 1,
        ..SearchOptions::default()
    };
    let r = run_search(&space, |_, _| Ok(0.5), &opts).unwrap();
    let p = dir.path().join("t.csv");
    write_trials_csv(&p, &space, &r.trials).unwrap();
    let text = std::fs::read_to_string(p).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "trial_id,lr,proj_lr,epochs,projections,proj_depth,score,seconds"
    );
    assert_eq!(text.lines().count(), 4);
}
