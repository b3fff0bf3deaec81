//! Adapted vs from-scratch detector on a synthetic 3+1 domain benchmark.
//!
//! Usage: `cargo run --release -p xdwaf-core --example sample_efficiency -- [seed] [aux_train] [target_train]`

use std::time::Instant;

use xdwaf_core::pipeline::{build_universal, calibrate, detect_and_evaluate, fit_scratch, fit_target, Hyper, Preset};
use xdwaf_core::synth::{domain_id, grammars, sample_splits, SplitSize, SyntheticSpec};

fn main() -> xdwaf_core::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).map(|a| a.parse().expect("numeric argument")).collect();
    let seed = args.first().copied().unwrap_or(0);
    let aux_n = args.get(1).copied().unwrap_or(50_000) as usize;
    let tgt_n = args.get(2).copied().unwrap_or(500) as usize;

    let spec = SyntheticSpec {
        sizes: vec![SplitSize { train: aux_n, test: 0 }; 4],
        overlap: 0.5,
        identical_grammars: false,
        attack_rate: 0.05,
        poison_ratio: 0.0,
        seed,
    };
    let gs = grammars(&spec);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let t = Instant::now();
    let aux: Vec<_> = gs[..3]
        .iter()
        .map(|g| {
            let c = sample_splits(g, SplitSize { train: aux_n, test: 0 }, 0.0, 0.0, &mut rng).unwrap();
            (c.domain_id, c.train)
        })
        .collect();
    let target = sample_splits(&gs[3], SplitSize { train: tgt_n, test: 10_000 }, 0.05, 0.0, &mut rng)?;
    eprintln!("synth {:.1}s", t.elapsed().as_secs_f64());

    let mut hyper = Hyper::preset(Preset::Desk).with_seed(seed);
    let env = |k: &str| std::env::var(k).ok().map(|v| v.parse::<f64>().expect("numeric override"));
    if let Some(v) = env("META_ITERS") {
        hyper.meta.max_meta_iters = v as usize;
    }
    if let Some(v) = env("INNER_LR") {
        hyper.meta.inner_lr = v;
    }
    if let Some(v) = env("OUTER_LR") {
        hyper.meta.outer_lr = v;
    }
    if let Some(v) = env("ADAPT_STEPS") {
        hyper.adapt.steps = v as usize;
    }
    if let Some(v) = env("ADAPT_LR") {
        hyper.adapt.adam.lr = v;
    }
    if let Some(v) = env("TOKEN_BATCH") {
        hyper.meta.token_batch = v as usize;
    }
    if let Some(v) = env("ADAPT_BATCH") {
        hyper.adapt.token_batch = v as usize;
    }
    if let Some(v) = env("TOL") {
        hyper.meta.tolerance = v;
    }
    let t = Instant::now();
    let uni = build_universal(&aux, &hyper)?;
    eprintln!(
        "universal {:.1}s, {} iters, windows {:?}",
        t.elapsed().as_secs_f64(),
        uni.report.iterations,
        uni.report.window_means
    );

    let tid = domain_id(3);
    for (name, fit) in [
        ("adapted", fit_target(&uni, &tid, &target.train, &hyper)?),
        ("scratch", fit_scratch(&uni, &tid, &target.train, &hyper)?),
    ] {
        let t = Instant::now();
        let det = calibrate(&fit, &hyper)?;
        let (_, m) = detect_and_evaluate(&det, &target.test, None)?;
        let l = &fit.report.losses;
        eprintln!(
            "{name}: loss {:.3} -> {:.3}, thr {:.3}, P {:.3} R {:.3} F1 {:.3} ({:.1}s eval)",
            l[..5].iter().sum::<f64>() / 5.0,
            l[l.len() - 5..].iter().sum::<f64>() / 5.0,
            det.threshold,
            m.precision,
            m.recall,
            m.f1,
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
