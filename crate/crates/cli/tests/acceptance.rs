//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use dlab_cli::{gradcheck_rows, main_with, EXIT_OK};
use dlab_core::ambiguity::{
    mirror_ks_check, mirror_t, random_configuration, verify_disentangling_violation, verify_distribution_reproduction,
    build_t, DiscreteFactorSpace,
};
use dlab_core::autodiff::{NormKind, Tape};
use dlab_core::data::{DataConfig, InverseIndex, Renderer, ShapeBank};
use dlab_core::diagnostics::{common_stat, shortcut_index, transfer_error, CopyVSource, IdealTransfer};
use dlab_core::experiment::ShortcutExperiment;
use dlab_core::train::TrainMode;
use dlab_core::Tensor;
use num_rational::Rational64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn gradients() -> Verdict {
    let rows = match gradcheck_rows(0, 1e-4, false) {
        Ok(r) => r,
        Err(e) => return verdict(false, e.to_string()),
    };
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<_> = rows.iter().filter(|r| !r.pass).map(|r| r.name.clone()).collect();
    let composite = rows.iter().any(|r| r.name.contains("composite"));
    verdict(
        failed.is_empty() && composite,
        format!("{} cases, worst rel err {worst:.2e}, failed {failed:?}", rows.len()),
    )
}

fn exact_ambiguity() -> Verdict {
    let space = DiscreteFactorSpace::uniform(8, 4).expect("space");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ok = 0;
    let n = 16;
    for _ in 0..n {
        let (va, vb, subset) = random_configuration(&space, &mut rng);
        let Ok(t) = build_t(&space, va, vb, &subset) else { continue };
        if verify_distribution_reproduction(&space, &t) == Rational64::from_integer(0)
            && verify_disentangling_violation(&t).is_some()
        {
            ok += 1;
        }
    }
    verdict(ok == n, format!("{ok}/{n} configurations with TV = 0 and a witness"))
}

fn mirror() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let checks = match mirror_ks_check(100_000, &mut rng) {
        Ok(c) => c,
        Err(e) => return verdict(false, e.to_string()),
    };
    let ks_ok = checks.iter().all(|c| c.p_value > 0.01);
    let distinct = (0..100_000).all(|_| {
        let v: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        v.abs() <= 1e-9 || mirror_t(v, 0).unwrap() != mirror_t(v, 1).unwrap()
    });
    let ps: Vec<String> = checks.iter().map(|c| format!("p(c={})={:.3}", c.c, c.p_value)).collect();
    verdict(ks_ok && distinct, format!("{}, T(v,0) != T(v,1): {distinct}", ps.join(" ")))
}

fn normalization() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut worst_mean, mut worst_std) = (0.0f64, 0.0f64);
    for trial in 0..200 {
        let (n, c, hw) = (2 + trial % 3, 1 + trial % 4, 3 + trial % 6);
        let shift = rng.random_range(-5.0..5.0);
        let scale = rng.random_range(1.0..4.0);
        let data = (0..n * c * hw * hw).map(|_| shift + scale * rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::new(&[n, c, hw, hw], data).expect("shape");
        let plane = hw * hw;
        for kind in [NormKind::Instance, NormKind::Batch] {
            let tape = Tape::new();
            let (y, _, _) = tape.constant(x.clone()).normalize(kind).expect("normalize");
            let y = y.value();
            let groups: Vec<Vec<f64>> = match kind {
                NormKind::Instance => y.data().chunks(plane).map(|p| p.to_vec()).collect(),
                NormKind::Batch => (0..c)
                    .map(|ch| (0..n).flat_map(|i| y.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane].to_vec()).collect())
                    .collect(),
            };
            for g in groups {
                let m = g.iter().sum::<f64>() / g.len() as f64;
                let sd = (g.iter().map(|v| (v - m).powi(2)).sum::<f64>() / g.len() as f64).sqrt();
                worst_mean = worst_mean.max(m.abs());
                worst_std = worst_std.max((sd - 1.0).abs());
            }
        }
    }
    verdict(
        worst_mean < 1e-5 && worst_std < 1e-4,
        format!("instance+batch: max |mean| {worst_mean:.1e}, max |std-1| {worst_std:.1e}"),
    )
}

fn oracles() -> Verdict {
    let k = 4;
    let cfg = DataConfig { identities: k, ..DataConfig::default() };
    let bank = ShapeBank::generate(k, 11).expect("bank");
    let index = InverseIndex::build(&bank, &cfg).expect("index");
    let r = Renderer::new(bank, cfg).expect("renderer");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ideal = IdealTransfer { renderer: &r, index: &index };
    let n = 10_000;
    let mut run = || -> dlab_core::Result<(f64, f64, f64, f64, f64)> {
        Ok((
            transfer_error(&ideal, &r, 500, &mut rng)?,
            shortcut_index(&ideal, &r, 500, &mut rng)?,
            common_stat(&ideal, &r, &index, 500, &mut rng)?.stat_fake,
            shortcut_index(&CopyVSource, &r, n, &mut rng)?,
            common_stat(&CopyVSource, &r, &index, n, &mut rng)?.stat_fake,
        ))
    };
    match run() {
        Ok((te, si, sf, copy_si, copy_sf)) => {
            let target = 1.0 - 1.0 / k as f64;
            verdict(
                te == 0.0 && si == 0.0 && sf == 0.0 && copy_si == 1.0 && (copy_sf - target).abs() <= 0.02,
                format!("ideal {te}/{si}/{sf}; copy shortcut {copy_si}, stat_fake {copy_sf:.4} (target {target:.4})"),
            )
        }
        Err(e) => verdict(false, e.to_string()),
    }
}

fn dlab(args: &[&str]) -> i32 {
    main_with(std::iter::once("dlab").chain(args.iter().copied()))
}

fn train(out: &Path, extra: &[&str]) -> bool {
    let mut args = vec!["train", "--quiet", "--out", out.to_str().unwrap(), "--mode", "ae-gan", "--seed", "8", "--checkpoint-interval", "50"];
    args.extend_from_slice(&["--image-size", "16", "--widths", "8,16", "--batch-size", "8"]);
    args.extend_from_slice(extra);
    dlab(&args) == EXIT_OK
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().expect("tempdir");
    let dir = |s: &str| tmp.path().join(s);
    let read = |p: &Path| std::fs::read(p).unwrap_or_default();
    let ran = train(&dir("a"), &["--steps", "100"])
        && train(&dir("b"), &["--steps", "100"])
        && train(&dir("part"), &["--steps", "50"]);
    if !ran {
        return verdict(false, "training failed");
    }
    let ck = dir("part").join("checkpoint_50.dlck");
    let resumed = dlab(&["train", "--quiet", "--out", dir("part").to_str().unwrap(), "--resume", ck.to_str().unwrap(), "--steps", "100"]);
    let metrics = |d: &str| read(&dir(d).join("metrics.csv"));
    let same_runs = !metrics("a").is_empty() && metrics("a") == metrics("b");
    let same_resume = resumed == EXIT_OK
        && metrics("a") == metrics("part")
        && read(&dir("a").join("checkpoint_100.dlck")) == read(&dir("part").join("checkpoint_100.dlck"));
    verdict(same_runs && same_resume, format!("repeat identical: {same_runs}, resume bit-exact: {same_resume}"))
}

fn report(n: usize, name: &str, budget: Duration, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let v = f();
    let took = start.elapsed();
    let pass = v.pass && took <= budget;
    println!(
        "criterion {n} {:<4} {name}: {} [{:.1}s of {}s]",
        if pass { "PASS" } else { "FAIL" },
        v.detail,
        took.as_secs_f64(),
        budget.as_secs()
    );
    pass
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let mut all = true;
    all &= report(1, "gradient check", secs(60), gradients);
    all &= report(2, "exact ambiguity", secs(10), exact_ambiguity);
    all &= report(3, "mirror example", secs(5), mirror);

    let start = Instant::now();
    let exp = ShortcutExperiment::default();
    let results = exp.run(|r| {
        eprintln!(
            "  {:?}@{}: transfer {:.4} shortcut {:.3} stat_fake {:.3} loss_ae {:.4} ({:.0}s)",
            r.mode, r.dim_v, r.transfer_error, r.shortcut_index, r.stat_fake, r.final_loss_ae, r.seconds
        )
    });
    let took = start.elapsed();
    let in_budget = took <= secs(3600);
    match results {
        Ok(res) => {
            let get = |m, d| res.get(m, d).expect("run present");
            let (ae2, ae64, gan64) = (get(TrainMode::Ae, 2), get(TrainMode::Ae, 64), get(TrainMode::AeGan, 64));
            let a = ae64.transfer_error > 2.0 * ae2.transfer_error;
            let b = gan64.transfer_error < ae64.transfer_error;
            let c = ae64.shortcut_index > 0.5 && gan64.shortcut_index < 0.3;
            let pass4 = a && b && c && in_budget;
            println!(
                "criterion 4 {:<4} shortcut problem: (a) {a} AE@64 {:.4} vs AE@2 {:.4}; (b) {b} GAN@64 {:.4}; \
                 (c) {c} shortcut AE@64 {:.3} GAN@64 {:.3} [{:.0}s of 3600s]",
                if pass4 { "PASS" } else { "FAIL" },
                ae64.transfer_error,
                ae2.transfer_error,
                gan64.transfer_error,
                ae64.shortcut_index,
                gan64.shortcut_index,
                took.as_secs_f64()
            );
            let pass5 = gan64.stat_fake < ae64.stat_fake / 2.0;
            println!(
                "criterion 5 {:<4} GAN statistic: stat_fake GAN@64 {:.3} vs AE@64 {:.3}",
                if pass5 { "PASS" } else { "FAIL" },
                gan64.stat_fake,
                ae64.stat_fake
            );
            all &= pass4 && pass5;
        }
        Err(e) => {
            println!("criterion 4 FAIL shortcut problem: {e}");
            println!("criterion 5 FAIL GAN statistic: {e}");
            all = false;
        }
    }

    all &= report(6, "normalization invariants", secs(60), normalization);
    all &= report(7, "oracle calibration", secs(60), oracles);
    all &= report(8, "determinism", secs(600), determinism);
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
