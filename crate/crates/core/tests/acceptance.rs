//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints one PASS/FAIL line; exits non-zero if any fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ovcd::backbone::{Backbone, BackboneConfig, BackboneSelector, RawFeatures};
use ovcd::data::{synth_pairs, SynthOptions};
use ovcd::gradcheck::{grad_check, GradCheckOptions};
use ovcd::graph::Graph;
use ovcd::head::{ChangeHead, HeadConfig, LEVELS};
use ovcd::maps::{ChangeMap, SemanticMap};
use ovcd::metrics::{binary_metrics, confusion, Confusion};
use ovcd::ops;
use ovcd::params::ParamStore;
use ovcd::pipeline::{baseline_compare, beta_threshold, compose_binary, Proposal};
use ovcd::tensor::Tensor;
use ovcd::training::{self, build_losses, cache_features, LabeledPair, LossWeights, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn reduced_setup(n: usize) -> (Vec<LabeledPair>, Vec<RawFeatures>) {
    let head = HeadConfig::reduced();
    let opts = SynthOptions { n, ..SynthOptions::default() };
    let pairs: Vec<LabeledPair> = synth_pairs(&opts, &head).unwrap().iter().map(|p| p.to_labeled()).collect();
    let backbone = Backbone::from_selector(&BackboneSelector::Mock { seed: 0 }, BackboneConfig::reduced()).unwrap();
    let feats = cache_features(&pairs, &backbone).unwrap();
    (pairs, feats)
}

/// Restricts learnability to parameters whose name starts with one of `keep`.
fn only(store: &ParamStore, keep: &[&str]) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, p) in store.iter() {
        if keep.iter().any(|k| name.starts_with(k)) {
            out.insert(name, p.value.clone());
        } else {
            out.insert_frozen(name, p.value.clone());
        }
    }
    out
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let (pairs, feats) = reduced_setup(4);
    // a pair with alterations, so every loss term is active
    let (pair, raw) = (&pairs[3], &feats[3]);
    check(pair.label.changed() > 0, "test pair has no changed pixels")?;
    let cfg = HeadConfig::reduced();
    let head = ChangeHead::new(cfg.clone()).unwrap();
    let w = LossWeights::default();
    let runs: [(&str, &[&str], usize); 4] = [
        ("L_total", &[""], 2),
        ("L_cd", &["fmm.", "bdfm.", "edqa.", "moe.", "resup.0", "resup.1", "resup.2", "resup.3", "resup.head"], 1),
        ("L_ups", &["fmm.", "bdfm.", "edqa.", "moe.", "resup.0", "resup.1", "resup.2", "resup.3"], 1),
        ("L_sim", &["fmm.", "sim."], 3),
    ];
    let mut lines = Vec::new();
    let mut worst = 0.0f64;
    for (which, keep, per_param) in runs {
        let store = only(&head.params, keep);
        let report = ok(grad_check(
            &store,
            |s, g| {
                let out = ovcd::head::forward(g, s, &cfg, raw, 168, 168)?;
                let l = build_losses(g, &out, &pair.label, &w)?;
                Ok(match which {
                    "L_cd" => l.cd,
                    "L_ups" => l.ups,
                    "L_sim" => l.sim,
                    _ => l.total,
                })
            },
            &GradCheckOptions {
                max_entries: Some(per_param),
                ..GradCheckOptions::default()
            },
        ))?;
        let modules: BTreeSet<&str> = report.params.iter().map(|p| p.name.split('.').next().unwrap()).collect();
        worst = worst.max(report.max_rel_err());
        lines.push(format!(
            "{which}: {} entries over {modules:?} ({} across a kink, frozen), max rel err {:.2e}",
            report.checked(),
            report.frozen_kinks(),
            report.max_rel_err()
        ));
        if !report.passed() {
            return Err(format!("{which} failed: {:?}", report.worst()));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 600.0, format!("took {secs:.0}s"))?;
    Ok(format!("max rel err {worst:.2e} in {secs:.0}s; {}", lines.join("; ")))
}

fn normalization_suite() -> Outcome {
    let mut worst = 0.0f64;
    let mut rows = 0usize;
    for seed in 0..100u64 {
        let cfg = HeadConfig {
            seed,
            ..HeadConfig::reduced()
        };
        let head = ChangeHead::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut rand_t = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0));
        let raw = RawFeatures {
            layers: vec![0, 1, 2, 3],
            t1: (0..LEVELS).map(|_| rand_t(&[64, 6, 6])).collect(),
            t2: (0..LEVELS).map(|_| rand_t(&[64, 6, 6])).collect(),
        };
        let mut g = Graph::new();
        let out = ok(head.forward(&mut g, &raw, 84, 84))?;
        for &node in out.attn_weights.iter() {
            let t = g.value(node);
            let n = *t.shape().last().unwrap();
            for row in t.data().chunks(n) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                rows += 1;
            }
        }
        for &node in out.gates.iter() {
            let t = g.value(node);
            let n = *t.shape().last().unwrap();
            for row in t.data().chunks(n) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                rows += 1;
            }
        }
    }
    check(worst < 1e-12, format!("worst deviation {worst:e}"))?;
    Ok(format!("{rows} rows, worst |sum-1| = {worst:.1e}"))
}

fn window_round_trip() -> Outcome {
    let configs = [
        (1, 1, 1),
        (3, 3, 3),
        (6, 6, 3),
        (6, 9, 3),
        (9, 6, 3),
        (4, 8, 2),
        (8, 4, 4),
        (12, 12, 6),
        (18, 18, 9),
        (10, 15, 5),
        (7, 14, 7),
        (16, 24, 8),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &(h, w, s) in &configs {
        let x = Tensor::from_fn(&[5, h, w], |_| rng.random::<f64>() * 1e3 - 500.0);
        let win = ok(ops::window_partition(&x, s))?;
        check(win.shape() == [(h / s) * (w / s), s * s, 5], format!("bad window shape for {h}x{w}/{s}"))?;
        let back = ok(ops::window_reverse(&win, s, h, w))?;
        let exact = back.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        check(exact && back.shape() == x.shape(), format!("round trip differs for {h}x{w}/{s}"))?;
    }
    Ok(format!("{} configurations bit-exact", configs.len()))
}

struct OracleMetrics {
    precision: f64,
    recall: f64,
    f1: f64,
    iou: f64,
    oa: f64,
    kappa: f64,
}

fn metric_oracle(pred: &[u8], gt: &[u8]) -> (Confusion, OracleMetrics) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => tn += 1,
        }
    }
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let (t, f_p, f_n, n_) = (tp as f64, fp as f64, fn_ as f64, tn as f64);
    let n = t + f_p + f_n + n_;
    let precision = div(t, t + f_p);
    let recall = div(t, t + f_n);
    let oa = (t + n_) / n;
    let pe = ((t + f_n) * (t + f_p) + (n_ + f_p) * (n_ + f_n)) / (n * n);
    (
        Confusion::new(tp, fp, fn_, tn),
        OracleMetrics {
            precision,
            recall,
            f1: div(2.0 * precision * recall, precision + recall),
            iou: div(t, t + f_n + f_p),
            oa,
            kappa: div(oa - pe, 1.0 - pe),
        },
    )
}

fn metric_suite() -> Outcome {
    let worked = ok(binary_metrics(&Confusion::new(40, 10, 10, 40)))?;
    check((worked.kappa - 0.6).abs() < 1e-12, format!("kappa {}", worked.kappa))?;
    check((worked.f1 - 0.8).abs() < 1e-12, format!("f1 {}", worked.f1))?;
    check((worked.iou - 2.0 / 3.0).abs() < 1e-12, format!("iou {}", worked.iou))?;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut non_degenerate = 0;
    for i in 0..1000 {
        let density = rng.random_range(0.0..1.0);
        let pred: Vec<u8> = (0..256).map(|_| u8::from(rng.random_bool(density))).collect();
        let gt: Vec<u8> = if i % 50 == 0 {
            vec![0; 256]
        } else {
            (0..256).map(|_| u8::from(rng.random_bool(density))).collect()
        };
        let (c, o) = metric_oracle(&pred, &gt);
        let got_c = ok(confusion(
            &ok(ChangeMap::new(16, 16, pred))?,
            &ok(ChangeMap::new(16, 16, gt))?,
        ))?;
        check(got_c == c, format!("confusion mismatch on map {i}"))?;
        let m = ok(binary_metrics(&got_c))?;
        let same = [
            (m.precision, o.precision),
            (m.recall, o.recall),
            (m.f1, o.f1),
            (m.iou, o.iou),
            (m.oa, o.oa),
            (m.kappa, o.kappa),
        ]
        .iter()
        .all(|(a, b)| a.to_bits() == b.to_bits());
        check(same, format!("metric mismatch on map {i}"))?;
        if !m.degenerate.any() {
            non_degenerate += 1;
            let id = (m.f1 - 2.0 * m.iou / (1.0 + m.iou)).abs();
            check(id < 1e-12, format!("F1/IoU identity off by {id:e} on map {i}"))?;
        }
    }
    Ok(format!("worked case exact; 1000 maps agree bit-for-bit; identity holds on {non_degenerate} non-degenerate maps"))
}

fn composition_suite() -> Outcome {
    let fg: BTreeSet<u32> = [1].into();
    for bits in 0..8u8 {
        let (ca, a, b) = (bits & 1, (bits >> 1) & 1, (bits >> 2) & 1);
        let m = ok(compose_binary(
            &ok(ChangeMap::new(1, 1, vec![ca]))?,
            &ok(SemanticMap::new(1, 1, vec![a as u32]))?,
            &ok(SemanticMap::new(1, 1, vec![b as u32]))?,
            &fg,
        ))?;
        check(m.data()[0] == (ca & (a | b)), format!("combination {bits:03b}"))?;
    }
    let fg: BTreeSet<u32> = [1, 3].into();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..100 {
        let ca: Vec<u8> = (0..4096).map(|_| rng.random_range(0..=1)).collect();
        let m1: Vec<u32> = (0..4096).map(|_| rng.random_range(0..5)).collect();
        let m2: Vec<u32> = (0..4096).map(|_| rng.random_range(0..5)).collect();
        let expect: Vec<u8> = (0..4096)
            .map(|p| u8::from(ca[p] == 1 && (fg.contains(&m1[p]) || fg.contains(&m2[p]))))
            .collect();
        let got = ok(compose_binary(
            &ok(ChangeMap::new(64, 64, ca))?,
            &ok(SemanticMap::new(64, 64, m1))?,
            &ok(SemanticMap::new(64, 64, m2))?,
            &fg,
        ))?;
        check(got.data() == expect.as_slice(), format!("random triple {i}"))?;
    }
    Ok("8 bit combinations and 100 random 64x64 triples match".into())
}

fn baseline_suite() -> Outcome {
    let b = ok(beta_threshold(60.0))?;
    check((b - 0.5).abs() < 1e-12, format!("beta(60) = {b}"))?;
    let thetas: Vec<f64> = (0..=36).map(|i| i as f64 * 5.0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for set in 0..50 {
        let (h, w) = (8, 8);
        let proposals: Vec<Proposal> = (0..rng.random_range(1..8))
            .map(|_| {
                let mut px: Vec<usize> = (0..rng.random_range(1..10)).map(|_| rng.random_range(0..h * w)).collect();
                px.sort_unstable();
                px.dedup();
                let z1 = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                let z2 = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                Proposal::new(px, z1, z2).unwrap()
            })
            .collect();
        let mut prev: Option<ChangeMap> = None;
        for &t in &thetas {
            let m = ok(baseline_compare(&proposals, t, h, w))?;
            if let Some(p) = &prev {
                let subset = m.data().iter().zip(p.data()).all(|(&now, &before)| now <= before);
                check(subset, format!("set {set}: changed set grew from theta {} to {t}", t - 5.0))?;
            }
            prev = Some(m);
        }
    }
    Ok(format!("beta(60) = {b}; changed set shrinks monotonically in theta on 50 sets"))
}

struct Overfit {
    head: ChangeHead,
    summary: String,
    passed: bool,
}

fn mean_total(head: &ChangeHead, pairs: &[LabeledPair], feats: &[RawFeatures], w: &LossWeights) -> (f64, Confusion) {
    let mut total = 0.0;
    let mut conf = Confusion::default();
    for (p, f) in pairs.iter().zip(feats) {
        let (parts, pred, _) = training::sample_gradients(head, f, &p.label, w).unwrap();
        total += parts.total(w);
        conf += confusion(&pred, &p.label).unwrap();
    }
    (total / pairs.len() as f64, conf)
}

fn overfit() -> Overfit {
    let start = Instant::now();
    let (pairs, feats) = reduced_setup(8);
    let w = LossWeights::default();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 1,
        epochs: 63,
        seed: 0,
    };
    let head = ChangeHead::new(HeadConfig::reduced()).unwrap();
    let outcome = training::train(&pairs, head, &feats, &cfg, &w, Some(500), |_| {}).unwrap();
    let steps = outcome.step_losses.len();
    let first = outcome.step_losses[0];
    let (last, conf) = mean_total(&outcome.head, &pairs, &feats, &w);
    let iou = binary_metrics(&conf).unwrap().iou;
    let secs = start.elapsed().as_secs_f64();
    let passed = steps <= 500 && iou >= 0.9 && first / last >= 10.0 && secs < 1800.0;
    Overfit {
        head: outcome.head,
        summary: format!(
            "{steps} steps in {secs:.0}s; training IoU {iou:.4} (need >= 0.90); L_total {first:.4} -> {last:.4} ({:.1}x, need >= 10x)",
            first / last
        ),
        passed,
    }
}

fn identical_null(trained: Option<&ChangeHead>) -> Outcome {
    let trained = trained.ok_or("no trained head from the overfit experiment")?;
    let (pairs, _) = reduced_setup(8);
    let backbone = Backbone::from_selector(&BackboneSelector::Mock { seed: 0 }, BackboneConfig::reduced()).unwrap();
    let fresh = ChangeHead::new(HeadConfig::reduced()).unwrap();
    let mut changed = 0;
    for p in &pairs {
        let raw = ok(backbone.features(&p.stem, &p.image1, &p.image1))?;
        for head in [&fresh, trained] {
            let mut g = Graph::new();
            let out = ok(head.forward(&mut g, &raw, 168, 168))?;
            for k in 0..LEVELS {
                let d = ok(g.value(out.pyramid[0][k]).max_abs_diff(g.value(out.pyramid[1][k])))?;
                check(d == 0.0, format!("{}: level {k} differs by {d:e}", p.stem))?;
            }
        }
        changed += ok(trained.predict(&raw, 168, 168))?.change.changed();
    }
    let frac = changed as f64 / (pairs.len() * 168 * 168) as f64;
    check(frac < 0.01, format!("changed area {:.2}% on identical pairs", 100.0 * frac))?;
    Ok(format!("pyramid differences exactly zero; changed area {:.3}% after training", 100.0 * frac))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = ok(Command::new(env!("CARGO_BIN_EXE_ovcd")).args(args).output())?;
    check(
        out.status.success(),
        format!("ovcd {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)),
    )
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn determinism() -> Outcome {
    let tmp = ok(tempfile::tempdir())?;
    let root = tmp.path();
    let s = |p: &Path| p.to_string_lossy().into_owned();
    let data = root.join("data");
    run_cli(&["synth", "--n", "4", "--size", "168", "--seed", "3", "--out", &s(&data)])?;
    let mut produced = Vec::new();
    for run in ["a", "b"] {
        let base = root.join(run);
        let (train, pred, eval) = (base.join("train"), base.join("pred"), base.join("eval"));
        run_cli(&[
            "train", "--preset", "reduced", "--data", &s(&data), "--out", &s(&train), "--seed", "11", "--epochs", "2",
            "--batch-size", "2", "--max-steps", "3",
        ])?;
        let ckpt = train.join("checkpoint.s2ca");
        run_cli(&["infer", "--checkpoint", &s(&ckpt), "--data", &s(&data), "--out", &s(&pred)])?;
        run_cli(&["eval", "--pred", &s(&pred), "--gt", &s(&data.join("label")), "--out", &s(&eval)])?;
        produced.push([files(&train), files(&pred), files(&eval)]);
    }
    let names = ["train", "infer", "eval"];
    let mut counted = 0;
    for (k, name) in names.iter().enumerate() {
        let (a, b) = (&produced[0][k], &produced[1][k]);
        check(!a.is_empty(), format!("{name} wrote nothing"))?;
        check(a == b, format!("{name} outputs differ between runs"))?;
        counted += a.len();
    }
    Ok(format!("{counted} artifacts byte-identical across two seeded runs"))
}

fn shape_ledger() -> Outcome {
    let cfg = HeadConfig::default();
    let sizes = ok(cfg.level_sizes(36, 36))?;
    check(sizes.map(|s| s.0) == [144, 72, 36, 18], format!("pyramid sizes {sizes:?}"))?;
    let windows = ok(cfg.window_counts(36, 36))?;
    check(windows == [256, 64, 16, 4], format!("window counts {windows:?}"))?;

    let head = ok(ChangeHead::new(cfg.clone()))?;
    let raw = RawFeatures {
        layers: vec![2, 5, 8, 11],
        t1: (0..LEVELS).map(|k| Tensor::from_fn(&[768, 36, 36], |i| ((i + k) as f64 * 0.013).sin())).collect(),
        t2: (0..LEVELS).map(|k| Tensor::from_fn(&[768, 36, 36], |i| ((i + 2 * k) as f64 * 0.011).cos())).collect(),
    };
    let mut g = Graph::new();
    let out = ok(head.forward(&mut g, &raw, 504, 504))?;
    for k in 0..LEVELS {
        let shape = g.value(out.pyramid[0][k]).shape().to_vec();
        check(shape == [cfg.channels[k], sizes[k].0, sizes[k].1], format!("level {k} shape {shape:?}"))?;
    }
    let logits = g.value(out.logits).shape().to_vec();
    check(logits == [2, 504, 504], format!("P_ca shape {logits:?}"))?;

    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
    let lin = |cin: usize, cout: usize| cout * cin + cout;
    let (d, s) = (cfg.up_dim, cfg.window);
    let mut expect = conv(d, d, 3) + conv(d, 2, 1) + conv(cfg.channels.iter().sum(), cfg.embed_dim, 1);
    for (k, &c) in cfg.channels.iter().enumerate() {
        expect += conv(cfg.feature_dim, c, 1)
            + [conv(c, c, 4), conv(c, c, 2), 0, conv(c, c, 3)][k]
            + 3 * conv(c, c, 3)
            + conv(2 * c, c, 3)
            + conv(2 * c, c, 1)
            + 6 * lin(c, c)
            + (2 * s - 1).pow(2) * cfg.heads
            + conv(2 * c, c, 3)
            + conv(c, c, 3)
            + lin(c, cfg.experts)
            + cfg.experts * (lin(c, cfg.moe_hidden_ratio * c) + lin(cfg.moe_hidden_ratio * c, c))
            + conv(c, d, 1)
            + 4 * conv(d, d, 1)
            + conv(d, 2, 1);
    }
    let count = head.learnable_count();
    check(count == expect, format!("census {count} vs formula {expect}"))?;
    let orders = (count as f64 / 3.9e6).log10().abs();
    check(orders < 1.0, format!("{count} is not within an order of magnitude of 3.9M"))?;
    Ok(format!(
        "levels {:?}, windows {windows:?}, P_ca {logits:?}; {count} learnable parameters ({:.2}M vs 3.9M)",
        sizes.map(|s| s.0),
        count as f64 / 1e6
    ))
}

fn report(n: usize, name: &str, result: std::thread::Result<Outcome>) -> bool {
    let (passed, detail) = match result {
        Ok(Ok(d)) => (true, d),
        Ok(Err(e)) => (false, e),
        Err(p) => (
            false,
            p.downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()),
        ),
    };
    println!("{} [{n:>2}] {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    passed
}

fn main() {
    let mut all = true;
    all &= report(1, "gradient suite", catch_unwind(gradient_suite));
    all &= report(2, "normalization suite", catch_unwind(normalization_suite));
    all &= report(3, "window round-trip", catch_unwind(window_round_trip));
    all &= report(4, "metric oracle", catch_unwind(metric_suite));
    all &= report(5, "composition oracle", catch_unwind(composition_suite));
    all &= report(6, "baseline comparator", catch_unwind(baseline_suite));
    let fit = catch_unwind(overfit);
    let trained = fit.as_ref().ok().map(|f| f.head.clone());
    all &= report(
        7,
        "overfit experiment",
        Ok(match fit {
            Ok(f) if f.passed => Ok(f.summary),
            Ok(f) => Err(f.summary),
            Err(_) => Err("training panicked".into()),
        }),
    );
    all &= report(8, "identical-input null", catch_unwind(AssertUnwindSafe(|| identical_null(trained.as_ref()))));
    all &= report(9, "determinism", catch_unwind(determinism));
    all &= report(10, "shape ledger", catch_unwind(shape_ledger));
    if !all {
        std::process::exit(1);
    }
}
