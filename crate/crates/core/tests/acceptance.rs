//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs the desk-scale training sweep, so expect about
//! half an hour on a single core.
//!
//! `FTWA_ACCEPTANCE=1,2,3` restricts the run to the listed criteria.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use ftwa::backbone::{Backbone, BackboneConfig, FeatureMap, Stream, StreamTag, HR_ENCODER, LR_ENCODER, REID_ENCODER};
use ftwa::dataset::{build_mlr_split, generate_synthetic_corpus, MlrConfig, MlrSplit};
use ftwa::eval::{cmc_from_distances, evaluate_model, EvalOptions};
use ftwa::gradcheck::{run_gradcheck, GradcheckOptions};
use ftwa::model::{Model, ModelConfig, Variant};
use ftwa::nn::ParamStore;
use ftwa::raft::{channel_split, Raft, RaftConfig, RAFT_NAMESPACE};
use ftwa::swa::{
    cls_loss, gap, scalar, swa_cls_loss, swa_triplet_loss, triplet_loss, TripletMining, WeightedPair,
};
use ftwa::trainer::{train, RunOutput, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed, detail: detail.into() }
}

fn t(v: &[f64]) -> Tensor {
    Tensor::new(v, &Device::Cpu).unwrap()
}

fn s(x: f64) -> Tensor {
    Tensor::new(x, &Device::Cpu).unwrap()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let results = run_gradcheck(&GradcheckOptions::default()).unwrap();
    let elapsed = start.elapsed();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let all = results.iter().all(|r| r.passed) && results.len() == 6;
    let names: Vec<_> = results.iter().map(|r| format!("{}={:.1e}", r.loss.key(), r.max_rel_error)).collect();
    verdict(
        all && worst < 1e-4 && elapsed < Duration::from_secs(60),
        format!("max rel err {worst:.2e} [{}] in {:.1}s", names.join(" "), elapsed.as_secs_f64()),
    )
}

fn cls_value(w: [f64; 4], l: [f64; 4]) -> f64 {
    let (a, b, c, d) = (t(&[w[0]]), t(&[w[1]]), t(&[w[2]]), t(&[w[3]]));
    let (la, lb, lc, ld) = (t(&[l[0]]), t(&[l[1]]), t(&[l[2]]), t(&[l[3]]));
    let hr = WeightedPair { w_real: &a, l_real: &la, w_synth: &b, l_synth: &lb };
    let lr = WeightedPair { w_real: &c, l_real: &lc, w_synth: &d, l_synth: &ld };
    scalar(&swa_cls_loss(&hr, &lr).unwrap()).unwrap()
}

fn tri_value(w: [f64; 4], a: f64, b: f64) -> f64 {
    scalar(&swa_triplet_loss(&s(w[0]), &s(w[1]), &s(w[2]), &s(w[3]), &s(a), &s(b)).unwrap()).unwrap()
}

fn loss_algebra() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut note = |err: f64| worst = worst.max(err);
    for _ in 0..500 {
        let w: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.01..1.0));
        let l: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..10.0));
        let c = rng.random_range(0.1..10.0);
        let x = w[0];

        note((cls_value([x; 4], l) - ((l[0] + l[1]) / 2.0 + (l[2] + l[3]) / 2.0)).abs());
        note((tri_value([x; 4], l[0], l[1]) - (l[0] + l[1]) / 2.0).abs());

        let base = cls_value(w, l);
        note((cls_value([c * w[0], c * w[1], w[2], w[3]], l) - base).abs());
        note((cls_value([w[0], w[1], c * w[2], c * w[3]], l) - base).abs());
        let tri = tri_value(w, l[0], l[1]);
        note((tri_value(w.map(|v| v * c), l[0], l[1]) - tri).abs());

        let first = cls_value([w[0], w[1], 1.0, 1.0], [l[0], l[1], 0.0, 0.0]);
        note((l[0].min(l[1]) - first).max(0.0));
        note((first - l[0].max(l[1])).max(0.0));
    }
    for n in [4usize, 6, 8] {
        let v = Tensor::full(0.7f64, (n, 6), &Device::Cpu).unwrap();
        let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
        for mining in [TripletMining::BatchAll, TripletMining::BatchHard] {
            note((scalar(&triplet_loss(&v, &y, 0.3, mining).unwrap().loss).unwrap() - 0.3).abs());
        }
    }
    verdict(worst <= 1e-10, format!("worst deviation {worst:.2e} over 500 draws"))
}

fn brute_force_triplet(v: &[Vec<f64>], y: &[usize], m: f64) -> Option<f64> {
    let n = v.len();
    let (mut sum, mut count) = (0.0, 0usize);
    for a in 0..n {
        for p in 0..n {
            for q in 0..n {
                if a != p && y[a] == y[p] && y[a] != y[q] {
                    sum += (m + euclid(&v[a], &v[p]) - euclid(&v[a], &v[q])).max(0.0);
                    count += 1;
                }
            }
        }
    }
    (count > 0).then(|| sum / count as f64)
}

fn oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut triplet_mismatch = 0;
    for _ in 0..200 {
        let (n, d) = (rng.random_range(2..=8), rng.random_range(1..=4));
        let v: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let m = rng.random_range(0.0..1.0);
        let out = triplet_loss(&Tensor::new(v.clone(), &Device::Cpu).unwrap(), &y, m, TripletMining::BatchAll).unwrap();
        let got = scalar(&out.loss).unwrap();
        let ok = match brute_force_triplet(&v, &y, m) {
            None => out.degenerate && got == 0.0,
            Some(e) => !out.degenerate && (got - e).abs() < 1e-9,
        };
        triplet_mismatch += usize::from(!ok);
    }
    let mut cmc_mismatch = 0;
    for _ in 0..100 {
        let rows: Vec<Vec<f64>> = (0..10).map(|_| (0..10).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let ids: Vec<u32> = (0..10).collect();
        let r = cmc_from_distances(&rows, &ids, &ids, 1, 0).unwrap();
        let ranks: Vec<usize> = rows
            .iter()
            .enumerate()
            .map(|(q, row)| 1 + row.iter().enumerate().filter(|&(g, &d)| g != q && d <= row[q]).count())
            .collect();
        let expected = [1usize, 5, 10, 20].map(|k| ranks.iter().filter(|&&x| x <= k).count() as f64 / 10.0);
        cmc_mismatch += usize::from(r.ranks() != expected);
    }
    verdict(
        triplet_mismatch == 0 && cmc_mismatch == 0,
        format!("triplet mismatches {triplet_mismatch}/200, CMC mismatches {cmc_mismatch}/100"),
    )
}

fn max_abs(t: &Tensor) -> f64 {
    t.abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn structure() -> Verdict {
    let start = Instant::now();
    let mut failures = Vec::new();
    let cfg = BackboneConfig::tiny();
    let (c, h, w) = cfg.output_shape();

    let xs = Tensor::randn(0f32, 1.0, (2, c, h, w), &Device::Cpu).unwrap();
    let fm = FeatureMap::new(xs.clone(), StreamTag::Lr).unwrap();
    let (a, b) = channel_split(&fm).unwrap();
    if max_abs(&(Tensor::cat(&[&a.values, &b.values], 1).unwrap() - &xs).unwrap()) != 0.0 {
        failures.push("split round trip");
    }

    let model = Model::new(ModelConfig::new(Variant::Ftwa, cfg.clone(), 4), 0, DType::F32, &Device::Cpu).unwrap();
    let out = model.raft().unwrap().forward(&fm).unwrap();
    if out.values.dims() != [2, c, h, w] {
        failures.push("RAFT shape");
    }
    let backbone = [HR_ENCODER, LR_ENCODER, REID_ENCODER].iter().map(|ns| model.param_count(Some(ns))).sum::<usize>();
    let ratio = model.param_count(Some(RAFT_NAMESPACE)) as f64 / backbone as f64;
    let paper_store = ParamStore::new(0, DType::F32, Device::Cpu);
    let paper = BackboneConfig::paper_scale();
    Backbone::new(&paper, true, &paper_store.root()).unwrap();
    Raft::new(RaftConfig::for_backbone(paper.embedding_dim()), &paper_store.root().pp(RAFT_NAMESPACE)).unwrap();
    let paper_ratio = paper_store.param_count(Some(RAFT_NAMESPACE)) as f64
        / [HR_ENCODER, LR_ENCODER, REID_ENCODER].iter().map(|ns| paper_store.param_count(Some(ns))).sum::<usize>() as f64;
    if ratio > 0.10 || paper_ratio > 0.10 {
        failures.push("parameter ratio");
    }

    let all = model.store().all();
    let ids = |ns: &str| {
        all.iter()
            .filter(|(k, _)| k.starts_with(&format!("{ns}.")))
            .map(|(_, v)| v.as_tensor().id())
            .collect::<Vec<_>>()
    };
    let (eh, el) = (ids(HR_ENCODER), ids(LR_ENCODER));
    if eh.is_empty() || eh.iter().any(|id| el.contains(id)) {
        failures.push("encoder disjointness");
    }

    let img = Tensor::randn(0f32, 1.0, (4, 3, 64, 32), &Device::Cpu).unwrap();
    let y = [0usize, 1, 2, 3];
    let heads = model.heads();
    let reached = |grads: &candle_core::backprop::GradStore, ns: &str| {
        model
            .store()
            .trainable()
            .iter()
            .filter(|(k, _)| k.starts_with(&format!("{ns}.")))
            .any(|(_, v)| grads.get(v.as_tensor()).is_some_and(|g| max_abs(g) > 0.0))
    };
    let v_hr = gap(&model.backbone().encode_tensor(&img, Stream::Hr, true).unwrap()).unwrap();
    let hr_loss = cls_loss(&heads.classify(&v_hr, Stream::Hr).unwrap(), &y).unwrap().mean_all().unwrap();
    let g = hr_loss.backward().unwrap();
    if !reached(&g, HR_ENCODER) || reached(&g, LR_ENCODER) || reached(&g, RAFT_NAMESPACE) {
        failures.push("HR routing");
    }
    let f_lr = model.backbone().encode_tensor(&img, Stream::Lr, true).unwrap();
    let v_fake = gap(&model.raft().unwrap().transform(&f_lr).unwrap()).unwrap();
    let lr_loss = (cls_loss(&heads.classify(&gap(&f_lr).unwrap(), Stream::Lr).unwrap(), &y).unwrap().mean_all().unwrap()
        + cls_loss(&heads.classify(&v_fake, Stream::Hr).unwrap(), &y).unwrap().mean_all().unwrap())
    .unwrap();
    let g = lr_loss.backward().unwrap();
    if !reached(&g, LR_ENCODER) || !reached(&g, RAFT_NAMESPACE) || reached(&g, HR_ENCODER) {
        failures.push("LR routing");
    }

    let elapsed = start.elapsed();
    if elapsed >= Duration::from_secs(30) {
        failures.push("runtime");
    }
    verdict(
        failures.is_empty(),
        format!(
            "RAFT/backbone {:.3} (TINY), {:.3} (PAPER_SCALE); {:.1}s{}",
            ratio,
            paper_ratio,
            elapsed.as_secs_f64(),
            if failures.is_empty() { String::new() } else { format!("; failed: {}", failures.join(", ")) }
        ),
    )
}

fn desk_split() -> MlrSplit {
    let records = generate_synthetic_corpus(20, 2, 4, 7).unwrap();
    build_mlr_split(&records, &MlrConfig::new([1], 7)).unwrap()
}

struct RunResult {
    rank1: f64,
    elapsed: Duration,
}

fn desk_run(split: &MlrSplit, variant: Variant, seed: u64, dir: &Path) -> RunResult {
    let start = Instant::now();
    let cfg = TrainConfig { variant, seed, deterministic: true, ..TrainConfig::desk() };
    let out = RunOutput { dir: dir.to_path_buf(), progress: false };
    let outcome = train(&cfg, &split.train, Some(&out)).unwrap();
    let eval = evaluate_model(&outcome.model, &split.query, &split.gallery, &EvalOptions::default()).unwrap();
    RunResult { rank1: eval.cmc.rank1, elapsed: start.elapsed() }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let only: Option<Vec<u32>> = std::env::var("FTWA_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut verdicts: BTreeMap<u32, (&str, Verdict)> = BTreeMap::new();
    let mut report = |n: u32, name: &'static str, v: Verdict| {
        println!("criterion {n} {:<22} {} ({})", name, if v.passed { "PASS" } else { "FAIL" }, v.detail);
        verdicts.insert(n, (name, v));
    };

    if wanted(1) {
        report(1, "gradient verification", gradients());
    }
    if wanted(2) {
        report(2, "loss algebra", loss_algebra());
    }
    if wanted(3) {
        report(3, "oracle equivalence", oracles());
    }
    if wanted(4) {
        report(4, "structural audit", structure());
    }

    if wanted(5) || wanted(6) || wanted(7) {
        let split = desk_split();
        let root = tempfile::tempdir().unwrap();
        let run_dir = |v: Variant, seed: u64| root.path().join(format!("{}-{seed}", v.key()));
        let seeds = [0u64, 1, 2];
        let variants: Vec<Variant> = if wanted(6) { Variant::ALL.to_vec() } else { vec![Variant::Ftwa] };
        let seeds: &[u64] = if wanted(6) { &seeds } else { &seeds[..1] };
        let start = Instant::now();
        let mut scores: BTreeMap<Variant, Vec<f64>> = BTreeMap::new();
        let mut ftwa_seed0 = None;
        for &variant in &variants {
            for &seed in seeds {
                let r = desk_run(&split, variant, seed, &run_dir(variant, seed));
                eprintln!("  {} seed {seed}: rank-1 {:.1}% in {:.0}s", variant.label(), 100.0 * r.rank1, r.elapsed.as_secs_f64());
                if variant == Variant::Ftwa && seed == 0 {
                    ftwa_seed0 = Some((r.rank1, r.elapsed));
                }
                scores.entry(variant).or_default().push(r.rank1);
            }
        }
        let sweep = start.elapsed();

        if wanted(5) {
            let (rank1, elapsed) = ftwa_seed0.unwrap();
            report(
                5,
                "end-to-end overfit",
                verdict(
                    rank1 >= 0.90 && elapsed < Duration::from_secs(600),
                    format!("FTWA rank-1 {:.1}% in {:.0}s", 100.0 * rank1, elapsed.as_secs_f64()),
                ),
            );
        }
        if wanted(6) {
            let m = |v: Variant| 100.0 * mean(&scores[&v]);
            let (base, r, full) = (m(Variant::Baseline), m(Variant::FtwaR), m(Variant::Ftwa));
            report(
                6,
                "ablation ordering",
                verdict(
                    r - base >= 10.0 && full >= r - 2.0 && sweep < Duration::from_secs(45 * 60),
                    format!(
                        "mean rank-1 Baseline {base:.1}, FTWA_B {:.1}, FTWA_R {r:.1}, FTWA {full:.1}; {:.1} min",
                        m(Variant::FtwaB),
                        sweep.as_secs_f64() / 60.0
                    ),
                ),
            );
        }
        if wanted(7) {
            let again = root.path().join("repeat");
            desk_run(&split, Variant::Ftwa, 0, &again);
            let a = std::fs::read(run_dir(Variant::Ftwa, 0).join("metrics.csv")).unwrap();
            let b = std::fs::read(again.join("metrics.csv")).unwrap();
            report(
                7,
                "determinism",
                verdict(!a.is_empty() && a == b, format!("metrics CSVs of {} bytes, identical: {}", a.len(), a == b)),
            );
        }
    }

    let failed: Vec<String> = verdicts
        .iter()
        .filter(|(_, (_, v))| !v.passed)
        .map(|(n, (name, _))| format!("{n} ({name})"))
        .collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", verdicts.len());
    } else {
        println!("acceptance: FAILED {}", failed.join(", "));
        std::process::exit(1);
    }
}
