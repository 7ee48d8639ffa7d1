//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use gigassl::datagen::{generate, generate_corpus, verify_marginal_equality, GenConfig};
use gigassl::gradcheck;
use gigassl::inference::{average_mil_embed, embed_dataset, embed_slide, save_embeddings, EmbedOptions, EmbeddingMatrix};
use gigassl::numcore::linear::normal_tensor;
use gigassl::numcore::Tensor;
use gigassl::probe::{bootstrap_eval, report_csv, Budget, EvalOptions, LabeledSet, Normalization, ProbeReport};
use gigassl::selftest::{oracle, reorder_and_shift};
use gigassl::seeding;
use gigassl::sparseconv::{submconv_forward_map, Rulebook};
use gigassl::sparsemap::{augment_sparse_map, SlideAugParams, SparseMap};
use gigassl::ssl::{nt_xent, pretrain, EmbeddingBank, Model, PretrainPaths, TrainConfig, Trainer};
use rand::SeedableRng;

const CORPUS_SEED: u64 = 0;
const TRAIN_EPOCHS: usize = 200;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, start: Instant, detail: String) -> Outcome {
    let took = start.elapsed();
    ensure(took < limit, format!("{detail}; {:.1}s (limit {}s)", took.as_secs_f64(), limit.as_secs()))
}

fn a1_gradients() -> Outcome {
    let start = Instant::now();
    let checks = gradcheck::run(20, 1).map_err(|e| e.to_string())?;
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = checks.iter().filter(|c| !(c.passed() && c.instances >= 20)).map(|c| c.layer).collect();
    let layers: Vec<&str> = checks.iter().map(|c| c.layer).collect();
    if !failed.is_empty() {
        return Err(format!("layers over 1e-4: {failed:?}"));
    }
    within(
        Duration::from_secs(120),
        start,
        format!("{} layers {layers:?}, 20 instances each, worst rel error {worst:.2e}", checks.len()),
    )
}

fn a2_dense_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = seeding::Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let n_sites = 10 + k % 60;
        let m = oracle::random_map(&mut rng, 16, n_sites, 4);
        let w = normal_tensor(&[3, 3, 4, 5], 1.0, &mut rng);
        let b = normal_tensor(&[5], 1.0, &mut rng);
        let rb = Rulebook::build(&m, 3).map_err(|e| e.to_string())?;
        let y = submconv_forward_map(&m, &w, &b, &rb).map_err(|e| e.to_string())?;
        let dense = oracle::dense_conv_at_sites(&m, &w, &b);
        worst = y.features().iter().zip(&dense).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    if worst > 1e-6 {
        return Err(format!("max abs error {worst:.3e}"));
    }
    within(Duration::from_secs(30), start, format!("100 maps in a 16×16 window, max abs error {worst:.2e}"))
}

fn a3_nt_xent() -> Outcome {
    let run = |rows: usize, data: Vec<f64>, tau: f64| -> Result<f64, String> {
        let z = Tensor::matrix(rows, data.len() / rows, data).map_err(|e| e.to_string())?;
        nt_xent(&z, tau).map(|r| r.0).map_err(|e| e.to_string())
    };
    let single = run(2, vec![0.3, -1.0, 2.0, 0.5], 0.5)?;
    let identical = run(4, [1.0, 2.0, 3.0].repeat(4), 0.7)?;
    let e = std::f64::consts::E;
    let orth = run(4, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0], 1.0)?;
    let expected_orth = ((e + 2.0) / e).ln();
    ensure(
        single == 0.0 && (identical - 3f64.ln()).abs() <= 1e-9 && (orth - expected_orth).abs() <= 1e-9,
        format!(
            "B=1 {single:e}; identical {identical:.12} vs ln3; orthogonal {orth:.12} vs {expected_orth:.12}"
        ),
    )
}

fn small_embedding_setup() -> Result<(Model, Vec<EmbeddingBank>), String> {
    let gen = GenConfig {
        n_slides: 6,
        n_tiles: 40,
        n_augs: 2,
        ..GenConfig::compact(4)
    };
    let banks = generate(&gen).map_err(|e| e.to_string())?.banks();
    let cfg = TrainConfig {
        block_channels: vec![16, 16],
        out_dim: 16,
        proj_dim: 16,
        seed: 4,
        ..TrainConfig::default()
    };
    Ok((Model::for_training(&cfg, gen.feat_dim).map_err(|e| e.to_string())?, banks))
}

fn a4_invariances() -> Outcome {
    let (model, banks) = small_embedding_setup()?;
    let mut perm_exact = true;
    let (mut shift_err, mut norm_err): (f64, f64) = (0.0, 0.0);
    for (k, bank) in banks.iter().enumerate() {
        let embed = |b: &EmbeddingBank| {
            let mut rng = seeding::Rng::seed_from_u64(k as u64);
            embed_slide(b, &model, 5, 10, 224, &mut rng).map(|e| e.vector).map_err(|e| e.to_string())
        };
        let base = embed(bank)?;
        norm_err = norm_err.max((base.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs());
        let mut order: Vec<usize> = (0..bank.n_tiles()).collect();
        order.rotate_left(7);
        order.reverse();
        perm_exact &= embed(&reorder_and_shift(bank, &order, 0).map_err(|e| e.to_string())?)? == base;
        let ident: Vec<usize> = (0..bank.n_tiles()).collect();
        let shifted = embed(&reorder_and_shift(bank, &ident, 2240).map_err(|e| e.to_string())?)?;
        shift_err = shifted.iter().zip(&base).map(|(a, b)| (a - b).abs()).fold(shift_err, f64::max);
    }

    let mut rng = seeding::Rng::seed_from_u64(44);
    let mut aug_ok = true;
    for _ in 0..100 {
        let m = oracle::random_map(&mut rng, 12, 15, 3);
        let (mi, mj) = m.sites().iter().fold((i64::MAX, i64::MAX), |a, s| (a.0.min(s.0), a.1.min(s.1)));
        let m: SparseMap = m.translated(-mi, -mj).map_err(|e| e.to_string())?;
        let aug = |x: &SparseMap, p: &SlideAugParams| augment_sparse_map(x, p).map_err(|e| e.to_string());
        let quarter = SlideAugParams {
            rot_quarters: 1,
            ..SlideAugParams::IDENTITY
        };
        let flips = SlideAugParams {
            flip_x: true,
            flip_y: true,
            ..SlideAugParams::IDENTITY
        };
        let mut r = m.clone();
        for _ in 0..4 {
            r = aug(&r, &quarter)?;
        }
        aug_ok &= aug(&m, &SlideAugParams::IDENTITY)? == m && r == m && aug(&aug(&m, &flips)?, &flips)? == m;
    }
    ensure(
        perm_exact && shift_err <= 1e-9 && norm_err <= 1e-6 && aug_ok,
        format!(
            "permutation bit-exact {perm_exact}; +2240px shift max diff {shift_err:.2e}; |norm-1| {norm_err:.2e}; \
             identity/4 quarter turns/double flip identities {aug_ok}"
        ),
    )
}

fn labels_map(banks: &[EmbeddingBank], labels: &[usize]) -> BTreeMap<String, String> {
    banks.iter().zip(labels).map(|(b, y)| (b.slide_id.clone(), y.to_string())).collect()
}

fn probe(m: &EmbeddingMatrix, labels: &BTreeMap<String, String>, opts: &EvalOptions) -> Result<ProbeReport, String> {
    let set = LabeledSet::from_embeddings(m, labels).map_err(|e| e.to_string())?;
    bootstrap_eval(&set, opts).map_err(|e| e.to_string())
}

fn embed_all(banks: &[EmbeddingBank], model: &Model, views: usize, seed: u64) -> Result<EmbeddingMatrix, String> {
    let mut data = Vec::new();
    let mut dim = 0;
    for b in banks {
        let mut rng = seeding::rng(seed, seeding::hash_str(&b.slide_id));
        let e = embed_slide(b, model, 5, views, 224, &mut rng).map_err(|e| e.to_string())?;
        dim = e.vector.len();
        data.extend(e.vector);
    }
    Ok(EmbeddingMatrix {
        ids: banks.iter().map(|b| b.slide_id.clone()).collect(),
        dim,
        data,
    })
}

fn train(banks: &[EmbeddingBank], shared_aug: bool, in_channels: usize) -> Result<Model, String> {
    let cfg = TrainConfig {
        epochs: TRAIN_EPOCHS,
        shared_aug,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(cfg, in_channels).map_err(|e| e.to_string())?;
    t.run(banks).map_err(|e| e.to_string())?;
    Ok(t.model)
}

/// State shared by the end-to-end criteria.
struct EndToEnd {
    banks: Vec<EmbeddingBank>,
    labels: BTreeMap<String, String>,
    gen: GenConfig,
    shared: Option<Model>,
    giga: Option<EmbeddingMatrix>,
    giga_auc: Option<f64>,
}

fn a5_separation(st: &mut EndToEnd) -> Outcome {
    let start = Instant::now();
    let stat = verify_marginal_equality(&st.banks, &labels_vec(st)).map_err(|e| e.to_string())?;
    let avg = EmbeddingMatrix {
        ids: st.banks.iter().map(|b| b.slide_id.clone()).collect(),
        dim: st.gen.feat_dim,
        data: st
            .banks
            .iter()
            .map(average_mil_embed)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?
            .concat(),
    };
    let avg_auc = probe(&avg, &st.labels, &EvalOptions::default().with_normalization(Normalization::StandardScale))?.mean;
    let model = train(&st.banks, true, st.gen.feat_dim)?;
    let giga = embed_all(&st.banks, &model, 50, 1)?;
    let giga_auc = probe(&giga, &st.labels, &EvalOptions::default().with_normalization(Normalization::L2Unit))?.mean;
    st.shared = Some(model);
    st.giga = Some(giga);
    st.giga_auc = Some(giga_auc);
    let detail = format!(
        "marginal statistic {stat:.3} (< 3.0); AverageMIL AUC {avg_auc:.4} (<= 0.60); SSL AUC {giga_auc:.4} (>= 0.85)"
    );
    if !(stat < 3.0 && avg_auc <= 0.60 && giga_auc >= 0.85) {
        return Err(detail);
    }
    within(Duration::from_secs(600), start, detail)
}

fn labels_vec(st: &EndToEnd) -> Vec<usize> {
    st.banks.iter().map(|b| st.labels[&b.slide_id].parse().expect("numeric label")).collect()
}

fn a6_shared_ablation(st: &EndToEnd) -> Outcome {
    let shared_auc = st.giga_auc.ok_or("needs the A5 model")?;
    let model = train(&st.banks, false, st.gen.feat_dim)?;
    let m = embed_all(&st.banks, &model, 50, 1)?;
    let not_shared = probe(&m, &st.labels, &EvalOptions::default())?.mean;
    ensure(
        st.gen.nuisance_strength > 0.0 && shared_auc - not_shared >= 0.03,
        format!(
            "nuisance norm {}; shared AUC {shared_auc:.4} vs not-shared {not_shared:.4} (gap {:.4}, need >= 0.03)",
            st.gen.nuisance_strength,
            shared_auc - not_shared
        ),
    )
}

fn a7_ensembling(st: &EndToEnd) -> Outcome {
    let model = st.shared.as_ref().ok_or("needs the A5 model")?;
    let r50_auc = st.giga_auc.ok_or("needs the A5 model")?;
    let r1 = embed_all(&st.banks, model, 1, 1)?;
    let r1_auc = probe(&r1, &st.labels, &EvalOptions::default())?.mean;
    // Spread of each slide's embedding over embedding seeds, averaged over
    // slides.
    let spread = |views: usize| -> Result<f64, String> {
        let runs = (10..15).map(|s| embed_all(&st.banks, model, views, s)).collect::<Result<Vec<_>, _>>()?;
        let n = runs.len() as f64;
        let len = runs[0].data.len();
        let mut total = 0.0;
        for k in 0..len {
            let mean = runs.iter().map(|r| r.data[k]).sum::<f64>() / n;
            total += runs.iter().map(|r| (r.data[k] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        }
        Ok(total / st.banks.len() as f64)
    };
    let (v1, v50) = (spread(1)?, spread(50)?);
    ensure(
        r50_auc >= r1_auc && v50 < v1,
        format!("AUC R=50 {r50_auc:.4} vs R=1 {r1_auc:.4}; embedding variance across seeds R=1 {v1:.3e} -> R=50 {v50:.3e}"),
    )
}

fn a8_budgets(st: &EndToEnd, out_dir: &Path) -> Outcome {
    let giga = st.giga.as_ref().ok_or("needs the A5 embeddings")?;
    let set = LabeledSet::from_embeddings(giga, &st.labels).map_err(|e| e.to_string())?;
    let totals: Vec<usize> = (0..set.classes()).map(|c| set.labels.iter().filter(|&&y| y == c).count()).collect();
    let n = set.len() as f64;
    let mut reports = Vec::new();
    let mut sizes = Vec::new();
    for budget in ["all", "0.25", "100", "50"] {
        let budget: Budget = budget.parse().map_err(|e: gigassl::Error| e.to_string())?;
        let r = bootstrap_eval(&set, &EvalOptions { budget, ..EvalOptions::default() }).map_err(|e| e.to_string())?;
        for s in &r.splits {
            let size: usize = s.train_counts.iter().sum();
            let expected = match budget {
                Budget::Count(k) => Some(k),
                _ => None,
            };
            if expected.is_some_and(|k| k != size) {
                return Err(format!("budget {budget}: trained on {size} rows"));
            }
            for (c, &got) in s.train_counts.iter().enumerate() {
                let ideal = size as f64 * totals[c] as f64 / n;
                if (got as f64 - ideal).abs() > 1.0 {
                    return Err(format!("budget {budget}: class {c} has {got} rows, ideal {ideal:.2}"));
                }
            }
        }
        sizes.push(format!("{budget}:{}", r.splits[0].train_counts.iter().sum::<usize>()));
        reports.push(r);
    }
    let csv = report_csv("spatial", &reports);
    let path = out_dir.join("budgets.csv");
    fs::write(&path, &csv).map_err(|e| e.to_string())?;
    let rows = csv.lines().count() - 1;
    ensure(
        rows == 4 * (10 + 2),
        format!(
            "train sizes {sizes:?}, class ratio within ±1 on every split; {rows} report rows in {}",
            path.display()
        ),
    )
}

fn pipeline(dir: &Path) -> Result<(), String> {
    let s = |e: gigassl::Error| e.to_string();
    let gen = GenConfig {
        n_slides: 12,
        n_augs: 6,
        ..GenConfig::compact(21)
    };
    let banks = dir.join("banks");
    let corpus = generate_corpus(&gen, &banks).map_err(s)?;
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        block_channels: vec![16, 16],
        out_dim: 16,
        proj_dim: 16,
        seed: 21,
        ..TrainConfig::default()
    };
    let paths = PretrainPaths {
        bank_dir: banks.clone(),
        checkpoint: dir.join("model.ckpt"),
        log: Some(dir.join("loss.csv")),
        report: Some(dir.join("train.json")),
        resume: None,
    };
    pretrain(&cfg, &paths).map_err(s)?;
    let (model, _) = Model::load(&paths.checkpoint).map_err(s)?;
    let opts = EmbedOptions {
        tiles: 5,
        views: 10,
        downsample: 224,
        seed: 21,
        average_mil: false,
    };
    let emb = embed_dataset(&banks, Some(&model), &opts).map_err(s)?;
    save_embeddings(&emb.matrix, &dir.join("emb.gse")).map_err(s)?;
    let labels = labels_map(&corpus.banks(), &corpus.labels());
    let r = probe(&emb.matrix, &labels, &EvalOptions { splits: 4, ..EvalOptions::default() })?;
    fs::write(dir.join("report.csv"), report_csv("det", &[r])).map_err(|e| e.to_string())
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).expect("readable dir") {
        let p = entry.expect("dir entry").path();
        if p.is_dir() {
            let name = p.file_name().unwrap().to_string_lossy().to_string();
            out.extend(files(&p).into_iter().map(|(n, b)| (format!("{name}/{n}"), b)));
        } else {
            out.push((p.file_name().unwrap().to_string_lossy().to_string(), fs::read(&p).expect("readable file")));
        }
    }
    out.sort();
    out
}

fn a9_determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    pipeline(a.path())?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().map_err(|e| e.to_string())?;
    pool.install(|| pipeline(b.path()))?;
    let (fa, fb) = (files(a.path()), files(b.path()));
    let kinds = ["gsb", "gse", "ckpt", "csv"];
    let covered = kinds.iter().all(|k| fa.iter().any(|(n, _)| n.ends_with(k)));
    let differing: Vec<&str> = fa.iter().zip(&fb).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    ensure(
        covered && fa.len() == fb.len() && differing.is_empty(),
        format!("{} files compared (.gsb, .gse, checkpoint, logs, report); differing {differing:?}", fa.len()),
    )
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |id: &'static str, outcome: Outcome| {
        match &outcome {
            Ok(d) => println!("{id} PASS  {d}"),
            Err(d) => println!("{id} FAIL  {d}"),
        }
        results.push((id, outcome));
    };
    report("A1", a1_gradients());
    report("A2", a2_dense_oracle());
    report("A3", a3_nt_xent());
    report("A4", a4_invariances());

    let gen = GenConfig::compact(CORPUS_SEED);
    let mut st = match generate(&gen) {
        Ok(c) => EndToEnd {
            labels: labels_map(&c.banks(), &c.labels()),
            banks: c.banks(),
            gen,
            shared: None,
            giga: None,
            giga_auc: None,
        },
        Err(e) => {
            println!("corpus generation failed: {e}");
            return ExitCode::FAILURE;
        }
    };
    report("A5", a5_separation(&mut st));
    report("A6", a6_shared_ablation(&st));
    report("A7", a7_ensembling(&st));
    let out = tempfile::tempdir().expect("temp dir");
    report("A8", a8_budgets(&st, out.path()));
    report("A9", a9_determinism());

    let failed = results.iter().filter(|(_, r)| r.is_err()).count();
    println!(
        "acceptance: {} passed, {failed} failed in {:.1}s",
        results.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
