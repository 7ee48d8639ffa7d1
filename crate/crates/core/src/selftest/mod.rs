//! Property suites runnable from the command line.

pub mod oracle;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use crate::datagen::{generate, GenConfig};
use crate::error::Result;
use crate::inference::embed_slide;
use crate::numcore::linear::normal_tensor;
use crate::numcore::{adam_step, AdamConfig, ParamStore, Tensor};
use crate::probe::{auc, fit_logistic, fit_logistic_from, FitOptions};
use crate::seeding;
use crate::sparseconv::{submconv_forward_map, Rulebook};
use crate::sparsemap::{augment_sparse_map, build_sparse_map_with_counts, SlideAugParams, TileRecord};
use crate::ssl::{nt_xent, EmbeddingBank, Model, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match f() {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn rulebook_matches_scan(rng: &mut seeding::Rng) -> Result<(bool, String)> {
    for _ in 0..50 {
        let m = oracle::random_map(rng, 6, 20, 1);
        let rb = Rulebook::build(&m, 3)?;
        let mut got: Vec<(usize, usize, usize)> = (0..rb.n_offsets())
            .flat_map(|o| rb.pairs(o).iter().map(move |&(i, j)| (i, j, o)))
            .collect();
        got.sort_unstable();
        if got != oracle::neighbour_triples(&m, 3) {
            return Ok((false, "pair sets differ".into()));
        }
    }
    Ok((true, "50 maps".into()))
}

fn conv_matches_dense(rng: &mut seeding::Rng) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..60);
        let m = oracle::random_map(rng, 16, n, 3);
        let w = normal_tensor(&[3, 3, 3, 4], 1.0, rng);
        let b = normal_tensor(&[4], 1.0, rng);
        let y = submconv_forward_map(&m, &w, &b, &Rulebook::build(&m, 3)?)?;
        let dense = oracle::dense_conv_at_sites(&m, &w, &b);
        worst = y.features().iter().zip(&dense).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    Ok((worst <= 1e-6, format!("max abs error {worst:.3e} over 100 maps")))
}

fn augmentation_identities(rng: &mut seeding::Rng) -> Result<(bool, String)> {
    for _ in 0..50 {
        let m = oracle::random_map(rng, 8, 10, 2);
        let m = m.translated(-m.sites().iter().map(|s| s.0).min().unwrap_or(0), -m.sites().iter().map(|s| s.1).min().unwrap_or(0))?;
        if augment_sparse_map(&m, &SlideAugParams::IDENTITY)? != m {
            return Ok((false, "identity parameters changed the map".into()));
        }
        let rot = SlideAugParams {
            rot_quarters: 1,
            ..SlideAugParams::IDENTITY
        };
        let mut r = m.clone();
        for _ in 0..4 {
            r = augment_sparse_map(&r, &rot)?;
        }
        let flip = SlideAugParams {
            flip_x: true,
            flip_y: true,
            ..SlideAugParams::IDENTITY
        };
        let f = augment_sparse_map(&augment_sparse_map(&m, &flip)?, &flip)?;
        if r != m || f != m {
            return Ok((false, "four quarter turns or a double flip is not the identity".into()));
        }
    }
    Ok((true, "50 maps".into()))
}

fn merge_conserves_mass(rng: &mut seeding::Rng) -> Result<(bool, String)> {
    for _ in 0..50 {
        let tiles: Vec<TileRecord> = (0..20)
            .map(|_| TileRecord::new(rng.random_range(0..1000), rng.random_range(0..1000), vec![rng.random_range(-1.0..1.0)]))
            .collect();
        let (m, counts) = build_sparse_map_with_counts(&tiles, 224)?;
        let merged: f64 = (0..m.len()).map(|k| m.feature(k)[0] * counts[k] as f64).sum();
        let raw: f64 = tiles.iter().map(|t| t.feature[0]).sum();
        if (merged - raw).abs() > 1e-12 * raw.abs().max(1.0) {
            return Ok((false, format!("mass {merged} vs {raw}")));
        }
    }
    Ok((true, "50 tile sets".into()))
}

fn nt_xent_closed_forms() -> Result<(bool, String)> {
    let single = nt_xent(&Tensor::matrix(2, 2, vec![1.0, 2.0, -3.0, 1.0])?, 0.5)?.0;
    let same = nt_xent(&Tensor::matrix(4, 2, [0.6, 0.8].repeat(4))?, 0.5)?.0;
    let orth = nt_xent(&Tensor::matrix(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0])?, 1.0)?.0;
    let e = std::f64::consts::E;
    let ok = single == 0.0 && (same - 3f64.ln()).abs() < 1e-9 && (orth - ((e + 2.0) / e).ln()).abs() < 1e-9;
    Ok((ok, format!("B=1 {single}, identical {same:.12}, orthogonal {orth:.12}")))
}

fn nt_xent_scale_invariance(rng: &mut seeding::Rng) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let z = normal_tensor(&[8, 5], 1.0, rng);
        let c = rng.random_range(0.01..100.0);
        let (a, _) = nt_xent(&z, 0.5)?;
        let (b, _) = nt_xent(&z.map(|v| v * c), 0.5)?;
        worst = worst.max((a - b).abs());
    }
    Ok((worst <= 1e-9, format!("max change {worst:.3e}")))
}

fn auc_properties(rng: &mut seeding::Rng) -> Result<(bool, String)> {
    for _ in 0..100 {
        let n = rng.random_range(2..50);
        let s: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..8u8))).collect();
        let mut y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        y[0] = true;
        y[1] = false;
        let inv: Vec<bool> = y.iter().map(|v| !v).collect();
        let a = auc(&s, &y)?;
        let t: Vec<f64> = s.iter().map(|v| v.powi(3) + 2.0).collect();
        if a + auc(&s, &inv)? != 1.0 || auc(&t, &y)? != a {
            return Ok((false, "complement or monotone invariance violated".into()));
        }
    }
    Ok((true, "100 score sets".into()))
}

fn adam_first_step() -> Result<(bool, String)> {
    let mut store = ParamStore::new();
    store.insert("p", Tensor::vector(vec![0.0]));
    store.accumulate_grad("p", &Tensor::vector(vec![1.0]))?;
    adam_step(&mut store, &AdamConfig::default())?;
    let v = store.value("p").data()[0];
    Ok(((v + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15, format!("first iterate {v:.12e}")))
}

fn logistic_convexity(rng: &mut seeding::Rng) -> Result<(bool, String)> {
    let (n, d) = (80, 4);
    let x = normal_tensor(&[n, d], 1.0, rng).into_data();
    let y: Vec<usize> = (0..n).map(|i| usize::from(x[i * d] + x[i * d + 1] > 0.0)).collect();
    let opts = FitOptions::default();
    let base = fit_logistic(&x, &y, d, 2, &opts)?.loss(&x, &y, opts.l2);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let init = normal_tensor(&[d + 1], 2.0, rng).into_data();
        let l = fit_logistic_from(&x, &y, d, 2, &opts, Some(&init))?.loss(&x, &y, opts.l2);
        worst = worst.max((l - base).abs());
    }
    Ok((worst < 1e-8, format!("max loss gap {worst:.3e} over 5 inits")))
}

fn small_model_and_bank(seed: u64) -> Result<(Model, EmbeddingBank)> {
    let gen = GenConfig {
        n_slides: 4,
        n_tiles: 32,
        n_augs: 2,
        feat_dim: 6,
        nuisance_dims: 2,
        grid_extent: 8 * 256,
        seed,
        ..GenConfig::default()
    };
    let bank = generate(&gen)?.slides.swap_remove(0).bank;
    let cfg = TrainConfig {
        block_channels: vec![8, 8],
        out_dim: 8,
        proj_dim: 8,
        seed,
        ..TrainConfig::default()
    };
    Ok((Model::for_training(&cfg, 6)?, bank))
}

/// Rebuilds a bank with slice-0 tiles listed in another order and every
/// coordinate shifted by `shift` pixels.
pub fn reorder_and_shift(bank: &EmbeddingBank, order: &[usize], shift: i32) -> Result<EmbeddingBank> {
    let mut coords = Vec::new();
    let mut feats = Vec::new();
    for a in 0..bank.n_augs() {
        for t in 0..bank.n_tiles() {
            let src = if a == 0 { order[t] } else { t };
            let (x, y) = bank.coord(a, src);
            coords.push((x + shift, y + shift));
            feats.extend_from_slice(bank.feature(a, src));
        }
    }
    EmbeddingBank::new(bank.slide_id.clone(), bank.n_augs(), bank.n_tiles(), bank.feat_dim(), coords, feats)
}

fn embedding_invariances(rng: &mut seeding::Rng) -> Result<(bool, String)> {
    let (model, bank) = small_model_and_bank(3)?;
    let e = |b: &EmbeddingBank| embed_slide(b, &model, 5, 10, 224, &mut seeding::Rng::seed_from_u64(17)).map(|s| s.vector);
    let base = e(&bank)?;
    let norm = base.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut order: Vec<usize> = (0..bank.n_tiles()).collect();
    order.shuffle(rng);
    let permuted = e(&reorder_and_shift(&bank, &order, 0)?)?;
    let shifted = e(&reorder_and_shift(&bank, &(0..bank.n_tiles()).collect::<Vec<_>>(), 2240)?)?;
    let shift_err = base.iter().zip(&shifted).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let ok = permuted == base && shift_err <= 1e-9 && (norm - 1.0).abs() <= 1e-6;
    Ok((ok, format!("norm {norm:.9}, permutation exact {}, translation error {shift_err:.1e}", permuted == base)))
}

/// Runs every property suite.
pub fn run_all(seed: u64) -> Vec<Check> {
    let mut rng = seeding::Rng::seed_from_u64(seed);
    vec![
        check("rulebook_matches_neighbour_scan", || rulebook_matches_scan(&mut rng)),
        check("submconv_matches_dense_convolution", || conv_matches_dense(&mut rng)),
        check("slide_aug_identities", || augmentation_identities(&mut rng)),
        check("merge_conserves_mass", || merge_conserves_mass(&mut rng)),
        check("nt_xent_closed_forms", nt_xent_closed_forms),
        check("nt_xent_scale_invariance", || nt_xent_scale_invariance(&mut rng)),
        check("auc_properties", || auc_properties(&mut rng)),
        check("adam_first_step", adam_first_step),
        check("logistic_convexity", || logistic_convexity(&mut rng)),
        check("slide_embedding_invariances", || embedding_invariances(&mut rng)),
    ]
}
