//! Synthetic tile-embedding corpora.
//!
//! Every slide is a square grid of tiles. Each tile carries one of a few
//! prototype vectors, and which prototype sits where depends on the class:
//! class 0 interleaves prototypes, class 1 places them in contiguous bands,
//! class 2 in single-tile stripes and class 3 in quadrants. All rules use
//! every prototype equally often, so the average tile of a slide carries no
//! class information. A per-slide nuisance vector is added to every tile.
//! Augmentation slice `k ≥ 1` applies a fixed orthogonal transform `Q_k`
//! (shared by all slides) to the base features and adds fresh noise; slice 0
//! holds the base features.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;
use crate::ssl::{save_bank, EmbeddingBank};

pub const TILE_STRIDE: i32 = 256;
pub const MAX_CLASSES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_slides: usize,
    pub n_classes: usize,
    pub n_tiles: usize,
    pub n_augs: usize,
    pub feat_dim: usize,
    /// Side of the square tile grid, in pixels.
    pub grid_extent: u32,
    pub prototypes: usize,
    /// Norm of the per-slide nuisance vector.
    pub nuisance_strength: f64,
    /// Expected norm of the noise added in augmentation slices.
    pub aug_noise: f64,
    /// Expected norm of the per-tile noise of base features.
    pub tile_noise: f64,
    /// Expected norm of the per-slide perturbation of each prototype.
    pub prototype_jitter: f64,
    /// Largest Givens angle (radians) used to build each `Q_k`.
    pub aug_strength: f64,
    /// Size of the trailing coordinate block that holds the nuisance vector
    /// and on which every `Q_k` acts. Prototypes live in the leading
    /// `feat_dim - nuisance_dims` coordinates.
    pub nuisance_dims: usize,
    /// Probability that a class-1 tile is reassigned to prototype 0. Any
    /// value above zero breaks marginal equality on purpose.
    pub class_frequency_shift: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_slides: 200,
            n_classes: 2,
            n_tiles: crate::DEFAULT_BANK_TILES,
            n_augs: crate::DEFAULT_AUGS,
            feat_dim: 32,
            grid_extent: 20 * TILE_STRIDE as u32,
            prototypes: 2,
            nuisance_strength: 0.3,
            aug_noise: 0.1,
            tile_noise: 0.3,
            prototype_jitter: 0.0,
            aug_strength: 1.5,
            nuisance_dims: 8,
            class_frequency_shift: 0.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    /// A 200-slide, two-class corpus small enough to pretrain on in well
    /// under a minute: 64 tiles filling an 8×8 grid, 16-dimensional
    /// features, 4 of them nuisance.
    pub fn compact(seed: u64) -> Self {
        GenConfig {
            n_tiles: 64,
            feat_dim: 16,
            nuisance_dims: 4,
            grid_extent: 8 * TILE_STRIDE as u32,
            seed,
            ..GenConfig::default()
        }
    }

    /// Tiles along one side of the grid.
    pub fn grid_side(&self) -> usize {
        (self.grid_extent / TILE_STRIDE as u32) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let side = self.grid_side();
        if self.n_classes == 0 || self.n_classes > MAX_CLASSES {
            return Err(Error::config(format!("n_classes must lie in 1..={MAX_CLASSES}")));
        }
        if self.n_slides < 2 * self.n_classes {
            return Err(Error::config("at least 2 slides per class are required"));
        }
        if self.nuisance_dims < 2 || self.nuisance_dims >= self.feat_dim {
            return Err(Error::config(format!(
                "nuisance_dims must lie in 2..feat_dim (got {} with feat_dim {})",
                self.nuisance_dims, self.feat_dim
            )));
        }
        if self.n_augs == 0 || self.n_tiles == 0 {
            return Err(Error::config("n_augs and n_tiles must be >= 1"));
        }
        if self.n_tiles > side * side {
            return Err(Error::config(format!(
                "n_tiles {} exceeds the {side}×{side} grid of a {}-pixel extent",
                self.n_tiles, self.grid_extent
            )));
        }
        if self.n_classes > 3 && self.prototypes != 2 {
            return Err(Error::config("four classes require exactly 2 prototypes"));
        }
        if self.prototypes < 2 || !side.is_multiple_of(2 * self.prototypes) {
            return Err(Error::config(format!(
                "need >= 2 prototypes and a grid side divisible by 2 × prototypes (side {side}, prototypes {})",
                self.prototypes
            )));
        }
        let finite = [
            self.nuisance_strength,
            self.aug_noise,
            self.tile_noise,
            self.prototype_jitter,
            self.aug_strength,
        ];
        if finite.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config("noise and strength parameters must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.class_frequency_shift) {
            return Err(Error::config("class_frequency_shift must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn label_of(&self, slide: usize) -> usize {
        slide % self.n_classes
    }
}

/// Prototype at grid cell `(a, b)` of a `side × side` slide of class `class`.
pub fn prototype_rule(class: usize, a: usize, b: usize, side: usize, prototypes: usize) -> usize {
    match class {
        0 => (a + b) % prototypes,
        1 => a * prototypes / side,
        2 => a % prototypes,
        _ => ((2 * a / side) + (2 * b / side) * 2) % prototypes,
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, n: usize, norm: f64) -> Vec<f64> {
    let s = norm / (n as f64).sqrt();
    (0..n).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, n, 1.0);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Corpus-wide prototype vectors (unit norm, row-major `[P, F]`), zero on
/// the nuisance block.
pub fn prototypes(cfg: &GenConfig) -> Vec<f64> {
    let mut rng = seeding::rng(cfg.seed, seeding::tag::PROTOTYPE);
    let free = cfg.feat_dim - cfg.nuisance_dims;
    (0..cfg.prototypes)
        .flat_map(|_| {
            let mut v = unit(&mut rng, free);
            v.resize(cfg.feat_dim, 0.0);
            v
        })
        .collect()
}

/// `Q_k` as a row-major `F × F` orthogonal matrix: the identity on the
/// prototype block and, on the nuisance block of size `d`, a product of `2d`
/// Givens rotations on random coordinate planes with angles in
/// `[-aug_strength, aug_strength]`.
pub fn aug_transform(cfg: &GenConfig, k: usize) -> Vec<f64> {
    let f = cfg.feat_dim;
    let d = cfg.nuisance_dims;
    let lo = f - d;
    let mut q = vec![0.0; f * f];
    for i in 0..f {
        q[i * f + i] = 1.0;
    }
    let mut rng = seeding::rng(seeding::derive(cfg.seed, seeding::tag::AUG), k as u64);
    for _ in 0..2 * d {
        let i = lo + rng.random_range(0..d);
        let j = lo + (i - lo + rng.random_range(1..d)) % d;
        let theta = if cfg.aug_strength > 0.0 {
            rng.random_range(-cfg.aug_strength..=cfg.aug_strength)
        } else {
            0.0
        };
        let (s, c) = theta.sin_cos();
        for col in 0..f {
            let (qi, qj) = (q[i * f + col], q[j * f + col]);
            q[i * f + col] = c * qi - s * qj;
            q[j * f + col] = s * qi + c * qj;
        }
    }
    q
}

/// One generated slide.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideData {
    pub bank: EmbeddingBank,
    pub label: usize,
    /// Base feature of every grid cell, row-major over `(b, a)`.
    pub base: Vec<f32>,
}

pub fn slide_id(index: usize) -> String {
    format!("slide_{index:04}")
}

/// Generates slide `index`. `protos` and `transforms` come from
/// [`prototypes`] and [`aug_transform`].
pub fn generate_slide(cfg: &GenConfig, index: usize, protos: &[f64], transforms: &[Vec<f64>]) -> Result<SlideData> {
    let f = cfg.feat_dim;
    let side = cfg.grid_side();
    let label = cfg.label_of(index);
    let mut rng = seeding::rng(seeding::derive(cfg.seed, seeding::tag::SLIDE), index as u64);

    let (transpose, flip_a, flip_b) = (rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5));
    let offset = (rng.random_range(0..TILE_STRIDE), rng.random_range(0..TILE_STRIDE));
    let mut nuisance = vec![0.0; f - cfg.nuisance_dims];
    nuisance.extend(unit(&mut rng, cfg.nuisance_dims).into_iter().map(|v| v * cfg.nuisance_strength));
    let slide_protos: Vec<f64> = protos
        .chunks(f)
        .flat_map(|p| {
            let j = gaussian(&mut rng, f, cfg.prototype_jitter);
            p.iter().zip(j).map(|(a, b)| a + b).collect::<Vec<_>>()
        })
        .collect();

    let mut base = Vec::with_capacity(side * side * f);
    for b in 0..side {
        for a in 0..side {
            let (mut u, mut v) = if transpose { (b, a) } else { (a, b) };
            if flip_a {
                u = side - 1 - u;
            }
            if flip_b {
                v = side - 1 - v;
            }
            let mut p = prototype_rule(label, u, v, side, cfg.prototypes);
            if label == 1 && cfg.class_frequency_shift > 0.0 && rng.random_bool(cfg.class_frequency_shift) {
                p = 0;
            }
            let noise = gaussian(&mut rng, f, cfg.tile_noise);
            for c in 0..f {
                base.push((slide_protos[p * f + c] + nuisance[c] + noise[c]) as f32);
            }
        }
    }

    let mut coords = Vec::with_capacity(cfg.n_augs * cfg.n_tiles);
    let mut features = Vec::with_capacity(cfg.n_augs * cfg.n_tiles * f);
    for k in 0..cfg.n_augs {
        let mut cells = index::sample(&mut rng, side * side, cfg.n_tiles).into_vec();
        cells.sort_unstable();
        for cell in cells {
            let (a, b) = ((cell % side) as i32, (cell / side) as i32);
            coords.push((offset.0 + a * TILE_STRIDE, offset.1 + b * TILE_STRIDE));
            let x = &base[cell * f..(cell + 1) * f];
            if k == 0 {
                features.extend_from_slice(x);
            } else {
                let q = &transforms[k];
                let noise = gaussian(&mut rng, f, cfg.aug_noise);
                for r in 0..f {
                    let dot: f64 = (0..f).map(|c| q[r * f + c] * f64::from(x[c])).sum();
                    features.push((dot + noise[r]) as f32);
                }
            }
        }
    }
    let bank = EmbeddingBank::new(slide_id(index), cfg.n_augs, cfg.n_tiles, f, coords, features)?;
    Ok(SlideData { bank, label, base })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: GenConfig,
    pub slides: Vec<SlideData>,
}

impl Corpus {
    pub fn banks(&self) -> Vec<EmbeddingBank> {
        self.slides.iter().map(|s| s.bank.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.slides.iter().map(|s| s.label).collect()
    }

    pub fn labels_csv(&self) -> String {
        let mut out = String::from("slide_id,label\n");
        for s in &self.slides {
            let _ = writeln!(out, "{},{}", s.bank.slide_id, s.label);
        }
        out
    }
}

/// Generates all slides in memory. Output does not depend on the thread
/// count.
pub fn generate(cfg: &GenConfig) -> Result<Corpus> {
    cfg.validate()?;
    let protos = prototypes(cfg);
    let transforms: Vec<Vec<f64>> = (0..cfg.n_augs).map(|k| aug_transform(cfg, k)).collect();
    let slides = (0..cfg.n_slides)
        .into_par_iter()
        .map(|s| generate_slide(cfg, s, &protos, &transforms))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        config: cfg.clone(),
        slides,
    })
}

#[derive(Serialize)]
struct Sidecar<'a> {
    slide_id: &'a str,
    label: usize,
    slide_index: usize,
    generator: &'static str,
    config: &'a GenConfig,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `<slide_id>.gsb` banks with JSON sidecars, `labels.csv` and
/// `corpus.json` into `dir`.
pub fn generate_corpus(cfg: &GenConfig, dir: &Path) -> Result<Corpus> {
    let corpus = generate(cfg)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (k, s) in corpus.slides.iter().enumerate() {
        save_bank(&s.bank, &dir.join(format!("{}.gsb", s.bank.slide_id)))?;
        let side = Sidecar {
            slide_id: &s.bank.slide_id,
            label: s.label,
            slide_index: k,
            generator: concat!("gigassl-datagen ", env!("CARGO_PKG_VERSION")),
            config: cfg,
        };
        let json = serde_json::to_string_pretty(&side).map_err(|e| Error::Format(e.to_string()))?;
        write(&dir.join(format!("{}.json", s.bank.slide_id)), json)?;
    }
    write(&dir.join("labels.csv"), corpus.labels_csv())?;
    let json = serde_json::to_string_pretty(cfg).map_err(|e| Error::Format(e.to_string()))?;
    write(&dir.join("corpus.json"), json)?;
    Ok(corpus)
}

/// Largest class-pair difference of per-slide mean tile embeddings
/// (slice 0), as the root-mean-square over dimensions of Welch
/// t-statistics. Values below 3 mean no detectable class difference in the
/// tile marginals. A single class gives 0.
pub fn verify_marginal_equality(banks: &[EmbeddingBank], labels: &[usize]) -> Result<f64> {
    if banks.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: banks.len(),
            found: labels.len(),
        });
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let Some(first) = banks.first() else {
        return Ok(0.0);
    };
    let f = first.feat_dim();
    let mut per_class: Vec<Vec<Vec<f64>>> = vec![Vec::new(); classes];
    for (bank, &y) in banks.iter().zip(labels) {
        per_class[y].push(crate::inference::average_mil_embed(bank)?);
    }
    let stats: Vec<Option<(Vec<f64>, Vec<f64>, f64)>> = per_class
        .iter()
        .map(|rows| {
            if rows.len() < 2 {
                return None;
            }
            let n = rows.len() as f64;
            let mean: Vec<f64> = (0..f).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n).collect();
            let var: Vec<f64> = (0..f)
                .map(|c| rows.iter().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / (n - 1.0))
                .collect();
            Some((mean, var, n))
        })
        .collect();
    let mut worst: f64 = 0.0;
    for a in 0..classes {
        for b in a + 1..classes {
            let (Some((ma, va, na)), Some((mb, vb, nb))) = (&stats[a], &stats[b]) else {
                continue;
            };
            let sum_t2: f64 = (0..f)
                .map(|c| {
                    let se2 = va[c] / na + vb[c] / nb;
                    if se2 > 0.0 {
                        (ma[c] - mb[c]).powi(2) / se2
                    } else {
                        0.0
                    }
                })
                .sum();
            worst = worst.max((sum_t2 / f as f64).sqrt());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            n_slides: 8,
            n_tiles: 16,
            n_augs: 4,
            feat_dim: 6,
            nuisance_dims: 2,
            grid_extent: 8 * 256,
            ..GenConfig::default()
        }
    }

    #[test]
    fn rules_use_prototypes_equally() {
        for class in 0..MAX_CLASSES {
            for (side, p) in [(8, 2), (12, 3), (16, 4)] {
                let mut counts = vec![0; p];
                for a in 0..side {
                    for b in 0..side {
                        counts[prototype_rule(class, a, b, side, p)] += 1;
                    }
                }
                if class == 3 && p != 2 {
                    continue;
                }
                assert!(counts.iter().all(|&c| c == counts[0]), "class {class} {counts:?}");
            }
        }
    }

    #[test]
    fn transforms_are_orthogonal() {
        let cfg = small();
        let f = cfg.feat_dim;
        for k in 0..4 {
            let q = aug_transform(&cfg, k);
            for i in 0..f {
                for j in 0..f {
                    let dot: f64 = (0..f).map(|c| q[i * f + c] * q[j * f + c]).sum();
                    assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn deterministic_and_identity_slice() {
        let cfg = small();
        let a = generate(&cfg).unwrap();
        assert_eq!(a, generate(&cfg).unwrap());
        for s in &a.slides {
            let side = cfg.grid_side();
            for t in 0..cfg.n_tiles {
                let (x, y) = s.bank.coord(0, t);
                let (ca, cb) = ((x / TILE_STRIDE) as usize, (y / TILE_STRIDE) as usize);
                let cell = cb * side + ca;
                assert_eq!(s.bank.feature(0, t), &s.base[cell * 6..(cell + 1) * 6]);
            }
        }
        assert_eq!(a.labels(), vec![0, 1, 0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn files_are_reproducible() {
        let cfg = small();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_corpus(&cfg, d1.path()).unwrap();
        generate_corpus(&cfg, d2.path()).unwrap();
        for name in ["slide_0003.gsb", "slide_0003.json", "labels.csv", "corpus.json"] {
            assert_eq!(fs::read(d1.path().join(name)).unwrap(), fs::read(d2.path().join(name)).unwrap());
        }
        let bank = crate::ssl::load_bank(&d1.path().join("slide_0003.gsb")).unwrap();
        assert_eq!(bank.slide_id, "slide_0003");
    }

    #[test]
    fn marginal_equality_statistic() {
        let base = GenConfig {
            n_slides: 100,
            n_tiles: 64,
            n_augs: 1,
            feat_dim: 16,
            grid_extent: 8 * 256,
            nuisance_strength: 0.0,
            ..GenConfig::default()
        };
        let c = generate(&base).unwrap();
        let stat = verify_marginal_equality(&c.banks(), &c.labels()).unwrap();
        assert!(stat < 3.0, "{stat}");
        let shifted = GenConfig {
            class_frequency_shift: 0.8,
            ..base.clone()
        };
        let c = generate(&shifted).unwrap();
        let stat = verify_marginal_equality(&c.banks(), &c.labels()).unwrap();
        assert!(stat > 10.0, "{stat}");
        let one = GenConfig {
            n_classes: 1,
            n_slides: 4,
            ..base
        };
        let c = generate(&one).unwrap();
        assert_eq!(verify_marginal_equality(&c.banks(), &c.labels()).unwrap(), 0.0);
    }
}
