use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{check_labels, fit_logistic, macro_auc, FitOptions, Normalization};
use crate::error::{Error, Result};
use crate::inference::EmbeddingMatrix;
use crate::seeding;

/// Embeddings with one integer class per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub ids: Vec<String>,
    pub dim: usize,
    pub x: Vec<f64>,
    pub labels: Vec<usize>,
    /// Original label of each class index.
    pub class_names: Vec<String>,
}

impl LabeledSet {
    pub fn new(ids: Vec<String>, dim: usize, x: Vec<f64>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if ids.len() != labels.len() || x.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * dim,
                found: x.len(),
            });
        }
        check_labels(&labels, class_names.len())?;
        Ok(LabeledSet {
            ids,
            dim,
            x,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    /// Joins embeddings with a `slide_id -> label` table. Slides without a
    /// label are skipped.
    pub fn from_embeddings(m: &EmbeddingMatrix, labels: &BTreeMap<String, String>) -> Result<Self> {
        let mut names: Vec<&String> = labels.values().collect();
        names.sort_by(|a, b| match (a.parse::<i64>(), b.parse::<i64>()) {
            (Ok(x), Ok(y)) => x.cmp(&y),
            _ => a.cmp(b),
        });
        names.dedup();
        let class_names: Vec<String> = names.into_iter().cloned().collect();
        let (mut ids, mut x, mut ys) = (Vec::new(), Vec::new(), Vec::new());
        for (k, id) in m.ids.iter().enumerate() {
            match labels.get(id) {
                Some(l) => {
                    ids.push(id.clone());
                    x.extend_from_slice(m.row(k));
                    ys.push(class_names.iter().position(|c| c == l).expect("label listed"));
                }
                None => log::warn!("slide {id} has no label"),
            }
        }
        Self::new(ids, m.dim, x, ys, class_names)
    }

    fn rows(&self, idx: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            x.extend_from_slice(&self.x[i * self.dim..(i + 1) * self.dim]);
        }
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Reads a `slide_id,label` CSV (header optional).
pub fn read_labels(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text)
}

pub fn parse_labels(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line == "slide_id,label") {
            continue;
        }
        let (id, label) = line
            .split_once(',')
            .ok_or_else(|| Error::config(format!("labels line {}: expected slide_id,label", n + 1)))?;
        if out.insert(id.trim().to_string(), label.trim().to_string()).is_some() {
            return Err(Error::config(format!("duplicate label for slide {id}")));
        }
    }
    Ok(out)
}

/// How many training rows a probe may use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    All,
    Fraction(f64),
    Count(usize),
}

impl FromStr for Budget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Ok(Budget::All);
        }
        if let Ok(n) = s.parse::<usize>() {
            return Ok(Budget::Count(n));
        }
        match s.parse::<f64>() {
            Ok(f) if f > 0.0 && f <= 1.0 => Ok(Budget::Fraction(f)),
            _ => Err(Error::config(format!("budget must be `all`, a count or a fraction in (0, 1], got `{s}`"))),
        }
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::All => write!(f, "all"),
            Budget::Fraction(v) => write!(f, "{v}"),
            Budget::Count(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub splits: usize,
    pub test_fraction: f64,
    pub budget: Budget,
    pub fit: FitOptions,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            splits: 10,
            test_fraction: 0.2,
            budget: Budget::All,
            fit: FitOptions::default(),
            seed: 0,
        }
    }
}

impl EvalOptions {
    pub fn with_normalization(mut self, n: Normalization) -> Self {
        self.fit.normalization = n;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitResult {
    pub auc: f64,
    /// Training rows per class.
    pub train_counts: Vec<usize>,
    pub test_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub budget: Budget,
    pub splits: Vec<SplitResult>,
    pub mean: f64,
    pub std: f64,
}

/// Splits `n` into integer parts proportional to `weights` (largest
/// remainder, ties to the lower index).
fn allocate(n: usize, weights: &[usize]) -> Vec<usize> {
    let total: usize = weights.iter().sum();
    let mut parts: Vec<usize> = weights.iter().map(|&w| n * w / total).collect();
    let mut rem: Vec<(usize, usize)> = weights.iter().enumerate().map(|(c, &w)| (n * w % total, c)).collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = n - parts.iter().sum::<usize>();
    for &(_, c) in rem.iter().take(short) {
        parts[c] += 1;
    }
    parts
}

/// Stratified train/test partition, then a stratified training subset of
/// the requested size. Returns sorted `(train, test)` row indices.
pub fn split_indices(labels: &[usize], classes: usize, test_fraction: f64, budget: Budget, seed: u64, split: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config(format!("test fraction must lie in (0, 1), got {test_fraction}")));
    }
    let mut rng = seeding::rng(seeding::derive(seed, seeding::tag::SPLIT), split as u64);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut train_by_class = Vec::with_capacity(classes);
    let mut test = Vec::new();
    for (c, rows) in by_class.iter_mut().enumerate() {
        if rows.len() < 2 {
            return Err(Error::BudgetTooSmall(format!("class {c} has {} rows; a split needs 2", rows.len())));
        }
        rows.shuffle(&mut rng);
        let n_test = ((rows.len() as f64 * test_fraction).round() as usize).clamp(1, rows.len() - 1);
        test.extend_from_slice(&rows[..n_test]);
        train_by_class.push(rows[n_test..].to_vec());
    }
    let sizes: Vec<usize> = train_by_class.iter().map(Vec::len).collect();
    let n_train: usize = sizes.iter().sum();
    let want = match budget {
        Budget::All => n_train,
        Budget::Fraction(f) => (n_train as f64 * f).round() as usize,
        Budget::Count(n) => n,
    };
    if want > n_train {
        return Err(Error::BudgetTooSmall(format!("budget {budget} exceeds the {n_train} training rows of a split")));
    }
    let per_class = allocate(want, &sizes);
    if let Some(c) = per_class.iter().position(|&k| k == 0) {
        return Err(Error::BudgetTooSmall(format!("budget {budget} leaves class {c} without training rows")));
    }
    let mut train: Vec<usize> = train_by_class
        .iter()
        .zip(&per_class)
        .flat_map(|(rows, &k)| rows[..k].iter().copied())
        .collect();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Repeated stratified splits; each trains a probe on the budgeted training
/// rows and scores the held-out rows.
pub fn bootstrap_eval(set: &LabeledSet, opts: &EvalOptions) -> Result<ProbeReport> {
    if opts.splits == 0 {
        return Err(Error::config("at least one split is required"));
    }
    let classes = set.classes();
    let splits = (0..opts.splits)
        .into_par_iter()
        .map(|s| -> Result<SplitResult> {
            let (train, test) = split_indices(&set.labels, classes, opts.test_fraction, opts.budget, opts.seed, s)?;
            let (xtr, ytr) = set.rows(&train);
            let (xte, yte) = set.rows(&test);
            let model = fit_logistic(&xtr, &ytr, set.dim, classes, &opts.fit)?;
            let auc = macro_auc(&model.predict_proba(&xte), &yte, classes)?;
            let mut train_counts = vec![0; classes];
            for &y in &ytr {
                train_counts[y] += 1;
            }
            Ok(SplitResult {
                auc,
                train_counts,
                test_size: test.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = splits.len() as f64;
    let mean = splits.iter().map(|s| s.auc).sum::<f64>() / n;
    let std = if splits.len() > 1 {
        (splits.iter().map(|s| (s.auc - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(ProbeReport {
        budget: opts.budget,
        splits,
        mean,
        std,
    })
}

/// `task,budget,split,auc` rows for every split, then `mean` and `std`
/// summary rows.
pub fn report_csv(task: &str, reports: &[ProbeReport]) -> String {
    let mut out = String::from("task,budget,split,auc\n");
    for r in reports {
        for (k, s) in r.splits.iter().enumerate() {
            let _ = writeln!(out, "{task},{},{k},{:.6}", r.budget, s.auc);
        }
        let _ = writeln!(out, "{task},{},mean,{:.6}", r.budget, r.mean);
        let _ = writeln!(out, "{task},{},std,{:.6}", r.budget, r.std);
    }
    out
}

pub fn report_table(task: &str, reports: &[ProbeReport]) -> String {
    let mut out = format!("{:<12} {:>8} {:>8} {:>8} {:>7} {:>7}\n", "task", "budget", "auc", "std", "splits", "train");
    for r in reports {
        let train = r.splits.first().map_or(0, |s| s.train_counts.iter().sum::<usize>());
        let _ = writeln!(
            out,
            "{:<12} {:>8} {:>8.4} {:>8.4} {:>7} {:>7}",
            task,
            r.budget.to_string(),
            r.mean,
            r.std,
            r.splits.len(),
            train
        );
    }
    out
}
