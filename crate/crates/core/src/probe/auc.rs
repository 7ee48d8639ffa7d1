use crate::error::{Error, Result};

/// Area under the ROC curve in its Mann-Whitney form: the fraction of
/// (positive, negative) pairs ranked correctly, ties counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            found: scores.len(),
        });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels("AUC needs both classes".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::config("AUC scores contain NaN"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the Mann-Whitney U of the positives, kept integral.
    let mut twice_u: u128 = 0;
    let mut below_neg: u128 = 0;
    let mut k = 0;
    while k < order.len() {
        let mut end = k;
        while end < order.len() && scores[order[end]] == scores[order[k]] {
            end += 1;
        }
        let group = &order[k..end];
        let gp = group.iter().filter(|&&i| labels[i]).count() as u128;
        let gn = group.len() as u128 - gp;
        twice_u += gp * (2 * below_neg + gn);
        below_neg += gn;
        k = end;
    }
    let den = 2 * pos as u128 * neg as u128;
    // Evaluated from whichever side is smaller so that complementary
    // labelings sum to exactly one.
    Ok(if 2 * twice_u <= den {
        twice_u as f64 / den as f64
    } else {
        1.0 - (den - twice_u) as f64 / den as f64
    })
}

/// Unweighted mean of one-vs-rest AUCs. `probs` is row-major `[n, classes]`.
pub fn macro_auc(probs: &[f64], labels: &[usize], classes: usize) -> Result<f64> {
    if classes < 2 || probs.len() != labels.len() * classes {
        return Err(Error::DimensionMismatch {
            expected: labels.len() * classes,
            found: probs.len(),
        });
    }
    if classes == 2 {
        let s: Vec<f64> = probs.chunks(2).map(|p| p[1]).collect();
        let y: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return auc(&s, &y);
    }
    let mut total = 0.0;
    for c in 0..classes {
        let s: Vec<f64> = probs.chunks(classes).map(|p| p[c]).collect();
        let y: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        total += auc(&s, &y)?;
    }
    Ok(total / classes as f64)
}
