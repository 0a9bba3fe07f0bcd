//! Ranking and classification metrics, and cosine similarity.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Area under the ROC curve from Mann–Whitney ranks; tied scores share their
/// average rank, so a tie between a positive and a negative counts one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc", &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::contract("auc scores contain NaN"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::contract("auc needs both positive and negative labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("no NaN"));
    // ranks doubled to stay in integers: tied group [i, j) gets i + j + 1
    let mut pos_rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let rank2 = (i + j + 1) as u128;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        pos_rank_sum2 += rank2 * pos_in_group;
        i = j;
    }
    let np = n_pos as u128;
    // 2·U = 2·Σ rank − n_pos·(n_pos + 1)
    let u2 = pos_rank_sum2 - np * (np + 1);
    Ok(u2 as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Fraction of rows where `score >= threshold` agrees with the label.
pub fn accuracy(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("accuracy", &[scores.len()], &[labels.len()]));
    }
    if scores.is_empty() {
        return Err(Error::contract("accuracy of an empty set"));
    }
    let hits = scores.iter().zip(labels).filter(|(&s, &l)| (s >= threshold) == l).count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na * nb))
    }
}

/// `n × n` matrix with `cos(text[i], image[j])` at `(i, j)`. Undefined cells
/// (zero norm) are 0 and listed in the second return value.
pub fn similarity_matrix(text: &[Vec<f64>], image: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<(usize, usize)>)> {
    if text.len() != image.len() {
        return Err(Error::shape("similarity", &[text.len()], &[image.len()]));
    }
    let n = text.len();
    let mut m = vec![vec![0.0; n]; n];
    let mut undefined = Vec::new();
    for i in 0..n {
        for j in 0..n {
            match cosine(&text[i], &image[j]) {
                Some(c) => m[i][j] = c,
                None => undefined.push((i, j)),
            }
        }
    }
    Ok((m, undefined))
}

/// Mean of the diagonal and mean of the off-diagonal cells of a square matrix.
pub fn diagonal_split(m: &[Vec<f64>]) -> (f64, f64) {
    let n = m.len();
    let mut diag = 0.0;
    let mut off = 0.0;
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if i == j {
                diag += v;
            } else {
                off += v;
            }
        }
    }
    let off_count = (n * n - n).max(1);
    (diag / n.max(1) as f64, off / off_count as f64)
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, libm::sqrt(var))
}
