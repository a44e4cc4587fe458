//! Correlation metrics between predictions and MOS, and the challenge MainScore.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

fn check_pair(x: &[f64], y: &[f64], min: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("lengths differ: {} vs {}", x.len(), y.len())));
    }
    if x.len() < min {
        return Err(Error::Degenerate(format!("need at least {min} samples, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("metric input".into()));
    }
    Ok(())
}

/// Pearson linear correlation.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 2)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn has_ties(v: &[f64]) -> bool {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.windows(2).any(|w| w[0] == w[1])
}

/// Spearman rank-order correlation.
///
/// Without ties this is `1 − 6 Σ d_i² / (n(n² − 1))`; with ties it is the
/// Pearson correlation of average ranks, which equals the former when no ties exist.
pub fn srocc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 2)?;
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    if has_ties(x) || has_ties(y) {
        return plcc(&rx, &ry);
    }
    let n = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((1.0 - 6.0 * d2 / (n * (n * n - 1.0))).clamp(-1.0, 1.0))
}

/// Number of adjacent swaps needed to sort `v`, sorting it in place.
fn count_swaps(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = {
        let (l, r) = v.split_at_mut(mid);
        count_swaps(l, &mut buf[..mid]) + count_swaps(r, &mut buf[mid..])
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Σ t(t−1)/2 over runs of equal values in a sorted sequence.
fn tied_pairs<T: PartialEq>(sorted: impl Iterator<Item = T>) -> u64 {
    let mut total = 0;
    let mut run = 0u64;
    let mut prev: Option<T> = None;
    for item in sorted {
        if prev.as_ref() == Some(&item) {
            run += 1;
        } else {
            total += run * (run + 1) / 2;
            run = 0;
        }
        prev = Some(item);
    }
    total + run * (run + 1) / 2
}

/// Kendall tau-b, computed in `O(n log n)`.
pub fn krcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 2)?;
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));
    let n0 = (n * (n - 1) / 2) as u64;
    let n1 = tied_pairs(order.iter().map(|&i| x[i]));
    let n3 = tied_pairs(order.iter().map(|&i| (x[i], y[i])));
    let mut ys: Vec<f64> = order.iter().map(|&i| y[i]).collect();
    let mut buf = vec![0.0; n];
    let swaps = count_swaps(&mut ys, &mut buf);
    let n2 = tied_pairs(ys.iter().copied());
    let denom = ((n0 - n1) as f64 * (n0 - n2) as f64).sqrt();
    if denom == 0.0 {
        return Err(Error::Degenerate("no untied pairs for kendall tau".into()));
    }
    let numer = n0 as f64 - n1 as f64 - n2 as f64 + n3 as f64 - 2.0 * swaps as f64;
    Ok((numer / denom).clamp(-1.0, 1.0))
}

pub fn rmse(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 1)?;
    let mse = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    Ok(mse.sqrt())
}

/// `(|plcc| + |srocc|) / 2`.
pub fn main_score(plcc: f64, srocc: f64) -> f64 {
    (plcc.abs() + srocc.abs()) / 2.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub main_score: f64,
    pub plcc: f64,
    pub srocc: f64,
    pub krcc: f64,
    pub rmse: f64,
}

impl EvalReport {
    pub fn compute(pred: &[f64], mos: &[f64]) -> Result<Self> {
        let p = plcc(pred, mos)?;
        let s = srocc(pred, mos)?;
        Ok(Self {
            n: pred.len(),
            main_score: main_score(p, s),
            plcc: p,
            srocc: s,
            krcc: krcc(pred, mos)?,
            rmse: rmse(pred, mos)?,
        })
    }

    /// `key=value` lines with full-precision values.
    pub fn to_kv(&self) -> String {
        format!(
            "n={}\nmain_score={}\nplcc={}\nsrocc={}\nkrcc={}\nrmse={}\n",
            self.n, self.main_score, self.plcc, self.srocc, self.krcc, self.rmse
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut report = EvalReport {
            n: 0,
            main_score: f64::NAN,
            plcc: f64::NAN,
            srocc: f64::NAN,
            krcc: f64::NAN,
            rmse: f64::NAN,
        };
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad report line {line:?}")))?;
            let num = |v: &str| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("{k}: {e}")))
            };
            match k.trim() {
                "n" => {
                    report.n = v
                        .trim()
                        .parse()
                        .map_err(|e| Error::Config(format!("n: {e}")))?
                }
                "main_score" => report.main_score = num(v)?,
                "plcc" => report.plcc = num(v)?,
                "srocc" => report.srocc = num(v)?,
                "krcc" => report.krcc = num(v)?,
                "rmse" => report.rmse = num(v)?,
                other => return Err(Error::Config(format!("unknown report key {other:?}"))),
            }
        }
        Ok(report)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>6}  {:>9}  {:>7}  {:>7}  {:>7}  {:>7}",
            "n", "MainScore", "PLCC", "SROCC", "KRCC", "RMSE"
        )?;
        write!(
            f,
            "{:>6}  {:>9.4}  {:>7.4}  {:>7.4}  {:>7.4}  {:>7.4}",
            self.n, self.main_score, self.plcc, self.srocc, self.krcc, self.rmse
        )
    }
}

/// Sorts by MainScore descending, ties broken by name ascending.
pub fn rank_reports(entries: &mut [(String, EvalReport)]) {
    entries.sort_by(|(na, a), (nb, b)| {
        b.main_score
            .partial_cmp(&a.main_score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| na.cmp(nb))
    });
}
