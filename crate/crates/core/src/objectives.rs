//! Training losses over a batch of predictions `s` and targets `y`.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A loss value with its gradient with respect to the predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossValue {
    fn zero(m: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![0.0; m],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_rank: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_rank: 0.3 }
    }
}

/// How a batch without prediction variance is treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Degenerate {
    /// Return an error.
    Strict,
    /// Loss 1.0 with zero gradient; batches of one sample contribute 0.
    Lenient,
}

fn check(s: &[f64], y: &[f64]) -> Result<()> {
    if s.len() != y.len() {
        return Err(Error::Shape(format!("{} predictions for {} targets", s.len(), y.len())));
    }
    if s.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("loss inputs".into()));
    }
    Ok(())
}

fn centered(v: &[f64]) -> (Vec<f64>, f64) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let c: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
    (c, norm)
}

/// `(1 − PLCC(s, y)) / 2`.
pub fn plcc_loss(s: &[f64], y: &[f64]) -> Result<LossValue> {
    plcc_loss_with(s, y, Degenerate::Strict)
}

pub fn plcc_loss_with(s: &[f64], y: &[f64], mode: Degenerate) -> Result<LossValue> {
    check(s, y)?;
    let m = s.len();
    if m < 2 {
        return match mode {
            Degenerate::Strict => Err(Error::Degenerate(format!("plcc loss needs m >= 2, got {m}"))),
            Degenerate::Lenient => Ok(LossValue::zero(m)),
        };
    }
    let (a, na) = centered(s);
    let (b, nb) = centered(y);
    if nb == 0.0 {
        return match mode {
            Degenerate::Strict => Err(Error::Degenerate("targets have zero variance".into())),
            Degenerate::Lenient => Ok(LossValue {
                value: 1.0,
                grad: vec![0.0; m],
            }),
        };
    }
    if na == 0.0 {
        return match mode {
            Degenerate::Strict => Err(Error::Degenerate("predictions have zero variance".into())),
            Degenerate::Lenient => Ok(LossValue {
                value: 1.0,
                grad: vec![0.0; m],
            }),
        };
    }
    let r = (a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0);
    // dr/ds_i = b_i/(|a||b|) − r·a_i/|a|²; the centring projection drops out since Σb = 0.
    let grad = a
        .iter()
        .zip(&b)
        .map(|(ai, bi)| -0.5 * (bi / (na * nb) - r * ai / (na * na)))
        .collect();
    Ok(LossValue {
        value: (1.0 - r) / 2.0,
        grad,
    })
}

/// Sign indicator `e(y_i, y_j)`: `+1` when `y_i ≥ y_j`, else `−1`.
fn order_sign(yi: f64, yj: f64) -> f64 {
    if yi >= yj {
        1.0
    } else {
        -1.0
    }
}

/// `(1/m²) Σ_{i,j} max(0, |y_i − y_j| − e(y_i, y_j)·(s_i − s_j))`.
///
/// The subgradient at the hinge point is 0.
pub fn rank_loss(s: &[f64], y: &[f64]) -> Result<LossValue> {
    check(s, y)?;
    let m = s.len();
    if m == 0 {
        return Err(Error::Degenerate("rank loss on an empty batch".into()));
    }
    let norm = 1.0 / (m * m) as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; m];
    for i in 0..m {
        for j in 0..m {
            let e = order_sign(y[i], y[j]);
            let h = (y[i] - y[j]).abs() - e * (s[i] - s[j]);
            if h > 0.0 {
                value += h;
                grad[i] -= e * norm;
                grad[j] += e * norm;
            }
        }
    }
    Ok(LossValue {
        value: value * norm,
        grad,
    })
}

/// Components and the weighted total `plcc + λ·rank`.
#[derive(Clone, Debug, PartialEq)]
pub struct TotalLoss {
    pub plcc: f64,
    pub rank: f64,
    pub total: f64,
    pub grad: Vec<f64>,
}

pub fn combine(plcc: &LossValue, rank: &LossValue, w: LossWeights) -> Result<TotalLoss> {
    if !(w.lambda_rank >= 0.0 && w.lambda_rank.is_finite()) {
        return Err(Error::Config(format!("lambda_rank {} must be >= 0", w.lambda_rank)));
    }
    if plcc.grad.len() != rank.grad.len() {
        return Err(Error::Shape("loss components disagree on batch size".into()));
    }
    Ok(TotalLoss {
        plcc: plcc.value,
        rank: rank.value,
        total: plcc.value + w.lambda_rank * rank.value,
        grad: plcc
            .grad
            .iter()
            .zip(&rank.grad)
            .map(|(p, r)| p + w.lambda_rank * r)
            .collect(),
    })
}

pub fn total_loss(s: &[f64], y: &[f64], w: LossWeights) -> Result<TotalLoss> {
    combine(&plcc_loss(s, y)?, &rank_loss(s, y)?, w)
}

/// The training variant: degenerate PLCC batches do not abort.
pub fn training_loss(s: &[f64], y: &[f64], w: LossWeights) -> Result<TotalLoss> {
    combine(
        &plcc_loss_with(s, y, Degenerate::Lenient)?,
        &rank_loss(s, y)?,
        w,
    )
}
