//! Linear + ReLU classification head with a squared loss.
//!
//! `ℒ = (1/n)(‖Y − φ(WX)‖²_F + λ_C‖W‖²_F)` with `φ = max(0, ·)`.
//! The ReLU derivative at exactly zero is taken as 0.

use ndarray::{Array2, ArrayView2, Zip};

use crate::error::{DdlError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    /// `num_classes × feature_dim`.
    pub weights: Array2<f64>,
    pub lambda_c: f64,
}

impl ClassifierParams {
    pub fn new(weights: Array2<f64>, lambda_c: f64) -> Result<Self> {
        if !(lambda_c >= 0.0) || !lambda_c.is_finite() {
            return Err(DdlError::InvalidParameter(format!(
                "lambda_c must be finite and >= 0, got {}",
                lambda_c
            )));
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(DdlError::NonFinite("classifier weights".into()));
        }
        Ok(Self { weights, lambda_c })
    }

    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.ncols()
    }
}

/// One-hot label matrix `Y` (`num_classes × batch`).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix(Array2<f64>);

impl LabelMatrix {
    pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Self> {
        let mut y = Array2::zeros((num_classes, labels.len()));
        for (i, &l) in labels.iter().enumerate() {
            if l >= num_classes {
                return Err(DdlError::InvalidParameter(format!(
                    "label {} at position {} is outside [0, {})",
                    l, i, num_classes
                )));
            }
            y[[l, i]] = 1.0;
        }
        Ok(Self(y))
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }
}

fn check(w: &ClassifierParams, x: ArrayView2<f64>) -> Result<()> {
    if w.feature_dim() != x.nrows() {
        return Err(DdlError::Dimension(format!(
            "classifier expects {} features, got {}",
            w.feature_dim(),
            x.nrows()
        )));
    }
    Ok(())
}

/// Pre-activation scores `WX`.
pub fn linear_scores(w: &ClassifierParams, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    check(w, x)?;
    Ok(w.weights.dot(&x))
}

/// `φ(WX)`.
pub fn predict_scores(w: &ClassifierParams, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    Ok(linear_scores(w, x)?.mapv(|v| v.max(0.0)))
}

/// Column-wise argmax, ties broken toward the lowest class index.
pub fn argmax_columns(scores: ArrayView2<f64>) -> Vec<usize> {
    scores
        .columns()
        .into_iter()
        .map(|col| {
            let mut best = 0;
            for (i, &v) in col.iter().enumerate() {
                if v > col[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn predict_labels(w: &ClassifierParams, x: ArrayView2<f64>) -> Result<Vec<usize>> {
    Ok(argmax_columns(predict_scores(w, x)?.view()))
}

#[derive(Debug, Clone)]
pub struct ClassifierGrads {
    pub loss: f64,
    pub d_weights: Array2<f64>,
    pub d_features: Array2<f64>,
}

pub fn loss_and_grads(
    w: &ClassifierParams,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
) -> Result<ClassifierGrads> {
    check(w, x)?;
    let n = x.ncols();
    if n == 0 {
        return Err(DdlError::Empty("classifier batch".into()));
    }
    if y.dim() != (w.num_classes(), n) {
        return Err(DdlError::Dimension(format!(
            "labels are {:?}, expected ({}, {})",
            y.dim(),
            w.num_classes(),
            n
        )));
    }
    let z = w.weights.dot(&x);
    let nf = n as f64;
    let mut fit = 0.0;
    // (φ(z) − Y) ⊙ φ′(z)
    let mut delta = Array2::<f64>::zeros(z.dim());
    Zip::from(&mut delta)
        .and(&z)
        .and(&y)
        .for_each(|d, &zv, &yv| {
            let phi = zv.max(0.0);
            let r = phi - yv;
            fit += r * r;
            *d = if zv > 0.0 { r } else { 0.0 };
        });
    let reg = w.weights.iter().map(|v| v * v).sum::<f64>();
    let loss = (fit + w.lambda_c * reg) / nf;
    let mut d_weights = delta.dot(&x.t()) * (2.0 / nf);
    d_weights.scaled_add(2.0 * w.lambda_c / nf, &w.weights);
    let d_features = w.weights.t().dot(&delta) * (2.0 / nf);
    Ok(ClassifierGrads {
        loss,
        d_weights,
        d_features,
    })
}
