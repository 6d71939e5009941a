//! Deterministic dense tensors and fully connected networks with manual
//! backpropagation.

mod model;
mod optim;
mod serialize;
mod tensor;

pub use model::{init_model, Activation, FcnnModel, ForwardCache, GradientSet, Layer, LayerGrad};
pub use optim::Adam;
pub use serialize::{decode_model, decode_model_with, encode_model, FORMAT_VERSION, MAGIC};
pub use tensor::Tensor2;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("backward pass without cached activations: {0}")]
    MissingCache(String),
    #[error("malformed model bytes: {0}")]
    Decode(String),
}

/// Row-wise softmax with max-shift.
pub fn softmax_rows(logits: &Tensor2) -> Tensor2 {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        row.iter_mut().for_each(|x| *x /= sum);
    }
    out
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows(t: &Tensor2) -> Vec<usize> {
    t.iter_rows()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

/// Mean softmax cross-entropy over the batch, and its gradient w.r.t. the logits.
pub fn cross_entropy_loss(logits: &Tensor2, labels: &[usize]) -> Result<(f64, Tensor2), NnError> {
    if logits.rows() != labels.len() {
        return Err(NnError::Shape {
            op: "cross_entropy_loss",
            detail: format!("{} logit rows for {} labels", logits.rows(), labels.len()),
        });
    }
    if labels.is_empty() {
        return Err(NnError::Input("empty batch".into()));
    }
    let classes = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(NnError::Input(format!("label {bad} with {classes} classes")));
    }
    let n = labels.len() as f64;
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        let g = grad.row_mut(r);
        g[y] -= 1.0;
        g.iter_mut().for_each(|x| *x /= n);
    }
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests;
