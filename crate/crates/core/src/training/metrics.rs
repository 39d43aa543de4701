//! Alignment metrics. Ties always count as failures.

use ndarray::ArrayView2;

use super::TrainError;

/// Fraction of rows `i` whose most similar text row is exactly `i`.
pub fn eval_retrieval(
    f_v: ArrayView2<'_, f64>,
    f_l: ArrayView2<'_, f64>,
) -> Result<f64, TrainError> {
    if f_v.nrows() == 0 {
        return Err(TrainError::EmptyEval("retrieval"));
    }
    if f_v.dim() != f_l.dim() {
        return Err(TrainError::Config(format!(
            "retrieval batches differ in shape: {:?} vs {:?}",
            f_v.dim(),
            f_l.dim()
        )));
    }
    let sims = f_v.dot(&f_l.t());
    let hits = (0..sims.nrows())
        .filter(|&i| {
            let own = sims[[i, i]];
            sims.row(i)
                .iter()
                .enumerate()
                .all(|(j, &s)| j == i || s < own)
        })
        .count();
    Ok(hits as f64 / sims.nrows() as f64)
}

/// Fraction of objects whose nearest foreground category (rows `1..` of
/// `categories`) is their label.
pub fn eval_object_alignment(
    objects: ArrayView2<'_, f64>,
    categories: ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<f64, TrainError> {
    if objects.nrows() == 0 || categories.nrows() < 2 {
        return Err(TrainError::EmptyEval("object alignment"));
    }
    if labels.len() != objects.nrows() {
        return Err(TrainError::Config(format!(
            "{} objects but {} labels",
            objects.nrows(),
            labels.len()
        )));
    }
    let sims = objects.dot(&categories.t());
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &label)| {
            let own = sims[[i, label]];
            (1..sims.ncols()).all(|j| j == label || sims[[i, j]] < own)
        })
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Fraction of rows where the confused description scores at least as high
/// as the true one.
pub fn eval_confusion(
    f_v: ArrayView2<'_, f64>,
    anchors: ArrayView2<'_, f64>,
    confused: ArrayView2<'_, f64>,
) -> Result<f64, TrainError> {
    if f_v.nrows() == 0 {
        return Err(TrainError::EmptyEval("sibling confusion"));
    }
    let hits = (0..f_v.nrows())
        .filter(|&i| f_v.row(i).dot(&confused.row(i)) >= f_v.row(i).dot(&anchors.row(i)))
        .count();
    Ok(hits as f64 / f_v.nrows() as f64)
}
