//! Standalone losses and token selection used by training.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::reader::ops;

/// Mean token cross-entropy over positions whose label is not `ignore`.
/// Returns the loss and its gradient with respect to `logits`.
pub fn task_loss(logits: ArrayView2<f64>, labels: &[u32], ignore: Option<u32>) -> Result<(f64, Array2<f64>)> {
    if logits.nrows() != labels.len() {
        return Err(Error::invalid(format!(
            "{} logit rows for {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= logits.ncols()) {
        return Err(Error::invalid(format!("label {bad} outside {} classes", logits.ncols())));
    }
    let keep: Vec<usize> = (0..labels.len()).filter(|&i| Some(labels[i]) != ignore).collect();
    let mut grad = Array2::zeros(logits.raw_dim());
    if keep.is_empty() {
        return Ok((0.0, grad));
    }
    let sub = logits.select(ndarray::Axis(0), &keep);
    let sub_labels: Vec<u32> = keep.iter().map(|&i| labels[i]).collect();
    let (loss, g) = ops::cross_entropy(&sub, &sub_labels);
    for (row, &i) in g.rows().into_iter().zip(&keep) {
        grad.row_mut(i).assign(&row);
    }
    Ok((loss, grad))
}

/// Passage positions most attended from the query in one attention layer.
///
/// `probs` holds one `n × n` matrix per head over `query ⊕ passage`, the query
/// taking the first `q_len` rows. Scores average over heads and query rows;
/// the top `floor(ratio · L)` positions are returned in ascending order, ties
/// going to the lower index.
pub fn select_salient_tokens(probs: &[Array2<f64>], q_len: usize, ratio: f64) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!("selection ratio {ratio} outside (0, 1]")));
    }
    let Some(first) = probs.first() else {
        return Err(Error::invalid("no attention heads"));
    };
    let n = first.ncols();
    if q_len > n || probs.iter().any(|p| p.ncols() != n || p.nrows() < q_len) {
        return Err(Error::invalid("attention maps have inconsistent shapes"));
    }
    let len = n - q_len;
    let mut scores = vec![0.0; len];
    if q_len > 0 {
        for p in probs {
            for i in 0..q_len {
                for (j, s) in scores.iter_mut().enumerate() {
                    *s += p[[i, q_len + j]];
                }
            }
        }
        let denom = (probs.len() * q_len) as f64;
        scores.iter_mut().for_each(|s| *s /= denom);
    }
    let take = ((ratio * len as f64) + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut out: Vec<usize> = order.into_iter().take(take.min(len)).collect();
    out.sort_unstable();
    Ok(out)
}

/// Mean over selected tokens and dimensions of `(teacher - student)^2`, and
/// its gradient with respect to `student`.
pub fn distill_loss(
    teacher: ArrayView2<f64>,
    student: ArrayView2<f64>,
    selected: &[usize],
) -> Result<(f64, Array2<f64>)> {
    if teacher.dim() != student.dim() {
        return Err(Error::invalid("teacher and student shapes differ"));
    }
    let mut grad = Array2::zeros(student.raw_dim());
    if let Some(&bad) = selected.iter().find(|&&j| j >= student.nrows()) {
        return Err(Error::invalid(format!("selected index {bad} out of range")));
    }
    if selected.is_empty() {
        return Ok((0.0, grad));
    }
    let count = (selected.len() * student.ncols()) as f64;
    let mut loss = 0.0;
    for &j in selected {
        let diff = &student.row(j) - &teacher.row(j);
        loss += diff.dot(&diff);
        let mut g = grad.row_mut(j);
        g.scaled_add(2.0 / count, &diff);
    }
    Ok((loss / count, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, rel_error};
    use ndarray::array;

    #[test]
    fn task_loss_values_and_gradient() {
        let uniform = Array2::zeros((3, 7));
        let (l, _) = task_loss(uniform.view(), &[1, 2, 3], None).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-12);
        let logits = array![[0.3, -1.0, 2.0], [1.5, 0.2, -0.7], [0.0, 0.4, 0.1]];
        let labels = [2, 0, 1];
        let (_, g) = task_loss(logits.view(), &labels, None).unwrap();
        let f = |v: &[f64]| {
            let m = Array2::from_shape_vec((3, 3), v.to_vec()).unwrap();
            task_loss(m.view(), &labels, None).unwrap().0
        };
        let num = central_difference(f, logits.as_slice().unwrap(), 1e-6);
        assert!(rel_error(g.as_slice().unwrap(), &num) < 1e-4);
        assert!(task_loss(logits.view(), &[0, 1], None).is_err());
        let (masked, g) = task_loss(logits.view(), &[2, 0, 0], Some(0)).unwrap();
        assert!((masked - task_loss(logits.slice(ndarray::s![..1, ..]), &[2], None).unwrap().0).abs() < 1e-12);
        assert_eq!(g.row(1).sum(), 0.0);
    }

    #[test]
    fn selection_rules() {
        let uniform = vec![Array2::from_elem((6, 6), 1.0 / 6.0); 2];
        assert_eq!(select_salient_tokens(&uniform, 2, 0.5).unwrap(), vec![0, 1]);
        assert_eq!(select_salient_tokens(&uniform, 2, 1.0).unwrap(), vec![0, 1, 2, 3]);
        let mut peaked = Array2::from_elem((6, 6), 0.01);
        peaked[[0, 5]] = 0.9;
        peaked[[1, 5]] = 0.9;
        for r in [0.25, 0.5, 0.75, 1.0] {
            assert!(select_salient_tokens(&[peaked.clone()], 2, r).unwrap().contains(&3));
        }
        assert!(select_salient_tokens(&uniform, 2, 0.0).is_err());
    }

    #[test]
    fn distill_values_and_gradient() {
        let t = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(distill_loss(t.view(), t.view(), &[0, 1]).unwrap().0, 0.0);
        let s = &t + 1.0;
        assert_eq!(distill_loss(t.view(), s.view(), &[1]).unwrap().0, 1.0);
        let s = array![[0.3, 2.5], [2.0, 4.4]];
        let (_, g) = distill_loss(t.view(), s.view(), &[1]).unwrap();
        let f = |v: &[f64]| {
            let m = Array2::from_shape_vec((2, 2), v.to_vec()).unwrap();
            distill_loss(t.view(), m.view(), &[1]).unwrap().0
        };
        let num = central_difference(f, s.as_slice().unwrap(), 1e-6);
        assert!(rel_error(g.as_slice().unwrap(), &num) < 1e-4);
        assert!(distill_loss(t.view(), s.view(), &[2]).is_err());
    }
}
