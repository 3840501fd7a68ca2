//! The four detection loss terms, as differentiable functions of the head
//! outputs given fixed (already matched and sampled) targets.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::log_softmax_last;

/// Sampled anchors for one image with the regression targets of positives.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RpnTargets {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    /// Normalized deltas, one per entry of `positives`.
    pub pos_deltas: Vec<[f64; 4]>,
}

/// Sampled RoIs for one image. `labels[i] == num_classes` means background.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoiTargets {
    pub labels: Vec<usize>,
    /// `(row, normalized delta)` for every foreground row.
    pub regression: Vec<(usize, [f64; 4])>,
}

fn index_tensor(idx: &[usize], like: &Tensor) -> Result<Tensor> {
    let v: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
    Ok(Tensor::from_vec(v, idx.len(), like.device())?)
}

fn constant(values: Vec<f64>, shape: &[usize], like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, like.device())?.to_dtype(like.dtype())?)
}

fn zero(like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::zeros((), like.dtype(), like.device())?)
}

/// Element-wise smooth-L1 between `pred` and `target`, summed.
pub fn smooth_l1_sum(pred: &Tensor, target: &Tensor, beta: f64) -> Result<Tensor> {
    let d = (pred - target)?;
    let ad = d.abs()?;
    let quad = (d.sqr()? * (0.5 / beta))?;
    let lin = (&ad - 0.5 * beta)?;
    let small = ad.lt(beta)?;
    Ok(small.where_cond(&quad, &lin)?.sum_all()?)
}

/// Binary cross-entropy with logits, averaged. Computed as a two-way
/// log-softmax over `[0, x]`, which is smooth everywhere.
pub fn binary_cross_entropy(logits: &Tensor, labels: &[f64]) -> Result<Tensor> {
    let n = logits.dim(0)?;
    let pair = Tensor::stack(&[&logits.zeros_like()?, logits], 1)?;
    let lp = log_softmax_last(&pair)?;
    let mut mask = Vec::with_capacity(2 * n);
    for &y in labels {
        mask.push(1.0 - y);
        mask.push(y);
    }
    let mask = constant(mask, &[n, 2], logits)?;
    Ok(((lp * mask)?.sum_all()? * (-1.0 / n as f64))?)
}

/// Cross-entropy over the last axis of `(n, k)` logits, averaged over rows.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    let mut onehot = vec![0.0; n * k];
    for (i, &c) in labels.iter().enumerate() {
        onehot[i * k + c] = 1.0;
    }
    let mask = constant(onehot, &[n, k], logits)?;
    Ok(((log_softmax_last(logits)? * mask)?.sum_all()? * (-1.0 / n as f64))?)
}

/// `(rpn_cls, rpn_reg)` for one image. `objectness` is `(anchors,)`,
/// `deltas` is `(anchors, 4)`.
pub fn rpn_loss(objectness: &Tensor, deltas: &Tensor, t: &RpnTargets, beta: f64) -> Result<(Tensor, Tensor)> {
    if t.positives.is_empty() && t.negatives.is_empty() {
        return Err(Error::config("RPN sample is empty: no positive or negative anchors"));
    }
    let idx: Vec<usize> = t.positives.iter().chain(&t.negatives).copied().collect();
    let labels: Vec<f64> = t
        .positives
        .iter()
        .map(|_| 1.0)
        .chain(t.negatives.iter().map(|_| 0.0))
        .collect();
    let picked = objectness.index_select(&index_tensor(&idx, objectness)?, 0)?;
    let cls = binary_cross_entropy(&picked, &labels)?;
    let reg = if t.positives.is_empty() {
        zero(objectness)?
    } else {
        let p = t.positives.len();
        let pred = deltas.index_select(&index_tensor(&t.positives, deltas)?, 0)?;
        let target = constant(t.pos_deltas.iter().flatten().copied().collect(), &[p, 4], deltas)?;
        (smooth_l1_sum(&pred, &target, beta)? / p as f64)?
    };
    Ok((cls, reg))
}

/// `(roi_cls, roi_reg)` for one image. `cls_logits` is `(rois, C+1)` and
/// `box_deltas` is `(rois, 4·C)` with class-specific deltas.
pub fn roi_loss(cls_logits: &Tensor, box_deltas: &Tensor, t: &RoiTargets, beta: f64) -> Result<(Tensor, Tensor)> {
    let (r, k) = cls_logits.dims2()?;
    let num_classes = k - 1;
    if r == 0 {
        return Ok((zero(cls_logits)?, zero(cls_logits)?));
    }
    let cls = cross_entropy(cls_logits, &t.labels)?;
    let reg = if t.regression.is_empty() {
        zero(cls_logits)?
    } else {
        let rows: Vec<usize> = t
            .regression
            .iter()
            .map(|&(row, _)| row * num_classes + t.labels[row])
            .collect();
        let per_class = box_deltas.reshape((r * num_classes, 4))?;
        let pred = per_class.index_select(&index_tensor(&rows, box_deltas)?, 0)?;
        let target = constant(
            t.regression.iter().flat_map(|(_, d)| *d).collect(),
            &[rows.len(), 4],
            box_deltas,
        )?;
        (smooth_l1_sum(&pred, &target, beta)? / rows.len() as f64)?
    };
    Ok((cls, reg))
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
