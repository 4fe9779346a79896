//! Training objectives and their gradients with respect to logits.
//!
//! Every loss takes raw (unnormalized) logits and returns its value together
//! with the gradient laid out like the input, so the model's tape can attach
//! it as a single node. All arithmetic is in log space.

use crate::error::{Error, Result};
use crate::tensor::{log_add_exp, log_softmax, Mat};

/// Audio tokens per video frame (100 Hz tokens against 25 fps video).
pub const TOKENS_PER_FRAME: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Same shape as the logits the loss was computed from.
    pub grad: Mat,
}

/// Scalars reported for one sample or averaged over a batch.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBundle {
    pub l_word: Option<f64>,
    pub l_ctc: Option<f64>,
    pub l_lm: Option<f64>,
    pub l_task: f64,
    pub l_sync: f64,
    pub l_total: f64,
    pub alpha: f64,
    pub lambda: f64,
}

/// Cross-entropy of a single class distribution.
pub fn word_ce(logits: &[f64], label: usize) -> Result<LossValue> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let lp = log_softmax(logits);
    let mut grad: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
    grad[label] -= 1.0;
    Ok(LossValue {
        value: -lp[label],
        grad: Mat::row_vector(grad),
    })
}

/// Minimum number of frames a CTC path needs to emit `target`.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log of the total probability of all frame-level paths that
/// collapse to `target`. The last column of `logits` is the blank.
pub fn ctc_loss(logits: &Mat, target: &[usize]) -> Result<LossValue> {
    let (frames, classes) = logits.shape();
    if classes < 2 {
        return Err(Error::ShapeMismatch(format!(
            "CTC needs at least one label plus blank, got {classes} columns"
        )));
    }
    let blank = classes - 1;
    if let Some(&bad) = target.iter().find(|&&y| y >= blank) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: blank,
        });
    }
    let required = ctc_min_frames(target);
    if frames == 0 || frames < required {
        return Err(Error::InfeasibleCtc { frames, required });
    }

    let lp: Vec<Vec<f64>> = (0..frames).map(|t| log_softmax(logits.row(t))).collect();
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &y in target {
        ext.push(y);
        ext.push(blank);
    }
    let states = ext.len();
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![vec![ninf; states]; frames];
    alpha[0][0] = lp[0][blank];
    if states > 1 {
        alpha[0][1] = lp[0][ext[1]];
    }
    for t in 1..frames {
        for s in 0..states {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = log_add_exp(acc, alpha[t - 1][s - 1]);
            }
            if skip_ok(s) {
                acc = log_add_exp(acc, alpha[t - 1][s - 2]);
            }
            if acc != ninf {
                alpha[t][s] = acc + lp[t][ext[s]];
            }
        }
    }

    // beta[t][s]: log-probability of finishing from state s at frame t,
    // excluding the emission at t itself.
    let mut beta = vec![vec![ninf; states]; frames];
    beta[frames - 1][states - 1] = 0.0;
    if states > 1 {
        beta[frames - 1][states - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let mut acc = lp[t + 1][ext[s]] + beta[t + 1][s];
            if s + 1 < states {
                acc = log_add_exp(acc, lp[t + 1][ext[s + 1]] + beta[t + 1][s + 1]);
            }
            if s + 2 < states && skip_ok(s + 2) {
                acc = log_add_exp(acc, lp[t + 1][ext[s + 2]] + beta[t + 1][s + 2]);
            }
            beta[t][s] = acc;
        }
    }

    let last = &alpha[frames - 1];
    let log_p = if states > 1 {
        log_add_exp(last[states - 1], last[states - 2])
    } else {
        last[0]
    };

    let mut grad = Mat::zeros(frames, classes);
    let mut occupancy = vec![ninf; classes];
    for t in 0..frames {
        occupancy.fill(ninf);
        for s in 0..states {
            occupancy[ext[s]] = log_add_exp(occupancy[ext[s]], alpha[t][s] + beta[t][s]);
        }
        for (k, g) in grad.row_mut(t).iter_mut().enumerate() {
            *g = lp[t][k].exp() - (occupancy[k] - log_p).exp();
        }
    }
    Ok(LossValue {
        value: -log_p,
        grad,
    })
}

/// Mean per-position cross-entropy of teacher-forced decoder logits.
pub fn lm_loss(logits: &Mat, target: &[usize]) -> Result<LossValue> {
    let (len, classes) = logits.shape();
    if len != target.len() || len == 0 {
        return Err(Error::ShapeMismatch(format!(
            "decoder produced {len} positions for a target of length {}",
            target.len()
        )));
    }
    let mut grad = Mat::zeros(len, classes);
    let mut total = 0.0;
    for (i, &y) in target.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        let lp = log_softmax(logits.row(i));
        total -= lp[y];
        for (g, l) in grad.row_mut(i).iter_mut().zip(&lp) {
            *g = l.exp() / len as f64;
        }
        grad[(i, y)] -= 1.0 / len as f64;
    }
    Ok(LossValue {
        value: total / len as f64,
        grad,
    })
}

fn token_ce(logits: &Mat, grid: &[u16], frames: &[bool], pad_id: u16) -> Result<LossValue> {
    let (t_len, width) = logits.shape();
    if width % TOKENS_PER_FRAME != 0 || grid.len() != t_len * TOKENS_PER_FRAME {
        return Err(Error::ShapeMismatch(format!(
            "sync logits {t_len}x{width} against a token grid of {} entries",
            grid.len()
        )));
    }
    if frames.len() != t_len {
        return Err(Error::ShapeMismatch(format!(
            "mask of {} frames against {t_len} frames",
            frames.len()
        )));
    }
    let vocab = width / TOKENS_PER_FRAME;
    let mut grad = Mat::zeros(t_len, width);
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 0..t_len {
        if !frames[t] {
            continue;
        }
        for r in 0..TOKENS_PER_FRAME {
            let z = grid[t * TOKENS_PER_FRAME + r];
            if z == pad_id {
                continue;
            }
            let z = z as usize;
            if z >= vocab {
                return Err(Error::LabelOutOfRange {
                    label: z,
                    classes: vocab,
                });
            }
            let span = r * vocab..(r + 1) * vocab;
            let lp = log_softmax(&logits.row(t)[span.clone()]);
            total -= lp[z];
            count += 1;
            let g = &mut grad.row_mut(t)[span];
            for (gv, l) in g.iter_mut().zip(&lp) {
                *gv = l.exp();
            }
            g[z] -= 1.0;
        }
    }
    if count == 0 {
        return Err(Error::AllPadded);
    }
    let n = count as f64;
    grad.scale(1.0 / n);
    Ok(LossValue {
        value: total / n,
        grad,
    })
}

/// Mean cross-entropy over every non-pad audio token of a `T × 4` grid.
///
/// `logits` is `T × (4·V)`: frame `t`, slot `r` owns columns `r·V..(r+1)·V`.
pub fn sync_loss(logits: &Mat, grid: &[u16], pad_id: u16) -> Result<LossValue> {
    token_ce(logits, grid, &vec![true; logits.rows()], pad_id)
}

/// [`sync_loss`] restricted to frames where `mask` is true.
pub fn masked_sync_loss(logits: &Mat, grid: &[u16], mask: &[bool], pad_id: u16) -> Result<LossValue> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyMask);
    }
    token_ce(logits, grid, mask, pad_id)
}

/// `α·l_ctc + (1 − α)·l_lm`
pub fn task_loss(l_ctc: f64, l_lm: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(alpha * l_ctc + (1.0 - alpha) * l_lm)
}

/// `l_task + λ·l_sync`
pub fn total_loss(l_task: f64, l_sync: f64, lambda: f64) -> Result<f64> {
    if lambda < 0.0 || lambda.is_nan() {
        return Err(Error::InvalidArgument(format!("lambda {lambda} is negative")));
    }
    Ok(l_task + lambda * l_sync)
}
