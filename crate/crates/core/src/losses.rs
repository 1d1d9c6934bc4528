//! Cross-entropy plus soft Dice over softmax probabilities, mixed as
//! `(1−λ)·CE + λ·Dice`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda: f64,
    pub dice_smooth: f64,
    /// Average Dice over all K classes (true) or over classes 1..K.
    pub include_background: bool,
    /// Compute Dice per image and average (true) or over the whole batch.
    pub per_image: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.8,
            dice_smooth: 1e-5,
            include_background: true,
            per_image: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub dice: f64,
}

fn check<T: Real>(logits: &Tensor<T>, labels: &[u8]) -> Result<usize> {
    let k = *logits.shape.last().ok_or_else(|| Error::Shape("scalar logits".into()))?;
    if k < 2 || logits.len() != labels.len() * k {
        return Err(Error::Shape(format!(
            "logits {:?} do not match {} labels",
            logits.shape,
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
    }
    if !logits.all_finite() {
        return Err(Error::NonFiniteActivation("logits".into()));
    }
    Ok(k)
}

/// Row-wise softmax over the last axis.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let k = *logits.shape.last().unwrap();
    let mut out = logits.clone();
    for row in out.data.chunks_exact_mut(k) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// Mean negative log-likelihood over pixels.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[u8]) -> Result<f64> {
    let k = check(logits, labels)?;
    let mut total = 0.0;
    for (row, &g) in logits.data.chunks_exact(k).zip(labels) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, b| a.max(b.as_f64()));
        let lse = m + row.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln();
        total += lse - row[g as usize].as_f64();
    }
    Ok(total / labels.len() as f64)
}

fn dice_classes(k: usize, w: &LossWeights) -> std::ops::Range<usize> {
    if w.include_background {
        0..k
    } else {
        1..k
    }
}

/// Groups of pixel rows over which Dice is pooled.
fn dice_groups(logits_shape: &[usize], per_image: bool) -> usize {
    if per_image && logits_shape.len() == 4 {
        logits_shape[0]
    } else {
        1
    }
}

/// `1 − mean_k (2·I_k + s) / (P_k + G_k + s)` on softmax probabilities.
pub fn dice_loss<T: Real>(logits: &Tensor<T>, labels: &[u8], w: &LossWeights) -> Result<f64> {
    let k = check(logits, labels)?;
    let p = softmax(logits);
    let groups = dice_groups(&logits.shape, w.per_image);
    let per = labels.len() / groups;
    let classes = dice_classes(k, w);
    let s = w.dice_smooth;
    let mut acc = 0.0;
    for g in 0..groups {
        let rows = p.data[g * per * k..(g + 1) * per * k].chunks_exact(k);
        let lab = &labels[g * per..(g + 1) * per];
        let (mut inter, mut psum, mut gsum) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
        for (row, &l) in rows.zip(lab) {
            for c in 0..k {
                psum[c] += row[c].as_f64();
            }
            inter[l as usize] += row[l as usize].as_f64();
            gsum[l as usize] += 1.0;
        }
        let mean: f64 = classes
            .clone()
            .map(|c| (2.0 * inter[c] + s) / (psum[c] + gsum[c] + s))
            .sum::<f64>()
            / classes.len() as f64;
        acc += 1.0 - mean;
    }
    Ok(acc / groups as f64)
}

/// Loss value and its gradient with respect to the logits.
pub fn combined_loss_and_grad<T: Real>(
    logits: &Tensor<T>,
    labels: &[u8],
    w: &LossWeights,
) -> Result<(LossParts, Tensor<T>)> {
    let k = check(logits, labels)?;
    let ce = cross_entropy(logits, labels)?;
    let dice = dice_loss(logits, labels, w)?;
    let lam = w.lambda;
    let p = softmax(logits);
    let n = labels.len();
    let groups = dice_groups(&logits.shape, w.per_image);
    let per = n / groups;
    let classes = dice_classes(k, w);
    let kc = classes.len() as f64;
    let s = w.dice_smooth;
    let mut grad = vec![T::zero(); logits.len()];
    let mut dp = vec![0.0; k];
    for g in 0..groups {
        let span = g * per..(g + 1) * per;
        let (mut inter, mut psum, mut gsum) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
        for i in span.clone() {
            let row = &p.data[i * k..(i + 1) * k];
            let l = labels[i] as usize;
            for c in 0..k {
                psum[c] += row[c].as_f64();
            }
            inter[l] += row[l].as_f64();
            gsum[l] += 1.0;
        }
        // d(dice)/dp_c for a pixel: −(1/Kc)·(2g·S − (2I+s)) / S², S = P+G+s.
        let mut coef_g = vec![0.0; k];
        let mut coef_0 = vec![0.0; k];
        for c in classes.clone() {
            let sden = psum[c] + gsum[c] + s;
            let num = 2.0 * inter[c] + s;
            coef_g[c] = -(2.0 * sden) / (sden * sden * kc);
            coef_0[c] = num / (sden * sden * kc);
        }
        let dice_scale = lam / groups as f64;
        for i in span {
            let row = &p.data[i * k..(i + 1) * k];
            let l = labels[i] as usize;
            for c in 0..k {
                let gi = if c == l { 1.0 } else { 0.0 };
                dp[c] = dice_scale * (coef_0[c] + gi * coef_g[c]);
            }
            let dot: f64 = (0..k).map(|c| row[c].as_f64() * dp[c]).sum();
            for c in 0..k {
                let pc = row[c].as_f64();
                let gi = if c == l { 1.0 } else { 0.0 };
                let d_ce = (1.0 - lam) * (pc - gi) / n as f64;
                grad[i * k + c] = T::lit(d_ce + pc * (dp[c] - dot));
            }
        }
    }
    let parts = LossParts {
        total: (1.0 - lam) * ce + lam * dice,
        ce,
        dice,
    };
    Ok((parts, Tensor::from_vec(&logits.shape, grad)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits() -> (Tensor<f64>, Vec<u8>) {
        let v = (0..2 * 3 * 2 * 4).map(|i| ((i * 37 % 17) as f64 - 8.0) / 3.0).collect();
        let labels = (0..12).map(|i| (i * 7 % 4) as u8).collect();
        (Tensor::from_vec(&[2, 3, 2, 4], v), labels)
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let t = Tensor::from_vec(&[1, 1, 2, 9], vec![0.0f64; 18]);
        let ce = cross_entropy(&t, &[0, 8]).unwrap();
        assert!((ce - 9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dice_by_hand() {
        // two pixels, two classes, p = [0.5, 0.5] each, labels [0, 1]
        let t = Tensor::from_vec(&[1, 1, 2, 2], vec![0.0f64; 4]);
        let w = LossWeights {
            dice_smooth: 0.0,
            ..Default::default()
        };
        // class 0: I=0.5, P=1, G=1 → 0.5; same for class 1.
        assert!((dice_loss(&t, &[0, 1], &w).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn lambda_endpoints() {
        let (t, l) = logits();
        let ce = cross_entropy(&t, &l).unwrap();
        let d = dice_loss(&t, &l, &LossWeights::default()).unwrap();
        for (lam, want) in [(0.0, ce), (1.0, d), (0.8, 0.2 * ce + 0.8 * d)] {
            let w = LossWeights {
                lambda: lam,
                ..Default::default()
            };
            let (parts, _) = combined_loss_and_grad(&t, &l, &w).unwrap();
            assert!((parts.total - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_central_difference() {
        let (t, l) = logits();
        for (bg, per_image) in [(true, false), (false, true)] {
            let w = LossWeights {
                include_background: bg,
                per_image,
                ..Default::default()
            };
            let (_, g) = combined_loss_and_grad(&t, &l, &w).unwrap();
            let f = |x: &Tensor<f64>| combined_loss_and_grad(x, &l, &w).unwrap().0.total;
            for i in 0..t.len() {
                let mut a = t.clone();
                a.data[i] += 1e-6;
                let mut b = t.clone();
                b.data[i] -= 1e-6;
                let fd = (f(&a) - f(&b)) / 2e-6;
                assert!((fd - g.data[i]).abs() < 1e-7, "{i}: {fd} vs {}", g.data[i]);
            }
        }
    }

    #[test]
    fn rejects_bad_labels_and_nan() {
        let (mut t, mut l) = logits();
        l[0] = 4;
        assert!(matches!(cross_entropy(&t, &l), Err(Error::Data(_))));
        l[0] = 0;
        t.data[0] = f64::NAN;
        assert!(matches!(cross_entropy(&t, &l), Err(Error::NonFiniteActivation(_))));
    }
}
