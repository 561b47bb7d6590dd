//! Ordinal head: paired-softmax probabilities, the ordinal negative
//! log-likelihood with its analytic gradient, class decoding, and the two
//! ablation losses (K-way softmax cross-entropy and squared error).
//!
//! All maps are planar: channel `c` of a `W x H` map occupies
//! `values[c * W * H..(c + 1) * W * H]`. Channels `2k` and `2k + 1` of the
//! ordinal logits form the pair for threshold `k`, and
//! `P^k = exp(Y_{2k+1}) / (exp(Y_{2k}) + exp(Y_{2k+1}))` is the probability
//! that the true class is greater than `k`.
//!
//! Losses are averaged over pixels and accumulated in `f64` in pixel order.

use crate::discretize::{ClassMap, DiscretizationScheme, Midpoint};
use crate::error::{Error, Result};
use crate::net::{HeadKind, Real};
use crate::raster::RasterGrid;

/// Lower clamp applied to every log-probability inside the losses.
pub const LOG_CLAMP: f64 = -30.0;

fn check_len(what: &str, len: usize, width: usize, height: usize, channels: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::Shape(format!("{what} has zero size")));
    }
    if len != width * height * channels {
        return Err(Error::Shape(format!(
            "{what} {width}x{height} with {channels} channels needs {} values, got {len}",
            width * height * channels
        )));
    }
    Ok(())
}

fn check_classes(classes: &ClassMap, width: usize, height: usize, k: usize) -> Result<()> {
    if (classes.width(), classes.height()) != (width, height) {
        return Err(Error::Shape(format!(
            "class map {}x{} does not match {width}x{height}",
            classes.width(),
            classes.height()
        )));
    }
    if let Some(&c) = classes.classes().iter().find(|&&c| c as usize >= k) {
        return Err(Error::OutOfBounds(format!("class {c} >= K={k}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrdinalLogits<T> {
    width: usize,
    height: usize,
    k: usize,
    values: Vec<T>,
}

impl<T: Real> OrdinalLogits<T> {
    pub fn new(width: usize, height: usize, k: usize, values: Vec<T>) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("K must be positive".into()));
        }
        check_len("ordinal logits", values.len(), width, height, 2 * k)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ordinal logits contain non-finite values".into()));
        }
        Ok(Self {
            width,
            height,
            k,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Logit of channel `c` at pixel index `i = y * width + x`.
    pub fn at(&self, c: usize, i: usize) -> T {
        self.values[c * self.width * self.height + i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrdinalProbs<T> {
    width: usize,
    height: usize,
    k: usize,
    p: Vec<T>,
}

impl<T: Real> OrdinalProbs<T> {
    /// Validates that every probability lies strictly inside `(0, 1)`.
    pub fn new(width: usize, height: usize, k: usize, p: Vec<T>) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("K must be positive".into()));
        }
        check_len("ordinal probabilities", p.len(), width, height, k)?;
        if let Some(v) = p.iter().find(|&&v| !(v > T::zero() && v < T::one())) {
            return Err(Error::OutOfBounds(format!("probability {v} outside (0, 1)")));
        }
        Ok(Self { width, height, k, p })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn values(&self) -> &[T] {
        &self.p
    }

    /// `P^k` at pixel index `i`.
    pub fn at(&self, k: usize, i: usize) -> T {
        self.p[k * self.width * self.height + i]
    }
}

/// K-channel logits of the multi-class head.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassLogits<T> {
    width: usize,
    height: usize,
    k: usize,
    values: Vec<T>,
}

impl<T: Real> ClassLogits<T> {
    pub fn new(width: usize, height: usize, k: usize, values: Vec<T>) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("K must be positive".into()));
        }
        check_len("class logits", values.len(), width, height, k)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("class logits contain non-finite values".into()));
        }
        Ok(Self {
            width,
            height,
            k,
            values,
        })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }
}

/// `sigma(hi - lo)` with the pair maximum subtracted, kept inside `(0, 1)`.
fn pair_prob<T: Real>(lo: T, hi: T) -> T {
    let m = lo.max(hi);
    let e_lo = (lo - m).exp();
    let e_hi = (hi - m).exp();
    let p = e_hi / (e_lo + e_hi);
    let top = T::one() - T::epsilon() / T::of(2.0);
    p.max(T::min_positive_value()).min(top)
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn pair_softmax<T: Real>(logits: &OrdinalLogits<T>) -> Result<OrdinalProbs<T>> {
    if logits.values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN logit".into()));
    }
    let n = logits.width * logits.height;
    let mut p = Vec::with_capacity(logits.k * n);
    for k in 0..logits.k {
        let lo = &logits.values[2 * k * n..(2 * k + 1) * n];
        let hi = &logits.values[(2 * k + 1) * n..(2 * k + 2) * n];
        p.extend(lo.iter().zip(hi).map(|(&a, &b)| pair_prob(a, b)));
    }
    Ok(OrdinalProbs {
        width: logits.width,
        height: logits.height,
        k: logits.k,
        p,
    })
}

/// Mean over pixels of `-(sum_{k<C} ln P^k + sum_{k>=C} ln(1 - P^k))`.
pub fn ordinal_nll<T: Real>(probs: &OrdinalProbs<T>, classes: &ClassMap) -> Result<f64> {
    check_classes(classes, probs.width, probs.height, probs.k)?;
    let n = probs.width * probs.height;
    let mut total = 0.0;
    for (i, &c) in classes.classes().iter().enumerate() {
        for k in 0..probs.k {
            let p = probs.p[k * n + i].as_f64();
            let lp = if k < c as usize { p.ln() } else { (-p).ln_1p() };
            total -= lp.max(LOG_CLAMP);
        }
    }
    Ok(total / n as f64)
}

/// Gradient of [`ordinal_nll`] composed with [`pair_softmax`], with respect
/// to the logits. Same layout as the logits.
pub fn ordinal_nll_grad<T: Real>(logits: &OrdinalLogits<T>, classes: &ClassMap) -> Result<Vec<T>> {
    Ok(ordinal_loss_and_grad(logits, classes)?.1)
}

/// Loss and logit gradient in one pass. The loss is evaluated in log space,
/// `ln P^k = -softplus(Y_{2k} - Y_{2k+1})`, so saturated pairs stay finite.
pub fn ordinal_loss_and_grad<T: Real>(
    logits: &OrdinalLogits<T>,
    classes: &ClassMap,
) -> Result<(f64, Vec<T>)> {
    check_classes(classes, logits.width, logits.height, logits.k)?;
    let n = logits.width * logits.height;
    let inv_n = T::of(1.0 / n as f64);
    let mut grad = vec![T::zero(); logits.values.len()];
    let mut total = 0.0;
    for (i, &c) in classes.classes().iter().enumerate() {
        for k in 0..logits.k {
            let lo = logits.values[2 * k * n + i];
            let hi = logits.values[(2 * k + 1) * n + i];
            let d = (hi - lo).as_f64();
            let above = k < c as usize;
            let lp = if above { -softplus(-d) } else { -softplus(d) };
            total -= lp.max(LOG_CLAMP);
            let s = pair_prob(lo, hi);
            let b = if above { T::one() } else { T::zero() };
            grad[(2 * k + 1) * n + i] = (s - b) * inv_n;
            grad[2 * k * n + i] = (b - s) * inv_n;
        }
    }
    Ok((total / n as f64, grad))
}

/// Counts thresholds with `P^k > 0.5`, clamped to `K - 1`.
pub fn decode_class<T: Real>(probs: &OrdinalProbs<T>) -> Result<ClassMap> {
    let n = probs.width * probs.height;
    let half = T::of(0.5);
    let classes = (0..n)
        .map(|i| {
            let count = (0..probs.k).filter(|&k| probs.p[k * n + i] > half).count();
            count.min(probs.k - 1) as u16
        })
        .collect();
    ClassMap::new(probs.width, probs.height, probs.k, classes)
}

fn softmax_at<T: Real>(logits: &ClassLogits<T>, i: usize, out: &mut [f64]) {
    let n = logits.width * logits.height;
    let m = (0..logits.k)
        .map(|c| logits.values[c * n + i].as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (c, o) in out.iter_mut().enumerate() {
        *o = (logits.values[c * n + i].as_f64() - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Mean softmax cross-entropy over the K channels.
pub fn mcc_loss<T: Real>(logits: &ClassLogits<T>, classes: &ClassMap) -> Result<f64> {
    Ok(mcc_loss_and_grad(logits, classes)?.0)
}

/// `(softmax - onehot) / HW`, same layout as the logits.
pub fn mcc_grad<T: Real>(logits: &ClassLogits<T>, classes: &ClassMap) -> Result<Vec<T>> {
    Ok(mcc_loss_and_grad(logits, classes)?.1)
}

pub fn mcc_loss_and_grad<T: Real>(logits: &ClassLogits<T>, classes: &ClassMap) -> Result<(f64, Vec<T>)> {
    check_classes(classes, logits.width, logits.height, logits.k)?;
    let n = logits.width * logits.height;
    let mut grad = vec![T::zero(); logits.values.len()];
    let mut sm = vec![0.0; logits.k];
    let mut total = 0.0;
    for (i, &c) in classes.classes().iter().enumerate() {
        softmax_at(logits, i, &mut sm);
        total -= sm[c as usize].ln().max(LOG_CLAMP);
        for (k, &s) in sm.iter().enumerate() {
            let b = if k == c as usize { 1.0 } else { 0.0 };
            grad[k * n + i] = T::of((s - b) / n as f64);
        }
    }
    Ok((total / n as f64, grad))
}

/// Argmax class per pixel; ties go to the lower class.
pub fn decode_argmax<T: Real>(logits: &ClassLogits<T>) -> Result<ClassMap> {
    let n = logits.width * logits.height;
    let classes = (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..logits.k {
                if logits.values[c * n + i] > logits.values[best * n + i] {
                    best = c;
                }
            }
            best as u16
        })
        .collect();
    ClassMap::new(logits.width, logits.height, logits.k, classes)
}

/// Mean squared error over equally sized value slices.
pub fn mse_values<T: Real>(pred: &[T], truth: &[T]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "mse needs equal non-empty inputs, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let s: f64 = pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| {
            let d = p.as_f64() - t.as_f64();
            d * d
        })
        .sum();
    Ok(s / pred.len() as f64)
}

/// `2 (pred - truth) / N`.
pub fn mse_values_grad<T: Real>(pred: &[T], truth: &[T]) -> Result<Vec<T>> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Shape("mse gradient needs equal non-empty inputs".into()));
    }
    let scale = T::of(2.0 / pred.len() as f64);
    Ok(pred.iter().zip(truth).map(|(&p, &t)| (p - t) * scale).collect())
}

fn check_grids(pred: &RasterGrid, truth: &RasterGrid) -> Result<()> {
    if (pred.width(), pred.height()) != (truth.width(), truth.height()) {
        return Err(Error::Shape(format!(
            "prediction {}x{} and truth {}x{} differ",
            pred.width(),
            pred.height(),
            truth.width(),
            truth.height()
        )));
    }
    Ok(())
}

pub fn mse_loss(pred: &RasterGrid, truth: &RasterGrid) -> Result<f64> {
    check_grids(pred, truth)?;
    mse_values(pred.data(), truth.data())
}

pub fn mse_grad(pred: &RasterGrid, truth: &RasterGrid) -> Result<Vec<f32>> {
    check_grids(pred, truth)?;
    mse_values_grad(pred.data(), truth.data())
}

/// Loss and output gradient for one sample of any head. `output` is the
/// planar `(C, H, W)` head output; `heights` are the localized target heights
/// and `scheme` turns them into classes for the classification heads.
pub fn head_loss_and_grad<T: Real>(
    head: HeadKind,
    output: &[T],
    heights: &RasterGrid,
    scheme: &DiscretizationScheme,
) -> Result<(f64, Vec<T>)> {
    let (w, h, k) = (heights.width(), heights.height(), scheme.k());
    match head {
        HeadKind::Ordinal => {
            let logits = OrdinalLogits::new(w, h, k, output.to_vec())?;
            ordinal_loss_and_grad(&logits, &scheme.encode_map(heights)?)
        }
        HeadKind::Mcc => {
            let logits = ClassLogits::new(w, h, k, output.to_vec())?;
            mcc_loss_and_grad(&logits, &scheme.encode_map(heights)?)
        }
        HeadKind::Mse => {
            check_len("regression output", output.len(), w, h, 1)?;
            let truth: Vec<T> = heights.data().iter().map(|&v| T::of(v as f64)).collect();
            Ok((mse_values(output, &truth)?, mse_values_grad(output, &truth)?))
        }
    }
}

/// Turns one sample's planar head output into heights in meters.
pub fn head_to_heights<T: Real>(
    head: HeadKind,
    output: &[T],
    width: usize,
    height: usize,
    scheme: &DiscretizationScheme,
    midpoint: Midpoint,
) -> Result<RasterGrid> {
    let k = scheme.k();
    let classes = match head {
        HeadKind::Ordinal => decode_class(&pair_softmax(&OrdinalLogits::new(width, height, k, output.to_vec())?)?)?,
        HeadKind::Mcc => decode_argmax(&ClassLogits::new(width, height, k, output.to_vec())?)?,
        HeadKind::Mse => {
            check_len("regression output", output.len(), width, height, 1)?;
            return RasterGrid::new(width, height, output.iter().map(|v| v.as_f64() as f32).collect());
        }
    };
    scheme.decode_map(&classes, midpoint)
}
