//! Weighted-balanced segmentation losses with analytic gradients.
//!
//! Every loss takes probability maps `p` (flattened, one image after
//! another), binary targets `y` of the same length, and returns the scalar
//! value together with `∂L/∂p`. The functions are generic over the float type
//! so the same code is exercised by f64 finite-difference checks and by f32
//! training.
//!
//! Per-image balance weight `w = N₁/(N₁+N₀)` is the foreground fraction of the
//! target. As written, the weighted dice multiplies the *foreground* term by
//! `w`, which de-emphasises small lesions; [`LossWeights::invert_balance`]
//! swaps the roles for experimentation.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coefficients of the total loss and of each region loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Fusion-path term.
    pub lambda1: f64,
    /// Auxiliary backbone term.
    pub lambda2: f64,
    /// Edge term.
    pub lambda3: f64,
    /// Dice weight inside a region loss.
    pub mu1: f64,
    /// Cross-entropy weight inside a region loss.
    pub mu2: f64,
    /// Use `1 − w` in place of `w`.
    pub invert_balance: bool,
    /// Drop the factors of two from both dice ratios.
    pub paper_literal_dice: bool,
    /// `false` replaces the per-image balance weight with a plain
    /// foreground dice (`w = 1`) and an unweighted edge term (`w = ½`).
    pub balanced: bool,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.1,
            mu1: 1.0,
            mu2: 1.0,
            invert_balance: false,
            paper_literal_dice: false,
            balanced: true,
            epsilon: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.mu1, self.mu2];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!(
                "loss coefficients must be finite and ≥ 0, got {all:?}"
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    pub fn dice_mode(&self) -> DiceMode {
        if self.paper_literal_dice {
            DiceMode::PaperLiteral
        } else {
            DiceMode::Standard
        }
    }

    /// Weight used by the region dice for target `y`.
    pub fn region_balance<F: Float>(&self, y: &[F]) -> f64 {
        if !self.balanced {
            return 1.0;
        }
        self.oriented(balance_weight(y))
    }

    /// Weight used by the edge cross-entropy for target `y`.
    pub fn edge_balance<F: Float>(&self, y: &[F]) -> f64 {
        if !self.balanced {
            return 0.5;
        }
        self.oriented(balance_weight(y))
    }

    fn oriented(&self, bw: BalanceWeight) -> f64 {
        if self.invert_balance {
            bw.inverted().w
        } else {
            bw.w
        }
    }
}

/// Foreground fraction of a binary map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BalanceWeight {
    pub w: f64,
    pub n1: usize,
    pub n0: usize,
}

impl BalanceWeight {
    pub fn inverted(self) -> BalanceWeight {
        BalanceWeight {
            w: 1.0 - self.w,
            ..self
        }
    }
}

/// Counts pixels with `y > 0.5` as foreground.
pub fn balance_weight<F: Float>(y: &[F]) -> BalanceWeight {
    let half = F::from(0.5).unwrap();
    let n1 = y.iter().filter(|&&v| v > half).count();
    let n0 = y.len() - n1;
    let w = if y.is_empty() {
        0.0
    } else {
        n1 as f64 / y.len() as f64
    };
    BalanceWeight { w, n1, n0 }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiceMode {
    /// `(2Σpy+ε)/(Σ(p+y)+ε)` ratios; zero at a perfect match.
    Standard,
    /// Ratios without the factor 2; ½ at a perfect match.
    PaperLiteral,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue<F> {
    pub value: F,
    pub grad: Vec<F>,
}

fn check_pair<F>(p: &[F], y: &[F]) -> Result<()> {
    if p.len() != y.len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, target {}",
            p.len(),
            y.len()
        )));
    }
    if p.is_empty() {
        return Err(Error::Shape("empty prediction".into()));
    }
    Ok(())
}

fn c<F: Float>(v: f64) -> F {
    F::from(v).unwrap()
}

/// `1 − w·fg − (1−w)·bg` with smoothed foreground and background dice
/// ratios summed over all pixels.
pub fn weighted_dice<F: Float>(
    p: &[F],
    y: &[F],
    w: f64,
    mode: DiceMode,
    epsilon: f64,
) -> Result<LossValue<F>> {
    check_pair(p, y)?;
    let k: F = match mode {
        DiceMode::Standard => c(2.0),
        DiceMode::PaperLiteral => F::one(),
    };
    let (eps, w, one, two) = (c::<F>(epsilon), c::<F>(w), F::one(), c::<F>(2.0));
    let (mut inter_fg, mut sum_fg, mut inter_bg, mut sum_bg) =
        (F::zero(), F::zero(), F::zero(), F::zero());
    for (&pi, &yi) in p.iter().zip(y) {
        inter_fg = inter_fg + pi * yi;
        sum_fg = sum_fg + pi + yi;
        inter_bg = inter_bg + (one - pi) * (one - yi);
        sum_bg = sum_bg + (two - pi - yi);
    }
    let (num_fg, den_fg) = (k * inter_fg + eps, sum_fg + eps);
    let (num_bg, den_bg) = (k * inter_bg + eps, sum_bg + eps);
    let value = one - w * num_fg / den_fg - (one - w) * num_bg / den_bg;
    let grad = p
        .iter()
        .zip(y)
        .map(|(_, &yi)| {
            let d_fg = k * yi / den_fg - num_fg / (den_fg * den_fg);
            let d_bg = -k * (one - yi) / den_bg + num_bg / (den_bg * den_bg);
            -w * d_fg - (one - w) * d_bg
        })
        .collect();
    Ok(LossValue { value, grad })
}

/// Mean binary cross-entropy `−(1/N)Σ[y·ln p + (1−y)·ln(1−p)]`, `p` clamped
/// to `[ε, 1−ε]`.
pub fn bce<F: Float>(p: &[F], y: &[F], epsilon: f64) -> Result<LossValue<F>> {
    check_pair(p, y)?;
    let n = c::<F>(p.len() as f64);
    let (lo, hi, one) = (c::<F>(epsilon), c::<F>(1.0 - epsilon), F::one());
    let mut total = F::zero();
    let mut grad = Vec::with_capacity(p.len());
    for (&pi, &yi) in p.iter().zip(y) {
        let pc = pi.max(lo).min(hi);
        total = total - (yi * pc.ln() + (one - yi) * (one - pc).ln());
        let inside = pi >= lo && pi <= hi;
        grad.push(if inside {
            (-(yi / pc) + (one - yi) / (one - pc)) / n
        } else {
            F::zero()
        });
    }
    Ok(LossValue {
        value: total / n,
        grad,
    })
}

/// `[−w·Σ_{y=1} ln p − (1−w)·Σ_{y=0} ln(1−p)] / N`, `p` clamped to `[ε, 1−ε]`.
pub fn weighted_edge_bce<F: Float>(p: &[F], y: &[F], w: f64, epsilon: f64) -> Result<LossValue<F>> {
    check_pair(p, y)?;
    let n = c::<F>(p.len() as f64);
    let (lo, hi, one, w) = (c::<F>(epsilon), c::<F>(1.0 - epsilon), F::one(), c::<F>(w));
    let mut total = F::zero();
    let mut grad = Vec::with_capacity(p.len());
    for (&pi, &yi) in p.iter().zip(y) {
        let pc = pi.max(lo).min(hi);
        total = total - (w * yi * pc.ln() + (one - w) * (one - yi) * (one - pc).ln());
        let inside = pi >= lo && pi <= hi;
        grad.push(if inside {
            (-(w * yi / pc) + (one - w) * (one - yi) / (one - pc)) / n
        } else {
            F::zero()
        });
    }
    Ok(LossValue {
        value: total / n,
        grad,
    })
}

fn per_image<F: Float>(
    p: &[F],
    y: &[F],
    image_len: usize,
    mut f: impl FnMut(&[F], &[F]) -> Result<LossValue<F>>,
) -> Result<LossValue<F>> {
    check_pair(p, y)?;
    if image_len == 0 || p.len() % image_len != 0 {
        return Err(Error::Shape(format!(
            "batch of {} pixels is not a whole number of {image_len}-pixel images",
            p.len()
        )));
    }
    let images = p.len() / image_len;
    let scale = c::<F>(1.0 / images as f64);
    let mut value = F::zero();
    let mut grad = Vec::with_capacity(p.len());
    for (pi, yi) in p.chunks(image_len).zip(y.chunks(image_len)) {
        let lv = f(pi, yi)?;
        value = value + lv.value * scale;
        grad.extend(lv.grad.into_iter().map(|g| g * scale));
    }
    Ok(LossValue { value, grad })
}

/// `μ₁·weighted_dice + μ₂·bce`, balance weight computed per image, averaged
/// over the batch.
pub fn region_loss<F: Float>(
    p: &[F],
    y: &[F],
    image_len: usize,
    weights: &LossWeights,
) -> Result<LossValue<F>> {
    let (mu1, mu2) = (c::<F>(weights.mu1), c::<F>(weights.mu2));
    per_image(p, y, image_len, |pi, yi| {
        let w = weights.region_balance(yi);
        let d = weighted_dice(pi, yi, w, weights.dice_mode(), weights.epsilon)?;
        let b = bce(pi, yi, weights.epsilon)?;
        Ok(LossValue {
            value: mu1 * d.value + mu2 * b.value,
            grad: d
                .grad
                .iter()
                .zip(&b.grad)
                .map(|(&gd, &gb)| mu1 * gd + mu2 * gb)
                .collect(),
        })
    })
}

/// Edge term with per-image balance weight, averaged over the batch.
pub fn edge_loss<F: Float>(
    p: &[F],
    y: &[F],
    image_len: usize,
    weights: &LossWeights,
) -> Result<LossValue<F>> {
    per_image(p, y, image_len, |pi, yi| {
        weighted_edge_bce(pi, yi, weights.edge_balance(yi), weights.epsilon)
    })
}

/// Head maps entering the total loss.
#[derive(Clone, Copy, Debug)]
pub struct HeadMaps<'a, F> {
    pub fusion: Option<&'a [F]>,
    pub aux: Option<&'a [F]>,
    pub edge: Option<&'a [F]>,
}

#[derive(Clone, Debug)]
pub struct TotalLoss<F> {
    pub value: F,
    pub fusion: Option<LossValue<F>>,
    pub aux: Option<LossValue<F>>,
    pub edge: Option<LossValue<F>>,
}

impl<F: Float> TotalLoss<F> {
    /// Gradient of the total with respect to each present head map.
    pub fn head_grads(&self, weights: &LossWeights) -> HeadGrads<F> {
        let scaled = |lv: &Option<LossValue<F>>, lambda: f64| {
            lv.as_ref().map(|lv| {
                lv.grad
                    .iter()
                    .map(|&g| g * c::<F>(lambda))
                    .collect::<Vec<F>>()
            })
        };
        let aux_lambda = if self.fusion.is_some() {
            weights.lambda2
        } else {
            weights.lambda1
        };
        HeadGrads {
            fusion: scaled(&self.fusion, weights.lambda1),
            aux: scaled(&self.aux, aux_lambda),
            edge: scaled(&self.edge, weights.lambda3),
        }
    }
}

#[derive(Clone, Debug)]
pub struct HeadGrads<F> {
    pub fusion: Option<Vec<F>>,
    pub aux: Option<Vec<F>>,
    pub edge: Option<Vec<F>>,
}

/// `λ₁·L^F + λ₂·L^U + λ₃·L^E`. Absent heads drop out of the sum; when
/// there is no fusion head the auxiliary map is the segmentation output and
/// takes `λ₁`. The edge term needs both an edge map and an edge target.
pub fn total_loss<F: Float>(
    heads: HeadMaps<'_, F>,
    mask: &[F],
    edge_target: Option<&[F]>,
    image_len: usize,
    weights: &LossWeights,
) -> Result<TotalLoss<F>> {
    let fusion = heads
        .fusion
        .map(|p| region_loss(p, mask, image_len, weights))
        .transpose()?;
    let aux = heads
        .aux
        .map(|p| region_loss(p, mask, image_len, weights))
        .transpose()?;
    let edge = match (heads.edge, edge_target) {
        (Some(p), Some(y)) => Some(edge_loss(p, y, image_len, weights)?),
        (Some(_), None) => return Err(Error::Shape("edge map given without edge target".into())),
        _ => None,
    };
    if fusion.is_none() && aux.is_none() {
        return Err(Error::Shape("no segmentation head to supervise".into()));
    }
    let aux_lambda = if fusion.is_some() {
        weights.lambda2
    } else {
        weights.lambda1
    };
    let mut value = F::zero();
    if let Some(f) = &fusion {
        value = value + c::<F>(weights.lambda1) * f.value;
    }
    if let Some(a) = &aux {
        value = value + c::<F>(aux_lambda) * a.value;
    }
    if let Some(e) = &edge {
        value = value + c::<F>(weights.lambda3) * e.value;
    }
    Ok(TotalLoss {
        value,
        fusion,
        aux,
        edge,
    })
}
