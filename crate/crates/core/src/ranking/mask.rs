//! The differentiable rectangular detection mask.
//!
//! Coordinates are normalized image units: `x` runs left to right over
//! `[0, 1]` and `y` runs top to bottom, so `y_t < y_b`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default sigmoid sharpness for normalized coordinates.
pub const DEFAULT_SHARPNESS: f64 = 10.0;

/// An axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_l: f64,
    pub x_r: f64,
    pub y_t: f64,
    pub y_b: f64,
}

impl Rect {
    pub fn new(x_l: f64, x_r: f64, y_t: f64, y_b: f64) -> Result<Self> {
        let r = Self { x_l, x_r, y_t, y_b };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_l, self.x_r, self.y_t, self.y_b]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x_l >= self.x_r || self.y_t >= self.y_b {
            return Err(Error::InvalidParam(format!("invalid rectangle {self:?}")));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x_r - self.x_l) * (self.y_b - self.y_t)
    }

    /// The central box covering `fraction` of each side.
    pub fn centered(fraction: f64) -> Self {
        let margin = (1.0 - fraction) / 2.0;
        Self {
            x_l: margin,
            x_r: 1.0 - margin,
            y_t: margin,
            y_b: 1.0 - margin,
        }
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &Rect, b: &Rect) -> f64 {
    let w = (a.x_r.min(b.x_r) - a.x_l.max(b.x_l)).max(0.0);
    let h = (a.y_b.min(b.y_b) - a.y_t.max(b.y_t)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Box coordinates plus the sigmoid sharpness `k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    pub rect: Rect,
    pub k: f64,
}

impl MaskParams {
    pub fn new(rect: Rect, k: f64) -> Result<Self> {
        rect.validate()?;
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::InvalidParam(format!("sharpness must be > 0, got {k}")));
        }
        Ok(Self { rect, k })
    }

    /// Horizontal factor `sigma(k(x - x_l)) - sigma(k(x - x_r))`.
    pub fn band_x(&self, x: f64) -> f64 {
        band(self.k, x, self.rect.x_l, self.rect.x_r)
    }

    /// Vertical factor `sigma(k(y - y_t)) - sigma(k(y - y_b))`.
    pub fn band_y(&self, y: f64) -> f64 {
        band(self.k, y, self.rect.y_t, self.rect.y_b)
    }
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `sigma'(t) = sigma(t) (1 - sigma(t))`.
pub fn sigmoid_slope(t: f64) -> f64 {
    let s = sigmoid(t);
    s * (1.0 - s)
}

/// Difference of two sigmoids, evaluated so that deep-interior values
/// round to exactly 1 instead of losing the tail in cancellation.
fn band(k: f64, v: f64, lo: f64, hi: f64) -> f64 {
    let a = k * (v - lo);
    let b = k * (v - hi);
    // sigma(a) - sigma(b) = sigma(-b) - sigma(-a)
    if a + b > 0.0 {
        sigmoid(-b) - sigmoid(-a)
    } else {
        sigmoid(a) - sigmoid(b)
    }
}

/// Smooth mask value at `(x, y)`.
pub fn soft_mask(params: &MaskParams, x: f64, y: f64) -> f64 {
    params.band_x(x) * params.band_y(y)
}

/// The hard indicator the soft mask approximates.
pub fn step_mask(rect: &Rect, x: f64, y: f64) -> f64 {
    let h = |t: f64| if t >= 0.0 { 1.0 } else { 0.0 };
    (h(x - rect.x_l) - h(x - rect.x_r)) * (h(y - rect.y_t) - h(y - rect.y_b))
}

/// Partial derivatives of a band factor with respect to its lower and upper edges.
pub(crate) fn band_edge_slopes(k: f64, v: f64, lo: f64, hi: f64) -> (f64, f64) {
    (-k * sigmoid_slope(k * (v - lo)), k * sigmoid_slope(k * (v - hi)))
}
