// SPDX-License-Identifier: MIT OR Apache-2.0

use super::Scalar;

/// Rotation angle of pair `i` at position `p`.
pub fn rope_angle(p: f64, i: usize, d_head: usize, theta: f64) -> f64 {
    p * theta.powf(-2.0 * i as f64 / d_head as f64)
}

/// Rotates coordinate pairs `(2i, 2i+1)` of `v` by `p * theta^(-2i/d_head)`.
/// Positions may be negative or fractional.
///
/// # Panics
/// If `v.len()` is odd.
pub fn rope_apply<T: Scalar>(v: &[T], p: f64, theta: f64) -> Vec<T> {
    assert!(v.len() % 2 == 0, "rope needs an even head dimension");
    let d = v.len();
    let mut out = v.to_vec();
    for i in 0..d / 2 {
        let (s, c) = rope_angle(p, i, d, theta).sin_cos();
        rotate(&mut out[2 * i..2 * i + 2], T::from_f64(c), T::from_f64(s));
    }
    out
}

#[inline]
fn rotate<T: Scalar>(pair: &mut [T], c: T, s: T) {
    let (x, y) = (pair[0], pair[1]);
    pair[0] = x * c - y * s;
    pair[1] = x * s + y * c;
}

/// Precomputed cos/sin for integer positions.
#[derive(Debug, Clone)]
pub(crate) struct RopeTable<T> {
    half: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RopeTable<T> {
    pub(crate) fn new(max_len: usize, d_head: usize, theta: f64) -> Self {
        let half = d_head / 2;
        let mut cos = Vec::with_capacity(max_len * half);
        let mut sin = Vec::with_capacity(max_len * half);
        for p in 0..max_len {
            for i in 0..half {
                let (s, c) = rope_angle(p as f64, i, d_head, theta).sin_cos();
                cos.push(T::from_f64(c));
                sin.push(T::from_f64(s));
            }
        }
        Self { half, cos, sin }
    }

    /// Rotates one head vector in place; `inverse` applies the transpose.
    #[inline]
    pub(crate) fn apply(&self, v: &mut [T], p: usize, inverse: bool) {
        let base = p * self.half;
        for i in 0..self.half {
            let c = self.cos[base + i];
            let s = if inverse { -self.sin[base + i] } else { self.sin[base + i] };
            rotate(&mut v[2 * i..2 * i + 2], c, s);
        }
    }
}
