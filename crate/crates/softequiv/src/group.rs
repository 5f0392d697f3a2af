//! The invertible geometric group acting on images and token grids:
//! 90-degree rotations, horizontal flips, and anisotropic patch-aligned
//! scaling.
//!
//! Conventions (fixed here and used identically everywhere):
//! - Rotations are counter-clockwise quarter turns; grids are indexed
//!   row-major with the origin at the top-left.
//! - An element is stored canonically as `diag(s_x, s_y) * P` with
//!   `P = rot^k * flip^f`: the dihedral part applies first, scaling second.
//! - `compose(a, b)` means "apply b, then a" (function composition order),
//!   so the relative transform of two views reads `compose(g2, inverse(g1))`.
//! - Scales are exact rationals, which keeps composition and inversion exact
//!   and the group-law tests non-flaky.

use std::fmt;

use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::io::RawTensor;
use crate::tensor::{axis_weights, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum GroupError {
    Misaligned {
        what: &'static str,
        size: usize,
        num: u64,
        den: u64,
    },
    GridMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    EmptyScaleSet,
}

impl fmt::Display for GroupError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupError::Misaligned { what, size, num, den } => write!(
                f,
                "{what}: size {size} scaled by {num}/{den} does not land on an integer"
            ),
            GroupError::GridMismatch { expected, got } => write!(
                f,
                "target grid {got:?} inconsistent with the transform (expected {expected:?})"
            ),
            GroupError::EmptyScaleSet => write!(f, "geometric policy has an empty scale set"),
        }
    }
}

impl std::error::Error for GroupError {}

/// Positive rational in lowest terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Ratio {
    num: u64,
    den: u64,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        assert!(num > 0 && den > 0, "scales must be positive");
        let g = gcd(num, den);
        Ratio {
            num: num / g,
            den: den / g,
        }
    }

    pub const ONE: Ratio = Ratio { num: 1, den: 1 };

    pub fn num(&self) -> u64 {
        self.num
    }

    pub fn den(&self) -> u64 {
        self.den
    }

    pub fn mul(self, other: Ratio) -> Ratio {
        Ratio::new(self.num * other.num, self.den * other.den)
    }

    pub fn recip(self) -> Ratio {
        Ratio {
            num: self.den,
            den: self.num,
        }
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `size * self` when it is an integer.
    pub fn scale_len(self, size: usize) -> Option<usize> {
        let v = size as u64 * self.num;
        if v % self.den == 0 {
            Some((v / self.den) as usize)
        } else {
            None
        }
    }

    pub fn parse(s: &str) -> Option<Ratio> {
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let num: u64 = n.trim().parse().ok()?;
            let den: u64 = d.trim().parse().ok()?;
            if num == 0 || den == 0 {
                return None;
            }
            Some(Ratio::new(num, den))
        } else {
            let num: u64 = s.parse().ok()?;
            if num == 0 {
                return None;
            }
            Some(Ratio::new(num, 1))
        }
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// Element of the scaled-dihedral group: `diag(s_x, s_y) * rot^k * flip^f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupElement {
    /// Counter-clockwise quarter turns, 0..=3.
    pub rot: u8,
    /// Horizontal flip applied before the rotation.
    pub flip: bool,
    /// Width scale factor (output coordinates).
    pub sx: Ratio,
    /// Height scale factor (output coordinates).
    pub sy: Ratio,
}

impl GroupElement {
    pub const IDENTITY: GroupElement = GroupElement {
        rot: 0,
        flip: false,
        sx: Ratio::ONE,
        sy: Ratio::ONE,
    };

    pub fn dihedral(rot: u8, flip: bool) -> Self {
        GroupElement {
            rot: rot % 4,
            flip,
            sx: Ratio::ONE,
            sy: Ratio::ONE,
        }
    }

    pub fn scaling(sx: Ratio, sy: Ratio) -> Self {
        GroupElement {
            rot: 0,
            flip: false,
            sx,
            sy,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Whether the dihedral part swaps the two axes.
    pub fn swaps_axes(&self) -> bool {
        self.rot % 2 == 1
    }

    /// 2x2 matrix of the element over f64, for oracle checks.
    pub fn matrix(&self) -> [[f64; 2]; 2] {
        // columns act on (x, y) coordinates; rot is CCW, flip negates x.
        let (c, s) = match self.rot {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        };
        let r = [[c, -s], [s, c]];
        let fsign = if self.flip { -1.0 } else { 1.0 };
        let p = [[r[0][0] * fsign, r[0][1]], [r[1][0] * fsign, r[1][1]]];
        let (sx, sy) = (self.sx.to_f64(), self.sy.to_f64());
        [[sx * p[0][0], sx * p[0][1]], [sy * p[1][0], sy * p[1][1]]]
    }

    /// Log/serialization form: `k=<0..3> f=<0|1> sx=<p/q> sy=<p/q>`.
    pub fn to_log_string(&self) -> String {
        format!(
            "k={} f={} sx={}/{} sy={}/{}",
            self.rot,
            self.flip as u8,
            self.sx.num(),
            self.sx.den(),
            self.sy.num(),
            self.sy.den()
        )
    }

    pub fn from_log_string(s: &str) -> Option<GroupElement> {
        let mut rot = None;
        let mut flip = None;
        let mut sx = None;
        let mut sy = None;
        for part in s.split_whitespace() {
            let (key, value) = part.split_once('=')?;
            match key {
                "k" => rot = value.parse::<u8>().ok(),
                "f" => flip = value.parse::<u8>().ok().map(|v| v != 0),
                "sx" => sx = Ratio::parse(value),
                "sy" => sy = Ratio::parse(value),
                _ => return None,
            }
        }
        Some(GroupElement {
            rot: rot? % 4,
            flip: flip?,
            sx: sx?,
            sy: sy?,
        })
    }
}

/// `compose(a, b)`: apply `b` first, then `a`.
pub fn compose(a: GroupElement, b: GroupElement) -> GroupElement {
    // Dihedral: rot^ka flip^fa * rot^kb flip^fb = rot^(ka + kb*sign(fa)) flip^(fa xor fb)
    let kb_signed = if a.flip { (4 - b.rot) % 4 } else { b.rot };
    let rot = (a.rot + kb_signed) % 4;
    let flip = a.flip ^ b.flip;
    // Scale: diag(sa) * (Pa diag(sb) Pa^-1) = diag(sa .* pi_a(sb))
    let (bx, by) = if a.swaps_axes() { (b.sy, b.sx) } else { (b.sx, b.sy) };
    GroupElement {
        rot,
        flip,
        sx: a.sx.mul(bx),
        sy: a.sy.mul(by),
    }
}

pub fn inverse(g: GroupElement) -> GroupElement {
    // (diag(s) P)^-1 = P^-1 diag(1/s) = diag(pi_{P^-1}(1/s)) P^-1
    let rot = if g.flip { g.rot } else { (4 - g.rot) % 4 };
    let (sx, sy) = if g.rot % 2 == 1 {
        (g.sy.recip(), g.sx.recip())
    } else {
        (g.sx.recip(), g.sy.recip())
    };
    GroupElement {
        rot,
        flip: g.flip,
        sx,
        sy,
    }
}

/// Relative transform mapping view 1's geometry onto view 2's: `g2 * g1^-1`.
pub fn relative(g1: GroupElement, g2: GroupElement) -> GroupElement {
    compose(g2, inverse(g1))
}

/// Spatial grid of tokens; `patch` is the patch side in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub patch: usize,
}

impl TokenGrid {
    pub fn new(h: usize, w: usize, patch: usize) -> Self {
        assert!(h >= 1 && w >= 1 && patch >= 1);
        TokenGrid { h, w, patch }
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn image_hw(&self) -> (usize, usize) {
        (self.h * self.patch, self.w * self.patch)
    }
}

/// Row-major index map of the dihedral part on an (h, w) grid:
/// returns (h_out, w_out, perm) with `out[j] = in[perm[j]]`.
pub fn dihedral_index_map(g: GroupElement, h: usize, w: usize) -> (usize, usize, Vec<usize>) {
    // start with identity on the (h, w) grid
    let mut cur: Vec<usize> = (0..h * w).collect();
    let (mut ch, mut cw) = (h, w);
    if g.flip {
        // out[r][c] = in[r][W-1-c]
        let mut next = vec![0usize; ch * cw];
        for r in 0..ch {
            for c in 0..cw {
                next[r * cw + c] = cur[r * cw + (cw - 1 - c)];
            }
        }
        cur = next;
    }
    for _ in 0..g.rot {
        // CCW quarter turn: out[r][c] = in[c][W-1-r]; dims swap
        let (nh, nw) = (cw, ch);
        let mut next = vec![0usize; nh * nw];
        for r in 0..nh {
            for c in 0..nw {
                next[r * nw + c] = cur[c * cw + (cw - 1 - r)];
            }
        }
        cur = next;
        ch = nh;
        cw = nw;
    }
    (ch, cw, cur)
}

/// Pixel-space action on an (h, w, c) image stored row-major channel-last.
/// The dihedral part is an exact permutation; scaling goes through the shared
/// bilinear resize.
pub fn act_image<S: Scalar>(
    g: GroupElement,
    img: &RawTensor<S>,
) -> Result<RawTensor<S>, GroupError> {
    let (h, w, c) = image_dims(img);
    let (dh, dw, perm) = dihedral_index_map(g, h, w);
    let mut data = vec![S::ZERO; img.data.len()];
    for (j, &src) in perm.iter().enumerate() {
        data[j * c..(j + 1) * c].copy_from_slice(&img.data[src * c..(src + 1) * c]);
    }
    let out_w = g.sx.scale_len(dw).ok_or(GroupError::Misaligned {
        what: "act_image width",
        size: dw,
        num: g.sx.num(),
        den: g.sx.den(),
    })?;
    let out_h = g.sy.scale_len(dh).ok_or(GroupError::Misaligned {
        what: "act_image height",
        size: dh,
        num: g.sy.num(),
        den: g.sy.den(),
    })?;
    if out_h == dh && out_w == dw {
        return Ok(RawTensor::new(vec![dh, dw, c], data));
    }
    let resized = bilinear_resize_raw(&data, dh, dw, c, out_h, out_w);
    Ok(RawTensor::new(vec![out_h, out_w, c], resized))
}

fn image_dims<S>(img: &RawTensor<S>) -> (usize, usize, usize) {
    match img.shape.len() {
        3 => (img.shape[0], img.shape[1], img.shape[2]),
        2 => (img.shape[0], img.shape[1], 1),
        _ => panic!("act_image expects an (h, w, c) tensor, got {:?}", img.shape),
    }
}

/// Raw (off-tape) version of the shared bilinear resize; identical weights to
/// the tape op because both call `axis_weights`.
pub fn bilinear_resize_raw<S: Scalar>(
    data: &[S],
    h: usize,
    w: usize,
    c: usize,
    h2: usize,
    w2: usize,
) -> Vec<S> {
    let wy = axis_weights(h, h2);
    let wx = axis_weights(w, w2);
    let mut out = vec![S::ZERO; h2 * w2 * c];
    for (oy, &(y0, y1, fy)) in wy.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in wx.iter().enumerate() {
            let w00 = S::from_f64((1.0 - fy) * (1.0 - fx));
            let w01 = S::from_f64((1.0 - fy) * fx);
            let w10 = S::from_f64(fy * (1.0 - fx));
            let w11 = S::from_f64(fy * fx);
            let dst = &mut out[(oy * w2 + ox) * c..(oy * w2 + ox + 1) * c];
            for (t, o) in dst.iter_mut().enumerate() {
                *o = w00 * data[(y0 * w + x0) * c + t]
                    + w01 * data[(y0 * w + x1) * c + t]
                    + w10 * data[(y1 * w + x0) * c + t]
                    + w11 * data[(y1 * w + x1) * c + t];
            }
        }
    }
    out
}

/// Grid that `act_image(g, .)` would produce from a source grid.
pub fn transformed_grid(g: GroupElement, grid: TokenGrid) -> Result<TokenGrid, GroupError> {
    let (dh, dw) = if g.swaps_axes() {
        (grid.w, grid.h)
    } else {
        (grid.h, grid.w)
    };
    let w2 = g.sx.scale_len(dw).ok_or(GroupError::Misaligned {
        what: "token grid width",
        size: dw,
        num: g.sx.num(),
        den: g.sx.den(),
    })?;
    let h2 = g.sy.scale_len(dh).ok_or(GroupError::Misaligned {
        what: "token grid height",
        size: dh,
        num: g.sy.num(),
        den: g.sy.den(),
    })?;
    Ok(TokenGrid::new(h2, w2, grid.patch))
}

/// Feature-space action on a token map living on a tape: the dihedral part is
/// an exact token permutation, scaling resamples the grid channel-wise with
/// the shared resize. `feat` must be shaped [h*w, d].
pub fn act_tokens<'t, S: Scalar>(
    g: GroupElement,
    feat: Tensor<'t, S>,
    grid: TokenGrid,
    target: TokenGrid,
) -> Result<Tensor<'t, S>, GroupError> {
    let expected = transformed_grid(g, grid)?;
    if (expected.h, expected.w) != (target.h, target.w) {
        return Err(GroupError::GridMismatch {
            expected: (expected.h, expected.w),
            got: (target.h, target.w),
        });
    }
    let (dh, dw, perm) = dihedral_index_map(g, grid.h, grid.w);
    let permuted = feat
        .index_permute(&perm)
        .expect("dihedral map is a bijection by construction");
    if dh == target.h && dw == target.w {
        return Ok(permuted);
    }
    Ok(permuted
        .resize_bilinear(dh, dw, target.h, target.w)
        .expect("token map shape checked against grid"))
}

/// Generator policy for sampling group elements.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoPolicy {
    pub rot90: bool,
    pub hflip: bool,
    pub scales: Vec<Ratio>,
}

impl Default for GeoPolicy {
    fn default() -> Self {
        GeoPolicy {
            rot90: true,
            hflip: true,
            scales: vec![Ratio::new(3, 4), Ratio::ONE, Ratio::new(5, 4)],
        }
    }
}

impl GeoPolicy {
    pub fn identity_only() -> Self {
        GeoPolicy {
            rot90: false,
            hflip: false,
            scales: vec![Ratio::ONE],
        }
    }

    /// Largest scale factor, used by the cost estimator's worst-case grid.
    pub fn max_scale(&self) -> Ratio {
        let mut best = Ratio::ONE;
        for s in &self.scales {
            if s.to_f64() > best.to_f64() {
                best = *s;
            }
        }
        best
    }
}

/// Uniform independent draws of the enabled generators.
pub fn sample(rng: &mut Rng, policy: &GeoPolicy) -> Result<GroupElement, GroupError> {
    if policy.scales.is_empty() {
        return Err(GroupError::EmptyScaleSet);
    }
    let rot = if policy.rot90 { rng.below(4) as u8 } else { 0 };
    let flip = if policy.hflip { rng.flip(0.5) } else { false };
    let sx = policy.scales[rng.below(policy.scales.len())];
    let sy = policy.scales[rng.below(policy.scales.len())];
    Ok(GroupElement { rot, flip, sx, sy })
}
