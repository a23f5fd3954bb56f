//! Parallax attention: directional correspondence maps along epipolar
//! lines, attention-driven warping, cycle composition, occlusion masks
//! and feature fusion.
//!
//! Map layout: an attention map is (H, W, W) with `values[i, t, s]` the
//! contribution of source column `s` to target position `(i, t)` on the
//! same row. Softmax runs over the source axis, so each target pixel
//! distributes unit attention over source candidates.

use rand::Rng;

use crate::error::TensorError;
use crate::nn::{passthrough_init, BoundParams, Conv2d, ParamStore, ResidualBlock};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Occlusion-detection threshold on column mass.
pub const VALID_MASK_TAU: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Generates the left view from right-image columns.
    RightToLeft,
    /// Generates the right view from left-image columns.
    LeftToRight,
    /// A composed round trip (left→right→left or the reverse).
    Cycle,
}

/// (H, W, W) correspondence weights plus the direction they warp.
#[derive(Clone, Debug)]
pub struct AttentionMap<T: Scalar> {
    pub values: Tensor<T>,
    pub direction: Direction,
}

impl<T: Scalar> AttentionMap<T> {
    pub fn new(values: Tensor<T>, direction: Direction) -> Result<Self, TensorError> {
        if values.rank() != 3 || values.shape()[1] != values.shape()[2] {
            return Err(TensorError::BadShape {
                op: "attention_map",
                expected: "(H, W, W)".into(),
                got: values.shape().to_vec(),
            });
        }
        Ok(AttentionMap { values, direction })
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Binary (H, W) visibility mask: 1 where the tagged direction found a
/// correspondence for the pixel, 0 where it is occluded.
#[derive(Clone, Debug)]
pub struct ValidMask<T: Scalar> {
    pub values: Tensor<T>,
    pub direction: Direction,
}

impl<T: Scalar> ValidMask<T> {
    pub fn new(values: Tensor<T>, direction: Direction) -> Result<Self, TensorError> {
        if values.rank() != 2 {
            return Err(TensorError::BadShape {
                op: "valid_mask",
                expected: "(H, W)".into(),
                got: values.shape().to_vec(),
            });
        }
        if !values.data().iter().all(|&v| v == T::zero() || v == T::one()) {
            return Err(TensorError::InvalidArg { op: "valid_mask", msg: "mask must be binary".into() });
        }
        Ok(ValidMask { values, direction })
    }
}

/// Per-left-pixel horizontal shift at LR resolution: left (i, j) sees
/// right column j − d(i, j). `occluded` flags left pixels with no visible
/// correspondence (1 = occluded).
#[derive(Clone, Debug)]
pub struct DisparityMap<T: Scalar> {
    pub values: Tensor<T>,
    pub occluded: Option<Tensor<T>>,
}

impl<T: Scalar> DisparityMap<T> {
    pub fn new(values: Tensor<T>, occluded: Option<Tensor<T>>) -> Result<Self, TensorError> {
        if values.rank() != 2 {
            return Err(TensorError::BadShape {
                op: "disparity_map",
                expected: "(H, W)".into(),
                got: values.shape().to_vec(),
            });
        }
        if let Some(o) = &occluded {
            if o.shape() != values.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "disparity_map",
                    lhs: values.shape().to_vec(),
                    rhs: o.shape().to_vec(),
                });
            }
        }
        Ok(DisparityMap { values, occluded })
    }

    pub fn is_occluded(&self, i: usize, j: usize) -> bool {
        self.occluded.as_ref().is_some_and(|o| o.at(&[i, j]) != T::zero())
    }
}

// ── Learnable attention layers ───────────────────────────────────────

/// The correspondence module: a shared transition residual block, query/
/// key 1×1 convolutions for the score product, a 1×1 conv on the raw
/// source features, and the 1×1 fusion conv over [target | warped | mask].
///
/// Both warp directions reuse the same weights; the inputs are exchanged.
#[derive(Clone, Debug)]
pub struct PamBlock {
    transition: Option<ResidualBlock>,
    query: Conv2d,
    key: Conv2d,
    source: Conv2d,
    fusion: Conv2d,
}

impl PamBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        with_transition: bool,
    ) -> Result<Self, TensorError> {
        let transition = if with_transition {
            Some(ResidualBlock::new(store, rng, &format!("{name}.transition"), channels)?)
        } else {
            None
        };
        let block = PamBlock {
            transition,
            query: Conv2d::new(store, rng, &format!("{name}.query"), 1, channels, channels, 1)?,
            key: Conv2d::new(store, rng, &format!("{name}.key"), 1, channels, channels, 1)?,
            source: Conv2d::new(store, rng, &format!("{name}.source"), 1, channels, channels, 1)?,
            fusion: Conv2d::new(store, rng, &format!("{name}.fusion"), 1, 2 * channels + 1, channels, 1)?,
        };
        // Fusion starts as a pass-through of the target view's features:
        // identity on the leading block, damped weights on the warped and
        // mask channels. The downstream pipeline then trains from the first
        // step while the correspondence terms grow in as they become useful.
        passthrough_init(store, &format!("{name}.fusion.kernel"), channels)?;
        Ok(block)
    }

    fn transitioned<'t, T: Scalar>(
        &self,
        p: &BoundParams<'t, T>,
        x: &Var<'t, T>,
    ) -> Result<Var<'t, T>, TensorError> {
        match &self.transition {
            Some(block) => block.forward(p, x),
            None => Ok(x.clone()),
        }
    }

    /// Scores for generating `a` from `b`: softmax(Q(a₀) ⊗ S(b₀)ᵀ) over
    /// source columns. Returns (M_b→a, M_a→b); the second direction runs
    /// the identical layers with the inputs exchanged.
    pub fn attention_pair<'t, T: Scalar>(
        &self,
        p: &BoundParams<'t, T>,
        a: &Var<'t, T>,
        b: &Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>), TensorError> {
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "attention_pair",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let a0 = self.transitioned(p, a)?;
        let b0 = self.transitioned(p, b)?;
        let m_b_to_a = self.directional(p, &a0, &b0)?;
        let m_a_to_b = self.directional(p, &b0, &a0)?;
        Ok((m_b_to_a, m_a_to_b))
    }

    fn directional<'t, T: Scalar>(
        &self,
        p: &BoundParams<'t, T>,
        target0: &Var<'t, T>,
        source0: &Var<'t, T>,
    ) -> Result<Var<'t, T>, TensorError> {
        let q = self.query.forward(p, target0)?;
        let s = self.key.forward(p, source0)?.transpose_last2()?;
        q.matmul_batched(&s)?.softmax_lastdim()
    }

    /// O = M_b→a ⊗ conv(source features); the conv reads the raw source,
    /// not the transitioned one.
    pub fn warped_features<'t, T: Scalar>(
        &self,
        p: &BoundParams<'t, T>,
        m_b_to_a: &Var<'t, T>,
        b_raw: &Var<'t, T>,
    ) -> Result<Var<'t, T>, TensorError> {
        apply_attention(m_b_to_a, &self.source.forward(p, b_raw)?)
    }

    /// 1×1 fusion over the channel concat [a | warped | mask] (2C+1 wide).
    pub fn fuse<'t, T: Scalar>(
        &self,
        p: &BoundParams<'t, T>,
        a: &Var<'t, T>,
        warped: &Var<'t, T>,
        mask: &Var<'t, T>,
    ) -> Result<Var<'t, T>, TensorError> {
        let stacked = crate::tape::concat_lastdim(&[a, warped, mask])?;
        self.fusion.forward(p, &stacked)
    }
}

// ── Warping and composition ──────────────────────────────────────────

/// out[i, t, :] = Σ_s M[i, t, s] · X[i, s, :]. Differentiable in both
/// operands; works for feature maps and RGB images alike.
pub fn apply_attention<'t, T: Scalar>(
    m: &Var<'t, T>,
    x: &Var<'t, T>,
) -> Result<Var<'t, T>, TensorError> {
    if m.shape().len() != 3 || x.shape().len() != 3 || m.shape()[2] != x.shape()[1] || m.shape()[0] != x.shape()[0] {
        return Err(TensorError::ShapeMismatch {
            op: "apply_attention",
            lhs: m.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    m.matmul_batched(x)
}

/// Row-wise composition m1 ⊗ m2: the round trip that first maps with m2's
/// direction and then m1's. Row-stochastic inputs stay row-stochastic.
pub fn compose<'t, T: Scalar>(
    m1: &Var<'t, T>,
    m2: &Var<'t, T>,
) -> Result<Var<'t, T>, TensorError> {
    m1.matmul_batched(m2)
}

/// Tensor-level warp for oracles and diagnostics.
pub fn apply_attention_t<T: Scalar>(m: &AttentionMap<T>, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    crate::ops::matmul_batched(&m.values, x)
}

/// Tensor-level composition; the result is tagged as a cycle map.
pub fn compose_t<T: Scalar>(m1: &AttentionMap<T>, m2: &AttentionMap<T>) -> Result<AttentionMap<T>, TensorError> {
    AttentionMap::new(crate::ops::matmul_batched(&m1.values, &m2.values)?, Direction::Cycle)
}

// ── Valid masks ──────────────────────────────────────────────────────

/// Column-mass occlusion test: mask[i, s] = 1 iff Σ_t M[i, t, s] > τ.
/// The sum runs over the map's target index; a source column no target
/// draws from is occluded in the map's direction.
pub fn column_mass_mask<T: Scalar>(values: &Tensor<T>, tau: T) -> Tensor<T> {
    let (h, w) = (values.shape()[0], values.shape()[2]);
    let wt = values.shape()[1];
    let vd = values.data();
    let mut out = vec![T::zero(); h * w];
    for i in 0..h {
        for t in 0..wt {
            let row = &vd[(i * wt + t) * w..(i * wt + t + 1) * w];
            let orow = &mut out[i * w..(i + 1) * w];
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
    }
    for v in out.iter_mut() {
        *v = if *v > tau { T::one() } else { T::zero() };
    }
    Tensor::from_vec(&[h, w], out).expect("shape fixed")
}

/// Typed wrapper over [`column_mass_mask`]; the mask inherits the map's
/// direction tag.
pub fn valid_mask<T: Scalar>(m: &AttentionMap<T>, tau: f64) -> ValidMask<T> {
    ValidMask {
        values: column_mass_mask(&m.values, T::of(tau)),
        direction: m.direction,
    }
}

/// Binary opening then closing with a 3×3 square element. Erosion treats
/// the outside as 1 and dilation as 0, so a mask touching the border is
/// not eaten just for being at the border. Idempotent on its own output.
pub fn morph_cleanup<T: Scalar>(v: &ValidMask<T>) -> ValidMask<T> {
    ValidMask {
        values: morph_cleanup_values(&v.values),
        direction: v.direction,
    }
}

pub fn morph_cleanup_values<T: Scalar>(values: &Tensor<T>) -> Tensor<T> {
    let opened = binary_dilate(&binary_erode(values));
    binary_erode(&binary_dilate(&opened))
}

fn binary_erode<T: Scalar>(m: &Tensor<T>) -> Tensor<T> {
    morph_apply(m, true)
}

fn binary_dilate<T: Scalar>(m: &Tensor<T>) -> Tensor<T> {
    morph_apply(m, false)
}

fn morph_apply<T: Scalar>(m: &Tensor<T>, erode: bool) -> Tensor<T> {
    let (h, w) = (m.shape()[0], m.shape()[1]);
    Tensor::from_fn(m.shape(), |idx| {
        let (i, j) = (idx[0], idx[1]);
        let mut acc = erode;
        for di in -1isize..=1 {
            for dj in -1isize..=1 {
                let r = i as isize + di;
                let c = j as isize + dj;
                let inside = r >= 0 && r < h as isize && c >= 0 && c < w as isize;
                let bit = if inside { m.at(&[r as usize, c as usize]) != T::zero() } else { erode };
                if erode {
                    acc &= bit;
                } else {
                    acc |= bit;
                }
            }
        }
        if acc { T::one() } else { T::zero() }
    })
}

// ── Ground-truth maps from disparity ─────────────────────────────────

/// Build the exact correspondence map a disparity field induces.
///
/// Right→left: the row for left pixel (i, j) with disparity d places unit
/// mass at right column j − d; non-integer d splits the mass linearly
/// between the flanking columns. Rows are zeroed when the pixel is
/// flagged occluded or its source column falls outside [0, W−1] (the
/// correspondence leaves the frame). Left→right is the same pairing seen
/// from the other side, i.e. the per-row transpose.
///
/// Negative disparities and shifts beyond the image width are errors.
pub fn gt_attention_from_disparity<T: Scalar>(
    d: &DisparityMap<T>,
    direction: Direction,
) -> Result<AttentionMap<T>, TensorError> {
    let (h, w) = (d.values.shape()[0], d.values.shape()[1]);
    let mut values = vec![T::zero(); h * w * w];
    for i in 0..h {
        for j in 0..w {
            let dv = d.values.at(&[i, j]).to_f64();
            if !dv.is_finite() || dv < 0.0 || dv > w as f64 {
                return Err(TensorError::InvalidArg {
                    op: "gt_attention_from_disparity",
                    msg: format!("disparity {dv} at ({i}, {j}) out of range for width {w}"),
                });
            }
            if d.is_occluded(i, j) {
                continue;
            }
            let src = j as f64 - dv;
            if src < 0.0 || src > (w - 1) as f64 {
                continue;
            }
            let lo = src.floor();
            let hi_w = src - lo;
            let lo_w = 1.0 - hi_w;
            let base = (i * w + j) * w;
            let lo = lo as usize;
            if lo_w > 0.0 {
                values[base + lo] = T::of(lo_w);
            }
            if hi_w > 0.0 {
                values[base + lo + 1] = T::of(hi_w);
            }
        }
    }
    let rl = Tensor::from_vec(&[h, w, w], values)?;
    match direction {
        Direction::RightToLeft => AttentionMap::new(rl, direction),
        Direction::LeftToRight => AttentionMap::new(crate::ops::transpose_last2(&rl)?, direction),
        Direction::Cycle => Err(TensorError::InvalidArg {
            op: "gt_attention_from_disparity",
            msg: "cycle maps are composed, not built from disparity".into(),
        }),
    }
}

/// Diagnostic expectation d(i, j) = j − Σ_s s · M[i, j, s]. Zero rows
/// (no correspondence) report d = j; not used in training.
pub fn expected_disparity<T: Scalar>(m: &AttentionMap<T>) -> DisparityMap<T> {
    let (h, w) = (m.height(), m.width());
    let vd = m.values.data();
    let values = Tensor::from_fn(&[h, w], |idx| {
        let (i, j) = (idx[0], idx[1]);
        let row = &vd[(i * w + j) * w..(i * w + j + 1) * w];
        let mut mean = 0.0;
        for (s, &v) in row.iter().enumerate() {
            mean += s as f64 * v.to_f64();
        }
        T::of(j as f64 - mean)
    });
    DisparityMap { values, occluded: None }
}

/// Mean attention mass a map places on the true correspondence: the row
/// dot product with the reference map, averaged over rows where the
/// reference has mass (occluded rows are skipped). 1.0 means every row
/// concentrates exactly on its reference columns.
pub fn mass_at_reference<T: Scalar>(m: &AttentionMap<T>, reference: &AttentionMap<T>) -> f64 {
    assert_eq!(m.values.shape(), reference.values.shape(), "map extents must match");
    let (h, w) = (m.height(), m.width());
    let (md, rd) = (m.values.data(), reference.values.data());
    let mut total = 0.0;
    let mut rows = 0usize;
    for r in 0..h * w {
        let row = &md[r * w..(r + 1) * w];
        let ref_row = &rd[r * w..(r + 1) * w];
        if ref_row.iter().all(|&v| v == T::zero()) {
            continue;
        }
        total += row.iter().zip(ref_row).map(|(&a, &b)| a.to_f64() * b.to_f64()).sum::<f64>();
        rows += 1;
    }
    if rows == 0 {
        0.0
    } else {
        total / rows as f64
    }
}
