//! The training objective: a reconstruction term plus three
//! correspondence-consistency terms (photometric, smoothness, cycle),
//! all restricted to visibility-mask pixels where applicable.
//!
//! Every term is normalized to a mean (per element or per valid pixel)
//! rather than a raw sum, so the consistency weight λ is independent of
//! patch size. Masks enter as plain tensors and never carry gradients.

use crate::error::TensorError;
use crate::net::NetOutputs;
use crate::pam::compose;
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    /// Weight on the three consistency losses.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda: 0.005 }
    }
}

/// Which consistency terms participate; the reconstruction term always
/// does. The four ablation rows are (false,false,false), (true,false,false),
/// (true,true,false) and (true,true,true).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossComponents {
    pub photometric: bool,
    pub smooth: bool,
    pub cycle: bool,
}

impl Default for LossComponents {
    fn default() -> Self {
        LossComponents { photometric: true, smooth: true, cycle: true }
    }
}

impl LossComponents {
    pub fn sr_only() -> Self {
        LossComponents { photometric: false, smooth: false, cycle: false }
    }
}

/// Scalar values of one evaluation of the objective.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossReport {
    pub sr: f64,
    pub photometric: f64,
    pub smooth: f64,
    pub cycle: f64,
    pub total: f64,
    /// Set when a mask had no valid pixels so its term degraded to 0.
    pub degenerate_masks: bool,
}

impl LossReport {
    pub fn log_line(&self, step: usize) -> String {
        format!(
            "step {} sr {:.6e} photometric {:.6e} smooth {:.6e} cycle {:.6e} total {:.6e}",
            step, self.sr, self.photometric, self.smooth, self.cycle, self.total
        )
    }
}

/// Mean squared error over all elements.
pub fn sr_loss<'t, T: Scalar>(sr: &Var<'t, T>, hr: &Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
    if sr.shape() != hr.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "sr_loss",
            lhs: sr.shape().to_vec(),
            rhs: hr.shape().to_vec(),
        });
    }
    let diff = sr.sub(hr)?;
    diff.mul(&diff)?.mean_all()
}

fn count_valid<T: Scalar>(mask: &Tensor<T>) -> usize {
    mask.data().iter().filter(|&&v| v != T::zero()).count()
}

/// Mean absolute difference over masked pixels (mask broadcast over the
/// trailing channel axis), normalized by valid pixels × channels.
/// Returns 0 and a degeneracy flag when the mask is empty.
fn masked_mae<'t, T: Scalar>(
    a: &Var<'t, T>,
    b: &Var<'t, T>,
    mask: &Tensor<T>,
) -> Result<(Var<'t, T>, bool), TensorError> {
    let tape = a.tape();
    let valid = count_valid(mask);
    if valid == 0 {
        return Ok((tape.constant(Tensor::scalar(T::zero())), true));
    }
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let m = tape.constant(mask.reshape(&[h, w, 1])?);
    let channels = *a.shape().last().unwrap();
    let masked = a.sub(b)?.abs()?.mul(&m)?;
    let norm = T::one() / T::of((valid * channels) as f64);
    Ok((masked.sum_all()?.scale(norm)?, false))
}

/// Both warp-consistency directions: the left image against the warp of
/// the right and vice versa, each under its own visibility mask.
pub fn photometric_loss<'t, T: Scalar>(
    left: &Var<'t, T>,
    right: &Var<'t, T>,
    m_right_to_left: &Var<'t, T>,
    m_left_to_right: &Var<'t, T>,
    v_left_to_right: &Tensor<T>,
    v_right_to_left: &Tensor<T>,
) -> Result<(Var<'t, T>, bool), TensorError> {
    let warp_left = crate::pam::apply_attention(m_right_to_left, right)?;
    let (l_term, l_empty) = masked_mae(left, &warp_left, v_left_to_right)?;
    let warp_right = crate::pam::apply_attention(m_left_to_right, left)?;
    let (r_term, r_empty) = masked_mae(right, &warp_right, v_right_to_left)?;
    Ok((l_term.add(&r_term)?, l_empty || r_empty))
}

/// Vertical neighbor consistency |M(i,j,k) − M(i+1,j,k)| plus shifted
/// horizontal consistency |M(i,j,k) − M(i,j+1,k+1)|, each term a mean over
/// its in-bounds range, summed over both maps. Out-of-range neighbor
/// terms are dropped, not padded.
pub fn smoothness_loss<'t, T: Scalar>(
    m_left_to_right: &Var<'t, T>,
    m_right_to_left: &Var<'t, T>,
) -> Result<Var<'t, T>, TensorError> {
    let mut acc: Option<Var<'t, T>> = None;
    for m in [m_left_to_right, m_right_to_left] {
        let (h, wt, ws) = (m.shape()[0], m.shape()[1], m.shape()[2]);
        let mut terms: Vec<Var<'t, T>> = Vec::new();
        if h > 1 {
            let top = m.slice(&[0, 0, 0], &[h - 1, wt, ws])?;
            let bottom = m.slice(&[1, 0, 0], &[h - 1, wt, ws])?;
            terms.push(top.sub(&bottom)?.abs()?.mean_all()?);
        }
        if wt > 1 && ws > 1 {
            let here = m.slice(&[0, 0, 0], &[h, wt - 1, ws - 1])?;
            let shifted = m.slice(&[0, 1, 1], &[h, wt - 1, ws - 1])?;
            terms.push(here.sub(&shifted)?.abs()?.mean_all()?);
        }
        for t in terms {
            acc = Some(match acc {
                Some(a) => a.add(&t)?,
                None => t,
            });
        }
    }
    match acc {
        Some(a) => Ok(a),
        None => Ok(m_left_to_right.tape().constant(Tensor::scalar(T::zero()))),
    }
}

fn identity_stack<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    Tensor::from_fn(&[h, w, w], |idx| if idx[1] == idx[2] { T::one() } else { T::zero() })
}

/// Row distance of each composed round-trip map from the identity stack,
/// averaged over the matching mask's valid pixels, both directions summed.
pub fn cycle_loss<'t, T: Scalar>(
    m_left_to_right: &Var<'t, T>,
    m_right_to_left: &Var<'t, T>,
    v_left_to_right: &Tensor<T>,
    v_right_to_left: &Tensor<T>,
) -> Result<(Var<'t, T>, bool), TensorError> {
    let tape = m_left_to_right.tape();
    let (h, w) = (m_left_to_right.shape()[0], m_left_to_right.shape()[1]);
    let id = identity_stack::<T>(h, w);
    let mut degenerate = false;
    let mut acc: Option<Var<'t, T>> = None;
    for (first, second, mask) in [
        (m_right_to_left, m_left_to_right, v_left_to_right),
        (m_left_to_right, m_right_to_left, v_right_to_left),
    ] {
        let valid = count_valid(mask);
        if valid == 0 {
            degenerate = true;
            continue;
        }
        let cyclic = compose(first, second)?;
        let diff = cyclic.sub(&tape.constant(id.clone()))?.abs()?;
        let m = tape.constant(mask.reshape(&[h, w, 1])?);
        let term = diff.mul(&m)?.sum_all()?.scale(T::one() / T::of(valid as f64))?;
        acc = Some(match acc {
            Some(a) => a.add(&term)?,
            None => term,
        });
    }
    let value = match acc {
        Some(a) => a,
        None => tape.constant(Tensor::scalar(T::zero())),
    };
    Ok((value, degenerate))
}

/// total = sr + λ · (photometric + smooth + cycle), with disabled or
/// unavailable components contributing zero.
pub fn total_loss<'t, T: Scalar>(
    outputs: &NetOutputs<'t, T>,
    left: &Var<'t, T>,
    right: &Var<'t, T>,
    hr: &Var<'t, T>,
    weights: LossWeights,
    components: LossComponents,
) -> Result<(Var<'t, T>, LossReport), TensorError> {
    let tape = outputs.sr.tape();
    let zero = || tape.constant(Tensor::scalar(T::zero()));
    let sr = sr_loss(&outputs.sr, hr)?;
    let mut report = LossReport { sr: sr.value().data()[0].to_f64(), ..Default::default() };

    let maps = outputs
        .m_left_to_right
        .as_ref()
        .zip(outputs.m_right_to_left.as_ref())
        .zip(outputs.v_left_to_right.as_ref().zip(outputs.v_right_to_left.as_ref()));

    let (photo, smooth, cycle) = match maps {
        Some(((m_lr, m_rl), (v_lr, v_rl))) => {
            let photo = if components.photometric {
                let (p, empty) = photometric_loss(left, right, m_rl, m_lr, v_lr, v_rl)?;
                report.degenerate_masks |= empty;
                p
            } else {
                zero()
            };
            let smooth = if components.smooth { smoothness_loss(m_lr, m_rl)? } else { zero() };
            let cycle = if components.cycle {
                let (c, empty) = cycle_loss(m_lr, m_rl, v_lr, v_rl)?;
                report.degenerate_masks |= empty;
                c
            } else {
                zero()
            };
            (photo, smooth, cycle)
        }
        None => (zero(), zero(), zero()),
    };

    report.photometric = photo.value().data()[0].to_f64();
    report.smooth = smooth.value().data()[0].to_f64();
    report.cycle = cycle.value().data()[0].to_f64();

    let consistency = photo.add(&smooth)?.add(&cycle)?;
    let total = sr.add(&consistency.scale(T::of(weights.lambda))?)?;
    report.total = total.value().data()[0].to_f64();
    Ok((total, report))
}
