//! Neural layers: dilated 3×3 / 1×1 convolutions, residual blocks and
//! sub-pixel upsampling, plus the named parameter store they live in.
//!
//! Initialization is Kaiming-style uniform: each kernel is drawn from
//! U(−b, b) with b = gain · sqrt(3 / fan_in), fan_in = kh·kw·Cin and
//! gain² = 2 / (1 + slope²) for the leaky ReLU slope used by the network.
//! Biases start at zero. All draws come from the caller's seeded RNG in
//! registration order, so a seed pins every weight in the model.

use indexmap::IndexMap;
use rand::Rng;

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Leakage factor for every activation in the network.
pub const LEAKY_SLOPE: f64 = 0.1;

// ── Parameter store ──────────────────────────────────────────────────

/// Named parameter tensors in deterministic (insertion) order. The order
/// is what makes optimizer sweeps and checkpoints reproducible.
#[derive(Clone)]
#[derive(Debug)]
pub struct ParamStore<T: Scalar> {
    params: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: IndexMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<(), TensorError> {
        if self.params.contains_key(name) {
            return Err(TensorError::InvalidArg {
                op: "param_insert",
                msg: format!("duplicate parameter name '{name}'"),
            });
        }
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    /// Replace a parameter's value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<(), TensorError> {
        match self.params.get_mut(name) {
            Some(slot) => {
                if slot.shape() != value.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "param_set",
                        lhs: slot.shape().to_vec(),
                        rhs: value.shape().to_vec(),
                    });
                }
                *slot = value;
                Ok(())
            }
            None => Err(TensorError::InvalidArg {
                op: "param_set",
                msg: format!("unknown parameter '{name}'"),
            }),
        }
    }

    /// Multiply a registered parameter elementwise by `factor`.
    pub fn rescale(&mut self, name: &str, factor: f64) -> Result<(), TensorError> {
        let scaled = match self.params.get(name) {
            Some(t) => t.map(|v| v * T::of(factor)),
            None => {
                return Err(TensorError::InvalidArg {
                    op: "param_rescale",
                    msg: format!("unknown parameter '{name}'"),
                })
            }
        };
        self.params.insert(name.to_string(), scaled);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Create a differentiable leaf per parameter on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundParams<'t, T> {
        let vars = self
            .params
            .iter()
            .map(|(name, value)| (name.clone(), tape.leaf(value.clone())))
            .collect();
        BoundParams { vars }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast::<U>())).collect(),
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameters bound to one tape as leaf `Var`s.
pub struct BoundParams<'t, T: Scalar> {
    vars: IndexMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> BoundParams<'t, T> {
    /// Assemble from explicit pairs (used by gradient-check closures that
    /// receive their leaves from the checker).
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var<'t, T>)>) -> Self {
        BoundParams { vars: pairs.into_iter().collect() }
    }

    /// Look up a bound parameter. Missing names are a bug in layer
    /// registration, not a runtime condition, hence the panic.
    pub fn var(&self, name: &str) -> &Var<'t, T> {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' is not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var<'t, T>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Gradient per parameter in store order; parameters the loss does not
    /// reach get zeros of the right shape.
    pub fn grads_by_name(&self, grads: &Gradients<T>) -> IndexMap<String, Tensor<T>> {
        self.vars
            .iter()
            .map(|(name, var)| {
                let g = grads
                    .wrt(var)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(var.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

// ── Initialization ───────────────────────────────────────────────────

/// Factor applied to the closing conv of every additive branch at init.
/// With ~9 skip connections stacked, unit-variance branches would grow the
/// activation variance by orders of magnitude before the first update;
/// damping each branch keeps initial outputs near the input scale.
pub const RESIDUAL_INIT_SCALE: f64 = 0.1;

/// U(−b, b) with b = sqrt(2 / (1 + slope²)) · sqrt(3 / fan_in).
pub fn kaiming_uniform<T: Scalar, R: Rng>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> Tensor<T> {
    let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, T::of(-bound), T::of(bound), rng)
}

/// Re-initializes a registered 1×1 kernel of shape [1, 1, cin, cout]
/// (cin ≥ cout) as damped random weights plus identity on the leading
/// square block, so the layer starts by passing its first `cout` input
/// channels through unchanged.
pub fn passthrough_init<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    cout: usize,
) -> Result<(), TensorError> {
    store.rescale(name, RESIDUAL_INIT_SCALE)?;
    let mut kernel = store.get(name).expect("rescale verified existence").clone();
    let shape = kernel.shape().to_vec();
    if shape.len() != 4 || shape[0] != 1 || shape[1] != 1 || shape[2] < cout || shape[3] != cout {
        return Err(TensorError::BadShape {
            op: "passthrough_init",
            expected: format!("1,1,>= {cout},{cout}"),
            got: shape,
        });
    }
    let data = kernel.data_mut();
    for c in 0..cout {
        data[c * cout + c] = data[c * cout + c] + T::of(1.0);
    }
    store.set(name, kernel)
}

// ── Layers ───────────────────────────────────────────────────────────

/// A same-padding convolution with registered kernel/bias parameters.
#[derive(Clone, Debug)]
pub struct Conv2d {
    kernel: String,
    bias: String,
    dilation: usize,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        ksize: usize,
        cin: usize,
        cout: usize,
        dilation: usize,
    ) -> Result<Self, TensorError> {
        let kernel = format!("{name}.kernel");
        let bias = format!("{name}.bias");
        let fan_in = ksize * ksize * cin;
        store.insert(&kernel, kaiming_uniform(&[ksize, ksize, cin, cout], fan_in, rng))?;
        store.insert(&bias, Tensor::zeros(&[cout]))?;
        Ok(Conv2d { kernel, bias, dilation })
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        p: &BoundParams<'t, T>,
        x: &Var<'t, T>,
    ) -> Result<Var<'t, T>, TensorError> {
        x.conv2d(p.var(&self.kernel), p.var(&self.bias), self.dilation)
    }

    /// Convolution followed by the network's leaky ReLU.
    pub fn forward_act<'t, T: Scalar>(
        &self,
        p: &BoundParams<'t, T>,
        x: &Var<'t, T>,
    ) -> Result<Var<'t, T>, TensorError> {
        self.forward(p, x)?.leaky_relu(T::of(LEAKY_SLOPE))
    }
}

/// conv → leaky ReLU → conv, then the input skip; no activation after
/// the sum. The closing conv starts damped so the block begins close to
/// the identity.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    c1: Conv2d,
    c2: Conv2d,
}

impl ResidualBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
    ) -> Result<Self, TensorError> {
        let block = ResidualBlock {
            c1: Conv2d::new(store, rng, &format!("{name}.c1"), 3, channels, channels, 1)?,
            c2: Conv2d::new(store, rng, &format!("{name}.c2"), 3, channels, channels, 1)?,
        };
        store.rescale(&format!("{name}.c2.kernel"), RESIDUAL_INIT_SCALE)?;
        Ok(block)
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        p: &BoundParams<'t, T>,
        x: &Var<'t, T>,
    ) -> Result<Var<'t, T>, TensorError> {
        self.c2.forward(p, &self.c1.forward_act(p, x)?)?.add(x)
    }
}

/// 1×1 conv C → C·s² feeding a depth-to-space shuffle: (H, W, C) → (sH, sW, C).
#[derive(Clone, Debug)]
pub struct SubPixelUpsample {
    conv: Conv2d,
    scale: usize,
}

impl SubPixelUpsample {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        scale: usize,
    ) -> Result<Self, TensorError> {
        if scale < 2 {
            return Err(TensorError::InvalidArg {
                op: "sub_pixel",
                msg: format!("scale must be >= 2, got {scale}"),
            });
        }
        Ok(SubPixelUpsample {
            conv: Conv2d::new(store, rng, name, 1, channels, channels * scale * scale, 1)?,
            scale,
        })
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        p: &BoundParams<'t, T>,
        x: &Var<'t, T>,
    ) -> Result<Var<'t, T>, TensorError> {
        self.conv.forward(p, x)?.pixel_shuffle(self.scale)
    }
}
