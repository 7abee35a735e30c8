use serde::{Deserialize, Serialize};

/// Pointwise nonlinearity used by every hidden layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { alpha: f64 },
    Elu { alpha: f64 },
    Tanh,
}

/// Open interval `(lower, upper)` on which an activation equals
/// `slope * x + intercept`. `None` bounds are infinite.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineSubdomain {
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub slope: f64,
    pub intercept: f64,
}

impl AffineSubdomain {
    pub fn lower_bound(&self) -> f64 {
        self.lower.unwrap_or(f64::NEG_INFINITY)
    }

    pub fn upper_bound(&self) -> f64 {
        self.upper.unwrap_or(f64::INFINITY)
    }

    pub fn contains_strictly(&self, x: f64) -> bool {
        x > self.lower_bound() && x < self.upper_bound()
    }

    /// Signed distance to the nearest boundary; positive inside.
    pub fn margin(&self, x: f64) -> f64 {
        (x - self.lower_bound()).min(self.upper_bound() - x)
    }

    /// `[lo, hi]` is a closed subinterval of the open subdomain.
    pub fn contains_closed(&self, lo: f64, hi: f64) -> bool {
        lo <= hi && self.contains_strictly(lo) && self.contains_strictly(hi)
    }
}

/// An activation together with the affine segments the lifting construction
/// may place pre-activations in.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Activation", into = "Activation")]
pub struct ActivationSpec {
    pub kind: Activation,
    /// Segment used by default when constructing lifts.
    pub affine_subdomain: AffineSubdomain,
    /// True when the segment is only approximately affine (tanh).
    pub approx: bool,
}

impl From<Activation> for ActivationSpec {
    fn from(kind: Activation) -> Self {
        ActivationSpec::new(kind)
    }
}

impl From<ActivationSpec> for Activation {
    fn from(spec: ActivationSpec) -> Self {
        spec.kind
    }
}

const POSITIVE_IDENTITY: AffineSubdomain = AffineSubdomain {
    lower: Some(0.0),
    upper: None,
    slope: 1.0,
    intercept: 0.0,
};

impl ActivationSpec {
    pub fn new(kind: Activation) -> Self {
        let (affine_subdomain, approx) = match kind {
            Activation::Relu | Activation::Elu { .. } => (POSITIVE_IDENTITY, false),
            Activation::LeakyRelu { alpha } => (
                AffineSubdomain {
                    lower: None,
                    upper: Some(0.0),
                    slope: alpha,
                    intercept: 0.0,
                },
                false,
            ),
            Activation::Tanh => (
                AffineSubdomain {
                    lower: Some(-0.01),
                    upper: Some(0.01),
                    slope: 1.0,
                    intercept: 0.0,
                },
                true,
            ),
        };
        ActivationSpec {
            kind,
            affine_subdomain,
            approx,
        }
    }

    pub fn relu() -> Self {
        Self::new(Activation::Relu)
    }

    pub fn tanh() -> Self {
        Self::new(Activation::Tanh)
    }

    /// Every affine segment with nonzero slope, default segment first.
    pub fn subdomains(&self) -> Vec<AffineSubdomain> {
        let mut out = vec![self.affine_subdomain];
        if let Activation::LeakyRelu { .. } = self.kind {
            out.push(POSITIVE_IDENTITY);
        }
        out
    }

    /// Default closed interval `[x_low, x_up]` used by lifts.
    pub fn default_interval(&self) -> (f64, f64) {
        match self.kind {
            Activation::Relu | Activation::Elu { .. } => (1.0, 2.0),
            Activation::LeakyRelu { .. } => (-2.0, -1.0),
            Activation::Tanh => (-0.008, 0.008),
        }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match self.kind {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu { alpha } => {
                if x > 0.0 {
                    x
                } else {
                    alpha * x
                }
            }
            Activation::Elu { alpha } => {
                if x > 0.0 {
                    x
                } else {
                    alpha * x.exp_m1()
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative, with the assigned subgradient at kinks: 0 for ReLU and
    /// `alpha` for leaky ReLU.
    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match self.kind {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { alpha } => {
                if x > 0.0 {
                    1.0
                } else {
                    alpha
                }
            }
            Activation::Elu { alpha } => {
                if x > 0.0 {
                    1.0
                } else {
                    alpha * x.exp()
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    /// Largest slope of the activation; used for Lipschitz bounds.
    pub fn lipschitz(&self) -> f64 {
        match self.kind {
            Activation::Relu | Activation::Tanh => 1.0,
            Activation::LeakyRelu { alpha } => alpha.abs().max(1.0),
            Activation::Elu { alpha } => alpha.abs().max(1.0),
        }
    }

    /// Maximum deviation of `eval` from the affine form over `samples`
    /// evenly spaced points of the default segment (a bounded window of it
    /// when the segment is unbounded).
    pub fn affine_deviation(&self, samples: usize) -> f64 {
        let d = self.affine_subdomain;
        let lo = d.lower.unwrap_or(d.upper_bound() - 10.0);
        let hi = d.upper.unwrap_or(d.lower_bound() + 10.0);
        let width = hi - lo;
        (1..=samples)
            .map(|i| lo + width * i as f64 / (samples + 1) as f64)
            .map(|x| (self.eval(x) - (d.slope * x + d.intercept)).abs())
            .fold(0.0, f64::max)
    }
}
