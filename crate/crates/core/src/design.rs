//! Choosing where derivative-sign constraints are imposed, and Latin
//! hypercube designs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use libm::erfc;
use thiserror::Error;

use crate::gp::{gp_conditional, Dataset, DerivativeBlock, DerivativeSpec, Direction, GpError, Point, Site};
use crate::kernel::KernelParams;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error("invalid interval [{lo}, {hi}]")]
    Bounds { lo: f64, hi: f64 },
    #[error("count must be at least 1")]
    ZeroCount,
    #[error("grid offset {0} must lie in (0, 1)")]
    Offset(f64),
    #[error("arm length {0} must be positive and finite")]
    Arm(f64),
    #[error("center {index} lies outside the box")]
    OutsideBox { index: usize },
    #[error("box has {got} dimensions, centers have {expected}")]
    BoxDims { expected: usize, got: usize },
    #[error("dimension {dim} out of range for {dims}-d inputs")]
    Dimension { dim: usize, dims: usize },
    #[error(transparent)]
    Gp(#[from] GpError),
}

fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `P(∂y/∂x_k (x) < 0 | y)` under the unconstrained GP with fixed
/// parameters.
pub fn prob_negative_derivative(x: &[f64], k: usize, data: &Dataset, p: &KernelParams) -> Result<f64, GpError> {
    let site = Site::derivative(x.to_vec(), k, Direction::Increasing);
    let c = gp_conditional(data, &[site], p)?;
    let v = c.cov[(0, 0)];
    if !(v > 0.0) {
        return Err(GpError::DegenerateVariance(v));
    }
    Ok(norm_cdf(-c.mean[0] / v.sqrt()))
}

/// `count` equally spaced points in `(lo, hi)`: `lo + (i + offset)·h` with
/// `h = (hi − lo) / count`. `offset = 0.5` gives cell midpoints.
pub fn place_gap_grid(lo: f64, hi: f64, count: usize, offset: f64) -> Result<Vec<f64>, DesignError> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(DesignError::Bounds { lo, hi });
    }
    if count == 0 {
        return Err(DesignError::ZeroCount);
    }
    if !(offset > 0.0 && offset < 1.0) {
        return Err(DesignError::Offset(offset));
    }
    let h = (hi - lo) / count as f64;
    Ok((0..count).map(|i| lo + (i as f64 + offset) * h).collect())
}

/// Axis-aligned box `[lo_k, hi_k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl InputBox {
    pub fn unit(d: usize) -> Self {
        Self {
            lo: vec![0.0; d],
            hi: vec![1.0; d],
        }
    }

    pub fn dims(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dims() && x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| *v >= *l && *v <= *h)
    }

    fn clip(&self, k: usize, v: f64) -> f64 {
        v.clamp(self.lo[k], self.hi[k])
    }
}

/// Derivative locations on a "+" around every center: along axis `k`,
/// `per_arm` points on each side at spacing `arm / per_arm`, clipped to the
/// box and deduplicated. Axis-`k` points carry `∂/∂x_k` constraints.
pub fn place_plus_shape(
    centers: &[Point],
    arm: f64,
    per_arm: usize,
    bounds: &InputBox,
    dims: &[(usize, Direction)],
) -> Result<DerivativeSpec, DesignError> {
    if !(arm.is_finite() && arm > 0.0) {
        return Err(DesignError::Arm(arm));
    }
    if per_arm == 0 {
        return Err(DesignError::ZeroCount);
    }
    for (index, c) in centers.iter().enumerate() {
        if c.len() != bounds.dims() {
            return Err(DesignError::BoxDims {
                expected: c.len(),
                got: bounds.dims(),
            });
        }
        if !bounds.contains(c) {
            return Err(DesignError::OutsideBox { index });
        }
    }
    let step = arm / per_arm as f64;
    let mut blocks = Vec::new();
    for &(k, direction) in dims {
        if k >= bounds.dims() {
            return Err(DesignError::Dimension { dim: k, dims: bounds.dims() });
        }
        let mut locations: Vec<Point> = Vec::new();
        for c in centers {
            for side in [-1.0, 1.0] {
                for j in 1..=per_arm {
                    let mut x = c.clone();
                    x[k] = bounds.clip(k, c[k] + side * j as f64 * step);
                    if !locations.contains(&x) {
                        locations.push(x);
                    }
                }
            }
        }
        blocks.push(DerivativeBlock { dim: k, direction, locations });
    }
    Ok(DerivativeSpec::new(blocks))
}

/// Random Latin hypercube of `n` points in `[0,1]^d`: each column is a
/// random permutation of the `n` cells, jittered uniformly within cells.
pub fn lhd(n: usize, d: usize, seed: u64) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![vec![0.0; d]; n];
    for k in 0..d {
        let mut cells: Vec<usize> = (0..n).collect();
        cells.shuffle(&mut rng);
        for (i, c) in cells.into_iter().enumerate() {
            out[i][k] = (c as f64 + rng.gen::<f64>()) / n as f64;
        }
    }
    out
}

/// How to build the derivative input set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum PlacementPlan {
    GapGrid {
        dim: usize,
        direction: Direction,
        lo: f64,
        hi: f64,
        count: usize,
        #[serde(default = "half")]
        offset: f64,
    },
    PlusShape {
        centers: Vec<Point>,
        #[serde(default = "default_arm")]
        arm: f64,
        #[serde(default = "default_per_arm")]
        per_arm: usize,
        dims: Vec<(usize, Direction)>,
        bounds: Option<InputBox>,
    },
    Explicit {
        blocks: Vec<DerivativeBlock>,
    },
}

fn half() -> f64 {
    0.5
}

fn default_arm() -> f64 {
    0.1
}

fn default_per_arm() -> usize {
    2
}

impl PlacementPlan {
    /// `dims` is the input dimension; gap grids need it to be 1.
    pub fn resolve(&self, dims: usize) -> Result<DerivativeSpec, DesignError> {
        let spec = match self {
            PlacementPlan::GapGrid {
                dim,
                direction,
                lo,
                hi,
                count,
                offset,
            } => {
                if dims != 1 || *dim != 0 {
                    return Err(DesignError::Dimension { dim: *dim, dims });
                }
                let pts = place_gap_grid(*lo, *hi, *count, *offset)?;
                DerivativeSpec::new(vec![DerivativeBlock {
                    dim: 0,
                    direction: *direction,
                    locations: pts.into_iter().map(|v| vec![v]).collect(),
                }])
            }
            PlacementPlan::PlusShape {
                centers,
                arm,
                per_arm,
                dims: axes,
                bounds,
            } => {
                let b = bounds.clone().unwrap_or_else(|| InputBox::unit(dims));
                place_plus_shape(centers, *arm, *per_arm, &b, axes)?
            }
            PlacementPlan::Explicit { blocks } => DerivativeSpec::new(blocks.clone()),
        };
        spec.validate(dims)?;
        Ok(spec)
    }
}

/// Experimental: the `m` candidates with the largest probability of a
/// negative derivative in dimension `k`, highest first.
pub fn greedy_top_m(
    candidates: &[Point],
    k: usize,
    m: usize,
    data: &Dataset,
    p: &KernelParams,
) -> Result<Vec<(Point, f64)>, GpError> {
    let mut scored = candidates
        .iter()
        .map(|x| prob_negative_derivative(x, k, data, p).map(|q| (x.clone(), q)))
        .collect::<Result<Vec<_>, _>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored.truncate(m);
    Ok(scored)
}
