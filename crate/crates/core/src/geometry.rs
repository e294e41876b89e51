//! Equirectangular pixel/sphere conversions and the latitude-dependent
//! loss weights.
//!
//! Rows map to the polar angle `phi` (0 at the north pole, pi at the south
//! pole) and columns map to the longitude `theta`, both sampled at pixel
//! centers.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphericalCoord {
    theta: f64,
    phi: f64,
}

impl SphericalCoord {
    pub fn new(theta: f64, phi: f64) -> Result<Self> {
        if !(0.0..=2.0 * PI).contains(&theta) || !(0.0..=PI).contains(&phi) {
            return Err(Error::Domain(format!(
                "spherical coordinate (theta {theta}, phi {phi}) outside [0, 2pi] x [0, pi]"
            )));
        }
        Ok(Self { theta, phi })
    }

    /// Longitude in `[0, 2pi]`.
    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Polar angle from the north pole in `[0, pi]`.
    pub fn phi(&self) -> f64 {
        self.phi
    }
}

/// Polar angle of the center of `row` in an image of `height` rows.
#[inline]
pub fn row_phi(row: usize, height: usize) -> f64 {
    PI * (row as f64 + 0.5) / height as f64
}

#[inline]
pub fn col_theta(col: usize, width: usize) -> f64 {
    2.0 * PI * (col as f64 + 0.5) / width as f64
}

pub fn pixel_to_sphere(row: usize, col: usize, height: usize, width: usize) -> Result<SphericalCoord> {
    if row >= height {
        return Err(Error::Bounds {
            index: row,
            extent: height,
        });
    }
    if col >= width {
        return Err(Error::Bounds {
            index: col,
            extent: width,
        });
    }
    Ok(SphericalCoord {
        theta: col_theta(col, width),
        phi: row_phi(row, height),
    })
}

/// Unit ray direction with +y pointing at the north pole.
pub fn sphere_to_direction(c: SphericalCoord) -> [f64; 3] {
    let (sp, cp) = c.phi.sin_cos();
    let (st, ct) = c.theta.sin_cos();
    [sp * ct, cp, sp * st]
}

/// Per-pixel weights `1 - |cos phi|`: the spherical cap area between the
/// nearer pole and the pixel's latitude on a unit sphere, divided by 2pi.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix {
    grid: Tensor2,
}

impl WeightMatrix {
    pub fn grid(&self) -> &Tensor2 {
        &self.grid
    }

    pub fn into_grid(self) -> Tensor2 {
        self.grid
    }

    pub fn dims(&self) -> [usize; 2] {
        self.grid.dims()
    }

    /// All-ones weights, used for the unweighted baseline.
    pub fn uniform(height: usize, width: usize) -> Result<Self> {
        Ok(Self {
            grid: Tensor2::new_filled([height, width], 1.0)?,
        })
    }
}

/// Weight for a single latitude.
#[inline]
pub fn latitude_weight(phi: f64) -> f64 {
    // North of the equator the cap integral is 1 - cos(phi); the southern
    // half mirrors it from the south pole, giving 1 + cos(phi).
    if phi <= PI / 2.0 {
        1.0 - phi.cos()
    } else {
        1.0 + phi.cos()
    }
}

/// Builds the spherical weight matrix; with `normalize` the weights are
/// rescaled to unit mean.
pub fn spherical_weight_matrix(height: usize, width: usize, normalize: bool) -> Result<WeightMatrix> {
    let row_weights: Vec<f64> = (0..height).map(|r| latitude_weight(row_phi(r, height))).collect();
    let mut grid = Tensor2::from_fn([height, width], |r, _| row_weights[r])?;
    if normalize {
        let mean = row_weights.iter().sum::<f64>() / height as f64;
        for v in grid.data_mut() {
            *v /= mean;
        }
    }
    Ok(WeightMatrix { grid })
}
