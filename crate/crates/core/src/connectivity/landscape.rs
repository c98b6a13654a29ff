//! Two-dimensional slices of the loss landscape through three parameter
//! points.

use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::evaluate;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::NetworkParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeOptions {
    pub nx: usize,
    pub ny: usize,
    /// Fraction of the anchors' extent added on every side.
    pub margin: f64,
}

impl Default for LandscapeOptions {
    fn default() -> Self {
        Self {
            nx: 64,
            ny: 64,
            margin: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Landscape {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// `loss[[iy, ix]]` at `p0 + xs[ix] u + ys[iy] v`.
    pub loss: Array2<f64>,
    pub error: Array2<f64>,
    /// Plane coordinates of `p0`, `p1`, `p2`.
    pub anchors: [(f64, f64); 3],
    pub projections: Vec<(f64, f64)>,
}

impl Landscape {
    /// Header `x,y,loss,error`, x varying fastest.
    pub fn grid_csv(&self) -> String {
        let mut out = String::from("x,y,loss,error\n");
        for (iy, y) in self.ys.iter().enumerate() {
            for (ix, x) in self.xs.iter().enumerate() {
                writeln!(out, "{x},{y},{},{}", self.loss[[iy, ix]], self.error[[iy, ix]]).expect("string write");
            }
        }
        out
    }

    /// Header `kind,index,x,y` for anchors and projected points.
    pub fn points_csv(&self) -> String {
        let mut out = String::from("kind,index,x,y\n");
        for (i, (x, y)) in self.anchors.iter().enumerate() {
            writeln!(out, "anchor,{i},{x},{y}").expect("string write");
        }
        for (i, (x, y)) in self.projections.iter().enumerate() {
            writeln!(out, "trajectory,{i},{x},{y}").expect("string write");
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Evaluates the loss over a grid on the plane through `p0`, `p1`, `p2`,
/// using the orthonormal basis `u = (p1 - p0) / |p1 - p0|` and `v` the
/// Gram-Schmidt remainder of `p2 - p0`. Also projects every point of
/// `trajectory` onto that basis.
pub fn landscape_projection(
    p0: &NetworkParams,
    p1: &NetworkParams,
    p2: &NetworkParams,
    options: &LandscapeOptions,
    data: &Dataset,
    trajectory: &[NetworkParams],
) -> Result<Landscape> {
    let arch = p0.arch();
    if p1.arch() != arch || p2.arch() != arch || trajectory.iter().any(|t| t.arch() != arch) {
        return Err(Error::ArchMismatch);
    }
    if options.nx < 2 || options.ny < 2 || !(options.margin >= 0.0) {
        return Err(Error::InvalidArgument("landscape grid needs nx, ny >= 2 and margin >= 0".into()));
    }
    let origin = p0.to_flat();
    let e1 = sub(&p1.to_flat(), &origin);
    let e2 = sub(&p2.to_flat(), &origin);
    let n1 = dot(&e1, &e1).sqrt();
    let n2 = dot(&e2, &e2).sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::DegeneratePlane);
    }
    let u: Vec<f64> = e1.iter().map(|x| x / n1).collect();
    let along = dot(&e2, &u);
    let rest: Vec<f64> = e2.iter().zip(&u).map(|(x, ui)| x - along * ui).collect();
    let height = dot(&rest, &rest).sqrt();
    if height <= 1e-9 * n2 {
        return Err(Error::DegeneratePlane);
    }
    let v: Vec<f64> = rest.iter().map(|x| x / height).collect();

    let anchors = [(0.0, 0.0), (n1, 0.0), (along, height)];
    let axis = |coords: [f64; 3], n: usize| -> Vec<f64> {
        let lo = coords.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = coords.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pad = options.margin * (hi - lo);
        let (lo, hi) = (lo - pad, hi + pad);
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    };
    let xs = axis([0.0, n1, along], options.nx);
    let ys = axis([0.0, 0.0, height], options.ny);

    let mut loss = Array2::zeros((ys.len(), xs.len()));
    let mut error = Array2::zeros((ys.len(), xs.len()));
    let mut point = vec![0.0; origin.len()];
    for (iy, &y) in ys.iter().enumerate() {
        for (ix, &x) in xs.iter().enumerate() {
            for (k, p) in point.iter_mut().enumerate() {
                *p = origin[k] + x * u[k] + y * v[k];
            }
            let e = evaluate(&NetworkParams::from_flat(arch, &point)?, data)?;
            loss[[iy, ix]] = e.mean_cross_entropy;
            error[[iy, ix]] = e.error_rate;
        }
    }
    let projections = trajectory
        .iter()
        .map(|t| {
            let d = sub(&t.to_flat(), &origin);
            (dot(&d, &u), dot(&d, &v))
        })
        .collect();
    Ok(Landscape {
        xs,
        ys,
        loss,
        error,
        anchors,
        projections,
    })
}
