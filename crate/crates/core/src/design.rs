//! Space-filling designs of numerical experiments and their coverage.
//!
//! Designs are Latin hypercubes: every coordinate is split into `n` equal
//! strata and each stratum holds exactly one point. Among several random
//! hypercubes the one with the largest minimum inter-point distance (in
//! unit-scaled coordinates) is kept.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_CANDIDATES: usize = 50;
/// Largest evaluation grid used by [`covering_distance`] before switching to Monte Carlo.
pub const GRID_CAP: u64 = 1_000_000;
pub const MONTE_CARLO_SAMPLES: usize = 1_000_000;

/// Axis-aligned box `[lower, upper]` in `d` dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let b = Self { lower, upper };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.is_empty() {
            return Err(Error::domain("box must have dimension >= 1"));
        }
        if self.lower.len() != self.upper.len() {
            return Err(Error::domain(format!(
                "box bounds have different lengths ({} vs {})",
                self.lower.len(),
                self.upper.len()
            )));
        }
        for (k, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::domain(format!(
                    "box coordinate {k}: lower {lo} must be < upper {hi}"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    fn width(&self, k: usize) -> f64 {
        self.upper[k] - self.lower[k]
    }
}

/// A finite set of input points inside a [`Bounds`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub bounds: Bounds,
    pub points: Vec<Vec<f64>>,
    pub seed: u64,
}

impl Design {
    /// Wrap explicit points. Points must lie in the box; distinctness is
    /// checked by the emulator fit, which is where duplicates actually hurt.
    pub fn from_points(bounds: Bounds, points: Vec<Vec<f64>>, seed: u64) -> Result<Self> {
        bounds.validate()?;
        if points.is_empty() {
            return Err(Error::domain("design must contain at least one point"));
        }
        for (i, p) in points.iter().enumerate() {
            if p.len() != bounds.dim() {
                return Err(Error::domain(format!(
                    "design point {i} has dimension {}, box has {}",
                    p.len(),
                    bounds.dim()
                )));
            }
            if !bounds.contains(p) {
                return Err(Error::domain(format!("design point {i} lies outside the box")));
            }
        }
        Ok(Self { bounds, points, seed })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    /// First pair of points closer than `tol`, if any.
    pub fn find_duplicate(&self, tol: f64) -> Option<(usize, usize)> {
        for i in 0..self.points.len() {
            for j in 0..i {
                if sq_dist(&self.points[i], &self.points[j]) <= tol * tol {
                    return Some((j, i));
                }
            }
        }
        None
    }

    /// Minimum pairwise distance in unit-scaled coordinates.
    pub fn min_scaled_distance(&self) -> f64 {
        let scaled: Vec<Vec<f64>> = self.points.iter().map(|p| self.to_unit(p)).collect();
        min_pairwise(&scaled)
    }

    fn to_unit(&self, p: &[f64]) -> Vec<f64> {
        p.iter()
            .enumerate()
            .map(|(k, v)| (v - self.bounds.lower[k]) / self.bounds.width(k))
            .collect()
    }

    /// A new design containing these points followed by `extra`.
    pub fn extended(&self, extra: &[Vec<f64>]) -> Result<Self> {
        let mut points = self.points.clone();
        points.extend_from_slice(extra);
        Self::from_points(self.bounds.clone(), points, self.seed)
    }

    pub fn to_csv(&self) -> String {
        let header: Vec<String> = (1..=self.dim()).map(|k| format!("x{k}")).collect();
        let mut out = header.join(",");
        out.push('\n');
        for p in &self.points {
            let row: Vec<String> = p.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Parse the CSV written by [`Design::to_csv`].
    pub fn from_csv(text: &str, bounds: Bounds, seed: u64) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty design CSV".into()))?;
        let d = header.split(',').count();
        let mut points = Vec::new();
        for (row, line) in lines.enumerate() {
            let p = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse(format!("design CSV row {}: {e}", row + 1)))?;
            if p.len() != d {
                return Err(Error::Parse(format!(
                    "design CSV row {} has {} fields, header has {d}",
                    row + 1,
                    p.len()
                )));
            }
            points.push(p);
        }
        Self::from_points(bounds, points, seed)
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn min_pairwise(points: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in 0..i {
            best = best.min(sq_dist(&points[i], &points[j]));
        }
    }
    best.sqrt()
}

/// Maximin Latin hypercube with the default number of candidate draws.
pub fn lhs_design(bounds: &Bounds, n: usize, seed: u64) -> Result<Design> {
    lhs_design_with(bounds, n, seed, DEFAULT_CANDIDATES)
}

pub fn lhs_design_with(bounds: &Bounds, n: usize, seed: u64, candidates: usize) -> Result<Design> {
    bounds.validate()?;
    if n == 0 {
        return Err(Error::domain("design size must be >= 1"));
    }
    if n == 1 {
        let centre = (0..bounds.dim())
            .map(|k| bounds.lower[k] + 0.5 * bounds.width(k))
            .collect();
        return Design::from_points(bounds.clone(), vec![centre], seed);
    }
    let d = bounds.dim();
    let mut rng = rng::stream(seed, &[rng::tag::DESIGN]);
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    for _ in 0..candidates.max(1) {
        let mut unit = vec![vec![0.0; d]; n];
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..d {
            perm.shuffle(&mut rng);
            for (i, &stratum) in perm.iter().enumerate() {
                let u: f64 = rng.gen();
                unit[i][k] = (stratum as f64 + u) / n as f64;
            }
        }
        let score = min_pairwise(&unit);
        if best.as_ref().map_or(true, |(s, _)| score > *s) {
            best = Some((score, unit));
        }
    }
    let (_, unit) = best.expect("at least one candidate");
    let points = unit
        .into_iter()
        .map(|u| {
            u.iter()
                .enumerate()
                .map(|(k, v)| (bounds.lower[k] + v * bounds.width(k)).min(bounds.upper[k]))
                .collect()
        })
        .collect();
    Design::from_points(bounds.clone(), points, seed)
}

/// Approximate covering distance `sup_x min_k |x - x_k|` over the design's box.
///
/// Uses a regular grid with `resolution` points per axis while the grid has at
/// most [`GRID_CAP`] points, and [`MONTE_CARLO_SAMPLES`] uniform points
/// (seeded from the design) beyond that. Either way the result is a lower
/// bound on the true covering radius.
pub fn covering_distance(design: &Design, resolution: usize) -> Result<f64> {
    if resolution < 2 {
        return Err(Error::domain("covering distance needs resolution >= 2"));
    }
    let d = design.dim();
    let grid_size = (resolution as u64).checked_pow(d as u32).filter(|&n| n <= GRID_CAP);
    let bounds = &design.bounds;
    let nearest = |x: &[f64]| -> f64 {
        design
            .points
            .iter()
            .map(|p| sq_dist(x, p))
            .fold(f64::INFINITY, f64::min)
    };
    let worst = match grid_size {
        Some(total) => (0..total)
            .into_par_iter()
            .map(|mut idx| {
                let mut x = vec![0.0; d];
                for (k, xk) in x.iter_mut().enumerate() {
                    let step = (idx % resolution as u64) as f64;
                    idx /= resolution as u64;
                    *xk = bounds.lower[k] + step / (resolution - 1) as f64 * bounds.width(k);
                }
                nearest(&x)
            })
            .reduce(|| 0.0, f64::max),
        None => {
            let mut rng = rng::stream(design.seed, &[rng::tag::COVERAGE]);
            let samples: Vec<Vec<f64>> = (0..MONTE_CARLO_SAMPLES)
                .map(|_| {
                    (0..d)
                        .map(|k| bounds.lower[k] + rng.gen::<f64>() * bounds.width(k))
                        .collect()
                })
                .collect();
            samples.par_iter().map(|x| nearest(x)).reduce(|| 0.0, f64::max)
        }
    };
    Ok(worst.sqrt())
}
