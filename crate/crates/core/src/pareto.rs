//! Pareto dominance and exact hypervolume for two or three objectives.
//!
//! Everything here uses the maximization convention: a point dominates
//! another when it is at least as large in every coordinate and differs in
//! at least one.

use std::cmp::Ordering;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParetoError {
    #[error("objective dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("exact hypervolume supports 2 or 3 objectives, got {0}")]
    UnsupportedDimension(usize),
}

pub fn dominates(a: &[f64], b: &[f64]) -> Result<bool, ParetoError> {
    if a.len() != b.len() {
        return Err(ParetoError::DimensionMismatch(a.len(), b.len()));
    }
    Ok(dominates_unchecked(a, b))
}

pub(crate) fn dominates_unchecked(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x >= y) && a.iter().zip(b).any(|(x, y)| x > y)
}

/// Indices of the non-dominated points, in input order. Duplicates of a
/// frontier point are all kept.
pub fn pareto_front<P: AsRef<[f64]>>(points: &[P]) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| {
            !points
                .iter()
                .any(|q| dominates_unchecked(q.as_ref(), points[i].as_ref()))
        })
        .collect()
}

fn desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

fn hv2(points: &[[f64; 2]], reference: [f64; 2]) -> f64 {
    let mut pts: Vec<[f64; 2]> = points
        .iter()
        .filter(|p| p[0] > reference[0] && p[1] > reference[1])
        .copied()
        .collect();
    pts.sort_by(|a, b| desc(a[0], b[0]));
    let mut y_max = reference[1];
    let mut hv = 0.0;
    for p in pts {
        if p[1] > y_max {
            hv += (p[0] - reference[0]) * (p[1] - y_max);
            y_max = p[1];
        }
    }
    hv
}

fn hv3(points: &[[f64; 3]], reference: [f64; 3]) -> f64 {
    let mut pts: Vec<[f64; 3]> = points
        .iter()
        .filter(|p| p.iter().zip(&reference).all(|(x, r)| x > r))
        .copied()
        .collect();
    pts.sort_by(|a, b| desc(a[2], b[2]));
    let mut hv = 0.0;
    let mut slice: Vec<[f64; 2]> = Vec::with_capacity(pts.len());
    for (i, p) in pts.iter().enumerate() {
        slice.push([p[0], p[1]]);
        let next_z = pts.get(i + 1).map_or(reference[2], |q| q[2]);
        let depth = p[2] - next_z;
        if depth > 0.0 {
            hv += hv2(&slice, [reference[0], reference[1]]) * depth;
        }
    }
    hv
}

fn hv1(values: &[f64], reference: f64) -> f64 {
    values.iter().map(|v| v - reference).fold(0.0, f64::max)
}

/// Lebesgue measure of the union of boxes `[reference, p]`.
///
/// Coordinates below the reference contribute nothing.
pub fn hypervolume<P: AsRef<[f64]>>(points: &[P], reference: &[f64]) -> Result<f64, ParetoError> {
    let k = reference.len();
    if let Some(p) = points.iter().find(|p| p.as_ref().len() != k) {
        return Err(ParetoError::DimensionMismatch(p.as_ref().len(), k));
    }
    // Dominated points and repeats are dropped first, so adding a covered
    // point leaves the sweep, and its rounding, unchanged.
    let points: Vec<&[f64]> = points
        .iter()
        .enumerate()
        .filter(|&(i, p)| {
            let p = p.as_ref();
            !points.iter().enumerate().any(|(j, q)| {
                let q = q.as_ref();
                dominates_unchecked(q, p) || (j < i && q == p)
            })
        })
        .map(|(_, p)| p.as_ref())
        .collect();
    match k {
        2 => {
            let pts: Vec<[f64; 2]> = points
                .iter()
                .map(|p| [p.as_ref()[0], p.as_ref()[1]])
                .collect();
            Ok(hv2(&pts, [reference[0], reference[1]]))
        }
        3 => {
            let pts: Vec<[f64; 3]> = points
                .iter()
                .map(|p| [p.as_ref()[0], p.as_ref()[1], p.as_ref()[2]])
                .collect();
            Ok(hv3(&pts, [reference[0], reference[1], reference[2]]))
        }
        k => Err(ParetoError::UnsupportedDimension(k)),
    }
}

/// Partial derivatives of [`hypervolume`] with respect to every coordinate.
///
/// The derivative along axis `d` is the `(k-1)`-dimensional measure of the
/// face of `p`'s box that no other point covers. Exact ties are broken by
/// index so that coincident points share one face rather than each claiming
/// it.
pub fn hypervolume_gradient<P: AsRef<[f64]>>(
    points: &[P],
    reference: &[f64],
) -> Result<Vec<Vec<f64>>, ParetoError> {
    let k = reference.len();
    if !(2..=3).contains(&k) {
        return Err(ParetoError::UnsupportedDimension(k));
    }
    if let Some(p) = points.iter().find(|p| p.as_ref().len() != k) {
        return Err(ParetoError::DimensionMismatch(p.as_ref().len(), k));
    }
    let mut grad = vec![vec![0.0; k]; points.len()];
    for (i, p) in points.iter().enumerate() {
        let p = p.as_ref();
        if p.iter().zip(reference).any(|(x, r)| x <= r) {
            continue;
        }
        for d in 0..k {
            let blockers: Vec<Vec<f64>> = points
                .iter()
                .enumerate()
                .filter(|&(j, q)| {
                    j != i && (q.as_ref()[d] > p[d] || (q.as_ref()[d] == p[d] && j < i))
                })
                .map(|(_, q)| {
                    (0..k)
                        .filter(|&e| e != d)
                        .map(|e| q.as_ref()[e].min(p[e]))
                        .collect()
                })
                .collect();
            let own: Vec<f64> = (0..k).filter(|&e| e != d).map(|e| p[e]).collect();
            let sub_ref: Vec<f64> = (0..k).filter(|&e| e != d).map(|e| reference[e]).collect();
            let face = if k == 2 {
                let b: Vec<f64> = blockers.iter().map(|v| v[0]).collect();
                let mut with = b.clone();
                with.push(own[0]);
                hv1(&with, sub_ref[0]) - hv1(&b, sub_ref[0])
            } else {
                let b: Vec<[f64; 2]> = blockers.iter().map(|v| [v[0], v[1]]).collect();
                let mut with = b.clone();
                with.push([own[0], own[1]]);
                let r = [sub_ref[0], sub_ref[1]];
                hv2(&with, r) - hv2(&b, r)
            };
            grad[i][d] = face.max(0.0);
        }
    }
    Ok(grad)
}

/// Non-dominated points of a set, and its hypervolume against a fixed
/// reference.
#[derive(Debug, Clone)]
pub struct ParetoArchive<T> {
    reference: Vec<f64>,
    members: Vec<(Vec<f64>, T)>,
    hypervolume: f64,
}

impl<T: Clone> ParetoArchive<T> {
    pub fn new(reference: Vec<f64>) -> Self {
        Self {
            reference,
            members: Vec::new(),
            hypervolume: 0.0,
        }
    }

    pub fn reference(&self) -> &[f64] {
        &self.reference
    }

    pub fn members(&self) -> &[(Vec<f64>, T)] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn hypervolume(&self) -> f64 {
        self.hypervolume
    }

    /// Inserts a point unless it is dominated; evicts members it dominates.
    /// Returns whether the point was added.
    pub fn insert(&mut self, objectives: Vec<f64>, item: T) -> Result<bool, ParetoError> {
        if objectives.len() != self.reference.len() {
            return Err(ParetoError::DimensionMismatch(
                objectives.len(),
                self.reference.len(),
            ));
        }
        if self
            .members
            .iter()
            .any(|(m, _)| dominates_unchecked(m, &objectives))
        {
            return Ok(false);
        }
        self.members
            .retain(|(m, _)| !dominates_unchecked(&objectives, m));
        self.members.push((objectives, item));
        let pts: Vec<&[f64]> = self.members.iter().map(|(m, _)| m.as_slice()).collect();
        self.hypervolume = hypervolume(&pts, &self.reference)?;
        Ok(true)
    }
}
