//! K-means unit discovery over feature frames, frame-level pseudo-labels,
//! and adjacent deduplication into pseudo-texts.
//!
//! Fits are deterministic for a given seed: k-means++ initialization from a
//! seeded generator, full-batch Lloyd with fixed accumulation order, and a
//! canonical lexicographic centroid ordering after the fit so unit ids are
//! stable across runs.

use std::io::{Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use crate::corpus::files::{self, CODEBOOK_MAGIC};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::matrix::Matrix;
use crate::num::Real;

const LLOYD_MAX_ITERS: usize = 100;
const LLOYD_REL_TOL: f64 = 1e-6;

/// Which feature space a codebook was trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSpace {
    Mfcc,
    /// Hidden states of the given (1-based) encoder layer.
    EncoderLayer(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T> {
    /// `units x dims` centroid matrix, rows sorted lexicographically.
    pub centroids: Matrix<T>,
    pub space: FeatureSpace,
    pub seed: u64,
}

impl<T: Real> Codebook<T> {
    pub fn units(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dims(&self) -> usize {
        self.centroids.cols()
    }
}

/// Frame-aligned cluster ids for one utterance; every label is less than
/// the codebook's unit count.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSeq {
    pub utt_id: String,
    pub labels: Vec<u32>,
}

/// Pseudo-label sequence with runs of equal adjacent labels collapsed;
/// treated as a document downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoText {
    pub utt_id: String,
    pub tokens: Vec<u32>,
}

fn squared_distance<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

fn count_distinct<T: Real>(frames: &Matrix<T>) -> usize {
    let mut rows: Vec<&[T]> = frames.iter_rows().collect();
    rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
    rows.dedup();
    rows.len()
}

/// Fit a `units`-entry codebook with k-means++ init and Lloyd iterations
/// until the relative inertia change drops below 1e-6 (at most 100 rounds).
/// Empty clusters are reseeded to the point farthest from its assigned
/// centroid.
pub fn kmeans_fit<T: Real>(
    frames: &Matrix<T>,
    units: usize,
    space: FeatureSpace,
    seed: u64,
) -> Result<Codebook<T>> {
    kmeans_fit_with_trace(frames, units, space, seed).map(|(cb, _)| cb)
}

/// [`kmeans_fit`] plus the per-iteration inertia trace (one entry per
/// Lloyd assignment step).
pub fn kmeans_fit_with_trace<T: Real>(
    frames: &Matrix<T>,
    units: usize,
    space: FeatureSpace,
    seed: u64,
) -> Result<(Codebook<T>, Vec<f64>)> {
    if units == 0 {
        return Err(Error::InvalidParameter("unit count must be >= 1".into()));
    }
    if frames.rows() == 0 || frames.cols() == 0 {
        return Err(Error::Infeasible("no frames to cluster".into()));
    }
    if !frames.is_finite() {
        return Err(Error::Input("frames contain non-finite values".into()));
    }
    if count_distinct(frames) < units {
        return Err(Error::Infeasible(format!(
            "{} distinct frames cannot support {units} clusters",
            count_distinct(frames)
        )));
    }

    let n = frames.rows();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    // k-means++ seeding: next center drawn proportionally to squared
    // distance from the nearest chosen center.
    let mut centroids = Matrix::zeros(units, frames.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(frames.row(first));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(frames.row(i), centroids.row(0)).to_f64_lossy())
        .collect();
    for c in 1..units {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                r -= w;
                if r <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All mass collapsed onto chosen centers; fall back to any frame
            // not yet selected (distinctness was checked above).
            (0..n)
                .find(|&i| (0..c).all(|j| frames.row(i) != centroids.row(j)))
                .expect("distinct frame available")
        };
        centroids.row_mut(c).copy_from_slice(frames.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            let nd = squared_distance(frames.row(i), centroids.row(c)).to_f64_lossy();
            if nd < *d {
                *d = nd;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    let mut trace: Vec<f64> = Vec::new();
    let mut prev_inertia = f64::INFINITY;
    for _iter in 0..LLOYD_MAX_ITERS {
        // Assignment step.
        let mut inertia = 0.0f64;
        for (i, slot) in assignment.iter_mut().enumerate() {
            let (best, dist) = nearest_centroid(&centroids, frames.row(i));
            *slot = best;
            inertia += dist.to_f64_lossy();
        }
        debug_assert!(
            inertia <= prev_inertia * (1.0 + 1e-12) + 1e-12,
            "Lloyd inertia increased: {prev_inertia} -> {inertia}"
        );
        trace.push(inertia);
        if inertia == 0.0
            || (prev_inertia.is_finite()
                && (prev_inertia - inertia).abs() <= LLOYD_REL_TOL * prev_inertia)
        {
            break;
        }
        prev_inertia = inertia;

        // Update step: means accumulated in f64, fixed frame order.
        let mut sums = vec![vec![0.0f64; frames.cols()]; units];
        let mut counts = vec![0usize; units];
        for (i, &a) in assignment.iter().enumerate() {
            counts[a] += 1;
            for (s, &v) in sums[a].iter_mut().zip(frames.row(i)) {
                *s += v.to_f64_lossy();
            }
        }
        let mut reseeded: Vec<usize> = Vec::new();
        for c in 0..units {
            if counts[c] == 0 {
                // Reseed to the point farthest from its assigned centroid.
                let far = (0..n)
                    .filter(|i| !reseeded.contains(i))
                    .max_by(|&a, &b| {
                        let da = squared_distance(frames.row(a), centroids.row(assignment[a]));
                        let db = squared_distance(frames.row(b), centroids.row(assignment[b]));
                        da.partial_cmp(&db).unwrap().then(b.cmp(&a))
                    })
                    .expect("non-empty frame set");
                reseeded.push(far);
                centroids.row_mut(c).copy_from_slice(frames.row(far));
            } else {
                for (d, s) in centroids.row_mut(c).iter_mut().zip(&sums[c]) {
                    *d = T::from_f64_lossy(s / counts[c] as f64);
                }
            }
        }
    }

    // Canonical ordering so unit ids are reproducible.
    let mut rows: Vec<Vec<T>> = centroids.iter_rows().map(<[T]>::to_vec).collect();
    rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok((
        Codebook {
            centroids: Matrix::from_rows(&rows)?,
            space,
            seed,
        },
        trace,
    ))
}

fn nearest_centroid<T: Real>(centroids: &Matrix<T>, frame: &[T]) -> (usize, T) {
    let mut best = 0usize;
    let mut best_d = squared_distance(centroids.row(0), frame);
    for c in 1..centroids.rows() {
        let d = squared_distance(centroids.row(c), frame);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    (best, best_d)
}

/// Map each frame to its nearest centroid by squared Euclidean distance;
/// ties resolve to the lowest centroid index.
pub fn assign<T: Real>(cb: &Codebook<T>, feats: &FeatureMatrix<T>) -> Result<PseudoLabelSeq> {
    if feats.dims() != cb.dims() {
        return Err(Error::Shape(format!(
            "feature dim {} does not match codebook dim {}",
            feats.dims(),
            cb.dims()
        )));
    }
    let labels = feats
        .mat
        .iter_rows()
        .map(|row| nearest_centroid(&cb.centroids, row).0 as u32)
        .collect();
    Ok(PseudoLabelSeq {
        utt_id: feats.utt_id.clone(),
        labels,
    })
}

/// Collapse runs of equal adjacent labels, preserving order.
pub fn dedup(seq: &PseudoLabelSeq) -> PseudoText {
    let mut tokens: Vec<u32> = Vec::with_capacity(seq.labels.len());
    for &l in &seq.labels {
        if tokens.last() != Some(&l) {
            tokens.push(l);
        }
    }
    PseudoText {
        utt_id: seq.utt_id.clone(),
        tokens,
    }
}

/// Total squared distance of every frame to its nearest centroid.
pub fn inertia<T: Real>(cb: &Codebook<T>, frames: &Matrix<T>) -> f64 {
    frames
        .iter_rows()
        .map(|row| nearest_centroid(&cb.centroids, row).1.to_f64_lossy())
        .sum()
}

// ---------------------------------------------------------------------------
// Codebook file: magic, version, units u32, dims u32, space tag (u8 + u32
// layer), seed u64, then units x dims row-major f32.
// ---------------------------------------------------------------------------

pub fn write_codebook(path: &Path, cb: &Codebook<f32>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    files::write_magic(&mut w, CODEBOOK_MAGIC)?;
    files::write_u32(&mut w, cb.units() as u32)?;
    files::write_u32(&mut w, cb.dims() as u32)?;
    match cb.space {
        FeatureSpace::Mfcc => {
            w.write_all(&[0u8])?;
            files::write_u32(&mut w, 0)?;
        }
        FeatureSpace::EncoderLayer(l) => {
            w.write_all(&[1u8])?;
            files::write_u32(&mut w, l)?;
        }
    }
    files::write_u64(&mut w, cb.seed)?;
    files::write_f32_slice(&mut w, cb.centroids.data())?;
    w.flush()?;
    Ok(())
}

pub fn read_codebook(path: &Path) -> Result<Codebook<f32>> {
    let mut r = std::io::BufReader::new(
        std::fs::File::open(path)
            .map_err(|e| Error::Dependency(format!("codebook {}: {e}", path.display())))?,
    );
    files::read_magic(&mut r, CODEBOOK_MAGIC)?;
    let units = files::read_u32(&mut r)? as usize;
    let dims = files::read_u32(&mut r)? as usize;
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)
        .map_err(|_| Error::Format("truncated space tag".into()))?;
    let layer = files::read_u32(&mut r)?;
    let space = match tag[0] {
        0 => FeatureSpace::Mfcc,
        1 => FeatureSpace::EncoderLayer(layer),
        t => return Err(Error::Format(format!("unknown feature space tag {t}"))),
    };
    let seed = files::read_u64(&mut r)?;
    let data = files::read_f32_vec(&mut r, units * dims)?;
    if !data.iter().all(|v| v.is_finite()) {
        return Err(Error::Format(
            "codebook contains non-finite centroids".into(),
        ));
    }
    Ok(Codebook {
        centroids: Matrix::from_vec(units, dims, data)?,
        space,
        seed,
    })
}
