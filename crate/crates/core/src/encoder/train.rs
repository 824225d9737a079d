//! Seeded training loop: span masking, adaptive-moment updates, and the
//! per-step loss curve.

use std::io::Write as _;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

use super::{grad, Batch, EncoderParams, LossBreakdown};

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Skip updates to the topic head; with `rho = 0` this must reproduce a
    /// normal run step for step.
    pub freeze_topic_head: bool,
    /// Total loss above this (or any non-finite loss) aborts the run.
    pub divergence_threshold: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 0,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            freeze_topic_head: false,
            divergence_threshold: 1e4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainItem {
    pub utt_id: String,
    pub feats: Matrix<f64>,
    pub frame_labels: Vec<u32>,
    pub topic: u32,
}

/// Span masking: every frame starts a span with probability `start_prob`;
/// spans run `span` frames, clip at the sequence end, and union. Returns
/// sorted unique indices.
pub fn sample_mask_spans(
    rng: &mut ChaCha20Rng,
    len: usize,
    start_prob: f64,
    span: usize,
) -> Vec<usize> {
    let mut masked = vec![false; len];
    for t in 0..len {
        if rng.random::<f64>() < start_prob {
            for m in masked.iter_mut().skip(t).take(span) {
                *m = true;
            }
        }
    }
    masked
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}

/// Run `opts.steps` single-utterance steps over `data` with seeded epoch
/// shuffling and per-step mask sampling; returns the loss curve. With
/// `steps = 0` the parameters are untouched.
pub fn train(
    params: &mut EncoderParams,
    data: &[TrainItem],
    opts: &TrainOptions,
) -> Result<Vec<LossBreakdown>> {
    if data.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    if opts.learning_rate.is_nan() || opts.learning_rate <= 0.0 {
        return Err(Error::InvalidParameter("learning_rate must be > 0".into()));
    }
    for item in data {
        if item.feats.cols() != params.cfg.input_dim {
            return Err(Error::Shape(format!(
                "utterance {}: feature dim {} does not match encoder input dim {}",
                item.utt_id,
                item.feats.cols(),
                params.cfg.input_dim
            )));
        }
    }

    let names: Vec<String> = params
        .tensor_names()
        .into_iter()
        .filter(|n| EncoderParams::is_trainable(n))
        .collect();
    let mut m = params.zeros_like();
    let mut v = params.zeros_like();
    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut curve = Vec::with_capacity(opts.steps);

    for step in 0..opts.steps {
        if order.is_empty() {
            order = (0..data.len()).collect();
            order.shuffle(&mut rng);
        }
        let item = &data[order.pop().expect("non-empty order")];
        let mask = sample_mask_spans(
            &mut rng,
            item.feats.rows(),
            params.cfg.mask_start_prob,
            params.cfg.mask_span,
        );
        let batch = Batch {
            feats: &item.feats,
            targets: &item.frame_labels,
            mask: &mask,
            topic: item.topic,
        };
        let (breakdown, grads) = match grad(params, &batch) {
            Ok(out) => out,
            Err(Error::Numeric(msg)) => {
                return Err(Error::Training(format!(
                    "step {step} ({}): {msg}",
                    item.utt_id
                )))
            }
            Err(e) => return Err(e),
        };
        if breakdown.total > opts.divergence_threshold {
            return Err(Error::Training(format!(
                "step {step} ({}): total loss {} above divergence threshold {}",
                item.utt_id, breakdown.total, opts.divergence_threshold
            )));
        }

        let t = (step + 1) as i32;
        let bias1 = 1.0 - opts.beta1.powi(t);
        let bias2 = 1.0 - opts.beta2.powi(t);
        for name in &names {
            if opts.freeze_topic_head && EncoderParams::is_topic_head_tensor(name) {
                continue;
            }
            let g = grads.tensor(name).expect("gradient tensor");
            let mt = m.tensor_mut(name).expect("moment tensor");
            for (mi, &gi) in mt.data_mut().iter_mut().zip(g.data()) {
                *mi = opts.beta1 * *mi + (1.0 - opts.beta1) * gi;
            }
            let vt = v.tensor_mut(name).expect("moment tensor");
            for (vi, &gi) in vt.data_mut().iter_mut().zip(g.data()) {
                *vi = opts.beta2 * *vi + (1.0 - opts.beta2) * gi * gi;
            }
            let mt = m.tensor(name).unwrap();
            let vt = v.tensor(name).unwrap();
            let p = params.tensor_mut(name).expect("parameter tensor");
            for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(mt.data()).zip(vt.data()) {
                let m_hat = mi / bias1;
                let v_hat = vi / bias2;
                *pi -= opts.learning_rate * m_hat / (v_hat.sqrt() + opts.epsilon);
            }
        }
        curve.push(breakdown);
    }
    Ok(curve)
}

/// Loss curve as CSV `step,l_mp,l_tc,total`.
pub fn write_loss_curve(path: &Path, curve: &[LossBreakdown]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,l_mp,l_tc,total")?;
    for (step, b) in curve.iter().enumerate() {
        writeln!(w, "{step},{},{},{}", b.l_mp, b.l_tc, b.total)?;
    }
    w.flush()?;
    Ok(())
}
