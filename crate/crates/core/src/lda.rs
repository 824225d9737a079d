//! Latent Dirichlet Allocation over pseudo-text corpora via mean-field
//! variational EM, plus per-utterance topic-label assignment.
//!
//! The E-step iterates, per document,
//! `phi_{wk} ∝ beta_{k,w} * exp(psi(gamma_k))` and
//! `gamma_k = alpha + sum_w n_w * phi_{wk}` until the gamma fixed point;
//! the M-step sets `beta_{k,w} ∝ sum_d n^d_w * phi^d_{wk}` with additive
//! smoothing 1e-9 before normalization. The evidence lower bound is
//! evaluated every EM round and must be non-decreasing; fitting stops on a
//! relative ELBO change below `tol` or after `max_em_iters` rounds.
//!
//! One topic label per utterance is the argmax of the variational
//! posterior's Dirichlet parameters (equivalently of its mean), ties to
//! the lowest topic index.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use crate::corpus::files::{self, LDA_MAGIC};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::num::Real;
use crate::quantizer::PseudoText;

const BETA_SMOOTHING: f64 = 1e-9;
const E_STEP_MAX_ITERS: usize = 100;
const E_STEP_GAMMA_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LdaModel<T> {
    /// Topic count K.
    pub num_topics: usize,
    /// Symmetric Dirichlet prior on topic proportions.
    pub alpha: T,
    /// `K x |vocab|` topic-word rows; each row is a strictly positive
    /// probability distribution.
    pub beta: Matrix<T>,
    /// Sorted token vocabulary; column `i` of `beta` is `vocab[i]`.
    pub vocab: Vec<u32>,
    pub seed: u64,
}

/// Variational posterior for one document: Dirichlet parameters `gamma`
/// and, when retained, per-distinct-token topic responsibilities aligned
/// with [`DocPosterior::tokens`].
#[derive(Debug, Clone)]
pub struct DocPosterior<T> {
    pub gamma: Vec<T>,
    pub tokens: Vec<u32>,
    pub phi: Option<Matrix<T>>,
}

/// Per-utterance topic labels plus the compaction onto the labels actually
/// used (some of the K topics may never win an argmax).
#[derive(Debug, Clone, PartialEq)]
pub struct TopicAssignment {
    pub raw: BTreeMap<String, u32>,
    pub compact: BTreeMap<String, u32>,
    /// Number of distinct raw labels in use.
    pub k_prime: usize,
    /// Injective map raw -> compact over used labels.
    pub mapping: BTreeMap<u32, u32>,
}

impl<T: Real> LdaModel<T> {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn token_index(&self, token: u32) -> Result<usize> {
        self.vocab
            .binary_search(&token)
            .map_err(|_| Error::Vocabulary(token))
    }

    /// Bag-of-words view of a document: (vocab index, count) pairs in vocab
    /// order. Fails on tokens outside the vocabulary.
    fn bag(&self, doc: &PseudoText) -> Result<Vec<(usize, f64)>> {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &tok in &doc.tokens {
            *counts.entry(self.token_index(tok)?).or_default() += 1;
        }
        Ok(counts.into_iter().map(|(w, n)| (w, n as f64)).collect())
    }
}

fn e_step<T: Real>(
    model: &LdaModel<T>,
    bag: &[(usize, f64)],
    warm_gamma: Option<&[T]>,
) -> (Vec<T>, Matrix<T>) {
    let k = model.num_topics;
    let total: f64 = bag.iter().map(|&(_, n)| n).sum();
    // Coordinate ascent on (phi, gamma). A warm start continues from the
    // caller's previous state, which keeps the bound non-decreasing across
    // EM rounds even when the inner loop stops early.
    let mut gamma: Vec<T> = match warm_gamma {
        Some(g) => g.to_vec(),
        None => vec![model.alpha + T::from_f64_lossy(total / k as f64); k],
    };
    let mut phi = Matrix::zeros(bag.len(), k);
    if bag.is_empty() {
        // No evidence: gamma stays at the prior.
        return (vec![model.alpha; k], phi);
    }
    for _ in 0..E_STEP_MAX_ITERS {
        // phi update given gamma, in log space for stability.
        let dig: Vec<T> = gamma.iter().map(|&g| g.digamma()).collect();
        for (row, &(w, _)) in bag.iter().enumerate() {
            let dst = phi.row_mut(row);
            let mut max = T::neg_infinity();
            for t in 0..k {
                let v = model.beta[(t, w)].ln() + dig[t];
                dst[t] = v;
                if v > max {
                    max = v;
                }
            }
            let mut norm = T::zero();
            for v in dst.iter_mut() {
                *v = (*v - max).exp();
                norm += *v;
            }
            for v in dst.iter_mut() {
                *v /= norm;
            }
        }
        // gamma update given phi.
        let mut delta = T::zero();
        for t in 0..k {
            let mut g = model.alpha;
            for (row, &(_, n)) in bag.iter().enumerate() {
                g += T::from_f64_lossy(n) * phi[(row, t)];
            }
            let d = (g - gamma[t]).abs();
            if d > delta {
                delta = d;
            }
            gamma[t] = g;
        }
        if delta < T::from_f64_lossy(E_STEP_GAMMA_TOL) {
            break;
        }
    }
    (gamma, phi)
}

/// Variational bound contribution of one document given the model and its
/// (gamma, phi) state.
fn doc_elbo<T: Real>(
    model: &LdaModel<T>,
    bag: &[(usize, f64)],
    gamma: &[T],
    phi: &Matrix<T>,
) -> f64 {
    let k = model.num_topics as f64;
    let alpha = model.alpha.to_f64_lossy();
    let gamma_sum: f64 = gamma.iter().map(|g| g.to_f64_lossy()).sum();
    let dig_sum = statrs::function::gamma::digamma(gamma_sum);
    let dig: Vec<f64> = gamma
        .iter()
        .map(|g| statrs::function::gamma::digamma(g.to_f64_lossy()))
        .collect();

    // E[log p(theta | alpha)] - E[log q(theta | gamma)]
    let mut score =
        statrs::function::gamma::ln_gamma(k * alpha) - k * statrs::function::gamma::ln_gamma(alpha);
    for t in 0..model.num_topics {
        let g = gamma[t].to_f64_lossy();
        score += (alpha - g) * (dig[t] - dig_sum);
        score += statrs::function::gamma::ln_gamma(g);
    }
    score -= statrs::function::gamma::ln_gamma(gamma_sum);

    // E[log p(s | theta)] + E[log p(w | s, beta)] - E[log q(s | phi)]
    for (row, &(w, n)) in bag.iter().enumerate() {
        for t in 0..model.num_topics {
            let p = phi[(row, t)].to_f64_lossy();
            if p > 0.0 {
                let log_beta = model.beta[(t, w)].to_f64_lossy().ln();
                score += n * p * (dig[t] - dig_sum + log_beta - p.ln());
            }
        }
    }
    score
}

/// Fit an LDA model by variational EM. `beta` is initialized from seeded
/// symmetric Dirichlet draws; the vocabulary is the sorted set of tokens
/// observed in the corpus.
pub fn lda_fit<T: Real>(
    corpus: &[PseudoText],
    num_topics: usize,
    alpha: T,
    seed: u64,
    max_em_iters: usize,
    tol: f64,
) -> Result<(LdaModel<T>, Vec<f64>)> {
    if num_topics == 0 {
        return Err(Error::InvalidParameter("topic count must be >= 1".into()));
    }
    if corpus.is_empty() {
        return Err(Error::Input("empty corpus".into()));
    }
    if alpha.is_nan() || alpha <= T::zero() {
        return Err(Error::InvalidParameter("alpha must be > 0".into()));
    }
    if max_em_iters == 0 {
        return Err(Error::InvalidParameter("max_em_iters must be >= 1".into()));
    }

    let mut vocab: Vec<u32> = corpus
        .iter()
        .flat_map(|d| d.tokens.iter().copied())
        .collect();
    vocab.sort_unstable();
    vocab.dedup();
    if vocab.is_empty() {
        return Err(Error::Input("corpus has no tokens".into()));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut beta = Matrix::zeros(num_topics, vocab.len());
    for t in 0..num_topics {
        // Dirichlet(1) row: normalized unit-exponential draws.
        let row = beta.row_mut(t);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            let u: f64 = rng.random::<f64>();
            *v = T::from_f64_lossy(-(1.0 - u).ln());
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }

    let mut model = LdaModel {
        num_topics,
        alpha,
        beta,
        vocab,
        seed,
    };
    let bags: Vec<Vec<(usize, f64)>> =
        corpus.iter().map(|d| model.bag(d)).collect::<Result<_>>()?;

    let mut elbo_trace: Vec<f64> = Vec::with_capacity(max_em_iters);
    let mut warm: Vec<Option<Vec<T>>> = vec![None; bags.len()];
    for _em in 0..max_em_iters {
        // E-step over all documents; suff stats accumulated in corpus order.
        let mut stats = Matrix::<T>::zeros(num_topics, model.vocab_size());
        let mut posteriors: Vec<(Vec<T>, Matrix<T>)> = Vec::with_capacity(bags.len());
        for (d, bag) in bags.iter().enumerate() {
            let (gamma, phi) = e_step(&model, bag, warm[d].as_deref());
            warm[d] = Some(gamma.clone());
            for (row, &(w, n)) in bag.iter().enumerate() {
                for t in 0..num_topics {
                    stats[(t, w)] += T::from_f64_lossy(n) * phi[(row, t)];
                }
            }
            posteriors.push((gamma, phi));
        }

        // M-step: smoothed, normalized rows.
        for t in 0..num_topics {
            let row = stats.row_mut(t);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v += T::from_f64_lossy(BETA_SMOOTHING);
                sum += *v;
            }
            for (dst, &v) in model.beta.row_mut(t).iter_mut().zip(row.iter()) {
                *dst = v / sum;
            }
        }

        let elbo: f64 = bags
            .iter()
            .zip(&posteriors)
            .map(|(bag, (gamma, phi))| doc_elbo(&model, bag, gamma, phi))
            .sum();
        let converged = elbo_trace
            .last()
            .is_some_and(|&prev| (elbo - prev).abs() <= tol * prev.abs().max(1e-12));
        elbo_trace.push(elbo);
        if converged {
            break;
        }
    }

    Ok((model, elbo_trace))
}

/// Posterior inference for one document against a frozen model.
pub fn infer_doc<T: Real>(model: &LdaModel<T>, doc: &PseudoText) -> Result<DocPosterior<T>> {
    let bag = model.bag(doc)?;
    let (gamma, phi) = e_step(model, &bag, None);
    let tokens: Vec<u32> = bag.iter().map(|&(w, _)| model.vocab[w]).collect();
    Ok(DocPosterior {
        gamma,
        tokens,
        phi: Some(phi),
    })
}

/// Topic label per the argmax of `q(theta)`'s Dirichlet parameters (the
/// argmax of the posterior mean is identical); ties break to the lowest k.
pub fn assign_topic<T: Real>(model: &LdaModel<T>, doc: &PseudoText) -> Result<u32> {
    let post = infer_doc(model, doc)?;
    let mut best = 0usize;
    for (t, &g) in post.gamma.iter().enumerate() {
        if g > post.gamma[best] {
            best = t;
        }
    }
    Ok(best as u32)
}

/// Remap the used raw labels, sorted ascending, onto `0..K'`.
pub fn compact_labels(
    assignments: &BTreeMap<String, u32>,
    num_topics: usize,
) -> Result<TopicAssignment> {
    for (utt, &l) in assignments {
        if l as usize >= num_topics {
            return Err(Error::Index(format!(
                "label {l} for {utt} is >= K={num_topics}"
            )));
        }
    }
    let mut used: Vec<u32> = assignments.values().copied().collect();
    used.sort_unstable();
    used.dedup();
    let mapping: BTreeMap<u32, u32> = used
        .iter()
        .enumerate()
        .map(|(i, &raw)| (raw, i as u32))
        .collect();
    let compact = assignments
        .iter()
        .map(|(utt, raw)| (utt.clone(), mapping[raw]))
        .collect();
    Ok(TopicAssignment {
        raw: assignments.clone(),
        compact,
        k_prime: used.len(),
        mapping,
    })
}

// ---------------------------------------------------------------------------
// Model file: magic, version, K u32, |C| u32, alpha f64, seed u64,
// beta K x |C| row-major f64, vocabulary as |C| u32 tokens.
// ---------------------------------------------------------------------------

pub fn write_lda_model(path: &Path, model: &LdaModel<f64>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    files::write_magic(&mut w, LDA_MAGIC)?;
    files::write_u32(&mut w, model.num_topics as u32)?;
    files::write_u32(&mut w, model.vocab_size() as u32)?;
    files::write_f64(&mut w, model.alpha)?;
    files::write_u64(&mut w, model.seed)?;
    files::write_f64_slice(&mut w, model.beta.data())?;
    for &tok in &model.vocab {
        files::write_u32(&mut w, tok)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_lda_model(path: &Path) -> Result<LdaModel<f64>> {
    let mut r = std::io::BufReader::new(
        std::fs::File::open(path)
            .map_err(|e| Error::Dependency(format!("LDA model {}: {e}", path.display())))?,
    );
    files::read_magic(&mut r, LDA_MAGIC)?;
    let num_topics = files::read_u32(&mut r)? as usize;
    let vocab_size = files::read_u32(&mut r)? as usize;
    let alpha = files::read_f64(&mut r)?;
    let seed = files::read_u64(&mut r)?;
    let beta = Matrix::from_vec(
        num_topics,
        vocab_size,
        files::read_f64_vec(&mut r, num_topics * vocab_size)?,
    )?;
    let mut vocab = Vec::with_capacity(vocab_size);
    for _ in 0..vocab_size {
        vocab.push(files::read_u32(&mut r)?);
    }
    let model = LdaModel {
        num_topics,
        alpha,
        beta,
        vocab,
        seed,
    };
    validate_model(&model)?;
    Ok(model)
}

fn validate_model(model: &LdaModel<f64>) -> Result<()> {
    if model.num_topics == 0 || model.alpha.is_nan() || model.alpha <= 0.0 {
        return Err(Error::Format("invalid LDA header".into()));
    }
    if !model.vocab.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Format("vocabulary not sorted/unique".into()));
    }
    for t in 0..model.num_topics {
        let row = model.beta.row(t);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || !row.iter().all(|&v| v > 0.0) {
            return Err(Error::Format(format!(
                "beta row {t} is not a positive distribution"
            )));
        }
    }
    Ok(())
}

/// Sidecar mapping file for compacted labels: `raw<TAB>compact` per line.
pub fn write_topic_mapping(path: &Path, assignment: &TopicAssignment) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (raw, compact) in &assignment.mapping {
        writeln!(w, "{raw}\t{compact}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_topic_mapping(path: &Path) -> Result<BTreeMap<u32, u32>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Dependency(format!("mapping file {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (raw, compact) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("mapping line {}: missing tab", lineno + 1)))?;
        let raw: u32 = raw
            .parse()
            .map_err(|_| Error::Format(format!("mapping line {}: bad raw id", lineno + 1)))?;
        let compact: u32 = compact
            .parse()
            .map_err(|_| Error::Format(format!("mapping line {}: bad compact id", lineno + 1)))?;
        if map.insert(raw, compact).is_some() {
            return Err(Error::Format(format!("duplicate raw label {raw}")));
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn text(utt: &str, tokens: Vec<u32>) -> PseudoText {
        PseudoText {
            utt_id: utt.into(),
            tokens,
        }
    }

    /// Seeded two-topic corpus with disjoint vocabulary halves; the planted
    /// oracle for recovery tests.
    fn planted_corpus(
        docs: usize,
        tokens_per_doc: usize,
        seed: u64,
    ) -> (Vec<PseudoText>, Vec<u32>) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut corpus = Vec::with_capacity(docs);
        let mut planted = Vec::with_capacity(docs);
        for d in 0..docs {
            let topic = (d % 2) as u32;
            let base = topic * 10;
            let tokens: Vec<u32> = (0..tokens_per_doc)
                .map(|_| base + rng.random_range(0..10))
                .collect();
            corpus.push(text(&format!("d{d:04}"), tokens));
            planted.push(topic);
        }
        (corpus, planted)
    }

    #[test]
    fn single_topic_closed_form() {
        let corpus = vec![text("a", vec![0, 1, 1, 2]), text("b", vec![2, 2])];
        let alpha = 0.7f64;
        let (model, _) = lda_fit(&corpus, 1, alpha, 3, 20, 1e-6).unwrap();
        // K=1: gamma = alpha + doc length, beta = smoothed corpus unigram.
        let post = infer_doc(&model, &corpus[0]).unwrap();
        assert!((post.gamma[0] - (alpha + 4.0)).abs() < 1e-9);
        let expected = [
            (1.0 + BETA_SMOOTHING) / (6.0 + 3.0 * BETA_SMOOTHING),
            (2.0 + BETA_SMOOTHING) / (6.0 + 3.0 * BETA_SMOOTHING),
            (3.0 + BETA_SMOOTHING) / (6.0 + 3.0 * BETA_SMOOTHING),
        ];
        for (w, &e) in expected.iter().enumerate() {
            assert!((model.beta[(0, w)] - e).abs() < 1e-12, "beta[{w}]");
        }
        assert_eq!(assign_topic(&model, &corpus[1]).unwrap(), 0);
    }

    #[test]
    fn planted_topics_recovered() {
        let (corpus, planted) = planted_corpus(200, 50, 17);
        let (model, _) = lda_fit(&corpus, 2, 0.5, 11, 100, 1e-5).unwrap();
        // beta rows concentrate on one vocabulary half, up to permutation.
        let mass_low: Vec<f64> = (0..2)
            .map(|t| (0..10).map(|w| model.beta[(t, w)]).sum())
            .collect();
        let low_topic = if mass_low[0] > mass_low[1] { 0 } else { 1 };
        assert!(
            mass_low[low_topic] >= 0.99,
            "low-half mass {}",
            mass_low[low_topic]
        );
        assert!(1.0 - mass_low[1 - low_topic] >= 0.99);

        // Labels match the planted assignment up to the same permutation.
        let mut hits = 0usize;
        for (doc, &truth) in corpus.iter().zip(&planted) {
            let label = assign_topic(&model, doc).unwrap();
            let mapped = if label == low_topic as u32 { 0 } else { 1 };
            if mapped == truth {
                hits += 1;
            }
        }
        let agreement = hits as f64 / corpus.len() as f64;
        let purity = agreement.max(1.0 - agreement);
        assert!(purity >= 0.95, "purity {purity}");
    }

    /// Straightforward reimplementation of the bound, summing token by
    /// token over the raw sequences; independent of the bag/e-step code.
    fn reference_elbo(model: &LdaModel<f64>, corpus: &[PseudoText]) -> f64 {
        use statrs::function::gamma::{digamma, ln_gamma};
        let k = model.num_topics;
        let mut total = 0.0;
        for doc in corpus {
            let post = infer_doc(model, doc).unwrap();
            let phi = post.phi.as_ref().unwrap();
            let gamma = &post.gamma;
            let gsum: f64 = gamma.iter().sum();
            let e_log_theta: Vec<f64> = gamma.iter().map(|&g| digamma(g) - digamma(gsum)).collect();

            let mut score = ln_gamma(k as f64 * model.alpha) - k as f64 * ln_gamma(model.alpha);
            for &e in &e_log_theta {
                score += (model.alpha - 1.0) * e;
            }
            // entropy of q(theta)
            score += -ln_gamma(gsum) + gamma.iter().map(|&g| ln_gamma(g)).sum::<f64>()
                - gamma
                    .iter()
                    .enumerate()
                    .map(|(t, &g)| (g - 1.0) * e_log_theta[t])
                    .sum::<f64>();
            // token terms, walking the sequence itself
            for &tok in &doc.tokens {
                let row = post.tokens.binary_search(&tok).unwrap();
                let w = model.vocab.binary_search(&tok).unwrap();
                for t in 0..k {
                    let p = phi[(row, t)];
                    if p > 0.0 {
                        score += p * (e_log_theta[t] + model.beta[(t, w)].ln() - p.ln());
                    }
                }
            }
            total += score;
        }
        total
    }

    #[test]
    fn elbo_non_decreasing_and_matches_reference() {
        let (corpus, _) = planted_corpus(40, 30, 23);
        let (model, trace) = lda_fit(&corpus, 3, 1.0 / 3.0, 2, 40, 1e-9).unwrap();
        assert!(trace.len() >= 2);
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "ELBO decreased: {} -> {}", w[0], w[1]);
        }
        // The reference recomputes the E-step against the final beta, i.e.
        // one extra ascent step: it can only raise the bound, and at
        // convergence barely moves it.
        let reference = reference_elbo(&model, &corpus);
        let last = *trace.last().unwrap();
        assert!(
            reference >= last - 1e-8,
            "reference {reference} below trace {last}"
        );
        assert!(
            reference - last <= 1e-3 * last.abs().max(1.0),
            "reference {reference} far above trace {last}"
        );
    }

    #[test]
    fn empty_document_keeps_prior() {
        let corpus = vec![text("a", vec![0, 1]), text("b", vec![1, 2])];
        let (model, _) = lda_fit(&corpus, 3, 0.4, 5, 10, 1e-6).unwrap();
        let post = infer_doc(&model, &text("empty", vec![])).unwrap();
        assert_eq!(post.gamma, vec![0.4; 3]);
        // Exactly symmetric posterior: tie resolves to topic 0.
        assert_eq!(assign_topic(&model, &text("empty", vec![])).unwrap(), 0);
    }

    #[test]
    fn gamma_mass_accounts_for_every_token() {
        let (corpus, _) = planted_corpus(10, 37, 31);
        let (model, _) = lda_fit(&corpus, 4, 0.25, 9, 30, 1e-6).unwrap();
        for doc in &corpus {
            let post = infer_doc(&model, doc).unwrap();
            let mass: f64 = post.gamma.iter().map(|g| g - model.alpha).sum();
            assert!((mass - doc.tokens.len() as f64).abs() < 1e-6, "mass {mass}");
            assert!(post.gamma.iter().all(|&g| g >= model.alpha - 1e-12));
        }
    }

    #[test]
    fn unknown_token_rejected() {
        let corpus = vec![text("a", vec![0, 1])];
        let (model, _) = lda_fit(&corpus, 2, 0.5, 1, 5, 1e-6).unwrap();
        assert!(matches!(
            infer_doc(&model, &text("x", vec![7])),
            Err(Error::Vocabulary(7))
        ));
    }

    #[test]
    fn compact_labels_examples() {
        let mut raw = BTreeMap::new();
        raw.insert("a".to_string(), 0u32);
        raw.insert("b".to_string(), 5u32);
        raw.insert("c".to_string(), 9u32);
        raw.insert("d".to_string(), 5u32);
        let ta = compact_labels(&raw, 10).unwrap();
        assert_eq!(ta.k_prime, 3);
        assert_eq!(ta.mapping, [(0, 0), (5, 1), (9, 2)].into_iter().collect());
        assert_eq!(ta.compact["d"], 1);

        // All labels used: identity mapping.
        let mut raw = BTreeMap::new();
        for (i, utt) in ["a", "b", "c"].iter().enumerate() {
            raw.insert(utt.to_string(), i as u32);
        }
        let ta = compact_labels(&raw, 3).unwrap();
        assert_eq!(ta.k_prime, 3);
        assert!(ta.mapping.iter().all(|(r, c)| r == c));
    }

    #[test]
    fn compact_labels_roundtrip_random() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..50 {
            let k = rng.random_range(1..20usize);
            let n = rng.random_range(1..60usize);
            let raw: BTreeMap<String, u32> = (0..n)
                .map(|i| (format!("u{i:03}"), rng.random_range(0..k) as u32))
                .collect();
            let ta = compact_labels(&raw, k).unwrap();
            let inverse: BTreeMap<u32, u32> = ta.mapping.iter().map(|(&r, &c)| (c, r)).collect();
            for (utt, &compact) in &ta.compact {
                assert_eq!(inverse[&compact], ta.raw[utt]);
            }
            assert_eq!(
                ta.compact
                    .values()
                    .copied()
                    .collect::<std::collections::BTreeSet<_>>(),
                (0..ta.k_prime as u32).collect()
            );
        }
    }

    #[test]
    fn beta_rows_are_distributions() {
        let (corpus, _) = planted_corpus(30, 20, 41);
        let (model, _) = lda_fit(&corpus, 5, 0.2, 6, 25, 1e-6).unwrap();
        for t in 0..model.num_topics {
            let row = model.beta.row(t);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn label_invariant_to_gamma_rescaling() {
        // The label is the argmax of q(theta)'s parameters; any positive
        // rescaling (e.g. normalizing to the posterior mean) keeps it.
        let (corpus, _) = planted_corpus(16, 20, 61);
        let (model, _) = lda_fit::<f64>(&corpus, 3, 0.4, 8, 20, 1e-6).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(62);
        for doc in &corpus {
            let post = infer_doc(&model, doc).unwrap();
            let label = assign_topic(&model, doc).unwrap();
            let scale = rng.random_range(1e-6..1e6);
            let scaled: Vec<f64> = post.gamma.iter().map(|g| g * scale).collect();
            let argmax = scaled
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .unwrap()
                .0;
            assert_eq!(argmax as u32, label);
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let (corpus, _) = planted_corpus(25, 15, 50);
        let a = lda_fit(&corpus, 3, 0.5, 77, 30, 1e-6).unwrap().0;
        let b = lda_fit(&corpus, 3, 0.5, 77, 30, 1e-6).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn f32_instantiation_recovers_planted_topics() {
        let mut rng = ChaCha20Rng::seed_from_u64(71);
        let mut corpus = Vec::new();
        for d in 0..60 {
            let topic = (d % 2) as u32;
            corpus.push(text(
                &format!("d{d:03}"),
                (0..30)
                    .map(|_| topic * 8 + rng.random_range(0..8))
                    .collect(),
            ));
        }
        let (model, trace) = lda_fit::<f32>(&corpus, 2, 0.5f32, 4, 60, 1e-4).unwrap();
        assert!(trace.len() >= 2);
        let mass_low: Vec<f32> = (0..2)
            .map(|t| (0..8).map(|w| model.beta[(t, w)]).sum())
            .collect();
        let split = mass_low[0].max(mass_low[1]);
        assert!(
            split > 0.95,
            "f32 fit failed to separate halves: {mass_low:?}"
        );
        for t in 0..2 {
            let sum: f32 = model.beta.row(t).iter().sum();
            assert!((sum - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn model_file_roundtrip() {
        let (corpus, _) = planted_corpus(12, 18, 3);
        let (model, _) = lda_fit::<f64>(&corpus, 2, 0.5, 4, 10, 1e-6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.lda");
        write_lda_model(&p, &model).unwrap();
        assert_eq!(read_lda_model(&p).unwrap(), model);
    }

    #[test]
    fn mapping_file_roundtrip() {
        let mut raw = BTreeMap::new();
        raw.insert("a".to_string(), 2u32);
        raw.insert("b".to_string(), 6u32);
        let ta = compact_labels(&raw, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("map.tsv");
        write_topic_mapping(&p, &ta).unwrap();
        assert_eq!(read_topic_mapping(&p).unwrap(), ta.mapping);
    }
}
