//! Toy-scale expert construction: Gaussian latent distributions over a fixed
//! softmax decoder, penalty-form posterior fitting, REINFORCE-with-baseline
//! expert training, and the label / reward functions.
//!
//! Contexts are discrete indices (the encoder is an index lookup), outputs are
//! single symbols, and the latent space is a low-dimensional Gaussian. This
//! keeps every gradient analytic and finite-difference checkable.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MoeError, Result};
use crate::gen::sample_index;

/// Variance floor applied after every update.
pub const SIGMA_MIN: f64 = 1e-3;

/// Coefficients for the weighted sentiment score, ordered
/// (pos, neg, joy, optimism, sadness, anger).
pub const SENTIMENT_COEFFICIENTS: [f64; 6] = [0.5, -0.5, 0.5, 1.0, -1.0, -0.5];

/// Default question-word set; the rule is configurable, the set is ours.
pub const DEFAULT_QUESTION_WORDS: [&str; 6] = ["what", "why", "how", "who", "when", "where"];

/// Linear-softmax decoder over a finite symbol set: Psi(y|z') = softmax(W z').
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyDecoder {
    /// `weight` is outputs x latent-dim.
    pub weight: Array2<f64>,
}

impl ToyDecoder {
    pub fn new(weight: Array2<f64>) -> Self {
        Self { weight }
    }

    pub fn n_outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn probs(&self, z: &Array1<f64>) -> Array1<f64> {
        let logits = self.weight.dot(z);
        let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut p = logits.mapv(|v| (v - max).exp());
        let sum = p.sum();
        p.mapv_inplace(|v| v / sum);
        p
    }

    /// Gradient of -log Psi(y|z') with respect to z'.
    pub fn neg_log_prob_grad(&self, z: &Array1<f64>, y: usize) -> Array1<f64> {
        let p = self.probs(z);
        let mut g = Array1::zeros(self.latent_dim());
        for k in 0..self.n_outputs() {
            let coef = p[k] - if k == y { 1.0 } else { 0.0 };
            for d in 0..self.latent_dim() {
                g[d] += coef * self.weight[[k, d]];
            }
        }
        g
    }
}

/// Per-context diagonal Gaussian over the latent space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianLatent {
    /// `mean[[c, d]]`, one row per discrete context.
    pub mean: Array2<f64>,
    /// `std[[c, d]]`, elementwise >= `sigma_min`.
    pub std: Array2<f64>,
    pub sigma_min: f64,
}

impl GaussianLatent {
    pub fn new(mean: Array2<f64>, std: Array2<f64>, sigma_min: f64) -> Result<Self> {
        if mean.dim() != std.dim() {
            return Err(MoeError::ShapeMismatch {
                context: "GaussianLatent::new",
                expected: format!("{:?}", mean.dim()),
                got: format!("{:?}", std.dim()),
            });
        }
        if sigma_min <= 0.0 {
            return Err(MoeError::InvalidValue {
                name: "sigma_min",
                value: sigma_min,
                requirement: "sigma_min > 0",
            });
        }
        if std.iter().any(|&s| s < sigma_min) {
            return Err(MoeError::InvalidValue {
                name: "std",
                value: std.iter().cloned().fold(f64::INFINITY, f64::min),
                requirement: "std >= sigma_min elementwise",
            });
        }
        Ok(Self { mean, std, sigma_min })
    }

    pub fn standard(n_contexts: usize, dim: usize) -> Self {
        Self {
            mean: Array2::zeros((n_contexts, dim)),
            std: Array2::from_elem((n_contexts, dim), 1.0),
            sigma_min: SIGMA_MIN,
        }
    }

    pub fn n_contexts(&self) -> usize {
        self.mean.nrows()
    }

    pub fn dim(&self) -> usize {
        self.mean.ncols()
    }

    pub fn sample(&self, context: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
        let mut z = Array1::zeros(self.dim());
        for d in 0..self.dim() {
            let eps: f64 = rand_distr::StandardNormal.sample_with(rng);
            z[d] = self.mean[[context, d]] + self.std[[context, d]] * eps;
        }
        z
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Doc {
            contexts: usize,
            d: usize,
            mean: Vec<Vec<f64>>,
            std: Vec<Vec<f64>>,
        }
        let doc = Doc {
            contexts: self.n_contexts(),
            d: self.dim(),
            mean: self.mean.outer_iter().map(|r| r.to_vec()).collect(),
            std: self.std.outer_iter().map(|r| r.to_vec()).collect(),
        };
        serde_json::to_string_pretty(&doc).expect("latent serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            contexts: usize,
            d: usize,
            mean: Vec<Vec<f64>>,
            std: Vec<Vec<f64>>,
        }
        let doc: Doc = serde_json::from_str(text)?;
        let mut mean = Array2::zeros((doc.contexts, doc.d));
        let mut std = Array2::zeros((doc.contexts, doc.d));
        for c in 0..doc.contexts {
            for d in 0..doc.d {
                mean[[c, d]] = doc.mean[c][d];
                std[[c, d]] = doc.std[c][d];
            }
        }
        Self::new(mean, std, SIGMA_MIN)
    }
}

trait SampleWith {
    fn sample_with(&self, rng: &mut ChaCha8Rng) -> f64;
}

impl SampleWith for rand_distr::StandardNormal {
    fn sample_with(&self, rng: &mut ChaCha8Rng) -> f64 {
        rand_distr::Distribution::<f64>::sample(self, rng)
    }
}

/// Per-(context, target) diagonal Gaussian posterior.
#[derive(Debug, Clone)]
pub struct PosteriorModel {
    pairs: Vec<(usize, usize)>,
    lookup: std::collections::BTreeMap<(usize, usize), usize>,
    pub mean: Array2<f64>,
    pub std: Array2<f64>,
    pub sigma_min: f64,
}

impl PosteriorModel {
    /// One standard-normal posterior per distinct (context, target) pair in
    /// the corpus.
    pub fn init(corpus: &[(usize, usize)], dim: usize) -> Self {
        let mut lookup = std::collections::BTreeMap::new();
        let mut pairs = Vec::new();
        for &(c, y) in corpus {
            lookup.entry((c, y)).or_insert_with(|| {
                pairs.push((c, y));
                pairs.len() - 1
            });
        }
        let n = pairs.len();
        Self {
            pairs,
            lookup,
            mean: Array2::zeros((n, dim)),
            std: Array2::from_elem((n, dim), 1.0),
            sigma_min: SIGMA_MIN,
        }
    }

    pub fn pair_index(&self, context: usize, target: usize) -> Option<usize> {
        self.lookup.get(&(context, target)).copied()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }
}

/// Score-function gradients of a diagonal Gaussian log-density at `z_prime`:
/// d/d mu log N = (z - mu) / sigma^2, d/d sigma log N = ((z - mu)^2 - sigma^2) / sigma^3.
pub fn score_gradient(
    z_prime: &Array1<f64>,
    mean: &Array1<f64>,
    std: &Array1<f64>,
) -> (Array1<f64>, Array1<f64>) {
    let mut g_mean = Array1::zeros(mean.len());
    let mut g_std = Array1::zeros(mean.len());
    for d in 0..mean.len() {
        let diff = z_prime[d] - mean[d];
        let s = std[d];
        g_mean[d] = diff / (s * s);
        g_std[d] = (diff * diff - s * s) / (s * s * s);
    }
    (g_mean, g_std)
}

/// Log-density of a diagonal Gaussian (used by finite-difference checks).
pub fn gaussian_log_density(z: &Array1<f64>, mean: &Array1<f64>, std: &Array1<f64>) -> f64 {
    let mut acc = 0.0;
    for d in 0..mean.len() {
        let s = std[d];
        let diff = z[d] - mean[d];
        acc += -0.5 * (diff * diff) / (s * s) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    }
    acc
}

/// Closed-form KL between diagonal Gaussians with shared dimension.
pub fn gaussian_kl(
    p_mean: &Array1<f64>,
    p_std: &Array1<f64>,
    q_mean: &Array1<f64>,
    q_std: &Array1<f64>,
) -> f64 {
    let mut acc = 0.0;
    for d in 0..p_mean.len() {
        let (sp, sq) = (p_std[d], q_std[d]);
        let diff = p_mean[d] - q_mean[d];
        acc += (sq / sp).ln() + (sp * sp + diff * diff) / (2.0 * sq * sq) - 0.5;
    }
    acc
}

/// Labeling functions that score a (context, output-symbol) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LabelFunction {
    /// 1 when the output's token list has a question word and a '?', else 0.
    Question {
        question_words: Vec<String>,
        /// Token list per decoder output symbol.
        output_tokens: Vec<Vec<String>>,
    },
    /// Weighted sentiment score from per-output 6-vectors
    /// (pos, neg, joy, optimism, sadness, anger).
    SentimentCombine { output_scores: Vec<[f64; 6]> },
    /// Cosine similarity between context and output feature vectors.
    SentimentCoherence {
        context_features: Vec<Vec<f64>>,
        output_features: Vec<Vec<f64>>,
    },
    /// Negative cosine similarity (topic/tone change).
    Exploration {
        context_features: Vec<Vec<f64>>,
        output_features: Vec<Vec<f64>>,
    },
    /// Arbitrary score table indexed `[context][output]`.
    Custom { scores: Vec<Vec<f64>> },
}

impl LabelFunction {
    pub fn score(&self, context: usize, output: usize) -> f64 {
        match self {
            LabelFunction::Question { question_words, output_tokens } => {
                question_label(&output_tokens[output], question_words)
            }
            LabelFunction::SentimentCombine { output_scores } => {
                sentiment_combine(&output_scores[output])
            }
            LabelFunction::SentimentCoherence { context_features, output_features } => {
                cosine_labels(&context_features[context], &output_features[output]).0
            }
            LabelFunction::Exploration { context_features, output_features } => {
                cosine_labels(&context_features[context], &output_features[output]).1
            }
            LabelFunction::Custom { scores } => scores[context][output],
        }
    }
}

/// 1 iff the tokens contain a configured question word and the '?' symbol.
pub fn question_label<S: AsRef<str>>(tokens: &[S], question_words: &[String]) -> f64 {
    let mut has_word = false;
    let mut has_mark = false;
    for t in tokens {
        let t = t.as_ref();
        if t == "?" {
            has_mark = true;
        }
        if question_words.iter().any(|w| w == t) {
            has_word = true;
        }
    }
    if has_word && has_mark {
        1.0
    } else {
        0.0
    }
}

/// Dot product with the fixed sentiment coefficient table.
pub fn sentiment_combine(scores: &[f64; 6]) -> f64 {
    scores
        .iter()
        .zip(SENTIMENT_COEFFICIENTS.iter())
        .map(|(s, c)| s * c)
        .sum()
}

/// (coherence, exploration) = (cos, -cos) of the two feature vectors; zero
/// vectors score 0 by convention.
pub fn cosine_labels(context_feat: &[f64], utter_feat: &[f64]) -> (f64, f64) {
    let dot: f64 = context_feat.iter().zip(utter_feat).map(|(a, b)| a * b).sum();
    let na: f64 = context_feat.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb: f64 = utter_feat.iter().map(|b| b * b).sum::<f64>().sqrt();
    if na < 1e-300 || nb < 1e-300 {
        return (0.0, 0.0);
    }
    let cos = dot / (na * nb);
    (cos, -cos)
}

/// Sentiment reward blending the next score with the transition away from the
/// discounted history average:
/// r = l1 * s_next + l2 * (s_next - (1-gamma)/(1-gamma^L) * sum_l gamma^l h_l).
pub fn compose_reward(
    sent_next: f64,
    sent_history: &[f64],
    lambda1: f64,
    lambda2: f64,
    gamma: f64,
) -> Result<f64> {
    if sent_history.is_empty() {
        return Err(MoeError::InvalidValue {
            name: "sent_history",
            value: 0.0,
            requirement: "history nonempty",
        });
    }
    if !(0.0..1.0).contains(&gamma) || gamma == 0.0 {
        return Err(MoeError::InvalidValue {
            name: "gamma",
            value: gamma,
            requirement: "0 < gamma < 1",
        });
    }
    let l = sent_history.len();
    let norm = (1.0 - gamma) / (1.0 - gamma.powi(l as i32));
    let mut discounted = 0.0;
    let mut w = 1.0;
    for &h in sent_history {
        discounted += w * h;
        w *= gamma;
    }
    Ok(lambda1 * sent_next + lambda2 * (sent_next - norm * discounted))
}

/// One REINFORCE step for each context: sample latents and outputs, score them,
/// subtract a fresh-sample baseline, and ascend the score-function gradient.
/// Returns the mean label over the gradient samples.
pub fn reinforce_step(
    latent: &mut GaussianLatent,
    decoder: &ToyDecoder,
    contexts: &[usize],
    label: &LabelFunction,
    n_samples: usize,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    reinforce_step_inner(latent, decoder, contexts, label, n_samples, lr, rng, true)
}

/// Same update without the baseline subtraction (for variance comparisons).
pub fn reinforce_step_no_baseline(
    latent: &mut GaussianLatent,
    decoder: &ToyDecoder,
    contexts: &[usize],
    label: &LabelFunction,
    n_samples: usize,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    reinforce_step_inner(latent, decoder, contexts, label, n_samples, lr, rng, false)
}

#[allow(clippy::too_many_arguments)]
fn reinforce_step_inner(
    latent: &mut GaussianLatent,
    decoder: &ToyDecoder,
    contexts: &[usize],
    label: &LabelFunction,
    n_samples: usize,
    lr: f64,
    rng: &mut ChaCha8Rng,
    use_baseline: bool,
) -> Result<f64> {
    if n_samples < 2 {
        return Err(MoeError::InvalidValue {
            name: "n_samples",
            value: n_samples as f64,
            requirement: "n_samples >= 2",
        });
    }
    if lr <= 0.0 {
        return Err(MoeError::InvalidValue {
            name: "lr",
            value: lr,
            requirement: "lr > 0",
        });
    }
    let dim = latent.dim();
    let mut reward_sum = 0.0;
    let mut reward_n = 0usize;
    for &c in contexts {
        if c >= latent.n_contexts() {
            return Err(MoeError::IndexOutOfRange {
                what: "context",
                index: c,
                bound: latent.n_contexts(),
            });
        }
        // Fresh, independent samples for the baseline keep the estimator
        // unbiased.
        let baseline = if use_baseline {
            let mut acc = 0.0;
            for _ in 0..n_samples {
                let z = latent.sample(c, rng);
                let y = sample_index(rng, decoder.probs(&z).as_slice().unwrap());
                acc += label.score(c, y);
            }
            acc / n_samples as f64
        } else {
            0.0
        };
        let mean_row = latent.mean.row(c).to_owned();
        let std_row = latent.std.row(c).to_owned();
        let mut g_mean = Array1::<f64>::zeros(dim);
        let mut g_std = Array1::<f64>::zeros(dim);
        for _ in 0..n_samples {
            let z = latent.sample(c, rng);
            let y = sample_index(rng, decoder.probs(&z).as_slice().unwrap());
            let score = label.score(c, y);
            reward_sum += score;
            reward_n += 1;
            let advantage = score - baseline;
            let (sm, ss) = score_gradient(&z, &mean_row, &std_row);
            g_mean.scaled_add(advantage / n_samples as f64, &sm);
            g_std.scaled_add(advantage / n_samples as f64, &ss);
        }
        for d in 0..dim {
            latent.mean[[c, d]] += lr * g_mean[d];
            latent.std[[c, d]] = (latent.std[[c, d]] + lr * g_std[d]).max(latent.sigma_min);
        }
    }
    Ok(reward_sum / reward_n.max(1) as f64)
}

/// Loss and analytic gradients of the penalty-form objective
/// `E_{z' ~ rho}[-log Psi(y|z')] + beta KL(rho || g0)` under fixed
/// reparameterization noise (`noise[k]` drives corpus item `k`).
#[allow(clippy::type_complexity)]
pub fn primitive_loss_and_grads(
    rho: &PosteriorModel,
    g0: &GaussianLatent,
    decoder: &ToyDecoder,
    corpus: &[(usize, usize)],
    beta_kl: f64,
    noise: &Array2<f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>)> {
    let dim = g0.dim();
    let n = corpus.len() as f64;
    let mut loss = 0.0;
    let mut d_rho_mean = Array2::zeros(rho.mean.dim());
    let mut d_rho_std = Array2::zeros(rho.std.dim());
    let mut d_g0_mean = Array2::zeros(g0.mean.dim());
    let mut d_g0_std = Array2::zeros(g0.std.dim());
    for (k, &(c, y)) in corpus.iter().enumerate() {
        let p = rho.pair_index(c, y).ok_or_else(|| {
            MoeError::Config(format!("corpus pair ({c}, {y}) missing from posterior"))
        })?;
        // Reconstruction through the reparameterized sample.
        let mut z = Array1::zeros(dim);
        for d in 0..dim {
            z[d] = rho.mean[[p, d]] + rho.std[[p, d]] * noise[[k, d]];
        }
        let probs = decoder.probs(&z);
        loss += -probs[y].ln() / n;
        let gz = decoder.neg_log_prob_grad(&z, y);
        for d in 0..dim {
            d_rho_mean[[p, d]] += gz[d] / n;
            d_rho_std[[p, d]] += gz[d] * noise[[k, d]] / n;
        }
        // KL penalty between this posterior and the prior at context c.
        let rm = rho.mean.row(p).to_owned();
        let rs = rho.std.row(p).to_owned();
        let gm = g0.mean.row(c).to_owned();
        let gs = g0.std.row(c).to_owned();
        loss += beta_kl * gaussian_kl(&rm, &rs, &gm, &gs) / n;
        for d in 0..dim {
            let (sp, sq) = (rs[d], gs[d]);
            let diff = rm[d] - gm[d];
            d_rho_mean[[p, d]] += beta_kl * diff / (sq * sq) / n;
            d_rho_std[[p, d]] += beta_kl * (sp / (sq * sq) - 1.0 / sp) / n;
            d_g0_mean[[c, d]] += beta_kl * (-diff / (sq * sq)) / n;
            d_g0_std[[c, d]] +=
                beta_kl * (1.0 / sq - (sp * sp + diff * diff) / (sq * sq * sq)) / n;
        }
    }
    Ok((loss, d_rho_mean, d_rho_std, d_g0_mean, d_g0_std))
}

/// Fit the posterior and the prior by analytic-gradient descent on the
/// penalty-form objective with reparameterized samples. Returns the per-step
/// loss trace.
#[allow(clippy::too_many_arguments)]
pub fn fit_primitive(
    rho: &mut PosteriorModel,
    g0: &mut GaussianLatent,
    decoder: &ToyDecoder,
    corpus: &[(usize, usize)],
    beta_kl: f64,
    lr: f64,
    steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(MoeError::Config("fit_primitive: empty corpus".into()));
    }
    if beta_kl < 0.0 {
        return Err(MoeError::InvalidValue {
            name: "beta_kl",
            value: beta_kl,
            requirement: "beta_kl >= 0",
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = g0.dim();
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut noise = Array2::zeros((corpus.len(), dim));
        for k in 0..corpus.len() {
            for d in 0..dim {
                noise[[k, d]] = rand_distr::StandardNormal.sample_with(&mut rng);
            }
        }
        let (loss, drm, drs, dgm, dgs) =
            primitive_loss_and_grads(rho, g0, decoder, corpus, beta_kl, &noise)?;
        trace.push(loss);
        rho.mean.scaled_add(-lr, &drm);
        rho.std.scaled_add(-lr, &drs);
        rho.std.mapv_inplace(|s| s.max(rho.sigma_min));
        g0.mean.scaled_add(-lr, &dgm);
        g0.std.scaled_add(-lr, &dgs);
        g0.std.mapv_inplace(|s| s.max(g0.sigma_min));
    }
    Ok(trace)
}
