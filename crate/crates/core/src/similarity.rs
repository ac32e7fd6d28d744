//! Profile similarity: decides whether a procedure's behaviour is stable
//! enough to justify optimizing, or changed enough to justify re-optimizing.
//!
//! Two ingredients over a pair of profile vectors (previous period, current
//! period):
//!
//! * `alpha` — a damped cosine: `(a . b) / (|a| |b| + 1)`. The `+1` pulls the
//!   score of short, low-count vectors toward zero so that near-empty
//!   profiles do not look spuriously similar.
//! * `beta` — the Euclidean distance between the vectors, normalized by the
//!   square root of their dimension, so it is comparable across procedures
//!   with different counter counts.
//!
//! The combined score is `S = e^(-(beta/c)^k) * (1 - alpha) + alpha`: for
//! small absolute change the exponential is ~1 and S is ~1 regardless of
//! direction; as the change grows, S falls toward the directional score
//! alpha. `c` sets the scale of "small" and `k` how sharp the transition is.
//!
//! Before comparison both vectors are padded with one extra component `m`,
//! the maximum entry found in either vector. This bounds how far alpha can
//! be dragged by a single dominant counter and gives dimension-1 vectors a
//! meaningful angle.

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileVector(pub Vec<f64>);

impl ProfileVector {
    pub fn from_counts(counts: &[u64]) -> Self {
        ProfileVector(counts.iter().map(|&c| c as f64).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityParams {
    pub c: f64,
    pub k: i32,
    pub stable_epsilon: f64,
    pub reopt_threshold: f64,
}

impl Default for SimilarityParams {
    fn default() -> Self {
        SimilarityParams { c: 100.0, k: 8, stable_epsilon: 1e-9, reopt_threshold: 0.95 }
    }
}

/// Append the shared padding component `m` (the maximum entry across both
/// vectors) to each vector. Also equalizes lengths first by zero-extension,
/// so callers may pass vectors from periods with different counter sets.
pub fn pad(a: &ProfileVector, b: &ProfileVector) -> (Vec<f64>, Vec<f64>) {
    let n = a.len().max(b.len());
    let mut pa = a.0.clone();
    let mut pb = b.0.clone();
    pa.resize(n, 0.0);
    pb.resize(n, 0.0);
    let m = pa.iter().chain(pb.iter()).cloned().fold(0.0, f64::max);
    pa.push(m);
    pb.push(m);
    (pa, pb)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Damped cosine of the two padded vectors.
pub fn alpha(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b) + 1.0)
}

/// Dimension-normalized Euclidean distance.
pub fn beta(a: &[f64], b: &[f64]) -> f64 {
    let dist: f64 =
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    dist / (a.len() as f64).sqrt()
}

/// Similarity of a procedure's current profile to its previous one.
pub fn similarity(prev: &ProfileVector, cur: &ProfileVector, params: &SimilarityParams) -> f64 {
    if prev.is_empty() && cur.is_empty() {
        return 1.0;
    }
    let (a, b) = pad(prev, cur);
    let al = alpha(&a, &b);
    let be = beta(&a, &b);
    (-(be / params.c).powi(params.k)).exp() * (1.0 - al) + al
}

/// The degenerate form that motivates padding: score the raw vectors with a
/// plain cosine. For dimension-1 vectors with positive entries this is
/// always exactly 1 — any two such vectors point the same way — which is why
/// the padded form above is the one used for decisions.
pub fn similarity_unpadded(prev: &ProfileVector, cur: &ProfileVector, params: &SimilarityParams) -> f64 {
    let al = dot(&prev.0, &cur.0) / (norm(&prev.0) * norm(&cur.0));
    let be = beta(&prev.0, &cur.0);
    (-(be / params.c).powi(params.k)).exp() * (1.0 - al) + al
}

/// Stable means "indistinguishable from identical": S within epsilon of 1.
pub fn is_stable(s: f64, params: &SimilarityParams) -> bool {
    (1.0 - s).abs() <= params.stable_epsilon
}

pub fn should_reoptimize(s: f64, params: &SimilarityParams) -> bool {
    s < params.reopt_threshold
}
