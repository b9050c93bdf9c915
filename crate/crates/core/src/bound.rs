//! Empirical Rademacher complexity estimation and evaluation of the
//! computable terms of the multi-domain margin generalization bound.
//!
//! The assembled total is
//!
//! ```text
//! (1/M) Σ_i [err^ρ_i + d_i]
//!   + (1/M) Σ_i [(8/ρ) R_i(Π_1 F) + (2/ρ) R_i(Π_H F) + 2 c_i]
//!   + (2/ρ) R_centroid(Π_H F) + c_centroid
//! ```
//!
//! with `c = √(ln(2/δ) / (2n))`. The ideal joint error λ cannot be
//! estimated from data, so every reported total excludes it.

use std::fmt::Write as _;

use serde::Serialize;

use crate::dataio::MultiDomainCorpus;
use crate::error::{Error, Result};
use crate::margin::{margin_error, ramp_margin_mean, FiniteHypothesisClass, ScoreTable};
use crate::model::{MdatModel, Mode};
use crate::numkernel::{argmax, format_g, pairwise_sum, RngState};

pub const DEFAULT_DRAWS: usize = 200;
pub const DEFAULT_DELTA: f64 = 0.05;
/// Largest sample count accepted by [`rademacher_exact_tiny`].
pub const EXACT_MAX_N: usize = 20;

pub const LAMBDA_CAVEAT: &str = "total excludes lambda, the ideal joint error constant, which does not depend on the scorer and cannot be estimated from samples";
const EMPIRICAL_NOTE: &str = "margin discrepancies are evaluated on the empirical samples in place of the population distributions";
const SURROGATE_NOTE: &str = "parametric route: each discrepancy is a maximum over {auxiliary classifier, main classifier} only, a lower bound on the supremum over the class";
const PARAMETRIC_NOTE: &str = "parametric route: Rademacher suprema come from random search over a box around the trained output layer and are lower bounds";

/// How the supremum inside a Rademacher average is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SupMode {
    EnumerateFiniteClass,
    RandomSearchParametric,
}

impl SupMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SupMode::EnumerateFiniteClass => "enumerate-finite-class",
            SupMode::RandomSearchParametric => "random-search-parametric",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RademacherEstimate {
    pub value: f64,
    pub std_error: f64,
    pub draws: usize,
    pub sup_mode: SupMode,
}

/// A set of real functions on a fixed sample of size `n`.
pub trait Family {
    fn n(&self) -> usize;

    fn sup_mode(&self) -> SupMode;

    /// `(max_f Σ σ_i f(z_i), min_f Σ σ_i f(z_i))`. Randomized searches may
    /// use `rng`; the maximum must never fall below the minimum.
    fn extremes(&self, sigma: &[f64], rng: &mut RngState) -> (f64, f64);
}

/// Finite family stored as a `len × n` value table.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteFamily {
    n: usize,
    values: Vec<f64>,
}

impl FiniteFamily {
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || n == 0 {
            return Err(Error::Config("Rademacher family needs at least one function and one sample".into()));
        }
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("family rows differ in length".into()));
        }
        let values: Vec<f64> = rows.concat();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("family value".into()));
        }
        Ok(Self { n, values })
    }

    /// `Π_1 F` restricted to `idx`: `x ↦ f(x, y)` for every `f` and class `y`.
    pub fn from_class_pi1(class: &FiniteHypothesisClass, idx: &[usize]) -> Result<Self> {
        check_indices(class.n(), idx)?;
        let rows: Vec<Vec<f64>> = class
            .tables()
            .iter()
            .flat_map(|t| (0..class.k()).map(move |y| idx.iter().map(|&i| t.row(i)[y]).collect()))
            .collect();
        Self::new(&rows)
    }

    /// `Π_H F` restricted to `idx`: `x ↦ f(x, h_g(x))` for every pair `f, g`,
    /// where `h_g` is the argmax labeling of `g`.
    pub fn from_class_pih(class: &FiniteHypothesisClass, idx: &[usize]) -> Result<Self> {
        check_indices(class.n(), idx)?;
        let labelings = class.labelings();
        let rows: Vec<Vec<f64>> = class
            .tables()
            .iter()
            .flat_map(|t| {
                labelings
                    .iter()
                    .map(move |h| idx.iter().map(|&i| t.row(i)[h[i]]).collect())
            })
            .collect();
        Self::new(&rows)
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.n
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.n..(j + 1) * self.n]
    }

    /// Largest absolute value taken by any function.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl Family for FiniteFamily {
    fn n(&self) -> usize {
        self.n
    }

    fn sup_mode(&self) -> SupMode {
        SupMode::EnumerateFiniteClass
    }

    fn extremes(&self, sigma: &[f64], _rng: &mut RngState) -> (f64, f64) {
        let mut hi = f64::NEG_INFINITY;
        let mut lo = f64::INFINITY;
        for j in 0..self.len() {
            let s: f64 = self.row(j).iter().zip(sigma).map(|(f, s)| f * s).sum();
            hi = hi.max(s);
            lo = lo.min(s);
        }
        (hi, lo)
    }
}

fn check_indices(n: usize, idx: &[usize]) -> Result<()> {
    if idx.is_empty() {
        return Err(Error::Config("empty sample set".into()));
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
        return Err(Error::Range(format!("sample index {bad} >= n = {n}")));
    }
    Ok(())
}

/// Monte-Carlo estimate of `E_σ sup_f (1/n) Σ σ_i f(z_i)`.
///
/// Each draw pairs `σ` with `−σ` and records `(max − min) / 2n`, an unbiased
/// and never-negative single-draw estimate. Draw `d` uses `rng.child(d)`, so
/// the result does not depend on evaluation order.
pub fn empirical_rademacher(family: &dyn Family, draws: usize, rng: &RngState) -> Result<RademacherEstimate> {
    if draws == 0 {
        return Err(Error::Config("Rademacher estimate needs draws >= 1".into()));
    }
    let n = family.n();
    if n == 0 {
        return Err(Error::Config("empty sample set".into()));
    }
    let values: Vec<f64> = (0..draws)
        .map(|d| {
            let mut r = rng.child(d as u64);
            let sigma: Vec<f64> = (0..n).map(|_| r.sign()).collect();
            let (hi, lo) = family.extremes(&sigma, &mut r);
            (hi - lo).max(0.0) / (2.0 * n as f64)
        })
        .collect();
    let value = pairwise_sum(&values) / draws as f64;
    let std_error = if draws > 1 {
        let ss = pairwise_sum(&values.iter().map(|v| (v - value).powi(2)).collect::<Vec<_>>());
        (ss / (draws - 1) as f64).sqrt() / (draws as f64).sqrt()
    } else {
        0.0
    };
    Ok(RademacherEstimate {
        value,
        std_error,
        draws,
        sup_mode: family.sup_mode(),
    })
}

/// Exact empirical Rademacher complexity by enumerating sign vectors.
///
/// Only the half cube with `σ_n = +1` is visited (the other half mirrors it)
/// in Gray-code order, so each step updates every dot product with a single
/// coordinate flip.
pub fn rademacher_exact_tiny(family: &FiniteFamily) -> Result<f64> {
    let n = family.n;
    if n > EXACT_MAX_N {
        return Err(Error::Size(format!(
            "exact Rademacher enumeration needs n <= {EXACT_MAX_N}, got {n}"
        )));
    }
    let mut sigma = vec![-1.0; n];
    sigma[n - 1] = 1.0;
    let mut dots: Vec<f64> = (0..family.len())
        .map(|j| family.row(j).iter().zip(&sigma).map(|(f, s)| f * s).sum())
        .collect();
    let count = 1usize << (n - 1);
    let mut spans = Vec::with_capacity(count);
    let span = |dots: &[f64]| {
        let (hi, lo) = dots
            .iter()
            .fold((f64::NEG_INFINITY, f64::INFINITY), |(h, l), &d| (h.max(d), l.min(d)));
        hi - lo
    };
    spans.push(span(&dots));
    for t in 1..count {
        let b = t.trailing_zeros() as usize;
        sigma[b] = -sigma[b];
        for (j, d) in dots.iter_mut().enumerate() {
            *d += 2.0 * sigma[b] * family.row(j)[b];
        }
        spans.push(span(&dots));
    }
    Ok(pairwise_sum(&spans) / count as f64 / (2.0 * n as f64))
}

/// Massart's finite-class bound `r √(2 ln|F| / n)` for functions in `[−r, r]`.
pub fn massart_bound(class_size: usize, n: usize, range_bound: f64) -> f64 {
    if class_size <= 1 {
        return 0.0;
    }
    if n == 0 {
        return f64::INFINITY;
    }
    range_bound * (2.0 * (class_size as f64).ln() / n as f64).sqrt()
}

/// `√(ln(2/δ) / (2n))`.
pub fn confidence_term(delta: f64, n: f64) -> f64 {
    ((2.0 / delta).ln() / (2.0 * n)).sqrt()
}

/// Which induced family a [`ParametricFamily`] represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    /// `x ↦ f(x, y)` for a fixed class `y`.
    Pi1,
    /// `x ↦ f(x, h_g(x))` with `h_g` the labeling of a second scorer `g`.
    PiH,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SearchConfig {
    /// Half-width of the parameter box around the base output layer.
    pub scale: f64,
    pub restarts: usize,
    pub local_steps: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            scale: 0.1,
            restarts: 4,
            local_steps: 8,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale >= 0.0) {
            return Err(Error::Config(format!("search scale must be finite and >= 0, got {}", self.scale)));
        }
        if self.restarts == 0 {
            return Err(Error::Config("search needs restarts >= 1".into()));
        }
        Ok(())
    }
}

/// Linear scorers `φ(x) ↦ W φ(x) + b` on fixed penultimate features, with
/// `(W, b)` ranging over the box `base ± scale` coordinate-wise.
///
/// The supremum is approximated by random search: restart 0 starts at the
/// base, later restarts at a clipped Gaussian draw; each restart then takes
/// `local_steps` clipped Gaussian proposals and keeps improvements.
#[derive(Debug, Clone)]
pub struct ParametricFamily {
    n: usize,
    h: usize,
    k: usize,
    phi: Vec<f64>,
    base: Vec<f64>,
    kind: ScoreKind,
    search: SearchConfig,
}

impl ParametricFamily {
    /// `phi` holds one `h`-vector per sample; `weights` is `k × h` row-major.
    pub fn new(
        phi: &[Vec<f64>],
        weights: &[f64],
        bias: &[f64],
        kind: ScoreKind,
        search: SearchConfig,
    ) -> Result<Self> {
        search.validate()?;
        let n = phi.len();
        let h = phi.first().map_or(0, Vec::len);
        let k = bias.len();
        if n == 0 || h == 0 || k < 2 {
            return Err(Error::Config("parametric family needs samples, features and k >= 2".into()));
        }
        if phi.iter().any(|r| r.len() != h) || weights.len() != k * h {
            return Err(Error::Shape(format!(
                "parametric family expects {n}×{h} features and a {k}×{h} weight matrix"
            )));
        }
        let mut base = weights.to_vec();
        base.extend_from_slice(bias);
        let phi = phi.concat();
        if phi.iter().chain(&base).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parametric family input".into()));
        }
        Ok(Self {
            n,
            h,
            k,
            phi,
            base,
            kind,
            search,
        })
    }

    pub fn kind(&self) -> ScoreKind {
        self.kind
    }

    fn phi(&self, i: usize) -> &[f64] {
        &self.phi[i * self.h..(i + 1) * self.h]
    }

    fn score(&self, theta: &[f64], i: usize, c: usize) -> f64 {
        let w = &theta[c * self.h..(c + 1) * self.h];
        let b = theta[self.k * self.h + c];
        b + self.phi(i).iter().zip(w).map(|(p, w)| p * w).sum::<f64>()
    }

    /// `Π_1`: `Σ σ_i f_θ(x_i, y)` is linear in θ, so it is evaluated from
    /// `g = Σ σ_i φ_i` and `Σ σ_i`. Returns the best over `y` in direction `dir`.
    fn objective_pi1(&self, theta: &[f64], g: &[f64], s: f64, dir: f64) -> f64 {
        (0..self.k)
            .map(|c| {
                let w = &theta[c * self.h..(c + 1) * self.h];
                dir * (theta[self.k * self.h + c] * s + g.iter().zip(w).map(|(g, w)| g * w).sum::<f64>())
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn objective_pih(&self, theta: &[f64], labeler: &[f64], sigma: &[f64], dir: f64) -> f64 {
        let mut total = 0.0;
        let mut scores = vec![0.0; self.k];
        for (i, s) in sigma.iter().enumerate() {
            for (c, sc) in scores.iter_mut().enumerate() {
                *sc = self.score(labeler, i, c);
            }
            total += s * self.score(theta, i, argmax(&scores));
        }
        dir * total
    }

    fn propose(&self, from: &[f64], width: f64, rng: &mut RngState) -> Vec<f64> {
        let s = self.search.scale;
        from.iter()
            .zip(self.base.iter().cycle())
            .map(|(x, b)| (x + width * rng.normal()).clamp(b - s, b + s))
            .collect()
    }

    /// Random-search maximum of `dir · Σ σ_i f(x_i)`.
    fn search(&self, sigma: &[f64], dir: f64, rng: &mut RngState) -> f64 {
        let p = self.base.len();
        let s = self.search.scale;
        let g: Vec<f64> = (0..self.h)
            .map(|j| sigma.iter().enumerate().map(|(i, si)| si * self.phi(i)[j]).sum())
            .collect();
        let ssum: f64 = sigma.iter().sum();
        // Π_H parameters are (θ, θ′) stacked; Π_1 uses θ alone.
        let width = match self.kind {
            ScoreKind::Pi1 => p,
            ScoreKind::PiH => 2 * p,
        };
        let eval = |x: &[f64]| match self.kind {
            ScoreKind::Pi1 => self.objective_pi1(x, &g, ssum, dir),
            ScoreKind::PiH => self.objective_pih(&x[..p], &x[p..], sigma, dir),
        };
        let start: Vec<f64> = self.base.iter().cycle().take(width).copied().collect();
        let mut best = eval(&start);
        for r in 0..self.search.restarts {
            let mut x = if r == 0 { start.clone() } else { self.propose(&start, s / 2.0, rng) };
            let mut fx = eval(&x);
            for _ in 0..self.search.local_steps {
                let cand = self.propose(&x, s / 4.0, rng);
                let fc = eval(&cand);
                if fc > fx {
                    x = cand;
                    fx = fc;
                }
            }
            best = best.max(fx);
        }
        best
    }
}

impl Family for ParametricFamily {
    fn n(&self) -> usize {
        self.n
    }

    fn sup_mode(&self) -> SupMode {
        SupMode::RandomSearchParametric
    }

    fn extremes(&self, sigma: &[f64], rng: &mut RngState) -> (f64, f64) {
        let hi = self.search(sigma, 1.0, rng);
        let lo = -self.search(sigma, -1.0, rng);
        (hi, lo.min(hi))
    }
}

/// Where the margin discrepancies in a [`BoundReport`] come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscrepancySource {
    /// Exact supremum over a finite class.
    Oracle,
    /// Maximum over the trained auxiliary and main classifiers.
    AuxiliarySurrogate,
}

impl DiscrepancySource {
    pub fn as_str(self) -> &'static str {
        match self {
            DiscrepancySource::Oracle => "oracle",
            DiscrepancySource::AuxiliarySurrogate => "auxiliary-surrogate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainTerms {
    pub name: String,
    /// Sample count behind the margin error and confidence term.
    pub n: usize,
    /// Samples behind the discrepancy and Rademacher estimates.
    pub n_estimate: usize,
    pub margin_error: f64,
    /// Individual discrepancies can be negative; their mean cannot.
    pub discrepancy: f64,
    pub rademacher_pi1: RademacherEstimate,
    pub rademacher_pih: RademacherEstimate,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub rho: f64,
    pub delta: f64,
    pub k: usize,
    pub m: usize,
    pub n_bar: f64,
    pub domains: Vec<DomainTerms>,
    /// `R(Π_H F)` on a centroid sample of size `round(n̄)`.
    pub centroid_rademacher_pih: RademacherEstimate,
    pub centroid_confidence: f64,
    /// `(1/M) Σ err^ρ_i`.
    pub margin_error_term: f64,
    /// `(1/M) Σ d_i`.
    pub discrepancy_term: f64,
    /// `(1/M) Σ [(8/ρ) R_i(Π_1) + (2/ρ) R_i(Π_H) + 2 c_i]`.
    pub complexity_term: f64,
    /// `(2/ρ) R_centroid(Π_H)`.
    pub centroid_complexity_term: f64,
    /// Sum of the five parts listed by [`BoundReport::parts`].
    pub total: f64,
    pub discrepancy_source: DiscrepancySource,
    pub sup_mode: SupMode,
    pub lambda: &'static str,
    pub notes: Vec<String>,
}

impl BoundReport {
    /// The additive parts of `total`, in summation order.
    pub fn parts(&self) -> [(&'static str, f64); 5] {
        [
            ("margin_error_term", self.margin_error_term),
            ("discrepancy_term", self.discrepancy_term),
            ("complexity_term", self.complexity_term),
            ("centroid_complexity_term", self.centroid_complexity_term),
            ("centroid_confidence", self.centroid_confidence),
        ]
    }

    /// Flat `key = value` text report, numbers with 17 significant digits.
    pub fn to_kv(&self) -> String {
        let g = |x: f64| format_g(x, 17);
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        line("rho", g(self.rho));
        line("delta", g(self.delta));
        line("k", self.k.to_string());
        line("m", self.m.to_string());
        line("n_bar", g(self.n_bar));
        for (i, d) in self.domains.iter().enumerate() {
            let p = format!("domain.{i}");
            line(&format!("{p}.name"), d.name.clone());
            line(&format!("{p}.n"), d.n.to_string());
            line(&format!("{p}.n_estimate"), d.n_estimate.to_string());
            line(&format!("{p}.margin_error"), g(d.margin_error));
            line(&format!("{p}.discrepancy"), g(d.discrepancy));
            line(&format!("{p}.rademacher_pi1"), g(d.rademacher_pi1.value));
            line(&format!("{p}.rademacher_pi1_std_error"), g(d.rademacher_pi1.std_error));
            line(&format!("{p}.rademacher_pih"), g(d.rademacher_pih.value));
            line(&format!("{p}.rademacher_pih_std_error"), g(d.rademacher_pih.std_error));
            line(&format!("{p}.confidence"), g(d.confidence));
        }
        line("centroid.rademacher_pih", g(self.centroid_rademacher_pih.value));
        line("centroid.rademacher_pih_std_error", g(self.centroid_rademacher_pih.std_error));
        for (name, v) in self.parts() {
            line(name, g(v));
        }
        line("total", g(self.total));
        line("discrepancy_source", self.discrepancy_source.as_str().into());
        line("sup_mode", self.sup_mode.as_str().into());
        line("lambda", self.lambda.into());
        for (i, n) in self.notes.iter().enumerate() {
            line(&format!("note.{i}"), n.clone());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundConfig {
    pub rho: f64,
    pub delta: f64,
    pub draws: usize,
    /// Per-domain cap on samples used for discrepancy and Rademacher terms
    /// (parametric route only).
    pub max_samples: usize,
    pub search: SearchConfig,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            rho: 4f64.ln(),
            delta: DEFAULT_DELTA,
            draws: DEFAULT_DRAWS,
            max_samples: 200,
            search: SearchConfig::default(),
        }
    }
}

impl BoundConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(Error::Config(format!("rho must be > 0, got {}", self.rho)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0 / 3.0) {
            return Err(Error::Config(format!(
                "delta must lie in (0, 1/3) for a 1 - 3 delta guarantee, got {}",
                self.delta
            )));
        }
        if self.draws == 0 {
            return Err(Error::Config("draws must be >= 1".into()));
        }
        if self.max_samples == 0 {
            return Err(Error::Config("max_samples must be >= 1".into()));
        }
        self.search.validate()
    }
}

/// Finite-class input: scorer `f = class[scorer]` (its table must carry
/// labels) and the sample indices of each domain.
#[derive(Debug, Clone, Copy)]
pub struct FiniteBoundInput<'a> {
    pub class: &'a FiniteHypothesisClass,
    pub scorer: usize,
    pub domains: &'a [Vec<usize>],
}

#[derive(Debug, Clone, Copy)]
pub enum BoundSource<'a> {
    Finite(FiniteBoundInput<'a>),
    /// A trained model with the corpus it is evaluated on. Margin errors use
    /// each domain's labeled samples.
    Model {
        model: &'a MdatModel,
        corpus: &'a MultiDomainCorpus,
    },
}

/// Per-domain measurements before assembly.
struct DomainInputs {
    name: String,
    n: usize,
    n_estimate: usize,
    margin_error: f64,
    /// Disparity of each candidate second scorer on this domain.
    disparities: Vec<f64>,
    pi1: RademacherEstimate,
    pih: RademacherEstimate,
}

/// Evaluate every computable term of the bound.
pub fn evaluate_mdtc_bound(source: BoundSource<'_>, cfg: &BoundConfig, rng: &RngState) -> Result<BoundReport> {
    cfg.validate()?;
    match source {
        BoundSource::Finite(input) => finite_route(input, cfg, rng),
        BoundSource::Model { model, corpus } => model_route(model, corpus, cfg, rng),
    }
}

fn centroid_sample(sizes: &[usize], rng: &RngState) -> (Vec<usize>, f64) {
    let total: usize = sizes.iter().sum();
    let n_bar = total as f64 / sizes.len() as f64;
    let take = (n_bar.round() as usize).clamp(1, total);
    let mut pick = rng.child_named("centroid").permutation(total);
    pick.truncate(take);
    pick.sort_unstable();
    (pick, n_bar)
}

fn finite_route(input: FiniteBoundInput<'_>, cfg: &BoundConfig, rng: &RngState) -> Result<BoundReport> {
    let class = input.class;
    if input.scorer >= class.len() {
        return Err(Error::Range(format!("scorer {} >= |F| = {}", input.scorer, class.len())));
    }
    if input.domains.is_empty() {
        return Err(Error::Config("bound needs at least one domain".into()));
    }
    let f = class.get(input.scorer);
    let labels = f
        .labels()
        .ok_or_else(|| Error::Config("scorer table carries no labels".into()))?;
    let pseudo = f.labeling();
    let mut per = Vec::with_capacity(input.domains.len());
    for (i, idx) in input.domains.iter().enumerate() {
        check_indices(class.n(), idx)?;
        let sub = ScoreTable::from_rows(
            &idx.iter().map(|&j| f.row(j).to_vec()).collect::<Vec<_>>(),
            Some(idx.iter().map(|&j| labels[j]).collect()),
        )?;
        let disparities = class
            .tables()
            .iter()
            .map(|f2| ramp_margin_mean(f2, &pseudo, idx, cfg.rho))
            .collect::<Result<Vec<_>>>()?;
        per.push(DomainInputs {
            name: format!("domain{i}"),
            n: idx.len(),
            n_estimate: idx.len(),
            margin_error: margin_error(&sub, cfg.rho)?,
            disparities,
            pi1: empirical_rademacher(
                &FiniteFamily::from_class_pi1(class, idx)?,
                cfg.draws,
                &rng.child_named("pi1").child(i as u64),
            )?,
            pih: empirical_rademacher(
                &FiniteFamily::from_class_pih(class, idx)?,
                cfg.draws,
                &rng.child_named("pih").child(i as u64),
            )?,
        });
    }
    let pooled: Vec<usize> = input.domains.concat();
    let sizes: Vec<usize> = input.domains.iter().map(Vec::len).collect();
    let (pick, n_bar) = centroid_sample(&sizes, rng);
    let centroid_idx: Vec<usize> = pick.iter().map(|&p| pooled[p]).collect();
    let centroid = empirical_rademacher(
        &FiniteFamily::from_class_pih(class, &centroid_idx)?,
        cfg.draws,
        &rng.child_named("centroid-pih"),
    )?;
    Ok(assemble(
        per,
        centroid,
        n_bar,
        class.k(),
        cfg,
        DiscrepancySource::Oracle,
        SupMode::EnumerateFiniteClass,
    ))
}

fn model_route(model: &MdatModel, corpus: &MultiDomainCorpus, cfg: &BoundConfig, rng: &RngState) -> Result<BoundReport> {
    let arch = model.arch();
    if corpus.m() != arch.domains || corpus.vocab_dim() != arch.input_dim || corpus.k() != arch.k {
        return Err(Error::Shape(format!(
            "corpus (M={}, vocab={}, k={}) does not match the model (M={}, vocab={}, k={})",
            corpus.m(),
            corpus.vocab_dim(),
            corpus.k(),
            arch.domains,
            arch.input_dim,
            arch.k
        )));
    }
    let head = model.classifier_output_layer();
    let h = arch.classifier_spec().dims[arch.classifier_spec().n_layers() - 1];
    let (weights, bias) = model.params[head].split_at(arch.k * h);
    let mut fwd_rng = RngState::new(0);
    let mut per = Vec::with_capacity(corpus.m());
    let mut pooled_phi: Vec<Vec<f64>> = Vec::new();
    let mut sizes = Vec::with_capacity(corpus.m());
    for (i, d) in corpus.domains().iter().enumerate() {
        if d.l() == 0 {
            return Err(Error::Domain(format!(
                "domain '{}' has no labeled samples for the margin error",
                d.name
            )));
        }
        let mut rows = Vec::with_capacity(d.l());
        for (x, _) in &d.labeled {
            rows.push(model.forward(i, x.into(), Mode::Eval, &mut fwd_rng)?.logits_c);
        }
        let labeled = ScoreTable::from_rows(&rows, Some(d.labeled.iter().map(|(_, y)| *y).collect()))?;

        let mut pick = rng.child_named("subsample").child(i as u64).permutation(d.n());
        pick.truncate(cfg.max_samples);
        pick.sort_unstable();
        let (mut c_rows, mut aux_rows, mut phi) = (Vec::new(), Vec::new(), Vec::new());
        for &j in &pick {
            let out = model.forward(i, d.pooled(j).into(), Mode::Eval, &mut fwd_rng)?;
            phi.push(out.trace.classifier_penultimate().to_vec());
            c_rows.push(out.logits_c);
            aux_rows.push(out.logits_aux);
        }
        let c = ScoreTable::from_rows(&c_rows, None)?;
        let aux = ScoreTable::from_rows(&aux_rows, None)?;
        let pseudo = c.labeling();
        let all: Vec<usize> = (0..pick.len()).collect();
        let disparities = vec![
            ramp_margin_mean(&aux, &pseudo, &all, cfg.rho)?,
            ramp_margin_mean(&c, &pseudo, &all, cfg.rho)?,
        ];
        let family = |kind| ParametricFamily::new(&phi, weights, bias, kind, cfg.search);
        per.push(DomainInputs {
            name: d.name.clone(),
            n: d.l(),
            n_estimate: pick.len(),
            margin_error: margin_error(&labeled, cfg.rho)?,
            disparities,
            pi1: empirical_rademacher(&family(ScoreKind::Pi1)?, cfg.draws, &rng.child_named("pi1").child(i as u64))?,
            pih: empirical_rademacher(&family(ScoreKind::PiH)?, cfg.draws, &rng.child_named("pih").child(i as u64))?,
        });
        sizes.push(pick.len());
        pooled_phi.extend(phi);
    }
    let (pick, _) = centroid_sample(&sizes, rng);
    let centroid_phi: Vec<Vec<f64>> = pick.iter().map(|&p| pooled_phi[p].clone()).collect();
    let centroid = empirical_rademacher(
        &ParametricFamily::new(&centroid_phi, weights, bias, ScoreKind::PiH, cfg.search)?,
        cfg.draws,
        &rng.child_named("centroid-pih"),
    )?;
    let n_bar = per.iter().map(|d| d.n as f64).sum::<f64>() / per.len() as f64;
    let mut report = assemble(
        per,
        centroid,
        n_bar,
        arch.k,
        cfg,
        DiscrepancySource::AuxiliarySurrogate,
        SupMode::RandomSearchParametric,
    );
    report.notes.push(SURROGATE_NOTE.into());
    report.notes.push(PARAMETRIC_NOTE.into());
    Ok(report)
}

fn assemble(
    per: Vec<DomainInputs>,
    centroid: RademacherEstimate,
    n_bar: f64,
    k: usize,
    cfg: &BoundConfig,
    discrepancy_source: DiscrepancySource,
    sup_mode: SupMode,
) -> BoundReport {
    let m = per.len();
    let mf = m as f64;
    let rho = cfg.rho;
    // The centroid disparity of each candidate is the mean of the per-domain
    // disparities, so Σ_i d_i ≥ 0 for every candidate set.
    let n_cand = per[0].disparities.len();
    let centroid_disp: Vec<f64> = (0..n_cand)
        .map(|j| per.iter().map(|d| d.disparities[j]).sum::<f64>() / mf)
        .collect();
    let domains: Vec<DomainTerms> = per
        .into_iter()
        .map(|d| {
            let discrepancy = if m == 1 {
                0.0
            } else {
                centroid_disp
                    .iter()
                    .zip(&d.disparities)
                    .map(|(c, s)| c - s)
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            DomainTerms {
                confidence: confidence_term(cfg.delta, d.n as f64),
                name: d.name,
                n: d.n,
                n_estimate: d.n_estimate,
                margin_error: d.margin_error,
                discrepancy,
                rademacher_pi1: d.pi1,
                rademacher_pih: d.pih,
            }
        })
        .collect();
    let margin_error_term = domains.iter().map(|d| d.margin_error).sum::<f64>() / mf;
    let discrepancy_term = (domains.iter().map(|d| d.discrepancy).sum::<f64>() / mf).max(0.0);
    let complexity_term = domains
        .iter()
        .map(|d| 8.0 / rho * d.rademacher_pi1.value + 2.0 / rho * d.rademacher_pih.value + 2.0 * d.confidence)
        .sum::<f64>()
        / mf;
    let centroid_complexity_term = 2.0 / rho * centroid.value;
    let centroid_confidence = confidence_term(cfg.delta, n_bar);
    let mut report = BoundReport {
        rho,
        delta: cfg.delta,
        k,
        m,
        n_bar,
        domains,
        centroid_rademacher_pih: centroid,
        centroid_confidence,
        margin_error_term,
        discrepancy_term,
        complexity_term,
        centroid_complexity_term,
        total: 0.0,
        discrepancy_source,
        sup_mode,
        lambda: LAMBDA_CAVEAT,
        notes: vec![EMPIRICAL_NOTE.into()],
    };
    report.total = report.parts().iter().map(|(_, v)| v).sum();
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_family(values: &[f64], n: usize) -> FiniteFamily {
        FiniteFamily::new(&values.iter().map(|&c| vec![c; n]).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn singleton_family_is_exactly_zero() {
        let fam = FiniteFamily::new(&[vec![0.3, -0.7, 0.1]]).unwrap();
        assert_eq!(rademacher_exact_tiny(&fam).unwrap(), 0.0);
        let est = empirical_rademacher(&fam, 50, &RngState::new(1)).unwrap();
        assert_eq!(est.value, 0.0);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn plus_minus_constants_on_one_sample_give_one() {
        let fam = constant_family(&[1.0, -1.0], 1);
        assert_eq!(rademacher_exact_tiny(&fam).unwrap(), 1.0);
        let est = empirical_rademacher(&fam, 10, &RngState::new(2)).unwrap();
        assert_eq!(est.value, 1.0);
    }

    #[test]
    fn exact_on_one_sample_is_half_the_range() {
        let fam = FiniteFamily::new(&[vec![0.2], vec![-0.5], vec![0.9]]).unwrap();
        assert!((rademacher_exact_tiny(&fam).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn exact_rejects_large_n() {
        let fam = FiniteFamily::new(&[vec![0.0; 21]]).unwrap();
        assert_eq!(rademacher_exact_tiny(&fam).unwrap_err().kind(), "size");
    }

    #[test]
    fn massart_closed_forms() {
        assert_eq!(massart_bound(1, 5, 1.0), 0.0);
        // |F| = 7 ≈ e²: r √(2 ln 7 / 2) = √(ln 7).
        assert!((massart_bound(7, 2, 1.0) - 7f64.ln().sqrt()).abs() < 1e-15);
        assert!(massart_bound(10, 4, 1.0) >= massart_bound(10, 8, 1.0));
    }

    #[test]
    fn confidence_shrinks_by_root_two_when_n_doubles() {
        for n in [100.0, 1000.0, 10000.0] {
            let r = confidence_term(0.05, n) / confidence_term(0.05, 2.0 * n);
            assert!((r - 2f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn draws_zero_rejected() {
        let fam = constant_family(&[1.0], 2);
        assert!(empirical_rademacher(&fam, 0, &RngState::new(0)).is_err());
    }

    #[test]
    fn bound_config_rejects_bad_delta_and_rho() {
        let bad_delta = BoundConfig {
            delta: 0.5,
            ..BoundConfig::default()
        };
        assert_eq!(bad_delta.validate().unwrap_err().kind(), "config");
        let bad_rho = BoundConfig {
            rho: 0.0,
            ..BoundConfig::default()
        };
        assert!(bad_rho.validate().is_err());
    }

    fn pi1_exact_sup(fam: &ParametricFamily, sigma: &[f64]) -> f64 {
        // Linear in θ over a box: the maximum sits at a corner.
        let g: Vec<f64> = (0..fam.h)
            .map(|j| sigma.iter().enumerate().map(|(i, s)| s * fam.phi(i)[j]).sum())
            .collect();
        let ssum: f64 = sigma.iter().sum();
        let l1: f64 = g.iter().map(|v| v.abs()).sum::<f64>() + ssum.abs();
        (0..fam.k)
            .map(|c| {
                let w = &fam.base[c * fam.h..(c + 1) * fam.h];
                let at_base = fam.base[fam.k * fam.h + c] * ssum + g.iter().zip(w).map(|(g, w)| g * w).sum::<f64>();
                at_base + fam.search.scale * l1
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn parametric_search_stays_below_exact_pi1_supremum() {
        let mut rng = RngState::new(5);
        let phi: Vec<Vec<f64>> = (0..12).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let w: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let fam = ParametricFamily::new(&phi, &w, &[0.1, -0.2], ScoreKind::Pi1, SearchConfig::default()).unwrap();
        for d in 0..20 {
            let mut r = rng.child(d);
            let sigma: Vec<f64> = (0..12).map(|_| r.sign()).collect();
            let (hi, lo) = fam.extremes(&sigma, &mut r);
            assert!(hi >= lo);
            assert!(hi <= pi1_exact_sup(&fam, &sigma) + 1e-9);
        }
    }

    #[test]
    fn zero_scale_parametric_family_matches_its_finite_counterpart() {
        let mut rng = RngState::new(9);
        let phi: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let w: Vec<f64> = (0..9).map(|_| rng.normal()).collect();
        let b = [0.0, 0.5, -0.5];
        let search = SearchConfig {
            scale: 0.0,
            ..SearchConfig::default()
        };
        let fam = ParametricFamily::new(&phi, &w, &b, ScoreKind::Pi1, search).unwrap();
        let rows: Vec<Vec<f64>> = (0..3).map(|c| (0..6).map(|i| fam.score(&fam.base, i, c)).collect()).collect();
        let finite = FiniteFamily::new(&rows).unwrap();
        let a = empirical_rademacher(&fam, 30, &RngState::new(1)).unwrap();
        let b = empirical_rademacher(&finite, 30, &RngState::new(1)).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
        assert_eq!(a.sup_mode, SupMode::RandomSearchParametric);
    }
}
