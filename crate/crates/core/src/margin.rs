//! Margins, ramp loss, error rates, disparities and divergences, with
//! exhaustive-enumeration oracles over finite hypothesis classes.
//!
//! Sample sets `S1`, `S2` are lists of row indices into the shared sample
//! set of a [`FiniteHypothesisClass`]; duplicates are allowed and weight the
//! empirical mean accordingly.

use crate::error::{Error, Result};
use crate::numkernel::argmax;

/// Work limit (sample evaluations) for a sup over single hypotheses.
pub const MAX_SINGLE_WORK: usize = 50_000_000;
/// Work limit for a sup over ordered pairs of hypotheses.
pub const MAX_PAIR_WORK: usize = 500_000_000;

/// Scores `f(x, y)` of one scorer on `n` samples and `k` classes,
/// row-major, with optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    n: usize,
    k: usize,
    scores: Vec<f64>,
    labels: Option<Vec<usize>>,
}

impl ScoreTable {
    pub fn new(n: usize, k: usize, scores: Vec<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        if k == 0 {
            return Err(Error::Shape("score table needs k >= 1".into()));
        }
        if scores.len() != n * k {
            return Err(Error::Shape(format!(
                "score table {n}x{k} needs {} values, got {}",
                n * k,
                scores.len()
            )));
        }
        if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("score table entry {i}")));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Shape(format!("{} labels for {n} samples", l.len())));
            }
            if let Some(y) = l.iter().find(|&&y| y >= k) {
                return Err(Error::Range(format!("label {y} >= k = {k}")));
            }
        }
        Ok(Self {
            n,
            k,
            scores,
            labels,
        })
    }

    /// Table from per-sample score rows.
    pub fn from_rows(rows: &[Vec<f64>], labels: Option<Vec<usize>>) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("ragged score rows".into()));
        }
        Self::new(rows.len(), k, rows.concat(), labels)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.k..(i + 1) * self.k]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        self.labels = Some(labels);
        Self::new(self.n, self.k, self.scores, self.labels)
    }

    /// `h_f`: argmax per sample, ties to the smallest class index.
    pub fn labeling(&self) -> Vec<usize> {
        (0..self.n).map(|i| argmax(self.row(i))).collect()
    }

    fn require_labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Usage("score table has no labels".into()))
    }
}

/// A finite scoring space `F` over one shared sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteHypothesisClass {
    tables: Vec<ScoreTable>,
}

impl FiniteHypothesisClass {
    pub fn new(tables: Vec<ScoreTable>) -> Result<Self> {
        let first = tables
            .first()
            .ok_or_else(|| Error::Usage("hypothesis class is empty".into()))?;
        let (n, k) = (first.n, first.k);
        if tables.iter().any(|t| t.n != n || t.k != k) {
            return Err(Error::Shape("hypotheses disagree on (n, k)".into()));
        }
        Ok(Self { tables })
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    pub fn n(&self) -> usize {
        self.tables[0].n
    }

    pub fn k(&self) -> usize {
        self.tables[0].k
    }

    pub fn tables(&self) -> &[ScoreTable] {
        &self.tables
    }

    pub fn get(&self, i: usize) -> &ScoreTable {
        &self.tables[i]
    }

    /// The induced labeling class `H`.
    pub fn labelings(&self) -> Vec<Vec<usize>> {
        self.tables.iter().map(ScoreTable::labeling).collect()
    }
}

/// `½(f(x, y) − max_{y′≠y} f(x, y′))`.
pub fn margin_of(scores: &[f64], y: usize) -> Result<f64> {
    if scores.len() < 2 {
        return Err(Error::Domain(format!("margin needs k >= 2, got {}", scores.len())));
    }
    if y >= scores.len() {
        return Err(Error::Range(format!("label {y} >= k = {}", scores.len())));
    }
    let best_other = scores
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(0.5 * (scores[y] - best_other))
}

/// Ramp loss `Φ_ρ`: 1 below 0, 0 above ρ, linear in between.
pub fn ramp(x: f64, rho: f64) -> Result<f64> {
    if rho.is_nan() || rho <= 0.0 {
        return Err(Error::Domain(format!("ramp needs rho > 0, got {rho}")));
    }
    Ok(ramp_unchecked(x, rho))
}

fn ramp_unchecked(x: f64, rho: f64) -> f64 {
    if x >= rho {
        0.0
    } else if x <= 0.0 {
        1.0
    } else {
        1.0 - x / rho
    }
}

fn check_rho(rho: f64) -> Result<()> {
    ramp(0.0, rho).map(|_| ())
}

fn mean_over(idx: &[usize], mut term: impl FnMut(usize) -> f64) -> f64 {
    idx.iter().map(|&i| term(i)).sum::<f64>() / idx.len() as f64
}

fn all_indices(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn check_sets(n: usize, s1: &[usize], s2: &[usize]) -> Result<()> {
    if s1.is_empty() || s2.is_empty() {
        return Err(Error::Usage("sample index sets must be nonempty".into()));
    }
    if let Some(i) = s1.iter().chain(s2).find(|&&i| i >= n) {
        return Err(Error::Range(format!("sample index {i} >= n = {n}")));
    }
    Ok(())
}

fn check_work(work: usize, limit: usize, what: &str) -> Result<()> {
    if work > limit {
        return Err(Error::Size(format!("{what} needs {work} evaluations, limit {limit}")));
    }
    Ok(())
}

/// Empirical margin loss: mean ramp of the margin at the true label.
pub fn margin_error(f: &ScoreTable, rho: f64) -> Result<f64> {
    check_rho(rho)?;
    let labels = f.require_labels()?;
    if f.k < 2 {
        return Err(Error::Domain("margin needs k >= 2".into()));
    }
    if f.n == 0 {
        return Err(Error::Usage("empty score table".into()));
    }
    Ok(mean_over(&all_indices(f.n), |i| {
        ramp_unchecked(margin_of(f.row(i), labels[i]).unwrap_or(0.0), rho)
    }))
}

/// Fraction of samples with `h_f(x) ≠ y`.
pub fn zero_one_error(f: &ScoreTable) -> Result<f64> {
    let labels = f.require_labels()?;
    if f.n == 0 {
        return Err(Error::Usage("empty score table".into()));
    }
    let h = f.labeling();
    Ok(mean_over(&all_indices(f.n), |i| f64::from(u8::from(h[i] != labels[i]))))
}

/// Fraction of samples where the two labelings differ.
pub fn zero_one_disparity(h: &[usize], h2: &[usize]) -> Result<f64> {
    if h.len() != h2.len() {
        return Err(Error::Shape(format!("labelings of length {} and {}", h.len(), h2.len())));
    }
    if h.is_empty() {
        return Err(Error::Usage("empty labelings".into()));
    }
    Ok(disparity_on(h, h2, &all_indices(h.len())))
}

fn disparity_on(h: &[usize], h2: &[usize], idx: &[usize]) -> f64 {
    mean_over(idx, |i| f64::from(u8::from(h[i] != h2[i])))
}

/// `sup_{h′∈H} [dis_{S2}(h, h′) − dis_{S1}(h, h′)]` by enumeration.
pub fn zero_one_discrepancy(
    h: &[usize],
    class: &FiniteHypothesisClass,
    s1: &[usize],
    s2: &[usize],
) -> Result<f64> {
    if h.len() != class.n() {
        return Err(Error::Shape(format!("labeling length {} != n = {}", h.len(), class.n())));
    }
    check_sets(class.n(), s1, s2)?;
    check_work(class.len() * (s1.len() + s2.len()), MAX_SINGLE_WORK, "0-1 discrepancy")?;
    Ok(class
        .labelings()
        .iter()
        .map(|h2| disparity_on(h, h2, s2) - disparity_on(h, h2, s1))
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Mean ramp of `f2`'s margin at the given pseudo-labels over `idx`.
pub fn ramp_margin_mean(f2: &ScoreTable, pseudo: &[usize], idx: &[usize], rho: f64) -> Result<f64> {
    check_rho(rho)?;
    if f2.k < 2 {
        return Err(Error::Domain("margin needs k >= 2".into()));
    }
    if pseudo.len() != f2.n {
        return Err(Error::Shape(format!("{} pseudo-labels for n = {}", pseudo.len(), f2.n)));
    }
    if idx.is_empty() {
        return Err(Error::Usage("empty sample index set".into()));
    }
    if let Some(i) = idx.iter().find(|&&i| i >= f2.n) {
        return Err(Error::Range(format!("sample index {i} >= n = {}", f2.n)));
    }
    Ok(mean_over(idx, |i| {
        ramp_unchecked(margin_of(f2.row(i), pseudo[i]).unwrap_or(0.0), rho)
    }))
}

/// Margin disparity of `f2` against `f`: mean ramp of `f2`'s margin at
/// `h_f(x)`. Not symmetric in `(f, f2)`.
pub fn margin_disparity(f: &ScoreTable, f2: &ScoreTable, rho: f64) -> Result<f64> {
    if f.n != f2.n || f.k != f2.k {
        return Err(Error::Shape(format!(
            "tables {}x{} and {}x{}",
            f.n, f.k, f2.n, f2.k
        )));
    }
    ramp_margin_mean(f2, &f.labeling(), &all_indices(f.n), rho)
}

/// Value and maximizing hypothesis index of an enumerated supremum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupResult {
    pub value: f64,
    pub argmax: usize,
}

/// `sup_{f′∈F} [disp_{S2}(f, f′) − disp_{S1}(f, f′)]` by enumeration. Ties
/// keep the first maximizing index.
pub fn margin_discrepancy_oracle(
    f: &ScoreTable,
    class: &FiniteHypothesisClass,
    s1: &[usize],
    s2: &[usize],
    rho: f64,
) -> Result<SupResult> {
    check_rho(rho)?;
    if f.n != class.n() || f.k != class.k() {
        return Err(Error::Shape("scorer and class disagree on (n, k)".into()));
    }
    check_sets(class.n(), s1, s2)?;
    check_work(class.len() * (s1.len() + s2.len()), MAX_SINGLE_WORK, "margin discrepancy")?;
    let pseudo = f.labeling();
    let mut best = SupResult {
        value: f64::NEG_INFINITY,
        argmax: 0,
    };
    for (j, f2) in class.tables().iter().enumerate() {
        let v = ramp_margin_mean(f2, &pseudo, s2, rho)? - ramp_margin_mean(f2, &pseudo, s1, rho)?;
        if v > best.value {
            best = SupResult { value: v, argmax: j };
        }
    }
    Ok(best)
}

/// `sup_{h,h′∈H} |dis_{S2}(h, h′) − dis_{S1}(h, h′)|` by enumeration.
pub fn hdeltah_divergence_oracle(class: &FiniteHypothesisClass, s1: &[usize], s2: &[usize]) -> Result<f64> {
    discrepancy_divergence_oracle(class, s1, s2, &zero_one_loss)
}

pub fn zero_one_loss(a: usize, b: usize) -> f64 {
    f64::from(u8::from(a != b))
}

/// Squared difference of class indices scaled into `[0, 1]` by `(k−1)²`.
pub fn squared_label_loss(k: usize) -> impl Fn(usize, usize) -> f64 {
    let scale = ((k.max(2) - 1) as f64).powi(2);
    move |a, b| (a as f64 - b as f64).powi(2) / scale
}

/// `sup_{h,h′∈H} |E_{S2} L(h′, h) − E_{S1} L(h′, h)|` for a pairwise label
/// loss `L` with values in `[0, 1]`.
pub fn discrepancy_divergence_oracle(
    class: &FiniteHypothesisClass,
    s1: &[usize],
    s2: &[usize],
    loss: &dyn Fn(usize, usize) -> f64,
) -> Result<f64> {
    let k = class.k();
    for a in 0..k {
        for b in 0..k {
            let v = loss(a, b);
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Domain(format!("loss({a}, {b}) = {v} outside [0, 1]")));
            }
        }
    }
    check_sets(class.n(), s1, s2)?;
    let f = class.len();
    check_work(f * f * (s1.len() + s2.len()), MAX_PAIR_WORK, "pairwise divergence")?;
    let hs = class.labelings();
    let mut best = 0.0f64;
    for h in &hs {
        for h2 in &hs {
            let e2 = mean_over(s2, |i| loss(h2[i], h[i]));
            let e1 = mean_over(s1, |i| loss(h2[i], h[i]));
            best = best.max((e2 - e1).abs());
        }
    }
    Ok(best)
}
