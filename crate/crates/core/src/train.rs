//! MDAT losses and the alternating minimax loop, the ℓ1 three-step variant,
//! evaluation (including the zeroed-specific-branch target protocol),
//! the feature-alignment diagnostic and k-fold cross-validation.
//!
//! Losses are batch means within a domain, summed across domains.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::ops::Range;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataio::{kfold_corpus, DomainDataset, LabeledSample, MiniBatchPair, MinibatchSampler, MultiDomainCorpus};
use crate::error::{Error, Result};
use crate::margin::{ramp_margin_mean, ScoreTable};
use crate::model::{
    grad_check, Architecture, ForwardOutput, GradCheckConfig, GradCheckReport, MdatModel, Mode, Objective, Routing,
};
use crate::numkernel::{adam_step, argmax, softmax, AdamState, RngState, SparseVector, VectorRef};

/// Probabilities inside logarithms are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Margin-discrepancy loss with two-step alternating updates.
    #[serde(rename = "mdat")]
    Mdat,
    /// ℓ1 classifier discrepancy with three-step updates.
    #[serde(rename = "mdat-l1")]
    MdatL1,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Mdat => "mdat",
            Variant::MdatL1 => "mdat-l1",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mdat" => Ok(Variant::Mdat),
            "mdat-l1" => Ok(Variant::MdatL1),
            _ => Err(Error::Config(format!("unknown variant {s:?} (expected mdat or mdat-l1)"))),
        }
    }
}

/// Layer sizes independent of the corpus (input dim, `M` and `k` come from
/// the corpus).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub shared_hidden: Vec<usize>,
    pub d_s: usize,
    pub specific_hidden: Vec<usize>,
    pub d_p: usize,
    pub classifier_hidden: Vec<usize>,
    pub keep_prob: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let a = Architecture::standard(1, 1, 2);
        Self {
            shared_hidden: a.shared_hidden,
            d_s: a.d_s,
            specific_hidden: a.specific_hidden,
            d_p: a.d_p,
            classifier_hidden: a.classifier_hidden,
            keep_prob: a.keep_prob,
        }
    }
}

impl ArchConfig {
    /// Narrow network sized for the synthetic benchmark: shared `[64] → 32`,
    /// specific `[32] → 16`, classifiers `[48]`.
    pub fn compact() -> Self {
        Self {
            shared_hidden: vec![64],
            d_s: 32,
            specific_hidden: vec![32],
            d_p: 16,
            classifier_hidden: vec![48],
            keep_prob: 0.6,
        }
    }

    pub fn for_corpus(&self, corpus: &MultiDomainCorpus) -> Architecture {
        Architecture {
            input_dim: corpus.vocab_dim(),
            k: corpus.k(),
            domains: corpus.m(),
            shared_hidden: self.shared_hidden.clone(),
            d_s: self.d_s,
            specific_hidden: self.specific_hidden.clone(),
            d_p: self.d_p,
            classifier_hidden: self.classifier_hidden.clone(),
            keep_prob: self.keep_prob,
        }
    }
}

/// Settings of the feature-alignment diagnostic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticConfig {
    /// Ramp margin used to score disparities.
    pub rho: f64,
    /// Full-batch Adam steps for the probe and for each adversary.
    pub budget: usize,
    /// Samples per domain (subsampled from `L_i ∪ U_i`).
    pub per_domain: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DiagnosticConfig {
    fn default() -> Self {
        Self {
            rho: 4f64.ln(),
            budget: 200,
            per_domain: 200,
            lr: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Evaluate held-out accuracy every this many epochs (the final epoch is
    /// always evaluated); 0 evaluates only the final epoch.
    pub eval_every: usize,
    pub variant: Variant,
    /// Domain whose labels are withheld; it is evaluated with the
    /// domain-specific features zeroed.
    pub msuda_target: Option<usize>,
    /// Fraction of each labeled pool held out for best-on-dev model
    /// selection; 0 keeps the final model.
    pub dev_fraction: f64,
    pub arch: ArchConfig,
    /// Run the alignment diagnostic at the initial and final epoch.
    pub diagnostic: Option<DiagnosticConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 4.0,
            lr: 1e-4,
            batch_size: 8,
            epochs: 50,
            seed: 0,
            eval_every: 1,
            variant: Variant::Mdat,
            msuda_target: None,
            dev_fraction: 0.0,
            arch: ArchConfig::default(),
            diagnostic: None,
        }
    }
}

impl TrainConfig {
    /// Settings of the bundled synthetic benchmark: the default
    /// hyperparameters for 200 epochs on the compact network, with 10% of each
    /// labeled pool held out for model selection and the alignment diagnostic
    /// enabled.
    pub fn benchmark(variant: Variant, seed: u64) -> Self {
        Self {
            epochs: 200,
            seed,
            variant,
            dev_fraction: 0.1,
            arch: ArchConfig::compact(),
            diagnostic: Some(DiagnosticConfig::default()),
            ..Self::default()
        }
    }

    /// `ρ = ln β`.
    pub fn rho(&self) -> f64 {
        self.beta.ln()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.beta >= 1.0 && self.beta.is_finite()) {
            return bad(format!("beta must be >= 1, got {}", self.beta));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return bad(format!("dev_fraction must be in [0, 1), got {}", self.dev_fraction));
        }
        if let Some(d) = &self.diagnostic {
            if d.rho.is_nan() || d.rho <= 0.0 || d.per_domain == 0 || d.lr.is_nan() || d.lr <= 0.0 {
                return bad("diagnostic needs rho > 0, per_domain >= 1, lr > 0".into());
            }
        }
        Ok(())
    }
}

fn clamp_prob(p: f64) -> (f64, bool) {
    if p < PROB_CLAMP {
        (PROB_CLAMP, true)
    } else if p > 1.0 - PROB_CLAMP {
        (1.0 - PROB_CLAMP, true)
    } else {
        (p, false)
    }
}

/// `−log C_y` and its logit gradient. The gradient is 0 where the clamp is
/// active, matching the clamped function.
pub fn cross_entropy_term(logits: &[f64], y: usize) -> (f64, Vec<f64>, bool) {
    let q = softmax(logits);
    let (p, clamped) = clamp_prob(q[y]);
    let grad = if clamped {
        vec![0.0; q.len()]
    } else {
        let mut g = q;
        g[y] -= 1.0;
        g
    };
    (-p.ln(), grad, clamped)
}

/// Per-sample margin term `β·log p + log(1 − p)` with `p = C′_σ(x)` and
/// `σ(x) = argmax` of `C`'s logits. Returns the value, the gradient with
/// respect to `C′`'s logits, the pseudo-label and the clamp flag.
pub fn margin_term(logits_c: &[f64], logits_aux: &[f64], beta: f64) -> (f64, Vec<f64>, usize, bool) {
    let sigma = argmax(logits_c);
    let q = softmax(logits_aux);
    let (p, clamped) = clamp_prob(q[sigma]);
    let value = beta * p.ln() + (1.0 - p).ln();
    let grad = if clamped {
        vec![0.0; q.len()]
    } else {
        // d/dz_j = (β − p/(1−p)) (δ_jσ − q_j)
        let coef = beta - p / (1.0 - p);
        q.iter()
            .enumerate()
            .map(|(j, &qj)| coef * (f64::from(u8::from(j == sigma)) - qj))
            .collect()
    };
    (value, grad, sigma, clamped)
}

/// `‖softmax(C) − softmax(C′)‖₁` with gradients for both logit vectors and
/// the sign pattern (ties take subgradient 0).
pub fn l1_term(logits_c: &[f64], logits_aux: &[f64]) -> (f64, Vec<f64>, Vec<f64>, Vec<i8>) {
    let p = softmax(logits_c);
    let q = softmax(logits_aux);
    let signs: Vec<i8> = p
        .iter()
        .zip(&q)
        .map(|(a, b)| match a.partial_cmp(b) {
            Some(std::cmp::Ordering::Greater) => 1,
            Some(std::cmp::Ordering::Less) => -1,
            _ => 0,
        })
        .collect();
    let value = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum();
    let s: Vec<f64> = signs.iter().map(|&v| f64::from(v)).collect();
    let softmax_back = |probs: &[f64], up: &[f64]| -> Vec<f64> {
        let dot: f64 = probs.iter().zip(up).map(|(a, b)| a * b).sum();
        probs.iter().zip(up).map(|(pj, uj)| pj * (uj - dot)).collect()
    };
    let neg: Vec<f64> = s.iter().map(|v| -v).collect();
    (value, softmax_back(&p, &s), softmax_back(&q, &neg), signs)
}

/// One sample in a batch pass.
#[derive(Debug, Clone)]
struct Slot<'a> {
    domain: usize,
    label: Option<usize>,
    out: ForwardOutput<'a>,
    d_c: Vec<f64>,
    d_aux: Vec<f64>,
}

/// Forward outputs for one minibatch pair plus accumulated logit gradients.
/// Labeled samples come first within each domain; the `J_D` family uses
/// every sample (`B^ℓ_i ∪ B^u_i`), the `J_C` family only labeled ones.
#[derive(Debug, Clone)]
pub struct BatchPass<'a> {
    slots: Vec<Slot<'a>>,
    m: usize,
    discrete: DefaultHasher,
}

impl<'a> BatchPass<'a> {
    /// Forward every sample of `batch` in `mode`. With `labeled_only`, the
    /// unlabeled batches are skipped.
    pub fn forward(
        model: &MdatModel,
        batch: &MiniBatchPair<'a>,
        mode: Mode,
        labeled_only: bool,
        rng: &mut RngState,
    ) -> Result<Self> {
        let mut slots = Vec::new();
        for i in 0..batch.m() {
            for &(x, y) in &batch.labeled[i] {
                slots.push(Self::slot(model, i, x, Some(y), mode, rng)?);
            }
            if !labeled_only {
                for &x in &batch.unlabeled[i] {
                    slots.push(Self::slot(model, i, x, None, mode, rng)?);
                }
            }
        }
        Ok(Self {
            slots,
            m: batch.m(),
            discrete: DefaultHasher::new(),
        })
    }

    fn slot(
        model: &MdatModel,
        domain: usize,
        x: &'a SparseVector,
        label: Option<usize>,
        mode: Mode,
        rng: &mut RngState,
    ) -> Result<Slot<'a>> {
        let out = model.forward(domain, VectorRef::Sparse(x), mode, rng)?;
        let k = out.logits_c.len();
        Ok(Slot {
            domain,
            label,
            out,
            d_c: vec![0.0; k],
            d_aux: vec![0.0; k],
        })
    }

    fn domain_counts(&self, labeled: bool) -> Vec<usize> {
        let mut c = vec![0; self.m];
        for s in &self.slots {
            if !labeled || s.label.is_some() {
                c[s.domain] += 1;
            }
        }
        c
    }

    fn check_finite(value: f64, what: &str, domain: usize) -> Result<()> {
        if value.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("{what} = {value} on a batch of domain {domain}")))
        }
    }

    /// `J_C = Σ_i mean_{B^ℓ_i} −log C_y`; adds `scale·∂J_C/∂logits`.
    pub fn loss_jc(&mut self, scale: f64) -> Result<f64> {
        let counts = self.domain_counts(true);
        let mut per_domain = vec![0.0; self.m];
        for s in &mut self.slots {
            let Some(y) = s.label else { continue };
            let (v, g, clamped) = cross_entropy_term(&s.out.logits_c, y);
            clamped.hash(&mut self.discrete);
            let w = 1.0 / counts[s.domain] as f64;
            per_domain[s.domain] += w * v;
            s.d_c.iter_mut().zip(&g).for_each(|(a, b)| *a += scale * w * b);
        }
        let total: f64 = per_domain.iter().sum();
        for (i, v) in per_domain.iter().enumerate() {
            Self::check_finite(*v, "J_C", i)?;
        }
        Ok(total)
    }

    /// `J_D = Σ_i mean_{B^ℓ_i ∪ B^u_i} [β log C′_σ + log(1 − C′_σ)]`; adds
    /// `scale·∂J_D/∂logits_C′`. No gradient reaches `C`'s logits.
    pub fn loss_jd(&mut self, beta: f64, scale: f64) -> Result<f64> {
        let counts = self.domain_counts(false);
        let mut per_domain = vec![0.0; self.m];
        for s in &mut self.slots {
            let (v, g, sigma, clamped) = margin_term(&s.out.logits_c, &s.out.logits_aux, beta);
            (sigma, clamped).hash(&mut self.discrete);
            let w = 1.0 / counts[s.domain] as f64;
            per_domain[s.domain] += w * v;
            s.d_aux.iter_mut().zip(&g).for_each(|(a, b)| *a += scale * w * b);
        }
        for (i, v) in per_domain.iter().enumerate() {
            Self::check_finite(*v, "J_D", i)?;
        }
        Ok(per_domain.iter().sum())
    }

    /// `J′_C = Σ_i mean_{B^ℓ_i} [−log C_y − log C′_y]`.
    pub fn loss_jc_prime(&mut self, scale: f64) -> Result<f64> {
        let counts = self.domain_counts(true);
        let mut per_domain = vec![0.0; self.m];
        for s in &mut self.slots {
            let Some(y) = s.label else { continue };
            let (vc, gc, cc) = cross_entropy_term(&s.out.logits_c, y);
            let (va, ga, ca) = cross_entropy_term(&s.out.logits_aux, y);
            (cc, ca).hash(&mut self.discrete);
            let w = 1.0 / counts[s.domain] as f64;
            per_domain[s.domain] += w * (vc + va);
            s.d_c.iter_mut().zip(&gc).for_each(|(a, b)| *a += scale * w * b);
            s.d_aux.iter_mut().zip(&ga).for_each(|(a, b)| *a += scale * w * b);
        }
        for (i, v) in per_domain.iter().enumerate() {
            Self::check_finite(*v, "J'_C", i)?;
        }
        Ok(per_domain.iter().sum())
    }

    /// `J′_D = Σ_i mean_{B^ℓ_i ∪ B^u_i} ‖C − C′‖₁` over softmax vectors.
    pub fn loss_jd_prime(&mut self, scale: f64) -> Result<f64> {
        let counts = self.domain_counts(false);
        let mut per_domain = vec![0.0; self.m];
        for s in &mut self.slots {
            let (v, gc, ga, signs) = l1_term(&s.out.logits_c, &s.out.logits_aux);
            signs.hash(&mut self.discrete);
            let w = 1.0 / counts[s.domain] as f64;
            per_domain[s.domain] += w * v;
            s.d_c.iter_mut().zip(&gc).for_each(|(a, b)| *a += scale * w * b);
            s.d_aux.iter_mut().zip(&ga).for_each(|(a, b)| *a += scale * w * b);
        }
        for (i, v) in per_domain.iter().enumerate() {
            Self::check_finite(*v, "J'_D", i)?;
        }
        Ok(per_domain.iter().sum())
    }

    /// Backpropagate the accumulated logit gradients into `grad`.
    pub fn backward(&self, model: &MdatModel, routing: Routing, sign: f64, grad: &mut [f64]) -> Result<()> {
        for s in &self.slots {
            model.backward(&s.out.trace, &s.d_c, &s.d_aux, routing, sign, grad)?;
        }
        Ok(())
    }

    /// Discrete state of the pass: rectifier patterns plus the pseudo-labels,
    /// clamp flags and ℓ1 signs recorded by the losses.
    pub fn signature(&self) -> u64 {
        let mut h = self.discrete.clone();
        for s in &self.slots {
            s.out.trace.activation_pattern(&mut h);
        }
        h.finish()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Adam states for the current variant's update groups.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizers {
    /// Step (a) over `F_s, F_d^i, C`; step (b) over `C′`.
    Mdat { main: AdamState, aux: AdamState },
    /// Step 1 over everything, step 2 over extractors, step 3 over classifiers.
    MdatL1 {
        all: AdamState,
        extractors: AdamState,
        classifiers: AdamState,
    },
}

impl Optimizers {
    pub fn new(model: &MdatModel, variant: Variant, lr: f64) -> Self {
        let lay = model.layout();
        match variant {
            Variant::Mdat => Optimizers::Mdat {
                main: AdamState::new(lay.main().len(), lr),
                aux: AdamState::new(lay.auxiliary.len(), lr),
            },
            Variant::MdatL1 => Optimizers::MdatL1 {
                all: AdamState::new(lay.total(), lr),
                extractors: AdamState::new(lay.extractors().len(), lr),
                classifiers: AdamState::new(lay.classifiers().len(), lr),
            },
        }
    }
}

/// Loss values seen by one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    pub jc: f64,
    pub jd: f64,
}

fn apply(model: &mut MdatModel, grad: &[f64], range: Range<usize>, state: &mut AdamState) -> Result<()> {
    adam_step(&mut model.params[range.clone()], &grad[range], state)
}

fn mismatched() -> Error {
    Error::Usage("optimizer set does not match the variant".into())
}

/// Algorithm sub-step (a): descend `J_C + α·J_D` on `F_s`, `F_d^i`, `C`.
pub fn mdat_update_main(
    model: &mut MdatModel,
    batch: &MiniBatchPair<'_>,
    cfg: &TrainConfig,
    opt: &mut Optimizers,
    rng: &mut RngState,
) -> Result<StepStats> {
    let Optimizers::Mdat { main, .. } = opt else { return Err(mismatched()) };
    let mut pass = BatchPass::forward(model, batch, Mode::Train, false, rng)?;
    let jc = pass.loss_jc(1.0)?;
    let jd = pass.loss_jd(cfg.beta, cfg.alpha)?;
    let mut grad = vec![0.0; model.n_params()];
    pass.backward(model, Routing::MAIN, 1.0, &mut grad)?;
    let range = model.layout().main();
    apply(model, &grad, range, main)?;
    Ok(StepStats { jc, jd })
}

/// Algorithm sub-step (b): fresh forward, ascend `J_D` on `C′`.
pub fn mdat_update_aux(
    model: &mut MdatModel,
    batch: &MiniBatchPair<'_>,
    cfg: &TrainConfig,
    opt: &mut Optimizers,
    rng: &mut RngState,
) -> Result<f64> {
    let Optimizers::Mdat { aux, .. } = opt else { return Err(mismatched()) };
    let mut pass = BatchPass::forward(model, batch, Mode::Train, false, rng)?;
    let jd = pass.loss_jd(cfg.beta, 1.0)?;
    let mut grad = vec![0.0; model.n_params()];
    pass.backward(model, Routing::AUX, -1.0, &mut grad)?;
    let range = model.layout().auxiliary.clone();
    apply(model, &grad, range, aux)?;
    Ok(jd)
}

/// Both sub-steps of one iteration, each with its own dropout stream.
pub fn mdat_step(
    model: &mut MdatModel,
    batch: &MiniBatchPair<'_>,
    cfg: &TrainConfig,
    opt: &mut Optimizers,
    rng: &RngState,
) -> Result<StepStats> {
    let stats = mdat_update_main(model, batch, cfg, opt, &mut rng.child(0))?;
    mdat_update_aux(model, batch, cfg, opt, &mut rng.child(1))?;
    Ok(stats)
}

/// Ablation step 1: descend `J′_C` (labeled data) on every component.
pub fn ablation_step1(model: &mut MdatModel, batch: &MiniBatchPair<'_>, opt: &mut Optimizers, rng: &mut RngState) -> Result<f64> {
    let Optimizers::MdatL1 { all, .. } = opt else { return Err(mismatched()) };
    let mut pass = BatchPass::forward(model, batch, Mode::Train, true, rng)?;
    let jc = pass.loss_jc_prime(1.0)?;
    let mut grad = vec![0.0; model.n_params()];
    pass.backward(model, Routing::ALL, 1.0, &mut grad)?;
    let range = 0..model.n_params();
    apply(model, &grad, range, all)?;
    Ok(jc)
}

/// Ablation step 2: descend `J′_C + α·J′_D` on the extractors only.
pub fn ablation_step2(
    model: &mut MdatModel,
    batch: &MiniBatchPair<'_>,
    cfg: &TrainConfig,
    opt: &mut Optimizers,
    rng: &mut RngState,
) -> Result<StepStats> {
    let Optimizers::MdatL1 { extractors, .. } = opt else { return Err(mismatched()) };
    let mut pass = BatchPass::forward(model, batch, Mode::Train, false, rng)?;
    let jc = pass.loss_jc_prime(1.0)?;
    let jd = pass.loss_jd_prime(cfg.alpha)?;
    let mut grad = vec![0.0; model.n_params()];
    pass.backward(model, Routing::EXTRACTORS, 1.0, &mut grad)?;
    let range = model.layout().extractors();
    apply(model, &grad, range, extractors)?;
    Ok(StepStats { jc, jd })
}

/// Ablation step 3: ascend `J′_D` on both classifiers only.
pub fn ablation_step3(model: &mut MdatModel, batch: &MiniBatchPair<'_>, opt: &mut Optimizers, rng: &mut RngState) -> Result<f64> {
    let Optimizers::MdatL1 { classifiers, .. } = opt else { return Err(mismatched()) };
    let mut pass = BatchPass::forward(model, batch, Mode::Train, false, rng)?;
    let jd = pass.loss_jd_prime(1.0)?;
    let mut grad = vec![0.0; model.n_params()];
    pass.backward(model, Routing::CLASSIFIERS, -1.0, &mut grad)?;
    let range = model.layout().classifiers();
    apply(model, &grad, range, classifiers)?;
    Ok(jd)
}

/// The three ablation steps of one iteration.
pub fn ablation_step(
    model: &mut MdatModel,
    batch: &MiniBatchPair<'_>,
    cfg: &TrainConfig,
    opt: &mut Optimizers,
    rng: &RngState,
) -> Result<StepStats> {
    ablation_step1(model, batch, opt, &mut rng.child(0))?;
    let stats = ablation_step2(model, batch, cfg, opt, &mut rng.child(1))?;
    ablation_step3(model, batch, opt, &mut rng.child(2))?;
    Ok(stats)
}

/// Per-domain and average accuracy of `C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_domain: Vec<f64>,
    pub average: f64,
}

/// Accuracy of `C`'s argmax per domain. The `msuda_target` domain is
/// scored with the domain-specific features zeroed.
pub fn evaluate(model: &MdatModel, test: &[Vec<LabeledSample>], msuda_target: Option<usize>) -> Result<EvalResult> {
    if test.len() != model.arch().domains {
        return Err(Error::Shape(format!(
            "{} test sets for {} domains",
            test.len(),
            model.arch().domains
        )));
    }
    let mut rng = RngState::new(0);
    let mut per_domain = Vec::with_capacity(test.len());
    for (i, samples) in test.iter().enumerate() {
        if samples.is_empty() {
            return Err(Error::Config(format!("test split of domain {i} is empty")));
        }
        let mut correct = 0usize;
        for (x, y) in samples {
            let out = if msuda_target == Some(i) {
                model.forward_msuda(x.into(), Mode::Eval, &mut rng)?
            } else {
                model.forward(i, x.into(), Mode::Eval, &mut rng)?
            };
            correct += usize::from(argmax(&out.logits_c) == *y);
        }
        per_domain.push(correct as f64 / samples.len() as f64);
    }
    let average = per_domain.iter().sum::<f64>() / per_domain.len() as f64;
    Ok(EvalResult { per_domain, average })
}

/// Linear softmax probe `W·φ + b` over `n × d` row-major features.
#[derive(Debug, Clone)]
struct LinearProbe {
    d: usize,
    k: usize,
    params: Vec<f64>,
}

impl LinearProbe {
    fn zeros(d: usize, k: usize) -> Self {
        Self {
            d,
            k,
            params: vec![0.0; k * d + k],
        }
    }

    fn scores(&self, feats: &[f64]) -> Vec<f64> {
        let n = feats.len() / self.d;
        let mut out = vec![0.0; n * self.k];
        for i in 0..n {
            let x = &feats[i * self.d..(i + 1) * self.d];
            for c in 0..self.k {
                let w = &self.params[c * self.d..(c + 1) * self.d];
                out[i * self.k + c] = self.params[self.k * self.d + c] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        out
    }

    /// Accumulate the gradient for per-sample logit gradients `g` (n × k).
    fn backward(&self, feats: &[f64], g: &[f64], grad: &mut [f64]) {
        let n = feats.len() / self.d;
        for i in 0..n {
            let x = &feats[i * self.d..(i + 1) * self.d];
            for c in 0..self.k {
                let gc = g[i * self.k + c];
                if gc == 0.0 {
                    continue;
                }
                grad[self.k * self.d + c] += gc;
                for (gw, xv) in grad[c * self.d..(c + 1) * self.d].iter_mut().zip(x) {
                    *gw += gc * xv;
                }
            }
        }
    }
}

/// Shared features of a subsample of every domain, scaled to unit RMS norm
/// over the pooled set.
struct DiagnosticFeatures {
    d: usize,
    feats: Vec<f64>,
    domain: Vec<usize>,
    labels: Vec<Option<usize>>,
}

fn diagnostic_features(model: &MdatModel, corpus: &MultiDomainCorpus, cfg: &DiagnosticConfig) -> Result<DiagnosticFeatures> {
    let d = model.arch().d_s;
    let mut feats = Vec::new();
    let mut domain = Vec::new();
    let mut labels = Vec::new();
    for (i, ds) in corpus.domains().iter().enumerate() {
        // Same selection stream for every domain: identical pools give
        // identical subsamples.
        let mut idx = RngState::new(cfg.seed).child_named("diagnostic-subsample").permutation(ds.n());
        idx.truncate(cfg.per_domain);
        idx.sort_unstable();
        for j in idx {
            feats.extend(model.shared_features(ds.pooled(j).into())?);
            domain.push(i);
            labels.push((j < ds.l()).then(|| ds.labeled[j].1));
        }
    }
    let n = domain.len();
    let rms = (feats.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
    if rms > 0.0 {
        feats.iter_mut().for_each(|v| *v /= rms);
    }
    Ok(DiagnosticFeatures { d, feats, domain, labels })
}

/// Margin-discrepancy estimate between each domain's shared-feature
/// distribution and the pooled features of the other domains.
///
/// A linear probe `f` is trained on the labeled features (cross-entropy,
/// `budget` full-batch Adam steps). For each domain `i`, an adversary `f′`
/// starts at `f` and ascends `mean_i log p′ + mean_{others} log(1 − p′)` at
/// `f`'s pseudo-labels; the reported value is the largest exact ramp
/// difference `disp_{others}(f, f′) − disp_i(f, f′)` seen along the way.
/// Against the full centroid (which contains domain `i`) the value would be
/// scaled by `(M−1)/M`. With `budget = 0` the probe is untrained and the
/// estimate is uninformative.
pub fn alignment_diagnostic(model: &MdatModel, corpus: &MultiDomainCorpus, cfg: &DiagnosticConfig) -> Result<Vec<f64>> {
    let m = corpus.m();
    if m < 2 {
        return Ok(vec![0.0; m]);
    }
    let df = diagnostic_features(model, corpus, cfg)?;
    let k = corpus.k();
    let n = df.domain.len();

    let mut probe = LinearProbe::zeros(df.d, k);
    let labeled: Vec<usize> = (0..n).filter(|&i| df.labels[i].is_some()).collect();
    if !labeled.is_empty() {
        let mut state = AdamState::new(probe.params.len(), cfg.lr);
        for _ in 0..cfg.budget {
            let scores = probe.scores(&df.feats);
            let mut g = vec![0.0; n * k];
            for &i in &labeled {
                let (_, gi, _) = cross_entropy_term(&scores[i * k..(i + 1) * k], df.labels[i].unwrap_or(0));
                for (a, b) in g[i * k..(i + 1) * k].iter_mut().zip(gi) {
                    *a = b / labeled.len() as f64;
                }
            }
            let mut grad = vec![0.0; probe.params.len()];
            probe.backward(&df.feats, &g, &mut grad);
            adam_step(&mut probe.params, &grad, &mut state)?;
        }
    }
    let pseudo: Vec<usize> = probe.scores(&df.feats).chunks(k).map(argmax).collect();

    let mut out = Vec::with_capacity(m);
    for target in 0..m {
        let own: Vec<usize> = (0..n).filter(|&j| df.domain[j] == target).collect();
        let others: Vec<usize> = (0..n).filter(|&j| df.domain[j] != target).collect();
        let value_of = |adv: &LinearProbe| -> Result<f64> {
            let table = ScoreTable::new(n, k, adv.scores(&df.feats), None)?;
            Ok(ramp_margin_mean(&table, &pseudo, &others, cfg.rho)? - ramp_margin_mean(&table, &pseudo, &own, cfg.rho)?)
        };
        let mut adv = probe.clone();
        let mut best = value_of(&adv)?;
        let mut state = AdamState::new(adv.params.len(), cfg.lr);
        for _ in 0..cfg.budget {
            let scores = adv.scores(&df.feats);
            let mut g = vec![0.0; n * k];
            for (set, own_side) in [(&own, true), (&others, false)] {
                let w = 1.0 / set.len() as f64;
                for &j in set.iter() {
                    let q = softmax(&scores[j * k..(j + 1) * k]);
                    let (p, clamped) = clamp_prob(q[pseudo[j]]);
                    if clamped {
                        continue;
                    }
                    // descend −(log p) on own samples, −log(1 − p) on the others
                    let coef = if own_side { -1.0 } else { p / (1.0 - p) };
                    for c in 0..k {
                        let delta = f64::from(u8::from(c == pseudo[j]));
                        g[j * k + c] = w * coef * (delta - q[c]);
                    }
                }
            }
            let mut grad = vec![0.0; adv.params.len()];
            adv.backward(&df.feats, &g, &mut grad);
            adam_step(&mut adv.params, &grad, &mut state)?;
            best = best.max(value_of(&adv)?);
        }
        out.push(best);
    }
    Ok(out)
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// 0 is the initialized model before any update.
    pub epoch: usize,
    /// Held-out accuracy of `C` per domain, when evaluated this epoch.
    pub accuracy: Option<Vec<f64>>,
    pub average_accuracy: Option<f64>,
    /// Mean over the epoch's iterations (absent at epoch 0).
    pub jc: Option<f64>,
    pub jd: Option<f64>,
    pub dev_accuracy: Option<f64>,
    /// Alignment diagnostic per domain, when computed this epoch.
    pub discrepancy: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MdatModel,
    pub reports: Vec<EpochReport>,
    /// Epoch whose parameters were kept (the last unless dev selection is on).
    pub selected_epoch: usize,
}

fn split_dev(corpus: &MultiDomainCorpus, fraction: f64, seed: u64) -> Result<(MultiDomainCorpus, Vec<Vec<LabeledSample>>)> {
    let mut train = Vec::new();
    let mut dev = Vec::new();
    for d in corpus.domains() {
        let n_dev = ((d.l() as f64) * fraction).round() as usize;
        let perm = RngState::new(seed).child_named("dev").child_named(&d.name).permutation(d.l());
        let mut t = DomainDataset::new(d.name.clone());
        let mut v = Vec::new();
        for (pos, &j) in perm.iter().enumerate() {
            if pos < n_dev {
                v.push(d.labeled[j].clone());
            } else {
                t.labeled.push(d.labeled[j].clone());
            }
        }
        t.unlabeled = d.unlabeled.clone();
        train.push(t);
        dev.push(v);
    }
    Ok((MultiDomainCorpus::new(train, corpus.vocab_dim(), corpus.k())?, dev))
}

/// Train a freshly initialized model. `test` (one labeled set per domain)
/// is evaluated at the configured cadence.
pub fn train(corpus: &MultiDomainCorpus, test: Option<&[Vec<LabeledSample>]>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = MdatModel::init(cfg.arch.for_corpus(corpus), cfg.seed)?;
    train_from(model, corpus, test, cfg)
}

/// Train starting from `model`.
pub fn train_from(
    mut model: MdatModel,
    corpus: &MultiDomainCorpus,
    test: Option<&[Vec<LabeledSample>]>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(t) = cfg.msuda_target {
        if t >= corpus.m() {
            return Err(Error::Config(format!("target domain {t} >= M = {}", corpus.m())));
        }
    }
    let root = RngState::new(cfg.seed);
    let (fit, dev) = if cfg.dev_fraction > 0.0 {
        let (c, d) = split_dev(corpus, cfg.dev_fraction, cfg.seed)?;
        (c, Some(d))
    } else {
        (corpus.clone(), None)
    };
    let fit = match cfg.msuda_target {
        Some(t) => fit.without_labels_for(t),
        None => fit,
    };
    let sampler_rng = root.child_named("sampler");
    let mut sampler = if cfg.msuda_target.is_some() {
        MinibatchSampler::allowing_unlabeled_domains(&fit, cfg.batch_size, &sampler_rng)?
    } else {
        MinibatchSampler::new(&fit, cfg.batch_size, &sampler_rng)?
    };
    let mut opt = Optimizers::new(&model, cfg.variant, cfg.lr);
    let dropout = root.child_named("dropout");

    let evaluate_at = |epoch: usize| epoch == cfg.epochs || (cfg.eval_every > 0 && epoch.is_multiple_of(cfg.eval_every));
    let dev_score = |model: &MdatModel| -> Result<Option<f64>> {
        match &dev {
            Some(d) if d.iter().all(|v| !v.is_empty()) => {
                // the target's labels are hidden during training; skip it
                let scores = evaluate(model, d, cfg.msuda_target)?;
                let kept: Vec<f64> = scores
                    .per_domain
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| Some(*i) != cfg.msuda_target)
                    .map(|(_, v)| *v)
                    .collect();
                Ok(Some(kept.iter().sum::<f64>() / kept.len().max(1) as f64))
            }
            _ => Ok(None),
        }
    };
    let report = |model: &MdatModel, epoch: usize, jc: Option<f64>, jd: Option<f64>| -> Result<EpochReport> {
        let eval = match (test, evaluate_at(epoch)) {
            (Some(t), true) => Some(evaluate(model, t, cfg.msuda_target)?),
            _ => None,
        };
        let discrepancy = match &cfg.diagnostic {
            Some(d) if epoch == 0 || epoch == cfg.epochs => Some(alignment_diagnostic(model, corpus, d)?),
            _ => None,
        };
        Ok(EpochReport {
            epoch,
            average_accuracy: eval.as_ref().map(|e| e.average),
            accuracy: eval.map(|e| e.per_domain),
            jc,
            jd,
            dev_accuracy: dev_score(model)?,
            discrepancy,
        })
    };

    let mut reports = vec![report(&model, 0, None, None)?];
    let mut best: Option<(f64, usize, Vec<f64>)> = reports[0].dev_accuracy.map(|a| (a, 0, model.params.clone()));
    let started = Instant::now();
    let mut iteration: u64 = 0;
    for epoch in 1..=cfg.epochs {
        let mut jc_sum = 0.0;
        let mut jd_sum = 0.0;
        let iters = sampler.iters_per_epoch();
        for _ in 0..iters {
            let batch = sampler.next_batch();
            let step_rng = dropout.child(iteration);
            iteration += 1;
            let stats = match cfg.variant {
                Variant::Mdat => mdat_step(&mut model, &batch, cfg, &mut opt, &step_rng)?,
                Variant::MdatL1 => ablation_step(&mut model, &batch, cfg, &mut opt, &step_rng)?,
            };
            jc_sum += stats.jc;
            jd_sum += stats.jd;
        }
        let r = report(&model, epoch, Some(jc_sum / iters as f64), Some(jd_sum / iters as f64))?;
        log::debug!(
            "epoch {epoch}: jc {:.4} jd {:.4} avg acc {:?} ({:.1?} elapsed)",
            jc_sum / iters as f64,
            jd_sum / iters as f64,
            r.average_accuracy,
            started.elapsed()
        );
        if let Some(a) = r.dev_accuracy {
            if best.as_ref().is_none_or(|(b, _, _)| a > *b) {
                best = Some((a, epoch, model.params.clone()));
            }
        }
        reports.push(r);
    }
    log::info!("trained {} epochs in {:.1?}", cfg.epochs, started.elapsed());
    let selected_epoch = match best {
        Some((_, epoch, params)) => {
            model.params = params;
            epoch
        }
        None => cfg.epochs,
    };
    Ok(TrainOutcome {
        model,
        reports,
        selected_epoch,
    })
}

/// Per-fold accuracies and their mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossvalReport {
    pub domains: Vec<String>,
    /// `folds × M` accuracies of the selected model.
    pub fold_accuracy: Vec<Vec<f64>>,
    pub fold_average: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub mean_average: f64,
    pub std_average: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// k-fold cross-validation over every domain's labeled pool.
pub fn crossval(corpus: &MultiDomainCorpus, folds: usize, cfg: &TrainConfig) -> Result<CrossvalReport> {
    crossval_with_workers(corpus, folds, cfg, 1)
}

/// [`crossval`] with folds trained on up to `workers` threads. Results are
/// merged by fold index, so the report does not depend on `workers`.
pub fn crossval_with_workers(
    corpus: &MultiDomainCorpus,
    folds: usize,
    cfg: &TrainConfig,
    workers: usize,
) -> Result<CrossvalReport> {
    let splits = kfold_corpus(corpus, folds, cfg.seed)?;
    let fold_cfg = TrainConfig {
        eval_every: 0,
        diagnostic: None,
        ..cfg.clone()
    };
    let run_fold = |f: usize| -> Result<Vec<f64>> {
        let (train_corpus, test) = &splits[f];
        let outcome = train(train_corpus, Some(test), &fold_cfg)?;
        let eval = evaluate(&outcome.model, test, cfg.msuda_target)?;
        log::info!("fold {f}: average accuracy {:.4}", eval.average);
        Ok(eval.per_domain)
    };
    let workers = workers.clamp(1, splits.len().max(1));
    let mut results: Vec<Option<Result<Vec<f64>>>> = (0..splits.len()).map(|_| None).collect();
    if workers == 1 {
        for (f, slot) in results.iter_mut().enumerate() {
            *slot = Some(run_fold(f));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let done = std::sync::Mutex::new(&mut results);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let f = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if f >= splits.len() {
                        break;
                    }
                    let r = run_fold(f);
                    done.lock().expect("fold result lock")[f] = Some(r);
                });
            }
        });
    }
    let fold_accuracy = results
        .into_iter()
        .map(|r| r.expect("every fold ran"))
        .collect::<Result<Vec<_>>>()?;
    let m = corpus.m();
    let fold_average: Vec<f64> = fold_accuracy.iter().map(|r| r.iter().sum::<f64>() / m as f64).collect();
    let (mean, std): (Vec<f64>, Vec<f64>) = (0..m)
        .map(|i| mean_std(&fold_accuracy.iter().map(|r| r[i]).collect::<Vec<_>>()))
        .unzip();
    let (mean_average, std_average) = mean_std(&fold_average);
    Ok(CrossvalReport {
        domains: corpus.domains().iter().map(|d| d.name.clone()).collect(),
        fold_accuracy,
        fold_average,
        mean,
        std,
        mean_average,
        std_average,
    })
}

/// Losses available to the gradient checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LossKind {
    #[serde(rename = "J_C")]
    Jc,
    #[serde(rename = "J_D")]
    Jd,
    #[serde(rename = "J'_C")]
    JcPrime,
    #[serde(rename = "J'_D")]
    JdPrime,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Jc, LossKind::Jd, LossKind::JcPrime, LossKind::JdPrime];

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Jc => "J_C",
            LossKind::Jd => "J_D",
            LossKind::JcPrime => "J'_C",
            LossKind::JdPrime => "J'_D",
        }
    }
}

/// A loss on a fixed batch as a function of all parameters, with dropout
/// masks frozen by re-seeding the mask stream on every evaluation.
pub struct LossObjective<'a> {
    pub model: &'a MdatModel,
    pub batch: &'a MiniBatchPair<'a>,
    pub loss: LossKind,
    pub beta: f64,
    pub mode: Mode,
    pub mask_seed: u64,
}

impl Objective for LossObjective<'_> {
    fn eval(&self, params: &[f64], grad: Option<&mut [f64]>) -> Result<(f64, u64)> {
        let mut model = self.model.clone();
        model.params.copy_from_slice(params);
        let mut rng = RngState::new(self.mask_seed);
        let labeled_only = matches!(self.loss, LossKind::Jc | LossKind::JcPrime);
        let mut pass = BatchPass::forward(&model, self.batch, self.mode, labeled_only, &mut rng)?;
        let value = match self.loss {
            LossKind::Jc => pass.loss_jc(1.0)?,
            LossKind::Jd => pass.loss_jd(self.beta, 1.0)?,
            LossKind::JcPrime => pass.loss_jc_prime(1.0)?,
            LossKind::JdPrime => pass.loss_jd_prime(1.0)?,
        };
        if let Some(g) = grad {
            pass.backward(&model, Routing::ALL, 1.0, g)?;
        }
        Ok((value, pass.signature()))
    }
}

/// Gradient-check every loss on `batch` in train mode with frozen masks.
pub fn grad_check_losses(
    model: &MdatModel,
    batch: &MiniBatchPair<'_>,
    beta: f64,
    cfg: &GradCheckConfig,
) -> Result<Vec<(LossKind, GradCheckReport)>> {
    let components = model.layout().components();
    LossKind::ALL
        .iter()
        .map(|&loss| {
            let obj = LossObjective {
                model,
                batch,
                loss,
                beta,
                mode: Mode::Train,
                mask_seed: cfg.seed,
            };
            Ok((loss, grad_check(&obj, &model.params, &components, cfg)?))
        })
        .collect()
}
