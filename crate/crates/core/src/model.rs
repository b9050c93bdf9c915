//! Shared-private network: shared extractor `F_s`, per-domain extractors
//! `F_d^i`, main classifier `C` and auxiliary classifier `C′`, with
//! hand-written forward/backward passes, checkpoints and a central-difference
//! gradient checker.
//!
//! All parameters live in one flat vector ordered `F_s, F_d^1..F_d^M, C, C′`.
//! Within a component, each affine layer stores its weight matrix
//! (row-major, `out × in`) followed by its bias.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::Write as _;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{affine_backward, affine_forward_into, bernoulli_mask, RngState, VectorRef};

/// A rectifier MLP: `dims = [input, hidden.., output]`, linear output layer,
/// inverted dropout after each hidden rectifier in train mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub dims: Vec<usize>,
    pub keep_prob: f64,
}

#[derive(Debug, Clone, Copy)]
struct LayerShape {
    rows: usize,
    cols: usize,
    offset: usize,
}

impl LayerShape {
    fn weights(&self) -> Range<usize> {
        self.offset..self.offset + self.rows * self.cols
    }

    fn end(&self) -> usize {
        self.offset + self.rows * self.cols + self.rows
    }
}

impl MlpSpec {
    pub fn new(dims: Vec<usize>, keep_prob: f64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        }
        if dims.contains(&0) {
            return Err(Error::Config(format!("MLP dims must be positive: {dims:?}")));
        }
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::Config(format!("keep_prob must be in (0, 1], got {keep_prob}")));
        }
        Ok(Self { dims, keep_prob })
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    pub fn n_params(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn layers(&self) -> Vec<LayerShape> {
        let mut offset = 0;
        self.dims
            .windows(2)
            .map(|w| {
                let s = LayerShape {
                    rows: w[1],
                    cols: w[0],
                    offset,
                };
                offset = s.end();
                s
            })
            .collect()
    }
}

/// Cached intermediates of one MLP evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpTrace {
    /// Pre-activations of each hidden layer.
    pub pre: Vec<Vec<f64>>,
    /// Post-rectifier, post-dropout activations of each hidden layer.
    pub hidden: Vec<Vec<f64>>,
    /// Inverted-dropout masks (absent in eval mode).
    pub masks: Vec<Option<Vec<f64>>>,
}

fn mlp_forward(
    spec: &MlpSpec,
    params: &[f64],
    x: VectorRef<'_>,
    mut dropout: Option<&mut RngState>,
) -> Result<(Vec<f64>, MlpTrace)> {
    let layers = spec.layers();
    let mut trace = MlpTrace {
        pre: Vec::with_capacity(layers.len() - 1),
        hidden: Vec::with_capacity(layers.len() - 1),
        masks: Vec::with_capacity(layers.len() - 1),
    };
    let mut out = Vec::new();
    for (l, sh) in layers.iter().enumerate() {
        let input = if l == 0 {
            x
        } else {
            VectorRef::Dense(&trace.hidden[l - 1])
        };
        let mut z = vec![0.0; sh.rows];
        affine_forward_into(
            &params[sh.weights()],
            sh.rows,
            sh.cols,
            &params[sh.weights().end..sh.end()],
            input,
            &mut z,
        )?;
        if l + 1 == layers.len() {
            out = z;
        } else {
            let mut a: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
            let mask = match dropout.as_deref_mut() {
                Some(rng) if spec.keep_prob < 1.0 => {
                    let m = bernoulli_mask(rng, sh.rows, spec.keep_prob)?;
                    a.iter_mut().zip(&m).for_each(|(v, s)| *v *= s);
                    Some(m)
                }
                _ => None,
            };
            trace.pre.push(z);
            trace.hidden.push(a);
            trace.masks.push(mask);
        }
    }
    Ok((out, trace))
}

/// Reverse pass; accumulates into `grad_params` (this MLP's slice) and
/// writes the input gradient into `grad_input` when requested.
fn mlp_backward(
    spec: &MlpSpec,
    params: &[f64],
    x: VectorRef<'_>,
    trace: &MlpTrace,
    grad_out: &[f64],
    mut grad_params: Option<&mut [f64]>,
    grad_input: Option<&mut [f64]>,
) {
    let layers = spec.layers();
    let mut g = grad_out.to_vec();
    let mut grad_input = grad_input;
    for l in (0..layers.len()).rev() {
        let sh = layers[l];
        let input = if l == 0 {
            x
        } else {
            VectorRef::Dense(&trace.hidden[l - 1])
        };
        let need_gx = l > 0 || grad_input.is_some();
        let mut gx = vec![0.0; if need_gx { sh.cols } else { 0 }];
        let wb = grad_params.as_deref_mut().map(|gp| {
            let (w, b) = gp[sh.offset..sh.end()].split_at_mut(sh.rows * sh.cols);
            (w, b)
        });
        affine_backward(
            &params[sh.weights()],
            sh.rows,
            sh.cols,
            input,
            &g,
            wb,
            need_gx.then_some(&mut gx[..]),
        );
        if l > 0 {
            let pre = &trace.pre[l - 1];
            let mask = trace.masks[l - 1].as_deref();
            for (j, v) in gx.iter_mut().enumerate() {
                // rectifier subgradient at 0 is 0
                let d = if pre[j] > 0.0 { mask.map_or(1.0, |m| m[j]) } else { 0.0 };
                *v *= d;
            }
            g = gx;
        } else if let Some(gi) = grad_input.take() {
            gi.copy_from_slice(&gx);
        }
    }
}

/// Network shape. Extractors map `input_dim` through their hidden layers to
/// `d_s` (shared) or `d_p` (domain-specific); both classifiers map the
/// `d_s + d_p` concatenation through `classifier_hidden` to `k` logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub k: usize,
    pub domains: usize,
    pub shared_hidden: Vec<usize>,
    pub d_s: usize,
    pub specific_hidden: Vec<usize>,
    pub d_p: usize,
    pub classifier_hidden: Vec<usize>,
    pub keep_prob: f64,
}

impl Architecture {
    /// The bag-of-features configuration: two-hidden-layer extractors
    /// `input → 1000 → 500`, `d_s = 128`, `d_p = 64`, classifiers with one
    /// hidden layer as wide as their input, dropout keep 0.6.
    pub fn standard(input_dim: usize, domains: usize, k: usize) -> Self {
        Self {
            input_dim,
            k,
            domains,
            shared_hidden: vec![1000, 500],
            d_s: 128,
            specific_hidden: vec![1000, 500],
            d_p: 64,
            classifier_hidden: vec![192],
            keep_prob: 0.6,
        }
    }

    pub fn shared_spec(&self) -> MlpSpec {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.shared_hidden);
        dims.push(self.d_s);
        MlpSpec {
            dims,
            keep_prob: self.keep_prob,
        }
    }

    pub fn specific_spec(&self) -> MlpSpec {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.specific_hidden);
        dims.push(self.d_p);
        MlpSpec {
            dims,
            keep_prob: self.keep_prob,
        }
    }

    pub fn classifier_spec(&self) -> MlpSpec {
        let mut dims = vec![self.feature_dim()];
        dims.extend(&self.classifier_hidden);
        dims.push(self.k);
        MlpSpec {
            dims,
            keep_prob: self.keep_prob,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.d_s + self.d_p
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains == 0 {
            return Err(Error::Config("need at least one domain".into()));
        }
        if self.k < 2 {
            return Err(Error::Config(format!("k must be >= 2, got {}", self.k)));
        }
        MlpSpec::new(self.shared_spec().dims, self.keep_prob)?;
        MlpSpec::new(self.specific_spec().dims, self.keep_prob)?;
        MlpSpec::new(self.classifier_spec().dims, self.keep_prob)?;
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        let s = self.shared_spec().n_params();
        let p = self.specific_spec().n_params();
        let c = self.classifier_spec().n_params();
        let spec_start = s;
        let clf_start = s + self.domains * p;
        Layout {
            shared: 0..s,
            specific: (0..self.domains)
                .map(|i| spec_start + i * p..spec_start + (i + 1) * p)
                .collect(),
            classifier: clf_start..clf_start + c,
            auxiliary: clf_start + c..clf_start + 2 * c,
        }
    }
}

/// Parameter ranges of each component in the flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub shared: Range<usize>,
    pub specific: Vec<Range<usize>>,
    pub classifier: Range<usize>,
    pub auxiliary: Range<usize>,
}

impl Layout {
    pub fn total(&self) -> usize {
        self.auxiliary.end
    }

    /// `F_s` and every `F_d^i`.
    pub fn extractors(&self) -> Range<usize> {
        0..self.classifier.start
    }

    /// `C` and `C′`.
    pub fn classifiers(&self) -> Range<usize> {
        self.classifier.start..self.auxiliary.end
    }

    /// Everything except `C′`.
    pub fn main(&self) -> Range<usize> {
        0..self.auxiliary.start
    }

    /// Named component ranges, in storage order.
    pub fn components(&self) -> Vec<(String, Range<usize>)> {
        let mut out = vec![("shared".to_string(), self.shared.clone())];
        for (i, r) in self.specific.iter().enumerate() {
            out.push((format!("specific{i}"), r.clone()));
        }
        out.push(("classifier".to_string(), self.classifier.clone()));
        out.push(("auxiliary".to_string(), self.auxiliary.clone()));
        out
    }
}

/// Which components accumulate parameter gradients in a backward pass.
/// Gradients still flow through non-routed components to reach routed ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Routing {
    pub shared: bool,
    pub specific: bool,
    pub classifier: bool,
    pub auxiliary: bool,
}

impl Routing {
    pub const ALL: Routing = Routing {
        shared: true,
        specific: true,
        classifier: true,
        auxiliary: true,
    };
    /// `F_s`, `F_d^i` and `C`.
    pub const MAIN: Routing = Routing {
        auxiliary: false,
        ..Routing::ALL
    };
    pub const AUX: Routing = Routing {
        shared: false,
        specific: false,
        classifier: false,
        auxiliary: true,
    };
    pub const EXTRACTORS: Routing = Routing {
        shared: true,
        specific: true,
        classifier: false,
        auxiliary: false,
    };
    pub const CLASSIFIERS: Routing = Routing {
        shared: false,
        specific: false,
        classifier: true,
        auxiliary: true,
    };

    fn any_extractor(&self) -> bool {
        self.shared || self.specific
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything needed to backpropagate one sample.
#[derive(Debug, Clone)]
pub struct SampleTrace<'a> {
    pub x: VectorRef<'a>,
    /// `None` when the domain-specific half was zeroed.
    pub domain: Option<usize>,
    pub shared: MlpTrace,
    pub specific: Option<MlpTrace>,
    /// `[F_s(x), F_d^i(x)]`.
    pub features: Vec<f64>,
    pub classifier: MlpTrace,
    pub auxiliary: MlpTrace,
}

impl SampleTrace<'_> {
    /// Input of `C`'s output layer: its last hidden activation, or the
    /// features when `C` has no hidden layer.
    pub fn classifier_penultimate(&self) -> &[f64] {
        self.classifier.hidden.last().unwrap_or(&self.features)
    }

    /// Hash of the rectifier on/off pattern of every hidden unit; a change
    /// between nearby parameter values marks a kink.
    pub fn activation_pattern(&self, hasher: &mut impl Hasher) {
        let mut feed = |t: &MlpTrace| {
            for layer in &t.pre {
                for &z in layer {
                    (z > 0.0).hash(hasher);
                }
            }
        };
        feed(&self.shared);
        if let Some(s) = &self.specific {
            feed(s);
        }
        feed(&self.classifier);
        feed(&self.auxiliary);
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<'a> {
    pub logits_c: Vec<f64>,
    pub logits_aux: Vec<f64>,
    pub trace: SampleTrace<'a>,
}

/// Model parameters plus architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct MdatModel {
    arch: Architecture,
    layout: Layout,
    pub params: Vec<f64>,
    seed: u64,
    /// Test hook: perturbs classifier gradients so gradient checks fail.
    #[doc(hidden)]
    pub corrupt_backward: bool,
}

impl MdatModel {
    /// All-zero parameters.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        Ok(Self {
            params: vec![0.0; layout.total()],
            arch,
            layout,
            seed: 0,
            corrupt_backward: false,
        })
    }

    /// Glorot-uniform weights, zero biases; each component draws from its
    /// own child stream of `seed`.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(arch)?;
        model.seed = seed;
        model.init_params(&RngState::new(seed));
        Ok(model)
    }

    /// Re-draw every parameter from `rng`'s child streams.
    pub fn init_params(&mut self, rng: &RngState) {
        let arch = self.arch.clone();
        let layout = self.layout.clone();
        let mut fill = |spec: &MlpSpec, range: Range<usize>, mut r: RngState| {
            let params = &mut self.params[range];
            for sh in spec.layers() {
                let limit = (6.0 / (sh.rows + sh.cols) as f64).sqrt();
                for w in &mut params[sh.weights()] {
                    *w = limit * (2.0 * r.uniform() - 1.0);
                }
                params[sh.weights().end..sh.end()].fill(0.0);
            }
        };
        fill(&arch.shared_spec(), layout.shared.clone(), rng.child_named("shared"));
        for (i, range) in layout.specific.iter().enumerate() {
            fill(
                &arch.specific_spec(),
                range.clone(),
                rng.child_named("specific").child(i as u64),
            );
        }
        fill(&arch.classifier_spec(), layout.classifier.clone(), rng.child_named("classifier"));
        fill(&arch.classifier_spec(), layout.auxiliary.clone(), rng.child_named("auxiliary"));
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Hash of the exact bit patterns of a parameter range.
    pub fn param_hash(&self, range: Range<usize>) -> u64 {
        let mut h = DefaultHasher::new();
        for v in &self.params[range] {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    fn check_input(&self, x: VectorRef<'_>) -> Result<()> {
        if x.dim() != self.arch.input_dim {
            return Err(Error::Shape(format!(
                "input dim {} != model input dim {}",
                x.dim(),
                self.arch.input_dim
            )));
        }
        Ok(())
    }

    /// Absolute parameter range of `C`'s output layer (weights, then bias).
    pub fn classifier_output_layer(&self) -> Range<usize> {
        let spec = self.arch.classifier_spec();
        let last = spec.layers()[spec.n_layers() - 1];
        self.layout.classifier.start + last.offset..self.layout.classifier.start + last.end()
    }

    /// Shared features `F_s(x)` in eval mode.
    pub fn shared_features(&self, x: VectorRef<'_>) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(mlp_forward(&self.arch.shared_spec(), &self.params[self.layout.shared.clone()], x, None)?.0)
    }

    /// Full forward pass for domain `domain`. Dropout masks are drawn from
    /// `rng` in train mode (shared, specific, `C`, `C′` in that order).
    pub fn forward<'a>(
        &self,
        domain: usize,
        x: VectorRef<'a>,
        mode: Mode,
        rng: &mut RngState,
    ) -> Result<ForwardOutput<'a>> {
        if domain >= self.arch.domains {
            return Err(Error::Range(format!(
                "domain index {domain} >= M = {}",
                self.arch.domains
            )));
        }
        self.forward_impl(Some(domain), x, mode, rng)
    }

    /// Forward pass with the domain-specific half of the features set to 0.
    pub fn forward_msuda<'a>(&self, x: VectorRef<'a>, mode: Mode, rng: &mut RngState) -> Result<ForwardOutput<'a>> {
        self.forward_impl(None, x, mode, rng)
    }

    fn forward_impl<'a>(
        &self,
        domain: Option<usize>,
        x: VectorRef<'a>,
        mode: Mode,
        rng: &mut RngState,
    ) -> Result<ForwardOutput<'a>> {
        self.check_input(x)?;
        let train = mode == Mode::Train;
        fn drop(train: bool, r: &mut RngState) -> Option<&mut RngState> {
            train.then_some(r)
        }
        let (shared_out, shared) = mlp_forward(
            &self.arch.shared_spec(),
            &self.params[self.layout.shared.clone()],
            x,
            drop(train, rng),
        )?;
        let mut features = shared_out;
        let specific = match domain {
            Some(i) => {
                let (out, t) = mlp_forward(
                    &self.arch.specific_spec(),
                    &self.params[self.layout.specific[i].clone()],
                    x,
                    drop(train, rng),
                )?;
                features.extend(out);
                Some(t)
            }
            None => {
                features.extend(std::iter::repeat_n(0.0, self.arch.d_p));
                None
            }
        };
        let cspec = self.arch.classifier_spec();
        let (logits_c, classifier) = mlp_forward(
            &cspec,
            &self.params[self.layout.classifier.clone()],
            VectorRef::Dense(&features),
            drop(train, rng),
        )?;
        let (logits_aux, auxiliary) = mlp_forward(
            &cspec,
            &self.params[self.layout.auxiliary.clone()],
            VectorRef::Dense(&features),
            drop(train, rng),
        )?;
        Ok(ForwardOutput {
            logits_c,
            logits_aux,
            trace: SampleTrace {
                x,
                domain,
                shared,
                specific,
                features,
                classifier,
                auxiliary,
            },
        })
    }

    /// Accumulate `sign · ∂loss/∂θ` into `grad` (full length) for the routed
    /// components, given the loss gradients at both classifiers' logits.
    pub fn backward(
        &self,
        trace: &SampleTrace<'_>,
        d_logits_c: &[f64],
        d_logits_aux: &[f64],
        routing: Routing,
        sign: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        let k = self.arch.k;
        if d_logits_c.len() != k || d_logits_aux.len() != k {
            return Err(Error::Shape(format!(
                "logit gradients of length {} and {}, expected {k}",
                d_logits_c.len(),
                d_logits_aux.len()
            )));
        }
        if grad.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "gradient buffer {} != parameter count {}",
                grad.len(),
                self.params.len()
            )));
        }
        let scale = |g: &[f64]| -> Vec<f64> { g.iter().map(|v| sign * v).collect() };
        let gc = scale(d_logits_c);
        let ga = scale(d_logits_aux);
        let cspec = self.arch.classifier_spec();
        let lay = &self.layout;
        let need_features = routing.any_extractor();
        let feats = VectorRef::Dense(&trace.features);
        let mut d_features = vec![0.0; if need_features { trace.features.len() } else { 0 }];

        for (g, range, ctrace, routed) in [
            (&gc, lay.classifier.clone(), &trace.classifier, routing.classifier),
            (&ga, lay.auxiliary.clone(), &trace.auxiliary, routing.auxiliary),
        ] {
            if g.iter().all(|&v| v == 0.0) || !(routed || need_features) {
                continue;
            }
            let is_main = range == lay.classifier;
            let mut df = vec![0.0; if need_features { trace.features.len() } else { 0 }];
            let gp = routed.then(|| &mut grad[range.clone()]);
            mlp_backward(
                &cspec,
                &self.params[range.clone()],
                feats,
                ctrace,
                g,
                gp,
                need_features.then_some(&mut df[..]),
            );
            if self.corrupt_backward && is_main && routed {
                grad[range.clone()].iter_mut().for_each(|v| *v *= 1.01);
            }
            d_features.iter_mut().zip(&df).for_each(|(a, b)| *a += b);
        }

        if routing.shared {
            mlp_backward(
                &self.arch.shared_spec(),
                &self.params[lay.shared.clone()],
                trace.x,
                &trace.shared,
                &d_features[..self.arch.d_s],
                Some(&mut grad[lay.shared.clone()]),
                None,
            );
        }
        if routing.specific {
            if let (Some(i), Some(st)) = (trace.domain, &trace.specific) {
                mlp_backward(
                    &self.arch.specific_spec(),
                    &self.params[lay.specific[i].clone()],
                    trace.x,
                    st,
                    &d_features[self.arch.d_s..],
                    Some(&mut grad[lay.specific[i].clone()]),
                    None,
                );
            }
        }
        Ok(())
    }

    /// Serialize to the checkpoint format: magic, version, JSON header,
    /// parameter count, little-endian `f64` parameters.
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            arch: self.arch.clone(),
            seed: self.seed,
            dropout_placement: DROPOUT_PLACEMENT.to_string(),
            param_count: self.params.len(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(24 + json.len() + 8 * self.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in &self.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(bad("truncated checkpoint"));
            }
            let (a, b) = cur.split_at(n);
            cur = b;
            Ok(a)
        };
        if take(8)? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(take(hlen)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.dropout_placement != DROPOUT_PLACEMENT {
            return Err(Error::Checkpoint(format!(
                "unsupported dropout placement {:?}",
                header.dropout_placement
            )));
        }
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let mut model = Self::zeros(header.arch)?;
        if count != model.params.len() || count != header.param_count {
            return Err(Error::Checkpoint(format!(
                "parameter count {count} does not match architecture ({})",
                model.params.len()
            )));
        }
        let raw = take(8 * count)?;
        for (p, chunk) in model.params.iter_mut().zip(raw.chunks_exact(8)) {
            *p = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        if !cur.is_empty() {
            return Err(bad("trailing bytes after parameters"));
        }
        model.seed = header.seed;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_checkpoint_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MDATCKP1";
const CHECKPOINT_VERSION: u32 = 1;
const DROPOUT_PLACEMENT: &str = "after-activation";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    arch: Architecture,
    seed: u64,
    dropout_placement: String,
    param_count: usize,
}

/// A scalar function of the flat parameter vector with an analytic gradient
/// and a discrete signature (rectifier states, pseudo-labels, clamps, ...)
/// used to detect non-differentiable points.
pub trait Objective {
    /// Returns `(value, signature)`; writes `∂value/∂θ` into `grad` when
    /// given (the buffer is zeroed by the caller).
    fn eval(&self, params: &[f64], grad: Option<&mut [f64]>) -> Result<(f64, u64)>;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentCheck {
    pub name: String,
    pub checked: usize,
    pub excluded_kinks: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub components: Vec<ComponentCheck>,
    pub tolerance: f64,
    pub step: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.components.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn excluded_kinks(&self) -> usize {
        self.components.iter().map(|c| c.excluded_kinks).sum()
    }

    pub fn passed(&self) -> bool {
        self.components
            .iter()
            .all(|c| c.max_rel_error <= self.tolerance && c.checked > 0)
    }
}

/// Gradient-check settings.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates per component.
    pub coords: usize,
    /// Denominator floor of the relative error, so exact zeros compare as
    /// absolute differences.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            coords: 60,
            floor: 1e-6,
            seed: 0,
        }
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare analytic and central-difference gradients on a random subsample
/// of each component's coordinates. Coordinates whose objective signature
/// differs at `θ ± step` straddle a kink and are excluded (and counted).
/// Coordinates with a nonzero analytic gradient are preferred; exact zeros
/// fill the remainder.
pub fn grad_check(
    objective: &dyn Objective,
    params: &[f64],
    components: &[(String, Range<usize>)],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut analytic = vec![0.0; params.len()];
    let (value, signature) = objective.eval(params, Some(&mut analytic))?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("objective value {value}")));
    }
    let mut rng = RngState::new(cfg.seed).child_named("grad-check");
    let mut theta = params.to_vec();
    let mut out = Vec::new();
    for (name, range) in components {
        let mut nonzero: Vec<usize> = range.clone().filter(|&i| analytic[i] != 0.0).collect();
        let mut zero: Vec<usize> = range.clone().filter(|&i| analytic[i] == 0.0).collect();
        rng.shuffle(&mut nonzero);
        rng.shuffle(&mut zero);
        let mut picks: Vec<usize> = nonzero.into_iter().chain(zero).take(cfg.coords).collect();
        picks.sort_unstable();
        let mut check = ComponentCheck {
            name: name.clone(),
            checked: 0,
            excluded_kinks: 0,
            max_rel_error: 0.0,
            worst_index: None,
        };
        for i in picks {
            let orig = theta[i];
            theta[i] = orig + cfg.step;
            let (fp, sp) = objective.eval(&theta, None)?;
            theta[i] = orig - cfg.step;
            let (fm, sm) = objective.eval(&theta, None)?;
            theta[i] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(format!("objective near coordinate {i}")));
            }
            if sp != signature || sm != signature {
                check.excluded_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let err = relative_error(analytic[i], numeric, cfg.floor);
            check.checked += 1;
            if check.worst_index.is_none() || err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = Some(i);
            }
        }
        out.push(check);
    }
    Ok(GradCheckReport {
        components: out,
        tolerance: cfg.tolerance,
        step: cfg.step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::{softmax, SparseVector};

    fn tiny_arch() -> Architecture {
        Architecture {
            input_dim: 3,
            k: 2,
            domains: 2,
            shared_hidden: vec![],
            d_s: 3,
            specific_hidden: vec![],
            d_p: 3,
            classifier_hidden: vec![],
            keep_prob: 1.0,
        }
    }

    fn small_arch() -> Architecture {
        Architecture {
            input_dim: 12,
            k: 2,
            domains: 2,
            shared_hidden: vec![7],
            d_s: 5,
            specific_hidden: vec![6],
            d_p: 3,
            classifier_hidden: vec![8],
            keep_prob: 0.6,
        }
    }

    #[test]
    fn zero_network_gives_uniform_softmax() {
        let m = MdatModel::zeros(small_arch()).unwrap();
        let x = vec![1.0; 12];
        let out = m.forward(0, (&x).into(), Mode::Train, &mut RngState::new(0)).unwrap();
        assert_eq!(out.logits_c, vec![0.0, 0.0]);
        assert_eq!(out.logits_aux, vec![0.0, 0.0]);
        assert_eq!(softmax(&out.logits_c), vec![0.5, 0.5]);
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let m = MdatModel::init(small_arch(), 3).unwrap();
        let x = SparseVector::new(12, vec![(1, 2.0), (5, 1.0)]).unwrap();
        let a = m.forward(1, (&x).into(), Mode::Eval, &mut RngState::new(0)).unwrap();
        let b = m.forward(1, (&x).into(), Mode::Eval, &mut RngState::new(99)).unwrap();
        assert_eq!(a.logits_c, b.logits_c);
        assert_eq!(a.logits_aux, b.logits_aux);
        assert!(a.trace.shared.masks.iter().all(Option::is_none));
    }

    /// Identity single-layer extractors and a hand-set linear classifier.
    fn hand_model() -> MdatModel {
        let mut m = MdatModel::zeros(tiny_arch()).unwrap();
        let lay = m.layout().clone();
        let identity = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        m.params[lay.shared.start..lay.shared.start + 9].copy_from_slice(&identity);
        for r in &lay.specific {
            m.params[r.start..r.start + 9].copy_from_slice(&identity);
        }
        // C: row0 sums shared features, row1 sums specific features; bias (0.5, -1)
        let c = lay.classifier.start;
        m.params[c..c + 12].copy_from_slice(&[1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 2.0, 2.0]);
        m.params[c + 12..c + 14].copy_from_slice(&[0.5, -1.0]);
        m
    }

    #[test]
    fn hand_set_forward_matches_pencil() {
        let m = hand_model();
        let x = vec![1.0, 2.0, -0.5];
        let out = m.forward(0, (&x).into(), Mode::Eval, &mut RngState::new(0)).unwrap();
        // features = (1, 2, -0.5, 1, 2, -0.5); C = (2.5 + 0.5, 2·2.5 − 1)
        assert_eq!(out.trace.features, vec![1.0, 2.0, -0.5, 1.0, 2.0, -0.5]);
        assert_eq!(out.logits_c, vec![3.0, 4.0]);
        let ms = m.forward_msuda((&x).into(), Mode::Eval, &mut RngState::new(0)).unwrap();
        assert_eq!(ms.logits_c, vec![3.0, -1.0]);
    }

    #[test]
    fn msuda_ignores_specific_parameters() {
        let mut m = MdatModel::init(small_arch(), 5).unwrap();
        let x = vec![0.5; 12];
        let before = m.forward_msuda((&x).into(), Mode::Eval, &mut RngState::new(0)).unwrap();
        let lay = m.layout().clone();
        let mut r = RngState::new(8);
        for range in &lay.specific {
            for p in &mut m.params[range.clone()] {
                *p = r.normal();
            }
        }
        let after = m.forward_msuda((&x).into(), Mode::Eval, &mut RngState::new(0)).unwrap();
        assert_eq!(before.logits_c, after.logits_c);
    }

    #[test]
    fn msuda_equals_forward_when_specific_output_is_zero() {
        let mut m = MdatModel::init(small_arch(), 5).unwrap();
        for range in m.layout().specific.clone() {
            m.params[range].fill(0.0);
        }
        let x = vec![0.5; 12];
        let a = m.forward(1, (&x).into(), Mode::Eval, &mut RngState::new(0)).unwrap();
        let b = m.forward_msuda((&x).into(), Mode::Eval, &mut RngState::new(0)).unwrap();
        assert_eq!(a.logits_c, b.logits_c);
        assert_eq!(a.logits_aux, b.logits_aux);
    }

    #[test]
    fn forward_rejects_bad_domain_and_dim() {
        let m = MdatModel::zeros(small_arch()).unwrap();
        let x = vec![0.0; 12];
        assert!(matches!(m.forward(2, (&x).into(), Mode::Eval, &mut RngState::new(0)), Err(Error::Range(_))));
        let y = vec![0.0; 11];
        assert!(matches!(m.forward(0, (&y).into(), Mode::Eval, &mut RngState::new(0)), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let m = MdatModel::init(small_arch(), 1).unwrap();
        let x = vec![1.0; 12];
        let out = m.forward(0, (&x).into(), Mode::Train, &mut RngState::new(0)).unwrap();
        let mut g = vec![0.0; m.n_params()];
        m.backward(&out.trace, &[0.0, 0.0], &[0.0, 0.0], Routing::ALL, 1.0, &mut g).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(m.backward(&out.trace, &[0.0], &[0.0, 0.0], Routing::ALL, 1.0, &mut g).is_err());
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let m = MdatModel::init(small_arch(), 1).unwrap();
        let x = vec![1.0; 12];
        let out = m.forward(1, (&x).into(), Mode::Train, &mut RngState::new(2)).unwrap();
        let n = m.n_params();
        let (mut ga, mut gb, mut gab) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        m.backward(&out.trace, &[0.3, -0.3], &[0.0, 0.0], Routing::ALL, 1.0, &mut ga).unwrap();
        m.backward(&out.trace, &[0.0, 0.0], &[-0.2, 0.2], Routing::ALL, 1.0, &mut gb).unwrap();
        m.backward(&out.trace, &[0.3, -0.3], &[-0.2, 0.2], Routing::ALL, 1.0, &mut gab).unwrap();
        for i in 0..n {
            assert!((ga[i] + gb[i] - gab[i]).abs() <= 1e-14 * (1.0 + gab[i].abs()));
        }
    }

    #[test]
    fn routing_limits_gradient_support() {
        let m = MdatModel::init(small_arch(), 1).unwrap();
        let lay = m.layout().clone();
        let x = vec![1.0; 12];
        let out = m.forward(0, (&x).into(), Mode::Eval, &mut RngState::new(2)).unwrap();
        let mut g = vec![0.0; m.n_params()];
        m.backward(&out.trace, &[0.0, 0.0], &[0.5, -0.5], Routing::MAIN, 1.0, &mut g).unwrap();
        assert!(g[lay.auxiliary.clone()].iter().all(|&v| v == 0.0));
        assert!(g[lay.classifier.clone()].iter().all(|&v| v == 0.0));
        assert!(g[lay.specific[1].clone()].iter().all(|&v| v == 0.0));
        assert!(g[lay.shared.clone()].iter().any(|&v| v != 0.0));
        let mut g = vec![0.0; m.n_params()];
        m.backward(&out.trace, &[0.5, -0.5], &[0.5, -0.5], Routing::AUX, 1.0, &mut g).unwrap();
        assert!(g[lay.main()].iter().all(|&v| v == 0.0));
        assert!(g[lay.auxiliary.clone()].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn init_is_glorot_with_zero_biases() {
        let arch = Architecture {
            input_dim: 200,
            shared_hidden: vec![100],
            ..small_arch()
        };
        let a = MdatModel::init(arch.clone(), 11).unwrap();
        let b = MdatModel::init(arch.clone(), 11).unwrap();
        assert_eq!(a.params, b.params);
        let spec = arch.shared_spec();
        let layers = spec.layers();
        let first = &a.params[layers[0].weights()];
        assert_eq!(first.len(), 20_000);
        let var = first.iter().map(|w| w * w).sum::<f64>() / first.len() as f64;
        let target = 2.0 / 300.0;
        assert!((var / target - 1.0).abs() < 0.2, "variance {var} vs {target}");
        for sh in layers {
            assert!(a.params[sh.weights().end..sh.end()].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = MdatModel::init(small_arch(), 4).unwrap();
        let bytes = m.to_checkpoint_bytes().unwrap();
        let back = MdatModel::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back.params.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   m.params.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(back.arch(), m.arch());
        assert_eq!(back.seed(), 4);
        assert!(MdatModel::from_checkpoint_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(MdatModel::from_checkpoint_bytes(b"garbage!").is_err());
    }

    /// Cross-entropy of `C` on one sample of a bias-free linear model.
    struct LinearCe {
        model: MdatModel,
        x: Vec<f64>,
        y: usize,
    }

    impl Objective for LinearCe {
        fn eval(&self, params: &[f64], grad: Option<&mut [f64]>) -> Result<(f64, u64)> {
            let mut m = self.model.clone();
            m.params.copy_from_slice(params);
            let out = m.forward(0, (&self.x).into(), Mode::Eval, &mut RngState::new(0))?;
            let p = softmax(&out.logits_c);
            if let Some(g) = grad {
                let mut d = p.clone();
                d[self.y] -= 1.0;
                m.backward(&out.trace, &d, &[0.0, 0.0], Routing::ALL, 1.0, g)?;
            }
            Ok((-p[self.y].ln(), 0))
        }
    }

    #[test]
    fn grad_check_linear_cross_entropy() {
        let model = MdatModel::init(tiny_arch(), 2).unwrap();
        let obj = LinearCe {
            model: model.clone(),
            x: vec![0.7, -1.2, 0.4],
            y: 1,
        };
        let comps = model.layout().components();
        let report = grad_check(&obj, &model.params, &comps, &GradCheckConfig::default()).unwrap();
        assert!(report.max_rel_error() <= 1e-6, "{report:?}");
        let mut bad = model.clone();
        bad.corrupt_backward = true;
        let obj = LinearCe { model: bad, ..obj };
        let report = grad_check(&obj, &model.params, &comps, &GradCheckConfig::default()).unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
        assert_eq!(relative_error(2.0, 1.0, 1e-6), 0.5);
        assert_eq!(relative_error(1e-9, 0.0, 1e-6), 1e-3);
    }
}
