//! Target estimator `x̂0 = f(x_t, X_c, t)`.
//!
//! Three stages:
//!
//! 1. the `C` condition layers are mixed with softmax-normalized learnable
//!    weights into a single condition vector `x_c`;
//! 2. `[x_t; x_c]` (length `2L`) goes through an affine map to length `L`;
//! 3. a trunk regresses the codeword, with the timestep injected through a
//!    sinusoidal embedding. Two trunks exist: an MLP baseline that
//!    concatenates the embedding to its input, and a staged transformer that
//!    uses timestep-conditioned adaptive RMS-norm.
//!
//! All parameters live in one flat buffer whose ordering is given by
//! [`ParamLayout`]; gradients use the same layout. Backpropagation is written
//! out by hand and checked against central finite differences in the tests.

mod layout;
mod mlp;
mod ops;
mod transformer;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use layout::{ParamEntry, ParamLayout};

use layout::{Init, Slot};
use mlp::{MlpCache, MlpTrunk};
use transformer::{TransformerCache, TransformerTrunk, MLP_RATIO};

use crate::{Error, Result};

/// Per-sample gradients are summed in fixed chunks of this many samples, then
/// the chunk sums are added in order, so the result does not depend on the
/// number of worker threads.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrunkVariant {
    MlpBaseline,
    StagedTransformer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Embedding length `L` (feature and codeword dimension).
    pub dim: usize,
    /// Number of condition layers `C`.
    pub num_condition_layers: usize,
    pub trunk: TrunkVariant,
    pub trunk_depth: usize,
    /// Hidden size of the MLP, or model width of the transformer.
    pub trunk_width: usize,
    #[serde(default = "default_heads")]
    pub num_heads: usize,
    /// Tokens the fused vector is cut into (transformer only; must divide `dim`).
    #[serde(default = "default_tokens")]
    pub num_tokens: usize,
    pub time_embed_dim: usize,
}

fn default_heads() -> usize {
    1
}

fn default_tokens() -> usize {
    1
}

impl EstimatorConfig {
    pub fn mlp_baseline(dim: usize, num_condition_layers: usize) -> Self {
        Self {
            dim,
            num_condition_layers,
            trunk: TrunkVariant::MlpBaseline,
            trunk_depth: 2,
            trunk_width: 128,
            num_heads: 1,
            num_tokens: 1,
            time_embed_dim: 16,
        }
    }

    /// Four transformer layers of width 1024 with 16 heads over 16 tokens,
    /// fed by 23 condition layers of a 1024-wide encoder.
    pub fn reference_scale() -> Self {
        Self {
            dim: 1024,
            num_condition_layers: 23,
            trunk: TrunkVariant::StagedTransformer,
            trunk_depth: 4,
            trunk_width: 1024,
            num_heads: 16,
            num_tokens: 16,
            time_embed_dim: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if self.dim == 0 {
            return fail("estimator dim must be positive".into());
        }
        if self.num_condition_layers == 0 {
            return fail("num_condition_layers must be >= 1".into());
        }
        if self.trunk_depth == 0 {
            return fail("trunk_depth must be >= 1".into());
        }
        if self.trunk_width == 0 {
            return fail("trunk_width must be >= 1".into());
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return fail(format!(
                "time_embed_dim must be even and positive, got {}",
                self.time_embed_dim
            ));
        }
        if self.trunk == TrunkVariant::StagedTransformer {
            if self.num_tokens == 0 || self.dim % self.num_tokens != 0 {
                return fail(format!(
                    "num_tokens {} must divide dim {}",
                    self.num_tokens, self.dim
                ));
            }
            if self.num_heads == 0 || self.trunk_width % self.num_heads != 0 {
                return fail(format!(
                    "num_heads {} must divide trunk_width {}",
                    self.num_heads, self.trunk_width
                ));
            }
        }
        Ok(())
    }

    /// Closed-form parameter count, computed independently of the layout.
    pub fn param_count(&self) -> usize {
        let (l, c, e, d, depth) = (
            self.dim,
            self.num_condition_layers,
            self.time_embed_dim,
            self.trunk_width,
            self.trunk_depth,
        );
        let fusion = c + 2 * l * l + l;
        let trunk = match self.trunk {
            TrunkVariant::MlpBaseline => (l + e) * d + d + (depth - 1) * (d * d + d) + d * l + l,
            TrunkVariant::StagedTransformer => {
                let p = l / self.num_tokens;
                let h = MLP_RATIO * d;
                let modulation = 2 * (e * d + d);
                let block = 2 * modulation + 4 * d * d + d + (d * h + h) + (h * d + d);
                (p * d + d) + self.num_tokens * d + depth * block + modulation + (d * p + p)
            }
        };
        fusion + trunk
    }
}

/// Sinusoidal embedding: element `2j` is `sin(t / 10000^{2j/dim})`, element
/// `2j+1` the matching cosine.
pub fn timestep_embedding(t: f64, dim: usize) -> Result<Array1<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::invalid(format!(
            "timestep embedding dim must be even and positive, got {dim}"
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::OutOfDomain {
            what: "t",
            value: t,
            lo: 0.0,
            hi: 1.0,
        });
    }
    let mut out = Array1::zeros(dim);
    for j in 0..dim / 2 {
        let arg = t / 10_000f64.powf(2.0 * j as f64 / dim as f64);
        out[2 * j] = arg.sin();
        out[2 * j + 1] = arg.cos();
    }
    Ok(out)
}

/// `Σ_c softmax(weights)_c · X_c[c]`.
pub fn fuse_conditions(
    condition_stack: ArrayView2<'_, f64>,
    layer_weights: ArrayView1<'_, f64>,
) -> Result<Array1<f64>> {
    if condition_stack.nrows() != layer_weights.len() {
        return Err(Error::invalid(format!(
            "condition stack has {} layers, {} layer weights given",
            condition_stack.nrows(),
            layer_weights.len()
        )));
    }
    let a = ops::softmax(layer_weights);
    Ok(a.dot(&condition_stack))
}

/// Flat parameter buffer. Values produced by [`Estimator::init`] and by
/// training are exactly representable in `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorParams {
    pub values: Vec<f64>,
}

impl EstimatorParams {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Rounds every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            *v = *v as f32 as f64;
        }
    }
}

/// Gradient of the loss with respect to every entry of [`EstimatorParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub values: Vec<f64>,
}

impl Gradients {
    pub fn global_norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// One supervised example for the target-matching loss.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub x_t: Array1<f64>,
    pub condition_stack: Array2<f64>,
    pub t: f64,
    pub x0: Array1<f64>,
}

#[derive(Debug, Clone)]
enum Trunk {
    Mlp(MlpTrunk),
    Transformer(TransformerTrunk),
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum TrunkCache {
    Mlp(MlpCache),
    Transformer(TransformerCache),
}

struct ForwardCache {
    mix: Array1<f64>,
    fusion_in: Array2<f64>,
    temb: Array1<f64>,
    trunk: TrunkCache,
}

/// Network structure for one [`EstimatorConfig`]; parameters are passed in
/// separately so the same estimator can evaluate many parameter snapshots.
#[derive(Debug, Clone)]
pub struct Estimator {
    config: EstimatorConfig,
    layout: ParamLayout,
    layer_weights: Slot,
    fusion_w: Slot,
    fusion_b: Slot,
    trunk: Trunk,
}

impl Estimator {
    pub fn new(config: EstimatorConfig) -> Result<Self> {
        config.validate()?;
        let l = config.dim;
        let mut layout = ParamLayout::default();
        let layer_weights = layout.vector(
            "stage1.layer_weights",
            config.num_condition_layers,
            Init::Zeros,
        );
        let fusion_w = layout.matrix("stage2.weight", 2 * l, l, Init::FanIn(2 * l));
        let fusion_b = layout.vector("stage2.bias", l, Init::FanIn(2 * l));
        let trunk = match config.trunk {
            TrunkVariant::MlpBaseline => Trunk::Mlp(MlpTrunk::build(
                &mut layout,
                l,
                config.time_embed_dim,
                config.trunk_width,
                config.trunk_depth,
            )),
            TrunkVariant::StagedTransformer => Trunk::Transformer(TransformerTrunk::build(
                &mut layout,
                l,
                config.time_embed_dim,
                config.trunk_width,
                config.trunk_depth,
                config.num_heads,
                config.num_tokens,
            )),
        };
        Ok(Self {
            config,
            layout,
            layer_weights,
            fusion_w,
            fusion_b,
            trunk,
        })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.len()
    }

    /// Fan-in-scaled uniform affine maps, identity modulation, uniform layer
    /// mixing. Every value is rounded to `f32`.
    pub fn init(&self, seed: u64) -> EstimatorParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(self.layout.len());
        for (entry, init) in self.layout.entries().iter().zip(self.layout.inits()) {
            for _ in 0..entry.numel() {
                let v = match *init {
                    Init::FanIn(fan_in) => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        rng.random_range(-bound..bound)
                    }
                    Init::Uniform(bound) => rng.random_range(-bound..bound),
                    Init::Zeros => 0.0,
                    Init::Ones => 1.0,
                };
                values.push(v as f32 as f64);
            }
        }
        EstimatorParams { values }
    }

    fn check_params(&self, params: &EstimatorParams) -> Result<()> {
        if params.len() != self.layout.len() {
            return Err(Error::invalid(format!(
                "parameter buffer has {} values, estimator expects {}",
                params.len(),
                self.layout.len()
            )));
        }
        Ok(())
    }

    fn check_inputs(
        &self,
        x_t: &ArrayView1<'_, f64>,
        cond: &ArrayView2<'_, f64>,
        t: f64,
    ) -> Result<()> {
        let (l, c) = (self.config.dim, self.config.num_condition_layers);
        if x_t.len() != l {
            return Err(Error::invalid(format!(
                "x_t has length {}, expected {l}",
                x_t.len()
            )));
        }
        if cond.dim() != (c, l) {
            return Err(Error::invalid(format!(
                "condition stack has shape {:?}, expected ({c}, {l})",
                cond.dim()
            )));
        }
        if !t.is_finite()
            || !x_t.iter().all(|v| v.is_finite())
            || !cond.iter().all(|v| v.is_finite())
        {
            return Err(Error::numeric(
                "input",
                "non-finite x_t, condition stack or t",
            ));
        }
        Ok(())
    }

    fn forward_cached(
        &self,
        params: &EstimatorParams,
        x_t: ArrayView1<'_, f64>,
        cond: ArrayView2<'_, f64>,
        t: f64,
    ) -> Result<(Array1<f64>, ForwardCache)> {
        self.check_params(params)?;
        self.check_inputs(&x_t, &cond, t)?;
        let p = params.values.as_slice();
        let mix = ops::softmax(self.layer_weights.vec(p));
        let x_c = mix.dot(&cond);
        let fusion_in = concatenate(Axis(0), &[x_t, x_c.view()])
            .expect("1-d concat")
            .insert_axis(Axis(0));
        let fused = ops::affine(p, self.fusion_w, Some(self.fusion_b), fusion_in.view())
            .index_axis_move(Axis(0), 0);
        if !fused.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("fusion", "non-finite fused embedding"));
        }
        let temb = timestep_embedding(t, self.config.time_embed_dim)?;
        let (out, trunk) = match &self.trunk {
            Trunk::Mlp(m) => {
                let (o, c) = m.forward(p, fused.view(), temb.view());
                (o, TrunkCache::Mlp(c))
            }
            Trunk::Transformer(tr) => {
                let (o, c) = tr.forward(p, fused.view(), temb.view());
                (o, TrunkCache::Transformer(c))
            }
        };
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("trunk", "non-finite estimator output"));
        }
        Ok((
            out,
            ForwardCache {
                mix,
                fusion_in,
                temb,
                trunk,
            },
        ))
    }

    /// Codeword estimate for one input.
    pub fn forward(
        &self,
        params: &EstimatorParams,
        x_t: ArrayView1<'_, f64>,
        condition_stack: ArrayView2<'_, f64>,
        t: f64,
    ) -> Result<Array1<f64>> {
        self.forward_cached(params, x_t, condition_stack, t)
            .map(|(o, _)| o)
    }

    fn backward(
        &self,
        params: &EstimatorParams,
        cache: &ForwardCache,
        cond: ArrayView2<'_, f64>,
        d_out: ArrayView1<'_, f64>,
        grads: &mut [f64],
    ) {
        let p = params.values.as_slice();
        let d_fused = match (&self.trunk, &cache.trunk) {
            (Trunk::Mlp(m), TrunkCache::Mlp(c)) => m.backward(p, c, d_out, grads),
            (Trunk::Transformer(tr), TrunkCache::Transformer(c)) => {
                tr.backward(p, cache.temb.view(), c, d_out, grads)
            }
            _ => unreachable!("cache built by the same trunk"),
        };
        let d_in = ops::affine_backward(
            p,
            grads,
            self.fusion_w,
            Some(self.fusion_b),
            cache.fusion_in.view(),
            d_fused.view().insert_axis(Axis(0)),
        );
        let l = self.config.dim;
        let d_xc = d_in.slice(s![0, l..]);
        let d_mix: Array1<f64> = cond.dot(&d_xc);
        let inner = cache.mix.dot(&d_mix);
        let mut gw = self.layer_weights.vec_mut(grads);
        for c in 0..gw.len() {
            gw[c] += cache.mix[c] * (d_mix[c] - inner);
        }
    }

    /// Mean over the batch of `‖x̂0 − x0‖²` and its exact gradient.
    pub fn loss_and_gradients(
        &self,
        params: &EstimatorParams,
        batch: &[TrainingExample],
    ) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::invalid("loss requested for an empty batch"));
        }
        self.check_params(params)?;
        let n = batch.len() as f64;
        let partials: Vec<Result<(f64, Vec<f64>)>> = batch
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut grads = vec![0.0; self.layout.len()];
                let mut loss = 0.0;
                for ex in chunk {
                    if ex.x0.len() != self.config.dim {
                        return Err(Error::invalid(format!(
                            "target has length {}, expected {}",
                            ex.x0.len(),
                            self.config.dim
                        )));
                    }
                    let (out, cache) = self.forward_cached(
                        params,
                        ex.x_t.view(),
                        ex.condition_stack.view(),
                        ex.t,
                    )?;
                    let resid = &out - &ex.x0;
                    loss += resid.dot(&resid);
                    let d_out = resid * (2.0 / n);
                    self.backward(
                        params,
                        &cache,
                        ex.condition_stack.view(),
                        d_out.view(),
                        &mut grads,
                    );
                }
                Ok((loss, grads))
            })
            .collect();
        let mut total = 0.0;
        let mut grads = vec![0.0; self.layout.len()];
        for part in partials {
            let (l, g) = part?;
            total += l;
            for (a, b) in grads.iter_mut().zip(&g) {
                *a += b;
            }
        }
        Ok((total / n, Gradients { values: grads }))
    }
}

/// Anything that can produce a codeword estimate for the sampler.
pub trait TargetEstimator: Sync {
    fn dim(&self) -> usize;

    fn estimate(
        &self,
        x_t: ArrayView1<'_, f64>,
        condition_stack: ArrayView2<'_, f64>,
        t: f64,
    ) -> Result<Array1<f64>>;
}

/// An estimator together with one parameter snapshot.
#[derive(Debug, Clone)]
pub struct Model {
    pub estimator: Estimator,
    pub params: EstimatorParams,
}

impl Model {
    pub fn new(estimator: Estimator, params: EstimatorParams) -> Result<Self> {
        estimator.check_params(&params)?;
        Ok(Self { estimator, params })
    }
}

impl TargetEstimator for Model {
    fn dim(&self) -> usize {
        self.estimator.config.dim
    }

    fn estimate(
        &self,
        x_t: ArrayView1<'_, f64>,
        condition_stack: ArrayView2<'_, f64>,
        t: f64,
    ) -> Result<Array1<f64>> {
        self.estimator
            .forward(&self.params, x_t, condition_stack, t)
    }
}
