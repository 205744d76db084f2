//! The geometric vector perceptron, with vector gating and the original
//! ungated vector nonlinearity.
//!
//! Given `(s, V) ∈ ℝⁿ × ℝ^{ν×3}` a GVP computes
//!
//! ```text
//! V_h  = W_h V                  (h×3)
//! V_μ  = W_μ V_h                (μ×3)
//! s_h  = ‖V_h‖ row-wise         (h)
//! s_hn = concat(s_h, s)         (h+n)
//! s_m  = W_m s_hn + b_m         (m)
//! s'   = σ(s_m)
//! V'   = sigmoid(W_g σ⁺(s_m) + b_g) ⊙ V_μ     gated
//! V'   = sigmoid(‖V_μ‖) ⊙ V_μ                 original
//! ```
//!
//! Every step is either channel mixing (which commutes with a right
//! multiplication by an orthogonal matrix) or a row-wise scaling by an
//! invariant, so `V'` transforms like `V` and `s'` is invariant.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AutodiffError, Tape, ValueId};
use crate::svt::{SvTuple, VectorChannels, NORM_EPS};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GvpError {
    #[error("invalid GVP config: {0}")]
    Config(&'static str),
    #[error("input dims (n={n}, nu={nu}) do not match config (n={want_n}, nu={want_nu})")]
    InputDims { n: usize, nu: usize, want_n: usize, want_nu: usize },
    #[error("parameter {name} has shape {got:?}, expected {want:?}")]
    ParamShape { name: &'static str, got: (usize, usize), want: (usize, usize) },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Scalar activation `σ`, also used for the pre-gate activation `σ⁺`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => crate::autodiff::sigmoid(x),
            Activation::Identity => x,
        }
    }

    pub fn record(self, tape: &mut Tape, x: ValueId) -> Result<ValueId, AutodiffError> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Identity => tape.record(crate::autodiff::Primitive::Identity, &[x]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Vector outputs gated by a sigmoid of the scalar pathway.
    Gated,
    /// Vector outputs scaled by a sigmoid of their own norms; blind to `s`.
    Original,
}

/// Dimensions and activation choices of one GVP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GvpConfig {
    /// `n`
    pub in_scalars: usize,
    /// `ν`
    pub in_vectors: usize,
    /// `m`
    pub out_scalars: usize,
    /// `μ`
    pub out_vectors: usize,
    /// `h`
    pub hidden_vectors: usize,
    /// `σ`
    pub scalar_act: Activation,
    /// `σ⁺`; for [`Variant::Original`] this is the activation applied to the
    /// output vector norms and must be sigmoid.
    pub gate_act: Activation,
    pub variant: Variant,
}

impl GvpConfig {
    /// Gated GVP with `h = max(ν, μ)`, `σ = relu`, `σ⁺ = identity`.
    pub fn new(in_dims: (usize, usize), out_dims: (usize, usize)) -> Self {
        Self {
            in_scalars: in_dims.0,
            in_vectors: in_dims.1,
            out_scalars: out_dims.0,
            out_vectors: out_dims.1,
            hidden_vectors: in_dims.1.max(out_dims.1),
            scalar_act: Activation::Relu,
            gate_act: Activation::Identity,
            variant: Variant::Gated,
        }
    }

    /// Ungated GVP whose vector nonlinearity is `sigmoid(‖V_μ‖)`.
    pub fn original(in_dims: (usize, usize), out_dims: (usize, usize)) -> Self {
        Self { gate_act: Activation::Sigmoid, variant: Variant::Original, ..Self::new(in_dims, out_dims) }
    }

    pub fn with_hidden(mut self, h: usize) -> Self {
        self.hidden_vectors = h;
        self
    }

    pub fn with_scalar_act(mut self, act: Activation) -> Self {
        self.scalar_act = act;
        self
    }

    pub fn with_gate_act(mut self, act: Activation) -> Self {
        self.gate_act = act;
        self
    }

    pub fn in_dims(&self) -> (usize, usize) {
        (self.in_scalars, self.in_vectors)
    }

    pub fn out_dims(&self) -> (usize, usize) {
        (self.out_scalars, self.out_vectors)
    }

    pub fn validate(&self) -> Result<(), GvpError> {
        if self.in_vectors == 0 && self.out_vectors > 0 {
            return Err(GvpError::Config("vector outputs require vector inputs (nu = 0, mu > 0)"));
        }
        if self.in_vectors > 0 && self.hidden_vectors == 0 {
            return Err(GvpError::Config("hidden vector count must be at least 1 when nu >= 1"));
        }
        if self.gate_act == Activation::Relu {
            return Err(GvpError::Config("pre-gate activation must be identity or sigmoid"));
        }
        if self.variant == Variant::Original && self.gate_act != Activation::Sigmoid {
            return Err(GvpError::Config("the original variant applies a sigmoid to vector norms"));
        }
        Ok(())
    }

    fn shapes(&self) -> GvpWeights<(usize, usize)> {
        let (n, nu, m, mu, h) = (self.in_scalars, self.in_vectors, self.out_scalars, self.out_vectors, self.hidden_vectors);
        let gated = self.variant == Variant::Gated;
        GvpWeights {
            w_h: (h, nu),
            w_mu: (mu, h),
            w_m: (m, h + n),
            b_m: (m, 1),
            w_g: gated.then_some((mu, m)),
            b_g: gated.then_some((mu, 1)),
        }
    }
}

/// The learnable tensors of one GVP, generic over storage so the same
/// layout serves owned parameters (`Tensor`) and tape bindings (`ValueId`).
#[derive(Debug, Clone, PartialEq)]
pub struct GvpWeights<T> {
    pub w_h: T,
    pub w_mu: T,
    pub w_m: T,
    pub b_m: T,
    /// Absent in the original variant.
    pub w_g: Option<T>,
    pub b_g: Option<T>,
}

pub type GvpParams = GvpWeights<Tensor>;
pub type GvpBindings = GvpWeights<ValueId>;

impl<T> GvpWeights<T> {
    pub const NAMES: [&'static str; 6] = ["w_h", "w_mu", "w_m", "b_m", "w_g", "b_g"];

    /// Present tensors in canonical order with their short names.
    pub fn named(&self) -> Vec<(&'static str, &T)> {
        let mut out = alloc::vec![("w_h", &self.w_h), ("w_mu", &self.w_mu), ("w_m", &self.w_m), ("b_m", &self.b_m)];
        if let Some(w) = &self.w_g {
            out.push(("w_g", w));
        }
        if let Some(b) = &self.b_g {
            out.push(("b_g", b));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut T)> {
        let mut out = alloc::vec![
            ("w_h", &mut self.w_h),
            ("w_mu", &mut self.w_mu),
            ("w_m", &mut self.w_m),
            ("b_m", &mut self.b_m)
        ];
        if let Some(w) = &mut self.w_g {
            out.push(("w_g", w));
        }
        if let Some(b) = &mut self.b_g {
            out.push(("b_g", b));
        }
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> GvpWeights<U> {
        let w_h = f(&self.w_h);
        let w_mu = f(&self.w_mu);
        let w_m = f(&self.w_m);
        let b_m = f(&self.b_m);
        let w_g = self.w_g.as_ref().map(&mut f);
        let b_g = self.b_g.as_ref().map(&mut f);
        GvpWeights { w_h, w_mu, w_m, b_m, w_g, b_g }
    }
}

impl GvpParams {
    /// All-zero parameters of the right shapes.
    pub fn zeros(cfg: &GvpConfig) -> Self {
        cfg.shapes().map(|&(r, c)| Tensor::zeros(r, c))
    }

    /// Registers every tensor as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> GvpBindings {
        self.map(|t| tape.leaf(t.clone()))
    }

    pub fn check_shapes(&self, cfg: &GvpConfig) -> Result<(), GvpError> {
        let want = cfg.shapes();
        let pairs = self.named().into_iter().zip(want.named());
        if self.w_g.is_some() != want.w_g.is_some() || self.b_g.is_some() != want.b_g.is_some() {
            return Err(GvpError::Config("gate parameters do not match the variant"));
        }
        for ((name, t), (_, &w)) in pairs {
            if t.shape() != w {
                return Err(GvpError::ParamShape { name, got: t.shape(), want: w });
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }
}

/// Uniform initialization on `±sqrt(6 / (rows + cols))` for every weight
/// matrix, zero biases. Deterministic per seed.
pub fn init_params(cfg: &GvpConfig, seed: u64) -> GvpParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_params_with(cfg, &mut rng)
}

pub(crate) fn init_params_with<R: Rng>(cfg: &GvpConfig, rng: &mut R) -> GvpParams {
    let shapes = cfg.shapes();
    GvpWeights {
        w_h: glorot_uniform(shapes.w_h, rng),
        w_mu: glorot_uniform(shapes.w_mu, rng),
        w_m: glorot_uniform(shapes.w_m, rng),
        b_m: Tensor::zeros(shapes.b_m.0, 1),
        w_g: shapes.w_g.map(|s| glorot_uniform(s, rng)),
        b_g: shapes.b_g.map(|s| Tensor::zeros(s.0, 1)),
    }
}

pub fn glorot_uniform<R: Rng>((rows, cols): (usize, usize), rng: &mut R) -> Tensor {
    if rows * cols == 0 {
        return Tensor::zeros(rows, cols);
    }
    let bound = libm::sqrt(6.0 / (rows + cols) as f64);
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect())
}

/// Tape values produced by one GVP evaluation, one per step of the
/// computation (the gated line also records its gate).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GvpTrace {
    pub v_h: ValueId,
    pub v_mu: ValueId,
    pub s_h: ValueId,
    pub s_hn: ValueId,
    pub s_m: ValueId,
    pub s_out: ValueId,
    pub v_out: ValueId,
    pub gate: ValueId,
}

impl GvpTrace {
    /// The seven per-step values, in evaluation order.
    pub fn lines(&self) -> [ValueId; 7] {
        [self.v_h, self.v_mu, self.s_h, self.s_hn, self.s_m, self.s_out, self.v_out]
    }
}

/// Records one GVP application on `tape`. `s` is an `n×1` column and `v` a
/// `ν×3` block.
pub fn record_gvp(
    tape: &mut Tape,
    cfg: &GvpConfig,
    w: &GvpBindings,
    s: ValueId,
    v: ValueId,
) -> Result<GvpTrace, GvpError> {
    let (n, nu) = (tape.shape(s).0, tape.shape(v).0);
    if n != cfg.in_scalars || nu != cfg.in_vectors || tape.shape(s).1 != 1 || tape.shape(v).1 != 3 {
        return Err(GvpError::InputDims { n, nu, want_n: cfg.in_scalars, want_nu: cfg.in_vectors });
    }
    let v_h = tape.matmul(w.w_h, v)?;
    let v_mu = tape.matmul(w.w_mu, v_h)?;
    let s_h = tape.row_norm(v_h, NORM_EPS)?;
    let s_hn = tape.concat(&[s_h, s])?;
    let s_m = tape.affine(w.w_m, s_hn, w.b_m)?;
    let s_out = cfg.scalar_act.record(tape, s_m)?;
    let gate = match (cfg.variant, w.w_g, w.b_g) {
        (Variant::Gated, Some(w_g), Some(b_g)) => {
            let pre = match cfg.gate_act {
                Activation::Identity => s_m,
                act => act.record(tape, s_m)?,
            };
            let z = tape.affine(w_g, pre, b_g)?;
            tape.sigmoid(z)?
        }
        (Variant::Original, None, None) => {
            let norms = tape.row_norm(v_mu, NORM_EPS)?;
            tape.sigmoid(norms)?
        }
        _ => return Err(GvpError::Config("gate parameters do not match the variant")),
    };
    let v_out = tape.gate_rows(gate, v_mu)?;
    Ok(GvpTrace { v_h, v_mu, s_h, s_hn, s_m, s_out, v_out, gate })
}

fn run(x: &SvTuple, params: &GvpParams, cfg: &GvpConfig) -> Result<SvTuple, GvpError> {
    cfg.validate()?;
    params.check_shapes(cfg)?;
    let (n, nu) = x.dims();
    if (n, nu) != cfg.in_dims() {
        return Err(GvpError::InputDims { n, nu, want_n: cfg.in_scalars, want_nu: cfg.in_vectors });
    }
    let mut tape = Tape::new();
    let w = params.map(|t| tape.constant(t.clone()));
    let s = tape.constant(Tensor::column(x.s.0.clone()));
    let v = tape.constant(x.v.to_tensor());
    let trace = record_gvp(&mut tape, cfg, &w, s, v)?;
    Ok(SvTuple {
        s: crate::svt::ScalarChannels(tape.value(trace.s_out).data().to_vec()),
        v: VectorChannels(tape.value(trace.v_out).to_rows3()),
    })
}

/// Evaluates a GVP on one feature tuple.
pub fn gvp_forward(x: &SvTuple, params: &GvpParams, cfg: &GvpConfig) -> Result<SvTuple, GvpError> {
    run(x, params, cfg)
}

/// Evaluates an ungated GVP; rejects gated configs.
pub fn gvp_forward_original(x: &SvTuple, params: &GvpParams, cfg: &GvpConfig) -> Result<SvTuple, GvpError> {
    if cfg.variant != Variant::Original {
        return Err(GvpError::Config("gvp_forward_original requires the original variant"));
    }
    run(x, params, cfg)
}

/// A sequence of GVPs applied in order.
#[derive(Debug, Clone, PartialEq)]
pub struct GvpStack {
    pub configs: Vec<GvpConfig>,
    pub params: Vec<GvpParams>,
}

impl GvpStack {
    pub fn new(configs: Vec<GvpConfig>, seed: u64) -> Result<Self, GvpError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for pair in configs.windows(2) {
            if pair[0].out_dims() != pair[1].in_dims() {
                return Err(GvpError::Config("consecutive GVP dimensions do not chain"));
            }
        }
        let mut params = Vec::with_capacity(configs.len());
        for cfg in &configs {
            cfg.validate()?;
            params.push(init_params_with(cfg, &mut rng));
        }
        Ok(Self { configs, params })
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<GvpBindings> {
        self.params.iter().map(|p| p.bind(tape)).collect()
    }

    /// Records the whole stack; returns the final `(s, V)` values.
    pub fn record(&self, tape: &mut Tape, bindings: &[GvpBindings], s: ValueId, v: ValueId) -> Result<(ValueId, ValueId), GvpError> {
        let (mut s, mut v) = (s, v);
        for (cfg, w) in self.configs.iter().zip(bindings) {
            let t = record_gvp(tape, cfg, w, s, v)?;
            s = t.s_out;
            v = t.v_out;
        }
        Ok((s, v))
    }

    pub fn forward(&self, x: &SvTuple) -> Result<SvTuple, GvpError> {
        let mut tape = Tape::new();
        let bindings: Vec<GvpBindings> = self.params.iter().map(|p| p.map(|t| tape.constant(t.clone()))).collect();
        let s = tape.constant(Tensor::column(x.s.0.clone()));
        let v = tape.constant(x.v.to_tensor());
        let (s, v) = self.record(&mut tape, &bindings, s, v)?;
        Ok(SvTuple {
            s: crate::svt::ScalarChannels(tape.value(s).data().to_vec()),
            v: VectorChannels(tape.value(v).to_rows3()),
        })
    }

    /// Flat views for optimizers, in stack order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.params.iter().flat_map(|p| p.named().into_iter().map(|(_, t)| t)).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().flat_map(|p| p.named_mut().into_iter().map(|(_, t)| t)).collect()
    }
}
