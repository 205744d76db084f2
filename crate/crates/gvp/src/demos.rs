//! Synthetic demonstrations on bare GVP stacks.
//!
//! `gate`: can a stack route scalar information into vector outputs? The
//! target is `s · v₁` for a fixed vector set `V` and a scalar input `s`. The
//! ungated stack cannot see `s` on its vector path at all.
//!
//! `approx`: fit an O(3)-equivariant map `F(V) = Σᵢ cᵢ(V) vᵢ` with invariant
//! coefficients and check held-out error and learned equivariance.

use std::fmt::Write as _;

use gvp_core::autodiff::Grad;
use gvp_core::gvp::{GvpConfig, GvpStack};
use gvp_core::svt::{apply_orthogonal, det3, random_orthogonal, Orthogonal3};
use gvp_core::train::Adam;
use gvp_core::{Tape, Tensor, ValueId};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// One supervised example: scalar and vector inputs, vector target.
#[derive(Debug, Clone, PartialEq)]
pub struct VecExample {
    pub s: Vec<f64>,
    pub v: Vec<[f64; 3]>,
    pub target: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

fn record_example(tape: &mut Tape, stack: &GvpStack, b: &[gvp_core::gvp::GvpBindings], ex: &VecExample) -> anyhow::Result<ValueId> {
    let s = tape.constant(Tensor::column(ex.s.clone()));
    let v = tape.constant(Tensor::from_rows3(&ex.v));
    let (_, out) = stack.record(tape, b, s, v)?;
    Ok(out)
}

/// Mean squared error over a batch and its gradient in `stack.tensors()` order.
fn batch_gradient(stack: &GvpStack, batch: &[&VecExample]) -> anyhow::Result<(f64, Grad)> {
    let mut tape = Tape::new();
    let b = stack.bind(&mut tape);
    let ids: Vec<ValueId> = b.iter().flat_map(|w| w.named().into_iter().map(|(_, id)| *id)).collect();
    let mut losses = Vec::with_capacity(batch.len());
    for ex in batch {
        let out = record_example(&mut tape, stack, &b, ex)?;
        let t = tape.constant(Tensor::from_rows3(&ex.target));
        losses.push(tape.mse(out, t)?);
    }
    let loss = tape.mean(&losses)?;
    let g = tape.backward(loss)?;
    Ok((tape.value(loss).data()[0], Grad { tensors: ids.iter().map(|&id| g.wrt(id)).collect() }))
}

/// Adam on shuffled mini-batches with a cosine learning-rate decay to zero.
/// Returns the per-step batch losses.
pub fn fit(stack: &mut GvpStack, data: &[VecExample], opts: &FitOptions) -> anyhow::Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = Adam::new(opts.lr, 0.9, 0.999, 1e-8);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let mut batch = Vec::with_capacity(opts.batch);
        while batch.len() < opts.batch.min(data.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }
        let (loss, grad) = batch_gradient(stack, &batch)?;
        anyhow::ensure!(loss.is_finite() && grad.is_finite(), "non-finite loss at step {step}");
        adam.lr = 0.5 * opts.lr * (1.0 + (core::f64::consts::PI * step as f64 / opts.steps as f64).cos());
        adam.step(stack.tensors_mut(), &grad);
        losses.push(loss);
    }
    Ok(losses)
}

pub fn predict(stack: &GvpStack, ex: &VecExample) -> anyhow::Result<Vec<[f64; 3]>> {
    let x = gvp_core::SvTuple::new(ex.s.clone(), ex.v.clone())?;
    Ok(stack.forward(&x)?.v.0)
}

/// Mean over examples and coordinates of the squared error.
pub fn test_mse(stack: &GvpStack, data: &[VecExample]) -> anyhow::Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in data {
        for (p, t) in predict(stack, ex)?.iter().zip(&ex.target) {
            for k in 0..3 {
                total += (p[k] - t[k]) * (p[k] - t[k]);
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Mean over examples and coordinates of the absolute error.
pub fn test_mae(stack: &GvpStack, data: &[VecExample]) -> anyhow::Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in data {
        for (p, t) in predict(stack, ex)?.iter().zip(&ex.target) {
            for k in 0..3 {
                total += (p[k] - t[k]).abs();
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Per-coordinate population variance of the targets, averaged over
/// coordinates.
pub fn target_variance(data: &[VecExample]) -> f64 {
    let n = data.len() as f64;
    let width = data[0].target.len() * 3;
    let flat: Vec<Vec<f64>> = data.iter().map(|e| e.target.iter().flatten().copied().collect()).collect();
    let mut total = 0.0;
    for k in 0..width {
        let mean = flat.iter().map(|r| r[k]).sum::<f64>() / n;
        total += flat.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / n;
    }
    total / width as f64
}

/// Largest |∂L/∂s| over `data` with `L = Σ (V′ − target)²`.
pub fn max_grad_wrt_scalars(stack: &GvpStack, data: &[VecExample]) -> anyhow::Result<f64> {
    let mut worst = 0.0f64;
    for ex in data {
        let mut tape = Tape::new();
        let b = stack.bind(&mut tape);
        let s = tape.leaf(Tensor::column(ex.s.clone()));
        let v = tape.constant(Tensor::from_rows3(&ex.v));
        let (_, out) = stack.record(&mut tape, &b, s, v)?;
        let t = tape.constant(Tensor::from_rows3(&ex.target));
        let l = tape.mse(out, t)?;
        worst = worst.max(tape.backward(l)?.wrt(s).max_abs());
    }
    Ok(worst)
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn gaussian3(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)]
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateOptions {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub hidden: (usize, usize),
    pub fit: FitOptions,
}

impl Default for GateOptions {
    fn default() -> Self {
        Self { seed: 0, n_train: 256, n_test: 256, hidden: (16, 8), fit: FitOptions { steps: 3000, batch: 32, lr: 3e-3, seed: 0 } }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateReport {
    pub options: GateOptions,
    pub target_variance: f64,
    pub gated_mse: f64,
    pub ungated_mse: f64,
    pub gated_grad_s: f64,
    pub ungated_grad_s: f64,
}

impl GateReport {
    pub fn ungated_blind(&self) -> bool {
        self.ungated_grad_s == 0.0
    }

    pub fn ungated_fails(&self) -> bool {
        self.ungated_mse >= 0.9 * self.target_variance
    }

    pub fn gated_fits(&self) -> bool {
        self.gated_mse <= 0.1 * self.target_variance
    }

    pub fn passed(&self) -> bool {
        self.ungated_blind() && self.ungated_fails() && self.gated_fits()
    }

    pub fn to_text(&self) -> String {
        let o = &self.options;
        let mut s = String::new();
        let _ = writeln!(s, "demo = gate");
        let _ = writeln!(s, "seed = {}", o.seed);
        let _ = writeln!(s, "vectors = 4");
        let _ = writeln!(s, "hidden = {},{}", o.hidden.0, o.hidden.1);
        let _ = writeln!(s, "train_samples = {}", o.n_train);
        let _ = writeln!(s, "test_samples = {}", o.n_test);
        let _ = writeln!(s, "steps = {}", o.fit.steps);
        let _ = writeln!(s, "batch = {}", o.fit.batch);
        let _ = writeln!(s, "lr = {:?}", o.fit.lr);
        let _ = writeln!(s, "target_variance = {:?}", self.target_variance);
        let _ = writeln!(s, "gated_test_mse = {:?}", self.gated_mse);
        let _ = writeln!(s, "ungated_test_mse = {:?}", self.ungated_mse);
        let _ = writeln!(s, "gated_mse_over_var = {:?}", self.gated_mse / self.target_variance);
        let _ = writeln!(s, "ungated_mse_over_var = {:?}", self.ungated_mse / self.target_variance);
        let _ = writeln!(s, "gated_max_grad_wrt_s = {:?}", self.gated_grad_s);
        let _ = writeln!(s, "ungated_max_grad_wrt_s = {:?}", self.ungated_grad_s);
        let _ = writeln!(s, "check_ungated_grad_zero = {}", self.ungated_blind());
        let _ = writeln!(s, "check_ungated_mse_ge_0.9_var = {}", self.ungated_fails());
        let _ = writeln!(s, "check_gated_mse_le_0.1_var = {}", self.gated_fits());
        let _ = writeln!(s, "pass = {}", self.passed());
        s
    }
}

/// Training and test sets for the gate task: one seeded set of four unit
/// vectors shared by every example, `s ~ U(−1, 1)`, target `s · v₁`.
pub fn gate_data(seed: u64, n_train: usize, n_test: usize) -> (Vec<VecExample>, Vec<VecExample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<[f64; 3]> = (0..4).map(|_| unit(gaussian3(&mut rng))).collect();
    let mut draw = |n: usize| -> Vec<VecExample> {
        (0..n)
            .map(|_| {
                let s: f64 = rng.random_range(-1.0..1.0);
                VecExample { s: vec![s], v: v.clone(), target: vec![v[0].map(|x| s * x)] }
            })
            .collect()
    };
    let train = draw(n_train);
    let test = draw(n_test);
    (train, test)
}

fn gate_stack(gated: bool, hidden: (usize, usize), seed: u64) -> anyhow::Result<GvpStack> {
    let make = |i, o| if gated { GvpConfig::new(i, o) } else { GvpConfig::original(i, o) };
    // The last GVP keeps scalar outputs: the gate reads them.
    let configs = vec![make((1, 4), hidden), make(hidden, hidden), make(hidden, (hidden.0, 1))];
    Ok(GvpStack::new(configs, seed)?)
}

pub fn demo_gate(opts: &GateOptions) -> anyhow::Result<GateReport> {
    let (train, test) = gate_data(opts.seed, opts.n_train, opts.n_test);
    let fit_opts = FitOptions { seed: opts.seed, ..opts.fit.clone() };
    let mut gated = gate_stack(true, opts.hidden, opts.seed)?;
    let mut ungated = gate_stack(false, opts.hidden, opts.seed)?;
    fit(&mut gated, &train, &fit_opts)?;
    fit(&mut ungated, &train, &fit_opts)?;
    Ok(GateReport {
        options: opts.clone(),
        target_variance: target_variance(&test),
        gated_mse: test_mse(&gated, &test)?,
        ungated_mse: test_mse(&ungated, &test)?,
        gated_grad_s: max_grad_wrt_scalars(&gated, &test)?,
        ungated_grad_s: max_grad_wrt_scalars(&ungated, &test)?,
    })
}

/// Coefficient functions for the approximation target.
#[derive(Debug, Clone, PartialEq)]
pub enum Coefficients {
    /// `cᵢ = tanh(aᵢ · d(V))` with `d` the pairwise row distances and `aᵢ`
    /// drawn from the seed.
    Random,
    Constant([f64; 3]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApproxOptions {
    pub nu: usize,
    pub width: usize,
    /// Narrower widths trained under the same budget for comparison.
    pub compare: Vec<usize>,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub coefficients: Coefficients,
    pub fit: FitOptions,
}

impl Default for ApproxOptions {
    fn default() -> Self {
        Self {
            nu: 5,
            width: 64,
            compare: vec![8, 16, 32],
            seed: 0,
            n_train: 2048,
            n_test: 512,
            coefficients: Coefficients::Random,
            fit: FitOptions { steps: 4000, batch: 64, lr: 3e-3, seed: 0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApproxReport {
    pub options: ApproxOptions,
    /// `(width, held-out per-coordinate MAE)`, ascending width.
    pub sweep: Vec<(usize, f64)>,
    pub target_mean_abs: f64,
    pub equivariance: f64,
}

impl ApproxReport {
    pub fn mae(&self) -> f64 {
        self.sweep.iter().find(|(w, _)| *w == self.options.width).map(|(_, m)| *m).expect("main width is in the sweep")
    }

    pub fn narrowest_worse(&self) -> bool {
        self.sweep.first().is_none_or(|(w, m)| *w == self.options.width || *m > self.mae())
    }

    pub fn strictly_decreasing(&self) -> bool {
        self.sweep.windows(2).all(|p| p[1].1 < p[0].1)
    }

    pub fn passed(&self, mae_tol: f64) -> bool {
        self.mae() <= mae_tol && self.narrowest_worse() && self.equivariance <= 1e-10
    }

    pub fn to_text(&self, mae_tol: f64) -> String {
        let o = &self.options;
        let mut s = String::new();
        let _ = writeln!(s, "demo = approx");
        let _ = writeln!(s, "seed = {}", o.seed);
        let _ = writeln!(s, "nu = {}", o.nu);
        let _ = writeln!(s, "width = {}", o.width);
        let _ = writeln!(s, "coefficients = {}", match o.coefficients {
            Coefficients::Random => "random".to_string(),
            Coefficients::Constant(c) => format!("constant {:?},{:?},{:?}", c[0], c[1], c[2]),
        });
        let _ = writeln!(s, "train_samples = {}", o.n_train);
        let _ = writeln!(s, "test_samples = {}", o.n_test);
        let _ = writeln!(s, "steps = {}", o.fit.steps);
        let _ = writeln!(s, "batch = {}", o.fit.batch);
        let _ = writeln!(s, "lr = {:?}", o.fit.lr);
        let _ = writeln!(s, "target_mean_abs = {:?}", self.target_mean_abs);
        for (w, m) in &self.sweep {
            let _ = writeln!(s, "mae_width_{w} = {m:?}");
        }
        let _ = writeln!(s, "equivariance_max_rel = {:?}", self.equivariance);
        let _ = writeln!(s, "check_mae_le_{mae_tol} = {}", self.mae() <= mae_tol);
        let _ = writeln!(s, "check_narrowest_worse = {}", self.narrowest_worse());
        let _ = writeln!(s, "mae_strictly_decreasing = {}", self.strictly_decreasing());
        let _ = writeln!(s, "check_equivariance_le_1e-10 = {}", self.equivariance <= 1e-10);
        let _ = writeln!(s, "pass = {}", self.passed(mae_tol));
        s
    }
}

fn pairwise_distances(v: &[[f64; 3]]) -> Vec<f64> {
    let mut out = Vec::new();
    for j in 0..v.len() {
        for k in j + 1..v.len() {
            let d = [v[j][0] - v[k][0], v[j][1] - v[k][1], v[j][2] - v[k][2]];
            out.push((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt());
        }
    }
    out
}

/// Rows with uniform random directions and norms in `[0.1, 1]`; the first
/// three rows are redrawn until `|det| ≥ 0.05`.
pub fn sample_omega(nu: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    loop {
        let v: Vec<[f64; 3]> = (0..nu)
            .map(|_| {
                let r: f64 = rng.random_range(0.1..=1.0);
                unit(gaussian3(rng)).map(|x| r * x)
            })
            .collect();
        if det3(&[v[0], v[1], v[2]]).abs() >= 0.05 {
            return v;
        }
    }
}

/// Gain of the random coefficient combinations; larger values make the
/// coefficients vary faster over the input set.
pub const COEFF_GAIN: f64 = 3.0;

pub fn approx_data(opts: &ApproxOptions) -> (Vec<VecExample>, Vec<VecExample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let features = opts.nu * (opts.nu - 1) / 2;
    let scale = COEFF_GAIN / (features as f64).sqrt();
    let a: Vec<Vec<f64>> = (0..3).map(|_| (0..features).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()).collect();
    let coeffs = |v: &[[f64; 3]]| -> [f64; 3] {
        match &opts.coefficients {
            Coefficients::Constant(c) => *c,
            Coefficients::Random => {
                let d = pairwise_distances(v);
                [0, 1, 2].map(|i| a[i].iter().zip(&d).map(|(x, y)| x * y).sum::<f64>().tanh())
            }
        }
    };
    let mut draw = |n: usize| -> Vec<VecExample> {
        (0..n)
            .map(|_| {
                let v = sample_omega(opts.nu, &mut rng);
                let c = coeffs(&v);
                let f = [0, 1, 2].map(|k| c[0] * v[0][k] + c[1] * v[1][k] + c[2] * v[2][k]);
                VecExample { s: Vec::new(), v, target: vec![f] }
            })
            .collect()
    };
    let train = draw(opts.n_train);
    let test = draw(opts.n_test);
    (train, test)
}

pub fn approx_stack(nu: usize, width: usize, seed: u64) -> anyhow::Result<GvpStack> {
    let configs = vec![
        GvpConfig::new((0, nu), (width, width)),
        GvpConfig::new((width, width), (width, width)),
        GvpConfig::new((width, width), (width, 1)),
    ];
    Ok(GvpStack::new(configs, seed)?)
}

/// Max relative deviation of `f(QV)` from `Q f(V)` over the first 20 test
/// inputs and 20 orthogonal maps, half of them improper.
pub fn stack_equivariance(stack: &GvpStack, data: &[VecExample], seed: u64) -> anyhow::Result<f64> {
    let mut worst = 0.0f64;
    for (i, ex) in data.iter().take(20).enumerate() {
        let base = predict(stack, ex)?;
        for t in 0..20u64 {
            let q = random_orthogonal(seed.wrapping_add(1000 * i as u64 + t), false);
            let q = if t % 2 == 1 { Orthogonal3::new(q.matrix().map(|r| r.map(|x| -x)))? } else { q };
            let moved = VecExample { v: apply_orthogonal(&q, &gvp_core::VectorChannels(ex.v.clone())).0, ..ex.clone() };
            let got = predict(stack, &moved)?;
            let want = apply_orthogonal(&q, &gvp_core::VectorChannels(base.clone())).0;
            let (mut diff, mut scale) = (0.0f64, 0.0f64);
            for (g, w) in got.iter().flatten().zip(want.iter().flatten()) {
                diff = diff.max((g - w).abs());
                scale = scale.max(w.abs());
            }
            worst = worst.max(diff / scale.max(1e-12));
        }
    }
    Ok(worst)
}

pub fn demo_approx(opts: &ApproxOptions) -> anyhow::Result<ApproxReport> {
    anyhow::ensure!(opts.nu >= 3, "nu must be at least 3, got {}", opts.nu);
    let (train, test) = approx_data(opts);
    let mut widths: Vec<usize> = opts.compare.iter().copied().filter(|&w| w < opts.width).collect();
    widths.push(opts.width);
    widths.sort_unstable();
    widths.dedup();
    let fit_opts = FitOptions { seed: opts.seed, ..opts.fit.clone() };
    let mut sweep = Vec::new();
    let mut equivariance = 0.0;
    for &w in &widths {
        let mut stack = approx_stack(opts.nu, w, opts.seed)?;
        fit(&mut stack, &train, &fit_opts)?;
        sweep.push((w, test_mae(&stack, &test)?));
        if w == opts.width {
            equivariance = stack_equivariance(&stack, &test, opts.seed)?;
        }
    }
    let target_mean_abs = test.iter().flat_map(|e| e.target.iter().flatten()).map(|x| x.abs()).sum::<f64>() / (3 * test.len()) as f64;
    Ok(ApproxReport { options: opts.clone(), sweep, target_mean_abs, equivariance })
}
