//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any mandatory check fails.

mod support;

use std::process::Command;
use std::time::Instant;

use gvp::demos::{demo_approx, demo_gate, ApproxOptions, GateOptions};
use gvp_core::audit::{audit_equivariance, TransformClass};
use gvp_core::autodiff::{finite_diff_check, AutodiffError, FdOptions};
use gvp_core::checkpoint::{transfer_load, Checkpoint, TRANSFER_PREFIXES};
use gvp_core::graph::{build_radius_graph, featurize, rbf_encode, AtomRecord, ElementVocab, MolGraph, RbfBasis, DEFAULT_CUTOFF};
use gvp_core::gvp::{init_params, record_gvp, GvpConfig, GvpError, GvpWeights};
use gvp_core::model::{forward_pair, forward_states, GvpGnnModel, Mode, ModelConfig, ModelError, Recorder, TaskMode};
use gvp_core::svt::random_orthogonal;
use gvp_core::train::{smooth_history, train_loop, Sample, TrainConfig};
use gvp_core::{Tape, Tensor, ValueId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{max_rel_diff, oracle, random_atoms, random_graph, random_tagged_graph};

struct Outcome {
    pass: bool,
    detail: String,
    /// Reported but not gating.
    advisory: Option<(bool, String)>,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail, advisory: None }
    }
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

fn equivariance() -> Outcome {
    let start = Instant::now();
    // 50 trials per class: 50 proper and 50 improper orthogonal maps (each
    // with a translation) plus 50 pure translations and 50 relabelings.
    let trials = 50;
    let mut worst = [0.0f64; 4];
    for i in 0..20u64 {
        let n = 5 + (45 * i as usize) / 19;
        let graph = random_graph(1000 + i, n);
        let model = GvpGnnModel::new(ModelConfig::default(), i).unwrap();
        let report = audit_equivariance(&model, &graph, trials, 10_000 * i).unwrap();
        for c in TransformClass::ALL {
            worst[c as usize] = worst[c as usize].max(report.class(c).max_rel);
        }
    }
    let t = secs(start);
    let max = worst.iter().copied().fold(0.0, f64::max);
    let pass = max <= 1e-10 && worst[TransformClass::Translation as usize] <= 1e-12 && t < 120.0;
    Outcome::new(
        pass,
        format!(
            "20 graphs (5..50 atoms) x 100 orthogonal maps (50 det+1, 50 det-1, all translated); max rel dev rotation {:.1e} reflection {:.1e} translation {:.1e} permutation {:.1e}; {t:.1}s (limit 120s)",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn gvp_fd() -> f64 {
    let cfg = GvpConfig::new((116, 17), (100, 16));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = init_params(&cfg, 7);
    for (_, t) in params.named_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.05..0.05);
        }
    }
    let s: Vec<f64> = (0..116).map(|_| rng.random_range(-1.0..1.0)).collect();
    let v: Vec<[f64; 3]> = (0..17).map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0))).collect();
    let ts: Vec<f64> = (0..100).map(|_| rng.random_range(-1.0..1.0)).collect();
    let tv: Vec<[f64; 3]> = (0..16).map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0))).collect();
    let f = move |tape: &mut Tape, leaves: &[ValueId]| -> Result<ValueId, AutodiffError> {
        let w = GvpWeights { w_h: leaves[0], w_mu: leaves[1], w_m: leaves[2], b_m: leaves[3], w_g: Some(leaves[4]), b_g: Some(leaves[5]) };
        let si = tape.constant(Tensor::column(s.clone()));
        let vi = tape.constant(Tensor::from_rows3(&v));
        let t = record_gvp(tape, &cfg, &w, si, vi).map_err(|e| match e {
            GvpError::Autodiff(a) => a,
            other => panic!("{other}"),
        })?;
        let a = tape.constant(Tensor::column(ts.clone()));
        let b = tape.constant(Tensor::from_rows3(&tv));
        let ls = tape.mse(t.s_out, a)?;
        let lv = tape.mse(t.v_out, b)?;
        tape.add(ls, lv)
    };
    let mut tensors: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
    let groups: Vec<Vec<usize>> = (0..tensors.len()).map(|i| vec![i]).collect();
    finite_diff_check(f, &mut tensors, &groups, FdOptions::default()).unwrap().max_rel_error
}

fn model_fd() -> (f64, usize, usize) {
    let mut model = GvpGnnModel::new(ModelConfig::default(), 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (_, t) in model.named_tensors_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.02..0.02);
        }
    }
    let graph = random_graph(77, 10);
    // Target 0.05 above the current output: central differences round at the
    // magnitude of the loss, which must stay small next to the 1e-8 floor.
    let target = forward_states(&model, &graph).unwrap().output[0] + 0.05;
    let classes = ["embed", ".msg.", ".ff.", ".norm.", "readout", "head"];
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    let groups: Vec<Vec<usize>> =
        classes.iter().map(|c| names.iter().enumerate().filter(|(_, n)| n.contains(c)).map(|(i, _)| i).collect()).collect();
    let m = model.clone();
    let f = move |tape: &mut Tape, leaves: &[ValueId]| -> Result<ValueId, AutodiffError> {
        let mut it = leaves.iter().copied();
        let rec = Recorder::new(&m, m.weights.map(&mut |_| it.next().unwrap()));
        let out = rec.forward(tape, &graph, &mut Mode::<ChaCha8Rng>::Eval).map_err(|e| match e {
            ModelError::Autodiff(a) => a,
            other => panic!("{other}"),
        })?;
        let t = tape.constant(Tensor::scalar(target));
        tape.mse(out, t)
    };
    let mut params = model.tensors();
    // A probe that flips a relu measures a secant; such coordinates are
    // replaced by fresh draws and counted.
    let r = finite_diff_check(f, &mut params, &groups, FdOptions { skip_kinks: true, ..FdOptions::default() }).unwrap();
    (r.max_rel_error, r.checked, r.skipped)
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let g = gvp_fd();
    let (m, checked, skipped) = model_fd();
    Outcome::new(
        g <= 1e-5 && m <= 1e-4,
        format!("h=1e-5; gated GVP (116,17)->(100,16) max rel err {g:.2e} (limit 1e-5); 5-layer model on 10 atoms, {checked} coords over 6 tensor classes ({skipped} kink-crossing coords redrawn), max rel err {m:.2e} (limit 1e-4); {:.1}s", secs(start)),
    )
}

fn oracle_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    let mut graphs = 0;
    let flat = |layers: &[Vec<gvp_core::SvTuple>]| -> Vec<f64> {
        layers.iter().flatten().flat_map(|x| x.s.0.iter().copied().chain(x.v.0.iter().flatten().copied())).collect()
    };
    let flat_o = |layers: &[Vec<oracle::Node>]| -> Vec<f64> {
        layers.iter().flatten().flat_map(|x| x.s.iter().copied().chain(x.v.iter().flatten().copied())).collect()
    };
    let configs = [
        ModelConfig::default(),
        ModelConfig { variant: gvp_core::gvp::Variant::Original, ..ModelConfig::default() },
        ModelConfig { task_mode: TaskMode::NodeReadout, ..ModelConfig::default() },
    ];
    for (c, cfg) in configs.into_iter().enumerate() {
        let model = GvpGnnModel::new(cfg, 50 + c as u64).unwrap();
        for seed in 0..20u64 {
            let n = 1 + seed as usize % 5;
            let g = if model.config().task_mode == TaskMode::NodeReadout { random_tagged_graph(seed, n) } else { random_graph(seed, n) };
            let got = forward_states(&model, &g).unwrap();
            let want = oracle::run(&model, &g);
            worst = worst
                .max(max_rel_diff(&got.output, &want.output))
                .max(max_rel_diff(&got.pooled, &want.pooled))
                .max(max_rel_diff(&flat(&got.layers), &flat_o(&want.layers)));
            graphs += 1;
        }
    }
    let paired = GvpGnnModel::new(ModelConfig { task_mode: TaskMode::Paired, ..ModelConfig::default() }, 60).unwrap();
    for seed in 0..10u64 {
        let (a, b) = (random_graph(seed, 1 + seed as usize % 5), random_graph(seed + 500, 5 - seed as usize % 5));
        let got = forward_pair::<ChaCha8Rng>(&paired, &a, &b, None).unwrap();
        worst = worst.max(max_rel_diff(&got, &oracle::run_pair(&paired, &a, &b)));
        graphs += 2;
    }
    Outcome::new(worst <= 1e-12, format!("{graphs} seeded graphs of 1..5 atoms (gated, ungated, tagged readout, paired); max rel dev {worst:.1e} (limit 1e-12)"))
}

fn gate() -> Outcome {
    let start = Instant::now();
    let opts = GateOptions::default();
    let r = demo_gate(&opts).unwrap();
    let t = secs(start);
    Outcome::new(
        r.passed() && opts.fit.steps <= 5000 && t < 300.0,
        format!(
            "ungated max|dL/ds| {:e} (must be exactly 0); ungated MSE/Var {:.3} (>= 0.9); gated MSE/Var {:.2e} (<= 0.1); {} steps; {t:.1}s",
            r.ungated_grad_s,
            r.ungated_mse / r.target_variance,
            r.gated_mse / r.target_variance,
            opts.fit.steps
        ),
    )
}

fn approx() -> Outcome {
    let start = Instant::now();
    let r = demo_approx(&ApproxOptions::default()).unwrap();
    let t = secs(start);
    let sweep: Vec<String> = r.sweep.iter().map(|(w, m)| format!("{w}:{m:.4}")).collect();
    Outcome::new(
        r.mae() <= 0.05 && r.strictly_decreasing() && r.equivariance <= 1e-10 && t < 600.0,
        format!(
            "MAE by width [{}] (width 64 <= 0.05, strictly decreasing: {}); learned equivariance {:.1e} incl. det -1 (<= 1e-10); {t:.1}s",
            sweep.join(" "),
            r.strictly_decreasing(),
            r.equivariance
        ),
    )
}

/// Samples whose target is a function of interatomic distances.
fn synthetic(seed: u64, count: usize, atoms: (usize, usize), label: impl Fn(&MolGraph) -> f64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = ElementVocab::default();
    let raw: Vec<(MolGraph, f64)> = (0..count)
        .map(|_| {
            let n = rng.random_range(atoms.0..=atoms.1);
            let g = featurize(&random_atoms(&mut rng, n), &vocab, DEFAULT_CUTOFF).unwrap();
            let y = label(&g);
            (g, y)
        })
        .collect();
    let mean = raw.iter().map(|(_, y)| y).sum::<f64>() / count as f64;
    let sd = (raw.iter().map(|(_, y)| (y - mean).powi(2)).sum::<f64>() / count as f64).sqrt().max(1e-12);
    raw.into_iter().map(|(g, y)| Sample::single(g, vec![(y - mean) / sd])).collect()
}

fn inverse_distance(g: &MolGraph) -> f64 {
    g.edges.iter().map(|e| 1.0 / e.distance).sum::<f64>() / g.num_nodes() as f64
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let data = synthetic(6, 32, (3, 4), inverse_distance);
    let mut model = GvpGnnModel::new(ModelConfig { dropout: 0.0, ..ModelConfig::default() }, 6).unwrap();
    let batch = 4;
    let steps_per_epoch = 32 / batch;
    // One continuous run so Adam state carries across epochs; the training
    // set doubles as the validation set to get full-set MSE after each epoch.
    let cfg = TrainConfig { lr: 1e-3, batch_size: batch, max_epochs: 2000 / steps_per_epoch, seed: 6, ..TrainConfig::default() };
    let history = train_loop(&mut model, &data, &data, &cfg).unwrap();
    let reached = history.val_loss.iter().position(|&l| l < 1e-3).map(|e| (e + 1) * steps_per_epoch);
    let loss = match reached {
        Some(s) => history.val_loss[s / steps_per_epoch - 1],
        None => *history.val_loss.last().unwrap(),
    };
    let steps = cfg.max_epochs * steps_per_epoch;
    let t = secs(start);
    match reached {
        Some(s) => Outcome::new(true, format!("32 samples, standardized targets, Adam lr=1e-3 batch 4, dropout 0: full-set MSE {loss:.3e} < 1e-3 after {s} steps (limit 2000); {t:.1}s")),
        None => Outcome::new(false, format!("full-set MSE {loss:.2e} after {steps} steps, never below 1e-3; {t:.1}s")),
    }
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

fn transfer() -> Outcome {
    let start = Instant::now();
    let mut exact = true;
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        let source_data = synthetic(100 + seed, 96, (3, 6), inverse_distance);
        let target_all = synthetic(200 + seed, 72, (3, 6), |g| g.edges.iter().map(|e| (-e.distance).exp()).sum::<f64>() / g.num_nodes() as f64);
        let (train, val) = target_all.split_at(48);

        let mut source = GvpGnnModel::new(ModelConfig::default(), 300 + seed).unwrap();
        train_loop(&mut source, &source_data, &[], &TrainConfig { max_epochs: 5, seed, ..TrainConfig::default() }).unwrap();
        let ckpt = Checkpoint::decode(&Checkpoint::from_model(&source).encode()).unwrap();

        let target = GvpGnnModel::new(ModelConfig::default(), 400 + seed).unwrap();
        let (fine, copied) = transfer_load(&ckpt, &target, &TRANSFER_PREFIXES).unwrap();
        let fresh = target.reinitialized();
        for ((name, t), (_, f)) in fine.named_tensors().into_iter().zip(fresh.named_tensors()) {
            let want = if copied.contains(&name) { ckpt.tensor(&name).unwrap() } else { f };
            let prefixed = TRANSFER_PREFIXES.iter().any(|p| name == *p || name.starts_with(&format!("{p}.")));
            exact &= bits(t) == bits(want) && prefixed == copied.contains(&name);
        }

        let cfg = TrainConfig { max_epochs: 10, seed: 900 + seed, ..TrainConfig::default() };
        let mut fine = fine;
        let mut scratch = target.clone();
        let hf = train_loop(&mut fine, train, val, &cfg).unwrap();
        let hs = train_loop(&mut scratch, train, val, &cfg).unwrap();
        let (sf, ss) = (smooth_history(&hf.val_loss, 2.0), smooth_history(&hs.val_loss, 2.0));
        if sf[0] <= ss[0] {
            wins += 1;
        }
        rows.push(format!("seed {seed}: fine-tune {:.4} vs scratch {:.4}", sf[0], ss[0]));
    }
    let mut o = Outcome::new(exact, format!("embed + layer.0 + layer.1 copied bit-exactly and the rest equal to fresh init in 3/3 runs: {exact}; {:.1}s", secs(start)));
    o.advisory = Some((wins >= 2, format!("smoothed (sigma=2) val loss at epoch 1, fine-tune <= scratch in {wins}/3 seeds ({})", rows.join("; "))));
    o
}

fn brute_force(points: &[[f64; 3]], cutoff: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..points.len() {
        for j in 0..points.len() {
            let d = (0..3).map(|k| (points[i][k] - points[j][k]).powi(2)).sum::<f64>().sqrt();
            if i != j && d < cutoff {
                out.push((i, j));
            }
        }
    }
    out
}

fn featurization() -> Outcome {
    let vocab = ElementVocab::default();
    let mut exact = true;
    let mut general = 0.0f64;
    let mut graphs_ok = true;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..60);
        // 1/64 Å grid: translated coordinates and all differences are exact.
        let grid: Vec<[f64; 3]> = (0..n).map(|_| [0, 1, 2].map(|_| rng.random_range(0..1024) as f64 / 64.0)).collect();
        let atoms: Vec<AtomRecord> = grid.iter().map(|p| AtomRecord::new("C", *p)).collect();
        let shift = [0, 1, 2].map(|_| rng.random_range(-4096..4096) as f64 / 64.0);
        let moved: Vec<AtomRecord> = atoms.iter().map(|a| AtomRecord::new("C", [0, 1, 2].map(|k| a.position[k] + shift[k]))).collect();
        match (featurize(&atoms, &vocab, DEFAULT_CUTOFF), featurize(&moved, &vocab, DEFAULT_CUTOFF)) {
            (Ok(a), Ok(b)) => exact &= a.edges == b.edges && a.node_scalars == b.node_scalars,
            (Err(_), Err(_)) => {} // coincident grid points
            _ => exact = false,
        }
        let pts: Vec<[f64; 3]> = (0..n).map(|_| [0, 1, 2].map(|_| rng.random_range(-8.0..8.0))).collect();
        graphs_ok &= build_radius_graph(&pts, DEFAULT_CUTOFF).unwrap() == brute_force(&pts, DEFAULT_CUTOFF);
        let g = featurize(&pts.iter().map(|p| AtomRecord::new("N", *p)).collect::<Vec<_>>(), &vocab, DEFAULT_CUTOFF).unwrap();
        let t = [0, 1, 2].map(|_| rng.random_range(-10.0..10.0));
        let h = g.transformed(&random_orthogonal(seed, true), t).unwrap();
        if g.num_edges() != h.num_edges() {
            general = f64::INFINITY;
        }
        for (a, b) in g.edges.iter().zip(&h.edges) {
            general = general.max((a.distance - b.distance).abs());
        }
    }
    let basis = RbfBasis::default();
    let peaks = (0..basis.count).all(|k| rbf_encode(basis.center(k), &basis)[k] == 1.0);
    Outcome::new(
        exact && graphs_ok && peaks,
        format!("grid translations bit-identical on 100 sets: {exact}; radius graph == O(N^2) oracle on 100 sets: {graphs_ok}; rbf peak exactly 1.0 at all 16 centers: {peaks}; arbitrary rigid motions move distances by at most {general:.1e}"),
    )
}

fn run_cli(args: &[&str]) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_gvp")).args(args).output().expect("binary runs");
    (o.status.code().unwrap_or(-1), String::from_utf8_lossy(&o.stderr).into())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let p = |n: &str| d.join(n).to_str().unwrap().to_string();
    let mut lines = String::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..10 {
        let atoms = random_atoms(&mut rng, 3 + i % 3);
        let xyz: String = atoms.iter().map(|a| format!("{} {} {} {}\n", a.element, a.position[0], a.position[1], a.position[2])).collect();
        std::fs::write(d.join(format!("{i}.xyz")), format!("{}\nm\n{xyz}", atoms.len())).unwrap();
        let (code, err) = run_cli(&["graph-build", "--in", &p(&format!("{i}.xyz")), "--out", &p(&format!("{i}.json"))]);
        assert_eq!(code, 0, "{err}");
        lines.push_str(&format!("{i}.json {:?}\n", (i as f64 * 0.37).sin()));
    }
    let all: Vec<&str> = lines.lines().collect();
    std::fs::write(d.join("train.txt"), all[..8].join("\n")).unwrap();
    std::fs::write(d.join("val.txt"), all[8..].join("\n")).unwrap();
    std::fs::write(d.join("run.cfg"), "max_epochs = 3\nbatch_size = 3\nmetric = spearman\n").unwrap();
    let train = |tag: &str| {
        let (code, err) = run_cli(&["train", "--manifest", &p("train.txt"), "--val-manifest", &p("val.txt"), "--config", &p("run.cfg"), "--out", &p(&format!("{tag}.gvpc")), "--seed", "4"]);
        assert_eq!(code, 0, "{err}");
        (std::fs::read(d.join(format!("{tag}.gvpc"))).unwrap(), std::fs::read(d.join(format!("{tag}.gvpc.history.csv"))).unwrap())
    };
    let (c1, h1) = train("a");
    let (c2, h2) = train("b");
    Outcome::new(
        c1 == c2 && h1 == h2 && h1.iter().filter(|&&b| b == b'\n').count() == 4,
        format!("two CLI train runs (default model, dropout 0.1, seed 4): checkpoints identical {} ({} bytes), histories identical {}", c1 == c2, c1.len(), h1 == h2),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("equivariance suite", equivariance),
        ("gradient correctness", gradients),
        ("oracle equivalence", oracle_equivalence),
        ("scalar-to-vector propagation (demo-gate)", gate),
        ("universal approximation (demo-approx)", approx),
        ("overfitting capacity", overfit),
        ("transfer protocol", transfer),
        ("featurization invariants", featurization),
        ("training determinism (CLI)", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|f| *f == id) {
            continue;
        }
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        if !outcome.pass {
            failed += 1;
        }
        println!("{} [{id}] {name}: {}", if outcome.pass { "PASS" } else { "FAIL" }, outcome.detail);
        if let Some((ok, text)) = outcome.advisory {
            println!("{} [{id}] {name} (reported, not gating): {text}", if ok { "PASS" } else { "FAIL" });
        }
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
