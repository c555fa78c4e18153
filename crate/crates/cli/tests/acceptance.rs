//! End-to-end acceptance suite. Every criterion runs in sequence inside one
//! test so the wall-clock limits are measured without competing threads.
//! Each criterion prints one PASS/FAIL line to stderr (uncaptured).

use mcomm::config::ExperimentConfig;
use mcomm_core::envs::{EnvConfig, SumSignalConfig, TjConfig};
use mcomm_core::gradcore::{Graph, Matrix, NodeId, Op};
use mcomm_core::metrics::{comm_count, compute_cems, epoch_entropy, message_entropy, pairwise_similarity};
use mcomm_core::protocol::decentralized::run_decentralized;
use mcomm_core::protocol::{Mode, ProtocolSpec, RoundState, Roster, TopologyKind};
use mcomm_core::training::{augmented_loss, dynamic_weights, smoothed_terms, substream, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

type Outcome = Result<String, String>;

fn say(line: &str) {
    let _ = writeln!(std::io::stderr().lock(), "{line}");
}

fn criterion(n: usize, title: &str, limit: Option<Duration>, body: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(body)).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    });
    let took = start.elapsed();
    let over = limit.filter(|l| took > *l);
    let pass = result.is_ok() && over.is_none();
    let detail = match (&result, over) {
        (Ok(d), None) => d.clone(),
        (Ok(d), Some(l)) => format!("{d}; over the {:.0} s limit", l.as_secs_f64()),
        (Err(e), _) => e.clone(),
    };
    say(&format!(
        "criterion {n} {}: {title} ({:.1} s) — {detail}",
        if pass { "PASS" } else { "FAIL" },
        took.as_secs_f64()
    ));
    pass
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn config(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{name}.toml"));
    ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

struct Run {
    trainer: Trainer,
    /// Per-epoch indices from the training rollouts.
    iei: Vec<Option<f64>>,
    sei: Vec<Option<f64>>,
    max_train_success: f64,
    max_eval_success: f64,
    /// Epoch at which the configured stop target was reached.
    reached: Option<usize>,
}

fn train(cfg: &ExperimentConfig, seed: u64) -> Run {
    let training = TrainConfig { seed, ..cfg.training.clone() };
    let mut trainer = Trainer::new(cfg.env.clone(), cfg.protocol.clone(), training).unwrap();
    let (mut iei, mut sei, mut max_train, mut max_eval, mut reached) = (vec![], vec![], 0f64, 0f64, None);
    while trainer.epoch < trainer.config.epochs {
        let r = trainer.train_epoch().unwrap();
        iei.push(r.stats.iei);
        sei.push(r.stats.sei);
        max_train = max_train.max(r.stats.success);
        max_eval = max_eval.max(r.eval_success.unwrap_or(0.0));
        if r.reached(trainer.config.stop_success) {
            reached = Some(trainer.epoch);
            break;
        }
    }
    Run { trainer, iei, sei, max_train_success: max_train, max_eval_success: max_eval, reached }
}

// ---- 1: metrics against brute force ----

fn entropy_oracle(m: &[f64]) -> f64 {
    let total: f64 = m.iter().map(|v| v.abs()).sum();
    let mut h = 0.0;
    for v in m {
        let p = v.abs() / (total + 1e-10);
        if p > 0.0 {
            h -= p * p.log2();
        }
    }
    h
}

fn cosine_oracle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn random_rounds(r: &mut ChaCha8Rng) -> Vec<RoundState> {
    let (n, d) = (r.gen_range(1..6), r.gen_range(1..7));
    (0..r.gen_range(1..5))
        .map(|_| {
            let mut m = Matrix::zeros(n, d);
            for i in 0..n {
                // Occasionally an all-zero message.
                if r.gen_bool(0.9) {
                    m.row_mut(i).iter_mut().for_each(|v| *v = r.gen_range(-2.0..2.0));
                }
            }
            let mut g = Matrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    if i != j && r.gen_bool(0.5) {
                        g.set(i, j, 1.0);
                    }
                }
            }
            let active = (0..n).map(|_| r.gen_bool(0.8)).collect();
            RoundState { hidden: m.clone(), pre_messages: m.clone(), messages: m, topology: g, attention: None, active }
        })
        .collect()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}

fn metrics_oracle() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    for case in 0..1000 {
        let rounds = random_rounds(&mut r);
        let (n, d) = rounds[0].pre_messages.shape();
        let v: Vec<f64> = (0..d).map(|_| r.gen_range(-3.0..3.0)).collect();
        ensure(close(message_entropy(&v), entropy_oracle(&v)), || format!("case {case}: message entropy"))?;

        let (mut h_means, mut x_means, mut ones) = (vec![], vec![], 0usize);
        for s in &rounds {
            let live: Vec<usize> = (0..n).filter(|&i| s.active[i]).collect();
            if !live.is_empty() {
                h_means.push(live.iter().map(|&i| entropy_oracle(s.pre_messages.row(i))).sum::<f64>() / live.len() as f64);
            }
            let mut pair_sum = 0.0;
            let mut pairs = 0;
            for a in 0..live.len() {
                for b in a + 1..live.len() {
                    pair_sum += cosine_oracle(s.pre_messages.row(live[a]), s.pre_messages.row(live[b]));
                    pairs += 1;
                }
            }
            if pairs > 0 {
                x_means.push(pair_sum / pairs as f64);
            }
            for i in 0..n {
                for j in 0..n {
                    ones += (s.topology.get(i, j) == 1.0) as usize;
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        match epoch_entropy(&rounds) {
            Ok(h) => ensure(!h_means.is_empty() && close(h, mean(&h_means)), || format!("case {case}: entropy"))?,
            Err(_) => ensure(h_means.is_empty(), || format!("case {case}: entropy rejected"))?,
        }
        match pairwise_similarity(&rounds) {
            Ok(x) => ensure(!x_means.is_empty() && close(x, mean(&x_means)), || format!("case {case}: similarity"))?,
            Err(_) => ensure(x_means.is_empty(), || format!("case {case}: similarity rejected"))?,
        }
        ensure(comm_count(&rounds) == ones, || format!("case {case}: comm count"))?;

        let success = if r.gen_bool(0.2) { r.gen_range(0.0..0.05) } else { r.gen_range(0.0..=1.0) };
        let (h, x) = (r.gen_range(0.0..4.0), r.gen_range(-1.0..1.0));
        let c = if r.gen_bool(0.2) { 0 } else { ones };
        let cems = compute_cems(success, h, x, c, 0.05).unwrap();
        let s = if success < 0.05 { 0.05 } else { success };
        ensure(close(cems.iei, h / s) && close(cems.sei, x / s), || format!("case {case}: IEI/SEI"))?;
        match (cems.tei, c) {
            (None, 0) => {}
            (Some(t), c) if c > 0 => ensure(close(t, success / c as f64), || format!("case {case}: TEI"))?,
            _ => return Err(format!("case {case}: TEI nullness")),
        }
        checked += 1;
    }
    Ok(format!("{checked} random cases agree to 1e-9"))
}

// ---- 2: gradients ----

fn fd_params(g: &Graph, loss: NodeId, step: f64, tol: f64, what: &str) -> Result<usize, String> {
    let grads = g.backward(loss).map_err(|e| e.to_string())?;
    let mut bound = HashMap::new();
    let mut params = vec![];
    for n in g.nodes() {
        match &n.op {
            Op::Input(name) => {
                bound.insert(name.clone(), n.value.clone());
            }
            Op::Param(name) => params.push((name.clone(), n.value.clone())),
            _ => {}
        }
    }
    let mut count = 0;
    for (name, value) in params {
        let analytic = grads.param(&name).unwrap();
        for k in 0..value.len() {
            let at = |delta: f64| {
                let mut v = value.clone();
                v.data_mut()[k] += delta;
                let mut b = bound.clone();
                b.insert(name.clone(), v);
                g.eval(&b).unwrap()["loss"].get(0, 0)
            };
            let numeric = (at(step) - at(-step)) / (2.0 * step);
            let a = analytic.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            ensure(rel < tol, || format!("{what}: d/d{name}[{k}] analytic {a} vs numeric {numeric}"))?;
            count += 1;
        }
    }
    Ok(count)
}

fn rand_m(r: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.gen_range(lo..hi)).collect())
}

fn signed(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let m = rand_m(r, rows, cols, 0.3, 1.5);
    let signs = rand_m(r, rows, cols, -1.0, 1.0);
    m.zip_map(&signs, |v, s| if s < 0.0 { -v } else { v })
}

type Build = fn(&mut Graph, &mut ChaCha8Rng) -> NodeId;

fn op_cases() -> Vec<(&'static str, Build)> {
    vec![
        ("identity", |g, r| {
            let a = g.param("a", rand_m(r, 2, 3, -1.0, 1.0));
            g.identity(a).unwrap()
        }),
        ("matmul", |g, r| {
            let a = g.param("a", rand_m(r, 3, 4, -1.0, 1.0));
            let b = g.param("b", rand_m(r, 4, 2, -1.0, 1.0));
            g.matmul(a, b).unwrap()
        }),
        ("add", |g, r| {
            let a = g.param("a", rand_m(r, 2, 3, -1.0, 1.0));
            let b = g.param("b", rand_m(r, 2, 3, -1.0, 1.0));
            g.add(a, b).unwrap()
        }),
        ("sub", |g, r| {
            let a = g.param("a", rand_m(r, 2, 3, -1.0, 1.0));
            let b = g.param("b", rand_m(r, 2, 3, -1.0, 1.0));
            g.sub(a, b).unwrap()
        }),
        ("mul", |g, r| {
            let a = g.param("a", rand_m(r, 2, 3, -1.0, 1.0));
            let b = g.param("b", rand_m(r, 2, 3, -1.0, 1.0));
            g.mul(a, b).unwrap()
        }),
        ("div", |g, r| {
            let a = g.param("a", rand_m(r, 2, 3, -1.0, 1.0));
            let b = g.param("b", signed(r, 2, 3));
            g.div(a, b).unwrap()
        }),
        ("add_row", |g, r| {
            let a = g.param("a", rand_m(r, 3, 2, -1.0, 1.0));
            let b = g.param("b", rand_m(r, 1, 2, -1.0, 1.0));
            g.add_row(a, b).unwrap()
        }),
        ("tanh", |g, r| {
            let a = g.param("a", rand_m(r, 2, 3, -2.0, 2.0));
            g.tanh(a).unwrap()
        }),
        ("sigmoid", |g, r| {
            let a = g.param("a", rand_m(r, 2, 3, -3.0, 3.0));
            g.sigmoid(a).unwrap()
        }),
        ("softmax", |g, r| {
            let a = g.param("a", rand_m(r, 3, 4, -2.0, 2.0));
            g.softmax(a).unwrap()
        }),
        ("log_softmax", |g, r| {
            let a = g.param("a", rand_m(r, 3, 4, -2.0, 2.0));
            g.log_softmax(a).unwrap()
        }),
        ("log", |g, r| {
            let a = g.param("a", rand_m(r, 2, 3, 0.2, 3.0));
            g.log(a).unwrap()
        }),
        ("abs", |g, r| {
            let a = g.param("a", signed(r, 2, 3));
            g.abs(a).unwrap()
        }),
        ("sqrt", |g, r| {
            let a = g.param("a", rand_m(r, 2, 3, 0.2, 3.0));
            g.sqrt(a).unwrap()
        }),
        ("xlogx", |g, r| {
            let a = g.param("a", rand_m(r, 2, 3, 0.05, 2.0));
            g.xlogx(a).unwrap()
        }),
        ("sum", |g, r| {
            let a = g.param("a", rand_m(r, 2, 3, -1.0, 1.0));
            let s = g.sum(a).unwrap();
            g.mul(s, s).unwrap()
        }),
        ("mean", |g, r| {
            let a = g.param("a", rand_m(r, 2, 3, -1.0, 1.0));
            let s = g.mean(a).unwrap();
            g.mul(s, s).unwrap()
        }),
        ("sum_rows", |g, r| {
            let a = g.param("a", rand_m(r, 3, 2, -1.0, 1.0));
            g.sum_rows(a).unwrap()
        }),
        ("concat_cols", |g, r| {
            let a = g.param("a", rand_m(r, 2, 3, -1.0, 1.0));
            let b = g.param("b", rand_m(r, 2, 1, -1.0, 1.0));
            g.concat_cols(&[a, b, a]).unwrap()
        }),
        ("slice_cols", |g, r| {
            let a = g.param("a", rand_m(r, 2, 5, -1.0, 1.0));
            g.slice_cols(a, 1, 4).unwrap()
        }),
        ("scale", |g, r| {
            let a = g.param("a", rand_m(r, 2, 3, -1.0, 1.0));
            g.scale(a, -1.3).unwrap()
        }),
        ("transpose", |g, r| {
            let a = g.param("a", rand_m(r, 2, 3, -1.0, 1.0));
            g.transpose(a).unwrap()
        }),
        ("reshape", |g, r| {
            let a = g.param("a", rand_m(r, 2, 6, -1.0, 1.0));
            g.reshape(a, 3, 4).unwrap()
        }),
        ("block_mix", |g, r| {
            let w = g.param("w", rand_m(r, 6, 3, -1.0, 1.0));
            let v = g.param("v", rand_m(r, 6, 2, -1.0, 1.0));
            g.block_mix(w, v, 3).unwrap()
        }),
        ("block_gram", |g, r| {
            let a = g.param("a", rand_m(r, 4, 3, -1.0, 1.0));
            let b = g.param("b", rand_m(r, 4, 3, -1.0, 1.0));
            g.block_gram(a, b, 2).unwrap()
        }),
        ("block_transpose", |g, r| {
            let a = g.param("a", rand_m(r, 6, 3, -1.0, 1.0));
            g.block_transpose(a, 3).unwrap()
        }),
    ]
}

/// Reduces `y` to a scalar through a fixed random weighting.
fn reduce(g: &mut Graph, y: NodeId, r: &mut ChaCha8Rng) -> NodeId {
    let (rows, cols) = g.value(y).shape();
    let w = g.constant(rand_m(r, rows, cols, -1.0, 1.0));
    let p = g.mul(y, w).unwrap();
    let s = g.sum(p).unwrap();
    g.mark_output("loss", s);
    s
}

fn gradients() -> Outcome {
    let mut kinds = 0;
    let mut entries = 0;
    for (name, build) in op_cases() {
        for seed in 0..20 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let y = build(&mut g, &mut r);
            let loss = reduce(&mut g, y, &mut r);
            entries += fd_params(&g, loss, 1e-5, 1e-4, name)?;
        }
        kinds += 1;
    }
    // Straight-through: forward value from the hard branch, gradient equal to
    // the finite differences of the soft branch alone.
    for seed in 0..20 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_m(&mut r, 2, 3, -2.0, 2.0);
        let w = rand_m(&mut ChaCha8Rng::seed_from_u64(seed + 100), 2, 3, -1.0, 1.0);
        let graph = |straight: bool| {
            let mut g = Graph::new();
            let a = g.param("a", x.clone());
            let soft = g.sigmoid(a).unwrap();
            let y = if straight { g.straight_through(soft, g.value(soft).map(|v| (v > 0.5) as u8 as f64)).unwrap() } else { soft };
            let c = g.constant(w.clone());
            let p = g.mul(y, c).unwrap();
            let s = g.sum(p).unwrap();
            g.mark_output("loss", s);
            (g, s)
        };
        let (st, st_loss) = graph(true);
        let (soft, soft_loss) = graph(false);
        let got = st.backward(st_loss).unwrap().param("a").unwrap();
        let want = soft.backward(soft_loss).unwrap().param("a").unwrap();
        ensure(got == want, || "straight_through: gradient differs from the soft branch".into())?;
        entries += fd_params(&soft, soft_loss, 1e-5, 1e-4, "straight_through (soft branch)")?;
    }
    kinds += 1;

    // End-to-end: two agents, one round, one environment step.
    let mut e2e = 0;
    for (spec, aug) in [(ProtocolSpec::commnet(3), false), (ProtocolSpec::commnet(3), true), (ProtocolSpec::ic3net(3), true)] {
        let cfg = TrainConfig { episodes_per_epoch: 1, augmentation: aug, entropy_bonus: 0.05, ..TrainConfig::default() };
        let t = Trainer::new(EnvConfig::SumSignal(SumSignalConfig { agents: 2 }), spec, cfg).unwrap();
        let built = t.build_epoch(&t.params, 1).unwrap();
        e2e += fd_params(&built.graph, built.total, 1e-6, 1e-3, "end-to-end")?;
    }
    Ok(format!("{kinds} op kinds, {entries} op entries at 1e-4; {e2e} end-to-end parameters at 1e-3"))
}

// ---- 3: CTDE ----

fn ctde() -> Outcome {
    let env = EnvConfig::TrafficJunction(TjConfig { arrival_prob: 0.5, ..TjConfig::default() });
    let mut summary = vec![];
    for (kind, spec) in [
        (TopologyKind::Full, ProtocolSpec::commnet(16)),
        (TopologyKind::Gated, ProtocolSpec::ic3net(16)),
        (TopologyKind::AttentionTopk, ProtocolSpec::tarmac(16, 8, 2)),
    ] {
        let spec = ProtocolSpec { rounds: 2, ..spec };
        let t = Trainer::new(env.clone(), spec, TrainConfig::default()).unwrap();
        let p = &t.protocol;
        let mut acted = 0;
        for k in 0..100u64 {
            let params = p.init_params(&mut substream(k, &[7]));
            let mut e = env.build().unwrap();
            let mut obs = e.reset(k);
            let mut r = ChaCha8Rng::seed_from_u64(k);
            for _ in 0..r.gen_range(0..8) {
                let acts: Vec<Option<usize>> = obs.iter().map(|o| o.active.then(|| r.gen_range(0..2))).collect();
                obs = e.step(&acts).unwrap().0;
            }
            let mut unused = substream(0, &[]);
            let dec = run_decentralized(p, &params, &obs, p.spec.rounds, &mut unused, Mode::Execution).unwrap();
            let (m, active) = p.observation_matrix(&obs).unwrap();
            let roster = Roster::new(p.n_agents, active);
            let mut g = Graph::new();
            let leaves = p.leaves(&mut g, &params);
            let fwd = p.step_forward(&mut g, &leaves, m, p.spec.rounds, &roster, &mut unused, Mode::Execution).unwrap();
            let central = p.act(g.value(fwd.log_probs), &roster, &mut unused, Mode::Execution);
            ensure(dec.actions == central, || format!("{kind:?} state {k}: {:?} vs {:?}", dec.actions, central))?;
            acted += central.iter().flatten().count();
        }
        summary.push(format!("{kind:?} 100 states/{acted} actions"));
    }
    Ok(summary.join(", "))
}

// ---- 4: Algorithm 2 ----

fn algorithm_two() -> Outcome {
    let c = TrainConfig::default();
    ensure((c.eps, c.success_floor, c.beta, c.alpha, c.lambda_min, c.lambda_max) == (1e-10, 0.05, 0.5, 0.01, 1e-5, 5e-3), || {
        "defaults differ from the published constants".into()
    })?;
    ensure(smoothed_terms(4.0, 0.0, 1.0, 0.5, 0.05).0 == 2.0, || "H=4, S=1 should smooth to 2.0".into())?;
    ensure(smoothed_terms(1.0, 1.0, 0.01, 0.5, 0.05) == smoothed_terms(1.0, 1.0, 0.05, 0.5, 0.05), || {
        "S below the floor should be raised to it".into()
    })?;
    ensure(smoothed_terms(3.0, 0.0, 0.4, 0.5, 0.05).1 == 0.0, || "xi=0 should give 0".into())?;
    // The epsilon guard leaves the raw weight 2.5e-13 under lambda_max.
    let (w, _) = dynamic_weights(1.0, 2.0, 2.0, &c);
    ensure((w - 5e-3).abs() < 1e-12, || format!("boundary example gave {w}"))?;
    ensure(dynamic_weights(1.0, 1e12, 0.0, &c) == (c.lambda_min, c.lambda_max), || "clamp floor / epsilon guard".into())?;
    ensure(augmented_loss(0.8, 3.0, 1.0, 0.0, 0.0) == 0.8, || "zero weights must leave the loss".into())?;
    ensure((augmented_loss(1.25, 2.0, 0.4, 5e-3, 5e-3) - (1.25 + 5e-3 * 2.4)).abs() < 1e-15, || "lambda_max example".into())?;

    let mut r = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100_000 {
        let loss = r.gen_range(-5.0..5.0) * 10f64.powi(r.gen_range(-3..4));
        let h = r.gen_range(0.0..8.0) * 10f64.powi(r.gen_range(-12..3));
        let x = r.gen_range(-1.0..1.0);
        let s = r.gen_range(0.0..=1.0);
        let (ht, xt) = smoothed_terms(h, x, s, c.beta, c.success_floor);
        let (a, b) = dynamic_weights(loss, ht, xt, &c);
        ensure((c.lambda_min..=c.lambda_max).contains(&a) && (c.lambda_min..=c.lambda_max).contains(&b), || {
            format!("weights ({a}, {b}) out of bounds for L={loss} H~={ht} xi~={xt}")
        })?;
    }
    let cfg = TrainConfig { episodes_per_epoch: 16, augmentation: true, ..TrainConfig::default() };
    let mut t = Trainer::new(EnvConfig::SumSignal(SumSignalConfig { agents: 3 }), ProtocolSpec::commnet(16), cfg).unwrap();
    for _ in 0..30 {
        let l = t.train_epoch().unwrap().losses;
        ensure([l.w_iei, l.w_sei].iter().all(|w| (c.lambda_min..=c.lambda_max).contains(w)), || format!("epoch weights {l:?}"))?;
    }
    Ok("worked examples reproduce; 100000 random inputs and 30 training epochs keep weights in bounds".into())
}

// ---- 5: toy communication ----

fn toy() -> Outcome {
    let (full, silent) = (config("toy_commnet"), config("toy_silent"));
    let mut reached = vec![];
    let mut silent_max: f64 = 0.0;
    for seed in 0..3 {
        reached.push(train(&full, seed).reached);
        let s = train(&silent, seed);
        silent_max = silent_max.max(s.max_train_success).max(s.max_eval_success);
    }
    let hits = reached.iter().filter(|r| r.is_some()).count();
    let detail = format!("full broadcast reached 0.95 at {reached:?}; silent peak success {silent_max:.3}");
    ensure(hits >= 2 && silent_max < 0.2, || detail.clone())?;
    Ok(detail)
}

// ---- 6: traffic junction ----

fn traffic() -> Outcome {
    let cfg = config("tj_commnet");
    let reached: Vec<Option<usize>> = (0..3).map(|seed| train(&cfg, seed).reached).collect();
    let detail = format!("greedy success >= 0.7 reached at {reached:?}");
    ensure(reached.iter().filter(|r| r.is_some()).count() >= 2, || detail.clone())?;
    Ok(detail)
}

// ---- 7: augmentation ----

/// First index from which `window` consecutive values stay within `tol` of
/// the mean of the last `window` values.
fn settling(values: &[Option<f64>], tol: f64, window: usize) -> Option<usize> {
    let tail: Vec<f64> = values.iter().rev().take(window).copied().collect::<Option<_>>()?;
    let reference = tail.iter().sum::<f64>() / tail.len() as f64;
    let band = tol * reference.abs();
    let mut run = 0;
    for (i, v) in values.iter().enumerate() {
        run = if v.is_some_and(|v| (v - reference).abs() <= band) { run + 1 } else { 0 };
        if run == window {
            return Some(i + 1 - window);
        }
    }
    None
}

const AUG_EPOCHS: usize = 300;

fn augmentation() -> Outcome {
    let with_epochs = |name: &str| {
        let mut c = config(name);
        c.training.epochs = AUG_EPOCHS;
        c
    };
    let (base, aug) = (with_epochs("tj_ic3net"), with_epochs("tj_ic3net_aug"));
    let (mut s, mut tei, mut earlier, mut lines) = ([0.0; 2], [0.0; 2], 0, vec![]);
    for seed in 0..3 {
        let mut settle = [(None, None); 2];
        for (k, cfg) in [&base, &aug].into_iter().enumerate() {
            let run = train(cfg, seed);
            let stats = run.trainer.evaluate(500, AUG_EPOCHS as u64).unwrap();
            s[k] += stats.success / 3.0;
            tei[k] += stats.tei.unwrap_or(0.0) / 3.0;
            settle[k] = (settling(&run.iei, 0.1, 20), settling(&run.sei, 0.1, 20));
        }
        let before = |a: Option<usize>, b: Option<usize>| matches!((a, b), (Some(a), Some(b)) if a < b) || (a.is_some() && b.is_none());
        let won = before(settle[1].0, settle[0].0) && before(settle[1].1, settle[0].1);
        earlier += won as usize;
        lines.push(format!("seed {seed} settle IEI/SEI base {:?} aug {:?}", settle[0], settle[1]));
    }
    let detail = format!(
        "mean final S base {:.3} aug {:.3}; TEI base {:.3e} aug {:.3e}; earlier in {earlier}/3 pairs ({})",
        s[0],
        s[1],
        tei[0],
        tei[1],
        lines.join("; ")
    );
    ensure(s[1] >= s[0] && tei[1] >= tei[0] && earlier >= 2, || detail.clone())?;
    Ok(detail)
}

// ---- 8: round count ----

fn rounds() -> Outcome {
    let mut cfg = config("tj_commnet");
    cfg.training.stop_success = Some(0.95);
    let mut two = cfg.clone();
    two.protocol.rounds = 2;
    let (r1, r2) = (train(&cfg, 0), train(&two, 0));
    let (e1, e2) = (r1.trainer.evaluate(500, 1).unwrap(), r2.trainer.evaluate(500, 1).unwrap());

    // Same visited states, one versus two rounds.
    let (p, params) = (&r2.trainer.protocol, &r2.trainer.params);
    let (mut c1, mut c2) = (0usize, 0usize);
    let mut unused = substream(0, &[]);
    for ep in 0..50 {
        let mut e = cfg.env.build().unwrap();
        let mut obs = e.reset(ep);
        loop {
            let one = run_decentralized(p, params, &obs, 1, &mut unused, Mode::Execution).unwrap();
            let both = run_decentralized(p, params, &obs, 2, &mut unused, Mode::Execution).unwrap();
            let (a, b) = (comm_count(&one.rounds), comm_count(&both.rounds));
            ensure(b == 2 * a, || format!("state in episode {ep}: C {a} with one round, {b} with two"))?;
            c1 += a;
            c2 += b;
            let (next, res) = e.step(&one.actions).unwrap();
            obs = next;
            if res.done {
                break;
            }
        }
    }
    let detail = format!(
        "L=1: S {:.3} C {} TEI {:.3e} (reached at {:?}); L=2: S {:.3} C {} TEI {:.3e} (reached at {:?}); same-state C {c1} -> {c2}",
        e1.success,
        e1.comm_count,
        e1.tei.unwrap_or(0.0),
        r1.reached,
        e2.success,
        e2.comm_count,
        e2.tei.unwrap_or(0.0),
        r2.reached
    );
    let matched = (e1.success - e2.success).abs() <= 0.05;
    ensure(matched && e1.tei > e2.tei && c2 == 2 * c1, || detail.clone())?;
    Ok(detail)
}

// ---- 9: CLI pipeline ----

fn pipeline() -> Outcome {
    let dir = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("exp.toml");
    std::fs::write(
        &cfg,
        "label = \"pipe\"\n[env]\nkind = \"traffic_junction\"\nmax_agents = 3\n[protocol]\nhidden_dim = 16\ntopology = \"gated\"\n\
         [training]\nepochs = 6\nepisodes_per_epoch = 8\neval_interval = 3\neval_episodes = 20\ncheckpoint_interval = 3\n",
    )
    .map_err(|e| e.to_string())?;
    let out = dir.path().join("runs");
    let mcomm = |args: &[&str]| -> Result<String, String> {
        let o = Command::new(env!("CARGO_BIN_EXE_mcomm")).args(args).output().map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(format!("`mcomm {}` failed: {}", args.join(" "), String::from_utf8_lossy(&o.stderr)));
        }
        Ok(String::from_utf8_lossy(&o.stdout).into_owned())
    };
    let s = |p: &PathBuf| p.to_str().unwrap().to_string();
    for label in ["first", "second"] {
        mcomm(&["train", "--config", &s(&cfg), "--seed", "7", "--out", &s(&out), "--label", label])?;
    }
    let (a, b) = (out.join("first"), out.join("second"));
    let trace_a = std::fs::read(a.join("trace.jsonl")).map_err(|e| e.to_string())?;
    ensure(trace_a == std::fs::read(b.join("trace.jsonl")).map_err(|e| e.to_string())?, || "traces differ".into())?;
    ensure(trace_a.iter().filter(|&&c| c == b'\n').count() == 6, || "expected 6 trace records".into())?;
    let ck = a.join("checkpoint.json");
    ensure(ck.exists() && a.join("checkpoint-000003.json").exists(), || "missing checkpoints".into())?;
    let eval = mcomm(&["eval", "--checkpoint", &s(&ck), "--episodes", "20"])?;
    ensure(eval.contains("\"success\""), || format!("eval printed {eval}"))?;
    mcomm(&["analyze", &s(&a.join("trace.jsonl"))])?;
    let (svg1, svg2) = (dir.path().join("1.svg"), dir.path().join("2.svg"));
    for svg in [&svg1, &svg2] {
        mcomm(&["plot", "--metric", "tei", "--out", &s(svg), &s(&a.join("trace.jsonl")), &s(&b.join("trace.jsonl"))])?;
    }
    ensure(std::fs::read(&svg1).ok() == std::fs::read(&svg2).ok(), || "charts differ".into())?;
    Ok("train x2 (byte-identical traces), checkpoint, eval, analyze, plot".into())
}

#[test]
fn acceptance() {
    let min = |m: u64| Some(Duration::from_secs(60 * m));
    let results = [
        criterion(1, "metric oracle suite", Some(Duration::from_secs(10)), metrics_oracle),
        criterion(2, "gradient correctness", min(1), gradients),
        criterion(3, "CTDE equivalence", Some(Duration::from_secs(30)), ctde),
        criterion(4, "dynamic weight arithmetic", None, algorithm_two),
        criterion(5, "communication is learned on the toy task", min(10), toy),
        criterion(6, "traffic junction, CommNet-like", min(120), traffic),
        criterion(7, "augmentation direction, gated protocol", None, augmentation),
        criterion(8, "round-count trade-off", None, rounds),
        criterion(9, "CLI persistence pipeline", None, pipeline),
    ];
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, ok)| !**ok).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
