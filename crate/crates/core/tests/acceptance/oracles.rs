//! Library components against straightforward reference implementations.

use lemn::memory::MemoryBuffer;
use lemn::retention::{PolicyInput, PolicyKind, RetentionNet, ShuffleView};
use lemn::rl::{compute_gae, AdamConfig, SharedParams, Trajectory, TrajectoryStep};
use lemn::tensor::{Gradients, Graph, ParamStore, Tensor, Var};
use rand::Rng;

use super::common::{max_abs_diff, param, randomize, rng};

/// Replays random append / replace_at sequences on a `Vec` of
/// `(payload, birth)` and returns the worst disagreement count.
pub fn memory_vs_list(sequences: usize) -> usize {
    let mut r = rng(20);
    let mut mismatches = 0;
    for _ in 0..sequences {
        let cap = r.gen_range(1..=5);
        let mut mem: MemoryBuffer<u32, ()> = MemoryBuffer::new(cap).unwrap();
        let mut list: Vec<(u32, u64)> = Vec::new();
        let mut clock = 0u64;
        let ops = r.gen_range(1..40);
        for item in 0..ops {
            if list.len() < cap {
                mem.append(item).unwrap();
                list.push((item, clock));
            } else {
                let slot = r.gen_range(0..=cap);
                let evicted = mem.replace_at(slot, item).unwrap();
                let expect = if slot == cap {
                    item
                } else {
                    let (p, _) = list.remove(slot);
                    list.push((item, clock));
                    p
                };
                if evicted != expect {
                    mismatches += 1;
                }
            }
            clock += 1;
            let got: Vec<(u32, u64)> = mem.entries().iter().map(|e| (e.payload, e.birth_step)).collect();
            if got != list || mem.step() != clock || mem.is_full() != (list.len() == cap) {
                mismatches += 1;
            }
        }
        // Out-of-range slots and writes to a non-full memory are contract errors.
        if mem.is_full() && mem.replace_at(cap + 1, 0).is_ok() {
            mismatches += 1;
        }
    }
    mismatches
}

/// `A_t = sum_l (gamma lambda)^l delta_{t+l}`, stopping after a terminal step.
fn gae_double_sum(traj: &Trajectory, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = traj.steps.len();
    let value_after = |t: usize| -> f64 {
        if traj.steps[t].done {
            0.0
        } else if t + 1 < n {
            traj.steps[t + 1].value
        } else {
            traj.bootstrap
        }
    };
    let delta: Vec<f64> = (0..n)
        .map(|t| traj.steps[t].reward + gamma * value_after(t) - traj.steps[t].value)
        .collect();
    (0..n)
        .map(|t| {
            let mut total = 0.0;
            for l in 0..(n - t) {
                total += (gamma * lambda).powi(l as i32) * delta[t + l];
                if traj.steps[t + l].done {
                    break;
                }
            }
            total
        })
        .collect()
}

pub fn gae_vs_double_sum(trajectories: usize) -> f64 {
    let mut r = rng(21);
    let mut worst: f64 = 0.0;
    for _ in 0..trajectories {
        let n = r.gen_range(1..60);
        let steps = (0..n)
            .map(|_| TrajectoryStep {
                action: 0,
                log_prob: None,
                value: r.gen_range(-2.0..2.0),
                reward: r.gen_range(-1.0..1.0),
                done: r.gen_bool(0.05),
            })
            .collect();
        let traj = Trajectory {
            steps,
            bootstrap: r.gen_range(-2.0..2.0),
        };
        let gamma = r.gen_range(0.5..=1.0);
        let lambda = r.gen_range(0.0..=1.0);
        let got = compute_gae(&traj, gamma, lambda).unwrap();
        let want = gae_double_sum(&traj, gamma, lambda);
        worst = worst.max(max_abs_diff(&got.advantages, &want));
        let returns: Vec<f64> = want.iter().zip(&traj.steps).map(|(a, s)| a + s.value).collect();
        worst = worst.max(max_abs_diff(&got.returns, &returns));
    }
    worst
}

/// Element-wise scalar Adam with per-parameter step counts; a missing
/// gradient leaves that parameter untouched.
pub fn adam_vs_scalar(updates: usize) -> f64 {
    let mut r = rng(22);
    let mut store = ParamStore::new();
    let shapes: [&[usize]; 3] = [&[3], &[2, 2], &[1]];
    for (i, s) in shapes.iter().enumerate() {
        store.add(format!("p{i}"), Tensor::uniform(s, 1.0, &mut r)).unwrap();
    }
    let cfg = AdamConfig::default();
    let mut shared = SharedParams::new(store.clone(), cfg);
    let mut theta: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| t.data().to_vec()).collect();
    let mut m: Vec<Vec<f64>> = theta.iter().map(|p| vec![0.0; p.len()]).collect();
    let mut v = m.clone();
    let mut t = vec![0i32; theta.len()];
    let mut worst: f64 = 0.0;
    for _ in 0..updates {
        let lr = r.gen_range(1e-4..1e-1);
        let mut grads = Gradients::zeros_like(&store);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.iter().enumerate() {
            if r.gen_bool(0.2) {
                continue;
            }
            let g = Tensor::uniform(store.get(*id).shape(), 3.0, &mut r);
            t[k] += 1;
            for j in 0..theta[k].len() {
                let gj = g.data()[j];
                m[k][j] = cfg.beta1 * m[k][j] + (1.0 - cfg.beta1) * gj;
                v[k][j] = cfg.beta2 * v[k][j] + (1.0 - cfg.beta2) * gj * gj;
                let mh = m[k][j] / (1.0 - cfg.beta1.powi(t[k]));
                let vh = v[k][j] / (1.0 - cfg.beta2.powi(t[k]));
                theta[k][j] -= lr * mh / (vh.sqrt() + cfg.eps);
            }
            grads.set(*id, g);
        }
        shared.apply(&grads, lr).unwrap();
        for (k, id) in ids.iter().enumerate() {
            worst = worst.max(max_abs_diff(shared.store().get(*id).data(), &theta[k]));
        }
    }
    worst
}

const D: usize = 8;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn lin(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let w = param(store, &format!("{name}.w"));
    let b = param(store, &format!("{name}.b"));
    b.iter()
        .enumerate()
        .map(|(o, bo)| bo + x.iter().enumerate().map(|(i, xi)| w[o * x.len() + i] * xi).sum::<f64>())
        .collect()
}

/// Gates stacked as update, reset, candidate; the reset gate scales the
/// previous state before the recurrent product.
fn gru(store: &ParamStore, name: &str, x: &[f64], h: &[f64]) -> Vec<f64> {
    let wi = param(store, &format!("{name}.w_ih"));
    let wh = param(store, &format!("{name}.w_hh"));
    let b = param(store, &format!("{name}.bias"));
    let d = h.len();
    let dot = |w: &[f64], row: usize, v: &[f64]| {
        v.iter()
            .enumerate()
            .map(|(i, vi)| w[row * v.len() + i] * vi)
            .sum::<f64>()
    };
    let mut out = vec![0.0; d];
    for k in 0..d {
        let u = sigmoid(dot(&wi, k, x) + dot(&wh, k, h) + b[k]);
        let rh: Vec<f64> = (0..d)
            .map(|j| sigmoid(dot(&wi, d + j, x) + dot(&wh, d + j, h) + b[d + j]) * h[j])
            .collect();
        let c = (dot(&wi, 2 * d + k, x) + dot(&wh, 2 * d + k, &rh) + b[2 * d + k]).tanh();
        out[k] = (1.0 - u) * h[k] + u * c;
    }
    out
}

fn features(store: &ParamStore, cands: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = cands.len();
    let mut fw = Vec::with_capacity(n);
    let mut h = vec![0.0; D];
    for c in cands {
        h = gru(store, "pol.fw", c, &h);
        fw.push(h.clone());
    }
    let mut bw = vec![Vec::new(); n];
    let mut h = vec![0.0; D];
    for i in (0..n).rev() {
        h = gru(store, "pol.bw", &cands[i], &h);
        bw[i] = h.clone();
    }
    (0..n)
        .map(|i| {
            let cat: Vec<f64> = fw[i].iter().chain(&bw[i]).copied().collect();
            lin(store, "pol.feature", &cat)
                .into_iter()
                .map(|v| v.max(0.0))
                .collect()
        })
        .collect()
}

fn critic(store: &ParamStore, rows: &[Vec<f64>]) -> f64 {
    let n = rows.len() as f64;
    let pooled: Vec<f64> = (0..D).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
    let h: Vec<f64> = lin(store, "pol.critic.hidden", &pooled)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    lin(store, "pol.critic.out", &h)[0]
}

struct Decision {
    logits: Vec<f64>,
    probs: Vec<f64>,
    value: f64,
    usage: Option<Vec<f64>>,
    hidden: Option<Vec<Vec<f64>>>,
}

/// Hand-unrolled policy evaluation. `hidden[i]` is the temporal state of
/// entry `i`; the incoming candidate starts from zero.
fn reference(
    store: &ParamStore,
    kind: PolicyKind,
    cands: &[Vec<f64>],
    query: &[f64],
    usage: &[f64],
    hidden: &[Vec<f64>],
) -> Decision {
    let n = cands.len() - 1;
    match kind {
        PolicyKind::Im => {
            let z: Vec<f64> = cands[..n]
                .iter()
                .map(|e| e.iter().zip(query).map(|(a, b)| a * b).sum())
                .collect();
            let gamma = sigmoid(lin(store, "pol.gamma", query)[0]);
            let mut logits: Vec<f64> = (0..n).map(|i| z[i] - gamma * usage[i]).collect();
            logits.push(param(store, "pol.nop")[0]);
            Decision {
                probs: softmax(&logits),
                logits,
                value: critic(store, cands),
                usage: Some((0..n).map(|i| 0.1 * usage[i] + 0.9 * z[i]).collect()),
                hidden: None,
            }
        }
        PolicyKind::S => {
            let f = features(store, cands);
            let logits: Vec<f64> = f
                .iter()
                .map(|fi| lin(store, "pol.logit", &lin(store, "pol.hidden", fi))[0])
                .collect();
            Decision {
                probs: softmax(&logits),
                logits,
                value: critic(store, &f),
                usage: None,
                hidden: None,
            }
        }
        PolicyKind::St => {
            let f = features(store, cands);
            let q = hidden[0].len();
            let zero = vec![0.0; q];
            let h: Vec<Vec<f64>> = (0..=n)
                .map(|i| gru(store, "pol.temporal", &f[i], if i < n { &hidden[i] } else { &zero }))
                .collect();
            let logits: Vec<f64> = h.iter().map(|hi| lin(store, "pol.logit", hi)[0]).collect();
            Decision {
                probs: softmax(&logits),
                logits,
                value: critic(store, &f),
                usage: None,
                hidden: Some(h[..n].to_vec()),
            }
        }
        PolicyKind::Fifo => unreachable!("fifo has no formula to unroll"),
    }
}

fn library(
    store: &ParamStore,
    net: &RetentionNet,
    cands: &[Vec<f64>],
    query: &[f64],
    usage: &[f64],
    hidden: &[Vec<f64>],
    view: Option<&ShuffleView>,
) -> Decision {
    let mut g = Graph::new(store);
    let c = g.constant(Tensor::matrix(cands).unwrap());
    let q = g.constant(Tensor::vector(query.to_vec()));
    let h: Vec<Option<Var>> = hidden
        .iter()
        .map(|h| Some(g.constant(Tensor::vector(h.clone()))))
        .collect();
    let out = net
        .select(
            &mut g,
            &PolicyInput {
                candidates: c,
                query: q,
                hop_logits: None,
                usage,
                hidden: &h,
            },
            view,
        )
        .unwrap();
    Decision {
        logits: g.value(out.logits).data().to_vec(),
        probs: out.probs.clone(),
        value: g.value(out.value).item(),
        usage: out.new_usage.clone(),
        hidden: out
            .new_hidden
            .map(|hs| hs.iter().map(|v| g.value(*v).data().to_vec()).collect()),
    }
}

fn diff(a: &Decision, b: &Decision) -> f64 {
    let mut worst = max_abs_diff(&a.logits, &b.logits)
        .max(max_abs_diff(&a.probs, &b.probs))
        .max((a.value - b.value).abs());
    match (&a.usage, &b.usage) {
        (Some(x), Some(y)) => worst = worst.max(max_abs_diff(x, y)),
        (None, None) => {}
        _ => return f64::INFINITY,
    }
    match (&a.hidden, &b.hidden) {
        (Some(x), Some(y)) => {
            for (p, q) in x.iter().zip(y) {
                worst = worst.max(max_abs_diff(p, q));
            }
        }
        (None, None) => {}
        _ => return f64::INFINITY,
    }
    worst
}

/// Worst deviation of the library's policy outputs from the unrolled
/// formulas, including shuffled views mapped back to slot order.
pub fn policies_vs_formulas(cases: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for (k, kind) in [PolicyKind::Im, PolicyKind::S, PolicyKind::St].into_iter().enumerate() {
        let mut store = ParamStore::new();
        let shuffle = kind != PolicyKind::Im;
        let net = RetentionNet::new(&mut store, "pol", kind, shuffle, D, &mut rng(30 + k as u64)).unwrap();
        let q = net.temporal_dim();
        let mut r = rng(40 + k as u64);
        for case in 0..cases {
            if case % 25 == 0 {
                randomize(&mut store, 0.7, 50 + (k * cases + case) as u64);
            }
            let n = r.gen_range(1..=5);
            let cands: Vec<Vec<f64>> = (0..=n)
                .map(|_| Tensor::uniform(&[D], 1.0, &mut r).into_data())
                .collect();
            let query = Tensor::uniform(&[D], 1.0, &mut r).into_data();
            let usage: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
            let hidden: Vec<Vec<f64>> = (0..n).map(|_| Tensor::uniform(&[q], 0.8, &mut r).into_data()).collect();

            let want = reference(&store, kind, &cands, &query, &usage, &hidden);
            let got = library(&store, &net, &cands, &query, &usage, &hidden, None);
            worst = worst.max(diff(&got, &want));

            if shuffle {
                let view = ShuffleView::random(n, &mut r);
                let shuffled = library(&store, &net, &cands, &query, &usage, &hidden, Some(&view));
                let mut pc: Vec<Vec<f64>> = view.perm.iter().map(|&i| cands[i].clone()).collect();
                pc.push(cands[n].clone());
                let ph: Vec<Vec<f64>> = view.perm.iter().map(|&i| hidden[i].clone()).collect();
                let on_view = reference(&store, kind, &pc, &query, &usage, &ph);
                // Map the view's slots back: entry perm[j] was shown at row j.
                let mut back = Decision {
                    logits: vec![0.0; n + 1],
                    probs: vec![0.0; n + 1],
                    value: on_view.value,
                    usage: None,
                    hidden: on_view.hidden.as_ref().map(|_| vec![Vec::new(); n]),
                };
                for (j, &i) in view.perm.iter().enumerate() {
                    back.logits[i] = on_view.logits[j];
                    back.probs[i] = on_view.probs[j];
                    if let (Some(b), Some(h)) = (back.hidden.as_mut(), on_view.hidden.as_ref()) {
                        b[i] = h[j].clone();
                    }
                }
                back.logits[n] = on_view.logits[n];
                back.probs[n] = on_view.probs[n];
                worst = worst.max(diff(&shuffled, &back));
            }
        }
    }
    worst
}
