#![allow(clippy::needless_range_loop)]

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::memory::MemoryBuffer;
use crate::tensor::grad_check_params;

const D: usize = 8;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn net(kind: PolicyKind, seed: u64) -> (ParamStore, RetentionNet) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let net = RetentionNet::new(&mut store, "pol", kind, false, D, &mut r).unwrap();
    // Larger weights than the default init so the oracles see non-trivial gates.
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::uniform(&shape, 0.6, &mut r);
    }
    (store, net)
}

fn set(store: &mut ParamStore, name: &str, value: f64) {
    let id = store.id(name).unwrap();
    let shape = store.get(id).shape().to_vec();
    *store.get_mut(id) = Tensor::full(&shape, value);
}

fn p(store: &ParamStore, name: &str) -> Vec<f64> {
    store.get(store.id(name).unwrap()).data().to_vec()
}

fn candidates(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..=n)
        .map(|_| Tensor::uniform(&[D], 1.0, &mut r).into_data())
        .collect()
}

fn cand_var(g: &mut Graph, rows: &[Vec<f64>]) -> Var {
    g.constant(Tensor::matrix(rows).unwrap())
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(o, bo)| bo + (0..x.len()).map(|i| w[o * x.len() + i] * x[i]).sum::<f64>())
        .collect()
}

fn lin_ref(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    affine(&p(store, &format!("{name}.w")), &p(store, &format!("{name}.b")), x)
}

fn gru_ref(store: &ParamStore, name: &str, x: &[f64], h: &[f64]) -> Vec<f64> {
    let wi = p(store, &format!("{name}.w_ih"));
    let wh = p(store, &format!("{name}.w_hh"));
    let b = p(store, &format!("{name}.bias"));
    let d = h.len();
    let row = |w: &[f64], k: usize, v: &[f64]| (0..v.len()).map(|i| w[k * v.len() + i] * v[i]).sum::<f64>();
    let u: Vec<f64> = (0..d)
        .map(|k| sigmoid(row(&wi, k, x) + row(&wh, k, h) + b[k]))
        .collect();
    let r: Vec<f64> = (0..d)
        .map(|k| sigmoid(row(&wi, d + k, x) + row(&wh, d + k, h) + b[d + k]))
        .collect();
    let rh: Vec<f64> = (0..d).map(|k| r[k] * h[k]).collect();
    (0..d)
        .map(|k| {
            let c = (row(&wi, 2 * d + k, x) + row(&wh, 2 * d + k, &rh) + b[2 * d + k]).tanh();
            (1.0 - u[k]) * h[k] + u[k] * c
        })
        .collect()
}

fn features_ref(store: &ParamStore, cands: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = cands.len();
    let mut fw = vec![vec![0.0; D]; n];
    let mut h = vec![0.0; D];
    for i in 0..n {
        h = gru_ref(store, "pol.fw", &cands[i], &h);
        fw[i] = h.clone();
    }
    let mut bw = vec![vec![0.0; D]; n];
    let mut h = vec![0.0; D];
    for i in (0..n).rev() {
        h = gru_ref(store, "pol.bw", &cands[i], &h);
        bw[i] = h.clone();
    }
    (0..n)
        .map(|i| {
            let both: Vec<f64> = fw[i].iter().chain(&bw[i]).copied().collect();
            lin_ref(store, "pol.feature", &both)
                .into_iter()
                .map(|v| v.max(0.0))
                .collect()
        })
        .collect()
}

fn critic_ref(store: &ParamStore, feats: &[Vec<f64>]) -> f64 {
    let n = feats.len() as f64;
    let pooled: Vec<f64> = (0..D).map(|k| feats.iter().map(|f| f[k]).sum::<f64>() / n).collect();
    let h: Vec<f64> = lin_ref(store, "pol.critic.hidden", &pooled)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    lin_ref(store, "pol.critic.out", &h)[0]
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() < tol, "{a:?} vs {b:?}");
    }
}

struct Run {
    probs: Vec<f64>,
    logits: Vec<f64>,
    value: f64,
    usage: Option<Vec<f64>>,
    hidden: Option<Vec<Vec<f64>>>,
}

fn run(store: &ParamStore, net: &RetentionNet, cands: &[Vec<f64>], usage: &[f64], hop: Option<&[f64]>) -> Run {
    let mut g = Graph::new(store);
    let c = cand_var(&mut g, cands);
    let q = g.constant(Tensor::vector(cands[cands.len() - 1].iter().map(|v| v * 0.5).collect()));
    let hop = hop.map(|h| g.constant(Tensor::vector(h.to_vec())));
    let hidden = vec![None; usage.len()];
    let out = net
        .select(
            &mut g,
            &PolicyInput {
                candidates: c,
                query: q,
                hop_logits: hop,
                usage,
                hidden: &hidden,
            },
            None,
        )
        .unwrap();
    Run {
        probs: out.probs.clone(),
        logits: g.value(out.logits).data().to_vec(),
        value: g.value(out.value).item(),
        usage: out.new_usage,
        hidden: out
            .new_hidden
            .map(|h| h.iter().map(|v| g.value(*v).data().to_vec()).collect()),
    }
}

#[test]
fn policy_kind_parses() {
    for k in PolicyKind::ALL {
        assert_eq!(k.name().parse::<PolicyKind>().unwrap(), k);
    }
    assert!("lru".parse::<PolicyKind>().is_err());
    let mut store = ParamStore::new();
    assert!(RetentionNet::new(&mut store, "x", PolicyKind::Im, true, D, &mut rng(0)).is_err());
}

#[test]
fn fifo_always_evicts_oldest() {
    let store = ParamStore::new();
    let net = RetentionNet::new(&mut ParamStore::new(), "pol", PolicyKind::Fifo, false, D, &mut rng(0)).unwrap();
    for n in 1..6 {
        let r = run(&store, &net, &candidates(n, n as u64), &vec![0.0; n], None);
        assert_eq!(argmax(&r.probs), 0);
        assert_eq!(r.value, 0.0);
        assert_eq!(sample_action(&r.probs, SampleMode::Sample, &mut rng(1)).unwrap(), 0);
    }
}

#[test]
fn fifo_stream_keeps_last_items() {
    let store = ParamStore::new();
    let net = RetentionNet::new(&mut ParamStore::new(), "pol", PolicyKind::Fifo, false, D, &mut rng(0)).unwrap();
    let mut buf: MemoryBuffer<usize, ()> = MemoryBuffer::new(4).unwrap();
    for t in 0..23 {
        if buf.is_full() {
            let r = run(&store, &net, &candidates(4, 0), &[0.0; 4], None);
            buf.replace_at(argmax(&r.probs), t).unwrap();
        } else {
            buf.append(t).unwrap();
        }
    }
    assert_eq!(buf.payloads().copied().collect::<Vec<_>>(), [19, 20, 21, 22]);
}

#[test]
fn im_usage_moving_average() {
    let (store, net) = net(PolicyKind::Im, 1);
    let r = run(&store, &net, &candidates(4, 2), &[0.0; 4], Some(&[1.0; 4]));
    assert_close(r.usage.as_ref().unwrap(), &[0.9; 4], 1e-15);
}

#[test]
fn im_closed_gate_ignores_usage() {
    let (mut store, net) = net(PolicyKind::Im, 3);
    set(&mut store, "pol.gamma.w", 0.0);
    set(&mut store, "pol.gamma.b", -1e4);
    let z = [0.3, -1.2, 2.0];
    let r = run(&store, &net, &candidates(3, 4), &[5.0, -2.0, 7.0], Some(&z));
    assert_eq!(&r.logits[..3], &z);
}

#[test]
fn im_matches_formula() {
    let (store, net) = net(PolicyKind::Im, 5);
    let mut r = rng(6);
    for n in [1, 3, 5] {
        let cands = candidates(n, 7 + n as u64);
        let usage: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = cands[n].iter().map(|v| v * 0.5).collect();
        for hop in [None, Some((0..n).map(|_| r.gen_range(-2.0..2.0)).collect::<Vec<f64>>())] {
            let out = run(&store, &net, &cands, &usage, hop.as_deref());
            let z: Vec<f64> = match &hop {
                Some(h) => h.clone(),
                None => cands[..n]
                    .iter()
                    .map(|e| e.iter().zip(&c).map(|(a, b)| a * b).sum())
                    .collect(),
            };
            let gamma = sigmoid(lin_ref(&store, "pol.gamma", &c)[0]);
            let mut g: Vec<f64> = (0..n).map(|i| z[i] - gamma * usage[i]).collect();
            g.push(p(&store, "pol.nop")[0]);
            assert_close(&out.logits, &g, 1e-12);
            assert_close(&out.probs, &softmax(&g), 1e-12);
            let v: Vec<f64> = (0..n).map(|i| 0.1 * usage[i] + 0.9 * z[i]).collect();
            assert_close(out.usage.as_ref().unwrap(), &v, 1e-12);
            assert!((out.value - critic_ref(&store, &cands)).abs() < 1e-12);
        }
    }
}

#[test]
fn spatial_features_match_unrolled_oracle() {
    let (store, net) = net(PolicyKind::S, 8);
    for n in [0, 3] {
        let cands = candidates(n, 9);
        let mut g = Graph::new(&store);
        let c = cand_var(&mut g, &cands);
        let f = net.spatial_features(&mut g, c).unwrap();
        let want: Vec<f64> = features_ref(&store, &cands).concat();
        assert_close(g.value(f).data(), &want, 1e-12);
    }
}

#[test]
fn spatial_features_constant_when_projection_is_bias_only() {
    let (mut store, net) = net(PolicyKind::S, 10);
    set(&mut store, "pol.feature.w", 0.0);
    set(&mut store, "pol.feature.b", 1.0);
    let mut g = Graph::new(&store);
    let c = cand_var(&mut g, &candidates(4, 11));
    let f = net.spatial_features(&mut g, c).unwrap();
    assert!(g.value(f).data().iter().all(|&v| v == 1.0));
}

#[test]
fn s_lemn_zero_logit_layer_is_uniform() {
    let (mut store, net) = net(PolicyKind::S, 12);
    set(&mut store, "pol.logit.w", 0.0);
    set(&mut store, "pol.logit.b", 0.0);
    let r = run(&store, &net, &candidates(5, 13), &[0.0; 5], None);
    assert_close(&r.probs, &[1.0 / 6.0; 6], 1e-15);
}

#[test]
fn s_lemn_matches_composed_oracle() {
    let (store, net) = net(PolicyKind::S, 14);
    for n in [3, 5] {
        let cands = candidates(n, 15 + n as u64);
        let out = run(&store, &net, &cands, &vec![0.0; n], None);
        let feats = features_ref(&store, &cands);
        let logits: Vec<f64> = feats
            .iter()
            .map(|f| lin_ref(&store, "pol.logit", &lin_ref(&store, "pol.hidden", f))[0])
            .collect();
        assert_close(&out.logits, &logits, 1e-12);
        assert_close(&out.probs, &softmax(&logits), 1e-12);
        assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((out.value - critic_ref(&store, &feats)).abs() < 1e-12);
        assert!(out.hidden.is_none() && out.usage.is_none());
    }
}

#[test]
fn st_lemn_zero_temporal_cell_is_uniform() {
    let (mut store, net) = net(PolicyKind::St, 16);
    for name in ["pol.temporal.w_ih", "pol.temporal.w_hh", "pol.temporal.bias"] {
        set(&mut store, name, 0.0);
    }
    let r = run(&store, &net, &candidates(4, 17), &[0.0; 4], None);
    let b = p(&store, "pol.logit.b")[0];
    assert_close(&r.logits, &[b; 5], 1e-15);
    assert_close(&r.probs, &[0.2; 5], 1e-15);
}

#[test]
fn st_lemn_two_steps_match_unrolled_oracle() {
    let (store, net) = net(PolicyKind::St, 18);
    let n = 4;
    let q = net.temporal_dim();
    let cands = candidates(n, 19);
    let mut g = Graph::new(&store);
    let c = cand_var(&mut g, &cands);
    let query = g.constant(Tensor::zeros(&[D]));
    let usage = vec![0.0; n];
    let mut hidden: Vec<Option<Var>> = vec![None; n];
    let mut outs = Vec::new();
    for _ in 0..2 {
        let out = net
            .select(
                &mut g,
                &PolicyInput {
                    candidates: c,
                    query,
                    hop_logits: None,
                    usage: &usage,
                    hidden: &hidden,
                },
                None,
            )
            .unwrap();
        hidden = out.new_hidden.clone().unwrap().into_iter().map(Some).collect();
        outs.push(out);
    }

    let feats = features_ref(&store, &cands);
    let mut h = vec![vec![0.0; q]; n + 1];
    for out in &outs {
        let mut next = Vec::new();
        for i in 0..=n {
            // The incoming candidate always starts from the zero state.
            let prev = if i < n { h[i].clone() } else { vec![0.0; q] };
            next.push(gru_ref(&store, "pol.temporal", &feats[i], &prev));
        }
        let logits: Vec<f64> = next.iter().map(|hi| lin_ref(&store, "pol.logit", hi)[0]).collect();
        assert_close(g.value(out.logits).data(), &logits, 1e-12);
        for i in 0..n {
            assert_close(g.value(out.new_hidden.as_ref().unwrap()[i]).data(), &next[i], 1e-12);
        }
        h = next;
    }
}

#[test]
fn st_hidden_states_follow_their_payloads() {
    let (store, net) = net(PolicyKind::St, 20);
    let n = 4;
    let mut g = Graph::new(&store);
    let c = cand_var(&mut g, &candidates(n, 21));
    let query = g.constant(Tensor::zeros(&[D]));
    let hidden = vec![None; n];
    let out = net
        .select(
            &mut g,
            &PolicyInput {
                candidates: c,
                query,
                hop_logits: None,
                usage: &[0.0; 4],
                hidden: &hidden,
            },
            None,
        )
        .unwrap();
    let states = out.new_hidden.unwrap();
    for evict in 0..=n {
        let mut buf: MemoryBuffer<usize, Var> = MemoryBuffer::new(n).unwrap();
        for i in 0..n {
            buf.append(i).unwrap();
        }
        buf.commit_aux(None, Some(states.clone())).unwrap();
        buf.replace_at(evict, 99).unwrap();
        for e in buf.entries() {
            if e.payload == 99 {
                assert!(e.hidden.is_none());
            } else {
                assert_eq!(e.hidden, Some(states[e.payload]));
            }
        }
    }
}

#[test]
fn spatial_policies_depend_on_memory_order() {
    for kind in [PolicyKind::S, PolicyKind::St] {
        let (store, net) = net(kind, 22);
        let cands = candidates(4, 23);
        let base = run(&store, &net, &cands, &[0.0; 4], None);
        let mut swapped = cands.clone();
        swapped.swap(0, 2);
        let other = run(&store, &net, &swapped, &[0.0; 4], None);
        // Compare by payload: slot 0 now holds what was slot 2.
        let mapped = [
            other.probs[2],
            other.probs[1],
            other.probs[0],
            other.probs[3],
            other.probs[4],
        ];
        assert!(base.probs.iter().zip(&mapped).any(|(a, b)| (a - b).abs() > 1e-9));
    }
}

#[test]
fn identity_shuffle_changes_nothing() {
    let (store, net) = net(PolicyKind::S, 24);
    let cands = candidates(5, 25);
    let mut g = Graph::new(&store);
    let c = cand_var(&mut g, &cands);
    let q = g.constant(Tensor::zeros(&[D]));
    let input = PolicyInput {
        candidates: c,
        query: q,
        hop_logits: None,
        usage: &[0.0; 5],
        hidden: &[None; 5],
    };
    let a = net.select(&mut g, &input, None).unwrap();
    let b = net.select(&mut g, &input, Some(&ShuffleView::identity(5))).unwrap();
    assert_eq!(a.probs, b.probs);
}

#[test]
fn shuffled_outputs_are_mapped_back_to_payloads() {
    for kind in [PolicyKind::S, PolicyKind::St] {
        let (store, net) = net(kind, 26);
        let cands = candidates(5, 27);
        let mut r = rng(28);
        for _ in 0..10 {
            let view = ShuffleView::random(5, &mut r);
            let mut g = Graph::new(&store);
            let c = cand_var(&mut g, &cands);
            let q = g.constant(Tensor::zeros(&[D]));
            let input = PolicyInput {
                candidates: c,
                query: q,
                hop_logits: None,
                usage: &[0.0; 5],
                hidden: &[None; 5],
            };
            let shuffled = net.select(&mut g, &input, Some(&view)).unwrap();
            // Oracle: evaluate directly on the permuted rows.
            let mut rows: Vec<Vec<f64>> = view.perm.iter().map(|&i| cands[i].clone()).collect();
            rows.push(cands[5].clone());
            let direct = run(&store, &net, &rows, &[0.0; 5], None);
            for j in 0..5 {
                assert_eq!(shuffled.probs[view.to_original(j)], direct.probs[j]);
            }
            assert_eq!(shuffled.probs[5], direct.probs[5]);
            assert_eq!(view.to_original(5), 5);
            let lp = g.value(shuffled.log_probs).data().to_vec();
            for (a, b) in lp.iter().zip(&shuffled.probs) {
                assert!((a.exp() - b).abs() < 1e-12);
            }
            if let Some(h) = &shuffled.new_hidden {
                for j in 0..5 {
                    assert_close(
                        g.value(h[view.to_original(j)]).data(),
                        &direct.hidden.as_ref().unwrap()[j],
                        0.0 + 1e-15,
                    );
                }
            }
            let inv = view.inverse();
            assert!((0..5).all(|i| view.perm[inv[i]] == i));
        }
    }
}

#[test]
fn sample_action_modes() {
    let mut r = rng(29);
    let one_hot = [0.0, 0.0, 1.0, 0.0];
    assert_eq!(sample_action(&one_hot, SampleMode::Sample, &mut r).unwrap(), 2);
    assert_eq!(sample_action(&one_hot, SampleMode::Argmax, &mut r).unwrap(), 2);
    assert_eq!(sample_action(&[0.2, 0.5, 0.3], SampleMode::Argmax, &mut r).unwrap(), 1);
    assert_eq!(sample_action(&[0.5, 0.5], SampleMode::Argmax, &mut r).unwrap(), 0);
    assert!(sample_action(&[0.5, 0.6], SampleMode::Sample, &mut r).is_err());
    assert!(sample_action(&[], SampleMode::Argmax, &mut r).is_err());

    let mut counts = [0usize; 5];
    for _ in 0..10_000 {
        counts[sample_action(&[0.2; 5], SampleMode::Sample, &mut r).unwrap()] += 1;
    }
    for c in counts {
        assert!((c as f64 / 10_000.0 - 0.2).abs() < 0.02, "{counts:?}");
    }
}

#[test]
fn critic_mean_pools() {
    let mut store = ParamStore::new();
    let critic = Critic::new(&mut store, "c", D, &mut rng(30)).unwrap();
    let zeroed = {
        let mut s = store.clone();
        for id in s.ids().collect::<Vec<_>>() {
            let shape = s.get(id).shape().to_vec();
            *s.get_mut(id) = Tensor::zeros(&shape);
        }
        s
    };
    let mut g = Graph::new(&zeroed);
    let f = g.constant(Tensor::zeros(&[3, D]));
    let v = critic.forward(&mut g, f).unwrap();
    assert_eq!(g.value(v).item(), 0.0);

    let row: Vec<f64> = (0..D).map(|k| k as f64 * 0.1 - 0.3).collect();
    let mut values = Vec::new();
    for n in 1..6 {
        let mut g = Graph::new(&store);
        let f = g.constant(Tensor::matrix(&vec![row.clone(); n]).unwrap());
        let v = critic.forward(&mut g, f).unwrap();
        values.push(g.value(v).item());
    }
    assert!(values.iter().all(|v| (v - values[0]).abs() < 1e-12));
}

fn policy_loss<'a>(
    net: &'a RetentionNet,
    cands: &[Vec<f64>],
    usage: &[f64],
    steps: usize,
) -> impl Fn(&mut Graph) -> Result<Var> + 'a {
    let cands = cands.to_vec();
    let usage = usage.to_vec();
    move |g: &mut Graph| {
        let c = cand_var(g, &cands);
        let n = usage.len();
        let row = g.row(c, n)?;
        let query = g.scale(row, 0.7);
        let mut hidden: Vec<Option<Var>> = vec![None; n];
        let mut total = g.scalar(0.0);
        for t in 0..steps {
            let out = net.select(
                g,
                &PolicyInput {
                    candidates: c,
                    query,
                    hop_logits: None,
                    usage: &usage,
                    hidden: &hidden,
                },
                None,
            )?;
            if let Some(h) = &out.new_hidden {
                hidden = h.iter().copied().map(Some).collect();
            }
            let lp = g.index(out.log_probs, t % (n + 1))?;
            let v = g.mul(out.value, out.value)?;
            total = g.add(total, lp)?;
            total = g.add(total, v)?;
            total = g.add(total, out.entropy)?;
        }
        Ok(total)
    }
}

#[test]
fn policy_pipelines_pass_grad_check() {
    for kind in [PolicyKind::Im, PolicyKind::S, PolicyKind::St] {
        let (store, net) = net(kind, 31);
        let cands = candidates(3, 32);
        let rep = grad_check_params(&store, policy_loss(&net, &cands, &[0.2, -0.4, 0.1], 2), 1e-6, 1e-4).unwrap();
        assert!(rep.passed(), "{kind}: {rep:?}");
    }
}

proptest! {
    #[test]
    fn outputs_are_distributions(seed in 0u64..500, n in 1usize..6) {
        for kind in PolicyKind::ALL {
            let (store, net) = if kind == PolicyKind::Fifo {
                (ParamStore::new(), RetentionNet::new(&mut ParamStore::new(), "pol", kind, false, D, &mut rng(0)).unwrap())
            } else {
                net(kind, seed)
            };
            let r = run(&store, &net, &candidates(n, seed + 1), &vec![0.3; n], None);
            prop_assert_eq!(r.probs.len(), n + 1);
            prop_assert!(r.probs.iter().all(|&p| p >= 0.0));
            prop_assert!((r.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn argmax_ignores_logit_shift(z in proptest::collection::vec(-5.0f64..5.0, 1..8), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        prop_assert_eq!(argmax(&softmax(&z)), argmax(&softmax(&shifted)));
    }

    #[test]
    fn usage_is_a_contraction(
        v in proptest::collection::vec(-3.0f64..3.0, 4),
        z in proptest::collection::vec(-3.0f64..3.0, 4),
    ) {
        let (store, net) = net(PolicyKind::Im, 33);
        let r = run(&store, &net, &candidates(4, 34), &v, Some(&z));
        for (i, nv) in r.usage.unwrap().iter().enumerate() {
            prop_assert!(nv.abs() <= 0.1 * v[i].abs() + 0.9 * z[i].abs() + 1e-15);
        }
    }
}
