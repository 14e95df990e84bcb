//! One pass/fail line per acceptance criterion. Criterion 8 is reported but
//! does not gate the run.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use horst::cost::{
    attention_complexity, count_params_mulops, queue_inputs, shadow_step, CONV_ROWS, ROW_F_K,
    ROW_F_Q, ROW_OMEGA, ROW_OUTPUT, ROW_PHI, ROW_POST, ROW_PSI, ROW_ST_ATT, ROW_X_TO_H,
};
use horst::data::{generate_split, Split, TaskSpec};
use horst::export::{export_attention, from_gray, layer_traces, read_pgm};
use horst::layer::{st_att, AttentionMode, HorstLayer, LayerConfig, RoutingMode};
use horst::network::{cross_entropy, multi_head_loss, Labels, LossWeights, Network, Prediction};
use horst::preset::{verb_network, verb_task, verb_training};
use horst::train::{
    evaluate, grad_check_fixture, network_grad_check, sample_loss, train, Target, TrainConfig,
};
use horst::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn criterion_1_gradients() -> Outcome {
    let start = Instant::now();
    let (net, sample) = grad_check_fixture(7).unwrap();
    let report = network_grad_check(&net, &sample, &TrainConfig::default(), 1e-8).unwrap();
    let took = start.elapsed();
    outcome(
        report.max_rel_error <= 1e-4 && took < Duration::from_secs(300),
        format!(
            "2 layers C=2 H=W=8 T=4 S=2: max rel error {:.3e} over {} entries (limit 1e-4) in {:.1?} (limit 5 min)",
            report.max_rel_error, report.entries, took
        ),
    )
}

/// `sum_s T[s] M_s[h,w] V_s[c,h,w]` with every factor computed in plain loops.
fn attention_oracle(
    q: &Tensor,
    keys: &[Tensor],
    values: &[Tensor],
    tq: &Tensor,
    tk: &Tensor,
) -> Vec<f64> {
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let (c, h, w) = q.chw().unwrap();
    let hw = h * w;
    let gate = |x: &Tensor, theta: &Tensor| -> Vec<f64> {
        let d = x.data();
        let xc = x.shape()[0];
        let pooled: Vec<[f64; 2]> = (0..hw)
            .map(|p| {
                let vals = (0..xc).map(|ch| d[ch * hw + p]);
                let max = vals.clone().fold(f64::NEG_INFINITY, f64::max);
                [max, vals.sum::<f64>() / xc as f64]
            })
            .collect();
        let t = theta.data();
        (0..hw)
            .map(|p| {
                let (i, j) = ((p / w) as isize, (p % w) as isize);
                let mut acc = 0.0;
                for (ch, di, dj) in (0..2)
                    .flat_map(|ch| (0..3).flat_map(move |di| (0..3).map(move |dj| (ch, di, dj))))
                {
                    let (y, x) = (i + di as isize - 1, j + dj as isize - 1);
                    if y >= 0 && x >= 0 && y < h as isize && x < w as isize {
                        acc += t[(ch * 3 + di) * 3 + dj] * pooled[y as usize * w + x as usize][ch];
                    }
                }
                sig(acc)
            })
            .collect()
    };
    let qd = q.data();
    let fq = gate(q, tq);
    let mut scores = Vec::new();
    let mut maps = Vec::new();
    for k in keys {
        let kd = k.data();
        let fk = gate(k, tk);
        let query: Vec<f64> = (0..c)
            .map(|ch| (0..hw).map(|p| fk[p] * qd[ch * hw + p]).sum::<f64>() / hw as f64)
            .collect();
        maps.push(
            (0..hw)
                .map(|p| sig((0..c).map(|ch| query[ch] * kd[ch * hw + p]).sum()))
                .collect::<Vec<f64>>(),
        );
        scores.push(
            (0..c * hw)
                .map(|i| fq[i % hw] * qd[i] * fk[i % hw] * kd[i])
                .sum::<f64>()
                / ((c * hw) as f64).sqrt(),
        );
    }
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
    let t: Vec<f64> = scores.iter().map(|s| (s - m).exp() / z).collect();
    let mut out = vec![0.0; c * hw];
    for (s, v) in values.iter().enumerate() {
        for (i, o) in out.iter_mut().enumerate() {
            *o += t[s] * maps[s][i % hw] * v.data()[i];
        }
    }
    out
}

fn criterion_2_attention_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (n, c, h, w) = (
            rng.gen_range(1..=8),
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
        );
        let mut t = |shape: &[usize]| Tensor::uniform(shape, 1.5, &mut rng);
        let q = t(&[c, h, w]);
        let keys: Vec<Tensor> = (0..n).map(|_| t(&[c, h, w])).collect();
        let values: Vec<Tensor> = (0..n).map(|_| t(&[c, h, w])).collect();
        let (tq, tk) = (t(&[1, 2, 3, 3]), t(&[1, 2, 3, 3]));
        let mut g = Graph::new();
        let qv = g.constant(q.clone());
        let kv: Vec<Var> = keys.iter().map(|k| g.constant(k.clone())).collect();
        let vv: Vec<Var> = values.iter().map(|v| g.constant(v.clone())).collect();
        let (tqv, tkv) = (g.constant(tq.clone()), g.constant(tk.clone()));
        let (out, _) = st_att(
            &mut g,
            qv,
            &kv,
            &vv,
            tqv,
            tkv,
            AttentionMode::SpatialTemporal,
            0,
        )
        .unwrap();
        let expect = attention_oracle(&q, &keys, &values, &tq, &tk);
        for (a, b) in g.value(out).data().iter().zip(&expect) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(
        worst <= 1e-6,
        format!("100 instances up to n=8 C=4 H=W=4: max abs deviation {worst:.3e} (limit 1e-6)"),
    )
}

fn criterion_3_order_one() -> Outcome {
    let mut checked = 0;
    let mut bad = Vec::new();
    for mode in AttentionMode::ALL {
        let mut cfg = verb_network(mode, RoutingMode::ConcatToBoth);
        cfg.layers.iter_mut().for_each(|l| l.order = 1);
        let net = Network::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let spec = TaskSpec {
            observe_fraction: 0.5,
            ..verb_task(3)
        };
        let sample = horst::data::generate_sample(&spec, 12).unwrap();
        for p in net.forward_sequence(&sample.frames).unwrap() {
            for tr in p.traces.iter().filter(|t| !t.is_empty()) {
                checked += 1;
                if tr.temporal_weights != [1.0] {
                    bad.push(format!("{}: {:?}", mode.name(), tr.temporal_weights));
                }
            }
        }
    }
    outcome(
        bad.is_empty() && checked > 0,
        format!(
            "S=1, all modes, {checked} non-empty steps: weights exactly [1.0] ({} violations)",
            bad.len()
        ),
    )
}

fn criterion_4_cost_table() -> Outcome {
    let mut failures = Vec::new();
    let r = count_params_mulops(&LayerConfig::new(128, 128, 8), 14, 14).unwrap();
    let (c, s, hw) = (128u128, 8u128, 196u128);
    let expect = [
        (ROW_X_TO_H, Some(c * c * 9), 9 * c * c * hw),
        (ROW_OMEGA, Some(c * c * 9), 9 * c * c * hw),
        (ROW_PHI, Some(2 * c * c * 9), 18 * s * c * c * hw),
        (ROW_PSI, Some(2 * c * c * 9), 18 * s * c * c * hw),
        (ROW_F_Q, Some(18), 18 * hw),
        (ROW_F_K, Some(18), 18 * s * hw),
        (ROW_ST_ATT, None, (6 * s + 1) * c * hw),
        (ROW_POST, Some(c * c * 9), 9 * c * c * hw),
        (ROW_OUTPUT, Some(3 * c * c * 9), 27 * c * c * hw),
    ];
    for (name, p, m) in expect {
        let row = r.row(name).unwrap();
        if (row.params, row.mulops) != (p, m) {
            failures.push(format!("{name} formula"));
        }
    }
    if r.row(ROW_PHI).unwrap().params != Some(294_912)
        || r.row(ROW_ST_ATT).unwrap().mulops != 1_229_312
    {
        failures.push("worked example".into());
    }

    // Instrumented execution at C=2, H=W=4, S=3 with a full queue.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let layer = HorstLayer::new(LayerConfig::new(2, 2, 3), &mut rng).unwrap();
    let report = count_params_mulops(&layer.config, 4, 4).unwrap();
    let mut g = Graph::new();
    let vars = layer.bind(&mut g, false);
    let mut state = layer.state();
    let mut history: Vec<(Tensor, Tensor)> = Vec::new();
    let mut compared = 0;
    for t in 0..5 {
        let frame = Tensor::uniform(&[2, 4, 4], 1.0, &mut rng);
        let x = g.constant(frame.clone());
        let out = layer.step(&mut g, &vars, x, &mut state).unwrap();
        if t >= 3 {
            let shadow = shadow_step(&layer, &frame, &history).unwrap();
            for row in CONV_ROWS {
                compared += 1;
                if shadow.mulops(row) != Some(report.row(row).unwrap().mulops) {
                    failures.push(format!("step {t} {row}: counted {:?}", shadow.mulops(row)));
                }
            }
            let dev = shadow
                .y
                .data()
                .iter()
                .zip(g.value(out.y).data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if dev > 1e-9 {
                failures.push(format!("step {t}: shadow output deviates by {dev:e}"));
            }
        }
        history.insert(
            0,
            queue_inputs(
                layer.config.routing_mode,
                g.value(out.h),
                g.value(out.a),
                g.value(out.a_raw),
            )
            .unwrap(),
        );
        history.truncate(3);
    }
    let params_ok = report.total_params == layer.params.kernel_param_count() as u128;
    if !params_ok {
        failures.push("parameter total differs from the layer".into());
    }
    outcome(
        failures.is_empty(),
        format!(
            "9 rows at C=128 H=W=14 S=8; {compared} instrumented conv counts at C=2 H=W=4 S=3; {}",
            if failures.is_empty() {
                "all exact".to_string()
            } else {
                failures.join("; ")
            }
        ),
    )
}

fn criterion_5_complexity() -> Outcome {
    let t = attention_complexity(14, 14, 128, 8).unwrap();
    let mut ok = t.decomposed == 401_408
        && t.full_temporal == 200_704
        && t.decomposed == 2 * t.full_temporal;
    ok &= t.joint_saturated || t.joint == 196u128.pow(9) * 128;
    for (h, w, c, s) in [(2, 2, 1, 1), (1, 1, 5, 1), (3, 5, 7, 4), (4, 4, 2, 6)] {
        let x = attention_complexity(h, w, c, s).unwrap();
        let (hw, c, s) = ((h * w) as u128, c as u128, s as u128);
        ok &= x.decomposed == hw * s * c + s * hw * c;
        ok &= x.full_temporal == s * hw * c;
        ok &= x.joint == hw.pow(s as u32 + 1) * c;
    }
    outcome(
        ok,
        format!(
            "H=W=14 C=128 S=8: decomposed {} = 2 x full_temporal {}; joint {}",
            t.decomposed, t.full_temporal, t.joint
        ),
    )
}

fn criterion_6_causality() -> Outcome {
    let mut ok = true;
    let mut compared = 0;
    let net = Network::new(
        verb_network(AttentionMode::SpatialTemporal, RoutingMode::ConcatToBoth),
        &mut ChaCha8Rng::seed_from_u64(6),
    )
    .unwrap();
    let spec = TaskSpec {
        observe_fraction: 0.5,
        ..verb_task(6)
    };
    let frames = horst::data::generate_sample(&spec, 1).unwrap().frames;
    let (fixture, sample) = grad_check_fixture(6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    for (net, frames) in [(&net, frames), (&fixture, sample.frames)] {
        let full = net.forward_sequence(&frames).unwrap();
        for t in 0..frames.len() {
            let mut altered = frames.clone();
            for f in altered.iter_mut().skip(t + 1) {
                *f = Tensor::uniform(f.shape(), 3.0, &mut rng);
            }
            let moved = net.forward_sequence(&altered).unwrap();
            let cut = net.forward_sequence(&frames[..=t]).unwrap();
            ok &= moved[..=t] == full[..=t] && cut[..] == full[..=t];
            compared += 1;
        }
    }
    outcome(
        ok,
        format!("{compared} prefixes: predictions bitwise equal after altering or dropping later frames"),
    )
}

fn criterion_7_gate() -> (Outcome, Network) {
    let start = Instant::now();
    let spec = verb_task(2024);
    let train_set = generate_split(&spec, Split::Train).unwrap();
    let test_set = generate_split(&spec, Split::Test).unwrap();
    let mut net = Network::new(
        verb_network(AttentionMode::SpatialTemporal, RoutingMode::ConcatToBoth),
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    train(&mut net, &train_set, &verb_training(GATE_EPOCHS, 1)).unwrap();
    let report = evaluate(&net, &test_set, 1, Target::Verb).unwrap();
    let took = start.elapsed();

    // Single-batch overfit fixture.
    let small = generate_split(
        &TaskSpec {
            train_samples: 8,
            ..verb_task(3)
        },
        Split::Train,
    )
    .unwrap();
    let mut tiny = Network::new(
        verb_network(AttentionMode::SpatialTemporal, RoutingMode::ConcatToBoth),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let cfg = verb_training(200, 0);
    train(&mut tiny, &small, &cfg).unwrap();
    let overfit = small
        .iter()
        .map(|s| sample_loss(&tiny, s, &cfg).unwrap())
        .sum::<f64>()
        / 8.0;

    let pass = report.top1 >= 0.9 && took < Duration::from_secs(15 * 60) && overfit < 0.05;
    (
        outcome(
            pass,
            format!(
                "3 layers S=8 spatial_temporal, 2000/500 samples, {GATE_EPOCHS} epochs: top-1 {:.3} (limit 0.90) in {:.0?} (limit 15 min); overfit loss after 200 steps {overfit:.4} (limit 0.05)",
                report.top1, took
            ),
        ),
        net,
    )
}

const GATE_EPOCHS: usize = 12;
const ABLATION_EPOCHS: usize = 8;

fn criterion_8_ablation() -> Outcome {
    let variants = [
        (
            "spatial_temporal+concat",
            AttentionMode::SpatialTemporal,
            RoutingMode::ConcatToBoth,
        ),
        (
            "temporal_only",
            AttentionMode::TemporalOnly,
            RoutingMode::ConcatToBoth,
        ),
        (
            "spatial_only",
            AttentionMode::SpatialOnly,
            RoutingMode::ConcatToBoth,
        ),
        (
            "split_h_to_v",
            AttentionMode::SpatialTemporal,
            RoutingMode::SplitHToV,
        ),
    ];
    let mut means = Vec::new();
    for (name, mode, routing) in variants {
        let mut acc = 0.0;
        for seed in 0..3u64 {
            let spec = TaskSpec {
                train_samples: 500,
                test_samples: 200,
                ..verb_task(100 + seed)
            };
            let tr = generate_split(&spec, Split::Train).unwrap();
            let te = generate_split(&spec, Split::Test).unwrap();
            let mut net = Network::new(
                verb_network(mode, routing),
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap();
            train(&mut net, &tr, &verb_training(ABLATION_EPOCHS, seed)).unwrap();
            acc += evaluate(&net, &te, 1, Target::Verb).unwrap().top1 / 3.0;
        }
        means.push((name, acc));
    }
    let st = means[0].1;
    let ordering = st >= means[1].1.max(means[2].1) && st >= means[3].1;
    let listed: Vec<String> = means.iter().map(|(n, a)| format!("{n} {a:.3}")).collect();
    outcome(
        ordering,
        format!(
            "3 seeds, 500/200 samples, {ABLATION_EPOCHS} epochs, mean top-1: {}",
            listed.join(", ")
        ),
    )
}

fn criterion_9_loss() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let mut logits = |n: usize| {
            (0..n)
                .map(|_| rng.gen_range(-5.0..5.0))
                .collect::<Vec<f64>>()
        };
        let p = Prediction {
            verb: Some(logits(4)),
            noun: Some(logits(3)),
            action: logits(12),
            traces: Vec::new(),
        };
        let labels = Labels {
            verb: rng.gen_range(0..4),
            noun: rng.gen_range(0..3),
            action: rng.gen_range(0..12),
        };
        let total = multi_head_loss(&p, labels, LossWeights::default()).unwrap();
        let sum = cross_entropy(p.verb.as_ref().unwrap(), labels.verb).unwrap()
            + cross_entropy(p.noun.as_ref().unwrap(), labels.noun).unwrap()
            + cross_entropy(&p.action, labels.action).unwrap();
        worst = worst.max((total - sum).abs());
    }
    let uniform = Prediction {
        verb: Some(vec![0.0; 4]),
        noun: Some(vec![0.0; 3]),
        action: vec![0.0; 12],
        traces: Vec::new(),
    };
    let labels = Labels {
        verb: 3,
        noun: 0,
        action: 7,
    };
    let u = multi_head_loss(&uniform, labels, LossWeights::default()).unwrap();
    let expected = 4f64.ln() + 3f64.ln() + 12f64.ln();
    outcome(
        worst <= 1e-9 && (u - expected).abs() <= 1e-6,
        format!(
            "max |L - sum CE| {worst:.1e} (limit 1e-9); uniform logits {u:.6} vs ln4+ln3+ln12 {expected:.6}"
        ),
    )
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

fn criterion_10_export(net: &Network) -> Outcome {
    let spec = TaskSpec {
        observe_fraction: 0.5,
        ..verb_task(10)
    };
    let frames = horst::data::generate_sample(&spec, 3).unwrap().frames;
    let orders: Vec<usize> = net.config.layers.iter().map(|l| l.order).collect();
    let export = |dir: &Path| {
        let preds = net.forward_sequence(&frames).unwrap();
        export_attention(dir, &layer_traces(&preds, &orders).unwrap()).unwrap()
    };
    let dir = tempfile::tempdir().unwrap();
    let run_a = export(dir.path());
    let run_b = export(dir.path());

    let mut rows = 0;
    let mut worst_row = 0.0f64;
    let mut maps = 0;
    let mut worst_px = 0.0f64;
    let layers = layer_traces(&net.forward_sequence(&frames).unwrap(), &orders).unwrap();
    for (l, layer) in layers.iter().enumerate() {
        let csv = fs::read_to_string(run_a.join(format!("layer_{l}_temporal.csv"))).unwrap();
        for line in csv.lines().skip(1) {
            let sum: f64 = line
                .split(',')
                .skip(1)
                .filter(|c| !c.is_empty())
                .map(|c| c.parse::<f64>().unwrap())
                .sum();
            worst_row = worst_row.max((sum - 1.0).abs());
            rows += 1;
        }
        for t in &layer.traces {
            for (s, map) in t.spatial_maps.iter().enumerate() {
                let (_, _, px) =
                    read_pgm(&run_a.join(format!("layer_{l}_t_{}_slot_{s}.pgm", t.timestep)))
                        .unwrap();
                for (v, p) in map.iter().zip(px) {
                    worst_px = worst_px.max((from_gray(p) - v).abs());
                }
                maps += 1;
            }
        }
    }
    let identical = tree(&run_a) == tree(&run_b) && run_a != run_b;
    outcome(
        rows > 0 && worst_row <= 1e-6 && maps > 0 && worst_px <= 1.0 / 255.0 && identical,
        format!(
            "{rows} CSV rows, max |sum - 1| {worst_row:.1e} (limit 1e-6); {maps} maps, max round-trip error {worst_px:.5} (limit {:.5}); repeated export identical: {identical}",
            1.0 / 255.0
        ),
    )
}

#[test]
fn acceptance() {
    let mut gated = Vec::new();
    let mut report = |id: &str, o: Outcome, gate: bool| {
        let verdict = match (o.pass, gate) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "MISS (reported, not gated)",
        };
        println!("criterion {id}: {verdict}: {}", o.detail);
        if gate {
            gated.push((id.to_string(), o.pass));
        }
    };
    report("1 gradient correctness", criterion_1_gradients(), true);
    report("2 attention oracle", criterion_2_attention_oracle(), true);
    report("3 order-1 collapse", criterion_3_order_one(), true);
    report("4 cost table fidelity", criterion_4_cost_table(), true);
    report("5 complexity expressions", criterion_5_complexity(), true);
    report("6 causality", criterion_6_causality(), true);
    let (gate, trained) = criterion_7_gate();
    report("7 learning gate", gate, true);
    report("8 ablation direction", criterion_8_ablation(), false);
    report("9 multi-head loss", criterion_9_loss(), true);
    report("10 export integrity", criterion_10_export(&trained), true);
    let failed: Vec<&String> = gated.iter().filter(|(_, p)| !p).map(|(id, _)| id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
