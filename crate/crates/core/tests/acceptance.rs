//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use attnloc::backend::dump::{read_attention_dump, write_attention_dump};
use attnloc::backend::toy::{calibrate, ToyConfig, ToyModelParams, ToyTransformer};
use attnloc::backend::{AttentionBackend, AttentionPayload, BackendKind, Granularity};
use attnloc::classifier::{train, BiLstm, FeatureSequence, Mlp, ModelKind, Network, SequenceModel, TrainConfig};
use attnloc::corpus::CodeSample;
use attnloc::evaluation::{precision_recall_f1, Averaging, Truth};
use attnloc::pipeline::{self, PipelineConfig};
use attnloc::prompting::{build_base_prompt, map_tokens_to_lines};
use attnloc::reduction::{diff_attn_mat, layerwise_attn_mat, vuln_attn_mat};
use attnloc::scoring::{baseline_score, baseline_score_exact, ReportSource, RunOutputs, SuspicionReport};
use attnloc::synthetic::{self, SyntheticConfig};
use num_bigint::BigInt;
use num_rational::BigRational;
use rand::Rng;

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

// ------------------------------------------------------------ metric arithmetic

/// One report whose thresholded set yields the requested micro counts.
fn counted_report(tp: usize, predicted: usize, actual: usize) -> (SuspicionReport, Truth) {
    let loc = actual + predicted;
    let truth: BTreeSet<usize> = (1..=actual).collect();
    let mut chosen: BTreeSet<usize> = (1..=tp).collect();
    chosen.extend(actual + 1..=actual + predicted - tp);
    let report = SuspicionReport {
        sample_id: "s".into(),
        source: ReportSource::Classifier,
        scores: (1..=loc).map(|l| f64::from(u8::from(chosen.contains(&l)))).collect(),
        ranking: (1..=loc).collect(),
        predicted: chosen,
    };
    (report, Truth::from([("s".to_string(), truth)]))
}

fn metric_arithmetic() -> Outcome {
    let cases = [((1551, 4125, 11750), 19.5), ((6279, 21000, 59800), 15.5)];
    let mut details = Vec::new();
    let mut pass = true;
    for ((tp, pred, actual), expected) in cases {
        let (report, truth) = counted_report(tp, pred, actual);
        let (p, r, f1) = precision_recall_f1(&[report], &truth, Averaging::Micro).unwrap();
        pass &= (f1 - expected).abs() <= 0.05;
        details.push(format!("P {p:.1} R {r:.1} -> F1 {f1:.3} (want {expected})"));
    }
    outcome(pass, details.join("; "))
}

// ------------------------------------------------------------ streaming reduction

fn reduction_oracle() -> Outcome {
    let mut rng = common::rng(11);
    let mut worst = 0.0f64;
    let instances = 120;
    for _ in 0..instances {
        let tokens = rng.random_range(4..=64);
        let layers = rng.random_range(1..=4);
        let heads = rng.random_range(1..=4);
        let lines = rng.random_range(3..=8);
        let base = common::random_causal_attention(&mut rng, layers, heads, tokens);
        let hl = common::random_causal_attention(&mut rng, layers, heads, tokens);
        let base_spans = common::random_spans(&mut rng, tokens, lines);
        let hl_spans = common::random_spans(&mut rng, tokens, lines);
        let highlighted = rng.random_range(1..=lines - 2);
        let instruction = [lines - 1, lines];

        let b = layerwise_attn_mat(&mut base.to_stream(), &base_spans).unwrap();
        let h = layerwise_attn_mat(&mut hl.to_stream(), &hl_spans).unwrap();
        let v = vuln_attn_mat(&diff_attn_mat(&h, &b).unwrap(), &instruction, highlighted).unwrap();

        let nb = common::naive_layerwise(&base.rounded(), &base_spans.spans);
        let nh = common::naive_layerwise(&hl.rounded(), &hl_spans.spans);
        let expected = common::naive_vuln(&nh, &nb, &instruction, highlighted);
        for (r, row) in expected.iter().enumerate() {
            for (c, &e) in row.iter().enumerate() {
                worst = worst.max((v.0.get(r, c) - e).abs());
            }
        }
    }
    outcome(worst < 1e-6, format!("{instances} instances, max |delta| {worst:.2e}"))
}

// ------------------------------------------------------------ toy invariants

fn toy_conservation() -> Outcome {
    let toy = ToyTransformer::from_seed(5, ToyConfig::default()).unwrap();
    let heads = toy.descriptor().num_heads;
    let mut rng = common::rng(21);
    let (mut row_err, mut nonzero_future, mut col_err) = (0.0f64, 0usize, 0.0f64);
    for i in 0..50 {
        let loc = rng.random_range(1..=6);
        let sample = CodeSample::new(format!("p{i}"), "c", common::random_program(&mut rng, loc), [1]).unwrap();
        let layout = build_base_prompt(&sample);
        let (tok, mut stream) = toy.prefill_attention(&layout.text, Granularity::Full).unwrap();
        let t = stream.num_tokens;
        let AttentionPayload::Full(data) = &stream.payload else {
            return outcome(false, "toy returned a reduced payload for a full request");
        };
        for row in data.chunks(t) {
            let sum: f64 = row.iter().map(|&v| f64::from(v)).sum();
            row_err = row_err.max((sum - 1.0).abs());
        }
        for (idx, row) in data.chunks(t).enumerate() {
            let query = idx % t;
            nonzero_future += row[query + 1..].iter().filter(|&&v| v != 0.0).count();
        }
        let spans = map_tokens_to_lines(&layout, &tok.token_offsets).unwrap();
        let lam = layerwise_attn_mat(&mut stream, &spans).unwrap();
        for c in 0..lam.0.cols() {
            col_err = col_err.max((lam.0.col_sum(c) - heads as f64).abs());
        }
    }
    outcome(
        row_err <= 1e-5 && nonzero_future == 0 && col_err <= 1e-4,
        format!("50 prompts, max row-sum err {row_err:.2e}, nonzero future entries {nonzero_future}, max column-sum err {col_err:.2e}"),
    )
}

// ------------------------------------------------------------ gradients

fn gradient_checks() -> Outcome {
    let eps = 1e-5;
    let toy_cfg = ToyConfig {
        d_model: 8,
        num_layers: 2,
        num_heads: 2,
        max_seq: 16,
        d_ff: 8,
    };
    let params = ToyModelParams::init(3, toy_cfg).unwrap();
    let toy = common::toy_gradient_check(&params, &["int x;", "free(p);"], eps);

    let mut rng = common::rng(31);
    let (xs, ys) = common::random_sequence(&mut rng, 3, 3);
    let lstm = Network::Bilstm(BiLstm::init(&mut rng, 3, 4));
    let lstm = common::network_gradient_check(&lstm, &xs, &ys, eps);
    let mlp = Network::Mlp(Mlp::init(&mut rng, 3, 4));
    let mlp = common::network_gradient_check(&mlp, &xs, &ys, eps);
    let pass = [toy, lstm, mlp].iter().all(|c| c.tensor < 1e-4);
    outcome(
        pass,
        format!(
            "max per-tensor rel err: toy {:.2e}, bi-lstm {:.2e}, mlp {:.2e} (worst single entry: {:.2e}, {:.2e}, {:.2e})",
            toy.tensor, lstm.tensor, mlp.tensor, toy.elementwise, lstm.elementwise, mlp.elementwise
        ),
    )
}

// ------------------------------------------------------------ planted signal

fn planted_config(set: &synthetic::SyntheticSet, out: &Path) -> PipelineConfig {
    let mut c = PipelineConfig {
        dataset: set.dataset_path.clone(),
        out_dir: out.to_path_buf(),
        ..Default::default()
    };
    c.backend.kind = BackendKind::Dump;
    c.backend.dump_dir = Some(set.dump_dir.clone());
    c.classifier = TrainConfig {
        hidden_dim: 16,
        learning_rate: 0.05,
        epochs: 30,
        ..Default::default()
    };
    c
}

fn chance_top1(samples: &[CodeSample]) -> f64 {
    100.0 * samples.iter().map(|s| s.vuln_lines.len() as f64 / s.loc() as f64).sum::<f64>() / samples.len() as f64
}

struct PlantedRuns {
    planted: Outcome,
    determinism: Outcome,
}

fn planted_signal(root: &Path) -> PlantedRuns {
    let planted = synthetic::generate(&SyntheticConfig::default(), &root.join("planted")).unwrap();
    let control = synthetic::generate(
        &SyntheticConfig {
            delta_multiplier: 0.0,
            ..Default::default()
        },
        &root.join("control"),
    )
    .unwrap();

    let first = pipeline::run(&planted_config(&planted, &root.join("run_a"))).unwrap();
    let again = pipeline::run(&planted_config(&planted, &root.join("run_b"))).unwrap();
    let ctrl = pipeline::run(&planted_config(&control, &root.join("run_control"))).unwrap();

    let m = &first.evaluation.metrics;
    let top1 = m.top_n[&1];
    let ctrl_top1 = ctrl.evaluation.metrics.top_n[&1];
    let chance = chance_top1(&control.samples);
    let planted_pass = top1 >= 90.0 && m.f1 >= 80.0 && ctrl_top1 <= chance + 15.0;
    let planted = outcome(
        planted_pass,
        format!(
            "delta {:.4} (3 x std {:.4}): top-1 {top1:.1}%, F1 {:.1}; control top-1 {ctrl_top1:.1}% vs chance {chance:.1}%",
            planted.delta, planted.feature_std, m.f1
        ),
    );

    let a = std::fs::read(root.join("run_a/reports.jsonl")).unwrap();
    let b = std::fs::read(root.join("run_b/reports.jsonl")).unwrap();
    let mut sets = vec![&first.evaluation, &again.evaluation, &ctrl.evaluation];
    sets.extend(first.fold_evaluations.iter());
    sets.extend(ctrl.fold_evaluations.iter());
    let monotone = sets.iter().all(|e| {
        let t = &e.metrics.top_n;
        t[&1] <= t[&3] && t[&3] <= t[&5]
    });
    let determinism = outcome(
        a == b && !a.is_empty() && monotone,
        format!(
            "reports identical: {} ({} bytes); top-1 <= top-3 <= top-5 on {} report sets: {monotone}",
            a == b,
            a.len(),
            sets.len()
        ),
    );
    PlantedRuns { planted, determinism }
}

// ------------------------------------------------------------ baseline

fn baseline_exactness() -> Outcome {
    let mut rng = common::rng(41);
    let mut mismatches = 0;
    for i in 0..1000 {
        let loc = rng.random_range(1..=30);
        let k = rng.random_range(1..=10);
        let runs: Vec<Vec<usize>> = (0..k)
            .map(|_| {
                let n = rng.random_range(0..=5);
                (0..n).map(|_| rng.random_range(1..=loc)).collect()
            })
            .collect();
        let (num, den) = common::brute_force_baseline(&runs, loc);
        let exact = baseline_score_exact(
            &RunOutputs {
                sample_id: format!("r{i}"),
                runs,
            },
            loc,
        )
        .unwrap();
        let ok = exact
            .iter()
            .zip(&num)
            .all(|(e, &n)| *e == BigRational::new(BigInt::from(n), BigInt::from(den)));
        mismatches += usize::from(!ok);
    }
    let example = baseline_score(
        &RunOutputs {
            sample_id: "ex".into(),
            runs: vec![vec![3, 5], vec![5]],
        },
        6,
    )
    .unwrap();
    let example_ok = example[2] == 0.25 && example[4] == 0.75;
    outcome(
        mismatches == 0 && example_ok,
        format!("1000 random cases, {mismatches} mismatches; worked example line 3 = {}, line 5 = {}", example[2], example[4]),
    )
}

// ------------------------------------------------------------ round trips

fn round_trips(root: &Path) -> Outcome {
    let toy = ToyTransformer::from_seed(9, ToyConfig {
        d_model: 16,
        num_layers: 2,
        num_heads: 2,
        ..Default::default()
    })
    .unwrap();
    let mut dumps_ok = true;
    for (name, g) in [("full", Granularity::Full), ("reduced", Granularity::LastTokenHeadSummed)] {
        let (tok, stream) = toy.prefill_attention("Code:\n1: free(p);\nvulnerable line: ```", g).unwrap();
        let path = root.join(format!("{name}.attn"));
        write_attention_dump(&stream, &tok, &path).unwrap();
        let (tok2, stream2) = read_attention_dump(&path).unwrap();
        // the file does not record which backend produced it
        dumps_ok &= tok == tok2
            && stream.payload == stream2.payload
            && stream.num_tokens == stream2.num_tokens
            && (stream.descriptor.num_layers, stream.descriptor.num_heads)
                == (stream2.descriptor.num_layers, stream2.descriptor.num_heads);
    }

    let mut rng = common::rng(51);
    let data: Vec<FeatureSequence> = (0..6)
        .map(|i| {
            let (xs, ys) = common::random_sequence(&mut rng, 4, 3);
            FeatureSequence {
                sample_id: format!("m{i}"),
                language: "c".into(),
                features: xs,
                labels: Some(ys),
            }
        })
        .collect();
    let mut models_ok = true;
    for kind in [ModelKind::Bilstm, ModelKind::Mlp] {
        let model = train(
            &data,
            &TrainConfig {
                kind,
                hidden_dim: 5,
                epochs: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let path = root.join(format!("{kind:?}.model.json"));
        model.save(&path).unwrap();
        models_ok &= SequenceModel::load(&path).unwrap() == model;
    }
    outcome(dumps_ok && models_ok, format!("dumps (full, reduced): {dumps_ok}; models (bi-lstm, mlp): {models_ok}"))
}

fn toy_calibration_lowers_loss() -> Outcome {
    let cfg = ToyConfig {
        d_model: 8,
        num_layers: 2,
        num_heads: 2,
        max_seq: 32,
        d_ff: 8,
    };
    let params = ToyModelParams::init(1, cfg).unwrap();
    let cal = calibrate(&params, &["int x = 0;", "free(p);"], 200, 0.05).unwrap();
    let (a, b) = (cal.loss_trace[0], *cal.loss_trace.last().unwrap());
    outcome(b < a, format!("200 steps: loss {a:.4} -> {b:.4}"))
}

fn main() {
    let root = tempfile::tempdir().unwrap();
    let mut results: Vec<(&str, Outcome, f64)> = Vec::new();
    let mut timed = |name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = f();
        results.push((name, o, start.elapsed().as_secs_f64()));
    };
    timed("metric-arithmetic", &mut metric_arithmetic);
    timed("streaming-reduction-oracle", &mut reduction_oracle);
    timed("toy-conservation-causality", &mut toy_conservation);
    timed("gradient-checks", &mut gradient_checks);
    let start = Instant::now();
    let planted = planted_signal(root.path());
    let planted_secs = start.elapsed().as_secs_f64();
    timed("baseline-exactness", &mut baseline_exactness);
    timed("format-round-trips", &mut || round_trips(root.path()));
    timed("toy-calibration-loss-decreases", &mut toy_calibration_lowers_loss);
    results.insert(4, ("planted-signal-end-to-end", planted.planted, planted_secs));
    results.insert(6, ("determinism", planted.determinism, 0.0));

    let mut failed = 0;
    for (name, o, secs) in &results {
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("{verdict} {name} [{secs:.1}s]: {}", o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
