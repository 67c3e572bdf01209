mod common;

use std::collections::BTreeSet;

use attnloc::backend::toy::{ToyConfig, ToyTransformer};
use attnloc::corpus::{filter_by_token_budget, make_folds, parse_dataset, write_dataset, CodeSample};
use attnloc::evaluation::{precision_recall_f1, top_n, Averaging, Truth};
use attnloc::matrix::Matrix;
use attnloc::prompting::{
    build_base_prompt, build_highlighted_prompt, highlight_instruction, map_tokens_to_lines, HighlightStrategy,
};
use attnloc::reduction::{diff_attn_mat, LayerwiseAttnMat};
use attnloc::scoring::{baseline_score_exact, classifier_report, rank, RunOutputs, TieRule};
use attnloc::synthetic::word_tokens;
use num_bigint::BigInt;
use num_rational::BigRational;
use proptest::prelude::*;

fn program() -> impl Strategy<Value = (String, usize)> {
    prop::collection::vec("[a-z(){};=+ ]{0,12}", 1..12).prop_map(|lines| {
        let n = lines.len();
        (lines.join("\n") + "\n", n)
    })
}

fn sample(id: &str, source: &str, vuln: usize) -> CodeSample {
    CodeSample::new(id, "c", source, [vuln]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn folds_partition_the_samples(n in 5usize..60, k in 1usize..6, seed in any::<u64>()) {
        let samples: Vec<CodeSample> = (0..n).map(|i| sample(&format!("s{i}"), "x;\n", 1)).collect();
        let folds = make_folds(&samples, k, seed).unwrap();
        prop_assert_eq!(folds.assignment.len(), n);
        let sizes = folds.fold_sizes();
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for fold in 0..k {
            let (train, held) = folds.split(&samples, fold);
            prop_assert_eq!(train.len() + held.len(), n);
            prop_assert!(held.iter().all(|s| folds.fold_of(&s.id) == Some(fold)));
        }
        prop_assert_eq!(make_folds(&samples, k, seed).unwrap(), folds);
    }

    #[test]
    fn larger_token_budgets_keep_more(sizes in prop::collection::vec(1usize..40, 1..15), a in 20usize..400, b in 20usize..400) {
        let toy = ToyTransformer::from_seed(0, ToyConfig { d_model: 4, num_layers: 1, num_heads: 1, ..Default::default() }).unwrap();
        let samples: Vec<CodeSample> = sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| sample(&format!("s{i}"), &"x".repeat(n), 1))
            .collect();
        let (lo, hi) = (a.min(b), a.max(b));
        let small = filter_by_token_budget(&samples, &toy, lo).unwrap();
        let large = filter_by_token_budget(&samples, &toy, hi).unwrap();
        prop_assert!(small.iter().all(|s| large.contains(s)));
    }

    #[test]
    fn dataset_reserializes_identically((source, loc) in program(), vuln in 1usize..12) {
        let s = sample("a", &source, vuln.min(loc));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&path, std::slice::from_ref(&s)).unwrap();
        let back = parse_dataset(std::io::BufReader::new(std::fs::File::open(&path).unwrap())).unwrap();
        prop_assert_eq!(back, vec![s]);
    }

    #[test]
    fn highlighted_prompts_differ_only_in_the_instruction((source, loc) in program()) {
        let s = sample("a", &source, 1);
        let base = build_base_prompt(&s);
        prop_assert_eq!(base.num_lines(), loc + 4);
        for line in 1..=loc {
            let hl = build_highlighted_prompt(&s, line, HighlightStrategy::LineIndex).unwrap();
            prop_assert_eq!(hl.num_lines(), base.num_lines());
            for l in 1..=base.num_lines() {
                if hl.instruction_lines[0] == l {
                    prop_assert_eq!(hl.line_text(l), highlight_instruction(line));
                } else {
                    prop_assert_eq!(hl.line_text(l), base.line_text(l));
                }
            }
            prop_assert_eq!(hl.highlighted_prompt_line(), Some(line + 1));
            let marked = build_highlighted_prompt(&s, line, HighlightStrategy::MarkerComment).unwrap();
            let code = marked.prompt_line_of_code(line).unwrap();
            let prefix = format!("{line}: ");
            prop_assert!(marked.line_text(code).starts_with(&prefix));
            prop_assert!(marked.line_text(code).ends_with("Pay attention to this"));
        }
    }

    #[test]
    fn tokens_partition_into_contiguous_line_spans((source, _) in program()) {
        let s = sample("a", &source, 1);
        let layout = build_base_prompt(&s);
        let tok = word_tokens(&layout.text);
        let spans = map_tokens_to_lines(&layout, &tok.token_offsets).unwrap();
        prop_assert_eq!(spans.num_lines(), layout.num_lines());
        let mut next = 0;
        for (i, r) in spans.spans.iter().enumerate() {
            prop_assert_eq!(r.start, next);
            next = r.end;
            for t in r.clone() {
                prop_assert_eq!(layout.line_at_byte(tok.token_offsets[t].0), i + 1);
            }
        }
        prop_assert_eq!(next, tok.num_tokens());
    }

    #[test]
    fn differences_telescope(vals in prop::collection::vec(-1.0f64..1.0, 36)) {
        let m = |o: usize| LayerwiseAttnMat(Matrix::from_vec(4, 3, vals[o..o + 12].to_vec()).unwrap());
        let (a, b, c) = (m(0), m(12), m(24));
        let ab = diff_attn_mat(&a, &b).unwrap().0;
        let bc = diff_attn_mat(&b, &c).unwrap().0;
        let ac = diff_attn_mat(&a, &c).unwrap().0;
        for i in 0..12 {
            prop_assert!((ab.as_slice()[i] + bc.as_slice()[i] - ac.as_slice()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn baseline_matches_brute_force(
        loc in 1usize..25,
        runs in prop::collection::vec(prop::collection::vec(1usize..25, 0..6), 1..11),
    ) {
        let runs: Vec<Vec<usize>> = runs.into_iter().map(|r| r.into_iter().map(|l| (l - 1) % loc + 1).collect()).collect();
        let (num, den) = common::brute_force_baseline(&runs, loc);
        let exact = baseline_score_exact(&RunOutputs { sample_id: "x".into(), runs }, loc).unwrap();
        for (e, n) in exact.iter().zip(num) {
            prop_assert_eq!(e.clone(), BigRational::new(BigInt::from(n), BigInt::from(den)));
        }
        let total: BigRational = exact.iter().sum();
        prop_assert!(total <= BigRational::from_integer(BigInt::from(1)));
    }

    #[test]
    fn ranking_ignores_score_shift(scores in prop::collection::vec(0.0f64..1.0, 1..20), shift in -0.5f64..0.5) {
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let a = rank(&scores, TieRule::LineAscending, None).unwrap();
        prop_assert_eq!(&a, &rank(&shifted, TieRule::LineAscending, None).unwrap());
        let set: BTreeSet<usize> = a.iter().copied().collect();
        prop_assert_eq!(set, (1..=scores.len()).collect::<BTreeSet<_>>());
    }

    #[test]
    fn topn_is_monotone_and_f1_bounded(
        cases in prop::collection::vec((prop::collection::vec(0.0f64..1.0, 1..15), any::<u64>()), 1..20),
    ) {
        let mut reports = Vec::new();
        let mut truth = Truth::new();
        for (i, (scores, bits)) in cases.into_iter().enumerate() {
            let id = format!("s{i}");
            let loc = scores.len();
            let mut t: BTreeSet<usize> = (1..=loc).filter(|l| bits >> (l % 64) & 1 == 1).collect();
            if t.is_empty() {
                t.insert(1);
            }
            truth.insert(id.clone(), t);
            reports.push(classifier_report(&id, scores, 0.5));
        }
        let ns: Vec<usize> = (1..=10).collect();
        let tops = top_n(&reports, &truth, &ns).unwrap();
        for w in ns.windows(2) {
            prop_assert!(tops[&w[0]] <= tops[&w[1]]);
        }
        for avg in [Averaging::Micro, Averaging::Macro] {
            let (p, r, f1) = precision_recall_f1(&reports, &truth, avg).unwrap();
            prop_assert!(f1 <= 2.0 * p.min(r) + 1e-9);
            prop_assert!(f1 >= p.min(r) - 1e-9 && f1 <= p.max(r) + 1e-9);
        }
    }
}
