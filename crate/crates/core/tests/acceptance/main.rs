//! Acceptance suite: one pass/fail line per criterion.
//!
//! The trained-model criteria share a single seed-0 pipeline run. Its
//! checkpoints and stage timings are cached under the cargo target directory
//! and keyed by the pipeline settings; set `OCTOFUNC_ACCEPTANCE_FRESH=1` to
//! retrain from scratch.

#[path = "../common/mod.rs"]
mod common;
mod pipeline;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{calls, oracle};
use octofunc::agent::{benchmark_latency, ConditionReport, Stats};
use octofunc::decoder::{parse_text, CallDecoder};
use octofunc::model::GenerationConfig;
use octofunc::numerics::{Graph, Rng, SeedStream, Tensor};
use octofunc::registry::{import_declarations, CallStyle, Registry, DEMO_DECLARATIONS};
use octofunc::tokenizer::Vocabulary;
use serde::Deserialize;

use pipeline::{eval_items, Pipeline};

const GOLDEN: &str = include_str!("../fixtures/golden_calls.jsonl");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn setup() -> (Registry, Vocabulary) {
    let reg = Registry::demo();
    let vocab = Vocabulary::new()
        .extend_with_functional_tokens(reg.len())
        .unwrap();
    (reg, vocab)
}

#[derive(Deserialize)]
struct GoldenRow {
    function: String,
    text: String,
}

fn golden_vectors() -> Outcome {
    let start = Instant::now();
    let (reg, vocab) = setup();
    let mut violations = Vec::new();
    let mut n = 0;
    for line in GOLDEN.lines() {
        let row: GoldenRow = serde_json::from_str(line).unwrap();
        n += 1;
        match parse_text(&row.text, &vocab, &reg) {
            Ok(call)
                if call.name() == row.function
                    && reg.render_call(&call, CallStyle::Name) == row.text => {}
            Ok(call) => violations.push(format!("{} parsed as {}", row.text, call.name())),
            Err(e) => violations.push(format!("{}: {e}", row.text)),
        }
    }
    let elapsed = start.elapsed();
    outcome(
        violations.is_empty() && n >= 19 && elapsed < Duration::from_secs(1),
        format!(
            "{n} printed outputs, {} violations, {:.3}s (limit 1s) {}",
            violations.len(),
            elapsed.as_secs_f64(),
            violations.join("; ")
        ),
    )
}

fn schema_fidelity() -> Outcome {
    let schemas = match import_declarations(DEMO_DECLARATIONS) {
        Ok(s) => s,
        Err(e) => return outcome(false, format!("import failed: {e}")),
    };
    let enums: Vec<Vec<String>> = schemas
        .iter()
        .flat_map(|s| s.params.iter())
        .filter(|p| !p.enum_values.is_empty())
        .map(|p| p.enum_values.clone())
        .collect();
    let want = [
        vec!["electronics", "plastic", "paper"],
        vec!["feeding", "grooming", "exercise"],
    ];
    let pass =
        schemas.len() == 10 && enums.len() == 2 && enums.iter().zip(&want).all(|(a, b)| a == b);
    outcome(
        pass,
        format!("{} schemas, enum sets {enums:?}", schemas.len()),
    )
}

fn parser_properties() -> Outcome {
    let start = Instant::now();
    let (reg, vocab) = setup();
    let trips = calls::round_trips(10_000, 101, &reg, &vocab);
    let rejected = calls::corruptions_rejected(10_000, 102, &reg, &vocab);
    let grammar = CallDecoder::new(&vocab);
    let constrained = CallDecoder::constrained(&vocab, &reg);
    let masks = [
        calls::mask_agrees_with_feed(100, 103, &grammar, &reg),
        calls::mask_agrees_with_feed(100, 104, &constrained, &reg),
    ];
    let elapsed = start.elapsed();
    let mask_ok = masks.iter().all(Result::is_ok);
    let checked: usize = masks.iter().filter_map(|m| m.as_ref().ok()).sum();
    let pass =
        trips == 10_000 && rejected == Ok(10_000) && mask_ok && elapsed < Duration::from_secs(30);
    let mut detail = format!(
        "round trips {trips}/10000, corruptions rejected at position {}/10000, mask checked on {checked} (state, token) pairs over 200 trajectories, {:.1}s (limit 30s)",
        rejected.as_ref().map_or(0, |n| *n),
        elapsed.as_secs_f64()
    );
    for e in masks
        .iter()
        .filter_map(|m| m.as_ref().err())
        .chain(rejected.as_ref().err())
    {
        detail.push_str(&format!("; {e}"));
    }
    outcome(pass, detail)
}

fn numerics() -> Outcome {
    let start = Instant::now();
    let results = oracle::run_all(20, 11);
    let mut per_op: BTreeMap<&str, usize> = BTreeMap::new();
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for r in &results {
        let op = if r.op.starts_with("attention") {
            "attention"
        } else {
            r.op
        };
        *per_op.entry(op).or_default() += 1;
        worst = worst.max(r.worst_rel_err);
        if !(r.worst_rel_err < 1e-2) {
            failures.push(format!(
                "{} on {}: {:.2e}",
                r.op, r.shape_desc, r.worst_rel_err
            ));
        }
    }
    let min_shapes = per_op.values().copied().min().unwrap_or(0);

    // softmax rows sum to one; layer norm output has zero mean and unit variance
    let mut rng = Rng::new(12, SeedStream::Custom(1));
    let mut invariant_err: f32 = 0.0;
    for _ in 0..50 {
        let (rows, cols) = (1 + rng.below(6), 2 + rng.below(60));
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[rows, cols], rng.gaussian_vec(rows * cols, 4.0)).unwrap());
        let s = g.softmax_row(x);
        let ones = g.constant(Tensor::new(&[cols], vec![1.0; cols]).unwrap());
        let zeros = g.constant(Tensor::zeros(&[cols]));
        let ln = g.layer_norm(x, ones, zeros).unwrap();
        for r in 0..rows {
            let srow = g.value(s).row(r);
            invariant_err = invariant_err.max((srow.iter().sum::<f32>() - 1.0).abs());
            let lrow = g.value(ln).row(r);
            let mean = lrow.iter().sum::<f32>() / cols as f32;
            let var = lrow.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / cols as f32;
            invariant_err = invariant_err.max(mean.abs()).max((var - 1.0).abs() * 1e-2);
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty()
        && min_shapes >= 20
        && invariant_err < 1e-5
        && elapsed < Duration::from_secs(60);
    outcome(
        pass,
        format!(
            "{} ops, >= {min_shapes} shapes each, worst gradient rel err {worst:.2e} (limit 1e-2), invariant err {invariant_err:.1e}, {:.1}s (limit 60s) {}",
            per_op.len(),
            elapsed.as_secs_f64(),
            failures.join("; ")
        ),
    )
}

fn retrieval(p: &Pipeline) -> Outcome {
    let b = p.seconds["B"];
    outcome(
        p.retrieval >= 0.5 && b <= 600.0,
        format!("top-1 {:.3} on a 64-pair held-out gallery (need 0.5, chance 0.016), stage B {b:.0}s (limit 600s)", p.retrieval),
    )
}

fn stage_d(p: &Pipeline) -> Outcome {
    let r = &p.eval_d;
    let d = p.seconds["D"];
    outcome(
        r.function_selection_accuracy >= 0.95 && r.full_call_exact_accuracy >= 0.85 && d <= 1200.0,
        format!(
            "selection {:.3} (need 0.95), exact {:.3} (need 0.85) on {} tasks, stage D {d:.0}s (limit 1200s)",
            r.function_selection_accuracy, r.full_call_exact_accuracy, r.n_examples
        ),
    )
}

fn stage_e(p: &Pipeline) -> Outcome {
    let e = p.seconds["E"];
    outcome(
        p.eval_e.mean_reward >= p.eval_d.mean_reward && e <= 600.0,
        format!(
            "mean reward after E {:.4} vs after D {:.4}, stage E {e:.0}s (limit 600s)",
            p.eval_e.mean_reward, p.eval_d.mean_reward
        ),
    )
}

fn bilingual(p: &Pipeline) -> Outcome {
    let en = p.eval_d.per_language[0].selection_accuracy;
    let zh = p.eval_d.per_language[1].selection_accuracy;
    let gap = (en - zh).abs();
    outcome(
        gap <= 0.05,
        format!(
            "selection en {en:.3} (n={}) zh {zh:.3} (n={}), gap {:.1}pp (limit 5pp)",
            p.eval_d.per_language[0].n,
            p.eval_d.per_language[1].n,
            gap * 100.0
        ),
    )
}

fn determinism() -> Outcome {
    let a = pipeline::short_run();
    let b = pipeline::short_run();
    let same_ckpt = a.checkpoint == b.checkpoint;
    let same_eval = a.report == b.report;
    outcome(
        same_ckpt && same_eval,
        format!(
            "two seed-0 runs of all five stages ({} checkpoint bytes): checkpoints {}, eval reports {}",
            a.checkpoint.len(),
            if same_ckpt { "bitwise identical" } else { "differ" },
            if same_eval { "identical" } else { "differ" }
        ),
    )
}

fn consistent(s: &Stats) -> bool {
    s.mean.is_finite() && s.p50.is_finite() && s.p95.is_finite() && s.p50 <= s.p95 && s.mean > 0.0
}

fn condition_ok(c: &ConditionReport) -> bool {
    c.samples >= 50
        && consistent(&c.tokens_per_second)
        && consistent(&c.time_to_end_token_ms)
        && c.time_to_first_functional_token_ms
            .as_ref()
            .is_some_and(consistent)
        && c.time_to_first_functional_token_ms
            .as_ref()
            .is_some_and(|f| f.p50 <= c.time_to_end_token_ms.p95)
        && c.reached_end <= c.samples
}

fn latency(p: &Pipeline) -> Outcome {
    let reg = Registry::demo();
    let items = eval_items(50, &reg, &p.final_checkpoint.vocab);
    let report = match benchmark_latency(
        &p.final_checkpoint.model,
        &items,
        &reg,
        &p.final_checkpoint.vocab,
        &GenerationConfig::default(),
        0,
    ) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("bench failed: {e}")),
    };
    let pass = condition_ok(&report.with_image)
        && condition_ok(&report.without_image)
        && !report.hardware.is_empty();
    let w = &report.with_image;
    let t = &report.without_image;
    outcome(
        pass,
        format!(
            "{} + {} samples; tok/s p50 {:.0} with image, {:.0} without; end-token p50/p95 {:.1}/{:.1} ms with image; {}",
            w.samples, t.samples, w.tokens_per_second.p50, t.tokens_per_second.p50, w.time_to_end_token_ms.p50,
            w.time_to_end_token_ms.p95, report.hardware
        ),
    )
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags such as `--nocapture`; a name filter skips the suite.
    if std::env::args()
        .skip(1)
        .any(|a| !a.starts_with('-') && a != "acceptance")
    {
        return ExitCode::SUCCESS;
    }
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "golden vectors", golden_vectors()),
        (2, "schema fidelity", schema_fidelity()),
        (3, "parser properties", parser_properties()),
        (4, "numerics", numerics()),
    ];
    for (n, name, o) in &results {
        report(*n, name, o);
    }
    let p = pipeline::reference_run();
    let trained: Vec<(u32, &str, Outcome)> = vec![
        (5, "stage B retrieval", retrieval(&p)),
        (6, "stage D accuracy", stage_d(&p)),
        (7, "stage E non-regression", stage_e(&p)),
        (8, "bilinguality", bilingual(&p)),
    ];
    for (n, name, o) in &trained {
        report(*n, name, o);
    }
    results.extend(trained);
    for (n, name, f) in [(9, "determinism", determinism as fn() -> Outcome)] {
        let o = f();
        report(n, name, &o);
        results.push((n, name, o));
    }
    let o = latency(&p);
    report(10, "latency harness", &o);
    results.push((10, "latency harness", o));

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {failed:?}");
        ExitCode::FAILURE
    }
}

fn report(n: u32, name: &str, o: &Outcome) {
    println!(
        "[{}] {n:>2} {name}: {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail.trim_end()
    );
}
