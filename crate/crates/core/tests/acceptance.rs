//! One PASS/FAIL line per acceptance criterion. Trains the two committed
//! toy configurations, so expect several minutes on one core.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use mie_core::attribution::{block_logit, components, LnMode};
use mie_core::dataset::{self, Pattern, TokenizedEntry};
use mie_core::intervention::{resolve, InterventionSpec};
use mie_core::model::{Checkpoint, HeadId, ModelConfig};
use mie_core::runner::{self, InductionConfig, SweepReport, DEFAULT_ALPHAS};
use mie_core::tensor::{self, Tensor};
use mie_core::tokenizer::TokenId;
use mie_core::toytrain::{self, GradCheckConfig, TrainConfig};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn completeness() -> Outcome {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let ckpt = Checkpoint::random(ModelConfig::new(2, 4, 64, 256, 32), seed % 2 == 1, 0.3, seed).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let len = rng.gen_range(4..=32);
        let tokens: Vec<TokenId> = (0..len).map(|_| rng.gen_range(0..256)).collect();
        let trace = ckpt.forward(&tokens, &[]).map_err(|e| e.to_string())?;
        for pos in 0..len {
            for _ in 0..4 {
                let target: TokenId = rng.gen_range(0..256);
                let sum: f64 = components(&ckpt)
                    .into_iter()
                    .map(|c| block_logit(&ckpt, &trace, c, pos, target, LnMode::Frozen))
                    .sum::<mie_core::Result<f64>>()
                    .map_err(|e| e.to_string())?;
                let actual = trace.final_logits.at(pos, target as usize) as f64;
                worst = worst.max((sum - actual).abs() / actual.abs().max(1.0));
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    check(worst <= 1e-3 && secs < 60.0, format!("worst relative gap {worst:.2e} over 20 checkpoints in {secs:.1}s"))
}

fn intervention_identity() -> Outcome {
    let vocab = dataset::toy_vocab().map_err(|e| e.to_string())?;
    let (table, _) = dataset::make_toy_dataset(24, &vocab, 7).map_err(|e| e.to_string())?;
    let entries: Vec<TokenizedEntry> = dataset::toy_entries(&table, 100, 11)
        .iter()
        .map(|e| TokenizedEntry::new(e, &vocab))
        .collect::<mie_core::Result<_>>()
        .map_err(|e| e.to_string())?;
    let cfg = ModelConfig::new(2, 4, 64, vocab.len(), 32);
    let ckpt = Checkpoint::random(cfg.clone(), false, 0.3, 5).map_err(|e| e.to_string())?;
    let heads: Vec<HeadId> = cfg.heads().collect();

    let clean = runner::clean_outcomes(&ckpt, &entries).map_err(|e| e.to_string())?;
    let mut sweep_mismatch = 0;
    let mut trace_diffs = 0;
    let mut not_zeroed = 0;
    for (i, e) in entries.iter().enumerate() {
        let head = heads[i % heads.len()];
        let spec = InterventionSpec::last_to_cofa(head, 1.0);
        let report = runner::alpha_sweep(&ckpt, std::slice::from_ref(e), &[spec.clone()], &[1.0], true).map_err(|e| e.to_string())?;
        if report.outcomes.as_ref().map(|o| o[0][0]) != Some(clean[i]) {
            sweep_mismatch += 1;
        }
        let base = ckpt.forward(&e.tokens, &[]).map_err(|e| e.to_string())?;
        let one = ckpt
            .forward(&e.tokens, &resolve(&spec, &e.anchors).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        if one != base {
            sweep_mismatch += 1;
        }
        let zero_r = resolve(&spec.clone().with_alpha(0.0), &e.anchors).map_err(|e| e.to_string())?;
        let zero = ckpt.forward(&e.tokens, &zero_r).map_err(|e| e.to_string())?;
        let (q, k) = (zero_r[0].query, zero_r[0].key);
        let t = e.tokens.len();
        for l in 0..=head.layer {
            for h in 0..cfg.n_heads {
                let idx = l * cfg.n_heads + h;
                for a in 0..t {
                    for b in 0..t {
                        let (x, y) = (base.attention[idx].at(a, b), zero.attention[idx].at(a, b));
                        if (l, h, a, b) == (head.layer, head.head, q, k) {
                            not_zeroed += usize::from(y != 0.0);
                        } else if x != y {
                            trace_diffs += 1;
                        }
                    }
                }
                if l < head.layer && base.head_contribution[idx] != zero.head_contribution[idx] {
                    trace_diffs += 1;
                }
            }
        }
        if base.embed_contribution != zero.embed_contribution {
            trace_diffs += 1;
        }
    }
    check(
        sweep_mismatch == 0 && trace_diffs == 0 && not_zeroed == 0,
        format!(
            "100 prompts: {sweep_mismatch} α=1 mismatches, {not_zeroed} targets not zeroed, {trace_diffs} other entries changed at α=0"
        ),
    )
}

fn svd_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_sv, mut worst_rec) = (0.0f64, 0.0f64);
    for (count, n) in [(100, 8), (10, 64)] {
        for _ in 0..count {
            let a = Tensor::new(vec![n, n], (0..n * n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).map_err(|e| e.to_string())?;
            let svd = tensor::svd(&a).map_err(|e| e.to_string())?;
            let m = DMatrix::from_fn(n, n, |i, j| a.at(i, j) as f64);
            let mut oracle: Vec<f64> = (m.transpose() * &m).symmetric_eigen().eigenvalues.iter().map(|l| l.max(0.0).sqrt()).collect();
            oracle.sort_by(|x, y| y.total_cmp(x));
            for (s, o) in svd.s.iter().zip(&oracle) {
                worst_sv = worst_sv.max((s - o).abs());
            }
            let rec = svd.reconstruct();
            let diff: f64 = a.data().iter().zip(rec.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt();
            worst_rec = worst_rec.max(diff / a.frobenius_norm());
        }
    }
    check(
        worst_sv <= 1e-6 && worst_rec <= 1e-5,
        format!("worst singular value gap {worst_sv:.2e}, worst reconstruction {worst_rec:.2e}"),
    )
}

fn gradient_correctness() -> Outcome {
    let t0 = Instant::now();
    let cfg = GradCheckConfig::default();
    let errs: Vec<f64> = (0..5).map(|s| toytrain::grad_check(&cfg, s)).collect::<mie_core::Result<_>>().map_err(|e| e.to_string())?;
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    let secs = t0.elapsed().as_secs_f64();
    check(worst <= 1e-3 && secs < 300.0, format!("worst relative error {worst:.2e} over 5 seeds in {secs:.1}s"))
}

struct Trained {
    ckpt: Checkpoint,
    table: dataset::FactTable,
    secs: f64,
}

fn train_fixture(name: &str) -> Result<Trained, String> {
    let vocab = dataset::toy_vocab().map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(fixture(name)).map_err(|e| e.to_string())?;
    let cfg = TrainConfig::from_json(&text).map_err(|e| e.to_string())?;
    let mut corpus = toytrain::make_corpus(&cfg, &vocab).map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    let out = toytrain::train(&cfg, &mut corpus).map_err(|e| e.to_string())?;
    Ok(Trained {
        ckpt: out.checkpoint().map_err(|e| e.to_string())?,
        table: corpus.table().clone(),
        secs: t0.elapsed().as_secs_f64(),
    })
}

fn factual(report: &SweepReport, alpha: f32) -> usize {
    report.at(alpha).map_or(0, |r| r.counts.factual)
}

fn competition(toy: &Result<Trained, String>) -> (Outcome, Outcome) {
    let toy = match toy {
        Ok(t) => t,
        Err(e) => return (Err(e.clone()), Err(e.clone())),
    };
    let run = || -> Result<(Outcome, Outcome), String> {
        let vocab = dataset::toy_vocab().map_err(|e| e.to_string())?;
        let entries = dataset::toy_entries(&toy.table, 200, 77);
        let base = runner::base_prompt_accuracy(&toy.ckpt, &entries, &vocab).map_err(|e| e.to_string())?;
        let tok: Vec<TokenizedEntry> = entries
            .iter()
            .map(|e| TokenizedEntry::new(e, &vocab))
            .collect::<mie_core::Result<_>>()
            .map_err(|e| e.to_string())?;
        let probes: Vec<_> = tok.iter().map(|t| t.probe()).collect();
        let grid = mie_core::attribution::attribution_grid(&toy.ckpt, &probes, LnMode::Frozen).map_err(|e| e.to_string())?;
        let head = grid.most_factual();
        let spec = [InterventionSpec::last_to_cofa(head, 1.0)];
        let sweep = runner::alpha_sweep(&toy.ckpt, &tok, &spec, &DEFAULT_ALPHAS, false).map_err(|e| e.to_string())?;
        let at1 = sweep.at(1.0).ok_or("missing α=1")?.counts;

        let a = base.factual_rate() >= 0.95;
        let b = at1.counterfactual > at1.factual + at1.other;
        let peak = [2.0, 5.0, 10.0].iter().map(|&x| factual(&sweep, x)).max().unwrap_or(0);
        let c = peak > factual(&sweep, 0.0) && factual(&sweep, 100.0) < peak;
        let mid = [2.0f32, 5.0, 10.0];
        let gain = runner::factual_gain(&sweep, &mid).unwrap_or(i64::MIN);
        let seeds: Vec<u64> = (1..=runner::DEFAULT_BASELINE_SEEDS as u64).collect();
        let baseline = runner::random_baseline(&toy.ckpt, &tok, &spec, &seeds, &DEFAULT_ALPHAS).map_err(|e| e.to_string())?;
        let gains: Vec<i64> = baseline.iter().map(|r| runner::factual_gain(&r.sweep, &mid).unwrap_or(i64::MIN)).collect();
        let d = gains.iter().all(|&g| g < gain);
        let counts: Vec<usize> = DEFAULT_ALPHAS.iter().map(|&x| factual(&sweep, x)).collect();
        let comp = check(
            a && b && c && d && toy.secs < 1800.0,
            format!(
                "trained in {:.0}s; (a) base accuracy {:.3} {}; (b) α=1 counts {}/{}/{} {}; (c) {head} factual over α {:?} = {counts:?} {}; (d) gain {gain} vs baselines {gains:?} {}",
                toy.secs,
                base.factual_rate(),
                mark(a),
                at1.factual,
                at1.counterfactual,
                at1.other,
                mark(b),
                DEFAULT_ALPHAS,
                mark(c),
                mark(d),
            ),
        );

        let sub: Vec<TokenizedEntry> = dataset::substitute_fact(&entries)
            .map_err(|e| e.to_string())?
            .iter()
            .map(|e| TokenizedEntry::new(e, &vocab))
            .collect::<mie_core::Result<_>>()
            .map_err(|e| e.to_string())?;
        let sub_sweep = runner::alpha_sweep(&toy.ckpt, &sub, &spec, &[1.0, 10.0], false).map_err(|e| e.to_string())?;
        let rate = |x: f32| sub_sweep.at(x).map_or(0.0, |r| r.counts.factual_rate());
        let suppression = check(
            rate(10.0) < rate(1.0),
            format!("{head} factual proportion {:.3} at α=1, {:.3} at α=10", rate(1.0), rate(10.0)),
        );
        Ok((comp, suppression))
    };
    run().unwrap_or_else(|e| (Err(e.clone()), Err(e)))
}

fn mark(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "not met"
    }
}

fn induction() -> Outcome {
    let vocab = dataset::toy_vocab().map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(fixture("toy_induction.json")).map_err(|e| e.to_string())?;
    let cfg = TrainConfig::from_json(&text).map_err(|e| e.to_string())?;
    let mut ic = InductionConfig::new(8, 50, 3);
    ic.token_pool = Some(toytrain::repeat_pool(&vocab));
    let untrained = toytrain::init_params(&cfg).and_then(|p| p.to_checkpoint()).map_err(|e| e.to_string())?;
    let before = runner::induction_score(&untrained, &ic).map_err(|e| e.to_string())?;
    let trained = train_fixture("toy_induction.json")?;
    let after = runner::induction_score(&trained.ckpt, &ic).map_err(|e| e.to_string())?;
    let best = after.iter().cloned().fold(0.0, f64::max);
    let best_before = before.iter().cloned().fold(0.0, f64::max);
    let best_head = after.iter().position(|&s| s == best).unwrap_or(0);
    check(
        best > 0.5 && best_before < 0.2,
        format!(
            "trained in {:.0}s: best score {best:.3} (L{}H{}); untrained best {best_before:.3}",
            trained.secs,
            best_head / cfg.model.n_heads,
            best_head % cfg.model.n_heads
        ),
    )
}

fn dataset_mechanics() -> Outcome {
    let entries = dataset::load(&fixture("labeled50.json")).map_err(|e| e.to_string())?;
    let (hinted, no_hint) = dataset::split_hinted(&entries).map_err(|e| e.to_string())?;
    let split_ok = entries.len() == 50 && hinted.len() + no_hint.len() == 50;

    let mut structure_failures = Vec::new();
    for first in Pattern::ALL {
        for second in Pattern::ALL {
            match dataset::apply_structure(&entries, first, second) {
                Ok(r) if r.skipped.is_empty() && r.entries.iter().all(|e| e.check().is_ok() && dataset::decompose(e).is_ok()) => {}
                Ok(r) => structure_failures.push(format!("{first:?}/{second:?}: {} skipped", r.skipped.len())),
                Err(e) => structure_failures.push(format!("{first:?}/{second:?}: {e}")),
            }
        }
    }

    let mut categories: Vec<String> = entries.iter().filter_map(|e| e.answer_category.clone()).collect();
    categories.sort();
    categories.dedup();
    let size = |c: &str| entries.iter().filter(|e| e.answer_category.as_deref() == Some(c)).count();
    let n = categories.iter().map(|c| size(c)).min().unwrap_or(0);
    let mut trunc_ok = n > 0;
    for c in &categories {
        let a = dataset::filter_category(&entries, None, Some(c), Some(n), 9).map_err(|e| e.to_string())?;
        let b = dataset::filter_category(&entries, None, Some(c), Some(n), 9).map_err(|e| e.to_string())?;
        trunc_ok &= a.len() == n && a == b && a.iter().all(|e| e.answer_category.as_deref() == Some(c.as_str()));
    }
    check(
        split_ok && structure_failures.is_empty() && trunc_ok,
        format!(
            "split {}+{}={}; structure combinations failing: {:?}; truncation of {} categories to {n} exact and seeded: {trunc_ok}",
            hinted.len(),
            no_hint.len(),
            entries.len(),
            structure_failures,
            categories.len()
        ),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("attribution completeness", completeness()),
        ("intervention identity", intervention_identity()),
        ("svd correctness", svd_correctness()),
        ("gradient correctness", gradient_correctness()),
    ];
    let toy = train_fixture("toy_competition.json");
    let (comp, sub) = competition(&toy);
    results.push(("competition reproduction", comp));
    results.push(("fact-substitution suppression", sub));
    results.push(("induction formation", induction()));
    results.push(("dataset mechanics", dataset_mechanics()));

    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(d) => println!("PASS {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name}: {d}")
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
