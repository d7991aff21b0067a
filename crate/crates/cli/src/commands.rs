use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde_json::json;

use mie_core::attribution::{self, LnMode};
use mie_core::dataset::{self, DatasetEntry, Pattern, TokenizedEntry};
use mie_core::intervention::{Anchor, InterventionMode, InterventionSpec};
use mie_core::model::{Checkpoint, HeadId};
use mie_core::parity::{self, ParityFixture};
use mie_core::report::{self, Format, InductionScores, Metadata, Payload, ReportBundle};
use mie_core::runner::{self, CategoryField, HeatmapOptions, InductionConfig};
use mie_core::svd_lens::{self, SvdLensOptions};
use mie_core::tokenizer::Vocab;
use mie_core::toytrain::{self, TrainConfig};
use mie_core::MieError;

use crate::manifest::{manifest_path, RunManifest};
use crate::{
    AttributeArgs, BaselineArgs, CliError, CliResult, Command, Common, ConvertCheckArgs, DatasetCommand, DatasetIo,
    FieldArg, HeatmapArgs, InductionArgs, LnModeArg, ModeArg, ModelInput, SpecArgs, SvdArgs, SweepArgs, TrainArgs,
};

pub fn dispatch(cmd: Command, threads: Option<usize>) -> CliResult<()> {
    match cmd {
        Command::Sweep(a) => sweep(a, threads),
        Command::Attribute(a) => attribute(a, threads),
        Command::Svd(a) => svd(a, threads),
        Command::Induction(a) => induction(a, threads),
        Command::Heatmap(a) => heatmap(a, threads),
        Command::Baseline(a) => baseline(a, threads),
        Command::Dataset(d) => dataset_cmd(d, threads),
        Command::Train(a) => train(a, threads),
        Command::ConvertCheck(a) => convert_check(a, threads),
    }
}

fn load_vocab(spec: &str, merges: Option<&Path>, manifest: &mut RunManifest) -> CliResult<Vocab> {
    match spec {
        "byte" => Ok(Vocab::byte()),
        "toy" => Ok(dataset::toy_vocab()?),
        path => {
            let merges = merges.ok_or_else(|| CliError::Usage("--merges is required with a vocab file".into()))?;
            let vocab_path = Path::new(path);
            manifest.input(vocab_path)?;
            manifest.input(merges)?;
            Ok(Vocab::from_files(vocab_path, merges)?)
        }
    }
}

fn load_model(path: &Path, manifest: &mut RunManifest) -> CliResult<Checkpoint> {
    manifest.input(path)?;
    Ok(Checkpoint::load(path)?)
}

struct Loaded {
    ckpt: Checkpoint,
    vocab: Vocab,
    entries: Vec<DatasetEntry>,
    tokenized: Vec<TokenizedEntry>,
}

fn load_experiment(model: &ModelInput, data: &Path, manifest: &mut RunManifest) -> CliResult<Loaded> {
    let ckpt = load_model(&model.model, manifest)?;
    let vocab = load_vocab(&model.vocab, model.merges.as_deref(), manifest)?;
    if vocab.len() != ckpt.config.d_vocab {
        return Err(MieError::contract(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            ckpt.config.d_vocab
        ))
        .into());
    }
    manifest.input(data)?;
    let report = dataset::filter_single_token(dataset::load(data)?, &vocab);
    if !report.rejected.is_empty() {
        eprintln!("{} entries skipped: target is not a single token", report.rejected.len());
    }
    let entries = report.accepted;
    let tokenized = entries
        .iter()
        .map(|e| TokenizedEntry::new(e, &vocab))
        .collect::<mie_core::Result<Vec<_>>>()?;
    eprintln!("{} entries loaded from {}", entries.len(), data.display());
    Ok(Loaded {
        ckpt,
        vocab,
        entries,
        tokenized,
    })
}

fn ln_mode(a: LnModeArg) -> LnMode {
    match a {
        LnModeArg::Frozen => LnMode::Frozen,
        LnModeArg::Raw => LnMode::Raw,
    }
}

fn parse_alphas(s: &str) -> CliResult<Vec<f32>> {
    s.split(',')
        .map(|a| {
            let v: f32 = a
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad α value `{a}`")))?;
            if !(v.is_finite() && v >= 0.0) {
                return Err(CliError::Usage(format!("α must be finite and non-negative, got {v}")));
            }
            Ok(v)
        })
        .collect()
}

fn parse_heads(s: &str) -> CliResult<Vec<HeadId>> {
    HeadId::parse_list(s).map_err(|e| CliError::Usage(e.to_string()))
}

fn build_specs(a: &SpecArgs) -> CliResult<Vec<InterventionSpec>> {
    if let Some(s) = &a.specs {
        return InterventionSpec::parse_list(s).map_err(|e| CliError::Usage(e.to_string()));
    }
    let heads = a
        .heads
        .as_deref()
        .ok_or_else(|| CliError::Usage("one of --heads or --specs is required".into()))?;
    let query: Anchor = a.query.parse().map_err(|e: MieError| CliError::Usage(e.to_string()))?;
    let key: Anchor = a.key.parse().map_err(|e: MieError| CliError::Usage(e.to_string()))?;
    let mode = match a.mode {
        ModeArg::SinglePair => InterventionMode::SinglePair,
        ModeArg::AllKeys => InterventionMode::AllKeys,
    };
    Ok(parse_heads(heads)?
        .into_iter()
        .map(|head| InterventionSpec {
            head,
            alpha: 1.0,
            query,
            key,
            mode,
        })
        .collect())
}

fn prepare_out(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| MieError::io(dir, e))?;
    Ok(())
}

fn metadata(model: &Path, data: Option<&Path>, seed: u64) -> Metadata {
    let id = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Metadata::new(id(model), data.map(id).unwrap_or_default(), seed, std::env::args().skip(1).collect())
}

/// Writes `<stem>.csv` and `<stem>.json`.
fn emit_bundle(bundle: &ReportBundle, dir: &Path, stem: &str, manifest: &mut RunManifest) -> CliResult<()> {
    for f in [Format::Csv, Format::Json] {
        let p = dir.join(format!("{stem}.{}", f.extension()));
        report::emit(bundle, f, &p)?;
        manifest.output(&p);
    }
    Ok(())
}

fn emit_text(dir: &Path, name: &str, text: &str, manifest: &mut RunManifest) -> CliResult<()> {
    let p = dir.join(name);
    report::write_text(&p, text)?;
    manifest.output(&p);
    Ok(())
}

fn finish(manifest: &RunManifest, path: PathBuf) -> CliResult<()> {
    manifest.write(&path)?;
    eprintln!("manifest written to {}", path.display());
    Ok(())
}

fn sweep(a: SweepArgs, threads: Option<usize>) -> CliResult<()> {
    let Common { seed, out } = a.common.clone();
    let mut m = RunManifest::new("sweep", Some(seed), threads);
    let specs = build_specs(&a.spec)?;
    let alphas = parse_alphas(&a.spec.alphas)?;
    let l = load_experiment(&a.model, &a.data, &mut m)?;
    m.config = json!({
        "specs": specs.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
        "alphas": alphas,
        "keep_outcomes": a.keep_outcomes,
    });
    let rep = runner::alpha_sweep(&l.ckpt, &l.tokenized, &specs, &alphas, a.keep_outcomes)?;
    for r in &rep.results {
        eprintln!(
            "α={:<6} factual {:>5}  counterfactual {:>5}  other {:>5}",
            r.alpha, r.counts.factual, r.counts.counterfactual, r.counts.other
        );
    }
    if !rep.excluded.is_empty() {
        eprintln!("{} entries excluded (unresolvable anchors)", rep.excluded.len());
    }
    prepare_out(&out)?;
    if !rep.results.is_empty() && rep.results.iter().all(|r| r.n_total > 0) {
        emit_text(&out, "sweep.svg", &report::render_sweep_area(&rep)?, &mut m)?;
    }
    let bundle = ReportBundle {
        metadata: metadata(&a.model.model, Some(&a.data), seed),
        payload: Payload::Sweep(rep),
    };
    emit_bundle(&bundle, &out, "sweep", &mut m)?;
    finish(&m, manifest_path(&out, true))
}

fn attribute(a: AttributeArgs, threads: Option<usize>) -> CliResult<()> {
    let Common { seed, out } = a.common.clone();
    let mut m = RunManifest::new("attribute", Some(seed), threads);
    let l = load_experiment(&a.model, &a.data, &mut m)?;
    let mode = ln_mode(a.ln_mode);
    m.config = json!({ "ln_mode": format!("{mode:?}").to_lowercase() });
    let probes: Vec<_> = l.tokenized.iter().map(|t| t.probe()).collect();
    let grid = attribution::attribution_grid(&l.ckpt, &probes, mode)?;
    eprintln!("most factual head {}", grid.most_factual());
    prepare_out(&out)?;
    let matrix: Vec<Vec<f64>> = (0..grid.n_layers)
        .map(|layer| {
            (0..grid.n_heads)
                .map(|h| grid.cell(HeadId::new(layer, h)).mean_delta)
                .collect()
        })
        .collect();
    let rows: Vec<String> = (0..grid.n_layers).map(|l| format!("L{l}")).collect();
    let cols: Vec<String> = (0..grid.n_heads).map(|h| format!("H{h}")).collect();
    emit_text(&out, "attribution.svg", &report::render_heatmap(&matrix, &rows, &cols)?, &mut m)?;
    let bundle = ReportBundle {
        metadata: metadata(&a.model.model, Some(&a.data), seed),
        payload: Payload::Attribution(grid),
    };
    emit_bundle(&bundle, &out, "attribution", &mut m)?;
    finish(&m, manifest_path(&out, true))
}

fn svd(a: SvdArgs, threads: Option<usize>) -> CliResult<()> {
    let Common { seed, out } = a.common.clone();
    let mut m = RunManifest::new("svd", Some(seed), threads);
    let ckpt = load_model(&a.model.model, &mut m)?;
    let vocab = load_vocab(&a.model.vocab, a.model.merges.as_deref(), &mut m)?;
    let head: HeadId = a.head.parse().map_err(|e: MieError| CliError::Usage(e.to_string()))?;
    let n_vectors = a.vectors.unwrap_or(ckpt.config.d_head);
    m.config = json!({ "head": head.to_string(), "k": a.k, "vectors": n_vectors, "fold_ln_gain": a.fold_ln_gain });
    let rep = svd_lens::ov_svd_tokens(
        &ckpt,
        head,
        a.k,
        n_vectors,
        SvdLensOptions {
            fold_ln_gain: a.fold_ln_gain,
        },
    )?;
    let vocab = (vocab.len() == ckpt.config.d_vocab).then_some(&vocab);
    let table = rep.to_table(vocab);
    eprint!("{table}");
    prepare_out(&out)?;
    emit_text(&out, "svd.txt", &table, &mut m)?;
    let bundle = ReportBundle {
        metadata: metadata(&a.model.model, None, seed),
        payload: Payload::Svd(rep),
    };
    emit_bundle(&bundle, &out, "svd", &mut m)?;
    finish(&m, manifest_path(&out, true))
}

fn induction(a: InductionArgs, threads: Option<usize>) -> CliResult<()> {
    let Common { seed, out } = a.common.clone();
    let mut m = RunManifest::new("induction", Some(seed), threads);
    let ckpt = load_model(&a.model, &mut m)?;
    let mut cfg = InductionConfig::new(a.seq_len, a.samples, seed);
    if a.toy_pool {
        let vocab = dataset::toy_vocab()?;
        if vocab.len() != ckpt.config.d_vocab {
            return Err(CliError::Usage("--toy-pool needs a model trained on the toy vocabulary".into()));
        }
        cfg.token_pool = Some(toytrain::repeat_pool(&vocab));
    }
    m.config = json!({ "seq_len": a.seq_len, "samples": a.samples, "toy_pool": a.toy_pool, "offset": cfg.offset });
    let scores = runner::induction_score(&ckpt, &cfg)?;
    let ind = InductionScores {
        n_layers: ckpt.config.n_layers,
        n_heads: ckpt.config.n_heads,
        scores,
    };
    if let Some((h, s)) = ind.best() {
        eprintln!("highest induction score {h}: {s:.3}");
    }
    prepare_out(&out)?;
    let matrix: Vec<Vec<f64>> = ind.scores.chunks(ind.n_heads).map(|c| c.to_vec()).collect();
    let rows: Vec<String> = (0..ind.n_layers).map(|l| format!("L{l}")).collect();
    let cols: Vec<String> = (0..ind.n_heads).map(|h| format!("H{h}")).collect();
    emit_text(&out, "induction.svg", &report::render_heatmap(&matrix, &rows, &cols)?, &mut m)?;
    let bundle = ReportBundle {
        metadata: metadata(&a.model, None, seed),
        payload: Payload::Induction(ind),
    };
    emit_bundle(&bundle, &out, "induction", &mut m)?;
    finish(&m, manifest_path(&out, true))
}

fn heatmap(a: HeatmapArgs, threads: Option<usize>) -> CliResult<()> {
    let Common { seed, out } = a.common.clone();
    let mut m = RunManifest::new("heatmap", Some(seed), threads);
    let l = load_experiment(&a.model, &a.data, &mut m)?;
    let field = match a.field {
        FieldArg::Subject => CategoryField::Subject,
        FieldArg::Answer => CategoryField::Answer,
    };
    let category_of = |e: &DatasetEntry| match field {
        CategoryField::Subject => e.subject_category.clone(),
        CategoryField::Answer => e.answer_category.clone(),
    };
    let categories: Vec<String> = match &a.categories {
        Some(s) => s.split(',').map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect(),
        None => l.entries.iter().filter_map(category_of).collect::<BTreeSet<_>>().into_iter().collect(),
    };
    if categories.is_empty() {
        return Err(CliError::Usage("no categories given and none present in the dataset".into()));
    }
    let truncate_to = match a.truncate_to {
        Some(n) => n,
        None => categories
            .iter()
            .map(|c| l.entries.iter().filter(|e| category_of(e).as_deref() == Some(c)).count())
            .min()
            .unwrap_or(0),
    };
    if truncate_to == 0 {
        return Err(MieError::contract("a requested category has no entries").into());
    }
    let heads = a.heads.as_deref().map(parse_heads).transpose()?;
    let opts = HeatmapOptions {
        field,
        heads,
        truncate_to: Some(truncate_to),
        seed,
        ln_mode: ln_mode(a.ln_mode),
    };
    m.config = json!({
        "field": format!("{:?}", a.field).to_lowercase(),
        "categories": categories,
        "truncate_to": truncate_to,
        "heads": opts.heads.as_ref().map(|h| h.iter().map(|x| x.to_string()).collect::<Vec<_>>()),
        "ln_mode": format!("{:?}", opts.ln_mode).to_lowercase(),
    });
    let hm = runner::category_heatmap(&l.ckpt, &l.vocab, &l.entries, &categories, &opts)?;
    for (c, h) in categories.iter().zip(hm.most_factual_per_category()) {
        eprintln!("{c}: most factual head {h}");
    }
    prepare_out(&out)?;
    let rows: Vec<String> = hm.heads.iter().map(|h| h.to_string()).collect();
    emit_text(&out, "heatmap.svg", &report::render_heatmap(&hm.means(), &rows, &categories)?, &mut m)?;
    let bundle = ReportBundle {
        metadata: metadata(&a.model.model, Some(&a.data), seed),
        payload: Payload::Heatmap(hm),
    };
    emit_bundle(&bundle, &out, "heatmap", &mut m)?;
    finish(&m, manifest_path(&out, true))
}

fn baseline(a: BaselineArgs, threads: Option<usize>) -> CliResult<()> {
    let Common { seed, out } = a.common.clone();
    let mut m = RunManifest::new("baseline", Some(seed), threads);
    let specs = build_specs(&a.spec)?;
    let alphas = parse_alphas(&a.spec.alphas)?;
    let l = load_experiment(&a.model, &a.data, &mut m)?;
    let seeds: Vec<u64> = (0..a.seeds).map(|i| seed.wrapping_add(i)).collect();
    m.config = json!({
        "specs": specs.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
        "alphas": alphas,
        "seeds": seeds,
    });
    let target = runner::alpha_sweep(&l.ckpt, &l.tokenized, &specs, &alphas, false)?;
    let runs = runner::random_baseline(&l.ckpt, &l.tokenized, &specs, &seeds, &alphas)?;
    let gain_alphas: Vec<f32> = alphas.iter().copied().filter(|&x| x != 0.0 && x != 1.0 && x < 100.0).collect();
    let fmt_gain = |g: Option<i64>| g.map_or("n/a".to_string(), |g| g.to_string());
    eprintln!("heads of interest gain {}", fmt_gain(runner::factual_gain(&target, &gain_alphas)));
    for r in &runs {
        let heads: Vec<String> = r.heads.iter().map(|h| h.to_string()).collect();
        eprintln!(
            "seed {} ({}) gain {}",
            r.seed,
            heads.join(","),
            fmt_gain(runner::factual_gain(&r.sweep, &gain_alphas))
        );
    }
    prepare_out(&out)?;
    let meta = metadata(&a.model.model, Some(&a.data), seed);
    emit_bundle(
        &ReportBundle {
            metadata: meta.clone(),
            payload: Payload::Sweep(target),
        },
        &out,
        "sweep",
        &mut m,
    )?;
    emit_bundle(
        &ReportBundle {
            metadata: meta,
            payload: Payload::Baseline(runs),
        },
        &out,
        "baseline",
        &mut m,
    )?;
    finish(&m, manifest_path(&out, true))
}

fn refuse_overwrite(input: &Path, out: &Path) -> CliResult<()> {
    let same = match (input.canonicalize(), out.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    if same {
        return Err(CliError::Usage(format!("refusing to overwrite the input {}", input.display())));
    }
    Ok(())
}

fn dataset_cmd(cmd: DatasetCommand, threads: Option<usize>) -> CliResult<()> {
    let load_in = |io: &DatasetIo, m: &mut RunManifest| -> CliResult<Vec<DatasetEntry>> {
        refuse_overwrite(&io.input, &io.out)?;
        m.input(&io.input)?;
        Ok(dataset::load(&io.input)?)
    };
    let save = |entries: &[DatasetEntry], path: &Path, m: &mut RunManifest| -> CliResult<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            prepare_out(dir)?;
        }
        dataset::save(entries, path)?;
        m.output(path);
        eprintln!("{} entries written to {}", entries.len(), path.display());
        Ok(())
    };
    let parse_pattern = |s: &str| -> CliResult<Pattern> { s.parse().map_err(|e: MieError| CliError::Usage(e.to_string())) };
    match cmd {
        DatasetCommand::Premise { io, premise } => {
            let mut m = RunManifest::new("dataset premise", None, threads);
            m.config = json!({ "premise": premise });
            let entries = dataset::apply_premise(&load_in(&io, &mut m)?, &premise)?;
            save(&entries, &io.out, &mut m)?;
            finish(&m, manifest_path(&io.out, false))
        }
        DatasetCommand::Structure { io, first, second } => {
            let mut m = RunManifest::new("dataset structure", None, threads);
            let (p1, p2) = (parse_pattern(&first)?, parse_pattern(&second)?);
            m.config = json!({ "first": p1, "second": p2 });
            let rep = dataset::apply_structure(&load_in(&io, &mut m)?, p1, p2)?;
            for (i, why) in &rep.skipped {
                eprintln!("entry {i} skipped: {why}");
            }
            save(&rep.entries, &io.out, &mut m)?;
            finish(&m, manifest_path(&io.out, false))
        }
        DatasetCommand::SplitHinted { io } => {
            let mut m = RunManifest::new("dataset split-hinted", None, threads);
            let entries = load_in(&io, &mut m)?;
            let (hinted, no_hint) = dataset::split_hinted(&entries)?;
            prepare_out(&io.out)?;
            save(&hinted, &io.out.join("hinted.json"), &mut m)?;
            save(&no_hint, &io.out.join("no_hint.json"), &mut m)?;
            finish(&m, manifest_path(&io.out, true))
        }
        DatasetCommand::SubstituteFact { io } => {
            let mut m = RunManifest::new("dataset substitute-fact", None, threads);
            let entries = dataset::substitute_fact(&load_in(&io, &mut m)?)?;
            save(&entries, &io.out, &mut m)?;
            finish(&m, manifest_path(&io.out, false))
        }
        DatasetCommand::Filter {
            io,
            subject_category,
            answer_category,
            truncate_to,
            seed,
        } => {
            let mut m = RunManifest::new("dataset filter", Some(seed), threads);
            m.config = json!({
                "subject_category": subject_category,
                "answer_category": answer_category,
                "truncate_to": truncate_to,
            });
            let entries = dataset::filter_category(
                &load_in(&io, &mut m)?,
                subject_category.as_deref(),
                answer_category.as_deref(),
                truncate_to,
                seed,
            )?;
            save(&entries, &io.out, &mut m)?;
            finish(&m, manifest_path(&io.out, false))
        }
        DatasetCommand::MakeToy {
            n_facts,
            entries,
            world_seed,
            seed,
            out,
        } => {
            let mut m = RunManifest::new("dataset make-toy", Some(seed), threads);
            m.config = json!({ "n_facts": n_facts, "entries": entries, "world_seed": world_seed });
            let vocab = dataset::toy_vocab()?;
            let (table, own) = dataset::make_toy_dataset(n_facts, &vocab, world_seed)?;
            let list = match entries {
                Some(n) => dataset::toy_entries(&table, n, seed),
                None => own,
            };
            save(&list, &out, &mut m)?;
            finish(&m, manifest_path(&out, false))
        }
    }
}

fn train(a: TrainArgs, threads: Option<usize>) -> CliResult<()> {
    let mut m = RunManifest::new("train", Some(a.seed), threads);
    m.input(&a.config)?;
    let text = std::fs::read_to_string(&a.config).map_err(|e| MieError::io(&a.config, e))?;
    let mut cfg = TrainConfig::from_json(&text)?;
    cfg.seed = a.seed;
    cfg.validate()?;
    m.config = serde_json::to_value(&cfg).map_err(MieError::from)?;
    let vocab = dataset::toy_vocab()?;
    let mut corpus = toytrain::make_corpus(&cfg, &vocab)?;
    let every = a.log_every;
    let outcome = toytrain::train_with(&cfg, &mut corpus, |step, loss| {
        if every > 0 && step % every == 0 {
            eprintln!("step {step:>6}  loss {loss:.4}");
        }
    })?;
    if let Some(last) = outcome.losses.last() {
        eprintln!("final loss {last:.4} after {} steps", outcome.losses.len());
    }
    prepare_out(&a.out)?;
    let model = a.out.join("model.mie");
    outcome.checkpoint()?.save(&model)?;
    m.output(&model);
    emit_text(&a.out, "loss.csv", &outcome.loss_csv(), &mut m)?;
    let (vj, mt) = (a.out.join("vocab.json"), a.out.join("merges.txt"));
    vocab.save(&vj, &mt)?;
    m.output(&vj);
    m.output(&mt);
    let mut resolved = serde_json::to_string_pretty(&cfg).map_err(MieError::from)?;
    resolved.push('\n');
    emit_text(&a.out, "config.json", &resolved, &mut m)?;
    finish(&m, manifest_path(&a.out, true))
}

fn convert_check(a: ConvertCheckArgs, threads: Option<usize>) -> CliResult<()> {
    let mut m = RunManifest::new("convert-check", None, threads);
    let ckpt = load_model(&a.model, &mut m)?;
    let c = &ckpt.config;
    eprintln!(
        "{}: {} layers, {} heads, d_model {}, d_head {}, vocab {}, n_ctx {}, {} unembedding, {} tensors",
        a.model.display(),
        c.n_layers,
        c.n_heads,
        c.d_model,
        c.d_head,
        c.d_vocab,
        c.n_ctx,
        if ckpt.is_tied() { "tied" } else { "untied" },
        ckpt.named_tensors().len()
    );
    let vocab = match &a.vocab {
        Some(v) => {
            let vocab = load_vocab(v, a.merges.as_deref(), &mut m)?;
            if vocab.len() != c.d_vocab {
                return Err(CliError::Check(format!(
                    "vocabulary has {} tokens but the model expects {}",
                    vocab.len(),
                    c.d_vocab
                )));
            }
            Some(vocab)
        }
        None => None,
    };
    let mut summary = json!({ "config": c, "tied": ckpt.is_tied(), "tensors": ckpt.named_tensors().len() });
    if let Some(fx_path) = &a.fixture {
        m.input(fx_path)?;
        let fx = ParityFixture::load(fx_path)?;
        let rep = parity::check(Some(&ckpt), vocab.as_ref(), &fx)?;
        summary["parity"] = serde_json::to_value(&rep).map_err(MieError::from)?;
        eprintln!("{} prompts checked, {} mismatches", rep.n_prompts, rep.mismatches.len());
        if let Some(out) = &a.out {
            prepare_out(out)?;
            emit_text(out, "check.json", &format!("{:#}\n", summary), &mut m)?;
            finish(&m, manifest_path(out, true))?;
        }
        if !rep.passed() {
            return Err(CliError::Check(format!("{} parity mismatches", rep.mismatches.len())));
        }
        return Ok(());
    }
    if let Some(out) = &a.out {
        prepare_out(out)?;
        emit_text(out, "check.json", &format!("{:#}\n", summary), &mut m)?;
        finish(&m, manifest_path(out, true))?;
    }
    Ok(())
}
