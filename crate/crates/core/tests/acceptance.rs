//! Acceptance checks. Prints one `PASS` or `FAIL` line per criterion and
//! exits non-zero if any fails. Extra arguments filter criteria by name.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use varlift::autodiff::log_softmax;
use varlift::corpus::pipeline::build_type_library;
use varlift::corpus::{
    label_components, mark_function_in_training, preprocess, preprocess_functions, read_corpus, read_split, train_bpe, Encoder,
    NameVocab, PreprocessConfig, ProcessedFunction, Split, Vocabularies,
};
use varlift::decoding::{beam_decode, greedy_decode, StepScorer};
use varlift::evaluation::{
    baseline_frequency_by_size, frequency_by_size_predictions, partition_report, Accuracy, FunctionPredictions, IN_TRAINING,
    NOT_IN_TRAINING, OVERALL, STRUCT,
};
use varlift::model::{multitask_schedule, FunctionInput, Model, ModelConfig, Step, StepKind, Tasks, VarInput};
use varlift::predict::{PredictOptions, Predictor};
use varlift::synthetic::{generate, toy_corpus, SyntheticConfig};
use varlift::training::{batch_gradients, build_ablation, greedy_accuracy, train, TrainConfig, Variant};
use varlift::typelib::{parse_canonical, ScalarTable, TypeEntry, TypeKind, COMPONENT_ID, UNKNOWN};

type Check = Result<String, String>;

fn fail<E: Display>(e: E) -> String {
    e.to_string()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t <= limit, || format!("took {t:.1?}, limit {limit:?}"))
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_enc_layers: 1,
        n_dec_layers: 1,
        n_layout_layers: 1,
        n_heads: 2,
        d_ff: 32,
        layout_d_model: 8,
        dropout: 0.0,
        max_seq_length: 16,
        max_layout_len: 6,
        subword_vocab_size: 12,
        type_vocab_size: 6,
        name_vocab_size: 6,
        layout_vocab_size: 9,
        use_layout_mask: true,
        tasks: Tasks::Both,
    }
}

fn var(record: usize, occurrences: &[usize], layout: &[usize], ty: usize, name: Option<usize>) -> VarInput {
    VarInput {
        record,
        occurrences: occurrences.to_vec(),
        layout_ids: layout.to_vec(),
        gold_type: Some(ty),
        gold_name: name,
        component: ty == COMPONENT_ID,
    }
}

/// Two small functions, one with a component variable.
fn tiny_batch() -> Vec<FunctionInput> {
    vec![
        FunctionInput {
            subword_ids: vec![2, 5, 7, 3, 9, 11, 4, 6, 8],
            vars: vec![
                var(0, &[1, 4], &[2, 3, 4], 3, Some(2)),
                var(1, &[6], &[5, 6, 7, 8], COMPONENT_ID, None),
                var(2, &[2, 7], &[2, 8], 5, Some(4)),
            ],
        },
        FunctionInput {
            subword_ids: vec![3, 3, 10, 2, 1],
            vars: vec![var(0, &[0, 2], &[4, 5, 6], 2, Some(5))],
        },
    ]
}

fn random_function(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> FunctionInput {
    let n = rng.random_range(3..=cfg.max_seq_length);
    let subword_ids = (0..n).map(|_| rng.random_range(0..cfg.subword_vocab_size)).collect();
    let m = rng.random_range(1..=3);
    let vars = (0..m)
        .map(|k| {
            let occurrences: BTreeSet<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(0..n)).collect();
            let layout: Vec<usize> = (0..rng.random_range(1..=cfg.max_layout_len))
                .map(|_| rng.random_range(0..cfg.layout_vocab_size))
                .collect();
            let ty = rng.random_range(2..cfg.type_vocab_size);
            var(k, &occurrences.into_iter().collect::<Vec<_>>(), &layout, ty, Some(rng.random_range(2..cfg.name_vocab_size)))
        })
        .collect();
    FunctionInput { subword_ids, vars }
}

// ---- gradient check ----

fn gradient_check() -> Check {
    let start = Instant::now();
    let batch = tiny_batch();
    let mut model = Model::new(tiny_config(), 11).map_err(fail)?;
    let (loss, grads) = batch_gradients(&model, &batch, false, 0).map_err(fail)?.ok_or("no loss terms")?;
    let direct = model.loss(&batch).map_err(fail)?;
    ensure((loss - direct).abs() < 1e-12, || format!("loss {loss} vs {direct}"))?;

    let h = 1e-5;
    let mut worst = (0.0f64, String::new());
    let mut checked = 0usize;
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let n = model.params.get(id).len();
        for k in 0..n {
            let orig = model.params.get(id).as_slice().ok_or("non-contiguous parameter")?[k];
            let at = |x: f64, model: &mut Model| -> Result<f64, String> {
                model.params.get_mut(id).as_slice_mut().ok_or("non-contiguous parameter")?[k] = x;
                model.loss(&batch).map_err(fail)
            };
            let plus = at(orig + h, &mut model)?;
            let minus = at(orig - h, &mut model)?;
            at(orig, &mut model)?;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads.get(id).as_slice().ok_or("non-contiguous gradient")?[k];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{}[{k}] analytic {analytic:e} numeric {numeric:e}", model.params.name(id)));
            }
            checked += 1;
        }
    }
    within(start, Duration::from_secs(60))?;
    let detail = format!(
        "{checked} parameters, max relative error {:.2e} at {} ({:.1?})",
        worst.0,
        worst.1,
        start.elapsed()
    );
    ensure(worst.0 < 1e-4, || detail.clone())?;
    Ok(detail)
}

// ---- decoding oracle ----

/// Deterministic pseudo-random next-step distribution keyed by the prefix.
struct TableScorer {
    plan: Vec<Step>,
    types: usize,
    names: usize,
    seed: u64,
}

impl TableScorer {
    fn vocab(&self, kind: StepKind) -> usize {
        match kind {
            StepKind::Type => self.types,
            StepKind::Name => self.names,
        }
    }
}

impl StepScorer for TableScorer {
    fn plan(&self) -> &[Step] {
        &self.plan
    }

    fn log_probs(&self, prefix: &[usize]) -> varlift::Result<Vec<f64>> {
        let mut key = self.seed ^ 0xcbf2_9ce4_8422_2325;
        for &l in prefix {
            key = (key ^ (l as u64 + 1)).wrapping_mul(0x0100_0000_01b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(key ^ prefix.len() as u64);
        let n = self.vocab(self.plan[prefix.len()].kind);
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
        Ok(log_softmax(&logits))
    }
}

/// Every complete sequence with its score, summed left to right.
fn enumerate(s: &TableScorer, prefix: &mut Vec<usize>, score: f64, out: &mut Vec<(Vec<usize>, f64)>) -> Result<(), String> {
    if prefix.len() == s.plan.len() {
        out.push((prefix.clone(), score));
        return Ok(());
    }
    let lp = s.log_probs(prefix).map_err(fail)?;
    for (l, p) in lp.iter().enumerate() {
        prefix.push(l);
        enumerate(s, prefix, score + p, out)?;
        prefix.pop();
    }
    Ok(())
}

fn decoding_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let instances = 150;
    let mut widths_checked = 0;
    for i in 0..instances {
        let tasks = [Tasks::Both, Tasks::Type, Tasks::Name][i % 3];
        let per_var = if tasks == Tasks::Both { 2 } else { 1 };
        let m = rng.random_range(1..=6 / per_var);
        let s = TableScorer {
            plan: multitask_schedule(m, tasks),
            types: rng.random_range(2..=5),
            names: rng.random_range(2..=5),
            seed: rng.random(),
        };
        let vocab = |k| s.vocab(k);
        let mut all = Vec::new();
        enumerate(&s, &mut Vec::new(), 0.0, &mut all)?;
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let space = all.len();

        for width in [space, space + 3] {
            let beam = beam_decode(&s, vocab, width).map_err(fail)?;
            let best = &beam[0];
            ensure(best.labels == all[0].0 && best.log_prob.to_bits() == all[0].1.to_bits(), || {
                format!("instance {i}: beam({width}) found {:?} {} but optimum is {:?} {}", best.labels, best.log_prob, all[0].0, all[0].1)
            })?;
            let listed: Vec<&Vec<usize>> = beam.iter().map(|b| &b.labels).collect();
            let expected: Vec<&Vec<usize>> = all.iter().map(|a| &a.0).collect();
            ensure(listed == expected, || format!("instance {i}: beam({width}) does not list the space in score order"))?;
        }

        let greedy = greedy_decode(&s).map_err(fail)?;
        let one = beam_decode(&s, vocab, 1).map_err(fail)?;
        ensure(
            one.len() == 1 && one[0].labels == greedy.labels && one[0].log_prob.to_bits() == greedy.log_prob.to_bits(),
            || format!("instance {i}: beam(1) {:?} differs from greedy {:?}", one[0].labels, greedy.labels),
        )?;

        let mut prev = f64::NEG_INFINITY;
        for width in (1..=space.min(16)).chain([space]) {
            let best = beam_decode(&s, vocab, width).map_err(fail)?[0].log_prob;
            ensure(best >= prev, || format!("instance {i}: best score drops from {prev} to {best} at width {width}"))?;
            prev = best;
            widths_checked += 1;
        }
    }
    within(start, Duration::from_secs(60))?;
    Ok(format!(
        "{instances} instances, exhaustive optimum matched, beam(1) = greedy, {widths_checked} widths monotone ({:.1?})",
        start.elapsed()
    ))
}

// ---- mask algebra ----

fn mask_algebra() -> Check {
    let on_cfg = tiny_config();
    let mut masked = Model::new(on_cfg.clone(), 5).map_err(fail)?;
    masked.params.get_mut(masked.mask_weight()).fill(0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for i in 0..100 {
        let z = ndarray::Array1::from_shape_fn(on_cfg.d_model, |_| rng.random_range(-3.0..3.0));
        let m = ndarray::Array1::from_shape_fn(on_cfg.layout_d_model, |_| rng.random_range(-3.0..3.0));
        let s = masked.output_logits(&z, StepKind::Type);
        let with_mask = masked.apply_layout_mask(&s, &m, StepKind::Type).map_err(fail)?;
        ensure(s.iter().zip(&with_mask).all(|(a, b)| a.to_bits() == b.to_bits()), || {
            format!("input {i}: masked logits differ with a zero mask weight")
        })?;
    }

    let off_cfg = ModelConfig {
        use_layout_mask: false,
        ..on_cfg.clone()
    };
    let mut unmasked = Model::new(off_cfg.clone(), 6).map_err(fail)?;
    unmasked.params.load_named(&masked.params.to_named()).map_err(fail)?;
    let mut steps = 0;
    for i in 0..100 {
        let f = random_function(&mut rng, &on_cfg);
        let (a, b) = (masked.session(&f).map_err(fail)?, unmasked.session(&f).map_err(fail)?);
        let labels = f.gold_labels(&a.plan);
        for k in 0..labels.len() {
            let (x, y) = (a.step_logits(&labels[..k]).map_err(fail)?, b.step_logits(&labels[..k]).map_err(fail)?);
            ensure(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()), || {
                format!("function {i} step {k}: session logits differ with a zero mask weight")
            })?;
            steps += 1;
        }
    }

    let ablation_cfg = build_ablation(&on_cfg, Variant::NoDataLayout);
    let mut ablation = Model::new(ablation_cfg, 8).map_err(fail)?;
    let mut off = Model::new(off_cfg, 9).map_err(fail)?;
    let shared = Model::new(on_cfg.clone(), 10).map_err(fail)?.params.to_named();
    ablation.params.load_named(&shared).map_err(fail)?;
    off.params.load_named(&shared).map_err(fail)?;
    let batch: Vec<FunctionInput> = (0..8).map(|_| random_function(&mut rng, &on_cfg)).collect();
    let (la, lo) = (ablation.loss(&batch).map_err(fail)?, off.loss(&batch).map_err(fail)?);
    ensure(la.to_bits() == lo.to_bits(), || format!("loss {lo} with the mask off vs {la} for no_data_layout"))?;

    // With the mask off, layout parameters must not reach the loss.
    for id in off.params.ids().collect::<Vec<_>>() {
        if off.params.name(id).starts_with("layout") {
            off.params.get_mut(id).mapv_inplace(|x| x + 0.5);
        }
    }
    let perturbed = off.loss(&batch).map_err(fail)?;
    ensure(perturbed.to_bits() == lo.to_bits(), || format!("layout parameters change the unmasked loss: {lo} -> {perturbed}"))?;
    Ok(format!(
        "100 mask inputs and {steps} decoder steps bitwise equal with W_m = 0; unmasked loss {lo:.6} equals no_data_layout"
    ))
}

// ---- shared helpers for trained checks ----

fn load_inputs(dir: &Path, split: Split, vocab: &Vocabularies, cfg: &ModelConfig) -> Result<Vec<FunctionInput>, String> {
    Ok(read_split(dir, split)
        .map_err(fail)?
        .iter()
        .map(|f| FunctionInput::from_processed(f, &vocab.layouts, cfg.max_layout_len))
        .collect())
}

fn small_config(vocab: &Vocabularies, dropout: f64) -> ModelConfig {
    let d = 32;
    ModelConfig {
        d_model: d,
        n_enc_layers: 1,
        n_dec_layers: 1,
        n_layout_layers: 1,
        n_heads: 2,
        d_ff: 4 * d,
        layout_d_model: 16,
        dropout,
        max_seq_length: 512,
        max_layout_len: 8,
        ..ModelConfig::default()
    }
    .with_vocabularies(vocab)
}

// ---- overfit ----

fn overfit() -> Check {
    let start = Instant::now();
    let raw = toy_corpus(50, 0);
    let types: BTreeSet<&str> = raw.iter().flat_map(|f| &f.variables).filter_map(|v| v.gold_type.as_deref()).collect();
    let names: BTreeSet<&str> = raw.iter().flat_map(|f| &f.variables).filter_map(|v| v.gold_name.as_deref()).collect();
    let dir = tempfile::tempdir().map_err(fail)?;
    let pc = PreprocessConfig {
        ratios: [1.0, 0.0, 0.0],
        subword_vocab_size: 200,
        ..PreprocessConfig::default()
    };
    preprocess_functions(raw.clone(), dir.path(), &pc, &[]).map_err(fail)?;
    let vocab = Vocabularies::load(dir.path()).map_err(fail)?;
    let cfg = small_config(&vocab, 0.0);
    let train_set = load_inputs(dir.path(), Split::Train, &vocab, &cfg)?;
    let mut model = Model::new(cfg, 0).map_err(fail)?;
    let tc = TrainConfig {
        batch_size: 8,
        learning_rate: 1e-3,
        epochs: 300,
        target_train_accuracy: Some(0.95),
        ..TrainConfig::default()
    };
    let summary = train(&mut model, &train_set, &[], &tc, None).map_err(fail)?;
    let ty = greedy_accuracy(&model, &train_set, StepKind::Type).map_err(fail)?.unwrap_or(0.0);
    let name = greedy_accuracy(&model, &train_set, StepKind::Name).map_err(fail)?.unwrap_or(0.0);
    let detail = format!(
        "{} functions, {} types, {} names: type {:.3} name {:.3} after {} epochs ({:.1?})",
        raw.len(),
        types.len(),
        names.len(),
        ty,
        name,
        summary.history.len(),
        start.elapsed()
    );
    within(start, Duration::from_secs(600))?;
    ensure(raw.len() == 50 && types.len() == 8 && names.len() <= 20, || format!("corpus shape: {detail}"))?;
    ensure(ty >= 0.95 && name >= 0.90, || detail.clone())?;
    Ok(detail)
}

// ---- layout ablation and multi-task consistency ----

struct SeedRun {
    full: Accuracy,
    no_layout: Accuracy,
    unconditional: f64,
    conditional: f64,
}

fn predict_split(model: Model, vocab: &Vocabularies, test: &[ProcessedFunction]) -> Result<Vec<varlift::predict::FunctionOut>, String> {
    let p = Predictor::new(model, vocab.clone());
    test.iter()
        .map(|f| p.refine_processed(f.clone(), &[], &PredictOptions::default()).map_err(fail))
        .collect()
}

fn ablation_seed(seed: u64) -> Result<SeedRun, String> {
    let raw = generate(&SyntheticConfig {
        functions: 400,
        seed,
        ..SyntheticConfig::default()
    });
    let dir = tempfile::tempdir().map_err(fail)?;
    let pc = PreprocessConfig {
        seed,
        subword_vocab_size: 300,
        ..PreprocessConfig::default()
    };
    preprocess_functions(raw, dir.path(), &pc, &[]).map_err(fail)?;
    let vocab = Vocabularies::load(dir.path()).map_err(fail)?;
    let base = small_config(&vocab, 0.1);
    let train_set = load_inputs(dir.path(), Split::Train, &vocab, &base)?;
    let valid_set = load_inputs(dir.path(), Split::Valid, &vocab, &base)?;
    let test = read_split(dir.path(), Split::Test).map_err(fail)?;
    let tc = TrainConfig {
        batch_size: 16,
        learning_rate: 1e-3,
        epochs: 20,
        seed,
        ..TrainConfig::default()
    };

    let mut outs = Vec::new();
    for cfg in [base.clone(), build_ablation(&base, Variant::NoDataLayout)] {
        let mut model = Model::new(cfg, seed).map_err(fail)?;
        train(&mut model, &train_set, &valid_set, &tc, None).map_err(fail)?;
        outs.push(predict_split(model, &vocab, &test)?);
    }
    let score = |out: &[varlift::predict::FunctionOut]| -> Result<Accuracy, String> {
        let preds: Vec<FunctionPredictions> = out.iter().map(|o| o.to_predictions()).collect();
        partition_report(&preds, &test, &vocab.types).overall().types.ok_or_else(|| "no scored types".to_string())
    };

    // Type accuracy over variables with both gold labels, and restricted to
    // those whose name was predicted correctly.
    let (mut total, mut typed, mut named, mut both) = (0usize, 0usize, 0usize, 0usize);
    for (f, o) in test.iter().zip(&outs[0]) {
        for (rec, out) in f.variables.iter().zip(&o.variables) {
            let (Some(gt), Some(gn)) = (&rec.gold_type, &rec.gold_name) else { continue };
            if rec.is_component() {
                continue;
            }
            let type_ok = out.type_canonical.as_deref().is_some_and(|t| t != UNKNOWN && t == gt);
            let name_ok = out.name.as_deref() == Some(gn.as_str());
            total += 1;
            typed += type_ok as usize;
            named += name_ok as usize;
            both += (type_ok && name_ok) as usize;
        }
    }
    Ok(SeedRun {
        full: score(&outs[0])?,
        no_layout: score(&outs[1])?,
        unconditional: typed as f64 / total.max(1) as f64,
        conditional: both as f64 / named.max(1) as f64,
    })
}

fn ablation_and_consistency() -> (Check, Check) {
    let start = Instant::now();
    let mut runs = Vec::new();
    for seed in 0..3 {
        match ablation_seed(seed) {
            Ok(r) => runs.push(r),
            Err(e) => return (Err(format!("seed {seed}: {e}")), Err(format!("seed {seed}: {e}"))),
        }
    }
    let elapsed = start.elapsed();
    let full: f64 = runs.iter().map(|r| r.full.macro_avg).sum::<f64>() / 3.0;
    let none: f64 = runs.iter().map(|r| r.no_layout.macro_avg).sum::<f64>() / 3.0;
    let gap = 100.0 * (full - none);
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.1}/{:.1}", 100.0 * r.full.macro_avg, 100.0 * r.no_layout.macro_avg))
        .collect();
    let ablation_detail = format!(
        "held-out type accuracy full {:.1} vs no_data_layout {:.1} (gap {gap:.1} points; per seed {}) in {elapsed:.1?}",
        100.0 * full,
        100.0 * none,
        per_seed.join(", ")
    );
    let ablation = if gap >= 5.0 && elapsed <= Duration::from_secs(1800) {
        Ok(ablation_detail)
    } else {
        Err(ablation_detail)
    };

    let pairs: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.3} >= {:.3}", r.conditional, r.unconditional))
        .collect();
    let consistency_detail = format!("conditional vs unconditional type accuracy per seed: {}", pairs.join(", "));
    let consistency = if runs.iter().all(|r| r.conditional >= r.unconditional) {
        Ok(consistency_detail)
    } else {
        Err(consistency_detail)
    };
    (ablation, consistency)
}

// ---- metric oracle ----

fn metric_oracle() -> Check {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/metric_fixture");
    let train_raw: Vec<_> = read_corpus(&fixture.join("train.jsonl"))
        .map_err(fail)?
        .into_iter()
        .map(label_components)
        .collect();
    let test_raw: Vec<_> = read_corpus(&fixture.join("test.jsonl"))
        .map_err(fail)?
        .into_iter()
        .map(label_components)
        .collect();
    let all: Vec<_> = train_raw.iter().chain(&test_raw).cloned().collect();
    let lib = build_type_library(&all, &[]).map_err(fail)?;
    let subwords = train_bpe(train_raw.iter().flat_map(|f| f.tokens.iter().map(String::as_str)), 200).map_err(fail)?;
    let names = NameVocab::build(all.iter().flat_map(|f| f.variables.iter().filter_map(|v| v.gold_name.as_deref())), 100);
    let enc = Encoder::new(&subwords, &names, &lib, 32);
    let train: Vec<ProcessedFunction> = train_raw.iter().map(|f| enc.encode(f)).collect::<Result<_, _>>().map_err(fail)?;
    let mut test: Vec<ProcessedFunction> = test_raw.iter().map(|f| enc.encode(f)).collect::<Result<_, _>>().map_err(fail)?;
    let flags = mark_function_in_training(&test, &train);
    for (f, flag) in test.iter_mut().zip(flags) {
        f.in_training = Some(flag);
    }
    let preds: Vec<FunctionPredictions> = varlift::io::read_jsonl(&fixture.join("predictions.jsonl")).map_err(fail)?;
    let report = partition_report(&preds, &test, &lib);

    let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
    let acc = |part: &str, which: &str| -> Result<Accuracy, String> {
        let p = report.partitions.get(part).ok_or(format!("missing partition {part}"))?;
        match which {
            "types" => p.types,
            "names" => p.names,
            _ => p.layout_signature,
        }
        .ok_or(format!("{part}.{which} missing"))
    };
    let expect = |part: &str, which: &str, macro_avg: f64, micro: Option<f64>| -> Result<(), String> {
        let a = acc(part, which)?;
        ensure(close(a.macro_avg, macro_avg) && micro.is_none_or(|m| close(a.micro, m)), || {
            format!("{part}.{which}: got macro {} micro {}, expected {macro_avg} {micro:?}", a.macro_avg, a.micro)
        })
    };
    expect(OVERALL, "types", 17.0 / 30.0, Some(11.0 / 20.0))?;
    expect(IN_TRAINING, "types", 1.0, Some(1.0))?;
    expect(NOT_IN_TRAINING, "types", 11.0 / 24.0, Some(7.0 / 16.0))?;
    expect(OVERALL, "names", 37.0 / 60.0, Some(12.0 / 19.0))?;
    expect(OVERALL, "layout", 0.65, Some(13.0 / 20.0))?;
    expect(STRUCT, "types", 0.5, Some(0.5))?;
    expect(STRUCT, "names", 1.0, None)?;
    expect(STRUCT, "layout", 0.5, None)?;
    ensure(report.missing_functions == 1, || format!("missing functions {}", report.missing_functions))?;
    ensure(acc(IN_TRAINING, "types")?.variables == 4, || "in-training variable count".into())?;

    let f01 = partition_report(&preds[..1], &test[..1], &lib);
    let one = f01.overall().types.ok_or("f01 types")?;
    ensure(one.correct == 2 && one.variables == 3 && format!("{:.1}", 100.0 * one.macro_avg) == "66.7", || {
        format!("f01: {}/{}", one.correct, one.variables)
    })?;

    // Frequency-by-size against a direct count over the training records.
    let mut counts: BTreeMap<u64, BTreeMap<String, usize>> = BTreeMap::new();
    for v in train.iter().flat_map(|f| &f.variables) {
        if let Some(g) = v.gold_type.as_deref().filter(|_| !v.is_component()) {
            *counts.entry(v.layout.size).or_default().entry(g.to_string()).or_default() += 1;
        }
    }
    let baseline = baseline_frequency_by_size(&train, &lib);
    for (size, c) in &counts {
        let top = c.values().max().copied().unwrap_or(0);
        let expected = c
            .iter()
            .filter(|(_, &n)| n == top)
            .min_by_key(|(t, _)| lib.id_of(t).unwrap_or(usize::MAX))
            .map(|(t, _)| t.as_str())
            .unwrap_or(UNKNOWN);
        ensure(baseline.predict(*size) == expected, || {
            format!("size {size}: baseline {} vs count {expected}", baseline.predict(*size))
        })?;
    }
    ensure(baseline.predict(4) == "int", || format!("size 4 gives {}", baseline.predict(4)))?;
    let by_count = test
        .iter()
        .flat_map(|f| &f.variables)
        .filter(|v| !v.is_component() && v.gold_type.is_some())
        .filter(|v| !v.truncated && v.gold_type.as_deref() == Some(baseline.predict(v.layout.size)))
        .count();
    let scored = partition_report(&frequency_by_size_predictions(&test, &baseline), &test, &lib);
    let b = scored.overall().types.ok_or("baseline types")?;
    ensure(b.correct == by_count, || format!("baseline scored {} correct, direct count {by_count}", b.correct))?;
    Ok(format!(
        "10-function fixture: types 56.7/55.0, names 61.7/63.2, signature 65.0; f01 66.7%; frequency-by-size {}/{} by direct count",
        b.correct, b.variables
    ))
}

// ---- pipeline determinism ----

fn pipeline_determinism() -> Check {
    let raw = generate(&SyntheticConfig {
        functions: 200,
        seed: 3,
        ..SyntheticConfig::default()
    });
    let tmp = tempfile::tempdir().map_err(fail)?;
    let corpus = tmp.path().join("corpus.jsonl");
    varlift::io::write_jsonl(&corpus, &raw).map_err(fail)?;
    let cfg = PreprocessConfig {
        seed: 17,
        subword_vocab_size: 300,
        ..PreprocessConfig::default()
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ma = preprocess(&corpus, &a, &cfg, &[]).map_err(fail)?;
    let mb = preprocess(&corpus, &b, &cfg, &[]).map_err(fail)?;
    ensure(ma.hashes == mb.hashes, || "artifact hashes differ between runs".into())?;
    let mut files = 0;
    for entry in std::fs::read_dir(&a).map_err(fail)? {
        let name = entry.map_err(fail)?.file_name();
        let (x, y) = (std::fs::read(a.join(&name)).map_err(fail)?, std::fs::read(b.join(&name)).map_err(fail)?);
        ensure(x == y, || format!("{} differs between runs", name.to_string_lossy()))?;
        files += 1;
    }
    let mut owner: BTreeMap<String, Split> = BTreeMap::new();
    for split in Split::ALL {
        for f in read_split(&a, split).map_err(fail)? {
            if let Some(prev) = owner.insert(f.binary_id.clone(), split) {
                ensure(prev == split, || format!("binary {} in {} and {}", f.binary_id, prev.name(), split.name()))?;
            }
        }
    }
    Ok(format!(
        "{files} files byte-identical across two runs; {} binaries each in exactly one split",
        owner.len()
    ))
}

// ---- canonical round-trip ----

struct Gen {
    rng: ChaCha8Rng,
    leaves: Vec<(String, TypeKind, u64)>,
    table: ScalarTable,
    tags: usize,
}

impl Gen {
    fn tag(&mut self) -> String {
        self.tags += 1;
        format!("t{}", self.tags)
    }

    fn leaf(&mut self) -> TypeEntry {
        loop {
            let i = self.rng.random_range(0..self.leaves.len());
            let (name, kind, _) = &self.leaves[i];
            if *kind != TypeKind::Void {
                return self.table.resolve(name).expect("known leaf");
            }
        }
    }

    fn sized(&mut self, depth: usize) -> TypeEntry {
        let kind = if depth == 0 { 0 } else { self.rng.random_range(0..5) };
        match kind {
            0 => self.leaf(),
            1 => TypeEntry::pointer(self.pointee(depth - 1)),
            2 => {
                let elem = self.sized(depth - 1);
                TypeEntry::array(elem, self.rng.random_range(1..=8)).expect("sized element")
            }
            3 => {
                let n = self.rng.random_range(1..=4);
                let members = (0..n).map(|k| (format!("m{k}"), self.sized(depth - 1))).collect();
                let tag = self.tag();
                TypeEntry::packed_naturally(Some(&tag), members).expect("valid struct")
            }
            _ => {
                let n = self.rng.random_range(1..=3);
                let members = (0..n).map(|k| (format!("u{k}"), self.sized(depth - 1))).collect();
                let tag = self.tag();
                TypeEntry::union(Some(&tag), members).expect("valid union")
            }
        }
    }

    fn pointee(&mut self, depth: usize) -> TypeEntry {
        match self.rng.random_range(0..6) {
            0 => TypeEntry::void(),
            1 => {
                let kind = if self.rng.random_bool(0.5) { TypeKind::Struct } else { TypeKind::Union };
                let tag = self.tag();
                TypeEntry::incomplete(kind, &tag)
            }
            _ => self.sized(depth),
        }
    }
}

fn canonical_round_trip() -> Check {
    let table = ScalarTable::default();
    let mut leaves: Vec<(String, TypeKind, u64)> = table.names().map(|(n, k, s)| (n.to_string(), k, s)).collect();
    leaves.sort_by(|a, b| a.0.cmp(&b.0));
    let mut gen = Gen {
        rng: ChaCha8Rng::seed_from_u64(1234),
        leaves,
        table: table.clone(),
        tags: 0,
    };
    for i in 0..1000 {
        let depth = gen.rng.random_range(0..=3);
        let entry = gen.sized(depth);
        let text = entry.canonical();
        let parsed = parse_canonical(&text, &table).map_err(|e| format!("entry {i} `{text}`: {e}"))?;
        ensure(parsed == entry, || format!("entry {i} `{text}` parses to `{}`", parsed.canonical()))?;
    }
    let signature = |s: &str| -> Result<String, String> {
        parse_canonical(s, &table)
            .and_then(|e| e.layout_signature())
            .map_err(|e| format!("`{s}`: {e}"))
    };
    let footnotes = [
        ("bool", "Primitive_1"),
        ("char", "Primitive_1"),
        ("const char *", "Pointer<Primitive_1>"),
        ("char *", "Pointer<Primitive_1>"),
        ("struct ImVec2 { float x @0; float y @4; }", "Struct<Primitive_4, Primitive_4>"),
    ];
    for (input, expected) in footnotes {
        let got = signature(input)?;
        ensure(got == expected, || format!("`{input}` gives {got}, expected {expected}"))?;
    }
    Ok("1000 random entries round-trip; bool/char, const char */char * and ImVec2 signatures as expected".into())
}

// ---- driver ----

fn report(name: &str, result: &Check) -> bool {
    match result {
        Ok(detail) => {
            println!("PASS {name}: {detail}");
            true
        }
        Err(detail) => {
            println!("FAIL {name}: {detail}");
            false
        }
    }
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let mut ok = true;
    let checks: [(&str, fn() -> Check); 6] = [
        ("gradient_check", gradient_check),
        ("decoding_oracle", decoding_oracle),
        ("mask_algebra", mask_algebra),
        ("metric_oracle", metric_oracle),
        ("pipeline_determinism", pipeline_determinism),
        ("canonical_round_trip", canonical_round_trip),
    ];
    for (name, f) in checks {
        if wanted(name) {
            ok &= report(name, &f());
        }
    }
    if wanted("overfit") {
        ok &= report("overfit", &overfit());
    }
    if wanted("layout_ablation") || wanted("multitask_consistency") {
        let (ablation, consistency) = ablation_and_consistency();
        ok &= report("layout_ablation", &ablation);
        ok &= report("multitask_consistency", &consistency);
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
