//! Acceptance checks, one line per criterion. Runs under `cargo test` with
//! its own harness so the summary is always printed.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clarity_cli::{cmd_train, RunConfig};
use clarity_core::chunking::{chunk, expected_chunk_count, ChunkingConfig};
use clarity_core::dataset::{plurality, ClarityLabel, EvasionLabel, Instance, Label};
use clarity_core::encoder::EncoderConfig;
use clarity_core::ensemble::{average_probabilities, Ensemble};
use clarity_core::evaluation::{combined_f1, fleiss_kappa, macro_f1, resolve_any_annotator};
use clarity_core::model::{
    head_loss, probabilities, DropoutConfig, LossConfig, LossKind, ModelConfig, Network, PoolingStrategy,
};
use clarity_core::synthetic::{annotate, marker_dataset, marker_word, MarkerConfig};
use clarity_core::tokenization::{HashedTokenizer, TokenSequence, TokenizerConfig};
use clarity_core::training::{
    replay_early_stopping, run_cv, stratified_folds, Checkpoint, PipelineConfig, Preprocessor,
    CHECKPOINT_FORMAT_VERSION,
};
use clarity_core::model::pool;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Tolerances and budgets.
const CHUNK_BUDGET: Duration = Duration::from_secs(10);
const GRAD_STEP: f64 = 1e-5;
const GRAD_REL_TOL: f64 = 1e-4;
const LOSS_TOL: f64 = 1e-12;
const LN3_TOL: f64 = 1e-9;
const METRIC_TOL: f64 = 1e-12;
const PROB_SUM_TOL: f64 = 1e-9;
const STRAT_DEVIATION: f64 = 1.0;
const LEARN_MIN_F1: f64 = 0.95;
const FIRST_CHUNK_MAX_F1: f64 = 0.6;
const LEARN_BUDGET: Duration = Duration::from_secs(300);
const KAPPA_RANDOM_TOL: f64 = 0.05;
const KAPPA_PERFECT_TOL: f64 = 1e-12;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn closed_form_chunks(len: usize, window: usize, stride: usize) -> usize {
    len.saturating_sub(window).div_ceil(stride) + 1
}

fn c1_chunking() -> Outcome {
    let start = Instant::now();
    let mut checked = 0;
    for (l, s) in [(8, 4), (16, 8), (512, 256)] {
        let cfg = ChunkingConfig::new(l, s).map_err(|e| e.to_string())?;
        for len in 1..=5000usize {
            let seq = TokenSequence {
                id: String::new(),
                ids: (0..len as u32).map(|i| 3 + i % 1000).collect(),
            };
            let set = chunk(&seq, &cfg, 0);
            let m = closed_form_chunks(len, l, s);
            ensure(set.chunks.len() == m && expected_chunk_count(len, &cfg) == m, || {
                format!("|T|={len} L={l} S={s}: loop {} vs closed form {m}", set.chunks.len())
            })?;
            let mut covered = vec![false; len];
            for c in &set.chunks {
                for o in 0..c.real_len() {
                    covered[c.start + o] = true;
                }
            }
            ensure(covered.iter().all(|&x| x), || format!("|T|={len} L={l}: uncovered token"))?;
            let last = set.chunks.last().unwrap();
            ensure(last.start + last.real_len() == len, || format!("|T|={len} L={l}: final chunk ends early"))?;
            checked += 1;
        }
    }
    let took = start.elapsed();
    ensure(took < CHUNK_BUDGET, || format!("took {took:?}"))?;
    Ok(format!("{checked} (length, window) cases exact in {:.2}s", took.as_secs_f64()))
}

fn c2_pooling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..1000 {
        let m = rng.gen_range(1..12);
        let d = rng.gen_range(1..16);
        let hs: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        let v = pool(&hs, PoolingStrategy::Max).map_err(|e| e.to_string())?;
        let oracle: Vec<f64> = (0..d)
            .map(|j| {
                let mut best = hs[0][j];
                for h in &hs[1..] {
                    if h[j] > best {
                        best = h[j];
                    }
                }
                best
            })
            .collect();
        ensure(v == oracle, || format!("case {case}: scan oracle differs"))?;
        let mut shuffled = hs.clone();
        shuffled.shuffle(&mut rng);
        ensure(pool(&shuffled, PoolingStrategy::Max).unwrap() == v, || {
            format!("case {case}: not permutation-invariant")
        })?;
        let single = vec![hs[0].clone()];
        let outs: Vec<Vec<f64>> = PoolingStrategy::ALL.iter().map(|&s| pool(&single, s).unwrap()).collect();
        ensure(outs.iter().all(|o| *o == hs[0]), || format!("case {case}: M=1 strategies differ"))?;
    }
    Ok("1000 random chunk lists: scan oracle, permutation invariance, M=1 agreement exact".into())
}

fn loss_at(net: &Network, chunks: &clarity_core::chunking::ChunkSet, c: ClarityLabel, e: EvasionLabel, model: &ModelConfig, loss: &LossConfig, grads: &mut Network) -> f64 {
    net.accumulate_gradients(
        chunks,
        c,
        e,
        model,
        &DropoutConfig::eval(),
        loss,
        1.0,
        &mut ChaCha8Rng::seed_from_u64(0),
        grads,
    )
    .unwrap()
    .total
}

fn c3_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let kinds = [LossKind::CrossEntropy, LossKind::ClassWeighted, LossKind::Focal];
    let mut worst = 0.0f64;
    let mut params = 0usize;
    for case in 0..20 {
        let vocab = rng.gen_range(6..20);
        let width = rng.gen_range(2..=8);
        let window = rng.gen_range(2..=16);
        let stride = rng.gen_range(1..=window);
        let mut net = Network::init(vocab, &EncoderConfig { width, max_positions: window }, &mut rng);
        for t in net.tensors_mut() {
            t.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        }
        let len = rng.gen_range(1..3 * window + 2);
        let seq = TokenSequence {
            id: String::new(),
            ids: (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect(),
        };
        let chunks = chunk(&seq, &ChunkingConfig::new(window, stride).unwrap(), 0);
        let c = ClarityLabel::ALL[rng.gen_range(0..3)];
        let e = EvasionLabel::ALL[rng.gen_range(0..9)];
        let model = ModelConfig {
            pooling: PoolingStrategy::ALL[case % 3],
            dropout: 0.0,
        };
        let loss = LossConfig {
            kind: kinds[case % 3],
            clarity_weights: Some(vec![0.7, 1.9, 1.1]),
            evasion_weights: Some((1..=9).map(|x| 0.25 * x as f64).collect()),
            ..LossConfig::default()
        };
        let mut grads = net.zeros_like();
        loss_at(&net, &chunks, c, e, &model, &loss, &mut grads);
        let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
        let mut scratch = net.zeros_like();
        for (ti, tensor) in analytic.iter().enumerate() {
            for (i, &a) in tensor.iter().enumerate() {
                let orig = net.tensors()[ti][i];
                net.tensors_mut()[ti][i] = orig + GRAD_STEP;
                let up = loss_at(&net, &chunks, c, e, &model, &loss, &mut scratch);
                net.tensors_mut()[ti][i] = orig - GRAD_STEP;
                let down = loss_at(&net, &chunks, c, e, &model, &loss, &mut scratch);
                net.tensors_mut()[ti][i] = orig;
                let numeric = (up - down) / (2.0 * GRAD_STEP);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
                params += 1;
            }
        }
    }
    ensure(worst < GRAD_REL_TOL, || format!("max relative error {worst:.3e}"))?;
    Ok(format!("20 instances, {params} parameters, max relative error {worst:.2e}"))
}

fn c4_losses() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = if rng.gen_bool(0.5) { 3 } else { 9 };
        let z: Vec<f64> = (0..k).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let gold = rng.gen_range(0..k);
        let ce = head_loss(&z, gold, LossKind::CrossEntropy, 0.0, 1.0).0;
        let focal = head_loss(&z, gold, LossKind::Focal, 0.0, 1.0).0;
        let weighted = head_loss(&z, gold, LossKind::ClassWeighted, 0.0, 1.0).0;
        worst = worst.max((ce - focal).abs()).max((ce - weighted).abs());
    }
    ensure(worst <= LOSS_TOL, || format!("identity gap {worst:e}"))?;
    let uniform = head_loss(&[0.3, 0.3, 0.3], 1, LossKind::CrossEntropy, 0.0, 1.0).0;
    ensure((uniform - 3f64.ln()).abs() <= LN3_TOL, || format!("uniform CE {uniform}"))?;
    Ok(format!("max identity gap {worst:.1e}; uniform 3-class CE = {uniform:.12}"))
}

fn oracle_macro_f1(gold: &[usize], pred: &[usize], k: usize) -> f64 {
    let mut m = vec![vec![0usize; k]; k];
    for (&g, &p) in gold.iter().zip(pred) {
        m[g][p] += 1;
    }
    (0..k)
        .map(|c| {
            let tp = m[c][c] as f64;
            let col: usize = (0..k).map(|r| m[r][c]).sum();
            let row: usize = m[c].iter().sum();
            if col + row == 0 {
                0.0
            } else {
                2.0 * tp / (col + row) as f64
            }
        })
        .sum::<f64>()
        / k as f64
}

fn c5_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..1000 {
        let k = if case % 2 == 0 { 3 } else { 9 };
        let n = rng.gen_range(1..=50);
        let gold: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let (a, b) = (macro_f1(&gold, &pred, k), oracle_macro_f1(&gold, &pred, k));
        ensure((a - b).abs() <= METRIC_TOL, || format!("case {case}: {a} vs oracle {b}"))?;
    }
    let c = combined_f1(0.70, 0.45);
    ensure(c == 0.575, || format!("combined_f1(0.70, 0.45) = {c}"))?;
    Ok("1000 random cases match the confusion-matrix oracle; combined_f1(0.70, 0.45) = 0.575".into())
}

fn c6_ensemble() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = PipelineConfig {
        tokenizer: TokenizerConfig::Hashed { vocab_size: 512 },
        encoder: EncoderConfig { width: 8, max_positions: 16 },
        ..PipelineConfig::default()
    };
    let chunking = cfg.chunking().unwrap();
    let tokenizer = cfg.tokenizer.build().unwrap();
    let ckpt = Checkpoint {
        format_version: CHECKPOINT_FORMAT_VERSION,
        tokenizer: cfg.tokenizer.clone(),
        tokenizer_spec: tokenizer.spec().clone(),
        chunking,
        model: cfg.model,
        tasks: cfg.loss.tasks,
        network: Network::init(512, &cfg.encoder, &mut rng),
        seed: 6,
        epoch: 1,
        val_combined_f1: 0.0,
    };
    let data = marker_dataset(&MarkerConfig { instances: 40, ..MarkerConfig::default() });
    let pre = Preprocessor::new(&cfg.tokenizer, chunking).unwrap();
    let single = Ensemble::new(vec![ckpt.clone()]).unwrap();
    for k in 2..=7 {
        let many = Ensemble::new(vec![ckpt.clone(); k]).unwrap();
        for inst in &data {
            let p = pre.prepare(inst);
            let (a, b) = (single.predict_prepared(&p).unwrap(), many.predict_prepared(&p).unwrap());
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            ensure(
                bits(&a.clarity_probs) == bits(&b.clarity_probs) && bits(&a.evasion_probs) == bits(&b.evasion_probs),
                || format!("k={k}: {} differs from single model", inst.id),
            )?;
        }
    }
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.gen_range(1..=7);
        let n = if rng.gen_bool(0.5) { 3 } else { 9 };
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|_| probabilities(&(0..n).map(|_| rng.gen_range(-8.0..8.0)).collect::<Vec<_>>()))
            .collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let avg = average_probabilities(&refs).unwrap();
        worst = worst.max((avg.iter().sum::<f64>() - 1.0).abs());
    }
    ensure(worst <= PROB_SUM_TOL, || format!("sum deviates by {worst:e}"))?;
    Ok(format!("k = 2..7 identical checkpoints bitwise equal to one; max |sum - 1| = {worst:.1e}"))
}

fn c7_stratification() -> Outcome {
    let counts = [2040usize, 356, 1052];
    let mut instances = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (code, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            instances.push(Instance {
                id: format!("t{:05}", instances.len()),
                question: "q".into(),
                answer: "a".into(),
                clarity: Some(ClarityLabel::ALL[code]),
                evasion: Some(EvasionLabel::ALL[rng.gen_range(0..9)]),
                clarity_annotations: None,
                evasion_annotations: None,
            });
        }
    }
    instances.shuffle(&mut rng);
    let plan = stratified_folds(&instances, 7, 42).map_err(|e| e.to_string())?;
    let folds = plan.fold_indices(&instances);
    let mut seen = BTreeSet::new();
    let mut worst = 0.0f64;
    for fold in &folds {
        for &i in fold {
            ensure(seen.insert(instances[i].id.clone()), || format!("{} in two folds", instances[i].id))?;
        }
        for (code, &n) in counts.iter().enumerate() {
            let got = fold.iter().filter(|&&i| instances[i].clarity.unwrap().code() == code).count();
            worst = worst.max((got as f64 - n as f64 / 7.0).abs());
        }
    }
    ensure(seen.len() == instances.len(), || "folds do not cover every id".into())?;
    ensure(worst <= STRAT_DEVIATION, || format!("deviation {worst:.3}"))?;
    Ok(format!("7 folds partition {} ids; max deviation from proportional share {worst:.3}", seen.len()))
}

fn learning_config(pooling: PoolingStrategy) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.tokenizer = TokenizerConfig::Hashed { vocab_size: 8192 };
    cfg.encoder = EncoderConfig { width: 16, max_positions: 16 };
    cfg.model.pooling = pooling;
    cfg.train.learning_rate = 0.03;
    cfg.train.batch_size = 4;
    cfg.train.folds = 3;
    cfg.train.max_epochs = 15;
    cfg
}

fn ensemble_f1(cfg: &PipelineConfig, train: &[Instance], test: &[Instance]) -> Result<(f64, f64, usize), String> {
    let cv = run_cv(train, cfg).map_err(|e| e.to_string())?;
    let epochs = cv.logs.iter().map(Vec::len).max().unwrap_or(0);
    let ensemble = Ensemble::new(cv.checkpoints).map_err(|e| e.to_string())?;
    let preds = ensemble.predict_all(test).map_err(|e| e.to_string())?;
    let gc: Vec<usize> = test.iter().map(|i| i.clarity.unwrap().code()).collect();
    let ge: Vec<usize> = test.iter().map(|i| i.evasion.unwrap().code()).collect();
    let pc: Vec<usize> = preds.iter().map(|p| p.clarity.code()).collect();
    let pe: Vec<usize> = preds.iter().map(|p| p.evasion.code()).collect();
    Ok((macro_f1(&gc, &pc, 3), macro_f1(&ge, &pe, 9), epochs))
}

fn c8_learning() -> Outcome {
    let train = marker_dataset(&MarkerConfig::default());
    let test = marker_dataset(&MarkerConfig { instances: 180, seed: 99, ..MarkerConfig::default() });
    ensure(train.len() == 300, || "dataset size".into())?;

    // The marker must sit in the final chunk and never in the first.
    let cfg = learning_config(PoolingStrategy::Max);
    let pre = Preprocessor::new(&cfg.tokenizer, cfg.chunking().unwrap()).unwrap();
    let hashed = HashedTokenizer::new(8192).unwrap();
    for inst in train.iter().chain(&test) {
        let marker = hashed.word_id(&marker_word(inst.evasion.unwrap()));
        let p = pre.prepare(inst);
        ensure(
            p.chunks.chunks.len() > 1
                && !p.chunks.chunks[0].real_ids().contains(&marker)
                && p.chunks.chunks.last().unwrap().real_ids().contains(&marker),
            || format!("{}: marker placement", inst.id),
        )?;
    }

    let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let start = Instant::now();
    let (max_c, max_e, max_epochs) = pool1.install(|| ensemble_f1(&cfg, &train, &test))?;
    let (first_c, first_e, _) = pool1.install(|| ensemble_f1(&learning_config(PoolingStrategy::FirstChunk), &train, &test))?;
    let took = start.elapsed();
    let summary = format!(
        "Max {max_c:.3}/{max_e:.3}, FirstChunk {first_c:.3}/{first_e:.3} (clarity/evasion), {max_epochs} epochs max, {:.1}s single-threaded",
        took.as_secs_f64()
    );
    ensure(max_c >= LEARN_MIN_F1 && max_e >= LEARN_MIN_F1, || summary.clone())?;
    ensure(first_c <= FIRST_CHUNK_MAX_F1 && first_e <= FIRST_CHUNK_MAX_F1, || summary.clone())?;
    ensure(max_epochs <= 15, || summary.clone())?;
    ensure(took < LEARN_BUDGET, || summary.clone())?;
    Ok(summary)
}

fn c9_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let train = dir.path().join("train.jsonl");
    clarity_core::dataset::write_dataset(&train, &marker_dataset(&MarkerConfig { instances: 60, ..MarkerConfig::default() }))
        .map_err(|e| e.to_string())?;
    let run = |name: &str, threads: usize| -> Result<Vec<u8>, String> {
        let mut cfg = RunConfig::default();
        cfg.out_dir = dir.path().join(name);
        cfg.data.train = Some(train.clone());
        cfg.tokenizer = TokenizerConfig::Hashed { vocab_size: 1024 };
        cfg.encoder = EncoderConfig { width: 8, max_positions: 16 };
        cfg.train.folds = 3;
        cfg.train.max_epochs = 4;
        cfg.train.learning_rate = 0.03;
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| cmd_train(&cfg)).map_err(|e| e.to_string())?;
        fs::read(cfg.out_dir.join("oof_predictions.jsonl")).map_err(|e| e.to_string())
    };
    let a = run("a", 1)?;
    let b = run("b", 4)?;
    ensure(!a.is_empty() && a == b, || "out-of-fold files differ".into())?;
    Ok(format!("two runs (1 and 4 threads) wrote identical {}-byte OOF files", a.len()))
}

fn c10_annotators() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let base = marker_dataset(&MarkerConfig { instances: 120, ..MarkerConfig::default() });
    let mut datasets = 0;
    for seed in 0..40u64 {
        let agreement = seed as f64 / 40.0;
        let raters = 2 + seed as usize % 4;
        let ann = annotate(&base, raters, agreement, seed);
        for skill in [0.0, 0.5, 1.0] {
            let (mut any, mut majority) = (0usize, 0usize);
            for inst in &ann {
                let list = inst.evasion_annotations.as_deref().unwrap();
                let pred = if rng.gen::<f64>() < skill {
                    list[0]
                } else {
                    EvasionLabel::ALL[rng.gen_range(0..9)]
                };
                any += resolve_any_annotator(pred, list).correct as usize;
                majority += (plurality(list) == Some(pred)) as usize;
            }
            ensure(any >= majority, || format!("dataset {seed}: any {any} < majority {majority}"))?;
            datasets += 1;
        }
    }
    let perfect: Vec<Vec<usize>> = (0..90).map(|i| vec![i % 9; 3]).collect();
    let k1 = fleiss_kappa(&perfect, 9).map_err(|e| e.to_string())?;
    ensure((k1 - 1.0).abs() <= KAPPA_PERFECT_TOL, || format!("perfect kappa {k1}"))?;
    let random: Vec<Vec<usize>> = (0..10_000).map(|_| (0..3).map(|_| rng.gen_range(0..9)).collect()).collect();
    let k0 = fleiss_kappa(&random, 9).map_err(|e| e.to_string())?;
    ensure(k0.abs() < KAPPA_RANDOM_TOL, || format!("random kappa {k0}"))?;
    Ok(format!("{datasets} annotated datasets: any-annotator >= majority; kappa perfect {k1}, random {k0:.4}"))
}

fn c11_early_stopping() -> Outcome {
    let (epochs, best) = replay_early_stopping(&[0.5, 0.6, 0.6, 0.6, 0.6], 15, 3);
    ensure(epochs == 5 && best == 2, || format!("stopped after {epochs}, selected {best}"))?;
    Ok(format!("stopped after epoch {epochs}, selected epoch {best}"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("chunking oracle", c1_chunking),
        ("pooling", c2_pooling),
        ("gradient suite", c3_gradients),
        ("loss identities", c4_losses),
        ("metric oracle", c5_metrics),
        ("ensemble identities", c6_ensemble),
        ("stratification", c7_stratification),
        ("end-to-end learning", c8_learning),
        ("determinism", c9_determinism),
        ("any-annotator rule and kappa", c10_annotators),
        ("early stopping", c11_early_stopping),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let label = format!("criterion {:>2}: {name}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| label.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS  {label}  ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {label}  ({detail})");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
