//! Acceptance run: one PASS/FAIL line per criterion. The process fails if a
//! criterion fails that is not listed in `KNOWN_SHORTFALLS`.

use std::collections::BTreeMap;
use std::time::Instant;

use crnnet::alignment::{hungarian_assign, pla_align, pla_loss, pla_targets};
use crnnet::corpus::{
    build_complication_table, generate_synthetic_corpus, split_dataset, top_k_codes, write_corpus, ComplicationTable,
    CorpusConfig, EhrDocument, Split, SplitRatio, DEFAULT_MIN_SUPPORT, DEFAULT_OR_THRESHOLD,
};
use crnnet::discriminator::{split_prefixes, Discriminator, DiscriminatorConfig, LabeledPrefix, PathTag};
use crnnet::encoder::{Dropout, EncoderConfig};
use crnnet::generator::{mix_scores, CandidateActivation, Generator, GeneratorConfig, StepTargets, Unroll};
use crnnet::metrics::{
    auc, complication_ratio, harmonic, jaccard, micro_macro_prf, random_complication_rate, MetricReport,
    PredictionRecord,
};
use crnnet::model::{Checkpoint, Model, ModelConfig};
use crnnet::numerics::{finite_diff_check, seeded_rng, AdamConfig, ParamStore};
use crnnet::trainer::{train, TrainConfig, TrainData, TrainReport, Trainer};
use rand::seq::SliceRandom;
use rand::Rng;

/// Criteria expected to fail at desk scale. Their lines still print FAIL.
const KNOWN_SHORTFALLS: &[u32] = &[5];

const DOCS: usize = 2000;
const CODES: usize = 20;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const PRETRAIN_EPOCHS: usize = 20;
const ADVERSARIAL_EPOCHS: usize = 10;
const LEARNING_RATE: f64 = 3e-3;
const MAX_LEN: usize = 8;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Desk {
    documents: Vec<EhrDocument>,
    vocab: usize,
    split: Split,
    table: ComplicationTable,
}

fn desk_corpus(seed: u64) -> Desk {
    let corpus = generate_synthetic_corpus(&CorpusConfig::desk(DOCS, CODES, seed)).unwrap();
    let split = split_dataset(corpus.documents.len(), SplitRatio::default(), seed).unwrap();
    let table = build_complication_table(
        Split::select(&corpus.documents, &split.train),
        CODES,
        DEFAULT_OR_THRESHOLD,
        DEFAULT_MIN_SUPPORT,
    )
    .unwrap();
    Desk {
        vocab: corpus.tokens.len(),
        documents: corpus.documents,
        split,
        table,
    }
}

fn desk_train_config(seed: u64, no_copy: bool, no_arl: bool) -> TrainConfig {
    TrainConfig {
        max_iterations: ADVERSARIAL_EPOCHS,
        pretrain_epochs: PRETRAIN_EPOCHS,
        adam: AdamConfig {
            learning_rate: LEARNING_RATE,
            ..AdamConfig::default()
        },
        max_len: MAX_LEN,
        seed,
        no_copy,
        no_arl,
        ..TrainConfig::default()
    }
}

fn data(d: &Desk) -> TrainData<'_> {
    TrainData {
        documents: &d.documents,
        split: &d.split,
        table: &d.table,
    }
}

fn tiny_generator(copy: bool) -> GeneratorConfig {
    GeneratorConfig {
        encoder: EncoderConfig {
            vocab_size: 9,
            embed_dim: 3,
            kernel_sizes: vec![2, 3],
            filters: 2,
            dropout: 0.5,
        },
        num_codes: 6,
        code_dim: 3,
        hidden: 4,
        candidate: CandidateActivation::Relu,
        copy,
    }
}

fn tiny_table() -> ComplicationTable {
    ComplicationTable::from_pairs(6, [(0, 3, 4.0), (1, 4, 3.0), (0, 5, 2.5), (2, 5, 6.0)]).unwrap()
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let table = tiny_table();
    let tokens = [1, 7, 3, 3, 8];
    let mut worst: Vec<(String, f64, usize)> = Vec::new();

    for (i, copy) in [true, false].into_iter().enumerate() {
        let mut store = ParamStore::new();
        let g = Generator::init(tiny_generator(copy), &mut store, &mut seeded_rng(40 + i as u64, "init")).unwrap();
        let plan = Unroll { min_steps: 4, max_len: 4 };

        // (a) joint encoder + generator + mixture loss over arbitrary weighted targets
        let trace = g.forward(&store, &tokens, &table, Dropout::Off, plan, None).unwrap();
        let inputs = trace.inputs();
        let targets: StepTargets = vec![
            vec![(0, 1.0)],
            vec![(3, 1.0), (2, -0.3)],
            vec![(5, 0.8)],
            vec![(g.config().stop_id(), 1.0), (g.config().unk_id(), 0.2)],
        ];
        let mut a = store.clone();
        g.backward(&mut a, &trace, &targets);
        let r = finite_diff_check(
            |st| Generator::targets_loss(&g.forward(st, &tokens, &table, Dropout::Off, plan, Some(&inputs)).unwrap(), &targets),
            &a,
            1e-6,
            300,
            1,
        );
        worst.push((format!("joint copy={copy}"), r.max_relative_error, r.checked));

        // (b) PLA loss through the assignment found at the base point, inputs held fixed
        let gold = [0, 3, 5];
        let probs: Vec<&[f64]> = trace.steps.iter().map(|s| s.mixture.probs.as_slice()).collect();
        let alignment = pla_align(&probs, &trace.choices(), &gold, gold.len()).unwrap();
        let stop = g.config().stop_id();
        let pla = pla_targets(&alignment, trace.steps.len(), stop);
        let mut b = store.clone();
        g.backward(&mut b, &trace, &pla);
        let r = finite_diff_check(
            |st| {
                let tr = g.forward(st, &tokens, &table, Dropout::Off, plan, Some(&inputs)).unwrap();
                let p: Vec<&[f64]> = tr.steps.iter().map(|s| s.mixture.probs.as_slice()).collect();
                pla_loss(&p, &alignment, stop)
            },
            &b,
            1e-6,
            300,
            2,
        );
        worst.push((format!("pla copy={copy}"), r.max_relative_error, r.checked));
    }

    // (c) discriminator
    let cfg = DiscriminatorConfig {
        num_codes: 6,
        code_dim: 3,
        hidden: 4,
        repr_dim: 5,
        candidate: CandidateActivation::Tanh,
    };
    let mut store = ParamStore::new();
    let d = Discriminator::init(cfg, &mut store, &mut seeded_rng(44, "init")).unwrap();
    let mut rng = seeded_rng(45, "x");
    let reps: Vec<Vec<f64>> = (0..2).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let mut batch: Vec<LabeledPrefix> = split_prefixes(&[0, 3, 5], 6, PathTag::Positive, 0);
    batch.extend(split_prefixes(&[2, 1, 4, 0], 6, PathTag::Negative, 1));
    d.loss_and_backward(&mut store, &batch, &reps).unwrap();
    let r = finite_diff_check(|st| d.loss(st, &batch, &reps).unwrap(), &store, 1e-6, 300, 3);
    worst.push(("discriminator".into(), r.max_relative_error, r.checked));

    let secs = start.elapsed().as_secs_f64();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let min_checked = worst.iter().map(|w| w.2).min().unwrap_or(0);
    let parts: Vec<String> = worst.iter().map(|(n, e, c)| format!("{n} {e:.1e} over {c}")).collect();
    outcome(
        max <= 1e-4 && min_checked >= 100 && secs < 30.0,
        format!("{}; {secs:.2}s", parts.join(", ")),
    )
}

fn mixture_validity() -> Outcome {
    let table = tiny_table();
    let mut rng = seeded_rng(2, "draws");
    let mut worst_sum = 0.0f64;
    let mut stray_copy = 0usize;
    for draw in 0..1000u64 {
        let mut store = ParamStore::new();
        let g = Generator::init(tiny_generator(true), &mut store, &mut seeded_rng(draw, "init")).unwrap();
        for s in store.slots().map(|s| s.name().to_string()).collect::<Vec<_>>() {
            let id = store.require(&s).unwrap();
            let scale = rng.gen_range(0.1..4.0);
            for v in store.value_mut(id).data_mut() {
                *v = rng.gen_range(-scale..scale);
            }
        }
        let h: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let prev = rng.gen_range(0..8);
        let (m, _) = g.mixture_probability(&store, &h, prev, &table);
        worst_sum = worst_sum.max((m.probs.iter().sum::<f64>() - 1.0).abs());
        let allowed: &[usize] = if prev < 6 { table.vocab(prev) } else { &[] };
        stray_copy += m
            .copy_mass
            .iter()
            .enumerate()
            .filter(|&(c, &p)| p != 0.0 && !allowed.contains(&c))
            .count();
    }
    let counting = mix_scores(&[0.0; 5], &[1, 3], &[0.0, 0.0]);
    let counting_ok = [0, 2, 4].iter().all(|&c| counting.probs[c] == 1.0 / 7.0)
        && [1, 3].iter().all(|&c| counting.probs[c] == 2.0 / 7.0);
    outcome(
        worst_sum <= 1e-9 && stray_copy == 0 && counting_ok,
        format!("max |sum-1| {worst_sum:.1e}, stray copy entries {stray_copy}, counting case exact: {counting_ok}"),
    )
}

fn brute_force(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
        if row == cost.len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                best = best.min(cost[row][c] + go(cost, row + 1, used));
                used[c] = false;
            }
        }
        best
    }
    go(cost, 0, &mut vec![false; cost.len()])
}

fn assignment_optimality() -> Outcome {
    let mut rng = seeded_rng(3, "instances");
    let mut mismatches = 0;
    for _ in 0..500 {
        let n = rng.gen_range(1..=7);
        // small integer costs make ties common and keep sums exact
        let cost: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.gen_range(0..6) as f64).collect())
            .collect();
        let labels: Vec<usize> = (0..n).collect();
        let t = hungarian_assign(&cost, &vec![None; n], &labels).unwrap();
        if t.total_cost(&cost) != brute_force(&cost) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} of 500 instances differ from the brute-force optimum"))
}

fn pairwise_auc(pairs: &[(f64, bool)]) -> Option<f64> {
    let pos: Vec<f64> = pairs.iter().filter(|p| p.1).map(|p| p.0).collect();
    let neg: Vec<f64> = pairs.iter().filter(|p| !p.1).map(|p| p.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &q in &neg {
            wins += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

fn metric_oracles() -> Outcome {
    let mut rng = seeded_rng(4, "metrics");
    let mut auc_err = 0.0f64;
    let mut f1_err = 0.0f64;
    for _ in 0..200 {
        let n_codes = rng.gen_range(2..7);
        let records: Vec<PredictionRecord> = (0..rng.gen_range(2..12))
            .map(|doc| {
                let gold: Vec<usize> = (0..n_codes).filter(|_| rng.gen_bool(0.4)).collect();
                let pred: Vec<usize> = (0..n_codes).filter(|_| rng.gen_bool(0.4)).collect();
                let scores: BTreeMap<usize, f64> =
                    (0..n_codes).map(|c| (c, (rng.gen_range(0..5) as f64) / 4.0)).collect();
                PredictionRecord::new(doc, pred, gold, scores)
            })
            .collect();
        let got = auc(&records, n_codes);
        let pooled: Vec<(f64, bool)> = (0..n_codes)
            .flat_map(|c| records.iter().map(move |r| (r.score(c), r.gold.contains(&c))))
            .collect();
        let per_label: Vec<f64> = (0..n_codes)
            .filter_map(|c| pairwise_auc(&records.iter().map(|r| (r.score(c), r.gold.contains(&c))).collect::<Vec<_>>()))
            .collect();
        let want_macro = (!per_label.is_empty()).then(|| per_label.iter().sum::<f64>() / per_label.len() as f64);
        for (a, b) in [(got.micro, pairwise_auc(&pooled)), (got.macro_, want_macro)] {
            auc_err = auc_err.max(match (a, b) {
                (Some(a), Some(b)) => (a - b).abs(),
                (None, None) => 0.0,
                _ => f64::INFINITY,
            });
        }
        let mm = micro_macro_prf(&records);
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for r in &records {
            tp += r.pred.iter().filter(|c| r.gold.contains(c)).count();
            fp += r.pred.iter().filter(|c| !r.gold.contains(c)).count();
            fn_ += r.gold.iter().filter(|c| !r.pred.contains(c)).count();
        }
        let pooled_f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        f1_err = f1_err
            .max((pooled_f1 - mm.micro.f1).abs())
            .max((harmonic(mm.micro.precision, mm.micro.recall) - mm.micro.f1).abs());
    }
    let table = ComplicationTable::from_pairs(5, [(0, 1, 3.0)]).unwrap();
    let rec = PredictionRecord::new(0, vec![0, 1, 2], vec![0], BTreeMap::new());
    let ratio = complication_ratio(&[rec], &table);
    outcome(
        auc_err <= 1e-12 && f1_err <= 1e-12 && ratio == Some(1.0 / 3.0),
        format!("auc max error {auc_err:.1e}, micro F1 identity error {f1_err:.1e}, 3-prediction ratio {ratio:?}"),
    )
}

struct AblationRun {
    seed: u64,
    complication: [f64; 2],
    base_rate: f64,
    full_report: TrainReport,
    top2_baseline: f64,
    secs: [f64; 2],
}

fn ablation_runs() -> Vec<AblationRun> {
    SEEDS
        .iter()
        .map(|&seed| {
            let desk = desk_corpus(seed);
            let mut complication = [0.0; 2];
            let mut secs = [0.0; 2];
            let mut full_report = None;
            for (k, no_copy) in [false, true].into_iter().enumerate() {
                let start = Instant::now();
                let (model, report) = train(
                    ModelConfig::desk(desk.vocab, CODES),
                    &desk_train_config(seed, no_copy, false),
                    data(&desk),
                )
                .unwrap();
                let records = model.predict(&desk.documents, &desk.split.test, &desk.table, MAX_LEN).unwrap();
                secs[k] = start.elapsed().as_secs_f64();
                complication[k] = complication_ratio(&records, &desk.table).unwrap_or(0.0);
                if !no_copy {
                    full_report = Some(report);
                }
            }
            let train_docs: Vec<EhrDocument> = desk.split.train.iter().map(|&i| desk.documents[i].clone()).collect();
            let top2 = top_k_codes(&train_docs, 2);
            let baseline: Vec<PredictionRecord> = desk
                .split
                .validation
                .iter()
                .map(|&i| PredictionRecord::new(i, top2.clone(), desk.documents[i].gold_codes.clone(), BTreeMap::new()))
                .collect();
            AblationRun {
                seed,
                complication,
                base_rate: random_complication_rate(&desk.table),
                full_report: full_report.unwrap(),
                top2_baseline: jaccard(&baseline).unwrap(),
                secs,
            }
        })
        .collect()
}

fn directional_ablation(runs: &[AblationRun]) -> Outcome {
    let n = runs.len() as f64;
    let full = runs.iter().map(|r| r.complication[0]).sum::<f64>() / n;
    let no_copy = runs.iter().map(|r| r.complication[1]).sum::<f64>() / n;
    let base = runs.iter().map(|r| r.base_rate).sum::<f64>() / n;
    let slowest = runs.iter().flat_map(|r| r.secs).fold(0.0, f64::max);
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("s{} {:.3}/{:.3}", r.seed, r.complication[0], r.complication[1]))
        .collect();
    outcome(
        full > no_copy && full > base && slowest < 600.0,
        format!(
            "mean complication full {full:.4} vs no_copy {no_copy:.4}, base rate {base:.4}; slowest run {slowest:.0}s; {}",
            per_seed.join(" ")
        ),
    )
}

fn learning_sanity(run: &AblationRun) -> Outcome {
    let losses: Vec<f64> = run.full_report.epochs.iter().take(5).map(|e| e.generator_mle).collect();
    let violations = losses.windows(2).filter(|w| w[1] >= w[0]).count();
    let val = run.full_report.best_val_jaccard;
    outcome(
        losses.len() == 5 && violations <= 1 && val >= run.top2_baseline + 0.05,
        format!(
            "first 5 pretraining losses {:?} ({violations} non-decreasing); validation jaccard {val:.4} vs top-2 baseline {:.4}",
            losses.iter().map(|l| (l * 1e4).round() / 1e4).collect::<Vec<_>>(),
            run.top2_baseline
        ),
    )
}

fn adversarial_sanity() -> Outcome {
    let desk = desk_corpus(1);
    let cfg = desk_train_config(1, false, false);
    let model = Model::init(ModelConfig::desk(desk.vocab, CODES), cfg.seed).unwrap();
    let mut trainer = Trainer::new(model, cfg.clone(), data(&desk)).unwrap();
    for _ in 0..5 {
        trainer.pretrain_epoch().unwrap();
    }
    let frozen = trainer.model.gen_store.clone();
    let mut ids = desk.split.train.clone();
    ids.shuffle(&mut seeded_rng(1, "acceptance"));
    let mut crossed = None;
    let mut last = f64::NAN;
    for (update, batch) in ids.chunks(cfg.batch_size).cycle().take(200).enumerate() {
        let rollouts: Vec<_> = batch.iter().map(|&i| trainer.rollout(i, true).unwrap()).collect();
        last = trainer.discriminator_update(&rollouts).unwrap();
        if last < std::f64::consts::LN_2 {
            crossed = Some(update + 1);
            break;
        }
    }
    let generator_frozen = trainer.model.gen_store.values_equal(&frozen);

    let cfg = desk_train_config(1, false, true);
    let mut short = cfg.clone();
    short.pretrain_epochs = 1;
    short.max_iterations = 2;
    let mut model_cfg = ModelConfig::desk(desk.vocab, CODES);
    model_cfg.generator.copy = true;
    let before = Model::init(model_cfg.clone(), short.seed).unwrap().disc_store;
    let (after, _) = train(model_cfg, &short, data(&desk)).unwrap();
    let isolated = after.disc_store.values_equal(&before);
    outcome(
        crossed.is_some() && generator_frozen && isolated,
        format!(
            "discriminator loss below ln 2 after {} updates (last {last:.4}); generator untouched: {generator_frozen}; no_arl discriminator bit-identical: {isolated}",
            crossed.map_or("no".to_string(), |u| u.to_string())
        ),
    )
}

fn determinism() -> Outcome {
    let run = || {
        let cfg = CorpusConfig::desk(300, 8, 9);
        let corpus = generate_synthetic_corpus(&cfg).unwrap();
        let mut corpus_bytes = Vec::new();
        write_corpus(&corpus.documents, &mut corpus_bytes).unwrap();
        let split = split_dataset(corpus.documents.len(), SplitRatio::default(), 9).unwrap();
        let table = build_complication_table(Split::select(&corpus.documents, &split.train), 8, 2.0, 5).unwrap();
        let train_cfg = TrainConfig {
            pretrain_epochs: 2,
            max_iterations: 2,
            seed: 9,
            adam: AdamConfig {
                learning_rate: LEARNING_RATE,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let data = TrainData {
            documents: &corpus.documents,
            split: &split,
            table: &table,
        };
        let (model, _) = train(ModelConfig::desk(corpus.tokens.len(), 8), &train_cfg, data).unwrap();
        let mut ckpt = Vec::new();
        Checkpoint::from_model(&model, "fingerprint", true).write(&mut ckpt).unwrap();
        let records = model.predict(&corpus.documents, &split.test, &table, MAX_LEN).unwrap();
        let report = MetricReport::compute(&records, &table, 8).unwrap().to_table();
        (corpus_bytes, ckpt, report)
    };
    let (a, b) = (run(), run());
    let same = [a.0 == b.0, a.1 == b.1, a.2 == b.2];
    outcome(
        same.iter().all(|&s| s),
        format!("corpus identical: {}, checkpoint identical: {}, metric report identical: {}", same[0], same[1], same[2]),
    )
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "gradient correctness", gradient_correctness()),
        (2, "mixture validity", mixture_validity()),
        (3, "assignment optimality", assignment_optimality()),
        (4, "metric oracles", metric_oracles()),
    ];
    let runs = ablation_runs();
    results.push((5, "directional ablation", directional_ablation(&runs)));
    results.push((6, "learning sanity", learning_sanity(&runs[0])));
    results.push((7, "adversarial sanity", adversarial_sanity()));
    results.push((8, "determinism", determinism()));

    let mut unexpected = 0;
    for (n, name, o) in &results {
        let status = if o.pass { "PASS" } else { "FAIL" };
        let note = match (o.pass, KNOWN_SHORTFALLS.contains(n)) {
            (false, true) => " (known shortfall)",
            (true, true) => " (listed as a known shortfall)",
            _ => "",
        };
        println!("criterion {n} [{status}]{note} {name}: {}", o.detail);
        if !o.pass && !KNOWN_SHORTFALLS.contains(n) {
            unexpected += 1;
        }
    }
    if unexpected > 0 {
        eprintln!("{unexpected} criteria failed");
        std::process::exit(1);
    }
}
