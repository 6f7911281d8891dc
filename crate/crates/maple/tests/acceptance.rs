//! End-to-end acceptance suite. Each test prints one PASS line; a failure
//! panics with the offending values.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use maple::autodiff::Tape;
use maple::corpus::{AspectInventory, Tokenizer, TrainingExample, WhitespaceTokenizer};
use maple::inference::{select_elbow_k, InferenceEngine, Strategy};
use maple::metrics::{aspect_ranking_metrics, compute_report, EvalCorpus, EvalPair};
use maple::model::{
    db_loss, db_loss_batch, db_loss_on_tape, DbLossConfig, MapleModel, ModelConfig,
};
use maple::rag::{
    explain_with_reader, retrieve_reviews, EchoReader, HashingEncoder, PoolScope, ReviewPool,
};
use maple::synth::{affinity_corpus, overfit_corpus};
use maple::training::{dedup_pairs, train_stage1, train_stage2, TrainConfig};

// ---------- 1. loss closed forms ----------

#[test]
fn loss_closed_forms() {
    let start = Instant::now();
    let c = 6usize;
    let mut config = DbLossConfig::with_defaults(c);
    config.nu = vec![0.05; c];
    let logits = vec![0.05; c]; // delta = 0 everywhere
    let ones = vec![1.0; c];
    let zeros = vec![0.0; c];
    let all_pos = db_loss(&logits, &ones, &ones, &config).unwrap();
    let all_neg = db_loss(&logits, &zeros, &ones, &config).unwrap();
    let ln2 = std::f64::consts::LN_2;
    assert!((all_pos - ln2).abs() < 1e-6, "all-positive {all_pos} vs {ln2}");
    assert!(
        (all_neg - ln2 / config.lambda).abs() < 1e-6,
        "all-negative {all_neg} vs {}",
        ln2 / config.lambda
    );

    // 100 randomized cases against a direct scalar evaluation
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for case in 0..100 {
        let n = rng.gen_range(2..=8);
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..2.0)).collect();
        let cfg = DbLossConfig {
            lambda: rng.gen_range(0.5..4.0),
            nu: (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            ..DbLossConfig::with_defaults(n)
        };
        let got = db_loss(&z, &y, &r, &cfg).unwrap();
        let mut oracle = 0.0;
        for i in 0..n {
            let delta = z[i] - cfg.nu[i];
            oracle += r[i]
                * (y[i] * (1.0 + (-delta).exp()).ln()
                    + (1.0 - y[i]) * (1.0 + (cfg.lambda * delta).exp()).ln() / cfg.lambda);
        }
        oracle /= n as f64;
        assert!((got - oracle).abs() < 1e-6, "case {case}: {got} vs {oracle}");
    }
    assert!(start.elapsed().as_secs_f64() < 1.0, "took {:?}", start.elapsed());
    println!("PASS: db_loss matches closed forms and the scalar oracle to 1e-6");
}

// ---------- 2. gradient checks ----------

fn tiny_model(seed: u64) -> MapleModel {
    let inventory = AspectInventory::new(
        (0..6).map(|c| format!("a{c}")).collect(),
    )
    .unwrap();
    let tokenizer = WhitespaceTokenizer::fit([
        "sharp cheddar plate",
        "warm sourdough loaf",
        "briny oyster trio",
        "quiet corner booth",
    ]);
    let config = ModelConfig {
        d: 8,
        layers: 2,
        heads: 2,
        ff_mult: 2,
        head_hidden: vec![4],
        max_len: 8,
    };
    MapleModel::new(
        inventory,
        tokenizer,
        vec!["u0".into(), "u1".into()],
        vec!["i0".into(), "i1".into()],
        config,
        seed,
    )
}

fn tiny_batch(model: &MapleModel) -> Vec<TrainingExample> {
    let texts = ["sharp cheddar plate", "warm sourdough loaf", "briny oyster trio"];
    let ids = [("u0", "i0", 0usize), ("u1", "i1", 3), ("u0", "i1", 5)];
    texts
        .iter()
        .zip(ids.iter())
        .map(|(text, (u, i, c))| {
            let mut tokens = vec![model.tokenizer.bos_id()];
            tokens.extend(model.tokenizer.encode(text));
            tokens.push(model.tokenizer.eos_id());
            TrainingExample {
                user: (*u).into(),
                item: (*i).into(),
                category: *c,
                text: text.to_string(),
                tokens,
                gt_features: vec![],
            }
        })
        .collect()
}

fn sample_entries(shape: (usize, usize)) -> Vec<(usize, usize)> {
    let mut entries = vec![(0, 0), (shape.0 / 2, shape.1 / 2), (shape.0 - 1, shape.1 - 1)];
    entries.dedup();
    entries
}

fn check_gradients(
    model: &mut MapleModel,
    analytic: &HashMap<String, Array2<f64>>,
    mut forward: impl FnMut(&MapleModel) -> f64,
    label: &str,
) {
    let h = 1e-5;
    let names: Vec<String> = analytic.keys().cloned().collect();
    for name in names {
        let shape = analytic[&name].dim();
        for idx in sample_entries(shape) {
            let mut original = 0.0;
            model.for_each_param_mut(|n, m| {
                if n == name {
                    original = m[idx];
                    m[idx] = original + h;
                }
            });
            let up = forward(model);
            model.for_each_param_mut(|n, m| {
                if n == name {
                    m[idx] = original - h;
                }
            });
            let down = forward(model);
            model.for_each_param_mut(|n, m| {
                if n == name {
                    m[idx] = original;
                }
            });
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[&name][idx];
            let scale = a.abs().max(numeric.abs());
            let ok = if scale > 1e-6 {
                (a - numeric).abs() <= 1e-4 * scale.max(1.0)
            } else {
                (a - numeric).abs() <= 1e-7
            };
            assert!(ok, "{label} grad mismatch at {name}{idx:?}: {a} vs {numeric}");
        }
    }
}

#[test]
fn gradient_checks() {
    let start = Instant::now();
    let mut model = tiny_model(17);
    let batch = tiny_batch(&model);

    // generation loss
    let encoded: Vec<_> = batch.iter().map(|e| model.encode_example(e).unwrap()).collect();
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let loss = model.generation_loss_on_tape(&mut tape, &vars, &encoded).unwrap();
    tape.backward(loss);
    let analytic: HashMap<String, Array2<f64>> = vars
        .iter()
        .map(|(n, &v)| (n.clone(), tape.grad(v).clone()))
        .collect();
    check_gradients(&mut model, &analytic, |m| m.generation_loss(&batch).unwrap(), "L_T");

    // balanced aspect loss through the head
    let pairs = [(0usize, 0usize), (0, 1), (1, 0)];
    let labels = Array2::from_shape_fn((3, 6), |(k, c)| f64::from((k + c) % 3 == 0));
    let weights = Array2::from_shape_fn((3, 6), |(k, c)| 0.2 + 0.1 * ((k + c) % 4) as f64);
    let config = DbLossConfig::with_defaults(6);
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let logits = model.aspect_logits_on_tape(&mut tape, &vars, &pairs);
    let loss = db_loss_on_tape(&mut tape, logits, &labels, &weights, &config);
    tape.backward(loss);
    let analytic: HashMap<String, Array2<f64>> = vars
        .iter()
        .map(|(n, &v)| (n.clone(), tape.grad(v).clone()))
        .collect();
    let forward_db = |m: &MapleModel| {
        let names = [("u0", "i0"), ("u0", "i1"), ("u1", "i0")];
        let mut z = Array2::zeros((3, 6));
        for (k, (u, i)) in names.iter().enumerate() {
            let row = m.aspect_logits(u, i).unwrap();
            for (c, v) in row.into_iter().enumerate() {
                z[[k, c]] = v;
            }
        }
        db_loss_batch(&z, &labels, &weights, &config).unwrap()
    };
    check_gradients(&mut model, &analytic, forward_db, "L_DB");

    // head activations alone: sum of sigmoid scores
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let logits = model.aspect_logits_on_tape(&mut tape, &vars, &pairs);
    let probs = tape.sigmoid(logits);
    let loss = tape.sum_all(probs);
    tape.backward(loss);
    let analytic: HashMap<String, Array2<f64>> = vars
        .iter()
        .map(|(n, &v)| (n.clone(), tape.grad(v).clone()))
        .collect();
    let forward_head = |m: &MapleModel| {
        [("u0", "i0"), ("u0", "i1"), ("u1", "i0")]
            .iter()
            .map(|(u, i)| m.aspect_scores(u, i).unwrap().scores.iter().sum::<f64>())
            .sum()
    };
    check_gradients(&mut model, &analytic, forward_head, "head");

    assert!(start.elapsed().as_secs_f64() < 60.0, "took {:?}", start.elapsed());
    println!("PASS: analytic gradients match central differences for L_T, L_DB and the head");
}

// ---------- 3. overfit memorization ----------

#[test]
fn overfit_memorization() {
    let start = Instant::now();
    let corpus = overfit_corpus(20, 10, 5);
    let model_config = ModelConfig {
        d: 32,
        layers: 2,
        heads: 2,
        ff_mult: 2,
        head_hidden: vec![16],
        max_len: 20,
    };
    let mut model = MapleModel::new(
        corpus.inventory.clone(),
        corpus.tokenizer.clone(),
        corpus.users.clone(),
        corpus.items.clone(),
        model_config,
        7,
    );
    let config = TrainConfig {
        lr: 0.003,
        batch_size: 32,
        stage1_max_epochs: 300,
        stage1_patience: 40,
        seed: 7,
        ..TrainConfig::default()
    };
    // deliberate overfit: validation set is the training set
    train_stage1(&mut model, &corpus.examples, &corpus.examples, &config).unwrap();

    let engine = InferenceEngine::new(&model, BTreeMap::new(), BTreeMap::new());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut hits = 0usize;
    for ex in &corpus.examples {
        let (_, out) = engine
            .explain(&ex.user, &ex.item, Strategy::GroundTruth, Some(ex.category), 20, &mut rng)
            .unwrap();
        if out.text == ex.text {
            hits += 1;
        }
    }
    let gt_fmr = hits as f64 / corpus.examples.len() as f64;
    assert!(gt_fmr >= 0.9, "train-set reproduction rate {gt_fmr} < 0.9");
    assert!(start.elapsed().as_secs() < 600, "took {:?}", start.elapsed());
    println!("PASS: ground-truth-conditioned greedy decoding reproduces {gt_fmr:.3} of training segments");
}

// ---------- 4. aspect-head learning with a long tail ----------

#[test]
fn aspect_head_learning() {
    let start = Instant::now();
    let corpus = affinity_corpus();
    let n_aspect = corpus.inventory.n_aspect();
    let model_config = ModelConfig {
        d: 16,
        layers: 1,
        heads: 2,
        ff_mult: 2,
        head_hidden: vec![32],
        max_len: 20,
    };
    let mut model = MapleModel::new(
        corpus.inventory.clone(),
        corpus.tokenizer.clone(),
        corpus.users.clone(),
        corpus.items.clone(),
        model_config,
        21,
    );
    let config = TrainConfig {
        lr: 0.003,
        batch_size: 32,
        alpha: 1.0,
        stage2_max_epochs: 80,
        stage2_patience: 20,
        seed: 21,
        ..TrainConfig::default()
    };
    let stage2 = dedup_pairs(&corpus.train, n_aspect);
    train_stage2(&mut model, &stage2, &corpus.valid, &config).unwrap();

    let mut test_pairs: BTreeSet<(String, String)> = BTreeSet::new();
    for ex in &corpus.test {
        test_pairs.insert((ex.user.clone(), ex.item.clone()));
    }
    let mut predictions = Vec::new();
    let mut truths = Vec::new();
    let mut rare_total = 0usize;
    let mut rare_hits = 0usize;
    for (user, item) in &test_pairs {
        let scores = model.aspect_scores(user, item).unwrap().scores;
        let mut order: Vec<usize> = (0..n_aspect).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let truth = corpus.user_labels[user].clone();
        for &rare in &corpus.rare_classes {
            if truth.contains(&rare) {
                rare_total += 1;
                if order[..3].contains(&rare) {
                    rare_hits += 1;
                }
            }
        }
        predictions.push(order);
        truths.push(truth);
    }
    let ranking = aspect_ranking_metrics(&predictions, &truths, 3);
    let baseline = 3.0 * corpus.average_positives() / n_aspect as f64;
    assert!(
        ranking.hr_at_k >= 2.0 * baseline,
        "HR@3 {} below 2x baseline {}",
        ranking.hr_at_k,
        2.0 * baseline
    );
    assert!(rare_total > 0);
    let rare_recall = rare_hits as f64 / rare_total as f64;
    assert!(rare_recall > 0.0, "rare-class recall is zero");
    assert!(start.elapsed().as_secs() < 600, "took {:?}", start.elapsed());
    println!(
        "PASS: held-out HR@3 {:.3} >= 2x baseline {:.3}, rare-class recall {:.3} > 0",
        ranking.hr_at_k,
        2.0 * baseline,
        rare_recall
    );
}

// ---------- 5. sampling contract ----------

#[test]
fn sampling_distribution() {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let start = Instant::now();
    let model = tiny_model(29);
    let engine = InferenceEngine::new(&model, BTreeMap::new(), BTreeMap::new());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let expected = engine
        .recommend_aspects("u0", "i0", Strategy::Supervised(1), None, &mut rng)
        .unwrap()
        .weights;

    const DRAWS: usize = 100_000;
    let mut counts = vec![0usize; expected.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..DRAWS {
        let sel = engine
            .recommend_aspects("u0", "i0", Strategy::Supervised(1), None, &mut rng)
            .unwrap();
        counts[sel.chosen[0]] += 1;
    }
    let mut chi2 = 0.0;
    let mut df = 0usize;
    for (c, (&n, &w)) in counts.iter().zip(expected.iter()).enumerate() {
        let freq = n as f64 / DRAWS as f64;
        assert!(
            (freq - w).abs() <= 0.01,
            "category {c}: frequency {freq} vs weight {w}"
        );
        if w > 0.0 {
            let e = w * DRAWS as f64;
            chi2 += (n as f64 - e) * (n as f64 - e) / e;
            df += 1;
        } else {
            assert_eq!(n, 0, "sampled a zero-weight category {c}");
        }
    }
    let critical = ChiSquared::new((df - 1) as f64).unwrap().inverse_cdf(0.999);
    assert!(chi2 < critical, "chi-square {chi2} exceeds critical {critical}");
    assert!(start.elapsed().as_secs() < 10, "took {:?}", start.elapsed());
    println!("PASS: 100k draws match the trimmed weights (chi-square {chi2:.2} < {critical:.2})");
}

// ---------- 6. metrics oracle equivalence ----------

struct OracleWorld {
    pairs: Vec<EvalPair>,
    menus: BTreeMap<String, BTreeSet<String>>,
    per_category: BTreeMap<usize, BTreeSet<String>>,
    counts: BTreeMap<usize, usize>,
}

fn tokens(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

fn mentions(text: &str, feature: &str) -> bool {
    tokens(text).contains(&feature)
}

fn oracle_report(w: &OracleWorld) -> (f64, f64, f64, f64, f64, f64, f64, f64, f64, f64, f64, f64, f64) {
    let n = w.pairs.len();
    // iFMR / GT-FMR
    let mut menu_hits = 0;
    let mut gt_hits = 0;
    for p in &w.pairs {
        if let Some(menu) = w.menus.get(&p.item) {
            if menu.iter().any(|f| mentions(&p.generated, f)) {
                menu_hits += 1;
            }
        }
        if p.gt_features.iter().any(|f| mentions(&p.generated, f)) {
            gt_hits += 1;
        }
    }
    let ifmr = menu_hits as f64 / n as f64;
    let gt_fmr = gt_hits as f64 / n as f64;

    // coverage; items in first-appearance order so the mean sums identically
    let mut items: Vec<&String> = Vec::new();
    for p in &w.pairs {
        if !items.contains(&&p.item) {
            items.push(&p.item);
        }
    }
    let mut sampled: BTreeSet<&String> = BTreeSet::new();
    for item in &items {
        if let Some(menu) = w.menus.get(*item) {
            sampled.extend(menu.iter());
        }
    }
    let matched: BTreeSet<&String> = sampled
        .iter()
        .copied()
        .filter(|f| w.pairs.iter().any(|p| mentions(&p.generated, f)))
        .collect();
    let fcr = if sampled.is_empty() {
        0.0
    } else {
        matched.len() as f64 / sampled.len() as f64
    };
    let mut ratios = Vec::new();
    for item in &items {
        let Some(menu) = w.menus.get(*item).filter(|m| !m.is_empty()) else {
            continue;
        };
        let hit = menu
            .iter()
            .filter(|f| {
                w.pairs
                    .iter()
                    .filter(|p| p.item == **item)
                    .any(|p| mentions(&p.generated, f))
            })
            .count();
        ratios.push(hit as f64 / menu.len() as f64);
    }
    let ifcr = if ratios.is_empty() {
        0.0
    } else {
        ratios.iter().sum::<f64>() / ratios.len() as f64
    };
    let mut by_freq: Vec<(usize, usize)> = w.counts.iter().map(|(&c, &k)| (c, k)).collect();
    by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let order: Vec<usize> = by_freq.into_iter().map(|(c, _)| c).collect();
    let restricted = |cats: &[usize]| {
        let mut pool: BTreeSet<&String> = BTreeSet::new();
        for c in cats {
            if let Some(fs) = w.per_category.get(c) {
                pool.extend(fs.iter().filter(|f| sampled.contains(f)));
            }
        }
        if pool.is_empty() {
            0.0
        } else {
            pool.iter().filter(|f| matched.contains(**f)).count() as f64 / pool.len() as f64
        }
    };
    let head: Vec<usize> = order.iter().copied().take(5).collect();
    let tail: Vec<usize> = order.iter().rev().copied().take(5).collect();
    let head_fcr = restricted(&head);
    let tail_fcr = restricted(&tail);

    // uniqueness
    let distinct: BTreeSet<&String> = w.pairs.iter().map(|p| &p.generated).collect();
    let usr = distinct.len() as f64 / n as f64;
    let grouped = |key: fn(&EvalPair) -> &String| {
        let mut groups: BTreeMap<&String, Vec<&String>> = BTreeMap::new();
        for p in &w.pairs {
            groups.entry(key(p)).or_default().push(&p.generated);
        }
        groups
            .values()
            .map(|g| {
                let set: BTreeSet<&&String> = g.iter().collect();
                set.len() as f64 / g.len() as f64
            })
            .sum::<f64>()
            / groups.len() as f64
    };
    let uusr = grouped(|p| &p.user);
    let iusr = grouped(|p| &p.item);

    // distinct-n and entropy with string-keyed maps
    let gram_counts = |n: usize| {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut total = 0usize;
        for p in &w.pairs {
            let toks = tokens(&p.generated);
            if toks.len() < n {
                continue;
            }
            for win in toks.windows(n) {
                *counts.entry(win.join("\u{1f}")).or_insert(0) += 1;
                total += 1;
            }
        }
        (counts, total)
    };
    let dn = |n: usize| {
        let (counts, total) = gram_counts(n);
        if total == 0 {
            0.0
        } else {
            counts.len() as f64 / total as f64
        }
    };
    let (uni, uni_total) = gram_counts(1);
    let entr = if uni_total == 0 {
        0.0
    } else {
        uni.values()
            .map(|&c| {
                let p = c as f64 / uni_total as f64;
                -p * p.log2()
            })
            .sum()
    };

    let bleu = oracle_bleu(&w.pairs);
    (
        ifmr, gt_fmr, fcr, ifcr, head_fcr, tail_fcr, usr, uusr, iusr, dn(2), dn(3), entr, bleu,
    )
}

fn oracle_bleu(pairs: &[EvalPair]) -> f64 {
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for p in pairs {
        let cand = tokens(&p.generated);
        cand_len += cand.len();
        let mut best = usize::MAX;
        for r in &p.references {
            let rl = tokens(r).len();
            let better = best == usize::MAX
                || rl.abs_diff(cand.len()) < best.abs_diff(cand.len())
                || (rl.abs_diff(cand.len()) == best.abs_diff(cand.len()) && rl < best);
            if better {
                best = rl;
            }
        }
        ref_len += best;
        for n in 1..=4usize {
            let mut cand_counts: BTreeMap<String, usize> = BTreeMap::new();
            if cand.len() >= n {
                for win in cand.windows(n) {
                    *cand_counts.entry(win.join("\u{1f}")).or_insert(0) += 1;
                }
            }
            let mut max_ref: BTreeMap<String, usize> = BTreeMap::new();
            for r in &p.references {
                let toks = tokens(r);
                let mut c: BTreeMap<String, usize> = BTreeMap::new();
                if toks.len() >= n {
                    for win in toks.windows(n) {
                        *c.entry(win.join("\u{1f}")).or_insert(0) += 1;
                    }
                }
                for (g, k) in c {
                    let slot = max_ref.entry(g).or_insert(0);
                    *slot = (*slot).max(k);
                }
            }
            for (g, k) in &cand_counts {
                matched[n - 1] += (*k).min(*max_ref.get(g).unwrap_or(&0));
            }
            total[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        if total[n] == 0 || matched[n] == 0 {
            return 0.0;
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln() / 4.0;
    }
    if cand_len == 0 {
        return 0.0;
    }
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    bp * log_sum.exp()
}

#[test]
fn metrics_oracle_equivalence() {
    let start = Instant::now();
    // every word passes the feature filter (>= 4 chars, no stop words)
    let vocab = [
        "chowder", "lobster", "patio", "waiter", "sorbet", "bagel", "tuna", "brisket",
    ];
    let inventory =
        AspectInventory::new((0..8).map(|c| format!("cat{c}")).collect()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    for round in 0..100 {
        let mut menus: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for i in 0..5 {
            let menu: BTreeSet<String> = vocab
                .iter()
                .filter(|_| rng.gen_bool(0.4))
                .map(|f| f.to_string())
                .collect();
            menus.insert(format!("i{i}"), menu);
        }
        let mut per_category: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for c in 0..8usize {
            per_category.insert(
                c,
                vocab
                    .iter()
                    .filter(|_| rng.gen_bool(0.3))
                    .map(|f| f.to_string())
                    .collect(),
            );
            counts.insert(c, rng.gen_range(0..100));
        }
        let n_pairs = rng.gen_range(1..=50);
        let mut pairs = Vec::new();
        for k in 0..n_pairs {
            let sentence = |rng: &mut ChaCha8Rng| {
                (0..rng.gen_range(3..8))
                    .map(|_| vocab[rng.gen_range(0..vocab.len())])
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let references: Vec<String> =
                (0..rng.gen_range(1..=2)).map(|_| sentence(&mut rng)).collect();
            pairs.push(EvalPair {
                user: format!("u{}", k % 7),
                item: format!("i{}", rng.gen_range(0..5)),
                generated: sentence(&mut rng),
                references,
                gt_features: vec![vocab[rng.gen_range(0..vocab.len())].to_string()],
                gt_categories: BTreeSet::from([rng.gen_range(0..8)]),
            });
        }
        let mut features = maple::corpus::FeatureIndex::default();
        for (item, menu) in &menus {
            if !menu.is_empty() {
                features.global.extend(menu.iter().cloned());
                features.per_item.insert(item.clone(), menu.clone());
            }
        }
        features.per_category = per_category.clone();
        features.category_counts = counts.clone();
        let corpus = EvalCorpus {
            pairs: pairs.clone(),
            features,
            inventory: inventory.clone(),
        };
        let report = compute_report(&corpus);

        let world = OracleWorld {
            pairs,
            menus: menus
                .into_iter()
                .filter(|(_, m)| !m.is_empty())
                .collect(),
            per_category,
            counts,
        };
        let (ifmr, gt_fmr, fcr, ifcr, head_fcr, tail_fcr, usr, uusr, iusr, d2, d3, entr, bleu) =
            oracle_report(&world);
        assert_eq!(report.ifmr, ifmr, "round {round} iFMR");
        assert_eq!(report.gt_fmr, gt_fmr, "round {round} GT-FMR");
        assert_eq!(report.fcr, fcr, "round {round} FCR");
        assert_eq!(report.ifcr, ifcr, "round {round} iFCR");
        assert_eq!(report.head_fcr, head_fcr, "round {round} head FCR");
        assert_eq!(report.tail_fcr, tail_fcr, "round {round} tail FCR");
        assert_eq!(report.usr, usr, "round {round} USR");
        assert_eq!(report.uusr, uusr, "round {round} uUSR");
        assert_eq!(report.iusr, iusr, "round {round} iUSR");
        assert_eq!(report.distinct2, d2, "round {round} Distinct-2");
        assert_eq!(report.distinct3, d3, "round {round} Distinct-3");
        assert!((report.entr - entr).abs() < 1e-9, "round {round} ENTR");
        assert!((report.bleu4 - bleu).abs() < 1e-9, "round {round} BLEU-4");

        // ranking against a literal set-overlap oracle
        let preds: Vec<Vec<usize>> = (0..10)
            .map(|_| {
                let mut order: Vec<usize> = (0..8).collect();
                for i in (1..8).rev() {
                    order.swap(i, rng.gen_range(0..=i));
                }
                order
            })
            .collect();
        let truths: Vec<BTreeSet<usize>> = (0..10)
            .map(|_| (0..8).filter(|_| rng.gen_bool(0.25)).collect())
            .collect();
        let ranking = aspect_ranking_metrics(&preds, &truths, 3);
        let mut hits = 0usize;
        let mut f1_sum = 0.0;
        let mut counted = 0usize;
        for (p, t) in preds.iter().zip(truths.iter()) {
            if t.is_empty() {
                continue;
            }
            counted += 1;
            let top: BTreeSet<usize> = p.iter().copied().take(3).collect();
            let overlap = top.intersection(t).count() as f64;
            if overlap > 0.0 {
                hits += 1;
                let precision = overlap / top.len() as f64;
                let recall = overlap / t.len() as f64;
                f1_sum += 2.0 * precision * recall / (precision + recall);
            }
        }
        if counted > 0 {
            assert_eq!(ranking.hr_at_k, hits as f64 / counted as f64, "round {round} HR@3");
            assert_eq!(ranking.f1, f1_sum / counted as f64, "round {round} F1");
        }
    }
    assert!(start.elapsed().as_secs() < 60, "took {:?}", start.elapsed());
    println!("PASS: all report metrics equal the brute-force oracles on 100 random corpora");
}

// ---------- 7. elbow selection ----------

#[test]
fn elbow_selection() {
    let curve: BTreeMap<usize, f64> =
        [(1, 0.297), (2, 0.245), (3, 0.238), (4, 0.182)].into_iter().collect();
    let (k, flat) = select_elbow_k(&curve).unwrap();
    assert_eq!(k, 3);
    assert!(!flat);
    println!("PASS: elbow selection on the published BLEU-4 curve returns K=3");
}

// ---------- 8. RAG determinism ----------

#[test]
fn rag_determinism() {
    let start = Instant::now();
    let model = tiny_model(31);
    let user_history: BTreeMap<String, BTreeSet<usize>> =
        [("u0".to_string(), BTreeSet::from([0, 1]))].into_iter().collect();
    let item_history: BTreeMap<String, BTreeSet<usize>> =
        [("i0".to_string(), BTreeSet::from([0, 1, 2]))].into_iter().collect();
    let encoder = HashingEncoder::new(64);
    let user_pool = ReviewPool::build(
        PoolScope::User,
        vec![
            "sharp cheddar plate".into(),
            "quiet corner booth".into(),
        ],
        &encoder,
    );
    let item_pool = ReviewPool::build(
        PoolScope::Item,
        vec![
            "warm sourdough loaf".into(),
            "briny oyster trio".into(),
            "sharp cheddar plate".into(),
        ],
        &encoder,
    );
    let engine = InferenceEngine::new(&model, user_history, item_history);
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let transcript = explain_with_reader(
            &engine,
            "u0",
            "i0",
            Strategy::Supervised(2),
            None,
            8,
            &user_pool,
            &item_pool,
            2,
            &encoder,
            &EchoReader,
            &mut rng,
        )
        .unwrap();
        serde_json::to_string(&transcript).unwrap()
    };
    let first = run();
    let second = run();
    assert_eq!(first.as_bytes(), second.as_bytes(), "transcripts differ between runs");

    // exact-duplicate retrieval scores cosine 1 at rank 1
    let query = "briny oyster trio";
    let top = retrieve_reviews(query, &item_pool, 1, &encoder).unwrap();
    assert_eq!(top[0].text, query);
    assert!((top[0].similarity - 1.0).abs() < 1e-12);
    assert!(start.elapsed().as_secs() < 10, "took {:?}", start.elapsed());
    println!("PASS: retriever-reader transcripts are byte-identical and duplicate retrieval scores 1");
}

// ---------- 9. CLI end to end ----------

#[test]
fn cli_end_to_end() {
    let start = Instant::now();
    let bin = env!("CARGO_BIN_EXE_maple");
    let data = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/toy_reviews.jsonl");
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path().join("run");
    let config_path = dir.path().join("run.toml");
    std::fs::write(
        &config_path,
        format!(
            r#"
[paths]
data = "{data}"
work_dir = "{work}"

[corpus]
min_interactions = 5
folds = 2
seed = 42

[model]
d = 16
layers = 1
heads = 2
ff_mult = 2
head_hidden = [16]
max_len = 20

[train]
lr = 0.003
batch_size = 32
stage1_max_epochs = 10
stage1_patience = 5
stage2_max_epochs = 5
stage2_patience = 2
alpha = 0.01

[inference]
strategy = "supervised"
k = 3
retrieval_k = 5
encoder_dim = 64
"#,
            work = work.display(),
        ),
    )
    .unwrap();
    for step in ["prepare-data", "train", "generate", "evaluate"] {
        let out = std::process::Command::new(bin)
            .args(["--config", config_path.to_str().unwrap(), "--fold", "0", step])
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{step} failed: {}{}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(work.join("fold0/report.json")).unwrap())
            .unwrap();
    for key in [
        "iFMR", "FCR", "iFCR", "GT-FMR", "head FCR", "tail FCR", "USR", "uUSR", "iUSR",
        "Distinct-2", "Distinct-3", "ENTR", "BLEU-4", "HR@K", "F1", "latent MSE",
        "latent cosine",
    ] {
        assert!(
            report.get(key).map(|v| v.is_number()).unwrap_or(false),
            "report missing {key}"
        );
    }
    assert!(start.elapsed().as_secs() < 900, "took {:?}", start.elapsed());
    println!("PASS: CLI pipeline produced a fully populated report in {:?}", start.elapsed());
}
