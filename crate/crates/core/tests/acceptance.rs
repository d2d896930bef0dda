//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints one PASS/FAIL line; exits nonzero when any criterion fails.

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sgseq_core::codec::{parse_sequence, serialize_graph, SerializationConfig};
use sgseq_core::conversion::{convert_scores, CategoryScores, ConversionConfig};
use sgseq_core::decoder::{
    generate, hashed_vector, nucleus_filter, DecodeError, FeatureMatrix, GenerationConfig, SparseRow,
    Step, TokenScorer,
};
use sgseq_core::eval::{evaluate, load_seen_triplets, EvalConfig, Metric, Protocol};
use sgseq_core::fixture::{fixture_vocabulary, make_fixture, oracle_predictions, FixtureConfig, ENTITY_NAMES, PREDICATE_NAMES};
use sgseq_core::gradcheck::{run_gradcheck, Corruption, GradcheckConfig};
use sgseq_core::grounding::GroundingWeights;
use sgseq_core::io::{load_categories, load_scene_graphs};
use sgseq_core::model::{Box2, CategorySpace, SceneGraph};
use sgseq_core::pipeline::{run_pipeline, PipelineModel, SequenceSource};
use sgseq_core::postprocess::{
    expand_candidates, relation_nms, CandidateTriplet, EntityCandidate, PostprocessConfig, SpanSource,
};
use sgseq_core::tensor::Matrix;
use sgseq_core::tokenizer::{CategoryTokenTable, TokenId};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden")
}

// ------------------------------------------------------------------ 1

fn fixture_space() -> CategorySpace {
    CategorySpace::new(
        ENTITY_NAMES.iter().map(|s| s.to_string()).collect(),
        PREDICATE_NAMES.iter().map(|s| s.to_string()).collect(),
        vec![],
    )
    .unwrap()
}

fn random_box(rng: &mut ChaCha8Rng) -> Box2 {
    let x = rng.gen_range(0.0..0.7);
    let y = rng.gen_range(0.0..0.7);
    Box2::new(x, y, x + rng.gen_range(0.05..0.3), y + rng.gen_range(0.05..0.3))
}

fn random_graph(rng: &mut ChaCha8Rng, id: usize, space: &CategorySpace) -> SceneGraph {
    let mut g = SceneGraph::new(format!("g{id}"));
    let n = rng.gen_range(2..=6);
    for _ in 0..n {
        let c = rng.gen_range(0..space.num_entities());
        g.add_entity(c, random_box(rng), 1.0);
    }
    for _ in 0..rng.gen_range(1..=8) {
        let s = rng.gen_range(0..n);
        let mut o = rng.gen_range(0..n - 1);
        if o >= s {
            o += 1;
        }
        g.add_relation(s, rng.gen_range(0..space.num_predicates()), o, 1.0);
    }
    g
}

fn criterion_1() -> Outcome {
    let vocab = fixture_vocabulary();
    let space = fixture_space();
    let cfg = SerializationConfig::new(&vocab).unwrap();
    let lookup = |names: &[String]| -> HashMap<Vec<TokenId>, usize> {
        names
            .iter()
            .enumerate()
            .map(|(i, n)| (vocab.tokenize(n), i))
            .collect()
    };
    let ents = lookup(space.entity_names());
    let preds = lookup(space.predicate_names());
    let multi = space.entity_names().iter().filter(|n| n.contains(' ')).count();
    ensure(multi > 0, || "no multi-word entity names".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    for i in 0..1000 {
        let g = random_graph(&mut rng, i, &space);
        let ser = serialize_graph(&g, &space, &vocab, &cfg).map_err(|e| e.to_string())?;
        // the prompt prefix is not part of the generated text
        let tokens = ser.body;
        let (spans, _) = parse_sequence(&tokens, &vocab);
        let got: Vec<(usize, usize, usize)> = spans
            .iter()
            .map(|s| {
                let name = |r: std::ops::Range<usize>, m: &HashMap<Vec<TokenId>, usize>| {
                    m.get(&tokens[r].to_vec()).copied().unwrap_or(usize::MAX)
                };
                (
                    name(s.subject_content(), &ents),
                    name(s.predicate_content(), &preds),
                    name(s.object_content(), &ents),
                )
            })
            .collect();
        ensure(got == g.category_triples(), || {
            format!("graph {i}: parsed {got:?}, expected {:?}", g.category_triples())
        })?;
    }
    let t = start.elapsed();
    ensure(t < Duration::from_secs(5), || format!("took {t:?}"))?;
    Ok(format!("1000 graphs round-tripped in {:.2?}", t))
}

// ------------------------------------------------------------------ 2

fn criterion_2() -> Outcome {
    let vocab = fixture_vocabulary();
    let sp = vocab.specials();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut spans_total = 0usize;
    let mut failures = 0usize;
    for _ in 0..100_000 {
        let len = rng.gen_range(0..=64);
        let tokens: Vec<TokenId> = (0..len)
            .map(|_| {
                if rng.gen_bool(0.3) {
                    [sp.ent, sp.rel, sp.eos][rng.gen_range(0..3)]
                } else {
                    rng.gen_range(0..vocab.len() as TokenId)
                }
            })
            .collect();
        let r = catch_unwind(|| {
            let (spans, stats) = parse_sequence(&tokens, &vocab);
            let ok = spans.iter().all(|s| s.is_well_formed(&tokens, &vocab))
                && stats.n_triplets == spans.len()
                && stats.n_unique_triplets <= stats.n_triplets
                && stats.n_triplets <= stats.n_rel_tokens;
            (ok, spans.len())
        });
        match r {
            Ok((true, n)) => spans_total += n,
            _ => failures += 1,
        }
    }
    ensure(failures == 0, || format!("{failures} failures"))?;
    Ok(format!("100000 sequences, 0 failures, {spans_total} spans"))
}

// ------------------------------------------------------------------ 3

/// The conversion formula written as nested loops over categories, category
/// tokens and span rows.
fn conversion_oracle(rows: &[Vec<f64>], cats: &[Vec<TokenId>], span: &[TokenId], beta: f64) -> Vec<f64> {
    let n = rows.len() as f64;
    cats.iter()
        .map(|toks| {
            let mut sum = 0.0;
            for &t in toks {
                let mut col = 0.0;
                for r in rows {
                    col += r[t as usize];
                }
                sum += col / n;
            }
            let b = if toks.as_slice() == span { beta } else { 1.0 };
            b / toks.len() as f64 * sum
        })
        .collect()
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut amplified = 0;
    for case in 0..500 {
        let v = rng.gen_range(2..=30usize);
        let n_cat = rng.gen_range(1..=8usize);
        let mut cats: Vec<Vec<TokenId>> = Vec::new();
        while cats.len() < n_cat {
            let len = rng.gen_range(1..=3);
            let c: Vec<TokenId> = (0..len).map(|_| rng.gen_range(0..v as TokenId)).collect();
            if !cats.contains(&c) {
                cats.push(c);
            }
        }
        let table = CategoryTokenTable::from_sequences(cats.clone()).ok_or("table")?;
        let t = rng.gen_range(1..=5);
        let rows: Vec<Vec<f64>> = (0..t)
            .map(|_| {
                let w: Vec<f64> = (0..v).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = w.iter().sum();
                w.iter().map(|x| x / s).collect()
            })
            .collect();
        let sparse: Vec<SparseRow> = rows.iter().map(|r| SparseRow::from_dense(r, v)).collect();
        let span: Vec<TokenId> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(0..v as TokenId)).collect();
        let got = convert_scores(&sparse, &span, &table, 1.0).map_err(|e| e.to_string())?;
        let want = conversion_oracle(&rows, &cats, &span, 1.0);
        ensure(got.scores == want, || format!("case {case}: {:?} != {want:?}", got.scores))?;

        // exact-match amplification
        let c = rng.gen_range(0..cats.len());
        let plain = convert_scores(&sparse, &cats[c], &table, 1.0).map_err(|e| e.to_string())?;
        let amp = convert_scores(&sparse, &cats[c], &table, 5.0).map_err(|e| e.to_string())?;
        let want = conversion_oracle(&rows, &cats, &cats[c], 5.0);
        ensure(amp.scores == want, || format!("case {case}: amplified scores differ from oracle"))?;
        ensure(amp.exact_match == Some(c), || format!("case {case}: exact match not flagged"))?;
        for (i, (&a, &p)) in amp.scores.iter().zip(&plain.scores).enumerate() {
            if i == c {
                ensure((a - 5.0 * p).abs() <= 1e-12 * a.abs().max(1.0), || {
                    format!("case {case}: matched category {a} vs 5 x {p}")
                })?;
            } else {
                ensure(a == p, || format!("case {case}: category {i} changed"))?;
            }
        }
        let above = |s: &[f64]| s.iter().filter(|&&x| x > s[c]).count();
        ensure(above(&amp.scores) <= above(&plain.scores), || {
            format!("case {case}: matched category lost rank")
        })?;
        amplified += 1;
    }
    Ok(format!("500 instances exact, {amplified} amplification cases sound"))
}

// ------------------------------------------------------------------ 4

struct FuzzScorer {
    vocab: usize,
    salt: u64,
}

impl TokenScorer for FuzzScorer {
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn hidden_dim(&self) -> usize {
        2
    }
    fn eos_id(&self) -> TokenId {
        0
    }
    fn step(&self, _: &FeatureMatrix, prefix: &[TokenId]) -> Result<Step, DecodeError> {
        let mut key = vec![self.salt];
        key.extend(prefix.iter().map(|&t| t as u64));
        let raw = hashed_vector(&key, self.vocab);
        // squash some entries to zero and quantize others to create ties
        let w: Vec<f64> = raw
            .iter()
            .map(|&x| if x < -0.6 { 0.0 } else { ((x + 1.0) * 4.0).round() + 0.5 })
            .collect();
        let s: f64 = w.iter().sum();
        Ok(Step {
            probs: w.iter().map(|x| x / s).collect(),
            hidden: vec![0.0, 0.0],
        })
    }
}

/// True when `t` is inside the smallest descending-probability prefix
/// (ties by lower id) whose mass reaches `p`.
fn in_nucleus(probs: &[f64], t: usize, p: f64) -> bool {
    if probs[t] <= 0.0 {
        return false;
    }
    if p >= 1.0 {
        return true;
    }
    let mut ids: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    ids.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    let mut before = 0.0;
    for i in ids {
        if i == t {
            return before < p;
        }
        before += probs[i];
    }
    false
}

fn criterion_4() -> Outcome {
    let f = nucleus_filter(&[0.5, 0.3, 0.2], 0.7).map_err(|e| e.to_string())?;
    let want = [0.625, 0.375, 0.0];
    ensure(f.iter().zip(want).all(|(a, b)| (a - b).abs() <= 1e-12), || {
        format!("hand example gave {f:?}")
    })?;
    let feats = FeatureMatrix(Matrix::zeros(1, 1));
    let mut steps = 0usize;
    let mut salt = 0u64;
    while steps < 10_000 {
        salt += 1;
        let scorer = FuzzScorer {
            vocab: 3 + (salt % 18) as usize,
            salt,
        };
        for p in [0.3, 0.7, 0.9, 1.0] {
            let cfg = GenerationConfig {
                rounds: 1,
                max_len: 40,
                top_p: p,
                seed: salt,
                sparse_top_k: 4,
            };
            let seq = generate(&scorer, &feats, &cfg, 0).map_err(|e| e.to_string())?;
            for (i, &t) in seq.tokens.iter().enumerate() {
                let step = scorer.step(&feats, &seq.tokens[..i]).unwrap();
                ensure(in_nucleus(&step.probs, t as usize, p), || {
                    format!("salt {salt} p {p} step {i}: token {t} outside nucleus")
                })?;
                steps += 1;
            }
        }
    }
    Ok(format!("hand example ok, {steps} sampled steps inside nucleus"))
}

// ------------------------------------------------------------------ 5

fn criterion_5() -> Outcome {
    let r = run_gradcheck(&GradcheckConfig::default()).map_err(|e| e.to_string())?;
    ensure(r.loss_max_rel_error < 1e-4 && r.loss_components == 400, || format!("box loss {r:?}"))?;
    ensure(r.network_max_rel_error < 1e-3, || format!("network {r:?}"))?;
    let bad = run_gradcheck(&GradcheckConfig {
        corruption: Corruption::Scale(1.1),
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    ensure(!bad.passed(), || "corrupted gradient passed".into())?;
    let flat = run_gradcheck(&GradcheckConfig {
        layers: 0,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    ensure(flat.passed(), || format!("L=0 {flat:?}"))?;
    let bin = env!("CARGO_BIN_EXE_sgseq");
    let ok = Command::new(bin).arg("gradcheck").output().map_err(|e| e.to_string())?;
    ensure(ok.status.success(), || format!("gradcheck exit {:?}", ok.status))?;
    let neg = Command::new(bin)
        .args(["gradcheck", "--corrupt-gradient"])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(!neg.status.success(), || "corrupted CLI run exited 0".into())?;
    Ok(format!(
        "loss {:.1e}, network {:.1e}, CLI exit 0",
        r.loss_max_rel_error, r.network_max_rel_error
    ))
}

// ------------------------------------------------------------------ 6

fn overlap(a: &Box2, b: &Box2) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let i = w * h;
    let u = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - i;
    if u > 0.0 {
        i / u
    } else {
        0.0
    }
}

fn nms_oracle(cands: &[CandidateTriplet], thr: f64) -> Vec<CandidateTriplet> {
    let mut sorted = cands.to_vec();
    sorted.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then((a.source.sequence, a.source.span).cmp(&(b.source.sequence, b.source.span)))
            .then(a.categories().cmp(&b.categories()))
    });
    let mut keep = vec![true; sorted.len()];
    for i in 0..sorted.len() {
        for j in 0..i {
            if keep[j]
                && sorted[j].categories() == sorted[i].categories()
                && overlap(&sorted[j].subject.bbox, &sorted[i].subject.bbox) >= thr
                && overlap(&sorted[j].object.bbox, &sorted[i].object.bbox) >= thr
            {
                keep[i] = false;
                break;
            }
        }
    }
    sorted.into_iter().zip(keep).filter(|(_, k)| *k).map(|(c, _)| c).collect()
}

fn criterion_6() -> Outcome {
    let cfg = PostprocessConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut suppressed = 0usize;
    for case in 0..200 {
        let pool: Vec<Box2> = (0..4).map(|_| random_box(&mut rng)).collect();
        let jitter = |rng: &mut ChaCha8Rng| {
            let b = pool[rng.gen_range(0..pool.len())];
            let d = rng.gen_range(-0.03..0.03);
            Box2::new(b.x1 + d, b.y1, b.x2 + d, b.y2)
        };
        let n = rng.gen_range(0..=50);
        let cands: Vec<CandidateTriplet> = (0..n)
            .map(|i| {
                let e = |rng: &mut ChaCha8Rng| EntityCandidate {
                    category_id: rng.gen_range(0..2),
                    score: (rng.gen_range(1..5) as f64) / 4.0,
                    bbox: jitter(rng),
                };
                let s = e(&mut rng);
                let o = e(&mut rng);
                let p = (rng.gen_range(0..2), (rng.gen_range(1..5) as f64) / 4.0);
                CandidateTriplet::new(s, p, o, SpanSource { sequence: i / 5, span: i % 5 })
            })
            .collect();
        let got = relation_nms(cands.clone(), &cfg);
        let want = nms_oracle(&cands, cfg.nms_iou);
        ensure(got == want, || format!("case {case}: {} kept vs oracle {}", got.len(), want.len()))?;
        ensure(relation_nms(got.clone(), &cfg) == got, || format!("case {case}: not idempotent"))?;
        suppressed += n - got.len();
    }
    for case in 0..200 {
        let nv = rng.gen_range(1..=6);
        let ne = rng.gen_range(1..=6);
        let k = rng.gen_range(1..=4);
        let scores = |n: usize, rng: &mut ChaCha8Rng| CategoryScores {
            scores: (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
            exact_match: None,
        };
        let (s, o, p) = (scores(nv, &mut rng), scores(nv, &mut rng), scores(ne, &mut rng));
        let c = expand_candidates(
            SpanSource { sequence: 0, span: 0 },
            &s,
            &o,
            &p,
            (random_box(&mut rng), random_box(&mut rng)),
            &PostprocessConfig { top_k: k, ..cfg },
        );
        let want = k.min(nv).pow(2) * k.min(ne);
        ensure(c.len() == want, || format!("expansion case {case}: {} != {want}", c.len()))?;
    }
    Ok(format!("200 NMS sets match oracle ({suppressed} suppressed), idempotent; 200 expansions"))
}

// ------------------------------------------------------------------ 7

fn expected(path: &Path) -> BTreeMap<String, String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

fn criterion_7() -> Outcome {
    let dir = data_dir();
    let space = load_categories(dir.join("categories.json"), 0.5, 0).map_err(|e| e.to_string())?;
    let gts = load_scene_graphs(dir.join("gt.jsonl"), &space).map_err(|e| e.to_string())?;
    let preds = load_scene_graphs(dir.join("pred.jsonl"), &space).map_err(|e| e.to_string())?;
    let seen = load_seen_triplets(dir.join("seen.tsv"), &space).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for (protocol, file) in [(Protocol::SgDet, "expected_sgdet.txt"), (Protocol::PCls, "expected_pcls.txt")] {
        let cfg = EvalConfig {
            protocol,
            seen_triplets: Some(seen.clone()),
            ..Default::default()
        };
        let kv = evaluate(&preds, &gts, &space, &cfg)
            .map_err(|e| e.to_string())?
            .to_key_values();
        for (k, v) in expected(&dir.join(file)) {
            let got = kv.get(&k).ok_or_else(|| format!("{protocol}: missing key {k}"))?;
            let same = match (Metric::parse(got), Metric::parse(&v)) {
                (Some(a), Some(b)) => a == b,
                _ => got == &v,
            };
            ensure(same, || format!("{protocol} {k}: got {got}, expected {v}"))?;
            checked += 1;
        }
    }

    // monotonicity in K on random datasets
    let ks = vec![1, 2, 3, 5, 10, 20, 50, 100];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let space = CategorySpace::new(
        (0..4).map(|i| format!("e{i}")).collect(),
        (0..5).map(|i| format!("p{i}")).collect(),
        vec![1, 3],
    )
    .unwrap();
    for d in 0..100 {
        let mut gts = Vec::new();
        let mut preds = Vec::new();
        for i in 0..rng.gen_range(1..5) {
            let gt = random_graph(&mut rng, i, &space);
            let mut pred = SceneGraph::new(gt.image_id.clone());
            for e in &gt.entities {
                let b = if rng.gen_bool(0.7) { e.bbox } else { random_box(&mut rng) };
                pred.add_entity(rng.gen_range(0..4), b, rng.gen_range(0.1..1.0));
            }
            for _ in 0..rng.gen_range(0..30) {
                let s = rng.gen_range(0..pred.entities.len());
                let o = (s + 1) % pred.entities.len();
                pred.add_relation(s, rng.gen_range(0..5), o, rng.gen_range(0.0..1.0));
            }
            gts.push(gt);
            preds.push(pred);
        }
        let cfg = EvalConfig {
            ks: ks.clone(),
            ..Default::default()
        };
        let r = evaluate(&preds, &gts, &space, &cfg).map_err(|e| e.to_string())?;
        for w in r.per_k.windows(2) {
            ensure(w[0].recall <= w[1].recall && w[0].mean_recall <= w[1].mean_recall, || {
                format!("dataset {d}: not monotone between K={} and K={}", w[0].k, w[1].k)
            })?;
            for (a, b) in w[0].per_predicate.iter().zip(&w[1].per_predicate) {
                ensure(a <= b, || format!("dataset {d}: predicate recall drops"))?;
            }
        }
    }
    Ok(format!("{checked} golden values exact; monotone on 100 random datasets"))
}

// ------------------------------------------------------------------ 8

fn run(bin: &str, args: &[&str]) -> Result<String, String> {
    let out = Command::new(bin).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "sgseq {}: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let bin = env!("CARGO_BIN_EXE_sgseq");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fx = tmp.path().join("fixture");
    let fx_s = fx.to_str().unwrap();
    run(bin, &["make-fixture", "--out", fx_s, "--seed", "7"])?;
    let config = fx.join("run.config");
    let config = config.to_str().unwrap();
    let mut outs = Vec::new();
    for (name, threads) in [("a", "1"), ("b", "1"), ("c", "8")] {
        let g = tmp.path().join(name).join("graphs.jsonl");
        let s = tmp.path().join(name).join("pred.jsonl");
        run(
            bin,
            &[
                "pipeline",
                "--config",
                config,
                "--seed",
                "7",
                "--threads",
                threads,
                "--graphs-out",
                g.to_str().unwrap(),
                "--sequences-out",
                s.to_str().unwrap(),
            ],
        )?;
        outs.push(tmp.path().join(name));
    }
    for file in ["graphs.jsonl", "pred.jsonl", "pred.hidden.bin"] {
        let read = |d: &PathBuf| std::fs::read(d.join(file)).map_err(|e| e.to_string());
        let a = read(&outs[0])?;
        ensure(!a.is_empty(), || format!("{file} is empty"))?;
        ensure(a == read(&outs[1])?, || format!("{file} differs between runs"))?;
        ensure(a == read(&outs[2])?, || format!("{file} differs between 1 and 8 threads"))?;
    }
    let stats = run(
        bin,
        &["stats", "--config", config, "--predictions", outs[0].join("pred.jsonl").to_str().unwrap()],
    )?;
    let valid: f64 = stats
        .lines()
        .find_map(|l| l.strip_prefix("valid_fraction "))
        .ok_or("stats printed no valid_fraction")?
        .trim()
        .parse()
        .map_err(|e| format!("{e}"))?;
    ensure(
        ["#Trip", "#Uni.Trip", "#[REL]", "%Valid"].iter().all(|c| stats.contains(c)),
        || "stats columns missing".into(),
    )?;
    ensure(valid >= 0.9, || format!("valid_fraction {valid}"))?;
    let t = start.elapsed();
    ensure(t < Duration::from_secs(60), || format!("took {t:?}"))?;
    Ok(format!("byte-identical over 2 runs and 1 vs 8 threads; valid_fraction {valid:.4}; {t:.2?}"))
}

// ------------------------------------------------------------------ 9

fn criterion_9() -> Outcome {
    let ds = make_fixture(&FixtureConfig::default()).map_err(|e| e.to_string())?;
    let hidden = ds.weights.config.hidden_dim;
    let model = |w: GroundingWeights| {
        PipelineModel::new(
            ds.vocab.clone(),
            ds.space.clone(),
            w,
            ConversionConfig::default(),
            PostprocessConfig::default(),
        )
        .map_err(|e| e.to_string())
    };
    let recall_100 = |graphs: Vec<SceneGraph>, protocol| -> Result<Metric, String> {
        let r = evaluate(
            &graphs,
            &ds.graphs,
            &ds.space,
            &EvalConfig {
                protocol,
                ..Default::default()
            },
        )
        .map_err(|e| e.to_string())?;
        Ok(r.per_k.iter().find(|m| m.k == 100).unwrap().recall.clone())
    };

    let oracle = oracle_predictions(&ds.graphs, &ds.space, &ds.vocab, hidden, true).map_err(|e| e.to_string())?;
    let m = model(ds.weights.clone())?;
    let out = run_pipeline(&m, &ds.features, SequenceSource::Records(oracle)).map_err(|e| e.to_string())?;
    let pcls = recall_100(out.into_iter().map(|o| o.graph).collect(), Protocol::PCls)?;
    ensure(pcls == Metric::from_counts(1, 1), || format!("PCls R@100 = {pcls}"))?;

    let plain = oracle_predictions(&ds.graphs, &ds.space, &ds.vocab, hidden, false).map_err(|e| e.to_string())?;
    let zero = GroundingWeights::zeros(ds.weights.config).map_err(|e| e.to_string())?;
    let m = model(zero)?;
    let out = run_pipeline(&m, &ds.features, SequenceSource::Records(plain)).map_err(|e| e.to_string())?;
    let centered = out
        .iter()
        .flat_map(|o| &o.graph.entities)
        .all(|e| e.bbox == Box2::new(0.25, 0.25, 0.75, 0.75));
    ensure(centered, || "zero weights did not give center squares".into())?;
    let sgdet = recall_100(out.into_iter().map(|o| o.graph).collect(), Protocol::SgDet)?;
    ensure(sgdet < pcls, || format!("SGDet R@100 {sgdet} not below PCls {pcls}"))?;
    Ok(format!("PCls R@100 = {pcls}, SGDet (zero weights) R@100 = {sgdet}"))
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 9] = [
        ("codec round trip", criterion_1),
        ("parser totality", criterion_2),
        ("category conversion oracle", criterion_3),
        ("nucleus invariant", criterion_4),
        ("gradient check", criterion_5),
        ("post-processing oracles", criterion_6),
        ("metric golden ledger", criterion_7),
        ("end-to-end determinism", criterion_8),
        ("protocol substitution", criterion_9),
    ];
    let default_hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match r {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {why}", i + 1);
            }
        }
    }
    std::panic::set_hook(default_hook);
    if failed > 0 {
        println!("{failed} of 9 criteria failed");
        std::process::exit(1);
    }
    println!("all 9 criteria passed");
}
