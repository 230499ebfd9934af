//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs the full three-seed comparison on the default corpus, so expect
//! about half an hour on one core. Set `PARTLAB_ACCEPTANCE_DIR` to keep the
//! artifacts, or `PARTLAB_SKIP_ACCEPTANCE=1` to skip. Failed criteria are
//! reported but only fail the process under `PARTLAB_ACCEPTANCE_STRICT=1`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use partlab::cli::checkpoint;
use partlab::cli::experiment::{compare_into, foundation_model, runs_csv, ExperimentConfig, RunScores, FINAL_CHECKPOINT};
use partlab::corpus::{Corpus, CorpusManifest, Split};
use partlab::metrics::{bleu_corpus, cer, normalize, wer, BleuTokenizer, NormalizerConfig};
use partlab::model::gradcheck::{check_component, Component};
use partlab::model::{with_eos, ModelConfig, SlmModel};
use partlab::numerics::gradcheck::registered_ops;
use partlab::numerics::{AdamConfig, AdamState};
use partlab::schedule::{train_step, Budget, PART, PART_FULL_UNFREEZE, THREE_STAGE_MIXED, TWO_STAGE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

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

fn fail(detail: impl ToString) -> Outcome {
    outcome(false, detail.to_string())
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut bad = Vec::new();
    for case in registered_ops() {
        match case.run(0) {
            Ok(r) if r.max_rel_error < 1e-3 => worst = worst.max(r.max_rel_error),
            Ok(r) => bad.push(format!("{} ({:.2e})", case.name, r.max_rel_error)),
            Err(e) => bad.push(format!("{}: {e}", case.name)),
        }
        match case.run_faulty(0, 1.01) {
            Ok(r) if r.max_rel_error > 1e-3 => {}
            _ => bad.push(format!("{} fault undetected", case.name)),
        }
    }
    for c in Component::ALL {
        match check_component(c, 6, 4, 0) {
            Ok(r) if r.max_rel_error < 1e-3 => worst = worst.max(r.max_rel_error),
            Ok(r) => bad.push(format!("{} ({:.2e})", c.name(), r.max_rel_error)),
            Err(e) => bad.push(format!("{}: {e}", c.name())),
        }
    }
    let secs = t.elapsed().as_secs_f64();
    if secs >= 60.0 {
        bad.push(format!("took {secs:.1}s"));
    }
    let n = registered_ops().len() + Component::ALL.len();
    if bad.is_empty() {
        outcome(true, format!("{n} checks, worst rel err {worst:.2e}, faults detected, {secs:.1}s"))
    } else {
        fail(bad.join("; "))
    }
}

fn oracle_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    fn go<T: PartialEq>(a: &[T], b: &[T], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if let Some(v) = memo[i][j] {
            return v;
        }
        let v = if i == a.len() {
            b.len() - j
        } else if j == b.len() {
            a.len() - i
        } else {
            let sub = go(a, b, i + 1, j + 1, memo) + usize::from(a[i] != b[j]);
            sub.min(go(a, b, i + 1, j, memo) + 1).min(go(a, b, i, j + 1, memo) + 1)
        };
        memo[i][j] = Some(v);
        v
    }
    let mut memo = vec![vec![None; b.len() + 1]; a.len() + 1];
    go(a, b, 0, 0, &mut memo)
}

fn metric_oracles(corpus: &Corpus) -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let words = |rng: &mut ChaCha8Rng| {
        let n = rng.gen_range(1..9);
        (0..n).map(|_| ["a", "b", "c", "dd", "e"][rng.gen_range(0..5)]).collect::<Vec<_>>().join(" ")
    };
    for i in 0..1000 {
        let (r, h) = (words(&mut rng), words(&mut rng));
        let rw: Vec<&str> = r.split(' ').collect();
        let hw: Vec<&str> = h.split(' ').collect();
        let rc: Vec<char> = r.chars().filter(|c| *c != ' ').collect();
        let hc: Vec<char> = h.chars().filter(|c| *c != ' ').collect();
        let w_ok = wer(&r, &h).ok() == Some(oracle_distance(&rw, &hw) as f64 / rw.len() as f64);
        let c_ok = cer(&r, &h).ok() == Some(oracle_distance(&rc, &hc) as f64 / rc.len() as f64);
        if !(w_ok && c_ok) {
            return fail(format!("pair {i} disagrees with the oracle: {r:?} / {h:?}"));
        }
    }
    let tok = BleuTokenizer::Word13a;
    let partial = 100.0 * (1.0f64 - 3.0 / 2.0).exp();
    let examples: [(&[&str], &[&str], f64); 3] = [
        (&["the cat sat", "a dog"], &["the cat sat", "a dog"], 100.0),
        (&["the cat sat"], &["a dog ran"], 0.0),
        (&["the cat sat"], &["the cat"], partial),
    ];
    for (i, (r, h, want)) in examples.iter().enumerate() {
        match bleu_corpus(r, h, tok) {
            Ok(got) if (got - want).abs() < 1e-6 => {}
            other => return fail(format!("BLEU example {} gave {other:?}, want {want}", i + 1)),
        }
    }
    let cfg = NormalizerConfig::default();
    let mut n = 0;
    for split in Split::ALL {
        for u in corpus.split(split) {
            let once = normalize(&u.text, &cfg);
            if normalize(&once, &cfg) != once {
                return fail(format!("normalizer not idempotent on {:?}", u.text));
            }
            n += 1;
        }
    }
    outcome(
        true,
        format!("1000 oracle pairs exact, 3 BLEU examples, {n} corpus strings idempotent, {:.1}s", t.elapsed().as_secs_f64()),
    )
}

fn loss_sanity(corpus: &Corpus) -> Outcome {
    let m = match SlmModel::new(ModelConfig::default(), 0) {
        Ok(m) => m,
        Err(e) => return fail(e),
    };
    let ln_v = (m.config.vocab as f64).ln();
    let train = &corpus.mono.train;
    let sample: Vec<_> = train.iter().take(64).collect();
    let mut total = 0.0;
    for u in &sample {
        match m.compute_loss(&u.features, u.instruction, &with_eos(&u.target_tokens(&corpus.vocab))) {
            Ok(l) => total += l as f64,
            Err(e) => return fail(e),
        }
    }
    let initial = total / sample.len() as f64;
    if (initial - ln_v).abs() > 0.05 * ln_v {
        return fail(format!("initial loss {initial:.3} vs ln V {ln_v:.3}"));
    }

    let u = match train.iter().find(|u| u.words.len() >= 4) {
        Some(u) => u,
        None => return fail("no utterance with four words"),
    };
    let mut m = SlmModel::new(ModelConfig::default(), 5).unwrap();
    m.params.set_all_trainable(true);
    let mut opt = AdamState::new(AdamConfig::default());
    opt.set_lr(3e-3);
    let targets = with_eos(&u.target_tokens(&corpus.vocab));
    let mut reached = None;
    for step in 1..=200 {
        if let Err(e) = train_step(&mut m, &mut opt, &[u], corpus) {
            return fail(e);
        }
        if m.compute_loss(&u.features, u.instruction, &targets).unwrap() < 0.1 {
            reached = Some(step);
            break;
        }
    }
    let Some(step) = reached else {
        return fail("overfit loss stayed above 0.1 for 200 steps");
    };
    let decoded = m.greedy_decode(&u.features, u.instruction, m.config.max_text).unwrap();
    if decoded.tokens != u.target_tokens(&corpus.vocab) {
        return fail(format!("decode {:?} != target", decoded.tokens));
    }
    outcome(
        true,
        format!("initial {initial:.3} vs ln V {ln_v:.3}; overfit in {step} steps; decode exact"),
    )
}

fn directional(runs: &[RunScores], elapsed: Duration) -> Outcome {
    let by = |recipe: &str, seed: u64| runs.iter().find(|r| r.recipe == recipe && r.seed == seed);
    let col = |r: Option<&RunScores>, c: &str| r.and_then(|r| r.get(c)).unwrap_or(f64::NAN);
    let mut asr_wins = 0;
    let mut bleu_wins = 0;
    let mut lines = Vec::new();
    for s in SEEDS {
        let (p, t, m) = (by(PART, s), by(TWO_STAGE, s), by(THREE_STAGE_MIXED, s));
        let (pa, ta) = (col(p, "asr_macro"), col(t, "asr_macro"));
        let (pb, mb) = (col(p, "bleu_macro"), col(m, "bleu_macro"));
        asr_wins += usize::from(pa <= ta);
        bleu_wins += usize::from(pb >= mb);
        lines.push(format!("s{s}: asr {pa:.3}/{ta:.3} bleu {pb:.1}/{mb:.1}"));
    }
    let part_asr: Vec<f64> = SEEDS.iter().map(|&s| col(by(PART, s), "asr_macro")).collect();
    let mean_asr = part_asr.iter().sum::<f64>() / part_asr.len() as f64;
    let mins = elapsed.as_secs_f64() / 60.0;
    let pass = asr_wins >= 2 && bleu_wins >= 2 && mean_asr <= 0.15 && mins < 30.0;
    outcome(
        pass,
        format!(
            "ASR<=two_stage on {asr_wins}/3, BLEU>=three_stage_mixed on {bleu_wins}/3, PART macro ASR {mean_asr:.3}, {mins:.1} min [{}]",
            lines.join("; ")
        ),
    )
}

fn read_rows(path: &Path) -> Result<Vec<BTreeMap<String, String>>, String> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let headers = r.headers().map_err(|e| e.to_string())?.clone();
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| e.to_string())?;
            Ok(headers.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        })
        .collect()
}

fn freeze_semantics(run_dirs: &[PathBuf]) -> Outcome {
    let mut rows = 0;
    let mut recipes = std::collections::BTreeSet::new();
    for dir in run_dirs {
        let audit = match read_rows(&dir.join("audit.csv")) {
            Ok(a) => a,
            Err(e) => return fail(e),
        };
        if audit.is_empty() {
            return fail(format!("{} has no audit rows", dir.display()));
        }
        for a in &audit {
            if a["frozen_pre"] != a["frozen_post"] {
                return fail(format!("{}: frozen {} changed in {}/{}", dir.display(), a["group"], a["stage"], a["phase"]));
            }
            if a["trainable"] == "0" && a["group_pre"] != a["group_post"] {
                return fail(format!("{}: fully frozen {} changed", dir.display(), a["group"]));
            }
        }
        rows += audit.len();
        if let Some(r) = dir.parent().and_then(Path::file_name) {
            recipes.insert(r.to_string_lossy().into_owned());
        }
    }
    let all = [PART, TWO_STAGE, THREE_STAGE_MIXED, PART_FULL_UNFREEZE];
    let missing: Vec<&str> = all.iter().copied().filter(|r| !recipes.contains(*r)).collect();
    if !missing.is_empty() {
        return fail(format!("no audited run for {missing:?}"));
    }
    outcome(true, format!("{rows} phase/group digests unchanged across {} runs of 4 recipes", run_dirs.len()))
}

fn ablation(
    root: &Path,
    config: &ExperimentConfig,
    corpus: &Corpus,
    foundation: &SlmModel,
) -> Result<(Outcome, Vec<PathBuf>), partlab::Error> {
    let mut cfg = config.clone();
    cfg.budget = Budget {
        stage1: 150,
        stage2: 150,
        stage3: 300,
        batch_size: 8,
    };
    let recipes = [PART.to_string(), PART_FULL_UNFREEZE.to_string()];
    let a = compare_into(&root.join("c6a"), &cfg, &recipes, &[0], corpus, foundation)?;
    compare_into(&root.join("c6b"), &cfg, &recipes, &[0], corpus, foundation)?;
    let ta = fs::read(root.join("c6a/comparison.csv")).unwrap_or_default();
    let tb = fs::read(root.join("c6b/comparison.csv")).unwrap_or_default();
    let rows = String::from_utf8_lossy(&ta).lines().count().saturating_sub(1);
    let mut notes = Vec::new();
    let mut pass = ta == tb && rows == 2;
    for r in &a {
        let ok = r.final_loss < 0.5 * r.initial_loss;
        pass &= ok;
        notes.push(format!("{} {:.3}->{:.3}", r.recipe, r.initial_loss, r.final_loss));
    }
    let det = if ta == tb { "identical" } else { "DIFFERENT" };
    let dirs = vec![root.join("c6a").join(PART_FULL_UNFREEZE).join("seed0")];
    Ok((outcome(pass, format!("{rows}-row table, reruns {det}; {}", notes.join(", "))), dirs))
}

fn determinism(root: &Path, config: &ExperimentConfig, corpus: &Corpus, foundation: &SlmModel, c5: &[RunScores]) -> Outcome {
    let first = match c5.iter().find(|r| r.recipe == PART && r.seed == 0) {
        Some(r) => r.clone(),
        None => return fail("no PART seed 0 run"),
    };
    let again = match compare_into(&root.join("c7"), config, &[PART.to_string()], &[0], corpus, foundation) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    let a = root.join("c5").join(PART).join("seed0");
    let b = root.join("c7").join(PART).join("seed0");
    let mut diffs = Vec::new();
    if again[0].final_dev_loss.to_bits() != first.final_dev_loss.to_bits() {
        diffs.push(format!("dev loss {} vs {}", first.final_dev_loss, again[0].final_dev_loss));
    }
    if runs_csv(&again) != runs_csv(std::slice::from_ref(&first)) {
        diffs.push("runs csv".into());
    }
    for f in ["loss.csv", "draws.csv", "audit.csv", "scores_test.csv", FINAL_CHECKPOINT] {
        if fs::read(a.join(f)).ok() != fs::read(b.join(f)).ok() {
            diffs.push(f.to_string());
        }
    }
    let path = b.join(FINAL_CHECKPOINT);
    let bytes = fs::read(&path).unwrap_or_default();
    match checkpoint::decode(&bytes, &path) {
        Ok((m, prov)) => {
            if checkpoint::encode(&m, &prov) != bytes {
                diffs.push("checkpoint re-encode".into());
            }
        }
        Err(e) => diffs.push(e.to_string()),
    }
    if diffs.is_empty() {
        outcome(
            true,
            format!("rerun matches bitwise (dev loss {:.6}); checkpoint round-trips", first.final_dev_loss),
        )
    } else {
        fail(format!("differences: {}", diffs.join(", ")))
    }
}

fn mixture_purity(root: &Path) -> Outcome {
    let mut early = 0usize;
    let mut late_cross = 0usize;
    let mut total = 0usize;
    for s in SEEDS {
        let rows = match read_rows(&root.join("c5").join(PART).join(format!("seed{s}")).join("draws.csv")) {
            Ok(r) => r,
            Err(e) => return fail(e),
        };
        let last = rows.last().map(|r| r["stage"].clone()).unwrap_or_default();
        for r in &rows {
            let cross = r["dataset"] == "cross";
            if r["stage"] != last {
                total += 1;
                early += usize::from(cross);
            } else {
                late_cross += usize::from(cross);
            }
        }
    }
    let pass = early == 0 && total > 0 && late_cross > 0;
    outcome(
        pass,
        format!("{early} cross draws in {total} draws before the final stage; {late_cross} in it (3 seeds)"),
    )
}

fn skip_requested() -> bool {
    if std::env::var("PARTLAB_SKIP_ACCEPTANCE").is_ok_and(|v| v == "1") {
        return true;
    }
    // `cargo test <filter>` forwards the filter; honor it like libtest would.
    std::env::args().skip(1).filter(|a| !a.starts_with('-')).any(|f| !"acceptance".contains(f.as_str()))
}

fn main() {
    if skip_requested() {
        println!("acceptance: skipped");
        return;
    }
    let keep = std::env::var_os("PARTLAB_ACCEPTANCE_DIR").map(PathBuf::from);
    let tmp = tempfile::tempdir().expect("tempdir");
    let root = keep.clone().unwrap_or_else(|| tmp.path().to_path_buf());
    fs::create_dir_all(&root).expect("output dir");

    let mut results: BTreeMap<u8, (&str, Outcome)> = BTreeMap::new();
    let mut report = |id: u8, name: &'static str, o: Outcome| {
        eprintln!("[{id}] {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.insert(id, (name, o));
    };

    report(1, "gradient suite", gradient_suite());
    let manifest = CorpusManifest::default();
    let corpus = Corpus::build(&manifest).expect("default corpus");
    report(3, "metric oracles", metric_oracles(&corpus));
    report(4, "loss sanity", loss_sanity(&corpus));

    let mut config = ExperimentConfig::new(root.join("corpus"));
    config.seed = 0;
    let start = Instant::now();
    let foundation = foundation_model(&config.model, &config.foundation, &corpus).expect("foundation");
    eprintln!("foundation ready after {:.0}s", start.elapsed().as_secs_f64());
    let recipes: Vec<String> = [PART, TWO_STAGE, THREE_STAGE_MIXED].iter().map(|s| s.to_string()).collect();
    let c5 = compare_into(&root.join("c5"), &config, &recipes, &SEEDS, &corpus, &foundation);
    let elapsed = start.elapsed();
    let mut run_dirs: Vec<PathBuf> = recipes
        .iter()
        .flat_map(|r| SEEDS.iter().map(move |s| (r.clone(), *s)))
        .map(|(r, s)| root.join("c5").join(r).join(format!("seed{s}")))
        .collect();
    match &c5 {
        Ok(runs) => report(5, "directional comparison", directional(runs, elapsed)),
        Err(e) => report(5, "directional comparison", fail(e)),
    }

    match ablation(&root, &config, &corpus, &foundation) {
        Ok((o, dirs)) => {
            run_dirs.extend(dirs);
            report(6, "ablation table", o);
        }
        Err(e) => report(6, "ablation table", fail(e)),
    }
    match &c5 {
        Ok(runs) => report(7, "determinism and persistence", determinism(&root, &config, &corpus, &foundation, runs)),
        Err(e) => report(7, "determinism and persistence", fail(format!("no comparison run: {e}"))),
    }
    report(2, "freeze semantics", freeze_semantics(&run_dirs));
    report(8, "mixture purity", mixture_purity(&root));

    println!();
    let mut failed = 0;
    for (id, (name, o)) in &results {
        println!("criterion {id} {:<28} {}  {}", name, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if let Some(dir) = keep {
        println!("artifacts kept in {}", dir.display());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        if std::env::var("PARTLAB_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
