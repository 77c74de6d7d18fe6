//! One check per acceptance criterion. Prints `ACCEPTANCE <name>: PASS|FAIL`
//! for each and exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use mpe_core::correction::{CurateOptions, Curator, PlanLineage, RuleCritic, Unvalidated};
use mpe_core::dataset::{avg_steps, build_dpo_pairs, success_table, LineageCorpus, DEFAULT_EPSILON};
use mpe_core::exec::{execute_plan, ExecutionTrace, FailureModel, MockBackend, Workspace};
use mpe_core::metrics::{channels_for, score_output, Channel, ExecutedPlan, MetricReport, ScoreOptions, StubScorer};
use mpe_core::plan::{lint_plan, parse_plan, parse_plan_str, serialize_plan, type_check_plan, validate_plan};
use mpe_core::synth::{
    linear_plan, mutate, random_valid_plan, synthetic_requests, TemplateGenerator, MUTATION_KINDS,
    RANDOM_PLAN_MATERIALS,
};
use mpe_core::{media, Extension, Modality, Plan, TaskType, ToolLibrary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::Value;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn staged_random_workspace() -> Workspace {
    let ws = Workspace::in_memory();
    for m in RANDOM_PLAN_MATERIALS {
        let ext: Extension = m.rsplit('.').next().unwrap().parse().unwrap();
        ws.stage(m, media::placeholder(ext, m)).unwrap();
    }
    ws
}

fn type_checker_soundness() -> Check {
    let started = Instant::now();
    let lib = ToolLibrary::builtin();
    let backend = MockBackend::new(FailureModel::new(0.0, 0));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..1000 {
        let n = rng.random_range(1..=10);
        let plan = random_valid_plan(&lib, &mut rng, n);
        let diagnostics = type_check_plan(&plan, &lib);
        ensure(diagnostics.is_empty(), || format!("valid plan {i} flagged: {diagnostics:?}"))?;
        let trace = execute_plan(&plan, &lib, &backend, &staged_random_workspace()).map_err(|e| e.to_string())?;
        ensure(trace.overall_success, || format!("valid plan {i} failed under p=0: {trace:?}"))?;
    }

    let mut flagged = 0;
    let mut made = 0;
    while made < 1000 {
        let kind = MUTATION_KINDS[made % MUTATION_KINDS.len()];
        let n = rng.random_range(1..=10);
        let plan = random_valid_plan(&lib, &mut rng, n);
        let Some(bad) = mutate(&plan, &lib, kind, &mut rng) else { continue };
        made += 1;
        if validate_plan(&bad, &lib).iter().any(|d| d.kind == kind) {
            flagged += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(flagged >= 999, || format!("only {flagged}/1000 mutations flagged"))?;
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("1000 valid plans clean, {flagged}/1000 mutations flagged, {secs:.1}s"))
}

fn success_decay() -> Check {
    let lib = ToolLibrary::builtin();
    let p = 0.05;
    let backend = MockBackend::new(FailureModel::new(p, 42));
    let mut rates = Vec::new();
    for n in [2usize, 4, 6, 8, 10] {
        let ok = (0..10_000)
            .into_par_iter()
            .filter(|t| {
                let plan = linear_plan(n, &format!("decay trial {n}/{t}"));
                execute_plan(&plan, &lib, &backend, &Workspace::in_memory())
                    .map(|trace| trace.overall_success)
                    .unwrap_or(false)
            })
            .count();
        let rate = ok as f64 / 10_000.0;
        let expected = (1.0 - p).powi(n as i32);
        ensure((rate - expected).abs() <= 0.03, || {
            format!("n={n}: empirical {rate:.4} vs analytic {expected:.4}")
        })?;
        rates.push((n, rate, expected));
    }
    ensure(rates.windows(2).all(|w| w[1].1 < w[0].1), || format!("not decreasing: {rates:?}"))?;
    Ok(rates
        .iter()
        .map(|(n, r, e)| format!("n={n} {r:.3}/{e:.3}"))
        .collect::<Vec<_>>()
        .join(", "))
}

fn curate_all(per_task: usize, seed: u64, fail_prob: f64, execute_plan1: bool) -> Result<Vec<PlanLineage>, String> {
    let lib = ToolLibrary::builtin();
    let generator = TemplateGenerator::new(seed);
    let critic = RuleCritic::default();
    let backend = MockBackend::new(FailureModel::new(fail_prob, seed));
    let scorer = StubScorer::new(seed);
    let curator = Curator {
        lib: &lib,
        generator: &generator,
        critic: &critic,
        backend: &backend,
        scorer: &scorer,
        options: CurateOptions {
            execute_plan1,
            ..CurateOptions::default()
        },
    };
    synthetic_requests(per_task, seed)
        .par_iter()
        .map(|r| curator.curate(r).map_err(|e| format!("{}: {e}", r.request_id)))
        .collect()
}

fn step_growth() -> Check {
    let lib = ToolLibrary::builtin();
    let lineages = curate_all(10, 2024, 0.0, false)?;
    ensure(lineages.len() == 180, || format!("{} lineages", lineages.len()))?;
    let mut with_advisories = 0;
    for task in TaskType::ALL {
        let group: Vec<&PlanLineage> = lineages.iter().filter(|l| l.task_type == task).collect();
        let mean = |v: usize| group.iter().map(|l| l.plans()[v].steps.len()).sum::<usize>() as f64 / group.len() as f64;
        let (m1, m2, m3) = (mean(0), mean(1), mean(2));
        ensure(m1 <= m2 && m2 <= m3, || format!("{}: {m1:.1} {m2:.1} {m3:.1}", task.code()))?;
        let advised = group
            .iter()
            .any(|l| validate_plan(&l.plan1, &lib).is_empty() && !lint_plan(&l.plan1, &lib).is_empty());
        if advised {
            with_advisories += 1;
            ensure(m2 > m1, || format!("{}: advisories present but {m1:.1} -> {m2:.1}", task.code()))?;
        }
    }
    let table = avg_steps(&LineageCorpus::new(lineages).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    println!("{}", table.render('\t').trim_end());
    Ok(format!("monotone on 18 task types, strict on {with_advisories} with advisories"))
}

fn trace(ok: bool) -> ExecutionTrace {
    ExecutionTrace {
        plan_id: String::new(),
        results: vec![],
        final_artifacts: vec![],
        overall_success: ok,
        aborted: false,
    }
}

fn random_report(rng: &mut ChaCha8Rng) -> Option<MetricReport> {
    if rng.random_bool(0.2) {
        return None;
    }
    let mut scores = BTreeMap::new();
    for c in Channel::ALL {
        if rng.random_bool(0.5) {
            let (lo, hi) = c.range();
            // Coarse grid so that ties and sub-epsilon gaps occur.
            scores.insert(c, lo + (hi - lo) * f64::from(rng.random_range(0..=20u8)) / 20.0);
        }
    }
    Some(MetricReport::new("p", scores))
}

fn synthetic_corpus(size: usize, seed: u64) -> Vec<PlanLineage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..size)
        .map(|i| {
            let id = format!("req-{i:05}");
            let mut steps = || rng.random_range(1..=12);
            let (a, b, c) = (steps(), steps(), steps());
            let executed1 = rng.random_bool(0.3);
            PlanLineage {
                request_id: id.clone(),
                query: format!("query {i}"),
                task_type: TaskType::ALL[rng.random_range(0..TaskType::ALL.len())],
                materials: vec![],
                library_digest: "lib".into(),
                plan1: linear_plan(a, &format!("{id} one")),
                plan2: linear_plan(b, &format!("{id} two")),
                plan3: linear_plan(c, &format!("{id} three")),
                trace1: executed1.then(|| trace(rng.random_bool(0.6))),
                report1: if executed1 { random_report(&mut rng) } else { None },
                trace2: trace(rng.random_bool(0.7)),
                report2: random_report(&mut rng),
                trace3: trace(rng.random_bool(0.8)),
                report3: random_report(&mut rng),
                unvalidated: Unvalidated::default(),
            }
        })
        .collect()
}

fn statistics_exactness() -> Check {
    let lineages = synthetic_corpus(1000, 77);
    // Oracle: one pass, accumulating sums and counts per cell.
    let mut step_sum = [[0usize; 18]; 3];
    let mut step_n = [[0usize; 18]; 3];
    let mut ok = [[0usize; 18]; 3];
    let mut runs = [[0usize; 18]; 3];
    for l in &lineages {
        let c = TaskType::ALL.iter().position(|&t| t == l.task_type).unwrap();
        for (v, p) in [&l.plan1, &l.plan2, &l.plan3].into_iter().enumerate() {
            step_sum[v][c] += p.steps.len();
            step_n[v][c] += 1;
        }
        for (v, t) in [l.trace1.as_ref(), Some(&l.trace2), Some(&l.trace3)].into_iter().enumerate() {
            if let Some(t) = t {
                runs[v][c] += 1;
                ok[v][c] += usize::from(t.overall_success);
            }
        }
    }
    let corpus = LineageCorpus::new(lineages).map_err(|e| e.to_string())?;
    let steps = avg_steps(&corpus).map_err(|e| e.to_string())?;
    let success = success_table(&corpus).map_err(|e| e.to_string())?;
    ensure(steps.rows == ["Plan 1", "Plan 2", "Plan 3"], || format!("rows {:?}", steps.rows))?;
    ensure(success.rows == ["Plan 1", "Plan 2", "Plan 3"], || format!("rows {:?}", success.rows))?;
    for (c, task) in TaskType::ALL.iter().enumerate() {
        for v in 0..3 {
            let row = format!("Plan {}", v + 1);
            let want = (step_n[v][c] > 0).then(|| step_sum[v][c] as f64 / step_n[v][c] as f64);
            let got = steps.cell(&row, *task);
            ensure(got.map(f64::to_bits) == want.map(f64::to_bits), || {
                format!("steps {row} {}: {got:?} vs {want:?}", task.code())
            })?;
            let want = (runs[v][c] > 0).then(|| 100.0 * ok[v][c] as f64 / runs[v][c] as f64);
            let got = success.cell(&row, *task);
            ensure(got.map(f64::to_bits) == want.map(f64::to_bits), || {
                format!("success {row} {}: {got:?} vs {want:?}", task.code())
            })?;
        }
    }
    let header = format!(
        "plan,{}",
        TaskType::ALL.iter().map(|t| t.code()).collect::<Vec<_>>().join(",")
    );
    let rendered = steps.render(',');
    ensure(rendered.lines().next() == Some(header.as_str()), || "header layout".into())?;
    for line in rendered.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').skip(1).collect();
        ensure(cells.len() == 18, || format!("row width {line}"))?;
        ensure(
            cells.iter().all(|c| *c == "-" || c.split_once('.').is_some_and(|(_, d)| d.len() == 1)),
            || format!("one decimal: {line}"),
        )?;
    }
    for line in success.render(',').lines().skip(1) {
        ensure(line.split(',').skip(1).all(|c| c == "-" || c.parse::<u32>().is_ok()), || {
            format!("integers: {line}")
        })?;
    }
    Ok("1000 lineages, 54 step cells and 54 success cells bit-identical".into())
}

type PairKey = (String, String, String, u64);

fn brute_force_pairs(lineages: &[PlanLineage], epsilon: f64, allow_failed_losers: bool) -> Vec<PairKey> {
    let mut out = Vec::new();
    for l in lineages {
        let stages = [
            (&l.plan1, l.trace1.as_ref(), l.report1.as_ref()),
            (&l.plan2, Some(&l.trace2), l.report2.as_ref()),
            (&l.plan3, Some(&l.trace3), l.report3.as_ref()),
        ];
        for (wi, w) in stages.iter().enumerate() {
            for (li, lo) in stages.iter().enumerate() {
                if wi == li {
                    continue;
                }
                let (Some(wt), Some(wr), Some(lt), Some(lr)) = (w.1, w.2, lo.1, lo.2) else { continue };
                if !wt.overall_success || !(lt.overall_success || allow_failed_losers) {
                    continue;
                }
                let margin = wr.aggregate - lr.aggregate;
                if margin >= epsilon {
                    out.push((
                        l.request_id.clone(),
                        serialize_plan(w.0).to_string(),
                        serialize_plan(lo.0).to_string(),
                        margin.to_bits(),
                    ));
                }
            }
        }
    }
    out.sort();
    out
}

fn pair_soundness() -> Check {
    let mut lineages = curate_all(3, 9, 0.1, true)?;
    lineages.extend(synthetic_corpus(400, 5));
    let corpus = LineageCorpus::new(lineages.clone()).map_err(|e| e.to_string())?;
    let mut total = 0;
    for (epsilon, allow) in [(DEFAULT_EPSILON, false), (DEFAULT_EPSILON, true), (0.2, false)] {
        let pairs = build_dpo_pairs(&corpus, epsilon, allow);
        for p in &pairs {
            ensure(p.margin >= epsilon && p.margin > 0.0, || format!("margin {} < {epsilon}", p.margin))?;
        }
        let mut got: Vec<PairKey> = pairs
            .iter()
            .map(|p| (p.request_id.clone(), p.winner.to_string(), p.loser.to_string(), p.margin.to_bits()))
            .collect();
        got.sort();
        let want = brute_force_pairs(&lineages, epsilon, allow);
        ensure(got == want, || {
            format!("epsilon {epsilon} allow {allow}: {} emitted vs {} expected", got.len(), want.len())
        })?;
        total += got.len();
    }
    ensure(total > 0, || "no pairs at all".into())?;
    Ok(format!("{total} pairs over 3 settings match enumeration"))
}

fn strip_durations(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.remove("duration_ms");
            map.values_mut().for_each(strip_durations);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_durations),
        _ => {}
    }
}

fn curate_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let bin = env!("CARGO_BIN_EXE_mpe");
    let run = |args: &[&str]| -> Result<(), String> {
        let o = Command::new(bin).args(args).output().map_err(|e| e.to_string())?;
        ensure(o.status.success(), || {
            format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr))
        })
    };
    let req = dir.path().join("req");
    let req_s = req.to_str().unwrap();
    run(&["synth", "--per-task", "1", "--seed", "5", "--out", req_s])?;
    let mut compared = 0;
    for name in ["mv-v-000.json", "ia-v-000.json", "ma-i-000.json"] {
        let Some(request) = Some(req.join(name)).filter(|p| p.exists()) else { continue };
        let read = |p: &Path| -> Result<Value, String> {
            let mut v: Value = serde_json::from_str(&fs::read_to_string(p).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
            strip_durations(&mut v);
            Ok(v)
        };
        let mut outputs = Vec::new();
        for k in 0..2 {
            let out = dir.path().join(format!("{name}.{k}"));
            run(&[
                "curate",
                request.to_str().unwrap(),
                "--seed",
                "7",
                "--fail-prob",
                "0.1",
                "--exec-plan1",
                "--out",
                out.to_str().unwrap(),
            ])?;
            outputs.push(serde_json::to_string_pretty(&read(&out)?).unwrap());
        }
        ensure(outputs[0] == outputs[1], || format!("{name}: lineage files differ"))?;
        compared += 1;
    }
    ensure(compared > 0, || "no request files found".into())?;
    Ok(format!("{compared} requests curated twice, identical after removing durations"))
}

fn round_trip() -> Check {
    let lib = ToolLibrary::builtin();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..1000 {
        let n = rng.random_range(1..=12);
        let plan = random_valid_plan(&lib, &mut rng, n);
        let doc = serialize_plan(&plan);
        let back = parse_plan(&doc).map_err(|e| format!("plan {i}: {e}"))?;
        ensure(back == plan && serialize_plan(&back) == doc, || format!("plan {i} changed"))?;
    }
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/plans");
    let mut fixtures = 0;
    for entry in fs::read_dir(&dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let text = fs::read_to_string(&path).map_err(|e| e.to_string())?;
        let doc: Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        let plan: Plan = parse_plan_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        ensure(serialize_plan(&plan) == doc, || format!("{} changed", path.display()))?;
        fixtures += 1;
    }
    ensure(fixtures > 0, || "no fixtures".into())?;
    Ok(format!("1000 generated plans and {fixtures} fixtures"))
}

fn metric_applicability() -> Check {
    let table = |m: Modality, audio: bool| -> BTreeSet<&'static str> {
        let names: &[&str] = match (m, audio) {
            (Modality::Text, _) => &["text_alignment"],
            (Modality::Image, _) => &["image_aesthetic", "image_emotion", "image_need"],
            (Modality::Audio | Modality::Speech, _) => &["audio_emotion", "audio_need"],
            (Modality::Video, false) => &["video_aesthetic", "video_emotion", "video_need"],
            (Modality::Video, true) => &[
                "video_aesthetic",
                "video_emotion",
                "video_need",
                "audio_emotion",
                "audio_need",
                "av_alignment",
            ],
        };
        names.iter().copied().collect()
    };
    let mut cases = 0;
    for m in Modality::ALL {
        for audio in [false, true] {
            let got: BTreeSet<&str> = channels_for(m, audio).into_iter().map(Channel::name).collect();
            ensure(got == table(m, audio), || format!("{m} audio={audio}: {got:?}"))?;
            cases += 1;
        }
    }

    // End to end: a muxed slideshow is scored on six channels.
    let plan = parse_plan_str(
        r#"{"query": "beach holiday slideshow", "task_type": "MI-V", "materials": ["b.png"],
            "steps": [
              {"index": 0, "tool": "image_png_to_video_mp4", "args": {"images": [{"ref": "b.png"}]}, "output": "v.mp4"},
              {"index": 1, "tool": "text_txt_to_audio_mp3", "args": {"prompt": {"literal": "beach waves"}}, "output": "m.mp3"},
              {"index": 2, "tool": "video_mp4_audio_mp3_to_video_mp4",
               "args": {"video": {"ref": "v.mp4"}, "audio": {"ref": "m.mp3"}}, "output": "final.mp4"}
            ]}"#,
    )
    .map_err(|e| e.to_string())?;
    let lib = ToolLibrary::builtin();
    let backend = MockBackend::new(FailureModel::new(0.0, 0));
    let ws = Workspace::in_memory();
    ws.stage("b.png", media::placeholder(Extension::Png, "beach")).map_err(|e| e.to_string())?;
    let trace = execute_plan(&plan, &lib, &backend, &ws).map_err(|e| e.to_string())?;
    let run = ExecutedPlan {
        plan: &plan,
        trace: &trace,
        lib: &lib,
        backend: &backend,
        workspace: &ws,
    };
    let report = score_output(&run, &StubScorer::new(0), ScoreOptions::default()).map_err(|e| e.to_string())?;
    let got: BTreeSet<&str> = report.scores.keys().map(|c| c.name()).collect();
    ensure(got == table(Modality::Video, true), || format!("scored {got:?}"))?;
    Ok(format!("{cases} modality x audio cases, 6-channel video scored"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("type-checker-soundness", type_checker_soundness),
        ("success-decay", success_decay),
        ("step-growth", step_growth),
        ("statistics-exactness", statistics_exactness),
        ("pair-soundness", pair_soundness),
        ("curate-determinism", curate_determinism),
        ("round-trip", round_trip),
        ("metric-applicability", metric_applicability),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let started = Instant::now();
        let outcome = check();
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("ACCEPTANCE {name}: PASS ({detail}; {secs:.1}s)"),
            Err(why) => {
                failed += 1;
                println!("ACCEPTANCE {name}: FAIL ({why})");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
