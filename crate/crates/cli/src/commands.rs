use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ictool_core::anatomy::{analyze, AnatomyConfig, SimilarityConfig};
use ictool_core::ensemble::DeltaAggregation;
use ictool_core::evaluation::{vote_table, EvalConfig, TuneSetup};
use ictool_core::layerweights::{tune_weights, HeldoutQuestion, LayerWeights, TuneConfig};
use ictool_core::lens::{LayerThresholds, LensConfig};
use ictool_core::pipeline::{agreement_curve, calibration_bins, ic_auc, labelled_paths, run_pipeline, PipelineConfig, PipelineOutput};
use ictool_core::probing::{probe_grid, ProbeGridConfig};
use ictool_core::toymodel::train::answer_accuracy;
use ictool_core::toymodel::{
    build_trace, read_params, train_toy, write_params, SamplingConfig, SyntheticTask, ToyConfig, ToyParams,
    TraceConfig, TrainConfig,
};
use ictool_core::trace::{read_trace, read_trace_unchecked, validate_trace, write_trace, TraceSet};

use crate::svg;
use crate::{
    AnatomyArgs, CalibrationArgs, DeltaAgg, LensArgs, LensOpts, ProbeArgs, ToyGenArgs, ToySampleArgs, ToyTrainArgs,
    TuneArgs, UsageError, VoteArgs,
};

fn load_trace(path: &Path) -> Result<TraceSet> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_trace(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn out_dir(path: &Path) -> Result<PathBuf> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(path.to_path_buf())
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
    eprintln!("wrote {}", p.display());
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn layer_header(first: &str, n: usize) -> String {
    let mut s = first.to_string();
    for l in 0..n {
        let _ = write!(s, ",layer_{l}");
    }
    s.push('\n');
    s
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn layer_or_dash(l: Option<usize>) -> String {
    l.map_or_else(|| "-".to_string(), |v| v.to_string())
}

fn run_lens(set: &TraceSet, opts: &LensOpts, dataset: &Path) -> Result<PipelineOutput> {
    let thresholds = match &opts.thresholds {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(serde_json::from_str::<LayerThresholds>(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
        None => None,
    };
    let cfg = PipelineConfig {
        lens: LensConfig { raw_final: opts.raw_final },
        thresholds,
        dataset: dataset.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
    };
    Ok(run_pipeline(set, &cfg)?)
}

pub fn validate(path: &Path) -> Result<bool> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let set = read_trace_unchecked(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))?;
    let violations = validate_trace(&set);
    for v in &violations {
        eprintln!("{v}");
    }
    println!(
        "{}: {} records, {} layers, {} violation(s)",
        path.display(),
        set.records.len(),
        set.model_meta.layers,
        violations.len()
    );
    Ok(violations.is_empty())
}

pub fn lens(a: &LensArgs) -> Result<()> {
    let set = load_trace(&a.common.trace)?;
    let dir = out_dir(&a.common.out)?;
    let out = run_lens(&set, &a.lens, &a.common.trace)?;
    let width = set.layers() + 1;
    let mut p_hat = layer_header("record,group", width);
    let mut latent = layer_header("record,group", width);
    let mut paths = std::collections::HashMap::new();
    for q in &out.questions {
        for p in q.greedy.iter().chain(&q.sampled) {
            paths.insert(p.path_id.as_str(), p);
        }
    }
    for (r, s) in set.records.iter().zip(&out.scores) {
        let _ = write!(p_hat, "{},{}", r.example_id, r.path_group);
        for v in &s.normalized_positive {
            let _ = write!(p_hat, ",{v:.9}");
        }
        p_hat.push('\n');
        let _ = write!(latent, "{},{}", r.example_id, r.path_group);
        for l in &paths[r.example_id.as_str()].latent {
            let _ = write!(latent, ",{l}");
        }
        latent.push('\n');
    }
    write_out(&dir, "p_hat.csv", &p_hat)?;
    write_out(&dir, "latent.csv", &latent)?;
    write_out(&dir, "thresholds.json", &to_json(&out.thresholds)?)
}

pub fn ic(a: &LensArgs) -> Result<()> {
    let set = load_trace(&a.common.trace)?;
    let dir = out_dir(&a.common.out)?;
    let out = run_lens(&set, &a.lens, &a.common.trace)?;
    let mut table = String::from("path_id,group,greedy,answer,gold,correct,ic,delta\n");
    for q in &out.questions {
        for (p, greedy) in q.greedy.iter().map(|p| (p, true)).chain(q.sampled.iter().map(|p| (p, false))) {
            let gold = q.gold.map(|g| g.to_string()).unwrap_or_default();
            let correct = q.is_correct(p).map(|c| (c as u8).to_string()).unwrap_or_default();
            let _ = writeln!(
                table,
                "{},{},{},{},{gold},{correct},{:.9},{:.9}",
                p.path_id,
                q.group,
                greedy as u8,
                p.answer,
                p.ic.value(),
                p.delta
            );
        }
    }
    write_out(&dir, "ic.csv", &table)?;

    let labelled = labelled_paths(&out.questions);
    let n_incorrect = labelled.iter().filter(|(_, c)| !c).count();
    let auc = ic_auc(&out.questions).ok();
    let summary = serde_json::json!({
        "paths": labelled.len(),
        "incorrect": n_incorrect,
        "auc": auc,
        "mean_ic": labelled.iter().map(|(p, _)| p.ic.value()).sum::<f64>() / labelled.len().max(1) as f64,
    });
    write_out(&dir, "ic_summary.json", &to_json(&summary)?)?;

    if let Ok(curve) = agreement_curve(&out.questions) {
        let mut csv = String::from("layer,correct,incorrect\n");
        for (l, (c, i)) in curve.correct.iter().zip(&curve.incorrect).enumerate() {
            let f = |v: f64| if v.is_finite() { format!("{v:.6}") } else { String::new() };
            let _ = writeln!(csv, "{l},{},{}", f(*c), f(*i));
        }
        write_out(&dir, "agreement_curve.csv", &csv)?;
        let xs: Vec<f64> = (0..curve.correct.len()).map(|l| l as f64).collect();
        let plot = svg::line_chart(
            "Agreement with the final prediction",
            "layer",
            "agreement rate",
            &xs,
            &[
                (&format!("correct (n={})", curve.n_correct), curve.correct.clone()),
                (&format!("incorrect (n={})", curve.n_incorrect), curve.incorrect.clone()),
            ],
        );
        write_out(&dir, "agreement_curve.svg", &plot)?;
    }
    match auc {
        Some(v) => println!("{} paths, {} incorrect, IC AUC {v:.4}", labelled.len(), n_incorrect),
        None => println!("{} paths, {} incorrect", labelled.len(), n_incorrect),
    }
    Ok(())
}

fn tune_config(t: &crate::TuningOpts, seed: u64) -> TuneConfig {
    TuneConfig {
        lr: t.lr,
        iterations: t.iterations,
        n_heldout: t.n_heldout,
        seed,
        l2: t.l2,
    }
}

pub fn vote(a: &VoteArgs) -> Result<()> {
    if !(0.0..1.0).contains(&a.heldout_fraction) {
        return Err(UsageError(format!("--heldout-fraction {} outside [0, 1)", a.heldout_fraction)).into());
    }
    let set = load_trace(&a.common.trace)?;
    let dir = out_dir(&a.common.out)?;
    let out = run_lens(&set, &a.lens, &a.common.trace)?;
    let transfer = match &a.transfer {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(LayerWeights::from_json(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
        None => None,
    };
    let cfg = EvalConfig {
        seeds: a.seeds.clone(),
        votes_per_question: a.votes,
        delta_aggregation: match a.delta {
            DeltaAgg::Sum => DeltaAggregation::Sum,
            DeltaAgg::Mean => DeltaAggregation::Mean,
            DeltaAgg::Max => DeltaAggregation::Max,
        },
        tune: a.tune.then(|| TuneSetup {
            config: tune_config(&a.tuning, 0),
            heldout_fraction: a.heldout_fraction,
        }),
        transfer,
    };
    let table = vote_table(&out.questions, &cfg)?;
    let csv = table.to_csv();
    write_out(&dir, "vote_table.csv", &csv)?;
    write_out(&dir, "vote_table.json", &to_json(&table)?)?;
    println!("{:<18} {:>16} {:>16}", "method", "raw", "calibrated");
    for r in &table.rows {
        println!(
            "{:<18} {:>7.2} ± {:<6.2} {:>7.2} ± {:<6.2}",
            r.method.label(),
            100.0 * r.raw.0,
            100.0 * r.raw.1,
            100.0 * r.calibrated.0,
            100.0 * r.calibrated.1
        );
    }
    Ok(())
}

pub fn tune(a: &TuneArgs) -> Result<()> {
    let set = load_trace(&a.common.trace)?;
    let dir = out_dir(&a.common.out)?;
    let out = run_lens(&set, &a.lens, &a.common.trace)?;
    let mut order: Vec<usize> = (0..out.questions.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(a.seed));
    order.truncate(a.tuning.n_heldout);
    order.sort_unstable();
    let heldout: Vec<HeldoutQuestion> = order
        .iter()
        .map(|&i| {
            let q = &out.questions[i];
            let gold = q.gold.with_context(|| format!("question {} has no gold label", q.group))?;
            Ok(HeldoutQuestion::from_paths(&q.sampled, gold))
        })
        .collect::<Result<_>>()?;
    let w = tune_weights(&heldout, &tune_config(&a.tuning, a.seed), &a.source)?;
    let mut json = w.to_json()?;
    json.push('\n');
    write_out(&dir, "layer_weights.json", &json)?;
    let meta = w.training_meta.as_ref().expect("set by tuning");
    println!(
        "{} questions, loss {:.6} -> {:.6}, weights {:?}",
        heldout.len(),
        meta.initial_loss,
        meta.final_loss,
        w.w.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()
    );
    Ok(())
}

pub fn probe(a: &ProbeArgs) -> Result<()> {
    let set = load_trace(&a.common.trace)?;
    let dir = out_dir(&a.common.out)?;
    let grid = probe_grid(
        &set,
        ProbeGridConfig {
            seed: a.seed,
            per_cell_split: a.per_cell_split,
        },
    )?;
    write_out(&dir, "probe_grid.csv", &grid.to_csv())?;
    let cols: Vec<String> = (0..=set.layers()).map(|l| l.to_string()).collect();
    let plot = svg::heatmap(
        "Probe validation accuracy",
        "layer",
        "reasoning step",
        &grid.row_labels,
        &cols,
        &grid.accuracies,
    );
    write_out(&dir, "probe_grid.svg", &plot)
}

pub fn anatomy(a: &AnatomyArgs) -> Result<()> {
    let set = load_trace(&a.common.trace)?;
    let dir = out_dir(&a.common.out)?;
    let report = analyze(
        &set,
        AnatomyConfig {
            seed: a.seed,
            similarity: SimilarityConfig {
                top_k: a.top_k,
                per_layer: a.per_layer,
            },
            vocab_k: a.vocab_k,
            ..AnatomyConfig::default()
        },
    )?;
    write_out(&dir, "anatomy.json", &(report.to_json()? + "\n"))?;

    let layers = set.layers();
    let counts = &report.value_vectors.per_layer_top_counts;
    let mut vv = String::from("layer,top_count\n");
    for (l, c) in counts.iter().enumerate() {
        let _ = writeln!(vv, "{l},{c}");
    }
    write_out(&dir, "value_vector_counts.csv", &vv)?;

    let total: usize = counts.iter().sum();
    let share: Vec<f64> = counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect();
    let mut series = vec![("share of top value vectors", share)];
    if let Some(att) = &report.attention {
        let mut csv = String::from("layer,context,query,rationale,other\n");
        for (l, s) in att.scores.iter().enumerate() {
            let _ = writeln!(csv, "{l},{:.6},{:.6},{:.6},{:.6}", s[0], s[1], s[2], s[3]);
        }
        write_out(&dir, "attention_profile.csv", &csv)?;
        series.insert(0, ("query + rationale attention", att.scores.iter().map(|s| s[1] + s[2]).collect()));
    }
    let cats: Vec<String> = (0..layers).map(|l| l.to_string()).collect();
    let plot = svg::grouped_bars("Attention and FFN value vectors by layer", "layer", "fraction", &cats, &series);
    write_out(&dir, "anatomy.svg", &plot)?;
    println!(
        "probe train {:.3} cv {:.3}; attention peak {}; value-vector peak {}",
        report.probe.train_accuracy,
        report.probe.cv_accuracy,
        layer_or_dash(report.attention_peak_layer),
        layer_or_dash(report.value_peak_layer),
    );
    Ok(())
}

pub fn toy_gen(a: &ToyGenArgs) -> Result<()> {
    let dir = out_dir(&a.out)?;
    let task = ictool_core::toymodel::gen_task(a.seed, a.questions, a.max_flips)?;
    write_out(&dir, &a.name, &to_json(&task)?)
}

fn load_task(path: &Path) -> Result<SyntheticTask> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_params(path: &Path) -> Result<ToyParams> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_params(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

pub fn toy_train(a: &ToyTrainArgs) -> Result<()> {
    let task = load_task(&a.task)?;
    let dir = out_dir(&a.out)?;
    let cfg = ToyConfig {
        layers: a.layers,
        hidden: a.hidden,
        heads: a.heads,
        ffn: a.ffn,
        vocab: task.vocab.len(),
        max_seq: a.max_seq,
        pre_norm: !a.no_pre_norm,
        seed: a.seed,
    };
    let tc = TrainConfig {
        steps: a.steps,
        lr: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
        rationale_noise: a.rationale_noise,
        answer_from_rationale: a.answer_from_rationale,
    };
    let (mut params, report) = train_toy(&task.questions, ToyParams::init(cfg)?, &tc)?;
    let mut accuracy = report.train_accuracy;
    if a.zero_blocks {
        params.zero_blocks();
        accuracy = answer_accuracy(&params, &task.questions)?;
        params.train_accuracy = Some(accuracy);
    }
    let f = File::create(dir.join("toy.toyp")).context("creating toy.toyp")?;
    write_params(&params, BufWriter::new(f))?;
    eprintln!("wrote {}", dir.join("toy.toyp").display());
    let mut log = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        let _ = writeln!(log, "{i},{l:.9}");
    }
    write_out(&dir, "train_log.csv", &log)?;
    let summary = serde_json::json!({
        "model": cfg,
        "training": tc,
        "zero_blocks": a.zero_blocks,
        "train_accuracy": accuracy,
        "final_loss": report.losses.last(),
    });
    write_out(&dir, "train_report.json", &to_json(&summary)?)?;
    println!("train accuracy {accuracy:.4}");
    Ok(())
}

pub fn toy_sample(a: &ToySampleArgs) -> Result<()> {
    let params = load_params(&a.params)?;
    let task = load_task(&a.task)?;
    let dir = out_dir(&a.out)?;
    let n = a.questions.unwrap_or(task.questions.len());
    if n > task.questions.len() {
        return Err(UsageError(format!("--questions {n} exceeds the {} in the task", task.questions.len())).into());
    }
    let cfg = TraceConfig {
        n_paths: a.paths,
        sampling: SamplingConfig {
            temperature: a.temperature,
            top_p: a.top_p,
            greedy: false,
        },
        seed: a.seed,
        greedy: !a.no_greedy,
        attention: !a.no_attention,
        ffn: !a.no_ffn,
    };
    let set = build_trace(&params, &task.questions[..n], &cfg)?;
    let path = dir.join(&a.name);
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write_trace(&set, BufWriter::new(f))?;
    eprintln!("wrote {}", path.display());
    println!("{} records over {n} questions", set.records.len());
    Ok(())
}

pub fn calibration(a: &CalibrationArgs) -> Result<()> {
    if a.bins == 0 {
        return Err(UsageError("--bins must be positive".into()).into());
    }
    let set = load_trace(&a.common.trace)?;
    let dir = out_dir(&a.common.out)?;
    let out = run_lens(&set, &a.lens, &a.common.trace)?;
    let bins = calibration_bins(&out.questions, a.bins)?;
    let mut csv = String::from("ic_lo,ic_hi,count,accuracy\n");
    for b in &bins {
        let _ = writeln!(csv, "{:.6},{:.6},{},{}", b.lo, b.hi, b.count, opt(b.accuracy));
    }
    write_out(&dir, "calibration.csv", &csv)?;
    let xs: Vec<f64> = bins.iter().map(|b| (b.lo + b.hi) / 2.0).collect();
    let acc: Vec<f64> = bins.iter().map(|b| b.accuracy.unwrap_or(f64::NAN)).collect();
    let plot = svg::line_chart(
        "Path accuracy by internal consistency",
        "internal consistency",
        "accuracy",
        &xs,
        &[("accuracy", acc), ("identity", xs.clone())],
    );
    write_out(&dir, "calibration.svg", &plot)
}
