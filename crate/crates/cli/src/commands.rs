use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use acan::data::{
    dataset_stats, read_dataset, split_dir, write_dataset, write_tensor, DatasetInfo,
};
use acan::gradsuite::run_suite;
use acan::heads::argmax;
use acan::model::{features, ModelParams};
use acan::trainer::{
    evaluate, metrics_jsonl, run_ablation_with, train_with, RunSummary, TrainData, Variant,
};

use crate::config::RunConfig;
use crate::CliError;

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))
}

pub fn generate_data(config: &Path, out: &Path) -> Result<(), CliError> {
    let rc = RunConfig::from_file(config)?;
    let data = acan::data::generate_dataset(&rc.data.synth, rc.data.seed)?;
    let info = DatasetInfo {
        num_classes: rc.data.synth.num_classes,
        seed: Some(rc.data.seed),
        synth: Some(rc.data.synth.clone()),
    };
    write_dataset(out, &data, &info)?;
    for (d, s, set) in data.splits() {
        println!("{}/{}: {} clips", d.name(), s.name(), set.len());
    }
    Ok(())
}

pub fn train(
    config: &Path,
    out: Option<PathBuf>,
    variant: Option<String>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut rc = RunConfig::from_file(config)?;
    if let Some(v) = variant {
        rc.train.variant = v.parse()?;
    }
    if let Some(s) = seed {
        rc.train.seed = s;
    }
    if let Some(o) = out {
        rc.output = o;
    }
    rc.train.validate()?;
    let data = rc.data.load()?;
    create_dir(&rc.output)?;
    write(&rc.output.join("config.json"), &rc.to_json())?;

    let metrics_path = rc.output.join("metrics.jsonl");
    let mut metrics_file = fs::File::create(&metrics_path)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", metrics_path.display())))?;
    let mut write_err = None;
    let outcome = train_with(
        &rc.train,
        TrainData {
            source: &data.source_train,
            target: &data.target_train,
            target_val: &data.target_val,
        },
        |m| {
            let line = metrics_jsonl(std::slice::from_ref(m)).expect("metrics serialize");
            if let Err(e) = metrics_file
                .write_all(line.as_bytes())
                .and_then(|_| metrics_file.flush())
            {
                write_err.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = write_err {
        return Err(CliError::Runtime(format!(
            "cannot write {}: {e}",
            metrics_path.display()
        )));
    }
    write(
        &rc.output.join("summary.csv"),
        &format!(
            "{}\n{}\n",
            RunSummary::CSV_HEADER,
            outcome.summary.csv_row()
        ),
    )?;
    outcome.params.save(rc.output.join("params"))?;
    println!(
        "{} seed {}: final target top-1 {} (L_y {:.4}) -> {}",
        outcome.summary.variant,
        outcome.summary.seed,
        outcome.summary.final_target_top1,
        outcome.summary.final_ly,
        rc.output.display()
    );
    Ok(())
}

pub fn eval(params: &Path, data: &Path) -> Result<(), CliError> {
    let params = ModelParams::load(params)?;
    let (data, _) = read_dataset(data)?;
    for (d, s, set) in data.splits() {
        println!("{}/{} top1 {}", d.name(), s.name(), evaluate(&params, set)?);
    }
    Ok(())
}

fn parse_variants(list: &str) -> Result<Vec<Variant>, CliError> {
    if list == "all" {
        return Ok(Variant::ALL.to_vec());
    }
    let vs = list
        .split(',')
        .map(|v| v.trim().parse::<Variant>().map_err(CliError::from))
        .collect::<Result<Vec<_>, _>>()?;
    if vs.is_empty() {
        return Err(CliError::usage("no variants given"));
    }
    Ok(vs)
}

pub fn ablate(
    config: &Path,
    variants: &str,
    seeds: usize,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let mut rc = RunConfig::from_file(config)?;
    if let Some(o) = out {
        rc.output = o;
    }
    let variants = parse_variants(variants)?;
    if seeds == 0 {
        return Err(CliError::usage("--seeds must be >= 1"));
    }
    rc.train.validate()?;
    let seeds: Vec<u64> = (0..seeds as u64).map(|i| rc.train.seed + i).collect();
    let data = rc.data.load()?;
    create_dir(&rc.output)?;
    write(&rc.output.join("config.json"), &rc.to_json())?;
    let report = run_ablation_with(
        &rc.train,
        &variants,
        &seeds,
        TrainData {
            source: &data.source_train,
            target: &data.target_train,
            target_val: &data.target_val,
        },
        |r| {
            log::info!(
                "{} seed {}: final target top-1 {:.4}",
                r.variant,
                r.seed,
                r.final_target_top1
            )
        },
    )?;
    let mut csv = format!("{}\n", RunSummary::CSV_HEADER);
    for r in &report.runs {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write(&rc.output.join("summary.csv"), &csv)?;
    write(
        &rc.output.join("ablation.json"),
        &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"),
    )?;
    print!("{}", report.render());
    Ok(())
}

pub fn gradcheck(seed: u64) -> Result<(), CliError> {
    let checks = run_suite(seed)?;
    let width = checks
        .iter()
        .map(|c| c.name.chars().count())
        .max()
        .unwrap_or(0);
    for c in &checks {
        println!(
            "{:<width$}  max rel err {:.3e}  (tol {:.0e})  {}",
            c.name,
            c.max_rel_err,
            c.tolerance,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    if failed > 0 {
        return Err(CliError::Runtime(format!(
            "{failed} of {} checks exceeded tolerance",
            checks.len()
        )));
    }
    Ok(())
}

pub fn stats(data: &Path) -> Result<(), CliError> {
    let (data, _) = read_dataset(data)?;
    println!(
        "{:<14} {:>6}  {:<24} {:<24}",
        "split", "clips", "RGB mean", "RGB std"
    );
    let fmt3 = |v: &[f64]| {
        format!(
            "[{}]",
            v.iter()
                .map(|x| format!("{x:.3}"))
                .collect::<Vec<_>>()
                .join(",")
        )
    };
    let mut means = Vec::new();
    for (d, s, set) in data.splits() {
        let st = dataset_stats(&set.videos)?;
        println!(
            "{:<14} {:>6}  {:<24} {:<24}",
            format!("{}/{}", d.name(), s.name()),
            set.len(),
            fmt3(&st.mean),
            fmt3(&st.std)
        );
        means.push(st.mean.iter().sum::<f64>() / st.mean.len() as f64);
    }
    let source = (means[0] + means[1]) / 2.0;
    let target = (means[2] + means[3]) / 2.0;
    println!(
        "mean intensity: source {source:.3}, target {target:.3} (ratio {:.2})",
        target / source
    );
    Ok(())
}

pub fn dump_features(params: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let params = ModelParams::load(params)?;
    let (data, _) = read_dataset(data)?;
    for (d, s, set) in data.splits() {
        let dir = split_dir(out, d, s);
        create_dir(&dir)?;
        let mut index = String::from("index,label,prediction\n");
        for (i, (v, &l)) in set.videos.iter().zip(&set.labels).enumerate() {
            let f = features(&params, v)?;
            write_tensor(dir.join(format!("f_{i:05}.actn")), &f.f)?;
            write_tensor(dir.join(format!("f_c_{i:05}.actn")), &f.f_c)?;
            write_tensor(dir.join(format!("pcm_{i:05}.actn")), &f.pcm)?;
            index.push_str(&format!("{i},{l},{}\n", argmax(f.probs.data())));
        }
        write(&dir.join("index.csv"), &index)?;
        println!(
            "{}/{}: {} clips -> {}",
            d.name(),
            s.name(),
            set.len(),
            dir.display()
        );
    }
    Ok(())
}
