use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use fsnas::pipeline::{
    claim_out_dir, ensure_oracles, input_hashes, run_progressive, run_stages, stage_dir, unix_now, PreparedData,
    RunConfig, RunManifest, StageStart,
};
use fsnas::rank::{rank_report, EpochTrace, EvalSet};
use fsnas::space::SearchSpace;
use fsnas::split::{inheritance_map, lr_multipliers, GroupPlan, LrPreset};
use fsnas::supernet::SuperNet;
use fsnas::{Error, Result};
use serde_json::json;

use crate::{
    CheckpointCmd, Cli, Command, EvalCmd, Format, Global, LrCmd, OracleCmd, Preset, RunCmd, SpaceCmd, SplitCmd,
    TraceCmd, TrainCmd,
};

pub fn dispatch(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Space {
            cmd: SpaceCmd::Info { space, data },
        } => space_info(g, space.as_deref(), *data),
        Command::Split {
            cmd: SplitCmd::Plan { space, group },
        } => split_plan(g, space.as_deref(), *group),
        Command::Lr {
            cmd: LrCmd::Plan { preset, group, space },
        } => lr_plan(g, *preset, *group, space.as_deref()),
        Command::Train { cmd: TrainCmd::OneShot } => train(g, None, None),
        Command::Train {
            cmd: TrainCmd::FewShot { from, to },
        } => train(g, Some(from), *to),
        Command::Run {
            cmd: RunCmd::Progressive,
        } => progressive(g),
        Command::Oracle { cmd: OracleCmd::Run } => oracle_run(g),
        Command::Eval {
            cmd: EvalCmd::Rank { checkpoint, eval_set },
        } => eval_rank(g, checkpoint, eval_set.as_deref()),
        Command::Trace {
            cmd: TraceCmd::Export { run, group, format },
        } => trace_export(run, *group, *format),
        Command::Checkpoint {
            cmd: CheckpointCmd::Inspect { path },
        } => inspect(path),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// The configured run, with `--seed` applied. A manifest passed as `--config` yields its snapshot.
fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        None => RunConfig::desk(),
        Some(path) => {
            let value: serde_json::Value = serde_json::from_str(&read(path)?)?;
            let snapshot = match value.get("config") {
                Some(c) if value.get("command").is_some() => c.clone(),
                _ => value,
            };
            let cfg: RunConfig = serde_json::from_value(snapshot)?;
            cfg.validate()?;
            cfg
        }
    };
    if let Some(s) = g.seed {
        cfg.init_seed = s;
        cfg.one_shot.seed = s;
        cfg.few_shot.seed = s;
        cfg.oracle.seed = s;
    }
    Ok(cfg)
}

fn resolve_space(g: &Global, name: Option<&str>) -> Result<SearchSpace> {
    let Some(name) = name else {
        return Ok(load_config(g)?.space);
    };
    let path = Path::new(name);
    if path.exists() {
        return SearchSpace::load(path);
    }
    match name.trim_end_matches(".json") {
        "desk-small" => Ok(SearchSpace::desk_small()),
        "resnet48-track1" => Ok(SearchSpace::resnet48_track1()),
        _ => Err(Error::Input(format!("no space file or preset named {name}"))),
    }
}

fn jobs(g: &Global) -> usize {
    if g.deterministic {
        1
    } else {
        g.jobs.max(1)
    }
}

fn logger(g: &Global) -> impl Fn(&str) + Sync {
    let quiet = g.quiet;
    move |line: &str| {
        if !quiet {
            eprintln!("{line}");
        }
    }
}

fn manifest(g: &Global, cfg: &RunConfig, started: u64, inputs: Vec<(String, String)>) -> RunManifest {
    let data_seed = match &cfg.data.source {
        fsnas::pipeline::DataSource::Synthetic { seed, .. } => Some(*seed),
        fsnas::pipeline::DataSource::Binary { .. } => None,
    };
    RunManifest {
        command: std::env::args().collect(),
        config: serde_json::to_value(cfg).expect("config serializes"),
        seeds: json!({
            "init": cfg.init_seed,
            "one_shot": cfg.one_shot.seed,
            "few_shot": cfg.few_shot.seed,
            "oracle": cfg.oracle.seed,
            "data": data_seed,
            "eval_archs": cfg.eval.arch_seed,
            "eval_subset": cfg.eval.subset_seed,
            "recalibration": cfg.eval.recalib_seed,
        }),
        started_unix: started,
        finished_unix: started,
        deterministic: g.deterministic,
        jobs: jobs(g),
        inputs,
        outputs: Vec::new(),
        notes: serde_json::Value::Null,
    }
}

fn space_info(g: &Global, space: Option<&str>, data: bool) -> Result<()> {
    let s = resolve_space(g, space)?;
    let mut out = String::new();
    let _ = writeln!(out, "space: {}", s.name.as_deref().unwrap_or("unnamed"));
    let _ = writeln!(
        out,
        "stem: {} channels, stride {}; input {}x{}, {} classes",
        s.stem_channels, s.stem_stride, s.input_resolution, s.input_resolution, s.num_classes
    );
    for (i, st) in s.stages.iter().enumerate() {
        let _ = writeln!(
            out,
            "stage {}: depths {:?}, candidates {:?}",
            i + 1,
            st.depth_choices,
            st.candidate_channels()
        );
    }
    let caps: Vec<String> = s.all_candidates().iter().map(|c| c.len().to_string()).collect();
    let _ = writeln!(out, "group capacities: {}", caps.join(","));
    let _ = writeln!(out, "max groups: {}", GroupPlan::max_groups(&s));
    match s.space_size() {
        Some(n) => {
            let _ = writeln!(out, "space size: {n}");
        }
        None => {
            let _ = writeln!(out, "space size: overflows u128");
        }
    }
    if data {
        let cfg = load_config(g)?;
        let ds = cfg.data.load()?;
        let _ = writeln!(out, "data: {}, {} items, sha256 {}", ds.name, ds.len(), ds.content_hash());
    }
    print!("{out}");
    Ok(())
}

fn plan_at(space: &SearchSpace, group: usize) -> Result<GroupPlan> {
    let max = GroupPlan::max_groups(space);
    if group == 0 || group > max {
        return Err(Error::Config(format!("group {group} outside 1..={max}")));
    }
    let mut plan = GroupPlan::initial(space);
    while plan.g < group {
        plan = plan.next_split(space)?;
    }
    Ok(plan)
}

/// The plan at `--group` and, past g=1, the copy map from the plan one split earlier.
fn split_plan(g: &Global, space: Option<&str>, group: usize) -> Result<()> {
    let s = resolve_space(g, space)?;
    let plan = plan_at(&s, group)?;
    let inheritance = if group > 1 {
        Some(inheritance_map(&plan_at(&s, group - 1)?, &plan, &s)?)
    } else {
        None
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({ "plan": plan, "inheritance": inheritance }))?
    );
    Ok(())
}

fn lr_plan(g: &Global, preset: Option<Preset>, group: usize, space: Option<&str>) -> Result<()> {
    match preset {
        Some(Preset::Table2) => {
            let table = LrPreset::table2();
            let rows: Vec<_> = table.rows.iter().filter(|r| r.g == group).collect();
            if rows.is_empty() {
                return Err(Error::Config(format!("table2 has no rows for group {group}")));
            }
            let mut out = String::from("group,stage,channels,multiplier\n");
            for r in rows {
                let _ = writeln!(out, "{},{},{},{}", r.g, r.stage, r.channels, r.multiplier);
            }
            print!("{out}");
        }
        None => {
            let cfg = load_config(g)?;
            let s = match space {
                Some(_) => resolve_space(g, space)?,
                None => cfg.space.clone(),
            };
            let plan = plan_at(&s, group)?;
            print!("{}", lr_multipliers(&plan, &cfg.lr_rule, &s)?.to_csv());
        }
    }
    Ok(())
}

fn progressive(g: &Global) -> Result<()> {
    let started = unix_now();
    let cfg = load_config(g)?;
    let log = logger(g);
    let outcome = run_progressive(&cfg, &g.out_dir, jobs(g), &log)?;
    let mut m = manifest(g, &cfg, started, outcome.input_hashes.clone());
    m.notes = json!({
        "resumed_stages": outcome.resumed,
        "trained_stages": cfg.schedule.iter().filter(|s| !outcome.resumed.contains(s)).collect::<Vec<_>>(),
    });
    let path = m.finish(&g.out_dir)?;
    print!("{}", outcome.summary.to_table());
    log(&format!("manifest: {}", path.display()));
    Ok(())
}

fn oracle_run(g: &Global) -> Result<()> {
    let started = unix_now();
    let cfg = load_config(g)?;
    let log = logger(g);
    claim_out_dir(&cfg, &g.out_dir)?;
    let data = PreparedData::new(&cfg)?;
    let set = ensure_oracles(&cfg, &data, &g.out_dir, jobs(g), &log)?;
    for e in &set.entries {
        println!("{} {:.4}", e.arch, e.oracle_accuracy.unwrap_or(f64::NAN));
    }
    manifest(g, &cfg, started, input_hashes(&cfg, &data)).finish(&g.out_dir)?;
    Ok(())
}

fn existing_eval_set(out: &Path) -> Result<Option<EvalSet>> {
    let path = out.join("eval_set.json");
    if !path.exists() {
        return Ok(None);
    }
    let set: EvalSet = serde_json::from_str(&read(&path)?)?;
    Ok(set.oracle_accuracies().is_ok().then_some(set))
}

fn train(g: &Global, from: Option<&Path>, to: Option<usize>) -> Result<()> {
    let started = unix_now();
    let cfg = load_config(g)?;
    let log = logger(g);
    claim_out_dir(&cfg, &g.out_dir)?;
    let data = PreparedData::new(&cfg)?;
    let set = existing_eval_set(&g.out_dir)?;
    if set.is_none() {
        log("no eval set with oracle accuracies in the output directory; epochs are not ranked");
    }
    let (schedule, start) = match from {
        None => (vec![1], StageStart::Fresh { resume: false }),
        Some(path) => {
            let (net, _) = SuperNet::load(path)?;
            let g0 = net.plan().g;
            let last = to.unwrap_or(g0 + 1);
            if last <= g0 {
                return Err(Error::Usage(format!("--to {last} must exceed the checkpoint's g={g0}")));
            }
            ((g0 + 1..=last).collect(), StageStart::From(Box::new(net)))
        }
    };
    let outcome = run_stages(&cfg, &data, &g.out_dir, set.as_ref(), &schedule, start, &log)?;
    for r in &outcome.records {
        match &r.ranking {
            Some(k) => println!(
                "g={} epochs={} final={} selected={} pearson={:.5} kendall={:.5}",
                r.g, r.epochs, r.final_checkpoint, k.selected_checkpoint, k.pearson, k.kendall_tau
            ),
            None => println!("g={} epochs={} final={}", r.g, r.epochs, r.final_checkpoint),
        }
    }
    let mut inputs = input_hashes(&cfg, &data);
    if let Some(p) = from {
        inputs.push(("parent_checkpoint".into(), fsnas::pipeline::sha256_hex(read(p)?.as_bytes())));
    }
    manifest(g, &cfg, started, inputs).finish(&g.out_dir)?;
    Ok(())
}

fn eval_rank(g: &Global, checkpoint: &Path, eval_set: Option<&Path>) -> Result<()> {
    let started = unix_now();
    let cfg = load_config(g)?;
    let default_set = g.out_dir.join("eval_set.json");
    let set_path = eval_set.unwrap_or(&default_set);
    let set: EvalSet = serde_json::from_str(&read(set_path)?)?;
    let (net, _) = SuperNet::load(checkpoint)?;
    set.validate(net.space())?;
    let data = PreparedData::new(&cfg)?;
    let report = rank_report(
        &set,
        &net,
        &data.val,
        &data.recalib,
        cfg.eval.batch_size,
        &checkpoint.to_string_lossy(),
    )?;
    let dir = g.out_dir.join("eval_rank");
    fs::create_dir_all(&dir).map_err(|source| Error::Io {
        path: dir.clone(),
        source,
    })?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|source| Error::Io { path: p, source })
    };
    write("report.json", serde_json::to_string_pretty(&report)?)?;
    write("report.csv", report.to_csv())?;
    println!(
        "n={} pearson={:?} pearson_rank={:?} kendall={:?}",
        report.n, report.pearson, report.pearson_rank, report.kendall_tau
    );
    let mut inputs = input_hashes(&cfg, &data);
    inputs.push(("checkpoint".into(), fsnas::pipeline::sha256_hex(read(checkpoint)?.as_bytes())));
    inputs.push(("eval_set".into(), fsnas::pipeline::sha256_hex(read(set_path)?.as_bytes())));
    manifest(g, &cfg, started, inputs).finish(&dir)?;
    Ok(())
}

fn trace_export(run: &Path, group: usize, format: Format) -> Result<()> {
    let direct = run.join("trace.json");
    let path = if direct.exists() {
        direct
    } else {
        stage_dir(run, group).join("trace.json")
    };
    let trace: EpochTrace = serde_json::from_str(&read(&path)?)?;
    match format {
        Format::Csv => print!("{}", trace.to_csv()),
        Format::Json => println!("{}", serde_json::to_string_pretty(&trace)?),
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let (net, m) = SuperNet::load(path)?;
    let counts: Vec<String> = net.plan().group_counts().iter().map(usize::to_string).collect();
    println!("checkpoint: {}", path.display());
    println!("format: {} v{}", m.format, m.version);
    println!("space: {}", m.space.name.as_deref().unwrap_or("unnamed"));
    println!("g: {} (groups per stage {})", net.plan().g, counts.join(","));
    println!("tensors: {}, parameters: {}", m.tensors.len(), net.num_params());
    println!("blob sha256: {} (verified)", m.blob_sha256);
    println!("meta: {}", m.meta);
    Ok(())
}
