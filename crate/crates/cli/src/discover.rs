use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{Context, Result};

use rla_discovery::curriculum::{run_curriculum, Curriculum, CurriculumReport};
use rla_discovery::metrics::{summary_csv, RunRecord};
use rla_discovery::search::PlayoutRow;

use crate::config::RunConfig;

pub const PLAYOUT_LOG: &str = "playouts.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Directory of one seed's run under the output root.
pub fn run_dir(out: &Path, curriculum: &str, method: &str, seed: u64) -> PathBuf {
    out.join(curriculum).join(method).join(format!("seed-{seed}"))
}

/// Per-playout log of a whole curriculum. Playout numbers keep counting
/// across stages, so the row count equals the playouts spent.
pub fn playout_log(report: &CurriculumReport) -> String {
    let mut s = format!("{}\n", PlayoutRow::HEADER);
    let mut offset = 0;
    for stage in &report.stages {
        for row in &stage.stats.rows {
            let mut r = row.clone();
            r.playout += offset;
            s.push_str(&r.to_csv());
            s.push('\n');
        }
        offset += stage.playouts;
    }
    s
}

fn write_run(dir: &Path, cfg: &RunConfig, c: &Curriculum, record: &RunRecord) -> Result<()> {
    std::fs::create_dir_all(dir.join("programs"))?;
    std::fs::write(dir.join(CONFIG_SNAPSHOT), cfg.to_toml())?;
    std::fs::write(dir.join(PLAYOUT_LOG), playout_log(&record.report))?;
    for (i, stage) in record.report.stages.iter().enumerate() {
        let env = c.stages[i].env();
        let text = format!("# env: {env}\n# stage {i}: {}\n{}", stage.name, stage.program);
        std::fs::write(dir.join("programs").join(format!("{i}-{}.txt", stage.name)), text)?;
    }
    std::fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(record)? + "\n")?;
    Ok(())
}

fn run_seed(cfg: &RunConfig, c: &Curriculum, out: &Path, seed: u64) -> Result<RunRecord> {
    let search = cfg.search_config();
    let report = run_curriculum(c, &search, seed, cfg.policy).map_err(anyhow::Error::msg)?;
    let dir = run_dir(out, &c.name, search.mode.name(), seed);
    let partial = dir.with_extension("partial");
    let record = RunRecord {
        seed,
        method: search.mode,
        curriculum: c.name.clone(),
        report,
        log_path: Some(dir.join(PLAYOUT_LOG)),
    };
    let _ = std::fs::remove_dir_all(&partial);
    let written = write_run(&partial, cfg, c, &record).and_then(|_| {
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::rename(&partial, &dir)?;
        Ok(())
    });
    if let Err(e) = written {
        let _ = std::fs::remove_dir_all(&partial);
        return Err(e).with_context(|| format!("writing {}", dir.display()));
    }
    Ok(record)
}

/// Runs every seed, `threads` at a time, and writes the summary CSV.
pub fn discover(cfg: &RunConfig, out: &Path, threads: usize) -> Result<Vec<RunRecord>> {
    let c = cfg.validate()?;
    let seeds = cfg.seeds();
    let queue = Mutex::new(seeds.clone());
    let done: Mutex<Vec<Result<RunRecord>>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, seeds.len().max(1)) {
            scope.spawn(|| loop {
                let Some(seed) = queue.lock().expect("queue lock").pop() else { break };
                log::info!("{}: seed {seed} started", c.name);
                let r = run_seed(cfg, &c, out, seed);
                done.lock().expect("results lock").push(r);
            });
        }
    });
    let mut records = Vec::new();
    for r in done.into_inner().expect("results lock") {
        records.push(r?);
    }
    records.sort_by_key(|r| r.seed);
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(SUMMARY_FILE), summary_csv(&records))?;
    Ok(records)
}

