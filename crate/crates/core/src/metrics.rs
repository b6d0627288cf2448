//! Aggregates over finished runs: ECDFs of playouts-to-success, success
//! rates, censored medians, revisit-rate curves and the revisit-ratio sweep.
//!
//! Every function here is a pure function of its inputs, so rebuilding a
//! report from saved records reproduces it byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::curriculum::{targets, CurriculumReport, CurriculumStage};
use crate::instance::{Family, InstanceSpec};
use crate::ir::{Env, Opcode, Program};
use crate::search::{search_stage, Mode, PlayoutRow, SearchConfig};

/// Column header of the ECDF CSV.
pub const ECDF_HEADER: &str = "tau,F";
/// Column header of the per-seed summary CSV.
pub const SUMMARY_HEADER: &str = "seed,method,curriculum,success,tau,playouts,seconds";
/// Column header of the revisit-rate curve CSV.
pub const CURVE_HEADER: &str = "method,seed,playout,unique_states,visits,revisit_rate";

/// Text written in place of an infinite τ.
pub const INF: &str = "inf";

/// One seed of one method on one curriculum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub method: Mode,
    pub curriculum: String,
    pub report: CurriculumReport,
    /// Per-playout CSV written alongside the report, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_path: Option<PathBuf>,
}

impl RunRecord {
    pub fn tau(&self) -> Option<usize> {
        self.report.tau()
    }

    pub fn seconds(&self) -> f64 {
        self.report.stages.iter().map(|s| s.seconds).sum()
    }

    /// Summary CSV row without the trailing newline.
    pub fn summary_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:?}",
            self.seed,
            self.method,
            self.curriculum,
            self.report.success,
            fmt_tau(self.tau()),
            self.report.cumulative_playouts,
            self.seconds()
        )
    }
}

pub fn fmt_tau(tau: Option<usize>) -> String {
    tau.map_or_else(|| INF.to_string(), |t| t.to_string())
}

pub fn parse_tau(s: &str) -> Result<Option<usize>, String> {
    let s = s.trim();
    if s == INF {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| format!("bad tau `{s}`"))
}

/// `F(x) = (1/N) Σ 𝕀(τ_i ≤ x)` evaluated at every distinct finite τ, in
/// increasing order. Failed runs count in `N` but never step the function,
/// so they cap it below 1. Empty input gives an empty curve.
pub fn ecdf(taus: &[Option<usize>]) -> Vec<(usize, f64)> {
    let n = taus.len() as f64;
    let mut finite: Vec<usize> = taus.iter().flatten().copied().collect();
    finite.sort_unstable();
    let mut out: Vec<(usize, f64)> = Vec::new();
    for (i, &t) in finite.iter().enumerate() {
        let f = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == t => last.1 = f,
            _ => out.push((t, f)),
        }
    }
    out
}

/// ECDF value at `x`.
pub fn ecdf_at(taus: &[Option<usize>], x: usize) -> f64 {
    if taus.is_empty() {
        return 0.0;
    }
    taus.iter().filter(|t| t.is_some_and(|t| t <= x)).count() as f64 / taus.len() as f64
}

/// Fraction of runs that finished within `budget` playouts.
pub fn success_rate(taus: &[Option<usize>], budget: usize) -> f64 {
    ecdf_at(taus, budget)
}

pub fn ecdf_csv(curve: &[(usize, f64)]) -> String {
    let mut s = format!("{ECDF_HEADER}\n");
    for (t, f) in curve {
        let _ = writeln!(s, "{t},{f:?}");
    }
    s
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Median and interquartile range, or a censoring marker when at least
/// half the runs failed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Median {
    Value { median: f64, q1: f64, q3: f64 },
    Censored,
}

impl Median {
    pub fn value(&self) -> Option<f64> {
        match self {
            Median::Value { median, .. } => Some(*median),
            Median::Censored => None,
        }
    }
}

/// Failed runs are dropped when fewer than half failed.
pub fn censored_median(taus: &[Option<usize>]) -> Median {
    let failed = taus.iter().filter(|t| t.is_none()).count();
    if taus.is_empty() || 2 * failed >= taus.len() {
        return Median::Censored;
    }
    let mut v: Vec<f64> = taus.iter().flatten().map(|&t| t as f64).collect();
    v.sort_by(f64::total_cmp);
    Median::Value {
        median: quantile(&v, 0.5),
        q1: quantile(&v, 0.25),
        q3: quantile(&v, 0.75),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub runs: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub median: Median,
    /// Mean τ over successful runs.
    pub mean_tau: Option<f64>,
    /// Mean playouts spent, successful or not.
    pub mean_playouts: f64,
}

pub fn summarize(records: &[&RunRecord]) -> MethodSummary {
    let taus: Vec<Option<usize>> = records.iter().map(|r| r.tau()).collect();
    let finite: Vec<f64> = taus.iter().flatten().map(|&t| t as f64).collect();
    let successes = finite.len();
    let runs = records.len();
    MethodSummary {
        runs,
        successes,
        success_rate: if runs == 0 { 0.0 } else { successes as f64 / runs as f64 },
        median: censored_median(&taus),
        mean_tau: (successes > 0).then(|| finite.iter().sum::<f64>() / successes as f64),
        mean_playouts: if runs == 0 {
            0.0
        } else {
            records.iter().map(|r| r.report.cumulative_playouts as f64).sum::<f64>() / runs as f64
        },
    }
}

/// Records grouped by (curriculum, method), in a fixed order.
pub fn group<'a>(records: &'a [RunRecord]) -> BTreeMap<(String, String), Vec<&'a RunRecord>> {
    let mut out: BTreeMap<(String, String), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        out.entry((r.curriculum.clone(), r.method.to_string())).or_default().push(r);
    }
    for v in out.values_mut() {
        v.sort_by_key(|r| r.seed);
    }
    out
}

pub fn summary_csv(records: &[RunRecord]) -> String {
    let mut rows: Vec<&RunRecord> = records.iter().collect();
    rows.sort_by(|a, b| (&a.curriculum, a.method.name(), a.seed).cmp(&(&b.curriculum, b.method.name(), b.seed)));
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.summary_row());
    }
    s
}

/// Success-rate table: one row per (curriculum, method).
pub fn success_table_csv(records: &[RunRecord]) -> String {
    let mut s = String::from("curriculum,method,runs,successes,success_rate,median_tau,q1,q3,mean_playouts\n");
    for ((cur, method), rs) in group(records) {
        let m = summarize(&rs);
        let (med, q1, q3) = match m.median {
            Median::Value { median, q1, q3 } => (format!("{median:?}"), format!("{q1:?}"), format!("{q3:?}")),
            Median::Censored => ("censored".into(), String::new(), String::new()),
        };
        let _ = writeln!(
            s,
            "{cur},{method},{},{},{:?},{med},{q1},{q3},{:?}",
            m.runs, m.successes, m.success_rate, m.mean_playouts
        );
    }
    s
}

/// Per-method ECDF over cumulative playouts.
pub fn ecdf_by_method_csv(records: &[RunRecord]) -> String {
    let mut s = String::from("curriculum,method,tau,F\n");
    for ((cur, method), rs) in group(records) {
        let taus: Vec<Option<usize>> = rs.iter().map(|r| r.tau()).collect();
        for (t, f) in ecdf(&taus) {
            let _ = writeln!(s, "{cur},{method},{t},{f:?}");
        }
    }
    s
}

/// Unique-state and revisit-rate curves from per-playout logs.
pub fn revisit_curve_csv(runs: &[(Mode, u64, Vec<PlayoutRow>)]) -> String {
    let mut sorted: Vec<&(Mode, u64, Vec<PlayoutRow>)> = runs.iter().collect();
    sorted.sort_by(|a, b| (a.0.name(), a.1).cmp(&(b.0.name(), b.1)));
    let mut s = format!("{CURVE_HEADER}\n");
    for (mode, seed, rows) in sorted {
        for r in rows {
            let _ = writeln!(
                s,
                "{mode},{seed},{},{},{},{:?}",
                r.playout,
                r.unique_states,
                r.visits,
                r.revisit_rate
            );
        }
    }
    s
}

/// Parses a per-playout log written with [`PlayoutRow::HEADER`].
pub fn parse_playout_log(text: &str) -> Result<Vec<PlayoutRow>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == PlayoutRow::HEADER => {}
        _ => return Err("missing playout log header".into()),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| PlayoutRow::from_csv(l).map_err(|e| format!("line {}: {e}", i + 2)))
        .collect()
}

/// Settings of the revisit-ratio sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub playouts: usize,
    pub seeds: Vec<u64>,
    pub m: usize,
    pub n: usize,
    /// Playouts spent at one root before it advances.
    pub slice: usize,
    /// Program to rediscover from the empty program.
    pub target: String,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            playouts: 2000,
            seeds: vec![0, 1, 2],
            m: 200,
            n: 10,
            slice: 500,
            target: "sketched_precond_gd".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub library: usize,
    pub length: usize,
    /// Mean graph-search revisit ratio; `None` when the cell cannot be built.
    pub mcgs: Option<f64>,
    pub mcts: Option<f64>,
}

/// Opcode library of `size` operators that still contains every opcode the
/// target uses: the target's opcodes first, then the rest of the
/// environment library in its usual order.
pub fn library_of_size(target: &Program, size: usize) -> Option<Vec<Opcode>> {
    let full: Vec<Opcode> = target.env.ops().iter().copied().filter(|&o| o != Opcode::DoNothing).collect();
    let mut lib: Vec<Opcode> = Vec::new();
    for ins in target.setup.iter().chain(&target.iter) {
        if !lib.contains(&ins.op) {
            lib.push(ins.op);
        }
    }
    // DO_NOTHING is never inserted but still counts toward the library.
    let counted = size.checked_sub(1)?;
    if counted < lib.len() || counted > full.len() {
        return None;
    }
    for op in full {
        if lib.len() == counted {
            break;
        }
        if !lib.contains(&op) {
            lib.push(op);
        }
    }
    Some(lib)
}

/// Revisit ratio of a rediscovery search for every (library size, length)
/// cell. Rollouts run to the length cap and the stage keeps searching past
/// a discovery so every run spends the full budget. Fails if any tree
/// search revisits a state.
pub fn scalability_sweep(library_sizes: &[usize], lengths: &[usize], cfg: &SweepConfig) -> Result<Vec<SweepCell>, String> {
    let target = targets::try_get(&cfg.target).ok_or_else(|| format!("unknown target `{}`", cfg.target))?;
    if target.env != Env::Linear {
        return Err("the sweep runs on linear-system targets".into());
    }
    let mut cells = Vec::new();
    for &library in library_sizes {
        for &length in lengths {
            let mut cell = SweepCell {
                library,
                length,
                mcgs: None,
                mcts: None,
            };
            let Some(lib) = library_of_size(&target, library) else {
                cells.push(cell);
                continue;
            };
            let mut stage = CurriculumStage::new(
                &format!("sweep-l{library}-n{length}"),
                InstanceSpec::new(Family::LowCond, cfg.m, cfg.n),
                vec![target.clone()],
                cfg.playouts,
            );
            stage.max_added = length;
            let base = Program::empty(Env::Linear);
            for mode in [Mode::McgsUcd, Mode::Mcts] {
                let search = SearchConfig {
                    mode,
                    slice: cfg.slice,
                    horizon: length,
                    stop_on_discovery: false,
                    library: Some(lib.clone()),
                    ..SearchConfig::default()
                };
                let mut total = 0.0;
                for &seed in &cfg.seeds {
                    total += search_stage(&stage, &base, &search, seed)?.stats.revisit_rate;
                }
                let mean = total / cfg.seeds.len().max(1) as f64;
                if mode == Mode::Mcts {
                    if mean != 0.0 {
                        return Err(format!("tree search revisited states (ratio {mean}) at library {library}, length {length}"));
                    }
                    cell.mcts = Some(mean);
                } else {
                    cell.mcgs = Some(mean);
                }
            }
            cells.push(cell);
        }
    }
    Ok(cells)
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut s = String::from("library,length,mcgs,mcts\n");
    for c in cells {
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:?}"));
        let _ = writeln!(s, "{},{},{},{}", c.library, c.length, f(c.mcgs), f(c.mcts));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ecdf_with_failures() {
        let e = ecdf(&[Some(10), None, Some(5)]);
        assert_eq!(e, vec![(5, 1.0 / 3.0), (10, 2.0 / 3.0)]);
        assert_eq!(ecdf_at(&[Some(10), None, Some(5)], 7), 1.0 / 3.0);
    }

    #[test]
    fn ecdf_single_step() {
        assert_eq!(ecdf(&[Some(4), Some(4), Some(4)]), vec![(4, 1.0)]);
        assert!(ecdf(&[]).is_empty());
    }

    #[test]
    fn censoring() {
        assert_eq!(censored_median(&[Some(1), None]), Median::Censored);
        let m = censored_median(&[Some(1), Some(3), None, Some(2), Some(10)]);
        assert_eq!(m.value(), Some(2.5));
        assert_eq!(censored_median(&[Some(1), Some(2), Some(3)]).value(), Some(2.0));
    }

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.25), 1.75);
        assert_eq!(quantile(&v, 1.0), 4.0);
    }

    #[test]
    fn tau_text_round_trip() {
        for t in [None, Some(0), Some(451)] {
            assert_eq!(parse_tau(&fmt_tau(t)).unwrap(), t);
        }
        assert!(parse_tau("x").is_err());
    }

    #[test]
    fn libraries() {
        let t = targets::get("sketched_precond_gd");
        let used = library_of_size(&t, 17).unwrap();
        assert_eq!(used.len(), 16);
        assert_eq!(library_of_size(&t, 8).unwrap().len(), 7);
        assert!(library_of_size(&t, 7).is_none());
        assert!(library_of_size(&t, 20).is_none());
    }
}
