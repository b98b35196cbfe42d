//! Markdown reports over experiment run directories.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Component, Path, PathBuf};

use crate::error::{Error, Result};
use crate::experiment::{Condition, ExperimentSummary};

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub summary: ExperimentSummary,
}

/// Reads `summary.json` from every run directory. All missing files are
/// reported together.
pub fn load_runs(dirs: &[PathBuf]) -> Result<Vec<RunSummary>> {
    if dirs.is_empty() {
        return Err(Error::Empty("run directories"));
    }
    let (found, missing): (Vec<_>, Vec<_>) = dirs.iter().map(|d| d.join("summary.json")).partition(|p| p.is_file());
    if !missing.is_empty() {
        return Err(Error::MissingSummaries(missing));
    }
    let mut runs = found
        .into_iter()
        .map(|path| {
            let summary = serde_json::from_slice(&std::fs::read(&path)?)
                .map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))?;
            let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
            let dir = std::fs::canonicalize(&dir).unwrap_or(dir);
            Ok(RunSummary { dir, summary })
        })
        .collect::<Result<Vec<_>>>()?;
    runs.sort_by(|a, b| {
        (a.summary.condition, a.summary.seed, &a.dir).cmp(&(b.summary.condition, b.summary.seed, &b.dir))
    });
    Ok(runs)
}

/// `mean ± half-range`, or the bare value for a single sample.
fn spread(values: &[f64]) -> String {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return format!("{mean:.3}");
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    format!("{mean:.3} ± {:.3}", (hi - lo) / 2.0)
}

fn parts(p: &Path) -> Vec<Component<'_>> {
    p.components().filter(|c| *c != Component::CurDir).collect()
}

/// `path` relative to `base`, both taken as given (no filesystem access).
fn relative_to(path: &Path, base: &Path) -> PathBuf {
    let (p, b) = (parts(path), parts(base));
    let common = p.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &p[common..] {
        out.push(c.as_os_str());
    }
    out
}

fn confounded_test(s: &crate::experiment::StageReport, class: usize) -> f64 {
    s.test_accuracy_per_class.get(class).copied().unwrap_or(f64::NAN)
}

/// Renders the report. Panel links are relative to `out_dir`.
pub fn render_report(runs: &[RunSummary], out_dir: &Path) -> String {
    let mut md = String::from("# Confounder experiment report\n\n");
    let hashes: BTreeSet<&str> = runs.iter().map(|r| r.summary.dataset_hash.as_str()).collect();
    if hashes.len() > 1 {
        let list: Vec<String> = hashes.iter().map(|h| format!("`{}`", &h[..h.len().min(12)])).collect();
        let _ = writeln!(
            md,
            "> **Warning:** runs come from {} different datasets ({}); results are not directly comparable.\n",
            hashes.len(),
            list.join(", ")
        );
    }

    md.push_str("## By condition\n\n");
    md.push_str("Values are `mean ± half-range` across runs.\n\n");
    md.push_str("| condition | runs | reliance before | reliance after | confounded-class test acc | test acc | best IoU |\n");
    md.push_str("|---|---|---|---|---|---|---|\n");
    for condition in Condition::ALL {
        let group: Vec<&ExperimentSummary> = runs
            .iter()
            .map(|r| &r.summary)
            .filter(|s| s.condition == condition)
            .collect();
        if group.is_empty() {
            continue;
        }
        let col = |f: &dyn Fn(&ExperimentSummary) -> f64| spread(&group.iter().map(|s| f(s)).collect::<Vec<_>>());
        let _ = writeln!(
            md,
            "| {condition} | {} | {} | {} | {} | {} | {} |",
            group.len(),
            col(&|s| s.initial.confound_reliance),
            col(&|s| s.last.confound_reliance),
            col(&|s| confounded_test(&s.last, s.confounded_class)),
            col(&|s| s.last.test_accuracy),
            col(&|s| s.best_confounded_iou()),
        );
    }

    md.push_str("\n## Runs\n\n");
    md.push_str("| condition | seed | marked | reliance | confounded-class test acc | test acc | best IoU | dataset |\n");
    md.push_str("|---|---|---|---|---|---|---|---|\n");
    for r in runs {
        let s = &r.summary;
        let marked: Vec<String> = s.marked_concepts.iter().map(|j| j.to_string()).collect();
        let _ = writeln!(
            md,
            "| {} | {} | {} | {:.3} → {:.3} | {:.3} → {:.3} | {:.3} | {:.3} | `{}` |",
            s.condition,
            s.seed,
            if marked.is_empty() { "-".to_string() } else { marked.join(", ") },
            s.initial.confound_reliance,
            s.last.confound_reliance,
            confounded_test(&s.initial, s.confounded_class),
            confounded_test(&s.last, s.confounded_class),
            s.last.test_accuracy,
            s.best_confounded_iou(),
            &s.dataset_hash[..s.dataset_hash.len().min(12)],
        );
    }

    md.push_str("\n## Panels\n\n");
    md.push_str("Each panel shows the nearest training patch, the prototype and the attribution overlay.\n");
    for r in runs {
        let s = &r.summary;
        let _ = writeln!(md, "\n### {} seed {}\n", s.condition, s.seed);
        for p in s.prototypes.iter().filter(|p| p.owner_class == s.confounded_class) {
            let panel = relative_to(&r.dir.join("panels").join(format!("final_concept{}.ppm", p.concept)), out_dir);
            let _ = writeln!(
                md,
                "- concept {} (weight {:.3}, confounder similarity {:.3}, IoU {:.3}): ![concept {}]({})",
                p.concept,
                p.weight,
                p.confound_similarity,
                p.causal_iou,
                p.concept,
                panel.display()
            );
        }
    }
    md
}

/// Loads the runs and writes the report to `out`.
pub fn write_report(dirs: &[PathBuf], out: &Path) -> Result<Vec<RunSummary>> {
    let runs = load_runs(dirs)?;
    let out_dir = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&out_dir)?;
    let out_dir = std::fs::canonicalize(&out_dir)?;
    crate::persist::write_atomic(out, render_report(&runs, &out_dir).as_bytes())?;
    Ok(runs)
}
